use super::{Combine, MemoryBank, ModelConfig, ModelError, TaskPrompt};
use crate::grad::{RngState, Value};
use crate::nn::{self, MotionContext, ParamStore, Tape};
use crate::scalar::Scalar;
use crate::world::Episode;

/// Diagonal Gaussian over the stochastic state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian {
    pub mu: Value,
    pub sigma: Value,
}

/// Everything computed at one observed or imagined step.
#[derive(Clone, Debug)]
pub struct StepOutput {
    /// Deterministic history entering the step.
    pub h: Value,
    pub h_tilde: Value,
    pub prior: Option<Gaussian>,
    /// Present on observed steps only.
    pub posterior: Option<Gaussian>,
    /// Noise used for `s = mu + sigma * eps`.
    pub eps: Vec<f64>,
    pub s: Value,
    /// Predicted action for this step.
    pub action: Value,
    pub logits: Value,
}

/// Recurrent state handed from the observed window to imagination.
#[derive(Clone, Debug)]
pub struct RolloutStart {
    /// History after the last observed transition.
    pub h: Value,
    /// Last predicted action.
    pub action: Value,
    /// `(h, h_tilde, s)` of the last observed step.
    pub last: (Value, Value, Value),
    pub bank: MemoryBank<Value>,
    pub b_hat: Option<Value>,
    pub next_step: usize,
}

#[derive(Clone, Debug)]
pub struct SequenceOutput {
    pub observed: Vec<StepOutput>,
    pub future: Vec<StepOutput>,
    /// Observed frame chosen for static scene propagation.
    pub ssp_frame: Option<usize>,
    pub start: RolloutStart,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FutureMode {
    /// Roll the state forward with the prior and policy.
    #[default]
    Rollout,
    /// Decode every future step from the last observed state.
    Fixed,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ForwardOptions {
    /// Use the prior in place of the posterior on observed steps.
    pub force_posterior_to_prior: bool,
    /// Use `eps = 0`, i.e. the mean latent.
    pub zero_noise: bool,
    /// Pin every standard deviation to the floor.
    pub sigma_at_floor: bool,
    pub future: FutureMode,
    /// Override the randomly selected propagation frame.
    pub ssp_frame: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mssm<S> {
    pub cfg: ModelConfig,
    pub params: ParamStore<S>,
}

fn name_stream(name: &str) -> u64 {
    // FNV-1a, so each group's initial values depend only on its name
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl<S: Scalar> Mssm<S> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let root = RngState::new(seed);
        let mut p = ParamStore::new();
        let (fh, fw) = cfg.feature_hw();
        let f = cfg.flags;
        let lin = |p: &mut ParamStore<S>, name: &str, i: usize, o: usize| p.add_linear(name, i, o, &mut root.fork(name_stream(name)));
        let conv = |p: &mut ParamStore<S>, name: &str, i: usize, o: usize, k: usize| p.add_conv(name, i, o, k, &mut root.fork(name_stream(name)));

        conv(&mut p, "enc.conv1", cfg.grid_channels(), cfg.c_b, 3)?;
        conv(&mut p, "enc.conv2", cfg.c_b, cfg.c_b, 3)?;
        lin(&mut p, "compress", cfg.c_b, cfg.d_x)?;
        lin(&mut p, "post.hidden", cfg.d_h + 2 + cfg.d_x, cfg.hidden)?;
        lin(&mut p, "post.out", cfg.hidden, 2 * cfg.d_s)?;
        lin(&mut p, "prior.hidden", cfg.d_h + 2, cfg.hidden)?;
        lin(&mut p, "prior.out", cfg.hidden, 2 * cfg.d_s)?;
        lin(&mut p, "policy.hidden", cfg.d_h + cfg.d_s, cfg.hidden)?;
        lin(&mut p, "policy.out", cfg.hidden, 2)?;
        if f.dmb {
            let init = nn::Init::fan_in(cfg.d_h);
            let d = cfg.d_h;
            p.add_group(
                "attn",
                &[("wq", vec![d, d], init), ("wk", vec![d, d], init), ("wv", vec![d, d], init)],
                &mut root.fork(name_stream("attn")),
            )?;
        }
        if f.mln {
            lin(&mut p, "xi1", 3, cfg.d_s)?;
            lin(&mut p, "xi2", 3, cfg.d_s)?;
            let b = p.entry_mut("xi1", "b").expect("xi1 bias");
            b.data.fill(S::one());
            b.init = nn::Init::Ones;
        }
        p.add_gru("gru", cfg.d_s, cfg.d_h, &mut root.fork(name_stream("gru")))?;
        if f.ssp {
            conv(&mut p, "ssp.z1", cfg.c_b, cfg.c_b, 3)?;
            conv(&mut p, "ssp.z2", cfg.c_b, cfg.c_b, 3)?;
        }
        lin(&mut p, "m.expand", cfg.d_h + cfg.d_s, cfg.c_m * fh * fw)?;
        conv(&mut p, "m.conv", cfg.c_m, cfg.c_m, 3)?;
        conv(&mut p, "dec.in_m", cfg.c_m, cfg.c_dec, 3)?;
        if f.ssp && cfg.combine == Combine::Concat {
            conv(&mut p, "ssp.decoder_in", cfg.c_b, cfg.c_dec, 3)?;
        }
        if f.prompt {
            p.add_embedding("prompt.table", TaskPrompt::vocabulary(), cfg.prompt_dim, &mut root.fork(name_stream("prompt.table")))?;
            lin(&mut p, "prompt.film", cfg.prompt_dim, 2 * cfg.c_dec)?;
        }
        conv(&mut p, "dec.up", cfg.c_dec, cfg.c_dec, 3)?;
        conv(&mut p, "dec.out", cfg.c_dec, cfg.grid_channels() * 4, 1)?;
        Ok(Self { cfg, params: p })
    }

    pub fn tape(&self, trainable: bool) -> Tape<'_, S> {
        Tape::new(&self.params, trainable)
    }

    fn vector(t: &mut Tape<S>, xs: &[f64]) -> Result<Value, ModelError> {
        Ok(t.g.constant(&[xs.len()], xs.iter().map(|&x| S::lit(x)).collect())?)
    }

    /// Observation tensor `(Z*C) x H x W` of step `step`.
    pub fn observation(&self, t: &mut Tape<S>, ep: &Episode, step: usize) -> Result<Value, ModelError> {
        let data = ep.observation_onehot(step).into_iter().map(S::lit).collect();
        Ok(t.g.constant(&[self.cfg.grid_channels(), ep.height, ep.width], data)?)
    }

    /// Two stride-2 convolutions: `(Z*C) x H x W -> C_b x H/4 x W/4`.
    pub fn encode_bev(&self, t: &mut Tape<S>, o: Value) -> Result<Value, ModelError> {
        let want = [self.cfg.grid_channels(), self.cfg.height, self.cfg.width];
        if t.g.shape(o) != want {
            return Err(ModelError::Dims { what: "observation".into(), expected: want.to_vec(), got: t.g.shape(o).to_vec() });
        }
        let b = nn::conv2d(t, "enc.conv1", o, 2, 1)?;
        let b = nn::silu(&mut t.g, b)?;
        let b = nn::conv2d(t, "enc.conv2", b, 2, 1)?;
        Ok(nn::silu(&mut t.g, b)?)
    }

    /// Spatial mean followed by a linear map to `D_x`.
    pub fn compress_bev(&self, t: &mut Tape<S>, b: Value) -> Result<Value, ModelError> {
        let pooled = Self::pool(t, b)?;
        Ok(nn::linear(t, "compress", pooled)?)
    }

    /// Per-channel spatial mean of a `C x H x W` grid.
    pub fn pool(t: &mut Tape<S>, b: Value) -> Result<Value, ModelError> {
        let s = t.g.shape(b).to_vec();
        let flat = t.g.reshape(b, &[s[0], s[1] * s[2]])?;
        let sum = t.g.sum_axis(flat, 1)?;
        Ok(t.g.scale(sum, S::lit(1.0 / (s[1] * s[2]) as f64)))
    }

    fn gaussian_head(&self, t: &mut Tape<S>, prefix: &str, input: Value, step: usize, opts: &ForwardOptions) -> Result<Gaussian, ModelError> {
        let d = self.cfg.d_s;
        let hid = nn::linear(t, &format!("{prefix}.hidden"), input)?;
        let hid = nn::silu(&mut t.g, hid)?;
        let out = nn::linear(t, &format!("{prefix}.out"), hid)?;
        let mu = t.g.slice(out, 0, 0, d)?;
        let sigma = if opts.sigma_at_floor {
            t.g.full(&[d], S::lit(self.cfg.sigma_floor))
        } else {
            let pre = t.g.slice(out, 0, d, d)?;
            let sp = t.g.softplus(pre);
            t.g.offset(sp, S::lit(self.cfg.sigma_floor))
        };
        let what = if prefix == "post" { "posterior" } else { "prior" };
        if !t.g.data(mu).iter().chain(t.g.data(sigma)).all(|v| v.is_finite()) {
            return Err(ModelError::NonFinite { step, what });
        }
        Ok(Gaussian { mu, sigma })
    }

    /// `q(s | h, a_prev, x)`.
    pub fn posterior(&self, t: &mut Tape<S>, h: Value, a_prev: Value, x: Value, step: usize, opts: &ForwardOptions) -> Result<Gaussian, ModelError> {
        let input = t.g.concat(&[h, a_prev, x], 0)?;
        self.gaussian_head(t, "post", input, step, opts)
    }

    /// `p(s | h, a_hat_prev)`.
    pub fn prior(&self, t: &mut Tape<S>, h: Value, a_hat_prev: Value, step: usize, opts: &ForwardOptions) -> Result<Gaussian, ModelError> {
        let input = t.g.concat(&[h, a_hat_prev], 0)?;
        self.gaussian_head(t, "prior", input, step, opts)
    }

    /// Standard normal used before any history exists.
    pub fn initial_prior(&self, t: &mut Tape<S>, opts: &ForwardOptions) -> Gaussian {
        let d = self.cfg.d_s;
        let mu = t.g.zeros(&[d]);
        let sd = if opts.sigma_at_floor { S::lit(self.cfg.sigma_floor) } else { S::one() };
        let sigma = t.g.full(&[d], sd);
        Gaussian { mu, sigma }
    }

    /// Reparameterized draw `mu + sigma * eps`; returns the sample and `eps`.
    pub fn sample(&self, t: &mut Tape<S>, dist: &Gaussian, rng: &mut RngState, opts: &ForwardOptions) -> Result<(Value, Vec<f64>), ModelError> {
        let eps = if opts.zero_noise { vec![0.0; self.cfg.d_s] } else { rng.normals(self.cfg.d_s) };
        let e = Self::vector(t, &eps)?;
        let noise = t.g.mul(dist.sigma, e)?;
        Ok((t.g.add(dist.mu, noise)?, eps))
    }

    /// Action squashed into the actuator bounds by `tanh`.
    pub fn policy(&self, t: &mut Tape<S>, h: Value, s: Value) -> Result<Value, ModelError> {
        let input = t.g.concat(&[h, s], 0)?;
        let u = nn::mlp(t, &["policy.hidden", "policy.out"], input)?;
        let squashed = t.g.tanh(u);
        let bounds = Self::vector(t, &self.cfg.action_bounds)?;
        Ok(t.g.mul(squashed, bounds)?)
    }

    /// Cross-attention of `h` over the bank; `h` itself when the bank is
    /// empty or the memory bank is disabled.
    pub fn refine_history(&self, t: &mut Tape<S>, h: Value, bank: &MemoryBank<Value>) -> Result<Value, ModelError> {
        if !self.cfg.flags.dmb || bank.is_empty() {
            return Ok(h);
        }
        let items = bank.items();
        Ok(nn::cross_attention(t, "attn", h, &items, &items)?.0)
    }

    /// `h_next = gru(h_tilde, mln(s, ctx))`; without motion-aware
    /// normalization the sample enters the cell unchanged.
    pub fn transition(&self, t: &mut Tape<S>, h_tilde: Value, s: Value, ctx: &MotionContext) -> Result<Value, ModelError> {
        let input = if self.cfg.flags.mln { nn::mln(t, s, ctx, "xi1", "xi2")?.0 } else { s };
        Ok(nn::gru_cell(t, "gru", h_tilde, input)?)
    }

    /// Transition whose motion context is a predicted action over one step.
    pub fn transition_predicted(&self, t: &mut Tape<S>, h_tilde: Value, s: Value, action: Value) -> Result<Value, ModelError> {
        if !self.cfg.flags.mln {
            return Ok(nn::gru_cell(t, "gru", h_tilde, s)?);
        }
        let dt = t.g.constant(&[1], vec![S::one()])?;
        let feats = t.g.concat(&[action, dt], 0)?;
        let input = nn::mln_features(t, s, feats, "xi1", "xi2")?.0;
        Ok(nn::gru_cell(t, "gru", h_tilde, input)?)
    }

    /// Two-layer convolutional map of a selected frame's feature.
    pub fn ssp(&self, t: &mut Tape<S>, b_prime: Value) -> Result<Value, ModelError> {
        let z = nn::conv2d(t, "ssp.z1", b_prime, 1, 1)?;
        let z = nn::silu(&mut t.g, z)?;
        Ok(nn::conv2d(t, "ssp.z2", z, 1, 1)?)
    }

    /// Occupancy logits `(Z*C) x H x W` from a latent state, the propagated
    /// static feature and the task prompt.
    pub fn decode_occupancy(
        &self,
        t: &mut Tape<S>,
        h_tilde: Value,
        s: Value,
        b_hat: Option<Value>,
        prompt: &TaskPrompt,
    ) -> Result<Value, ModelError> {
        let u = self.decode_features(t, h_tilde, s, b_hat, prompt)?;
        let o = nn::conv2d(t, "dec.out", u, 1, 0)?;
        Ok(nn::pixel_shuffle(&mut t.g, o, 2)?)
    }

    /// Decoder features `c_dec x H/2 x W/2` feeding the output projection.
    pub fn decode_features(
        &self,
        t: &mut Tape<S>,
        h_tilde: Value,
        s: Value,
        b_hat: Option<Value>,
        prompt: &TaskPrompt,
    ) -> Result<Value, ModelError> {
        let cfg = &self.cfg;
        let (fh, fw) = cfg.feature_hw();
        let latent = t.g.concat(&[h_tilde, s], 0)?;
        let m = nn::linear(t, "m.expand", latent)?;
        let m = t.g.reshape(m, &[cfg.c_m, fh, fw])?;
        let m = nn::silu(&mut t.g, m)?;
        let m = nn::conv2d(t, "m.conv", m, 1, 1)?;
        let m = nn::silu(&mut t.g, m)?;
        let d = match (cfg.flags.ssp, b_hat, cfg.combine) {
            (true, Some(b), Combine::Concat) => {
                let dm = nn::conv2d(t, "dec.in_m", m, 1, 1)?;
                let db = nn::conv2d(t, "ssp.decoder_in", b, 1, 1)?;
                t.g.add(dm, db)?
            }
            (true, Some(b), Combine::Add) => {
                let sum = t.g.add(m, b)?;
                nn::conv2d(t, "dec.in_m", sum, 1, 1)?
            }
            _ => nn::conv2d(t, "dec.in_m", m, 1, 1)?,
        };
        let d = if cfg.flags.prompt { self.apply_prompt(t, d, prompt, "prompt.film")? } else { d };
        let d = nn::silu(&mut t.g, d)?;
        let u = nn::upsample2(&mut t.g, d)?;
        let u = nn::conv2d(t, "dec.up", u, 1, 1)?;
        Ok(nn::silu(&mut t.g, u)?)
    }

    /// Prompt-conditioned instance normalization of a `C x H x W` grid; the
    /// `film` group maps the prompt embedding to per-channel scale and shift.
    pub fn apply_prompt(&self, t: &mut Tape<S>, x: Value, prompt: &TaskPrompt, film: &str) -> Result<Value, ModelError> {
        let c = t.g.shape(x)[0];
        let e = nn::embed(t, "prompt.table", prompt.token)?;
        let ss = nn::linear(t, film, e)?;
        let scale = t.g.slice(ss, 0, 0, c)?;
        let shift = t.g.slice(ss, 0, c, c)?;
        Ok(nn::adain(&mut t.g, x, scale, shift)?)
    }

    /// Uniform choice of the propagated frame among `steps` observed frames.
    pub fn select_frame(rng: &mut RngState, steps: usize) -> usize {
        rng.below(steps)
    }

    /// Runs the observed window `1..=T` of an episode.
    pub fn observe_sequence(
        &self,
        t: &mut Tape<S>,
        ep: &Episode,
        prompt: &TaskPrompt,
        rng: &mut RngState,
        opts: &ForwardOptions,
    ) -> Result<SequenceOutput, ModelError> {
        let cfg = &self.cfg;
        let steps = cfg.t_obs;
        if ep.steps() < steps {
            return Err(ModelError::EpisodeTooShort { need: steps, got: ep.steps() });
        }
        let mut features = Vec::with_capacity(steps);
        for k in 0..steps {
            let o = self.observation(t, ep, k)?;
            features.push(self.encode_bev(t, o)?);
        }
        let (ssp_frame, b_hat) = if cfg.flags.ssp {
            let k = match opts.ssp_frame {
                Some(k) => k.min(steps - 1),
                None => Self::select_frame(rng, steps),
            };
            (Some(k), Some(self.ssp(t, features[k])?))
        } else {
            (None, None)
        };

        let mut h = t.g.zeros(&[cfg.d_h]);
        let mut a_prev = t.g.zeros(&[2]);
        let mut a_hat_prev = None;
        let mut bank = MemoryBank::new(cfg.memory);
        let mut observed = Vec::with_capacity(steps);
        for (k, &b) in features.iter().enumerate() {
            let x = self.compress_bev(t, b)?;
            let prior = match a_hat_prev {
                None => self.initial_prior(t, opts),
                Some(a) => self.prior(t, h, a, k, opts)?,
            };
            let post = if opts.force_posterior_to_prior { prior } else { self.posterior(t, h, a_prev, x, k, opts)? };
            let (s, eps) = self.sample(t, &post, rng, opts)?;
            let h_tilde = self.refine_history(t, h, &bank)?;
            if cfg.flags.dmb {
                bank.push(k, h);
            }
            let action = self.policy(t, h, s)?;
            let logits = self.decode_occupancy(t, h_tilde, s, b_hat, prompt)?;
            observed.push(StepOutput { h, h_tilde, prior: Some(prior), posterior: Some(post), eps, s, action, logits });
            h = self.transition(t, h_tilde, s, &ep.motion_context(k))?;
            a_prev = Self::vector(t, &ep.action(k))?;
            a_hat_prev = Some(action);
        }
        let last = observed.last().expect("t_obs >= 1");
        let start = RolloutStart {
            h,
            action: last.action,
            last: (last.h, last.h_tilde, last.s),
            bank,
            b_hat,
            next_step: steps,
        };
        Ok(SequenceOutput { observed, future: Vec::new(), ssp_frame, start })
    }

    /// Predicts `horizon` future steps from the end of an observed window.
    /// Only the recurrent state is consumed; no observation enters.
    pub fn imagine(
        &self,
        t: &mut Tape<S>,
        start: &RolloutStart,
        horizon: usize,
        prompt: &TaskPrompt,
        rng: &mut RngState,
        opts: &ForwardOptions,
    ) -> Result<Vec<StepOutput>, ModelError> {
        let mut out = Vec::with_capacity(horizon);
        if horizon == 0 {
            return Ok(out);
        }
        if opts.future == FutureMode::Fixed {
            let (h, h_tilde, s) = start.last;
            let logits = self.decode_occupancy(t, h_tilde, s, start.b_hat, prompt)?;
            let action = self.policy(t, h, s)?;
            for _ in 0..horizon {
                out.push(StepOutput { h, h_tilde, prior: None, posterior: None, eps: Vec::new(), s, action, logits });
            }
            return Ok(out);
        }
        let mut bank = start.bank.clone();
        let (mut h, mut a_prev) = (start.h, start.action);
        for k in 0..horizon {
            let step = start.next_step + k;
            let prior = self.prior(t, h, a_prev, step, opts)?;
            let (s, eps) = self.sample(t, &prior, rng, opts)?;
            let h_tilde = self.refine_history(t, h, &bank)?;
            if self.cfg.flags.dmb {
                bank.push(step, h);
            }
            let action = self.policy(t, h, s)?;
            let logits = self.decode_occupancy(t, h_tilde, s, start.b_hat, prompt)?;
            out.push(StepOutput { h, h_tilde, prior: Some(prior), posterior: None, eps, s, action, logits });
            h = self.transition_predicted(t, h_tilde, s, action)?;
            a_prev = action;
        }
        Ok(out)
    }

    /// Observed window followed by `L` imagined steps.
    pub fn run(
        &self,
        t: &mut Tape<S>,
        ep: &Episode,
        prompt: &TaskPrompt,
        rng: &mut RngState,
        opts: &ForwardOptions,
    ) -> Result<SequenceOutput, ModelError> {
        let mut seq = self.observe_sequence(t, ep, prompt, rng, opts)?;
        seq.future = self.imagine(t, &seq.start, self.cfg.l_future, prompt, rng, opts)?;
        Ok(seq)
    }
}
