//! Differentiable building blocks over a [`Tape`].
//!
//! Every block reads its weights from a named parameter group; the group
//! layouts are the ones created by the `ParamStore::add_*` helpers.

use super::{NnError, Tape};
use crate::grad::{Graph, GradError, Value};
use crate::scalar::Scalar;

pub const LN_EPS: f64 = 1e-5;

/// Motion attributes feeding motion-aware normalization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionContext {
    /// Displacement per step in grid cells (forward, lateral).
    pub v: [f64; 2],
    /// Relative time interval in steps.
    pub dt: f64,
}

impl MotionContext {
    pub fn new(v: [f64; 2], dt: f64) -> Self {
        debug_assert!(dt >= 0.0);
        Self { v, dt }
    }

    /// Flattened `(v, dt)` input of the modulation layers.
    pub fn features(&self) -> [f64; 3] {
        [self.v[0], self.v[1], self.dt]
    }
}

pub fn silu<S: Scalar>(g: &mut Graph<S>, x: Value) -> Result<Value, GradError> {
    let s = g.sigmoid(x);
    g.mul(x, s)
}

/// `w x + b` for a vector `x`.
pub fn linear<S: Scalar>(t: &mut Tape<S>, group: &str, x: Value) -> Result<Value, NnError> {
    let w = t.param(group, "w")?;
    let b = t.param(group, "b")?;
    let wx = t.g.matmul(w, x)?;
    Ok(t.g.add(wx, b)?)
}

/// Linear layers joined by SiLU; no activation after the last one.
pub fn mlp<S: Scalar>(t: &mut Tape<S>, groups: &[&str], x: Value) -> Result<Value, NnError> {
    let mut h = x;
    for (i, name) in groups.iter().enumerate() {
        h = linear(t, name, h)?;
        if i + 1 < groups.len() {
            h = silu(&mut t.g, h)?;
        }
    }
    Ok(h)
}

/// Normalizes a vector to zero mean and unit variance, then applies
/// `scale * x + shift` when given.
pub fn layer_norm<S: Scalar>(
    g: &mut Graph<S>,
    x: Value,
    scale: Option<Value>,
    shift: Option<Value>,
) -> Result<Value, NnError> {
    if g.data(x).is_empty() {
        return Err(NnError::Empty("layer_norm input"));
    }
    let m = g.mean(x);
    let d = g.sub(x, m)?;
    let sq = g.square(d);
    let var = g.mean(sq);
    let var = g.offset(var, S::lit(LN_EPS));
    let sd = g.sqrt(var);
    let mut y = g.div(d, sd)?;
    if let Some(s) = scale {
        y = g.mul(y, s)?;
    }
    if let Some(b) = shift {
        y = g.add(y, b)?;
    }
    Ok(y)
}

/// `gamma * LN(s) + beta`.
pub fn modulate<S: Scalar>(g: &mut Graph<S>, s: Value, gamma: Value, beta: Value) -> Result<Value, NnError> {
    let n = g.data(s).len();
    for (what, v) in [("gamma", gamma), ("beta", beta)] {
        if g.data(v).len() != n {
            return Err(NnError::Dim { what: what.into(), expected: vec![n], got: g.shape(v).to_vec() });
        }
    }
    layer_norm(g, s, Some(gamma), Some(beta))
}

/// Motion-aware layer normalization: `gamma = xi1(v, dt)`, `beta = xi2(v, dt)`,
/// output `gamma * LN(s) + beta`. Returns `(output, gamma, beta)`.
pub fn mln<S: Scalar>(
    t: &mut Tape<S>,
    s: Value,
    ctx: &MotionContext,
    xi1: &str,
    xi2: &str,
) -> Result<(Value, Value, Value), NnError> {
    let feats = ctx.features().map(S::lit).to_vec();
    let m = t.g.constant(&[3], feats)?;
    mln_features(t, s, m, xi1, xi2)
}

/// Motion-aware normalization from a `[v_fwd, v_lat, dt]` graph value, so the
/// motion attributes may themselves be predictions.
pub fn mln_features<S: Scalar>(
    t: &mut Tape<S>,
    s: Value,
    m: Value,
    xi1: &str,
    xi2: &str,
) -> Result<(Value, Value, Value), NnError> {
    let gamma = linear(t, xi1, m)?;
    let beta = linear(t, xi2, m)?;
    let out = modulate(&mut t.g, s, gamma, beta)?;
    Ok((out, gamma, beta))
}

/// Single-head scaled dot-product attention of `q` over the bank, with a
/// residual connection: `q + sum_i w_i Wv v_i`, `w = softmax(<Wq q, Wk k_i> / sqrt(d))`.
/// Returns `(output, weights)`.
pub fn cross_attention<S: Scalar>(
    t: &mut Tape<S>,
    group: &str,
    q: Value,
    keys: &[Value],
    values: &[Value],
) -> Result<(Value, Value), NnError> {
    if keys.is_empty() {
        return Err(NnError::EmptyBank);
    }
    if keys.len() != values.len() {
        return Err(NnError::Dim { what: "bank values".into(), expected: vec![keys.len()], got: vec![values.len()] });
    }
    let d = t.g.data(q).len();
    let wq = t.param(group, "wq")?;
    let wk = t.param(group, "wk")?;
    let wv = t.param(group, "wv")?;
    let stack = |g: &mut Graph<S>, xs: &[Value]| -> Result<Value, GradError> {
        let rows = xs.iter().map(|&x| g.reshape(x, &[1, d])).collect::<Result<Vec<_>, _>>()?;
        g.concat(&rows, 0)
    };
    let kmat = stack(&mut t.g, keys)?;
    let vmat = stack(&mut t.g, values)?;
    let qp = t.g.matmul(wq, q)?;
    // <Wq q, Wk k> = k . (Wk^T Wq q)
    let wkt = t.g.permute(wk, &[1, 0])?;
    let u = t.g.matmul(wkt, qp)?;
    let scores = t.g.matmul(kmat, u)?;
    let scores = t.g.scale(scores, S::lit(1.0 / (d as f64).sqrt()));
    let weights = t.g.softmax(scores, 0)?;
    let vt = t.g.permute(vmat, &[1, 0])?;
    let mixed = t.g.matmul(vt, weights)?;
    let proj = t.g.matmul(wv, mixed)?;
    Ok((t.g.add(q, proj)?, weights))
}

/// Gated recurrent update `h' = (1 - z) * n + z * h` with
/// `z = sig(Wz x + Uz h + bz)`, `r = sig(Wr x + Ur h + br)`,
/// `n = tanh(Wn x + r * (Un h) + bn)`.
pub fn gru_cell<S: Scalar>(t: &mut Tape<S>, group: &str, h: Value, x: Value) -> Result<Value, NnError> {
    let w = t.param(group, "w")?;
    let u = t.param(group, "u")?;
    let b = t.param(group, "b")?;
    let dh = t.g.data(h).len();
    let (ws, us) = (t.g.shape(w).to_vec(), t.g.shape(u).to_vec());
    if ws[0] != 3 * dh || us != [3 * dh, dh] {
        return Err(NnError::Dim { what: format!("{group} hidden"), expected: vec![3 * dh, dh], got: us });
    }
    if ws[1] != t.g.data(x).len() {
        return Err(NnError::Dim { what: format!("{group} input"), expected: vec![ws[1]], got: t.g.shape(x).to_vec() });
    }
    let wx = t.g.matmul(w, x)?;
    let wx = t.g.add(wx, b)?;
    let uh = t.g.matmul(u, h)?;
    let g = &mut t.g;
    let (wz, wr, wn) = (g.slice(wx, 0, 0, dh)?, g.slice(wx, 0, dh, dh)?, g.slice(wx, 0, 2 * dh, dh)?);
    let (uz, ur, un) = (g.slice(uh, 0, 0, dh)?, g.slice(uh, 0, dh, dh)?, g.slice(uh, 0, 2 * dh, dh)?);
    let z = g.add(wz, uz)?;
    let z = g.sigmoid(z);
    let r = g.add(wr, ur)?;
    let r = g.sigmoid(r);
    let rn = g.mul(r, un)?;
    let n = g.add(wn, rn)?;
    let n = g.tanh(n);
    // (1 - z) * n + z * h = n + z * (h - n)
    let diff = g.sub(h, n)?;
    let zd = g.mul(z, diff)?;
    Ok(g.add(n, zd)?)
}

pub fn conv2d<S: Scalar>(t: &mut Tape<S>, group: &str, x: Value, stride: usize, pad: usize) -> Result<Value, NnError> {
    let w = t.param(group, "w")?;
    let b = t.param(group, "b")?;
    Ok(t.g.conv2d(x, w, b, stride, pad)?)
}

/// Row `key` of the group's `table`.
pub fn embed<S: Scalar>(t: &mut Tape<S>, group: &str, key: usize) -> Result<Value, NnError> {
    let table = t.param(group, "table")?;
    let shape = t.g.shape(table).to_vec();
    if key >= shape[0] {
        return Err(NnError::TokenOutOfRange { key, size: shape[0] });
    }
    let row = t.g.slice(table, 0, key, 1)?;
    Ok(t.g.reshape(row, &[shape[1]])?)
}

/// Per-channel instance normalization followed by `(1 + scale) * x + shift`.
pub fn adain<S: Scalar>(g: &mut Graph<S>, x: Value, scale: Value, shift: Value) -> Result<Value, NnError> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(NnError::Dim { what: "adain input".into(), expected: vec![0, 0, 0], got: shape });
    }
    let (c, hw) = (shape[0], shape[1] * shape[2]);
    for v in [scale, shift] {
        if g.data(v).len() != c {
            return Err(NnError::Dim { what: "adain modulation".into(), expected: vec![c], got: g.shape(v).to_vec() });
        }
    }
    let inv_n = S::lit(1.0 / hw as f64);
    let flat = g.reshape(x, &[c, hw])?;
    let mean = g.sum_axis(flat, 1)?;
    let mean = g.scale(mean, inv_n);
    let mean = g.reshape(mean, &[c, 1])?;
    let d = g.sub(flat, mean)?;
    let sq = g.square(d);
    let var = g.sum_axis(sq, 1)?;
    let var = g.scale(var, inv_n);
    let var = g.offset(var, S::lit(LN_EPS));
    let sd = g.sqrt(var);
    let sd = g.reshape(sd, &[c, 1])?;
    let norm = g.div(d, sd)?;
    let gain = g.offset(scale, S::one());
    let gain = g.reshape(gain, &[c, 1])?;
    let bias = g.reshape(shift, &[c, 1])?;
    let y = g.mul(norm, gain)?;
    let y = g.add(y, bias)?;
    Ok(g.reshape(y, &shape)?)
}

/// Nearest-neighbour 2x upsampling of `[C, H, W]`.
pub fn upsample2<S: Scalar>(g: &mut Graph<S>, x: Value) -> Result<Value, GradError> {
    let s = g.shape(x).to_vec();
    let (c, h, w) = (s[0], s[1], s[2]);
    let r = g.reshape(x, &[c, h, 1, w, 1])?;
    let b = g.broadcast(r, &[c, h, 2, w, 2])?;
    g.reshape(b, &[c, 2 * h, 2 * w])
}

/// `[C*r*r, H, W] -> [C, H*r, W*r]`; channel `c*r*r + dy*r + dx` lands at
/// sub-position `(dy, dx)`.
pub fn pixel_shuffle<S: Scalar>(g: &mut Graph<S>, x: Value, r: usize) -> Result<Value, GradError> {
    let s = g.shape(x).to_vec();
    let (c, h, w) = (s[0] / (r * r), s[1], s[2]);
    let a = g.reshape(x, &[c, r, r, h, w])?;
    let p = g.permute(a, &[0, 3, 1, 4, 2])?;
    g.reshape(p, &[c, h * r, w * r])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::{finite_diff_flat, RngState};
    use crate::nn::{Init, ParamStore};

    fn store() -> ParamStore<f64> {
        ParamStore::new()
    }

    /// Checks `f` over every parameter of `p` with central differences.
    fn fd_over_store(
        p: &ParamStore<f64>,
        f: impl Fn(&mut Tape<f64>) -> Result<Value, NnError>,
    ) -> f64 {
        let mut t = Tape::new(p, true);
        let root = f(&mut t).unwrap();
        t.g.backward(root).unwrap();
        let grads = t.grads();
        let names: Vec<String> = p.iter().map(|(n, _)| n).collect();
        let x0: Vec<f64> = p.iter().flat_map(|(_, e)| e.data.clone()).collect();
        let g0: Vec<f64> = names.iter().zip(p.iter()).flat_map(|(n, (_, e))| {
            grads.get(n).cloned().unwrap_or_else(|| vec![0.0; e.data.len()])
        }).collect();
        let report = finite_diff_flat(&x0, &g0, 1e-5, |x| {
            let mut q = p.clone();
            let mut at = 0;
            for (_, _, e) in q.iter_mut() {
                let n = e.data.len();
                e.data.copy_from_slice(&x[at..at + n]);
                at += n;
            }
            let mut t = Tape::new(&q, false);
            let root = f(&mut t).map_err(|e| match e {
                NnError::Grad(g) => g,
                other => panic!("{other}"),
            })?;
            Ok(t.g.scalar(root))
        })
        .unwrap();
        report.max_rel_error
    }

    fn vecv(t: &mut Tape<f64>, xs: &[f64]) -> Value {
        t.g.constant(&[xs.len()], xs.to_vec()).unwrap()
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let p = store();
        let mut t = Tape::new(&p, false);
        let x = vecv(&mut t, &[1.0; 4]);
        let y = layer_norm(&mut t.g, x, None, None).unwrap();
        assert_eq!(t.g.data(y), &[0.0; 4]);
    }

    #[test]
    fn layer_norm_of_pair() {
        let p = store();
        let mut t = Tape::new(&p, false);
        let x = vecv(&mut t, &[-1.0, 1.0]);
        let y = layer_norm(&mut t.g, x, None, None).unwrap();
        let d = t.g.data(y);
        assert!((d[0] + 1.0).abs() < 1e-5 && (d[1] - 1.0).abs() < 1e-5, "{d:?}");
    }

    #[test]
    fn layer_norm_statistics() {
        let p = store();
        let mut t = Tape::new(&p, false);
        let mut rng = RngState::new(4);
        let xs = rng.normals(257);
        let x = vecv(&mut t, &xs);
        let plain = layer_norm(&mut t.g, x, None, None).unwrap();
        let d = t.g.data(plain).to_vec();
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-9);
        // unit variance up to the epsilon floor
        assert!((var - 1.0).abs() < 1e-4, "{var}");
        let scale = t.g.full(&[257], 2.0);
        let shift = t.g.full(&[257], 3.0);
        let y = layer_norm(&mut t.g, x, Some(scale), Some(shift)).unwrap();
        let d = t.g.data(y);
        let mean = d.iter().sum::<f64>() / n;
        let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((mean - 3.0).abs() < 1e-9 && (sd - 2.0).abs() < 1e-4, "{mean} {sd}");
    }

    #[test]
    fn layer_norm_rejects_empty() {
        let p = store();
        let mut t = Tape::new(&p, false);
        let x = t.g.constant(&[0], vec![]).unwrap();
        assert!(matches!(layer_norm(&mut t.g, x, None, None), Err(NnError::Empty(_))));
    }

    fn mln_store(dim: usize) -> ParamStore<f64> {
        let mut rng = RngState::new(12);
        let mut p = store();
        p.add_linear("xi1", 3, dim, &mut rng).unwrap();
        p.add_linear("xi2", 3, dim, &mut rng).unwrap();
        p
    }

    #[test]
    fn mln_identity_modulation_is_layer_norm() {
        let mut p = mln_store(5);
        for e in ["w", "b"] {
            p.entry_mut("xi1", e).unwrap().data.fill(0.0);
            p.entry_mut("xi2", e).unwrap().data.fill(0.0);
        }
        p.entry_mut("xi1", "b").unwrap().data.fill(1.0);
        let mut t = Tape::new(&p, false);
        let s = vecv(&mut t, &[0.3, -2.0, 1.1, 0.0, 4.0]);
        let ctx = MotionContext::new([1.5, -0.2], 1.0);
        let (m, _, _) = mln(&mut t, s, &ctx, "xi1", "xi2").unwrap();
        let ln = layer_norm(&mut t.g, s, None, None).unwrap();
        assert_eq!(t.g.data(m), t.g.data(ln));
    }

    #[test]
    fn mln_at_rest_uses_bias_columns() {
        let mut p = mln_store(4);
        p.entry_mut("xi2", "b").unwrap().data.fill(0.0);
        let mut t = Tape::new(&p, false);
        let s = vecv(&mut t, &[1.0, 2.0, 3.0, 4.0]);
        let (_, gamma, beta) = mln(&mut t, s, &MotionContext::new([0.0, 0.0], 0.0), "xi1", "xi2").unwrap();
        assert_eq!(t.g.data(beta), &[0.0; 4]);
        assert_eq!(t.g.data(gamma), p.entry("xi1", "b").unwrap().data.as_slice());
    }

    #[test]
    fn mln_dimension_mismatch() {
        let p = mln_store(3);
        let mut t = Tape::new(&p, false);
        let s = vecv(&mut t, &[1.0, 2.0, 3.0, 4.0]);
        let r = mln(&mut t, s, &MotionContext::new([0.0, 0.0], 1.0), "xi1", "xi2");
        assert!(matches!(r, Err(NnError::Dim { .. })));
    }

    #[test]
    fn mln_gradients() {
        let mut p = mln_store(4);
        let mut rng = RngState::new(99);
        p.add_group("s", &[("x", vec![4], Init::Normal { std: 1.0 })], &mut rng).unwrap();
        let err = fd_over_store(&p, |t| {
            let s = t.param("s", "x")?;
            let (m, _, _) = mln(t, s, &MotionContext::new([0.7, -0.4], 1.0), "xi1", "xi2")?;
            let w = t.g.constant(&[4], vec![0.3, -1.0, 2.0, 0.5])?;
            let y = t.g.mul(m, w)?;
            Ok(t.g.sum(y))
        });
        assert!(err < 1e-6, "{err}");
    }

    fn attn_store(d: usize) -> ParamStore<f64> {
        let mut rng = RngState::new(21);
        let mut p = store();
        let init = Init::fan_in(d);
        p.add_group("attn", &[("wq", vec![d, d], init), ("wk", vec![d, d], init), ("wv", vec![d, d], init)], &mut rng)
            .unwrap();
        p
    }

    #[test]
    fn attention_singleton_bank() {
        let p = attn_store(3);
        let mut t = Tape::new(&p, false);
        let q = vecv(&mut t, &[0.1, 0.2, -0.3]);
        let v = vecv(&mut t, &[1.0, -1.0, 0.5]);
        let (out, w) = cross_attention(&mut t, "attn", q, &[v], &[v]).unwrap();
        assert_eq!(t.g.data(w), &[1.0]);
        let wv = &p.entry("attn", "wv").unwrap().data;
        for i in 0..3 {
            let expect = [0.1, 0.2, -0.3][i] + (0..3).map(|j| wv[i * 3 + j] * [1.0, -1.0, 0.5][j]).sum::<f64>();
            assert!((t.g.data(out)[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_duplicate_entries_match_singleton() {
        let p = attn_store(3);
        let mut t = Tape::new(&p, false);
        let q = vecv(&mut t, &[0.4, -0.2, 0.9]);
        let v = vecv(&mut t, &[0.3, 0.3, -1.0]);
        let (one, _) = cross_attention(&mut t, "attn", q, &[v], &[v]).unwrap();
        let (two, _) = cross_attention(&mut t, "attn", q, &[v, v], &[v, v]).unwrap();
        for (a, b) in t.g.data(one).iter().zip(t.g.data(two)) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_matches_explicit_weighted_sum() {
        let d = 4;
        let p = attn_store(d);
        let mut rng = RngState::new(5);
        let qs = rng.normals(d);
        let ks: Vec<Vec<f64>> = (0..3).map(|_| rng.normals(d)).collect();
        let vs: Vec<Vec<f64>> = (0..3).map(|_| rng.normals(d)).collect();
        let mut t = Tape::new(&p, false);
        let q = vecv(&mut t, &qs);
        let kv: Vec<Value> = ks.iter().map(|k| vecv(&mut t, k)).collect();
        let vv: Vec<Value> = vs.iter().map(|v| vecv(&mut t, v)).collect();
        let (out, _) = cross_attention(&mut t, "attn", q, &kv, &vv).unwrap();

        let mat = |name: &str| p.entry("attn", name).unwrap().data.clone();
        let apply = |m: &[f64], x: &[f64]| -> Vec<f64> {
            (0..d).map(|i| (0..d).map(|j| m[i * d + j] * x[j]).sum()).collect()
        };
        let (wq, wk, wv) = (mat("wq"), mat("wk"), mat("wv"));
        let qp = apply(&wq, &qs);
        let scores: Vec<f64> = ks
            .iter()
            .map(|k| apply(&wk, k).iter().zip(&qp).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
        let w: Vec<f64> = scores.iter().map(|s| (s - mx).exp() / z).collect();
        let mut expect = qs.clone();
        for (wi, v) in w.iter().zip(&vs) {
            for (e, pv) in expect.iter_mut().zip(apply(&wv, v)) {
                *e += wi * pv;
            }
        }
        for (a, b) in t.g.data(out).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn attention_is_permutation_invariant() {
        let p = attn_store(3);
        let mut rng = RngState::new(8);
        let mut t = Tape::new(&p, false);
        let q = vecv(&mut t, &rng.normals(3));
        let ks: Vec<Value> = (0..4).map(|_| { let v = rng.normals(3); vecv(&mut t, &v) }).collect();
        let vs: Vec<Value> = (0..4).map(|_| { let v = rng.normals(3); vecv(&mut t, &v) }).collect();
        let (a, _) = cross_attention(&mut t, "attn", q, &ks, &vs).unwrap();
        let order = [2, 0, 3, 1];
        let pk: Vec<Value> = order.iter().map(|&i| ks[i]).collect();
        let pv: Vec<Value> = order.iter().map(|&i| vs[i]).collect();
        let (b, _) = cross_attention(&mut t, "attn", q, &pk, &pv).unwrap();
        for (x, y) in t.g.data(a).iter().zip(t.g.data(b)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rejects_empty_bank() {
        let p = attn_store(2);
        let mut t = Tape::new(&p, false);
        let q = vecv(&mut t, &[0.0, 1.0]);
        assert!(matches!(cross_attention(&mut t, "attn", q, &[], &[]), Err(NnError::EmptyBank)));
    }

    #[test]
    fn attention_gradients() {
        let mut p = attn_store(3);
        let mut rng = RngState::new(3);
        p.add_group("bank", &[("q", vec![3], Init::Normal { std: 1.0 }), ("k0", vec![3], Init::Normal { std: 1.0 }), ("k1", vec![3], Init::Normal { std: 1.0 })], &mut rng).unwrap();
        let err = fd_over_store(&p, |t| {
            let q = t.param("bank", "q")?;
            let k0 = t.param("bank", "k0")?;
            let k1 = t.param("bank", "k1")?;
            let (o, _) = cross_attention(t, "attn", q, &[k0, k1], &[k1, k0])?;
            let sq = t.g.square(o);
            Ok(t.g.sum(sq))
        });
        assert!(err < 1e-6, "{err}");
    }

    fn gru_store(inp: usize, hidden: usize) -> ParamStore<f64> {
        let mut rng = RngState::new(31);
        let mut p = store();
        p.add_gru("gru", inp, hidden, &mut rng).unwrap();
        p
    }

    #[test]
    fn gru_saturated_update_gate_keeps_state() {
        let mut p = gru_store(2, 3);
        p.entry_mut("gru", "b").unwrap().data[..3].fill(40.0);
        let mut t = Tape::new(&p, false);
        let h = vecv(&mut t, &[0.5, -0.25, 0.9]);
        let x = vecv(&mut t, &[1.0, -3.0]);
        let y = gru_cell(&mut t, "gru", h, x).unwrap();
        for (a, b) in t.g.data(y).iter().zip([0.5, -0.25, 0.9]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gru_zero_weights_by_hand() {
        let mut p = gru_store(2, 2);
        for e in ["w", "u", "b"] {
            p.entry_mut("gru", e).unwrap().data.fill(0.0);
        }
        let mut t = Tape::new(&p, false);
        let h = vecv(&mut t, &[0.6, -0.8]);
        let x = vecv(&mut t, &[2.0, 1.0]);
        let y = gru_cell(&mut t, "gru", h, x).unwrap();
        // z = r = 0.5, n = tanh(0) = 0, h' = 0.5 * 0 + 0.5 * h
        assert_eq!(t.g.data(y), &[0.3, -0.4]);
    }

    #[test]
    fn gru_dimension_mismatch() {
        let p = gru_store(2, 3);
        let mut t = Tape::new(&p, false);
        let h = vecv(&mut t, &[0.0; 3]);
        let x = vecv(&mut t, &[0.0; 5]);
        assert!(matches!(gru_cell(&mut t, "gru", h, x), Err(NnError::Dim { .. })));
    }

    #[test]
    fn gru_chain_gradients() {
        let mut p = gru_store(3, 4);
        let mut rng = RngState::new(77);
        p.add_group("in", &[("h", vec![4], Init::Uniform { bound: 0.9 }), ("x", vec![4, 3], Init::Normal { std: 1.0 })], &mut rng).unwrap();
        let err = fd_over_store(&p, |t| {
            let mut h = t.param("in", "h")?;
            let xs = t.param("in", "x")?;
            for k in 0..4 {
                let row = t.g.slice(xs, 0, k, 1)?;
                let x = t.g.reshape(row, &[3])?;
                h = gru_cell(t, "gru", h, x)?;
            }
            let w = t.g.constant(&[4], vec![1.0, -2.0, 0.5, 3.0])?;
            let y = t.g.mul(h, w)?;
            Ok(t.g.sum(y))
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn embed_lookup_and_sparse_gradient() {
        let mut rng = RngState::new(2);
        let mut p = store();
        p.add_embedding("prompt", 4, 3, &mut rng).unwrap();
        let mut t = Tape::new(&p, true);
        let a = embed(&mut t, "prompt", 2).unwrap();
        let b = embed(&mut t, "prompt", 2).unwrap();
        assert_eq!(t.g.data(a), t.g.data(b));
        let s = t.g.sum(a);
        t.g.backward(s).unwrap();
        let g = &t.grads()["prompt.table"];
        for (i, v) in g.iter().enumerate() {
            assert_eq!(*v, if (6..9).contains(&i) { 1.0 } else { 0.0 });
        }
        assert!(matches!(embed(&mut t, "prompt", 4), Err(NnError::TokenOutOfRange { key: 4, size: 4 })));
    }

    #[test]
    fn conv_block_gradients_and_layout() {
        let mut rng = RngState::new(6);
        let mut p = store();
        p.add_conv("c", 2, 3, 3, &mut rng).unwrap();
        p.add_group("x", &[("v", vec![2, 5, 5], Init::Normal { std: 1.0 })], &mut rng).unwrap();
        let err = fd_over_store(&p, |t| {
            let x = t.param("x", "v")?;
            let y = conv2d(t, "c", x, 2, 1)?;
            let y = silu(&mut t.g, y)?;
            let sq = t.g.square(y);
            Ok(t.g.sum(sq))
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn adain_normalizes_then_modulates() {
        let mut rng = RngState::new(10);
        let p = store();
        let mut t = Tape::new(&p, false);
        let x = t.g.constant(&[2, 3, 3], rng.normals(18)).unwrap();
        let scale = t.g.constant(&[2], vec![1.0, -0.5]).unwrap();
        let shift = t.g.constant(&[2], vec![0.25, 2.0]).unwrap();
        let y = adain(&mut t.g, x, scale, shift).unwrap();
        for (c, (gain, bias)) in [(2.0, 0.25), (0.5, 2.0)].iter().enumerate() {
            let ch = &t.g.data(y)[c * 9..(c + 1) * 9];
            let mean = ch.iter().sum::<f64>() / 9.0;
            let sd = (ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0).sqrt();
            assert!((mean - bias).abs() < 1e-9);
            assert!((sd - gain).abs() < 1e-3);
        }
    }

    #[test]
    fn adain_gradients() {
        let mut rng = RngState::new(13);
        let mut p = store();
        p.add_group("a", &[("x", vec![2, 3, 2], Init::Normal { std: 1.0 }), ("s", vec![2], Init::Normal { std: 0.5 }), ("b", vec![2], Init::Normal { std: 0.5 })], &mut rng).unwrap();
        let w: Vec<f64> = rng.normals(12);
        let err = fd_over_store(&p, |t| {
            let x = t.param("a", "x")?;
            let s = t.param("a", "s")?;
            let b = t.param("a", "b")?;
            let y = adain(&mut t.g, x, s, b)?;
            let wv = t.g.constant(&[2, 3, 2], w.clone())?;
            let m = t.g.mul(y, wv)?;
            Ok(t.g.sum(m))
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn upsample_and_shuffle_layouts() {
        let p = store();
        let mut t = Tape::new(&p, false);
        let x = t.g.constant(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let u = upsample2(&mut t.g, x).unwrap();
        #[rustfmt::skip]
        assert_eq!(t.g.data(u), &[
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ]);
        // four sub-position channels of a 1x1 map
        let s = t.g.constant(&[4, 1, 1], vec![10.0, 11.0, 12.0, 13.0]).unwrap();
        let ps = pixel_shuffle(&mut t.g, s, 2).unwrap();
        assert_eq!(t.g.shape(ps), &[1, 2, 2]);
        assert_eq!(t.g.data(ps), &[10.0, 11.0, 12.0, 13.0]);
    }
}
