use super::*;
use crate::model::{Flags, TaskPrompt};
use crate::world::{make_dataset, simulate_episode, Episode, Manifest, Split, FREE};

fn episodes(n: usize) -> Vec<Episode> {
    let w = RunConfig::micro().world;
    (0..n).map(|i| simulate_episode(&w, 100 + i as u64).unwrap()).collect()
}

#[test]
fn config_text_round_trip() {
    for cfg in [RunConfig::default(), RunConfig::micro()] {
        let text = cfg.to_text();
        assert_eq!(RunConfig::parse_text(&text).unwrap(), cfg);
        assert_eq!(text.lines().count(), KEYS.len());
    }
}

#[test]
fn config_parse_and_override() {
    let cfg = RunConfig::parse_text("# comment\n\nlr = 1e-3  # inline\nssp = off\ncombine = add\nc_m = 16\n").unwrap();
    assert_eq!(cfg.lr, 1e-3);
    assert!(!cfg.flags.ssp);
    let mut c = cfg.clone();
    c.apply_override("steps=7").unwrap();
    assert_eq!(c.steps, 7);
    assert!(matches!(RunConfig::parse_text("learning_rate = 1"), Err(PipelineError::UnknownKey(_))));
    assert!(matches!(RunConfig::parse_text("steps = many"), Err(PipelineError::BadValue { .. })));
    assert!(matches!(RunConfig::parse_text("lr = 0"), Err(PipelineError::Config(_))));
    assert!(matches!(RunConfig::parse_text("d_h = 0"), Err(PipelineError::Model(_))));
    assert!(RunConfig::parse_text("steps 5").is_err());
    assert!(c.apply_override("steps").is_err());
}

#[test]
fn fingerprint_tracks_model_shape_only() {
    let a = RunConfig::default();
    let b = RunConfig { lr: 1.0, steps: 3, ..a.clone() };
    assert_eq!(a.fingerprint(), b.fingerprint());
    let c = RunConfig { d_h: 8, ..a.clone() };
    assert_ne!(a.fingerprint(), c.fingerprint());
    assert_ne!(a.run_id("pretrain"), b.run_id("pretrain"));
}

fn micro_checkpoint() -> Checkpoint {
    pretrain(&RunConfig { steps: 2, ..RunConfig::micro() }, &episodes(2), None).unwrap().checkpoint
}

#[test]
fn checkpoint_round_trip_is_byte_exact() {
    let ck = micro_checkpoint();
    let bytes = ck.to_bytes();
    assert_eq!(&bytes[..8], b"MSSMCKPT");
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    save_checkpoint(&ck, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    save_checkpoint(&loaded, &dir.path().join("b.ckpt")).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(dir.path().join("b.ckpt")).unwrap());
}

#[test]
fn checkpoint_corruptions() {
    let bytes = micro_checkpoint().to_bytes();
    let mut b = bytes.clone();
    b[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&b), Err(PipelineError::BadMagic(_))));
    let mut b = bytes.clone();
    b[8] = 9;
    assert!(matches!(Checkpoint::from_bytes(&b), Err(PipelineError::Version { found: 9, .. })));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 9]), Err(PipelineError::Truncated { .. })));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..10]), Err(PipelineError::Truncated { .. })));
    let mut b = bytes.clone();
    let n = b.len();
    b[n - 20] ^= 0x40;
    assert!(matches!(Checkpoint::from_bytes(&b), Err(PipelineError::Checksum { .. })));

    // change the offset digit of the second tensor without changing lengths
    let index_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let json = String::from_utf8(bytes[16..16 + index_len].to_vec()).unwrap();
    let second = json.match_indices("\"offset\":").nth(1).unwrap().0 + "\"offset\":".len();
    let mut b = bytes.clone();
    let digit = b[16 + second];
    b[16 + second] = if digit == b'9' { b'1' } else { digit + 1 };
    match Checkpoint::from_bytes(&b) {
        Err(PipelineError::Index { entry, .. }) => assert_eq!(entry, "param/enc.conv1.b"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn checkpoint_fingerprint_guard() {
    let ck = micro_checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ckpt");
    save_checkpoint(&ck, &path).unwrap();
    let other = RunConfig { d_h: 6, ..RunConfig::micro() };
    assert!(matches!(load_checkpoint_for(&path, &other, false), Err(PipelineError::Fingerprint { .. })));
    assert!(load_checkpoint_for(&path, &other, true).is_ok());
    assert!(load_checkpoint_for(&path, &RunConfig { lr: 0.5, ..RunConfig::micro() }, false).is_ok());
}

#[test]
fn pretrain_is_deterministic_and_additive() {
    let cfg = RunConfig { steps: 3, ..RunConfig::micro() };
    let eps = episodes(3);
    let a = pretrain(&cfg, &eps, None).unwrap();
    let b = pretrain(&cfg, &eps, None).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    assert_eq!(a.metrics.len(), 3);
    for line in &a.metrics {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let vals = &v["values"];
        let sum = vals["kl"].as_f64().unwrap()
            + vals["past_ce"].as_f64().unwrap()
            + vals["past_act_l1"].as_f64().unwrap()
            + vals["future_ce"].as_f64().unwrap()
            + vals["future_act_l1"].as_f64().unwrap();
        assert!((sum - vals["total"].as_f64().unwrap()).abs() <= 1e-9);
        assert_eq!(v["run_id"], a.checkpoint.config.run_id("pretrain"));
    }
    let c = pretrain(&RunConfig { seed: 1, ..cfg.clone() }, &eps, None).unwrap();
    assert_ne!(a.metrics, c.metrics);
}

#[test]
fn zero_kl_weight_logs_but_excludes_kl() {
    let cfg = RunConfig { steps: 1, kl_weight: 0.0, ..RunConfig::micro() };
    let out = pretrain(&cfg, &episodes(1), None).unwrap();
    let b = &out.last;
    assert!(b.kl_sum() > 0.0);
    assert!((b.total - (b.past_ce + b.past_act_l1 + b.future_ce + b.future_act_l1)).abs() <= 1e-9);
}

#[test]
fn pretrain_rejects_bad_input() {
    assert!(matches!(pretrain(&RunConfig::micro(), &[], None), Err(PipelineError::EmptySplit(_))));
    let wrong = simulate_episode(&crate::world::WorldConfig::default(), 0).unwrap();
    assert!(matches!(pretrain(&RunConfig::micro(), &[wrong], None), Err(PipelineError::Config(_))));
}

#[test]
fn metrics_file_matches_stream() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m/metrics.jsonl");
    let out = pretrain(&RunConfig { steps: 2, ..RunConfig::micro() }, &episodes(1), Some(&path)).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().collect::<Vec<_>>(), out.metrics);
    let first: serde_json::Value = serde_json::from_str(&out.metrics[0]).unwrap();
    assert_eq!(out.checkpoint.metrics, first["run_id"].as_str().unwrap());
    // the checkpoint does not depend on where the stream was written
    let elsewhere = pretrain(&RunConfig { steps: 2, ..RunConfig::micro() }, &episodes(1), None).unwrap();
    assert_eq!(elsewhere.checkpoint.to_bytes(), out.checkpoint.to_bytes());
}

#[test]
fn iou_definitions() {
    let a = [true, false, true, false];
    assert_eq!(mask_iou(&a, &a), 1.0);
    assert_eq!(mask_iou(&[true, false], &[false, true]), 0.0);
    assert_eq!(mask_iou(&[true, false, false], &[true, true, false]), 0.5);
    assert_eq!(mask_iou(&[false; 3], &[false; 3]), 1.0);

    let grid = [0u8, 1, 2, 2, 1, 0];
    let mut s = GridScores::default();
    s.add(&grid, &grid);
    assert_eq!(s.class_iou(), [1.0; 3]);
    assert_eq!(s.iou(), 1.0);
    let mut d = GridScores::default();
    d.add(&[1, 1], &[0, 0]);
    assert_eq!(d.iou(), 0.0);
}

#[test]
fn argmax_layout() {
    // two slabs, two classes, plane of 2; channel z*C + c
    let logits = [0.0, 5.0, 1.0, 0.0, 2.0, 0.0, 0.0, 3.0];
    assert_eq!(argmax_classes(&logits, 2, 2), vec![1, 0, 0, 1]);
}

#[test]
fn baselines_shift_with_ego() {
    let ep = &episodes(1)[0];
    let copy = copy_last_prediction(ep);
    assert!(copy.iter().all(|&c| c < 3));
    assert_eq!(ego_shift_prediction(ep, 0), copy);
    let a = ep.action(ep.t_obs - 2);
    let shifted = ego_shift_prediction(ep, 1);
    let (h, w) = (ep.height as i64, ep.width as i64);
    let (dr, dc) = (a[0].round() as i64, a[1].round() as i64);
    for r in 0..h {
        for c in 0..w {
            let (sr, sc) = (r + dr, c + dc);
            let want = if (0..h).contains(&sr) && (0..w).contains(&sc) { copy[(sr * w + sc) as usize] } else { FREE };
            assert_eq!(shifted[(r * w + c) as usize], want);
        }
    }
}

#[test]
fn evaluate_and_rollout_dump() {
    let ck = micro_checkpoint();
    let eps = episodes(2);
    let r = evaluate(&ck.model, &eps, 0).unwrap();
    assert_eq!(r.future_iou.len(), 2);
    assert_eq!(r.episodes, 2);
    assert!(r.named().iter().all(|(_, v)| v.is_finite()));
    assert_eq!(r, evaluate(&ck.model, &eps, 0).unwrap());
    let dump = rollout_dump(&ck.model, &eps[0], 0).unwrap();
    let frames = dump["frames"].as_array().unwrap();
    assert_eq!(frames.len(), 5);
    assert_eq!(frames[4]["kind"], "imagined");
    assert_eq!(frames[0]["prediction"].as_array().unwrap().len(), 2 * 8 * 8);
    assert!(matches!(evaluate(&ck.model, &[], 0), Err(PipelineError::EmptySplit(_))));
}

#[test]
fn task_parsing_and_targets() {
    assert_eq!("detect-dynamic".parse::<Task>().unwrap(), Task::DetectDynamic);
    assert_eq!("map-static".parse::<Task>().unwrap().to_string(), "map-static");
    assert!(matches!("segment".parse::<Task>(), Err(PipelineError::UnknownTask(_))));
    let ep = &episodes(1)[0];
    assert_eq!(Task::MapStatic.target(ep).len(), 64);
    let s = binary_scores(&[true, true, false, false], &[true, false, true, false]);
    assert_eq!((s.tp, s.fp, s.fn_), (1, 1, 1));
    assert!((s.f1() - 0.5).abs() < 1e-15);
    assert!((s.iou() - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn finetune_freeze_contract() {
    let ck = micro_checkpoint();
    let eps = episodes(3);
    let cfg = RunConfig { freeze_encoder: true, finetune_steps: 3, ..RunConfig::micro() };
    let (tuned, report) = finetune(Some(&ck.model), Task::DetectDynamic, &cfg, &eps[..2], &eps[2..], None, None).unwrap();
    assert!(report.pretrained);
    assert_eq!(report.metrics.len(), 4);
    for g in ["enc.conv1", "enc.conv2"] {
        assert_eq!(tuned.params.group(g).unwrap().entries, ck.model.params.group(g).unwrap().entries);
    }
    assert_ne!(tuned.params.group("dec.up").unwrap().entries, ck.model.params.group("dec.up").unwrap().entries);

    // the head survives a checkpoint round trip
    let ft = Checkpoint::new(cfg.clone(), tuned, Adam::new(), 3, String::new());
    let back = Checkpoint::from_bytes(&ft.to_bytes()).unwrap();
    assert!(back.model.params.group("head.detect").is_some());
    assert_eq!(back.to_bytes(), ft.to_bytes());
}

#[test]
fn finetune_prompt_swap_changes_outcome() {
    let ck = micro_checkpoint();
    let eps = episodes(3);
    let cfg = RunConfig { finetune_steps: 2, ..RunConfig::micro() };
    let (_, own) = finetune(Some(&ck.model), Task::MapStatic, &cfg, &eps[..2], &eps[2..], None, None).unwrap();
    let (_, swapped) =
        finetune(Some(&ck.model), Task::MapStatic, &cfg, &eps[..2], &eps[2..], Some(TaskPrompt::detect_dynamic()), None)
            .unwrap();
    assert_ne!(own.final_loss, swapped.final_loss);
    let (_, scratch) = finetune(None, Task::MapStatic, &cfg, &eps[..2], &eps[2..], None, None).unwrap();
    assert!(!scratch.pretrained);
}

#[test]
fn ablation_grid_and_flag_isolation() {
    let dir = tempfile::tempdir().unwrap();
    let base = RunConfig { steps: 1, ..RunConfig::micro() };
    let manifest: Manifest = make_dataset(&base.world, 5, 0, dir.path()).unwrap();
    assert_eq!(manifest.split(Split::Val).len(), 1);
    let variants = lattice();
    assert_eq!(variants.len(), 6);
    assert_eq!(variants[0].flags, Flags::RSSM);
    let rows = ablate(&base, &manifest, &variants[..1], &[0, 1], None).unwrap();
    assert_eq!(rows.len(), 2);
    let table = ablation_table(&rows);
    assert_eq!(table.lines().count(), 3);
    assert!(table.lines().nth(1).unwrap().starts_with("rssm\t"));

    let full = pretrain(&base, &episodes(1), None).unwrap().checkpoint;
    let rssm = pretrain(&RunConfig { flags: Flags::RSSM, ..base.clone() }, &episodes(1), None).unwrap().checkpoint;
    let names = |c: &Checkpoint| c.model.params.groups().iter().map(|g| g.name.clone()).collect::<Vec<_>>();
    let missing: Vec<String> = names(&full).into_iter().filter(|n| !names(&rssm).contains(n)).collect();
    assert_eq!(missing, ["attn", "xi1", "xi2", "ssp.z1", "ssp.z2", "ssp.decoder_in", "prompt.table", "prompt.film"]);
}

#[test]
fn positive_weight_from_targets() {
    let eps = episodes(3);
    let cfg = RunConfig::micro();
    let w = positive_weight(Task::MapStatic, &cfg, &eps);
    let (pos, n) = eps.iter().fold((0, 0), |(p, n), ep| {
        let y = Task::MapStatic.target(ep);
        (p + y.iter().filter(|&&b| b).count(), n + y.len())
    });
    assert!((w - (((n - pos) as f64 / pos as f64).sqrt()).max(1.0)).abs() < 1e-12);
    assert_eq!(positive_weight(Task::MapStatic, &RunConfig { pos_weight: 2.5, ..cfg }, &eps), 2.5);
}

#[test]
fn weighted_bce_values_and_gradient() {
    let p = crate::nn::ParamStore::<f64>::new();
    let xs = [-2.0, 0.0, 0.5, 3.0];
    let ys = [true, false, true, false];
    let sp = |x: f64| (1.0 + x.exp()).ln();
    for w in [1.0, 4.0] {
        let mut t = crate::nn::Tape::new(&p, false);
        let x = t.g.variable(&[4], xs.to_vec()).unwrap();
        let l = weighted_bce(&mut t, x, &ys, w).unwrap();
        let want: f64 = xs.iter().zip(ys).map(|(&x, y)| if y { w * sp(-x) } else { sp(x) }).sum::<f64>() / 4.0;
        assert!((t.g.scalar(l) - want).abs() < 1e-12);
        if w == 1.0 {
            // softplus(x) - y x
            let alt: f64 = xs.iter().zip(ys).map(|(&x, y)| sp(x) - y as u8 as f64 * x).sum::<f64>() / 4.0;
            assert!((t.g.scalar(l) - alt).abs() < 1e-12);
        }
        t.g.backward(l).unwrap();
        let grad = t.g.grad(x);
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        for (i, (&v, y)) in xs.iter().zip(ys).enumerate() {
            let d = if y { -w * (1.0 - sig(v)) } else { sig(v) } / 4.0;
            assert!((grad[i] - d).abs() < 1e-12, "{i}");
        }
    }
}
