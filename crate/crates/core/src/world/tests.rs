use std::collections::HashSet;

use super::*;

fn clean_cfg() -> WorldConfig {
    WorldConfig { n_agents: 0, noise: 0.0, occlusion_radius: 0.0, ..WorldConfig::default() }
}

#[test]
fn uncorrupted_observations_equal_labels() {
    let ep = simulate_episode(&clean_cfg(), 3).unwrap();
    assert_eq!(ep.obs, ep.labels);
}

#[test]
fn agent_moves_by_its_velocity() {
    let cfg = WorldConfig { turn_prob: 0.0, ..WorldConfig::default() };
    let mut w = World::blank(&cfg, 20, 20, 0);
    w.ego = (15, 15);
    w.agents.push(Agent { row: 2, col: 3, vel: (1, 0) });
    w.advance([0.0, 0.0]);
    assert_eq!((w.agents[0].row, w.agents[0].col), (3, 3));
}

#[test]
fn blocked_agent_stays_put() {
    let cfg = WorldConfig { turn_prob: 0.0, ..WorldConfig::default() };
    let mut w = World::blank(&cfg, 20, 20, 0);
    w.ego = (15, 15);
    w.agents.push(Agent { row: 2, col: 3, vel: (1, 0) });
    w.agents.push(Agent { row: 4, col: 3, vel: (0, 0) });
    w.advance([0.0, 0.0]);
    assert_eq!(w.agents[0].row, 2);
}

#[test]
fn same_seed_is_byte_identical() {
    let cfg = WorldConfig::default();
    let a = encode_episode(&simulate_episode(&cfg, 11).unwrap());
    let b = encode_episode(&simulate_episode(&cfg, 11).unwrap());
    assert_eq!(a, b);
}

#[test]
fn labels_are_valid_classes_and_actions_bounded() {
    let cfg = WorldConfig::default();
    for seed in 0..10 {
        let ep = simulate_episode(&cfg, seed).unwrap();
        assert!(ep.labels.iter().all(|&c| (c as usize) < NUM_CLASSES));
        assert!(ep.obs.iter().all(|&c| (c as usize) < NUM_CLASSES || c == UNKNOWN));
        let b = cfg.action_bounds();
        for a in &ep.actions {
            assert!(a[0] >= 0.0 && f64::from(a[0]) <= b[0] && f64::from(a[1]).abs() <= b[1], "{a:?}");
        }
        let hot = ep.observation_onehot(0);
        let plane = cfg.height * cfg.width;
        for z in 0..cfg.z_slabs {
            for p in 0..plane {
                let s: f64 = (0..3).map(|c| hot[(z * 3 + c) * plane + p]).sum();
                let known = ep.observation(0)[z * plane + p] != UNKNOWN;
                assert_eq!(s, if known { 1.0 } else { 0.0 });
            }
        }
    }
}

#[test]
fn dynamic_census_is_constant() {
    let cfg = WorldConfig { noise: 0.1, ..WorldConfig::default() };
    for seed in 0..5 {
        let mut w = World::generate(&cfg, seed).unwrap();
        let count = |w: &World| w.global_labels().iter().filter(|&&c| c == DYNAMIC).count();
        let expect = cfg.n_agents * 4 * AGENT_HEIGHT;
        for _ in 0..cfg.steps() {
            assert_eq!(count(&w), expect);
            let a = w.policy_action();
            w.advance(a);
        }
        assert_eq!(count(&w), expect);
    }
}

#[test]
fn replay_reproduces_labels() {
    let cfg = WorldConfig::default();
    for seed in [1, 7, 19] {
        let ep = simulate_episode(&cfg, seed).unwrap();
        let again = replay_episode(&cfg, seed, &ep.actions).unwrap();
        assert_eq!(again.labels, ep.labels);
        assert!(matches!(replay_episode(&cfg, seed, &ep.actions[1..]), Err(WorldError::ReplayLength { .. })));
    }
}

#[test]
fn occlusion_and_noise_corrupt_observations() {
    let cfg = WorldConfig::default();
    let ep = simulate_episode(&cfg, 2).unwrap();
    let unknown = ep.obs.iter().filter(|&&c| c == UNKNOWN).count();
    assert!(unknown > 0);
    let flipped = ep.obs.iter().zip(&ep.labels).filter(|(o, y)| **o != UNKNOWN && o != y).count();
    let known = ep.obs.len() - unknown;
    let rate = flipped as f64 / known as f64;
    assert!((rate - cfg.noise).abs() < 0.01, "{rate}");
}

#[test]
fn ego_sees_dynamic_and_static_classes() {
    let cfg = WorldConfig::default();
    let mut seen = [0usize; 3];
    for seed in 0..8 {
        let ep = simulate_episode(&cfg, seed).unwrap();
        for &c in &ep.labels {
            seen[c as usize] += 1;
        }
    }
    assert!(seen.iter().all(|&n| n > 0), "{seen:?}");
}

#[test]
fn too_many_agents_is_a_placement_error() {
    let cfg = WorldConfig { n_agents: 500, ..WorldConfig::default() };
    assert!(matches!(simulate_episode(&cfg, 0), Err(WorldError::Placement(500))));
}

#[test]
fn invalid_config_rejected() {
    for cfg in [
        WorldConfig { height: 4, ..WorldConfig::default() },
        WorldConfig { t_obs: 0, ..WorldConfig::default() },
        WorldConfig { noise: 0.5, ..WorldConfig::default() },
    ] {
        assert!(matches!(simulate_episode(&cfg, 0), Err(WorldError::Config(_))));
    }
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ep.twld");
    let ep = simulate_episode(&WorldConfig::default(), 5).unwrap();
    write_episode(&ep, &path).unwrap();
    let back = read_episode(&path).unwrap();
    assert_eq!(back, ep);
    assert_eq!(encode_episode(&back), std::fs::read(&path).unwrap());
}

#[test]
fn corrupted_files_fail_distinctly() {
    let ep = simulate_episode(&WorldConfig { height: 8, width: 8, ..WorldConfig::default() }, 1).unwrap();
    let good = encode_episode(&ep);

    let mut bad = good.clone();
    bad[0] = b'X';
    assert!(matches!(decode_episode(&bad), Err(WorldError::BadMagic(_))));

    let mut bad = good.clone();
    bad[4] = 9;
    assert!(matches!(decode_episode(&bad), Err(WorldError::Version { found: 9, .. })));

    assert!(matches!(decode_episode(&good[..good.len() - 10]), Err(WorldError::Truncated { .. })));

    let mut bad = good.clone();
    bad[6] = 9; // header height no longer matches the payload
    assert!(matches!(decode_episode(&bad), Err(WorldError::Truncated { .. })));

    let mut bad = good.clone();
    let mid = bad.len() / 2;
    bad[mid] ^= 0x01;
    assert!(matches!(decode_episode(&bad), Err(WorldError::Checksum { .. })));
}

#[test]
fn dataset_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = WorldConfig { height: 16, width: 16, ..WorldConfig::default() };
    let m = make_dataset(&cfg, 4, 100, dir.path()).unwrap();
    assert_eq!(m.entries.len(), 4);
    let files = std::fs::read_dir(dir.path()).unwrap().count();
    assert_eq!(files, 5);
    let read = Manifest::read(dir.path()).unwrap();
    assert_eq!(read.fingerprint, m.fingerprint);
    assert_eq!(read.entries, m.entries);
    for e in &read.entries {
        let ep = read.load(e).unwrap();
        assert_eq!(ep.steps(), cfg.steps());
    }

    let other = tempfile::tempdir().unwrap();
    let again = make_dataset(&cfg, 4, 100, other.path()).unwrap();
    assert_eq!(again.fingerprint, m.fingerprint);
    assert_eq!(again.to_text(), m.to_text());
}

#[test]
fn disjoint_seeds_give_distinct_episodes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = WorldConfig { height: 16, width: 16, ..WorldConfig::default() };
    let m = make_dataset(&cfg, 12, 0, dir.path()).unwrap();
    let hashes: HashSet<_> = m.entries.iter().map(|e| e.sha256.clone()).collect();
    assert_eq!(hashes.len(), 12);
    assert_eq!(m.split(Split::Val).len(), 2);
    assert_eq!(m.train_fraction(0.5).len(), 5);
}

#[test]
fn tampered_episode_fails_digest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = WorldConfig { height: 8, width: 8, ..WorldConfig::default() };
    let m = make_dataset(&cfg, 1, 0, dir.path()).unwrap();
    let p = dir.path().join(&m.entries[0].path);
    let mut bytes = std::fs::read(&p).unwrap();
    bytes[40] ^= 1;
    std::fs::write(&p, bytes).unwrap();
    assert!(matches!(m.load(&m.entries[0]), Err(WorldError::Manifest(_))));
}

#[test]
fn truncated_episode_keeps_prefix() {
    let ep = simulate_episode(&WorldConfig::default(), 4).unwrap();
    let t = ep.truncated(ep.t_obs);
    assert_eq!(t.steps(), ep.t_obs);
    assert_eq!(t.label(ep.t_obs - 1), ep.label(ep.t_obs - 1));
}

