use mssm::pipeline::{evaluate, pretrain, RunConfig};
use mssm::world::simulate_episode;

/// Fully observed, noise-free episode: as the model overfits, the posterior
/// gains nothing over the prior and their KL shrinks at every checkpoint.
#[test]
fn posterior_prior_kl_decreases_while_overfitting() {
    let mut cfg = RunConfig { batch: 1, lr: 3e-3, ..RunConfig::micro() };
    cfg.world.noise = 0.0;
    cfg.world.occlusion_radius = 0.0;
    let ep = simulate_episode(&cfg.world, 4).unwrap();
    assert_eq!(ep.obs, ep.labels);

    // runs share their first steps, so a k-step run is the checkpoint at k
    let checkpoints = [300, 400, 500, 600, 700, 800];
    let kl: Vec<f64> = checkpoints
        .iter()
        .map(|&steps| {
            let out = pretrain(&RunConfig { steps, ..cfg.clone() }, std::slice::from_ref(&ep), None).unwrap();
            evaluate(&out.checkpoint.model, std::slice::from_ref(&ep), 0).unwrap().kl
        })
        .collect();
    println!("{kl:?}");
    for w in kl.windows(2) {
        assert!(w[1] < w[0], "{kl:?}");
    }
}
