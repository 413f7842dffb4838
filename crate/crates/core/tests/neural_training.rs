use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use udslab::gmm::{GaussianMixture, GmmOracle, PromptRegistry};
use udslab::neural::{support_grid_rms, train, DenoiserNet, TrainConfig};
use udslab::{Condition, Denoiser, LabError, NoiseSchedule};

fn trained(registry: &PromptRegistry, hidden: usize, steps: usize) -> (DenoiserNet, Vec<f64>) {
    let sched = NoiseSchedule::default_linear();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut net = DenoiserNet::new(registry.dim(), registry.len(), hidden, &mut rng).unwrap();
    let cfg = TrainConfig {
        steps,
        ..TrainConfig::default()
    };
    let trace = train(&mut net, registry, &sched, &cfg).unwrap();
    (net, trace)
}

#[test]
fn learns_the_standard_normal_predictor() {
    let sched = NoiseSchedule::default_linear();
    let registry = PromptRegistry::new(vec![(
        "n".into(),
        GaussianMixture::isotropic(vec![0.0, 0.0], 1.0).unwrap(),
    )])
    .unwrap();
    let (net, trace) = trained(&registry, 32, 20_000);
    assert_eq!(trace.len(), 20_000);
    let tail = &trace[trace.len() - 2000..];
    let final_loss = tail.iter().sum::<f64>() / tail.len() as f64;
    assert!(final_loss < 2.0, "{final_loss}");

    let oracle = GmmOracle::new(registry.clone());
    let rms = support_grid_rms(&net, &oracle, &registry, &sched).unwrap();
    assert!(rms <= 0.05, "{rms}");

    let (mut se, mut n) = (0.0, 0.0);
    for t in (25..=1000).step_by(25) {
        let s = (1.0 - sched.alpha_bar(t)).sqrt();
        for i in 0..9 {
            for j in 0..9 {
                let x = [-2.0 + 0.5 * i as f64, -2.0 + 0.5 * j as f64];
                let p = net.predict(&x, t, Condition::Prompt(0), &sched).unwrap();
                se += (p[0] - s * x[0]).powi(2) + (p[1] - s * x[1]).powi(2);
                n += 2.0;
            }
        }
    }
    let box_rms = (se / n).sqrt();
    assert!(box_rms <= 0.05, "{box_rms}");
}

#[test]
fn dropout_yields_a_distinct_unconditional_branch() {
    let sched = NoiseSchedule::default_linear();
    let a = GaussianMixture::isotropic(vec![-2.0, 0.0], 0.1).unwrap();
    let b = GaussianMixture::isotropic(vec![2.0, 0.0], 0.1).unwrap();
    let registry = PromptRegistry::new(vec![("a".into(), a), ("b".into(), b)]).unwrap();
    let (net, _) = trained(&registry, 32, 5_000);
    let t = 300;
    for m in [[-2.0, 0.0], [2.0, 0.0]] {
        let x: Vec<f64> = m.iter().map(|v| sched.alpha_bar(t).sqrt() * v).collect();
        let u = net.predict(&x, t, Condition::Unconditional, &sched).unwrap();
        let pa = net.predict(&x, t, Condition::Prompt(0), &sched).unwrap();
        let pb = net.predict(&x, t, Condition::Prompt(1), &sched).unwrap();
        assert!(u.iter().all(|v| v.is_finite()));
        let dist = |p: &[f64], q: &[f64]| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
        assert!(dist(&u, &pa) > 0.05, "{u:?} {pa:?}");
        assert!(dist(&u, &pb) > 0.05, "{u:?} {pb:?}");
    }
}

#[test]
fn divergence_aborts_training() {
    let sched = NoiseSchedule::default_linear();
    let registry = PromptRegistry::new(vec![(
        "n".into(),
        GaussianMixture::isotropic(vec![0.0, 0.0], 1.0).unwrap(),
    )])
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut net = DenoiserNet::new(2, 1, 16, &mut rng).unwrap();
    let cfg = TrainConfig {
        steps: 500,
        lr: 10.0,
        ..TrainConfig::default()
    };
    match train(&mut net, &registry, &sched, &cfg) {
        Err(LabError::TrainingDiverged { loss, initial, .. }) => assert!(!(loss <= 10.0 * initial)),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn training_rejects_mismatched_registry() {
    let sched = NoiseSchedule::default_linear();
    let registry = PromptRegistry::new(vec![(
        "n".into(),
        GaussianMixture::isotropic(vec![0.0, 0.0], 1.0).unwrap(),
    )])
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut wrong_dim = DenoiserNet::new(3, 1, 8, &mut rng).unwrap();
    assert!(train(&mut wrong_dim, &registry, &sched, &TrainConfig::default()).is_err());
    let mut wrong_slots = DenoiserNet::new(2, 2, 8, &mut rng).unwrap();
    assert!(train(&mut wrong_slots, &registry, &sched, &TrainConfig::default()).is_err());
}
