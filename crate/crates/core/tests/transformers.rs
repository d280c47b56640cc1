use icuda::build_dann::{build_dann_transformer, run_dann, DannConfig};
use icuda::build_iwl::{build_iwl_transformer, run_iwl, IwlConfig};
use icuda::datagen::{gen_shifted_gaussians, gen_two_moon, LabelRule, ShiftGaussConfig, TwoMoonConfig};
use icuda::tfcore::{forward, read_output};
use icuda::uda_ref::Activation;
use icuda::{DannHyper, DannState, DomainPair};

fn gaussians(seed: u64) -> DomainPair {
    gen_shifted_gaussians(&ShiftGaussConfig {
        d: 1,
        source_mean: vec![0.0],
        target_mean: vec![1.0],
        shared_cov_scale: 1.0,
        target_cov_scale: None,
        label_rule: LabelRule { normal: vec![1.0], offset: 0.5 },
        n: 16,
        n_prime: 16,
        seed,
    })
    .unwrap()
}

#[test]
fn iwl_output_ignores_source_order() {
    let pair = gaussians(21);
    let build = build_iwl_transformer(&pair, &IwlConfig::default()).unwrap();
    let base = read_output(&build.transformer, &forward(&build.transformer, &build.encode(&pair).unwrap()).unwrap()).unwrap();
    let mut shuffled = pair.clone();
    shuffled.source.reverse();
    shuffled.source.rotate_left(5);
    let out = read_output(&build.transformer, &forward(&build.transformer, &build.encode(&shuffled).unwrap()).unwrap()).unwrap();
    assert!((out - base).abs() < 1e-12, "{out} vs {base}");
}

#[test]
fn iwl_prediction_within_certificate() {
    let pair = gaussians(22);
    let build = build_iwl_transformer(&pair, &IwlConfig::default()).unwrap();
    let run = run_iwl(&build, &pair).unwrap();
    assert!(run.within_bounds);
    assert!((run.prediction - build.reference_exact.prediction).abs() <= build.certificate.bound);
}

#[test]
fn dann_steps_track_the_reference() {
    let pair = gen_two_moon(&TwoMoonConfig { n_per_domain: 12, rotation: 0.6, noise_std: 0.1, seed: 4 }).unwrap();
    let hp = DannHyper {
        k: 2,
        b_u: 2.0,
        b_w: 2.0,
        b_v: 2.0,
        eta: 0.5,
        lambda_tradeoff: 0.5,
        activation: Activation::Logistic,
        clamp_delta: 0.1,
        init_scale: 1.0,
    };
    let st0 = DannState::init(&hp, 2, 4).unwrap();
    let build = build_dann_transformer(&pair, &st0, &DannConfig { steps: 2, ..DannConfig::default() }).unwrap();
    assert_eq!(build.transformer.depth(), 2 * 2 + 1);
    let run = run_dann(&build, &pair).unwrap();
    assert_eq!(run.steps.len(), 2);
    assert!(run.steps.iter().all(|s| s.passes().iter().all(|&ok| ok)), "{:?}", run.steps);
    assert!((run.prediction - run.reference_prediction).abs() <= run.prediction_bound);
}
