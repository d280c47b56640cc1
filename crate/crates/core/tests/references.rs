use icuda::datagen::{gen_shifted_gaussians, gen_two_moon, LabelRule, ShiftGaussConfig, TwoMoonConfig};
use icuda::uda_ref::{dann_run, domain_accuracy, softmin, ulsif_build, ulsif_closed_form, ulsif_gd, ulsif_residual, Activation};
use icuda::harness::Predictor;
use icuda::{DannHyper, DannState, FeatureMap};
use proptest::prelude::*;

fn shifted(d: usize, n: usize, shift: f64, seed: u64) -> icuda::DomainPair {
    gen_shifted_gaussians(&ShiftGaussConfig {
        d,
        source_mean: vec![0.0; d],
        target_mean: vec![shift; d],
        shared_cov_scale: 1.0,
        target_cov_scale: None,
        label_rule: LabelRule { normal: vec![1.0; d], offset: 0.0 },
        n,
        n_prime: n,
        seed,
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ulsif_descent_reaches_the_normal_equations(seed in 0u64..1000, j in 1usize..6, d in 1usize..3, shift in 0.0f64..1.5) {
        let pair = shifted(d, 16, shift, seed);
        let p = ulsif_build(&pair, FeatureMap::rbf_from_pair(&pair, j).unwrap(), 0.1).unwrap();
        let eta = p.safe_eta1();
        let p = p.with_schedule(eta, 2000);
        let closed = ulsif_closed_form(&p).unwrap();
        prop_assert!(ulsif_residual(&p, &closed) < 1e-10);
        let gd = ulsif_gd(&p).unwrap();
        prop_assert_eq!(gd.len(), 2001);
        let gap = gd.last().unwrap().iter().zip(&closed).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(gap < 1e-8, "gap {}", gap);
    }

    #[test]
    fn softmin_sits_between_min_and_shifted_min(v in prop::collection::vec(-5.0f64..5.0, 1..40), beta in 0.5f64..500.0) {
        let m = v.iter().copied().fold(f64::INFINITY, f64::min);
        let s = softmin(&v, beta).unwrap();
        prop_assert!(s <= m + 1e-12);
        prop_assert!(s >= m - (v.len() as f64).ln() / beta - 1e-12);
    }

    #[test]
    fn softmin_is_order_free(mut v in prop::collection::vec(-1.0f64..1.0, 2..20), beta in 1.0f64..300.0) {
        let a = softmin(&v, beta).unwrap();
        v.reverse();
        prop_assert!((softmin(&v, beta).unwrap() - a).abs() < 1e-12);
    }
}

#[test]
fn zero_step_size_freezes_dann() {
    let pair = gen_two_moon(&TwoMoonConfig { n_per_domain: 30, rotation: 0.5, noise_std: 0.1, seed: 2 }).unwrap();
    let hp = DannHyper {
        k: 4,
        b_u: 3.0,
        b_w: 3.0,
        b_v: 3.0,
        eta: 0.0,
        lambda_tradeoff: 0.5,
        activation: Activation::Logistic,
        clamp_delta: 0.1,
        init_scale: 1.0,
    };
    let st0 = DannState::init(&hp, 2, 11).unwrap();
    let run = dann_run(&pair, &st0, 25).unwrap();
    assert!(run.trace.iter().all(|st| *st == st0));
    let xs: Vec<Vec<f64>> = pair.source.iter().map(|s| s.x.clone()).collect();
    let ys: Vec<f64> = pair.source.iter().map(|s| s.y).collect();
    let last = run.trace.last().unwrap().clone();
    assert_eq!(Predictor::Network(st0.clone()).accuracy(&xs, &ys), Predictor::Network(last.clone()).accuracy(&xs, &ys));
    assert_eq!(domain_accuracy(&pair, &st0), domain_accuracy(&pair, &last));
}
