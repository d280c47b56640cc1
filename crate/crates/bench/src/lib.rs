//! Fixtures shared by the forward-pass benchmarks.

use icuda::build_dann::{build_dann_transformer, encode_dann, DannBuild, DannConfig};
use icuda::build_iwl::{build_iwl_transformer, IwlBuild, IwlConfig};
use icuda::datagen::{gen_shifted_gaussians, gen_two_moon, LabelRule, ShiftGaussConfig, TwoMoonConfig};
use icuda::{Activation, DannHyper, DannState, DomainPair, TokenMatrix};

/// One-dimensional Gaussian shift with `n` samples per domain.
pub fn gaussian_pair(n: usize, seed: u64) -> DomainPair {
    gen_shifted_gaussians(&ShiftGaussConfig {
        d: 1,
        source_mean: vec![0.0],
        target_mean: vec![1.0],
        shared_cov_scale: 1.0,
        target_cov_scale: None,
        label_rule: LabelRule { normal: vec![1.0], offset: 0.5 },
        n,
        n_prime: n,
        seed,
    })
    .expect("valid generator config")
}

pub fn moon_pair(n_per_domain: usize, seed: u64) -> DomainPair {
    gen_two_moon(&TwoMoonConfig { n_per_domain, rotation: std::f64::consts::FRAC_PI_4, noise_std: 0.1, seed })
        .expect("valid generator config")
}

pub fn iwl_fixture(n: usize) -> (IwlBuild, TokenMatrix) {
    let pair = gaussian_pair(n, 0);
    let build = build_iwl_transformer(&pair, &IwlConfig::default()).expect("IWL build");
    let h0 = build.encode(&pair).expect("IWL encoding");
    (build, h0)
}

pub fn dann_fixture(n_per_domain: usize, steps: usize) -> (DannBuild, TokenMatrix) {
    let pair = moon_pair(n_per_domain, 0);
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
    let st0 = DannState::init(&hp, pair.d(), 0).expect("DANN init");
    let cfg = DannConfig { steps, ..DannConfig::default() };
    let build = build_dann_transformer(&pair, &st0, &cfg).expect("DANN build");
    let h0 = encode_dann(&pair, &st0, &build.transformer.layout).expect("DANN encoding");
    (build, h0)
}
