use icuda::build_select::*;
use icuda::datagen::{encode_tokens, gen_shifted_gaussians, LabelRule, ShiftGaussConfig};
use icuda::tfcore::{attn_forward, forward, mlp_forward, Transformer, TransformerLayer};
use icuda::uda_ref::{kde_eval, softmin};
use icuda::{DomainPair, ReluSum, ReluTerm};

fn pair(n: usize, n_prime: usize, seed: u64) -> DomainPair {
    gen_shifted_gaussians(&ShiftGaussConfig {
        d: 1,
        source_mean: vec![0.0],
        target_mean: vec![1.0],
        shared_cov_scale: 1.0,
        target_cov_scale: None,
        label_rule: LabelRule { normal: vec![1.0], offset: 0.5 },
        n,
        n_prime,
        seed,
    })
    .unwrap()
}

fn constant_kernel() -> ReluSum {
    ReluSum::new(1, 10.0, vec![ReluTerm::new(vec![0.0], 1.0, 1.0)])
}

#[test]
fn constant_kernel_gives_unit_density_everywhere() {
    for (n, np) in [(1, 1), (1, 5), (9, 4)] {
        let pr = pair(n, np, 3);
        let layout = select_layout(1).unwrap();
        let h = encode_tokens(&pr, &layout).unwrap();
        let layer = TransformerLayer::attention(build_kde_attn(&constant_kernel(), &layout, n, np).unwrap(), layout.dim());
        let out = attn_forward(&layer, &h).unwrap();
        for c in 0..out.tokens() {
            assert!((out.get("p", 0, c).unwrap() - 1.0).abs() < 1e-14, "n={n} col {c}");
        }
    }
}

#[test]
fn kde_attention_matches_gaussian_density() {
    let pr = pair(24, 12, 5);
    let cfg = SelectConfig::default();
    let layout = select_layout(1).unwrap();
    let kernel = fit_kernel(1, pr.bounds.b_x, &cfg).unwrap();
    let layer = TransformerLayer::attention(build_kde_attn(&kernel, &layout, pr.n(), pr.n_prime()).unwrap(), layout.dim());
    let out = attn_forward(&layer, &encode_tokens(&pr, &layout).unwrap()).unwrap();
    let xs = pr.source_xs();
    for c in 0..out.tokens() {
        let x = out.slot_col("x", c).unwrap();
        let want = kde_eval(&xs, &x, cfg.selector.kernel_bandwidth, false).unwrap();
        let got = out.get("p", 0, c).unwrap();
        assert!((got - want).abs() <= kernel.sup_error + 1e-12, "col {c}: {got} vs {want}");
    }
}

#[test]
fn sum_attention_counts_targets_exactly() {
    let pr = pair(4, 7, 1);
    let layout = select_layout(1).unwrap();
    let mut h = encode_tokens(&pr, &layout).unwrap();
    for c in 0..h.tokens() {
        h.set_slot_col("e", c, &[1.0]).unwrap();
    }
    let layer = TransformerLayer::attention(build_sum_attn(&layout, 4, 7, 1.0).unwrap(), layout.dim());
    let out = attn_forward(&layer, &h).unwrap();
    for c in 0..out.tokens() {
        assert_eq!(out.get("sigma", 0, c).unwrap(), 7.0);
    }
}

#[test]
fn softmin_of_equal_entries() {
    let beta = 200.0;
    for (np, p) in [(1usize, 0.3), (7, 0.15), (50, 0.05)] {
        let want = p - (np as f64).ln() / beta;
        assert!((softmin(&vec![p; np], beta).unwrap() - want).abs() < 1e-14);
    }
}

#[test]
fn exp_then_sum_then_log_recovers_softmin_of_equal_densities() {
    let (beta, np) = (200.0, 7usize);
    let cfg = SelectConfig::default();
    let exp = fit_exp(beta, cfg.exp_cutoff, 1.0, cfg.exp_rel_tol).unwrap();
    let sigma_lo = (-beta * cfg.q_cap).exp();
    let log = fit_log(beta, sigma_lo, np as f64 * 1.1, cfg.log_tol).unwrap();
    let pr = pair(3, np, 2);
    let layout = select_layout(1).unwrap();
    let mut h = encode_tokens(&pr, &layout).unwrap();
    let p = 0.02;
    for c in 0..h.tokens() {
        h.set_slot_col("p", c, &[p]).unwrap();
    }
    let (ew1, ew2) = build_exp_mlp(&exp.fit, &layout).unwrap();
    let (lw1, lw2) = build_log_mlp(&log, &layout).unwrap();
    let h = mlp_forward(&TransformerLayer::mlp(ew1, ew2), &h).unwrap();
    let mut sum = TransformerLayer::mlp(lw1, lw2);
    sum.heads = build_sum_attn(&layout, 3, np, 1.01).unwrap();
    let tf = Transformer::new(vec![sum], layout.clone());
    let out = forward(&tf, &h).unwrap();
    let q = out.get("q", 0, out.query_col()).unwrap();
    let want = p - (np as f64).ln() / beta;
    let bound = -(1.0 - exp.rel_err).ln() / beta + log.sup_error;
    assert!((q - want).abs() <= bound, "{q} vs {want}, bound {bound}");
}

fn select_once(q: f64, delta: f64, a: f64, f_iwl: f64, f_dann: f64) -> f64 {
    let pr = pair(5, 5, 9);
    let mut layout = select_layout(1).unwrap();
    layout.push("out", 1).unwrap();
    let mut h = encode_with_branches(&pr, &layout, f_iwl, f_dann).unwrap();
    let qc = h.query_col();
    h.set_slot_col("q", qc, &[q]).unwrap();
    let (w1, w2) = build_copy_mlp(&layout, "f_dann", "out").unwrap();
    let mut layer = TransformerLayer::mlp(w1, w2);
    layer.heads = build_select_attn(&layout, delta, a, 3.0, 5, 5, "out").unwrap();
    let out = forward(&Transformer::new(vec![layer], layout), &h).unwrap();
    out.get("out", 0, qc).unwrap()
}

#[test]
fn select_layer_picks_branch_by_margin() {
    let (fi, fd) = (0.8, -0.3);
    assert!((select_once(1.0, 0.0, 1.0, fi, fd) - fi).abs() < 1e-12);
    assert!((select_once(0.0, 0.0, 1.0, fi, fd) - 0.5 * (fi + fd)).abs() < 1e-12);
    assert!((select_once(-1.0, 0.0, 1.0, fi, fd) - fd).abs() < 1e-12);
    assert!((select_once(0.06, 0.05, 100.0, fi, fd) - fi).abs() < 1e-12);
    assert!((select_once(0.04, 0.05, 100.0, fi, fd) - fd).abs() < 1e-12);
}

#[test]
fn selection_stack_has_three_layers_and_finite_chain_bound() {
    let pr = pair(16, 16, 4);
    let sel = build_selection_layers(&pr, &SelectConfig::default(), "y").unwrap();
    assert_eq!(sel.layers.len(), 3);
    assert!(sel.fits.chain_bound.is_finite() && sel.fits.chain_bound > 0.0);
}
