//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::f64::consts::FRAC_PI_4;
use std::time::Instant;

use icuda::build_dann::{build_dann_transformer, run_dann, DannConfig};
use icuda::build_iwl::{build_alpha_layers, build_iwl_transformer, iwl_layout, run_iwl, tokens_with_features, IwlConfig};
use icuda::build_select::{build_icuda_transformer, run_icuda, IcudaConfig};
use icuda::datagen::{gen_shifted_gaussians, gen_shifted_gaussians_labeled, gen_two_moon, gen_two_moon_labeled, DomainPair, LabelRule, ShiftGaussConfig, TwoMoonConfig};
use icuda::harness::{reference_dann, reference_iwl, sanity_dann_hyper, RunSchedule};
use icuda::tfcore::{forward_trace, tf_norm, Transformer};
use icuda::uda_ref::{
    dann_losses, dann_partials, kde_eval, softmin, ulsif_build, ulsif_closed_form, ulsif_gd, ulsif_residual, Activation, Branch, DannHyper, DannState,
    FeatureMap,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn diff(a: &[f64], b: &[f64]) -> f64 {
    norm(&a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>())
}

fn shift_pair(d: usize, shift: f64, n: usize, seed: u64) -> DomainPair {
    gen_shifted_gaussians(&ShiftGaussConfig {
        d,
        source_mean: vec![0.0; d],
        target_mean: vec![shift; d],
        shared_cov_scale: 1.0,
        target_cov_scale: None,
        label_rule: LabelRule { normal: vec![1.0; d], offset: 0.5 },
        n,
        n_prime: n,
        seed,
    })
    .unwrap()
}

/// 20 instances cycling through n in {8, 32} and J in {1, 3, 8}.
fn ulsif_instances() -> Vec<(DomainPair, FeatureMap)> {
    (0..20u64)
        .map(|i| {
            let n = [8, 32][(i % 2) as usize];
            let j = [1, 3, 8][(i % 3) as usize];
            let d = 1 + (i % 2) as usize;
            let pair = shift_pair(d, 0.7, n, 100 + i);
            let f = FeatureMap::rbf_from_pair(&pair, j).unwrap();
            (pair, f)
        })
        .collect()
}

fn alpha_gd_exactness() -> Outcome {
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    for (pair, f) in ulsif_instances() {
        let p = ulsif_build(&pair, f.clone(), 0.1).unwrap();
        let reference = ulsif_gd(&p).unwrap();
        let layout = iwl_layout(pair.d(), f.dim(), "y").unwrap();
        let h0 = tokens_with_features(&pair, &f, &layout).unwrap();
        let b_phi = (0..h0.tokens()).map(|c| norm(&h0.slot_col("phi", c).unwrap())).fold(0.0, f64::max);
        let b_alpha = 2.0 * reference.iter().map(|a| norm(a)).fold(0.0, f64::max);
        let layers = build_alpha_layers(&p, &layout, pair.n(), pair.n_prime(), (b_phi * b_alpha).max(1.0)).unwrap();
        let tf = Transformer::new(layers, layout);
        let trace = forward_trace(&tf, &h0).unwrap();
        for (h, a_ref) in trace.iter().zip(reference.iter().skip(1)) {
            for c in 0..h.tokens() {
                let a = h.slot_col("alpha", c).unwrap();
                let scale = norm(a_ref);
                let err = if scale > 0.0 { diff(&a, a_ref) / scale } else { norm(&a) };
                worst = worst.max(err);
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    Outcome { pass: worst <= 1e-9 && secs < 10.0, detail: format!("max relative error {worst:.2e}, {secs:.2} s") }
}

fn ulsif_consistency() -> Outcome {
    let mut worst_gap: f64 = 0.0;
    let mut worst_res: f64 = 0.0;
    for (pair, f) in ulsif_instances() {
        let p = ulsif_build(&pair, f, 0.1).unwrap();
        let eta = p.safe_eta1();
        let p = p.with_schedule(eta, 500);
        let closed = ulsif_closed_form(&p).unwrap();
        let gd = ulsif_gd(&p).unwrap();
        worst_gap = worst_gap.max(diff(gd.last().unwrap(), &closed));
        worst_res = worst_res.max(ulsif_residual(&p, &closed));
    }
    Outcome { pass: worst_gap <= 1e-6 && worst_res <= 1e-10, detail: format!("max gap {worst_gap:.2e}, max residual {worst_res:.2e}") }
}

struct IwlInstance {
    deviation: f64,
    bound: f64,
    eps_grad: f64,
    norm_measured: f64,
    norm_expression: f64,
    norm_holds: bool,
}

fn iwl_instances() -> (Vec<IwlInstance>, f64) {
    let t0 = Instant::now();
    let out = (0..10u64)
        .map(|seed| {
            let pair = shift_pair(1, 1.0, 32, seed);
            let b = build_iwl_transformer(&pair, &IwlConfig::default()).unwrap();
            let r = run_iwl(&b, &pair).unwrap();
            let c = &b.certificate;
            IwlInstance {
                deviation: (r.prediction - b.reference_exact.prediction).abs(),
                bound: c.bound,
                eps_grad: c.eps_grad,
                norm_measured: tf_norm(&b.transformer),
                norm_expression: c.norm.expression,
                norm_holds: c.norm.holds,
            }
        })
        .collect();
    (out, t0.elapsed().as_secs_f64())
}

fn iwl_end_to_end(inst: &[IwlInstance], secs: f64) -> Outcome {
    let within = inst.iter().filter(|i| i.deviation <= i.bound).count();
    let max_bound = inst.iter().map(|i| i.bound).fold(0.0, f64::max);
    let max_eps = inst.iter().map(|i| i.eps_grad).fold(0.0, f64::max);
    let max_dev = inst.iter().map(|i| i.deviation).fold(0.0, f64::max);
    Outcome {
        pass: within == inst.len() && max_bound <= 0.05 && max_eps <= 1e-3 && secs < 60.0,
        detail: format!(
            "{within}/{} within certificate, max |dev| {max_dev:.2e}, max certificate {max_bound:.3}, max eps_grad {max_eps:.2e}, {secs:.1} s",
            inst.len()
        ),
    }
}

fn norm_accounting(inst: &[IwlInstance]) -> Outcome {
    let ok = inst.iter().filter(|i| i.norm_holds && i.norm_measured <= i.norm_expression).count();
    let ratio = inst.iter().map(|i| i.norm_measured / i.norm_expression).fold(0.0, f64::max);
    Outcome { pass: ok == inst.len(), detail: format!("{ok}/{} hold, max measured/expression {ratio:.3}", inst.len()) }
}

fn verification_hyper() -> DannHyper {
    DannHyper {
        k: 2,
        b_u: 2.0,
        b_w: 2.0,
        b_v: 2.0,
        eta: 0.5,
        lambda_tradeoff: 0.5,
        activation: Activation::Logistic,
        clamp_delta: 0.1,
        init_scale: 1.0,
    }
}

/// Central differences of `L` and `Omega` against the analytic partials, at
/// states with no clamp active.
fn gradient_fd_error(pair: &DomainPair, seed: u64) -> f64 {
    let hp = DannHyper { clamp_delta: 1e-9, ..verification_hyper() };
    let st = DannState::init(&hp, pair.d(), seed).unwrap();
    let p = dann_partials(pair, &st);
    let flat = st.flatten();
    let (k, d) = (st.k(), st.d());
    let mut worst: f64 = 0.0;
    let step = 1e-5;
    for i in 0..flat.len() {
        let mut plus = flat.clone();
        let mut minus = flat.clone();
        plus[i] += step;
        minus[i] -= step;
        let (lp, op) = dann_losses(pair, &st.with_flat(&plus));
        let (lm, om) = dann_losses(pair, &st.with_flat(&minus));
        let (fd_l, fd_o) = ((lp - lm) / (2.0 * step), (op - om) / (2.0 * step));
        let (an_l, an_o) = if i < k * d {
            (p.l_u[i / d][i % d], p.omega_u[i / d][i % d])
        } else if i < k * d + k {
            (p.l_w[i - k * d], 0.0)
        } else {
            (0.0, p.omega_v[i - k * d - k])
        };
        for (fd, an) in [(fd_l, an_l), (fd_o, an_o)] {
            worst = worst.max((fd - an).abs() / an.abs().max(1e-3));
        }
    }
    worst
}

fn dann_checks() -> (Outcome, Outcome) {
    let mut passes = 0;
    let mut total = 0;
    let mut worst_ratio: f64 = 0.0;
    let mut fd_worst: f64 = 0.0;
    let mut cumulative_ok = 0;
    let mut details = Vec::new();
    for seed in 0..5u64 {
        let pair = gen_two_moon(&TwoMoonConfig { n_per_domain: 20, rotation: FRAC_PI_4, noise_std: 0.1, seed }).unwrap();
        let st0 = DannState::init(&verification_hyper(), 2, seed).unwrap();
        let b = build_dann_transformer(&pair, &st0, &DannConfig::default()).unwrap();
        let r = run_dann(&b, &pair).unwrap();
        passes += r.block_passes();
        total += r.block_checks();
        for s in &r.steps {
            worst_ratio = worst_ratio.max((s.du / s.bound_u).max(s.dw / s.bound_w).max(s.dv / s.bound_v));
        }
        fd_worst = fd_worst.max(gradient_fd_error(&pair, seed));
        let dev = (r.prediction - r.reference_prediction).abs();
        let traj_ok = r.steps.iter().all(|s| s.distance <= s.cumulative && s.scratch_clear);
        if dev <= r.prediction_bound && traj_ok {
            cumulative_ok += 1;
        }
        details.push(format!("{dev:.1e}<={:.2}", r.prediction_bound));
    }
    (
        Outcome {
            pass: passes == total && total == 75 && fd_worst <= 1e-5,
            detail: format!("{passes}/{total} block checks, max deviation/bound {worst_ratio:.3}, finite-difference rel. error {fd_worst:.1e}"),
        },
        Outcome { pass: cumulative_ok == 5, detail: format!("{cumulative_ok}/5 within cumulative certificate [{}]", details.join(", ")) },
    )
}

fn selection() -> Outcome {
    let mut agree = 0;
    let mut within = 0;
    let mut margins = 0;
    let mut labels = Vec::new();
    for (kind, mean) in [("overlap", 0.0), ("disjoint", 3.5)] {
        for seed in 0..5u64 {
            let pair = gen_shifted_gaussians(&ShiftGaussConfig {
                d: 1,
                source_mean: vec![0.0],
                target_mean: vec![mean],
                shared_cov_scale: 1.0,
                target_cov_scale: Some(0.4),
                label_rule: LabelRule { normal: vec![1.0], offset: 0.3 },
                n: 32,
                n_prime: 32,
                seed: 200 + seed,
            })
            .unwrap();
            let cfg = IcudaConfig { dann_seed: seed, ..IcudaConfig::default() };
            let b = build_icuda_transformer(&pair, &cfg).unwrap();
            let r = run_icuda(&b, &pair, &cfg).unwrap();
            let expected = if kind == "overlap" { Branch::Iwl } else { Branch::Dann };
            if r.report.choice == r.oracle.choice && r.oracle.choice == expected {
                agree += 1;
            }
            if (r.prediction - r.chosen_reference()).abs() <= r.chosen_certificate() {
                within += 1;
            }
            if r.report.margin > 0.0 {
                margins += 1;
            }
            labels.push(format!("{:.3}", r.report.margin));
        }
    }
    Outcome {
        pass: agree == 10 && within == 10 && margins == 10,
        detail: format!("choice agrees {agree}/10, within branch certificate {within}/10, certified margins {margins}/10 [{}]", labels.join(" ")),
    }
}

fn softmin_sandwich() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut ok = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=64usize);
        let beta = 10f64.powf(rng.random_range(-1.0..3.0));
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let m = p.iter().copied().fold(f64::INFINITY, f64::min);
        let s = softmin(&p, beta).unwrap();
        if m - (n as f64).ln() / beta <= s && s <= m {
            ok += 1;
        }
    }
    Outcome { pass: ok == 1000, detail: format!("{ok}/1000 vectors satisfy the sandwich") }
}

fn kde_sup_error(n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<Vec<f64>> = (0..n).map(|_| vec![StandardNormal.sample(&mut rng)]).collect();
    let h = (n as f64).powf(-0.2);
    (0..=600)
        .map(|i| {
            let x = -3.0 + 6.0 * i as f64 / 600.0;
            let truth = (-x * x / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
            (kde_eval(&xs, &[x], h, true).unwrap() - truth).abs()
        })
        .fold(0.0, f64::max)
}

fn kde_trend() -> Outcome {
    let mut ok = 0;
    let mut rows = Vec::new();
    for seed in 0..3u64 {
        let e: Vec<f64> = [100, 1000, 10000].iter().map(|&n| kde_sup_error(n, seed)).collect();
        if e[0] > e[1] && e[1] > e[2] {
            ok += 1;
        }
        rows.push(format!("{:.3}>{:.3}>{:.3}", e[0], e[1], e[2]));
    }
    Outcome { pass: ok == 3, detail: format!("{ok}/3 seeds decrease [{}]", rows.join(", ")) }
}

fn behaviour() -> Outcome {
    let sched = RunSchedule::default();
    let mut iwl_wins = 0;
    let mut dann_wins = 0;
    let mut rows = Vec::new();
    for seed in 0..5u64 {
        let g = gen_shifted_gaussians_labeled(&ShiftGaussConfig {
            d: 1,
            source_mean: vec![0.0],
            target_mean: vec![2.0],
            shared_cov_scale: 1.0,
            target_cov_scale: None,
            label_rule: LabelRule { normal: vec![1.0], offset: 1.5 },
            n: 100,
            n_prime: 100,
            seed,
        })
        .unwrap();
        let cfg = IwlConfig::default();
        let labels = &g.held_out.target_labels;
        let a_iwl = reference_iwl(&g.pair, &cfg, &sched, true).unwrap().0.accuracy(&g.pair.target, labels);
        let a_src = reference_iwl(&g.pair, &cfg, &sched, false).unwrap().0.accuracy(&g.pair.target, labels);
        if a_iwl >= a_src {
            iwl_wins += 1;
        }

        let m = gen_two_moon_labeled(&TwoMoonConfig { n_per_domain: 100, rotation: FRAC_PI_4, noise_std: 0.1, seed }).unwrap();
        let hp = sanity_dann_hyper();
        let labels = &m.held_out.target_labels;
        let a_dann = reference_dann(&m.pair, &hp, seed, sched.dann_steps, true).unwrap().0.accuracy(&m.pair.target, labels);
        let a_so = reference_dann(&m.pair, &hp, seed, sched.dann_steps, false).unwrap().0.accuracy(&m.pair.target, labels);
        if a_dann >= a_so {
            dann_wins += 1;
        }
        rows.push(format!("iwl {a_iwl:.2}/{a_src:.2} dann {a_dann:.2}/{a_so:.2}"));
    }
    Outcome { pass: iwl_wins >= 4 && dann_wins >= 4, detail: format!("IWL {iwl_wins}/5, DANN {dann_wins}/5 [{}]", rows.join("; ")) }
}

fn main() {
    // `cargo test` passes harness flags such as `--quiet`; a filter argument that
    // does not mention this target skips it.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !filters.is_empty() && !filters.iter().any(|f| "acceptance".contains(f.as_str())) {
        return;
    }
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    results.push(("alpha-GD exactness", alpha_gd_exactness()));
    results.push(("uLSIF consistency", ulsif_consistency()));
    let (iwl, secs) = iwl_instances();
    results.push(("IWL end-to-end", iwl_end_to_end(&iwl, secs)));
    let (per_step, cumulative) = dann_checks();
    results.push(("DANN per-step tracking", per_step));
    results.push(("DANN cumulative", cumulative));
    results.push(("selection correctness", selection()));
    results.push(("softmin bound", softmin_sandwich()));
    results.push(("KDE convergence trend", kde_trend()));
    results.push(("behavioural sanity", behaviour()));
    results.push(("norm accounting", norm_accounting(&iwl)));

    let mut failed = 0;
    for (i, (name, o)) in results.iter().enumerate() {
        println!("criterion {:>2} {:<24} {}  {}", i + 1, name, if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed += 1;
        }
    }
    println!("acceptance: {}/{} criteria pass", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
