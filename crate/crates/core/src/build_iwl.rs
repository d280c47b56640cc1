//! Transformer that runs uLSIF gradient descent followed by importance-weighted
//! gradient descent in context.
//!
//! Depth is `1 + L1 + L2 + 1`: a feature MLP, exact alpha layers, approximate
//! w layers and a readout. Workspace slots are `phi`, `alpha` and `w`, each of
//! width `J`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::datagen::{encode_tokens, DomainPair};
use crate::error::{Error, Result};
use crate::relu_approx::{fit_1d, fit_1d_adaptive, fit_nd, fit_ridge_sum, ReluSum, ReluTerm, RidgeComponent};
use crate::tfcore::{
    forward_trace, read_output, HeadBuilder, Mat, MatBuilder, SlotLayout, TokenMatrix, Transformer, TransformerLayer,
};
use crate::uda_ref::{
    iwl_run_with, ulsif_build, ulsif_from_values, ulsif_gd, weighted_gd_values, FeatureKind, FeatureMap, IwlRun, IwlState,
    Loss, UlsifProblem,
};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Build-time settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IwlConfig {
    pub feature_kind: FeatureKind,
    pub j_max: usize,
    pub lambda: f64,
    /// `None` picks `1 / lambda_max(Psi + lambda I)`.
    pub eta1: Option<f64>,
    pub l1: usize,
    /// `None` picks `1 / lambda_max` of the weighted Hessian.
    pub eta2: Option<f64>,
    pub l2: usize,
    /// `None` uses twice the largest reference iterate norm.
    pub b_w: Option<f64>,
    pub loss: Loss,
    /// Target sup-error of the gradient fit.
    pub grad_eps: f64,
    /// Tolerance of the one-dimensional feature fits.
    pub feature_tol: f64,
    /// Dictionary budget of the multivariate feature fits.
    pub feature_terms: usize,
    pub seed: u64,
    /// Row that receives the prediction.
    pub out_slot: String,
}

impl Default for IwlConfig {
    fn default() -> Self {
        IwlConfig {
            feature_kind: FeatureKind::Rbf,
            j_max: 8,
            lambda: 0.1,
            eta1: None,
            l1: 10,
            eta2: None,
            l2: 20,
            b_w: None,
            loss: Loss::Squared,
            grad_eps: 1e-3,
            feature_tol: 1e-4,
            feature_terms: 400,
            seed: 0,
            out_slot: "y".into(),
        }
    }
}

/// Base slots plus `phi`, `alpha`, `w`, and `out_slot` when it is not `y`.
pub fn iwl_layout(d: usize, j: usize, out_slot: &str) -> Result<SlotLayout> {
    let mut l = SlotLayout::base(d).with("phi", j)?.with("alpha", j)?.with("w", j)?;
    if out_slot != "y" {
        l.push(out_slot, 1)?;
    }
    Ok(l)
}

/// Feature MLP together with the per-coordinate sums it realises.
#[derive(Clone, Debug)]
pub struct FeatureLayer {
    pub layer: TransformerLayer,
    /// `phi_hat_j(x)` as sums of ReLUs in `(x, 1)`: the last input is the constant row.
    pub coords: Vec<ReluSum>,
    /// Sup-error bound for `||phi_hat - phi||_2` on the data ball.
    pub eps_phi: f64,
}

impl FeatureLayer {
    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut z = x.to_vec();
        z.push(1.0);
        self.coords.iter().map(|c| c.value(&z)).collect()
    }
}

/// Shift a profile fitted in `z = x - c` to a sum in `(x, 1)`, scaled by `scale`.
fn shifted(profile: &ReluSum, center: &[f64], scale: f64, radius: f64) -> ReluSum {
    let terms = profile
        .terms
        .iter()
        .map(|t| {
            let mut a = t.a.clone();
            a.push(t.b - dot(&t.a, center));
            ReluTerm::new(a, 0.0, t.c * scale)
        })
        .collect();
    let mut rs = ReluSum::new(center.len() + 1, radius, terms);
    rs.sup_error = profile.sup_error * scale.abs();
    rs
}

/// Write `phi_hat(x)` into the `phi` slot of every token.
pub fn build_feature_layer(features: &FeatureMap, layout: &SlotLayout, b_x: f64, cfg: &IwlConfig) -> Result<FeatureLayer> {
    let j = features.dim();
    let phi = layout.range("phi")?;
    if phi.len() < j {
        return Err(Error::Layout(format!("phi slot has {} rows, feature map needs {j}", phi.len())));
    }
    let d = features.d;
    let aff = |a: Vec<f64>, c: f64| ReluTerm::new(a, 0.0, c);
    let unit = |k: usize, sign: f64| {
        let mut a = vec![0.0; d + 1];
        a[k] = sign;
        a
    };
    let coords: Vec<ReluSum> = match features.kind {
        FeatureKind::Constant => vec![ReluSum::new(d + 1, f64::MAX, vec![aff(unit(d, 1.0), 1.0)])],
        FeatureKind::Linear => {
            let s = features.scale;
            let mut out = vec![ReluSum::new(d + 1, f64::MAX, vec![aff(unit(d, 1.0), s)])];
            for k in 0..d {
                out.push(ReluSum::new(d + 1, f64::MAX, vec![aff(unit(k, 1.0), s), aff(unit(k, -1.0), -s)]));
            }
            out
        }
        FeatureKind::Rbf => {
            let bw2 = 2.0 * features.bandwidth * features.bandwidth;
            let r = 2.0 * b_x.max(1e-12);
            let profile = match d {
                1 => fit_1d_adaptive(|z| (-z * z / bw2).exp(), &[-r, 0.0, r], cfg.feature_tol, 1 << 14)?,
                2 | 3 => {
                    let g = |z: &[f64]| (-z.iter().map(|v| v * v).sum::<f64>() / bw2).exp();
                    fit_nd(g, d, r, cfg.feature_terms, cfg.seed)?.0
                }
                _ => return Err(Error::Config(format!("RBF feature layer supports d <= 3, got {d}"))),
            };
            features.centers.iter().map(|c| shifted(&profile, c, features.scale, b_x)).collect()
        }
    };
    let eps_phi = coords.iter().map(|c| c.sup_error * c.sup_error).sum::<f64>().sqrt();
    let dim = layout.dim();
    let xr = layout.range("x")?;
    let one = layout.row("one")?;
    let col_of = |k: usize| if k < d { xr.start + k } else { one };
    let mut w1 = MatBuilder::new(coords.iter().map(|c| c.len()).sum(), dim);
    let mut w2 = MatBuilder::new(dim, coords.iter().map(|c| c.len()).sum());
    let mut unit_idx = 0;
    for (jj, c) in coords.iter().enumerate() {
        for t in &c.terms {
            for (k, &a) in t.a.iter().enumerate() {
                if a != 0.0 {
                    w1.add(unit_idx, col_of(k), a);
                }
            }
            w2.add(phi.start + jj, unit_idx, t.c);
            unit_idx += 1;
        }
    }
    let (w1, w2) = balance(w1.build(), w2.build());
    Ok(FeatureLayer { layer: TransformerLayer::mlp(w1, w2), coords, eps_phi })
}

/// Rescale `W1 -> k W1`, `W2 -> W2 / k` to equalise the two operator norms.
pub(crate) fn balance(w1: Mat, w2: Mat) -> (Mat, Mat) {
    let (a, b) = (w1.op_norm(), w2.op_norm());
    if a > 0.0 && b > 0.0 {
        let k = (b / a).sqrt();
        (w1.scaled(k), w2.scaled(1.0 / k))
    } else {
        (w1, w2)
    }
}

/// `L1` layers of four heads each, one exact uLSIF step per layer.
///
/// `r_gate` must exceed `|alpha . phi_j|` at every non-source token.
pub fn build_alpha_layers(p: &UlsifProblem, layout: &SlotLayout, n: usize, n_prime: usize, r_gate: f64) -> Result<Vec<TransformerLayer>> {
    let j = p.j();
    let phi = layout.range("phi")?;
    let alpha = layout.range("alpha")?;
    if phi.len() != j || alpha.len() != j {
        return Err(Error::Layout(format!("phi/alpha slots must have {j} rows")));
    }
    if !(r_gate > 0.0) {
        return Err(Error::Bound("alpha gate margin must be positive".into()));
    }
    let (one, t, s) = (layout.row("one")?, layout.row("t")?, layout.row("s")?);
    let dim = layout.dim();
    let tt = (n + n_prime + 1) as f64;
    let big_n = (n + n_prime) as f64;
    let eta = p.eta1;
    let g = r_gate.sqrt();
    let mut heads = Vec::new();
    for sign in [1.0, -1.0] {
        let mut hb = HeadBuilder::new(dim);
        for k in 0..j {
            hb.coord(&[(alpha.start + k, sign)], &[(phi.start + k, 1.0)])?;
        }
        hb.coord(&[(one, -g)], &[(one, g), (t, -g)])?;
        for k in 0..j {
            hb.value(alpha.start + k, phi.start + k, -sign * tt * eta / n as f64);
        }
        heads.push(hb.build());
    }
    let mut hb = HeadBuilder::new(dim);
    hb.coord(&[(one, 1.0)], &[(s, 1.0), (t, -1.0)])?;
    for k in 0..j {
        hb.value(alpha.start + k, phi.start + k, tt * eta / n_prime as f64);
    }
    heads.push(hb.build());
    let mut hb = HeadBuilder::new(dim);
    hb.coord(&[(one, 1.0)], &[(s, 1.0)])?;
    for k in 0..j {
        hb.value(alpha.start + k, alpha.start + k, -tt * p.lambda_reg * eta / big_n);
    }
    heads.push(hb.build());
    Ok((0..p.l1).map(|_| TransformerLayer::attention(heads.clone(), dim)).collect())
}

/// Magnitude bounds on the three gradient-fit inputs at any token.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradInputBounds {
    /// `|w . phi|`
    pub b_s: f64,
    /// `|y|`
    pub b_t: f64,
    /// `|alpha . phi|`
    pub b_u: f64,
}

impl GradInputBounds {
    pub fn gate(&self, term: &ReluTerm) -> f64 {
        term.a[0].abs() * self.b_s + term.a[1].abs() * self.b_t + term.a[2].abs() * self.b_u + term.b.abs()
    }
}

/// Fit `(s, t, u) -> u * l'(s, t)` on `[-r, r]^3`. Squared loss uses the
/// polarisation `u (s - t) = ((u + s - t)^2 - (u - s + t)^2) / 4`.
pub fn fit_grad(loss: Loss, r: f64, eps: f64) -> Result<ReluSum> {
    match loss {
        Loss::Linear => {
            let terms = vec![ReluTerm::new(vec![0.0, 0.0, 1.0], 0.0, 1.0), ReluTerm::new(vec![0.0, 0.0, -1.0], 0.0, -1.0)];
            Ok(ReluSum::new(3, r, terms))
        }
        Loss::Squared => {
            if !(eps > 0.0) {
                return Err(Error::Config("gradient fit tolerance must be positive".into()));
            }
            let reach = 3.0 * r;
            let h = (8.0 * eps).sqrt() * 0.95;
            let m = ((2.0 * reach / h).ceil() as usize + 1).max(3);
            let plus = fit_1d(|z| 0.25 * z * z, reach, m)?;
            let minus = plus.scaled(-1.0);
            fit_ridge_sum(
                &[
                    RidgeComponent { direction: vec![1.0, -1.0, 1.0], profile: plus },
                    RidgeComponent { direction: vec![-1.0, 1.0, 1.0], profile: minus },
                ],
                3,
                r,
            )
        }
        Loss::Logistic => Err(Error::Config("the w-layer construction supports squared and linear loss".into())),
    }
}

/// `L2` layers with one head per gradient-fit term.
pub fn build_w_layers(
    eta2: f64,
    l2: usize,
    grad_fit: &ReluSum,
    layout: &SlotLayout,
    n: usize,
    n_prime: usize,
    bounds: GradInputBounds,
) -> Result<Vec<TransformerLayer>> {
    if grad_fit.input_dim != 3 {
        return Err(Error::Dimension("gradient fit must take (s, t, u)".into()));
    }
    let phi = layout.range("phi")?;
    let alpha = layout.range("alpha")?;
    let w = layout.range("w")?;
    let j = phi.len();
    let (one, t, y) = (layout.row("one")?, layout.row("t")?, layout.row("y")?);
    let dim = layout.dim();
    let tt = (n + n_prime + 1) as f64;
    let mut heads = Vec::with_capacity(grad_fit.len());
    for term in &grad_fit.terms {
        let gate = bounds.gate(term);
        if gate == 0.0 || term.c == 0.0 {
            continue;
        }
        let g = gate.sqrt();
        let mut hb = HeadBuilder::new(dim);
        if term.a[0] != 0.0 {
            for k in 0..j {
                hb.coord(&[(w.start + k, term.a[0])], &[(phi.start + k, 1.0)])?;
            }
        }
        if term.a[2] != 0.0 {
            for k in 0..j {
                hb.coord(&[(alpha.start + k, term.a[2])], &[(phi.start + k, 1.0)])?;
            }
        }
        if term.a[1] != 0.0 {
            hb.coord(&[(one, term.a[1])], &[(y, 1.0)])?;
        }
        if term.b != 0.0 {
            hb.coord(&[(one, term.b)], &[(one, 1.0)])?;
        }
        hb.coord(&[(one, -g)], &[(one, g), (t, -g)])?;
        for k in 0..j {
            hb.value(w.start + k, phi.start + k, -tt * term.c * eta2 / n as f64);
        }
        heads.push(hb.build());
    }
    Ok((0..l2).map(|_| TransformerLayer::attention(heads.clone(), dim)).collect())
}

/// Two heads writing `w . phi` into `out_slot`.
pub fn build_iwl_readout(layout: &SlotLayout, out_slot: &str) -> Result<TransformerLayer> {
    let phi = layout.range("phi")?;
    let w = layout.range("w")?;
    let (one, out) = (layout.row("one")?, layout.row(out_slot)?);
    let dim = layout.dim();
    let mut heads = Vec::new();
    for sign in [1.0, -1.0] {
        let mut hb = HeadBuilder::new(dim);
        for k in 0..phi.len() {
            hb.coord(&[(phi.start + k, sign)], &[(w.start + k, 1.0)])?;
        }
        hb.value(out, one, sign);
        heads.push(hb.build());
    }
    Ok(TransformerLayer::attention(heads, dim))
}

/// Exact uLSIF plus weighted GD on a fixed set of feature vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IwlReference {
    pub alpha_trace: Vec<Vec<f64>>,
    pub w_trace: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub prediction: f64,
    pub query_phi: Vec<f64>,
}

/// Run the unclipped reference pipeline on given feature values.
pub fn reference_on_values(
    features: &FeatureMap,
    src_phi: &[Vec<f64>],
    tgt_phi: &[Vec<f64>],
    ys: &[f64],
    query_phi: &[f64],
    lambda: f64,
    eta1: f64,
    l1: usize,
    state: &IwlState,
) -> Result<(UlsifProblem, IwlReference)> {
    let p = ulsif_from_values(features.clone(), src_phi, tgt_phi, lambda)?.with_schedule(eta1, l1);
    let alpha_trace = ulsif_gd(&p)?;
    let alpha = alpha_trace.last().unwrap();
    let weights: Vec<f64> = src_phi.iter().map(|f| dot(alpha, f)).collect();
    let run = weighted_gd_values(src_phi, ys, &weights, query_phi, state)?;
    Ok((
        p,
        IwlReference { alpha_trace, w_trace: run.w_trace, weights, prediction: run.prediction, query_phi: query_phi.to_vec() },
    ))
}

/// Checks of the certificate's assumptions on this instance; reported, not enforced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisChecks {
    pub w_star_norm: f64,
    pub b_w: f64,
    pub w_star_within_half_bw: bool,
    pub hessian_lambda_max: f64,
    pub eta2: f64,
    pub hessian_below_half_eta2: bool,
    pub weights_nonnegative: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormCheck {
    pub measured: f64,
    pub expression: f64,
    pub r_eff: f64,
    pub c_total: f64,
    pub holds: bool,
}

/// Error budget of one build.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IwlCertificate {
    pub eps_phi: f64,
    pub eps_phi_tokens: f64,
    pub eps_grad: f64,
    pub rho: f64,
    pub w_dev_bound: f64,
    pub feature_term: f64,
    pub readout_slack: f64,
    pub bound: f64,
    pub r_alpha: f64,
    pub r_w: f64,
    pub b_alpha: f64,
    pub b_w: f64,
    pub b_phi: f64,
    pub hypothesis_checks: HypothesisChecks,
    pub norm: NormCheck,
}

/// Everything produced by [`build_iwl_transformer`].
#[derive(Clone, Debug)]
pub struct IwlBuild {
    pub transformer: Transformer,
    pub features: FeatureMap,
    pub feature_layer: FeatureLayer,
    pub problem_hat: UlsifProblem,
    pub reference_hat: IwlReference,
    /// Unclipped reference with the exact feature map.
    pub reference_exact: IwlRun,
    pub grad_fit: ReluSum,
    pub state: IwlState,
    pub certificate: IwlCertificate,
    pub l1: usize,
    pub l2: usize,
}

impl IwlBuild {
    pub fn layout(&self) -> &SlotLayout {
        &self.transformer.layout
    }

    pub fn encode(&self, pair: &DomainPair) -> Result<TokenMatrix> {
        encode_tokens(pair, self.layout())
    }
}

fn max_abs_eig(h: &DMatrix<f64>) -> (f64, f64) {
    let ev = h.clone().symmetric_eigenvalues();
    (ev.min(), ev.max())
}

fn weighted_hessian(src_phi: &[Vec<f64>], weights: &[f64]) -> DMatrix<f64> {
    let j = src_phi[0].len();
    let n = src_phi.len() as f64;
    let mut h = DMatrix::zeros(j, j);
    for (f, u) in src_phi.iter().zip(weights) {
        for a in 0..j {
            for b in 0..j {
                h[(a, b)] += u * f[a] * f[b] / n;
            }
        }
    }
    h
}

/// Full construction for one domain pair.
pub fn build_iwl_transformer(pair: &DomainPair, cfg: &IwlConfig) -> Result<IwlBuild> {
    let d = pair.d();
    let features = match cfg.feature_kind {
        FeatureKind::Rbf => FeatureMap::rbf_from_pair(pair, cfg.j_max)?,
        FeatureKind::Constant => FeatureMap::constant(d),
        FeatureKind::Linear => FeatureMap::linear(d, pair.bounds.b_x),
    };
    let j = features.dim();
    let layout = iwl_layout(d, j, &cfg.out_slot)?;
    let fl = build_feature_layer(&features, &layout, pair.bounds.b_x, cfg).map_err(|e| Error::build("feature layer", e))?;

    let src_hat: Vec<Vec<f64>> = pair.source.iter().map(|s| fl.eval(&s.x)).collect();
    let tgt_hat: Vec<Vec<f64>> = pair.target.iter().map(|x| fl.eval(x)).collect();
    let q_hat = fl.eval(&pair.query);
    let ys: Vec<f64> = pair.source.iter().map(|s| s.y).collect();

    let exact_p = ulsif_build(pair, features.clone(), cfg.lambda)?;
    let eta1 = cfg.eta1.unwrap_or_else(|| exact_p.eta1);
    let tokens_phi_err = pair
        .source
        .iter()
        .map(|s| &s.x)
        .chain(pair.target.iter())
        .chain(std::iter::once(&pair.query))
        .map(|x| {
            let (a, b) = (fl.eval(x), features.eval(x));
            norm2(&a.iter().zip(&b).map(|(p, q)| p - q).collect::<Vec<_>>())
        })
        .fold(0.0, f64::max);

    // The step size for w needs the weighted Hessian, which needs alpha.
    let probe = IwlState::new(j, 0.0, 0, 1.0, cfg.loss);
    let (_, pre) = reference_on_values(&features, &src_hat, &tgt_hat, &ys, &q_hat, cfg.lambda, eta1, cfg.l1, &probe)?;
    let hess = weighted_hessian(&src_hat, &pre.weights);
    let (hmin, hmax) = max_abs_eig(&hess);
    let eta2 = match cfg.eta2 {
        Some(e) => e,
        None => {
            if hmax > 0.0 {
                1.0 / hmax
            } else {
                1.0
            }
        }
    };
    let state0 = IwlState::new(j, eta2, cfg.l2, cfg.b_w.unwrap_or(1.0), cfg.loss);
    let (problem_hat, reference_hat) =
        reference_on_values(&features, &src_hat, &tgt_hat, &ys, &q_hat, cfg.lambda, eta1, cfg.l1, &state0)?;
    let exact_p = exact_p.with_schedule(eta1, cfg.l1);
    let exact_alpha = ulsif_gd(&exact_p)?;
    let reference_exact = iwl_run_with(pair, &exact_p, exact_alpha.last().unwrap(), &state0, false)?;

    let b_phi = src_hat.iter().chain(&tgt_hat).chain(std::iter::once(&q_hat)).map(|f| norm2(f)).fold(0.0, f64::max);
    let max_alpha = reference_hat.alpha_trace.iter().map(|a| norm2(a)).fold(0.0, f64::max);
    let b_alpha = if max_alpha > 0.0 { 2.0 * max_alpha } else { 1.0 };
    let max_w = reference_hat.w_trace.iter().map(|w| norm2(w)).fold(0.0, f64::max);
    let b_w = cfg.b_w.unwrap_or(if max_w > 0.0 { 2.0 * max_w } else { 1.0 });
    let b_y = pair.bounds.b_y;
    let r_alpha = (b_phi * b_alpha).max(1.0);
    let r_w = (b_w * b_phi).max(b_y).max(b_alpha * b_phi).max(1.0);

    let alpha_layers = build_alpha_layers(&problem_hat, &layout, pair.n(), pair.n_prime(), r_alpha)
        .map_err(|e| Error::build("alpha layers", e))?;
    let grad_fit = fit_grad(cfg.loss, r_w, cfg.grad_eps).map_err(|e| Error::build("gradient fit", e))?;
    let bounds = GradInputBounds { b_s: b_w * b_phi, b_t: b_y, b_u: b_alpha * b_phi };
    let w_layers = build_w_layers(eta2, cfg.l2, &grad_fit, &layout, pair.n(), pair.n_prime(), bounds)
        .map_err(|e| Error::build("w layers", e))?;
    let readout = build_iwl_readout(&layout, &cfg.out_slot)?;
    let gate_max = grad_fit.terms.iter().map(|t| bounds.gate(t)).fold(0.0, f64::max);

    let mut layers = vec![fl.layer.clone()];
    layers.extend(alpha_layers);
    layers.extend(w_layers);
    layers.push(readout);
    let mut transformer = Transformer::new(layers, layout.clone());
    transformer.readout_row = layout.row(&cfg.out_slot)?;

    // Certificate.
    let rho = match cfg.loss {
        Loss::Squared => (1.0 - eta2 * hmin).abs().max((1.0 - eta2 * hmax).abs()),
        _ => 1.0,
    };
    let geom: f64 = (0..cfg.l2).map(|k| rho.powi(k as i32)).sum();
    let w_dev_bound = eta2 * grad_fit.sup_error * b_phi * geom;
    let feature_term = (reference_hat.prediction - reference_exact.prediction).abs();
    let readout_slack = 1e-10 * (1.0 + reference_hat.prediction.abs());
    let bound = w_dev_bound * norm2(&q_hat) + feature_term + readout_slack;

    let w_star = weighted_optimum(&src_hat, &ys, &reference_hat.weights);
    let hypothesis_checks = HypothesisChecks {
        w_star_norm: norm2(&w_star),
        b_w,
        w_star_within_half_bw: norm2(&w_star) <= b_w / 2.0,
        hessian_lambda_max: hmax,
        eta2,
        hessian_below_half_eta2: hmax <= eta2 / 2.0,
        weights_nonnegative: reference_exact.weights.iter().all(|u| *u >= 0.0),
    };
    let tt = (pair.n() + pair.n_prime() + 1) as f64;
    let (n, np) = (pair.n() as f64, pair.n_prime() as f64);
    let c_total = grad_fit.total_c();
    let r_eff = r_w.max(r_alpha).max(gate_max);
    let expression = 1.0
        + r_eff
        + ((2.0 * tt / n + tt / np + cfg.lambda / tt) * eta1).max(1.0 + tt / n * c_total * eta2);
    let measured = crate::tfcore::tf_norm(&transformer);
    let norm = NormCheck { measured, expression, r_eff, c_total, holds: measured <= expression };

    let certificate = IwlCertificate {
        eps_phi: fl.eps_phi,
        eps_phi_tokens: tokens_phi_err,
        eps_grad: grad_fit.sup_error,
        rho,
        w_dev_bound,
        feature_term,
        readout_slack,
        bound,
        r_alpha,
        r_w,
        b_alpha,
        b_w,
        b_phi,
        hypothesis_checks,
        norm,
    };
    Ok(IwlBuild {
        transformer,
        features,
        feature_layer: fl,
        problem_hat,
        reference_hat,
        reference_exact,
        grad_fit,
        state: IwlState { b_w, ..state0 },
        certificate,
        l1: cfg.l1,
        l2: cfg.l2,
    })
}

/// Minimiser of the weighted squared risk by a pseudo-inverse solve.
fn weighted_optimum(src_phi: &[Vec<f64>], ys: &[f64], weights: &[f64]) -> Vec<f64> {
    let j = src_phi[0].len();
    let h = weighted_hessian(src_phi, weights);
    let mut rhs = DVector::zeros(j);
    let n = src_phi.len() as f64;
    for ((f, y), u) in src_phi.iter().zip(ys).zip(weights) {
        for a in 0..j {
            rhs[a] += u * y * f[a] / n;
        }
    }
    match h.pseudo_inverse(1e-12) {
        Ok(pinv) => (pinv * rhs).iter().copied().collect(),
        Err(_) => vec![f64::NAN; j],
    }
}

/// Transformer run with per-layer slot readings from the query column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IwlTfRun {
    pub prediction: f64,
    pub alpha_trace: Vec<Vec<f64>>,
    pub w_trace: Vec<Vec<f64>>,
    pub phi_query: Vec<f64>,
    /// Largest `||w||` seen; the certificate needs it to stay below `B_w`.
    pub max_w_norm: f64,
    pub within_bounds: bool,
}

pub fn run_iwl(build: &IwlBuild, pair: &DomainPair) -> Result<IwlTfRun> {
    let h0 = build.encode(pair)?;
    let trace = forward_trace(&build.transformer, &h0)?;
    let q = h0.query_col();
    let alpha_trace: Vec<Vec<f64>> =
        std::iter::once(&trace[0]).chain(&trace[1..=build.l1]).map(|h| h.slot_col("alpha", q)).collect::<Result<_>>()?;
    let w_trace: Vec<Vec<f64>> = std::iter::once(&trace[build.l1])
        .chain(&trace[1 + build.l1..1 + build.l1 + build.l2])
        .map(|h| h.slot_col("w", q))
        .collect::<Result<_>>()?;
    let out = trace.last().unwrap();
    let prediction = read_output(&build.transformer, out)?;
    let max_w_norm = w_trace.iter().map(|w| norm2(w)).fold(0.0, f64::max);
    let max_alpha = alpha_trace.iter().map(|a| norm2(a)).fold(0.0, f64::max);
    Ok(IwlTfRun {
        prediction,
        phi_query: trace[0].slot_col("phi", q)?,
        within_bounds: max_w_norm <= build.certificate.b_w && max_alpha <= build.certificate.b_alpha,
        alpha_trace,
        w_trace,
        max_w_norm,
    })
}

/// Token matrix whose `phi` slot already holds `phi` at every column.
pub fn tokens_with_features(pair: &DomainPair, features: &FeatureMap, layout: &SlotLayout) -> Result<TokenMatrix> {
    let mut h = encode_tokens(pair, layout)?;
    for c in 0..h.tokens() {
        let x = h.slot_col("x", c)?;
        h.set_slot_col("phi", c, &features.eval(&x))?;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polarised_fit_meets_tolerance() {
        let f = fit_grad(Loss::Squared, 2.0, 1e-3).unwrap();
        assert!(f.sup_error <= 1e-3);
        let v = f.value(&[0.7, -0.4, 1.3]);
        assert!((v - 1.3 * 1.1).abs() <= 1e-3);
    }

    #[test]
    fn readout_scalar_product() {
        let layout = iwl_layout(1, 1, "y").unwrap();
        let layer = build_iwl_readout(&layout, "y").unwrap();
        let mut h = TokenMatrix { h: DMatrix::zeros(layout.dim(), 3), layout: layout.clone(), n: 1, n_prime: 1 };
        for c in 0..3 {
            h.set_slot_col("one", c, &[1.0]).unwrap();
            h.set_slot_col("w", c, &[2.0]).unwrap();
            h.set_slot_col("phi", c, &[0.5]).unwrap();
        }
        let out = crate::tfcore::attn_forward(&layer, &h).unwrap();
        assert!((out.get("y", 0, 2).unwrap() - 1.0).abs() < 1e-15);
    }
}
