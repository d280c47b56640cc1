//! Density-based branch selection and the composed ICUDA transformer.
//!
//! Three layers follow the two branch stacks: kernel density plus `exp(-beta p)`,
//! target-token summation plus the clamped `-(1/beta) ln`, and the two-sided
//! indicator blend of the branch predictions.

use serde::{Deserialize, Serialize};

use crate::build_dann::{build_dann_transformer, encode_dann, run_dann, DannBuild, DannConfig, DannTfRun};
use crate::build_iwl::{build_iwl_transformer, run_iwl, IwlBuild, IwlConfig, IwlTfRun};
use crate::datagen::{encode_tokens, DomainPair};
use crate::error::{Error, Result};
use crate::relu_approx::{fit_1d_adaptive, fit_1d_knots, fit_nd, ReluSum};
use crate::tfcore::{compose, embed_tokens, forward, read_output, AttentionHead, HeadBuilder, Mat, MatBuilder, SlotLayout, TokenMatrix, Transformer, TransformerLayer};
use crate::uda_ref::{icuda_predict, softmin, Branch, DannHyper, DannState, Selection, SelectorConfig};

/// Slots written by the selection layers; `f_iwl`, `f_dann` carry the branch outputs.
pub fn select_layout(d: usize) -> Result<SlotLayout> {
    SlotLayout::base(d)
        .with("p", 1)?
        .with("e", 1)?
        .with("sigma", 1)?
        .with("q", 1)?
        .with("f_iwl", 1)?
        .with("f_dann", 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectConfig {
    pub selector: SelectorConfig,
    /// Divide the kernel by `(2 pi h^2)^(d/2)`.
    pub normalized_kernel: bool,
    pub kernel_tol: f64,
    pub kernel_terms: usize,
    /// Relative error target of the exponential fit.
    pub exp_rel_tol: f64,
    /// Above this density the exponential is replaced by exact zero.
    pub exp_cutoff: f64,
    pub log_tol: f64,
    /// Cap on `q`; the log fit is flat below `exp(-beta q_cap)`.
    pub q_cap: f64,
    pub seed: u64,
}

impl Default for SelectConfig {
    fn default() -> Self {
        SelectConfig {
            selector: SelectorConfig::default(),
            normalized_kernel: false,
            kernel_tol: 1e-5,
            kernel_terms: 400,
            exp_rel_tol: 1e-3,
            exp_cutoff: 0.2,
            log_tol: 1e-4,
            q_cap: 0.1,
            seed: 0,
        }
    }
}

impl SelectConfig {
    pub fn validate(&self) -> Result<()> {
        self.selector.validate()?;
        let s = &self.selector;
        if !(self.q_cap > s.threshold + 0.5 / s.sharpness) {
            return Err(Error::Config("q_cap must exceed the threshold plus the indicator half-width".into()));
        }
        if !(self.exp_cutoff > 0.0 && self.kernel_tol > 0.0 && self.exp_rel_tol > 0.0 && self.log_tol > 0.0) {
            return Err(Error::Config("selection tolerances must be positive".into()));
        }
        Ok(())
    }

    fn kernel_scale(&self, d: usize) -> f64 {
        let h = self.selector.kernel_bandwidth;
        if self.normalized_kernel {
            (2.0 * std::f64::consts::PI * h * h).powf(-(d as f64) / 2.0)
        } else {
            1.0
        }
    }
}

/// Kernel as a ReLU sum in the difference `x_i - x_j` on `[-2 b_x, 2 b_x]^d`.
pub fn fit_kernel(d: usize, b_x: f64, cfg: &SelectConfig) -> Result<ReluSum> {
    let h = cfg.selector.kernel_bandwidth;
    let scale = cfg.kernel_scale(d);
    let r = 2.0 * b_x;
    match d {
        1 => {
            let f = |z: f64| scale * (-z * z / (2.0 * h * h)).exp();
            fit_1d_adaptive(f, &[-r, 0.0, r], cfg.kernel_tol * scale, 1 << 15)
        }
        2 | 3 => {
            let f = |z: &[f64]| scale * (-z.iter().map(|v| v * v).sum::<f64>() / (2.0 * h * h)).exp();
            Ok(fit_nd(f, d, r, cfg.kernel_terms, cfg.seed)?.0)
        }
        _ => Err(Error::Config(format!("kernel fit supports d <= 3, got {d}"))),
    }
}

/// `p_i = (1/n) sum over source j of K_bar(x_i - x_j)` into the `p` row.
pub fn build_kde_attn(kernel_fit: &ReluSum, layout: &SlotLayout, n: usize, n_prime: usize) -> Result<Vec<AttentionHead>> {
    let d = layout.d();
    if kernel_fit.input_dim != d {
        return Err(Error::Dimension("kernel fit and layout differ in dimension".into()));
    }
    let (x, one, t, p) = (layout.range("x")?, layout.row("one")?, layout.row("t")?, layout.row("p")?);
    let tt = (n + n_prime + 1) as f64;
    let reach = kernel_fit.radius;
    let mut heads = Vec::with_capacity(kernel_fit.len());
    for term in &kernel_fit.terms {
        if term.c == 0.0 {
            continue;
        }
        let g = term.a.iter().map(|a| a.abs()).sum::<f64>() * reach + term.b.abs();
        let mut hb = HeadBuilder::new(layout.dim());
        for (c, &a) in term.a.iter().enumerate() {
            if a != 0.0 {
                hb.coord(&[(x.start + c, a)], &[(one, 1.0)])?;
                hb.coord(&[(one, -a)], &[(x.start + c, 1.0)])?;
            }
        }
        if term.b != 0.0 {
            hb.coord(&[(one, term.b)], &[(one, 1.0)])?;
        }
        if g > 0.0 {
            let sg = g.sqrt();
            hb.coord(&[(one, -sg)], &[(one, sg), (t, -sg)])?;
        }
        hb.value(p, one, term.c * tt / n as f64);
        heads.push(hb.build());
    }
    Ok(heads)
}

/// Per-unit rounding allowance when a ReLU sum is re-evaluated in another order.
const FLOAT_SLACK: f64 = 1e-15;

/// Exponential fit together with its measured error split.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExpFit {
    pub fit: ReluSum,
    /// `max |e_hat / e - 1|` where `e >= 1e-8`.
    pub rel_err: f64,
    /// `max |e_hat - e|` where `e < 1e-8`, plus rounding slack.
    pub tail_err: f64,
    pub cutoff: f64,
}

/// Interpolate `exp(-beta p)` on `[0, cutoff]`, drop to exact zero just after.
pub fn fit_exp(beta: f64, cutoff: f64, p_max: f64, rel_tol: f64) -> Result<ExpFit> {
    if beta == 0.0 {
        let fit = fit_1d_knots(|_| 1.0, &[0.0, p_max.max(1.0)], p_max.max(1.0))?;
        return Ok(ExpFit { fit, rel_err: 0.0, tail_err: 0.0, cutoff: f64::INFINITY });
    }
    // Linear interpolation of exp(-beta p) has relative error about (beta h)^2 / 8.
    let h = (8.0 * rel_tol).sqrt() / beta * 0.9;
    let m = (cutoff / h).ceil() as usize;
    let mut knots: Vec<f64> = (0..=m).map(|i| cutoff * i as f64 / m as f64).collect();
    let step = cutoff / m as f64;
    let end = cutoff + step;
    knots.push(end);
    let last = p_max.max(end) + 1.0;
    knots.push(last);
    let target = move |p: f64| if p <= cutoff { (-beta * p).exp() } else { 0.0 };
    let fit = fit_1d_knots(target, &knots, last)?;
    // Relative accuracy is measured where e >= 1e-8; beyond that the fit only has
    // absolute accuracy at the level of floating-point cancellation.
    let p_rel = (cutoff).min(8.0 * std::f64::consts::LN_10 / beta);
    let mut rel_err: f64 = 0.0;
    let mut tail_err: f64 = 0.0;
    let g = 20 * m;
    for i in 0..=g {
        let p = p_rel * i as f64 / g as f64;
        rel_err = rel_err.max((fit.value1(p) * (beta * p).exp() - 1.0).abs());
        let p = p_rel + (last - p_rel) * i as f64 / g as f64;
        tail_err = tail_err.max((fit.value1(p) - (-beta * p).exp()).abs());
    }
    let tail_err = tail_err + FLOAT_SLACK * fit.terms.iter().map(|t| t.c.abs()).sum::<f64>();
    Ok(ExpFit { fit, rel_err, tail_err, cutoff })
}

/// Two-layer scalar MLP `out += g(in)` from a 1-D ReLU sum.
fn scalar_mlp(fit: &ReluSum, layout: &SlotLayout, input: &str, output: &str) -> Result<(Mat, Mat)> {
    let (inp, out, one) = (layout.row(input)?, layout.row(output)?, layout.row("one")?);
    let mut w1 = MatBuilder::new(fit.len(), layout.dim());
    let mut w2 = MatBuilder::new(layout.dim(), fit.len());
    for (m, t) in fit.terms.iter().enumerate() {
        w1.add(m, inp, t.a[0]);
        w1.add(m, one, t.b);
        w2.add(out, m, t.c);
    }
    Ok((w1.build(), w2.build()))
}

/// Writes `e_hat(p)` into the `e` row.
pub fn build_exp_mlp(exp_fit: &ReluSum, layout: &SlotLayout) -> Result<(Mat, Mat)> {
    scalar_mlp(exp_fit, layout, "p", "e")
}

/// `sigma = sum over target tokens of e_j`, exactly.
pub fn build_sum_attn(layout: &SlotLayout, n: usize, n_prime: usize, e_max: f64) -> Result<Vec<AttentionHead>> {
    let (one, t, s, e, sigma) = (layout.row("one")?, layout.row("t")?, layout.row("s")?, layout.row("e")?, layout.row("sigma")?);
    let sg = e_max.max(1.0).sqrt();
    let mut hb = HeadBuilder::new(layout.dim());
    hb.coord(&[(one, 1.0)], &[(e, 1.0)])?;
    hb.coord(&[(one, -sg)], &[(one, sg), (s, -sg), (t, sg)])?;
    hb.value(sigma, one, (n + n_prime + 1) as f64);
    Ok(vec![hb.build()])
}

/// `-(1/beta) ln max(sigma, sigma_lo)` on geometric knots up to `sigma_hi`.
pub fn fit_log(beta: f64, sigma_lo: f64, sigma_hi: f64, tol: f64) -> Result<ReluSum> {
    // Interpolating ln on a geometric grid with ratio rho errs by about (ln rho)^2 / 8.
    let ln_rho = (8.0 * tol * beta).sqrt() * 0.9;
    let span = (sigma_hi / sigma_lo).ln();
    let m = (span / ln_rho).ceil().max(1.0) as usize;
    let knots: Vec<f64> = (0..=m).map(|i| sigma_lo * (span * i as f64 / m as f64).exp()).collect();
    fit_1d_knots(|s| -s.ln() / beta, &knots, sigma_hi)
}

pub fn build_log_mlp(log_fit: &ReluSum, layout: &SlotLayout) -> Result<(Mat, Mat)> {
    scalar_mlp(log_fit, layout, "sigma", "q")
}

/// Blend `1_a(q, delta) f_iwl + (1 - 1_a) f_dann` read from the query token into `out`.
///
/// Only the indicator part is attention; the `f_dann` baseline is added by
/// [`build_copy_mlp`] in the same layer.
pub fn build_select_attn(layout: &SlotLayout, delta: f64, a: f64, q_max: f64, n: usize, n_prime: usize, out: &str) -> Result<Vec<AttentionHead>> {
    let (one, s, q) = (layout.row("one")?, layout.row("s")?, layout.row("q")?);
    let (fi, fd, out) = (layout.row("f_iwl")?, layout.row("f_dann")?, layout.row(out)?);
    let tt = (n + n_prime + 1) as f64;
    let g = a * (q_max.abs() + delta.abs()) + 1.0;
    let sg = g.sqrt();
    let mut heads = Vec::with_capacity(4);
    for (shift, sign) in [(0.5, 1.0), (-0.5, -1.0)] {
        for (src, branch_sign) in [(fi, 1.0), (fd, -1.0)] {
            let mut hb = HeadBuilder::new(layout.dim());
            hb.coord(&[(q, a)], &[(one, 1.0)])?;
            hb.coord(&[(one, -a * delta + shift)], &[(one, 1.0)])?;
            hb.coord(&[(one, -sg)], &[(s, sg)])?;
            hb.value(out, src, sign * branch_sign * tt);
            heads.push(hb.build());
        }
    }
    Ok(heads)
}

/// `out += from` through a ReLU pair.
pub fn build_copy_mlp(layout: &SlotLayout, from: &str, out: &str) -> Result<(Mat, Mat)> {
    let (f, o) = (layout.row(from)?, layout.row(out)?);
    let dim = layout.dim();
    Ok((
        Mat::from_triplets(2, dim, [(0, f, 1.0), (1, f, -1.0)]),
        Mat::from_triplets(dim, 2, [(o, 0, 1.0), (o, 1, -1.0)]),
    ))
}

/// The fitted pieces and error budget of the three selection layers.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SelectionFits {
    pub kernel: ReluSum,
    pub exp: ExpFit,
    pub log: ReluSum,
    pub sigma_lo: f64,
    pub sigma_hi: f64,
    /// `|p_hat - p| <= eps_kde` at every token.
    pub eps_kde: f64,
    /// Bound on `|q_tf - min(softmin_beta(p), q_cap)|`.
    pub chain_bound: f64,
}

pub struct SelectionLayers {
    pub layers: Vec<TransformerLayer>,
    pub layout: SlotLayout,
    pub fits: SelectionFits,
    pub out_slot: String,
}

pub fn build_selection_layers(pair: &DomainPair, cfg: &SelectConfig, out_slot: &str) -> Result<SelectionLayers> {
    cfg.validate()?;
    let d = pair.d();
    let mut layout = select_layout(d)?;
    if !layout.has(out_slot) {
        layout.push(out_slot, 1)?;
    }
    let (n, np) = (pair.n(), pair.n_prime());
    let s = &cfg.selector;
    let scale = cfg.kernel_scale(d);
    let kernel = fit_kernel(d, pair.bounds.b_x, cfg).map_err(|e| Error::build("kernel density fit", e))?;
    let eps_kde = kernel.sup_error;
    let p_max = scale + eps_kde;
    let exp = fit_exp(s.beta, cfg.exp_cutoff, p_max, cfg.exp_rel_tol).map_err(|e| Error::build("exponential fit", e))?;
    let sigma_lo = (-s.beta * cfg.q_cap).exp();
    let e_max = 1.0 + exp.rel_err + exp.tail_err;
    let sigma_hi = np as f64 * e_max * 1.01;
    let log = fit_log(s.beta, sigma_lo, sigma_hi, cfg.log_tol).map_err(|e| Error::build("logarithm fit", e))?;

    // Relative perturbation of sigma after the exp fit, measured against the clamp.
    let rel = exp.rel_err + np as f64 * exp.tail_err / sigma_lo;
    let chain_bound = if rel < 1.0 { eps_kde + (-(1.0 - rel).ln()) / s.beta + log.sup_error } else { f64::INFINITY };

    let dim = layout.dim();
    let (ew1, ew2) = build_exp_mlp(&exp.fit, &layout)?;
    let (lw1, lw2) = build_log_mlp(&log, &layout)?;
    let (cw1, cw2) = build_copy_mlp(&layout, "f_dann", out_slot)?;
    let q_max = cfg.q_cap + log.sup_error + 1.0;
    let layers = vec![
        TransformerLayer { heads: build_kde_attn(&kernel, &layout, n, np)?, w1: ew1, w2: ew2 },
        TransformerLayer { heads: build_sum_attn(&layout, n, np, e_max)?, w1: lw1, w2: lw2 },
        TransformerLayer { heads: build_select_attn(&layout, s.threshold, s.sharpness, q_max, n, np, out_slot)?, w1: cw1, w2: cw2 },
    ];
    debug_assert!(layers.iter().all(|l| l.w1.ncols() == dim));
    Ok(SelectionLayers { layers, layout, fits: SelectionFits { kernel, exp, log, sigma_lo, sigma_hi, eps_kde, chain_bound }, out_slot: out_slot.into() })
}

impl SelectionLayers {
    pub fn transformer(&self) -> Transformer {
        let mut tf = Transformer::new(self.layers.clone(), self.layout.clone());
        tf.readout_row = self.layout.row(&self.out_slot).expect("out slot exists");
        tf
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcudaConfig {
    pub iwl: IwlConfig,
    pub dann: DannConfig,
    pub dann_hyper: DannHyper,
    pub dann_seed: u64,
    pub select: SelectConfig,
}

impl Default for IcudaConfig {
    fn default() -> Self {
        IcudaConfig {
            iwl: IwlConfig { out_slot: "f_iwl".into(), ..IwlConfig::default() },
            dann: DannConfig { out_slot: "f_dann".into(), ..DannConfig::default() },
            dann_hyper: DannHyper {
                k: 2,
                b_u: 2.0,
                b_w: 2.0,
                b_v: 2.0,
                eta: 0.5,
                lambda_tradeoff: 0.5,
                activation: crate::uda_ref::Activation::Logistic,
                clamp_delta: 0.1,
                init_scale: 1.0,
            },
            dann_seed: 0,
            select: SelectConfig::default(),
        }
    }
}

pub struct IcudaBuild {
    pub transformer: Transformer,
    pub iwl: IwlBuild,
    pub dann: DannBuild,
    pub selection: SelectionFits,
    pub depth_iwl: usize,
    pub depth_dann: usize,
}

pub fn build_icuda_transformer(pair: &DomainPair, cfg: &IcudaConfig) -> Result<IcudaBuild> {
    if cfg.iwl.out_slot != "f_iwl" || cfg.dann.out_slot != "f_dann" {
        return Err(Error::Config("branch outputs must be redirected to f_iwl and f_dann".into()));
    }
    let iwl = build_iwl_transformer(pair, &cfg.iwl)?;
    let st0 = DannState::init(&cfg.dann_hyper, pair.d(), cfg.dann_seed)?;
    let dann = build_dann_transformer(pair, &st0, &cfg.dann)?;
    let sel = build_selection_layers(pair, &cfg.select, "y")?;
    let unified = SlotLayout::union(&[iwl.layout(), dann.layout(), &sel.layout])?;
    let sel_tf = sel.transformer();
    let transformer = compose(&[&iwl.transformer, &dann.transformer, &sel_tf], &unified)?;
    Ok(IcudaBuild {
        depth_iwl: iwl.transformer.depth(),
        depth_dann: dann.transformer.depth(),
        transformer,
        iwl,
        dann,
        selection: sel.fits,
    })
}

/// Data tokens in the unified layout with the initial DANN parameters in every column.
pub fn encode_icuda(build: &IcudaBuild, pair: &DomainPair) -> Result<TokenMatrix> {
    let h = encode_dann(pair, &build.dann.st0, build.dann.layout())?;
    embed_tokens(&h, &build.transformer.layout)
}

/// Selection report emitted per instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub q: f64,
    pub delta: f64,
    /// `|min(q_oracle, q_cap) - delta| - 1/(2a) - chain_bound`; positive means certified.
    pub margin: f64,
    pub choice: Branch,
    pub blend_weight: f64,
    pub certificates: BranchCertificates,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchCertificates {
    pub iwl: f64,
    pub dann: f64,
    pub chain: f64,
    pub softmin_gap: f64,
}

#[derive(Clone, Debug)]
pub struct IcudaRun {
    pub prediction: f64,
    pub f_iwl: f64,
    pub f_dann: f64,
    pub q: f64,
    pub oracle: Selection,
    pub iwl_reference: f64,
    pub dann_reference: f64,
    pub report: SelectionReport,
    pub iwl_run: IwlTfRun,
    pub dann_run: DannTfRun,
}

impl IcudaRun {
    /// The oracle's choice and its reference prediction.
    pub fn chosen_reference(&self) -> f64 {
        match self.oracle.choice {
            Branch::Iwl => self.iwl_reference,
            Branch::Dann => self.dann_reference,
        }
    }

    pub fn chosen_certificate(&self) -> f64 {
        match self.oracle.choice {
            Branch::Iwl => self.report.certificates.iwl,
            Branch::Dann => self.report.certificates.dann,
        }
    }
}

pub fn run_icuda(build: &IcudaBuild, pair: &DomainPair, cfg: &IcudaConfig) -> Result<IcudaRun> {
    let tf = &build.transformer;
    let h0 = encode_icuda(build, pair)?;
    let out = forward(tf, &h0)?;
    let qc = out.query_col();
    let prediction = read_output(tf, &out)?;
    let f_iwl = out.get("f_iwl", 0, qc)?;
    let f_dann = out.get("f_dann", 0, qc)?;
    let q = out.get("q", 0, qc)?;

    let iwl_run = run_iwl(&build.iwl, pair)?;
    let dann_run = run_dann(&build.dann, pair)?;
    let iwl_reference = build.iwl.reference_exact.prediction;
    let dann_reference = build.dann.reference.prediction;
    let s = &cfg.select.selector;
    let oracle = icuda_predict(pair, iwl_reference, dann_reference, s)?;

    let a = s.sharpness;
    let blend_weight = (a * (q - s.threshold) + 0.5).clamp(0.0, 1.0);
    let choice = if blend_weight >= 1.0 {
        Branch::Iwl
    } else if blend_weight <= 0.0 {
        Branch::Dann
    } else if blend_weight > 0.5 {
        Branch::Iwl
    } else {
        Branch::Dann
    };
    let clamped = oracle.softmin_q.min(cfg.select.q_cap);
    let margin = (clamped - s.threshold).abs() - 0.5 / a - build.selection.chain_bound;
    let report = SelectionReport {
        q,
        delta: s.threshold,
        margin,
        choice,
        blend_weight,
        certificates: BranchCertificates {
            iwl: build.iwl.certificate.bound,
            dann: dann_run.prediction_bound,
            chain: build.selection.chain_bound,
            softmin_gap: (pair.n_prime() as f64).ln() / s.beta,
        },
    };
    Ok(IcudaRun { prediction, f_iwl, f_dann, q, oracle, iwl_reference, dann_reference, report, iwl_run, dann_run })
}

/// Softmin of the fitted target densities, used to check the chain bound.
pub fn softmin_of_fitted(pair: &DomainPair, fits: &SelectionFits, beta: f64) -> Result<f64> {
    let xs = pair.source_xs();
    let p: Vec<f64> = pair
        .target
        .iter()
        .map(|x| xs.iter().map(|xj| fits.kernel.value(&x.iter().zip(xj).map(|(a, b)| a - b).collect::<Vec<_>>())).sum::<f64>() / xs.len() as f64)
        .collect();
    softmin(&p, beta)
}

/// Encode data into the selection layout with given branch values at the query.
pub fn encode_with_branches(pair: &DomainPair, layout: &SlotLayout, f_iwl: f64, f_dann: f64) -> Result<TokenMatrix> {
    let mut h = encode_tokens(pair, layout)?;
    let q = h.query_col();
    h.set_slot_col("f_iwl", q, &[f_iwl])?;
    h.set_slot_col("f_dann", q, &[f_dann])?;
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_fit_relative_error_meets_target() {
        let e = fit_exp(200.0, 0.2, 1.0, 1e-3).unwrap();
        assert!(e.rel_err <= 1.1e-3, "{}", e.rel_err);
        assert!(e.tail_err < 1e-11, "{}", e.tail_err);
        assert!(e.fit.value1(0.5).abs() <= e.tail_err);
    }

    #[test]
    fn log_fit_is_flat_below_clamp() {
        let f = fit_log(200.0, (-20f64).exp(), 40.0, 1e-4).unwrap();
        assert!(f.sup_error <= 1e-4);
        assert!((f.value1(1e-30) - 0.1).abs() < 1e-12);
    }
}
