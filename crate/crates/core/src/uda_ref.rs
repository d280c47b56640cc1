//! Reference implementations: uLSIF, importance-weighted learning, DANN,
//! kernel density estimation, softmin and the selector.
//!
//! These are plain floating-point loops with no approximation. The
//! transformer builders are checked against them.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datagen::DomainPair;
use crate::error::{Error, Result};

/// Iterates whose norm exceeds this are reported as divergent.
pub const DIVERGENCE_NORM: f64 = 1e8;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// Gaussian bumps at fixed centres, scaled by `1/sqrt(J)`.
    Rbf,
    /// The single feature `1`.
    Constant,
    /// `(1, x) / sqrt(1 + B_x^2)`.
    Linear,
}

/// A feature map `phi: R^d -> R^J` with `||phi(x)|| <= 1` on the data ball.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub kind: FeatureKind,
    pub centers: Vec<Vec<f64>>,
    pub bandwidth: f64,
    pub d: usize,
    /// Overall multiplier; `1/sqrt(J)` for RBF and `1/sqrt(1+B_x^2)` for linear.
    pub scale: f64,
}

/// Median of all pairwise distances between the given points.
pub fn median_heuristic(points: &[Vec<f64>]) -> f64 {
    let mut ds = Vec::new();
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            ds.push(sq_dist(&points[i], &points[j]).sqrt());
        }
    }
    if ds.is_empty() {
        return 1.0;
    }
    ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = ds[ds.len() / 2];
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

impl FeatureMap {
    /// RBF features at the first `min(j_max, n')` target points, bandwidth by the
    /// median heuristic over all training points.
    pub fn rbf_from_pair(pair: &DomainPair, j_max: usize) -> Result<Self> {
        if j_max == 0 {
            return Err(Error::Config("J must be at least 1".into()));
        }
        let j = j_max.min(pair.n_prime());
        let centers: Vec<Vec<f64>> = pair.target[..j].to_vec();
        let mut all = pair.source_xs();
        all.extend(pair.target.iter().cloned());
        let bw = median_heuristic(&all);
        Self::rbf(centers, bw)
    }

    pub fn rbf(centers: Vec<Vec<f64>>, bandwidth: f64) -> Result<Self> {
        if centers.is_empty() {
            return Err(Error::Config("RBF feature map needs a centre".into()));
        }
        if !(bandwidth > 0.0) {
            return Err(Error::Config("bandwidth must be positive".into()));
        }
        let d = centers[0].len();
        let scale = 1.0 / (centers.len() as f64).sqrt();
        Ok(FeatureMap { kind: FeatureKind::Rbf, centers, bandwidth, d, scale })
    }

    pub fn constant(d: usize) -> Self {
        FeatureMap { kind: FeatureKind::Constant, centers: Vec::new(), bandwidth: 1.0, d, scale: 1.0 }
    }

    pub fn linear(d: usize, b_x: f64) -> Self {
        FeatureMap {
            kind: FeatureKind::Linear,
            centers: Vec::new(),
            bandwidth: 1.0,
            d,
            scale: 1.0 / (1.0 + b_x * b_x).sqrt(),
        }
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            FeatureKind::Rbf => self.centers.len(),
            FeatureKind::Constant => 1,
            FeatureKind::Linear => self.d + 1,
        }
    }

    /// Single RBF unit without the `scale` factor.
    pub fn kernel(&self, j: usize, x: &[f64]) -> f64 {
        (-sq_dist(x, &self.centers[j]) / (2.0 * self.bandwidth * self.bandwidth)).exp()
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        match self.kind {
            FeatureKind::Rbf => (0..self.centers.len()).map(|j| self.scale * self.kernel(j, x)).collect(),
            FeatureKind::Constant => vec![1.0],
            FeatureKind::Linear => std::iter::once(self.scale).chain(x.iter().map(|v| self.scale * v)).collect(),
        }
    }
}

/// The quadratic uLSIF objective plus its gradient-descent schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UlsifProblem {
    pub features: FeatureMap,
    pub lambda_reg: f64,
    pub eta1: f64,
    pub l1: usize,
    pub psi_mat: Vec<Vec<f64>>,
    pub psi_vec: Vec<f64>,
}

impl UlsifProblem {
    pub fn j(&self) -> usize {
        self.psi_vec.len()
    }

    fn psi_dmatrix(&self) -> DMatrix<f64> {
        let j = self.j();
        DMatrix::from_fn(j, j, |a, b| self.psi_mat[a][b])
    }

    /// Largest eigenvalue of `Psi + lambda I`.
    pub fn lipschitz(&self) -> f64 {
        let mut m = self.psi_dmatrix();
        for i in 0..self.j() {
            m[(i, i)] += self.lambda_reg;
        }
        m.symmetric_eigenvalues().max()
    }

    /// Step size `1 / lambda_max(Psi + lambda I)`, which is safe.
    pub fn safe_eta1(&self) -> f64 {
        1.0 / self.lipschitz()
    }

    pub fn with_schedule(mut self, eta1: f64, l1: usize) -> Self {
        self.eta1 = eta1;
        self.l1 = l1;
        self
    }

    /// `q(x) = alpha . phi(x)`, unclipped.
    pub fn ratio(&self, alpha: &[f64], x: &[f64]) -> f64 {
        dot(alpha, &self.features.eval(x))
    }
}

/// Assemble `Psi` and `psi`; schedule defaults to the safe step and 10 iterations.
pub fn ulsif_build(pair: &DomainPair, features: FeatureMap, lambda: f64) -> Result<UlsifProblem> {
    if pair.n() == 0 || pair.n_prime() == 0 {
        return Err(Error::Empty("uLSIF needs source and target samples".into()));
    }
    if features.d != pair.d() {
        return Err(Error::Dimension("feature map dimension differs from data".into()));
    }
    let src: Vec<Vec<f64>> = pair.source.iter().map(|s| features.eval(&s.x)).collect();
    let tgt: Vec<Vec<f64>> = pair.target.iter().map(|x| features.eval(x)).collect();
    ulsif_from_values(features, &src, &tgt, lambda)
}

/// As [`ulsif_build`] but from precomputed feature vectors of the source and
/// target samples (for instance approximate features).
pub fn ulsif_from_values(features: FeatureMap, src: &[Vec<f64>], tgt: &[Vec<f64>], lambda: f64) -> Result<UlsifProblem> {
    if !(lambda > 0.0) {
        return Err(Error::Config("uLSIF needs lambda > 0".into()));
    }
    if src.is_empty() || tgt.is_empty() {
        return Err(Error::Empty("uLSIF needs source and target samples".into()));
    }
    let j = src[0].len();
    let mut psi_mat = vec![vec![0.0; j]; j];
    for f in src {
        for a in 0..j {
            for b in 0..j {
                psi_mat[a][b] += f[a] * f[b];
            }
        }
    }
    let n = src.len() as f64;
    psi_mat.iter_mut().flatten().for_each(|v| *v /= n);
    let mut psi_vec = vec![0.0; j];
    for f in tgt {
        for (a, v) in f.iter().enumerate() {
            psi_vec[a] += v;
        }
    }
    let np = tgt.len() as f64;
    psi_vec.iter_mut().for_each(|v| *v /= np);
    let p = UlsifProblem { features, lambda_reg: lambda, eta1: 0.0, l1: 10, psi_mat, psi_vec };
    let eta = p.safe_eta1();
    Ok(p.with_schedule(eta, 10))
}

/// Solve `(Psi + lambda I) alpha = psi`.
pub fn ulsif_closed_form(p: &UlsifProblem) -> Result<Vec<f64>> {
    let mut m = p.psi_dmatrix();
    for i in 0..p.j() {
        m[(i, i)] += p.lambda_reg;
    }
    if m.iter().any(|v| !v.is_finite()) || p.psi_vec.iter().any(|v| !v.is_finite()) {
        return Err(Error::Solver("non-finite uLSIF system".into()));
    }
    let rhs = DVector::from_column_slice(&p.psi_vec);
    let sol = m
        .cholesky()
        .ok_or_else(|| Error::Solver("Psi + lambda I is not positive definite".into()))?
        .solve(&rhs);
    Ok(sol.iter().copied().collect())
}

/// `||(Psi + lambda I) alpha - psi||`.
pub fn ulsif_residual(p: &UlsifProblem, alpha: &[f64]) -> f64 {
    let j = p.j();
    (0..j)
        .map(|a| {
            let r = dot(&p.psi_mat[a], alpha) + p.lambda_reg * alpha[a] - p.psi_vec[a];
            r * r
        })
        .sum::<f64>()
        .sqrt()
}

/// Gradient descent from zero; returns `L1 + 1` iterates including the start.
pub fn ulsif_gd(p: &UlsifProblem) -> Result<Vec<Vec<f64>>> {
    let j = p.j();
    let mut alpha = vec![0.0; j];
    let mut trace = vec![alpha.clone()];
    for step in 1..=p.l1 {
        let grad: Vec<f64> = (0..j).map(|a| dot(&p.psi_mat[a], &alpha) - p.psi_vec[a] + p.lambda_reg * alpha[a]).collect();
        for a in 0..j {
            alpha[a] -= p.eta1 * grad[a];
        }
        let nrm = norm2(&alpha);
        if !(nrm <= DIVERGENCE_NORM) {
            return Err(Error::Divergence { step, norm: nrm });
        }
        trace.push(alpha.clone());
    }
    Ok(trace)
}

/// Supervised loss on a scalar prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// `(p - y)^2 / 2`
    Squared,
    /// `log(1 + e^p) - y p`
    Logistic,
    /// `p - y`, whose derivative is the constant 1.
    Linear,
}

impl Loss {
    pub fn value(&self, p: f64, y: f64) -> f64 {
        match self {
            Loss::Squared => 0.5 * (p - y) * (p - y),
            Loss::Logistic => {
                let sp = if p > 0.0 { p + (-p).exp().ln_1p() } else { p.exp().ln_1p() };
                sp - y * p
            }
            Loss::Linear => p - y,
        }
    }

    pub fn d1(&self, p: f64, y: f64) -> f64 {
        match self {
            Loss::Squared => p - y,
            Loss::Logistic => 1.0 / (1.0 + (-p).exp()) - y,
            Loss::Linear => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IwlState {
    pub w: Vec<f64>,
    pub eta2: f64,
    pub l2: usize,
    pub b_w: f64,
    pub loss: Loss,
}

impl IwlState {
    pub fn new(j: usize, eta2: f64, l2: usize, b_w: f64, loss: Loss) -> Self {
        IwlState { w: vec![0.0; j], eta2, l2, b_w, loss }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IwlRun {
    pub w_trace: Vec<Vec<f64>>,
    pub prediction: f64,
    pub weights: Vec<f64>,
}

/// Per-source-sample importance weights, optionally clipped at zero.
pub fn importance_weights(pair: &DomainPair, p: &UlsifProblem, alpha: &[f64], clip: bool) -> Vec<f64> {
    pair.source
        .iter()
        .map(|s| {
            let q = p.ratio(alpha, &s.x);
            if clip {
                q.max(0.0)
            } else {
                q
            }
        })
        .collect()
}

/// Weighted empirical risk `(1/n) sum_i c_i l(w . phi(x_i), y_i)`.
pub fn weighted_risk(pair: &DomainPair, features: &FeatureMap, weights: &[f64], loss: Loss, w: &[f64]) -> f64 {
    let n = pair.n() as f64;
    pair.source
        .iter()
        .zip(weights)
        .map(|(s, c)| c * loss.value(dot(w, &features.eval(&s.x)), s.y))
        .sum::<f64>()
        / n
}

/// Gradient of [`weighted_risk`] in `w`.
pub fn weighted_grad(pair: &DomainPair, features: &FeatureMap, weights: &[f64], loss: Loss, w: &[f64]) -> Vec<f64> {
    let n = pair.n() as f64;
    let mut g = vec![0.0; w.len()];
    for (s, c) in pair.source.iter().zip(weights) {
        let f = features.eval(&s.x);
        let coef = c * loss.d1(dot(w, &f), s.y) / n;
        for (gj, fj) in g.iter_mut().zip(&f) {
            *gj += coef * fj;
        }
    }
    g
}

/// Gradient descent on a weighted risk with given per-sample weights.
pub fn weighted_gd(pair: &DomainPair, features: &FeatureMap, weights: &[f64], state: &IwlState) -> Result<IwlRun> {
    let src: Vec<Vec<f64>> = pair.source.iter().map(|s| features.eval(&s.x)).collect();
    let ys: Vec<f64> = pair.source.iter().map(|s| s.y).collect();
    weighted_gd_values(&src, &ys, weights, &features.eval(&pair.query), state)
}

/// [`weighted_gd`] on precomputed source features `src` and query features `query_phi`.
pub fn weighted_gd_values(src: &[Vec<f64>], ys: &[f64], weights: &[f64], query_phi: &[f64], state: &IwlState) -> Result<IwlRun> {
    if weights.len() != src.len() || ys.len() != src.len() {
        return Err(Error::Dimension("one weight and label per source sample required".into()));
    }
    if src.iter().any(|f| f.len() != state.w.len()) || query_phi.len() != state.w.len() {
        return Err(Error::Dimension("w must have one entry per feature".into()));
    }
    let n = src.len() as f64;
    let mut w = state.w.clone();
    let mut trace = vec![w.clone()];
    for step in 1..=state.l2 {
        let mut g = vec![0.0; w.len()];
        for ((f, y), c) in src.iter().zip(ys).zip(weights) {
            let coef = c * state.loss.d1(dot(&w, f), *y) / n;
            for (gj, fj) in g.iter_mut().zip(f) {
                *gj += coef * fj;
            }
        }
        for (wj, gj) in w.iter_mut().zip(&g) {
            *wj -= state.eta2 * gj;
        }
        let nrm = norm2(&w);
        if !(nrm <= DIVERGENCE_NORM) {
            return Err(Error::Divergence { step, norm: nrm });
        }
        trace.push(w.clone());
    }
    let prediction = dot(&w, query_phi);
    Ok(IwlRun { w_trace: trace, prediction, weights: weights.to_vec() })
}

/// Importance-weighted learning with weights clipped at zero.
pub fn iwl_run(pair: &DomainPair, p: &UlsifProblem, alpha: &[f64], state: &IwlState) -> Result<IwlRun> {
    iwl_run_with(pair, p, alpha, state, true)
}

/// As [`iwl_run`]; `clip = false` uses the raw `alpha . phi` weights.
pub fn iwl_run_with(pair: &DomainPair, p: &UlsifProblem, alpha: &[f64], state: &IwlState, clip: bool) -> Result<IwlRun> {
    let weights = importance_weights(pair, p, alpha, clip);
    weighted_gd(pair, &p.features, &weights, state)
}

/// Unweighted ERM by the same gradient descent.
pub fn erm_run(pair: &DomainPair, features: &FeatureMap, state: &IwlState) -> Result<IwlRun> {
    weighted_gd(pair, features, &vec![1.0; pair.n()], state)
}

/// Cross entropy with its first-argument derivative, both at the clamped `t`.
pub fn gamma_and_deriv(t: f64, s: f64, clamp_delta: f64) -> (f64, f64) {
    let tc = t.clamp(clamp_delta, 1.0 - clamp_delta);
    let value = -s * tc.ln() - (1.0 - s) * (1.0 - tc).ln();
    let d1 = -s / tc + (1.0 - s) / (1.0 - tc);
    (value, d1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Logistic,
    Elu,
}

impl Activation {
    pub fn value(&self, z: f64) -> f64 {
        match self {
            Activation::Logistic => 1.0 / (1.0 + (-z).exp()),
            Activation::Elu => {
                if z > 0.0 {
                    z
                } else {
                    z.exp_m1()
                }
            }
        }
    }

    pub fn deriv(&self, z: f64) -> f64 {
        match self {
            Activation::Logistic => {
                let s = self.value(z);
                s * (1.0 - s)
            }
            Activation::Elu => {
                if z > 0.0 {
                    1.0
                } else {
                    z.exp()
                }
            }
        }
    }
}

/// Two-layer DANN parameters with the constraint set and training schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DannState {
    pub u: Vec<Vec<f64>>,
    pub w: Vec<f64>,
    pub v: Vec<f64>,
    pub b_u: f64,
    pub b_w: f64,
    pub b_v: f64,
    pub eta: f64,
    pub lambda_tradeoff: f64,
    pub activation: Activation,
    pub clamp_delta: f64,
}

/// Shared hyper-parameters of a DANN run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DannHyper {
    pub k: usize,
    pub b_u: f64,
    pub b_w: f64,
    pub b_v: f64,
    pub eta: f64,
    pub lambda_tradeoff: f64,
    pub activation: Activation,
    pub clamp_delta: f64,
    pub init_scale: f64,
}

impl DannState {
    /// `u` with i.i.d. `N(0, init_scale^2)` entries; `w = v = 1/K`.
    pub fn init(hp: &DannHyper, d: usize, seed: u64) -> Result<Self> {
        if hp.k == 0 || d == 0 {
            return Err(Error::Config("DANN needs K >= 1 and d >= 1".into()));
        }
        if !(hp.clamp_delta > 0.0 && hp.clamp_delta < 0.5) {
            return Err(Error::Config("clamp_delta must lie in (0, 1/2)".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, hp.init_scale.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
        let u = (0..hp.k).map(|_| (0..d).map(|_| normal.sample(&mut rng)).collect()).collect();
        let st = DannState {
            u,
            w: vec![1.0 / hp.k as f64; hp.k],
            v: vec![1.0 / hp.k as f64; hp.k],
            b_u: hp.b_u,
            b_w: hp.b_w,
            b_v: hp.b_v,
            eta: hp.eta,
            lambda_tradeoff: hp.lambda_tradeoff,
            activation: hp.activation,
            clamp_delta: hp.clamp_delta,
        };
        Ok(st.project())
    }

    pub fn k(&self) -> usize {
        self.w.len()
    }

    pub fn d(&self) -> usize {
        self.u.first().map_or(0, |r| r.len())
    }

    pub fn in_set(&self) -> bool {
        let tol = 1.0 + 1e-12;
        norm2(&self.w) <= self.b_w * tol
            && norm2(&self.v) <= self.b_v * tol
            && self.u.iter().all(|r| norm2(r) <= self.b_u * tol)
    }

    /// Radial projection of `w`, `v` and every row of `u` onto their balls.
    pub fn project(mut self) -> Self {
        fn shrink(x: &mut [f64], b: f64) {
            let n = norm2(x);
            if n > b {
                let f = b / n;
                x.iter_mut().for_each(|v| *v *= f);
            }
        }
        shrink(&mut self.w, self.b_w);
        shrink(&mut self.v, self.b_v);
        let bu = self.b_u;
        self.u.iter_mut().for_each(|r| shrink(r, bu));
        self
    }

    /// Hidden activations `r(u_k . x)`.
    pub fn hidden(&self, x: &[f64]) -> Vec<f64> {
        self.u.iter().map(|uk| self.activation.value(dot(uk, x))).collect()
    }

    /// Label head `Lambda(x)`, unclamped.
    pub fn label_output(&self, x: &[f64]) -> f64 {
        dot(&self.w, &self.hidden(x))
    }

    /// Domain head `Delta(x)`, unclamped.
    pub fn domain_output(&self, x: &[f64]) -> f64 {
        dot(&self.v, &self.hidden(x))
    }

    /// Parameters flattened as `u (row-major), w, v`.
    pub fn flatten(&self) -> Vec<f64> {
        self.u.iter().flatten().chain(&self.w).chain(&self.v).copied().collect()
    }

    pub fn with_flat(&self, flat: &[f64]) -> Self {
        let (k, d) = (self.k(), self.d());
        let mut out = self.clone();
        for a in 0..k {
            out.u[a].copy_from_slice(&flat[a * d..(a + 1) * d]);
        }
        out.w.copy_from_slice(&flat[k * d..k * d + k]);
        out.v.copy_from_slice(&flat[k * d + k..k * d + 2 * k]);
        out
    }
}

/// Label loss `L` and domain loss `Omega` with the clamped cross entropy.
/// Source domain label is 0, target domain label is 1.
pub fn dann_losses(pair: &DomainPair, st: &DannState) -> (f64, f64) {
    let dl = st.clamp_delta;
    let n = pair.n() as f64;
    let np = pair.n_prime() as f64;
    let l = pair.source.iter().map(|s| gamma_and_deriv(st.label_output(&s.x), s.y, dl).0).sum::<f64>() / n;
    let os = pair.source.iter().map(|s| gamma_and_deriv(st.domain_output(&s.x), 0.0, dl).0).sum::<f64>() / n;
    let ot = pair.target.iter().map(|x| gamma_and_deriv(st.domain_output(x), 1.0, dl).0).sum::<f64>() / np;
    (l, os + ot)
}

/// Raw partial derivatives of `L` and `Omega`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DannPartials {
    pub l_u: Vec<Vec<f64>>,
    pub l_w: Vec<f64>,
    pub omega_u: Vec<Vec<f64>>,
    pub omega_v: Vec<f64>,
}

/// Combined update directions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DannGrads {
    pub g_u: Vec<Vec<f64>>,
    pub g_w: Vec<f64>,
    pub g_v: Vec<f64>,
}

pub fn dann_partials(pair: &DomainPair, st: &DannState) -> DannPartials {
    let (k, d) = (st.k(), st.d());
    let dl = st.clamp_delta;
    let mut out = DannPartials {
        l_u: vec![vec![0.0; d]; k],
        l_w: vec![0.0; k],
        omega_u: vec![vec![0.0; d]; k],
        omega_v: vec![0.0; k],
    };
    let mut accumulate = |x: &[f64], head: &[f64], label: f64, scale: f64, is_label: bool| {
        let pre: Vec<f64> = st.u.iter().map(|uk| dot(uk, x)).collect();
        let r: Vec<f64> = pre.iter().map(|z| st.activation.value(*z)).collect();
        let out_val = dot(head, &r);
        let g = gamma_and_deriv(out_val, label, dl).1 * scale;
        for a in 0..k {
            let coef = g * head[a] * st.activation.deriv(pre[a]);
            let (gu, gh) = if is_label { (&mut out.l_u[a], &mut out.l_w[a]) } else { (&mut out.omega_u[a], &mut out.omega_v[a]) };
            *gh += g * r[a];
            for (gi, xi) in gu.iter_mut().zip(x) {
                *gi += coef * xi;
            }
        }
    };
    let n = pair.n() as f64;
    let np = pair.n_prime() as f64;
    for s in &pair.source {
        accumulate(&s.x, &st.w, s.y, 1.0 / n, true);
        accumulate(&s.x, &st.v, 0.0, 1.0 / n, false);
    }
    for x in &pair.target {
        accumulate(x, &st.v, 1.0, 1.0 / np, false);
    }
    out
}

/// `g_u = grad_u (L - lambda Omega)`, `g_w = grad_w L`, `g_v = lambda grad_v Omega`.
pub fn dann_grads(pair: &DomainPair, st: &DannState) -> DannGrads {
    let p = dann_partials(pair, st);
    let lam = st.lambda_tradeoff;
    DannGrads {
        g_u: p
            .l_u
            .iter()
            .zip(&p.omega_u)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - lam * y).collect())
            .collect(),
        g_w: p.l_w,
        g_v: p.omega_v.iter().map(|x| lam * x).collect(),
    }
}

/// One projected simultaneous step.
pub fn dann_step(pair: &DomainPair, st: &DannState) -> DannState {
    let g = dann_grads(pair, st);
    let mut next = st.clone();
    for (uk, gk) in next.u.iter_mut().zip(&g.g_u) {
        for (a, b) in uk.iter_mut().zip(gk) {
            *a -= st.eta * b;
        }
    }
    for (a, b) in next.w.iter_mut().zip(&g.g_w) {
        *a -= st.eta * b;
    }
    for (a, b) in next.v.iter_mut().zip(&g.g_v) {
        *a -= st.eta * b;
    }
    next.project()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DannRun {
    pub trace: Vec<DannState>,
    pub prediction: f64,
}

/// `steps` projected updates; the trace holds `steps + 1` states.
pub fn dann_run(pair: &DomainPair, st0: &DannState, steps: usize) -> Result<DannRun> {
    if st0.d() != pair.d() {
        return Err(Error::Dimension("DANN weights and data differ in dimension".into()));
    }
    if !st0.in_set() {
        return Err(Error::Bound("initial DANN state lies outside the constraint set".into()));
    }
    let mut trace = Vec::with_capacity(steps + 1);
    trace.push(st0.clone());
    for _ in 0..steps {
        let next = dann_step(pair, trace.last().unwrap());
        trace.push(next);
    }
    let prediction = trace.last().unwrap().label_output(&pair.query);
    Ok(DannRun { trace, prediction })
}

/// Fraction of source and target points the domain head classifies correctly at 0.5.
pub fn domain_accuracy(pair: &DomainPair, st: &DannState) -> f64 {
    let src = pair.source.iter().filter(|s| st.domain_output(&s.x) < 0.5).count();
    let tgt = pair.target.iter().filter(|x| st.domain_output(x) >= 0.5).count();
    (src + tgt) as f64 / (pair.n() + pair.n_prime()) as f64
}

/// Mean of `exp(-||x - x_i||^2 / (2h^2))`; with `normalized` also divided by `(2 pi h^2)^(d/2)`.
pub fn kde_eval(source_xs: &[Vec<f64>], x: &[f64], h: f64, normalized: bool) -> Result<f64> {
    if source_xs.is_empty() {
        return Err(Error::Empty("kernel density estimate needs samples".into()));
    }
    if !(h > 0.0) {
        return Err(Error::Config("bandwidth must be positive".into()));
    }
    let s: f64 = source_xs.iter().map(|xi| (-sq_dist(x, xi) / (2.0 * h * h)).exp()).sum();
    let mut p = s / source_xs.len() as f64;
    if normalized {
        p /= (2.0 * std::f64::consts::PI * h * h).powf(x.len() as f64 / 2.0);
    }
    Ok(p)
}

/// `-(1/beta) ln sum exp(-beta p_i)`, shifted by the minimum.
pub fn softmin(p: &[f64], beta: f64) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::Empty("softmin of an empty vector".into()));
    }
    if !(beta > 0.0) {
        return Err(Error::Config("beta must be positive".into()));
    }
    let m = p.iter().copied().fold(f64::INFINITY, f64::min);
    let s: f64 = p.iter().map(|v| (-beta * (v - m)).exp()).sum();
    Ok(m - s.ln() / beta)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectorConfig {
    pub kernel_bandwidth: f64,
    pub threshold: f64,
    pub beta: f64,
    pub sharpness: f64,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        SelectorConfig { kernel_bandwidth: 0.5, threshold: 0.05, beta: 200.0, sharpness: 100.0 }
    }
}

impl SelectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kernel_bandwidth > 0.0 && self.beta > 0.0 && self.sharpness > 0.0) {
            return Err(Error::Config("selector h, beta and a must be positive".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config("selector threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Iwl,
    Dann,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub choice: Branch,
    pub prediction: f64,
    pub densities: Vec<f64>,
    pub min_density: f64,
    pub softmin_q: f64,
}

/// IWL when every target point has estimated source density strictly above the threshold.
pub fn icuda_predict(pair: &DomainPair, iwl_pred: f64, dann_pred: f64, cfg: &SelectorConfig) -> Result<Selection> {
    cfg.validate()?;
    let xs = pair.source_xs();
    let densities: Vec<f64> = pair
        .target
        .iter()
        .map(|x| kde_eval(&xs, x, cfg.kernel_bandwidth, false))
        .collect::<Result<_>>()?;
    let min_density = densities.iter().copied().fold(f64::INFINITY, f64::min);
    let softmin_q = softmin(&densities, cfg.beta)?;
    let choice = if min_density > cfg.threshold { Branch::Iwl } else { Branch::Dann };
    let prediction = match choice {
        Branch::Iwl => iwl_pred,
        Branch::Dann => dann_pred,
    };
    Ok(Selection { choice, prediction, densities, min_density, softmin_q })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_symmetric_point() {
        let (v, d) = gamma_and_deriv(0.5, 1.0, 1e-3);
        assert!((v - 2f64.ln()).abs() < 1e-15);
        assert_eq!(d, -2.0);
        assert_eq!(gamma_and_deriv(0.5, 0.0, 1e-3).1, 2.0);
    }

    #[test]
    fn softmin_closed_forms() {
        assert!((softmin(&[0.0, 0.0], 1.0).unwrap() + 2f64.ln()).abs() < 1e-15);
        assert_eq!(softmin(&[5.0], 3.0).unwrap(), 5.0);
        assert!((softmin(&[1.0, 2.0], 1.0).unwrap() - (1.0 - (-1f64).exp().ln_1p())).abs() < 1e-15);
    }

    #[test]
    fn kde_two_point() {
        let v = kde_eval(&[vec![-1.0], vec![1.0]], &[0.0], 1.0, false).unwrap();
        assert!((v - (-0.5f64).exp()).abs() < 1e-15);
    }
}
