//! Sums of ReLUs: `f(z) = sum_m c_m * ReLU(a_m . z + b_m)`.
//!
//! Every scalar nonlinearity that a construction embeds into attention or MLP
//! weights is represented here together with a measured sup-error. One-dimensional
//! targets use exact piecewise-linear interpolation; multivariate targets use a
//! ridge least-squares fit over a fixed direction dictionary.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One ridge unit `c * ReLU(a . z + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReluTerm {
    pub a: Vec<f64>,
    pub b: f64,
    pub c: f64,
}

impl ReluTerm {
    pub fn new(a: Vec<f64>, b: f64, c: f64) -> Self {
        ReluTerm { a, b, c }
    }

    #[inline]
    pub fn argument(&self, z: &[f64]) -> f64 {
        self.a.iter().zip(z).map(|(a, x)| a * x).sum::<f64>() + self.b
    }

    /// `||a||_1 + |b|`.
    pub fn weight_l1(&self) -> f64 {
        self.a.iter().map(|v| v.abs()).sum::<f64>() + self.b.abs()
    }
}

/// A scalar function of `input_dim` inputs written as a sum of ReLUs, valid on the
/// box `[-radius, radius]^input_dim` up to `sup_error`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "ReluSumJson", try_from = "ReluSumJson")]
pub struct ReluSum {
    pub input_dim: usize,
    pub radius: f64,
    pub sup_error: f64,
    pub terms: Vec<ReluTerm>,
}

/// Result of a checked evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub value: f64,
    /// Set when `||z||_inf > radius`: the error certificate does not apply there.
    pub out_of_domain: bool,
}

/// Measurement record for a fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub grid_points: usize,
    pub measured_sup_error: f64,
    pub target_name: String,
    pub rank_deficient: bool,
}

#[derive(Serialize, Deserialize)]
struct ReluSumJson {
    input_dim: usize,
    radius: f64,
    sup_error: f64,
    terms: Vec<(Vec<f64>, f64, f64)>,
}

impl From<ReluSum> for ReluSumJson {
    fn from(r: ReluSum) -> Self {
        ReluSumJson {
            input_dim: r.input_dim,
            radius: r.radius,
            sup_error: r.sup_error,
            terms: r.terms.into_iter().map(|t| (t.a, t.b, t.c)).collect(),
        }
    }
}

impl TryFrom<ReluSumJson> for ReluSum {
    type Error = String;
    fn try_from(j: ReluSumJson) -> std::result::Result<Self, String> {
        if j.terms.iter().any(|(a, _, _)| a.len() != j.input_dim) {
            return Err("term dimension differs from input_dim".into());
        }
        Ok(ReluSum {
            input_dim: j.input_dim,
            radius: j.radius,
            sup_error: j.sup_error,
            terms: j.terms.into_iter().map(|(a, b, c)| ReluTerm { a, b, c }).collect(),
        })
    }
}

#[inline]
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

impl ReluSum {
    pub fn new(input_dim: usize, radius: f64, terms: Vec<ReluTerm>) -> Self {
        ReluSum { input_dim, radius, sup_error: 0.0, terms }
    }

    pub fn empty(input_dim: usize, radius: f64) -> Self {
        Self::new(input_dim, radius, Vec::new())
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Unchecked evaluation.
    #[inline]
    pub fn value(&self, z: &[f64]) -> f64 {
        debug_assert_eq!(z.len(), self.input_dim);
        self.terms.iter().map(|t| t.c * relu(t.argument(z))).sum()
    }

    /// Convenience for one-input sums.
    #[inline]
    pub fn value1(&self, x: f64) -> f64 {
        self.value(&[x])
    }

    /// Checked evaluation with the out-of-domain flag.
    pub fn eval(&self, z: &[f64]) -> Result<Evaluation> {
        if z.len() != self.input_dim {
            return Err(Error::Dimension(format!(
                "ReluSum expects {} inputs, got {}",
                self.input_dim,
                z.len()
            )));
        }
        let out_of_domain = z.iter().any(|v| v.abs() > self.radius);
        Ok(Evaluation { value: self.value(z), out_of_domain })
    }

    /// Rescale every term so that `||a||_1 + |b| <= 1`, moving the scale into `c`.
    /// Terms with `a = 0, b = 0` are dropped since they evaluate to zero.
    pub fn normalize(&mut self) {
        self.terms.retain(|t| t.weight_l1() > 0.0 && t.c != 0.0);
        for t in &mut self.terms {
            let s = t.weight_l1();
            if s > 1.0 || s < 1.0 {
                t.a.iter_mut().for_each(|v| *v /= s);
                t.b /= s;
                t.c *= s;
            }
        }
    }

    pub fn normalized(mut self) -> Self {
        self.normalize();
        self
    }

    /// `sum_m |c_m|`, the achieved constant `C`.
    pub fn total_c(&self) -> f64 {
        self.terms.iter().map(|t| t.c.abs()).sum()
    }

    /// `max_m ||a_m||_1 + |b_m|`.
    pub fn max_weight_l1(&self) -> f64 {
        self.terms.iter().map(|t| t.weight_l1()).fold(0.0, f64::max)
    }

    /// `(C, max ||a||_1 + |b|)`.
    pub fn constraint_cert(&self) -> (f64, f64) {
        (self.total_c(), self.max_weight_l1())
    }

    /// Multiply the represented function by `k`.
    pub fn scaled(&self, k: f64) -> ReluSum {
        let mut out = self.clone();
        out.terms.iter_mut().for_each(|t| t.c *= k);
        out.sup_error *= k.abs();
        out
    }

    /// Sum of two representations on the same input space.
    pub fn plus(&self, other: &ReluSum) -> Result<ReluSum> {
        if self.input_dim != other.input_dim {
            return Err(Error::Dimension("cannot add ReluSums of different input_dim".into()));
        }
        let mut terms = self.terms.clone();
        terms.extend(other.terms.iter().cloned());
        Ok(ReluSum {
            input_dim: self.input_dim,
            radius: self.radius.min(other.radius),
            sup_error: self.sup_error + other.sup_error,
            terms,
        })
    }

    /// Largest `|f_hat|` over a set of sample points; helper for bound bookkeeping.
    pub fn max_abs_on(&self, points: &[Vec<f64>]) -> f64 {
        points.iter().map(|p| self.value(p).abs()).fold(0.0, f64::max)
    }
}

fn check_finite(v: f64, at: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("target function is {v} at {at}")))
    }
}

/// Piecewise-linear interpolant of `f` through strictly increasing `knots`.
///
/// The interpolant is flat to the left of the first knot and continues the last
/// slope to the right of the final knot. `radius` sets the validity box; the
/// sup-error is measured on `[knots[0], knots[last]]` at ten sub-points per
/// interval plus a uniform grid of at least 1000 points.
pub fn fit_1d_knots<F: Fn(f64) -> f64>(f: F, knots: &[f64], radius: f64) -> Result<ReluSum> {
    if knots.len() < 2 {
        return Err(Error::Config("piecewise-linear fit needs at least two knots".into()));
    }
    if knots.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Config("knots must be strictly increasing".into()));
    }
    let vals: Vec<f64> =
        knots.iter().map(|&k| check_finite(f(k), k)).collect::<Result<Vec<_>>>()?;
    let slopes: Vec<f64> = (0..knots.len() - 1)
        .map(|i| (vals[i + 1] - vals[i]) / (knots[i + 1] - knots[i]))
        .collect();
    let mut terms = Vec::with_capacity(knots.len());
    if vals[0] != 0.0 {
        terms.push(ReluTerm::new(vec![0.0], 1.0, vals[0]));
    }
    if slopes[0] != 0.0 {
        terms.push(ReluTerm::new(vec![1.0], -knots[0], slopes[0]));
    }
    for i in 1..slopes.len() {
        let dc = slopes[i] - slopes[i - 1];
        if dc != 0.0 {
            terms.push(ReluTerm::new(vec![1.0], -knots[i], dc));
        }
    }
    let mut rs = ReluSum::new(1, radius, terms).normalized();
    rs.sup_error = measure_1d(&rs, &f, knots)?;
    Ok(rs)
}

fn measure_1d<F: Fn(f64) -> f64>(rs: &ReluSum, f: &F, knots: &[f64]) -> Result<f64> {
    let mut err: f64 = 0.0;
    for w in knots.windows(2) {
        for j in 0..=10 {
            let x = w[0] + (w[1] - w[0]) * j as f64 / 10.0;
            err = err.max((rs.value1(x) - check_finite(f(x), x)?).abs());
        }
    }
    let (lo, hi) = (knots[0], knots[knots.len() - 1]);
    let g = (10 * (knots.len() - 1)).max(1000);
    for j in 0..=g {
        let x = lo + (hi - lo) * j as f64 / g as f64;
        err = err.max((rs.value1(x) - check_finite(f(x), x)?).abs());
    }
    Ok(err)
}

/// Interpolant of `f` at `m` equispaced knots on `[-r, r]`.
pub fn fit_1d<F: Fn(f64) -> f64>(f: F, r: f64, m: usize) -> Result<ReluSum> {
    if m < 2 {
        return Err(Error::Config(format!("term budget M = {m} must be at least 2")));
    }
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::Config(format!("radius must be positive and finite, got {r}")));
    }
    let knots: Vec<f64> =
        (0..m).map(|i| -r + 2.0 * r * i as f64 / (m - 1) as f64).collect();
    fit_1d_knots(f, &knots, r)
}

/// Piecewise-linear interpolant with knots refined by bisection until the error
/// sampled inside every interval is at most `tol`, or `max_knots` is reached.
///
/// `initial_knots` must be sorted and contain the interval end points; kinks of
/// `f` should be listed there so that they sit on knots.
pub fn fit_1d_adaptive<F: Fn(f64) -> f64>(
    f: F,
    initial_knots: &[f64],
    tol: f64,
    max_knots: usize,
) -> Result<ReluSum> {
    if initial_knots.len() < 2 {
        return Err(Error::Config("adaptive fit needs at least two initial knots".into()));
    }
    let interval_err = |a: f64, b: f64| -> Result<f64> {
        let (fa, fb) = (check_finite(f(a), a)?, check_finite(f(b), b)?);
        let mut e: f64 = 0.0;
        for j in 1..10 {
            let x = a + (b - a) * j as f64 / 10.0;
            let lin = fa + (fb - fa) * j as f64 / 10.0;
            e = e.max((check_finite(f(x), x)? - lin).abs());
        }
        Ok(e)
    };
    let mut knots: Vec<f64> = initial_knots.to_vec();
    loop {
        let mut next = Vec::with_capacity(knots.len() * 2);
        let mut refined = false;
        for w in knots.windows(2) {
            next.push(w[0]);
            if interval_err(w[0], w[1])? > tol && next.len() + knots.len() < max_knots {
                next.push(0.5 * (w[0] + w[1]));
                refined = true;
            }
        }
        next.push(*knots.last().unwrap());
        knots = next;
        if !refined || knots.len() >= max_knots {
            break;
        }
    }
    let radius = knots[0].abs().max(knots[knots.len() - 1].abs());
    fit_1d_knots(f, &knots, radius)
}

/// A ridge component `g(d . z)` used by [`fit_ridge_sum`].
#[derive(Clone, Debug)]
pub struct RidgeComponent {
    pub direction: Vec<f64>,
    pub profile: ReluSum,
}

/// Compose one-dimensional profiles along fixed directions into a single sum on
/// `input_dim` inputs. The sup-error is the sum of the profile errors, which is
/// a valid bound whenever each profile's radius covers `||d||_1 * radius`.
pub fn fit_ridge_sum(components: &[RidgeComponent], input_dim: usize, radius: f64) -> Result<ReluSum> {
    let mut terms = Vec::new();
    let mut err = 0.0;
    for comp in components {
        if comp.direction.len() != input_dim || comp.profile.input_dim != 1 {
            return Err(Error::Dimension("ridge component has wrong shape".into()));
        }
        let reach: f64 = comp.direction.iter().map(|v| v.abs()).sum::<f64>() * radius;
        if comp.profile.radius + 1e-12 < reach {
            return Err(Error::Config(format!(
                "profile radius {} does not cover ridge reach {reach}",
                comp.profile.radius
            )));
        }
        err += comp.profile.sup_error;
        for t in &comp.profile.terms {
            let a: Vec<f64> = comp.direction.iter().map(|d| d * t.a[0]).collect();
            terms.push(ReluTerm::new(a, t.b, t.c));
        }
    }
    let mut rs = ReluSum::new(input_dim, radius, terms).normalized();
    rs.sup_error = err;
    Ok(rs)
}

/// The exact two-term ramp `ReLU(a(t-s)+0.5) - ReLU(a(t-s)-0.5)` on inputs `(t, s)`.
pub fn indicator_pair(a: f64) -> Result<ReluSum> {
    if !(a > 0.0) || !a.is_finite() {
        return Err(Error::Config(format!("indicator sharpness must be positive, got {a}")));
    }
    let terms = vec![
        ReluTerm::new(vec![a, -a], 0.5, 1.0),
        ReluTerm::new(vec![a, -a], -0.5, -1.0),
    ];
    Ok(ReluSum::new(2, f64::MAX, terms).normalized())
}

fn l1_directions(k: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut dirs = Vec::with_capacity(count);
    let jitter: f64 = rng.random::<f64>();
    for i in 0..count {
        let v: Vec<f64> = if k == 2 {
            let th = 2.0 * std::f64::consts::PI * (i as f64 + jitter) / count as f64;
            vec![th.cos(), th.sin()]
        } else {
            // Fibonacci lattice on the sphere, rotated by the seed jitter.
            let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / count as f64;
            let rad = (1.0 - y * y).sqrt();
            let th = golden * i as f64 + 2.0 * std::f64::consts::PI * jitter;
            let mut v = vec![rad * th.cos(), y, rad * th.sin()];
            v.truncate(k);
            v
        };
        let n1: f64 = v.iter().map(|x| x.abs()).sum();
        dirs.push(v.into_iter().map(|x| x / n1).collect());
    }
    dirs
}

fn grid_points(k: usize, per_dim: usize, r: f64) -> Vec<Vec<f64>> {
    let axis: Vec<f64> =
        (0..per_dim).map(|i| -r + 2.0 * r * i as f64 / (per_dim - 1) as f64).collect();
    let total = per_dim.pow(k as u32);
    (0..total)
        .map(|mut idx| {
            (0..k)
                .map(|_| {
                    let v = axis[idx % per_dim];
                    idx /= per_dim;
                    v
                })
                .collect()
        })
        .collect()
}

/// Ridge least-squares fit of `f` on `[-r, r]^k`, `k` in {2, 3}.
///
/// The dictionary holds the exact affine units (`ReLU(+-z_i)`, `ReLU(1)`) and
/// `ReLU(a . z - b)` for quasi-random directions `a` on the l1 sphere and a
/// uniform bias grid. Coefficients solve the normal equations with a tiny ridge;
/// the sup-error is measured on a boundary-inclusive grid disjoint from the
/// random training sample (200 per dimension for k = 2, 50 for k = 3).
pub fn fit_nd<F: Fn(&[f64]) -> f64>(
    f: F,
    k: usize,
    r: f64,
    m: usize,
    seed: u64,
) -> Result<(ReluSum, FitReport)> {
    if !(k == 2 || k == 3) {
        return Err(Error::Config(format!("fit_nd supports k in {{2, 3}}, got {k}")));
    }
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::Config(format!("radius must be positive and finite, got {r}")));
    }
    let affine = 2 * k + 1;
    if m < affine + 4 {
        return Err(Error::Config(format!("term budget M = {m} too small for k = {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ridge_budget = m - affine;
    let n_bias = ((ridge_budget as f64).sqrt().round() as usize).max(2);
    let n_dir = (ridge_budget / n_bias).max(1);
    let dirs = l1_directions(k, n_dir, &mut rng);

    let mut dict: Vec<ReluTerm> = Vec::with_capacity(m);
    for i in 0..k {
        let mut e = vec![0.0; k];
        e[i] = 1.0;
        dict.push(ReluTerm::new(e.clone(), 0.0, 1.0));
        e[i] = -1.0;
        dict.push(ReluTerm::new(e, 0.0, 1.0));
    }
    dict.push(ReluTerm::new(vec![0.0; k], 1.0, 1.0));
    for d in &dirs {
        for l in 0..n_bias {
            let b = -r + 2.0 * r * (l as f64 + 0.5) / n_bias as f64;
            dict.push(ReluTerm::new(d.clone(), -b, 1.0));
        }
    }
    let p = dict.len();

    let n_train = (4 * p).max(2000);
    let mut train: Vec<Vec<f64>> = (0..n_train)
        .map(|_| (0..k).map(|_| rng.random_range(-r..=r)).collect())
        .collect();
    for corner in 0..(1usize << k) {
        train.push((0..k).map(|i| if corner >> i & 1 == 1 { r } else { -r }).collect());
    }
    let targets: Vec<f64> = train
        .iter()
        .map(|z| {
            let v = f(z);
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFinite(format!("target is {v} at {z:?}")))
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let phi = DMatrix::from_fn(train.len(), p, |i, j| relu(dict[j].argument(&train[i])));
    let y = DVector::from_vec(targets);
    let gram = phi.transpose() * &phi;
    let rhs = phi.transpose() * &y;
    let trace: f64 = gram.diagonal().iter().sum::<f64>() / p as f64;
    let mut mu = 1e-12 * trace.max(1e-300);
    let mut rank_deficient = false;
    let coef = loop {
        let mut g = gram.clone();
        for i in 0..p {
            g[(i, i)] += mu;
        }
        if let Some(ch) = g.cholesky() {
            break ch.solve(&rhs);
        }
        rank_deficient = true;
        mu *= 100.0;
        if mu > trace {
            return Err(Error::Solver("ridge normal equations could not be factorised".into()));
        }
    };
    let terms: Vec<ReluTerm> = dict
        .into_iter()
        .zip(coef.iter())
        .map(|(mut t, &c)| {
            t.c = c;
            t
        })
        .collect();
    let mut rs = ReluSum::new(k, r, terms).normalized();

    let per_dim = if k == 2 { 200 } else { 50 };
    let test = grid_points(k, per_dim, r);
    let mut err: f64 = 0.0;
    for z in &test {
        let v = f(z);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("target is {v} at {z:?}")));
        }
        err = err.max((rs.value(z) - v).abs());
    }
    rs.sup_error = err;
    let report = FitReport {
        grid_points: test.len(),
        measured_sup_error: err,
        target_name: String::new(),
        rank_deficient,
    };
    Ok((rs, report))
}

/// Measure `sup |rs - f|` on an explicit point set (used for fits whose domain
/// is not a full box, e.g. binary label arguments).
pub fn measure_on<F: Fn(&[f64]) -> f64>(rs: &ReluSum, f: F, points: &[Vec<f64>]) -> f64 {
    points.iter().map(|z| (rs.value(z) - f(z)).abs()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn abs_is_exact_with_three_knots() {
        let rs = fit_1d(|t| t.abs(), 1.0, 3).unwrap();
        assert!(rs.sup_error < 1e-15);
        for x in [-1.0, -0.3, 0.0, 0.25, 1.0] {
            assert!((rs.value1(x) - x.abs()).abs() < 1e-15);
        }
    }

    #[test]
    fn affine_function_is_exact() {
        let rs = fit_1d(|t| 2.0 * t + 1.0, 1.0, 2).unwrap();
        assert!(rs.sup_error < 1e-15);
        assert!((rs.value1(0.4) - 1.8).abs() < 1e-15);
    }

    #[test]
    fn exp_respects_interpolation_bound() {
        let rs = fit_1d(|t| (-t).exp(), 1.0, 65).unwrap();
        let h = 2.0 / 64.0;
        let bound = 0.125 * 1f64.exp() * h * h;
        assert!(rs.sup_error <= bound, "{} > {}", rs.sup_error, bound);
        let fine = (0..=20000)
            .map(|i| -1.0 + i as f64 / 10000.0)
            .map(|t| (rs.value1(t) - (-t).exp()).abs())
            .fold(0.0, f64::max);
        assert!(fine <= bound);
    }

    #[test]
    fn normalisation_keeps_values() {
        let rs = fit_1d(|t| t.sin() * 3.0, 2.0, 17).unwrap();
        assert!(rs.max_weight_l1() <= 1.0 + 1e-15);
        let mut raw = rs.clone();
        raw.terms.iter_mut().for_each(|t| {
            t.a[0] *= 4.0;
            t.b *= 4.0;
            t.c /= 4.0;
        });
        let renorm = raw.clone().normalized();
        for x in [-1.7, 0.0, 0.3, 1.99] {
            assert!((raw.value1(x) - renorm.value1(x)).abs() < 1e-12);
        }
    }

    #[test]
    fn indicator_values() {
        let ind = indicator_pair(10.0).unwrap();
        assert!((ind.value(&[0.2, 0.0]) - 1.0).abs() < 1e-15);
        assert!((ind.value(&[0.3, 0.3]) - 0.5).abs() < 1e-15);
        assert!(ind.value(&[0.0, 1.0]).abs() < 1e-15);
        assert!((ind.value(&[0.05, 0.0]) - 1.0).abs() < 1e-12);
        assert!((ind.value(&[0.04, 0.0]) - 0.9).abs() < 1e-12);
    }

    #[test]
    fn empty_sum_is_zero_and_dimension_checked() {
        let rs = ReluSum::empty(2, 1.0);
        assert_eq!(rs.eval(&[0.3, 0.1]).unwrap().value, 0.0);
        assert!(rs.eval(&[0.3]).is_err());
        assert!(rs.eval(&[3.0, 0.0]).unwrap().out_of_domain);
    }

    #[test]
    fn fit_nd_reproduces_a_coordinate() {
        let (rs, rep) = fit_nd(|z| z[2], 3, 1.0, 40, 1).unwrap();
        assert!(rep.measured_sup_error < 1e-6, "{}", rep.measured_sup_error);
        assert!((rs.value(&[0.2, -0.4, 0.7]) - 0.7).abs() < 1e-6);
    }

    #[test]
    fn json_round_trip() {
        let rs = fit_1d(|t| t * t, 1.0, 5).unwrap();
        let s = serde_json::to_string(&rs).unwrap();
        assert!(s.contains("\"terms\":[[["));
        let back: ReluSum = serde_json::from_str(&s).unwrap();
        assert_eq!(back, rs);
    }

    #[test]
    fn adaptive_fit_meets_tolerance() {
        let rs = fit_1d_adaptive(|t| (-50.0 * t).exp(), &[0.0, 1.0], 1e-6, 100_000).unwrap();
        assert!(rs.sup_error <= 2e-6, "{}", rs.sup_error);
    }
}
