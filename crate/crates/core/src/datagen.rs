//! Synthetic covariate-shift data and the token-matrix encoding.

use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tfcore::{SlotLayout, TokenMatrix};

/// A labeled source point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub x: Vec<f64>,
    pub y: f64,
}

/// Known magnitude bounds `(B_x, B_y)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub b_x: f64,
    pub b_y: f64,
}

/// Labeled source, unlabeled target, one query. Carries no target labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainPair {
    pub source: Vec<LabeledSample>,
    pub target: Vec<Vec<f64>>,
    pub query: Vec<f64>,
    pub bounds: Bounds,
}

/// Labels that only the harness may see.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeldOut {
    pub target_labels: Vec<f64>,
    pub query_label: f64,
}

/// Generator output: the algorithm-facing pair plus held-out labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub pair: DomainPair,
    pub held_out: HeldOut,
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

impl DomainPair {
    /// Validate shapes and finiteness; bounds default to 1.1 times the observed maxima.
    pub fn new(source: Vec<LabeledSample>, target: Vec<Vec<f64>>, query: Vec<f64>, bounds: Option<Bounds>) -> Result<Self> {
        if source.is_empty() || target.is_empty() {
            return Err(Error::Empty("a domain pair needs n >= 1 and n' >= 1".into()));
        }
        let d = query.len();
        if source.iter().any(|s| s.x.len() != d) || target.iter().any(|x| x.len() != d) {
            return Err(Error::Dimension("all vectors in a domain pair must share one dimension".into()));
        }
        let all_finite = source.iter().all(|s| s.y.is_finite() && s.x.iter().all(|v| v.is_finite()))
            && target.iter().flatten().all(|v| v.is_finite())
            && query.iter().all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::NonFinite("domain pair contains a non-finite entry".into()));
        }
        let bounds = match bounds {
            Some(b) => b,
            None => {
                let bx = source
                    .iter()
                    .map(|s| norm(&s.x))
                    .chain(target.iter().map(|x| norm(x)))
                    .chain(std::iter::once(norm(&query)))
                    .fold(0.0, f64::max);
                let by = source.iter().map(|s| s.y.abs()).fold(0.0, f64::max);
                Bounds { b_x: 1.1 * bx, b_y: 1.1 * by }
            }
        };
        let pair = DomainPair { source, target, query, bounds };
        pair.check_bounds()?;
        Ok(pair)
    }

    pub fn check_bounds(&self) -> Result<()> {
        let b = self.bounds;
        for x in self.source.iter().map(|s| &s.x).chain(self.target.iter()).chain(std::iter::once(&self.query)) {
            if norm(x) > b.b_x * (1.0 + 1e-12) {
                return Err(Error::Bound(format!("||x|| = {} exceeds B_x = {}", norm(x), b.b_x)));
            }
        }
        for s in &self.source {
            if s.y.abs() > b.b_y * (1.0 + 1e-12) {
                return Err(Error::Bound(format!("|y| = {} exceeds B_y = {}", s.y.abs(), b.b_y)));
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.source.len()
    }

    pub fn n_prime(&self) -> usize {
        self.target.len()
    }

    pub fn d(&self) -> usize {
        self.query.len()
    }

    /// Same data, different query; bounds widen if needed.
    pub fn with_query(&self, query: Vec<f64>) -> DomainPair {
        let mut out = self.clone();
        out.bounds.b_x = out.bounds.b_x.max(1.1 * norm(&query));
        out.query = query;
        out
    }

    pub fn source_xs(&self) -> Vec<Vec<f64>> {
        self.source.iter().map(|s| s.x.clone()).collect()
    }
}

/// Two interleaved half circles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoMoonConfig {
    pub n_per_domain: usize,
    pub rotation: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl TwoMoonConfig {
    fn validate(&self) -> Result<()> {
        if self.n_per_domain == 0 {
            return Err(Error::Config("n_per_domain must be positive".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be non-negative".into()));
        }
        if !(self.rotation.abs() <= std::f64::consts::PI) {
            return Err(Error::Config("rotation must lie in [-pi, pi]".into()));
        }
        Ok(())
    }
}

/// Offset that moves the two-moon bounding box centre to the origin.
pub const MOON_CENTER: [f64; 2] = [0.5, 0.25];

/// Noise-free point of moon `label` at angle `theta`, recentred.
pub fn moon_point(label: usize, theta: f64) -> [f64; 2] {
    let p = if label == 0 {
        [theta.cos(), theta.sin()]
    } else {
        [1.0 - theta.cos(), 1.0 - theta.sin() - 0.5]
    };
    [p[0] - MOON_CENTER[0], p[1] - MOON_CENTER[1]]
}

fn rotate(p: [f64; 2], angle: f64) -> Vec<f64> {
    let (s, c) = angle.sin_cos();
    vec![c * p[0] - s * p[1], s * p[0] + c * p[1]]
}

fn moon_sample(rng: &mut ChaCha8Rng, label: usize, noise: &Normal<f64>, angle: f64) -> Vec<f64> {
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let mut p = moon_point(label, theta);
    p[0] += noise.sample(rng);
    p[1] += noise.sample(rng);
    rotate(p, angle)
}

/// Balanced two-moon source; target is the source law rotated about the origin.
pub fn gen_two_moon_labeled(cfg: &TwoMoonConfig) -> Result<Generated> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let labels: Vec<usize> = (0..cfg.n_per_domain).map(|i| i % 2).collect();
    let source: Vec<LabeledSample> = labels
        .iter()
        .map(|&l| LabeledSample { x: moon_sample(&mut rng, l, &noise, 0.0), y: l as f64 })
        .collect();
    let target: Vec<Vec<f64>> = labels.iter().map(|&l| moon_sample(&mut rng, l, &noise, cfg.rotation)).collect();
    let ql = rng.random_range(0..2usize);
    let query = moon_sample(&mut rng, ql, &noise, cfg.rotation);
    let pair = DomainPair::new(source, target, query, None)?;
    Ok(Generated {
        pair,
        held_out: HeldOut { target_labels: labels.iter().map(|&l| l as f64).collect(), query_label: ql as f64 },
    })
}

pub fn gen_two_moon(cfg: &TwoMoonConfig) -> Result<DomainPair> {
    Ok(gen_two_moon_labeled(cfg)?.pair)
}

/// Linear label rule `y = 1[normal . x > offset]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRule {
    pub normal: Vec<f64>,
    pub offset: f64,
}

impl LabelRule {
    pub fn label(&self, x: &[f64]) -> f64 {
        let s: f64 = self.normal.iter().zip(x).map(|(a, b)| a * b).sum();
        if s > self.offset {
            1.0
        } else {
            0.0
        }
    }
}

/// Gaussian source and target with isotropic covariances.
///
/// `target_cov_scale` overrides the target spread; by default both domains share
/// `shared_cov_scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftGaussConfig {
    pub d: usize,
    pub source_mean: Vec<f64>,
    pub target_mean: Vec<f64>,
    pub shared_cov_scale: f64,
    #[serde(default)]
    pub target_cov_scale: Option<f64>,
    pub label_rule: LabelRule,
    pub n: usize,
    pub n_prime: usize,
    pub seed: u64,
}

impl ShiftGaussConfig {
    fn validate(&self) -> Result<()> {
        if self.source_mean.len() != self.d || self.target_mean.len() != self.d || self.label_rule.normal.len() != self.d {
            return Err(Error::Config("means and label normal must have length d".into()));
        }
        if !(self.shared_cov_scale > 0.0) || self.target_cov_scale.is_some_and(|t| !(t > 0.0)) {
            return Err(Error::Config("covariance scale must be positive".into()));
        }
        if self.source_mean.iter().chain(&self.target_mean).any(|v| !v.is_finite()) {
            return Err(Error::Config("means must be finite".into()));
        }
        if self.n == 0 || self.n_prime == 0 {
            return Err(Error::Config("n and n' must be positive".into()));
        }
        Ok(())
    }

    /// Analytic density ratio `p_T(x) / p_S(x)`.
    pub fn density_ratio(&self, x: &[f64]) -> f64 {
        let ss = self.shared_cov_scale;
        let st = self.target_sd();
        let dt: f64 = x.iter().zip(&self.target_mean).map(|(a, m)| (a - m) * (a - m)).sum();
        let ds: f64 = x.iter().zip(&self.source_mean).map(|(a, m)| (a - m) * (a - m)).sum();
        (ss / st).powi(self.d as i32) * (ds / (2.0 * ss * ss) - dt / (2.0 * st * st)).exp()
    }

    pub fn target_sd(&self) -> f64 {
        self.target_cov_scale.unwrap_or(self.shared_cov_scale)
    }
}

fn gauss(rng: &mut ChaCha8Rng, mean: &[f64], sd: f64) -> Vec<f64> {
    let n = Normal::new(0.0, sd).expect("validated scale");
    mean.iter().map(|m| m + n.sample(rng)).collect()
}

pub fn gen_shifted_gaussians_labeled(cfg: &ShiftGaussConfig) -> Result<Generated> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sd = cfg.shared_cov_scale;
    let source: Vec<LabeledSample> = (0..cfg.n)
        .map(|_| {
            let x = gauss(&mut rng, &cfg.source_mean, sd);
            let y = cfg.label_rule.label(&x);
            LabeledSample { x, y }
        })
        .collect();
    let td = cfg.target_sd();
    let target: Vec<Vec<f64>> = (0..cfg.n_prime).map(|_| gauss(&mut rng, &cfg.target_mean, td)).collect();
    let query = gauss(&mut rng, &cfg.target_mean, td);
    let held_out = HeldOut {
        target_labels: target.iter().map(|x| cfg.label_rule.label(x)).collect(),
        query_label: cfg.label_rule.label(&query),
    };
    let mut pair = DomainPair::new(source, target, query, None)?;
    if pair.bounds.b_y == 0.0 {
        pair.bounds.b_y = 1.0;
    }
    Ok(Generated { pair, held_out })
}

pub fn gen_shifted_gaussians(cfg: &ShiftGaussConfig) -> Result<DomainPair> {
    Ok(gen_shifted_gaussians_labeled(cfg)?.pair)
}

/// Layout with only the base slots plus `workspace` anonymous rows.
pub fn minimal_layout(d: usize, workspace: usize) -> SlotLayout {
    let l = SlotLayout::base(d);
    if workspace == 0 {
        l
    } else {
        l.with("workspace", workspace).expect("fresh name")
    }
}

/// Encode `pair` into `layout`: sources first, then targets, then the query.
pub fn encode_tokens(pair: &DomainPair, layout: &SlotLayout) -> Result<TokenMatrix> {
    let d = pair.d();
    if layout.d() != d {
        return Err(Error::Dimension(format!("layout has d = {}, data has d = {d}", layout.d())));
    }
    for name in crate::tfcore::BASE_SLOTS {
        layout.slot(name)?;
    }
    pair.check_bounds()?;
    let (n, np) = (pair.n(), pair.n_prime());
    let mut h = DMatrix::zeros(layout.dim(), n + np + 1);
    let xr = layout.range("x")?;
    let (yr, tr, sr, or) = (layout.row("y")?, layout.row("t")?, layout.row("s")?, layout.row("one")?);
    for (i, s) in pair.source.iter().enumerate() {
        for (k, r) in xr.clone().enumerate() {
            h[(r, i)] = s.x[k];
        }
        h[(yr, i)] = s.y;
        h[(tr, i)] = 1.0;
        h[(sr, i)] = 1.0;
        h[(or, i)] = 1.0;
    }
    for (j, x) in pair.target.iter().enumerate() {
        let c = n + j;
        for (k, r) in xr.clone().enumerate() {
            h[(r, c)] = x[k];
        }
        h[(sr, c)] = 1.0;
        h[(or, c)] = 1.0;
    }
    let q = n + np;
    for (k, r) in xr.enumerate() {
        h[(r, q)] = pair.query[k];
    }
    h[(or, q)] = 1.0;
    Ok(TokenMatrix { h, layout: layout.clone(), n, n_prime: np })
}

/// Replace the query column in place (all workspace rows of that column reset to 0).
pub fn replace_query(tm: &mut TokenMatrix, query: &[f64]) -> Result<()> {
    if query.len() != tm.layout.d() {
        return Err(Error::Dimension("query dimension differs from layout".into()));
    }
    let q = tm.query_col();
    for r in 0..tm.h.nrows() {
        tm.h[(r, q)] = 0.0;
    }
    tm.set_slot_col("x", q, query)?;
    let one = tm.layout.row("one")?;
    tm.h[(one, q)] = 1.0;
    Ok(())
}

/// Read back the labeled source columns.
pub fn decode_source(tm: &TokenMatrix) -> Result<Vec<LabeledSample>> {
    (0..tm.n)
        .map(|i| Ok(LabeledSample { x: tm.slot_col("x", i)?, y: tm.get("y", 0, i)? }))
        .collect()
}

/// Write `x_1..x_d, y, domain` rows. Target and query labels are written only
/// when `held_out` is given; otherwise the `y` cell is empty.
pub fn write_csv(pair: &DomainPair, held_out: Option<&HeldOut>, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let d = pair.d();
    let mut header: Vec<String> = (1..=d).map(|i| format!("x_{i}")).collect();
    header.push("y".into());
    header.push("domain".into());
    w.write_record(&header)?;
    let fmt = |v: f64| format!("{v:?}");
    for s in &pair.source {
        let mut rec: Vec<String> = s.x.iter().map(|v| fmt(*v)).collect();
        rec.push(fmt(s.y));
        rec.push("S".into());
        w.write_record(&rec)?;
    }
    for (j, x) in pair.target.iter().enumerate() {
        let mut rec: Vec<String> = x.iter().map(|v| fmt(*v)).collect();
        rec.push(held_out.map(|h| fmt(h.target_labels[j])).unwrap_or_default());
        rec.push("T".into());
        w.write_record(&rec)?;
    }
    let mut rec: Vec<String> = pair.query.iter().map(|v| fmt(*v)).collect();
    rec.push(held_out.map(|h| fmt(h.query_label)).unwrap_or_default());
    rec.push("Q".into());
    w.write_record(&rec)?;
    w.flush()?;
    Ok(())
}

/// Inverse of [`write_csv`]. Held-out labels are returned only if every target
/// and query row carries one.
pub fn read_csv(path: &Path) -> Result<(DomainPair, Option<HeldOut>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let ncol = header.len();
    if ncol < 3 || &header[ncol - 1] != "domain" || &header[ncol - 2] != "y" {
        return Err(Error::Config("CSV header must be x_1..x_d,y,domain".into()));
    }
    let d = ncol - 2;
    let (mut source, mut target, mut tlabels, mut query, mut qlabel) = (Vec::new(), Vec::new(), Vec::new(), None, None);
    for rec in r.records() {
        let rec = rec?;
        let parse = |s: &str| -> Result<f64> {
            s.trim().parse::<f64>().map_err(|_| Error::Config(format!("cannot parse `{s}` as a number")))
        };
        let x: Vec<f64> = (0..d).map(|i| parse(&rec[i])).collect::<Result<_>>()?;
        let y = if rec[d].trim().is_empty() { None } else { Some(parse(&rec[d])?) };
        match &rec[d + 1] {
            "S" => source.push(LabeledSample {
                x,
                y: y.ok_or_else(|| Error::Config("source row without label".into()))?,
            }),
            "T" => {
                target.push(x);
                tlabels.push(y);
            }
            "Q" => {
                query = Some(x);
                qlabel = y;
            }
            other => return Err(Error::Config(format!("unknown domain tag `{other}`"))),
        }
    }
    let query = query.ok_or_else(|| Error::Config("CSV has no query row".into()))?;
    let held = match (tlabels.iter().all(|l| l.is_some()), qlabel) {
        (true, Some(q)) => Some(HeldOut { target_labels: tlabels.into_iter().map(|l| l.unwrap()).collect(), query_label: q }),
        _ => None,
    };
    let mut pair = DomainPair::new(source, target, query, None)?;
    if pair.bounds.b_y == 0.0 {
        pair.bounds.b_y = 1.0;
    }
    Ok((pair, held))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_layout_dimension() {
        assert_eq!(minimal_layout(2, 0).dim(), 6);
    }

    #[test]
    fn moons_are_balanced() {
        let g = gen_two_moon_labeled(&TwoMoonConfig { n_per_domain: 10, rotation: 0.2, noise_std: 0.1, seed: 4 }).unwrap();
        let ones: f64 = g.pair.source.iter().map(|s| s.y).sum();
        assert_eq!(ones, 5.0);
        assert_eq!(g.held_out.target_labels.iter().sum::<f64>(), 5.0);
    }
}
