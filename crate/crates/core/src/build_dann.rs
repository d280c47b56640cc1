//! Transformer realising projected DANN gradient descent, two layers per step.
//!
//! Layer `2l` computes the network outputs (attention) and the clamped
//! cross-entropy derivatives (MLP). Layer `2l + 1` applies the parameter update
//! (attention) and projects back onto the constraint balls while clearing the
//! scratch rows (MLP). A final attention layer writes `Lambda(x)` with the last
//! parameters into the output row.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use crate::datagen::{encode_tokens, DomainPair};
use crate::error::{Error, Result};
use crate::relu_approx::{fit_1d_adaptive, fit_nd, relu, ReluSum, ReluTerm};
use crate::tfcore::{forward_range, read_output, HeadBuilder, MatBuilder, SlotLayout, TokenMatrix, Transformer, TransformerLayer};
use crate::uda_ref::{dann_grads, dann_run, dann_step, Activation, DannRun, DannState};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DannConfig {
    pub steps: usize,
    /// Tolerance of the activation fit.
    pub act_tol: f64,
    /// Tolerance of the two clamped-derivative profiles.
    pub gamma_tol: f64,
    /// Dictionary budget of the product fit `s * r'(t)`.
    pub prod_terms: usize,
    pub prod_seed: u64,
    /// Directions per projection field (blocks of dimension >= 2).
    pub proj_dirs: usize,
    /// Threshold levels per projection field.
    pub proj_levels: usize,
    pub out_slot: String,
}

impl Default for DannConfig {
    fn default() -> Self {
        DannConfig {
            steps: 5,
            act_tol: 1e-5,
            gamma_tol: 1e-4,
            prod_terms: 400,
            prod_seed: 0,
            proj_dirs: 32,
            proj_levels: 6,
            out_slot: "y".into(),
        }
    }
}

/// Base slots, `u` (K*d, row-major by unit), `dw`, `dv` (K each) and four scratch rows.
pub fn dann_layout(d: usize, k: usize, out_slot: &str) -> Result<SlotLayout> {
    let mut l = SlotLayout::base(d)
        .with("u", k * d)?
        .with("dw", k)?
        .with("dv", k)?
        .with("lam", 1)?
        .with("del", 1)?
        .with("glam", 1)?
        .with("gdel", 1)?;
    if out_slot != "y" {
        l.push(out_slot, 1)?;
    }
    Ok(l)
}

/// Token matrix with `st` written into every column.
pub fn encode_dann(pair: &DomainPair, st: &DannState, layout: &SlotLayout) -> Result<TokenMatrix> {
    let mut h = encode_tokens(pair, layout)?;
    let u: Vec<f64> = st.u.iter().flatten().copied().collect();
    for c in 0..h.tokens() {
        h.set_slot_col("u", c, &u)?;
        h.set_slot_col("dw", c, &st.w)?;
        h.set_slot_col("dv", c, &st.v)?;
    }
    Ok(h)
}

/// Read `(u, w, v)` back from column `col`.
pub fn read_state(h: &TokenMatrix, template: &DannState, col: usize) -> Result<DannState> {
    let (k, d) = (template.k(), template.d());
    let u = h.slot_col("u", col)?;
    let mut st = template.clone();
    st.u = (0..k).map(|a| u[a * d..(a + 1) * d].to_vec()).collect();
    st.w = h.slot_col("dw", col)?;
    st.v = h.slot_col("dv", col)?;
    Ok(st)
}

/// All scalar approximations used by the construction, with their boxes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DannFits {
    /// `r` on `[-r1, r1]`.
    pub act: ReluSum,
    /// `-1/clamp(t)` on `[-r_lam, r_lam]`.
    pub g1: ReluSum,
    /// `1/(1 - clamp(t))` on `[-r_lam, r_lam]`.
    pub g0: ReluSum,
    /// `s * r'(t)` on `[-s_box, s_box] x [-r1, r1]`.
    pub prod: ReluSum,
    pub r1: f64,
    pub r_lam: f64,
    pub s_box: f64,
}

impl DannFits {
    pub fn eps_r(&self) -> f64 {
        self.act.sup_error
    }

    pub fn eps_gamma(&self) -> f64 {
        self.g1.sup_error.max(self.g0.sup_error)
    }

    pub fn eps_p(&self) -> f64 {
        self.prod.sup_error
    }
}

fn prod_cache() -> &'static Mutex<HashMap<(u64, u64, usize, u64, u8), ReluSum>> {
    static CACHE: OnceLock<Mutex<HashMap<(u64, u64, usize, u64, u8), ReluSum>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Fit `sigma * r'(r1 tau)` on the unit square, then rescale to `(s, t)`.
fn fit_product(act: Activation, r1: f64, s_box: f64, m: usize, seed: u64) -> Result<ReluSum> {
    let key = (r1.to_bits(), 0u64, m, seed, act as u8);
    let unit = {
        let cached = prod_cache().lock().unwrap().get(&key).cloned();
        match cached {
            Some(u) => u,
            None => {
                let (u, _) = fit_nd(|z: &[f64]| z[0] * act.deriv(r1 * z[1]), 2, 1.0, m, seed)?;
                prod_cache().lock().unwrap().insert(key, u.clone());
                u
            }
        }
    };
    let terms = unit
        .terms
        .iter()
        .map(|t| ReluTerm::new(vec![t.a[0] / s_box, t.a[1] / r1], t.b, t.c * s_box))
        .collect();
    let mut rs = ReluSum::new(2, s_box.max(r1), terms);
    rs.sup_error = unit.sup_error * s_box;
    Ok(rs)
}

/// Largest `|r|` on `[-r1, r1]` and largest `|r'|` there.
fn act_bounds(act: Activation, r1: f64) -> (f64, f64) {
    let mut br: f64 = 0.0;
    let mut lr: f64 = 0.0;
    for i in 0..=2000 {
        let z = -r1 + 2.0 * r1 * i as f64 / 2000.0;
        br = br.max(act.value(z).abs());
        lr = lr.max(act.deriv(z).abs());
    }
    (br, lr)
}

/// Fit every scalar map for a given state family and box sizes.
pub fn fit_dann(st: &DannState, b_x: f64, s_box: f64, cfg: &DannConfig) -> Result<DannFits> {
    let r1 = (st.b_u * b_x).max(1.0);
    let act = st.activation;
    let act_fit = fit_1d_adaptive(|z| act.value(z), &[-r1, 0.0, r1], cfg.act_tol, 1 << 14)?;
    let (b_r, _) = act_bounds(act, r1);
    let k = st.k() as f64;
    let r_lam = ((k.sqrt() * st.b_w.max(st.b_v) * (b_r + act_fit.sup_error)) * 1.01).max(1.0);
    let dl = st.clamp_delta;
    let knots = [-r_lam, dl, 1.0 - dl, r_lam];
    let g1 = fit_1d_adaptive(|t| -1.0 / t.clamp(dl, 1.0 - dl), &knots, cfg.gamma_tol, 1 << 14)?;
    let g0 = fit_1d_adaptive(|t| 1.0 / (1.0 - t.clamp(dl, 1.0 - dl)), &knots, cfg.gamma_tol, 1 << 14)?;
    let prod = fit_product(act, r1, s_box, cfg.prod_terms, cfg.prod_seed)?;
    Ok(DannFits { act: act_fit, g1, g0, prod, r1, r_lam, s_box })
}

fn gate_1d(t: &ReluTerm, reach: f64) -> f64 {
    t.a[0].abs() * reach + t.b.abs()
}

/// Heads writing `sum_k coef_w w_k rbar(u_k . x)` into `lam_row` and the same with
/// `v` into `del_row` (either may be omitted).
fn forward_heads(act: &ReluSum, layout: &SlotLayout, k: usize, lam_row: Option<usize>, del_row: Option<usize>) -> Result<Vec<crate::tfcore::AttentionHead>> {
    let d = layout.d();
    let dim = layout.dim();
    let (x, u, w, v, one) = (layout.range("x")?, layout.range("u")?, layout.range("dw")?, layout.range("dv")?, layout.row("one")?);
    let mut heads = Vec::new();
    for kk in 0..k {
        for t in &act.terms {
            let mut hb = HeadBuilder::new(dim);
            for c in 0..d {
                hb.coord(&[(x.start + c, t.a[0])], &[(u.start + kk * d + c, 1.0)])?;
            }
            if t.b != 0.0 {
                hb.coord(&[(one, t.b)], &[(one, 1.0)])?;
            }
            if let Some(r) = lam_row {
                hb.value(r, w.start + kk, t.c);
            }
            if let Some(r) = del_row {
                hb.value(r, v.start + kk, t.c);
            }
            heads.push(hb.build());
        }
    }
    Ok(heads)
}

/// Attention block writing `Lambda_bar` and `Delta_bar` into the `lam`, `del` rows.
pub fn build_forward_attn(act: &ReluSum, layout: &SlotLayout, k: usize) -> Result<Vec<crate::tfcore::AttentionHead>> {
    forward_heads(act, layout, k, Some(layout.row("lam")?), Some(layout.row("del")?))
}

/// MLP block writing the gated derivatives `g_Lambda` and `g_Delta`.
pub fn build_lossgrad_mlp(fits: &DannFits, layout: &SlotLayout) -> Result<(crate::tfcore::Mat, crate::tfcore::Mat)> {
    let dim = layout.dim();
    let (lam, del, glam, gdel) = (layout.row("lam")?, layout.row("del")?, layout.row("glam")?, layout.row("gdel")?);
    let (y, t, s, one) = (layout.row("y")?, layout.row("t")?, layout.row("s")?, layout.row("one")?);
    // Each unit: (input row, profile term, gate rows with coefficients, constant gate, output row).
    let mut units: Vec<(usize, &ReluTerm, Vec<(usize, f64)>, f64, usize)> = Vec::new();
    for (profile, is_g1) in [(&fits.g1, true), (&fits.g0, false)] {
        for term in &profile.terms {
            let g = gate_1d(term, fits.r_lam);
            if g == 0.0 || term.c == 0.0 {
                continue;
            }
            // Lambda: label q = y, source gate on t.
            let (mut rows_l, mut c_l) = (vec![(t, g)], -g);
            if is_g1 {
                rows_l.push((y, g));
                c_l -= g;
            } else {
                rows_l.push((y, -g));
            }
            units.push((lam, term, rows_l, c_l, glam));
            // Delta: label q = s - t, train gate on s.
            let (mut rows_d, mut c_d) = (vec![(s, g)], -g);
            if is_g1 {
                rows_d.push((s, g));
                rows_d.push((t, -g));
                c_d -= g;
            } else {
                rows_d.push((s, -g));
                rows_d.push((t, g));
            }
            units.push((del, term, rows_d, c_d, gdel));
        }
    }
    let mut w1 = MatBuilder::new(units.len(), dim);
    let mut w2 = MatBuilder::new(dim, units.len());
    for (m, (inp, term, gates, cst, out)) in units.iter().enumerate() {
        w1.add(m, *inp, term.a[0]);
        w1.add(m, one, term.b + cst);
        for &(r, v) in gates {
            w1.add(m, r, v);
        }
        w2.add(*out, m, term.c);
    }
    Ok((w1.build(), w2.build()))
}

/// Attention block applying `theta - eta * g_hat`.
pub fn build_gd_attn(fits: &DannFits, layout: &SlotLayout, st: &DannState, n: usize, n_prime: usize) -> Result<Vec<crate::tfcore::AttentionHead>> {
    let d = layout.d();
    let k = st.k();
    let dim = layout.dim();
    let (x, u, w, v) = (layout.range("x")?, layout.range("u")?, layout.range("dw")?, layout.range("dv")?);
    let (one, t, s, glam, gdel) = (layout.row("one")?, layout.row("t")?, layout.row("s")?, layout.row("glam")?, layout.row("gdel")?);
    let tt = (n + n_prime + 1) as f64;
    let (eta, lam) = (st.eta, st.lambda_tradeoff);
    let (nf, npf) = (n as f64, n_prime as f64);
    let mut heads = Vec::new();
    if eta == 0.0 {
        return Ok(heads);
    }
    // Gate on source tokens (1 - t) or target tokens (1 - (s - t)).
    let source_gate = |g: f64| -> (Vec<(usize, f64)>, Vec<(usize, f64)>) { (vec![(one, -g)], vec![(one, g), (t, -g)]) };
    let target_gate = |g: f64| -> (Vec<(usize, f64)>, Vec<(usize, f64)>) { (vec![(one, -g)], vec![(one, g), (s, -g), (t, g)]) };

    for kk in 0..k {
        let urow = |c: usize| u.start + kk * d + c;
        // Product families: p(head_k * g, u_k . x) x_j into u_k.
        let mut families: Vec<(usize, usize, f64, bool)> = vec![(w.start + kk, glam, -tt * eta / nf, true)];
        if lam != 0.0 {
            families.push((v.start + kk, gdel, tt * eta * lam / nf, true));
            families.push((v.start + kk, gdel, tt * eta * lam / npf, false));
        }
        for &(head_row, g_row, coef, on_source) in &families {
            for term in &fits.prod.terms {
                let gate = term.a[0].abs() * fits.s_box + term.a[1].abs() * fits.r1 + term.b.abs();
                if gate == 0.0 || term.c == 0.0 {
                    continue;
                }
                let sg = gate.sqrt();
                let mut hb = HeadBuilder::new(dim);
                if term.a[0] != 0.0 {
                    hb.coord(&[(head_row, term.a[0])], &[(g_row, 1.0)])?;
                }
                if term.a[1] != 0.0 {
                    for c in 0..d {
                        hb.coord(&[(urow(c), term.a[1])], &[(x.start + c, 1.0)])?;
                    }
                }
                if term.b != 0.0 {
                    hb.coord(&[(one, term.b)], &[(one, 1.0)])?;
                }
                let (qg, kg) = if on_source { source_gate(sg) } else { target_gate(sg) };
                hb.coord(&qg, &kg)?;
                for c in 0..d {
                    hb.value(urow(c), x.start + c, coef * term.c);
                }
                heads.push(hb.build());
            }
        }
        // Activation families: rbar(u_k . x) g into w_k (source only, via g) and v_k.
        let mut act_fams: Vec<(usize, usize, f64, Option<bool>)> = vec![(w.start + kk, glam, -tt * eta / nf, None)];
        if lam != 0.0 {
            act_fams.push((v.start + kk, gdel, -tt * eta * lam / nf, Some(true)));
            act_fams.push((v.start + kk, gdel, -tt * eta * lam / npf, Some(false)));
        }
        for &(out_row, g_row, coef, gate_kind) in &act_fams {
            for term in &fits.act.terms {
                if term.c == 0.0 {
                    continue;
                }
                let mut hb = HeadBuilder::new(dim);
                for c in 0..d {
                    hb.coord(&[(urow(c), term.a[0])], &[(x.start + c, 1.0)])?;
                }
                if term.b != 0.0 {
                    hb.coord(&[(one, term.b)], &[(one, 1.0)])?;
                }
                if let Some(on_source) = gate_kind {
                    let g = gate_1d(term, fits.r1);
                    if g == 0.0 {
                        continue;
                    }
                    let (qg, kg) = if on_source { source_gate(g.sqrt()) } else { target_gate(g.sqrt()) };
                    hb.coord(&qg, &kg)?;
                }
                hb.value(out_row, g_row, coef * term.c);
                heads.push(hb.build());
            }
        }
    }
    Ok(heads)
}

/// Residual field approximating `z -> z - Pi_B(z)` on the shell `B <= |z| <= B + width`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProjectionField {
    pub dim: usize,
    pub radius: f64,
    pub width: f64,
    pub directions: Vec<Vec<f64>>,
    pub levels: Vec<f64>,
    pub gammas: Vec<f64>,
    /// Measured sup of `|z - F(z) - Pi(z)|` over the shell.
    pub eps_proj: f64,
}

impl ProjectionField {
    pub fn residual(&self, z: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (beta, g) in self.levels.iter().zip(&self.gammas) {
            for th in &self.directions {
                let a = relu(dot(th, z) - beta);
                if a != 0.0 {
                    for (o, t) in out.iter_mut().zip(th) {
                        *o += g * a * t;
                    }
                }
            }
        }
        out
    }

    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        let r = self.residual(z);
        z.iter().zip(&r).map(|(a, b)| a - b).collect()
    }
}

fn unit_directions(m: usize, count: usize) -> Vec<Vec<f64>> {
    match m {
        1 => vec![vec![1.0], vec![-1.0]],
        2 => (0..count)
            .map(|i| {
                let th = 2.0 * std::f64::consts::PI * i as f64 / count as f64;
                vec![th.cos(), th.sin()]
            })
            .collect(),
        _ => {
            // Deterministic quasi-uniform points: normalised Halton-style Gaussians.
            use rand::SeedableRng;
            use rand_distr::{Distribution, StandardNormal};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(m as u64);
            let mut out = Vec::new();
            for _ in 0..count * m {
                let v: Vec<f64> = (0..m).map(|_| StandardNormal.sample(&mut rng)).collect();
                let n = norm2(&v);
                out.push(v.into_iter().map(|x| x / n).collect());
            }
            out
        }
    }
}

fn shell_points(m: usize, radius: f64, width: f64, n_r: usize, n_dir: usize) -> Vec<Vec<f64>> {
    let dirs = match m {
        1 => vec![vec![1.0], vec![-1.0]],
        2 => unit_directions(2, n_dir),
        _ => unit_directions(m, n_dir),
    };
    let mut pts = Vec::new();
    for i in 0..=n_r {
        let r = radius + width * i as f64 / n_r as f64;
        for dvec in &dirs {
            pts.push(dvec.iter().map(|c| c * r).collect());
        }
    }
    pts
}

fn exact_projection(z: &[f64], b: f64) -> Vec<f64> {
    let n = norm2(z);
    if n > b {
        z.iter().map(|v| v * b / n).collect()
    } else {
        z.to_vec()
    }
}

/// Fit a residual field on the shell of the `m`-dimensional ball of radius `b`.
pub fn fit_projection(m: usize, b: f64, width: f64, n_dirs: usize, n_levels: usize) -> Result<ProjectionField> {
    if width <= 0.0 {
        return Ok(ProjectionField { dim: m, radius: b, width: 0.0, directions: vec![], levels: vec![], gammas: vec![], eps_proj: 0.0 });
    }
    if m == 1 {
        let f = ProjectionField {
            dim: 1,
            radius: b,
            width,
            directions: vec![vec![1.0], vec![-1.0]],
            levels: vec![b],
            gammas: vec![1.0],
            eps_proj: 0.0,
        };
        return Ok(f);
    }
    let directions = unit_directions(m, n_dirs);
    let levels: Vec<f64> = (0..n_levels).map(|l| b + width * l as f64 / n_levels as f64).collect();
    let train = shell_points(m, b, width, 40, 4 * n_dirs);
    let base = ProjectionField { dim: m, radius: b, width, directions: directions.clone(), levels: levels.clone(), gammas: vec![0.0; n_levels], eps_proj: 0.0 };
    let rows = train.len() * m;
    let mut a = nalgebra::DMatrix::zeros(rows, n_levels);
    let mut rhs = nalgebra::DVector::zeros(rows);
    for (p, z) in train.iter().enumerate() {
        let target: Vec<f64> = z.iter().zip(exact_projection(z, b)).map(|(x, y)| x - y).collect();
        for (l, beta) in levels.iter().enumerate() {
            let mut one = base.clone();
            one.levels = vec![*beta];
            one.gammas = vec![1.0];
            let f = one.residual(z);
            for c in 0..m {
                a[(p * m + c, l)] = f[c];
            }
        }
        for c in 0..m {
            rhs[p * m + c] = target[c];
        }
    }
    let svd = a.svd(true, true);
    let gam = svd.solve(&rhs, 1e-12).map_err(|e| Error::Solver(e.to_string()))?;
    let mut field = ProjectionField { gammas: gam.iter().copied().collect(), ..base };
    let test = shell_points(m, b, width, 200, 16 * n_dirs);
    let mut err: f64 = 0.0;
    for z in &test {
        let p = exact_projection(z, b);
        let q = field.apply(z);
        err = err.max(norm2(&p.iter().zip(&q).map(|(x, y)| x - y).collect::<Vec<_>>()));
    }
    field.eps_proj = err;
    Ok(field)
}

/// Projection fields per parameter block.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProjectionSet {
    pub u: ProjectionField,
    pub w: ProjectionField,
    pub v: ProjectionField,
}

/// MLP block projecting each block onto its ball and clearing the scratch rows.
pub fn build_projection_mlp(proj: &ProjectionSet, layout: &SlotLayout, k: usize) -> Result<(crate::tfcore::Mat, crate::tfcore::Mat)> {
    let d = layout.d();
    let dim = layout.dim();
    let one = layout.row("one")?;
    let (u, w, v) = (layout.range("u")?, layout.range("dw")?, layout.range("dv")?);
    let mut blocks: Vec<(Vec<usize>, &ProjectionField)> = Vec::new();
    for kk in 0..k {
        blocks.push(((0..d).map(|c| u.start + kk * d + c).collect(), &proj.u));
    }
    blocks.push((w.collect(), &proj.w));
    blocks.push((v.collect(), &proj.v));
    let mut entries1 = Vec::new();
    let mut entries2 = Vec::new();
    let mut m = 0;
    for (rows, field) in &blocks {
        for (beta, g) in field.levels.iter().zip(&field.gammas) {
            if *g == 0.0 {
                continue;
            }
            for th in &field.directions {
                for (r, c) in rows.iter().zip(th) {
                    if *c != 0.0 {
                        entries1.push((m, *r, *c));
                    }
                }
                entries1.push((m, one, -beta));
                for (r, c) in rows.iter().zip(th) {
                    if *c != 0.0 {
                        entries2.push((*r, m, -g * c));
                    }
                }
                m += 1;
            }
        }
    }
    for name in ["lam", "del", "glam", "gdel"] {
        let r = layout.row(name)?;
        entries1.push((m, r, 1.0));
        entries2.push((r, m, -1.0));
        entries1.push((m + 1, r, -1.0));
        entries2.push((r, m + 1, 1.0));
        m += 2;
    }
    Ok((
        crate::tfcore::Mat::from_triplets(m, dim, entries1),
        crate::tfcore::Mat::from_triplets(dim, m, entries2),
    ))
}

/// Constants entering the per-step bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DannConstants {
    pub b_x: f64,
    pub b_r: f64,
    pub l_r: f64,
    pub eps_r: f64,
    pub eps_gamma: f64,
    pub eps_p: f64,
    pub eps_proj_u: f64,
    pub eps_proj_w: f64,
    pub eps_proj_v: f64,
    pub r1: f64,
    pub r_lam: f64,
    pub s_box: f64,
    /// The closed-form bound with the global constants `L_gamma = 1/delta^2`.
    pub eps_step_formula: f64,
}

#[derive(Clone, Debug)]
pub struct DannBuild {
    pub transformer: Transformer,
    pub fits: DannFits,
    pub projection: ProjectionSet,
    pub st0: DannState,
    pub reference: DannRun,
    pub constants: DannConstants,
    pub steps: usize,
    pub heads_per_step: usize,
}

impl DannBuild {
    pub fn layout(&self) -> &SlotLayout {
        &self.transformer.layout
    }
}

/// Sup of `|G'|` over `[lo, hi]` for both clamped profiles.
fn local_gamma_lipschitz(lo: f64, hi: f64, dl: f64) -> f64 {
    let a = lo.max(dl);
    let b = hi.min(1.0 - dl);
    if a > b {
        return 0.0;
    }
    (1.0 / (a * a)).max(1.0 / ((1.0 - b) * (1.0 - b)))
}

/// Per-block bounds `(eps_u, eps_w, eps_v)` at state `st`.
pub fn step_bounds(pair: &DomainPair, st: &DannState, c: &DannConstants) -> (f64, f64, f64) {
    let k = st.k() as f64;
    let e_f = st.w.iter().map(|x| x.abs()).sum::<f64>().max(st.v.iter().map(|x| x.abs()).sum::<f64>()) * c.eps_r;
    let mut lg: f64 = 0.0;
    let mut b_g: f64 = 0.0;
    let dl = st.clamp_delta;
    let xs = pair.source.iter().map(|s| &s.x).chain(pair.target.iter());
    for x in xs {
        for out in [st.label_output(x), st.domain_output(x)] {
            lg = lg.max(local_gamma_lipschitz(out - e_f, out + e_f, dl));
        }
    }
    let e_g = c.eps_gamma + lg * e_f;
    b_g = b_g.max(1.0 / dl + e_g);
    let bw = norm2(&st.w).min(st.b_w);
    let bv = norm2(&st.v).min(st.b_v);
    let lam = st.lambda_tradeoff;
    let eps_u = k.sqrt() * c.b_x * ((c.eps_p + bw * c.l_r * e_g) + 2.0 * lam * (c.eps_p + bv * c.l_r * e_g));
    let eps_w = k.sqrt() * (c.eps_r * b_g + c.b_r * e_g);
    let eps_v = 2.0 * lam * k.sqrt() * (c.eps_r * b_g + c.b_r * e_g);
    (eps_u, eps_w, eps_v)
}

/// Build `2L + 1` layers for the run starting at `st0`.
pub fn build_dann_transformer(pair: &DomainPair, st0: &DannState, cfg: &DannConfig) -> Result<DannBuild> {
    if st0.d() != pair.d() {
        return Err(Error::Dimension("DANN state and data differ in dimension".into()));
    }
    let k = st0.k();
    let layout = dann_layout(pair.d(), k, &cfg.out_slot)?;
    let reference = dann_run(pair, st0, cfg.steps)?;
    let b_x = pair.bounds.b_x;

    // Box for the product fit: twice the largest |w_k g| seen on the reference run.
    let dl = st0.clamp_delta;
    let mut s_max: f64 = 0.0;
    let mut g_max = [0.0f64; 3];
    for st in &reference.trace {
        for x in pair.source.iter().map(|s| (&s.x, Some(s.y))).chain(pair.target.iter().map(|x| (x, None))) {
            let gd = crate::uda_ref::gamma_and_deriv(st.domain_output(x.0), if x.1.is_some() { 0.0 } else { 1.0 }, dl).1;
            for kk in 0..k {
                s_max = s_max.max((st.v[kk] * gd).abs());
            }
            if let Some(y) = x.1 {
                let gl = crate::uda_ref::gamma_and_deriv(st.label_output(x.0), y, dl).1;
                for kk in 0..k {
                    s_max = s_max.max((st.w[kk] * gl).abs());
                }
            }
        }
        let g = dann_grads(pair, st);
        g_max[0] = g_max[0].max(g.g_u.iter().map(|r| norm2(r)).fold(0.0, f64::max));
        g_max[1] = g_max[1].max(norm2(&g.g_w));
        g_max[2] = g_max[2].max(norm2(&g.g_v));
    }
    let s_box = if s_max > 0.0 { 2.0 * s_max } else { 1.0 };
    let fits = fit_dann(st0, b_x, s_box, cfg).map_err(|e| Error::build("scalar fits", e))?;
    let (b_r, l_r) = act_bounds(st0.activation, fits.r1);

    let proj = ProjectionSet {
        u: fit_projection(pair.d(), st0.b_u, 2.0 * st0.eta * g_max[0], cfg.proj_dirs, cfg.proj_levels)?,
        w: fit_projection(k, st0.b_w, 2.0 * st0.eta * g_max[1], cfg.proj_dirs, cfg.proj_levels)?,
        v: fit_projection(k, st0.b_v, 2.0 * st0.eta * g_max[2], cfg.proj_dirs, cfg.proj_levels)?,
    };

    let dim = layout.dim();
    let fwd = build_forward_attn(&fits.act, &layout, k).map_err(|e| Error::build("forward attention", e))?;
    let (lw1, lw2) = build_lossgrad_mlp(&fits, &layout).map_err(|e| Error::build("loss-gradient MLP", e))?;
    let gd = build_gd_attn(&fits, &layout, st0, pair.n(), pair.n_prime()).map_err(|e| Error::build("update attention", e))?;
    let (pw1, pw2) = build_projection_mlp(&proj, &layout, k).map_err(|e| Error::build("projection MLP", e))?;
    let heads_per_step = fwd.len() + gd.len();
    let layer_a = TransformerLayer { heads: fwd, w1: lw1, w2: lw2 };
    let layer_b = TransformerLayer { heads: gd, w1: pw1, w2: pw2 };
    let mut layers = Vec::with_capacity(2 * cfg.steps + 1);
    for _ in 0..cfg.steps {
        layers.push(layer_a.clone());
        layers.push(layer_b.clone());
    }
    let out_row = layout.row(&cfg.out_slot)?;
    layers.push(TransformerLayer::attention(forward_heads(&fits.act, &layout, k, Some(out_row), None)?, dim));
    let mut transformer = Transformer::new(layers, layout.clone());
    transformer.readout_row = out_row;

    let kf = k as f64;
    let l_gamma = 1.0 / (dl * dl);
    let eps_gr = fits.eps_gamma() + st0.b_u * l_gamma * fits.eps_r();
    let eps_step_formula = kf.sqrt() * b_x * (fits.eps_p() + st0.b_u * l_r * eps_gr)
        + 2.0 * kf.sqrt() * ((1.0 / dl) * fits.eps_r() + b_r * eps_gr);
    let constants = DannConstants {
        b_x,
        b_r,
        l_r,
        eps_r: fits.eps_r(),
        eps_gamma: fits.eps_gamma(),
        eps_p: fits.eps_p(),
        eps_proj_u: proj.u.eps_proj,
        eps_proj_w: proj.w.eps_proj,
        eps_proj_v: proj.v.eps_proj,
        r1: fits.r1,
        r_lam: fits.r_lam,
        s_box: fits.s_box,
        eps_step_formula,
    };
    Ok(DannBuild { transformer, fits, projection: proj, st0: st0.clone(), reference, constants, steps: cfg.steps, heads_per_step })
}

/// One row of the per-step deviation log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepCheck {
    pub step: usize,
    pub du: f64,
    pub dw: f64,
    pub dv: f64,
    pub bound_u: f64,
    pub bound_w: f64,
    pub bound_v: f64,
    pub eps_step: f64,
    pub amplification: f64,
    /// Certified bound on the distance to the exact reference trajectory.
    pub cumulative: f64,
    /// Actual distance to the exact reference trajectory.
    pub distance: f64,
    pub scratch_clear: bool,
    pub in_fit_domain: bool,
}

impl StepCheck {
    pub fn passes(&self) -> [bool; 3] {
        [self.du <= self.bound_u, self.dw <= self.bound_w, self.dv <= self.bound_v]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DannTfRun {
    pub prediction: f64,
    pub reference_prediction: f64,
    pub steps: Vec<StepCheck>,
    pub prediction_bound: f64,
    pub final_state: DannState,
}

impl DannTfRun {
    pub fn block_checks(&self) -> usize {
        self.steps.len() * 3
    }

    pub fn block_passes(&self) -> usize {
        self.steps.iter().map(|s| s.passes().iter().filter(|b| **b).count()).sum()
    }
}

fn block_diff(a: &DannState, b: &DannState) -> (f64, f64, f64) {
    let du = a.u.iter().flatten().zip(b.u.iter().flatten()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let dw = norm2(&a.w.iter().zip(&b.w).map(|(x, y)| x - y).collect::<Vec<_>>());
    let dv = norm2(&a.v.iter().zip(&b.v).map(|(x, y)| x - y).collect::<Vec<_>>());
    (du, dw, dv)
}

fn state_dist(a: &DannState, b: &DannState) -> f64 {
    let (u, w, v) = block_diff(a, b);
    (u * u + w * w + v * v).sqrt()
}

/// Run the transformer step by step, checking every block against the exact
/// projected update of the transformer's own previous state.
pub fn run_dann(build: &DannBuild, pair: &DomainPair) -> Result<DannTfRun> {
    let tf = &build.transformer;
    let mut h = encode_dann(pair, &build.st0, &tf.layout)?;
    let q = h.query_col();
    let c = &build.constants;
    let mut st = build.st0.clone();
    let mut cumulative = 0.0;
    let mut steps = Vec::with_capacity(build.steps);
    let scratch: Vec<usize> = ["lam", "del", "glam", "gdel"].iter().map(|n| tf.layout.row(n)).collect::<Result<_>>()?;
    for l in 0..build.steps {
        let mut in_fit_domain = true;
        let mid = forward_range(tf, &h, 2 * l..2 * l + 1)?;
        for col in 0..mid.tokens() {
            let gl = mid.h[(tf.layout.row("glam")?, col)];
            let gd = mid.h[(tf.layout.row("gdel")?, col)];
            for kk in 0..st.k() {
                if (st.w[kk] * gl).abs() > c.s_box || (st.v[kk] * gd).abs() > c.s_box {
                    in_fit_domain = false;
                }
            }
        }
        h = forward_range(tf, &mid, 2 * l + 1..2 * l + 2)?;
        let next = read_state(&h, &build.st0, q)?;
        let exact = dann_step(pair, &st);
        let (du, dw, dv) = block_diff(&next, &exact);
        let (eu, ew, ev) = step_bounds(pair, &st, c);
        let eta = st.eta;
        let reference_next = &build.reference.trace[l + 1];
        let amplification = {
            let before = state_dist(&st, &build.reference.trace[l]);
            if before > 0.0 {
                state_dist(&exact, reference_next) / before
            } else {
                0.0
            }
        };
        let bu = eta * eu + c.eps_proj_u * (st.k() as f64).sqrt();
        let bw = eta * ew + c.eps_proj_w;
        let bv = eta * ev + c.eps_proj_v;
        let injected = (bu * bu + bw * bw + bv * bv).sqrt();
        cumulative = amplification.max(1.0) * cumulative + injected;
        let scratch_clear = scratch.iter().all(|&r| (0..h.tokens()).all(|col| h.h[(r, col)] == 0.0));
        steps.push(StepCheck {
            step: l + 1,
            du,
            dw,
            dv,
            bound_u: bu,
            bound_w: bw,
            bound_v: bv,
            eps_step: eu.max(ew).max(ev),
            amplification,
            cumulative,
            distance: state_dist(&next, reference_next),
            scratch_clear,
            in_fit_domain,
        });
        st = next;
    }
    let out = forward_range(tf, &h, 2 * build.steps..tf.depth())?;
    let prediction = read_output(tf, &out)?;
    let k = st.k() as f64;
    let xq = norm2(&pair.query);
    let w1: f64 = st.w.iter().map(|x| x.abs()).sum();
    let prediction_bound = w1 * c.eps_r + k.sqrt() * c.b_r * cumulative + st.b_w * c.l_r * xq * cumulative + 1e-12;
    Ok(DannTfRun { prediction, reference_prediction: build.reference.prediction, steps, prediction_bound, final_state: st })
}

/// Write the per-step log as CSV: `step, du, dw, dv, bound`.
pub fn write_step_csv(run: &DannTfRun, path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "du", "dw", "dv", "bound"])?;
    for s in &run.steps {
        let bound = s.bound_u.max(s.bound_w).max(s.bound_v);
        w.write_record([s.step.to_string(), format!("{:e}", s.du), format!("{:e}", s.dw), format!("{:e}", s.dv), format!("{bound:e}")])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_inside_ball_is_identity() {
        let f = fit_projection(2, 1.0, 0.2, 32, 6).unwrap();
        assert_eq!(f.apply(&[0.3, -0.5]), vec![0.3, -0.5]);
    }

    #[test]
    fn one_dimensional_projection_is_exact_clip() {
        let f = fit_projection(1, 2.0, 1.0, 32, 6).unwrap();
        assert_eq!(f.apply(&[2.5]), vec![2.0]);
        assert_eq!(f.apply(&[-2.7]), vec![-2.0]);
    }

    #[test]
    fn local_lipschitz_vanishes_on_flat_parts() {
        assert_eq!(local_gamma_lipschitz(-1.0, 0.05, 0.1), 0.0);
        assert!((local_gamma_lipschitz(0.2, 0.3, 0.1) - 25.0).abs() < 1e-12);
    }
}
