//! Transformer data model and forward pass with ReLU attention.
//!
//! A token matrix `H` is `D x T`; column `i` is token `h_i`. One layer applies
//!
//! ```text
//! attention:  h_i <- h_i + (1/T) sum_j sum_m ReLU(<Q_m h_i, K_m h_j>) V_m h_j
//! mlp:        h_i <- h_i + W2 ReLU(W1 h_i)
//! ```
//!
//! Matrices are kept in coordinate form. The forward pass evaluates the dense
//! formula but skips entries that are exactly zero.

use std::collections::BTreeMap;
use std::ops::Range;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::relu_approx::relu;

/// A named contiguous row range.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

/// Named row ranges of a token matrix. The five base slots `x`, `y`, `t`, `s`,
/// `one` come first; construction workspaces follow in insertion order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotLayout {
    slots: Vec<Slot>,
}

pub const BASE_SLOTS: [&str; 5] = ["x", "y", "t", "s", "one"];

impl SlotLayout {
    /// `x` (d rows), `y`, `t`, `s`, `one`.
    pub fn base(d: usize) -> Self {
        let mut l = SlotLayout { slots: Vec::new() };
        l.push("x", d).expect("fresh layout");
        for name in &BASE_SLOTS[1..] {
            l.push(name, 1).expect("fresh layout");
        }
        l
    }

    /// Build from explicit slots, checking that ranges are disjoint and cover `0..D`.
    pub fn from_slots(mut slots: Vec<Slot>) -> Result<Self> {
        slots.sort_by_key(|s| s.start);
        let mut next = 0;
        for s in &slots {
            if s.start != next {
                return Err(Error::Layout(format!(
                    "slot `{}` starts at {} but the previous range ends at {next}",
                    s.name, s.start
                )));
            }
            next = s.start + s.len;
        }
        let mut names: Vec<&str> = slots.iter().map(|s| s.name.as_str()).collect();
        names.sort();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Layout("duplicate slot name".into()));
        }
        Ok(SlotLayout { slots })
    }

    /// Append a workspace slot.
    pub fn push(&mut self, name: &str, len: usize) -> Result<()> {
        if self.slots.iter().any(|s| s.name == name) {
            return Err(Error::Layout(format!("slot `{name}` already present")));
        }
        let start = self.dim();
        self.slots.push(Slot { name: name.to_string(), start, len });
        Ok(())
    }

    pub fn with(mut self, name: &str, len: usize) -> Result<Self> {
        self.push(name, len)?;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.slots.last().map(|s| s.start + s.len).unwrap_or(0)
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn has(&self, name: &str) -> bool {
        self.slots.iter().any(|s| s.name == name)
    }

    pub fn slot(&self, name: &str) -> Result<&Slot> {
        self.slots
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Layout(format!("no slot named `{name}`")))
    }

    pub fn range(&self, name: &str) -> Result<Range<usize>> {
        let s = self.slot(name)?;
        Ok(s.start..s.start + s.len)
    }

    /// Row of a one-row slot, or of element `idx` of a wider slot.
    pub fn row(&self, name: &str) -> Result<usize> {
        self.row_at(name, 0)
    }

    pub fn row_at(&self, name: &str, idx: usize) -> Result<usize> {
        let s = self.slot(name)?;
        if idx >= s.len {
            return Err(Error::Index(format!("slot `{name}` has {} rows, asked for {idx}", s.len)));
        }
        Ok(s.start + idx)
    }

    /// Feature dimension `d` (length of the `x` slot).
    pub fn d(&self) -> usize {
        self.slot("x").map(|s| s.len).unwrap_or(0)
    }

    /// Union of layouts by slot name: the first layout fixes the order, new names
    /// are appended. A name claimed with two different lengths is an error.
    pub fn union(layouts: &[&SlotLayout]) -> Result<SlotLayout> {
        let mut out = SlotLayout { slots: Vec::new() };
        for l in layouts {
            for s in &l.slots {
                match out.slots.iter().find(|o| o.name == s.name) {
                    Some(o) if o.len != s.len => {
                        return Err(Error::Layout(format!(
                            "overlapping workspace claims on `{}` ({} vs {} rows)",
                            s.name, o.len, s.len
                        )))
                    }
                    Some(_) => {}
                    None => out.push(&s.name, s.len)?,
                }
            }
        }
        Ok(out)
    }

    /// Row map from this layout into `target` (by slot name).
    pub fn embedding_into(&self, target: &SlotLayout) -> Result<Vec<usize>> {
        let mut map = vec![usize::MAX; self.dim()];
        for s in &self.slots {
            let t = target.slot(&s.name).map_err(|_| {
                Error::Layout(format!("embedding not injective: `{}` missing in target", s.name))
            })?;
            if t.len != s.len {
                return Err(Error::Layout(format!(
                    "embedding not injective: `{}` has {} rows in the part and {} in the target",
                    s.name, s.len, t.len
                )));
            }
            for k in 0..s.len {
                map[s.start + k] = t.start + k;
            }
        }
        Ok(map)
    }
}

/// Sparse matrix in coordinate form: entries sorted by (row, col), no duplicates,
/// no explicit zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    entries: Vec<(usize, usize, f64)>,
}

/// Accumulating builder for [`Mat`].
#[derive(Clone, Debug)]
pub struct MatBuilder {
    rows: usize,
    cols: usize,
    map: BTreeMap<(usize, usize), f64>,
}

impl MatBuilder {
    pub fn new(rows: usize, cols: usize) -> Self {
        MatBuilder { rows, cols, map: BTreeMap::new() }
    }

    /// Add `v` to entry `(r, c)`.
    pub fn add(&mut self, r: usize, c: usize, v: f64) -> &mut Self {
        assert!(r < self.rows && c < self.cols, "entry ({r},{c}) outside {}x{}", self.rows, self.cols);
        *self.map.entry((r, c)).or_insert(0.0) += v;
        self
    }

    pub fn build(self) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            entries: self.map.into_iter().filter(|(_, v)| *v != 0.0).map(|((r, c), v)| (r, c, v)).collect(),
        }
    }
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, entries: Vec::new() }
    }

    pub fn from_triplets<I: IntoIterator<Item = (usize, usize, f64)>>(rows: usize, cols: usize, it: I) -> Self {
        let mut b = MatBuilder::new(rows, cols);
        for (r, c, v) in it {
            b.add(r, c, v);
        }
        b.build()
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut entries = Vec::new();
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                let v = m[(r, c)];
                if v != 0.0 {
                    entries.push((r, c, v));
                }
            }
        }
        Mat { rows: m.nrows(), cols: m.ncols(), entries }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.rows, self.cols);
        for &(r, c, v) in &self.entries {
            m[(r, c)] = v;
        }
        m
    }

    pub fn identity(n: usize) -> Self {
        Mat { rows: n, cols: n, entries: (0..n).map(|i| (i, i, 1.0)).collect() }
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn is_zero(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.entries
            .binary_search_by(|e| (e.0, e.1).cmp(&(r, c)))
            .map(|i| self.entries[i].2)
            .unwrap_or(0.0)
    }

    pub fn scaled(&self, k: f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            entries: self.entries.iter().filter(|_| k != 0.0).map(|&(r, c, v)| (r, c, v * k)).collect(),
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.rows];
        for &(r, c, v) in &self.entries {
            y[r] += v * x[c];
        }
        y
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|e| e.2.is_finite())
    }

    /// Re-index rows and columns through the given maps into a larger matrix.
    pub fn reindex(&self, row_map: &[usize], col_map: &[usize], rows: usize, cols: usize) -> Mat {
        Mat::from_triplets(rows, cols, self.entries.iter().map(|&(r, c, v)| (row_map[r], col_map[c], v)))
    }

    /// Entries grouped by row: `(row, [(col, val)])`.
    fn row_groups(&self) -> Vec<(usize, Vec<(usize, f64)>)> {
        let mut out: Vec<(usize, Vec<(usize, f64)>)> = Vec::new();
        for &(r, c, v) in &self.entries {
            match out.last_mut() {
                Some((lr, g)) if *lr == r => g.push((c, v)),
                _ => out.push((r, vec![(c, v)])),
            }
        }
        out
    }

    /// Operator 2-norm by power iteration on the Gram matrix of the compacted
    /// nonzero block (relative tolerance 1e-12 on the eigenvalue).
    pub fn op_norm(&self) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        let mut rset: Vec<usize> = self.entries.iter().map(|e| e.0).collect();
        let mut cset: Vec<usize> = self.entries.iter().map(|e| e.1).collect();
        rset.sort_unstable();
        rset.dedup();
        cset.sort_unstable();
        cset.dedup();
        let mut a = DMatrix::<f64>::zeros(rset.len(), cset.len());
        for &(r, c, v) in &self.entries {
            let ri = rset.binary_search(&r).unwrap();
            let ci = cset.binary_search(&c).unwrap();
            a[(ri, ci)] = v;
        }
        let g = if a.ncols() <= a.nrows() { a.transpose() * &a } else { &a * a.transpose() };
        power_iteration(&g).sqrt()
    }
}

/// Largest eigenvalue of a symmetric positive semidefinite matrix.
pub fn power_iteration(g: &DMatrix<f64>) -> f64 {
    let n = g.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut x = nalgebra::DVector::from_fn(n, |i, _| 1.0 + 1e-3 * ((i * 7919) % 101) as f64);
    x /= x.norm();
    let mut lam = 0.0;
    for _ in 0..20_000 {
        let y = g * &x;
        let ny = y.norm();
        if ny == 0.0 {
            return 0.0;
        }
        let new_lam = x.dot(&y);
        x = y / ny;
        if (new_lam - lam).abs() <= 1e-12 * new_lam.abs() {
            return new_lam.max(0.0);
        }
        lam = new_lam;
    }
    lam.max(0.0)
}

/// One attention head (`D x D` matrices).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionHead {
    pub q: Mat,
    pub k: Mat,
    pub v: Mat,
}

impl AttentionHead {
    pub fn new(q: Mat, k: Mat, v: Mat) -> Self {
        AttentionHead { q, k, v }
    }
}

/// Assembles a head one inner-product coordinate at a time: coordinate `c` of
/// `Q h_i` is `sum q_val * h_i[q_row]` and of `K h_j` is `sum k_val * h_j[k_row]`.
#[derive(Clone, Debug)]
pub struct HeadBuilder {
    d: usize,
    q: MatBuilder,
    k: MatBuilder,
    v: MatBuilder,
    next: usize,
}

impl HeadBuilder {
    pub fn new(d: usize) -> Self {
        HeadBuilder { d, q: MatBuilder::new(d, d), k: MatBuilder::new(d, d), v: MatBuilder::new(d, d), next: 0 }
    }

    pub fn coord(&mut self, q: &[(usize, f64)], k: &[(usize, f64)]) -> Result<&mut Self> {
        if self.next >= self.d {
            return Err(Error::Dimension(format!("head needs more than D = {} inner-product coordinates", self.d)));
        }
        for &(r, v) in q {
            self.q.add(self.next, r, v);
        }
        for &(r, v) in k {
            self.k.add(self.next, r, v);
        }
        self.next += 1;
        Ok(self)
    }

    /// Adds `v * h_j[in_row]` to output row `out_row`.
    pub fn value(&mut self, out_row: usize, in_row: usize, v: f64) -> &mut Self {
        self.v.add(out_row, in_row, v);
        self
    }

    pub fn build(self) -> AttentionHead {
        AttentionHead { q: self.q.build(), k: self.k.build(), v: self.v.build() }
    }
}

/// Attention block followed by an MLP block, both with skip connections.
/// `w1` is `D' x D`, `w2` is `D x D'`; `D' = 0` gives a pure attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerLayer {
    pub heads: Vec<AttentionHead>,
    pub w1: Mat,
    pub w2: Mat,
}

impl TransformerLayer {
    pub fn attention(heads: Vec<AttentionHead>, dim: usize) -> Self {
        TransformerLayer { heads, w1: Mat::zeros(0, dim), w2: Mat::zeros(dim, 0) }
    }

    pub fn mlp(w1: Mat, w2: Mat) -> Self {
        TransformerLayer { heads: Vec::new(), w1, w2 }
    }

    pub fn identity(dim: usize) -> Self {
        Self::attention(Vec::new(), dim)
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    /// `max_m max(||Q||, ||K||) + sum_m ||V|| + ||W1|| + ||W2||`.
    pub fn norm(&self) -> f64 {
        let qk = self.heads.iter().map(|h| h.q.op_norm().max(h.k.op_norm())).fold(0.0, f64::max);
        let v: f64 = self.heads.iter().map(|h| h.v.op_norm()).sum();
        qk + v + self.w1.op_norm() + self.w2.op_norm()
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        for (m, h) in self.heads.iter().enumerate() {
            for (name, mat) in [("Q", &h.q), ("K", &h.k), ("V", &h.v)] {
                if mat.nrows() != d || mat.ncols() != d {
                    return Err(Error::Dimension(format!(
                        "head {m} {name} is {}x{}, token dimension is {d}",
                        mat.nrows(),
                        mat.ncols()
                    )));
                }
            }
        }
        if self.w1.ncols() != d || self.w2.nrows() != d || self.w1.nrows() != self.w2.ncols() {
            return Err(Error::Dimension(format!(
                "MLP shapes W1 {}x{}, W2 {}x{} inconsistent with D = {d}",
                self.w1.nrows(),
                self.w1.ncols(),
                self.w2.nrows(),
                self.w2.ncols()
            )));
        }
        Ok(())
    }
}

/// Encoded input: `D x (N+1)` matrix plus its layout and domain sizes.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMatrix {
    pub h: DMatrix<f64>,
    pub layout: SlotLayout,
    pub n: usize,
    pub n_prime: usize,
}

impl TokenMatrix {
    pub fn tokens(&self) -> usize {
        self.h.ncols()
    }

    pub fn query_col(&self) -> usize {
        self.h.ncols() - 1
    }

    /// Values of a slot in column `col`.
    pub fn slot_col(&self, name: &str, col: usize) -> Result<Vec<f64>> {
        if col >= self.h.ncols() {
            return Err(Error::Index(format!("column {col} of {}", self.h.ncols())));
        }
        Ok(self.layout.range(name)?.map(|r| self.h[(r, col)]).collect())
    }

    pub fn set_slot_col(&mut self, name: &str, col: usize, vals: &[f64]) -> Result<()> {
        let range = self.layout.range(name)?;
        if vals.len() != range.len() {
            return Err(Error::Dimension(format!("slot `{name}` has {} rows, got {}", range.len(), vals.len())));
        }
        for (r, v) in range.zip(vals) {
            self.h[(r, col)] = *v;
        }
        Ok(())
    }

    pub fn get(&self, name: &str, idx: usize, col: usize) -> Result<f64> {
        Ok(self.h[(self.layout.row_at(name, idx)?, col)])
    }
}

/// Row-major copy of `h` for cache-friendly row access.
fn row_major(h: &DMatrix<f64>) -> Vec<f64> {
    let (d, t) = h.shape();
    let mut out = vec![0.0; d * t];
    for i in 0..t {
        for r in 0..d {
            out[r * t + i] = h[(r, i)];
        }
    }
    out
}

fn project_rows(groups: &[(usize, Vec<(usize, f64)>)], rows: &[f64], t: usize) -> Vec<Vec<f64>> {
    groups
        .iter()
        .map(|(_, g)| {
            let mut out = vec![0.0; t];
            for &(c, v) in g {
                let src = &rows[c * t..(c + 1) * t];
                for i in 0..t {
                    out[i] += v * src[i];
                }
            }
            out
        })
        .collect()
}

fn check_finite_matrix(h: &DMatrix<f64>, layer: usize, block: &str) -> Result<()> {
    if h.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{block} output of layer {layer}")))
    }
}

fn attn_core(layer: &TransformerLayer, h: &TokenMatrix, idx: usize) -> Result<TokenMatrix> {
    let (d, t) = h.h.shape();
    layer.check_dim(d)?;
    if layer.heads.is_empty() {
        return Ok(h.clone());
    }
    let rows = row_major(&h.h);
    let mut acc = vec![0.0; d * t];
    let mut scores = vec![0.0; t * t];
    for head in &layer.heads {
        if head.v.is_zero() {
            continue;
        }
        let qg = head.q.row_groups();
        let kg = head.k.row_groups();
        // Coordinates where both Q h_i and K h_j can be nonzero.
        let mut qsel = Vec::new();
        let mut ksel = Vec::new();
        let (mut a, mut b) = (0, 0);
        while a < qg.len() && b < kg.len() {
            match qg[a].0.cmp(&kg[b].0) {
                std::cmp::Ordering::Less => a += 1,
                std::cmp::Ordering::Greater => b += 1,
                std::cmp::Ordering::Equal => {
                    qsel.push(qg[a].clone());
                    ksel.push(kg[b].clone());
                    a += 1;
                    b += 1;
                }
            }
        }
        if qsel.is_empty() {
            continue;
        }
        let qh = project_rows(&qsel, &rows, t);
        let kh = project_rows(&ksel, &rows, t);
        scores.iter_mut().for_each(|s| *s = 0.0);
        for (qc, kc) in qh.iter().zip(&kh) {
            for i in 0..t {
                let qi = qc[i];
                if qi == 0.0 {
                    continue;
                }
                let srow = &mut scores[i * t..(i + 1) * t];
                for j in 0..t {
                    srow[j] += qi * kc[j];
                }
            }
        }
        scores.iter_mut().for_each(|s| *s = relu(*s));
        let vg = head.v.row_groups();
        let vh = project_rows(&vg, &rows, t);
        for ((r, _), vr) in vg.iter().zip(&vh) {
            let out = &mut acc[r * t..(r + 1) * t];
            for i in 0..t {
                let srow = &scores[i * t..(i + 1) * t];
                let mut s = 0.0;
                for j in 0..t {
                    s += srow[j] * vr[j];
                }
                out[i] += s;
            }
        }
    }
    let mut out = h.clone();
    let tf = t as f64;
    for r in 0..d {
        for i in 0..t {
            let a = acc[r * t + i];
            if a != 0.0 {
                out.h[(r, i)] += a / tf;
            }
        }
    }
    check_finite_matrix(&out.h, idx, "attention")?;
    Ok(out)
}

fn mlp_core(layer: &TransformerLayer, h: &TokenMatrix, idx: usize) -> Result<TokenMatrix> {
    let (d, t) = h.h.shape();
    layer.check_dim(d)?;
    if layer.w2.is_zero() {
        return Ok(h.clone());
    }
    let rows = row_major(&h.h);
    let w1g = layer.w1.row_groups();
    let hidden = project_rows(&w1g, &rows, t);
    let mut hid_full: Vec<Option<Vec<f64>>> = vec![None; layer.w1.nrows()];
    for ((m, _), v) in w1g.iter().zip(hidden) {
        hid_full[*m] = Some(v.into_iter().map(relu).collect());
    }
    let mut acc = vec![0.0; d * t];
    for &(r, m, v) in layer.w2.entries() {
        if let Some(hm) = &hid_full[m] {
            let out = &mut acc[r * t..(r + 1) * t];
            for i in 0..t {
                out[i] += v * hm[i];
            }
        }
    }
    let mut out = h.clone();
    for r in 0..d {
        for i in 0..t {
            let a = acc[r * t + i];
            if a != 0.0 {
                out.h[(r, i)] += a;
            }
        }
    }
    check_finite_matrix(&out.h, idx, "MLP")?;
    Ok(out)
}

/// Attention half of a layer.
pub fn attn_forward(layer: &TransformerLayer, h: &TokenMatrix) -> Result<TokenMatrix> {
    attn_core(layer, h, 0)
}

/// MLP half of a layer.
pub fn mlp_forward(layer: &TransformerLayer, h: &TokenMatrix) -> Result<TokenMatrix> {
    mlp_core(layer, h, 0)
}

/// A stack of layers over a fixed layout with a readout position.
#[derive(Clone, Debug, PartialEq)]
pub struct Transformer {
    pub layers: Vec<TransformerLayer>,
    pub layout: SlotLayout,
    /// Readout row (0-based); defaults to the `y` row.
    pub readout_row: usize,
    /// Readout column; `None` selects the last (query) column.
    pub readout_col: Option<usize>,
}

impl Transformer {
    pub fn new(layers: Vec<TransformerLayer>, layout: SlotLayout) -> Self {
        let readout_row = layout.row("y").unwrap_or(0);
        Transformer { layers, layout, readout_row, readout_col: None }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn head_count(&self) -> usize {
        self.layers.iter().map(|l| l.heads.len()).max().unwrap_or(0)
    }
}

fn check_layout(tf: &Transformer, h: &TokenMatrix) -> Result<()> {
    if tf.layout.dim() != h.h.nrows() || tf.layout != h.layout {
        return Err(Error::Layout(format!(
            "token matrix layout (D = {}) differs from the transformer layout (D = {})",
            h.h.nrows(),
            tf.layout.dim()
        )));
    }
    Ok(())
}

/// Apply layers `range` of `tf`.
pub fn forward_range(tf: &Transformer, h: &TokenMatrix, range: Range<usize>) -> Result<TokenMatrix> {
    check_layout(tf, h)?;
    let mut cur = h.clone();
    for idx in range {
        let layer = &tf.layers[idx];
        cur = attn_core(layer, &cur, idx)?;
        cur = mlp_core(layer, &cur, idx)?;
    }
    Ok(cur)
}

/// Full forward pass.
pub fn forward(tf: &Transformer, h: &TokenMatrix) -> Result<TokenMatrix> {
    forward_range(tf, h, 0..tf.layers.len())
}

/// Forward pass keeping the output of every layer.
pub fn forward_trace(tf: &Transformer, h: &TokenMatrix) -> Result<Vec<TokenMatrix>> {
    check_layout(tf, h)?;
    let mut out = Vec::with_capacity(tf.layers.len());
    let mut cur = h.clone();
    for (idx, layer) in tf.layers.iter().enumerate() {
        cur = attn_core(layer, &cur, idx)?;
        cur = mlp_core(layer, &cur, idx)?;
        out.push(cur.clone());
    }
    Ok(out)
}

/// Entry at the readout position.
pub fn read_output(tf: &Transformer, h_out: &TokenMatrix) -> Result<f64> {
    let col = tf.readout_col.unwrap_or(h_out.h.ncols().saturating_sub(1));
    if tf.readout_row >= h_out.h.nrows() || col >= h_out.h.ncols() {
        return Err(Error::Index(format!(
            "readout ({}, {col}) outside {}x{}",
            tf.readout_row,
            h_out.h.nrows(),
            h_out.h.ncols()
        )));
    }
    Ok(h_out.h[(tf.readout_row, col)])
}

/// Parameter norm: max over layers of [`TransformerLayer::norm`].
pub fn tf_norm(tf: &Transformer) -> f64 {
    tf.layers.iter().map(|l| l.norm()).fold(0.0, f64::max)
}

/// Chain transformers under a unified layout. Every part's slots are embedded by
/// name; shared names are how parts pass values to each other.
pub fn compose(parts: &[&Transformer], unified: &SlotLayout) -> Result<Transformer> {
    let d = unified.dim();
    let mut layers = Vec::new();
    let mut readout = unified.row("y").unwrap_or(0);
    for part in parts {
        let map = part.layout.embedding_into(unified)?;
        for l in &part.layers {
            let heads = l
                .heads
                .iter()
                .map(|h| AttentionHead {
                    q: h.q.reindex(&map, &map, d, d),
                    k: h.k.reindex(&map, &map, d, d),
                    v: h.v.reindex(&map, &map, d, d),
                })
                .collect();
            let hid: Vec<usize> = (0..l.w1.nrows()).collect();
            layers.push(TransformerLayer {
                heads,
                w1: l.w1.reindex(&hid, &map, l.w1.nrows(), d),
                w2: l.w2.reindex(&map, &hid, d, l.w2.ncols()),
            });
        }
        readout = map[part.readout_row];
    }
    Ok(Transformer { layers, layout: unified.clone(), readout_row: readout, readout_col: None })
}

/// Re-embed a token matrix into a larger layout (missing rows are zero).
pub fn embed_tokens(h: &TokenMatrix, target: &SlotLayout) -> Result<TokenMatrix> {
    let map = h.layout.embedding_into(target)?;
    let mut out = DMatrix::zeros(target.dim(), h.h.ncols());
    for r in 0..h.h.nrows() {
        for c in 0..h.h.ncols() {
            out[(map[r], c)] = h.h[(r, c)];
        }
    }
    Ok(TokenMatrix { h: out, layout: target.clone(), n: h.n, n_prime: h.n_prime })
}

#[derive(Serialize, Deserialize)]
struct MatJson {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl From<&Mat> for MatJson {
    fn from(m: &Mat) -> Self {
        let mut data = vec![0.0; m.rows * m.cols];
        for &(r, c, v) in &m.entries {
            data[r * m.cols + c] = v;
        }
        MatJson { rows: m.rows, cols: m.cols, data }
    }
}

impl TryFrom<MatJson> for Mat {
    type Error = Error;
    fn try_from(j: MatJson) -> Result<Mat> {
        if j.data.len() != j.rows * j.cols {
            return Err(Error::Dimension(format!("matrix data has {} entries for {}x{}", j.data.len(), j.rows, j.cols)));
        }
        let entries = j
            .data
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, v)| (i / j.cols, i % j.cols, *v))
            .collect();
        Ok(Mat { rows: j.rows, cols: j.cols, entries })
    }
}

#[derive(Serialize, Deserialize)]
struct HeadJson {
    q: MatJson,
    k: MatJson,
    v: MatJson,
}

#[derive(Serialize, Deserialize)]
struct LayerJson {
    heads: Vec<HeadJson>,
    w1: MatJson,
    w2: MatJson,
}

#[derive(Serialize, Deserialize)]
struct TransformerJson {
    layout: Vec<Slot>,
    readout: (usize, Option<usize>),
    layers: Vec<LayerJson>,
}

impl Transformer {
    /// JSON document with row-major matrix arrays and the layout.
    pub fn to_json(&self) -> Result<String> {
        let doc = TransformerJson {
            layout: self.layout.slots().to_vec(),
            readout: (self.readout_row, self.readout_col),
            layers: self
                .layers
                .iter()
                .map(|l| LayerJson {
                    heads: l
                        .heads
                        .iter()
                        .map(|h| HeadJson { q: (&h.q).into(), k: (&h.k).into(), v: (&h.v).into() })
                        .collect(),
                    w1: (&l.w1).into(),
                    w2: (&l.w2).into(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(s: &str) -> Result<Transformer> {
        let doc: TransformerJson = serde_json::from_str(s)?;
        let layout = SlotLayout::from_slots(doc.layout)?;
        let mut layers = Vec::with_capacity(doc.layers.len());
        for l in doc.layers {
            let mut heads = Vec::with_capacity(l.heads.len());
            for h in l.heads {
                heads.push(AttentionHead { q: h.q.try_into()?, k: h.k.try_into()?, v: h.v.try_into()? });
            }
            let layer = TransformerLayer { heads, w1: l.w1.try_into()?, w2: l.w2.try_into()? };
            layer.check_dim(layout.dim())?;
            layers.push(layer);
        }
        Ok(Transformer { layers, layout, readout_row: doc.readout.0, readout_col: doc.readout.1 })
    }
}

/// Per-layer summary used by the `describe` command.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerSummary {
    pub index: usize,
    pub heads: usize,
    pub hidden: usize,
    pub norm: f64,
    pub rows_written: Vec<String>,
}

/// Head counts, norms, and the slots each layer writes to.
pub fn describe(tf: &Transformer) -> Vec<LayerSummary> {
    let slot_of = |row: usize| -> String {
        tf.layout
            .slots()
            .iter()
            .find(|s| row >= s.start && row < s.start + s.len)
            .map(|s| s.name.clone())
            .unwrap_or_else(|| format!("row{row}"))
    };
    tf.layers
        .iter()
        .enumerate()
        .map(|(index, l)| {
            let mut rows: Vec<usize> = l
                .heads
                .iter()
                .flat_map(|h| h.v.entries().iter().map(|e| e.0))
                .chain(l.w2.entries().iter().map(|e| e.0))
                .collect();
            rows.sort_unstable();
            rows.dedup();
            let mut names: Vec<String> = rows.into_iter().map(slot_of).collect();
            names.dedup();
            LayerSummary { index, heads: l.heads.len(), hidden: l.hidden_dim(), norm: l.norm(), rows_written: names }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tm(h: DMatrix<f64>) -> TokenMatrix {
        let d = h.nrows();
        let layout = SlotLayout::from_slots(vec![Slot { name: "x".into(), start: 0, len: d }]).unwrap();
        TokenMatrix { h, layout, n: 1, n_prime: 0 }
    }

    #[test]
    fn zero_value_matrices_leave_input() {
        let h = tm(DMatrix::from_fn(3, 4, |r, c| (r * 4 + c) as f64 - 3.0));
        let layer = TransformerLayer::attention(
            vec![AttentionHead::new(Mat::identity(3), Mat::identity(3), Mat::zeros(3, 3))],
            3,
        );
        assert_eq!(attn_forward(&layer, &h).unwrap(), h);
    }

    #[test]
    fn op_norm_matches_svd() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -0.5, 0.3, 4.0, 1.0]);
        let sv = m.clone().svd(false, false).singular_values.max();
        assert!((Mat::from_dense(&m).op_norm() - sv).abs() < 1e-8 * sv);
    }

    #[test]
    fn scaled_identity_norms() {
        let layer = TransformerLayer::attention(
            vec![AttentionHead::new(Mat::identity(4), Mat::identity(4), Mat::identity(4).scaled(2.0))],
            4,
        );
        assert!((layer.norm() - 3.0).abs() < 1e-10);
    }
}
