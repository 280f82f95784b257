//! Miniature 2D/3D-context encoders.
//!
//! Each branch is a two-layer neighbourhood-aggregating network over 6-channel
//! rows:
//!
//! ```text
//! h_j = relu(W1·x_j + b1)
//! m_i = mean_{j ∈ N(i)} h_j
//! f_i = normalize(W2·[h_i ‖ m_i] + b2)
//! ```
//!
//! The point branch takes its neighbourhoods in 3D space, the pixel branch in
//! the image grid. Fusion is early (point branch only), late (each branch on
//! its own modality, outputs concatenated) or hybrid (both branches on all
//! six channels, outputs concatenated). Gradients are written out by hand.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;

use crate::error::{config_err, Error, Result};
use crate::rng::Rng;

/// Channels per encoder input row.
pub const IN_CH: usize = 6;
/// Pre-normalisation norms below this are rejected.
pub const MIN_FEATURE_NORM: f64 = 1e-12;

pub type Row = [f64; IN_CH];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FusionMode {
    Early,
    Late,
    Hybrid,
}

impl FusionMode {
    pub fn code(self) -> u8 {
        match self {
            FusionMode::Early => 0,
            FusionMode::Late => 1,
            FusionMode::Hybrid => 2,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(FusionMode::Early),
            1 => Ok(FusionMode::Late),
            2 => Ok(FusionMode::Hybrid),
            _ => Err(Error::Format(format!("unknown fusion mode code {c}"))),
        }
    }

    pub fn uses_pixel_branch(self) -> bool {
        !matches!(self, FusionMode::Early)
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Early => "early",
            FusionMode::Late => "late",
            FusionMode::Hybrid => "hybrid",
        })
    }
}

impl FromStr for FusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "early" => Ok(FusionMode::Early),
            "late" => Ok(FusionMode::Late),
            "hybrid" => Ok(FusionMode::Hybrid),
            _ => Err(config_err(format!("unknown fusion mode '{s}'"))),
        }
    }
}

/// Weights of one branch. `w1` is `hidden × 6`, `w2` is `dim × 2·hidden`,
/// both row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Branch {
    fn zeros(hidden: usize, dim: usize) -> Self {
        Self {
            w1: vec![0.0; hidden * IN_CH],
            b1: vec![0.0; hidden],
            w2: vec![0.0; dim * 2 * hidden],
            b2: vec![0.0; dim],
        }
    }

    fn init(hidden: usize, dim: usize, rng: &mut Rng) -> Self {
        let mut b = Self::zeros(hidden, dim);
        let a1 = 1.0 / (IN_CH as f64).sqrt();
        let a2 = 1.0 / (2.0 * hidden as f64).sqrt();
        for v in b.w1.iter_mut().chain(b.b1.iter_mut()) {
            *v = rng.random_range(-a1..=a1);
        }
        for v in b.w2.iter_mut().chain(b.b2.iter_mut()) {
            *v = rng.random_range(-a2..=a2);
        }
        b
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// 3D-context branch (`W1, b1, W2, b2`).
    pub point: Branch,
    /// 2D-context branch (`V1, bv1, V2, bv2`).
    pub pixel: Branch,
    pub fusion: FusionMode,
    pub hidden: usize,
    pub dim: usize,
    pub knn_k: usize,
}

impl EncoderParams {
    pub fn zeros(fusion: FusionMode, hidden: usize, dim: usize, knn_k: usize) -> Self {
        Self {
            point: Branch::zeros(hidden, dim),
            pixel: Branch::zeros(hidden, dim),
            fusion,
            hidden,
            dim,
            knn_k,
        }
    }

    /// Uniform `±1/√fan_in` initialisation.
    pub fn init(fusion: FusionMode, hidden: usize, dim: usize, knn_k: usize, rng: &mut Rng) -> Result<Self> {
        let p = Self {
            point: Branch::init(hidden, dim, rng),
            pixel: Branch::init(hidden, dim, rng),
            fusion,
            hidden,
            dim,
            knn_k,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.fusion, self.hidden, self.dim, self.knn_k)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden < 4 || self.dim < 4 || self.knn_k < 1 {
            return Err(config_err(format!(
                "need hidden >= 4, dim >= 4, knn_k >= 1 (got {}, {}, {})",
                self.hidden, self.dim, self.knn_k
            )));
        }
        let zero = Self::zeros(self.fusion, self.hidden, self.dim, self.knn_k);
        for ((name, t, _), (_, z, _)) in self.tensors().iter().zip(zero.tensors().iter()) {
            if t.len() != z.len() {
                return Err(Error::Shape(format!("{name}: {} != {}", t.len(), z.len())));
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(config_err(format!("{name} has non-finite entries")));
            }
        }
        Ok(())
    }

    /// Output width of the fused head.
    pub fn out_dim(&self) -> usize {
        if self.fusion.uses_pixel_branch() {
            2 * self.dim
        } else {
            self.dim
        }
    }

    /// Tensors in checkpoint order, with a flag marking weights (as opposed to biases).
    pub fn tensors(&self) -> [(&'static str, &Vec<f64>, bool); 8] {
        [
            ("W1", &self.point.w1, true),
            ("b1", &self.point.b1, false),
            ("W2", &self.point.w2, true),
            ("b2", &self.point.b2, false),
            ("V1", &self.pixel.w1, true),
            ("bv1", &self.pixel.b1, false),
            ("V2", &self.pixel.w2, true),
            ("bv2", &self.pixel.b2, false),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Vec<f64>, bool); 8] {
        [
            ("W1", &mut self.point.w1, true),
            ("b1", &mut self.point.b1, false),
            ("W2", &mut self.point.w2, true),
            ("b2", &mut self.point.b2, false),
            ("V1", &mut self.pixel.w1, true),
            ("bv1", &mut self.pixel.b1, false),
            ("V2", &mut self.pixel.w2, true),
            ("bv2", &mut self.pixel.b2, false),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t, _)| t.len()).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|(_, t, _)| t.iter().copied()).collect()
    }

    pub fn get_flat(&self, mut idx: usize) -> f64 {
        for (_, t, _) in self.tensors() {
            if idx < t.len() {
                return t[idx];
            }
            idx -= t.len();
        }
        panic!("flat parameter index out of range");
    }

    pub fn set_flat(&mut self, mut idx: usize, v: f64) {
        for (_, t, _) in self.tensors_mut() {
            if idx < t.len() {
                t[idx] = v;
                return;
            }
            idx -= t.len();
        }
        panic!("flat parameter index out of range");
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &Self) {
        for ((_, a, _), (_, b, _)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (_, a, _) in self.tensors_mut() {
            a.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t, _)| t.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t, _)| t.iter().all(|v| v.is_finite()))
    }
}

/// Row-major matrix of features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Largest `|‖row‖ − 1|` over all rows.
    pub fn unit_norm_error(&self) -> f64 {
        (0..self.rows)
            .map(|i| (dot(self.row(i), self.row(i)).sqrt() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn check_unit(&self, tol: f64) -> Result<()> {
        let err = self.unit_norm_error();
        if !(err <= tol) {
            return Err(Error::Contract(format!(
                "feature rows must be unit norm (violation {err:e} > {tol:e})"
            )));
        }
        Ok(())
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut out = Self::zeros(idx.len(), self.cols);
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(self.row(i));
        }
        out
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Input to one branch: a base table (usually every point of a view), extra
/// rows appended after it (spliced disturbed rows), the query rows and, for
/// every query, its neighbour rows. Indices address `base ++ extra`.
#[derive(Debug, Clone)]
pub struct BranchInput<'a> {
    pub base: &'a [Row],
    pub extra: Vec<Row>,
    pub queries: Vec<usize>,
    pub neighbors: Vec<Vec<usize>>,
}

impl<'a> BranchInput<'a> {
    pub fn new(base: &'a [Row], queries: Vec<usize>, neighbors: Vec<Vec<usize>>) -> Self {
        Self {
            base,
            extra: Vec::new(),
            queries,
            neighbors,
        }
    }

    fn total_rows(&self) -> usize {
        self.base.len() + self.extra.len()
    }

    fn row(&self, i: usize) -> &Row {
        if i < self.base.len() {
            &self.base[i]
        } else {
            &self.extra[i - self.base.len()]
        }
    }

    fn validate(&self) -> Result<()> {
        if self.queries.len() != self.neighbors.len() {
            return Err(Error::Shape(format!(
                "{} queries but {} neighbour lists",
                self.queries.len(),
                self.neighbors.len()
            )));
        }
        let n = self.total_rows();
        for &q in self.queries.iter().chain(self.neighbors.iter().flatten()) {
            if q >= n {
                return Err(Error::Shape(format!("row index {q} out of range ({n} rows)")));
            }
            if self.row(q).iter().any(|v| !v.is_finite()) {
                return Err(Error::Contract(format!("input row {q} is not finite")));
            }
        }
        Ok(())
    }
}

/// Intermediates of one branch forward pass.
#[derive(Debug, Clone)]
pub struct BranchCache {
    touched: Vec<usize>,
    xs: Vec<Row>,
    pre: Vec<f64>,
    query_slot: Vec<usize>,
    neighbor_slots: Vec<Vec<usize>>,
    concat: Vec<f64>,
    norms: Vec<f64>,
    out: FeatureMatrix,
}

impl BranchCache {
    /// Sign pattern of every hidden pre-activation; used to detect relu kinks
    /// crossed by a finite-difference probe.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.pre.iter().map(|&a| a > 0.0).collect()
    }
}

fn branch_forward(
    b: &Branch,
    hidden: usize,
    dim: usize,
    inp: &BranchInput<'_>,
) -> Result<(FeatureMatrix, BranchCache)> {
    inp.validate()?;
    let mut slot = vec![usize::MAX; inp.total_rows()];
    let mut touched = Vec::new();
    for &r in inp.queries.iter().chain(inp.neighbors.iter().flatten()) {
        if slot[r] == usize::MAX {
            slot[r] = touched.len();
            touched.push(r);
        }
    }

    let t = touched.len();
    let mut xs = Vec::with_capacity(t);
    let mut pre = vec![0.0; t * hidden];
    let mut hid = vec![0.0; t * hidden];
    for (s, &r) in touched.iter().enumerate() {
        let x = *inp.row(r);
        for h in 0..hidden {
            let w = &b.w1[h * IN_CH..(h + 1) * IN_CH];
            let a = b.b1[h] + dot(w, &x);
            pre[s * hidden + h] = a;
            hid[s * hidden + h] = a.max(0.0);
        }
        xs.push(x);
    }

    let nq = inp.queries.len();
    let width = 2 * hidden;
    let mut concat = vec![0.0; nq * width];
    let mut norms = vec![0.0; nq];
    let mut out = FeatureMatrix::zeros(nq, dim);
    let query_slot: Vec<usize> = inp.queries.iter().map(|&q| slot[q]).collect();
    let neighbor_slots: Vec<Vec<usize>> = inp
        .neighbors
        .iter()
        .map(|ns| ns.iter().map(|&j| slot[j]).collect())
        .collect();

    for q in 0..nq {
        let c = &mut concat[q * width..(q + 1) * width];
        let qs = query_slot[q];
        c[..hidden].copy_from_slice(&hid[qs * hidden..(qs + 1) * hidden]);
        let ns = &neighbor_slots[q];
        if !ns.is_empty() {
            let inv = 1.0 / ns.len() as f64;
            for &s in ns {
                for h in 0..hidden {
                    c[hidden + h] += hid[s * hidden + h] * inv;
                }
            }
        }
        let f = out.row_mut(q);
        for d in 0..dim {
            f[d] = b.b2[d] + dot(&b.w2[d * width..(d + 1) * width], c);
        }
        let n = dot(f, f).sqrt();
        if !(n >= MIN_FEATURE_NORM) {
            return Err(Error::DegenerateFeature { row: q, norm: n });
        }
        f.iter_mut().for_each(|v| *v /= n);
        norms[q] = n;
    }

    let cache = BranchCache {
        touched,
        xs,
        pre,
        query_slot,
        neighbor_slots,
        concat,
        norms,
        out: out.clone(),
    };
    Ok((out, cache))
}

/// Accumulates the parameter gradient of `Σ grad_out · f` into `grads`.
fn branch_backward(
    b: &Branch,
    hidden: usize,
    dim: usize,
    cache: &BranchCache,
    grad_out: &FeatureMatrix,
    grads: &mut Branch,
) -> Result<()> {
    if grad_out.rows != cache.out.rows || grad_out.cols != dim {
        return Err(Error::Shape(format!(
            "upstream gradient is {}x{}, features are {}x{}",
            grad_out.rows, grad_out.cols, cache.out.rows, dim
        )));
    }
    let width = 2 * hidden;
    let mut g_hid = vec![0.0; cache.touched.len() * hidden];
    let mut gz = vec![0.0; dim];
    let mut gc = vec![0.0; width];
    for q in 0..cache.out.rows {
        let f = cache.out.row(q);
        let g = grad_out.row(q);
        let proj = dot(f, g);
        let n = cache.norms[q];
        for d in 0..dim {
            gz[d] = (g[d] - f[d] * proj) / n;
        }
        let c = &cache.concat[q * width..(q + 1) * width];
        gc.iter_mut().for_each(|v| *v = 0.0);
        for d in 0..dim {
            let gzd = gz[d];
            if gzd == 0.0 {
                continue;
            }
            grads.b2[d] += gzd;
            let row = d * width;
            for k in 0..width {
                grads.w2[row + k] += gzd * c[k];
                gc[k] += gzd * b.w2[row + k];
            }
        }
        let qs = cache.query_slot[q];
        for h in 0..hidden {
            g_hid[qs * hidden + h] += gc[h];
        }
        let ns = &cache.neighbor_slots[q];
        if !ns.is_empty() {
            let inv = 1.0 / ns.len() as f64;
            for &s in ns {
                for h in 0..hidden {
                    g_hid[s * hidden + h] += gc[hidden + h] * inv;
                }
            }
        }
    }
    for (s, x) in cache.xs.iter().enumerate() {
        for h in 0..hidden {
            if cache.pre[s * hidden + h] <= 0.0 {
                continue;
            }
            let ga = g_hid[s * hidden + h];
            grads.b1[h] += ga;
            for c in 0..IN_CH {
                grads.w1[h * IN_CH + c] += ga * x[c];
            }
        }
    }
    Ok(())
}

/// 3D-context encoder (point branch).
pub fn encode3d(params: &EncoderParams, input: &BranchInput<'_>) -> Result<(FeatureMatrix, BranchCache)> {
    branch_forward(&params.point, params.hidden, params.dim, input)
}

/// 2D-context encoder (pixel branch).
pub fn encode2d(params: &EncoderParams, input: &BranchInput<'_>) -> Result<(FeatureMatrix, BranchCache)> {
    branch_forward(&params.pixel, params.hidden, params.dim, input)
}

/// Concatenates and renormalises; early fusion passes the 3D features through.
pub fn fuse(f3d: &FeatureMatrix, f2d: Option<&FeatureMatrix>, mode: FusionMode) -> Result<FeatureMatrix> {
    match (mode, f2d) {
        (FusionMode::Early, _) => Ok(f3d.clone()),
        (_, None) => Err(Error::Shape(format!("{mode} fusion needs 2D features"))),
        (_, Some(f2d)) => {
            if f2d.rows != f3d.rows {
                return Err(Error::Shape(format!("3D has {} rows, 2D has {}", f3d.rows, f2d.rows)));
            }
            let cols = f3d.cols + f2d.cols;
            let mut out = FeatureMatrix::zeros(f3d.rows, cols);
            for i in 0..f3d.rows {
                let r = out.row_mut(i);
                r[..f3d.cols].copy_from_slice(f3d.row(i));
                r[f3d.cols..].copy_from_slice(f2d.row(i));
                let n = dot(r, r).sqrt();
                if !(n >= MIN_FEATURE_NORM) {
                    return Err(Error::DegenerateFeature { row: i, norm: n });
                }
                r.iter_mut().for_each(|v| *v /= n);
            }
            Ok(out)
        }
    }
}

/// Which output a block produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// The fused representation given by `EncoderParams::fusion`.
    Fused,
    /// The 3D branch alone.
    Point,
    /// The 2D branch alone.
    Pixel,
}

/// Inputs for one block of samples (anchors, positives, ...).
#[derive(Debug, Clone)]
pub struct SampleBlock<'a> {
    pub point: Option<BranchInput<'a>>,
    pub pixel: Option<BranchInput<'a>>,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    head: Head,
    fusion: FusionMode,
    point: Option<BranchCache>,
    pixel: Option<BranchCache>,
    point_out: Option<FeatureMatrix>,
    fused: Option<(FeatureMatrix, Vec<f64>)>,
}

impl BlockCache {
    pub fn activation_pattern(&self) -> Vec<bool> {
        let mut v = Vec::new();
        for c in [&self.point, &self.pixel].into_iter().flatten() {
            v.extend(c.activation_pattern());
        }
        v
    }
}

/// Runs the branches a head needs and fuses their outputs.
pub fn forward(params: &EncoderParams, block: &SampleBlock<'_>, head: Head) -> Result<(FeatureMatrix, BlockCache)> {
    let need_point = matches!(head, Head::Point | Head::Fused);
    let need_pixel = match head {
        Head::Pixel => true,
        Head::Point => false,
        Head::Fused => params.fusion.uses_pixel_branch(),
    };
    let run = |need: bool,
               inp: &Option<BranchInput<'_>>,
               name: &str,
               enc: fn(&EncoderParams, &BranchInput<'_>) -> Result<(FeatureMatrix, BranchCache)>|
     -> Result<Option<(FeatureMatrix, BranchCache)>> {
        if !need {
            return Ok(None);
        }
        let inp = inp
            .as_ref()
            .ok_or_else(|| Error::Shape(format!("block lacks {name} branch input")))?;
        enc(params, inp).map(Some)
    };
    let p = run(need_point, &block.point, "point", encode3d)?;
    let x = run(need_pixel, &block.pixel, "pixel", encode2d)?;

    let mut cache = BlockCache {
        head,
        fusion: params.fusion,
        point: None,
        pixel: None,
        point_out: None,
        fused: None,
    };
    let out = match head {
        Head::Point => p.as_ref().unwrap().0.clone(),
        Head::Pixel => x.as_ref().unwrap().0.clone(),
        Head::Fused => {
            let f3 = &p.as_ref().unwrap().0;
            let fused = fuse(f3, x.as_ref().map(|v| &v.0), params.fusion)?;
            if params.fusion.uses_pixel_branch() {
                let f2 = &x.as_ref().unwrap().0;
                let norms = (0..f3.rows)
                    .map(|i| (dot(f3.row(i), f3.row(i)) + dot(f2.row(i), f2.row(i))).sqrt())
                    .collect();
                cache.fused = Some((fused.clone(), norms));
            }
            fused
        }
    };
    if let Some((f, c)) = p {
        cache.point_out = Some(f);
        cache.point = Some(c);
    }
    if let Some((_, c)) = x {
        cache.pixel = Some(c);
    }
    Ok((out, cache))
}

/// Accumulates the parameter gradient of `Σ grad_out · out` into `grads`.
pub fn backward(
    params: &EncoderParams,
    cache: &BlockCache,
    grad_out: &FeatureMatrix,
    grads: &mut EncoderParams,
) -> Result<()> {
    let (h, d) = (params.hidden, params.dim);
    match cache.head {
        Head::Point => branch_backward(
            &params.point,
            h,
            d,
            cache.point.as_ref().unwrap(),
            grad_out,
            &mut grads.point,
        ),
        Head::Pixel => branch_backward(
            &params.pixel,
            h,
            d,
            cache.pixel.as_ref().unwrap(),
            grad_out,
            &mut grads.pixel,
        ),
        Head::Fused if !cache.fusion.uses_pixel_branch() => branch_backward(
            &params.point,
            h,
            d,
            cache.point.as_ref().unwrap(),
            grad_out,
            &mut grads.point,
        ),
        Head::Fused => {
            let (y, norms) = cache.fused.as_ref().unwrap();
            if grad_out.rows != y.rows || grad_out.cols != y.cols {
                return Err(Error::Shape(format!(
                    "upstream gradient is {}x{}, fused features are {}x{}",
                    grad_out.rows, grad_out.cols, y.rows, y.cols
                )));
            }
            let mut g3 = FeatureMatrix::zeros(y.rows, d);
            let mut g2 = FeatureMatrix::zeros(y.rows, d);
            for i in 0..y.rows {
                let yr = y.row(i);
                let gr = grad_out.row(i);
                let proj = dot(yr, gr);
                for c in 0..2 * d {
                    let gc = (gr[c] - yr[c] * proj) / norms[i];
                    if c < d {
                        g3.row_mut(i)[c] = gc;
                    } else {
                        g2.row_mut(i)[c - d] = gc;
                    }
                }
            }
            branch_backward(
                &params.point,
                h,
                d,
                cache.point.as_ref().unwrap(),
                &g3,
                &mut grads.point,
            )?;
            branch_backward(
                &params.pixel,
                h,
                d,
                cache.pixel.as_ref().unwrap(),
                &g2,
                &mut grads.pixel,
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn random_table(n: usize, r: &mut Rng) -> Vec<Row> {
        (0..n)
            .map(|_| std::array::from_fn(|_| r.random_range(-1.0..1.0)))
            .collect()
    }

    fn random_neighbors(n: usize, q: &[usize], k: usize, r: &mut Rng) -> Vec<Vec<usize>> {
        q.iter()
            .map(|_| (0..k).map(|_| r.random_range(0..n)).collect())
            .collect()
    }

    #[test]
    fn collapses_to_pointwise_map_with_self_neighbor() {
        let (h, d) = (6, 6);
        let mut p = EncoderParams::zeros(FusionMode::Early, h, d, 1);
        for i in 0..6 {
            p.point.w1[i * IN_CH + i] = 1.0;
            p.point.w2[i * 2 * h + i] = 1.0;
        }
        let table: Vec<Row> = vec![[0.0, 2.0, -1.0, 0.0, 0.0, 0.0], [3.0, 0.0, 0.0, 0.0, -2.0, 4.0]];
        let inp = BranchInput::new(&table, vec![0, 1], vec![vec![0], vec![1]]);
        let (f, _) = encode3d(&p, &inp).unwrap();
        assert_eq!(f.row(0), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let s = 5f64.sqrt();
        let want = [3.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 4.0 / 5.0];
        for (a, b) in f.row(1).iter().zip(want) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b} ({s})");
        }
    }

    #[test]
    fn zero_weights_give_identical_rows() {
        let mut p = EncoderParams::zeros(FusionMode::Early, 4, 4, 2);
        p.point.b2 = vec![1.0, 2.0, 2.0, 0.0];
        p.pixel.b2 = vec![0.0, 0.0, 3.0, 4.0];
        let mut r = rng::rng(1);
        let table = random_table(10, &mut r);
        let q: Vec<usize> = (0..5).collect();
        let inp = BranchInput::new(&table, q.clone(), random_neighbors(10, &q, 2, &mut r));
        let (f, _) = encode3d(&p, &inp).unwrap();
        let (g, _) = encode2d(&p, &inp).unwrap();
        for i in 0..5 {
            assert_eq!(f.row(i), &[1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0, 0.0]);
            assert_eq!(g.row(i), &[0.0, 0.0, 0.6, 0.8]);
        }
    }

    #[test]
    fn zero_output_is_degenerate() {
        let p = EncoderParams::zeros(FusionMode::Early, 4, 4, 1);
        let table = vec![[0.5; IN_CH]];
        let inp = BranchInput::new(&table, vec![0], vec![vec![0]]);
        assert!(matches!(encode3d(&p, &inp), Err(Error::DegenerateFeature { .. })));
    }

    #[test]
    fn random_features_are_unit_norm() {
        let mut r = rng::rng(2);
        let p = EncoderParams::init(FusionMode::Hybrid, 16, 8, 4, &mut r).unwrap();
        let table = random_table(40, &mut r);
        let q: Vec<usize> = (0..8).collect();
        let inp = BranchInput::new(&table, q.clone(), random_neighbors(40, &q, 4, &mut r));
        for head in [Head::Point, Head::Pixel, Head::Fused] {
            let block = SampleBlock {
                point: Some(inp.clone()),
                pixel: Some(inp.clone()),
            };
            let (f, _) = forward(&p, &block, head).unwrap();
            assert!(f.unit_norm_error() < 1e-9);
        }
    }

    #[test]
    fn fuse_modes() {
        let r = FeatureMatrix::from_rows(&[vec![0.6, 0.8, 0.0, 0.0]]);
        assert_eq!(fuse(&r, Some(&r), FusionMode::Early).unwrap(), r);
        let h = fuse(&r, Some(&r), FusionMode::Hybrid).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        for (a, b) in h
            .row(0)
            .iter()
            .zip([0.6 * s, 0.8 * s, 0.0, 0.0, 0.6 * s, 0.8 * s, 0.0, 0.0])
        {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(h.unit_norm_error() < 1e-9);
        let two = FeatureMatrix::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]]);
        assert!(fuse(&r, Some(&two), FusionMode::Late).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut r = rng::rng(3);
        let p = EncoderParams::init(FusionMode::Hybrid, 8, 4, 3, &mut r).unwrap();
        let table = random_table(20, &mut r);
        let q: Vec<usize> = (0..6).collect();
        let inp = BranchInput::new(&table, q.clone(), random_neighbors(20, &q, 3, &mut r));
        let block = SampleBlock {
            point: Some(inp.clone()),
            pixel: Some(inp),
        };
        let (f, cache) = forward(&p, &block, Head::Fused).unwrap();
        let mut g = p.zeros_like();
        backward(&p, &cache, &FeatureMatrix::zeros(f.rows, f.cols), &mut g).unwrap();
        assert_eq!(g.max_abs(), 0.0);
        let bad = FeatureMatrix::zeros(f.rows + 1, f.cols);
        assert!(backward(&p, &cache, &bad, &mut g).is_err());
    }

    /// With relu everywhere active, zero second layer except the bias path,
    /// the W2 gradient of a single row is the outer product of the upstream
    /// gradient (projected through the normalisation) with the concatenated
    /// hidden vector.
    #[test]
    fn second_layer_gradient_is_outer_product() {
        let (h, d) = (4, 4);
        let mut p = EncoderParams::zeros(FusionMode::Early, h, d, 1);
        p.point.b1 = vec![1.0, 2.0, 0.5, 1.5];
        p.point.b2 = vec![2.0, 0.0, 0.0, 0.0];
        let table = vec![[0.0; IN_CH]];
        let inp = BranchInput::new(&table, vec![0], vec![vec![0]]);
        let block = SampleBlock {
            point: Some(inp),
            pixel: None,
        };
        let (f, cache) = forward(&p, &block, Head::Fused).unwrap();
        assert_eq!(f.row(0), &[1.0, 0.0, 0.0, 0.0]);
        let up = FeatureMatrix::from_rows(&[vec![0.3, -0.7, 0.2, 0.1]]);
        let mut g = p.zeros_like();
        backward(&p, &cache, &up, &mut g).unwrap();
        // Projection removes the component along f = e0, norm is 2.
        let gz = [0.0, -0.35, 0.1, 0.05];
        let x = [1.0, 2.0, 0.5, 1.5, 1.0, 2.0, 0.5, 1.5];
        for dd in 0..d {
            for k in 0..2 * h {
                assert!((g.point.w2[dd * 2 * h + k] - gz[dd] * x[k]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn permuting_queries_permutes_outputs() {
        let mut r = rng::rng(5);
        let p = EncoderParams::init(FusionMode::Early, 8, 6, 3, &mut r).unwrap();
        let table = random_table(30, &mut r);
        let q: Vec<usize> = (0..10).collect();
        let nb = random_neighbors(30, &q, 3, &mut r);
        let perm = [3, 7, 0, 9, 1, 2, 8, 4, 6, 5];
        let (a, _) = encode3d(&p, &BranchInput::new(&table, q.clone(), nb.clone())).unwrap();
        let qp: Vec<usize> = perm.iter().map(|&i| q[i]).collect();
        let np: Vec<Vec<usize>> = perm.iter().map(|&i| nb[i].clone()).collect();
        let (b, _) = encode3d(&p, &BranchInput::new(&table, qp, np)).unwrap();
        for (o, &i) in perm.iter().enumerate() {
            assert_eq!(b.row(o), a.row(i));
        }
    }
}
