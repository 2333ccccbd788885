//! Multipole (truncated Taylor) approximation of Gaussian kernel sums.
//!
//! Around a center `x*`, with `t = (z - x*)/σ` and `s_i = (x_i - x*)/σ`,
//!
//! ```text
//! Σ w_i K(z - x_i) = (2π)^(-d/2) e^(-‖t‖²/2) Σ_i w_i e^(-‖s_i‖²/2) e^(⟨t, s_i⟩)
//!                  ≈ (2π)^(-d/2) e^(-‖t‖²/2) Σ_{|α|≤p} t^α / α! · C_α
//! ```
//!
//! where `C_α = Σ_i w_i e^(-‖s_i‖²/2) s_i^α` depends only on the samples and
//! is computed once per center.
//!
//! Grids are filled by stochastic filtering: every cell draws one sample
//! point uniformly at random and uses the expansion centered there. The
//! result is sparse and is usually repaired with [`gaussian_smooth`].

use std::collections::HashMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::{DensityGrid, GridSpec, SparseDensityGrid};
use crate::kernel::{gaussian_normalizer, guarded_exp, Bandwidth, Point, WeightedSample, UNDERFLOW_EXPONENT};

pub const DEFAULT_ORDER: usize = 4;
pub const DEFAULT_SMOOTH_SIGMA_CELLS: f64 = 1.5;
/// Smoothing kernels are truncated at this many standard deviations.
pub const SMOOTH_TRUNCATION: f64 = 4.0;

/// All multi-indices `α ∈ ℕ^d` with `|α| ≤ p`, in graded order.
///
/// Every index after the first has a parent `α - e_k` that appears earlier,
/// so monomials can be filled with one multiplication each.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiIndexSet {
    dim: usize,
    order: usize,
    exponents: Vec<u32>,
    parent: Vec<usize>,
    axis: Vec<usize>,
    inv_factorial: Vec<f64>,
}

impl MultiIndexSet {
    pub fn new(dim: usize, order: usize) -> Self {
        let mut exponents = Vec::new();
        let mut current = vec![0u32; dim];
        for degree in 0..=order {
            push_compositions(degree as u32, 0, &mut current, &mut exponents);
        }
        let count = exponents.len() / dim.max(1);
        let mut lookup: HashMap<&[u32], usize> = HashMap::with_capacity(count);
        for j in 0..count {
            lookup.insert(&exponents[j * dim..(j + 1) * dim], j);
        }
        let mut parent = vec![0; count];
        let mut axis = vec![0; count];
        let mut inv_factorial = vec![1.0; count];
        let mut scratch = vec![0u32; dim];
        for j in 1..count {
            let alpha = &exponents[j * dim..(j + 1) * dim];
            let k = alpha.iter().position(|&e| e > 0).expect("non-zero index");
            scratch.copy_from_slice(alpha);
            scratch[k] -= 1;
            parent[j] = lookup[&scratch[..]];
            axis[j] = k;
            inv_factorial[j] = inv_factorial[parent[j]] / alpha[k] as f64;
        }
        MultiIndexSet {
            dim,
            order,
            exponents,
            parent,
            axis,
            inv_factorial,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    /// Indices are graded, so terms below the top degree form a prefix.
    fn lower_degree_count(&self) -> usize {
        (0..self.len())
            .take_while(|&j| self.exponents(j).iter().sum::<u32>() < self.order as u32)
            .count()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    pub fn exponents(&self, j: usize) -> &[u32] {
        &self.exponents[j * self.dim..(j + 1) * self.dim]
    }

    pub fn position(&self, alpha: &[u32]) -> Option<usize> {
        if alpha.len() != self.dim {
            return None;
        }
        (0..self.len()).find(|&j| self.exponents(j) == alpha)
    }

    /// Fill `out[j] = scale · v^α_j`.
    #[inline]
    fn monomials(&self, v: &[f64], scale: f64, out: &mut [f64]) {
        out[0] = scale;
        for j in 1..out.len() {
            out[j] = out[self.parent[j]] * v[self.axis[j]];
        }
    }
}

fn push_compositions(remaining: u32, pos: usize, current: &mut [u32], out: &mut Vec<u32>) {
    let dim = current.len();
    if pos + 1 == dim {
        current[pos] = remaining;
        out.extend_from_slice(current);
        return;
    }
    for e in (0..=remaining).rev() {
        current[pos] = e;
        push_compositions(remaining - e, pos + 1, current, out);
    }
    current[pos] = 0;
}

/// `binomial(p + d, d)`, the number of multi-indices with `|α| ≤ p`.
pub fn coefficient_count(dim: usize, order: usize) -> usize {
    let mut c: u128 = 1;
    for i in 1..=dim as u128 {
        c = c * (order as u128 + i) / i;
    }
    c as usize
}

/// Truncated Taylor coefficients of a weighted kernel sum around a center.
#[derive(Debug, Clone)]
pub struct MultipoleExpansion {
    center: Vec<f64>,
    sigma: Bandwidth,
    indices: Arc<MultiIndexSet>,
    coefficients: Vec<f64>,
    // C_α / α!, used by evaluation
    scaled: Vec<f64>,
}

impl MultipoleExpansion {
    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn order(&self) -> usize {
        self.indices.order()
    }

    pub fn sigma(&self) -> Bandwidth {
        self.sigma
    }

    pub fn len(&self) -> usize {
        self.coefficients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coefficients.is_empty()
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn indices(&self) -> &MultiIndexSet {
        &self.indices
    }

    /// Coefficient `C_α`, or `None` if `|α|` exceeds the order.
    pub fn coefficient(&self, alpha: &[u32]) -> Option<f64> {
        self.indices.position(alpha).map(|j| self.coefficients[j])
    }

    pub fn evaluate(&self, z: &[f64]) -> Result<f64> {
        evaluate_expansion(self, z)
    }
}

/// Samples per block of the monomial recurrence.
const BLOCK: usize = 32;
/// Independent partial sums kept per coefficient.
const LANES: usize = 8;
/// Largest distinct-sample count for which the kernel matrix is precomputed.
const KERNEL_MATRIX_LIMIT: usize = 2048;
/// Tile edge for filling the symmetric kernel matrix.
const TILE: usize = 32;

/// Per-center work buffers shared by build and evaluation.
struct Workspace {
    diff: Vec<f64>,
    mono: Vec<f64>,
    /// Scaled offsets, axis-major, padded to a multiple of [`BLOCK`].
    soa_diff: Vec<f64>,
    soa_e: Vec<f64>,
    block_mono: Vec<f64>,
    lane_acc: Vec<[f64; LANES]>,
    simd: Simd,
}

impl Workspace {
    fn new(indices: &MultiIndexSet) -> Self {
        Workspace {
            diff: vec![0.0; indices.dim()],
            mono: vec![0.0; indices.len()],
            soa_diff: Vec::new(),
            soa_e: Vec::new(),
            block_mono: vec![0.0; indices.len() * BLOCK],
            lane_acc: vec![[0.0; LANES]; indices.len()],
            simd: detect_simd(),
        }
    }
}

/// `acc[j] += e · s^α_j` over all blocks; `mono` holds one block per term.
/// Only the first `stored` terms are parents of others and get written back.
#[inline(always)]
fn monomial_blocks(
    stored: usize,
    parent: &[usize],
    axis: &[usize],
    soa_diff: &[f64],
    soa_e: &[f64],
    mono: &mut [f64],
    acc: &mut [[f64; LANES]],
) {
    let padded = soa_e.len();
    for start in (0..padded).step_by(BLOCK) {
        let e = &soa_e[start..start + BLOCK];
        mono[..BLOCK].copy_from_slice(e);
        let mut lanes = acc[0];
        for chunk in e.chunks_exact(LANES) {
            for l in 0..LANES {
                lanes[l] += chunk[l];
            }
        }
        acc[0] = lanes;
        for j in 1..parent.len() {
            let (done, rest) = mono.split_at_mut(j * BLOCK);
            let p = &done[parent[j] * BLOCK..parent[j] * BLOCK + BLOCK];
            let off = axis[j] * padded + start;
            let s = &soa_diff[off..off + BLOCK];
            let mut lanes = acc[j];
            if j < stored {
                for ((m, a), b) in rest[..BLOCK]
                    .chunks_exact_mut(LANES)
                    .zip(p.chunks_exact(LANES))
                    .zip(s.chunks_exact(LANES))
                {
                    for l in 0..LANES {
                        let v = a[l] * b[l];
                        m[l] = v;
                        lanes[l] += v;
                    }
                }
            } else {
                for (a, b) in p.chunks_exact(LANES).zip(s.chunks_exact(LANES)) {
                    for l in 0..LANES {
                        lanes[l] += a[l] * b[l];
                    }
                }
            }
            acc[j] = lanes;
        }
    }
}

/// Same arithmetic as [`monomial_blocks`] compiled for wider vectors; no
/// fused multiply-add, so results are bit-identical.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn monomial_blocks_avx2(
    stored: usize,
    parent: &[usize],
    axis: &[usize],
    soa_diff: &[f64],
    soa_e: &[f64],
    mono: &mut [f64],
    acc: &mut [[f64; LANES]],
) {
    monomial_blocks(stored, parent, axis, soa_diff, soa_e, mono, acc)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn monomial_blocks_avx512(
    stored: usize,
    parent: &[usize],
    axis: &[usize],
    soa_diff: &[f64],
    soa_e: &[f64],
    mono: &mut [f64],
    acc: &mut [[f64; LANES]],
) {
    monomial_blocks(stored, parent, axis, soa_diff, soa_e, mono, acc)
}

#[derive(Clone, Copy)]
enum Simd {
    Portable,
    #[cfg(target_arch = "x86_64")]
    Avx2,
    #[cfg(target_arch = "x86_64")]
    Avx512,
}

fn detect_simd() -> Simd {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            return Simd::Avx512;
        }
        if std::arch::is_x86_feature_detected!("avx2") {
            return Simd::Avx2;
        }
    }
    Simd::Portable
}

/// Unweighted kernel values `exp(-‖x_i - c‖² / 2σ²)` for every sample.
fn kernel_column(points: &[f64], dim: usize, center: &[f64], inv_sigma: f64, out: &mut [f64]) {
    for (o, x) in out.iter_mut().zip(points.chunks_exact(dim)) {
        let mut r2 = 0.0;
        for k in 0..dim {
            let s = (x[k] - center[k]) * inv_sigma;
            r2 += s * s;
        }
        *o = guarded_exp(-0.5 * r2);
    }
}

/// Symmetric kernel matrix over the rows `reps` of `points`, row-major
/// `reps.len()²`. Each unordered pair is evaluated once; tiles keep the
/// mirrored writes in cache. `(a - b)²` equals `(b - a)²` bitwise, so entries
/// match [`kernel_column`] exactly.
fn kernel_matrix(points: &[f64], dim: usize, reps: &[usize], inv_sigma: f64) -> Vec<f64> {
    let d = reps.len();
    // axis-major copy of the representatives
    let mut coords = vec![0.0; dim * d];
    for t in 0..dim {
        for (r, &i) in reps.iter().enumerate() {
            coords[t * d + r] = points[i * dim + t];
        }
    }
    let mut k = vec![0.0; d * d];
    let mut tile = [0.0; TILE * TILE];
    for bi in (0..d).step_by(TILE) {
        let hi = (bi + TILE).min(d) - bi;
        for bj in (bi..d).step_by(TILE) {
            let wj = (bj + TILE).min(d) - bj;
            let tile = &mut tile[..hi * TILE];
            tile.fill(0.0);
            for t in 0..dim {
                let axis = &coords[t * d..(t + 1) * d];
                let ys = &axis[bj..bj + wj];
                for (ti, row) in tile.chunks_exact_mut(TILE).enumerate() {
                    let x = axis[bi + ti];
                    for (r, &y) in row[..wj].iter_mut().zip(ys) {
                        let s = (x - y) * inv_sigma;
                        *r += s * s;
                    }
                }
            }
            for (ti, row) in tile.chunks_exact_mut(TILE).enumerate() {
                // on diagonal tiles only the upper half is evaluated
                let from = if bi == bj { ti } else { 0 };
                for v in &mut row[from..wj] {
                    *v = guarded_exp(-0.5 * *v);
                }
                let a = bi + ti;
                k[a * d + bj + from..a * d + bj + wj].copy_from_slice(&row[from..wj]);
                for (tj, &v) in row[from..wj].iter().enumerate() {
                    k[(bj + from + tj) * d + a] = v;
                }
            }
        }
    }
    k
}

/// Accumulate `C_α` for a center over flat, row-major `points`, given the
/// unweighted kernel value of every sample.
#[allow(clippy::too_many_arguments)]
fn accumulate_coefficients(
    indices: &MultiIndexSet,
    points: &[f64],
    weights: &[f64],
    kernel: &[f64],
    center: &[f64],
    inv_sigma: f64,
    coef: &mut [f64],
    ws: &mut Workspace,
) -> Result<()> {
    let dim = indices.dim();
    let n = weights.len();
    let padded = n.div_ceil(BLOCK) * BLOCK;
    // padding carries zero weight and stays zero through the recurrence
    ws.soa_diff.clear();
    ws.soa_diff.resize(dim * padded, 0.0);
    ws.soa_e.clear();
    ws.soa_e.resize(padded, 0.0);
    for k in 0..dim {
        let col = &mut ws.soa_diff[k * padded..k * padded + n];
        for (s, x) in col.iter_mut().zip(points.chunks_exact(dim)) {
            *s = (x[k] - center[k]) * inv_sigma;
        }
    }
    for ((e, &w), &kv) in ws.soa_e.iter_mut().zip(weights).zip(kernel) {
        *e = if w == 0.0 { 0.0 } else { w * kv };
    }
    for a in ws.lane_acc.iter_mut() {
        *a = [0.0; LANES];
    }

    let (parent, axis) = (&indices.parent[..], &indices.axis[..]);
    let stored = indices.lower_degree_count();
    let (d, e, m, acc) = (&ws.soa_diff, &ws.soa_e, &mut ws.block_mono, &mut ws.lane_acc);
    match ws.simd {
        Simd::Portable => monomial_blocks(stored, parent, axis, d, e, m, acc),
        // SAFETY: the feature was detected at runtime.
        #[cfg(target_arch = "x86_64")]
        Simd::Avx2 => unsafe { monomial_blocks_avx2(stored, parent, axis, d, e, m, acc) },
        // SAFETY: the feature was detected at runtime.
        #[cfg(target_arch = "x86_64")]
        Simd::Avx512 => unsafe { monomial_blocks_avx512(stored, parent, axis, d, e, m, acc) },
    }

    for (c, acc) in coef.iter_mut().zip(&ws.lane_acc) {
        *c += acc.iter().sum::<f64>();
    }
    if coef.iter().any(|c| !c.is_finite()) {
        return Err(Error::ExpansionFailure);
    }
    Ok(())
}

#[inline]
#[allow(clippy::too_many_arguments)]
fn evaluate_scaled(
    indices: &MultiIndexSet,
    scaled: &[f64],
    center: &[f64],
    inv_sigma: f64,
    z: &[f64],
    normalizer: f64,
    cutoff: Option<f64>,
    ws: &mut Workspace,
) -> f64 {
    let mut r2 = 0.0;
    let mut sup: f64 = 0.0;
    for k in 0..indices.dim() {
        let t = (z[k] - center[k]) * inv_sigma;
        ws.diff[k] = t;
        r2 += t * t;
        sup = sup.max(t.abs());
    }
    if -0.5 * r2 < UNDERFLOW_EXPONENT {
        return 0.0;
    }
    if let Some(limit) = cutoff {
        if sup > limit {
            return 0.0;
        }
    }
    indices.monomials(&ws.diff, 1.0, &mut ws.mono);
    let series: f64 = ws.mono.iter().zip(scaled).map(|(m, c)| m * c).sum();
    (normalizer * (-0.5 * r2).exp() * series).max(0.0)
}

fn flatten_samples(samples: &[WeightedSample], dim: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::domain("empty sample set"));
    }
    let mut points = Vec::with_capacity(samples.len() * dim);
    let mut weights = Vec::with_capacity(samples.len());
    for s in samples {
        if s.point.dim() != dim {
            return Err(Error::domain(format!(
                "dimension mismatch: expected {dim}, got {}",
                s.point.dim()
            )));
        }
        if !(s.weight.is_finite() && s.weight >= 0.0) {
            return Err(Error::domain("weights must be finite and non-negative"));
        }
        points.extend_from_slice(&s.point);
        weights.push(s.weight);
    }
    Ok((points, weights))
}

/// Build the order-`order` expansion of `Σ w_i K(· - x_i)` around `center`.
pub fn build_expansion(
    samples: &[WeightedSample],
    center: &[f64],
    order: usize,
    sigma: Bandwidth,
) -> Result<MultipoleExpansion> {
    if center.is_empty() || center.iter().any(|c| !c.is_finite()) {
        return Err(Error::domain("center must be a finite point"));
    }
    let (points, weights) = flatten_samples(samples, center.len())?;
    let indices = Arc::new(MultiIndexSet::new(center.len(), order));
    let mut coefficients = vec![0.0; indices.len()];
    let mut ws = Workspace::new(&indices);
    let inv_sigma = 1.0 / sigma.value();
    let mut kernel = vec![0.0; weights.len()];
    kernel_column(&points, center.len(), center, inv_sigma, &mut kernel);
    accumulate_coefficients(
        &indices,
        &points,
        &weights,
        &kernel,
        center,
        inv_sigma,
        &mut coefficients,
        &mut ws,
    )?;
    let scaled = coefficients
        .iter()
        .zip(&indices.inv_factorial)
        .map(|(c, f)| c * f)
        .collect();
    Ok(MultipoleExpansion {
        center: center.to_vec(),
        sigma,
        indices,
        coefficients,
        scaled,
    })
}

/// Approximate `Σ w_i K(z - x_i)` from an expansion, clamped at zero.
pub fn evaluate_expansion(exp: &MultipoleExpansion, z: &[f64]) -> Result<f64> {
    if z.len() != exp.center.len() {
        return Err(Error::domain("probe dimension does not match expansion"));
    }
    if z.iter().any(|c| !c.is_finite()) {
        return Err(Error::domain("probe must be finite"));
    }
    let mut ws = Workspace::new(&exp.indices);
    Ok(evaluate_scaled(
        &exp.indices,
        &exp.scaled,
        &exp.center,
        1.0 / exp.sigma.value(),
        z,
        gaussian_normalizer(exp.center.len()),
        None,
        &mut ws,
    ))
}

/// Options for stochastic-filtered grid construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterOptions {
    pub order: usize,
    /// When set, a probe farther than this many bandwidths from its center
    /// along any axis evaluates to zero instead of using the series.
    pub cutoff_sigmas: Option<f64>,
}

impl Default for FilterOptions {
    fn default() -> Self {
        FilterOptions {
            order: DEFAULT_ORDER,
            cutoff_sigmas: None,
        }
    }
}

impl FilterOptions {
    pub fn with_order(order: usize) -> Self {
        FilterOptions {
            order,
            ..Default::default()
        }
    }
}

/// Operation counts and timings of one stochastic-filtered grid.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FilterStats {
    pub expansions_built: usize,
    pub evaluations: usize,
    pub distinct_centers: usize,
    pub build_time: Duration,
    pub eval_time: Duration,
}

/// Map every sample to the first sample with bit-identical coordinates.
fn canonical_indices(points: &[f64], dim: usize) -> (Vec<usize>, usize) {
    let mut first: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut canonical = Vec::with_capacity(points.len() / dim);
    for (i, p) in points.chunks_exact(dim).enumerate() {
        let key: Vec<u64> = p.iter().map(|c| c.to_bits()).collect();
        canonical.push(*first.entry(key).or_insert(i));
    }
    let distinct = first.len();
    (canonical, distinct)
}

/// Core of stochastic filtering. Probes are `(cell center, tail)`.
#[allow(clippy::too_many_arguments)]
fn stochastic_filter<R: Rng + ?Sized>(
    points: &[f64],
    weights: &[f64],
    dim: usize,
    tail: &[f64],
    grid: &GridSpec,
    options: &FilterOptions,
    sigma: Bandwidth,
    rng: &mut R,
) -> Result<(Vec<f64>, FilterStats)> {
    grid.validate()?;
    debug_assert_eq!(dim, 2 + tail.len());
    let n = weights.len();
    if n == 0 {
        return Err(Error::domain("empty sample set"));
    }
    if weights.iter().sum::<f64>() <= 0.0 {
        return Err(Error::domain("weights must sum to a positive value"));
    }
    let (canonical, distinct) = canonical_indices(points, dim);

    // center choices are drawn sequentially in row-major cell order
    let m = grid.cell_count();
    let choices: Vec<usize> = (0..m).map(|_| canonical[rng.random_range(0..n)]).collect();

    let indices = MultiIndexSet::new(dim, options.order);
    let terms = indices.len();
    let inv_sigma = 1.0 / sigma.value();
    let mut ws = Workspace::new(&indices);

    let build_start = Instant::now();
    let mut slot = vec![usize::MAX; n];
    let mut scaled: Vec<f64> = Vec::new();
    let mut built = 0;
    // Centers are sample points, so once most distinct samples serve as
    // centers it pays to evaluate each unordered pair of the kernel once.
    let mut used = vec![false; n];
    for &c in &choices {
        used[c] = true;
    }
    let used_count = used.iter().filter(|&&u| u).count();
    let matrix = (distinct <= KERNEL_MATRIX_LIMIT && 2 * used_count >= distinct).then(|| {
        let reps: Vec<usize> = (0..n).filter(|&i| canonical[i] == i).collect();
        let mut rank = vec![usize::MAX; n];
        for (r, &i) in reps.iter().enumerate() {
            rank[i] = r;
        }
        let rank: Vec<usize> = (0..n).map(|i| rank[canonical[i]]).collect();
        (kernel_matrix(points, dim, &reps, inv_sigma), rank)
    });
    let mut kernel = vec![0.0; n];
    for &c in &choices {
        if slot[c] != usize::MAX {
            continue;
        }
        let center = &points[c * dim..(c + 1) * dim];
        match &matrix {
            Some((k, rank)) => {
                let row = &k[rank[c] * distinct..(rank[c] + 1) * distinct];
                for (kv, &r) in kernel.iter_mut().zip(rank) {
                    *kv = row[r];
                }
            }
            None => kernel_column(points, dim, center, inv_sigma, &mut kernel),
        }
        slot[c] = built;
        built += 1;
        let offset = scaled.len();
        scaled.resize(offset + terms, 0.0);
        accumulate_coefficients(
            &indices,
            points,
            weights,
            &kernel,
            center,
            inv_sigma,
            &mut scaled[offset..],
            &mut ws,
        )?;
        for (v, f) in scaled[offset..].iter_mut().zip(&indices.inv_factorial) {
            *v *= f;
        }
    }
    let build_time = build_start.elapsed();

    let normalizer = gaussian_normalizer(dim);
    let mut probe = vec![0.0; dim];
    probe[2..].copy_from_slice(tail);
    // written once up front so page faults stay out of the evaluation timing
    let mut values = vec![0.0; m];
    values.fill(0.0);
    let eval_start = Instant::now();
    for ((cell, &c), value) in choices.iter().enumerate().zip(values.iter_mut()) {
        let [x, y] = grid.cell_center(cell);
        probe[0] = x;
        probe[1] = y;
        let s = slot[c] * terms;
        *value = evaluate_scaled(
            &indices,
            &scaled[s..s + terms],
            &points[c * dim..(c + 1) * dim],
            inv_sigma,
            &probe,
            normalizer,
            options.cutoff_sigmas,
            &mut ws,
        );
    }
    let eval_time = eval_start.elapsed();

    Ok((
        values,
        FilterStats {
            expansions_built: built,
            evaluations: m,
            distinct_centers: distinct,
            build_time,
            eval_time,
        },
    ))
}

/// Stochastic-filtered multipole density over a 2-D grid.
pub fn multipole_grid<R: Rng + ?Sized>(
    samples: &[WeightedSample],
    grid: &GridSpec,
    order: usize,
    sigma: Bandwidth,
    rng: &mut R,
) -> Result<SparseDensityGrid> {
    multipole_grid_with(samples, grid, &FilterOptions::with_order(order), sigma, rng).map(|(g, _)| g)
}

pub fn multipole_grid_with<R: Rng + ?Sized>(
    samples: &[WeightedSample],
    grid: &GridSpec,
    options: &FilterOptions,
    sigma: Bandwidth,
    rng: &mut R,
) -> Result<(SparseDensityGrid, FilterStats)> {
    let (points, weights) = flatten_samples(samples, 2)?;
    let (values, stats) = stochastic_filter(&points, &weights, 2, &[], grid, options, sigma, rng)?;
    Ok((SparseDensityGrid::from_dense(*grid, &values), stats))
}

/// Stochastic-filtered conditional density of `z` given `y_obs`.
///
/// `train_joint` holds concatenated `(z, y)` points with `z` two-dimensional.
/// The product of the z- and y-kernels is a single kernel in the joint
/// space, so each cell is the joint expansion evaluated at `(cell, y_obs)`.
/// Normalizing over the grid absorbs the conditional denominator.
pub fn conditional_multipole_grid<R: Rng + ?Sized>(
    train_joint: &[Point],
    y_obs: &[f64],
    weights: &[f64],
    grid: &GridSpec,
    order: usize,
    sigma: Bandwidth,
    rng: &mut R,
) -> Result<SparseDensityGrid> {
    conditional_multipole_grid_with(
        train_joint,
        y_obs,
        weights,
        grid,
        &FilterOptions::with_order(order),
        sigma,
        rng,
    )
    .map(|(g, _)| g)
}

pub fn conditional_multipole_grid_with<R: Rng + ?Sized>(
    train_joint: &[Point],
    y_obs: &[f64],
    weights: &[f64],
    grid: &GridSpec,
    options: &FilterOptions,
    sigma: Bandwidth,
    rng: &mut R,
) -> Result<(SparseDensityGrid, FilterStats)> {
    if y_obs.iter().any(|c| !c.is_finite()) {
        return Err(Error::domain("observation must be finite"));
    }
    if weights.len() != train_joint.len() {
        return Err(Error::domain("weights must align with training points"));
    }
    let dim = 2 + y_obs.len();
    let samples: Vec<WeightedSample> = train_joint
        .iter()
        .zip(weights)
        .map(|(p, &w)| WeightedSample::new(p.clone(), w))
        .collect::<Result<_>>()?;
    let (points, weights) = flatten_samples(&samples, dim)?;
    let (values, stats) = stochastic_filter(&points, &weights, dim, y_obs, grid, options, sigma, rng)?;
    let sparse = SparseDensityGrid::from_dense(*grid, &values);
    if sparse.is_empty() {
        return Err(Error::OutsideSupport);
    }
    Ok((sparse, stats))
}

/// Separable Gaussian blur of a row-major `g × g` array.
///
/// The kernel is truncated at [`SMOOTH_TRUNCATION`] standard deviations and
/// renormalized over the taps that fall inside the grid.
pub fn smooth_values(values: &[f64], g: usize, sigma_cells: f64) -> Result<Vec<f64>> {
    if !(sigma_cells.is_finite() && sigma_cells > 0.0) {
        return Err(Error::domain("smoothing sigma must be positive"));
    }
    if values.len() != g * g {
        return Err(Error::domain("value count does not match grid"));
    }
    let radius = (SMOOTH_TRUNCATION * sigma_cells).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma_cells * sigma_cells)).exp())
        .collect();
    let blur = |input: &[f64], stride_out: usize, stride_in: usize| -> Vec<f64> {
        // stride_in walks along the blurred axis, stride_out across it
        let mut out = vec![0.0; g * g];
        for line in 0..g {
            for pos in 0..g as isize {
                let mut acc = 0.0;
                let mut norm = 0.0;
                for (t, w) in taps.iter().enumerate() {
                    let q = pos + t as isize - radius;
                    if q < 0 || q >= g as isize {
                        continue;
                    }
                    acc += w * input[line * stride_out + q as usize * stride_in];
                    norm += w;
                }
                out[line * stride_out + pos as usize * stride_in] = acc / norm;
            }
        }
        out
    };
    let along_rows = blur(values, g, 1);
    Ok(blur(&along_rows, 1, g))
}

/// Smooth a stochastic-filtered grid and normalize it to unit mass.
pub fn gaussian_smooth(grid: &SparseDensityGrid, smooth_sigma_cells: f64) -> Result<DensityGrid> {
    let spec = *grid.spec();
    let values = smooth_values(&grid.to_dense_values(), spec.resolution, smooth_sigma_cells)?;
    DensityGrid::from_values(spec, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{kde_grid, rule_of_thumb_bandwidth};
    use crate::rng::stream;

    fn pt(c: &[f64]) -> Point {
        Point::new(c.to_vec()).unwrap()
    }

    fn bw(s: f64) -> Bandwidth {
        Bandwidth::new(s).unwrap()
    }

    fn brute_sum(samples: &[WeightedSample], z: &[f64], sigma: f64) -> f64 {
        let norm = gaussian_normalizer(z.len());
        samples
            .iter()
            .map(|s| {
                let r2: f64 = z.iter().zip(&s.point[..]).map(|(a, b)| (a - b) * (a - b)).sum();
                s.weight * norm * (-r2 / (2.0 * sigma * sigma)).exp()
            })
            .sum()
    }

    #[test]
    fn coefficient_count_law() {
        for d in 1..=6 {
            for p in 0..=8 {
                let set = MultiIndexSet::new(d, p);
                assert_eq!(set.len(), coefficient_count(d, p), "d={d} p={p}");
                for j in 0..set.len() {
                    assert!(set.exponents(j).iter().sum::<u32>() as usize <= p);
                }
            }
        }
        assert_eq!(coefficient_count(2, 4), 15);
        assert_eq!(coefficient_count(4, 4), 70);
    }

    #[test]
    fn inverse_factorials() {
        let set = MultiIndexSet::new(3, 5);
        for j in 0..set.len() {
            let fact: f64 = set
                .exponents(j)
                .iter()
                .map(|&e| (1..=e).map(|v| v as f64).product::<f64>())
                .product();
            assert!((set.inv_factorial[j] * fact - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn sample_at_center_only_has_constant_term() {
        let samples = WeightedSample::uniform(&[pt(&[0.3, 0.6])]);
        let exp = build_expansion(&samples, &[0.3, 0.6], 6, bw(0.1)).unwrap();
        assert_eq!(exp.coefficient(&[0, 0]), Some(1.0));
        assert!(exp.coefficients()[1..].iter().all(|&c| c == 0.0));
        let at_center = evaluate_expansion(&exp, &[0.3, 0.6]).unwrap();
        assert!((at_center - gaussian_normalizer(2)).abs() < 1e-15);
    }

    #[test]
    fn symmetric_pair_cancels_odd_terms() {
        let h = 0.37;
        let samples = WeightedSample::uniform(&[pt(&[h, 2.0]), pt(&[-h, 2.0])]);
        let exp = build_expansion(&samples, &[0.0, 2.0], 7, bw(0.5)).unwrap();
        for j in 0..exp.len() {
            let alpha = exp.indices().exponents(j);
            if alpha[0] % 2 == 1 {
                assert_eq!(exp.coefficients()[j], 0.0, "{alpha:?}");
            }
        }
    }

    #[test]
    fn order_eight_matches_brute_force_near_center() {
        let mut rng = stream(5);
        let sigma = 0.3;
        let samples: Vec<WeightedSample> = (0..10)
            .map(|_| {
                WeightedSample::new(
                    pt(&[rng.random::<f64>() * 0.6, rng.random::<f64>() * 0.6]),
                    0.5 + rng.random::<f64>(),
                )
                .unwrap()
            })
            .collect();
        let center = [0.3, 0.3];
        let exp = build_expansion(&samples, &center, 8, bw(sigma)).unwrap();
        for _ in 0..50 {
            let r = rng.random::<f64>() * sigma;
            let a = rng.random::<f64>() * std::f64::consts::TAU;
            let z = [center[0] + r * a.cos(), center[1] + r * a.sin()];
            let approx = evaluate_expansion(&exp, &z).unwrap();
            let exact = brute_sum(&samples, &z, sigma);
            assert!((approx - exact).abs() / exact < 1e-3, "{approx} vs {exact}");
        }
    }

    #[test]
    fn far_probe_underflows() {
        let samples = WeightedSample::uniform(&[pt(&[0.0, 0.0]), pt(&[0.1, 0.0])]);
        let exp = build_expansion(&samples, &[0.0, 0.0], 4, bw(0.1)).unwrap();
        assert_eq!(evaluate_expansion(&exp, &[5.0, 0.0]).unwrap(), 0.0);
        assert!(evaluate_expansion(&exp, &[0.0]).is_err());
    }

    #[test]
    fn higher_order_is_more_accurate() {
        let mut rng = stream(9);
        let sigma = 0.2;
        let samples: Vec<WeightedSample> = WeightedSample::uniform(
            &(0..15)
                .map(|_| pt(&[rng.random::<f64>() * 0.4, rng.random::<f64>() * 0.4]))
                .collect::<Vec<_>>(),
        );
        let center = [0.2, 0.2];
        let z = [0.2 + sigma, 0.2];
        let exact = brute_sum(&samples, &z, sigma);
        let err = |p| {
            let exp = build_expansion(&samples, &center, p, bw(sigma)).unwrap();
            (evaluate_expansion(&exp, &z).unwrap() - exact).abs()
        };
        assert!(err(12) < err(0));
    }

    #[test]
    fn overflow_is_reported() {
        let samples = vec![WeightedSample::new(pt(&[0.0]), 1e308).unwrap(); 4];
        assert!(matches!(
            build_expansion(&samples, &[0.0], 2, bw(1.0)),
            Err(Error::ExpansionFailure)
        ));
    }

    #[test]
    fn linearity_of_coefficients() {
        let mut rng = stream(21);
        let mk = |rng: &mut crate::rng::RandomStream, n: usize| -> Vec<WeightedSample> {
            (0..n)
                .map(|_| {
                    WeightedSample::new(pt(&[rng.random(), rng.random(), rng.random()]), rng.random()).unwrap()
                })
                .collect()
        };
        let a = mk(&mut rng, 6);
        let b = mk(&mut rng, 9);
        let center = [0.5, 0.5, 0.5];
        let ea = build_expansion(&a, &center, 5, bw(0.4)).unwrap();
        let eb = build_expansion(&b, &center, 5, bw(0.4)).unwrap();
        let mut ab = a.clone();
        ab.extend(b.iter().cloned());
        let eab = build_expansion(&ab, &center, 5, bw(0.4)).unwrap();
        for j in 0..eab.len() {
            let sum = ea.coefficients()[j] + eb.coefficients()[j];
            assert!((eab.coefficients()[j] - sum).abs() <= 1e-13 * sum.abs().max(1.0));
        }
    }

    #[test]
    fn single_sample_grid_matches_kde() {
        let spec = GridSpec::unit(32);
        let samples = WeightedSample::uniform(&[pt(&[0.41, 0.63])]);
        let sigma = bw(0.08);
        let mut rng = stream(2);
        let sparse = multipole_grid(&samples, &spec, 8, sigma, &mut rng).unwrap();
        let approx = sparse.normalized().unwrap();
        let exact = kde_grid(&samples, &spec, sigma).unwrap();
        for (a, e) in approx.mass().iter().zip(exact.mass()) {
            assert!((a - e).abs() <= 1e-6 * e, "{a} vs {e}");
        }
    }

    #[test]
    fn delta_like_kernels_mark_their_cells() {
        let spec = GridSpec::unit(16);
        let cells = [spec.index(2, 3), spec.index(9, 9), spec.index(14, 1)];
        let pts: Vec<Point> = cells.iter().map(|&c| pt(&spec.cell_center(c))).collect();
        let samples = WeightedSample::uniform(&pts);
        let mut expected = cells.to_vec();
        expected.sort();
        // a marked cell keeps its mass only when it drew its own sample as center
        let mut union = std::collections::BTreeSet::new();
        for seed in 0..20 {
            let sparse = multipole_grid(&samples, &spec, 4, bw(1e-3), &mut stream(seed)).unwrap();
            for &c in sparse.cells().keys() {
                assert!(expected.contains(&c));
                union.insert(c);
            }
        }
        assert_eq!(union.into_iter().collect::<Vec<_>>(), expected);
    }

    #[test]
    fn grids_are_reproducible_for_a_seed() {
        let spec = GridSpec::unit(24);
        let pts: Vec<Point> = (0..12).map(|i| pt(&[0.05 * i as f64 + 0.2, 0.5 - 0.02 * i as f64])).collect();
        let samples = WeightedSample::uniform(&pts);
        let a = multipole_grid(&samples, &spec, 4, bw(0.1), &mut stream(8)).unwrap();
        let b = multipole_grid(&samples, &spec, 4, bw(0.1), &mut stream(8)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn build_count_is_bounded_by_distinct_points() {
        let spec = GridSpec::unit(32);
        let mut pts: Vec<Point> = (0..5).map(|i| pt(&[0.1 * i as f64 + 0.3, 0.4])).collect();
        pts.extend(pts.clone());
        let samples = WeightedSample::uniform(&pts);
        let (_, stats) =
            multipole_grid_with(&samples, &spec, &FilterOptions::default(), bw(0.1), &mut stream(1)).unwrap();
        assert_eq!(stats.evaluations, 1024);
        assert_eq!(stats.distinct_centers, 5);
        assert!(stats.expansions_built <= 5);
    }

    #[test]
    fn conditional_reduces_when_y_is_constant() {
        let spec = GridSpec::unit(32);
        let mut rng = stream(13);
        let z: Vec<[f64; 2]> = (0..20).map(|_| [rng.random::<f64>(), rng.random::<f64>()]).collect();
        let y = [0.25, 0.7];
        let joint: Vec<Point> = z.iter().map(|p| pt(&[p[0], p[1], y[0], y[1]])).collect();
        let zs: Vec<Point> = z.iter().map(|p| pt(p)).collect();
        let weights: Vec<f64> = (0..20).map(|i| 1.0 + i as f64 * 0.1).collect();
        let weighted: Vec<WeightedSample> =
            zs.iter().zip(&weights).map(|(p, &w)| WeightedSample::new(p.clone(), w).unwrap()).collect();
        let sigma = bw(0.15);
        let cond = conditional_multipole_grid(&joint, &y, &weights, &spec, 4, sigma, &mut stream(77))
            .unwrap()
            .normalized()
            .unwrap();
        let plain = multipole_grid(&weighted, &spec, 4, sigma, &mut stream(77))
            .unwrap()
            .normalized()
            .unwrap();
        for (a, b) in cond.mass().iter().zip(plain.mass()) {
            assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn conditional_outside_support() {
        let spec = GridSpec::unit(16);
        let joint = vec![pt(&[0.5, 0.5, 0.2]), pt(&[0.4, 0.6, 0.25])];
        let sigma = bw(0.02);
        let err = conditional_multipole_grid(&joint, &[0.2 + 50.0 * 0.02 * 20.0], &[1.0, 1.0], &spec, 4, sigma, &mut stream(0))
            .unwrap_err();
        assert!(matches!(err, Error::OutsideSupport));
    }

    #[test]
    fn smoothing_impulse_response() {
        let spec = GridSpec::unit(21);
        let center = spec.index(10, 10);
        let mut values = vec![0.0; spec.cell_count()];
        values[center] = 1.0;
        let sparse = SparseDensityGrid::from_dense(spec, &values);
        let g = gaussian_smooth(&sparse, 1.5).unwrap();
        assert_eq!(g.argmax(), center);
        assert!((g.total() - 1.0).abs() < 1e-9);
        let m = |r, c| g.mass()[spec.index(r, c)];
        assert!((m(10, 12) - m(10, 8)).abs() < 1e-15);
        assert!((m(12, 10) - m(8, 10)).abs() < 1e-15);
        assert!((m(12, 10) - m(10, 12)).abs() < 1e-15);
    }

    #[test]
    fn smoothing_preserves_uniform() {
        let spec = GridSpec::unit(17);
        let sparse = SparseDensityGrid::from_dense(spec, &vec![2.5; spec.cell_count()]);
        let g = gaussian_smooth(&sparse, 1.5).unwrap();
        let u = 1.0 / spec.cell_count() as f64;
        assert!(g.mass().iter().all(|m| (m - u).abs() < 1e-9));
    }

    #[test]
    fn smoothing_rejects_bad_sigma() {
        assert!(smooth_values(&[1.0; 4], 2, 0.0).is_err());
    }

    #[test]
    fn tv_to_kde_after_smoothing() {
        let spec = GridSpec::unit(64);
        let mut rng = stream(0);
        let pts: Vec<Point> = (0..25)
            .map(|_| pt(&[0.2 + 0.6 * rng.random::<f64>(), 0.2 + 0.6 * rng.random::<f64>()]))
            .collect();
        let sigma = rule_of_thumb_bandwidth(&pts).unwrap();
        let samples = WeightedSample::uniform(&pts);
        let sparse = multipole_grid(&samples, &spec, 4, sigma, &mut rng).unwrap();
        let smooth = gaussian_smooth(&sparse, DEFAULT_SMOOTH_SIGMA_CELLS).unwrap();
        let exact = kde_grid(&samples, &spec, sigma).unwrap();
        let tv = smooth.total_variation(&exact);
        assert!(tv < 0.15, "tv = {tv}");
    }
}
