//! Exact Gaussian kernel density estimation.
//!
//! These are the direct O(M·N) routines. They are used wherever exact values
//! matter and as the reference that the multipole approximations are checked
//! against.

use std::f64::consts::PI;
use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{DensityGrid, GridSpec};

/// Exponents below this evaluate to exactly zero.
pub const UNDERFLOW_EXPONENT: f64 = -745.0;

#[inline]
pub(crate) fn guarded_exp(x: f64) -> f64 {
    if x < UNDERFLOW_EXPONENT {
        0.0
    } else {
        x.exp()
    }
}

/// `(2π)^(-d/2)`
#[inline]
pub fn gaussian_normalizer(dim: usize) -> f64 {
    (2.0 * PI).powf(-(dim as f64) / 2.0)
}

#[inline]
pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// A finite point in `d ≥ 1` dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Point(Vec<f64>);

impl Point {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::domain("point must have at least one coordinate"));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::domain("point coordinates must be finite"));
        }
        Ok(Point(coords))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Concatenate two points, `self` first.
    pub fn concat(&self, other: &Point) -> Point {
        let mut coords = self.0.clone();
        coords.extend_from_slice(&other.0);
        Point(coords)
    }
}

impl Deref for Point {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for Point {
    type Error = Error;

    fn try_from(coords: Vec<f64>) -> Result<Self> {
        Point::new(coords)
    }
}

impl<const N: usize> TryFrom<[f64; N]> for Point {
    type Error = Error;

    fn try_from(coords: [f64; N]) -> Result<Self> {
        Point::new(coords.to_vec())
    }
}

/// Isotropic kernel bandwidth σ.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Bandwidth(f64);

impl Bandwidth {
    pub fn new(sigma: f64) -> Result<Self> {
        if sigma.is_finite() && sigma > 0.0 {
            Ok(Bandwidth(sigma))
        } else {
            Err(Error::domain(format!("bandwidth must be positive and finite, got {sigma}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSample {
    pub point: Point,
    pub weight: f64,
}

impl WeightedSample {
    pub fn new(point: Point, weight: f64) -> Result<Self> {
        if !(weight.is_finite() && weight >= 0.0) {
            return Err(Error::domain("sample weight must be finite and non-negative"));
        }
        Ok(WeightedSample { point, weight })
    }

    /// Wrap points with equal unit weights.
    pub fn uniform(points: &[Point]) -> Vec<WeightedSample> {
        points
            .iter()
            .map(|p| WeightedSample {
                point: p.clone(),
                weight: 1.0,
            })
            .collect()
    }
}

fn common_dim<'a, I>(points: I, expected: Option<usize>) -> Result<usize>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut dim = expected;
    let mut seen = false;
    for p in points {
        seen = true;
        if p.iter().any(|c| !c.is_finite()) {
            return Err(Error::domain("non-finite coordinate"));
        }
        match dim {
            None => dim = Some(p.len()),
            Some(d) if d != p.len() => {
                return Err(Error::domain(format!(
                    "dimension mismatch: expected {d}, got {}",
                    p.len()
                )))
            }
            _ => {}
        }
    }
    if !seen {
        return Err(Error::domain("empty sample set"));
    }
    dim.filter(|&d| d > 0)
        .ok_or_else(|| Error::domain("points must have at least one coordinate"))
}

/// `K(u) = (2π)^(-d/2) exp(-‖u‖² / 2σ²)`
pub fn gaussian_kernel(u: &[f64], sigma: Bandwidth) -> Result<f64> {
    if u.is_empty() {
        return Err(Error::domain("kernel argument must have at least one coordinate"));
    }
    if u.iter().any(|c| !c.is_finite()) {
        return Err(Error::domain("kernel argument must be finite"));
    }
    let s = sigma.value();
    let r2: f64 = u.iter().map(|c| c * c).sum();
    Ok(gaussian_normalizer(u.len()) * guarded_exp(-r2 / (2.0 * s * s)))
}

/// Kernel density estimate at `z`:
/// `(σ^d N)^(-1) (2π)^(-d/2) Σ exp(-‖z - x_i‖² / 2σ²)`.
pub fn kde_estimate(samples: &[Point], z: &[f64], sigma: Bandwidth) -> Result<f64> {
    let d = common_dim(samples.iter().map(|p| &p[..]), Some(z.len()))?;
    if z.iter().any(|c| !c.is_finite()) {
        return Err(Error::domain("query point must be finite"));
    }
    let s = sigma.value();
    let inv = 1.0 / (2.0 * s * s);
    let sum: f64 = samples
        .iter()
        .map(|x| guarded_exp(-squared_distance(z, x) * inv))
        .sum();
    let z_norm = gaussian_normalizer(d) / (s.powi(d as i32) * samples.len() as f64);
    Ok(z_norm * sum)
}

/// Conditional density estimate of `z` given the observation `y_obs`:
///
/// `σ^(-d_z) Σ K(z - x_i^z) K(y - x_i^y) / Σ K(y - x_i^y)`
///
/// The `σ^(-d_z)` factor makes the result a normalized density in `z`, so it
/// coincides with [`kde_estimate`] when the observation carries no information.
///
/// Fails with [`Error::OutsideSupport`] when every kernel in the denominator
/// underflows; callers should fall back to the unconditional density.
pub fn conditional_kde(
    train_z: &[Point],
    train_y: &[Point],
    y_obs: &[f64],
    z: &[f64],
    sigma: Bandwidth,
) -> Result<f64> {
    conditional_kde_weighted(train_z, train_y, None, y_obs, z, sigma)
}

/// [`conditional_kde`] with optional per-pair weights.
pub fn conditional_kde_weighted(
    train_z: &[Point],
    train_y: &[Point],
    weights: Option<&[f64]>,
    y_obs: &[f64],
    z: &[f64],
    sigma: Bandwidth,
) -> Result<f64> {
    if train_z.len() != train_y.len() {
        return Err(Error::domain("train_z and train_y must be index-aligned"));
    }
    if let Some(w) = weights {
        if w.len() != train_z.len() {
            return Err(Error::domain("weights must align with training pairs"));
        }
    }
    let dz = common_dim(train_z.iter().map(|p| &p[..]), Some(z.len()))?;
    common_dim(train_y.iter().map(|p| &p[..]), Some(y_obs.len()))?;
    let mut numerator = 0.0;
    let mut denominator = 0.0;
    for (i, (xz, xy)) in train_z.iter().zip(train_y).enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        let ky = w * gaussian_kernel_between(y_obs, xy, sigma);
        if ky == 0.0 {
            continue;
        }
        denominator += ky;
        numerator += ky * gaussian_kernel_between(z, xz, sigma);
    }
    if denominator == 0.0 {
        return Err(Error::OutsideSupport);
    }
    Ok(numerator / denominator / sigma.value().powi(dz as i32))
}

#[inline]
fn gaussian_kernel_between(a: &[f64], b: &[f64], sigma: Bandwidth) -> f64 {
    let s = sigma.value();
    gaussian_normalizer(a.len()) * guarded_exp(-squared_distance(a, b) / (2.0 * s * s))
}

/// Pooled sample standard deviation: the square root of the mean of the
/// per-dimension unbiased variances.
pub fn pooled_std(samples: &[Point]) -> Result<f64> {
    let d = common_dim(samples.iter().map(|p| &p[..]), None)?;
    let n = samples.len();
    if n < 2 {
        return Err(Error::DegenerateData("need at least two samples".into()));
    }
    let mut total_var = 0.0;
    for k in 0..d {
        let mean = samples.iter().map(|p| p[k]).sum::<f64>() / n as f64;
        let var = samples.iter().map(|p| (p[k] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        total_var += var;
    }
    Ok((total_var / d as f64).sqrt())
}

/// Rule-of-thumb bandwidth `σ̂ (4 / ((d + 2) n))^(1 / (d + 4))` with the
/// pooled standard deviation as `σ̂`.
pub fn rule_of_thumb_bandwidth(samples: &[Point]) -> Result<Bandwidth> {
    let std = pooled_std(samples)?;
    if std <= 0.0 {
        return Err(Error::DegenerateData("all sample points are identical".into()));
    }
    Bandwidth::new(rule_of_thumb_from_std(std, samples[0].dim(), samples.len()))
}

pub fn rule_of_thumb_from_std(std: f64, dim: usize, n: usize) -> f64 {
    let d = dim as f64;
    std * (4.0 / ((d + 2.0) * n as f64)).powf(1.0 / (d + 4.0))
}

fn validate_weighted(samples: &[WeightedSample], dim: usize) -> Result<()> {
    common_dim(samples.iter().map(|s| &s.point[..]), Some(dim))?;
    if samples.iter().any(|s| !(s.weight.is_finite() && s.weight >= 0.0)) {
        return Err(Error::domain("weights must be finite and non-negative"));
    }
    if samples.iter().map(|s| s.weight).sum::<f64>() <= 0.0 {
        return Err(Error::domain("weights must sum to a positive value"));
    }
    Ok(())
}

/// Brute-force weighted KDE evaluated at every cell center, normalized to
/// probability mass.
pub fn kde_grid(samples: &[WeightedSample], grid: &GridSpec, sigma: Bandwidth) -> Result<DensityGrid> {
    grid.validate()?;
    validate_weighted(samples, 2)?;
    let s = sigma.value();
    let inv = 1.0 / (2.0 * s * s);
    let total_weight: f64 = samples.iter().map(|s| s.weight).sum();
    let z_norm = gaussian_normalizer(2) / (s * s * total_weight);
    let values = (0..grid.cell_count())
        .map(|cell| {
            let c = grid.cell_center(cell);
            let sum: f64 = samples
                .iter()
                .map(|smp| smp.weight * guarded_exp(-squared_distance(&c, &smp.point) * inv))
                .sum();
            z_norm * sum
        })
        .collect();
    DensityGrid::from_values(*grid, values)
}

/// Brute-force conditional KDE over a 2-D grid in z-space. Every cell is
/// evaluated at `(cell center, y_obs)`; the result is normalized.
pub fn conditional_kde_grid(
    train_z: &[Point],
    train_y: &[Point],
    weights: Option<&[f64]>,
    y_obs: &[f64],
    grid: &GridSpec,
    sigma: Bandwidth,
) -> Result<DensityGrid> {
    grid.validate()?;
    let mut values = Vec::with_capacity(grid.cell_count());
    for cell in 0..grid.cell_count() {
        let c = grid.cell_center(cell);
        values.push(conditional_kde_weighted(train_z, train_y, weights, y_obs, &c, sigma)?);
    }
    DensityGrid::from_values(*grid, values).map_err(|e| match e {
        Error::EmptyGrid => Error::OutsideSupport,
        other => other,
    })
}
