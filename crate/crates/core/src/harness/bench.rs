//! Wall-clock comparison of brute-force and multipole density grids.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::kernel::{kde_grid, rule_of_thumb_bandwidth, Bandwidth, Point, WeightedSample};
use crate::multipole::{multipole_grid_with, FilterOptions};
use crate::rng::stream;

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub resolution: usize,
    pub cells: usize,
    pub samples: usize,
    pub brute_seconds: f64,
    pub multipole_seconds: f64,
    pub build_seconds: f64,
    pub eval_seconds: f64,
    pub expansions_built: usize,
    pub speedup: f64,
}

/// Least-squares fit `t ≈ a + b·M + c·N`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LinearFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub r_squared: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub order: usize,
    pub repetitions: usize,
    pub rows: Vec<BenchRow>,
    /// Fit of multipole evaluation time (expansion builds excluded).
    pub eval_fit: Option<LinearFit>,
}

pub fn fit_linear(points: &[(f64, f64, f64)]) -> Result<LinearFit> {
    if points.len() < 3 {
        return Err(Error::domain("need at least three points for the fit"));
    }
    let x = DMatrix::from_fn(points.len(), 3, |i, j| match j {
        0 => 1.0,
        1 => points[i].0,
        _ => points[i].1,
    });
    let y = DVector::from_iterator(points.len(), points.iter().map(|p| p.2));
    let coef = x
        .clone()
        .svd(true, true)
        .solve(&y, 1e-12)
        .map_err(|e| Error::domain(format!("least squares failed: {e}")))?;
    let fitted = &x * &coef;
    let mean = y.mean();
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let ss_res: f64 = y.iter().zip(fitted.iter()).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(LinearFit {
        a: coef[0],
        b: coef[1],
        c: coef[2],
        r_squared: if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 },
    })
}

/// Time both estimators on every `(resolution, sample count)` pair. Samples
/// are a two-blob mixture in the unit square; each timing is the minimum over
/// `repetitions` interleaved runs.
pub fn bench_density(
    resolutions: &[usize],
    sample_counts: &[usize],
    order: usize,
    repetitions: usize,
    seed: u64,
) -> Result<BenchReport> {
    if resolutions.is_empty() || sample_counts.is_empty() || repetitions == 0 {
        return Err(Error::Config("bench needs grid sizes, cluster sizes and repetitions".into()));
    }
    struct Case {
        resolution: usize,
        samples: Vec<WeightedSample>,
        sigma: Bandwidth,
        brute: Duration,
        total: Duration,
        build: Duration,
        eval: Duration,
        built: usize,
    }
    let mut cases = Vec::new();
    for &n in sample_counts {
        let mut rng = stream(seed ^ n as u64);
        let points: Vec<Point> = (0..n)
            .map(|i| {
                let (cx, cy) = if i % 2 == 0 { (0.3, 0.35) } else { (0.65, 0.6) };
                Point::new(vec![cx + 0.1 * (rng.random::<f64>() - 0.5), cy + 0.1 * (rng.random::<f64>() - 0.5)])
            })
            .collect::<Result<_>>()?;
        let sigma = rule_of_thumb_bandwidth(&points)?;
        let samples = WeightedSample::uniform(&points);
        for &g in resolutions {
            cases.push(Case {
                resolution: g,
                samples: samples.clone(),
                sigma,
                brute: Duration::MAX,
                total: Duration::MAX,
                build: Duration::MAX,
                eval: Duration::MAX,
                built: 0,
            });
        }
    }
    let options = FilterOptions::with_order(order);
    // Repetitions are the outer loop and the two estimators alternate, so a
    // slow stretch of machine time is spread over every case and both methods.
    for _ in 0..repetitions {
        for case in &mut cases {
            let grid = GridSpec::unit(case.resolution);
            let t = Instant::now();
            kde_grid(&case.samples, &grid, case.sigma)?;
            case.brute = case.brute.min(t.elapsed());

            let mut r = stream(seed);
            let t = Instant::now();
            let (_, stats) = multipole_grid_with(&case.samples, &grid, &options, case.sigma, &mut r)?;
            case.total = case.total.min(t.elapsed());
            case.build = case.build.min(stats.build_time);
            case.eval = case.eval.min(stats.eval_time);
            case.built = stats.expansions_built;
        }
    }
    let rows: Vec<BenchRow> = cases
        .iter()
        .map(|c| BenchRow {
            resolution: c.resolution,
            cells: c.resolution * c.resolution,
            samples: c.samples.len(),
            brute_seconds: c.brute.as_secs_f64(),
            multipole_seconds: c.total.as_secs_f64(),
            build_seconds: c.build.as_secs_f64(),
            eval_seconds: c.eval.as_secs_f64(),
            expansions_built: c.built,
            speedup: c.brute.as_secs_f64() / c.total.as_secs_f64(),
        })
        .collect();
    let fit_points: Vec<(f64, f64, f64)> = rows
        .iter()
        .map(|r| (r.cells as f64, r.samples as f64, r.eval_seconds))
        .collect();
    Ok(BenchReport {
        order,
        repetitions,
        eval_fit: fit_linear(&fit_points).ok(),
        rows,
    })
}

impl BenchReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>6} {:>7} {:>6} {:>11} {:>11} {:>10} {:>10} {:>8}",
            "G", "M", "N", "brute s", "multipole s", "build s", "eval s", "speedup"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:>6} {:>7} {:>6} {:>11.6} {:>11.6} {:>10.6} {:>10.6} {:>8.2}",
                r.resolution, r.cells, r.samples, r.brute_seconds, r.multipole_seconds, r.build_seconds, r.eval_seconds, r.speedup
            );
        }
        if let Some(f) = self.eval_fit {
            let _ = writeln!(
                s,
                "eval time ~ {:.3e} + {:.3e}*M + {:.3e}*N  (R^2 = {:.4})",
                f.a, f.b, f.c, f.r_squared
            );
        }
        s
    }
}
