//! K-fold cross-validation of search episodes over several methods.

use std::fmt::Write as _;
use std::io::Write;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, derived_stream};
use crate::search::{run_episode, EpisodeResult, SearchConfig};
use crate::situation_model::{learn_model, Method};

/// Seeded random partition of `0..n` into `folds` near-equal test splits.
pub fn fold_partition(n: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 || n < folds {
        return Err(Error::Config(format!("cannot split {n} images into {folds} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derived_stream(seed, &[b"folds"]));
    let mut parts = vec![Vec::new(); folds];
    for (i, idx) in order.into_iter().enumerate() {
        parts[i % folds].push(idx);
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok(parts)
}

/// Per-episode row of the raw results file. Contains no timings so that
/// identical inputs give identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub method: Method,
    pub fold: usize,
    pub image_id: String,
    pub completed: bool,
    pub iterations: usize,
    pub localized_at: std::collections::BTreeMap<String, Option<usize>>,
    pub workspace_updates: usize,
    pub fallbacks: usize,
    pub cluster_size_sum: usize,
    pub cluster_size_count: usize,
}

impl EpisodeSummary {
    fn from_result(fold: usize, r: &EpisodeResult) -> Self {
        EpisodeSummary {
            method: r.method,
            fold,
            image_id: r.image_id.clone(),
            completed: r.completed,
            iterations: r.iterations,
            localized_at: r.localized_at.clone(),
            workspace_updates: r.trace.iter().filter(|t| t.workspace_updated).count(),
            fallbacks: r.fallback_count(),
            cluster_size_sum: r.cluster_sizes().sum(),
            cluster_size_count: r.cluster_sizes().count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldStats {
    pub fold: usize,
    pub episodes: usize,
    pub median_iterations: f64,
    pub completion_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: Method,
    pub episodes: usize,
    /// Failures count as `max_iterations`.
    pub median_iterations: f64,
    pub completion_pct: f64,
    pub mean_cluster_size: Option<f64>,
    pub fallbacks: usize,
    pub per_fold: Vec<FoldStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub folds: usize,
    pub master_seed: u64,
    pub max_iterations: usize,
    pub methods: Vec<MethodReport>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Timings {
    pub learn: Vec<(Method, Duration)>,
    pub episodes: Vec<(Method, Duration)>,
}

impl Timings {
    fn add(list: &mut Vec<(Method, Duration)>, m: Method, d: Duration) {
        match list.iter_mut().find(|(k, _)| *k == m) {
            Some((_, t)) => *t += d,
            None => list.push((m, d)),
        }
    }

    pub fn learn_time(&self, m: Method) -> Duration {
        self.learn.iter().find(|(k, _)| *k == m).map_or(Duration::ZERO, |(_, d)| *d)
    }

    pub fn episode_time(&self, m: Method) -> Duration {
        self.episodes.iter().find(|(k, _)| *k == m).map_or(Duration::ZERO, |(_, d)| *d)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub report: ExperimentReport,
    pub raw: Vec<EpisodeSummary>,
    pub timings: Timings,
}

/// Median with the usual midpoint rule for even counts.
pub fn median(values: &[usize]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid] as f64
    } else {
        (v[mid - 1] + v[mid]) as f64 / 2.0
    }
}

fn stats(rows: &[&EpisodeSummary]) -> (f64, f64) {
    let iterations: Vec<usize> = rows.iter().map(|r| r.iterations).collect();
    let completed = rows.iter().filter(|r| r.completed).count();
    (median(&iterations), 100.0 * completed as f64 / rows.len().max(1) as f64)
}

/// Aggregate raw episode rows into per-method statistics.
pub fn summarize(raw: &[EpisodeSummary], methods: &[Method], folds: usize, master_seed: u64, max_iterations: usize) -> ExperimentReport {
    let reports = methods
        .iter()
        .map(|&m| {
            let rows: Vec<&EpisodeSummary> = raw.iter().filter(|r| r.method == m).collect();
            let (median_iterations, completion_pct) = stats(&rows);
            let count: usize = rows.iter().map(|r| r.cluster_size_count).sum();
            let sum: usize = rows.iter().map(|r| r.cluster_size_sum).sum();
            let per_fold = (0..folds)
                .map(|f| {
                    let fr: Vec<&EpisodeSummary> = rows.iter().copied().filter(|r| r.fold == f).collect();
                    let (median_iterations, completion_pct) = stats(&fr);
                    FoldStats {
                        fold: f,
                        episodes: fr.len(),
                        median_iterations,
                        completion_pct,
                    }
                })
                .collect();
            MethodReport {
                method: m,
                episodes: rows.len(),
                median_iterations,
                completion_pct,
                mean_cluster_size: (count > 0).then(|| sum as f64 / count as f64),
                fallbacks: rows.iter().map(|r| r.fallbacks).sum(),
                per_fold,
            }
        })
        .collect();
    ExperimentReport {
        folds,
        master_seed,
        max_iterations,
        methods: reports,
    }
}

/// Learn on each training split, run one episode per test image and method,
/// and aggregate over all test images.
///
/// Episodes within a fold run in parallel; each uses a stream derived from
/// the master seed and the image id, so results do not depend on the number
/// of worker threads.
pub fn cross_validate(
    dataset: &Dataset,
    base: &SearchConfig,
    methods: &[Method],
    folds: usize,
    master_seed: u64,
) -> Result<ExperimentOutput> {
    base.validate()?;
    if methods.is_empty() {
        return Err(Error::Config("no methods selected".into()));
    }
    let parts = fold_partition(dataset.len(), folds, master_seed)?;
    let mut raw = Vec::with_capacity(dataset.len() * methods.len());
    let mut timings = Timings::default();

    for &method in methods {
        for (fold, test_idx) in parts.iter().enumerate() {
            let training: Vec<_> = parts
                .iter()
                .enumerate()
                .filter(|(f, _)| *f != fold)
                .flat_map(|(_, idx)| idx.iter().map(|&i| dataset.images[i].clone()))
                .collect();
            let config = SearchConfig {
                method,
                seed: derive_seed(master_seed, &[b"model", &(fold as u64).to_le_bytes()]),
                ..base.clone()
            };
            let wrap = |image_id: &str, e: Error| Error::Episode {
                fold,
                image_id: image_id.to_string(),
                method: method.to_string(),
                source: Box::new(e),
            };
            let start = Instant::now();
            let model = learn_model(&training, method, &config.model_params()).map_err(|e| wrap("-", e))?;
            Timings::add(&mut timings.learn, method, start.elapsed());

            let start = Instant::now();
            let results: Vec<EpisodeSummary> = test_idx
                .par_iter()
                .map(|&i| {
                    let truth = &dataset.images[i];
                    let mut rng = derived_stream(master_seed, &[b"episode", truth.image_id.as_bytes()]);
                    run_episode(&model, truth, &config, &mut rng)
                        .map(|r| EpisodeSummary::from_result(fold, &r))
                        .map_err(|e| wrap(&truth.image_id, e))
                })
                .collect::<Result<_>>()?;
            Timings::add(&mut timings.episodes, method, start.elapsed());
            raw.extend(results);
        }
    }

    let report = summarize(&raw, methods, folds, master_seed, base.max_iterations);
    Ok(ExperimentOutput { report, raw, timings })
}

pub fn write_raw<W: Write>(raw: &[EpisodeSummary], mut out: W) -> Result<()> {
    for row in raw {
        serde_json::to_writer(&mut out, row)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Long-format CSV: `method,statistic,value`.
pub fn write_report_csv<W: Write>(report: &ExperimentReport, timings: Option<&Timings>, mut out: W) -> Result<()> {
    writeln!(out, "method,statistic,value")?;
    for m in &report.methods {
        writeln!(out, "{},episodes,{}", m.method, m.episodes)?;
        writeln!(out, "{},median_iterations,{}", m.method, m.median_iterations)?;
        writeln!(out, "{},completion_pct,{:.2}", m.method, m.completion_pct)?;
        if let Some(c) = m.mean_cluster_size {
            writeln!(out, "{},mean_cluster_size,{c:.3}", m.method)?;
        }
        writeln!(out, "{},fallbacks,{}", m.method, m.fallbacks)?;
        for f in &m.per_fold {
            writeln!(out, "{},fold{}_median_iterations,{}", m.method, f.fold, f.median_iterations)?;
            writeln!(out, "{},fold{}_completion_pct,{:.2}", m.method, f.fold, f.completion_pct)?;
        }
        if let Some(t) = timings {
            writeln!(out, "{},learn_seconds,{:.3}", m.method, t.learn_time(m.method).as_secs_f64())?;
            writeln!(out, "{},episode_seconds,{:.3}", m.method, t.episode_time(m.method).as_secs_f64())?;
        }
    }
    Ok(())
}

/// Aligned text table, one row per method.
pub fn format_report_table(report: &ExperimentReport, timings: Option<&Timings>) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<16} {:>9} {:>8} {:>11} {:>13} {:>10}",
        "method", "episodes", "median", "completed%", "cluster size", "runtime s"
    );
    for m in &report.methods {
        let cluster = m.mean_cluster_size.map_or("-".to_string(), |c| format!("{c:.1}"));
        let runtime = timings.map_or("-".to_string(), |t| {
            format!("{:.1}", (t.learn_time(m.method) + t.episode_time(m.method)).as_secs_f64())
        });
        let _ = writeln!(
            s,
            "{:<16} {:>9} {:>8} {:>11.1} {:>13} {:>10}",
            m.method.name(),
            m.episodes,
            m.median_iterations,
            m.completion_pct,
            cluster,
            runtime
        );
    }
    s
}
