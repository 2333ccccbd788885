//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Runs without the libtest harness so the lines always show.

use std::process::{Command, ExitCode};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use situate::clustering::{calinski_harabasz, kmeans, select_model};
use situate::harness::{bench_density, cross_validate, generate_synthetic, SyntheticParams};
use situate::kernel::{conditional_kde_grid, gaussian_kernel, gaussian_normalizer, kde_grid, rule_of_thumb_bandwidth};
use situate::multipole::{
    build_expansion, conditional_multipole_grid, evaluate_expansion, gaussian_smooth, multipole_grid,
    DEFAULT_SMOOTH_SIGMA_CELLS,
};
use situate::rng::stream;
use situate::search::{iou, SearchConfig};
use situate::situation_model::{mvn_condition, BoundingBox, Method, MvnModel};
use situate::{Bandwidth, GridSpec, Point, WeightedSample};

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn pt(c: &[f64]) -> Point {
    Point::new(c.to_vec()).unwrap()
}

fn bw(s: f64) -> Bandwidth {
    Bandwidth::new(s).unwrap()
}

fn kde_oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = stream(101);
    let spec = GridSpec::unit(48);
    let mut worst_single: f64 = 0.0;
    let mut worst_subnormal: f64 = 0.0;
    let mut support_mismatch = false;
    for case in 0..20 {
        let x = [rng.random::<f64>(), rng.random::<f64>()];
        let sigma = bw(0.02 + 0.2 * rng.random::<f64>());
        let samples = WeightedSample::uniform(&[pt(&x)]);
        let approx = multipole_grid(&samples, &spec, 12, sigma, &mut stream(case))
            .unwrap()
            .normalized()
            .unwrap();
        let exact = kde_grid(&samples, &spec, sigma).unwrap();
        for (a, e) in approx.mass().iter().zip(exact.mass()) {
            if *e == 0.0 {
                support_mismatch |= *a != 0.0;
            } else if e.is_normal() {
                worst_single = worst_single.max((a - e).abs() / e);
            } else {
                // subnormal tails carry fewer significant bits than the tolerance
                worst_subnormal = worst_subnormal.max((a - e).abs());
            }
        }
    }

    // p = 8, ten samples in a cluster about the center, probes within 1σ
    let mut worst_cluster: f64 = 0.0;
    for _ in 0..20 {
        let s = 0.05 + 0.3 * rng.random::<f64>();
        let center = [rng.random::<f64>(), rng.random::<f64>()];
        let samples: Vec<WeightedSample> = (0..10)
            .map(|_| {
                let p = [
                    center[0] + s * (2.0 * rng.random::<f64>() - 1.0),
                    center[1] + s * (2.0 * rng.random::<f64>() - 1.0),
                ];
                WeightedSample::new(pt(&p), 0.5 + rng.random::<f64>()).unwrap()
            })
            .collect();
        let exp = build_expansion(&samples, &center, 8, bw(s)).unwrap();
        for _ in 0..20 {
            let r = s * rng.random::<f64>();
            let a = std::f64::consts::TAU * rng.random::<f64>();
            let z = [center[0] + r * a.cos(), center[1] + r * a.sin()];
            let exact: f64 = samples
                .iter()
                .map(|smp| {
                    let r2 = (z[0] - smp.point[0]).powi(2) + (z[1] - smp.point[1]).powi(2);
                    smp.weight * gaussian_normalizer(2) * (-r2 / (2.0 * s * s)).exp()
                })
                .sum();
            let approx = evaluate_expansion(&exp, &z).unwrap();
            worst_cluster = worst_cluster.max((approx - exact).abs() / exact);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_single < 1e-6 && worst_subnormal < f64::MIN_POSITIVE && !support_mismatch && worst_cluster < 1e-3 && secs < 10.0,
        format!(
            "p=12 single-sample max rel err {worst_single:.2e} (< 1e-6) on normal-range cells, \
             subnormal cells max abs err {worst_subnormal:.1e}, support mismatch {support_mismatch}; \
             p=8 N=10 max rel err {worst_cluster:.2e} (< 1e-3); {secs:.2} s (< 10 s)"
        ),
    )
}

fn conditional_correctness() -> Outcome {
    let spec = GridSpec::unit(64);
    let mut worst_tv: f64 = 0.0;
    for seed in 0..10 {
        // dog size given walker size: 25 random training scenes, observation
        // taken from a scene outside the training set
        let scenes = generate_synthetic(&SyntheticParams::default(), 26, 200 + seed).unwrap();
        let dims = |i: usize, c: &str| scenes.images[i].normalized_dims(c).unwrap();
        let z: Vec<Point> = (0..25).map(|i| pt(&dims(i, "dog"))).collect();
        let y: Vec<Point> = (0..25).map(|i| pt(&dims(i, "walker"))).collect();
        let joint: Vec<Point> = z.iter().zip(&y).map(|(a, b)| a.concat(b)).collect();
        let sigma = rule_of_thumb_bandwidth(&joint).unwrap();
        let obs = dims(25, "walker");
        let sparse =
            conditional_multipole_grid(&joint, &obs, &[1.0; 25], &spec, 4, sigma, &mut stream(seed)).unwrap();
        let approx = gaussian_smooth(&sparse, DEFAULT_SMOOTH_SIGMA_CELLS).unwrap();
        let exact = conditional_kde_grid(&z, &y, None, &obs, &spec, sigma).unwrap();
        worst_tv = worst_tv.max(approx.total_variation(&exact));
    }

    // constant y reduces to the unconditional grid
    let mut rng = stream(299);
    let z: Vec<Point> = (0..25).map(|_| pt(&[rng.random(), rng.random()])).collect();
    let y = [0.4, 0.6];
    let joint: Vec<Point> = z.iter().map(|p| pt(&[p[0], p[1], y[0], y[1]])).collect();
    let w: Vec<f64> = (0..25).map(|_| 0.5 + rng.random::<f64>()).collect();
    let weighted: Vec<WeightedSample> =
        z.iter().zip(&w).map(|(p, &w)| WeightedSample::new(p.clone(), w).unwrap()).collect();
    let sigma = bw(0.12);
    let cond = conditional_multipole_grid(&joint, &y, &w, &spec, 4, sigma, &mut stream(5))
        .unwrap()
        .normalized()
        .unwrap();
    let plain = multipole_grid(&weighted, &spec, 4, sigma, &mut stream(5))
        .unwrap()
        .normalized()
        .unwrap();
    let reduction = cond
        .mass()
        .iter()
        .zip(plain.mass())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    outcome(
        worst_tv < 0.15 && reduction <= 1e-9,
        format!("max TV over 10 seeds {worst_tv:.4} (< 0.15); constant-y max cell diff {reduction:.2e} (<= 1e-9)"),
    )
}

fn product_identity() -> Outcome {
    let mut rng = stream(303);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let da = 1 + (rng.random::<f64>() * 3.0) as usize;
        let db = 1 + (rng.random::<f64>() * 3.0) as usize;
        let a: Vec<f64> = (0..da).map(|_| 4.0 * rng.random::<f64>() - 2.0).collect();
        let b: Vec<f64> = (0..db).map(|_| 4.0 * rng.random::<f64>() - 2.0).collect();
        let s = bw(0.2 + 1.8 * rng.random::<f64>());
        let lhs = gaussian_kernel(&a, s).unwrap() * gaussian_kernel(&b, s).unwrap();
        let ab: Vec<f64> = a.iter().chain(&b).copied().collect();
        let rhs = gaussian_kernel(&ab, s).unwrap();
        worst = worst.max((lhs - rhs).abs() / rhs);
    }
    outcome(worst <= 1e-12, format!("max rel err over 100 triples {worst:.2e} (<= 1e-12)"))
}

/// Mean and variance of each free coordinate from a dense 2-D grid of the
/// joint density with the observed coordinates fixed.
fn grid_conditional(model: &MvnModel, free: [usize; 2], observed: &[usize], values: &[f64]) -> [(f64, f64); 2] {
    let precision = model.covariance.clone().try_inverse().unwrap();
    let n = 801;
    let ranges: Vec<(f64, f64)> = free
        .iter()
        .map(|&d| {
            let sd = model.covariance[(d, d)].sqrt();
            (model.mean[d] - 10.0 * sd, 20.0 * sd / (n - 1) as f64)
        })
        .collect();
    let mut x = DVector::zeros(4);
    for (&d, &v) in observed.iter().zip(values) {
        x[d] = v;
    }
    let mut logs = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            x[free[0]] = ranges[0].0 + i as f64 * ranges[0].1;
            x[free[1]] = ranges[1].0 + j as f64 * ranges[1].1;
            let d = &x - &model.mean;
            logs[i * n + j] = -0.5 * (d.transpose() * &precision * &d)[(0, 0)];
        }
    }
    let peak = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    let mut m1 = [0.0; 2];
    let mut m2 = [0.0; 2];
    for i in 0..n {
        for j in 0..n {
            let p = (logs[i * n + j] - peak).exp();
            let u = [ranges[0].0 + i as f64 * ranges[0].1, ranges[1].0 + j as f64 * ranges[1].1];
            total += p;
            for k in 0..2 {
                m1[k] += p * u[k];
                m2[k] += p * u[k] * u[k];
            }
        }
    }
    [0, 1].map(|k| {
        let mean = m1[k] / total;
        (mean, m2[k] / total - mean * mean)
    })
}

fn mvn_conditioning() -> Outcome {
    let mut rng = stream(404);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut worst_mean: f64 = 0.0;
    let mut worst_var: f64 = 0.0;
    for _ in 0..10 {
        let a = DMatrix::from_fn(4, 4, |_, _| normal.sample(&mut rng));
        let cov = &a * a.transpose() + DMatrix::identity(4, 4) * 0.5;
        let mean = DVector::from_fn(4, |_, _| 2.0 * normal.sample(&mut rng));
        let model = MvnModel::new(mean, cov).unwrap();
        let observed = [1usize, 3];
        let values: Vec<f64> = observed
            .iter()
            .map(|&d| model.mean[d] + model.covariance[(d, d)].sqrt() * normal.sample(&mut rng))
            .collect();
        let cond = mvn_condition(&model, &observed, &values).unwrap();
        let oracle = grid_conditional(&model, [0, 2], &observed, &values);
        for (k, (m, v)) in oracle.iter().enumerate() {
            let sd = v.sqrt();
            worst_mean = worst_mean.max((cond.mean[k] - m).abs() / m.abs().max(sd));
            worst_var = worst_var.max((cond.covariance[(k, k)] - v).abs() / v);
        }
    }
    outcome(
        worst_mean < 0.01 && worst_var < 0.01,
        format!(
            "10 random 4-D Gaussians, 2 observed dims: max mean err {worst_mean:.2e} of max(|mean|, sd), \
             max variance rel err {worst_var:.2e} (both < 1%)"
        ),
    )
}

fn blobs(centers: &[[f64; 2]], per: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream(seed);
    let noise = Normal::new(0.0, 0.4).unwrap();
    centers
        .iter()
        .flat_map(|c| (0..per).map(|_| vec![c[0] + noise.sample(&mut rng), c[1] + noise.sample(&mut rng)]).collect::<Vec<_>>())
        .collect()
}

fn calinski_harabasz_selection() -> Outcome {
    let data = vec![vec![0.0], vec![0.1], vec![10.0], vec![10.1]];
    let model = kmeans(&data, 2, &mut stream(0)).unwrap();
    let ch = calinski_harabasz(&data, &model).unwrap();
    let mut two = 0;
    let mut three = 0;
    for seed in 0..20 {
        let d2 = blobs(&[[0.0, 0.0], [6.0, 6.0]], 30, seed);
        let d3 = blobs(&[[0.0, 0.0], [6.0, 0.0], [3.0, 5.0]], 30, 1000 + seed);
        two += usize::from(select_model(&d2, (2, 6), &mut stream(seed)).unwrap().k == 2);
        three += usize::from(select_model(&d3, (2, 6), &mut stream(seed)).unwrap().k == 3);
    }
    outcome(
        (ch - 20000.0).abs() <= 1e-9 * 20000.0 && two == 20 && three == 20,
        format!("CH = {ch:.9} (20000 +- 1e-9 rel); k=2 chosen {two}/20, k=3 chosen {three}/20"),
    )
}

fn iou_arithmetic() -> Outcome {
    let a = BoundingBox::new(1.0, 1.0, 2.0, 2.0).unwrap();
    let b = BoundingBox::new(2.0, 1.0, 2.0, 2.0).unwrap();
    let far = BoundingBox::new(10.0, 10.0, 2.0, 2.0).unwrap();
    let (same, disjoint, third) = (iou(&a, &a), iou(&a, &far), iou(&a, &b));
    outcome(
        (same - 1.0).abs() <= 1e-12 && disjoint.abs() <= 1e-12 && (third - 1.0 / 3.0).abs() <= 1e-12,
        format!("identical {same}, disjoint {disjoint}, half-shifted {third:.15}"),
    )
}

fn end_to_end_ordering() -> Outcome {
    let start = Instant::now();
    let config = SearchConfig::default();
    let mut lines = Vec::new();
    let mut pass = config.provisional_threshold == 0.25 && config.final_threshold == 0.5 && config.max_iterations == 1000;
    for seed in 1..=3u64 {
        let data = generate_synthetic(&SyntheticParams::default(), 500, seed).unwrap();
        let out = cross_validate(&data, &config, &Method::ALL, 10, seed).unwrap();
        let get = |m: Method| out.report.methods.iter().find(|r| r.method == m).unwrap();
        let (ic, no_ic, mvn, uni) = (
            get(Method::MultipoleIc),
            get(Method::MultipoleNoIc),
            get(Method::Mvn),
            get(Method::Uniform),
        );
        let ok = ic.median_iterations <= mvn.median_iterations
            && mvn.median_iterations < uni.median_iterations
            && [ic, no_ic, mvn].iter().all(|r| r.completion_pct > uni.completion_pct);
        pass &= ok;
        lines.push(format!(
            "seed {seed}: medians ic {} / no-ic {} / mvn {} / uniform {}, completion {:.1}/{:.1}/{:.1}/{:.1}%",
            ic.median_iterations,
            no_ic.median_iterations,
            mvn.median_iterations,
            uni.median_iterations,
            ic.completion_pct,
            no_ic.completion_pct,
            mvn.completion_pct,
            uni.completion_pct
        ));
    }
    lines.push(format!("{:.0} s", start.elapsed().as_secs_f64()));
    outcome(pass, lines.join("; "))
}

fn performance_scaling() -> Outcome {
    // untimed warm-up: this runs right after the long end-to-end criterion
    bench_density(&[32, 64, 128], &[25, 100, 400], 4, 3, 0).unwrap();
    let headline = bench_density(&[64], &[450], 4, 15, 0).unwrap();
    let speedup = headline.rows[0].speedup;
    let sweep = bench_density(&[32, 64, 128], &[25, 100, 400], 4, 15, 0).unwrap();
    let r2 = sweep.eval_fit.map_or(f64::NAN, |f| f.r_squared);
    outcome(
        speedup >= 5.0 && r2 > 0.99,
        format!("M=4096 N=450 p=4 speedup {speedup:.2}x (>= 5x); eval time fit R^2 {r2:.4} (> 0.99)"),
    )
}

fn determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_situate");
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.jsonl");
    let run = |args: &[&str]| Command::new(bin).args(args).output().unwrap().status.success();
    let data_s = data.to_str().unwrap();
    let mut ok = run(&["generate", "--n", "80", "--seed", "9", "--out", data_s]);
    let mut raws = Vec::new();
    for i in 0..2 {
        let raw = dir.path().join(format!("raw{i}.jsonl"));
        ok &= run(&[
            "evaluate",
            "--data",
            data_s,
            "--folds",
            "4",
            "--seed",
            "17",
            "--max-iterations",
            "300",
            "--out-raw",
            raw.to_str().unwrap(),
        ]);
        raws.push(std::fs::read(&raw).unwrap_or_default());
    }
    let identical = ok && !raws[0].is_empty() && raws[0] == raws[1];
    outcome(identical, format!("two evaluate runs, raw files {} bytes, identical: {identical}", raws[0].len()))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("kde oracle equivalence", kde_oracle_equivalence),
        ("conditional correctness", conditional_correctness),
        ("shared-bandwidth product identity", product_identity),
        ("mvn conditioning vs dense grid", mvn_conditioning),
        ("calinski-harabasz and model selection", calinski_harabasz_selection),
        ("iou arithmetic", iou_arithmetic),
        ("end-to-end ordering", end_to_end_ordering),
        ("performance scaling", performance_scaling),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.iter().any(|f| f == &n.to_string()) {
            continue;
        }
        let o = check();
        println!("criterion {n} ({name}): {} | {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
