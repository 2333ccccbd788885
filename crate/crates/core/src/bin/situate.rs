//! Command-line front end: synthetic data, cross-validation, single-episode
//! replay, density dumps and benchmarks.
//!
//! Exit codes: 0 on success, 1 on invalid input, 2 on runtime failure.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use situate::harness::dataset::{load_annotations, save_annotations};
use situate::harness::experiment::{cross_validate, format_report_table, write_raw, write_report_csv};
use situate::harness::{bench_density, load_config, generate_synthetic, SyntheticParams};
use situate::rng::derived_stream;
use situate::search::{run_episode, SearchConfig};
use situate::situation_model::{condition_size_distributions, learn_model, BoundingBox, Detections, Method};
use situate::{Error, Result};

#[derive(Parser)]
#[command(name = "situate", version, about = "Situation-guided active object localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Overrides {
    /// Flat key = value config file applied before the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    provisional_threshold: Option<f64>,
    #[arg(long)]
    final_threshold: Option<f64>,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    order: Option<usize>,
}

impl Overrides {
    fn resolve(&self) -> Result<SearchConfig> {
        let mut cfg = match &self.config {
            Some(path) => load_config(path, SearchConfig::default())?,
            None => SearchConfig::default(),
        };
        if let Some(v) = self.provisional_threshold {
            cfg.provisional_threshold = v;
        }
        if let Some(v) = self.final_threshold {
            cfg.final_threshold = v;
        }
        if let Some(v) = self.max_iterations {
            cfg.max_iterations = v;
        }
        if let Some(v) = self.grid {
            cfg.grid_resolution = v;
        }
        if let Some(v) = self.order {
            cfg.order = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset as JSON lines.
    Generate {
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON file with generator parameters.
        #[arg(long)]
        params_file: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validate search episodes for several methods.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "multipole-ic,multipole-no-ic,mvn,uniform")]
        methods: Vec<Method>,
        #[arg(long, default_value_t = 10)]
        folds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        out_report: Option<PathBuf>,
        #[arg(long)]
        out_raw: Option<PathBuf>,
    },
    /// Replay one episode, training on every other image.
    Run {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        image_id: String,
        #[arg(long, default_value = "multipole-ic")]
        method: Method,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        trace_out: Option<PathBuf>,
    },
    /// Dump a (conditioned) size density for one category.
    Density {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        category: String,
        /// `cat=w,h[,cx,cy];...` in image-normalized units.
        #[arg(long, default_value = "")]
        condition: String,
        #[arg(long, default_value = "multipole-ic")]
        method: Method,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        out_csv: Option<PathBuf>,
        #[arg(long)]
        out_pgm: Option<PathBuf>,
    },
    /// Time brute-force and multipole density grids.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "16,32,48,64,96,128")]
        grid_sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "50,150,450")]
        cluster_sizes: Vec<usize>,
        #[arg(long, default_value_t = 4)]
        order: usize,
        #[arg(long, default_value_t = 3)]
        repetitions: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn create(path: &PathBuf) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn parse_condition(spec: &str, model_categories: &[String]) -> Result<Detections> {
    let mut det = Detections::empty(1.0, 1.0, model_categories.len());
    for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (cat, nums) = part
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected cat=w,h in {part:?}")))?;
        let idx = model_categories
            .iter()
            .position(|c| c == cat.trim())
            .ok_or_else(|| Error::Config(format!("unknown category {cat:?}")))?;
        let v: Vec<f64> = nums
            .split(',')
            .map(|x| x.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad number {x:?}"))))
            .collect::<Result<_>>()?;
        let (cx, cy) = match v.len() {
            2 => (0.5, 0.5),
            4 => (v[2], v[3]),
            _ => return Err(Error::Config(format!("expected 2 or 4 numbers in {part:?}"))),
        };
        det.boxes[idx] = Some(BoundingBox::new(cx, cy, v[0], v[1]).map_err(|e| Error::Config(e.to_string()))?);
    }
    Ok(det)
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { n, seed, params_file, out } => {
            let params: SyntheticParams = match params_file {
                Some(p) => serde_json::from_reader(File::open(p)?)?,
                None => SyntheticParams::default(),
            };
            let ds = generate_synthetic(&params, n, seed)?;
            let mut w = create(&out)?;
            save_annotations(&ds, &mut w)?;
            w.flush()?;
            eprintln!("wrote {} images to {}", ds.len(), out.display());
        }
        Command::Evaluate {
            data,
            methods,
            folds,
            seed,
            overrides,
            out_report,
            out_raw,
        } => {
            let ds = load_annotations(&data)?;
            let cfg = overrides.resolve()?;
            let out = cross_validate(&ds, &cfg, &methods, folds, seed)?;
            print!("{}", format_report_table(&out.report, Some(&out.timings)));
            if let Some(p) = out_report {
                let mut w = create(&p)?;
                write_report_csv(&out.report, Some(&out.timings), &mut w)?;
                w.flush()?;
            }
            if let Some(p) = out_raw {
                let mut w = create(&p)?;
                write_raw(&out.raw, &mut w)?;
                w.flush()?;
            }
        }
        Command::Run {
            data,
            image_id,
            method,
            seed,
            overrides,
            trace_out,
        } => {
            let ds = load_annotations(&data)?;
            let cfg = SearchConfig {
                method,
                seed,
                ..overrides.resolve()?
            };
            let truth = ds
                .find(&image_id)
                .ok_or_else(|| Error::Config(format!("no image {image_id:?} in dataset")))?;
            let training: Vec<_> = ds.images.iter().filter(|i| i.image_id != image_id).cloned().collect();
            let model = learn_model(&training, method, &cfg.model_params())?;
            let mut rng = derived_stream(seed, &[b"episode", image_id.as_bytes()]);
            let result = run_episode(&model, truth, &cfg, &mut rng)?;
            println!(
                "{} {}: {} after {} iterations",
                result.image_id,
                method,
                if result.completed { "completed" } else { "failed" },
                result.iterations
            );
            if let Some(p) = trace_out {
                let mut w = create(&p)?;
                result.write_trace(&mut w)?;
                w.flush()?;
            }
        }
        Command::Density {
            data,
            category,
            condition,
            method,
            seed,
            overrides,
            out_csv,
            out_pgm,
        } => {
            let ds = load_annotations(&data)?;
            let cfg = SearchConfig {
                method,
                seed,
                ..overrides.resolve()?
            };
            let model = learn_model(&ds.images, method, &cfg.model_params())?;
            let target = model
                .category_index(&category)
                .ok_or_else(|| Error::Config(format!("unknown category {category:?}")))?;
            let det = parse_condition(&condition, &model.categories)?;
            let mut rng = derived_stream(seed, &[b"density"]);
            let sized = condition_size_distributions(&model, &det, &[target], &mut rng)?.remove(0);
            if let Some(f) = &sized.fallback {
                eprintln!("fell back to the prior: {f}");
            }
            let grid = sized.grid;
            let [w, h] = grid.spec().cell_center(grid.argmax());
            println!("{category}: mode at w = {w:.4}, h = {h:.4} (normalized)");
            if let Some(p) = out_csv {
                let mut f = create(&p)?;
                grid.write_csv(&mut f)?;
                f.flush()?;
            }
            if let Some(p) = out_pgm {
                let mut f = create(&p)?;
                grid.write_pgm(&mut f)?;
                f.flush()?;
            }
        }
        Command::Bench {
            grid_sizes,
            cluster_sizes,
            order,
            repetitions,
            seed,
        } => {
            let report = bench_density(&grid_sizes, &cluster_sizes, order, repetitions, seed)?;
            print!("{}", report.table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
