//! The active localization loop.
//!
//! Each iteration picks a category that is not yet final, samples a box from
//! that category's current location and size distributions, scores it against
//! ground truth with an IOU oracle and updates the workspace. Any workspace
//! change re-conditions the distributions of every non-final category.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::DEFAULT_K_RANGE;
use crate::error::{Error, Result};
use crate::grid::{DensityGrid, GridSpec, DEFAULT_RESOLUTION};
use crate::multipole::{DEFAULT_ORDER, DEFAULT_SMOOTH_SIGMA_CELLS};
use crate::situation_model::{
    condition_location_distributions, condition_size_distributions, BoundingBox, Detections, LocationDistribution,
    Method, ModelParams, SituationImage, SituationModel,
};

pub const DEFAULT_PROVISIONAL_THRESHOLD: f64 = 0.25;
pub const DEFAULT_FINAL_THRESHOLD: f64 = 0.5;
pub const DEFAULT_MAX_ITERATIONS: usize = 1000;
/// Sampled sizes are capped at this multiple of the image dimension.
pub const MAX_SIZE_FACTOR: f64 = 1.5;

/// Intersection over union; zero for disjoint boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        (inter / union).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProposalStatus {
    Provisional,
    Final,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectProposal {
    pub category: usize,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub score: f64,
    pub status: ProposalStatus,
}

/// IOU of a proposed box with the ground-truth box of its category.
pub fn oracle_score(bbox: &BoundingBox, category: &str, truth: &SituationImage) -> Result<f64> {
    let target = truth
        .boxes
        .get(category)
        .ok_or_else(|| Error::domain(format!("ground truth has no category {category:?}")))?;
    Ok(iou(bbox, target))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub provisional_threshold: f64,
    pub final_threshold: f64,
    pub max_iterations: usize,
    pub grid_resolution: usize,
    pub order: usize,
    pub smooth_sigma_cells: f64,
    pub k_range: (usize, usize),
    pub method: Method,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            provisional_threshold: DEFAULT_PROVISIONAL_THRESHOLD,
            final_threshold: DEFAULT_FINAL_THRESHOLD,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            grid_resolution: DEFAULT_RESOLUTION,
            order: DEFAULT_ORDER,
            smooth_sigma_cells: DEFAULT_SMOOTH_SIGMA_CELLS,
            k_range: DEFAULT_K_RANGE,
            method: Method::MultipoleIc,
            seed: 0,
        }
    }
}

impl SearchConfig {
    /// Thresholds must satisfy `0 <= provisional <= final`. A final threshold
    /// above one is allowed and makes every episode fail.
    pub fn validate(&self) -> Result<()> {
        let (p, f) = (self.provisional_threshold, self.final_threshold);
        if !(p.is_finite() && f.is_finite() && 0.0 <= p && p <= f) {
            return Err(Error::Config(format!("thresholds need 0 <= provisional ({p}) <= final ({f})")));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        if self.grid_resolution == 0 {
            return Err(Error::Config("grid resolution must be positive".into()));
        }
        if !(self.smooth_sigma_cells.is_finite() && self.smooth_sigma_cells > 0.0) {
            return Err(Error::Config("smoothing sigma must be positive".into()));
        }
        if self.k_range.0 < 2 || self.k_range.0 > self.k_range.1 {
            return Err(Error::Config("k range must satisfy 2 <= k_min <= k_max".into()));
        }
        Ok(())
    }

    pub fn model_params(&self) -> ModelParams {
        ModelParams {
            grid: GridSpec::unit(self.grid_resolution),
            order: self.order,
            smooth_sigma_cells: self.smooth_sigma_cells,
            k_range: self.k_range,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Workspace {
    pub width: f64,
    pub height: f64,
    pub slots: Vec<Option<ObjectProposal>>,
    pub locations: Vec<LocationDistribution>,
    pub sizes: Vec<DensityGrid>,
}

impl Workspace {
    /// Empty workspace holding the model's priors.
    pub fn new(model: &SituationModel, width: f64, height: f64) -> Self {
        let n = model.categories.len();
        Workspace {
            width,
            height,
            slots: vec![None; n],
            locations: vec![LocationDistribution::Uniform; n],
            sizes: model.size_priors.clone(),
        }
    }

    pub fn detections(&self) -> Detections {
        Detections {
            width: self.width,
            height: self.height,
            boxes: self.slots.iter().map(|s| s.map(|p| p.bbox)).collect(),
        }
    }

    pub fn is_final(&self, category: usize) -> bool {
        matches!(self.slots[category], Some(p) if p.status == ProposalStatus::Final)
    }

    pub fn non_final(&self) -> Vec<usize> {
        (0..self.slots.len()).filter(|&c| !self.is_final(c)).collect()
    }
}

/// Draw a candidate box: a center from the location distribution clamped into
/// the image, and a size from a mass-weighted grid cell with uniform jitter,
/// clamped to `[1, 1.5 × image dimension]` pixels.
pub fn sample_proposal<R: Rng + ?Sized>(
    location: &LocationDistribution,
    size_grid: &DensityGrid,
    width: f64,
    height: f64,
    rng: &mut R,
) -> Result<BoundingBox> {
    let [x, y] = location.sample(rng)?;
    let [w, h] = size_grid.sample_point(rng);
    BoundingBox::new(
        (x * width).clamp(0.0, width),
        (y * height).clamp(0.0, height),
        (w * width).clamp(1.0, MAX_SIZE_FACTOR * width),
        (h * height).clamp(1.0, MAX_SIZE_FACTOR * height),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Final,
    Provisional,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub category: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub score: f64,
    pub action: Action,
    pub workspace_updated: bool,
    /// Categories whose distributions were recomputed after this iteration.
    pub reconditioned: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub fallbacks: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub cluster_sizes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub image_id: String,
    pub method: Method,
    pub completed: bool,
    /// Iteration at which the last category became final, or the budget.
    pub iterations: usize,
    pub localized_at: BTreeMap<String, Option<usize>>,
    pub trace: Vec<TraceRecord>,
}

impl EpisodeResult {
    pub fn cluster_sizes(&self) -> impl Iterator<Item = usize> + '_ {
        self.trace.iter().flat_map(|t| t.cluster_sizes.iter().copied())
    }

    pub fn fallback_count(&self) -> usize {
        self.trace.iter().map(|t| t.fallbacks.len()).sum()
    }

    /// One JSON object per iteration.
    pub fn write_trace<W: Write>(&self, mut out: W) -> Result<()> {
        for record in &self.trace {
            serde_json::to_writer(&mut out, record)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn recondition<R: Rng>(
    model: &SituationModel,
    ws: &mut Workspace,
    rng: &mut R,
    record: &mut TraceRecord,
) -> Result<()> {
    let targets = ws.non_final();
    let det = ws.detections();
    for loc in condition_location_distributions(model, &det, &targets)? {
        if let Some(f) = &loc.fallback {
            record.fallbacks.push(format!("{} location: {f}", model.categories[loc.category]));
        }
        ws.locations[loc.category] = loc.distribution;
    }
    for size in condition_size_distributions(model, &det, &targets, rng)? {
        if let Some(f) = &size.fallback {
            record.fallbacks.push(format!("{} size: {f}", model.categories[size.category]));
        }
        record.cluster_sizes.extend(size.cluster_size);
        ws.sizes[size.category] = size.grid;
    }
    record.reconditioned = targets.iter().map(|&c| model.categories[c].clone()).collect();
    Ok(())
}

/// Run one search episode on a single test image.
pub fn run_episode<R: Rng>(
    model: &SituationModel,
    truth: &SituationImage,
    config: &SearchConfig,
    rng: &mut R,
) -> Result<EpisodeResult> {
    config.validate()?;
    if truth.boxes.keys().ne(model.categories.iter()) {
        return Err(Error::Invariant {
            image_id: truth.image_id.clone(),
            message: "categories differ from the model's".into(),
        });
    }
    let (width, height) = truth.size();
    let mut ws = Workspace::new(model, width, height);
    let mut localized_at: BTreeMap<String, Option<usize>> =
        model.categories.iter().map(|c| (c.clone(), None)).collect();
    let mut trace = Vec::new();
    let mut completed = false;
    let mut iterations = config.max_iterations;

    for iteration in 1..=config.max_iterations {
        let open = ws.non_final();
        let c = open[rng.random_range(0..open.len())];
        let name = &model.categories[c];
        let bbox = sample_proposal(&ws.locations[c], &ws.sizes[c], width, height, rng)?;
        let score = oracle_score(&bbox, name, truth)?;

        let action = if score >= config.final_threshold {
            ws.slots[c] = Some(ObjectProposal {
                category: c,
                bbox,
                score,
                status: ProposalStatus::Final,
            });
            localized_at.insert(name.clone(), Some(iteration));
            Action::Final
        } else if score >= config.provisional_threshold && ws.slots[c].is_none_or(|p| score > p.score) {
            ws.slots[c] = Some(ObjectProposal {
                category: c,
                bbox,
                score,
                status: ProposalStatus::Provisional,
            });
            Action::Provisional
        } else {
            Action::Rejected
        };

        let mut record = TraceRecord {
            iteration,
            category: name.clone(),
            bbox,
            score,
            action,
            workspace_updated: action != Action::Rejected,
            reconditioned: Vec::new(),
            fallbacks: Vec::new(),
            cluster_sizes: Vec::new(),
        };
        if ws.non_final().is_empty() {
            trace.push(record);
            completed = true;
            iterations = iteration;
            break;
        }
        if record.workspace_updated {
            recondition(model, &mut ws, rng, &mut record)?;
        }
        trace.push(record);
    }

    Ok(EpisodeResult {
        image_id: truth.image_id.clone(),
        method: model.method,
        completed,
        iterations,
        localized_at,
        trace,
    })
}
