//! Learned situation model: joint location and joint size distributions over
//! the categories of a situation, and their conditioning on detections.
//!
//! Locations use uniform priors and a joint Gaussian over normalized centers.
//! Sizes (box width and height over image width and height) use one of four
//! families, selected by [`Method`].

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::clustering::{
    extract_feature, importance_cluster, select_model, BoxSource, ClusterModel, ImportanceCluster,
    DEFAULT_K_RANGE,
};
use crate::error::{Error, Result};
use crate::grid::{DensityGrid, GridSpec, SparseDensityGrid};
use crate::kernel::{rule_of_thumb_bandwidth, Bandwidth, Point, WeightedSample};
use crate::multipole::{
    conditional_multipole_grid, gaussian_smooth, multipole_grid, DEFAULT_ORDER, DEFAULT_SMOOTH_SIGMA_CELLS,
};
use crate::rng::derived_stream;

pub const MIN_TRAINING_IMAGES: usize = 10;
/// Relative diagonal loading applied to fitted covariances.
pub const COVARIANCE_REGULARIZATION: f64 = 1e-6;
const ABSOLUTE_COVARIANCE_FLOOR: f64 = 1e-12;
/// Smallest kernel bandwidth used for size densities (normalized units).
pub const MIN_BANDWIDTH: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = BoundingBox { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite()) {
            return Err(Error::domain("box coordinates must be finite"));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::domain("box width and height must be positive"));
        }
        Ok(())
    }

    pub fn left(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn right(&self) -> f64 {
        self.cx + self.w / 2.0
    }

    pub fn top(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn bottom(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let iw = (self.right().min(other.right()) - self.left().max(other.left())).max(0.0);
        let ih = (self.bottom().min(other.bottom()) - self.top().max(other.top())).max(0.0);
        iw * ih
    }

    /// Area of the part of the box inside a `width × height` image.
    pub fn clipped_area(&self, width: f64, height: f64) -> f64 {
        let iw = (self.right().min(width) - self.left().max(0.0)).max(0.0);
        let ih = (self.bottom().min(height) - self.top().max(0.0)).max(0.0);
        iw * ih
    }

    pub fn clamped_center(&self, width: f64, height: f64) -> (f64, f64) {
        (self.cx.clamp(0.0, width), self.cy.clamp(0.0, height))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SituationImage {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    /// One box per category, keyed by category name.
    #[serde(rename = "objects")]
    pub boxes: BTreeMap<String, BoundingBox>,
}

impl SituationImage {
    pub fn categories(&self) -> Vec<String> {
        self.boxes.keys().cloned().collect()
    }

    pub fn size(&self) -> (f64, f64) {
        (self.width as f64, self.height as f64)
    }

    /// Normalized `(w / W, h / H)` of a category's box.
    pub fn normalized_dims(&self, category: &str) -> Option<[f64; 2]> {
        let b = self.boxes.get(category)?;
        Some([b.w / self.width as f64, b.h / self.height as f64])
    }

    /// Normalized `(cx / W, cy / H)` of a category's box.
    pub fn normalized_center(&self, category: &str) -> Option<[f64; 2]> {
        let b = self.boxes.get(category)?;
        Some([b.cx / self.width as f64, b.cy / self.height as f64])
    }
}

/// Image size plus the boxes known so far, indexed by category position.
#[derive(Debug, Clone, PartialEq)]
pub struct Detections {
    pub width: f64,
    pub height: f64,
    pub boxes: Vec<Option<BoundingBox>>,
}

impl Detections {
    pub fn empty(width: f64, height: f64, categories: usize) -> Self {
        Detections {
            width,
            height,
            boxes: vec![None; categories],
        }
    }

    pub fn observed_except(&self, category: usize) -> Vec<usize> {
        (0..self.boxes.len())
            .filter(|&j| j != category && self.boxes[j].is_some())
            .collect()
    }
}

impl BoxSource for Detections {
    fn image_size(&self) -> (f64, f64) {
        (self.width, self.height)
    }

    fn box_of(&self, category: usize) -> Option<BoundingBox> {
        self.boxes.get(category).copied().flatten()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "multipole-ic")]
    MultipoleIc,
    #[serde(rename = "multipole-no-ic")]
    MultipoleNoIc,
    #[serde(rename = "mvn")]
    Mvn,
    #[serde(rename = "uniform")]
    Uniform,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::MultipoleIc, Method::MultipoleNoIc, Method::Mvn, Method::Uniform];

    pub fn name(self) -> &'static str {
        match self {
            Method::MultipoleIc => "multipole-ic",
            Method::MultipoleNoIc => "multipole-no-ic",
            Method::Mvn => "mvn",
            Method::Uniform => "uniform",
        }
    }

    pub fn is_multipole(self) -> bool {
        matches!(self, Method::MultipoleIc | Method::MultipoleNoIc)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MvnModel {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl MvnModel {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 || covariance.shape() != (d, d) {
            return Err(Error::domain("covariance must be square and match the mean"));
        }
        if mean.iter().chain(covariance.iter()).any(|v| !v.is_finite()) {
            return Err(Error::domain("MVN parameters must be finite"));
        }
        Ok(MvnModel { mean, covariance })
    }

    /// Sample mean and unbiased covariance, with `1e-6 · trace / dim` added
    /// to the diagonal.
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(Error::DegenerateData("need at least two rows to fit an MVN".into()));
        }
        let d = rows[0].len();
        if d == 0 || rows.iter().any(|r| r.len() != d) {
            return Err(Error::domain("rows must share a positive dimension"));
        }
        let data = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
        let mean = DVector::from_fn(d, |j, _| data.column(j).mean());
        let centered = DMatrix::from_fn(n, d, |i, j| data[(i, j)] - mean[j]);
        let mut cov = centered.transpose() * &centered / (n - 1) as f64;
        cov = (&cov + cov.transpose()) * 0.5;
        let reg = (COVARIANCE_REGULARIZATION * cov.trace() / d as f64).max(ABSOLUTE_COVARIANCE_FLOOR);
        for j in 0..d {
            cov[(j, j)] += reg;
        }
        MvnModel::new(mean, cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn marginal(&self, dims: &[usize]) -> MvnModel {
        MvnModel {
            mean: DVector::from_fn(dims.len(), |i, _| self.mean[dims[i]]),
            covariance: DMatrix::from_fn(dims.len(), dims.len(), |i, j| self.covariance[(dims[i], dims[j])]),
        }
    }

    /// Cell-center evaluation on a 2-D grid, normalized to unit mass.
    pub fn rasterize(&self, grid: &GridSpec) -> Result<DensityGrid> {
        grid.validate()?;
        if self.dim() != 2 {
            return Err(Error::domain("only 2-D Gaussians can be rasterized"));
        }
        let inv = self
            .covariance
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Conditioning("singular 2-D covariance".into()))?;
        let exponents: Vec<f64> = (0..grid.cell_count())
            .map(|cell| {
                let [x, y] = grid.cell_center(cell);
                let dx = x - self.mean[0];
                let dy = y - self.mean[1];
                -0.5 * (inv[(0, 0)] * dx * dx + (inv[(0, 1)] + inv[(1, 0)]) * dx * dy + inv[(1, 1)] * dy * dy)
            })
            .collect();
        // shifting by the peak keeps the result identical after normalization
        let peak = exponents.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        DensityGrid::from_values(*grid, exponents.iter().map(|e| (e - peak).exp()).collect())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DVector<f64>> {
        let chol = self
            .covariance
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Conditioning("covariance is not positive definite".into()))?;
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        Ok(&self.mean + chol.l() * z)
    }
}

/// Gaussian conditional of the unobserved dimensions (ascending order) given
/// values for `observed`.
pub fn mvn_condition(model: &MvnModel, observed: &[usize], values: &[f64]) -> Result<MvnModel> {
    let d = model.dim();
    if observed.is_empty() || observed.len() >= d {
        return Err(Error::domain("observed dimensions must be a proper non-empty subset"));
    }
    if observed.len() != values.len() {
        return Err(Error::domain("one value per observed dimension is required"));
    }
    let mut seen = vec![false; d];
    for &o in observed {
        if o >= d || seen[o] {
            return Err(Error::domain("observed dimensions must be distinct and in range"));
        }
        seen[o] = true;
    }
    let free: Vec<usize> = (0..d).filter(|&i| !seen[i]).collect();
    let pick = |rows: &[usize], cols: &[usize]| {
        DMatrix::from_fn(rows.len(), cols.len(), |i, j| model.covariance[(rows[i], cols[j])])
    };
    let s11 = pick(&free, &free);
    let s12 = pick(&free, observed);
    let s22 = pick(observed, observed);
    let chol = s22
        .cholesky()
        .ok_or_else(|| Error::Conditioning("observed covariance block is singular".into()))?;
    let resid = DVector::from_fn(observed.len(), |i, _| values[i] - model.mean[observed[i]]);
    let mean = DVector::from_fn(free.len(), |i, _| model.mean[free[i]]) + &s12 * chol.solve(&resid);
    let mut cov = s11 - &s12 * chol.solve(&s12.transpose());
    cov = (&cov + cov.transpose()) * 0.5;
    MvnModel::new(mean, cov)
}

#[derive(Debug, Clone, PartialEq)]
pub enum LocationDistribution {
    Uniform,
    /// 2-D Gaussian over normalized image coordinates.
    Gaussian(MvnModel),
}

impl LocationDistribution {
    /// Draw a normalized center; Gaussian draws are not clamped here.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<[f64; 2]> {
        match self {
            LocationDistribution::Uniform => Ok([rng.random::<f64>(), rng.random::<f64>()]),
            LocationDistribution::Gaussian(mvn) => {
                let v = mvn.sample(rng)?;
                Ok([v[0], v[1]])
            }
        }
    }

    pub fn to_grid(&self, grid: &GridSpec) -> Result<DensityGrid> {
        match self {
            LocationDistribution::Uniform => Ok(DensityGrid::uniform(*grid)),
            LocationDistribution::Gaussian(mvn) => mvn.rasterize(grid),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub grid: GridSpec,
    pub order: usize,
    pub smooth_sigma_cells: f64,
    pub k_range: (usize, usize),
    pub seed: u64,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams {
            grid: GridSpec::default(),
            order: DEFAULT_ORDER,
            smooth_sigma_cells: DEFAULT_SMOOTH_SIGMA_CELLS,
            k_range: DEFAULT_K_RANGE,
            seed: 0,
        }
    }
}

/// Training features and clustering for one set of localized categories.
#[derive(Debug, Clone)]
pub struct ContextIndex {
    pub localized: Vec<usize>,
    pub features: Vec<Vec<f64>>,
    /// `None` when the features could not be clustered (e.g. all identical).
    pub clusters: Option<ClusterModel>,
}

impl ContextIndex {
    fn members_for(&self, test: &[f64]) -> Result<ImportanceCluster> {
        match &self.clusters {
            Some(model) => importance_cluster(model, &self.features, test),
            None => {
                let whole = ClusterModel {
                    k: 1,
                    centroids: vec![test.to_vec()],
                    assignment: vec![0; self.features.len()],
                    wss: 0.0,
                    ch_score: f64::NAN,
                };
                importance_cluster(&whole, &self.features, test)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct TrainingImage {
    width: f64,
    height: f64,
}

struct TrainingBoxes<'a> {
    image: TrainingImage,
    boxes: &'a [BoundingBox],
}

impl BoxSource for TrainingBoxes<'_> {
    fn image_size(&self) -> (f64, f64) {
        (self.image.width, self.image.height)
    }

    fn box_of(&self, category: usize) -> Option<BoundingBox> {
        self.boxes.get(category).copied()
    }
}

#[derive(Debug, Clone)]
pub struct SituationModel {
    pub method: Method,
    pub params: ModelParams,
    pub categories: Vec<String>,
    pub joint_location: MvnModel,
    /// Rows of normalized `(w, h)` per category, concatenated in category order.
    pub joint_dims_data: Vec<Vec<f64>>,
    pub joint_dims_mvn: MvnModel,
    pub size_priors: Vec<DensityGrid>,
    /// Importance-clustering indices keyed by bitmask of localized categories.
    pub context: BTreeMap<u32, ContextIndex>,
}

fn category_mask(cats: &[usize]) -> u32 {
    cats.iter().fold(0, |m, &c| m | (1 << c))
}

/// Turn a stochastic-filtered grid into a distribution: smooth when the
/// samples had more than one distinct center, otherwise just normalize.
fn finish_grid(sparse: &SparseDensityGrid, distinct_centers: usize, smooth_sigma_cells: f64) -> Result<DensityGrid> {
    if distinct_centers > 1 {
        gaussian_smooth(sparse, smooth_sigma_cells)
    } else {
        sparse.normalized()
    }
}

fn distinct_rows(rows: &[Vec<f64>]) -> usize {
    rows.iter()
        .map(|r| r.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect::<std::collections::HashSet<_>>()
        .len()
}

/// Histogram of the sample cells, used when every kernel underflows.
fn histogram(grid: &GridSpec, samples: &[WeightedSample]) -> Result<DensityGrid> {
    let mut values = vec![0.0; grid.cell_count()];
    for s in samples {
        values[grid.cell_of([s.point[0], s.point[1]])] += s.weight;
    }
    DensityGrid::from_values(*grid, values)
}

fn learn_size_prior(points: &[Vec<f64>], params: &ModelParams, label: &str) -> Result<DensityGrid> {
    let grid = params.grid;
    let pts: Vec<Point> = points.iter().map(|p| Point::new(p.clone())).collect::<Result<_>>()?;
    let sigma = match rule_of_thumb_bandwidth(&pts) {
        Ok(s) => Bandwidth::new(s.value().max(MIN_BANDWIDTH))?,
        // every box identical: all mass in its cell
        Err(Error::DegenerateData(_)) => {
            return Ok(DensityGrid::point_mass(grid, grid.cell_of([points[0][0], points[0][1]])));
        }
        Err(e) => return Err(e),
    };
    let samples = WeightedSample::uniform(&pts);
    let mut rng = derived_stream(params.seed, &[b"size-prior", label.as_bytes()]);
    let sparse = multipole_grid(&samples, &grid, params.order, sigma, &mut rng)?;
    match finish_grid(&sparse, distinct_rows(points), params.smooth_sigma_cells) {
        Err(Error::EmptyGrid) => histogram(&grid, &samples),
        other => other,
    }
}

/// Fit the situation model for one method.
pub fn learn_model(training: &[SituationImage], method: Method, params: &ModelParams) -> Result<SituationModel> {
    params.grid.validate()?;
    if training.len() < MIN_TRAINING_IMAGES {
        return Err(Error::DegenerateData(format!(
            "need at least {MIN_TRAINING_IMAGES} training images, got {}",
            training.len()
        )));
    }
    let categories = training[0].categories();
    if categories.is_empty() || categories.len() > 16 {
        return Err(Error::domain("between 1 and 16 categories are supported"));
    }
    for img in training {
        if img.boxes.keys().ne(categories.iter()) {
            return Err(Error::Invariant {
                image_id: img.image_id.clone(),
                message: "category set differs from the first training image".into(),
            });
        }
        if img.width == 0 || img.height == 0 {
            return Err(Error::Invariant {
                image_id: img.image_id.clone(),
                message: "image dimensions must be positive".into(),
            });
        }
        for b in img.boxes.values() {
            b.validate()?;
        }
    }

    let rows = |f: fn(&SituationImage, &str) -> Option<[f64; 2]>| -> Vec<Vec<f64>> {
        training
            .iter()
            .map(|img| categories.iter().flat_map(|c| f(img, c).expect("category present")).collect())
            .collect()
    };
    let location_rows = rows(SituationImage::normalized_center);
    let joint_dims_data = rows(SituationImage::normalized_dims);
    let joint_location = MvnModel::fit(&location_rows)?;
    let joint_dims_mvn = MvnModel::fit(&joint_dims_data)?;

    let size_priors = (0..categories.len())
        .map(|c| match method {
            Method::MultipoleIc | Method::MultipoleNoIc => {
                let pts: Vec<Vec<f64>> = joint_dims_data.iter().map(|r| r[2 * c..2 * c + 2].to_vec()).collect();
                learn_size_prior(&pts, params, &categories[c])
            }
            Method::Mvn => joint_dims_mvn.marginal(&[2 * c, 2 * c + 1]).rasterize(&params.grid),
            Method::Uniform => Ok(DensityGrid::uniform(params.grid)),
        })
        .collect::<Result<Vec<_>>>()?;

    let mut context = BTreeMap::new();
    if method == Method::MultipoleIc && categories.len() > 1 {
        let boxes: Vec<(TrainingImage, Vec<BoundingBox>)> = training
            .iter()
            .map(|img| {
                let (w, h) = img.size();
                (TrainingImage { width: w, height: h }, img.boxes.values().copied().collect())
            })
            .collect();
        for mask in 1u32..(1 << categories.len()) - 1 {
            let localized: Vec<usize> = (0..categories.len()).filter(|c| mask & (1 << c) != 0).collect();
            let features: Vec<Vec<f64>> = boxes
                .iter()
                .map(|(image, b)| {
                    extract_feature(&TrainingBoxes { image: *image, boxes: b }, &localized).map(|f| f.values)
                })
                .collect::<Result<_>>()?;
            let mut rng = derived_stream(params.seed, &[b"context", &mask.to_le_bytes()]);
            let clusters = match select_model(&features, params.k_range, &mut rng) {
                Ok(m) => Some(m),
                Err(Error::DegenerateData(_)) => None,
                Err(e) => return Err(e),
            };
            context.insert(
                mask,
                ContextIndex {
                    localized,
                    features,
                    clusters,
                },
            );
        }
    }

    Ok(SituationModel {
        method,
        params: params.clone(),
        categories,
        joint_location,
        joint_dims_data,
        joint_dims_mvn,
        size_priors,
        context,
    })
}

/// Why a conditioned distribution reverted to the prior.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Fallback {
    OutsideSupport,
    Conditioning(String),
}

impl fmt::Display for Fallback {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Fallback::OutsideSupport => f.write_str("outside-support"),
            Fallback::Conditioning(m) => write!(f, "conditioning: {m}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConditionedSize {
    pub category: usize,
    pub grid: DensityGrid,
    pub fallback: Option<Fallback>,
    pub cluster_size: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct ConditionedLocation {
    pub category: usize,
    pub distribution: LocationDistribution,
    pub fallback: Option<Fallback>,
}

impl SituationModel {
    pub fn category_index(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == name)
    }

    fn normalized_dims_of(&self, det: &Detections, j: usize) -> [f64; 2] {
        let b = det.boxes[j].expect("observed category has a box");
        [b.w / det.width, b.h / det.height]
    }

    fn condition_size(&self, det: &Detections, c: usize, rng: &mut dyn rand::RngCore) -> Result<ConditionedSize> {
        let prior = |fallback| ConditionedSize {
            category: c,
            grid: self.size_priors[c].clone(),
            fallback,
            cluster_size: None,
        };
        let observed = det.observed_except(c);
        if observed.is_empty() {
            return Ok(prior(None));
        }
        match self.method {
            Method::Uniform => Ok(ConditionedSize {
                category: c,
                grid: DensityGrid::uniform(self.params.grid),
                fallback: None,
                cluster_size: None,
            }),
            Method::Mvn => {
                let dims: Vec<usize> = observed.iter().flat_map(|&j| [2 * j, 2 * j + 1]).collect();
                let values: Vec<f64> = observed.iter().flat_map(|&j| self.normalized_dims_of(det, j)).collect();
                let conditioned = mvn_condition(&self.joint_dims_mvn, &dims, &values).and_then(|cond| {
                    let free: Vec<usize> = (0..self.joint_dims_mvn.dim()).filter(|d| !dims.contains(d)).collect();
                    let at = |d: usize| free.iter().position(|&f| f == d).expect("free dim");
                    cond.marginal(&[at(2 * c), at(2 * c + 1)]).rasterize(&self.params.grid)
                });
                Ok(match conditioned {
                    Ok(grid) => ConditionedSize {
                        category: c,
                        grid,
                        fallback: None,
                        cluster_size: None,
                    },
                    Err(e) => prior(Some(Fallback::Conditioning(e.to_string()))),
                })
            }
            Method::MultipoleIc | Method::MultipoleNoIc => {
                let n = self.joint_dims_data.len();
                let (members, weights, cluster_size) = if self.method == Method::MultipoleIc {
                    let index = &self.context[&category_mask(&observed)];
                    let feature = extract_feature(det, &observed)?;
                    let ic = index.members_for(&feature.values)?;
                    let size = ic.len();
                    (ic.member_indices, ic.weights, Some(size))
                } else {
                    ((0..n).collect(), vec![1.0 / n as f64; n], None)
                };
                let joint_rows: Vec<Vec<f64>> = members
                    .iter()
                    .map(|&i| {
                        let row = &self.joint_dims_data[i];
                        let mut v = row[2 * c..2 * c + 2].to_vec();
                        for &j in &observed {
                            v.extend_from_slice(&row[2 * j..2 * j + 2]);
                        }
                        v
                    })
                    .collect();
                let joint: Vec<Point> = joint_rows.iter().map(|r| Point::new(r.clone())).collect::<Result<_>>()?;
                let sigma = self.conditional_bandwidth(&joint, &observed, c)?;
                let y_obs: Vec<f64> = observed.iter().flat_map(|&j| self.normalized_dims_of(det, j)).collect();
                let result = conditional_multipole_grid(&joint, &y_obs, &weights, &self.params.grid, self.params.order, sigma, rng)
                    .and_then(|sparse| finish_grid(&sparse, distinct_rows(&joint_rows), self.params.smooth_sigma_cells));
                match result {
                    Ok(grid) => Ok(ConditionedSize {
                        category: c,
                        grid,
                        fallback: None,
                        cluster_size,
                    }),
                    Err(Error::OutsideSupport) | Err(Error::EmptyGrid) => Ok(ConditionedSize {
                        cluster_size,
                        ..prior(Some(Fallback::OutsideSupport))
                    }),
                    Err(Error::ExpansionFailure) => Ok(ConditionedSize {
                        cluster_size,
                        ..prior(Some(Fallback::Conditioning(Error::ExpansionFailure.to_string())))
                    }),
                    Err(e) => Err(e),
                }
            }
        }
    }

    /// Rule-of-thumb bandwidth on the member joint points, falling back to
    /// the whole training set when the members are degenerate.
    fn conditional_bandwidth(&self, joint: &[Point], observed: &[usize], c: usize) -> Result<Bandwidth> {
        let sigma = match rule_of_thumb_bandwidth(joint) {
            Ok(s) => s.value(),
            Err(Error::DegenerateData(_)) => {
                let all: Vec<Point> = self
                    .joint_dims_data
                    .iter()
                    .map(|row| {
                        let mut v = row[2 * c..2 * c + 2].to_vec();
                        for &j in observed {
                            v.extend_from_slice(&row[2 * j..2 * j + 2]);
                        }
                        Point::new(v)
                    })
                    .collect::<Result<_>>()?;
                rule_of_thumb_bandwidth(&all).map(|s| s.value()).unwrap_or(MIN_BANDWIDTH)
            }
            Err(e) => return Err(e),
        };
        Bandwidth::new(sigma.max(MIN_BANDWIDTH))
    }

    fn condition_location(&self, det: &Detections, c: usize) -> ConditionedLocation {
        let observed = det.observed_except(c);
        if self.method == Method::Uniform || observed.is_empty() {
            return ConditionedLocation {
                category: c,
                distribution: LocationDistribution::Uniform,
                fallback: None,
            };
        }
        let dims: Vec<usize> = observed.iter().flat_map(|&j| [2 * j, 2 * j + 1]).collect();
        let values: Vec<f64> = observed
            .iter()
            .flat_map(|&j| {
                let b = det.boxes[j].expect("observed");
                [b.cx / det.width, b.cy / det.height]
            })
            .collect();
        match mvn_condition(&self.joint_location, &dims, &values) {
            Ok(cond) => {
                let free: Vec<usize> = (0..self.joint_location.dim()).filter(|d| !dims.contains(d)).collect();
                let at = |d: usize| free.iter().position(|&f| f == d).expect("free dim");
                ConditionedLocation {
                    category: c,
                    distribution: LocationDistribution::Gaussian(cond.marginal(&[at(2 * c), at(2 * c + 1)])),
                    fallback: None,
                }
            }
            Err(e) => ConditionedLocation {
                category: c,
                distribution: LocationDistribution::Uniform,
                fallback: Some(Fallback::Conditioning(e.to_string())),
            },
        }
    }

    /// Human-readable summary: means, covariances, priors and cluster counts.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let fmt_vec = |v: &DVector<f64>| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ");
        out.push_str(&format!("method: {}\ncategories: {}\n", self.method, self.categories.join(", ")));
        out.push_str(&format!("training images: {}\n", self.joint_dims_data.len()));
        for (name, mvn) in [("joint location", &self.joint_location), ("joint dims", &self.joint_dims_mvn)] {
            out.push_str(&format!("{name} mean: {}\n{name} covariance:\n", fmt_vec(&mvn.mean)));
            for row in mvn.covariance.row_iter() {
                let cells: Vec<String> = row.iter().map(|x| format!("{x:>11.3e}")).collect();
                out.push_str(&format!("  {}\n", cells.join(" ")));
            }
        }
        for (name, prior) in self.categories.iter().zip(&self.size_priors) {
            let [w, h] = prior.spec().cell_center(prior.argmax());
            out.push_str(&format!("size prior {name}: mode at ({w:.4}, {h:.4})\n"));
        }
        for index in self.context.values() {
            let names: Vec<&str> = index.localized.iter().map(|&c| self.categories[c].as_str()).collect();
            let k = index.clusters.as_ref().map_or("none".to_string(), |m| m.k.to_string());
            out.push_str(&format!("context [{}]: k = {k}\n", names.join(", ")));
        }
        out
    }
}

/// Conditioned size grids for `targets`; categories with no other detection
/// keep their priors.
pub fn condition_size_distributions<R: Rng>(
    model: &SituationModel,
    detections: &Detections,
    targets: &[usize],
    rng: &mut R,
) -> Result<Vec<ConditionedSize>> {
    check_detections(model, detections)?;
    targets.iter().map(|&c| model.condition_size(detections, c, rng)).collect()
}

/// Conditioned location distributions for `targets`.
pub fn condition_location_distributions(
    model: &SituationModel,
    detections: &Detections,
    targets: &[usize],
) -> Result<Vec<ConditionedLocation>> {
    check_detections(model, detections)?;
    Ok(targets.iter().map(|&c| model.condition_location(detections, c)).collect())
}

fn check_detections(model: &SituationModel, det: &Detections) -> Result<()> {
    if det.boxes.len() != model.categories.len() {
        return Err(Error::domain("detections must cover the model's categories"));
    }
    if !(det.width > 0.0 && det.height > 0.0) {
        return Err(Error::domain("image dimensions must be positive"));
    }
    Ok(())
}
