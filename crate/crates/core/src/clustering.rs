//! Context-based importance clustering.
//!
//! Training images are described by features of the objects localized so far
//! (normalized sizes and pairwise distances), clustered with k-means, and the
//! number of clusters is picked by the Calinski-Harabasz index. The test
//! image's current detections select the nearest cluster, whose members are
//! weighted by feature similarity.

use std::collections::HashSet;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};
use crate::situation_model::BoundingBox;

pub const MAX_LLOYD_ITERATIONS: usize = 100;
pub const RESTARTS: usize = 3;
pub const DEFAULT_K_RANGE: (usize, usize) = (2, 8);
const MIN_SIMILARITY_BANDWIDTH: f64 = 1e-6;

/// Anything that can report image dimensions and per-category boxes.
pub trait BoxSource {
    fn image_size(&self) -> (f64, f64);
    fn box_of(&self, category: usize) -> Option<BoundingBox>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextFeature {
    pub localized: Vec<usize>,
    pub values: Vec<f64>,
}

/// Sizes (clipped box area over image area) of the localized categories in
/// ascending category order, then center-to-center distances over the image
/// diagonal for each category pair `(i, j)`, `i < j`, in lexicographic order.
pub fn extract_feature<S: BoxSource + ?Sized>(source: &S, localized: &[usize]) -> Result<ContextFeature> {
    if localized.is_empty() {
        return Err(Error::domain("at least one localized category is required"));
    }
    let mut cats = localized.to_vec();
    cats.sort_unstable();
    cats.dedup();
    let (w, h) = source.image_size();
    let boxes: Vec<BoundingBox> = cats
        .iter()
        .map(|&c| {
            source
                .box_of(c)
                .ok_or_else(|| Error::domain(format!("no box for localized category {c}")))
        })
        .collect::<Result<_>>()?;
    let mut values = Vec::with_capacity(cats.len() * (cats.len() + 1) / 2);
    for b in &boxes {
        let size = b.clipped_area(w, h) / (w * h);
        if size <= 0.0 {
            return Err(Error::domain("localized box lies outside the image"));
        }
        values.push(size);
    }
    let diagonal = w.hypot(h);
    for i in 0..boxes.len() {
        for j in i + 1..boxes.len() {
            let (ax, ay) = boxes[i].clamped_center(w, h);
            let (bx, by) = boxes[j].clamped_center(w, h);
            values.push((ax - bx).hypot(ay - by) / diagonal);
        }
    }
    Ok(ContextFeature { localized: cats, values })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub wss: f64,
    pub ch_score: f64,
}

impl ClusterModel {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignment {
            sizes[a] += 1;
        }
        sizes
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
pub fn nearest_centroid(centroids: &[Vec<f64>], x: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(centroid, x);
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    best
}

fn distinct_count(data: &[Vec<f64>]) -> usize {
    data.iter()
        .map(|row| row.iter().map(|v| v.to_bits()).collect::<Vec<u64>>())
        .collect::<HashSet<_>>()
        .len()
}

fn validate_data(data: &[Vec<f64>]) -> Result<usize> {
    let dim = data.first().map(|r| r.len()).ok_or_else(|| Error::domain("empty data"))?;
    if dim == 0 {
        return Err(Error::domain("feature vectors must be non-empty"));
    }
    if data.iter().any(|r| r.len() != dim || r.iter().any(|v| !v.is_finite())) {
        return Err(Error::domain("feature vectors must share a dimension and be finite"));
    }
    Ok(dim)
}

fn plus_plus_init<R: Rng + ?Sized>(data: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut centroids = vec![data[rng.random_range(0..data.len())].clone()];
    let mut d2: Vec<f64> = data.iter().map(|x| sq_dist(x, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = d2.iter().rposition(|&d| d > 0.0).unwrap_or(0);
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            rng.random_range(0..data.len())
        };
        centroids.push(data[next].clone());
        for (i, x) in data.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(x, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

fn means(data: &[Vec<f64>], assignment: &[usize], k: usize, dim: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (x, &a) in data.iter().zip(assignment) {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(x) {
            *s += v;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            s.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    (sums, counts)
}

fn within_ss(data: &[Vec<f64>], centroids: &[Vec<f64>], assignment: &[usize]) -> f64 {
    data.iter()
        .zip(assignment)
        .map(|(x, &a)| sq_dist(x, &centroids[a]))
        .sum()
}

/// Lloyd's k-means from a k-means++ start.
///
/// Runs until the assignment is a fixpoint or [`MAX_LLOYD_ITERATIONS`] is
/// reached. An empty cluster is reseeded with the point farthest from its
/// current centroid.
pub fn kmeans<R: Rng + ?Sized>(data: &[Vec<f64>], k: usize, rng: &mut R) -> Result<ClusterModel> {
    let dim = validate_data(data)?;
    if k < 2 {
        return Err(Error::domain("k must be at least 2"));
    }
    if data.len() < k || distinct_count(data) < k {
        return Err(Error::DegenerateData(format!("fewer than {k} distinct points")));
    }

    let mut centroids = plus_plus_init(data, k, rng);
    let mut assignment: Vec<usize> = data.iter().map(|x| nearest_centroid(&centroids, x)).collect();
    for _ in 0..MAX_LLOYD_ITERATIONS {
        let (mut next, mut counts) = means(data, &assignment, k, dim);
        while let Some(empty) = counts.iter().position(|&n| n == 0) {
            // move the worst-fit point into the empty cluster
            let (far, _) = data
                .iter()
                .enumerate()
                .filter(|(i, _)| counts[assignment[*i]] > 1)
                .map(|(i, x)| (i, sq_dist(x, &next[assignment[i]])))
                .fold((usize::MAX, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if far == usize::MAX {
                break;
            }
            counts[assignment[far]] -= 1;
            counts[empty] += 1;
            assignment[far] = empty;
            let (m, c) = means(data, &assignment, k, dim);
            next = m;
            counts = c;
        }
        centroids = next;
        let reassigned: Vec<usize> = data.iter().map(|x| nearest_centroid(&centroids, x)).collect();
        let stable = reassigned == assignment;
        assignment = reassigned;
        if stable {
            break;
        }
    }
    let (final_centroids, counts) = means(data, &assignment, k, dim);
    if counts.contains(&0) {
        return Err(Error::DegenerateData("k-means left an empty cluster".into()));
    }
    centroids = final_centroids;
    let wss = within_ss(data, &centroids, &assignment);
    let mut model = ClusterModel {
        k,
        centroids,
        assignment,
        wss,
        ch_score: f64::NAN,
    };
    model.ch_score = if data.len() > k {
        calinski_harabasz(data, &model)?
    } else {
        f64::NAN
    };
    Ok(model)
}

/// Variance ratio `(BSS / (k - 1)) / (WSS / (n - k))`; `+∞` when WSS is zero.
pub fn calinski_harabasz(data: &[Vec<f64>], model: &ClusterModel) -> Result<f64> {
    let dim = validate_data(data)?;
    let n = data.len();
    let k = model.k;
    if k < 2 || n <= k {
        return Err(Error::domain("Calinski-Harabasz needs 2 <= k < n"));
    }
    if model.assignment.len() != n {
        return Err(Error::domain("assignment length does not match data"));
    }
    let (centroids, counts) = means(data, &model.assignment, k, dim);
    let mut grand = vec![0.0; dim];
    for x in data {
        for (g, v) in grand.iter_mut().zip(x) {
            *g += v / n as f64;
        }
    }
    let bss: f64 = centroids
        .iter()
        .zip(&counts)
        .map(|(c, &m)| m as f64 * sq_dist(c, &grand))
        .sum();
    let wss = within_ss(data, &centroids, &model.assignment);
    if wss == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok((bss / (k - 1) as f64) / (wss / (n - k) as f64))
}

/// Fit k-means for every `k` in `k_range` (best of [`RESTARTS`] by WSS) and
/// keep the model with the highest Calinski-Harabasz index; ties go to the
/// smaller `k`.
///
/// Restart streams are derived from one draw of `rng` and the `(k, restart)`
/// pair. The upper end of the range is capped at `n / 2`; values of `k`
/// exceeding the number of distinct points are skipped.
pub fn select_model<R: Rng + ?Sized>(
    data: &[Vec<f64>],
    k_range: (usize, usize),
    rng: &mut R,
) -> Result<ClusterModel> {
    validate_data(data)?;
    let lo = k_range.0.max(2);
    let hi = k_range.1.min(data.len() / 2);
    if lo > hi {
        return Err(Error::DegenerateData(format!(
            "no admissible k in [{}, {}] for {} points",
            k_range.0,
            k_range.1,
            data.len()
        )));
    }
    let distinct = distinct_count(data);
    if distinct < lo {
        return Err(Error::DegenerateData(format!("only {distinct} distinct points")));
    }
    let master: u64 = rng.random();
    let mut best: Option<ClusterModel> = None;
    for k in lo..=hi.min(distinct) {
        let mut best_k: Option<ClusterModel> = None;
        for restart in 0..RESTARTS {
            let seed = derive_seed(master, &[&(k as u64).to_le_bytes(), &(restart as u64).to_le_bytes()]);
            let model = kmeans(data, k, &mut stream(seed))?;
            if best_k.as_ref().is_none_or(|b| model.wss < b.wss) {
                best_k = Some(model);
            }
        }
        let candidate = best_k.expect("at least one restart");
        if best.as_ref().is_none_or(|b| candidate.ch_score > b.ch_score) {
            best = Some(candidate);
        }
    }
    best.ok_or_else(|| Error::DegenerateData("no clustering could be fit".into()))
}

/// Training members of the cluster nearest to a test feature, with
/// similarity weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceCluster {
    pub cluster: usize,
    pub member_indices: Vec<usize>,
    pub weights: Vec<f64>,
}

impl ImportanceCluster {
    pub fn len(&self) -> usize {
        self.member_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.member_indices.is_empty()
    }
}

/// Members of the nearest cluster weighted by `exp(-‖f_i - f‖² / 2h²)`,
/// where `h` is the (lower) median member-to-test distance.
pub fn importance_cluster(
    model: &ClusterModel,
    training_features: &[Vec<f64>],
    test_feature: &[f64],
) -> Result<ImportanceCluster> {
    if model.centroids.iter().any(|c| c.len() != test_feature.len()) {
        return Err(Error::domain("test feature length does not match centroids"));
    }
    if training_features.len() != model.assignment.len() {
        return Err(Error::domain("training features do not match the cluster model"));
    }
    let cluster = nearest_centroid(&model.centroids, test_feature);
    let members: Vec<usize> = (0..model.assignment.len())
        .filter(|&i| model.assignment[i] == cluster)
        .collect();
    if members.is_empty() {
        return Err(Error::DegenerateData("selected cluster is empty".into()));
    }
    let dists: Vec<f64> = members
        .iter()
        .map(|&i| sq_dist(&training_features[i], test_feature).sqrt())
        .collect();
    let mut sorted = dists.clone();
    sorted.sort_by(f64::total_cmp);
    let h = sorted[(sorted.len() - 1) / 2].max(MIN_SIMILARITY_BANDWIDTH);
    let raw: Vec<f64> = dists.iter().map(|d| (-(d * d) / (2.0 * h * h)).exp()).collect();
    let total: f64 = raw.iter().sum();
    let weights = if total > 0.0 {
        raw.iter().map(|w| w / total).collect()
    } else {
        vec![1.0 / members.len() as f64; members.len()]
    };
    Ok(ImportanceCluster {
        cluster,
        member_indices: members,
        weights,
    })
}
