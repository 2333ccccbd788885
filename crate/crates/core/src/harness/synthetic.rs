//! Synthetic dog-walking scenes.
//!
//! Each image draws a depth regime (close-up or far), a walker whose height is
//! a log-normal fraction of the image height around the regime's scale, a dog
//! whose size is a regime-specific fraction of the walker's, placed on either
//! side of the walker, and a leash box spanning the walker's hand to the dog.
//! Size noise differs between regimes, so sizes are bimodal and
//! heteroscedastic: a single joint Gaussian describes them poorly.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Provenance};
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::situation_model::{BoundingBox, SituationImage};

pub const CATEGORIES: [&str; 3] = ["dog", "leash", "walker"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeParams {
    /// Median walker height over image height.
    pub walker_scale: f64,
    /// Log-normal spread of the walker height.
    pub depth_spread: f64,
    /// Dog height over walker height.
    pub dog_fraction: f64,
    /// Relative noise on box sizes.
    pub size_noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticParams {
    pub width: u32,
    pub height: u32,
    /// Probability of the close-up regime.
    pub near_weight: f64,
    pub near: RegimeParams,
    pub far: RegimeParams,
    /// Walker width over walker height.
    pub walker_aspect: f64,
    /// Dog width over dog height.
    pub dog_aspect: f64,
    /// Horizontal walker-to-dog offset in walker heights (mirrored at random).
    pub dog_offset: f64,
    /// Positional noise in walker heights.
    pub offset_noise: f64,
    /// Leash box padding in walker heights.
    pub leash_padding: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams {
            width: 640,
            height: 480,
            near_weight: 0.5,
            near: RegimeParams {
                walker_scale: 0.8,
                depth_spread: 0.08,
                dog_fraction: 0.3,
                size_noise: 0.2,
            },
            far: RegimeParams {
                walker_scale: 0.3,
                depth_spread: 0.08,
                dog_fraction: 0.55,
                size_noise: 0.05,
            },
            walker_aspect: 0.4,
            dog_aspect: 1.3,
            dog_offset: 0.45,
            offset_noise: 0.05,
            leash_padding: 0.02,
        }
    }
}

impl SyntheticParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.near.walker_scale,
            self.far.walker_scale,
            self.near.dog_fraction,
            self.far.dog_fraction,
            self.walker_aspect,
            self.dog_aspect,
        ];
        let non_negative = [
            self.near.depth_spread,
            self.far.depth_spread,
            self.near.size_noise,
            self.far.size_noise,
            self.dog_offset,
            self.offset_noise,
            self.leash_padding,
        ];
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("image dimensions must be positive".into()));
        }
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) || non_negative.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("synthetic scales must be positive and finite".into()));
        }
        if !(self.near_weight > 0.0 && self.near_weight <= 1.0) {
            return Err(Error::Config("near_weight must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Box from corner coordinates clipped to the image, at least 1 px per side.
fn clipped(x0: f64, y0: f64, x1: f64, y1: f64, w: f64, h: f64) -> BoundingBox {
    let (mut l, mut r) = (x0.min(x1).clamp(0.0, w), x0.max(x1).clamp(0.0, w));
    let (mut t, mut b) = (y0.min(y1).clamp(0.0, h), y0.max(y1).clamp(0.0, h));
    if r - l < 1.0 {
        let mid = ((l + r) / 2.0).clamp(0.5, w - 0.5);
        (l, r) = (mid - 0.5, mid + 0.5);
    }
    if b - t < 1.0 {
        let mid = ((t + b) / 2.0).clamp(0.5, h - 0.5);
        (t, b) = (mid - 0.5, mid + 0.5);
    }
    BoundingBox {
        cx: (l + r) / 2.0,
        cy: (t + b) / 2.0,
        w: r - l,
        h: b - t,
    }
}

fn generate_image<R: Rng + ?Sized>(p: &SyntheticParams, index: usize, rng: &mut R) -> SituationImage {
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let (w, h) = (p.width as f64, p.height as f64);
    let regime = if rng.random::<f64>() < p.near_weight { &p.near } else { &p.far };
    let mut n = || std.sample(rng);

    let walker_h = (regime.walker_scale * (regime.depth_spread * n()).exp()).min(0.98) * h;
    let walker_w = p.walker_aspect * walker_h * (1.0 + regime.size_noise * n()).max(0.2);
    let dog_h = regime.dog_fraction * walker_h * (1.0 + regime.size_noise * n()).max(0.2);
    let dog_w = p.dog_aspect * dog_h * (1.0 + regime.size_noise * n()).max(0.2);
    let side_draw = n();
    let jitter = [n(), n(), n()];

    let side = if side_draw < 0.0 { -1.0 } else { 1.0 };
    let reach = p.dog_offset * walker_h + walker_w / 2.0 + dog_w / 2.0;
    // keep the walker and the dog inside the frame where possible
    let margin = (walker_w / 2.0).max(reach + dog_w / 2.0 - walker_w / 2.0);
    let lo = margin.min(w / 2.0);
    let walker_cx = lo + (w - 2.0 * lo) * rng.random::<f64>();
    let walker_bottom = h * (0.7 + 0.28 * rng.random::<f64>()).max(walker_h / h);
    let walker_cy = walker_bottom - walker_h / 2.0;

    let dog_cx = walker_cx + side * (reach + p.offset_noise * walker_h * jitter[0]);
    let dog_cy = walker_bottom - dog_h / 2.0 + p.offset_noise * walker_h * jitter[1];

    let hand_x = walker_cx + side * walker_w / 2.0;
    let hand_y = walker_cy + 0.05 * walker_h * (1.0 + jitter[2]);
    let pad = p.leash_padding * walker_h;

    let walker = clipped(
        walker_cx - walker_w / 2.0,
        walker_cy - walker_h / 2.0,
        walker_cx + walker_w / 2.0,
        walker_cy + walker_h / 2.0,
        w,
        h,
    );
    let dog = clipped(dog_cx - dog_w / 2.0, dog_cy - dog_h / 2.0, dog_cx + dog_w / 2.0, dog_cy + dog_h / 2.0, w, h);
    let (ax, ay, bx, by) = (hand_x, hand_y, dog.cx, dog.cy - dog.h / 4.0);
    let leash = clipped(
        ax.min(bx) - pad,
        ay.min(by) - pad,
        ax.max(bx) + pad,
        ay.max(by) + pad,
        w,
        h,
    );

    SituationImage {
        image_id: format!("syn-{index:05}"),
        width: p.width,
        height: p.height,
        boxes: CATEGORIES
            .iter()
            .map(|c| c.to_string())
            .zip([dog, leash, walker])
            .collect(),
    }
}

/// `n` synthetic images, deterministic for a seed.
pub fn generate_synthetic(params: &SyntheticParams, n: usize, seed: u64) -> Result<Dataset> {
    params.validate()?;
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut rng = stream(seed);
    let images = (0..n).map(|i| generate_image(params, i, &mut rng)).collect();
    Dataset::new(
        images,
        Provenance::Synthetic {
            seed,
            params: params.clone(),
        },
    )
}
