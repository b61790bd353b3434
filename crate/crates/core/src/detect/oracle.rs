//! Ground-truth detector over instance masks, with a seeded noise model.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ClassTable, DetectError, Detector, DetectorInput, InstancePixelMap};
use crate::geometry::{Detection2D, Rect};

/// Score given to spurious detections.
pub const FALSE_POSITIVE_SCORE: f64 = 0.3;
/// Score penalty for an instance much smaller than the largest one in view.
const COVERAGE_PENALTY: f64 = 0.05;
/// Upper bound of the seeded score perturbation when noise is enabled.
const SCORE_JITTER: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorNoise {
    pub jitter_sigma_px: f64,
    pub miss_prob: f64,
    pub false_positive_rate: f64,
    pub seed: u64,
}

impl Default for DetectorNoise {
    fn default() -> Self {
        Self {
            jitter_sigma_px: 0.0,
            miss_prob: 0.0,
            false_positive_rate: 0.0,
            seed: 0,
        }
    }
}

impl DetectorNoise {
    pub fn is_zero(&self) -> bool {
        self.jitter_sigma_px == 0.0 && self.miss_prob == 0.0 && self.false_positive_rate == 0.0
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.jitter_sigma_px >= 0.0 && self.jitter_sigma_px.is_finite()) {
            return Err(format!("jitter_sigma_px must be >= 0, got {}", self.jitter_sigma_px));
        }
        if !(0.0..=1.0).contains(&self.miss_prob) {
            return Err(format!("miss_prob must be in [0, 1], got {}", self.miss_prob));
        }
        if !(self.false_positive_rate >= 0.0 && self.false_positive_rate.is_finite()) {
            return Err(format!("false_positive_rate must be >= 0, got {}", self.false_positive_rate));
        }
        Ok(())
    }
}

/// Inclusive pixel bounds and pixel count of one instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstanceExtent {
    pub u_min: u32,
    pub v_min: u32,
    pub u_max: u32,
    pub v_max: u32,
    pub pixels: u64,
}

/// Brute-force scan of the map for every non-background instance.
pub fn tight_rects(map: &InstancePixelMap) -> BTreeMap<u32, InstanceExtent> {
    let mut out: BTreeMap<u32, InstanceExtent> = BTreeMap::new();
    let w = map.width as usize;
    for (px, &id) in map.ids.iter().enumerate() {
        if id == 0 {
            continue;
        }
        let (u, v) = ((px % w) as u32, (px / w) as u32);
        out.entry(id)
            .and_modify(|e| {
                e.u_min = e.u_min.min(u);
                e.u_max = e.u_max.max(u);
                e.v_min = e.v_min.min(v);
                e.v_max = e.v_max.max(v);
                e.pixels += 1;
            })
            .or_insert(InstanceExtent {
                u_min: u,
                v_min: v,
                u_max: u,
                v_max: v,
                pixels: 1,
            });
    }
    out
}

fn mix(h: u64, x: u64) -> u64 {
    // splitmix64 finalizer over the running state
    let mut z = h ^ x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Noise stream seed derived from the noise seed and what is being detected,
/// so results do not depend on call order.
fn content_seed(noise_seed: u64, map: &InstancePixelMap, class_filter: Option<&str>, extents: &[(u32, InstanceExtent)]) -> u64 {
    let mut h = mix(noise_seed, ((map.width as u64) << 32) | map.height as u64);
    for b in class_filter.unwrap_or("\u{0}").bytes() {
        h = mix(h, b as u64);
    }
    for (id, e) in extents {
        h = mix(h, *id as u64);
        h = mix(h, ((e.u_min as u64) << 32) | e.v_min as u64);
        h = mix(h, ((e.u_max as u64) << 32) | e.v_max as u64);
        h = mix(h, e.pixels);
    }
    h
}

fn snap_rect(u0: f64, v0: f64, u1: f64, v1: f64, width: u32, height: u32) -> Rect {
    let (w, h) = (width as f64, height as f64);
    let fix = |a: f64, b: f64, limit: f64| {
        let (mut a, mut b) = (a.round().clamp(0.0, limit), b.round().clamp(0.0, limit));
        if b < a {
            std::mem::swap(&mut a, &mut b);
        }
        if b - a < 1.0 {
            if b < limit {
                b = a + 1.0;
            } else {
                a = b - 1.0;
            }
        }
        (a, b)
    };
    let (u0, u1) = fix(u0, u1, w);
    let (v0, v1) = fix(v0, v1, h);
    Rect { u0, v0, u1, v1 }
}

/// Tight rectangle per instance of the requested class, corrupted by `noise`.
pub fn oracle_detect(
    map: &InstancePixelMap,
    classes: &ClassTable,
    class_filter: Option<&str>,
    noise: &DetectorNoise,
) -> Vec<Detection2D> {
    let extents: Vec<(u32, InstanceExtent)> = tight_rects(map)
        .into_iter()
        .filter(|(id, _)| match (classes.get(id), class_filter) {
            (None, _) => false,
            (Some(c), Some(f)) => c == f,
            (Some(_), None) => true,
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(content_seed(noise.seed, map, class_filter, &extents));
    let largest = extents.iter().map(|(_, e)| e.pixels).max().unwrap_or(1) as f64;
    let noisy = !noise.is_zero();

    let mut out = Vec::new();
    for (id, e) in &extents {
        // the draws happen unconditionally so every noise level consumes the
        // same stream and misses line up across sweeps
        let miss_draw: f64 = rng.random();
        let z: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let score_draw: f64 = rng.random();
        if miss_draw < noise.miss_prob {
            continue;
        }
        let s = noise.jitter_sigma_px;
        let rect = snap_rect(
            e.u_min as f64 + s * z[0],
            e.v_min as f64 + s * z[1],
            (e.u_max + 1) as f64 + s * z[2],
            (e.v_max + 1) as f64 + s * z[3],
            map.width,
            map.height,
        );
        let coverage = e.pixels as f64 / largest;
        let mut score = 1.0 - COVERAGE_PENALTY * (1.0 - coverage);
        if noisy {
            score -= SCORE_JITTER * score_draw;
        }
        out.push(Detection2D {
            class_label: classes[id].clone(),
            score,
            rect,
        });
    }

    if noise.false_positive_rate > 0.0 {
        let count = Poisson::new(noise.false_positive_rate)
            .map(|p| p.sample(&mut rng) as usize)
            .unwrap_or(0);
        let labels: Vec<&String> = classes.values().collect();
        for _ in 0..count {
            let label = match class_filter {
                Some(f) => f.to_string(),
                None if !labels.is_empty() => labels[rng.random_range(0..labels.len())].clone(),
                None => continue,
            };
            let (w, h) = (map.width as f64, map.height as f64);
            let rw = rng.random_range(0.05..0.3) * w;
            let rh = rng.random_range(0.05..0.3) * h;
            let u0 = rng.random_range(0.0..(w - rw).max(1.0));
            let v0 = rng.random_range(0.0..(h - rh).max(1.0));
            out.push(Detection2D {
                class_label: label,
                score: FALSE_POSITIVE_SCORE,
                rect: snap_rect(u0, v0, u0 + rw, v0 + rh, map.width, map.height),
            });
        }
    }
    out
}

/// [`oracle_detect`] behind the [`Detector`] trait.
#[derive(Debug, Clone)]
pub struct OracleDetector {
    pub classes: ClassTable,
    pub noise: DetectorNoise,
}

impl OracleDetector {
    pub fn new(classes: ClassTable, noise: DetectorNoise) -> Self {
        Self { classes, noise }
    }
}

impl Detector for OracleDetector {
    fn detect(&self, input: &DetectorInput<'_>, class_filter: Option<&str>) -> Result<Vec<Detection2D>, DetectError> {
        if input.image.width() == 0 || input.image.height() == 0 {
            return Err(DetectError::EmptyRaster);
        }
        let map = input.instances.ok_or(DetectError::MissingGroundTruth)?;
        Ok(oracle_detect(map, &self.classes, class_filter, &self.noise))
    }
}
