//! Mask stage: multi-signal differencing, fusion, binarization and scope
//! routing.
//!
//! Each signal produces a raw nonnegative per-pixel map that is divided by
//! its own 99th percentile and clamped to [0, 1]. Signals are fused with an
//! elementwise maximum. Scope routing then takes one of two paths: a mean
//! above `tau` routes straight to `global`; otherwise the map is binarized
//! with Otsu's threshold, opened, and labelled by mask area.

pub mod color;
pub mod perceptual;
pub mod ssim;

use std::collections::BTreeMap;

use image::imageops::{self, FilterType};
use image::RgbImage;
use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};
use crate::records::{MaskArtifact, RoutePath, Scope, Signal};
use crate::stats::{percentile_sorted, sorted_copy};

use perceptual::PerceptualBackend;

/// Relative aspect-ratio tolerance under which a size mismatch is resized
/// away rather than reported as an alignment failure.
pub const ASPECT_TOLERANCE: f64 = 0.005;
pub const OTSU_BINS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    Lab,
    Ssim,
    Perceptual,
    Combined,
}

impl From<Signal> for MapKind {
    fn from(s: Signal) -> Self {
        match s {
            Signal::Lab => MapKind::Lab,
            Signal::Ssim => MapKind::Ssim,
            Signal::Perceptual => MapKind::Perceptual,
        }
    }
}

/// Normalized difference map with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct DiffMap {
    pub values: Grid<f64>,
    pub signal: MapKind,
    /// Divisor used during normalization; 0 for an all-zero map.
    pub p99_used: f64,
}

impl DiffMap {
    pub fn mean(&self) -> f64 {
        self.values.mean()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RoutingConfig {
    pub tau: f64,
    pub global_area_frac: f64,
    pub ambiguous_area_frac: f64,
    pub opening_radius: usize,
    pub signal_stack: Vec<Signal>,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        Self {
            tau: 0.62,
            global_area_frac: 0.90,
            ambiguous_area_frac: 0.005,
            opening_radius: 1,
            signal_stack: vec![Signal::Lab, Signal::Ssim, Signal::Perceptual],
        }
    }
}

impl RoutingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("tau {} outside (0, 1)", self.tau)));
        }
        if self.ambiguous_area_frac >= self.global_area_frac {
            return Err(Error::Config(
                "ambiguous_area_frac must be below global_area_frac".into(),
            ));
        }
        if self.signal_stack.is_empty() {
            return Err(Error::Config("signal stack is empty".into()));
        }
        Ok(())
    }
}

/// Same-size image pair ready for differencing.
#[derive(Debug, Clone)]
pub struct AlignedPair {
    pub real: RgbImage,
    pub edited: RgbImage,
}

#[derive(Debug, Clone)]
pub enum Alignment {
    Aligned(AlignedPair),
    Failed { reason: String },
}

/// Equal sizes pass through; matching aspect ratios are resized to the real
/// image; anything else is an alignment failure.
pub fn align_pair(real: &RgbImage, edited: &RgbImage) -> Alignment {
    let (rw, rh) = real.dimensions();
    let (ew, eh) = edited.dimensions();
    if (rw, rh) == (ew, eh) {
        return Alignment::Aligned(AlignedPair {
            real: real.clone(),
            edited: edited.clone(),
        });
    }
    if rw == 0 || rh == 0 || ew == 0 || eh == 0 {
        return Alignment::Failed {
            reason: "empty image".into(),
        };
    }
    let ar_real = rw as f64 / rh as f64;
    let ar_edit = ew as f64 / eh as f64;
    if ((ar_real - ar_edit) / ar_real).abs() <= ASPECT_TOLERANCE {
        let resized = imageops::resize(edited, rw, rh, FilterType::Triangle);
        return Alignment::Aligned(AlignedPair {
            real: real.clone(),
            edited: resized,
        });
    }
    Alignment::Failed {
        reason: format!("aspect ratio {rw}x{rh} vs {ew}x{eh}"),
    }
}

/// Divides by the 99th percentile and clamps to [0, 1].
///
/// An all-zero map stays all-zero. When the 99th percentile is zero but the
/// map is not (edits under 1% of the image), the maximum is used instead.
pub fn normalize_p99(raw: &Grid<f64>, signal: MapKind) -> DiffMap {
    let sorted = sorted_copy(raw.data());
    let p99 = if sorted.is_empty() {
        0.0
    } else {
        percentile_sorted(&sorted, 99, 100)
    };
    let divisor = if p99 > 0.0 {
        p99
    } else {
        sorted.last().copied().unwrap_or(0.0).max(0.0)
    };
    let values = if divisor > 0.0 {
        raw.map(|v| (v / divisor).clamp(0.0, 1.0))
    } else {
        raw.map(|_| 0.0)
    };
    DiffMap {
        values,
        signal,
        p99_used: divisor,
    }
}

/// Raw per-pixel CIE76 distance.
pub fn lab_distance_raw(pair: &AlignedPair) -> Grid<f64> {
    let (w, h) = pair.real.dimensions();
    Grid::from_fn(w as usize, h as usize, |x, y| {
        let a = color::rgb_to_lab(pair.real.get_pixel(x as u32, y as u32).0);
        let b = color::rgb_to_lab(pair.edited.get_pixel(x as u32, y as u32).0);
        color::delta_e(a, b)
    })
}

pub fn lab_distance_map(pair: &AlignedPair) -> DiffMap {
    normalize_p99(&lab_distance_raw(pair), MapKind::Lab)
}

pub fn dssim_map(pair: &AlignedPair) -> Result<DiffMap> {
    Ok(normalize_p99(
        &ssim::dssim_raw(&pair.real, &pair.edited)?,
        MapKind::Ssim,
    ))
}

/// Perceptual map from `backend`, upsampled to the pair's size. Returns the
/// map and the backend identity that produced it.
pub fn perceptual_map(
    pair: &AlignedPair,
    backend: &mut dyn PerceptualBackend,
) -> Result<(DiffMap, String)> {
    let raw = backend.distance(&pair.real, &pair.edited)?;
    let identity = backend.identity();
    let (w, h) = pair.real.dimensions();
    if raw.is_empty() {
        return Err(Error::Backend("empty distance grid".into()));
    }
    let full = perceptual::resize_bilinear(&raw, w as usize, h as usize).map(|v| v.max(0.0));
    Ok((normalize_p99(&full, MapKind::Perceptual), identity))
}

pub fn combine_max(maps: &[DiffMap]) -> Result<DiffMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Invalid("combine_max needs at least one map".into()))?;
    let mut values = first.values.clone();
    for m in &maps[1..] {
        values.ensure_same_dims(&m.values)?;
        for (dst, v) in values.data_mut().iter_mut().zip(m.values.data()) {
            *dst = dst.max(*v);
        }
    }
    Ok(DiffMap {
        values,
        signal: MapKind::Combined,
        p99_used: 1.0,
    })
}

#[inline]
pub fn otsu_bin(v: f64) -> usize {
    ((v.clamp(0.0, 1.0) * OTSU_BINS as f64).floor() as usize).min(OTSU_BINS - 1)
}

pub fn histogram(values: &[f64]) -> [u64; OTSU_BINS] {
    let mut hist = [0u64; OTSU_BINS];
    for &v in values {
        hist[otsu_bin(v)] += 1;
    }
    hist
}

/// Otsu split index `k` in `1..256`: bins `< k` are background.
///
/// Between-class variance is proportional to `(S0*n - S*N0)^2 / (N0*N1)`
/// where `N0`, `S0` are the count and index-sum of bins below `k`; candidates
/// are compared exactly in integer arithmetic and ties keep the lower `k`.
/// `None` when fewer than two bins are occupied.
pub fn otsu_split(hist: &[u64; OTSU_BINS]) -> Option<usize> {
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return None;
    }
    let n: u128 = hist.iter().map(|&c| c as u128).sum();
    let total: u128 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as u128 * c as u128)
        .sum();

    let mut best: Option<(usize, BigUint, BigUint)> = None;
    let (mut n0, mut s0) = (0u128, 0u128);
    for k in 1..OTSU_BINS {
        n0 += hist[k - 1] as u128;
        s0 += (k - 1) as u128 * hist[k - 1] as u128;
        let n1 = n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let diff = (s0 * n).abs_diff(total * n0);
        let num = BigUint::from(diff) * BigUint::from(diff);
        let den = BigUint::from(n0) * BigUint::from(n1);
        let better = match &best {
            None => true,
            Some((_, bnum, bden)) => &num * bden > bnum * &den,
        };
        if better {
            best = Some((k, num, den));
        }
    }
    best.map(|(k, _, _)| k)
}

/// Otsu threshold on a [0, 1] map over 256 uniform bins, or `None` for a
/// degenerate (single-bin) map. Pixels `>= threshold` are foreground.
pub fn otsu_threshold(map: &DiffMap) -> Option<f64> {
    otsu_split(&histogram(map.values.data())).map(|k| k as f64 / OTSU_BINS as f64)
}

pub fn binarize(map: &DiffMap, threshold: f64) -> Mask {
    let k = otsu_bin(threshold);
    map.values.map(|&v| otsu_bin(v) >= k)
}

fn filter_square(mask: &Mask, radius: usize, erode: bool) -> Mask {
    let (w, h) = mask.dims();
    // Separable: rows then columns. Out-of-bounds samples are ignored.
    let pass = |src: &Mask, horizontal: bool| {
        Grid::from_fn(w, h, |x, y| {
            let (pos, len) = if horizontal { (x, w) } else { (y, h) };
            let lo = pos.saturating_sub(radius);
            let hi = (pos + radius).min(len - 1);
            let mut it = (lo..=hi).map(|p| {
                if horizontal {
                    *src.get(p, y)
                } else {
                    *src.get(x, p)
                }
            });
            if erode {
                it.all(|b| b)
            } else {
                it.any(|b| b)
            }
        })
    };
    let rows = pass(mask, true);
    pass(&rows, false)
}

/// Erosion followed by dilation with a `(2r+1)` square element.
pub fn morphological_open(mask: &Mask, radius: usize) -> Mask {
    if radius == 0 || mask.is_empty() {
        return mask.clone();
    }
    let eroded = filter_square(mask, radius, true);
    filter_square(&eroded, radius, false)
}

/// Assigns scope from a combined map. `per_signal_means` is left empty for
/// the caller to fill.
pub fn route_scope(triplet_id: &str, combined: &DiffMap, cfg: &RoutingConfig) -> MaskArtifact {
    let (w, h) = combined.values.dims();
    let mean = combined.mean();
    let mut artifact = MaskArtifact {
        triplet_id: triplet_id.to_string(),
        scope: Scope::Global,
        route: RoutePath::MeanThreshold,
        mask_path: None,
        width: Some(w),
        height: Some(h),
        mask_area_frac: 1.0,
        combined_diff_mean: mean,
        per_signal_means: BTreeMap::new(),
        signal_stack: cfg.signal_stack.clone(),
        otsu_threshold_used: None,
        mask: None,
    };

    if mean > cfg.tau {
        artifact.mask = Some(Grid::filled(w, h, true));
        return artifact;
    }

    let Some(threshold) = otsu_threshold(combined) else {
        artifact.scope = Scope::Ambiguous;
        artifact.route = RoutePath::DegenerateOtsu;
        artifact.mask_area_frac = 0.0;
        artifact.mask = Some(Grid::filled(w, h, false));
        return artifact;
    };

    let mask = morphological_open(&binarize(combined, threshold), cfg.opening_radius);
    let area = mask.area_frac();
    artifact.route = RoutePath::MaskArea;
    artifact.otsu_threshold_used = Some(threshold);
    artifact.mask_area_frac = area;
    artifact.scope = if area > cfg.global_area_frac {
        Scope::Global
    } else if area >= cfg.ambiguous_area_frac {
        Scope::Local
    } else {
        Scope::Ambiguous
    };
    artifact.mask = Some(mask);
    artifact
}

/// Record for a pair that could not be registered.
pub fn alignment_failed_artifact(triplet_id: &str, cfg: &RoutingConfig) -> MaskArtifact {
    MaskArtifact {
        triplet_id: triplet_id.to_string(),
        scope: Scope::AlignmentFailed,
        route: RoutePath::AlignmentFailed,
        mask_path: None,
        width: None,
        height: None,
        mask_area_frac: 0.0,
        combined_diff_mean: 0.0,
        per_signal_means: BTreeMap::new(),
        signal_stack: cfg.signal_stack.clone(),
        otsu_threshold_used: None,
        mask: None,
    }
}

/// Per-signal normalized maps for the configured stack.
pub fn signal_maps(
    pair: &AlignedPair,
    stack: &[Signal],
    backend: Option<&mut dyn PerceptualBackend>,
) -> Result<Vec<(String, DiffMap)>> {
    let mut backend = backend;
    let mut maps = Vec::with_capacity(stack.len());
    for signal in stack {
        match signal {
            Signal::Lab => maps.push(("lab".to_string(), lab_distance_map(pair))),
            Signal::Ssim => maps.push(("ssim".to_string(), dssim_map(pair)?)),
            Signal::Perceptual => {
                let backend = backend.as_deref_mut().ok_or_else(|| {
                    Error::Config("perceptual signal requested without a backend".into())
                })?;
                let (map, identity) = perceptual_map(pair, backend)?;
                maps.push((identity, map));
            }
        }
    }
    Ok(maps)
}

/// Full mask stage for one pair.
pub fn generate_mask(
    triplet_id: &str,
    real: &RgbImage,
    edited: &RgbImage,
    cfg: &RoutingConfig,
    backend: Option<&mut dyn PerceptualBackend>,
) -> Result<MaskArtifact> {
    let pair = match align_pair(real, edited) {
        Alignment::Aligned(pair) => pair,
        Alignment::Failed { reason } => {
            log::info!("{triplet_id}: alignment_failed ({reason})");
            return Ok(alignment_failed_artifact(triplet_id, cfg));
        }
    };
    let named = signal_maps(&pair, &cfg.signal_stack, backend)?;
    let maps: Vec<DiffMap> = named.iter().map(|(_, m)| m.clone()).collect();
    let combined = combine_max(&maps)?;
    let mut artifact = route_scope(triplet_id, &combined, cfg);
    artifact.per_signal_means = named.iter().map(|(k, m)| (k.clone(), m.mean())).collect();
    Ok(artifact)
}
