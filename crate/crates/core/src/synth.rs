//! Synthetic edit pairs with exactly known masks, for validating the mask
//! stage without external data.
//!
//! Magnitude `m` in [0, 1] means, per kind:
//! - `paste_patch`: blend weight toward a striped, colour-contrasting patch
//!   inside the region;
//! - `recolor_region`: hue rotation of `m * 180` degrees inside the region
//!   (in Lab, around the L axis);
//! - `global_color_shift`: Lab offset of `(-15m, +40m, -40m)` on every pixel;
//! - `global_noise`: seeded uniform noise of amplitude `m * 128` per channel;
//! - `no_edit`: ignored; the edited image is a copy.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffmask::color::{lab_to_rgb, rgb_to_lab};
use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};
use crate::records::Scope;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditKind {
    PastePatch,
    RecolorRegion,
    GlobalColorShift,
    GlobalNoise,
    NoEdit,
}

impl EditKind {
    pub const ALL: [EditKind; 5] = [
        EditKind::PastePatch,
        EditKind::RecolorRegion,
        EditKind::GlobalColorShift,
        EditKind::GlobalNoise,
        EditKind::NoEdit,
    ];

    pub fn is_local(self) -> bool {
        matches!(self, EditKind::PastePatch | EditKind::RecolorRegion)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EditKind::PastePatch => "paste_patch",
            EditKind::RecolorRegion => "recolor_region",
            EditKind::GlobalColorShift => "global_color_shift",
            EditKind::GlobalNoise => "global_noise",
            EditKind::NoEdit => "no_edit",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Rect {
    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticEditSpec {
    pub kind: EditKind,
    pub region: Option<Rect>,
    pub magnitude: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticEdit {
    pub edited: RgbImage,
    pub gt_mask: Mask,
    pub gt_scope: Scope,
}

fn value_noise(width: u32, height: u32, cell: u32, rng: &mut ChaCha8Rng) -> Grid<f64> {
    let gw = (width / cell + 2) as usize;
    let gh = (height / cell + 2) as usize;
    let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.gen::<f64>()).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    Grid::from_fn(width as usize, height as usize, |x, y| {
        let fx = x as f64 / cell as f64;
        let fy = y as f64 / cell as f64;
        let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
        let (tx, ty) = (smooth(fx - ix as f64), smooth(fy - iy as f64));
        let at = |i: usize, j: usize| lattice[j * gw + i];
        let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
        let bottom = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    })
}

/// Gradient plus two octaves of seeded value noise in a mid-tone palette.
pub fn procedural_base(width: u32, height: u32, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hue: f64 = rng.gen::<f64>() * std::f64::consts::TAU;
    let angle: f64 = rng.gen::<f64>() * std::f64::consts::TAU;
    let coarse = value_noise(width, height, 24, &mut rng);
    let fine = value_noise(width, height, 6, &mut rng);
    let (dx, dy) = (angle.cos(), angle.sin());
    RgbImage::from_fn(width, height, |x, y| {
        let g = 0.5
            + 0.5 * (dx * (x as f64 / width as f64 - 0.5) + dy * (y as f64 / height as f64 - 0.5));
        let c = *coarse.get(x as usize, y as usize);
        let f = *fine.get(x as usize, y as usize);
        let l = 40.0 + 20.0 * g + 15.0 * c + 8.0 * f;
        let h = hue + 0.8 * (c - 0.5);
        let chroma = 22.0 + 18.0 * f;
        Rgb(lab_to_rgb([l, chroma * h.cos(), chroma * h.sin()]))
    })
}

fn check_region(base: &RgbImage, region: Option<Rect>, kind: EditKind) -> Result<Option<Rect>> {
    if !kind.is_local() {
        return Ok(None);
    }
    let r = region.ok_or_else(|| Error::Invalid(format!("{} needs a region", kind.as_str())))?;
    let (w, h) = base.dimensions();
    if r.w == 0 || r.h == 0 || r.x + r.w > w || r.y + r.h > h {
        return Err(Error::Invalid(format!(
            "region {r:?} outside {w}x{h} image"
        )));
    }
    Ok(Some(r))
}

fn rotate_hue(lab: [f64; 3], radians: f64) -> [f64; 3] {
    let (s, c) = radians.sin_cos();
    [lab[0], lab[1] * c - lab[2] * s, lab[1] * s + lab[2] * c]
}

/// Applies `spec` to `base`. Deterministic in `(base, spec)`.
pub fn generate(base: &RgbImage, spec: &SyntheticEditSpec) -> Result<SyntheticEdit> {
    if !(0.0..=1.0).contains(&spec.magnitude) {
        return Err(Error::Invalid(format!(
            "magnitude {} outside [0, 1]",
            spec.magnitude
        )));
    }
    let region = check_region(base, spec.region, spec.kind)?;
    let (w, h) = base.dimensions();
    let m = spec.magnitude;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut edited = base.clone();

    match spec.kind {
        EditKind::NoEdit => {
            return Ok(SyntheticEdit {
                edited,
                gt_mask: Grid::filled(w as usize, h as usize, false),
                gt_scope: Scope::Ambiguous,
            })
        }
        EditKind::PastePatch => {
            let r = region.expect("checked");
            let mean = region_mean_lab(base, r);
            let period = rng.gen_range(4..9);
            let light = lab_to_rgb([88.0, -mean[1], -mean[2]]);
            let dark = lab_to_rgb([18.0, -mean[1] * 0.5, -mean[2] * 0.5]);
            for y in r.y..r.y + r.h {
                for x in r.x..r.x + r.w {
                    let stripe = ((x + y) / period) % 2 == 0;
                    let target = if stripe { light } else { dark };
                    let p = base.get_pixel(x, y).0;
                    edited.put_pixel(x, y, Rgb(blend(p, target, m)));
                }
            }
        }
        EditKind::RecolorRegion => {
            let r = region.expect("checked");
            let angle = m * std::f64::consts::PI;
            for y in r.y..r.y + r.h {
                for x in r.x..r.x + r.w {
                    let lab = rgb_to_lab(base.get_pixel(x, y).0);
                    edited.put_pixel(x, y, Rgb(lab_to_rgb(rotate_hue(lab, angle))));
                }
            }
        }
        EditKind::GlobalColorShift => {
            for p in edited.pixels_mut() {
                let lab = rgb_to_lab(p.0);
                p.0 = lab_to_rgb([lab[0] - 15.0 * m, lab[1] + 40.0 * m, lab[2] - 40.0 * m]);
            }
        }
        EditKind::GlobalNoise => {
            let amp = m * 128.0;
            for p in edited.pixels_mut() {
                for c in p.0.iter_mut() {
                    let n: f64 = rng.gen_range(-amp..=amp);
                    *c = (*c as f64 + n).round().clamp(0.0, 255.0) as u8;
                }
            }
        }
    }

    let (gt_mask, gt_scope) = match region {
        Some(r) => (
            Grid::from_fn(w as usize, h as usize, |x, y| {
                r.contains(x as u32, y as u32)
            }),
            Scope::Local,
        ),
        None => (Grid::filled(w as usize, h as usize, true), Scope::Global),
    };
    Ok(SyntheticEdit {
        edited,
        gt_mask,
        gt_scope,
    })
}

fn blend(p: [u8; 3], target: [u8; 3], m: f64) -> [u8; 3] {
    let mut out = [0u8; 3];
    for i in 0..3 {
        out[i] = (p[i] as f64 + m * (target[i] as f64 - p[i] as f64))
            .round()
            .clamp(0.0, 255.0) as u8;
    }
    out
}

fn region_mean_lab(img: &RgbImage, r: Rect) -> [f64; 3] {
    let mut acc = [0.0; 3];
    for y in r.y..r.y + r.h {
        for x in r.x..r.x + r.w {
            let lab = rgb_to_lab(img.get_pixel(x, y).0);
            for i in 0..3 {
                acc[i] += lab[i];
            }
        }
    }
    let n = r.area() as f64;
    acc.map(|v| v / n)
}

/// Intersection over union; 1.0 when both masks are empty.
pub fn iou(a: &Mask, b: &Mask) -> Result<f64> {
    a.ensure_same_dims(b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.data().iter().zip(b.data()) {
        inter += (*x && *y) as usize;
        union += (*x || *y) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// A random rectangle covering `area_frac` of the image (within rounding).
pub fn random_region(width: u32, height: u32, area_frac: f64, rng: &mut impl Rng) -> Rect {
    let aspect: f64 = rng.gen_range(0.6..1.6);
    let area = area_frac * width as f64 * height as f64;
    let w = ((area * aspect).sqrt().round() as u32).clamp(1, width);
    let h = ((area / w as f64).round() as u32).clamp(1, height);
    Rect {
        x: rng.gen_range(0..=width - w),
        y: rng.gen_range(0..=height - h),
        w,
        h,
    }
}

/// Seeded spec of the given kind with area in [0.02, 0.40] and magnitude in
/// [0.3, 1.0].
pub fn random_spec(kind: EditKind, width: u32, height: u32, seed: u64) -> SyntheticEditSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e_ed0f_ed17);
    let magnitude = rng.gen_range(0.3..=1.0);
    let region = kind
        .is_local()
        .then(|| random_region(width, height, rng.gen_range(0.02..=0.40), &mut rng));
    SyntheticEditSpec {
        kind,
        region,
        magnitude,
        seed,
    }
}

fn instruction_for(kind: EditKind, pick: usize) -> &'static str {
    let options: &[&str] = match kind {
        EditKind::PastePatch => &[
            "add a striped box",
            "insert a patterned panel",
            "put a striped sign on the wall",
        ],
        EditKind::RecolorRegion => &[
            "change the color of the square",
            "let the patch be turned into a different shade",
            "change the colour of the tile",
        ],
        EditKind::GlobalColorShift => &[
            "apply a cool color filter to the photo",
            "shift the exposure and tint of the whole picture",
        ],
        EditKind::GlobalNoise => &[
            "make the photo grainy with noise",
            "overlay heavy film grain",
        ],
        EditKind::NoEdit => &["keep the picture as it is", "leave everything unchanged"],
    };
    options[pick % options.len()]
}

/// One row of a synthetic dataset manifest. Paths are relative to the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifestRow {
    pub triplet_id: String,
    pub real_path: String,
    pub edited_path: String,
    pub gt_mask_path: String,
    pub instruction: String,
    pub gt_scope: Scope,
    pub spec: SyntheticEditSpec,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Kind of the `i`-th triplet in a generated dataset.
pub fn dataset_kind(i: usize) -> EditKind {
    match i % 10 {
        0..=3 => EditKind::PastePatch,
        4..=6 => EditKind::RecolorRegion,
        7 => EditKind::GlobalColorShift,
        8 => EditKind::GlobalNoise,
        _ => EditKind::NoEdit,
    }
}

/// Writes `n` synthetic triplets (images, ground-truth masks and a JSONL
/// manifest) under `out`.
pub fn write_dataset(out: &Path, n: usize, size: u32, seed: u64) -> Result<Vec<SynthManifestRow>> {
    let images = out.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let item_seed = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
        let kind = dataset_kind(i);
        let base = procedural_base(size, size, item_seed);
        let spec = random_spec(kind, size, size, item_seed);
        let edit = generate(&base, &spec)?;
        let id = format!("synth_{i:05}");
        let rel = |suffix: &str| format!("images/{id}_{suffix}.png");
        let save = |img: &RgbImage, rel: &str| {
            let path = out.join(rel);
            img.save(&path).map_err(|e| Error::Image {
                path: path.clone(),
                message: e.to_string(),
            })
        };
        save(&base, &rel("real"))?;
        save(&edit.edited, &rel("edited"))?;
        edit.gt_mask.save_png(&out.join(rel("gt")))?;
        let (real_path, edited_path, gt_mask_path) = (rel("real"), rel("edited"), rel("gt"));
        rows.push(SynthManifestRow {
            triplet_id: id,
            real_path,
            edited_path,
            gt_mask_path,
            instruction: instruction_for(kind, (item_seed % 7) as usize).to_string(),
            gt_scope: edit.gt_scope,
            spec,
        });
    }
    let path = out.join(MANIFEST_FILE);
    let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    for row in &rows {
        let line = serde_json::to_string(row).map_err(|e| Error::Invalid(e.to_string()))?;
        writeln!(file, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    Ok(rows)
}
