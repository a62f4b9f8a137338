//! Source-dataset adapters producing [`EditTriplet`] records.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};
use crate::records::{EditTriplet, SourceDataset};
use crate::synth::{SynthManifestRow, MANIFEST_FILE};
use crate::taxonomy::SOURCE_LABEL_KEY;

pub const AUTHENTIC_KEY: &str = "source_is_authentic";
pub const SPLIT_KEY: &str = "split";
pub const TURN_KEY: &str = "turn_index";
pub const FETCH_ATTEMPTS: usize = 3;
/// Share of pure-black mask pixels above which the encoding is treated as
/// inverted.
pub const INVERSION_BLACK_FRAC: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterConfig {
    pub dataset_root: PathBuf,
    pub download_missing: bool,
    pub single_turn_only: bool,
    pub cache_dir: Option<PathBuf>,
}

impl AdapterConfig {
    pub fn new(dataset_root: impl Into<PathBuf>) -> Self {
        Self {
            dataset_root: dataset_root.into(),
            download_missing: false,
            single_turn_only: false,
            cache_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.dataset_root.is_dir() {
            return Err(Error::Config(format!(
                "dataset_root {} is not a directory",
                self.dataset_root.display()
            )));
        }
        if self.download_missing && self.cache_dir.is_none() {
            return Err(Error::Config("download_missing requires cache_dir".into()));
        }
        Ok(())
    }
}

/// A source row that produced no triplet.
#[derive(Debug, Clone, PartialEq)]
pub struct Skipped {
    pub line: usize,
    pub triplet_id: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestOutcome {
    /// Sorted by `triplet_id`.
    pub triplets: Vec<EditTriplet>,
    pub skipped: Vec<Skipped>,
    pub warnings: Vec<String>,
}

impl IngestOutcome {
    fn skip(&mut self, line: usize, triplet_id: Option<&str>, reason: String) {
        log::warn!(
            "skipping line {line}{}: {reason}",
            triplet_id.map(|id| format!(" ({id})")).unwrap_or_default()
        );
        self.skipped.push(Skipped {
            line,
            triplet_id: triplet_id.map(str::to_string),
            reason,
        });
    }

    /// Sorts triplets and rejects duplicate IDs, naming both source lines.
    fn finish(mut self, lines: &BTreeMap<String, Vec<usize>>) -> Result<Self> {
        if let Some((id, at)) = lines.iter().find(|(_, at)| at.len() > 1) {
            return Err(Error::DuplicateId {
                id: id.clone(),
                context: format!(" from source lines {at:?}"),
            });
        }
        self.triplets
            .sort_by(|a, b| a.triplet_id.cmp(&b.triplet_id));
        Ok(self)
    }
}

/// Lowercases and replaces anything outside `[a-z0-9_-]` with `_`.
pub fn sanitize_stem(stem: &str) -> String {
    stem.chars()
        .map(|c| {
            let c = c.to_ascii_lowercase();
            if c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub fn picobanana_id(output_image: &str) -> Result<String> {
    let stem = Path::new(output_image)
        .file_stem()
        .and_then(|s| s.to_str())
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::Invalid(format!("no file stem in {output_image:?}")))?;
    Ok(format!("picobanana_{}", sanitize_stem(stem)))
}

pub fn magicbrush_id(split: &str, img_id: &str, turn: u32) -> String {
    format!("magicbrush_{split}_{img_id}_t{turn:02}")
}

/// Fetches remote bytes for the download fallback.
pub trait UrlFetcher {
    fn fetch(&self, url: &str) -> std::result::Result<Vec<u8>, String>;
}

/// Blocking HTTP fetcher.
pub struct HttpFetcher {
    agent: ureq::Agent,
}

impl Default for HttpFetcher {
    fn default() -> Self {
        Self {
            agent: ureq::AgentBuilder::new()
                .timeout(std::time::Duration::from_secs(60))
                .build(),
        }
    }
}

impl UrlFetcher for HttpFetcher {
    fn fetch(&self, url: &str) -> std::result::Result<Vec<u8>, String> {
        let response = self.agent.get(url).call().map_err(|e| e.to_string())?;
        let mut bytes = Vec::new();
        std::io::Read::read_to_end(&mut response.into_reader(), &mut bytes)
            .map_err(|e| e.to_string())?;
        Ok(bytes)
    }
}

fn cache_path(cache_dir: &Path, url: &str) -> PathBuf {
    let digest = Sha256::digest(url.as_bytes());
    let ext = Path::new(url.split(['?', '#']).next().unwrap_or(url))
        .extension()
        .and_then(|e| e.to_str())
        .filter(|e| e.len() <= 5 && e.chars().all(|c| c.is_ascii_alphanumeric()))
        .unwrap_or("img");
    cache_dir.join(format!("{digest:x}.{ext}"))
}

/// Returns the cached copy of `url`, downloading it (with retries) if absent.
pub fn fetch_cached(fetcher: &dyn UrlFetcher, url: &str, cache_dir: &Path) -> Result<PathBuf> {
    let path = cache_path(cache_dir, url);
    if path.is_file() {
        return Ok(path);
    }
    fs::create_dir_all(cache_dir).map_err(|e| Error::io(cache_dir, e))?;
    let mut last = String::new();
    for attempt in 1..=FETCH_ATTEMPTS {
        match fetcher.fetch(url) {
            Ok(bytes) => {
                let tmp = path.with_extension("part");
                fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
                fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
                return Ok(path);
            }
            Err(e) => {
                log::debug!("fetch {url} attempt {attempt} failed: {e}");
                last = e;
            }
        }
    }
    Err(Error::Invalid(format!(
        "download of {url} failed after {FETCH_ATTEMPTS} attempts: {last}"
    )))
}

#[derive(Debug, Deserialize)]
struct PicoRow {
    #[serde(default)]
    local_input_image: Option<String>,
    #[serde(default)]
    open_image_input_url: Option<String>,
    output_image: String,
    text: String,
    edit_type: String,
}

fn path_str(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

/// Reads a Pico-Banana JSONL manifest. Paths inside the manifest are relative
/// to `cfg.dataset_root`. Images are referenced in place, not copied.
pub fn ingest_picobanana(
    manifest: &Path,
    cfg: &AdapterConfig,
    fetcher: &dyn UrlFetcher,
) -> Result<IngestOutcome> {
    cfg.validate()?;
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let mut out = IngestOutcome::default();
    let mut lines: BTreeMap<String, Vec<usize>> = BTreeMap::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let row: PicoRow = match serde_json::from_str(raw) {
            Ok(row) => row,
            Err(e) => {
                out.skip(line, None, format!("malformed JSON: {e}"));
                continue;
            }
        };
        let id = match picobanana_id(&row.output_image) {
            Ok(id) => id,
            Err(e) => {
                out.skip(line, None, e.to_string());
                continue;
            }
        };
        lines.entry(id.clone()).or_default().push(line);

        let edited = cfg.dataset_root.join(&row.output_image);
        if !edited.is_file() {
            out.skip(
                line,
                Some(&id),
                format!("missing edited image {}", edited.display()),
            );
            continue;
        }
        let local = row
            .local_input_image
            .as_deref()
            .map(|p| cfg.dataset_root.join(p))
            .filter(|p| p.is_file());
        let real = match (local, &row.open_image_input_url) {
            (Some(p), _) => p,
            (None, Some(url)) if cfg.download_missing => {
                let cache = cfg.cache_dir.as_deref().expect("validated");
                match fetch_cached(fetcher, url, cache) {
                    Ok(p) => p,
                    Err(e) => {
                        out.skip(line, Some(&id), e.to_string());
                        continue;
                    }
                }
            }
            _ => {
                out.skip(line, Some(&id), "missing local input image".into());
                continue;
            }
        };

        let triplet = EditTriplet {
            triplet_id: id.clone(),
            real_path: path_str(&real),
            edited_path: path_str(&edited),
            instruction: row.text,
            provided_mask_path: None,
            source_dataset: SourceDataset::PicoBanana,
            metadata: BTreeMap::from([(SOURCE_LABEL_KEY.to_string(), row.edit_type)]),
        };
        if let Err(e) = triplet.validate() {
            out.skip(line, Some(&id), e.to_string());
            continue;
        }
        out.triplets.push(triplet);
    }
    out.finish(&lines)
}

/// Result of decoding a MagicBrush mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedMask {
    pub mask: Mask,
    pub inverted: bool,
    pub empty: bool,
}

const BLACK: [u8; 3] = [0, 0, 0];

/// Decodes a mask image whose edited region is painted pure black over the
/// target content. When most of the mask is black the encoding is inverted
/// and the non-black minority is the edited region.
pub fn decode_magicbrush_mask(
    mask_image: &RgbImage,
    target_image: &RgbImage,
) -> Result<DecodedMask> {
    if mask_image.dimensions() != target_image.dimensions() {
        let d = |i: &RgbImage| (i.width() as usize, i.height() as usize);
        return Err(Error::DimensionMismatch {
            left: d(mask_image),
            right: d(target_image),
        });
    }
    let (w, h) = mask_image.dimensions();
    let total = (w as usize) * (h as usize);
    let black = mask_image.pixels().filter(|p| p.0 == BLACK).count();
    let inverted = total > 0 && black as f64 / total as f64 > INVERSION_BLACK_FRAC;
    let mask = Grid::from_fn(w as usize, h as usize, |x, y| {
        let m = mask_image.get_pixel(x as u32, y as u32).0;
        if inverted {
            m != BLACK
        } else {
            m == BLACK && target_image.get_pixel(x as u32, y as u32).0 != BLACK
        }
    });
    let empty = mask.count() == 0;
    Ok(DecodedMask {
        mask,
        inverted,
        empty,
    })
}

#[derive(Debug, Deserialize)]
struct MagicRow {
    img_id: serde_json::Value,
    turn_index: u32,
    instruction: String,
    source_img: String,
    target_img: String,
    mask_img: String,
}

fn load_rgb(path: &Path) -> Result<RgbImage> {
    image::open(path)
        .map(|i| i.to_rgb8())
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Where MagicBrush PNGs are materialized, relative to the output root.
pub const MAGICBRUSH_ASSETS: &str = "triplets/magicbrush";

/// Reads `<dataset_root>/<split>.jsonl`, one row per editing turn with image
/// paths relative to the dataset root, and materializes PNGs plus decoded
/// masks under `output_root`. Recorded paths are relative to `output_root`.
pub fn ingest_magicbrush(
    split: &str,
    cfg: &AdapterConfig,
    output_root: &Path,
) -> Result<IngestOutcome> {
    cfg.validate()?;
    let table = cfg.dataset_root.join(format!("{split}.jsonl"));
    let text = fs::read_to_string(&table).map_err(|e| Error::io(&table, e))?;
    let assets = output_root.join(MAGICBRUSH_ASSETS);
    fs::create_dir_all(&assets).map_err(|e| Error::io(&assets, e))?;
    let mut out = IngestOutcome::default();
    let mut lines: BTreeMap<String, Vec<usize>> = BTreeMap::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let row: MagicRow = match serde_json::from_str(raw) {
            Ok(row) => row,
            Err(e) => {
                out.skip(line, None, format!("malformed JSON: {e}"));
                continue;
            }
        };
        let img_id = match &row.img_id {
            serde_json::Value::String(s) => sanitize_stem(s),
            serde_json::Value::Number(n) => n.to_string(),
            other => {
                out.skip(line, None, format!("unusable img_id {other}"));
                continue;
            }
        };
        if row.turn_index == 0 {
            out.skip(line, None, "turn_index is 1-based".into());
            continue;
        }
        let id = magicbrush_id(split, &img_id, row.turn_index);
        if cfg.single_turn_only && row.turn_index >= 2 {
            log::debug!("{id}: skipped, single_turn_only");
            continue;
        }
        lines.entry(id.clone()).or_default().push(line);

        let loaded = (|| {
            let source = load_rgb(&cfg.dataset_root.join(&row.source_img))?;
            let target = load_rgb(&cfg.dataset_root.join(&row.target_img))?;
            let mask = load_rgb(&cfg.dataset_root.join(&row.mask_img))?;
            Ok::<_, Error>((source, target, mask))
        })();
        let (source, target, mask_img) = match loaded {
            Ok(v) => v,
            Err(e) => {
                out.skip(line, Some(&id), e.to_string());
                continue;
            }
        };
        let decoded = match decode_magicbrush_mask(&mask_img, &target) {
            Ok(d) => d,
            Err(e) => {
                out.skip(line, Some(&id), e.to_string());
                continue;
            }
        };
        if decoded.empty {
            let msg = format!("{id}: empty mask");
            log::warn!("{msg}");
            out.warnings.push(msg);
        }

        let rel = |suffix: &str| format!("{MAGICBRUSH_ASSETS}/{id}_{suffix}.png");
        let (real, edited, gt) = (rel("source"), rel("target"), rel("gt"));
        save_rgb(&source, &output_root.join(&real))?;
        save_rgb(&target, &output_root.join(&edited))?;
        save_rgb(&mask_img, &output_root.join(rel("mask")))?;
        decoded.mask.save_png(&output_root.join(&gt))?;

        out.triplets.push(EditTriplet {
            triplet_id: id,
            real_path: real,
            edited_path: edited,
            instruction: row.instruction,
            provided_mask_path: Some(gt),
            source_dataset: SourceDataset::MagicBrush,
            metadata: BTreeMap::from([
                (AUTHENTIC_KEY.to_string(), (row.turn_index == 1).to_string()),
                (SPLIT_KEY.to_string(), split.to_string()),
                (TURN_KEY.to_string(), row.turn_index.to_string()),
            ]),
        });
    }
    out.finish(&lines)
}

pub const SYNTH_KIND_KEY: &str = "synth_kind";
pub const SYNTH_SCOPE_KEY: &str = "gt_scope";

/// Reads a dataset written by [`crate::synth::write_dataset`].
pub fn ingest_synthetic(dir: &Path) -> Result<IngestOutcome> {
    let manifest = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut out = IngestOutcome::default();
    let mut lines: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let row: SynthManifestRow = serde_json::from_str(raw).map_err(|e| Error::Record {
            path: manifest.clone(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        lines
            .entry(row.triplet_id.clone())
            .or_default()
            .push(idx + 1);
        out.triplets.push(EditTriplet {
            real_path: path_str(&dir.join(&row.real_path)),
            edited_path: path_str(&dir.join(&row.edited_path)),
            provided_mask_path: Some(path_str(&dir.join(&row.gt_mask_path))),
            instruction: row.instruction,
            source_dataset: SourceDataset::Synthetic,
            metadata: BTreeMap::from([
                (
                    SYNTH_KIND_KEY.to_string(),
                    row.spec.kind.as_str().to_string(),
                ),
                (
                    SYNTH_SCOPE_KEY.to_string(),
                    row.gt_scope.as_str().to_string(),
                ),
            ]),
            triplet_id: row.triplet_id,
        });
    }
    out.finish(&lines)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn ids() {
        assert_eq!(
            picobanana_id("out/kewsee_retry1.png").unwrap(),
            "picobanana_kewsee_retry1"
        );
        assert_eq!(picobanana_id("a/B c.d.png").unwrap(), "picobanana_b_c_d");
        assert_eq!(magicbrush_id("dev", "12345", 1), "magicbrush_dev_12345_t01");
        assert_eq!(magicbrush_id("train", "7", 12), "magicbrush_train_7_t12");
    }

    fn target() -> RgbImage {
        RgbImage::from_fn(40, 30, |x, y| {
            Rgb([(x * 5) as u8 + 10, (y * 7) as u8 + 10, 90])
        })
    }

    fn in_patch(x: u32, y: u32) -> bool {
        (5..25).contains(&x) && (3..23).contains(&y)
    }

    #[test]
    fn decode_normal_encoding() {
        let t = target();
        let mut m = t.clone();
        for (x, y, p) in m.enumerate_pixels_mut() {
            if in_patch(x, y) {
                *p = Rgb(BLACK);
            }
        }
        let d = decode_magicbrush_mask(&m, &t).unwrap();
        assert!(!d.inverted);
        assert_eq!(
            d.mask,
            Grid::from_fn(40, 30, |x, y| in_patch(x as u32, y as u32))
        );
    }

    #[test]
    fn decode_inverted_encoding() {
        let t = target();
        let m = RgbImage::from_fn(40, 30, |x, y| {
            if (30..36).contains(&x) && (20..28).contains(&y) {
                *t.get_pixel(x, y)
            } else {
                Rgb(BLACK)
            }
        });
        let d = decode_magicbrush_mask(&m, &t).unwrap();
        assert!(d.inverted);
        assert_eq!(d.mask.count(), 48);
        assert!(*d.mask.get(30, 20) && !*d.mask.get(0, 0));
    }

    #[test]
    fn decode_empty_and_mismatch() {
        let t = target();
        let d = decode_magicbrush_mask(&t, &t).unwrap();
        assert!(d.empty && d.mask.count() == 0);
        assert!(decode_magicbrush_mask(&RgbImage::new(3, 3), &t).is_err());
    }

    #[test]
    fn cache_names_are_stable() {
        let a = cache_path(Path::new("/c"), "https://x.org/img/1.jpg?sig=2");
        assert_eq!(
            a,
            cache_path(Path::new("/c"), "https://x.org/img/1.jpg?sig=2")
        );
        assert_eq!(a.extension().unwrap(), "jpg");
        assert_ne!(a, cache_path(Path::new("/c"), "https://x.org/img/2.jpg"));
    }
}
