//! Detection-difficulty scoring and dataset-internal tertile binning.
//!
//! V2 combines structural change, spatial diffuseness and instruction
//! complexity: `D = w_S*s_struct + w_C*s_compact + w_I*s_instr`. V1 is the
//! older four-term baseline over structural change, perceptual change,
//! locality and instruction complexity, kept for the ablation.

use std::collections::BTreeMap;
use std::path::Path;

use image::RgbImage;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::diffmask::perceptual::PerceptualBackend;
use crate::diffmask::{self, Alignment};
use crate::error::{Error, Result};
use crate::grid::Mask;
use crate::records::{Bin, DifficultyRecord, MaskArtifact, Scope, ScorerVersion};
use crate::stats::{percentile_sorted, sorted_copy};

pub const INSTRUCTION_FLOOR: f64 = 0.05;
/// Value imputed for mask- or pair-dependent components when the pair
/// failed alignment.
pub const IMPUTED_COMPONENT: f64 = 0.5;

pub const FLAG_EMPTY_INSTRUCTION: &str = "empty_instruction";
pub const FLAG_EMPTY_MASK: &str = "degenerate_empty_mask";
pub const FLAG_ALIGNMENT_FAILED: &str = "degraded_alignment_failed";

const BUILTIN_LEXICON: &str = include_str!("../data/instruction_lexicon.toml");

#[derive(Debug, Clone, Deserialize)]
struct LexiconFile {
    version: String,
    #[serde(default)]
    count_commas: bool,
    conjunctions: Vec<String>,
    verbs: Vec<String>,
    spatial: Vec<String>,
}

/// Versioned word lists for [`instruction_complexity`].
#[derive(Debug, Clone)]
pub struct Lexicon {
    pub version: String,
    count_commas: bool,
    conjunctions: Regex,
    verbs: Regex,
    spatial: Regex,
}

fn alternation(words: &[String], inflect: bool) -> Result<Regex> {
    if words.is_empty() {
        return Err(Error::Config("lexicon word list is empty".into()));
    }
    let mut sorted: Vec<&String> = words.iter().collect();
    // Longest first so multi-word entries win over their prefixes.
    sorted.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
    let body = sorted
        .iter()
        .map(|w| regex::escape(&w.to_lowercase()).replace(' ', r"\s+"))
        .collect::<Vec<_>>()
        .join("|");
    let suffix = if inflect { "(?:s|es|d|ed|ing)?" } else { "" };
    Regex::new(&format!(r"\b(?:{body}){suffix}\b"))
        .map_err(|e| Error::Config(format!("lexicon pattern: {e}")))
}

impl Lexicon {
    pub fn builtin() -> Self {
        Self::from_toml_str(BUILTIN_LEXICON).expect("builtin lexicon is valid")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: LexiconFile =
            toml::from_str(text).map_err(|e| Error::Config(format!("lexicon: {e}")))?;
        Ok(Self {
            version: file.version,
            count_commas: file.count_commas,
            conjunctions: alternation(&file.conjunctions, false)?,
            verbs: alternation(&file.verbs, true)?,
            spatial: alternation(&file.spatial, false)?,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn counts(&self, text: &str) -> InstructionCounts {
        let lower = text.to_lowercase();
        let commas = if self.count_commas {
            lower.matches(',').count()
        } else {
            0
        };
        InstructionCounts {
            words: lower.split_whitespace().count(),
            verbs: self.verbs.find_iter(&lower).count(),
            conjunctions: self.conjunctions.find_iter(&lower).count() + commas,
            spatial: self.spatial.find_iter(&lower).count(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstructionCounts {
    pub words: usize,
    pub verbs: usize,
    pub conjunctions: usize,
    pub spatial: usize,
}

/// Mean of `words/30`, `verbs/3`, `conjunctions/2` and `spatial/2`, each
/// clamped to [0, 1], floored at [`INSTRUCTION_FLOOR`].
pub fn instruction_complexity(text: &str, lexicon: &Lexicon) -> f64 {
    let c = lexicon.counts(text);
    let sub = |count: usize, cap: f64| (count as f64 / cap).min(1.0);
    let mean =
        (sub(c.words, 30.0) + sub(c.verbs, 3.0) + sub(c.conjunctions, 2.0) + sub(c.spatial, 2.0))
            / 4.0;
    mean.max(INSTRUCTION_FLOOR)
}

/// `1 - mean SSIM`, clamped to [0, 1].
pub fn structural_score(real: &RgbImage, edited: &RgbImage) -> Result<f64> {
    Ok((1.0 - diffmask::ssim::mean_ssim(real, edited)?).clamp(0.0, 1.0))
}

/// `sqrt(|M|/|bbox(M)| * |largest cc|/|M|)`; 0 for an empty mask.
pub fn compactness(mask: &Mask) -> f64 {
    let Some(bbox) = mask.bbox() else {
        return 0.0;
    };
    let n = mask.count() as f64;
    let fill = n / bbox.area() as f64;
    let share = mask.largest_component() as f64 / n;
    (fill * share).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyWeights {
    pub version: ScorerVersion,
    pub weights: BTreeMap<String, f64>,
}

impl DifficultyWeights {
    pub fn default_for(version: ScorerVersion) -> Self {
        let pairs: &[(&str, f64)] = match version {
            ScorerVersion::V2 => &[("struct", 0.55), ("compact", 0.25), ("instr", 0.20)],
            ScorerVersion::V1 => &[
                ("struct", 0.30),
                ("perc", 0.30),
                ("loc", 0.20),
                ("instr", 0.20),
            ],
        };
        Self {
            version,
            weights: pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    pub fn components(version: ScorerVersion) -> &'static [&'static str] {
        match version {
            ScorerVersion::V2 => &["compact", "instr", "struct"],
            ScorerVersion::V1 => &["instr", "loc", "perc", "struct"],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let keys: Vec<&str> = self.weights.keys().map(String::as_str).collect();
        if keys != Self::components(self.version) {
            return Err(Error::Config(format!(
                "{} weights need components {:?}, got {keys:?}",
                self.version,
                Self::components(self.version)
            )));
        }
        if self.weights.values().any(|w| w.is_nan() || *w < 0.0) {
            return Err(Error::Config("weights must be nonnegative".into()));
        }
        let sum: f64 = self.weights.values().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("weights sum to {sum}, expected 1")));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let w: Self =
            toml::from_str(&text).map_err(|e| Error::Config(format!("weights file: {e}")))?;
        w.validate()?;
        Ok(w)
    }

    pub fn get(&self, component: &str) -> f64 {
        self.weights.get(component).copied().unwrap_or(0.0)
    }
}

pub fn score_v2(s_struct: f64, s_compact: f64, s_instr: f64, w: &DifficultyWeights) -> f64 {
    w.get("struct") * s_struct + w.get("compact") * s_compact + w.get("instr") * s_instr
}

pub fn score_v1(
    s_struct: f64,
    s_perc: f64,
    s_loc: f64,
    s_instr: f64,
    w: &DifficultyWeights,
) -> f64 {
    w.get("struct") * s_struct
        + w.get("perc") * s_perc
        + w.get("loc") * s_loc
        + w.get("instr") * s_instr
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TertileCutoffs {
    pub p33: f64,
    pub p66: f64,
    pub n: usize,
}

impl TertileCutoffs {
    pub fn assign(&self, score: f64) -> Bin {
        if score <= self.p33 {
            Bin::Easy
        } else if score <= self.p66 {
            Bin::Medium
        } else {
            Bin::Hard
        }
    }
}

/// Cutoffs at the exact one-third and two-thirds ranks, linearly
/// interpolated. This gives bin sizes differing by at most one on distinct
/// scores.
pub fn tertile_bins(scores: &[f64]) -> Result<TertileCutoffs> {
    if scores.len() < 3 {
        return Err(Error::Invalid(format!(
            "tertile binning needs at least 3 scores, got {}",
            scores.len()
        )));
    }
    let sorted = sorted_copy(scores);
    if sorted.first() == sorted.last() {
        log::warn!(
            "all {} difficulty scores are equal; every triplet bins easy",
            scores.len()
        );
    }
    Ok(TertileCutoffs {
        p33: percentile_sorted(&sorted, 1, 3),
        p66: percentile_sorted(&sorted, 2, 3),
        n: scores.len(),
    })
}

/// Per-triplet component scores before corpus binning.
#[derive(Debug, Clone, PartialEq)]
pub struct Components {
    pub triplet_id: String,
    pub s_struct: f64,
    pub s_perc: Option<f64>,
    pub s_loc: Option<f64>,
    pub s_compact: Option<f64>,
    pub s_instr: f64,
    pub flags: Vec<String>,
}

impl Components {
    /// Degraded rows are scored but excluded from the cutoff computation and
    /// always binned medium.
    pub fn is_degraded(&self) -> bool {
        self.flags.iter().any(|f| f == FLAG_ALIGNMENT_FAILED)
    }

    pub fn score(&self, w: &DifficultyWeights) -> f64 {
        match w.version {
            ScorerVersion::V2 => score_v2(
                self.s_struct,
                self.s_compact.unwrap_or(IMPUTED_COMPONENT),
                self.s_instr,
                w,
            ),
            ScorerVersion::V1 => score_v1(
                self.s_struct,
                self.s_perc.unwrap_or(IMPUTED_COMPONENT),
                self.s_loc.unwrap_or(IMPUTED_COMPONENT),
                self.s_instr,
                w,
            ),
        }
    }
}

fn perceptual_mean(mask: &MaskArtifact) -> Option<f64> {
    mask.per_signal_means
        .iter()
        .find(|(k, _)| k.starts_with("perceptual"))
        .map(|(_, v)| *v)
}

/// Computes the components of one triplet. `mask.mask` must be loaded for
/// aligned pairs. V1 reuses the perceptual mean recorded by the mask stage
/// and falls back to `backend` when the stack did not include it.
pub fn measure(
    real: &RgbImage,
    edited: &RgbImage,
    mask: &MaskArtifact,
    instruction: &str,
    version: ScorerVersion,
    lexicon: &Lexicon,
    backend: Option<&mut dyn PerceptualBackend>,
) -> Result<Components> {
    let mut flags = Vec::new();
    let s_instr = instruction_complexity(instruction, lexicon);
    if instruction.trim().is_empty() {
        flags.push(FLAG_EMPTY_INSTRUCTION.to_string());
    }
    let aligned = match (mask.scope, diffmask::align_pair(real, edited)) {
        (Scope::AlignmentFailed, _) | (_, Alignment::Failed { .. }) => None,
        (_, Alignment::Aligned(pair)) => Some(pair),
    };
    let Some(pair) = aligned else {
        flags.push(FLAG_ALIGNMENT_FAILED.to_string());
        return Ok(Components {
            triplet_id: mask.triplet_id.clone(),
            s_struct: IMPUTED_COMPONENT,
            s_perc: (version == ScorerVersion::V1).then_some(IMPUTED_COMPONENT),
            s_loc: (version == ScorerVersion::V1).then_some(IMPUTED_COMPONENT),
            s_compact: (version == ScorerVersion::V2).then_some(IMPUTED_COMPONENT),
            s_instr,
            flags,
        });
    };

    let s_struct = structural_score(&pair.real, &pair.edited)?;
    let mut out = Components {
        triplet_id: mask.triplet_id.clone(),
        s_struct,
        s_perc: None,
        s_loc: None,
        s_compact: None,
        s_instr,
        flags,
    };
    match version {
        ScorerVersion::V2 => {
            let m = mask.mask.as_ref().ok_or_else(|| {
                Error::Invalid(format!("{}: mask pixels not loaded", mask.triplet_id))
            })?;
            if m.count() == 0 {
                out.flags.push(FLAG_EMPTY_MASK.to_string());
            }
            out.s_compact = Some(1.0 - compactness(m));
        }
        ScorerVersion::V1 => {
            let s_perc = match (perceptual_mean(mask), backend) {
                (Some(v), _) => v,
                (None, Some(backend)) => diffmask::perceptual_map(&pair, backend)?.0.mean(),
                (None, None) => {
                    return Err(Error::Config(
                        "v1 scoring needs a perceptual backend or a perceptual mask signal".into(),
                    ))
                }
            };
            out.s_perc = Some(s_perc.clamp(0.0, 1.0));
            out.s_loc = Some((1.0 - mask.mask_area_frac).clamp(0.0, 1.0));
        }
    }
    Ok(out)
}

/// Scores and bins one dataset. Returns records in input order plus the
/// cutoffs computed over the non-degraded rows.
pub fn bin_dataset(
    components: &[Components],
    weights: &DifficultyWeights,
) -> Result<(Vec<DifficultyRecord>, TertileCutoffs)> {
    weights.validate()?;
    let scores: Vec<f64> = components.iter().map(|c| c.score(weights)).collect();
    let clean: Vec<f64> = components
        .iter()
        .zip(&scores)
        .filter(|(c, _)| !c.is_degraded())
        .map(|(_, s)| *s)
        .collect();
    let cutoffs = tertile_bins(&clean)?;
    let records = components
        .iter()
        .zip(scores)
        .map(|(c, score)| DifficultyRecord {
            triplet_id: c.triplet_id.clone(),
            scorer_version: weights.version,
            s_struct: c.s_struct,
            s_perc: c.s_perc,
            s_loc: c.s_loc,
            s_compact: c.s_compact,
            s_instr: c.s_instr,
            score,
            bin: if c.is_degraded() {
                Bin::Medium
            } else {
                cutoffs.assign(score)
            },
            flags: c.flags.clone(),
        })
        .collect();
    Ok((records, cutoffs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;

    #[test]
    fn instruction_floor_and_examples() {
        let lex = Lexicon::builtin();
        assert_eq!(instruction_complexity("", &lex), INSTRUCTION_FLOOR);
        let bear = instruction_complexity("add a polar bear", &lex);
        assert!((bear - (4.0 / 30.0 + 1.0 / 3.0) / 4.0).abs() < 1e-12);
        let t = "make the sky purple";
        assert!(
            instruction_complexity(&format!("{t} and then also move it to the left"), &lex)
                > instruction_complexity(t, &lex)
        );
    }

    #[test]
    fn counts_handle_multiword_and_commas() {
        let lex = Lexicon::builtin();
        let c = lex.counts("Put a cat next to the dog, then remove the hat on the left");
        assert_eq!(c.words, 14);
        assert_eq!(c.verbs, 2);
        assert_eq!(c.conjunctions, 2);
        assert_eq!(c.spatial, 2);
    }

    #[test]
    fn compactness_examples() {
        let square = Grid::from_fn(20, 20, |x, y| (5..15).contains(&x) && (5..15).contains(&y));
        assert_eq!(compactness(&square), 1.0);

        let mut half = Grid::from_fn(10, 10, |_, y| y < 5);
        half.set(9, 9, true);
        // 51 pixels over a full 10x10 bbox, 50 in the largest component.
        assert!((compactness(&half) - (0.51f64 * 50.0 / 51.0).sqrt()).abs() < 1e-12);

        let two = Grid::from_fn(100, 100, |x, y| (x < 5 && y < 5) || (x >= 95 && y >= 95));
        assert!((compactness(&two) - 0.05).abs() < 1e-12);

        assert_eq!(compactness(&Grid::filled(4, 4, false)), 0.0);
    }

    #[test]
    fn score_examples() {
        let v2 = DifficultyWeights::default_for(ScorerVersion::V2);
        assert!((score_v2(0.5, 0.4, 0.6, &v2) - 0.495).abs() < 1e-15);
        assert_eq!(score_v2(0.0, 0.0, 0.0, &v2), 0.0);
        assert!((score_v2(1.0, 1.0, 1.0, &v2) - 1.0).abs() < 1e-15);

        let eq = DifficultyWeights {
            version: ScorerVersion::V1,
            weights: ["struct", "perc", "loc", "instr"]
                .iter()
                .map(|k| (k.to_string(), 0.25))
                .collect(),
        };
        eq.validate().unwrap();
        assert!((score_v1(0.8, 0.8, 0.2, 0.4, &eq) - 0.55).abs() < 1e-15);
    }

    #[test]
    fn weights_validation() {
        DifficultyWeights::default_for(ScorerVersion::V1)
            .validate()
            .unwrap();
        let mut w = DifficultyWeights::default_for(ScorerVersion::V2);
        w.weights.insert("struct".into(), 0.6);
        assert!(w.validate().is_err());
        w.weights.insert("struct".into(), 0.55);
        w.weights.insert("perc".into(), 0.0);
        assert!(w.validate().is_err());
    }

    #[test]
    fn tertiles_on_one_to_nine() {
        let scores: Vec<f64> = (1..=9).map(f64::from).collect();
        let c = tertile_bins(&scores).unwrap();
        let mut sizes = [0; 3];
        for s in &scores {
            sizes[c.assign(*s) as usize] += 1;
        }
        assert_eq!(sizes, [3, 3, 3]);
        assert!(tertile_bins(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn equal_scores_all_easy() {
        let c = tertile_bins(&[0.4; 10]).unwrap();
        assert_eq!(c.assign(0.4), Bin::Easy);
    }

    #[test]
    fn degraded_rows_bin_medium_and_skip_cutoffs() {
        let comp = |id: &str, s: f64, degraded: bool| Components {
            triplet_id: id.into(),
            s_struct: s,
            s_perc: None,
            s_loc: None,
            s_compact: Some(s),
            s_instr: s,
            flags: if degraded {
                vec![FLAG_ALIGNMENT_FAILED.into()]
            } else {
                vec![]
            },
        };
        let rows = vec![
            comp("a", 0.1, false),
            comp("b", 0.5, false),
            comp("c", 0.9, false),
            comp("d", 0.0, true),
        ];
        let (records, cutoffs) =
            bin_dataset(&rows, &DifficultyWeights::default_for(ScorerVersion::V2)).unwrap();
        assert_eq!(cutoffs.n, 3);
        let bins: Vec<Bin> = records.iter().map(|r| r.bin).collect();
        assert_eq!(bins, [Bin::Easy, Bin::Medium, Bin::Hard, Bin::Medium]);
    }
}
