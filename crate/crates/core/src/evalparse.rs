//! Field extraction from model generations and the evaluation metrics.
//!
//! Parsing is lenient about structure (reordered steps, header-only output,
//! JSON wrapped in prose) and strict about vocabulary: a value outside the
//! closed enums is treated as not extracted.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::chaincomp::{bin_phrase, location_phrase};
use crate::error::{Error, Result};
use crate::records::{read_records, Bin, Category, ReasoningChain, Scope, SpatialDescriptor};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedFields {
    pub category: Option<Category>,
    pub spatial: Option<SpatialDescriptor>,
    pub bin: Option<Bin>,
    pub parse_notes: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldTriple {
    pub category: Category,
    pub spatial: SpatialDescriptor,
    pub bin: Bin,
}

impl GoldTriple {
    pub fn from_chain(chain: &ReasoningChain) -> Self {
        Self {
            category: chain.header.category,
            spatial: chain.descriptor,
            bin: chain.header.difficulty,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationMode {
    Chain,
    Label,
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub triplet_id: String,
    pub generation_text: String,
    pub mode: GenerationMode,
}

impl Generation {
    pub fn extract(&self) -> ExtractedFields {
        match self.mode {
            GenerationMode::Chain => parse_chain_fields(&self.generation_text),
            GenerationMode::Label => parse_label_json(&self.generation_text),
        }
    }
}

struct Patterns {
    header: Regex,
    step: Regex,
    classified: Regex,
}

fn patterns() -> &'static Patterns {
    static P: OnceLock<Patterns> = OnceLock::new();
    P.get_or_init(|| Patterns {
        header: Regex::new(
            r"\[\s*category\s*=\s*([A-Za-z_]+)\s*,\s*scope\s*=\s*([A-Za-z_]+)\s*,\s*difficulty\s*=\s*([A-Za-z_]+)\s*(?:,\s*source\s*=\s*([A-Za-z_]+)\s*)?\]",
        )
        .unwrap(),
        step: Regex::new(r"(?m)^\s*([1-6])\.\s+(.*)$").unwrap(),
        classified: Regex::new(r"classified as\s+([A-Za-z_]+)").unwrap(),
    })
}

struct Header {
    category: Category,
    scope: Scope,
    bin: Bin,
}

fn parse_header(text: &str) -> Option<Header> {
    let c = patterns().header.captures(text)?;
    Some(Header {
        category: c[1].to_lowercase().parse().ok()?,
        scope: c[2].to_lowercase().parse().ok()?,
        bin: c[3].to_lowercase().parse().ok()?,
    })
}

fn spatial_from_step2(step: &str) -> Option<SpatialDescriptor> {
    let lower = step.to_lowercase();
    if lower.contains("failed alignment") {
        return Some(SpatialDescriptor::AlignmentFailed);
    }
    SpatialDescriptor::ALL
        .iter()
        .copied()
        .filter(|d| *d != SpatialDescriptor::AlignmentFailed)
        .find(|d| lower.contains(location_phrase(*d)))
}

fn bin_from_step6(step: &str) -> Option<Bin> {
    let lower = step.to_lowercase();
    Bin::ALL
        .iter()
        .copied()
        .find(|b| lower.contains(bin_phrase(*b)))
        .or_else(|| {
            if lower.contains("easier than average") {
                Some(Bin::Easy)
            } else if lower.contains("harder than average") {
                Some(Bin::Hard)
            } else if lower.contains("moderate detection difficulty") {
                Some(Bin::Medium)
            } else {
                None
            }
        })
}

/// Extracts (category, spatial descriptor, bin) from chain-style text.
///
/// A well-formed header supplies category and bin (and the descriptor for
/// global and alignment-failed scopes); steps 4, 2 and 6 fill in the rest.
pub fn parse_chain_fields(text: &str) -> ExtractedFields {
    let p = patterns();
    let mut out = ExtractedFields::default();
    let header = parse_header(text);

    let mut steps: BTreeMap<u8, &str> = BTreeMap::new();
    for c in p.step.captures_iter(text) {
        let n: u8 = c[1].parse().expect("digit");
        steps.entry(n).or_insert(c.get(2).unwrap().as_str());
    }

    let step_category = steps.get(&4).and_then(|s| {
        let raw = p.classified.captures(s)?.get(1)?.as_str().to_lowercase();
        match raw.parse::<Category>() {
            Ok(c) => Some(c),
            Err(_) => {
                out.parse_notes
                    .push(format!("category: unknown label {raw:?}"));
                None
            }
        }
    });
    let step_spatial = steps.get(&2).and_then(|s| spatial_from_step2(s));
    let step_bin = steps.get(&6).and_then(|s| bin_from_step6(s));

    match &header {
        Some(h) => {
            out.category = Some(h.category);
            out.bin = Some(h.bin);
            if step_category.is_none() {
                out.parse_notes
                    .push("category: step 4 missing or unparseable; taken from header".into());
            } else if step_category != Some(h.category) {
                out.parse_notes
                    .push("category: header and step 4 disagree; header used".into());
            }
            if step_bin.is_none() {
                out.parse_notes
                    .push("bin: step 6 missing or unparseable; taken from header".into());
            } else if step_bin != Some(h.bin) {
                out.parse_notes
                    .push("bin: header and step 6 disagree; header used".into());
            }
            out.spatial = match h.scope {
                Scope::Global => Some(SpatialDescriptor::WholeImage),
                Scope::AlignmentFailed => Some(SpatialDescriptor::AlignmentFailed),
                Scope::Local | Scope::Ambiguous => step_spatial,
            };
        }
        None => {
            out.category = step_category;
            out.spatial = step_spatial;
            out.bin = step_bin;
            if steps.is_empty() {
                out.parse_notes
                    .push("no header and no numbered steps".into());
            }
        }
    }
    for (field, missing) in [
        ("category", out.category.is_none()),
        ("spatial", out.spatial.is_none()),
        ("bin", out.bin.is_none()),
    ] {
        if missing {
            out.parse_notes.push(format!("{field}: not extracted"));
        }
    }
    out
}

fn first_json_object(text: &str) -> Option<serde_json::Map<String, serde_json::Value>> {
    for (i, _) in text.match_indices('{') {
        let mut stream =
            serde_json::Deserializer::from_str(&text[i..]).into_iter::<serde_json::Value>();
        if let Some(Ok(serde_json::Value::Object(map))) = stream.next() {
            return Some(map);
        }
    }
    None
}

/// Extracts fields from a label-style generation containing a JSON object.
pub fn parse_label_json(text: &str) -> ExtractedFields {
    let mut out = ExtractedFields::default();
    let Some(map) = first_json_object(text) else {
        out.parse_notes.push("no JSON object found".into());
        return out;
    };
    let lowered: BTreeMap<String, &serde_json::Value> = map
        .iter()
        .map(|(k, v)| (k.trim().to_lowercase(), v))
        .collect();
    let lookup = |keys: &[&str]| {
        keys.iter()
            .find_map(|k| lowered.get(*k))
            .and_then(|v| v.as_str())
            .map(|s| s.trim().to_lowercase())
    };

    let mut note_unknown = |field: &str, raw: &str| {
        out.parse_notes
            .push(format!("{field}: unknown label {raw:?}"));
    };
    let category = lookup(&["category", "edit_category"]).and_then(|raw| {
        raw.parse::<Category>()
            .map_err(|_| note_unknown("category", &raw))
            .ok()
    });
    let spatial = lookup(&["scope", "spatial", "spatial_descriptor", "location"]).and_then(|raw| {
        if raw == "global" {
            return Some(SpatialDescriptor::WholeImage);
        }
        raw.parse::<SpatialDescriptor>()
            .map_err(|_| note_unknown("spatial", &raw))
            .ok()
    });
    let bin = lookup(&["difficulty_bin", "difficulty", "bin"]).and_then(|raw| {
        raw.parse::<Bin>()
            .map_err(|_| note_unknown("bin", &raw))
            .ok()
    });
    out.category = category;
    out.spatial = spatial;
    out.bin = bin;
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FieldMetrics {
    pub extracted: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub recall: f64,
    /// Accuracy among extracted predictions; `None` when nothing parsed.
    pub conditional_accuracy: Option<f64>,
}

impl FieldMetrics {
    pub fn from_counts(n: usize, extracted: usize, correct: usize) -> Self {
        let frac = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
        Self {
            extracted,
            correct,
            accuracy: frac(correct),
            recall: frac(extracted),
            conditional_accuracy: (extracted > 0).then(|| correct as f64 / extracted as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub n: usize,
    pub category: FieldMetrics,
    pub spatial: FieldMetrics,
    pub bin: FieldMetrics,
    pub joint_correct: usize,
    pub joint_accuracy: f64,
}

impl MetricsReport {
    pub fn fields(&self) -> [(&'static str, &FieldMetrics); 3] {
        [
            ("category", &self.category),
            ("spatial", &self.spatial),
            ("bin", &self.bin),
        ]
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("field,n,extracted,correct,accuracy,recall,conditional_accuracy\n");
        for (name, f) in self.fields() {
            out.push_str(&format!(
                "{name},{},{},{},{:.6},{:.6},{}\n",
                self.n,
                f.extracted,
                f.correct,
                f.accuracy,
                f.recall,
                f.conditional_accuracy
                    .map(|v| format!("{v:.6}"))
                    .unwrap_or_default()
            ));
        }
        out.push_str(&format!(
            "joint,{},,{},{:.6},,\n",
            self.n, self.joint_correct, self.joint_accuracy
        ));
        out
    }
}

pub fn score_predictions(preds: &[ExtractedFields], refs: &[GoldTriple]) -> Result<MetricsReport> {
    if preds.len() != refs.len() {
        return Err(Error::Invalid(format!(
            "{} predictions but {} references",
            preds.len(),
            refs.len()
        )));
    }
    let n = preds.len();
    let mut ext = [0usize; 3];
    let mut ok = [0usize; 3];
    let mut joint = 0;
    for (p, r) in preds.iter().zip(refs) {
        let hits = [
            (p.category.is_some(), p.category == Some(r.category)),
            (p.spatial.is_some(), p.spatial == Some(r.spatial)),
            (p.bin.is_some(), p.bin == Some(r.bin)),
        ];
        for (i, (e, c)) in hits.iter().enumerate() {
            ext[i] += *e as usize;
            ok[i] += *c as usize;
        }
        if hits.iter().all(|(_, c)| *c) {
            joint += 1;
        }
    }
    Ok(MetricsReport {
        n,
        category: FieldMetrics::from_counts(n, ext[0], ok[0]),
        spatial: FieldMetrics::from_counts(n, ext[1], ok[1]),
        bin: FieldMetrics::from_counts(n, ext[2], ok[2]),
        joint_correct: joint,
        joint_accuracy: if n == 0 { 0.0 } else { joint as f64 / n as f64 },
    })
}

/// Scores a predictions JSONL file against the chains stage file holding the
/// reference records. References without a prediction count as unparsed;
/// predictions for unknown IDs are an error.
pub fn evaluate_files(preds: &Path, refs: &Path) -> Result<(MetricsReport, Vec<String>)> {
    let text = std::fs::read_to_string(preds).map_err(|e| Error::io(preds, e))?;
    let mut by_id: BTreeMap<String, Generation> = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let g: Generation = serde_json::from_str(line).map_err(|e| Error::Record {
            path: preds.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        if by_id.contains_key(&g.triplet_id) {
            return Err(Error::DuplicateId {
                id: g.triplet_id,
                context: format!(" in {}", preds.display()),
            });
        }
        by_id.insert(g.triplet_id.clone(), g);
    }
    let chains: Vec<ReasoningChain> = read_records(refs)?;
    let known: BTreeSet<&str> = chains.iter().map(|c| c.triplet_id.as_str()).collect();
    if let Some(stray) = by_id.keys().find(|id| !known.contains(id.as_str())) {
        return Err(Error::Invalid(format!(
            "prediction for unknown triplet {stray:?}"
        )));
    }
    let mut warnings = Vec::new();
    let mut extracted = Vec::with_capacity(chains.len());
    let mut gold = Vec::with_capacity(chains.len());
    for chain in &chains {
        gold.push(GoldTriple::from_chain(chain));
        match by_id.get(&chain.triplet_id) {
            Some(g) => extracted.push(g.extract()),
            None => {
                warnings.push(format!("{}: no prediction", chain.triplet_id));
                extracted.push(ExtractedFields::default());
            }
        }
    }
    Ok((score_predictions(&extracted, &gold)?, warnings))
}
