//! Canonical per-stage record types and their line-delimited JSON persistence.
//!
//! Every stage writes `<output_root>/<stage>/<dataset>.jsonl`, one record per
//! line, sorted by `triplet_id`, each row tagged with `"schema": "<stage>/v1"`.
//! Field order inside a row follows the struct declaration order. Binary
//! masks are not inlined; they live as PNG files under
//! `<output_root>/masks_png/<triplet_id>.png`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Mask;

macro_rules! string_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::Invalid(format!(
                        "unknown {} value {other:?}", stringify!($name)
                    ))),
                }
            }
        }
    };
}

string_enum!(
    SourceDataset {
        PicoBanana => "pico_banana",
        MagicBrush => "magicbrush",
        Synthetic => "synthetic",
    }
);

string_enum!(
    /// Routing label assigned by the mask stage.
    Scope {
        Local => "local",
        Global => "global",
        Ambiguous => "ambiguous",
        AlignmentFailed => "alignment_failed",
    }
);

string_enum!(
    /// Which branch of scope routing produced the label.
    RoutePath {
        MeanThreshold => "path1_mean",
        MaskArea => "path2_area",
        DegenerateOtsu => "degenerate_otsu",
        AlignmentFailed => "alignment_failed",
    }
);

string_enum!(
    Signal {
        Lab => "lab",
        Ssim => "ssim",
        Perceptual => "perceptual",
    }
);

string_enum!(
    ScorerVersion {
        V1 => "v1",
        V2 => "v2",
    }
);

string_enum!(
    Bin {
        Easy => "easy",
        Medium => "medium",
        Hard => "hard",
    }
);

string_enum!(
    /// The 12-label canonical edit taxonomy.
    Category {
        ObjectAddition => "object_addition",
        ObjectRemoval => "object_removal",
        ObjectReplacement => "object_replacement",
        AttributeChange => "attribute_change",
        StyleTransfer => "style_transfer",
        Photometric => "photometric",
        SceneTransformation => "scene_transformation",
        BackgroundChange => "background_change",
        TextEdit => "text_edit",
        Geometric => "geometric",
        HumanCentric => "human_centric",
        Other => "other",
    }
);

string_enum!(
    CategorySource {
        DatasetLabel => "dataset_label",
        RuleBased => "rule_based",
        Fallback => "fallback",
    }
);

string_enum!(
    /// Coarse location of the edit used in chain step 2.
    SpatialDescriptor {
        WholeImage => "whole_image",
        UpperLeft => "upper_left",
        UpperRight => "upper_right",
        LowerLeft => "lower_left",
        LowerRight => "lower_right",
        Centered => "centered",
        Scattered => "scattered",
        AlignmentFailed => "alignment_failed",
    }
);

/// Canonical ingested record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditTriplet {
    pub triplet_id: String,
    pub real_path: String,
    pub edited_path: String,
    pub instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provided_mask_path: Option<String>,
    pub source_dataset: SourceDataset,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl EditTriplet {
    pub fn validate(&self) -> Result<()> {
        if self.triplet_id.is_empty() {
            return Err(Error::Invalid("empty triplet_id".into()));
        }
        if self.real_path == self.edited_path {
            return Err(Error::Invalid(format!(
                "{}: real_path and edited_path are identical",
                self.triplet_id
            )));
        }
        Ok(())
    }
}

/// Output of the mask stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskArtifact {
    pub triplet_id: String,
    pub scope: Scope,
    pub route: RoutePath,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    pub mask_area_frac: f64,
    pub combined_diff_mean: f64,
    pub per_signal_means: BTreeMap<String, f64>,
    pub signal_stack: Vec<Signal>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub otsu_threshold_used: Option<f64>,
    /// The binary mask itself; persisted separately as PNG.
    #[serde(skip)]
    pub mask: Option<Mask>,
}

impl MaskArtifact {
    /// Loads the PNG referenced by `mask_path`, resolved against `root`.
    pub fn load_mask(&mut self, root: &Path) -> Result<()> {
        if let Some(rel) = &self.mask_path {
            self.mask = Some(Mask::load_png(&root.join(rel))?);
        }
        Ok(())
    }
}

/// Output of the difficulty stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyRecord {
    pub triplet_id: String,
    pub scorer_version: ScorerVersion,
    pub s_struct: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_perc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_loc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_compact: Option<f64>,
    pub s_instr: f64,
    pub score: f64,
    pub bin: Bin,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

/// Output of the category stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRecord {
    pub triplet_id: String,
    pub category: Category,
    pub source: CategorySource,
    pub confidence: f64,
    pub raw_label_or_match: String,
    #[serde(default)]
    pub ruleset_version: String,
}

/// Structured one-line chain header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainHeader {
    pub category: Category,
    pub scope: Scope,
    pub difficulty: Bin,
    pub source: CategorySource,
}

impl fmt::Display for ChainHeader {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[category={}, scope={}, difficulty={}, source={}]",
            self.category, self.scope, self.difficulty, self.source
        )
    }
}

/// Output of the chain stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningChain {
    pub triplet_id: String,
    pub header: ChainHeader,
    pub descriptor: SpatialDescriptor,
    pub steps: Vec<String>,
    pub template_version: String,
    pub word_count: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl ReasoningChain {
    /// Header line followed by the six steps, newline separated.
    pub fn text(&self) -> String {
        let mut out = self.header.to_string();
        for step in &self.steps {
            out.push('\n');
            out.push_str(step);
        }
        out
    }
}

/// A record type that belongs to one pipeline stage.
pub trait StageRecord: Serialize + DeserializeOwned + Clone + PartialEq {
    const STAGE: Stage;

    fn triplet_id(&self) -> &str;
}

string_enum!(
    /// Pipeline stages, named after their output directories.
    Stage {
        Triplets => "triplets",
        Masks => "masks",
        Difficulty => "difficulty",
        Categories => "categories",
        Chains => "chains",
    }
);

impl Stage {
    pub fn schema_tag(self) -> String {
        format!("{}/v1", self.as_str())
    }
}

macro_rules! impl_stage_record {
    ($ty:ty, $stage:expr) => {
        impl StageRecord for $ty {
            const STAGE: Stage = $stage;

            fn triplet_id(&self) -> &str {
                &self.triplet_id
            }
        }
    };
}

impl_stage_record!(EditTriplet, Stage::Triplets);
impl_stage_record!(MaskArtifact, Stage::Masks);
impl_stage_record!(DifficultyRecord, Stage::Difficulty);
impl_stage_record!(CategoryRecord, Stage::Categories);
impl_stage_record!(ReasoningChain, Stage::Chains);

#[derive(Serialize)]
struct TaggedRef<'a, R> {
    schema: &'a str,
    #[serde(flatten)]
    record: &'a R,
}

#[derive(Deserialize)]
struct Tagged<R> {
    schema: String,
    #[serde(flatten)]
    record: R,
}

/// Directory layout of one pipeline output root.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn stage_file(&self, stage: Stage, dataset: &str) -> PathBuf {
        self.root
            .join(stage.as_str())
            .join(format!("{dataset}.jsonl"))
    }

    pub fn manifest_file(&self, stage: Stage, dataset: &str) -> PathBuf {
        self.root
            .join(stage.as_str())
            .join(format!("{dataset}.manifest.json"))
    }

    /// Relative path (from the root) of a triplet's mask PNG.
    pub fn mask_rel_path(triplet_id: &str) -> String {
        format!("masks_png/{triplet_id}.png")
    }
}

fn check_unique<'a>(ids: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut seen = BTreeSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::DuplicateId {
                id: id.to_string(),
                context: String::new(),
            });
        }
    }
    Ok(())
}

/// Serializes one record as a tagged JSON line (without newline).
pub fn to_line<R: StageRecord>(record: &R) -> Result<String> {
    let tag = R::STAGE.schema_tag();
    serde_json::to_string(&TaggedRef {
        schema: &tag,
        record,
    })
    .map_err(|e| Error::Invalid(format!("serializing {}: {e}", record.triplet_id())))
}

/// Writes records sorted by `triplet_id`. Returns the number written.
pub fn write_records<R: StageRecord>(records: &[R], path: &Path) -> Result<usize> {
    check_unique(records.iter().map(|r| r.triplet_id()))?;
    let mut sorted: Vec<&R> = records.iter().collect();
    sorted.sort_by(|a, b| a.triplet_id().cmp(b.triplet_id()));

    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("jsonl.tmp");
    {
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut out = BufWriter::new(file);
        for record in &sorted {
            let line = to_line(*record)?;
            writeln!(out, "{line}").map_err(|e| Error::io(&tmp, e))?;
        }
        out.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(sorted.len())
}

/// Reads every record of one stage file, checking the schema tag.
pub fn read_records<R: StageRecord>(path: &Path) -> Result<Vec<R>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let expected = R::STAGE.schema_tag();
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let tagged: Tagged<R> = serde_json::from_str(&line).map_err(|e| Error::Record {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        if tagged.schema != expected {
            return Err(Error::Record {
                path: path.to_path_buf(),
                line: idx + 1,
                message: format!("schema {:?}, expected {expected:?}", tagged.schema),
            });
        }
        out.push(tagged.record);
    }
    Ok(out)
}

/// All records of one triplet across the stage files given to [`join_by_id`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct JoinedRecord {
    pub triplet_id: String,
    pub triplet: Option<EditTriplet>,
    pub mask: Option<MaskArtifact>,
    pub difficulty: Option<DifficultyRecord>,
    pub category: Option<CategoryRecord>,
    pub chain: Option<ReasoningChain>,
}

/// A triplet ID that was present in some inputs but not in all of them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MissingId {
    pub triplet_id: String,
    pub missing_from: Vec<Stage>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct JoinOutcome {
    pub views: Vec<JoinedRecord>,
    pub missing: Vec<MissingId>,
}

enum AnyRecords {
    Triplets(Vec<EditTriplet>),
    Masks(Vec<MaskArtifact>),
    Difficulty(Vec<DifficultyRecord>),
    Categories(Vec<CategoryRecord>),
    Chains(Vec<ReasoningChain>),
}

fn detect_stage(path: &Path) -> Result<Stage> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        #[derive(Deserialize)]
        struct Probe {
            schema: String,
        }
        let probe: Probe = serde_json::from_str(&line).map_err(|e| Error::Record {
            path: path.to_path_buf(),
            line: 1,
            message: e.to_string(),
        })?;
        let stage = probe.schema.strip_suffix("/v1").unwrap_or(&probe.schema);
        return stage.parse();
    }
    // Empty file: fall back to the directory it lives in.
    path.parent()
        .and_then(|p| p.file_name())
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Invalid(format!("cannot determine stage of {}", path.display())))?
        .parse()
}

fn dedupe<R: StageRecord>(path: &Path, records: Vec<R>) -> Result<BTreeMap<String, R>> {
    let mut map: BTreeMap<String, R> = BTreeMap::new();
    for record in records {
        let id = record.triplet_id().to_string();
        match map.get(&id) {
            Some(existing) if existing != &record => {
                return Err(Error::DuplicateId {
                    id,
                    context: format!(" with conflicting rows in {}", path.display()),
                });
            }
            Some(_) => {}
            None => {
                map.insert(id, record);
            }
        }
    }
    Ok(map)
}

/// Inner-joins stage files on `triplet_id`.
///
/// IDs absent from any input are returned in [`JoinOutcome::missing`], never
/// silently dropped. Output is sorted by ID regardless of input order.
pub fn join_by_id(stage_files: &[PathBuf]) -> Result<JoinOutcome> {
    let mut per_stage: Vec<(Stage, BTreeSet<String>)> = Vec::new();
    let mut views: BTreeMap<String, JoinedRecord> = BTreeMap::new();

    for path in stage_files {
        let stage = detect_stage(path)?;
        let records = match stage {
            Stage::Triplets => AnyRecords::Triplets(read_records(path)?),
            Stage::Masks => AnyRecords::Masks(read_records(path)?),
            Stage::Difficulty => AnyRecords::Difficulty(read_records(path)?),
            Stage::Categories => AnyRecords::Categories(read_records(path)?),
            Stage::Chains => AnyRecords::Chains(read_records(path)?),
        };
        let mut ids = BTreeSet::new();
        macro_rules! absorb {
            ($records:expr, $field:ident) => {
                for (id, record) in dedupe(path, $records)? {
                    ids.insert(id.clone());
                    let view = views.entry(id.clone()).or_insert_with(|| JoinedRecord {
                        triplet_id: id,
                        ..Default::default()
                    });
                    view.$field = Some(record);
                }
            };
        }
        match records {
            AnyRecords::Triplets(r) => absorb!(r, triplet),
            AnyRecords::Masks(r) => absorb!(r, mask),
            AnyRecords::Difficulty(r) => absorb!(r, difficulty),
            AnyRecords::Categories(r) => absorb!(r, category),
            AnyRecords::Chains(r) => absorb!(r, chain),
        }
        per_stage.push((stage, ids));
    }

    let mut outcome = JoinOutcome::default();
    for (id, view) in views {
        let missing_from: Vec<Stage> = per_stage
            .iter()
            .filter(|(_, ids)| !ids.contains(&id))
            .map(|(stage, _)| *stage)
            .collect();
        if missing_from.is_empty() {
            outcome.views.push(view);
        } else {
            outcome.missing.push(MissingId {
                triplet_id: id,
                missing_from,
            });
        }
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triplet(id: &str) -> EditTriplet {
        EditTriplet {
            triplet_id: id.into(),
            real_path: format!("{id}_real.png"),
            edited_path: format!("{id}_edited.png"),
            instruction: "add a polar bear".into(),
            provided_mask_path: None,
            source_dataset: SourceDataset::Synthetic,
            metadata: BTreeMap::from([("split".into(), "dev".into())]),
        }
    }

    fn category(id: &str) -> CategoryRecord {
        CategoryRecord {
            triplet_id: id.into(),
            category: Category::ObjectAddition,
            source: CategorySource::RuleBased,
            confidence: 0.8,
            raw_label_or_match: "add_object".into(),
            ruleset_version: "1".into(),
        }
    }

    #[test]
    fn write_sorts_by_id() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("triplets/x.jsonl");
        let n = write_records(&[triplet("b"), triplet("a"), triplet("c")], &path).unwrap();
        assert_eq!(n, 3);
        let ids: Vec<String> = read_records::<EditTriplet>(&path)
            .unwrap()
            .into_iter()
            .map(|t| t.triplet_id)
            .collect();
        assert_eq!(ids, ["a", "b", "c"]);
        let first = std::fs::read_to_string(&path).unwrap();
        assert!(first.starts_with(r#"{"schema":"triplets/v1","triplet_id":"a","#));
    }

    #[test]
    fn empty_write_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("categories/x.jsonl");
        assert_eq!(write_records::<CategoryRecord>(&[], &path).unwrap(), 0);
        assert!(read_records::<CategoryRecord>(&path).unwrap().is_empty());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let err =
            write_records(&[triplet("x"), triplet("x")], &dir.path().join("t.jsonl")).unwrap_err();
        assert!(matches!(err, Error::DuplicateId { ref id, .. } if id == "x"));
    }

    #[test]
    fn wrong_schema_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        write_records(&[triplet("a")], &path).unwrap();
        assert!(read_records::<CategoryRecord>(&path).is_err());
    }

    #[test]
    fn join_reports_missing_ids() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("triplets/d.jsonl");
        let c = dir.path().join("categories/d.jsonl");
        write_records(&[triplet("a"), triplet("b")], &t).unwrap();
        write_records(&[category("a")], &c).unwrap();
        let out = join_by_id(&[t.clone(), c.clone()]).unwrap();
        assert_eq!(out.views.len(), 1);
        assert_eq!(out.views[0].triplet_id, "a");
        assert!(out.views[0].triplet.is_some() && out.views[0].category.is_some());
        assert_eq!(
            out.missing,
            vec![MissingId {
                triplet_id: "b".into(),
                missing_from: vec![Stage::Categories],
            }]
        );
        // Input order does not change the result.
        assert_eq!(join_by_id(&[c, t]).unwrap().views, out.views);
    }

    #[test]
    fn join_rejects_conflicting_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("categories/d.jsonl");
        let mut other = category("a");
        other.confidence = 0.5;
        let body = format!(
            "{}\n{}\n",
            to_line(&category("a")).unwrap(),
            to_line(&other).unwrap()
        );
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, body).unwrap();
        assert!(matches!(
            join_by_id(&[path]).unwrap_err(),
            Error::DuplicateId { .. }
        ));
    }

    #[test]
    fn header_renders_bracketed() {
        let h = ChainHeader {
            category: Category::ObjectRemoval,
            scope: Scope::Local,
            difficulty: Bin::Medium,
            source: CategorySource::RuleBased,
        };
        assert_eq!(
            h.to_string(),
            "[category=object_removal, scope=local, difficulty=medium, source=rule_based]"
        );
    }

    #[test]
    fn enum_strings_parse_back() {
        for c in Category::ALL {
            assert_eq!(c.as_str().parse::<Category>().unwrap(), *c);
        }
        assert!("flying_car".parse::<Category>().is_err());
    }
}
