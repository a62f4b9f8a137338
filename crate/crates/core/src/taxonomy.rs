//! Edit-category classification onto the 12-label taxonomy.
//!
//! Rows carrying a curated source label go through an exact-string lookup;
//! everything else is matched against an ordered rule list over the
//! instruction text. Unmatched rows land in `other` with the instruction
//! kept verbatim.

use std::collections::BTreeMap;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::records::{Category, CategoryRecord, CategorySource, EditTriplet};

pub const SOURCE_LABEL_KEY: &str = "source_edit_type";
pub const FALLBACK_CONFIDENCE: f64 = 0.5;
pub const EXPECTED_LABELS: usize = 35;

const BUILTIN_LABEL_MAP: &str = include_str!("../data/label_map.toml");
const BUILTIN_RULES: &str = include_str!("../data/category_rules.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMap {
    pub version: String,
    pub labels: BTreeMap<String, Category>,
}

impl LabelMap {
    pub fn builtin() -> Self {
        Self::from_toml_str(BUILTIN_LABEL_MAP).expect("builtin label map is valid")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let map: Self =
            toml::from_str(text).map_err(|e| Error::Config(format!("label map: {e}")))?;
        if map.labels.values().any(|c| *c == Category::Other) {
            return Err(Error::Config("label map must not target `other`".into()));
        }
        Ok(map)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn lookup(&self, label: &str) -> Option<Category> {
        self.labels.get(label.trim()).copied()
    }

    /// Fails if any of `labels` has no mapping.
    pub fn ensure_covers<'a>(&self, labels: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let missing: Vec<&str> = labels
            .into_iter()
            .filter(|l| self.lookup(l).is_none())
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "label map lacks entries for {missing:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    ExplicitVerb,
    ConversationalFrame,
    DomainKeyword,
    Geometric,
    WeakCue,
}

#[derive(Debug, Clone, Deserialize)]
struct RuleSpec {
    name: String,
    tier: Tier,
    category: Category,
    confidence: f64,
    patterns: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
struct RuleFile {
    version: String,
    #[serde(rename = "rule")]
    rules: Vec<RuleSpec>,
}

#[derive(Debug, Clone)]
pub struct Rule {
    pub name: String,
    pub tier: Tier,
    pub category: Category,
    pub confidence: f64,
    matcher: Regex,
}

impl Rule {
    pub fn is_match(&self, lowered: &str) -> bool {
        self.matcher.is_match(lowered)
    }
}

#[derive(Debug, Clone)]
pub struct CategoryRuleSet {
    pub version: String,
    pub rules: Vec<Rule>,
}

impl CategoryRuleSet {
    pub fn builtin() -> Self {
        Self::from_toml_str(BUILTIN_RULES).expect("builtin rule set is valid")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: RuleFile =
            toml::from_str(text).map_err(|e| Error::Config(format!("rule file: {e}")))?;
        let mut rules = Vec::with_capacity(file.rules.len());
        for spec in file.rules {
            if spec.category == Category::Other {
                return Err(Error::Config(format!("rule {} targets `other`", spec.name)));
            }
            if !(spec.confidence > 0.0 && spec.confidence <= 1.0) {
                return Err(Error::Config(format!(
                    "rule {} confidence {} outside (0, 1]",
                    spec.name, spec.confidence
                )));
            }
            if spec.patterns.is_empty() {
                return Err(Error::Config(format!("rule {} has no patterns", spec.name)));
            }
            let body = spec
                .patterns
                .iter()
                .map(|p| p.replace(' ', r"\s+"))
                .collect::<Vec<_>>()
                .join("|");
            let matcher = Regex::new(&format!(r"\b(?:{body})\b"))
                .map_err(|e| Error::Config(format!("rule {}: {e}", spec.name)))?;
            rules.push(Rule {
                name: spec.name,
                tier: spec.tier,
                category: spec.category,
                confidence: spec.confidence,
                matcher,
            });
        }
        Ok(Self {
            version: file.version,
            rules,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// First rule matching the lowercased instruction.
    pub fn first_match(&self, instruction: &str) -> Option<&Rule> {
        let lowered = instruction.to_lowercase();
        self.rules.iter().find(|r| r.is_match(&lowered))
    }
}

/// Label map plus rule set, with a combined version string.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub labels: LabelMap,
    pub rules: CategoryRuleSet,
}

impl Classifier {
    pub fn builtin() -> Self {
        Self {
            labels: LabelMap::builtin(),
            rules: CategoryRuleSet::builtin(),
        }
    }

    pub fn version(&self) -> String {
        format!("{}+{}", self.labels.version, self.rules.version)
    }

    pub fn classify(&self, triplet: &EditTriplet) -> CategoryRecord {
        classify(triplet, &self.labels, &self.rules)
    }
}

pub fn classify(triplet: &EditTriplet, map: &LabelMap, rules: &CategoryRuleSet) -> CategoryRecord {
    let version = format!("{}+{}", map.version, rules.version);
    let record = |category, source, confidence, raw: &str| CategoryRecord {
        triplet_id: triplet.triplet_id.clone(),
        category,
        source,
        confidence,
        raw_label_or_match: raw.to_string(),
        ruleset_version: version.clone(),
    };

    if let Some(label) = triplet.metadata.get(SOURCE_LABEL_KEY) {
        match map.lookup(label) {
            Some(category) => {
                return record(category, CategorySource::DatasetLabel, 1.0, label.trim())
            }
            None => log::warn!(
                "{}: source label {label:?} is not in the label map",
                triplet.triplet_id
            ),
        }
    }
    match rules.first_match(&triplet.instruction) {
        Some(rule) => record(
            rule.category,
            CategorySource::RuleBased,
            rule.confidence,
            &rule.name,
        ),
        None => record(
            Category::Other,
            CategorySource::Fallback,
            FALLBACK_CONFIDENCE,
            &triplet.instruction,
        ),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageReport {
    pub total: usize,
    /// Every category is listed, zero counts included.
    pub by_category: BTreeMap<Category, usize>,
    pub by_source: BTreeMap<CategorySource, usize>,
    pub other_rate_pct: f64,
}

pub fn coverage_report(records: &[CategoryRecord]) -> Result<CoverageReport> {
    if records.is_empty() {
        return Err(Error::Invalid("coverage report over zero records".into()));
    }
    let mut by_category: BTreeMap<Category, usize> =
        Category::ALL.iter().map(|c| (*c, 0)).collect();
    let mut by_source: BTreeMap<CategorySource, usize> =
        CategorySource::ALL.iter().map(|s| (*s, 0)).collect();
    for r in records {
        *by_category.entry(r.category).or_default() += 1;
        *by_source.entry(r.source).or_default() += 1;
    }
    let other = by_category[&Category::Other];
    Ok(CoverageReport {
        total: records.len(),
        by_category,
        by_source,
        other_rate_pct: 100.0 * other as f64 / records.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::records::SourceDataset;

    fn triplet(instruction: &str) -> EditTriplet {
        EditTriplet {
            triplet_id: "t".into(),
            real_path: "r.png".into(),
            edited_path: "e.png".into(),
            instruction: instruction.into(),
            provided_mask_path: None,
            source_dataset: SourceDataset::MagicBrush,
            metadata: BTreeMap::new(),
        }
    }

    #[test]
    fn builtin_label_map_has_all_labels() {
        let map = LabelMap::builtin();
        assert_eq!(map.labels.len(), EXPECTED_LABELS);
        assert_eq!(
            map.lookup("  Remove an existing object "),
            Some(Category::ObjectRemoval)
        );
        assert!(map
            .ensure_covers(["Remove an existing object", "Fly"])
            .is_err());
    }

    #[test]
    fn label_path_wins_over_rules() {
        let mut t = triplet("remove the dog");
        t.metadata.insert(
            SOURCE_LABEL_KEY.into(),
            "Convert to cartoon or anime style".into(),
        );
        let r = Classifier::builtin().classify(&t);
        assert_eq!(r.category, Category::StyleTransfer);
        assert_eq!(r.source, CategorySource::DatasetLabel);
        assert_eq!(r.confidence, 1.0);
    }

    #[test]
    fn unmapped_label_falls_through_to_rules() {
        let mut t = triplet("remove the dog");
        t.metadata
            .insert(SOURCE_LABEL_KEY.into(), "Teleport".into());
        let r = Classifier::builtin().classify(&t);
        assert_eq!(r.category, Category::ObjectRemoval);
        assert_eq!(r.source, CategorySource::RuleBased);
    }

    #[test]
    fn word_boundaries_respected() {
        let c = Classifier::builtin();
        // "scarf" must not hit anything car-like, "address" must not hit "add".
        let r = c.classify(&triplet("the scarf should be at the address"));
        assert_eq!(r.category, Category::Other);
    }

    #[test]
    fn fallback_keeps_instruction() {
        let r = Classifier::builtin()
            .classify(&triplet("have there be a basket of fruit on the counter."));
        assert_eq!(r.category, Category::Other);
        assert_eq!(r.source, CategorySource::Fallback);
        assert_eq!(
            r.raw_label_or_match,
            "have there be a basket of fruit on the counter."
        );
    }

    #[test]
    fn rule_validation() {
        let bad = r#"
version = "x"
[[rule]]
name = "r"
tier = "geometric"
category = "other"
confidence = 0.5
patterns = ["a"]
"#;
        assert!(CategoryRuleSet::from_toml_str(bad).is_err());
    }

    #[test]
    fn coverage_lists_zero_categories() {
        let r = Classifier::builtin().classify(&triplet("add a hat"));
        let cov = coverage_report(&[r]).unwrap();
        assert_eq!(cov.by_category.len(), 12);
        assert_eq!(cov.by_category[&Category::Geometric], 0);
        assert_eq!(cov.other_rate_pct, 0.0);
        assert!(coverage_report(&[]).is_err());
    }
}
