//! Deterministic six-step reasoning chains.
//!
//! Steps 1-4 and 6 restate upstream values (instruction, mask geometry,
//! structural score, category, difficulty); step 5 is the category-level
//! prior from the template set. [`audit_chain`] re-extracts every value from
//! rendered text and compares it against the upstream records.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::Deserialize;

use crate::difficulty::compactness;
use crate::error::{Error, Result};
use crate::records::{
    Bin, Category, CategoryRecord, CategorySource, ChainHeader, DifficultyRecord, EditTriplet,
    MaskArtifact, ReasoningChain, Scope, SpatialDescriptor,
};

pub const TEMPLATE_VERSION: &str = "v1.0";
pub const PRIOR_LEAD: &str = "Edits of this type typically exhibit ";
pub const WORD_RANGE: (usize, usize) = (60, 170);

pub const FLAG_AMBIGUOUS: &str = "ambiguous_scope_rendered_centered";
pub const FLAG_ALIGNMENT_FAILED: &str = "alignment_failed";
pub const FLAG_WORD_COUNT: &str = "word_count_out_of_range";

const BUILTIN_TEMPLATES: &str = include_str!("../data/prior_templates.toml");

const ALIGNMENT_STEP2: &str =
    "2. The mask of changed pixels could not be computed because the image pair failed alignment.";
const ALIGNMENT_STEP3: &str = "3. Structural change relative to the original could not be measured because the image pair failed alignment.";
const ALIGNMENT_CAVEAT: &str = "; this bin is a default because the image pair failed alignment";

#[derive(Debug, Clone, Deserialize)]
struct TemplateEntry {
    prior: String,
    chain_clause: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
struct TemplateFile {
    version: String,
    templates: BTreeMap<Category, TemplateEntry>,
}

/// The twelve category priors.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorTemplateSet {
    pub version: String,
    priors: BTreeMap<Category, String>,
    clauses: BTreeMap<Category, String>,
}

fn lowercase_first(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_lowercase().chain(chars).collect(),
        None => String::new(),
    }
}

impl PriorTemplateSet {
    pub fn builtin() -> Self {
        Self::from_toml_str(BUILTIN_TEMPLATES).expect("builtin templates are valid")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: TemplateFile =
            toml::from_str(text).map_err(|e| Error::Config(format!("templates: {e}")))?;
        let missing: Vec<&Category> = Category::ALL
            .iter()
            .filter(|c| !file.templates.contains_key(c))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Config(format!("templates missing for {missing:?}")));
        }
        let mut priors = BTreeMap::new();
        let mut clauses = BTreeMap::new();
        for (category, entry) in file.templates {
            let clause = entry
                .chain_clause
                .clone()
                .unwrap_or_else(|| lowercase_first(&entry.prior));
            priors.insert(category, entry.prior);
            clauses.insert(category, clause);
        }
        Ok(Self {
            version: file.version,
            priors,
            clauses,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Reference wording of a prior.
    pub fn prior(&self, category: Category) -> &str {
        &self.priors[&category]
    }

    /// Text rendered after [`PRIOR_LEAD`] in step 5.
    pub fn clause(&self, category: Category) -> &str {
        &self.clauses[&category]
    }

    pub fn step5(&self, category: Category) -> String {
        format!("5. {PRIOR_LEAD}{}", self.clause(category))
    }
}

pub fn location_phrase(d: SpatialDescriptor) -> &'static str {
    match d {
        SpatialDescriptor::WholeImage => "spans the entire image",
        SpatialDescriptor::Centered => "is centered in the image",
        SpatialDescriptor::UpperLeft => "is concentrated in the upper-left region",
        SpatialDescriptor::UpperRight => "is concentrated in the upper-right region",
        SpatialDescriptor::LowerLeft => "is concentrated in the lower-left region",
        SpatialDescriptor::LowerRight => "is concentrated in the lower-right region",
        SpatialDescriptor::Scattered => "is spread across multiple separate regions",
        SpatialDescriptor::AlignmentFailed => "could not be computed",
    }
}

pub fn magnitude_word(s_struct: f64) -> &'static str {
    if s_struct < 0.25 {
        "minor"
    } else if s_struct <= 0.55 {
        "moderate"
    } else {
        "substantial"
    }
}

pub fn concentration_phrase(compactness: f64) -> &'static str {
    if compactness >= 0.7 {
        "well-concentrated in a single coherent region"
    } else if compactness >= 0.4 {
        "moderately concentrated"
    } else {
        "diffuse or split across multiple sub-regions"
    }
}

pub fn source_phrase(source: CategorySource, confidence: f64) -> String {
    match source {
        CategorySource::DatasetLabel => "based on the dataset's curated edit-type label.".into(),
        CategorySource::RuleBased => format!(
            "inferred from the instruction text via a rule-based keyword match (confidence {confidence:.2})."
        ),
        CategorySource::Fallback => "could not be determined confidently from the available signals; treated as an unspecified edit type.".into(),
    }
}

pub fn bin_phrase(bin: Bin) -> &'static str {
    match bin {
        Bin::Easy => {
            "easier than average to detect, given clear local geometry and a low-complexity instruction"
        }
        Bin::Medium => "of moderate detection difficulty",
        Bin::Hard => {
            "harder than average to detect, given diffuse geometry or a high-complexity instruction"
        }
    }
}

/// Coarse location of the edit. The boolean is true when the descriptor
/// was substituted for an ambiguous scope.
pub fn spatial_descriptor(artifact: &MaskArtifact) -> Result<(SpatialDescriptor, bool)> {
    match artifact.scope {
        Scope::Global => return Ok((SpatialDescriptor::WholeImage, false)),
        Scope::AlignmentFailed => return Ok((SpatialDescriptor::AlignmentFailed, false)),
        Scope::Ambiguous => return Ok((SpatialDescriptor::Centered, true)),
        Scope::Local => {}
    }
    let mask = artifact.mask.as_ref().ok_or_else(|| {
        Error::Invalid(format!("{}: mask pixels not loaded", artifact.triplet_id))
    })?;
    let Some((cx, cy)) = mask.centroid() else {
        return Ok((SpatialDescriptor::Centered, true));
    };
    if (mask.largest_component() as f64) < 0.5 * mask.count() as f64 {
        return Ok((SpatialDescriptor::Scattered, false));
    }
    let (w, h) = (mask.width() as f64, mask.height() as f64);
    let (nx, ny) = ((cx + 0.5) / w, (cy + 0.5) / h);
    let middle = |v: f64| (1.0 / 3.0..=2.0 / 3.0).contains(&v);
    if middle(nx) && middle(ny) {
        return Ok((SpatialDescriptor::Centered, false));
    }
    Ok((
        match (nx < 0.5, ny < 0.5) {
            (true, true) => SpatialDescriptor::UpperLeft,
            (false, true) => SpatialDescriptor::UpperRight,
            (true, false) => SpatialDescriptor::LowerLeft,
            (false, false) => SpatialDescriptor::LowerRight,
        },
        false,
    ))
}

/// Integer percent shown in step 2.
pub fn display_area_pct(descriptor: SpatialDescriptor, area: f64) -> u32 {
    if descriptor == SpatialDescriptor::WholeImage {
        return 100;
    }
    let pct = (100.0 * area).round() as u32;
    if pct == 0 && area > 0.0 {
        1
    } else {
        pct
    }
}

/// Compactness used for the step 3 wording: taken from the difficulty
/// record when it carries one, otherwise measured on the mask.
fn chain_compactness(mask: &MaskArtifact, diff: &DifficultyRecord) -> Result<f64> {
    if let Some(s) = diff.s_compact {
        return Ok(1.0 - s);
    }
    let m = mask
        .mask
        .as_ref()
        .ok_or_else(|| Error::Invalid(format!("{}: mask pixels not loaded", mask.triplet_id)))?;
    Ok(compactness(m))
}

pub fn word_count(steps: &[String]) -> usize {
    steps.iter().map(|s| s.split_whitespace().count()).sum()
}

fn check_ids(triplet: &EditTriplet, others: [(&str, &str); 3]) -> Result<()> {
    for (stage, id) in others {
        if id != triplet.triplet_id {
            return Err(Error::Invalid(format!(
                "{stage} record {id:?} does not belong to triplet {:?}",
                triplet.triplet_id
            )));
        }
    }
    Ok(())
}

pub fn compose_chain(
    triplet: &EditTriplet,
    mask: &MaskArtifact,
    diff: &DifficultyRecord,
    cat: &CategoryRecord,
    templates: &PriorTemplateSet,
) -> Result<ReasoningChain> {
    check_ids(
        triplet,
        [
            ("masks", &mask.triplet_id),
            ("difficulty", &diff.triplet_id),
            ("categories", &cat.triplet_id),
        ],
    )?;
    let (descriptor, ambiguous) = spatial_descriptor(mask)?;
    let failed = descriptor == SpatialDescriptor::AlignmentFailed;
    let mut flags = Vec::new();
    if ambiguous {
        flags.push(FLAG_AMBIGUOUS.to_string());
    }
    if failed {
        flags.push(FLAG_ALIGNMENT_FAILED.to_string());
    }

    let step1 = format!(
        "1. The edit instruction states: \"{}\".",
        triplet.instruction
    );
    let (step2, step3) = if failed {
        (ALIGNMENT_STEP2.to_string(), ALIGNMENT_STEP3.to_string())
    } else {
        let pct = display_area_pct(descriptor, mask.mask_area_frac);
        let step2 = format!(
            "2. The mask of changed pixels covers roughly {pct}% of the image and {}.",
            location_phrase(descriptor)
        );
        let step3 = format!(
            "3. Structural change relative to the original is {} (SSIM-based score = {:.2}), and the edit region is {}.",
            magnitude_word(diff.s_struct),
            diff.s_struct,
            concentration_phrase(chain_compactness(mask, diff)?)
        );
        (step2, step3)
    };
    let step4 = format!(
        "4. The edit is classified as {}, {}",
        cat.category,
        source_phrase(cat.source, cat.confidence)
    );
    let step5 = templates.step5(cat.category);
    let caveat = if failed { ALIGNMENT_CAVEAT } else { "" };
    let step6 = format!(
        "6. Overall, this triplet is {} (difficulty score = {:.2}, instruction complexity = {:.2}){caveat}.",
        bin_phrase(diff.bin),
        diff.score,
        diff.s_instr
    );

    let steps = vec![step1, step2, step3, step4, step5, step6];
    let words = word_count(&steps);
    if words < WORD_RANGE.0 || words > WORD_RANGE.1 {
        log::warn!("{}: chain has {words} words", triplet.triplet_id);
        flags.push(FLAG_WORD_COUNT.to_string());
    }
    Ok(ReasoningChain {
        triplet_id: triplet.triplet_id.clone(),
        header: ChainHeader {
            category: cat.category,
            scope: mask.scope,
            difficulty: diff.bin,
            source: cat.source,
        },
        descriptor,
        steps,
        template_version: templates.version.clone(),
        word_count: words,
        flags,
    })
}

/// Fixture-formatted text blocks, one per chain, separated by blank lines.
pub fn export_text(chains: &[ReasoningChain]) -> String {
    chains
        .iter()
        .map(|c| c.text())
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// One mismatch between rendered chain text and upstream records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub step: usize,
    pub field: String,
    pub expected: String,
    pub found: String,
}

struct Patterns {
    step2: Regex,
    step3: Regex,
    step4: Regex,
    confidence: Regex,
    step6: Regex,
}

fn patterns() -> &'static Patterns {
    static P: OnceLock<Patterns> = OnceLock::new();
    P.get_or_init(|| Patterns {
        step2: Regex::new(r"^2\. The mask of changed pixels covers roughly (\d+)% of the image and (.+)\.$")
            .unwrap(),
        step3: Regex::new(
            r"^3\. Structural change relative to the original is (\w+) \(SSIM-based score = ([0-9.]+)\), and the edit region is (.+)\.$",
        )
        .unwrap(),
        step4: Regex::new(r"^4\. The edit is classified as (\w+), (.+)$").unwrap(),
        confidence: Regex::new(r"\(confidence ([0-9.]+)\)").unwrap(),
        step6: Regex::new(
            r"^6\. Overall, this triplet is (.+) \(difficulty score = ([0-9.]+), instruction complexity = ([0-9.]+)\)(.*)\.$",
        )
        .unwrap(),
    })
}

/// Compares every value stated in `chain` with the upstream records.
/// An empty result means the chain is faithful.
pub fn audit_chain(
    chain: &ReasoningChain,
    triplet: &EditTriplet,
    mask: &MaskArtifact,
    diff: &DifficultyRecord,
    cat: &CategoryRecord,
    templates: &PriorTemplateSet,
) -> Result<Vec<Violation>> {
    let expected = compose_chain(triplet, mask, diff, cat, templates)?;
    let mut out = Vec::new();
    let mut check = |step: usize, field: &str, want: &str, got: Option<&str>| {
        let got = got.unwrap_or("<unparseable>");
        if want != got {
            out.push(Violation {
                step,
                field: field.to_string(),
                expected: want.to_string(),
                found: got.to_string(),
            });
        }
    };

    let h = &chain.header;
    let eh = &expected.header;
    check(
        0,
        "category",
        eh.category.as_str(),
        Some(h.category.as_str()),
    );
    check(0, "scope", eh.scope.as_str(), Some(h.scope.as_str()));
    check(
        0,
        "bin",
        eh.difficulty.as_str(),
        Some(h.difficulty.as_str()),
    );
    check(0, "source", eh.source.as_str(), Some(h.source.as_str()));
    if chain.steps.len() != 6 {
        check(0, "step_count", "6", Some(&chain.steps.len().to_string()));
        return Ok(out);
    }
    let p = patterns();
    let step = |i: usize| chain.steps[i].as_str();
    let want = |i: usize| expected.steps[i].as_str();

    check(1, "instruction", want(0), Some(step(0)));

    match (p.step2.captures(want(1)), p.step2.captures(step(1))) {
        (Some(e), found) => {
            check(
                2,
                "mask_area_frac",
                &e[1],
                found.as_ref().map(|c| c.get(1).unwrap().as_str()),
            );
            check(
                2,
                "descriptor",
                &e[2],
                found.as_ref().map(|c| c.get(2).unwrap().as_str()),
            );
        }
        (None, _) => check(2, "alignment", want(1), Some(step(1))),
    }
    match (p.step3.captures(want(2)), p.step3.captures(step(2))) {
        (Some(e), found) => {
            let g = |i: usize| found.as_ref().map(|c| c.get(i).unwrap().as_str());
            check(3, "magnitude", &e[1], g(1));
            check(3, "s_struct", &e[2], g(2));
            check(3, "compactness", &e[3], g(3));
        }
        (None, _) => check(3, "alignment", want(2), Some(step(2))),
    }
    {
        let e = p.step4.captures(want(3)).expect("composed step 4 parses");
        let found = p.step4.captures(step(3));
        let g = |i: usize| found.as_ref().map(|c| c.get(i).unwrap().as_str());
        check(4, "category", &e[1], g(1));
        let conf = |s: &str| {
            p.confidence
                .captures(s)
                .map(|c| c.get(1).unwrap().as_str().to_string())
        };
        match conf(&e[2]) {
            Some(want_conf) => {
                let got = g(2).and_then(conf);
                check(4, "confidence", &want_conf, got.as_deref());
            }
            None => check(4, "source", &e[2], g(2)),
        }
    }
    check(5, "prior", want(4), Some(step(4)));
    {
        let e = p.step6.captures(want(5)).expect("composed step 6 parses");
        let found = p.step6.captures(step(5));
        let g = |i: usize| found.as_ref().map(|c| c.get(i).unwrap().as_str());
        check(6, "bin", &e[1], g(1));
        check(6, "score", &e[2], g(2));
        check(6, "s_instr", &e[3], g(3));
        check(6, "caveat", &e[4], g(4));
    }
    Ok(out)
}
