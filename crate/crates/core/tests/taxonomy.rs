mod common;

use std::collections::BTreeMap;

use editforge::records::{Category, CategorySource, EditTriplet, SourceDataset};
use editforge::taxonomy::*;
use proptest::prelude::*;
use regex::Regex;

fn triplet(instruction: &str, label: Option<&str>) -> EditTriplet {
    let mut metadata = BTreeMap::new();
    if let Some(l) = label {
        metadata.insert(SOURCE_LABEL_KEY.to_string(), l.to_string());
    }
    EditTriplet {
        triplet_id: "t".into(),
        real_path: "r.png".into(),
        edited_path: "e.png".into(),
        instruction: instruction.into(),
        provided_mask_path: None,
        source_dataset: SourceDataset::MagicBrush,
        metadata,
    }
}

#[test]
fn spec_examples() {
    let c = Classifier::builtin();
    let r = c.classify(&triplet("add a polar bear", None));
    assert_eq!(
        (r.category, r.source, r.confidence),
        (Category::ObjectAddition, CategorySource::RuleBased, 0.80)
    );
    assert_eq!(r.raw_label_or_match, "add_object");
    let r = c.classify(&triplet("get rid of the framed pictures", None));
    assert_eq!(
        (r.category, r.source, r.confidence),
        (Category::ObjectRemoval, CategorySource::RuleBased, 0.85)
    );
    let r = c.classify(&triplet(
        "have there be a basket of fruit on the counter.",
        None,
    ));
    assert_eq!(
        (r.category, r.source, r.confidence),
        (
            Category::Other,
            CategorySource::Fallback,
            FALLBACK_CONFIDENCE
        )
    );
    assert_eq!(
        r.raw_label_or_match,
        "have there be a basket of fruit on the counter."
    );
    let r = c.classify(&triplet("anything", Some("Remove an existing object")));
    assert_eq!(
        (r.category, r.source, r.confidence),
        (Category::ObjectRemoval, CategorySource::DatasetLabel, 1.0)
    );
    assert_eq!(r.ruleset_version, c.version());
}

/// Every reference chain prints its category and source in the header and,
/// for rule matches, the confidence in step 4. The classifier has to agree.
#[test]
fn golden_instructions_match_printed_labels() {
    let header =
        Regex::new(r"^\[category=([a-z_]+), scope=[a-z]+, difficulty=[a-z]+, source=([a-z_]+)\]")
            .unwrap();
    let conf = Regex::new(r"\(confidence (\d\.\d\d)\)").unwrap();
    let c = Classifier::builtin();
    let blocks = common::golden_blocks();
    assert_eq!(blocks.len(), common::GOLDEN_CASES.len());
    for (case, block) in common::GOLDEN_CASES.iter().zip(blocks) {
        let caps = header.captures(block).unwrap();
        let r = c.classify(&triplet(case.instruction, case.source_label));
        assert_eq!(r.category.to_string(), caps[1], "{}", case.name);
        assert_eq!(r.source.to_string(), caps[2], "{}", case.name);
        match conf.captures(block) {
            Some(m) => assert_eq!(r.confidence, m[1].parse::<f64>().unwrap(), "{}", case.name),
            None if r.source == CategorySource::DatasetLabel => assert_eq!(r.confidence, 1.0),
            None => assert_eq!(r.source, CategorySource::Fallback, "{}", case.name),
        }
    }
}

#[test]
fn builtin_label_map_covers_every_label() {
    let map = LabelMap::builtin();
    assert_eq!(map.labels.len(), EXPECTED_LABELS);
    map.ensure_covers(map.labels.keys().map(String::as_str))
        .unwrap();
    assert!(!map.labels.values().any(|c| *c == Category::Other));
    assert!(map
        .ensure_covers(["Remove an existing object", "Not a label"])
        .is_err());
    assert_eq!(
        map.lookup("\tRemove an existing object  "),
        Some(Category::ObjectRemoval)
    );
    assert_eq!(map.lookup("remove an existing object"), None);
}

#[test]
fn label_map_rejects_other_target() {
    let text = "version = \"x\"\n[labels]\n\"Something\" = \"other\"\n";
    assert!(LabelMap::from_toml_str(text).is_err());
}

#[test]
fn rule_files_are_validated() {
    let rule = |category: &str, confidence: f64, patterns: &str| {
        format!(
            "version = \"x\"\n[[rule]]\nname = \"r\"\ntier = \"explicit_verb\"\ncategory = \"{category}\"\nconfidence = {confidence}\npatterns = {patterns}\n"
        )
    };
    assert!(CategoryRuleSet::from_toml_str(&rule("geometric", 0.5, "['spin']")).is_ok());
    assert!(CategoryRuleSet::from_toml_str(&rule("other", 0.5, "['spin']")).is_err());
    assert!(CategoryRuleSet::from_toml_str(&rule("geometric", 0.0, "['spin']")).is_err());
    assert!(CategoryRuleSet::from_toml_str(&rule("geometric", 1.5, "['spin']")).is_err());
    assert!(CategoryRuleSet::from_toml_str(&rule("geometric", 0.5, "[]")).is_err());
    assert!(CategoryRuleSet::from_toml_str(&rule("geometric", 0.5, "['(']")).is_err());
}

#[test]
fn first_rule_in_order_wins() {
    let rules = CategoryRuleSet::builtin();
    // "remove" (explicit verb) precedes "background" (domain keyword).
    let hit = rules
        .first_match("Remove the person from the background")
        .unwrap();
    assert_eq!(hit.category, Category::ObjectRemoval);
    assert_eq!(hit.tier, Tier::ExplicitVerb);
    assert_eq!(
        rules.first_match("Make it SNOWY").unwrap().category,
        Category::SceneTransformation
    );
}

#[test]
fn matching_respects_word_boundaries() {
    let c = Classifier::builtin();
    for s in [
        "the scarf near the address",
        "a padded saddle",
        "eraser on the desk",
    ] {
        assert_eq!(
            c.classify(&triplet(s, None)).category,
            Category::Other,
            "{s}"
        );
    }
    assert_eq!(
        c.classify(&triplet("get  rid   of it", None)).category,
        Category::ObjectRemoval
    );
}

#[test]
fn coverage_counts() {
    let c = Classifier::builtin();
    let records: Vec<_> = ["add a cat", "add a dog", "hmm", "flip it"]
        .iter()
        .map(|s| c.classify(&triplet(s, None)))
        .collect();
    let cov = coverage_report(&records).unwrap();
    assert_eq!(cov.total, 4);
    assert_eq!(cov.by_category.len(), Category::ALL.len());
    assert_eq!(cov.by_category[&Category::ObjectAddition], 2);
    assert_eq!(cov.by_category[&Category::TextEdit], 0);
    assert_eq!(cov.by_source[&CategorySource::Fallback], 1);
    assert_eq!(cov.by_source[&CategorySource::DatasetLabel], 0);
    assert_eq!(cov.other_rate_pct, 25.0);
    assert!(coverage_report(&[]).is_err());
}

proptest! {
    #[test]
    fn classification_is_total_and_consistent(
        instruction in "\\PC{0,60}",
        label in proptest::option::of("\\PC{0,20}"),
    ) {
        let c = Classifier::builtin();
        let t = triplet(&instruction, label.as_deref());
        let r = c.classify(&t);
        prop_assert_eq!(r.category == Category::Other, r.source == CategorySource::Fallback);
        prop_assert!(r.confidence > 0.0 && r.confidence <= 1.0);
        if r.source == CategorySource::Fallback {
            prop_assert_eq!(&r.raw_label_or_match, &instruction);
        }
        prop_assert_eq!(r, c.classify(&t));
    }

    #[test]
    fn mapped_labels_always_win(
        idx in 0usize..EXPECTED_LABELS,
        instruction in "[a-z ]{0,40}",
    ) {
        let map = LabelMap::builtin();
        let (label, category) = map.labels.iter().nth(idx).unwrap();
        let r = Classifier::builtin().classify(&triplet(&instruction, Some(label)));
        prop_assert_eq!(r.category, *category);
        prop_assert_eq!(r.source, CategorySource::DatasetLabel);
        prop_assert_eq!(&r.raw_label_or_match, label);
    }
}
