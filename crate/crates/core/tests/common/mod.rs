#![allow(dead_code)]

use std::collections::BTreeMap;

use editforge::difficulty::{compactness, score_v2, DifficultyWeights};
use editforge::diffmask::alignment_failed_artifact;
use editforge::evalparse::{ExtractedFields, GoldTriple};
use editforge::grid::{Grid, Mask};
use editforge::records::{
    Bin, Category, CategoryRecord, CategorySource, DifficultyRecord, EditTriplet, MaskArtifact,
    RoutePath, Scope, ScorerVersion, Signal, SourceDataset, SpatialDescriptor,
};
use editforge::taxonomy::{Classifier, SOURCE_LABEL_KEY};

pub const GOLDEN_TEXT: &str = include_str!("../fixtures/golden_chains.txt");

/// Upstream values behind one reference chain. Masks are unions of
/// rectangles `(x, y, w, h)` on a 100x100 grid chosen so that area,
/// location and concentration render as in the reference text.
pub struct GoldenCase {
    pub name: &'static str,
    pub instruction: &'static str,
    pub source_label: Option<&'static str>,
    pub rects: &'static [(usize, usize, usize, usize)],
    pub s_struct: f64,
    pub s_instr: f64,
    pub bin: Bin,
}

pub const GOLDEN_CASES: &[GoldenCase] = &[
    GoldenCase {
        name: "object_addition",
        instruction: "add a polar bear",
        source_label: None,
        rects: &[(2, 66, 20, 32), (16, 71, 37, 17)],
        s_struct: 0.086,
        s_instr: 0.1205,
        bin: Bin::Easy,
    },
    GoldenCase {
        name: "object_removal",
        instruction: "get rid of the framed pictures",
        source_label: None,
        rects: &[(62, 28, 8, 60), (14, 6, 34, 36)],
        s_struct: 0.1455,
        s_instr: 0.0555,
        bin: Bin::Medium,
    },
    GoldenCase {
        name: "object_replacement",
        instruction: "replace the stuffed animals with a pillow.",
        source_label: None,
        rects: &[(38, 32, 57, 60), (16, 10, 31, 19)],
        s_struct: 0.3245,
        s_instr: 0.1545,
        bin: Bin::Hard,
    },
    GoldenCase {
        name: "attribute_change",
        instruction: "let the apples be changed to orange slices",
        source_label: None,
        rects: &[(56, 60, 30, 29), (47, 47, 15, 42)],
        s_struct: 0.1155,
        s_instr: 0.0755,
        bin: Bin::Easy,
    },
    GoldenCase {
        name: "style_transfer",
        instruction: "enhance the image to a modern aesthetic by applying a vibrant, high-contrast color grade with crisp details, brightening the overall scene, and subtly smoothing any visible wear or rust on the bridge.",
        source_label: Some("Strong artistic style transfer (e.g., Van Gogh/anime/etc.)"),
        rects: &[(0, 0, 100, 100)],
        s_struct: 0.80,
        s_instr: 0.581,
        bin: Bin::Hard,
    },
    GoldenCase {
        name: "photometric",
        instruction: "colorize the black and white image realistically, depicting natural skin tones, jungle foliage, and gear colors, then subtly shift the overall color temperature towards a cooler tone.",
        source_label: Some("Change overall color tone"),
        rects: &[(0, 0, 100, 100)],
        s_struct: 0.636,
        s_instr: 0.666,
        bin: Bin::Medium,
    },
    GoldenCase {
        name: "scene_transformation",
        instruction: "let the cabinets be made of dark wood",
        source_label: None,
        rects: &[(10, 15, 23, 18), (32, 45, 17, 55)],
        s_struct: 0.1025,
        s_instr: 0.082,
        bin: Bin::Medium,
    },
    GoldenCase {
        name: "background_change",
        instruction: "it should be a mountain in the background.",
        source_label: None,
        rects: &[(53, 51, 18, 48), (61, 0, 3, 33)],
        s_struct: 0.0685,
        s_instr: 0.082,
        bin: Bin::Easy,
    },
    GoldenCase {
        name: "text_edit",
        instruction: "change the text on the parking meter to say \"NO\".",
        source_label: None,
        rects: &[(11, 0, 9, 32), (40, 88, 58, 8)],
        s_struct: 0.0235,
        s_instr: 0.18,
        bin: Bin::Hard,
    },
    GoldenCase {
        name: "geometric",
        instruction: "make the piece of paper hanging on the wall a mirror",
        source_label: None,
        rects: &[(9, 0, 17, 58), (67, 55, 9, 44)],
        s_struct: 0.0755,
        s_instr: 0.1855,
        bin: Bin::Hard,
    },
    GoldenCase {
        name: "human_centric",
        instruction: "transform the main subject (the person playing the flute) into a detailed, expressive black ink line-art sketch, utilizing varied line weights to highlight facial features, the texture of the cap.",
        source_label: Some("Modify a person's hairstyle or accessories"),
        rects: &[(0, 0, 100, 100)],
        s_struct: 0.72,
        s_instr: 0.58,
        bin: Bin::Hard,
    },
    GoldenCase {
        name: "other",
        instruction: "have there be a basket of fruit on the counter.",
        source_label: None,
        rects: &[(42, 4, 11, 52), (53, 69, 7, 29)],
        s_struct: 0.063,
        s_instr: 0.1035,
        bin: Bin::Medium,
    },
];

pub fn golden_blocks() -> Vec<&'static str> {
    GOLDEN_TEXT.trim_end().split("\n\n").collect()
}

pub fn rect_mask(w: usize, h: usize, rects: &[(usize, usize, usize, usize)]) -> Mask {
    Grid::from_fn(w, h, |x, y| {
        rects
            .iter()
            .any(|&(rx, ry, rw, rh)| x >= rx && x < rx + rw && y >= ry && y < ry + rh)
    })
}

pub struct Upstream {
    pub triplet: EditTriplet,
    pub mask: MaskArtifact,
    pub difficulty: DifficultyRecord,
    pub category: CategoryRecord,
}

pub fn upstream(case: &GoldenCase) -> Upstream {
    let id = format!("golden_{}", case.name);
    let mut metadata = BTreeMap::new();
    if let Some(label) = case.source_label {
        metadata.insert(SOURCE_LABEL_KEY.to_string(), label.to_string());
    }
    let triplet = EditTriplet {
        triplet_id: id.clone(),
        real_path: format!("{id}_real.png"),
        edited_path: format!("{id}_edited.png"),
        instruction: case.instruction.to_string(),
        provided_mask_path: None,
        source_dataset: if case.source_label.is_some() {
            SourceDataset::PicoBanana
        } else {
            SourceDataset::MagicBrush
        },
        metadata,
    };
    let mask = rect_mask(100, 100, case.rects);
    let global = mask.count() == mask.len();
    let s_compact = 1.0 - compactness(&mask);
    let weights = DifficultyWeights::default_for(ScorerVersion::V2);
    let difficulty = DifficultyRecord {
        triplet_id: id.clone(),
        scorer_version: ScorerVersion::V2,
        s_struct: case.s_struct,
        s_perc: None,
        s_loc: None,
        s_compact: Some(s_compact),
        s_instr: case.s_instr,
        score: score_v2(case.s_struct, s_compact, case.s_instr, &weights),
        bin: case.bin,
        flags: vec![],
    };
    let artifact = MaskArtifact {
        triplet_id: id,
        scope: if global { Scope::Global } else { Scope::Local },
        route: if global {
            RoutePath::MeanThreshold
        } else {
            RoutePath::MaskArea
        },
        mask_path: None,
        width: Some(100),
        height: Some(100),
        mask_area_frac: mask.area_frac(),
        combined_diff_mean: if global { 0.7 } else { 0.1 },
        per_signal_means: BTreeMap::new(),
        signal_stack: vec![Signal::Lab, Signal::Ssim, Signal::Perceptual],
        otsu_threshold_used: (!global).then_some(0.5),
        mask: Some(mask),
    };
    let category = Classifier::builtin().classify(&triplet);
    Upstream {
        triplet,
        mask: artifact,
        difficulty,
        category,
    }
}

/// Every file under `root`, keyed by relative path.
pub fn snapshot(root: &std::path::Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &std::path::Path, dir: &std::path::Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path
                    .strip_prefix(root)
                    .unwrap()
                    .to_string_lossy()
                    .into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

pub fn artifact_for(descriptor: SpatialDescriptor, id: &str) -> MaskArtifact {
    let (scope, rects): (Scope, &[(usize, usize, usize, usize)]) = match descriptor {
        SpatialDescriptor::WholeImage => (Scope::Global, &[(0, 0, 90, 60)]),
        SpatialDescriptor::AlignmentFailed => (Scope::AlignmentFailed, &[]),
        SpatialDescriptor::Centered => (Scope::Local, &[(38, 24, 14, 12)]),
        SpatialDescriptor::UpperLeft => (Scope::Local, &[(8, 6, 20, 10)]),
        SpatialDescriptor::UpperRight => (Scope::Local, &[(70, 2, 12, 14)]),
        SpatialDescriptor::LowerLeft => (Scope::Local, &[(0, 44, 16, 16)]),
        SpatialDescriptor::LowerRight => (Scope::Local, &[(60, 40, 25, 15)]),
        SpatialDescriptor::Scattered => {
            (Scope::Local, &[(2, 2, 6, 6), (80, 2, 6, 6), (40, 50, 6, 6)])
        }
    };
    let mask = (scope != Scope::AlignmentFailed).then(|| rect_mask(90, 60, rects));
    let area = mask.as_ref().map_or(0.0, |m| m.area_frac());
    let mut a = alignment_failed_artifact(id, &Default::default());
    a.scope = scope;
    if scope != Scope::AlignmentFailed {
        a.route = if scope == Scope::Global {
            RoutePath::MeanThreshold
        } else {
            RoutePath::MaskArea
        };
        a.width = Some(90);
        a.height = Some(60);
        a.mask_area_frac = area;
        a.combined_diff_mean = if scope == Scope::Global { 0.8 } else { 0.05 };
    }
    a.mask = mask;
    a
}

/// Category sources a chain can carry: `other` only comes from the fallback
/// path, every other category from a label or a rule.
pub fn valid_sources(category: Category) -> &'static [CategorySource] {
    match category {
        Category::Other => &[CategorySource::Fallback],
        _ => &[CategorySource::DatasetLabel, CategorySource::RuleBased],
    }
}

/// Upstream records for one (category, descriptor, bin, source) combination,
/// borrowing instruction and scores from the matching reference case.
pub fn records_for(
    category: Category,
    descriptor: SpatialDescriptor,
    bin: Bin,
    source: CategorySource,
) -> (EditTriplet, MaskArtifact, DifficultyRecord, CategoryRecord) {
    let id = format!("x_{category}_{descriptor}_{bin}_{source}");
    let base = upstream(&GOLDEN_CASES[category_index(category)]);
    let mut triplet = base.triplet.clone();
    triplet.triplet_id = id.clone();
    let mask = artifact_for(descriptor, &id);
    let mut diff = base.difficulty.clone();
    diff.triplet_id = id.clone();
    diff.bin = bin;
    diff.s_compact = mask.mask.as_ref().map(|m| 1.0 - compactness(m));
    let mut cat = base.category.clone();
    cat.triplet_id = id;
    cat.category = category;
    cat.source = source;
    cat.confidence = match source {
        CategorySource::DatasetLabel => 1.0,
        CategorySource::RuleBased => 0.7,
        CategorySource::Fallback => 0.5,
    };
    (triplet, mask, diff, cat)
}

pub fn category_index(c: Category) -> usize {
    Category::ALL.iter().position(|x| *x == c).unwrap()
}

pub const GOLD: GoldTriple = GoldTriple {
    category: Category::ObjectAddition,
    spatial: SpatialDescriptor::Centered,
    bin: Bin::Easy,
};

pub fn fields(
    c: Option<Category>,
    s: Option<SpatialDescriptor>,
    b: Option<Bin>,
) -> ExtractedFields {
    ExtractedFields {
        category: c,
        spatial: s,
        bin: b,
        parse_notes: vec![],
    }
}

/// Per-field (extracted, correct) counts out of `n`, with `joint` records
/// correct on every field and no other record correct on all three.
pub fn synthesize_predictions(
    n: usize,
    counts: [(usize, usize); 3],
    joint: usize,
) -> Vec<ExtractedFields> {
    let mut correct = vec![[false; 3]; n];
    let mut extracted = vec![[false; 3]; n];
    for row in correct.iter_mut().take(joint) {
        *row = [true; 3];
    }
    // Lay the remaining correct runs end to end around [joint, n); each slot
    // is covered at most twice so no extra triple forms.
    let span = n - joint;
    let mut cursor = 0;
    for (f, (_, c)) in counts.iter().enumerate() {
        for _ in joint..*c {
            correct[joint + cursor % span][f] = true;
            cursor += 1;
        }
    }
    assert!(cursor <= 2 * span);
    for (f, (e, _)) in counts.iter().enumerate() {
        let mut need = e - correct.iter().filter(|r| r[f]).count();
        for i in 0..n {
            if correct[i][f] {
                extracted[i][f] = true;
            } else if need > 0 {
                extracted[i][f] = true;
                need -= 1;
            }
        }
    }
    (0..n)
        .map(|i| {
            let hit = |f: usize| extracted[i][f].then_some(correct[i][f]);
            fields(
                hit(0).map(|ok| if ok { GOLD.category } else { Category::Other }),
                hit(1).map(|ok| {
                    if ok {
                        GOLD.spatial
                    } else {
                        SpatialDescriptor::Scattered
                    }
                }),
                hit(2).map(|ok| if ok { GOLD.bin } else { Bin::Hard }),
            )
        })
        .collect()
}
