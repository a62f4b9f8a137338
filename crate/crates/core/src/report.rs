//! Corpus characterization report over whatever stage files exist.
//!
//! Each section is computed from its own stage file, so a partial run still
//! reports what it can; stages that were not run and IDs missing from some
//! stage are listed explicitly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::analysis::{self, crosstab, crosstab_csv, distribution_stats, histogram_csv};
use crate::error::{Error, Result};
use crate::pipeline::STAGES;
use crate::records::{
    join_by_id, read_records, CategoryRecord, DifficultyRecord, EditTriplet, Layout, MaskArtifact,
    ReasoningChain, Scope, SpatialDescriptor, Stage,
};
use crate::taxonomy::coverage_report;

#[derive(Debug, Clone, Default)]
pub struct Report {
    /// File name to contents, written under `report/<dataset>/`.
    pub files: BTreeMap<String, String>,
    pub missing_stages: Vec<Stage>,
}

impl Report {
    pub fn text(&self) -> &str {
        self.files
            .get("report.txt")
            .map(String::as_str)
            .unwrap_or("")
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in &self.files {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

fn pct(n: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * n as f64 / total as f64
    }
}

fn count_table<K: std::fmt::Display>(
    header: &str,
    rows: &BTreeMap<K, usize>,
    total: usize,
) -> String {
    let mut out = format!("{header},count,pct\n");
    for (k, n) in rows {
        let _ = writeln!(out, "{k},{n},{:.1}", pct(*n, total));
    }
    out
}

pub fn report_dir(root: &Path, dataset: &str) -> PathBuf {
    root.join("report").join(dataset)
}

/// Builds the report for `dataset` under `root`. Fails only when no stage
/// file exists at all.
pub fn run_report(root: &Path, dataset: &str) -> Result<Report> {
    let layout = Layout::new(root);
    let present: Vec<Stage> = STAGES
        .iter()
        .copied()
        .filter(|s| layout.stage_file(*s, dataset).is_file())
        .collect();
    if present.is_empty() {
        return Err(Error::MissingStage {
            stage: "any".into(),
            detail: format!(
                "no stage files for dataset {dataset:?} under {}",
                root.display()
            ),
        });
    }
    let mut report = Report {
        missing_stages: STAGES
            .iter()
            .copied()
            .filter(|s| !present.contains(s))
            .collect(),
        ..Default::default()
    };
    let mut text = format!("Characterization report: {dataset}\n\n");
    let file = |s: Stage| layout.stage_file(s, dataset);

    let mut counts = String::from("stage,records\n");
    let _ = writeln!(text, "Records per stage:");
    for s in STAGES {
        if present.contains(&s) {
            let n = match s {
                Stage::Triplets => read_records::<EditTriplet>(&file(s))?.len(),
                Stage::Masks => read_records::<MaskArtifact>(&file(s))?.len(),
                Stage::Difficulty => read_records::<DifficultyRecord>(&file(s))?.len(),
                Stage::Categories => read_records::<CategoryRecord>(&file(s))?.len(),
                Stage::Chains => read_records::<ReasoningChain>(&file(s))?.len(),
            };
            let _ = writeln!(counts, "{s},{n}");
            let _ = writeln!(text, "  {:<12} {n}", s.as_str());
        } else {
            let _ = writeln!(counts, "{s},");
            let _ = writeln!(text, "  {:<12} (not run)", s.as_str());
        }
    }
    report.files.insert("counts.csv".into(), counts);

    let joined = join_by_id(&present.iter().map(|s| file(*s)).collect::<Vec<_>>())?;
    let mut gaps = String::from("triplet_id,missing_from\n");
    for m in &joined.missing {
        let stages: Vec<&str> = m.missing_from.iter().map(|s| s.as_str()).collect();
        let _ = writeln!(gaps, "{},{}", m.triplet_id, stages.join(";"));
    }
    let _ = writeln!(
        text,
        "\nJoined across {} stage(s): {} triplets, {} with gaps",
        present.len(),
        joined.views.len(),
        joined.missing.len()
    );
    for m in &joined.missing {
        let stages: Vec<&str> = m.missing_from.iter().map(|s| s.as_str()).collect();
        let _ = writeln!(
            text,
            "  {} missing from {}",
            m.triplet_id,
            stages.join(", ")
        );
    }
    if !report.missing_stages.is_empty() {
        let names: Vec<&str> = report.missing_stages.iter().map(|s| s.as_str()).collect();
        let _ = writeln!(text, "  stages not run: {}", names.join(", "));
    }
    report.files.insert("gaps.csv".into(), gaps);

    if present.contains(&Stage::Masks) {
        let masks: Vec<MaskArtifact> = read_records(&file(Stage::Masks))?;
        let mut scopes: BTreeMap<Scope, usize> = Scope::ALL.iter().map(|s| (*s, 0)).collect();
        for m in &masks {
            *scopes.entry(m.scope).or_default() += 1;
        }
        let _ = writeln!(text, "\nScope routing ({} masks):", masks.len());
        for (s, n) in &scopes {
            let _ = writeln!(
                text,
                "  {:<17} {n:>6}  {:5.1}%",
                s.as_str(),
                pct(*n, masks.len())
            );
        }
        let ambiguous: Vec<&str> = masks
            .iter()
            .filter(|m| m.scope == Scope::Ambiguous)
            .map(|m| m.triplet_id.as_str())
            .collect();
        if !ambiguous.is_empty() {
            let _ = writeln!(text, "  ambiguous triplets: {}", ambiguous.join(", "));
        }
        report.files.insert(
            "scope.csv".into(),
            count_table("scope", &scopes, masks.len()),
        );
        let cdm: Vec<f64> = masks.iter().map(|m| m.combined_diff_mean).collect();
        if !cdm.is_empty() {
            let _ = writeln!(
                text,
                "  combined diff mean: {:.3}",
                crate::stats::mean(&cdm)
            );
            let candidates: Vec<f64> = (25..=37).map(|i| i as f64 / 50.0).collect();
            let rows = analysis::sweep_thresholds(&cdm, &candidates)?;
            report
                .files
                .insert("sweep.csv".into(), analysis::sweep_csv(&rows));
        }
    }

    if present.contains(&Stage::Chains) {
        let chains: Vec<ReasoningChain> = read_records(&file(Stage::Chains))?;
        let local: Vec<&ReasoningChain> = chains
            .iter()
            .filter(|c| c.header.scope == Scope::Local)
            .collect();
        let mut desc: BTreeMap<SpatialDescriptor, usize> = SpatialDescriptor::ALL
            .iter()
            .filter(|d| {
                !matches!(
                    d,
                    SpatialDescriptor::WholeImage | SpatialDescriptor::AlignmentFailed
                )
            })
            .map(|d| (*d, 0))
            .collect();
        for c in &local {
            *desc.entry(c.descriptor).or_default() += 1;
        }
        let _ = writeln!(
            text,
            "\nSpatial descriptors over {} local edits:",
            local.len()
        );
        for (d, n) in &desc {
            let _ = writeln!(
                text,
                "  {:<12} {n:>6}  {:5.1}%",
                d.as_str(),
                pct(*n, local.len())
            );
        }
        report.files.insert(
            "descriptors.csv".into(),
            count_table("descriptor", &desc, local.len()),
        );
        let flagged: Vec<String> = chains
            .iter()
            .filter(|c| !c.flags.is_empty())
            .map(|c| format!("{} [{}]", c.triplet_id, c.flags.join(",")))
            .collect();
        if !flagged.is_empty() {
            let _ = writeln!(text, "  flagged chains: {}", flagged.join("; "));
        }
    }

    let difficulty: Option<Vec<DifficultyRecord>> = if present.contains(&Stage::Difficulty) {
        Some(read_records(&file(Stage::Difficulty))?)
    } else {
        None
    };
    if let Some(diff) = &difficulty {
        let scores: Vec<f64> = diff.iter().map(|d| d.score).collect();
        match distribution_stats(&scores) {
            Ok(stats) => {
                let version = diff
                    .first()
                    .map(|d| d.scorer_version.as_str())
                    .unwrap_or("");
                let _ = writeln!(
                    text,
                    "\nDifficulty ({version}, n={}): mean {:.3}, sigma {:.3}, tertile cutoffs {:.3} / {:.3}",
                    stats.n, stats.mean, stats.sigma, stats.p33, stats.p66
                );
                report.files.insert(
                    "score_stats.csv".into(),
                    format!(
                        "n,mean,sigma,p33,p66\n{},{},{},{},{}\n",
                        stats.n, stats.mean, stats.sigma, stats.p33, stats.p66
                    ),
                );
                report
                    .files
                    .insert("score_histogram.csv".into(), histogram_csv(&stats));
            }
            Err(e) => {
                let _ = writeln!(text, "\nDifficulty: {e}");
            }
        }
    }

    if present.contains(&Stage::Categories) {
        let cats: Vec<CategoryRecord> = read_records(&file(Stage::Categories))?;
        if let Ok(cov) = coverage_report(&cats) {
            let _ = writeln!(
                text,
                "\nCategories ({} records, other-rate {:.1}%):",
                cov.total, cov.other_rate_pct
            );
            for (c, n) in &cov.by_category {
                let _ = writeln!(
                    text,
                    "  {:<21} {n:>6}  {:5.1}%",
                    c.as_str(),
                    pct(*n, cov.total)
                );
            }
            for (s, n) in &cov.by_source {
                let _ = writeln!(text, "  source {:<14} {n:>6}", s.as_str());
            }
            let mut csv = count_table("category", &cov.by_category, cov.total);
            let _ = writeln!(csv, "other_rate_pct,,{:.1}", cov.other_rate_pct);
            report.files.insert("categories.csv".into(), csv);
        }
        if let Some(diff) = &difficulty {
            let bins: BTreeMap<&str, _> = diff
                .iter()
                .map(|d| (d.triplet_id.as_str(), d.bin))
                .collect();
            let pairs: Vec<_> = cats
                .iter()
                .filter_map(|c| bins.get(c.triplet_id.as_str()).map(|b| (c.category, *b)))
                .collect();
            let table = crosstab(&pairs);
            let csv = crosstab_csv(&table);
            let _ = writeln!(text, "\nCategory x difficulty (row %):");
            for line in csv.lines() {
                let _ = writeln!(text, "  {}", line.replace(',', "\t"));
            }
            report.files.insert("crosstab.csv".into(), csv);
        }
    }

    report.files.insert("report.txt".into(), text);
    Ok(report)
}
