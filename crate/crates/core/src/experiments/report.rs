use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::plan::ExperimentPlan;
use super::run::{ExperimentOutput, ExperimentResults, FamilyResults, TransferMatrix};
use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::schema::projection::validate_instance;
use crate::schema::FeatureSchema;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl ReportFormat {
    pub const ALL: [ReportFormat; 3] = [
        ReportFormat::Json,
        ReportFormat::Csv,
        ReportFormat::Markdown,
    ];
}

/// Recomputation of reported numbers from the persisted records.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub cells_checked: usize,
    pub cell_mismatches: Vec<String>,
    pub pairs_checked: usize,
    pub pair_violations: Vec<String>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub plan: ExperimentPlan,
    /// SHA-256 of every deterministic output file.
    pub files: BTreeMap<String, String>,
    /// Files holding wall-clock measurements, left out of `files`.
    pub timing_files: Vec<String>,
    pub audit_passed: bool,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn rate_of(records: &[&Label]) -> Option<f64> {
    let n = records.len();
    (n > 0).then(|| records.iter().filter(|l| ***l == Label::Malicious).count() as f64 / n as f64)
}

/// Family, matrix, surrogate and model of one transfer cell.
type CellKey<'a> = (&'a str, &'a str, &'a str, &'a str);

/// Checks every matrix cell against the per-instance predictions, and every
/// persisted pair against the schema constraints and attacker bounds.
pub fn audit(schema: &FeatureSchema, out: &ExperimentOutput) -> AuditReport {
    let mut report = AuditReport::default();
    let families: Vec<&FamilyResults> = out
        .results
        .transfer
        .iter()
        .chain(&out.results.campaign)
        .collect();
    let mut by_cell: BTreeMap<CellKey, (Vec<&Label>, Vec<&Label>)> = BTreeMap::new();
    for p in &out.predictions {
        let e = by_cell
            .entry((&p.family, &p.matrix, &p.surrogate, &p.model))
            .or_default();
        e.0.push(&p.adversarial);
        e.1.push(&p.clean);
    }
    for f in &families {
        let matrices = [
            Some(&f.attacker),
            f.defender_same.as_ref(),
            Some(&f.defender),
        ];
        for m in matrices.into_iter().flatten() {
            for (i, row) in m.rows.iter().enumerate() {
                for (j, col) in m.cols.iter().enumerate() {
                    report.cells_checked += 1;
                    let (adv, clean) = by_cell
                        .get(&(
                            f.family.as_str(),
                            m.title.as_str(),
                            row.as_str(),
                            col.as_str(),
                        ))
                        .map(|(a, c)| (rate_of(a), rate_of(c)))
                        .unwrap_or((None, None));
                    if adv != m.cells[i][j] || clean != m.clean[i][j] {
                        report
                            .cell_mismatches
                            .push(format!("{}/{}/{row}/{col}", f.family, m.title));
                    }
                }
            }
        }
    }
    let bounds: BTreeMap<&str, _> = families
        .iter()
        .map(|f| (f.family.as_str(), &f.bounds))
        .collect();
    for p in &out.pairs {
        report.pairs_checked += 1;
        let Some(b) = bounds.get(p.family.as_str()) else {
            report
                .pair_violations
                .push(format!("{}: no bounds recorded", p.family));
            continue;
        };
        let v = validate_instance(schema, &p.adversarial, b, &p.original);
        if !v.is_valid() {
            report.pair_violations.push(format!(
                "{}/{}/{}: {:?}",
                p.family, p.surrogate, p.instance, v.violations
            ));
        }
    }
    report.passed = report.cell_mismatches.is_empty() && report.pair_violations.is_empty();
    report
}

fn write_bytes(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf> {
    let path = dir.join(name);
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn pct(x: Option<f64>) -> String {
    match x {
        Some(v) => format!("{:.1}%", 100.0 * v),
        None => "n/a".into(),
    }
}

fn num(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn csv_bytes(header: &[String], rows: Vec<Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| Error::Input(e.to_string()))
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

fn families(r: &ExperimentResults) -> Vec<&FamilyResults> {
    r.transfer.iter().chain(&r.campaign).collect()
}

fn matrices(f: &FamilyResults) -> Vec<&TransferMatrix> {
    [
        Some(&f.attacker),
        f.defender_same.as_ref(),
        Some(&f.defender),
    ]
    .into_iter()
    .flatten()
    .collect()
}

fn csv_tables(schema: &FeatureSchema, out: &ExperimentOutput) -> Result<Vec<(String, Vec<u8>)>> {
    let r = &out.results;
    let mut files = Vec::new();

    let mut rows = Vec::new();
    for f in families(r) {
        for c in &f.clean {
            let m = &c.metrics;
            rows.push(vec![
                f.family.clone(),
                c.side.to_string(),
                c.model.clone(),
                c.confusion.tp.to_string(),
                c.confusion.fp.to_string(),
                c.confusion.fn_.to_string(),
                c.confusion.tn.to_string(),
                m.accuracy.to_string(),
                m.precision.to_string(),
                m.recall.to_string(),
                m.f1.to_string(),
            ]);
        }
    }
    let header = strings(&[
        "family",
        "side",
        "model",
        "tp",
        "fp",
        "fn",
        "tn",
        "accuracy",
        "precision",
        "recall",
        "f1",
    ]);
    files.push(("clean_metrics.csv".to_string(), csv_bytes(&header, rows)?));

    let mut rows = Vec::new();
    for f in families(r) {
        for m in matrices(f) {
            for (i, row) in m.rows.iter().enumerate() {
                for (j, col) in m.cols.iter().enumerate() {
                    rows.push(vec![
                        f.family.clone(),
                        m.title.clone(),
                        row.clone(),
                        col.clone(),
                        m.instances[i].to_string(),
                        num(m.cells[i][j]),
                        num(m.clean[i][j]),
                    ]);
                }
            }
        }
    }
    let header = strings(&[
        "family",
        "matrix",
        "surrogate",
        "model",
        "instances",
        "detection_rate",
        "clean_rate",
    ]);
    files.push((
        "transfer_matrices.csv".to_string(),
        csv_bytes(&header, rows)?,
    ));

    let mut rows = Vec::new();
    for f in families(r) {
        for p in &f.perturbation {
            for x in &p.report.features {
                rows.push(vec![
                    f.family.clone(),
                    p.surrogate.clone(),
                    x.feature.name.clone(),
                    p.report.pairs.to_string(),
                    x.mean_abs.to_string(),
                    x.max_abs.to_string(),
                    x.max_value.to_string(),
                    x.bound_max.to_string(),
                    x.floor.to_string(),
                    x.within_bounds.to_string(),
                ]);
            }
        }
    }
    let header = strings(&[
        "family",
        "surrogate",
        "feature",
        "pairs",
        "mean_abs",
        "max_abs",
        "max_value",
        "bound_max",
        "floor",
        "within_bounds",
    ]);
    files.push(("perturbation.csv".to_string(), csv_bytes(&header, rows)?));

    let mut rows = Vec::new();
    for d in &r.defense {
        for row in &d.rows {
            rows.push(vec![
                d.family.clone(),
                d.nids.clone(),
                row.surrogate.clone(),
                row.instances.to_string(),
                num(row.unprotected),
                num(row.detector),
                num(row.protected),
                num(row.baseline),
            ]);
        }
    }
    let header = strings(&[
        "family",
        "nids",
        "surrogate",
        "instances",
        "unprotected",
        "detector",
        "protected",
        "baseline",
    ]);
    files.push(("defense.csv".to_string(), csv_bytes(&header, rows)?));

    let rows = out
        .predictions
        .iter()
        .map(|p| {
            vec![
                p.family.clone(),
                p.matrix.clone(),
                p.surrogate.clone(),
                p.model.clone(),
                p.instance.to_string(),
                p.clean.to_string(),
                p.adversarial.to_string(),
            ]
        })
        .collect();
    let header = strings(&[
        "family",
        "matrix",
        "surrogate",
        "model",
        "instance",
        "clean",
        "adversarial",
    ]);
    files.push(("predictions.csv".to_string(), csv_bytes(&header, rows)?));

    let mut header = strings(&["family", "surrogate", "instance", "evaded"]);
    header.extend(schema.names().iter().map(|n| format!("orig:{n}")));
    header.extend(schema.names().iter().map(|n| format!("adv:{n}")));
    let rows = out
        .pairs
        .iter()
        .map(|p| {
            let mut row = vec![
                p.family.clone(),
                p.surrogate.clone(),
                p.instance.to_string(),
                p.evaded.to_string(),
            ];
            row.extend(p.original.iter().map(|x| x.to_string()));
            row.extend(p.adversarial.iter().map(|x| x.to_string()));
            row
        })
        .collect();
    files.push((
        "adversarial_pairs.csv".to_string(),
        csv_bytes(&header, rows)?,
    ));
    Ok(files)
}

fn md_matrix(s: &mut String, m: &TransferMatrix, heading: &str) {
    let _ = writeln!(s, "#### {heading}\n");
    let _ = writeln!(
        s,
        "| Surrogate | {} | Average | Flows |",
        m.cols.join(" | ")
    );
    let _ = writeln!(s, "|---|{}---|---|", "---|".repeat(m.cols.len()));
    for (i, row) in m.rows.iter().enumerate() {
        let cells: Vec<String> = m.cells[i].iter().map(|&c| pct(c)).collect();
        let _ = writeln!(
            s,
            "| {row} | {} | {} | {} |",
            cells.join(" | "),
            pct(m.row_avg[i]),
            m.instances[i]
        );
    }
    let cols: Vec<String> = m.col_avg.iter().map(|&c| pct(c)).collect();
    let _ = writeln!(
        s,
        "| Average | {} | {} | |\n",
        cols.join(" | "),
        pct(m.average)
    );
}

fn md_family(s: &mut String, f: &FamilyResults) {
    let _ = writeln!(s, "| Side | Model | Precision | Recall | F1 |");
    let _ = writeln!(s, "|---|---|---|---|---|");
    for c in &f.clean {
        let m = &c.metrics;
        let _ = writeln!(
            s,
            "| {} | {} | {:.3} | {:.3} | {:.3} |",
            c.side, c.model, m.precision, m.recall, m.f1
        );
    }
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "| Surrogate | Crafted | Evaded | Mean iterations | Mean queries |"
    );
    let _ = writeln!(s, "|---|---|---|---|---|");
    for e in &f.evasion {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {:.2} | {:.2} |",
            e.surrogate, e.crafted, e.evaded, e.mean_iterations, e.mean_queries
        );
    }
    let _ = writeln!(s);
    md_matrix(s, &f.attacker, "Attacker models");
    if let Some(m) = &f.defender_same {
        md_matrix(s, m, "Defender models, attacker hyperparameters");
    }
    md_matrix(s, &f.defender, "Defender models");
    for p in &f.perturbation {
        let _ = writeln!(
            s,
            "#### Perturbation, {} surrogate ({} pairs)\n",
            p.surrogate, p.report.pairs
        );
        let _ = writeln!(
            s,
            "| Feature | Mean abs | Max abs | Max value | Clamp | Within |"
        );
        let _ = writeln!(s, "|---|---|---|---|---|---|");
        for x in &p.report.features {
            let _ = writeln!(
                s,
                "| {} | {:.4} | {:.4} | {:.4} | {:.4} | {} |",
                x.feature.name, x.mean_abs, x.max_abs, x.max_value, x.bound_max, x.within_bounds
            );
        }
        let _ = writeln!(s);
    }
}

fn markdown(r: &ExperimentResults, audit: &AuditReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Experiment report\n\nSeed: {}\n", r.seed);
    if let Some(f) = &r.transfer {
        let _ = writeln!(s, "## Transfer study: {}\n", f.family);
        md_family(&mut s, f);
    }
    if !r.campaign.is_empty() {
        let _ = writeln!(s, "## Botnet campaign\n");
        let _ = writeln!(s, "| Family | Attacker average | Defender average |");
        let _ = writeln!(s, "|---|---|---|");
        for f in &r.campaign {
            let _ = writeln!(
                s,
                "| {} | {} | {} |",
                f.family,
                pct(f.attacker.average),
                pct(f.defender.average)
            );
        }
        let _ = writeln!(s);
        for f in &r.campaign {
            let _ = writeln!(s, "### {}\n", f.family);
            md_family(&mut s, f);
        }
    }
    if !r.skipped.is_empty() {
        let _ = writeln!(
            s,
            "Skipped (no malicious flows): {}\n",
            r.skipped.join(", ")
        );
    }
    if !r.defense.is_empty() {
        let _ = writeln!(s, "## Defense\n");
        let _ = writeln!(
            s,
            "| Family | Surrogate | Flows | NIDS unprotected | Detector | NIDS protected | Disagreement baseline |"
        );
        let _ = writeln!(s, "|---|---|---|---|---|---|---|");
        for d in &r.defense {
            for row in &d.rows {
                let _ = writeln!(
                    s,
                    "| {} | {} | {} | {} | {} | {} | {} |",
                    d.family,
                    row.surrogate,
                    row.instances,
                    pct(row.unprotected),
                    pct(row.detector),
                    pct(row.protected),
                    pct(row.baseline)
                );
            }
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "| Family | NIDS | Weights | Clean flows rejected |");
        let _ = writeln!(s, "|---|---|---|---|");
        for d in &r.defense {
            let w: Vec<String> = d.weights.iter().map(|w| format!("{w:.3}")).collect();
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} |",
                d.family,
                d.nids,
                w.join(" / "),
                pct(Some(d.clean_rejected))
            );
        }
        let _ = writeln!(s);
    }
    let _ = writeln!(
        s,
        "Self-audit: {} ({} cells, {} pairs checked)",
        if audit.passed { "passed" } else { "FAILED" },
        audit.cells_checked,
        audit.pairs_checked
    );
    s
}

fn timing_files(out: &ExperimentOutput) -> Result<Vec<(String, Vec<u8>)>> {
    let rows = out
        .timing
        .iter()
        .map(|t| {
            vec![
                t.family.clone(),
                t.surrogate.clone(),
                t.timing.instances.to_string(),
                t.timing.evaded.to_string(),
                t.timing.wall_seconds.to_string(),
                t.timing.mean_seconds.to_string(),
            ]
        })
        .collect();
    let header = strings(&[
        "family",
        "surrogate",
        "instances",
        "evaded",
        "wall_seconds",
        "mean_seconds",
    ]);
    let mut md = String::from("# Crafting time\n\n| Family | Surrogate | Flows | Wall seconds | Mean seconds per flow |\n|---|---|---|---|---|\n");
    for t in &out.timing {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {:.3} | {:.6} |",
            t.family, t.surrogate, t.timing.instances, t.timing.wall_seconds, t.timing.mean_seconds
        );
    }
    Ok(vec![
        (
            "timing.json".to_string(),
            serde_json::to_vec_pretty(&out.timing)?,
        ),
        ("timing.csv".to_string(), csv_bytes(&header, rows)?),
        ("timing.md".to_string(), md.into_bytes()),
    ])
}

/// The plan with `output_dir` pointing at the directory holding the copy.
fn relocated(plan: &ExperimentPlan) -> ExperimentPlan {
    ExperimentPlan {
        output_dir: PathBuf::from("."),
        ..plan.clone()
    }
}

/// Writes results, tables, per-instance records, the audit, timing files
/// and a manifest of digests into `dir`.
pub fn emit_report(
    plan: &ExperimentPlan,
    out: &ExperimentOutput,
    dir: impl AsRef<Path>,
    formats: &[ReportFormat],
) -> Result<Manifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let schema = plan.schema()?;
    let audit = audit(&schema, out);
    if !audit.passed {
        log::warn!(
            "self-audit failed: {} cell mismatches, {} pair violations",
            audit.cell_mismatches.len(),
            audit.pair_violations.len()
        );
    }
    let mut files: Vec<(String, Vec<u8>)> = vec![
        (
            "plan.toml".to_string(),
            relocated(plan).to_toml_string()?.into_bytes(),
        ),
        ("audit.json".to_string(), serde_json::to_vec_pretty(&audit)?),
    ];
    if formats.contains(&ReportFormat::Json) {
        files.push((
            "results.json".to_string(),
            serde_json::to_vec_pretty(&out.results)?,
        ));
    }
    if formats.contains(&ReportFormat::Csv) {
        files.extend(csv_tables(&schema, out)?);
    }
    if formats.contains(&ReportFormat::Markdown) {
        files.push((
            "report.md".to_string(),
            markdown(&out.results, &audit).into_bytes(),
        ));
    }
    let mut digests = BTreeMap::new();
    for (name, bytes) in &files {
        let path = write_bytes(dir, name, bytes)?;
        digests.insert(name.clone(), sha256_file(&path)?);
    }
    let mut timing_names = Vec::new();
    for (name, bytes) in timing_files(out)? {
        write_bytes(dir, &name, &bytes)?;
        timing_names.push(name);
    }
    let manifest = Manifest {
        seed: plan.seed,
        plan: plan.clone(),
        files: digests,
        timing_files: timing_names,
        audit_passed: audit.passed,
    };
    write_bytes(dir, "manifest.json", &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}
