//! End-to-end acceptance checks on the desk-scale plan in `plans/desk.toml`.
//!
//! Each test prints one `PASS` or `FAIL` line to stderr and fails when its
//! criterion does not hold.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use advnids::dataset::{synth_generate, Label, Scaler, SynthParams};
use advnids::defense::fuse;
use advnids::experiments::{
    emit_report, run, ExperimentOutput, ExperimentPlan, FamilyContext, FamilyResults, Manifest,
    ReportFormat, Stages,
};
use advnids::models::{FlowClassifier, Mlp, Side};
use advnids::schema::{
    project, validate_instance, FeatureBounds, FeatureGroup, FeatureSchema, FeatureVector,
};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn plan_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../plans/desk.toml")
}

fn verdict(name: &str, ok: bool, detail: String) {
    let line = format!("{} {name}: {detail}\n", if ok { "PASS" } else { "FAIL" });
    std::io::stderr().write_all(line.as_bytes()).unwrap();
    assert!(ok, "{line}");
}

struct MainStudy {
    ctx: FamilyContext,
    results: FamilyResults,
    seconds: f64,
}

fn main_study() -> &'static MainStudy {
    static CELL: OnceLock<MainStudy> = OnceLock::new();
    CELL.get_or_init(|| {
        let plan = ExperimentPlan::load(plan_path()).unwrap();
        let schema = plan.schema().unwrap();
        let (main, _) = plan.family_names();
        let start = Instant::now();
        let ctx = FamilyContext::prepare(&plan, &schema, &main, true)
            .unwrap()
            .unwrap();
        let results = ctx.results(&mut Vec::new()).unwrap();
        MainStudy {
            ctx,
            results,
            seconds: start.elapsed().as_secs_f64(),
        }
    })
}

struct Run {
    plan: ExperimentPlan,
    out: ExperimentOutput,
    manifest: Manifest,
    dir: PathBuf,
}

fn full_run(tag: &str) -> Run {
    let mut plan = ExperimentPlan::load(plan_path()).unwrap();
    let dir = std::env::temp_dir().join(format!("advnids-acceptance-{}-{tag}", std::process::id()));
    plan.output_dir = dir.clone();
    let out = run(&plan, Stages::ALL).unwrap();
    let manifest = emit_report(&plan, &out, &dir, &ReportFormat::ALL).unwrap();
    Run {
        plan,
        out,
        manifest,
        dir,
    }
}

fn first_run() -> &'static Run {
    static CELL: OnceLock<Run> = OnceLock::new();
    CELL.get_or_init(|| full_run("first"))
}

#[test]
fn clean_performance() {
    let m = main_study();
    let sizes = &m.results.split_sizes;
    let per_side = [
        sizes["attacker_train"] + sizes["attacker_test"],
        sizes["defender_train"] + sizes["defender_test"],
    ];
    let mut worst: f64 = 1.0;
    let mut detail = Vec::new();
    for c in &m.results.clean {
        let x = &c.metrics;
        worst = worst.min(x.precision).min(x.recall).min(x.f1);
        detail.push(format!(
            "{}-{} {:.3}/{:.3}/{:.3}",
            c.side, c.model, x.precision, x.recall, x.f1
        ));
    }
    let ok = per_side.iter().all(|&n| n >= 8000)
        && m.results.clean.len() == 6
        && worst >= 0.93
        && m.seconds < 300.0;
    verdict(
        "clean_performance",
        ok,
        format!(
            "flows/side {per_side:?}, min P/R/F1 {worst:.3} (>= 0.93), {:.0}s (< 300s); {}",
            m.seconds,
            detail.join(", ")
        ),
    );
}

#[test]
fn evasion_postcondition() {
    let m = main_study();
    let schema = &m.ctx.schema;
    let immutables = schema.group_indices(FeatureGroup::Immutable);
    let (mut evaded, mut bad) = (0, 0);
    for (kind, results) in m.ctx.crafted() {
        let surrogate = m.ctx.attacker.iter().find(|s| s.kind() == kind).unwrap();
        assert_eq!(surrogate.side(), Side::Attacker);
        for (x, r) in m.ctx.instances.iter().zip(results) {
            if !r.evaded {
                continue;
            }
            evaded += 1;
            let benign = surrogate.predict(&r.adversarial).unwrap() == Label::Benign;
            let valid = validate_instance(schema, &r.adversarial, &m.ctx.bounds, x).is_valid();
            let frozen = immutables
                .iter()
                .all(|&i| r.adversarial[i].to_bits() == x[i].to_bits());
            if !(benign && valid && frozen) {
                bad += 1;
            }
        }
    }
    verdict(
        "evasion_postcondition",
        evaded > 0 && bad == 0,
        format!("{evaded} evaded results, {bad} not benign, invalid or with altered immutables"),
    );
}

#[test]
fn surrogate_diagonal_zero() {
    let m = main_study();
    let diag = m.results.attacker.diagonal();
    let ok = diag.len() == 3 && diag.iter().all(|&d| d == Some(0.0));
    verdict(
        "surrogate_diagonal_zero",
        ok,
        format!(
            "attacker diagonal {diag:?} over {:?} evaded flows",
            m.results.attacker.instances
        ),
    );
}

#[test]
fn transferability() {
    let m = main_study();
    let (adv, clean) = m.results.attacker.cross_average();
    let (adv, clean) = (adv.unwrap(), clean.unwrap());
    let d = &m.results.defender;
    let d_adv = d.average.unwrap();
    let d_clean =
        d.clean.iter().flatten().flatten().sum::<f64>() / (d.rows.len() * d.cols.len()) as f64;
    let ok = adv < 0.5 * clean && d_adv < 0.5 * d_clean;
    verdict(
        "transferability",
        ok,
        format!(
            "attacker cross-model {:.1}% vs clean {:.1}%; defender {:.1}% vs clean {:.1}% (must stay below half)",
            100.0 * adv,
            100.0 * clean,
            100.0 * d_adv,
            100.0 * d_clean
        ),
    );
}

#[test]
fn fusion_correctness() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut worst_sum, mut worst_scale, mut worst_direct): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let mut negative = 0;
    for _ in 0..10_000 {
        let per: Vec<(f64, f64)> = (0..3)
            .map(|_| {
                let p: f64 = rng.random();
                (p, 1.0 - p)
            })
            .collect();
        let mut w: Vec<f64> = (0..3).map(|_| rng.random()).collect();
        if w.iter().all(|&x| x == 0.0) {
            w[0] = 1.0;
        }
        let (pa, pc) = fuse(&per, &w).unwrap();
        if pa < 0.0 || pc < 0.0 {
            negative += 1;
        }
        worst_sum = worst_sum.max((pa + pc - 1.0).abs());
        let lambda = rng.random_range(0.01..100.0);
        let scaled: Vec<f64> = w.iter().map(|x| x * lambda).collect();
        let (sa, sc) = fuse(&per, &scaled).unwrap();
        worst_scale = worst_scale.max((sa - pa).abs()).max((sc - pc).abs());
        let num_a = per[0].0 * w[0] + per[1].0 * w[1] + per[2].0 * w[2];
        let num_c = per[0].1 * w[0] + per[1].1 * w[1] + per[2].1 * w[2];
        let den = num_a + num_c;
        worst_direct = worst_direct
            .max((pa - num_a / den).abs())
            .max((pc - num_c / den).abs());
    }
    let ok = negative == 0 && worst_sum <= 1e-9 && worst_scale <= 1e-12 && worst_direct <= 1e-12;
    verdict(
        "fusion_correctness",
        ok,
        format!(
            "10000 inputs: |Pa+Pc-1| <= {worst_sum:.1e}, scale drift {worst_scale:.1e}, direct drift {worst_direct:.1e}, {negative} negative"
        ),
    );
}

fn pooled(r: &Run, pick: impl Fn(&advnids::experiments::DefenseRow) -> Option<f64>) -> f64 {
    let (mut hit, mut n) = (0.0, 0usize);
    for d in &r.out.results.defense {
        for row in &d.rows {
            if let Some(x) = pick(row) {
                hit += x * row.instances as f64;
                n += row.instances;
            }
        }
    }
    hit / n as f64
}

#[test]
fn defense_efficacy() {
    let r = first_run();
    let families = r.out.results.defense.len();
    let detector = pooled(r, |row| row.detector);
    let unprotected = pooled(r, |row| row.unprotected);
    let protected = pooled(r, |row| row.protected);
    let ok = families == 4 && detector >= 0.85 && protected - unprotected >= 0.40;
    verdict(
        "defense_efficacy",
        ok,
        format!(
            "{families} families: detector recall {:.1}% (>= 85%), NIDS {:.1}% unprotected -> {:.1}% protected (gain >= 40 points)",
            100.0 * detector,
            100.0 * unprotected,
            100.0 * protected
        ),
    );
}

#[test]
fn baseline_parity() {
    let r = first_run();
    let detector = pooled(r, |row| row.detector);
    let baseline = pooled(r, |row| row.baseline);
    let gap = (detector - baseline).abs();
    verdict(
        "baseline_parity",
        gap <= 0.08,
        format!(
            "detector {:.1}% vs disagreement baseline {:.1}%, gap {:.1} points (<= 8)",
            100.0 * detector,
            100.0 * baseline,
            100.0 * gap
        ),
    );
}

fn gradient_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut net = Mlp::init(&[17, 12, 12, 2], &mut rng);
    let x = Array2::from_shape_fn((5, 17), |_| rng.random::<f64>());
    let y: Vec<usize> = (0..5).map(|i| i % 2).collect();
    let analytic = net.gradients(x.view(), &y).flatten();
    let base = net.parameters();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let mut p = base.clone();
        p[i] = base[i] + h;
        net.set_parameters(&p);
        let up = net.loss(x.view(), &y);
        p[i] = base[i] - h;
        net.set_parameters(&p);
        let down = net.loss(x.view(), &y);
        let numeric = (up - down) / (2.0 * h);
        // Below 1e-6 the difference quotient is dominated by rounding noise.
        let scale = a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((a - numeric).abs() / scale);
    }
    net.set_parameters(&base);
    worst
}

#[test]
fn numerical_checks() {
    let grad = gradient_error();

    let schema = Arc::new(FeatureSchema::default_flow());
    let ds = synth_generate(
        &SynthParams::preset("ctu13", 2000).unwrap(),
        schema.clone(),
        9,
    )
    .unwrap();
    let scaler = Scaler::fit(ds.vectors().iter()).unwrap();
    let mut scale_err: f64 = 0.0;
    for v in ds.vectors() {
        let back = scaler.inverse(&scaler.transform(v).unwrap()).unwrap();
        for (a, b) in v.iter().zip(&back) {
            scale_err = scale_err.max((a - b).abs() / a.abs().max(1.0));
        }
    }

    let bounds = FeatureBounds::fit(schema.arity(), ds.vectors().iter()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut not_idempotent = 0;
    let mut invalid = 0;
    for k in 0..10_000 {
        let x = &ds.vectors()[k % ds.len()];
        let mut v: Vec<f64> = x.to_vec();
        for (i, value) in v.iter_mut().enumerate() {
            *value += rng.random_range(-2.0..2.0) * bounds.max[i].max(1.0);
        }
        let once = project(&schema, &FeatureVector::new(v), &bounds, x);
        let twice = project(&schema, &once, &bounds, x);
        if once
            .iter()
            .zip(twice.iter())
            .any(|(a, b)| a.to_bits() != b.to_bits())
        {
            not_idempotent += 1;
        }
        if !validate_instance(&schema, &once, &bounds, x).is_valid() {
            invalid += 1;
        }
    }
    let ok = grad <= 1e-4 && scale_err <= 1e-9 && not_idempotent == 0 && invalid == 0;
    verdict(
        "numerical_checks",
        ok,
        format!(
            "gradient rel. error {grad:.2e} (<= 1e-4), scaler round-trip {scale_err:.2e} (<= 1e-9), \
             projection: {not_idempotent} non-idempotent and {invalid} invalid of 10000"
        ),
    );
}

fn parse(s: &str) -> f64 {
    s.parse().unwrap()
}

#[test]
fn perturbation_feasibility() {
    let r = first_run();
    let schema = r.plan.schema().unwrap();
    let names = schema.names();
    let modifiable = schema.group_indices(FeatureGroup::Modifiable);
    let families: Vec<&FamilyResults> = r
        .out
        .results
        .transfer
        .iter()
        .chain(&r.out.results.campaign)
        .collect();
    let reported_everywhere = families.len() == 5
        && families.iter().all(|f| {
            f.perturbation.len() == 3 && f.perturbation.iter().all(|p| p.report.all_within_bounds())
        });
    let bounds: BTreeMap<&str, &FeatureBounds> = families
        .iter()
        .map(|f| (f.family.as_str(), &f.bounds))
        .collect();

    let mut pairs = csv::Reader::from_path(r.dir.join("adversarial_pairs.csv")).unwrap();
    let header = pairs.headers().unwrap().clone();
    let orig_col = |n: &str| {
        header
            .iter()
            .position(|h| h == format!("orig:{n}"))
            .unwrap()
    };
    let adv_col = |n: &str| header.iter().position(|h| h == format!("adv:{n}")).unwrap();
    let mut sums: BTreeMap<(String, String, String), (f64, f64, usize)> = BTreeMap::new();
    let (mut checked, mut outside) = (0, 0);
    for rec in pairs.records() {
        let rec = rec.unwrap();
        let family = rec[0].to_string();
        let b = bounds[family.as_str()];
        for &i in &modifiable {
            let adv = parse(&rec[adv_col(names[i])]);
            checked += 1;
            if adv > b.max[i] || adv < schema.feature(i).floor {
                outside += 1;
            }
            if &rec[3] == "true" {
                let d = (adv - parse(&rec[orig_col(names[i])])).abs();
                let e = sums
                    .entry((family.clone(), rec[1].to_string(), names[i].to_string()))
                    .or_insert((0.0, 0.0, 0));
                e.0 += d;
                e.1 = e.1.max(d);
                e.2 += 1;
            }
        }
    }

    let mut table = csv::Reader::from_path(r.dir.join("perturbation.csv")).unwrap();
    let (mut rows, mut mismatched) = (0, 0);
    for rec in table.records() {
        let rec = rec.unwrap();
        rows += 1;
        let key = (rec[0].to_string(), rec[1].to_string(), rec[2].to_string());
        let (sum, max, n) = sums.get(&key).copied().unwrap_or((0.0, 0.0, 0));
        let mean = if n == 0 { 0.0 } else { sum / n as f64 };
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(1.0);
        if !(close(mean, parse(&rec[4]))
            && close(max, parse(&rec[5]))
            && n == parse(&rec[3]) as usize)
        {
            mismatched += 1;
        }
    }
    let ok = reported_everywhere
        && checked > 0
        && outside == 0
        && rows == 5 * 3 * modifiable.len()
        && mismatched == 0;
    verdict(
        "perturbation_feasibility",
        ok,
        format!(
            "reports for {} datasets; {checked} persisted values rechecked, {outside} outside clamps; \
             {mismatched} of {rows} report rows disagree with recomputation",
            families.len()
        ),
    );
}

#[test]
fn determinism() {
    let a = first_run();
    let b = full_run("second");
    let same_results = a.out.results == b.out.results;
    let same_records = a.out.predictions == b.out.predictions && a.out.pairs == b.out.pairs;
    let same_files = a.manifest.files == b.manifest.files;
    let differing: Vec<&String> = a
        .manifest
        .files
        .iter()
        .filter(|(k, v)| b.manifest.files.get(*k) != Some(v))
        .map(|(k, _)| k)
        .collect();
    let _ = std::fs::remove_dir_all(&b.dir);
    verdict(
        "determinism",
        same_results && same_records && same_files,
        format!(
            "two runs of {}: results equal {same_results}, records equal {same_records}, {} files hashed, differing {differing:?}",
            plan_path().file_name().unwrap().to_string_lossy(),
            a.manifest.files.len()
        ),
    );
}
