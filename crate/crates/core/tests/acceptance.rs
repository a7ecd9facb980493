//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any criterion fails.

mod common;

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use poleimg::detect::{associate_detections, detect_poles, DetectorParams, PoleDetection};
use poleimg::eval::{
    evaluate_descriptors, iris_baseline_distance, squared_l2, DbEntry, DescriptorDB, EvalReport, RECALL_KS,
};
use poleimg::image::{canonical_shift, canonicalize, render_pole_image, PoleImage, PoleImageParams};
use poleimg::pipeline::{layout, run_repro, Method, PipelineConfig, ReproReport};
use poleimg::synth::{generate_scene, sample_session, SynthConfig};
use poleimg::training::nt_xent_loss;

use common::{gradient_suite, rng, unit, GRAD_TOLERANCE, MIN_SAMPLES};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let suite = gradient_suite();
    let elapsed = start.elapsed();
    let worst = suite.iter().map(|(_, r)| r.max_relative_error).fold(0.0, f64::max);
    let mut bad: Vec<String> = suite
        .iter()
        .filter(|(_, r)| r.max_relative_error >= GRAD_TOLERANCE)
        .map(|(n, r)| format!("{n} err {:.2e}", r.max_relative_error))
        .collect();
    // Bias tensors smaller than the sample floor are checked exhaustively.
    let thin: Vec<&String> =
        suite.iter().filter(|(n, r)| r.samples < MIN_SAMPLES && !n.ends_with(".bias")).map(|(n, _)| n).collect();
    if !thin.is_empty() {
        bad.push(format!("too few samples: {thin:?}"));
    }
    if elapsed > Duration::from_secs(120) {
        bad.push(format!("runtime {elapsed:?}"));
    }
    outcome(
        bad.is_empty(),
        format!("{} checks, worst relative error {worst:.2e}, {:.1}s {}", suite.len(), elapsed.as_secs_f64(), bad.join("; ")),
    )
}

fn nt_xent_collapse() -> Outcome {
    let mut detail = Vec::new();
    let mut pass = true;
    for n in [2usize, 8] {
        let e = vec![unit(&mut rng(50), 16); 2 * n];
        let (loss, _) = nt_xent_loss(&e, 0.07).unwrap();
        let expected = ((2 * n - 1) as f64).ln();
        pass &= (loss - expected).abs() < 1e-9;
        detail.push(format!("N={n}: {loss:.12} vs ln({}) = {expected:.12}", 2 * n - 1));
    }
    outcome(pass, detail.join(", "))
}

fn polar_equivariance() -> Outcome {
    let raw = PoleImageParams { canonicalize: false, ..PoleImageParams::default() };
    let canon = PoleImageParams { canonicalize: true, ..PoleImageParams::default() };
    let mut failures = Vec::new();
    let mut canon_checked = 0;
    for seed in 0..20u64 {
        let mut g = rng(200 + seed);
        let pole = PoleDetection {
            center_x: g.uniform(-50.0, 50.0),
            center_y: g.uniform(-50.0, 50.0),
            base_z: g.uniform(-1.0, 1.0),
            vertical_extent: 5.0,
            support_count: 100,
        };
        let k = g.below(360) as u32;
        let (base, rotated) = common::polar_cloud_pair(seed, &pole, k, raw.radius, 400);
        let a = render_pole_image(&base, &pole, &raw);
        let b = render_pole_image(&rotated, &pole, &raw);
        if b != a.shifted(i64::from(k)) {
            failures.push(format!("seed {seed}: raw image is not a {k}-column shift"));
        }
        if canonical_shift(&a).is_some() {
            canon_checked += 1;
            if render_pole_image(&rotated, &pole, &canon) != render_pole_image(&base, &pole, &canon) {
                failures.push(format!("seed {seed}: canonical images differ"));
            }
            if canonicalize(&b) != canonicalize(&a) {
                failures.push(format!("seed {seed}: canonicalize not invariant"));
            }
        }
    }
    let pass = failures.is_empty() && canon_checked > 0;
    outcome(pass, format!("20 clouds, {canon_checked} with a defined canonical origin {}", failures.join("; ")))
}

/// Ranks recomputed from a full distance table: the rank of a query is one
/// plus the number of eligible entries ordered strictly before its best
/// correct entry under (distance, index).
fn brute_force_report(queries: &DescriptorDB, db: &DescriptorDB) -> (Vec<f64>, f64) {
    let mut ranks = Vec::new();
    for q in &queries.entries {
        let table: Vec<(f64, usize, bool)> = db
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.session_id != q.session_id)
            .map(|(i, e)| (squared_l2(&q.values, &e.values), i, e.pole_id == q.pole_id))
            .collect();
        let best = table
            .iter()
            .filter(|t| t.2)
            .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)))
            .unwrap();
        let before = table.iter().filter(|t| t.0 < best.0 || (t.0 == best.0 && t.1 < best.1)).count();
        ranks.push(before + 1);
    }
    let n = ranks.len() as f64;
    let recalls = RECALL_KS.iter().map(|&k| ranks.iter().filter(|&&r| r <= k).count() as f64 / n).collect();
    let mrr = ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n;
    (recalls, mrr)
}

fn metric_oracle() -> Outcome {
    let mut mismatches = 0;
    let mut ties = 0;
    for inst in 0..50u64 {
        let mut g = rng(300 + inst);
        // Coarse integer coordinates make distance ties common.
        let mut coord = || g.below(3) as f32;
        let mut queries = DescriptorDB::new(3);
        let mut db = DescriptorDB::new(3);
        for p in 0..20u64 {
            queries.push(DbEntry { pole_id: p, session_id: 0, values: vec![coord(), coord(), coord()] }).unwrap();
        }
        for p in 0..20u64 {
            db.push(DbEntry { pole_id: p, session_id: 1, values: vec![coord(), coord(), coord()] }).unwrap();
        }
        let report: EvalReport = evaluate_descriptors(&queries, &db).unwrap();
        let (recalls, mrr) = brute_force_report(&queries, &db);
        let got: Vec<f64> = RECALL_KS.iter().map(|&k| report.recall(k)).collect();
        if got != recalls || report.mrr != mrr {
            mismatches += 1;
        }
        for q in &queries.entries {
            let d: Vec<f64> = db.entries.iter().map(|e| squared_l2(&q.values, &e.values)).collect();
            let mut sorted = d.clone();
            sorted.sort_by(f64::total_cmp);
            ties += sorted.windows(2).filter(|w| w[0] == w[1]).count();
        }
    }
    outcome(mismatches == 0 && ties > 0, format!("50 instances of 20x20, {mismatches} mismatches, {ties} tied distance pairs"))
}

fn random_image(seed: u64) -> PoleImage {
    let params = PoleImageParams { canonicalize: false, ..PoleImageParams::default() };
    let mut g = rng(400 + seed);
    let p = 0.05 + 0.3 * g.next_f64();
    let grid = (0..params.rows * params.cols).map(|_| u8::from(g.bernoulli(p))).collect();
    PoleImage::from_grid(grid, params, None, 0).unwrap()
}

fn baseline_invariance() -> Outcome {
    let mut failures = 0;
    for i in 0..20 {
        let a = random_image(i);
        for s in 0..a.cols() as i64 {
            if iris_baseline_distance(&a, &a.shifted(s)).unwrap() != 0.0 {
                failures += 1;
            }
        }
    }
    let mut asym = 0;
    for i in 0..100 {
        let (a, b) = (random_image(1000 + 2 * i), random_image(1001 + 2 * i));
        if iris_baseline_distance(&a, &b).unwrap() != iris_baseline_distance(&b, &a).unwrap() {
            asym += 1;
        }
    }
    outcome(
        failures == 0 && asym == 0,
        format!("20 images x 360 shifts: {failures} non-zero; 100 pairs: {asym} asymmetric"),
    )
}

fn detector_quality() -> Outcome {
    let params = DetectorParams::default();
    let mut worst = (1.0f64, 1.0f64);
    let mut slowest = Duration::ZERO;
    for seed in 0..10 {
        let cfg = SynthConfig { n_poles: 50, seed, ..SynthConfig::default() };
        let (scene, truth) = generate_scene(&cfg).unwrap();
        let cloud = sample_session(&scene, 0);
        let start = Instant::now();
        let dets = detect_poles(&cloud, &params);
        let a = associate_detections(&dets, &truth, 0.5).unwrap();
        slowest = slowest.max(start.elapsed());
        worst = (worst.0.min(a.precision), worst.1.min(a.recall));
    }
    let pass = worst.0 >= 0.95 && worst.1 >= 0.95 && slowest < Duration::from_secs(60);
    outcome(
        pass,
        format!(
            "10 scenes x 50 poles: min precision {:.3}, min recall {:.3}, slowest {:.2}s",
            worst.0,
            worst.1,
            slowest.as_secs_f64()
        ),
    )
}

fn ordering(report: &ReproReport, elapsed: Duration) -> Outcome {
    let r1 = |m| report.row(m, 0).map_or(f64::NAN, |r| r.recall_at_1);
    let (cl, sl, base) = (r1(Method::Cl), r1(Method::Sl), r1(Method::Baseline));
    let pass = cl >= sl && sl >= base && cl >= 0.90 && cl - base >= 0.10 && elapsed < Duration::from_secs(1800);
    outcome(
        pass,
        format!(
            "Recall@1 CL {cl:.4}, SL {sl:.4}, baseline {base:.4}; CL - baseline {:.4}; runtime {:.0}s",
            cl - base,
            elapsed.as_secs_f64()
        ),
    )
}

fn learning_signal(report: &ReproReport) -> Outcome {
    let initial = report.cl_initial_val_recall_at_1;
    let last = report.cl_final_val_recall_at_1().unwrap_or(f64::NAN);
    outcome(last - initial >= 0.30, format!("val Recall@1 epoch 0 {initial:.4} -> epoch 30 {last:.4}"))
}

fn same_bytes(a: &Path, b: &Path, rel: &str) -> bool {
    match (std::fs::read(a.join(rel)), std::fs::read(b.join(rel))) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

fn determinism(a: &Path, b: &Path) -> Outcome {
    let mut files: Vec<String> = vec![
        layout::CL_CHECKPOINT.into(),
        layout::SL_CHECKPOINT.into(),
        layout::CL_DB.into(),
        layout::SL_DB.into(),
        layout::TABLE.into(),
        layout::REPORT.into(),
    ];
    for m in ["baseline", "sl", "cl"] {
        files.push(format!("{}/{m}_0to1.json", layout::EVAL));
        files.push(format!("{}/{m}_1to0.json", layout::EVAL));
    }
    let differing: Vec<&String> = files.iter().filter(|f| !same_bytes(a, b, f)).collect();
    outcome(differing.is_empty(), format!("{} artifacts compared, differing: {differing:?}", files.len()))
}

fn chance_level() -> Outcome {
    let mut total = 0.0;
    for seed in 0..20 {
        let mut g = rng(500 + seed);
        let mut q = DescriptorDB::new(128);
        let mut d = DescriptorDB::new(128);
        for p in 0..100 {
            let v = |g: &mut _| unit(g, 128).into_iter().map(|x| x as f32).collect();
            q.push(DbEntry { pole_id: p, session_id: 0, values: v(&mut g) }).unwrap();
            d.push(DbEntry { pole_id: p, session_id: 1, values: v(&mut g) }).unwrap();
        }
        total += evaluate_descriptors(&q, &d).unwrap().recall(1);
    }
    let mean = total / 20.0;
    outcome((0.0..=0.05).contains(&mean), format!("mean Recall@1 over 20 seeds {mean:.4}"))
}

fn main() -> ExitCode {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut record = |name, o: Outcome| {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((name, o));
    };

    record("[1] gradient correctness", gradients());
    record("[2] NT-Xent collapse law", nt_xent_collapse());
    record("[3] polar equivariance and invariance", polar_equivariance());
    record("[4] metric oracle equivalence", metric_oracle());
    record("[5] baseline invariance", baseline_invariance());
    record("[6] detector quality", detector_quality());

    let dirs = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let config = PipelineConfig::default();
    let start = Instant::now();
    let first = run_repro(&config, dirs.0.path(), &mut |_| {});
    let elapsed = start.elapsed();
    match &first {
        Ok(report) => {
            print!("{}", report.table());
            record("[7] ordering claim", ordering(report, elapsed));
            record("[8] learning signal", learning_signal(report));
        }
        Err(e) => {
            record("[7] ordering claim", outcome(false, format!("repro failed: {e}")));
            record("[8] learning signal", outcome(false, format!("repro failed: {e}")));
        }
    }
    let second = run_repro(&config, dirs.1.path(), &mut |_| {});
    let det = match (&first, &second) {
        (Ok(_), Ok(_)) => determinism(dirs.0.path(), dirs.1.path()),
        (_, Err(e)) | (Err(e), _) => outcome(false, format!("repro failed: {e}")),
    };
    record("[9] determinism", det);
    record("[10] chance-level sanity", chance_level());

    let failed = results.iter().filter(|(_, o)| !o.pass).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
