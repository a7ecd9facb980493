//! Property tests for the detector, pole images, retrieval metrics and losses.

mod common;

use poleimg::cloud::{Point3, PointCloud};
use poleimg::detect::{detect_poles, DetectorParams, PoleDetection};
use poleimg::eval::{evaluate_with, iris_baseline_distance, rank, DbEntry, DescriptorDB, ObsKey};
use poleimg::image::{canonicalize, circular_mean_deg, render_pole_image, PoleImage, PoleImageParams};
use poleimg::rng::{purpose, SplitMix64};
use poleimg::synth::{generate_scene, sample_session, SynthConfig};
use poleimg::training::{nt_xent_loss, sl_bce_loss, SlCalibration};
use proptest::prelude::*;

/// Grid of 2^-12 so translated coordinates and cell indices stay exact.
const QUANTUM: f64 = 1.0 / 4096.0;

fn small_scene_cloud(seed: u64) -> PointCloud {
    let config = SynthConfig {
        n_poles: 6,
        area_side: 40.0,
        points_per_surface_unit: 60.0,
        seed,
        ..SynthConfig::default()
    };
    let (scene, _) = generate_scene(&config).unwrap();
    let mut cloud = sample_session(&scene, 0);
    for p in &mut cloud.points {
        p.x = (p.x / QUANTUM).round() * QUANTUM;
        p.y = (p.y / QUANTUM).round() * QUANTUM;
    }
    cloud
}

fn translated(cloud: &PointCloud, dx: f64, dy: f64) -> PointCloud {
    let mut out = cloud.clone();
    for p in &mut out.points {
        p.x += dx;
        p.y += dy;
    }
    out
}

fn origin_pole() -> PoleDetection {
    PoleDetection { center_x: 0.0, center_y: 0.0, base_z: 0.0, vertical_extent: 8.0, support_count: 0 }
}

fn random_cloud(seed: u64, n: usize) -> PointCloud {
    let mut g = SplitMix64::stream(seed, purpose::TEST, 7);
    let mut cloud = PointCloud::new(0);
    let centre = g.uniform(0.0, std::f64::consts::TAU);
    for _ in 0..n {
        let a = centre + 0.8 * g.normal();
        let r = g.uniform(0.1, 2.9);
        cloud.points.push(Point3::new(r * a.cos(), r * a.sin(), g.uniform(0.0, 8.0)));
    }
    cloud
}

fn random_image(seed: u64, rows: usize, cols: usize, density: f64) -> PoleImage {
    let mut g = SplitMix64::stream(seed, purpose::TEST, 8);
    let grid = (0..rows * cols).map(|_| u8::from(g.bernoulli(density))).collect();
    let params = PoleImageParams { rows, cols, ..PoleImageParams::default() };
    PoleImage::from_grid(grid, params, None, 0).unwrap()
}

fn unit_vectors(seed: u64, n: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut g = SplitMix64::stream(seed, purpose::TEST, 9);
    (0..n).map(|_| common::unit(&mut g, dim)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn detector_translation_by_whole_cells(seed in 0u64..1000, kx in -40i64..40, ky in -40i64..40) {
        let params = DetectorParams::default();
        let cloud = small_scene_cloud(seed);
        let (dx, dy) = (kx as f64 * params.cell_size, ky as f64 * params.cell_size);
        let before = detect_poles(&cloud, &params);
        let after = detect_poles(&translated(&cloud, dx, dy), &params);
        prop_assert_eq!(before.len(), after.len());
        for (a, b) in before.iter().zip(&after) {
            prop_assert!((a.center_x + dx - b.center_x).abs() <= 1e-9);
            prop_assert!((a.center_y + dy - b.center_y).abs() <= 1e-9);
            prop_assert_eq!(a.support_count, b.support_count);
        }
    }

    #[test]
    fn detector_translation_within_one_cell(seed in 0u64..1000, dx in -10.0f64..10.0, dy in -10.0f64..10.0) {
        let params = DetectorParams::default();
        let cloud = small_scene_cloud(seed);
        let before = detect_poles(&cloud, &params);
        let after = detect_poles(&translated(&cloud, dx, dy), &params);
        for a in &before {
            let nearest = after
                .iter()
                .map(|b| (a.center_x + dx - b.center_x).hypot(a.center_y + dy - b.center_y))
                .fold(f64::INFINITY, f64::min);
            prop_assert!(nearest <= params.cell_size, "detection moved by {nearest}");
        }
    }

    #[test]
    fn raising_min_support_never_adds_detections(seed in 0u64..1000, low in 1usize..60, extra in 0usize..200) {
        let cloud = small_scene_cloud(seed);
        let at = |m: usize| detect_poles(&cloud, &DetectorParams { min_support_points: m, ..DetectorParams::default() }).len();
        prop_assert!(at(low + extra) <= at(low));
    }

    #[test]
    fn adding_points_keeps_occupied_cells(seed in 0u64..1000, n in 1usize..300, m in 1usize..300) {
        let params = PoleImageParams { canonicalize: false, ..PoleImageParams::default() };
        let base = random_cloud(seed, n);
        let mut grown = base.clone();
        grown.points.extend(random_cloud(seed + 5000, m).points);
        let a = render_pole_image(&base, &origin_pole(), &params);
        let b = render_pole_image(&grown, &origin_pole(), &params);
        prop_assert!(a.grid().iter().zip(b.grid()).all(|(&x, &y)| x <= y));
    }

    #[test]
    fn canonicalize_is_idempotent(seed in 0u64..5000, n in 1usize..400) {
        let params = PoleImageParams { canonicalize: false, ..PoleImageParams::default() };
        let once = canonicalize(&render_pole_image(&random_cloud(seed, n), &origin_pole(), &params));
        let twice = canonicalize(&once);
        let Some(mean) = circular_mean_deg(&once) else {
            prop_assert_eq!(twice, once);
            return Ok(());
        };
        // Column boundaries of the nearest-center rounding sit at whole degrees.
        let to_boundary = (mean - mean.round()).abs();
        if to_boundary >= 1e-6 {
            prop_assert_eq!(twice, once);
        } else {
            prop_assert!([-1, 0, 1].iter().any(|&s| once.shifted(s) == twice));
        }
    }

    #[test]
    fn polar_rotation_shifts_columns(seed in 0u64..1000, k in 0u32..360) {
        let params = PoleImageParams { canonicalize: false, ..PoleImageParams::default() };
        let pole = PoleDetection { center_x: 3.5, center_y: -2.0, ..origin_pole() };
        let (base, rotated) = common::polar_cloud_pair(seed, &pole, k, params.radius, 200);
        let a = render_pole_image(&base, &pole, &params);
        let b = render_pole_image(&rotated, &pole, &params);
        prop_assert_eq!(a.shifted(i64::from(k)), b);
    }

    #[test]
    fn baseline_symmetric_and_shift_invariant(seed in 0u64..1000, s in -400i64..400) {
        let a = random_image(seed, 16, 360, 0.1);
        let b = random_image(seed + 1, 16, 360, 0.1);
        let d = iris_baseline_distance(&a, &b).unwrap();
        prop_assert_eq!(d, iris_baseline_distance(&b, &a).unwrap());
        prop_assert_eq!(d, iris_baseline_distance(&a, &b.shifted(s)).unwrap());
    }

    #[test]
    fn recall_monotone_and_mrr_bounded(seed in 0u64..1000, n in 1usize..40) {
        let mut g = SplitMix64::stream(seed, purpose::TEST, 10);
        let keys = |session| (0..n as u64).map(|pole_id| ObsKey { pole_id, session_id: session }).collect::<Vec<_>>();
        let (queries, db) = (keys(0), keys(1));
        let dist: Vec<f64> = (0..n * n).map(|_| g.below(4) as f64).collect();
        let report = evaluate_with(&queries, &db, |q, d| dist[q * n + d]).unwrap();
        let (r1, r5, r10) = (report.recall(1), report.recall(5), report.recall(10));
        prop_assert!(r1 <= r5 && r5 <= r10 && r10 <= 1.0);
        prop_assert!(r1 <= report.mrr && report.mrr <= 1.0);
        prop_assert!(report.per_query_rank.iter().all(|q| q.rank >= 1 && q.rank <= n));
    }

    #[test]
    fn nt_xent_is_positive_and_slot_symmetric(seed in 0u64..1000, n in 2usize..6, rot in 1usize..6) {
        let tau = 0.1;
        let z = unit_vectors(seed, 2 * n, 8);
        let (loss, _) = nt_xent_loss(&z, tau).unwrap();
        prop_assert!(loss > 0.0);
        let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
        let permuted: Vec<Vec<f64>> =
            perm.iter().map(|&i| z[i].clone()).chain(perm.iter().map(|&i| z[n + i].clone())).collect();
        let (loss_perm, _) = nt_xent_loss(&permuted, tau).unwrap();
        prop_assert!((loss - loss_perm).abs() <= 1e-12 * loss.abs().max(1.0));
    }

    #[test]
    fn sl_loss_monotone_in_cosine(a in -1.0f64..1.0, b in -1.0f64..1.0) {
        prop_assume!((a - b).abs() > 1e-6);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let pair = |c: f64| (vec![1.0, 0.0], vec![c, (1.0 - c * c).sqrt()]);
        let calib = SlCalibration::default();
        let loss = |c: f64, label| {
            let (x, y) = pair(c);
            sl_bce_loss(&x, &y, label, calib).unwrap().loss
        };
        prop_assert!(loss(hi, 1) < loss(lo, 1));
        prop_assert!(loss(hi, 0) > loss(lo, 0));
    }
}

#[test]
fn l2_rank_matches_descending_dot_product() {
    let vectors = unit_vectors(77, 101, 16);
    let mut db = DescriptorDB::new(16);
    for (i, v) in vectors[1..].iter().enumerate() {
        db.push(DbEntry { pole_id: i as u64, session_id: 1, values: v.iter().map(|&x| x as f32).collect() }).unwrap();
    }
    let query: Vec<f32> = vectors[0].iter().map(|&x| x as f32).collect();
    let by_l2 = rank(&query, &db).unwrap();
    let dot = |e: &DbEntry| e.values.iter().zip(&query).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum::<f64>();
    let mut by_dot: Vec<usize> = (0..db.len()).collect();
    by_dot.sort_by(|&a, &b| dot(&db.entries[b]).total_cmp(&dot(&db.entries[a])));
    assert_eq!(by_l2, by_dot);
}
