use std::collections::HashMap;

use molmap::counting::estimate_background;
use molmap::model::{detection_field, GroundTruth, Molecule, Psf, PsfMode};
use molmap::phantom::{clusters, single_cluster, ClustersParams};
use molmap::scan::{
    box_statistics, build_box_system, calibrate_quantiles, default_scales, prune_minimal, select_significant, BoxSet,
    ProbeBank, ScanBox, ScoredBox, Stride,
};
use molmap::simulate::{expected_image, sample_image};
use proptest::prelude::*;
use rayon::prelude::*;

fn arb_boxes() -> impl Strategy<Value = BoxSet> {
    prop::collection::vec((0usize..12, 0usize..12, 1usize..5, 1usize..5, 0.0f64..10.0), 0..25).prop_map(|v| BoxSet {
        boxes: v
            .into_iter()
            .map(|(x, y, h1, h2, stat)| ScoredBox { b: ScanBox::new(x, y, h1, h2), stat })
            .collect(),
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pruning_is_idempotent(set in arb_boxes()) {
        let once = prune_minimal(&set);
        prop_assert_eq!(prune_minimal(&once), once);
    }

    #[test]
    fn detection_field_linear_in_brightness(
        mols in prop::collection::vec((0usize..24, 0usize..24, 0.001f64..0.2), 1..6),
        pick in 0usize..6,
    ) {
        let psf = Psf::gaussian(3.0, PsfMode::Confocal).unwrap();
        let base: Vec<Molecule> = mols.iter().map(|&(x, y, p)| Molecule { x, y, p }).collect();
        let j = pick % base.len();
        let mut doubled = base.clone();
        doubled[j].p *= 2.0;
        let a = detection_field(&GroundTruth::new(24, base).unwrap(), &psf).unwrap();
        let b = detection_field(&GroundTruth::new(24, doubled).unwrap(), &psf).unwrap();
        for px in 0..24 * 24 {
            for m in 0..a.n_molecules() {
                let want = if m == j { 2.0 * a.entry(px, m) } else { a.entry(px, m) };
                prop_assert_eq!(b.entry(px, m), want);
            }
        }
    }
}

#[test]
fn zero_background_estimate_is_at_the_floor() {
    let gt = clusters(&ClustersParams::default(), 3).unwrap();
    let psf = Psf::gaussian(4.0, PsfMode::Confocal).unwrap();
    let e = expected_image(&gt, &psf, 4, 0.0).unwrap();
    for (t, seed) in [(3000u64, 1u64), (10_000, 2)] {
        let img = sample_image(&e, t, seed).unwrap();
        let lambda = estimate_background(&img).unwrap();
        assert!(lambda <= 3.0 / t as f64, "t={t}: {lambda}");
    }
}

#[test]
fn background_recovered_within_twenty_percent() {
    let psf = Psf::gaussian(4.0, PsfMode::Confocal).unwrap();
    let gt = clusters(&ClustersParams::default(), 5).unwrap();
    let e = expected_image(&gt, &psf, 4, 0.002).unwrap();
    let worst = (0..20u64)
        .into_par_iter()
        .map(|s| {
            let img = sample_image(&e, 3000, 100 + s).unwrap();
            (estimate_background(&img).unwrap() / 0.002 - 1.0).abs()
        })
        .reduce(|| 0.0, f64::max);
    assert!(worst < 0.2, "worst relative error {worst}");
}

#[test]
fn background_ignores_an_isolated_cluster() {
    let psf = Psf::gaussian(4.0, PsfMode::Confocal).unwrap();
    let empty = expected_image(&GroundTruth::empty(64), &psf, 4, 0.002).unwrap();
    let bright = expected_image(&single_cluster(64, (20, 40), 30, 0.02).unwrap(), &psf, 4, 0.002).unwrap();
    // same seed: identical noise wherever the cluster contributes nothing
    let a = estimate_background(&sample_image(&empty, 3000, 9).unwrap()).unwrap();
    let b = estimate_background(&sample_image(&bright, 3000, 9).unwrap()).unwrap();
    assert!((b / a - 1.0).abs() < 0.03, "{a} vs {b}");
}

#[test]
fn box_statistics_are_translation_equivariant() {
    let n = 48;
    let psf = Psf::gaussian(1.5, PsfMode::Sted).unwrap();
    let scales = default_scales(n, 1.5);
    let bank = ProbeBank::new(n, &psf, &scales).unwrap();
    let system = build_box_system(n, &scales, Stride::Unit).unwrap();
    let gt = single_cluster(n, (18, 20), 6, 0.05).unwrap();
    let (dx, dy) = (4isize, 6isize);
    let shifted = gt.translated(dx, dy).unwrap();
    let stat = |g: &GroundTruth| {
        let e = expected_image(g, &psf, 4, 1e-3).unwrap();
        let rate = e.expected_plane(1, 3000);
        box_statistics(&rate, 3000, 1e-3, &bank, &system).unwrap()
    };
    let by_box = |g: &GroundTruth| -> HashMap<ScanBox, f64> { system.boxes.iter().copied().zip(stat(g)).collect() };
    let (a, b) = (by_box(&gt), by_box(&shifted));
    let margin = 8;
    let mut compared = 0;
    for (bx, v) in &a {
        let inner = |x: usize, h: usize, d: isize| x >= margin && x as isize + d + h as isize + margin as isize <= n as isize;
        if !(inner(bx.x, bx.h1, dx) && inner(bx.y, bx.h2, dy)) {
            continue;
        }
        let moved = ScanBox::new((bx.x as isize + dx) as usize, (bx.y as isize + dy) as usize, bx.h1, bx.h2);
        if let Some(w) = b.get(&moved) {
            assert!((v - w).abs() <= 1e-8 * v.abs().max(1.0), "{bx:?}: {v} vs {w}");
            compared += 1;
        }
    }
    assert!(compared > 100, "only {compared} interior boxes compared");
}

#[test]
fn detection_power_grows_with_pulses() {
    let n = 32;
    let psf = Psf::gaussian(1.0, PsfMode::Sted).unwrap();
    let scales = default_scales(n, 1.0);
    let bank = ProbeBank::new(n, &psf, &scales).unwrap();
    let system = build_box_system(n, &scales, Stride::Half).unwrap();
    let (at, bg) = ((15, 17), 5e-4);
    let gt = single_cluster(n, at, 1, 0.01).unwrap();
    let e = expected_image(&gt, &psf, 4, bg).unwrap();
    let reps = 200;
    let power: Vec<f64> = [250u64, 1000, 4000]
        .iter()
        .map(|&t| {
            let cal = calibrate_quantiles(&bank, &system, t, 4, bg, 0.1, 300, 7).unwrap();
            let hits = (0..reps)
                .into_par_iter()
                .filter(|&r| {
                    let img = sample_image(&e, t, 5000 + r as u64).unwrap();
                    select_significant(&img, &bank, &system, &cal)
                        .unwrap()
                        .boxes
                        .iter()
                        .any(|b| b.b.contains_pixel(at.0, at.1))
                })
                .count();
            hits as f64 / reps as f64
        })
        .collect();
    let se = (0.25 / reps as f64).sqrt();
    assert!(power[1] >= power[0] - 2.0 * se && power[2] >= power[1] - 2.0 * se, "{power:?}");
    assert!(power[2] > power[0], "{power:?}");
}
