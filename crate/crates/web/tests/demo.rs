use atlas_core::counterfactual::planted::PlantedConfig;
use atlas_web::{pattern, pattern_of_window, tile, tile_mask, Planted};
use proptest::prelude::*;

fn disc(w: usize, h: usize, r: f64) -> Vec<u8> {
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    (0..h)
        .flat_map(|y| (0..w).map(move |x| u8::from(((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt() < r)))
        .collect()
}

#[test]
fn full_mask_tiles_on_the_stride_grid() {
    let t = tile(&vec![1; 100 * 60], 100, 60, 20, 0, 0.9, 0).unwrap();
    assert_eq!(t.status, "ok");
    assert_eq!(t.stride, 14);
    let xs: Vec<usize> = t.tiles.iter().filter(|c| c.y == 0).map(|c| c.x).collect();
    assert_eq!(xs, [0, 14, 28, 42, 56, 70]);
    assert!(t.tiles.iter().all(|c| c.coverage == 1.0));
}

#[test]
fn small_mask_reports_too_small() {
    let v: serde_json::Value = serde_json::from_str(&tile_mask(&[1; 16], 4, 4, 8, -1, 0.9, 0)).unwrap();
    assert_eq!(v["status"], "too_small");
    assert_eq!(v["tiles"].as_array().unwrap().len(), 0);
    assert_eq!(v["max_jitter"], 1);
}

#[test]
fn blank_window_is_sparse() {
    let p = pattern(&[0; 64], 8, 8).unwrap();
    assert_eq!(p.phrase, "minimal sparse distribution");
    let v: serde_json::Value = serde_json::from_str(&pattern_of_window(&[200; 64], 8, 8)).unwrap();
    assert_eq!(v["pattern"]["category"], "uniform");
    assert_eq!(v["pattern"]["density"], "extensive");
}

fn planted() -> Planted {
    Planted::with_config(&PlantedConfig::default()).unwrap()
}

#[test]
fn image_only_fusion_leaves_rankings_alone() {
    let c = planted().compose(1.0, 50, "N0", "N2").unwrap();
    assert_eq!(c.identical, c.queries);
    for s in &c.stages {
        assert_eq!(s.original, s.counterfactual);
    }
    assert!(c.shift.iter().all(|b| b.mean_d == 0.0));
}

#[test]
fn staging_edit_moves_composition_and_the_planted_channel() {
    let c = planted().compose(0.6, 50, "N0", "N2").unwrap();
    let n2 = c.stages.iter().find(|s| s.stage == "N2").unwrap();
    assert!(n2.counterfactual > n2.original + 0.3);
    assert!(n2.significant);
    let target = &c.shift[c.target_cluster];
    for b in &c.shift {
        if b.cluster != c.target_cluster {
            assert!(target.mean_d > b.mean_d.abs() * 5.0, "{:?}", c.shift);
        }
    }
}

#[test]
fn sweep_spans_the_unit_interval() {
    let rows = planted().sweep(50, "N0", "N2", 4).unwrap();
    assert_eq!(rows.iter().map(|r| r.0).collect::<Vec<_>>(), [0.0, 0.25, 0.5, 0.75, 1.0]);
    let last = rows.last().unwrap();
    assert_eq!(last.1, last.2);
    assert!(rows[0].2 > rows[0].1);
}

#[test]
fn unknown_stage_is_an_error() {
    assert!(planted().compose(0.5, 10, "N0", "N9").is_err());
}

proptest! {
    #[test]
    fn tiles_stay_inside_the_image_and_above_coverage(
        w in 16usize..80,
        h in 16usize..80,
        r in 4.0f64..50.0,
        patch in 4usize..16,
        jitter in -1i32..4,
        min_cov in 0.0f64..0.99,
        seed in 0u64..1000,
    ) {
        let mask = disc(w, h, r);
        let t = tile(&mask, w, h, patch, jitter, min_cov, seed).unwrap();
        for c in &t.tiles {
            prop_assert_eq!(c.size, patch);
            prop_assert!(c.x + patch <= w && c.y + patch <= h);
            prop_assert!(c.coverage > min_cov);
        }
        let again = tile(&mask, w, h, patch, jitter, min_cov, seed).unwrap();
        prop_assert_eq!(
            t.tiles.iter().map(|c| (c.x, c.y)).collect::<Vec<_>>(),
            again.tiles.iter().map(|c| (c.x, c.y)).collect::<Vec<_>>()
        );
    }
}
