use mcc_core::cell::{amtf_eval, ordering_check, surface_grid, TransferFunctionSpec, Variant};
use proptest::prelude::*;

fn spec(v: Variant) -> TransferFunctionSpec {
    TransferFunctionSpec::new(v)
}

#[test]
fn proposed_hgf_reference_points() {
    let s = spec(Variant::ProposedHgf);
    assert_eq!(amtf_eval(1.0, 1.0, &s).unwrap(), 1.0);
    // T = 0 and T = 1/2 evaluated by hand: exp(−1/(2σ²)), exp(−1/(8σ²))
    let y10 = amtf_eval(1.0, 0.0, &s).unwrap();
    let y01 = amtf_eval(0.0, 1.0, &s).unwrap();
    assert!((y10 - (-1.0f64 / 0.245).exp()).abs() < 1e-15);
    assert!((y01 - (-0.25f64 / 0.245).exp()).abs() < 1e-15);
    assert!((y10 - 0.0169).abs() < 5e-5);
    assert!((y01 - 0.3604).abs() < 5e-5);
}

#[test]
fn xnor_corners() {
    let s = spec(Variant::Xnor);
    assert_eq!(amtf_eval(0.0, 0.0, &s).unwrap(), 1.0);
    assert_eq!(amtf_eval(1.0, 0.0, &s).unwrap(), 0.0);
    assert_eq!(amtf_eval(1.0, 1.0, &s).unwrap(), 1.0);
    assert_eq!(amtf_eval(0.0, 1.0, &s).unwrap(), 0.0);
}

#[test]
fn zero_gain_rf_dominant_surface_is_constant() {
    let mut s = spec(Variant::RfDominant);
    s.gain = 0.0;
    let g = surface_grid(&s, 7).unwrap();
    assert!(g.y.iter().flatten().all(|&y| y == 0.5));
}

#[test]
fn grid_corners_match_point_evaluation() {
    for v in Variant::ALL {
        let s = spec(v);
        let g = surface_grid(&s, 9).unwrap();
        for (i, j) in [(0, 0), (0, 8), (8, 0), (8, 8)] {
            let (r, c) = (g.r_axis[i], g.c_axis[j]);
            assert_eq!(g.y[i][j], amtf_eval(r, c, &s).unwrap(), "{v:?} at ({r},{c})");
        }
    }
}

#[test]
fn proposed_hgf_is_monotone_in_c_on_every_row() {
    let g = surface_grid(&spec(Variant::ProposedHgf), 51).unwrap();
    for row in &g.y {
        assert!(row.windows(2).all(|w| w[1] >= w[0]));
    }
}

#[test]
fn ordering_checks() {
    for v in [Variant::ProposedHgf, Variant::ReluThreshold, Variant::RfDominant, Variant::WeakAmplify] {
        let report = ordering_check(&spec(v), 41).unwrap();
        assert!(report.passed(), "{v:?}: {:?}", report.violations);
        assert!(!report.checked.is_empty());
    }
    // kay-modulatory lets strong R fire without context, so the proposed
    // ordering is not defined for it
    assert!(ordering_check(&spec(Variant::KayModulatory), 11).is_err());
    let weak = surface_grid(&spec(Variant::WeakAmplify), 41).unwrap();
    assert!(weak.max() < 0.5);
}

#[test]
fn csv_export_layout() {
    let g = surface_grid(&spec(Variant::ProposedHgf), 3).unwrap();
    let csv = g.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "r,c,Y");
    assert_eq!(lines.len(), 10);
    assert_eq!(lines[1], "0,0,0.0168799");
    assert_eq!(lines[9], "1,1,1");
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.csv");
    g.write_csv(&path).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), csv);
}

proptest! {
    #[test]
    fn every_variant_maps_into_unit_interval(r in 0.0f64..=1.0, c in 0.0f64..=1.0) {
        for v in Variant::ALL {
            let y = amtf_eval(r, c, &spec(v)).unwrap();
            prop_assert!((0.0..=1.0).contains(&y), "{:?}: {}", v, y);
        }
    }

    #[test]
    fn proposed_hgf_monotone_and_silent_without_context(
        r in 0.0f64..=1.0, c in 0.0f64..=1.0, dr in 0.0f64..=1.0, dc in 0.0f64..=1.0,
    ) {
        let s = spec(Variant::ProposedHgf);
        let y = |r: f64, c: f64| amtf_eval(r, c, &s).unwrap();
        let (r2, c2) = ((r + dr).min(1.0), (c + dc).min(1.0));
        prop_assert!(y(r, c2) >= y(r, c));
        if c > 0.0 {
            prop_assert!(y(r2, c) >= y(r, c));
        }
        prop_assert!(y(r, 0.0) <= 0.02);
    }

    #[test]
    fn xnor_is_symmetric_under_complement(r in 0.0f64..=1.0, c in 0.0f64..=1.0) {
        let s = spec(Variant::Xnor);
        let a = amtf_eval(r, c, &s).unwrap();
        let b = amtf_eval(1.0 - r, 1.0 - c, &s).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }
}
