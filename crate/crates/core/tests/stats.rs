use proptest::prelude::*;
use rarefy::raster::{GridGeometry, ParcelMask, RasterGrid, DEFAULT_NODATA};
use rarefy::stats::{f_upper_tail, group_by_classes, one_way_anova, pearson};
use rarefy::vigor::ClassMap;
use statrs::distribution::{ContinuousCDF, FisherSnedecor, StudentsT};

#[test]
fn one_numerator_df_matches_two_sided_t() {
    for d in [1usize, 2, 5, 15, 31, 63, 200] {
        let t = StudentsT::new(0.0, 1.0, d as f64).unwrap();
        for f in [0.01, 0.5, 1.0, 4.0, 25.0, 150.0] {
            let ours = f_upper_tail(f, 1, d).unwrap();
            let theirs = 2.0 * t.sf(f64::sqrt(f));
            assert!((ours - theirs).abs() < 1e-9, "d={d} f={f}: {ours} vs {theirs}");
        }
    }
}

#[test]
fn closed_forms_for_small_df() {
    // d1 = d2 = 2: P(F > f) = 1 / (1 + f)
    for f in [0.0, 0.3, 1.0, 9.0] {
        assert!((f_upper_tail(f, 2, 2).unwrap() - 1.0 / (1.0 + f)).abs() < 1e-14);
    }
    // d1 = 1, d2 = 1: Cauchy; P(F > f) = 1 - (2/pi) atan(sqrt f)
    for f in [0.2, 1.0, 7.0] {
        let exact = 1.0 - 2.0 / std::f64::consts::PI * f64::sqrt(f).atan();
        assert!((f_upper_tail(f, 1, 1).unwrap() - exact).abs() < 1e-13);
    }
}

proptest! {
    #[test]
    fn agrees_with_reference_distribution(f in 0.0f64..60.0, d1 in 1usize..12, d2 in 1usize..120) {
        let reference = FisherSnedecor::new(d1 as f64, d2 as f64).unwrap().sf(f);
        let ours = f_upper_tail(f, d1, d2).unwrap();
        prop_assert!((ours - reference).abs() < 1e-10, "{} vs {}", ours, reference);
    }

    #[test]
    fn tail_decreases_in_f(f in 0.0f64..50.0, step in 1e-3f64..5.0, d1 in 1usize..6, d2 in 2usize..80) {
        prop_assert!(f_upper_tail(f + step, d1, d2).unwrap() <= f_upper_tail(f, d1, d2).unwrap());
    }

    #[test]
    fn sums_of_squares_decompose(groups in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 2..20), 2..6)) {
        let t = one_way_anova(&groups).unwrap();
        prop_assert!((t.ss_total - (t.ss_classes + t.ss_error)).abs() <= 1e-9 * t.ss_total.max(1e-12));
        prop_assert_eq!(t.df_total, t.df_classes + t.df_error);
        prop_assert!((t.ms_classes - t.ss_classes / t.df_classes as f64).abs() <= 1e-15 * t.ms_classes.max(1.0));
        prop_assert!((0.0..=1.0).contains(&t.p_value));
    }

    #[test]
    fn pearson_affine_and_sign(
        pairs in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 3..40),
        a in 0.1f64..10.0,
        b in -4.0f64..4.0,
    ) {
        let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let Ok(r) = pearson(&x, &y) else { return Ok(()) };
        let xs: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        let neg: Vec<f64> = y.iter().map(|v| -v).collect();
        prop_assert!((pearson(&xs, &y).unwrap() - r).abs() < 1e-9);
        prop_assert!((pearson(&x, &neg).unwrap() + r).abs() < 1e-12);
    }
}

#[test]
fn groups_partition_each_parcel() {
    let g = GridGeometry::new(3, 4, 10.0, 0.0, 0.0);
    let values = vec![0.1, 0.2, 0.3, 0.4, 0.5, DEFAULT_NODATA, 0.7, 0.8, 0.9, 1.0, 0.11, 0.12];
    let raster = RasterGrid::new(g, values, DEFAULT_NODATA).unwrap();
    let labels = ClassMap::new(g, vec![1, 2, 3, 1, 2, 3, 0, 1, 2, 3, 1, 2], vec![]).unwrap();
    let parcels = ParcelMask::new(g, vec![1, 1, 1, 1, 2, 2, 2, 2, 0, 0, 2, 2]).unwrap();
    let out = group_by_classes(&raster, &labels, &parcels).unwrap();
    assert_eq!(out.len(), 2);
    assert_eq!(out[0].parcel, 1);
    assert_eq!(out[0].groups, vec![vec![0.1, 0.4], vec![0.2], vec![0.3]]);
    // parcel 2: nodata at 5 and unlabeled at 6 are dropped
    assert_eq!(out[1].sizes(), vec![2, 2, 0]);
    assert_eq!(out[1].groups[0], vec![0.8, 0.11]);

    let uniform = ClassMap::new(g, vec![2; 12], vec![]).unwrap();
    let single = group_by_classes(&raster, &uniform, &parcels).unwrap();
    assert_eq!(single[0].sizes(), vec![0, 4, 0]);
    assert!(one_way_anova(&single[0].groups).is_err());

    let other = GridGeometry::new(4, 3, 10.0, 0.0, 0.0);
    let bad = ClassMap::new(other, vec![1; 12], vec![]).unwrap();
    assert!(group_by_classes(&raster, &bad, &parcels).is_err());
}
