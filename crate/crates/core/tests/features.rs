use odflow::features::{build_conditions, RegionFeature};
use proptest::prelude::*;

fn features(rows: &[(Vec<f64>, f64)]) -> Vec<RegionFeature> {
    rows.iter()
        .enumerate()
        .map(|(i, (e, p))| RegionFeature {
            region_id: format!("r{i:02}"),
            embedding: e.clone(),
            population: *p,
        })
        .collect()
}

fn arb_rows() -> impl Strategy<Value = Vec<(Vec<f64>, f64)>> {
    (1usize..6).prop_flat_map(|d| {
        prop::collection::vec(
            (prop::collection::vec(-50.0f64..50.0, d), 0.0f64..1e6),
            2..25,
        )
    })
}

proptest! {
    #[test]
    fn columns_standardized(rows in arb_rows()) {
        let c = build_conditions(&features(&rows)).unwrap();
        let (n, cols) = (c.n(), c.cols());
        for k in 0..cols {
            let col: Vec<f64> = (0..n).map(|i| c.row(i)[k]).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            if c.stats.std[k] == 0.0 {
                prop_assert!(col.iter().all(|v| *v == 0.0));
            } else {
                prop_assert!(mean.abs() < 1e-9);
                prop_assert!((sd - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn constant_column_maps_to_zero(rows in arb_rows(), v in -10.0f64..10.0) {
        let rows: Vec<_> = rows.into_iter().map(|(mut e, p)| { e[0] = v; (e, p) }).collect();
        let c = build_conditions(&features(&rows)).unwrap();
        prop_assert!((0..c.n()).all(|i| c.row(i)[0] == 0.0));
    }

    #[test]
    fn deterministic_and_equivariant(rows in arb_rows(), seed in any::<u64>()) {
        let f = features(&rows);
        let a = build_conditions(&f).unwrap();
        prop_assert_eq!(&a, &build_conditions(&f).unwrap());
        let n = f.len();
        let shift = (seed % n as u64) as usize;
        let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let pf: Vec<RegionFeature> = perm.iter().map(|&p| f[p].clone()).collect();
        let b = build_conditions(&pf).unwrap();
        let expect = a.permuted(&perm);
        prop_assert_eq!(&b.region_ids, &expect.region_ids);
        for (x, y) in b.x.iter().zip(&expect.x) {
            // column sums are taken in a different order
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
}
