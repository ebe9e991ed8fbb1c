use nalgebra::DMatrix;
use proptest::prelude::*;
use sketch_core::attp::PersistentSketch;
use sketch_core::fd::{cod_reduce, fd_reduce, rank_budget};
use sketch_core::sketch::{sketch_from_gram, SnapshotSketch};
use sketch_core::RngState;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |v| DMatrix::from_row_slice(rows, cols, &v))
}

fn psd_gap(a: &DMatrix<f64>) -> f64 {
    let s = (a + a.transpose()) * 0.5;
    eigenvalues(s).into_iter().fold(f64::INFINITY, f64::min)
}

/// Tight tolerance: the default one can stop early on badly scaled input.
fn eigenvalues(s: DMatrix<f64>) -> Vec<f64> {
    s.try_symmetric_eigen(f64::EPSILON, 0).expect("eigen converges").eigenvalues.iter().copied().collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fd_reduce_never_overestimates(b in matrix(8, 5)) {
        let out = fd_reduce(&b, 4).unwrap();
        let gap = b.transpose() * &b - out.transpose() * &out;
        prop_assert!(psd_gap(&gap) >= -1e-9 * b.norm_squared().max(1.0));
        // Bottom half is zeroed.
        prop_assert!(out.rows(4, 4).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cod_reduce_keeps_shapes(a in matrix(6, 8), b in matrix(4, 8)) {
        let (a2, b2) = cod_reduce(&a, &b, 4).unwrap();
        prop_assert_eq!(a2.shape(), a.shape());
        prop_assert_eq!(b2.shape(), b.shape());
        let err = (&a * b.transpose() - &a2 * b2.transpose()).norm();
        prop_assert!(err.is_finite());
    }

    #[test]
    fn shrunk_gram_is_dominated(rows in matrix(12, 6), ell in 1usize..8) {
        let g = rows.transpose() * &rows;
        let s = sketch_from_gram(&g, ell).unwrap();
        prop_assert_eq!(s.nrows(), ell);
        prop_assert!(psd_gap(&(&g - s.transpose() * &s)) >= -1e-8 * g.trace().max(1.0));
    }

    #[test]
    fn snapshot_mass_is_conserved(rows in matrix(40, 6), seed in any::<u64>()) {
        // Dumped contributions plus the residual Gram reproduce the input
        // Gram up to what the FD reductions discarded, which is PSD.
        let mut s = SnapshotSketch::new(6, 0.5, 4.0, RngState::new(seed, 0)).unwrap();
        for r in 0..rows.nrows() {
            let v: Vec<f64> = rows.row(r).iter().copied().collect();
            s.update(&v, r as u64 + 1).unwrap();
        }
        let g = rows.transpose() * &rows;
        let kept = s.gram(0, s.clock(), true);
        prop_assert!(psd_gap(&(&g - &kept)) >= -1e-7 * g.trace().max(1.0));
    }

    #[test]
    fn persistent_error_within_eps(rows in matrix(60, 5), seed in any::<u64>(), t in 1u64..=60) {
        let eps = 0.25;
        let mut p = PersistentSketch::new(5, eps, RngState::new(seed, 0)).unwrap();
        for r in 0..rows.nrows() {
            let v: Vec<f64> = rows.row(r).iter().copied().collect();
            p.update(&v, r as u64 + 1).unwrap();
        }
        let prefix = rows.rows(0, t as usize).into_owned();
        let g = prefix.transpose() * &prefix;
        let b = p.query(t).unwrap();
        let diff = &g - b.transpose() * &b;
        let err = eigenvalues((&diff + diff.transpose()) * 0.5).into_iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assert!(err <= eps * g.trace() + 1e-9);
    }

    #[test]
    fn rank_budget_is_ceiling(inv in 1u32..200) {
        let eps = 1.0 / inv as f64;
        prop_assert_eq!(rank_budget(eps).unwrap(), 2 * inv as usize);
    }
}
