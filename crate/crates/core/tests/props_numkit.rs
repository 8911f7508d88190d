//! Property suite for the numeric kit: algebraic identities of the dense
//! kernels, determinism of the seeded streams, and eigenvalue sanity.

use bnblind_core::numkit::{
    close, gaussian_matrix, gaussian_vector, matmul, matmul_at, matmul_bt, sym_eigenvalues,
};
use bnblind_core::{Matrix, RngStream, Tolerance, Vector};
use proptest::prelude::*;

fn random_matrix(seed: u64, stream: u64, rows: usize, cols: usize) -> Matrix {
    let mut rng = RngStream::new(seed, stream);
    gaussian_matrix(&mut rng, rows, cols, 0.0, 1.0).expect("valid draw")
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(30))]

    /// (AB)C = A(BC) to accumulated rounding.
    #[test]
    fn matmul_is_associative(seed in 0u64..1_000, m in 1usize..6, k in 1usize..6, l in 1usize..6, n in 1usize..6) {
        let a = random_matrix(seed, 930, m, k);
        let b = random_matrix(seed, 931, k, l);
        let c = random_matrix(seed, 932, l, n);
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        let scale = 1.0 + left.max_abs();
        prop_assert!(left.sub(&right).max_abs() <= 1e-12 * scale * (k * l) as f64);
    }

    /// The fused transposed kernels agree with explicit transposition.
    #[test]
    fn transposed_kernels_match_explicit_transposes(seed in 0u64..1_000, m in 1usize..6, k in 1usize..6, n in 1usize..6) {
        let a = random_matrix(seed, 933, k, m);
        let b = random_matrix(seed, 934, k, n);
        let fused = matmul_at(&a, &b).unwrap();
        let explicit = matmul(&a.transpose(), &b).unwrap();
        prop_assert!(fused.sub(&explicit).max_abs() <= 1e-13 * (1.0 + explicit.max_abs()));

        let c = random_matrix(seed, 935, m, k);
        let d = random_matrix(seed, 936, n, k);
        let fused_bt = matmul_bt(&c, &d).unwrap();
        let explicit_bt = matmul(&c, &d.transpose()).unwrap();
        prop_assert!(fused_bt.sub(&explicit_bt).max_abs() <= 1e-13 * (1.0 + explicit_bt.max_abs()));
    }

    /// Transposition is an involution, bitwise.
    #[test]
    fn transpose_is_an_involution(seed in 0u64..1_000, m in 1usize..7, n in 1usize..7) {
        let a = random_matrix(seed, 937, m, n);
        prop_assert_eq!(&a.transpose().transpose(), &a);
    }

    /// The dot product is symmetric bitwise: per-term products commute and
    /// the accumulation order is the same left-to-right walk.
    #[test]
    fn dot_is_bitwise_symmetric(seed in 0u64..1_000, n in 1usize..24) {
        let mut rng = RngStream::new(seed, 938);
        let a = gaussian_vector(&mut rng, n, 0.0, 1.0).unwrap();
        let b = gaussian_vector(&mut rng, n, 0.0, 1.0).unwrap();
        prop_assert_eq!(a.dot(&b), b.dot(&a));
    }

    /// The Frobenius norm matches the flattened Euclidean norm.
    #[test]
    fn frobenius_matches_flattened_norm(seed in 0u64..1_000, m in 1usize..6, n in 1usize..6) {
        let a = random_matrix(seed, 939, m, n);
        let flat = Vector::new(a.data().to_vec());
        prop_assert_eq!(a.frobenius_norm(), flat.norm());
    }

    /// Matrix–vector application agrees with a one-column multiply.
    #[test]
    fn matvec_agrees_with_single_column_matmul(seed in 0u64..1_000, m in 1usize..6, n in 1usize..6) {
        let a = random_matrix(seed, 940, m, n);
        let mut rng = RngStream::new(seed, 941);
        let v = gaussian_vector(&mut rng, n, 0.0, 1.0).unwrap();
        let col = Matrix::from_fn(n, 1, |r, _| v[r]);
        let product = matmul(&a, &col).unwrap();
        let direct = a.matvec(&v);
        for r in 0..m {
            prop_assert_eq!(direct[r], product.get(r, 0));
        }
    }

    /// Closeness is symmetric in its arguments and rejects NaN on either
    /// side.
    #[test]
    fn close_is_symmetric_and_nan_safe(a in -1e6f64..1e6, b in -1e6f64..1e6) {
        let tol = Tolerance::new(1e-9, 1e-9);
        prop_assert_eq!(close(a, b, tol), close(b, a, tol));
        prop_assert!(!close(a, f64::NAN, tol));
        prop_assert!(!close(f64::NAN, b, tol));
    }

    /// Identical (seed, stream) pairs replay identical draws; changing the
    /// stream changes the draws.
    #[test]
    fn streams_replay_and_separate(seed in 0u64..10_000, stream in 0u64..1_000) {
        let mut a = RngStream::new(seed, stream);
        let mut b = RngStream::new(seed, stream);
        let first: Vec<f64> = (0..8).map(|_| a.normal()).collect();
        let second: Vec<f64> = (0..8).map(|_| b.normal()).collect();
        prop_assert_eq!(&first, &second);
        let mut c = RngStream::new(seed, stream.wrapping_add(1));
        let other: Vec<f64> = (0..8).map(|_| c.normal()).collect();
        prop_assert_ne!(&first, &other);
    }

    /// Eigenvalues of a random symmetric matrix sum to its trace and bound
    /// its spectral content: Σλ² equals the squared Frobenius norm.
    #[test]
    fn eigenvalues_match_trace_and_frobenius(seed in 0u64..1_000, n in 1usize..6) {
        let raw = random_matrix(seed, 942, n, n);
        let sym = raw.add(&raw.transpose()).scaled(0.5);
        let eigs = sym_eigenvalues(&sym).unwrap();
        let trace: f64 = (0..n).map(|i| sym.get(i, i)).sum();
        let eig_sum: f64 = eigs.iter().sum();
        prop_assert!((trace - eig_sum).abs() <= 1e-10 * (1.0 + trace.abs()));
        let frob_sq = sym.frobenius_norm().powi(2);
        let eig_sq: f64 = eigs.iter().map(|v| v * v).sum();
        prop_assert!((frob_sq - eig_sq).abs() <= 1e-9 * (1.0 + frob_sq));
        let mut sorted = eigs.clone();
        sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
        prop_assert_eq!(&sorted, &eigs, "ascending order");
    }
}
