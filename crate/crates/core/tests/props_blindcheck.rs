//! Property suite for the verification engine: chain-rule consistency,
//! full-report health on random instances, and ratio geometry.

use bnblind_core::blindcheck::{dominance_ratios, term_grads, verify_theorems};
use bnblind_core::normlayers::{jacobian_std_train, standardize_batch};
use bnblind_core::numkit::{gaussian_matrix, gaussian_vector};
use bnblind_core::{Matrix, RngStream, StandardizedBatch, TaylorModel, Tolerance, Vector};
use proptest::prelude::*;

fn random_setup(seed: u64, dims: usize, n: usize) -> (TaylorModel, StandardizedBatch) {
    let mut rng = RngStream::new(seed, 910);
    let g = gaussian_vector(&mut rng, dims, 0.0, 1.0).expect("valid draw");
    let raw = gaussian_matrix(&mut rng, dims, dims, 0.0, 1.0).expect("valid draw");
    let h = raw.add(&raw.transpose()).scaled(0.5);
    let y_tilde = gaussian_vector(&mut rng, dims, 0.0, 0.5).expect("valid draw");
    let model = TaylorModel::new(y_tilde, g, h).expect("valid shapes");
    let x = gaussian_matrix(&mut rng, dims, n, 0.0, 1.0).expect("valid draw");
    let yb = standardize_batch(&x, 0.0).expect("generic batch");
    (model, yb)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(30))]

    /// Every x-side gradient equals an independently constructed Jacobian
    /// applied to its y-side, to 1e-12 in units of the y-side norm.
    #[test]
    fn x_side_is_the_jacobian_image_of_the_y_side(
        seed in 0u64..1_000,
        dims in 2usize..6,
        n in 4usize..12,
    ) {
        let (model, yb) = random_setup(seed, dims, n);
        for d in 0..dims {
            let tg = term_grads(&model, &yb, d).expect("train batch");
            let j = jacobian_std_train(&yb, d).expect("train batch");
            let pairs = [
                (&tg.grad_dy, &tg.grad_dx, "grad"),
                (&tg.diag_dy, &tg.diag_dx, "diag"),
                (&tg.off_linear_dy, &tg.off_linear_dx, "linear"),
                (&tg.off_non_dy, &tg.off_non_dx, "non"),
            ];
            for (dy, dx, name) in pairs {
                let img = j.matvec(dy);
                let scale = 1.0 + dy.norm();
                prop_assert!(
                    img.sub(dx).norm() <= 1e-12 * scale,
                    "{name} term, dimension {d}"
                );
            }
        }
    }

    /// The full verification report is green on random instances: the
    /// blocked routes vanish, the surviving routes clear their floors, and
    /// the finite-difference cross-checks agree.
    #[test]
    fn random_instances_verify_clean(seed in 0u64..1_000, dims in 2usize..6, n in 4usize..12) {
        let (model, yb) = random_setup(seed, dims, n);
        let report = verify_theorems(&model, &yb, Tolerance::ZERO_ASSERTION).expect("train batch");
        prop_assert!(
            report.all_passed(),
            "failed assertions: {:?}",
            report.failed()
        );
        let fd = report.delta_metrics["fd_residual_max"];
        prop_assert!(fd <= 1e-5, "fd residual {fd}");
        let closed = report.delta_metrics["closed_form_residual_max"];
        prop_assert!(closed <= 1e-9, "closed-form residual {closed}");
    }

    /// The linear share is collinear with y_d and the non share is
    /// orthogonal to it, so the defined dominance ratios satisfy
    /// r_linear² + r_non² = 1 up to the recombination rounding.
    #[test]
    fn dominance_ratios_are_pythagorean(seed in 0u64..1_000, dims in 2usize..6, n in 4usize..12) {
        let (model, yb) = random_setup(seed, dims, n);
        let (r_lin, r_non) = dominance_ratios(&model, &yb).expect("train batch");
        for d in 0..dims {
            if r_lin[d].is_nan() {
                continue;
            }
            let sq = r_lin[d] * r_lin[d] + r_non[d] * r_non[d];
            prop_assert!((sq - 1.0).abs() <= 1e-9, "dimension {d}: r² sum {sq}");
        }
    }

    /// The non-route y-gradient is orthogonal to the standardized row
    /// (that's what survives the Jacobian at full 1/σ_d scale), while its
    /// component along the ones vector is exactly the −n·(H^off_{d,:}·ỹ)
    /// shift — which the Jacobian then annihilates.
    #[test]
    fn non_route_geometry_against_the_null_space(seed in 0u64..1_000, dims in 2usize..6, n in 4usize..12) {
        let (model, yb) = random_setup(seed, dims, n);
        for d in 0..dims {
            let tg = term_grads(&model, &yb, d).expect("train batch");
            let yd = yb.y.row_vector(d);
            let ones = Vector::ones(n);
            let scale = 1.0 + tg.off_non_dy.norm();
            prop_assert!(
                tg.off_non_dy.dot(&yd).abs() <= 1e-9 * scale * (n as f64),
                "orthogonal to y_d"
            );
            let shift = -(n as f64) * model.h_off.row_vector(d).dot(&model.y_tilde);
            let along_ones = tg.off_non_dy.dot(&ones);
            prop_assert!(
                (along_ones - shift).abs() <= 1e-9 * (1.0 + shift.abs()) * (n as f64),
                "ones component {} vs expansion-point shift {}", along_ones, shift
            );
        }
    }
}

/// A dimension with an all-zero Hessian row has nothing to assert nonzero:
/// its vacuous floors are omitted rather than failed.
#[test]
fn zero_coefficient_rows_are_skipped_not_failed() {
    let dims = 3;
    let n = 8;
    let mut rng = RngStream::new(77, 911);
    let x = gaussian_matrix(&mut rng, dims, n, 0.0, 1.0).expect("valid draw");
    let yb = standardize_batch(&x, 0.0).expect("generic batch");
    // Gradient zero in dimension 1, Hessian row/column 2 zeroed.
    let mut g = gaussian_vector(&mut rng, dims, 0.0, 1.0).expect("valid draw");
    g[1] = 0.0;
    let raw = gaussian_matrix(&mut rng, dims, dims, 0.0, 1.0).expect("valid draw");
    let mut h = raw.add(&raw.transpose()).scaled(0.5);
    for j in 0..dims {
        h.set(2, j, 0.0);
        h.set(j, 2, 0.0);
    }
    let model = TaylorModel::new(Vector::zeros(dims), g, h).expect("valid shapes");
    let report = verify_theorems(&model, &yb, Tolerance::ZERO_ASSERTION).expect("train batch");
    assert!(report.all_passed(), "failed: {:?}", report.failed());
    assert!(
        !report
            .nonzero_assertions
            .iter()
            .any(|a| a.term == "eval_grad_dx" && a.d == 1),
        "vacuous eval gradient floor must be omitted"
    );
    assert!(
        !report
            .nonzero_assertions
            .iter()
            .any(|a| a.d == 2 && (a.term == "theorem3_non_dx" || a.term == "eval_linear_dx")),
        "vacuous off-diagonal floors must be omitted"
    );
}

/// Identical standardized values, two different Jacobians: the eval-mode
/// counterparts of the blocked terms survive with norms set by the
/// population scale.
#[test]
fn eval_counterparts_survive_with_the_population_scale() {
    let (model, yb) = random_setup(5, 4, 10);
    let report = verify_theorems(&model, &yb, Tolerance::ZERO_ASSERTION).expect("train batch");
    let eval_floors: Vec<_> = report
        .nonzero_assertions
        .iter()
        .filter(|a| a.term.starts_with("eval_"))
        .collect();
    assert!(!eval_floors.is_empty(), "expected eval-mode floors");
    assert!(eval_floors.iter().all(|a| a.passed), "all eval routes carry gradient");
}

/// Verification refuses an eval-mode batch outright instead of silently
/// using the train Jacobian.
#[test]
fn eval_mode_batches_are_rejected() {
    let (model, yb) = random_setup(9, 3, 6);
    let mut eval_batch = yb.clone();
    eval_batch.mode = bnblind_core::StandardizeMode::EvalPopulationStats;
    let err = verify_theorems(&model, &eval_batch, Tolerance::ZERO_ASSERTION);
    assert!(
        matches!(err, Err(bnblind_core::CoreError::UnsupportedMode(_))),
        "got {err:?}"
    );
}

/// Worked Hessian geometry: diagonal Hessians have no off-diagonal routes
/// at all, so every per-dimension total is zero and the ratios are the NaN
/// marker, excluded rather than fabricated.
#[test]
fn diagonal_hessian_yields_undefined_ratios() {
    let dims = 3;
    let mut rng = RngStream::new(13, 912);
    let x = gaussian_matrix(&mut rng, dims, 9, 0.0, 1.0).expect("valid draw");
    let yb = standardize_batch(&x, 0.0).expect("generic batch");
    let h = Matrix::from_fn(dims, dims, |i, j| if i == j { 1.5 } else { 0.0 });
    let g = gaussian_vector(&mut rng, dims, 0.0, 1.0).expect("valid draw");
    let model = TaylorModel::new(Vector::zeros(dims), g, h).expect("valid shapes");
    let (r_lin, r_non) = dominance_ratios(&model, &yb).expect("train batch");
    for d in 0..dims {
        assert!(r_lin[d].is_nan() && r_non[d].is_nan(), "dimension {d}");
    }
}
