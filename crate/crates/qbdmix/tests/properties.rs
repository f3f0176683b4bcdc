//! Property tests over randomly generated recurrent models: stochasticity of
//! truncations, fixed-point residuals, factorization identity, balance of
//! the stationary window and solver freedom.

use nalgebra::{DMatrix, DVector, RowDVector};
use proptest::prelude::*;
use qbdmix::blocks::BlockMatrixWindow;
use qbdmix::factorization::{rg_residual, solve_level_dependent, solve_tail_rg};
use qbdmix::model::{random_model, truncate_dense, validate, BoundaryPolicy};
use qbdmix::poisson::{solve_matrix_poisson, Pin};
use qbdmix::stationary::{stationary_window, stationary_window_to_mass};

fn model_params() -> impl Strategy<Value = (usize, usize, u64)> {
    (1usize..=4, 1usize..=3, 0u64..=400)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_models_validate_and_truncate_stochastically(
        (levels, phases, seed) in model_params(),
        extra in 0usize..6,
    ) {
        let model = random_model(levels, phases, seed).unwrap();
        prop_assert!(validate(&model).ok);
        let n = model.inhomogeneity_bound() + extra;
        for policy in [BoundaryPolicy::ReflectToA1, BoundaryPolicy::RenormalizeRows] {
            let chain = truncate_dense(&model, n, policy).unwrap();
            for r in 0..chain.p.nrows() {
                prop_assert!((chain.p.row(r).sum() - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn tail_recurrence_margin_holds((levels, phases, seed) in model_params()) {
        let model = random_model(levels, phases, seed).unwrap();
        let tail = model.tail();
        let rg = solve_tail_rg(&tail.a2, &tail.a1, &tail.a0, 1e-12).unwrap();
        prop_assert!(rg.spectral_radius < 1.0 - 1e-6);
    }

    #[test]
    fn fixed_points_and_factorization_identity(
        (levels, phases, seed) in model_params(),
    ) {
        let model = random_model(levels, phases, seed).unwrap();
        let f = solve_level_dependent(&model, 1e-12).unwrap();
        prop_assert!(f.reqn_residual <= 1e-12, "R residual {}", f.reqn_residual);
        prop_assert!(f.geqn_residual <= 1e-12, "G residual {}", f.geqn_residual);
        let window = model.inhomogeneity_bound() + 8;
        let resid = rg_residual(&model, &f, window).unwrap();
        prop_assert!(resid <= 1e-8, "factorization residual {resid:.3e}");
        // Row sums of the censored chain are 1 when the chain is recurrent.
        let u0 = f.u(0);
        for r in 0..u0.nrows() {
            prop_assert!((u0.row(r).sum() - 1.0).abs() <= 1e-10);
        }
    }

    #[test]
    fn stationary_window_balance_and_prefix(
        (levels, phases, seed) in model_params(),
    ) {
        let model = random_model(levels, phases, seed).unwrap();
        let f = solve_level_dependent(&model, 1e-12).unwrap();
        let j = 8usize;
        let w = stationary_window(&model, &f, j, 1e-12).unwrap();
        for k in 1..j {
            let balance = w.pi(k - 1) * model.a0(k - 1) + w.pi(k) * model.a1(k)
                + w.pi(k + 1) * model.a2(k + 1)
                - w.pi(k);
            prop_assert!(balance.iter().all(|x| x.abs() <= 1e-9));
        }
        let grown = stationary_window(&model, &f, j + 3, 1e-12).unwrap();
        for k in 0..=j {
            prop_assert_eq!(w.pi(k), grown.pi(k));
        }
    }

    #[test]
    fn poisson_freedom_is_a_column_constant(
        (levels, phases, seed) in model_params(),
    ) {
        let model = random_model(levels, phases, seed).unwrap();
        let f = solve_level_dependent(&model, 1e-12).unwrap();
        let pi = stationary_window_to_mass(&model, &f, 8, 1e-12).unwrap();
        let levels_w = 4usize;
        let sizes: Vec<usize> = (0..levels_w).map(|i| model.phase_size(i)).collect();
        let zero = BlockMatrixWindow::zeros(sizes.clone(), sizes.clone());
        let c0: Vec<RowDVector<f64>> = (0..levels_w)
            .map(|j| RowDVector::from_fn(model.phase_size(j), |_, c| 0.5 + c as f64))
            .collect();
        let base = solve_matrix_poisson(
            &f, &pi, &zero.as_rows(), Pin::RawFree, (levels_w - 1, levels_w - 1), 1e-12,
        )
        .unwrap();
        let shifted = solve_matrix_poisson(
            &f, &pi, &zero.as_rows(), Pin::Explicit(c0), (levels_w - 1, levels_w - 1), 1e-12,
        )
        .unwrap();
        for j in 0..levels_w {
            for ph in 0..model.phase_size(j) {
                let mut lo = f64::MAX;
                let mut hi = f64::MIN;
                for i in 0..levels_w {
                    for r in 0..model.phase_size(i) {
                        let d = shifted.particular.blocks[i][j][(r, ph)]
                            - base.particular.blocks[i][j][(r, ph)];
                        lo = lo.min(d);
                        hi = hi.max(d);
                    }
                }
                prop_assert!((hi - lo).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn z_identities_hold((levels, phases, seed) in model_params()) {
        let model = random_model(levels, phases, seed).unwrap();
        let f = solve_level_dependent(&model, 1e-12).unwrap();
        let m0 = f.z.nrows();
        let e = DVector::<f64>::repeat(m0, 1.0);
        prop_assert!((&f.z * &e - &e).amax() <= 1e-10);
        prop_assert!((&f.v0 * &f.z - &f.v0).amax() <= 1e-10);
        let smin = (DMatrix::<f64>::identity(m0, m0) - f.u(0))
            .svd(false, false)
            .singular_values
            .iter()
            .fold(f64::MAX, |a, &s| a.min(s));
        prop_assert!(smin <= 1e-8, "I - U0 should be singular, smin = {smin:.3e}");
    }
}
