use super::*;

fn pl2() -> MemoryKernel {
    MemoryKernel::PowerLaw { alpha: 2.0 }
}

#[test]
fn parse_kernels() {
    assert_eq!(MemoryKernel::parse("power_law:2").unwrap(), pl2());
    assert_eq!(
        MemoryKernel::parse("exp:1@0.5,-2@3").unwrap(),
        MemoryKernel::ExpSum {
            coeffs: vec![1.0, -2.0],
            rates: vec![0.5, 3.0]
        }
    );
    assert!(MemoryKernel::parse("gaussian:3,0.5").is_ok());
    assert!(MemoryKernel::parse("power_law:1").is_err());
    assert!(MemoryKernel::parse("exp:1@-1").is_err());
    assert!(MemoryKernel::parse("sinc:1").is_err());
}

#[test]
fn tail_bounds_dominate_numeric_tails() {
    for k in [pl2(), MemoryKernel::parse("gaussian:2,0.7").unwrap(), MemoryKernel::parse("exp:1@0.5,-2@3").unwrap()] {
        for s in [0.0, 1.0, 4.0, 9.0] {
            let numeric = simpson(|x| k.eval(x).abs(), s, s + 400.0, 200_000);
            assert!(numeric <= k.tail_bound(s) * (1.0 + 1e-9) + 1e-12, "{} at {s}", k.family());
        }
    }
    // power law tail is exact
    assert!((pl2().tail_bound(3.0) - 0.25).abs() < 1e-15);
}

#[test]
fn exact_exponential_is_recovered() {
    let target = MemoryKernel::ExpSum {
        coeffs: vec![1.0],
        rates: vec![1.0],
    };
    let fit = fit_with_rates(&target, &[1.0], 5.0, 100).unwrap();
    assert!((fit.coeffs[0] - 1.0).abs() < 1e-12);
    let e = extrapolation_error(&fit, &target, 5.0, Upper::Infinity, 2000).unwrap();
    assert!(e.extrapolation < 1e-10 && e.in_window < 1e-10);
}

#[test]
fn zero_fit_of_exponential_tail() {
    let target = MemoryKernel::ExpSum {
        coeffs: vec![1.0],
        rates: vec![1.0],
    };
    let e = extrapolation_error(&FittedKernel::zero(1.0), &target, 1.0, Upper::Infinity, 20_000).unwrap();
    assert!((e.extrapolation - (-1f64).exp()).abs() < 1e-6);
    assert!(e.truncated_at.is_some());
}

#[test]
fn power_law_fit_is_accurate_in_window() {
    let fit = fit_kernel(&pl2(), 8, 5.0, 800, FitMethod::FixedRates).unwrap();
    assert!(fit.residual_rms < 1e-3, "{}", fit.residual_rms);
}

#[test]
fn grid_must_be_dense_enough() {
    assert!(fit_kernel(&pl2(), 8, 5.0, 79, FitMethod::FixedRates).is_err());
    assert!(fit_kernel(&pl2(), 0, 5.0, 100, FitMethod::FixedRates).is_err());
}

#[test]
fn singular_rates_use_ridge() {
    let fit = fit_with_rates(&pl2(), &[1.0, 1.0], 5.0, 100).unwrap();
    assert!(fit.ridge > 0.0);
    assert!(fit.coeffs.iter().all(|c| c.is_finite()));
}

#[test]
fn joint_fit_does_not_increase_residual() {
    let fixed = fit_kernel(&pl2(), 3, 5.0, 300, FitMethod::FixedRates).unwrap();
    let joint = fit_kernel(&pl2(), 3, 5.0, 300, FitMethod::Joint { iters: 200, lr: 1e-2 }).unwrap();
    assert!(joint.residual_rms <= fixed.residual_rms + 1e-12);
}

#[test]
fn u_domain_matches_s_domain() {
    for m in [2, 8, 32] {
        let fit = fit_kernel(&pl2(), m, 5.0, 40 * m.max(10), FitMethod::FixedRates).unwrap();
        for upper in [Upper::At(50.0), Upper::At(8.0)] {
            let s = extrapolation_error(&fit, &pl2(), 5.0, upper, 400_000).unwrap().extrapolation;
            let u = u_domain_error(&fit, &pl2(), 5.0, upper, 1e-12).unwrap();
            assert!((s - u).abs() < 1e-6, "m={m}: {s} vs {u}");
        }
    }
}

#[test]
fn u_domain_handles_infinite_horizon() {
    let fit = fit_kernel(&pl2(), 8, 5.0, 400, FitMethod::FixedRates).unwrap();
    let s = extrapolation_error(&fit, &pl2(), 5.0, Upper::Infinity, 400_000).unwrap().extrapolation;
    let u = u_domain_error(&fit, &pl2(), 5.0, Upper::Infinity, 1e-12).unwrap();
    assert!((s - u).abs() < 1e-6, "{s} vs {u}");
}

#[test]
fn change_of_variable_samples() {
    let fit = fit_kernel(&pl2(), 4, 5.0, 100, FitMethod::FixedRates).unwrap();
    let v = change_of_variable_view(&fit, &pl2(), 10.0, 11);
    assert_eq!(v[0].u, 1.0);
    assert!((v[5].target - pl2().eval(5.0)).abs() < 1e-12);
    assert!((v[5].poly - fit.eval(5.0)).abs() < 1e-12);
}

#[test]
fn decomposition_closed_form_for_constant_input() {
    // ρ = e^{-s}, ρ̂ = 0.5 e^{-2s}, x ≡ 1, T = 1, t = 3
    let target = MemoryKernel::ExpSum {
        coeffs: vec![1.0],
        rates: vec![1.0],
    };
    let fit = FittedKernel {
        coeffs: vec![0.5],
        rates: vec![2.0],
        ..FittedKernel::zero(1.0)
    };
    let d = decompose_error(&target, &fit, &|_| 1.0, 1.0, 1.0, 3.0, 0.0, 20_000).unwrap();
    let prim = |a: f64, b: f64| ((-a).exp() - (-b).exp()) - 0.25 * ((-2.0 * a).exp() - (-2.0 * b).exp());
    assert!((d.history_term - (-3f64).exp()).abs() < 1e-9);
    assert!((d.extension_term - prim(1.0, 3.0)).abs() < 1e-9);
    assert!((d.window_term - prim(0.0, 1.0)).abs() < 1e-9);
    let total = 1.0 - 0.25 * (1.0 - (-6f64).exp());
    assert!((d.total_error - total).abs() < 1e-9);
    assert!(d.holds(1e-12));
}

#[test]
fn decomposition_bound_holds_for_oscillating_input() {
    let fit = fit_kernel(&pl2(), 6, 5.0, 600, FitMethod::FixedRates).unwrap();
    for (t, y0) in [(7.0, 0.0), (20.0, 0.1), (60.0, -0.3)] {
        let d = decompose_error(&pl2(), &fit, &|tau: f64| (0.7 * tau).sin(), 1.0, 5.0, t, y0, 20_000).unwrap();
        assert!(d.holds(1e-9), "{d:?}");
    }
    assert!(decompose_error(&pl2(), &fit, &|_| 2.0, 1.0, 5.0, 7.0, 0.0, 1000).is_err());
    assert!(decompose_error(&pl2(), &fit, &|_| 0.5, f64::INFINITY, 5.0, 7.0, 0.0, 1000).is_err());
}

#[test]
fn overfit_regression_power_law() {
    let rows = overfit_sweep(&pl2(), &[1, 2, 4, 8, 16, 32], 5.0, 50.0, 40, 200_000).unwrap();
    let frozen = [
        (1, 0.14648366161420734),
        (2, 0.355054998340572),
        (4, 0.056610066494693266),
        (8, 0.03506180942404179),
        (16, 0.025616878637435826),
        (32, 0.031292849292069214),
    ];
    for (r, (m, e)) in rows.iter().zip(frozen) {
        assert_eq!(r.m, m);
        assert!((r.extrapolation - e).abs() < 1e-6 * e, "m={m}: {}", r.extrapolation);
    }
    let best_moderate = rows[..5].iter().map(|r| r.extrapolation).fold(f64::INFINITY, f64::min);
    assert!(rows[5].extrapolation > best_moderate);
    assert!(rows[5].in_window < rows[3].in_window);
}
