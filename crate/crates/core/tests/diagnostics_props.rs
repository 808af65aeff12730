use ioulmm::diagnostics::*;
use ioulmm::simulation::*;
use ioulmm::{Error, KernelSpec, Likelihood, ParamVector};
use nalgebra::DVector;

fn design(kind: DesignKind, seed: u64) -> DesignConfig {
    DesignConfig {
        kind,
        binary_covariate: BinaryCovariate::PerSubject,
        ..DesignConfig::balanced(1, seed)
    }
}

#[test]
fn lan_residual_vanishes_for_zero_and_beta_directions() {
    let spec = KernelSpec::default();
    let theta = reference_theta();
    let config = LanConfig {
        n_values: vec![20, 40],
        replications: 10,
        noise_seed: 3,
        direction_seed: 4,
        n_random_directions: 0,
        include_zero: true,
        information: ReferenceInformation::SameDesign,
    };
    let p = theta.len();
    let mut mixed = DVector::zeros(p);
    mixed[0] = 1.0 / 2f64.sqrt();
    mixed[5] = 1.0 / 2f64.sqrt();
    let directions = vec![DVector::zeros(p), DVector::from_fn(p, |i, _| f64::from(u8::from(i == 0))), mixed];
    let report = lan_expansion_check(&theta, &spec, &design(DesignKind::Unbalanced, 2), &config, &directions).unwrap();
    for &n in &config.n_values {
        let zero = report.cell(n, 0).unwrap();
        assert!(zero.residuals.iter().all(|r| *r == 0.0));
        let beta = report.cell(n, 1).unwrap();
        let mix = report.cell(n, 2).unwrap();
        assert!(beta.mean_abs < 1e-9, "{}", beta.mean_abs);
        assert!(beta.mean_abs < mix.mean_abs);
        assert!(beta.residuals.iter().chain(&mix.residuals).all(|r| r.is_finite()));
    }
}

#[test]
fn infeasible_direction_is_skipped() {
    let spec = KernelSpec::default();
    let theta = reference_theta();
    let config = LanConfig {
        n_values: vec![4],
        replications: 3,
        ..LanConfig::default()
    };
    let p = theta.len();
    // Drives σ² negative at N = 4.
    let down = DVector::from_fn(p, |i, _| if i == p - 1 { -10.0 } else { 0.0 });
    let report = lan_expansion_check(&theta, &spec, &design(DesignKind::Balanced, 1), &config, &[down]).unwrap();
    assert!(report.cell(4, 0).unwrap().skipped);
}

#[test]
fn largest_design_reference_is_available() {
    let spec = KernelSpec::default();
    let theta = reference_theta();
    let config = LanConfig {
        n_values: vec![10, 30],
        replications: 5,
        n_random_directions: 1,
        information: ReferenceInformation::LargestDesign,
        ..LanConfig::default()
    };
    let dirs = lan_directions(theta.len(), 1, 1, false);
    assert_eq!(dirs.len(), theta.len() + 1);
    assert!(dirs.iter().all(|u| (u.norm() - 1.0).abs() < 1e-12));
    let report = lan_expansion_check(&theta, &spec, &design(DesignKind::Unbalanced, 1), &config, &dirs).unwrap();
    // At the largest N both choices of Î coincide, so the β residual is rounding only.
    assert!(report.cell(30, 0).unwrap().mean_abs < 1e-9);
    assert!(report.cell(10, 0).unwrap().mean_abs > 1e-9);
}

#[test]
fn information_blocks_stabilize() {
    let spec = KernelSpec::default();
    let theta = reference_theta();
    let balanced = information_limit_check(&spec, &design(DesignKind::Balanced, 5), &theta, &[10, 20, 40]).unwrap();
    for row in &balanced[1..] {
        // Û does not involve the covariates; balanced subjects share it exactly.
        assert!(row.u_change < 1e-12, "{}", row.u_change);
    }
    let unbalanced = information_limit_check(&spec, &design(DesignKind::Unbalanced, 5), &theta, &[50, 200, 800]).unwrap();
    assert!(unbalanced[2].a_change < unbalanced[1].a_change);
    assert!(unbalanced[2].u_change < unbalanced[1].u_change);
    for row in balanced.iter().chain(&unbalanced) {
        assert!(row.u_asymmetry <= 1e-12);
        assert!(row.a_min_eigenvalue > 0.0 && row.u_min_eigenvalue > 0.0);
    }
}

#[test]
fn identical_subjects_give_constant_a_hat() {
    let spec = KernelSpec::default();
    let theta = reference_theta();
    let one = generate_design(&design(DesignKind::Balanced, 8)).unwrap();
    let blocks = |n: usize| {
        let ds = ioulmm::Dataset::new(vec![one.subjects[0].clone(); n]);
        Likelihood::new(&ds, spec)
            .workspace(&theta, ioulmm::covariance::DerivOrder::First)
            .unwrap()
            .information_blocks()
    };
    let (a1, _) = blocks(1);
    for n in [7, 50] {
        assert!((blocks(n).0 - &a1).abs().max() < 1e-12);
    }
}

#[test]
fn third_derivative_checks() {
    let spec = KernelSpec::default();
    let theta = reference_theta();
    let data = |n: usize| {
        let sk = generate_design(&DesignConfig {
            n_subjects: n,
            ..design(DesignKind::Unbalanced, 6)
        })
        .unwrap();
        simulate_responses(&sk, &theta, &spec, 7, 0, DrawMode::Joint).unwrap()
    };
    let d100 = data(100);
    let at_point = third_derivative_bound_check(&d100, &theta, &spec, 0.0, 1).unwrap();
    assert_eq!((at_point.evaluated, at_point.skipped), (1, 0));
    assert!(at_point.max_scaled_norm.is_finite());

    // ℓ is quadratic in β, so the ββ block of the observed information has no β-derivative.
    let d = information_derivative(&d100, &theta, &spec, 1e-4).unwrap();
    for k in 0..2 {
        assert!(d[k].view((0, 0), (2, 2)).abs().max() < 1e-6, "{}", d[k]);
    }

    let small = third_derivative_bound_check(&d100, &theta, &spec, 1.0, 2).unwrap();
    let large = third_derivative_bound_check(&data(400), &theta, &spec, 1.0, 2).unwrap();
    assert_eq!(small.evaluated, THIRD_DERIVATIVE_POINTS);
    assert!(large.max_scaled_norm < small.max_scaled_norm, "{} vs {}", large.max_scaled_norm, small.max_scaled_norm);
}

#[test]
fn normality_report_shapes_and_errors() {
    let names: Vec<String> = vec!["beta_1".into(), "sigma2".into()];
    let normal = statrs::distribution::Normal::standard();
    use statrs::distribution::ContinuousCDF;
    let col: Vec<f64> = (1..=40).map(|i| normal.inverse_cdf((i as f64 - 0.5) / 40.0)).collect();
    let report = normality_of_columns(&names, &[col.clone(), col.iter().map(|v| v * 2.0).collect()]).unwrap();
    assert!(report.low_power);
    assert_eq!(report.bin_edges.len(), HISTOGRAM_BINS + 1);
    assert!(report.components[0].qq_correlation > 0.999);
    assert!(!report.components[0].exempt && report.components[1].exempt);
    let c = &report.components[0];
    assert_eq!(c.counts.iter().sum::<usize>() + c.below_range + c.above_range, 40);
    let mut buf = Vec::new();
    report.write_values(&mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + 80);

    match normality_of_columns(&names[..1], &[vec![1.0; 60]]) {
        Err(Error::ZeroVariance { parameter }) => assert_eq!(parameter, "beta_1"),
        other => panic!("{other:?}"),
    }
    let err = normality_of_columns(&names[..1], &[vec![1.0; 60]]).unwrap_err();
    assert!(err.to_string().contains("zero variance"), "{err}");
}

#[test]
fn studentized_values_follow_the_transform() {
    let spec = KernelSpec::default();
    let theta = reference_theta();
    let sk = generate_design(&DesignConfig {
        n_subjects: 6,
        ..design(DesignKind::Balanced, 3)
    })
    .unwrap();
    let shifted: Vec<ParamVector> = (0..3)
        .map(|k| {
            let mut v = theta.to_vec();
            v[0] += 0.01 * (k as f64 + 1.0);
            v[4] -= 0.02 * k as f64;
            theta.with_values(&v).unwrap()
        })
        .collect();
    let inputs = studentized_inputs(&sk, &spec, &shifted).unwrap();
    let names = theta.names(&spec);
    let report = studentized_normality(&inputs, &theta, 6, &names).unwrap();
    for (m, inp) in inputs.iter().enumerate() {
        let z = ioulmm::estimation::studentize(&inp.theta_hat, &theta, &inp.a_hat, &inp.u_hat, 6).unwrap();
        for (k, c) in report.components.iter().enumerate() {
            assert_eq!(c.values[m], z[k]);
        }
    }
}

#[test]
fn score_clt_report_is_consistent() {
    let spec = KernelSpec::default();
    let theta = reference_theta();
    let d = DesignConfig {
        n_subjects: 60,
        ..design(DesignKind::Unbalanced, 9)
    };
    let a = score_clt_check(&theta, &spec, &d, 40, 10).unwrap();
    let b = score_clt_check(&theta, &spec, &d, 40, 10).unwrap();
    assert_eq!(a, b);
    let p = theta.len();
    assert_eq!(a.covariance.len(), p);
    for j in 0..p {
        for k in 0..p {
            assert_eq!(a.covariance[j][k], a.covariance[k][j]);
        }
        assert!(a.diagonal_ratio[j] > 0.0);
    }
    assert!(score_clt_check(&theta, &spec, &d, 1, 10).is_err());
}
