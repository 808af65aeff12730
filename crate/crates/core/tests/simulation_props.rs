use ioulmm::covariance::iou_kernel;
use ioulmm::simulation::*;
use ioulmm::{KernelSpec, ParamVector};
use nalgebra::{DMatrix, DVector};

/// Z G Zᵀ + H + σ²I assembled directly from the scalar kernel.
fn direct_q(times: &[f64], theta: &ParamVector) -> DMatrix<f64> {
    let g = &theta.cov.gamma;
    let gm = DMatrix::from_row_slice(2, 2, &[g[0] * g[0], g[1], g[1], g[2] * g[2]]);
    let n = times.len();
    let z = DMatrix::from_fn(n, 2, |r, c| if c == 0 { 1.0 } else { times[r] });
    let mut q = &z * gm * z.transpose();
    for r in 0..n {
        for c in 0..n {
            q[(r, c)] += iou_kernel(theta.cov.rate, theta.cov.tau, times[r], times[c]).unwrap();
        }
        q[(r, r)] += theta.cov.sigma2;
    }
    q
}

fn short_design() -> DesignConfig {
    DesignConfig {
        n_points: 4,
        ..DesignConfig::balanced(1, 3)
    }
}

fn check_moments(mode: DrawMode) {
    let spec = KernelSpec::default();
    let theta = reference_theta();
    let skeleton = generate_design(&short_design()).unwrap();
    let subject = &skeleton.subjects[0];
    let sampler = ResponseSampler::new(&skeleton, &theta, &spec, mode).unwrap();
    let m = 50_000;
    let mean = &subject.x * DVector::from_column_slice(&theta.beta);
    let draws: Vec<DVector<f64>> = (0..m).map(|r| sampler.draw_subject(11, r as u64, 0) - &mean).collect();
    let q = direct_q(&subject.times, &theta);
    let n = subject.n_obs();
    for j in 0..n {
        let mu: f64 = draws.iter().map(|d| d[j]).sum::<f64>() / m as f64;
        let se = (q[(j, j)] / m as f64).sqrt();
        assert!(mu.abs() < 3.0 * se, "{mode:?} mean[{j}] = {mu}, se {se}");
        for k in j..n {
            let prods: Vec<f64> = draws.iter().map(|d| d[j] * d[k]).collect();
            let c = prods.iter().sum::<f64>() / m as f64;
            let var = prods.iter().map(|p| (p - c).powi(2)).sum::<f64>() / (m - 1) as f64;
            let mcse = (var / m as f64).sqrt();
            assert!((c - q[(j, k)]).abs() < 3.0 * mcse, "{mode:?} cov[{j},{k}] = {c} vs {} (mcse {mcse})", q[(j, k)]);
        }
    }
}

#[test]
fn joint_draws_have_model_covariance() {
    check_moments(DrawMode::Joint);
}

#[test]
fn decomposed_draws_have_model_covariance() {
    check_moments(DrawMode::Decomposed);
}

#[test]
fn standardized_contrast_has_normal_characteristic_function() {
    let spec = KernelSpec::default();
    let theta = reference_theta();
    let skeleton = generate_design(&short_design()).unwrap();
    let subject = &skeleton.subjects[0];
    let sampler = ResponseSampler::new(&skeleton, &theta, &spec, DrawMode::Decomposed).unwrap();
    let q = direct_q(&subject.times, &theta);
    let w = DVector::from_vec(vec![1.0, -2.0, 0.5, 1.0]);
    let scale = (w.transpose() * &q * &w)[(0, 0)].sqrt();
    let mean = &subject.x * DVector::from_column_slice(&theta.beta);
    let m = 20_000;
    let zs: Vec<f64> = (0..m)
        .map(|r| w.dot(&(sampler.draw_subject(5, r as u64, 0) - &mean)) / scale)
        .collect();
    for t in [0.5, 1.0, 1.5, 2.0] {
        let c: Vec<f64> = zs.iter().map(|z| (t * z).cos()).collect();
        let avg = c.iter().sum::<f64>() / m as f64;
        let sd = (c.iter().map(|v| (v - avg).powi(2)).sum::<f64>() / (m - 1) as f64).sqrt();
        let target = (-0.5 * t * t).exp();
        assert!((avg - target).abs() < 4.0 * sd / (m as f64).sqrt(), "t={t}: {avg} vs {target}");
    }
}

#[test]
fn per_observation_binary_covariate_is_fair() {
    let design = generate_design(&DesignConfig::balanced(500, 9)).unwrap();
    let xs: Vec<f64> = design.subjects.iter().flat_map(|s| s.x.column(1).iter().copied().collect::<Vec<_>>()).collect();
    assert_eq!(xs.len(), 10_000);
    assert!(xs.iter().all(|v| *v == 0.0 || *v == 1.0));
    let freq = xs.iter().sum::<f64>() / xs.len() as f64;
    assert!((freq - 0.5).abs() < 0.05, "{freq}");
}

#[test]
fn unbalanced_subjects_use_grid_subsets() {
    let design = generate_design(&DesignConfig::unbalanced(400, 21)).unwrap();
    for s in &design.subjects {
        assert!((15..=19).contains(&s.n_obs()));
        assert!(s.times.windows(2).all(|w| w[0] < w[1]));
        assert!(s.times.iter().all(|t| t.fract() == 0.0 && (1.0..=20.0).contains(t)));
        assert_eq!(s.x.column(0).as_slice(), s.times.as_slice());
        assert!(s.z.column(0).iter().all(|v| *v == 1.0));
    }
}

#[test]
fn study_output_is_reproducible() {
    let spec = KernelSpec::default();
    let design = DesignConfig::balanced(20, 4);
    let mc = McConfig {
        true_theta: reference_theta(),
        n_replications: 3,
        noise_seed: 8,
        fit: ioulmm::FitConfig {
            max_iters: 300,
            ..Default::default()
        },
        fresh_design: false,
        draw_mode: DrawMode::Joint,
        include_unconverged: true,
    };
    let raw = |r: &McReport| {
        let mut buf = Vec::new();
        r.write_raw(&mut buf).unwrap();
        buf
    };
    let a = run_mc_study(&mc, &design, &spec).unwrap();
    let b = run_mc_study(&mc, &design, &spec).unwrap();
    assert_eq!(raw(&a), raw(&b));
    assert_eq!(a.design, generate_design(&design).unwrap());
    let text = String::from_utf8(raw(&a)).unwrap();
    assert_eq!(text.lines().count(), 1 + 3);
    assert!(text.lines().next().unwrap().starts_with("replication,converged,included,loglik,beta_1"));

    // With the budget counted as failure nothing is aggregated.
    let strict = run_mc_study(&McConfig { include_unconverged: false, ..mc.clone() }, &design, &spec).unwrap();
    let unconverged = strict.replications.iter().filter(|r| !r.converged).count();
    assert_eq!(strict.failures, unconverged);
    assert_eq!(a.failures, 0);
}

#[test]
fn simulated_dataset_roundtrips_through_csv() {
    let spec = KernelSpec::default();
    let sk = generate_design(&DesignConfig::unbalanced(30, 2)).unwrap();
    let ds = simulate_responses(&sk, &reference_theta(), &spec, 1, 0, DrawMode::Joint).unwrap();
    let mut buf = Vec::new();
    ioulmm::data::write_csv_to(&ds, &mut buf).unwrap();
    let schema = ioulmm::data::SchemaConfig::for_dataset(&ds);
    let back = ioulmm::data::read_csv_from(buf.as_slice(), &schema).unwrap();
    assert_eq!(back.dataset.total_observations(), ds.total_observations());
    assert_eq!(back.dropped_rows, 0);
    for (a, b) in back.dataset.subjects.iter().zip(&ds.subjects) {
        assert_eq!(a.times, b.times);
        assert_eq!(a.y, b.y);
        assert_eq!(a.x, b.x);
    }
}
