mod common;

use common::{all_specs, dense_log_likelihood, random_instance, rel_err};
use ioulmm::covariance::{assemble_q, assemble_q_dv, DerivOrder};
use ioulmm::likelihood::{LikelihoodOptions, SecondDerivMode};
use ioulmm::{Likelihood, ParamVector};
use nalgebra::DMatrix;

#[test]
fn log_likelihood_matches_dense_inverse() {
    for spec in all_specs() {
        for seed in 0..10 {
            let (ds, theta) = random_instance(seed, &spec, 5, 5);
            let lik = Likelihood::new(&ds, spec);
            let ws = lik.workspace(&theta, DerivOrder::Value).unwrap();
            let ll = ws.log_likelihood();
            let dense = dense_log_likelihood(&ds, &theta, &spec);
            assert!(rel_err(ll, dense, 0.0) < 1e-10, "{spec:?} seed {seed}: {ll} vs {dense}");
            for (i, s) in ds.subjects.iter().enumerate() {
                let q = assemble_q(s, &theta.cov, &spec).unwrap();
                assert!(rel_err(ws.log_det(i), q.determinant().ln(), 1e-3) < 1e-10);
                let l = ws.cholesky_factor(i);
                assert!((&l * l.transpose() - &q).abs().max() <= 1e-10 * q.abs().max());
            }
        }
    }
}

#[test]
fn u_hat_matches_dense_traces() {
    for spec in all_specs() {
        let (ds, theta) = random_instance(77, &spec, 5, 4);
        let (a_hat, u_hat) = ioulmm::likelihood::information_blocks(&ds, &theta, &spec).unwrap();
        let n = ds.n_subjects() as f64;
        let p_v = theta.cov.len();
        let mut u = DMatrix::zeros(p_v, p_v);
        let mut a = DMatrix::zeros(2, 2);
        for s in &ds.subjects {
            let qinv = assemble_q(s, &theta.cov, &spec).unwrap().try_inverse().unwrap();
            a += s.x.transpose() * &qinv * &s.x / n;
            let d: Vec<_> = (0..p_v)
                .map(|k| assemble_q_dv(s, &theta.cov, &spec, k).unwrap())
                .collect();
            for j in 0..p_v {
                for k in 0..p_v {
                    u[(j, k)] += 0.5 * (&qinv * &d[j] * &qinv * &d[k]).trace() / n;
                }
            }
        }
        assert!((&u_hat - &u).abs().max() <= 1e-10 * u.abs().max());
        assert!((&a_hat - &a).abs().max() <= 1e-10 * a.abs().max());
        assert_eq!(u_hat, u_hat.transpose());
        // σ² entry: ½ tr(Q⁻²) averaged.
        let sig: f64 = ds
            .subjects
            .iter()
            .map(|s| {
                let qinv = assemble_q(s, &theta.cov, &spec).unwrap().try_inverse().unwrap();
                0.5 * (&qinv * &qinv).trace()
            })
            .sum::<f64>()
            / n;
        assert!(rel_err(u_hat[(p_v - 1, p_v - 1)], sig, 0.0) < 1e-10);
    }
}

#[test]
fn beta_block_of_information_is_deterministic_part() {
    let spec = all_specs()[0];
    let (ds, theta) = random_instance(3, &spec, 5, 4);
    let lik = Likelihood::new(&ds, spec);
    let ws = lik.workspace(&theta, DerivOrder::Second).unwrap();
    let info = ws.observed_information();
    let (a_hat, _) = ws.information_blocks();
    assert!((info.view((0, 0), (2, 2)) - &a_hat).abs().max() < 1e-13);
    assert!((&info - info.transpose()).abs().max() <= 1e-10);
}

#[test]
fn finite_difference_second_derivative_mode_agrees() {
    for spec in all_specs() {
        let (ds, theta) = random_instance(9, &spec, 4, 4);
        let analytic = Likelihood::new(&ds, spec)
            .workspace(&theta, DerivOrder::Second)
            .unwrap()
            .observed_information();
        let opts = LikelihoodOptions {
            second_derivs: SecondDerivMode::FiniteDifference,
            fd_step: 1e-5,
        };
        let fd = Likelihood::with_options(&ds, spec, opts)
            .workspace(&theta, DerivOrder::Second)
            .unwrap()
            .observed_information();
        assert!((&analytic - &fd).abs().max() <= 1e-6 * analytic.abs().max());
    }
}

#[test]
fn grouped_and_ungrouped_evaluation_agree() {
    // Duplicate subjects share one factorization; results must equal the
    // sum over individually evaluated subjects.
    let spec = all_specs()[0];
    let (mut ds, theta) = random_instance(21, &spec, 2, 4);
    let first = ds.subjects[0].clone();
    for k in 0..5 {
        let mut s = first.clone();
        s.id = format!("copy{k}");
        s.y = s.y.map(|v| v + k as f64 * 0.1);
        ds.subjects.push(s);
    }
    let lik = Likelihood::new(&ds, spec);
    assert!(lik.n_groups() < ds.n_subjects());
    let ll = lik.workspace(&theta, DerivOrder::Value).unwrap().log_likelihood();
    assert!(rel_err(ll, dense_log_likelihood(&ds, &theta, &spec), 0.0) < 1e-10);
}

#[test]
fn score_rejects_wrong_dimensions() {
    let spec = all_specs()[0];
    let (ds, _) = random_instance(1, &spec, 2, 2);
    let bad = ParamVector::new(vec![0.0], vec![1.0, 0.0, 1.0], 1.0, 1.0, 1.0);
    assert!(ioulmm::likelihood::score(&ds, &bad, &spec).is_err());
}

#[test]
fn score_matches_differences_on_long_grids() {
    // Late times with a fast rate, where e^{-αt} is tiny.
    let spec = ioulmm::KernelSpec::default();
    let design = ioulmm::DesignConfig::unbalanced(40, 77);
    let sk = ioulmm::generate_design(&design).unwrap();
    for (rate, tau) in [(2.04, 0.61), (4.0, 1.2)] {
        let theta = ParamVector::new(vec![-0.25, 0.5], vec![1.25, 1.0, 1.5], rate, tau, 1.56);
        let ds = ioulmm::simulate_responses(&sk, &theta, &spec, 78, 0, ioulmm::simulation::DrawMode::Joint).unwrap();
        let lik = Likelihood::new(&ds, spec);
        let g = lik.workspace(&theta, DerivOrder::First).unwrap().score();
        let base = theta.to_vec();
        for k in 0..base.len() {
            let h = 1e-4 * base[k].abs().max(0.1);
            let at = |d: f64| {
                let mut v = base.clone();
                v[k] += d;
                lik.workspace(&theta.with_values(&v).unwrap(), DerivOrder::Value).unwrap().log_likelihood()
            };
            let fd = common::derivative(&at, 0.0, h);
            assert!(rel_err(g[k], fd, 1.0) < 1e-6, "rate {rate} k={k}: {} vs {fd}", g[k]);
        }
    }
}
