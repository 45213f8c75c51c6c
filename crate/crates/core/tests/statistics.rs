use std::collections::HashMap;

use mortsurf::basis::{build_basis_set, BasisConfig};
use mortsurf::data::augment_with_totals;
use mortsurf::grid::{grid_search, GridSpec};
use mortsurf::inference::{interval, sample_from};
use mortsurf::lifetable::LifeTableConventions;
use mortsurf::linalg::Cholesky;
use mortsurf::penalty::PenaltyConfig;
use mortsurf::simulate::{generate, Scenario};
use mortsurf::solver::{fit, IrwlsControls};
use mortsurf::validate::validate_aggregation;
use ndarray::{array, Array1, Axis};

fn basis_config() -> BasisConfig {
    BasisConfig {
        age: 7,
        time: 4,
        lon: 4,
        lat: 4,
        age_reduced: 5,
        time_reduced: 4,
        degree: 3,
        difference_order: 2,
        shock_years: vec![],
        infant: false,
    }
}

fn scenario(n_areas: usize, seed: u64) -> Scenario {
    Scenario {
        age_min: 50,
        age_max: 79,
        year_min: 2010,
        year_max: 2014,
        n_areas,
        mean_exposure: 1000.0,
        seed,
        ..Scenario::default()
    }
}

#[test]
fn draws_reproduce_the_inverse_covariance() {
    let a = array![[4.0, 1.2, 0.3], [1.2, 2.5, -0.4], [0.3, -0.4, 1.5]];
    let factor = Cholesky::factor(&a).unwrap();
    let sigma = factor.inverse().unwrap();
    let theta = array![1.0, -2.0, 0.5];
    let b = 5000;
    let d = sample_from(&theta, &factor, b, 17).unwrap();
    let mean = d.draws.mean_axis(Axis(0)).unwrap();
    for i in 0..3 {
        let se = (sigma[[i, i]] / b as f64).sqrt();
        assert!(
            (mean[i] - theta[i]).abs() < 4.0 * se,
            "mean {i}: {} vs {}",
            mean[i],
            theta[i]
        );
    }
    let centred = &d.draws - &mean;
    let cov = centred.t().dot(&centred) / (b as f64 - 1.0);
    for i in 0..3 {
        let rel = (cov[[i, i]] - sigma[[i, i]]).abs() / sigma[[i, i]];
        assert!(
            rel < 0.1,
            "variance {i}: {} vs {}",
            cov[[i, i]],
            sigma[[i, i]]
        );
    }
}

#[test]
fn linear_summary_matches_normal_theory() {
    let a = array![[3.0, 0.5], [0.5, 2.0]];
    let factor = Cholesky::factor(&a).unwrap();
    let sigma = factor.inverse().unwrap();
    let theta = array![0.2, 0.7];
    let c = array![1.5, -0.5];
    let d = sample_from(&theta, &factor, 5000, 3).unwrap();
    let i = interval(|t| t.dot(&c), &d, &theta, 0.95).unwrap();
    let sd = c.dot(&sigma.dot(&c)).sqrt();
    let point = c.dot(&theta);
    assert_eq!(i.point, point);
    assert!((i.lo - (point - 1.959964 * sd)).abs() < 0.1 * sd, "{i:?}");
    assert!((i.hi - (point + 1.959964 * sd)).abs() < 0.1 * sd, "{i:?}");
}

#[test]
fn simulated_deaths_have_poisson_means() {
    let sim = generate(&scenario(40, 8)).unwrap();
    let expected: f64 = (sim.eta.mapv(f64::exp) * &sim.data.exposures).sum();
    let observed = sim.data.deaths.sum();
    assert!(
        (observed - expected).abs() < 3.0 * expected.sqrt(),
        "{observed} vs {expected}"
    );
    assert!(sim
        .data
        .deaths
        .iter()
        .all(|d| d.fract() == 0.0 && *d >= 0.0));
}

#[test]
fn heavier_age_smoothing_wins_on_a_linear_truth() {
    let sim = generate(&scenario(16, 21)).unwrap();
    let basis = build_basis_set(&sim.data, &basis_config()).unwrap();
    let grids = GridSpec {
        lambda_a: vec![1e-2, 1e4],
        lambda_t: vec![100.0],
        lambda_lon: vec![1.0],
        lambda_lat: vec![1.0],
        lambda_a_reduced: vec![10.0],
        kappa: vec![1.0],
        lambda_t_reduced: 0.0,
    };
    let r = grid_search(
        &augment_with_totals(&sim.data),
        &basis,
        &grids,
        &IrwlsControls::default(),
        2,
    )
    .unwrap();
    assert_eq!(r.stage1.len(), 2);
    assert_eq!(r.best.lambda_a, 1e4, "{:?}", r.stage1);
}

#[test]
fn grouped_model_e0_tracks_direct_estimates() {
    let sim = generate(&scenario(36, 5)).unwrap();
    let basis = build_basis_set(&sim.data, &basis_config()).unwrap();
    let cfg = PenaltyConfig {
        lambda_a: 100.0,
        lambda_t: 100.0,
        lambda_lon: 1.0,
        lambda_lat: 1.0,
        lambda_a_reduced: 100.0,
        lambda_t_reduced: 0.0,
        kappa: 1.0,
    };
    let f = fit(
        &augment_with_totals(&sim.data),
        &basis,
        &cfg,
        &IrwlsControls::default(),
    )
    .unwrap();
    let grouping: HashMap<String, String> = sim
        .data
        .area_ids
        .iter()
        .enumerate()
        .map(|(j, id)| (id.clone(), format!("G{}", j % 2)))
        .collect();
    let rows = validate_aggregation(
        &f.eta_hat,
        &sim.data,
        &grouping,
        &LifeTableConventions::default(),
    )
    .unwrap();
    assert_eq!(rows.len(), 2 * 5);
    for r in rows {
        assert!((r.e0_model - r.e0_direct).abs() < 1.5, "{r:?}");
    }
}

#[test]
fn refits_converge_across_seeds() {
    let cfg = PenaltyConfig {
        lambda_a: 10.0,
        lambda_t: 10.0,
        lambda_lon: 1.0,
        lambda_lat: 1.0,
        lambda_a_reduced: 10.0,
        lambda_t_reduced: 0.0,
        kappa: 1.0,
    };
    for seed in 30..34 {
        let sim = generate(&scenario(9, seed)).unwrap();
        let basis = build_basis_set(&sim.data, &basis_config()).unwrap();
        let f = fit(
            &augment_with_totals(&sim.data),
            &basis,
            &cfg,
            &IrwlsControls::default(),
        )
        .unwrap();
        assert!(f.converged);
        assert!(f.hqic.is_finite());
        let resid: Array1<f64> = (&f.eta_hat - &sim.eta).iter().copied().collect();
        let rmse = (resid.mapv(|v| v * v).mean().unwrap()).sqrt();
        assert!(rmse < 0.1, "seed {seed}: {rmse}");
    }
}
