//! Penalized IRWLS for the Poisson log-rate model and the information
//! criterion used to compare fits.

use ndarray::{s, Array1, Array2, Array3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::basis::BasisSet;
use crate::data::AugmentedArray;
use crate::error::{Error, Result};
use crate::glam::{
    linear_predictor, transpose_apply, weighted_normal_matrix, weighted_rhs, BlockDesign,
    CoefLayout,
};
use crate::linalg::Cholesky;
use crate::penalty::{assemble_age_time_penalty, assemble_penalty, PenaltyConfig};

/// Deaths and exposures laid out over `(age, slot, year)`: the areas followed
/// by the all-area totals slot.
#[derive(Debug, Clone)]
pub struct Observations {
    pub deaths: Array3<f64>,
    pub exposures: Array3<f64>,
}

impl Observations {
    pub fn full(data: &AugmentedArray) -> Self {
        let (m, n, l) = data.base.deaths.dim();
        let mut deaths = Array3::zeros((m, n + 1, l));
        let mut exposures = Array3::zeros((m, n + 1, l));
        deaths.slice_mut(s![.., ..n, ..]).assign(&data.base.deaths);
        exposures
            .slice_mut(s![.., ..n, ..])
            .assign(&data.base.exposures);
        deaths
            .index_axis_mut(Axis(1), n)
            .assign(&data.totals_deaths);
        exposures
            .index_axis_mut(Axis(1), n)
            .assign(&data.totals_exposures);
        Observations { deaths, exposures }
    }

    /// The totals alone, for the age–time model.
    pub fn totals_only(data: &AugmentedArray) -> Self {
        Observations {
            deaths: data.totals_deaths.clone().insert_axis(Axis(1)),
            exposures: data.totals_exposures.clone().insert_axis(Axis(1)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IrwlsControls {
    pub max_iterations: usize,
    /// Converged when the largest coefficient change falls below this.
    pub tolerance: f64,
    /// ... or when the relative change in penalized deviance falls below this.
    pub deviance_tolerance: f64,
    pub max_halvings: usize,
    /// Count the totals rows in the deviance, effective dimension and N
    /// entering the information criterion.
    pub include_totals_in_criteria: bool,
}

impl Default for IrwlsControls {
    fn default() -> Self {
        IrwlsControls {
            max_iterations: 50,
            tolerance: 1e-6,
            deviance_tolerance: 1e-8,
            max_halvings: 10,
            include_totals_in_criteria: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub theta: Array1<f64>,
    pub layout: CoefLayout,
    /// Fitted log-mortality, `(age, area, year)`.
    pub eta_hat: Array3<f64>,
    /// Fitted log-mortality of the totals rows, `(age, year)`.
    pub eta_totals: Array2<f64>,
    pub deviance: f64,
    pub effective_dimension: f64,
    /// NaN when fewer than three cells carry exposure.
    pub hqic: f64,
    pub n_obs: f64,
    /// Cholesky factor of `X'ŴX + P`; its inverse is the coefficient
    /// covariance.
    pub factor: Cholesky,
    pub converged: bool,
    pub iterations: usize,
    /// Penalized deviance after each iteration, starting with the initial
    /// value.
    pub trace: Vec<f64>,
}

impl FitResult {
    pub fn gamma(&self) -> Array1<f64> {
        self.theta.slice(s![self.layout.block3.clone()]).to_owned()
    }

    /// Fitted deaths `exp(η̂) ⊙ e` for the area cells.
    pub fn fitted_deaths(&self, exposures: &Array3<f64>) -> Array3<f64> {
        let mut out = self.eta_hat.mapv(f64::exp);
        out *= exposures;
        out
    }
}

/// `DEV + 2 ln(ln N) ED`
pub fn hqic(deviance: f64, ed: f64, n_obs: f64) -> Result<f64> {
    if !(n_obs >= 3.0) {
        return Err(Error::InvalidArgument(format!(
            "HQIC needs at least 3 observations, got {n_obs}"
        )));
    }
    Ok(deviance + 2.0 * n_obs.ln().ln() * ed)
}

/// Poisson deviance `2 Σ [y ln(y/ŷ) − (y − ŷ)]` over cells with positive
/// exposure; `0 ln 0 = 0`.
pub fn poisson_deviance(deaths: &Array3<f64>, exposures: &Array3<f64>, eta: &Array3<f64>) -> f64 {
    let mut total = 0.0;
    Zip::from(deaths)
        .and(exposures)
        .and(eta)
        .for_each(|&y, &e, &h| {
            if e > 0.0 {
                let fitted = h.exp() * e;
                let term = if y > 0.0 { y * (y / fitted).ln() } else { 0.0 };
                total += term - (y - fitted);
            }
        });
    2.0 * total
}

fn slot_predictor(design: &BlockDesign, theta: &Array1<f64>) -> Result<Array3<f64>> {
    let (eta, totals) = linear_predictor(design, theta)?;
    let (m, n, l) = (design.m(), design.n_areas, design.l());
    let mut out = Array3::zeros((m, n + 1, l));
    out.slice_mut(s![.., ..n, ..]).assign(&eta);
    out.index_axis_mut(Axis(1), n).assign(&totals);
    Ok(out)
}

fn penalized_deviance(
    obs: &Observations,
    eta: &Array3<f64>,
    penalty: &Array2<f64>,
    theta: &Array1<f64>,
) -> f64 {
    poisson_deviance(&obs.deaths, &obs.exposures, eta) + theta.dot(&penalty.dot(theta))
}

/// Starting values: log rates `ln((y + 0.5)/(e + 1))` of the totals rows,
/// smoothed with the common age–time block; everything else zero.
fn initial_theta(
    design: &BlockDesign,
    obs: &Observations,
    penalty: &Array2<f64>,
) -> Result<Array1<f64>> {
    let n = design.n_areas;
    let mut w = Array3::zeros(design.slot_shape());
    let mut z = Array3::zeros(design.slot_shape());
    for ((i, k), &e) in obs.exposures.index_axis(Axis(1), n).indexed_iter() {
        if e > 0.0 {
            w[[i, n, k]] = 1.0;
            z[[i, n, k]] = ((obs.deaths[[i, n, k]] + 0.5) / (e + 1.0)).ln();
        }
    }
    let b1 = design.layout.block1.clone();
    // Only the (1,1) block is needed; the other blocks see zero weight.
    let common_only = BlockDesign::new(design.ba.clone(), design.bt.clone(), None, 0, false)?;
    let w1 = w.slice(s![.., n..n + 1, ..]).to_owned();
    let z1 = z.slice(s![.., n..n + 1, ..]).to_owned();
    let mut a = weighted_normal_matrix(&common_only, &w1)?;
    a += &penalty.slice(s![b1.clone(), b1.clone()]);
    a.diag_mut().mapv_inplace(|d| d + 1e-8);
    let rhs = weighted_rhs(&common_only, &w1, &z1)?;
    let theta1 = Cholesky::factor(&a)?.solve(&rhs)?;
    let mut theta = Array1::zeros(design.n_coef());
    theta.slice_mut(s![b1]).assign(&theta1);
    Ok(theta)
}

struct WorkingValues {
    weights: Array3<f64>,
    response: Array3<f64>,
}

fn working_values(obs: &Observations, eta: &Array3<f64>) -> WorkingValues {
    let mut weights = Array3::zeros(eta.dim());
    let mut response = Array3::zeros(eta.dim());
    Zip::from(&mut weights)
        .and(&mut response)
        .and(&obs.deaths)
        .and(&obs.exposures)
        .and(eta)
        .for_each(|w, z, &y, &e, &h| {
            if e > 0.0 {
                let fitted = h.exp() * e;
                if fitted > 0.0 && fitted.is_finite() {
                    *w = fitted;
                    *z = h + (y - fitted) / fitted;
                }
            }
        });
    WorkingValues { weights, response }
}

/// Relative diagonal jitters tried when `X'WX + P` fails to factor.
pub const JITTERS: [f64; 3] = [1e-12, 1e-10, 1e-8];

/// Cholesky of the penalized system. When the weights of penalty-free
/// directions collapse (for example all-zero deaths) the matrix can lose
/// definiteness in floating point; a small jitter scaled by the largest
/// diagonal entry is then added.
fn factor_system(mut a: Array2<f64>) -> Result<Cholesky> {
    let first = match Cholesky::factor(&a) {
        Ok(f) => return Ok(f),
        Err(e) => e,
    };
    let scale = a.diag().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut added = 0.0;
    for eps in JITTERS {
        let bump = eps * scale - added;
        a.diag_mut().mapv_inplace(|d| d + bump);
        added += bump;
        if let Ok(f) = Cholesky::factor(&a) {
            return Ok(f);
        }
    }
    Err(first)
}

/// Runs penalized IRWLS for an arbitrary block design and penalty.
pub fn fit_design(
    design: &BlockDesign,
    obs: &Observations,
    penalty: &Array2<f64>,
    controls: &IrwlsControls,
) -> Result<FitResult> {
    if obs.deaths.dim() != design.slot_shape() || obs.exposures.dim() != design.slot_shape() {
        return Err(Error::DimensionMismatch(format!(
            "observations {:?} vs design slots {:?}",
            obs.deaths.dim(),
            design.slot_shape()
        )));
    }
    let p = design.n_coef();
    if penalty.dim() != (p, p) {
        return Err(Error::DimensionMismatch(format!(
            "penalty {:?} for {p} coefficients",
            penalty.dim()
        )));
    }

    let mut theta = initial_theta(design, obs, penalty)?;
    let mut eta = slot_predictor(design, &theta)?;
    let mut pdev = penalized_deviance(obs, &eta, penalty, &theta);
    let mut trace = vec![pdev];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < controls.max_iterations {
        iterations += 1;
        let wv = working_values(obs, &eta);
        let gram = weighted_normal_matrix(design, &wv.weights)?;
        let factor = factor_system(gram + penalty)?;
        let target = factor.solve(&weighted_rhs(design, &wv.weights, &wv.response)?)?;

        let step = &target - &theta;
        let mut scale = 1.0;
        let mut candidate = target;
        let mut cand_eta = slot_predictor(design, &candidate)?;
        let mut cand_pdev = penalized_deviance(obs, &cand_eta, penalty, &candidate);
        let mut halvings = 0;
        while (!cand_pdev.is_finite() || (iterations > 1 && cand_pdev > pdev))
            && halvings < controls.max_halvings
        {
            halvings += 1;
            scale *= 0.5;
            candidate = &theta + &(&step * scale);
            cand_eta = slot_predictor(design, &candidate)?;
            cand_pdev = penalized_deviance(obs, &cand_eta, penalty, &candidate);
        }
        if !cand_pdev.is_finite() {
            return Err(Error::NotConverged { iterations, trace });
        }

        let max_change = (&candidate - &theta)
            .iter()
            .fold(0.0f64, |acc, v| acc.max(v.abs()));
        // The offset keeps the criterion usable when the deviance tends to
        // zero, as with all-zero death counts.
        let rel_change = (pdev - cand_pdev).abs() / (cand_pdev.abs() + 0.1);
        theta = candidate;
        eta = cand_eta;
        pdev = cand_pdev;
        trace.push(pdev);
        if max_change < controls.tolerance || rel_change < controls.deviance_tolerance {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NotConverged { iterations, trace });
    }

    // Covariance factor and criteria at the converged coefficients.
    let wv = working_values(obs, &eta);
    let gram = weighted_normal_matrix(design, &wv.weights)?;
    let factor = factor_system(&gram + penalty)?;
    let n = design.n_areas;

    let (deviance, criterion_gram, n_obs) = if controls.include_totals_in_criteria {
        let n_obs = obs.exposures.iter().filter(|&&e| e > 0.0).count();
        (
            poisson_deviance(&obs.deaths, &obs.exposures, &eta),
            gram,
            n_obs,
        )
    } else {
        let area = s![.., ..n, ..];
        let mut w_areas = wv.weights.clone();
        w_areas.index_axis_mut(Axis(1), n).fill(0.0);
        let n_obs = obs
            .exposures
            .slice(area)
            .iter()
            .filter(|&&e| e > 0.0)
            .count();
        (
            poisson_deviance(
                &obs.deaths.slice(area).to_owned(),
                &obs.exposures.slice(area).to_owned(),
                &eta.slice(area).to_owned(),
            ),
            weighted_normal_matrix(design, &w_areas)?,
            n_obs,
        )
    };
    let effective_dimension = factor.trace_solve(&criterion_gram)?;
    let n_obs = n_obs as f64;
    // Undefined below three cells; such fits are still usable.
    let criterion = hqic(deviance, effective_dimension, n_obs).unwrap_or(f64::NAN);

    let eta_hat = eta.slice(s![.., ..n, ..]).to_owned();
    let eta_totals = eta.index_axis(Axis(1), n).to_owned();
    Ok(FitResult {
        theta,
        layout: design.layout.clone(),
        eta_hat,
        eta_totals,
        deviance,
        effective_dimension,
        hqic: criterion,
        n_obs,
        factor,
        converged,
        iterations,
        trace,
    })
}

/// Fits the full three-block model to the augmented data.
pub fn fit(
    data: &AugmentedArray,
    basis: &BasisSet,
    config: &PenaltyConfig,
    controls: &IrwlsControls,
) -> Result<FitResult> {
    let design = BlockDesign::full(basis)?;
    let penalty = assemble_penalty(config, basis)?;
    fit_design(&design, &Observations::full(data), &penalty, controls)
}

/// Fits the age–time surface alone to the totals.
pub fn fit_age_time(
    data: &AugmentedArray,
    basis: &BasisSet,
    config: &PenaltyConfig,
    controls: &IrwlsControls,
) -> Result<FitResult> {
    let design = BlockDesign::age_time(basis)?;
    let penalty = assemble_age_time_penalty(config, basis)?;
    fit_design(
        &design,
        &Observations::totals_only(data),
        &penalty,
        controls,
    )
}

/// `X'(y − μ̂ ⊙ e) − P θ̂`; zero at a stationary point of the penalized
/// likelihood.
pub fn score_residual(
    design: &BlockDesign,
    obs: &Observations,
    penalty: &Array2<f64>,
    theta: &Array1<f64>,
) -> Result<Array1<f64>> {
    let eta = slot_predictor(design, theta)?;
    let mut resid = Array3::zeros(eta.dim());
    Zip::from(&mut resid)
        .and(&obs.deaths)
        .and(&obs.exposures)
        .and(&eta)
        .for_each(|r, &y, &e, &h| {
            if e > 0.0 {
                *r = y - h.exp() * e;
            }
        });
    let mut g = transpose_apply(design, &resid)?;
    g -= &penalty.dot(theta);
    Ok(g)
}
