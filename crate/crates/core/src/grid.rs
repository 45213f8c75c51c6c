//! Two-stage smoothing-parameter search minimizing HQIC.
//!
//! Stage 1 chooses `(λ_a, λ_t)` on the age–time model fitted to the totals.
//! Stage 2 keeps those fixed, holds `λ̆_t` at a constant (zero by default),
//! and searches `(λ_lon, λ_lat, λ̆_a, κ)` on the full model.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::BasisSet;
use crate::data::AugmentedArray;
use crate::error::{Error, Result};
use crate::glam::BlockDesign;
use crate::penalty::{assemble_age_time_penalty, assemble_penalty, PenaltyConfig};
use crate::solver::{fit_design, FitResult, IrwlsControls, Observations};

/// `10^{-2}, 10^{-1.5}, ..., 10^{6}`
pub fn default_log_grid() -> Vec<f64> {
    (0..=16)
        .map(|i| 10f64.powf(-2.0 + 0.5 * i as f64))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub lambda_a: Vec<f64>,
    pub lambda_t: Vec<f64>,
    pub lambda_lon: Vec<f64>,
    pub lambda_lat: Vec<f64>,
    pub lambda_a_reduced: Vec<f64>,
    pub kappa: Vec<f64>,
    /// Held fixed during the search.
    pub lambda_t_reduced: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        let g = default_log_grid();
        GridSpec {
            lambda_a: g.clone(),
            lambda_t: g.clone(),
            lambda_lon: g.clone(),
            lambda_lat: g.clone(),
            lambda_a_reduced: g.clone(),
            kappa: g,
            lambda_t_reduced: 0.0,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        let lists = [
            ("lambda_a", &self.lambda_a),
            ("lambda_t", &self.lambda_t),
            ("lambda_lon", &self.lambda_lon),
            ("lambda_lat", &self.lambda_lat),
            ("lambda_a_reduced", &self.lambda_a_reduced),
            ("kappa", &self.kappa),
        ];
        for (name, values) in lists {
            if values.is_empty() {
                return Err(Error::InvalidArgument(format!("grid for {name} is empty")));
            }
            if values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::InvalidArgument(format!(
                    "grid for {name} must hold positive values"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub config: PenaltyConfig,
    pub deviance: f64,
    pub effective_dimension: f64,
    pub hqic: f64,
    pub error: Option<String>,
}

impl GridPoint {
    fn from_fit(config: PenaltyConfig, fit: Result<FitResult>) -> Self {
        match fit {
            Ok(f) => GridPoint {
                config,
                deviance: f.deviance,
                effective_dimension: f.effective_dimension,
                hqic: f.hqic,
                error: None,
            },
            Err(e) => GridPoint {
                config,
                deviance: f64::NAN,
                effective_dimension: f64::NAN,
                hqic: f64::NAN,
                error: Some(e.to_string()),
            },
        }
    }

    pub fn ok(&self) -> bool {
        self.error.is_none() && self.hqic.is_finite()
    }
}

#[derive(Debug, Clone)]
pub struct GridSearchResult {
    pub stage1: Vec<GridPoint>,
    pub stage2: Vec<GridPoint>,
    pub best: PenaltyConfig,
    pub best_stage1: usize,
    pub best_stage2: usize,
}

fn argmin(points: &[GridPoint]) -> Result<usize> {
    points
        .iter()
        .enumerate()
        .filter(|(_, p)| p.ok())
        .fold(None, |best: Option<(usize, f64)>, (i, p)| match best {
            Some((_, h)) if h <= p.hqic => best,
            _ => Some((i, p.hqic)),
        })
        .map(|(i, _)| i)
        .ok_or(Error::GridExhausted)
}

fn run_points<F>(configs: Vec<PenaltyConfig>, workers: usize, f: F) -> Result<Vec<GridPoint>>
where
    F: Fn(&PenaltyConfig) -> Result<FitResult> + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    Ok(pool.install(|| {
        configs
            .into_par_iter()
            .map(|c| {
                let fit = f(&c);
                GridPoint::from_fit(c, fit)
            })
            .collect()
    }))
}

pub fn grid_search(
    data: &AugmentedArray,
    basis: &BasisSet,
    grids: &GridSpec,
    controls: &IrwlsControls,
    workers: usize,
) -> Result<GridSearchResult> {
    grids.validate()?;
    let first_kappa = grids.kappa[0];

    let age_time = BlockDesign::age_time(basis)?;
    let totals = Observations::totals_only(data);
    let mut stage1_configs = Vec::new();
    for &lambda_a in &grids.lambda_a {
        for &lambda_t in &grids.lambda_t {
            stage1_configs.push(PenaltyConfig {
                lambda_a,
                lambda_t,
                lambda_lon: grids.lambda_lon[0],
                lambda_lat: grids.lambda_lat[0],
                lambda_a_reduced: grids.lambda_a_reduced[0],
                lambda_t_reduced: grids.lambda_t_reduced,
                kappa: first_kappa,
            });
        }
    }
    let stage1 = run_points(stage1_configs, workers, |c| {
        let penalty = assemble_age_time_penalty(c, basis)?;
        fit_design(&age_time, &totals, &penalty, controls)
    })?;
    let best_stage1 = argmin(&stage1)?;
    let (lambda_a, lambda_t) = (
        stage1[best_stage1].config.lambda_a,
        stage1[best_stage1].config.lambda_t,
    );

    let full = BlockDesign::full(basis)?;
    let obs = Observations::full(data);
    let mut stage2_configs = Vec::new();
    for &lambda_lon in &grids.lambda_lon {
        for &lambda_lat in &grids.lambda_lat {
            for &lambda_a_reduced in &grids.lambda_a_reduced {
                for &kappa in &grids.kappa {
                    stage2_configs.push(PenaltyConfig {
                        lambda_a,
                        lambda_t,
                        lambda_lon,
                        lambda_lat,
                        lambda_a_reduced,
                        lambda_t_reduced: grids.lambda_t_reduced,
                        kappa,
                    });
                }
            }
        }
    }
    let stage2 = run_points(stage2_configs, workers, |c| {
        let penalty = assemble_penalty(c, basis)?;
        fit_design(&full, &obs, &penalty, controls)
    })?;
    let best_stage2 = argmin(&stage2)?;
    Ok(GridSearchResult {
        best: stage2[best_stage2].config,
        stage1,
        stage2,
        best_stage1,
        best_stage2,
    })
}

fn write_table(
    path: &Path,
    comment: Option<&str>,
    header: &str,
    rows: impl Iterator<Item = String>,
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    if let Some(c) = comment {
        writeln!(out, "# {c}").map_err(io)?;
    }
    writeln!(out, "{header}").map_err(io)?;
    for r in rows {
        writeln!(out, "{r}").map_err(io)?;
    }
    out.flush().map_err(io)
}

fn error_cell(p: &GridPoint) -> String {
    p.error
        .as_deref()
        .map(|e| format!("\"{}\"", e.replace('"', "'")))
        .unwrap_or_default()
}

impl GridSearchResult {
    pub fn write_stage1(&self, path: &Path, comment: Option<&str>) -> Result<()> {
        write_table(
            path,
            comment,
            "lambda_a,lambda_t,deviance,ed,hqic,error",
            self.stage1.iter().map(|p| {
                format!(
                    "{},{},{},{},{},{}",
                    p.config.lambda_a,
                    p.config.lambda_t,
                    p.deviance,
                    p.effective_dimension,
                    p.hqic,
                    error_cell(p)
                )
            }),
        )
    }

    pub fn write_stage2(&self, path: &Path, comment: Option<&str>) -> Result<()> {
        write_table(
            path,
            comment,
            "lambda_lon,lambda_lat,lambda_a_reduced,kappa,deviance,ed,hqic,error",
            self.stage2.iter().map(|p| {
                format!(
                    "{},{},{},{},{},{},{},{}",
                    p.config.lambda_lon,
                    p.config.lambda_lat,
                    p.config.lambda_a_reduced,
                    p.config.kappa,
                    p.deviance,
                    p.effective_dimension,
                    p.hqic,
                    error_cell(p)
                )
            }),
        )
    }
}
