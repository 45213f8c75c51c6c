//! Command implementations behind the `mortsurf` binary.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3};
use rayon::prelude::*;

use crate::artifact::{Artifact, StoredFit};
use crate::basis::build_basis_set;
use crate::config::{LoadedConfig, RunConfig};
use crate::data::{
    augment_with_totals, load_csv, load_grouping, repair_exposures, write_csv, MortalityArray,
};
use crate::error::{Error, Result};
use crate::glam::{linear_predictor, BlockDesign};
use crate::grid::grid_search;
use crate::inference::{
    classify_difference, classify_significance, interval_from_values, sample_from, Interval,
    SignificanceRule,
};
use crate::lifetable::{dissimilarity_index, e0, e0_surface, LifeTableConventions};
use crate::penalty::PenaltyConfig;
use crate::simulate::{generate, write_truth};
use crate::solver::fit;
use crate::validate::{validate_aggregation, write_rows};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// First line of every CSV the tool writes.
pub fn provenance(config_hash: &str) -> String {
    format!("mortsurf {TOOL_VERSION} config={config_hash}")
}

/// Files written by a command; removed again unless the command completes.
#[derive(Debug, Default)]
pub struct Outputs {
    files: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    pub fn add(&mut self, path: PathBuf) -> PathBuf {
        self.files.push(path.clone());
        path
    }

    pub fn commit(mut self) -> Vec<PathBuf> {
        self.committed = true;
        std::mem::take(&mut self.files)
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if !self.committed {
            for f in &self.files {
                let _ = std::fs::remove_file(f);
            }
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_lines(path: &Path, comment: &str, header: &str, rows: &[String]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(out, "# {comment}").map_err(io)?;
    writeln!(out, "{header}").map_err(io)?;
    for r in rows {
        writeln!(out, "{r}").map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Sizes the global thread pool. Only the first call in a process has an
/// effect.
pub fn init_workers(workers: usize) -> Result<()> {
    if workers == 0 {
        return Err(Error::InvalidArgument("workers must be at least 1".into()));
    }
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build_global();
    Ok(())
}

fn load_config(path: &Path, workers: Option<usize>) -> Result<LoadedConfig> {
    let mut loaded = LoadedConfig::load(path)?;
    if let Some(w) = workers {
        loaded.config.workers = w;
    }
    init_workers(loaded.config.workers)?;
    Ok(loaded)
}

fn load_data(loaded: &LoadedConfig) -> Result<MortalityArray> {
    let d = &loaded.config.data;
    load_csv(
        &loaded.resolve(&d.deaths),
        &loaded.resolve(&d.exposures),
        &loaded.resolve(&d.centroids),
        &d.sex,
    )
}

#[derive(Debug, Clone)]
pub struct FitSummary {
    pub cells: usize,
    pub repairs: usize,
    pub iterations: usize,
    pub converged: bool,
    pub deviance: f64,
    pub effective_dimension: f64,
    pub hqic: f64,
    pub penalty: PenaltyConfig,
    pub artifact: PathBuf,
}

impl std::fmt::Display for FitSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "cells: {}", self.cells)?;
        writeln!(f, "repairs: {}", self.repairs)?;
        writeln!(f, "iterations: {}", self.iterations)?;
        writeln!(f, "converged: {}", self.converged)?;
        writeln!(f, "deviance: {}", self.deviance)?;
        writeln!(f, "ed: {}", self.effective_dimension)?;
        writeln!(f, "hqic: {}", self.hqic)?;
        let p = &self.penalty;
        writeln!(
            f,
            "penalty: lambda_a={} lambda_t={} lambda_lon={} lambda_lat={} lambda_a_reduced={} lambda_t_reduced={} kappa={}",
            p.lambda_a, p.lambda_t, p.lambda_lon, p.lambda_lat, p.lambda_a_reduced, p.lambda_t_reduced, p.kappa
        )?;
        write!(f, "artifact: {}", self.artifact.display())
    }
}

/// Runs the grid search and writes `stage1.csv`, `stage2.csv` and
/// `best.toml` to the output directory.
pub fn grid_command(config_path: &Path, workers: Option<usize>) -> Result<PenaltyConfig> {
    let loaded = load_config(config_path, workers)?;
    let mut outputs = Outputs::default();
    let best = run_grid(&loaded, &mut outputs)?;
    outputs.commit();
    Ok(best)
}

fn run_grid(loaded: &LoadedConfig, outputs: &mut Outputs) -> Result<PenaltyConfig> {
    let config = &loaded.config;
    let grids = config
        .grid
        .clone()
        .ok_or_else(|| Error::Config("a [grid] section is required".into()))?;
    let (repaired, _) = repair_exposures(&load_data(loaded)?)?;
    let augmented = augment_with_totals(&repaired);
    let basis = build_basis_set(&repaired, &config.basis)?;
    let result = grid_search(&augmented, &basis, &grids, &config.controls, config.workers)?;

    let dir = loaded.output_dir();
    create_dir(&dir)?;
    let comment = provenance(&config.hash()?);
    result.write_stage1(&outputs.add(dir.join("stage1.csv")), Some(&comment))?;
    result.write_stage2(&outputs.add(dir.join("stage2.csv")), Some(&comment))?;
    let best_path = outputs.add(dir.join("best.toml"));
    let text = format!(
        "# {comment}\n[penalty]\n{}",
        toml::to_string(&result.best).map_err(|e| Error::Config(e.to_string()))?
    );
    std::fs::write(&best_path, text).map_err(|e| Error::io(&best_path, e))?;
    Ok(result.best)
}

/// Loads, repairs and fits the data named in the config, then writes the
/// artifact and `repairs.csv`.
pub fn fit_command(config_path: &Path, workers: Option<usize>) -> Result<FitSummary> {
    let loaded = load_config(config_path, workers)?;
    let mut outputs = Outputs::default();
    let summary = run_fit(&loaded, &mut outputs)?;
    outputs.commit();
    Ok(summary)
}

fn run_fit(loaded: &LoadedConfig, outputs: &mut Outputs) -> Result<FitSummary> {
    let config = &loaded.config;
    let penalty = match (&config.penalty, &config.grid) {
        (Some(p), _) => *p,
        (None, Some(_)) => run_grid(loaded, outputs)?,
        (None, None) => {
            return Err(Error::Config(
                "a [penalty] section or a [grid] section is required".into(),
            ))
        }
    };
    let (repaired, report) = repair_exposures(&load_data(loaded)?)?;
    let augmented = augment_with_totals(&repaired);
    let basis = build_basis_set(&repaired, &config.basis)?;
    let result = fit(&augmented, &basis, &penalty, &config.controls)?;

    let effective = RunConfig {
        penalty: Some(penalty),
        ..config.clone()
    };
    let config_toml = effective.to_toml()?;
    let dir = loaded.output_dir();
    create_dir(&dir)?;
    let comment = provenance(&effective.hash()?);
    report.write_csv(&outputs.add(dir.join("repairs.csv")), Some(&comment))?;
    let artifact_path = outputs.add(loaded.artifact_path());
    Artifact {
        config_toml,
        data: repaired.clone(),
        repaired_cells: report.len(),
        fit: StoredFit {
            theta: result.theta.clone(),
            factor: result.factor.clone(),
            deviance: result.deviance,
            effective_dimension: result.effective_dimension,
            hqic: result.hqic,
            n_obs: result.n_obs,
            converged: result.converged,
            iterations: result.iterations,
        },
    }
    .write(&artifact_path)?;
    Ok(FitSummary {
        cells: repaired.n_cells(),
        repairs: report.len(),
        iterations: result.iterations,
        converged: result.converged,
        deviance: result.deviance,
        effective_dimension: result.effective_dimension,
        hqic: result.hqic,
        penalty,
        artifact: artifact_path,
    })
}

/// Generates the scenario in the config, writing the data files it names
/// and `truth.csv` in the output directory.
pub fn simulate_command(config_path: &Path) -> Result<Vec<PathBuf>> {
    let loaded = load_config(config_path, None)?;
    let config = &loaded.config;
    let scenario = config
        .scenario
        .as_ref()
        .ok_or_else(|| Error::Config("a [scenario] section is required".into()))?;
    let sim = generate(scenario)?;
    let comment = provenance(&config.hash()?);
    let mut outputs = Outputs::default();
    let d = &config.data;
    let paths = [&d.deaths, &d.exposures, &d.centroids].map(|p| outputs.add(loaded.resolve(p)));
    for p in &paths {
        if let Some(parent) = p.parent() {
            create_dir(parent)?;
        }
    }
    write_csv(&sim.data, &paths[0], &paths[1], &paths[2], Some(&comment))?;
    let dir = loaded.output_dir();
    create_dir(&dir)?;
    write_truth(&sim, &outputs.add(dir.join("truth.csv")), Some(&comment))?;
    Ok(outputs.commit())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeriveWhat {
    E0,
    Id,
    Change,
    Significance,
}

#[derive(Debug, Clone, Default)]
pub struct DeriveOptions {
    pub years: Option<Vec<i32>>,
    pub from: Option<i32>,
    pub to: Option<i32>,
    pub level: Option<f64>,
    pub draws: Option<usize>,
    pub seed: Option<u64>,
    pub rule: Option<SignificanceRule>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
}

/// Model state rebuilt from an artifact.
pub struct Reloaded {
    pub config: RunConfig,
    pub config_hash: String,
    pub data: MortalityArray,
    pub design: BlockDesign,
    pub artifact: Artifact,
}

impl Reloaded {
    pub fn open(path: &Path) -> Result<Self> {
        let artifact = Artifact::read(path)?;
        let config = RunConfig::from_toml(&artifact.config_toml)?;
        let basis = build_basis_set(&artifact.data, &config.basis)?;
        let design = BlockDesign::full(&basis)?;
        if design.n_coef() != artifact.fit.theta.len() {
            return Err(Error::Artifact(format!(
                "stored fit has {} coefficients, the configured basis needs {}",
                artifact.fit.theta.len(),
                design.n_coef()
            )));
        }
        Ok(Reloaded {
            config_hash: config.hash()?,
            config,
            data: artifact.data.clone(),
            design,
            artifact,
        })
    }

    pub fn year_index(&self, year: i32) -> Result<usize> {
        self.data.year_index(year).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "year {year} outside fitted range {}..{}",
                self.data.years[0],
                self.data.years[self.data.years.len() - 1]
            ))
        })
    }
}

/// e0 for every area at the chosen years and for the totals, from one
/// coefficient vector. Failed life tables give NaN.
struct E0Set {
    areas: Array2<f64>,
    totals: Array1<f64>,
}

fn e0_set(
    design: &BlockDesign,
    theta: &Array1<f64>,
    ages: &[i32],
    years: &[usize],
    conv: &LifeTableConventions,
) -> Result<E0Set> {
    let (eta, totals) = linear_predictor(design, theta)?;
    let schedule = |col: Vec<f64>| e0(&col, ages, conv).unwrap_or(f64::NAN);
    let m = ages.len();
    let n = eta.dim().1;
    let mut areas = Array2::zeros((n, years.len()));
    let mut tot = Array1::zeros(years.len());
    for (c, &k) in years.iter().enumerate() {
        for j in 0..n {
            areas[[j, c]] = schedule((0..m).map(|i| eta[[i, j, k]].exp()).collect());
        }
        tot[c] = schedule((0..m).map(|i| totals[[i, k]].exp()).collect());
    }
    Ok(E0Set { areas, totals: tot })
}

struct Derived {
    point: E0Set,
    draws: Vec<E0Set>,
}

fn derive_e0(model: &Reloaded, years: &[usize], draws: usize, seed: u64) -> Result<Derived> {
    let conv = model.config.lifetable;
    let ages = &model.data.ages;
    let theta = &model.artifact.fit.theta;
    let (eta, totals) = linear_predictor(&model.design, theta)?;
    let surface = e0_surface(&eta, &model.data, &conv)?;
    let mut point = E0Set {
        areas: Array2::zeros((eta.dim().1, years.len())),
        totals: Array1::zeros(years.len()),
    };
    for (c, &k) in years.iter().enumerate() {
        point.areas.column_mut(c).assign(&surface.column(k));
        let rates: Vec<f64> = totals.column(k).iter().map(|v| v.exp()).collect();
        point.totals[c] = e0(&rates, ages, &conv).map_err(|e| Error::LifeTableAt {
            area_id: "total".into(),
            year: model.data.years[k],
            source: Box::new(e),
        })?;
    }
    let sets = if draws == 0 {
        Vec::new()
    } else {
        let sampled = sample_from(theta, &model.artifact.fit.factor, draws, seed)?;
        (0..draws)
            .into_par_iter()
            .map(|b| {
                e0_set(
                    &model.design,
                    &sampled.draw(b).to_owned(),
                    ages,
                    years,
                    &conv,
                )
            })
            .collect::<Result<Vec<_>>>()?
    };
    Ok(Derived { point, draws: sets })
}

fn interval_of<F>(derived: &Derived, point: f64, level: f64, f: F) -> Result<Option<Interval>>
where
    F: Fn(&E0Set) -> f64,
{
    if derived.draws.is_empty() {
        return Ok(None);
    }
    let values: Vec<f64> = derived.draws.iter().map(f).collect();
    interval_from_values(&values, point, level).map(Some)
}

fn bounds(i: &Option<Interval>) -> (String, String) {
    match i {
        Some(i) => (i.lo.to_string(), i.hi.to_string()),
        None => (String::new(), String::new()),
    }
}

/// Writes the requested derived tables and returns their paths.
pub fn derive_command(
    artifact_path: &Path,
    what: DeriveWhat,
    opts: &DeriveOptions,
) -> Result<Vec<PathBuf>> {
    let model = Reloaded::open(artifact_path)?;
    init_workers(opts.workers.unwrap_or(model.config.workers))?;
    let boot = &model.config.bootstrap;
    let level = opts.level.unwrap_or(boot.level);
    let draws = opts.draws.unwrap_or(boot.draws);
    let seed = opts.seed.unwrap_or(boot.seed);
    let rule = opts.rule.unwrap_or(boot.rule);
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "level must be in (0, 1), got {level}"
        )));
    }
    let dir = opts.out.clone().unwrap_or_else(|| {
        artifact_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default()
    });
    create_dir(&dir)?;
    let comment = provenance(&model.config_hash);
    let year_list: Vec<usize> = match &opts.years {
        Some(ys) => ys
            .iter()
            .map(|&y| model.year_index(y))
            .collect::<Result<_>>()?,
        None => (0..model.data.n_years()).collect(),
    };
    let mut outputs = Outputs::default();
    let data = &model.data;

    match what {
        DeriveWhat::E0 => {
            let derived = derive_e0(&model, &year_list, draws, seed)?;
            let mut rows = Vec::new();
            for (j, id) in data.area_ids.iter().enumerate() {
                for (c, &k) in year_list.iter().enumerate() {
                    let p = derived.point.areas[[j, c]];
                    let iv = interval_of(&derived, p, level, |s| s.areas[[j, c]])?;
                    let (lo, hi) = bounds(&iv);
                    rows.push(format!("{id},{},{p},{lo},{hi}", data.years[k]));
                }
            }
            write_lines(
                &outputs.add(dir.join("e0.csv")),
                &comment,
                "area_id,year,e0,lo,hi",
                &rows,
            )?;
        }
        DeriveWhat::Id => {
            let (eta, _) = linear_predictor(&model.design, &model.artifact.fit.theta)?;
            let fitted: Array3<f64> = eta.mapv(f64::exp) * &data.exposures;
            let mut rows = Vec::new();
            for &k in &year_list {
                for (i, age) in data.ages.iter().enumerate() {
                    let id = dissimilarity_index(&fitted, &data.exposures, i, k)?;
                    rows.push(format!("{age},{},{id}", data.years[k]));
                }
            }
            write_lines(
                &outputs.add(dir.join("id.csv")),
                &comment,
                "age,year,id",
                &rows,
            )?;
        }
        DeriveWhat::Change => {
            let (from, to) = match (opts.from, opts.to) {
                (Some(f), Some(t)) => (f, t),
                _ => {
                    return Err(Error::InvalidArgument(
                        "change needs --from and --to".into(),
                    ))
                }
            };
            let pair = [model.year_index(from)?, model.year_index(to)?];
            let derived = derive_e0(&model, &pair, draws, seed)?;
            let mut rows = Vec::new();
            for (j, id) in data.area_ids.iter().enumerate() {
                let (a, b) = (derived.point.areas[[j, 0]], derived.point.areas[[j, 1]]);
                let change = b - a;
                let iv = interval_of(&derived, change, level, |s| {
                    s.areas[[j, 1]] - s.areas[[j, 0]]
                })?;
                let label = match rule {
                    SignificanceRule::Difference => iv.map(|i| classify_difference((i.lo, i.hi))),
                    SignificanceRule::Overlap => {
                        let ia = interval_of(&derived, a, level, |s| s.areas[[j, 0]])?;
                        let ib = interval_of(&derived, b, level, |s| s.areas[[j, 1]])?;
                        ia.zip(ib)
                            .map(|(ia, ib)| classify_significance((ib.lo, ib.hi), (ia.lo, ia.hi)))
                    }
                };
                let (lo, hi) = bounds(&iv);
                let label = label.map(|l| l.as_str()).unwrap_or("");
                rows.push(format!(
                    "{id},{from},{to},{a},{b},{change},{lo},{hi},{label}"
                ));
            }
            write_lines(
                &outputs.add(dir.join("change.csv")),
                &comment,
                "area_id,from,to,e0_from,e0_to,change,lo,hi,label",
                &rows,
            )?;
        }
        DeriveWhat::Significance => {
            if draws == 0 {
                return Err(Error::InvalidArgument(
                    "significance needs at least one draw".into(),
                ));
            }
            let derived = derive_e0(&model, &year_list, draws, seed)?;
            let mut rows = Vec::new();
            for (c, &k) in year_list.iter().enumerate() {
                let r_point = derived.point.totals[c];
                let reference =
                    interval_of(&derived, r_point, level, |s| s.totals[c])?.expect("draws present");
                for (j, id) in data.area_ids.iter().enumerate() {
                    let p = derived.point.areas[[j, c]];
                    let area = interval_of(&derived, p, level, |s| s.areas[[j, c]])?
                        .expect("draws present");
                    let label = match rule {
                        SignificanceRule::Overlap => {
                            classify_significance((area.lo, area.hi), (reference.lo, reference.hi))
                        }
                        SignificanceRule::Difference => {
                            let diff = interval_of(&derived, p - r_point, level, |s| {
                                s.areas[[j, c]] - s.totals[c]
                            })?
                            .expect("draws present");
                            classify_difference((diff.lo, diff.hi))
                        }
                    };
                    rows.push(format!(
                        "{id},{},{p},{},{},{r_point},{},{},{}",
                        data.years[k],
                        area.lo,
                        area.hi,
                        reference.lo,
                        reference.hi,
                        label.as_str()
                    ));
                }
            }
            write_lines(
                &outputs.add(dir.join("significance.csv")),
                &comment,
                "area_id,year,e0,lo,hi,ref_e0,ref_lo,ref_hi,label",
                &rows,
            )?;
        }
    }
    Ok(outputs.commit())
}

/// Writes `validation.csv` comparing grouped direct and model e0.
pub fn validate_command(
    artifact_path: &Path,
    grouping_path: &Path,
    out: Option<&Path>,
) -> Result<PathBuf> {
    let model = Reloaded::open(artifact_path)?;
    let grouping = load_grouping(grouping_path)?;
    let (eta, _) = linear_predictor(&model.design, &model.artifact.fit.theta)?;
    let rows = validate_aggregation(&eta, &model.data, &grouping, &model.config.lifetable)?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| {
        artifact_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default()
    });
    create_dir(&dir)?;
    let mut outputs = Outputs::default();
    let path = outputs.add(dir.join("validation.csv"));
    write_rows(&rows, &path, Some(&provenance(&model.config_hash)))?;
    outputs.commit();
    Ok(path)
}
