//! Synthetic mortality data with a known closed-form log-rate surface.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use ndarray::Array3;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::data::MortalityArray;
use crate::error::{Error, Result};

/// Upper bound on simulated hazards.
pub const MAX_RATE: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Truth {
    /// Log rate at age 0 of the Gompertz line.
    pub gompertz_level: f64,
    /// Increase in log rate per year of age.
    pub gompertz_slope: f64,
    /// Log rate at age 0 when it departs from the Gompertz line.
    pub infant_log_rate: Option<f64>,
    /// Amplitude of `sin(πx) cos(πy)` over the unit square.
    pub spatial_amplitude: f64,
    /// Relative change in the spatial term per 100 years of age.
    pub spatial_age_interaction: f64,
    /// Change in log rate per calendar year.
    pub trend_slope: f64,
    /// `(area index, γ)` pairs added to one area at every age and year.
    pub outliers: Vec<(usize, f64)>,
    /// Standard deviation of a normal γ drawn for every area.
    pub gamma_sd: f64,
    /// `(year, increment)` pairs added to every cell of that year.
    pub shocks: Vec<(i32, f64)>,
}

impl Default for Truth {
    fn default() -> Self {
        Truth {
            gompertz_level: -9.5,
            gompertz_slope: 0.09,
            infant_log_rate: None,
            spatial_amplitude: 0.2,
            spatial_age_interaction: 0.0,
            trend_slope: -0.02,
            outliers: Vec::new(),
            gamma_sd: 0.0,
            shocks: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub age_min: i32,
    /// Start of the open interval.
    pub age_max: i32,
    pub year_min: i32,
    pub year_max: i32,
    pub n_areas: usize,
    pub mean_exposure: f64,
    pub exposure_cv: f64,
    pub truth: Truth,
    pub seed: u64,
    pub sex: String,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            age_min: 50,
            age_max: 79,
            year_min: 2010,
            year_max: 2019,
            n_areas: 100,
            mean_exposure: 300.0,
            exposure_cv: 0.3,
            truth: Truth::default(),
            seed: 1,
            sex: "f".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Simulated {
    pub data: MortalityArray,
    /// True log rates `(age, area, year)`.
    pub eta: Array3<f64>,
    /// Area effects actually applied.
    pub gamma: Vec<f64>,
}

impl Scenario {
    pub fn ages(&self) -> Vec<i32> {
        (self.age_min..=self.age_max).collect()
    }

    pub fn years(&self) -> Vec<i32> {
        (self.year_min..=self.year_max).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.age_max <= self.age_min || self.year_max < self.year_min || self.n_areas == 0 {
            return Err(Error::InvalidArgument(
                "scenario needs ≥2 ages, ≥1 year and ≥1 area".into(),
            ));
        }
        if !(self.mean_exposure > 0.0 && self.exposure_cv >= 0.0 && self.truth.gamma_sd >= 0.0) {
            return Err(Error::InvalidArgument(
                "mean exposure must be positive and spreads non-negative".into(),
            ));
        }
        if let Some((j, _)) = self.truth.outliers.iter().find(|(j, _)| *j >= self.n_areas) {
            return Err(Error::InvalidArgument(format!(
                "outlier area {j} out of range"
            )));
        }
        if let Some((y, _)) = self
            .truth
            .shocks
            .iter()
            .find(|(y, _)| !(self.year_min..=self.year_max).contains(y))
        {
            return Err(Error::InvalidArgument(format!(
                "shock year {y} out of range"
            )));
        }
        Ok(())
    }

    /// Log rate before area effects.
    pub fn smooth_eta(&self, age: i32, centroid: [f64; 2], year: i32) -> f64 {
        let t = &self.truth;
        let base = match t.infant_log_rate {
            Some(r) if age == 0 => r,
            _ => t.gompertz_level + t.gompertz_slope * age as f64,
        };
        let spatial = t.spatial_amplitude
            * (PI * centroid[0]).sin()
            * (PI * centroid[1]).cos()
            * (1.0 + t.spatial_age_interaction * (age - self.age_min) as f64 / 100.0);
        let shock: f64 = t
            .shocks
            .iter()
            .filter(|(y, _)| *y == year)
            .map(|(_, d)| d)
            .sum();
        base + spatial + t.trend_slope * (year - self.year_min) as f64 + shock
    }
}

/// Seed of replication `r`, derived from a base seed.
pub fn replicate_seed(seed: u64, r: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(r);
    rng.next_u64()
}

pub fn generate(scenario: &Scenario) -> Result<Simulated> {
    scenario.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let ages = scenario.ages();
    let years = scenario.years();
    let (m, n, l) = (ages.len(), scenario.n_areas, years.len());

    let side = (n as f64).sqrt().ceil() as usize;
    let centroids: Vec<[f64; 2]> = (0..n)
        .map(|j| {
            let jitter = |rng: &mut ChaCha8Rng| rng.random_range(-0.3..0.3);
            let x = ((j % side) as f64 + 0.5 + jitter(&mut rng)) / side as f64;
            let y = ((j / side) as f64 + 0.5 + jitter(&mut rng)) / side as f64;
            [x, y]
        })
        .collect();

    let mut gamma = vec![0.0; n];
    if scenario.truth.gamma_sd > 0.0 {
        let normal = Normal::new(0.0, scenario.truth.gamma_sd).expect("sd checked");
        for g in gamma.iter_mut() {
            *g = normal.sample(&mut rng);
        }
    }
    for &(j, d) in &scenario.truth.outliers {
        gamma[j] += d;
    }

    let mut eta = Array3::zeros((m, n, l));
    for (i, &age) in ages.iter().enumerate() {
        for j in 0..n {
            for (k, &year) in years.iter().enumerate() {
                let v = scenario.smooth_eta(age, centroids[j], year) + gamma[j];
                if !(v.exp() <= MAX_RATE) {
                    return Err(Error::InvalidArgument(format!(
                        "simulated rate {} at age {age} exceeds {MAX_RATE}",
                        v.exp()
                    )));
                }
                eta[[i, j, k]] = v;
            }
        }
    }

    let cv = scenario.exposure_cv;
    let sigma2 = (1.0 + cv * cv).ln();
    let lognormal = LogNormal::new(scenario.mean_exposure.ln() - sigma2 / 2.0, sigma2.sqrt())
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let exposures = Array3::from_shape_simple_fn((m, n, l), || lognormal.sample(&mut rng));
    let mut deaths = Array3::zeros((m, n, l));
    for ((idx, d), e) in deaths.indexed_iter_mut().zip(exposures.iter()) {
        let mean = eta[idx].exp() * e;
        *d = if mean > 0.0 {
            Poisson::new(mean)
                .map_err(|err| Error::InvalidArgument(err.to_string()))?
                .sample(&mut rng)
        } else {
            0.0
        };
    }

    let width = n.to_string().len();
    let data = MortalityArray {
        deaths,
        exposures,
        ages,
        open_last_age: true,
        years,
        area_ids: (0..n).map(|j| format!("A{j:0width$}")).collect(),
        centroids,
        sex: scenario.sex.clone(),
    };
    data.validate()?;
    Ok(Simulated { data, eta, gamma })
}

/// Writes the true log rates as `age,area_id,year,eta`.
pub fn write_truth(sim: &Simulated, path: &Path, comment: Option<&str>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    if let Some(c) = comment {
        writeln!(out, "# {c}").map_err(io)?;
    }
    writeln!(out, "age,area_id,year,eta").map_err(io)?;
    let d = &sim.data;
    for (i, age) in d.ages.iter().enumerate() {
        for (j, id) in d.area_ids.iter().enumerate() {
            for (k, year) in d.years.iter().enumerate() {
                writeln!(out, "{age},{id},{year},{}", sim.eta[[i, j, k]]).map_err(io)?;
            }
        }
    }
    out.flush().map_err(io)
}
