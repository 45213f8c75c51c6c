//! Period life tables, life expectancy surfaces and the index of
//! dissimilarity.

use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::MortalityArray;
use crate::error::{Error, Result};

/// Fraction of each interval lived by those dying in it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LifeTableConventions {
    /// Age 0.
    pub a0: f64,
    /// Every other closed interval.
    pub a: f64,
}

impl Default for LifeTableConventions {
    fn default() -> Self {
        LifeTableConventions { a0: 0.1, a: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LifeTableResult {
    pub ages: Vec<i32>,
    pub mx: Vec<f64>,
    pub qx: Vec<f64>,
    pub lx: Vec<f64>,
    pub big_lx: Vec<f64>,
    pub tx: Vec<f64>,
    pub ex: Vec<f64>,
    pub open_age: i32,
    pub e0: f64,
}

/// Life table with radix 1. The last age is the open interval.
pub fn life_table(
    rates: &[f64],
    ages: &[i32],
    conv: &LifeTableConventions,
) -> Result<LifeTableResult> {
    let m = ages.len();
    if m == 0 || rates.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "{} rates for {} ages",
            rates.len(),
            m
        )));
    }
    if ages.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument(
            "ages must be strictly increasing".into(),
        ));
    }
    if let Some(r) = rates.iter().find(|r| !(r.is_finite() && **r >= 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "invalid mortality rate {r}"
        )));
    }
    let open_rate = rates[m - 1];
    if open_rate <= 0.0 {
        return Err(Error::UndefinedOpenInterval(open_rate));
    }

    let mut qx = vec![0.0; m];
    let mut lx = vec![0.0; m];
    let mut big_lx = vec![0.0; m];
    lx[0] = 1.0;
    for i in 0..m {
        if i + 1 == m {
            qx[i] = 1.0;
            big_lx[i] = lx[i] / rates[i];
            break;
        }
        let width = (ages[i + 1] - ages[i]) as f64;
        let frac = if ages[i] == 0 { conv.a0 } else { conv.a };
        let mx = rates[i];
        let q = (width * mx / (1.0 + width * (1.0 - frac) * mx)).min(1.0);
        qx[i] = q;
        let deaths = lx[i] * q;
        lx[i + 1] = lx[i] - deaths;
        big_lx[i] = width * lx[i + 1] + frac * width * deaths;
    }
    let mut tx = vec![0.0; m];
    let mut acc = 0.0;
    for i in (0..m).rev() {
        acc += big_lx[i];
        tx[i] = acc;
    }
    let ex: Vec<f64> = (0..m)
        .map(|i| if lx[i] > 0.0 { tx[i] / lx[i] } else { 0.0 })
        .collect();
    Ok(LifeTableResult {
        ages: ages.to_vec(),
        mx: rates.to_vec(),
        qx,
        lx,
        big_lx,
        tx,
        e0: ex[0],
        ex,
        open_age: ages[m - 1],
    })
}

pub fn e0(rates: &[f64], ages: &[i32], conv: &LifeTableConventions) -> Result<f64> {
    Ok(life_table(rates, ages, conv)?.e0)
}

/// e0 for every area and year from log rates `eta` (m × n × l).
pub fn e0_surface(
    eta: &Array3<f64>,
    data: &MortalityArray,
    conv: &LifeTableConventions,
) -> Result<Array2<f64>> {
    let (m, n, l) = eta.dim();
    if m != data.n_ages() || n != data.n_areas() || l != data.n_years() {
        return Err(Error::DimensionMismatch(format!(
            "log rates {m}x{n}x{l} do not match the data"
        )));
    }
    let values: Vec<Result<f64>> = (0..n * l)
        .into_par_iter()
        .map(|idx| {
            let (j, k) = (idx / l, idx % l);
            let rates: Vec<f64> = (0..m).map(|i| eta[[i, j, k]].exp()).collect();
            e0(&rates, &data.ages, conv).map_err(|e| Error::LifeTableAt {
                area_id: data.area_ids[j].clone(),
                year: data.years[k],
                source: Box::new(e),
            })
        })
        .collect();
    let mut out = Array2::zeros((n, l));
    for (idx, v) in values.into_iter().enumerate() {
        out[[idx / l, idx % l]] = v?;
    }
    Ok(out)
}

/// e0 of the raw rates `deaths / exposures`. Cells without exposure get
/// rate zero.
pub fn raw_rate_e0(
    data: &MortalityArray,
    area: usize,
    year: usize,
    conv: &LifeTableConventions,
) -> Result<f64> {
    let rates: Vec<f64> = (0..data.n_ages())
        .map(|i| {
            let e = data.exposures[[i, area, year]];
            if e > 0.0 {
                data.deaths[[i, area, year]] / e
            } else {
                0.0
            }
        })
        .collect();
    e0(&rates, &data.ages, conv)
}

/// Half the summed absolute difference between death shares and population
/// shares across areas at one age and year.
pub fn dissimilarity_index(
    fitted_deaths: &Array3<f64>,
    exposures: &Array3<f64>,
    age: usize,
    year: usize,
) -> Result<f64> {
    if fitted_deaths.dim() != exposures.dim() {
        return Err(Error::DimensionMismatch(
            "deaths and exposures differ in shape".into(),
        ));
    }
    let (m, _, l) = exposures.dim();
    if age >= m || year >= l {
        return Err(Error::InvalidArgument(format!(
            "cell ({age}, {year}) out of range"
        )));
    }
    let d = fitted_deaths.slice(ndarray::s![age, .., year]);
    let e = exposures.slice(ndarray::s![age, .., year]);
    let (sd, se) = (d.sum(), e.sum());
    if !(sd > 0.0 && se > 0.0) {
        return Err(Error::InvalidData(format!(
            "zero deaths or exposure total at age index {age}, year index {year}"
        )));
    }
    let total: f64 = d
        .iter()
        .zip(e.iter())
        .map(|(a, b)| (a / sd - b / se).abs())
        .sum();
    Ok(0.5 * total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn single_years(top: i32) -> Vec<i32> {
        (0..=top).collect()
    }

    #[test]
    fn constant_hazard_near_inverse_rate() {
        let ages = single_years(110);
        let rates = vec![0.05; ages.len()];
        let e = e0(&rates, &ages, &LifeTableConventions::default()).unwrap();
        assert!((e - 20.0).abs() / 20.0 < 0.02, "{e}");
    }

    #[test]
    fn zero_hazard_then_open() {
        let ages = single_years(90);
        let mut rates = vec![0.0; ages.len()];
        rates[90] = 0.5;
        let lt = life_table(&rates, &ages, &LifeTableConventions::default()).unwrap();
        assert!((lt.e0 - 92.0).abs() < 1e-12);
        assert!(lt.lx.iter().all(|&v| v == 1.0));
        assert_eq!(lt.open_age, 90);
    }

    #[test]
    fn open_rate_must_be_positive() {
        let ages = single_years(3);
        let r = life_table(
            &[0.1, 0.1, 0.1, 0.0],
            &ages,
            &LifeTableConventions::default(),
        );
        assert!(matches!(r, Err(Error::UndefinedOpenInterval(_))));
    }

    #[test]
    fn abridged_intervals() {
        let ages = [0, 1, 5, 10];
        let rates = [0.01, 0.002, 0.001, 0.2];
        let lt = life_table(&rates, &ages, &LifeTableConventions::default()).unwrap();
        let q0 = 0.01 / (1.0 + 0.9 * 0.01);
        let q1 = 4.0 * 0.002 / (1.0 + 4.0 * 0.5 * 0.002);
        let q5 = 5.0 * 0.001 / (1.0 + 5.0 * 0.5 * 0.001);
        let l1 = 1.0 - q0;
        let l5 = l1 * (1.0 - q1);
        let l10 = l5 * (1.0 - q5);
        let expected =
            (l1 + 0.1 * q0) + 4.0 * (l5 + 0.5 * l1 * q1) + 5.0 * (l10 + 0.5 * l5 * q5) + l10 / 0.2;
        assert!((lt.e0 - expected).abs() < 1e-12);
    }

    #[test]
    fn dissimilarity_examples() {
        let mut d = Array3::zeros((1, 3, 1));
        let mut e = Array3::zeros((1, 3, 1));
        for (j, (a, b)) in [(0.5, 0.2), (0.3, 0.3), (0.2, 0.5)].iter().enumerate() {
            d[[0, j, 0]] = *a;
            e[[0, j, 0]] = *b;
        }
        assert!((dissimilarity_index(&d, &e, 0, 0).unwrap() - 0.3).abs() < 1e-15);
        let d2 = e.mapv(|v| 7.0 * v);
        assert_eq!(dissimilarity_index(&d2, &e, 0, 0).unwrap(), 0.0);
        let mut d3 = Array3::zeros((1, 3, 1));
        d3[[0, 1, 0]] = 4.0;
        assert!((dissimilarity_index(&d3, &e, 0, 0).unwrap() - 0.7).abs() < 1e-15);
        assert!(dissimilarity_index(&Array3::zeros((1, 3, 1)), &e, 0, 0).is_err());
    }
}
