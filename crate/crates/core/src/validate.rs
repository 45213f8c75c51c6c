//! Compares life expectancy from aggregated fitted deaths against direct
//! estimates for groups of areas.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use ndarray::Array3;

use crate::data::{aggregate, MortalityArray};
use crate::error::{Error, Result};
use crate::lifetable::{e0, LifeTableConventions};

#[derive(Debug, Clone, PartialEq)]
pub struct AggregationRow {
    pub group_id: String,
    pub year: i32,
    pub exposure: f64,
    pub e0_direct: f64,
    pub e0_model: f64,
}

fn rates(deaths: &Array3<f64>, exposures: &Array3<f64>, g: usize, k: usize) -> Vec<f64> {
    (0..deaths.dim().0)
        .map(|i| {
            let e = exposures[[i, g, k]];
            if e > 0.0 {
                deaths[[i, g, k]] / e
            } else {
                0.0
            }
        })
        .collect()
}

/// `eta` holds fitted log rates for the areas of `data`.
pub fn validate_aggregation(
    eta: &Array3<f64>,
    data: &MortalityArray,
    grouping: &HashMap<String, String>,
    conv: &LifeTableConventions,
) -> Result<Vec<AggregationRow>> {
    if eta.dim() != data.deaths.dim() {
        return Err(Error::DimensionMismatch(
            "fitted surface does not match the data".into(),
        ));
    }
    let direct = aggregate(data, grouping)?;
    let fitted = MortalityArray {
        deaths: eta.mapv(f64::exp) * &data.exposures,
        ..data.clone()
    };
    let model = aggregate(&fitted, grouping)?;
    let mut rows = Vec::new();
    for (g, group_id) in direct.area_ids.iter().enumerate() {
        for (k, &year) in direct.years.iter().enumerate() {
            let context = |e| Error::LifeTableAt {
                area_id: group_id.clone(),
                year,
                source: Box::new(e),
            };
            rows.push(AggregationRow {
                group_id: group_id.clone(),
                year,
                exposure: (0..direct.n_ages())
                    .map(|i| direct.exposures[[i, g, k]])
                    .sum(),
                e0_direct: e0(
                    &rates(&direct.deaths, &direct.exposures, g, k),
                    &data.ages,
                    conv,
                )
                .map_err(context)?,
                e0_model: e0(
                    &rates(&model.deaths, &model.exposures, g, k),
                    &data.ages,
                    conv,
                )
                .map_err(context)?,
            });
        }
    }
    Ok(rows)
}

pub fn write_rows(rows: &[AggregationRow], path: &Path, comment: Option<&str>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    if let Some(c) = comment {
        writeln!(out, "# {c}").map_err(io)?;
    }
    writeln!(out, "group_id,year,exposure,e0_direct,e0_model").map_err(io)?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.group_id, r.year, r.exposure, r.e0_direct, r.e0_model
        )
        .map_err(io)?;
    }
    out.flush().map_err(io)
}
