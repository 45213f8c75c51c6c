//! Death and exposure arrays indexed by (age, area, year), plus the
//! loading, repair and aggregation steps that prepare them for fitting.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array3, Axis};

use crate::error::{Error, Result};

/// Dense deaths/exposures grid for one sex. Axis order is (age, area, year).
#[derive(Debug, Clone, PartialEq)]
pub struct MortalityArray {
    pub deaths: Array3<f64>,
    pub exposures: Array3<f64>,
    pub ages: Vec<i32>,
    /// The last age is an open interval (e.g. 90+).
    pub open_last_age: bool,
    pub years: Vec<i32>,
    pub area_ids: Vec<String>,
    pub centroids: Vec<[f64; 2]>,
    pub sex: String,
}

impl MortalityArray {
    pub fn n_ages(&self) -> usize {
        self.ages.len()
    }

    pub fn n_areas(&self) -> usize {
        self.area_ids.len()
    }

    pub fn n_years(&self) -> usize {
        self.years.len()
    }

    pub fn n_cells(&self) -> usize {
        self.deaths.len()
    }

    pub fn year_index(&self, year: i32) -> Option<usize> {
        self.years.iter().position(|&y| y == year)
    }

    pub fn area_index(&self, area_id: &str) -> Option<usize> {
        self.area_ids.iter().position(|a| a == area_id)
    }

    /// Checks the structural invariants: shapes, orderings, non-negative
    /// integer deaths, non-negative exposures, unique area ids and finite
    /// centroids.
    pub fn validate(&self) -> Result<()> {
        let shape = (self.ages.len(), self.area_ids.len(), self.years.len());
        if self.deaths.dim() != shape || self.exposures.dim() != shape {
            return Err(Error::DimensionMismatch(format!(
                "deaths {:?} / exposures {:?} do not match axes {:?}",
                self.deaths.dim(),
                self.exposures.dim(),
                shape
            )));
        }
        if self.centroids.len() != self.area_ids.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} centroids for {} areas",
                self.centroids.len(),
                self.area_ids.len()
            )));
        }
        if self.ages.is_empty() || self.years.is_empty() || self.area_ids.is_empty() {
            return Err(Error::InvalidData("empty axis".into()));
        }
        if self.ages.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidData(
                "ages must be strictly increasing".into(),
            ));
        }
        if self.years.windows(2).any(|w| w[1] - w[0] != 1) {
            return Err(Error::InvalidData(
                "years must be strictly increasing with unit step".into(),
            ));
        }
        let unique: BTreeSet<&String> = self.area_ids.iter().collect();
        if unique.len() != self.area_ids.len() {
            return Err(Error::InvalidData("area ids must be unique".into()));
        }
        if self.centroids.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::InvalidData("centroids must be finite".into()));
        }
        if self
            .deaths
            .iter()
            .any(|&d| !d.is_finite() || d < 0.0 || d.fract() != 0.0)
        {
            return Err(Error::InvalidData(
                "deaths must be non-negative integers".into(),
            ));
        }
        if self.exposures.iter().any(|&e| !e.is_finite() || e < 0.0) {
            return Err(Error::InvalidData(
                "exposures must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Base array plus the all-area totals used as the identifying extra row.
#[derive(Debug, Clone)]
pub struct AugmentedArray {
    pub base: MortalityArray,
    /// m × l
    pub totals_deaths: Array2<f64>,
    /// m × l
    pub totals_exposures: Array2<f64>,
}

type CellKey = (i32, String, i32);

fn parse_count_file(path: &Path) -> Result<Vec<(CellKey, f64)>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|source| Error::Csv {
            path: path.to_path_buf(),
            source,
        })?;
    let headers = reader
        .headers()
        .map_err(|source| Error::Csv {
            path: path.to_path_buf(),
            source,
        })?
        .clone();
    let expected = ["age", "area_id", "year", "count"];
    if headers.len() != 4 || headers.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            message: format!("expected header age,area_id,year,count, found {headers:?}"),
        });
    }
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|source| Error::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        let bad = |what: &str| Error::Parse {
            path: path.to_path_buf(),
            message: format!("record {}: invalid {what}", line + 1),
        };
        let age: i32 = record[0].parse().map_err(|_| bad("age"))?;
        let area = record[1].to_string();
        let year: i32 = record[2].parse().map_err(|_| bad("year"))?;
        let count: f64 = record[3].parse().map_err(|_| bad("count"))?;
        rows.push(((age, area, year), count));
    }
    Ok(rows)
}

fn parse_centroids(path: &Path) -> Result<HashMap<String, [f64; 2]>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|source| Error::Csv {
            path: path.to_path_buf(),
            source,
        })?;
    let mut out = HashMap::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|source| Error::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        let bad = |what: &str| Error::Parse {
            path: path.to_path_buf(),
            message: format!("record {}: invalid {what}", line + 1),
        };
        if record.len() != 3 {
            return Err(bad("column count (expected area_id,x,y)"));
        }
        let x: f64 = record[1].parse().map_err(|_| bad("x"))?;
        let y: f64 = record[2].parse().map_err(|_| bad("y"))?;
        out.insert(record[0].to_string(), [x, y]);
    }
    Ok(out)
}

struct Axes {
    ages: Vec<i32>,
    areas: Vec<String>,
    years: Vec<i32>,
}

impl Axes {
    fn from_rows(rows: &[(CellKey, f64)]) -> Self {
        let ages: BTreeSet<i32> = rows.iter().map(|r| r.0 .0).collect();
        let areas: BTreeSet<&String> = rows.iter().map(|r| &r.0 .1).collect();
        let years: BTreeSet<i32> = rows.iter().map(|r| r.0 .2).collect();
        Axes {
            ages: ages.into_iter().collect(),
            areas: areas.into_iter().cloned().collect(),
            years: years.into_iter().collect(),
        }
    }

    fn shape(&self) -> (usize, usize, usize) {
        (self.ages.len(), self.areas.len(), self.years.len())
    }

    /// Scatters rows into a dense array, rejecting duplicates, keys outside
    /// the axes and holes.
    fn densify(&self, rows: &[(CellKey, f64)], file: &str) -> Result<Array3<f64>> {
        let age_ix: HashMap<i32, usize> =
            self.ages.iter().enumerate().map(|(i, &a)| (a, i)).collect();
        let area_ix: HashMap<&str, usize> = self
            .areas
            .iter()
            .enumerate()
            .map(|(i, a)| (a.as_str(), i))
            .collect();
        let year_ix: HashMap<i32, usize> = self
            .years
            .iter()
            .enumerate()
            .map(|(i, &y)| (y, i))
            .collect();

        let mut values = Array3::<f64>::zeros(self.shape());
        let mut seen = Array3::<bool>::from_elem(self.shape(), false);
        for ((age, area, year), count) in rows {
            let (Some(&i), Some(&j), Some(&k)) = (
                age_ix.get(age),
                area_ix.get(area.as_str()),
                year_ix.get(year),
            ) else {
                // The key exists here but not on the reference axes, so the
                // reference file is the one with the hole.
                return Err(Error::IncompleteGrid {
                    file: "deaths".into(),
                    age: *age,
                    area_id: area.clone(),
                    year: *year,
                });
            };
            if seen[[i, j, k]] {
                return Err(Error::DuplicateCell {
                    file: file.into(),
                    age: *age,
                    area_id: area.clone(),
                    year: *year,
                });
            }
            seen[[i, j, k]] = true;
            values[[i, j, k]] = *count;
        }
        if let Some(((i, j, k), _)) = seen.indexed_iter().find(|(_, &s)| !s) {
            return Err(Error::IncompleteGrid {
                file: file.into(),
                age: self.ages[i],
                area_id: self.areas[j].clone(),
                year: self.years[k],
            });
        }
        Ok(values)
    }
}

/// Reads the three input CSVs into a dense, validated array sorted by age,
/// area id (lexicographic) and year.
pub fn load_csv(
    deaths_path: &Path,
    exposures_path: &Path,
    centroids_path: &Path,
    sex: &str,
) -> Result<MortalityArray> {
    let death_rows = parse_count_file(deaths_path)?;
    let exposure_rows = parse_count_file(exposures_path)?;
    let centroids = parse_centroids(centroids_path)?;

    let axes = Axes::from_rows(&death_rows);
    if axes.ages.is_empty() {
        return Err(Error::Parse {
            path: deaths_path.to_path_buf(),
            message: "no records".into(),
        });
    }
    let deaths = axes.densify(&death_rows, "deaths")?;
    let exposures = axes.densify(&exposure_rows, "exposures")?;

    let centroid_list = axes
        .areas
        .iter()
        .map(|a| {
            centroids
                .get(a)
                .copied()
                .ok_or_else(|| Error::UnknownArea(a.clone()))
        })
        .collect::<Result<Vec<_>>>()?;

    let data = MortalityArray {
        deaths,
        exposures,
        ages: axes.ages,
        open_last_age: true,
        years: axes.years,
        area_ids: axes.areas,
        centroids: centroid_list,
        sex: sex.to_string(),
    };
    data.validate()?;
    Ok(data)
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    std::fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn write_count_file(
    path: &Path,
    data: &MortalityArray,
    values: &Array3<f64>,
    comment: Option<&str>,
) -> Result<()> {
    let mut out = create(path)?;
    let io = |e| Error::io(path, e);
    if let Some(c) = comment {
        writeln!(out, "# {c}").map_err(io)?;
    }
    writeln!(out, "age,area_id,year,count").map_err(io)?;
    for (i, age) in data.ages.iter().enumerate() {
        for (j, area) in data.area_ids.iter().enumerate() {
            for (k, year) in data.years.iter().enumerate() {
                writeln!(out, "{age},{area},{year},{}", values[[i, j, k]]).map_err(io)?;
            }
        }
    }
    out.flush().map_err(io)
}

/// Writes the array back out in the same schemas `load_csv` reads.
/// Values are printed with shortest round-trip formatting.
pub fn write_csv(
    data: &MortalityArray,
    deaths_path: &Path,
    exposures_path: &Path,
    centroids_path: &Path,
    comment: Option<&str>,
) -> Result<()> {
    write_count_file(deaths_path, data, &data.deaths, comment)?;
    write_count_file(exposures_path, data, &data.exposures, comment)?;
    let mut out = create(centroids_path)?;
    let io = |e| Error::io(centroids_path, e);
    if let Some(c) = comment {
        writeln!(out, "# {c}").map_err(io)?;
    }
    writeln!(out, "area_id,x,y").map_err(io)?;
    for (area, [x, y]) in data.area_ids.iter().zip(&data.centroids) {
        writeln!(out, "{area},{x},{y}").map_err(io)?;
    }
    out.flush().map_err(io)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepairedCell {
    pub age: i32,
    pub area_id: String,
    pub year: i32,
    pub old_exposure: f64,
    pub new_exposure: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RepairReport {
    pub cells: Vec<RepairedCell>,
}

impl RepairReport {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn write_csv(&self, path: &Path, comment: Option<&str>) -> Result<()> {
        let mut out = create(path)?;
        let io = |e| Error::io(path, e);
        if let Some(c) = comment {
            writeln!(out, "# {c}").map_err(io)?;
        }
        writeln!(out, "age,area_id,year,old_exposure,new_exposure").map_err(io)?;
        for c in &self.cells {
            writeln!(
                out,
                "{},{},{},{},{}",
                c.age, c.area_id, c.year, c.old_exposure, c.new_exposure
            )
            .map_err(io)?;
        }
        out.flush().map_err(io)
    }
}

/// Replaces zero exposures in cells with positive deaths by the death count,
/// taking the added person-years proportionally from the other ages of the
/// same (area, year) so the column total is unchanged.
///
/// All such cells of a column are repaired together; the redistribution base
/// is the pre-repair exposure of the remaining ages.
pub fn repair_exposures(data: &MortalityArray) -> Result<(MortalityArray, RepairReport)> {
    let mut out = data.clone();
    let mut report = RepairReport::default();
    let (m, n, l) = data.deaths.dim();
    for j in 0..n {
        for k in 0..l {
            let needs: Vec<usize> = (0..m)
                .filter(|&i| data.deaths[[i, j, k]] > 0.0 && data.exposures[[i, j, k]] == 0.0)
                .collect();
            if needs.is_empty() {
                continue;
            }
            let added: f64 = needs.iter().map(|&i| data.deaths[[i, j, k]]).sum();
            let base: f64 = (0..m)
                .filter(|i| !needs.contains(i))
                .map(|i| data.exposures[[i, j, k]])
                .sum();
            if base <= 0.0 || added > base {
                return Err(Error::UnrepairableColumn {
                    area_id: data.area_ids[j].clone(),
                    year: data.years[k],
                });
            }
            let remaining = base - added;
            for i in 0..m {
                if needs.contains(&i) {
                    out.exposures[[i, j, k]] = data.deaths[[i, j, k]];
                    report.cells.push(RepairedCell {
                        age: data.ages[i],
                        area_id: data.area_ids[j].clone(),
                        year: data.years[k],
                        old_exposure: 0.0,
                        new_exposure: data.deaths[[i, j, k]],
                    });
                } else {
                    out.exposures[[i, j, k]] = data.exposures[[i, j, k]] * remaining / base;
                }
            }
        }
    }
    Ok((out, report))
}

pub fn augment_with_totals(data: &MortalityArray) -> AugmentedArray {
    AugmentedArray {
        totals_deaths: data.deaths.sum_axis(Axis(1)),
        totals_exposures: data.exposures.sum_axis(Axis(1)),
        base: data.clone(),
    }
}

/// Sums deaths and exposures within groups of areas. Groups are ordered by
/// group id; a group's centroid is the exposure-weighted mean of its members.
pub fn aggregate(
    data: &MortalityArray,
    grouping: &HashMap<String, String>,
) -> Result<MortalityArray> {
    let mut members: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (j, area) in data.area_ids.iter().enumerate() {
        let group = grouping
            .get(area)
            .ok_or_else(|| Error::UnmappedArea(area.clone()))?;
        members.entry(group.as_str()).or_default().push(j);
    }
    let (m, _, l) = data.deaths.dim();
    let g = members.len();
    let mut deaths = Array3::zeros((m, g, l));
    let mut exposures = Array3::zeros((m, g, l));
    let mut centroids = Vec::with_capacity(g);
    for (gi, idx) in members.values().enumerate() {
        for &j in idx {
            let mut d = deaths.index_axis_mut(Axis(1), gi);
            d += &data.deaths.index_axis(Axis(1), j);
            let mut e = exposures.index_axis_mut(Axis(1), gi);
            e += &data.exposures.index_axis(Axis(1), j);
        }
        if idx.len() == 1 {
            centroids.push(data.centroids[idx[0]]);
            continue;
        }
        let weights: Vec<f64> = idx
            .iter()
            .map(|&j| data.exposures.index_axis(Axis(1), j).sum())
            .collect();
        let total: f64 = weights.iter().sum();
        let mut c = [0.0; 2];
        for (w, &j) in weights.iter().zip(idx) {
            let w = if total > 0.0 {
                w / total
            } else {
                1.0 / idx.len() as f64
            };
            c[0] += w * data.centroids[j][0];
            c[1] += w * data.centroids[j][1];
        }
        centroids.push(c);
    }
    Ok(MortalityArray {
        deaths,
        exposures,
        ages: data.ages.clone(),
        open_last_age: data.open_last_age,
        years: data.years.clone(),
        area_ids: members.keys().map(|s| s.to_string()).collect(),
        centroids,
        sex: data.sex.clone(),
    })
}

/// Reads an `area_id,group_id` CSV.
pub fn load_grouping(path: &Path) -> Result<HashMap<String, String>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|source| Error::Csv {
            path: path.to_path_buf(),
            source,
        })?;
    let mut out = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|source| Error::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        if record.len() != 2 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                message: "expected area_id,group_id".into(),
            });
        }
        out.insert(record[0].to_string(), record[1].to_string());
    }
    Ok(out)
}
