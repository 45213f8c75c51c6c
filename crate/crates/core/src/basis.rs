//! B-spline bases over age, time and the two spatial coordinates, the
//! row-tensor (box) product that combines the spatial margins, difference
//! operators, and the infant and shock-year indicator columns.
//!
//! Column conventions used everywhere downstream:
//! * age and time designs hold the smooth B-spline columns first, then any
//!   indicator columns (infant for age, one per shock year for time);
//! * the spatial basis is `B_lat □ B_lon`, longitude index fastest.

use ndarray::{s, Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::data::MortalityArray;
use crate::error::{Error, Result};

/// Equally spaced B-spline basis evaluated at a set of positions.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalBasis {
    /// rows = positions, columns = basis functions
    pub matrix: Array2<f64>,
    pub knots: Vec<f64>,
    pub degree: usize,
    pub n_basis: usize,
    /// Domain `[lo, hi]` on which the basis is a partition of unity.
    pub domain: (f64, f64),
}

impl MarginalBasis {
    pub fn n_segments(&self) -> usize {
        self.n_basis - self.degree
    }

    /// Knots lying in the partition-of-unity domain.
    pub fn domain_knots(&self) -> Vec<f64> {
        let (lo, hi) = self.domain;
        let eps = 1e-9 * (hi - lo).abs().max(1.0);
        self.knots
            .iter()
            .copied()
            .filter(|&k| k >= lo - eps && k <= hi + eps)
            .collect()
    }
}

/// Nonzero values of the `degree + 1` B-splines active at `x` (de Boor's
/// triangular scheme). Returns the index of the first active function.
fn active_splines(x: f64, lo: f64, dx: f64, n_seg: usize, degree: usize, out: &mut [f64]) -> usize {
    // Work in knot units so knots are integers and the weights keep their sign.
    let u = ((x - lo) / dx).clamp(0.0, n_seg as f64);
    let seg = (u.floor() as usize).min(n_seg - 1);
    let knot = |r: usize| r as f64 - degree as f64;
    let span = seg + degree;
    let mut left = vec![0.0; degree + 1];
    let mut right = vec![0.0; degree + 1];
    out[0] = 1.0;
    for j in 1..=degree {
        left[j] = u - knot(span + 1 - j);
        right[j] = knot(span + j) - u;
        let mut saved = 0.0;
        for r in 0..j {
            let temp = out[r] / (right[r + 1] + left[j - r]);
            out[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        out[j] = saved;
    }
    seg
}

fn bspline_on_domain(
    positions: &[f64],
    lo: f64,
    hi: f64,
    n_basis: usize,
    degree: usize,
) -> MarginalBasis {
    let n_seg = n_basis - degree;
    let dx = (hi - lo) / n_seg as f64;
    let knots = (0..=n_seg + 2 * degree)
        .map(|r| lo + (r as f64 - degree as f64) * dx)
        .collect();
    let mut matrix = Array2::zeros((positions.len(), n_basis));
    let mut vals = vec![0.0; degree + 1];
    for (row, &x) in positions.iter().enumerate() {
        let first = active_splines(x, lo, dx, n_seg, degree, &mut vals);
        for (r, v) in vals.iter().enumerate() {
            matrix[[row, first + r]] = *v;
        }
    }
    MarginalBasis {
        matrix,
        knots,
        degree,
        n_basis,
        domain: (lo, hi),
    }
}

fn domain_of(positions: &[f64]) -> Result<(f64, f64)> {
    if positions.is_empty() {
        return Err(Error::InvalidBasis("no positions".into()));
    }
    if positions.iter().any(|p| !p.is_finite()) {
        return Err(Error::InvalidBasis("non-finite position".into()));
    }
    let lo = positions.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = positions.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // A single distinct position gets a unit-width domain around it.
    if hi == lo {
        Ok((lo - 0.5, hi + 0.5))
    } else {
        Ok((lo, hi))
    }
}

/// Equally spaced B-splines on `[min, max]` of `positions`, with
/// `degree`-fold knot extension beyond each end.
pub fn bspline_basis(positions: &[f64], n_basis: usize, degree: usize) -> Result<MarginalBasis> {
    if n_basis < degree + 1 {
        return Err(Error::InvalidBasis(format!(
            "{n_basis} basis functions is too few for degree {degree}"
        )));
    }
    let (lo, hi) = domain_of(positions)?;
    Ok(bspline_on_domain(positions, lo, hi, n_basis, degree))
}

/// Coarser basis on the same domain whose interior knots are a subset of
/// `full`'s: every `k`-th knot with `k = (c - degree) / (target - degree)`.
pub fn nested_basis(
    positions: &[f64],
    full: &MarginalBasis,
    target: usize,
) -> Result<MarginalBasis> {
    let degree = full.degree;
    if target < degree + 1 || target > full.n_basis {
        return Err(Error::InvalidBasis(format!(
            "reduced size {target} must lie in [{}, {}]",
            degree + 1,
            full.n_basis
        )));
    }
    let full_seg = full.n_segments();
    let seg = target - degree;
    if !full_seg.is_multiple_of(seg) {
        return Err(Error::InvalidBasis(format!(
            "reduced basis with {target} functions is not nested in {} (segments {seg} do not divide {full_seg})",
            full.n_basis
        )));
    }
    let (lo, hi) = full.domain;
    Ok(bspline_on_domain(positions, lo, hi, target, degree))
}

/// Row-wise Kronecker product; column `a * q + b` of row `r` is
/// `a_mat[r, a] * b_mat[r, b]`.
pub fn box_product(a_mat: &Array2<f64>, b_mat: &Array2<f64>) -> Result<Array2<f64>> {
    let (r, p) = a_mat.dim();
    let (rb, q) = b_mat.dim();
    if r != rb {
        return Err(Error::DimensionMismatch(format!(
            "box product of {r}-row and {rb}-row matrices"
        )));
    }
    let mut out = Array2::zeros((r, p * q));
    for row in 0..r {
        for a in 0..p {
            let va = a_mat[[row, a]];
            if va == 0.0 {
                continue;
            }
            for b in 0..q {
                out[[row, a * q + b]] = va * b_mat[[row, b]];
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceOperator {
    /// (c - order) × c
    pub matrix: Array2<f64>,
    pub order: usize,
}

impl DifferenceOperator {
    /// `D'D`
    pub fn gram(&self) -> Array2<f64> {
        self.matrix.t().dot(&self.matrix)
    }

    pub fn apply(&self, v: &Array1<f64>) -> Array1<f64> {
        self.matrix.dot(v)
    }
}

pub fn difference_matrix(c: usize, order: usize) -> Result<DifferenceOperator> {
    if c <= order {
        return Err(Error::InvalidBasis(format!(
            "difference of order {order} needs more than {order} coefficients, got {c}"
        )));
    }
    // signed binomial coefficients, highest index positive
    let mut coef = vec![1.0f64];
    for _ in 0..order {
        let mut next = vec![0.0; coef.len() + 1];
        for (i, c) in coef.iter().enumerate() {
            next[i] -= c;
            next[i + 1] += c;
        }
        coef = next;
    }
    let mut matrix = Array2::zeros((c - order, c));
    for r in 0..c - order {
        for (k, v) in coef.iter().enumerate() {
            matrix[[r, r + k]] = *v;
        }
    }
    Ok(DifferenceOperator { matrix, order })
}

/// Box product of the two spatial margins, kept alongside a sparse row view
/// for the array kernels.
#[derive(Debug, Clone)]
pub struct SpatialBasis {
    /// n × (c_lon · c_lat)
    pub matrix: Array2<f64>,
    pub lon: MarginalBasis,
    pub lat: MarginalBasis,
    row_nonzeros: Vec<Vec<(usize, f64)>>,
}

impl SpatialBasis {
    pub fn new(lon: MarginalBasis, lat: MarginalBasis) -> Result<Self> {
        let matrix = box_product(&lat.matrix, &lon.matrix)?;
        let row_nonzeros = sparse_rows(&matrix);
        Ok(SpatialBasis {
            matrix,
            lon,
            lat,
            row_nonzeros,
        })
    }

    pub fn n_columns(&self) -> usize {
        self.matrix.ncols()
    }

    /// `(column, value)` pairs of the nonzero entries of row `j`.
    pub fn row_nonzeros(&self, j: usize) -> &[(usize, f64)] {
        &self.row_nonzeros[j]
    }
}

pub(crate) fn sparse_rows(matrix: &Array2<f64>) -> Vec<Vec<(usize, f64)>> {
    matrix
        .outer_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(c, v)| (c, *v))
                .collect()
        })
        .collect()
}

/// A marginal design: smooth B-spline columns followed by indicator columns.
#[derive(Debug, Clone)]
pub struct DesignBasis {
    pub matrix: Array2<f64>,
    /// The underlying spline, evaluated only on the positions it covers.
    pub spline: MarginalBasis,
    pub n_smooth: usize,
}

impl DesignBasis {
    pub fn n_columns(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn n_extra(&self) -> usize {
        self.matrix.ncols() - self.n_smooth
    }
}

fn default_shock_years() -> Vec<i32> {
    vec![2020, 2021]
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BasisConfig {
    pub age: usize,
    pub time: usize,
    pub lon: usize,
    pub lat: usize,
    pub age_reduced: usize,
    pub time_reduced: usize,
    pub degree: usize,
    pub difference_order: usize,
    #[serde(default = "default_shock_years")]
    pub shock_years: Vec<i32>,
    /// Separate indicator column for age 0.
    #[serde(default = "default_true")]
    pub infant: bool,
}

impl Default for BasisConfig {
    fn default() -> Self {
        BasisConfig {
            age: 21,
            time: 7,
            lon: 11,
            lat: 11,
            age_reduced: 9,
            time_reduced: 5,
            degree: 3,
            difference_order: 2,
            shock_years: default_shock_years(),
            infant: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BasisDims {
    pub m: usize,
    pub n: usize,
    pub l: usize,
    pub c_a: usize,
    pub c_t: usize,
    pub c_lon: usize,
    pub c_lat: usize,
    pub c_s: usize,
    pub c_a_reduced: usize,
    pub c_t_reduced: usize,
    pub n_shocks: usize,
    pub infant: bool,
}

#[derive(Debug, Clone)]
pub struct BasisSet {
    pub ba: DesignBasis,
    pub bt: DesignBasis,
    pub ba_reduced: DesignBasis,
    pub bt_reduced: DesignBasis,
    pub bs: SpatialBasis,
    pub shock_years: Vec<i32>,
    pub difference_order: usize,
    pub dims: BasisDims,
}

fn age_design(ages: &[f64], spline: MarginalBasis, infant: bool) -> DesignBasis {
    let m = ages.len();
    let c = spline.n_basis;
    if !infant {
        return DesignBasis {
            matrix: spline.matrix.clone(),
            spline,
            n_smooth: c,
        };
    }
    let mut matrix = Array2::zeros((m, c + 1));
    matrix.slice_mut(s![1.., ..c]).assign(&spline.matrix);
    matrix[[0, c]] = 1.0;
    DesignBasis {
        matrix,
        spline,
        n_smooth: c,
    }
}

fn time_design(years: &[i32], spline: MarginalBasis, shock_rows: &[usize]) -> DesignBasis {
    let c = spline.n_basis;
    let mut matrix = Array2::zeros((years.len(), c + shock_rows.len()));
    matrix.slice_mut(s![.., ..c]).assign(&spline.matrix);
    for (q, &row) in shock_rows.iter().enumerate() {
        matrix[[row, c + q]] = 1.0;
    }
    DesignBasis {
        matrix,
        spline,
        n_smooth: c,
    }
}

pub fn build_basis_set(data: &MortalityArray, config: &BasisConfig) -> Result<BasisSet> {
    let m = data.n_ages();
    let degree = config.degree;
    let ages: Vec<f64> = data.ages.iter().map(|&a| a as f64).collect();
    let years: Vec<f64> = data.years.iter().map(|&y| y as f64).collect();

    if config.infant && (data.ages[0] != 0 || m < 2) {
        return Err(Error::InvalidBasis(
            "infant column requires age 0 and at least one further age".into(),
        ));
    }
    let smooth_ages = if config.infant { &ages[1..] } else { &ages[..] };
    let a_full = bspline_basis(smooth_ages, config.age, degree)?;
    let a_reduced = nested_basis(smooth_ages, &a_full, config.age_reduced)?;
    let ba = age_design(&ages, a_full, config.infant);
    let ba_reduced = age_design(&ages, a_reduced, config.infant);

    let mut shock_rows = Vec::with_capacity(config.shock_years.len());
    for &y in &config.shock_years {
        let row = data.year_index(y).ok_or_else(|| {
            Error::InvalidBasis(format!("shock year {y} is not among the data years"))
        })?;
        if shock_rows.contains(&row) {
            return Err(Error::InvalidBasis(format!("shock year {y} listed twice")));
        }
        shock_rows.push(row);
    }
    let t_full = bspline_basis(&years, config.time, degree)?;
    let t_reduced = nested_basis(&years, &t_full, config.time_reduced)?;
    let bt = time_design(&data.years, t_full, &shock_rows);
    let bt_reduced = time_design(&data.years, t_reduced, &shock_rows);

    let xs: Vec<f64> = data.centroids.iter().map(|c| c[0]).collect();
    let ys: Vec<f64> = data.centroids.iter().map(|c| c[1]).collect();
    let bs = SpatialBasis::new(
        bspline_basis(&xs, config.lon, degree)?,
        bspline_basis(&ys, config.lat, degree)?,
    )?;

    let dims = BasisDims {
        m,
        n: data.n_areas(),
        l: data.n_years(),
        c_a: config.age,
        c_t: config.time,
        c_lon: config.lon,
        c_lat: config.lat,
        c_s: config.lon * config.lat,
        c_a_reduced: config.age_reduced,
        c_t_reduced: config.time_reduced,
        n_shocks: shock_rows.len(),
        infant: config.infant,
    };
    Ok(BasisSet {
        ba,
        bt,
        ba_reduced,
        bt_reduced,
        bs,
        shock_years: config.shock_years.clone(),
        difference_order: config.difference_order,
        dims,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Textbook recursive Cox–de Boor with half-open support intervals.
    fn cox_de_boor(knots: &[f64], i: usize, p: usize, x: f64) -> f64 {
        if p == 0 {
            return if knots[i] <= x && x < knots[i + 1] {
                1.0
            } else {
                0.0
            };
        }
        let mut v = 0.0;
        let d1 = knots[i + p] - knots[i];
        if d1 > 0.0 {
            v += (x - knots[i]) / d1 * cox_de_boor(knots, i, p - 1, x);
        }
        let d2 = knots[i + p + 1] - knots[i + 1];
        if d2 > 0.0 {
            v += (knots[i + p + 1] - x) / d2 * cox_de_boor(knots, i + 1, p - 1, x);
        }
        v
    }

    #[test]
    fn partition_of_unity_ages() {
        let ages: Vec<f64> = (0..=90).map(f64::from).collect();
        let b = bspline_basis(&ages, 21, 3).unwrap();
        assert_eq!(b.matrix.dim(), (91, 21));
        for row in b.matrix.outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(row.iter().filter(|&&v| v != 0.0).count() <= 4);
        }
    }

    #[test]
    fn degree_zero_is_bin_indicator() {
        let x = [0.0, 0.4, 1.1, 1.9, 2.5, 3.0];
        let b = bspline_basis(&x, 3, 0).unwrap();
        let expected = array![
            [1.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.0, 0.0, 1.0]
        ];
        assert_eq!(b.matrix, expected);
    }

    #[test]
    fn matches_recursive_oracle() {
        let x: Vec<f64> = (0..=20).map(|i| i as f64 * 0.37 + 1.0).collect();
        let b = bspline_basis(&x, 9, 3).unwrap();
        for (row, &xv) in x.iter().enumerate().take(x.len() - 1) {
            for c in 0..9 {
                let oracle = cox_de_boor(&b.knots, c, 3, xv);
                assert!(
                    (b.matrix[[row, c]] - oracle).abs() < 1e-13,
                    "row {row} col {c}"
                );
            }
        }
        // interior point off the grid
        let b2 = bspline_basis(&[0.0, 2.345, 10.0], 8, 3).unwrap();
        for c in 0..8 {
            assert!((b2.matrix[[1, c]] - cox_de_boor(&b2.knots, c, 3, 2.345)).abs() < 1e-13);
        }
    }

    #[test]
    fn too_few_functions() {
        assert!(bspline_basis(&[0.0, 1.0], 3, 3).is_err());
        assert!(bspline_basis(&[0.0, f64::NAN], 5, 3).is_err());
    }

    #[test]
    fn box_product_examples() {
        let a = array![[1.0, 2.0]];
        let b = array![[3.0, 4.0]];
        assert_eq!(box_product(&a, &b).unwrap(), array![[3.0, 4.0, 6.0, 8.0]]);
        let ones = Array2::ones((3, 1));
        let b = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        assert_eq!(box_product(&ones, &b).unwrap(), b);
        assert!(box_product(&ones, &array![[1.0]]).is_err());
    }

    #[test]
    fn difference_examples() {
        let d = difference_matrix(4, 2).unwrap();
        assert_eq!(
            d.matrix,
            array![[1.0, -2.0, 1.0, 0.0], [0.0, 1.0, -2.0, 1.0]]
        );
        let d1 = difference_matrix(5, 1).unwrap();
        assert!(d1
            .apply(&Array1::from_elem(5, 3.0))
            .iter()
            .all(|&v| v == 0.0));
        let sq = array![1.0, 4.0, 9.0, 16.0, 25.0];
        assert_eq!(
            difference_matrix(5, 2).unwrap().apply(&sq),
            array![2.0, 2.0, 2.0]
        );
        let lin = Array1::from_iter((1..=7).map(f64::from));
        assert!(difference_matrix(7, 2)
            .unwrap()
            .apply(&lin)
            .iter()
            .all(|&v| v == 0.0));
        assert!(difference_matrix(2, 2).is_err());
        let d3 = difference_matrix(6, 3).unwrap();
        assert_eq!(
            d3.matrix.row(0).to_vec(),
            vec![-1.0, 3.0, -3.0, 1.0, 0.0, 0.0]
        );
    }

    #[test]
    fn nested_knots_are_subsequence() {
        let ages: Vec<f64> = (1..=90).map(f64::from).collect();
        let full = bspline_basis(&ages, 21, 3).unwrap();
        let reduced = nested_basis(&ages, &full, 9).unwrap();
        let fk = full.domain_knots();
        for k in reduced.domain_knots() {
            assert!(fk.iter().any(|f| (f - k).abs() < 1e-9), "knot {k} missing");
        }
        assert!(nested_basis(&ages, &full, 10).is_err());
    }
}
