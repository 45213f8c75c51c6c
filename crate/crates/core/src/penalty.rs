//! Block-diagonal roughness penalty `diag(P1, P2, P3)`.
//!
//! Difference operators act only on smooth spline coefficients. Coefficients
//! attached to the infant column or a shock-year column carry a fixed
//! [`INDICATOR_RIDGE`] instead, so they remain free additive effects without
//! making the system singular.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::basis::{difference_matrix, BasisSet, DesignBasis};
use crate::error::{Error, Result};

pub const INDICATOR_RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltyConfig {
    pub lambda_a: f64,
    pub lambda_t: f64,
    pub lambda_lon: f64,
    pub lambda_lat: f64,
    pub lambda_a_reduced: f64,
    #[serde(default)]
    pub lambda_t_reduced: f64,
    pub kappa: f64,
}

impl PenaltyConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            ("lambda_a", self.lambda_a),
            ("lambda_t", self.lambda_t),
            ("lambda_lon", self.lambda_lon),
            ("lambda_lat", self.lambda_lat),
            ("lambda_a_reduced", self.lambda_a_reduced),
            ("lambda_t_reduced", self.lambda_t_reduced),
        ];
        for (name, v) in lambdas {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be >= 0, got {v}"
                )));
            }
        }
        if !(self.kappa.is_finite() && self.kappa > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "kappa must be > 0, got {}",
                self.kappa
            )));
        }
        Ok(())
    }
}

/// `D'D` for the smooth part of a design, zero when there are too few
/// coefficients for a difference of this order.
fn smooth_gram(design: &DesignBasis, order: usize) -> Array2<f64> {
    let c = design.n_columns();
    let mut out = Array2::zeros((c, c));
    if design.n_smooth > order {
        let g = difference_matrix(design.n_smooth, order)
            .expect("size checked")
            .gram();
        out.slice_mut(ndarray::s![..design.n_smooth, ..design.n_smooth])
            .assign(&g);
    }
    out
}

fn sparse(matrix: &Array2<f64>) -> Vec<(usize, usize, f64)> {
    matrix
        .indexed_iter()
        .filter(|(_, v)| **v != 0.0)
        .map(|((r, c), v)| (r, c, *v))
        .collect()
}

/// Adds `scale * (F_1 ⊗ F_2 ⊗ ... ⊗ F_k)` to `target` at `offset`.
pub(crate) fn add_kron(
    target: &mut Array2<f64>,
    offset: usize,
    factors: &[Array2<f64>],
    scale: f64,
) {
    if scale == 0.0 {
        return;
    }
    let mut entries: Vec<(usize, usize, f64)> = vec![(0, 0, scale)];
    for f in factors {
        let (fr, fc) = f.dim();
        let nz = sparse(f);
        let mut next = Vec::with_capacity(entries.len() * nz.len());
        for &(r, c, v) in &entries {
            for &(r2, c2, v2) in &nz {
                next.push((r * fr + r2, c * fc + c2, v * v2));
            }
        }
        entries = next;
    }
    for (r, c, v) in entries {
        target[[offset + r, offset + c]] += v;
    }
}

fn indicator_mask(design: &DesignBasis) -> Vec<bool> {
    (0..design.n_columns())
        .map(|c| c >= design.n_smooth)
        .collect()
}

/// Age–time penalty `P1` for the common surface.
pub fn common_penalty(config: &PenaltyConfig, basis: &BasisSet) -> Array2<f64> {
    let (ca, ct) = (basis.ba.n_columns(), basis.bt.n_columns());
    let order = basis.difference_order;
    let mut p = Array2::zeros((ca * ct, ca * ct));
    add_kron(
        &mut p,
        0,
        &[Array2::eye(ct), smooth_gram(&basis.ba, order)],
        config.lambda_a,
    );
    add_kron(
        &mut p,
        0,
        &[smooth_gram(&basis.bt, order), Array2::eye(ca)],
        config.lambda_t,
    );
    let (age_ind, time_ind) = (indicator_mask(&basis.ba), indicator_mask(&basis.bt));
    for t in 0..ct {
        for a in 0..ca {
            if age_ind[a] || time_ind[t] {
                p[[t * ca + a, t * ca + a]] += INDICATOR_RIDGE;
            }
        }
    }
    p
}

/// Deviation penalty `P2` over longitude, latitude, reduced age and reduced
/// time.
pub fn deviation_penalty(config: &PenaltyConfig, basis: &BasisSet) -> Array2<f64> {
    let (ca, ct) = (basis.ba_reduced.n_columns(), basis.bt_reduced.n_columns());
    let (clon, clat) = (basis.bs.lon.n_basis, basis.bs.lat.n_basis);
    let cs = clon * clat;
    let order = basis.difference_order;
    let size = ct * cs * ca;
    let mut p = Array2::zeros((size, size));
    let eye = |k: usize| Array2::<f64>::eye(k);
    let spatial_gram = |k: usize| {
        if k > order {
            difference_matrix(k, order).expect("size checked").gram()
        } else {
            Array2::zeros((k, k))
        }
    };
    add_kron(
        &mut p,
        0,
        &[eye(ct), eye(clat), spatial_gram(clon), eye(ca)],
        config.lambda_lon,
    );
    add_kron(
        &mut p,
        0,
        &[eye(ct), spatial_gram(clat), eye(clon), eye(ca)],
        config.lambda_lat,
    );
    add_kron(
        &mut p,
        0,
        &[
            eye(ct),
            eye(clat),
            eye(clon),
            smooth_gram(&basis.ba_reduced, order),
        ],
        config.lambda_a_reduced,
    );
    add_kron(
        &mut p,
        0,
        &[
            smooth_gram(&basis.bt_reduced, order),
            eye(clat),
            eye(clon),
            eye(ca),
        ],
        config.lambda_t_reduced,
    );
    let (age_ind, time_ind) = (
        indicator_mask(&basis.ba_reduced),
        indicator_mask(&basis.bt_reduced),
    );
    for t in 0..ct {
        for sc in 0..cs {
            for a in 0..ca {
                if age_ind[a] || time_ind[t] {
                    let i = (t * cs + sc) * ca + a;
                    p[[i, i]] += INDICATOR_RIDGE;
                }
            }
        }
    }
    p
}

/// Full penalty for the three-block model.
pub fn assemble_penalty(config: &PenaltyConfig, basis: &BasisSet) -> Result<Array2<f64>> {
    config.validate()?;
    let p1 = common_penalty(config, basis);
    let p2 = deviation_penalty(config, basis);
    let n = basis.dims.n;
    if basis.bs.matrix.nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "spatial basis has {} rows for {n} areas",
            basis.bs.matrix.nrows()
        )));
    }
    let (s1, s2) = (p1.nrows(), p2.nrows());
    let mut p = Array2::zeros((s1 + s2 + n, s1 + s2 + n));
    p.slice_mut(ndarray::s![..s1, ..s1]).assign(&p1);
    p.slice_mut(ndarray::s![s1..s1 + s2, s1..s1 + s2])
        .assign(&p2);
    for j in 0..n {
        p[[s1 + s2 + j, s1 + s2 + j]] = config.kappa;
    }
    Ok(p)
}

/// Penalty for the age–time-only model (`P1` alone).
pub fn assemble_age_time_penalty(config: &PenaltyConfig, basis: &BasisSet) -> Result<Array2<f64>> {
    for v in [config.lambda_a, config.lambda_t] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "smoothing parameter {v} must be >= 0"
            )));
        }
    }
    Ok(common_penalty(config, basis))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{build_basis_set, BasisConfig};
    use crate::data::MortalityArray;
    use ndarray::{array, Array3};

    fn data(m: usize, n: usize, l: usize) -> MortalityArray {
        MortalityArray {
            deaths: Array3::zeros((m, n, l)),
            exposures: Array3::ones((m, n, l)),
            ages: (0..m as i32).collect(),
            open_last_age: true,
            years: (2000..2000 + l as i32).collect(),
            area_ids: (0..n).map(|j| format!("a{j}")).collect(),
            centroids: (0..n).map(|j| [(j % 3) as f64, (j / 3) as f64]).collect(),
            sex: "f".into(),
        }
    }

    fn plain_config(c: usize) -> BasisConfig {
        BasisConfig {
            age: c,
            time: c,
            lon: c,
            lat: c,
            age_reduced: c,
            time_reduced: c,
            degree: 2,
            difference_order: 2,
            shock_years: vec![],
            infant: false,
        }
    }

    fn zero_config() -> PenaltyConfig {
        PenaltyConfig {
            lambda_a: 0.0,
            lambda_t: 0.0,
            lambda_lon: 0.0,
            lambda_lat: 0.0,
            lambda_a_reduced: 0.0,
            lambda_t_reduced: 0.0,
            kappa: 1.0,
        }
    }

    fn kron(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
        let (ar, ac) = a.dim();
        let (br, bc) = b.dim();
        Array2::from_shape_fn((ar * br, ac * bc), |(r, c)| {
            a[[r / br, c / bc]] * b[[r % br, c % bc]]
        })
    }

    #[test]
    fn only_ridge_when_lambdas_zero() {
        let b = build_basis_set(&data(6, 9, 5), &plain_config(3)).unwrap();
        let p = assemble_penalty(&zero_config(), &b).unwrap();
        let n = 9;
        let start = p.nrows() - n;
        for ((r, c), v) in p.indexed_iter() {
            let expected = if r == c && r >= start { 1.0 } else { 0.0 };
            assert_eq!(*v, expected);
        }
    }

    #[test]
    fn common_penalty_by_hand() {
        let b = build_basis_set(&data(6, 4, 5), &plain_config(3)).unwrap();
        let cfg = PenaltyConfig {
            lambda_a: 1.0,
            ..zero_config()
        };
        let p1 = common_penalty(&cfg, &b);
        let d = array![[1.0, -2.0, 1.0]];
        let expected = kron(&Array2::eye(3), &d.t().dot(&d));
        assert_eq!(p1, expected);
    }

    #[test]
    fn deviation_terms_match_dense_kron() {
        let b = build_basis_set(&data(7, 9, 6), &plain_config(3)).unwrap();
        let d = difference_matrix(3, 2).unwrap().gram();
        let i3 = Array2::<f64>::eye(3);
        let cases: [(PenaltyConfig, Array2<f64>); 4] = [
            (
                PenaltyConfig {
                    lambda_lon: 1.0,
                    ..zero_config()
                },
                kron(&kron(&kron(&i3, &i3), &d), &i3),
            ),
            (
                PenaltyConfig {
                    lambda_lat: 1.0,
                    ..zero_config()
                },
                kron(&kron(&kron(&i3, &d), &i3), &i3),
            ),
            (
                PenaltyConfig {
                    lambda_a_reduced: 1.0,
                    ..zero_config()
                },
                kron(&kron(&kron(&i3, &i3), &i3), &d),
            ),
            (
                PenaltyConfig {
                    lambda_t_reduced: 1.0,
                    ..zero_config()
                },
                kron(&kron(&kron(&d, &i3), &i3), &i3),
            ),
        ];
        for (cfg, expected) in cases {
            assert_eq!(deviation_penalty(&cfg, &b), expected);
        }
    }

    #[test]
    fn kappa_must_be_positive() {
        let b = build_basis_set(&data(6, 4, 5), &plain_config(3)).unwrap();
        let cfg = PenaltyConfig {
            kappa: 0.0,
            ..zero_config()
        };
        assert!(assemble_penalty(&cfg, &b).is_err());
    }
}
