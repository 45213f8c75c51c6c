//! Dense reference implementations shared by the integration tests.
#![allow(dead_code)]

use ndarray::{s, Array1, Array2, Array3};
use ndarray_linalg::Solve;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mortsurf::glam::BlockDesign;

/// Explicit model matrix. Rows follow the flattened `(age, slot, year)`
/// order of the observation arrays; the last slot holds the totals.
pub fn dense_x(
    ba: &Array2<f64>,
    bt: &Array2<f64>,
    deviation: Option<(&Array2<f64>, &Array2<f64>, &Array2<f64>)>,
    n: usize,
    area_effects: bool,
) -> Array2<f64> {
    let (m, ca) = ba.dim();
    let (l, ct) = bt.dim();
    let p1 = ca * ct;
    let p2 = deviation.map_or(0, |(t, sp, a)| t.ncols() * sp.ncols() * a.ncols());
    let p3 = if area_effects { n } else { 0 };
    let slots = n + 1;
    let mut x = Array2::zeros((m * slots * l, p1 + p2 + p3));
    for i in 0..m {
        for j in 0..slots {
            for k in 0..l {
                let row = (i * slots + j) * l + k;
                for t in 0..ct {
                    for a in 0..ca {
                        x[[row, t * ca + a]] = bt[[k, t]] * ba[[i, a]];
                    }
                }
                if j == n {
                    continue;
                }
                if let Some((bt2, bs, ba2)) = deviation {
                    let (ct2, cs, ca2) = (bt2.ncols(), bs.ncols(), ba2.ncols());
                    for t in 0..ct2 {
                        for sp in 0..cs {
                            for a in 0..ca2 {
                                x[[row, p1 + (t * cs + sp) * ca2 + a]] =
                                    bt2[[k, t]] * bs[[j, sp]] * ba2[[i, a]];
                            }
                        }
                    }
                }
                if area_effects {
                    x[[row, p1 + p2 + j]] = 1.0;
                }
            }
        }
    }
    x
}

pub fn dense_x_of(design: &BlockDesign) -> Array2<f64> {
    dense_x(
        &design.ba,
        &design.bt,
        design.deviation.as_ref().map(|d| (&d.bt, &d.bs, &d.ba)),
        design.n_areas,
        design.area_effects,
    )
}

pub fn flatten(a: &Array3<f64>) -> Array1<f64> {
    a.iter().copied().collect()
}

/// `X' diag(w) X`
pub fn dense_gram(x: &Array2<f64>, w: &Array1<f64>) -> Array2<f64> {
    let mut xw = x.clone();
    for (mut row, &wi) in xw.rows_mut().into_iter().zip(w.iter()) {
        row *= wi;
    }
    x.t().dot(&xw)
}

/// `tr((G + P)^{-1} G)` through an LU solve.
pub fn dense_ed(g: &Array2<f64>, p: &Array2<f64>) -> f64 {
    let a = g + p;
    let mut sol = Array2::zeros(g.dim());
    for c in 0..g.ncols() {
        sol.column_mut(c)
            .assign(&a.solve(&g.column(c).to_owned()).unwrap());
    }
    sol.diag().sum()
}

pub fn max_abs(a: impl IntoIterator<Item = f64>) -> f64 {
    a.into_iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// `max |a − b| / max |b|`
pub fn rel_err<'a>(
    a: impl IntoIterator<Item = &'a f64>,
    b: impl IntoIterator<Item = &'a f64> + Clone,
) -> f64 {
    let scale = max_abs(b.clone().into_iter().copied()).max(f64::MIN_POSITIVE);
    let diff = a.into_iter().zip(b).map(|(x, y)| x - y);
    max_abs(diff) / scale
}

/// Penalized Poisson IRWLS on the explicit model matrix, solved by LU and
/// iterated to a tight tolerance. Cells without exposure get zero weight.
pub fn dense_irwls(
    x: &Array2<f64>,
    y: &Array1<f64>,
    e: &Array1<f64>,
    p: &Array2<f64>,
) -> Array1<f64> {
    let pen_dev = |theta: &Array1<f64>| {
        let eta = x.dot(theta);
        let mut d = 0.0;
        for r in 0..y.len() {
            if e[r] > 0.0 {
                let mu = eta[r].exp() * e[r];
                d += 2.0
                    * (if y[r] > 0.0 {
                        y[r] * (y[r] / mu).ln()
                    } else {
                        0.0
                    } - (y[r] - mu));
            }
        }
        d + theta.dot(&p.dot(theta))
    };
    let mut theta = Array1::<f64>::zeros(x.ncols());
    // Start from an intercept-like level to keep the first step modest.
    let total_y: f64 = y.sum();
    let total_e: f64 = e.sum();
    let level = ((total_y + 0.5) / (total_e + 1.0)).ln();
    let ones = Array1::from_elem(x.nrows(), level);
    let g0 = x.t().dot(x) + Array2::<f64>::eye(x.ncols()) * 1e-8;
    theta.assign(&g0.solve(&x.t().dot(&ones)).unwrap());
    let mut current = pen_dev(&theta);
    for _ in 0..200 {
        let eta = x.dot(&theta);
        let mut w = Array1::zeros(y.len());
        let mut z = Array1::zeros(y.len());
        for r in 0..y.len() {
            if e[r] > 0.0 {
                let mu = eta[r].exp() * e[r];
                w[r] = mu;
                z[r] = eta[r] + (y[r] - mu) / mu;
            }
        }
        let a = dense_gram(x, &w) + p;
        let rhs = x.t().dot(&(&w * &z));
        let target = a.solve(&rhs).unwrap();
        let step = &target - &theta;
        let mut scale = 1.0;
        let mut cand = target;
        let mut val = pen_dev(&cand);
        while !(val.is_finite() && val <= current * (1.0 + 1e-15)) && scale > 1e-6 {
            scale *= 0.5;
            cand = &theta + &(&step * scale);
            val = pen_dev(&cand);
        }
        let change = max_abs((&cand - &theta).iter().copied());
        theta = cand;
        current = val;
        if change < 1e-13 {
            break;
        }
    }
    theta
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
}

/// Random symmetric positive definite matrix.
pub fn random_spd(rng: &mut ChaCha8Rng, p: usize) -> Array2<f64> {
    let b = random_matrix(rng, p, p);
    b.t().dot(&b) + Array2::<f64>::eye(p) * 0.5
}

/// Random design with dense marginals of the given sizes.
pub struct Instance {
    pub design: BlockDesign,
    pub m: usize,
    pub n: usize,
    pub l: usize,
}

pub fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let m = rng.random_range(1..=8);
    let n = rng.random_range(1..=8);
    let l = rng.random_range(1..=8);
    let mut c = || rng.random_range(1..=5);
    let (ca, ct, ca2, ct2, cs) = (c(), c(), c(), c(), c());
    let ba = random_matrix(rng, m, ca);
    let bt = random_matrix(rng, l, ct);
    let ba2 = random_matrix(rng, m, ca2);
    let bt2 = random_matrix(rng, l, ct2);
    // Sparse-ish spatial rows, as a box product of B-splines would give.
    let bs = Array2::from_shape_fn((n, cs), |_| {
        if rng.random_bool(0.4) {
            0.0
        } else {
            rng.random_range(0.0..1.0)
        }
    });
    let design = BlockDesign::new(ba, bt, Some((bt2, bs, ba2)), n, true).unwrap();
    Instance { design, m, n, l }
}

pub fn slice_areas(a: &Array3<f64>, n: usize) -> Array3<f64> {
    a.slice(s![.., ..n, ..]).to_owned()
}
