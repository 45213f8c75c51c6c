//! Array-algebra kernels for the three-block model matrix
//!
//! ```text
//!     X = [ Bt ⊗ 1_{n+1} ⊗ Ba | Bt_r ⊗ Bs ⊗ Ba_r (area rows) | 1_l ⊗ I_n ⊗ 1_m (area rows) ]
//! ```
//!
//! Observations live in `(age, slot, year)` arrays with `n + 1` slots: the
//! `n` areas followed by the all-area totals. Only the first block reaches
//! the totals slot. Nothing here materializes a Kronecker product; products
//! with `X` and `X'WX` are formed by contracting one marginal at a time.
//!
//! Coefficient order inside each block is age fastest, then space, then
//! time: block 1 index `t * ca + a`, block 2 index `(t * cs + s) * ca_r + a`,
//! block 3 index `j`.

use std::ops::Range;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rayon::prelude::*;

use crate::basis::{box_product, sparse_rows, BasisSet};
use crate::error::{Error, Result};
use crate::linalg::Cholesky;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoefLayout {
    pub block1: Range<usize>,
    pub block2: Range<usize>,
    pub block3: Range<usize>,
}

impl CoefLayout {
    pub fn len(&self) -> usize {
        self.block3.end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Age–space–time deviation block `Bt_r ⊗ Bs ⊗ Ba_r`.
#[derive(Debug, Clone)]
pub struct DeviationBlock {
    pub bt: Array2<f64>,
    pub bs: Array2<f64>,
    pub ba: Array2<f64>,
    bs_rows: Vec<Vec<(usize, f64)>>,
}

#[derive(Debug, Clone)]
pub struct BlockDesign {
    pub ba: Array2<f64>,
    pub bt: Array2<f64>,
    pub deviation: Option<DeviationBlock>,
    pub n_areas: usize,
    pub area_effects: bool,
    pub layout: CoefLayout,
}

impl BlockDesign {
    /// General constructor. `deviation` is `(Bt_r, Bs, Ba_r)`.
    pub fn new(
        ba: Array2<f64>,
        bt: Array2<f64>,
        deviation: Option<(Array2<f64>, Array2<f64>, Array2<f64>)>,
        n_areas: usize,
        area_effects: bool,
    ) -> Result<Self> {
        let (m, ca) = ba.dim();
        let (l, ct) = bt.dim();
        let p1 = ca * ct;
        let deviation = match deviation {
            None => None,
            Some((bt_r, bs, ba_r)) => {
                if bt_r.nrows() != l || ba_r.nrows() != m || bs.nrows() != n_areas {
                    return Err(Error::DimensionMismatch(format!(
                        "deviation margins have {}/{}/{} rows, expected {l}/{n_areas}/{m}",
                        bt_r.nrows(),
                        bs.nrows(),
                        ba_r.nrows()
                    )));
                }
                let bs_rows = sparse_rows(&bs);
                Some(DeviationBlock {
                    bt: bt_r,
                    bs,
                    ba: ba_r,
                    bs_rows,
                })
            }
        };
        let p2 = deviation
            .as_ref()
            .map_or(0, |d| d.bt.ncols() * d.bs.ncols() * d.ba.ncols());
        let p3 = if area_effects { n_areas } else { 0 };
        Ok(BlockDesign {
            ba,
            bt,
            deviation,
            n_areas,
            area_effects,
            layout: CoefLayout {
                block1: 0..p1,
                block2: p1..p1 + p2,
                block3: p1 + p2..p1 + p2 + p3,
            },
        })
    }

    /// The full three-block model.
    pub fn full(basis: &BasisSet) -> Result<Self> {
        BlockDesign::new(
            basis.ba.matrix.clone(),
            basis.bt.matrix.clone(),
            Some((
                basis.bt_reduced.matrix.clone(),
                basis.bs.matrix.clone(),
                basis.ba_reduced.matrix.clone(),
            )),
            basis.dims.n,
            true,
        )
    }

    /// Age–time surface only, observed on the totals slot alone.
    pub fn age_time(basis: &BasisSet) -> Result<Self> {
        BlockDesign::new(
            basis.ba.matrix.clone(),
            basis.bt.matrix.clone(),
            None,
            0,
            false,
        )
    }

    pub fn m(&self) -> usize {
        self.ba.nrows()
    }

    pub fn l(&self) -> usize {
        self.bt.nrows()
    }

    /// Areas plus the totals slot.
    pub fn n_slots(&self) -> usize {
        self.n_areas + 1
    }

    pub fn n_coef(&self) -> usize {
        self.layout.len()
    }

    pub fn slot_shape(&self) -> (usize, usize, usize) {
        (self.m(), self.n_slots(), self.l())
    }

    fn check_slots(&self, what: &str, a: &Array3<f64>) -> Result<()> {
        if a.dim() != self.slot_shape() {
            return Err(Error::DimensionMismatch(format!(
                "{what} has shape {:?}, expected {:?}",
                a.dim(),
                self.slot_shape()
            )));
        }
        Ok(())
    }
}

/// `Xθ` as an `(age, area, year)` array plus the `(age, year)` totals rows.
pub fn linear_predictor(
    design: &BlockDesign,
    theta: &Array1<f64>,
) -> Result<(Array3<f64>, Array2<f64>)> {
    if theta.len() != design.n_coef() {
        return Err(Error::DimensionMismatch(format!(
            "theta has {} entries, layout needs {}",
            theta.len(),
            design.n_coef()
        )));
    }
    let (m, n, l) = (design.m(), design.n_areas, design.l());
    let ca = design.ba.ncols();
    let ct = design.bt.ncols();
    let lay = &design.layout;

    let theta1 = theta
        .slice(s![lay.block1.clone()])
        .to_owned()
        .into_shape_with_order((ct, ca))
        .expect("contiguous block");
    let eta_totals = design.ba.dot(&theta1.t()).dot(&design.bt.t());

    let mut eta = Array3::zeros((m, n, l));
    for j in 0..n {
        eta.index_axis_mut(Axis(1), j).assign(&eta_totals);
    }

    if let Some(dev) = &design.deviation {
        let (ct2, cs, ca2) = (dev.bt.ncols(), dev.bs.ncols(), dev.ba.ncols());
        let theta2 = theta
            .slice(s![lay.block2.clone()])
            .to_owned()
            .into_shape_with_order((ct2 * cs, ca2))
            .expect("contiguous block");
        // age: (t, s) × i
        let by_age = theta2.dot(&dev.ba.t());
        let by_age = by_age.to_shape((ct2, cs * m)).expect("row-major reshape");
        // time: k × (s, i)
        let by_time = dev.bt.dot(&by_age);
        for k in 0..l {
            let row = by_time.row(k);
            let slab = row.to_shape((cs, m)).expect("row-major reshape");
            // space: j × i
            let by_space = dev.bs.dot(&slab);
            let mut target = eta.index_axis_mut(Axis(2), k);
            target += &by_space.t();
        }
    }

    if design.area_effects {
        for (j, g) in theta.slice(s![lay.block3.clone()]).iter().enumerate() {
            let mut col = eta.index_axis_mut(Axis(1), j);
            col += *g;
        }
    }
    Ok((eta, eta_totals))
}

/// `X'v` for an `(age, slot, year)` array `v`.
pub fn transpose_apply(design: &BlockDesign, v: &Array3<f64>) -> Result<Array1<f64>> {
    design.check_slots("v", v)?;
    let n = design.n_areas;
    let (m, l) = (design.m(), design.l());
    let ca = design.ba.ncols();
    let lay = &design.layout;
    let mut out = Array1::zeros(design.n_coef());

    let summed = v.sum_axis(Axis(1));
    let r1 = design.ba.t().dot(&summed).dot(&design.bt);
    for ((a, t), val) in r1.indexed_iter() {
        out[lay.block1.start + t * ca + a] = *val;
    }

    if let Some(dev) = &design.deviation {
        let (ct2, cs, ca2) = (dev.bt.ncols(), dev.bs.ncols(), dev.ba.ncols());
        let mut by_space = Array3::<f64>::zeros((cs, m, l));
        for j in 0..n {
            let vj = v.index_axis(Axis(1), j);
            for &(sc, w) in &dev.bs_rows[j] {
                by_space.index_axis_mut(Axis(0), sc).scaled_add(w, &vj);
            }
        }
        for sc in 0..cs {
            let r = dev
                .ba
                .t()
                .dot(&by_space.index_axis(Axis(0), sc))
                .dot(&dev.bt);
            for t in 0..ct2 {
                for a in 0..ca2 {
                    out[lay.block2.start + (t * cs + sc) * ca2 + a] = r[[a, t]];
                }
            }
        }
    }

    if design.area_effects {
        for j in 0..n {
            out[lay.block3.start + j] = v.index_axis(Axis(1), j).sum();
        }
    }
    Ok(out)
}

/// `X'Wz`
pub fn weighted_rhs(design: &BlockDesign, w: &Array3<f64>, z: &Array3<f64>) -> Result<Array1<f64>> {
    design.check_slots("weights", w)?;
    design.check_slots("working response", z)?;
    transpose_apply(design, &(w * z))
}

struct AreaTerms {
    weight_sum: f64,
    /// Ba' W_j Bt
    common: Option<Array2<f64>>,
    /// (Ba_r □ Ba_r)' W_j (Bt_r □ Bt_r)
    dev_gram: Option<Array2<f64>>,
    /// Ba_r' W_j Bt_r
    dev_cross: Option<Array2<f64>>,
}

fn sandwich(left: &Array2<f64>, w: &ArrayView2<f64>, right: &Array2<f64>) -> Array2<f64> {
    left.t().dot(w).dot(right)
}

/// `X'WX`, assembled block by block.
pub fn weighted_normal_matrix(design: &BlockDesign, w: &Array3<f64>) -> Result<Array2<f64>> {
    design.check_slots("weights", w)?;
    if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidArgument(
            "weights must be finite and non-negative".into(),
        ));
    }
    let n = design.n_areas;
    let (m, l) = (design.m(), design.l());
    let (ca, ct) = (design.ba.ncols(), design.bt.ncols());
    let p = design.n_coef();
    let lay = design.layout.clone();
    let mut out = Array2::<f64>::zeros((p, p));

    // (1,1)
    let ga = box_product(&design.ba, &design.ba)?;
    let gt = box_product(&design.bt, &design.bt)?;
    let r11 = ga.t().dot(&w.sum_axis(Axis(1))).dot(&gt);
    for t in 0..ct {
        for t2 in 0..ct {
            for a in 0..ca {
                for a2 in 0..ca {
                    out[[t * ca + a, t2 * ca + a2]] = r11[[a * ca + a2, t * ct + t2]];
                }
            }
        }
    }

    let dev_grams = match &design.deviation {
        Some(dev) => Some((
            box_product(&dev.ba, &dev.ba)?,
            box_product(&dev.bt, &dev.bt)?,
        )),
        None => None,
    };

    let terms: Vec<AreaTerms> = (0..n)
        .into_par_iter()
        .map(|j| {
            let wj = w.index_axis(Axis(1), j);
            let mut term = AreaTerms {
                weight_sum: 0.0,
                common: None,
                dev_gram: None,
                dev_cross: None,
            };
            if design.area_effects {
                term.weight_sum = wj.sum();
                term.common = Some(sandwich(&design.ba, &wj, &design.bt));
            }
            if let (Some(dev), Some((gar, gtr))) = (&design.deviation, &dev_grams) {
                term.dev_gram = Some(sandwich(gar, &wj, gtr));
                if design.area_effects {
                    term.dev_cross = Some(sandwich(&dev.ba, &wj, &dev.bt));
                }
            }
            term
        })
        .collect();

    if let Some(dev) = &design.deviation {
        let (ct2, cs, ca2) = (dev.bt.ncols(), dev.bs.ncols(), dev.ba.ncols());
        let off2 = lay.block2.start;
        let idx2 = |t: usize, sc: usize, a: usize| off2 + (t * cs + sc) * ca2 + a;

        // (1,2): contract space first, then the mixed age and time products.
        let mut by_space = Array3::<f64>::zeros((cs, m, l));
        for j in 0..n {
            let wj = w.index_axis(Axis(1), j);
            for &(sc, v) in &dev.bs_rows[j] {
                by_space.index_axis_mut(Axis(0), sc).scaled_add(v, &wj);
            }
        }
        let gaa = box_product(&design.ba, &dev.ba)?;
        let gtt = box_product(&design.bt, &dev.bt)?;
        for sc in 0..cs {
            let r = gaa.t().dot(&by_space.index_axis(Axis(0), sc)).dot(&gtt);
            for t in 0..ct {
                for t2 in 0..ct2 {
                    for a in 0..ca {
                        for a2 in 0..ca2 {
                            let v = r[[a * ca2 + a2, t * ct2 + t2]];
                            let (row, col) = (t * ca + a, idx2(t2, sc, a2));
                            out[[row, col]] = v;
                            out[[col, row]] = v;
                        }
                    }
                }
            }
        }

        // (2,2)
        let buf = out.as_slice_mut().expect("standard layout");
        for (j, term) in terms.iter().enumerate() {
            let u = term.dev_gram.as_ref().expect("deviation gram");
            let nz = &dev.bs_rows[j];
            for &(s1, v1) in nz {
                for &(s2, v2) in nz {
                    let f = v1 * v2;
                    for t in 0..ct2 {
                        for t2 in 0..ct2 {
                            for a in 0..ca2 {
                                let row = idx2(t, s1, a) * p;
                                let base = idx2(t2, s2, 0);
                                for a2 in 0..ca2 {
                                    buf[row + base + a2] += f * u[[a * ca2 + a2, t * ct2 + t2]];
                                }
                            }
                        }
                    }
                }
            }
        }

        // (2,3)
        if design.area_effects {
            for (j, term) in terms.iter().enumerate() {
                let pj = term.dev_cross.as_ref().expect("deviation cross");
                let col = lay.block3.start + j;
                for &(sc, v) in &dev.bs_rows[j] {
                    for t in 0..ct2 {
                        for a in 0..ca2 {
                            let row = idx2(t, sc, a);
                            let val = v * pj[[a, t]];
                            out[[row, col]] = val;
                            out[[col, row]] = val;
                        }
                    }
                }
            }
        }
    }

    if design.area_effects {
        for (j, term) in terms.iter().enumerate() {
            let col = lay.block3.start + j;
            let q = term.common.as_ref().expect("common term");
            for t in 0..ct {
                for a in 0..ca {
                    let row = t * ca + a;
                    out[[row, col]] = q[[a, t]];
                    out[[col, row]] = q[[a, t]];
                }
            }
            out[[col, col]] = term.weight_sum;
        }
    }
    Ok(out)
}

/// `tr[(X'WX + P)^{-1} X'WX]`
pub fn effective_dimension(
    design: &BlockDesign,
    w: &Array3<f64>,
    penalty: &Array2<f64>,
) -> Result<f64> {
    let gram = weighted_normal_matrix(design, w)?;
    if penalty.dim() != gram.dim() {
        return Err(Error::DimensionMismatch(format!(
            "penalty {:?} vs normal matrix {:?}",
            penalty.dim(),
            gram.dim()
        )));
    }
    let factor = Cholesky::factor(&(&gram + penalty))?;
    factor.trace_solve(&gram)
}
