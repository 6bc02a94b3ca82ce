//! Strong invariant sets of `x+ = A x + B (r - u)`.
//!
//! All supported sets are elliptic tubes `{x : (Mx)ᵀ S (Mx) <= β}` for some
//! projection `M`: a strip (`M` a single row), an invariant cylinder around the
//! unit-circle eigenvector (`M` spans the stable left-invariant subspace) and,
//! for strictly stable filters, an ellipsoid (`M = I`).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{QuantizerAlphabet, Spectrum, SystemModel};

/// Relative tolerance used when checking that `n̂ᵀA` is parallel to `n̂ᵀ`.
const PARALLEL_TOL: f64 = 1e-12;

/// Axis-aligned real box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl RealBox {
    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (l, h))| *l <= *v && *v <= *h)
    }

    /// True when `other` lies inside `self`.
    pub fn contains_box(&self, other: &RealBox) -> bool {
        self.lo.iter().zip(&other.lo).all(|(a, b)| a <= b)
            && self.hi.iter().zip(&other.hi).all(|(a, b)| a >= b)
    }
}

/// `{x : |n̂·x| <= halfwidth}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvariantStrip {
    pub normal: Vec<f64>,
    pub halfwidth: f64,
}

impl InvariantStrip {
    pub fn new(normal: Vec<f64>, halfwidth: f64) -> Result<Self> {
        if !(halfwidth > 0.0) || normal.iter().all(|&v| v == 0.0) {
            return Err(Error::Config(
                "strip needs a nonzero normal and a positive halfwidth".into(),
            ));
        }
        Ok(Self { normal, halfwidth })
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        dot(&self.normal, x).abs() <= self.halfwidth
    }

    pub fn tube(&self) -> EllipticTube {
        let m = self.normal.len();
        EllipticTube {
            projection: DMatrix::from_row_slice(1, m, &self.normal),
            shape: DMatrix::identity(1, 1),
            beta: self.halfwidth * self.halfwidth,
        }
    }
}

/// A witness that a set is not strongly invariant: the successor of `x`
/// under `(r, u)` leaves the set.
#[derive(Debug, Clone, PartialEq)]
pub struct InvarianceWitness {
    pub x: Vec<f64>,
    pub r: f64,
    pub u: f64,
    pub successor_measure: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvarianceCheck {
    pub holds: bool,
    /// Worst-case successor value of `|n̂·x+|` (or tube radius), `inf` if unbounded.
    pub sup: f64,
    pub witness: Option<InvarianceWitness>,
}

/// Exact strong invariance test for a strip.
///
/// The strip is invariant iff `n̂ᵀA = μ n̂ᵀ` and
/// `|μ| β + |n̂·B| max|r - u| <= β`, the maximum being taken over the extreme
/// inputs `r ∈ {-1, 1}` and outputs `u ∈ {min U, max U}`.
pub fn verify_strong_invariance(
    model: &SystemModel,
    alphabet: &QuantizerAlphabet,
    strip: &InvariantStrip,
) -> InvarianceCheck {
    let n = DVector::from_column_slice(&strip.normal);
    let nt_a = model.a().transpose() * &n;
    let nn = n.dot(&n);
    let mu = nt_a.dot(&n) / nn;
    let residual = &nt_a - &n * mu;
    let nb = n.dot(model.b());
    let beta = strip.halfwidth;

    let extreme = [(1.0, alphabet.min()), (-1.0, alphabet.max()), (1.0, alphabet.max()), (-1.0, alphabet.min())];
    let (r_star, u_star) = extreme
        .iter()
        .copied()
        .max_by(|a, b| (nb * (a.0 - a.1)).abs().total_cmp(&(nb * (b.0 - b.1)).abs()))
        .unwrap();
    let w_star = r_star - u_star;

    if residual.amax() > PARALLEL_TOL * (1.0 + nt_a.amax()) {
        // n̂ᵀA x is unbounded on the strip: move along the part of Aᵀn̂
        // orthogonal to n̂, which keeps n̂·x = 0.
        let d = residual;
        let need = beta + (nb * w_star).abs() + 1.0;
        let scale = 2.0 * need / d.dot(&d);
        let x = &d * scale;
        let succ = model.step(&x, r_star, u_star);
        let measure = n.dot(&succ).abs();
        return InvarianceCheck {
            holds: false,
            sup: f64::INFINITY,
            witness: Some(InvarianceWitness {
                x: x.iter().copied().collect(),
                r: r_star,
                u: u_star,
                successor_measure: measure,
            }),
        };
    }

    let sup = mu.abs() * beta + (nb * w_star).abs();
    if sup <= beta {
        return InvarianceCheck { holds: true, sup, witness: None };
    }
    // Boundary point whose drift has the same sign as the input push.
    let push = (nb * w_star).signum();
    let side = if mu == 0.0 { push } else { push * mu.signum() };
    let side = if side == 0.0 { 1.0 } else { side };
    let x = &n * (side * beta / nn);
    let succ = model.step(&x, r_star, u_star);
    InvarianceCheck {
        holds: false,
        sup,
        witness: Some(InvarianceWitness {
            x: x.iter().copied().collect(),
            r: r_star,
            u: u_star,
            successor_measure: n.dot(&succ).abs(),
        }),
    }
}

/// `{x : (Mx)ᵀ S (Mx) <= β}` with `M` of full row rank.
#[derive(Debug, Clone, PartialEq)]
pub struct EllipticTube {
    pub projection: DMatrix<f64>,
    pub shape: DMatrix<f64>,
    pub beta: f64,
}

impl EllipticTube {
    pub fn dim(&self) -> usize {
        self.projection.ncols()
    }

    pub fn rank(&self) -> usize {
        self.projection.nrows()
    }

    pub fn measure(&self, x: &[f64]) -> f64 {
        if self.rank() == 0 {
            return 0.0;
        }
        let y = &self.projection * DVector::from_column_slice(x);
        (y.transpose() * &self.shape * &y)[(0, 0)]
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.measure(x) <= self.beta
    }

    /// Precomputes the constants used by [`TubeTester::meets_box`].
    pub fn tester(&self) -> TubeTester {
        let gram = self.projection.transpose() * &self.shape * &self.projection;
        let gram_sqrt = if self.rank() == 0 {
            0.0
        } else {
            gram.symmetric_eigenvalues().max().max(0.0).sqrt()
        };
        TubeTester {
            tube: self.clone(),
            gram_sqrt,
        }
    }

    /// Direction spanning the kernel of `M` when it is one-dimensional.
    pub fn axis(&self) -> Option<DVector<f64>> {
        let m = self.dim();
        match m - self.rank() {
            1 => {
                if self.rank() == 0 {
                    return Some(DVector::from_element(1, 1.0));
                }
                let full = self.projection.clone().insert_row(self.rank(), 0.0);
                let svd = full.svd(true, true);
                let vt = svd.v_t.expect("svd v_t");
                // Smallest singular value is last after nalgebra's ordering.
                let (idx, _) = svd
                    .singular_values
                    .iter()
                    .enumerate()
                    .min_by(|a, b| a.1.total_cmp(b.1))
                    .unwrap();
                Some(vt.row(idx).transpose())
            }
            _ => None,
        }
    }

    /// Bounding box of `{x in tube : |C x| <= level}`.
    ///
    /// Writes `x = t d + M⁺ y` with `d` spanning `ker M`; then `|Cx| <= level`
    /// bounds `t` given `y`, and the support function of the ellipse
    /// `yᵀ S y <= β` gives each coordinate's extent in closed form.
    pub fn slab_bounding_box(&self, c: &DVector<f64>, level: f64) -> Result<RealBox> {
        let m = self.dim();
        let k = self.rank();
        let pinv = if k == 0 {
            DMatrix::zeros(m, 0)
        } else {
            let mmt = &self.projection * self.projection.transpose();
            self.projection.transpose()
                * mmt
                    .try_inverse()
                    .ok_or_else(|| Error::Dimension("tube projection is rank deficient".into()))?
        };
        let s_inv = if k == 0 {
            DMatrix::zeros(0, 0)
        } else {
            self.shape
                .clone()
                .try_inverse()
                .ok_or_else(|| Error::Dimension("tube shape is singular".into()))?
        };
        let support = |g: &DVector<f64>| -> f64 {
            if k == 0 {
                0.0
            } else {
                (self.beta * (g.transpose() * &s_inv * g)[(0, 0)]).max(0.0).sqrt()
            }
        };
        let mut lo = vec![0.0; m];
        let mut hi = vec![0.0; m];
        match m - k {
            0 => {
                for i in 0..m {
                    let g = pinv.row(i).transpose();
                    let s = support(&g);
                    lo[i] = -s;
                    hi[i] = s;
                }
            }
            1 => {
                let d = self.axis().expect("one-dimensional kernel");
                let cd = c.dot(&d);
                if cd.abs() <= 1e-12 * c.norm().max(1.0) {
                    return Err(Error::DegenerateOutputDirection(cd));
                }
                let cs = pinv.transpose() * c;
                for i in 0..m {
                    let g = pinv.row(i).transpose() - &cs * (d[i] / cd);
                    let s = support(&g) + d[i].abs() * level / cd.abs();
                    lo[i] = -s;
                    hi[i] = s;
                }
            }
            _ => {
                return Err(Error::UnsupportedSpectrum(format!(
                    "invariant set is unbounded in {} directions",
                    m - k
                )))
            }
        }
        Ok(RealBox { lo, hi })
    }
}

/// Box-intersection test for an [`EllipticTube`].
#[derive(Debug, Clone)]
pub struct TubeTester {
    tube: EllipticTube,
    gram_sqrt: f64,
}

impl TubeTester {
    /// Conservative test whether the closed box `[lo, hi]` meets the tube:
    /// exact (up to a few ulps of slack) for single-row projections, and a
    /// center-radius bound otherwise. Never rejects a box that meets it.
    pub fn meets_box(&self, lo: &[f64], hi: &[f64]) -> bool {
        let tube = &self.tube;
        match tube.rank() {
            0 => true,
            1 => {
                let half = (tube.beta / tube.shape[(0, 0)]).sqrt();
                let (mut vmin, mut vmax) = (0.0, 0.0);
                for l in 0..tube.dim() {
                    let c = tube.projection[(0, l)];
                    let (a, b) = (c * lo[l], c * hi[l]);
                    vmin += a.min(b);
                    vmax += a.max(b);
                }
                let slack = 8.0 * f64::EPSILON * (vmin.abs() + vmax.abs() + half);
                vmax >= -half - slack && vmin <= half + slack
            }
            _ => {
                let center: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| 0.5 * (a + b)).collect();
                let halfdiag: f64 = lo
                    .iter()
                    .zip(hi)
                    .map(|(a, b)| 0.25 * (b - a) * (b - a))
                    .sum::<f64>()
                    .sqrt();
                // ‖M δ‖_S <= sqrt(λmax(MᵀSM)) ‖δ‖_2 for every offset δ in the box.
                let r0 = tube.measure(&center).max(0.0).sqrt();
                r0 - self.gram_sqrt * halfdiag <= tube.beta.sqrt() * (1.0 + 1e-12)
            }
        }
    }
}

/// Invariant tube around the eigenvector of the unit-circle pole.
#[derive(Debug, Clone, PartialEq)]
pub struct InvariantCylinder {
    /// Unit eigenvector `e_1` with `A e_1 = λ e_1`, `|λ| = 1`.
    pub axis: DVector<f64>,
    pub eigenvalue: f64,
    /// Positive definite `Q` with `Q - AᵀQA ⪰ 0`.
    pub q: DMatrix<f64>,
    pub beta: f64,
    tube: EllipticTube,
}

impl InvariantCylinder {
    /// `inf_t (x - t e_1)ᵀ Q (x - t e_1) <= β`.
    pub fn contains(&self, x: &[f64]) -> bool {
        self.tube.contains(x)
    }

    pub fn tube(&self) -> &EllipticTube {
        &self.tube
    }

    /// The equivalent strip for two-dimensional models.
    pub fn as_strip(&self) -> Option<InvariantStrip> {
        if self.tube.rank() != 1 {
            return None;
        }
        let s = self.tube.shape[(0, 0)].sqrt();
        let normal: Vec<f64> = self.tube.projection.row(0).iter().map(|v| v * s).collect();
        Some(InvariantStrip {
            normal,
            halfwidth: self.beta.sqrt(),
        })
    }
}

/// Sublevel set of a Lyapunov function of a strictly stable filter.
#[derive(Debug, Clone, PartialEq)]
pub struct InvariantEllipsoid {
    pub q: DMatrix<f64>,
    pub beta: f64,
    tube: EllipticTube,
}

impl InvariantEllipsoid {
    pub fn contains(&self, x: &[f64]) -> bool {
        self.tube.contains(x)
    }

    pub fn tube(&self) -> &EllipticTube {
        &self.tube
    }
}

/// Solves `Q - AᵀQA = I` for a Schur-stable `A` (Kronecker form).
pub fn discrete_lyapunov(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = a.nrows();
    if k == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let at = a.transpose();
    let lhs = DMatrix::identity(k * k, k * k) - at.kronecker(&at);
    let rhs = DMatrix::<f64>::identity(k, k);
    let rhs = DVector::from_column_slice(rhs.as_slice());
    let sol = lhs
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::UnsupportedSpectrum("Lyapunov equation is singular".into()))?;
    let q = DMatrix::from_column_slice(k, k, sol.as_slice());
    Ok((&q + q.transpose()) * 0.5)
}

/// `sqrt(β)` making `{‖y‖_S <= sqrt(β)}` invariant for `y+ = F y + g w`,
/// `|w| <= w_max`, where `Q - FᵀQF = I` gives the contraction factor.
fn invariant_radius(shape: &DMatrix<f64>, g: &DVector<f64>, w_max: f64) -> f64 {
    let lmax = shape.symmetric_eigenvalues().max();
    let contraction = (1.0 - 1.0 / lmax).max(0.0).sqrt();
    let g_norm = (g.transpose() * shape * g)[(0, 0)].max(0.0).sqrt();
    g_norm * w_max / (1.0 - contraction)
}

/// Sufficient invariance test for a tube whose projection intertwines the
/// dynamics, `M A = F M`.
fn tube_invariance_margin(f: &DMatrix<f64>, tube: &EllipticTube, g: &DVector<f64>, w_max: f64) -> f64 {
    if tube.rank() == 0 {
        return 0.0;
    }
    // Induced S-norm of F: sqrt(λmax(S^{-1/2} FᵀSF S^{-1/2})).
    let chol = tube.shape.clone().cholesky().expect("positive definite shape");
    let l = chol.l();
    let l_inv = l.clone().try_inverse().expect("invertible Cholesky factor");
    let core = l_inv.clone() * f.transpose() * &tube.shape * f * l_inv.transpose();
    let fnorm = core.symmetric_eigenvalues().max().max(0.0).sqrt();
    let g_norm = (g.transpose() * &tube.shape * g)[(0, 0)].max(0.0).sqrt();
    let r = tube.beta.sqrt();
    r - (fnorm * r + g_norm * w_max)
}

/// Builds the invariant cylinder of a filter with one real unit-circle pole.
///
/// `Q` is assembled in the coordinates `z = T⁻¹x`, `T = [e_1, V_s]`, where
/// `V_s` spans the `A`-invariant complement `ker wᵀ` of the left eigenvector
/// `w`; on the stable block `Q_s` solves the discrete Lyapunov equation and
/// `β` is the smallest radius the contraction argument certifies.
pub fn invariant_cylinder(model: &SystemModel, alphabet: &QuantizerAlphabet) -> Result<InvariantCylinder> {
    let eigenvalue = match model.spectrum() {
        Spectrum::UnitPole { eigenvalue } => eigenvalue,
        Spectrum::Stable { .. } => {
            return Err(Error::UnsupportedSpectrum(
                "no eigenvalue on the unit circle; use a bounded invariant ellipsoid".into(),
            ))
        }
    };
    let m = model.dim();
    let a = model.a();
    let shifted = a - DMatrix::identity(m, m) * eigenvalue;
    let axis = null_vector(&shifted);
    let left = null_vector(&shifted.transpose());

    let ce = model.c().dot(&axis);
    if ce.abs() <= 1e-12 * model.c().norm().max(1.0) {
        return Err(Error::DegenerateOutputDirection(ce));
    }

    // Orthonormal basis of ker wᵀ.
    let stable_basis = orthogonal_complement(&left);
    let mut t = DMatrix::zeros(m, m);
    t.set_column(0, &axis);
    for k in 0..m - 1 {
        t.set_column(k + 1, &stable_basis.column(k));
    }
    let t_inv = t
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::UnsupportedSpectrum("eigenvector basis is singular".into()))?;
    let projection = t_inv.rows(1, m - 1).into_owned();
    let f = &projection * a * &stable_basis;
    let shape = discrete_lyapunov(&f)?;
    let g = &projection * model.b();
    let w_max = alphabet.max_matching_error();

    let mut radius = if m > 1 { invariant_radius(&shape, &g, w_max) } else { 1.0 };
    let mut tube = EllipticTube {
        projection,
        shape: shape.clone(),
        beta: radius * radius,
    };
    while tube_invariance_margin(&f, &tube, &g, w_max) < 0.0 {
        radius *= 1.0 + 1e-9;
        tube.beta = radius * radius;
    }

    let mut qz = DMatrix::zeros(m, m);
    qz[(0, 0)] = 1.0;
    for i in 0..m - 1 {
        for j in 0..m - 1 {
            qz[(i + 1, j + 1)] = shape[(i, j)];
        }
    }
    let q = t_inv.transpose() * qz * &t_inv;
    let beta = tube.beta;
    Ok(InvariantCylinder {
        axis,
        eigenvalue,
        q,
        beta,
        tube,
    })
}

/// Bounded strong invariant ellipsoid of a strictly stable filter, built
/// from the Lyapunov solution of `A` and inflated until the contraction
/// test passes.
pub fn invariant_ellipsoid(model: &SystemModel, alphabet: &QuantizerAlphabet) -> Result<InvariantEllipsoid> {
    if !matches!(model.spectrum(), Spectrum::Stable { .. }) {
        return Err(Error::UnsupportedSpectrum(
            "filter has a unit-circle pole; use the invariant cylinder".into(),
        ));
    }
    let m = model.dim();
    let a = model.a().clone();
    let q = discrete_lyapunov(&a)?;
    let g = model.b().clone();
    let w_max = alphabet.max_matching_error();
    let mut radius = invariant_radius(&q, &g, w_max);
    let mut tube = EllipticTube {
        projection: DMatrix::identity(m, m),
        shape: q.clone(),
        beta: radius * radius,
    };
    while tube_invariance_margin(&a, &tube, &g, w_max) < 0.0 {
        radius *= 1.0 + 1e-9;
        tube.beta = radius * radius;
    }
    Ok(InvariantEllipsoid {
        q,
        beta: tube.beta,
        tube,
    })
}

/// The invariant set that bounds the computational region.
#[derive(Debug, Clone, PartialEq)]
pub enum InvariantSet {
    Strip(InvariantStrip),
    Cylinder(InvariantCylinder),
    Ellipsoid(InvariantEllipsoid),
}

impl InvariantSet {
    /// Derives the set from the model: a cylinder (a strip in two
    /// dimensions) for a unit-circle pole, an ellipsoid otherwise.
    pub fn derive(model: &SystemModel, alphabet: &QuantizerAlphabet) -> Result<Self> {
        match model.spectrum() {
            Spectrum::UnitPole { .. } => {
                let cyl = invariant_cylinder(model, alphabet)?;
                Ok(match cyl.as_strip() {
                    Some(strip) if model.dim() == 2 => InvariantSet::Strip(strip),
                    _ => InvariantSet::Cylinder(cyl),
                })
            }
            Spectrum::Stable { .. } => Ok(InvariantSet::Ellipsoid(invariant_ellipsoid(model, alphabet)?)),
        }
    }

    pub fn tube(&self) -> EllipticTube {
        match self {
            InvariantSet::Strip(s) => s.tube(),
            InvariantSet::Cylinder(c) => c.tube().clone(),
            InvariantSet::Ellipsoid(e) => e.tube().clone(),
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            InvariantSet::Strip(s) => s.contains(x),
            InvariantSet::Cylinder(c) => c.contains(x),
            InvariantSet::Ellipsoid(e) => e.contains(x),
        }
    }

    pub fn is_bounded(&self) -> bool {
        matches!(self, InvariantSet::Ellipsoid(_))
    }

    /// Direction along which the set is unbounded, if any.
    pub fn axis(&self) -> Option<DVector<f64>> {
        match self {
            InvariantSet::Ellipsoid(_) => None,
            InvariantSet::Cylinder(c) => Some(c.axis.clone()),
            InvariantSet::Strip(s) => s.tube().axis(),
        }
    }
}

/// Bounding box of `S_0 = {x in the set : φ(Cx) < γ + ε_0}`, not yet padded.
pub fn seed_region_s0(
    model: &SystemModel,
    set: &InvariantSet,
    penalty: crate::model::Penalty,
    gamma: f64,
    eps0: f64,
) -> Result<RealBox> {
    if !(eps0 > 0.0) {
        return Err(Error::Config("eps0 must be positive".into()));
    }
    let level = penalty.magnitude_at((gamma + eps0).max(0.0));
    set.tube().slab_bounding_box(model.c(), level)
}

fn null_vector(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.ncols();
    let svd = m.clone().svd(false, true);
    let vt = svd.v_t.expect("svd v_t");
    let (idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .unwrap();
    let mut v: DVector<f64> = vt.row(idx).transpose();
    // Canonical sign: first significant entry positive.
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
        if *first < 0.0 {
            v = -v;
        }
    }
    debug_assert_eq!(v.len(), n);
    v.normalize()
}

fn orthogonal_complement(w: &DVector<f64>) -> DMatrix<f64> {
    let m = w.len();
    let wn = w.normalize();
    // Householder reflector mapping wn to ±e_1; its remaining columns span w⊥.
    let mut v = wn.clone();
    let s = if wn[0] >= 0.0 { 1.0 } else { -1.0 };
    v[0] += s;
    let h = DMatrix::identity(m, m) - (&v * v.transpose()) * (2.0 / v.dot(&v));
    h.columns(1, m - 1).into_owned()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
