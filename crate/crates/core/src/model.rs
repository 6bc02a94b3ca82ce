//! Shaping filter, quantizer alphabet and penalty.
//!
//! The filter `L_G` is a strictly causal single-input single-output system
//! `x[n+1] = A x[n] + B w[n]`, `q[n] = C x[n]`. In the game used for lower
//! bounds the input is the matching error `w = r - u`, where `r ∈ [-1, 1]` is
//! the ADC input and `u ∈ U` its output.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Band on `|λ| - 1` used to classify eigenvalues as lying on the unit circle.
pub const EIG_TOL: f64 = 1e-9;

/// Largest supported state dimension.
pub const MAX_DIM: usize = 12;

/// Relative singular value threshold for the controllability rank test.
const RANK_TOL: f64 = 1e-10;

/// Location of the spectrum of `A` relative to the unit circle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Spectrum {
    /// Every eigenvalue has modulus below `1 - EIG_TOL`.
    Stable { spectral_radius: f64 },
    /// Exactly one eigenvalue on the unit circle; it is real and simple.
    UnitPole { eigenvalue: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemModel {
    a: DMatrix<f64>,
    b: DVector<f64>,
    c: DVector<f64>,
    spectrum: Spectrum,
}

impl SystemModel {
    /// Validates dimensions, controllability of `(A, B)` and the spectrum of `A`.
    pub fn new(a: DMatrix<f64>, b: DVector<f64>, c: DVector<f64>) -> Result<Self> {
        let m = a.nrows();
        if m == 0 || a.ncols() != m {
            return Err(Error::Dimension(format!(
                "A must be square and nonempty, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if m > MAX_DIM {
            return Err(Error::Dimension(format!(
                "state dimension {m} exceeds the supported maximum {MAX_DIM}"
            )));
        }
        if b.len() != m || c.len() != m {
            return Err(Error::Dimension(format!(
                "B has {} rows and C has {} columns, expected {m}",
                b.len(),
                c.len()
            )));
        }
        if a.iter().chain(b.iter()).chain(c.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Dimension("model entries must be finite".into()));
        }
        let lc = controllability_matrix_of(&a, &b);
        let rank = numerical_rank(&lc);
        if rank < m {
            return Err(Error::Uncontrollable { rank, dim: m });
        }
        let spectrum = classify_spectrum(&a)?;
        Ok(Self { a, b, c, spectrum })
    }

    /// Builds a model from row-major nested arrays.
    pub fn from_rows(a: &[Vec<f64>], b: &[f64], c: &[f64]) -> Result<Self> {
        let m = a.len();
        if a.iter().any(|row| row.len() != m) {
            return Err(Error::Dimension("A must be square".into()));
        }
        let flat: Vec<f64> = a.iter().flatten().copied().collect();
        Self::new(
            DMatrix::from_row_slice(m, m, &flat),
            DVector::from_column_slice(b),
            DVector::from_column_slice(c),
        )
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn c(&self) -> &DVector<f64> {
        &self.c
    }

    pub fn spectrum(&self) -> Spectrum {
        self.spectrum
    }

    /// One step of `x+ = A x + B (r - u)`.
    pub fn step(&self, x: &DVector<f64>, r: f64, u: f64) -> DVector<f64> {
        &self.a * x + &self.b * (r - u)
    }

    /// In-place step on a plain slice; used by the simulators.
    pub fn step_into(&self, x: &[f64], r: f64, u: f64, out: &mut [f64]) {
        let m = self.dim();
        for k in 0..m {
            let mut acc = 0.0;
            for l in 0..m {
                acc += self.a[(k, l)] * x[l];
            }
            out[k] = acc + self.b[k] * r - self.b[k] * u;
        }
    }

    /// Filter output `q = C x`.
    pub fn output(&self, x: &[f64]) -> f64 {
        self.c.iter().zip(x).map(|(c, x)| c * x).sum()
    }

    pub fn controllability_matrix(&self) -> DMatrix<f64> {
        controllability_matrix_of(&self.a, &self.b)
    }

    /// Builds the controllable canonical realization of
    /// `num(z) / den(z)`, coefficients listed from the highest power down.
    ///
    /// `den` is normalized to be monic; the numerator must have lower degree.
    pub fn canonical_realization(num: &[f64], den: &[f64]) -> Result<Self> {
        let (a, b, c) = canonical_matrices(num, den)?;
        Self::new(a, b, c)
    }

    /// Transfer function `C (zI - A)^{-1} B` evaluated at a complex point.
    pub fn transfer_at(&self, z: num_complex::Complex64) -> num_complex::Complex64 {
        let m = self.dim();
        let mut zi_a = DMatrix::<num_complex::Complex64>::zeros(m, m);
        for k in 0..m {
            for l in 0..m {
                let diag = if k == l { z } else { 0.0.into() };
                zi_a[(k, l)] = diag - self.a[(k, l)];
            }
        }
        let rhs = DVector::from_iterator(m, self.b.iter().map(|&v| v.into()));
        let sol = zi_a.lu().solve(&rhs).expect("zI - A singular at evaluation point");
        self.c
            .iter()
            .zip(sol.iter())
            .map(|(c, s)| s * *c)
            .sum()
    }

    /// Input sequence of `m` steps driving `x0` exactly onto `target` with
    /// zero quantizer output: `ρ = -L_c^{-1} (A^m x0 - target)`.
    pub fn deadbeat_map_rho(&self, x0: &DVector<f64>, target: &DVector<f64>) -> Result<Vec<f64>> {
        let m = self.dim();
        if x0.len() != m || target.len() != m {
            return Err(Error::Dimension("deadbeat endpoints must have the state dimension".into()));
        }
        let lc = self.controllability_matrix();
        let lu = lc.lu();
        let am = self.a.pow(m as u32);
        let rhs = &am * x0 - target;
        let rho = -lu
            .solve(&rhs)
            .ok_or_else(|| Error::Uncontrollable { rank: numerical_rank(&self.controllability_matrix()), dim: m })?;
        let norm = rho.amax();
        if norm > 1.0 {
            return Err(Error::OutOfRange { norm });
        }
        Ok(rho.iter().copied().collect())
    }
}

/// `[A^{m-1} B, ..., A B, B]`.
pub fn controllability_matrix_of(a: &DMatrix<f64>, b: &DVector<f64>) -> DMatrix<f64> {
    let m = a.nrows();
    let mut lc = DMatrix::zeros(m, m);
    let mut col = b.clone();
    for k in (0..m).rev() {
        lc.set_column(k, &col);
        col = a * &col;
    }
    lc
}

pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    let sv = m.clone().singular_values();
    let smax = sv.max();
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_TOL * smax).count()
}

fn canonical_matrices(
    num: &[f64],
    den: &[f64],
) -> Result<(DMatrix<f64>, DVector<f64>, DVector<f64>)> {
    let den_lead = *den.first().ok_or(Error::ZeroLeadingCoefficient)?;
    if den_lead == 0.0 {
        return Err(Error::ZeroLeadingCoefficient);
    }
    let n = den.len() - 1;
    let num_trimmed: Vec<f64> = num.iter().copied().skip_while(|&v| v == 0.0).collect();
    let num_deg = num_trimmed.len().saturating_sub(1);
    if n == 0 || (!num_trimmed.is_empty() && num_deg >= n) {
        return Err(Error::NotStrictlyProper { num: num_deg, den: n });
    }
    let mut a = DMatrix::zeros(n, n);
    for k in 0..n {
        a[(0, k)] = -den[k + 1] / den_lead;
    }
    for k in 1..n {
        a[(k, k - 1)] = 1.0;
    }
    let mut b = DVector::zeros(n);
    b[0] = 1.0;
    let mut c = DVector::zeros(n);
    let offset = n - num_trimmed.len();
    for (k, &v) in num_trimmed.iter().enumerate() {
        c[offset + k] = v / den_lead;
    }
    Ok((a, b, c))
}

fn classify_spectrum(a: &DMatrix<f64>) -> Result<Spectrum> {
    let eigs = a.clone().complex_eigenvalues();
    let outer: Vec<_> = eigs.iter().filter(|l| l.norm() >= 1.0 - EIG_TOL).collect();
    match outer.as_slice() {
        [] => Ok(Spectrum::Stable {
            spectral_radius: eigs.iter().map(|l| l.norm()).fold(0.0, f64::max),
        }),
        [l] => {
            if (l.norm() - 1.0).abs() > EIG_TOL {
                return Err(Error::UnsupportedSpectrum(format!(
                    "eigenvalue {l} lies outside the unit circle"
                )));
            }
            if l.im.abs() > EIG_TOL {
                return Err(Error::UnsupportedSpectrum(format!(
                    "unit-circle eigenvalue {l} is not real"
                )));
            }
            Ok(Spectrum::UnitPole {
                eigenvalue: l.re.signum(),
            })
        }
        many => Err(Error::UnsupportedSpectrum(format!(
            "{} eigenvalues on or outside the unit circle: {:?}",
            many.len(),
            many
        ))),
    }
}

/// The finite output set `U` of the converter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct QuantizerAlphabet {
    levels: Vec<f64>,
}

impl QuantizerAlphabet {
    pub fn new(mut levels: Vec<f64>) -> Result<Self> {
        if levels.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidAlphabet("levels must be finite".into()));
        }
        if levels.len() < 2 {
            return Err(Error::InvalidAlphabet("at least two levels are required".into()));
        }
        levels.sort_by(f64::total_cmp);
        if levels.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidAlphabet("duplicate levels".into()));
        }
        let (lo, hi) = (levels[0], levels[levels.len() - 1]);
        if !(lo < -1.0 && hi > 1.0) {
            return Err(Error::InvalidAlphabet(format!(
                "levels must bracket the input range: need min < -1 and max > 1, got [{lo}, {hi}]"
            )));
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.levels[0]
    }

    pub fn max(&self) -> f64 {
        self.levels[self.levels.len() - 1]
    }

    pub fn contains(&self, v: f64) -> bool {
        self.levels.contains(&v)
    }

    /// `max |r - u|` over `r ∈ [-1, 1]`, `u ∈ U`.
    pub fn max_matching_error(&self) -> f64 {
        (1.0 - self.min()).max(self.max() + 1.0)
    }
}

impl TryFrom<Vec<f64>> for QuantizerAlphabet {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<QuantizerAlphabet> for Vec<f64> {
    fn from(a: QuantizerAlphabet) -> Self {
        a.levels
    }
}

/// Penalty `φ` applied to the filtered error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Penalty {
    #[serde(alias = "abs")]
    AbsoluteValue,
    Square,
}

impl Penalty {
    pub fn eval(self, q: f64) -> f64 {
        match self {
            Penalty::AbsoluteValue => q.abs(),
            Penalty::Square => q * q,
        }
    }

    /// Largest `|q|` with `φ(q) <= level` (`level >= 0`).
    pub fn magnitude_at(self, level: f64) -> f64 {
        match self {
            Penalty::AbsoluteValue => level,
            Penalty::Square => level.sqrt(),
        }
    }
}
