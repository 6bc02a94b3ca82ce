//! Error-free floating point arithmetic.
//!
//! Sums of products of `f64` values are accumulated into nonoverlapping
//! expansions (Shewchuk, "Adaptive Precision Floating-Point Arithmetic").
//! The expansion represents the exact real value of the sum, so floors,
//! signs and directed roundings can be decided without touching the FPU
//! rounding mode. Every tile index and per-tile bound that feeds the
//! certificate goes through this module.

use std::cmp::Ordering;

/// Maximum number of components an expansion can hold.
const CAPACITY: usize = 48;

/// `a + b = s + e` exactly.
#[inline]
pub fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    let err = (a - (s - bb)) + (b - bb);
    (s, err)
}

/// `a * b = p + e` exactly (barring overflow/underflow).
#[inline]
pub fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    let e = a.mul_add(b, -p);
    (p, e)
}

/// Exact sum of floating point terms, stored as a nonoverlapping expansion
/// with components in increasing order of magnitude.
#[derive(Clone, Copy)]
pub struct Expansion {
    comps: [f64; CAPACITY],
    len: usize,
}

impl Default for Expansion {
    fn default() -> Self {
        Self::zero()
    }
}

impl std::fmt::Debug for Expansion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(&self.comps[..self.len]).finish()
    }
}

impl Expansion {
    pub const fn zero() -> Self {
        Self {
            comps: [0.0; CAPACITY],
            len: 0,
        }
    }

    pub fn from_f64(x: f64) -> Self {
        let mut e = Self::zero();
        e.add(x);
        e
    }

    pub fn components(&self) -> &[f64] {
        &self.comps[..self.len]
    }

    /// Adds a single term (grow-expansion with zero elimination).
    pub fn add(&mut self, b: f64) {
        debug_assert!(b.is_finite(), "non-finite term {b}");
        let mut q = b;
        let mut out = 0;
        for i in 0..self.len {
            let (s, e) = two_sum(q, self.comps[i]);
            q = s;
            if e != 0.0 {
                self.comps[out] = e;
                out += 1;
            }
        }
        if q != 0.0 {
            assert!(out < CAPACITY, "expansion capacity exceeded");
            self.comps[out] = q;
            out += 1;
        }
        self.len = out;
    }

    /// Adds `a * b` exactly.
    pub fn add_product(&mut self, a: f64, b: f64) {
        let (p, e) = two_prod(a, b);
        self.add(e);
        self.add(p);
    }

    /// Adds `a * b * c` exactly.
    pub fn add_product3(&mut self, a: f64, b: f64, c: f64) {
        let (p, e) = two_prod(a, b);
        self.add_product(e, c);
        self.add_product(p, c);
    }

    pub fn add_expansion(&mut self, other: &Expansion) {
        for &c in other.components() {
            self.add(c);
        }
    }

    /// Multiplies every component by `s` exactly (each product becomes two terms).
    pub fn scaled(&self, s: f64) -> Expansion {
        let mut out = Expansion::zero();
        for &c in self.components() {
            out.add_product(c, s);
        }
        out
    }

    pub fn negated(&self) -> Expansion {
        let mut out = *self;
        for c in &mut out.comps[..out.len] {
            *c = -*c;
        }
        out
    }

    /// Sign of the exact value.
    pub fn sign(&self) -> Ordering {
        match self.len {
            0 => Ordering::Equal,
            n => {
                if self.comps[n - 1] > 0.0 {
                    Ordering::Greater
                } else {
                    Ordering::Less
                }
            }
        }
    }

    /// Compares the exact value against `x`.
    pub fn cmp_f64(&self, x: f64) -> Ordering {
        // Grow-expansion of `-x` without storing the result: the sign of the
        // sum is the sign of its most significant nonzero component.
        let mut q = -x;
        let mut last = 0.0;
        for &c in self.components() {
            let (s, e) = two_sum(q, c);
            q = s;
            if e != 0.0 {
                last = e;
            }
        }
        let top = if q != 0.0 { q } else { last };
        top.partial_cmp(&0.0).unwrap_or(Ordering::Equal)
    }

    /// Nearby floating point value (not necessarily correctly rounded).
    pub fn approx(&self) -> f64 {
        self.components().iter().sum()
    }

    /// Largest `f64` not greater than the exact value.
    pub fn round_down(&self) -> f64 {
        let mut a = self.approx();
        while self.cmp_f64(a) == Ordering::Less {
            a = a.next_down();
        }
        loop {
            let up = a.next_up();
            if self.cmp_f64(up) == Ordering::Less {
                return a;
            }
            a = up;
        }
    }

    /// Smallest `f64` not less than the exact value.
    pub fn round_up(&self) -> f64 {
        -self.negated().round_down()
    }

    /// Exact `floor` of the represented value.
    pub fn floor(&self) -> i64 {
        let approx = self.approx();
        let mut k = approx.floor();
        let slack = (self.len as f64 + 4.0) * f64::EPSILON * approx.abs();
        if approx - k > slack && k + 1.0 - approx > slack {
            return k as i64;
        }
        while self.cmp_f64(k) == Ordering::Less {
            k -= 1.0;
        }
        while self.cmp_f64(k + 1.0) != Ordering::Less {
            k += 1.0;
        }
        k as i64
    }

    /// Exact `ceil` of the represented value.
    pub fn ceil(&self) -> i64 {
        -self.negated().floor()
    }

    /// True when the represented value is an integer.
    pub fn is_integer(&self) -> bool {
        self.cmp_f64(self.floor() as f64) == Ordering::Equal
    }
}

/// Largest `f64` not greater than `a * b`.
pub fn mul_down(a: f64, b: f64) -> f64 {
    let (p, e) = two_prod(a, b);
    if e < 0.0 {
        p.next_down()
    } else {
        p
    }
}

/// Smallest `f64` not less than `a * b`.
pub fn mul_up(a: f64, b: f64) -> f64 {
    let (p, e) = two_prod(a, b);
    if e > 0.0 {
        p.next_up()
    } else {
        p
    }
}

/// Smallest `f64` not less than `a + b`.
pub fn add_up(a: f64, b: f64) -> f64 {
    let (s, e) = two_sum(a, b);
    if e > 0.0 {
        s.next_up()
    } else {
        s
    }
}

/// Largest `f64` not greater than `a + b`.
pub fn add_down(a: f64, b: f64) -> f64 {
    let (s, e) = two_sum(a, b);
    if e < 0.0 {
        s.next_down()
    } else {
        s
    }
}

/// Exact `floor(a * b)`.
pub fn floor_product(a: f64, b: f64) -> i64 {
    let mut e = Expansion::zero();
    e.add_product(a, b);
    e.floor()
}
