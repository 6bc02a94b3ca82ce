//! Uniform grids, half-open tiles and conservative tile images.
//!
//! A tile with integer coordinates `c` is `∏ [c_k Δ, (c_k + 1) Δ)`, `Δ = 1/D`.
//! Image bounds are computed in units of `Δ`, where tile corners are integers,
//! and summed exactly, so every tile index derived from them is the exact floor
//! of the true real endpoint.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::{mul_down, Expansion};
use crate::invariant::{InvariantSet, RealBox, TubeTester};
use crate::model::{Penalty, SystemModel};

/// Uniform grid of spacing `1/D` in `dim` dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    density: u32,
    dim: usize,
}

impl Grid {
    pub fn new(density: u32, dim: usize) -> Result<Self> {
        if density == 0 || dim == 0 {
            return Err(Error::Config(format!(
                "grid needs D >= 1 and dim >= 1 (got D = {density}, dim = {dim})"
            )));
        }
        Ok(Self { density, dim })
    }

    pub fn density(&self) -> u32 {
        self.density
    }

    pub fn d(&self) -> f64 {
        self.density as f64
    }

    pub fn delta(&self) -> f64 {
        1.0 / self.d()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `c / D`, exact whenever `D` is a power of two.
    pub fn coordinate(&self, c: i64) -> f64 {
        c as f64 / self.d()
    }

    pub fn lower_corner(&self, tile: &TileIndex) -> Vec<f64> {
        tile.coords.iter().map(|&c| self.coordinate(c)).collect()
    }

    /// Real closure `[c Δ, (c+1) Δ]` of a tile, rounded outward.
    pub fn closure(&self, coords: &[i64]) -> RealBox {
        let lo = coords.iter().map(|&c| div_down(c as f64, self.d())).collect();
        let hi = coords.iter().map(|&c| div_up(c as f64 + 1.0, self.d())).collect();
        RealBox { lo, hi }
    }
}

/// Integer coordinates of a tile.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TileIndex {
    pub coords: Vec<i64>,
}

impl TileIndex {
    pub fn new(coords: Vec<i64>) -> Self {
        Self { coords }
    }
}

/// The tile containing `x`: `floor(x_k D)` in every coordinate.
pub fn tile_of(grid: &Grid, x: &[f64]) -> TileIndex {
    debug_assert_eq!(x.len(), grid.dim());
    TileIndex {
        coords: x.iter().map(|&v| crate::exact::floor_product(v, grid.d())).collect(),
    }
}

/// `Γ_r = {-1, -1 + Δ, ..., 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputGrid {
    density: u32,
    values: Vec<f64>,
}

impl InputGrid {
    pub fn new(density: u32) -> Self {
        let d = density as i64;
        let values = (0..=2 * d).map(|j| (j - d) as f64 / d as f64).collect();
        Self { density, values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `D r_j = j - D`, an exact integer.
    pub fn scaled(&self, j: usize) -> f64 {
        j as f64 - self.density as f64
    }

    /// Index of `r` in the grid, if it is a grid value.
    pub fn index_of(&self, r: f64) -> Option<usize> {
        self.values.iter().position(|&v| v == r)
    }
}

/// How tile images are mapped to tile index ranges.
///
/// All three modes contain every tile the true image meets, so each yields
/// a sound certificate; they differ in how much they over-approximate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ImageMode {
    /// Every tile whose closure meets the bounding box of the image of the
    /// tile closure: the closed box nudged outward by an infinitesimal, so an
    /// endpoint on a grid line reaches the tiles on both sides.
    #[default]
    Touching,
    /// Tiles meeting the closed bounding box under the half-open tile
    /// convention: a lower endpoint on a grid line stays in its own tile.
    Closure,
    /// Bounding box of the image of the half-open tile: an endpoint driven
    /// by an open tile face stays open, so it never reaches into the
    /// neighbouring tile when it lands exactly on a grid line.
    HalfOpen,
}

/// Inclusive integer range of tiles.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TileRange {
    pub lo: Vec<i64>,
    pub hi: Vec<i64>,
}

impl TileRange {
    pub fn count(&self) -> u64 {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| (h - l + 1).max(0) as u64)
            .product()
    }

    /// Calls `f` on every tile of the range in lexicographic order.
    pub fn for_each(&self, mut f: impl FnMut(&[i64])) {
        let m = self.lo.len();
        if self.lo.iter().zip(&self.hi).any(|(l, h)| l > h) {
            return;
        }
        let mut cur = self.lo.clone();
        loop {
            f(&cur);
            let mut k = m;
            loop {
                if k == 0 {
                    return;
                }
                k -= 1;
                if cur[k] < self.hi[k] {
                    cur[k] += 1;
                    for c in cur.iter_mut().skip(k + 1).zip(self.lo.iter().skip(k + 1)) {
                        *c.0 = *c.1;
                    }
                    break;
                }
            }
        }
    }
}

/// Floor (or ceiling) of a sum of expansions, with a floating point fast path.
fn round_sum(parts: &[&Expansion], ceil: bool) -> i64 {
    let mut approx = 0.0;
    let mut mag = 0.0;
    let mut len = 0;
    for p in parts {
        let a = p.approx();
        approx += a;
        mag += a.abs();
        len += p.components().len();
    }
    let k = approx.floor();
    let slack = (len as f64 + 8.0) * f64::EPSILON * mag;
    if approx - k > slack && k + 1.0 - approx > slack {
        return if ceil { k as i64 + 1 } else { k as i64 };
    }
    let mut e = *parts[0];
    for p in &parts[1..] {
        e.add_expansion(p);
    }
    if ceil {
        e.ceil()
    } else {
        e.floor()
    }
}

fn floor_sum(parts: &[&Expansion]) -> i64 {
    round_sum(parts, false)
}

fn ceil_sum(parts: &[&Expansion]) -> i64 {
    round_sum(parts, true)
}

/// Largest `f64` not above `a / b` for `b > 0`.
fn div_down(a: f64, b: f64) -> f64 {
    let mut t = a / b;
    loop {
        let mut e = Expansion::from_f64(a);
        e.add_product(-t, b);
        if e.sign() != Ordering::Less {
            return t;
        }
        t = t.next_down();
    }
}

fn div_up(a: f64, b: f64) -> f64 {
    -div_down(-a, b)
}

fn expansion_div_down(e: &Expansion, b: f64) -> f64 {
    let mut t = e.approx() / b;
    loop {
        let mut r = *e;
        r.add_product(-t, b);
        if r.sign() != Ordering::Less {
            return t;
        }
        t = t.next_down();
    }
}

fn expansion_div_up(e: &Expansion, b: f64) -> f64 {
    -expansion_div_down(&e.negated(), b)
}

#[derive(Debug, Clone)]
struct StencilRow {
    terms: Vec<(usize, f64)>,
    lo_offset: Expansion,
    hi_offset: Expansion,
    hi_open: bool,
}

/// Precomputed row data for exact tile-image ranges of `x ↦ A x + B (r - u)`.
#[derive(Debug, Clone)]
pub struct ImageStencil {
    grid: Grid,
    rows: Vec<StencilRow>,
    b: Vec<f64>,
}

impl ImageStencil {
    pub fn new(model: &SystemModel, grid: &Grid) -> Self {
        let m = model.dim();
        let a = model.a();
        let rows = (0..m)
            .map(|k| {
                let terms: Vec<(usize, f64)> = (0..m)
                    .filter(|&l| a[(k, l)] != 0.0)
                    .map(|l| (l, a[(k, l)]))
                    .collect();
                let mut lo_offset = Expansion::zero();
                let mut hi_offset = Expansion::zero();
                for &(_, v) in &terms {
                    if v < 0.0 {
                        lo_offset.add(v);
                    } else {
                        hi_offset.add(v);
                    }
                }
                StencilRow {
                    hi_open: terms.iter().any(|t| t.1 > 0.0),
                    terms,
                    lo_offset,
                    hi_offset,
                }
            })
            .collect();
        Self {
            grid: *grid,
            rows,
            b: model.b().iter().copied().collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.rows.len()
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// `Σ_l A_kl c_l` for every row, exactly.
    pub fn corner_base(&self, coords: &[i64]) -> Vec<Expansion> {
        self.rows
            .iter()
            .map(|row| {
                let mut e = Expansion::zero();
                for &(l, v) in &row.terms {
                    e.add_product(v, coords[l] as f64);
                }
                e
            })
            .collect()
    }

    /// `D B_k (r - u)` for every row, exactly.
    pub fn input_shift(&self, r: f64, u: f64) -> Vec<Expansion> {
        let d = self.grid.d();
        self.b
            .iter()
            .map(|&bk| {
                let mut e = Expansion::zero();
                e.add_product3(d, bk, r);
                e.add_product3(-d, bk, u);
                e
            })
            .collect()
    }

    /// Tile range covered by the image, given precomputed base and shift.
    pub fn range_from_parts(&self, base: &[Expansion], shift: &[Expansion], mode: ImageMode, lo: &mut [i64], hi: &mut [i64]) {
        for (k, row) in self.rows.iter().enumerate() {
            lo[k] = match mode {
                ImageMode::Touching => ceil_sum(&[&base[k], &row.lo_offset, &shift[k]]) - 1,
                _ => floor_sum(&[&base[k], &row.lo_offset, &shift[k]]),
            };
            hi[k] = match mode {
                ImageMode::HalfOpen if row.hi_open => ceil_sum(&[&base[k], &row.hi_offset, &shift[k]]) - 1,
                _ => floor_sum(&[&base[k], &row.hi_offset, &shift[k]]),
            };
            debug_assert!(lo[k] <= hi[k]);
        }
    }

    pub fn image_range(&self, coords: &[i64], r: f64, u: f64, mode: ImageMode) -> TileRange {
        let m = self.dim();
        let base = self.corner_base(coords);
        let shift = self.input_shift(r, u);
        let mut lo = vec![0; m];
        let mut hi = vec![0; m];
        self.range_from_parts(&base, &shift, mode, &mut lo, &mut hi);
        TileRange { lo, hi }
    }

    /// Real bounding box of the image of the tile closure, rounded outward.
    pub fn image_bbox(&self, coords: &[i64], r: f64, u: f64) -> RealBox {
        let base = self.corner_base(coords);
        let shift = self.input_shift(r, u);
        let d = self.grid.d();
        let mut lo = Vec::with_capacity(self.dim());
        let mut hi = Vec::with_capacity(self.dim());
        for (k, row) in self.rows.iter().enumerate() {
            let mut el = base[k];
            el.add_expansion(&row.lo_offset);
            el.add_expansion(&shift[k]);
            let mut eh = base[k];
            eh.add_expansion(&row.hi_offset);
            eh.add_expansion(&shift[k]);
            lo.push(expansion_div_down(&el, d));
            hi.push(expansion_div_up(&eh, d));
        }
        RealBox { lo, hi }
    }
}

/// Bounding box of `{A x + B r - B u : x ∈ closure(tile)}` with outward rounding.
pub fn image_bbox(model: &SystemModel, grid: &Grid, tile: &TileIndex, r: f64, u: f64) -> RealBox {
    ImageStencil::new(model, grid).image_bbox(&tile.coords, r, u)
}

/// Lower bound of `φ(Cx)` over the closure of a tile.
#[derive(Debug, Clone)]
pub struct PenaltyBound {
    grid: Grid,
    c: Vec<f64>,
    penalty: Penalty,
}

impl PenaltyBound {
    pub fn new(model: &SystemModel, grid: &Grid, penalty: Penalty) -> Self {
        Self {
            grid: *grid,
            c: model.c().iter().copied().collect(),
            penalty,
        }
    }

    /// `min φ(Cx)` over the tile closure, rounded down.
    pub fn phi_min(&self, coords: &[i64]) -> f64 {
        let mut lo = Expansion::zero();
        let mut hi = Expansion::zero();
        for (l, &cl) in self.c.iter().enumerate() {
            let c = coords[l] as f64;
            if cl < 0.0 {
                lo.add_product(cl, c + 1.0);
                hi.add_product(cl, c);
            } else {
                lo.add_product(cl, c);
                hi.add_product(cl, c + 1.0);
            }
        }
        let magnitude = if lo.sign() == Ordering::Greater {
            expansion_div_down(&lo, self.grid.d())
        } else if hi.sign() == Ordering::Less {
            expansion_div_down(&hi.negated(), self.grid.d())
        } else {
            0.0
        };
        match self.penalty {
            Penalty::AbsoluteValue => magnitude,
            Penalty::Square => mul_down(magnitude, magnitude),
        }
    }

    /// `σ_i = γ - min φ(Cx)`, rounded up.
    pub fn sigma(&self, gamma: f64, coords: &[i64]) -> f64 {
        crate::exact::add_up(gamma, -self.phi_min(coords))
    }
}

/// `sup_{x ∈ tile} (γ - φ(Cx))`, over-approximated on the closure.
pub fn sigma_sup_on_tile(model: &SystemModel, grid: &Grid, penalty: Penalty, gamma: f64, tile: &TileIndex) -> f64 {
    PenaltyBound::new(model, grid, penalty).sigma(gamma, &tile.coords)
}

const ABSENT: u32 = u32::MAX;

/// A finite set of tiles inside an integer box, with a dense index lookup.
#[derive(Debug, Clone)]
pub struct Region {
    grid: Grid,
    tiles: Vec<TileIndex>,
    bounds: TileRange,
    strides: Vec<usize>,
    lookup: Vec<u32>,
}

/// Largest dense lookup table a region may allocate, in cells.
pub const MAX_LOOKUP_CELLS: u64 = 1 << 28;

impl Region {
    /// Tiles of `bounds` whose closure meets the invariant set.
    pub fn from_set(grid: &Grid, set: &InvariantSet, bounds: TileRange, tile_cap: u64) -> Result<Self> {
        let tester = set.tube().tester();
        let mut tiles = Vec::new();
        let mut err = None;
        bounds.for_each(|c| {
            if err.is_some() {
                return;
            }
            let cl = grid.closure(c);
            if tester.meets_box(&cl.lo, &cl.hi) {
                if tiles.len() as u64 >= tile_cap {
                    err = Some(Error::RegionExpansionLimit {
                        tiles: tiles.len() as u64 + 1,
                        cap: tile_cap,
                    });
                    return;
                }
                tiles.push(TileIndex::new(c.to_vec()));
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        Self::from_tiles(grid, tiles, Some(bounds))
    }

    /// Region from an explicit tile list; `bounds` defaults to the tight box.
    pub fn from_tiles(grid: &Grid, mut tiles: Vec<TileIndex>, bounds: Option<TileRange>) -> Result<Self> {
        let m = grid.dim();
        if tiles.iter().any(|t| t.coords.len() != m) {
            return Err(Error::Dimension("tile coordinates do not match the grid dimension".into()));
        }
        tiles.sort();
        tiles.dedup();
        let bounds = match bounds {
            Some(b) => b,
            None if tiles.is_empty() => TileRange {
                lo: vec![0; m],
                hi: vec![-1; m],
            },
            None => {
                let mut lo = tiles[0].coords.clone();
                let mut hi = lo.clone();
                for t in &tiles {
                    for k in 0..m {
                        lo[k] = lo[k].min(t.coords[k]);
                        hi[k] = hi[k].max(t.coords[k]);
                    }
                }
                TileRange { lo, hi }
            }
        };
        let cells = bounds.count();
        if cells > MAX_LOOKUP_CELLS {
            return Err(Error::CapacityExceeded {
                what: "region lookup table cells".into(),
                needed: cells,
                cap: MAX_LOOKUP_CELLS,
            });
        }
        let mut strides = vec![1usize; m];
        for k in (0..m.saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * (bounds.hi[k + 1] - bounds.lo[k + 1] + 1).max(0) as usize;
        }
        let mut lookup = vec![ABSENT; cells as usize];
        let mut region = Self {
            grid: *grid,
            tiles: Vec::new(),
            bounds,
            strides,
            lookup: Vec::new(),
        };
        for (i, t) in tiles.iter().enumerate() {
            let cell = region.cell(&t.coords).ok_or_else(|| {
                Error::Dimension(format!("tile {:?} lies outside the region bounds", t.coords))
            })?;
            lookup[cell] = i as u32;
        }
        region.tiles = tiles;
        region.lookup = lookup;
        Ok(region)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn tiles(&self) -> &[TileIndex] {
        &self.tiles
    }

    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    /// Integer box the region was carved from.
    pub fn bounds(&self) -> &TileRange {
        &self.bounds
    }

    /// Real box covered by `bounds`.
    pub fn real_bounds(&self) -> RealBox {
        RealBox {
            lo: self.bounds.lo.iter().map(|&c| self.grid.coordinate(c)).collect(),
            hi: self.bounds.hi.iter().map(|&c| self.grid.coordinate(c + 1)).collect(),
        }
    }

    fn cell(&self, coords: &[i64]) -> Option<usize> {
        let mut cell = 0usize;
        for k in 0..coords.len() {
            let c = coords[k];
            if c < self.bounds.lo[k] || c > self.bounds.hi[k] {
                return None;
            }
            cell += (c - self.bounds.lo[k]) as usize * self.strides[k];
        }
        Some(cell)
    }

    pub fn index_of(&self, coords: &[i64]) -> Option<usize> {
        let cell = self.cell(coords)?;
        match self.lookup[cell] {
            ABSENT => None,
            i => Some(i as usize),
        }
    }

    pub fn contains(&self, coords: &[i64]) -> bool {
        self.index_of(coords).is_some()
    }

    /// Region indices of the tiles in `range`, and whether the range
    /// contains tiles outside the region.
    pub fn collect_range(&self, range: &TileRange, members: &mut Vec<u32>) -> bool {
        let m = self.grid.dim();
        let mut lo = vec![0i64; m];
        let mut hi = vec![0i64; m];
        let mut outside = false;
        for k in 0..m {
            lo[k] = range.lo[k].max(self.bounds.lo[k]);
            hi[k] = range.hi[k].min(self.bounds.hi[k]);
            if range.lo[k] < self.bounds.lo[k] || range.hi[k] > self.bounds.hi[k] {
                outside = true;
            }
            if lo[k] > hi[k] {
                return true;
            }
        }
        TileRange { lo, hi }.for_each(|c| match self.index_of(c) {
            Some(i) => members.push(i as u32),
            None => outside = true,
        });
        outside
    }

    /// Region tiles having a face neighbour that meets the invariant set but
    /// is not part of the region.
    pub fn boundary_shell(&self, tester: &TubeTester) -> Vec<usize> {
        let mut shell = Vec::new();
        let mut nb = vec![0i64; self.grid.dim()];
        for (i, t) in self.tiles.iter().enumerate() {
            let mut on_shell = false;
            'faces: for k in 0..self.grid.dim() {
                for step in [-1i64, 1] {
                    nb.copy_from_slice(&t.coords);
                    nb[k] += step;
                    if self.contains(&nb) {
                        continue;
                    }
                    let cl = self.grid.closure(&nb);
                    if tester.meets_box(&cl.lo, &cl.hi) {
                        on_shell = true;
                        break 'faces;
                    }
                }
            }
            if on_shell {
                shell.push(i);
            }
        }
        shell
    }
}

/// Tiles meeting a closed real box, split into region members and outside tiles.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Intersection {
    pub inside: Vec<usize>,
    pub outside: Vec<TileIndex>,
}

/// Every grid tile meeting the closed box `bbox`: a closed face on a grid
/// line reaches into the tile above it.
pub fn intersecting_tiles(region: &Region, bbox: &RealBox) -> Intersection {
    let grid = region.grid();
    let range = TileRange {
        lo: bbox.lo.iter().map(|&v| crate::exact::floor_product(v, grid.d())).collect(),
        hi: bbox.hi.iter().map(|&v| crate::exact::floor_product(v, grid.d())).collect(),
    };
    let mut out = Intersection::default();
    range.for_each(|c| match region.index_of(c) {
        Some(i) => out.inside.push(i),
        None => out.outside.push(TileIndex::new(c.to_vec())),
    });
    out
}

/// Tiles meeting the half-open box `[lo, hi)`, padded by `pad` tiles on
/// every face. A box symmetric about the origin gives a range that is
/// symmetric under the tile negation `c -> -c - 1`.
pub fn tile_range_of_box(grid: &Grid, bbox: &RealBox, pad: i64) -> TileRange {
    let lo: Vec<i64> = bbox.lo.iter().map(|&v| crate::exact::floor_product(v, grid.d())).collect();
    let hi = bbox
        .hi
        .iter()
        .zip(&lo)
        .map(|(&v, &l)| (-crate::exact::floor_product(-v, grid.d()) - 1).max(l) + pad)
        .collect();
    TileRange {
        lo: lo.into_iter().map(|l| l - pad).collect(),
        hi,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::invariant::InvariantStrip;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn two_pole() -> SystemModel {
        SystemModel::canonical_realization(&[1.0, 1.0], &[1.0, -1.0, 0.0]).unwrap()
    }

    fn strip_set() -> InvariantSet {
        InvariantSet::Strip(InvariantStrip::new(vec![1.0, -1.0], 2.5).unwrap())
    }

    #[test]
    fn tile_of_examples() {
        let g4 = Grid::new(4, 2).unwrap();
        assert_eq!(tile_of(&g4, &[0.0, 0.0]).coords, vec![0, 0]);
        assert_eq!(tile_of(&g4, &[0.25, -0.25]).coords, vec![1, -1]);
        let g64 = Grid::new(64, 2).unwrap();
        assert_eq!(tile_of(&g64, &[0.999, 0.0]).coords, vec![63, 0]);
        // 0.3 * 10 is below 3 exactly.
        let g10 = Grid::new(10, 1).unwrap();
        assert_eq!(tile_of(&g10, &[0.3]).coords, vec![2]);
    }

    #[test]
    fn input_grid_is_symmetric() {
        for d in [1, 3, 4, 10, 64] {
            let g = InputGrid::new(d);
            assert_eq!(g.len(), 2 * d as usize + 1);
            assert_eq!(g.values()[0], -1.0);
            assert_eq!(*g.values().last().unwrap(), 1.0);
            let n = g.len();
            for j in 0..n {
                assert_eq!(g.values()[j], -g.values()[n - 1 - j]);
                assert_eq!(g.scaled(j), (g.values()[j] * d as f64).round());
            }
        }
    }

    #[test]
    fn image_bbox_examples() {
        let g = Grid::new(4, 2).unwrap();
        let model = two_pole();
        let b = image_bbox(&model, &g, &TileIndex::new(vec![0, 0]), 0.0, 0.0);
        assert_eq!(b.lo, vec![0.0, 0.0]);
        assert_eq!(b.hi, vec![0.25, 0.25]);

        let ident = SystemModel::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[1.0, 1.0], &[1.0, 0.0]);
        // The identity pair is uncontrollable; test the stencil directly.
        assert!(ident.is_err());

        let zero = SystemModel::from_rows(&[vec![0.0]], &[1.0], &[1.0]).unwrap();
        let g1 = Grid::new(4, 1).unwrap();
        let b = image_bbox(&zero, &g1, &TileIndex::new(vec![7]), 0.5, -1.5);
        assert_eq!(b.lo, vec![2.0]);
        assert_eq!(b.hi, vec![2.0]);
    }

    #[test]
    fn two_pole_bbox_for_unit_tile() {
        // The x1 row of A sums |A| = 1, the x2 row has A_21 = 1: image of
        // [0, Δ]² is [0, Δ] × [0, Δ] shifted by B(r - u).
        let g = Grid::new(4, 2).unwrap();
        let model = two_pole();
        let b = image_bbox(&model, &g, &TileIndex::new(vec![0, 0]), 0.5, 0.0);
        assert_eq!(b.lo, vec![0.5, 0.0]);
        assert_eq!(b.hi, vec![0.75, 0.25]);
        // Corner enumeration.
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for x1 in [0.0, 0.25] {
            for x2 in [0.0, 0.25] {
                let y = model.step(&nalgebra::DVector::from_vec(vec![x1, x2]), 0.5, 0.0);
                for k in 0..2 {
                    lo[k] = lo[k].min(y[k]);
                    hi[k] = hi[k].max(y[k]);
                }
            }
        }
        assert_eq!(b.lo, lo.to_vec());
        assert_eq!(b.hi, hi.to_vec());
    }

    #[test]
    fn intersecting_tiles_examples() {
        let g = Grid::new(4, 2).unwrap();
        let region = Region::from_set(
            &g,
            &strip_set(),
            TileRange { lo: vec![-4, -4], hi: vec![4, 4] },
            10_000,
        )
        .unwrap();
        let point = RealBox { lo: vec![0.25, 0.5], hi: vec![0.25, 0.5] };
        let hit = intersecting_tiles(&region, &point);
        assert_eq!(hit.inside.len() + hit.outside.len(), 1);
        assert_eq!(region.tiles()[hit.inside[0]].coords, vec![1, 2]);

        let unit = RealBox { lo: vec![0.0, 0.0], hi: vec![0.25, 0.25] };
        let hit = intersecting_tiles(&region, &unit);
        assert_eq!(hit.inside.len(), 4);
        assert!(hit.outside.is_empty());

        let far = RealBox { lo: vec![10.0, 10.0], hi: vec![10.1, 10.1] };
        let hit = intersecting_tiles(&region, &far);
        assert!(hit.inside.is_empty());
        assert!(!hit.outside.is_empty());
    }

    #[test]
    fn half_open_ranges_on_section_model() {
        let g = Grid::new(4, 2).unwrap();
        let st = ImageStencil::new(&two_pole(), &g);
        let closure = st.image_range(&[0, 0], 0.0, 0.0, ImageMode::Closure);
        assert_eq!(closure.count(), 4);
        let open = st.image_range(&[0, 0], 0.0, 0.0, ImageMode::HalfOpen);
        assert_eq!(open, TileRange { lo: vec![0, 0], hi: vec![0, 0] });
        // With u = 1.5 the shift D B u = 6 is still integral.
        let open = st.image_range(&[2, -1], 0.25, 1.5, ImageMode::HalfOpen);
        assert_eq!(open, TileRange { lo: vec![-3, 2], hi: vec![-3, 2] });
    }

    #[test]
    fn half_open_range_covers_sampled_images() {
        let model = SystemModel::canonical_realization(&[1.0, 0.5], &[1.0, -0.3, 0.45]).unwrap();
        let g = Grid::new(8, 2).unwrap();
        let st = ImageStencil::new(&model, &g);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..2000 {
            let c = [rng.gen_range(-20..20i64), rng.gen_range(-20..20i64)];
            let r = rng.gen_range(-8..=8) as f64 / 8.0;
            let u = [-1.5, 1.5][rng.gen_range(0..2)];
            let range = st.image_range(&c, r, u, ImageMode::HalfOpen);
            for _ in 0..20 {
                let x: Vec<f64> = c.iter().map(|&ci| (ci as f64 + rng.gen::<f64>()) / 8.0).collect();
                let y = model.step(&nalgebra::DVector::from_vec(x), r, u);
                let t = tile_of(&g, y.as_slice());
                for k in 0..2 {
                    assert!(range.lo[k] <= t.coords[k] && t.coords[k] <= range.hi[k]);
                }
            }
        }
    }

    #[test]
    fn sigma_examples() {
        let model = two_pole();
        let g = Grid::new(64, 2).unwrap();
        let s = sigma_sup_on_tile(&model, &g, Penalty::AbsoluteValue, 0.925, &TileIndex::new(vec![4, 4]));
        assert_eq!(s, 0.925 - 8.0 / 64.0);
        // Tile straddling x1 + x2 = 0.
        let s = sigma_sup_on_tile(&model, &g, Penalty::AbsoluteValue, 0.3, &TileIndex::new(vec![-1, 0]));
        assert_eq!(s, 0.3);
        let s = sigma_sup_on_tile(&model, &g, Penalty::AbsoluteValue, 0.0, &TileIndex::new(vec![3, 0]));
        assert!(s < 0.0);
        let s = sigma_sup_on_tile(&model, &g, Penalty::Square, 0.0, &TileIndex::new(vec![-9, -7]));
        assert_eq!(s, -(14.0f64 / 64.0).powi(2));
    }

    #[test]
    fn region_lookup_and_shell() {
        let g = Grid::new(2, 2).unwrap();
        let set = strip_set();
        let region = Region::from_set(&g, &set, TileRange { lo: vec![-6, -6], hi: vec![5, 5] }, 10_000).unwrap();
        for (i, t) in region.tiles().iter().enumerate() {
            assert_eq!(region.index_of(&t.coords), Some(i));
            let cl = g.closure(&t.coords);
            assert!(set.tube().tester().meets_box(&cl.lo, &cl.hi));
        }
        // Tiles meeting the strip stop at the box; the shell is where the box cuts the strip.
        let shell = region.boundary_shell(&set.tube().tester());
        assert!(!shell.is_empty());
        for &i in &shell {
            let c = &region.tiles()[i].coords;
            assert!(c.iter().any(|&v| v == -6 || v == 5));
        }
    }

    #[test]
    fn tile_cap_is_enforced() {
        let g = Grid::new(4, 2).unwrap();
        let err = Region::from_set(&g, &strip_set(), TileRange { lo: vec![-8, -8], hi: vec![8, 8] }, 10);
        assert!(matches!(err, Err(Error::RegionExpansionLimit { .. })));
    }

    proptest! {
        #[test]
        fn tile_of_partitions(x in -50.0f64..50.0, y in -50.0f64..50.0, d in 1u32..100) {
            let g = Grid::new(d, 2).unwrap();
            let t = tile_of(&g, &[x, y]);
            for (k, v) in [x, y].iter().enumerate() {
                let c = t.coords[k] as f64;
                // c <= v D < c + 1 exactly.
                let mut lo = Expansion::zero();
                lo.add_product(*v, d as f64);
                prop_assert!(lo.cmp_f64(c) != Ordering::Less);
                prop_assert!(lo.cmp_f64(c + 1.0) == Ordering::Less);
            }
        }

        #[test]
        fn image_bbox_contains_samples(c1 in -40i64..40, c2 in -40i64..40, j in 0usize..9, ui in 0usize..3, s1 in 0.0f64..1.0, s2 in 0.0f64..1.0) {
            let model = SystemModel::canonical_realization(&[0.7, -0.2], &[1.0, -1.0, 0.0]).unwrap();
            let g = Grid::new(4, 2).unwrap();
            let r = InputGrid::new(4).values()[j];
            let u = [-1.5, 0.0, 1.5][ui];
            let b = image_bbox(&model, &g, &TileIndex::new(vec![c1, c2]), r, u);
            let x = vec![(c1 as f64 + s1) / 4.0, (c2 as f64 + s2) / 4.0];
            let y = model.step(&nalgebra::DVector::from_vec(x), r, u);
            prop_assert!(b.contains(y.as_slice()));
            // Every face is touched by a corner image.
            for k in 0..2 {
                let mut lo_hit = false;
                let mut hi_hit = false;
                for a in [0.0, 1.0] {
                    for bb in [0.0, 1.0] {
                        let x = nalgebra::DVector::from_vec(vec![(c1 as f64 + a) / 4.0, (c2 as f64 + bb) / 4.0]);
                        let y = model.step(&x, r, u);
                        lo_hit |= (y[k] - b.lo[k]).abs() <= 1e-12;
                        hi_hit |= (y[k] - b.hi[k]).abs() <= 1e-12;
                    }
                }
                prop_assert!(lo_hit && hi_hit);
            }
        }

        #[test]
        fn sigma_overapproximates(c1 in -100i64..100, c2 in -100i64..100, s1 in 0.0f64..1.0, s2 in 0.0f64..1.0, gamma in 0.0f64..2.0, sq in proptest::bool::ANY) {
            let model = SystemModel::canonical_realization(&[1.0, 0.3], &[1.0, -1.0, 0.0]).unwrap();
            let g = Grid::new(16, 2).unwrap();
            let pen = if sq { Penalty::Square } else { Penalty::AbsoluteValue };
            let sigma = sigma_sup_on_tile(&model, &g, pen, gamma, &TileIndex::new(vec![c1, c2]));
            let x = [(c1 as f64 + s1) / 16.0, (c2 as f64 + s2) / 16.0];
            prop_assert!(sigma >= gamma - pen.eval(model.output(&x)) - 1e-12);
        }

        #[test]
        fn intersecting_tiles_cover_samples(lx in -3.0f64..3.0, ly in -3.0f64..3.0, wx in 0.0f64..1.0, wy in 0.0f64..1.0, s in 0.0f64..1.0, t in 0.0f64..1.0) {
            let g = Grid::new(4, 2).unwrap();
            let region = Region::from_set(&g, &strip_set(), TileRange { lo: vec![-8, -8], hi: vec![8, 8] }, 100_000).unwrap();
            let bbox = RealBox { lo: vec![lx, ly], hi: vec![lx + wx, ly + wy] };
            let hit = intersecting_tiles(&region, &bbox);
            let p = [lx + s * wx, ly + t * wy];
            let tp = tile_of(&g, &p);
            let found = hit.inside.iter().any(|&i| region.tiles()[i] == tp) || hit.outside.contains(&tp);
            prop_assert!(found);
        }
    }
}
