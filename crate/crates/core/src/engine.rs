//! Robust min-max value iteration over a piecewise-constant value function.
//!
//! The iteration `Λ_{k+1}[i] = max{0, σ_i + min_j max_{s ∈ Θ_ij} Λ_k[s]}` is
//! evaluated through a [`GameTable`]: for each state a row of successor boxes,
//! one per `(r_j, u)` pair. Boxes and rows are deduplicated, which collapses
//! the table for filters whose dynamics ignore some coordinates.

use std::collections::HashMap;
use std::time::Instant;

use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::{add_down, add_up};
use crate::grid::{tile_of, Grid, ImageMode, ImageStencil, InputGrid, PenaltyBound, Region, TileIndex, TileRange};
use crate::invariant::InvariantSet;
use crate::model::{Penalty, QuantizerAlphabet, SystemModel};

/// One nonnegative value per region tile; zero outside the region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PwcValueFunction {
    pub values: Vec<f64>,
}

impl PwcValueFunction {
    pub fn zeros(n: usize) -> Self {
        Self { values: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

/// One index into `Γ_r` per region tile.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PwcControlLaw {
    pub choice: Vec<u32>,
}

/// Successor set of a state for one input: the union over quantizer
/// outputs of the tiles met by the image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThetaSet {
    pub members: Vec<u32>,
    pub touches_outside: bool,
}

/// Finite min-max game in table form.
#[derive(Debug, Clone)]
pub struct GameTable {
    inputs: usize,
    outputs: usize,
    phi_min: Vec<f64>,
    box_offsets: Vec<usize>,
    box_members: Vec<u32>,
    box_outside: Vec<bool>,
    rows: Vec<u32>,
    state_row: Vec<u32>,
}

impl GameTable {
    pub fn num_states(&self) -> usize {
        self.phi_min.len()
    }

    pub fn num_inputs(&self) -> usize {
        self.inputs
    }

    pub fn num_outputs(&self) -> usize {
        self.outputs
    }

    pub fn num_boxes(&self) -> usize {
        self.box_outside.len()
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len() / (self.inputs * self.outputs).max(1)
    }

    /// Lower bound of the penalty on state `i`.
    pub fn phi_min(&self, i: usize) -> f64 {
        self.phi_min[i]
    }

    /// `σ_i(γ)`, rounded up.
    pub fn sigma(&self, i: usize, gamma: f64) -> f64 {
        add_up(gamma, -self.phi_min[i])
    }

    pub fn sigmas(&self, gamma: f64) -> Vec<f64> {
        (0..self.num_states()).map(|i| self.sigma(i, gamma)).collect()
    }

    /// Approximate heap footprint in bytes.
    pub fn footprint(&self) -> u64 {
        (self.phi_min.len() * 8
            + self.box_offsets.len() * 8
            + self.box_members.len() * 4
            + self.box_outside.len()
            + self.rows.len() * 4
            + self.state_row.len() * 4) as u64
    }

    fn row(&self, i: usize) -> &[u32] {
        let w = self.inputs * self.outputs;
        let r = self.state_row[i] as usize;
        &self.rows[r * w..(r + 1) * w]
    }

    fn members(&self, b: usize) -> &[u32] {
        &self.box_members[self.box_offsets[b]..self.box_offsets[b + 1]]
    }

    pub fn theta(&self, i: usize, j: usize) -> ThetaSet {
        let row = self.row(i);
        let mut members = Vec::new();
        let mut touches_outside = false;
        for &b in &row[j * self.outputs..(j + 1) * self.outputs] {
            members.extend_from_slice(self.members(b as usize));
            touches_outside |= self.box_outside[b as usize];
        }
        members.sort_unstable();
        members.dedup();
        ThetaSet {
            members,
            touches_outside,
        }
    }

    fn box_max(&self, b: usize, v: &[f64]) -> f64 {
        self.members(b).iter().fold(0.0, |acc, &s| acc.max(v[s as usize]))
    }

    /// `v_ij = max_{s ∈ Θ_ij} V[s]`, outside tiles counting as 0.
    pub fn v_ij(&self, i: usize, j: usize, v: &[f64]) -> f64 {
        let row = self.row(i);
        row[j * self.outputs..(j + 1) * self.outputs]
            .iter()
            .fold(0.0, |acc, &b| acc.max(self.box_max(b as usize, v)))
    }

    /// `(min_j v_ij, argmin)` with ties going to the smallest `j`.
    pub fn min_v(&self, i: usize, v: &[f64]) -> (f64, usize) {
        let mut best = (f64::INFINITY, 0);
        for j in 0..self.inputs {
            let x = self.v_ij(i, j, v);
            if x < best.0 {
                best = (x, j);
            }
        }
        best
    }

    fn sweep_into(&self, sigma: &[f64], v: &[f64], out: &mut [f64], boxval: &mut [f64], rowval: &mut [f64]) {
        boxval
            .par_iter_mut()
            .with_min_len(4096)
            .enumerate()
            .for_each(|(b, bv)| *bv = self.box_max(b, v));
        let w = self.inputs * self.outputs;
        let outputs = self.outputs;
        rowval
            .par_iter_mut()
            .with_min_len(256)
            .enumerate()
            .for_each(|(r, rv)| {
                let row = &self.rows[r * w..(r + 1) * w];
                let mut best = f64::INFINITY;
                for chunk in row.chunks_exact(outputs) {
                    let m = chunk.iter().fold(0.0, |acc: f64, &b| acc.max(boxval[b as usize]));
                    best = best.min(m);
                }
                *rv = best;
            });
        out.par_iter_mut()
            .with_min_len(4096)
            .enumerate()
            .for_each(|(i, o)| *o = (sigma[i] + rowval[self.state_row[i] as usize]).max(0.0));
    }
}

/// Incremental construction of a [`GameTable`] with box and row deduplication.
#[derive(Debug)]
pub struct GameTableBuilder {
    table: GameTable,
    box_ids: HashMap<Box<[i64]>, u32>,
    row_ids: HashMap<Box<[u32]>, u32>,
    memory_cap: u64,
}

impl GameTableBuilder {
    pub fn new(inputs: usize, outputs: usize, memory_cap: u64) -> Self {
        Self {
            table: GameTable {
                inputs,
                outputs,
                phi_min: Vec::new(),
                box_offsets: vec![0],
                box_members: Vec::new(),
                box_outside: Vec::new(),
                rows: Vec::new(),
                state_row: Vec::new(),
            },
            box_ids: HashMap::new(),
            row_ids: HashMap::new(),
            memory_cap,
        }
    }

    /// Interns a successor box identified by `key`; `fill` is called only
    /// for keys not seen before and returns its members and outside flag.
    pub fn intern_box(&mut self, key: &[i64], fill: impl FnOnce(&mut Vec<u32>) -> bool) -> u32 {
        if let Some(&id) = self.box_ids.get(key) {
            return id;
        }
        let id = self.table.box_outside.len() as u32;
        let outside = fill(&mut self.table.box_members);
        self.table.box_outside.push(outside);
        self.table.box_offsets.push(self.table.box_members.len());
        self.box_ids.insert(key.into(), id);
        id
    }

    /// Appends a state given its penalty bound and its `(j, u)` box ids,
    /// input-major.
    pub fn push_state(&mut self, phi_min: f64, row: &[u32]) -> Result<()> {
        debug_assert_eq!(row.len(), self.table.inputs * self.table.outputs);
        let id = match self.row_ids.get(row) {
            Some(&id) => id,
            None => {
                let id = self.row_ids.len() as u32;
                self.table.rows.extend_from_slice(row);
                self.row_ids.insert(row.into(), id);
                id
            }
        };
        self.table.phi_min.push(phi_min);
        self.table.state_row.push(id);
        if self.table.state_row.len() % 4096 == 0 {
            self.check_memory()?;
        }
        Ok(())
    }

    fn check_memory(&self) -> Result<()> {
        let used = self.table.footprint() + (self.box_ids.len() as u64) * 64 + (self.row_ids.len() as u64) * 48;
        if used > self.memory_cap {
            return Err(Error::CapacityExceeded {
                what: "transition table bytes".into(),
                needed: used,
                cap: self.memory_cap,
            });
        }
        Ok(())
    }

    pub fn finish(self) -> Result<GameTable> {
        self.check_memory()?;
        Ok(self.table)
    }
}

/// Options for building a tile transition table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableOptions {
    pub mode: ImageMode,
    pub memory_cap_bytes: u64,
}

impl Default for TableOptions {
    fn default() -> Self {
        Self {
            mode: ImageMode::default(),
            memory_cap_bytes: 3 << 30,
        }
    }
}

/// Transition data of the tile game over a region.
#[derive(Debug, Clone)]
pub struct TransitionTable {
    model: SystemModel,
    alphabet: QuantizerAlphabet,
    penalty: Penalty,
    input: InputGrid,
    options: TableOptions,
    region: Region,
    game: GameTable,
}

/// Builds the per-tile successor boxes for every `(r_j, u)` pair.
pub fn build_transition_table(
    model: &SystemModel,
    alphabet: &QuantizerAlphabet,
    penalty: Penalty,
    region: Region,
    input: &InputGrid,
    options: TableOptions,
) -> Result<TransitionTable> {
    if region.is_empty() {
        return Err(Error::Config("the computational region is empty".into()));
    }
    let grid = *region.grid();
    if grid.dim() != model.dim() {
        return Err(Error::Dimension(format!(
            "grid dimension {} does not match the model order {}",
            grid.dim(),
            model.dim()
        )));
    }
    let start = Instant::now();
    let m = model.dim();
    let nu = alphabet.len();
    let nl = input.len();
    let worst_case = region.len() as u64 * (nl * nu) as u64 * 4;
    let estimate = (worst_case / 8).max(region.len() as u64 * 16);
    if estimate > options.memory_cap_bytes {
        return Err(Error::CapacityExceeded {
            what: "estimated transition table bytes".into(),
            needed: estimate,
            cap: options.memory_cap_bytes,
        });
    }
    let stencil = ImageStencil::new(model, &grid);
    let bound = PenaltyBound::new(model, &grid, penalty);
    let shifts: Vec<Vec<_>> = (0..nl)
        .flat_map(|j| alphabet.levels().iter().map(move |&u| (j, u)))
        .map(|(j, u)| stencil.input_shift(input.values()[j], u))
        .collect();

    let mut builder = GameTableBuilder::new(nl, nu, options.memory_cap_bytes);
    let mut row = vec![0u32; nl * nu];
    let mut key = vec![0i64; 2 * m];
    let mut range = TileRange {
        lo: vec![0; m],
        hi: vec![0; m],
    };
    for tile in region.tiles() {
        let base = stencil.corner_base(&tile.coords);
        for (slot, shift) in shifts.iter().enumerate() {
            stencil.range_from_parts(&base, shift, options.mode, &mut range.lo, &mut range.hi);
            key[..m].copy_from_slice(&range.lo);
            key[m..].copy_from_slice(&range.hi);
            row[slot] = builder.intern_box(&key, |members| region.collect_range(&range, members));
        }
        builder.push_state(bound.phi_min(&tile.coords), &row)?;
    }
    let game = builder.finish()?;
    info!(
        "transition table: {} tiles, {} boxes, {} rows, {:.1} MiB, {:.2} s",
        game.num_states(),
        game.num_boxes(),
        game.num_rows(),
        game.footprint() as f64 / (1 << 20) as f64,
        start.elapsed().as_secs_f64()
    );
    Ok(TransitionTable {
        model: model.clone(),
        alphabet: alphabet.clone(),
        penalty,
        input: input.clone(),
        options,
        region,
        game,
    })
}

impl TransitionTable {
    pub fn game(&self) -> &GameTable {
        &self.game
    }

    pub fn region(&self) -> &Region {
        &self.region
    }

    pub fn grid(&self) -> &Grid {
        self.region.grid()
    }

    pub fn model(&self) -> &SystemModel {
        &self.model
    }

    pub fn alphabet(&self) -> &QuantizerAlphabet {
        &self.alphabet
    }

    pub fn penalty(&self) -> Penalty {
        self.penalty
    }

    pub fn input_grid(&self) -> &InputGrid {
        &self.input
    }

    pub fn options(&self) -> &TableOptions {
        &self.options
    }

    /// `Θ_ij` as region indices.
    pub fn theta(&self, i: usize, j: usize) -> ThetaSet {
        self.game.theta(i, j)
    }

    /// Value of `V` at a real point (zero outside the region).
    pub fn value_at(&self, v: &PwcValueFunction, x: &[f64]) -> f64 {
        let t = tile_of(self.grid(), x);
        self.region.index_of(&t.coords).map_or(0.0, |i| v.values[i])
    }

    /// Tiles outside the region whose Bellman inequality fails when they are
    /// assigned the value 0, within the part of the invariant set where the
    /// inequality is not automatic.
    pub fn exterior_violations(
        &self,
        v: &PwcValueFunction,
        gamma_cert: f64,
        set: &InvariantSet,
        cell_cap: u64,
    ) -> Result<Vec<(TileIndex, f64)>> {
        let grid = *self.grid();
        let vmax = v.max();
        // Where φ(Cx) >= γ + max V the inequality holds with any successor.
        let level = self.penalty.magnitude_at(add_up(gamma_cert, vmax).max(0.0));
        let level = level * (1.0 + 1e-12) + grid.delta();
        let bbox = set.tube().slab_bounding_box(self.model.c(), level)?;
        let range = crate::grid::tile_range_of_box(&grid, &bbox, 1);
        let cells = range.count();
        if cells > cell_cap {
            return Err(Error::CapacityExceeded {
                what: "exterior check cells".into(),
                needed: cells,
                cap: cell_cap,
            });
        }
        let tester = set.tube().tester();
        let stencil = ImageStencil::new(&self.model, &grid);
        let bound = PenaltyBound::new(&self.model, &grid, self.penalty);
        let shifts: Vec<Vec<Vec<_>>> = (0..self.input.len())
            .map(|j| {
                self.alphabet
                    .levels()
                    .iter()
                    .map(|&u| stencil.input_shift(self.input.values()[j], u))
                    .collect()
            })
            .collect();
        let m = grid.dim();
        let mut sub = TileRange {
            lo: vec![0; m],
            hi: vec![0; m],
        };
        let mut members = Vec::new();
        let mut bad = Vec::new();
        range.for_each(|c| {
            if self.region.contains(c) {
                return;
            }
            let sigma = bound.sigma(gamma_cert, c);
            if sigma + vmax <= 0.0 {
                return;
            }
            let cl = grid.closure(c);
            if !tester.meets_box(&cl.lo, &cl.hi) {
                return;
            }
            let base = stencil.corner_base(c);
            let mut best = f64::INFINITY;
            for per_u in &shifts {
                let mut vj: f64 = 0.0;
                for shift in per_u {
                    stencil.range_from_parts(&base, shift, self.options.mode, &mut sub.lo, &mut sub.hi);
                    members.clear();
                    self.region.collect_range(&sub, &mut members);
                    for &s in &members {
                        vj = vj.max(v.values[s as usize]);
                    }
                }
                best = best.min(vj);
                if add_up(sigma, best) <= 0.0 {
                    return;
                }
            }
            bad.push((TileIndex::new(c.to_vec()), add_up(sigma, best)));
        });
        Ok(bad)
    }
}

/// One application of the value-iteration operator (Jacobi style).
pub fn value_sweep(game: &GameTable, v: &PwcValueFunction, gamma: f64) -> PwcValueFunction {
    let sigma = game.sigmas(gamma);
    let mut out = vec![0.0; game.num_states()];
    let mut boxval = vec![0.0; game.num_boxes()];
    let mut rowval = vec![0.0; game.num_rows()];
    game.sweep_into(&sigma, &v.values, &mut out, &mut boxval, &mut rowval);
    PwcValueFunction { values: out }
}

/// Iteration limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationCaps {
    pub max_iters: usize,
    /// Values above this declare divergence; `None` uses the provable bound
    /// `Σ_i max(σ_i, 0)`, which no convergent iteration can exceed.
    pub divergence_threshold: Option<f64>,
    pub conv_tol: f64,
}

impl Default for IterationCaps {
    fn default() -> Self {
        Self {
            max_iters: 20_000,
            divergence_threshold: None,
            conv_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IterationStatus {
    Converged,
    Diverged,
    MaxIterations,
}

/// Slack and certified level of a passed post-check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub eta: f64,
    pub gamma_cert: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationVerdict {
    pub status: IterationStatus,
    pub iterations: usize,
    pub final_change: f64,
    pub max_value: f64,
    /// Set once the converged iterate passed the inequality check.
    pub certificate: Option<Certificate>,
}

/// Default slack: the convergence tolerance plus a few ulps of the largest
/// quantity entering one sweep.
pub fn default_eta(caps: &IterationCaps, gamma: f64, v: &PwcValueFunction) -> f64 {
    caps.conv_tol + 8.0 * f64::EPSILON * (gamma.abs() + v.max() + 1.0)
}

/// Smallest slack the inequality needs at `gamma`, rounded up: the largest
/// deficit `σ_i(γ) + min_j v_ij - V[i]` over all states, or 0.
pub fn tight_eta(game: &GameTable, v: &PwcValueFunction, gamma: f64) -> f64 {
    (0..game.num_states())
        .into_par_iter()
        .with_min_len(1024)
        .map(|i| {
            let (m, _) = game.min_v(i, &v.values);
            add_up(add_up(game.sigma(i, gamma), m), -v.values[i])
        })
        .reduce(|| 0.0, f64::max)
}

/// Runs value iteration from `Λ_0 ≡ 0`.
///
/// A converged iterate is immediately checked against the Bellman
/// inequality with [`default_eta`]; the outcome is stored in the verdict.
pub fn iterate_to_fixed_point(game: &GameTable, gamma: f64, caps: &IterationCaps) -> (PwcValueFunction, IterationVerdict) {
    let n = game.num_states();
    let sigma = game.sigmas(gamma);
    let threshold = caps
        .divergence_threshold
        .unwrap_or_else(|| sigma.iter().map(|s| s.max(0.0)).sum::<f64>());
    let mut cur = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut boxval = vec![0.0; game.num_boxes()];
    let mut rowval = vec![0.0; game.num_rows()];
    let mut change = f64::INFINITY;
    let mut status = IterationStatus::MaxIterations;
    let mut iterations = 0;
    while iterations < caps.max_iters {
        game.sweep_into(&sigma, &cur, &mut next, &mut boxval, &mut rowval);
        iterations += 1;
        let (mut up, mut down, mut vmax) = (0.0f64, 0.0f64, 0.0f64);
        for (a, b) in next.iter().zip(&cur) {
            up = up.max(a - b);
            down = down.min(a - b);
            vmax = vmax.max(*a);
        }
        assert!(down >= 0.0, "value iteration lost monotonicity (decrease {down})");
        change = up;
        std::mem::swap(&mut cur, &mut next);
        if iterations % 1000 == 0 {
            debug!("gamma {gamma}: sweep {iterations}, change {change:e}, max {vmax}");
        }
        if change <= caps.conv_tol {
            status = IterationStatus::Converged;
            break;
        }
        if vmax > threshold {
            status = IterationStatus::Diverged;
            break;
        }
    }
    let v = PwcValueFunction { values: cur };
    let max_value = v.max();
    let certificate = if status == IterationStatus::Converged {
        let eta = default_eta(caps, gamma, &v);
        check_inequality(game, &v, gamma, eta).ok()
    } else {
        None
    };
    debug!("gamma {gamma}: {status:?} after {iterations} sweeps, change {change:e}, max {max_value}");
    (
        v,
        IterationVerdict {
            status,
            iterations,
            final_change: change,
            max_value,
            certificate,
        },
    )
}

/// Why a certificate was refused.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CertifyFailure {
    /// The inequality fails at `tile` by `margin` (right side minus left side).
    InequalityViolated { tile: usize, margin: f64 },
    /// The zero-outside assumption is not justified at these tiles.
    BoundaryNonzero { shell: Vec<usize>, exterior: Vec<TileIndex> },
}

impl std::fmt::Display for CertifyFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CertifyFailure::InequalityViolated { tile, margin } => {
                write!(f, "Bellman inequality violated at tile {tile} by {margin:e}")
            }
            CertifyFailure::BoundaryNonzero { shell, exterior } => write!(
                f,
                "nonzero boundary: {} shell tiles with V > 0, {} exterior tiles failing with V = 0",
                shell.len(),
                exterior.len()
            ),
        }
    }
}

/// Checks `V[i] >= σ_i(γ - η) + min_j v_ij` on every state, with every
/// rounding directed against the certificate.
pub fn check_inequality(game: &GameTable, v: &PwcValueFunction, gamma: f64, eta: f64) -> Result<Certificate, CertifyFailure> {
    assert_eq!(v.len(), game.num_states());
    let gamma_cert = add_down(gamma, -eta);
    let worst = (0..game.num_states())
        .into_par_iter()
        .with_min_len(1024)
        .filter_map(|i| {
            let vi = v.values[i];
            let (m, _) = game.min_v(i, &v.values);
            let rhs = add_up(game.sigma(i, gamma_cert), m);
            if !(vi >= 0.0) || vi < rhs {
                Some((i, rhs - vi))
            } else {
                None
            }
        })
        .min_by(|a, b| a.0.cmp(&b.0));
    match worst {
        Some((tile, margin)) => Err(CertifyFailure::InequalityViolated { tile, margin }),
        None => Ok(Certificate { eta, gamma_cert }),
    }
}

/// Cap on the cells scanned by the exterior check.
pub const EXTERIOR_CELL_CAP: u64 = 50_000_000;

/// Full certificate check: the inequality on the region, then the zero
/// boundary (shell tiles of the region carry `V = 0` and every tile of the
/// invariant set outside the region satisfies the inequality with `V = 0`).
pub fn certify(
    table: &TransitionTable,
    v: &PwcValueFunction,
    gamma: f64,
    eta: f64,
    set: &InvariantSet,
) -> Result<std::result::Result<Certificate, CertifyFailure>> {
    let cert = match check_inequality(&table.game, v, gamma, eta) {
        Ok(c) => c,
        Err(e) => return Ok(Err(e)),
    };
    let shell: Vec<usize> = table
        .region
        .boundary_shell(&set.tube().tester())
        .into_iter()
        .filter(|&i| v.values[i] > 0.0)
        .collect();
    let exterior: Vec<TileIndex> = table
        .exterior_violations(v, cert.gamma_cert, set, EXTERIOR_CELL_CAP)?
        .into_iter()
        .map(|(t, _)| t)
        .collect();
    if !shell.is_empty() || !exterior.is_empty() {
        return Ok(Err(CertifyFailure::BoundaryNonzero { shell, exterior }));
    }
    Ok(Ok(cert))
}

/// Argmin over inputs of `v_ij` per state, ties going to the smallest `r`.
pub fn extract_control(game: &GameTable, v: &PwcValueFunction) -> PwcControlLaw {
    let choice = (0..game.num_states())
        .into_par_iter()
        .with_min_len(1024)
        .map(|i| game.min_v(i, &v.values).1 as u32)
        .collect();
    PwcControlLaw { choice }
}
