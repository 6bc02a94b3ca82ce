//! Bisection on `γ` with certified endpoints and automatic region growth.

use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::engine::{
    build_transition_table, certify, default_eta, extract_control, tight_eta, iterate_to_fixed_point, CertifyFailure,
    IterationCaps, IterationStatus, IterationVerdict, PwcControlLaw, PwcValueFunction, TableOptions, TransitionTable,
};
use crate::error::{Error, Result};
use crate::grid::{Grid, InputGrid, Region, TileRange};
use crate::invariant::InvariantSet;
use crate::model::{Penalty, QuantizerAlphabet, SystemModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub gamma_lo: f64,
    pub gamma_hi: f64,
    pub tol_gamma: f64,
    pub caps: IterationCaps,
    /// Certificate slack; `None` uses the measured deficit of the iterate,
    /// falling back to [`default_eta`] if rounding defeats it.
    pub eta: Option<f64>,
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_lo >= 0.0) || !(self.gamma_lo < self.gamma_hi) || !self.gamma_hi.is_finite() {
            return Err(Error::Config(format!(
                "need 0 <= gamma_lo < gamma_hi (got {} and {})",
                self.gamma_lo, self.gamma_hi
            )));
        }
        if !(self.tol_gamma > 0.0) {
            return Err(Error::Config("tol_gamma must be positive".into()));
        }
        if self.caps.max_iters == 0 || !(self.caps.conv_tol > 0.0) {
            return Err(Error::Config("max_iters and conv_tol must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeVerdict {
    Certified,
    Diverged,
    MaxIterations,
    InequalityViolated,
}

impl ProbeVerdict {
    pub fn is_certified(self) -> bool {
        self == ProbeVerdict::Certified
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub gamma: f64,
    pub verdict: ProbeVerdict,
    pub iterations: usize,
    pub seconds: f64,
    pub max_value: f64,
    pub region_tiles: usize,
    /// Region expansions triggered during this probe.
    pub expansions: usize,
}

/// Something that can decide one `γ`.
pub trait ProbeEngine {
    type Certificate;

    fn probe(&mut self, gamma: f64) -> Result<(ProbeRecord, Option<Self::Certificate>)>;
}

#[derive(Debug, Clone)]
pub struct Bisection<C> {
    pub certificate: C,
    pub lo: f64,
    pub hi: f64,
    pub probes: Vec<ProbeRecord>,
    /// `gamma_hi` itself certified, so the bracket never closed from above.
    pub one_sided: bool,
}

/// Bisection on the certified/not-certified predicate.
pub fn bisect<E: ProbeEngine>(engine: &mut E, cfg: &SearchConfig) -> Result<Bisection<E::Certificate>> {
    cfg.validate()?;
    let mut probes = Vec::new();
    let (rec, cert) = engine.probe(cfg.gamma_lo)?;
    let verdict = rec.verdict;
    probes.push(rec);
    let Some(mut best) = cert else {
        return Err(Error::NoConvergentPoint {
            gamma: cfg.gamma_lo,
            reason: format!("{verdict:?}"),
        });
    };
    let (rec, cert) = engine.probe(cfg.gamma_hi)?;
    probes.push(rec);
    if let Some(c) = cert {
        warn!("gamma_hi = {} certified; the bracket is one-sided", cfg.gamma_hi);
        return Ok(Bisection {
            certificate: c,
            lo: cfg.gamma_hi,
            hi: cfg.gamma_hi,
            probes,
            one_sided: true,
        });
    }
    let (mut lo, mut hi) = (cfg.gamma_lo, cfg.gamma_hi);
    while hi - lo > cfg.tol_gamma {
        let mid = 0.5 * (lo + hi);
        let (rec, cert) = engine.probe(mid)?;
        info!(
            "probe gamma = {mid}: {:?} ({} sweeps, {:.2} s)",
            rec.verdict, rec.iterations, rec.seconds
        );
        probes.push(rec);
        match cert {
            Some(c) => {
                best = c;
                lo = mid;
            }
            None => hi = mid,
        }
    }
    let min_failed = probes
        .iter()
        .filter(|p| !p.verdict.is_certified())
        .map(|p| p.gamma)
        .fold(f64::INFINITY, f64::min);
    let max_certified = probes
        .iter()
        .filter(|p| p.verdict.is_certified())
        .map(|p| p.gamma)
        .fold(f64::NEG_INFINITY, f64::max);
    if max_certified > min_failed {
        warn!("bracket inversion: certified {max_certified} above failed {min_failed}");
    }
    Ok(Bisection {
        certificate: best,
        lo,
        hi,
        probes,
        one_sided: false,
    })
}

/// Grows the region bounds by `growth` tiles on both faces of every
/// coordinate the unbounded axis moves (every coordinate when the set is
/// bounded), then keeps the tiles meeting the invariant set.
pub fn expand_region(region: &Region, growth: i64, set: &InvariantSet, tile_cap: u64) -> Result<Region> {
    if growth < 1 {
        return Err(Error::Config("region growth must be at least one tile".into()));
    }
    let bounds = grown_bounds(region.bounds(), growth, set);
    Region::from_set(region.grid(), set, bounds, tile_cap)
}

fn grown_bounds(bounds: &TileRange, growth: i64, set: &InvariantSet) -> TileRange {
    let m = bounds.lo.len();
    let moving: Vec<bool> = match set.axis() {
        Some(axis) => {
            let scale = axis.amax();
            (0..m).map(|k| axis[k].abs() > 1e-9 * scale).collect()
        }
        None => vec![true; m],
    };
    let mut out = bounds.clone();
    for k in 0..m {
        if moving[k] {
            out.lo[k] -= growth;
            out.hi[k] += growth;
        }
    }
    out
}

fn union_bounds(a: &TileRange, b: &TileRange) -> TileRange {
    TileRange {
        lo: a.lo.iter().zip(&b.lo).map(|(x, y)| *x.min(y)).collect(),
        hi: a.hi.iter().zip(&b.hi).map(|(x, y)| *x.max(y)).collect(),
    }
}

/// Limits on automatic region growth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionPolicy {
    pub tile_cap: u64,
    pub growth: i64,
    pub max_expansions: usize,
}

impl Default for RegionPolicy {
    fn default() -> Self {
        Self {
            tile_cap: 4_000_000,
            growth: 16,
            max_expansions: 64,
        }
    }
}

/// A certified probe of the tile engine.
#[derive(Debug, Clone)]
pub struct TileCertificate {
    pub gamma_probe: f64,
    pub gamma_cert: f64,
    pub eta: f64,
    pub value_function: PwcValueFunction,
    pub control_law: PwcControlLaw,
    pub region: Region,
    pub verdict: IterationVerdict,
}

/// Probe engine over one transition table, rebuilt when the region grows.
pub struct TileProbeEngine {
    model: SystemModel,
    alphabet: QuantizerAlphabet,
    penalty: Penalty,
    set: InvariantSet,
    input: InputGrid,
    options: TableOptions,
    caps: IterationCaps,
    eta: Option<f64>,
    policy: RegionPolicy,
    table: TransitionTable,
}

impl TileProbeEngine {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: &SystemModel,
        alphabet: &QuantizerAlphabet,
        penalty: Penalty,
        set: &InvariantSet,
        grid: &Grid,
        bounds: TileRange,
        options: TableOptions,
        cfg: &SearchConfig,
        policy: RegionPolicy,
    ) -> Result<Self> {
        let region = Region::from_set(grid, set, bounds, policy.tile_cap)?;
        let input = InputGrid::new(grid.density());
        let table = build_transition_table(model, alphabet, penalty, region, &input, options)?;
        Ok(Self {
            model: model.clone(),
            alphabet: alphabet.clone(),
            penalty,
            set: set.clone(),
            input,
            options,
            caps: cfg.caps,
            eta: cfg.eta,
            policy,
            table,
        })
    }

    pub fn table(&self) -> &TransitionTable {
        &self.table
    }

    pub fn set(&self) -> &InvariantSet {
        &self.set
    }

    fn grow(&mut self, exterior: &[crate::grid::TileIndex]) -> Result<()> {
        let region = self.table.region();
        let mut bounds = grown_bounds(region.bounds(), self.policy.growth, &self.set);
        for t in exterior {
            let pad = TileRange {
                lo: t.coords.iter().map(|c| c - self.policy.growth).collect(),
                hi: t.coords.iter().map(|c| c + self.policy.growth).collect(),
            };
            bounds = union_bounds(&bounds, &pad);
        }
        let grid = *region.grid();
        let region = Region::from_set(&grid, &self.set, bounds, self.policy.tile_cap)?;
        info!("region expanded to {} tiles", region.len());
        self.table = build_transition_table(&self.model, &self.alphabet, self.penalty, region, &self.input, self.options)?;
        Ok(())
    }
}

impl ProbeEngine for TileProbeEngine {
    type Certificate = TileCertificate;

    fn probe(&mut self, gamma: f64) -> Result<(ProbeRecord, Option<TileCertificate>)> {
        let start = Instant::now();
        let mut expansions = 0;
        let mut iterations = 0;
        loop {
            let (v, verdict) = iterate_to_fixed_point(self.table.game(), gamma, &self.caps);
            iterations += verdict.iterations;
            let record = |verdict_kind: ProbeVerdict, max_value: f64, tiles: usize| ProbeRecord {
                gamma,
                verdict: verdict_kind,
                iterations,
                seconds: start.elapsed().as_secs_f64(),
                max_value,
                region_tiles: tiles,
                expansions,
            };
            let tiles = self.table.region().len();
            match verdict.status {
                IterationStatus::Diverged => return Ok((record(ProbeVerdict::Diverged, verdict.max_value, tiles), None)),
                IterationStatus::MaxIterations => {
                    return Ok((record(ProbeVerdict::MaxIterations, verdict.max_value, tiles), None))
                }
                IterationStatus::Converged => {}
            }
            let mut eta = self.eta.unwrap_or_else(|| tight_eta(self.table.game(), &v, gamma));
            let mut outcome = certify(&self.table, &v, gamma, eta, &self.set)?;
            if self.eta.is_none() && matches!(outcome, Err(CertifyFailure::InequalityViolated { .. })) {
                eta = eta.max(default_eta(&self.caps, gamma, &v));
                outcome = certify(&self.table, &v, gamma, eta, &self.set)?;
            }
            match outcome {
                Ok(cert) => {
                    let control_law = extract_control(self.table.game(), &v);
                    let mut verdict = verdict;
                    verdict.certificate = Some(cert);
                    let rec = record(ProbeVerdict::Certified, verdict.max_value, tiles);
                    return Ok((
                        rec,
                        Some(TileCertificate {
                            gamma_probe: gamma,
                            gamma_cert: cert.gamma_cert,
                            eta,
                            value_function: v,
                            control_law,
                            region: self.table.region().clone(),
                            verdict,
                        }),
                    ));
                }
                Err(CertifyFailure::InequalityViolated { tile, margin }) => {
                    warn!("gamma {gamma}: inequality violated at tile {tile} by {margin:e}");
                    return Ok((record(ProbeVerdict::InequalityViolated, verdict.max_value, tiles), None));
                }
                Err(CertifyFailure::BoundaryNonzero { shell, exterior }) => {
                    expansions += 1;
                    info!(
                        "gamma {gamma}: nonzero boundary ({} shell, {} exterior tiles), expanding",
                        shell.len(),
                        exterior.len()
                    );
                    if expansions > self.policy.max_expansions {
                        return Err(Error::RegionExpansionLimit {
                            tiles: tiles as u64,
                            cap: self.policy.tile_cap,
                        });
                    }
                    self.grow(&exterior)?;
                }
            }
        }
    }
}

/// The result of a complete search.
#[derive(Debug, Clone)]
pub struct CertifiedBound {
    pub gamma_cert: f64,
    pub gamma_probe: f64,
    pub eta: f64,
    pub value_function: PwcValueFunction,
    pub control_law: PwcControlLaw,
    pub region: Region,
    pub verdict: IterationVerdict,
    pub probes: Vec<ProbeRecord>,
    pub one_sided: bool,
}

/// Runs the bisection on a tile engine and assembles the bound.
pub fn search(engine: &mut TileProbeEngine, cfg: &SearchConfig) -> Result<CertifiedBound> {
    let b = bisect(engine, cfg)?;
    let c = b.certificate;
    Ok(CertifiedBound {
        gamma_cert: c.gamma_cert,
        gamma_probe: c.gamma_probe,
        eta: c.eta,
        value_function: c.value_function,
        control_law: c.control_law,
        region: c.region,
        verdict: c.verdict,
        probes: b.probes,
        one_sided: b.one_sided,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::invariant::InvariantStrip;

    struct Stub {
        threshold: f64,
    }

    impl ProbeEngine for Stub {
        type Certificate = f64;

        fn probe(&mut self, gamma: f64) -> Result<(ProbeRecord, Option<f64>)> {
            let ok = gamma <= self.threshold;
            Ok((
                ProbeRecord {
                    gamma,
                    verdict: if ok { ProbeVerdict::Certified } else { ProbeVerdict::Diverged },
                    iterations: 1,
                    seconds: 0.0,
                    max_value: 0.0,
                    region_tiles: 0,
                    expansions: 0,
                },
                ok.then_some(gamma),
            ))
        }
    }

    fn cfg(lo: f64, hi: f64, tol: f64) -> SearchConfig {
        SearchConfig {
            gamma_lo: lo,
            gamma_hi: hi,
            tol_gamma: tol,
            caps: IterationCaps::default(),
            eta: None,
        }
    }

    #[test]
    fn stub_bisection() {
        let b = bisect(&mut Stub { threshold: 0.5 }, &cfg(0.0, 1.0, 1.0 / 64.0)).unwrap();
        assert!(b.certificate <= 0.5 && 0.5 - b.certificate <= 1.0 / 64.0);
        assert!(!b.one_sided);
        // Bracket invariant along the history.
        for p in &b.probes {
            assert_eq!(p.verdict.is_certified(), p.gamma <= 0.5);
        }
    }

    #[test]
    fn stub_errors_and_one_sided() {
        assert!(matches!(
            bisect(&mut Stub { threshold: -1.0 }, &cfg(0.0, 1.0, 0.1)),
            Err(Error::NoConvergentPoint { .. })
        ));
        let b = bisect(&mut Stub { threshold: 5.0 }, &cfg(0.0, 1.0, 0.1)).unwrap();
        assert!(b.one_sided);
        assert_eq!(b.certificate, 1.0);
        assert!(bisect(&mut Stub { threshold: 0.5 }, &cfg(1.0, 0.5, 0.1)).is_err());
    }

    #[test]
    fn tighter_tolerance_never_loses_more_than_tol() {
        let coarse = bisect(&mut Stub { threshold: 0.37 }, &cfg(0.0, 1.0, 0.05)).unwrap();
        let fine = bisect(&mut Stub { threshold: 0.37 }, &cfg(0.0, 1.0, 0.01)).unwrap();
        assert!(fine.certificate >= coarse.certificate - 0.05);
    }

    #[test]
    fn expansion_on_line() {
        let model = SystemModel::from_rows(&[vec![1.0]], &[1.0], &[1.0]).unwrap();
        let alphabet = QuantizerAlphabet::new(vec![-1.5, 1.5]).unwrap();
        let set = InvariantSet::derive(&model, &alphabet).unwrap();
        let grid = Grid::new(4, 1).unwrap();
        let region = Region::from_set(&grid, &set, TileRange { lo: vec![0], hi: vec![1] }, 100).unwrap();
        assert_eq!(region.len(), 2);
        let grown = expand_region(&region, 1, &set, 100).unwrap();
        assert_eq!(grown.len(), 4);
        assert!(matches!(expand_region(&region, 100, &set, 50), Err(Error::RegionExpansionLimit { .. })));
    }

    #[test]
    fn expansion_of_bounded_set_saturates() {
        let model = SystemModel::from_rows(&[vec![0.5]], &[1.0], &[1.0]).unwrap();
        let alphabet = QuantizerAlphabet::new(vec![-1.5, 1.5]).unwrap();
        let set = InvariantSet::derive(&model, &alphabet).unwrap();
        let grid = Grid::new(4, 1).unwrap();
        let region = Region::from_set(&grid, &set, TileRange { lo: vec![-40], hi: vec![40] }, 1000).unwrap();
        let grown = expand_region(&region, 3, &set, 1000).unwrap();
        assert_eq!(grown.tiles(), region.tiles());
    }

    #[test]
    fn two_pole_region_grows_to_zero_boundary() {
        let model = SystemModel::canonical_realization(&[1.0, 1.0], &[1.0, -1.0, 0.0]).unwrap();
        let alphabet = QuantizerAlphabet::new(vec![-1.5, 0.0, 1.5]).unwrap();
        let set = InvariantSet::Strip(InvariantStrip::new(vec![1.0, -1.0], 2.5).unwrap());
        let grid = Grid::new(8, 2).unwrap();
        let c = cfg(0.0, 1.1875, 0.05);
        // Deliberately tiny start box.
        let bounds = TileRange { lo: vec![-4, -4], hi: vec![3, 3] };
        let mut engine = TileProbeEngine::new(
            &model,
            &alphabet,
            Penalty::AbsoluteValue,
            &set,
            &grid,
            bounds,
            TableOptions::default(),
            &c,
            RegionPolicy { growth: 4, ..Default::default() },
        )
        .unwrap();
        let (rec, cert) = engine.probe(0.4).unwrap();
        assert!(cert.is_some(), "{rec:?}");
        assert!(rec.expansions >= 1);
        let cert = cert.unwrap();
        assert!(cert.region.len() > 32);
        let shell = cert.region.boundary_shell(&set.tube().tester());
        assert!(shell.iter().all(|&i| cert.value_function.values[i] == 0.0));
    }
}
