//! End-to-end orchestration: model, region, table, search, certificate,
//! simulation cross-check and artifacts.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::{AdversarySpec, RunConfig};
use crate::engine::{build_transition_table, certify, CertifyFailure, PwcControlLaw, PwcValueFunction, TableOptions};
use crate::error::{Error, Result};
use crate::grid::{tile_range_of_box, Grid, InputGrid, Region, TileRange};
use crate::invariant::{seed_region_s0, verify_strong_invariance, InvariantSet, InvariantStrip, RealBox};
use crate::model::{Penalty, QuantizerAlphabet, SystemModel};
use crate::output;
use crate::search::{search, ProbeRecord, TileProbeEngine};
use crate::sim::{adversarial_playback, Adc, ConstantAdc, FirstOrderDsm, TraceWriter};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_NO_CONVERGENT_POINT: i32 = 2;
pub const EXIT_REGION_LIMIT: i32 = 3;
pub const EXIT_CONFIG: i32 = 4;

/// Exit code for a failure outside configuration loading.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NoConvergentPoint { .. } => EXIT_NO_CONVERGENT_POINT,
        Error::RegionExpansionLimit { .. } => EXIT_REGION_LIMIT,
        _ => EXIT_OTHER,
    }
}

/// The validated objects a configuration describes.
#[derive(Debug, Clone)]
pub struct Problem {
    pub model: SystemModel,
    pub alphabet: QuantizerAlphabet,
    pub penalty: Penalty,
    pub grid: Grid,
    pub set: InvariantSet,
    pub inputs: InputGrid,
    pub options: TableOptions,
}

impl Problem {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let model = cfg.model.build()?;
        let alphabet = cfg.alphabet()?;
        let set = match &cfg.strip {
            Some(s) => {
                let strip = InvariantStrip::new(s.normal.clone(), s.halfwidth)?;
                let check = verify_strong_invariance(&model, &alphabet, &strip);
                if !check.holds {
                    return Err(Error::Config(format!(
                        "strip |n·x| <= {} is not strongly invariant (successor measure up to {})",
                        s.halfwidth, check.sup
                    )));
                }
                InvariantSet::Strip(strip)
            }
            None => InvariantSet::derive(&model, &alphabet)?,
        };
        Ok(Self {
            grid: Grid::new(cfg.d, model.dim())?,
            model,
            alphabet,
            penalty: cfg.penalty,
            set,
            inputs: InputGrid::new(cfg.d),
            options: TableOptions {
                mode: cfg.image_mode,
                memory_cap_bytes: cfg.caps.memory_cap_bytes,
            },
        })
    }

    /// Initial tile bounds: the configured box, or the seed region at
    /// `gamma_hi` padded by one tile.
    pub fn seed_bounds(&self, cfg: &RunConfig) -> Result<TileRange> {
        match &cfg.region {
            Some(b) => Ok(tile_range_of_box(
                &self.grid,
                &RealBox {
                    lo: b.lo.clone(),
                    hi: b.hi.clone(),
                },
                0,
            )),
            None => {
                let s0 = seed_region_s0(&self.model, &self.set, self.penalty, cfg.search.gamma_hi, cfg.eps0)?;
                Ok(tile_range_of_box(&self.grid, &s0, 1))
            }
        }
    }

    pub fn adc(&self, spec: &AdversarySpec) -> Box<dyn Adc> {
        match spec {
            AdversarySpec::FirstOrderDsm => Box::new(FirstOrderDsm::new(&self.alphabet)),
            AdversarySpec::ConstantZero => {
                let levels = self.alphabet.levels();
                let value = levels.iter().copied().fold(levels[0], |a, b| if b.abs() < a.abs() { b } else { a });
                Box::new(ConstantAdc { value })
            }
            AdversarySpec::Constant(v) => Box::new(ConstantAdc { value: *v }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSummary {
    pub tiles: usize,
    pub tile_lo: Vec<i64>,
    pub tile_hi: Vec<i64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl RegionSummary {
    pub fn of(region: &Region) -> Self {
        let real = region.real_bounds();
        Self {
            tiles: region.len(),
            tile_lo: region.bounds().lo.clone(),
            tile_hi: region.bounds().hi.clone(),
            lo: real.lo,
            hi: real.hi,
        }
    }
}

/// One adversary played against the certified input law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationRow {
    pub adversary: String,
    pub horizon: usize,
    pub awai: f64,
    pub excursions: usize,
    pub max_abs_q: f64,
    /// `min_N Σ_{n<=N} (φ(q[n]) - γ)` when a reference `γ` was given.
    pub min_dissipation_sum: Option<f64>,
    /// `-(max V) - 1`, the floor the dissipation sums must stay above.
    pub dissipation_floor: Option<f64>,
    /// `awai >= γ - tolerance` and the dissipation floor held.
    pub consistent: Option<bool>,
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub setup_seconds: f64,
    pub search_seconds: f64,
    pub simulation_seconds: f64,
    pub total_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub values: Option<PathBuf>,
    pub law: Option<PathBuf>,
    pub zero_level_set: Option<PathBuf>,
    pub cross_section_anti: Option<PathBuf>,
    pub cross_section_diag: Option<PathBuf>,
    pub summary: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub kind: String,
    pub message: String,
}

impl Diagnostic {
    pub fn of(err: &Error) -> Self {
        Self {
            kind: err.kind().into(),
            message: err.to_string(),
        }
    }
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub exit_code: i32,
    pub gamma_cert: Option<f64>,
    pub gamma_probe: Option<f64>,
    pub eta: Option<f64>,
    pub one_sided: Option<bool>,
    pub max_value: Option<f64>,
    pub iterations: Option<usize>,
    pub region: Option<RegionSummary>,
    pub probes: Vec<ProbeRecord>,
    pub timing: Timing,
    pub simulation: Vec<SimulationRow>,
    pub artifacts: Artifacts,
    pub error: Option<Diagnostic>,
    pub config: Option<RunConfig>,
}

impl RunResult {
    fn failed(code: i32, err: &Error, config: Option<RunConfig>) -> Self {
        Self {
            exit_code: code,
            gamma_cert: None,
            gamma_probe: None,
            eta: None,
            one_sided: None,
            max_value: None,
            iterations: None,
            region: None,
            probes: Vec::new(),
            timing: Timing::default(),
            simulation: Vec::new(),
            artifacts: Artifacts::default(),
            error: Some(Diagnostic::of(err)),
            config,
        }
    }
}

/// A completed solve, with the certified objects kept in memory.
#[derive(Debug, Clone)]
pub struct Solution {
    pub result: RunResult,
    pub region: Region,
    pub value_function: PwcValueFunction,
    pub control_law: PwcControlLaw,
}

/// Plays every configured adversary against `law`.
pub fn cross_check(
    problem: &Problem,
    cfg: &RunConfig,
    region: &Region,
    law: &PwcControlLaw,
    reference: Option<(f64, f64)>,
    trace_dir: Option<&Path>,
) -> Result<Vec<SimulationRow>> {
    let spec = &cfg.simulation;
    let mut rows = Vec::new();
    for (k, a) in spec.adversaries.iter().enumerate() {
        let mut adc = problem.adc(a);
        let trace_path = match trace_dir {
            Some(dir) if spec.trace_rows > 0 => Some(dir.join(format!("trace_{k}.csv"))),
            _ => None,
        };
        let mut writer = match &trace_path {
            Some(p) => Some(TraceWriter::new(
                std::io::BufWriter::new(std::fs::File::create(p)?),
                problem.model.dim(),
                spec.trace_rows,
            )?),
            None => None,
        };
        let est = adversarial_playback(
            &problem.model,
            &problem.alphabet,
            problem.penalty,
            law,
            region,
            &problem.inputs,
            adc.as_mut(),
            spec.horizon,
            reference.map(|r| r.0),
            writer.as_mut(),
        )?;
        if let Some(w) = writer {
            w.finish()?;
        }
        let floor = reference.map(|(_, vmax)| -vmax - 1.0);
        let consistent = reference.map(|(g, _)| {
            est.mean >= g - spec.tolerance && est.min_dissipation_sum.zip(floor).map_or(true, |(s, f)| s >= f)
        });
        if consistent == Some(false) {
            warn!("{}: simulated average {} inconsistent with the bound", a.label(), est.mean);
        }
        rows.push(SimulationRow {
            adversary: a.label(),
            horizon: est.horizon,
            awai: est.mean,
            excursions: est.excursions,
            max_abs_q: est.max_abs_q,
            min_dissipation_sum: est.min_dissipation_sum,
            dissipation_floor: floor,
            consistent,
            trace: trace_path,
        });
    }
    Ok(rows)
}

fn write_summary(path: &Path, result: &RunResult) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(result)?)?;
    Ok(())
}

/// Runs the certification and writes every artifact into `out_dir`.
pub fn solve(cfg: &RunConfig, out_dir: &Path) -> Result<Solution> {
    let start = Instant::now();
    let problem = Problem::from_config(cfg)?;
    let bounds = problem.seed_bounds(cfg)?;
    let scfg = cfg.search_config();
    let mut engine = TileProbeEngine::new(
        &problem.model,
        &problem.alphabet,
        problem.penalty,
        &problem.set,
        &problem.grid,
        bounds,
        problem.options,
        &scfg,
        cfg.region_policy(),
    )?;
    let setup = start.elapsed().as_secs_f64();
    info!(
        "table: {} tiles, {} boxes, {} rows",
        engine.table().region().len(),
        engine.table().game().num_boxes(),
        engine.table().game().num_rows()
    );
    let bound = search(&mut engine, &scfg)?;
    let searched = start.elapsed().as_secs_f64();
    info!("certified gamma {} (probe {}, eta {:e})", bound.gamma_cert, bound.gamma_probe, bound.eta);

    std::fs::create_dir_all(out_dir)?;
    let vmax = bound.value_function.max();
    let simulation = cross_check(
        &problem,
        cfg,
        &bound.region,
        &bound.control_law,
        Some((bound.gamma_cert, vmax)),
        Some(out_dir),
    )?;
    let simulated = start.elapsed().as_secs_f64();

    let artifacts = Artifacts {
        values: Some(out_dir.join("values.csv")),
        law: Some(out_dir.join("law.csv")),
        zero_level_set: Some(out_dir.join("zero_level_set.csv")),
        cross_section_anti: Some(out_dir.join("cross_section_anti.csv")),
        cross_section_diag: Some(out_dir.join("cross_section_diag.csv")),
        summary: Some(out_dir.join("summary.json")),
    };
    let (region, v) = (&bound.region, &bound.value_function);
    output::write_values(artifacts.values.as_deref().unwrap(), region, v)?;
    output::write_law(artifacts.law.as_deref().unwrap(), region, &bound.control_law, &problem.inputs)?;
    output::write_zero_level_set(artifacts.zero_level_set.as_deref().unwrap(), region, v)?;
    output::write_cross_section(
        artifacts.cross_section_anti.as_deref().unwrap(),
        region,
        v,
        output::Section::Anti,
    )?;
    output::write_cross_section(
        artifacts.cross_section_diag.as_deref().unwrap(),
        region,
        v,
        output::Section::Diagonal,
    )?;

    let result = RunResult {
        exit_code: EXIT_OK,
        gamma_cert: Some(bound.gamma_cert),
        gamma_probe: Some(bound.gamma_probe),
        eta: Some(bound.eta),
        one_sided: Some(bound.one_sided),
        max_value: Some(vmax),
        iterations: Some(bound.verdict.iterations),
        region: Some(RegionSummary::of(region)),
        probes: bound.probes,
        timing: Timing {
            setup_seconds: setup,
            search_seconds: searched - setup,
            simulation_seconds: simulated - searched,
            total_seconds: start.elapsed().as_secs_f64(),
        },
        simulation,
        artifacts,
        error: None,
        config: Some(cfg.clone()),
    };
    write_summary(result.artifacts.summary.as_deref().unwrap(), &result)?;
    Ok(Solution {
        result,
        region: bound.region,
        value_function: bound.value_function,
        control_law: bound.control_law,
    })
}

/// Loads `config_path`, solves, and returns the result with its exit code.
/// On failure a summary carrying the diagnostic is still written when the
/// output directory is usable.
pub fn run(config_path: &Path, out_dir: &Path) -> RunResult {
    let cfg = match RunConfig::load(config_path) {
        Ok(c) => c,
        Err(e) => return RunResult::failed(EXIT_CONFIG, &e, None),
    };
    if let Err(e) = Problem::from_config(&cfg) {
        return RunResult::failed(EXIT_CONFIG, &e, Some(cfg));
    }
    match solve(&cfg, out_dir) {
        Ok(s) => s.result,
        Err(e) => {
            let mut r = RunResult::failed(exit_code(&e), &e, Some(cfg));
            if std::fs::create_dir_all(out_dir).is_ok() {
                let p = out_dir.join("summary.json");
                if write_summary(&p, &r).is_ok() {
                    r.artifacts.summary = Some(p);
                }
            }
            r
        }
    }
}

/// Where an audited value function fails.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub kind: String,
    pub coords: Vec<i64>,
    /// Amount by which the inequality fails, when applicable.
    pub margin: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub gamma: f64,
    pub eta: f64,
    pub tiles: usize,
    pub max_value: f64,
    pub witness: Option<Witness>,
}

/// Re-certifies a stored value function at `gamma - eta` from scratch: the
/// transition table is rebuilt from the configuration and the Bellman
/// inequality and zero-boundary conditions are checked on every tile.
pub fn verify(cfg: &RunConfig, value_path: &Path, gamma: f64, eta: f64) -> Result<VerifyReport> {
    let problem = Problem::from_config(cfg)?;
    let (tiles, values) = output::read_values(value_path, problem.model.dim())?;
    let report = |witness: Option<Witness>, tiles: usize, max_value: f64| VerifyReport {
        passed: witness.is_none(),
        gamma,
        eta,
        tiles,
        max_value,
        witness,
    };
    let n = tiles.len();
    let vmax = values.iter().copied().fold(0.0, f64::max);
    if let Some(k) = values.iter().position(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Ok(report(
            Some(Witness {
                kind: "invalid_value".into(),
                coords: tiles[k].coords.clone(),
                margin: None,
            }),
            n,
            vmax,
        ));
    }
    let tester = problem.set.tube().tester();
    if let Some(t) = tiles.iter().find(|t| {
        let cl = problem.grid.closure(&t.coords);
        !tester.meets_box(&cl.lo, &cl.hi)
    }) {
        return Ok(report(
            Some(Witness {
                kind: "tile_outside_invariant_set".into(),
                coords: t.coords.clone(),
                margin: None,
            }),
            n,
            vmax,
        ));
    }
    let region = Region::from_tiles(&problem.grid, tiles.clone(), None)?;
    if region.len() != n {
        return Err(Error::Parse {
            path: value_path.display().to_string(),
            reason: "duplicate tiles".into(),
        });
    }
    // Values follow the file order; map them onto the region's order.
    let mut v = PwcValueFunction::zeros(n);
    for (t, val) in tiles.iter().zip(&values) {
        v.values[region.index_of(&t.coords).expect("tile in region")] = *val;
    }
    let table = build_transition_table(
        &problem.model,
        &problem.alphabet,
        problem.penalty,
        region,
        &problem.inputs,
        problem.options,
    )?;
    let coords = |i: usize| table.region().tiles()[i].coords.clone();
    let witness = match certify(&table, &v, gamma, eta, &problem.set)? {
        Ok(_) => None,
        Err(CertifyFailure::InequalityViolated { tile, margin }) => Some(Witness {
            kind: "inequality_violated".into(),
            coords: coords(tile),
            margin: Some(margin),
        }),
        Err(CertifyFailure::BoundaryNonzero { shell, exterior }) => Some(match shell.first() {
            Some(&i) => Witness {
                kind: "nonzero_boundary_shell".into(),
                coords: coords(i),
                margin: None,
            },
            None => Witness {
                kind: "exterior_inequality_violated".into(),
                coords: exterior[0].coords.clone(),
                margin: None,
            },
        }),
    };
    Ok(report(witness, n, vmax))
}

/// Plays the configured adversaries against a stored input law.
pub fn simulate(cfg: &RunConfig, law_path: &Path, reference: Option<f64>, value_max: f64, trace_dir: Option<&Path>) -> Result<Vec<SimulationRow>> {
    let problem = Problem::from_config(cfg)?;
    let (tiles, choice) = output::read_law(law_path, problem.model.dim(), &problem.inputs)?;
    let region = Region::from_tiles(&problem.grid, tiles.clone(), None)?;
    let mut law = PwcControlLaw {
        choice: vec![0; region.len()],
    };
    for (t, j) in tiles.iter().zip(choice) {
        law.choice[region.index_of(&t.coords).expect("tile in region")] = j;
    }
    if let Some(dir) = trace_dir {
        std::fs::create_dir_all(dir)?;
    }
    cross_check(&problem, cfg, &region, &law, reference.map(|g| (g, value_max)), trace_dir)
}
