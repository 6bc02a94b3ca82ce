//! Closed-loop simulation of converters driving the shaping filter.
//!
//! The filter runs `x[n+1] = A x[n] + B (r[n] - u[n])` from `x[0] = 0`, and the
//! shaped error is `q[n] = C x[n]`. Sums of penalties are accumulated exactly,
//! so averages do not depend on how a run is split into chunks.

use std::io::Write;

use crate::engine::PwcControlLaw;
use crate::error::{Error, Result};
use crate::exact::Expansion;
use crate::grid::{tile_of, InputGrid, Region};
use crate::model::{Penalty, QuantizerAlphabet, SystemModel};

/// A causal converter: `step` receives `r[n]` and returns `u[n]`.
pub trait Adc {
    fn reset(&mut self);
    fn step(&mut self, r: f64) -> f64;
    fn name(&self) -> String;
}

/// Classical first-order sigma-delta loop: the accumulator integrates the
/// input minus the previous output and a mid-tread quantizer picks the
/// nearest level (ties toward the smaller level).
#[derive(Debug, Clone)]
pub struct FirstOrderDsm {
    levels: Vec<f64>,
    acc: f64,
    last_u: f64,
}

impl FirstOrderDsm {
    pub fn new(alphabet: &QuantizerAlphabet) -> Self {
        Self {
            levels: alphabet.levels().to_vec(),
            acc: 0.0,
            last_u: 0.0,
        }
    }

    pub fn accumulator(&self) -> f64 {
        self.acc
    }

    fn quantize(&self, y: f64) -> f64 {
        let mut best = self.levels[0];
        for &l in &self.levels[1..] {
            if (y - l).abs() < (y - best).abs() {
                best = l;
            }
        }
        best
    }
}

impl Adc for FirstOrderDsm {
    fn reset(&mut self) {
        self.acc = 0.0;
        self.last_u = 0.0;
    }

    fn step(&mut self, r: f64) -> f64 {
        self.acc += r - self.last_u;
        self.last_u = self.quantize(self.acc);
        self.last_u
    }

    fn name(&self) -> String {
        "first_order_dsm".into()
    }
}

/// Emits the same value forever.
#[derive(Debug, Clone)]
pub struct ConstantAdc {
    pub value: f64,
}

impl Adc for ConstantAdc {
    fn reset(&mut self) {}

    fn step(&mut self, _r: f64) -> f64 {
        self.value
    }

    fn name(&self) -> String {
        format!("constant({})", self.value)
    }
}

/// Emits its input unchanged; only valid while the input lies in the alphabet.
#[derive(Debug, Clone, Default)]
pub struct PassThroughAdc;

impl Adc for PassThroughAdc {
    fn reset(&mut self) {}

    fn step(&mut self, r: f64) -> f64 {
        r
    }

    fn name(&self) -> String {
        "pass_through".into()
    }
}

/// Result of a simulation run of horizon `N` (samples `n = 0..=N`).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AwaiEstimate {
    pub horizon: usize,
    /// `(1/(N+1)) Σ_{n<=N} φ(q[n])`.
    pub mean: f64,
    /// `min_N Σ_{n<=N} (φ(q[n]) - γ_ref)`, when a reference level was given.
    pub min_dissipation_sum: Option<f64>,
    /// Steps on which the state was outside the law's region.
    pub excursions: usize,
    pub max_abs_q: f64,
}

/// Per-step trace rows written as CSV, stopping after `row_limit` rows.
pub struct TraceWriter<W: Write> {
    out: W,
    row_limit: usize,
    rows: usize,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(mut out: W, dim: usize, row_limit: usize) -> Result<Self> {
        let xs: Vec<String> = (0..dim).map(|k| format!("x{}", k + 1)).collect();
        writeln!(out, "n,r,u,{},q,running_mean", xs.join(","))?;
        Ok(Self { out, row_limit, rows: 0 })
    }

    /// Flushes and returns the sink.
    pub fn finish(mut self) -> Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }

    fn row(&mut self, n: usize, r: f64, u: f64, x: &[f64], q: f64, mean: f64) -> Result<()> {
        if self.rows >= self.row_limit {
            return Ok(());
        }
        self.rows += 1;
        write!(self.out, "{n},{r:.16e},{u:.16e}")?;
        for v in x {
            write!(self.out, ",{v:.16e}")?;
        }
        writeln!(self.out, ",{q:.16e},{mean:.16e}")?;
        Ok(())
    }
}

/// Where the input sequence comes from.
pub enum InputSource<'a> {
    /// Open-loop `r[n]`.
    Signal(&'a mut dyn FnMut(usize) -> f64),
    /// State feedback through a tile law; `-1` outside the region.
    Law {
        law: &'a PwcControlLaw,
        region: &'a Region,
        inputs: &'a InputGrid,
    },
}

/// A resumable closed-loop simulation.
pub struct ClosedLoop<'a> {
    model: &'a SystemModel,
    alphabet: &'a QuantizerAlphabet,
    penalty: Penalty,
    x: Vec<f64>,
    next: Vec<f64>,
    n: usize,
    sum: Expansion,
    reference: Option<f64>,
    dissipation: Expansion,
    min_dissipation: f64,
    excursions: usize,
    max_abs_q: f64,
}

impl<'a> ClosedLoop<'a> {
    pub fn new(model: &'a SystemModel, alphabet: &'a QuantizerAlphabet, penalty: Penalty, reference: Option<f64>) -> Self {
        Self {
            model,
            alphabet,
            penalty,
            x: vec![0.0; model.dim()],
            next: vec![0.0; model.dim()],
            n: 0,
            sum: Expansion::zero(),
            reference,
            dissipation: Expansion::zero(),
            min_dissipation: f64::INFINITY,
            excursions: 0,
            max_abs_q: 0.0,
        }
    }

    pub fn state(&self) -> &[f64] {
        &self.x
    }

    fn mean(&self) -> f64 {
        self.sum.approx() / self.n.max(1) as f64
    }

    /// Simulates `steps` samples.
    pub fn run<W: Write>(
        &mut self,
        steps: usize,
        source: &mut InputSource<'_>,
        adc: &mut dyn Adc,
        mut trace: Option<&mut TraceWriter<W>>,
    ) -> Result<()> {
        for _ in 0..steps {
            let q = self.model.output(&self.x);
            let phi = self.penalty.eval(q);
            self.sum.add(phi);
            self.max_abs_q = self.max_abs_q.max(q.abs());
            if let Some(g) = self.reference {
                self.dissipation.add(phi);
                self.dissipation.add(-g);
                self.min_dissipation = self.min_dissipation.min(self.dissipation.approx());
            }
            let r = match source {
                InputSource::Signal(f) => f(self.n),
                InputSource::Law { law, region, inputs } => {
                    let t = tile_of(region.grid(), &self.x);
                    match region.index_of(&t.coords) {
                        Some(i) => inputs.values()[law.choice[i] as usize],
                        None => {
                            self.excursions += 1;
                            -1.0
                        }
                    }
                }
            };
            let u = adc.step(r);
            if !self.alphabet.contains(u) {
                return Err(Error::AlphabetViolation { value: u, step: self.n });
            }
            self.n += 1;
            if let Some(t) = trace.as_deref_mut() {
                t.row(self.n - 1, r, u, &self.x, q, self.mean())?;
            }
            self.model.step_into(&self.x, r, u, &mut self.next);
            std::mem::swap(&mut self.x, &mut self.next);
        }
        Ok(())
    }

    pub fn estimate(&self) -> AwaiEstimate {
        AwaiEstimate {
            horizon: self.n.saturating_sub(1),
            mean: self.sum.round_down() / self.n.max(1) as f64,
            min_dissipation_sum: self.reference.map(|_| self.min_dissipation),
            excursions: self.excursions,
            max_abs_q: self.max_abs_q,
        }
    }
}

/// Open-loop run of `adc` against `r_source` over samples `0..=n`.
pub fn run_filtered_error(
    model: &SystemModel,
    alphabet: &QuantizerAlphabet,
    penalty: Penalty,
    adc: &mut dyn Adc,
    r_source: &mut dyn FnMut(usize) -> f64,
    n: usize,
) -> Result<AwaiEstimate> {
    if n == 0 {
        return Err(Error::Config("simulation horizon must be at least 1".into()));
    }
    adc.reset();
    let mut sim = ClosedLoop::new(model, alphabet, penalty, None);
    let mut src = InputSource::Signal(r_source);
    sim.run::<std::io::Sink>(n + 1, &mut src, adc, None)?;
    Ok(sim.estimate())
}

/// Feeds `r[n] = law(tile(x[n]))` to `adc` over samples `0..=n`, tracking the
/// dissipation sums against `reference` when given.
#[allow(clippy::too_many_arguments)]
pub fn adversarial_playback<W: Write>(
    model: &SystemModel,
    alphabet: &QuantizerAlphabet,
    penalty: Penalty,
    law: &PwcControlLaw,
    region: &Region,
    inputs: &InputGrid,
    adc: &mut dyn Adc,
    n: usize,
    reference: Option<f64>,
    trace: Option<&mut TraceWriter<W>>,
) -> Result<AwaiEstimate> {
    if n == 0 {
        return Err(Error::Config("simulation horizon must be at least 1".into()));
    }
    if law.choice.len() != region.len() {
        return Err(Error::Dimension(format!(
            "law has {} entries for a region of {} tiles",
            law.choice.len(),
            region.len()
        )));
    }
    adc.reset();
    let mut sim = ClosedLoop::new(model, alphabet, penalty, reference);
    let mut src = InputSource::Law { law, region, inputs };
    sim.run(n + 1, &mut src, adc, trace)?;
    Ok(sim.estimate())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn alphabet() -> QuantizerAlphabet {
        QuantizerAlphabet::new(vec![-1.5, 0.0, 1.5]).unwrap()
    }

    #[test]
    fn pass_through_on_zero_input() {
        let model = SystemModel::canonical_realization(&[1.0, 1.0], &[1.0, -1.0, 0.0]).unwrap();
        let est = run_filtered_error(&model, &alphabet(), Penalty::AbsoluteValue, &mut PassThroughAdc, &mut |_| 0.0, 1000).unwrap();
        assert_eq!(est.mean, 0.0);
        assert_eq!(est.horizon, 1000);
    }

    #[test]
    fn pass_through_outside_alphabet_is_rejected() {
        let model = SystemModel::from_rows(&[vec![0.0]], &[1.0], &[1.0]).unwrap();
        let err = run_filtered_error(&model, &alphabet(), Penalty::AbsoluteValue, &mut PassThroughAdc, &mut |_| 0.5, 10);
        assert!(matches!(err, Err(Error::AlphabetViolation { value, step: 0 }) if value == 0.5));
    }

    #[test]
    fn alternating_unit_error_has_unit_square_mean() {
        // x+ = r - u with u = 0, r alternating ±1: q = x = 0, 1, -1, 1, ...
        // and the constructed sequence from n = 1 on is {1, -1}.
        let model = SystemModel::from_rows(&[vec![0.0]], &[1.0], &[1.0]).unwrap();
        let mut adc = ConstantAdc { value: 0.0 };
        let n = 999;
        let mut src = |k: usize| if k % 2 == 0 { 1.0 } else { -1.0 };
        let est = run_filtered_error(&model, &alphabet(), Penalty::Square, &mut adc, &mut src, n).unwrap();
        // Samples 1..=n have φ = 1, sample 0 has φ = 0.
        assert_eq!(est.mean, n as f64 / (n + 1) as f64);
    }

    #[test]
    fn dsm_on_integrator_regression() {
        let model = SystemModel::canonical_realization(&[1.0], &[1.0, -1.0]).unwrap();
        let mut dsm = FirstOrderDsm::new(&alphabet());
        let est = run_filtered_error(&model, &alphabet(), Penalty::AbsoluteValue, &mut dsm, &mut |_| 0.0, 100_000).unwrap();
        // Zero input: the accumulator stays at 0, the quantizer outputs 0.
        assert_eq!(est.mean, 0.0);
        let mut dsm = FirstOrderDsm::new(&alphabet());
        let est = run_filtered_error(&model, &alphabet(), Penalty::AbsoluteValue, &mut dsm, &mut |_| 0.4, 100_000).unwrap();
        assert!(est.mean.is_finite() && est.mean < 1.5);
    }

    #[test]
    fn dsm_state_is_bounded() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let mut dsm = FirstOrderDsm::new(&alphabet());
        let mut worst: f64 = 0.0;
        for _ in 0..1_000_000 {
            let r = rng.gen_range(-1.0..=1.0);
            dsm.step(r);
            worst = worst.max(dsm.accumulator().abs());
        }
        assert!(worst <= 2.5, "accumulator reached {worst}");
    }

    #[test]
    fn chunking_does_not_change_the_estimate() {
        let model = SystemModel::canonical_realization(&[1.0, 1.0], &[1.0, -1.0, 0.0]).unwrap();
        let a = alphabet();
        let signal: Vec<f64> = {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
            (0..10_001).map(|_| rng.gen_range(-1.0..=1.0)).collect()
        };
        let mut whole = ClosedLoop::new(&model, &a, Penalty::AbsoluteValue, Some(0.5));
        let mut dsm = FirstOrderDsm::new(&a);
        let mut f = |n: usize| signal[n];
        whole
            .run::<std::io::Sink>(10_001, &mut InputSource::Signal(&mut f), &mut dsm, None)
            .unwrap();
        let mut pieces = ClosedLoop::new(&model, &a, Penalty::AbsoluteValue, Some(0.5));
        let mut dsm = FirstOrderDsm::new(&a);
        let mut g = |n: usize| signal[n];
        for chunk in [1, 999, 5000, 4001] {
            pieces
                .run::<std::io::Sink>(chunk, &mut InputSource::Signal(&mut g), &mut dsm, None)
                .unwrap();
        }
        assert_eq!(whole.estimate(), pieces.estimate());
    }

    #[test]
    fn trace_respects_row_limit() {
        let model = SystemModel::from_rows(&[vec![0.0]], &[1.0], &[1.0]).unwrap();
        let a = alphabet();
        let mut buf = Vec::new();
        {
            let mut tw = TraceWriter::new(&mut buf, 1, 5).unwrap();
            let mut sim = ClosedLoop::new(&model, &a, Penalty::AbsoluteValue, None);
            let mut f = |_n: usize| 0.25;
            sim.run(50, &mut InputSource::Signal(&mut f), &mut ConstantAdc { value: 0.0 }, Some(&mut tw))
                .unwrap();
        }
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert!(text.starts_with("n,r,u,x1,q,running_mean"));
    }
}
