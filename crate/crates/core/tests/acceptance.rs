//! Prints one PASS/FAIL line per acceptance criterion and exits nonzero if
//! any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use adcbound::config::RunConfig;
use adcbound::engine::{
    build_transition_table, certify, iterate_to_fixed_point, value_sweep, IterationStatus, PwcValueFunction,
};
use adcbound::grid::{InputGrid, Region};
use adcbound::invariant::{verify_strong_invariance, InvariantStrip};
use adcbound::model::{Penalty, QuantizerAlphabet, SystemModel};
use adcbound::oracle::{point_game, vtau_oracle};
use adcbound::pipeline::{self, Problem, Solution};
use adcbound::sim::{adversarial_playback, Adc, ConstantAdc, FirstOrderDsm};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn two_pole_config(d: u32) -> RunConfig {
    RunConfig::from_json(&format!(
        r#"{{
        "model": {{"transfer_function": {{"num": [1, 1], "den": [1, -1, 0]}}}},
        "alphabet": [-1.5, 0, 1.5],
        "penalty": "abs",
        "D": {d},
        "search": {{"gamma_lo": 0, "gamma_hi": 1.1875, "tol_gamma": 0.005}}
    }}"#
    ))
    .expect("two-pole config")
}

fn bracket_is_monotone(sol: &Solution) -> bool {
    let p = &sol.result.probes;
    let certified = p.iter().filter(|r| r.verdict.is_certified()).map(|r| r.gamma).fold(f64::MIN, f64::max);
    let failed = p.iter().filter(|r| !r.verdict.is_certified()).map(|r| r.gamma).fold(f64::MAX, f64::min);
    certified < failed
}

fn two_pole_gamma(sol: &Result<(Solution, f64), String>) -> Outcome {
    let (sol, secs) = sol.as_ref().map_err(|e| e.clone())?;
    let g = sol.result.gamma_cert.ok_or("no certificate")?;
    let msg = format!("gamma_cert = {g} in {secs:.0} s");
    if (g - 0.925).abs() <= 0.02 && *secs <= 900.0 && bracket_is_monotone(sol) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn upper_bound(sol: &Result<(Solution, f64), String>) -> Outcome {
    let (sol, _) = sol.as_ref().map_err(|e| e.clone())?;
    let g = sol.result.gamma_cert.ok_or("no certificate")?;
    if g < 1.1875 {
        Ok(format!("{g} < 1.1875"))
    } else {
        Err(format!("{g} >= 1.1875"))
    }
}

fn run_verify(config: &Path, values: &Path, gamma: f64) -> Result<(i32, serde_json::Value), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_adcbound"))
        .arg("verify")
        .arg(config)
        .arg("--value")
        .arg(values)
        .arg("--gamma")
        .arg(format!("{gamma:?}"))
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    let report = serde_json::from_slice(&o.stdout).map_err(|e| format!("verify output: {e}"))?;
    Ok((o.status.code().unwrap_or(-1), report))
}

fn corrupt(values: &Path, out: &Path, tile: usize, by: f64) -> Result<(), String> {
    let mut rd = csv::Reader::from_path(values).map_err(|e| e.to_string())?;
    let mut wr = csv::Writer::from_path(out).map_err(|e| e.to_string())?;
    wr.write_record(rd.headers().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    for (i, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| e.to_string())?;
        let mut fields: Vec<String> = rec.iter().map(str::to_string).collect();
        if i == tile {
            let last = fields.len() - 1;
            let v: f64 = fields[last].parse().map_err(|e| format!("{e}"))?;
            fields[last] = format!("{:.16e}", v - by);
        }
        wr.write_record(&fields).map_err(|e| e.to_string())?;
    }
    wr.flush().map_err(|e| e.to_string())
}

fn certificate_audit(sol: &Result<(Solution, f64), String>, cfg: &RunConfig, dir: &Path) -> Outcome {
    let (sol, _) = sol.as_ref().map_err(|e| e.clone())?;
    let gamma = sol.result.gamma_cert.ok_or("no certificate")?;
    let eta = sol.result.eta.ok_or("no slack")?;
    let config = dir.join("config.json");
    std::fs::write(&config, cfg.to_json()).map_err(|e| e.to_string())?;
    let values = dir.join("values.csv");
    let (code, report) = run_verify(&config, &values, gamma)?;
    if code != 0 || report["passed"] != true {
        return Err(format!("verify rejected the emitted certificate: {report}"));
    }

    // The CLI on the largest tile value.
    let by = eta + 1e-6;
    let v = &sol.value_function.values;
    let argmax = (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
    let bad = dir.join("corrupted.csv");
    corrupt(&values, &bad, argmax, by)?;
    let (code, report) = run_verify(&config, &bad, gamma)?;
    if code == 0 || report["witness"].is_null() {
        return Err(format!("corrupted tile {argmax} passed: {report}"));
    }

    // The same check, in process, on a sample of tiles.
    let problem = Problem::from_config(cfg).map_err(|e| e.to_string())?;
    let table = build_transition_table(
        &problem.model,
        &problem.alphabet,
        problem.penalty,
        sol.region.clone(),
        &problem.inputs,
        problem.options,
    )
    .map_err(|e| e.to_string())?;
    let positive: Vec<usize> = (0..v.len()).filter(|&i| v[i] > 0.0).collect();
    let zero = (0..v.len()).find(|&i| v[i] == 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut sample: Vec<usize> = (0..40).map(|_| positive[rng.gen_range(0..positive.len())]).collect();
    sample.extend(zero);
    let mut rejected = 0;
    for &i in &sample {
        let mut w = sol.value_function.clone();
        w.values[i] -= by;
        match certify(&table, &w, gamma, 0.0, &problem.set).map_err(|e| e.to_string())? {
            Ok(_) => return Err(format!("corruption of tile {i} by {by:e} was accepted")),
            Err(_) => rejected += 1,
        }
    }
    Ok(format!(
        "verify passes at {gamma}; {} corrupted files rejected (argmax via the CLI)",
        rejected + 1
    ))
}

fn oracle_equivalence() -> Outcome {
    let model = SystemModel::from_rows(&[vec![0.5]], &[1.0], &[1.0]).map_err(|e| e.to_string())?;
    let alphabet = QuantizerAlphabet::new(vec![-2.0, 2.0]).map_err(|e| e.to_string())?;
    let inputs = InputGrid::new(4);
    let gamma = 0.25;
    let seeds: Vec<Vec<f64>> = (-8..=8).map(|k| vec![k as f64 * 0.25]).collect();
    let pg = point_game(&model, &alphabet, inputs.values(), Penalty::AbsoluteValue, &seeds, 4, 1 << 22)
        .map_err(|e| e.to_string())?;
    let mut v = PwcValueFunction::zeros(pg.table.num_states());
    let mut worst: f64 = 0.0;
    for k in 0..=5 {
        for s in &seeds {
            let oracle = vtau_oracle(&model, &alphabet, inputs.values(), |x| gamma - x[0].abs(), s, k)
                .map_err(|e| e.to_string())?;
            let i = pg.index_of(s).ok_or("seed missing")?;
            worst = worst.max((v.values[i] - oracle).abs());
        }
        v = value_sweep(&pg.table, &v, gamma);
    }
    let msg = format!("{} seeds, {} point states, max deviation {worst:e} over k <= 5", seeds.len(), pg.states.len());
    if worst <= 1e-12 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn monotonicity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut configs = 0;
    let mut fixed_pairs = 0;
    for n in 0..6 {
        let a: f64 = rng.gen_range(-0.8..0.8);
        let b: f64 = rng.gen_range(-0.9..0.9);
        let d = [2u32, 4, 8][rng.gen_range(0..3)];
        let model = match n % 3 {
            0 => format!(r#"{{"matrices": {{"a": [[{a:?}]], "b": [1], "c": [1]}}}}"#),
            1 => format!(
                r#"{{"transfer_function": {{"num": [1, {b:?}], "den": [1, {:?}, {:?}]}}}}"#,
                -(a + 0.1 * b),
                0.1 * a * b
            ),
            _ => r#"{"transfer_function": {"num": [1, 1], "den": [1, -1, 0]}}"#.to_string(),
        };
        let alphabet = if n % 3 == 0 { "[-2, 2]" } else { "[-1.5, 0, 1.5]" };
        let cfg = RunConfig::from_json(&format!(
            r#"{{"model": {model}, "alphabet": {alphabet}, "penalty": "abs", "D": {d},
                "search": {{"gamma_lo": 0, "gamma_hi": 1.2, "tol_gamma": 0.01}}}}"#
        ))
        .map_err(|e| e.to_string())?;
        let p = Problem::from_config(&cfg).map_err(|e| e.to_string())?;
        let bounds = p.seed_bounds(&cfg).map_err(|e| e.to_string())?;
        let region = Region::from_set(&p.grid, &p.set, bounds, 1 << 20).map_err(|e| e.to_string())?;
        let table = build_transition_table(&p.model, &p.alphabet, p.penalty, region, &p.inputs, p.options)
            .map_err(|e| e.to_string())?;
        let game = table.game();
        let hi_gamma: f64 = rng.gen_range(0.1..1.0);
        let lo_gamma = hi_gamma * rng.gen_range(0.1..0.9);
        let (mut lo, mut hi) = (PwcValueFunction::zeros(game.num_states()), PwcValueFunction::zeros(game.num_states()));
        for k in 0..60 {
            let (ln, hn) = (value_sweep(game, &lo, lo_gamma), value_sweep(game, &hi, hi_gamma));
            for i in 0..game.num_states() {
                if ln.values[i] < lo.values[i] || hn.values[i] < hi.values[i] {
                    return Err(format!("config {n}: sweep {k} decreased state {i}"));
                }
                if ln.values[i] > hn.values[i] {
                    return Err(format!("config {n}: iterate {k} not ordered in gamma at state {i}"));
                }
            }
            lo = ln;
            hi = hn;
        }
        let caps = cfg.iteration_caps();
        let (vl, rl) = iterate_to_fixed_point(game, lo_gamma, &caps);
        let (vh, rh) = iterate_to_fixed_point(game, hi_gamma, &caps);
        if rh.status == IterationStatus::Converged {
            if rl.status != IterationStatus::Converged {
                return Err(format!("config {n}: larger gamma converged but smaller did not"));
            }
            if vl.values.iter().zip(&vh.values).any(|(a, b)| a > b) {
                return Err(format!("config {n}: fixed points not ordered"));
            }
            fixed_pairs += 1;
        }
        configs += 1;
    }
    Ok(format!("{configs} configs, 60 sweeps each, {fixed_pairs} ordered fixed-point pairs"))
}

fn dyadic(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let scale = (1u64 << 20) as f64;
    (rng.gen_range(lo..=hi) * scale).round() / scale
}

fn invariance() -> Outcome {
    let model = SystemModel::canonical_realization(&[1.0, 1.0], &[1.0, -1.0, 0.0]).map_err(|e| e.to_string())?;
    let alphabet = QuantizerAlphabet::new(vec![-1.5, 0.0, 1.5]).map_err(|e| e.to_string())?;
    let levels = alphabet.levels().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut x = vec![0.0, 0.0];
    let mut next = vec![0.0, 0.0];
    let mut widest: f64 = 0.0;
    for n in 0..1_000_000 {
        let r = dyadic(&mut rng, -1.0, 1.0);
        let u = levels[rng.gen_range(0..levels.len())];
        model.step_into(&x, r, u, &mut next);
        std::mem::swap(&mut x, &mut next);
        let w = (x[0] - x[1]).abs();
        widest = widest.max(w);
        if w > 2.5 {
            return Err(format!("step {n}: |x1 - x2| = {w}"));
        }
    }
    let mut agree = 0;
    for (half, expect) in [(2.5, true), (2.0, false)] {
        let strip = InvariantStrip::new(vec![1.0, -1.0], half).map_err(|e| e.to_string())?;
        let check = verify_strong_invariance(&model, &alphabet, &strip);
        let mut escaped = false;
        for _ in 0..10_000 {
            let s = dyadic(&mut rng, -4.0, 4.0);
            let d = dyadic(&mut rng, -half, half) / 2.0;
            let p = [s + d, s - d];
            let r = dyadic(&mut rng, -1.0, 1.0);
            let u = levels[rng.gen_range(0..levels.len())];
            let mut y = [0.0, 0.0];
            model.step_into(&p, r, u, &mut y);
            escaped |= !strip.contains(&y);
        }
        // The witness of a failed check must leave the strip itself.
        if let Some(w) = &check.witness {
            let mut y = [0.0, 0.0];
            model.step_into(&w.x, w.r, w.u, &mut y);
            escaped |= !strip.contains(&y);
        }
        if check.holds != expect || check.holds == escaped {
            return Err(format!("halfwidth {half}: check {} but sampling escaped = {escaped}", check.holds));
        }
        agree += 1;
    }
    Ok(format!("10^6 steps, max |x1 - x2| = {widest}; {agree} strips agree with 10^4 samples"))
}

fn playback(sol: &Result<(Solution, f64), String>, cfg: &RunConfig) -> Outcome {
    let (sol, _) = sol.as_ref().map_err(|e| e.clone())?;
    let gamma = sol.result.gamma_cert.ok_or("no certificate")?;
    let p = Problem::from_config(cfg).map_err(|e| e.to_string())?;
    let mut adcs: Vec<Box<dyn Adc>> = vec![Box::new(FirstOrderDsm::new(&p.alphabet)), Box::new(ConstantAdc { value: 0.0 })];
    let mut msg = Vec::new();
    let mut ok = true;
    for adc in adcs.iter_mut() {
        let est = adversarial_playback::<std::io::Sink>(
            &p.model,
            &p.alphabet,
            p.penalty,
            &sol.control_law,
            &sol.region,
            &p.inputs,
            adc.as_mut(),
            100_000,
            Some(gamma),
            None,
        )
        .map_err(|e| e.to_string())?;
        ok &= est.mean >= gamma - 0.05;
        msg.push(format!("{} AWAI {:.4}", adc.name(), est.mean));
    }
    let msg = format!("{} (bound {gamma})", msg.join(", "));
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn smoke() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let start = Instant::now();
    let sol = pipeline::solve(&two_pole_config(16), tmp.path()).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let g = sol.result.gamma_cert.ok_or("no certificate")?;
    let msg = format!("gamma_cert = {g} in {secs:.1} s");
    if secs < 30.0 && g > 0.5 && bracket_is_monotone(&sol) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let tmp = tempfile::tempdir().expect("tempdir");
    let cfg = two_pole_config(64);
    let start = Instant::now();
    let two_pole = pipeline::solve(&cfg, tmp.path())
        .map(|s| (s, start.elapsed().as_secs_f64()))
        .map_err(|e| e.to_string());

    let results: Vec<(&str, Outcome)> = vec![
        ("two-pole example bound within 0.02 of 0.925", two_pole_gamma(&two_pole)),
        ("bound below the known upper bound", upper_bound(&two_pole)),
        ("certificate audit", certificate_audit(&two_pole, &cfg, tmp.path())),
        ("oracle equivalence", oracle_equivalence()),
        ("monotonicity suite", monotonicity()),
        ("invariance suite", invariance()),
        ("dissipation playback", playback(&two_pole, &cfg)),
        ("coarse grid smoke run", smoke()),
    ];
    let mut failed = 0;
    for (name, r) in &results {
        match r {
            Ok(m) => println!("PASS  {name}: {m}"),
            Err(m) => {
                failed += 1;
                println!("FAIL  {name}: {m}");
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
