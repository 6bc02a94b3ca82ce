//! Exhaustive evaluation of the finite-horizon game value `V_τ`, used to
//! cross-check the table-driven iteration.
//!
//! `V_τ(x_0) = max_{θ_0} min_{r_0} max_{u_0, θ_1} ... Σ_{n<τ} h_{n+1} σ(x_n)`
//! with `h_0 = 1`, `h_{n+1} = θ_n h_n` and `θ_n ∈ {0, 1}`. Once `h` drops to
//! zero every later term vanishes, so that branch is cut.

use std::collections::HashMap;

use crate::engine::{GameTable, GameTableBuilder};
use crate::error::{Error, Result};
use crate::model::{Penalty, QuantizerAlphabet, SystemModel};

/// A two-player game with a finite input set for the minimizer and a finite
/// disturbance set for the maximizer.
pub trait Game {
    type State: Clone;

    fn sigma(&self, x: &Self::State) -> f64;
    fn num_inputs(&self) -> usize;
    fn num_outputs(&self) -> usize;
    fn successor(&self, x: &Self::State, input: usize, output: usize) -> Self::State;
}

/// `x+ = A x + B r - B u` with a finite input list and the alphabet as outputs.
pub struct LinearGame<'a, F: Fn(&[f64]) -> f64> {
    pub model: &'a SystemModel,
    pub alphabet: &'a QuantizerAlphabet,
    pub inputs: &'a [f64],
    pub sigma: F,
}

impl<F: Fn(&[f64]) -> f64> Game for LinearGame<'_, F> {
    type State = Vec<f64>;

    fn sigma(&self, x: &Vec<f64>) -> f64 {
        (self.sigma)(x)
    }

    fn num_inputs(&self) -> usize {
        self.inputs.len()
    }

    fn num_outputs(&self) -> usize {
        self.alphabet.len()
    }

    fn successor(&self, x: &Vec<f64>, input: usize, output: usize) -> Vec<f64> {
        let mut y = vec![0.0; x.len()];
        self.model
            .step_into(x, self.inputs[input], self.alphabet.levels()[output], &mut y);
        y
    }
}

struct Tree<'g, G: Game> {
    game: &'g G,
    tau: usize,
    nodes: u64,
    cap: u64,
}

impl<G: Game> Tree<'_, G> {
    /// Value of the subgame at `x = x_n` carrying weight `h = h_n`.
    fn node(&mut self, x: &G::State, h: f64, n: usize) -> Result<f64> {
        self.nodes += 1;
        if self.nodes > self.cap {
            return Err(Error::CapacityExceeded {
                what: "game tree nodes".into(),
                needed: self.nodes,
                cap: self.cap,
            });
        }
        let mut best: f64 = 0.0; // θ_n = 0
        let h1 = h; // θ_n = 1
        if h1 != 0.0 {
            let mut total = h1 * self.game.sigma(x);
            if n + 1 < self.tau {
                let mut inner = f64::INFINITY;
                for j in 0..self.game.num_inputs() {
                    let mut worst = f64::NEG_INFINITY;
                    for k in 0..self.game.num_outputs() {
                        let y = self.game.successor(x, j, k);
                        worst = worst.max(self.node(&y, h1, n + 1)?);
                    }
                    inner = inner.min(worst);
                }
                total += inner;
            }
            best = best.max(total);
        }
        Ok(best)
    }
}

/// `V_τ(x_0)` of an arbitrary game by explicit recursion.
pub fn vtau_game<G: Game>(game: &G, x0: &G::State, tau: usize, node_cap: u64) -> Result<f64> {
    if tau == 0 {
        return Ok(0.0);
    }
    let mut tree = Tree {
        game,
        tau,
        nodes: 0,
        cap: node_cap,
    };
    tree.node(x0, 1.0, 0)
}

/// Default cap on explored tree nodes.
pub const NODE_CAP: u64 = 200_000_000;

/// `V_τ(x_0)` for the filter dynamics with inputs drawn from `input_set`.
pub fn vtau_oracle(
    model: &SystemModel,
    alphabet: &QuantizerAlphabet,
    input_set: &[f64],
    sigma: impl Fn(&[f64]) -> f64,
    x0: &[f64],
    tau: usize,
) -> Result<f64> {
    let game = LinearGame {
        model,
        alphabet,
        inputs: input_set,
        sigma,
    };
    vtau_game(&game, &x0.to_vec(), tau, NODE_CAP)
}

/// Point states reachable from the seeds, in discovery order.
#[derive(Debug, Clone)]
pub struct PointGame {
    pub states: Vec<Vec<f64>>,
    pub table: GameTable,
}

impl PointGame {
    pub fn index_of(&self, x: &[f64]) -> Option<usize> {
        self.states.iter().position(|s| s == x)
    }
}

fn key(x: &[f64]) -> Vec<u64> {
    x.iter().map(|v| (v + 0.0).to_bits()).collect()
}

/// Game table over the point states reachable from `seeds` in at most
/// `depth` steps. Successors beyond that depth are treated as outside
/// states of value 0, so the `k`-th iterate is exact at the seeds for
/// `k <= depth + 1`.
pub fn point_game(
    model: &SystemModel,
    alphabet: &QuantizerAlphabet,
    input_set: &[f64],
    penalty: Penalty,
    seeds: &[Vec<f64>],
    depth: usize,
    state_cap: usize,
) -> Result<PointGame> {
    let mut states: Vec<Vec<f64>> = Vec::new();
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut level: Vec<usize> = Vec::new();
    for s in seeds {
        if index.insert(key(s), states.len()).is_none() {
            states.push(s.clone());
            level.push(0);
        }
    }
    let nl = input_set.len();
    let nu = alphabet.len();
    let mut succ: Vec<Vec<Option<usize>>> = Vec::new();
    let mut y = vec![0.0; model.dim()];
    let mut i = 0;
    while i < states.len() {
        let mut row = Vec::with_capacity(nl * nu);
        for &r in input_set {
            for &u in alphabet.levels() {
                model.step_into(&states[i], r, u, &mut y);
                let id = match index.get(&key(&y)) {
                    Some(&id) => Some(id),
                    None if level[i] < depth => {
                        if states.len() >= state_cap {
                            return Err(Error::CapacityExceeded {
                                what: "point game states".into(),
                                needed: states.len() as u64 + 1,
                                cap: state_cap as u64,
                            });
                        }
                        let id = states.len();
                        index.insert(key(&y), id);
                        states.push(y.clone());
                        level.push(level[i] + 1);
                        Some(id)
                    }
                    None => None,
                };
                row.push(id);
            }
        }
        succ.push(row);
        i += 1;
    }
    let mut builder = GameTableBuilder::new(nl, nu, u64::MAX);
    let mut row = vec![0u32; nl * nu];
    for (i, s) in succ.iter().enumerate() {
        for (slot, id) in s.iter().enumerate() {
            let k = [id.map_or(-1, |v| v as i64)];
            row[slot] = builder.intern_box(&k, |members| match id {
                Some(v) => {
                    members.push(*v as u32);
                    false
                }
                None => true,
            });
        }
        builder.push_state(penalty.eval(model.output(&states[i])), &row)?;
    }
    Ok(PointGame {
        states,
        table: builder.finish()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{value_sweep, PwcValueFunction};
    use crate::grid::InputGrid;

    fn toy() -> (SystemModel, QuantizerAlphabet) {
        (
            SystemModel::from_rows(&[vec![0.5]], &[1.0], &[1.0]).unwrap(),
            QuantizerAlphabet::new(vec![-2.0, 2.0]).unwrap(),
        )
    }

    #[test]
    fn horizon_zero_and_one() {
        let (model, alphabet) = toy();
        let inputs = InputGrid::new(4);
        let sigma = |x: &[f64]| 0.25 - x[0].abs();
        for x0 in [-1.0, -0.25, 0.0, 0.125, 3.0] {
            assert_eq!(vtau_oracle(&model, &alphabet, inputs.values(), sigma, &[x0], 0).unwrap(), 0.0);
            let v1 = vtau_oracle(&model, &alphabet, inputs.values(), sigma, &[x0], 1).unwrap();
            assert_eq!(v1, sigma(&[x0]).max(0.0));
        }
    }

    #[test]
    fn three_step_value_matches_point_sweeps() {
        let (model, alphabet) = toy();
        let inputs = InputGrid::new(4);
        let gamma = 0.25;
        let seeds: Vec<Vec<f64>> = vec![vec![0.0], vec![0.5], vec![-1.25]];
        let pg = point_game(&model, &alphabet, inputs.values(), Penalty::AbsoluteValue, &seeds, 2, 1 << 20).unwrap();
        let mut v = PwcValueFunction::zeros(pg.table.num_states());
        for _ in 0..3 {
            v = value_sweep(&pg.table, &v, gamma);
        }
        for s in &seeds {
            let oracle = vtau_oracle(&model, &alphabet, inputs.values(), |x| gamma - x[0].abs(), s, 3).unwrap();
            let i = pg.index_of(s).unwrap();
            assert!((v.values[i] - oracle).abs() <= 1e-12, "{s:?}: {} vs {oracle}", v.values[i]);
        }
    }

    #[test]
    fn tree_cap_is_reported() {
        let (model, alphabet) = toy();
        let inputs = InputGrid::new(4);
        let game = LinearGame {
            model: &model,
            alphabet: &alphabet,
            inputs: inputs.values(),
            sigma: |_: &[f64]| 1.0,
        };
        assert!(matches!(
            vtau_game(&game, &vec![0.0], 6, 1000),
            Err(Error::CapacityExceeded { .. })
        ));
    }
}
