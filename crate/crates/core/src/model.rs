//! Trainable sequence models: an LTC cell on an NCP wiring, or an LSTM, each
//! followed by a linear readout to one output.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, NodeId, Tape};
use crate::error::{Error, Result};
use crate::lstm::{lstm_step, lstm_step_tape, LstmLeaves, LstmParams, LstmState};
use crate::ltc::{ltc_step, ltc_step_tape, LtcCellParams, LtcLeaves, LtcState, SynapseParams};
use crate::wiring::{build_ncp_wiring, Wiring, WiringSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Ncp,
    Lstm,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Ncp => "ncp",
            ModelKind::Lstm => "lstm",
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ncp" | "ltc" => Ok(ModelKind::Ncp),
            "lstm" => Ok(ModelKind::Lstm),
            other => Err(Error::invalid(format!("unknown model kind `{other}` (expected ncp or lstm)"))),
        }
    }
}

/// Linear map from the cell's output units to a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Readout {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Readout {
    fn init<R: Rng>(inputs: usize, rng: &mut R) -> Self {
        let lim = (6.0 / (inputs + 1) as f64).sqrt();
        Self {
            weight: (0..inputs).map(|_| rng.random_range(-lim..=lim)).collect(),
            bias: vec![0.0],
        }
    }

    fn apply(&self, units: &[f64]) -> f64 {
        self.bias[0] + self.weight.iter().zip(units).map(|(w, u)| w * u).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NcpModel {
    pub wiring: Wiring,
    pub cell: LtcCellParams,
    pub readout: Readout,
    pub dt: f64,
    motors: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmModel {
    pub cell: LstmParams,
    pub readout: Readout,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Ncp(NcpModel),
    Lstm(LstmModel),
}

/// Tape handles produced by [`Model::forward_window`].
#[derive(Debug, Clone)]
pub struct WindowGraph {
    /// One leaf per parameter array, in [`Model::param_names`] order.
    pub leaves: Vec<NodeId>,
    /// One scalar prediction per input step.
    pub predictions: Vec<NodeId>,
    /// Final recurrent state, flattened as in [`Model::initial_state`].
    pub state: Vec<NodeId>,
}

impl NcpModel {
    pub fn new(wiring: Wiring, seed: u64, dt: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cell = LtcCellParams::init(&wiring, &mut rng);
        let motors: Vec<usize> = wiring.motor_neurons().collect();
        let readout = Readout::init(motors.len(), &mut rng);
        Self {
            wiring,
            cell,
            readout,
            dt,
            motors,
        }
    }

    fn from_arrays(wiring: Wiring, dt: f64, arrays: Vec<Vec<f64>>) -> Result<Self> {
        let [tau, rw, rg, rm, ra, iw, ig, im, ia, weight, bias]: [Vec<f64>; 11] = arrays
            .try_into()
            .map_err(|a: Vec<Vec<f64>>| Error::invalid(format!("ncp checkpoint needs 11 arrays, got {}", a.len())))?;
        let cell = LtcCellParams::from_parts(
            &wiring,
            tau,
            SynapseParams { w_raw: rw, gamma: rg, mu: rm, reversal: ra },
            SynapseParams { w_raw: iw, gamma: ig, mu: im, reversal: ia },
        )?;
        let motors: Vec<usize> = wiring.motor_neurons().collect();
        if weight.len() != motors.len() || bias.len() != 1 {
            return Err(Error::invalid("ncp readout shape does not match the wiring"));
        }
        Ok(Self {
            wiring,
            cell,
            readout: Readout { weight, bias },
            dt,
            motors,
        })
    }
}

impl Model {
    /// Fresh model with the experiment defaults for `neurons` (inter-layer
    /// size for NCP, hidden size for LSTM).
    pub fn new(kind: ModelKind, input_dim: usize, neurons: usize, seed: u64, dt: f64) -> Result<Self> {
        if input_dim == 0 || neurons == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        match kind {
            ModelKind::Ncp => {
                let wiring = build_ncp_wiring(&WiringSpec::for_experiment(input_dim, neurons, seed))?;
                Ok(Model::Ncp(NcpModel::new(wiring, seed, dt)))
            }
            ModelKind::Lstm => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let cell = LstmParams::init(input_dim, neurons, &mut rng);
                let readout = Readout::init(neurons, &mut rng);
                Ok(Model::Lstm(LstmModel { cell, readout }))
            }
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Ncp(_) => ModelKind::Ncp,
            Model::Lstm(_) => ModelKind::Lstm,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Model::Ncp(m) => m.wiring.sensory_count(),
            Model::Lstm(m) => m.cell.input_dim,
        }
    }

    /// Inter-layer size (NCP) or hidden size (LSTM).
    pub fn neurons(&self) -> usize {
        match self {
            Model::Ncp(m) => m.wiring.spec.inter_count,
            Model::Lstm(m) => m.cell.hidden_dim,
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let (prefix, cell): (&str, &[&str]) = match self {
            Model::Ncp(_) => ("cell", &LtcCellParams::ARRAY_NAMES),
            Model::Lstm(_) => ("cell", &LstmParams::ARRAY_NAMES),
        };
        cell.iter()
            .map(|n| format!("{prefix}.{n}"))
            .chain(["readout.weight".to_string(), "readout.bias".to_string()])
            .collect()
    }

    pub fn param_arrays(&self) -> Vec<&[f64]> {
        let (mut out, readout): (Vec<&[f64]>, _) = match self {
            Model::Ncp(m) => (m.cell.arrays().to_vec(), &m.readout),
            Model::Lstm(m) => (m.cell.arrays().to_vec(), &m.readout),
        };
        out.push(&readout.weight);
        out.push(&readout.bias);
        out
    }

    pub fn param_arrays_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let (mut out, readout): (Vec<&mut Vec<f64>>, _) = match self {
            Model::Ncp(m) => (m.cell.arrays_mut().into_iter().collect(), &mut m.readout),
            Model::Lstm(m) => (m.cell.arrays_mut().into_iter().collect(), &mut m.readout),
        };
        out.push(&mut readout.weight);
        out.push(&mut readout.bias);
        out
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        match self {
            Model::Lstm(m) => {
                let mut s = m.cell.shapes().to_vec();
                s.push(vec![m.readout.weight.len()]);
                s.push(vec![1]);
                s
            }
            Model::Ncp(_) => self.param_arrays().iter().map(|a| vec![a.len()]).collect(),
        }
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.param_arrays().iter().map(|a| a.len()).sum()
    }

    pub fn flops_per_step(&self) -> u64 {
        match self {
            Model::Ncp(m) => m.wiring.flops_per_step(),
            Model::Lstm(m) => crate::wiring::lstm_flops_per_step(m.cell.input_dim, m.cell.hidden_dim, 1),
        }
    }

    pub fn wiring(&self) -> Option<&Wiring> {
        match self {
            Model::Ncp(m) => Some(&m.wiring),
            Model::Lstm(_) => None,
        }
    }

    /// Zero recurrent state: `x` for NCP, `[h; c]` for LSTM.
    pub fn initial_state(&self) -> Vec<f64> {
        match self {
            Model::Ncp(m) => vec![0.0; m.cell.neuron_count()],
            Model::Lstm(m) => vec![0.0; 2 * m.cell.hidden_dim],
        }
    }

    /// Advances one step without recording; returns the prediction.
    pub fn step(&self, state: &mut Vec<f64>, input: &[f64]) -> Result<f64> {
        match self {
            Model::Ncp(m) => {
                let s = ltc_step(&LtcState { x: std::mem::take(state), t: 0.0 }, input, &m.cell, m.dt)?;
                *state = s.x;
                let units: Vec<f64> = m.motors.iter().map(|&i| state[i]).collect();
                Ok(m.readout.apply(&units))
            }
            Model::Lstm(m) => {
                let h = m.cell.hidden_dim;
                let s = LstmState {
                    h: state[..h].to_vec(),
                    c: state[h..].to_vec(),
                };
                let next = lstm_step(&s, input, &m.cell)?;
                state[..h].copy_from_slice(&next.h);
                state[h..].copy_from_slice(&next.c);
                Ok(m.readout.apply(&next.h))
            }
        }
    }

    /// Predictions for every row, starting from the zero state.
    pub fn predict<'a>(&self, rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Vec<f64>> {
        let mut state = self.initial_state();
        rows.into_iter().map(|r| self.step(&mut state, r)).collect()
    }

    /// Records a window of steps from `state` on `tape`.
    pub fn forward_window(&self, tape: &mut Tape, state: &[f64], inputs: &[&[f64]]) -> Result<WindowGraph> {
        let leaves: Vec<NodeId> = self
            .param_arrays()
            .iter()
            .zip(self.param_shapes())
            .map(|(a, shape)| Array::new(shape, a.to_vec()).map(|arr| tape.param(arr)))
            .collect::<Result<_>>()?;
        let (weight, bias) = (leaves[leaves.len() - 2], leaves[leaves.len() - 1]);
        let mut predictions = Vec::with_capacity(inputs.len());
        let readout = |tape: &mut Tape, units: NodeId| -> Result<NodeId> {
            let y = tape.mul(weight, units)?;
            let y = tape.sum(y);
            let y = tape.concat(&[y])?;
            tape.add(y, bias)
        };
        let state_nodes = match self {
            Model::Ncp(m) => {
                let cell = m.cell.bind(tape, &LtcLeaves::from_slice(&leaves[..9])?)?;
                let mut x = tape.constant(Array::vector(state.to_vec()));
                let motor_index: std::sync::Arc<[usize]> = m.motors.iter().copied().collect();
                for input in inputs {
                    let i = tape.constant(Array::vector(input.to_vec()));
                    x = ltc_step_tape(tape, &cell, x, i, m.dt)?;
                    let units = tape.gather(x, motor_index.clone())?;
                    predictions.push(readout(tape, units)?);
                }
                vec![x]
            }
            Model::Lstm(m) => {
                let hd = m.cell.hidden_dim;
                let cell = LstmLeaves {
                    w: leaves[0],
                    u: leaves[1],
                    b: leaves[2],
                };
                let mut h = tape.constant(Array::vector(state[..hd].to_vec()));
                let mut c = tape.constant(Array::vector(state[hd..].to_vec()));
                for input in inputs {
                    let i = tape.constant(Array::vector(input.to_vec()));
                    (h, c) = lstm_step_tape(tape, &cell, hd, h, c, i)?;
                    predictions.push(readout(tape, h)?);
                }
                vec![h, c]
            }
        };
        Ok(WindowGraph {
            leaves,
            predictions,
            state: state_nodes,
        })
    }
}

/// One parameter array in a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub const CHECKPOINT_FORMAT: &str = "ncpwatt-checkpoint";

/// Flat container of named parameter arrays plus the identity of the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub kind: ModelKind,
    pub input_dim: usize,
    pub neurons: usize,
    pub dt: f64,
    pub cfg_hash: String,
    pub seed: u64,
    pub epochs_trained: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wiring: Option<Wiring>,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, cfg_hash: &str, seed: u64, epochs_trained: usize) -> Self {
        let arrays = model
            .param_names()
            .into_iter()
            .zip(model.param_arrays())
            .zip(model.param_shapes())
            .map(|((name, data), shape)| NamedArray {
                name,
                shape,
                data: data.to_vec(),
            })
            .collect();
        let dt = match model {
            Model::Ncp(m) => m.dt,
            Model::Lstm(_) => 1.0,
        };
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: 1,
            kind: model.kind(),
            input_dim: model.input_dim(),
            neurons: model.neurons(),
            dt,
            cfg_hash: cfg_hash.into(),
            seed,
            epochs_trained,
            wiring: model.wiring().cloned(),
            arrays,
        }
    }

    pub fn to_model(&self) -> Result<Model> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::data(format!("not a checkpoint (format `{}`)", self.format)));
        }
        let arrays: Vec<Vec<f64>> = self.arrays.iter().map(|a| a.data.clone()).collect();
        match self.kind {
            ModelKind::Ncp => {
                let wiring = self
                    .wiring
                    .clone()
                    .ok_or_else(|| Error::data("ncp checkpoint without wiring"))?;
                wiring.validate()?;
                Ok(Model::Ncp(NcpModel::from_arrays(wiring, self.dt, arrays)?))
            }
            ModelKind::Lstm => {
                let [w, u, b, weight, bias]: [Vec<f64>; 5] = arrays
                    .try_into()
                    .map_err(|_| Error::data("lstm checkpoint needs 5 arrays"))?;
                let cell = LstmParams::from_arrays(self.input_dim, self.neurons, w, u, b)?;
                if weight.len() != self.neurons || bias.len() != 1 {
                    return Err(Error::data("lstm readout shape mismatch"));
                }
                Ok(Model::Lstm(LstmModel {
                    cell,
                    readout: Readout { weight, bias },
                }))
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        crate::io::read_json(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_count_matches_formulas() {
        let ncp = Model::new(ModelKind::Ncp, 6, 16, 3, 1.0).unwrap();
        assert_eq!(ncp.param_count(), ncp.wiring().unwrap().param_count());
        let lstm = Model::new(ModelKind::Lstm, 6, 16, 3, 1.0).unwrap();
        assert_eq!(lstm.param_count(), crate::wiring::lstm_param_count(6, 16, 1));
        assert_eq!(ncp.param_names().len(), ncp.param_arrays().len());
    }

    #[test]
    fn window_predictions_match_plain_predictions() {
        for kind in [ModelKind::Ncp, ModelKind::Lstm] {
            let m = Model::new(kind, 3, 8, 11, 1.0).unwrap();
            let rows: Vec<Vec<f64>> = (0..7).map(|t| vec![t as f64 * 0.1, -0.4, 1.0]).collect();
            let plain = m.predict(rows.iter().map(|r| r.as_slice())).unwrap();
            let mut tape = Tape::new();
            let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
            let g = m.forward_window(&mut tape, &m.initial_state(), &refs).unwrap();
            for (p, id) in plain.iter().zip(&g.predictions) {
                assert!((p - tape.value(*id).item().unwrap()).abs() < 1e-12, "{kind}");
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        for kind in [ModelKind::Ncp, ModelKind::Lstm] {
            let m = Model::new(kind, 4, 8, 5, 1.0).unwrap();
            let ck = Checkpoint::from_model(&m, "abc", 5, 0);
            let json = serde_json::to_string(&ck).unwrap();
            let back: Checkpoint = serde_json::from_str(&json).unwrap();
            assert_eq!(back.to_model().unwrap(), m);
        }
    }
}
