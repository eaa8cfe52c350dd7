//! Four-layer neural-circuit wiring: sensory → inter → command → motor.
//!
//! Sensory units are the input features; only inter, command and motor units
//! are neurons with state. Neuron indices are laid out as
//! `[inter | command | motor]`. Edges run strictly feed-forward except for a
//! configurable number of recurrent synapses inside the command layer.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Multiply-adds charged per sigmoidal synapse per step: subtract, scale,
/// sigmoid (4), conductance product, reversal product, two accumulations.
pub const SYNAPSE_FLOPS: u64 = 10;
/// Per-neuron cost of the fused update: leak, denominator, numerator, divide.
pub const NEURON_FLOPS: u64 = 6;
/// Per-hidden-unit elementwise cost of an LSTM step: bias adds, three
/// sigmoids, two tanh, and the cell/hidden products.
pub const LSTM_ELEMENTWISE_FLOPS: u64 = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layer {
    Inter,
    Command,
    Motor,
}

/// One directed synapse with polarity `+1` (excitatory) or `-1` (inhibitory).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Synapse {
    pub src: usize,
    pub dst: usize,
    pub polarity: i8,
}

/// Layer sizes and connection budget for [`build_ncp_wiring`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WiringSpec {
    pub sensory_count: usize,
    pub inter_count: usize,
    pub command_count: usize,
    pub motor_count: usize,
    pub sensory_fanout: usize,
    pub inter_fanout: usize,
    pub command_recurrence: usize,
    pub motor_fanin: usize,
    pub polarity_seed: u64,
}

impl WiringSpec {
    /// Experiment default for a given inter-layer size: command = inter / 2,
    /// one motor neuron, fan-outs at a quarter of the target layer.
    pub fn for_experiment(sensory_count: usize, inter_count: usize, seed: u64) -> Self {
        let command_count = (inter_count / 2).max(1);
        Self {
            sensory_count,
            inter_count,
            command_count,
            motor_count: 1,
            sensory_fanout: (inter_count / 4).max(1),
            inter_fanout: (command_count / 4).max(1),
            command_recurrence: command_count,
            motor_fanin: (command_count / 2).max(1),
            polarity_seed: seed,
        }
    }

    pub fn neuron_count(&self) -> usize {
        self.inter_count + self.command_count + self.motor_count
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("sensory_count", self.sensory_count),
            ("inter_count", self.inter_count),
            ("command_count", self.command_count),
            ("motor_count", self.motor_count),
            ("sensory_fanout", self.sensory_fanout),
            ("inter_fanout", self.inter_fanout),
            ("motor_fanin", self.motor_fanin),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("wiring spec: {name} must be positive")));
            }
        }
        let bounded = [
            ("sensory_fanout", self.sensory_fanout, "inter_count", self.inter_count),
            ("inter_fanout", self.inter_fanout, "command_count", self.command_count),
            ("motor_fanin", self.motor_fanin, "command_count", self.command_count),
            (
                "command_recurrence",
                self.command_recurrence,
                "command_count²",
                self.command_count * self.command_count,
            ),
        ];
        for (name, v, layer, size) in bounded {
            if v > size {
                return Err(Error::invalid(format!(
                    "wiring spec: {name} = {v} exceeds {layer} = {size}"
                )));
            }
        }
        Ok(())
    }
}

/// A concrete sparse wiring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Wiring {
    pub spec: WiringSpec,
    pub layer_of: Vec<Layer>,
    /// Neuron → neuron synapses.
    pub edges: Vec<Synapse>,
    /// Sensory (input feature) → neuron synapses; `src` is the feature index.
    pub sensory_edges: Vec<Synapse>,
    /// Edges added to reach otherwise unconnected neurons.
    pub patched_edges: usize,
}

struct Builder {
    rng: ChaCha8Rng,
    seen: BTreeSet<(bool, usize, usize)>,
    edges: Vec<Synapse>,
    sensory_edges: Vec<Synapse>,
}

impl Builder {
    fn connect(&mut self, from_sensory: bool, src: usize, dst: usize) -> bool {
        if !self.seen.insert((from_sensory, src, dst)) {
            return false;
        }
        let polarity = if self.rng.random_bool(0.5) { 1 } else { -1 };
        let out = if from_sensory {
            &mut self.sensory_edges
        } else {
            &mut self.edges
        };
        out.push(Synapse { src, dst, polarity });
        true
    }

    fn pick(&mut self, range: usize, amount: usize) -> Vec<usize> {
        sample(&mut self.rng, range, amount).into_vec()
    }
}

/// Builds the wiring described by `spec`. Deterministic per `polarity_seed`.
pub fn build_ncp_wiring(spec: &WiringSpec) -> Result<Wiring> {
    spec.validate()?;
    let inter0 = 0;
    let command0 = spec.inter_count;
    let motor0 = command0 + spec.command_count;
    let n = spec.neuron_count();

    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(spec.polarity_seed),
        seen: BTreeSet::new(),
        edges: Vec::new(),
        sensory_edges: Vec::new(),
    };
    for s in 0..spec.sensory_count {
        for t in b.pick(spec.inter_count, spec.sensory_fanout) {
            b.connect(true, s, inter0 + t);
        }
    }
    for i in 0..spec.inter_count {
        for t in b.pick(spec.command_count, spec.inter_fanout) {
            b.connect(false, inter0 + i, command0 + t);
        }
    }
    let c = spec.command_count;
    for pair in b.pick(c * c, spec.command_recurrence) {
        b.connect(false, command0 + pair / c, command0 + pair % c);
    }
    for m in 0..spec.motor_count {
        for t in b.pick(spec.command_count, spec.motor_fanin) {
            b.connect(false, command0 + t, motor0 + m);
        }
    }

    // Every neuron needs at least one synapse from its upstream layer.
    let mut patched = 0;
    for dst in inter0..command0 {
        if !b.sensory_edges.iter().any(|e| e.dst == dst) {
            let src = b.rng.random_range(0..spec.sensory_count);
            b.connect(true, src, dst);
            patched += 1;
        }
    }
    for dst in command0..motor0 {
        if !b.edges.iter().any(|e| e.dst == dst && e.src < command0) {
            let src = inter0 + b.rng.random_range(0..spec.inter_count);
            b.connect(false, src, dst);
            patched += 1;
        }
    }

    let mut layer_of = vec![Layer::Inter; spec.inter_count];
    layer_of.extend(std::iter::repeat_n(Layer::Command, spec.command_count));
    layer_of.extend(std::iter::repeat_n(Layer::Motor, spec.motor_count));
    debug_assert_eq!(layer_of.len(), n);

    let wiring = Wiring {
        spec: spec.clone(),
        layer_of,
        edges: b.edges,
        sensory_edges: b.sensory_edges,
        patched_edges: patched,
    };
    debug_assert!(wiring.validate().is_ok());
    Ok(wiring)
}

impl Wiring {
    pub fn neuron_count(&self) -> usize {
        self.layer_of.len()
    }

    pub fn sensory_count(&self) -> usize {
        self.spec.sensory_count
    }

    pub fn motor_neurons(&self) -> impl Iterator<Item = usize> + '_ {
        self.layer_of
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == Layer::Motor)
            .map(|(i, _)| i)
    }

    pub fn synapse_count(&self) -> usize {
        self.edges.len() + self.sensory_edges.len()
    }

    /// Checks the structural invariants of an NCP wiring.
    pub fn validate(&self) -> Result<()> {
        let n = self.neuron_count();
        let bad = |msg: String| Err(Error::invalid(format!("invalid wiring: {msg}")));
        let mut seen = BTreeSet::new();
        for e in &self.edges {
            if e.src >= n || e.dst >= n {
                return bad(format!("edge {}→{} out of range", e.src, e.dst));
            }
            let ok = matches!(
                (self.layer_of[e.src], self.layer_of[e.dst]),
                (Layer::Inter, Layer::Command)
                    | (Layer::Command, Layer::Command)
                    | (Layer::Command, Layer::Motor)
            );
            if !ok {
                return bad(format!(
                    "edge {}→{} ({:?}→{:?}) not allowed",
                    e.src, e.dst, self.layer_of[e.src], self.layer_of[e.dst]
                ));
            }
            if !seen.insert((false, e.src, e.dst)) {
                return bad(format!("duplicate edge {}→{}", e.src, e.dst));
            }
        }
        for e in &self.sensory_edges {
            if e.src >= self.sensory_count() || e.dst >= n || self.layer_of[e.dst] != Layer::Inter {
                return bad(format!("sensory edge {}→{} not allowed", e.src, e.dst));
            }
            if !seen.insert((true, e.src, e.dst)) {
                return bad(format!("duplicate sensory edge {}→{}", e.src, e.dst));
            }
        }
        if let Some(e) = self
            .edges
            .iter()
            .chain(&self.sensory_edges)
            .find(|e| e.polarity != 1 && e.polarity != -1)
        {
            return bad(format!("edge {}→{} has polarity {}", e.src, e.dst, e.polarity));
        }

        // Reachability from sensory units over the whole graph.
        let mut reached = vec![false; n];
        let mut frontier: Vec<usize> = self.sensory_edges.iter().map(|e| e.dst).collect();
        while let Some(v) = frontier.pop() {
            if std::mem::replace(&mut reached[v], true) {
                continue;
            }
            frontier.extend(self.edges.iter().filter(|e| e.src == v).map(|e| e.dst));
        }
        for (i, r) in reached.iter().enumerate() {
            if !r {
                return bad(format!("neuron {i} ({:?}) unreachable from sensory units", self.layer_of[i]));
            }
        }
        Ok(())
    }

    /// Fraction of the fully connected reference that is absent; the reference
    /// counts every sensory→neuron and every neuron→neuron pair.
    pub fn sparsity(&self) -> f64 {
        let n = self.neuron_count();
        let reference = self.sensory_count() * n + n * n;
        if reference == 0 {
            return 1.0;
        }
        1.0 - self.synapse_count() as f64 / reference as f64
    }

    /// Trainable scalars: four per synapse, one time constant per neuron and a
    /// linear readout from the motor neurons to one output.
    pub fn param_count(&self) -> usize {
        let motors = self.motor_neurons().count();
        4 * self.synapse_count() + self.neuron_count() + motors + 1
    }

    pub fn flops_per_step(&self) -> u64 {
        let motors = self.motor_neurons().count() as u64;
        SYNAPSE_FLOPS * self.synapse_count() as u64
            + NEURON_FLOPS * self.neuron_count() as u64
            + 2 * motors
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Parameter count of a single-layer LSTM with a linear readout.
pub fn lstm_param_count(input_dim: usize, hidden: usize, output_dim: usize) -> usize {
    4 * (hidden * (input_dim + hidden) + hidden) + hidden * output_dim + output_dim
}

/// Forward flops of one LSTM step (gate matmuls as 2 flops per MAC) plus readout.
pub fn lstm_flops_per_step(input_dim: usize, hidden: usize, output_dim: usize) -> u64 {
    let (f, h, o) = (input_dim as u64, hidden as u64, output_dim as u64);
    8 * h * (f + h) + LSTM_ELEMENTWISE_FLOPS * h + 2 * h * o
}
