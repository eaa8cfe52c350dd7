//! Liquid time-constant neuron dynamics over a sparse wiring.
//!
//! Each neuron `i` follows
//!
//! ```text
//! dx_i/dt = -(1/tau_i + Σ_j f_ij) x_i + Σ_j f_ij A_ij
//! f_ij    = w_ij · sigmoid(gamma_ij (x_j - mu_ij))
//! ```
//!
//! where `j` ranges over presynaptic neurons and sensory inputs. The update
//! treats the state-dependent decay implicitly:
//!
//! ```text
//! x_i⁺ = (x_i + dt Σ_j f_ij A_ij) / (1 + dt (1/tau_i + Σ_j f_ij))
//! ```
//!
//! Because `f ≥ 0`, the new state is a convex combination of the old state and
//! the reversal potentials, so `|x|` never exceeds `max(|x(0)|, max |A|)`.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{sigmoid, softplus, softplus_inverse, Array, NodeId, Tape};
use crate::error::{Error, Result};
use crate::wiring::{Synapse, Wiring};

/// Per-synapse parameters for one group of edges (recurrent or sensory).
#[derive(Debug, Clone, PartialEq)]
pub struct SynapseParams {
    /// Conductance before the softplus positivity map.
    pub w_raw: Vec<f64>,
    pub gamma: Vec<f64>,
    pub mu: Vec<f64>,
    /// Reversal potential `A`.
    pub reversal: Vec<f64>,
}

impl SynapseParams {
    fn init<R: Rng>(edges: &[Synapse], rng: &mut R) -> Self {
        let mut p = SynapseParams {
            w_raw: Vec::with_capacity(edges.len()),
            gamma: Vec::with_capacity(edges.len()),
            mu: Vec::with_capacity(edges.len()),
            reversal: Vec::with_capacity(edges.len()),
        };
        for e in edges {
            p.w_raw.push(softplus_inverse(rng.random_range(0.01..=1.0)));
            p.gamma.push(rng.random_range(0.5..=1.5));
            p.mu.push(rng.random_range(-0.3..=0.3));
            let mag: f64 = StandardNormal.sample(rng);
            p.reversal.push(f64::from(e.polarity) * mag.abs());
        }
        p
    }

    pub fn len(&self) -> usize {
        self.w_raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w_raw.is_empty()
    }

    pub fn weight(&self, e: usize) -> f64 {
        softplus(self.w_raw[e])
    }
}

/// Learnable parameters of an LTC cell bound to a fixed edge set.
#[derive(Debug, Clone, PartialEq)]
pub struct LtcCellParams {
    neuron_count: usize,
    sensory_count: usize,
    rec_src: Arc<[usize]>,
    rec_dst: Arc<[usize]>,
    in_src: Arc<[usize]>,
    in_dst: Arc<[usize]>,
    /// Time constants before the softplus positivity map.
    pub tau_raw: Vec<f64>,
    pub recurrent: SynapseParams,
    pub input: SynapseParams,
}

/// Hidden state of an LTC cell.
#[derive(Debug, Clone, PartialEq)]
pub struct LtcState {
    pub x: Vec<f64>,
    pub t: f64,
}

impl LtcState {
    pub fn zeros(n: usize) -> Self {
        Self {
            x: vec![0.0; n],
            t: 0.0,
        }
    }
}

/// `w · sigmoid(gamma (pre - mu))`, always in `[0, w]`.
pub fn synapse_activation(pre: f64, w: f64, gamma: f64, mu: f64) -> f64 {
    w * sigmoid(gamma * (pre - mu))
}

fn split(edges: &[Synapse]) -> (Arc<[usize]>, Arc<[usize]>) {
    (
        edges.iter().map(|e| e.src).collect(),
        edges.iter().map(|e| e.dst).collect(),
    )
}

impl LtcCellParams {
    /// Random initialization over `wiring`: tau in [0.5, 2], w in [0.01, 1],
    /// gamma in [0.5, 1.5], mu in [-0.3, 0.3], A = polarity · |N(0, 1)|.
    pub fn init<R: Rng>(wiring: &Wiring, rng: &mut R) -> Self {
        let n = wiring.neuron_count();
        let tau_raw = (0..n)
            .map(|_| softplus_inverse(rng.random_range(0.5..=2.0)))
            .collect();
        let recurrent = SynapseParams::init(&wiring.edges, rng);
        let input = SynapseParams::init(&wiring.sensory_edges, rng);
        Self::from_parts(wiring, tau_raw, recurrent, input).expect("shapes follow the wiring")
    }

    pub fn from_parts(
        wiring: &Wiring,
        tau_raw: Vec<f64>,
        recurrent: SynapseParams,
        input: SynapseParams,
    ) -> Result<Self> {
        let n = wiring.neuron_count();
        let check = |name: &str, got: usize, want: usize| {
            if got != want {
                Err(Error::invalid(format!("{name}: expected {want} values, got {got}")))
            } else {
                Ok(())
            }
        };
        check("tau_raw", tau_raw.len(), n)?;
        for (group, p, want) in [
            ("recurrent", &recurrent, wiring.edges.len()),
            ("input", &input, wiring.sensory_edges.len()),
        ] {
            check(&format!("{group}.w_raw"), p.w_raw.len(), want)?;
            check(&format!("{group}.gamma"), p.gamma.len(), want)?;
            check(&format!("{group}.mu"), p.mu.len(), want)?;
            check(&format!("{group}.reversal"), p.reversal.len(), want)?;
        }
        let (rec_src, rec_dst) = split(&wiring.edges);
        let (in_src, in_dst) = split(&wiring.sensory_edges);
        Ok(Self {
            neuron_count: n,
            sensory_count: wiring.sensory_count(),
            rec_src,
            rec_dst,
            in_src,
            in_dst,
            tau_raw,
            recurrent,
            input,
        })
    }

    pub fn neuron_count(&self) -> usize {
        self.neuron_count
    }

    pub fn sensory_count(&self) -> usize {
        self.sensory_count
    }

    pub fn tau(&self) -> Vec<f64> {
        self.tau_raw.iter().map(|&r| softplus(r)).collect()
    }

    /// Largest reversal magnitude over all synapses; bounds the state.
    pub fn max_abs_reversal(&self) -> f64 {
        self.recurrent
            .reversal
            .iter()
            .chain(&self.input.reversal)
            .fold(0.0, |m, a| m.max(a.abs()))
    }

    /// Per-edge activations `(recurrent, input)` for a given state and input.
    pub fn activations(&self, x: &[f64], input: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let act = |p: &SynapseParams, src: &[usize], pre: &[f64]| -> Vec<f64> {
            (0..p.len())
                .map(|e| synapse_activation(pre[src[e]], p.weight(e), p.gamma[e], p.mu[e]))
                .collect()
        };
        (
            act(&self.recurrent, &self.rec_src, x),
            act(&self.input, &self.in_src, input),
        )
    }

    /// Total synaptic conductance and reversal-weighted drive per neuron.
    fn drive(&self, x: &[f64], input: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (rec, inp) = self.activations(x, input);
        let mut conductance = vec![0.0; self.neuron_count];
        let mut pull = vec![0.0; self.neuron_count];
        for (e, f) in rec.iter().enumerate() {
            let d = self.rec_dst[e];
            conductance[d] += f;
            pull[d] += f * self.recurrent.reversal[e];
        }
        for (e, f) in inp.iter().enumerate() {
            let d = self.in_dst[e];
            conductance[d] += f;
            pull[d] += f * self.input.reversal[e];
        }
        (conductance, pull)
    }

    /// Right-hand side `dx/dt` of the continuous dynamics.
    pub fn derivative(&self, x: &[f64], input: &[f64]) -> Vec<f64> {
        let tau = self.tau();
        let (g, pull) = self.drive(x, input);
        (0..self.neuron_count)
            .map(|i| -(1.0 / tau[i] + g[i]) * x[i] + pull[i])
            .collect()
    }

    fn check_inputs(&self, x: &[f64], input: &[f64]) -> Result<()> {
        if x.len() != self.neuron_count {
            return Err(Error::invalid(format!(
                "state has {} entries, cell has {} neurons",
                x.len(),
                self.neuron_count
            )));
        }
        if input.len() != self.sensory_count {
            return Err(Error::invalid(format!(
                "input has {} features, cell expects {}",
                input.len(),
                self.sensory_count
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("LTC state".into()));
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("LTC input".into()));
        }
        Ok(())
    }
}

/// One fused semi-implicit step of length `dt`.
pub fn ltc_step(state: &LtcState, input: &[f64], params: &LtcCellParams, dt: f64) -> Result<LtcState> {
    if dt <= 0.0 || !dt.is_finite() {
        return Err(Error::invalid(format!("dt must be positive and finite, got {dt}")));
    }
    params.check_inputs(&state.x, input)?;
    let tau = params.tau();
    let (g, pull) = params.drive(&state.x, input);
    let x = (0..params.neuron_count)
        .map(|i| (state.x[i] + dt * pull[i]) / (1.0 + dt * (1.0 / tau[i] + g[i])))
        .collect();
    Ok(LtcState {
        x,
        t: state.t + dt,
    })
}

/// Effective time constant `tau / (1 + tau · Σ f)` of every neuron.
pub fn tau_sys(state: &LtcState, input: &[f64], params: &LtcCellParams) -> Result<Vec<f64>> {
    params.check_inputs(&state.x, input)?;
    let tau = params.tau();
    let (g, _) = params.drive(&state.x, input);
    Ok(tau.iter().zip(&g).map(|(t, gi)| t / (1.0 + t * gi)).collect())
}

/// Tape nodes for one window of LTC steps.
///
/// Recurrent and sensory synapses are fused into a single edge list over the
/// presynaptic vector `[x; input]`.
#[derive(Debug, Clone)]
pub struct LtcNodes {
    neuron_count: usize,
    src: Arc<[usize]>,
    dst: Arc<[usize]>,
    inv_tau: NodeId,
    w: NodeId,
    gamma: NodeId,
    mu: NodeId,
    reversal: NodeId,
}

/// Leaf handles for the nine parameter arrays, in [`LtcCellParams::arrays`] order.
#[derive(Debug, Clone, Copy)]
pub struct LtcLeaves {
    pub tau_raw: NodeId,
    pub rec_w_raw: NodeId,
    pub rec_gamma: NodeId,
    pub rec_mu: NodeId,
    pub rec_reversal: NodeId,
    pub in_w_raw: NodeId,
    pub in_gamma: NodeId,
    pub in_mu: NodeId,
    pub in_reversal: NodeId,
}

impl LtcLeaves {
    pub fn from_slice(ids: &[NodeId]) -> Result<Self> {
        match *ids {
            [tau_raw, rec_w_raw, rec_gamma, rec_mu, rec_reversal, in_w_raw, in_gamma, in_mu, in_reversal] => {
                Ok(Self {
                    tau_raw,
                    rec_w_raw,
                    rec_gamma,
                    rec_mu,
                    rec_reversal,
                    in_w_raw,
                    in_gamma,
                    in_mu,
                    in_reversal,
                })
            }
            _ => Err(Error::invalid(format!("LTC cell needs 9 parameter leaves, got {}", ids.len()))),
        }
    }
}

impl LtcCellParams {
    pub const ARRAY_NAMES: [&'static str; 9] = [
        "tau_raw",
        "recurrent.w_raw",
        "recurrent.gamma",
        "recurrent.mu",
        "recurrent.reversal",
        "input.w_raw",
        "input.gamma",
        "input.mu",
        "input.reversal",
    ];

    pub fn arrays(&self) -> [&[f64]; 9] {
        [
            &self.tau_raw,
            &self.recurrent.w_raw,
            &self.recurrent.gamma,
            &self.recurrent.mu,
            &self.recurrent.reversal,
            &self.input.w_raw,
            &self.input.gamma,
            &self.input.mu,
            &self.input.reversal,
        ]
    }

    pub fn arrays_mut(&mut self) -> [&mut Vec<f64>; 9] {
        [
            &mut self.tau_raw,
            &mut self.recurrent.w_raw,
            &mut self.recurrent.gamma,
            &mut self.recurrent.mu,
            &mut self.recurrent.reversal,
            &mut self.input.w_raw,
            &mut self.input.gamma,
            &mut self.input.mu,
            &mut self.input.reversal,
        ]
    }

    /// Derived per-window nodes (positivity maps, fused edge vectors).
    pub fn bind(&self, tape: &mut Tape, leaves: &LtcLeaves) -> Result<LtcNodes> {
        let n = self.neuron_count;
        let tau = tape.softplus(leaves.tau_raw);
        let ones = tape.constant(Array::full(&[n], 1.0));
        let inv_tau = tape.div(ones, tau)?;
        let w_raw = tape.concat(&[leaves.rec_w_raw, leaves.in_w_raw])?;
        let w = tape.softplus(w_raw);
        let gamma = tape.concat(&[leaves.rec_gamma, leaves.in_gamma])?;
        let mu = tape.concat(&[leaves.rec_mu, leaves.in_mu])?;
        let reversal = tape.concat(&[leaves.rec_reversal, leaves.in_reversal])?;
        let src: Arc<[usize]> = self
            .rec_src
            .iter()
            .copied()
            .chain(self.in_src.iter().map(|&s| n + s))
            .collect();
        let dst: Arc<[usize]> = self.rec_dst.iter().chain(self.in_dst.iter()).copied().collect();
        Ok(LtcNodes {
            neuron_count: n,
            src,
            dst,
            inv_tau,
            w,
            gamma,
            mu,
            reversal,
        })
    }
}

/// Recorded version of [`ltc_step`]; `x` has length N, `input` length F.
pub fn ltc_step_tape(tape: &mut Tape, cell: &LtcNodes, x: NodeId, input: NodeId, dt: f64) -> Result<NodeId> {
    if dt <= 0.0 || !dt.is_finite() {
        return Err(Error::invalid(format!("dt must be positive and finite, got {dt}")));
    }
    let n = cell.neuron_count;
    let pre = tape.concat(&[x, input])?;
    let pre = tape.gather(pre, cell.src.clone())?;
    let centered = tape.sub(pre, cell.mu)?;
    let z = tape.mul(cell.gamma, centered)?;
    let s = tape.sigmoid(z);
    let f = tape.mul(cell.w, s)?;
    let fa = tape.mul(f, cell.reversal)?;
    let conductance = tape.scatter_add(f, cell.dst.clone(), n)?;
    let pull = tape.scatter_add(fa, cell.dst.clone(), n)?;

    let pull = tape.scale(pull, dt);
    let num = tape.add(x, pull)?;
    let decay = tape.add(cell.inv_tau, conductance)?;
    let decay = tape.scale(decay, dt);
    let den = tape.offset(decay, 1.0);
    tape.div(num, den)
}
