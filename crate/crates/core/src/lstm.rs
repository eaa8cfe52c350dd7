//! Single-layer LSTM cell, the comparison model.
//!
//! Gates are stacked in the order input, forget, cell candidate, output:
//! rows `[0, h)` of `w`, `u` and `b` belong to the input gate, `[h, 2h)` to
//! the forget gate, and so on.

use rand::Rng;

use crate::autodiff::{sigmoid, Array, NodeId, Tape};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// `[4h, input_dim]`, row-major.
    pub w: Vec<f64>,
    /// `[4h, h]`, row-major.
    pub u: Vec<f64>,
    /// `[4h]`.
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }
}

impl LstmParams {
    pub const ARRAY_NAMES: [&'static str; 3] = ["w", "u", "b"];

    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim,
            w: vec![0.0; 4 * hidden_dim * input_dim],
            u: vec![0.0; 4 * hidden_dim * hidden_dim],
            b: vec![0.0; 4 * hidden_dim],
        }
    }

    /// Glorot-uniform gate matrices, zero biases except forget-gate bias 1.
    pub fn init<R: Rng>(input_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        let h = hidden_dim;
        let lim_w = (6.0 / (input_dim + h) as f64).sqrt();
        let lim_u = (6.0 / (2 * h) as f64).sqrt();
        let mut p = Self::zeros(input_dim, h);
        p.w.iter_mut().for_each(|v| *v = rng.random_range(-lim_w..=lim_w));
        p.u.iter_mut().for_each(|v| *v = rng.random_range(-lim_u..=lim_u));
        p.b[h..2 * h].iter_mut().for_each(|v| *v = 1.0);
        p
    }

    pub fn from_arrays(input_dim: usize, hidden_dim: usize, w: Vec<f64>, u: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        let h = hidden_dim;
        for (name, got, want) in [
            ("w", w.len(), 4 * h * input_dim),
            ("u", u.len(), 4 * h * h),
            ("b", b.len(), 4 * h),
        ] {
            if got != want {
                return Err(Error::invalid(format!("lstm {name}: expected {want} values, got {got}")));
            }
        }
        Ok(Self {
            input_dim,
            hidden_dim,
            w,
            u,
            b,
        })
    }

    pub fn arrays(&self) -> [&[f64]; 3] {
        [&self.w, &self.u, &self.b]
    }

    pub fn arrays_mut(&mut self) -> [&mut Vec<f64>; 3] {
        [&mut self.w, &mut self.u, &mut self.b]
    }

    pub fn shapes(&self) -> [Vec<usize>; 3] {
        let h4 = 4 * self.hidden_dim;
        [vec![h4, self.input_dim], vec![h4, self.hidden_dim], vec![h4]]
    }
}

/// One canonical LSTM update.
pub fn lstm_step(state: &LstmState, input: &[f64], params: &LstmParams) -> Result<LstmState> {
    let (h, f) = (params.hidden_dim, params.input_dim);
    if input.len() != f {
        return Err(Error::invalid(format!("input has {} features, lstm expects {f}", input.len())));
    }
    if state.h.len() != h || state.c.len() != h {
        return Err(Error::invalid("lstm state size does not match hidden_dim"));
    }
    if input.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("LSTM input".into()));
    }
    let mut pre = params.b.clone();
    for (r, p) in pre.iter_mut().enumerate() {
        let wr = &params.w[r * f..(r + 1) * f];
        let ur = &params.u[r * h..(r + 1) * h];
        *p += wr.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
        *p += ur.iter().zip(&state.h).map(|(a, b)| a * b).sum::<f64>();
    }
    let mut next = LstmState::zeros(h);
    for j in 0..h {
        let i_g = sigmoid(pre[j]);
        let f_g = sigmoid(pre[h + j]);
        let g_g = pre[2 * h + j].tanh();
        let o_g = sigmoid(pre[3 * h + j]);
        next.c[j] = f_g * state.c[j] + i_g * g_g;
        next.h[j] = o_g * next.c[j].tanh();
    }
    Ok(next)
}

/// Leaf handles for `w`, `u`, `b`.
#[derive(Debug, Clone, Copy)]
pub struct LstmLeaves {
    pub w: NodeId,
    pub u: NodeId,
    pub b: NodeId,
}

/// Recorded version of [`lstm_step`]; returns `(h, c)`.
pub fn lstm_step_tape(
    tape: &mut Tape,
    leaves: &LstmLeaves,
    hidden: usize,
    h: NodeId,
    c: NodeId,
    input: NodeId,
) -> Result<(NodeId, NodeId)> {
    let wx = tape.matmul(leaves.w, input)?;
    let uh = tape.matmul(leaves.u, h)?;
    let pre = tape.add(wx, uh)?;
    let pre = tape.add(pre, leaves.b)?;
    let gate = |tape: &mut Tape, k: usize| tape.slice(pre, k * hidden, hidden);
    let i_pre = gate(tape, 0)?;
    let f_pre = gate(tape, 1)?;
    let g_pre = gate(tape, 2)?;
    let o_pre = gate(tape, 3)?;
    let i_g = tape.sigmoid(i_pre);
    let f_g = tape.sigmoid(f_pre);
    let g_g = tape.tanh(g_pre);
    let o_g = tape.sigmoid(o_pre);
    let keep = tape.mul(f_g, c)?;
    let write = tape.mul(i_g, g_g)?;
    let c_next = tape.add(keep, write)?;
    let squashed = tape.tanh(c_next);
    let h_next = tape.mul(o_g, squashed)?;
    Ok((h_next, c_next))
}

impl LstmParams {
    pub fn leaves(&self, tape: &mut Tape) -> Result<LstmLeaves> {
        let [sw, su, sb] = self.shapes();
        Ok(LstmLeaves {
            w: tape.param(Array::new(sw, self.w.clone())?),
            u: tape.param(Array::new(su, self.u.clone())?),
            b: tape.param(Array::new(sb, self.b.clone())?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_params_fixed_point() {
        let p = LstmParams::zeros(3, 2);
        let s = lstm_step(&LstmState::zeros(2), &[1.0, -2.0, 0.5], &p).unwrap();
        assert_eq!(s, LstmState::zeros(2));
    }

    #[test]
    fn zero_params_halve_the_cell() {
        let p = LstmParams::zeros(1, 1);
        let s = lstm_step(&LstmState { h: vec![0.0], c: vec![2.0] }, &[0.0], &p).unwrap();
        assert_eq!(s.c[0], 1.0);
        assert!((s.h[0] - 0.5 * 1f64.tanh()).abs() < 1e-15);
        assert!((s.h[0] - 0.3807970779778823).abs() < 1e-12);
    }

    #[test]
    fn saturated_forget_gate_conserves_cell() {
        let mut p = LstmParams::init(2, 3, &mut ChaCha8Rng::seed_from_u64(4));
        let h = 3;
        p.w.iter_mut().for_each(|v| *v = 0.0);
        p.u.iter_mut().for_each(|v| *v = 0.0);
        p.b[..h].iter_mut().for_each(|v| *v = -1e4);
        p.b[h..2 * h].iter_mut().for_each(|v| *v = 1e4);
        let mut s = LstmState { h: vec![0.0; 3], c: vec![0.7, -1.3, 2.5] };
        for _ in 0..100 {
            s = lstm_step(&s, &[5.0, -5.0], &p).unwrap();
        }
        assert_eq!(s.c, vec![0.7, -1.3, 2.5]);
    }

    #[test]
    fn forget_bias_is_one_at_init() {
        let p = LstmParams::init(4, 5, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(p.b[..5].iter().all(|&b| b == 0.0));
        assert!(p.b[5..10].iter().all(|&b| b == 1.0));
        assert!(p.b[10..].iter().all(|&b| b == 0.0));
        let lim = (6.0f64 / 9.0).sqrt();
        assert!(p.w.iter().all(|v| v.abs() <= lim));
    }

    #[test]
    fn tape_step_matches_plain_step() {
        let p = LstmParams::init(3, 4, &mut ChaCha8Rng::seed_from_u64(2));
        let mut tape = Tape::new();
        let leaves = p.leaves(&mut tape).unwrap();
        let mut plain = LstmState::zeros(4);
        let mut h = tape.constant(Array::vector(plain.h.clone()));
        let mut c = tape.constant(Array::vector(plain.c.clone()));
        for k in 0..4 {
            let input = vec![k as f64, -0.5, 1.5];
            let i = tape.constant(Array::vector(input.clone()));
            (h, c) = lstm_step_tape(&mut tape, &leaves, 4, h, c, i).unwrap();
            plain = lstm_step(&plain, &input, &p).unwrap();
        }
        for (a, b) in tape.value(h).data().iter().zip(&plain.h) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in tape.value(c).data().iter().zip(&plain.c) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
