//! Recurrent cell and affine layer.
//!
//! Parameters live outside any tape as plain tensors; `bind` registers them
//! on a fresh tape for one forward/backward pass (the tape is rebuilt every
//! step). Parameter names and registration order are fixed because they
//! define the checkpoint layout and the init draw order.

use crate::rng::substream;
use crate::tape::{NodeId, Tape, TapeError};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn init_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape, data)
}

/// Affine layer `x W + b` with `W: (in, out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn init(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            w: init_uniform(vec![input, output], input, rng),
            b: init_uniform(vec![output], input, rng),
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.w"), &self.w));
        out.push((format!("{prefix}.b"), &self.b));
    }

    pub fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.w);
        out.push(&mut self.b);
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundLinear {
        BoundLinear { w: tape.param(self.w.clone()), b: tape.param(self.b.clone()) }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    pub w: NodeId,
    pub b: NodeId,
}

impl BoundLinear {
    pub fn apply(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId, TapeError> {
        let xw = tape.matmul(x, self.w)?;
        tape.add_row_vec(xw, self.b)
    }
}

/// Single-layer gated recurrent cell.
#[derive(Debug, Clone)]
pub struct GruCell {
    pub input_size: usize,
    pub hidden_size: usize,
    pub w_update: Tensor,
    pub u_update: Tensor,
    pub b_update: Tensor,
    pub w_reset: Tensor,
    pub u_reset: Tensor,
    pub b_reset: Tensor,
    pub w_cand: Tensor,
    pub u_cand: Tensor,
    pub b_cand: Tensor,
}

impl GruCell {
    pub fn init(input_size: usize, hidden_size: usize, rng: &mut ChaCha8Rng) -> Self {
        let (d, l) = (input_size, hidden_size);
        GruCell {
            input_size,
            hidden_size,
            w_update: init_uniform(vec![d, l], d, rng),
            u_update: init_uniform(vec![l, l], l, rng),
            b_update: init_uniform(vec![l], l, rng),
            w_reset: init_uniform(vec![d, l], d, rng),
            u_reset: init_uniform(vec![l, l], l, rng),
            b_reset: init_uniform(vec![l], l, rng),
            w_cand: init_uniform(vec![d, l], d, rng),
            u_cand: init_uniform(vec![l, l], l, rng),
            b_cand: init_uniform(vec![l], l, rng),
        }
    }

    /// All-zero parameters, for fixed-point tests.
    pub fn zeros(input_size: usize, hidden_size: usize) -> Self {
        let mut rng = substream(0, crate::rng::Stream::Init, 0);
        let mut cell = Self::init(input_size, hidden_size, &mut rng);
        let mut muts = Vec::new();
        cell.collect_mut(&mut muts);
        for t in muts {
            for x in t.data_mut() {
                *x = 0.0;
            }
        }
        cell
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.w_update"), &self.w_update));
        out.push((format!("{prefix}.u_update"), &self.u_update));
        out.push((format!("{prefix}.b_update"), &self.b_update));
        out.push((format!("{prefix}.w_reset"), &self.w_reset));
        out.push((format!("{prefix}.u_reset"), &self.u_reset));
        out.push((format!("{prefix}.b_reset"), &self.b_reset));
        out.push((format!("{prefix}.w_cand"), &self.w_cand));
        out.push((format!("{prefix}.u_cand"), &self.u_cand));
        out.push((format!("{prefix}.b_cand"), &self.b_cand));
    }

    pub fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.w_update);
        out.push(&mut self.u_update);
        out.push(&mut self.b_update);
        out.push(&mut self.w_reset);
        out.push(&mut self.u_reset);
        out.push(&mut self.b_reset);
        out.push(&mut self.w_cand);
        out.push(&mut self.u_cand);
        out.push(&mut self.b_cand);
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundGru {
        BoundGru {
            hidden_size: self.hidden_size,
            w_update: tape.param(self.w_update.clone()),
            u_update: tape.param(self.u_update.clone()),
            b_update: tape.param(self.b_update.clone()),
            w_reset: tape.param(self.w_reset.clone()),
            u_reset: tape.param(self.u_reset.clone()),
            b_reset: tape.param(self.b_reset.clone()),
            w_cand: tape.param(self.w_cand.clone()),
            u_cand: tape.param(self.u_cand.clone()),
            b_cand: tape.param(self.b_cand.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundGru {
    pub hidden_size: usize,
    w_update: NodeId,
    u_update: NodeId,
    b_update: NodeId,
    w_reset: NodeId,
    u_reset: NodeId,
    b_reset: NodeId,
    w_cand: NodeId,
    u_cand: NodeId,
    b_cand: NodeId,
}

impl BoundGru {
    /// One step: gates from `x (B,D)` and `h (B,L)`, output `(B,L)`.
    ///
    /// `h' = u ⊙ h + (1 - u) ⊙ tanh(x W_c + (r ⊙ h) U_c + b_c)`
    pub fn step(&self, tape: &mut Tape, x: NodeId, h: NodeId) -> Result<NodeId, TapeError> {
        let update = self.gate(tape, x, h, self.w_update, self.u_update, self.b_update)?;
        let reset = self.gate(tape, x, h, self.w_reset, self.u_reset, self.b_reset)?;

        let rh = tape.mul(reset, h)?;
        let xc = tape.matmul(x, self.w_cand)?;
        let hc = tape.matmul(rh, self.u_cand)?;
        let pre = tape.add(xc, hc)?;
        let pre = tape.add_row_vec(pre, self.b_cand)?;
        let cand = tape.tanh(pre)?;

        // u*h + (1-u)*cand == u*(h - cand) + cand
        let diff = tape.sub(h, cand)?;
        let kept = tape.mul(update, diff)?;
        tape.add(kept, cand)
    }

    fn gate(
        &self,
        tape: &mut Tape,
        x: NodeId,
        h: NodeId,
        w: NodeId,
        u: NodeId,
        b: NodeId,
    ) -> Result<NodeId, TapeError> {
        let xw = tape.matmul(x, w)?;
        let hu = tape.matmul(h, u)?;
        let s = tape.add(xw, hu)?;
        let s = tape.add_row_vec(s, b)?;
        tape.sigmoid(s)
    }

    /// Zero initial hidden state for a batch of `rows`.
    pub fn zero_state(&self, tape: &mut Tape, rows: usize) -> NodeId {
        tape.constant(Tensor::matrix(rows, self.hidden_size, vec![0.0; rows * self.hidden_size]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, max_rel_err, FD_STEP, OP_TOLERANCE};
    use crate::rng::Stream;

    #[test]
    fn zero_weights_keep_hidden_at_zero() {
        let cell = GruCell::zeros(3, 4);
        let mut tape = Tape::new();
        let bound = cell.bind(&mut tape);
        let x = tape.constant(Tensor::matrix(2, 3, vec![0.9, -1.0, 2.0, 0.1, 0.0, -0.5]));
        let h = bound.zero_state(&mut tape, 2);
        let h1 = bound.step(&mut tape, x, h).unwrap();
        assert!(tape.value(h1).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn step_is_bit_deterministic() {
        let run = || {
            let mut rng = substream(5, Stream::Init, 0);
            let cell = GruCell::init(3, 5, &mut rng);
            let mut tape = Tape::new();
            let bound = cell.bind(&mut tape);
            let x = tape.constant(Tensor::matrix(1, 3, vec![0.2, -0.4, 0.6]));
            let h = bound.zero_state(&mut tape, 1);
            let h1 = bound.step(&mut tape, x, h).unwrap();
            tape.value(h1).data().to_vec()
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn gru_step_gradients_match_finite_differences() {
        let mut rng = substream(6, Stream::Init, 0);
        let cell = GruCell::init(2, 3, &mut rng);
        let x_data = vec![0.7, -0.3];
        let h_data = vec![0.1, 0.4, -0.2];

        let mut refs: Vec<(String, &Tensor)> = Vec::new();
        cell.collect("gru", &mut refs);
        let flat: Vec<f64> = refs.iter().flat_map(|(_, t)| t.data().to_vec()).collect();

        let eval = |theta: &[f64]| -> f64 {
            let mut c = cell.clone();
            let mut offset = 0;
            let mut muts: Vec<&mut Tensor> = Vec::new();
            c.collect_mut(&mut muts);
            for t in muts {
                let n = t.numel();
                t.data_mut().copy_from_slice(&theta[offset..offset + n]);
                offset += n;
            }
            let mut tape = Tape::new();
            let bound = c.bind(&mut tape);
            let x = tape.constant(Tensor::matrix(1, 2, x_data.clone()));
            let h = tape.constant(Tensor::matrix(1, 3, h_data.clone()));
            let h1 = bound.step(&mut tape, x, h).unwrap();
            let loss = tape.sq_norm(h1).unwrap();
            tape.value(loss).item()
        };

        let numeric = central_diff(eval, &flat, FD_STEP);

        let mut tape = Tape::new();
        let bound = cell.bind(&mut tape);
        let ids = tape.param_ids();
        let x = tape.constant(Tensor::matrix(1, 2, x_data.clone()));
        let h = tape.constant(Tensor::matrix(1, 3, h_data.clone()));
        let h1 = bound.step(&mut tape, x, h).unwrap();
        let loss = tape.sq_norm(h1).unwrap();
        let grads = tape.backward(loss).unwrap();
        let analytic: Vec<f64> = ids
            .iter()
            .flat_map(|id| grads.get_or_zeros(*id, tape.value(*id).shape()).into_data())
            .collect();

        let err = max_rel_err(&analytic, &numeric);
        assert!(err < OP_TOLERANCE, "max rel err {err}");
    }
}
