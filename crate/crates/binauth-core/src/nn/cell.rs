//! Recurrent cells and affine layers, with sequence-level forward/backward.
//!
//! The sequence variants process a whole truncation window at once so the
//! input projections and decoder products run as batched matrix products.
//! Hidden state always starts at zero: state never crosses a chunk boundary,
//! which is also what keeps backpropagation truncated.

use serde::{Deserialize, Serialize};

use super::tensor::{axpy, sigmoid, Tensor2};
use super::NnError;

/// LSTM weights; the four gate blocks are stacked as [input, forget,
/// candidate, output] along the rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub w_ih: Tensor2,  // (4*hidden, input)
    pub w_hh: Tensor2,  // (4*hidden, hidden)
    pub bias: Vec<f64>, // 4*hidden
}

impl LstmParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            w_ih: Tensor2::zeros(4 * hidden_dim, input_dim),
            w_hh: Tensor2::zeros(4 * hidden_dim, hidden_dim),
            bias: vec![0.0; 4 * hidden_dim],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_ih.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_hh.cols()
    }
}

/// One LSTM cell update: gates i,f,o are sigmoid, the candidate is tanh,
/// `c = f∘c_prev + i∘cand`, `h = o∘tanh(c)`.
pub fn lstm_step(
    params: &LstmParams,
    h_prev: &[f64],
    c_prev: &[f64],
    x: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), NnError> {
    let d_h = params.hidden_dim();
    if x.len() != params.input_dim() {
        return Err(NnError::ShapeMismatch {
            context: "lstm_step input",
            expected: params.input_dim(),
            got: x.len(),
        });
    }
    if h_prev.len() != d_h || c_prev.len() != d_h {
        return Err(NnError::ShapeMismatch {
            context: "lstm_step state",
            expected: d_h,
            got: h_prev.len().max(c_prev.len()),
        });
    }
    let mut z = params.bias.clone();
    params.w_ih.matvec_acc(x, &mut z);
    params.w_hh.matvec_acc(h_prev, &mut z);
    let mut h = vec![0.0; d_h];
    let mut c = vec![0.0; d_h];
    activate_lstm(&mut z, c_prev, &mut c, &mut h);
    debug_assert!(h.iter().chain(&c).all(|v| v.is_finite()));
    Ok((h, c))
}

/// Turns raw gate pre-activations `z` into (activated gates in `z`, new cell
/// state, new hidden state).
#[inline]
fn activate_lstm(z: &mut [f64], c_prev: &[f64], c_out: &mut [f64], h_out: &mut [f64]) {
    let d_h = c_out.len();
    let (zi, rest) = z.split_at_mut(d_h);
    let (zf, rest) = rest.split_at_mut(d_h);
    let (zg, zo) = rest.split_at_mut(d_h);
    for k in 0..d_h {
        let i = sigmoid(zi[k]);
        let f = sigmoid(zf[k]);
        let g = zg[k].tanh();
        let o = sigmoid(zo[k]);
        let c = f * c_prev[k] + i * g;
        zi[k] = i;
        zf[k] = f;
        zg[k] = g;
        zo[k] = o;
        c_out[k] = c;
        h_out[k] = o * c.tanh();
    }
}

/// Per-chunk activations kept for the backward pass.
pub struct LstmSeqCache {
    pub gates: Tensor2,  // (len, 4*hidden), activated
    pub cells: Tensor2,  // (len, hidden)
    pub hidden: Tensor2, // (len, hidden)
}

/// Runs the cell over all rows of `xs` from a zero initial state.
pub fn lstm_forward_seq(params: &LstmParams, xs: &Tensor2) -> LstmSeqCache {
    let len = xs.rows();
    let d_h = params.hidden_dim();
    let mut cache = LstmSeqCache {
        gates: Tensor2::zeros(len, 4 * d_h),
        cells: Tensor2::zeros(len, d_h),
        hidden: Tensor2::zeros(len, d_h),
    };
    // Input contributions for every step in one batched product.
    params.w_ih.matmul_nt(xs, &mut cache.gates);

    let mut c_prev = vec![0.0; d_h];
    let mut h_prev = vec![0.0; d_h];
    for t in 0..len {
        let z = cache.gates.row_mut(t);
        for (zk, bk) in z.iter_mut().zip(&params.bias) {
            *zk += bk;
        }
        params.w_hh.matvec_acc(&h_prev, z);
        let mut c = vec![0.0; d_h];
        let mut h = vec![0.0; d_h];
        activate_lstm(z, &c_prev, &mut c, &mut h);
        cache.cells.row_mut(t).copy_from_slice(&c);
        cache.hidden.row_mut(t).copy_from_slice(&h);
        c_prev = c;
        h_prev = h;
    }
    cache
}

#[derive(Debug, Clone)]
pub struct LstmGrads {
    pub w_ih: Tensor2,
    pub w_hh: Tensor2,
    pub bias: Vec<f64>,
}

impl LstmGrads {
    pub fn zeros(params: &LstmParams) -> Self {
        Self {
            w_ih: Tensor2::zeros(params.w_ih.rows(), params.w_ih.cols()),
            w_hh: Tensor2::zeros(params.w_hh.rows(), params.w_hh.cols()),
            bias: vec![0.0; params.bias.len()],
        }
    }

    pub fn reset(&mut self) {
        self.w_ih.fill(0.0);
        self.w_hh.fill(0.0);
        self.bias.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.w_ih.add_assign(&other.w_ih);
        self.w_hh.add_assign(&other.w_hh);
        axpy(1.0, &other.bias, &mut self.bias);
    }
}

/// Reverse pass over one chunk. `dh` carries the upstream gradient on every
/// hidden state; parameter gradients accumulate into `grads` and input
/// gradients into `dxs`.
pub fn lstm_backward_seq(
    params: &LstmParams,
    xs: &Tensor2,
    cache: &LstmSeqCache,
    dh: &Tensor2,
    grads: &mut LstmGrads,
    dxs: &mut Tensor2,
) {
    let len = xs.rows();
    let d_h = params.hidden_dim();
    let mut dh_carry = vec![0.0; d_h];
    let mut dc_carry = vec![0.0; d_h];
    // Gate pre-activation gradients for the whole chunk; parameter gradients
    // are then accumulated in batched passes below.
    let mut dz_all = Tensor2::zeros(len, 4 * d_h);
    for t in (0..len).rev() {
        let gates = cache.gates.row(t);
        let (gi, rest) = gates.split_at(d_h);
        let (gf, rest) = rest.split_at(d_h);
        let (gg, go) = rest.split_at(d_h);
        let c = cache.cells.row(t);

        let dz = dz_all.row_mut(t);
        {
            let (dzi, rest) = dz.split_at_mut(d_h);
            let (dzf, rest) = rest.split_at_mut(d_h);
            let (dzg, dzo) = rest.split_at_mut(d_h);
            for k in 0..d_h {
                let dht = dh.row(t)[k] + dh_carry[k];
                let tc = c[k].tanh();
                let dc = dc_carry[k] + dht * go[k] * (1.0 - tc * tc);
                let c_prev = if t > 0 { cache.cells.row(t - 1)[k] } else { 0.0 };
                dzo[k] = dht * tc * go[k] * (1.0 - go[k]);
                dzi[k] = dc * gg[k] * gi[k] * (1.0 - gi[k]);
                dzf[k] = dc * c_prev * gf[k] * (1.0 - gf[k]);
                dzg[k] = dc * gi[k] * (1.0 - gg[k] * gg[k]);
                dc_carry[k] = dc * gf[k];
            }
        }
        dh_carry.iter_mut().for_each(|v| *v = 0.0);
        params.w_hh.matvec_t_acc(dz_all.row(t), &mut dh_carry);
    }

    super::tensor::acc_t_ab(&dz_all, xs, &mut grads.w_ih);
    let mut h_prev = Tensor2::zeros(len, d_h);
    for t in 1..len {
        h_prev.row_mut(t).copy_from_slice(cache.hidden.row(t - 1));
    }
    super::tensor::acc_t_ab(&dz_all, &h_prev, &mut grads.w_hh);
    for t in 0..len {
        axpy(1.0, dz_all.row(t), &mut grads.bias);
    }
    super::tensor::acc_ab(&dz_all, &params.w_ih, dxs);
}

/// Plain tanh recurrence, kept behind the same step/sequence interface as the
/// LSTM for architecture comparisons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RnnParams {
    pub w_ih: Tensor2,  // (hidden, input)
    pub w_hh: Tensor2,  // (hidden, hidden)
    pub bias: Vec<f64>, // hidden
}

impl RnnParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            w_ih: Tensor2::zeros(hidden_dim, input_dim),
            w_hh: Tensor2::zeros(hidden_dim, hidden_dim),
            bias: vec![0.0; hidden_dim],
        }
    }
}

/// `h = tanh(W_ih·x + W_hh·h_prev + b)`.
pub fn rnn_step(params: &RnnParams, h_prev: &[f64], x: &[f64]) -> Result<Vec<f64>, NnError> {
    if x.len() != params.w_ih.cols() {
        return Err(NnError::ShapeMismatch {
            context: "rnn_step input",
            expected: params.w_ih.cols(),
            got: x.len(),
        });
    }
    if h_prev.len() != params.w_hh.cols() {
        return Err(NnError::ShapeMismatch {
            context: "rnn_step state",
            expected: params.w_hh.cols(),
            got: h_prev.len(),
        });
    }
    let mut z = params.bias.clone();
    params.w_ih.matvec_acc(x, &mut z);
    params.w_hh.matvec_acc(h_prev, &mut z);
    z.iter_mut().for_each(|v| *v = v.tanh());
    Ok(z)
}

/// Affine map `y = W·x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub w: Tensor2,
    pub b: Vec<f64>,
}

impl Affine {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self { w: Tensor2::zeros(out_dim, in_dim), b: vec![0.0; out_dim] }
    }

    pub fn in_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn forward(&self, x: &[f64], y: &mut [f64]) {
        y.copy_from_slice(&self.b);
        self.w.matvec_acc(x, y);
    }

    /// Batched forward over the rows of `xs`.
    pub fn forward_batch(&self, xs: &Tensor2, ys: &mut Tensor2) {
        self.w.matmul_nt(xs, ys);
        for t in 0..ys.rows() {
            axpy(1.0, &self.b, ys.row_mut(t));
        }
    }
}

#[derive(Debug, Clone)]
pub struct AffineGrads {
    pub w: Tensor2,
    pub b: Vec<f64>,
}

impl AffineGrads {
    pub fn zeros(layer: &Affine) -> Self {
        Self { w: Tensor2::zeros(layer.w.rows(), layer.w.cols()), b: vec![0.0; layer.b.len()] }
    }

    pub fn reset(&mut self) {
        self.w.fill(0.0);
        self.b.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.w.add_assign(&other.w);
        axpy(1.0, &other.b, &mut self.b);
    }

    /// dy flows into dW, db and optionally back to dx.
    pub fn accumulate(&mut self, layer: &Affine, x: &[f64], dy: &[f64], dx: Option<&mut [f64]>) {
        self.w.add_outer(dy, x);
        axpy(1.0, dy, &mut self.b);
        if let Some(dx) = dx {
            layer.w.matvec_t_acc(dy, dx);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_zero_hidden() {
        let params = LstmParams::zeros(3, 4);
        let (h, c) = lstm_step(&params, &[0.0; 4], &[0.0; 4], &[1.0, -2.0, 0.5]).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));
        assert!(c.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_forget_gate_preserves_cell() {
        let mut params = LstmParams::zeros(2, 3);
        for k in 3..6 {
            params.bias[k] = 50.0; // forget block
        }
        let c_prev = [0.7, -1.3, 0.2];
        let (_, c) = lstm_step(&params, &[0.0; 3], &c_prev, &[1.0, 1.0]).unwrap();
        for k in 0..3 {
            assert!((c[k] - c_prev[k]).abs() < 1e-12, "cell leaked at {k}");
        }
    }

    #[test]
    fn step_matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let d_e = 3;
        let d_h = 4;
        let params = LstmParams {
            w_ih: Tensor2::uniform(4 * d_h, d_e, 0.5, &mut rng),
            w_hh: Tensor2::uniform(4 * d_h, d_h, 0.5, &mut rng),
            bias: (0..4 * d_h).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        };
        let h_prev: Vec<f64> = (0..d_h).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c_prev: Vec<f64> = (0..d_h).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..d_e).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let (h, c) = lstm_step(&params, &h_prev, &c_prev, &x).unwrap();

        // Independent scalar-loop evaluation of the same equations.
        for k in 0..d_h {
            let pre = |row: usize| -> f64 {
                let mut z = params.bias[row];
                for (j, xv) in x.iter().enumerate() {
                    z += params.w_ih.row(row)[j] * xv;
                }
                for (j, hv) in h_prev.iter().enumerate() {
                    z += params.w_hh.row(row)[j] * hv;
                }
                z
            };
            let i = 1.0 / (1.0 + (-pre(k)).exp());
            let f = 1.0 / (1.0 + (-pre(d_h + k)).exp());
            let g = pre(2 * d_h + k).tanh();
            let o = 1.0 / (1.0 + (-pre(3 * d_h + k)).exp());
            let ck = f * c_prev[k] + i * g;
            let hk = o * ck.tanh();
            assert!((c[k] - ck).abs() < 1e-12);
            assert!((h[k] - hk).abs() < 1e-12);
        }
    }

    #[test]
    fn seq_forward_matches_stepwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = LstmParams {
            w_ih: Tensor2::uniform(8, 3, 0.4, &mut rng),
            w_hh: Tensor2::uniform(8, 2, 0.4, &mut rng),
            bias: (0..8).map(|_| rng.gen_range(-0.2..0.2)).collect(),
        };
        let xs = Tensor2::uniform(6, 3, 1.0, &mut rng);
        let cache = lstm_forward_seq(&params, &xs);

        let mut h = vec![0.0; 2];
        let mut c = vec![0.0; 2];
        for t in 0..6 {
            let (h2, c2) = lstm_step(&params, &h, &c, xs.row(t)).unwrap();
            for k in 0..2 {
                assert!((cache.hidden.row(t)[k] - h2[k]).abs() < 1e-12);
                assert!((cache.cells.row(t)[k] - c2[k]).abs() < 1e-12);
            }
            h = h2;
            c = c2;
        }
    }

    #[test]
    fn lstm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let d_e = 3;
        let d_h = 4;
        let len = 5;
        let mut params = LstmParams {
            w_ih: Tensor2::uniform(4 * d_h, d_e, 0.4, &mut rng),
            w_hh: Tensor2::uniform(4 * d_h, d_h, 0.4, &mut rng),
            bias: (0..4 * d_h).map(|_| rng.gen_range(-0.2..0.2)).collect(),
        };
        let xs = Tensor2::uniform(len, d_e, 1.0, &mut rng);
        // Loss: sum of squares of all hidden states.
        let loss = |p: &LstmParams| -> f64 {
            let cache = lstm_forward_seq(p, &xs);
            cache.hidden.data().iter().map(|v| v * v).sum()
        };

        let cache = lstm_forward_seq(&params, &xs);
        let mut dh = Tensor2::zeros(len, d_h);
        for t in 0..len {
            for k in 0..d_h {
                dh.row_mut(t)[k] = 2.0 * cache.hidden.row(t)[k];
            }
        }
        let mut grads = LstmGrads::zeros(&params);
        let mut dxs = Tensor2::zeros(len, d_e);
        lstm_backward_seq(&params, &xs, &cache, &dh, &mut grads, &mut dxs);

        let eps = 1e-6;
        let n_ih = params.w_ih.data().len();
        let n_hh = params.w_hh.data().len();
        let n_b = params.bias.len();
        let mut check = |idx: usize, which: usize, analytic: f64| {
            fn slot(p: &mut LstmParams, which: usize, idx: usize) -> &mut f64 {
                match which {
                    0 => &mut p.w_ih.data_mut()[idx],
                    1 => &mut p.w_hh.data_mut()[idx],
                    _ => &mut p.bias[idx],
                }
            }
            *slot(&mut params, which, idx) += eps;
            let up = loss(&params);
            *slot(&mut params, which, idx) -= 2.0 * eps;
            let down = loss(&params);
            *slot(&mut params, which, idx) += eps;
            let numeric = (up - down) / (2.0 * eps);
            let denom = numeric.abs().max(analytic.abs()).max(1e-8);
            assert!(
                (numeric - analytic).abs() / denom < 1e-4,
                "which={which} idx={idx}: numeric {numeric} vs analytic {analytic}"
            );
        };
        for idx in 0..n_ih {
            check(idx, 0, grads.w_ih.data()[idx]);
        }
        for idx in 0..n_hh {
            check(idx, 1, grads.w_hh.data()[idx]);
        }
        for idx in 0..n_b {
            check(idx, 2, grads.bias[idx]);
        }
    }

    #[test]
    fn rnn_step_zero_weights() {
        let params = RnnParams::zeros(2, 3);
        let h = rnn_step(&params, &[0.5, -0.5, 0.1], &[1.0, 2.0]).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rnn_step_matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let params = RnnParams {
            w_ih: Tensor2::uniform(3, 2, 0.5, &mut rng),
            w_hh: Tensor2::uniform(3, 3, 0.5, &mut rng),
            bias: (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        };
        let h_prev = [0.3, -0.7, 0.2];
        let x = [1.1, -0.4];
        let h = rnn_step(&params, &h_prev, &x).unwrap();
        for k in 0..3 {
            let mut z = params.bias[k];
            for j in 0..2 {
                z += params.w_ih.row(k)[j] * x[j];
            }
            for j in 0..3 {
                z += params.w_hh.row(k)[j] * h_prev[j];
            }
            assert!((h[k] - z.tanh()).abs() < 1e-12);
        }
    }
}
