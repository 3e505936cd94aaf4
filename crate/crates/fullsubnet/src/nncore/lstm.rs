//! Stacked unidirectional LSTM layers: batched forward, stateful streaming
//! steps, and exact backpropagation through time.
//!
//! A layer holds `W [4H x in]`, `U [4H x H]`, `b [4H]` with the gate blocks
//! ordered input, forget, candidate, output along the `4H` axis. Activations
//! travel feature-major (`dim x batch`), so a step is two GEMMs, a bias
//! broadcast and pointwise gate math. The forward tape keeps post-activation
//! gates and cell states per step; everything else the backward pass needs is
//! either re-derived (tanh of the cell) or already present in the stored
//! output sequences.

use rand::Rng;

use super::linalg::{Mat, Scalar};
use crate::{Error, Result};

/// One LSTM layer's parameters.
#[derive(Debug, Clone)]
pub struct Lstm<T> {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Input weights, `4*hidden x input`, gate blocks i,f,g,o.
    pub w: Mat<T>,
    /// Recurrent weights, `4*hidden x hidden`.
    pub u: Mat<T>,
    /// Bias, `4*hidden`.
    pub b: Vec<T>,
}

/// Recurrent state for one layer over a batch: `h` and `c`, each `H x B`.
#[derive(Debug, Clone)]
pub struct LstmState<T> {
    pub h: Mat<T>,
    pub c: Mat<T>,
}

impl<T: Scalar> LstmState<T> {
    pub fn zeros(hidden_dim: usize, batch: usize) -> Self {
        Self { h: Mat::zeros(hidden_dim, batch), c: Mat::zeros(hidden_dim, batch) }
    }
}

impl<T: Scalar> Lstm<T> {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim,
            w: Mat::zeros(4 * hidden_dim, input_dim),
            u: Mat::zeros(4 * hidden_dim, hidden_dim),
            b: vec![T::ZERO; 4 * hidden_dim],
        }
    }

    /// Random init: weights uniform in `±1/sqrt(hidden)`, forget-gate bias 1,
    /// other biases 0. Weights are drawn row-major, `w` before `u`.
    pub fn init(input_dim: usize, hidden_dim: usize, rng: &mut impl Rng) -> Self {
        let s = 1.0 / (hidden_dim as f64).sqrt();
        let w = Mat::from_fn(4 * hidden_dim, input_dim, |_, _| T::from_f64(rng.gen_range(-s..s)));
        let u = Mat::from_fn(4 * hidden_dim, hidden_dim, |_, _| T::from_f64(rng.gen_range(-s..s)));
        let mut b = vec![T::ZERO; 4 * hidden_dim];
        b[hidden_dim..2 * hidden_dim].fill(T::ONE);
        Self { input_dim, hidden_dim, w, u, b }
    }

    pub fn param_count(&self) -> usize {
        4 * (self.hidden_dim * (self.input_dim + self.hidden_dim) + self.hidden_dim)
    }

    /// Advance the layer one step for a batch of columns. `gates` is scratch
    /// (resized to `4H x B`); after the call it holds the post-activation
    /// gate values and `state` holds the new `h`, `c`.
    pub fn step(&self, x: &Mat<T>, state: &mut LstmState<T>, gates: &mut Mat<T>) -> Result<()> {
        let bsz = x.cols();
        if x.rows() != self.input_dim {
            return Err(Error::shape(format!(
                "lstm input dim {} != {}",
                x.rows(),
                self.input_dim
            )));
        }
        if state.h.rows() != self.hidden_dim || state.h.cols() != bsz
            || state.c.rows() != self.hidden_dim
            || state.c.cols() != bsz
        {
            return Err(Error::shape("lstm state dims do not match layer/batch"));
        }
        let hd = self.hidden_dim;
        let hb = hd * bsz;
        gates.resize(4 * hd, bsz);
        gates.gemm(&self.w, x, false);
        gates.gemm(&self.u, &state.h, true);
        gates.add_col_broadcast(&self.b);
        {
            let gs = gates.as_mut_slice();
            let (ifg, rest) = gs.split_at_mut(2 * hb);
            let (gg, og) = rest.split_at_mut(hb);
            T::sigmoid_mut(ifg);
            T::tanh_mut(gg);
            T::sigmoid_mut(og);
        }
        let gs = gates.as_slice();
        {
            let c = state.c.as_mut_slice();
            for idx in 0..hb {
                c[idx] = gs[hb + idx] * c[idx] + gs[idx] * gs[2 * hb + idx];
            }
        }
        // h = o * tanh(c)
        state.h.as_mut_slice().copy_from_slice(state.c.as_slice());
        T::tanh_mut(state.h.as_mut_slice());
        let h = state.h.as_mut_slice();
        for idx in 0..hb {
            h[idx] *= gs[3 * hb + idx];
        }
        Ok(())
    }

    /// Single-vector convenience wrapper around [`Lstm::step`].
    pub fn cell(&self, x: &[T], state: &mut LstmState<T>) -> Result<Vec<T>> {
        let xm = Mat::from_vec(x.len(), 1, x.to_vec())?;
        let mut gates = Mat::zeros(0, 0);
        self.step(&xm, state, &mut gates)?;
        Ok(state.h.as_slice().to_vec())
    }
}

/// Gradients for one layer, shape-congruent with [`Lstm`].
#[derive(Debug, Clone)]
pub struct LstmGrads<T> {
    pub w: Mat<T>,
    pub u: Mat<T>,
    pub b: Vec<T>,
}

impl<T: Scalar> LstmGrads<T> {
    pub fn zeros_like(layer: &Lstm<T>) -> Self {
        Self {
            w: Mat::zeros(4 * layer.hidden_dim, layer.input_dim),
            u: Mat::zeros(4 * layer.hidden_dim, layer.hidden_dim),
            b: vec![T::ZERO; 4 * layer.hidden_dim],
        }
    }
}

/// A stack of LSTM layers, lower to upper.
#[derive(Debug, Clone)]
pub struct LstmStack<T> {
    pub layers: Vec<Lstm<T>>,
}

/// Per-layer state for a stack.
#[derive(Debug, Clone)]
pub struct StackState<T> {
    pub layers: Vec<LstmState<T>>,
}

/// Intermediates recorded by a taped forward pass.
#[derive(Debug)]
pub struct StackTape<T> {
    pub layers: Vec<LayerTape<T>>,
}

#[derive(Debug)]
pub struct LayerTape<T> {
    /// Post-activation gates per step, `4H x B`.
    pub gates: Vec<Mat<T>>,
    /// Cell state after each step, `H x B`.
    pub cells: Vec<Mat<T>>,
    /// Hidden output after each step, `H x B`.
    pub outs: Vec<Mat<T>>,
    pub h0: Mat<T>,
    pub c0: Mat<T>,
}

/// Per-layer gradients for a stack.
#[derive(Debug, Clone)]
pub struct StackGrads<T> {
    pub layers: Vec<LstmGrads<T>>,
}

impl<T: Scalar> StackGrads<T> {
    pub fn zeros_like(stack: &LstmStack<T>) -> Self {
        Self { layers: stack.layers.iter().map(LstmGrads::zeros_like).collect() }
    }
}

/// Scratch buffers for streaming steps, reused across frames.
#[derive(Debug, Clone)]
pub struct StepScratch<T> {
    gates: Mat<T>,
    input: Mat<T>,
}

impl<T: Scalar> Default for StepScratch<T> {
    fn default() -> Self {
        Self { gates: Mat::zeros(0, 0), input: Mat::zeros(0, 0) }
    }
}

impl<T: Scalar> LstmStack<T> {
    pub fn zeros(input_dim: usize, hidden_dims: &[usize]) -> Self {
        let mut layers = Vec::with_capacity(hidden_dims.len());
        let mut in_dim = input_dim;
        for &hd in hidden_dims {
            layers.push(Lstm::zeros(in_dim, hd));
            in_dim = hd;
        }
        Self { layers }
    }

    pub fn init(input_dim: usize, hidden_dims: &[usize], rng: &mut impl Rng) -> Self {
        let mut layers = Vec::with_capacity(hidden_dims.len());
        let mut in_dim = input_dim;
        for &hd in hidden_dims {
            layers.push(Lstm::init(in_dim, hd, rng));
            in_dim = hd;
        }
        Self { layers }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Lstm::param_count).sum()
    }

    pub fn new_state(&self, batch: usize) -> StackState<T> {
        StackState {
            layers: self.layers.iter().map(|l| LstmState::zeros(l.hidden_dim, batch)).collect(),
        }
    }

    /// Advance every layer one step; afterwards the top layer's `state.h` is
    /// the stack output for this step.
    pub fn forward_step(
        &self,
        x: &Mat<T>,
        state: &mut StackState<T>,
        scratch: &mut StepScratch<T>,
    ) -> Result<()> {
        for (l, layer) in self.layers.iter().enumerate() {
            if l == 0 {
                layer.step(x, &mut state.layers[0], &mut scratch.gates)?;
            } else {
                let below = &state.layers[l - 1].h;
                scratch.input.resize(below.rows(), below.cols());
                scratch.input.as_mut_slice().copy_from_slice(below.as_slice());
                let input = std::mem::replace(&mut scratch.input, Mat::zeros(0, 0));
                let res = layer.step(&input, &mut state.layers[l], &mut scratch.gates);
                scratch.input = input;
                res?;
            }
        }
        Ok(())
    }

    /// Run the whole sequence (layer by layer); returns the top layer's
    /// output per step. Computes exactly what per-step streaming computes.
    pub fn forward_sequence(
        &self,
        xs: &[Mat<T>],
        state: &mut StackState<T>,
    ) -> Result<Vec<Mat<T>>> {
        Ok(self.forward_impl(xs, state, false)?.0)
    }

    /// As [`forward_sequence`](Self::forward_sequence) but records the tape
    /// needed by [`backward`](Self::backward).
    pub fn forward_sequence_taped(
        &self,
        xs: &[Mat<T>],
        state: &mut StackState<T>,
    ) -> Result<(Vec<Mat<T>>, StackTape<T>)> {
        let (outs, tape) = self.forward_impl(xs, state, true)?;
        Ok((outs, tape.expect("taping was requested")))
    }

    fn forward_impl(
        &self,
        xs: &[Mat<T>],
        state: &mut StackState<T>,
        taped: bool,
    ) -> Result<(Vec<Mat<T>>, Option<StackTape<T>>)> {
        if xs.is_empty() {
            return Err(Error::invalid("empty sequence"));
        }
        let mut seq: Vec<Mat<T>> = xs.to_vec();
        let mut tape = taped.then(|| StackTape { layers: Vec::with_capacity(self.layers.len()) });
        for (l, layer) in self.layers.iter().enumerate() {
            let st = &mut state.layers[l];
            let h0 = st.h.clone();
            let c0 = st.c.clone();
            let mut gates = Mat::zeros(0, 0);
            let mut gate_tape = Vec::new();
            let mut cell_tape = Vec::new();
            for x in seq.iter_mut() {
                layer.step(x, st, &mut gates)?;
                if taped {
                    gate_tape.push(gates.clone());
                    cell_tape.push(st.c.clone());
                }
                *x = st.h.clone();
            }
            if let Some(t) = tape.as_mut() {
                t.layers.push(LayerTape {
                    gates: gate_tape,
                    cells: cell_tape,
                    outs: seq.clone(),
                    h0,
                    c0,
                });
            }
        }
        Ok((seq, tape))
    }

    /// Backpropagation through time. `d_top` is the loss gradient w.r.t. the
    /// top layer's output at every step; parameter gradients accumulate into
    /// `grads`; the return value is the gradient w.r.t. the input sequence.
    pub fn backward(
        &self,
        xs: &[Mat<T>],
        tape: &StackTape<T>,
        mut d_top: Vec<Mat<T>>,
        grads: &mut StackGrads<T>,
    ) -> Result<Vec<Mat<T>>> {
        if tape.layers.len() != self.layers.len() || grads.layers.len() != self.layers.len() {
            return Err(Error::shape("tape/grads layer count mismatch"));
        }
        for l in (0..self.layers.len()).rev() {
            let inputs: &[Mat<T>] = if l == 0 { xs } else { &tape.layers[l - 1].outs };
            d_top =
                self.layers[l].backward_layer(inputs, &tape.layers[l], d_top, &mut grads.layers[l])?;
        }
        Ok(d_top)
    }
}

impl<T: Scalar> Lstm<T> {
    fn backward_layer(
        &self,
        inputs: &[Mat<T>],
        tape: &LayerTape<T>,
        mut d_outs: Vec<Mat<T>>,
        g: &mut LstmGrads<T>,
    ) -> Result<Vec<Mat<T>>> {
        let tlen = inputs.len();
        if tape.gates.len() != tlen || d_outs.len() != tlen {
            return Err(Error::shape("tape length mismatch"));
        }
        let bsz = inputs[0].cols();
        let hd = self.hidden_dim;
        let hb = hd * bsz;
        let wt = self.w.transposed();
        let ut = self.u.transposed();
        let mut d_in = vec![Mat::zeros(self.input_dim, bsz); tlen];
        let mut dh_next = Mat::zeros(hd, bsz);
        let mut dc_next = Mat::<T>::zeros(hd, bsz);
        let mut dg = Mat::zeros(4 * hd, bsz);
        let mut tanh_c = Mat::zeros(hd, bsz);
        for t in (0..tlen).rev() {
            let dh = d_outs[t].as_mut_slice();
            for (v, &a) in dh.iter_mut().zip(dh_next.as_slice()) {
                *v += a;
            }
            tanh_c.as_mut_slice().copy_from_slice(tape.cells[t].as_slice());
            T::tanh_mut(tanh_c.as_mut_slice());
            let gs = tape.gates[t].as_slice();
            let c_prev = if t > 0 { tape.cells[t - 1].as_slice() } else { tape.c0.as_slice() };
            {
                let th = tanh_c.as_slice();
                let dgs = dg.as_mut_slice();
                let dcn = dc_next.as_mut_slice();
                for idx in 0..hb {
                    let i_ = gs[idx];
                    let f_ = gs[hb + idx];
                    let g_ = gs[2 * hb + idx];
                    let o_ = gs[3 * hb + idx];
                    let t_ = th[idx];
                    let dh_v = dh[idx];
                    let d_o = dh_v * t_;
                    let dc = dcn[idx] + dh_v * o_ * (T::ONE - t_ * t_);
                    let d_i = dc * g_;
                    let d_g = dc * i_;
                    let d_f = dc * c_prev[idx];
                    dcn[idx] = dc * f_;
                    dgs[idx] = d_i * i_ * (T::ONE - i_);
                    dgs[hb + idx] = d_f * f_ * (T::ONE - f_);
                    dgs[2 * hb + idx] = d_g * (T::ONE - g_ * g_);
                    dgs[3 * hb + idx] = d_o * o_ * (T::ONE - o_);
                }
            }
            g.w.gemm_abt(&dg, &inputs[t]);
            let h_prev = if t > 0 { &tape.outs[t - 1] } else { &tape.h0 };
            g.u.gemm_abt(&dg, h_prev);
            dg.row_sums_into(&mut g.b);
            d_in[t].gemm(&wt, &dg, false);
            dh_next.gemm(&ut, &dg, false);
        }
        Ok(d_in)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat<f64> {
        Mat::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn zero_params_zero_state_gives_zero_output() {
        let layer = Lstm::<f64>::zeros(4, 3);
        let mut state = LstmState::zeros(3, 1);
        let h = layer.cell(&[0.3, -0.2, 0.9, 1.5], &mut state).unwrap();
        // gates all 0.5, candidate tanh(0) = 0, so c stays 0 and h = 0
        assert!(h.iter().all(|&v| v == 0.0));
        assert!(state.c.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_params_unit_cell_hand_value() {
        let layer = Lstm::<f64>::zeros(2, 3);
        let mut state = LstmState::zeros(3, 1);
        state.c.fill(1.0);
        let h = layer.cell(&[0.0, 0.0], &mut state).unwrap();
        // c' = 0.5*1 + 0.5*0 = 0.5; h = 0.5*tanh(0.5)
        let want = 0.5 * 0.5f64.tanh();
        assert!((want - 0.23105857863000487).abs() < 1e-15);
        for &v in &h {
            assert!((v - want).abs() < 1e-15, "{v} vs {want}");
        }
        for &c in state.c.as_slice() {
            assert!((c - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn param_count_formula() {
        let layer = Lstm::<f32>::zeros(2, 3);
        assert_eq!(layer.param_count(), 72);
        let stack = LstmStack::<f32>::zeros(257, &[512, 512]);
        assert_eq!(stack.param_count(), 4 * (512 * (257 + 512) + 512) + 4 * (512 * 1024 + 512));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let layer = Lstm::<f64>::zeros(4, 3);
        let mut state = LstmState::zeros(3, 1);
        assert!(matches!(layer.cell(&[1.0, 2.0], &mut state), Err(Error::ShapeMismatch(_))));
        let mut bad_state = LstmState::zeros(5, 1);
        assert!(matches!(
            layer.cell(&[0.0; 4], &mut bad_state),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn empty_sequence_rejected() {
        let stack = LstmStack::<f64>::zeros(3, &[4]);
        let mut state = stack.new_state(1);
        assert!(matches!(
            stack.forward_sequence(&[], &mut state),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn zero_params_zero_sequence_output() {
        let stack = LstmStack::<f64>::zeros(3, &[4, 4]);
        let mut state = stack.new_state(2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs: Vec<Mat<f64>> = (0..5).map(|_| rand_mat(3, 2, &mut rng)).collect();
        let outs = stack.forward_sequence(&xs, &mut state).unwrap();
        for o in outs {
            assert!(o.as_slice().iter().all(|&v| v == 0.0));
        }
    }

    /// Feeding a sequence in two chunks with carried state must equal feeding
    /// it whole, bit for bit.
    #[test]
    fn chunked_equals_whole() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let stack = LstmStack::<f64>::init(3, &[5, 5], &mut rng);
        let xs: Vec<Mat<f64>> = (0..20).map(|_| rand_mat(3, 2, &mut rng)).collect();

        let mut state_whole = stack.new_state(2);
        let whole = stack.forward_sequence(&xs, &mut state_whole).unwrap();

        let mut state_chunked = stack.new_state(2);
        let mut first = stack.forward_sequence(&xs[..7], &mut state_chunked).unwrap();
        let second = stack.forward_sequence(&xs[7..], &mut state_chunked).unwrap();
        first.extend(second);

        for (a, b) in whole.iter().zip(&first) {
            assert_eq!(a.as_slice(), b.as_slice());
        }
        for (a, b) in state_whole.layers.iter().zip(&state_chunked.layers) {
            assert_eq!(a.h.as_slice(), b.h.as_slice());
            assert_eq!(a.c.as_slice(), b.c.as_slice());
        }
    }

    /// Per-frame streaming steps equal the batched sequence pass exactly.
    #[test]
    fn step_equals_sequence() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let stack = LstmStack::<f32>::init(4, &[6, 6], &mut rng);
        let xs: Vec<Mat<f32>> =
            (0..11).map(|_| Mat::from_fn(4, 3, |_, _| rng.gen_range(-1.0f32..1.0))).collect();

        let mut seq_state = stack.new_state(3);
        let seq_out = stack.forward_sequence(&xs, &mut seq_state).unwrap();

        let mut step_state = stack.new_state(3);
        let mut scratch = StepScratch::default();
        for (t, x) in xs.iter().enumerate() {
            stack.forward_step(x, &mut step_state, &mut scratch).unwrap();
            assert_eq!(
                step_state.layers.last().unwrap().h.as_slice(),
                seq_out[t].as_slice(),
                "step {t}"
            );
        }
    }

    #[test]
    fn single_step_sequence_reduces_to_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let stack = LstmStack::<f64>::init(3, &[4], &mut rng);
        let x = rand_mat(3, 1, &mut rng);

        let mut state = stack.new_state(1);
        let outs = stack.forward_sequence(std::slice::from_ref(&x), &mut state).unwrap();

        let mut cell_state = LstmState::zeros(4, 1);
        let h = stack.layers[0].cell(x.as_slice(), &mut cell_state).unwrap();
        assert_eq!(outs[0].as_slice(), h.as_slice());
    }

    fn mse_and_grad(outs: &[Mat<f64>], targets: &[Mat<f64>]) -> (f64, Vec<Mat<f64>>) {
        let mut loss = 0.0;
        let mut d = Vec::with_capacity(outs.len());
        let count: usize = outs.iter().map(|o| o.as_slice().len()).sum();
        for (o, t) in outs.iter().zip(targets) {
            let mut dm = Mat::zeros(o.rows(), o.cols());
            for ((dv, &ov), &tv) in
                dm.as_mut_slice().iter_mut().zip(o.as_slice()).zip(t.as_slice())
            {
                let diff = ov - tv;
                loss += diff * diff;
                *dv = 2.0 * diff / count as f64;
            }
            d.push(dm);
        }
        (loss / count as f64, d)
    }

    fn flat_params(stack: &LstmStack<f64>) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &stack.layers {
            out.extend_from_slice(l.w.as_slice());
            out.extend_from_slice(l.u.as_slice());
            out.extend_from_slice(&l.b);
        }
        out
    }

    fn set_flat_params(stack: &mut LstmStack<f64>, vals: &[f64]) {
        let mut off = 0;
        for l in &mut stack.layers {
            let n = l.w.as_slice().len();
            l.w.as_mut_slice().copy_from_slice(&vals[off..off + n]);
            off += n;
            let n = l.u.as_slice().len();
            l.u.as_mut_slice().copy_from_slice(&vals[off..off + n]);
            off += n;
            let n = l.b.len();
            l.b.copy_from_slice(&vals[off..off + n]);
            off += n;
        }
        assert_eq!(off, vals.len());
    }

    fn flat_grads(grads: &StackGrads<f64>) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &grads.layers {
            out.extend_from_slice(g.w.as_slice());
            out.extend_from_slice(g.u.as_slice());
            out.extend_from_slice(&g.b);
        }
        out
    }

    /// BPTT against the central-difference oracle on a small 2-layer net.
    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut stack = LstmStack::<f64>::init(3, &[5, 5], &mut rng);
        let tlen = 7;
        let bsz = 2;
        let xs: Vec<Mat<f64>> = (0..tlen).map(|_| rand_mat(3, bsz, &mut rng)).collect();
        let targets: Vec<Mat<f64>> = (0..tlen).map(|_| rand_mat(5, bsz, &mut rng)).collect();

        let mut state = stack.new_state(bsz);
        let (outs, tape) = stack.forward_sequence_taped(&xs, &mut state).unwrap();
        let (_, d_top) = mse_and_grad(&outs, &targets);
        let mut grads = StackGrads::zeros_like(&stack);
        stack.backward(&xs, &tape, d_top, &mut grads).unwrap();
        let analytic = flat_grads(&grads);

        let base = flat_params(&stack);
        let numeric = crate::nncore::gradcheck::finite_diff_gradients(
            &base,
            |p| {
                set_flat_params(&mut stack, p);
                let mut st = stack.new_state(bsz);
                let outs = stack.forward_sequence(&xs, &mut st).unwrap();
                mse_and_grad(&outs, &targets).0
            },
            1e-5,
        );
        set_flat_params(&mut stack, &base);

        let err = crate::nncore::gradcheck::max_relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "max rel err {err}");
    }

    /// The BPTT/oracle agreement holds across many random configurations.
    #[test]
    fn backward_matches_finite_differences_many_seeds() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let input = 2 + (seed % 3) as usize;
            let hidden = 3 + (seed % 2) as usize;
            let tlen = 3 + (seed % 4) as usize;
            let mut stack = LstmStack::<f64>::init(input, &[hidden, hidden], &mut rng);
            let xs: Vec<Mat<f64>> = (0..tlen).map(|_| rand_mat(input, 1, &mut rng)).collect();
            let targets: Vec<Mat<f64>> = (0..tlen).map(|_| rand_mat(hidden, 1, &mut rng)).collect();

            let mut state = stack.new_state(1);
            let (outs, tape) = stack.forward_sequence_taped(&xs, &mut state).unwrap();
            let (_, d_top) = mse_and_grad(&outs, &targets);
            let mut grads = StackGrads::zeros_like(&stack);
            stack.backward(&xs, &tape, d_top, &mut grads).unwrap();
            let analytic = flat_grads(&grads);

            let base = flat_params(&stack);
            let numeric = crate::nncore::gradcheck::finite_diff_gradients(
                &base,
                |p| {
                    set_flat_params(&mut stack, p);
                    let mut st = stack.new_state(1);
                    let outs = stack.forward_sequence(&xs, &mut st).unwrap();
                    mse_and_grad(&outs, &targets).0
                },
                1e-5,
            );
            set_flat_params(&mut stack, &base);
            let err = crate::nncore::gradcheck::max_relative_error(&analytic, &numeric);
            assert!(err < 1e-4, "seed {seed}: max rel err {err}");
        }
    }

    #[test]
    fn zero_loss_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let stack = LstmStack::<f64>::init(3, &[4], &mut rng);
        let xs: Vec<Mat<f64>> = (0..5).map(|_| rand_mat(3, 1, &mut rng)).collect();
        let mut state = stack.new_state(1);
        let (outs, tape) = stack.forward_sequence_taped(&xs, &mut state).unwrap();
        // target == output: d_top is exactly zero
        let (_, d_top) = mse_and_grad(&outs, &outs.clone());
        let mut grads = StackGrads::zeros_like(&stack);
        stack.backward(&xs, &tape, d_top, &mut grads).unwrap();
        for g in flat_grads(&grads) {
            assert_eq!(g, 0.0);
        }
    }

    /// Duplicating a training pair as a second batch column doubles every
    /// summed-loss gradient exactly: each batch reduction adds two identical
    /// terms.
    #[test]
    fn duplicated_example_doubles_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let stack = LstmStack::<f64>::init(2, &[3], &mut rng);
        let xs1: Vec<Mat<f64>> = (0..4).map(|_| rand_mat(2, 1, &mut rng)).collect();
        let targets1: Vec<Mat<f64>> = (0..4).map(|_| rand_mat(3, 1, &mut rng)).collect();
        let dup = |m: &Mat<f64>| Mat::from_fn(m.rows(), 2, |r, _| m.at(r, 0));
        let xs2: Vec<Mat<f64>> = xs1.iter().map(dup).collect();
        let targets2: Vec<Mat<f64>> = targets1.iter().map(dup).collect();

        // summed (not averaged) squared error
        let run = |xs: &[Mat<f64>], targets: &[Mat<f64>]| {
            let bsz = xs[0].cols();
            let mut state = stack.new_state(bsz);
            let (outs, tape) = stack.forward_sequence_taped(xs, &mut state).unwrap();
            let d_top: Vec<Mat<f64>> = outs
                .iter()
                .zip(targets)
                .map(|(o, t)| {
                    Mat::from_fn(o.rows(), o.cols(), |r, c| 2.0 * (o.at(r, c) - t.at(r, c)))
                })
                .collect();
            let mut grads = StackGrads::zeros_like(&stack);
            stack.backward(xs, &tape, d_top, &mut grads).unwrap();
            flat_grads(&grads)
        };
        let single = run(&xs1, &targets1);
        let double = run(&xs2, &targets2);
        for (a, b) in single.iter().zip(&double) {
            assert_eq!(2.0 * a, *b);
        }
    }

    /// Outputs stay finite even with parameters pushed to the stated bound.
    #[test]
    fn forward_finite_under_large_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut stack = LstmStack::<f32>::init(3, &[4, 4], &mut rng);
        for l in &mut stack.layers {
            for v in l.w.as_mut_slice() {
                *v *= 1e3;
            }
            for v in l.u.as_mut_slice() {
                *v *= 1e3;
            }
        }
        let xs: Vec<Mat<f32>> =
            (0..8).map(|_| Mat::from_fn(3, 2, |_, _| rng.gen_range(-1e3f32..1e3))).collect();
        let mut state = stack.new_state(2);
        let outs = stack.forward_sequence(&xs, &mut state).unwrap();
        for o in outs {
            for &v in o.as_slice() {
                assert!(v.is_finite() && v.abs() <= 1.0 + 1e-6);
            }
        }
    }
}
