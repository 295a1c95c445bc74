use crate::error::{Error, Result};
use crate::nn::impl_params;
use crate::rng::Rng;
use crate::tensor::{init_uniform, kernels, sigmoid_scalar, Tensor};

use super::{CellState, RecurrentCell};

/// LSTM memory block. Every gate reads the concatenation `[h_prev, x_t]`, so
/// the weight matrices are `[hidden × (hidden + input)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCell {
    pub w_f: Tensor,
    pub w_i: Tensor,
    pub w_o: Tensor,
    pub w_c: Tensor,
    pub b_f: Tensor,
    pub b_i: Tensor,
    pub b_o: Tensor,
    pub b_c: Tensor,
}

impl_params!(LstmCell { w_f, w_i, w_o, w_c, b_f, b_i, b_o, b_c });

/// Forward values kept for the backward pass.
#[derive(Clone, Debug)]
pub struct LstmCache {
    pub hx: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub forget: Vec<f64>,
    pub input: Vec<f64>,
    pub output: Vec<f64>,
    pub candidate: Vec<f64>,
    pub tanh_c: Vec<f64>,
}

impl LstmCell {
    pub fn new(input: usize, hidden: usize, rng: &mut Rng) -> Self {
        let scale = 1.0 / ((input + hidden) as f64).sqrt();
        let mut w = || init_uniform(rng, &[hidden, hidden + input], scale).expect("positive scale");
        let (w_f, w_i, w_o, w_c) = (w(), w(), w(), w());
        LstmCell {
            w_f,
            w_i,
            w_o,
            w_c,
            b_f: Tensor::zeros(&[hidden]),
            b_i: Tensor::zeros(&[hidden]),
            b_o: Tensor::zeros(&[hidden]),
            b_c: Tensor::zeros(&[hidden]),
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        let w = Tensor::zeros(&[hidden, hidden + input]);
        let b = Tensor::zeros(&[hidden]);
        LstmCell {
            w_f: w.clone(),
            w_i: w.clone(),
            w_o: w.clone(),
            w_c: w,
            b_f: b.clone(),
            b_i: b.clone(),
            b_o: b.clone(),
            b_c: b,
        }
    }

    fn check(&self) -> Result<()> {
        let shape = self.w_f.shape();
        let h = self.b_f.len();
        let consistent = shape.len() == 2
            && shape[0] == h
            && shape[1] >= h
            && [&self.w_i, &self.w_o, &self.w_c].iter().all(|w| w.shape() == shape)
            && [&self.b_i, &self.b_o, &self.b_c].iter().all(|b| b.shape() == [h]);
        if consistent {
            Ok(())
        } else {
            Err(Error::shape("lstm params", shape, self.b_f.shape()))
        }
    }
}

impl RecurrentCell for LstmCell {
    type Cache = LstmCache;

    fn hidden_size(&self) -> usize {
        self.b_f.len()
    }

    fn input_size(&self) -> usize {
        self.w_f.cols() - self.hidden_size()
    }

    fn zero_state(&self) -> CellState {
        CellState {
            h: vec![0.0; self.hidden_size()],
            c: vec![0.0; self.hidden_size()],
        }
    }

    fn step(&self, prev: &CellState, x: &[f64]) -> (CellState, LstmCache) {
        let h = self.hidden_size();
        let n = self.w_f.cols();
        let mut hx = Vec::with_capacity(n);
        hx.extend_from_slice(&prev.h);
        hx.extend_from_slice(x);

        let gate = |w: &Tensor, b: &Tensor, f: fn(f64) -> f64| -> Vec<f64> {
            let mut out = vec![0.0; h];
            kernels::matvec(w.data(), n, &hx, &mut out);
            out.iter_mut().zip(b.data()).for_each(|(o, b)| *o = f(*o + b));
            out
        };
        let forget = gate(&self.w_f, &self.b_f, sigmoid_scalar);
        let input = gate(&self.w_i, &self.b_i, sigmoid_scalar);
        let output = gate(&self.w_o, &self.b_o, sigmoid_scalar);
        let candidate = gate(&self.w_c, &self.b_c, f64::tanh);

        let mut c = vec![0.0; h];
        let mut tanh_c = vec![0.0; h];
        let mut h_new = vec![0.0; h];
        for k in 0..h {
            c[k] = forget[k] * prev.c[k] + input[k] * candidate[k];
            tanh_c[k] = c[k].tanh();
            h_new[k] = output[k] * tanh_c[k];
        }
        let cache = LstmCache {
            hx,
            c_prev: prev.c.clone(),
            forget,
            input,
            output,
            candidate,
            tanh_c,
        };
        (CellState { h: h_new, c }, cache)
    }

    fn step_backward(
        &self,
        cache: &LstmCache,
        d_next: &CellState,
        grads: &mut Self,
    ) -> (CellState, Vec<f64>) {
        let h = self.hidden_size();
        let n = self.w_f.cols();
        let mut da_f = vec![0.0; h];
        let mut da_i = vec![0.0; h];
        let mut da_o = vec![0.0; h];
        let mut da_c = vec![0.0; h];
        let mut dc_prev = vec![0.0; h];
        for k in 0..h {
            let (f, i, o, ct, tc) = (
                cache.forget[k],
                cache.input[k],
                cache.output[k],
                cache.candidate[k],
                cache.tanh_c[k],
            );
            let dh = d_next.h[k];
            let dc = d_next.c[k] + dh * o * (1.0 - tc * tc);
            dc_prev[k] = dc * f;
            da_f[k] = dc * cache.c_prev[k] * f * (1.0 - f);
            da_i[k] = dc * ct * i * (1.0 - i);
            da_o[k] = dh * tc * o * (1.0 - o);
            da_c[k] = dc * i * (1.0 - ct * ct);
        }
        let mut dhx = vec![0.0; n];
        for (da, w, gw, gb) in [
            (&da_f, &self.w_f, &mut grads.w_f, &mut grads.b_f),
            (&da_i, &self.w_i, &mut grads.w_i, &mut grads.b_i),
            (&da_o, &self.w_o, &mut grads.w_o, &mut grads.b_o),
            (&da_c, &self.w_c, &mut grads.w_c, &mut grads.b_c),
        ] {
            kernels::matvec_t_acc(w.data(), n, da, &mut dhx);
            kernels::outer_acc(gw.data_mut(), da, &cache.hx);
            kernels::axpy(1.0, da, gb.data_mut());
        }
        let dx = dhx.split_off(h);
        (CellState { h: dhx, c: dc_prev }, dx)
    }
}

/// One memory-block update: returns `(h_t, C_t)`.
pub fn lstm_step(
    params: &LstmCell,
    h_prev: &Tensor,
    c_prev: &Tensor,
    x: &Tensor,
) -> Result<(Tensor, Tensor)> {
    params.check()?;
    let h = params.hidden_size();
    if h_prev.len() != h || c_prev.len() != h {
        return Err(Error::shape("lstm_step state", &[h], h_prev.shape()));
    }
    if x.len() != params.input_size() {
        return Err(Error::shape("lstm_step input", &[params.input_size()], x.shape()));
    }
    let prev = CellState {
        h: h_prev.data().to_vec(),
        c: c_prev.data().to_vec(),
    };
    let (next, _) = params.step(&prev, x.data());
    Ok((Tensor::vector(next.h), Tensor::vector(next.c)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_cell(w: [[f64; 2]; 4], b: [f64; 4]) -> LstmCell {
        let m = |r: [f64; 2]| Tensor::matrix(1, 2, r.to_vec()).unwrap();
        let v = |x: f64| Tensor::vector(vec![x]);
        LstmCell {
            w_f: m(w[0]),
            w_i: m(w[1]),
            w_o: m(w[2]),
            w_c: m(w[3]),
            b_f: v(b[0]),
            b_i: v(b[1]),
            b_o: v(b[2]),
            b_c: v(b[3]),
        }
    }

    #[test]
    fn zero_parameters_force_closed_form() {
        let cell = LstmCell::zeros(3, 2);
        let (state, cache) = cell.step(&cell.zero_state(), &[0.3, -1.0, 2.0]);
        assert!(cache.forget.iter().chain(&cache.input).chain(&cache.output).all(|g| *g == 0.5));
        assert!(cache.candidate.iter().all(|c| *c == 0.0));
        assert_eq!(state.c, vec![0.0, 0.0]);
        assert_eq!(state.h, vec![0.0, 0.0]);
    }

    #[test]
    fn saturated_forget_gate_passes_cell_through() {
        let cell = scalar_cell([[0.0; 2]; 4], [100.0, 0.0, 0.0, 0.0]);
        let (_, c) = lstm_step(
            &cell,
            &Tensor::vector(vec![0.0]),
            &Tensor::vector(vec![0.7]),
            &Tensor::vector(vec![1.5]),
        )
        .unwrap();
        assert!((c.data()[0] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn scalar_hand_evaluation() {
        let cell = scalar_cell(
            [[0.5, -0.3], [0.2, 0.8], [-0.6, 0.1], [0.9, -0.4]],
            [0.1, -0.2, 0.3, 0.05],
        );
        let (h_prev, c_prev, x) = (0.4, -0.25, 1.2);
        let s = |z: f64| 1.0 / (1.0 + (-z).exp());
        let f = s(0.5 * h_prev - 0.3 * x + 0.1);
        let i = s(0.2 * h_prev + 0.8 * x - 0.2);
        let o = s(-0.6 * h_prev + 0.1 * x + 0.3);
        let ct = (0.9 * h_prev - 0.4 * x + 0.05).tanh();
        let c = f * c_prev + i * ct;
        let h = o * c.tanh();
        let (ht, cnew) = lstm_step(
            &cell,
            &Tensor::vector(vec![h_prev]),
            &Tensor::vector(vec![c_prev]),
            &Tensor::vector(vec![x]),
        )
        .unwrap();
        assert!((ht.data()[0] - h).abs() <= 1e-12);
        assert!((cnew.data()[0] - c).abs() <= 1e-12);
    }

    #[test]
    fn blocked_input_gate_conserves_cell() {
        let mut rng = Rng::new(8);
        let mut cell = LstmCell::new(3, 4, &mut rng);
        cell.b_i.fill(-100.0);
        cell.w_i.fill(0.0);
        let prev = CellState {
            h: vec![0.1, -0.2, 0.3, 0.0],
            c: vec![1.0, -2.0, 0.5, 3.0],
        };
        let (next, cache) = cell.step(&prev, &[0.2, 0.4, -0.9]);
        for k in 0..4 {
            assert!((next.c[k] - cache.forget[k] * prev.c[k]).abs() <= 1e-10);
        }
    }

    #[test]
    fn shape_errors() {
        let cell = LstmCell::zeros(2, 3);
        let bad = lstm_step(
            &cell,
            &Tensor::zeros(&[3]),
            &Tensor::zeros(&[3]),
            &Tensor::zeros(&[5]),
        );
        assert!(matches!(bad, Err(Error::Shape { .. })));
    }
}
