use crate::error::{Error, Result};
use crate::nn::impl_params;
use crate::rng::Rng;
use crate::tensor::{init_uniform, kernels, sigmoid_scalar, Tensor};

use super::{CellState, RecurrentCell};

/// Gated recurrent unit with update gate `z`, reset gate `r` and candidate
/// `h̃ = tanh(W_h [r ⊙ h_prev, x] + b_h)`; the new state is
/// `(1 - z) ⊙ h_prev + z ⊙ h̃`.
#[derive(Clone, Debug, PartialEq)]
pub struct GruCell {
    pub w_z: Tensor,
    pub w_r: Tensor,
    pub w_h: Tensor,
    pub b_z: Tensor,
    pub b_r: Tensor,
    pub b_h: Tensor,
}

impl_params!(GruCell { w_z, w_r, w_h, b_z, b_r, b_h });

#[derive(Clone, Debug)]
pub struct GruCache {
    pub hx: Vec<f64>,
    pub rhx: Vec<f64>,
    pub update: Vec<f64>,
    pub reset: Vec<f64>,
    pub candidate: Vec<f64>,
}

impl GruCell {
    pub fn new(input: usize, hidden: usize, rng: &mut Rng) -> Self {
        let scale = 1.0 / ((input + hidden) as f64).sqrt();
        let mut w = || init_uniform(rng, &[hidden, hidden + input], scale).expect("positive scale");
        let (w_z, w_r, w_h) = (w(), w(), w());
        GruCell {
            w_z,
            w_r,
            w_h,
            b_z: Tensor::zeros(&[hidden]),
            b_r: Tensor::zeros(&[hidden]),
            b_h: Tensor::zeros(&[hidden]),
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        let w = Tensor::zeros(&[hidden, hidden + input]);
        let b = Tensor::zeros(&[hidden]);
        GruCell {
            w_z: w.clone(),
            w_r: w.clone(),
            w_h: w,
            b_z: b.clone(),
            b_r: b.clone(),
            b_h: b,
        }
    }

    fn check(&self) -> Result<()> {
        let shape = self.w_z.shape();
        let h = self.b_z.len();
        let consistent = shape.len() == 2
            && shape[0] == h
            && shape[1] >= h
            && self.w_r.shape() == shape
            && self.w_h.shape() == shape
            && self.b_r.shape() == [h]
            && self.b_h.shape() == [h];
        if consistent {
            Ok(())
        } else {
            Err(Error::shape("gru params", shape, self.b_z.shape()))
        }
    }
}

impl RecurrentCell for GruCell {
    type Cache = GruCache;

    fn hidden_size(&self) -> usize {
        self.b_z.len()
    }

    fn input_size(&self) -> usize {
        self.w_z.cols() - self.hidden_size()
    }

    fn zero_state(&self) -> CellState {
        CellState {
            h: vec![0.0; self.hidden_size()],
            c: Vec::new(),
        }
    }

    fn step(&self, prev: &CellState, x: &[f64]) -> (CellState, GruCache) {
        let h = self.hidden_size();
        let n = self.w_z.cols();
        let mut hx = Vec::with_capacity(n);
        hx.extend_from_slice(&prev.h);
        hx.extend_from_slice(x);

        let mut update = vec![0.0; h];
        let mut reset = vec![0.0; h];
        kernels::matvec(self.w_z.data(), n, &hx, &mut update);
        kernels::matvec(self.w_r.data(), n, &hx, &mut reset);
        for k in 0..h {
            update[k] = sigmoid_scalar(update[k] + self.b_z.data()[k]);
            reset[k] = sigmoid_scalar(reset[k] + self.b_r.data()[k]);
        }
        let mut rhx = hx.clone();
        for k in 0..h {
            rhx[k] *= reset[k];
        }
        let mut candidate = vec![0.0; h];
        kernels::matvec(self.w_h.data(), n, &rhx, &mut candidate);
        let mut h_new = vec![0.0; h];
        for k in 0..h {
            candidate[k] = (candidate[k] + self.b_h.data()[k]).tanh();
            h_new[k] = (1.0 - update[k]) * prev.h[k] + update[k] * candidate[k];
        }
        let cache = GruCache {
            hx,
            rhx,
            update,
            reset,
            candidate,
        };
        (CellState { h: h_new, c: Vec::new() }, cache)
    }

    fn step_backward(
        &self,
        cache: &GruCache,
        d_next: &CellState,
        grads: &mut Self,
    ) -> (CellState, Vec<f64>) {
        let h = self.hidden_size();
        let n = self.w_z.cols();
        let h_prev = &cache.hx[..h];

        let mut dhx = vec![0.0; n];
        let mut da_z = vec![0.0; h];
        let mut da_h = vec![0.0; h];
        for k in 0..h {
            let dh = d_next.h[k];
            let z = cache.update[k];
            let ht = cache.candidate[k];
            dhx[k] = dh * (1.0 - z);
            da_z[k] = dh * (ht - h_prev[k]) * z * (1.0 - z);
            da_h[k] = dh * z * (1.0 - ht * ht);
        }

        let mut drhx = vec![0.0; n];
        kernels::matvec_t_acc(self.w_h.data(), n, &da_h, &mut drhx);
        kernels::outer_acc(grads.w_h.data_mut(), &da_h, &cache.rhx);
        kernels::axpy(1.0, &da_h, grads.b_h.data_mut());

        let mut da_r = vec![0.0; h];
        for k in 0..h {
            let r = cache.reset[k];
            da_r[k] = drhx[k] * h_prev[k] * r * (1.0 - r);
            dhx[k] += drhx[k] * r;
        }
        kernels::axpy(1.0, &drhx[h..], &mut dhx[h..]);

        kernels::matvec_t_acc(self.w_z.data(), n, &da_z, &mut dhx);
        kernels::outer_acc(grads.w_z.data_mut(), &da_z, &cache.hx);
        kernels::axpy(1.0, &da_z, grads.b_z.data_mut());
        kernels::matvec_t_acc(self.w_r.data(), n, &da_r, &mut dhx);
        kernels::outer_acc(grads.w_r.data_mut(), &da_r, &cache.hx);
        kernels::axpy(1.0, &da_r, grads.b_r.data_mut());

        let dx = dhx.split_off(h);
        (CellState { h: dhx, c: Vec::new() }, dx)
    }
}

/// One GRU update: returns `h_t`.
pub fn gru_step(params: &GruCell, h_prev: &Tensor, x: &Tensor) -> Result<Tensor> {
    params.check()?;
    if h_prev.len() != params.hidden_size() {
        return Err(Error::shape("gru_step state", &[params.hidden_size()], h_prev.shape()));
    }
    if x.len() != params.input_size() {
        return Err(Error::shape("gru_step input", &[params.input_size()], x.shape()));
    }
    let prev = CellState {
        h: h_prev.data().to_vec(),
        c: Vec::new(),
    };
    Ok(Tensor::vector(params.step(&prev, x.data()).0.h))
}
