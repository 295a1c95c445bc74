use crate::error::{Error, Result};
use crate::nn::impl_params;
use crate::rng::Rng;
use crate::tensor::{init_uniform, kernels, softmax_in_place, Tensor};

/// Additive attention pooling: `e_t = v·tanh(W s_t)`, `α = softmax(e)`,
/// output `Σ α_t s_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub w_a: Tensor,
    pub v_a: Tensor,
}

impl_params!(AttentionParams { w_a, v_a });

pub struct AttentionCache {
    projected: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl AttentionParams {
    pub fn new(state_dim: usize, attn_dim: usize, rng: &mut Rng) -> Self {
        AttentionParams {
            w_a: init_uniform(rng, &[attn_dim, state_dim], 1.0 / (state_dim as f64).sqrt())
                .expect("positive scale"),
            v_a: init_uniform(rng, &[attn_dim], 1.0 / (attn_dim as f64).sqrt())
                .expect("positive scale"),
        }
    }

    pub fn zeros(state_dim: usize, attn_dim: usize) -> Self {
        AttentionParams {
            w_a: Tensor::zeros(&[attn_dim, state_dim]),
            v_a: Tensor::zeros(&[attn_dim]),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.w_a.cols()
    }

    pub fn forward(&self, states: &Tensor) -> Result<(Vec<f64>, AttentionCache)> {
        if states.rank() != 2 || states.rows() == 0 {
            return Err(Error::EmptyInput("attention"));
        }
        if states.cols() != self.state_dim() || self.v_a.len() != self.w_a.rows() {
            return Err(Error::shape("attention", self.w_a.shape(), states.shape()));
        }
        let d = self.state_dim();
        let a = self.v_a.len();
        let mut projected = Vec::with_capacity(states.rows());
        let mut scores = Vec::with_capacity(states.rows());
        for t in 0..states.rows() {
            let mut u = vec![0.0; a];
            kernels::matvec(self.w_a.data(), d, states.row(t), &mut u);
            u.iter_mut().for_each(|x| *x = x.tanh());
            scores.push(kernels::dot(&u, self.v_a.data()));
            projected.push(u);
        }
        softmax_in_place(&mut scores);
        let mut out = vec![0.0; d];
        for (t, w) in scores.iter().enumerate() {
            kernels::axpy(*w, states.row(t), &mut out);
        }
        Ok((
            out,
            AttentionCache {
                projected,
                weights: scores,
            },
        ))
    }

    /// Returns the gradient w.r.t. `states`.
    pub fn backward(
        &self,
        cache: &AttentionCache,
        states: &Tensor,
        d_out: &[f64],
        grads: &mut AttentionParams,
    ) -> Tensor {
        let d = self.state_dim();
        let steps = states.rows();
        let mut d_states = Tensor::zeros(&[steps, d]);
        let d_alpha: Vec<f64> = (0..steps).map(|t| kernels::dot(d_out, states.row(t))).collect();
        let mean: f64 = cache.weights.iter().zip(&d_alpha).map(|(a, g)| a * g).sum();
        for t in 0..steps {
            let alpha = cache.weights[t];
            let row = d_states.row_mut(t);
            kernels::axpy(alpha, d_out, row);
            let d_score = alpha * (d_alpha[t] - mean);
            if d_score == 0.0 {
                continue;
            }
            let u = &cache.projected[t];
            kernels::axpy(d_score, u, grads.v_a.data_mut());
            let dz: Vec<f64> = u
                .iter()
                .zip(self.v_a.data())
                .map(|(u, v)| d_score * v * (1.0 - u * u))
                .collect();
            kernels::outer_acc(grads.w_a.data_mut(), &dz, states.row(t));
            kernels::matvec_t_acc(self.w_a.data(), d, &dz, row);
        }
        d_states
    }
}

/// Attention-weighted sum of `states: [T × D]`.
pub fn attend(params: &AttentionParams, states: &Tensor) -> Result<Tensor> {
    Ok(Tensor::vector(params.forward(states)?.0))
}
