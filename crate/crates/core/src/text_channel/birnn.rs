use crate::error::{Error, Result};
use crate::nn::{apply_dropout, apply_mask, join, Params};
use crate::rng::Rng;
use crate::tensor::{kernels, Tensor};

use super::RecurrentCell;

/// One bidirectional layer with independent forward and backward cells.
#[derive(Clone, Debug, PartialEq)]
pub struct BiLayer<C> {
    pub forward: C,
    pub backward: C,
}

impl<C: Params> Params for BiLayer<C> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.forward.visit(&join(prefix, "fwd"), f);
        self.backward.visit(&join(prefix, "bwd"), f);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Tensor)) {
        self.forward.visit_mut(f);
        self.backward.visit_mut(f);
    }
}

pub struct BiCache<C: RecurrentCell> {
    steps: usize,
    forward: Vec<C::Cache>,
    backward: Vec<C::Cache>,
}

/// Runs `cell` over `inputs` rows; returns hidden states indexed by original
/// position together with caches in processing order.
fn run_direction<C: RecurrentCell>(
    cell: &C,
    inputs: &Tensor,
    reverse: bool,
) -> (Vec<Vec<f64>>, Vec<C::Cache>) {
    let steps = inputs.rows();
    let mut hidden = vec![Vec::new(); steps];
    let mut caches = Vec::with_capacity(steps);
    let mut state = cell.zero_state();
    for s in 0..steps {
        let pos = if reverse { steps - 1 - s } else { s };
        let (next, cache) = cell.step(&state, inputs.row(pos));
        hidden[pos] = next.h.clone();
        caches.push(cache);
        state = next;
    }
    (hidden, caches)
}

/// Backpropagation through time for one direction. `d_hidden(pos)` gives the
/// gradient arriving at the hidden output for original position `pos`.
fn backprop_direction<C: RecurrentCell>(
    cell: &C,
    caches: &[C::Cache],
    reverse: bool,
    d_hidden: impl Fn(usize) -> Vec<f64>,
    grads: &mut C,
    d_inputs: &mut Tensor,
) {
    let steps = caches.len();
    let mut d_state = cell.zero_state();
    for s in (0..steps).rev() {
        let pos = if reverse { steps - 1 - s } else { s };
        kernels::axpy(1.0, &d_hidden(pos), &mut d_state.h);
        let (d_prev, dx) = cell.step_backward(&caches[s], &d_state, grads);
        kernels::axpy(1.0, &dx, d_inputs.row_mut(pos));
        d_state = d_prev;
    }
}

impl<C: RecurrentCell> BiLayer<C> {
    pub fn hidden_size(&self) -> usize {
        self.forward.hidden_size()
    }

    pub fn input_size(&self) -> usize {
        self.forward.input_size()
    }

    /// Returns `[T × 2h]`: row `t` is the forward state at `t` followed by the
    /// backward state at `t`.
    pub fn forward(&self, inputs: &Tensor) -> Result<(Tensor, BiCache<C>)> {
        if inputs.rank() != 2 || inputs.rows() == 0 {
            return Err(Error::EmptyInput("bidirectional layer"));
        }
        if inputs.cols() != self.input_size() || self.backward.input_size() != self.input_size() {
            return Err(Error::shape(
                "bidirectional layer",
                &[self.input_size()],
                inputs.shape(),
            ));
        }
        let steps = inputs.rows();
        let (fwd_h, fwd_cache) = run_direction(&self.forward, inputs, false);
        let (bwd_h, bwd_cache) = run_direction(&self.backward, inputs, true);
        let width = self.forward.hidden_size() + self.backward.hidden_size();
        let mut data = Vec::with_capacity(steps * width);
        for t in 0..steps {
            data.extend_from_slice(&fwd_h[t]);
            data.extend_from_slice(&bwd_h[t]);
        }
        let out = Tensor::matrix(steps, width, data)?;
        Ok((
            out,
            BiCache {
                steps,
                forward: fwd_cache,
                backward: bwd_cache,
            },
        ))
    }

    /// Accumulates into `grads`; returns the gradient w.r.t. the inputs.
    pub fn backward(&self, cache: &BiCache<C>, d_out: &Tensor, grads: &mut Self) -> Tensor {
        let hf = self.forward.hidden_size();
        let mut d_inputs = Tensor::zeros(&[cache.steps, self.input_size()]);
        backprop_direction(
            &self.forward,
            &cache.forward,
            false,
            |pos| d_out.row(pos)[..hf].to_vec(),
            &mut grads.forward,
            &mut d_inputs,
        );
        backprop_direction(
            &self.backward,
            &cache.backward,
            true,
            |pos| d_out.row(pos)[hf..].to_vec(),
            &mut grads.backward,
            &mut d_inputs,
        );
        d_inputs
    }
}

/// Runs the same cell in both directions over `inputs: [T × d]`.
pub fn run_bidirectional<C: RecurrentCell>(cell: &C, inputs: &Tensor) -> Result<Tensor> {
    run_bidirectional_pair(cell, cell, inputs)
}

/// Bidirectional run with separate forward and backward cells.
pub fn run_bidirectional_pair<C: RecurrentCell>(
    forward: &C,
    backward: &C,
    inputs: &Tensor,
) -> Result<Tensor> {
    let layer = BiLayer {
        forward: forward.clone(),
        backward: backward.clone(),
    };
    Ok(layer.forward(inputs)?.0)
}

/// Bidirectional layers stacked so each consumes the previous one's full
/// output sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct StackedBiRnn<C> {
    pub layers: Vec<BiLayer<C>>,
}

impl<C: Params> Params for StackedBiRnn<C> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.layers.visit(prefix, f);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Tensor)) {
        self.layers.visit_mut(f);
    }
}

pub struct StackCache<C: RecurrentCell> {
    layers: Vec<BiCache<C>>,
    masks: Vec<Option<Vec<f64>>>,
}

impl<C: RecurrentCell> StackedBiRnn<C> {
    /// Builds layers of the given hidden sizes; the first consumes `input`.
    pub fn new(
        input: usize,
        sizes: &[usize],
        mut make: impl FnMut(usize, usize) -> C,
    ) -> Self {
        let mut layers = Vec::with_capacity(sizes.len());
        let mut width = input;
        for &h in sizes {
            let forward = make(width, h);
            let backward = make(width, h);
            layers.push(BiLayer { forward, backward });
            width = 2 * h;
        }
        StackedBiRnn { layers }
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| 2 * l.hidden_size())
    }

    /// Full output sequence of the top layer. With `rng` set, dropout at
    /// `rate` is applied to every intermediate layer's output.
    pub fn forward(
        &self,
        inputs: &Tensor,
        rate: f64,
        mut rng: Option<&mut Rng>,
    ) -> Result<(Tensor, StackCache<C>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut masks = Vec::with_capacity(self.layers.len());
        let mut current = inputs.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (mut out, cache) = layer.forward(&current)?;
            let mask = if i + 1 < self.layers.len() {
                apply_dropout(out.data_mut(), rate, rng.as_deref_mut())
            } else {
                None
            };
            caches.push(cache);
            masks.push(mask);
            current = out;
        }
        Ok((
            current,
            StackCache {
                layers: caches,
                masks,
            },
        ))
    }

    pub fn backward(&self, cache: &StackCache<C>, d_top: &Tensor, grads: &mut Self) -> Tensor {
        let mut d = d_top.clone();
        for i in (0..self.layers.len()).rev() {
            apply_mask(d.data_mut(), cache.masks[i].as_ref());
            d = self.layers[i].backward(&cache.layers[i], &d, &mut grads.layers[i]);
        }
        d
    }
}

#[cfg(test)]
mod tests {
    use super::super::{GruCell, LstmCell};
    use super::*;
    use crate::tensor::init_uniform;

    fn reverse_rows(t: &Tensor) -> Tensor {
        let rows: Vec<Vec<f64>> = (0..t.rows()).rev().map(|r| t.row(r).to_vec()).collect();
        Tensor::from_rows(&rows).unwrap()
    }

    fn swap_halves(t: &Tensor) -> Tensor {
        let h = t.cols() / 2;
        let rows: Vec<Vec<f64>> = (0..t.rows())
            .map(|r| {
                let row = t.row(r);
                [&row[h..], &row[..h]].concat()
            })
            .collect();
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn single_step_uses_same_input_both_ways() {
        let mut rng = Rng::new(1);
        let cell = LstmCell::new(3, 2, &mut rng);
        let x = init_uniform(&mut rng, &[1, 3], 1.0).unwrap();
        let out = run_bidirectional(&cell, &x).unwrap();
        assert_eq!(out.shape(), &[1, 4]);
        assert_eq!(out.row(0)[..2], out.row(0)[2..]);
    }

    #[test]
    fn reversal_swaps_and_reverses_halves() {
        let mut rng = Rng::new(2);
        let lstm = LstmCell::new(3, 4, &mut rng);
        let gru = GruCell::new(3, 4, &mut rng);
        let x = init_uniform(&mut rng, &[6, 3], 1.0).unwrap();
        let rx = reverse_rows(&x);
        let a = run_bidirectional(&lstm, &x).unwrap();
        let b = run_bidirectional(&lstm, &rx).unwrap();
        assert_eq!(b, reverse_rows(&swap_halves(&a)));
        let a = run_bidirectional(&gru, &x).unwrap();
        let b = run_bidirectional(&gru, &rx).unwrap();
        assert_eq!(b, reverse_rows(&swap_halves(&a)));
    }

    #[test]
    fn unrolled_scalar_gru_matches_step_by_step() {
        let m = |a: f64, b: f64| Tensor::matrix(1, 2, vec![a, b]).unwrap();
        let v = |x: f64| Tensor::vector(vec![x]);
        let cell = GruCell {
            w_z: m(0.3, 0.6),
            w_r: m(-0.2, 0.5),
            w_h: m(0.8, -0.7),
            b_z: v(0.0),
            b_r: v(0.1),
            b_h: v(-0.05),
        };
        let xs = [0.5, -1.0, 2.0];
        let s = |z: f64| 1.0 / (1.0 + (-z).exp());
        let step = |h: f64, x: f64| {
            let z = s(0.3 * h + 0.6 * x);
            let r = s(-0.2 * h + 0.5 * x + 0.1);
            let ht = (0.8 * r * h - 0.7 * x - 0.05).tanh();
            (1.0 - z) * h + z * ht
        };
        let f1 = step(0.0, xs[0]);
        let f2 = step(f1, xs[1]);
        let f3 = step(f2, xs[2]);
        let b3 = step(0.0, xs[2]);
        let b2 = step(b3, xs[1]);
        let b1 = step(b2, xs[0]);
        let out = run_bidirectional(&cell, &Tensor::matrix(3, 1, xs.to_vec()).unwrap()).unwrap();
        let expected = [f1, b1, f2, b2, f3, b3];
        for (g, e) in out.data().iter().zip(expected) {
            assert!((g - e).abs() <= 1e-12);
        }
    }

    #[test]
    fn empty_sequence_rejected() {
        let cell = LstmCell::zeros(2, 2);
        let err = run_bidirectional(&cell, &Tensor::zeros(&[0, 2])).unwrap_err();
        assert!(matches!(err, Error::EmptyInput(_)));
    }

    #[test]
    fn stack_widths() {
        let mut rng = Rng::new(3);
        let stack = StackedBiRnn::new(5, &[6, 6, 4], |i, h| LstmCell::new(i, h, &mut rng));
        assert_eq!(stack.output_width(), 8);
        assert_eq!(stack.layers[1].input_size(), 12);
        assert_eq!(stack.layers[2].hidden_size(), 4);
        let x = Tensor::zeros(&[7, 5]);
        let (out, _) = stack.forward(&x, 0.0, None).unwrap();
        assert_eq!(out.shape(), &[7, 8]);
    }
}
