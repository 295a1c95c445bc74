//! Analytic vs central finite-difference gradients.
//!
//! Each layer check builds a small random instance, takes the scalar loss
//! `L = Σ c ⊙ output` for a random projection `c`, and compares the
//! hand-written backward pass against `(L(θ+h) − L(θ−h)) / 2h` for every
//! parameter and every input element.

use crate::fusion::FusionHead;
use crate::image_channel::{maxpool2_backward, maxpool2_with_indices, CnnConfig, CnnExtractor, ConvLayer};
use crate::nn::{Dense, Params};
use crate::rng::Rng;
use crate::tensor::{init_uniform, kernels, softmax_in_place, Tensor};
use crate::text_channel::{AttentionParams, CellState, GruCell, LstmCell, RecurrentCell, StackedBiRnn};

pub const STEP: f64 = 1e-5;
/// Denominator floor so near-zero gradients compare on absolute error.
pub const REL_FLOOR: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub max_rel_error: f64,
    /// Name of the tensor holding the worst element.
    pub worst: String,
    pub checked: usize,
}

impl CheckResult {
    fn merge(self, other: CheckResult) -> CheckResult {
        let checked = self.checked + other.checked;
        let mut best = if other.max_rel_error > self.max_rel_error { other } else { self };
        best.checked = checked;
        best
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `analytic` against central differences of `loss` over every
/// element of `point`. Tensor names are prefixed with `label`.
pub fn compare<P: Params + Clone>(label: &str, point: &P, analytic: &P, loss: impl Fn(&P) -> f64) -> CheckResult {
    let names: Vec<String> = point.named_tensors(label).into_iter().map(|(n, _)| n).collect();
    let grads: Vec<Vec<f64>> = analytic.named_tensors("").into_iter().map(|(_, t)| t.data().to_vec()).collect();
    let mut probe = point.clone();
    let mut result = CheckResult {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    for (ti, name) in names.iter().enumerate() {
        let len = grads[ti].len();
        for e in 0..len {
            let orig = probe.tensors_mut()[ti].data()[e];
            probe.tensors_mut()[ti].data_mut()[e] = orig + STEP;
            let plus = loss(&probe);
            probe.tensors_mut()[ti].data_mut()[e] = orig - STEP;
            let minus = loss(&probe);
            probe.tensors_mut()[ti].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let err = relative_error(grads[ti][e], numeric);
            result.checked += 1;
            if result.worst.is_empty() || err > result.max_rel_error {
                result.max_rel_error = err;
                result.worst = format!("{name}[{e}]");
            }
        }
    }
    result
}

fn projection(rng: &mut Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.uniform(-1.0, 1.0)).collect()
}

fn dims(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
    init_uniform(rng, shape, 1.0).expect("positive scale")
}

pub fn check_dense(seed: u64) -> CheckResult {
    let mut rng = Rng::new(seed);
    let (n_in, n_out) = (dims(&mut rng, 1, 8), dims(&mut rng, 1, 8));
    let layer = Dense::new(n_in, n_out, &mut rng);
    let x = random(&mut rng, &[n_in]);
    let c = projection(&mut rng, n_out);
    let loss = |l: &Dense, x: &Tensor| kernels::dot(&c, &l.forward(x.data()).unwrap());

    let mut grads = layer.zeros_like();
    let dx = Tensor::vector(layer.backward(x.data(), &c, &mut grads));
    compare("dense", &layer, &grads, |l| loss(l, &x)).merge(compare("input", &x, &dx, |x| loss(&layer, x)))
}

fn cell_check<C: RecurrentCell>(label: &str, cell: C, rng: &mut Rng) -> CheckResult {
    let h = cell.hidden_size();
    let with_c = !cell.zero_state().c.is_empty();
    let prev = CellState {
        h: projection(rng, h),
        c: if with_c { projection(rng, h) } else { Vec::new() },
    };
    let x = random(rng, &[cell.input_size()]);
    let ch = projection(rng, h);
    let cc = projection(rng, h);
    let loss = |cell: &C, prev: &CellState, x: &Tensor| {
        let (next, _) = cell.step(prev, x.data());
        kernels::dot(&ch, &next.h) + if with_c { kernels::dot(&cc, &next.c) } else { 0.0 }
    };

    let (_, cache) = cell.step(&prev, x.data());
    let mut grads = cell.zeros_like();
    let d_next = CellState {
        h: ch.clone(),
        c: if with_c { cc.clone() } else { Vec::new() },
    };
    let (d_prev, dx) = cell.step_backward(&cache, &d_next, &mut grads);

    let prev_h = Tensor::vector(prev.h.clone());
    let r = compare(label, &cell, &grads, |p| loss(p, &prev, &x))
        .merge(compare("input", &x, &Tensor::vector(dx), |x| loss(&cell, &prev, x)))
        .merge(compare("h_prev", &prev_h, &Tensor::vector(d_prev.h.clone()), |hp| {
            let s = CellState {
                h: hp.data().to_vec(),
                c: prev.c.clone(),
            };
            loss(&cell, &s, &x)
        }));
    if !with_c {
        return r;
    }
    let prev_c = Tensor::vector(prev.c.clone());
    r.merge(compare("c_prev", &prev_c, &Tensor::vector(d_prev.c), |cp| {
        let s = CellState {
            h: prev.h.clone(),
            c: cp.data().to_vec(),
        };
        loss(&cell, &s, &x)
    }))
}

pub fn check_lstm(seed: u64) -> CheckResult {
    let mut rng = Rng::new(seed);
    let (n_in, h) = (dims(&mut rng, 1, 8), dims(&mut rng, 1, 8));
    let cell = LstmCell::new(n_in, h, &mut rng);
    cell_check("lstm", cell, &mut rng)
}

pub fn check_gru(seed: u64) -> CheckResult {
    let mut rng = Rng::new(seed);
    let (n_in, h) = (dims(&mut rng, 1, 8), dims(&mut rng, 1, 8));
    let cell = GruCell::new(n_in, h, &mut rng);
    cell_check("gru", cell, &mut rng)
}

pub fn check_attention(seed: u64) -> CheckResult {
    let mut rng = Rng::new(seed);
    let (steps, d, a) = (dims(&mut rng, 1, 8), dims(&mut rng, 1, 8), dims(&mut rng, 1, 8));
    let attn = AttentionParams::new(d, a, &mut rng);
    let states = random(&mut rng, &[steps, d]);
    let c = projection(&mut rng, d);
    let loss = |p: &AttentionParams, s: &Tensor| kernels::dot(&c, &p.forward(s).unwrap().0);

    let (_, cache) = attn.forward(&states).unwrap();
    let mut grads = attn.zeros_like();
    let ds = attn.backward(&cache, &states, &c, &mut grads);
    compare("attention", &attn, &grads, |p| loss(p, &states)).merge(compare("states", &states, &ds, |s| loss(&attn, s)))
}

pub fn check_conv(seed: u64) -> CheckResult {
    let mut rng = Rng::new(seed);
    let size = [1, 3, 5][rng.below(3)];
    let (c_in, m) = (dims(&mut rng, 1, 3), dims(&mut rng, 1, 4));
    let (height, width) = (dims(&mut rng, size, 8), dims(&mut rng, size, 8));
    let layer = ConvLayer::new(c_in, m, size, &mut rng).unwrap();
    let x = random(&mut rng, &[height, width, c_in]);
    let c = Tensor::new(vec![height, width, m], projection(&mut rng, height * width * m)).unwrap();
    let loss = |l: &ConvLayer, x: &Tensor| kernels::dot(c.data(), l.forward(x).unwrap().data());

    let out = layer.forward(&x).unwrap();
    let mut grads = layer.zeros_like();
    let dx = layer.backward(&x, &out, &c, &mut grads);
    compare("conv", &layer, &grads, |l| loss(l, &x)).merge(compare("input", &x, &dx, |x| loss(&layer, x)))
}

pub fn check_maxpool(seed: u64) -> CheckResult {
    let mut rng = Rng::new(seed);
    let shape = [dims(&mut rng, 1, 8), dims(&mut rng, 1, 8), dims(&mut rng, 1, 3)];
    let x = random(&mut rng, &shape);
    let (pooled, winners) = maxpool2_with_indices(&x);
    let c = Tensor::new(pooled.shape().to_vec(), projection(&mut rng, pooled.len())).unwrap();
    let dx = maxpool2_backward(&shape, &winners, &c);
    compare("maxpool_input", &x, &dx, |x| kernels::dot(c.data(), maxpool2_with_indices(x).0.data()))
}

/// Head followed by softmax cross-entropy against a random class.
pub fn check_fusion_head(seed: u64) -> CheckResult {
    let mut rng = Rng::new(seed);
    let (nt, ni) = (dims(&mut rng, 1, 4), dims(&mut rng, 1, 4));
    let dense = rng.below(9);
    let classes = dims(&mut rng, 2, 8);
    let head = FusionHead::new(nt + ni, dense, classes, &mut rng);
    let t = random(&mut rng, &[nt]);
    let v = random(&mut rng, &[ni]);
    let target = rng.below(classes);
    let loss = |h: &FusionHead, t: &Tensor, v: &Tensor| {
        let p = h.forward(t.data(), v.data()).unwrap();
        -p[target].ln()
    };

    let (logits, cache) = head.logits(t.data(), v.data()).unwrap();
    let mut d = logits;
    softmax_in_place(&mut d);
    d[target] -= 1.0;
    let mut grads = head.zeros_like();
    let dx = head.backward(&cache, &d, &mut grads);
    let (dt, dv) = dx.split_at(nt);
    compare("fusion", &head, &grads, |h| loss(h, &t, &v))
        .merge(compare("text_feature", &t, &Tensor::vector(dt.to_vec()), |t| loss(&head, t, &v)))
        .merge(compare("image_feature", &v, &Tensor::vector(dv.to_vec()), |v| loss(&head, &t, v)))
}

/// Full bidirectional stack through time, LSTM or GRU chosen by the seed.
pub fn check_birnn(seed: u64) -> CheckResult {
    let mut rng = Rng::new(seed);
    let steps = dims(&mut rng, 1, 5);
    let n_in = dims(&mut rng, 1, 4);
    let sizes = [dims(&mut rng, 1, 4), dims(&mut rng, 1, 4)];
    let x = random(&mut rng, &[steps, n_in]);
    if seed % 2 == 0 {
        let rnn = StackedBiRnn::new(n_in, &sizes, |i, h| LstmCell::new(i, h, &mut rng));
        stack_check("bilstm", rnn, x, &mut rng)
    } else {
        let rnn = StackedBiRnn::new(n_in, &sizes, |i, h| GruCell::new(i, h, &mut rng));
        stack_check("bigru", rnn, x, &mut rng)
    }
}

fn stack_check<C: RecurrentCell>(label: &str, rnn: StackedBiRnn<C>, x: Tensor, rng: &mut Rng) -> CheckResult {
    let (top, cache) = rnn.forward(&x, 0.0, None).unwrap();
    let c = Tensor::new(top.shape().to_vec(), projection(rng, top.len())).unwrap();
    let loss = |r: &StackedBiRnn<C>, x: &Tensor| kernels::dot(c.data(), r.forward(x, 0.0, None).unwrap().0.data());
    let mut grads = rnn.zeros_like();
    let dx = rnn.backward(&cache, &c, &mut grads);
    compare(label, &rnn, &grads, |r| loss(r, &x)).merge(compare("input", &x, &dx, |x| loss(&rnn, x)))
}

/// Small CNN: two convolutions, one pool.
pub fn check_cnn(seed: u64) -> CheckResult {
    let mut rng = Rng::new(seed);
    let cfg = CnnConfig {
        layers: 2 + rng.below(2),
        filters: dims(&mut rng, 1, 3),
        kernel: 3,
        channels: [1, 3][rng.below(2)],
        size: dims(&mut rng, 5, 8),
    };
    let cnn = CnnExtractor::new(&cfg, &mut rng).unwrap();
    let x = random(&mut rng, &[cfg.size, cfg.size, cfg.channels]);
    let c = projection(&mut rng, cfg.feature_dim());
    let loss = |n: &CnnExtractor, x: &Tensor| kernels::dot(&c, &n.forward(x, 0.0, None).unwrap().0);
    let (_, cache) = cnn.forward(&x, 0.0, None).unwrap();
    let mut grads = cnn.zeros_like();
    let dx = cnn.backward(&cache, &c, &mut grads);
    compare("cnn", &cnn, &grads, |n| loss(n, &x)).merge(compare("input", &x, &dx, |x| loss(&cnn, x)))
}

pub type LayerCheck = fn(u64) -> CheckResult;

/// Every layer check by name, in report order.
pub const LAYER_CHECKS: [(&str, LayerCheck); 9] = [
    ("dense", check_dense),
    ("lstm_cell", check_lstm),
    ("gru_cell", check_gru),
    ("attention", check_attention),
    ("conv2d", check_conv),
    ("maxpool2", check_maxpool),
    ("fusion_head", check_fusion_head),
    ("birnn_stack", check_birnn),
    ("cnn_stack", check_cnn),
];

#[derive(Clone, Debug, PartialEq)]
pub struct LayerReport {
    pub layer: &'static str,
    pub seeds: usize,
    pub max_rel_error: f64,
    pub worst: String,
    pub passed: bool,
}

/// Runs every layer check over `seeds` consecutive seeds from `first_seed`.
pub fn gradient_suite(first_seed: u64, seeds: usize) -> Vec<LayerReport> {
    LAYER_CHECKS
        .iter()
        .map(|&(layer, check)| {
            let worst = (0..seeds as u64)
                .map(|s| check(first_seed.wrapping_add(s)))
                .fold(None::<CheckResult>, |acc, r| Some(match acc {
                    None => r,
                    Some(a) => a.merge(r),
                }))
                .expect("at least one seed");
            LayerReport {
                layer,
                seeds,
                max_rel_error: worst.max_rel_error,
                passed: worst.max_rel_error <= TOLERANCE,
                worst: worst.worst,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let wrong = Tensor::vector(vec![2.0, 5.0]);
        let r = compare("x", &x, &wrong, |x| x.data().iter().map(|v| v * v).sum());
        assert!((r.max_rel_error - 0.2).abs() < 1e-6);
        assert_eq!(r.worst, "x[1]");
    }

    #[test]
    fn dense_is_tight() {
        for seed in 0..10 {
            assert!(check_dense(seed).max_rel_error <= 1e-8, "seed {seed}");
        }
    }

    #[test]
    fn cells_and_conv_within_spec() {
        for seed in 0..10 {
            assert!(check_lstm(seed).max_rel_error <= 1e-5, "lstm seed {seed}");
            assert!(check_gru(seed).max_rel_error <= 1e-5, "gru seed {seed}");
            assert!(check_conv(seed).max_rel_error <= 1e-5, "conv seed {seed}");
        }
    }

    #[test]
    fn whole_suite_passes() {
        for report in gradient_suite(100, 10) {
            assert!(report.passed, "{report:?}");
        }
    }
}
