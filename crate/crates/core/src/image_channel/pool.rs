use crate::tensor::Tensor;

/// 2×2 stride-2 max pooling over `[H × W × C]`; edge windows may be partial.
///
/// Also returns, for each output element, the flat input index that won. Ties
/// go to the first element in row-major order.
pub fn maxpool2_with_indices(input: &Tensor) -> (Tensor, Vec<usize>) {
    let (h, w, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let x = input.data();
    let mut out = Vec::with_capacity(oh * ow * c);
    let mut winners = Vec::with_capacity(oh * ow * c);
    for y in 0..oh {
        for xo in 0..ow {
            for ch in 0..c {
                let mut best = usize::MAX;
                for iy in 2 * y..(2 * y + 2).min(h) {
                    for ix in 2 * xo..(2 * xo + 2).min(w) {
                        let idx = (iy * w + ix) * c + ch;
                        if best == usize::MAX || x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                winners.push(best);
            }
        }
    }
    (Tensor::new(vec![oh, ow, c], out).expect("pool shape"), winners)
}

pub fn maxpool2(input: &Tensor) -> Tensor {
    maxpool2_with_indices(input).0
}

/// Routes each output gradient to its winning input position.
pub fn maxpool2_backward(input_shape: &[usize], winners: &[usize], d_out: &Tensor) -> Tensor {
    let mut d_in = Tensor::zeros(input_shape);
    for (g, &idx) in d_out.data().iter().zip(winners) {
        d_in.data_mut()[idx] += g;
    }
    d_in
}
