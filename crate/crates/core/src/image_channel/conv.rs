use crate::error::{Error, Result};
use crate::nn::impl_params;
use crate::rng::Rng;
use crate::tensor::{init_uniform, kernels, Tensor};

/// Same-padded 2-D convolution followed by ReLU, over `[H × W × C]` inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    /// `[filters × l × l × in_channels]`
    pub kernels: Tensor,
    pub bias: Tensor,
}

impl_params!(ConvLayer { kernels, bias });

impl ConvLayer {
    pub fn new(in_channels: usize, filters: usize, size: usize, rng: &mut Rng) -> Result<Self> {
        if size % 2 == 0 {
            return Err(Error::Config(format!("filter length must be odd, got {size}")));
        }
        let fan_in = (size * size * in_channels) as f64;
        Ok(ConvLayer {
            kernels: init_uniform(rng, &[filters, size, size, in_channels], 1.0 / fan_in.sqrt())?,
            bias: Tensor::zeros(&[filters]),
        })
    }

    pub fn zeros(in_channels: usize, filters: usize, size: usize) -> Self {
        ConvLayer {
            kernels: Tensor::zeros(&[filters, size, size, in_channels]),
            bias: Tensor::zeros(&[filters]),
        }
    }

    pub fn filters(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn size(&self) -> usize {
        self.kernels.shape()[1]
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.shape()[3]
    }

    fn check(&self, input: &Tensor) -> Result<()> {
        let ks = self.kernels.shape();
        if ks.len() != 4 || ks[1] != ks[2] || ks[1] % 2 == 0 || self.bias.len() != ks[0] {
            return Err(Error::Config(format!(
                "inconsistent conv kernels {:?} / bias {:?}",
                ks,
                self.bias.shape()
            )));
        }
        let s = input.shape();
        if s.len() != 3 || s[2] != ks[3] || s[0] < ks[1] || s[1] < ks[1] {
            return Err(Error::shape("conv2d", ks, s));
        }
        Ok(())
    }

    /// Returns the post-ReLU output `[H × W × filters]`.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.check(input)?;
        let (h, w, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (m, l) = (self.filters(), self.size());
        let pad = l / 2;
        let k = self.kernels.data();
        let x = input.data();
        let mut out = vec![0.0; h * w * m];
        for y in 0..h {
            for xo in 0..w {
                let cell = &mut out[(y * w + xo) * m..(y * w + xo + 1) * m];
                cell.copy_from_slice(self.bias.data());
                for dy in 0..l {
                    let Some(iy) = (y + dy).checked_sub(pad).filter(|&v| v < h) else {
                        continue;
                    };
                    for dx in 0..l {
                        let Some(ix) = (xo + dx).checked_sub(pad).filter(|&v| v < w) else {
                            continue;
                        };
                        let pixel = &x[(iy * w + ix) * c..(iy * w + ix + 1) * c];
                        for (f, o) in cell.iter_mut().enumerate() {
                            let base = ((f * l + dy) * l + dx) * c;
                            *o += kernels::dot(&k[base..base + c], pixel);
                        }
                    }
                }
                cell.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        Tensor::new(vec![h, w, m], out)
    }

    /// Accumulates kernel and bias gradients; returns `dL/dinput`.
    pub fn backward(&self, input: &Tensor, output: &Tensor, d_out: &Tensor, grads: &mut ConvLayer) -> Tensor {
        let (h, w, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (m, l) = (self.filters(), self.size());
        let pad = l / 2;
        let k = self.kernels.data();
        let x = input.data();
        let mut d_in = vec![0.0; x.len()];
        let (gk, gb) = (grads.kernels.data_mut(), grads.bias.data_mut());
        for y in 0..h {
            for xo in 0..w {
                for f in 0..m {
                    let idx = (y * w + xo) * m + f;
                    if output.data()[idx] <= 0.0 {
                        continue;
                    }
                    let g = d_out.data()[idx];
                    if g == 0.0 {
                        continue;
                    }
                    gb[f] += g;
                    for dy in 0..l {
                        let Some(iy) = (y + dy).checked_sub(pad).filter(|&v| v < h) else {
                            continue;
                        };
                        for dx in 0..l {
                            let Some(ix) = (xo + dx).checked_sub(pad).filter(|&v| v < w) else {
                                continue;
                            };
                            let p = (iy * w + ix) * c;
                            let base = ((f * l + dy) * l + dx) * c;
                            kernels::axpy(g, &x[p..p + c], &mut gk[base..base + c]);
                            kernels::axpy(g, &k[base..base + c], &mut d_in[p..p + c]);
                        }
                    }
                }
            }
        }
        Tensor::new(input.shape().to_vec(), d_in).expect("same shape as input")
    }
}

/// Same-padded cross-correlation plus bias, then ReLU.
pub fn conv2d(params: &ConvLayer, input: &Tensor) -> Result<Tensor> {
    params.forward(input)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize, values: Vec<f64>) -> Tensor {
        Tensor::new(vec![h, w, 1], values).unwrap()
    }

    #[test]
    fn center_tap_kernel_is_identity_on_nonnegative_input() {
        let mut layer = ConvLayer::zeros(1, 1, 3);
        layer.kernels.data_mut()[4] = 1.0;
        let x = image(3, 4, (0..12).map(|v| v as f64 / 12.0).collect());
        assert_eq!(conv2d(&layer, &x).unwrap(), x);
    }

    #[test]
    fn zero_kernels_zero_output() {
        let layer = ConvLayer::zeros(3, 5, 3);
        let x = Tensor::full(&[4, 4, 3], 0.7);
        let out = conv2d(&layer, &x).unwrap();
        assert_eq!(out.shape(), &[4, 4, 5]);
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn averaging_kernel_by_hand() {
        let mut layer = ConvLayer::zeros(1, 1, 3);
        layer.kernels.fill(1.0 / 9.0);
        let vals: Vec<f64> = (1..=16).map(f64::from).collect();
        let x = image(4, 4, vals.clone());
        let out = conv2d(&layer, &x).unwrap();
        // zero-padded 3×3 window sums, divided by 9
        let at = |r: i64, c: i64| -> f64 {
            if (0..4).contains(&r) && (0..4).contains(&c) {
                vals[(r * 4 + c) as usize]
            } else {
                0.0
            }
        };
        for r in 0..4i64 {
            for c in 0..4i64 {
                let mut s = 0.0;
                for dr in -1..=1 {
                    for dc in -1..=1 {
                        s += at(r + dr, c + dc);
                    }
                }
                let got = out.data()[(r * 4 + c) as usize];
                assert!((got - s / 9.0).abs() < 1e-12, "({r},{c}) {got} vs {}", s / 9.0);
            }
        }
        // corner: (1+2+5+6)/9
        assert!((out.data()[0] - 14.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn positive_homogeneity_without_bias() {
        let mut rng = Rng::new(3);
        let layer = ConvLayer::new(2, 3, 3, &mut rng).unwrap();
        let x = init_uniform(&mut rng, &[5, 6, 2], 1.0).unwrap();
        for a in [0.0, 0.5, 2.0, 7.25] {
            let lhs = conv2d(&layer, &x.scale(a)).unwrap();
            let rhs = conv2d(&layer, &x).unwrap().scale(a);
            assert!(lhs.max_abs_diff(&rhs) <= 1e-10);
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let layer = ConvLayer::zeros(1, 1, 3);
        assert!(matches!(conv2d(&layer, &image(2, 5, vec![0.0; 10])), Err(Error::Shape { .. })));
        assert!(matches!(conv2d(&layer, &Tensor::zeros(&[4, 4, 2])), Err(Error::Shape { .. })));
        assert!(ConvLayer::new(1, 1, 4, &mut Rng::new(0)).is_err());
    }
}
