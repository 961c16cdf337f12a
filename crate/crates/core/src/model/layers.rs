//! Dense, convolution and pooling kernels on flat row-major buffers.

use serde::{Deserialize, Serialize};

/// `y = W x + b` with `W` stored `[out, in]` row-major.
pub(crate) fn dense_forward(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let inp = x.len();
    b.iter()
        .enumerate()
        .map(|(o, &bias)| {
            let row = &w[o * inp..(o + 1) * inp];
            bias + row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>()
        })
        .collect()
}

/// Accumulates parameter gradients and returns `dL/dx` when `want_input` is set.
pub(crate) fn dense_backward(
    w: &[f64],
    x: &[f64],
    gy: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    want_input: bool,
) -> Option<Vec<f64>> {
    let inp = x.len();
    for (o, &g) in gy.iter().enumerate() {
        gb[o] += g;
        let grow = &mut gw[o * inp..(o + 1) * inp];
        for (gwi, &xi) in grow.iter_mut().zip(x) {
            *gwi += g * xi;
        }
    }
    want_input.then(|| {
        let mut gx = vec![0.0; inp];
        for (o, &g) in gy.iter().enumerate() {
            let row = &w[o * inp..(o + 1) * inp];
            for (gxi, &wi) in gx.iter_mut().zip(row) {
                *gxi += g * wi;
            }
        }
        gx
    })
}

/// Shape of a square-kernel, zero-padded 2D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_height: usize,
    pub in_width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.in_height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.in_width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_positions(&self) -> usize {
        self.out_height() * self.out_width()
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.kernel_volume()
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.in_height * self.in_width
    }

    pub fn output_len(&self) -> usize {
        self.out_channels * self.out_positions()
    }

    /// Multiply-adds for one forward pass.
    pub fn mul_adds(&self) -> usize {
        self.out_positions() * self.kernel_volume() * self.out_channels
    }

    /// Input index for output position (oy, ox) and kernel tap (ky, kx), if
    /// the tap lands inside the image.
    #[inline]
    fn tap(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ky).checked_sub(self.padding)?;
        let ix = (ox * self.stride + kx).checked_sub(self.padding)?;
        (iy < self.in_height && ix < self.in_width).then_some((iy, ix))
    }
}

/// Weights are `[out_c, in_c, k, k]`; activations are channel-major `[c, h, w]`.
pub(crate) fn conv_forward(g: &ConvGeometry, w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let (oh, ow, k) = (g.out_height(), g.out_width(), g.kernel);
    let plane = g.in_height * g.in_width;
    let mut y = vec![0.0; g.output_len()];
    for oc in 0..g.out_channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b[oc];
                for ic in 0..g.in_channels {
                    for ky in 0..k {
                        for kx in 0..k {
                            if let Some((iy, ix)) = g.tap(oy, ox, ky, kx) {
                                let wi = ((oc * g.in_channels + ic) * k + ky) * k + kx;
                                acc += w[wi] * x[ic * plane + iy * g.in_width + ix];
                            }
                        }
                    }
                }
                y[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
    y
}

pub(crate) fn conv_backward(
    g: &ConvGeometry,
    w: &[f64],
    x: &[f64],
    gy: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    want_input: bool,
) -> Option<Vec<f64>> {
    let (oh, ow, k) = (g.out_height(), g.out_width(), g.kernel);
    let plane = g.in_height * g.in_width;
    let mut gx = want_input.then(|| vec![0.0; g.input_len()]);
    for oc in 0..g.out_channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let go = gy[(oc * oh + oy) * ow + ox];
                gb[oc] += go;
                for ic in 0..g.in_channels {
                    for ky in 0..k {
                        for kx in 0..k {
                            if let Some((iy, ix)) = g.tap(oy, ox, ky, kx) {
                                let wi = ((oc * g.in_channels + ic) * k + ky) * k + kx;
                                let xi = ic * plane + iy * g.in_width + ix;
                                gw[wi] += go * x[xi];
                                if let Some(gx) = gx.as_mut() {
                                    gx[xi] += go * w[wi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Mean over spatial positions of each channel.
pub(crate) fn avg_pool(channels: usize, positions: usize, x: &[f64]) -> Vec<f64> {
    (0..channels)
        .map(|c| x[c * positions..(c + 1) * positions].iter().sum::<f64>() / positions as f64)
        .collect()
}

pub(crate) fn avg_pool_backward(channels: usize, positions: usize, g: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; channels * positions];
    for c in 0..channels {
        let v = g[c] / positions as f64;
        out[c * positions..(c + 1) * positions].fill(v);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_matches_hand_product() {
        let w = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let y = dense_forward(&w, &[0.5, -1.0], &[1.0, 0.0, -1.0]);
        assert_eq!(y, vec![1.0 - 3.0 + 0.5, 4.0 - 6.0 - 1.0]);
    }

    #[test]
    fn conv_identity_kernel_copies_input() {
        let g = ConvGeometry {
            in_channels: 1,
            in_height: 3,
            in_width: 3,
            out_channels: 1,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let x: Vec<f64> = (0..9).map(f64::from).collect();
        assert_eq!(conv_forward(&g, &w, &[0.0], &x), x);
        assert_eq!(g.mul_adds(), 9 * 9);
    }

    #[test]
    fn strided_conv_geometry() {
        let g = ConvGeometry {
            in_channels: 2,
            in_height: 8,
            in_width: 8,
            out_channels: 4,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        assert_eq!((g.out_height(), g.out_width()), (4, 4));
        assert_eq!(g.mul_adds(), 16 * 18 * 4);
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let g = ConvGeometry {
            in_channels: 2,
            in_height: 4,
            in_width: 5,
            out_channels: 3,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let w: Vec<f64> = (0..g.weight_len())
            .map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0)
            .collect();
        let b = vec![0.1, -0.2, 0.3];
        let x: Vec<f64> = (0..g.input_len()).map(|i| ((i * 13 % 7) as f64 - 3.0) / 5.0).collect();
        let gy: Vec<f64> = (0..g.output_len()).map(|i| ((i * 5 % 9) as f64 - 4.0) / 3.0).collect();
        let loss =
            |w: &[f64], x: &[f64]| -> f64 { conv_forward(&g, w, &b, x).iter().zip(&gy).map(|(a, c)| a * c).sum() };
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; 3];
        let gx = conv_backward(&g, &w, &x, &gy, &mut gw, &mut gb, true).unwrap();
        let eps = 1e-6;
        for i in 0..w.len() {
            let (mut p, mut m) = (w.clone(), w.clone());
            p[i] += eps;
            m[i] -= eps;
            let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * eps);
            assert!((fd - gw[i]).abs() < 1e-8, "w[{i}]: {fd} vs {}", gw[i]);
        }
        for i in 0..x.len() {
            let (mut p, mut m) = (x.clone(), x.clone());
            p[i] += eps;
            m[i] -= eps;
            let fd = (loss(&w, &p) - loss(&w, &m)) / (2.0 * eps);
            assert!((fd - gx[i]).abs() < 1e-8, "x[{i}]: {fd} vs {}", gx[i]);
        }
    }
}
