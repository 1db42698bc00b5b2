//! Zero-padded 2D convolution via im2col and GEMM.

use matrixmultiply::dgemm;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// C = alpha * A(m×k) * B(k×n) + beta * C, all row-major; `trans_a`/`trans_b`
/// read the stored matrices transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked against the strides used.
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output columns `[lo, hi)` whose input column `ox*stride + kx - pad`
/// falls inside a row of length `width`.
fn valid_span(wo: usize, width: usize, stride: usize, kx: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx).div_ceil(stride).min(wo);
    let hi = (width + pad).saturating_sub(kx).div_ceil(stride).clamp(lo, wo);
    (lo, hi)
}

fn im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let k = g.kernel;
    // every slot is written exactly once, so skip zero-filling the buffer
    let mut cols = Vec::with_capacity(g.patch_len() * ho * wo);
    for c in 0..g.in_channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let (lo, hi) = valid_span(wo, g.width, g.stride, kx, g.pad);
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        cols.resize(cols.len() + wo, 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    cols.resize(cols.len() + lo, 0.0);
                    if hi > lo {
                        let first = lo * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            cols.extend_from_slice(&src[first..first + (hi - lo)]);
                        } else {
                            cols.extend(src[first..].iter().step_by(g.stride).take(hi - lo));
                        }
                    }
                    cols.resize(cols.len() + (wo - hi), 0.0);
                }
            }
        }
    }
    debug_assert_eq!(cols.len(), g.patch_len() * ho * wo);
    cols
}

fn col2im(cols: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let k = g.kernel;
    let mut x = vec![0.0; g.in_channels * g.height * g.width];
    for c in 0..g.in_channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Forward pass. `weight` is `[out, in, k, k]`, `bias` is `[out]`.
pub fn conv2d_forward(x: &[f64], weight: &[f64], bias: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let hw = g.out_height() * g.out_width();
    let mut out = vec![0.0; g.out_channels * hw];
    for (o, b) in bias.iter().enumerate() {
        out[o * hw..(o + 1) * hw].fill(*b);
    }
    if g.is_pointwise() {
        gemm(g.out_channels, g.in_channels, hw, weight, false, x, false, &mut out, 1.0);
    } else {
        let cols = im2col(x, g);
        gemm(g.out_channels, g.patch_len(), hw, weight, false, &cols, false, &mut out, 1.0);
    }
    out
}

pub struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub fn conv2d_backward(
    x: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    g: &ConvGeometry,
    need: [bool; 3],
) -> ConvGrads {
    let hw = g.out_height() * g.out_width();
    let p = g.patch_len();
    let cols_owned;
    let cols: &[f64] = if g.is_pointwise() {
        x
    } else if need[1] {
        cols_owned = im2col(x, g);
        &cols_owned
    } else {
        &[]
    };

    let input = need[0].then(|| {
        let mut dcols = vec![0.0; p * hw];
        gemm(p, g.out_channels, hw, weight, true, grad_out, false, &mut dcols, 0.0);
        if g.is_pointwise() {
            dcols
        } else {
            col2im(&dcols, g)
        }
    });
    let weight = need[1].then(|| {
        let mut dw = vec![0.0; g.out_channels * p];
        gemm(g.out_channels, hw, p, grad_out, false, cols, true, &mut dw, 0.0);
        dw
    });
    let bias = need[2].then(|| {
        grad_out
            .chunks_exact(hw)
            .map(|plane| plane.iter().sum())
            .collect()
    });
    ConvGrads {
        input,
        weight,
        bias,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeometry) -> Vec<f64> {
        let (ho, wo) = (g.out_height(), g.out_width());
        let mut out = vec![0.0; g.out_channels * ho * wo];
        for o in 0..g.out_channels {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[o];
                    for c in 0..g.in_channels {
                        for ky in 0..g.kernel {
                            for kx in 0..g.kernel {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.height as isize || ix >= g.width as isize {
                                    continue;
                                }
                                let wi = ((o * g.in_channels + c) * g.kernel + ky) * g.kernel + kx;
                                acc += w[wi] * x[(c * g.height + iy as usize) * g.width + ix as usize];
                            }
                        }
                    }
                    out[(o * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
            })
            .collect()
    }

    #[test]
    fn matches_direct_convolution() {
        for &(k, s, p) in &[(7, 2, 3), (3, 2, 1), (3, 1, 1), (1, 1, 0), (7, 1, 3), (5, 3, 2), (3, 2, 0)] {
            let g = ConvGeometry {
                in_channels: 3,
                height: 9,
                width: 8,
                out_channels: 2,
                kernel: k,
                stride: s,
                pad: p,
            };
            let x = pseudo(3 * 9 * 8, 1);
            let w = pseudo(2 * 3 * k * k, 2);
            let b = pseudo(2, 3);
            let fast = conv2d_forward(&x, &w, &b, &g);
            let slow = naive(&x, &w, &b, &g);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "k={k} s={s}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x), y> = <x, conv^T(y)> for the bias-free part.
        let g = ConvGeometry {
            in_channels: 2,
            height: 7,
            width: 6,
            out_channels: 3,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let x = pseudo(2 * 7 * 6, 4);
        let w = pseudo(3 * 2 * 9, 5);
        let zero_b = vec![0.0; 3];
        let y = pseudo(3 * g.out_height() * g.out_width(), 6);
        let fx = conv2d_forward(&x, &w, &zero_b, &g);
        let lhs: f64 = fx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let grads = conv2d_backward(&x, &w, &y, &g, [true, true, true]);
        let rhs: f64 = x.iter().zip(grads.input.as_ref().unwrap()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        let rhs_w: f64 = w.iter().zip(grads.weight.as_ref().unwrap()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_w).abs() < 1e-12);
    }
}
