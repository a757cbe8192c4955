//! Minimal CPU layers for the encoder-decoder: 3x3/1x1 convolution via im2col,
//! ReLU, 2x2 max pooling, nearest 2x upsampling and channel softmax.
//! Activations are channel-planar `f64` buffers.

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Act {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Act {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` with explicit strides; `a` is `m x k`, `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!(c.len() >= m * n);
    // SAFETY: the asserted bounds keep every strided access inside the slices,
    // and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub offset: usize,
}

impl Conv {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.kernel * self.kernel
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + self.cout
    }

    pub fn fan_in(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    fn rows(&self) -> usize {
        self.fan_in()
    }

    fn im2col(&self, x: &Act) -> Vec<f64> {
        if self.kernel == 1 {
            return x.data.clone();
        }
        let (h, w) = (x.h, x.w);
        let hw = h * w;
        let mut col = vec![0.0; self.rows() * hw];
        for ci in 0..self.cin {
            let plane = &x.data[ci * hw..(ci + 1) * hw];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &mut col[((ci * 3 + ky) * 3 + kx) * hw..][..hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src = &plane[sy as usize * w..][..w];
                        let dst = &mut row[y * w..][..w];
                        match kx {
                            0 => dst[1..].copy_from_slice(&src[..w - 1]),
                            1 => dst.copy_from_slice(src),
                            _ => dst[..w - 1].copy_from_slice(&src[1..]),
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[f64], h: usize, w: usize) -> Act {
        if self.kernel == 1 {
            return Act {
                c: self.cin,
                h,
                w,
                data: col.to_vec(),
            };
        }
        let hw = h * w;
        let mut out = Act::zeros(self.cin, h, w);
        for ci in 0..self.cin {
            let plane = &mut out.data[ci * hw..(ci + 1) * hw];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &col[((ci * 3 + ky) * 3 + kx) * hw..][..hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[sy as usize * w..][..w];
                        let src = &row[y * w..][..w];
                        match kx {
                            0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += s),
                            1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                            _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += s),
                        }
                    }
                }
            }
        }
        out
    }

    /// Returns the output and the im2col buffer needed by `backward`.
    pub fn forward(&self, params: &[f64], x: &Act) -> (Act, Vec<f64>) {
        debug_assert_eq!(x.c, self.cin);
        let hw = x.hw();
        let col = self.im2col(x);
        let weights = &params[self.offset..self.offset + self.weight_len()];
        let bias = &params[self.offset + self.weight_len()..self.offset + self.param_len()];
        let mut out = Act::zeros(self.cout, x.h, x.w);
        for (co, b) in bias.iter().enumerate() {
            out.data[co * hw..(co + 1) * hw].fill(*b);
        }
        let r = self.rows();
        gemm(self.cout, r, hw, weights, (r, 1), &col, (hw, 1), 1.0, &mut out.data);
        (out, col)
    }

    /// Accumulates parameter gradients into `grads` and returns the input gradient.
    pub fn backward(&self, params: &[f64], grads: &mut [f64], col: &[f64], dy: &Act) -> Act {
        let hw = dy.hw();
        let r = self.rows();
        let wl = self.weight_len();
        let (gw, gb) = grads[self.offset..self.offset + self.param_len()].split_at_mut(wl);
        gemm(self.cout, hw, r, &dy.data, (hw, 1), col, (1, hw), 1.0, gw);
        for (co, g) in gb.iter_mut().enumerate() {
            *g += dy.data[co * hw..(co + 1) * hw].iter().sum::<f64>();
        }
        let weights = &params[self.offset..self.offset + wl];
        let mut dcol = vec![0.0; r * hw];
        gemm(r, self.cout, hw, weights, (1, r), &dy.data, (hw, 1), 0.0, &mut dcol);
        self.col2im(&dcol, dy.h, dy.w)
    }
}

/// Negative-side slope; keeps narrow layers from dying during training.
pub(crate) const LEAK: f64 = 0.01;

pub(crate) fn relu_inplace(x: &mut Act) {
    x.data.iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v *= LEAK;
        }
    });
}

/// Scales `dy` where the post-activation output is on the negative side.
pub(crate) fn relu_backward(out: &Act, dy: &mut Act) {
    dy.data
        .iter_mut()
        .zip(&out.data)
        .for_each(|(d, y)| if *y < 0.0 { *d *= LEAK });
}

/// 2x2 max pooling; also returns the flat argmax index of every output cell.
pub(crate) fn maxpool2(x: &Act) -> (Act, Vec<u32>) {
    let (h2, w2) = (x.h / 2, x.w / 2);
    let mut out = Act::zeros(x.c, h2, w2);
    let mut arg = vec![0u32; x.c * h2 * w2];
    for c in 0..x.c {
        for y in 0..h2 {
            for xx in 0..w2 {
                let mut best_i = (c * x.h + 2 * y) * x.w + 2 * xx;
                let mut best = x.data[best_i];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = (c * x.h + 2 * y + dy) * x.w + 2 * xx + dx;
                    if x.data[i] > best {
                        best = x.data[i];
                        best_i = i;
                    }
                }
                let o = (c * h2 + y) * w2 + xx;
                out.data[o] = best;
                arg[o] = best_i as u32;
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool2_backward(dy: &Act, arg: &[u32], into: &mut Act) {
    for (d, i) in dy.data.iter().zip(arg) {
        into.data[*i as usize] += d;
    }
}

pub(crate) fn upsample2(x: &Act) -> Act {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = Act::zeros(x.c, h, w);
    for c in 0..x.c {
        for y in 0..h {
            for xx in 0..w {
                out.data[(c * h + y) * w + xx] = x.data[(c * x.h + y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward(dy: &Act) -> Act {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut out = Act::zeros(dy.c, h, w);
    for c in 0..dy.c {
        for y in 0..dy.h {
            for x in 0..dy.w {
                out.data[(c * h + y / 2) * w + x / 2] += dy.data[(c * dy.h + y) * dy.w + x];
            }
        }
    }
    out
}

pub(crate) fn concat(a: Act, b: &Act) -> Act {
    debug_assert!(a.h == b.h && a.w == b.w);
    let mut data = a.data;
    data.extend_from_slice(&b.data);
    Act {
        c: a.c + b.c,
        h: a.h,
        w: a.w,
        data,
    }
}

pub(crate) fn split_channels(x: Act, first: usize) -> (Act, Act) {
    let hw = x.hw();
    let mut data = x.data;
    let rest = data.split_off(first * hw);
    (
        Act {
            c: first,
            h: x.h,
            w: x.w,
            data,
        },
        Act {
            c: x.c - first,
            h: x.h,
            w: x.w,
            data: rest,
        },
    )
}

/// Channel softmax; output is pixel-major (`pixel * k + class`).
pub(crate) fn softmax_pixels(logits: &Act) -> Vec<f64> {
    let (k, hw) = (logits.c, logits.hw());
    let mut out = vec![0.0; k * hw];
    for p in 0..hw {
        let row = &mut out[p * k..(p + 1) * k];
        let mut max = f64::NEG_INFINITY;
        for c in 0..k {
            max = max.max(logits.data[c * hw + p]);
        }
        let mut sum = 0.0;
        for (c, r) in row.iter_mut().enumerate() {
            *r = (logits.data[c * hw + p] - max).exp();
            sum += *r;
        }
        row.iter_mut().for_each(|r| *r /= sum);
    }
    out
}

/// Pulls a gradient w.r.t. pixel-major probabilities back to channel-planar logits.
pub(crate) fn softmax_backward(probs: &[f64], dprobs: &[f64], k: usize, h: usize, w: usize) -> Act {
    let hw = h * w;
    let mut out = Act::zeros(k, h, w);
    for p in 0..hw {
        let pr = &probs[p * k..(p + 1) * k];
        let g = &dprobs[p * k..(p + 1) * k];
        let dot: f64 = pr.iter().zip(g).map(|(a, b)| a * b).sum();
        for c in 0..k {
            out.data[c * hw + p] = pr[c] * (g[c] - dot);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv3(x: &Act, w: &[f64], b: &[f64], cout: usize) -> Act {
        let mut out = Act::zeros(cout, x.h, x.w);
        for co in 0..cout {
            for y in 0..x.h as isize {
                for xx in 0..x.w as isize {
                    let mut acc = b[co];
                    for ci in 0..x.c {
                        for ky in -1..=1isize {
                            for kx in -1..=1isize {
                                let (sy, sx) = (y + ky, xx + kx);
                                if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                    continue;
                                }
                                let wi = ((co * x.c + ci) * 3 + (ky + 1) as usize) * 3 + (kx + 1) as usize;
                                acc += w[wi] * x.data[(ci * x.h + sy as usize) * x.w + sx as usize];
                            }
                        }
                    }
                    out.data[(co * x.h + y as usize) * x.w + xx as usize] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_summation() {
        let conv = Conv {
            cin: 2,
            cout: 3,
            kernel: 3,
            offset: 0,
        };
        let params: Vec<f64> = (0..conv.param_len()).map(|i| ((i * 37 % 17) as f64 - 8.0) / 10.0).collect();
        let x = Act {
            c: 2,
            h: 4,
            w: 5,
            data: (0..40).map(|i| ((i * 13 % 11) as f64) / 11.0).collect(),
        };
        let (y, _) = conv.forward(&params, &x);
        let expect = naive_conv3(&x, &params[..conv.weight_len()], &params[conv.weight_len()..], 3);
        for (a, b) in y.data.iter().zip(&expect.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let conv = Conv {
            cin: 2,
            cout: 1,
            kernel: 3,
            offset: 0,
        };
        let x = Act {
            c: 2,
            h: 3,
            w: 4,
            data: (0..24).map(|i| (i as f64).sin()).collect(),
        };
        let col = conv.im2col(&x);
        let c: Vec<f64> = (0..col.len()).map(|i| (i as f64 * 0.7).cos()).collect();
        let lhs: f64 = col.iter().zip(&c).map(|(a, b)| a * b).sum();
        let back = conv.col2im(&c, 3, 4);
        let rhs: f64 = x.data.iter().zip(&back.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn pooling_and_upsampling_shapes() {
        let x = Act {
            c: 1,
            h: 4,
            w: 4,
            data: (0..16).map(f64::from).collect(),
        };
        let (p, arg) = maxpool2(&x);
        assert_eq!(p.data, vec![5.0, 7.0, 13.0, 15.0]);
        assert_eq!(arg, vec![5, 7, 13, 15]);
        let u = upsample2(&p);
        assert_eq!(u.data[0..4], [5.0, 5.0, 7.0, 7.0]);
        let back = upsample2_backward(&u);
        assert_eq!(back.data, vec![20.0, 28.0, 52.0, 60.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits = Act {
            c: 3,
            h: 1,
            w: 2,
            data: vec![1.0, -2.0, 0.5, 3.0, 200.0, -200.0],
        };
        let p = softmax_pixels(&logits);
        for row in p.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
