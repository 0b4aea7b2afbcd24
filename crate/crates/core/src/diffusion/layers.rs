//! Planar (channel-major) tensor kernels with explicit backward passes.
//!
//! Every buffer is `[channels][height][width]` for a single sample.

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv {
    pub const fn new(cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        Self {
            cin,
            cout,
            kernel,
            stride,
        }
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.kernel * self.kernel
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.pad();
        (
            (h + 2 * p - self.kernel) / self.stride + 1,
            (w + 2 * p - self.kernel) / self.stride + 1,
        )
    }

    fn patch_rows(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    /// Unfolds `input` into a `[cin*k*k, ho*wo]` patch matrix. 1x1 stride-1
    /// convolutions use the input directly and never call this.
    pub fn im2col<S: Scalar>(&self, input: &[S], h: usize, w: usize) -> Vec<S> {
        let (ho, wo) = self.out_size(h, w);
        let (k, s, p) = (self.kernel, self.stride, self.pad() as isize);
        let mut cols = vec![S::zero(); self.patch_rows() * ho * wo];
        for c in 0..self.cin {
            let plane = &input[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let drow = &mut dst[oy * wo..(oy + 1) * wo];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`Conv::im2col`]: scatters patch gradients back onto the input.
    pub fn col2im<S: Scalar>(&self, cols: &[S], h: usize, w: usize) -> Vec<S> {
        let (ho, wo) = self.out_size(h, w);
        let (k, s, p) = (self.kernel, self.stride, self.pad() as isize);
        let mut out = vec![S::zero(); self.cin * h * w];
        for c in 0..self.cin {
            let plane = &mut out[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let drow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && ix < w as isize {
                                drow[ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    /// Returns the output and the patch matrix the backward pass needs.
    pub fn forward<S: Scalar>(&self, weight: &[S], bias: &[S], input: &[S], h: usize, w: usize) -> (Vec<S>, Vec<S>) {
        let (ho, wo) = self.out_size(h, w);
        let n = ho * wo;
        let cols = if self.is_pointwise() {
            input.to_vec()
        } else {
            self.im2col(input, h, w)
        };
        let mut out = vec![S::zero(); self.cout * n];
        for (o, &b) in bias.iter().enumerate() {
            out[o * n..(o + 1) * n].iter_mut().for_each(|v| *v = b);
        }
        let kk = self.patch_rows();
        S::gemm(self.cout, kk, n, S::one(), weight, (kk as isize, 1), &cols, (n as isize, 1), S::one(), &mut out, (n as isize, 1));
        (out, cols)
    }

    /// Accumulates weight/bias gradients when `grads` is given and returns
    /// the input gradient when `want_input` is set.
    #[allow(clippy::too_many_arguments)]
    pub fn backward<S: Scalar>(
        &self,
        weight: &[S],
        cols: &[S],
        dout: &[S],
        h: usize,
        w: usize,
        grads: Option<(&mut [S], &mut [S])>,
        want_input: bool,
    ) -> Option<Vec<S>> {
        let (ho, wo) = self.out_size(h, w);
        let n = ho * wo;
        let kk = self.patch_rows();
        if let Some((dw, db)) = grads {
            S::gemm(self.cout, n, kk, S::one(), dout, (n as isize, 1), cols, (1, n as isize), S::one(), dw, (kk as isize, 1));
            for (o, g) in db.iter_mut().enumerate() {
                *g += dout[o * n..(o + 1) * n].iter().copied().sum::<S>();
            }
        }
        if !want_input {
            return None;
        }
        let mut dcols = vec![S::zero(); kk * n];
        S::gemm(kk, self.cout, n, S::one(), weight, (1, kk as isize), dout, (n as isize, 1), S::zero(), &mut dcols, (n as isize, 1));
        Some(if self.is_pointwise() {
            dcols
        } else {
            self.col2im(&dcols, h, w)
        })
    }
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

pub fn silu<S: Scalar>(x: S) -> S {
    x * sigmoid(x)
}

pub fn silu_grad<S: Scalar>(x: S) -> S {
    let s = sigmoid(x);
    s * (S::one() + x * (S::one() - s))
}

pub fn silu_vec<S: Scalar>(x: &[S]) -> Vec<S> {
    x.iter().map(|&v| silu(v)).collect()
}

/// `dx = dy * silu'(x)` in place over `dy`.
pub fn silu_backward<S: Scalar>(x: &[S], dy: &mut [S]) {
    for (g, &v) in dy.iter_mut().zip(x) {
        *g *= silu_grad(v);
    }
}

/// Per-channel `x * (1 + scale) + shift`.
pub fn film<S: Scalar>(x: &[S], scale: &[S], shift: &[S], plane: usize) -> Vec<S> {
    let mut out = x.to_vec();
    for (c, chunk) in out.chunks_exact_mut(plane).enumerate() {
        let (a, b) = (S::one() + scale[c], shift[c]);
        chunk.iter_mut().for_each(|v| *v = *v * a + b);
    }
    out
}

/// Backward of [`film`]: returns `dx` and writes `dscale`, `dshift`.
pub fn film_backward<S: Scalar>(
    x: &[S],
    scale: &[S],
    dy: &[S],
    plane: usize,
    dscale: &mut [S],
    dshift: &mut [S],
) -> Vec<S> {
    let mut dx = dy.to_vec();
    for c in 0..scale.len() {
        let r = c * plane..(c + 1) * plane;
        let (mut ds, mut dsh) = (S::zero(), S::zero());
        for (&g, &v) in dy[r.clone()].iter().zip(&x[r.clone()]) {
            ds += g * v;
            dsh += g;
        }
        dscale[c] = ds;
        dshift[c] = dsh;
        let a = S::one() + scale[c];
        dx[r].iter_mut().for_each(|g| *g *= a);
    }
    dx
}

pub fn upsample2<S: Scalar>(x: &[S], c: usize, h: usize, w: usize) -> Vec<S> {
    let (h2, w2) = (h * 2, w * 2);
    let mut out = vec![S::zero(); c * h2 * w2];
    for ch in 0..c {
        for y in 0..h2 {
            for xx in 0..w2 {
                out[(ch * h2 + y) * w2 + xx] = x[(ch * h + y / 2) * w + xx / 2];
            }
        }
    }
    out
}

/// Adjoint of [`upsample2`]; `h`, `w` are the upsampled sizes.
pub fn upsample2_backward<S: Scalar>(dy: &[S], c: usize, h: usize, w: usize) -> Vec<S> {
    let (hs, ws) = (h / 2, w / 2);
    let mut out = vec![S::zero(); c * hs * ws];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ch * hs + y / 2) * ws + x / 2] += dy[(ch * h + y) * w + x];
            }
        }
    }
    out
}

pub fn avgpool2<S: Scalar>(x: &[S], c: usize, h: usize, w: usize) -> Vec<S> {
    let (hs, ws) = (h / 2, w / 2);
    let quarter = S::lit(0.25);
    let mut out = vec![S::zero(); c * hs * ws];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                out[(ch * hs + y / 2) * ws + xx / 2] += x[(ch * h + y) * w + xx] * quarter;
            }
        }
    }
    out
}

/// Adjoint of [`avgpool2`]; `h`, `w` are the full-resolution sizes.
pub fn avgpool2_backward<S: Scalar>(dy: &[S], c: usize, h: usize, w: usize) -> Vec<S> {
    let (hs, ws) = (h / 2, w / 2);
    let quarter = S::lit(0.25);
    let mut out = vec![S::zero(); c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ch * h + y) * w + x] = dy[(ch * hs + y / 2) * ws + x / 2] * quarter;
            }
        }
    }
    out
}

/// `y = W x + b` for a row-major `[out, in]` matrix.
pub fn linear<S: Scalar>(w: &[S], b: &[S], x: &[S]) -> Vec<S> {
    let n_in = x.len();
    b.iter()
        .enumerate()
        .map(|(o, &bias)| bias + w[o * n_in..(o + 1) * n_in].iter().zip(x).map(|(&a, &v)| a * v).sum::<S>())
        .collect()
}

/// Accumulates `dW += dy x^T`, `db += dy` and returns `W^T dy`.
pub fn linear_backward<S: Scalar>(w: &[S], x: &[S], dy: &[S], grads: Option<(&mut [S], &mut [S])>) -> Vec<S> {
    let n_in = x.len();
    if let Some((dw, db)) = grads {
        for (o, &g) in dy.iter().enumerate() {
            db[o] += g;
            for (d, &v) in dw[o * n_in..(o + 1) * n_in].iter_mut().zip(x) {
                *d += g * v;
            }
        }
    }
    let mut dx = vec![S::zero(); n_in];
    for (o, &g) in dy.iter().enumerate() {
        for (d, &a) in dx.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
            *d += g * a;
        }
    }
    dx
}

/// Sinusoidal embedding of a (continuous) timestep.
pub fn timestep_embedding<S: Scalar>(t: f64, dim: usize) -> Vec<S> {
    let half = dim / 2;
    let mut out = vec![S::zero(); dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = S::lit((t * freq).sin());
        out[half + i] = S::lit((t * freq).cos());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(conv: &Conv, wt: &[f64], b: &[f64], x: &[f64], h: usize, w: usize) -> Vec<f64> {
        let (ho, wo) = conv.out_size(h, w);
        let k = conv.kernel as isize;
        let p = (conv.kernel / 2) as isize;
        let mut out = vec![0.0; conv.cout * ho * wo];
        for o in 0..conv.cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[o];
                    for c in 0..conv.cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * conv.stride) as isize + ky - p;
                                let ix = (ox * conv.stride) as isize + kx - p;
                                if iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize {
                                    let wi = ((o * conv.cin + c) * conv.kernel + ky as usize) * conv.kernel + kx as usize;
                                    acc += wt[wi] * x[(c * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                    }
                    out[(o * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    fn seq(n: usize, a: f64) -> Vec<f64> {
        (0..n).map(|i| (i as f64 * a).sin() * 1.3).collect()
    }

    #[test]
    fn conv_matches_direct_sum() {
        for conv in [Conv::new(2, 3, 3, 1), Conv::new(3, 2, 3, 2), Conv::new(4, 5, 1, 1)] {
            let (h, w) = (6, 8);
            let wt = seq(conv.weight_len(), 0.7);
            let b = seq(conv.cout, 1.9);
            let x = seq(conv.cin * h * w, 0.31);
            let (y, _) = conv.forward(&wt, &b, &x, h, w);
            let want = naive_conv(&conv, &wt, &b, &x, h, w);
            for (a, e) in y.iter().zip(&want) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), c> == <x, col2im(c)>
        let conv = Conv::new(2, 1, 3, 2);
        let (h, w) = (6, 6);
        let x = seq(2 * h * w, 0.37);
        let cols = conv.im2col(&x, h, w);
        let c = seq(cols.len(), 0.53);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let back = conv.col2im(&c, h, w);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn pooling_and_upsampling_are_adjoint() {
        let (c, h, w) = (2, 4, 6);
        let x = seq(c * h * w, 0.3);
        let y = seq(c * h * w / 4, 0.8);
        let lhs: f64 = avgpool2(&x, c, h, w).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(avgpool2_backward(&y, c, h, w)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        let lhs: f64 = upsample2(&y, c, h / 2, w / 2).iter().zip(&x).map(|(a, b)| a * b).sum();
        let rhs: f64 = y.iter().zip(upsample2_backward(&x, c, h, w)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn silu_derivative_matches_difference() {
        for x in [-3.0, -0.5, 0.0, 0.7, 4.0f64] {
            let h = 1e-6;
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((fd - silu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn timestep_embedding_shape() {
        let e: Vec<f64> = timestep_embedding(0.0, 32);
        assert_eq!(e.len(), 32);
        assert!(e[..16].iter().all(|&v| v == 0.0));
        assert!(e[16..].iter().all(|&v| v == 1.0));
    }
}
