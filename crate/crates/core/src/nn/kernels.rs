//! Raw numeric kernels over flat `[C, H, W]` buffers.
//!
//! Convolutions are stride 1 with zero "same" padding and an odd square kernel
//! of side `k`; weights are laid out `[out, in, k, k]`.

/// Valid output range along one axis for kernel offset `d`.
#[inline]
fn span(len: usize, d: isize) -> (usize, usize) {
    let lo = if d < 0 { (-d) as usize } else { 0 };
    let hi = if d > 0 { len.saturating_sub(d as usize) } else { len };
    (lo, hi.max(lo))
}

pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvGeom {
    fn offsets(&self) -> impl Iterator<Item = (usize, isize, isize)> + '_ {
        let r = (self.k / 2) as isize;
        (0..self.k * self.k).map(move |t| {
            let ky = (t / self.k) as isize;
            let kx = (t % self.k) as isize;
            (t, ky - r, kx - r)
        })
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let plane = g.h * g.w;
    let kk = g.k * g.k;
    let mut y = vec![0.0; g.c_out * plane];
    for o in 0..g.c_out {
        let out = &mut y[o * plane..(o + 1) * plane];
        out.fill(bias[o]);
        for c in 0..g.c_in {
            let xin = &x[c * plane..(c + 1) * plane];
            let wk = &weight[(o * g.c_in + c) * kk..(o * g.c_in + c + 1) * kk];
            for (t, dy, dx) in g.offsets() {
                let wv = wk[t];
                if wv == 0.0 {
                    continue;
                }
                let (y0, y1) = span(g.h, dy);
                let (x0, x1) = span(g.w, dx);
                for row in y0..y1 {
                    let src = ((row as isize + dy) as usize) * g.w;
                    let orow = &mut out[row * g.w + x0..row * g.w + x1];
                    let irow = &xin[(src as isize + x0 as isize + dx) as usize
                        ..(src as isize + x1 as isize + dx) as usize];
                    for (o, i) in orow.iter_mut().zip(irow) {
                        *o += wv * i;
                    }
                }
            }
        }
    }
    y
}

/// Transposed convolution: gradient of the convolution w.r.t. its input.
pub(crate) fn conv2d_backward_input(g: &ConvGeom, gy: &[f64], weight: &[f64]) -> Vec<f64> {
    let plane = g.h * g.w;
    let kk = g.k * g.k;
    let mut gx = vec![0.0; g.c_in * plane];
    for o in 0..g.c_out {
        let gout = &gy[o * plane..(o + 1) * plane];
        for c in 0..g.c_in {
            let gin = &mut gx[c * plane..(c + 1) * plane];
            let wk = &weight[(o * g.c_in + c) * kk..(o * g.c_in + c + 1) * kk];
            for (t, dy, dx) in g.offsets() {
                let wv = wk[t];
                if wv == 0.0 {
                    continue;
                }
                let (y0, y1) = span(g.h, dy);
                let (x0, x1) = span(g.w, dx);
                for row in y0..y1 {
                    let dst = ((row as isize + dy) as usize) * g.w;
                    let grow = &gout[row * g.w + x0..row * g.w + x1];
                    let irow = &mut gin[(dst as isize + x0 as isize + dx) as usize
                        ..(dst as isize + x1 as isize + dx) as usize];
                    for (i, gv) in irow.iter_mut().zip(grow) {
                        *i += wv * gv;
                    }
                }
            }
        }
    }
    gx
}

/// Weight and bias gradients of the convolution.
pub(crate) fn conv2d_backward_params(g: &ConvGeom, x: &[f64], gy: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let plane = g.h * g.w;
    let kk = g.k * g.k;
    let mut gw = vec![0.0; g.c_out * g.c_in * kk];
    let mut gb = vec![0.0; g.c_out];
    for o in 0..g.c_out {
        let gout = &gy[o * plane..(o + 1) * plane];
        gb[o] = gout.iter().sum();
        for c in 0..g.c_in {
            let xin = &x[c * plane..(c + 1) * plane];
            let base = (o * g.c_in + c) * kk;
            for (t, dy, dx) in g.offsets() {
                let (y0, y1) = span(g.h, dy);
                let (x0, x1) = span(g.w, dx);
                let mut acc = 0.0;
                for row in y0..y1 {
                    let src = ((row as isize + dy) as usize) * g.w;
                    let grow = &gout[row * g.w + x0..row * g.w + x1];
                    let irow = &xin[(src as isize + x0 as isize + dx) as usize
                        ..(src as isize + x1 as isize + dx) as usize];
                    acc += grow.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
                }
                gw[base + t] = acc;
            }
        }
    }
    (gw, gb)
}

/// 2x2 stride-2 max pooling. Returns the pooled values and, for every output
/// cell, the flat input index of its maximum (first occurrence wins ties).
pub(crate) fn maxpool_forward(c: usize, h: usize, w: usize, x: &[f64]) -> (Vec<f64>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Vec::with_capacity(c * oh * ow);
    let mut switches = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for r in 0..oh {
            for col in 0..ow {
                let mut best = base + 2 * r * w + 2 * col;
                for idx in [
                    base + 2 * r * w + 2 * col + 1,
                    base + (2 * r + 1) * w + 2 * col,
                    base + (2 * r + 1) * w + 2 * col + 1,
                ] {
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                y.push(x[best]);
                switches.push(best as u32);
            }
        }
    }
    (y, switches)
}

pub(crate) fn maxpool_backward(input_len: usize, switches: &[u32], gy: &[f64]) -> Vec<f64> {
    let mut gx = vec![0.0; input_len];
    for (&s, &g) in switches.iter().zip(gy) {
        gx[s as usize] += g;
    }
    gx
}

pub(crate) fn dense_forward(inputs: usize, outputs: usize, x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    (0..outputs)
        .map(|o| {
            let row = &weight[o * inputs..(o + 1) * inputs];
            bias[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect()
}

pub(crate) fn dense_backward_input(inputs: usize, outputs: usize, gy: &[f64], weight: &[f64]) -> Vec<f64> {
    let mut gx = vec![0.0; inputs];
    for o in 0..outputs {
        let g = gy[o];
        if g == 0.0 {
            continue;
        }
        let row = &weight[o * inputs..(o + 1) * inputs];
        for (d, w) in gx.iter_mut().zip(row) {
            *d += g * w;
        }
    }
    gx
}

pub(crate) fn dense_backward_params(inputs: usize, outputs: usize, x: &[f64], gy: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut gw = vec![0.0; inputs * outputs];
    for o in 0..outputs {
        let g = gy[o];
        for (d, xv) in gw[o * inputs..(o + 1) * inputs].iter_mut().zip(x) {
            *d = g * xv;
        }
    }
    (gw, gy.to_vec())
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Padded direct convolution, written independently of the span logic.
    fn naive_conv(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let r = (g.k / 2) as isize;
        let mut y = vec![0.0; g.c_out * g.h * g.w];
        for o in 0..g.c_out {
            for i in 0..g.h as isize {
                for j in 0..g.w as isize {
                    let mut acc = b[o];
                    for c in 0..g.c_in {
                        for ky in 0..g.k as isize {
                            for kx in 0..g.k as isize {
                                let (yy, xx) = (i + ky - r, j + kx - r);
                                if yy < 0 || xx < 0 || yy >= g.h as isize || xx >= g.w as isize {
                                    continue;
                                }
                                acc += w[((o * g.c_in + c) * g.k + ky as usize) * g.k + kx as usize]
                                    * x[(c * g.h + yy as usize) * g.w + xx as usize];
                            }
                        }
                    }
                    y[(o * g.h + i as usize) * g.w + j as usize] = acc;
                }
            }
        }
        y
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        (0..n)
            .map(|i| (crate::rng::child_seed(seed, i as u64) % 2001) as f64 / 1000.0 - 1.0)
            .collect()
    }

    #[test]
    fn conv_matches_naive() {
        for (k, h, w) in [(1, 3, 4), (3, 5, 5), (3, 1, 6), (5, 4, 7)] {
            let g = ConvGeom { c_in: 2, c_out: 3, h, w, k };
            let x = pseudo(g.c_in * h * w, 1);
            let wt = pseudo(g.c_out * g.c_in * k * k, 2);
            let b = pseudo(g.c_out, 3);
            let fast = conv2d_forward(&g, &x, &wt, &b);
            let slow = naive_conv(&g, &x, &wt, &b);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transposed_conv_is_adjoint() {
        // <conv(x), y> == <x, conv^T(y)> for zero bias.
        let g = ConvGeom { c_in: 2, c_out: 3, h: 5, w: 6, k: 3 };
        let x = pseudo(2 * 30, 4);
        let y = pseudo(3 * 30, 5);
        let wt = pseudo(3 * 2 * 9, 6);
        let fx = conv2d_forward(&g, &x, &wt, &[0.0; 3]);
        let ty = conv2d_backward_input(&g, &y, &wt);
        let lhs: f64 = fx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&ty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn maxpool_first_occurrence_wins() {
        let (y, s) = maxpool_forward(1, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(y, vec![4.0]);
        assert_eq!(s, vec![3]);
        let (_, s) = maxpool_forward(1, 2, 2, &[5.0, 5.0, 5.0, 5.0]);
        assert_eq!(s, vec![0]);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(30.0) > 0.999_999);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }
}
