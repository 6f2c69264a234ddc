//! im2col based 2-D convolution kernels (NCHW layout).

use super::Scalar;

/// Output extent of a convolution or pooling window along one axis.
///
/// Returns `None` when the (padded) input is smaller than the kernel.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    fn columns(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    fn plane(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Output indices `o` in `0..out` with `0 <= o*stride + offset < size`.
fn valid_range(out: usize, stride: usize, offset: isize, size: usize) -> std::ops::Range<usize> {
    let lo = if offset >= 0 {
        0
    } else {
        (offset.unsigned_abs()).div_ceil(stride)
    };
    let room = size as isize - offset;
    let hi = if room <= 0 {
        0
    } else {
        (room as usize).div_ceil(stride).min(out)
    };
    lo..hi.max(lo)
}

/// Input planes resampled once per kernel column `j` and row phase `a`:
/// `[B*C, kw, stride, qh, out_w]` with entry `(j, a, qy, ox)` holding the
/// zero-padded pixel at row `qy*stride + a`, column `ox*stride + j`. Tap
/// `(i, j)` is then one contiguous `out_h × out_w` block of plane
/// `(j, i % stride)` starting at row `i / stride`.
struct Resampled {
    qh: usize,
}

impl Resampled {
    fn new(g: &ConvGeometry) -> Self {
        Self {
            qh: (g.height + 2 * g.padding).div_ceil(g.stride),
        }
    }

    fn plane(&self, g: &ConvGeometry) -> usize {
        self.qh * g.out_w
    }

    fn len(&self, g: &ConvGeometry) -> usize {
        g.batch * g.in_channels * g.kw * g.stride * self.plane(g)
    }

    fn tap(&self, g: &ConvGeometry, bc: usize, i: usize, j: usize) -> usize {
        ((bc * g.kw + j) * g.stride + i % g.stride) * self.plane(g) + (i / g.stride) * g.out_w
    }

    /// Calls `f(qy_row_offset, input_row, columns, first_input_column)` for
    /// every resampled row of plane `(j, a)` that overlaps the input.
    fn rows(
        &self,
        g: &ConvGeometry,
        j: usize,
        a: usize,
        mut f: impl FnMut(usize, usize, std::ops::Range<usize>, usize),
    ) {
        let (s, p) = (g.stride, g.padding);
        let xs = valid_range(g.out_w, s, j as isize - p as isize, g.width);
        if xs.is_empty() {
            return;
        }
        let x0 = xs.start * s + j - p;
        for qy in 0..self.qh {
            let py = qy * s + a;
            if py >= p && py - p < g.height {
                f(qy * g.out_w, py - p, xs.clone(), x0);
            }
        }
    }

    fn gather<T: Scalar>(&self, g: &ConvGeometry, input: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.len(g)];
        let block = g.kw * g.stride * self.plane(g);
        for (src, dst) in input.chunks_exact(g.height * g.width).zip(out.chunks_exact_mut(block)) {
            for (ja, dst) in dst.chunks_exact_mut(self.plane(g)).enumerate() {
                self.rows(g, ja / g.stride, ja % g.stride, |off, y, xs, x0| {
                    let row = &src[y * g.width + x0..(y + 1) * g.width];
                    for (d, &v) in dst[off + xs.start..off + xs.end]
                        .iter_mut()
                        .zip(row.iter().step_by(g.stride))
                    {
                        *d = v;
                    }
                });
            }
        }
        out
    }

    /// Adjoint of [`Resampled::gather`].
    fn scatter<T: Scalar>(&self, g: &ConvGeometry, resampled: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); g.batch * g.in_channels * g.height * g.width];
        let block = g.kw * g.stride * self.plane(g);
        for (src, dst) in resampled
            .chunks_exact(block)
            .zip(out.chunks_exact_mut(g.height * g.width))
        {
            for (ja, src) in src.chunks_exact(self.plane(g)).enumerate() {
                self.rows(g, ja / g.stride, ja % g.stride, |off, y, xs, x0| {
                    let row = &mut dst[y * g.width + x0..(y + 1) * g.width];
                    for (d, &v) in row.iter_mut().step_by(g.stride).zip(&src[off + xs.start..off + xs.end]) {
                        *d += v;
                    }
                });
            }
        }
        out
    }
}

/// Unfolds the input into a `[C*kh*kw, B*out_h*out_w]` matrix.
fn im2col<T: Scalar>(g: &ConvGeometry, input: &[T]) -> Vec<T> {
    let r = Resampled::new(g);
    let src = r.gather(g, input);
    let n = g.plane();
    let mut out = Vec::with_capacity(g.patch_len() * g.columns());
    for c in 0..g.in_channels {
        for i in 0..g.kh {
            for j in 0..g.kw {
                for b in 0..g.batch {
                    out.extend_from_slice(&src[r.tap(g, b * g.in_channels + c, i, j)..][..n]);
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters columns back onto the input, summing overlaps.
fn col2im<T: Scalar>(g: &ConvGeometry, cols_data: &[T]) -> Vec<T> {
    let r = Resampled::new(g);
    let mut acc = vec![T::zero(); r.len(g)];
    let mut blocks = cols_data.chunks_exact(g.plane());
    for c in 0..g.in_channels {
        for i in 0..g.kh {
            for j in 0..g.kw {
                for b in 0..g.batch {
                    let block = blocks.next().expect("column count matches geometry");
                    let dst = &mut acc[r.tap(g, b * g.in_channels + c, i, j)..][..block.len()];
                    for (d, &v) in dst.iter_mut().zip(block) {
                        *d += v;
                    }
                }
            }
        }
    }
    r.scatter(g, &acc)
}

pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeometry, input: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let cols = im2col(g, input);
    let n = g.columns();
    let plane = g.plane();
    if plane == 1 {
        let mut out = vec![T::zero(); g.batch * g.filters];
        // out[b, f] is column b of the product: write it directly.
        T::gemm(
            g.filters,
            g.patch_len(),
            n,
            T::one(),
            weight,
            (g.patch_len() as isize, 1),
            &cols,
            (n as isize, 1),
            T::zero(),
            &mut out,
            (1, g.filters as isize),
        );
        for row in out.chunks_mut(g.filters) {
            for (v, &bf) in row.iter_mut().zip(bias) {
                *v += bf;
            }
        }
        out
    } else {
        let mut tmp = vec![T::zero(); g.filters * n];
        T::gemm(
            g.filters,
            g.patch_len(),
            n,
            T::one(),
            weight,
            (g.patch_len() as isize, 1),
            &cols,
            (n as isize, 1),
            T::zero(),
            &mut tmp,
            (n as isize, 1),
        );
        let mut out = Vec::with_capacity(g.batch * g.filters * plane);
        for b in 0..g.batch {
            for (f, &bf) in bias.iter().enumerate() {
                out.extend(tmp[f * n + b * plane..][..plane].iter().map(|&v| v + bf));
            }
        }
        out
    }
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeometry,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (need_input, need_weight, need_bias) = need;
    let n = g.columns();
    let plane = g.plane();
    let k = g.patch_len();

    // grad_out [B, F, P] -> [F, B*P]
    let mut gt = Vec::with_capacity(g.filters * n);
    for f in 0..g.filters {
        for b in 0..g.batch {
            gt.extend_from_slice(&grad_out[(b * g.filters + f) * plane..][..plane]);
        }
    }

    let bias_grad = need_bias.then(|| gt.chunks(n).map(|row| row.iter().copied().sum()).collect());

    let weight_grad = need_weight.then(|| {
        let cols = im2col(g, input);
        let mut dw = vec![T::zero(); g.filters * k];
        T::gemm(
            g.filters,
            n,
            k,
            T::one(),
            &gt,
            (n as isize, 1),
            &cols,
            (1, n as isize),
            T::zero(),
            &mut dw,
            (k as isize, 1),
        );
        dw
    });

    let input_grad = need_input.then(|| {
        let mut dcols = vec![T::zero(); k * n];
        T::gemm(
            k,
            g.filters,
            n,
            T::one(),
            weight,
            (1, k as isize),
            &gt,
            (n as isize, 1),
            T::zero(),
            &mut dcols,
            (n as isize, 1),
        );
        col2im(g, &dcols)
    });

    ConvGrads {
        input: input_grad,
        weight: weight_grad,
        bias: bias_grad,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeometry, x: &[f64], w: &[f64], bias: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.batch * g.filters * g.out_h * g.out_w];
        for b in 0..g.batch {
            for f in 0..g.filters {
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        let mut acc = bias[f];
                        for c in 0..g.in_channels {
                            for i in 0..g.kh {
                                for j in 0..g.kw {
                                    let y = (oy * g.stride + i) as isize - g.padding as isize;
                                    let xx = (ox * g.stride + j) as isize - g.padding as isize;
                                    if y < 0 || xx < 0 || y >= g.height as isize || xx >= g.width as isize {
                                        continue;
                                    }
                                    acc += w[((f * g.in_channels + c) * g.kh + i) * g.kw + j]
                                        * x[((b * g.in_channels + c) * g.height + y as usize) * g.width + xx as usize];
                                }
                            }
                        }
                        out[((b * g.filters + f) * g.out_h + oy) * g.out_w + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        for &(stride, padding, h, w) in &[(1, 0, 5, 6), (2, 1, 7, 5), (3, 1, 8, 7), (2, 0, 6, 9), (1, 2, 3, 4)] {
            let g = ConvGeometry {
                batch: 2,
                in_channels: 2,
                height: h,
                width: w,
                filters: 1,
                kh: 3,
                kw: 3,
                stride,
                padding,
                out_h: conv_output_size(h, 3, stride, padding).unwrap(),
                out_w: conv_output_size(w, 3, stride, padding).unwrap(),
            };
            let x: Vec<f64> = (0..2 * 2 * h * w).map(|i| ((i * 29 % 13) as f64) - 6.0).collect();
            let y: Vec<f64> = (0..g.patch_len() * g.columns())
                .map(|i| ((i * 17 % 11) as f64) - 5.0)
                .collect();
            let lhs: f64 = im2col(&g, &x).iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&col2im(&g, &y)).map(|(a, b)| a * b).sum();
            assert_eq!(lhs, rhs, "stride {stride} padding {padding} {h}x{w}");
        }
    }

    #[test]
    fn output_size_formula() {
        assert_eq!(conv_output_size(8, 3, 1, 1), Some(8));
        assert_eq!(conv_output_size(8, 3, 2, 1), Some(4));
        assert_eq!(conv_output_size(2, 3, 2, 1), Some(1));
        assert_eq!(conv_output_size(2, 5, 1, 0), None);
    }

    #[test]
    fn forward_matches_direct_loops() {
        for &(stride, padding, h, w) in &[(1, 0, 5, 6), (2, 1, 7, 5), (1, 1, 4, 4), (2, 1, 2, 2)] {
            let oh = conv_output_size(h, 3, stride, padding).unwrap();
            let ow = conv_output_size(w, 3, stride, padding).unwrap();
            let g = ConvGeometry {
                batch: 2,
                in_channels: 3,
                height: h,
                width: w,
                filters: 4,
                kh: 3,
                kw: 3,
                stride,
                padding,
                out_h: oh,
                out_w: ow,
            };
            let x: Vec<f64> = (0..2 * 3 * h * w).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let wt: Vec<f64> = (0..4 * 27).map(|i| ((i * 13 % 7) as f64) * 0.25 - 0.5).collect();
            let bias = [0.5, -1.0, 0.0, 2.0];
            let fast = conv2d_forward(&g, &x, &wt, &bias);
            let slow = naive_conv(&g, &x, &wt, &bias);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }
}
