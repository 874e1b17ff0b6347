//! Raw numeric kernels behind the graph ops. All slices are row-major `NCHW`.

/// Geometry of one 2-D convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_image(&self) -> usize {
        self.in_ch * self.height * self.width
    }

    /// 1×1 kernels with unit stride need no column buffer.
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// `c = alpha·a·b + beta·c` on row-major matrices; `a` is `m×k` and `b` is `k×n`.
/// `ta`/`tb` read the operand as its transpose.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the stride pairs above address exactly the `m×k`, `k×n` and
    // `m×n` extents, which the assertion checks fit in the slices.
    unsafe {
        matrixmultiply::dgemm(
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

/// Output columns `lo..hi` whose tap `kj` lands inside a row of `width`.
fn valid_span(out_len: usize, width: usize, s: usize, kj: usize, p: usize) -> (usize, usize) {
    let lo = p.saturating_sub(kj).div_ceil(s).min(out_len);
    let hi = (width + p).saturating_sub(kj).div_ceil(s).clamp(lo, out_len);
    (lo, hi)
}

fn im2col(g: &ConvGeom, image: &[f64], cols: &mut [f64]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    let plane = g.out_plane();
    for c in 0..g.in_ch {
        let src = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_span(g.out_w, g.width, s, kj, p);
                for (oh, out_row) in dst.chunks_exact_mut(g.out_w).enumerate() {
                    let ih = (oh * s + ki).wrapping_sub(p);
                    if ih >= g.height {
                        out_row.fill(0.0);
                        continue;
                    }
                    out_row[..lo].fill(0.0);
                    out_row[hi..].fill(0.0);
                    if lo == hi {
                        continue;
                    }
                    let first = lo * s + kj - p;
                    let src_row = &src[ih * g.width..(ih + 1) * g.width];
                    if s == 1 {
                        out_row[lo..hi].copy_from_slice(&src_row[first..first + hi - lo]);
                    } else {
                        for (v, x) in out_row[lo..hi].iter_mut().zip(src_row[first..].iter().step_by(s)) {
                            *v = *x;
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeom, cols: &[f64], image: &mut [f64]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    let plane = g.out_plane();
    for c in 0..g.in_ch {
        let dst = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_span(g.out_w, g.width, s, kj, p);
                if lo == hi {
                    continue;
                }
                let first = lo * s + kj - p;
                for (oh, in_row) in src.chunks_exact(g.out_w).enumerate() {
                    let ih = (oh * s + ki).wrapping_sub(p);
                    if ih >= g.height {
                        continue;
                    }
                    let dst_row = &mut dst[ih * g.width + first..(ih + 1) * g.width];
                    for (d, x) in dst_row.iter_mut().step_by(s).zip(&in_row[lo..hi]) {
                        *d += *x;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let plane = g.out_plane();
    let rows = g.col_rows();
    let mut out = vec![0.0; g.batch * g.out_ch * plane];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; rows * plane] };
    for n in 0..g.batch {
        let image = &input[n * g.in_image()..(n + 1) * g.in_image()];
        let dst = &mut out[n * g.out_ch * plane..(n + 1) * g.out_ch * plane];
        for (o, chunk) in dst.chunks_mut(plane).enumerate() {
            chunk.fill(bias[o]);
        }
        let cols_ref: &[f64] = if g.is_pointwise() {
            image
        } else {
            im2col(g, image, &mut cols);
            &cols
        };
        gemm(g.out_ch, rows, plane, weight, false, cols_ref, false, 1.0, dst);
    }
    out
}

/// Accumulates gradients of a convolution into whichever of the three
/// buffers are present.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    mut grad_input: Option<&mut [f64]>,
    mut grad_weight: Option<&mut [f64]>,
    mut grad_bias: Option<&mut [f64]>,
) {
    let plane = g.out_plane();
    let rows = g.col_rows();
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise || grad_weight.is_none() {
        Vec::new()
    } else {
        vec![0.0; rows * plane]
    };
    let mut dcols = if pointwise || grad_input.is_none() {
        Vec::new()
    } else {
        vec![0.0; rows * plane]
    };
    for n in 0..g.batch {
        let image = &input[n * g.in_image()..(n + 1) * g.in_image()];
        let gout = &grad_out[n * g.out_ch * plane..(n + 1) * g.out_ch * plane];
        if let Some(gb) = grad_bias.as_deref_mut() {
            for (o, chunk) in gout.chunks(plane).enumerate() {
                gb[o] += chunk.iter().sum::<f64>();
            }
        }
        if let Some(gw) = grad_weight.as_deref_mut() {
            let cols_ref: &[f64] = if pointwise {
                image
            } else {
                im2col(g, image, &mut cols);
                &cols
            };
            // dW (out×rows) += dOut (out×plane) · colsᵀ (plane×rows)
            gemm(g.out_ch, plane, rows, gout, false, cols_ref, true, 1.0, gw);
        }
        if let Some(gi) = grad_input.as_deref_mut() {
            let gi_image = &mut gi[n * g.in_image()..(n + 1) * g.in_image()];
            if pointwise {
                gemm(rows, g.out_ch, plane, weight, true, gout, false, 1.0, gi_image);
            } else {
                // dcols (rows×plane) = Wᵀ (rows×out) · dOut (out×plane)
                gemm(rows, g.out_ch, plane, weight, true, gout, false, 0.0, &mut dcols);
                col2im_add(g, &dcols, gi_image);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct seven-loop convolution used to check the im2col path.
    fn naive_conv(g: &ConvGeom, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.batch * g.out_ch * g.out_h * g.out_w];
        for n in 0..g.batch {
            for o in 0..g.out_ch {
                for oh in 0..g.out_h {
                    for ow in 0..g.out_w {
                        let mut acc = bias[o];
                        for c in 0..g.in_ch {
                            for ki in 0..g.kernel {
                                for kj in 0..g.kernel {
                                    let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                                    let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                                    if ih < 0 || iw < 0 || ih >= g.height as isize || iw >= g.width as isize {
                                        continue;
                                    }
                                    let x = input[((n * g.in_ch + c) * g.height + ih as usize) * g.width
                                        + iw as usize];
                                    let w = weight[((o * g.in_ch + c) * g.kernel + ki) * g.kernel + kj];
                                    acc += x * w;
                                }
                            }
                        }
                        out[((n * g.out_ch + o) * g.out_h + oh) * g.out_w + ow] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_path_matches_direct_loops() {
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 0), (1, 1, 0), (2, 2, 1)] {
            let (h, w) = (5, 6);
            let g = ConvGeom {
                batch: 2,
                in_ch: 3,
                out_ch: 4,
                height: h,
                width: w,
                kernel: k,
                stride: s,
                padding: p,
                out_h: (h + 2 * p - k) / s + 1,
                out_w: (w + 2 * p - k) / s + 1,
            };
            let input: Vec<f64> = (0..2 * 3 * h * w).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
            let weight: Vec<f64> = (0..4 * 3 * k * k).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
            let bias = vec![0.5, -1.0, 2.0, 0.0];
            assert_eq!(conv2d_forward(&g, &input, &weight, &bias), naive_conv(&g, &input, &weight, &bias));
        }
    }
}
