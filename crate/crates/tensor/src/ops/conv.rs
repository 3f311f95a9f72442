//! 2-D convolution over NCHW tensors, lowered to a single GEMM per batch via
//! an im2col buffer laid out as `[C*K*K, N*OH*OW]`.

use crate::error::{dim_err, param_err, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 4 || weight.len() != 4 {
            return Err(dim_err("conv2d", input, weight));
        }
        if input[1] != weight[1] || weight[2] != weight[3] {
            return Err(dim_err("conv2d", input, weight));
        }
        if stride == 0 {
            return Err(param_err("conv2d", "stride must be at least 1"));
        }
        let kernel = weight[2];
        let (h, w) = (input[2] + 2 * padding, input[3] + 2 * padding);
        if kernel == 0 || kernel > h || kernel > w {
            return Err(dim_err("conv2d", input, weight));
        }
        Ok(Self {
            batch: input[0],
            in_channels: input[1],
            height: input[2],
            width: input[3],
            out_channels: weight[0],
            kernel,
            stride,
            padding,
            out_height: (h - kernel) / stride + 1,
            out_width: (w - kernel) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn out_plane(&self) -> usize {
        self.out_height * self.out_width
    }

    pub fn columns(&self) -> usize {
        self.batch * self.out_plane()
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_height, self.out_width]
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Output columns `[lo, hi)` whose input column for kernel offset `kj`
/// lies inside the image.
fn valid_span(g: &ConvGeometry, kj: usize) -> (usize, usize) {
    let lo = g.padding.saturating_sub(kj).div_ceil(g.stride);
    let last = g.width + g.padding;
    let hi = if last > kj { ((last - kj - 1) / g.stride + 1).min(g.out_width) } else { 0 };
    (lo.min(hi), hi)
}

pub fn im2col<T: Scalar>(input: &[T], g: &ConvGeometry) -> Vec<T> {
    let cols = g.columns();
    let plane_in = g.height * g.width;
    let plane_out = g.out_plane();
    let mut out = vec![T::zero(); g.patch_len() * cols];
    if g.is_pointwise() {
        for c in 0..g.in_channels {
            let row = &mut out[c * cols..(c + 1) * cols];
            for n in 0..g.batch {
                let src = &input[(n * g.in_channels + c) * plane_in..][..plane_in];
                row[n * plane_out..(n + 1) * plane_out].copy_from_slice(src);
            }
        }
        return out;
    }
    let k = g.kernel;
    for c in 0..g.in_channels {
        for ki in 0..k {
            for kj in 0..k {
                let r = (c * k + ki) * k + kj;
                let row = &mut out[r * cols..(r + 1) * cols];
                for n in 0..g.batch {
                    let src = &input[(n * g.in_channels + c) * plane_in..][..plane_in];
                    let dst = &mut row[n * plane_out..(n + 1) * plane_out];
                    for oy in 0..g.out_height {
                        let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.width..][..g.width];
                        let dst_row = &mut dst[oy * g.out_width..][..g.out_width];
                        let (lo, hi) = valid_span(g, kj);
                        let shift = kj as isize - g.padding as isize;
                        if g.stride == 1 {
                            let start = (lo as isize + shift) as usize;
                            dst_row[lo..hi].copy_from_slice(&src_row[start..start + hi - lo]);
                        } else {
                            for (ox, d) in dst_row.iter_mut().enumerate().take(hi).skip(lo) {
                                *d = src_row[((ox * g.stride) as isize + shift) as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im<T: Scalar>(cols_grad: &[T], g: &ConvGeometry) -> Vec<T> {
    let cols = g.columns();
    let plane_in = g.height * g.width;
    let plane_out = g.out_plane();
    let mut dx = vec![T::zero(); g.batch * g.in_channels * plane_in];
    if g.is_pointwise() {
        for c in 0..g.in_channels {
            let row = &cols_grad[c * cols..(c + 1) * cols];
            for n in 0..g.batch {
                let dst = &mut dx[(n * g.in_channels + c) * plane_in..][..plane_in];
                dst.copy_from_slice(&row[n * plane_out..(n + 1) * plane_out]);
            }
        }
        return dx;
    }
    let k = g.kernel;
    for c in 0..g.in_channels {
        for ki in 0..k {
            for kj in 0..k {
                let r = (c * k + ki) * k + kj;
                let row = &cols_grad[r * cols..(r + 1) * cols];
                for n in 0..g.batch {
                    let dst = &mut dx[(n * g.in_channels + c) * plane_in..][..plane_in];
                    let src = &row[n * plane_out..(n + 1) * plane_out];
                    for oy in 0..g.out_height {
                        let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.width..][..g.width];
                        let src_row = &src[oy * g.out_width..][..g.out_width];
                        let (lo, hi) = valid_span(g, kj);
                        let shift = kj as isize - g.padding as isize;
                        for (ox, &v) in src_row.iter().enumerate().take(hi).skip(lo) {
                            dst_row[((ox * g.stride) as isize + shift) as usize] += v;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Returns the NCHW output together with the im2col buffer needed by the
/// backward pass.
pub fn conv2d_forward<T: Scalar>(
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeometry,
) -> (Vec<T>, Vec<T>) {
    let cols = im2col(input, g);
    let (o, kc, nc) = (g.out_channels, g.patch_len(), g.columns());
    let mut mat = vec![T::zero(); o * nc];
    T::gemm(o, kc, nc, T::one(), weight, (kc, 1), &cols, (nc, 1), T::zero(), &mut mat, (nc, 1));
    let plane = g.out_plane();
    let mut out = vec![T::zero(); g.batch * o * plane];
    for oc in 0..o {
        let b = bias.map_or(T::zero(), |b| b[oc]);
        let row = &mat[oc * nc..(oc + 1) * nc];
        for n in 0..g.batch {
            let dst = &mut out[(n * o + oc) * plane..][..plane];
            for (d, &v) in dst.iter_mut().zip(&row[n * plane..(n + 1) * plane]) {
                *d = v + b;
            }
        }
    }
    (out, cols)
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    grad_out: &[T],
    weight: &[T],
    cols: &[T],
    g: &ConvGeometry,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (o, kc, nc) = (g.out_channels, g.patch_len(), g.columns());
    let plane = g.out_plane();
    let mut dy = vec![T::zero(); o * nc];
    for oc in 0..o {
        let row = &mut dy[oc * nc..(oc + 1) * nc];
        for n in 0..g.batch {
            row[n * plane..(n + 1) * plane].copy_from_slice(&grad_out[(n * o + oc) * plane..][..plane]);
        }
    }
    let input = need.0.then(|| {
        let mut dcols = vec![T::zero(); kc * nc];
        T::gemm(kc, o, nc, T::one(), weight, (1, kc), &dy, (nc, 1), T::zero(), &mut dcols, (nc, 1));
        col2im(&dcols, g)
    });
    let weight = need.1.then(|| {
        let mut dw = vec![T::zero(); o * kc];
        T::gemm(o, nc, kc, T::one(), &dy, (nc, 1), cols, (1, nc), T::zero(), &mut dw, (kc, 1));
        dw
    });
    let bias = need
        .2
        .then(|| dy.chunks(nc).map(|row| row.iter().copied().sum()).collect());
    ConvGrads { input, weight, bias }
}
