use crate::error::{dim_err, param_err, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeometry {
    pub planes: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub out_height: usize,
    pub out_width: usize,
}

fn pooled_extent(len: usize, kernel: usize, stride: usize, ceil_mode: bool) -> usize {
    let span = len - kernel;
    let mut out = if ceil_mode { span.div_ceil(stride) } else { span / stride } + 1;
    // a window may not start past the input edge
    if ceil_mode && (out - 1) * stride >= len {
        out -= 1;
    }
    out
}

impl PoolGeometry {
    pub fn new(shape: &[usize], kernel: usize, stride: usize, ceil_mode: bool) -> Result<Self> {
        if shape.len() != 4 {
            return Err(dim_err("max_pool2d", shape, &[kernel, kernel]));
        }
        if stride == 0 || kernel == 0 {
            return Err(param_err("max_pool2d", "kernel and stride must be positive"));
        }
        let (h, w) = (shape[2], shape[3]);
        if kernel > h || kernel > w {
            return Err(dim_err("max_pool2d", shape, &[kernel, kernel]));
        }
        Ok(Self {
            planes: shape[0] * shape[1],
            height: h,
            width: w,
            kernel,
            stride,
            out_height: pooled_extent(h, kernel, stride, ceil_mode),
            out_width: pooled_extent(w, kernel, stride, ceil_mode),
        })
    }
}

/// Max pooling; returns the output and, per output element, the flat input
/// index that supplied the maximum (first occurrence in raster order).
pub fn max_pool2d_forward<T: Scalar>(input: &[T], g: &PoolGeometry) -> (Vec<T>, Vec<usize>) {
    let plane_in = g.height * g.width;
    let plane_out = g.out_height * g.out_width;
    let mut out = Vec::with_capacity(g.planes * plane_out);
    let mut argmax = Vec::with_capacity(g.planes * plane_out);
    for p in 0..g.planes {
        let base = p * plane_in;
        for oy in 0..g.out_height {
            let y0 = oy * g.stride;
            let y1 = (y0 + g.kernel).min(g.height);
            for ox in 0..g.out_width {
                let x0 = ox * g.stride;
                let x1 = (x0 + g.kernel).min(g.width);
                let mut best = base + y0 * g.width + x0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        let idx = base + y * g.width + x;
                        if input[idx] > input[best] {
                            best = idx;
                        }
                    }
                }
                out.push(input[best]);
                argmax.push(best);
            }
        }
    }
    (out, argmax)
}

pub fn max_pool2d_backward<T: Scalar>(grad_out: &[T], argmax: &[usize], input_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&g, &i) in grad_out.iter().zip(argmax) {
        dx[i] += g;
    }
    dx
}

pub fn adaptive_avg_pool_forward<T: Scalar>(input: &[T], plane: usize) -> Vec<T> {
    let scale = T::one() / T::from_usize(plane).unwrap();
    input.chunks(plane).map(|c| c.iter().copied().sum::<T>() * scale).collect()
}

pub fn adaptive_avg_pool_backward<T: Scalar>(grad_out: &[T], plane: usize) -> Vec<T> {
    let scale = T::one() / T::from_usize(plane).unwrap();
    grad_out
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g * scale, plane))
        .collect()
}
