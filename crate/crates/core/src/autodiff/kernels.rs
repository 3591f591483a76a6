//! Raw numeric kernels shared by the forward and backward passes.

use crate::tensor::Scalar;

/// Numpy-style broadcast of two shapes, aligned on the trailing axis.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() {
            1
        } else {
            a[i - (rank - a.len())]
        };
        let db = if i < rank - b.len() {
            1
        } else {
            b[i - (rank - b.len())]
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Flat index into an operand of shape `input` for every flat output index
/// of the broadcast shape `out`.
pub(crate) fn broadcast_index(out: &[usize], input: &[usize]) -> Vec<usize> {
    let numel: usize = out.iter().product();
    let in_numel: usize = input.iter().product();
    if out == input {
        return (0..numel).collect();
    }
    if in_numel == 1 {
        return vec![0; numel];
    }
    // input matches a suffix of out: plain modular repetition.
    if out.len() >= input.len() && out[out.len() - input.len()..] == *input {
        return (0..numel).map(|o| o % in_numel).collect();
    }
    let rank = out.len();
    let offset = rank - input.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..input.len()).rev() {
        strides[offset + i] = if input[i] == 1 { 0 } else { acc };
        acc *= input[i];
    }
    let mut index = Vec::with_capacity(numel);
    let mut counter = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..numel {
        index.push(flat);
        for axis in (0..rank).rev() {
            counter[axis] += 1;
            flat += strides[axis];
            if counter[axis] < out[axis] {
                break;
            }
            flat -= strides[axis] * counter[axis];
            counter[axis] = 0;
        }
    }
    index
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// First and one-past-last output coordinate whose tap at kernel offset
    /// `k` falls inside an axis of length `len`.
    fn valid_range(&self, k: usize, len: usize, out: usize) -> (usize, usize) {
        // need 0 <= o*stride + k - padding < len
        let lo = self.padding.saturating_sub(k).div_ceil(self.stride);
        let hi = ((len + self.padding).saturating_sub(k))
            .div_ceil(self.stride)
            .min(out);
        (lo, hi.max(lo))
    }

    /// Calls `f(col_offset, image_offset, run)` for every run of kernel taps
    /// that land inside the image: column entries `col_offset..+run` pair
    /// with image entries `image_offset + i * stride`.
    #[inline]
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let ohw = self.col_cols();
        for c in 0..self.channels {
            for ky in 0..self.kernel_h {
                let (oy_lo, oy_hi) = self.valid_range(ky, self.height, self.out_h);
                for kx in 0..self.kernel_w {
                    let (ox_lo, ox_hi) = self.valid_range(kx, self.width, self.out_w);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let row = (c * self.kernel_h + ky) * self.kernel_w + kx;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * self.stride + ky - self.padding;
                        let ix = ox_lo * self.stride + kx - self.padding;
                        f(
                            row * ohw + oy * self.out_w + ox_lo,
                            (c * self.height + iy) * self.width + ix,
                            ox_hi - ox_lo,
                        );
                    }
                }
            }
        }
    }
}

/// Unfolds one image `[C, H, W]` into `[C*kh*kw, out_h*out_w]` columns.
pub(crate) fn im2col<T: Scalar>(geo: &ConvGeometry, image: &[T], cols: &mut [T]) {
    let ohw = geo.col_cols();
    let (ow, stride) = (geo.out_w, geo.stride);
    for c in 0..geo.channels {
        for ky in 0..geo.kernel_h {
            let (oy_lo, oy_hi) = geo.valid_range(ky, geo.height, geo.out_h);
            for kx in 0..geo.kernel_w {
                let (ox_lo, ox_hi) = geo.valid_range(kx, geo.width, ow);
                let row = (c * geo.kernel_h + ky) * geo.kernel_w + kx;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                dst[..oy_lo * ow].fill(T::zero());
                dst[oy_hi.max(oy_lo) * ow..].fill(T::zero());
                for oy in oy_lo..oy_hi {
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    line[..ox_lo].fill(T::zero());
                    line[ox_hi..].fill(T::zero());
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let iy = oy * stride + ky - geo.padding;
                    let ix = ox_lo * stride + kx - geo.padding;
                    let src = &image[(c * geo.height + iy) * geo.width + ix..];
                    let run = &mut line[ox_lo..ox_hi];
                    if stride == 1 {
                        run.copy_from_slice(&src[..run.len()]);
                    } else {
                        for (d, s) in run.iter_mut().zip(src.iter().step_by(stride)) {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto the image, adding.
pub(crate) fn col2im_add<T: Scalar>(geo: &ConvGeometry, cols: &[T], image: &mut [T]) {
    let stride = geo.stride;
    geo.for_each_run(|col, img, run| {
        let src = &cols[col..col + run];
        for (d, s) in image[img..].iter_mut().step_by(stride).zip(src) {
            *d = *d + *s;
        }
    });
}

/// Per-(example, group) statistics of group normalization.
pub(crate) struct GroupNormOut<T> {
    pub output: Vec<T>,
    pub normalized: Vec<T>,
    pub inv_std: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_forward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    batch: usize,
    channels: usize,
    spatial: usize,
    groups: usize,
    eps: T,
) -> GroupNormOut<T> {
    let per_group = channels / groups;
    let group_len = per_group * spatial;
    let count = T::from_usize(group_len).unwrap();
    let mut output = vec![T::zero(); x.len()];
    let mut normalized = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(batch * groups);
    for b in 0..batch {
        for g in 0..groups {
            let start = (b * channels + g * per_group) * spatial;
            let slice = &x[start..start + group_len];
            let mean = slice.iter().copied().sum::<T>() / count;
            let var = slice.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
            let rstd = T::one() / (var + eps).sqrt();
            inv_std.push(rstd);
            for (i, &v) in slice.iter().enumerate() {
                let c = g * per_group + i / spatial;
                let xhat = (v - mean) * rstd;
                normalized[start + i] = xhat;
                output[start + i] = xhat * gamma[c] + beta[c];
            }
        }
    }
    GroupNormOut {
        output,
        normalized,
        inv_std,
    }
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_backward<T: Scalar>(
    grad: &[T],
    normalized: &[T],
    inv_std: &[T],
    gamma: &[T],
    batch: usize,
    channels: usize,
    spatial: usize,
    groups: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let per_group = channels / groups;
    let group_len = per_group * spatial;
    let count = T::from_usize(group_len).unwrap();
    let mut gx = vec![T::zero(); grad.len()];
    let mut ggamma = vec![T::zero(); channels];
    let mut gbeta = vec![T::zero(); channels];
    for b in 0..batch {
        for g in 0..groups {
            let start = (b * channels + g * per_group) * spatial;
            let rstd = inv_std[b * groups + g];
            let mut mean_gxhat = T::zero();
            let mut mean_gxhat_xhat = T::zero();
            for i in 0..group_len {
                let c = g * per_group + i / spatial;
                let gy = grad[start + i];
                let xhat = normalized[start + i];
                ggamma[c] = ggamma[c] + gy * xhat;
                gbeta[c] = gbeta[c] + gy;
                let gxhat = gy * gamma[c];
                mean_gxhat = mean_gxhat + gxhat;
                mean_gxhat_xhat = mean_gxhat_xhat + gxhat * xhat;
            }
            mean_gxhat = mean_gxhat / count;
            mean_gxhat_xhat = mean_gxhat_xhat / count;
            for i in 0..group_len {
                let c = g * per_group + i / spatial;
                let xhat = normalized[start + i];
                let gxhat = grad[start + i] * gamma[c];
                gx[start + i] = rstd * (gxhat - mean_gxhat - xhat * mean_gxhat_xhat);
            }
        }
    }
    (gx, ggamma, gbeta)
}
