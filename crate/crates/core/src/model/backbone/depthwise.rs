//! Depthwise 2-D convolution as a custom op with an explicit backward pass.
//! The generic grouped convolution of the tensor substrate runs one
//! convolution per channel, which dominates EfficientNet runtimes.

use candle_core::{CpuStorage, CustomOp2, Layout, Result, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DwGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl DwGeometry {
    /// Symmetric `(k - 1) / 2` padding.
    pub fn symmetric(kernel: usize, stride: usize, in_h: usize, in_w: usize) -> Self {
        let pad = (kernel - 1) / 2;
        DwGeometry {
            kernel,
            stride,
            pad_top: pad,
            pad_left: pad,
            in_h,
            in_w,
            out_h: (in_h + 2 * pad - kernel) / stride + 1,
            out_w: (in_w + 2 * pad - kernel) / stride + 1,
        }
    }

    /// TensorFlow "same" padding: output is `ceil(in / stride)`, extra
    /// padding goes to the bottom/right.
    pub fn same(kernel: usize, stride: usize, in_h: usize, in_w: usize) -> Self {
        let (out_h, pad_h) = same_pad(in_h, kernel, stride);
        let (out_w, pad_w) = same_pad(in_w, kernel, stride);
        DwGeometry {
            kernel,
            stride,
            pad_top: pad_h / 2,
            pad_left: pad_w / 2,
            in_h,
            in_w,
            out_h,
            out_w,
        }
    }

    fn input_index(&self, out: usize, k: usize, pad: usize, limit: usize) -> Option<usize> {
        (out * self.stride + k).checked_sub(pad).filter(|&i| i < limit)
    }
}

/// Output size and total padding of a TF "same" convolution.
pub fn same_pad(input: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(input);
    (out, total)
}

fn slice_of<'a>(s: &'a CpuStorage, l: &Layout, what: &str) -> Result<&'a [f32]> {
    let data = match s {
        CpuStorage::F32(v) => v.as_slice(),
        _ => candle_core::bail!("depthwise conv: {what} must be f32"),
    };
    match l.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("depthwise conv: {what} must be contiguous"),
    }
}

/// Calls `f(out_index, in_index, tap_index)` for every valid kernel tap of
/// one channel plane.
#[inline]
fn for_each_tap(g: &DwGeometry, mut f: impl FnMut(usize, usize, usize)) {
    for ky in 0..g.kernel {
        for kx in 0..g.kernel {
            let tap = ky * g.kernel + kx;
            for oy in 0..g.out_h {
                let Some(iy) = g.input_index(oy, ky, g.pad_top, g.in_h) else {
                    continue;
                };
                for ox in 0..g.out_w {
                    if let Some(ix) = g.input_index(ox, kx, g.pad_left, g.in_w) {
                        f(oy * g.out_w + ox, iy * g.in_w + ix, tap);
                    }
                }
            }
        }
    }
}

struct DepthwiseForward(DwGeometry);

impl CustomOp2 for DepthwiseForward {
    fn name(&self) -> &'static str {
        "depthwise-conv2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let x = slice_of(s1, l1, "input")?;
        let w = slice_of(s2, l2, "weight")?;
        let (n, c, _, _) = l1.shape().dims4()?;
        let kk = g.kernel * g.kernel;
        let (in_plane, out_plane) = (g.in_h * g.in_w, g.out_h * g.out_w);
        let mut out = vec![0f32; n * c * out_plane];
        for b in 0..n {
            for ch in 0..c {
                let xp = &x[(b * c + ch) * in_plane..][..in_plane];
                let wp = &w[ch * kk..][..kk];
                let op = &mut out[(b * c + ch) * out_plane..][..out_plane];
                for_each_tap(g, |o, i, t| op[o] += xp[i] * wp[t]);
            }
        }
        Ok((CpuStorage::F32(out), Shape::from((n, c, g.out_h, g.out_w))))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let dx = grad.apply_op2_no_bwd(w, &DepthwiseInputGrad(self.0))?;
        let dw = x.apply_op2_no_bwd(&grad, &DepthwiseWeightGrad(self.0))?;
        Ok((Some(dx), Some(dw)))
    }
}

struct DepthwiseInputGrad(DwGeometry);

impl CustomOp2 for DepthwiseInputGrad {
    fn name(&self) -> &'static str {
        "depthwise-conv2d-input-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let dy = slice_of(s1, l1, "grad")?;
        let w = slice_of(s2, l2, "weight")?;
        let (n, c, _, _) = l1.shape().dims4()?;
        let kk = g.kernel * g.kernel;
        let (in_plane, out_plane) = (g.in_h * g.in_w, g.out_h * g.out_w);
        let mut dx = vec![0f32; n * c * in_plane];
        for b in 0..n {
            for ch in 0..c {
                let gp = &dy[(b * c + ch) * out_plane..][..out_plane];
                let wp = &w[ch * kk..][..kk];
                let xp = &mut dx[(b * c + ch) * in_plane..][..in_plane];
                for_each_tap(g, |o, i, t| xp[i] += gp[o] * wp[t]);
            }
        }
        Ok((CpuStorage::F32(dx), Shape::from((n, c, g.in_h, g.in_w))))
    }
}

struct DepthwiseWeightGrad(DwGeometry);

impl CustomOp2 for DepthwiseWeightGrad {
    fn name(&self) -> &'static str {
        "depthwise-conv2d-weight-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let x = slice_of(s1, l1, "input")?;
        let dy = slice_of(s2, l2, "grad")?;
        let (n, c, _, _) = l1.shape().dims4()?;
        let kk = g.kernel * g.kernel;
        let (in_plane, out_plane) = (g.in_h * g.in_w, g.out_h * g.out_w);
        let mut dw = vec![0f32; c * kk];
        for b in 0..n {
            for ch in 0..c {
                let xp = &x[(b * c + ch) * in_plane..][..in_plane];
                let gp = &dy[(b * c + ch) * out_plane..][..out_plane];
                let wp = &mut dw[ch * kk..][..kk];
                for_each_tap(g, |o, i, t| wp[t] += gp[o] * xp[i]);
            }
        }
        Ok((CpuStorage::F32(dw), Shape::from((c, 1, g.kernel, g.kernel))))
    }
}

/// `x`: `(N, C, H, W)`, `weight`: `(C, 1, k, k)`.
pub fn depthwise_conv2d(x: &Tensor, weight: &Tensor, same_padding: bool, stride: usize) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    let (wc, one, k, k2) = weight.dims4()?;
    if wc != c || one != 1 || k != k2 {
        candle_core::bail!("depthwise weight {:?} does not match input channels {c}", weight.dims());
    }
    let geometry = if same_padding {
        DwGeometry::same(k, stride, h, w)
    } else {
        DwGeometry::symmetric(k, stride, h, w)
    };
    x.contiguous()?
        .apply_op2(&weight.contiguous()?, DepthwiseForward(geometry))
}

#[cfg(test)]
mod tests {
    use candle_core::{Device, Var};

    use super::*;

    fn reference(x: &Tensor, w: &Tensor, stride: usize) -> Tensor {
        let c = x.dims4().unwrap().1;
        let k = w.dims4().unwrap().2;
        x.conv2d(w, (k - 1) / 2, stride, 1, c).unwrap()
    }

    #[test]
    fn matches_grouped_convolution() {
        let dev = Device::Cpu;
        for (k, stride, h, w) in [(3, 1, 7, 6), (5, 2, 9, 8), (3, 2, 8, 8), (5, 1, 5, 5)] {
            let x = Tensor::randn(0f32, 1.0, (2, 3, h, w), &dev).unwrap();
            let wt = Tensor::randn(0f32, 1.0, (3, 1, k, k), &dev).unwrap();
            let ours = depthwise_conv2d(&x, &wt, false, stride).unwrap();
            let theirs = reference(&x, &wt, stride);
            assert_eq!(ours.dims(), theirs.dims());
            let diff = (ours - theirs).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
            assert!(diff < 1e-4, "k={k} s={stride}: {diff}");
        }
    }

    #[test]
    fn same_padding_output_size() {
        assert_eq!(same_pad(224, 3, 2), (112, 1));
        assert_eq!(same_pad(225, 3, 2), (113, 2));
        assert_eq!(same_pad(7, 5, 1), (7, 4));
        let g = DwGeometry::same(3, 2, 224, 224);
        assert_eq!((g.out_h, g.pad_top), (112, 0));
    }

    #[test]
    fn gradients_match_grouped_convolution() {
        let dev = Device::Cpu;
        for stride in [1, 2] {
            let x = Var::randn(0f32, 1.0, (2, 4, 7, 7), &dev).unwrap();
            let w = Var::randn(0f32, 1.0, (4, 1, 3, 3), &dev).unwrap();
            let probe = Tensor::randn(0f32, 1.0, depthwise_conv2d(&x, &w, false, stride).unwrap().dims(), &dev).unwrap();
            let ours = depthwise_conv2d(&x, &w, false, stride).unwrap().mul(&probe).unwrap().sum_all().unwrap();
            let theirs = reference(&x, &w, stride).mul(&probe).unwrap().sum_all().unwrap();
            let g1 = ours.backward().unwrap();
            let g2 = theirs.backward().unwrap();
            for v in [&x, &w] {
                let a = g1.get(v).unwrap();
                let b = g2.get(v).unwrap();
                let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
                assert!(diff < 1e-3, "stride {stride}: {diff}");
            }
        }
    }
}
