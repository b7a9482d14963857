//! Dense small tensors and the mode product driving sum-factorization.
//!
//! Layout is fixed: axis 0 fastest, so the linear index of (i_0, .., i_{d-1})
//! is i_0 + n_0*(i_1 + n_1*i_2). That matches the function-index
//! linearization of `SplineSpace`, letting assembled row blocks be written
//! out without any permutation.

use std::ops::Range;

/// Value-type tensor for tests and coefficient grids. The assembly hot loop
/// uses the free slice-based kernels below instead to reuse scratch buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), shape.iter().product::<usize>());
        assert!(!shape.is_empty());
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self::new(shape, vec![0.0; len])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn at(&self, multi: &[usize]) -> f64 {
        debug_assert_eq!(multi.len(), self.shape.len());
        let mut idx = 0;
        for (l, (&i, &n)) in multi.iter().zip(&self.shape).enumerate().rev() {
            debug_assert!(i < n, "index {i} out of bounds {n} in axis {l}");
            idx = idx * n + i;
        }
        self.data[idx]
    }

    /// Contracts axis `mode` with `mat` (row-major, `t` x `shape[mode]`).
    pub fn mode_product(&self, mode: usize, mat: &[f64], t: usize) -> DenseTensor {
        let mut out_shape = self.shape.clone();
        out_shape[mode] = t;
        let mut out = DenseTensor::zeros(out_shape);
        mode_product_into(&mut out.data, mat, t, &self.shape, &self.data, mode);
        out
    }

    /// Gathers `self[ranges]` into a new tensor.
    pub fn extract(&self, ranges: &[Range<usize>]) -> DenseTensor {
        let mut out = DenseTensor::zeros(ranges.iter().map(|r| r.len()).collect());
        extract_subtensor_into(&mut out.data, &self.data, &self.shape, ranges);
        out
    }
}

/// FLOPs a mode product performs: one multiply-add per (output row, input
/// element) pair.
pub fn mode_product_flops(t: usize, src_shape: &[usize]) -> u64 {
    2 * t as u64 * src_shape.iter().map(|&n| n as u64).product::<u64>()
}

/// Applies `mat` (row-major, `t` rows, `src_shape[mode]` columns) along axis
/// `mode` of `src`, writing into `dst` (resized as needed). Returns the FLOP
/// count. This is the sum-factorization kernel: contiguous inner runs on
/// axis 0, or consecutive matrix rows when `mode` is 0 itself.
pub fn mode_product_into(
    dst: &mut Vec<f64>,
    mat: &[f64],
    t: usize,
    src_shape: &[usize],
    src: &[f64],
    mode: usize,
) -> u64 {
    let d = src_shape.len();
    assert!(mode < d);
    let n_mode = src_shape[mode];
    assert_eq!(mat.len(), t * n_mode);
    debug_assert_eq!(src.len(), src_shape.iter().product::<usize>());
    let inner: usize = src_shape[..mode].iter().product();
    let outer: usize = src_shape[mode + 1..].iter().product();
    dst.clear();
    dst.resize(inner * t * outer, 0.0);

    if inner == 1 {
        // Axis 0: every output entry is a dot product over a contiguous run.
        for o in 0..outer {
            let src_block = &src[o * n_mode..(o + 1) * n_mode];
            let dst_block = &mut dst[o * t..(o + 1) * t];
            for (r, out) in dst_block.iter_mut().enumerate() {
                let row = &mat[r * n_mode..(r + 1) * n_mode];
                let mut acc = 0.0;
                for (&m, &s) in row.iter().zip(src_block) {
                    acc += m * s;
                }
                *out = acc;
            }
        }
    } else {
        // Higher axes: accumulate scaled contiguous runs of length `inner`.
        for o in 0..outer {
            let src_base = o * n_mode * inner;
            let dst_base = o * t * inner;
            for r in 0..t {
                let dst_run = dst_base + r * inner;
                let dst_slice = &mut dst[dst_run..dst_run + inner];
                for c in 0..n_mode {
                    let coef = mat[r * n_mode + c];
                    let src_slice = &src[src_base + c * inner..src_base + (c + 1) * inner];
                    for (d, &s) in dst_slice.iter_mut().zip(src_slice) {
                        *d += coef * s;
                    }
                }
            }
        }
    }
    mode_product_flops(t, src_shape)
}

/// Copies the block `src[ranges]` into `dst` (resized to the block volume),
/// keeping the axis-0-fastest layout.
pub fn extract_subtensor_into(
    dst: &mut Vec<f64>,
    src: &[f64],
    src_shape: &[usize],
    ranges: &[Range<usize>],
) {
    assert_eq!(ranges.len(), src_shape.len());
    for (r, &n) in ranges.iter().zip(src_shape) {
        assert!(r.end <= n, "range {r:?} exceeds axis length {n}");
    }
    let volume: usize = ranges.iter().map(|r| r.len()).product();
    dst.clear();
    dst.reserve(volume);
    let r0 = &ranges[0];
    match ranges.len() {
        1 => dst.extend_from_slice(&src[r0.start..r0.end]),
        2 => {
            let n0 = src_shape[0];
            for i1 in ranges[1].clone() {
                let base = i1 * n0;
                dst.extend_from_slice(&src[base + r0.start..base + r0.end]);
            }
        }
        3 => {
            let n0 = src_shape[0];
            let n01 = src_shape[0] * src_shape[1];
            for i2 in ranges[2].clone() {
                for i1 in ranges[1].clone() {
                    let base = i2 * n01 + i1 * n0;
                    dst.extend_from_slice(&src[base + r0.start..base + r0.end]);
                }
            }
        }
        d => panic!("unsupported tensor dimension {d}"),
    }
    debug_assert_eq!(dst.len(), volume);
}
