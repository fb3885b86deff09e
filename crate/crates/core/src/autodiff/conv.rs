//! 3-D cross-correlation kernels (im2col + GEMM).

use super::gemm::gemm;
use crate::error::{Error, Result};

/// Stride and zero padding along (depth, height, width).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Default for Conv3dSpec {
    fn default() -> Self {
        Conv3dSpec {
            stride: [1, 1, 1],
            padding: [0, 0, 0],
        }
    }
}

impl Conv3dSpec {
    /// Unit stride with padding that preserves spatial extents for odd kernels.
    pub fn same(kernel: [usize; 3]) -> Self {
        Conv3dSpec {
            stride: [1, 1, 1],
            padding: [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub output: [usize; 3],
    pub spec: Conv3dSpec,
}

impl ConvGeometry {
    pub fn new(input_shape: &[usize], kernel_shape: &[usize], spec: Conv3dSpec) -> Result<Self> {
        if input_shape.len() != 5 || kernel_shape.len() != 5 || input_shape[1] != kernel_shape[1] {
            return Err(Error::shape("conv3d", input_shape, kernel_shape));
        }
        let mut output = [0; 3];
        for ax in 0..3 {
            let padded = input_shape[2 + ax] + 2 * spec.padding[ax];
            let k = kernel_shape[2 + ax];
            if k == 0 || k > padded || spec.stride[ax] == 0 {
                return Err(Error::shape("conv3d", input_shape, kernel_shape));
            }
            output[ax] = (padded - k) / spec.stride[ax] + 1;
        }
        Ok(ConvGeometry {
            batch: input_shape[0],
            c_in: input_shape[1],
            c_out: kernel_shape[0],
            input: [input_shape[2], input_shape[3], input_shape[4]],
            kernel: [kernel_shape[2], kernel_shape[3], kernel_shape[4]],
            output,
            spec,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.c_out, self.output[0], self.output[1], self.output[2]]
    }

    fn input_volume(&self) -> usize {
        self.input.iter().product()
    }

    fn output_volume(&self) -> usize {
        self.output.iter().product()
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kernel.iter().product::<usize>()
    }

    /// Visits every (column-row, output position, input offset) triple of the
    /// im2col matrix for one sample; out-of-bounds taps are skipped.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let [kd, kh, kw] = self.kernel;
        let [od, oh, ow] = self.output;
        let [id, ih, iw] = self.input;
        let [sd, sh, sw] = self.spec.stride;
        let [pd, ph, pw] = self.spec.padding;
        let out_vol = self.output_volume();
        let in_vol = self.input_volume();
        let mut row = 0;
        for c in 0..self.c_in {
            for dz in 0..kd {
                for dy in 0..kh {
                    for dx in 0..kw {
                        let base = row * out_vol;
                        for z in 0..od {
                            let iz = (z * sd + dz) as isize - pd as isize;
                            if iz < 0 || iz >= id as isize {
                                continue;
                            }
                            for y in 0..oh {
                                let iy = (y * sh + dy) as isize - ph as isize;
                                if iy < 0 || iy >= ih as isize {
                                    continue;
                                }
                                for x in 0..ow {
                                    let ix = (x * sw + dx) as isize - pw as isize;
                                    if ix < 0 || ix >= iw as isize {
                                        continue;
                                    }
                                    let src = c * in_vol + (iz as usize * ih + iy as usize) * iw + ix as usize;
                                    f(base + (z * oh + y) * ow + x, src);
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    fn im2col(&self, sample: &[f64], cols: &mut [f64]) {
        cols.fill(0.0);
        self.for_each_tap(|dst, src| cols[dst] = sample[src]);
    }

    fn col2im(&self, cols: &[f64], sample_grad: &mut [f64]) {
        self.for_each_tap(|dst, src| sample_grad[src] += cols[dst]);
    }
}

pub(crate) fn forward(geom: &ConvGeometry, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let in_stride = geom.c_in * geom.input_volume();
    let out_vol = geom.output_volume();
    let out_stride = geom.c_out * out_vol;
    let ck = geom.patch_len();
    let mut out = vec![0.0; geom.batch * out_stride];
    let mut cols = vec![0.0; ck * out_vol];
    for n in 0..geom.batch {
        geom.im2col(&input[n * in_stride..(n + 1) * in_stride], &mut cols);
        gemm(
            geom.c_out,
            ck,
            out_vol,
            kernel,
            false,
            &cols,
            false,
            &mut out[n * out_stride..(n + 1) * out_stride],
            false,
        );
    }
    out
}

/// Accumulates input and kernel gradients for upstream gradient `grad`.
pub(crate) fn backward(
    geom: &ConvGeometry,
    input: &[f64],
    kernel: &[f64],
    grad: &[f64],
    input_grad: Option<&mut [f64]>,
    kernel_grad: Option<&mut [f64]>,
) {
    let in_stride = geom.c_in * geom.input_volume();
    let out_vol = geom.output_volume();
    let out_stride = geom.c_out * out_vol;
    let ck = geom.patch_len();
    let mut cols = vec![0.0; ck * out_vol];
    if let Some(kg) = kernel_grad {
        for n in 0..geom.batch {
            geom.im2col(&input[n * in_stride..(n + 1) * in_stride], &mut cols);
            let g = &grad[n * out_stride..(n + 1) * out_stride];
            gemm(geom.c_out, out_vol, ck, g, false, &cols, true, kg, true);
        }
    }
    if let Some(ig) = input_grad {
        for n in 0..geom.batch {
            let g = &grad[n * out_stride..(n + 1) * out_stride];
            gemm(ck, geom.c_out, out_vol, kernel, true, g, false, &mut cols, false);
            geom.col2im(&cols, &mut ig[n * in_stride..(n + 1) * in_stride]);
        }
    }
}
