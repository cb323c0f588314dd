//! Zero-padded 3-tap cross-correlation kernels shared by forward and backward passes.
//!
//! Layouts are channel-major: input `[C, spatial..]`, kernel `[O, C, taps]`,
//! output `[O, spatial_out..]`. A 2D problem is treated as a 3D one with a
//! singleton depth axis and a single-tap kernel along it.

use crate::linalg::gemm;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Spatial input extent as `[depth, height, width]`.
    pub input: [usize; 3],
    pub output: [usize; 3],
    /// Taps per axis (1 or 3).
    pub taps: [usize; 3],
    pub stride: [usize; 3],
}

impl ConvGeometry {
    pub fn new(in_channels: usize, out_channels: usize, spatial: &[usize], stride: usize) -> Self {
        let (input, taps) = match *spatial {
            [h, w] => ([1, h, w], [1, 3, 3]),
            [d, h, w] => ([d, h, w], [3, 3, 3]),
            _ => panic!("convolution supports 2 or 3 spatial axes, got {spatial:?}"),
        };
        let mut stride3 = [stride; 3];
        if taps[0] == 1 {
            stride3[0] = 1;
        }
        let output = [0, 1, 2].map(|a| input[a].div_ceil(stride3[a]));
        Self {
            in_channels,
            out_channels,
            input,
            output,
            taps,
            stride: stride3,
        }
    }

    pub fn taps_per_kernel(&self) -> usize {
        self.taps.iter().product()
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.input.iter().product::<usize>()
    }

    pub fn output_len(&self) -> usize {
        self.out_channels * self.output.iter().product::<usize>()
    }

    pub fn output_spatial(&self, two_d: bool) -> Vec<usize> {
        if two_d {
            vec![self.output[1], self.output[2]]
        } else {
            self.output.to_vec()
        }
    }

    /// Padding along an axis: 1 for 3-tap axes, 0 for singleton ones.
    fn pad(&self, axis: usize) -> isize {
        (self.taps[axis] / 2) as isize
    }

    /// Output index range whose input index `o * s + k - pad` is in bounds.
    fn valid(&self, axis: usize, k: usize) -> (usize, usize) {
        let s = self.stride[axis] as isize;
        let shift = k as isize - self.pad(axis);
        let n = self.input[axis] as isize;
        let lo = if shift >= 0 { 0 } else { (-shift + s - 1) / s };
        let hi = ((n - 1 - shift).div_euclid(s) + 1).min(self.output[axis] as isize);
        (lo.max(0) as usize, hi.max(0) as usize)
    }
}

/// Calls `visit(input start, output start, run length, input step)` for each
/// output row touched by tap `(kz, ky, kx)`.
#[inline]
fn for_each_tap(
    g: &ConvGeometry,
    kz: usize,
    ky: usize,
    kx: usize,
    mut visit: impl FnMut(usize, usize, usize, usize),
) {
    let [_, ih, iw] = g.input;
    let [_, oh, ow] = g.output;
    let (z0, z1) = g.valid(0, kz);
    let (y0, y1) = g.valid(1, ky);
    let (x0, x1) = g.valid(2, kx);
    if x0 >= x1 {
        return;
    }
    for oz in z0..z1 {
        let iz = (oz * g.stride[0]) as isize + kz as isize - g.pad(0);
        for oy in y0..y1 {
            let iy = (oy * g.stride[1]) as isize + ky as isize - g.pad(1);
            let in_row = (iz as usize * ih + iy as usize) * iw;
            let out_row = (oz * oh + oy) * ow;
            let ix0 = (x0 * g.stride[2]) as isize + kx as isize - g.pad(2);
            visit(in_row + ix0 as usize, out_row + x0, x1 - x0, g.stride[2]);
        }
    }
}

/// Unfolds the input into a `[C * taps, out positions]` patch matrix.
fn im2col(g: &ConvGeometry, input: &[f64]) -> Vec<f64> {
    let in_plane: usize = g.input.iter().product();
    let out_plane: usize = g.output.iter().product();
    let taps = g.taps_per_kernel();
    let mut cols = vec![0.0; g.in_channels * taps * out_plane];
    for c in 0..g.in_channels {
        let src = &input[c * in_plane..(c + 1) * in_plane];
        let mut t = 0;
        for kz in 0..g.taps[0] {
            for ky in 0..g.taps[1] {
                for kx in 0..g.taps[2] {
                    let row = &mut cols[(c * taps + t) * out_plane..][..out_plane];
                    for_each_tap(g, kz, ky, kx, |i, j, n, s| {
                        for (q, d) in row[j..j + n].iter_mut().enumerate() {
                            *d = src[i + q * s];
                        }
                    });
                    t += 1;
                }
            }
        }
    }
    cols
}

pub fn conv_forward(g: &ConvGeometry, input: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
    let out_plane: usize = g.output.iter().product();
    let inner = g.in_channels * g.taps_per_kernel();
    let cols = im2col(g, input);
    let mut out: Vec<f64> = (0..g.output_len()).map(|i| bias[i / out_plane]).collect();
    gemm(g.out_channels, inner, out_plane, kernel, false, &cols, false, &mut out);
    out
}

/// Returns `(d input, d kernel, d bias)` for upstream cotangent `upstream`.
pub fn conv_backward(
    g: &ConvGeometry,
    input: &[f64],
    kernel: &[f64],
    upstream: &[f64],
    need_input: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let in_plane: usize = g.input.iter().product();
    let out_plane: usize = g.output.iter().product();
    let taps = g.taps_per_kernel();
    let inner = g.in_channels * taps;
    let d_b = (0..g.out_channels)
        .map(|o| upstream[o * out_plane..(o + 1) * out_plane].iter().sum())
        .collect();
    let cols = im2col(g, input);
    let mut d_k = vec![0.0; kernel.len()];
    gemm(g.out_channels, out_plane, inner, upstream, false, &cols, true, &mut d_k);
    let d_in = need_input.then(|| {
        let mut d_cols = vec![0.0; cols.len()];
        gemm(inner, g.out_channels, out_plane, kernel, true, upstream, false, &mut d_cols);
        let mut d_in = vec![0.0; g.input_len()];
        for c in 0..g.in_channels {
            let dst = &mut d_in[c * in_plane..(c + 1) * in_plane];
            let mut t = 0;
            for kz in 0..g.taps[0] {
                for ky in 0..g.taps[1] {
                    for kx in 0..g.taps[2] {
                        let row = &d_cols[(c * taps + t) * out_plane..][..out_plane];
                        for_each_tap(g, kz, ky, kx, |i, j, n, s| {
                            for (q, v) in row[j..j + n].iter().enumerate() {
                                dst[i + q * s] += v;
                            }
                        });
                        t += 1;
                    }
                }
            }
        }
        d_in
    });
    (d_in, d_k, d_b)
}
