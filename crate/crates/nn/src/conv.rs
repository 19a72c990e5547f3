//! im2col convolution kernels shared by the forward and backward passes.

/// Kernel geometry of a 3-D convolution over `(depth, height, width)`.
///
/// A 2-D convolution is expressed as a 3-D one with a depth-1 kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvCfg {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvCfg {
    /// Cubic kernel with "same" padding for odd `k`.
    pub fn cube(k: usize, stride: usize) -> Self {
        Self {
            kernel: [k; 3],
            stride: [stride; 3],
            padding: [k / 2; 3],
        }
    }

    /// In-plane kernel that never mixes depth slices.
    pub fn planar(k: usize, stride: usize) -> Self {
        Self {
            kernel: [1, k, k],
            stride: [1, stride, stride],
            padding: [0, k / 2, k / 2],
        }
    }

    pub fn out_dims(&self, input: [usize; 3]) -> [usize; 3] {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.padding[a];
            assert!(
                padded >= self.kernel[a],
                "kernel {:?} larger than padded input {input:?}",
                self.kernel
            );
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        out
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }
}

// Upper bound on im2col buffer size (floats); convolutions are evaluated in
// slabs of output depth planes that fit.
const COL_BUDGET: usize = 1 << 22;

pub(crate) fn planes_per_chunk(k: usize, plane: usize) -> usize {
    (COL_BUDGET / (k * plane).max(1)).max(1)
}

/// Fills `col` (`[C·kvol, planes·oh·ow]`) for output depth planes `z0..z1`.
pub(crate) fn im2col(
    x: &[f32],
    channels: usize,
    dims: [usize; 3],
    cfg: &ConvCfg,
    out: [usize; 3],
    z0: usize,
    z1: usize,
    col: &mut [f32],
) {
    let [d, h, w] = dims;
    let [_, oh, ow] = out;
    let [kd, kh, kw] = cfg.kernel;
    let [sd, sh, sw] = cfg.stride;
    let [pd, ph, pw] = cfg.padding;
    let pc = (z1 - z0) * oh * ow;
    let mut row = 0;
    for c in 0..channels {
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let dst = &mut col[row * pc..(row + 1) * pc];
                    let mut idx = 0;
                    for oz in z0..z1 {
                        let iz = (oz * sd + kz) as isize - pd as isize;
                        if iz < 0 || iz >= d as isize {
                            dst[idx..idx + oh * ow].fill(0.0);
                            idx += oh * ow;
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                dst[idx..idx + ow].fill(0.0);
                                idx += ow;
                                continue;
                            }
                            let base = ((c * d + iz as usize) * h + iy as usize) * w;
                            for ox in 0..ow {
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                dst[idx] = if ix >= 0 && (ix as usize) < w {
                                    x[base + ix as usize]
                                } else {
                                    0.0
                                };
                                idx += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Scatter-adds `col` back into `dx`; adjoint of [`im2col`].
pub(crate) fn col2im(
    col: &[f32],
    channels: usize,
    dims: [usize; 3],
    cfg: &ConvCfg,
    out: [usize; 3],
    z0: usize,
    z1: usize,
    dx: &mut [f32],
) {
    let [d, h, w] = dims;
    let [_, oh, ow] = out;
    let [kd, kh, kw] = cfg.kernel;
    let [sd, sh, sw] = cfg.stride;
    let [pd, ph, pw] = cfg.padding;
    let pc = (z1 - z0) * oh * ow;
    let mut row = 0;
    for c in 0..channels {
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let src = &col[row * pc..(row + 1) * pc];
                    let mut idx = 0;
                    for oz in z0..z1 {
                        let iz = (oz * sd + kz) as isize - pd as isize;
                        if iz < 0 || iz >= d as isize {
                            idx += oh * ow;
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                idx += ow;
                                continue;
                            }
                            let base = ((c * d + iz as usize) * h + iy as usize) * w;
                            for ox in 0..ow {
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                if ix >= 0 && (ix as usize) < w {
                                    dx[base + ix as usize] += src[idx];
                                }
                                idx += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// `c = a·b + beta·c` with arbitrary strides; `a` is `m×k`, `b` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the debug assertions above spell out the bounds every caller upholds;
    // all three slices outlive the call and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}
