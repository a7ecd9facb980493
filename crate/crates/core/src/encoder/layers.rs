//! Layer kernels with explicit backward passes. All tensors are row-major
//! `f64` slices; feature maps are laid out as `[channel][row][col]`.

/// `c = alpha · op(a) · op(b) + beta · c` where `op(a)` is `m × k` and
/// `op(b)` is `k × n`. `ta`/`tb` select the transpose of a stored
/// row-major matrix.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs size");
    assert_eq!(b.len(), k * n, "gemm: rhs size");
    assert_eq!(c.len(), m * n, "gemm: output size");
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee that every index reachable through
    // the given dimensions and strides lies inside the three slices, and `c`
    // is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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

/// Geometry of a 3×3, stride-2, zero-padding-1 convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub c_in: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub c_out: usize,
}

pub const KERNEL: usize = 3;
pub const STRIDE: usize = 2;
pub const PAD: usize = 1;

impl ConvShape {
    pub fn h_out(&self) -> usize {
        (self.h_in + 2 * PAD - KERNEL) / STRIDE + 1
    }

    pub fn w_out(&self) -> usize {
        (self.w_in + 2 * PAD - KERNEL) / STRIDE + 1
    }

    /// Rows of the unfolded input (`c_in · 9`).
    pub fn patch_len(&self) -> usize {
        self.c_in * KERNEL * KERNEL
    }

    pub fn out_pixels(&self) -> usize {
        self.h_out() * self.w_out()
    }

    pub fn in_len(&self) -> usize {
        self.c_in * self.h_in * self.w_in
    }

    pub fn out_len(&self) -> usize {
        self.c_out * self.out_pixels()
    }
}

/// Unfolds `input` into a `patch_len × out_pixels` matrix.
pub fn im2col(input: &[f64], s: &ConvShape, col: &mut [f64]) {
    let (ho, wo) = (s.h_out(), s.w_out());
    let p = ho * wo;
    debug_assert_eq!(input.len(), s.in_len());
    debug_assert_eq!(col.len(), s.patch_len() * p);
    for ci in 0..s.c_in {
        let plane = &input[ci * s.h_in * s.w_in..(ci + 1) * s.h_in * s.w_in];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (ci * KERNEL + ky) * KERNEL + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * STRIDE + ky) as isize - PAD as isize;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy as usize >= s.h_in {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * s.w_in..(iy as usize + 1) * s.w_in];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * STRIDE + kx) as isize - PAD as isize;
                        *v = if ix < 0 || ix as usize >= s.w_in { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `col` back and accumulates into `out`.
pub fn col2im(col: &[f64], s: &ConvShape, out: &mut [f64]) {
    let (ho, wo) = (s.h_out(), s.w_out());
    let p = ho * wo;
    debug_assert_eq!(out.len(), s.in_len());
    for ci in 0..s.c_in {
        let plane = &mut out[ci * s.h_in * s.w_in..(ci + 1) * s.h_in * s.w_in];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (ci * KERNEL + ky) * KERNEL + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * STRIDE + ky) as isize - PAD as isize;
                    if iy < 0 || iy as usize >= s.h_in {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * s.w_in..(iy as usize + 1) * s.w_in];
                    for ox in 0..wo {
                        let ix = (ox * STRIDE + kx) as isize - PAD as isize;
                        if ix >= 0 && (ix as usize) < s.w_in {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Convolution forward. `col` receives the unfolded input (kept for the
/// backward pass), `out` the `c_out × out_pixels` pre-activations.
pub fn conv_forward(input: &[f64], s: &ConvShape, weight: &[f64], bias: &[f64], col: &mut [f64], out: &mut [f64]) {
    im2col(input, s, col);
    let p = s.out_pixels();
    for (c, row) in out.chunks_exact_mut(p).enumerate() {
        row.fill(bias[c]);
    }
    gemm(s.c_out, s.patch_len(), p, 1.0, weight, false, col, false, 1.0, out);
}

/// Convolution backward. Accumulates into `d_weight` and `d_bias`; when
/// `d_input` is given, it is overwritten with the input gradient.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    d_out: &[f64],
    s: &ConvShape,
    weight: &[f64],
    col: &[f64],
    d_weight: &mut [f64],
    d_bias: &mut [f64],
    d_input: Option<&mut [f64]>,
    scratch: &mut Vec<f64>,
) {
    let p = s.out_pixels();
    let k = s.patch_len();
    gemm(s.c_out, p, k, 1.0, d_out, false, col, true, 1.0, d_weight);
    for (c, row) in d_out.chunks_exact(p).enumerate() {
        d_bias[c] += row.iter().sum::<f64>();
    }
    if let Some(d_input) = d_input {
        scratch.clear();
        scratch.resize(k * p, 0.0);
        gemm(k, s.c_out, p, 1.0, weight, true, d_out, false, 0.0, scratch);
        d_input.fill(0.0);
        col2im(scratch, s, d_input);
    }
}

pub fn relu_inplace(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Masks `grad` by the rectifier's derivative, read off its output
/// (zero at and below the kink).
pub fn relu_backward_inplace(output: &[f64], grad: &mut [f64]) {
    for (g, &a) in grad.iter_mut().zip(output) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Global average pooling over each channel's `pixels` values.
pub fn gap_forward(x: &[f64], channels: usize, pixels: usize) -> Vec<f64> {
    x.chunks_exact(pixels)
        .take(channels)
        .map(|c| c.iter().sum::<f64>() / pixels as f64)
        .collect()
}

pub fn gap_backward(d_pooled: &[f64], pixels: usize) -> Vec<f64> {
    let scale = 1.0 / pixels as f64;
    d_pooled.iter().flat_map(|&g| std::iter::repeat_n(g * scale, pixels)).collect()
}

/// `y = W x + b` with `W` stored `out × in`.
pub fn linear_forward(x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let mut y = bias.to_vec();
    gemm(bias.len(), x.len(), 1, 1.0, weight, false, x, false, 1.0, &mut y);
    y
}

/// Accumulates parameter gradients and returns the input gradient.
pub fn linear_backward(x: &[f64], weight: &[f64], dy: &[f64], d_weight: &mut [f64], d_bias: &mut [f64]) -> Vec<f64> {
    let (n_out, n_in) = (dy.len(), x.len());
    gemm(n_out, 1, n_in, 1.0, dy, false, x, false, 1.0, d_weight);
    for (db, g) in d_bias.iter_mut().zip(dy) {
        *db += g;
    }
    let mut dx = vec![0.0; n_in];
    gemm(n_in, n_out, 1, 1.0, weight, true, dy, false, 0.0, &mut dx);
    dx
}

/// Lower bound on the norm used by [`l2_normalize`].
pub const NORM_FLOOR: f64 = 1e-12;

/// Returns `y / max(‖y‖, 1e-12)` and `‖y‖`.
pub fn l2_normalize(y: &[f64]) -> (Vec<f64>, f64) {
    let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    let denom = norm.max(NORM_FLOOR);
    (y.iter().map(|v| v / denom).collect(), norm)
}

/// Backward of [`l2_normalize`]: `(I − d dᵀ) g / ‖y‖` above the floor,
/// `g / 1e-12` (the layer is linear there) below it.
pub fn l2_normalize_backward(y: &[f64], g: &[f64]) -> Vec<f64> {
    let (d, norm) = l2_normalize(y);
    if norm > NORM_FLOOR {
        let dot: f64 = d.iter().zip(g).map(|(a, b)| a * b).sum();
        d.iter().zip(g).map(|(di, gi)| (gi - di * dot) / norm).collect()
    } else {
        g.iter().map(|gi| gi / NORM_FLOOR).collect()
    }
}
