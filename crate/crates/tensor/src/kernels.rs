//! Raw slice kernels shared by the forward and backward passes.

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += dot(arow, brow);
        }
    }
}

/// Four-lane dot product; the fixed lane order keeps results reproducible.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `out[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Valid-padding geometry of one spatial plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(channels: usize, height: usize, width: usize, kernel: usize, stride: usize) -> Self {
        ConvGeometry {
            channels,
            height,
            width,
            kernel,
            stride,
            out_h: (height - kernel) / stride + 1,
            out_w: (width - kernel) / stride + 1,
        }
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn plane_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Unfolds every `[c×h×w]` plane of an `n`-sample batch into
/// `[(c·k·k) × (n·oh·ow)]` columns; sample `s` owns columns `s·oh·ow..`.
pub(crate) fn im2col(input: &[f64], n: usize, g: &ConvGeometry, cols: &mut [f64]) {
    let (p, pl) = (g.positions(), g.plane_len());
    let ld = n * p;
    for s in 0..n {
        let plane = &input[s * pl..(s + 1) * pl];
        for c in 0..g.channels {
            for ki in 0..g.kernel {
                for kj in 0..g.kernel {
                    let row = (c * g.kernel + ki) * g.kernel + kj;
                    let dst = &mut cols[row * ld + s * p..row * ld + (s + 1) * p];
                    for oy in 0..g.out_h {
                        let y = oy * g.stride + ki;
                        let src = &plane[(c * g.height + y) * g.width..];
                        for ox in 0..g.out_w {
                            dst[oy * g.out_w + ox] = src[ox * g.stride + kj];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `out`.
pub(crate) fn col2im(cols: &[f64], n: usize, g: &ConvGeometry, out: &mut [f64]) {
    let (p, pl) = (g.positions(), g.plane_len());
    let ld = n * p;
    for s in 0..n {
        let plane = &mut out[s * pl..(s + 1) * pl];
        for c in 0..g.channels {
            for ki in 0..g.kernel {
                for kj in 0..g.kernel {
                    let row = (c * g.kernel + ki) * g.kernel + kj;
                    let src = &cols[row * ld + s * p..row * ld + (s + 1) * p];
                    for oy in 0..g.out_h {
                        let y = oy * g.stride + ki;
                        let base = (c * g.height + y) * g.width;
                        for ox in 0..g.out_w {
                            plane[base + ox * g.stride + kj] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `[n×c×p]` to `[c×(n·p)]`.
pub(crate) fn to_channel_major(x: &[f64], n: usize, c: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for s in 0..n {
        for ch in 0..c {
            out[ch * n * p + s * p..ch * n * p + (s + 1) * p].copy_from_slice(&x[(s * c + ch) * p..(s * c + ch + 1) * p]);
        }
    }
    out
}

/// Inverse of [`to_channel_major`].
pub(crate) fn to_sample_major(x: &[f64], n: usize, c: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for s in 0..n {
        for ch in 0..c {
            out[(s * c + ch) * p..(s * c + ch + 1) * p].copy_from_slice(&x[ch * n * p + s * p..ch * n * p + (s + 1) * p]);
        }
    }
    out
}
