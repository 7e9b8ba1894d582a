//! Dense numeric kernels shared by the graph ops.
//!
//! All loops have a fixed iteration order, so results are bitwise
//! reproducible. Matrix products go through one register-blocked kernel.

/// Per-axis padding as `(before, after)` counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Padding {
    pub f: (usize, usize),
    pub t: (usize, usize),
}

impl Padding {
    pub const NONE: Padding = Padding { f: (0, 0), t: (0, 0) };

    /// "Same"-style padding: the output extent is `ceil(len / stride)`.
    /// Odd totals put the extra sample after the signal, so kernel 4 with
    /// stride 2 pads (1, 1) and halves an even axis exactly.
    pub fn same(len: (usize, usize), kernel: (usize, usize), stride: (usize, usize)) -> Self {
        let axis = |n: usize, k: usize, s: usize| {
            let out = n.div_ceil(s);
            let total = ((out - 1) * s + k).saturating_sub(n);
            (total / 2, total - total / 2)
        };
        Padding {
            f: axis(len.0, kernel.0, stride.0),
            t: axis(len.1, kernel.1, stride.1),
        }
    }
}

/// Output length of a strided correlation, or `None` when the kernel does
/// not fit inside the padded input.
pub fn conv_out_len(n: usize, pad: (usize, usize), k: usize, s: usize) -> Option<usize> {
    let padded = n + pad.0 + pad.1;
    if k > padded || s == 0 {
        return None;
    }
    Some((padded - k) / s + 1)
}

/// Sum of products with eight independent accumulators, combined in a fixed
/// order.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let base = c * 8;
        for lane in 0..8 {
            acc[lane] += a[base + lane] * b[base + lane];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

const MR: usize = 4;
const NR: usize = 8;

/// Register-blocked `c += a · b`. Each output element is the sequential sum
/// over `p` added to `c` once, so results do not depend on which
/// instantiation runs (no fused multiply-add is ever emitted).
#[inline(always)]
fn gemm_nn_body(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    let row_blocks = m.div_ceil(MR);
    // A packed as [block][p][r], zero rows past m.
    let mut ap = Vec::with_capacity(row_blocks * k * MR);
    for blk in 0..row_blocks {
        for p in 0..k {
            for r in 0..MR {
                let i = blk * MR + r;
                ap.push(if i < m { a[i * k + p] } else { 0.0 });
            }
        }
    }
    let mut bp = vec![0.0; k * NR];
    for j0 in (0..n).step_by(NR) {
        let w = NR.min(n - j0);
        for p in 0..k {
            bp[p * NR..p * NR + w].copy_from_slice(&b[p * n + j0..p * n + j0 + w]);
        }
        for blk in 0..row_blocks {
            let mut acc = [[0.0f64; NR]; MR];
            let apb = &ap[blk * k * MR..(blk + 1) * k * MR];
            for (av, bv) in apb.chunks_exact(MR).zip(bp.chunks_exact(NR)) {
                for r in 0..MR {
                    for q in 0..NR {
                        acc[r][q] += av[r] * bv[q];
                    }
                }
            }
            for (r, acc_row) in acc.iter().enumerate() {
                let i = blk * MR + r;
                if i >= m {
                    break;
                }
                for (cv, v) in c[i * n + j0..i * n + j0 + w].iter_mut().zip(acc_row) {
                    *cv += v;
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_nn_avx2(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_nn_body(a, b, c, m, k, n)
}

/// `c += a · b` with `a: [m×k]`, `b: [k×n]`.
pub fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime.
        unsafe { gemm_nn_avx2(a, b, c, m, k, n) };
        return;
    }
    gemm_nn_body(a, b, c, m, k, n)
}

/// `c += aᵀ · b` with `a: [k×m]`, `b: [k×n]`.
pub fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    let at = transpose(a, k, m);
    gemm_nn(&at, b, c, m, k, n);
}

/// `c += a · bᵀ` with `a: [m×k]`, `b: [n×k]`.
pub fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    let bt = transpose(b, n, k);
    gemm_nn(a, &bt, c, m, k, n);
}

/// Transpose of a row-major `[rows×cols]` matrix.
pub fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..cols).flat_map(|c| (0..rows).map(move |r| x[r * cols + c])).collect()
}

/// Geometry of one strided 2-D correlation over a `[C×F×T]` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub in_f: usize,
    pub in_t: usize,
    pub k_f: usize,
    pub k_t: usize,
    pub s_f: usize,
    pub s_t: usize,
    pub pad: Padding,
    pub out_f: usize,
    pub out_t: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.k_f * self.k_t
    }

    pub fn col_cols(&self) -> usize {
        self.out_f * self.out_t
    }
}

/// Unfolds input patches into a `[C·k_f·k_t × F'·T']` matrix.
pub fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = g.col_cols();
    let mut col = vec![0.0; g.col_rows() * cols];
    for c in 0..g.channels {
        let plane = &x[c * g.in_f * g.in_t..(c + 1) * g.in_f * g.in_t];
        for a in 0..g.k_f {
            for b in 0..g.k_t {
                let row = (c * g.k_f + a) * g.k_t + b;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for of in 0..g.out_f {
                    let f = (of * g.s_f + a) as isize - g.pad.f.0 as isize;
                    if f < 0 || f >= g.in_f as isize {
                        continue;
                    }
                    let src = &plane[f as usize * g.in_t..(f as usize + 1) * g.in_t];
                    let drow = &mut dst[of * g.out_t..(of + 1) * g.out_t];
                    for (ot, d) in drow.iter_mut().enumerate() {
                        let t = (ot * g.s_t + b) as isize - g.pad.t.0 as isize;
                        if t >= 0 && t < g.in_t as isize {
                            *d = src[t as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters patch columns back, accumulating overlaps.
pub fn col2im(col: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = g.col_cols();
    let mut x = vec![0.0; g.channels * g.in_f * g.in_t];
    for c in 0..g.channels {
        let plane = &mut x[c * g.in_f * g.in_t..(c + 1) * g.in_f * g.in_t];
        for a in 0..g.k_f {
            for b in 0..g.k_t {
                let row = (c * g.k_f + a) * g.k_t + b;
                let src = &col[row * cols..(row + 1) * cols];
                for of in 0..g.out_f {
                    let f = (of * g.s_f + a) as isize - g.pad.f.0 as isize;
                    if f < 0 || f >= g.in_f as isize {
                        continue;
                    }
                    let dst = &mut plane[f as usize * g.in_t..(f as usize + 1) * g.in_t];
                    let srow = &src[of * g.out_t..(of + 1) * g.out_t];
                    for (ot, &s) in srow.iter().enumerate() {
                        let t = (ot * g.s_t + b) as isize - g.pad.t.0 as isize;
                        if t >= 0 && t < g.in_t as isize {
                            dst[t as usize] += s;
                        }
                    }
                }
            }
        }
    }
    x
}
