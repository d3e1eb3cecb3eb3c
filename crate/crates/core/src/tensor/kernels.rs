//! Plain-slice matrix kernels. Every output element accumulates its terms in
//! ascending inner-index order starting from 0.0, so results are
//! reproducible bit-for-bit across runs.

/// `a` (m×k) times `b` (k×n).
///
/// Interior 4×8 output tiles keep their sums in registers; edge rows and
/// columns fall back to a plain loop. Either way each element sums its terms
/// in ascending `p` with separate multiplies and adds, so the AVX2 build
/// chosen at runtime gives the same bits as the baseline one.
pub fn matmul_slices(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected on this CPU.
            return unsafe { matmul_avx2(a, b, m, k, n) };
        }
    }
    matmul_tiled(a, b, m, k, n)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matmul_avx2(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    matmul_tiled(a, b, m, k, n)
}

const TILE_R: usize = 4;
const TILE_C: usize = 8;

#[inline(always)]
fn matmul_tiled(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    let (mt, nt) = (m - m % TILE_R, n - n % TILE_C);
    for i in (0..mt).step_by(TILE_R) {
        let rows: [&[f64]; TILE_R] = std::array::from_fn(|r| &a[(i + r) * k..(i + r + 1) * k]);
        for j in (0..nt).step_by(TILE_C) {
            let mut acc = [[0.0f64; TILE_C]; TILE_R];
            for p in 0..k {
                let bp: &[f64; TILE_C] = b[p * n + j..p * n + j + TILE_C].try_into().expect("tile width");
                for r in 0..TILE_R {
                    let av = rows[r][p];
                    for c in 0..TILE_C {
                        acc[r][c] += av * bp[c];
                    }
                }
            }
            for r in 0..TILE_R {
                out[(i + r) * n + j..(i + r) * n + j + TILE_C].copy_from_slice(&acc[r]);
            }
        }
    }
    for i in 0..m {
        let cols = if i < mt { nt..n } else { 0..n };
        for j in cols {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// `a` (m×k) times the transpose of `b` (n×k).
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let bt = transpose(b, n, k);
    matmul_slices(a, &bt, m, k, n)
}

/// Transpose of `a` (k×m) times `b` (k×n).
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            let row = &mut out[i * n..(i + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += api * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// tanh through a single `exp`; absolute error within a few ulp of 1, so
/// relative accuracy degrades as |x| approaches 0.
pub(crate) fn tanh(x: f64) -> f64 {
    let e = (-2.0 * x.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + tanh(inner))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = tanh(inner);
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}
