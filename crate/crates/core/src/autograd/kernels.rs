//! Dense kernels behind the autodiff ops. Row-major throughout.

use crate::scalar::Real;

const COL_BLOCK: usize = 256;

/// `c[m×n] += a[m×k] · b[k×n]`.
pub fn gemm<T: Real>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let mut j0 = 0;
    while j0 < n {
        let j1 = (j0 + COL_BLOCK).min(n);
        let w = j1 - j0;
        let mut i = 0;
        while i + 4 <= m {
            let (r0, rest) = c[i * n..].split_at_mut(n);
            let (r1, rest) = rest.split_at_mut(n);
            let (r2, rest) = rest.split_at_mut(n);
            let r3 = &mut rest[..n];
            let c0 = &mut r0[j0..j1];
            let c1 = &mut r1[j0..j1];
            let c2 = &mut r2[j0..j1];
            let c3 = &mut r3[j0..j1];
            for p in 0..k {
                let brow = &b[p * n + j0..p * n + j1];
                let a0 = a[i * k + p];
                let a1 = a[(i + 1) * k + p];
                let a2 = a[(i + 2) * k + p];
                let a3 = a[(i + 3) * k + p];
                for j in 0..w {
                    let bv = brow[j];
                    c0[j] += a0 * bv;
                    c1[j] += a1 * bv;
                    c2[j] += a2 * bv;
                    c3[j] += a3 * bv;
                }
            }
            i += 4;
        }
        while i < m {
            let crow = &mut c[i * n + j0..i * n + j1];
            for p in 0..k {
                let av = a[i * k + p];
                if av == T::zero() {
                    continue;
                }
                let brow = &b[p * n + j0..p * n + j1];
                for j in 0..w {
                    crow[j] += av * brow[j];
                }
            }
            i += 1;
        }
        j0 = j1;
    }
}

/// Returns the transpose of a `rows×cols` matrix.
pub fn transpose<T: Real>(rows: usize, cols: usize, a: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    const TB: usize = 32;
    for i0 in (0..rows).step_by(TB) {
        for j0 in (0..cols).step_by(TB) {
            for i in i0..(i0 + TB).min(rows) {
                for j in j0..(j0 + TB).min(cols) {
                    out[j * rows + i] = a[i * cols + j];
                }
            }
        }
    }
    out
}

/// `c += op(a) · op(b)` where `op` optionally transposes. `a` is stored as
/// `m×k` (or `k×m` when `ta`), `b` as `k×n` (or `n×k` when `tb`).
#[allow(clippy::too_many_arguments)]
pub fn gemm_t<T: Real>(m: usize, n: usize, k: usize, a: &[T], ta: bool, b: &[T], tb: bool, c: &mut [T]) {
    let a_owned;
    let a = if ta {
        a_owned = transpose(k, m, a);
        &a_owned[..]
    } else {
        a
    };
    let b_owned;
    let b = if tb {
        b_owned = transpose(n, k, b);
        &b_owned[..]
    } else {
        b
    };
    gemm(m, n, k, a, b, c);
}

/// Unfolds one `channels×h×w` image into a `(channels·ks·ks)×(h·w)` column
/// matrix for a stride-1 convolution with zero padding `ks/2`.
pub fn im2col<T: Real>(x: &[T], channels: usize, h: usize, w: usize, ks: usize, col: &mut [T]) {
    let pad = (ks / 2) as isize;
    let hw = h * w;
    for c in 0..channels {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..ks {
            for kx in 0..ks {
                let r = (c * ks + ky) * ks + kx;
                let dst = &mut col[r * hw..(r + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let (x_lo, x_hi) = valid_range(dx, w);
                for y in 0..h {
                    let sy = y as isize + dy;
                    let drow = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let srow = &plane[sy as usize * w..(sy as usize + 1) * w];
                    drow[..x_lo].fill(T::zero());
                    drow[x_hi..].fill(T::zero());
                    let s0 = (x_lo as isize + dx) as usize;
                    drow[x_lo..x_hi].copy_from_slice(&srow[s0..s0 + (x_hi - x_lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into the image gradient.
pub fn col2im<T: Real>(col: &[T], channels: usize, h: usize, w: usize, ks: usize, x: &mut [T]) {
    let pad = (ks / 2) as isize;
    let hw = h * w;
    for c in 0..channels {
        let plane = &mut x[c * hw..(c + 1) * hw];
        for ky in 0..ks {
            for kx in 0..ks {
                let r = (c * ks + ky) * ks + kx;
                let src = &col[r * hw..(r + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let (x_lo, x_hi) = valid_range(dx, w);
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let srow = &src[y * w + x_lo..y * w + x_hi];
                    let s0 = (x_lo as isize + dx) as usize;
                    let prow = &mut plane[sy as usize * w + s0..sy as usize * w + s0 + srow.len()];
                    for (p, &v) in prow.iter_mut().zip(srow) {
                        *p += v;
                    }
                }
            }
        }
    }
}

/// Output columns `[lo, hi)` whose shifted source column `x + dx` is in bounds.
fn valid_range(dx: isize, w: usize) -> (usize, usize) {
    let lo = (-dx).max(0) as usize;
    let hi = (w as isize - dx).min(w as isize).max(lo as isize) as usize;
    (lo.min(w), hi)
}
