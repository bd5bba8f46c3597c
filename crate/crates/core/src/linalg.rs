//! Dense row-major matrices and the two GEMM shapes the solver needs.
//!
//! Every product entry is accumulated in index order starting from zero, so the
//! value of `out[i][b]` depends only on row `i` of the left operand and column
//! `b` of the right operand. Results are therefore independent of batch
//! composition, tiling, and worker count. On x86-64 machines with FMA the
//! accumulation is fused, elsewhere it is a separate multiply and add; bits
//! can differ between those two kinds of machine.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length does not match shape");
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        let p = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n * p);
        for r in rows {
            assert_eq!(r.len(), p, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix { rows: n, cols: p, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.data[i * self.cols + j]).collect()
    }

    pub fn set_column(&mut self, j: usize, values: &[f64]) {
        assert_eq!(values.len(), self.rows);
        for (i, v) in values.iter().enumerate() {
            self.data[i * self.cols + j] = *v;
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut data = vec![0.0; self.data.len()];
        transpose_into(&self.data, self.rows, self.cols, &mut data);
        Matrix { rows: self.cols, cols: self.rows, data }
    }

    /// Keeps the listed columns, in the given order.
    pub fn select_columns(&self, keep: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(self.rows, keep.len());
        for i in 0..self.rows {
            let src = self.row(i);
            let dst = &mut out.data[i * keep.len()..(i + 1) * keep.len()];
            for (d, &j) in dst.iter_mut().zip(keep) {
                *d = src[j];
            }
        }
        out
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// `self * v` accumulated in index order.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.cols);
        (0..self.rows)
            .map(|i| {
                let mut acc = 0.0;
                for (a, b) in self.row(i).iter().zip(v) {
                    acc += a * b;
                }
                acc
            })
            .collect()
    }

    /// `self' * v` accumulated in row order.
    pub fn matvec_t(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += a * vi;
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

const ROW_BLOCK: usize = 4;
const PAR_WORK_THRESHOLD: usize = 1 << 18;

/// `out = a * b` with `a: rows x inner`, `b: inner x cols`, `out: rows x cols`,
/// all row-major.
pub fn gemm(a: &[f64], rows: usize, inner: usize, b: &[f64], cols: usize, out: &mut [f64]) {
    assert_eq!(a.len(), rows * inner);
    assert_eq!(b.len(), inner * cols);
    assert_eq!(out.len(), rows * cols);
    if rows == 0 || cols == 0 {
        return;
    }
    let work = rows * inner * cols;
    if work >= PAR_WORK_THRESHOLD && rayon::current_num_threads() > 1 {
        let chunk_rows = rows.div_ceil(rayon::current_num_threads() * 2).next_multiple_of(ROW_BLOCK);
        out.par_chunks_mut(chunk_rows * cols).enumerate().for_each(|(c, out_chunk)| {
            let r0 = c * chunk_rows;
            let nr = out_chunk.len() / cols;
            gemm_serial(&a[r0 * inner..(r0 + nr) * inner], nr, inner, b, cols, out_chunk);
        });
    } else {
        gemm_serial(a, rows, inner, b, cols, out);
    }
}

/// Writes the transpose of row-major `src` (`rows x cols`) into `dst`, in
/// cache-sized tiles.
pub fn transpose_into(src: &[f64], rows: usize, cols: usize, dst: &mut [f64]) {
    const T: usize = 32;
    assert_eq!(src.len(), rows * cols);
    assert_eq!(dst.len(), rows * cols);
    for i0 in (0..rows).step_by(T) {
        for j0 in (0..cols).step_by(T) {
            for i in i0..(i0 + T).min(rows) {
                for j in j0..(j0 + T).min(cols) {
                    dst[j * rows + i] = src[i * cols + j];
                }
            }
        }
    }
}

/// Whether products use fused multiply-add on this machine. Decided once per
/// process, so every GEMM call (any width, any thread) rounds the same way.
pub fn uses_fma() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        static FMA: std::sync::OnceLock<bool> = std::sync::OnceLock::new();
        *FMA.get_or_init(|| std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma"))
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

fn gemm_serial(a: &[f64], rows: usize, inner: usize, b: &[f64], cols: usize, out: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    if uses_fma() {
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: avx512f and fma were detected at runtime.
            unsafe { gemm_avx512(a, rows, inner, b, cols, out) };
        } else {
            // SAFETY: avx2 and fma were detected at runtime.
            unsafe { gemm_avx2_fma(a, rows, inner, b, cols, out) };
        }
        return;
    }
    gemm_panels::<ROW_BLOCK, 4, false>(a, rows, inner, b, cols, out);
}

// Wider registers only; each entry is still the same fused left-to-right sum,
// so the bits match the avx2 path.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f,avx2,fma")]
unsafe fn gemm_avx512(a: &[f64], rows: usize, inner: usize, b: &[f64], cols: usize, out: &mut [f64]) {
    gemm_panels::<6, 16, true>(a, rows, inner, b, cols, out);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn gemm_avx2_fma(a: &[f64], rows: usize, inner: usize, b: &[f64], cols: usize, out: &mut [f64]) {
    gemm_panels::<6, 8, true>(a, rows, inner, b, cols, out);
}

/// Packs `b` into panels of `W` columns and each block of `R` rows of `a`
/// into a row-interleaved strip, then sweeps every strip over every panel.
#[inline(always)]
fn gemm_panels<const R: usize, const W: usize, const FUSED: bool>(
    a: &[f64],
    rows: usize,
    inner: usize,
    b: &[f64],
    cols: usize,
    out: &mut [f64],
) {
    if cols < 4 {
        // too narrow to pay for packing `a`
        match cols {
            1 => return gemm_narrow::<1, FUSED>(a, rows, inner, b, out),
            2 => return gemm_narrow::<2, FUSED>(a, rows, inner, b, out),
            3 => return gemm_narrow::<3, FUSED>(a, rows, inner, b, out),
            _ => unreachable!(),
        }
    }
    let mut panels = Vec::with_capacity(inner * cols);
    for c0 in (0..cols).step_by(W) {
        let nc = W.min(cols - c0);
        for brow in b.chunks_exact(cols) {
            panels.extend_from_slice(&brow[c0..c0 + nc]);
        }
    }
    let mut strip = vec![0.0; R * inner];
    let mut i0 = 0;
    while i0 + R <= rows {
        for (r, arow) in a[i0 * inner..(i0 + R) * inner].chunks_exact(inner).enumerate() {
            for (slot, &x) in strip.chunks_exact_mut(R).zip(arow) {
                slot[r] = x;
            }
        }
        for c0 in (0..cols).step_by(W) {
            let nc = W.min(cols - c0);
            let panel = &panels[c0 * inner..(c0 + nc) * inner];
            let out_rows = &mut out[i0 * cols..(i0 + R) * cols];
            #[cfg(target_arch = "x86_64")]
            if FUSED && R == 6 && (nc == 8 || (nc == 16 && W == 16)) {
                // SAFETY: FUSED paths are only reached from functions compiled
                // with (and dispatched after detecting) avx2+fma, and avx512f
                // for W == 16.
                unsafe {
                    if nc == 16 {
                        simd::tile_6x16(&strip, panel, out_rows, cols, c0);
                    } else {
                        simd::tile_6x8(&strip, panel, out_rows, cols, c0);
                    }
                }
                continue;
            }
            macro_rules! go {
                ($($n:literal)*) => {
                    match nc {
                        $($n => block::<R, $n, FUSED>(&strip, panel, out_rows, cols, c0),)*
                        _ => unreachable!("panel width is at most 16"),
                    }
                };
            }
            go!(1 2 3 4 5 6 7 8 9 10 11 12 13 14 15 16);
        }
        i0 += R;
    }
    for i in i0..rows {
        let arow = &a[i * inner..(i + 1) * inner];
        for c0 in (0..cols).step_by(W) {
            let nc = W.min(cols - c0);
            let panel = &panels[c0 * inner..(c0 + nc) * inner];
            for c in 0..nc {
                let mut acc = 0.0;
                for (&x, brow) in arow.iter().zip(panel.chunks_exact(nc)) {
                    acc = madd::<FUSED>(x, brow[c], acc);
                }
                out[i * cols + c0 + c] = acc;
            }
        }
    }
}

/// Four rows of `a` at a time straight from memory, for `NC < 4` columns.
#[inline(always)]
fn gemm_narrow<const NC: usize, const FUSED: bool>(a: &[f64], rows: usize, inner: usize, b: &[f64], out: &mut [f64]) {
    let (bs, _) = b.as_chunks::<NC>();
    let mut i0 = 0;
    while i0 + 4 <= rows {
        let mut rows4 = a[i0 * inner..(i0 + 4) * inner].chunks_exact(inner);
        let (a0, a1, a2, a3) = (rows4.next().unwrap(), rows4.next().unwrap(), rows4.next().unwrap(), rows4.next().unwrap());
        let mut acc = [[0.0f64; NC]; 4];
        for ((((&x0, &x1), &x2), &x3), brow) in a0.iter().zip(a1).zip(a2).zip(a3).zip(bs) {
            let xs = [x0, x1, x2, x3];
            for r in 0..4 {
                for c in 0..NC {
                    acc[r][c] = madd::<FUSED>(xs[r], brow[c], acc[r][c]);
                }
            }
        }
        out[i0 * NC..(i0 + 4) * NC].copy_from_slice(acc.as_flattened());
        i0 += 4;
    }
    for i in i0..rows {
        let mut acc = [0.0f64; NC];
        for (&x, brow) in a[i * inner..(i + 1) * inner].iter().zip(bs) {
            for c in 0..NC {
                acc[c] = madd::<FUSED>(x, brow[c], acc[c]);
            }
        }
        out[i * NC..(i + 1) * NC].copy_from_slice(&acc);
    }
}

#[inline(always)]
fn madd<const FUSED: bool>(x: f64, y: f64, acc: f64) -> f64 {
    if FUSED {
        x.mul_add(y, acc)
    } else {
        acc + x * y
    }
}

/// `R x NC` output tile. Every entry is a plain left-to-right sum over the
/// inner dimension, so it does not depend on the tiling or panel width.
#[inline(always)]
fn block<const R: usize, const NC: usize, const FUSED: bool>(
    strip: &[f64],
    panel: &[f64],
    out_rows: &mut [f64],
    cols: usize,
    c0: usize,
) {
    let (xs, _) = strip.as_chunks::<R>();
    let (bs, _) = panel.as_chunks::<NC>();
    let mut acc = [[0.0f64; NC]; R];
    for (x, brow) in xs.iter().zip(bs) {
        for r in 0..R {
            for c in 0..NC {
                acc[r][c] = madd::<FUSED>(x[r], brow[c], acc[r][c]);
            }
        }
    }
    for (row, out_row) in acc.iter().zip(out_rows.chunks_exact_mut(cols)) {
        out_row[c0..c0 + NC].copy_from_slice(row);
    }
}

/// Hand-written full-width tiles. The optimizer vectorizes [`block`] in
/// release builds but not reliably with debug assertions on; these keep the
/// same per-lane fused arithmetic either way.
#[cfg(target_arch = "x86_64")]
mod simd {
    use std::arch::x86_64::*;

    /// 6 rows x 16 columns. `strip` is row-interleaved (6 per inner index),
    /// `panel` holds 16 values per inner index.
    #[target_feature(enable = "avx512f,avx2,fma")]
    pub(super) unsafe fn tile_6x16(strip: &[f64], panel: &[f64], out_rows: &mut [f64], cols: usize, c0: usize) {
        let inner = strip.len() / 6;
        assert!(panel.len() >= inner * 16 && out_rows.len() >= 5 * cols + c0 + 16);
        let (sp, pp) = (strip.as_ptr(), panel.as_ptr());
        let mut acc = [_mm512_setzero_pd(); 12];
        for j in 0..inner {
            // SAFETY: j < inner, so both reads stay inside the slices.
            let b0 = unsafe { _mm512_loadu_pd(pp.wrapping_add(16 * j)) };
            let b1 = unsafe { _mm512_loadu_pd(pp.wrapping_add(16 * j + 8)) };
            for r in 0..6 {
                let x = _mm512_set1_pd(unsafe { *sp.wrapping_add(6 * j + r) });
                acc[2 * r] = _mm512_fmadd_pd(x, b0, acc[2 * r]);
                acc[2 * r + 1] = _mm512_fmadd_pd(x, b1, acc[2 * r + 1]);
            }
        }
        for r in 0..6 {
            let dst = &mut out_rows[r * cols + c0..r * cols + c0 + 16];
            // SAFETY: dst has 16 entries.
            unsafe {
                _mm512_storeu_pd(dst.as_mut_ptr(), acc[2 * r]);
                _mm512_storeu_pd(dst.as_mut_ptr().wrapping_add(8), acc[2 * r + 1]);
            }
        }
    }

    /// 6 rows x 8 columns on 256-bit registers.
    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn tile_6x8(strip: &[f64], panel: &[f64], out_rows: &mut [f64], cols: usize, c0: usize) {
        let inner = strip.len() / 6;
        assert!(panel.len() >= inner * 8 && out_rows.len() >= 5 * cols + c0 + 8);
        let (sp, pp) = (strip.as_ptr(), panel.as_ptr());
        let mut acc = [_mm256_setzero_pd(); 12];
        for j in 0..inner {
            // SAFETY: j < inner, so both reads stay inside the slices.
            let b0 = unsafe { _mm256_loadu_pd(pp.wrapping_add(8 * j)) };
            let b1 = unsafe { _mm256_loadu_pd(pp.wrapping_add(8 * j + 4)) };
            for r in 0..6 {
                let x = _mm256_set1_pd(unsafe { *sp.wrapping_add(6 * j + r) });
                acc[2 * r] = _mm256_fmadd_pd(x, b0, acc[2 * r]);
                acc[2 * r + 1] = _mm256_fmadd_pd(x, b1, acc[2 * r + 1]);
            }
        }
        for r in 0..6 {
            let dst = &mut out_rows[r * cols + c0..r * cols + c0 + 8];
            // SAFETY: dst has 8 entries.
            unsafe {
                _mm256_storeu_pd(dst.as_mut_ptr(), acc[2 * r]);
                _mm256_storeu_pd(dst.as_mut_ptr().wrapping_add(4), acc[2 * r + 1]);
            }
        }
    }
}

/// Largest eigenvalue of `X'X` (the squared top singular value of `X`) by power
/// iteration from a fixed pseudo-random start vector.
pub fn top_singular_value_sq(x: &Matrix, rel_tol: f64, max_iter: usize) -> f64 {
    let p = x.cols();
    if p == 0 || x.rows() == 0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v: Vec<f64> = (0..p).map(|_| rng.gen::<f64>() + 0.5).collect();
    let mut norm = v.iter().map(|t| t * t).sum::<f64>().sqrt();
    v.iter_mut().for_each(|t| *t /= norm);
    let mut lambda = 0.0;
    for _ in 0..max_iter {
        let xv = x.matvec(&v);
        let next_lambda = xv.iter().map(|t| t * t).sum::<f64>();
        let w = x.matvec_t(&xv);
        norm = w.iter().map(|t| t * t).sum::<f64>().sqrt();
        if norm == 0.0 {
            return next_lambda;
        }
        v = w.into_iter().map(|t| t / norm).collect();
        let converged = (next_lambda - lambda).abs() <= rel_tol * next_lambda;
        lambda = next_lambda;
        if converged {
            break;
        }
    }
    // Rayleigh quotient at the final iterate.
    let xv = x.matvec(&v);
    lambda.max(xv.iter().map(|t| t * t).sum::<f64>())
}
