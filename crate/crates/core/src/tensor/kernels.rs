//! Slice-level kernels. Every accumulation runs in ascending index order so
//! results are bitwise reproducible and match a naive loop nest.

use super::Real;

/// `c[m×n] += A · b[k×n]` where `A[i][kk] = a[i·rs + kk·cs]`. Rows of `c`
/// are updated four at a time per row of `b`; every element accumulates its
/// `k` products in increasing `kk` order starting from its current value,
/// so the result equals the plain triple loop exactly.
#[allow(clippy::too_many_arguments)]
fn gemm_strided<T: Real>(k: usize, n: usize, a: &[T], rs: usize, cs: usize, b: &[T], c: &mut [T]) {
    let mut rows = c.chunks_exact_mut(4 * n);
    let mut i0 = 0;
    for block in &mut rows {
        let (c0, rest) = block.split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3) = rest.split_at_mut(n);
        for (kk, brow) in b.chunks_exact(n).enumerate().take(k) {
            let at = |r: usize| a[(i0 + r) * rs + kk * cs];
            let (a0, a1, a2, a3) = (at(0), at(1), at(2), at(3));
            for j in 0..n {
                let bv = brow[j];
                c0[j] = c0[j] + a0 * bv;
                c1[j] = c1[j] + a1 * bv;
                c2[j] = c2[j] + a2 * bv;
                c3[j] = c3[j] + a3 * bv;
            }
        }
        i0 += 4;
    }
    for (r, crow) in rows.into_remainder().chunks_exact_mut(n).enumerate() {
        let i = i0 + r;
        for (kk, brow) in b.chunks_exact(n).enumerate().take(k) {
            let av = a[i * rs + kk * cs];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    gemm_strided(k, n, a, k, 1, b, c);
}

/// `c[m×n] += aᵀ · b` with `a` stored `k×m`.
pub fn gemm_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    gemm_strided(k, n, a, 1, m, b, c);
}

/// `c[m×n] += a · bᵀ` with `b` stored `n×k`.
pub fn gemm_nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let mut bt = vec![T::zero(); k * n];
    transpose(n, k, b, &mut bt);
    gemm_nn(m, k, n, a, &bt, c);
}

/// Writes the transpose of `a[r×c]` into `t[c×r]`.
pub fn transpose<T: Real>(r: usize, c: usize, a: &[T], t: &mut [T]) {
    const TILE: usize = 16;
    for i0 in (0..r).step_by(TILE) {
        for j0 in (0..c).step_by(TILE) {
            for i in i0..(i0 + TILE).min(r) {
                for j in j0..(j0 + TILE).min(c) {
                    t[j * r + i] = a[i * c + j];
                }
            }
        }
    }
}

/// Geometry of one 2-D convolution, expressed in the direction of the
/// strided (downsampling) map: `input` side `h×w` to `out` side `oh×ow`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Output size of the strided map, or `None` unless the kernel fits and
    /// the division is exact.
    pub fn forward(channels: usize, h: usize, w: usize, kernel: usize, stride: usize, pad: usize) -> Option<Self> {
        let span = |len: usize| -> Option<usize> {
            let padded = len + 2 * pad;
            if stride == 0 || kernel == 0 || padded < kernel || !(padded - kernel).is_multiple_of(stride) {
                None
            } else {
                Some((padded - kernel) / stride + 1)
            }
        };
        Some(ConvGeom {
            channels,
            h,
            w,
            kernel,
            stride,
            pad,
            oh: span(h)?,
            ow: span(w)?,
        })
    }

    /// Geometry whose strided map sends the transposed-conv output (side
    /// `(h-1)·stride - 2·pad + kernel`) back to `h×w`.
    pub fn transposed(channels: usize, h: usize, w: usize, kernel: usize, stride: usize, pad: usize) -> Option<Self> {
        let grow = |len: usize| -> Option<usize> {
            if stride == 0 || kernel == 0 || len == 0 {
                return None;
            }
            let full = (len - 1) * stride + kernel;
            (full > 2 * pad).then(|| full - 2 * pad)
        };
        let big_h = grow(h)?;
        let big_w = grow(w)?;
        let g = Self::forward(channels, big_h, big_w, kernel, stride, pad)?;
        (g.oh == h && g.ow == w).then_some(g)
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Output columns `ox` whose input column `ox·stride + kw - pad` lies in `0..w`.
fn valid_span(g: &ConvGeom, kw: usize) -> (usize, usize) {
    let lo = if g.pad > kw { (g.pad - kw).div_ceil(g.stride) } else { 0 };
    let hi = if g.w + g.pad > kw { ((g.w + g.pad - kw - 1) / g.stride + 1).min(g.ow) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfolds `x[C×H×W]` into `col[(C·K·K)×(OH·OW)]`; padding reads as zero.
pub fn im2col<T: Real>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    im2col_into(g, x, col, g.col_cols(), 0);
}

/// [`im2col`] into the column block starting at `off` of a matrix with
/// row length `ld`.
pub fn im2col_into<T: Real>(g: &ConvGeom, x: &[T], col: &mut [T], ld: usize, off: usize) {
    let k = g.kernel;
    let p = g.col_cols();
    for c in 0..g.channels {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for kh in 0..k {
            for kw in 0..k {
                let row = (c * k + kh) * k + kw;
                let dst = &mut col[row * ld + off..row * ld + off + p];
                let (lo, hi) = valid_span(g, kw);
                for oy in 0..g.oh {
                    let d = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    let iy = (oy * g.stride + kh) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        d.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    d[..lo].fill(T::zero());
                    d[hi..].fill(T::zero());
                    let first = lo * g.stride + kw - g.pad;
                    if g.stride == 1 {
                        d[lo..hi].copy_from_slice(&src[first..first + (hi - lo)]);
                    } else {
                        for (j, v) in d[lo..hi].iter_mut().enumerate() {
                            *v = src[first + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds `col` back into `x[C×H×W]`.
pub fn col2im<T: Real>(g: &ConvGeom, col: &[T], x: &mut [T]) {
    col2im_from(g, col, g.col_cols(), 0, x);
}

/// Adjoint of [`im2col_into`].
pub fn col2im_from<T: Real>(g: &ConvGeom, col: &[T], ld: usize, off: usize, x: &mut [T]) {
    let k = g.kernel;
    let p = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for kh in 0..k {
            for kw in 0..k {
                let row = (c * k + kh) * k + kw;
                let src = &col[row * ld + off..row * ld + off + p];
                let (lo, hi) = valid_span(g, kw);
                if lo == hi {
                    continue;
                }
                let first = lo * g.stride + kw - g.pad;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + kh) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    let s = &src[oy * g.ow + lo..oy * g.ow + hi];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        for (d, &v) in dst[first..first + s.len()].iter_mut().zip(s) {
                            *d = *d + v;
                        }
                    } else {
                        for (j, &v) in s.iter().enumerate() {
                            let d = &mut dst[first + j * g.stride];
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

/// `[N, C, P]` to `[C, N·P]`.
pub fn pack_channels<T: Real>(n: usize, c: usize, p: usize, x: &[T], out: &mut [T]) {
    for i in 0..n {
        for ch in 0..c {
            out[ch * n * p + i * p..ch * n * p + (i + 1) * p].copy_from_slice(&x[(i * c + ch) * p..(i * c + ch + 1) * p]);
        }
    }
}

/// `[C, N·P]` to `[N, C, P]`.
pub fn unpack_channels<T: Real>(n: usize, c: usize, p: usize, x: &[T], out: &mut [T]) {
    for i in 0..n {
        for ch in 0..c {
            out[(i * c + ch) * p..(i * c + ch + 1) * p].copy_from_slice(&x[ch * n * p + i * p..ch * n * p + (i + 1) * p]);
        }
    }
}

/// Cross-correlation of a batch `x[N, C, H, W]` with `w[O, C, K, K]` into
/// `out[N, O, OH, OW]`.
pub fn conv2d_batch<T: Real>(g: &ConvGeom, n: usize, out_ch: usize, x: &[T], w: &[T], b: Option<&[T]>, out: &mut [T]) {
    let (rows, p) = (g.col_rows(), g.col_cols());
    let per_in = g.channels * g.h * g.w;
    let np = n * p;
    let mut col = vec![T::zero(); rows * np];
    for i in 0..n {
        im2col_into(g, &x[i * per_in..(i + 1) * per_in], &mut col, np, i * p);
    }
    let mut y = vec![T::zero(); out_ch * np];
    gemm_nn(out_ch, rows, np, w, &col, &mut y);
    unpack_channels(n, out_ch, p, &y, out);
    if let Some(b) = b {
        add_channel_bias(out, b, p);
    }
}

/// Input and weight gradients of [`conv2d_batch`] given the output
/// gradient `gy[N, O, OH, OW]`. Results accumulate into `dx` and `dw`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_batch_backward<T: Real>(
    g: &ConvGeom,
    n: usize,
    out_ch: usize,
    x: &[T],
    w: &[T],
    gy: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
) {
    let (rows, p) = (g.col_rows(), g.col_cols());
    let per_in = g.channels * g.h * g.w;
    let np = n * p;
    let mut gp = vec![T::zero(); out_ch * np];
    pack_channels(n, out_ch, p, gy, &mut gp);
    let mut col = vec![T::zero(); rows * np];
    if let Some(dw) = dw {
        for i in 0..n {
            im2col_into(g, &x[i * per_in..(i + 1) * per_in], &mut col, np, i * p);
        }
        gemm_nt(out_ch, np, rows, &gp, &col, dw);
    }
    if let Some(dx) = dx {
        col.fill(T::zero());
        gemm_tn(rows, out_ch, np, w, &gp, &mut col);
        for i in 0..n {
            col2im_from(g, &col, np, i * p, &mut dx[i * per_in..(i + 1) * per_in]);
        }
    }
}

/// Transposed convolution of a batch `x[N, I, OH, OW]` with `w[I, C, K, K]`
/// into `out[N, C, H, W]`; the adjoint of [`conv2d_batch`] in `x`.
pub fn conv_transpose2d_batch<T: Real>(g: &ConvGeom, n: usize, in_ch: usize, x: &[T], w: &[T], b: Option<&[T]>, out: &mut [T]) {
    let (rows, p) = (g.col_rows(), g.col_cols());
    let plane = g.h * g.w;
    let per_out = g.channels * plane;
    let np = n * p;
    let mut xp = vec![T::zero(); in_ch * np];
    pack_channels(n, in_ch, p, x, &mut xp);
    let mut col = vec![T::zero(); rows * np];
    gemm_tn(rows, in_ch, np, w, &xp, &mut col);
    out.fill(T::zero());
    for i in 0..n {
        col2im_from(g, &col, np, i * p, &mut out[i * per_out..(i + 1) * per_out]);
    }
    if let Some(b) = b {
        add_channel_bias(out, b, plane);
    }
}

/// Input and weight gradients of [`conv_transpose2d_batch`] given
/// `gy[N, C, H, W]`. Results accumulate into `dx` and `dw`.
#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_batch_backward<T: Real>(
    g: &ConvGeom,
    n: usize,
    in_ch: usize,
    x: &[T],
    w: &[T],
    gy: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
) {
    let (rows, p) = (g.col_rows(), g.col_cols());
    let per_out = g.channels * g.h * g.w;
    let np = n * p;
    let mut col = vec![T::zero(); rows * np];
    for i in 0..n {
        im2col_into(g, &gy[i * per_out..(i + 1) * per_out], &mut col, np, i * p);
    }
    if let Some(dx) = dx {
        let mut dxp = vec![T::zero(); in_ch * np];
        gemm_nn(in_ch, rows, np, w, &col, &mut dxp);
        let mut unpacked = vec![T::zero(); dxp.len()];
        unpack_channels(n, in_ch, p, &dxp, &mut unpacked);
        for (d, v) in dx.iter_mut().zip(unpacked) {
            *d = *d + v;
        }
    }
    if let Some(dw) = dw {
        let mut xp = vec![T::zero(); in_ch * np];
        pack_channels(n, in_ch, p, x, &mut xp);
        gemm_nt(in_ch, np, rows, &xp, &col, dw);
    }
}

fn add_channel_bias<T: Real>(out: &mut [T], b: &[T], plane: usize) {
    for (o, chunk) in out.chunks_mut(plane).enumerate() {
        let bo = b[o % b.len()];
        chunk.iter_mut().for_each(|v| *v = *v + bo);
    }
}

/// Sums each `plane`-sized channel block of `g` into `acc[c]`.
pub fn accumulate_channel_sums<T: Real>(g: &[T], plane: usize, acc: &mut [T]) {
    for (o, chunk) in g.chunks(plane).enumerate() {
        let mut s = T::zero();
        for &v in chunk {
            s = s + v;
        }
        acc[o] = acc[o] + s;
    }
}
