// Dense kernels behind the tape ops. Every reduction here runs in a fixed
// order so forward and backward results are bit-reproducible.

const KC: usize = 128;
const NC: usize = 1024;
const NR: usize = 16;
/// Target number of output positions unfolded at once by a convolution.
const CONV_CHUNK: usize = 512;

/// `c[m,n] += a[m,k] * b[k,n]` on contiguous matrices.
pub(crate) fn gemm_nn(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    gemm_nn_strided(c, n, a, k, b, n, m, k, n);
}

/// `c[m,n] += a[m,k] * b[k,n]` with row strides `ldc`, `lda`, `ldb`.
///
/// Blocked over `k` and `n` with zero-padded packed panels of `b`. Each
/// output element accumulates its `k` products in index order.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_nn_strided(
    c: &mut [f64],
    ldc: usize,
    a: &[f64],
    lda: usize,
    b: &[f64],
    ldb: usize,
    m: usize,
    k: usize,
    n: usize,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let ncb = NC.min(n).div_ceil(NR) * NR;
    let mut panel = vec![0.0; KC.min(k) * ncb];
    for jc in (0..n).step_by(NC) {
        let nc = NC.min(n - jc);
        for pc in (0..k).step_by(KC) {
            let kc = KC.min(k - pc);
            // panel[(jp / NR) * kc * NR + p * NR + l] = b[pc + p, jc + jp + l]
            for jp in (0..nc).step_by(NR) {
                let w = NR.min(nc - jp);
                let dst = &mut panel[jp * kc..jp * kc + kc * NR];
                for p in 0..kc {
                    let src = (pc + p) * ldb + jc + jp;
                    dst[p * NR..p * NR + w].copy_from_slice(&b[src..src + w]);
                    dst[p * NR + w..(p + 1) * NR].fill(0.0);
                }
            }
            let mut i = 0;
            while i < m {
                let rows = match m - i {
                    8.. => 8,
                    4..=7 => 4,
                    2..=3 => 2,
                    _ => 1,
                };
                for jp in (0..nc).step_by(NR) {
                    let w = NR.min(nc - jp);
                    let pan = &panel[jp * kc..jp * kc + kc * NR];
                    let at = Tile {
                        i,
                        j: jc + jp,
                        w,
                        pc,
                        kc,
                    };
                    match rows {
                        8 => tile_nn::<8>(c, ldc, a, lda, pan, at),
                        4 => tile_nn::<4>(c, ldc, a, lda, pan, at),
                        2 => tile_nn::<2>(c, ldc, a, lda, pan, at),
                        _ => tile_nn::<1>(c, ldc, a, lda, pan, at),
                    }
                }
                i += rows;
            }
        }
    }
}

#[derive(Clone, Copy)]
struct Tile {
    i: usize,
    j: usize,
    w: usize,
    pc: usize,
    kc: usize,
}

#[inline(always)]
fn tile_nn<const R: usize>(c: &mut [f64], ldc: usize, a: &[f64], lda: usize, pan: &[f64], t: Tile) {
    let arows: [&[f64]; R] = std::array::from_fn(|r| {
        let o = (t.i + r) * lda + t.pc;
        &a[o..o + t.kc]
    });
    let pan = &pan[..t.kc * NR];
    let acc = micro::<R>(&arows, pan, t.kc);
    for (r, acc) in acc.iter().enumerate() {
        let o = (t.i + r) * ldc + t.j;
        for (d, s) in c[o..o + t.w].iter_mut().zip(acc) {
            *d += s;
        }
    }
}

#[cfg(all(target_arch = "x86_64", target_feature = "avx512f"))]
#[inline(always)]
fn micro<const R: usize>(arows: &[&[f64]; R], pan: &[f64], kc: usize) -> [[f64; NR]; R] {
    use std::arch::x86_64::*;
    assert!(pan.len() >= kc * NR && arows.iter().all(|r| r.len() >= kc));
    let mut out = [[0.0; NR]; R];
    // SAFETY: avx512f is enabled at compile time and every load stays
    // within the bounds asserted above
    unsafe {
        let mut acc = [[_mm512_setzero_pd(); 2]; R];
        let pp = pan.as_ptr();
        for p in 0..kc {
            let b0 = _mm512_loadu_pd(pp.add(p * NR));
            let b1 = _mm512_loadu_pd(pp.add(p * NR + 8));
            for r in 0..R {
                let av = _mm512_set1_pd(*arows[r].get_unchecked(p));
                acc[r][0] = _mm512_fmadd_pd(av, b0, acc[r][0]);
                acc[r][1] = _mm512_fmadd_pd(av, b1, acc[r][1]);
            }
        }
        for r in 0..R {
            _mm512_storeu_pd(out[r].as_mut_ptr(), acc[r][0]);
            _mm512_storeu_pd(out[r].as_mut_ptr().add(8), acc[r][1]);
        }
    }
    out
}

#[cfg(not(all(target_arch = "x86_64", target_feature = "avx512f")))]
#[inline(always)]
fn micro<const R: usize>(arows: &[&[f64]; R], pan: &[f64], kc: usize) -> [[f64; NR]; R] {
    let mut acc = [[0.0f64; NR]; R];
    for (p, bp) in pan[..kc * NR].chunks_exact(NR).enumerate() {
        for r in 0..R {
            let av = arows[r][p];
            for l in 0..NR {
                acc[r][l] = av.mul_add(bp[l], acc[r][l]);
            }
        }
    }
    acc
}

/// `[rows, cols]` (row stride `ld`) → contiguous `[cols, rows]`.
pub(crate) fn transpose(x: &[f64], ld: usize, rows: usize, cols: usize) -> Vec<f64> {
    const B: usize = 32;
    let mut out = vec![0.0; rows * cols];
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for cc in c0..(c0 + B).min(cols) {
                    out[cc * rows + r] = x[r * ld + cc];
                }
            }
        }
    }
    out
}

/// `c[m,n] += a[m,k] * b[n,k]^T`
pub(crate) fn gemm_nt(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    gemm_nt_strided(c, a, k, b, m, k, n);
}

/// `c[m,n] += a[m,k] * b[n,k]^T` with `a` of row stride `lda`; `c` and `b`
/// contiguous.
fn gemm_nt_strided(c: &mut [f64], a: &[f64], lda: usize, b: &[f64], m: usize, k: usize, n: usize) {
    if n <= m {
        let bt = transpose(b, k, n, k);
        gemm_nn_strided(c, n, a, lda, &bt, n, m, k, n);
        return;
    }
    // cheaper to transpose `a`: cᵀ = b · aᵀ
    let at = transpose(a, lda, m, k);
    let mut ct = vec![0.0; n * m];
    gemm_nn_strided(&mut ct, m, b, k, &at, m, n, k, m);
    for i in 0..m {
        for j in 0..n {
            c[i * n + j] += ct[j * m + i];
        }
    }
}

/// `c[m,n] += a[k,m]^T * b[k,n]`
pub(crate) fn gemm_tn(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let at = transpose(a, m, k, m);
    gemm_nn(c, &at, b, m, k, n);
}

/// Geometry of a (up to) three-dimensional convolution. Two-dimensional
/// convolutions use a unit depth axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeometry {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        input: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Option<Self> {
        let mut output = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * pad[a];
            if kernel[a] > padded || stride[a] == 0 {
                return None;
            }
            output[a] = (padded - kernel[a]) / stride[a] + 1;
        }
        Some(ConvGeometry {
            in_channels,
            out_channels,
            input,
            kernel,
            stride,
            pad,
            output,
        })
    }

    /// Rows of the unfolded input matrix.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }

    pub fn in_volume(&self) -> usize {
        self.input.iter().product()
    }

    pub fn out_volume(&self) -> usize {
        self.output.iter().product()
    }

    /// Input coordinate of output `o` at kernel offset `k` on axis `a`, if
    /// it falls inside the input.
    #[inline]
    fn source(&self, a: usize, o: usize, k: usize) -> Option<usize> {
        let v = o * self.stride[a] + k;
        (v >= self.pad[a] && v - self.pad[a] < self.input[a]).then(|| v - self.pad[a])
    }

    /// For kernel offset `k` on the last axis, the output range whose input
    /// coordinate falls inside the input.
    fn valid_span(&self, k: usize) -> (usize, usize) {
        let (s, p, n, o) = (self.stride[2], self.pad[2], self.input[2], self.output[2]);
        // input coordinate = out * s + k - p must lie in [0, n)
        let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
        let hi = if n + p > k { ((n + p - k - 1) / s + 1).min(o) } else { 0 };
        (lo, hi.max(lo))
    }

    /// Output rows (flattened depth × height) unfolded per chunk.
    fn chunk_rows(&self) -> usize {
        (CONV_CHUNK / self.output[2]).max(1)
    }

    /// Unfold output rows `[r0, r1)` of one batch item `x[C, D, H, W]` into
    /// `col[C*kvol, (r1 - r0) * out_w]`.
    fn im2col_rows(&self, x: &[f64], col: &mut [f64], r0: usize, r1: usize) {
        let [_, ih, iw] = self.input;
        let [_, oh, ow] = self.output;
        let [kd, kh, kw] = self.kernel;
        let sw = self.stride[2];
        let pw = self.pad[2];
        let ncols = (r1 - r0) * ow;
        let ivol = self.in_volume();
        let mut row = 0;
        for c in 0..self.in_channels {
            let xc = &x[c * ivol..(c + 1) * ivol];
            for dz in 0..kd {
                for dy in 0..kh {
                    for dx in 0..kw {
                        let (x0, x1) = self.valid_span(dx);
                        let dst = &mut col[row * ncols..(row + 1) * ncols];
                        for r in r0..r1 {
                            let drow = &mut dst[(r - r0) * ow..(r - r0 + 1) * ow];
                            let src = match (self.source(0, r / oh, dz), self.source(1, r % oh, dy)) {
                                (Some(iz), Some(iy)) => &xc[(iz * ih + iy) * iw..(iz * ih + iy + 1) * iw],
                                _ => {
                                    drow.fill(0.0);
                                    continue;
                                }
                            };
                            drow[..x0].fill(0.0);
                            drow[x1..].fill(0.0);
                            if sw == 1 {
                                let ix0 = x0 + dx - pw;
                                drow[x0..x1].copy_from_slice(&src[ix0..ix0 + (x1 - x0)]);
                            } else {
                                for xo in x0..x1 {
                                    drow[xo] = src[xo * sw + dx - pw];
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col_rows`]: scatter-add into `gx[C, D, H, W]`.
    fn col2im_rows(&self, col: &[f64], gx: &mut [f64], r0: usize, r1: usize) {
        let [_, ih, iw] = self.input;
        let [_, oh, ow] = self.output;
        let [kd, kh, kw] = self.kernel;
        let sw = self.stride[2];
        let pw = self.pad[2];
        let ncols = (r1 - r0) * ow;
        let ivol = self.in_volume();
        let mut row = 0;
        for c in 0..self.in_channels {
            let gc = &mut gx[c * ivol..(c + 1) * ivol];
            for dz in 0..kd {
                for dy in 0..kh {
                    for dx in 0..kw {
                        let (x0, x1) = self.valid_span(dx);
                        let src = &col[row * ncols..(row + 1) * ncols];
                        for r in r0..r1 {
                            let (Some(iz), Some(iy)) = (self.source(0, r / oh, dz), self.source(1, r % oh, dy)) else {
                                continue;
                            };
                            let dst = &mut gc[(iz * ih + iy) * iw..(iz * ih + iy + 1) * iw];
                            let srow = &src[(r - r0) * ow..(r - r0 + 1) * ow];
                            for xo in x0..x1 {
                                dst[xo * sw + dx - pw] += srow[xo];
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    /// Geometry mapping an output gradient to the input gradient as a plain
    /// convolution, when the stride is one everywhere.
    fn adjoint(&self) -> Option<ConvGeometry> {
        if self.stride != [1; 3] || (0..3).any(|a| self.pad[a] >= self.kernel[a]) {
            return None;
        }
        let pad = std::array::from_fn(|a| self.kernel[a] - 1 - self.pad[a]);
        let g = ConvGeometry::new(
            self.out_channels,
            self.in_channels,
            self.output,
            self.kernel,
            [1; 3],
            pad,
        )?;
        (g.output == self.input).then_some(g)
    }

    /// `w[o, c, z, y, x]` → `w'[c, o, kd-1-z, kh-1-y, kw-1-x]`
    fn flip(&self, w: &[f64]) -> Vec<f64> {
        let [kd, kh, kw] = self.kernel;
        let kvol = kd * kh * kw;
        let (ci, co) = (self.in_channels, self.out_channels);
        let mut out = vec![0.0; w.len()];
        for o in 0..co {
            for c in 0..ci {
                let src = &w[(o * ci + c) * kvol..(o * ci + c + 1) * kvol];
                let dst = &mut out[(c * co + o) * kvol..(c * co + o + 1) * kvol];
                for (n, &v) in src.iter().enumerate() {
                    dst[kvol - 1 - n] = v;
                }
            }
        }
        out
    }

    fn chunks(&self) -> impl Iterator<Item = (usize, usize)> {
        let rows = self.output[0] * self.output[1];
        let step = self.chunk_rows();
        (0..rows).step_by(step).map(move |r0| (r0, (r0 + step).min(rows)))
    }

    /// `out[B, Co, out_volume] = w * x + bias`
    pub fn forward(&self, x: &[f64], w: &[f64], bias: Option<&[f64]>, batch: usize) -> Vec<f64> {
        let k = self.patch_len();
        let (ivol, ovol) = (self.in_volume(), self.out_volume());
        let (co, ow) = (self.out_channels, self.output[2]);
        let mut out = vec![0.0; batch * co * ovol];
        let mut col = vec![0.0; k * self.chunk_rows() * ow];
        for b in 0..batch {
            let xb = &x[b * self.in_channels * ivol..(b + 1) * self.in_channels * ivol];
            let ob = &mut out[b * co * ovol..(b + 1) * co * ovol];
            if let Some(bias) = bias {
                for (c, &bv) in bias.iter().enumerate() {
                    ob[c * ovol..(c + 1) * ovol].fill(bv);
                }
            }
            for (r0, r1) in self.chunks() {
                let ncols = (r1 - r0) * ow;
                self.im2col_rows(xb, &mut col[..k * ncols], r0, r1);
                gemm_nn_strided(&mut ob[r0 * ow..], ovol, w, k, &col[..k * ncols], ncols, co, k, ncols);
            }
        }
        out
    }

    /// Gradients w.r.t. input, weight and bias given the output gradient.
    pub fn backward(
        &self,
        x: &[f64],
        w: &[f64],
        gout: &[f64],
        batch: usize,
        need_x: bool,
        need_w: bool,
    ) -> (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>) {
        let k = self.patch_len();
        let (ivol, ovol) = (self.in_volume(), self.out_volume());
        let (ci, co, ow) = (self.in_channels, self.out_channels, self.output[2]);
        let mut gx = need_x.then(|| vec![0.0; batch * ci * ivol]);
        let mut gw = need_w.then(|| vec![0.0; co * k]);
        let mut gb = vec![0.0; co];
        let cap = k * self.chunk_rows() * ow;
        let mut col = vec![0.0; cap];
        // stride 1: the input gradient is a full correlation with the flipped kernel
        let adjoint = self.adjoint();
        if let (Some((g2, wf)), Some(gx)) = (adjoint.as_ref().map(|g2| (g2, self.flip(w))), gx.as_mut()) {
            *gx = g2.forward(gout, &wf, None, batch);
        }
        let wt = (need_x && adjoint.is_none()).then(|| transpose(w, k, co, k));
        for b in 0..batch {
            let gb_out = &gout[b * co * ovol..(b + 1) * co * ovol];
            for c in 0..co {
                gb[c] += gb_out[c * ovol..(c + 1) * ovol].iter().sum::<f64>();
            }
            for (r0, r1) in self.chunks() {
                let ncols = (r1 - r0) * ow;
                let g = &gb_out[r0 * ow..];
                if let Some(gw) = gw.as_mut() {
                    self.im2col_rows(&x[b * ci * ivol..(b + 1) * ci * ivol], &mut col[..k * ncols], r0, r1);
                    gemm_nt_strided(gw, g, ovol, &col[..k * ncols], co, ncols, k);
                }
                if let (Some(gx), Some(wt)) = (gx.as_mut(), wt.as_ref()) {
                    let cb = &mut col[..k * ncols];
                    cb.fill(0.0);
                    gemm_nn_strided(cb, ncols, wt, co, g, ovol, k, co, ncols);
                    self.col2im_rows(cb, &mut gx[b * ci * ivol..(b + 1) * ci * ivol], r0, r1);
                }
            }
        }
        (gx, gw, gb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeometry, x: &[f64], w: &[f64]) -> Vec<f64> {
        let [id, ih, iw] = g.input;
        let [od, oh, ow] = g.output;
        let [kd, kh, kw] = g.kernel;
        let mut out = vec![0.0; g.out_channels * g.out_volume()];
        for o in 0..g.out_channels {
            for z in 0..od {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut s = 0.0;
                        for c in 0..g.in_channels {
                            for a in 0..kd {
                                for b in 0..kh {
                                    for e in 0..kw {
                                        let iz = (z * g.stride[0] + a) as isize - g.pad[0] as isize;
                                        let iy = (y * g.stride[1] + b) as isize - g.pad[1] as isize;
                                        let ix = (xo * g.stride[2] + e) as isize - g.pad[2] as isize;
                                        if iz < 0 || iy < 0 || ix < 0 {
                                            continue;
                                        }
                                        let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                        if iz >= id || iy >= ih || ix >= iw {
                                            continue;
                                        }
                                        let wv = w[(((o * g.in_channels + c) * kd + a) * kh + b) * kw + e];
                                        s += wv * x[((c * id + iz) * ih + iy) * iw + ix];
                                    }
                                }
                            }
                        }
                        out[((o * od + z) * oh + y) * ow + xo] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        let shapes = [
            ([1, 7, 6], [1, 3, 3], [1, 2, 2], [0, 1, 1]),
            ([4, 4, 4], [3, 3, 3], [1, 1, 1], [1, 1, 1]),
            ([3, 5, 4], [1, 1, 1], [1, 1, 1], [0, 0, 0]),
            ([1, 9, 9], [1, 3, 3], [1, 3, 3], [0, 2, 2]),
        ];
        for (input, kernel, stride, pad) in shapes {
            let g = ConvGeometry::new(2, 3, input, kernel, stride, pad).unwrap();
            let x: Vec<f64> = (0..2 * g.in_volume()).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
            let w: Vec<f64> = (0..3 * g.patch_len()).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
            let fast = g.forward(&x, &w, None, 1);
            assert_eq!(fast, naive_conv(&g, &x, &w), "{input:?} {kernel:?}");
        }
    }

    #[test]
    fn chunked_conv_spans_many_chunks() {
        // 40x40 output plane forces several unfold chunks, some partial
        let g = ConvGeometry::new(2, 3, [2, 40, 40], [1, 3, 3], [1, 1, 1], [0, 1, 1]).unwrap();
        let x: Vec<f64> = (0..2 * 2 * g.in_volume())
            .map(|i| ((i * 37) % 11) as f64 - 5.0)
            .collect();
        let w: Vec<f64> = (0..3 * g.patch_len()).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        let fast = g.forward(&x, &w, None, 2);
        let half = 3 * g.out_volume();
        assert_eq!(&fast[..half], &naive_conv(&g, &x[..2 * g.in_volume()], &w)[..]);
        assert_eq!(&fast[half..], &naive_conv(&g, &x[2 * g.in_volume()..], &w)[..]);
    }

    #[test]
    fn backward_is_the_adjoint_of_forward() {
        // <conv(x, w), g> is bilinear: its x- and w-gradients are exact
        for (input, kernel, stride, pad) in [
            ([3, 5, 4], [3, 3, 3], [1, 1, 1], [1, 1, 1]),
            ([1, 9, 9], [1, 3, 3], [1, 2, 2], [0, 1, 1]),
            ([2, 30, 30], [1, 3, 3], [1, 1, 1], [0, 1, 1]),
        ] {
            let g = ConvGeometry::new(2, 3, input, kernel, stride, pad).unwrap();
            let x: Vec<f64> = (0..2 * g.in_volume()).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
            let w: Vec<f64> = (0..3 * g.patch_len()).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
            let go: Vec<f64> = (0..3 * g.out_volume()).map(|i| ((i * 17) % 5) as f64 - 2.0).collect();
            let (gx, gw, gb) = g.backward(&x, &w, &go, 1, true, true);
            let (gx, gw) = (gx.unwrap(), gw.unwrap());
            let inner =
                |x: &[f64], w: &[f64]| -> f64 { naive_conv(&g, x, w).iter().zip(&go).map(|(a, b)| a * b).sum() };
            for n in [0, 7, x.len() - 1] {
                let mut e = vec![0.0; x.len()];
                e[n] = 1.0;
                assert_eq!(gx[n], inner(&e, &w), "gx {n} {input:?}");
            }
            for n in [0, 5, w.len() - 1] {
                let mut e = vec![0.0; w.len()];
                e[n] = 1.0;
                assert_eq!(gw[n], inner(&x, &e), "gw {n} {input:?}");
            }
            let ovol = g.out_volume();
            for c in 0..3 {
                assert_eq!(gb[c], go[c * ovol..(c + 1) * ovol].iter().sum::<f64>());
            }
        }
    }

    fn naive_gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_variants_match_naive() {
        for (m, k, n) in [(1, 1, 1), (3, 5, 7), (4, 9, 16), (6, 17, 41), (9, 3, 25), (2, 30, 8)] {
            let a: Vec<f64> = (0..m * k).map(|i| ((i * 7) % 13) as f64 - 6.0).collect();
            let b: Vec<f64> = (0..k * n).map(|i| ((i * 5) % 11) as f64 - 5.0).collect();
            let want = naive_gemm(&a, &b, m, k, n);
            let mut c = vec![0.0; m * n];
            gemm_nn(&mut c, &a, &b, m, k, n);
            assert_eq!(c, want, "nn {m} {k} {n}");
            let mut at = vec![0.0; m * k];
            for i in 0..m {
                for p in 0..k {
                    at[p * m + i] = a[i * k + p];
                }
            }
            let mut c = vec![0.0; m * n];
            gemm_tn(&mut c, &at, &b, m, k, n);
            assert_eq!(c, want, "tn {m} {k} {n}");
            let mut bt = vec![0.0; k * n];
            for p in 0..k {
                for j in 0..n {
                    bt[j * k + p] = b[p * n + j];
                }
            }
            let mut c = vec![0.0; m * n];
            gemm_nt(&mut c, &a, &bt, m, k, n);
            assert_eq!(c, want, "nt {m} {k} {n}");
        }
    }

    #[test]
    #[ignore]
    fn bench_kernels() {
        use std::time::Instant;
        for (m, k, n) in [
            (16, 432, 4096),
            (8, 216, 4096),
            (32, 864, 64),
            (432, 16, 4096),
            (16, 4096, 432),
            (32, 64, 864),
        ] {
            let a: Vec<f64> = (0..m * k).map(|i| ((i * 7) % 13) as f64 - 6.0).collect();
            let b: Vec<f64> = (0..k * n).map(|i| ((i * 5) % 11) as f64 - 5.0).collect();
            let bt: Vec<f64> = (0..k * n).map(|i| ((i * 5) % 11) as f64 - 5.0).collect();
            let mut c = vec![0.0; m * n];
            let reps = 10;
            let t = Instant::now();
            for _ in 0..reps {
                gemm_nn(&mut c, &a, &b, m, k, n);
            }
            let nn = t.elapsed().as_secs_f64() / reps as f64;
            let t = Instant::now();
            for _ in 0..reps {
                gemm_nt(&mut c, &a, &bt, m, k, n);
            }
            let nt = t.elapsed().as_secs_f64() / reps as f64;
            let g = (m * k * n) as f64 / 1e9;
            println!("{m}x{k}x{n}: nn {:.2} GMAC/s, nt {:.2} GMAC/s", g / nn, g / nt);
        }
    }
}
