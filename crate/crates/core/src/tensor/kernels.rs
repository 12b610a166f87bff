//! Untracked compute kernels over flat row-major buffers.
//!
//! Parallel variants split work only across independent output rows, so the
//! summation order of every output element is the same for any thread count.

use rayon::prelude::*;

use super::Element;

const PAR_THRESHOLD: usize = 1 << 15;

#[inline]
fn nn_row<T: Element>(a_row: &[T], b: &[T], c_row: &mut [T], n: usize) {
    for (p, &av) in a_row.iter().enumerate() {
        if av == T::zero() {
            continue;
        }
        for (cv, &bv) in c_row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
            *cv += av * bv;
        }
    }
}

/// Dot product with eight interleaved partial sums, combined in a fixed order.
#[inline]
fn dot<T: Element>(x: &[T], y: &[T]) -> T {
    const L: usize = 8;
    let mut acc = [T::zero(); L];
    let (xc, yc) = (x.chunks_exact(L), y.chunks_exact(L));
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (xs, ys) in xc.zip(yc) {
        for l in 0..L {
            acc[l] += xs[l] * ys[l];
        }
    }
    let mut tail = T::zero();
    for (&a, &b) in xr.iter().zip(yr) {
        tail += a * b;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
fn nt_row<T: Element>(a_row: &[T], b: &[T], c_row: &mut [T], k: usize) {
    for (j, cv) in c_row.iter_mut().enumerate() {
        *cv += dot(a_row, &b[j * k..(j + 1) * k]);
    }
}

#[inline]
fn tn_row<T: Element>(a: &[T], b: &[T], p: usize, c_row: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let av = a[i * k + p];
        if av == T::zero() {
            continue;
        }
        for (cv, &bv) in c_row.iter_mut().zip(&b[i * n..(i + 1) * n]) {
            *cv += av * bv;
        }
    }
}

fn par_rows<T: Element>(c: &mut [T], n: usize, work: usize, f: impl Fn(usize, &mut [T]) + Sync) {
    if work >= PAR_THRESHOLD && c.len() > n {
        c.par_chunks_mut(n).enumerate().for_each(|(i, r)| f(i, r));
    } else {
        c.chunks_mut(n).enumerate().for_each(|(i, r)| f(i, r));
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`.
pub fn gemm_nn<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    par_rows(c, n, m * k * n, |i, r| {
        nn_row(&a[i * k..(i + 1) * k], b, r, n)
    });
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`.
pub fn gemm_nt<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    par_rows(c, n, m * k * n, |i, r| {
        nt_row(&a[i * k..(i + 1) * k], b, r, k)
    });
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`.
pub fn gemm_tn<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    par_rows(c, n, m * k * n, |p, r| tn_row(a, b, p, r, m, k, n));
}

fn gemm_nn_serial<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for (i, r) in c.chunks_mut(n).enumerate().take(m) {
        nn_row(&a[i * k..(i + 1) * k], b, r, n);
    }
}

fn gemm_nt_serial<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for (i, r) in c.chunks_mut(n).enumerate().take(m) {
        nt_row(&a[i * k..(i + 1) * k], b, r, k);
    }
}

fn gemm_tn_serial<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for (p, r) in c.chunks_mut(n).enumerate().take(k) {
        tn_row(a, b, p, r, m, k, n);
    }
}

/// Shape after numpy-style broadcasting, or `None` if incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Flat source offset in `src` for every flat position of `out`, where `src`
/// broadcasts to `out`.
pub fn broadcast_index(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let pad = rank - src.len();
    let mut src_strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..rank).rev() {
        if i >= pad {
            let e = src[i - pad];
            src_strides[i] = if e == 1 { 0 } else { acc };
            acc *= e;
        }
    }
    let total: usize = out.iter().product();
    let mut idx = vec![0usize; rank];
    let mut map = Vec::with_capacity(total);
    let mut off = 0usize;
    for _ in 0..total {
        map.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out[d] {
                break;
            }
            off -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

/// Numerically stabilized softmax over consecutive rows of width `n`.
pub fn softmax_rows<T: Element>(x: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks(n).zip(out.chunks_mut(n)) {
        let max = src.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d = *d / total;
        }
    }
    out
}

/// Geometry of a 2-D convolution over NCHW input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    /// Output extent along an axis; `None` when it would be nonpositive.
    pub fn out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = input + 2 * pad;
        (padded >= k && stride > 0).then(|| (padded - k) / stride + 1)
    }

    pub fn out_h(&self) -> usize {
        Self::out_extent(self.in_h, self.kh, self.stride, self.pad).unwrap_or(0)
    }

    pub fn out_w(&self) -> usize {
        Self::out_extent(self.in_w, self.kw, self.stride, self.pad).unwrap_or(0)
    }

    fn cin_per_group(&self) -> usize {
        self.in_ch / self.groups
    }

    fn cout_per_group(&self) -> usize {
        self.out_ch / self.groups
    }

    /// Input coordinate for output position `o` and tap `k`, if inside.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Unfold one sample's group `grp` into `[cin·kh·kw, oh·ow]` columns.
fn im2col<T: Element>(x: &[T], g: &ConvGeom, b: usize, grp: usize, cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let cin = g.cin_per_group();
    let plane = oh * ow;
    for c in 0..cin {
        let ic = grp * cin + c;
        let xp = &x[(b * g.in_ch + ic) * g.in_h * g.in_w..][..g.in_h * g.in_w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &mut cols[((c * g.kh + ky) * g.kw + kx) * plane..][..plane];
                for oy in 0..oh {
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    match g.src(oy, ky, g.in_h) {
                        None => dst.fill(T::zero()),
                        Some(iy) => {
                            for (ox, d) in dst.iter_mut().enumerate() {
                                *d = g
                                    .src(ox, kx, g.in_w)
                                    .map_or(T::zero(), |ix| xp[iy * g.in_w + ix]);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into the sample's planes.
fn col2im<T: Element>(cols: &[T], g: &ConvGeom, grp: usize, gx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let cin = g.cin_per_group();
    let plane = oh * ow;
    for c in 0..cin {
        let ic = grp * cin + c;
        let gxp = &mut gx[ic * g.in_h * g.in_w..][..g.in_h * g.in_w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &cols[((c * g.kh + ky) * g.kw + kx) * plane..][..plane];
                for oy in 0..oh {
                    let Some(iy) = g.src(oy, ky, g.in_h) else {
                        continue;
                    };
                    for ox in 0..ow {
                        if let Some(ix) = g.src(ox, kx, g.in_w) {
                            gxp[iy * g.in_w + ix] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation: `y[b,o,oy,ox] = Σ w[o,c,ky,kx] · x[b,g·cpg + c, oy·s+ky−p, ox·s+kx−p]`.
pub fn conv2d_forward<T: Element>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let plane = g.out_h() * g.out_w();
    let (cin, cout) = (g.cin_per_group(), g.cout_per_group());
    let kdim = cin * g.kh * g.kw;
    let mut y = vec![T::zero(); g.batch * g.out_ch * plane];
    y.par_chunks_mut(g.out_ch * plane)
        .enumerate()
        .for_each(|(b, yb)| {
            let mut cols = vec![T::zero(); kdim * plane];
            for grp in 0..g.groups {
                im2col(x, g, b, grp, &mut cols);
                let wg = &w[grp * cout * kdim..][..cout * kdim];
                gemm_nn_serial(
                    wg,
                    &cols,
                    &mut yb[grp * cout * plane..][..cout * plane],
                    cout,
                    kdim,
                    plane,
                );
            }
        });
    y
}

/// Adjoint of [`conv2d_forward`] with respect to the input.
pub fn conv2d_backward_input<T: Element>(gy: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let plane = g.out_h() * g.out_w();
    let (cin, cout) = (g.cin_per_group(), g.cout_per_group());
    let kdim = cin * g.kh * g.kw;
    let mut gx = vec![T::zero(); g.batch * g.in_ch * g.in_h * g.in_w];
    gx.par_chunks_mut(g.in_ch * g.in_h * g.in_w)
        .enumerate()
        .for_each(|(b, gxb)| {
            let mut cols = vec![T::zero(); kdim * plane];
            for grp in 0..g.groups {
                cols.fill(T::zero());
                let wg = &w[grp * cout * kdim..][..cout * kdim];
                let gyg = &gy[(b * g.out_ch + grp * cout) * plane..][..cout * plane];
                gemm_tn_serial(wg, gyg, &mut cols, cout, kdim, plane);
                col2im(&cols, g, grp, gxb);
            }
        });
    gx
}

/// Adjoint of [`conv2d_forward`] with respect to the weights.
pub fn conv2d_backward_weight<T: Element>(gy: &[T], x: &[T], g: &ConvGeom) -> Vec<T> {
    let plane = g.out_h() * g.out_w();
    let (cin, cout) = (g.cin_per_group(), g.cout_per_group());
    let kdim = cin * g.kh * g.kw;
    let mut gw = vec![T::zero(); g.out_ch * kdim];
    // Groups own disjoint weight rows; samples accumulate in a fixed order.
    gw.par_chunks_mut(cout * kdim)
        .enumerate()
        .for_each(|(grp, gwg)| {
            let mut cols = vec![T::zero(); kdim * plane];
            for b in 0..g.batch {
                im2col(x, g, b, grp, &mut cols);
                let gyg = &gy[(b * g.out_ch + grp * cout) * plane..][..cout * plane];
                gemm_nt_serial(gyg, &cols, gwg, cout, plane, kdim);
            }
        });
    gw
}

/// The four bilinear taps around a real `(y, x)` position: flat in-plane
/// index (or `None` when outside the grid) and the interpolation weight.
#[inline]
pub fn bilinear_taps(y: f64, x: f64, h: usize, w: usize) -> [(Option<usize>, f64); 4] {
    let y0 = y.floor();
    let x0 = x.floor();
    let (fy, fx) = (y - y0, x - x0);
    let at = |yy: f64, xx: f64| {
        (yy >= 0.0 && xx >= 0.0 && (yy as usize) < h && (xx as usize) < w)
            .then(|| yy as usize * w + xx as usize)
    };
    [
        (at(y0, x0), (1.0 - fy) * (1.0 - fx)),
        (at(y0, x0 + 1.0), (1.0 - fy) * fx),
        (at(y0 + 1.0, x0), fy * (1.0 - fx)),
        (at(y0 + 1.0, x0 + 1.0), fy * fx),
    ]
}

/// Nearest-neighbor source index for each of `dst` output positions over `src` inputs.
pub fn nearest_index_map(src: usize, dst: usize) -> Vec<usize> {
    (0..dst).map(|i| i * src / dst).collect()
}

/// Pooling window reduction used by the average / max pooling variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

/// 2-D pooling over NCHW planes with `k×k` windows; padding is excluded from
/// averages and never wins a max. Returns the output and, for max pooling,
/// the flat in-plane argmax of each window.
pub fn pool2d_forward<T: Element>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    kind: PoolKind,
) -> (Vec<T>, Vec<usize>) {
    let oh = ConvGeom::out_extent(h, k, stride, pad).unwrap_or(0);
    let ow = ConvGeom::out_extent(w, k, stride, pad).unwrap_or(0);
    let mut y = vec![T::zero(); planes * oh * ow];
    let mut arg = vec![
        0usize;
        if kind == PoolKind::Max {
            planes * oh * ow
        } else {
            0
        }
    ];
    for p in 0..planes {
        let xp = &x[p * h * w..][..h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_at = 0;
                let mut sum = T::zero();
                let mut count = 0usize;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        let at = iy as usize * w + ix as usize;
                        let v = xp[at];
                        sum += v;
                        count += 1;
                        if v > best {
                            best = v;
                            best_at = at;
                        }
                    }
                }
                let o = (p * oh + oy) * ow + ox;
                match kind {
                    PoolKind::Avg => y[o] = sum / T::of(count as f64),
                    PoolKind::Max => {
                        y[o] = best;
                        arg[o] = best_at;
                    }
                }
            }
        }
    }
    (y, arg)
}

/// Segment sizes of a many-to-one index map.
pub fn segment_counts(map: &[usize], segments: usize) -> Vec<usize> {
    let mut counts = vec![0usize; segments];
    for &s in map {
        counts[s] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[4, 3]), None);
        assert_eq!(broadcast_shape(&[5], &[1]), Some(vec![5]));
    }

    #[test]
    fn broadcast_index_repeats_rows() {
        assert_eq!(broadcast_index(&[1, 3], &[2, 3]), vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(broadcast_index(&[2, 1], &[2, 3]), vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn out_extent_formula() {
        assert_eq!(ConvGeom::out_extent(368, 5, 5, 1), Some(74));
        assert_eq!(ConvGeom::out_extent(74, 3, 2, 1), Some(37));
        assert_eq!(ConvGeom::out_extent(2, 5, 1, 0), None);
    }

    #[test]
    fn nearest_map_matches_floor_rule() {
        assert_eq!(nearest_index_map(2, 3), vec![0, 0, 1]);
        assert_eq!(nearest_index_map(3, 6), vec![0, 0, 1, 1, 2, 2]);
    }

    #[test]
    fn gemm_variants_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm_nn(&a, &b, &mut c, 2, 3, 4);
        // b transposed: 4x3
        let bt: Vec<f64> = (0..12).map(|i| b[(i % 3) * 4 + i / 3]).collect();
        let mut c2 = vec![0.0; 8];
        gemm_nt(&a, &bt, &mut c2, 2, 3, 4);
        assert_eq!(c, c2);
        let at: Vec<f64> = (0..6).map(|i| a[(i % 2) * 3 + i / 2]).collect(); // 3x2
        let mut c3 = vec![0.0; 8];
        gemm_tn(&at, &b, &mut c3, 3, 2, 4);
        assert_eq!(c, c3);
    }
}
