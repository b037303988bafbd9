//! Slice-level kernels shared by the forward and backward passes.
//!
//! Reduction order is fixed by the loop structure below and by the
//! single-threaded GEMM, so repeated runs are bit identical.

use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Whether the im2col matrix is the input itself.
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds `input` (Cin,H,W) into `cols` (Cin·k·k, OH·OW).
pub fn im2col<T: Scalar>(g: &ConvGeom, input: &[T], cols: &mut [T]) {
    let p = g.positions();
    for c in 0..g.cin {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `cols` back into `grad_input`.
pub fn col2im_add<T: Scalar>(g: &ConvGeom, cols: &[T], grad_input: &mut [T]) {
    let p = g.positions();
    for c in 0..g.cin {
        let plane = &mut grad_input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(g: &ConvGeom, input: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let p = g.positions();
    let kk = g.patch();
    let mut out = vec![T::zero(); g.cout * p];
    for (co, row) in out.chunks_mut(p).enumerate() {
        row.fill(bias[co]);
    }
    let owned;
    let cols: &[T] = if g.is_pointwise() {
        input
    } else {
        let mut buf = vec![T::zero(); kk * p];
        im2col(g, input, &mut buf);
        owned = buf;
        &owned
    };
    T::gemm(g.cout, kk, p, T::one(), weight, (kk, 1), cols, (p, 1), T::one(), &mut out, (p, 1));
    out
}

/// Returns gradients for (input, weight, bias); each only if requested.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    need: [bool; 3],
) -> [Option<Vec<T>>; 3] {
    let p = g.positions();
    let kk = g.patch();
    let owned;
    let cols: &[T] = if g.is_pointwise() {
        input
    } else if need[1] {
        let mut buf = vec![T::zero(); kk * p];
        im2col(g, input, &mut buf);
        owned = buf;
        &owned
    } else {
        &[]
    };

    let grad_input = need[0].then(|| {
        let mut dcols = vec![T::zero(); kk * p];
        T::gemm(kk, g.cout, p, T::one(), weight, (1, kk), grad_out, (p, 1), T::zero(), &mut dcols, (p, 1));
        if g.is_pointwise() {
            dcols
        } else {
            let mut dx = vec![T::zero(); g.cin * g.h * g.w];
            col2im_add(g, &dcols, &mut dx);
            dx
        }
    });
    let grad_weight = need[1].then(|| {
        let mut dw = vec![T::zero(); g.cout * kk];
        T::gemm(g.cout, p, kk, T::one(), grad_out, (p, 1), cols, (1, p), T::zero(), &mut dw, (kk, 1));
        dw
    });
    let grad_bias = need[2].then(|| grad_out.chunks(p).map(|r| r.iter().copied().sum()).collect());
    [grad_input, grad_weight, grad_bias]
}

/// Bilinear weights and integer corners for a sample point.
#[derive(Clone, Copy, Debug)]
pub struct BilinearTap<T> {
    pub x0: isize,
    pub y0: isize,
    pub ax: T,
    pub ay: T,
}

impl<T: Scalar> BilinearTap<T> {
    pub fn new(x: T, y: T) -> Self {
        let fx = x.floor();
        let fy = y.floor();
        Self {
            x0: fx.to_isize().unwrap_or(isize::MIN / 2),
            y0: fy.to_isize().unwrap_or(isize::MIN / 2),
            ax: x - fx,
            ay: y - fy,
        }
    }

    /// (dx, dy, weight) of the four corners.
    pub fn corners(&self) -> [(isize, isize, T); 4] {
        let one = T::one();
        [
            (0, 0, (one - self.ax) * (one - self.ay)),
            (1, 0, self.ax * (one - self.ay)),
            (0, 1, (one - self.ax) * self.ay),
            (1, 1, self.ax * self.ay),
        ]
    }
}

#[inline]
pub fn in_bounds(x: isize, y: isize, w: usize, h: usize) -> Option<usize> {
    (x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h).then(|| y as usize * w + x as usize)
}

pub fn bilinear_sample<T: Scalar>(map: &[T], c: usize, h: usize, w: usize, points: &[T]) -> Vec<T> {
    let n = points.len() / 2;
    let hw = h * w;
    let mut out = vec![T::zero(); n * c];
    for i in 0..n {
        let tap = BilinearTap::new(points[2 * i], points[2 * i + 1]);
        let row = &mut out[i * c..(i + 1) * c];
        for (dx, dy, wgt) in tap.corners() {
            if wgt == T::zero() {
                continue;
            }
            if let Some(off) = in_bounds(tap.x0 + dx, tap.y0 + dy, w, h) {
                for (ch, o) in row.iter_mut().enumerate() {
                    *o += wgt * map[ch * hw + off];
                }
            }
        }
    }
    out
}

pub fn bilinear_sample_backward<T: Scalar>(
    map: &[T],
    c: usize,
    h: usize,
    w: usize,
    points: &[T],
    grad_out: &[T],
    need: [bool; 2],
) -> [Option<Vec<T>>; 2] {
    let n = points.len() / 2;
    let hw = h * w;
    let mut gmap = need[0].then(|| vec![T::zero(); map.len()]);
    let mut gpts = need[1].then(|| vec![T::zero(); points.len()]);
    let zero = T::zero();
    let one = T::one();
    for i in 0..n {
        let tap = BilinearTap::new(points[2 * i], points[2 * i + 1]);
        let go = &grad_out[i * c..(i + 1) * c];
        if let Some(gm) = gmap.as_mut() {
            for (dx, dy, wgt) in tap.corners() {
                if let Some(off) = in_bounds(tap.x0 + dx, tap.y0 + dy, w, h) {
                    for ch in 0..c {
                        gm[ch * hw + off] += wgt * go[ch];
                    }
                }
            }
        }
        if let Some(gp) = gpts.as_mut() {
            let idx = [
                in_bounds(tap.x0, tap.y0, w, h),
                in_bounds(tap.x0 + 1, tap.y0, w, h),
                in_bounds(tap.x0, tap.y0 + 1, w, h),
                in_bounds(tap.x0 + 1, tap.y0 + 1, w, h),
            ];
            let (mut gx, mut gy) = (zero, zero);
            for ch in 0..c {
                let v = |k: usize| idx[k].map_or(zero, |o| map[ch * hw + o]);
                let (v00, v10, v01, v11) = (v(0), v(1), v(2), v(3));
                gx += go[ch] * ((one - tap.ay) * (v10 - v00) + tap.ay * (v11 - v01));
                gy += go[ch] * ((one - tap.ax) * (v01 - v00) + tap.ax * (v11 - v10));
            }
            gp[2 * i] += gx;
            gp[2 * i + 1] += gy;
        }
    }
    [gmap, gpts]
}

pub fn pooled_extent(n: usize) -> usize {
    n.div_ceil(2)
}

/// 2×2 mean pool, stride 2; ragged edge cells average their in-bounds inputs.
pub fn avg_pool2<T: Scalar>(map: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (pooled_extent(h), pooled_extent(w));
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                let mut cnt = 0usize;
                for y in 2 * oy..(2 * oy + 2).min(h) {
                    for x in 2 * ox..(2 * ox + 2).min(w) {
                        acc += map[(ch * h + y) * w + x];
                        cnt += 1;
                    }
                }
                out[(ch * oh + oy) * ow + ox] = acc / T::of(cnt as f64);
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Scalar>(grad_out: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (pooled_extent(h), pooled_extent(w));
    let mut gin = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let ys = 2 * oy..(2 * oy + 2).min(h);
                let xs = 2 * ox..(2 * ox + 2).min(w);
                let cnt = ys.len() * xs.len();
                let g = grad_out[(ch * oh + oy) * ow + ox] / T::of(cnt as f64);
                for y in ys {
                    for x in xs.clone() {
                        gin[(ch * h + y) * w + x] += g;
                    }
                }
            }
        }
    }
    gin
}

/// Strides of a row-major shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Generic axis permutation: `out.shape[i] = shape[perm[i]]`.
pub fn permute<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let nd = out_shape.len();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return out;
    }
    let inner = out_shape[nd - 1];
    let inner_stride = src_strides[nd - 1];
    let mut idx = vec![0usize; nd.saturating_sub(1)];
    loop {
        let base: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        if inner_stride == 1 {
            out.extend_from_slice(&data[base..base + inner]);
        } else {
            out.extend((0..inner).map(|j| data[base + j * inner_stride]));
        }
        let mut d = nd - 1;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub fn softmax_rows<T: Scalar>(data: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for (src, dst) in data.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (o, &v) in dst.iter_mut().zip(src) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in dst.iter_mut() {
            *o = *o / sum;
        }
    }
    out
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Row-wise mean and reciprocal standard deviation.
pub fn row_stats<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let n = T::of(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, T::one() / (var + eps).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_matches_manual_transpose() {
        let data: Vec<f64> = (0..6).map(f64::from).collect();
        let out = permute(&data, &[2, 3], &[1, 0]);
        assert_eq!(out, vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let back = permute(&out, &[3, 2], &inverse_permutation(&[1, 0]));
        assert_eq!(back, data);
    }

    #[test]
    fn permute_3d() {
        let shape = [2, 3, 4];
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let out = permute(&data, &shape, &[2, 0, 1]);
        // out[i][j][k] = in[j][k][i]
        for i in 0..4 {
            for j in 0..2 {
                for k in 0..3 {
                    assert_eq!(out[(i * 2 + j) * 3 + k], data[(j * 3 + k) * 4 + i]);
                }
            }
        }
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let g = ConvGeom { cin: 2, h: 5, w: 4, cout: 1, k: 3, stride: 2, pad: 1, oh: 3, ow: 2 };
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.patch() * g.positions()).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&g, &x, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im_add(&g, &y, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
