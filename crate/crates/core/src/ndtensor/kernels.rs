//! Forward and backward kernels on raw row-major buffers.
//!
//! Shapes are validated by the tape before any kernel runs; the kernels
//! themselves only `debug_assert` their preconditions.

/// `c = alpha * a·b + beta * c` for row-major `c` (m×n), with arbitrary strides on `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

/// Lays out the batch as `[C·K·K, N·OH·OW]` so one GEMM covers all images.
fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut cols = Vec::with_capacity(g.patch() * g.n * g.positions());
    for ci in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                for ni in 0..g.n {
                    let plane = &x[(ni * g.c + ci) * g.h * g.w..(ni * g.c + ci + 1) * g.h * g.w];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            cols.extend(std::iter::repeat(0.0).take(g.ow));
                            continue;
                        }
                        let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        cols.extend((0..g.ow).map(|ox| {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                src[ix as usize]
                            } else {
                                0.0
                            }
                        }));
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.positions();
    let cols_n = g.n * p;
    for ci in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let row_buf = &cols[row * cols_n..(row + 1) * cols_n];
                for ni in 0..g.n {
                    let base = (ni * g.c + ci) * g.h * g.w;
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = &row_buf[ni * p + oy * g.ow..ni * p + (oy + 1) * g.ow];
                        let dst = &mut dx[base + iy as usize * g.w..base + (iy as usize + 1) * g.w];
                        for (ox, &v) in src.iter().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &[f64], w: &[f64], b: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let p = g.positions();
    let cols_n = g.n * p;
    let cols = im2col(x, g);
    let mut tmp = vec![0.0; g.o * cols_n];
    gemm(g.o, g.patch(), cols_n, w, (g.patch(), 1), &cols, (cols_n, 1), 0.0, &mut tmp);
    let mut out = vec![0.0; g.n * g.o * p];
    for oi in 0..g.o {
        let bias = b.map_or(0.0, |b| b[oi]);
        for ni in 0..g.n {
            let src = &tmp[oi * cols_n + ni * p..oi * cols_n + (ni + 1) * p];
            let dst = &mut out[(ni * g.o + oi) * p..(ni * g.o + oi + 1) * p];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + bias;
            }
        }
    }
    out
}

pub(crate) struct ConvGrads {
    pub x: Option<Vec<f64>>,
    pub w: Option<Vec<f64>>,
    pub b: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads {
    let p = g.positions();
    let cols_n = g.n * p;
    // gy is [N, O, P]; regroup to [O, N·P] to match the column layout.
    let mut gy2 = vec![0.0; g.o * cols_n];
    for ni in 0..g.n {
        for oi in 0..g.o {
            gy2[oi * cols_n + ni * p..oi * cols_n + (ni + 1) * p]
                .copy_from_slice(&gy[(ni * g.o + oi) * p..(ni * g.o + oi + 1) * p]);
        }
    }
    let gb = need.2.then(|| {
        (0..g.o)
            .map(|oi| gy2[oi * cols_n..(oi + 1) * cols_n].iter().sum())
            .collect()
    });
    let gw = need.1.then(|| {
        let cols = im2col(x, g);
        let mut gw = vec![0.0; g.o * g.patch()];
        // gy2 [O, NP] · colsᵀ [NP, CKK]
        gemm(g.o, cols_n, g.patch(), &gy2, (cols_n, 1), &cols, (1, cols_n), 0.0, &mut gw);
        gw
    });
    let gx = need.0.then(|| {
        let mut dcols = vec![0.0; g.patch() * cols_n];
        // wᵀ [CKK, O] · gy2 [O, NP]
        gemm(g.patch(), g.o, cols_n, w, (1, g.patch()), &gy2, (cols_n, 1), 0.0, &mut dcols);
        let mut gx = vec![0.0; g.n * g.c * g.h * g.w];
        col2im_add(&dcols, g, &mut gx);
        gx
    });
    ConvGrads { x: gx, w: gw, b: gb }
}

/// `y[N, O] = v[N, I] · w[O, I]ᵀ (+ b)`.
pub(crate) fn linear_forward(v: &[f64], w: &[f64], b: Option<&[f64]>, n: usize, i: usize, o: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * o];
    if let Some(b) = b {
        for row in y.chunks_exact_mut(o) {
            row.copy_from_slice(b);
        }
    }
    gemm(n, i, o, v, (i, 1), w, (1, i), if b.is_some() { 1.0 } else { 0.0 }, &mut y);
    y
}

pub(crate) fn linear_backward_input(gy: &[f64], w: &[f64], n: usize, i: usize, o: usize) -> Vec<f64> {
    let mut gv = vec![0.0; n * i];
    gemm(n, o, i, gy, (o, 1), w, (i, 1), 0.0, &mut gv);
    gv
}

pub(crate) fn linear_backward_weight(gy: &[f64], v: &[f64], n: usize, i: usize, o: usize) -> Vec<f64> {
    let mut gw = vec![0.0; o * i];
    gemm(o, n, i, gy, (1, o), v, (i, 1), 0.0, &mut gw);
    gw
}

/// Position of the first minimum and first maximum in scan order.
pub(crate) fn arg_extrema(plane: &[f64]) -> (usize, usize) {
    let (mut lo, mut hi) = (0, 0);
    for (i, &v) in plane.iter().enumerate().skip(1) {
        if v < plane[lo] {
            lo = i;
        }
        if v > plane[hi] {
            hi = i;
        }
    }
    (lo, hi)
}

pub(crate) fn minmax_forward(m: &[f64], plane: usize, eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; m.len()];
    for (src, dst) in m.chunks_exact(plane).zip(out.chunks_exact_mut(plane)) {
        let (lo, hi) = arg_extrema(src);
        let (mn, mx) = (src[lo], src[hi]);
        let denom = mx - mn + eps;
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = (v - mn) / denom;
        }
    }
    out
}

pub(crate) fn minmax_backward(m: &[f64], gy: &[f64], plane: usize, eps: f64, detach: bool) -> Vec<f64> {
    let mut gm = vec![0.0; m.len()];
    for ((src, g), dst) in m
        .chunks_exact(plane)
        .zip(gy.chunks_exact(plane))
        .zip(gm.chunks_exact_mut(plane))
    {
        let (lo, hi) = arg_extrema(src);
        let (mn, mx) = (src[lo], src[hi]);
        let denom = mx - mn + eps;
        let mut to_min = 0.0;
        let mut to_max = 0.0;
        for ((d, &v), &gi) in dst.iter_mut().zip(src).zip(g) {
            let y = (v - mn) / denom;
            *d = gi / denom;
            to_min += gi * (y - 1.0) / denom;
            to_max -= gi * y / denom;
        }
        if !detach {
            dst[lo] += to_min;
            dst[hi] += to_max;
        }
    }
    gm
}

/// Bilinear taps along one axis: (lower index, upper index, upper weight).
pub(crate) fn resize_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    let last = (input - 1) as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, last);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub(crate) fn resize_forward(m: &[f64], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let rows = resize_taps(h, oh);
    let cols = resize_taps(w, ow);
    let mut out = vec![0.0; planes * oh * ow];
    for pi in 0..planes {
        let src = &m[pi * h * w..(pi + 1) * h * w];
        let dst = &mut out[pi * oh * ow..(pi + 1) * oh * ow];
        for (r, &(y0, y1, wy)) in rows.iter().enumerate() {
            for (c, &(x0, x1, wx)) in cols.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - wx) + src[y0 * w + x1] * wx;
                let bot = src[y1 * w + x0] * (1.0 - wx) + src[y1 * w + x1] * wx;
                dst[r * ow + c] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}

pub(crate) fn resize_backward(gy: &[f64], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let rows = resize_taps(h, oh);
    let cols = resize_taps(w, ow);
    let mut gm = vec![0.0; planes * h * w];
    for pi in 0..planes {
        let src = &gy[pi * oh * ow..(pi + 1) * oh * ow];
        let dst = &mut gm[pi * h * w..(pi + 1) * h * w];
        for (r, &(y0, y1, wy)) in rows.iter().enumerate() {
            for (c, &(x0, x1, wx)) in cols.iter().enumerate() {
                let g = src[r * ow + c];
                dst[y0 * w + x0] += g * (1.0 - wy) * (1.0 - wx);
                dst[y0 * w + x1] += g * (1.0 - wy) * wx;
                dst[y1 * w + x0] += g * wy * (1.0 - wx);
                dst[y1 * w + x1] += g * wy * wx;
            }
        }
    }
    gm
}

/// Row-wise softmax of `[N, C]` logits, stabilized by max subtraction.
pub(crate) fn softmax_rows(logits: &[f64], c: usize) -> Vec<f64> {
    let mut p = logits.to_vec();
    for row in p.chunks_exact_mut(c) {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    p
}

pub(crate) fn cross_entropy(logits: &[f64], labels: &[usize], c: usize) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.chunks_exact(c).zip(labels) {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taps_follow_half_pixel_sampling() {
        let t = resize_taps(2, 4);
        let pos: Vec<f64> = t.iter().map(|&(lo, _, w)| lo as f64 + w).collect();
        assert_eq!(pos, vec![0.0, 0.25, 0.75, 1.0]);
        let same = resize_taps(5, 5);
        assert!(same.iter().enumerate().all(|(i, &(lo, _, w))| lo == i && w == 0.0));
    }

    #[test]
    fn arg_extrema_prefers_first_occurrence() {
        assert_eq!(arg_extrema(&[3.0, 1.0, 5.0, 1.0, 5.0]), (1, 2));
        assert_eq!(arg_extrema(&[2.0, 2.0]), (0, 0));
    }

    #[test]
    fn gemm_transposed_operands() {
        // a = [[1,2],[3,4]] read transposed
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [1.0, 0.0, 0.0, 1.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, (1, 2), &b, (2, 1), 0.0, &mut c);
        assert_eq!(c, [1.0, 3.0, 2.0, 4.0]);
    }
}
