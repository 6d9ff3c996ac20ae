//! Raw numeric kernels behind the differentiable ops. Everything here works
//! on flat row-major slices; shape checking happens in the op layer.

/// `c = a' * b' + beta * c` where `a'` is `a` (m×k) or its transpose and
/// `b'` is `b` (k×n) or its transpose. `c` is m×n row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths were checked above and the strides describe
    // in-bounds row-major or transposed views of those slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    fn spatial(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Columns for the whole batch: rows are (c, ky, kx), columns are
/// (n, oy, ox).
fn im2col(g: &ConvGeom, x: &[f64]) -> Vec<f64> {
    let cols_w = g.batch * g.spatial();
    let mut cols = vec![0.0; g.patch() * cols_w];
    for n in 0..g.batch {
        for c in 0..g.in_c {
            let plane = &x[(n * g.in_c + c) * g.in_h * g.in_w..][..g.in_h * g.in_w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let row = (c * g.kh + ky) * g.kw + kx;
                    let dst = &mut cols[row * cols_w + n * g.spatial()..][..g.spatial()];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * g.in_w..][..g.in_w];
                        for ox in 0..g.out_w {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.in_w as isize {
                                dst[oy * g.out_w + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let cols_w = g.batch * g.spatial();
    for n in 0..g.batch {
        for c in 0..g.in_c {
            let plane = &mut dx[(n * g.in_c + c) * g.in_h * g.in_w..][..g.in_h * g.in_w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let row = (c * g.kh + ky) * g.kw + kx;
                    let src = &cols[row * cols_w + n * g.spatial()..][..g.spatial()];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let dst_row = &mut plane[iy as usize * g.in_w..][..g.in_w];
                        for ox in 0..g.out_w {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.in_w as isize {
                                dst_row[ix as usize] += src[oy * g.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    let cols = im2col(g, x);
    let cols_w = g.batch * g.spatial();
    let mut out_cm = vec![0.0; g.out_c * cols_w];
    gemm(g.out_c, g.patch(), cols_w, w, false, &cols, false, 0.0, &mut out_cm);
    // [O, N*S] -> [N, O, S]
    let s = g.spatial();
    let mut out = vec![0.0; g.batch * g.out_c * s];
    for o in 0..g.out_c {
        let bias = b.map_or(0.0, |b| b[o]);
        for n in 0..g.batch {
            let src = &out_cm[o * cols_w + n * s..][..s];
            let dst = &mut out[(n * g.out_c + o) * s..][..s];
            for (d, v) in dst.iter_mut().zip(src) {
                *d = v + bias;
            }
        }
    }
    out
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    need: (bool, bool, bool),
) -> ConvGrads {
    let s = g.spatial();
    let cols_w = g.batch * s;
    // [N, O, S] -> [O, N*S]
    let mut dout_cm = vec![0.0; g.out_c * cols_w];
    for n in 0..g.batch {
        for o in 0..g.out_c {
            dout_cm[o * cols_w + n * s..][..s].copy_from_slice(&dout[(n * g.out_c + o) * s..][..s]);
        }
    }
    let dw = need.1.then(|| {
        let cols = im2col(g, x);
        let mut dw = vec![0.0; g.out_c * g.patch()];
        gemm(g.out_c, cols_w, g.patch(), &dout_cm, false, &cols, true, 0.0, &mut dw);
        dw
    });
    let db = need.2.then(|| {
        (0..g.out_c)
            .map(|o| dout_cm[o * cols_w..][..cols_w].iter().sum())
            .collect()
    });
    let dx = need.0.then(|| {
        let mut dcols = vec![0.0; g.patch() * cols_w];
        gemm(g.patch(), g.out_c, cols_w, w, true, &dout_cm, false, 0.0, &mut dcols);
        let mut dx = vec![0.0; x.len()];
        col2im_add(g, &dcols, &mut dx);
        dx
    });
    ConvGrads { dx, dw, db }
}

/// Max pooling over `planes` independent H×W planes. Returns the pooled
/// values and, for every output, the flat input index of its maximum
/// (first occurrence on ties).
pub(crate) fn maxpool2d(
    x: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
) -> (Vec<f64>, Vec<usize>) {
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = base + oy * stride * w + ox * stride;
                for ky in 0..k {
                    for kx in 0..k {
                        let i = base + (oy * stride + ky) * w + ox * stride + kx;
                        if x[i] > best || x[i].is_nan() {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                out.push(x[best_i]);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}

/// A rectangle of whole feature cells, half-open: rows `y0..y1`, columns
/// `x0..x1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellRegion {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

/// Bin `i` of `bins` over a span of `len` cells starting at `start`. Bins
/// are near-equal and never empty as long as `len >= 1`.
pub(crate) fn bin_span(start: usize, len: usize, i: usize, bins: usize) -> (usize, usize) {
    let lo = start + (i * len) / bins;
    let hi = start + ((i + 1) * len).div_ceil(bins);
    (lo, hi.max(lo + 1))
}

/// Region max pooling over a C×H×W cube. Output is N×C×bins×bins.
pub(crate) fn roi_max_pool(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    regions: &[CellRegion],
    bins: usize,
) -> (Vec<f64>, Vec<usize>) {
    let mut out = Vec::with_capacity(regions.len() * c * bins * bins);
    let mut arg = Vec::with_capacity(out.capacity());
    for r in regions {
        for ch in 0..c {
            let base = ch * h * w;
            for by in 0..bins {
                let (ya, yb) = bin_span(r.y0, r.y1 - r.y0, by, bins);
                for bx in 0..bins {
                    let (xa, xb) = bin_span(r.x0, r.x1 - r.x0, bx, bins);
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = base + ya * w + xa;
                    for y in ya..yb {
                        for x_ in xa..xb {
                            let i = base + y * w + x_;
                            if x[i] > best || x[i].is_nan() {
                                best = x[i];
                                best_i = i;
                            }
                        }
                    }
                    out.push(x[best_i]);
                    arg.push(best_i);
                }
            }
        }
    }
    (out, arg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm(2, 3, 4, &a, false, &b, false, 0.0, &mut c);
        let mut naive = vec![0.0; 8];
        for i in 0..2 {
            for j in 0..4 {
                for l in 0..3 {
                    naive[i * 4 + j] += a[i * 3 + l] * b[l * 4 + j];
                }
            }
        }
        assert_eq!(c, naive);

        // a stored as 3x2 (transposed), b stored as 4x3 (transposed)
        let at: Vec<f64> = (0..6).map(|i| a[(i % 2) * 3 + i / 2]).collect();
        let bt: Vec<f64> = (0..12).map(|i| b[(i % 3) * 4 + i / 3]).collect();
        let mut c2 = vec![0.0; 8];
        gemm(2, 3, 4, &at, true, &bt, true, 0.0, &mut c2);
        assert_eq!(c2, naive);
    }

    #[test]
    fn bins_cover_span_without_gaps() {
        for len in 1..12 {
            for bins in 1..6 {
                let mut covered = vec![false; len];
                for i in 0..bins {
                    let (lo, hi) = bin_span(0, len, i, bins);
                    assert!(hi > lo && hi <= len.max(lo + 1));
                    covered[lo..hi.min(len)].fill(true);
                }
                assert!(covered.iter().all(|&c| c), "len {len} bins {bins}");
            }
        }
    }
}
