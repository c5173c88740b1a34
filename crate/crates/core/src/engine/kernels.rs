//! Raw forward/backward loops over flat slices.

use crate::scalar::Scalar;

/// `c[m×n] = a[m×k] · b[k×n]`
pub(crate) fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            for (cj, &bj) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cj = *cj + aip * bj;
            }
        }
    }
    c
}

/// `ga += g · bᵀ`
pub(crate) fn matmul_grad_a<T: Scalar>(g: &[T], b: &[T], ga: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let dot: T = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
            ga[i * k + p] = ga[i * k + p] + dot;
        }
    }
}

/// `gb += aᵀ · g`
pub(crate) fn matmul_grad_b<T: Scalar>(g: &[T], a: &[T], gb: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            for (gj, &x) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *gj = *gj + aip * x;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, o: usize, stride: usize) -> Self {
        Self { c, h, w, o, stride, ho: h.div_ceil(stride), wo: w.div_ceil(stride) }
    }

    /// Output positions `[lo, hi)` whose tap at kernel offset `k` lands inside
    /// an input axis of length `len` (padding 1).
    #[inline]
    fn valid(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        let lo = if k == 0 { 1usize.div_ceil(self.stride) } else { 0 };
        let hi = ((len - k) / self.stride + 1).min(out_len);
        (lo, hi)
    }
}

/// 3×3 cross-correlation, zero padding 1.
pub(crate) fn conv3x3<T: Scalar>(input: &[T], kernels: &[T], bias: &[T], g: ConvGeom) -> Vec<T> {
    let ConvGeom { c, h, w, o, stride, ho, wo } = g;
    let mut out = vec![T::zero(); o * ho * wo];
    for oc in 0..o {
        let plane = &mut out[oc * ho * wo..(oc + 1) * ho * wo];
        plane.iter_mut().for_each(|v| *v = bias[oc]);
        for ic in 0..c {
            let inp = &input[ic * h * w..(ic + 1) * h * w];
            for kh in 0..3 {
                let (oy_lo, oy_hi) = g.valid(kh, h, ho);
                for kw in 0..3 {
                    let k = kernels[((oc * c + ic) * 3 + kh) * 3 + kw];
                    if k == T::zero() {
                        continue;
                    }
                    let (ox_lo, ox_hi) = g.valid(kw, w, wo);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + kh - 1;
                        let orow = &mut plane[oy * wo + ox_lo..oy * wo + ox_hi];
                        let ix0 = ox_lo * stride + kw - 1;
                        if stride == 1 {
                            let irow = &inp[iy * w + ix0..iy * w + ix0 + orow.len()];
                            for (ov, &iv) in orow.iter_mut().zip(irow) {
                                *ov = *ov + k * iv;
                            }
                        } else {
                            for (j, ov) in orow.iter_mut().enumerate() {
                                *ov = *ov + k * inp[iy * w + ix0 + j * stride];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates gradients of [`conv3x3`] into the optional input/kernel/bias buffers.
pub(crate) fn conv3x3_backward<T: Scalar>(
    gout: &[T],
    input: &[T],
    kernels: &[T],
    g: ConvGeom,
    mut ginput: Option<&mut [T]>,
    mut gkernels: Option<&mut [T]>,
    gbias: Option<&mut [T]>,
) {
    let ConvGeom { c, h, w, o, stride, ho, wo } = g;
    if let Some(gb) = gbias {
        for oc in 0..o {
            let s: T = gout[oc * ho * wo..(oc + 1) * ho * wo].iter().copied().sum();
            gb[oc] = gb[oc] + s;
        }
    }
    for oc in 0..o {
        let gplane = &gout[oc * ho * wo..(oc + 1) * ho * wo];
        for ic in 0..c {
            let inp = &input[ic * h * w..(ic + 1) * h * w];
            for kh in 0..3 {
                let (oy_lo, oy_hi) = g.valid(kh, h, ho);
                for kw in 0..3 {
                    let (ox_lo, ox_hi) = g.valid(kw, w, wo);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let kidx = ((oc * c + ic) * 3 + kh) * 3 + kw;
                    let k = kernels[kidx];
                    let ix0 = ox_lo * stride + kw - 1;
                    let mut acc = T::zero();
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + kh - 1;
                        let grow = &gplane[oy * wo + ox_lo..oy * wo + ox_hi];
                        if gkernels.is_some() {
                            if stride == 1 {
                                let irow = &inp[iy * w + ix0..iy * w + ix0 + grow.len()];
                                acc = acc + grow.iter().zip(irow).map(|(&a, &b)| a * b).sum::<T>();
                            } else {
                                for (j, &gv) in grow.iter().enumerate() {
                                    acc = acc + gv * inp[iy * w + ix0 + j * stride];
                                }
                            }
                        }
                        if let Some(gi) = ginput.as_deref_mut() {
                            if k == T::zero() {
                                continue;
                            }
                            let gi = &mut gi[ic * h * w..(ic + 1) * h * w];
                            if stride == 1 {
                                let irow = &mut gi[iy * w + ix0..iy * w + ix0 + grow.len()];
                                for (iv, &gv) in irow.iter_mut().zip(grow) {
                                    *iv = *iv + k * gv;
                                }
                            } else {
                                for (j, &gv) in grow.iter().enumerate() {
                                    let idx = iy * w + ix0 + j * stride;
                                    gi[idx] = gi[idx] + k * gv;
                                }
                            }
                        }
                    }
                    if let Some(gk) = gkernels.as_deref_mut() {
                        gk[kidx] = gk[kidx] + acc;
                    }
                }
            }
        }
    }
}

/// Pooling window `[start, end)` for output index `i` of an adaptive pool
/// mapping `len` inputs onto `out` outputs.
#[inline]
pub(crate) fn adaptive_window(i: usize, len: usize, out: usize) -> (usize, usize) {
    let start = (i * len) / out;
    let end = ((i + 1) * len).div_ceil(out);
    (start, end)
}
