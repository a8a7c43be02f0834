//! Raw slice kernels shared by the tape's forward and backward rules.

pub(crate) const LN_EPS: f64 = 1e-5;

/// `c (+)= op(a) · op(b)` for row-major `a` (m×k) and `b` (k×n).
///
/// With `trans_a`, `a` is stored k×m; with `trans_b`, `b` is stored n×k.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the debug assertion above documents the extents; every caller
    // passes slices sized from the same m, k, n.
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

/// Geometry of a convolution along one axis of a `[.., len, .., channels]` tensor.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AxisGeom {
    pub outer: usize,
    pub len: usize,
    pub inner: usize,
    pub channels: usize,
}

impl AxisGeom {
    pub fn from_shape(shape: &[usize], axis: usize) -> Self {
        let rank = shape.len();
        Self {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..rank - 1].iter().product(),
            channels: shape[rank - 1],
        }
    }

    /// Valid output range `[l0, l1)` for a tap at signed offset `off`.
    fn valid(&self, off: isize) -> Option<(usize, usize)> {
        let len = self.len as isize;
        let l0 = (-off).max(0);
        let l1 = (len - off).min(len);
        (l0 < l1).then_some((l0 as usize, l1 as usize))
    }

    fn row(&self, o: usize, l: usize) -> usize {
        (o * self.len + l) * self.inner
    }
}

fn tap_offset(tap: usize, kernel: usize, dilation: usize) -> isize {
    (tap * dilation) as isize - (dilation * (kernel - 1) / 2) as isize
}

/// Same-padded dilated convolution; `w` is `[kernel, c_in, c_out]`.
pub(crate) fn conv_forward(
    x: &[f64],
    g: AxisGeom,
    w: &[f64],
    kernel: usize,
    dilation: usize,
    c_out: usize,
) -> Vec<f64> {
    let c_in = g.channels;
    let mut out = vec![0.0; g.outer * g.len * g.inner * c_out];
    for tap in 0..kernel {
        let off = tap_offset(tap, kernel, dilation);
        let Some((l0, l1)) = g.valid(off) else { continue };
        let wk = &w[tap * c_in * c_out..(tap + 1) * c_in * c_out];
        let rows = (l1 - l0) * g.inner;
        for o in 0..g.outer {
            let src = g.row(o, (l0 as isize + off) as usize);
            let dst = g.row(o, l0);
            gemm(
                rows,
                c_in,
                c_out,
                &x[src * c_in..],
                false,
                wk,
                false,
                &mut out[dst * c_out..],
                true,
            );
        }
    }
    out
}

/// Returns `(dx, dw)` for [`conv_forward`].
pub(crate) fn conv_backward(
    x: &[f64],
    g: AxisGeom,
    w: &[f64],
    kernel: usize,
    dilation: usize,
    c_out: usize,
    dout: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let c_in = g.channels;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    for tap in 0..kernel {
        let off = tap_offset(tap, kernel, dilation);
        let Some((l0, l1)) = g.valid(off) else { continue };
        let wk = &w[tap * c_in * c_out..(tap + 1) * c_in * c_out];
        let rows = (l1 - l0) * g.inner;
        for o in 0..g.outer {
            let src = g.row(o, (l0 as isize + off) as usize);
            let dst = g.row(o, l0);
            let dy = &dout[dst * c_out..(dst + rows) * c_out];
            gemm(rows, c_out, c_in, dy, false, wk, true, &mut dx[src * c_in..], true);
            gemm(
                c_in,
                rows,
                c_out,
                &x[src * c_in..(src + rows) * c_in],
                true,
                dy,
                false,
                &mut dw[tap * c_in * c_out..],
                true,
            );
        }
    }
    (dx, dw)
}

/// Same-padded windowed max with `-inf` padding. Returns values and the flat
/// source index of each maximum.
pub(crate) fn maxpool_forward(x: &[f64], g: AxisGeom, window: usize) -> (Vec<f64>, Vec<usize>) {
    let half = (window / 2) as isize;
    let c = g.channels;
    let n = x.len();
    let mut out = vec![f64::NEG_INFINITY; n];
    let mut arg = vec![0usize; n];
    for o in 0..g.outer {
        for l in 0..g.len {
            for i in 0..g.inner {
                let dst = (g.row(o, l) + i) * c;
                for tap in -half..=half {
                    let src_l = l as isize + tap;
                    if src_l < 0 || src_l >= g.len as isize {
                        continue;
                    }
                    let src = (g.row(o, src_l as usize) + i) * c;
                    for ch in 0..c {
                        let v = x[src + ch];
                        if v > out[dst + ch] {
                            out[dst + ch] = v;
                            arg[dst + ch] = src + ch;
                        }
                    }
                }
            }
        }
    }
    (out, arg)
}

pub(crate) fn softmax_rows(x: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, dst) in x.chunks(m).zip(out.chunks_mut(m)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            sum += *d;
        }
        dst.iter_mut().for_each(|d| *d /= sum);
    }
    out
}

pub(crate) fn softmax_rows_backward(y: &[f64], dy: &[f64], m: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for ((yr, dyr), dxr) in y.chunks(m).zip(dy.chunks(m)).zip(dx.chunks_mut(m)) {
        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for ((d, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d = yv * (g - dot);
        }
    }
    dx
}

/// Per-row normalization over the trailing `c` values.
/// Returns `(normalized, reciprocal std per row)`.
pub(crate) fn layer_norm_stats(x: &[f64], c: usize) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / c;
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for (r, (row, dst)) in x.chunks(c).zip(xhat.chunks_mut(c)).enumerate() {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - mean) * rs;
        }
    }
    (xhat, rstd)
}

pub(crate) fn layer_norm_backward(
    xhat: &[f64],
    rstd: &[f64],
    gain: &[f64],
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let c = gain.len();
    let mut dx = vec![0.0; xhat.len()];
    let mut dgain = vec![0.0; c];
    let mut dbias = vec![0.0; c];
    let mut dxhat = vec![0.0; c];
    for (r, ((xr, dyr), dxr)) in xhat
        .chunks(c)
        .zip(dy.chunks(c))
        .zip(dx.chunks_mut(c))
        .enumerate()
    {
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for j in 0..c {
            dgain[j] += dyr[j] * xr[j];
            dbias[j] += dyr[j];
            dxhat[j] = dyr[j] * gain[j];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xr[j];
        }
        mean_d /= c as f64;
        mean_dx /= c as f64;
        for j in 0..c {
            dxr[j] = rstd[r] * (dxhat[j] - mean_d - xr[j] * mean_dx);
        }
    }
    (dx, dgain, dbias)
}
