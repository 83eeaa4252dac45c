//! Shared numeric kernels. The plain (no-grad) forward paths and the autodiff
//! graph both call these, so the two execution routes are bit-identical by
//! construction; a dedicated test pins that equivalence.
//!
//! Batched sequence ops (`conv1d_causal`, `ssd_scan_shared`, `reverse_rows`)
//! treat the input `[n_seq * seq_len, C]` as `n_seq` independent sequences of
//! `seq_len` contiguous rows.

use crate::mat::Mat;
use crate::scalar::Scalar;

// ---------------------------------------------------------------------------
// elementwise activations
// ---------------------------------------------------------------------------

pub fn tanh_m<T: Scalar>(x: &Mat<T>) -> Mat<T> {
    x.map(|v| v.tanh())
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid_m<T: Scalar>(x: &Mat<T>) -> Mat<T> {
    x.map(sigmoid)
}

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

pub fn silu_m<T: Scalar>(x: &Mat<T>) -> Mat<T> {
    x.map(silu)
}

#[inline]
pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// Numerically stable softplus.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::of(30.0) {
        x
    } else {
        (T::one() + x.exp()).ln()
    }
}

/// `max(softplus(x), floor)`; the floor protects the ZOH discretization from
/// a vanishing step size.
pub fn softplus_floor_m<T: Scalar>(x: &Mat<T>, floor: T) -> Mat<T> {
    x.map(|v| softplus(v).max(floor))
}

pub fn prelu_m<T: Scalar>(x: &Mat<T>, slope: T) -> Mat<T> {
    x.map(|v| if v > T::zero() { v } else { slope * v })
}

// ---------------------------------------------------------------------------
// affine map
// ---------------------------------------------------------------------------

/// `y = x · w (+ b)` with `x: [M, I]`, `w: [I, O]`, `b: [1, O]`.
pub fn linear<T: Scalar>(x: &Mat<T>, w: &Mat<T>, b: Option<&Mat<T>>) -> Mat<T> {
    let (m, i_dim) = x.shape();
    let (wi, o_dim) = w.shape();
    assert_eq!(i_dim, wi, "linear: x cols {} vs w rows {}", i_dim, wi);
    if let Some(b) = b {
        assert_eq!(b.shape(), (1, o_dim), "linear: bias shape");
    }
    let mut y = Mat::zeros(m, o_dim);
    let xd = x.data();
    let wd = w.data();
    let yd = y.data_mut();
    for r in 0..m {
        let yrow = &mut yd[r * o_dim..(r + 1) * o_dim];
        if let Some(b) = b {
            yrow.copy_from_slice(b.data());
        }
        let xrow = &xd[r * i_dim..(r + 1) * i_dim];
        for (i, &xv) in xrow.iter().enumerate() {
            if xv == T::zero() {
                continue;
            }
            let wrow = &wd[i * o_dim..(i + 1) * o_dim];
            for (yv, &wv) in yrow.iter_mut().zip(wrow.iter()) {
                *yv += xv * wv;
            }
        }
    }
    y
}

/// `dx = gy · wᵀ`.
pub fn linear_grad_x<T: Scalar>(gy: &Mat<T>, w: &Mat<T>) -> Mat<T> {
    let (m, o_dim) = gy.shape();
    let (i_dim, wo) = w.shape();
    assert_eq!(o_dim, wo);
    let mut gx = Mat::zeros(m, i_dim);
    let gd = gy.data();
    let wd = w.data();
    let xd = gx.data_mut();
    for r in 0..m {
        let grow = &gd[r * o_dim..(r + 1) * o_dim];
        let xrow = &mut xd[r * i_dim..(r + 1) * i_dim];
        for (i, slot) in xrow.iter_mut().enumerate() {
            let wrow = &wd[i * o_dim..(i + 1) * o_dim];
            let mut acc = T::zero();
            for (&g, &wv) in grow.iter().zip(wrow.iter()) {
                acc += g * wv;
            }
            *slot = acc;
        }
    }
    gx
}

/// `dw = xᵀ · gy`.
pub fn linear_grad_w<T: Scalar>(x: &Mat<T>, gy: &Mat<T>) -> Mat<T> {
    let (m, i_dim) = x.shape();
    let (gm, o_dim) = gy.shape();
    assert_eq!(m, gm);
    let mut gw = Mat::zeros(i_dim, o_dim);
    let xd = x.data();
    let gd = gy.data();
    let wd = gw.data_mut();
    for r in 0..m {
        let xrow = &xd[r * i_dim..(r + 1) * i_dim];
        let grow = &gd[r * o_dim..(r + 1) * o_dim];
        for (i, &xv) in xrow.iter().enumerate() {
            if xv == T::zero() {
                continue;
            }
            let wrow = &mut wd[i * o_dim..(i + 1) * o_dim];
            for (wv, &g) in wrow.iter_mut().zip(grow.iter()) {
                *wv += xv * g;
            }
        }
    }
    gw
}

/// Column sums as a `[1, C]` row (bias gradient).
pub fn col_sums<T: Scalar>(x: &Mat<T>) -> Mat<T> {
    let (m, c) = x.shape();
    let mut out = Mat::zeros(1, c);
    for r in 0..m {
        let row = x.row(r);
        for (o, &v) in out.data_mut().iter_mut().zip(row.iter()) {
            *o += v;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

/// Single-group normalization over the feature axis of each row, with learned
/// gain/bias: `y = (x - mean) / sqrt(var + eps) * gain + bias`.
pub fn group_norm<T: Scalar>(x: &Mat<T>, gain: &Mat<T>, bias: &Mat<T>, eps: T) -> Mat<T> {
    let (m, c) = x.shape();
    assert_eq!(gain.shape(), (1, c), "group_norm gain");
    assert_eq!(bias.shape(), (1, c), "group_norm bias");
    let inv_c = T::one() / T::of(c as f64);
    let mut y = Mat::zeros(m, c);
    for r in 0..m {
        let row = x.row(r);
        let mut mean = T::zero();
        for &v in row {
            mean += v;
        }
        mean *= inv_c;
        let mut var = T::zero();
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        var *= inv_c;
        let rstd = T::one() / (var + eps).sqrt();
        let yrow = y.row_mut(r);
        for (i, &v) in row.iter().enumerate() {
            yrow[i] = (v - mean) * rstd * gain.data()[i] + bias.data()[i];
        }
    }
    y
}

pub fn group_norm_bwd<T: Scalar>(
    x: &Mat<T>,
    gain: &Mat<T>,
    eps: T,
    gy: &Mat<T>,
) -> (Mat<T>, Mat<T>, Mat<T>) {
    let (m, c) = x.shape();
    let inv_c = T::one() / T::of(c as f64);
    let mut gx = Mat::zeros(m, c);
    let mut ggain = Mat::zeros(1, c);
    let mut gbias = Mat::zeros(1, c);
    for r in 0..m {
        let row = x.row(r);
        let grow = gy.row(r);
        let mut mean = T::zero();
        for &v in row {
            mean += v;
        }
        mean *= inv_c;
        let mut var = T::zero();
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        var *= inv_c;
        let rstd = T::one() / (var + eps).sqrt();

        // gyh = gy * gain; reductions over the feature axis.
        let mut mean_gyh = T::zero();
        let mut mean_gyh_xhat = T::zero();
        for i in 0..c {
            let xhat = (row[i] - mean) * rstd;
            let gyh = grow[i] * gain.data()[i];
            mean_gyh += gyh;
            mean_gyh_xhat += gyh * xhat;
            ggain.data_mut()[i] += grow[i] * xhat;
            gbias.data_mut()[i] += grow[i];
        }
        mean_gyh *= inv_c;
        mean_gyh_xhat *= inv_c;
        let gxrow = gx.row_mut(r);
        for i in 0..c {
            let xhat = (row[i] - mean) * rstd;
            let gyh = grow[i] * gain.data()[i];
            gxrow[i] = rstd * (gyh - mean_gyh - xhat * mean_gyh_xhat);
        }
    }
    (gx, ggain, gbias)
}

/// RMS normalization over each row with a learned gain.
pub fn rms_norm<T: Scalar>(x: &Mat<T>, gain: &Mat<T>, eps: T) -> Mat<T> {
    let (m, c) = x.shape();
    assert_eq!(gain.shape(), (1, c), "rms_norm gain");
    let inv_c = T::one() / T::of(c as f64);
    let mut y = Mat::zeros(m, c);
    for r in 0..m {
        let row = x.row(r);
        let mut ms = T::zero();
        for &v in row {
            ms += v * v;
        }
        let rrms = T::one() / (ms * inv_c + eps).sqrt();
        let yrow = y.row_mut(r);
        for (i, &v) in row.iter().enumerate() {
            yrow[i] = v * rrms * gain.data()[i];
        }
    }
    y
}

pub fn rms_norm_bwd<T: Scalar>(x: &Mat<T>, gain: &Mat<T>, eps: T, gy: &Mat<T>) -> (Mat<T>, Mat<T>) {
    let (m, c) = x.shape();
    let inv_c = T::one() / T::of(c as f64);
    let mut gx = Mat::zeros(m, c);
    let mut ggain = Mat::zeros(1, c);
    for r in 0..m {
        let row = x.row(r);
        let grow = gy.row(r);
        let mut ms = T::zero();
        for &v in row {
            ms += v * v;
        }
        let denom = ms * inv_c + eps;
        let rrms = T::one() / denom.sqrt();
        let mut mean_gyh_x = T::zero();
        for i in 0..c {
            let gyh = grow[i] * gain.data()[i];
            mean_gyh_x += gyh * row[i];
            ggain.data_mut()[i] += grow[i] * row[i] * rrms;
        }
        mean_gyh_x *= inv_c;
        let rrms3 = rrms / denom;
        let gxrow = gx.row_mut(r);
        for i in 0..c {
            let gyh = grow[i] * gain.data()[i];
            gxrow[i] = gyh * rrms - row[i] * mean_gyh_x * rrms3;
        }
    }
    (gx, ggain)
}

// ---------------------------------------------------------------------------
// depthwise causal convolution
// ---------------------------------------------------------------------------

/// Depthwise causal 1-D convolution over each sequence block: `x: [R, C]`,
/// `w: [C, k]`, `b: [1, C]`, zero left padding of `k-1` steps.
pub fn conv1d_causal<T: Scalar>(x: &Mat<T>, w: &Mat<T>, b: &Mat<T>, seq_len: usize) -> Mat<T> {
    let (rows, c) = x.shape();
    let (wc, k) = w.shape();
    assert_eq!(c, wc, "conv1d_causal channels");
    assert_eq!(b.shape(), (1, c), "conv1d_causal bias");
    assert_eq!(rows % seq_len, 0, "conv1d_causal rows divisible by seq_len");
    let mut y = Mat::zeros(rows, c);
    for seq in 0..rows / seq_len {
        let base = seq * seq_len;
        for t in 0..seq_len {
            let yrow = y.row_mut(base + t);
            yrow.copy_from_slice(b.data());
            for j in 0..k {
                // tap j reads input at offset t - (k-1) + j
                let src = t as isize - (k as isize - 1) + j as isize;
                if src < 0 {
                    continue;
                }
                let xrow = x.row(base + src as usize);
                for ch in 0..c {
                    yrow[ch] += w.at(ch, j) * xrow[ch];
                }
            }
        }
    }
    y
}

pub fn conv1d_causal_bwd<T: Scalar>(
    x: &Mat<T>,
    w: &Mat<T>,
    seq_len: usize,
    gy: &Mat<T>,
) -> (Mat<T>, Mat<T>, Mat<T>) {
    let (rows, c) = x.shape();
    let (_, k) = w.shape();
    let mut gx = Mat::zeros(rows, c);
    let mut gw = Mat::zeros(c, k);
    let gb = col_sums(gy);
    for seq in 0..rows / seq_len {
        let base = seq * seq_len;
        for t in 0..seq_len {
            let grow = gy.row(base + t);
            for j in 0..k {
                let src = t as isize - (k as isize - 1) + j as isize;
                if src < 0 {
                    continue;
                }
                let xrow = x.row(base + src as usize);
                for ch in 0..c {
                    gw.data_mut()[ch * k + j] += grow[ch] * xrow[ch];
                }
                let gxrow = gx.row_mut(base + src as usize);
                for ch in 0..c {
                    gxrow[ch] += grow[ch] * w.at(ch, j);
                }
            }
        }
    }
    (gx, gw, gb)
}

// ---------------------------------------------------------------------------
// selective-state-space scan (shared B/C, per-head scalar decay)
// ---------------------------------------------------------------------------

/// Sequential SSM scan over each sequence block.
///
/// `x: [R, H*P]` (head-major channels), `a: [R, H]` per-head decay in (0, 1],
/// `b, c: [R, S]` shared across heads. State per head is `[P, S]`; the
/// recurrence is `h_t = a_t * h_{t-1} + b_t ⊗ x_t`, `y_t = h_t · c_t`.
///
/// When `states_out` is provided it receives every post-update state
/// (`R * H * P * S` values) for the backward pass.
#[allow(clippy::too_many_arguments)]
pub fn ssd_scan_shared<T: Scalar>(
    x: &Mat<T>,
    a: &Mat<T>,
    b: &Mat<T>,
    c: &Mat<T>,
    seq_len: usize,
    heads: usize,
    pdim: usize,
    dstate: usize,
    mut states_out: Option<&mut Vec<T>>,
) -> Mat<T> {
    let (rows, hp) = x.shape();
    assert_eq!(hp, heads * pdim, "ssd_scan_shared x cols");
    assert_eq!(a.shape(), (rows, heads), "ssd_scan_shared a");
    assert_eq!(b.shape(), (rows, dstate), "ssd_scan_shared b");
    assert_eq!(c.shape(), (rows, dstate), "ssd_scan_shared c");
    assert_eq!(rows % seq_len, 0, "ssd_scan_shared rows divisible by seq_len");
    if let Some(st) = states_out.as_deref_mut() {
        st.clear();
        st.reserve(rows * heads * pdim * dstate);
    }

    let mut y = Mat::zeros(rows, hp);
    let mut state = vec![T::zero(); heads * pdim * dstate];
    for seq in 0..rows / seq_len {
        let base = seq * seq_len;
        state.iter_mut().for_each(|s| *s = T::zero());
        for t in 0..seq_len {
            let r = base + t;
            let xrow = x.row(r);
            let arow = a.row(r);
            let brow = b.row(r);
            let crow = c.row(r);
            let yrow = y.row_mut(r);
            for h in 0..heads {
                let decay = arow[h];
                for p in 0..pdim {
                    let xv = xrow[h * pdim + p];
                    let st = &mut state[(h * pdim + p) * dstate..(h * pdim + p + 1) * dstate];
                    let mut acc = T::zero();
                    for (s, (&bv, &cv)) in st.iter_mut().zip(brow.iter().zip(crow.iter())) {
                        *s = decay * *s + bv * xv;
                        acc += *s * cv;
                    }
                    yrow[h * pdim + p] = acc;
                }
            }
            if let Some(states) = states_out.as_deref_mut() {
                states.extend_from_slice(&state);
            }
        }
    }
    y
}

/// Backward of [`ssd_scan_shared`]; `states` is the buffer filled by the
/// forward call.
#[allow(clippy::too_many_arguments)]
pub fn ssd_scan_shared_bwd<T: Scalar>(
    x: &Mat<T>,
    a: &Mat<T>,
    b: &Mat<T>,
    c: &Mat<T>,
    seq_len: usize,
    heads: usize,
    pdim: usize,
    dstate: usize,
    states: &[T],
    gy: &Mat<T>,
) -> (Mat<T>, Mat<T>, Mat<T>, Mat<T>) {
    let (rows, hp) = x.shape();
    let hps = heads * pdim * dstate;
    assert_eq!(states.len(), rows * hps, "ssd_scan_shared_bwd states");
    let mut gx = Mat::zeros(rows, hp);
    let mut ga = Mat::zeros(rows, heads);
    let mut gb = Mat::zeros(rows, dstate);
    let mut gc = Mat::zeros(rows, dstate);
    let mut gh = vec![T::zero(); hps];
    let zeros = vec![T::zero(); hps];

    for seq in 0..rows / seq_len {
        let base = seq * seq_len;
        gh.iter_mut().for_each(|v| *v = T::zero());
        for t in (0..seq_len).rev() {
            let r = base + t;
            let xrow = x.row(r);
            let arow = a.row(r);
            let brow = b.row(r);
            let crow = c.row(r);
            let gyrow = gy.row(r);
            let h_now = &states[r * hps..(r + 1) * hps];
            let h_prev: &[T] = if t == 0 {
                &zeros
            } else {
                &states[(r - 1) * hps..r * hps]
            };
            for h in 0..heads {
                let mut ga_acc = T::zero();
                for p in 0..pdim {
                    let ch = h * pdim + p;
                    let g_out = gyrow[ch];
                    let st_off = ch * dstate;
                    let gh_slice = &mut gh[st_off..st_off + dstate];
                    let hn = &h_now[st_off..st_off + dstate];
                    let hp_slice = &h_prev[st_off..st_off + dstate];
                    let mut gx_acc = T::zero();
                    let gc_row = gc.row_mut(r);
                    for s in 0..dstate {
                        // y_t = h_t · c_t
                        gc_row[s] += g_out * hn[s];
                        gh_slice[s] += g_out * crow[s];
                        ga_acc += gh_slice[s] * hp_slice[s];
                        gx_acc += gh_slice[s] * brow[s];
                    }
                    gx.row_mut(r)[ch] = gx_acc;
                    let xv = xrow[ch];
                    let gb_row = gb.row_mut(r);
                    for s in 0..dstate {
                        gb_row[s] += gh_slice[s] * xv;
                        // propagate through h_t = a_t h_{t-1} + ...
                        gh_slice[s] *= arow[h];
                    }
                }
                ga.row_mut(r)[h] = ga_acc;
            }
        }
    }
    (gx, ga, gb, gc)
}

// ---------------------------------------------------------------------------
// per-head scaling
// ---------------------------------------------------------------------------

/// `y[r, h*P + p] = x[r, h*P + p] * s[r, h]`.
pub fn scale_heads<T: Scalar>(x: &Mat<T>, s: &Mat<T>, heads: usize) -> Mat<T> {
    let (rows, hp) = x.shape();
    assert_eq!(s.shape(), (rows, heads), "scale_heads");
    assert_eq!(hp % heads, 0);
    let pdim = hp / heads;
    let mut y = Mat::zeros(rows, hp);
    for r in 0..rows {
        let xrow = x.row(r);
        let srow = s.row(r);
        let yrow = y.row_mut(r);
        for h in 0..heads {
            let sv = srow[h];
            for p in 0..pdim {
                yrow[h * pdim + p] = xrow[h * pdim + p] * sv;
            }
        }
    }
    y
}

pub fn scale_heads_bwd<T: Scalar>(
    x: &Mat<T>,
    s: &Mat<T>,
    heads: usize,
    gy: &Mat<T>,
) -> (Mat<T>, Mat<T>) {
    let (rows, hp) = x.shape();
    let pdim = hp / heads;
    let mut gx = Mat::zeros(rows, hp);
    let mut gs = Mat::zeros(rows, heads);
    for r in 0..rows {
        let xrow = x.row(r);
        let srow = s.row(r);
        let grow = gy.row(r);
        let gxrow = gx.row_mut(r);
        let gsrow = gs.row_mut(r);
        for h in 0..heads {
            let mut acc = T::zero();
            for p in 0..pdim {
                let ch = h * pdim + p;
                gxrow[ch] = grow[ch] * srow[h];
                acc += grow[ch] * xrow[ch];
            }
            gsrow[h] = acc;
        }
    }
    (gx, gs)
}

// ---------------------------------------------------------------------------
// layout helpers
// ---------------------------------------------------------------------------

pub fn reverse_rows<T: Scalar>(x: &Mat<T>, seq_len: usize) -> Mat<T> {
    let (rows, cols) = x.shape();
    assert_eq!(rows % seq_len, 0, "reverse_rows");
    let mut y = Mat::zeros(rows, cols);
    for seq in 0..rows / seq_len {
        let base = seq * seq_len;
        for t in 0..seq_len {
            y.row_mut(base + t).copy_from_slice(x.row(base + seq_len - 1 - t));
        }
    }
    y
}

/// `out[r] = x[perm[r]]`.
pub fn permute_rows<T: Scalar>(x: &Mat<T>, perm: &[usize]) -> Mat<T> {
    let (rows, cols) = x.shape();
    assert_eq!(perm.len(), rows, "permute_rows");
    let mut y = Mat::zeros(rows, cols);
    for (r, &src) in perm.iter().enumerate() {
        y.row_mut(r).copy_from_slice(x.row(src));
    }
    y
}

pub fn slice_cols<T: Scalar>(x: &Mat<T>, off: usize, len: usize) -> Mat<T> {
    let (rows, cols) = x.shape();
    assert!(off + len <= cols, "slice_cols bounds");
    let mut y = Mat::zeros(rows, len);
    for r in 0..rows {
        y.row_mut(r).copy_from_slice(&x.row(r)[off..off + len]);
    }
    y
}

pub fn concat_cols<T: Scalar>(xs: &[&Mat<T>]) -> Mat<T> {
    assert!(!xs.is_empty());
    let rows = xs[0].rows();
    let total: usize = xs.iter().map(|m| m.cols()).sum();
    let mut y = Mat::zeros(rows, total);
    for r in 0..rows {
        let yrow = y.row_mut(r);
        let mut off = 0;
        for m in xs {
            assert_eq!(m.rows(), rows, "concat_cols rows");
            yrow[off..off + m.cols()].copy_from_slice(m.row(r));
            off += m.cols();
        }
    }
    y
}

pub fn slice_rows<T: Scalar>(x: &Mat<T>, off: usize, len: usize) -> Mat<T> {
    let (rows, cols) = x.shape();
    assert!(off + len <= rows, "slice_rows bounds");
    let mut y = Mat::zeros(len, cols);
    for r in 0..len {
        y.row_mut(r).copy_from_slice(x.row(off + r));
    }
    y
}

pub fn concat_rows<T: Scalar>(xs: &[&Mat<T>]) -> Mat<T> {
    assert!(!xs.is_empty());
    let cols = xs[0].cols();
    let total: usize = xs.iter().map(|m| m.rows()).sum();
    let mut y = Mat::zeros(total, cols);
    let mut off = 0;
    for m in xs {
        assert_eq!(m.cols(), cols, "concat_rows cols");
        for r in 0..m.rows() {
            y.row_mut(off + r).copy_from_slice(m.row(r));
        }
        off += m.rows();
    }
    y
}

/// Inverse of [`deinterleave_cols`]: `y[:, 2i] = a[:, i]`, `y[:, 2i+1] = b[:, i]`.
pub fn interleave_cols<T: Scalar>(a: &Mat<T>, b: &Mat<T>) -> Mat<T> {
    assert_eq!(a.shape(), b.shape(), "interleave_cols");
    let (rows, cols) = a.shape();
    let mut y = Mat::zeros(rows, 2 * cols);
    for r in 0..rows {
        let arow = a.row(r);
        let brow = b.row(r);
        let yrow = y.row_mut(r);
        for i in 0..cols {
            yrow[2 * i] = arow[i];
            yrow[2 * i + 1] = brow[i];
        }
    }
    y
}

/// Takes every second column starting at `phase` (0 or 1): used to split
/// interleaved (re, im) pairs.
pub fn deinterleave_cols<T: Scalar>(x: &Mat<T>, phase: usize) -> Mat<T> {
    let (rows, cols) = x.shape();
    assert!(phase < 2 && cols % 2 == 0, "deinterleave_cols");
    let half = cols / 2;
    let mut y = Mat::zeros(rows, half);
    for r in 0..rows {
        let xrow = x.row(r);
        let yrow = y.row_mut(r);
        for i in 0..half {
            yrow[i] = xrow[2 * i + phase];
        }
    }
    y
}

pub fn broadcast_row<T: Scalar>(v: &Mat<T>, rows: usize) -> Mat<T> {
    assert_eq!(v.rows(), 1, "broadcast_row expects [1, C]");
    let cols = v.cols();
    let mut y = Mat::zeros(rows, cols);
    for r in 0..rows {
        y.row_mut(r).copy_from_slice(v.data());
    }
    y
}

/// Mean absolute difference over all elements.
pub fn abs_diff_mean<T: Scalar>(a: &Mat<T>, b: &Mat<T>) -> T {
    assert_eq!(a.shape(), b.shape(), "abs_diff_mean shape");
    let mut acc = T::zero();
    for (&x, &y) in a.data().iter().zip(b.data().iter()) {
        acc += (x - y).abs();
    }
    acc / T::of(a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn randmat(rows: usize, cols: usize, seed: u64) -> Mat<f64> {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Mat::from_fn(rows, cols, |_, _| r.random_range(-1.0..1.0))
    }

    #[test]
    fn linear_matches_naive() {
        let x = randmat(3, 4, 1);
        let w = randmat(4, 5, 2);
        let b = randmat(1, 5, 3);
        let y = linear(&x, &w, Some(&b));
        for m in 0..3 {
            for o in 0..5 {
                let mut acc = b.at(0, o);
                for i in 0..4 {
                    acc += x.at(m, i) * w.at(i, o);
                }
                assert!((y.at(m, o) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_is_causal_and_matches_naive() {
        let seq_len = 6;
        let x = randmat(2 * seq_len, 3, 4);
        let w = randmat(3, 4, 5);
        let b = randmat(1, 3, 6);
        let y = conv1d_causal(&x, &w, &b, seq_len);
        let k = 4usize;
        for seq in 0..2 {
            for t in 0..seq_len {
                for ch in 0..3 {
                    let mut acc = b.at(0, ch);
                    for j in 0..k {
                        let src = t as isize - (k as isize - 1) + j as isize;
                        if src >= 0 {
                            acc += w.at(ch, j) * x.at(seq * seq_len + src as usize, ch);
                        }
                    }
                    assert!((y.at(seq * seq_len + t, ch) - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn scan_prefix_sum_special_case() {
        // a == 1, b == 1, c == 1, single head/state/pdim: y = prefix sums.
        let rows = 5;
        let x = Mat::from_vec(rows, 1, vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let ones = Mat::from_fn(rows, 1, |_, _| 1.0);
        let y = ssd_scan_shared(&x, &ones, &ones, &ones, rows, 1, 1, 1, None);
        assert_eq!(y.data(), &[1.0, 3.0, 6.0, 10.0, 15.0]);
    }

    #[test]
    fn group_norm_normalizes_rows() {
        let x = randmat(4, 8, 9);
        let gain = Mat::from_fn(1, 8, |_, _| 1.0);
        let bias = Mat::zeros(1, 8);
        let y = group_norm(&x, &gain, &bias, 1e-12);
        for r in 0..4 {
            let row = y.row(r);
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layout_ops_round_trip() {
        let x = randmat(6, 4, 11);
        let r = reverse_rows(&reverse_rows(&x, 3), 3);
        assert_eq!(r, x);
        let a = slice_cols(&x, 0, 2);
        let b = slice_cols(&x, 2, 2);
        assert_eq!(concat_cols(&[&a, &b]), x);
        let top = slice_rows(&x, 0, 4);
        let bot = slice_rows(&x, 4, 2);
        assert_eq!(concat_rows(&[&top, &bot]), x);
        let even = deinterleave_cols(&x, 0);
        let odd = deinterleave_cols(&x, 1);
        for r in 0..6 {
            for i in 0..2 {
                assert_eq!(even.at(r, i), x.at(r, 2 * i));
                assert_eq!(odd.at(r, i), x.at(r, 2 * i + 1));
            }
        }
    }
}
