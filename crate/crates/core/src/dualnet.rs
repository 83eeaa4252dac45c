//! The dual-path core: residual bidirectional Mamba-2 layers applied across
//! time then across bands, a transform-average-concatenate (TAC) module for
//! the stereo channel pair, and the stage-coupling fusion layer.

use std::sync::Arc;

use crate::bands::{Feature, FeatureVar, NORM_EPS};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels as k;
use crate::mat::Mat;
use crate::rng::{self, SeededRng};
use crate::scalar::Scalar;
use crate::spectral::CHANNELS;
use crate::ssd::{self, BMamba2P, BMamba2Params, Discretization, SsdDims};

pub const PRELU_INIT_SLOPE: f64 = 0.25;

// ---------------------------------------------------------------------------
// parameters
// ---------------------------------------------------------------------------

/// One residual sequence layer: norm -> BMAMBA2 -> affine `2N -> N`, added
/// back onto the input.
#[derive(Clone, Debug)]
pub struct ResidualLayerP<V> {
    pub norm_gain: V, // [1, N]
    pub norm_bias: V, // [1, N]
    pub bmamba2: BMamba2P<V>,
    pub proj_w: V, // [2N, N]
    pub proj_b: V, // [1, N]
}

pub type ResidualLayerParams<T> = ResidualLayerP<Mat<T>>;

impl<V> ResidualLayerP<V> {
    pub fn map<U>(&self, f: &mut impl FnMut(&V) -> U) -> ResidualLayerP<U> {
        ResidualLayerP {
            norm_gain: f(&self.norm_gain),
            norm_bias: f(&self.norm_bias),
            bmamba2: self.bmamba2.map(f),
            proj_w: f(&self.proj_w),
            proj_b: f(&self.proj_b),
        }
    }

    pub fn for_each_named<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a V)) {
        f(format!("{prefix}.norm_gain"), &self.norm_gain);
        f(format!("{prefix}.norm_bias"), &self.norm_bias);
        self.bmamba2.for_each_named(&format!("{prefix}.bmamba2"), f);
        f(format!("{prefix}.proj_w"), &self.proj_w);
        f(format!("{prefix}.proj_b"), &self.proj_b);
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(&mut V)) {
        f(&mut self.norm_gain);
        f(&mut self.norm_bias);
        self.bmamba2.for_each_mut(f);
        f(&mut self.proj_w);
        f(&mut self.proj_b);
    }
}

impl<T: Scalar> ResidualLayerParams<T> {
    pub fn init(dims: &SsdDims, rng: &mut SeededRng) -> Self {
        let n = dims.d_model;
        ResidualLayerP {
            norm_gain: Mat::from_fn(1, n, |_, _| T::one()),
            norm_bias: Mat::zeros(1, n),
            bmamba2: BMamba2Params::init(dims, rng),
            proj_w: rng::fan_in_mat(rng, 2 * n, 2 * n, n),
            proj_b: Mat::zeros(1, n),
        }
    }

    pub fn zeros(dims: &SsdDims) -> Self {
        let n = dims.d_model;
        ResidualLayerP {
            norm_gain: Mat::zeros(1, n),
            norm_bias: Mat::zeros(1, n),
            bmamba2: BMamba2Params::zeros(dims),
            proj_w: Mat::zeros(2 * n, n),
            proj_b: Mat::zeros(1, n),
        }
    }
}

/// Transform-average-concatenate channel-communication module.
#[derive(Clone, Debug)]
pub struct TacP<V> {
    pub w1: V, // [N, 3N]
    pub b1: V, // [1, 3N]
    pub s1: V, // [1, 1] PReLU slope
    pub w2: V, // [3N, 3N]
    pub b2: V, // [1, 3N]
    pub s2: V,
    pub w3: V, // [6N, N]
    pub b3: V, // [1, N]
    pub s3: V,
}

pub type TacParams<T> = TacP<Mat<T>>;

impl<V> TacP<V> {
    pub fn map<U>(&self, f: &mut impl FnMut(&V) -> U) -> TacP<U> {
        TacP {
            w1: f(&self.w1),
            b1: f(&self.b1),
            s1: f(&self.s1),
            w2: f(&self.w2),
            b2: f(&self.b2),
            s2: f(&self.s2),
            w3: f(&self.w3),
            b3: f(&self.b3),
            s3: f(&self.s3),
        }
    }

    pub fn for_each_named<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a V)) {
        f(format!("{prefix}.w1"), &self.w1);
        f(format!("{prefix}.b1"), &self.b1);
        f(format!("{prefix}.s1"), &self.s1);
        f(format!("{prefix}.w2"), &self.w2);
        f(format!("{prefix}.b2"), &self.b2);
        f(format!("{prefix}.s2"), &self.s2);
        f(format!("{prefix}.w3"), &self.w3);
        f(format!("{prefix}.b3"), &self.b3);
        f(format!("{prefix}.s3"), &self.s3);
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(&mut V)) {
        f(&mut self.w1);
        f(&mut self.b1);
        f(&mut self.s1);
        f(&mut self.w2);
        f(&mut self.b2);
        f(&mut self.s2);
        f(&mut self.w3);
        f(&mut self.b3);
        f(&mut self.s3);
    }
}

impl<T: Scalar> TacParams<T> {
    pub fn init(n: usize, rng: &mut SeededRng) -> Self {
        let h = 3 * n;
        TacP {
            w1: rng::fan_in_mat(rng, n, n, h),
            b1: Mat::zeros(1, h),
            s1: Mat::scalar(T::of(PRELU_INIT_SLOPE)),
            w2: rng::fan_in_mat(rng, h, h, h),
            b2: Mat::zeros(1, h),
            s2: Mat::scalar(T::of(PRELU_INIT_SLOPE)),
            w3: rng::fan_in_mat(rng, 2 * h, 2 * h, n),
            b3: Mat::zeros(1, n),
            s3: Mat::scalar(T::of(PRELU_INIT_SLOPE)),
        }
    }

    pub fn zeros(n: usize) -> Self {
        let h = 3 * n;
        TacP {
            w1: Mat::zeros(n, h),
            b1: Mat::zeros(1, h),
            s1: Mat::scalar(T::of(PRELU_INIT_SLOPE)),
            w2: Mat::zeros(h, h),
            b2: Mat::zeros(1, h),
            s2: Mat::scalar(T::of(PRELU_INIT_SLOPE)),
            w3: Mat::zeros(2 * h, n),
            b3: Mat::zeros(1, n),
            s3: Mat::scalar(T::of(PRELU_INIT_SLOPE)),
        }
    }
}

/// One dual-path layer: time-direction residual layer, band-direction
/// residual layer, then TAC across the stereo pair.
#[derive(Clone, Debug)]
pub struct DualLayerP<V> {
    pub time: ResidualLayerP<V>,
    pub band: ResidualLayerP<V>,
    pub tac: TacP<V>,
}

pub type DualLayerParams<T> = DualLayerP<Mat<T>>;

impl<V> DualLayerP<V> {
    pub fn map<U>(&self, f: &mut impl FnMut(&V) -> U) -> DualLayerP<U> {
        DualLayerP {
            time: self.time.map(f),
            band: self.band.map(f),
            tac: self.tac.map(f),
        }
    }

    pub fn for_each_named<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a V)) {
        self.time.for_each_named(&format!("{prefix}.time"), f);
        self.band.for_each_named(&format!("{prefix}.band"), f);
        self.tac.for_each_named(&format!("{prefix}.tac"), f);
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(&mut V)) {
        self.time.for_each_mut(f);
        self.band.for_each_mut(f);
        self.tac.for_each_mut(f);
    }
}

impl<T: Scalar> DualLayerParams<T> {
    pub fn init(dims: &SsdDims, rng: &mut SeededRng) -> Self {
        DualLayerP {
            time: ResidualLayerParams::init(dims, rng),
            band: ResidualLayerParams::init(dims, rng),
            tac: TacParams::init(dims.d_model, rng),
        }
    }

    pub fn zeros(dims: &SsdDims) -> Self {
        DualLayerP {
            time: ResidualLayerParams::zeros(dims),
            band: ResidualLayerParams::zeros(dims),
            tac: TacParams::zeros(dims.d_model),
        }
    }
}

/// Stage-coupling fusion: `tanh(affine([D1 ; Z2]))`, `2N -> N`.
#[derive(Clone, Debug)]
pub struct FusionP<V> {
    pub w: V, // [2N, N]
    pub b: V, // [1, N]
}

pub type FusionParams<T> = FusionP<Mat<T>>;

impl<V> FusionP<V> {
    pub fn map<U>(&self, f: &mut impl FnMut(&V) -> U) -> FusionP<U> {
        FusionP {
            w: f(&self.w),
            b: f(&self.b),
        }
    }

    pub fn for_each_named<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a V)) {
        f(format!("{prefix}.w"), &self.w);
        f(format!("{prefix}.b"), &self.b);
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(&mut V)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

impl<T: Scalar> FusionParams<T> {
    pub fn init(n: usize, rng: &mut SeededRng) -> Self {
        FusionP {
            w: rng::fan_in_mat(rng, 2 * n, 2 * n, n),
            b: Mat::zeros(1, n),
        }
    }

    pub fn zeros(n: usize) -> Self {
        FusionP {
            w: Mat::zeros(2 * n, n),
            b: Mat::zeros(1, n),
        }
    }
}

// ---------------------------------------------------------------------------
// row permutations between (channel, band, frame) and (channel, frame, band)
// ---------------------------------------------------------------------------

/// Permutation mapping (channel, frame, band) row order back to sources in
/// (channel, band, frame) order.
pub fn perm_to_frame_major(bands: usize, frames: usize) -> Arc<Vec<usize>> {
    let mut perm = Vec::with_capacity(CHANNELS * bands * frames);
    for c in 0..CHANNELS {
        for t in 0..frames {
            for band in 0..bands {
                perm.push((c * bands + band) * frames + t);
            }
        }
    }
    Arc::new(perm)
}

/// Inverse of [`perm_to_frame_major`].
pub fn perm_to_band_major(bands: usize, frames: usize) -> Arc<Vec<usize>> {
    let mut perm = Vec::with_capacity(CHANNELS * bands * frames);
    for c in 0..CHANNELS {
        for band in 0..bands {
            for t in 0..frames {
                perm.push((c * frames + t) * bands + band);
            }
        }
    }
    Arc::new(perm)
}

// ---------------------------------------------------------------------------
// forward, plain path
// ---------------------------------------------------------------------------

/// Residual BMAMBA2 layer over batched sequences:
/// `out = seq + affine(bmamba2(norm(seq)))`.
pub fn residual_layer<T: Scalar>(
    seq: &Mat<T>,
    seq_len: usize,
    p: &ResidualLayerParams<T>,
    dims: &SsdDims,
    mode: Discretization,
    ctx: &str,
) -> Result<Mat<T>> {
    if seq.cols() != dims.d_model {
        return Err(Error::shape(
            "residual_layer",
            format!("cols {} vs d_model {}", seq.cols(), dims.d_model),
        ));
    }
    let normed = k::group_norm(seq, &p.norm_gain, &p.norm_bias, T::of(NORM_EPS));
    let bi = ssd::bmamba2_forward(&normed, seq_len, &p.bmamba2, dims, mode, ctx)?;
    let branch = k::linear(&bi, &p.proj_w, Some(&p.proj_b));
    let mut out = seq.clone();
    out.add_assign(&branch);
    Ok(out)
}

/// TAC over a stereo pair: rows `[0, m)` are channel 0, `[m, 2m)` channel 1.
pub fn tac_forward<T: Scalar>(x: &Mat<T>, p: &TacParams<T>) -> Result<Mat<T>> {
    let rows = x.rows();
    if rows % 2 != 0 || rows == 0 {
        return Err(Error::Audio(format!(
            "tac_forward needs an even row count (stereo pair), got {rows}"
        )));
    }
    let m = rows / 2;
    let s1 = p.s1.data()[0];
    let s2 = p.s2.data()[0];
    let s3 = p.s3.data()[0];
    let h = k::prelu_m(&k::linear(x, &p.w1, Some(&p.b1)), s1);
    let h0 = k::slice_rows(&h, 0, m);
    let h1 = k::slice_rows(&h, m, m);
    let mut mean = h0.clone();
    mean.add_assign(&h1);
    mean.scale_in_place(T::of(0.5));
    let gm = k::prelu_m(&k::linear(&mean, &p.w2, Some(&p.b2)), s2);

    let x0 = k::slice_rows(x, 0, m);
    let x1 = k::slice_rows(x, m, m);
    let cat0 = k::concat_cols(&[&h0, &gm]);
    let cat1 = k::concat_cols(&[&h1, &gm]);
    let mut out0 = x0;
    out0.add_assign(&k::prelu_m(&k::linear(&cat0, &p.w3, Some(&p.b3)), s3));
    let mut out1 = x1;
    out1.add_assign(&k::prelu_m(&k::linear(&cat1, &p.w3, Some(&p.b3)), s3));
    Ok(k::concat_rows(&[&out0, &out1]))
}

/// Full dual-path stack: per layer, residual scan over frames for every
/// (channel, band), residual scan over bands for every (channel, frame), then
/// TAC per (band, frame).
pub fn dualnet_forward<T: Scalar>(
    z: &Feature<T>,
    layers: &[DualLayerParams<T>],
    dims: &SsdDims,
    mode: Discretization,
    ctx: &str,
) -> Result<Feature<T>> {
    let to_frame_major = perm_to_frame_major(z.k, z.t);
    let to_band_major = perm_to_band_major(z.k, z.t);
    let mut cur = z.mat.clone();
    for (li, layer) in layers.iter().enumerate() {
        let time_out = residual_layer(
            &cur,
            z.t,
            &layer.time,
            dims,
            mode,
            &format!("{ctx}.layer{li}.time"),
        )?;
        let fm = k::permute_rows(&time_out, &to_frame_major);
        let band_out = residual_layer(
            &fm,
            z.k,
            &layer.band,
            dims,
            mode,
            &format!("{ctx}.layer{li}.band"),
        )?;
        let tac_out = tac_forward(&band_out, &layer.tac)?;
        cur = k::permute_rows(&tac_out, &to_band_major);
    }
    Feature::new(z.n, z.k, z.t, cur)
}

/// Fusion of the stage-1 dual-path output with the stage-2 band-split
/// features: concat along N, affine `2N -> N`, tanh.
pub fn fusion<T: Scalar>(
    d1: &Feature<T>,
    z2: &Feature<T>,
    p: &FusionParams<T>,
) -> Result<Feature<T>> {
    if d1.mat.shape() != z2.mat.shape() {
        return Err(Error::shape(
            "fusion",
            format!("{:?} vs {:?}", d1.mat.shape(), z2.mat.shape()),
        ));
    }
    let cat = k::concat_cols(&[&d1.mat, &z2.mat]);
    let out = k::tanh_m(&k::linear(&cat, &p.w, Some(&p.b)));
    Feature::new(d1.n, d1.k, d1.t, out)
}

// ---------------------------------------------------------------------------
// forward, graph path
// ---------------------------------------------------------------------------

pub fn residual_layer_g<T: Scalar>(
    g: &mut Graph<T>,
    seq: Var,
    seq_len: usize,
    p: &ResidualLayerP<Var>,
    dims: &SsdDims,
    mode: Discretization,
    ctx: &str,
) -> Result<Var> {
    let normed = g.group_norm(seq, p.norm_gain, p.norm_bias, T::of(NORM_EPS));
    let bi = ssd::bmamba2_forward_g(g, normed, seq_len, &p.bmamba2, dims, mode, ctx)?;
    let branch = g.linear(bi, p.proj_w, Some(p.proj_b));
    Ok(g.add(seq, branch))
}

pub fn tac_forward_g<T: Scalar>(g: &mut Graph<T>, x: Var, p: &TacP<Var>) -> Result<Var> {
    let rows = g.value(x).rows();
    if rows % 2 != 0 || rows == 0 {
        return Err(Error::Audio(format!(
            "tac_forward needs an even row count (stereo pair), got {rows}"
        )));
    }
    let m = rows / 2;
    let lin1 = g.linear(x, p.w1, Some(p.b1));
    let h = g.prelu(lin1, p.s1);
    let h0 = g.slice_rows(h, 0, m);
    let h1 = g.slice_rows(h, m, m);
    let sum = g.add(h0, h1);
    let mean = g.scale(sum, T::of(0.5));
    let lin2 = g.linear(mean, p.w2, Some(p.b2));
    let gm = g.prelu(lin2, p.s2);

    let x0 = g.slice_rows(x, 0, m);
    let x1 = g.slice_rows(x, m, m);
    let cat0 = g.concat_cols(&[h0, gm]);
    let cat1 = g.concat_cols(&[h1, gm]);
    let lin30 = g.linear(cat0, p.w3, Some(p.b3));
    let pr0 = g.prelu(lin30, p.s3);
    let out0 = g.add(x0, pr0);
    let lin31 = g.linear(cat1, p.w3, Some(p.b3));
    let pr1 = g.prelu(lin31, p.s3);
    let out1 = g.add(x1, pr1);
    Ok(g.concat_rows(&[out0, out1]))
}

pub fn dualnet_forward_g<T: Scalar>(
    g: &mut Graph<T>,
    z: &FeatureVar,
    layers: &[DualLayerP<Var>],
    dims: &SsdDims,
    mode: Discretization,
    ctx: &str,
) -> Result<FeatureVar> {
    let to_frame_major = perm_to_frame_major(z.k, z.t);
    let to_band_major = perm_to_band_major(z.k, z.t);
    let mut cur = z.var;
    for (li, layer) in layers.iter().enumerate() {
        let time_out = residual_layer_g(
            g,
            cur,
            z.t,
            &layer.time,
            dims,
            mode,
            &format!("{ctx}.layer{li}.time"),
        )?;
        let fm = g.permute_rows(time_out, to_frame_major.clone());
        let band_out = residual_layer_g(
            g,
            fm,
            z.k,
            &layer.band,
            dims,
            mode,
            &format!("{ctx}.layer{li}.band"),
        )?;
        let tac_out = tac_forward_g(g, band_out, &layer.tac)?;
        cur = g.permute_rows(tac_out, to_band_major.clone());
    }
    Ok(FeatureVar {
        n: z.n,
        k: z.k,
        t: z.t,
        var: cur,
    })
}

pub fn fusion_g<T: Scalar>(
    g: &mut Graph<T>,
    d1: &FeatureVar,
    z2: &FeatureVar,
    p: &FusionP<Var>,
) -> Result<FeatureVar> {
    let cat = g.concat_cols(&[d1.var, z2.var]);
    let lin = g.linear(cat, p.w, Some(p.b));
    let out = g.tanh(lin);
    Ok(FeatureVar {
        n: d1.n,
        k: d1.k,
        t: d1.t,
        var: out,
    })
}
