//! Band-split encoder and per-source band-merge decoder heads: the maps
//! between complex spectrograms and the `[2, N, K, T]` feature space.
//!
//! Feature tensors are stored as `[2*K*T, N]` matrices with rows ordered
//! (channel, band, frame); per-band inputs interleave real/imaginary parts per
//! bin as (re0, im0, re1, im1, ...). Both layouts are fixed so saved weights
//! stay portable.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels as k;
use crate::mat::Mat;
use crate::rng::{self, SeededRng};
use crate::scalar::Scalar;
use crate::spectral::{ComplexSpectrogram, StftConfig, CHANNELS};

/// Epsilon of the single-group feature normalizations.
pub const NORM_EPS: f64 = 1e-5;

/// Band count of the default scheme.
pub const DEFAULT_BANDS: usize = 57;

// ---------------------------------------------------------------------------
// band scheme
// ---------------------------------------------------------------------------

/// Partition of the `F` frequency bins into `K` contiguous sub-bands.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BandScheme {
    widths: Vec<usize>,
}

impl BandScheme {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.is_empty() || widths.iter().any(|&w| w == 0) {
            return Err(Error::Config(
                "band scheme needs at least one band, all widths >= 1".into(),
            ));
        }
        Ok(BandScheme { widths })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn k(&self) -> usize {
        self.widths.len()
    }

    pub fn total_bins(&self) -> usize {
        self.widths.iter().sum()
    }

    /// Exclusive prefix sums of the widths: the start bin of each band.
    pub fn starts(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.widths.len());
        let mut acc = 0;
        for &w in &self.widths {
            out.push(acc);
            acc += w;
        }
        out
    }

    pub fn check_covers(&self, bins: usize) -> Result<()> {
        if self.total_bins() != bins {
            return Err(Error::shape(
                "band scheme",
                format!("widths sum to {} but spectrogram has {bins} bins", self.total_bins()),
            ));
        }
        Ok(())
    }
}

/// Widths of the default 57-band partition of 1025 bins: fine bands at low
/// frequency, monotonically non-decreasing widths toward the top.
const WIDTHS_1025: [(usize, usize); 8] = [
    (12, 4),
    (12, 8),
    (12, 16),
    (11, 32),
    (7, 33),
    (1, 34),
    (1, 36),
    (1, 36),
];

/// Default band scheme. For 1025 bins (2048-point STFT) this is the built-in
/// 57-band table; for other bin counts a uniform 57-band partition with the
/// remainder pushed to the top bands.
pub fn default_band_scheme(bins: usize) -> Result<BandScheme> {
    if bins < DEFAULT_BANDS {
        return Err(Error::Config(format!(
            "cannot split {bins} bins into {DEFAULT_BANDS} bands"
        )));
    }
    if bins == 1025 {
        let mut widths = Vec::with_capacity(DEFAULT_BANDS);
        for (count, width) in WIDTHS_1025 {
            widths.extend(std::iter::repeat(width).take(count));
        }
        debug_assert_eq!(widths.len(), DEFAULT_BANDS);
        debug_assert_eq!(widths.iter().sum::<usize>(), 1025);
        return BandScheme::new(widths);
    }
    uniform_scheme(bins, DEFAULT_BANDS)
}

/// Uniform-ish partition of `bins` into `k` bands; the remainder goes to the
/// last bands so widths stay monotonically non-decreasing.
pub fn uniform_scheme(bins: usize, k: usize) -> Result<BandScheme> {
    if bins < k || k == 0 {
        return Err(Error::Config(format!("cannot split {bins} bins into {k} bands")));
    }
    let base = bins / k;
    let extra = bins % k;
    let mut widths = vec![base; k];
    for w in widths.iter_mut().skip(k - extra) {
        *w += 1;
    }
    BandScheme::new(widths)
}

// ---------------------------------------------------------------------------
// feature tensor
// ---------------------------------------------------------------------------

/// Real 4-D feature array `[2, N, K, T]`, stored as `[2*K*T, N]` with rows
/// ordered (channel, band, frame).
#[derive(Clone, Debug)]
pub struct Feature<T> {
    pub n: usize,
    pub k: usize,
    pub t: usize,
    pub mat: Mat<T>,
}

impl<T: Scalar> Feature<T> {
    pub fn new(n: usize, k: usize, t: usize, mat: Mat<T>) -> Result<Self> {
        if mat.shape() != (CHANNELS * k * t, n) {
            return Err(Error::shape(
                "Feature::new",
                format!("expected [{}, {n}], got {:?}", CHANNELS * k * t, mat.shape()),
            ));
        }
        Ok(Feature { n, k, t, mat })
    }

    #[inline]
    pub fn row_index(&self, channel: usize, band: usize, frame: usize) -> usize {
        (channel * self.k + band) * self.t + frame
    }

    pub fn at(&self, channel: usize, feature: usize, band: usize, frame: usize) -> T {
        self.mat.at(self.row_index(channel, band, frame), feature)
    }

    pub fn is_finite(&self) -> bool {
        self.mat.is_finite()
    }
}

/// Graph-side feature handle with the same row ordering.
#[derive(Clone, Copy, Debug)]
pub struct FeatureVar {
    pub n: usize,
    pub k: usize,
    pub t: usize,
    pub var: Var,
}

// ---------------------------------------------------------------------------
// parameters
// ---------------------------------------------------------------------------

/// Per-band normalization + affine of the band-split encoder.
#[derive(Clone, Debug)]
pub struct BandSplitBandP<V> {
    pub norm_gain: V, // [1, 2*G]
    pub norm_bias: V, // [1, 2*G]
    pub w: V,         // [2*G, N]
    pub b: V,         // [1, N]
}

#[derive(Clone, Debug)]
pub struct BandSplitP<V> {
    pub bands: Vec<BandSplitBandP<V>>,
}

pub type BandSplitParams<T> = BandSplitP<Mat<T>>;

impl<V> BandSplitP<V> {
    pub fn map<U>(&self, f: &mut impl FnMut(&V) -> U) -> BandSplitP<U> {
        BandSplitP {
            bands: self
                .bands
                .iter()
                .map(|b| BandSplitBandP {
                    norm_gain: f(&b.norm_gain),
                    norm_bias: f(&b.norm_bias),
                    w: f(&b.w),
                    b: f(&b.b),
                })
                .collect(),
        }
    }

    pub fn for_each_named<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a V)) {
        for (i, b) in self.bands.iter().enumerate() {
            f(format!("{prefix}.band{i:02}.norm_gain"), &b.norm_gain);
            f(format!("{prefix}.band{i:02}.norm_bias"), &b.norm_bias);
            f(format!("{prefix}.band{i:02}.w"), &b.w);
            f(format!("{prefix}.band{i:02}.b"), &b.b);
        }
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(&mut V)) {
        for b in self.bands.iter_mut() {
            f(&mut b.norm_gain);
            f(&mut b.norm_bias);
            f(&mut b.w);
            f(&mut b.b);
        }
    }
}

impl<T: Scalar> BandSplitParams<T> {
    pub fn init(scheme: &BandScheme, n: usize, rng: &mut SeededRng) -> Self {
        BandSplitP {
            bands: scheme
                .widths()
                .iter()
                .map(|&g| BandSplitBandP {
                    norm_gain: Mat::from_fn(1, 2 * g, |_, _| T::one()),
                    norm_bias: Mat::zeros(1, 2 * g),
                    w: rng::fan_in_mat(rng, 2 * g, 2 * g, n),
                    b: Mat::zeros(1, n),
                })
                .collect(),
        }
    }

    pub fn zeros(scheme: &BandScheme, n: usize) -> Self {
        BandSplitP {
            bands: scheme
                .widths()
                .iter()
                .map(|&g| BandSplitBandP {
                    norm_gain: Mat::zeros(1, 2 * g),
                    norm_bias: Mat::zeros(1, 2 * g),
                    w: Mat::zeros(2 * g, n),
                    b: Mat::zeros(1, n),
                })
                .collect(),
        }
    }
}

/// One hidden affine of a merge-head MLP.
#[derive(Clone, Debug)]
pub struct HiddenP<V> {
    pub w: V,
    pub b: V,
}

/// Per-band MLP of one source's band-merge head: normalization over N, a
/// stack of hidden affines with tanh (width `hidden`, first mapping from N),
/// and an output affine feeding a GLU that halves `4G -> 2G` interleaved
/// (re, im) values per audio channel.
#[derive(Clone, Debug)]
pub struct MergeHeadBandP<V> {
    pub norm_gain: V, // [1, N]
    pub norm_bias: V, // [1, N]
    pub hidden: Vec<HiddenP<V>>,
    pub out_w: V, // [hidden, 4*G]
    pub out_b: V, // [1, 4*G]
}

#[derive(Clone, Debug)]
pub struct MergeHeadP<V> {
    pub bands: Vec<MergeHeadBandP<V>>,
}

pub type MergeHeadParams<T> = MergeHeadP<Mat<T>>;

impl<V> MergeHeadP<V> {
    pub fn map<U>(&self, f: &mut impl FnMut(&V) -> U) -> MergeHeadP<U> {
        MergeHeadP {
            bands: self
                .bands
                .iter()
                .map(|b| MergeHeadBandP {
                    norm_gain: f(&b.norm_gain),
                    norm_bias: f(&b.norm_bias),
                    hidden: b
                        .hidden
                        .iter()
                        .map(|h| HiddenP {
                            w: f(&h.w),
                            b: f(&h.b),
                        })
                        .collect(),
                    out_w: f(&b.out_w),
                    out_b: f(&b.out_b),
                })
                .collect(),
        }
    }

    pub fn for_each_named<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a V)) {
        for (i, b) in self.bands.iter().enumerate() {
            f(format!("{prefix}.band{i:02}.norm_gain"), &b.norm_gain);
            f(format!("{prefix}.band{i:02}.norm_bias"), &b.norm_bias);
            for (j, h) in b.hidden.iter().enumerate() {
                f(format!("{prefix}.band{i:02}.hid{j}_w"), &h.w);
                f(format!("{prefix}.band{i:02}.hid{j}_b"), &h.b);
            }
            f(format!("{prefix}.band{i:02}.out_w"), &b.out_w);
            f(format!("{prefix}.band{i:02}.out_b"), &b.out_b);
        }
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(&mut V)) {
        for b in self.bands.iter_mut() {
            f(&mut b.norm_gain);
            f(&mut b.norm_bias);
            for h in b.hidden.iter_mut() {
                f(&mut h.w);
                f(&mut h.b);
            }
            f(&mut b.out_w);
            f(&mut b.out_b);
        }
    }
}

impl<T: Scalar> MergeHeadParams<T> {
    pub fn init(
        scheme: &BandScheme,
        n: usize,
        hidden: usize,
        hidden_layers: usize,
        rng: &mut SeededRng,
    ) -> Self {
        MergeHeadP {
            bands: scheme
                .widths()
                .iter()
                .map(|&g| MergeHeadBandP {
                    norm_gain: Mat::from_fn(1, n, |_, _| T::one()),
                    norm_bias: Mat::zeros(1, n),
                    hidden: (0..hidden_layers)
                        .map(|j| {
                            let fan_in = if j == 0 { n } else { hidden };
                            HiddenP {
                                w: rng::fan_in_mat(rng, fan_in, fan_in, hidden),
                                b: Mat::zeros(1, hidden),
                            }
                        })
                        .collect(),
                    out_w: rng::fan_in_mat(rng, hidden, hidden, 4 * g),
                    out_b: Mat::zeros(1, 4 * g),
                })
                .collect(),
        }
    }

    pub fn zeros(scheme: &BandScheme, n: usize, hidden: usize, hidden_layers: usize) -> Self {
        MergeHeadP {
            bands: scheme
                .widths()
                .iter()
                .map(|&g| MergeHeadBandP {
                    norm_gain: Mat::zeros(1, n),
                    norm_bias: Mat::zeros(1, n),
                    hidden: (0..hidden_layers)
                        .map(|j| {
                            let fan_in = if j == 0 { n } else { hidden };
                            HiddenP {
                                w: Mat::zeros(fan_in, hidden),
                                b: Mat::zeros(1, hidden),
                            }
                        })
                        .collect(),
                    out_w: Mat::zeros(hidden, 4 * g),
                    out_b: Mat::zeros(1, 4 * g),
                })
                .collect(),
        }
    }

    /// Head that outputs the constant complex value `re + im*i` at every bin:
    /// all weights zero, value-branch biases set to twice the target (the GLU
    /// gate sits at sigmoid(0) = 1/2 exactly).
    pub fn constant_output(
        scheme: &BandScheme,
        n: usize,
        hidden: usize,
        hidden_layers: usize,
        re: f64,
        im: f64,
    ) -> Self {
        let mut p = Self::zeros(scheme, n, hidden, hidden_layers);
        for (band, &g) in p.bands.iter_mut().zip(scheme.widths()) {
            for j in 0..g {
                band.out_b.set(0, 2 * j, T::of(2.0 * re));
                band.out_b.set(0, 2 * j + 1, T::of(2.0 * im));
            }
        }
        p
    }
}

// ---------------------------------------------------------------------------
// forward, plain path
// ---------------------------------------------------------------------------

/// Per-band input matrix `[2T, 2G]` (rows (channel, frame), interleaved
/// re/im), sliced out of the spectrogram planes.
fn band_input<T: Scalar>(spec: &ComplexSpectrogram<T>, start: usize, width: usize) -> Mat<T> {
    let t = spec.frames();
    let mut m = Mat::zeros(CHANNELS * t, 2 * width);
    for c in 0..CHANNELS {
        for frame in 0..t {
            let src = spec.row_index(c, frame);
            let re = spec.re().row(src);
            let im = spec.im().row(src);
            let dst = m.row_mut(c * t + frame);
            for j in 0..width {
                dst[2 * j] = re[start + j];
                dst[2 * j + 1] = im[start + j];
            }
        }
    }
    m
}

/// Band-split encoder: normalize and project each sub-band to N features.
pub fn band_split<T: Scalar>(
    spec: &ComplexSpectrogram<T>,
    scheme: &BandScheme,
    params: &BandSplitParams<T>,
) -> Result<Feature<T>> {
    scheme.check_covers(spec.bins())?;
    if params.bands.len() != scheme.k() {
        return Err(Error::shape(
            "band_split",
            format!("{} parameter bands vs scheme K={}", params.bands.len(), scheme.k()),
        ));
    }
    let t = spec.frames();
    let n = params.bands[0].w.cols();
    let starts = scheme.starts();

    // Per-band projections, rows (channel, frame).
    let mut per_band: Vec<Mat<T>> = Vec::with_capacity(scheme.k());
    for (band, p) in params.bands.iter().enumerate() {
        let input = band_input(spec, starts[band], scheme.widths()[band]);
        let normed = k::group_norm(&input, &p.norm_gain, &p.norm_bias, T::of(NORM_EPS));
        per_band.push(k::linear(&normed, &p.w, Some(&p.b)));
    }

    // Reassemble into (channel, band, frame) row order.
    let mut pieces: Vec<Mat<T>> = Vec::with_capacity(CHANNELS * scheme.k());
    for c in 0..CHANNELS {
        for z in &per_band {
            pieces.push(k::slice_rows(z, c * t, t));
        }
    }
    let refs: Vec<&Mat<T>> = pieces.iter().collect();
    Feature::new(n, scheme.k(), t, k::concat_rows(&refs))
}

/// One source's band-merge head: feature tensor to a full-band complex plane
/// pair (`[2T, F]` each, rows (channel, frame)).
pub fn band_merge_head<T: Scalar>(
    q: &Feature<T>,
    scheme: &BandScheme,
    params: &MergeHeadParams<T>,
) -> Result<(Mat<T>, Mat<T>)> {
    if params.bands.len() != scheme.k() || q.k != scheme.k() {
        return Err(Error::shape(
            "band_merge_head",
            format!("K mismatch: params {}, feature {}, scheme {}", params.bands.len(), q.k, scheme.k()),
        ));
    }
    if params.bands[0].norm_gain.cols() != q.n {
        return Err(Error::shape(
            "band_merge_head",
            format!("feature dim {} vs params {}", q.n, params.bands[0].norm_gain.cols()),
        ));
    }
    let t = q.t;
    let mut res: Vec<Mat<T>> = Vec::with_capacity(scheme.k());
    let mut ims: Vec<Mat<T>> = Vec::with_capacity(scheme.k());
    for (band, p) in params.bands.iter().enumerate() {
        let g = scheme.widths()[band];
        let c0 = k::slice_rows(&q.mat, q.row_index(0, band, 0), t);
        let c1 = k::slice_rows(&q.mat, q.row_index(1, band, 0), t);
        let qk = k::concat_rows(&[&c0, &c1]); // [2T, N]
        let mut cur = k::group_norm(&qk, &p.norm_gain, &p.norm_bias, T::of(NORM_EPS));
        for h in &p.hidden {
            cur = k::tanh_m(&k::linear(&cur, &h.w, Some(&h.b)));
        }
        let out = k::linear(&cur, &p.out_w, Some(&p.out_b)); // [2T, 4G]
        let value = k::slice_cols(&out, 0, 2 * g);
        let gate = k::sigmoid_m(&k::slice_cols(&out, 2 * g, 2 * g));
        let mut glu = value;
        for (v, &s) in glu.data_mut().iter_mut().zip(gate.data()) {
            *v *= s;
        }
        res.push(k::deinterleave_cols(&glu, 0));
        ims.push(k::deinterleave_cols(&glu, 1));
    }
    let re_refs: Vec<&Mat<T>> = res.iter().collect();
    let im_refs: Vec<&Mat<T>> = ims.iter().collect();
    Ok((k::concat_cols(&re_refs), k::concat_cols(&im_refs)))
}

/// Wraps merge-head planes into a spectrogram (rows (channel, frame) match
/// the spectrogram layout directly).
pub fn planes_to_spec<T: Scalar>(
    cfg: StftConfig,
    frames: usize,
    re: Mat<T>,
    im: Mat<T>,
) -> Result<ComplexSpectrogram<T>> {
    ComplexSpectrogram::from_planes(cfg, frames, re, im)
}

// ---------------------------------------------------------------------------
// forward, graph path
// ---------------------------------------------------------------------------

/// Graph twin of [`band_split`]. Consumes full-band plane nodes (`[2T, F]`
/// each, rows (channel, frame)) so the stage-2 split can read graph-computed
/// spectra as well as constants.
pub fn band_split_g<T: Scalar>(
    g: &mut Graph<T>,
    re: Var,
    im: Var,
    frames: usize,
    scheme: &BandScheme,
    params: &BandSplitP<Var>,
) -> Result<FeatureVar> {
    scheme.check_covers(g.value(re).cols())?;
    let t = frames;
    let n = g.value(params.bands[0].w).cols();
    let starts = scheme.starts();

    let mut per_band: Vec<Var> = Vec::with_capacity(scheme.k());
    for (band, p) in params.bands.iter().enumerate() {
        let width = scheme.widths()[band];
        let re_k = g.slice_cols(re, starts[band], width);
        let im_k = g.slice_cols(im, starts[band], width);
        let input = g.interleave_cols(re_k, im_k);
        let normed = g.group_norm(input, p.norm_gain, p.norm_bias, T::of(NORM_EPS));
        per_band.push(g.linear(normed, p.w, Some(p.b)));
    }

    let mut pieces: Vec<Var> = Vec::with_capacity(CHANNELS * scheme.k());
    for c in 0..CHANNELS {
        for &z in &per_band {
            pieces.push(g.slice_rows(z, c * t, t));
        }
    }
    let var = g.concat_rows(&pieces);
    Ok(FeatureVar { n, k: scheme.k(), t, var })
}

pub fn band_merge_head_g<T: Scalar>(
    g: &mut Graph<T>,
    q: &FeatureVar,
    scheme: &BandScheme,
    params: &MergeHeadP<Var>,
) -> Result<(Var, Var)> {
    let t = q.t;
    let kk = scheme.k();
    let mut res: Vec<Var> = Vec::with_capacity(kk);
    let mut ims: Vec<Var> = Vec::with_capacity(kk);
    for (band, p) in params.bands.iter().enumerate() {
        let gw = scheme.widths()[band];
        let c0 = g.slice_rows(q.var, band * t, t);
        let c1 = g.slice_rows(q.var, (kk + band) * t, t);
        let qk = g.concat_rows(&[c0, c1]);
        let mut cur = g.group_norm(qk, p.norm_gain, p.norm_bias, T::of(NORM_EPS));
        for h in &p.hidden {
            let pre = g.linear(cur, h.w, Some(h.b));
            cur = g.tanh(pre);
        }
        let out = g.linear(cur, p.out_w, Some(p.out_b));
        let value = g.slice_cols(out, 0, 2 * gw);
        let gate_pre = g.slice_cols(out, 2 * gw, 2 * gw);
        let gate = g.sigmoid(gate_pre);
        let glu = g.mul(value, gate);
        res.push(g.deinterleave_cols(glu, 0));
        ims.push(g.deinterleave_cols(glu, 1));
    }
    Ok((g.concat_cols(&res), g.concat_cols(&ims)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::spectral::stft;
    use rand::Rng;

    fn small_cfg() -> StftConfig {
        StftConfig {
            n_fft: 64,
            hop: 16,
            sample_rate: 8000,
            ..Default::default()
        }
    }

    fn random_spec(seed: u64) -> ComplexSpectrogram<f64> {
        let mut r = seeded(seed);
        let cfg = small_cfg();
        let wave = [
            (0..512).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<f64>>(),
            (0..512).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<f64>>(),
        ];
        stft(&wave, &cfg).unwrap()
    }

    #[test]
    fn default_scheme_properties() {
        let s = default_band_scheme(1025).unwrap();
        assert_eq!(s.k(), 57);
        assert_eq!(s.total_bins(), 1025);
        // Widths monotonically non-decreasing with frequency.
        for w in s.widths().windows(2) {
            assert!(w[1] >= w[0], "widths not monotone: {:?}", w);
        }
        // Start offsets are exclusive prefix sums.
        let starts = s.starts();
        assert_eq!(starts[0], 0);
        for i in 1..s.k() {
            assert_eq!(starts[i], starts[i - 1] + s.widths()[i - 1]);
        }
    }

    #[test]
    fn degenerate_and_error_cases() {
        let s = default_band_scheme(57).unwrap();
        assert_eq!(s.k(), 57);
        assert!(s.widths().iter().all(|&w| w == 1));
        assert!(default_band_scheme(56).is_err());
        // Custom scheme for arbitrary F keeps coverage.
        let s = default_band_scheme(129).unwrap();
        assert_eq!(s.total_bins(), 129);
    }

    #[test]
    fn band_split_shape_contract_full_size() {
        let cfg = StftConfig::default();
        let spec = ComplexSpectrogram::<f64>::zeros(cfg, 87);
        let scheme = default_band_scheme(1025).unwrap();
        let params = BandSplitParams::<f64>::init(&scheme, 128, &mut seeded(0));
        let z = band_split(&spec, &scheme, &params).unwrap();
        assert_eq!((z.n, z.k, z.t), (128, 57, 87));
        assert_eq!(z.mat.shape(), (2 * 57 * 87, 128));
    }

    #[test]
    fn band_split_zero_params_give_zero_and_scheme_mismatch_errors() {
        let spec = random_spec(1);
        let scheme = uniform_scheme(spec.bins(), 4).unwrap();
        let zero = BandSplitParams::<f64>::zeros(&scheme, 8);
        let z = band_split(&spec, &scheme, &zero).unwrap();
        assert_eq!(z.mat.max_abs(), 0.0);

        let wrong = uniform_scheme(spec.bins() - 1, 4).unwrap();
        let p = BandSplitParams::<f64>::init(&wrong, 8, &mut seeded(2));
        assert!(band_split(&spec, &wrong, &p).is_err());
    }

    #[test]
    fn band_split_is_invariant_to_positive_scaling() {
        let spec = random_spec(3);
        let scheme = uniform_scheme(spec.bins(), 3).unwrap();
        let params = BandSplitParams::<f64>::init(&scheme, 6, &mut seeded(4));
        let z1 = band_split(&spec, &scheme, &params).unwrap();

        let mut scaled = spec.clone();
        scaled.scale(37.5);
        let z2 = band_split(&scaled, &scheme, &params).unwrap();
        // Invariance is exact up to the normalization epsilon's influence on
        // rows with small variance.
        assert!(z1.mat.max_abs_diff(&z2.mat) < 1e-4 * z1.mat.max_abs().max(1.0));
    }

    #[test]
    fn band_split_has_no_cross_band_leakage() {
        let spec = random_spec(5);
        let scheme = uniform_scheme(spec.bins(), 3).unwrap();
        let params = BandSplitParams::<f64>::init(&scheme, 6, &mut seeded(6));
        let z = band_split(&spec, &scheme, &params).unwrap();

        // Direct per-band computation of band 1 alone.
        let starts = scheme.starts();
        let input = band_input(&spec, starts[1], scheme.widths()[1]);
        let p = &params.bands[1];
        let normed = k::group_norm(&input, &p.norm_gain, &p.norm_bias, 1e-5);
        let direct = k::linear(&normed, &p.w, Some(&p.b));
        for c in 0..2 {
            for frame in 0..z.t {
                assert_eq!(
                    z.mat.row(z.row_index(c, 1, frame)),
                    direct.row(c * z.t + frame)
                );
            }
        }
    }

    #[test]
    fn merge_head_shape_and_zero_map() {
        let spec = random_spec(7);
        let scheme = uniform_scheme(spec.bins(), 3).unwrap();
        let split = BandSplitParams::<f64>::init(&scheme, 6, &mut seeded(8));
        let z = band_split(&spec, &scheme, &split).unwrap();

        let heads = MergeHeadParams::<f64>::init(&scheme, 6, 6, 2, &mut seeded(9));
        let (re, im) = band_merge_head(&z, &scheme, &heads).unwrap();
        assert_eq!(re.shape(), (2 * z.t, spec.bins()));
        assert_eq!(im.shape(), re.shape());

        let zeroed = MergeHeadParams::<f64>::zeros(&scheme, 6, 6, 2);
        let (re0, im0) = band_merge_head(&z, &scheme, &zeroed).unwrap();
        assert_eq!(re0.max_abs(), 0.0);
        assert_eq!(im0.max_abs(), 0.0);
    }

    #[test]
    fn glu_unit_check_and_constant_head() {
        // Pre-split pair (1, 0) -> 1 * sigmoid(0) = 0.5.
        let spec = random_spec(10);
        let scheme = uniform_scheme(spec.bins(), 2).unwrap();
        let split = BandSplitParams::<f64>::init(&scheme, 4, &mut seeded(11));
        let z = band_split(&spec, &scheme, &split).unwrap();

        let mut head = MergeHeadParams::<f64>::zeros(&scheme, 4, 4, 2);
        for (band, &g) in head.bands.iter_mut().zip(scheme.widths()) {
            for j in 0..2 * g {
                band.out_b.set(0, j, 1.0); // value half = 1; gate half stays 0
            }
        }
        let (re, im) = band_merge_head(&z, &scheme, &head).unwrap();
        for v in re.data().iter().chain(im.data()) {
            assert!((v - 0.5).abs() < 1e-12);
        }

        // constant_output(1, 0) produces exactly the unit mask.
        let one = MergeHeadParams::<f64>::constant_output(&scheme, 4, 4, 2, 1.0, 0.0);
        let (re1, im1) = band_merge_head(&z, &scheme, &one).unwrap();
        assert!(re1.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert_eq!(im1.max_abs(), 0.0);
    }

    #[test]
    fn glu_gate_bounds_magnitude() {
        // |GLU output| <= |value branch| elementwise.
        let spec = random_spec(12);
        let scheme = uniform_scheme(spec.bins(), 2).unwrap();
        let split = BandSplitParams::<f64>::init(&scheme, 4, &mut seeded(13));
        let z = band_split(&spec, &scheme, &split).unwrap();
        let head = MergeHeadParams::<f64>::init(&scheme, 4, 4, 2, &mut seeded(14));

        // Recompute one band's value branch directly and compare.
        let p = &head.bands[0];
        let g0 = scheme.widths()[0];
        let c0 = k::slice_rows(&z.mat, z.row_index(0, 0, 0), z.t);
        let c1 = k::slice_rows(&z.mat, z.row_index(1, 0, 0), z.t);
        let qk = k::concat_rows(&[&c0, &c1]);
        let mut cur = k::group_norm(&qk, &p.norm_gain, &p.norm_bias, 1e-5);
        for h in &p.hidden {
            cur = k::tanh_m(&k::linear(&cur, &h.w, Some(&h.b)));
        }
        let out = k::linear(&cur, &p.out_w, Some(&p.out_b));
        let value = k::slice_cols(&out, 0, 2 * g0);

        let (re, im) = band_merge_head(&z, &scheme, &head).unwrap();
        for r in 0..2 * z.t {
            for j in 0..g0 {
                let glu_re = re.at(r, j);
                let glu_im = im.at(r, j);
                assert!(glu_re.abs() <= value.at(r, 2 * j).abs() + 1e-12);
                assert!(glu_im.abs() <= value.at(r, 2 * j + 1).abs() + 1e-12);
            }
        }
    }

    #[test]
    fn graph_path_matches_plain_path() {
        let spec = random_spec(15);
        let scheme = uniform_scheme(spec.bins(), 3).unwrap();
        let split = BandSplitParams::<f64>::init(&scheme, 6, &mut seeded(16));
        let head = MergeHeadParams::<f64>::init(&scheme, 6, 6, 2, &mut seeded(17));

        let z = band_split(&spec, &scheme, &split).unwrap();
        let (re, im) = band_merge_head(&z, &scheme, &head).unwrap();

        let mut g = Graph::new();
        let split_v = split.map(&mut |m: &Mat<f64>| g.param(m.clone()));
        let head_v = head.map(&mut |m: &Mat<f64>| g.param(m.clone()));
        let xre = g.constant(spec.re().clone());
        let xim = g.constant(spec.im().clone());
        let zv = band_split_g(&mut g, xre, xim, spec.frames(), &scheme, &split_v).unwrap();
        let (rev, imv) = band_merge_head_g(&mut g, &zv, &scheme, &head_v).unwrap();
        assert_eq!(g.value(zv.var), &z.mat);
        assert_eq!(g.value(rev), &re);
        assert_eq!(g.value(imv), &im);
    }
}
