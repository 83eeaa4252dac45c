//! The full two-stage model: stage-1 complex masking, fusion, stage-2
//! residual mapping, plus parameter containers, serialization, and
//! parameter/MAC accounting.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::bands::{
    band_merge_head, band_merge_head_g, band_split, band_split_g, BandSplitP, BandSplitParams,
    MergeHeadP, MergeHeadParams,
};
use crate::config::{ModelConfig, Stage2Input};
use crate::dualnet::{
    dualnet_forward, dualnet_forward_g, fusion, fusion_g, DualLayerP, DualLayerParams, FusionP,
    FusionParams,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mat::Mat;
use crate::rng::{self, SeededRng};
use crate::scalar::Scalar;
use crate::spectral::{istft, stft, ComplexSpectrogram, CHANNELS};

/// Published reference accounting (Table-2 scale): parameters in millions and
/// MACs in G per second of dual-channel audio.
pub const REF_PARAMS_FULL_M: f64 = 35.52;
pub const REF_PARAMS_LIGHT_M: f64 = 27.71;
pub const REF_MACS_FULL_G: f64 = 212.11;
pub const REF_MACS_LIGHT_G: f64 = 107.95;
pub const REF_PARAMS_FULL_STAGE1_M: f64 = 20.34;
pub const REF_MACS_FULL_STAGE1_G: f64 = 140.61;

// ---------------------------------------------------------------------------
// parameters
// ---------------------------------------------------------------------------

/// One stage's learnables: band split, dual-path layers, per-source heads.
#[derive(Clone, Debug)]
pub struct StageP<V> {
    pub split: BandSplitP<V>,
    pub layers: Vec<DualLayerP<V>>,
    pub heads: Vec<MergeHeadP<V>>,
}

impl<V> StageP<V> {
    pub fn map<U>(&self, f: &mut impl FnMut(&V) -> U) -> StageP<U> {
        StageP {
            split: self.split.map(f),
            layers: self.layers.iter().map(|l| l.map(f)).collect(),
            heads: self.heads.iter().map(|h| h.map(f)).collect(),
        }
    }

    pub fn for_each_named<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a V)) {
        self.split.for_each_named(&format!("{prefix}.split"), f);
        for (i, l) in self.layers.iter().enumerate() {
            l.for_each_named(&format!("{prefix}.layer{i}"), f);
        }
        for (i, h) in self.heads.iter().enumerate() {
            h.for_each_named(&format!("{prefix}.head{i}"), f);
        }
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(&mut V)) {
        self.split.for_each_mut(f);
        for l in self.layers.iter_mut() {
            l.for_each_mut(f);
        }
        for h in self.heads.iter_mut() {
            h.for_each_mut(f);
        }
    }
}

/// All learnable weights of the two-stage model.
#[derive(Clone, Debug)]
pub struct ModelP<V> {
    pub stage1: StageP<V>,
    pub fusion: FusionP<V>,
    pub stage2: StageP<V>,
}

pub type ModelParams<T> = ModelP<Mat<T>>;
pub type ModelVars = ModelP<Var>;

impl<V> ModelP<V> {
    pub fn map<U>(&self, f: &mut impl FnMut(&V) -> U) -> ModelP<U> {
        ModelP {
            stage1: self.stage1.map(f),
            fusion: self.fusion.map(f),
            stage2: self.stage2.map(f),
        }
    }

    /// Canonical parameter walk; the visit order defines the flat layout used
    /// by the optimizer, serialization, and gradient packing.
    pub fn for_each_named<'a>(&'a self, f: &mut impl FnMut(String, &'a V)) {
        self.stage1.for_each_named("stage1", f);
        self.fusion.for_each_named("fusion", f);
        self.stage2.for_each_named("stage2", f);
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(&mut V)) {
        self.stage1.for_each_mut(f);
        self.fusion.for_each_mut(f);
        self.stage2.for_each_mut(f);
    }

    pub fn flatten(&self) -> Vec<&V> {
        let mut out = Vec::new();
        self.for_each_named(&mut |_, v| out.push(v));
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.for_each_named(&mut |n, _| out.push(n));
        out
    }
}

impl<T: Scalar> ModelParams<T> {
    fn stage(cfg: &ModelConfig, layers: usize, rng: &mut SeededRng) -> Result<StageP<Mat<T>>> {
        let scheme = cfg.scheme()?;
        let dims = cfg.ssd_dims();
        Ok(StageP {
            split: BandSplitParams::init(&scheme, cfg.n, rng),
            layers: (0..layers).map(|_| DualLayerParams::init(&dims, rng)).collect(),
            heads: (0..cfg.n_sources)
                .map(|_| {
                    MergeHeadParams::init(&scheme, cfg.n, cfg.merge_hidden, cfg.merge_hidden_layers, rng)
                })
                .collect(),
        })
    }

    /// Seeded random initialization.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::seeded(seed);
        Ok(ModelP {
            stage1: Self::stage(cfg, cfg.layers_stage1, &mut rng)?,
            fusion: FusionParams::init(cfg.n, &mut rng),
            stage2: Self::stage(cfg, cfg.layers_stage2, &mut rng)?,
        })
    }

    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let scheme = cfg.scheme()?;
        let dims = cfg.ssd_dims();
        let stage = |layers: usize| StageP {
            split: BandSplitParams::zeros(&scheme, cfg.n),
            layers: (0..layers).map(|_| DualLayerParams::zeros(&dims)).collect(),
            heads: (0..cfg.n_sources)
                .map(|_| MergeHeadParams::zeros(&scheme, cfg.n, cfg.merge_hidden, cfg.merge_hidden_layers))
                .collect(),
        };
        Ok(ModelP {
            stage1: stage(cfg.layers_stage1),
            fusion: FusionParams::zeros(cfg.n),
            stage2: stage(cfg.layers_stage2),
        })
    }

    /// Forces the identity configuration onto existing parameters: every
    /// stage-1 head outputs the constant mask `1 + 0i`, every stage-2 head
    /// outputs `0`, so both stages reproduce the input for every source.
    pub fn force_identity(&mut self, cfg: &ModelConfig) -> Result<()> {
        let scheme = cfg.scheme()?;
        for head in self.stage1.heads.iter_mut() {
            *head = MergeHeadParams::constant_output(
                &scheme,
                cfg.n,
                cfg.merge_hidden,
                cfg.merge_hidden_layers,
                1.0,
                0.0,
            );
        }
        for head in self.stage2.heads.iter_mut() {
            *head =
                MergeHeadParams::zeros(&scheme, cfg.n, cfg.merge_hidden, cfg.merge_hidden_layers);
        }
        Ok(())
    }

    /// All-zero model with the identity head configuration applied.
    pub fn identity(cfg: &ModelConfig) -> Result<Self> {
        let mut p = Self::zeros(cfg)?;
        p.force_identity(cfg)?;
        Ok(p)
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.for_each_named(&mut |_, m: &Mat<T>| ok &= m.is_finite());
        ok
    }

    /// Total scalar count by walking the allocated tensors (the serialization
    /// oracle for the closed-form [`count_params`]).
    pub fn count_scalars(&self) -> u64 {
        let mut n = 0u64;
        self.for_each_named(&mut |_, m: &Mat<T>| n += m.len() as u64);
        n
    }
}

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

/// Per-source stage outputs in the spectrogram domain.
#[derive(Clone, Debug)]
pub struct SeparationSpecs<T> {
    pub stage1: Vec<ComplexSpectrogram<T>>,
    pub stage2: Vec<ComplexSpectrogram<T>>,
}

/// Full separation output: spectrograms plus reconstructed waveforms.
#[derive(Clone, Debug)]
pub struct SeparationResult<T> {
    pub stage1_specs: Vec<ComplexSpectrogram<T>>,
    pub stage2_specs: Vec<ComplexSpectrogram<T>>,
    pub stage1_waves: Vec<[Vec<T>; CHANNELS]>,
    pub stage2_waves: Vec<[Vec<T>; CHANNELS]>,
}

/// Two-stage forward pass in the spectrogram domain.
pub fn forward<T: Scalar>(
    spec: &ComplexSpectrogram<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
) -> Result<SeparationSpecs<T>> {
    let scheme = cfg.scheme()?;
    scheme.check_covers(spec.bins())?;
    let dims = cfg.ssd_dims();
    let mode = cfg.discretization;
    let frames = spec.frames();

    // Stage 1: complex masks on the mixture.
    let z1 = band_split(spec, &scheme, &params.stage1.split)
        .map_err(|e| stage_err(1, "band_split", e))?;
    let d1 = dualnet_forward(&z1, &params.stage1.layers, &dims, mode, "stage1")?;
    let mut stage1 = Vec::with_capacity(cfg.n_sources);
    for (i, head) in params.stage1.heads.iter().enumerate() {
        let (re, im) = band_merge_head(&d1, &scheme, head)
            .map_err(|e| stage_err(1, &format!("head{i}"), e))?;
        let mask = ComplexSpectrogram::from_planes(cfg.stft, frames, re, im)?;
        stage1.push(mask.complex_mul(spec)?);
    }

    // Stage 2: residual mappings from the fused features.
    let stage2_in = match cfg.stage2_input {
        Stage2Input::Mixture => spec.clone(),
        Stage2Input::Stage1Sum => {
            let mut acc = stage1[0].clone();
            for s in stage1.iter().skip(1) {
                acc = acc.add(s)?;
            }
            acc
        }
    };
    let z2 = band_split(&stage2_in, &scheme, &params.stage2.split)
        .map_err(|e| stage_err(2, "band_split", e))?;
    let dbar = fusion(&d1, &z2, &params.fusion)?;
    let q2 = dualnet_forward(&dbar, &params.stage2.layers, &dims, mode, "stage2")?;
    let mut stage2 = Vec::with_capacity(cfg.n_sources);
    for (i, head) in params.stage2.heads.iter().enumerate() {
        let (re, im) = band_merge_head(&q2, &scheme, head)
            .map_err(|e| stage_err(2, &format!("head{i}"), e))?;
        let residual = ComplexSpectrogram::from_planes(cfg.stft, frames, re, im)?;
        stage2.push(stage1[i].add(&residual)?);
    }

    Ok(SeparationSpecs { stage1, stage2 })
}

fn stage_err(stage: usize, what: &str, e: Error) -> Error {
    Error::shape(format!("model.forward stage{stage}.{what}"), e.to_string())
}

/// Waveform-to-waveform separation: STFT, two-stage forward, ISTFT per source
/// per stage, trimmed to the input length.
pub fn separate<T: Scalar>(
    wave: &[Vec<T>; CHANNELS],
    params: &ModelParams<T>,
    cfg: &ModelConfig,
) -> Result<SeparationResult<T>> {
    let len = wave[0].len();
    if len < cfg.stft.n_fft {
        return Err(Error::Audio(format!(
            "separate needs at least n_fft = {} samples, got {len}",
            cfg.stft.n_fft
        )));
    }
    let spec = stft(wave, &cfg.stft)?;
    let specs = forward(&spec, params, cfg)?;
    let mut stage1_waves = Vec::with_capacity(cfg.n_sources);
    let mut stage2_waves = Vec::with_capacity(cfg.n_sources);
    for s in &specs.stage1 {
        stage1_waves.push(istft(s, len)?);
    }
    for s in &specs.stage2 {
        stage2_waves.push(istft(s, len)?);
    }
    Ok(SeparationResult {
        stage1_specs: specs.stage1,
        stage2_specs: specs.stage2,
        stage1_waves,
        stage2_waves,
    })
}

// ---------------------------------------------------------------------------
// forward, graph path
// ---------------------------------------------------------------------------

/// Graph handles of one complex plane pair (`[2T, F]` each).
#[derive(Clone, Copy, Debug)]
pub struct SpecPair {
    pub re: Var,
    pub im: Var,
}

/// Per-source stage outputs as graph nodes.
pub struct ForwardVars {
    pub stage1: Vec<SpecPair>,
    pub stage2: Vec<SpecPair>,
}

/// Graph twin of [`forward`], used by training. Composes the identical kernel
/// sequence, so values agree bit-for-bit with the plain path.
pub fn forward_g<T: Scalar>(
    g: &mut Graph<T>,
    spec: &ComplexSpectrogram<T>,
    vars: &ModelVars,
    cfg: &ModelConfig,
) -> Result<ForwardVars> {
    let scheme = cfg.scheme()?;
    scheme.check_covers(spec.bins())?;
    let dims = cfg.ssd_dims();
    let mode = cfg.discretization;
    let frames = spec.frames();

    let xre = g.constant(spec.re().clone());
    let xim = g.constant(spec.im().clone());

    let z1 = band_split_g(g, xre, xim, frames, &scheme, &vars.stage1.split)?;
    let d1 = dualnet_forward_g(g, &z1, &vars.stage1.layers, &dims, mode, "stage1")?;
    let mut stage1 = Vec::with_capacity(cfg.n_sources);
    for head in &vars.stage1.heads {
        let (mre, mim) = band_merge_head_g(g, &d1, &scheme, head)?;
        // (mre + i mim) * (xre + i xim)
        let ac = g.mul(mre, xre);
        let bd = g.mul(mim, xim);
        let sre = g.sub(ac, bd);
        let ad = g.mul(mre, xim);
        let bc = g.mul(mim, xre);
        let sim = g.add(ad, bc);
        stage1.push(SpecPair { re: sre, im: sim });
    }

    let (in2_re, in2_im) = match cfg.stage2_input {
        Stage2Input::Mixture => (xre, xim),
        Stage2Input::Stage1Sum => {
            let mut re = stage1[0].re;
            let mut im = stage1[0].im;
            for s in stage1.iter().skip(1) {
                re = g.add(re, s.re);
                im = g.add(im, s.im);
            }
            (re, im)
        }
    };
    let z2 = band_split_g(g, in2_re, in2_im, frames, &scheme, &vars.stage2.split)?;
    let dbar = fusion_g(g, &d1, &z2, &vars.fusion)?;
    let q2 = dualnet_forward_g(g, &dbar, &vars.stage2.layers, &dims, mode, "stage2")?;
    let mut stage2 = Vec::with_capacity(cfg.n_sources);
    for (i, head) in vars.stage2.heads.iter().enumerate() {
        let (rre, rim) = band_merge_head_g(g, &q2, &scheme, head)?;
        let sre = g.add(stage1[i].re, rre);
        let sim = g.add(stage1[i].im, rim);
        stage2.push(SpecPair { re: sre, im: sim });
    }
    Ok(ForwardVars { stage1, stage2 })
}

// ---------------------------------------------------------------------------
// accounting
// ---------------------------------------------------------------------------

fn mamba2_param_count(cfg: &ModelConfig) -> u64 {
    let d = cfg.ssd_dims();
    let (dm, di, h) = (d.d_model as u64, d.d_inner() as u64, d.n_heads() as u64);
    let conv = d.conv_dim() as u64;
    dm * d.in_proj_out() as u64 + conv * d.d_conv as u64 + conv + 3 * h + di + di * dm
}

fn dual_layer_param_count(cfg: &ModelConfig) -> u64 {
    let n = cfg.n as u64;
    let residual = 2 * n + 2 * mamba2_param_count(cfg) + 2 * n * n + n;
    let tac = n * 3 * n + 3 * n + 1 + 3 * n * 3 * n + 3 * n + 1 + 6 * n * n + n + 1;
    2 * residual + tac
}

fn split_param_count(cfg: &ModelConfig) -> u64 {
    let n = cfg.n as u64;
    cfg.band_widths
        .iter()
        .map(|&g| {
            let g = g as u64;
            4 * g + 2 * g * n + n
        })
        .sum()
}

fn heads_param_count(cfg: &ModelConfig) -> u64 {
    let n = cfg.n as u64;
    let h = cfg.merge_hidden as u64;
    let deep = cfg.merge_hidden_layers as u64 - 1;
    let per_head: u64 = cfg
        .band_widths
        .iter()
        .map(|&g| {
            let g = g as u64;
            2 * n + (n * h + h) + deep * (h * h + h) + h * 4 * g + 4 * g
        })
        .sum();
    cfg.n_sources as u64 * per_head
}

/// Exact learnable-scalar count by closed-form summation over all parameter
/// groups (cross-checked against a serialization walk in tests).
pub fn count_params(cfg: &ModelConfig) -> u64 {
    let n = cfg.n as u64;
    let stage1 = split_param_count(cfg)
        + cfg.layers_stage1 as u64 * dual_layer_param_count(cfg)
        + heads_param_count(cfg);
    let stage2 = split_param_count(cfg)
        + cfg.layers_stage2 as u64 * dual_layer_param_count(cfg)
        + heads_param_count(cfg);
    stage1 + (2 * n * n + n) + stage2
}

/// Stage-1-only parameter count (the "first stage" rows of the accounting
/// table).
pub fn count_params_stage1(cfg: &ModelConfig) -> u64 {
    split_param_count(cfg) + cfg.layers_stage1 as u64 * dual_layer_param_count(cfg)
        + heads_param_count(cfg)
}

/// Analytic multiply-accumulate count for `seconds` of dual-channel audio.
/// Counts affine maps, convolutions, SSD scans (3·H·P·S per step), the merge
/// MLPs, and the stage-1 complex mask product; normalizations, activations
/// and the STFT/ISTFT transforms are excluded from the accounting.
pub fn estimate_macs(cfg: &ModelConfig, seconds: f64) -> f64 {
    let frames = (seconds * cfg.stft.sample_rate as f64 / cfg.stft.hop as f64).floor() + 1.0;
    macs_for_frames(cfg, frames, true) + macs_for_frames(cfg, frames, false)
}

/// Stage-1-only MACs for `seconds` of audio.
pub fn estimate_macs_stage1(cfg: &ModelConfig, seconds: f64) -> f64 {
    let frames = (seconds * cfg.stft.sample_rate as f64 / cfg.stft.hop as f64).floor() + 1.0;
    macs_for_frames(cfg, frames, true)
}

fn macs_for_frames(cfg: &ModelConfig, frames: f64, stage1: bool) -> f64 {
    let d = cfg.ssd_dims();
    let n = cfg.n as f64;
    let k = cfg.band_widths.len() as f64;
    let f_bins = cfg.stft.bins() as f64;
    let hid = cfg.merge_hidden as f64;
    let srcs = cfg.n_sources as f64;
    let rows = 2.0 * k * frames;

    let mamba2_row = (d.d_model * d.in_proj_out()) as f64
        + (d.conv_dim() * d.d_conv) as f64
        + 3.0 * (d.n_heads() * d.headdim * d.d_state) as f64
        + (d.d_inner() * d.d_model) as f64;
    let residual_row = 2.0 * mamba2_row + 2.0 * n * n;
    // TAC: per-channel and concat transforms per row, the average transform
    // once per (band, frame) pair, i.e. per two rows.
    let tac_row = n * 3.0 * n + 0.5 * (3.0 * n) * (3.0 * n) + 6.0 * n * n;
    let layer_row = 2.0 * residual_row + tac_row;

    let layers = if stage1 { cfg.layers_stage1 } else { cfg.layers_stage2 } as f64;
    let dual = layers * layer_row * rows;

    let split: f64 = cfg
        .band_widths
        .iter()
        .map(|&g| 2.0 * frames * (2.0 * g as f64 * n))
        .sum();
    let deep = (cfg.merge_hidden_layers - 1) as f64;
    let heads: f64 = srcs
        * cfg
            .band_widths
            .iter()
            .map(|&g| 2.0 * frames * (n * hid + deep * hid * hid + hid * 4.0 * g as f64))
            .sum::<f64>();
    let mask = if stage1 { srcs * 2.0 * frames * f_bins * 4.0 } else { 0.0 };
    let fusion = if stage1 { 0.0 } else { rows * 2.0 * n * n };

    dual + split + heads + mask + fusion
}

// ---------------------------------------------------------------------------
// binary container (parameters / checkpoints)
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"BSM2";
const VERSION: u32 = 1;

#[derive(serde::Serialize, serde::Deserialize)]
struct HeaderEntry {
    name: String,
    rows: usize,
    cols: usize,
    /// Element offset into the data section.
    offset: u64,
    len: usize,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Header {
    dtype: String,
    entries: Vec<HeaderEntry>,
    meta: serde_json::Value,
}

/// Writes named matrices as a single binary container: magic, version, JSON
/// header (names, shapes, dtype, offsets), then raw little-endian arrays.
pub fn write_container<T: Scalar>(
    path: impl AsRef<Path>,
    entries: &[(String, &Mat<T>)],
    meta: serde_json::Value,
) -> Result<()> {
    let mut header = Header {
        dtype: T::DTYPE.to_string(),
        entries: Vec::with_capacity(entries.len()),
        meta,
    };
    let mut offset = 0u64;
    for (name, mat) in entries {
        header.entries.push(HeaderEntry {
            name: name.clone(),
            rows: mat.rows(),
            cols: mat.cols(),
            offset,
            len: mat.len(),
        });
        offset += mat.len() as u64;
    }
    let header_json = serde_json::to_vec(&header).map_err(|e| Error::Serialize(e.to_string()))?;

    let mut out = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(header_json.len() as u64).to_le_bytes())?;
    out.write_all(&header_json)?;
    let mut buf = Vec::with_capacity(1 << 16);
    for (_, mat) in entries {
        buf.clear();
        for &v in mat.data() {
            v.write_le(&mut buf);
        }
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads only the metadata of a container (cheap header parse).
pub fn read_container_meta(path: impl AsRef<Path>) -> Result<serde_json::Value> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path.as_ref())?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Serialize("not a parameter container".into()));
    }
    let mut word = [0u8; 4];
    file.read_exact(&mut word)?;
    let mut len8 = [0u8; 8];
    file.read_exact(&mut len8)?;
    let header_len = u64::from_le_bytes(len8) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)?;
    let header: Header =
        serde_json::from_slice(&header_bytes).map_err(|e| Error::Serialize(e.to_string()))?;
    Ok(header.meta)
}

/// Reads a container written by [`write_container`]. Values saved at a
/// different precision are converted through `f64`.
pub fn read_container<T: Scalar>(
    path: impl AsRef<Path>,
) -> Result<(Vec<(String, Mat<T>)>, serde_json::Value)> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path.as_ref())?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Serialize("not a parameter container".into()));
    }
    let mut word = [0u8; 4];
    file.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::Serialize(format!("unsupported container version {version}")));
    }
    let mut len8 = [0u8; 8];
    file.read_exact(&mut len8)?;
    let header_len = u64::from_le_bytes(len8) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)?;
    let header: Header =
        serde_json::from_slice(&header_bytes).map_err(|e| Error::Serialize(e.to_string()))?;

    let mut data = Vec::new();
    file.read_to_end(&mut data)?;

    let read_mat = |entry: &HeaderEntry, width: usize, f: &dyn Fn(&[u8]) -> T| -> Result<Mat<T>> {
        let start = entry.offset as usize * width;
        let end = start + entry.len * width;
        if end > data.len() {
            return Err(Error::Serialize(format!("entry {} out of bounds", entry.name)));
        }
        let values: Vec<T> = data[start..end].chunks_exact(width).map(f).collect();
        Ok(Mat::from_vec(entry.rows, entry.cols, values))
    };

    let mut out = Vec::with_capacity(header.entries.len());
    for entry in &header.entries {
        let mat = match header.dtype.as_str() {
            d if d == T::DTYPE => read_mat(entry, T::BYTES, &|b| T::read_le(b))?,
            "f32" => read_mat(entry, 4, &|b| T::of(f32::read_le(b) as f64))?,
            "f64" => read_mat(entry, 8, &|b| T::of(f64::read_le(b)))?,
            other => return Err(Error::Serialize(format!("unknown dtype '{other}'"))),
        };
        out.push((entry.name.clone(), mat));
    }
    Ok((out, header.meta))
}

/// Saves model parameters (with optional extra metadata).
pub fn save_params<T: Scalar>(
    path: impl AsRef<Path>,
    params: &ModelParams<T>,
    meta: serde_json::Value,
) -> Result<()> {
    let mut entries: Vec<(String, &Mat<T>)> = Vec::new();
    params.for_each_named(&mut |name, mat| entries.push((name, mat)));
    write_container(path, &entries, meta)
}

/// Loads model parameters for `cfg`; every expected tensor must be present
/// with the right shape.
pub fn load_params<T: Scalar>(
    path: impl AsRef<Path>,
    cfg: &ModelConfig,
) -> Result<(ModelParams<T>, serde_json::Value)> {
    let (entries, meta) = read_container::<T>(path)?;
    let mut by_name: HashMap<String, Mat<T>> = entries.into_iter().collect();
    let mut params = ModelParams::<T>::zeros(cfg)?;
    let names = params.names();
    let mut iter = names.into_iter();
    let mut missing: Option<String> = None;
    params.for_each_mut(&mut |slot: &mut Mat<T>| {
        let name = iter.next().expect("name walk in sync");
        match by_name.remove(&name) {
            Some(mat) if mat.shape() == slot.shape() => *slot = mat,
            Some(mat) => {
                missing.get_or_insert(format!(
                    "{name}: shape {:?} in file, {:?} expected",
                    mat.shape(),
                    slot.shape()
                ));
            }
            None => {
                missing.get_or_insert(format!("{name}: missing from container"));
            }
        }
    });
    if let Some(m) = missing {
        return Err(Error::Serialize(format!("container does not match config: {m}")));
    }
    Ok((params, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::rng::seeded;
    use rand::Rng;

    fn toy_cfg() -> ModelConfig {
        ModelConfig::toy_grad()
    }

    fn random_wave(cfg: &ModelConfig, seconds: f64, seed: u64) -> [Vec<f64>; 2] {
        let len = (cfg.stft.sample_rate as f64 * seconds) as usize;
        let mut r = seeded(seed);
        [
            (0..len).map(|_| r.random_range(-0.5..0.5)).collect(),
            (0..len).map(|_| r.random_range(-0.5..0.5)).collect(),
        ]
    }

    #[test]
    fn forward_shape_contract() {
        let cfg = toy_cfg();
        let params = ModelParams::<f64>::init(&cfg, 1).unwrap();
        let wave = random_wave(&cfg, 0.3, 2);
        let spec = stft(&wave, &cfg.stft).unwrap();
        let out = forward(&spec, &params, &cfg).unwrap();
        assert_eq!(out.stage1.len(), cfg.n_sources);
        assert_eq!(out.stage2.len(), cfg.n_sources);
        for s in out.stage1.iter().chain(out.stage2.iter()) {
            assert_eq!(s.bins(), cfg.stft.bins());
            assert_eq!(s.frames(), spec.frames());
            assert!(s.is_finite());
        }
    }

    #[test]
    fn identity_configuration_reproduces_input_spectrogram() {
        let cfg = toy_cfg();
        let params = ModelParams::<f64>::identity(&cfg).unwrap();
        let wave = random_wave(&cfg, 0.3, 3);
        let spec = stft(&wave, &cfg.stft).unwrap();
        let out = forward(&spec, &params, &cfg).unwrap();
        for i in 0..cfg.n_sources {
            assert!(out.stage1[i].max_abs_diff(&spec) < 1e-12, "stage1 source {i}");
            assert!(out.stage2[i].max_abs_diff(&spec) < 1e-12, "stage2 source {i}");
        }
    }

    #[test]
    fn identity_configuration_round_trips_waveform() {
        let cfg = toy_cfg();
        let params = ModelParams::<f64>::identity(&cfg).unwrap();
        let wave = random_wave(&cfg, 0.4, 4);
        let res = separate(&wave, &params, &cfg).unwrap();
        let peak = wave[0]
            .iter()
            .chain(wave[1].iter())
            .fold(0.0f64, |m, &x| m.max(x.abs()));
        for i in 0..cfg.n_sources {
            for c in 0..2 {
                for (a, b) in wave[c].iter().zip(&res.stage2_waves[i][c]) {
                    assert!((a - b).abs() <= 1e-5 * peak);
                }
            }
        }
    }

    #[test]
    fn zero_heads_give_silent_outputs() {
        let cfg = toy_cfg();
        let mut params = ModelParams::<f64>::init(&cfg, 5).unwrap();
        let scheme = cfg.scheme().unwrap();
        for head in params.stage1.heads.iter_mut().chain(params.stage2.heads.iter_mut()) {
            *head =
                MergeHeadParams::zeros(&scheme, cfg.n, cfg.merge_hidden, cfg.merge_hidden_layers);
        }
        let wave = random_wave(&cfg, 0.3, 6);
        let res = separate(&wave, &params, &cfg).unwrap();
        for waves in res.stage1_waves.iter().chain(res.stage2_waves.iter()) {
            for c in waves {
                assert!(c.iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn residual_additivity_is_exact() {
        // stage2 - stage1 equals the stage-2 head output exactly.
        let cfg = toy_cfg();
        let params = ModelParams::<f64>::init(&cfg, 7).unwrap();
        let wave = random_wave(&cfg, 0.3, 8);
        let spec = stft(&wave, &cfg.stft).unwrap();
        let out = forward(&spec, &params, &cfg).unwrap();

        // Recompute head-2 outputs directly.
        let scheme = cfg.scheme().unwrap();
        let dims = cfg.ssd_dims();
        let z1 = band_split(&spec, &scheme, &params.stage1.split).unwrap();
        let d1 = dualnet_forward(&z1, &params.stage1.layers, &dims, cfg.discretization, "t").unwrap();
        let z2 = band_split(&spec, &scheme, &params.stage2.split).unwrap();
        let dbar = fusion(&d1, &z2, &params.fusion).unwrap();
        let q2 = dualnet_forward(&dbar, &params.stage2.layers, &dims, cfg.discretization, "t").unwrap();
        for i in 0..cfg.n_sources {
            let (re, im) = band_merge_head(&q2, &scheme, &params.stage2.heads[i]).unwrap();
            let residual = ComplexSpectrogram::from_planes(cfg.stft, spec.frames(), re, im).unwrap();
            let reconstructed = out.stage1[i].add(&residual).unwrap();
            assert!(reconstructed.max_abs_diff(&out.stage2[i]) == 0.0);
        }
    }

    #[test]
    fn head_independence() {
        // Zeroing head i's parameters silences only source i.
        let cfg = toy_cfg();
        let base = ModelParams::<f64>::init(&cfg, 9).unwrap();
        let wave = random_wave(&cfg, 0.25, 10);
        let spec = stft(&wave, &cfg.stft).unwrap();
        let out_base = forward(&spec, &base, &cfg).unwrap();

        let scheme = cfg.scheme().unwrap();
        let mut modified = base.clone();
        modified.stage1.heads[0] =
            MergeHeadParams::zeros(&scheme, cfg.n, cfg.merge_hidden, cfg.merge_hidden_layers);
        let out_mod = forward(&spec, &modified, &cfg).unwrap();

        // Source 0's stage-1 estimate is silenced...
        assert_eq!(out_mod.stage1[0].re().max_abs(), 0.0);
        // ...while source 1's stage-1 estimate is untouched.
        assert!(out_base.stage1[1].max_abs_diff(&out_mod.stage1[1]) == 0.0);
    }

    #[test]
    fn mask_scale_invariance_property() {
        // Positive real scaling of X leaves masks ~invariant, so stage-1
        // estimates scale linearly.
        let cfg = toy_cfg();
        let params = ModelParams::<f64>::init(&cfg, 11).unwrap();
        let wave = random_wave(&cfg, 0.25, 12);
        let spec = stft(&wave, &cfg.stft).unwrap();
        let out1 = forward(&spec, &params, &cfg).unwrap();

        let c = 3.0;
        let mut scaled = spec.clone();
        scaled.scale(c);
        let out2 = forward(&scaled, &params, &cfg).unwrap();
        for i in 0..cfg.n_sources {
            let mut expect = out1.stage1[i].clone();
            expect.scale(c);
            let denom = expect.re().max_abs().max(1.0);
            assert!(out2.stage1[i].max_abs_diff(&expect) < 1e-3 * denom);
        }
    }

    #[test]
    fn graph_forward_matches_plain_forward() {
        for stage2_input in [Stage2Input::Mixture, Stage2Input::Stage1Sum] {
            let mut cfg = toy_cfg();
            cfg.stage2_input = stage2_input;
            let params = ModelParams::<f64>::init(&cfg, 13).unwrap();
            let wave = random_wave(&cfg, 0.25, 14);
            let spec = stft(&wave, &cfg.stft).unwrap();
            let plain = forward(&spec, &params, &cfg).unwrap();

            let mut g = Graph::new();
            let vars = params.map(&mut |m: &Mat<f64>| g.param(m.clone()));
            let fv = forward_g(&mut g, &spec, &vars, &cfg).unwrap();
            for i in 0..cfg.n_sources {
                assert_eq!(g.value(fv.stage1[i].re), plain.stage1[i].re());
                assert_eq!(g.value(fv.stage1[i].im), plain.stage1[i].im());
                assert_eq!(g.value(fv.stage2[i].re), plain.stage2[i].re());
                assert_eq!(g.value(fv.stage2[i].im), plain.stage2[i].im());
            }
        }
    }

    #[test]
    fn param_count_closed_form_matches_serialization_walk() {
        for cfg in [toy_cfg(), ModelConfig::toy_learn()] {
            let params = ModelParams::<f64>::init(&cfg, 15).unwrap();
            assert_eq!(count_params(&cfg), params.count_scalars(), "{cfg:?}");
        }
    }

    #[test]
    fn table_accounting_within_published_tolerances() {
        let full = ModelConfig::full();
        let light = ModelConfig::lightweight();

        let p_full = count_params(&full) as f64 / 1e6;
        let p_light = count_params(&light) as f64 / 1e6;
        assert!((p_full - REF_PARAMS_FULL_M).abs() / REF_PARAMS_FULL_M < 0.20, "full params {p_full}M");
        assert!(
            (p_light - REF_PARAMS_LIGHT_M).abs() / REF_PARAMS_LIGHT_M < 0.20,
            "light params {p_light}M"
        );

        let m_full = estimate_macs(&full, 1.0) / 1e9;
        let m_light = estimate_macs(&light, 1.0) / 1e9;
        assert!((m_full - REF_MACS_FULL_G).abs() / REF_MACS_FULL_G < 0.25, "full macs {m_full}G");
        assert!(
            (m_light - REF_MACS_LIGHT_G).abs() / REF_MACS_LIGHT_G < 0.25,
            "light macs {m_light}G"
        );

        // MACs scale linearly in duration up to frame-count rounding.
        let one = estimate_macs(&full, 1.0);
        let two = estimate_macs(&full, 2.0);
        assert!((two / one - 2.0).abs() < 0.02);
    }

    #[test]
    fn serialization_round_trip_is_bit_exact() {
        let cfg = toy_cfg();
        let params = ModelParams::<f64>::init(&cfg, 16).unwrap();
        let path = std::env::temp_dir().join(format!("bsm2-params-{}.bin", std::process::id()));
        save_params(&path, &params, serde_json::json!({"purpose": "test"})).unwrap();
        let (loaded, meta) = load_params::<f64>(&path, &cfg).unwrap();
        assert_eq!(meta["purpose"], "test");

        let a = params.flatten();
        let b = loaded.flatten();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x, y);
        }

        // Forward after reload is bit-identical.
        let wave = random_wave(&cfg, 0.25, 17);
        let spec = stft(&wave, &cfg.stft).unwrap();
        let o1 = forward(&spec, &params, &cfg).unwrap();
        let o2 = forward(&spec, &loaded, &cfg).unwrap();
        for i in 0..cfg.n_sources {
            assert!(o1.stage2[i].max_abs_diff(&o2.stage2[i]) == 0.0);
        }
        std::fs::remove_file(path).ok();
    }

    #[test]
    fn load_rejects_mismatched_config() {
        let cfg = toy_cfg();
        let params = ModelParams::<f64>::init(&cfg, 18).unwrap();
        let path = std::env::temp_dir().join(format!("bsm2-mismatch-{}.bin", std::process::id()));
        save_params(&path, &params, serde_json::Value::Null).unwrap();
        let other = ModelConfig::toy_learn();
        assert!(load_params::<f64>(&path, &other).is_err());
        std::fs::remove_file(path).ok();
    }
}
