//! Model and training run configuration, serializable as TOML.

use serde::{Deserialize, Serialize};

use crate::bands::{default_band_scheme, BandScheme};
use crate::error::{Error, Result};
use crate::spectral::StftConfig;
use crate::ssd::{Discretization, SsdDims};

/// Which spectrogram feeds the stage-2 band split: the mixture itself, or the
/// sum of the stage-1 source estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage2Input {
    Mixture,
    Stage1Sum,
}

impl Default for Stage2Input {
    fn default() -> Self {
        Stage2Input::Mixture
    }
}

/// SSD block dimensions without the I/O width (which always equals N).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SsdSpec {
    pub d_state: usize,
    pub d_conv: usize,
    pub expand: usize,
    pub headdim: usize,
}

impl Default for SsdSpec {
    fn default() -> Self {
        SsdSpec {
            d_state: 128,
            d_conv: 4,
            expand: 4,
            headdim: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Feature dimension N.
    pub n: usize,
    /// Band widths (bin counts per sub-band); must cover the STFT bins.
    pub band_widths: Vec<usize>,
    pub layers_stage1: usize,
    pub layers_stage2: usize,
    pub n_sources: usize,
    /// Hidden width of the band-merge MLPs (defaults to N).
    pub merge_hidden: usize,
    /// Hidden tanh layers in each band-merge MLP.
    #[serde(default = "default_merge_hidden_layers")]
    pub merge_hidden_layers: usize,
    pub ssd: SsdSpec,
    pub stft: StftConfig,
    #[serde(default)]
    pub discretization: Discretization,
    #[serde(default)]
    pub stage2_input: Stage2Input,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        if self.n == 0 {
            return Err(Error::Config("feature dim N must be positive".into()));
        }
        if self.layers_stage1 == 0 || self.layers_stage2 == 0 {
            return Err(Error::Config("both stages need at least one layer".into()));
        }
        if self.n_sources == 0 {
            return Err(Error::Config("need at least one source".into()));
        }
        if self.merge_hidden == 0 || self.merge_hidden_layers == 0 {
            return Err(Error::Config("merge hidden width and depth must be positive".into()));
        }
        let scheme = self.scheme()?;
        scheme.check_covers(self.stft.bins())?;
        self.ssd_dims().validate()?;
        Ok(())
    }

    pub fn scheme(&self) -> Result<BandScheme> {
        BandScheme::new(self.band_widths.clone())
    }

    pub fn ssd_dims(&self) -> SsdDims {
        SsdDims {
            d_model: self.n,
            d_state: self.ssd.d_state,
            d_conv: self.ssd.d_conv,
            expand: self.ssd.expand,
            headdim: self.ssd.headdim,
        }
    }

    /// The published full-size configuration.
    pub fn full() -> Self {
        let stft = StftConfig::default();
        ModelConfig {
            n: 128,
            band_widths: default_band_scheme(stft.bins()).expect("default scheme").widths().to_vec(),
            layers_stage1: 8,
            layers_stage2: 4,
            n_sources: 4,
            merge_hidden: 128,
            merge_hidden_layers: 2,
            ssd: SsdSpec::default(),
            stft,
            discretization: Discretization::Zoh,
            stage2_input: Stage2Input::Mixture,
        }
    }

    /// The published lightweight configuration (4 + 2 layers).
    pub fn lightweight() -> Self {
        ModelConfig {
            layers_stage1: 4,
            layers_stage2: 2,
            ..Self::full()
        }
    }

    /// Tiny configuration for gradient checking: N=8, K=4, 1+1 layers,
    /// d_state=4, headdim (P) = 4, 8 kHz front end.
    pub fn toy_grad() -> Self {
        let stft = StftConfig {
            n_fft: 128,
            hop: 64,
            sample_rate: 8000,
            ..Default::default()
        };
        ModelConfig {
            n: 8,
            band_widths: uniform_widths(stft.bins(), 4),
            layers_stage1: 1,
            layers_stage2: 1,
            n_sources: 2,
            merge_hidden: 8,
            merge_hidden_layers: 2,
            ssd: SsdSpec {
                d_state: 4,
                d_conv: 4,
                expand: 2,
                headdim: 4,
            },
            stft,
            discretization: Discretization::Zoh,
            stage2_input: Stage2Input::Mixture,
        }
    }

    /// Small trainable configuration: N=32, K=8, 2+1 layers, 8 kHz front end.
    pub fn toy_learn() -> Self {
        let stft = StftConfig {
            n_fft: 256,
            hop: 128,
            sample_rate: 8000,
            ..Default::default()
        };
        ModelConfig {
            n: 32,
            band_widths: uniform_widths(stft.bins(), 8),
            layers_stage1: 2,
            layers_stage2: 1,
            n_sources: 2,
            merge_hidden: 32,
            merge_hidden_layers: 2,
            ssd: SsdSpec {
                d_state: 16,
                d_conv: 4,
                expand: 2,
                headdim: 16,
            },
            stft,
            discretization: Discretization::Zoh,
            stage2_input: Stage2Input::Mixture,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "lightweight" => Ok(Self::lightweight()),
            "toy-grad" => Ok(Self::toy_grad()),
            "toy-learn" => Ok(Self::toy_learn()),
            other => Err(Error::Config(format!(
                "unknown preset '{other}' (expected full, lightweight, toy-grad, toy-learn)"
            ))),
        }
    }
}

fn default_merge_hidden_layers() -> usize {
    2
}

fn uniform_widths(bins: usize, k: usize) -> Vec<usize> {
    crate::bands::uniform_scheme(bins, k)
        .expect("uniform scheme")
        .widths()
        .to_vec()
}

/// Data source for training: seeded synthetic pools or a directory of stems.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum DataConfig {
    Synthetic {
        /// Length of each generated track in seconds.
        seconds: f64,
        /// Number of tracks generated per source pool.
        #[serde(default = "default_tracks")]
        tracks: usize,
    },
    Stems {
        dir: String,
    },
}

fn default_tracks() -> usize {
    3
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic {
            seconds: 6.0,
            tracks: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    /// Training segment length in seconds.
    pub segment_seconds: f64,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub lr_decay: f64,
    pub patience_epochs: usize,
    /// Random gain range applied to each stem during mixing, in dB.
    pub gain_db: (f64, f64),
    /// Batches in the fixed held-out validation set.
    pub val_batches: usize,
    pub seed: u64,
    #[serde(default)]
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 2,
            steps_per_epoch: 50,
            batch_size: 2,
            segment_seconds: 0.5,
            learning_rate: 1e-3,
            clip_norm: 5.0,
            lr_decay: 0.8,
            patience_epochs: 2,
            gain_db: (-3.0, 3.0),
            val_batches: 2,
            seed: 0,
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs, steps and batch size must be positive".into()));
        }
        if self.learning_rate <= 0.0 || self.clip_norm <= 0.0 {
            return Err(Error::Config("learning rate and clip norm must be positive".into()));
        }
        if !(0.0 < self.lr_decay && self.lr_decay < 1.0) {
            return Err(Error::Config("lr decay must be in (0, 1)".into()));
        }
        if self.gain_db.0 > self.gain_db.1 {
            return Err(Error::Config("gain_db range is inverted".into()));
        }
        Ok(())
    }
}

/// Top-level run file: `[model]` + `[train]` tables, both optional with
/// presets/defaults.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RunFile {
    /// Preset name the model section starts from.
    pub preset: Option<String>,
    pub model: Option<ModelConfig>,
    pub train: Option<TrainConfig>,
}

impl RunFile {
    pub fn from_path(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("bad run file: {e}")))
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let cfg = match (&self.model, &self.preset) {
            (Some(m), _) => m.clone(),
            (None, Some(p)) => ModelConfig::preset(p)?,
            (None, None) => ModelConfig::full(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = self.train.clone().unwrap_or_default();
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in ["full", "lightweight", "toy-grad", "toy-learn"] {
            let cfg = ModelConfig::preset(name).unwrap();
            cfg.validate().unwrap();
        }
        assert!(ModelConfig::preset("nope").is_err());
    }

    #[test]
    fn full_preset_matches_published_dims() {
        let cfg = ModelConfig::full();
        assert_eq!(cfg.n, 128);
        assert_eq!(cfg.band_widths.len(), 57);
        assert_eq!(cfg.layers_stage1, 8);
        assert_eq!(cfg.layers_stage2, 4);
        assert_eq!(cfg.n_sources, 4);
        assert_eq!(cfg.ssd.d_state, 128);
        assert_eq!(cfg.ssd.headdim, 64);
        assert_eq!(cfg.stft.n_fft, 2048);
        assert_eq!(cfg.stft.hop, 512);
        let dims = cfg.ssd_dims();
        assert_eq!(dims.d_inner(), 512);
        assert_eq!(dims.n_heads(), 8);
    }

    #[test]
    fn toml_round_trip() {
        let run = RunFile {
            preset: Some("toy-learn".into()),
            model: None,
            train: Some(TrainConfig::default()),
        };
        let text = toml::to_string(&run).unwrap();
        let back: RunFile = toml::from_str(&text).unwrap();
        assert_eq!(back.preset.as_deref(), Some("toy-learn"));
        assert_eq!(back.train.unwrap(), TrainConfig::default());

        let explicit: RunFile = toml::from_str(
            r#"
            [model]
            n = 16
            band_widths = [10, 10, 13]
            layers_stage1 = 1
            layers_stage2 = 1
            n_sources = 2
            merge_hidden = 16
            [model.ssd]
            d_state = 8
            d_conv = 4
            expand = 2
            headdim = 8
            [model.stft]
            n_fft = 64
            hop = 16
            sample_rate = 8000
            "#,
        )
        .unwrap();
        let cfg = explicit.model_config().unwrap();
        assert_eq!(cfg.n, 16);
        assert_eq!(cfg.band_widths, vec![10, 10, 13]);
        assert_eq!(cfg.stft.bins(), 33);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ModelConfig::toy_grad();
        cfg.band_widths = vec![10, 10]; // does not cover 65 bins
        assert!(cfg.validate().is_err());

        let mut cfg = ModelConfig::toy_grad();
        cfg.layers_stage2 = 0;
        assert!(cfg.validate().is_err());

        let mut tc = TrainConfig::default();
        tc.lr_decay = 1.5;
        assert!(tc.validate().is_err());
    }
}
