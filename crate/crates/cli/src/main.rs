//! Command-line surface for the two-stage band-split Mamba-2 separation
//! pipeline: training, separation, SDR evaluation, verification suites,
//! scan-vs-dual benchmarking, and parameter/MAC accounting.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use bsmamba2_core::config::{ModelConfig, RunFile, TrainConfig};
use bsmamba2_core::evaluation::{evaluate_directory, segment_and_separate_stages};
use bsmamba2_core::model::{
    count_params, count_params_stage1, estimate_macs, estimate_macs_stage1, load_params,
    read_container_meta, ModelParams, REF_MACS_FULL_G, REF_MACS_LIGHT_G, REF_PARAMS_FULL_M,
    REF_PARAMS_LIGHT_M,
};
use bsmamba2_core::scalar::Scalar;
use bsmamba2_core::spectral::stft;
use bsmamba2_core::training::train_run;
use bsmamba2_core::verify::{bench_scan_vs_dual, run_suites, VerifyOptions};
use bsmamba2_core::wav::{read_wav, write_wav, Audio, WavFormat};

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Parser)]
#[command(
    name = "bsmamba2",
    about = "Two-stage band-split Mamba-2 music source separation",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model (synthetic pools or a stems directory) and write
    /// checkpoints plus a CSV log.
    Train {
        /// TOML run file with [model] and [train] tables.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Model preset when no config file is given
        /// (full | lightweight | toy-grad | toy-learn).
        #[arg(long)]
        preset: Option<String>,
        /// Overrides the run file's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "f64")]
        precision: Precision,
        /// Output directory for checkpoints and the training log.
        #[arg(long, default_value = "train_out")]
        out: PathBuf,
        /// Overrides epochs from the run file.
        #[arg(long)]
        epochs: Option<usize>,
        /// Overrides steps per epoch from the run file.
        #[arg(long)]
        steps_per_epoch: Option<usize>,
    },
    /// Separate a stereo WAV into the model's sources.
    Separate {
        /// Checkpoint or weights container.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input WAV (stereo, model sample rate).
        input: PathBuf,
        /// Model config TOML (only needed if the checkpoint lacks one).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "f64")]
        precision: Precision,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Also write the stage-1 (mask-only) stems.
        #[arg(long)]
        export_stage1: bool,
        /// Also write magnitude-spectrogram CSVs of the mixture and stems.
        #[arg(long)]
        spectrogram_csv: bool,
        /// Output sample encoding: pcm16, pcm24 or f32.
        #[arg(long, default_value = "f32")]
        wav_format: String,
    },
    /// Score separations against reference stems (uSDR / cSDR report).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of song subdirectories with mixture.wav + <source>.wav.
        stems: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "f64")]
        precision: Precision,
        /// Report CSV path (the chunk audit lands next to it).
        #[arg(long, default_value = "sdr_report.csv")]
        out: PathBuf,
    },
    /// Run the verification suites (dual-form equivalence, STFT round trip,
    /// gradient check, identity model, loss additivity).
    Verify {
        #[arg(long, value_enum, default_value = "f64")]
        precision: Precision,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Time the linear scan against the quadratic dual form.
    Bench {
        /// Comma-separated sequence lengths.
        #[arg(long, default_value = "256,512,1024,2048")]
        lengths: String,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV output path.
        #[arg(long, default_value = "bench.csv")]
        out: PathBuf,
    },
    /// Print parameter and MAC accounting for a configuration.
    Info {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "full")]
        preset: String,
    },
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> anyhow::Result<()> {
    match Cli::parse().cmd {
        Cmd::Train {
            config,
            preset,
            seed,
            precision,
            out,
            epochs,
            steps_per_epoch,
        } => {
            let (mcfg, mut tcfg) = load_run_config(config.as_deref(), preset.as_deref())?;
            if let Some(s) = seed {
                tcfg.seed = s;
            }
            if let Some(e) = epochs {
                tcfg.epochs = e;
            }
            if let Some(s) = steps_per_epoch {
                tcfg.steps_per_epoch = s;
            }
            match precision {
                Precision::F64 => cmd_train::<f64>(&mcfg, &tcfg, &out),
                Precision::F32 => cmd_train::<f32>(&mcfg, &tcfg, &out),
            }
        }
        Cmd::Separate {
            checkpoint,
            input,
            config,
            precision,
            out,
            export_stage1,
            spectrogram_csv,
            wav_format,
        } => {
            let format: WavFormat = wav_format.parse()?;
            match precision {
                Precision::F64 => cmd_separate::<f64>(
                    &checkpoint,
                    &input,
                    config.as_deref(),
                    &out,
                    export_stage1,
                    spectrogram_csv,
                    format,
                ),
                Precision::F32 => cmd_separate::<f32>(
                    &checkpoint,
                    &input,
                    config.as_deref(),
                    &out,
                    export_stage1,
                    spectrogram_csv,
                    format,
                ),
            }
        }
        Cmd::Eval {
            checkpoint,
            stems,
            config,
            precision,
            out,
        } => match precision {
            Precision::F64 => cmd_eval::<f64>(&checkpoint, &stems, config.as_deref(), &out),
            Precision::F32 => cmd_eval::<f32>(&checkpoint, &stems, config.as_deref(), &out),
        },
        Cmd::Verify { precision, seed } => cmd_verify(precision, seed),
        Cmd::Bench {
            lengths,
            reps,
            seed,
            out,
        } => cmd_bench(&lengths, reps, seed, &out),
        Cmd::Info { config, preset } => cmd_info(config.as_deref(), &preset),
    }
}

fn load_run_config(
    config: Option<&Path>,
    preset: Option<&str>,
) -> anyhow::Result<(ModelConfig, TrainConfig)> {
    let run = match config {
        Some(path) => RunFile::from_path(path).context("reading run file")?,
        None => RunFile {
            preset: preset.map(|s| s.to_string()).or(Some("toy-learn".into())),
            ..Default::default()
        },
    };
    Ok((run.model_config()?, run.train_config()?))
}

/// Model config resolution for inference commands: checkpoint metadata first,
/// then an explicit run file.
fn model_config_for(checkpoint: &Path, config: Option<&Path>) -> anyhow::Result<ModelConfig> {
    let meta = read_container_meta(checkpoint)?;
    for key in [&meta["model_config"], &meta["extra"]["model_config"]] {
        if !key.is_null() {
            let cfg: ModelConfig = serde_json::from_value(key.clone())
                .context("parsing model config embedded in checkpoint")?;
            cfg.validate()?;
            return Ok(cfg);
        }
    }
    match config {
        Some(path) => {
            let run = RunFile::from_path(path)?;
            Ok(run.model_config()?)
        }
        None => bail!(
            "{} does not embed a model config; pass --config",
            checkpoint.display()
        ),
    }
}

fn cmd_train<T: Scalar>(mcfg: &ModelConfig, tcfg: &TrainConfig, out: &Path) -> anyhow::Result<()> {
    println!(
        "training: N={} K={} layers={}+{} sources={} sr={} precision={} seed={}",
        mcfg.n,
        mcfg.band_widths.len(),
        mcfg.layers_stage1,
        mcfg.layers_stage2,
        mcfg.n_sources,
        mcfg.stft.sample_rate,
        T::DTYPE,
        tcfg.seed
    );
    let summary = train_run::<T>(mcfg, tcfg, out)?;
    println!(
        "done: {} steps over {} epochs, loss {:.6} -> {:.6}, final lr {:.3e}",
        summary.steps_run,
        summary.epochs_run,
        summary.first_total,
        summary.final_total,
        summary.final_lr
    );
    for (i, v) in summary.val_history.iter().enumerate() {
        println!("  epoch {:>3}: val loss {v:.6}", i + 1);
    }
    println!("log:        {}", summary.log_path.display());
    println!("checkpoint: {}", summary.checkpoint.display());
    println!("weights:    {}", out.join("model.bin").display());
    Ok(())
}

fn write_spec_csvs<T: Scalar>(
    wave: &[Vec<T>; 2],
    cfg: &ModelConfig,
    out: &Path,
    base: &str,
) -> anyhow::Result<()> {
    let spec = stft(wave, &cfg.stft)?;
    for c in 0..2 {
        let path = out.join(format!("{base}.spec.ch{c}.csv"));
        let mut file = std::io::BufWriter::new(std::fs::File::create(&path)?);
        spec.write_magnitude_csv(c, &mut file)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_separate<T: Scalar>(
    checkpoint: &Path,
    input: &Path,
    config: Option<&Path>,
    out: &Path,
    export_stage1: bool,
    spectrogram_csv: bool,
    format: WavFormat,
) -> anyhow::Result<()> {
    let cfg = model_config_for(checkpoint, config)?;
    let (params, _) = load_params::<T>(checkpoint, &cfg)?;

    let audio = read_wav::<T>(input)?;
    if audio.sample_rate != cfg.stft.sample_rate {
        bail!(
            "sample-rate mismatch: input {} Hz, model {} Hz (resampling is not performed)",
            audio.sample_rate,
            cfg.stft.sample_rate
        );
    }
    let wave = audio.stereo_arrays()?;
    std::fs::create_dir_all(out)?;

    let (stage1, stage2) = segment_and_separate_stages(&wave, &params, &cfg)?;
    let base = input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "input".into());
    let names: Vec<&str> = bsmamba2_core::data::SOURCE_NAMES
        .iter()
        .copied()
        .take(cfg.n_sources)
        .collect();

    for (i, name) in names.iter().enumerate() {
        let path = out.join(format!("{base}.{name}.wav"));
        let audio = Audio {
            sample_rate: cfg.stft.sample_rate,
            channels: vec![stage2[i][0].clone(), stage2[i][1].clone()],
        };
        write_wav(&path, &audio, format)?;
        println!("wrote {}", path.display());
        if export_stage1 {
            let path = out.join(format!("{base}.{name}.stage1.wav"));
            let audio = Audio {
                sample_rate: cfg.stft.sample_rate,
                channels: vec![stage1[i][0].clone(), stage1[i][1].clone()],
            };
            write_wav(&path, &audio, format)?;
            println!("wrote {}", path.display());
        }
        if spectrogram_csv {
            write_spec_csvs(&stage2[i], &cfg, out, &format!("{base}.{name}"))?;
            if export_stage1 {
                write_spec_csvs(&stage1[i], &cfg, out, &format!("{base}.{name}.stage1"))?;
            }
        }
    }
    if spectrogram_csv {
        write_spec_csvs(&wave, &cfg, out, &format!("{base}.mixture"))?;
    }
    Ok(())
}

fn cmd_eval<T: Scalar>(
    checkpoint: &Path,
    stems: &Path,
    config: Option<&Path>,
    out: &Path,
) -> anyhow::Result<()> {
    let cfg = model_config_for(checkpoint, config)?;
    let (params, _) = load_params::<T>(checkpoint, &cfg)?;
    let report = evaluate_directory(&params, &cfg, stems)?;

    let mut file = std::io::BufWriter::new(std::fs::File::create(out)?);
    report.write_csv(&mut file)?;
    let audit_path = out.with_file_name(format!(
        "{}_chunks.csv",
        out.file_stem().map(|s| s.to_string_lossy()).unwrap_or_default()
    ));
    let mut audit = std::io::BufWriter::new(std::fs::File::create(&audit_path)?);
    report.write_audit_csv(&mut audit)?;

    println!("source          uSDR(dB)    cSDR(dB)");
    for (i, name) in report.source_names.iter().enumerate() {
        println!("{name:<12} {:>11.3} {:>11.3}", report.usdr[i], report.csdr[i]);
    }
    println!(
        "{:<12} {:>11.3} {:>11.3}",
        "overall",
        report.overall_usdr(),
        report.overall_csdr()
    );
    println!("report: {}", out.display());
    println!("chunks: {}", audit_path.display());
    Ok(())
}

fn cmd_verify(precision: Precision, seed: u64) -> anyhow::Result<()> {
    if precision == Precision::F32 {
        println!("warning: 32-bit verification runs with looser tolerances; the gradient check stays 64-bit");
    }
    let opts = VerifyOptions {
        use_f64: precision == Precision::F64,
        seed,
        perturb_dual: None,
    };
    let results = run_suites(&opts);
    let mut all_ok = true;
    for r in &results {
        println!("{} {:<24} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        all_ok &= r.passed;
    }
    if !all_ok {
        std::process::exit(1);
    }
    Ok(())
}

fn cmd_bench(lengths: &str, reps: usize, seed: u64, out: &Path) -> anyhow::Result<()> {
    let lengths: Vec<usize> = lengths
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .context("parsing --lengths")?;
    if lengths.is_empty() {
        bail!("no lengths given");
    }
    let rows = bench_scan_vs_dual(&lengths, reps, seed);
    let mut file = std::io::BufWriter::new(std::fs::File::create(out)?);
    use std::io::Write;
    writeln!(file, "len,scan_seconds,dual_seconds,ratio,max_diff")?;
    println!("{:>6} {:>12} {:>12} {:>9} {:>10}", "T", "scan (s)", "dual (s)", "ratio", "max diff");
    for row in &rows {
        writeln!(
            file,
            "{},{:e},{:e},{:.3},{:e}",
            row.len,
            row.scan_seconds,
            row.dual_seconds,
            row.ratio(),
            row.max_diff
        )?;
        println!(
            "{:>6} {:>12.6} {:>12.6} {:>9.2} {:>10.2e}",
            row.len,
            row.scan_seconds,
            row.dual_seconds,
            row.ratio(),
            row.max_diff
        );
        if row.max_diff > 1e-10 {
            bail!("equivalence gate failed at T = {}", row.len);
        }
    }
    println!("csv: {}", out.display());
    Ok(())
}

fn cmd_info(config: Option<&Path>, preset: &str) -> anyhow::Result<()> {
    let cfg = match config {
        Some(path) => RunFile::from_path(path)?.model_config()?,
        None => {
            let c = ModelConfig::preset(preset)?;
            c.validate()?;
            c
        }
    };
    let params_m = count_params(&cfg) as f64 / 1e6;
    let params_fs_m = count_params_stage1(&cfg) as f64 / 1e6;
    let macs_g = estimate_macs(&cfg, 1.0) / 1e9;
    let macs_fs_g = estimate_macs_stage1(&cfg, 1.0) / 1e9;

    println!(
        "config: N={} K={} layers={}+{} sources={} d_state={} headdim={} sr={}",
        cfg.n,
        cfg.band_widths.len(),
        cfg.layers_stage1,
        cfg.layers_stage2,
        cfg.n_sources,
        cfg.ssd.d_state,
        cfg.ssd.headdim,
        cfg.stft.sample_rate
    );
    println!("parameters:   {params_m:.2} M (stage 1 only: {params_fs_m:.2} M)");
    println!("MACs (1 s):   {macs_g:.2} G (stage 1 only: {macs_fs_g:.2} G)");
    let reference = match (cfg.layers_stage1, cfg.layers_stage2) {
        (8, 4) => Some((REF_PARAMS_FULL_M, REF_MACS_FULL_G, "full")),
        (4, 2) => Some((REF_PARAMS_LIGHT_M, REF_MACS_LIGHT_G, "lightweight")),
        _ => None,
    };
    if let Some((ref_p, ref_m, name)) = reference {
        println!(
            "reference ({name}): {ref_p:.2} M params ({:+.1}%), {ref_m:.2} G MACs/s ({:+.1}%)",
            100.0 * (params_m - ref_p) / ref_p,
            100.0 * (macs_g - ref_m) / ref_m
        );
    }
    // For small configurations, cross-check the closed form against a walk of
    // actually allocated tensors.
    if count_params(&cfg) < 5_000_000 {
        let params = ModelParams::<f64>::init(&cfg, 0)?;
        let walked = params.count_scalars();
        let closed = count_params(&cfg);
        println!(
            "serialization-walk oracle: {walked} scalars, closed form {closed} -> {}",
            if walked == closed { "ok" } else { "MISMATCH" }
        );
        if walked != closed {
            bail!("parameter accounting mismatch");
        }
    }
    Ok(())
}
