//! Release-gate verification suites (dual-form equivalence, STFT round trip,
//! gradient check, identity-model stitching, loss additivity) and the
//! scan-vs-dual runtime benchmark.

use std::time::Instant;

use rand::Rng;

use crate::config::ModelConfig;
use crate::data::{make_synthetic_tracks, mix_batch};
use crate::error::Result;
use crate::model::{forward, forward_g, ModelParams};
use crate::rng::{self, derive_seed};
use crate::scalar::Scalar;
use crate::spectral::{istft, stft, StftConfig};
use crate::ssd::{random_instance, ssd_dual, ssd_scan, ScanDims};
use crate::training::{grad_check, loss_g, total_loss};

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Copy, Debug)]
pub struct VerifyOptions {
    /// 64-bit is the reference mode; 32-bit runs with looser tolerances (the
    /// gradient check always runs in 64-bit).
    pub use_f64: bool,
    pub seed: u64,
    /// Test hook: adds this offset to the dual form's first output before the
    /// equivalence comparison, so the suite's failure path is itself testable.
    pub perturb_dual: Option<f64>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            use_f64: true,
            seed: 0,
            perturb_dual: None,
        }
    }
}

fn suite(name: &str, passed: bool, detail: String) -> SuiteResult {
    SuiteResult {
        name: name.to_string(),
        passed,
        detail,
    }
}

/// Dual-form equivalence over `instances` random shapes with T <= 64,
/// heads <= 4, d_state <= 16.
pub fn dual_equivalence_suite<T: Scalar>(
    instances: usize,
    tol: f64,
    seed: u64,
    perturb: Option<f64>,
) -> SuiteResult {
    let mut rng = rng::seeded(derive_seed(seed, 11));
    let mut worst = 0.0f64;
    for i in 0..instances {
        let dims = ScanDims {
            len: rng.random_range(1..=64),
            heads: rng.random_range(1..=4),
            pdim: rng.random_range(1..=8),
            dstate: rng.random_range(1..=16),
        };
        let (x, abar, bbar, c) = random_instance::<T>(&mut rng, dims);
        let ys = ssd_scan(&x, &abar, &bbar, &c, dims).expect("scan");
        let mut yd = ssd_dual(&x, &abar, &bbar, &c, dims).expect("dual");
        if let Some(p) = perturb {
            yd[0] = yd[0] + T::of(p);
        }
        let diff = ys
            .iter()
            .zip(&yd)
            .fold(0.0f64, |m, (a, b)| m.max((*a - *b).as_f64().abs()));
        worst = worst.max(diff);
        let _ = i;
    }
    suite(
        "dual-form-equivalence",
        worst <= tol,
        format!("{instances} instances, max |scan - dual| = {worst:.3e} (tol {tol:.0e})"),
    )
}

/// STFT round trip on random 1 s stereo at the default 2048/512 Hann config.
pub fn stft_round_trip_suite<T: Scalar>(tol: f64, seed: u64) -> SuiteResult {
    let cfg = StftConfig::default();
    let len = cfg.sample_rate as usize;
    let mut rng = rng::seeded(derive_seed(seed, 12));
    let wave: [Vec<T>; 2] = [
        (0..len).map(|_| T::of(rng.random_range(-1.0..1.0))).collect(),
        (0..len).map(|_| T::of(rng.random_range(-1.0..1.0))).collect(),
    ];
    let run = || -> Result<f64> {
        let spec = stft(&wave, &cfg)?;
        let back = istft(&spec, len)?;
        let mut peak = 0.0f64;
        let mut worst = 0.0f64;
        for c in 0..2 {
            for (a, b) in wave[c].iter().zip(&back[c]) {
                peak = peak.max(a.as_f64().abs());
                worst = worst.max((a.as_f64() - b.as_f64()).abs());
            }
        }
        Ok(worst / peak)
    };
    match run() {
        Ok(rel) => suite(
            "stft-round-trip",
            rel <= tol,
            format!("peak-relative error {rel:.3e} (tol {tol:.0e})"),
        ),
        Err(e) => suite("stft-round-trip", false, e.to_string()),
    }
}

/// Gradient check on the toy configuration (always 64-bit).
pub fn grad_check_suite(seed: u64) -> SuiteResult {
    let cfg = ModelConfig::toy_grad();
    match grad_check(&cfg, seed) {
        Ok(report) => suite(
            "gradient-check",
            report.passed(1e-4),
            format!(
                "max rel error {:.3e} (worst group {}), directional {:.3e} (tol 1e-4, 64-bit)",
                report.max_rel_error, report.worst_group, report.directional_error
            ),
        ),
        Err(e) => suite("gradient-check", false, e.to_string()),
    }
}

/// Identity-configured model: segment-and-separate must reproduce the input.
pub fn identity_model_suite<T: Scalar>(tol: f64, seed: u64) -> SuiteResult {
    let cfg = ModelConfig::toy_grad();
    let run = || -> Result<f64> {
        let params = ModelParams::<T>::identity(&cfg)?;
        let len = (4.0 * cfg.stft.sample_rate as f64) as usize;
        let mut rng = rng::seeded(derive_seed(seed, 13));
        let wave: [Vec<T>; 2] = [
            (0..len).map(|_| T::of(rng.random_range(-0.8..0.8))).collect(),
            (0..len).map(|_| T::of(rng.random_range(-0.8..0.8))).collect(),
        ];
        let outs = crate::evaluation::segment_and_separate(&wave, &params, &cfg)?;
        let mut peak = 0.0f64;
        let mut worst = 0.0f64;
        for c in 0..2 {
            for &v in &wave[c] {
                peak = peak.max(v.as_f64().abs());
            }
        }
        for out in &outs {
            for c in 0..2 {
                for (a, b) in wave[c].iter().zip(&out[c]) {
                    worst = worst.max((a.as_f64() - b.as_f64()).abs());
                }
            }
        }
        Ok(worst / peak)
    };
    match run() {
        Ok(rel) => suite(
            "identity-model",
            rel <= tol,
            format!("peak-relative error {rel:.3e} over all sources (tol {tol:.0e})"),
        ),
        Err(e) => suite("identity-model", false, e.to_string()),
    }
}

/// Loss additivity: reported total equals stage1 + stage2 on random batches.
pub fn loss_additivity_suite<T: Scalar>(tol: f64, seed: u64) -> SuiteResult {
    let cfg = ModelConfig::toy_grad();
    let run = || -> Result<f64> {
        let params = ModelParams::<T>::init(&cfg, seed)?;
        let pools = make_synthetic_tracks::<T>(
            derive_seed(seed, 14),
            3.0,
            cfg.stft.sample_rate,
            cfg.n_sources,
            2000,
            2,
        )?;
        let batch = mix_batch(&pools, 3, (-3.0, 3.0), derive_seed(seed, 15))?;
        let mut worst = 0.0f64;
        for item in &batch {
            let spec = stft(&item.mixture, &cfg.stft)?;
            let refs: Result<Vec<_>> = item.stems.iter().map(|s| stft(s, &cfg.stft)).collect();
            let refs = refs?;
            let length = item.mixture[0].len();

            // Graph route (training) and plain route (reporting) must both be
            // additive.
            let mut g = crate::graph::Graph::new();
            let vars = params.map(&mut |m: &crate::mat::Mat<T>| g.param(m.clone()));
            let fwd = forward_g(&mut g, &spec, &vars, &cfg)?;
            let (_, r1) = loss_g(&mut g, &fwd, &refs, &cfg.stft, length)?;
            let out = forward(&spec, &params, &cfg)?;
            let r2 = total_loss(&out, &refs, length)?;
            for r in [&r1, &r2] {
                worst = worst.max((r.total - (r.stage1 + r.stage2)).abs() / r.total.max(1e-30));
            }
        }
        Ok(worst)
    };
    match run() {
        Ok(rel) => suite(
            "loss-additivity",
            rel <= tol,
            format!("max relative |total - (s1+s2)| = {rel:.3e} (tol {tol:.0e})"),
        ),
        Err(e) => suite("loss-additivity", false, e.to_string()),
    }
}

/// Runs every verification suite at the precision's tolerances.
pub fn run_suites(opts: &VerifyOptions) -> Vec<SuiteResult> {
    let mut results = Vec::new();
    if opts.use_f64 {
        results.push(dual_equivalence_suite::<f64>(200, 1e-10, opts.seed, opts.perturb_dual));
        results.push(stft_round_trip_suite::<f64>(1e-6, opts.seed));
        results.push(identity_model_suite::<f64>(1e-4, opts.seed));
        results.push(loss_additivity_suite::<f64>(1e-12, opts.seed));
    } else {
        results.push(dual_equivalence_suite::<f32>(200, 1e-4, opts.seed, opts.perturb_dual));
        results.push(stft_round_trip_suite::<f32>(1e-3, opts.seed));
        results.push(identity_model_suite::<f32>(1e-3, opts.seed));
        results.push(loss_additivity_suite::<f32>(1e-6, opts.seed));
    }
    results.push(grad_check_suite(opts.seed));
    results
}

// ---------------------------------------------------------------------------
// benchmark
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct BenchRow {
    pub len: usize,
    pub scan_seconds: f64,
    pub dual_seconds: f64,
    /// Numerical agreement gate computed before timing.
    pub max_diff: f64,
}

impl BenchRow {
    pub fn ratio(&self) -> f64 {
        self.dual_seconds / self.scan_seconds
    }
}

/// Times the linear scan against the quadratic dual form on equal instances.
/// Both forms are checked for agreement before the timed runs.
pub fn bench_scan_vs_dual(lengths: &[usize], reps: usize, seed: u64) -> Vec<BenchRow> {
    let mut out = Vec::with_capacity(lengths.len());
    for &len in lengths {
        let dims = ScanDims {
            len,
            heads: 2,
            pdim: 8,
            dstate: 16,
        };
        let mut rng = rng::seeded(derive_seed(seed, len as u64));
        let (x, abar, bbar, c) = random_instance::<f64>(&mut rng, dims);

        let ys = ssd_scan(&x, &abar, &bbar, &c, dims).expect("scan");
        let yd = ssd_dual(&x, &abar, &bbar, &c, dims).expect("dual");
        let max_diff = ys
            .iter()
            .zip(&yd)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));

        let time_of = |f: &dyn Fn() -> Vec<f64>| -> f64 {
            let mut best = f64::INFINITY;
            for _ in 0..reps.max(1) {
                let t0 = Instant::now();
                let y = f();
                let dt = t0.elapsed().as_secs_f64();
                // Fold the output back in so the call cannot be elided.
                if y[0].is_nan() {
                    unreachable!();
                }
                best = best.min(dt);
            }
            best
        };
        let scan_seconds = time_of(&|| ssd_scan(&x, &abar, &bbar, &c, dims).expect("scan"));
        let dual_seconds = time_of(&|| ssd_dual(&x, &abar, &bbar, &c, dims).expect("dual"));
        out.push(BenchRow {
            len,
            scan_seconds,
            dual_seconds,
            max_diff,
        });
    }
    out
}
