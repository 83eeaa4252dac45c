use bsmamba2_core::config::{DataConfig, ModelConfig, TrainConfig};
use bsmamba2_core::data::{make_synthetic_tracks, mix_batch};
use bsmamba2_core::evaluation::sdr;
use bsmamba2_core::model::{load_params, separate};
use bsmamba2_core::rng::derive_seed;
use bsmamba2_core::training::train_run;
use std::time::Instant;

fn main() {
    let mcfg = ModelConfig::toy_learn();
    let tcfg = TrainConfig {
        epochs: 10,
        steps_per_epoch: 200,
        batch_size: 2,
        segment_seconds: 0.5,
        seed: 7,
        data: DataConfig::Synthetic { seconds: 6.0, tracks: 3 },
        ..Default::default()
    };
    let t0 = Instant::now();
    let summary = train_run::<f32>(&mcfg, &tcfg, "/tmp/learnfull").unwrap();
    println!(
        "trained {} steps in {:.1} min; loss {:.4} -> {:.4}",
        summary.steps_run,
        t0.elapsed().as_secs_f64() / 60.0,
        summary.first_total,
        summary.final_total
    );
    println!("val history: {:?}", summary.val_history);

    let (params, _) = load_params::<f32>("/tmp/learnfull/model.bin", &mcfg).unwrap();
    let seg = (0.5 * mcfg.stft.sample_rate as f64) as usize;
    let pools = make_synthetic_tracks::<f32>(
        tcfg.seed ^ 0xDEAD_BEEF,
        6.0,
        mcfg.stft.sample_rate,
        mcfg.n_sources,
        seg,
        3,
    )
    .unwrap();
    let batch = mix_batch(&pools, 8, tcfg.gain_db, derive_seed(tcfg.seed, 0xE0A1)).unwrap();

    let mut base_acc = 0.0;
    let mut model_acc = 0.0;
    let mut n = 0usize;
    for item in &batch {
        let res = separate(&item.mixture, &params, &mcfg).unwrap();
        for (s, stem) in item.stems.iter().enumerate() {
            let b = sdr(stem, &item.mixture).unwrap();
            let m = sdr(stem, &res.stage2_waves[s]).unwrap();
            base_acc += b;
            model_acc += m;
            n += 1;
        }
    }
    let base = base_acc / n as f64;
    let model = model_acc / n as f64;
    println!(
        "held-out: baseline (est = mixture) {base:.2} dB, model stage-2 {model:.2} dB, improvement {:.2} dB",
        model - base
    );
}
