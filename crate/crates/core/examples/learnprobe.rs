use bsmamba2_core::config::{DataConfig, ModelConfig, TrainConfig};
use bsmamba2_core::training::train_run;
use std::time::Instant;

fn main() {
    let mcfg = ModelConfig::toy_learn();
    let tcfg = TrainConfig {
        epochs: 1,
        steps_per_epoch: 20,
        batch_size: 2,
        segment_seconds: 0.5,
        seed: 7,
        data: DataConfig::Synthetic { seconds: 6.0, tracks: 3 },
        ..Default::default()
    };
    let t0 = Instant::now();
    let summary = train_run::<f32>(&mcfg, &tcfg, "/tmp/learnprobe").unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "20 steps in {dt:.1}s => {:.2} s/step; loss {:.4} -> {:.4}",
        dt / 20.0, summary.first_total, summary.final_total
    );
    println!("projected 2000 steps: {:.1} min", 2000.0 * dt / 20.0 / 60.0);
}
