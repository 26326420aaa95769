//! Overfit a few synthetic samples and print the learning curve.
//!
//! `cargo run --release --example overfit -- [epochs] [lr] [momentum] [size] [samples]`

use mpdcnn::data::augment::AugmentConfig;
use mpdcnn::data::synth::{generate_synthetic, SynthConfig};
use mpdcnn::train::{Schedule, TrainConfig, Trainer};
use mpdcnn::{build_network, Arch, RngState, Role};

fn main() -> mpdcnn::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: &str| args.get(i).cloned().unwrap_or_else(|| d.to_string());
    let epochs: usize = arg(0, "200").parse().unwrap();
    let lr: f64 = arg(1, "0.01").parse().unwrap();
    let momentum: f64 = arg(2, "0.9").parse().unwrap();
    let size: usize = arg(3, "96").parse().unwrap();
    let n: usize = arg(4, "8").parse().unwrap();

    let data = generate_synthetic(n, &SynthConfig::with_size(size), 7)?;
    let net = build_network(Arch::Resnet23, Role::Classifier, 1)?;
    let cfg = TrainConfig {
        // step decay over the last half of the run
        schedule: Schedule::from_pairs(
            &[(epochs / 2, lr), (epochs * 3 / 10, lr / 10.0), (epochs - epochs / 2 - epochs * 3 / 10, lr / 100.0)],
            5,
        ),
        momentum,
        eval_every: 10,
        augment: AugmentConfig::disabled(),
        ..Default::default()
    };
    let mut t = Trainer::new(net, &data, cfg, RngState::new(11))?;
    let start = std::time::Instant::now();
    t.fit(&data, &[], None, |m| {
        println!(
            "{:4} loss {:.5} batch_acc {:.4} train_acc {:?} {:.1}s",
            m.epoch,
            m.loss,
            m.batch_accuracy,
            m.train_accuracy,
            start.elapsed().as_secs_f64()
        )
    })?;
    Ok(())
}
