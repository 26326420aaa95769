//! Train on 80% of a synthetic set and score the held-out 20%.
//!
//! `cargo run --release --example generalize -- [samples] [size] [epochs] [lr] [augment] [balance]`

use mpdcnn::data::augment::AugmentConfig;
use mpdcnn::data::split::split;
use mpdcnn::data::synth::{generate_synthetic, SynthConfig};
use mpdcnn::eval::evaluate_network;
use mpdcnn::train::{Schedule, TrainConfig, Trainer};
use mpdcnn::{build_network, Arch, RngState, Role};

fn main() -> mpdcnn::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: &str| args.get(i).cloned().unwrap_or_else(|| d.to_string());
    let n: usize = arg(0, "200").parse().unwrap();
    let size: usize = arg(1, "48").parse().unwrap();
    let epochs: usize = arg(2, "40").parse().unwrap();
    let lr: f64 = arg(3, "0.01").parse().unwrap();
    let augment = arg(4, "1") == "1";
    let class_balance = arg(5, "1") == "1";

    let data = generate_synthetic(n, &SynthConfig::with_size(size), 5)?;
    let ids: Vec<String> = data.iter().map(|s| s.id.clone()).collect();
    let manifest = split(&ids, 0);
    let pick = |want: &[String]| data.iter().filter(|s| want.contains(&s.id)).cloned().collect::<Vec<_>>();
    let (train, test) = (pick(&manifest.train), pick(&manifest.test));

    let cfg = TrainConfig {
        schedule: Schedule::from_pairs(&[(epochs / 2, lr), (epochs * 3 / 10, lr / 10.0), (epochs - epochs / 2 - epochs * 3 / 10, lr / 100.0)], 5),
        momentum: 0.9,
        class_balance,
        eval_every: 10,
        augment: if augment { AugmentConfig::default() } else { AugmentConfig::disabled() },
        ..Default::default()
    };
    let net = build_network(Arch::Resnet23, Role::Classifier, 1)?;
    let mut t = Trainer::new(net, &train, cfg, RngState::new(2))?;
    let start = std::time::Instant::now();
    t.fit(&train, &test, None, |m| {
        println!(
            "{:3} loss {:.4} batch {:.4} train {:?} test {:?} {:.0}s",
            m.epoch,
            m.loss,
            m.batch_accuracy,
            m.train_accuracy,
            m.held_out_accuracy,
            start.elapsed().as_secs_f64()
        )
    })?;
    let r = evaluate_network(t.network(), t.normalization(), &test)?;
    println!("overall {:.4} per class {:?}", r.overall_accuracy, r.per_class_accuracy);
    Ok(())
}
