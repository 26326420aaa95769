//! End-to-end acceptance checks. Runs every criterion in sequence, prints one
//! PASS/FAIL line per criterion, and fails if any criterion failed.
//!
//! The overfit and generalization experiments train ResNet23 for real and take
//! tens of minutes on one core.

use std::time::Instant;

use mpdcnn::arch::{audit, count_parameters, NetworkSpec};
use mpdcnn::data::split::split;
use mpdcnn::data::synth::{generate_synthetic, SynthConfig};
use mpdcnn::data::{augment::AugmentConfig, Mask, NUM_CLASSES};
use mpdcnn::eval::{argmax_masks, evaluate, evaluate_network, fuse, FusionConfig, Thresholds};
use mpdcnn::gradcheck::{run_suite, DEFAULT_TRIALS, TOLERANCE};
use mpdcnn::layers::{conv2d, maxpool2, ConvParams};
use mpdcnn::train::{Schedule, TrainConfig, Trainer};
use mpdcnn::{build_network, par, save_checkpoint, Arch, Checkpoint, CheckpointError, Error, RngState, Role, Tensor};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn main() {
    // every timing below is single-threaded
    par::configure_threads(Some(1));
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradient suite", gradient_suite),
        ("oracle equivalence", oracle_equivalence),
        ("architecture audit", architecture_audit),
        ("overfit experiment", overfit_experiment),
        ("generalization smoke", generalization_smoke),
        ("fusion properties", fusion_properties),
        ("schedule and config fidelity", schedule_and_config),
        ("checkpoint round trip", checkpoint_round_trip),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = run();
        let verdict = if o.passed { "PASS" } else { "FAIL" };
        println!(
            "criterion {} {name}: {verdict} ({}; {:.1}s)",
            i + 1,
            o.detail,
            start.elapsed().as_secs_f64()
        );
        if !o.passed {
            failed.push(*name);
        }
    }
    if !failed.is_empty() {
        eprintln!("failed: {failed:?}");
        std::process::exit(1);
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let reports = run_suite(DEFAULT_TRIALS, 2024).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let mut parts = Vec::new();
    for r in &reports {
        println!("  {:<22} trials {} max rel error {:.2e}", r.op.name(), r.trials, r.max_rel_error);
        parts.push(format!("{} {:.1e}", r.op.name(), r.max_rel_error));
    }
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    outcome(
        reports.len() == 8 && reports.iter().all(|r| r.trials == 100) && worst < TOLERANCE && secs < 300.0,
        format!("worst {worst:.2e} < {TOLERANCE:e}, {secs:.1}s < 300s"),
    )
}

fn naive_conv(x: &Tensor<f32>, w: &Tensor<f32>, b: &Tensor<f32>) -> Vec<f64> {
    let [n, c, h, wd] = x.shape()[..] else { unreachable!() };
    let [o, _, kh, kw] = w.shape()[..] else { unreachable!() };
    let (xd, wt) = (x.data(), w.data());
    let mut out = vec![0.0f64; n * o * h * wd];
    for s in 0..n {
        for oc in 0..o {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b.data()[oc] as f64;
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = y as isize + ky as isize - (kh / 2) as isize;
                                let ix = xx as isize + kx as isize - (kw / 2) as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = xd[((s * c + ic) * h + iy as usize) * wd + ix as usize] as f64;
                                acc += wt[((oc * c + ic) * kh + ky) * kw + kx] as f64 * xv;
                            }
                        }
                    }
                    out[((s * o + oc) * h + y) * wd + xx] = acc;
                }
            }
        }
    }
    out
}

fn oracle_equivalence() -> Outcome {
    let root = RngState::new(77);
    let mut conv_err = 0.0f64;
    let mut pool_ok = true;
    let mut eval_ok = true;
    for t in 0..50u64 {
        let mut rng = root.split(t);
        let (n, c, o) = (1 + rng.below(3), 1 + rng.below(4), 1 + rng.below(4));
        let (h, w) = (2 * (1 + rng.below(5)), 2 * (1 + rng.below(5)));
        let k = [1, 3, 5][rng.below(3)];
        let x = Tensor::<f32>::from_fn(&[n, c, h, w], |_| rng.standard_normal() as f32).unwrap();
        let wt = Tensor::<f32>::from_fn(&[o, c, k, k], |_| 0.3 * rng.standard_normal() as f32).unwrap();
        let b = Tensor::<f32>::from_fn(&[o], |_| rng.standard_normal() as f32).unwrap();
        let got = conv2d(&x, &ConvParams::new(wt.clone(), b.clone()).unwrap()).unwrap();
        for (g, want) in got.data().iter().zip(naive_conv(&x, &wt, &b)) {
            conv_err = conv_err.max((*g as f64 - want).abs());
        }

        let (pooled, _) = maxpool2(&x).unwrap();
        let (oh, ow) = (h / 2, w / 2);
        for s in 0..n * c {
            for y in 0..oh {
                for xx in 0..ow {
                    let at = |dy: usize, dx: usize| x.data()[(s * h + 2 * y + dy) * w + 2 * xx + dx];
                    let m = at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1));
                    pool_ok &= pooled.data()[(s * oh + y) * ow + xx] == m;
                }
            }
        }

        let classes = 2 + rng.below(6);
        let masks = |rng: &mut RngState| -> Vec<Mask> {
            (0..n)
                .map(|_| Mask::new(h, w, (0..h * w).map(|_| rng.below(classes) as u8).collect()).unwrap())
                .collect()
        };
        let (truth, pred) = (masks(&mut rng), masks(&mut rng));
        let report = evaluate(&pred, &truth, classes).unwrap();
        let mut counts = vec![vec![0u64; classes]; classes];
        for (t, p) in truth.iter().zip(&pred) {
            for i in 0..h * w {
                counts[t.data[i] as usize][p.data[i] as usize] += 1;
            }
        }
        let total: u64 = counts.iter().flatten().sum();
        let hits: u64 = (0..classes).map(|c| counts[c][c]).sum();
        eval_ok &= report.counts == counts && report.pixels == total && report.overall_accuracy == hits as f64 / total as f64;
        for c in 0..classes {
            let row: u64 = counts[c].iter().sum();
            let want = (row > 0).then(|| counts[c][c] as f64 / row as f64);
            eval_ok &= report.per_class_accuracy[c] == want;
        }
    }
    outcome(
        conv_err < 1e-5 && pool_ok && eval_ok,
        format!("conv2d max abs err {conv_err:.2e} < 1e-5, maxpool2 exact {pool_ok}, evaluate exact {eval_ok}, 50 trials each"),
    )
}

/// Parameter totals worked out by hand from the published layer table: conv
/// `k*k*in*out` weights + `out` biases + `2*out` batch-norm scale/shift, dense
/// `in*out + out`. The first dense layer sees all three scales' trunk outputs.
fn hand_count(arch: Arch, role: Role) -> usize {
    let classes = role.num_classes();
    let conv = |k: usize, i: usize, o: usize| k * k * i * o + o + 2 * o;
    let dense = |i: usize, o: usize| i * o + o;
    match arch {
        Arch::Vgg19Reduced => {
            conv(3, 3, 64)
                + conv(3, 64, 64)
                + conv(3, 64, 128)
                + conv(3, 128, 128)
                + conv(3, 128, 256)
                + 3 * conv(3, 256, 256)
                + dense(3 * 256, 1024)
                + dense(1024, 1024)
                + dense(1024, 256)
                + dense(256, classes)
        }
        Arch::Resnet23 => {
            conv(7, 3, 32)
                + 2 * conv(7, 32, 32)
                + conv(3, 32, 64)
                + 5 * conv(3, 64, 64)
                + conv(3, 64, 128)
                + 11 * conv(3, 128, 128)
                + dense(3 * 128, 1024)
                + dense(1024, classes)
        }
        Arch::Custom => unreachable!(),
    }
}

fn architecture_audit() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for arch in [Arch::Vgg19Reduced, Arch::Resnet23] {
        for role in [Role::Segmenter, Role::Classifier] {
            let net = build_network(arch, role, 0).unwrap();
            let spec = NetworkSpec::new(arch, role);
            let hand = hand_count(arch, role);
            let counted = count_parameters(&spec).total;
            let a = audit(&spec).unwrap();
            println!(
                "  {arch} {role}: engine {} hand {hand} published {} delta {:+}",
                net.parameter_count(),
                a.published,
                a.delta
            );
            for (group, amount) in &a.attribution {
                println!("    {group}: {amount:+}");
            }
            println!(
                "    best convention: {}; residual {:+} ({:.4}%)",
                a.best_convention.describe(),
                a.residual,
                100.0 * a.residual_fraction
            );
            ok &= net.parameter_count() == hand && counted == hand && a.residual_fraction < 0.05;
            parts.push(format!("{arch}/{role} {:+} residual {:.3}%", a.delta, 100.0 * a.residual_fraction));
        }
    }
    outcome(ok, format!("totals match hand count; {}", parts.join(", ")))
}

/// The overfit configuration: step decay with momentum, no augmentation.
fn overfit_run() -> (Vec<u64>, f64, f64) {
    let data = generate_synthetic(8, &SynthConfig::with_size(96), 7).unwrap();
    let net = build_network(Arch::Resnet23, Role::Classifier, 1).unwrap();
    let cfg = TrainConfig {
        schedule: Schedule::from_pairs(&[(100, 0.01), (60, 0.001), (40, 0.0001)], 5),
        momentum: 0.9,
        eval_every: 0,
        augment: AugmentConfig::disabled(),
        ..Default::default()
    };
    let start = Instant::now();
    let mut t = Trainer::new(net, &data, cfg, RngState::new(11)).unwrap();
    let history = t.fit(&data, &[], None, |_| {}).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let last = history.last().unwrap();
    assert_eq!(history.len(), 200);
    let losses = history.iter().map(|m| m.loss.to_bits()).collect();
    (losses, last.train_accuracy.unwrap(), secs)
}

fn overfit_experiment() -> Outcome {
    let (a, acc_a, secs_a) = overfit_run();
    let (b, acc_b, secs_b) = overfit_run();
    let same = a == b && acc_a == acc_b;
    outcome(
        acc_a >= 0.98 && secs_a < 1800.0 && secs_b < 1800.0 && same,
        format!("train accuracy {acc_a:.4} >= 0.98, runs {secs_a:.0}s and {secs_b:.0}s < 1800s, loss logs bitwise equal {same}"),
    )
}

fn generalization_smoke() -> Outcome {
    let data = generate_synthetic(200, &SynthConfig::with_size(48), 5).unwrap();
    let ids: Vec<String> = data.iter().map(|s| s.id.clone()).collect();
    let manifest = split(&ids, 0);
    let pick = |want: &[String]| data.iter().filter(|s| want.contains(&s.id)).cloned().collect::<Vec<_>>();
    let (train, test) = (pick(&manifest.train), pick(&manifest.test));
    let cfg = TrainConfig {
        schedule: Schedule::from_pairs(&[(20, 0.01), (12, 0.001), (8, 0.0001)], 5),
        momentum: 0.9,
        class_balance: false,
        eval_every: 0,
        ..Default::default()
    };
    let net = build_network(Arch::Resnet23, Role::Classifier, 1).unwrap();
    let mut t = Trainer::new(net, &train, cfg, RngState::new(2)).unwrap();
    t.fit(&train, &[], None, |_| {}).unwrap();
    let r = evaluate_network(t.network(), t.normalization(), &test).unwrap();
    let per_class: Vec<f64> = r.per_class_accuracy.iter().map(|a| a.unwrap_or(f64::NAN)).collect();
    let worst = per_class.iter().copied().fold(f64::INFINITY, f64::min);
    outcome(
        train.len() == 160 && test.len() == 40 && r.overall_accuracy >= 0.85 && worst >= 0.60,
        format!(
            "test overall {:.4} >= 0.85, per class {:?} (min {worst:.3} >= 0.60)",
            r.overall_accuracy,
            per_class.iter().map(|a| (a * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        ),
    )
}

/// Random `(1, C, 25, 40)` probability field: softmax of scaled normal logits.
fn field(rng: &mut RngState, classes: usize) -> Tensor<f32> {
    let hw = 1000;
    let spread = rng.uniform(0.5, 4.0);
    let logits: Vec<f64> = (0..classes * hw).map(|_| spread * rng.standard_normal()).collect();
    let mut probs = vec![0.0f32; classes * hw];
    for p in 0..hw {
        let z: f64 = (0..classes).map(|c| logits[c * hw + p].exp()).sum();
        for c in 0..classes {
            probs[c * hw + p] = (logits[c * hw + p].exp() / z) as f32;
        }
    }
    Tensor::new(vec![1, classes, 25, 40], probs).unwrap()
}

fn fusion_properties() -> Outcome {
    let root = RngState::new(404);
    let hw = 1000;
    let (mut veto, mut qualify, mut monotone, mut degenerate, mut rule) = (true, true, true, true, true);
    for t in 0..100u64 {
        let mut rng = root.split(t);
        let cls = field(&mut rng, NUM_CLASSES);
        let seg = field(&mut rng, 2);
        let cfg = FusionConfig {
            thresholds: Thresholds::from_array(std::array::from_fn(|_| rng.uniform(0.0, 0.6))),
            segmenter_threshold: rng.uniform(0.2, 0.8),
        };
        let tau = cfg.thresholds.as_array();
        let fused = fuse(&cls, &seg, &cfg).unwrap().remove(0);
        let p = |c: usize, i: usize| cls.data()[c * hw + i] as f64;
        let damage = |i: usize| seg.data()[hw + i] as f64;
        for i in 0..hw {
            let out = fused.data[i] as usize;
            veto &= damage(i) >= cfg.segmenter_threshold || out == 0;
            qualify &= out == 0 || (p(out, i) >= tau[out - 1] && damage(i) >= cfg.segmenter_threshold);
            // independent statement of the rule
            let mut want = 0;
            if damage(i) >= cfg.segmenter_threshold {
                for c in 1..NUM_CLASSES {
                    if p(c, i) >= tau[c - 1] && (want == 0 || p(c, i) > p(want, i)) {
                        want = c;
                    }
                }
            }
            rule &= out == want;
        }

        let raised = FusionConfig {
            thresholds: Thresholds::from_array(tau.map(|v| (v + rng.uniform(0.0, 0.4)).min(1.0))),
            ..cfg.clone()
        };
        let shrunk = fuse(&cls, &seg, &raised).unwrap().remove(0);
        monotone &= (0..hw).all(|i| shrunk.data[i] == 0 || fused.data[i] != 0);

        // all damage, zero thresholds: the classifier's choice among the damage classes
        let all_damage = Tensor::from_fn(&[1, 2, 25, 40], |i| if i < hw { 0.0f32 } else { 1.0 }).unwrap();
        let open = FusionConfig {
            thresholds: Thresholds::uniform(0.0),
            segmenter_threshold: 0.5,
        };
        let free = fuse(&cls, &all_damage, &open).unwrap().remove(0);
        let damage_only = Tensor::new(vec![1, 6, 25, 40], cls.data()[hw..].to_vec()).unwrap();
        let argmax = argmax_masks(&damage_only).unwrap().remove(0);
        degenerate &= (0..hw).all(|i| free.data[i] == argmax.data[i] + 1);
        let full = argmax_masks(&cls).unwrap().remove(0);
        degenerate &= (0..hw).all(|i| full.data[i] == 0 || free.data[i] == full.data[i]);
    }
    outcome(
        veto && qualify && monotone && degenerate && rule,
        format!(
            "veto {veto}, qualification {qualify}, monotonicity {monotone}, degeneration to argmax {degenerate}, rule {rule}; 1000 pixels x 100 trials"
        ),
    )
}

fn schedule_and_config() -> Outcome {
    let s = Schedule::default();
    let rates = [0, 70, 120, 145].map(|e| s.lr_at(e));
    let exact = rates == [1e-3, 1e-4, 1e-5, 1e-6]
        && s.lr_at(69) == 1e-3
        && s.lr_at(119) == 1e-4
        && s.lr_at(144) == 1e-5
        && s.lr_at(159) == 1e-6
        && s.total_epochs() == 160
        && s.batch_size == 5;
    let thresholds = FusionConfig::default().thresholds.as_array() == [0.1, 0.4, 0.1, 0.5, 0.1, 0.5];
    let cfg = mpdcnn::config::RunConfig::from_json("{}").unwrap();
    let mut decay = cfg.lambda() == 0.0001;
    for (arch, want) in [(Arch::Vgg19Reduced, 0.0005), (Arch::Resnet23, 0.0001)] {
        for role in [Role::Segmenter, Role::Classifier] {
            decay &= NetworkSpec::new(arch, role).weight_decay == want && arch.default_weight_decay() == want;
        }
        let mut c = cfg.clone();
        c.model.arch = arch;
        decay &= c.lambda() == want;
    }
    outcome(
        exact && thresholds && decay,
        format!("rates {rates:?}, thresholds {thresholds}, decay per architecture {decay}"),
    )
}

fn checkpoint_round_trip() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = RngState::new(8);
    let mut net = build_network(Arch::Resnet23, Role::Classifier, 6).unwrap();
    for b in &mut net.convs {
        for v in b.bn.running_mean.data_mut() {
            *v = 0.1 * rng.standard_normal() as f32;
        }
        for v in b.bn.running_var.data_mut() {
            *v = rng.uniform(0.5, 2.0) as f32;
        }
    }
    let mut ckpt = Checkpoint::fresh(net);
    ckpt.epoch = 17;
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &ckpt).unwrap();
    let back = mpdcnn::load_checkpoint(&path).unwrap();
    let x = Tensor::<f32>::from_fn(&[1, 3, 32, 32], |_| rng.standard_normal() as f32).unwrap();
    let (a, b) = (ckpt.network.forward(&x).unwrap(), back.network.forward(&x).unwrap());
    let identical = a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()) && back.epoch == 17;

    let bytes = std::fs::read(&path).unwrap();
    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"XXXX");
    let bad_path = dir.path().join("bad.ckpt");
    std::fs::write(&bad_path, &bad).unwrap();
    let magic = matches!(
        mpdcnn::load_checkpoint(&bad_path),
        Err(Error::Checkpoint(CheckpointError::BadMagic { .. }))
    );
    let mut truncated = true;
    for cut in [6, 40, bytes.len() / 2, bytes.len() - 1] {
        std::fs::write(&bad_path, &bytes[..cut]).unwrap();
        truncated &= matches!(
            mpdcnn::load_checkpoint(&bad_path),
            Err(Error::Checkpoint(CheckpointError::Truncated { .. }))
        );
    }
    outcome(
        identical && magic && truncated,
        format!("0-ulp inference after reload {identical}, bad magic rejected {magic}, truncations rejected {truncated}"),
    )
}
