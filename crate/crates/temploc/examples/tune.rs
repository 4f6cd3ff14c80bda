//! Scratch harness for sizing the synthetic benchmark: trains one model per
//! CLI arg combo and prints AR@100 / mAP@0.5 with timings.

use std::time::Instant;

use temploc::head::SoiConfig;
use temploc::metrics::{average_recall, mean_ap, EvalConfig, EvalDetection};
use temploc::pipeline::{evaluate_dataset, FusionMode, FusionModel, ModelConfig, TrainConfig};
use temploc::segments::Segment;
use temploc::spn::{SpnConfig, Variant};
use temploc::synth::{generate, SynthConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let hidden: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(16);
    let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let mode = args.get(3).map(|s| s.as_str()).unwrap_or("late");
    let variant = args.get(4).map(|s| s.as_str()).unwrap_or("multi-dilated");
    let context = args.get(5).map(|s| s.as_str()).unwrap_or("on") == "on";
    let seed: u64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(7);
    let lr: f64 = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(1e-4);

    let synth = SynthConfig::default();
    let t0 = Instant::now();
    let data = generate::<f32>(&synth).unwrap();
    println!("generate: {:.1}s", t0.elapsed().as_secs_f64());

    let config = ModelConfig {
        mode: FusionMode::parse(mode).unwrap(),
        spn: SpnConfig {
            hidden_width: hidden,
            variant: Variant::parse(variant).unwrap(),
            context,
            ..SpnConfig::default()
        },
        soi: SoiConfig {
            hidden_width: hidden,
            context,
            num_classes: synth.num_classes,
            ..SoiConfig::default()
        },
        d_per_stream: synth.num_channels,
    };
    let mut model = FusionModel::<f32>::new(config, seed).unwrap();
    let train_cfg = TrainConfig { steps, seed, learning_rate: lr, ..TrainConfig::default() };
    let t1 = Instant::now();
    let history = model.train(&data.train, &train_cfg).unwrap();
    let train_secs = t1.elapsed().as_secs_f64();
    let first: f64 = history[..20.min(history.len())]
        .iter()
        .map(|l| l.proposal + l.classification)
        .sum::<f64>()
        / 20.0f64.min(history.len() as f64);
    let last: f64 = history[history.len().saturating_sub(20)..]
        .iter()
        .map(|l| l.proposal + l.classification)
        .sum::<f64>()
        / 20.0f64.min(history.len() as f64);
    println!("train {steps} steps: {train_secs:.1}s ({:.0}ms/step), loss {first:.3} -> {last:.3}",
        1000.0 * train_secs / steps as f64);

    let eval_cfg = EvalConfig::default();
    let t2 = Instant::now();
    let report = evaluate_dataset(&model, &data.test, &eval_cfg).unwrap();
    println!("eval: {:.1}s", t2.elapsed().as_secs_f64());

    let gts: Vec<Vec<Segment>> =
        data.test.iter().map(|v| v.annotations.iter().map(|(s, _)| *s).collect()).collect();
    let gtc: Vec<Vec<(Segment, usize)>> = data.test.iter().map(|v| v.annotations.clone()).collect();
    let flat: Vec<EvalDetection> = report
        .detections
        .iter()
        .enumerate()
        .flat_map(|(vi, dets)| {
            dets.iter().map(move |d| EvalDetection {
                video: vi,
                segment: d.segment,
                class_label: d.class_label,
                score: d.score,
            })
        })
        .collect();
    for an in [50, 100] {
        println!("AR@{an} = {:.4}", average_recall(&report.proposals, &gts, an, &eval_cfg));
    }
    for thr in [0.1, 0.3, 0.5, 0.7] {
        println!("mAP@{thr} = {:.4}", mean_ap(&flat, &gtc, thr));
    }
    for class in 1..=synth.num_classes {
        println!(
            "AP@0.5 class {class} = {:.4}",
            temploc::metrics::average_precision(&flat, &gtc, class, 0.5)
        );
    }
    let n_det: usize = report.detections.iter().map(|d| d.len()).sum();
    println!("detections: {n_det} over {} videos", data.test.len());
    println!("total: {:.1}s", t0.elapsed().as_secs_f64());
}
