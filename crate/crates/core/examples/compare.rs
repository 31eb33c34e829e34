//! Baseline vs hardness-aware training on the synthetic benchmark.
//!
//! `cargo run --release -p hdml --example compare -- [triplet|npair] [seeds] [epochs]`

use std::time::Instant;

use hdml::data::synth_gaussian_dataset;
use hdml::metric::LossKind;
use hdml::train::{run_training, TrainConfig};

fn main() -> hdml::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let loss: LossKind = args.get(1).map_or("triplet", String::as_str).parse()?;
    let seeds: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(30);
    let mut sigma = 1.0;
    let mut overrides = Vec::new();
    for kv in args.iter().skip(4) {
        let (k, v) = kv.split_once('=').expect("key=value");
        if k == "sigma" {
            sigma = v.parse().expect("sigma");
        } else {
            overrides.push((k.to_string(), v.to_string()));
        }
    }
    for seed in 0..seeds {
        let data = synth_gaussian_dataset(20, 100, 64, 10.0, sigma, seed)?;
        let mut cfg = TrainConfig::for_loss(loss);
        cfg.seed = seed;
        cfg.split_seed = seed;
        cfg.epochs = epochs;
        for (k, v) in &overrides {
            match k.as_str() {
                "beta" => cfg.beta = v.parse().unwrap(),
                "alpha" => cfg.alpha = v.parse().unwrap(),
                "lr" => cfg.learning_rate = v.parse().unwrap(),
                "mult" => cfg.lr_multiplier = v.parse().unwrap(),
                "margin" => cfg.margin = v.parse().unwrap(),
                "syn_f" => cfg.syn_grad_to_extractor = v.parse().unwrap(),
                "n" => cfg.npair_n = v.parse().unwrap(),
                _ => panic!("unknown override {k}"),
            }
        }
        let mut base = cfg.clone();
        base.hdml = false;
        base.alpha = 0.0;
        let t = Instant::now();
        let b = run_training(&data, &base)?;
        let tb = t.elapsed();
        let t = Instant::now();
        let h = run_training(&data, &cfg)?;
        let th = t.elapsed();
        let (rb, rh) = (b.final_report.unwrap(), h.final_report.unwrap());
        let last = h.history.last().unwrap();
        println!(
            "seed {seed}: base R@1 {:.4} nmi {:.4} ({:.1?}) | hdml R@1 {:.4} nmi {:.4} ({:.1?}) w={:.3e} jgen={:.3} lambda={:.4} jm={:.4} jsyn={:.4}",
            rb.recall[&1], rb.nmi, tb, rh.recall[&1], rh.nmi, th, last.weight_w, last.j_gen, last.lambda_interp, last.j_m, last.j_syn
        );
    }
    Ok(())
}
