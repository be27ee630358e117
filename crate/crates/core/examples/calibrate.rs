// Calibration driver for the desk-scale trend experiments.

use sscf_core::backbone::BackboneConfig;
use sscf_core::fewshot::{self, Dataset, EvalOptions, NoiseSpec, Partition, SplitSpec, TrainConfig};
use sscf_core::losses::LossConfig;
use sscf_core::model::{ModelConfig, SscfModel};
use sscf_core::rng::Rng;

struct Trim {
    divisor: usize,
    timesteps: usize,
    episodes: usize,
    n: usize,
    q: usize,
    lr: f64,
    lambda: f64,
    use_sfe: bool,
    use_cfc: bool,
}

impl Default for Trim {
    fn default() -> Self {
        Trim { divisor: 16, timesteps: 2, episodes: 400, n: 5, q: 3, lr: 0.05, lambda: 0.7, use_sfe: true, use_cfc: true }
    }
}

fn dataset(_seed: u64) -> Dataset {
    fewshot::make_synthetic_glyphs(40, 20, 32, &mut Rng::new(42).derive(0x5059_4e47)).unwrap()
}

fn train_model(t: &Trim, seed: u64, ds: &Dataset, split: &SplitSpec) -> SscfModel {
    let config = ModelConfig {
        backbone: BackboneConfig::vggsnn(t.timesteps, 1, t.divisor),
        input_hw: (32, 32),
        use_sfe: t.use_sfe,
        use_cfc: t.use_cfc,
        compact_channels: 64.min(64 / (t.divisor / 8).max(1)),
        refine_channels: 16,
        attention_gamma: 5.0,
        head_classes: 30,
    };
    let mut model = SscfModel::new(config, seed).unwrap();
    let cfg = TrainConfig {
        n_way: t.n, k_shot: 1, q_queries: t.q,
        episodes: t.episodes,
        lr: t.lr, momentum: 0.9, cosine_decay: true,
        loss: LossConfig { lambda: t.lambda, tau_c: 0.2, num_classes_train: 30 },
        seed, train_noise: None, log_every: 0,
    };
    let mut sink = fewshot::MetricsSink::default();
    fewshot::train(&mut model, ds, split, &cfg, &mut sink).unwrap();
    model
}

fn eval_acc(model: &SscfModel, ds: &Dataset, split: &SplitSpec, noise: f64, seed: u64, episodes: usize, k: usize) -> f64 {
    let noise = if noise > 0.0 { Some(NoiseSpec { rate: noise }) } else { None };
    fewshot::evaluate(model, ds, split, 5, k, 3, episodes, EvalOptions {
        partition: Partition::Test, noise, noise_on_support: true, seed, threads: 1,
    }).unwrap().mean_accuracy
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let what = args.get(1).map(|s| s.as_str()).unwrap_or("base");
    let seeds: Vec<u64> = vec![11, 22, 33];
    let ds = dataset(1);
    let split = SplitSpec::by_count(&ds, 30, 0, 10).unwrap();
    match what {
        "base" => {
            for &s in &seeds {
                let t0 = std::time::Instant::now();
                let m = train_model(&Trim::default(), s, &ds, &split);
                let acc = eval_acc(&m, &ds, &split, 0.0, s, 100, 1);
                println!("seed {s}: 5w1s acc {acc:.3} (train {:?})", t0.elapsed());
            }
        }
        "lprobe" => {
            let episodes: usize = std::env::args().nth(2).and_then(|v| v.parse().ok()).unwrap_or(400);
            let n: usize = std::env::args().nth(3).and_then(|v| v.parse().ok()).unwrap_or(5);
            for lam in [0.2, 0.7, 1.0] {
                let mut accs = Vec::new();
                for &s in &seeds {
                    let m = train_model(&Trim { lambda: lam, episodes, n, ..Default::default() }, s ^ 0xABC, &ds, &split);
                    accs.push(eval_acc(&m, &ds, &split, 0.0, s, 100, 1));
                }
                let mean: f64 = accs.iter().sum::<f64>() / accs.len() as f64;
                println!("lambda {lam} (episodes {episodes}, {n}-way train): mean {mean:.3} {accs:?}");
            }
        }
        "lambda" => {
            for lam in [0.2, 0.4, 0.6, 0.7, 0.8, 1.0] {
                let mut accs = Vec::new();
                for &s in &seeds {
                    let m = train_model(&Trim { lambda: lam, ..Default::default() }, s ^ 0xABC, &ds, &split);
                    accs.push(eval_acc(&m, &ds, &split, 0.0, s, 100, 1));
                }
                let mean: f64 = accs.iter().sum::<f64>() / accs.len() as f64;
                println!("lambda {lam}: mean {mean:.3} {accs:?}");
            }
        }
        "noise" => {
            for lam in [0.7, 1.0] {
                for &s in &seeds {
                    let m = train_model(&Trim { lambda: lam, ..Default::default() }, s ^ 0xBCD, &ds, &split);
                    let a0 = eval_acc(&m, &ds, &split, 0.0, s, 100, 1);
                    let a4 = eval_acc(&m, &ds, &split, 0.4, s, 100, 1);
                    let a8 = eval_acc(&m, &ds, &split, 0.8, s, 100, 1);
                    println!("lambda {lam} seed {s}: 0.0 -> {a0:.3}, 0.4 -> {a4:.3}, 0.8 -> {a8:.3}");
                }
            }
        }
        "tsweep" => {
            for t in [4usize, 8, 12] {
                let mut accs = Vec::new();
                for &s in &seeds {
                    let trim = Trim { timesteps: t, episodes: 250, ..Default::default() };
                    let m = train_model(&trim, s ^ 0xCDE, &ds, &split);
                    accs.push(eval_acc(&m, &ds, &split, 0.0, s, 100, 1));
                }
                let mean: f64 = accs.iter().sum::<f64>() / accs.len() as f64;
                println!("T {t}: mean {mean:.3} {accs:?}");
            }
        }
        "ablate" => {
            for (name, use_sfe, use_cfc) in [("full", true, true), ("no-sfe", false, true), ("no-cfc", true, false)] {
                let mut accs = Vec::new();
                for &s in &seeds {
                    let m = train_model(&Trim { use_sfe, use_cfc, ..Default::default() }, s ^ 0xDEF, &ds, &split);
                    accs.push(eval_acc(&m, &ds, &split, 0.0, s, 100, 1));
                }
                let mean: f64 = accs.iter().sum::<f64>() / accs.len() as f64;
                println!("{name}: mean {mean:.3} {accs:?}");
            }
        }
        other => eprintln!("unknown calibration {other}"),
    }
}
