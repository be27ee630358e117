use sscf_core::backbone::BackboneConfig;
use sscf_core::fewshot::{self, EvalOptions, SplitSpec, TrainConfig};
use sscf_core::losses::LossConfig;
use sscf_core::model::{ModelConfig, SscfModel};
use sscf_core::rng::Rng;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let episodes: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(400);
    let dataset = fewshot::make_synthetic_glyphs(40, 20, 32, &mut Rng::new(42).derive(0x5059_4e47)).unwrap();
    let split = SplitSpec::by_count(&dataset, 30, 0, 10).unwrap();
    let config = ModelConfig {
        backbone: BackboneConfig::vggsnn(2, 1, 8),
        input_hw: (32, 32),
        use_sfe: true,
        use_cfc: true,
        compact_channels: 64,
        refine_channels: 16,
        attention_gamma: 5.0,
        head_classes: 30,
    };
    let mut model = SscfModel::new(config, 42).unwrap();
    let train_cfg = TrainConfig {
        n_way: 5, k_shot: 1, q_queries: 5,
        episodes,
        lr: 0.05, momentum: 0.9, cosine_decay: true,
        loss: LossConfig { lambda: 0.7, tau_c: 0.2, num_classes_train: 30 },
        seed: 42, train_noise: None, log_every: 0,
    };
    let t0 = std::time::Instant::now();
    let mut sink = fewshot::MetricsSink::default();
    let out = fewshot::train(&mut model, &dataset, &split, &train_cfg, &mut sink).unwrap();
    let train_time = t0.elapsed();
    let tail: f64 = out.records.iter().rev().take(50).map(|r| r.accuracy).sum::<f64>() / 50.0;
    let e1 = fewshot::evaluate(&model, &dataset, &split, 5, 1, 5, 100, EvalOptions { seed: 4242, ..Default::default() }).unwrap();
    let e5 = fewshot::evaluate(&model, &dataset, &split, 5, 5, 5, 100, EvalOptions { seed: 4242, ..Default::default() }).unwrap();
    println!("train {train_time:?} ({:.2} s/ep), tail train acc {tail:.3}", train_time.as_secs_f64() / episodes as f64);
    println!("test 5w1s {:.3} ± {:.3} | 5w5s {:.3} ± {:.3}", e1.mean_accuracy, e1.ci95, e5.mean_accuracy, e5.ci95);
}
