use sscf_core::backbone::BackboneConfig;
use sscf_core::fewshot::{self, SplitSpec};
use sscf_core::losses::LossConfig;
use sscf_core::model::{ModelConfig, SscfModel};
use sscf_core::rng::Rng;
use sscf_core::tensor::BnMode;

fn main() {
    let t0 = std::time::Instant::now();
    let dataset = fewshot::make_synthetic_glyphs(40, 20, 32, &mut Rng::new(1)).unwrap();
    println!("glyphs: {:?}", t0.elapsed());
    let split = SplitSpec::by_count(&dataset, 30, 0, 10).unwrap();
    let config = ModelConfig {
        backbone: BackboneConfig::vggsnn(4, 1, 8),
        input_hw: (32, 32),
        use_sfe: true,
        use_cfc: true,
        compact_channels: 64,
        refine_channels: 16,
        attention_gamma: 5.0,
        head_classes: 30,
    };
    let mut model = SscfModel::new(config, 42).unwrap();
    let loss_cfg = LossConfig { lambda: 0.7, tau_c: 0.2, num_classes_train: 30 };
    let mut rng = Rng::new(2);
    // warm + timed episodes
    for i in 0..3 {
        let ep = fewshot::sample_episode(&dataset, &split.train, 5, 1, 5, &mut rng).unwrap();
        let t1 = std::time::Instant::now();
        let (total, tet, info, acc, upd) =
            fewshot::episode_losses(&model, &ep, &split, &loss_cfg, BnMode::Train).unwrap();
        let fwd_time = t1.elapsed();
        let t2 = std::time::Instant::now();
        model.zero_grad();
        sscf_core::tensor::backward(&total).unwrap();
        let bwd_time = t2.elapsed();
        model.sgd_step(0.05, 0.9);
        model.apply_bn_updates(upd);
        println!(
            "ep {i}: fwd {fwd_time:?} bwd {bwd_time:?} loss {:.4} (tet {:.4} info {:.4}) acc {acc:.2}",
            total.item(), tet, info
        );
    }
}
