//! Train the full model and one ablated variant with a shared seed, then
//! print the side-by-side metric comparison.
//!
//! ```bash
//! cargo run --release --example ablation_compare
//! ```

use graphdial::data::{generate_toy_dataset, prepare_dataset, ToyConfig};
use graphdial::model::{ModelConfig, ModelSpec, Vocabulary};
use graphdial::train::{run_ablation, AblationKind, StageConfig};

fn main() -> graphdial::Result<()> {
    let dataset = generate_toy_dataset(&ToyConfig {
        dialogs: 8,
        rounds: 2,
        candidates: 5,
        seed: 31,
        ..ToyConfig::default()
    });
    let spec = ModelSpec {
        config: ModelConfig::toy(),
        vocab: Vocabulary::build(dataset.texts()),
    };
    let data = prepare_dataset(dataset, &spec)?;

    let warmup_cfg = StageConfig {
        max_steps: Some(80),
        batch_size: 16,
        seed: 5,
        backbone_lr_max: 1e-3,
        backbone_lr_min: 1e-4,
        gnn_lr_max: 1e-3,
        gnn_lr_min: 1e-4,
        ..StageConfig::warmup_defaults()
    };
    let sparse_cfg = StageConfig {
        max_steps: Some(200),
        batch_size: 16,
        seed: 5,
        backbone_lr_max: 3e-3,
        backbone_lr_min: 3e-4,
        gnn_lr_max: 3e-3,
        gnn_lr_min: 3e-4,
        ..StageConfig::sparse_defaults()
    };

    for kind in [
        AblationKind::Lambda0,
        AblationKind::NoWarmup,
        AblationKind::NoSharing,
        AblationKind::NoHub,
    ] {
        let report = run_ablation(kind, &spec, &data, &warmup_cfg, &sparse_cfg, 5, 5)?;
        println!(
            "{:10}  full MRR {:.3} R@1 {:.3}   ablated MRR {:.3} R@1 {:.3}",
            report.name, report.full.mrr, report.full.r1, report.ablated.mrr, report.ablated.r1
        );
    }
    Ok(())
}
