//! Two-stage training on a tiny synthetic set until the model memorizes it:
//! warm-up on masked prediction, then sparse fine-tuning on the dialog loss.
//!
//! ```bash
//! cargo run --release --example train_overfit
//! ```

use graphdial::data::{generate_toy_dataset, prepare_dataset, ToyConfig};
use graphdial::model::{Model, ModelConfig, ModelSpec, Vocabulary};
use graphdial::train::{evaluate, train, StageConfig};

fn main() -> graphdial::Result<()> {
    let dataset = generate_toy_dataset(&ToyConfig {
        dialogs: 8,
        rounds: 2,
        candidates: 6,
        seed: 42,
        ..ToyConfig::default()
    });
    let spec = ModelSpec {
        config: ModelConfig::toy(),
        vocab: Vocabulary::build(dataset.texts()),
    };
    let mut model = Model::new(spec.clone(), 42)?;
    let data = prepare_dataset(dataset, &spec)?;
    println!(
        "model: {} tensors / {} scalars; data: {} rounds",
        model.store.len(),
        model.store.scalar_count(),
        data.items.len()
    );

    let warm_cfg = StageConfig {
        max_steps: Some(200),
        batch_size: 16,
        seed: 3,
        backbone_lr_max: 1e-3,
        backbone_lr_min: 1e-4,
        gnn_lr_max: 1e-3,
        gnn_lr_min: 1e-4,
        ..StageConfig::warmup_defaults()
    };
    let warm_log = train(&mut model, &data, &warm_cfg)?;
    let first = warm_log.losses.first().unwrap();
    let last = warm_log.losses.last().unwrap();
    println!(
        "warm-up: {} steps, total loss {:.3} -> {:.3} (mlm {:.3} -> {:.3}, edge heads {:.3} -> {:.3})",
        warm_log.losses.len(),
        first.total,
        last.total,
        first.mlm,
        last.mlm,
        first.gem_i + first.gem_q + first.gem_h,
        last.gem_i + last.gem_q + last.gem_h,
    );

    let sparse_cfg = StageConfig {
        max_steps: Some(500),
        batch_size: 16,
        seed: 7,
        backbone_lr_max: 3e-3,
        backbone_lr_min: 3e-4,
        gnn_lr_max: 3e-3,
        gnn_lr_min: 3e-4,
        ..StageConfig::sparse_defaults()
    };
    let log = train(&mut model, &data, &sparse_cfg)?;
    for (i, row) in log.losses.iter().enumerate() {
        if i % 100 == 0 || i + 1 == log.losses.len() {
            println!(
                "sparse step {:3}: total {:.4} (nsp {:.4}, mlm {:.4})",
                row.step, row.total, row.nsp, row.mlm
            );
        }
    }

    let out = evaluate(&model, &data, 6, false)?;
    println!(
        "\ntraining-set metrics: R@1 {:.3}, MRR {:.3}, mean rank {:.2}, NDCG {:?}",
        out.report.r1, out.report.mrr, out.report.mean, out.report.ndcg
    );
    Ok(())
}
