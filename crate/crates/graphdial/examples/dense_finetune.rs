//! Dense fine-tuning after sparse training: one round per step with every
//! candidate scored jointly, optimized with either the normalized-relevance
//! cross-entropy or the ListNet top-one loss.
//!
//! ```bash
//! cargo run --release --example dense_finetune
//! ```

use graphdial::data::{generate_toy_dataset, prepare_dataset, ToyConfig};
use graphdial::model::{Model, ModelConfig, ModelSpec, Vocabulary};
use graphdial::train::{evaluate, train, DenseLossKind, StageConfig};

fn main() -> graphdial::Result<()> {
    let dataset = generate_toy_dataset(&ToyConfig {
        dialogs: 6,
        rounds: 2,
        candidates: 5,
        seed: 13,
        dense_fraction: 1.0, // every round annotated
        ..ToyConfig::default()
    });
    let spec = ModelSpec {
        config: ModelConfig::toy(),
        vocab: Vocabulary::build(dataset.texts()),
    };
    let data = prepare_dataset(dataset, &spec)?;

    let sparse_cfg = StageConfig {
        max_steps: Some(150),
        batch_size: 8,
        seed: 7,
        backbone_lr_max: 3e-3,
        backbone_lr_min: 3e-4,
        gnn_lr_max: 3e-3,
        gnn_lr_min: 3e-4,
        ..StageConfig::sparse_defaults()
    };

    for kind in [DenseLossKind::Ce, DenseLossKind::Listnet] {
        let mut model = Model::new(spec.clone(), 7)?;
        train(&mut model, &data, &sparse_cfg)?;
        let before = evaluate(&model, &data, 5, false)?.report;

        let dense_cfg = StageConfig {
            max_steps: Some(60),
            seed: 11,
            backbone_lr_max: 1e-3,
            backbone_lr_min: 1e-4,
            gnn_lr_max: 1e-3,
            gnn_lr_min: 1e-4,
            dense_loss: kind,
            ..StageConfig::dense_defaults()
        };
        let log = train(&mut model, &data, &dense_cfg)?;
        let after = evaluate(&model, &data, 5, false)?.report;
        println!(
            "{kind:?}: dense loss {:.4} -> {:.4}; NDCG {:.4} -> {:.4} (MRR {:.3} -> {:.3})",
            log.losses.first().unwrap().total,
            log.losses.last().unwrap().total,
            before.ndcg.unwrap(),
            after.ndcg.unwrap(),
            before.mrr,
            after.mrr,
        );
    }
    Ok(())
}
