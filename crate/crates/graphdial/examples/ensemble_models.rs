//! Mean-score ensembling: train a few models with different seeds and
//! GNN depths, then average their candidate scores.
//!
//! ```bash
//! cargo run --release --example ensemble_models
//! ```

use graphdial::data::{generate_toy_dataset, prepare_dataset, ToyConfig};
use graphdial::model::{Model, ModelConfig, ModelSpec, Vocabulary};
use graphdial::train::{evaluate, evaluate_ensemble, train, StageConfig};

fn main() -> graphdial::Result<()> {
    let dataset = generate_toy_dataset(&ToyConfig {
        dialogs: 6,
        rounds: 2,
        candidates: 5,
        seed: 3,
        ..ToyConfig::default()
    });
    let vocab = Vocabulary::build(dataset.texts());

    // members vary in seed and in GNN depth K, as an ensemble would
    let mut members = Vec::new();
    let mut prepared = None;
    for (seed, k) in [(0u64, 1usize), (1, 2), (2, 1), (3, 2)] {
        let mut config = ModelConfig::toy();
        config.gnn_layers = k;
        let spec = ModelSpec {
            config,
            vocab: vocab.clone(),
        };
        let data = prepare_dataset(
            graphdial::data::Dataset {
                instances: dataset.instances.clone(),
            },
            &spec,
        )?;
        let mut model = Model::new(spec, seed)?;
        let cfg = StageConfig {
            max_steps: Some(120),
            batch_size: 8,
            seed,
            backbone_lr_max: 3e-3,
            backbone_lr_min: 3e-4,
            gnn_lr_max: 3e-3,
            gnn_lr_min: 3e-4,
            ..StageConfig::sparse_defaults()
        };
        train(&mut model, &data, &cfg)?;
        let solo = evaluate(&model, &data, 5, false)?.report;
        println!("member seed {seed} K={k}: MRR {:.3}, R@1 {:.3}", solo.mrr, solo.r1);
        members.push(model);
        prepared = Some(data);
    }

    let data = prepared.unwrap();
    let ensemble = evaluate_ensemble(&members, &data, 5)?;
    println!(
        "\n{}-model ensemble: MRR {:.3}, R@1 {:.3}, mean rank {:.2}",
        members.len(),
        ensemble.report.mrr,
        ensemble.report.r1,
        ensemble.report.mean
    );
    Ok(())
}
