//! One full forward pass: token layout, gather/cascade/fuse, dual-stream
//! layers, pooled ranking feature, and attention traces.
//!
//! ```bash
//! cargo run --example forward_pass
//! ```

use graphdial::data::{encode_candidate, generate_toy_dataset, prepare_dataset, ToyConfig};
use graphdial::model::{ForwardInputs, Model, ModelConfig, ModelSpec, Vocabulary};
use graphdial::objectives::nsp_score;
use graphdial::tensor::Tape;

fn main() -> graphdial::Result<()> {
    let dataset = generate_toy_dataset(&ToyConfig {
        dialogs: 1,
        rounds: 3,
        candidates: 6,
        seed: 17,
        ..ToyConfig::default()
    });
    let spec = ModelSpec {
        config: ModelConfig::toy(),
        vocab: Vocabulary::build(dataset.texts()),
    };
    let model = Model::new(spec.clone(), 1)?;
    let data = prepare_dataset(dataset, &spec)?;
    let prepared = &data.instances[0];
    let round = 3;
    let turn = &prepared.instance.rounds[round - 1];
    println!("caption:  {:?}", prepared.instance.caption);
    println!("question: {:?} (round {round})", turn.question);

    let enc = encode_candidate(&spec, prepared, round, turn.gt_index)?;
    println!(
        "layout: {} text tokens, question span {:?}, round separators {:?}",
        enc.layout.text_len(),
        enc.layout.question_span,
        enc.layout.idx_h(),
    );

    let tape = Tape::new();
    let out = model.forward(
        &tape,
        &ForwardInputs {
            tokens: &enc.layout.tokens,
            layout: &enc.layout,
            region_feats: &prepared.region_feats,
            region_boxes: &prepared.region_boxes,
            graphs: &enc.graphs,
            edge_mask: None,
        },
    )?;

    let pooled = tape.value(out.pooled);
    println!(
        "pooled feature: 1 x {} (|v| = {:.4})",
        pooled.ncols(),
        pooled.iter().map(|x| x * x).sum::<f64>().sqrt()
    );
    let logit = tape.value(out.nsp_logit)[[0, 0]];
    println!(
        "answer head: logit {:+.4} -> probability {:.4} for candidate {:?}",
        logit,
        nsp_score(logit),
        turn.candidates[turn.gt_index],
    );

    println!("\nattention traces (per layer, per GNN layer, per modality):");
    for trace in &out.traces {
        let strongest = trace
            .edges
            .iter()
            .max_by(|a, b| a.2.partial_cmp(&b.2).unwrap())
            .unwrap();
        println!(
            "  layer {} gnn {} {:>8}: {} edges, strongest {} -> {} ({:.3})",
            trace.layer,
            trace.gnn_layer,
            trace.modality.to_string(),
            trace.edges.len(),
            strongest.0,
            strongest.1,
            strongest.2,
        );
    }
    Ok(())
}
