//! Finite-difference verification of the analytic gradients through a full
//! forward pass and loss head.
//!
//! ```bash
//! cargo run --release --example gradient_check
//! ```

use graphdial::data::{encode_candidate, generate_toy_dataset, prepare_dataset, ToyConfig};
use graphdial::model::{ForwardInputs, Model, ModelConfig, ModelSpec, Vocabulary};
use graphdial::objectives::nsp_loss;
use graphdial::params::ParamStore;
use graphdial::tensor::Tape;

fn main() -> graphdial::Result<()> {
    let dataset = generate_toy_dataset(&ToyConfig {
        dialogs: 1,
        rounds: 2,
        candidates: 4,
        seed: 2,
        ..ToyConfig::default()
    });
    let spec = ModelSpec {
        config: ModelConfig::toy(),
        vocab: Vocabulary::build(dataset.texts()),
    };
    let model = Model::new(spec.clone(), 11)?;
    let data = prepare_dataset(dataset, &spec)?;
    let prepared = &data.instances[0];
    let enc = encode_candidate(&spec, prepared, 2, 0)?;

    let loss_of = |store: &ParamStore| -> f64 {
        let tape = Tape::new();
        let m = Model {
            spec: spec.clone(),
            store: store.clone(),
        };
        let out = m
            .forward(
                &tape,
                &ForwardInputs {
                    tokens: &enc.layout.tokens,
                    layout: &enc.layout,
                    region_feats: &prepared.region_feats,
                    region_boxes: &prepared.region_boxes,
                    graphs: &enc.graphs,
                    edge_mask: None,
                },
            )
            .unwrap();
        let l = nsp_loss(&tape, out.nsp_logit, true);
        tape.value(l)[[0, 0]]
    };

    // analytic gradients from one backward pass
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
    let loss = nsp_loss(&tape, out.nsp_logit, true);
    let grads = tape.backward(loss);
    println!("loss {:.6}, {} tensors received gradients", tape.value(loss)[[0, 0]], grads.len());

    let eps = 1e-6;
    println!("\n{:32} {:>14} {:>14} {:>10}", "tensor[0,0]", "analytic", "numeric", "rel err");
    for name in [
        "emb.tok",
        "bert.l0.txt.self.h0.q",
        "bert.l0.img.co.h1.v",
        "gnn.img.k0.h0.msg",
        "gnn.hub.qst.w1",
        "gnn.proj.q2i.w",
        "pool.w",
        "nsp.w",
    ] {
        let mut plus = model.store.clone();
        plus.get_mut(name)[[0, 0]] += eps;
        let mut minus = model.store.clone();
        minus.get_mut(name)[[0, 0]] -= eps;
        let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
        let analytic = grads[name][[0, 0]];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        println!("{name:32} {analytic:>14.6e} {numeric:>14.6e} {rel:>10.2e}");
    }
    Ok(())
}
