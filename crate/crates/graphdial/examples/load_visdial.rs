//! Ingest a VisDial-layout JSON file with sidecar region features and dense
//! annotations, then re-export it with fresh index tables.
//!
//! ```bash
//! cargo run --example load_visdial
//! ```

use graphdial::data::{export_visdial_json, load_visdial_json};

fn main() -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;

    let dialogs = serde_json::json!({
        "version": "1.0",
        "split": "demo",
        "data": {
            "dialogs": [{
                "image_id": 1234,
                "caption": "a brown dog runs on the beach",
                "dialog": [
                    {"question": 0, "answer": 0, "answer_options": [0, 1, 2], "gt_index": 0},
                    {"question": 1, "answer": 2, "answer_options": [2, 1, 0], "gt_index": 0},
                ],
            }],
            "questions": ["is the dog large", "is it sunny"],
            "answers": ["yes", "no", "maybe"],
        }
    });
    let dialogs_path = dir.path().join("dialogs.json");
    std::fs::write(&dialogs_path, serde_json::to_vec_pretty(&dialogs)?)?;

    let features = serde_json::json!({
        "1234": {
            "features": [[0.1, 0.7, 0.3], [0.9, 0.2, 0.4]],
            "boxes": [[10.0, 20.0, 200.0, 220.0], [150.0, 30.0, 400.0, 300.0]],
            "width": 640.0,
            "height": 480.0,
        }
    });
    let features_path = dir.path().join("features.json");
    std::fs::write(&features_path, serde_json::to_vec(&features)?)?;

    let dense = serde_json::json!([
        {"image_id": 1234, "round_id": 2, "gt_relevance": [1.0, 0.4, 0.0]}
    ]);
    let dense_path = dir.path().join("dense.json");
    std::fs::write(&dense_path, serde_json::to_vec(&dense)?)?;

    let dataset = load_visdial_json(&dialogs_path, Some(&features_path), Some(&dense_path))?;
    let inst = &dataset.instances[0];
    println!("loaded instance {} with {} rounds", inst.id, inst.rounds.len());
    println!("caption: {:?}", inst.caption);
    println!("boxes normalized to [0, 1]: {:?}", inst.boxes);
    for (i, round) in inst.rounds.iter().enumerate() {
        println!(
            "round {}: q={:?} a={:?} dense={:?} fallback parse arcs={}",
            i + 1,
            round.question,
            round.answer,
            round.dense_relevance,
            round.question_parse.len(),
        );
    }
    println!("pronoun-based coreference links: {:?}", inst.coref_links);

    let exported = export_visdial_json(&dataset);
    println!(
        "\nre-export carries {} questions / {} answers in its index tables",
        exported["data"]["questions"].as_array().unwrap().len(),
        exported["data"]["answers"].as_array().unwrap().len(),
    );
    Ok(())
}
