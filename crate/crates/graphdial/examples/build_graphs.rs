//! Build the three modality graphs from raw annotations and print their
//! structure plus a relation-class histogram.
//!
//! ```bash
//! cargo run --example build_graphs
//! ```

use graphdial::graph::{
    build_history_graph, build_image_graph, build_question_graph, classify_spatial_relation,
    graph_stats, BoundingBox, CoreferenceLink, DependencyEdge, DependencyLexicon, Modality,
};

fn main() -> graphdial::Result<()> {
    // image graph: spatial relations between region boxes
    let boxes = vec![
        BoundingBox::new(0.05, 0.10, 0.45, 0.70)?, // tall box on the left
        BoundingBox::new(0.50, 0.40, 0.90, 0.85)?, // box on the right
        BoundingBox::new(0.10, 0.15, 0.40, 0.60)?, // nested inside the first
    ];
    println!("pairwise spatial classes:");
    for (i, a) in boxes.iter().enumerate() {
        for (j, b) in boxes.iter().enumerate() {
            if i != j {
                println!("  ({i} -> {j}): class {}", classify_spatial_relation(a, b));
            }
        }
    }
    let image = build_image_graph(&boxes)?;
    println!(
        "image graph: {} nodes + hub, {} edges ({} relation, {} hub)\n",
        image.num_nodes,
        image.edges.len(),
        image.non_hub_edges().count(),
        image.edges.len() - image.non_hub_edges().count(),
    );

    // question graph: dependency arcs over "what color is the ball"
    let lexicon = DependencyLexicon::default();
    let parse = vec![
        DependencyEdge { head: 1, dependent: 0, relation: "det".into() },
        DependencyEdge { head: 1, dependent: 2, relation: "cop".into() },
        DependencyEdge { head: 4, dependent: 3, relation: "det".into() },
        DependencyEdge { head: 1, dependent: 4, relation: "nsubj".into() },
    ];
    let question = build_question_graph(&parse, 5, &lexicon)?;
    println!("question graph: {} nodes + hub, {} edges", question.num_nodes, question.edges.len());
    for (s, d, t) in question.non_hub_edges() {
        println!("  {s} -> {d}: {}", lexicon.name(*t).unwrap());
    }

    // history graph: caption fan-out plus one explicit coreference link
    let links = vec![CoreferenceLink { from_round: 3, to_round: 1 }];
    let history = build_history_graph(&links, 4)?;
    println!(
        "\nhistory graph: {} rounds + hub, {} edges (caption links to every round)",
        history.num_nodes,
        history.edges.len()
    );

    // histogram over a small corpus of image graphs
    let corpus: Vec<_> = (0..20)
        .map(|k| {
            let shift = k as f64 * 0.02;
            let boxes = [
                BoundingBox::new(shift, 0.0, shift + 0.3, 0.4).unwrap(),
                BoundingBox::new(0.5, shift, 0.9, shift + 0.3).unwrap(),
            ];
            build_image_graph(&boxes).unwrap()
        })
        .collect();
    let hist = graph_stats(&corpus, Modality::Image)?;
    println!("\nimage relation histogram over {} graphs:", corpus.len());
    for (i, count) in hist.counts.iter().enumerate() {
        if *count > 0 {
            println!("  class {:2}: {count}", i + 1);
        }
    }
    Ok(())
}
