//! The ranking metric suite on hand-built fixtures: MRR, recall@k, mean
//! rank, NDCG with the positive-relevance cutoff, and per-round tables.
//!
//! ```bash
//! cargo run --example evaluate_metrics
//! ```

use graphdial::ranking::{
    mean_rank, mrr, ndcg, rank, recall_at_k, round_wise_metrics, MetricReport, RankResult,
};

fn main() {
    // deterministic ranking with index tie-break
    let scores = vec![0.1, 0.9, 0.5, 0.9];
    println!("scores {scores:?} rank to {:?} (ties broken by index)", rank(&scores));

    // a small result set across three rounds
    let results = vec![
        RankResult::new(1, vec![0.9, 0.5, 0.1, 0.3], 0), // gt first
        RankResult::new(1, vec![0.2, 0.8, 0.4, 0.1], 2), // gt third
        RankResult::new(2, vec![0.3, 0.1, 0.6, 0.2], 2), // gt first
        RankResult::new(3, vec![0.25, 0.5, 0.75, 1.0], 0), // gt last
    ];
    println!("\nMRR      {:.4}", mrr(&results));
    println!("R@1      {:.4}", recall_at_k(&results, 1));
    println!("R@5      {:.4}", recall_at_k(&results, 5));
    println!("mean     {:.4}", mean_rank(&results));

    println!("\nper-round table:");
    for row in round_wise_metrics(&results) {
        println!(
            "  round {}: n={} mrr={:.3} r1={:.3} mean={:.2}",
            row.round, row.count, row.mrr, row.r1, row.mean
        );
    }

    // NDCG cutoff sits at the number of positively relevant candidates
    let relevance = [1.0, 0.5, 0.0];
    let ideal = ndcg(&[0.9, 0.5, 0.1], &relevance).unwrap();
    let swapped = ndcg(&[0.5, 0.9, 0.1], &relevance).unwrap();
    println!("\nNDCG ideal order: {ideal:.4}");
    println!("NDCG top two swapped: {swapped:.4}");

    let report = MetricReport::from_results(&results, &[ideal, swapped]);
    println!("\nfull report:\n{}", serde_json::to_string_pretty(&report).unwrap());
}
