//! Okapi BM25 ranking and hard-negative mining for contrastive training.

use ceinfuse::bm25::{mine_hard_negatives, Bm25Index, MiningParams, MiningQuery};

fn main() -> ceinfuse::Result<()> {
    let corpus = [
        "how to bake sourdough bread at home",
        "sourdough starter feeding schedule",
        "bread machine recipes for beginners",
        "history of the french baguette",
        "home espresso machine cleaning",
        "baking soda versus baking powder",
    ];
    let index = Bm25Index::build(&corpus)?;
    println!("{} docs, avgdl {:.2}", index.num_docs(), index.avgdl());

    let query = "sourdough bread baking";
    for (doc, score) in index.top_k(query, 3) {
        println!("{score:>8.4}  {}", corpus[doc]);
    }

    let queries = [MiningQuery {
        query: query.into(),
        positive: corpus[0].into(),
        positive_ids: vec![0],
    }];
    let params = MiningParams {
        n_neg: 2,
        window: 4,
        seed: 1,
    };
    for ex in mine_hard_negatives(&index, &corpus, &queries, params)? {
        println!("query: {}\n  positive: {}", ex.query, ex.positive);
        for n in &ex.negatives {
            println!("  negative: {n}");
        }
    }
    Ok(())
}
