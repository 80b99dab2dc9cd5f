//! Builds DE-2 CE from a cross encoder: embedding tables and the first encoder
//! layer are copied, the second layer is freshly initialized. The copied
//! prefix is verified numerically and the result round-trips through disk.

use ceinfuse::checkpoint::{self, infuse, verify_infusion};
use ceinfuse::data::build_vocab;
use ceinfuse::model::{EncoderWeights, ModelConfig, Role};

fn main() -> ceinfuse::Result<()> {
    let probes = ["a quick brown fox", "jumps over the lazy dog", "pack my box with five dozen jugs"];
    let vocab = build_vocab(&probes, 64)?;
    let config = ModelConfig {
        vocab_size: vocab.len(),
        ..ModelConfig::default()
    };
    let ce = EncoderWeights::init_random(&config, 3, Role::CrossEncoder)?;
    let de = infuse(&ce, 2, 1, 11)?;
    println!("cross encoder: {} layers, head: {}", ce.layers.len(), ce.head.is_some());
    println!("dual encoder:  {} layers, head: {}", de.layers.len(), de.head.is_some());

    let report = verify_infusion(&ce, &de, 1, &vocab, &probes, 32)?;
    for (i, dev) in report.max_dev.iter().enumerate() {
        println!("hidden state {i}: max |Δ| = {dev:.3e}");
    }
    println!("copied prefix identical: {}", report.passed());

    let dir = tempdir();
    let path = dir.join("de2_ce.ntc");
    checkpoint::save(&de, &path, None)?;
    let (back, info) = checkpoint::load(&path)?;
    println!("reloaded {:?} with {} layers, equal: {}", info.role, back.layers.len(), back == de);
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}

fn tempdir() -> std::path::PathBuf {
    let d = std::env::temp_dir().join(format!("ceinfuse-example-{}", std::process::id()));
    std::fs::create_dir_all(&d).unwrap();
    d
}
