use std::path::Path;

use ceinfuse::cli::{main_with_args, EXIT_OK, EXIT_STAGE, EXIT_VALIDATION};

fn run(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("ceinfuse").chain(args.iter().copied()))
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

#[test]
fn usage_errors_are_validation_failures() {
    assert_eq!(run(&[]), EXIT_VALIDATION);
    assert_eq!(run(&["no-such-command"]), EXIT_VALIDATION);
    assert_eq!(run(&["eval", "--k", "3"]), EXIT_VALIDATION);
    assert_eq!(run(&["grad-check", "--objective", "bogus"]), EXIT_VALIDATION);
    assert_eq!(run(&["--help"]), EXIT_OK);
}

#[test]
fn grad_check_passes_and_catches_a_fault() {
    assert_eq!(run(&["grad-check", "--objective", "ce"]), EXIT_OK);
    assert_eq!(run(&["grad-check", "--objective", "mnrl", "--inject-fault"]), EXIT_STAGE);
}

#[test]
fn print_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "seed = 4\nde_layers = 3\n").unwrap();
    assert_eq!(run(&["run-pipeline", "--config", &cfg.to_string_lossy(), "--print-config"]), EXIT_OK);
    std::fs::write(&cfg, "k_copy = 9\n").unwrap();
    assert_eq!(run(&["run-pipeline", "--config", &cfg.to_string_lossy(), "--print-config"]), EXIT_VALIDATION);
}

#[test]
fn stage_by_stage_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let data = p(d, "data");
    let vocab = p(d, "vocab.txt");
    let ce = p(d, "ce.ntc");
    let de = p(d, "de.ntc");
    let de_trained = p(d, "de_trained.ntc");
    let index = p(d, "index.bin");
    let results = p(d, "results.tsv");
    let reranked = p(d, "reranked.tsv");
    let qrels = p(d, "data/qrels.tsv");

    let steps: Vec<Vec<&str>> = vec![
        vec!["synth-data", "--out", &data, "--seed", "3", "--corpus-size", "150", "--queries", "20", "--train-queries", "64"],
        vec!["build-vocab", "--data", &data, "--size", "600", "--out", &vocab],
        vec![
            "train-ce", "--data", &data, "--vocab", &vocab, "--out", &ce, "--layers", "3", "--hidden", "32",
            "--heads", "2", "--ff", "64", "--max-steps", "6", "--matching-steps", "4", "--batch-size", "8",
        ],
        vec!["sweep-layers", "--model", &ce, "--data", &data, "--k", "5", "--sample", "10"],
        vec!["infuse", "--ce", &ce, "--layers", "2", "--k-copy", "1", "--out", &de, "--verify", "5", "--data", &data],
        vec![
            "train-de", "--data", &data, "--vocab", &vocab, "--out", &de_trained, "--init", &de, "--max-steps", "4",
            "--batch-size", "8",
        ],
        vec!["index", "--model", &de_trained, "--data", &data, "--out", &index],
        vec!["search", "--model", &de_trained, "--index", &index, "--data", &data, "--k", "10", "--out", &results],
        vec!["rerank", "--ce", &ce, "--data", &data, "--results", &results, "--depth", "10", "--out", &reranked],
        vec!["eval", "--results", &reranked, "--qrels", &qrels, "--k", "10"],
        vec!["bench", "--models", &ce, &de_trained, "--data", &data, "--corpus-size", "30"],
    ];
    for args in &steps {
        assert_eq!(run(args), EXIT_OK, "{args:?}");
    }
    for f in [&vocab, &ce, &de, &de_trained, &index, &results, &reranked] {
        assert!(Path::new(f).is_file(), "{f} missing");
    }
    assert!(Path::new(&format!("{ce}.matching_loss.csv")).is_file());
    // The saved sidecar points at the vocabulary, so --vocab may be omitted.
    assert_eq!(run(&["index", "--model", &de, "--data", &data, "--out", &index]), EXIT_OK);

    assert_eq!(run(&["infuse", "--ce", &ce, "--layers", "2", "--k-copy", "3", "--out", &de]), EXIT_VALIDATION);
    assert_eq!(run(&["eval", "--results", &reranked, "--qrels", &qrels, "--k", "0"]), EXIT_VALIDATION);
}
