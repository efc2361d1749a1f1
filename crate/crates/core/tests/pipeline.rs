use std::fs;
use std::path::Path;

use clap::CommandFactory;
use ctes_retrieval::cli::{self, Cli, CliError};

fn ctes(args: &[&str]) -> Result<(), CliError> {
    cli::run(std::iter::once("ctes").chain(args.iter().copied()))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// gen, train, index and a hashed eval in `root`.
fn chain(root: &Path, seed: &str) {
    let (data, model, index, eval) = (root.join("data"), root.join("model"), root.join("index"), root.join("eval"));
    let ck = model.join(cli::CHECKPOINT_FILE);
    ctes(&["gen", "--out", p(&data), "--seed", seed, "--bases", "12", "--base-len-min", "60", "--base-len-max", "80"]).unwrap();
    ctes(&["train", "--data", p(&data), "--out", p(&model), "--seed", seed, "--epochs", "2", "--max-len", "40"]).unwrap();
    ctes(&["index", "--data", p(&data), "--checkpoint", p(&ck), "--out", p(&index), "--seed", seed, "--hash-epochs", "20", "--bits-per-table", "3"]).unwrap();
    ctes(&["eval", "--data", p(&data), "--checkpoint", p(&ck), "--index", p(&index), "--out", p(&eval), "--seed", seed, "--split", "all"]).unwrap();
}

#[test]
fn seeded_runs_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    chain(a.path(), "3");
    chain(b.path(), "3");
    for file in [
        "data/queries.jsonl",
        "data/corpus.jsonl",
        "data/judgments.tsv",
        "data/split.tsv",
        "model/checkpoint.bin",
        "model/loss_curve.txt",
        "index/hasher.bin",
        "index/index.bin",
        "index/report.txt",
        "eval/results.tsv",
        "eval/report.txt",
    ] {
        let (x, y) = (fs::read(a.path().join(file)).unwrap(), fs::read(b.path().join(file)).unwrap());
        assert!(!x.is_empty(), "{file} is empty");
        assert!(x == y, "{file} differs between runs");
    }
    let report = fs::read_to_string(a.path().join("eval/report.txt")).unwrap();
    assert!(report.contains("mode=hashed"));
}

#[test]
fn query_respects_k_and_exhaustive_eval_saves_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    chain(root, "1");
    let (data, ck) = (root.join("data"), root.join("model").join(cli::CHECKPOINT_FILE));
    let out = root.join("query");
    ctes(&["query", "--data", p(&data), "--checkpoint", p(&ck), "--index", p(&root.join("index")), "--out", p(&out), "--k", "5", "--split", "all"]).unwrap();
    let results = fs::read_to_string(out.join(cli::RESULTS_FILE)).unwrap();
    let mut per_query = std::collections::BTreeMap::<&str, usize>::new();
    for line in results.lines() {
        let f: Vec<&str> = line.split('\t').collect();
        assert_eq!(f.len(), 5, "{line}");
        *per_query.entry(f[0]).or_default() += 1;
    }
    assert_eq!(per_query.len(), 12);
    assert!(per_query.values().all(|&n| (1..=5).contains(&n)));

    let ex = root.join("exhaustive");
    ctes(&["eval", "--data", p(&data), "--checkpoint", p(&ck), "--out", p(&ex), "--split", "all"]).unwrap();
    let report = fs::read_to_string(ex.join(cli::REPORT_FILE)).unwrap();
    assert!(report.lines().any(|l| l == "reduction_factor=0"), "{report}");
    assert!(report.contains("mode=exhaustive"));

    let cfg = root.join("eval.conf");
    fs::write(&cfg, "# lower negatives\nnegatives = 5\n").unwrap();
    let small = root.join("small");
    ctes(&["eval", "--config", p(&cfg), "--data", p(&data), "--checkpoint", p(&ck), "--out", p(&small), "--split", "all"]).unwrap();
    assert!(ctes(&["eval", "--config", p(&root.join("missing.conf")), "--data", p(&data), "--checkpoint", p(&ck), "--out", p(&small)]).is_err());
}

#[test]
fn bad_invocations_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    for args in [
        vec!["frobnicate"],
        vec!["gen"],
        vec!["gen", "--out", p(&out), "--warp", "sideways"],
        vec!["query", "--data", "d", "--checkpoint", "c", "--out", p(&out), "--k", "0"],
    ] {
        let err = ctes(&args).unwrap_err();
        assert_eq!(err.kind(), "usage", "{args:?}: {err}");
    }
    let data = dir.path().join("data");
    fs::create_dir(&data).unwrap();
    for f in [cli::MANIFEST_FILE, cli::QUERIES_FILE, cli::CORPUS_FILE, cli::JUDGMENTS_FILE, cli::SPLIT_FILE] {
        fs::write(data.join(f), "").unwrap();
    }
    let err = ctes(&["train", "--data", p(&data), "--out", p(&out)]).unwrap_err();
    assert_eq!(err.kind(), "config", "{err}");
}

#[test]
fn every_flag_is_documented() {
    let cmd = Cli::command();
    let names: Vec<&str> = cmd.get_subcommands().map(|s| s.get_name()).collect();
    assert_eq!(names, ["gen", "train", "index", "query", "eval", "bench"]);
    for sub in cmd.get_subcommands() {
        assert!(sub.get_about().is_some(), "{}", sub.get_name());
        for arg in sub.get_arguments() {
            if arg.get_id() == "help" {
                continue;
            }
            assert!(arg.get_help().is_some(), "{} --{} lacks help", sub.get_name(), arg.get_id());
        }
    }
}
