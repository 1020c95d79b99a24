use std::path::Path;

use mdlzoo::charlm::NGramLm;
use mdlzoo::cli::{main_with_args, Exit};
use mdlzoo::netzoo::load_checkpoint;

fn cli(dir: &Path, args: &[&str]) -> Exit {
    let mut argv = vec!["mdlzoo".to_string()];
    argv.extend(args.iter().map(|a| a.replace("{dir}", dir.to_str().unwrap())));
    main_with_args(argv)
}

#[test]
fn generate_train_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for (split, seed, lines) in [("train", "1", "12"), ("valid", "2", "4")] {
        let out = format!("{{dir}}/{split}");
        let args = [
            "gen-data",
            "--lines",
            lines,
            "--seed",
            seed,
            "--out",
            &out,
            "--min-chars",
            "3",
            "--max-chars",
            "5",
        ];
        assert_eq!(cli(d, &args), Exit::Success);
    }
    assert!(d.join("train/manifest.tsv").exists());

    let train = [
        "train",
        "--train",
        "{dir}/train/manifest.tsv",
        "--valid",
        "{dir}/valid/manifest.tsv",
        "--out",
        "{dir}/m.ckpt",
        "--arch",
        "cnn",
        "--max-epochs",
        "2",
        "--dropout",
        "none",
        "--lr",
        "1e-3",
    ];
    assert_eq!(cli(d, &train), Exit::Success);
    let (net, meta) = load_checkpoint(d.join("m.ckpt"), None).unwrap();
    assert_eq!(net.spec().class_count(), 110);
    assert!(meta.priors.is_some());
    let curve = std::fs::read_to_string(d.join("m.ckpt.curve.tsv")).unwrap();
    assert_eq!(curve.lines().count(), 3);

    let lm = [
        "lm-train",
        "--manifest",
        "{dir}/train/manifest.tsv",
        "--order",
        "3",
        "--out",
        "{dir}/lm.arpa",
    ];
    assert_eq!(cli(d, &lm), Exit::Success);
    let arpa = std::fs::read_to_string(d.join("lm.arpa")).unwrap();
    assert_eq!(NGramLm::from_arpa(&arpa).unwrap().order(), 3);

    let eval = [
        "eval",
        "--model",
        "{dir}/m.ckpt",
        "--manifest",
        "{dir}/valid/manifest.tsv",
        "--lm",
        "{dir}/lm.arpa",
        "--beam",
        "4",
        "--report",
        "{dir}/report.json",
    ];
    assert_eq!(cli(d, &eval), Exit::Success);
    assert!(d.join("report.json").exists());
}

#[test]
fn user_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(
        cli(d, &["train", "--train", "{dir}/missing.tsv", "--out", "{dir}/m.ckpt"]),
        Exit::User
    );
    assert_eq!(cli(d, &["audit", "--arch", "resnet"]), Exit::User);
    assert_eq!(
        cli(
            d,
            &["eval", "--model", "{dir}/none.ckpt", "--manifest", "{dir}/none.tsv"]
        ),
        Exit::User
    );
}
