//! Drive the whole command-line surface in-process: generate a dataset
//! corpus, train, resume a finished run (a no-op), evaluate the newest
//! checkpoint, and inspect the artifacts — all against one run directory.
//! The same invocations work from a shell against the `causal-probe` binary.
//!
//! Run with: cargo run --example cli_workflow

use causal_probe::cli::run_from_args;

fn main() {
    let dir = tempfile::TempDir::new().expect("tempdir");
    let out = dir.path().join("demo-run");
    let out = out.to_str().expect("utf-8 path");

    // A config file overriding the desk preset down to toy scale; every
    // field left out keeps its preset default.
    let config = dir.path().join("demo.json");
    std::fs::write(
        &config,
        r#"{
  "seed": 5,
  "model": {
    "encoder": {"d": 16, "l_total": 1, "ff_hidden": 32},
    "decoder": {"n_layers": 1, "t": 4},
    "encoder_layer": 1
  },
  "train": {
    "steps": 20, "batch_size": 2, "f_min": 4, "f_max": 4,
    "n_obs_mixed": 12, "n_int_mixed": 12, "n_obs_only": 24,
    "log_every": 5, "ckpt_every": 10
  },
  "eval": {"sizes": [4], "datasets_per_size": 5, "n_obs": 30, "n_int": 30},
  "generate": {"count": 4, "f": 4, "n_obs": 20, "n_int": 20}
}"#,
    )
    .expect("write config");
    let config = config.to_str().expect("utf-8 path");

    let steps: &[&[&str]] = &[
        &["generate", "--config", config, "--out", out],
        &["train", "--config", config, "--out", out],
        &["train", "--resume", "--config", config, "--out", out],
        &["eval", "--config", config, "--out", out],
    ];
    for args in steps {
        println!("\n$ causal-probe {}", args.join(" "));
        let code = run_from_args(std::iter::once("causal-probe").chain(args.iter().copied()));
        assert_eq!(code, 0, "command failed: {args:?}");
    }

    println!("\n$ causal-probe inspect {out}/datasets/dataset_00000.ds");
    let ds = format!("{out}/datasets/dataset_00000.ds");
    let code = run_from_args(["causal-probe", "inspect", &ds]);
    assert_eq!(code, 0);

    println!("\nrun directory now holds:");
    let mut names: Vec<String> = std::fs::read_dir(dir.path().join("demo-run"))
        .expect("run dir")
        .map(|e| e.expect("entry").file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    for name in names {
        println!("  {name}");
    }
}
