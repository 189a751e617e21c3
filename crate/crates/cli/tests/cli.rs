use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use bevgen_cli::pipeline::{bench_attention, mask_iou};
use bevgen_cli::RunConfig;

fn bevgen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bevgen"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run bevgen")
}

fn tiny(work: &Path) -> String {
    format!(
        "work_dir = {:?}\nscenes = 6\nheldout = 2\nimage_vq_steps = 5\nbev_vq_steps = 5\nvq_batch = 2\n",
        work.to_str().unwrap()
    )
}

#[test]
fn bad_config_exits_2_and_lists_every_problem() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "widht = 3\nlr = -1\nheads = \"four\"\n").unwrap();
    let out = bevgen(&["train-prior", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    for needle in ["widht", "lr", "heads"] {
        assert!(err.contains(needle), "{needle} missing from:\n{err}");
    }
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(bevgen(&["sample"]).status.code(), Some(2));
    assert_eq!(bevgen(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn missing_config_file_is_a_config_error() {
    let out = bevgen(&["eval", "--config", "/nonexistent/run.toml"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    fs::write(&path, tiny(&dir.path().join("run")) + "vq_lr = 1e200\n").unwrap();
    let cfg = path.to_str().unwrap();
    assert_eq!(
        bevgen(&["gen-data", "--config", cfg]).status.code(),
        Some(0)
    );
    let out = bevgen(&["train-vq", "--config", cfg]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn seed_and_out_override_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    fs::write(&path, tiny(&dir.path().join("ignored"))).unwrap();
    let out_dir = dir.path().join("elsewhere");
    let out = bevgen(&[
        "gen-data",
        "--config",
        path.to_str().unwrap(),
        "--seed",
        "9",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert!(!dir.path().join("ignored").exists());
    let manifest = fs::read_to_string(out_dir.join("data/manifest.json")).unwrap();
    let manifest: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    assert_eq!(manifest["scenes"][0]["seed"].as_u64(), Some(9 << 32));
}

#[test]
fn includes_merge_with_local_keys_winning() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("sub")).unwrap();
    fs::write(
        dir.path().join("sub/base.toml"),
        "width = 96\nlayers = 3\nheads = 4\n",
    )
    .unwrap();
    fs::write(
        dir.path().join("run.toml"),
        "include = [\"sub/base.toml\"]\nlayers = 5\n",
    )
    .unwrap();
    let config = RunConfig::load(&dir.path().join("run.toml")).unwrap();
    assert_eq!((config.width, config.layers, config.heads), (96, 5, 4));
}

#[test]
fn include_cycles_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a.toml"), "include = [\"b.toml\"]\n").unwrap();
    fs::write(dir.path().join("b.toml"), "include = [\"a.toml\"]\n").unwrap();
    let err = RunConfig::load(&dir.path().join("a.toml")).unwrap_err();
    assert!(err.to_string().contains("cycle"), "{err}");
}

#[test]
fn full_density_sparse_costs_the_same_as_dense() {
    let config = RunConfig {
        bench_latents: vec![[4, 8], [8, 16]],
        bench_densities: vec![1.0],
        bench_repeats: 1,
        ..RunConfig::default()
    };
    let rows = bench_attention(&config).unwrap();
    for len in [3 * 32, 3 * 128] {
        let flops = |mode: &str| {
            rows.iter()
                .find(|r| r.seq_len == len && r.mode == mode && r.density == 1.0)
                .map(|r| r.flops)
                .unwrap()
        };
        assert_eq!(flops("sparse"), flops("dense"), "sequence length {len}");
    }
}

#[test]
fn oracle_masks_match_themselves() {
    let dir = tempfile::tempdir().unwrap();
    let config = RunConfig::parse(&tiny(&dir.path().join("run"))).unwrap();
    bevgen_cli::commands::gen_data(&config).unwrap();
    let data = bevgen_cli::dataset::Dataset::open(&config.data_path()).unwrap();
    let records = data.records(&(0..data.len()).collect::<Vec<_>>()).unwrap();
    for r in &records {
        assert_eq!(mask_iou(&r.masks, &r.masks), 1.0);
    }
}
