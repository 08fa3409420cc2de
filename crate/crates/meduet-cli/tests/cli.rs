//! End-to-end tests driving the installed binary the way a user would:
//! real processes, real exit codes, real artifact directories.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

/// Config small enough to run every stage in seconds.
const TINY: &str = r#"
[corpus]
n_volumes = 36
side = 8

[tokenizer]
mode = "deterministic"
block = 2

[backbone]
patch = 2
d_h = 16
d_c = 8
d_s = 4
enc_blocks = 2
dec_blocks = 1
heads = 2
mlp_ratio = 2
clf_hidden = 8

[train]
total_steps = 2
batch_size = 2
log_every = 1

[diffusion]
width = 8
blocks = 1
heads = 2
mlp_ratio = 2
steps = 2
batch_size = 2

[diffusion.guidance]
t_steps = 4
sample_steps = 2

[analysis]
steps = 2
batch_size = 2
k_prototype = 2
proto_batch = 2
dec_blocks = 1

[eval]
w_c = [0.0, 3.0]
w_s = [0.0, 3.0]
sweep_refs = 2
sweep_donors = 2
"#;

fn meduet(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_meduet"))
        .args(args)
        .current_dir(cwd)
        .env_remove("MEDUET_CACHE")
        .output()
        .expect("binary launches")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{} failed (exit {:?})\nstdout: {}\nstderr: {}",
        what,
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    fs::write(&path, TINY).unwrap();
    path.to_string_lossy().into_owned()
}

fn json_file(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap_or_else(|e| {
        panic!("reading {}: {}", path.display(), e)
    }))
    .unwrap_or_else(|e| panic!("parsing {}: {}", path.display(), e))
}

#[test]
fn dry_run_validates_without_side_effects() {
    let tmp = tempfile::tempdir().unwrap();
    let out = meduet(tmp.path(), &["corpus", "--dry-run", "--root", "ws"]);
    assert_ok(&out, "dry run");
    let text = stdout(&out);
    assert!(text.contains("[corpus]"), "resolved config printed:\n{}", text);
    assert!(text.contains("[eval]"));
    assert!(text.contains("# hash: "));
    // Nothing written: not the workspace, not a default directory.
    assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 0);
}

#[test]
fn unknown_key_exits_two_naming_its_path() {
    let tmp = tempfile::tempdir().unwrap();
    let out = meduet(
        tmp.path(),
        &["corpus", "--dry-run", "--set", "train.lrr=3", "--root", "ws"],
    );
    assert_eq!(exit_code(&out), 2);
    assert!(stderr(&out).contains("train.lrr"), "stderr: {}", stderr(&out));
    assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 0);
}

#[test]
fn missing_prerequisites_exit_three_naming_the_producer() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());

    let out = meduet(tmp.path(), &["pretrain", "--config", &cfg, "--root", "ws"]);
    assert_eq!(exit_code(&out), 3, "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("meduet corpus"));

    // With a corpus but no latents, the next gap is named too.
    assert_ok(
        &meduet(tmp.path(), &["corpus", "--config", &cfg, "--root", "ws"]),
        "corpus",
    );
    let out = meduet(tmp.path(), &["pretrain", "--config", &cfg, "--root", "ws"]);
    assert_eq!(exit_code(&out), 3);
    assert!(stderr(&out).contains("meduet tokenize"));

    assert_ok(
        &meduet(tmp.path(), &["tokenize", "--config", &cfg, "--root", "ws"]),
        "tokenize",
    );
    let out = meduet(tmp.path(), &["codes", "--config", &cfg, "--root", "ws"]);
    assert_eq!(exit_code(&out), 3);
    assert!(stderr(&out).contains("meduet pretrain"));

    let out = meduet(tmp.path(), &["probe", "--config", &cfg, "--root", "ws"]);
    assert_eq!(exit_code(&out), 3);
    assert!(stderr(&out).contains("meduet codes"));
}

#[test]
fn mismatched_stamp_refuses_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    assert_ok(
        &meduet(tmp.path(), &["corpus", "--config", &cfg, "--root", "ws"]),
        "corpus",
    );

    let out = meduet(
        tmp.path(),
        &["corpus", "--config", &cfg, "--root", "ws", "--set", "corpus.seed=99"],
    );
    assert_eq!(exit_code(&out), 2);
    assert!(stderr(&out).contains("--force"), "stderr: {}", stderr(&out));

    let out = meduet(
        tmp.path(),
        &["corpus", "--config", &cfg, "--root", "ws", "--set", "corpus.seed=99", "--force"],
    );
    assert_ok(&out, "forced corpus rebuild");
}

#[test]
fn pretraining_is_bit_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let mut hashes = Vec::new();
    for root in ["one", "two"] {
        for cmd in ["corpus", "tokenize", "pretrain"] {
            assert_ok(
                &meduet(tmp.path(), &[cmd, "--config", &cfg, "--root", root]),
                cmd,
            );
        }
        hashes.push(fs::read(tmp.path().join(root).join("pretrain/checkpoint.mdar")).unwrap());
    }
    assert_eq!(hashes[0], hashes[1], "identical config and seeds, different checkpoints");
}

#[test]
fn full_pipeline_produces_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let ws = tmp.path().join("ws");
    let run = |args: &[&str]| {
        let mut full = vec![args[0], "--config", &cfg, "--root", "ws"];
        full.extend(&args[1..]);
        let out = meduet(tmp.path(), &full);
        assert_ok(&out, args[0]);
        out
    };

    run(&["corpus"]);
    let vols = fs::read_dir(ws.join("corpus"))
        .unwrap()
        .filter(|e| {
            let name = e.as_ref().unwrap().file_name();
            name.to_string_lossy().ends_with(".f32")
        })
        .count();
    assert_eq!(vols, 36);
    assert!(ws.join("corpus/manifest.json").exists());
    // Every artifact directory records the config that built it.
    assert!(ws.join("corpus/config.toml").exists());
    assert!(ws.join("corpus/config.hash").exists());

    run(&["tokenize"]);
    assert!(ws.join("cache/latents/tokenizer.mdar").exists());
    assert!(ws.join("cache/latents/vol_00000.lat.f32").exists());

    run(&["pretrain"]);
    assert!(ws.join("pretrain/checkpoint.mdar").exists());
    assert!(ws.join("pretrain/checkpoint.json").exists());
    let metrics = fs::read_to_string(ws.join("pretrain/metrics.jsonl")).unwrap();
    assert!(metrics.lines().count() >= 1);

    run(&["codes"]);
    let codes_text = fs::read_to_string(ws.join("cache/codes/codes.jsonl")).unwrap();
    assert_eq!(codes_text.lines().count(), 36);
    let first: Value = serde_json::from_str(codes_text.lines().next().unwrap()).unwrap();
    assert_eq!(first["c0"].as_array().unwrap().len(), 8);
    assert_eq!(first["s0"].as_array().unwrap().len(), 4);

    let out = run(&["sample", "--n", "2", "--wc", "3", "--ws", "3"]);
    assert!(stdout(&out).contains("trained denoiser"));
    assert!(ws.join("denoiser/denoiser.mdar").exists());
    assert!(ws.join("samples/sample-000.f32").exists());
    assert!(ws.join("samples/sample-001.f32").exists());
    let sidecar = json_file(&ws.join("samples/sample-000.json"));
    assert_eq!(sidecar["shape"], serde_json::json!([8, 8, 8]));
    // Style came from a donor in another domain than the content reference.
    assert_ne!(sidecar["domain_id"], first["domain_id"]);

    // A second sampling run reuses the cached denoiser.
    let out = run(&["sample", "--n", "1", "--wc", "3", "--ws", "3"]);
    assert!(!stdout(&out).contains("trained denoiser"));

    // Scratch denoiser lands in its own directory.
    run(&["sample", "--n", "1", "--no-init", "--out", "ws/samples-scratch"]);
    assert!(ws.join("denoiser-scratch/denoiser.mdar").exists());
    assert!(ws.join("samples-scratch/sample-000.f32").exists());

    run(&["augment-train", "--labels", "0.5", "--target-domain", "2"]);
    assert!(ws.join("finetune-seg/segmodel.mdar").exists());
    let report = json_file(&ws.join("finetune-seg/report.json"));
    let dice = report["mean_dice"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&dice), "dice {}", dice);
    assert_eq!(report["target_domain"], serde_json::json!(2));

    run(&["augment-train", "--task", "cls", "--labels", "0.5", "--target-domain", "2"]);
    let report = json_file(&ws.join("finetune-cls/report.json"));
    assert!(report["accuracy"].as_f64().is_some());

    run(&["probe"]);
    let report = json_file(&ws.join("probe/probe.json"));
    for probe in ["style", "content"] {
        let acc = report[probe]["accuracy"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
    assert!(report["silhouette_style"].as_f64().is_some());

    run(&["sweep"]);
    let report = json_file(&ws.join("sweep/sweep.json"));
    for grid in ["r_d", "r_c"] {
        let rows = report[grid].as_array().unwrap();
        assert_eq!(rows.len(), 2);
        for row in rows {
            let row = row.as_array().unwrap();
            assert_eq!(row.len(), 2);
            for v in row {
                let v = v.as_f64().unwrap();
                assert!((0.0..=1.0).contains(&v), "{} cell {}", grid, v);
            }
        }
    }

    run(&["mmd", "--domain-a", "0", "--domain-b", "1"]);
    let report = json_file(&ws.join("mmd/mmd.json"));
    assert!(report["value"].as_f64().unwrap() >= -1e-9);
    assert_eq!(report["n_a"], serde_json::json!(12));

    run(&["mmd", "--dir-a", "ws/samples", "--domain-b", "1", "--out", "ws/mmd-samples"]);
    let report = json_file(&ws.join("mmd-samples/mmd.json"));
    assert_eq!(report["n_a"], serde_json::json!(2));

    run(&["export"]);
    let text = fs::read_to_string(ws.join("export/embeddings.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 37);
    let header: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(header["record"], serde_json::json!("header"));
    assert_eq!(header["count"], serde_json::json!(36));
}
