use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use panofill::raster::{BinaryMask, Panorama};

const TINY: &str = r#"
height = 32
width = 64
batch_size = 2
max_steps = 3
checkpoint_every = 2
log_every = 1
eval_every = 3

[generator]
base_channels = 4
n_dilated_blocks = 1
style_dim = 8
pan_hidden = 8

[discriminator]
base_channels = 4
n_layers = 2
max_channels = 8

[features]
channels = [4, 4, 4, 4]

[data]
n_samples = 4

[experiment]
seeds = [0]
degrade_ratios = [0.0, 0.3]
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_panofill"))
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn write_tiny(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p
}

fn train_tiny(dir: &Path) -> PathBuf {
    let cfg = write_tiny(dir);
    let o = run(&["train", "--config", cfg.to_str().unwrap()], dir);
    assert!(o.status.success(), "{}", stderr(&o));
    PathBuf::from(stdout(&o).trim())
}

#[test]
fn gen_data_writes_a_manifest_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny(tmp.path());
    let mut outs = Vec::new();
    for name in ["a", "b"] {
        let o = run(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", name, "--n", "3", "--seed", "5"], tmp.path());
        assert!(o.status.success(), "{}", stderr(&o));
        let manifest = tmp.path().join(stdout(&o).trim());
        assert!(manifest.ends_with("manifest.json") && manifest.exists());
        outs.push(tmp.path().join(name));
    }
    let files = files_under(&outs[0]);
    assert!(files.len() > 3);
    for rel in files {
        assert_eq!(fs::read(outs[0].join(&rel)).unwrap(), fs::read(outs[1].join(&rel)).unwrap(), "{}", rel.display());
    }
}

#[test]
fn unknown_config_key_exits_2_and_names_it() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("bad.toml");
    fs::write(&p, "max_stepz = 10\n").unwrap();
    let o = run(&["train", "--config", p.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("max_stepz"), "{}", stderr(&o));

    let o = run(&["train", "--set", "generator.widht=3"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("widht"));
}

#[test]
fn unknown_protocol_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["ablate", "--protocol", "nope"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_input_file_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["gen-data", "--config", "does/not/exist.toml", "--out", "x"], tmp.path());
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn train_infer_eval_and_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let ckpt = dir.join(train_tiny(dir));
    assert!(ckpt.exists(), "{}", ckpt.display());
    let run_dir = ckpt.parent().unwrap().parent().unwrap();
    assert!(run_dir.file_name().unwrap().to_str().unwrap().ends_with("-seed0"));
    let log = fs::read_to_string(run_dir.join("log.jsonl")).unwrap();
    let rows: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.iter().filter(|r| r["kind"] == "loss").count(), 3);
    assert!(rows.iter().any(|r| r["kind"] == "eval"));
    for key in ["L_rec", "L_perc", "L_sty", "L_G", "L_D", "L_total"] {
        assert!(rows[0][key].is_number(), "{key}");
    }

    // infer with an empty mask returns the input unchanged
    let img = Panorama::from_fn(32, 64, |i, j| [(i * 7 % 256) as f32 / 255.0, (j * 3 % 256) as f32 / 255.0, 0.5]).quantized();
    img.save_png(&dir.join("in.png")).unwrap();
    BinaryMask::filled(32, 64, 0).save_mask_png(&dir.join("m.png")).unwrap();
    let o = run(&["infer", "--ckpt", ckpt.to_str().unwrap(), "--image", "in.png", "--mask", "m.png"], dir);
    assert!(o.status.success(), "{}", stderr(&o));
    let comp = dir.join(stdout(&o).trim());
    assert_eq!(Panorama::load_png(&comp).unwrap(), Panorama::load_png(&dir.join("in.png")).unwrap());
    assert_eq!(fs::read(&comp).unwrap(), fs::read(dir.join("in.png")).unwrap());

    // eval on a dataset whose masks are empty compares identical pairs
    let o = run(&["gen-data", "--config", "tiny.toml", "--out", "ds", "--n", "2"], dir);
    assert!(o.status.success(), "{}", stderr(&o));
    for e in fs::read_dir(dir.join("ds/masks")).unwrap() {
        BinaryMask::filled(32, 64, 0).save_mask_png(&e.unwrap().path()).unwrap();
    }
    let o = run(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--data", "ds"], dir);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    let total_full = table.lines().find(|l| l.contains("total") && l.contains("full")).expect("total row");
    assert!(total_full.contains("inf"), "{table}");
    assert!(total_full.contains("1.0000") && total_full.contains("0.0000"), "{table}");

    // resuming under a changed architecture is refused
    let o = run(&["train", "--config", "tiny.toml", "--set", "generator.base_channels=8", "--resume", ckpt.to_str().unwrap()], dir);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("generator.base_channels"));

    // a longer budget continues from the checkpoint
    let o = run(&["train", "--config", "tiny.toml", "--set", "max_steps=4", "--resume", ckpt.to_str().unwrap()], dir);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).trim().ends_with("step_000004.ckpt"));
}

#[test]
fn corrupted_checkpoint_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let ckpt = dir.join(train_tiny(dir));
    let mut bytes = fs::read(&ckpt).unwrap();
    let k = bytes.len() / 2;
    bytes[k] ^= 0xff;
    fs::write(&ckpt, bytes).unwrap();
    let o = run(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--data", "nowhere"], dir);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn ablation_smoke_run_emits_three_rows() {
    let tmp = tempfile::tempdir().unwrap();
    write_tiny(tmp.path());
    let o = run(&["ablate", "--protocol", "ablation", "--config", "tiny.toml", "--set", "max_steps=2"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 4, "{out}");
    for v in ["backbone", "layout_map_only", "full"] {
        assert!(lines.iter().any(|l| l.trim_start().starts_with(v)), "{out}");
    }
    assert!(lines[0].contains("boundary_err"));
}
