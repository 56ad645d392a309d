//! End-to-end checks of the command-line surface: exit codes, config
//! handling, determinism of file outputs, and the subcommand round trip.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn sadir() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sadir"))
}

fn workdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("sadir-cli-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawn sadir")
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Recursively compare two directories byte for byte.
fn assert_dirs_identical(a: &Path, b: &Path) {
    let mut names: Vec<String> = std::fs::read_dir(a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    let mut names_b: Vec<String> = std::fs::read_dir(b)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names_b.sort();
    assert_eq!(names, names_b);
    for n in names {
        let pa = a.join(&n);
        let pb = b.join(&n);
        if pa.is_dir() {
            assert_dirs_identical(&pa, &pb);
        } else {
            assert_eq!(
                std::fs::read(&pa).unwrap(),
                std::fs::read(&pb).unwrap(),
                "file {n} differs"
            );
        }
    }
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = run(sadir().arg("frobnicate"));
    assert_code(&out, 1);
}

#[test]
fn help_exits_zero() {
    let out = run(sadir().arg("--help"));
    assert_code(&out, 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("synth"));
}

#[test]
fn unknown_config_keys_are_listed() {
    let dir = workdir("cfg");
    let cfg = dir.join("run.cfg");
    std::fs::write(&cfg, "alpha=3.0\nwidget=1\ngadget=2\n").unwrap();
    let out = run(sadir()
        .args(["synth", "--subjects", "1", "--grid", "8"])
        .arg("--config")
        .arg(&cfg)
        .arg("--out-dir")
        .arg(dir.join("out")));
    assert_code(&out, 1);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("widget") && err.contains("gadget"), "{err}");
}

#[test]
fn malformed_volume_file_is_a_format_error() {
    let dir = workdir("badvol");
    let vol = dir.join("broken.svol");
    std::fs::write(&vol, b"definitely not a volume").unwrap();
    let out = run(sadir()
        .args(["slices", "--volume"])
        .arg(&vol)
        .arg("--out")
        .arg(dir.join("s.sls"))
        .arg("--out-dir")
        .arg(&dir));
    assert_code(&out, 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));
}

#[test]
fn synth_is_bit_identical_under_a_seed() {
    let dir = workdir("det");
    for sub in ["a", "b"] {
        let out = run(sadir()
            .args(["synth", "--subjects", "3", "--grid", "10", "--seed", "7"])
            .arg("--out-dir")
            .arg(dir.join(sub)));
        assert_code(&out, 0);
    }
    assert_dirs_identical(&dir.join("a"), &dir.join("b"));
}

#[test]
fn full_pipeline_round_trip_and_determinism() {
    // tiny end-to-end run: synth -> atlas -> train -> reconstruct -> eval
    let dir = workdir("pipeline");
    let data = dir.join("data");
    let out = run(sadir()
        .args(["synth", "--subjects", "4", "--grid", "8", "--seed", "5"])
        .args(["--set", "slice_count=4", "--set", "deform_scale=0.6"])
        .arg("--out-dir")
        .arg(&data));
    assert_code(&out, 0);
    let manifest = data.join("manifest.txt");

    // shared tiny config
    let tiny = [
        "--set",
        "outer_iters=3",
        "--set",
        "epochs=2",
        "--set",
        "alternation_period=1",
        "--set",
        "t_max=6",
        "--set",
        "channels=4",
        "--set",
        "blocks=1",
        "--set",
        "embed_dim=8",
        "--set",
        "se_reduction=2",
        "--set",
        "slice_count=4",
        "--set",
        "x0_clamp=0.5",
    ];

    for sub in ["t1", "t2"] {
        let out = run(sadir()
            .arg("train")
            .arg("--manifest")
            .arg(&manifest)
            .args(tiny)
            .args(["--seed", "11"])
            .arg("--out-dir")
            .arg(dir.join(sub)));
        assert_code(&out, 0);
        assert!(dir.join(sub).join("denoiser.tns").exists());
        assert!(dir.join(sub).join("atlas_ckpt/atlas.svol").exists());
    }
    assert_eq!(
        std::fs::read(dir.join("t1/denoiser.tns")).unwrap(),
        std::fs::read(dir.join("t2/denoiser.tns")).unwrap(),
        "training is not deterministic"
    );

    for sub in ["r1", "r2"] {
        let out = run(sadir()
            .arg("reconstruct")
            .arg("--manifest")
            .arg(&manifest)
            .args(["--subject", "3"])
            .arg("--atlas")
            .arg(dir.join("t1/atlas_ckpt"))
            .arg("--denoiser")
            .arg(dir.join("t1/denoiser.tns"))
            .args(tiny)
            .args(["--seed", "21", "--error-map"])
            .arg("--out-dir")
            .arg(dir.join(sub)));
        assert_code(&out, 0);
    }
    assert_dirs_identical(&dir.join("r1"), &dir.join("r2"));
    assert!(dir.join("r1/recon_003.svol").exists());
    assert!(dir.join("r1/recon_003_v0.svol").exists());
    assert!(dir.join("r1/recon_003_metrics.txt").exists());
    assert!(dir.join("r1/recon_003_error.svol").exists());

    // variational method over the same data, then eval both test subjects
    let rec = dir.join("rec");
    for subject in ["2", "3"] {
        let out = run(sadir()
            .arg("reconstruct")
            .arg("--manifest")
            .arg(&manifest)
            .args(["--subject", subject, "--method", "variational"])
            .arg("--atlas")
            .arg(dir.join("t1/atlas_ckpt"))
            .args(tiny)
            .args(["--set", "var_iters=10"])
            .arg("--out-dir")
            .arg(&rec));
        assert_code(&out, 0);
    }
    let out = run(sadir()
        .arg("eval")
        .arg("--manifest")
        .arg(&manifest)
        .arg("--pred-dir")
        .arg(&rec)
        .args(["--split", "test", "--label", "variational"])
        .arg("--out-dir")
        .arg(dir.join("ev")));
    assert_code(&out, 0);
    let table = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(table.contains("DSC") && table.contains("variational"), "{table}");
    assert!(dir.join("ev/eval_table.txt").exists());
    assert!(dir.join("ev/metrics_002.txt").exists());
}

#[test]
fn eval_on_perfect_reconstructions_reports_unity() {
    // copy the ground truth volumes as "reconstructions"
    let dir = workdir("perfect");
    let data = dir.join("data");
    let out = run(sadir()
        .args(["synth", "--subjects", "4", "--grid", "8", "--seed", "2"])
        .args(["--set", "slice_count=4", "--set", "deform_scale=0.5"])
        .arg("--out-dir")
        .arg(&data));
    assert_code(&out, 0);
    let rec = dir.join("rec");
    std::fs::create_dir_all(&rec).unwrap();
    for i in [2usize, 3] {
        std::fs::copy(
            data.join(format!("subject_{i:03}.svol")),
            rec.join(format!("recon_{i:03}.svol")),
        )
        .unwrap();
    }
    let out = run(sadir()
        .arg("eval")
        .arg("--manifest")
        .arg(data.join("manifest.txt"))
        .arg("--pred-dir")
        .arg(&rec)
        .args(["--split", "test"])
        .arg("--out-dir")
        .arg(dir.join("ev")));
    assert_code(&out, 0);
    let table = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(table.contains("1.000 ±  0.000"), "{table}");
}
