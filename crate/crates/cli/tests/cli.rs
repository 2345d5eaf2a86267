use std::path::Path;
use std::process::Command;

fn stagewise(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_stagewise"))
        .args(args)
        .output()
        .unwrap();
    let text = String::from_utf8_lossy(&out.stdout).into_owned() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap(), text)
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

const TINY_TRAIN: &str = "
[task]
d = 5
T = 6
[optim]
steps = 20
batch_size = 16
[data]
train_size = 40
test_size = 16
[probes]
batch_size = 8
stride = 5
";

#[test]
fn train_writes_outputs_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "train.toml", TINY_TRAIN);
    let mut csvs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let (code, text) = stagewise(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "3"]);
        assert_eq!(code, 0, "{text}");
        for f in [
            "metrics.csv",
            "metrics_kl.svg",
            "model.ckpt",
            "stages.toml",
            "manifest.json",
        ] {
            assert!(out.join(f).exists(), "{f} missing");
        }
        csvs.push(std::fs::read(out.join("metrics.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);

    let plots = dir.path().join("plots");
    let metrics = dir.path().join("a/metrics.csv");
    let (code, _) = stagewise(&["plot", metrics.to_str().unwrap(), "--out", plots.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert!(plots.join("metrics_attention.svg").exists());
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let out = out.to_str().unwrap();
    let typo = write(dir.path(), "typo.toml", "[model]\nheads = 3\n");
    assert_eq!(stagewise(&["train", "--config", &typo, "--out", out]).0, 2);
    let bad_limit = write(dir.path(), "limit.toml", "[probes]\ncontexts = [99]\n");
    assert_eq!(stagewise(&["train", "--config", &bad_limit, "--out", out]).0, 2);
    assert_eq!(
        stagewise(&["verify", "--config", "/nonexistent.toml", "--out", out]).0,
        2
    );
    let junk = write(dir.path(), "junk.csv", "a,b\n1,2\n");
    assert_eq!(stagewise(&["plot", &junk, "--out", out]).0, 2);
    assert_eq!(stagewise(&["no-such-command"]).0, 2);
}

#[test]
fn unwritable_output_aborts_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let file = write(dir.path(), "file", "");
    let (code, text) = stagewise(&["simulate-flow", "--out", &format!("{file}/sub")]);
    assert_eq!(code, 3, "{text}");
}

#[test]
fn verify_exit_code_follows_the_checks() {
    let dir = tempfile::tempdir().unwrap();
    let ok = write(
        dir.path(),
        "ok.toml",
        "checks = [\"early_alignment\", \"halving\"]\n[setup]\nd = 6\nT = 6\n",
    );
    let out = dir.path().join("ok");
    let (code, text) = stagewise(&[
        "verify",
        "--config",
        &ok,
        "--out",
        out.to_str().unwrap(),
        "--threads",
        "2",
    ]);
    assert_eq!(code, 0, "{text}");
    assert!(out.join("halving.toml").exists());

    // a ratio of 1e9 between successive crossing times cannot be met
    let strict = write(
        dir.path(),
        "strict.toml",
        "checks = [\"full_flow_stages\"]\n[setup]\nd = 6\nT = 6\n[stages]\nmin_ratio = 1e9\n",
    );
    let out = dir.path().join("strict");
    let (code, text) = stagewise(&["verify", "--config", &strict, "--out", out.to_str().unwrap()]);
    assert_eq!(code, 1, "{text}");
    assert!(text.contains("ratio_t2_t1"));
}

#[test]
fn generate_and_simulate_write_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "g.toml", "[task]\nd = 4\nT = 6\n[data]\ntrain_size = 10\n");
    let out = dir.path().join("g");
    assert_eq!(
        stagewise(&["generate", "--config", &cfg, "--out", out.to_str().unwrap()]).0,
        0
    );
    assert!(out.join("dataset.mktk").exists());

    let sim = write(dir.path(), "s.toml", "[setup]\nd = 5\nT = 5\n[run]\nt_max = 20.0\n");
    let out = dir.path().join("s");
    assert_eq!(
        stagewise(&["simulate-flow", "--config", &sim, "--out", out.to_str().unwrap()]).0,
        0
    );
    let manifest = std::fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"trajectory.csv\""));
}
