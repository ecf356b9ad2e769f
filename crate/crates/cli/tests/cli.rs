use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--set", "seeds=[0]",
    "--set", "protocol.k=4",
    "--set", "protocol.t=2",
    "--set", "protocol.rounds=6",
    "--set", "optimizer.lr=0.05",
    "--set", "protocol.c=0.5",
    "--set", "data.n=512",
    "--set", "data.m=8",
    "--set", "data.classes=4",
    "--set", "data.sigma=1.0",
    "--set", "data.n_test=200",
    "--set", "data.n_aux=128",
    "--set", "model.hidden=16",
    "--set", "calibration.n_models=3",
    "--set", "calibration.n_keys=300",
    "--set", "scalability.k_values=[2,4]",
];

fn twmark(args: &[&str], out: &Path) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_twmark"));
    cmd.args(args);
    if !matches!(args[0], "verify" | "report") {
        cmd.args(TINY).arg("--out").arg(out);
    }
    cmd.env("TWMARK_WORKERS", "2").output().expect("binary runs")
}

#[test]
fn train_then_verify_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let train = twmark(&["train"], out);
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));

    let key = |i: u32| out.join(format!("train/seed0/keys/client{i:03}.key"));
    let ckpt = |r: u32| out.join(format!("train/seed0/checkpoints/round_{r:04}.ckpt"));
    let cal = out.join("calibration.toml");
    let path = |p: &Path| p.to_str().unwrap().to_string();
    let verify = |model: &Path, keys: &[u32], extra: &[&str]| {
        let mut args = vec!["verify".to_string(), "--model".into(), path(model), "--calibration".into(), path(&cal)];
        args.extend(["--inputs", "8", "--hidden", "16", "--classes", "4"].map(String::from));
        for &k in keys {
            args.push("--key".into());
            args.push(path(&key(k)));
        }
        args.extend(extra.iter().map(|s| s.to_string()));
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        twmark(&refs, out)
    };

    let ok = verify(&ckpt(6), &[1, 3], &["--check-commitment"]);
    let stdout = String::from_utf8_lossy(&ok.stdout);
    assert_eq!(ok.status.code(), Some(0), "{stdout}{}", String::from_utf8_lossy(&ok.stderr));
    assert!(stdout.contains("decision accept"));
    assert!(stdout.contains("commitment ok"));

    let initial = verify(&ckpt(0), &[2, 4], &[]);
    assert_eq!(initial.status.code(), Some(1), "{}", String::from_utf8_lossy(&initial.stdout));

    let short = verify(&ckpt(6), &[1], &[]);
    assert_eq!(short.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&short.stderr).contains("1 shares, 2 required"));

    let wrong_arch = twmark(
        &["verify", "--model", &path(&ckpt(6)), "--calibration", &path(&cal), "--key", &path(&key(1)), "--key", &path(&key(2))],
        out,
    );
    assert_eq!(wrong_arch.status.code(), Some(2));
}

#[test]
fn attack_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let a = twmark(&["attack", "--spec", "kind = \"prune_magnitude\", ratio = 0.5"], out);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert!(String::from_utf8_lossy(&a.stdout).contains("prune_magnitude"));
    assert!(out.join("attack_prune_magnitude_seed0.csv").exists());

    let bad = twmark(&["attack", "--spec", "kind = \"nope\""], out);
    assert_eq!(bad.status.code(), Some(2));

    let r = twmark(&["report", "--dir", out.to_str().unwrap()], out);
    assert!(r.status.success());
    assert!(String::from_utf8_lossy(&r.stdout).contains("config_hash"));
}

#[test]
fn bad_override_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = twmark(&["calibrate", "--set", "nonexistent.key=1"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}
