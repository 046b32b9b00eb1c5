use std::path::Path;
use std::process::{Command, Output};

fn dgpmpc(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dgpmpc"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("runs the CLI")
}

fn mse_row(metrics: &str, variant: &str, iteration: usize) -> Vec<f64> {
    metrics
        .lines()
        .map(|l| l.split_whitespace().collect::<Vec<_>>())
        .find(|f| f.len() >= 5 && f[0] == variant && f[1] == iteration.to_string())
        .unwrap_or_else(|| panic!("no row for {variant} {iteration} in\n{metrics}"))[2..5]
        .iter()
        .map(|v| v.parse().unwrap())
        .collect()
}

#[test]
fn train_then_track_reuses_the_saved_model() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    let train = dgpmpc(&["train"], out);
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    assert!(out.join("long_gp.json").is_file());
    assert!(out.join("training.csv").is_file());
    let saved = std::fs::read(out.join("long_gp.json")).unwrap();

    let track = dgpmpc(&["track", "--variant", "dgp", "--iterations", "3"], out);
    assert!(track.status.success(), "{}", String::from_utf8_lossy(&track.stderr));
    assert_eq!(std::fs::read(out.join("long_gp.json")).unwrap(), saved);
    for k in 1..=3 {
        let csv = std::fs::read_to_string(out.join(format!("dgp_iter{k}.csv"))).unwrap();
        assert!(csv.lines().count() > 100);
    }
    assert!(!out.join("dgp_iter4.csv").exists());
    assert!(out.join("metrics.json").is_file());
    let metrics = std::fs::read_to_string(out.join("metrics.txt")).unwrap();
    let (first, last) = (mse_row(&metrics, "dgp", 1), mse_row(&metrics, "dgp", 3));
    for axis in 0..3 {
        assert!(last[axis] < first[axis], "axis {axis}: {} -> {}", first[axis], last[axis]);
    }
}

#[test]
fn usage_and_config_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    let bad_variant = dgpmpc(&["track", "--variant", "gpr"], out);
    assert_eq!(bad_variant.status.code(), Some(1));
    let bad_flag = dgpmpc(&["compare", "--sedes", "2"], out);
    assert_eq!(bad_flag.status.code(), Some(1));
    let missing = dgpmpc(&["--config", "/nonexistent/run.toml", "train"], out);
    assert_eq!(missing.status.code(), Some(1));

    let toml = out.join("bad.toml");
    std::fs::write(&toml, "[gp]\nlambda = \"high\"\n").unwrap();
    let bad_toml = dgpmpc(&["--config", toml.to_str().unwrap(), "train"], out);
    assert_eq!(bad_toml.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&bad_toml.stderr).is_empty());
}

#[test]
fn selftest_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let run = dgpmpc(&["selftest"], tmp.path());
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stdout));
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 8, "{stdout}");
}
