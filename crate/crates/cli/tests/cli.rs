use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn rgd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rgd")).args(args).output().expect("binary runs")
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn oracle_suite_passes() {
    let o = rgd(&["oracle", "--n", "10", "--trials", "200", "--rho-max", "0.5"]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).ends_with("PASS\n"));
}

#[test]
fn gradcheck_suite_passes() {
    let o = rgd(&["gradcheck", "--trials", "10"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert_eq!(stdout(&o).matches(", 0 failed").count(), 3);
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(config("toy_sgd.json")).unwrap();
    let bad = text.replacen("\"eval_every\"", "\"eval_evry\"", 1);
    let path = dir.path().join("bad.json");
    fs::write(&path, bad).unwrap();
    let o = rgd(&["train", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("unknown field `eval_evry`"), "{err}");
    assert!(err.contains("line "), "{err}");
}

#[test]
fn missing_config_file_is_a_config_error() {
    let o = rgd(&["train", "/nonexistent/config.json"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_arguments_exit_two() {
    assert_eq!(rgd(&["oracle", "--n", "1"]).status.code(), Some(2));
    assert_eq!(rgd(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn train_output_is_reproducible() {
    let a = rgd(&["train", config("toy_rgd.json").to_str().unwrap()]);
    let b = rgd(&["train", config("toy_rgd.json").to_str().unwrap()]);
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    assert!(stdout(&a).starts_with("step,split,"), "{}", stdout(&a));
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn seed_flag_changes_the_run() {
    let path = config("toy_rgd.json");
    let a = rgd(&["train", path.to_str().unwrap()]);
    let b = rgd(&["--seed", "7", "train", path.to_str().unwrap()]);
    assert_eq!(b.status.code(), Some(0));
    assert_ne!(a.stdout, b.stdout);
}

#[test]
fn report_over_the_toy_pair() {
    let dir = tempfile::tempdir().unwrap();
    let sgd = dir.path().join("sgd.csv");
    let rgd_trace = dir.path().join("rgd.json");
    for (cfg, out) in [("toy_sgd.json", &sgd), ("toy_rgd.json", &rgd_trace)] {
        let o = rgd(&["train", config(cfg).to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let o = rgd(&["report", sgd.to_str().unwrap(), rgd_trace.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = stdout(&o);
    let header: Vec<&str> = table.lines().next().unwrap().split(',').collect();
    let rare = header.iter().position(|h| *h == "rare_l2").unwrap();
    let frequent = header.iter().position(|h| *h == "frequent_l2").unwrap();
    let final_row = |run: &str| -> Vec<String> {
        table
            .lines()
            .map(|l| l.split(',').map(str::to_string).collect::<Vec<_>>())
            .find(|r| r[0] == run && r[1] == "train")
            .unwrap()
    };
    let (s, r) = (final_row("sgd"), final_row("rgd"));
    assert_eq!(s[2], "1000");
    for row in [&s, &r] {
        assert!(row[rare].parse::<f64>().unwrap().is_finite());
        assert!(row[frequent].parse::<f64>().unwrap().is_finite());
    }
    assert!(r[rare].parse::<f64>().unwrap() < s[rare].parse::<f64>().unwrap());
}

#[test]
fn report_rejects_unreadable_trace() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("junk.csv");
    fs::write(&path, "not,a,trace\n1,2,3\n").unwrap();
    assert_eq!(rgd(&["report", path.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn sweep_selects_and_writes_config() {
    let dir = tempfile::tempdir().unwrap();
    let best = dir.path().join("best.json");
    let o = rgd(&["sweep", config("label_noise_sweep.json").to_str().unwrap(), "--best-config", best.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.ends_with(",true")).count(), 1);
    let selected = fs::read_to_string(best).unwrap();
    assert!(selected.contains("\"divergence\": \"kl\""), "{selected}");
}
