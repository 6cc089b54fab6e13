use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ffuse(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ffuse"))
        .current_dir(dir)
        .env_remove("FFUSE_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_value(out: &Output, key: &str) -> f64 {
    let text = String::from_utf8_lossy(&out.stdout);
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in output:\n{text}"))
        .parse()
        .unwrap()
}

fn gen(dir: &Path, frames: &str, seed: &str) {
    let out = ffuse(
        dir,
        &[
            "gen", "--T", frames, "--k1", "32", "--k2", "32", "--rho", "0.65", "--paired", "32",
            "--seed", seed, "--out-u", "u.ffuse", "--out-v", "v.ffuse",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn gen_then_corr_recovers_the_paired_correlation() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), "10000", "0");
    let out = ffuse(tmp.path(), &["corr", "--u", "u.ffuse", "--v", "v.ffuse"]);
    assert!(out.status.success());
    let diag = stdout_value(&out, "max_abs_diag");
    assert!(
        (0.60..=0.70).contains(&diag),
        "max paired correlation {diag}"
    );
    assert!(tmp.path().join("corr.csv").exists());
    let pgm = fs::read(tmp.path().join("corr.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n32 32\n255\n"));
    assert_eq!(pgm.len(), b"P5\n32 32\n255\n".len() + 32 * 32);
}

#[test]
fn train_lowers_projected_correlation_and_writes_a_report() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), "4000", "1");
    let out = ffuse(
        tmp.path(),
        &[
            "train",
            "--u",
            "u.ffuse",
            "--v",
            "v.ffuse",
            "--method",
            "lp",
            "--lambda",
            "0.3",
            "--epsilon",
            "0.2",
            "--steps",
            "400",
            "--lr",
            "0.002",
            "--k",
            "16",
            "--init",
            "tied",
            "--task-weight",
            "0",
            "--seed",
            "0",
            "--report",
            "run",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(stdout_value(&out, "max_abs_corr_initial") >= 0.55);
    assert!(stdout_value(&out, "max_abs_corr_final") <= 0.25);
    for name in [
        "manifest.txt",
        "report.txt",
        "steps.csv",
        "params.json",
        "corr_final.pgm",
    ] {
        assert!(tmp.path().join("run").join(name).exists(), "{name} missing");
    }

    // trained parameters feed back into fuse
    let out = ffuse(
        tmp.path(),
        &[
            "fuse",
            "--method",
            "lp",
            "--u",
            "u.ffuse",
            "--v",
            "v.ffuse",
            "--out",
            "f.ffuse",
            "--params",
            "run/params.json",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("(4000x32)"));
}

#[test]
fn train_reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    gen(tmp.path(), "600", "2");
    fs::copy(tmp.path().join("u.ffuse"), tmp.path().join("t.ffuse")).unwrap();
    for dir in ["a", "b"] {
        let out = ffuse(
            tmp.path(),
            &[
                "train",
                "--u",
                "u.ffuse",
                "--v",
                "v.ffuse",
                "--target",
                "t.ffuse",
                "--method",
                "wsum",
                "--k",
                "8",
                "--output-dim",
                "32",
                "--steps",
                "30",
                "--report",
                dir,
            ],
        );
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let mut names: Vec<_> = fs::read_dir(tmp.path().join("a"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 10);
    for name in names {
        let a = fs::read(tmp.path().join("a").join(&name)).unwrap();
        let b = fs::read(tmp.path().join("b").join(&name)).unwrap();
        assert_eq!(a, b, "{name:?} differs");
    }
}

#[test]
fn fuse_widths_follow_the_method() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ffuse(
        tmp.path(),
        &[
            "gen", "--T", "50", "--k1", "12", "--k2", "7", "--out-u", "u.ffuse", "--out-v",
            "v.ffuse",
        ],
    );
    assert!(out.status.success());
    for (method, extra, width) in [
        ("concat", vec![], "19"),
        ("lp", vec!["--k", "10"], "20"),
        ("wsum", vec!["--k", "10"], "10"),
        ("wsum", vec!["--k", "10", "--project-output"], "80"),
    ] {
        let mut args = vec![
            "fuse", "--method", method, "--u", "u.ffuse", "--v", "v.ffuse", "--out", "f.ffuse",
        ];
        args.extend(extra);
        let out = ffuse(tmp.path(), &args);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        let text = String::from_utf8_lossy(&out.stdout);
        assert!(text.contains(&format!("(50x{width})")), "{method}: {text}");
    }
}

#[test]
fn check_grad_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ffuse(tmp.path(), &["check-grad", "--seed", "3"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout_value(&out, "max_rel_err") < 1e-4);
}

#[test]
fn exit_codes_separate_usage_from_domain_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let usage = ffuse(tmp.path(), &["corr", "--bogus"]);
    assert_eq!(usage.status.code(), Some(2));

    let bad_method = ffuse(
        tmp.path(),
        &[
            "fuse", "--method", "sum", "--u", "a", "--v", "b", "--out", "c",
        ],
    );
    assert_eq!(bad_method.status.code(), Some(2));

    fs::write(tmp.path().join("junk.ffuse"), b"not a feature file").unwrap();
    let domain = ffuse(
        tmp.path(),
        &["corr", "--u", "junk.ffuse", "--v", "junk.ffuse"],
    );
    assert_eq!(domain.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&domain.stderr).contains("unrecognized format"));
}

#[test]
fn seed_environment_variable_overrides_the_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |env_seed: Option<&str>, flag: &str, out: &str| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_ffuse"));
        cmd.current_dir(tmp.path()).env_remove("FFUSE_SEED");
        if let Some(s) = env_seed {
            cmd.env("FFUSE_SEED", s);
        }
        let result = cmd
            .args([
                "gen", "--T", "20", "--k1", "3", "--k2", "3", "--seed", flag, "--out-u", out,
                "--out-v", "v.ffuse",
            ])
            .output()
            .unwrap();
        assert!(result.status.success());
        fs::read(tmp.path().join(out)).unwrap()
    };
    let from_flag = run(None, "5", "a.ffuse");
    let from_env = run(Some("5"), "9", "b.ffuse");
    let other = run(None, "9", "c.ffuse");
    assert_eq!(from_flag, from_env);
    assert_ne!(from_flag, other);
}
