//! End-to-end checks of the `starpath` binary: train -> analyze -> plot,
//! exit codes, and the STARPATH_OUT override.

use std::path::Path;
use std::process::{Command, Output};

fn starpath() -> Command {
    Command::new(env!("CARGO_BIN_EXE_starpath"))
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed ({:?}):\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_ls_config(dir: &Path, out_dir: &Path) -> std::path::PathBuf {
    let path = dir.join("ls.ini");
    std::fs::write(
        &path,
        format!(
            "[problem]\nkind = least_squares\nn = 10\nd = 16\nseed = 4\n\
             [run]\neta = 0.03\nepochs = 12\nseed = 9\nrecord = full\n\
             [analysis]\nreference = planted\n\
             [output]\ndir = {}\n",
            out_dir.display()
        ),
    )
    .unwrap();
    path
}

#[test]
fn pipeline_runs_and_is_deterministic() {
    let run_pipeline = |out_dir: &Path| -> Vec<(String, Vec<u8>)> {
        let config = write_ls_config(out_dir, out_dir);
        ok(&starpath().args(["train", "-c"]).arg(&config).output().unwrap());
        let trace = out_dir.join("trace.bin");
        ok(&starpath()
            .args(["analyze", "-t"])
            .arg(&trace)
            .arg("-c")
            .arg(&config)
            .output()
            .unwrap());
        ok(&starpath().args(["plot", "-d"]).arg(out_dir).output().unwrap());
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(out_dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|e| e != "ini"))
            .map(|p| {
                (
                    p.file_name().unwrap().to_str().unwrap().to_string(),
                    std::fs::read(&p).unwrap(),
                )
            })
            .collect();
        files.sort();
        files
    };

    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let a = run_pipeline(d1.path());
    let b = run_pipeline(d2.path());

    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(
        names,
        [
            "audits.csv",
            "distance.svg",
            "epochs.csv",
            "fraction.svg",
            "iters.csv",
            "norm.svg",
            "residual.svg",
            "trace.bin"
        ]
    );
    // identical bytes from identical configs, file by file
    for ((name_a, bytes_a), (name_b, bytes_b)) in a.iter().zip(&b) {
        assert_eq!(name_a, name_b);
        assert_eq!(bytes_a, bytes_b, "{name_a} differs between runs");
    }

    // CSV row counts follow the run shape
    let epochs_csv = String::from_utf8(a[2].1.clone()).unwrap();
    assert_eq!(epochs_csv.lines().count(), 1 + 12);
    let iters_csv = String::from_utf8(a[4].1.clone()).unwrap();
    assert_eq!(iters_csv.lines().count(), 1 + 10 * 12);

    // SVGs parse as balanced XML
    for (name, bytes) in &a {
        if name.ends_with(".svg") {
            assert_balanced_xml(&String::from_utf8(bytes.clone()).unwrap(), name);
        }
    }
}

/// Minimal structural XML check: tags nest properly and quotes balance.
fn assert_balanced_xml(text: &str, name: &str) {
    let mut stack: Vec<&str> = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find('<') {
        let end = rest[start..].find('>').unwrap_or_else(|| panic!("{name}: unclosed tag")) + start;
        let tag = &rest[start + 1..end];
        assert_eq!(tag.matches('"').count() % 2, 0, "{name}: unbalanced quotes");
        if let Some(closer) = tag.strip_prefix('/') {
            assert_eq!(stack.pop(), Some(closer), "{name}: mismatched </{closer}>");
        } else if !tag.ends_with('/') && !tag.starts_with('?') && !tag.starts_with('!') {
            stack.push(tag.split_whitespace().next().unwrap());
        }
        rest = &rest[end + 1..];
    }
    assert!(stack.is_empty(), "{name}: unclosed tags {stack:?}");
}

#[test]
fn starpath_out_overrides_config_dir() {
    let dir = tempfile::tempdir().unwrap();
    let override_dir = tempfile::tempdir().unwrap();
    let config = write_ls_config(dir.path(), dir.path().join("ignored").as_path());
    let out = starpath()
        .args(["train", "-c"])
        .arg(&config)
        .env("STARPATH_OUT", override_dir.path())
        .output()
        .unwrap();
    ok(&out);
    assert!(override_dir.path().join("trace.bin").exists());
    assert!(!dir.path().join("ignored").exists());
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.ini");
    std::fs::write(&config, "[problem]\nkind = least_squares\nn = 5\n").unwrap();
    let out = starpath().args(["train", "-c"]).arg(&config).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("'d'") || stderr.contains("'seed'"), "{stderr}");
}

#[test]
fn divergence_exits_3_with_partial_trace() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("diverge.ini");
    std::fs::write(
        &config,
        format!(
            "[problem]\nkind = least_squares\nn = 8\nd = 12\nseed = 2\n\
             [run]\neta = 50.0\nepochs = 100\nseed = 3\n\
             [output]\ndir = {}\n",
            dir.path().display()
        ),
    )
    .unwrap();
    let out = starpath().args(["train", "-c"]).arg(&config).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(dir.path().join("trace.bin").exists(), "partial trace missing");
}

#[test]
fn fingerprint_mismatch_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_ls_config(dir.path(), dir.path());
    ok(&starpath().args(["train", "-c"]).arg(&config).output().unwrap());
    // same shapes, different seed -> different problem fingerprint
    let other = dir.path().join("other.ini");
    let text = std::fs::read_to_string(&config).unwrap().replace("seed = 4", "seed = 5");
    std::fs::write(&other, text).unwrap();
    let out = starpath()
        .args(["analyze", "-t"])
        .arg(dir.path().join("trace.bin"))
        .arg("-c")
        .arg(&other)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn missing_csv_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    let out = starpath().args(["plot", "-d"]).arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn empty_iters_csv_prints_notice() {
    // boundaries-only recording yields a header-only iters.csv; plot must
    // omit fraction.svg and say so
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("sparse.ini");
    std::fs::write(
        &config,
        format!(
            "[problem]\nkind = least_squares\nn = 10\nd = 16\nseed = 4\n\
             [run]\neta = 0.03\nepochs = 6\nseed = 9\nrecord = boundaries\n\
             [analysis]\nreference = planted\n\
             [output]\ndir = {}\n",
            dir.path().display()
        ),
    )
    .unwrap();
    ok(&starpath().args(["train", "-c"]).arg(&config).output().unwrap());
    ok(&starpath()
        .args(["analyze", "-t"])
        .arg(dir.path().join("trace.bin"))
        .arg("-c")
        .arg(&config)
        .output()
        .unwrap());
    let out = starpath().args(["plot", "-d"]).arg(dir.path()).output().unwrap();
    ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("fraction.svg omitted"), "{stdout}");
    assert!(!dir.path().join("fraction.svg").exists());
}
