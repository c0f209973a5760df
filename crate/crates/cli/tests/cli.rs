use std::process::{Command, Output};

fn slicekit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slicekit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

#[test]
fn corpus_entries_reproduce_their_verdicts() {
    for id in ["heisenberg", "double-oscillator-counterexample", "all"] {
        let o = slicekit(&["corpus", "run", id]);
        assert_eq!(code(&o), 0, "{id}: {}", String::from_utf8_lossy(&o.stdout));
    }
}

#[test]
fn usage_and_definition_errors_exit_with_2() {
    let o = slicekit(&[
        "check-slicing",
        "--system",
        "missing.toml",
        "--slicing",
        "s",
        "--field",
        "Z",
    ]);
    assert_eq!(code(&o), 2);
    assert_eq!(code(&slicekit(&["corpus", "run", "nope"])), 2);
    assert_eq!(code(&slicekit(&["check-slicing", "--bogus"])), 2);
    let o = slicekit(&[
        "check-slicing",
        "--corpus",
        "radial",
        "--slicing",
        "nope",
        "--field",
        "Z",
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn failing_checks_exit_with_1() {
    let o = slicekit(&[
        "check-slicing",
        "--corpus",
        "oscillator-1dof",
        "--slicing",
        "fast_path",
        "--field",
        "oscillator",
    ]);
    assert_eq!(code(&o), 1);
    let o = slicekit(&[
        "hj-residual",
        "--corpus",
        "oscillator-1dof",
        "--structure",
        "oscillator",
        "--slicing",
        "fast_path",
        "--tolerance",
        "1e-12",
    ]);
    assert_eq!(code(&o), 0);
    // unmet hypothesis: the check cannot be carried out
    let o = slicekit(&[
        "check-fibred",
        "--corpus",
        "double-oscillator-counterexample",
        "--fibration",
        "pr1",
        "--mode",
        "theorem6",
        "--structure",
        "oscillator",
        "--map",
        "alpha",
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn json_report_schema() {
    let o = slicekit(&[
        "check-constant",
        "--corpus",
        "radial",
        "--map",
        "direction",
        "--field",
        "Z",
        "--samples",
        "5",
        "--format",
        "json",
    ]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    for key in [
        "check",
        "system",
        "tolerance",
        "samples",
        "max",
        "mean",
        "verdict",
    ] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    assert_eq!(v["samples"].as_array().unwrap().len(), 5);
    assert!(v["samples"][0].get("point").is_some() && v["samples"][0].get("residual").is_some());
    assert_eq!(v["verdict"], "pass");
}

#[test]
fn csv_output_and_out_file() {
    let dir = std::env::temp_dir().join(format!("slicekit-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("report.csv");
    let o = slicekit(&[
        "check-slicing",
        "--corpus",
        "limit-cycle",
        "--map",
        "unit_circle",
        "--field",
        "Z",
        "--samples",
        "3",
        "--format",
        "csv",
        "--out",
        path.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    assert!(o.stdout.is_empty());
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("check,index,x0,residual,error\n"));
    assert_eq!(text.lines().count(), 4);
    assert!(!text.contains('\r'));
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn user_files_are_accepted() {
    let dir = std::env::temp_dir().join(format!("slicekit-file-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("osc.toml");
    std::fs::write(
        &path,
        r#"
[[space]]
name = "P"
coords = ["q", "p"]

[[form]]
name = "w"
space = "P"
kind = "symplectic"
canonical = [["q", "p"]]

[[structure]]
name = "osc"
form = "w"
hamiltonian = "(q^2 + p^2)/2"
"#,
    )
    .unwrap();
    let p = path.to_str().unwrap();
    let o = slicekit(&[
        "involution",
        "--system",
        p,
        "--structure",
        "osc",
        "--function",
        "q^2 + p^2",
        "--function",
        "(q^2 + p^2)^2",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = slicekit(&[
        "involution",
        "--system",
        p,
        "--structure",
        "osc",
        "--function",
        "q",
        "--function",
        "p",
    ]);
    assert_eq!(code(&o), 1);
    let o = slicekit(&[
        "integrate",
        "--system",
        p,
        "--field",
        "osc",
        "--x0",
        "1,0",
        "--t-end",
        "1",
        "--format",
        "csv",
    ]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("t,q,p\n"));
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn thread_cap_does_not_change_output() {
    let run = |threads: &str| {
        Command::new(env!("CARGO_BIN_EXE_slicekit"))
            .args(["corpus", "run", "heisenberg", "--format", "json"])
            .env("SLICEKIT_THREADS", threads)
            .output()
            .unwrap()
            .stdout
    };
    assert_eq!(run("1"), run("4"));
}
