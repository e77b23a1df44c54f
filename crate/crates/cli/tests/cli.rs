use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SCENARIOS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/scenarios");

fn evop(args: &[&str], config: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_evop"));
    cmd.args(args).env_remove("EVOP_CONFIG");
    if let Some(c) = config {
        cmd.env("EVOP_CONFIG", c);
    }
    cmd.output().expect("spawn evop")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn scenario(name: &str) -> String {
    format!("{SCENARIOS}/{name}.scn")
}

#[test]
fn run_writes_trace_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.trace");
    let report = dir.path().join("r.txt");
    let o = evop(
        &[
            "sim",
            "run",
            "--scenario",
            &scenario("overflow"),
            "--trace",
            trace.to_str().unwrap(),
            "--report",
            report.to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = fs::read_to_string(&report).unwrap();
    assert!(r.starts_with("evop-report v1\n"));
    assert!(r.contains("\nsessions_by_first_provider.public 1\n"));
    assert!(r.contains("\nsessions_by_first_provider.private 2\n"));
    let t = fs::read_to_string(&trace).unwrap();
    assert_eq!(
        r.lines().find(|l| l.starts_with("trace_lines ")).unwrap(),
        format!("trace_lines {}", t.lines().count())
    );
}

#[test]
fn same_seed_same_trace_other_seed_diverges() {
    let dir = tempfile::tempdir().unwrap();
    let path = |n: &str| dir.path().join(n).to_str().unwrap().to_owned();
    for (seed, name) in [("1", "a"), ("1", "b"), ("2", "c")] {
        let o = evop(
            &[
                "sim",
                "run",
                "--scenario",
                &scenario("fill"),
                "--seed",
                seed,
                "--trace",
                &path(name),
            ],
            None,
        );
        assert_eq!(code(&o), 0);
    }
    let same = evop(&["sim", "diff", &path("a"), &path("b")], None);
    assert_eq!(code(&same), 0);
    let differ = evop(&["sim", "diff", &path("a"), &path("c")], None);
    assert_eq!(code(&differ), 1);
    assert!(stdout(&differ).contains("first difference at line 1"));
    let missing = evop(&["sim", "diff", &path("a"), &path("nope")], None);
    assert_eq!(code(&missing), 2);
}

#[test]
fn invalid_scenario_reports_every_problem_and_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.scn");
    fs::write(
        &bad,
        "evop-scenario v1\nduration ten\nat 5 arrive a model=nosuch\nat 9 depart ghost\nbalancer cpu_high=2\n",
    )
    .unwrap();
    let o = evop(&["sim", "run", "--scenario", bad.to_str().unwrap()], None);
    assert_eq!(code(&o), 1);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 2"), "{err}");
    let missing = evop(&["sim", "run", "--scenario", "/nonexistent.scn"], None);
    assert_eq!(code(&missing), 1);
    let usage = evop(&["sim", "run"], None);
    assert_eq!(code(&usage), 1);
}

#[test]
fn library_register_then_ls() {
    let dir = tempfile::tempdir().unwrap();
    let lib = dir.path().join("lib.txt");
    let desc = dir.path().join("desc.txt");
    fs::write(
        &desc,
        "image hydro models=topmodel-stub max_sessions=3\nimage flux models=fluxmodel-stub\n",
    )
    .unwrap();
    let config = dir.path().join("evop.conf");
    fs::write(&config, format!("evop-config v1\nlibrary path={}\n", lib.display())).unwrap();

    let o = evop(
        &["library", "register", "--file", desc.to_str().unwrap()],
        Some(&config),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("registered hydro v1"));
    let ls = stdout(&evop(&["library", "ls"], Some(&config)));
    assert!(ls.contains("hydro\tv1\ttopmodel-stub\tmax_sessions=3"), "{ls}");
    assert!(ls.contains("flux\tv1"));

    // same image again: a new version
    let o = evop(
        &["library", "register", "--file", desc.to_str().unwrap()],
        Some(&config),
    );
    assert!(stdout(&o).contains("registered hydro v2"));

    // a model already served by another image is a conflict
    fs::write(&desc, "image other models=topmodel-stub\n").unwrap();
    let o = evop(
        &["library", "register", "--file", desc.to_str().unwrap()],
        Some(&config),
    );
    assert_eq!(code(&o), 1);
    let ls = stdout(&evop(&["library", "ls", "--library", lib.to_str().unwrap()], None));
    assert!(!ls.contains("other"));

    fs::write(&desc, "image broken max_sessions=0\n").unwrap();
    let o = evop(
        &["library", "register", "--file", desc.to_str().unwrap()],
        Some(&config),
    );
    assert_eq!(code(&o), 1);
}

#[test]
fn broker_recover_reads_journal_and_reports_torn_tail() {
    let dir = tempfile::tempdir().unwrap();
    let journal = dir.path().join("sessions.journal");
    let config = dir.path().join("evop.conf");
    fs::write(&config, format!("evop-config v1\njournal path={}\n", journal.display())).unwrap();
    let o = evop(&["sim", "run", "--scenario", &scenario("fill")], Some(&config));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let clean = stdout(&evop(
        &["broker", "recover", "--cache", journal.to_str().unwrap()],
        None,
    ));
    assert!(clean.contains("truncation none"), "{clean}");

    let mut bytes = fs::read(&journal).unwrap();
    bytes.truncate(bytes.len() - 3);
    fs::write(&journal, &bytes).unwrap();
    let o = evop(&["broker", "recover", "--cache", journal.to_str().unwrap()], None);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("truncation torn record"), "{}", stdout(&o));
    // read-only: the file is untouched
    assert_eq!(fs::read(&journal).unwrap(), bytes);

    let o = evop(&["broker", "recover", "--cache", "/nonexistent/journal"], None);
    assert_eq!(code(&o), 2);
}

#[test]
fn bad_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("evop.conf");
    fs::write(&config, "evop-config v1\nwidget x=1\n").unwrap();
    let o = evop(&["sim", "run", "--scenario", &scenario("fill")], Some(&config));
    assert_eq!(code(&o), 1);
}
