use std::process::Command;

fn run(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_ura-sim")).args(args).output().unwrap()
}

#[test]
fn identical_seeds_give_identical_csv() {
    let args = ["--scenario", "flat_async", "--trials", "3", "--seed", "7", "--snr-list", "5,10"];
    let a = run(&args);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let b = run(&args);
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    assert!(text.starts_with("scenario,snr_db,ebn0_db,trials,"));
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn writes_json_and_graph_files() {
    let dir = std::env::temp_dir().join(format!("ura-sim-test-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let out = dir.join("r.json");
    let graph = dir.join("g.json");
    let o = run(&[
        "--scenario", "flat_sync", "--trials", "1", "--emit", "json", "--channel-model", "fd",
        "--out", out.to_str().unwrap(), "--dump-graph", graph.to_str().unwrap(), "--set", "n_active=4",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(std::fs::read_to_string(&out).unwrap().trim_start().starts_with('['));
    assert!(std::fs::read_to_string(&graph).unwrap().contains("\"nodes\""));
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn rejects_bad_input() {
    assert!(!run(&["--scenario", "flat_sideways"]).status.success());
    assert!(!run(&["--scenario", "flat_sync", "--set", "no_such_key=1"]).status.success());
    assert!(!run(&["--scenario", "fsf_sync", "--preset", "desk_flat", "--trials", "1"]).status.success());
}

#[test]
fn prints_effective_config() {
    let o = run(&["--scenario", "fsf_async", "--print-config", "--set", "n_active=7"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("n_active = 7"));
    assert!(text.contains("n_fft = 512"));
}
