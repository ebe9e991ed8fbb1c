use std::io::{BufRead, BufReader};
use std::process::{Child, Command, Stdio};

const HEADER: &str = "step,empirical_error,sketch_rows,sketch_bytes,amortized_update_ns,comm_bytes,level_selected";

fn sketch() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sketch"))
}

#[test]
fn fd_run_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fd.csv");
    let status = sketch()
        .args(["fd", "--eps", "0.25", "--dim", "8", "--gen", "uniform", "--rows", "200", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(HEADER));
    assert_eq!(lines.count(), 10);
}

#[test]
fn csv_goes_to_stdout_without_out() {
    let out = sketch()
        .args(["sw", "--eps", "0.5", "--dim", "4", "--window", "50", "--gen", "noisy", "--rows", "100", "--query-every", "25"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 5);
    assert!(String::from_utf8_lossy(&out.stderr).contains("max error"));
}

#[test]
fn config_errors_exit_1() {
    let missing_window = sketch()
        .args(["sw", "--eps", "0.5", "--dim", "4", "--gen", "uniform", "--rows", "10"])
        .output()
        .unwrap();
    assert_eq!(missing_window.status.code(), Some(1));
    let bad_flag = sketch().args(["fd", "--eps", "0.5"]).output().unwrap();
    assert_eq!(bad_flag.status.code(), Some(1));
    let both_sources = sketch()
        .args(["fd", "--eps", "0.5", "--dim", "2", "--gen", "uniform", "--rows", "5", "--input", "x.csv"])
        .output()
        .unwrap();
    assert_eq!(both_sources.status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("ragged.csv");
    std::fs::write(&bad, "1,2\n3\n").unwrap();
    let out = sketch().args(["fd", "--eps", "0.5", "--dim", "2", "--input"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn help_exits_0() {
    assert_eq!(sketch().arg("--help").output().unwrap().status.code(), Some(0));
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        self.0.kill().ok();
        self.0.wait().ok();
    }
}

#[test]
fn server_mode_matches_in_process() {
    let mut child = sketch()
        .args(["serve", "--addr", "127.0.0.1:0"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let _server = Server(child);
    let url = line.trim().strip_prefix("listening on ").unwrap().to_string();

    let args = ["attp", "--eps", "0.25", "--dim", "6", "--gen", "noisy", "--rows", "200", "--seed", "4"];
    let local = sketch().args(args).output().unwrap();
    let remote = sketch().args(args).args(["--server", &url]).output().unwrap();
    assert!(remote.status.success(), "{}", String::from_utf8_lossy(&remote.stderr));
    // Timing columns differ; compare everything else.
    let strip = |b: &[u8]| -> Vec<String> {
        String::from_utf8_lossy(b)
            .lines()
            .map(|l| {
                let mut f: Vec<&str> = l.split(',').collect();
                f[4] = "";
                f.join(",")
            })
            .collect()
    };
    assert_eq!(strip(&local.stdout), strip(&remote.stdout));

    let rejected = sketch()
        .args(["sw", "--eps", "0.25", "--dim", "6", "--window", "10", "--gen", "noisy", "--rows", "20", "--delta", "0.5", "--server", &url])
        .output()
        .unwrap();
    assert_eq!(rejected.status.code(), Some(1));
}

#[test]
fn unreachable_server_exits_2() {
    let out = sketch()
        .args(["fd", "--eps", "0.5", "--dim", "2", "--gen", "uniform", "--rows", "5", "--server", "http://127.0.0.1:9"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
