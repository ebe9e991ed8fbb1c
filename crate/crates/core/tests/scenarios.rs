use sketch_core::bench::{run_scenario, run_to_file, Baseline, Input, RunConfig, Scenario, CSV_HEADER};
use sketch_core::streams::GenKind;
use sketch_core::Error;

fn cfg(scenario: Scenario) -> RunConfig {
    let mut c = RunConfig::generated(scenario, 0.25, 12, GenKind::RandomNoisy, 400);
    match scenario {
        Scenario::Sw | Scenario::DistSw => c.window = Some(120),
        Scenario::Amm => {
            c.window = Some(120);
            c.dim_y = Some(7);
            c.input = Input::Gen { kind: GenKind::UniformRandom, rows: 400, zeta: 1.0 };
        }
        _ => {}
    }
    if matches!(scenario, Scenario::Dist | Scenario::DistSw) {
        c.sites = 3;
    }
    c
}

#[test]
fn every_scenario_stays_within_eps() {
    for sc in Scenario::ALL {
        let out = run_scenario(&cfg(sc)).unwrap();
        assert!(!out.reports.is_empty(), "{sc}");
        let err = out.max_error().unwrap();
        assert!(err <= 0.25, "{sc}: {err}");
        let csv = out.to_csv();
        assert_eq!(csv.lines().next(), Some(CSV_HEADER));
        for line in csv.lines().skip(1) {
            assert_eq!(line.split(',').count(), 7, "{sc}: {line}");
        }
        let dist = matches!(sc, Scenario::Dist | Scenario::DistSw);
        assert_eq!(out.reports[0].comm_bytes.is_some(), dist, "{sc}");
    }
}

#[test]
fn steps_follow_query_interval() {
    let mut c = cfg(Scenario::Attp);
    c.query_every = 50;
    let out = run_scenario(&c).unwrap();
    let steps: Vec<u64> = out.reports.iter().map(|r| r.step).collect();
    assert_eq!(steps, (1..=8).map(|k| k * 50).collect::<Vec<_>>());
}

#[test]
fn runs_are_deterministic_per_seed() {
    let a = run_scenario(&cfg(Scenario::Sw)).unwrap();
    let b = run_scenario(&cfg(Scenario::Sw)).unwrap();
    let errs = |o: &sketch_core::bench::RunOutput| o.reports.iter().map(|r| r.empirical_error).collect::<Vec<_>>();
    assert_eq!(errs(&a), errs(&b));
}

#[test]
fn oracle_cap_blanks_the_error_column() {
    let mut c = cfg(Scenario::Attp);
    c.oracle_cap = 100;
    let out = run_scenario(&c).unwrap();
    assert!(out.reports.iter().any(|r| r.empirical_error.is_none()));
    assert!(out.notes.iter().any(|n| n.contains("cap")));
    let line = out.reports.last().unwrap().csv_line();
    assert!(line.split(',').nth(1).unwrap().is_empty());
}

#[test]
fn svd_baseline_matches_error_contract() {
    let mut c = cfg(Scenario::Sw);
    c.baseline = Some(Baseline::Svd);
    assert!(run_scenario(&c).unwrap().max_error().unwrap() <= 0.25);
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = cfg(Scenario::Sw);
    c.window = None;
    assert!(matches!(run_scenario(&c), Err(Error::InvalidInput(_))));
    let mut c = cfg(Scenario::Attp);
    c.eps = 0.0;
    assert!(run_scenario(&c).is_err());
    let mut c = cfg(Scenario::Attp);
    c.delta = Some(0.5);
    assert!(run_scenario(&c).is_err());
}

#[test]
fn config_rejects_unknown_keys() {
    let json = r#"{"scenario":"attp","eps":0.1,"dim":4,"input":{"source":"gen","kind":"uniform-random","rows":10,"zeta":1.0},"bogus":1}"#;
    assert!(serde_json::from_str::<RunConfig>(json).is_err());
}

#[test]
fn run_to_file_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("out.csv");
    let out = run_to_file(&cfg(Scenario::Fd), &p).unwrap();
    assert_eq!(std::fs::read_to_string(&p).unwrap(), out.to_csv());
}
