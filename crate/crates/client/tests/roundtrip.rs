use sketch_client::{Client, ClientError};
use sketch_core::bench::{run_scenario, RunConfig, Scenario};
use sketch_core::session::{RowBatch, Session, SessionSpec};
use sketch_core::streams::GenKind;
use tokio::net::TcpListener;

async fn spawn() -> Client {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(sketch_service::serve(listener, std::future::pending()));
    Client::new(&format!("http://{addr}")).unwrap()
}

#[tokio::test]
async fn remote_run_matches_local() {
    let client = spawn().await;
    assert_eq!(client.health().await.unwrap().status, "ok");
    let mut cfg = RunConfig::generated(Scenario::Attp, 0.25, 10, GenKind::RandomNoisy, 400);
    cfg.seed = 11;
    let remote = client.run(&cfg).await.unwrap();
    let local = run_scenario(&cfg).unwrap();
    let errs = |o: &sketch_core::bench::RunOutput| o.reports.iter().map(|r| r.empirical_error).collect::<Vec<_>>();
    assert_eq!(errs(&remote), errs(&local));
}

#[tokio::test]
async fn remote_session_matches_local() {
    let client = spawn().await;
    let spec = SessionSpec::Window { dim: 3, eps: 0.5, window: 20, r_max: 10.0, seed: 2, delta: None };
    let info = client.create_session(&spec).await.unwrap();
    let mut local = Session::new(spec).unwrap();
    let rows: Vec<Vec<f64>> = (0..50).map(|k| vec![1.0 + (k % 3) as f64, (k % 5) as f64, 1.0]).collect();
    let batch = RowBatch { rows, rows_y: vec![] };
    let after = client.push_rows(info.id, &batch).await.unwrap();
    local.push(&batch).unwrap();
    assert_eq!(after.clock, 50);
    assert_eq!(client.sketch(info.id, None).await.unwrap(), local.query(None).unwrap());
    assert_eq!(client.sessions().await.unwrap().len(), 1);
    client.delete_session(info.id).await.unwrap();
    let err = client.session(info.id).await.unwrap_err();
    assert!(matches!(err, ClientError::Api { status: 404, .. }), "{err}");
}

#[tokio::test]
async fn rejected_requests_surface_as_bad_request() {
    let client = spawn().await;
    let mut cfg = RunConfig::generated(Scenario::Sw, 0.25, 4, GenKind::UniformRandom, 10);
    cfg.window = None;
    let err = client.run(&cfg).await.unwrap_err();
    assert!(err.is_bad_request(), "{err}");
}

#[test]
fn urls_are_checked() {
    assert!(matches!(Client::new("localhost:80"), Err(ClientError::BadUrl(_))));
    assert_eq!(Client::new("http://h:1/").unwrap().base(), "http://h:1");
}
