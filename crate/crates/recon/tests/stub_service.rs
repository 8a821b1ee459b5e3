use std::time::Duration;

use spectromind_recon::stub::{StubReply, StubServer};
use spectromind_recon::*;

fn fast() -> Client {
    Client::new(ClientConfig {
        backoff: vec![Duration::from_millis(5), Duration::from_millis(10), Duration::from_millis(20)],
        timeout: Duration::from_secs(5),
        in_flight: 2,
    })
    .unwrap()
}

fn req(endpoint: String) -> GenRequest {
    GenRequest {
        prompt: "an image of a banana".into(),
        seed: 4,
        steps: 30,
        endpoint,
    }
}

#[test]
fn success_returns_png() {
    let stub = StubServer::start(vec![StubReply::png()]).unwrap();
    let res = fast().request_image(&req(stub.endpoint())).unwrap();
    assert!(res.image.starts_with(&PNG_SIGNATURE));
    assert_eq!(res.prompt, "an image of a banana");
    let body: serde_json::Value = serde_json::from_str(&stub.request_bodies()[0]).unwrap();
    assert_eq!(body, serde_json::json!({"prompt": "an image of a banana", "seed": 4, "steps": 30}));
}

#[test]
fn server_error_then_success_retries() {
    let stub = StubServer::start(vec![StubReply::status(500), StubReply::png()]).unwrap();
    assert!(fast().request_image(&req(stub.endpoint())).is_ok());
    assert_eq!(stub.request_count(), 2);
}

#[test]
fn client_error_is_not_retried() {
    let stub = StubServer::start(vec![StubReply::status(422)]).unwrap();
    let err = fast().request_image(&req(stub.endpoint())).unwrap_err();
    assert!(matches!(err, Error::Service { status: Some(422), .. }), "{err}");
    assert_eq!(stub.request_count(), 1);
}

#[test]
fn persistent_failure_exhausts_retries() {
    let stub = StubServer::start(vec![StubReply::status(503)]).unwrap();
    let err = fast().request_image(&req(stub.endpoint())).unwrap_err();
    assert!(err.to_string().contains("scripted 503"));
    assert_eq!(stub.request_count(), 4);
}

#[test]
fn unreachable_endpoint_is_service_error() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let err = fast().request_image(&req(format!("http://127.0.0.1:{port}"))).unwrap_err();
    assert!(matches!(err, Error::Service { status: None, .. }));
}

#[test]
fn malformed_png_is_payload_error() {
    let stub = StubServer::start(vec![StubReply {
        status: 200,
        body: "{\"image\": \"aGVsbG8=\"}".into(),
    }])
    .unwrap();
    assert!(matches!(fast().request_image(&req(stub.endpoint())), Err(Error::Payload(_))));
}

fn items() -> (Vec<ReconItem>, Vec<String>) {
    let classes = vec!["banana".to_string(), "bolete".to_string()];
    let items = ["t1", "t2", "t3"]
        .iter()
        .enumerate()
        .map(|(i, id)| ReconItem {
            trial_id: id.to_string(),
            class_index: i % 2,
            class_name: classes[i % 2].clone(),
        })
        .collect();
    (items, classes)
}

#[test]
fn reconstruct_writes_images_and_resumes() {
    let stub = StubServer::start(vec![StubReply::png()]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (items, classes) = items();
    let settings = ReconSettings {
        endpoint: stub.endpoint(),
        ..ReconSettings::default()
    };
    let rows = reconstruct(&fast(), &items, &classes, dir.path(), &settings).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.status == RowStatus::Ok));
    for r in &rows {
        let png = std::fs::read(dir.path().join(r.image_path.as_ref().unwrap())).unwrap();
        assert!(png.starts_with(&PNG_SIGNATURE));
    }
    assert_eq!(read_index(dir.path()).unwrap(), rows);
    assert_eq!(stub.request_count(), 3);

    let again = reconstruct(&fast(), &items, &classes, dir.path(), &settings).unwrap();
    assert_eq!(again, rows);
    assert_eq!(stub.request_count(), 3, "completed rows must not be re-requested");
}

#[test]
fn reconstruct_records_service_errors() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let dir = tempfile::tempdir().unwrap();
    let (items, classes) = items();
    let settings = ReconSettings {
        endpoint: format!("http://127.0.0.1:{port}"),
        ..ReconSettings::default()
    };
    let rows = reconstruct(&fast(), &items, &classes, dir.path(), &settings).unwrap();
    assert!(rows.iter().all(|r| r.status == RowStatus::ServiceError));
    assert_eq!(read_index(dir.path()).unwrap().len(), 3);
}

#[test]
fn duplicate_trials_rejected_before_requests() {
    let stub = StubServer::start(vec![StubReply::png()]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (mut items, classes) = items();
    items[2].trial_id = "t1".into();
    let settings = ReconSettings {
        endpoint: stub.endpoint(),
        ..ReconSettings::default()
    };
    assert!(matches!(
        reconstruct(&fast(), &items, &classes, dir.path(), &settings),
        Err(Error::Argument(_))
    ));
    assert_eq!(stub.request_count(), 0);
}
