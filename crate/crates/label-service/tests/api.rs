use std::path::Path;
use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use serde_json::{json, Value};
use tower::ServiceExt;

use mlmt_core::data::{load_manifest, write_dataset, BandData, BandId, BoundingBox, MultiLayerSample, Raster, Timestamp};
use mlmt_label_service::{router, ContextView, SampleSummary, Store, StoreConfig};

const N: usize = 10;

fn bands() -> Vec<BandId> {
    vec![BandId::new("3934A", 0), BandId::new("magnetogram", 1), BandId::new("171A", 2)]
}

/// Samples are written out of time order on purpose.
fn dataset(dir: &Path) -> std::path::PathBuf {
    let samples: Vec<MultiLayerSample> = (0..N)
        .map(|k| {
            let t = (k * 7) % N;
            MultiLayerSample {
                sample_id: format!("s{t:02}"),
                timestamp: Timestamp::Tick(t as i64 * 60),
                bands: bands()
                    .into_iter()
                    .enumerate()
                    .map(|(b, band)| BandData {
                        band,
                        image: Raster::from_fn(20, 30, |y, x| ((x * 3 + y + b) % 17) as f32 / 20.0),
                        boxes: vec![BoundingBox::new(1.0, 1.0, 4.0, 3.0, 1)],
                        mask: None,
                    })
                    .collect(),
            }
        })
        .collect();
    let classes = vec!["background".to_string(), "plage".to_string()];
    write_dataset(&dir.join("data"), &bands(), &classes, &samples, None).unwrap();
    dir.join("data/dataset.json")
}

fn open(dir: &Path) -> Store {
    Store::open(&StoreConfig {
        dataset: dir.join("data/dataset.json"),
        store_dir: dir.join("store"),
        links: vec![("3934A".into(), "magnetogram".into())],
    })
    .unwrap()
}

fn app() -> (tempfile::TempDir, Router) {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    let r = router(Arc::new(open(dir.path())));
    (dir, r)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    (status, to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec())
}

async fn json_of(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, b) = call(app, method, uri, body).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn ctx(app: &Router, uri: &str) -> ContextView {
    let (s, v) = json_of(app, "GET", uri, None).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    serde_json::from_value(v).unwrap()
}

fn boxes(v: &[(f32, f32, f32, f32)]) -> Value {
    json!(v.iter().map(|&(x, y, w, h)| BoundingBox::new(x, y, w, h, 1)).collect::<Vec<_>>())
}

#[tokio::test]
async fn samples_are_listed_in_time_order() {
    let (_d, app) = app();
    let (s, v) = json_of(&app, "GET", "/api/samples", None).await;
    assert_eq!(s, StatusCode::OK);
    let list: Vec<SampleSummary> = serde_json::from_value(v).unwrap();
    let ids: Vec<String> = list.iter().map(|x| x.sample_id.clone()).collect();
    let want: Vec<String> = (0..N).map(|t| format!("s{t:02}")).collect();
    assert_eq!(ids, want);
    assert!(list.iter().all(|x| x.versions.values().all(|&v| v == 0)));
}

#[tokio::test]
async fn context_has_three_each_side_and_truncates_at_edges() {
    let (_d, app) = app();
    let mid = ctx(&app, "/api/samples/s05/context").await;
    let ids: Vec<&str> = mid.samples.iter().map(|s| s.sample_id.as_str()).collect();
    assert_eq!(ids, ["s02", "s03", "s04", "s05", "s06", "s07", "s08"]);
    assert_eq!((mid.before, mid.after), (3, 3));
    assert!(mid.samples.iter().all(|s| s.bands.len() == 3 && (s.height, s.width) == (20, 30)));

    let first = ctx(&app, "/api/samples/s00/context").await;
    assert_eq!(first.samples.len(), 4);
    assert_eq!((first.before, first.after), (0, 3));
    let last = ctx(&app, "/api/samples/s09/context?before=3&after=3").await;
    assert_eq!((last.samples.len(), last.before, last.after), (4, 3, 0));
    let only = ctx(&app, "/api/samples/s04/context?before=0&after=0").await;
    assert_eq!(only.samples.len(), 1);
    assert_eq!(only.samples[0].sample_id, "s04");

    let (s, _) = call(&app, "GET", "/api/samples/nope/context", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn linked_bands_share_boxes_and_versions() {
    let (_d, app) = app();
    let b = boxes(&[(2.0, 3.0, 5.0, 4.5), (10.0, 0.0, 20.0, 20.0)]);
    let (s, v) = json_of(&app, "PUT", "/api/annotations/s03/3934A", Some(json!({"boxes": b, "expected_version": 0, "author": "ann"}))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["version"], 1);
    assert_eq!(v["author"], "ann");
    let c = ctx(&app, "/api/samples/s03/context?before=0&after=0").await;
    let bv = &c.samples[0].bands;
    assert_eq!(bv[0].boxes, bv[1].boxes);
    assert_eq!(serde_json::to_value(&bv[0].boxes).unwrap(), b);
    assert_eq!((bv[0].version, bv[1].version, bv[2].version), (1, 1, 0));
    assert_eq!(bv[2].boxes, vec![BoundingBox::new(1.0, 1.0, 4.0, 3.0, 1)]);
    assert_eq!(bv[1].linked, ["3934A", "magnetogram"]);

    // Writing through the other band of the link works the same way.
    let (s, _) = call(&app, "PUT", "/api/annotations/s03/magnetogram", Some(json!({"boxes": [], "expected_version": 1}))).await;
    assert_eq!(s, StatusCode::OK);
    let c = ctx(&app, "/api/samples/s03/context?before=0&after=0").await;
    let bv = &c.samples[0].bands;
    assert!(bv[0].boxes.is_empty() && bv[1].boxes.is_empty());
    assert_eq!((bv[0].version, bv[1].version), (2, 2));
}

#[tokio::test]
async fn stale_and_out_of_bounds_writes_change_nothing() {
    let (_d, app) = app();
    let put = |v: u64, b: Value| json!({"boxes": b, "expected_version": v});
    let (s, _) = call(&app, "PUT", "/api/annotations/s01/171A", Some(put(0, boxes(&[(0.0, 0.0, 2.0, 2.0)])))).await;
    assert_eq!(s, StatusCode::OK);
    let (s, v) = json_of(&app, "PUT", "/api/annotations/s01/171A", Some(put(0, boxes(&[(5.0, 5.0, 2.0, 2.0)])))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["version"], 1);
    let (s, _) = call(&app, "PUT", "/api/annotations/s01/171A", Some(put(1, boxes(&[(25.0, 5.0, 10.0, 2.0)])))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (_, rec) = json_of(&app, "GET", "/api/annotations/s01/171A", None).await;
    assert_eq!(rec["version"], 1);
    assert_eq!(rec["boxes"], boxes(&[(0.0, 0.0, 2.0, 2.0)]));

    let (s, _) = call(&app, "PUT", "/api/annotations/s01/nope", Some(put(0, json!([])))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, "PUT", "/api/annotations/s01/171A", Some(json!({"boxes": "x"}))).await;
    assert!(s.is_client_error());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_writers_exactly_one_wins() {
    let (_d, app) = app();
    let tasks: Vec<_> = (0..8)
        .map(|k| {
            let app = app.clone();
            tokio::spawn(async move {
                let body = json!({"boxes": boxes(&[(k as f32, 0.0, 1.0, 1.0)]), "expected_version": 0});
                call(&app, "PUT", "/api/annotations/s07/3934A", Some(body)).await.0
            })
        })
        .collect();
    let mut codes = Vec::new();
    for t in tasks {
        codes.push(t.await.unwrap());
    }
    assert_eq!(codes.iter().filter(|c| **c == StatusCode::OK).count(), 1, "{codes:?}");
    assert_eq!(codes.iter().filter(|c| **c == StatusCode::CONFLICT).count(), 7);
    let c = ctx(&app, "/api/samples/s07/context?before=0&after=0").await;
    assert_eq!(c.samples[0].bands[0].version, 1);
    assert_eq!(c.samples[0].bands[0].boxes, c.samples[0].bands[1].boxes);
}

#[tokio::test]
async fn images_render_with_and_without_stretch() {
    let (_d, app) = app();
    let (s, raw) = call(&app, "GET", "/api/images/s02/171A.png", None).await;
    assert_eq!(s, StatusCode::OK);
    let (s, stretched) = call(&app, "GET", "/api/images/s02/171A.png?stretch=99", None).await;
    assert_eq!(s, StatusCode::OK);
    for bytes in [&raw, &stretched] {
        let dec = png::Decoder::new(std::io::Cursor::new(bytes.clone()));
        let reader = dec.read_info().unwrap();
        assert_eq!((reader.info().width, reader.info().height), (30, 20));
    }
    assert_ne!(raw, stretched);
    let (s, _) = call(&app, "GET", "/api/images/s02/171A.png?stretch=10", None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = call(&app, "GET", "/api/images/s02/999A.png", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn log_is_replayed_on_reopen() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    {
        let app = router(Arc::new(open(dir.path())));
        let body = json!({"boxes": boxes(&[(1.5, 2.25, 3.0, 4.0)]), "expected_version": 0});
        assert_eq!(call(&app, "PUT", "/api/annotations/s04/3934A", Some(body)).await.0, StatusCode::OK);
    }
    let store = open(dir.path());
    let rec = store.record("s04", "magnetogram").unwrap();
    assert_eq!(rec.version, 1);
    assert_eq!(rec.boxes, vec![BoundingBox::new(1.5, 2.25, 3.0, 4.0, 1)]);
}

#[tokio::test]
async fn export_round_trips_through_the_manifest_loader() {
    let (dir, app) = app();
    let (s, v) = json_of(&app, "POST", "/api/export", Some(json!({"format": "manifest"}))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["samples"], 0);
    assert!(load_manifest(v["manifest"].as_str().unwrap()).unwrap().is_empty());

    let a = boxes(&[(0.5, 0.5, 3.25, 2.0)]);
    let b = boxes(&[(7.0, 8.0, 9.0, 10.0), (0.0, 0.0, 30.0, 20.0)]);
    call(&app, "PUT", "/api/annotations/s06/3934A", Some(json!({"boxes": a, "expected_version": 0}))).await;
    call(&app, "PUT", "/api/annotations/s02/171A", Some(json!({"boxes": b, "expected_version": 0}))).await;
    let (s, v) = json_of(&app, "POST", "/api/export", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["samples"], 2);
    let path = v["manifest"].as_str().unwrap().to_string();
    let m = load_manifest(&path).unwrap();
    let loaded = m.load_all().unwrap();
    assert_eq!(loaded.iter().map(|s| s.sample_id.as_str()).collect::<Vec<_>>(), ["s02", "s06"]);
    assert_eq!(serde_json::to_value(&loaded[1].band("3934A").unwrap().boxes).unwrap(), a);
    assert_eq!(serde_json::to_value(&loaded[0].band("171A").unwrap().boxes).unwrap(), b);

    // Linked bands export byte-identical box files.
    let root = Path::new(&path).parent().unwrap();
    let f1 = std::fs::read(root.join("s06/3934A.boxes.csv")).unwrap();
    let f2 = std::fs::read(root.join("s06/magnetogram.boxes.csv")).unwrap();
    assert_eq!(f1, f2);

    // Importing the export gives back the same annotation content.
    let again = Store::open(&StoreConfig {
        dataset: path.into(),
        store_dir: dir.path().join("store2"),
        links: vec![],
    })
    .unwrap();
    for s in ["s02", "s06"] {
        for band in ["3934A", "magnetogram", "171A"] {
            let orig: Value = json_of(&app, "GET", &format!("/api/annotations/{s}/{band}"), None).await.1;
            assert_eq!(serde_json::to_value(again.record(s, band).unwrap().boxes).unwrap(), orig["boxes"]);
        }
    }
}
