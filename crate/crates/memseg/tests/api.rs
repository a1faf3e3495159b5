mod common;

use memseg::wire::{rle_decode, Rle, StateResponse};
use memseg_core::data::io::decode_png_gray;
use reqwest::blocking::Client;
use serde_json::{json, Value};
use std::sync::OnceLock;

fn server() -> &'static str {
    static URL: OnceLock<String> = OnceLock::new();
    URL.get_or_init(|| common::spawn_server(common::untrained_models(), common::small_spec()))
}

fn create(client: &Client, seed: u64) -> String {
    let r = client
        .post(format!("{}/sessions", server()))
        .json(&json!({ "synthetic": { "seed": seed } }))
        .send()
        .unwrap();
    let status = r.status();
    let body: Value = r.json().unwrap();
    assert_eq!(status, 201, "{body}");
    assert_eq!((body["h"].as_u64(), body["w"].as_u64(), body["c"].as_u64()), (Some(48), Some(48), Some(6)));
    body["session_id"].as_str().unwrap().to_string()
}

fn bbox(k: usize) -> Value {
    json!({ "slice_index": k, "type": "bounding_box", "geometry": { "corners": [[14, 12], [34, 36]] } })
}

#[test]
fn session_round_trip() {
    let client = Client::new();
    let id = create(&client, 3);
    let base = format!("{}/sessions/{id}", server());

    let png = client.get(format!("{base}/slices/2?window=0,1")).send().unwrap();
    assert_eq!(png.headers()["content-type"], "image/png");
    assert_eq!(decode_png_gray(&png.bytes().unwrap()).unwrap().dim(), (48, 48));

    let r: Value = client.post(format!("{base}/guidance")).json(&bbox(2)).send().unwrap().json().unwrap();
    assert_eq!(r, json!({ "round": 1, "status": "ok" }));

    let mask = decode_png_gray(&client.get(format!("{base}/masks/2")).send().unwrap().bytes().unwrap()).unwrap();
    assert!(mask.iter().all(|&v| v == 0 || v == 255));
    let rle: Rle = client.get(format!("{base}/masks/2?format=rle")).send().unwrap().json().unwrap();
    let decoded = rle_decode(&rle).unwrap();
    assert!(decoded.iter().zip(mask.iter()).all(|(&a, &b)| (a == 1) == (b == 255)));

    let st: StateResponse = client.get(format!("{base}/state")).send().unwrap().json().unwrap();
    assert_eq!(st.round, 1);
    assert_eq!(st.annotated_slices, vec![2]);
    assert_eq!(st.quality_scores.len(), 6);
    assert_eq!(st.quality_scores[2], 1.0);
    assert!(st.suggested_slice.is_some_and(|k| k != 2));

    let raw = client.get(format!("{base}/mask")).send().unwrap().bytes().unwrap();
    // Raw masks are little-endian f32 zeros and ones.
    assert_eq!(raw.len(), 48 * 48 * 6 * 4);

    assert_eq!(client.delete(&base).send().unwrap().status(), 204);
    assert_eq!(client.get(format!("{base}/state")).send().unwrap().status(), 404);
    assert_eq!(client.post(format!("{base}/guidance")).json(&bbox(2)).send().unwrap().status(), 404);
    assert_eq!(client.delete(&base).send().unwrap().status(), 404);
}

#[test]
fn bad_requests_name_the_field() {
    let client = Client::new();
    let id = create(&client, 4);
    let url = format!("{}/sessions/{id}/guidance", server());
    let cases = [
        (json!({ "slice_index": 9, "type": "scribble", "geometry": { "points": [[1, 1]] } }), "slice_index"),
        (json!({ "slice_index": 0, "type": "lasso", "geometry": { "points": [[1, 1]] } }), "type"),
        (json!({ "slice_index": 0, "type": "scribble", "geometry": { "points": [[1, 99]] } }), "geometry.points"),
        (json!({ "slice_index": 0, "type": "scribble" }), "body"),
    ];
    for (body, field) in cases {
        let r = client.post(&url).json(&body).send().unwrap();
        assert_eq!(r.status(), 400, "{body}");
        let v: Value = r.json().unwrap();
        assert_eq!(v["field"], field, "{v}");
    }
    let r = client.get(format!("{}/sessions/{id}/masks/0?format=gif", server())).send().unwrap();
    assert_eq!(r.status(), 400);
    assert_eq!(client.get(format!("{}/sessions/{id}/masks/6", server())).send().unwrap().status(), 404);
    let r = client
        .post(format!("{}/sessions", server()))
        .json(&json!({ "synthetic": { "seed": 1 }, "upload": { "shape": [1, 1, 1], "voxels": [0.0] } }))
        .send()
        .unwrap();
    assert_eq!(r.status(), 400);
}

#[test]
fn upload_sessions_accept_voxels() {
    let client = Client::new();
    let voxels: Vec<f32> = (0..40 * 40 * 3).map(|i| (i % 7) as f32 / 7.0).collect();
    let r = client
        .post(format!("{}/sessions", server()))
        .json(&json!({ "upload": { "shape": [40, 40, 3], "voxels": voxels } }))
        .send()
        .unwrap();
    assert_eq!(r.status(), 201);
    let r = client
        .post(format!("{}/sessions", server()))
        .json(&json!({ "upload": { "shape": [40, 40, 3], "voxels": [0.0] } }))
        .send()
        .unwrap();
    assert_eq!(r.status(), 400);
    assert_eq!(r.json::<Value>().unwrap()["field"], "upload.voxels");
}

/// Sessions guided concurrently end up exactly as when guided one by one.
#[test]
fn concurrent_sessions_are_isolated() {
    let client = Client::new();
    let seeds = [11u64, 12, 13, 14];
    let sequential: Vec<Vec<u8>> = seeds
        .iter()
        .map(|&s| {
            let id = create(&client, s);
            let base = format!("{}/sessions/{id}", server());
            client.post(format!("{base}/guidance")).json(&bbox(3)).send().unwrap();
            client.get(format!("{base}/mask")).send().unwrap().bytes().unwrap().to_vec()
        })
        .collect();
    let concurrent: Vec<Vec<u8>> = std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&s| {
                scope.spawn(move || {
                    let client = Client::new();
                    let id = create(&client, s);
                    let base = format!("{}/sessions/{id}", server());
                    let r = client.post(format!("{base}/guidance")).json(&bbox(3)).send().unwrap();
                    assert_eq!(r.status(), 200);
                    client.get(format!("{base}/mask")).send().unwrap().bytes().unwrap().to_vec()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert_eq!(sequential, concurrent);
}

/// Requests on one session are applied in order: the round counter counts
/// every guidance post exactly once.
#[test]
fn same_session_requests_serialize() {
    let client = Client::new();
    let id = create(&client, 21);
    let base = format!("{}/sessions/{id}", server());
    std::thread::scope(|scope| {
        for k in 0..4 {
            let base = &base;
            scope.spawn(move || {
                let r = Client::new().post(format!("{base}/guidance")).json(&bbox(k)).send().unwrap();
                assert_eq!(r.status(), 200);
            });
        }
    });
    let st: StateResponse = client.get(format!("{base}/state")).send().unwrap().json().unwrap();
    assert_eq!(st.round, 4);
    assert_eq!(st.annotated_slices, vec![0, 1, 2, 3]);
}
