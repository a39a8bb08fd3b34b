use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;
use tribind_core::corpus::DatasetManifest;
use tribind_core::data::DataCache;
use tribind_core::encoders::{save_checkpoint, EncoderConfig, Modality, Preset, TriModel};
use tribind_core::retrieval::{embed_corpus, embed_query, fuse, rank_scores};
use tribind_core::synth;
use tribind_core::text::build_vocab;
use tribind_service::{router, QueryRequest, SearchIndex, ServeOptions, ServiceError};

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    manifest: DatasetManifest,
}

impl Fixture {
    fn opts(&self) -> ServeOptions {
        ServeOptions {
            checkpoint: self.root.join("ckpt"),
            vocab: None,
            audio_store: Some(self.root.join("audio.tbnd")),
            symbolic_store: Some(self.root.join("symbolic.tbnd")),
            manifest: Some(self.root.join("corpus").join(synth::MANIFEST_FILE)),
        }
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let manifest = synth::write_corpus(root.join("corpus"), &synth::overfit_corpus(6, 9)).unwrap();
        let texts: Vec<String> = manifest.records.iter().map(|r| r.full_text()).collect();
        let vocab = build_vocab(&texts, 80);
        let model = TriModel::new(&EncoderConfig::preset(Preset::Desk, vocab.len()), 5).unwrap();
        std::fs::create_dir_all(root.join("ckpt")).unwrap();
        save_checkpoint(&model, root.join("ckpt/model.ckpt")).unwrap();
        vocab.save(root.join("ckpt/vocab.txt")).unwrap();
        let mut cache = DataCache::default();
        for m in [Modality::Audio, Modality::Symbolic] {
            let (store, _) = embed_corpus(&model, &manifest.records, m, &mut cache).unwrap();
            store.save(root.join(format!("{}.tbnd", m.as_str()))).unwrap();
        }
        Fixture {
            _dir: dir,
            root,
            manifest,
        }
    })
}

fn index() -> Arc<SearchIndex> {
    static I: OnceLock<Arc<SearchIndex>> = OnceLock::new();
    I.get_or_init(|| Arc::new(SearchIndex::load(&fixture().opts()).unwrap()))
        .clone()
}

async fn call(req: Request<Body>) -> (StatusCode, Value) {
    let resp = router(index()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn post(body: Value) -> (StatusCode, Value) {
    call(
        Request::post("/v1/query")
            .header("content-type", "application/json")
            .body(Body::from(body.to_string()))
            .unwrap(),
    )
    .await
}

fn ids(v: &Value) -> Vec<String> {
    v["results"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["id"].as_str().unwrap().to_string())
        .collect()
}

#[tokio::test]
async fn health_reports_items_and_digest() {
    let (status, body) = call(Request::get("/v1/health").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "ok");
    assert_eq!(body["item_count"], 6);
    assert_eq!(body["model_digest"].as_str().unwrap(), index().model_digest());
    assert_eq!(index().model_digest().len(), 64);
}

#[tokio::test]
async fn large_k_returns_the_whole_corpus_in_score_order() {
    let (status, body) = post(json!({"text": "red fox", "k": 500, "item_modality": "fused"})).await;
    assert_eq!(status, StatusCode::OK);
    let results = body["results"].as_array().unwrap();
    assert_eq!(results.len(), 6);
    let scores: Vec<f64> = results.iter().map(|r| r["score"].as_f64().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    assert!(body["latency_ms"].as_f64().unwrap() >= 0.0);
    // metadata comes from the manifest
    let first = &results[0];
    let rec = fixture().manifest.get(first["id"].as_str().unwrap()).unwrap();
    assert_eq!(first["metadata"]["duration_sec"].as_f64().unwrap(), rec.duration_sec);
    assert_eq!(first["metadata"]["texts"][0]["content"], rec.texts[0].content.as_str());

    let (_, two) = post(json!({"text": "red fox", "k": 2, "item_modality": "fused"})).await;
    assert_eq!(ids(&two), ids(&body)[..2]);
}

#[tokio::test]
async fn scores_carry_at_most_six_decimals() {
    let (_, body) = post(json!({"text": "blue", "k": 6, "item_modality": "audio"})).await;
    for r in body["results"].as_array().unwrap() {
        let s = r["score"].as_f64().unwrap();
        assert!(((s * 1e6).round() - s * 1e6).abs() < 1e-6, "{s}");
    }
}

#[tokio::test]
async fn invalid_requests_are_rejected_with_400() {
    for body in [
        json!({"text": "", "k": 3, "item_modality": "fused"}),
        json!({"text": "   ", "k": 3, "item_modality": "fused"}),
        json!({"text": "x", "k": 0, "item_modality": "fused"}),
        json!({"text": "x", "k": -2, "item_modality": "fused"}),
        json!({"text": "x", "k": 3, "item_modality": "text"}),
        json!({"text": "x", "k": 3, "item_modality": "video"}),
        json!({"text": "x", "item_modality": "fused"}),
    ] {
        let (status, resp) = post(body.clone()).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
        assert_eq!(resp["error"]["code"], "validation_error");
    }
    let (status, _) = call(
        Request::post("/v1/query")
            .header("content-type", "application/json")
            .body(Body::from("{not json"))
            .unwrap(),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn identical_queries_give_identical_results() {
    let req = json!({"text": "a sparse piece", "k": 4, "item_modality": "symbolic"});
    let (_, a) = post(req.clone()).await;
    let (_, b) = post(req.clone()).await;
    assert_eq!(a["results"], b["results"]);
    let handles: Vec<_> = (0..4)
        .map(|_| {
            let req = req.clone();
            tokio::spawn(async move { post(req).await.1["results"].clone() })
        })
        .collect();
    for h in handles {
        assert_eq!(h.await.unwrap(), a["results"]);
    }
}

#[tokio::test]
async fn ranking_matches_offline_rank() {
    let f = fixture();
    let opts = f.opts();
    let model = tribind_core::encoders::load_checkpoint(opts.checkpoint.join("model.ckpt")).unwrap();
    let vocab = tribind_core::text::Vocab::load(opts.checkpoint.join("vocab.txt")).unwrap();
    let audio = tribind_core::retrieval::EmbeddingStore::load(opts.audio_store.unwrap()).unwrap();
    let symbolic = tribind_core::retrieval::EmbeddingStore::load(opts.symbolic_store.unwrap()).unwrap();
    let fused = fuse(&audio, &symbolic).unwrap();
    for rec in &f.manifest.records {
        let text = rec.full_text();
        let q = embed_query(&model, &vocab, &text).unwrap();
        let offline = rank_scores(&q, &fused).unwrap();
        let (_, body) = post(json!({"text": text, "k": 6, "item_modality": "fused"})).await;
        let results = body["results"].as_array().unwrap();
        for (o, r) in offline.iter().zip(results) {
            assert_eq!(fused.ids[o.index], r["id"].as_str().unwrap());
            assert!((o.score as f64 - r["score"].as_f64().unwrap()).abs() <= 1e-6);
        }
    }
}

#[tokio::test]
async fn items_endpoint_returns_metadata_or_404() {
    let id = fixture().manifest.records[2].id.clone();
    let (status, body) = call(Request::get(format!("/v1/items/{id}")).body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["id"], id.as_str());
    assert_eq!(body["modalities"], json!(["audio", "symbolic", "fused"]));
    let (status, body) = call(Request::get("/v1/items/nope").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"]["code"], "not_found");
}

#[tokio::test]
async fn cors_preflight_is_answered() {
    let resp = router(index())
        .oneshot(
            Request::options("/v1/query")
                .header("origin", "http://localhost:5173")
                .header("access-control-request-method", "POST")
                .header("access-control-request-headers", "content-type")
                .body(Body::empty())
                .unwrap(),
        )
        .await
        .unwrap();
    assert!(resp.status().is_success());
    assert_eq!(resp.headers()["access-control-allow-origin"], "*");
}

#[test]
fn missing_store_gives_modality_unavailable() {
    let opts = ServeOptions {
        symbolic_store: None,
        ..fixture().opts()
    };
    let index = SearchIndex::load(&opts).unwrap();
    for m in ["symbolic", "fused"] {
        let err = index
            .handle_query(&QueryRequest {
                text: "x".into(),
                k: 1,
                item_modality: m.into(),
            })
            .unwrap_err();
        assert!(matches!(err, ServiceError::ModalityUnavailable(_)), "{err}");
        assert_eq!(err.status(), StatusCode::UNPROCESSABLE_ENTITY);
    }
    assert!(index
        .handle_query(&QueryRequest {
            text: "x".into(),
            k: 1,
            item_modality: "audio".into()
        })
        .is_ok());
}

#[test]
fn startup_refuses_foreign_or_unreadable_stores() {
    let f = fixture();
    let other = TriModel::new(
        &EncoderConfig::preset(Preset::Desk, tribind_core::text::Vocab::load(f.root.join("ckpt/vocab.txt")).unwrap().len()),
        6,
    )
    .unwrap();
    let other_dir = f.root.join("other");
    std::fs::create_dir_all(&other_dir).unwrap();
    let (store, _) = embed_corpus(&other, &f.manifest.records[..2], Modality::Audio, &mut DataCache::default()).unwrap();
    store.save(other_dir.join("audio.tbnd")).unwrap();
    let opts = ServeOptions {
        audio_store: Some(other_dir.join("audio.tbnd")),
        symbolic_store: None,
        ..f.opts()
    };
    assert!(matches!(
        SearchIndex::load(&opts),
        Err(tribind_core::Error::DigestMismatch { .. })
    ));

    std::fs::write(other_dir.join("junk.tbnd"), b"junk").unwrap();
    let opts = ServeOptions {
        audio_store: Some(other_dir.join("junk.tbnd")),
        ..f.opts()
    };
    assert!(SearchIndex::load(&opts).is_err());

    // stores swapped between flags
    let opts = ServeOptions {
        audio_store: f.opts().symbolic_store,
        symbolic_store: None,
        ..f.opts()
    };
    assert!(matches!(SearchIndex::load(&opts), Err(tribind_core::Error::Config(_))));

    let opts = ServeOptions {
        audio_store: None,
        symbolic_store: None,
        ..f.opts()
    };
    assert!(SearchIndex::load(&opts).is_err());
}

#[tokio::test]
async fn serves_over_tcp() {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router(index())).await });
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    let mut s = tokio::net::TcpStream::connect(addr).await.unwrap();
    s.write_all(b"GET /v1/health HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n")
        .await
        .unwrap();
    let mut out = String::new();
    s.read_to_string(&mut out).await.unwrap();
    assert!(out.starts_with("HTTP/1.1 200"), "{out}");
    assert!(out.contains("\"status\":\"ok\""));
}
