//! Read-only HTTP search over precomputed item embeddings.
//!
//! Corpus embeddings are loaded once at startup; only the query text is
//! encoded per request. The ranking itself is [`retrieval::rank_scores`], the
//! same routine the offline evaluator uses.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize, Serializer};
use tower_http::cors::{Any, CorsLayer};
use tribind_core::corpus::load_manifest;
use tribind_core::encoders::{load_checkpoint, Modality, TriModel};
use tribind_core::retrieval::{embed_query, fuse, rank_scores, EmbeddingStore};
use tribind_core::text::{TextElement, Vocab};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("invalid request: {0}")]
    Validation(String),

    #[error("no {0} store is loaded")]
    ModalityUnavailable(&'static str),

    #[error("unknown item `{0}`")]
    NotFound(String),

    #[error(transparent)]
    Core(#[from] tribind_core::Error),
}

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        match self {
            Self::Validation(_) => StatusCode::BAD_REQUEST,
            Self::ModalityUnavailable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Self::NotFound(_) => StatusCode::NOT_FOUND,
            Self::Core(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            Self::Validation(_) => "validation_error",
            Self::ModalityUnavailable(_) => "modality_unavailable",
            Self::NotFound(_) => "not_found",
            Self::Core(_) => "internal_error",
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        if let Self::Core(e) = &self {
            log::error!("query failed: {e}");
        }
        let body = serde_json::json!({ "error": { "code": self.code(), "message": self.to_string() } });
        (self.status(), Json(body)).into_response()
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct QueryRequest {
    pub text: String,
    pub k: i64,
    pub item_modality: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemMetadata {
    pub texts: Vec<TextElement>,
    pub duration_sec: Option<f64>,
}

fn six_decimals<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64((v * 1e6).round() / 1e6)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryHit {
    pub id: String,
    #[serde(serialize_with = "six_decimals")]
    pub score: f64,
    pub metadata: ItemMetadata,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryResponse {
    pub results: Vec<QueryHit>,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_digest: String,
    pub item_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ItemResponse {
    pub id: String,
    pub metadata: ItemMetadata,
    pub modalities: Vec<String>,
}

/// Paths needed to bring up a [`SearchIndex`].
#[derive(Debug, Clone, Default)]
pub struct ServeOptions {
    /// A `model.ckpt` file or a checkpoint directory containing one.
    pub checkpoint: PathBuf,
    /// Defaults to `vocab.txt` next to the checkpoint.
    pub vocab: Option<PathBuf>,
    pub audio_store: Option<PathBuf>,
    pub symbolic_store: Option<PathBuf>,
    /// Source of item metadata; items without a record get empty metadata.
    pub manifest: Option<PathBuf>,
}

/// Everything the query path reads. Immutable after construction.
pub struct SearchIndex {
    model: TriModel,
    vocab: Vocab,
    audio: Option<EmbeddingStore>,
    symbolic: Option<EmbeddingStore>,
    fused: Option<EmbeddingStore>,
    metadata: HashMap<String, ItemMetadata>,
    model_digest: String,
}

fn check_store(store: &EmbeddingStore, modality: Modality, digest: &[u8; 32]) -> tribind_core::Result<()> {
    if store.modality != modality {
        return Err(tribind_core::Error::Config(format!(
            "expected a {} store, got {}",
            modality.as_str(),
            store.modality.as_str()
        )));
    }
    if &store.model_digest != digest {
        return Err(tribind_core::Error::DigestMismatch {
            expected: hex::encode(digest),
            found: hex::encode(store.model_digest),
        });
    }
    Ok(())
}

impl SearchIndex {
    /// Fails unless every store was produced by exactly this model.
    pub fn new(
        model: TriModel,
        vocab: Vocab,
        audio: Option<EmbeddingStore>,
        symbolic: Option<EmbeddingStore>,
        metadata: HashMap<String, ItemMetadata>,
    ) -> tribind_core::Result<Self> {
        if audio.is_none() && symbolic.is_none() {
            return Err(tribind_core::Error::Config("at least one item store is required".into()));
        }
        let digest = model.digest()?;
        if let Some(s) = &audio {
            check_store(s, Modality::Audio, &digest)?;
        }
        if let Some(s) = &symbolic {
            check_store(s, Modality::Symbolic, &digest)?;
        }
        let fused = match (&audio, &symbolic) {
            (Some(a), Some(s)) => Some(fuse(a, s)?),
            _ => None,
        };
        Ok(Self {
            model,
            vocab,
            audio,
            symbolic,
            fused,
            metadata,
            model_digest: hex::encode(digest),
        })
    }

    pub fn load(opts: &ServeOptions) -> tribind_core::Result<Self> {
        let ckpt = if opts.checkpoint.is_dir() {
            opts.checkpoint.join("model.ckpt")
        } else {
            opts.checkpoint.clone()
        };
        let vocab_path = match &opts.vocab {
            Some(p) => p.clone(),
            None => ckpt.parent().unwrap_or(Path::new(".")).join("vocab.txt"),
        };
        let model = load_checkpoint(&ckpt)?;
        let vocab = Vocab::load(&vocab_path)?;
        let audio = opts.audio_store.as_ref().map(EmbeddingStore::load).transpose()?;
        let symbolic = opts.symbolic_store.as_ref().map(EmbeddingStore::load).transpose()?;
        let mut metadata = HashMap::new();
        if let Some(p) = &opts.manifest {
            for r in load_manifest(p)?.records {
                metadata.insert(
                    r.id,
                    ItemMetadata {
                        texts: r.texts,
                        duration_sec: Some(r.duration_sec),
                    },
                );
            }
        }
        Self::new(model, vocab, audio, symbolic, metadata)
    }

    pub fn model_digest(&self) -> &str {
        &self.model_digest
    }

    fn any_store(&self) -> &EmbeddingStore {
        self.audio.as_ref().or(self.symbolic.as_ref()).expect("checked at construction")
    }

    pub fn item_count(&self) -> usize {
        self.any_store().len()
    }

    pub fn store(&self, modality: Modality) -> Option<&EmbeddingStore> {
        match modality {
            Modality::Audio => self.audio.as_ref(),
            Modality::Symbolic => self.symbolic.as_ref(),
            Modality::Fused => self.fused.as_ref(),
            Modality::Text => None,
        }
    }

    pub fn available_modalities(&self) -> Vec<Modality> {
        [Modality::Audio, Modality::Symbolic, Modality::Fused]
            .into_iter()
            .filter(|m| self.store(*m).is_some())
            .collect()
    }

    fn metadata_for(&self, id: &str) -> ItemMetadata {
        self.metadata.get(id).cloned().unwrap_or(ItemMetadata {
            texts: Vec::new(),
            duration_sec: None,
        })
    }

    pub fn handle_query(&self, req: &QueryRequest) -> Result<QueryResponse, ServiceError> {
        let start = Instant::now();
        if req.text.trim().is_empty() {
            return Err(ServiceError::Validation("text must be non-empty".into()));
        }
        if req.k < 1 {
            return Err(ServiceError::Validation(format!("k must be at least 1, got {}", req.k)));
        }
        let modality = match Modality::parse(&req.item_modality) {
            Some(m) if m != Modality::Text => m,
            _ => {
                return Err(ServiceError::Validation(format!(
                    "item_modality must be audio, symbolic or fused, got `{}`",
                    req.item_modality
                )))
            }
        };
        let store = self
            .store(modality)
            .ok_or(ServiceError::ModalityUnavailable(modality.as_str()))?;
        let query = embed_query(&self.model, &self.vocab, &req.text)?;
        let k = (req.k as usize).min(store.len());
        let results = rank_scores(&query, store)?
            .into_iter()
            .take(k)
            .map(|s| {
                let id = store.ids[s.index].clone();
                QueryHit {
                    metadata: self.metadata_for(&id),
                    id,
                    score: s.score,
                }
            })
            .collect();
        Ok(QueryResponse {
            results,
            latency_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    pub fn item(&self, id: &str) -> Result<ItemResponse, ServiceError> {
        let modalities: Vec<String> = self
            .available_modalities()
            .into_iter()
            .filter(|m| self.store(*m).is_some_and(|s| s.position(id).is_some()))
            .map(|m| m.as_str().to_string())
            .collect();
        if modalities.is_empty() {
            return Err(ServiceError::NotFound(id.to_string()));
        }
        Ok(ItemResponse {
            id: id.to_string(),
            metadata: self.metadata_for(id),
            modalities,
        })
    }

    pub fn health(&self) -> Health {
        Health {
            status: "ok".into(),
            model_digest: self.model_digest.clone(),
            item_count: self.item_count(),
        }
    }
}

async fn query(
    State(index): State<Arc<SearchIndex>>,
    body: Result<Json<QueryRequest>, JsonRejection>,
) -> Result<Json<QueryResponse>, ServiceError> {
    let Json(req) = body.map_err(|e| ServiceError::Validation(e.body_text()))?;
    // encoding is CPU-bound; keep it off the async workers
    let resp = tokio::task::spawn_blocking(move || index.handle_query(&req))
        .await
        .map_err(|e| ServiceError::Core(tribind_core::Error::Config(format!("query task failed: {e}"))))??;
    Ok(Json(resp))
}

async fn item(
    State(index): State<Arc<SearchIndex>>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<ItemResponse>, ServiceError> {
    index.item(&id).map(Json)
}

async fn health(State(index): State<Arc<SearchIndex>>) -> Json<Health> {
    Json(index.health())
}

pub fn router(index: Arc<SearchIndex>) -> Router {
    let cors = CorsLayer::new()
        .allow_origin(Any)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE]);
    Router::new()
        .route("/v1/query", post(query))
        .route("/v1/items/{id}", get(item))
        .route("/v1/health", get(health))
        .layer(cors)
        .with_state(index)
}

/// Binds `addr` and serves until ctrl-c.
pub async fn serve(index: SearchIndex, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!(
        "serving {} items (model {}) on http://{}",
        index.item_count(),
        &index.model_digest()[..12],
        listener.local_addr()?
    );
    axum::serve(listener, router(Arc::new(index)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
