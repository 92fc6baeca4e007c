use std::collections::{BTreeMap, HashMap};
use std::io::{Cursor, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use image::ImageFormat;
use log::{info, warn};
use serde::Serialize;
use sst_core::dataset::{ground_truth_name, list_pngs, load_photo, training_dir};
use sst_core::inference::{render_overlay, timed_segment, Sidecar};
use sst_core::metrics::{average_precision, basic_metrics, confusion, ApRule, MetricReport};
use sst_core::models::ModelDescriptor;
use tokio::sync::OnceCell;

use crate::eval::{load_truth, quantize, segment_options};
use crate::{default_stride, load_model, output_dir, CliResult, Failure, OutArg, ServeArgs, EXIT_DATA, EXIT_ENVIRONMENT};

struct Entry {
    image: PathBuf,
    truth: Option<PathBuf>,
}

struct Computed {
    png: Vec<u8>,
    metrics: Option<MetricReport>,
}

type Slot = Arc<OnceCell<Arc<Computed>>>;

struct AppState {
    model: ModelDescriptor,
    model_hash: String,
    images: BTreeMap<String, Entry>,
    default_stride: usize,
    half_size: bool,
    cache_dir: PathBuf,
    slots: Mutex<HashMap<(String, usize), Slot>>,
    segmentations: AtomicUsize,
}

/// Photographs of a KITTI layout (with ground truth where present) or of a
/// plain directory.
fn index_images(root: &Path) -> CliResult<BTreeMap<String, Entry>> {
    let kitti = training_dir(root);
    let (image_dir, gt_dir) = if kitti.join("image_2").is_dir() {
        (kitti.join("image_2"), Some(kitti.join("gt_image_2")))
    } else {
        (root.to_path_buf(), None)
    };
    if !image_dir.is_dir() {
        return Err(Failure::new(EXIT_DATA, format!("image root {} not found", root.display())));
    }
    let mut images = BTreeMap::new();
    for path in list_pngs(&image_dir)? {
        let Some(id) = path.file_stem().and_then(|s| s.to_str()).map(str::to_string) else { continue };
        let truth = gt_dir
            .as_ref()
            .zip(ground_truth_name(&id))
            .map(|(d, name)| d.join(name))
            .filter(|p| p.is_file());
        images.insert(id, Entry { image: path, truth });
    }
    Ok(images)
}

pub fn run(args: &ServeArgs) -> CliResult<()> {
    let model = load_model(&args.model)?;
    if !model.is_trained() {
        return Err(sst_core::Error::Untrained.into());
    }
    let default_stride = crate::check_stride(&model, args.eval_stride.unwrap_or_else(|| default_stride(&model)))?;
    let images = index_images(&args.dataset)?;
    let out = OutArg {
        out: args.out.out.clone().or_else(|| Some(crate::sst_home().join("cache"))),
    };
    let cache_dir = output_dir(&out, "cache")?;
    let model_hash = model.content_hash()?;
    info!("serving {} image(s) with {} ({})", images.len(), model.name, &model_hash[..12]);
    let state = Arc::new(AppState {
        model,
        model_hash,
        images,
        default_stride,
        half_size: args.half_size,
        cache_dir,
        slots: Mutex::new(HashMap::new()),
        segmentations: AtomicUsize::new(0),
    });

    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Failure::new(EXIT_ENVIRONMENT, format!("cannot start runtime: {e}")))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(("127.0.0.1", args.port))
            .await
            .map_err(|e| Failure::new(EXIT_ENVIRONMENT, format!("cannot bind port {}: {e}", args.port)))?;
        let addr = listener
            .local_addr()
            .map_err(|e| Failure::new(EXIT_ENVIRONMENT, e.to_string()))?;
        println!("listening on http://{addr}");
        std::io::stdout().flush().ok();
        axum::serve(listener, router(state))
            .await
            .map_err(|e| Failure::new(EXIT_ENVIRONMENT, format!("server stopped: {e}")))
    })
}

fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/", get(index_page))
        .route("/images", get(list_images))
        .route("/status", get(status))
        .route("/overlay/{id}", get(overlay))
        .route("/metrics/{id}", get(metrics))
        .with_state(state)
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(serde_json::json!({ "error": message.into() }))).into_response()
}

async fn index_page() -> Html<&'static str> {
    Html(INDEX_HTML)
}

async fn list_images(State(state): State<Arc<AppState>>) -> Json<Vec<String>> {
    Json(state.images.keys().cloned().collect())
}

#[derive(Serialize)]
struct Status {
    model: String,
    model_hash: String,
    patch_size: usize,
    default_stride: usize,
    images: usize,
    segmentations: usize,
}

async fn status(State(state): State<Arc<AppState>>) -> Json<Status> {
    Json(Status {
        model: state.model.name.clone(),
        model_hash: state.model_hash.clone(),
        patch_size: state.model.patch_size,
        default_stride: state.default_stride,
        images: state.images.len(),
        segmentations: state.segmentations.load(Ordering::SeqCst),
    })
}

fn parse_stride(state: &AppState, query: &HashMap<String, String>) -> Result<usize, Response> {
    let Some(raw) = query.get("stride") else {
        return Ok(state.default_stride);
    };
    match raw.parse::<usize>() {
        Ok(s) if (1..=state.model.patch_size).contains(&s) => Ok(s),
        _ => Err(error(
            StatusCode::BAD_REQUEST,
            format!("stride must be an integer in [1, {}], got {raw:?}", state.model.patch_size),
        )),
    }
}

/// Files of one cached segmentation; the directory is keyed by model hash.
fn cache_paths(state: &AppState, id: &str, stride: usize) -> (PathBuf, PathBuf) {
    let dir = state.cache_dir.join(&state.model_hash[..16]);
    (dir.join(format!("{id}_s{stride}_overlay.png")), dir.join(format!("{id}_s{stride}.json")))
}

fn compute(state: &AppState, id: &str, stride: usize) -> Result<Computed, String> {
    let entry = &state.images[id];
    let rgb = load_photo(&entry.image, state.half_size).map_err(|e| e.to_string())?;
    let truth = match &entry.truth {
        Some(p) => Some(load_truth(p, state.half_size).map_err(|f| f.message)?),
        None => None,
    };
    let result = timed_segment(&state.model, &rgb, &segment_options(stride)).map_err(|e| e.to_string())?;
    state.segmentations.fetch_add(1, Ordering::SeqCst);
    let overlay = render_overlay(&rgb, &result.mask, truth.as_ref()).map_err(|e| e.to_string())?;
    let mut png = Vec::new();
    overlay
        .write_to(&mut Cursor::new(&mut png), ImageFormat::Png)
        .map_err(|e| e.to_string())?;
    let metrics = match &truth {
        Some(t) => {
            let counts = confusion(&result.mask, t).map_err(|e| e.to_string())?;
            let mut m = basic_metrics(&counts).map_err(|e| e.to_string())?;
            let scores: Vec<(f64, bool)> = result
                .probabilities
                .data()
                .iter()
                .zip(t.data())
                .map(|(&p, &g)| (quantize(p), g == 1.0))
                .collect();
            m.ap = average_precision(&scores, ApRule::default()).map_err(|e| e.to_string())?;
            Some(m)
        }
        None => None,
    };
    let (png_path, sidecar_path) = cache_paths(state, id, stride);
    let written = std::fs::create_dir_all(png_path.parent().expect("cache subdir"))
        .and_then(|_| std::fs::write(&png_path, &png))
        .and_then(|_| write_sidecar(&sidecar_path, &Sidecar::new(&state.model.name, &result), false));
    if let Err(e) = written {
        warn!("cannot write cache entry for {id}: {e}");
    }
    Ok(Computed { png, metrics })
}

fn write_sidecar(path: &Path, sidecar: &Sidecar, hit: bool) -> std::io::Result<()> {
    let mut sidecar = sidecar.clone();
    sidecar.cache_hit = Some(hit);
    std::fs::write(path, serde_json::to_string_pretty(&sidecar).expect("serializable") + "\n")
}

/// Result of `(id, stride)`, computed once; concurrent requests for the same
/// key wait on the same cell. Returns whether it was already present.
async fn segmentation(state: &Arc<AppState>, id: &str, stride: usize) -> Result<(Arc<Computed>, bool), Response> {
    let slot: Slot = {
        let mut slots = state.slots.lock().expect("cache lock");
        slots.entry((id.to_string(), stride)).or_default().clone()
    };
    if let Some(done) = slot.get() {
        return Ok((done.clone(), true));
    }
    let mut computed_here = false;
    let value = slot
        .get_or_try_init(|| {
            computed_here = true;
            let (state, id) = (state.clone(), id.to_string());
            async move {
                tokio::task::spawn_blocking(move || compute(&state, &id, stride))
                    .await
                    .map_err(|e| e.to_string())?
                    .map(Arc::new)
            }
        })
        .await
        .map_err(|e| error(StatusCode::INTERNAL_SERVER_ERROR, e))?;
    Ok((value.clone(), !computed_here))
}

async fn overlay(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(query): Query<HashMap<String, String>>,
) -> Response {
    if !state.images.contains_key(&id) {
        return error(StatusCode::NOT_FOUND, format!("unknown image {id:?}"));
    }
    let stride = match parse_stride(&state, &query) {
        Ok(s) => s,
        Err(r) => return r,
    };
    let (computed, hit) = match segmentation(&state, &id, stride).await {
        Ok(v) => v,
        Err(r) => return r,
    };
    if hit {
        let (_, sidecar_path) = cache_paths(&state, &id, stride);
        let updated = std::fs::read_to_string(&sidecar_path)
            .ok()
            .and_then(|t| serde_json::from_str::<Sidecar>(&t).ok())
            .map(|s| write_sidecar(&sidecar_path, &s, true));
        if !matches!(updated, Some(Ok(()))) {
            warn!("cannot mark cache hit in {}", sidecar_path.display());
        }
    }
    let mut response = computed.png.clone().into_response();
    let headers = response.headers_mut();
    headers.insert(header::CONTENT_TYPE, HeaderValue::from_static("image/png"));
    headers.insert("x-cache", HeaderValue::from_static(if hit { "hit" } else { "miss" }));
    response
}

async fn metrics(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(query): Query<HashMap<String, String>>,
) -> Response {
    let Some(entry) = state.images.get(&id) else {
        return error(StatusCode::NOT_FOUND, format!("unknown image {id:?}"));
    };
    if entry.truth.is_none() {
        return error(StatusCode::NOT_FOUND, format!("no ground truth for {id:?}"));
    }
    let stride = match parse_stride(&state, &query) {
        Ok(s) => s,
        Err(r) => return r,
    };
    match segmentation(&state, &id, stride).await {
        Ok((computed, _)) => Json(computed.metrics.expect("ground truth present")).into_response(),
        Err(r) => r,
    }
}

const INDEX_HTML: &str = r#"<!doctype html>
<html lang="en">
<head>
<meta charset="utf-8">
<title>sst viewer</title>
<style>
body { font-family: sans-serif; margin: 1em; display: flex; gap: 1.5em; }
#list { min-width: 12em; }
#list li { cursor: pointer; }
#list li.active { font-weight: bold; }
img { max-width: 100%; image-rendering: pixelated; }
pre { background: #eee; padding: .5em; }
</style>
</head>
<body>
<div>
<label>stride <input id="stride" type="number" min="1" size="4"></label>
<ul id="list"></ul>
</div>
<div>
<div id="status"></div>
<img id="overlay" alt="">
<pre id="metrics"></pre>
</div>
<script>
const list = document.getElementById("list");
const strideInput = document.getElementById("stride");
let current = null;

async function show(id) {
  current = id;
  for (const li of list.children) li.classList.toggle("active", li.textContent === id);
  const q = strideInput.value ? "?stride=" + strideInput.value : "";
  const img = document.getElementById("overlay");
  const status = document.getElementById("status");
  status.textContent = "segmenting " + id + " ...";
  const res = await fetch("/overlay/" + encodeURIComponent(id) + q);
  if (!res.ok) { status.textContent = (await res.json()).error; return; }
  img.src = URL.createObjectURL(await res.blob());
  status.textContent = id + " (" + res.headers.get("x-cache") + ")";
  const m = await fetch("/metrics/" + encodeURIComponent(id) + q);
  document.getElementById("metrics").textContent = m.ok ? JSON.stringify(await m.json(), null, 2) : "no ground truth";
}

fetch("/status").then(r => r.json()).then(s => { strideInput.value = s.default_stride; strideInput.max = s.patch_size; });
fetch("/images").then(r => r.json()).then(ids => {
  for (const id of ids) {
    const li = document.createElement("li");
    li.textContent = id;
    li.onclick = () => show(id);
    list.appendChild(li);
  }
});
strideInput.onchange = () => { if (current) show(current); };
</script>
</body>
</html>
"#;
