//! End-to-end contract checks of the `sst` binary on a synthetic 4-image
//! dataset. Every check returns `Err` with a description instead of panicking
//! so the acceptance runner can report it.
#![allow(dead_code)]

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::Duration;

use sst_core::dataset::{decode_label, read_rgb};
use sst_core::inference::read_mask_png;
use sst_core::metrics::{average_precision, basic_metrics, confusion, ApRule, ConfusionCounts};
use sst_core::Tensor;
use tempfile::TempDir;

pub type Check = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

pub const TOY_H: usize = 30;
pub const TOY_W: usize = 45;

pub struct Output {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Output {
    fn describe(&self) -> String {
        format!("exit {}; stdout {:?}; stderr {:?}", self.code, self.stdout, self.stderr)
    }
}

/// Scratch space: the toy dataset, an empty working directory that must stay
/// empty, and the `SST_HOME` root.
pub struct Toy {
    pub tmp: TempDir,
    pub dataset: PathBuf,
    pub ids: Vec<String>,
    pub cwd: PathBuf,
    pub home: PathBuf,
}

impl Toy {
    pub fn new() -> Toy {
        let tmp = tempfile::tempdir().expect("temp dir");
        let dataset = tmp.path().join("toy");
        let ids = sst_core::synth::write_dataset(&dataset, 4, TOY_H, TOY_W, 5).expect("toy dataset");
        let cwd = tmp.path().join("cwd");
        let home = tmp.path().join("home");
        std::fs::create_dir_all(&cwd).unwrap();
        Toy {
            tmp,
            dataset,
            ids,
            cwd,
            home,
        }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.tmp.path().join(rel)
    }

    pub fn command(&self, args: &[&str]) -> Command {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_sst"));
        cmd.args(args)
            .current_dir(&self.cwd)
            .env("SST_HOME", &self.home)
            .env_remove("SST_SELFCHECK_FAULT")
            .env("RUST_LOG", "warn");
        cmd
    }

    pub fn run(&self, args: &[&str]) -> Output {
        self.run_with(self.command(args))
    }

    pub fn run_with(&self, mut cmd: Command) -> Output {
        let out = cmd.output().expect("spawn sst");
        Output {
            code: out.status.code().unwrap_or(-1),
            stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
            stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
        }
    }

    /// The working directory must never receive files.
    pub fn cwd_untouched(&self) -> Check {
        let entries: Vec<_> = std::fs::read_dir(&self.cwd).unwrap().flatten().map(|e| e.file_name()).collect();
        ensure!(entries.is_empty(), "files written to the working directory: {entries:?}");
        Ok(())
    }

    /// A copy of the toy dataset without ground truth for `drop`.
    pub fn copy_dataset(&self, name: &str, drop_gt_of: &[&str], drop_gt_dir: bool) -> PathBuf {
        let root = self.path(name);
        for sub in ["image_2", "gt_image_2"] {
            let from = self.dataset.join("training").join(sub);
            let to = root.join("training").join(sub);
            if sub == "gt_image_2" && drop_gt_dir {
                continue;
            }
            std::fs::create_dir_all(&to).unwrap();
            for entry in std::fs::read_dir(&from).unwrap().flatten() {
                let name = entry.file_name().to_string_lossy().into_owned();
                let id = name.replace("_road_", "_").replace(".png", "");
                if sub == "gt_image_2" && drop_gt_of.contains(&id.as_str()) {
                    continue;
                }
                std::fs::copy(entry.path(), to.join(&name)).unwrap();
            }
        }
        root
    }

    pub fn image_path(&self, id: &str) -> PathBuf {
        self.dataset.join("training/image_2").join(format!("{id}.png"))
    }

    pub fn truth(&self, id: &str) -> Tensor {
        let name = sst_core::dataset::ground_truth_name(id).unwrap();
        decode_label(&read_rgb(&self.dataset.join("training/gt_image_2").join(name)).unwrap()).unwrap()
    }
}

fn json(path: &Path) -> Result<serde_json::Value, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

pub fn check_help(toy: &Toy) -> Check {
    let out = toy.run(&["--help"]);
    ensure!(out.code == 0, "--help: {}", out.describe());
    for sub in ["selfcheck", "train", "eval", "view", "video", "serve"] {
        ensure!(out.stdout.contains(sub), "--help does not list {sub}");
    }
    let out = toy.run(&["frobnicate"]);
    ensure!(out.code == 2, "unknown subcommand: {}", out.describe());
    Ok(())
}

pub fn check_selfcheck(toy: &Toy) -> Check {
    let out = toy.run(&["selfcheck"]);
    ensure!(out.code == 0, "healthy selfcheck: {}", out.describe());
    for name in ["output-dir", "png-codec", "gradient-probe"] {
        ensure!(
            out.stdout.lines().any(|l| l.starts_with(name) && l.contains(" ok ")),
            "check {name} not reported ok: {}",
            out.stdout
        );
    }
    ensure!(out.stdout.contains("sst 0.") && out.stdout.contains("sst-core 0."), "versions missing");

    // a regular file where the output directory should go
    let blocker = toy.path("blocker");
    std::fs::write(&blocker, b"x").unwrap();
    let bad = blocker.join("out");
    let out = toy.run(&["selfcheck", "--out", bad.to_str().unwrap()]);
    ensure!(out.code == 1, "unwritable output dir: {}", out.describe());
    ensure!(
        out.stdout.lines().any(|l| l.starts_with("output-dir") && l.contains("FAIL")),
        "unwritable output dir not named: {}",
        out.stdout
    );
    ensure!(out.stderr.contains("output-dir"), "error message does not name the check");

    let mut cmd = toy.command(&["selfcheck"]);
    cmd.env("SST_SELFCHECK_FAULT", "gradient");
    let out = toy.run_with(cmd);
    ensure!(out.code == 1, "injected gradient fault: {}", out.describe());
    ensure!(out.stderr.contains("gradient-probe"), "fault not named: {}", out.describe());
    toy.cwd_untouched()
}

/// Trains the builtin regressor for `epochs` into `$SST_HOME/train` and
/// checks its artifacts; returns the descriptor path.
pub fn check_train(toy: &Toy, epochs: usize) -> Result<PathBuf, String> {
    let e = epochs.to_string();
    let out = toy.run(&["train", "--dataset", toy.dataset.to_str().unwrap(), "--builtin", "regression", "--epochs", &e]);
    ensure!(out.code == 0, "train: {}", out.describe());
    let dir = toy.home.join("train");
    let model = dir.join("model.toml");
    for f in ["model.toml", "model.sstw", "split.json", "training_log.json"] {
        ensure!(dir.join(f).is_file(), "train did not write {f}");
    }
    let log = json(&dir.join("training_log.json"))?;
    let entries = log.as_array().map_or(0, Vec::len);
    ensure!(entries == epochs, "training log has {entries} entries, expected {epochs}");
    let weights = std::fs::read(dir.join("model.sstw")).unwrap();
    ensure!(weights.starts_with(b"SSTW"), "weight container lacks the SSTW magic");
    let split = json(&dir.join("split.json"))?;
    ensure!(split["train"].as_array().map(Vec::len) == Some(4), "split should train on all 4 images: {split}");
    ensure!(split["test"].as_array().map(Vec::len) == Some(0), "4 images leave no test split: {split}");
    let loaded = sst_core::models::ModelDescriptor::load(&model).map_err(|e| e.to_string())?;
    ensure!(loaded.training_log.len() == epochs && loaded.is_trained(), "descriptor does not load back");
    toy.cwd_untouched()?;
    Ok(model)
}

/// Same seed, same data: byte-identical weight containers.
pub fn check_train_deterministic(toy: &Toy) -> Check {
    let mut blobs = Vec::new();
    for out_name in ["seeded_a", "seeded_b"] {
        let out_dir = toy.path(out_name);
        let out = toy.run(&[
            "train",
            "--dataset",
            toy.dataset.to_str().unwrap(),
            "--builtin",
            "regression",
            "--epochs",
            "2",
            "--seed",
            "9",
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        ensure!(out.code == 0, "seeded train: {}", out.describe());
        blobs.push(std::fs::read(out_dir.join("model.sstw")).unwrap());
    }
    ensure!(blobs[0] == blobs[1], "retraining with the same seed changed the weights");
    Ok(())
}

pub fn check_train_errors(toy: &Toy) -> Check {
    let no_gt = toy.copy_dataset("no_gt", &[], true);
    let out = toy.run(&["train", "--dataset", no_gt.to_str().unwrap(), "--builtin", "regression", "--out", toy.path("t1").to_str().unwrap()]);
    ensure!(out.code == 3, "missing gt dir: {}", out.describe());
    ensure!(out.stderr.contains("format error"), "missing gt dir is not a format error: {}", out.stderr);
    ensure!(!toy.path("t1").join("model.toml").exists(), "model written despite the data error");

    let ds = toy.dataset.to_str().unwrap();
    let cases: [(&[&str], i32); 5] = [
        (&["train", "--dataset", ds, "--builtin", "regression", "--patch-size", "31"], 2),
        (&["train", "--dataset", ds, "--builtin", "regression", "--train-stride", "0"], 2),
        (&["train", "--dataset", ds, "--builtin", "classification", "--train-stride", "52"], 2),
        (&["train", "--dataset", ds], 2),
        (&["train", "--dataset", ds, "--builtin", "vgg"], 2),
    ];
    for (args, code) in cases {
        let out = toy.run(args);
        ensure!(out.code == code, "{args:?}: expected exit {code}, {}", out.describe());
    }
    toy.cwd_untouched()
}

pub fn check_view(toy: &Toy, model: &Path) -> Check {
    let out = toy.run(&["view", "--builtin", "classification"]);
    ensure!(out.code == 0, "view builtin: {}", out.describe());
    for row in ["47x47x10", "43x43x10", "21x21x10", "4410", "4411", "total parameters: 7681"] {
        ensure!(out.stdout.contains(row), "view output lacks {row:?}: {}", out.stdout);
    }
    let out = toy.run(&["view", "--model", model.to_str().unwrap()]);
    ensure!(out.code == 0 && out.stdout.contains("trained:     true"), "view trained: {}", out.describe());
    ensure!(out.stdout.contains("training log ("), "view lacks the training log tail");

    let out = toy.run(&["view", "--model", toy.path("missing.toml").to_str().unwrap()]);
    ensure!(out.code == 1, "view missing file: {}", out.describe());
    let corrupt = toy.path("corrupt.toml");
    std::fs::write(&corrupt, "name = [").unwrap();
    let out = toy.run(&["view", "--model", corrupt.to_str().unwrap()]);
    ensure!(out.code == 3, "view corrupt file: {}", out.describe());
    toy.cwd_untouched()
}

fn read_probabilities(path: &Path) -> Result<Tensor, String> {
    let img = image::open(path).map_err(|e| e.to_string())?;
    let img = img.as_luma16().ok_or("probability map is not 16-bit gray")?;
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| p.0[0] as f64 / 65535.0).collect();
    Tensor::new(vec![h as usize, w as usize], data).map_err(|e| e.to_string())
}

pub fn check_eval(toy: &Toy, model: &Path) -> Check {
    let m = model.to_str().unwrap();
    let out_dir = toy.path("eval");
    let out = toy.run(&["eval", "--model", m, "--dataset", toy.dataset.to_str().unwrap(), "--eval-stride", "20", "--out", out_dir.to_str().unwrap()]);
    ensure!(out.code == 0, "eval dataset: {}", out.describe());
    ensure!(out.stdout.contains("F1") && out.stdout.contains("ACC"), "eval prints no table");

    // recompute the report from the written files
    let mut pooled = ConfusionCounts::default();
    let mut scores = Vec::new();
    for id in &toy.ids {
        for suffix in ["_probability.png", "_mask.png", "_overlay.png", ".json"] {
            ensure!(out_dir.join(format!("{id}{suffix}")).is_file(), "missing {id}{suffix}");
        }
        let sidecar = json(&out_dir.join(format!("{id}.json")))?;
        let expected = TOY_H.div_ceil(20) * TOY_W.div_ceil(20);
        ensure!(
            sidecar["patch_evaluations"] == expected && sidecar["stride"] == 20 && sidecar["model"] == "regression",
            "sidecar {sidecar}, expected {expected} evaluations"
        );
        let truth = toy.truth(id);
        let mask = read_mask_png(&out_dir.join(format!("{id}_mask.png"))).map_err(|e| e.to_string())?;
        pooled += confusion(&mask, &truth).map_err(|e| e.to_string())?;
        let probs = read_probabilities(&out_dir.join(format!("{id}_probability.png")))?;
        scores.extend(probs.data().iter().zip(truth.data()).map(|(&p, &t)| (p, t == 1.0)));
    }
    let report = json(&out_dir.join("report.json"))?;
    let mut metrics = basic_metrics(&pooled).map_err(|e| e.to_string())?;
    metrics.ap = average_precision(&scores, ApRule::StrictFullRecall).map_err(|e| e.to_string())?;
    ensure!(
        report["counts"] == serde_json::to_value(pooled).unwrap(),
        "report counts {} differ from recount {pooled:?}",
        report["counts"]
    );
    ensure!(
        report["metrics"] == serde_json::to_value(metrics).unwrap(),
        "report metrics {} differ from recomputation {metrics:?}",
        report["metrics"]
    );
    ensure!(out_dir.join("report.txt").is_file(), "report.txt missing");

    // a photograph without ground truth
    let bare = toy.path("bare");
    std::fs::create_dir_all(&bare).unwrap();
    std::fs::copy(toy.image_path(&toy.ids[0]), bare.join("photo.png")).unwrap();
    let bare_out = toy.path("eval_bare");
    let out = toy.run(&["eval", "--model", m, "--image", bare.join("photo.png").to_str().unwrap(), "--out", bare_out.to_str().unwrap()]);
    ensure!(out.code == 0, "eval bare image: {}", out.describe());
    ensure!(bare_out.join("photo_overlay.png").is_file(), "no prediction-only overlay");
    ensure!(!bare_out.join("report.json").exists(), "metrics written without ground truth");

    // a photograph inside the dataset finds its ground truth
    let single_out = toy.path("eval_single");
    let out = toy.run(&["eval", "--model", m, "--image", toy.image_path(&toy.ids[0]).to_str().unwrap(), "--out", single_out.to_str().unwrap()]);
    ensure!(out.code == 0 && single_out.join("report.json").is_file(), "eval single labeled image: {}", out.describe());

    let untrained = toy.path("untrained/model.toml");
    std::fs::create_dir_all(untrained.parent().unwrap()).unwrap();
    sst_core::models::builtin_regression().save(&untrained).map_err(|e| e.to_string())?;
    let ds = toy.dataset.to_str().unwrap();
    let missing = toy.path("missing.toml");
    let cases: [(&[&str], i32); 5] = [
        (&["eval", "--model", m, "--dataset", ds, "--eval-stride", "0"], 2),
        (&["eval", "--model", m, "--dataset", ds, "--eval-stride", "52"], 2),
        (&["eval", "--model", untrained.to_str().unwrap(), "--dataset", ds], 2),
        (&["eval", "--model", missing.to_str().unwrap(), "--dataset", ds], 1),
        (&["eval", "--model", m], 2),
    ];
    for (args, code) in cases {
        let out = toy.run(args);
        ensure!(out.code == code, "{args:?}: expected exit {code}, {}", out.describe());
    }
    toy.cwd_untouched()
}

pub fn check_video(toy: &Toy, model: &Path) -> Check {
    let m = model.to_str().unwrap();
    let frames = toy.path("frames");
    std::fs::create_dir_all(&frames).unwrap();
    // lexicographic order differs from creation order and from id order
    let names = ["c.png", "a.png", "b10.png", "b2.png"];
    for (name, id) in names.iter().zip(&toy.ids) {
        std::fs::copy(toy.image_path(id), frames.join(name)).unwrap();
    }
    std::fs::write(frames.join("b5.png"), b"not a png").unwrap();
    let out_dir = toy.path("video");
    let out = toy.run(&["video", "--model", m, "--dataset", frames.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    ensure!(out.code == 0, "video: {}", out.describe());
    let manifest = json(&out_dir.join("manifest.json"))?;
    let sources: Vec<&str> = manifest["frames"]
        .as_array()
        .ok_or("manifest lacks frames")?
        .iter()
        .filter_map(|f| f["source"].as_str())
        .collect();
    ensure!(sources == ["a.png", "b10.png", "b2.png", "c.png"], "frame order {sources:?}");
    for i in 0..4 {
        ensure!(out_dir.join(format!("frame_{i:06}.png")).is_file(), "frame {i} missing");
    }
    ensure!(!out_dir.join("frame_000004.png").exists(), "unreadable frame was rendered");
    ensure!(manifest["skipped"][0]["source"] == "b5.png", "skipped frame not recorded: {manifest}");
    ensure!(manifest["fps"].is_u64() && manifest["encode"].is_string(), "manifest lacks fps or encode hint");

    let empty = toy.path("no_frames");
    std::fs::create_dir_all(&empty).unwrap();
    let empty_out = toy.path("video_empty");
    let out = toy.run(&["video", "--model", m, "--dataset", empty.to_str().unwrap(), "--out", empty_out.to_str().unwrap()]);
    ensure!(out.code == 0, "video on empty dir: {}", out.describe());
    ensure!(out.stderr.contains("WARN"), "no warning for an empty frame dir: {}", out.stderr);
    let manifest = json(&empty_out.join("manifest.json"))?;
    ensure!(manifest["frames"].as_array().is_some_and(Vec::is_empty), "empty dir manifest {manifest}");
    toy.cwd_untouched()
}

/// Kills the server when dropped.
pub struct Server {
    child: Child,
    pub addr: String,
}

impl Drop for Server {
    fn drop(&mut self) {
        self.child.kill().ok();
        self.child.wait().ok();
    }
}

impl Server {
    pub fn start(toy: &Toy, args: &[&str]) -> Result<Server, String> {
        let mut cmd = toy.command(args);
        cmd.stdout(Stdio::piped()).stderr(Stdio::null());
        let mut child = cmd.spawn().map_err(|e| e.to_string())?;
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap())
            .read_line(&mut line)
            .map_err(|e| e.to_string())?;
        let addr = line.trim().strip_prefix("listening on http://").map(str::to_string);
        match addr {
            Some(addr) => Ok(Server { child, addr }),
            None => {
                child.kill().ok();
                let status = child.wait().map_err(|e| e.to_string())?;
                Err(format!("server did not start ({status}): {line:?}"))
            }
        }
    }

    pub fn get(&self, path: &str) -> Result<Response, String> {
        let mut stream = TcpStream::connect(&self.addr).map_err(|e| e.to_string())?;
        stream.set_read_timeout(Some(Duration::from_secs(120))).ok();
        write!(stream, "GET {path} HTTP/1.1\r\nHost: {}\r\nConnection: close\r\n\r\n", self.addr).map_err(|e| e.to_string())?;
        let mut raw = Vec::new();
        stream.read_to_end(&mut raw).map_err(|e| e.to_string())?;
        let split = raw.windows(4).position(|w| w == b"\r\n\r\n").ok_or("malformed response")?;
        let head = String::from_utf8_lossy(&raw[..split]).into_owned();
        let mut lines = head.lines();
        let status = lines
            .next()
            .and_then(|l| l.split_whitespace().nth(1))
            .and_then(|s| s.parse().ok())
            .ok_or("malformed status line")?;
        let headers = lines
            .filter_map(|l| l.split_once(':'))
            .map(|(k, v)| (k.trim().to_ascii_lowercase(), v.trim().to_string()))
            .collect();
        Ok(Response {
            status,
            headers,
            body: raw[split + 4..].to_vec(),
        })
    }
}

pub struct Response {
    pub status: u16,
    pub headers: HashMap<String, String>,
    pub body: Vec<u8>,
}

impl Response {
    pub fn json(&self) -> Result<serde_json::Value, String> {
        serde_json::from_slice(&self.body).map_err(|e| format!("{e}: {:?}", String::from_utf8_lossy(&self.body)))
    }
}

pub fn check_serve(toy: &Toy, model: &Path) -> Check {
    // three photographs with ground truth, one without
    let root = toy.copy_dataset("serve_root", &[&toy.ids[3]], false);
    let cache = toy.path("serve_cache");
    let server = Server::start(
        toy,
        &["serve", "--model", model.to_str().unwrap(), "--dataset", root.to_str().unwrap(), "--port", "0", "--out", cache.to_str().unwrap()],
    )?;
    let id = &toy.ids[0];

    let r = server.get("/images")?;
    ensure!(r.status == 200, "/images status {}", r.status);
    let mut ids = toy.ids.clone();
    ids.sort();
    ensure!(r.json()? == serde_json::json!(ids), "/images lists {:?}", r.json()?);

    let first = server.get(&format!("/overlay/{id}?stride=25"))?;
    ensure!(first.status == 200, "overlay status {}", first.status);
    ensure!(first.headers.get("content-type").map(String::as_str) == Some("image/png"), "overlay is not a PNG");
    let img = image::load_from_memory(&first.body).map_err(|e| e.to_string())?;
    ensure!(img.width() as usize == TOY_W && img.height() as usize == TOY_H, "overlay has the wrong size");
    ensure!(first.headers.get("x-cache").map(String::as_str) == Some("miss"), "first request not a miss");
    let second = server.get(&format!("/overlay/{id}?stride=25"))?;
    ensure!(second.status == 200 && second.body == first.body, "cached overlay differs");
    ensure!(second.headers.get("x-cache").map(String::as_str) == Some("hit"), "second request not a hit");
    let hash = sst_core::models::ModelDescriptor::load(model).and_then(|m| m.content_hash()).map_err(|e| e.to_string())?;
    let sidecar = json(&cache.join(&hash[..16]).join(format!("{id}_s25.json")))?;
    ensure!(sidecar["cache_hit"] == true, "sidecar does not note the cache hit: {sidecar}");
    ensure!(sidecar["patch_evaluations"] == TOY_H.div_ceil(25) * TOY_W.div_ceil(25), "sidecar {sidecar}");

    // identical concurrent requests trigger one segmentation
    let before = server.get("/status")?.json()?["segmentations"].as_u64().unwrap_or(0);
    let statuses: Vec<u16> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..4).map(|_| s.spawn(|| server.get(&format!("/overlay/{id}?stride=17")))).collect();
        handles.into_iter().map(|h| h.join().unwrap().map_or(0, |r| r.status)).collect()
    });
    ensure!(statuses.iter().all(|&s| s == 200), "concurrent statuses {statuses:?}");
    let after = server.get("/status")?.json()?["segmentations"].as_u64().unwrap_or(0);
    ensure!(after == before + 1, "4 identical requests ran {} segmentations", after - before);

    let r = server.get(&format!("/metrics/{id}"))?;
    ensure!(r.status == 200, "/metrics status {}", r.status);
    let metrics = r.json()?;
    ensure!(metrics["f1"].is_f64() && metrics["acc"].is_f64(), "/metrics body {metrics}");

    let statuses = [
        ("/overlay/missing", 404),
        (&format!("/overlay/{id}?stride=0") as &str, 400),
        (&format!("/overlay/{id}?stride=52"), 400),
        (&format!("/overlay/{id}?stride=abc"), 400),
        ("/metrics/missing", 404),
        (&format!("/metrics/{}", toy.ids[3]), 404),
        ("/", 200),
    ];
    for (path, code) in statuses {
        let r = server.get(path)?;
        ensure!(r.status == code, "GET {path}: {} (expected {code})", r.status);
    }
    let page = String::from_utf8_lossy(&server.get("/")?.body).into_owned();
    ensure!(page.contains("/images") && page.contains("/overlay/"), "index page does not use the endpoints");
    drop(server);
    toy.cwd_untouched()
}
