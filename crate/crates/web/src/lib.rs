//! Browser demo built on `sst-core`: patch ownership maps for a stride, a
//! small whole-patch regressor trained in the page on synthetic road scenes,
//! and the metrics of its segmentation at any threshold.
//!
//! The plain Rust API below is what the tests exercise; the `wasm` module
//! wraps it for JavaScript.

use sst_core::dataset::LabeledImage;
use sst_core::inference::{
    regression_owners, render_overlay, round_probabilities, sliding_window_owners, timed_segment, SegmentOptions,
    SegmentationResult,
};
use sst_core::metrics::{average_precision, basic_metrics, confusion, score_pairs, ApRule, MetricReport};
use sst_core::models::{train, Hyperparameters, ModelDescriptor};
use sst_core::nn::{LayerConfig, LossKind, Padding};
use sst_core::patcher::{center_grid, PadMode, PatchIndex, PatchSpec};
use sst_core::synth::scene;

pub const DEMO_PATCH: usize = 15;
pub const SCENE_H: usize = 60;
pub const SCENE_W: usize = 90;
pub const TRAIN_SCENES: usize = 6;
/// Training stride used by the page; overlapping patches learn much faster
/// than a tiling.
pub const DEMO_TRAIN_STRIDE: usize = 7;

type Result<T> = std::result::Result<T, String>;

fn text<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Whole-patch regressor small enough to train in a browser tab.
pub fn demo_descriptor(seed: u64) -> ModelDescriptor {
    ModelDescriptor {
        name: "demo-regression".into(),
        patch_size: DEMO_PATCH,
        channels: 3,
        fully: true,
        layers: vec![
            LayerConfig::Convolution {
                filters: 6,
                height: 5,
                width: 5,
                padding: Padding::Same,
            },
            LayerConfig::Relu,
            LayerConfig::Flatten,
            LayerConfig::Dense {
                units: DEMO_PATCH * DEMO_PATCH,
            },
            LayerConfig::Sigmoid,
        ],
        loss: LossKind::MeanSquaredError,
        hyper: Hyperparameters {
            learning_rate: 1.0,
            batch_size: 16,
            epochs: 1,
            seed,
            validation_fraction: 0.0,
        },
        training_log: Vec::new(),
        network: None,
    }
}

/// Color of patch `k`, spread around the hue circle.
pub fn owner_color(k: usize) -> [u8; 3] {
    let hue = (k as f64 * 0.618_034).fract() * 6.0;
    let x = 1.0 - (hue % 2.0 - 1.0).abs();
    let (r, g, b) = match hue as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [r, g, b].map(|v| (80.0 + 150.0 * v) as u8)
}

pub struct OwnershipMap {
    /// `h·w·4` bytes.
    pub rgba: Vec<u8>,
    pub patches: usize,
    /// Pixels inside two or more patch windows.
    pub overlap_pixels: usize,
}

/// Which patch every pixel takes its value from: nearest center by
/// Euclidean distance for regression stitching, by Chebyshev distance for
/// sliding-window fill. Centers are drawn black, pixels covered by more than
/// one window are darkened.
pub fn ownership_map(h: usize, w: usize, stride: usize, patch_size: usize, sliding: bool) -> Result<OwnershipMap> {
    if h == 0 || w == 0 || h * w > 4_000_000 {
        return Err(format!("image size {h}x{w} out of range"));
    }
    if stride == 0 || stride > patch_size {
        return Err(format!("stride must lie in [1, {patch_size}], got {stride}"));
    }
    let owners = if sliding {
        sliding_window_owners(h, w, stride)
    } else {
        regression_owners(h, w, stride)
    };
    let centers = center_grid(h, w, stride);
    let half = patch_size / 2;
    let cover = |len: usize, x: usize| {
        sst_core::patcher::axis_centers(len, stride)
            .iter()
            .filter(|&&c| c.abs_diff(x) <= half)
            .count()
    };
    let rows: Vec<usize> = (0..h).map(|y| cover(h, y)).collect();
    let cols: Vec<usize> = (0..w).map(|x| cover(w, x)).collect();
    let mut rgba = Vec::with_capacity(h * w * 4);
    let mut overlap_pixels = 0;
    for (i, &o) in owners.iter().enumerate() {
        let mut c = owner_color(o);
        if rows[i / w] * cols[i % w] > 1 {
            overlap_pixels += 1;
            c = darken(c);
        }
        rgba.extend_from_slice(&[c[0], c[1], c[2], 255]);
    }
    for (r, c) in &centers {
        let at = (r * w + c) * 4;
        rgba[at..at + 3].copy_from_slice(&[0, 0, 0]);
    }
    Ok(OwnershipMap {
        rgba,
        patches: centers.len(),
        overlap_pixels,
    })
}

/// Shade of pixels inside several windows.
pub fn darken(c: [u8; 3]) -> [u8; 3] {
    c.map(|v| (v as f64 * 0.7) as u8)
}

fn rgb_to_rgba(rgb: Vec<u8>) -> Vec<u8> {
    rgb.chunks(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

/// Synthetic training scenes, a held-out test scene and the demo model.
pub struct Demo {
    training: Vec<LabeledImage>,
    test: LabeledImage,
    model: ModelDescriptor,
    last: Option<SegmentationResult>,
}

pub struct Segmented {
    pub overlay_rgba: Vec<u8>,
    pub patches: usize,
    pub elapsed_ms: f64,
}

impl Demo {
    pub fn new(seed: u64) -> Demo {
        let training = (0..TRAIN_SCENES).map(|i| scene(seed, i, SCENE_H, SCENE_W)).collect();
        let test = scene(seed.wrapping_add(1), TRAIN_SCENES, SCENE_H, SCENE_W);
        Demo {
            training,
            test,
            model: demo_descriptor(seed),
            last: None,
        }
    }

    pub fn width(&self) -> usize {
        SCENE_W
    }

    pub fn height(&self) -> usize {
        SCENE_H
    }

    pub fn epochs_trained(&self) -> usize {
        self.model.training_log.len()
    }

    pub fn model(&self) -> &ModelDescriptor {
        &self.model
    }

    pub fn test_image_rgba(&self) -> Result<Vec<u8>> {
        let rgb = sst_core::dataset::tensor_to_rgb(&self.test.rgb).map_err(text)?;
        Ok(rgb_to_rgba(rgb.into_raw()))
    }

    /// Runs `epochs` more epochs over patches at `stride`; returns the last
    /// training loss.
    pub fn train(&mut self, epochs: usize, stride: usize) -> Result<f64> {
        let spec = PatchSpec::new(DEMO_PATCH, stride, true).map_err(text)?;
        let images: Vec<&LabeledImage> = self.training.iter().collect();
        let source = PatchIndex::new(&images, spec, PadMode::Replicate, None);
        let mut model = self.model.clone();
        model.hyper.epochs = epochs;
        model.hyper.seed = self.model.hyper.seed.wrapping_add(self.epochs_trained() as u64);
        self.model = train(model, &source, &mut |_| {}).map_err(text)?;
        self.last = None;
        Ok(self.model.training_log.last().map_or(f64::NAN, |e| e.train_loss))
    }

    /// Segments the test scene; the overlay marks true positives green,
    /// false positives blue and false negatives red.
    pub fn segment(&mut self, stride: usize) -> Result<Segmented> {
        if !self.model.is_trained() {
            self.model.initialize().map_err(text)?;
        }
        let result = timed_segment(&self.model, &self.test.rgb, &SegmentOptions::with_stride(stride)).map_err(text)?;
        let overlay = render_overlay(&self.test.rgb, &result.mask, Some(&self.test.mask)).map_err(text)?;
        let out = Segmented {
            overlay_rgba: rgb_to_rgba(overlay.into_raw()),
            patches: result.patch_evaluations,
            elapsed_ms: result.elapsed.as_secs_f64() * 1000.0,
        };
        self.last = Some(result);
        Ok(out)
    }

    /// Metrics of the last segmentation when probabilities at or above
    /// `threshold` count as street; AP does not depend on the threshold.
    pub fn threshold_metrics(&self, threshold: f64) -> Result<MetricReport> {
        let last = self.last.as_ref().ok_or("segment first")?;
        if !(0.0..=1.0).contains(&threshold) {
            return Err(format!("threshold {threshold} outside [0, 1]"));
        }
        let mask = round_probabilities(&last.probabilities, threshold).map_err(text)?;
        let mut report = basic_metrics(&confusion(&mask, &self.test.mask).map_err(text)?).map_err(text)?;
        let scores = score_pairs(&last.probabilities, &self.test.mask).map_err(text)?;
        report.ap = average_precision(&scores, ApRule::default()).map_err(text)?;
        Ok(report)
    }
}

#[cfg(target_arch = "wasm32")]
mod wasm {
    use wasm_bindgen::prelude::*;

    fn js(e: String) -> JsError {
        JsError::new(&e)
    }

    /// Ownership map as `h·w·4` RGBA bytes.
    #[wasm_bindgen]
    pub fn ownership_rgba(h: usize, w: usize, stride: usize, patch_size: usize, sliding: bool) -> Result<Vec<u8>, JsError> {
        super::ownership_map(h, w, stride, patch_size, sliding).map(|m| m.rgba).map_err(js)
    }

    /// `{"patches": …, "overlap_pixels": …}` of the same map.
    #[wasm_bindgen]
    pub fn ownership_stats(h: usize, w: usize, stride: usize, patch_size: usize, sliding: bool) -> Result<String, JsError> {
        let m = super::ownership_map(h, w, stride, patch_size, sliding).map_err(js)?;
        Ok(serde_json::json!({ "patches": m.patches, "overlap_pixels": m.overlap_pixels }).to_string())
    }

    #[wasm_bindgen]
    pub struct WebDemo {
        demo: super::Demo,
        info: String,
    }

    #[wasm_bindgen]
    impl WebDemo {
        #[wasm_bindgen(constructor)]
        pub fn new(seed: u32) -> WebDemo {
            WebDemo {
                demo: super::Demo::new(seed as u64),
                info: "{}".into(),
            }
        }

        pub fn width(&self) -> usize {
            self.demo.width()
        }

        pub fn height(&self) -> usize {
            self.demo.height()
        }

        pub fn epochs_trained(&self) -> usize {
            self.demo.epochs_trained()
        }

        pub fn test_image(&self) -> Result<Vec<u8>, JsError> {
            self.demo.test_image_rgba().map_err(js)
        }

        pub fn train(&mut self, epochs: usize, stride: usize) -> Result<f64, JsError> {
            self.demo.train(epochs, stride).map_err(js)
        }

        /// Overlay RGBA bytes; `last_segment_info` has the counts.
        pub fn segment(&mut self, stride: usize) -> Result<Vec<u8>, JsError> {
            let s = self.demo.segment(stride).map_err(js)?;
            self.info = serde_json::json!({ "patches": s.patches, "elapsed_ms": s.elapsed_ms }).to_string();
            Ok(s.overlay_rgba)
        }

        pub fn last_segment_info(&self) -> String {
            self.info.clone()
        }

        pub fn threshold_metrics(&self, threshold: f64) -> Result<String, JsError> {
            let m = self.demo.threshold_metrics(threshold).map_err(js)?;
            Ok(serde_json::to_string(&m).expect("serializable"))
        }
    }
}
