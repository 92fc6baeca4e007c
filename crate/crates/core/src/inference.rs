//! Whole-image segmentation from patch models.
//!
//! Center classifiers are evaluated as a strided sliding window; pixels
//! between evaluated centers copy the probability of the nearest center
//! (Chebyshev distance). Patch regressors are evaluated on the same grid and
//! stitched: each pixel takes its value from the patch whose center is
//! nearest (Euclidean distance). Both ownership rules break ties towards the
//! lexicographically smaller center. Ownership is computed before any patch
//! is evaluated, so patch evaluation order and parallelism cannot change the
//! result.

use std::fs;
use std::path::Path;
use std::time::Duration;

#[cfg(not(target_family = "wasm"))]
use std::time::Instant;
#[cfg(target_family = "wasm")]
use web_time::Instant;

use image::{ImageBuffer, Luma, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ModelDescriptor;
use crate::patcher::{axis_centers, copy_window, pad_image, PadMode};
use crate::tensor::Tensor;

/// Anything that maps batches of `n×n×3` patches to probabilities.
pub trait PatchModel: Sync {
    fn patch_size(&self) -> usize;
    /// `true`: one value per patch pixel; `false`: one value per patch.
    fn fully(&self) -> bool;
    /// Evaluates `batch` patches stored back to back.
    fn predict(&self, patches: &[f64], batch: usize) -> Result<Vec<f64>>;
}

impl PatchModel for ModelDescriptor {
    fn patch_size(&self) -> usize {
        self.patch_size
    }

    fn fully(&self) -> bool {
        self.fully
    }

    fn predict(&self, patches: &[f64], batch: usize) -> Result<Vec<f64>> {
        self.network()?.forward_batch(patches, batch)
    }
}

/// Predicts the same probability everywhere.
#[derive(Debug, Clone, Copy)]
pub struct ConstantModel {
    pub patch_size: usize,
    pub fully: bool,
    pub value: f64,
}

impl PatchModel for ConstantModel {
    fn patch_size(&self) -> usize {
        self.patch_size
    }

    fn fully(&self) -> bool {
        self.fully
    }

    fn predict(&self, _: &[f64], batch: usize) -> Result<Vec<f64>> {
        let per = if self.fully { self.patch_size * self.patch_size } else { 1 };
        Ok(vec![self.value; batch * per])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentOptions {
    pub stride: usize,
    pub padding: PadMode,
    /// Patches per model call.
    pub batch_size: usize,
    /// Worker threads evaluating disjoint runs of patches.
    pub workers: usize,
}

impl SegmentOptions {
    pub fn with_stride(stride: usize) -> Self {
        SegmentOptions {
            stride,
            padding: PadMode::Replicate,
            batch_size: 32,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationResult {
    /// `H×W` in `[0, 1]`.
    pub probabilities: Tensor,
    /// `H×W`, `round_probabilities(probabilities, 0.5)`.
    pub mask: Tensor,
    pub eval_stride: usize,
    pub elapsed: Duration,
    pub patch_evaluations: usize,
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Values at or above `threshold` become 1, the rest 0.
pub fn round_probabilities(probabilities: &Tensor, threshold: f64) -> Result<Tensor> {
    if let Some(v) = probabilities.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Numeric(format!("probability {v} outside [0, 1]")));
    }
    Ok(probabilities.map(|v| if v >= threshold { 1.0 } else { 0.0 }))
}

/// For every coordinate along an axis, the index of the nearest center
/// (smaller center on ties).
pub fn axis_owners(len: usize, centers: &[usize]) -> Vec<usize> {
    let mut owners = Vec::with_capacity(len);
    let mut k = 0;
    for x in 0..len {
        while k + 1 < centers.len() && centers[k + 1].abs_diff(x) < centers[k].abs_diff(x) {
            k += 1;
        }
        owners.push(k);
    }
    owners
}

/// Index (row-major over the grid) of the patch owning every pixel under
/// nearest-center Euclidean stitching.
pub fn regression_owners(h: usize, w: usize, stride: usize) -> Vec<usize> {
    let rows = axis_owners(h, &axis_centers(h, stride));
    let cols_centers = axis_centers(w, stride);
    let cols = axis_owners(w, &cols_centers);
    let nc = cols_centers.len();
    let mut out = Vec::with_capacity(h * w);
    for &r in &rows {
        out.extend(cols.iter().map(|&c| r * nc + c));
    }
    out
}

/// Index of the center whose probability fills every pixel of a sliding
/// window segmentation: minimal Chebyshev distance, then smaller row, then
/// smaller column.
pub fn sliding_window_owners(h: usize, w: usize, stride: usize) -> Vec<usize> {
    let rc = axis_centers(h, stride);
    let cc = axis_centers(w, stride);
    let row_d: Vec<usize> = axis_owners(h, &rc).iter().enumerate().map(|(y, &k)| rc[k].abs_diff(y)).collect();
    let col_d: Vec<usize> = axis_owners(w, &cc).iter().enumerate().map(|(x, &k)| cc[k].abs_diff(x)).collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let d = row_d[y].max(col_d[x]);
            // every center within d along both axes is at Chebyshev distance d
            let r = rc.partition_point(|&c| c + d < y);
            let c = cc.partition_point(|&c| c + d < x);
            out.push(r * cc.len() + c);
        }
    }
    out
}

/// Evaluates the patches at `centers` and hands each output to `reduce`,
/// returning the reductions in center order.
fn run_patches<R: Send>(
    model: &dyn PatchModel,
    padded: &Tensor,
    centers: &[(usize, usize)],
    opts: &SegmentOptions,
    reduce: &(dyn Fn(usize, &[f64]) -> R + Sync),
) -> Result<Vec<R>> {
    let n = model.patch_size();
    let px = n * n * 3;
    let per = if model.fully() { n * n } else { 1 };
    let batch = opts.batch_size.max(1);
    let work = |start: usize, run: &[(usize, usize)]| -> Result<Vec<R>> {
        let mut buf = vec![0.0; batch.min(run.len().max(1)) * px];
        let mut out = Vec::with_capacity(run.len());
        for (chunk_idx, chunk) in run.chunks(batch).enumerate() {
            for (k, &c) in chunk.iter().enumerate() {
                copy_window(padded, n, c, &mut buf[k * px..(k + 1) * px]);
            }
            let pred = model.predict(&buf[..chunk.len() * px], chunk.len())?;
            if pred.len() != chunk.len() * per {
                return Err(Error::Dimension(format!(
                    "model returned {} values for {} patches",
                    pred.len(),
                    chunk.len()
                )));
            }
            for (k, p) in pred.chunks_exact(per).enumerate() {
                out.push(reduce(start + chunk_idx * batch + k, p));
            }
        }
        Ok(out)
    };
    let workers = opts.workers.clamp(1, centers.len().max(1));
    if workers == 1 {
        return work(0, centers);
    }
    let span = centers.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = centers
            .chunks(span)
            .enumerate()
            .map(|(i, run)| {
                let work = &work;
                s.spawn(move || work(i * span, run))
            })
            .collect();
        let mut all = Vec::with_capacity(centers.len());
        for h in handles {
            all.extend(h.join().expect("patch worker panicked")?);
        }
        Ok(all)
    })
}

fn check_stride(model: &dyn PatchModel, stride: usize) -> Result<()> {
    if stride == 0 || stride > model.patch_size() {
        return Err(Error::Argument(format!(
            "evaluation stride must lie in [1, {}], got {stride}",
            model.patch_size()
        )));
    }
    Ok(())
}

fn image_hw(image: &Tensor) -> Result<(usize, usize)> {
    match *image.shape() {
        [h, w, 3] => Ok((h, w)),
        _ => Err(Error::Dimension(format!("expected an HxWx3 image, got {:?}", image.shape()))),
    }
}

fn finish(probabilities: Tensor, stride: usize, evaluations: usize, started: Instant) -> Result<SegmentationResult> {
    let mask = round_probabilities(&probabilities, DEFAULT_THRESHOLD)?;
    Ok(SegmentationResult {
        probabilities,
        mask,
        eval_stride: stride,
        elapsed: started.elapsed().max(Duration::from_nanos(1)),
        patch_evaluations: evaluations,
    })
}

/// Classifies the center pixel of every grid patch and fills the remaining
/// pixels from their nearest evaluated center.
pub fn segment_sliding_window(
    model: &dyn PatchModel,
    image: &Tensor,
    opts: &SegmentOptions,
) -> Result<SegmentationResult> {
    let started = Instant::now();
    if model.fully() {
        return Err(Error::Config("sliding-window evaluation needs a center classifier (fully = false)".into()));
    }
    check_stride(model, opts.stride)?;
    let (h, w) = image_hw(image)?;
    let padded = pad_image(image, model.patch_size() / 2, opts.padding);
    let rows = axis_centers(h, opts.stride);
    let cols = axis_centers(w, opts.stride);
    let centers: Vec<(usize, usize)> = rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect();
    let values = run_patches(model, &padded, &centers, opts, &|_, p| p[0])?;
    let owners = sliding_window_owners(h, w, opts.stride);
    let probabilities = Tensor::new(vec![h, w], owners.iter().map(|&o| values[o]).collect())?;
    finish(probabilities, opts.stride, centers.len(), started)
}

/// Predicts every grid patch and stitches the outputs by nearest center.
pub fn segment_regression(
    model: &dyn PatchModel,
    image: &Tensor,
    opts: &SegmentOptions,
) -> Result<SegmentationResult> {
    let started = Instant::now();
    if !model.fully() {
        return Err(Error::Config("patch stitching needs a whole-patch model (fully = true)".into()));
    }
    check_stride(model, opts.stride)?;
    let (h, w) = image_hw(image)?;
    let n = model.patch_size();
    let half = n / 2;
    let padded = pad_image(image, half, opts.padding);
    let rc = axis_centers(h, opts.stride);
    let cc = axis_centers(w, opts.stride);
    let row_owner = axis_owners(h, &rc);
    let col_owner = axis_owners(w, &cc);
    // the rows/cols owned by center k form one contiguous run
    let runs = |owner: &[usize], k: usize| {
        let lo = owner.partition_point(|&o| o < k);
        lo..owner.partition_point(|&o| o <= k)
    };
    let centers: Vec<(usize, usize)> = rc.iter().flat_map(|&r| cc.iter().map(move |&c| (r, c))).collect();
    let ncols = cc.len();
    let blocks = run_patches(model, &padded, &centers, opts, &|idx, p| {
        let (ri, ci) = (idx / ncols, idx % ncols);
        let (ys, xs) = (runs(&row_owner, ri), runs(&col_owner, ci));
        let (cy, cx) = (rc[ri], cc[ci]);
        let mut block = Vec::with_capacity(ys.len() * xs.len());
        for y in ys {
            let py = y + half - cy;
            for x in xs.clone() {
                block.push(p[py * n + x + half - cx]);
            }
        }
        block
    })?;
    let mut probs = vec![0.0; h * w];
    for (idx, block) in blocks.iter().enumerate() {
        let (ys, xs) = (runs(&row_owner, idx / ncols), runs(&col_owner, idx % ncols));
        let width = xs.len();
        for (k, y) in ys.enumerate() {
            probs[y * w + xs.start..y * w + xs.end].copy_from_slice(&block[k * width..(k + 1) * width]);
        }
    }
    finish(Tensor::new(vec![h, w], probs)?, opts.stride, centers.len(), started)
}

/// Dispatches on the model kind; `elapsed` covers the whole segmentation
/// and excludes any image I/O done by the caller.
pub fn timed_segment(model: &dyn PatchModel, image: &Tensor, opts: &SegmentOptions) -> Result<SegmentationResult> {
    if model.fully() {
        segment_regression(model, image, opts)
    } else {
        segment_sliding_window(model, image, opts)
    }
}

const TP_COLOR: [f64; 3] = [0.0, 1.0, 0.0];
const FP_COLOR: [f64; 3] = [0.0, 0.0, 1.0];
const FN_COLOR: [f64; 3] = [1.0, 0.0, 0.0];
const ALPHA: f64 = 0.5;

/// Blends the segmentation into the photograph: true positives green, false
/// positives blue, false negatives red; true negatives are left untouched.
/// Without ground truth every predicted street pixel is tinted green.
pub fn render_overlay(image: &Tensor, predicted: &Tensor, truth: Option<&Tensor>) -> Result<RgbImage> {
    let (h, w) = image_hw(image)?;
    if predicted.shape() != [h, w] || truth.is_some_and(|t| t.shape() != [h, w]) {
        return Err(Error::Dimension(format!(
            "overlay of a {h}x{w} image needs {h}x{w} masks, got {:?} / {:?}",
            predicted.shape(),
            truth.map(|t| t.shape().to_vec())
        )));
    }
    let mut out = RgbImage::new(w as u32, h as u32);
    for (i, px) in out.pixels_mut().enumerate() {
        let p = predicted.data()[i] >= 0.5;
        let tint = match truth.map(|t| t.data()[i] >= 0.5) {
            Some(true) if p => Some(TP_COLOR),
            Some(false) if p => Some(FP_COLOR),
            Some(true) => Some(FN_COLOR),
            Some(false) => None,
            None => p.then_some(TP_COLOR),
        };
        let src = &image.data()[i * 3..i * 3 + 3];
        for c in 0..3 {
            let v = match tint {
                Some(t) => (1.0 - ALPHA) * src[c] + ALPHA * t[c],
                None => src[c],
            };
            px.0[c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    Ok(out)
}

/// Probability map as 16-bit grayscale, `round(p · 65535)`.
pub fn write_probability_png(path: &Path, probabilities: &Tensor) -> Result<()> {
    let &[h, w] = probabilities.shape() else {
        return Err(Error::Dimension("probability map must be HxW".into()));
    };
    let raw: Vec<u16> = probabilities
        .data()
        .iter()
        .map(|&p| (p.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, raw).expect("buffer length matches");
    img.save(path)?;
    Ok(())
}

/// Binary mask as a 1-bit grayscale PNG (street = white).
pub fn write_mask_png(path: &Path, mask: &Tensor) -> Result<()> {
    let &[h, w] = mask.shape() else {
        return Err(Error::Dimension("mask must be HxW".into()));
    };
    let stride = w.div_ceil(8);
    let mut packed = vec![0u8; stride * h];
    for y in 0..h {
        for x in 0..w {
            if mask.data()[y * w + x] >= 0.5 {
                packed[y * stride + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(std::io::BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::One);
    let png_err = |e: png::EncodingError| Error::Format(format!("{}: {e}", path.display()));
    let mut writer = encoder.write_header().map_err(png_err)?;
    writer.write_image_data(&packed).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

/// Reads a mask written by [`write_mask_png`] (any grayscale PNG works).
pub fn read_mask_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Tensor::new(
        vec![h as usize, w as usize],
        img.as_raw().iter().map(|&v| if v >= 128 { 1.0 } else { 0.0 }).collect(),
    )
}

/// JSON sidecar written next to every segmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub model: String,
    pub stride: usize,
    pub elapsed_ms: f64,
    pub patch_evaluations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_hit: Option<bool>,
}

impl Sidecar {
    pub fn new(model: &str, result: &SegmentationResult) -> Self {
        Sidecar {
            model: model.to_string(),
            stride: result.eval_stride,
            elapsed_ms: result.elapsed.as_secs_f64() * 1000.0,
            patch_evaluations: result.patch_evaluations,
            cache_hit: None,
        }
    }
}
