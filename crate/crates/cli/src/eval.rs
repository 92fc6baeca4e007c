use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;
use sst_core::dataset::{
    decode_label, downscale_mask, ground_truth_name, load_dataset, load_photo, read_rgb, DatasetSplit,
};
use sst_core::inference::{
    render_overlay, timed_segment, write_mask_png, write_probability_png, SegmentOptions, SegmentationResult, Sidecar,
};
use sst_core::metrics::{average_precision, basic_metrics, confusion, format_table, ApRule, ConfusionCounts, MetricReport};
use sst_core::models::ModelDescriptor;
use sst_core::Tensor;

use crate::{check_stride, default_stride, load_model, output_dir, write_json, CliResult, EvalArgs, Failure, EXIT_DATA};

/// Probability maps are stored with 16 bits; metrics use the stored values so
/// they can be recomputed from the written files.
pub fn quantize(p: f64) -> f64 {
    (p * 65535.0).round() / 65535.0
}

pub fn segment_options(stride: usize) -> SegmentOptions {
    let mut opts = SegmentOptions::with_stride(stride);
    opts.workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    opts
}

/// The ground-truth file of a photograph inside a KITTI layout
/// (`…/image_2/um_000000.png` → `…/gt_image_2/um_road_000000.png`).
pub fn ground_truth_path(image: &Path) -> Option<PathBuf> {
    let id = image.file_stem()?.to_str()?;
    let gt_dir = image.parent()?.parent()?.join("gt_image_2");
    let path = gt_dir.join(ground_truth_name(id)?);
    path.is_file().then_some(path)
}

pub fn load_truth(path: &Path, half_size: bool) -> CliResult<Tensor> {
    let mask = decode_label(&read_rgb(path)?)?;
    Ok(if half_size { downscale_mask(&mask)? } else { mask })
}

/// Per-image outcome of a segmentation.
pub struct Outcome {
    pub result: SegmentationResult,
    pub counts: Option<ConfusionCounts>,
    pub scores: Vec<(f64, bool)>,
}

/// Segments one image and writes `<stem>_probability.png`, `<stem>_mask.png`,
/// `<stem>_overlay.png` and the `<stem>.json` sidecar into `dir`.
pub fn segment_and_write(
    model: &ModelDescriptor,
    rgb: &Tensor,
    truth: Option<&Tensor>,
    stride: usize,
    dir: &Path,
    stem: &str,
) -> CliResult<Outcome> {
    let result = timed_segment(model, rgb, &segment_options(stride))?;
    write_probability_png(&dir.join(format!("{stem}_probability.png")), &result.probabilities)?;
    write_mask_png(&dir.join(format!("{stem}_mask.png")), &result.mask)?;
    let overlay = render_overlay(rgb, &result.mask, truth)?;
    let overlay_path = dir.join(format!("{stem}_overlay.png"));
    overlay.save(&overlay_path).map_err(|e| Failure::from(sst_core::Error::from(e)))?;
    write_json(&dir.join(format!("{stem}.json")), &Sidecar::new(&model.name, &result))?;
    let (counts, scores) = match truth {
        Some(t) => {
            let counts = confusion(&result.mask, t)?;
            let scores = result
                .probabilities
                .data()
                .iter()
                .zip(t.data())
                .map(|(&p, &g)| (quantize(p), g == 1.0))
                .collect();
            (Some(counts), scores)
        }
        None => (None, Vec::new()),
    };
    Ok(Outcome { result, counts, scores })
}

/// Pooled metrics of an evaluation run, written as `report.json`.
#[derive(Debug, Serialize)]
pub struct Report {
    pub model: String,
    pub stride: usize,
    pub images: Vec<String>,
    pub counts: ConfusionCounts,
    pub metrics: MetricReport,
    pub ap_rule: ApRule,
}

pub fn report(model: &str, stride: usize, images: Vec<String>, counts: ConfusionCounts, scores: &[(f64, bool)]) -> CliResult<Report> {
    let mut metrics = basic_metrics(&counts)?;
    let rule = ApRule::default();
    metrics.ap = average_precision(scores, rule)?;
    Ok(Report {
        model: model.to_string(),
        stride,
        images,
        counts,
        metrics,
        ap_rule: rule,
    })
}

pub fn run(args: &EvalArgs) -> CliResult<()> {
    let model = load_model(&args.model)?;
    let stride = check_stride(&model, args.eval_stride.unwrap_or_else(|| default_stride(&model)))?;
    if !model.is_trained() {
        return Err(sst_core::Error::Untrained.into());
    }

    // (id, rgb, truth)
    let mut inputs: Vec<(String, Tensor, Option<Tensor>)> = Vec::new();
    if let Some(path) = &args.image {
        let rgb = load_photo(path, args.half_size)?;
        let truth = ground_truth_path(path).map(|p| load_truth(&p, args.half_size)).transpose()?;
        let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
        inputs.push((id, rgb, truth));
    } else if let Some(root) = &args.dataset {
        let dataset = load_dataset(root, args.half_size)?;
        let split_path = args.model.parent().unwrap_or(Path::new(".")).join("split.json");
        let selected: Vec<_> = match (args.all, split_path.is_file()) {
            (false, true) => {
                let split = DatasetSplit::load(&split_path)?;
                if split.test.is_empty() {
                    dataset.images.iter().collect()
                } else {
                    info!("evaluating the {} test images of {}", split.test.len(), split_path.display());
                    DatasetSplit::select(&dataset.images, &split.test)?
                }
            }
            _ => dataset.images.iter().collect(),
        };
        if selected.is_empty() {
            return Err(Failure::new(EXIT_DATA, format!("no images found under {}", root.display())));
        }
        for img in selected {
            inputs.push((img.id.clone(), img.rgb.clone(), Some(img.mask.clone())));
        }
    }

    let out = output_dir(&args.out, "eval")?;
    let mut pooled = ConfusionCounts::default();
    let mut scores = Vec::new();
    let mut scored = Vec::new();
    for (id, rgb, truth) in &inputs {
        let o = segment_and_write(&model, rgb, truth.as_ref(), stride, &out, id)?;
        info!(
            "{id}: {} patches in {:.1} ms",
            o.result.patch_evaluations,
            o.result.elapsed.as_secs_f64() * 1000.0
        );
        if let Some(c) = o.counts {
            pooled += c;
            scores.extend(o.scores);
            scored.push(id.clone());
        }
    }
    if scored.is_empty() {
        println!("no ground truth; wrote prediction-only overlays to {}", out.display());
        return Ok(());
    }
    let report = report(&model.name, stride, scored, pooled, &scores)?;
    write_json(&out.join("report.json"), &report)?;
    let table = format_table(&[(model.name.clone(), pooled)])?;
    let ap = report.metrics.ap.map_or_else(|| "undef".to_string(), |v| format!("{:.1}%", v * 100.0));
    let text = format!("{table}AP {ap} over {} image(s), stride {stride}\n", report.images.len());
    std::fs::write(out.join("report.txt"), &text)
        .map_err(|e| Failure::new(crate::EXIT_ENVIRONMENT, format!("cannot write report: {e}")))?;
    print!("{text}");
    Ok(())
}
