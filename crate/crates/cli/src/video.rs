use log::{info, warn};
use serde::Serialize;
use sst_core::dataset::{list_pngs, load_photo};
use sst_core::inference::{render_overlay, timed_segment};

use crate::eval::segment_options;
use crate::{check_stride, default_stride, load_model, output_dir, write_json, CliResult, Failure, VideoArgs, EXIT_DATA};

#[derive(Debug, Serialize)]
pub struct Frame {
    pub index: usize,
    pub source: String,
    pub overlay: String,
}

#[derive(Debug, Serialize)]
pub struct Skipped {
    pub source: String,
    pub error: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub fps: u32,
    pub stride: usize,
    pub frames: Vec<Frame>,
    pub skipped: Vec<Skipped>,
    /// Suggested encoder invocation, run from the output directory.
    pub encode: String,
}

pub fn run(args: &VideoArgs) -> CliResult<()> {
    let model = load_model(&args.model)?;
    let stride = check_stride(&model, args.eval_stride.unwrap_or_else(|| default_stride(&model)))?;
    if !model.is_trained() {
        return Err(sst_core::Error::Untrained.into());
    }
    if !args.dataset.is_dir() {
        return Err(Failure::new(EXIT_DATA, format!("frame directory {} not found", args.dataset.display())));
    }
    let sources = list_pngs(&args.dataset)?;
    let out = output_dir(&args.out, "video")?;
    if sources.is_empty() {
        warn!("no PNG frames in {}", args.dataset.display());
    }
    let opts = segment_options(stride);
    let mut frames = Vec::new();
    let mut skipped = Vec::new();
    for path in &sources {
        let source = path.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
        let rendered = load_photo(path, args.half_size)
            .and_then(|rgb| Ok((timed_segment(&model, &rgb, &opts)?, rgb)))
            .and_then(|(res, rgb)| render_overlay(&rgb, &res.mask, None));
        match rendered {
            Ok(overlay) => {
                let index = frames.len();
                let name = format!("frame_{index:06}.png");
                overlay
                    .save(out.join(&name))
                    .map_err(|e| Failure::from(sst_core::Error::from(e)))?;
                frames.push(Frame {
                    index,
                    source,
                    overlay: name,
                });
            }
            Err(e) => {
                warn!("skipping {source}: {e}");
                skipped.push(Skipped {
                    source,
                    error: e.to_string(),
                });
            }
        }
    }
    info!("rendered {} frame(s), skipped {}", frames.len(), skipped.len());
    let manifest = Manifest {
        fps: args.fps,
        stride,
        frames,
        skipped,
        encode: format!(
            "ffmpeg -framerate {} -i frame_%06d.png -c:v libx264 -pix_fmt yuv420p overlay.mp4",
            args.fps
        ),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    println!("manifest: {}", out.join("manifest.json").display());
    Ok(())
}
