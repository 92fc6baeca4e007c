use log::{info, warn};
use sst_core::dataset::{load_dataset, split_dataset, DatasetSplit};
use sst_core::models::{check_contract, train};
use sst_core::patcher::{PadMode, PatchIndex, PatchSpec};

use crate::{check_stride, default_stride, output_dir, resolve_model, write_json, CliResult, Failure, TrainArgs, EXIT_DATA};

pub const TEST_FRACTION: f64 = 0.2;

pub fn run(args: &TrainArgs) -> CliResult<()> {
    let mut model = resolve_model(&args.model)?;
    if let Some(n) = args.patch_size {
        if n != model.patch_size {
            return Err(Failure::config(format!(
                "--patch-size {n} does not match model {} (patch size {})",
                model.name, model.patch_size
            )));
        }
    }
    if let Some(epochs) = args.epochs {
        model.hyper.epochs = epochs;
    }
    if let Some(seed) = args.seed {
        model.hyper.seed = seed;
    }
    let stride = check_stride(&model, args.train_stride.unwrap_or_else(|| default_stride(&model)))?;
    let spec = PatchSpec::new(model.patch_size, stride, model.fully)?;
    check_contract(&model, &spec)?;

    let dataset = load_dataset(&args.dataset, args.half_size)?;
    if dataset.images.is_empty() {
        return Err(Failure::new(EXIT_DATA, format!("no images found under {}", args.dataset.display())));
    }
    let seed = model.hyper.seed;
    let split = if dataset.images.len() < 5 {
        warn!("only {} images; training on all of them without a test split", dataset.images.len());
        DatasetSplit {
            seed,
            test_fraction: 0.0,
            train: dataset.images.iter().map(|i| i.id.clone()).collect(),
            test: Vec::new(),
        }
    } else {
        split_dataset(&dataset.images, TEST_FRACTION, seed)?
    };
    let training = DatasetSplit::select(&dataset.images, &split.train)?;
    let source = PatchIndex::new(&training, spec, PadMode::Replicate, None);
    let out = output_dir(&args.out, "train")?;
    info!(
        "training {} on {} images ({} patches, stride {stride}), {} epochs",
        model.name,
        training.len(),
        sst_core::patcher::PatchSource::len(&source),
        model.hyper.epochs
    );

    let epochs = model.hyper.epochs;
    let trained = train(model, &source, &mut |e| {
        let val = e.validation_loss.map_or_else(|| "-".into(), |v| format!("{v:.6}"));
        info!("epoch {}/{epochs} train {:.6} validation {val}", e.epoch, e.train_loss);
    })?;

    let model_path = out.join("model.toml");
    trained.save(&model_path)?;
    split.save(&out.join("split.json"))?;
    write_json(&out.join("training_log.json"), &trained.training_log)?;
    println!("model: {}", model_path.display());
    println!("weights sha256: {}", trained.content_hash()?);
    Ok(())
}
