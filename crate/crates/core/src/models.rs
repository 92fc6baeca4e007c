//! Model descriptors: a layer stack bound to a loss, a patch contract
//! (`patch_size`, `fully`) and training settings, with optional weights.
//!
//! On disk a descriptor is a TOML file; its weights live in an `SSTW`
//! container next to it, referenced by relative path.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{container, infer_shapes, sgd_step, Gradients, LayerConfig, LossKind, Network, Padding};
use crate::patcher::{PatchSource, PatchSpec};

pub const DESCRIPTOR_FORMAT: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Share of training patches held out for the validation loss.
    pub validation_fraction: f64,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Hyperparameters {
            learning_rate: 0.01,
            batch_size: 64,
            epochs: 20,
            seed: 42,
            validation_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelDescriptor {
    pub name: String,
    pub patch_size: usize,
    pub channels: usize,
    pub fully: bool,
    pub layers: Vec<LayerConfig>,
    pub loss: LossKind,
    pub hyper: Hyperparameters,
    pub training_log: Vec<EpochLog>,
    pub network: Option<Network>,
}

const INIT_SCHEME: &str = "glorot_uniform";

fn conv5(padding: Padding) -> LayerConfig {
    LayerConfig::Convolution {
        filters: 10,
        height: 5,
        width: 5,
        padding,
    }
}

/// Center-pixel classifier: two valid 5×5 convolutions with 10 filters each,
/// 2×2 max pooling, one sigmoid output.
pub fn builtin_classification() -> ModelDescriptor {
    ModelDescriptor {
        name: "classification".into(),
        patch_size: 51,
        channels: 3,
        fully: false,
        layers: vec![
            conv5(Padding::Valid),
            LayerConfig::Relu,
            conv5(Padding::Valid),
            LayerConfig::Relu,
            LayerConfig::MaxPool { height: 2, width: 2 },
            LayerConfig::Flatten,
            LayerConfig::Dense { units: 1 },
            LayerConfig::Sigmoid,
        ],
        loss: LossKind::BinaryLogLoss,
        hyper: Hyperparameters::default(),
        training_log: Vec::new(),
        network: None,
    }
}

/// Whole-patch regressor: one same-padded 5×5 convolution with 10 filters,
/// then a patch-sized fully connected map to `51·51` sigmoid outputs.
pub fn builtin_regression() -> ModelDescriptor {
    ModelDescriptor {
        name: "regression".into(),
        patch_size: 51,
        channels: 3,
        fully: true,
        layers: vec![
            conv5(Padding::Same),
            LayerConfig::Relu,
            LayerConfig::Flatten,
            LayerConfig::Dense { units: 51 * 51 },
            LayerConfig::Sigmoid,
        ],
        loss: LossKind::MeanSquaredError,
        hyper: Hyperparameters {
            learning_rate: 3.0,
            batch_size: 16,
            ..Hyperparameters::default()
        },
        training_log: Vec::new(),
        network: None,
    }
}

/// Built-in descriptor by name.
pub fn builtin(name: &str) -> Result<ModelDescriptor> {
    match name {
        "classification" => Ok(builtin_classification()),
        "regression" => Ok(builtin_regression()),
        other => Err(Error::Config(format!(
            "unknown built-in model {other:?} (expected classification or regression)"
        ))),
    }
}

impl ModelDescriptor {
    pub fn input_shape(&self) -> Vec<usize> {
        vec![self.patch_size, self.patch_size, self.channels]
    }

    /// Dry-run shape inference plus the patch contract: `fully` models emit
    /// `patch_size²` values, center classifiers exactly one.
    pub fn validate(&self) -> Result<Vec<Vec<usize>>> {
        if self.patch_size == 0 || self.patch_size % 2 == 0 {
            return Err(Error::Config(format!(
                "patch_size must be odd and positive, got {}",
                self.patch_size
            )));
        }
        if self.channels != 3 {
            return Err(Error::Config(format!("models take RGB input, got {} channels", self.channels)));
        }
        let shapes = infer_shapes(&self.input_shape(), &self.layers).map_err(|e| Error::Config(e.to_string()))?;
        let out: usize = shapes.last().ok_or_else(|| Error::Config("model has no layers".into()))?.iter().product();
        let want = if self.fully { self.patch_size * self.patch_size } else { 1 };
        if out != want {
            return Err(Error::Config(format!(
                "model {} (fully = {}) must output {want} values, its layers produce {out}",
                self.name, self.fully
            )));
        }
        if let Some(net) = &self.network {
            if net.configs() != self.layers || net.input_shape() != self.input_shape() {
                return Err(Error::Config("weights do not match the declared layers".into()));
            }
        }
        Ok(shapes)
    }

    /// Element counts of the input and of every convolution, pooling and
    /// dense output.
    pub fn shape_trace(&self) -> Result<Vec<usize>> {
        let shapes = self.validate()?;
        let mut trace = vec![self.input_shape().iter().product()];
        for (layer, shape) in self.layers.iter().zip(&shapes) {
            if layer.is_structural() {
                trace.push(shape.iter().product());
            }
        }
        Ok(trace)
    }

    pub fn is_trained(&self) -> bool {
        self.network.is_some()
    }

    pub fn network(&self) -> Result<&Network> {
        self.network.as_ref().ok_or(Error::Untrained)
    }

    /// Fresh weights from `hyper.seed`.
    pub fn initialize(&mut self) -> Result<()> {
        self.validate()?;
        self.network = Some(Network::initialize(&self.input_shape(), &self.layers, self.hyper.seed)?);
        Ok(())
    }

    pub fn weight_bytes(&self) -> Result<Vec<u8>> {
        Ok(container::encode_layers(self.network()?.layers()))
    }

    /// SHA-256 of the weight container, hex encoded.
    pub fn content_hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.weight_bytes()?);
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Writes the descriptor to `path` and, when trained, the weights to the
    /// same path with extension `sstw`.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let weights_path = path.with_extension("sstw");
        let weights = match &self.network {
            Some(net) => {
                let bytes = container::encode_layers(net.layers());
                fs::write(&weights_path, bytes).map_err(|e| Error::io(&weights_path, e))?;
                Some(
                    weights_path
                        .file_name()
                        .and_then(|n| n.to_str())
                        .ok_or_else(|| Error::Argument(format!("unusable model path {}", path.display())))?
                        .to_string(),
                )
            }
            None => None,
        };
        let file = DescriptorFile {
            format: DESCRIPTOR_FORMAT,
            name: self.name.clone(),
            patch_size: self.patch_size,
            channels: self.channels,
            fully: self.fully,
            loss: self.loss,
            init: INIT_SCHEME.into(),
            weights,
            training: self.hyper,
            layers: self.layers.clone(),
            training_log: self.training_log.clone(),
        };
        let text = toml::to_string(&file).map_err(|e| Error::Config(format!("cannot encode descriptor: {e}")))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Reads a descriptor and its weights; nothing is returned unless both
    /// are complete and consistent.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: DescriptorFile =
            toml::from_str(&text).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
        if file.format != DESCRIPTOR_FORMAT {
            return Err(Error::Load(format!(
                "{}: unsupported descriptor format {}",
                path.display(),
                file.format
            )));
        }
        let mut descriptor = ModelDescriptor {
            name: file.name,
            patch_size: file.patch_size,
            channels: file.channels,
            fully: file.fully,
            layers: file.layers,
            loss: file.loss,
            hyper: file.training,
            training_log: file.training_log,
            network: None,
        };
        descriptor.validate().map_err(|e| Error::Load(e.to_string()))?;
        if let Some(rel) = file.weights {
            let weights_path = weights_location(path, &rel);
            let bytes = fs::read(&weights_path).map_err(|e| Error::io(&weights_path, e))?;
            let layers = container::decode_layers(&bytes)?;
            let net = Network::from_layers(descriptor.input_shape(), layers).map_err(|e| Error::Load(e.to_string()))?;
            if net.configs() != descriptor.layers {
                return Err(Error::Load(format!(
                    "{} holds layers that differ from the descriptor",
                    weights_path.display()
                )));
            }
            descriptor.network = Some(net);
        }
        Ok(descriptor)
    }

    /// Human-readable summary: contract, layer table, settings, log tail.
    pub fn summary(&self) -> Result<String> {
        let shapes = self.validate()?;
        let mut s = String::new();
        let w = &mut s;
        writeln!(w, "name:        {}", self.name).ok();
        writeln!(w, "patch_size:  {}", self.patch_size).ok();
        writeln!(w, "fully:       {}", self.fully).ok();
        writeln!(w, "loss:        {:?}", self.loss).ok();
        writeln!(w, "trained:     {}", self.is_trained()).ok();
        writeln!(w).ok();
        writeln!(w, "{:>5}  {:<40}  {:<16}  {:>10}", "layer", "type", "output", "params").ok();
        writeln!(w, "{:>5}  {:<40}  {:<16}  {:>10}", 0, "input", fmt_shape(&self.input_shape()), 0).ok();
        let mut input = self.input_shape();
        let mut total = 0;
        for (i, (layer, shape)) in self.layers.iter().zip(&shapes).enumerate() {
            let params = layer
                .parameter_shapes(&input)
                .map_or(0, |(ws, bs)| ws.iter().product::<usize>() + bs.iter().product::<usize>());
            total += params;
            writeln!(w, "{:>5}  {:<40}  {:<16}  {:>10}", i + 1, layer.to_string(), fmt_shape(shape), params).ok();
            input = shape.clone();
        }
        writeln!(w, "total parameters: {total}").ok();
        writeln!(w).ok();
        let h = &self.hyper;
        writeln!(
            w,
            "training: lr {} batch {} epochs {} seed {} validation {}",
            h.learning_rate, h.batch_size, h.epochs, h.seed, h.validation_fraction
        )
        .ok();
        if self.training_log.is_empty() {
            writeln!(w, "training log: empty").ok();
        } else {
            writeln!(w, "training log ({} epochs), last entries:", self.training_log.len()).ok();
            for e in self.training_log.iter().rev().take(5).rev() {
                let val = e.validation_loss.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
                writeln!(w, "  epoch {:>4}  train {:.6}  validation {val}", e.epoch, e.train_loss).ok();
            }
        }
        Ok(s)
    }
}

fn fmt_shape(shape: &[usize]) -> String {
    shape.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("x")
}

fn weights_location(descriptor: &Path, rel: &str) -> PathBuf {
    descriptor.parent().map_or_else(|| PathBuf::from(rel), |p| p.join(rel))
}

#[derive(Debug, Serialize, Deserialize)]
struct DescriptorFile {
    format: u32,
    name: String,
    patch_size: usize,
    channels: usize,
    fully: bool,
    loss: LossKind,
    init: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights: Option<String>,
    training: Hyperparameters,
    layers: Vec<LayerConfig>,
    #[serde(default)]
    training_log: Vec<EpochLog>,
}

/// Trains on the patches of `source` with minibatch SGD, initializing the
/// weights first when the descriptor has none. A `validation_fraction` share
/// of patches (chosen by the seed) is held out for the per-epoch validation
/// loss. `progress` sees every epoch entry as it is logged.
pub fn train(
    mut descriptor: ModelDescriptor,
    source: &dyn PatchSource,
    progress: &mut dyn FnMut(&EpochLog),
) -> Result<ModelDescriptor> {
    let spec = source.spec();
    check_contract(&descriptor, &spec)?;
    let h = descriptor.hyper;
    if h.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if !(0.0..1.0).contains(&h.validation_fraction) {
        return Err(Error::Config(format!(
            "validation fraction must lie in [0, 1), got {}",
            h.validation_fraction
        )));
    }
    if !h.learning_rate.is_finite() || h.learning_rate < 0.0 {
        return Err(Error::Config(format!("invalid learning rate {}", h.learning_rate)));
    }
    if source.is_empty() {
        return Err(Error::Config("no training patches".into()));
    }
    if descriptor.network.is_none() {
        descriptor.initialize()?;
    }
    if h.epochs == 0 {
        return Ok(descriptor);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(h.seed ^ 0x5EED_0F_7EA1);
    let mut order: Vec<usize> = (0..source.len()).collect();
    order.shuffle(&mut rng);
    let held_out = (source.len() as f64 * h.validation_fraction).floor() as usize;
    let (validation, training) = order.split_at(held_out);
    let mut training = training.to_vec();
    if training.is_empty() {
        return Err(Error::Config("validation split leaves no training patches".into()));
    }

    let (px_len, lb_len) = (spec.pixel_len(), spec.label_len());
    let mut pixels = vec![0.0; h.batch_size * px_len];
    let mut labels = vec![0.0; h.batch_size * lb_len];
    let first_epoch = descriptor.training_log.last().map_or(1, |e| e.epoch + 1);
    let network = descriptor.network.as_mut().expect("initialized above");
    let mut grads = Gradients::zeros_like(network);

    for epoch in first_epoch..first_epoch + h.epochs {
        training.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in training.chunks(h.batch_size) {
            let b = chunk.len();
            for (k, &idx) in chunk.iter().enumerate() {
                source.fill(
                    idx,
                    &mut pixels[k * px_len..(k + 1) * px_len],
                    &mut labels[k * lb_len..(k + 1) * lb_len],
                );
            }
            let loss = network.compute_gradients(
                &pixels[..b * px_len],
                &labels[..b * lb_len],
                b,
                descriptor.loss,
                &mut grads,
            )?;
            if !loss.is_finite() {
                return Err(Error::Training(format!("loss became {loss} in epoch {epoch}")));
            }
            sgd_step(network, &grads, h.learning_rate)?;
            loss_sum += loss * b as f64;
        }
        let validation_loss = if validation.is_empty() {
            None
        } else {
            let mut sum = 0.0;
            for chunk in validation.chunks(h.batch_size) {
                let b = chunk.len();
                for (k, &idx) in chunk.iter().enumerate() {
                    source.fill(
                        idx,
                        &mut pixels[k * px_len..(k + 1) * px_len],
                        &mut labels[k * lb_len..(k + 1) * lb_len],
                    );
                }
                let out = network.forward_batch(&pixels[..b * px_len], b)?;
                sum += descriptor.loss.value(&out, &labels[..b * lb_len]) * b as f64;
            }
            Some(sum / validation.len() as f64)
        };
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / training.len() as f64,
            validation_loss,
        };
        progress(&entry);
        descriptor.training_log.push(entry);
    }
    Ok(descriptor)
}

/// The descriptor must accept the patches a spec produces.
pub fn check_contract(descriptor: &ModelDescriptor, spec: &PatchSpec) -> Result<()> {
    if descriptor.patch_size != spec.n {
        return Err(Error::Config(format!(
            "model {} expects {}x{} patches, patch spec has n = {}",
            descriptor.name, descriptor.patch_size, descriptor.patch_size, spec.n
        )));
    }
    if descriptor.fully != spec.fully {
        return Err(Error::Config(format!(
            "model {} has fully = {}, patch spec has fully = {}",
            descriptor.name, descriptor.fully, spec.fully
        )));
    }
    descriptor.validate().map(|_| ())
}
