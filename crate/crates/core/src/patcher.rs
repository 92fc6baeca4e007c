//! Patch geometry shared by training and inference.
//!
//! Patch centers lie on a lattice with spacing `stride`: along an axis of
//! length `len` there are `ceil(len / stride)` centers at
//! `floor(stride / 2) + k·stride`, the last one clamped to `len - 1`. Every
//! pixel is then within `floor(stride / 2)` of a center along each axis.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::LabeledImage;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Patch edge `n`, center spacing `stride`, and whether labels cover the
/// whole patch (`fully`) or only its center pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub n: usize,
    pub stride: usize,
    pub fully: bool,
}

impl PatchSpec {
    pub fn new(n: usize, stride: usize, fully: bool) -> Result<Self> {
        if n == 0 || n % 2 == 0 {
            return Err(Error::Argument(format!("patch size must be odd and positive, got {n}")));
        }
        if stride == 0 || stride > n {
            return Err(Error::Argument(format!(
                "stride must lie in [1, {n}], got {stride}"
            )));
        }
        Ok(PatchSpec { n, stride, fully })
    }

    /// Columns shared by horizontally adjacent patches.
    pub fn overlap(&self) -> usize {
        self.n - self.stride
    }

    /// Padding needed so every center has a full `n×n` window.
    pub fn margin(&self) -> usize {
        self.n / 2
    }

    pub fn label_len(&self) -> usize {
        if self.fully {
            self.n * self.n
        } else {
            1
        }
    }

    pub fn pixel_len(&self) -> usize {
        self.n * self.n * 3
    }
}

/// Value of pixels added around an image.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadMode {
    /// Repeat the nearest edge pixel.
    #[default]
    Replicate,
    Zero,
}

/// Adds `margin` rows and columns on every side of a rank-2 or rank-3 image.
pub fn pad_image(image: &Tensor, margin: usize, mode: PadMode) -> Tensor {
    if margin == 0 {
        return image.clone();
    }
    let (h, w, c) = image.hwc().expect("image tensor");
    let (ph, pw) = (h + 2 * margin, w + 2 * margin);
    let src = image.data();
    let mut out = vec![0.0; ph * pw * c];
    for y in 0..ph {
        let sy = y.saturating_sub(margin).min(h - 1);
        let inside_y = y >= margin && y < margin + h;
        for x in 0..pw {
            let inside = inside_y && x >= margin && x < margin + w;
            if !inside && mode == PadMode::Zero {
                continue;
            }
            let sx = x.saturating_sub(margin).min(w - 1);
            let dst = (y * pw + x) * c;
            out[dst..dst + c].copy_from_slice(&src[(sy * w + sx) * c..][..c]);
        }
    }
    let mut shape = image.shape().to_vec();
    shape[0] = ph;
    shape[1] = pw;
    Tensor::new(shape, out).expect("padded shape")
}

/// Center coordinates along one axis.
pub fn axis_centers(len: usize, stride: usize) -> Vec<usize> {
    assert!(len > 0 && stride > 0, "axis length and stride must be positive");
    (0..len.div_ceil(stride))
        .map(|k| (k * stride + stride / 2).min(len - 1))
        .collect()
}

/// Row-major patch centers of an `h×w` image.
pub fn center_grid(h: usize, w: usize, stride: usize) -> Vec<(usize, usize)> {
    let rows = axis_centers(h, stride);
    let cols = axis_centers(w, stride);
    rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect()
}

/// `ceil(h / stride) · ceil(w / stride)`.
pub fn grid_count(h: usize, w: usize, stride: usize) -> usize {
    h.div_ceil(stride) * w.div_ceil(stride)
}

/// Copies the `n×n` window centered on `(row, col)` of the unpadded image
/// out of a padded image with margin `n / 2`.
pub fn copy_window(padded: &Tensor, n: usize, center: (usize, usize), out: &mut [f64]) {
    let (_, pw, c) = padded.hwc().expect("image tensor");
    let row_len = n * c;
    for dy in 0..n {
        let src = ((center.0 + dy) * pw + center.1) * c;
        out[dy * row_len..(dy + 1) * row_len].copy_from_slice(&padded.data()[src..src + row_len]);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PatchLabel {
    /// Mask value at the patch center.
    Center(f64),
    /// `n×n` mask window.
    Window(Tensor),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    /// `n×n×3`
    pub pixels: Tensor,
    /// Center in source-image coordinates.
    pub center: (usize, usize),
    pub label: PatchLabel,
}

impl Patch {
    pub fn label_values(&self) -> &[f64] {
        match &self.label {
            PatchLabel::Center(v) => std::slice::from_ref(v),
            PatchLabel::Window(t) => t.data(),
        }
    }
}

/// One patch per grid center of the padded image, row-major.
pub fn extract_training_patches(image: &LabeledImage, spec: &PatchSpec, pad: PadMode) -> Vec<Patch> {
    let padded = PaddedImage::new(image, spec.n, pad);
    center_grid(image.height(), image.width(), spec.stride)
        .into_iter()
        .map(|center| {
            let mut pixels = vec![0.0; spec.pixel_len()];
            let mut label = vec![0.0; spec.label_len()];
            padded.fill(center, spec.fully, &mut pixels, &mut label);
            let label = if spec.fully {
                PatchLabel::Window(Tensor::new(vec![spec.n, spec.n], label).expect("label window"))
            } else {
                PatchLabel::Center(label[0])
            };
            Patch {
                pixels: Tensor::new(vec![spec.n, spec.n, 3], pixels).expect("patch pixels"),
                center,
                label,
            }
        })
        .collect()
}

/// An image and mask padded once for repeated window extraction.
#[derive(Debug, Clone)]
pub struct PaddedImage {
    rgb: Tensor,
    mask: Tensor,
    n: usize,
}

impl PaddedImage {
    pub fn new(image: &LabeledImage, n: usize, pad: PadMode) -> Self {
        PaddedImage {
            rgb: pad_image(&image.rgb, n / 2, pad),
            mask: pad_image(&image.mask, n / 2, PadMode::Replicate),
            n,
        }
    }

    pub fn fill(&self, center: (usize, usize), fully: bool, pixels: &mut [f64], label: &mut [f64]) {
        copy_window(&self.rgb, self.n, center, pixels);
        if fully {
            copy_window(&self.mask, self.n, center, label);
        } else {
            let pw = self.mask.shape()[1];
            let m = self.n / 2;
            label[0] = self.mask.data()[(center.0 + m) * pw + center.1 + m];
        }
    }
}

/// Indexed access to training patches without materializing them all.
pub trait PatchSource {
    fn spec(&self) -> PatchSpec;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// Writes patch `index` into `pixels` (`n·n·3`) and `label` (1 or `n·n`).
    fn fill(&self, index: usize, pixels: &mut [f64], label: &mut [f64]);
}

/// Lazily extracted patches over several images, ordered by image then
/// row-major center.
#[derive(Debug, Clone)]
pub struct PatchIndex {
    spec: PatchSpec,
    images: Vec<PaddedImage>,
    entries: Vec<(usize, (usize, usize))>,
}

impl PatchIndex {
    /// `cap_per_image` keeps an evenly spaced subset of each image's centers.
    pub fn new(images: &[&LabeledImage], spec: PatchSpec, pad: PadMode, cap_per_image: Option<usize>) -> Self {
        let mut entries = Vec::new();
        let mut padded = Vec::with_capacity(images.len());
        for (i, image) in images.iter().enumerate() {
            padded.push(PaddedImage::new(image, spec.n, pad));
            let centers = center_grid(image.height(), image.width(), spec.stride);
            let keep = cap_per_image.map_or(centers.len(), |c| c.min(centers.len()));
            for k in 0..keep {
                entries.push((i, centers[k * centers.len() / keep]));
            }
        }
        PatchIndex {
            spec,
            images: padded,
            entries,
        }
    }
}

impl PatchSource for PatchIndex {
    fn spec(&self) -> PatchSpec {
        self.spec
    }

    fn len(&self) -> usize {
        self.entries.len()
    }

    fn fill(&self, index: usize, pixels: &mut [f64], label: &mut [f64]) {
        let (image, center) = self.entries[index];
        self.images[image].fill(center, self.spec.fully, pixels, label);
    }
}

/// Materialized patches, e.g. read back from a patch cache.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub spec: PatchSpec,
    pub patches: Vec<Patch>,
}

impl PatchSource for PatchSet {
    fn spec(&self) -> PatchSpec {
        self.spec
    }

    fn len(&self) -> usize {
        self.patches.len()
    }

    fn fill(&self, index: usize, pixels: &mut [f64], label: &mut [f64]) {
        let p = &self.patches[index];
        pixels.copy_from_slice(p.pixels.data());
        label.copy_from_slice(p.label_values());
    }
}

const CACHE_MAGIC: &[u8; 4] = b"SSTP";
const CACHE_VERSION: u32 = 1;

/// Content hash of a (dataset, spec, padding) pair, hex encoded.
pub fn cache_key(images: &[&LabeledImage], spec: &PatchSpec, pad: PadMode) -> String {
    let mut hasher = Sha256::new();
    hasher.update(CACHE_MAGIC);
    for v in [spec.n, spec.stride, spec.fully as usize, pad as usize, images.len()] {
        hasher.update((v as u64).to_le_bytes());
    }
    for image in images {
        hasher.update((image.id.len() as u64).to_le_bytes());
        hasher.update(image.id.as_bytes());
        for t in [&image.rgb, &image.mask] {
            for &e in t.shape() {
                hasher.update((e as u64).to_le_bytes());
            }
            for v in t.data() {
                hasher.update(v.to_le_bytes());
            }
        }
    }
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes patches to a binary cache file:
/// `"SSTP" | version u32 | key (64 hex bytes) | n u32 | stride u32 | fully u8 | count u64`,
/// then per patch the center (two u32), pixels, and label values as f64 LE.
pub fn write_patch_cache(path: &Path, key: &str, set: &PatchSet) -> Result<()> {
    let spec = set.spec;
    let mut out = Vec::with_capacity(96 + set.patches.len() * 8 * (spec.pixel_len() + spec.label_len() + 1));
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(key.as_bytes());
    out.extend_from_slice(&(spec.n as u32).to_le_bytes());
    out.extend_from_slice(&(spec.stride as u32).to_le_bytes());
    out.push(spec.fully as u8);
    out.extend_from_slice(&(set.patches.len() as u64).to_le_bytes());
    for p in &set.patches {
        out.extend_from_slice(&(p.center.0 as u32).to_le_bytes());
        out.extend_from_slice(&(p.center.1 as u32).to_le_bytes());
        for v in p.pixels.data().iter().chain(p.label_values()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a patch cache; `Ok(None)` when the file is absent or was written
/// for a different key.
pub fn read_patch_cache(path: &Path, key: &str) -> Result<Option<PatchSet>> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(Error::io(path, e)),
    };
    let corrupt = || Error::Load(format!("{} is not a valid patch cache", path.display()));
    let head = 4 + 4 + key.len() + 4 + 4 + 1 + 8;
    if bytes.len() < head || &bytes[..4] != CACHE_MAGIC {
        return Err(corrupt());
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    if u32_at(4) as u32 != CACHE_VERSION {
        return Err(corrupt());
    }
    if &bytes[8..8 + key.len()] != key.as_bytes() {
        return Ok(None);
    }
    let mut pos = 8 + key.len();
    let spec = PatchSpec::new(u32_at(pos), u32_at(pos + 4), bytes[pos + 8] == 1)?;
    pos += 9;
    let count = u64::from_le_bytes(bytes[pos..pos + 8].try_into().expect("8 bytes")) as usize;
    pos += 8;
    let per = 8 + 8 * (spec.pixel_len() + spec.label_len());
    if bytes.len() != pos + count.checked_mul(per).ok_or_else(corrupt)? {
        return Err(corrupt());
    }
    let mut patches = Vec::with_capacity(count);
    for chunk in bytes[pos..].chunks_exact(per) {
        let center = (
            u32::from_le_bytes(chunk[0..4].try_into().expect("4 bytes")) as usize,
            u32::from_le_bytes(chunk[4..8].try_into().expect("4 bytes")) as usize,
        );
        let values: Vec<f64> = chunk[8..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let (pixels, label) = values.split_at(spec.pixel_len());
        let label = if spec.fully {
            PatchLabel::Window(Tensor::new(vec![spec.n, spec.n], label.to_vec())?)
        } else {
            PatchLabel::Center(label[0])
        };
        patches.push(Patch {
            pixels: Tensor::new(vec![spec.n, spec.n, 3], pixels.to_vec())?,
            center,
            label,
        });
    }
    Ok(Some(PatchSet { spec, patches }))
}
