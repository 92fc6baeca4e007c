//! KITTI road base-kit loading: image/ground-truth pairs, label decoding,
//! half-size downscaling, and the seeded test/train split.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Widths of the full-size KITTI road photographs.
pub const KITTI_WIDTHS: [u32; 4] = [1226, 1238, 1241, 1242];
/// Heights of the full-size KITTI road photographs.
pub const KITTI_HEIGHTS: [u32; 4] = [370, 374, 375, 376];

pub const EGO_STREET: Rgb<u8> = Rgb([255, 0, 255]);
pub const BACKGROUND: Rgb<u8> = Rgb([255, 0, 0]);
pub const OTHER_STREET: Rgb<u8> = Rgb([0, 0, 0]);

/// Road scene category, encoded as the id prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    /// Urban, marked.
    Um,
    /// Urban, multiple marked lanes.
    Umm,
    /// Urban, unmarked.
    Uu,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Um, Category::Umm, Category::Uu];

    pub fn prefix(&self) -> &'static str {
        match self {
            Category::Um => "um",
            Category::Umm => "umm",
            Category::Uu => "uu",
        }
    }

    /// Category of an id such as `umm_000042`.
    pub fn from_id(id: &str) -> Option<Category> {
        let prefix = id.split('_').next()?;
        Category::ALL.into_iter().find(|c| c.prefix() == prefix)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix())
    }
}

/// A photograph with its binary ego-street mask.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    pub category: Category,
    /// `H×W×3`, channels in `[0, 1]`.
    pub rgb: Tensor,
    /// `H×W`, 1 on the ego street and 0 elsewhere.
    pub mask: Tensor,
}

impl LabeledImage {
    pub fn new(id: impl Into<String>, rgb: Tensor, mask: Tensor) -> Result<Self> {
        let id = id.into();
        let category = Category::from_id(&id)
            .ok_or_else(|| Error::Format(format!("id {id:?} has no um/umm/uu category prefix")))?;
        let (h, w, c) = rgb.hwc()?;
        if c != 3 || rgb.rank() != 3 {
            return Err(Error::Dimension(format!("{id}: rgb must be HxWx3, got {:?}", rgb.shape())));
        }
        if mask.shape() != [h, w] {
            return Err(Error::Dimension(format!(
                "{id}: mask {:?} does not match image {h}x{w}",
                mask.shape()
            )));
        }
        if let Some(v) = mask.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::Format(format!("{id}: mask value {v} is not binary")));
        }
        Ok(LabeledImage {
            id,
            category,
            rgb,
            mask,
        })
    }

    pub fn height(&self) -> usize {
        self.rgb.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.rgb.shape()[1]
    }
}

/// Maps ground-truth colors to the ego-street mask: magenta is street, red
/// and black (other streets) are not.
pub fn decode_label(gt: &RgbImage) -> Result<Tensor> {
    let (w, h) = gt.dimensions();
    let mut data = Vec::with_capacity((w * h) as usize);
    for (x, y, px) in gt.enumerate_pixels() {
        data.push(match *px {
            EGO_STREET => 1.0,
            BACKGROUND | OTHER_STREET => 0.0,
            Rgb([r, g, b]) => {
                return Err(Error::Format(format!(
                    "ground-truth pixel (row {y}, col {x}) has color #{r:02x}{g:02x}{b:02x}, \
                     expected #ff00ff, #ff0000 or #000000"
                )))
            }
        });
    }
    Tensor::new(vec![h as usize, w as usize], data)
}

/// Inverse of [`decode_label`] for binary masks (1 → magenta, 0 → red).
pub fn encode_label(mask: &Tensor) -> Result<RgbImage> {
    let &[h, w] = mask.shape() else {
        return Err(Error::Dimension(format!("mask must be HxW, got {:?}", mask.shape())));
    };
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        if mask.data()[y as usize * w + x as usize] >= 0.5 {
            EGO_STREET
        } else {
            BACKGROUND
        }
    }))
}

/// 8-bit RGB to an `H×W×3` tensor in `[0, 1]`.
pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
    Tensor::new(vec![h as usize, w as usize, 3], data).expect("RGB buffer matches its dimensions")
}

/// `H×W×3` tensor in `[0, 1]` to 8-bit RGB (rounded, clamped).
pub fn tensor_to_rgb(t: &Tensor) -> Result<RgbImage> {
    let (h, w, c) = t.hwc()?;
    if c != 3 {
        return Err(Error::Dimension(format!("expected 3 channels, got {c}")));
    }
    let raw = t
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Ok(RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer length matches"))
}

fn half(extent: usize) -> usize {
    extent.div_ceil(2)
}

/// Halves each axis by averaging 2×2 blocks; an odd trailing row or column
/// averages the pixels that exist.
pub fn downscale_rgb(rgb: &Tensor) -> Result<Tensor> {
    let (h, w, c) = rgb.hwc()?;
    let (oh, ow) = (half(h), half(w));
    let src = rgb.data();
    let mut out = vec![0.0; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let ys = 2 * oy..(2 * oy + 2).min(h);
            let xs = 2 * ox..(2 * ox + 2).min(w);
            let n = (ys.len() * xs.len()) as f64;
            for ch in 0..c {
                let mut acc = 0.0;
                for y in ys.clone() {
                    for x in xs.clone() {
                        acc += src[(y * w + x) * c + ch];
                    }
                }
                out[(oy * ow + ox) * c + ch] = acc / n;
            }
        }
    }
    Tensor::new(rgb.shape().iter().enumerate().map(|(i, &e)| if i < 2 { half(e) } else { e }).collect(), out)
}

/// Halves each axis keeping the top-left sample of every 2×2 block.
pub fn downscale_mask(mask: &Tensor) -> Result<Tensor> {
    let (h, w, c) = mask.hwc()?;
    let (oh, ow) = (half(h), half(w));
    let mut out = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        for ox in 0..ow {
            let base = (2 * oy * w + 2 * ox) * c;
            out.extend_from_slice(&mask.data()[base..base + c]);
        }
    }
    Tensor::new(mask.shape().iter().enumerate().map(|(i, &e)| if i < 2 { half(e) } else { e }).collect(), out)
}

/// Loaded images plus non-fatal findings.
#[derive(Debug, Default)]
pub struct Dataset {
    pub images: Vec<LabeledImage>,
    pub warnings: Vec<String>,
}

/// Directory holding `image_2/` and `gt_image_2/`: `root/training` when it
/// exists, otherwise `root` itself.
pub fn training_dir(root: &Path) -> PathBuf {
    let training = root.join("training");
    if training.is_dir() {
        training
    } else {
        root.to_path_buf()
    }
}

/// Sorted PNG files of a directory.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Ground-truth file name of an image id: `um_000042` → `um_road_000042.png`.
pub fn ground_truth_name(id: &str) -> Option<String> {
    let (prefix, number) = id.split_once('_')?;
    Some(format!("{prefix}_road_{number}.png"))
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })?;
    Ok(img.to_rgb8())
}

/// A single photograph as a tensor, optionally downscaled.
pub fn load_photo(path: &Path, half_size: bool) -> Result<Tensor> {
    let rgb = rgb_to_tensor(&read_rgb(path)?);
    if half_size {
        downscale_rgb(&rgb)
    } else {
        Ok(rgb)
    }
}

/// Loads every image/ground-truth pair of a KITTI-layout directory, ordered
/// by id. Ids without ground truth are collected into one error.
pub fn load_dataset(root: &Path, half_size: bool) -> Result<Dataset> {
    let dir = training_dir(root);
    let image_dir = dir.join("image_2");
    let gt_dir = dir.join("gt_image_2");
    let mut dataset = Dataset::default();
    if !image_dir.is_dir() {
        let msg = format!("{} has no image_2 directory; dataset is empty", dir.display());
        warn!("{msg}");
        dataset.warnings.push(msg);
        return Ok(dataset);
    }
    let photos = list_pngs(&image_dir)?;
    if photos.is_empty() {
        let msg = format!("no PNG images in {}", image_dir.display());
        warn!("{msg}");
        dataset.warnings.push(msg);
        return Ok(dataset);
    }
    if !gt_dir.is_dir() {
        return Err(Error::Format(format!(
            "ground-truth directory {} is missing",
            gt_dir.display()
        )));
    }
    let mut missing = Vec::new();
    let mut pairs = Vec::new();
    for photo in photos {
        let id = photo
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Format(format!("unusable file name {}", photo.display())))?
            .to_string();
        match ground_truth_name(&id).map(|n| gt_dir.join(n)) {
            Some(gt) if gt.is_file() => pairs.push((id, photo, gt)),
            _ => missing.push(id),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingGroundTruth(missing));
    }
    for (id, photo, gt) in pairs {
        let rgb_img = read_rgb(&photo)?;
        let (w, h) = rgb_img.dimensions();
        if !KITTI_WIDTHS.contains(&w) || !KITTI_HEIGHTS.contains(&h) {
            let msg = format!("{id}: size {w}x{h} is not a KITTI road image size");
            warn!("{msg}");
            dataset.warnings.push(msg);
        }
        let gt_img = read_rgb(&gt)?;
        if gt_img.dimensions() != (w, h) {
            return Err(Error::Format(format!(
                "{id}: ground truth is {:?}, image is {w}x{h}",
                gt_img.dimensions()
            )));
        }
        let mut rgb = rgb_to_tensor(&rgb_img);
        let mut mask = decode_label(&gt_img).map_err(|e| Error::Format(format!("{}: {e}", gt.display())))?;
        if half_size {
            rgb = downscale_rgb(&rgb)?;
            mask = downscale_mask(&mask)?;
        }
        dataset.images.push(LabeledImage::new(id, rgb, mask)?);
    }
    Ok(dataset)
}

/// Disjoint test and training ids. Serialized as the split manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub seed: u64,
    pub test_fraction: f64,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("split serializes");
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    /// The images of `images` whose ids are listed in `ids`, in that order.
    pub fn select<'a>(images: &'a [LabeledImage], ids: &[String]) -> Result<Vec<&'a LabeledImage>> {
        ids.iter()
            .map(|id| {
                images
                    .iter()
                    .find(|img| &img.id == id)
                    .ok_or_else(|| Error::Config(format!("split lists unknown image {id}")))
            })
            .collect()
    }
}

/// Seeded split stratified by category. The test set holds
/// `round(fraction · N)` images, apportioned over categories by largest
/// remainder so each category keeps its proportion within one image.
pub fn split_ids(entries: &[(String, Category)], test_fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Argument(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    if entries.len() < 5 {
        return Err(Error::Argument(format!(
            "splitting needs at least 5 images, got {}",
            entries.len()
        )));
    }
    let mut groups: Vec<(Category, Vec<String>)> = Category::ALL
        .iter()
        .map(|&c| {
            let mut ids: Vec<String> = entries.iter().filter(|e| e.1 == c).map(|e| e.0.clone()).collect();
            ids.sort();
            (c, ids)
        })
        .collect();
    let total = (test_fraction * entries.len() as f64).round() as usize;
    let quotas: Vec<f64> = groups.iter().map(|(_, ids)| test_fraction * ids.len() as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    let mut left = total.saturating_sub(counts.iter().sum());
    for &g in order.iter().cycle().take(order.len() * 2) {
        if left == 0 {
            break;
        }
        if counts[g] < groups[g].1.len() {
            counts[g] += 1;
            left -= 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for ((_, ids), count) in groups.iter_mut().zip(counts) {
        ids.shuffle(&mut rng);
        test.extend_from_slice(&ids[..count]);
        train.extend_from_slice(&ids[count..]);
    }
    train.sort();
    test.sort();
    Ok(DatasetSplit {
        seed,
        test_fraction,
        train,
        test,
    })
}

pub fn split_dataset(images: &[LabeledImage], test_fraction: f64, seed: u64) -> Result<DatasetSplit> {
    let entries: Vec<(String, Category)> = images.iter().map(|i| (i.id.clone(), i.category)).collect();
    split_ids(&entries, test_fraction, seed)
}
