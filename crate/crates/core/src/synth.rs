//! Procedural road scenes in KITTI layout, for desk-scale experiments when
//! the real base kit is not at hand.
//!
//! A scene has a sky band above a horizon, a textured verge below it, and a
//! gray ego road shaped as a trapezoid that narrows towards a vanishing
//! point. Marked categories get dashed lane lines; some scenes add a side
//! street that is labelled as "other street".

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{encode_label, tensor_to_rgb, Category, LabeledImage, OTHER_STREET};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One scene of size `h×w`; `index` selects the category (um, umm, uu in
/// turn) and, with `seed`, the layout.
pub fn scene(seed: u64, index: usize, h: usize, w: usize) -> LabeledImage {
    let category = Category::ALL[index % 3];
    let id = format!("{}_{:06}", category.prefix(), index / 3);
    let (rgb, mask, _) = render(seed.wrapping_mul(0x9E37_79B9).wrapping_add(index as u64), category, h, w);
    LabeledImage::new(id, rgb, mask).expect("synthetic scene is well formed")
}

/// Renders a scene; also returns which background pixels are a side street.
fn render(seed: u64, category: Category, h: usize, w: usize) -> (Tensor, Tensor, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (hf, wf) = (h as f64, w as f64);
    let horizon = hf * rng.random_range(0.35..0.5);
    let vanish_x = wf * rng.random_range(0.35..0.65);
    let bottom_center = wf * rng.random_range(0.3..0.7);
    let bottom_half = wf * rng.random_range(0.3..0.45);
    let top_half = wf * rng.random_range(0.01..0.04);
    let road_tone = rng.random_range(0.30..0.50);
    let verge = if rng.random_bool(0.5) {
        [0.25, rng.random_range(0.40..0.55), 0.18]
    } else {
        [rng.random_range(0.50..0.62), 0.45, 0.35]
    };
    let side_street = rng.random_bool(0.4).then(|| {
        let y0 = horizon + (hf - horizon) * rng.random_range(0.15..0.35);
        let thick = (hf - horizon) * rng.random_range(0.10..0.20);
        (y0, y0 + thick, rng.random_bool(0.5))
    });
    let lanes = match category {
        Category::Um => vec![0.0],
        Category::Umm => vec![-0.34, 0.34],
        Category::Uu => vec![],
    };

    let mut rgb = vec![0.0; h * w * 3];
    let mut mask = vec![0.0; h * w];
    let mut other = vec![false; h * w];
    for y in 0..h {
        let yf = y as f64 + 0.5;
        // 0 at the horizon, 1 at the bottom row
        let depth = ((yf - horizon) / (hf - horizon)).clamp(0.0, 1.0);
        let center = vanish_x + (bottom_center - vanish_x) * depth;
        let half = top_half + (bottom_half - top_half) * depth;
        for x in 0..w {
            let xf = x as f64 + 0.5;
            let i = y * w + x;
            let noise = rng.random_range(-0.04..0.04);
            let px: [f64; 3] = if yf < horizon {
                let t = yf / horizon;
                [0.55 + 0.2 * t + noise, 0.65 + 0.15 * t + noise, 0.85 + noise]
            } else if (xf - center).abs() <= half {
                mask[i] = 1.0;
                let u = (xf - center) / half;
                let marked = lanes.iter().any(|&l| {
                    (u - l).abs() < 0.03 + 0.02 * depth && ((yf - horizon) / (4.0 + 20.0 * depth)) as i64 % 2 == 0
                });
                let v = if marked { 0.9 } else { road_tone + 0.05 * depth };
                [v + noise, v + noise, v + 0.02 + noise]
            } else if side_street.is_some_and(|(y0, y1, right)| yf >= y0 && yf < y1 && (xf > center) == right) {
                other[i] = true;
                let v = road_tone + 0.08;
                [v + noise, v + noise, v + noise]
            } else {
                let tex = 0.06 * ((x / 3 + y / 2) % 2) as f64;
                [verge[0] + tex + noise, verge[1] + tex + noise, verge[2] + noise]
            };
            for (c, v) in px.iter().enumerate() {
                rgb[i * 3 + c] = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
            }
        }
    }
    (
        Tensor::new(vec![h, w, 3], rgb).expect("scene shape"),
        Tensor::new(vec![h, w], mask).expect("mask shape"),
        other,
    )
}

/// Writes `count` scenes as `training/image_2/<id>.png` and
/// `training/gt_image_2/<cat>_road_<num>.png` under `root`. Side streets
/// are written as black ("other street") ground truth. Returns the ids.
pub fn write_dataset(root: &Path, count: usize, h: usize, w: usize, seed: u64) -> Result<Vec<String>> {
    let image_dir = root.join("training").join("image_2");
    let gt_dir = root.join("training").join("gt_image_2");
    for d in [&image_dir, &gt_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut ids = Vec::with_capacity(count);
    for index in 0..count {
        let category = Category::ALL[index % 3];
        let id = format!("{}_{:06}", category.prefix(), index / 3);
        let (rgb, mask, other) = render(seed.wrapping_mul(0x9E37_79B9).wrapping_add(index as u64), category, h, w);
        tensor_to_rgb(&rgb)?.save(image_dir.join(format!("{id}.png")))?;
        let mut gt = encode_label(&mask)?;
        for (i, _) in other.iter().enumerate().filter(|(_, o)| **o) {
            gt.put_pixel((i % w) as u32, (i / w) as u32, OTHER_STREET);
        }
        let gt_name = crate::dataset::ground_truth_name(&id).expect("id has a category prefix");
        gt.save(gt_dir.join(gt_name))?;
        ids.push(id);
    }
    Ok(ids)
}
