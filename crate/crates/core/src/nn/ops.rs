//! Layer kernels operating on single `[height, width, channels]` samples.

use serde::{Deserialize, Serialize};

use super::linalg::{gemm, View};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Border handling of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Only windows fully inside the input; output shrinks by `filter - 1`.
    Valid,
    /// Zero padding so the output keeps the input extent.
    Same,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub k: usize,
    pub fh: usize,
    pub fw: usize,
    pad_top: usize,
    pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], k: usize, fh: usize, fw: usize, padding: Padding) -> Result<Self> {
        let &[h, w, c] = input else {
            return Err(Error::Dimension(format!(
                "convolution expects a [height, width, channels] input, got {input:?}"
            )));
        };
        if k == 0 || fh == 0 || fw == 0 {
            return Err(Error::Dimension(
                "convolution needs at least one non-empty filter".into(),
            ));
        }
        let (pad_top, pad_left, out_h, out_w) = match padding {
            Padding::Same => ((fh - 1) / 2, (fw - 1) / 2, h, w),
            Padding::Valid => {
                if fh > h || fw > w {
                    return Err(Error::Dimension(format!(
                        "filter {fh}x{fw} larger than input {h}x{w}"
                    )));
                }
                (0, 0, h - fh + 1, w - fw + 1)
            }
        };
        Ok(ConvGeometry {
            h,
            w,
            c,
            k,
            fh,
            fw,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    pub fn input_len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn output_len(&self) -> usize {
        self.out_h * self.out_w * self.k
    }

    /// Length of one unrolled receptive field, `fh·fw·c`.
    pub fn patch_len(&self) -> usize {
        self.fh * self.fw * self.c
    }

    pub fn cols_len(&self) -> usize {
        self.out_h * self.out_w * self.patch_len()
    }

    /// Horizontal input range `[x0, x1)` covered by output column `ox`, and the
    /// offset of `x0` inside the filter.
    fn span(&self, o: usize, f: usize, pad: usize, extent: usize) -> (usize, usize, usize) {
        let start = o as isize - pad as isize;
        let lo = start.max(0) as usize;
        let hi = ((start + f as isize).min(extent as isize)).max(0) as usize;
        (lo, hi.max(lo), (lo as isize - start) as usize)
    }

    /// Unrolls every receptive field into a row of `cols`.
    pub fn im2col(&self, input: &[f64], cols: &mut [f64]) {
        let pl = self.patch_len();
        let c = self.c;
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let row = &mut cols[(oy * self.out_w + ox) * pl..][..pl];
                let (x0, x1, dx0) = self.span(ox, self.fw, self.pad_left, self.w);
                for dy in 0..self.fh {
                    let seg = &mut row[dy * self.fw * c..][..self.fw * c];
                    let iy = (oy + dy) as isize - self.pad_top as isize;
                    if iy < 0 || iy >= self.h as isize || x0 == x1 {
                        seg.fill(0.0);
                        continue;
                    }
                    let iy = iy as usize;
                    seg[..dx0 * c].fill(0.0);
                    let n = (x1 - x0) * c;
                    seg[dx0 * c..dx0 * c + n]
                        .copy_from_slice(&input[(iy * self.w + x0) * c..][..n]);
                    seg[dx0 * c + n..].fill(0.0);
                }
            }
        }
    }

    /// Scatters unrolled gradients back onto the input, accumulating overlaps.
    pub fn col2im_add(&self, cols: &[f64], dinput: &mut [f64]) {
        let pl = self.patch_len();
        let c = self.c;
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let row = &cols[(oy * self.out_w + ox) * pl..][..pl];
                let (x0, x1, dx0) = self.span(ox, self.fw, self.pad_left, self.w);
                for dy in 0..self.fh {
                    let iy = (oy + dy) as isize - self.pad_top as isize;
                    if iy < 0 || iy >= self.h as isize || x0 == x1 {
                        continue;
                    }
                    let n = (x1 - x0) * c;
                    let src = &row[dy * self.fw * c + dx0 * c..][..n];
                    let dst = &mut dinput[(iy as usize * self.w + x0) * c..][..n];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }

    pub fn forward(
        &self,
        input: &[f64],
        filters: &[f64],
        biases: &[f64],
        cols: &mut Vec<f64>,
        out: &mut [f64],
    ) {
        cols.resize(self.cols_len(), 0.0);
        self.im2col(input, cols);
        let positions = self.out_h * self.out_w;
        for row in out[..positions * self.k].chunks_exact_mut(self.k) {
            row.copy_from_slice(biases);
        }
        gemm(
            View::new(cols, positions, self.patch_len()),
            View::transposed(filters, self.patch_len(), self.k),
            out,
            true,
        );
    }

    /// Accumulates filter and bias gradients; writes (not accumulates) the
    /// input gradient when requested.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        input: &[f64],
        dout: &[f64],
        filters: &[f64],
        dfilters: &mut [f64],
        dbiases: &mut [f64],
        dinput: Option<&mut [f64]>,
        cols: &mut Vec<f64>,
    ) {
        let positions = self.out_h * self.out_w;
        let pl = self.patch_len();
        cols.resize(self.cols_len(), 0.0);
        self.im2col(input, cols);
        gemm(
            View::transposed(dout, self.k, positions),
            View::new(cols, positions, pl),
            dfilters,
            true,
        );
        for row in dout.chunks_exact(self.k) {
            for (db, d) in dbiases.iter_mut().zip(row) {
                *db += d;
            }
        }
        if let Some(dinput) = dinput {
            gemm(
                View::new(dout, positions, self.k),
                View::new(filters, self.k, pl),
                cols,
                false,
            );
            dinput[..self.input_len()].fill(0.0);
            self.col2im_add(cols, dinput);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct PoolGeometry {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub ph: usize,
    pub pw: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeometry {
    pub fn new(input: &[usize], ph: usize, pw: usize) -> Result<Self> {
        let &[h, w, c] = input else {
            return Err(Error::Dimension(format!(
                "pooling expects a [height, width, channels] input, got {input:?}"
            )));
        };
        if ph == 0 || pw == 0 || ph > h || pw > w {
            return Err(Error::Dimension(format!(
                "pool {ph}x{pw} does not fit input {h}x{w}"
            )));
        }
        Ok(PoolGeometry {
            h,
            w,
            c,
            ph,
            pw,
            out_h: h / ph,
            out_w: w / pw,
        })
    }

    pub fn output_len(&self) -> usize {
        self.out_h * self.out_w * self.c
    }

    /// Flat input index of the first maximum of window `(oy, ox)` in channel `ch`.
    fn argmax(&self, input: &[f64], oy: usize, ox: usize, ch: usize) -> usize {
        let mut best = (oy * self.ph * self.w + ox * self.pw) * self.c + ch;
        for dy in 0..self.ph {
            for dx in 0..self.pw {
                let idx = ((oy * self.ph + dy) * self.w + ox * self.pw + dx) * self.c + ch;
                if input[idx] > input[best] {
                    best = idx;
                }
            }
        }
        best
    }

    pub fn forward(&self, input: &[f64], out: &mut [f64]) {
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                for ch in 0..self.c {
                    out[(oy * self.out_w + ox) * self.c + ch] = input[self.argmax(input, oy, ox, ch)];
                }
            }
        }
    }

    /// Routes each output gradient to the first maximum of its window.
    pub fn backward(&self, input: &[f64], dout: &[f64], dinput: &mut [f64]) {
        dinput[..self.h * self.w * self.c].fill(0.0);
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                for ch in 0..self.c {
                    let g = dout[(oy * self.out_w + ox) * self.c + ch];
                    dinput[self.argmax(input, oy, ox, ch)] += g;
                }
            }
        }
    }
}

/// Cross-correlates `input` (`H×W×C`) with `filters` (`K×fh×fw×C`) and adds
/// one bias per filter. Returns `H'×W'×K`.
pub fn conv2d_forward(
    input: &Tensor,
    filters: &Tensor,
    biases: &Tensor,
    padding: Padding,
) -> Result<Tensor> {
    let &[k, fh, fw, fc] = filters.shape() else {
        return Err(Error::Dimension(format!(
            "filters must be [count, height, width, channels], got {:?}",
            filters.shape()
        )));
    };
    let geo = ConvGeometry::new(input.shape(), k, fh, fw, padding)?;
    if fc != geo.c || biases.len() != k {
        return Err(Error::Dimension(format!(
            "filters {:?} / biases {:?} do not match input {:?}",
            filters.shape(),
            biases.shape(),
            input.shape()
        )));
    }
    let mut out = vec![0.0; geo.output_len()];
    geo.forward(input.data(), filters.data(), biases.data(), &mut Vec::new(), &mut out);
    Tensor::new(vec![geo.out_h, geo.out_w, k], out)
}

/// Non-overlapping max pooling tiled from the top-left; trailing rows and
/// columns that do not fill a window are dropped.
pub fn maxpool_forward(input: &Tensor, ph: usize, pw: usize) -> Result<Tensor> {
    let geo = PoolGeometry::new(input.shape(), ph, pw)?;
    let mut out = vec![0.0; geo.output_len()];
    geo.forward(input.data(), &mut out);
    Tensor::new(vec![geo.out_h, geo.out_w, geo.c], out)
}

/// Affine map of a flattened input through `weights` (`D×U`) and `biases` (`U`).
pub fn dense_forward(input: &Tensor, weights: &Tensor, biases: &Tensor) -> Result<Tensor> {
    let &[d, u] = weights.shape() else {
        return Err(Error::Dimension(format!(
            "dense weights must be [inputs, units], got {:?}",
            weights.shape()
        )));
    };
    if input.len() != d || biases.len() != u {
        return Err(Error::Dimension(format!(
            "dense layer {d}->{u} cannot take input of length {} with {} biases",
            input.len(),
            biases.len()
        )));
    }
    let mut out = biases.data().to_vec();
    gemm(
        View::new(input.data(), 1, d),
        View::new(weights.data(), d, u),
        &mut out,
        true,
    );
    Tensor::new(vec![u], out)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
