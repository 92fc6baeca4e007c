use std::fmt;

use serde::{Deserialize, Serialize};

use super::ops::{ConvGeometry, Padding, PoolGeometry};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Declarative layer description, as stored in model descriptor files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerConfig {
    Convolution {
        filters: usize,
        height: usize,
        width: usize,
        padding: Padding,
    },
    MaxPool {
        height: usize,
        width: usize,
    },
    Relu,
    Flatten,
    Dense {
        units: usize,
    },
    Sigmoid,
}

impl LayerConfig {
    /// Output shape of this layer for one sample of shape `input`.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerConfig::Convolution {
                filters,
                height,
                width,
                padding,
            } => {
                let g = ConvGeometry::new(input, filters, height, width, padding)?;
                Ok(vec![g.out_h, g.out_w, filters])
            }
            LayerConfig::MaxPool { height, width } => {
                let g = PoolGeometry::new(input, height, width)?;
                Ok(vec![g.out_h, g.out_w, g.c])
            }
            LayerConfig::Relu | LayerConfig::Sigmoid => Ok(input.to_vec()),
            LayerConfig::Flatten => Ok(vec![input.iter().product()]),
            LayerConfig::Dense { units } => {
                if input.len() != 1 {
                    return Err(Error::Dimension(format!(
                        "dense layer needs a flattened input, got {input:?}"
                    )));
                }
                if units == 0 {
                    return Err(Error::Dimension("dense layer needs at least one unit".into()));
                }
                Ok(vec![units])
            }
        }
    }

    /// `(weights, biases)` shapes for parametric layers.
    pub fn parameter_shapes(&self, input: &[usize]) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerConfig::Convolution {
                filters,
                height,
                width,
                ..
            } => Some((
                vec![filters, height, width, *input.last()?],
                vec![filters],
            )),
            LayerConfig::Dense { units } => Some((vec![input.iter().product(), units], vec![units])),
            _ => None,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerConfig::Convolution { .. } => "convolution",
            LayerConfig::MaxPool { .. } => "max_pool",
            LayerConfig::Relu => "relu",
            LayerConfig::Flatten => "flatten",
            LayerConfig::Dense { .. } => "dense",
            LayerConfig::Sigmoid => "sigmoid",
        }
    }

    /// Whether the layer changes the extent of its input (the layers that make
    /// up a topology table; activations and flattening are omitted).
    pub fn is_structural(&self) -> bool {
        matches!(
            self,
            LayerConfig::Convolution { .. } | LayerConfig::MaxPool { .. } | LayerConfig::Dense { .. }
        )
    }
}

impl fmt::Display for LayerConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerConfig::Convolution {
                filters,
                height,
                width,
                padding,
            } => write!(f, "convolution {filters} filters {height}x{width} ({padding:?})"),
            LayerConfig::MaxPool { height, width } => write!(f, "max pool {height}x{width}"),
            LayerConfig::Relu => f.write_str("relu"),
            LayerConfig::Flatten => f.write_str("flatten"),
            LayerConfig::Dense { units } => write!(f, "dense -> {units}"),
            LayerConfig::Sigmoid => f.write_str("sigmoid"),
        }
    }
}

/// A layer together with its learned parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Convolution {
        padding: Padding,
        /// `K × fh × fw × C`
        filters: Tensor,
        /// `K`
        biases: Tensor,
    },
    MaxPool {
        height: usize,
        width: usize,
    },
    Relu,
    Flatten,
    Dense {
        /// `D × U`
        weights: Tensor,
        /// `U`
        biases: Tensor,
    },
    Sigmoid,
}

impl Layer {
    pub fn config(&self) -> LayerConfig {
        match self {
            Layer::Convolution {
                padding, filters, ..
            } => {
                let s = filters.shape();
                LayerConfig::Convolution {
                    filters: s[0],
                    height: s[1],
                    width: s[2],
                    padding: *padding,
                }
            }
            Layer::MaxPool { height, width } => LayerConfig::MaxPool {
                height: *height,
                width: *width,
            },
            Layer::Relu => LayerConfig::Relu,
            Layer::Flatten => LayerConfig::Flatten,
            Layer::Dense { weights, .. } => LayerConfig::Dense {
                units: weights.shape()[1],
            },
            Layer::Sigmoid => LayerConfig::Sigmoid,
        }
    }

    pub fn params(&self) -> Option<(&Tensor, &Tensor)> {
        match self {
            Layer::Convolution {
                filters, biases, ..
            } => Some((filters, biases)),
            Layer::Dense { weights, biases } => Some((weights, biases)),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<(&mut Tensor, &mut Tensor)> {
        match self {
            Layer::Convolution {
                filters, biases, ..
            } => Some((filters, biases)),
            Layer::Dense { weights, biases } => Some((weights, biases)),
            _ => None,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.params().map_or(0, |(w, b)| w.len() + b.len())
    }

    /// Builds a parametric layer from a config and explicit tensors, or a
    /// parameter-free layer when `params` is `None`.
    pub fn from_config(config: LayerConfig, params: Option<(Tensor, Tensor)>) -> Result<Layer> {
        let missing = || Error::Dimension(format!("{} layer needs parameters", config.kind_name()));
        Ok(match config {
            LayerConfig::Convolution {
                filters: k,
                height,
                width,
                padding,
            } => {
                let (filters, biases) = params.ok_or_else(missing)?;
                let s = filters.shape();
                if s.len() != 4 || s[0] != k || s[1] != height || s[2] != width || biases.shape() != [k] {
                    return Err(Error::Dimension(format!(
                        "convolution parameters {:?}/{:?} do not match {config}",
                        filters.shape(),
                        biases.shape()
                    )));
                }
                Layer::Convolution {
                    padding,
                    filters,
                    biases,
                }
            }
            LayerConfig::Dense { units } => {
                let (weights, biases) = params.ok_or_else(missing)?;
                if weights.rank() != 2 || weights.shape()[1] != units || biases.shape() != [units] {
                    return Err(Error::Dimension(format!(
                        "dense parameters {:?}/{:?} do not match {config}",
                        weights.shape(),
                        biases.shape()
                    )));
                }
                Layer::Dense { weights, biases }
            }
            other => {
                if params.is_some() {
                    return Err(Error::Dimension(format!(
                        "{} layer takes no parameters",
                        other.kind_name()
                    )));
                }
                match other {
                    LayerConfig::MaxPool { height, width } => Layer::MaxPool { height, width },
                    LayerConfig::Relu => Layer::Relu,
                    LayerConfig::Flatten => Layer::Flatten,
                    LayerConfig::Sigmoid => Layer::Sigmoid,
                    _ => unreachable!(),
                }
            }
        })
    }
}

/// Runs the shape inference pass over a layer stack, returning the output
/// shape of every layer.
pub fn infer_shapes(input: &[usize], layers: &[LayerConfig]) -> Result<Vec<Vec<usize>>> {
    let mut shape = input.to_vec();
    let mut shapes = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        shape = layer
            .output_shape(&shape)
            .map_err(|e| Error::Dimension(format!("layer {i} ({layer}): {e}")))?;
        shapes.push(shape.clone());
    }
    Ok(shapes)
}
