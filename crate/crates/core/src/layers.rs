//! Declarative layer descriptions and per-item shape inference.
//!
//! Shapes here omit the batch axis: `[h, w, c]` for volumes, `[f]` for vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{output_extent, Padding};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerKind {
    Conv2d {
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        relu: bool,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
        padding: Padding,
    },
    Dense {
        units: usize,
    },
    LocallyConnected1x1,
    Relu,
    Sigmoid,
    Softmax,
    Gap,
    Concat,
    ElementwiseMul,
    /// Residual bottleneck: 1x1 (stride) -> 3x3 -> 1x1 expansion, with a
    /// projection shortcut whenever stride or width changes.
    Bottleneck {
        mid: usize,
        out: usize,
        stride: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self {
            name: name.into(),
            kind,
        }
    }

    pub fn conv(name: &str, filters: usize, kernel: usize, stride: usize) -> Self {
        Self::new(
            name,
            LayerKind::Conv2d {
                filters,
                kernel,
                stride,
                padding: Padding::Same,
                relu: true,
            },
        )
    }

    pub fn pool(name: &str, kernel: usize, stride: usize) -> Self {
        Self::new(
            name,
            LayerKind::MaxPool {
                kernel,
                stride,
                padding: Padding::Valid,
            },
        )
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        infer_shape(&self.kind, input).map_err(|e| match e {
            Error::Shape { op, detail } => Error::Shape {
                op,
                detail: format!("layer `{}`: {detail}", self.name),
            },
            other => other,
        })
    }
}

fn volume(input: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    match *input {
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(Error::shape(op, format!("expected an (h, w, c) volume, got {s:?}"))),
    }
}

fn spatial(op: &'static str, h: usize, w: usize, k: usize, s: usize, p: Padding) -> Result<(usize, usize)> {
    let oh = output_extent(h, k, s, p)
        .ok_or_else(|| Error::shape(op, format!("kernel {k} does not fit height {h}")))?
        .0;
    let ow = output_extent(w, k, s, p)
        .ok_or_else(|| Error::shape(op, format!("kernel {k} does not fit width {w}")))?
        .0;
    Ok((oh, ow))
}

pub fn infer_shape(kind: &LayerKind, input: &[usize]) -> Result<Vec<usize>> {
    Ok(match *kind {
        LayerKind::Conv2d {
            filters,
            kernel,
            stride,
            padding,
            ..
        } => {
            let (h, w, _) = volume(input, "conv2d")?;
            let (oh, ow) = spatial("conv2d", h, w, kernel, stride, padding)?;
            vec![oh, ow, filters]
        }
        LayerKind::MaxPool {
            kernel,
            stride,
            padding,
        } => {
            let (h, w, c) = volume(input, "maxpool")?;
            let (oh, ow) = spatial("maxpool", h, w, kernel, stride, padding)?;
            vec![oh, ow, c]
        }
        LayerKind::Bottleneck { out, stride, .. } => {
            let (h, w, _) = volume(input, "bottleneck")?;
            let (oh, ow) = spatial("bottleneck", h, w, 1, stride, Padding::Same)?;
            vec![oh, ow, out]
        }
        LayerKind::Dense { units } => match *input {
            [_] => vec![units],
            ref s => return Err(Error::shape("dense", format!("expected a feature vector, got {s:?}"))),
        },
        LayerKind::LocallyConnected1x1 => {
            let (h, w, _) = volume(input, "locally_connected_1x1")?;
            vec![h, w, 1]
        }
        LayerKind::Gap => {
            let (_, _, c) = volume(input, "gap")?;
            vec![c]
        }
        LayerKind::Relu | LayerKind::Sigmoid | LayerKind::Softmax | LayerKind::ElementwiseMul => input.to_vec(),
        LayerKind::Concat => {
            return Err(Error::shape("concat", "concat takes several inputs; use concat_shape"));
        }
    })
}

/// Output width of concatenating feature vectors.
pub fn concat_shape(inputs: &[&[usize]]) -> Result<Vec<usize>> {
    let mut total = 0;
    for s in inputs {
        match **s {
            [f] => total += f,
            ref other => return Err(Error::shape("concat", format!("expected a feature vector, got {other:?}"))),
        }
    }
    if total == 0 {
        return Err(Error::shape("concat", "no inputs"));
    }
    Ok(vec![total])
}
