//! Binary tensor container: `u64` little-endian header length, a JSON header
//! `{shape, layout, dtype, ...}`, then a flat little-endian `f32` payload.
//!
//! Projector weights use the same container with layout `mlp-relu`; `shape`
//! then holds the layer boundary widths and the payload is each layer's
//! row-major weight followed by its bias.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{
    DenseLayer, FeatureError, FrameFeatureTensor, ProjectedTokens, Projector, TokenLayout, VideoFeature,
};

pub const LAYOUT_FRAMES: &str = "frames-tokens-channels";
pub const LAYOUT_MLP: &str = "mlp-relu";
const DTYPE: &str = "f32";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub shape: Vec<usize>,
    pub layout: String,
    pub dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temporal_rows: Option<usize>,
}

impl TensorHeader {
    fn new(shape: Vec<usize>, layout: &str) -> Self {
        Self {
            shape,
            layout: layout.to_string(),
            dtype: DTYPE.to_string(),
            grid: None,
            patch_size: None,
            temporal_rows: None,
        }
    }

    /// Number of `f32` values the payload must hold.
    pub fn payload_len(&self) -> usize {
        if self.layout == LAYOUT_MLP {
            self.shape.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
        } else {
            self.shape.iter().product()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorContainer {
    pub header: TensorHeader,
    pub values: Vec<f32>,
}

pub fn write_container<W: Write>(mut w: W, c: &TensorContainer) -> Result<(), FeatureError> {
    if c.values.len() != c.header.payload_len() {
        return Err(FeatureError::Container(format!(
            "payload has {} values, header implies {}",
            c.values.len(),
            c.header.payload_len()
        )));
    }
    let header = serde_json::to_vec(&c.header).map_err(|e| FeatureError::Container(e.to_string()))?;
    let mut buf = Vec::with_capacity(8 + header.len() + 4 * c.values.len());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for v in &c.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf).map_err(|e| FeatureError::Container(e.to_string()))
}

pub fn read_container<R: Read>(mut r: R) -> Result<TensorContainer, FeatureError> {
    let io = |e: std::io::Error| FeatureError::Container(e.to_string());
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(io)?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 20 {
        return Err(FeatureError::Container(format!("header length {len} is implausible")));
    }
    let mut header = vec![0u8; len];
    r.read_exact(&mut header).map_err(io)?;
    let header: TensorHeader =
        serde_json::from_slice(&header).map_err(|e| FeatureError::Container(e.to_string()))?;
    if header.dtype != DTYPE {
        return Err(FeatureError::Container(format!("unsupported dtype {}", header.dtype)));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(io)?;
    if payload.len() != 4 * header.payload_len() {
        return Err(FeatureError::Container(format!(
            "payload is {} bytes, header implies {}",
            payload.len(),
            4 * header.payload_len()
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(TensorContainer { header, values })
}

impl From<&FrameFeatureTensor> for TensorContainer {
    fn from(x: &FrameFeatureTensor) -> Self {
        let (t, n, d) = x.data.dim();
        let mut header = TensorHeader::new(vec![t, n, d], LAYOUT_FRAMES);
        header.grid = Some([x.grid.0, x.grid.1]);
        header.patch_size = Some(x.patch_size);
        Self {
            header,
            values: x.data.iter().map(|&v| v as f32).collect(),
        }
    }
}

impl TryFrom<&TensorContainer> for FrameFeatureTensor {
    type Error = FeatureError;

    fn try_from(c: &TensorContainer) -> Result<Self, FeatureError> {
        let h = &c.header;
        if h.layout != LAYOUT_FRAMES || h.shape.len() != 3 {
            return Err(FeatureError::Container(format!(
                "expected {LAYOUT_FRAMES} rank-3 tensor, got {} {:?}",
                h.layout, h.shape
            )));
        }
        let (t, n, d) = (h.shape[0], h.shape[1], h.shape[2]);
        let data = Array3::from_shape_vec((t, n, d), c.values.iter().map(|&v| v as f64).collect())
            .map_err(|e| FeatureError::Shape(e.to_string()))?;
        let grid = h.grid.map(|g| (g[0], g[1])).unwrap_or((1, n));
        FrameFeatureTensor::new(data, grid, h.patch_size.unwrap_or(1))
    }
}

impl From<&VideoFeature> for TensorContainer {
    fn from(v: &VideoFeature) -> Self {
        let mut header = TensorHeader::new(vec![v.rows(), v.width()], v.layout.as_str());
        header.temporal_rows = Some(v.temporal_rows);
        Self {
            header,
            values: v.data.iter().map(|&x| x as f32).collect(),
        }
    }
}

impl From<&ProjectedTokens> for TensorContainer {
    fn from(q: &ProjectedTokens) -> Self {
        Self {
            header: TensorHeader::new(vec![q.0.nrows(), q.0.ncols()], TokenLayout::TemporalFirst.as_str()),
            values: q.0.iter().map(|&x| x as f32).collect(),
        }
    }
}

impl From<&Projector> for TensorContainer {
    fn from(p: &Projector) -> Self {
        let mut values = Vec::new();
        for layer in p.layers() {
            values.extend(layer.weight.iter().map(|&v| v as f32));
            values.extend(layer.bias.iter().map(|&v| v as f32));
        }
        Self {
            header: TensorHeader::new(p.widths(), LAYOUT_MLP),
            values,
        }
    }
}

impl TryFrom<&TensorContainer> for Projector {
    type Error = FeatureError;

    fn try_from(c: &TensorContainer) -> Result<Self, FeatureError> {
        if c.header.layout != LAYOUT_MLP || c.header.shape.len() < 2 {
            return Err(FeatureError::Container(format!(
                "expected {LAYOUT_MLP} widths, got {} {:?}",
                c.header.layout, c.header.shape
            )));
        }
        let mut at = 0;
        let mut layers = Vec::new();
        for w in c.header.shape.windows(2) {
            let (i, o) = (w[0], w[1]);
            let take = |at: &mut usize, n: usize| {
                let s: Vec<f64> = c.values[*at..*at + n].iter().map(|&v| v as f64).collect();
                *at += n;
                s
            };
            let weight = Array2::from_shape_vec((i, o), take(&mut at, i * o))
                .map_err(|e| FeatureError::Shape(e.to_string()))?;
            let bias = Array1::from_vec(take(&mut at, o));
            layers.push(DenseLayer { weight, bias });
        }
        Projector::new(layers)
    }
}
