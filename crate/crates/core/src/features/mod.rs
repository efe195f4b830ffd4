//! Spatio-temporal pooling of frame-level encoder features and the projector
//! that maps the pooled video feature into language-embedding tokens.
//!
//! A clip arrives as a `T × N × D` tensor: `T` sampled frames, `N = h·w`
//! patch tokens per frame, `D` channels. Two mean-pools produce the
//! temporal feature (`N × D`, averaged over frames) and the spatial feature
//! (`T × D`, averaged over tokens). They are stacked along the token axis,
//! temporal block first, and every row is pushed through a small MLP.

mod io;
mod projector;

pub use io::{read_container, write_container, TensorHeader, TensorContainer};
pub use projector::{DenseLayer, Projector};

use ndarray::{concatenate, s, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

/// Default number of uniformly sampled frames per clip.
pub const DEFAULT_FRAME_COUNT: usize = 100;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FeatureError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("container: {0}")]
    Container(String),
}

/// Frame-level patch embeddings for one clip, shape `T × N × D`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatureTensor {
    data: Array3<f64>,
    grid: (usize, usize),
    patch_size: usize,
}

impl FrameFeatureTensor {
    /// `grid` is the `(h, w)` patch grid; `h·w` must equal the token axis.
    pub fn new(data: Array3<f64>, grid: (usize, usize), patch_size: usize) -> Result<Self, FeatureError> {
        let (t, n, d) = data.dim();
        if t == 0 || n == 0 || d == 0 {
            return Err(FeatureError::InvalidInput(format!("empty axis in shape {t}x{n}x{d}")));
        }
        if grid.0 * grid.1 != n {
            return Err(FeatureError::Shape(format!(
                "patch grid {}x{} does not cover {n} tokens",
                grid.0, grid.1
            )));
        }
        if patch_size == 0 {
            return Err(FeatureError::InvalidInput("patch size must be positive".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FeatureError::InvalidInput("non-finite feature value".into()));
        }
        Ok(Self { data, grid, patch_size })
    }

    /// Convenience constructor for a `1 × N` grid with unit patch size.
    pub fn from_array(data: Array3<f64>) -> Result<Self, FeatureError> {
        let n = data.dim().1;
        Self::new(data, (1, n), 1)
    }

    pub fn frames(&self) -> usize {
        self.data.dim().0
    }

    pub fn tokens(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }
}

/// Token-wise mean over frames, `N × D`.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalPooledFeature(pub Array2<f64>);

/// Frame-wise mean over patch tokens, `T × D`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialPooledFeature(pub Array2<f64>);

/// Row order of a [`VideoFeature`] along the token axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenLayout {
    TemporalFirst,
}

impl TokenLayout {
    pub fn as_str(self) -> &'static str {
        match self {
            TokenLayout::TemporalFirst => "temporal-first",
        }
    }
}

/// Stacked `(N + T) × D` video feature: temporal rows, then spatial rows.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoFeature {
    data: Array2<f64>,
    temporal_rows: usize,
    layout: TokenLayout,
}

impl VideoFeature {
    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn layout(&self) -> TokenLayout {
        self.layout
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn temporal_block(&self) -> ArrayView2<'_, f64> {
        self.data.slice(s![..self.temporal_rows, ..])
    }

    pub fn spatial_block(&self) -> ArrayView2<'_, f64> {
        self.data.slice(s![self.temporal_rows.., ..])
    }

    /// Splits back into the two pooled features.
    pub fn split(&self) -> (TemporalPooledFeature, SpatialPooledFeature) {
        (
            TemporalPooledFeature(self.temporal_block().to_owned()),
            SpatialPooledFeature(self.spatial_block().to_owned()),
        )
    }
}

/// Language-space tokens, one row per video-feature row.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedTokens(pub Array2<f64>);

/// Tokenized text query. Kept for prompt-assembly records only.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TextTokens {
    pub ids: Vec<u32>,
    pub embedded: Option<Array2<f64>>,
}

impl TextTokens {
    pub fn new(ids: Vec<u32>, embedded: Option<Array2<f64>>, width: usize) -> Result<Self, FeatureError> {
        if let Some(e) = &embedded {
            if e.nrows() != ids.len() || e.ncols() != width {
                return Err(FeatureError::Shape(format!(
                    "embedded text is {}x{}, expected {}x{width}",
                    e.nrows(),
                    e.ncols(),
                    ids.len()
                )));
            }
        }
        Ok(Self { ids, embedded })
    }
}

pub fn temporal_pool(x: &FrameFeatureTensor) -> TemporalPooledFeature {
    let mean = x.data.mean_axis(Axis(0)).expect("frame axis is non-empty");
    TemporalPooledFeature(mean)
}

pub fn spatial_pool(x: &FrameFeatureTensor) -> SpatialPooledFeature {
    let mean = x.data.mean_axis(Axis(1)).expect("token axis is non-empty");
    SpatialPooledFeature(mean)
}

pub fn assemble_video_feature(
    t: &TemporalPooledFeature,
    z: &SpatialPooledFeature,
) -> Result<VideoFeature, FeatureError> {
    if t.0.ncols() != z.0.ncols() {
        return Err(FeatureError::Shape(format!(
            "temporal width {} != spatial width {}",
            t.0.ncols(),
            z.0.ncols()
        )));
    }
    if t.0.nrows() == 0 || z.0.nrows() == 0 {
        return Err(FeatureError::InvalidInput("pooled feature has no rows".into()));
    }
    let data = concatenate(Axis(0), &[t.0.view(), z.0.view()]).expect("widths checked above");
    Ok(VideoFeature {
        data,
        temporal_rows: t.0.nrows(),
        layout: TokenLayout::TemporalFirst,
    })
}

pub fn project_features(v: &VideoFeature, g: &Projector) -> Result<ProjectedTokens, FeatureError> {
    g.forward(v.data.view()).map(ProjectedTokens)
}

/// Pool, stack and project in one call.
pub fn encode_video(x: &FrameFeatureTensor, g: &Projector) -> Result<ProjectedTokens, FeatureError> {
    let v = assemble_video_feature(&temporal_pool(x), &spatial_pool(x))?;
    project_features(&v, g)
}

/// Uniformly spaced frame indices: `count` picks over `total` frames.
pub fn uniform_frame_indices(total: usize, count: usize) -> Vec<usize> {
    if total == 0 || count == 0 {
        return Vec::new();
    }
    if count >= total {
        return (0..total).collect();
    }
    (0..count)
        .map(|i| ((i as f64 + 0.5) * total as f64 / count as f64).floor() as usize)
        .map(|i| i.min(total - 1))
        .collect()
}
