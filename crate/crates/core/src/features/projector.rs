use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::FeatureError;

/// One affine layer, `weight` is `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DenseLayer {
    pub fn input_width(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_width(&self) -> usize {
        self.weight.ncols()
    }
}

/// Row-wise MLP with ReLU between layers (none after the last).
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    layers: Vec<DenseLayer>,
    seed: Option<u64>,
}

impl Projector {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self, FeatureError> {
        if layers.is_empty() {
            return Err(FeatureError::InvalidInput("projector needs at least one layer".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.output_width() {
                return Err(FeatureError::Shape(format!(
                    "layer {i}: bias length {} != output width {}",
                    layer.bias.len(),
                    layer.output_width()
                )));
            }
            if i > 0 && layers[i - 1].output_width() != layer.input_width() {
                return Err(FeatureError::Shape(format!(
                    "layer {i}: input width {} != previous output width {}",
                    layer.input_width(),
                    layers[i - 1].output_width()
                )));
            }
            if layer.weight.iter().chain(layer.bias.iter()).any(|v| !v.is_finite()) {
                return Err(FeatureError::InvalidInput(format!("layer {i}: non-finite weight")));
            }
        }
        Ok(Self { layers, seed: None })
    }

    /// Single layer, identity weights, zero bias.
    pub fn identity(width: usize) -> Self {
        Self {
            layers: vec![DenseLayer {
                weight: Array2::eye(width),
                bias: Array1::zeros(width),
            }],
            seed: None,
        }
    }

    /// Uniform `±1/sqrt(fan_in)` initialization drawn from a ChaCha8 stream.
    /// `widths` lists every layer boundary, e.g. `[D, hidden, K]`.
    pub fn seeded(widths: &[usize], seed: u64) -> Result<Self, FeatureError> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(FeatureError::InvalidInput(format!("bad projector widths {widths:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = widths
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let weight = Array2::from_shape_simple_fn((w[0], w[1]), || rng.random_range(-bound..bound));
                let bias = Array1::from_shape_simple_fn(w[1], || rng.random_range(-bound..bound));
                DenseLayer { weight, bias }
            })
            .collect();
        let mut p = Self::new(layers)?;
        p.seed = Some(seed);
        Ok(p)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input_width()
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].output_width()
    }

    /// Layer boundary widths `[D, ..., K]`.
    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_width())
            .chain(self.layers.iter().map(DenseLayer::output_width))
            .collect()
    }

    pub fn forward(&self, rows: ArrayView2<'_, f64>) -> Result<Array2<f64>, FeatureError> {
        if rows.ncols() != self.input_width() {
            return Err(FeatureError::Shape(format!(
                "feature width {} != projector input width {}",
                rows.ncols(),
                self.input_width()
            )));
        }
        let last = self.layers.len() - 1;
        let mut h = rows.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            h = h.dot(&layer.weight) + layer.bias.view().insert_axis(Axis(0));
            if i < last {
                h.mapv_inplace(|v| v.max(0.0));
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_projector_outputs_zero() {
        let p = Projector::new(vec![DenseLayer {
            weight: Array2::zeros((3, 4)),
            bias: Array1::zeros(4),
        }])
        .unwrap();
        let out = p.forward(array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]].view()).unwrap();
        assert_eq!(out, Array2::<f64>::zeros((2, 4)));
    }

    #[test]
    fn identity_is_identity() {
        let v = array![[1.5, -2.0], [0.25, 9.0]];
        assert_eq!(Projector::identity(2).forward(v.view()).unwrap(), v);
    }

    #[test]
    fn chained_widths_validated() {
        let bad = vec![
            DenseLayer { weight: Array2::zeros((2, 3)), bias: Array1::zeros(3) },
            DenseLayer { weight: Array2::zeros((4, 1)), bias: Array1::zeros(1) },
        ];
        assert!(matches!(Projector::new(bad), Err(FeatureError::Shape(_))));
    }

    #[test]
    fn seeded_is_reproducible() {
        let a = Projector::seeded(&[4, 8, 3], 7).unwrap();
        let b = Projector::seeded(&[4, 8, 3], 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.widths(), vec![4, 8, 3]);
        assert_ne!(a, Projector::seeded(&[4, 8, 3], 8).unwrap());
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let p = Projector::seeded(&[4, 2], 1).unwrap();
        assert!(matches!(p.forward(Array2::zeros((1, 3)).view()), Err(FeatureError::Shape(_))));
    }
}
