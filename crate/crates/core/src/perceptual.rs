//! Fixed (never trained) convolutional feature extractor used by the
//! feature-space reconstruction term. Four small conv layers at overall
//! stride 4 with orthogonally-initialized weights: enough structure that
//! feature distance responds to content and brightness changes, no external
//! pretrained assets. A constructor hook accepts externally supplied
//! weights for callers who want a stronger extractor.

use std::sync::Arc;

use ndarray::{Array3, ArrayD, Ix3, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tape::{Graph, Var};
use crate::{Error, Result};

/// (out channels, in channels, kernel, stride, padding) per layer; overall
/// stride 4, so 64x64 inputs produce 16x16 feature grids.
const LAYERS: [(usize, usize, usize, usize, usize); 4] = [
    (16, 3, 3, 2, 1),
    (32, 16, 3, 1, 1),
    (48, 32, 3, 2, 1),
    (48, 48, 3, 1, 1),
];

const LEAK: f64 = 0.2;

/// Feature channel count of the final layer.
pub const FEATURE_CHANNELS: usize = 48;

pub struct PerceptualExtractor {
    /// (weight (Cout, Cin, K, K), bias (Cout,)) per layer.
    layers: Vec<(Arc<ArrayD<f64>>, Arc<ArrayD<f64>>)>,
}

impl PerceptualExtractor {
    /// Deterministic orthogonal initialization: each layer's weight,
    /// flattened to (Cout, Cin*K*K), gets orthonormal rows.
    pub fn seeded(seed: u64) -> Self {
        let layers = LAYERS
            .iter()
            .enumerate()
            .map(|(li, &(cout, cin, k, _, _))| {
                let n = cin * k * k;
                let mut rng = ChaCha8Rng::seed_from_u64(
                    seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(li as u64),
                );
                let mut rows: Vec<Vec<f64>> = (0..cout)
                    .map(|_| (0..n).map(|_| gaussian(&mut rng)).collect())
                    .collect();
                // Modified Gram-Schmidt over the rows.
                for i in 0..cout {
                    for j in 0..i {
                        let dot: f64 =
                            rows[i].iter().zip(rows[j].iter()).map(|(a, b)| a * b).sum();
                        let prev = rows[j].clone();
                        for (a, b) in rows[i].iter_mut().zip(prev.iter()) {
                            *a -= dot * b;
                        }
                    }
                    let norm: f64 = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
                    assert!(norm > 1e-8, "degenerate draw during orthogonalization");
                    for v in rows[i].iter_mut() {
                        *v /= norm;
                    }
                }
                let flat: Vec<f64> = rows.into_iter().flatten().collect();
                let w = ArrayD::from_shape_vec(IxDyn(&[cout, cin, k, k]), flat).unwrap();
                let b = ArrayD::zeros(IxDyn(&[cout]));
                (Arc::new(w), Arc::new(b))
            })
            .collect();
        PerceptualExtractor { layers }
    }

    /// Build from externally supplied weights, e.g. distilled from a
    /// pretrained network. Shapes must match the fixed architecture.
    pub fn from_weights(layers: Vec<(ArrayD<f64>, ArrayD<f64>)>) -> Result<Self> {
        if layers.len() != LAYERS.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} layers, got {}",
                LAYERS.len(),
                layers.len()
            )));
        }
        for ((w, b), &(cout, cin, k, _, _)) in layers.iter().zip(LAYERS.iter()) {
            if w.shape() != [cout, cin, k, k] {
                return Err(Error::InvalidArgument(format!(
                    "layer weight shape {:?}, expected {:?}",
                    w.shape(),
                    [cout, cin, k, k]
                )));
            }
            if b.shape() != [cout] {
                return Err(Error::InvalidArgument(format!(
                    "layer bias shape {:?}, expected [{cout}]",
                    b.shape()
                )));
            }
        }
        Ok(PerceptualExtractor {
            layers: layers.into_iter().map(|(w, b)| (Arc::new(w), Arc::new(b))).collect(),
        })
    }

    /// Run the extractor on the tape. Weights enter as constants, so no
    /// gradient is ever computed for them; gradients still flow through the
    /// image argument.
    pub fn features_on_tape(&self, g: &mut Graph, image: Var) -> Var {
        let mut x = image;
        for ((w, b), &(_, _, _, stride, pad)) in self.layers.iter().zip(LAYERS.iter()) {
            let wv = g.constant((**w).clone());
            let bv = g.constant((**b).clone());
            x = g.conv2d(x, wv, bv, stride, pad);
            x = g.leaky_relu(x, LEAK);
        }
        x
    }

    /// Plain evaluation for callers outside a training graph.
    pub fn features(&self, image: &Array3<f64>) -> Array3<f64> {
        let mut g = Graph::new();
        let x = g.constant(image.clone().into_dyn());
        let f = self.features_on_tape(&mut g, x);
        g.value(f).clone().into_dimensionality::<Ix3>().unwrap()
    }
}

pub(crate) fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; u1 in (0, 1] so the log stays finite.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
