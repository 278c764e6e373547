//! Backbone adapters: the feature-extractor interface and the built-in
//! desk-scale adapter family.
//!
//! Production backbones (VGG16, ResNet50, EfficientNetB0, InceptionV3) are
//! consumed through this trait with externally supplied pretrained weights;
//! reimplementing them is out of scope. The `tiny-patch-<grid>` family is the
//! bundled trainable adapter used for tests and desk-scale runs.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::preprocess::{BackboneProfile, NormalizedTensor};

/// Headless feature extractor producing one `gap_dim` vector per image
/// (the output of global average pooling in a CNN backbone).
pub trait BackboneAdapter: Send + Sync {
    fn profile(&self) -> &BackboneProfile;

    /// Stable identifier recorded in checkpoints, e.g. `tiny-patch-8`.
    fn identifier(&self) -> &str;

    /// Feature batch of shape `(batch, gap_dim)`.
    fn forward(&self, batch: &[NormalizedTensor]) -> Result<Array2<f64>>;

    /// Whether the adapter's parameters are unfrozen during fine-tuning.
    fn is_trainable(&self) -> bool {
        false
    }

    /// Flat parameter vector (empty for parameter-free adapters).
    fn parameters(&self) -> Vec<f64> {
        Vec::new()
    }

    fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        if params.is_empty() {
            Ok(())
        } else {
            Err(Error::ShapeMismatch("adapter has no parameters".into()))
        }
    }

    /// `d(loss)/d(parameters)` given `d(loss)/d(features)`; same layout as
    /// [`BackboneAdapter::parameters`].
    fn parameter_gradient(
        &self,
        _batch: &[NormalizedTensor],
        _grad_features: &Array2<f64>,
    ) -> Result<Vec<f64>> {
        Ok(Vec::new())
    }

    fn clone_box(&self) -> Box<dyn BackboneAdapter>;
}

impl Clone for Box<dyn BackboneAdapter> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

/// Checks that every tensor in the batch matches the profile geometry.
pub fn check_batch(profile: &BackboneProfile, batch: &[NormalizedTensor]) -> Result<()> {
    for t in batch {
        if t.side() != profile.input_side as usize {
            return Err(Error::ShapeMismatch(format!(
                "tensor side {} does not match profile '{}' input {}",
                t.side(),
                profile.name,
                profile.input_side
            )));
        }
    }
    Ok(())
}

/// Desk-scale trainable adapter: fixed grid pooling (per-cell, per-channel
/// mean and standard deviation) followed by a trainable linear projection
/// and ReLU. Gradients flow from the head into the projection, so the
/// "backbone unfrozen" fine-tuning path is exercised end to end.
///
/// The pooling stage has no parameters, so its output per source raster is
/// memoized across epochs (keyed by the tensor's source id; feeding two
/// different normalizations of one raster to the same adapter instance is
/// not supported).
#[derive(Debug)]
pub struct TinyPatchBackbone {
    profile: BackboneProfile,
    identifier: String,
    grid: usize,
    trainable: bool,
    weight: Array2<f64>,
    bias: Array1<f64>,
    pool_cache: Mutex<HashMap<u64, Arc<[f64]>>>,
}

impl Clone for TinyPatchBackbone {
    fn clone(&self) -> Self {
        TinyPatchBackbone {
            profile: self.profile.clone(),
            identifier: self.identifier.clone(),
            grid: self.grid,
            trainable: self.trainable,
            weight: self.weight.clone(),
            bias: self.bias.clone(),
            pool_cache: Mutex::new(HashMap::new()),
        }
    }
}

/// Feature width of the built-in tiny-patch adapters.
pub const TINY_PATCH_GAP_DIM: usize = 64;

impl TinyPatchBackbone {
    pub fn new(grid: usize, input_side: u32, trainable: bool, seed: u64) -> Result<Self> {
        if grid == 0 || grid as u32 > input_side {
            return Err(Error::InvalidDimension(format!(
                "pooling grid {grid} invalid for input side {input_side}"
            )));
        }
        // Non-default input sides are part of the identity so checkpoints
        // reconstruct the exact geometry.
        let identifier = if input_side == 224 {
            format!("tiny-patch-{grid}")
        } else {
            format!("tiny-patch-{grid}@{input_side}")
        };
        let profile = BackboneProfile::new(
            identifier.clone(),
            input_side,
            [0.5; 3],
            [0.5; 3],
            TINY_PATCH_GAP_DIM,
        )?;
        let pooled_dim = grid * grid * 6;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = (6.0 / pooled_dim as f64).sqrt();
        let weight =
            Array2::from_shape_fn((pooled_dim, TINY_PATCH_GAP_DIM), |_| rng.random_range(-bound..bound));
        Ok(TinyPatchBackbone {
            profile,
            identifier,
            grid,
            trainable,
            weight,
            bias: Array1::zeros(TINY_PATCH_GAP_DIM),
            pool_cache: Mutex::new(HashMap::new()),
        })
    }

    fn pooled_dim(&self) -> usize {
        self.grid * self.grid * 6
    }

    fn pooled_cached(&self, tensor: &NormalizedTensor) -> Arc<[f64]> {
        let key = tensor.source_id();
        if let Some(hit) = self.pool_cache.lock().expect("cache lock").get(&key) {
            return Arc::clone(hit);
        }
        let pooled: Arc<[f64]> = self.pool(tensor).into();
        self.pool_cache
            .lock()
            .expect("cache lock")
            .insert(key, Arc::clone(&pooled));
        pooled
    }

    /// Per-cell, per-channel mean and standard deviation over the grid.
    fn pool(&self, tensor: &NormalizedTensor) -> Vec<f64> {
        let side = tensor.side();
        let g = self.grid;
        let mut out = Vec::with_capacity(self.pooled_dim());
        for gy in 0..g {
            let y0 = gy * side / g;
            let y1 = ((gy + 1) * side / g).max(y0 + 1);
            for gx in 0..g {
                let x0 = gx * side / g;
                let x1 = ((gx + 1) * side / g).max(x0 + 1);
                let n = ((y1 - y0) * (x1 - x0)) as f64;
                for c in 0..3 {
                    let mut sum = 0.0;
                    let mut sum_sq = 0.0;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            let v = tensor.at(y, x, c) as f64;
                            sum += v;
                            sum_sq += v * v;
                        }
                    }
                    let mean = sum / n;
                    let var = (sum_sq / n - mean * mean).max(0.0);
                    out.push(mean);
                    out.push(var.sqrt());
                }
            }
        }
        out
    }

    fn pooled_batch(&self, batch: &[NormalizedTensor]) -> Result<Array2<f64>> {
        check_batch(&self.profile, batch)?;
        let mut data = Vec::with_capacity(batch.len() * self.pooled_dim());
        for t in batch {
            data.extend_from_slice(&self.pooled_cached(t));
        }
        Array2::from_shape_vec((batch.len(), self.pooled_dim()), data)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))
    }
}

impl BackboneAdapter for TinyPatchBackbone {
    fn profile(&self) -> &BackboneProfile {
        &self.profile
    }

    fn identifier(&self) -> &str {
        &self.identifier
    }

    fn forward(&self, batch: &[NormalizedTensor]) -> Result<Array2<f64>> {
        let pooled = self.pooled_batch(batch)?;
        let pre = pooled.dot(&self.weight) + &self.bias;
        Ok(pre.mapv(|v| v.max(0.0)))
    }

    fn is_trainable(&self) -> bool {
        self.trainable
    }

    fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.weight.len() + self.bias.len());
        out.extend(self.weight.iter());
        out.extend(self.bias.iter());
        out
    }

    fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        let expected = self.weight.len() + self.bias.len();
        if params.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "expected {expected} backbone parameters, got {}",
                params.len()
            )));
        }
        let (w, b) = params.split_at(self.weight.len());
        self.weight = Array2::from_shape_vec((self.pooled_dim(), TINY_PATCH_GAP_DIM), w.to_vec())
            .expect("sizes match");
        self.bias = Array1::from_vec(b.to_vec());
        Ok(())
    }

    fn parameter_gradient(
        &self,
        batch: &[NormalizedTensor],
        grad_features: &Array2<f64>,
    ) -> Result<Vec<f64>> {
        let pooled = self.pooled_batch(batch)?;
        if grad_features.dim() != (batch.len(), TINY_PATCH_GAP_DIM) {
            return Err(Error::ShapeMismatch(format!(
                "feature gradient shape {:?} does not match ({}, {TINY_PATCH_GAP_DIM})",
                grad_features.dim(),
                batch.len()
            )));
        }
        let pre = pooled.dot(&self.weight) + &self.bias;
        let mask = pre.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let dpre = grad_features * &mask;
        let dw = pooled.t().dot(&dpre);
        let db = dpre.sum_axis(ndarray::Axis(0));
        let mut out = Vec::with_capacity(dw.len() + db.len());
        out.extend(dw.iter());
        out.extend(db.iter());
        Ok(out)
    }

    fn clone_box(&self) -> Box<dyn BackboneAdapter> {
        Box::new(self.clone())
    }
}

/// Names of the production backbone profiles this toolkit preprocesses for.
pub const EXTERNAL_BACKBONES: [&str; 4] = ["vgg16", "resnet50", "efficientnetb0", "inceptionv3"];

/// Instantiates a built-in adapter by identifier.
///
/// `tiny-patch-<grid>` builds the bundled trainable adapter (224-pixel
/// input; `tiny-patch-<grid>@<side>` overrides the side). The production
/// backbone names are recognized but require an externally provided adapter
/// implementation with pretrained weights.
pub fn create_backbone(identifier: &str, seed: u64) -> Result<Box<dyn BackboneAdapter>> {
    if let Some(spec) = identifier.strip_prefix("tiny-patch-") {
        let (grid, side) = match spec.split_once('@') {
            Some((g, s)) => (g, s.parse().map_err(|_| Error::UnknownBackbone(identifier.to_string()))?),
            None => (spec, 224),
        };
        let grid: usize = grid
            .parse()
            .map_err(|_| Error::UnknownBackbone(identifier.to_string()))?;
        return Ok(Box::new(TinyPatchBackbone::new(grid, side, true, seed)?));
    }
    if EXTERNAL_BACKBONES.contains(&identifier) {
        return Err(Error::InvalidConfig(format!(
            "backbone '{identifier}' needs an external adapter with pretrained weights; \
             built-in adapters are tiny-patch-<grid>"
        )));
    }
    Err(Error::UnknownBackbone(identifier.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::{resize_normalize, RasterImage};

    fn tensor_from_noise(seed: u64, profile: &BackboneProfile) -> NormalizedTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let side = 32;
        let data: Vec<u8> = (0..side * side * 3).map(|_| rng.random_range(0..=255u16) as u8).collect();
        let img = RasterImage::from_pixels(side, side, data).unwrap();
        resize_normalize(&img, profile).unwrap()
    }

    #[test]
    fn forward_produces_gap_dim_features() {
        let bb = TinyPatchBackbone::new(4, 224, true, 0).unwrap();
        let batch: Vec<_> = (0..3).map(|s| tensor_from_noise(s, bb.profile())).collect();
        let features = bb.forward(&batch).unwrap();
        assert_eq!(features.dim(), (3, TINY_PATCH_GAP_DIM));
        assert!(features.iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn forward_rejects_wrong_geometry() {
        let bb = TinyPatchBackbone::new(4, 224, true, 0).unwrap();
        let other = BackboneProfile::inception_v3();
        let batch = vec![tensor_from_noise(0, &other)];
        assert!(matches!(bb.forward(&batch), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn parameters_round_trip_and_seeded_builds_match() {
        let a = TinyPatchBackbone::new(3, 224, true, 5).unwrap();
        let b = TinyPatchBackbone::new(3, 224, true, 5).unwrap();
        assert_eq!(a.parameters(), b.parameters());
        let mut c = TinyPatchBackbone::new(3, 224, true, 6).unwrap();
        assert_ne!(a.parameters(), c.parameters());
        c.set_parameters(&a.parameters()).unwrap();
        assert_eq!(a.parameters(), c.parameters());
    }

    #[test]
    fn factory_parses_tiny_patch_names() {
        let bb = create_backbone("tiny-patch-8", 1).unwrap();
        assert_eq!(bb.identifier(), "tiny-patch-8");
        assert_eq!(bb.profile().gap_dim, TINY_PATCH_GAP_DIM);
        assert!(bb.is_trainable());
        assert!(matches!(create_backbone("resnet50", 1), Err(Error::InvalidConfig(_))));
        assert!(matches!(create_backbone("nonsense", 1), Err(Error::UnknownBackbone(_))));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let bb = TinyPatchBackbone::new(2, 224, true, 7).unwrap();
        let batch: Vec<_> = (0..2).map(|s| tensor_from_noise(100 + s, bb.profile())).collect();
        // Scalar objective: sum of features weighted by a fixed matrix.
        let weights = Array2::from_shape_fn((2, TINY_PATCH_GAP_DIM), |(i, j)| {
            ((i * 31 + j * 17) % 13) as f64 / 13.0 - 0.5
        });
        let objective = |bb: &TinyPatchBackbone| -> f64 {
            (bb.forward(&batch).unwrap() * &weights).sum()
        };
        let analytic = bb.parameter_gradient(&batch, &weights).unwrap();
        let params = bb.parameters();
        let mut worst = 0.0f64;
        for idx in (0..params.len()).step_by(97) {
            let mut probe = bb.clone();
            let mut p = params.clone();
            let h = 1e-5;
            p[idx] += h;
            probe.set_parameters(&p).unwrap();
            let up = objective(&probe);
            p[idx] -= 2.0 * h;
            probe.set_parameters(&p).unwrap();
            let down = objective(&probe);
            let numeric = (up - down) / (2.0 * h);
            let denom = analytic[idx].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((analytic[idx] - numeric).abs() / denom);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }
}
