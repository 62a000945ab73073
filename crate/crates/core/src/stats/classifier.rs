//! A baseline domain classifier over window statistics.
//!
//! Crops from two sources are summarized by their cumulative histograms
//! (occupancy and optionally per-signal variance), and a logistic-regression
//! classifier is trained to separate them. Held-out errors feed the
//! divergence formula. Everything is deterministic for a fixed seed.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scene::{PointCloud, SignalKind};
use crate::stats::{
    h_divergence, signal_variance_stats, window_occupancy_stats, DivergenceReport,
};

/// Minimum crops per source for a meaningful held-out split.
pub const MIN_CROPS: usize = 20;

/// Which statistics form the feature vector of one crop.
#[derive(Clone, Debug)]
pub struct CropStatsConfig {
    pub voxel_size: f64,
    pub window_size: usize,
    pub bins: usize,
    pub occupancy: bool,
    pub variance_signals: Vec<SignalKind>,
}

impl Default for CropStatsConfig {
    fn default() -> Self {
        CropStatsConfig {
            voxel_size: 0.02,
            window_size: 5,
            bins: crate::stats::DEFAULT_BINS,
            occupancy: true,
            variance_signals: Vec::new(),
        }
    }
}

impl CropStatsConfig {
    /// Concatenated histogram features of one crop.
    pub fn features(&self, pc: &PointCloud) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        if self.occupancy {
            let nch = window_occupancy_stats(pc, self.voxel_size, self.window_size, self.bins)?;
            out.extend_from_slice(nch.cumulative());
        }
        for &kind in &self.variance_signals {
            let nch =
                signal_variance_stats(pc, self.voxel_size, self.window_size, kind, self.bins)?;
            out.extend_from_slice(nch.cumulative());
        }
        if out.is_empty() {
            return Err(Error::Config("no statistics selected for features".into()));
        }
        Ok(out)
    }
}

/// Logistic-regression domain classifier; `true` predicts the target source.
#[derive(Clone, Debug)]
pub struct LinearClassifier {
    weights: Vec<f64>,
    bias: f64,
}

impl LinearClassifier {
    pub fn classify(&self, features: &[f64]) -> bool {
        self.logit(features) > 0.0
    }

    pub fn logit(&self, features: &[f64]) -> f64 {
        crate::linalg::dot(&self.weights, features) + self.bias
    }
}

const TRAIN_ITERATIONS: usize = 400;
const LEARNING_RATE: f64 = 2.0;
const L2_PENALTY: f64 = 1e-3;

fn train_logistic(features: &[Vec<f64>], labels: &[bool]) -> LinearClassifier {
    let dim = features[0].len();
    let n = features.len() as f64;
    let mut weights = vec![0.0; dim];
    let mut bias = 0.0;
    for _ in 0..TRAIN_ITERATIONS {
        let mut grad_w = vec![0.0; dim];
        let mut grad_b = 0.0;
        for (x, &y) in features.iter().zip(labels.iter()) {
            let z = crate::linalg::dot(&weights, x) + bias;
            let p = 1.0 / (1.0 + (-z).exp());
            let err = p - if y { 1.0 } else { 0.0 };
            for (g, &xv) in grad_w.iter_mut().zip(x.iter()) {
                *g += err * xv;
            }
            grad_b += err;
        }
        for (w, g) in weights.iter_mut().zip(grad_w.iter()) {
            *w -= LEARNING_RATE * (g / n + L2_PENALTY * *w);
        }
        bias -= LEARNING_RATE * grad_b / n;
    }
    LinearClassifier { weights, bias }
}

/// Extracts a random axis-aligned cubic crop. The origin is sampled
/// uniformly inside the cloud's bounding box (clamped when the scene is
/// smaller than the cube); empty crops retry a bounded number of times.
pub fn random_crop(pc: &PointCloud, cube: f64, rng: &mut impl Rng) -> Result<PointCloud> {
    if pc.is_empty() {
        return Err(Error::EmptyInput);
    }
    let (lo, hi) = pc.bounding_box().expect("nonempty cloud");
    for _ in 0..64 {
        let mut origin = [0.0; 3];
        for a in 0..3 {
            let max_origin = (hi[a] - cube).max(lo[a]);
            origin[a] = if max_origin > lo[a] {
                rng.random_range(lo[a]..max_origin)
            } else {
                lo[a]
            };
        }
        let points: Vec<_> = pc
            .points()
            .iter()
            .filter(|p| {
                (0..3).all(|a| p.position[a] >= origin[a] && p.position[a] < origin[a] + cube)
            })
            .cloned()
            .collect();
        if !points.is_empty() {
            return PointCloud::new(points, pc.signal_mask());
        }
    }
    Err(Error::Data("crop sampling found no occupied region".into()))
}

fn split_indices(count: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut indices: Vec<usize> = (0..count).collect();
    indices.shuffle(rng);
    let train_len = (count * 4) / 5;
    let held_out = indices.split_off(train_len);
    (indices, held_out)
}

/// Trains the baseline classifier on an 80/20 split of the crops and
/// evaluates held-out errors per source.
pub fn baseline_domain_classifier(
    source_crops: &[PointCloud],
    target_crops: &[PointCloud],
    config: &CropStatsConfig,
    seed: u64,
) -> Result<(LinearClassifier, DivergenceReport)> {
    if source_crops.len() < MIN_CROPS || target_crops.len() < MIN_CROPS {
        return Err(Error::Data(format!(
            "need at least {MIN_CROPS} crops per source, got {} and {}",
            source_crops.len(),
            target_crops.len()
        )));
    }
    let source_features: Vec<Vec<f64>> = source_crops
        .iter()
        .map(|pc| config.features(pc))
        .collect::<Result<_>>()?;
    let target_features: Vec<Vec<f64>> = target_crops
        .iter()
        .map(|pc| config.features(pc))
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (source_train, source_test) = split_indices(source_features.len(), &mut rng);
    let (target_train, target_test) = split_indices(target_features.len(), &mut rng);

    let mut train_x = Vec::with_capacity(source_train.len() + target_train.len());
    let mut train_y = Vec::with_capacity(train_x.capacity());
    for &i in &source_train {
        train_x.push(source_features[i].clone());
        train_y.push(false);
    }
    for &i in &target_train {
        train_x.push(target_features[i].clone());
        train_y.push(true);
    }
    let classifier = train_logistic(&train_x, &train_y);

    let err_source = source_test
        .iter()
        .filter(|&&i| classifier.classify(&source_features[i]))
        .count() as f64
        / source_test.len() as f64;
    let err_target = target_test
        .iter()
        .filter(|&&i| !classifier.classify(&target_features[i]))
        .count() as f64
        / target_test.len() as f64;
    let report = h_divergence(err_source, err_target)?;
    Ok((classifier, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_noisy_volume_scene, generate_plane_scene, Axis};

    fn noise_crop(seed: u64) -> PointCloud {
        generate_noisy_volume_scene(400, [5.0, 5.0, 5.0], 0.01, 0.1, seed)
    }

    fn plane_crop(seed: u64) -> PointCloud {
        let axis = match seed % 3 {
            0 => Axis::X,
            1 => Axis::Y,
            _ => Axis::Z,
        };
        generate_plane_scene(5.0, 0.25, axis)
    }

    fn config() -> CropStatsConfig {
        CropStatsConfig {
            voxel_size: 0.25,
            window_size: 5,
            bins: 20,
            occupancy: true,
            variance_signals: Vec::new(),
        }
    }

    #[test]
    fn too_few_crops_is_a_data_error() {
        let crops: Vec<PointCloud> = (0..5).map(noise_crop).collect();
        match baseline_domain_classifier(&crops, &crops, &config(), 0) {
            Err(Error::Data(_)) => {}
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn separable_sources_give_high_divergence() {
        let source: Vec<PointCloud> = (0..24).map(plane_crop).collect();
        let target: Vec<PointCloud> = (0..24).map(|i| noise_crop(1000 + i)).collect();
        let (_, report) = baseline_domain_classifier(&source, &target, &config(), 3).unwrap();
        assert!(report.d_h > 1.5, "d_h = {}", report.d_h);
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let source: Vec<PointCloud> = (0..24).map(noise_crop).collect();
        let target: Vec<PointCloud> = (0..24).map(|i| noise_crop(500 + i)).collect();
        let (_, a) = baseline_domain_classifier(&source, &target, &config(), 9).unwrap();
        let (_, b) = baseline_domain_classifier(&source, &target, &config(), 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn crop_stays_inside_cube_and_mask() {
        let pc = generate_noisy_volume_scene(2000, [8.0, 8.0, 8.0], 0.01, 0.1, 77);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let crop = random_crop(&pc, 5.0, &mut rng).unwrap();
        assert!(!crop.is_empty());
        assert_eq!(crop.signal_mask(), pc.signal_mask());
        let (lo, hi) = crop.bounding_box().unwrap();
        for a in 0..3 {
            assert!(hi[a] - lo[a] <= 5.0 + 1e-12);
        }
    }
}
