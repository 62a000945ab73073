//! Window-level dataset statistics and the divergence metric.
//!
//! All distribution summaries are normalized cumulative histograms over
//! `[0, 1]`: monotone nondecreasing with final value 1. Occupancy ratios and
//! per-window signal variances feed them; the divergence metric scores how
//! well a classifier separates two datasets.

pub mod classifier;

pub use classifier::{baseline_domain_classifier, random_crop, CropStatsConfig, LinearClassifier};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{PointCloud, SignalKind};
use crate::voxel::{partition_windows, voxelize, SparseVoxelGrid, VoxelCoord};

/// Default histogram bin count.
pub const DEFAULT_BINS: usize = 50;

/// A normalized cumulative histogram over fixed uniform bins on `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizedCumulativeHistogram {
    bin_edges: Vec<f64>,
    cumulative: Vec<f64>,
}

impl NormalizedCumulativeHistogram {
    /// Builds from samples, which are clamped into `[0, 1]`.
    pub fn from_samples(samples: &[f64], bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::Range("bin count must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut counts = vec![0usize; bins];
        for &s in samples {
            if !s.is_finite() {
                return Err(Error::Numerics("non-finite histogram sample".into()));
            }
            let clamped = s.clamp(0.0, 1.0);
            let bin = ((clamped * bins as f64) as usize).min(bins - 1);
            counts[bin] += 1;
        }
        let total = samples.len() as f64;
        let mut cumulative = Vec::with_capacity(bins);
        let mut acc = 0usize;
        for c in counts {
            acc += c;
            cumulative.push(acc as f64 / total);
        }
        let bin_edges = (0..=bins).map(|i| i as f64 / bins as f64).collect();
        Ok(NormalizedCumulativeHistogram {
            bin_edges,
            cumulative,
        })
    }

    pub fn bins(&self) -> usize {
        self.cumulative.len()
    }

    pub fn bin_edges(&self) -> &[f64] {
        &self.bin_edges
    }

    pub fn cumulative(&self) -> &[f64] {
        &self.cumulative
    }

    /// Mass inside one bin.
    pub fn bin_mass(&self, bin: usize) -> f64 {
        if bin == 0 {
            self.cumulative[0]
        } else {
            self.cumulative[bin] - self.cumulative[bin - 1]
        }
    }

    /// The bin containing a value in `[0, 1]`.
    pub fn bin_of(&self, value: f64) -> usize {
        ((value.clamp(0.0, 1.0) * self.bins() as f64) as usize).min(self.bins() - 1)
    }

    /// Checks monotonicity and the unit endpoint.
    pub fn validate(&self) -> Result<()> {
        let n = self.cumulative.len();
        if n == 0 || self.bin_edges.len() != n + 1 {
            return Err(Error::Shape("histogram shape mismatch".into()));
        }
        let mut prev = 0.0;
        for &c in &self.cumulative {
            if c < prev - 1e-12 {
                return Err(Error::Data("cumulative histogram not monotone".into()));
            }
            prev = c;
        }
        if (self.cumulative[n - 1] - 1.0).abs() > 1e-12 {
            return Err(Error::Data(format!(
                "cumulative histogram ends at {} instead of 1",
                self.cumulative[n - 1]
            )));
        }
        Ok(())
    }

    /// Bin-wise mean of several histograms with equal weights; all inputs
    /// must share the bin count.
    pub fn merge(histograms: &[NormalizedCumulativeHistogram]) -> Result<Self> {
        let first = histograms.first().ok_or(Error::EmptyInput)?;
        let bins = first.bins();
        if histograms.iter().any(|h| h.bins() != bins) {
            return Err(Error::Shape("histograms disagree on bin count".into()));
        }
        let mut cumulative = vec![0.0; bins];
        for h in histograms {
            for (acc, &c) in cumulative.iter_mut().zip(h.cumulative.iter()) {
                *acc += c;
            }
        }
        for c in cumulative.iter_mut() {
            *c /= histograms.len() as f64;
        }
        Ok(NormalizedCumulativeHistogram {
            bin_edges: first.bin_edges.clone(),
            cumulative,
        })
    }
}

/// Structured-text record for histogram files.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HistogramRecord {
    pub format_version: u32,
    /// `occupancy` or the signal name for variance histograms.
    pub signal: String,
    pub voxel_size: f64,
    pub window_size: usize,
    pub bin_edges: Vec<f64>,
    pub cumulative: Vec<f64>,
}

impl HistogramRecord {
    pub fn new(
        signal: &str,
        voxel_size: f64,
        window_size: usize,
        nch: &NormalizedCumulativeHistogram,
    ) -> Self {
        HistogramRecord {
            format_version: 1,
            signal: signal.to_string(),
            voxel_size,
            window_size,
            bin_edges: nch.bin_edges.clone(),
            cumulative: nch.cumulative.clone(),
        }
    }

    pub fn histogram(&self) -> NormalizedCumulativeHistogram {
        NormalizedCumulativeHistogram {
            bin_edges: self.bin_edges.clone(),
            cumulative: self.cumulative.clone(),
        }
    }
}

/// Occupancy ratio of every nonempty window: occupied cells over the window
/// volume, paired with the window coordinate.
pub fn window_occupancy_ratios(
    grid: &SparseVoxelGrid,
    window_size: usize,
) -> Vec<(VoxelCoord, f64)> {
    let part = partition_windows(grid, window_size, false);
    let volume = (window_size * window_size * window_size) as f64;
    part.windows
        .iter()
        .map(|w| (w.coord, w.members.len() as f64 / volume))
        .collect()
}

/// Cumulative histogram of window occupancy ratios over all nonempty
/// windows of the voxelized cloud.
pub fn window_occupancy_stats(
    pc: &PointCloud,
    voxel_size: f64,
    window_size: usize,
    bins: usize,
) -> Result<NormalizedCumulativeHistogram> {
    let grid = voxelize(pc, voxel_size)?;
    let ratios: Vec<f64> = window_occupancy_ratios(&grid, window_size)
        .into_iter()
        .map(|(_, r)| r)
        .collect();
    NormalizedCumulativeHistogram::from_samples(&ratios, bins)
}

/// Pairwise-sum variance of a window's signal vectors:
/// `1 / (2 N^2) * sum over all ordered pairs of squared distances`.
pub fn pairwise_variance(signals: &[[f64; 3]]) -> f64 {
    let n = signals.len();
    if n == 0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for x in signals {
        for y in signals {
            let dx = x[0] - y[0];
            let dy = x[1] - y[1];
            let dz = x[2] - y[2];
            acc += dx * dx + dy * dy + dz * dz;
        }
    }
    acc / (2.0 * (n * n) as f64)
}

/// Supremum of the pairwise variance given the signal's bounded range, used
/// to normalize variances into `[0, 1]`: per-axis range `R` contributes
/// `R^2 / 4` per channel.
pub fn variance_normalizer(kind: SignalKind, window_size: usize, voxel_size: f64) -> f64 {
    match kind {
        SignalKind::Position => {
            let r = (window_size.max(1) - 1) as f64 * voxel_size;
            3.0 * r * r / 4.0
        }
        SignalKind::Color => 3.0 / 4.0,
        SignalKind::Normal => 3.0,
    }
}

fn signal_of(cell: &crate::voxel::VoxelCell, kind: SignalKind) -> [f64; 3] {
    match kind {
        SignalKind::Position => cell.representative.position,
        SignalKind::Color => cell.representative.color.expect("mask checked"),
        SignalKind::Normal => cell.representative.normal.expect("mask checked"),
    }
}

/// Per-window normalized signal variances (one sample per nonempty window)
/// for a grid whose voxels each hold one representative point.
pub fn window_signal_variances(
    grid: &SparseVoxelGrid,
    window_size: usize,
    kind: SignalKind,
) -> Result<Vec<f64>> {
    if !grid.signal_mask().contains_kind(kind) {
        return Err(Error::SignalMask(format!(
            "signal '{}' not present in mask '{}'",
            kind.label(),
            grid.signal_mask().label()
        )));
    }
    let normalizer = variance_normalizer(kind, window_size, grid.voxel_size());
    let part = partition_windows(grid, window_size, false);
    let mut out = Vec::with_capacity(part.windows.len());
    let mut buffer: Vec<[f64; 3]> = Vec::new();
    for w in &part.windows {
        buffer.clear();
        for &m in &w.members {
            buffer.push(signal_of(&grid.cells()[m], kind));
        }
        out.push((pairwise_variance(&buffer) / normalizer).clamp(0.0, 1.0));
    }
    Ok(out)
}

/// Cumulative histogram of per-window signal variances. The cloud is
/// voxelized so each nonempty voxel contributes exactly one point.
pub fn signal_variance_stats(
    pc: &PointCloud,
    voxel_size: f64,
    window_size: usize,
    kind: SignalKind,
    bins: usize,
) -> Result<NormalizedCumulativeHistogram> {
    if !pc.signal_mask().contains_kind(kind) {
        return Err(Error::SignalMask(format!(
            "signal '{}' not present in mask '{}'",
            kind.label(),
            pc.signal_mask().label()
        )));
    }
    let grid = voxelize(pc, voxel_size)?;
    let variances = window_signal_variances(&grid, window_size, kind)?;
    NormalizedCumulativeHistogram::from_samples(&variances, bins)
}

/// Divergence between two datasets evaluated at a classifier's held-out
/// errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub err_source: f64,
    pub err_target: f64,
    /// `2 * (1 - (err_source + err_target))`.
    pub d_h: f64,
    /// Set when the combined error exceeds 1 (worse-than-chance classifier,
    /// negative divergence).
    pub worse_than_chance: bool,
}

/// Computes the divergence from the two per-dataset classification errors.
pub fn h_divergence(err_source: f64, err_target: f64) -> Result<DivergenceReport> {
    for (name, v) in [("err_source", err_source), ("err_target", err_target)] {
        if !(0.0..=1.0).contains(&v) || !v.is_finite() {
            return Err(Error::Range(format!("{name} = {v} outside [0, 1]")));
        }
    }
    let combined = err_source + err_target;
    Ok(DivergenceReport {
        err_source,
        err_target,
        d_h: 2.0 * (1.0 - combined),
        worse_than_chance: combined > 1.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_noisy_volume_scene, generate_plane_scene, Axis};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fully_dense_cube_masses_at_one() {
        // 5x5x5 points exactly filling one window.
        let mut positions = Vec::new();
        for x in 0..5 {
            for y in 0..5 {
                for z in 0..5 {
                    positions.push(crate::scene::PointRecord::with_position([
                        (x as f64 + 0.5) * 0.02,
                        (y as f64 + 0.5) * 0.02,
                        (z as f64 + 0.5) * 0.02,
                    ]));
                }
            }
        }
        let pc = crate::scene::PointCloud::new(positions, crate::scene::SignalMask::POSITION)
            .unwrap();
        let nch = window_occupancy_stats(&pc, 0.02, 5, 50).unwrap();
        nch.validate().unwrap();
        assert!((nch.bin_mass(nch.bin_of(1.0)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_voxel_window_ratio() {
        let pc = crate::scene::PointCloud::new(
            vec![crate::scene::PointRecord::with_position([0.01, 0.01, 0.01])],
            crate::scene::SignalMask::POSITION,
        )
        .unwrap();
        let grid = voxelize(&pc, 0.02).unwrap();
        let ratios = window_occupancy_ratios(&grid, 5);
        assert_eq!(ratios.len(), 1);
        assert!((ratios[0].1 - 1.0 / 125.0).abs() < 1e-15);
    }

    #[test]
    fn plane_interior_windows_sit_at_one_fifth() {
        let pc = generate_plane_scene(1.0, 0.02, Axis::Z);
        let grid = voxelize(&pc, 0.02).unwrap();
        let ratios = window_occupancy_ratios(&grid, 5);
        let max_x = ratios.iter().map(|(c, _)| c[0]).max().unwrap();
        let max_y = ratios.iter().map(|(c, _)| c[1]).max().unwrap();
        let interior: Vec<f64> = ratios
            .iter()
            .filter(|(c, _)| c[0] < max_x && c[1] < max_y)
            .map(|&(_, r)| r)
            .collect();
        assert_eq!(interior.len(), 100);
        for r in interior {
            assert!((r - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn occupancy_invariant_under_integer_translation() {
        let pc = generate_noisy_volume_scene(400, [0.6, 0.6, 0.6], 0.0, 0.0, 31);
        let nch_a = window_occupancy_stats(&pc, 0.02, 5, 40).unwrap();
        // Translate by an exact multiple of the window extent in voxels.
        let shifted: Vec<crate::scene::PointRecord> = pc
            .points()
            .iter()
            .map(|p| {
                let mut q = p.clone();
                for a in 0..3 {
                    q.position[a] += 5.0 * 0.02 * 4.0;
                }
                q
            })
            .collect();
        let pc2 = crate::scene::PointCloud::new(shifted, pc.signal_mask()).unwrap();
        let nch_b = window_occupancy_stats(&pc2, 0.02, 5, 40).unwrap();
        for (a, b) in nch_a.cumulative().iter().zip(nch_b.cumulative().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn two_point_pairwise_variance() {
        let signals = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        assert!((pairwise_variance(&signals) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn identical_signals_have_zero_variance() {
        let signals = [[0.3, 0.4, 0.5]; 7];
        assert_eq!(pairwise_variance(&signals), 0.0);
    }

    #[test]
    fn pairwise_matches_centroid_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let n = rng.random_range(1..30);
            let signals: Vec<[f64; 3]> = (0..n)
                .map(|_| {
                    [
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                    ]
                })
                .collect();
            let pairwise = pairwise_variance(&signals);
            let mut mean = [0.0; 3];
            for s in &signals {
                for a in 0..3 {
                    mean[a] += s[a];
                }
            }
            for m in mean.iter_mut() {
                *m /= n as f64;
            }
            let centroid: f64 = signals
                .iter()
                .map(|s| {
                    (0..3)
                        .map(|a| (s[a] - mean[a]) * (s[a] - mean[a]))
                        .sum::<f64>()
                })
                .sum::<f64>()
                / n as f64;
            assert!((pairwise - centroid).abs() <= 1e-10 * centroid.abs().max(1.0));
        }
    }

    #[test]
    fn variance_invariant_under_signal_shift_and_relabeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let signals: Vec<[f64; 3]> = (0..12)
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect();
        let base = pairwise_variance(&signals);
        let shifted: Vec<[f64; 3]> = signals
            .iter()
            .map(|s| [s[0] + 3.0, s[1] - 1.5, s[2] + 0.25])
            .collect();
        assert!((pairwise_variance(&shifted) - base).abs() < 1e-12);
        let mut reversed = signals.clone();
        reversed.reverse();
        assert!((pairwise_variance(&reversed) - base).abs() < 1e-15);
    }

    #[test]
    fn constant_color_variance_masses_at_zero() {
        let pc = generate_noisy_volume_scene(500, [0.4, 0.4, 0.4], 0.0, 0.0, 5);
        let nch = signal_variance_stats(&pc, 0.02, 5, SignalKind::Color, 50).unwrap();
        assert!((nch.cumulative()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn missing_signal_is_rejected() {
        let pc = crate::scene::PointCloud::new(
            vec![crate::scene::PointRecord::with_position([0.0; 3])],
            crate::scene::SignalMask::POSITION,
        )
        .unwrap();
        match signal_variance_stats(&pc, 0.02, 5, SignalKind::Color, 10) {
            Err(Error::SignalMask(_)) => {}
            other => panic!("expected signal-mask error, got {other:?}"),
        }
    }

    #[test]
    fn divergence_endpoints_and_formula() {
        assert_eq!(h_divergence(0.0, 0.0).unwrap().d_h, 2.0);
        assert_eq!(h_divergence(0.5, 0.5).unwrap().d_h, 0.0);
        let r = h_divergence(0.001, 0.002).unwrap();
        assert!((r.d_h - 1.994).abs() < 1e-12);
        assert!(!r.worse_than_chance);
        let bad = h_divergence(0.9, 0.8).unwrap();
        assert!(bad.worse_than_chance);
        assert!(bad.d_h < 0.0);
        assert!(h_divergence(-0.1, 0.0).is_err());
        assert!(h_divergence(0.0, 1.5).is_err());
    }

    #[test]
    fn divergence_is_symmetric_under_label_swap() {
        let a = h_divergence(0.12, 0.34).unwrap();
        let b = h_divergence(0.34, 0.12).unwrap();
        assert_eq!(a.d_h, b.d_h);
    }

    #[test]
    fn merge_averages_binwise() {
        let a = NormalizedCumulativeHistogram::from_samples(&[0.1, 0.1], 10).unwrap();
        let b = NormalizedCumulativeHistogram::from_samples(&[0.9, 0.9], 10).unwrap();
        let merged = NormalizedCumulativeHistogram::merge(&[a.clone(), b]).unwrap();
        merged.validate().unwrap();
        assert!((merged.cumulative()[1] - 0.5).abs() < 1e-12);
        assert!((merged.cumulative()[9] - 1.0).abs() < 1e-12);
        let solo = NormalizedCumulativeHistogram::merge(std::slice::from_ref(&a)).unwrap();
        assert_eq!(solo, a);
    }

    #[test]
    fn histogram_record_round_trips_as_json() {
        let nch = NormalizedCumulativeHistogram::from_samples(&[0.2, 0.4, 0.6], 20).unwrap();
        let record = HistogramRecord::new("occupancy", 0.02, 5, &nch);
        let text = serde_json::to_string(&record).unwrap();
        let back: HistogramRecord = serde_json::from_str(&text).unwrap();
        assert_eq!(back.histogram(), nch);
        assert_eq!(back.format_version, 1);
    }
}
