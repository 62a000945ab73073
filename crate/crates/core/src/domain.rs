//! Per-domain layers: domain-specific layer normalization and the
//! domain-specific initial feature embedding.

use rand::Rng;
use rand_distr::Normal;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scene::SignalMask;
use crate::voxel::SparseVoxelGrid;

/// Default epsilon for the normalization denominators.
pub const NORM_EPSILON: f64 = 1e-5;

/// Layer normalization over channels with one gain/bias pair per domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainNorm {
    eps: f64,
    /// `[domain][channel]`
    gains: Vec<Vec<f64>>,
    /// `[domain][channel]`
    biases: Vec<Vec<f64>>,
}

impl DomainNorm {
    /// Gains start at 1 and biases at 0 for every domain.
    pub fn new(domains: usize, dim: usize) -> Self {
        DomainNorm {
            eps: NORM_EPSILON,
            gains: vec![vec![1.0; dim]; domains],
            biases: vec![vec![0.0; dim]; domains],
        }
    }

    pub fn domains(&self) -> usize {
        self.gains.len()
    }

    pub fn dim(&self) -> usize {
        self.gains.first().map(|g| g.len()).unwrap_or(0)
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn gain_mut(&mut self, domain: usize) -> &mut [f64] {
        &mut self.gains[domain]
    }

    pub fn bias_mut(&mut self, domain: usize) -> &mut [f64] {
        &mut self.biases[domain]
    }

    pub fn gain(&self, domain: usize) -> &[f64] {
        &self.gains[domain]
    }

    pub fn bias(&self, domain: usize) -> &[f64] {
        &self.biases[domain]
    }

    fn check_domain(&self, domain: usize) -> Result<()> {
        if domain >= self.gains.len() {
            return Err(Error::Domain {
                domain,
                count: self.gains.len(),
            });
        }
        Ok(())
    }

    /// Normalizes one feature vector over its channels, then applies the
    /// domain's affine pair.
    pub fn apply_one(&self, features: &[f64], domain: usize) -> Result<Vec<f64>> {
        self.check_domain(domain)?;
        let d = features.len();
        if d != self.dim() {
            return Err(Error::Shape(format!(
                "feature has {d} channels, norm has {}",
                self.dim()
            )));
        }
        let mean = features.iter().sum::<f64>() / d as f64;
        let var = features.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let denom = (var + self.eps).sqrt();
        let gain = &self.gains[domain];
        let bias = &self.biases[domain];
        Ok(features
            .iter()
            .zip(gain.iter().zip(bias.iter()))
            .map(|(&v, (&g, &b))| (v - mean) / denom * g + b)
            .collect())
    }

    /// Normalizes every voxel feature independently.
    pub fn apply(&self, features: &[Vec<f64>], domain: usize) -> Result<Vec<Vec<f64>>> {
        self.check_domain(domain)?;
        features.iter().map(|f| self.apply_one(f, domain)).collect()
    }
}

/// Frozen per-channel statistics and affine pair for the embedding's
/// batch-style normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbedNorm {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

impl EmbedNorm {
    fn identity(dim: usize) -> Self {
        EmbedNorm {
            mean: vec![0.0; dim],
            variance: vec![1.0; dim],
            gain: vec![1.0; dim],
            bias: vec![0.0; dim],
        }
    }
}

/// Per-domain 3x3x3 sparse-convolution embedding of raw voxel signals.
///
/// The input channels per voxel are the representative point's offset from
/// the voxel center in units of the voxel size (range `[-0.5, 0.5]`),
/// followed by color and normal channels when the domain's mask carries
/// them. The convolution sums contributions from occupied neighbors only; a
/// frozen batch-style per-channel normalization and a rectifier follow.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingParams {
    dim: usize,
    masks: Vec<SignalMask>,
    /// `[domain][tap]`, each an `in_channels x dim` matrix; tap index is
    /// `(ox + 1) * 9 + (oy + 1) * 3 + (oz + 1)` over offsets in `{-1, 0, 1}`.
    kernels: Vec<Vec<Matrix>>,
    norms: Vec<EmbedNorm>,
}

pub const KERNEL_TAPS: usize = 27;

impl EmbeddingParams {
    pub fn new(masks: &[SignalMask], dim: usize) -> Self {
        let kernels = masks
            .iter()
            .map(|m| {
                (0..KERNEL_TAPS)
                    .map(|_| Matrix::zeros(m.channel_count(), dim))
                    .collect()
            })
            .collect();
        EmbeddingParams {
            dim,
            masks: masks.to_vec(),
            kernels,
            norms: vec![EmbedNorm::identity(dim); masks.len()],
        }
    }

    pub fn init_with_rng(&mut self, rng: &mut impl Rng, std: f64) {
        let normal = Normal::new(0.0, std).expect("valid normal");
        for domain in &mut self.kernels {
            for tap in domain {
                for v in tap.data_mut() {
                    *v = rng.sample(normal);
                }
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn domains(&self) -> usize {
        self.masks.len()
    }

    pub fn mask(&self, domain: usize) -> SignalMask {
        self.masks[domain]
    }

    pub fn kernel(&self, domain: usize, tap: usize) -> &Matrix {
        &self.kernels[domain][tap]
    }

    pub fn kernel_mut(&mut self, domain: usize, tap: usize) -> &mut Matrix {
        &mut self.kernels[domain][tap]
    }

    pub fn norm(&self, domain: usize) -> &EmbedNorm {
        &self.norms[domain]
    }

    /// Freezes normalization statistics for one domain.
    pub fn set_statistics(&mut self, domain: usize, mean: Vec<f64>, variance: Vec<f64>) -> Result<()> {
        if mean.len() != self.dim || variance.len() != self.dim {
            return Err(Error::Shape("statistics must have model dimension".into()));
        }
        self.norms[domain].mean = mean;
        self.norms[domain].variance = variance;
        Ok(())
    }

    pub fn set_affine(&mut self, domain: usize, gain: Vec<f64>, bias: Vec<f64>) -> Result<()> {
        if gain.len() != self.dim || bias.len() != self.dim {
            return Err(Error::Shape("affine pair must have model dimension".into()));
        }
        self.norms[domain].gain = gain;
        self.norms[domain].bias = bias;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        for mask in &self.masks {
            n += KERNEL_TAPS * mask.channel_count() * self.dim;
            // Trainable affine pair; frozen statistics are not parameters.
            n += 2 * self.dim;
        }
        n
    }
}

/// Raw input channels of one cell: center offset, then masked signals.
pub fn raw_voxel_input(grid: &SparseVoxelGrid, cell_index: usize, mask: SignalMask) -> Vec<f64> {
    let cell = &grid.cells()[cell_index];
    let center = grid.cell_center(cell.coord);
    let vs = grid.voxel_size();
    let mut input = Vec::with_capacity(mask.channel_count());
    for a in 0..3 {
        input.push((cell.representative.position[a] - center[a]) / vs);
    }
    if mask.color {
        let c = cell.representative.color.unwrap_or([0.5, 0.5, 0.5]);
        input.extend_from_slice(&c);
    }
    if mask.normal {
        let n = cell.representative.normal.unwrap_or([0.0, 0.0, 1.0]);
        input.extend_from_slice(&n);
    }
    input
}

#[inline]
fn tap_index(ox: i32, oy: i32, oz: i32) -> usize {
    ((ox + 1) * 9 + (oy + 1) * 3 + (oz + 1)) as usize
}

/// Embeds the finest grid for one domain: sparse 3x3x3 convolution over
/// occupied neighbors, frozen per-channel normalization, rectifier.
pub fn initial_embed(
    grid: &SparseVoxelGrid,
    domain: usize,
    params: &EmbeddingParams,
) -> Result<Vec<Vec<f64>>> {
    let mut out = embed_preactivation(grid, domain, params)?;
    let norm = &params.norms[domain];
    for row in out.iter_mut() {
        for (ch, a) in row.iter_mut().enumerate() {
            let normed = (*a - norm.mean[ch]) / (norm.variance[ch] + NORM_EPSILON).sqrt();
            *a = (normed * norm.gain[ch] + norm.bias[ch]).max(0.0);
        }
    }
    Ok(out)
}

/// Convolution output before normalization and activation; the brute-force
/// oracle target.
pub fn embed_preactivation(
    grid: &SparseVoxelGrid,
    domain: usize,
    params: &EmbeddingParams,
) -> Result<Vec<Vec<f64>>> {
    if domain >= params.domains() {
        return Err(Error::Domain {
            domain,
            count: params.domains(),
        });
    }
    let mask = params.masks[domain];
    if grid.signal_mask() != mask {
        return Err(Error::SignalMask(format!(
            "grid carries '{}', domain {domain} expects '{}'",
            grid.signal_mask().label(),
            mask.label()
        )));
    }
    let inputs: Vec<Vec<f64>> = (0..grid.len())
        .map(|i| raw_voxel_input(grid, i, mask))
        .collect();
    let mut out = Vec::with_capacity(grid.len());
    for cell in grid.cells() {
        let mut acc = vec![0.0; params.dim];
        for ox in -1..=1 {
            for oy in -1..=1 {
                for oz in -1..=1 {
                    let neighbor = [
                        cell.coord[0] + ox,
                        cell.coord[1] + oy,
                        cell.coord[2] + oz,
                    ];
                    if let Some(idx) = grid.find(neighbor) {
                        let tap = &params.kernels[domain][tap_index(ox, oy, oz)];
                        let contrib = tap.left_mul(&inputs[idx]);
                        for (a, v) in acc.iter_mut().zip(contrib.iter()) {
                            *a += v;
                        }
                    }
                }
            }
        }
        out.push(acc);
    }
    Ok(out)
}
