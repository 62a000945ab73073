//! The multi-stage sparse-voxel encoder: per-domain embedding, stages of
//! attention blocks on regular/shifted windows, and KNN-pool downsampling
//! between stages.

pub mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::attention::{
    window_attention_forward, AttentionConfig, ProjectionSet, PromptBank, WindowContext,
};
use crate::augment::{VIRTUAL_COLOR, VIRTUAL_NORMAL};
use crate::domain::{initial_embed, DomainNorm, EmbeddingParams};
use crate::encoding::{LookupTableSet, QuantizerSpec, TableMode};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scene::{PointCloud, SignalMask};
use crate::voxel::{
    build_hierarchy, knn_pool_downsample, partition_windows, voxelize, SparseVoxelGrid, VoxelCoord,
};

/// Standard deviation of the Gaussian initializer for projections, MLP
/// weights, embeddings, and prompts (variance 0.02).
pub const PARAM_INIT_STD: f64 = 0.141_421_356_237_309_5; // sqrt(0.02)

/// Signal channels fed to the pair encodings: position, color, normal.
pub const ENCODER_SIGNAL_COMPONENTS: usize = 9;

/// Full encoder configuration. Serialized as structured text with a format
/// version; all level arrays share one entry per stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub format_version: u32,
    /// Finest voxel size in meters.
    pub voxel_size: f64,
    pub layer_counts: Vec<usize>,
    pub window_sizes: Vec<usize>,
    pub channels: Vec<usize>,
    pub heads: Vec<usize>,
    pub table_mode: TableMode,
    pub prompt_count: usize,
    /// One signal mask per domain; the length is the domain count.
    pub domain_masks: Vec<SignalMask>,
    pub divisions_1d: usize,
    pub divisions_2d: usize,
    /// Neighbors gathered by the pooling downsampler.
    pub pool_neighbors: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            format_version: 1,
            voxel_size: 0.02,
            layer_counts: vec![2, 4, 9, 4, 4],
            window_sizes: vec![5, 7, 7, 7, 7],
            channels: vec![48, 96, 192, 384, 384],
            heads: vec![6, 6, 12, 24, 24],
            table_mode: TableMode::VmDomainModulated,
            prompt_count: 5,
            domain_masks: vec![SignalMask::FULL, SignalMask::FULL],
            divisions_1d: 16,
            divisions_2d: 4,
            pool_neighbors: 16,
        }
    }
}

impl ModelConfig {
    pub fn levels(&self) -> usize {
        self.layer_counts.len()
    }

    pub fn domains(&self) -> usize {
        self.domain_masks.len()
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.levels();
        if levels == 0 {
            return Err(Error::Config("at least one stage is required".into()));
        }
        if self.window_sizes.len() != levels
            || self.channels.len() != levels
            || self.heads.len() != levels
        {
            return Err(Error::Config(
                "layer_counts, window_sizes, channels, and heads must have one entry per stage"
                    .into(),
            ));
        }
        if self.voxel_size <= 0.0 {
            return Err(Error::Config("voxel_size must be positive".into()));
        }
        if self.layer_counts.contains(&0) {
            return Err(Error::Config("every stage needs at least one block".into()));
        }
        if self.window_sizes.contains(&0) {
            return Err(Error::Config("window sizes must be positive".into()));
        }
        for (level, (&d, &h)) in self.channels.iter().zip(self.heads.iter()).enumerate() {
            if d == 0 || h == 0 || d % h != 0 {
                return Err(Error::Config(format!(
                    "stage {level}: channels {d} must be a positive multiple of heads {h}"
                )));
            }
        }
        if self.domain_masks.is_empty() {
            return Err(Error::Config("at least one domain is required".into()));
        }
        if self.divisions_1d < 2 || self.divisions_2d < 2 {
            return Err(Error::Config("division counts must be at least 2".into()));
        }
        if self.pool_neighbors == 0 {
            return Err(Error::Config("pool_neighbors must be positive".into()));
        }
        Ok(())
    }
}

/// Two-layer feed-forward block with a rectifier and 4x hidden expansion.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub hidden: Matrix,
    pub hidden_bias: Vec<f64>,
    pub out: Matrix,
    pub out_bias: Vec<f64>,
}

impl Mlp {
    fn zeros(dim: usize) -> Self {
        Mlp {
            hidden: Matrix::zeros(dim, 4 * dim),
            hidden_bias: vec![0.0; 4 * dim],
            out: Matrix::zeros(4 * dim, dim),
            out_bias: vec![0.0; dim],
        }
    }

    fn init_with_rng(&mut self, rng: &mut impl Rng) {
        let normal = Normal::new(0.0, PARAM_INIT_STD).expect("valid normal");
        for v in self.hidden.data_mut() {
            *v = rng.sample(normal);
        }
        for v in self.out.data_mut() {
            *v = rng.sample(normal);
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut h = self.hidden.left_mul(x);
        for (v, b) in h.iter_mut().zip(self.hidden_bias.iter()) {
            *v = (*v + b).max(0.0);
        }
        let mut y = self.out.left_mul(&h);
        for (v, b) in y.iter_mut().zip(self.out_bias.iter()) {
            *v += b;
        }
        y
    }

    fn param_count(&self) -> usize {
        self.hidden.rows() * self.hidden.cols()
            + self.hidden_bias.len()
            + self.out.rows() * self.out.cols()
            + self.out_bias.len()
    }
}

/// One attention block: pre-norm attention with residual, pre-norm MLP with
/// residual.
#[derive(Clone, Debug)]
pub struct Block {
    pub proj: ProjectionSet,
    pub tables: LookupTableSet,
    pub prompts: PromptBank,
    pub norm_attn: DomainNorm,
    pub norm_mlp: DomainNorm,
    pub mlp: Mlp,
}

/// Feature transition between stages: per-domain norm, linear lift, KNN
/// pooling onto the coarser grid.
#[derive(Clone, Debug)]
pub struct Downsample {
    pub norm: DomainNorm,
    pub linear: Matrix,
    pub bias: Vec<f64>,
}

/// One resolution stage.
#[derive(Clone, Debug)]
pub struct Stage {
    pub window_size: usize,
    pub attn_config: AttentionConfig,
    pub blocks: Vec<Block>,
}

/// The assembled encoder.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub embedding: EmbeddingParams,
    pub stages: Vec<Stage>,
    /// One transition per stage boundary (`levels - 1` entries).
    pub downsamples: Vec<Downsample>,
}

/// Builds a model with all parameters initialized deterministically from the
/// seed: tables via their documented initializer, projections, MLPs,
/// embeddings, and prompts from `Normal(0, 0.02)`, norm gains at 1 and
/// biases at 0.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let domains = config.domains();
    let mut embedding = EmbeddingParams::new(&config.domain_masks, config.channels[0]);
    embedding.init_with_rng(&mut rng, PARAM_INIT_STD);

    let mut stages = Vec::with_capacity(config.levels());
    for level in 0..config.levels() {
        let dim = config.channels[level];
        let attn_config = AttentionConfig::new(dim, config.heads[level], config.prompt_count)?;
        let mut blocks = Vec::with_capacity(config.layer_counts[level]);
        for _ in 0..config.layer_counts[level] {
            let mut proj = ProjectionSet::zeros(dim);
            proj.init_with_rng(&mut rng, PARAM_INIT_STD);
            let mut tables = LookupTableSet::new(
                config.table_mode,
                dim,
                ENCODER_SIGNAL_COMPONENTS,
                domains,
                config.divisions_1d,
                config.divisions_2d,
            )?;
            tables.init_with_rng(&mut rng);
            let mut prompts = PromptBank::new(domains, config.prompt_count, dim);
            prompts.init_with_rng(&mut rng, PARAM_INIT_STD);
            let mut mlp = Mlp::zeros(dim);
            mlp.init_with_rng(&mut rng);
            blocks.push(Block {
                proj,
                tables,
                prompts,
                norm_attn: DomainNorm::new(domains, dim),
                norm_mlp: DomainNorm::new(domains, dim),
                mlp,
            });
        }
        stages.push(Stage {
            window_size: config.window_sizes[level],
            attn_config,
            blocks,
        });
    }

    let mut downsamples = Vec::with_capacity(config.levels().saturating_sub(1));
    let normal = Normal::new(0.0, PARAM_INIT_STD).expect("valid normal");
    for level in 0..config.levels().saturating_sub(1) {
        let d_in = config.channels[level];
        let d_out = config.channels[level + 1];
        let mut linear = Matrix::zeros(d_in, d_out);
        for v in linear.data_mut() {
            *v = rng.sample(normal);
        }
        downsamples.push(Downsample {
            norm: DomainNorm::new(domains, d_in),
            linear,
            bias: vec![0.0; d_out],
        });
    }

    Ok(Model {
        config: config.clone(),
        embedding,
        stages,
        downsamples,
    })
}

/// Features of one hierarchy level after its stage.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelFeatures {
    pub level: usize,
    pub voxel_size: f64,
    pub coords: Vec<VoxelCoord>,
    pub features: Vec<Vec<f64>>,
}

/// Nine-component raw signal vectors of a grid's representative points;
/// missing color/normal channels take the constant virtual fills so their
/// pairwise differences are exactly zero.
pub fn voxel_signals(grid: &SparseVoxelGrid) -> Vec<Vec<f64>> {
    grid.cells()
        .iter()
        .map(|cell| {
            let mut s = Vec::with_capacity(ENCODER_SIGNAL_COMPONENTS);
            s.extend_from_slice(&cell.representative.position);
            s.extend_from_slice(&cell.representative.color.unwrap_or(VIRTUAL_COLOR));
            s.extend_from_slice(&cell.representative.normal.unwrap_or(VIRTUAL_NORMAL));
            s
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn run_block(
    block: &Block,
    features: &mut [Vec<f64>],
    signals: &[Vec<f64>],
    grid: &SparseVoxelGrid,
    stage: &Stage,
    quantizer: &QuantizerSpec,
    domain: usize,
    shifted: bool,
) -> Result<()> {
    let prompts = block.prompts.domain_prompts(domain)?;
    let normed = block.norm_attn.apply(features, domain)?;
    let partition = partition_windows(grid, stage.window_size, shifted);
    let ctx = WindowContext {
        proj: &block.proj,
        tables: &block.tables,
        quantizer,
        prompts,
        domain,
        config: &stage.attn_config,
    };
    for window in &partition.windows {
        let w_features: Vec<Vec<f64>> = window
            .members
            .iter()
            .map(|&m| normed[m].clone())
            .collect();
        let w_signals: Vec<Vec<f64>> = window
            .members
            .iter()
            .map(|&m| signals[m].clone())
            .collect();
        let out = window_attention_forward(&w_features, &w_signals, &ctx)?;
        for (&m, o) in window.members.iter().zip(out.iter()) {
            for (f, v) in features[m].iter_mut().zip(o.iter()) {
                *f += v;
            }
        }
    }
    let normed = block.norm_mlp.apply(features, domain)?;
    for (f, x) in features.iter_mut().zip(normed.iter()) {
        let y = block.mlp.apply(x);
        for (fv, yv) in f.iter_mut().zip(y.iter()) {
            *fv += yv;
        }
    }
    Ok(())
}

/// Runs the encoder over a cloud for one domain, returning features at every
/// hierarchy level. Blocks alternate regular and shifted windows starting
/// with regular.
pub fn forward(model: &Model, pc: &PointCloud, domain: usize) -> Result<Vec<LevelFeatures>> {
    if domain >= model.config.domains() {
        return Err(Error::Domain {
            domain,
            count: model.config.domains(),
        });
    }
    let levels = model.config.levels();
    let grids = build_hierarchy(voxelize(pc, model.config.voxel_size)?, levels);
    let mut features = initial_embed(&grids[0], domain, &model.embedding)?;
    let mut out = Vec::with_capacity(levels);
    for (level, stage) in model.stages.iter().enumerate() {
        let grid = &grids[level];
        let signals = voxel_signals(grid);
        let quantizer = QuantizerSpec::for_signals(
            stage.window_size,
            grid.voxel_size(),
            model.config.divisions_1d,
            model.config.divisions_2d,
        );
        for (block_index, block) in stage.blocks.iter().enumerate() {
            run_block(
                block,
                &mut features,
                &signals,
                grid,
                stage,
                &quantizer,
                domain,
                block_index % 2 == 1,
            )?;
        }
        for row in &features {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerics(format!(
                    "non-finite feature at level {level}"
                )));
            }
        }
        out.push(LevelFeatures {
            level,
            voxel_size: grid.voxel_size(),
            coords: grid.cells().iter().map(|c| c.coord).collect(),
            features: features.clone(),
        });
        if level + 1 < levels {
            let ds = &model.downsamples[level];
            let normed = ds.norm.apply(&features, domain)?;
            let lifted: Vec<Vec<f64>> = normed
                .iter()
                .map(|f| {
                    let mut y = ds.linear.left_mul(f);
                    for (v, b) in y.iter_mut().zip(ds.bias.iter()) {
                        *v += b;
                    }
                    y
                })
                .collect();
            features = knn_pool_downsample(
                &lifted,
                &grids[level],
                &grids[level + 1],
                model.config.pool_neighbors,
            )?;
        }
    }
    Ok(out)
}

/// Integer parameter counts by category. Per-domain parameters (embeddings,
/// norm affine pairs, prompts, modulation scalars) scale linearly in the
/// domain count; shared categories do not depend on it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterBreakdown {
    /// Per-domain initial feature embeddings.
    pub embedding: usize,
    /// Projections, shared table entries, and MLPs of all blocks.
    pub blocks_shared: usize,
    /// Norm affine pairs, prompts, and modulation scalars (including the
    /// downsample norms).
    pub blocks_domain_specific: usize,
    /// Downsample linear maps.
    pub other: usize,
}

impl ParameterBreakdown {
    pub fn total(&self) -> usize {
        self.embedding + self.blocks_shared + self.blocks_domain_specific + self.other
    }
}

/// Exact parameter accounting of a built model.
pub fn count_parameters(model: &Model) -> ParameterBreakdown {
    let mut blocks_shared = 0usize;
    let mut blocks_domain_specific = 0usize;
    let mut other = 0usize;
    for stage in &model.stages {
        let d = stage.attn_config.dim;
        for block in &stage.blocks {
            blocks_shared += 3 * d * d;
            blocks_shared += block.tables.shared_entry_count() * d;
            blocks_shared += block.mlp.param_count();
            blocks_domain_specific += block.tables.modulation_entry_count();
            blocks_domain_specific += block.prompts.domains() * block.prompts.prompt_count() * d;
            blocks_domain_specific += 2 * block.norm_attn.domains() * d;
            blocks_domain_specific += 2 * block.norm_mlp.domains() * d;
        }
    }
    for ds in &model.downsamples {
        other += ds.linear.rows() * ds.linear.cols() + ds.bias.len();
        blocks_domain_specific += 2 * ds.norm.domains() * ds.norm.dim();
    }
    ParameterBreakdown {
        embedding: model.embedding.param_count(),
        blocks_shared,
        blocks_domain_specific,
        other,
    }
}

/// Modulation scalars stored per block (identical across blocks).
pub fn modulation_entries_per_block(model: &Model) -> usize {
    model
        .stages
        .first()
        .and_then(|s| s.blocks.first())
        .map(|b| b.tables.modulation_entry_count())
        .unwrap_or(0)
}

impl Model {
    /// Flattens every stored parameter (including frozen embedding
    /// statistics) in a fixed traversal order.
    pub fn collect_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for domain in 0..self.embedding.domains() {
            for tap in 0..crate::domain::KERNEL_TAPS {
                out.extend_from_slice(self.embedding.kernel(domain, tap).data());
            }
            let norm = self.embedding.norm(domain);
            out.extend_from_slice(&norm.mean);
            out.extend_from_slice(&norm.variance);
            out.extend_from_slice(&norm.gain);
            out.extend_from_slice(&norm.bias);
        }
        for stage in &self.stages {
            for block in &stage.blocks {
                out.extend_from_slice(block.proj.query.data());
                out.extend_from_slice(block.proj.key.data());
                out.extend_from_slice(block.proj.value.data());
                out.extend(block.tables.flatten());
                for domain in 0..block.prompts.domains() {
                    for prompt in block.prompts.domain_prompts(domain).expect("valid domain") {
                        out.extend_from_slice(prompt);
                    }
                }
                for norm in [&block.norm_attn, &block.norm_mlp] {
                    for domain in 0..norm.domains() {
                        out.extend_from_slice(norm.gain(domain));
                        out.extend_from_slice(norm.bias(domain));
                    }
                }
                out.extend_from_slice(block.mlp.hidden.data());
                out.extend_from_slice(&block.mlp.hidden_bias);
                out.extend_from_slice(block.mlp.out.data());
                out.extend_from_slice(&block.mlp.out_bias);
            }
        }
        for ds in &self.downsamples {
            for domain in 0..ds.norm.domains() {
                out.extend_from_slice(ds.norm.gain(domain));
                out.extend_from_slice(ds.norm.bias(domain));
            }
            out.extend_from_slice(ds.linear.data());
            out.extend_from_slice(&ds.bias);
        }
        out
    }

    /// Writes back a parameter vector produced by
    /// [`Model::collect_params`].
    pub fn assign_params(&mut self, values: &[f64]) -> Result<()> {
        let mut cursor = 0usize;
        let take = |len: usize, cursor: &mut usize| -> Result<std::ops::Range<usize>> {
            let range = *cursor..*cursor + len;
            if range.end > values.len() {
                return Err(Error::Shape("parameter vector too short".into()));
            }
            *cursor += len;
            Ok(range)
        };
        for domain in 0..self.embedding.domains() {
            for tap in 0..crate::domain::KERNEL_TAPS {
                let m = self.embedding.kernel_mut(domain, tap);
                let len = m.rows() * m.cols();
                let r = take(len, &mut cursor)?;
                m.data_mut().copy_from_slice(&values[r]);
            }
            let dim = self.embedding.dim();
            let mean = take(dim, &mut cursor)?;
            let variance = take(dim, &mut cursor)?;
            self.embedding
                .set_statistics(domain, values[mean].to_vec(), values[variance].to_vec())?;
            let gain = take(dim, &mut cursor)?;
            let bias = take(dim, &mut cursor)?;
            self.embedding
                .set_affine(domain, values[gain].to_vec(), values[bias].to_vec())?;
        }
        for stage in &mut self.stages {
            for block in &mut stage.blocks {
                for m in [
                    &mut block.proj.query,
                    &mut block.proj.key,
                    &mut block.proj.value,
                ] {
                    let len = m.rows() * m.cols();
                    let r = take(len, &mut cursor)?;
                    m.data_mut().copy_from_slice(&values[r]);
                }
                let tlen = block.tables.param_count();
                let r = take(tlen, &mut cursor)?;
                block.tables.assign_flat(&values[r])?;
                for domain in 0..block.prompts.domains() {
                    for prompt in block.prompts.domain_prompts_mut(domain)? {
                        let r = take(prompt.len(), &mut cursor)?;
                        prompt.copy_from_slice(&values[r]);
                    }
                }
                for norm in [&mut block.norm_attn, &mut block.norm_mlp] {
                    for domain in 0..norm.domains() {
                        let dim = norm.dim();
                        let r = take(dim, &mut cursor)?;
                        norm.gain_mut(domain).copy_from_slice(&values[r]);
                        let r = take(dim, &mut cursor)?;
                        norm.bias_mut(domain).copy_from_slice(&values[r]);
                    }
                }
                let len = block.mlp.hidden.rows() * block.mlp.hidden.cols();
                let r = take(len, &mut cursor)?;
                block.mlp.hidden.data_mut().copy_from_slice(&values[r]);
                let r = take(block.mlp.hidden_bias.len(), &mut cursor)?;
                block.mlp.hidden_bias.copy_from_slice(&values[r]);
                let len = block.mlp.out.rows() * block.mlp.out.cols();
                let r = take(len, &mut cursor)?;
                block.mlp.out.data_mut().copy_from_slice(&values[r]);
                let r = take(block.mlp.out_bias.len(), &mut cursor)?;
                block.mlp.out_bias.copy_from_slice(&values[r]);
            }
        }
        for ds in &mut self.downsamples {
            for domain in 0..ds.norm.domains() {
                let dim = ds.norm.dim();
                let r = take(dim, &mut cursor)?;
                ds.norm.gain_mut(domain).copy_from_slice(&values[r]);
                let r = take(dim, &mut cursor)?;
                ds.norm.bias_mut(domain).copy_from_slice(&values[r]);
            }
            let len = ds.linear.rows() * ds.linear.cols();
            let r = take(len, &mut cursor)?;
            ds.linear.data_mut().copy_from_slice(&values[r]);
            let r = take(ds.bias.len(), &mut cursor)?;
            ds.bias.copy_from_slice(&values[r]);
        }
        if cursor != values.len() {
            return Err(Error::Shape(format!(
                "parameter vector has {} values, model holds {cursor}",
                values.len()
            )));
        }
        Ok(())
    }
}
