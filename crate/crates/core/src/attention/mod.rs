//! Windowed multi-head self-attention over sparse voxels.
//!
//! Scores carry two bias routes derived from the lookup-table encodings of
//! quantized voxel-pair signal differences: query-side and key-side bias
//! terms inside the score, and a value-side offset added to each attended
//! value. Per-domain prompt vectors join every window as extra keys and
//! values (never as queries) and carry no relative-signal encoding.
//!
//! The fast path streams one query row at a time with a two-pass
//! max-subtracted softmax, so peak auxiliary memory is linear in the window
//! population. [`window_attention_reference`] materializes the full score
//! rows and exists for oracle comparisons.

pub mod backward;
pub mod gradcheck;

pub use backward::{window_attention_backward, AttentionGradients};

use rand::Rng;
use rand_distr::Normal;

use crate::encoding::{LookupTableSet, QuantizedDelta, QuantizerSpec, TableRole};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Channel and head geometry of one attention block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub dim: usize,
    pub heads: usize,
    pub prompt_count: usize,
}

impl AttentionConfig {
    pub fn new(dim: usize, heads: usize, prompt_count: usize) -> Result<Self> {
        if dim == 0 || heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "dim {dim} must be a positive multiple of heads {heads}"
            )));
        }
        Ok(AttentionConfig {
            dim,
            heads,
            prompt_count,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Score scale `1 / sqrt(dim)` over the full channel dimension.
    pub fn scale(&self) -> f64 {
        1.0 / (self.dim as f64).sqrt()
    }
}

/// Query/key/value projection matrices of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionSet {
    pub query: Matrix,
    pub key: Matrix,
    pub value: Matrix,
}

impl ProjectionSet {
    pub fn zeros(dim: usize) -> Self {
        ProjectionSet {
            query: Matrix::zeros(dim, dim),
            key: Matrix::zeros(dim, dim),
            value: Matrix::zeros(dim, dim),
        }
    }

    pub fn init_with_rng(&mut self, rng: &mut impl Rng, std: f64) {
        let normal = Normal::new(0.0, std).expect("valid normal");
        for m in [&mut self.query, &mut self.key, &mut self.value] {
            for v in m.data_mut() {
                *v = rng.sample(normal);
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.query.rows()
    }
}

/// Per-domain learnable prompt feature vectors of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBank {
    dim: usize,
    prompt_count: usize,
    /// `[domain][prompt][channel]`
    features: Vec<Vec<Vec<f64>>>,
}

impl PromptBank {
    pub fn new(domains: usize, prompt_count: usize, dim: usize) -> Self {
        PromptBank {
            dim,
            prompt_count,
            features: vec![vec![vec![0.0; dim]; prompt_count]; domains],
        }
    }

    pub fn init_with_rng(&mut self, rng: &mut impl Rng, std: f64) {
        let normal = Normal::new(0.0, std).expect("valid normal");
        for domain in &mut self.features {
            for prompt in domain {
                for v in prompt.iter_mut() {
                    *v = rng.sample(normal);
                }
            }
        }
    }

    pub fn domains(&self) -> usize {
        self.features.len()
    }

    pub fn prompt_count(&self) -> usize {
        self.prompt_count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn domain_prompts(&self, domain: usize) -> Result<&[Vec<f64>]> {
        self.features.get(domain).map(|v| v.as_slice()).ok_or(Error::Domain {
            domain,
            count: self.features.len(),
        })
    }

    pub fn domain_prompts_mut(&mut self, domain: usize) -> Result<&mut [Vec<f64>]> {
        let count = self.features.len();
        self.features
            .get_mut(domain)
            .map(|v| v.as_mut_slice())
            .ok_or(Error::Domain { domain, count })
    }
}

/// Borrowed parameter bundle for one window evaluation. `prompts` are the
/// feature vectors already selected for `domain`.
#[derive(Clone, Copy)]
pub struct WindowContext<'a> {
    pub proj: &'a ProjectionSet,
    pub tables: &'a LookupTableSet,
    pub quantizer: &'a QuantizerSpec,
    pub prompts: &'a [Vec<f64>],
    pub domain: usize,
    pub config: &'a AttentionConfig,
}

/// Quantized delta plus the query/key/value encodings of one voxel pair.
pub(crate) type PairEncodings = (QuantizedDelta, Vec<f64>, Vec<f64>, Vec<f64>);

impl<'a> WindowContext<'a> {
    fn validate(&self, features: &[Vec<f64>], signals: &[Vec<f64>]) -> Result<()> {
        let d = self.config.dim;
        if features.is_empty() {
            return Err(Error::EmptyWindow);
        }
        if features.iter().any(|f| f.len() != d) {
            return Err(Error::Shape(format!("window features must have {d} channels")));
        }
        if signals.len() != features.len() {
            return Err(Error::Shape(format!(
                "{} signal vectors for {} voxels",
                signals.len(),
                features.len()
            )));
        }
        let m = self.tables.components();
        if signals.iter().any(|s| s.len() != m) {
            return Err(Error::Shape(format!("signal vectors must have {m} components")));
        }
        if self.quantizer.components() != m {
            return Err(Error::Config(format!(
                "quantizer covers {} components, tables expect {m}",
                self.quantizer.components()
            )));
        }
        if self.quantizer.divisions_1d != self.tables.divisions_1d()
            || self.quantizer.divisions_2d != self.tables.divisions_2d()
        {
            return Err(Error::Config(
                "quantizer division counts do not match the tables".into(),
            ));
        }
        if self.tables.dim() != d {
            return Err(Error::Config(format!(
                "tables produce {} channels, block has {d}",
                self.tables.dim()
            )));
        }
        if self.proj.dim() != d
            || self.proj.query.cols() != d
            || self.proj.key.cols() != d
            || self.proj.value.cols() != d
        {
            return Err(Error::Config("projection matrices must be d x d".into()));
        }
        if self.prompts.len() != self.config.prompt_count {
            return Err(Error::Shape(format!(
                "{} prompts supplied, config declares {}",
                self.prompts.len(),
                self.config.prompt_count
            )));
        }
        if self.prompts.iter().any(|p| p.len() != d) {
            return Err(Error::Shape(format!("prompt vectors must have {d} channels")));
        }
        Ok(())
    }

    /// Looks up the three role encodings for the signal difference of a
    /// voxel pair.
    fn pair_tables(
        &self,
        signals: &[Vec<f64>],
        i: usize,
        j: usize,
    ) -> Result<PairEncodings> {
        let delta: Vec<f64> = signals[i]
            .iter()
            .zip(signals[j].iter())
            .map(|(a, b)| a - b)
            .collect();
        let q = self.quantizer.quantize(&delta)?;
        let tq = self.tables.encode(TableRole::Query, &q, self.domain)?;
        let tk = self.tables.encode(TableRole::Key, &q, self.domain)?;
        let tv = self.tables.encode(TableRole::Value, &q, self.domain)?;
        Ok((q, tq, tk, tv))
    }
}

pub(crate) struct Projected {
    pub q_rows: Vec<Vec<f64>>,
    pub k_rows: Vec<Vec<f64>>,
    pub v_rows: Vec<Vec<f64>>,
    pub prompt_keys: Vec<Vec<f64>>,
    pub prompt_values: Vec<Vec<f64>>,
}

pub(crate) fn project(features: &[Vec<f64>], ctx: &WindowContext) -> Projected {
    Projected {
        q_rows: features.iter().map(|f| ctx.proj.query.left_mul(f)).collect(),
        k_rows: features.iter().map(|f| ctx.proj.key.left_mul(f)).collect(),
        v_rows: features.iter().map(|f| ctx.proj.value.left_mul(f)).collect(),
        prompt_keys: ctx.prompts.iter().map(|p| ctx.proj.key.left_mul(p)).collect(),
        prompt_values: ctx.prompts.iter().map(|p| ctx.proj.value.left_mul(p)).collect(),
    }
}

#[inline]
fn head_dot(a: &[f64], b: &[f64], lo: usize, hi: usize) -> f64 {
    crate::linalg::dot(&a[lo..hi], &b[lo..hi])
}

/// Streaming score access: per-head scores are computable row by row without
/// materializing the full pair matrix.
pub struct ScoreSupplier<'a> {
    ctx: WindowContext<'a>,
    signals: &'a [Vec<f64>],
    projected: Projected,
}

impl<'a> ScoreSupplier<'a> {
    pub fn new(
        features: &'a [Vec<f64>],
        signals: &'a [Vec<f64>],
        ctx: WindowContext<'a>,
    ) -> Result<Self> {
        ctx.validate(features, signals)?;
        let projected = project(features, &ctx);
        Ok(ScoreSupplier {
            ctx,
            signals,
            projected,
        })
    }

    pub fn len(&self) -> usize {
        self.projected.q_rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.projected.q_rows.is_empty()
    }

    /// Score between real voxels `i` (query) and `j` (key) for one head.
    pub fn score(&self, i: usize, j: usize, head: usize) -> Result<f64> {
        let hd = self.ctx.config.head_dim();
        let (lo, hi) = (head * hd, (head + 1) * hd);
        let scale = self.ctx.config.scale();
        let (_, tq, tk, _) = self.ctx.pair_tables(self.signals, i, j)?;
        let q = &self.projected.q_rows[i];
        let k = &self.projected.k_rows[j];
        let e = (head_dot(q, k, lo, hi) + head_dot(q, &tk, lo, hi) + head_dot(k, &tq, lo, hi))
            * scale;
        if !e.is_finite() {
            return Err(Error::Numerics(format!("non-finite score at pair ({i}, {j})")));
        }
        Ok(e)
    }

    /// Score between voxel `i` and prompt `b` for one head; prompts carry no
    /// relative-signal encoding.
    pub fn prompt_score(&self, i: usize, b: usize, head: usize) -> Result<f64> {
        let hd = self.ctx.config.head_dim();
        let (lo, hi) = (head * hd, (head + 1) * hd);
        let e = head_dot(&self.projected.q_rows[i], &self.projected.prompt_keys[b], lo, hi)
            * self.ctx.config.scale();
        if !e.is_finite() {
            return Err(Error::Numerics(format!("non-finite prompt score ({i}, {b})")));
        }
        Ok(e)
    }

    /// One query's scores against all real voxels, then all prompts.
    pub fn score_row(&self, i: usize, head: usize) -> Result<Vec<f64>> {
        let n = self.len();
        let b = self.ctx.prompts.len();
        let mut row = Vec::with_capacity(n + b);
        for j in 0..n {
            row.push(self.score(i, j, head)?);
        }
        for p in 0..b {
            row.push(self.prompt_score(i, p, head)?);
        }
        Ok(row)
    }
}

/// Memory-efficient window attention: per query and head, one pass collects
/// the score row and its max, a second pass accumulates the normalized
/// weighted values. Auxiliary memory is linear in `N + B`.
#[allow(clippy::needless_range_loop)]
pub fn window_attention_forward(
    features: &[Vec<f64>],
    signals: &[Vec<f64>],
    ctx: &WindowContext,
) -> Result<Vec<Vec<f64>>> {
    ctx.validate(features, signals)?;
    let n = features.len();
    let b = ctx.prompts.len();
    let d = ctx.config.dim;
    let heads = ctx.config.heads;
    let hd = ctx.config.head_dim();
    let scale = ctx.config.scale();
    let projected = project(features, ctx);

    let mut out = vec![vec![0.0; d]; n];
    let mut tv_row: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut tq_row: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut tk_row: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut scores = vec![0.0f64; n + b];

    for i in 0..n {
        tv_row.clear();
        tq_row.clear();
        tk_row.clear();
        for j in 0..n {
            let (_, tq, tk, tv) = ctx.pair_tables(signals, i, j)?;
            tq_row.push(tq);
            tk_row.push(tk);
            tv_row.push(tv);
        }
        let q = &projected.q_rows[i];
        for h in 0..heads {
            let (lo, hi) = (h * hd, (h + 1) * hd);
            // Pass 1: scores, running max.
            let mut max = f64::NEG_INFINITY;
            for j in 0..n {
                let k = &projected.k_rows[j];
                let e = (head_dot(q, k, lo, hi)
                    + head_dot(q, &tk_row[j], lo, hi)
                    + head_dot(k, &tq_row[j], lo, hi))
                    * scale;
                if !e.is_finite() {
                    return Err(Error::Numerics(format!(
                        "non-finite score at pair ({i}, {j})"
                    )));
                }
                scores[j] = e;
                max = max.max(e);
            }
            for p in 0..b {
                let e = head_dot(q, &projected.prompt_keys[p], lo, hi) * scale;
                if !e.is_finite() {
                    return Err(Error::Numerics(format!(
                        "non-finite prompt score ({i}, {p})"
                    )));
                }
                scores[n + p] = e;
                max = max.max(e);
            }
            let mut z = 0.0;
            for &s in &scores[..n + b] {
                z += (s - max).exp();
            }
            // Pass 2: normalized accumulation.
            let out_i = &mut out[i][lo..hi];
            for j in 0..n {
                let w = (scores[j] - max).exp() / z;
                let v = &projected.v_rows[j][lo..hi];
                let tv = &tv_row[j][lo..hi];
                for ((o, &vv), &tvv) in out_i.iter_mut().zip(v.iter()).zip(tv.iter()) {
                    *o += w * (vv + tvv);
                }
            }
            for p in 0..b {
                let w = (scores[n + p] - max).exp() / z;
                let pv = &projected.prompt_values[p][lo..hi];
                for (o, &vv) in out_i.iter_mut().zip(pv.iter()) {
                    *o += w * vv;
                }
            }
        }
    }
    Ok(out)
}

/// Dense per-head attention weights over real voxels then prompts, computed
/// with an explicit max-subtracted softmax. `weights[i][h]` has `N + B`
/// entries summing to 1.
pub fn attention_weights(
    features: &[Vec<f64>],
    signals: &[Vec<f64>],
    ctx: &WindowContext,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let supplier = ScoreSupplier::new(features, signals, WindowContext { ..*ctx })?;
    let n = features.len();
    let heads = ctx.config.heads;
    let mut weights = Vec::with_capacity(n);
    for i in 0..n {
        let mut per_head = Vec::with_capacity(heads);
        for h in 0..heads {
            let row = supplier.score_row(i, h)?;
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            per_head.push(exps.into_iter().map(|e| e / z).collect());
        }
        weights.push(per_head);
    }
    Ok(weights)
}

/// Naive dense reference for [`window_attention_forward`]: materializes full
/// score rows and explicit softmax weights. Used by tests and oracles.
#[allow(clippy::needless_range_loop)]
pub fn window_attention_reference(
    features: &[Vec<f64>],
    signals: &[Vec<f64>],
    ctx: &WindowContext,
) -> Result<Vec<Vec<f64>>> {
    ctx.validate(features, signals)?;
    let weights = attention_weights(features, signals, ctx)?;
    let n = features.len();
    let b = ctx.prompts.len();
    let d = ctx.config.dim;
    let heads = ctx.config.heads;
    let hd = ctx.config.head_dim();
    let projected = project(features, ctx);

    let mut out = vec![vec![0.0; d]; n];
    for i in 0..n {
        for h in 0..heads {
            let (lo, hi) = (h * hd, (h + 1) * hd);
            let w = &weights[i][h];
            let out_i = &mut out[i][lo..hi];
            for j in 0..n {
                let (_, _, _, tv) = ctx.pair_tables(signals, i, j)?;
                let v = &projected.v_rows[j][lo..hi];
                let tv = &tv[lo..hi];
                for ((o, &vv), &tvv) in out_i.iter_mut().zip(v.iter()).zip(tv.iter()) {
                    *o += w[j] * (vv + tvv);
                }
            }
            for p in 0..b {
                let pv = &projected.prompt_values[p][lo..hi];
                for (o, &vv) in out_i.iter_mut().zip(pv.iter()) {
                    *o += w[n + p] * vv;
                }
            }
        }
    }
    Ok(out)
}

/// Fraction of softmax mass per voxel that lands on prompts, averaged over
/// heads. Zero when prompts score far below real voxels; 0.5 for one voxel
/// and one prompt with equal scores.
pub fn prompt_attention_mass(
    features: &[Vec<f64>],
    signals: &[Vec<f64>],
    ctx: &WindowContext,
) -> Result<Vec<f64>> {
    if ctx.prompts.is_empty() {
        return Err(Error::Shape("prompt mass needs at least one prompt".into()));
    }
    let weights = attention_weights(features, signals, ctx)?;
    let n = features.len();
    let heads = ctx.config.heads;
    let mut out = Vec::with_capacity(n);
    for w_i in weights.iter() {
        let mut mass = 0.0;
        for w_h in w_i.iter() {
            mass += w_h[n..].iter().sum::<f64>();
        }
        out.push(mass / heads as f64);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::TableMode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) struct Fixture {
        pub features: Vec<Vec<f64>>,
        pub signals: Vec<Vec<f64>>,
        pub proj: ProjectionSet,
        pub tables: LookupTableSet,
        pub quantizer: QuantizerSpec,
        pub prompts: Vec<Vec<f64>>,
        pub config: AttentionConfig,
        pub domain: usize,
    }

    impl Fixture {
        pub fn ctx(&self) -> WindowContext<'_> {
            WindowContext {
                proj: &self.proj,
                tables: &self.tables,
                quantizer: &self.quantizer,
                prompts: &self.prompts,
                domain: self.domain,
                config: &self.config,
            }
        }
    }

    pub(crate) fn random_fixture(
        rng: &mut ChaCha8Rng,
        mode: TableMode,
        n: usize,
        prompt_count: usize,
        dim: usize,
        heads: usize,
    ) -> Fixture {
        let config = AttentionConfig::new(dim, heads, prompt_count).unwrap();
        let quantizer = QuantizerSpec::for_signals(5, 0.1, 5, 3);
        let mut tables = LookupTableSet::new(mode, dim, 9, 2, 5, 3).unwrap();
        tables.init_with_rng(rng);
        let mut proj = ProjectionSet::zeros(dim);
        proj.init_with_rng(rng, 0.5);
        let features: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let signals: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let mut s = Vec::with_capacity(9);
                for _ in 0..3 {
                    s.push(rng.random_range(0.0..0.4));
                }
                for _ in 0..3 {
                    s.push(rng.random_range(0.0..1.0));
                }
                let raw: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                let len = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-6);
                s.extend(raw.iter().map(|v| v / len));
                s
            })
            .collect();
        let prompts: Vec<Vec<f64>> = (0..prompt_count)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let domain = rng.random_range(0..2);
        Fixture {
            features,
            signals,
            proj,
            tables,
            quantizer,
            prompts,
            config,
            domain,
        }
    }

    #[test]
    fn zero_tables_reduce_scores_to_scaled_dot_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut fx = random_fixture(&mut rng, TableMode::Base, 5, 0, 8, 2);
        // Zero every shared entry.
        for role in TableRole::ALL {
            fx.tables.zero_role(role);
        }
        let supplier = ScoreSupplier::new(&fx.features, &fx.signals, fx.ctx()).unwrap();
        let scale = fx.config.scale();
        for i in 0..5 {
            for j in 0..5 {
                for h in 0..2 {
                    let q = fx.proj.query.left_mul(&fx.features[i]);
                    let k = fx.proj.key.left_mul(&fx.features[j]);
                    let expect = head_dot(&q, &k, h * 4, (h + 1) * 4) * scale;
                    let got = supplier.score(i, j, h).unwrap();
                    assert!((got - expect).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn self_score_of_single_voxel_includes_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fx = random_fixture(&mut rng, TableMode::Base, 1, 0, 8, 1);
        let supplier = ScoreSupplier::new(&fx.features, &fx.signals, fx.ctx()).unwrap();
        let q = fx.proj.query.left_mul(&fx.features[0]);
        let k = fx.proj.key.left_mul(&fx.features[0]);
        let zero_delta = vec![0.0; 9];
        let qd = fx.quantizer.quantize(&zero_delta).unwrap();
        let tq = fx.tables.encode(TableRole::Query, &qd, 0).unwrap();
        let tk = fx.tables.encode(TableRole::Key, &qd, 0).unwrap();
        let expect = (crate::linalg::dot(&q, &k)
            + crate::linalg::dot(&q, &tk)
            + crate::linalg::dot(&k, &tq))
            * fx.config.scale();
        let got = supplier.score(0, 0, 0).unwrap();
        assert!((got - expect).abs() < 1e-14);
    }

    #[test]
    fn rowwise_scores_match_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fx = random_fixture(&mut rng, TableMode::Vm, 7, 0, 8, 2);
        let supplier = ScoreSupplier::new(&fx.features, &fx.signals, fx.ctx()).unwrap();
        // Dense oracle: full projections and bias matrices.
        for h in 0..2 {
            for i in 0..7 {
                let row = supplier.score_row(i, h).unwrap();
                for j in 0..7 {
                    let q = fx.proj.query.left_mul(&fx.features[i]);
                    let k = fx.proj.key.left_mul(&fx.features[j]);
                    let delta: Vec<f64> = fx.signals[i]
                        .iter()
                        .zip(fx.signals[j].iter())
                        .map(|(a, b)| a - b)
                        .collect();
                    let qd = fx.quantizer.quantize(&delta).unwrap();
                    let tq = fx.tables.encode(TableRole::Query, &qd, fx.domain).unwrap();
                    let tk = fx.tables.encode(TableRole::Key, &qd, fx.domain).unwrap();
                    let (lo, hi) = (h * 4, (h + 1) * 4);
                    let expect = (head_dot(&q, &k, lo, hi)
                        + head_dot(&q, &tk, lo, hi)
                        + head_dot(&k, &tq, lo, hi))
                        * fx.config.scale();
                    assert!((row[j] - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_voxel_no_prompts_gets_value_plus_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fx = random_fixture(&mut rng, TableMode::Base, 1, 0, 8, 2);
        let out = window_attention_forward(&fx.features, &fx.signals, &fx.ctx()).unwrap();
        let v = fx.proj.value.left_mul(&fx.features[0]);
        let qd = fx.quantizer.quantize(&[0.0; 9]).unwrap();
        let tv = fx.tables.encode(TableRole::Value, &qd, fx.domain).unwrap();
        for ch in 0..8 {
            assert!((out[0][ch] - (v[ch] + tv[ch])).abs() < 1e-14);
        }
    }

    #[test]
    fn identical_voxels_produce_identical_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut fx = random_fixture(&mut rng, TableMode::Base, 6, 0, 8, 2);
        let f = fx.features[0].clone();
        let s = fx.signals[0].clone();
        for i in 0..6 {
            fx.features[i] = f.clone();
            fx.signals[i] = s.clone();
        }
        let out = window_attention_forward(&fx.features, &fx.signals, &fx.ctx()).unwrap();
        for i in 1..6 {
            assert_eq!(out[i], out[0]);
        }
    }

    #[test]
    fn forward_matches_reference_with_prompts() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for mode in TableMode::ALL {
            let fx = random_fixture(&mut rng, mode, 6, 5, 8, 2);
            let fast = window_attention_forward(&fx.features, &fx.signals, &fx.ctx()).unwrap();
            let slow = window_attention_reference(&fx.features, &fx.signals, &fx.ctx()).unwrap();
            let mut scale = 0.0f64;
            for row in &slow {
                for v in row {
                    scale = scale.max(v.abs());
                }
            }
            for (a, b) in fast.iter().zip(slow.iter()) {
                for (x, y) in a.iter().zip(b.iter()) {
                    assert!((x - y).abs() <= 1e-10 * scale.max(1.0));
                }
            }
        }
    }

    #[test]
    fn weights_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let fx = random_fixture(&mut rng, TableMode::VmDomainModulated, 9, 5, 8, 2);
        let weights = attention_weights(&fx.features, &fx.signals, &fx.ctx()).unwrap();
        for w_i in &weights {
            for w_h in w_i {
                let sum: f64 = w_h.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_window_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let fx = random_fixture(&mut rng, TableMode::Base, 1, 0, 8, 2);
        match window_attention_forward(&[], &[], &fx.ctx()) {
            Err(Error::EmptyWindow) => {}
            other => panic!("expected empty-window error, got {other:?}"),
        }
    }

    #[test]
    fn prompt_mass_half_for_matched_single_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut fx = random_fixture(&mut rng, TableMode::Base, 1, 1, 8, 2);
        for role in TableRole::ALL {
            fx.tables.zero_role(role);
        }
        fx.prompts[0] = fx.features[0].clone();
        let mass = prompt_attention_mass(&fx.features, &fx.signals, &fx.ctx()).unwrap();
        assert!((mass[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn prompt_mass_vanishes_for_very_negative_prompt_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut fx = random_fixture(&mut rng, TableMode::Base, 1, 1, 8, 2);
        for role in TableRole::ALL {
            fx.tables.zero_role(role);
        }
        // Identity query/key projections and a prompt pointing against the
        // single feature: the prompt score is -t * |f|^2 / sqrt(d).
        fx.proj = ProjectionSet::zeros(8);
        for i in 0..8 {
            fx.proj.query.set(i, i, 1.0);
            fx.proj.key.set(i, i, 1.0);
            fx.proj.value.set(i, i, 1.0);
        }
        fx.features[0] = vec![1.0; 8];
        fx.prompts[0] = fx.features[0].iter().map(|v| -50.0 * v).collect();
        let mass = prompt_attention_mass(&fx.features, &fx.signals, &fx.ctx()).unwrap();
        assert!(mass[0] < 1e-6, "mass {mass:?}");
    }

    #[test]
    fn prompt_mass_decreases_with_window_population() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut means = Vec::new();
        for &n in &[1usize, 4, 16] {
            let mut acc = 0.0;
            let trials = 30;
            for _ in 0..trials {
                let fx = random_fixture(&mut rng, TableMode::Base, n, 3, 8, 2);
                let mass = prompt_attention_mass(&fx.features, &fx.signals, &fx.ctx()).unwrap();
                acc += mass.iter().sum::<f64>() / mass.len() as f64;
            }
            means.push(acc / trials as f64);
        }
        assert!(means[0] > means[1] && means[1] > means[2], "means {means:?}");
    }
}
