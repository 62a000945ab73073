//! Analytic gradients of the window attention block.
//!
//! Gradients cover the window features, the three projection matrices, the
//! prompt feature vectors, and every touched lookup-table entry (shared
//! entries and modulation scalars). Softmax statistics are recomputed per
//! query row, so auxiliary memory stays linear in the window population;
//! accumulation runs in a fixed order for bitwise reproducibility.

use crate::attention::{project, WindowContext};
use crate::encoding::{LookupTableSet, TableRole};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Gradients with respect to every parameter of one window evaluation.
#[derive(Clone, Debug)]
pub struct AttentionGradients {
    pub features: Vec<Vec<f64>>,
    pub query: Matrix,
    pub key: Matrix,
    pub value: Matrix,
    /// Gradients of the prompt feature vectors supplied in the context.
    pub prompts: Vec<Vec<f64>>,
    /// Table gradients with the same shapes as the context's table set.
    pub tables: LookupTableSet,
}

/// Backward pass of [`crate::attention::window_attention_forward`] given
/// `upstream[i] = d(loss)/d(output_i)`.
#[allow(clippy::needless_range_loop)]
pub fn window_attention_backward(
    features: &[Vec<f64>],
    signals: &[Vec<f64>],
    ctx: &WindowContext,
    upstream: &[Vec<f64>],
) -> Result<AttentionGradients> {
    let n = features.len();
    let b = ctx.prompts.len();
    let d = ctx.config.dim;
    if upstream.len() != n || upstream.iter().any(|g| g.len() != d) {
        return Err(Error::Shape(format!(
            "upstream must be {n} vectors of {d} channels"
        )));
    }
    ctx.validate(features, signals)?;

    let heads = ctx.config.heads;
    let hd = ctx.config.head_dim();
    let scale = ctx.config.scale();
    let projected = project(features, ctx);

    let mut d_features = vec![vec![0.0; d]; n];
    let mut d_query = Matrix::zeros(d, d);
    let mut d_key = Matrix::zeros(d, d);
    let mut d_value = Matrix::zeros(d, d);
    let mut d_prompts = vec![vec![0.0; d]; b];
    let mut d_tables = ctx.tables.zeros_like();

    // Projection-space gradient accumulators.
    let mut dq_rows = vec![vec![0.0; d]; n];
    let mut dk_rows = vec![vec![0.0; d]; n];
    let mut dv_rows = vec![vec![0.0; d]; n];
    let mut dpk_rows = vec![vec![0.0; d]; b];
    let mut dpv_rows = vec![vec![0.0; d]; b];

    // Row-local buffers (linear in N + B).
    let mut weights = vec![vec![0.0f64; n + b]; heads];
    let mut dscores = vec![vec![0.0f64; n + b]; heads];
    let mut gtq = vec![0.0f64; d];
    let mut gtk = vec![0.0f64; d];
    let mut gtv = vec![0.0f64; d];

    for i in 0..n {
        // Pair tables for this query row.
        let mut pair_rows = Vec::with_capacity(n);
        for j in 0..n {
            pair_rows.push(ctx.pair_tables(signals, i, j)?);
        }
        let q = &projected.q_rows[i];
        let g_i = &upstream[i];

        for h in 0..heads {
            let (lo, hi) = (h * hd, (h + 1) * hd);
            // Scores and softmax weights.
            let mut max = f64::NEG_INFINITY;
            for (j, (_, tq, tk, _)) in pair_rows.iter().enumerate() {
                let k = &projected.k_rows[j];
                let e = (dot_range(q, k, lo, hi)
                    + dot_range(q, tk, lo, hi)
                    + dot_range(k, tq, lo, hi))
                    * scale;
                if !e.is_finite() {
                    return Err(Error::Numerics(format!(
                        "non-finite score at pair ({i}, {j})"
                    )));
                }
                weights[h][j] = e;
                max = max.max(e);
            }
            for p in 0..b {
                let e = dot_range(q, &projected.prompt_keys[p], lo, hi) * scale;
                weights[h][n + p] = e;
                max = max.max(e);
            }
            let mut z = 0.0;
            for w in weights[h][..n + b].iter_mut() {
                *w = (*w - max).exp();
                z += *w;
            }
            for w in weights[h][..n + b].iter_mut() {
                *w /= z;
            }
            // Score gradients: de_j = w_j * (u_j - c) with
            // u_j = g_i . (v_j + tv_ij) and c = sum_j w_j u_j.
            let mut c = 0.0;
            for j in 0..n {
                let v = &projected.v_rows[j];
                let tv = &pair_rows[j].3;
                let mut u = 0.0;
                for ch in lo..hi {
                    u += g_i[ch] * (v[ch] + tv[ch]);
                }
                dscores[h][j] = u;
                c += weights[h][j] * u;
            }
            for p in 0..b {
                let pv = &projected.prompt_values[p];
                let u = dot_range(g_i, pv, lo, hi);
                dscores[h][n + p] = u;
                c += weights[h][n + p] * u;
            }
            for idx in 0..n + b {
                dscores[h][idx] = weights[h][idx] * (dscores[h][idx] - c);
            }
            // Query gradient for this row.
            for j in 0..n {
                let de = dscores[h][j] * scale;
                let k = &projected.k_rows[j];
                let tk = &pair_rows[j].2;
                for ch in lo..hi {
                    dq_rows[i][ch] += de * (k[ch] + tk[ch]);
                }
            }
            for p in 0..b {
                let de = dscores[h][n + p] * scale;
                let pk = &projected.prompt_keys[p];
                for ch in lo..hi {
                    dq_rows[i][ch] += de * pk[ch];
                }
            }
        }

        // Key/value and table gradients per pair, all heads at once.
        for (j, (qd, tq, _tk, _tv)) in pair_rows.iter().enumerate() {
            gtq.fill(0.0);
            gtk.fill(0.0);
            gtv.fill(0.0);
            let k_j = &projected.k_rows[j];
            for h in 0..heads {
                let (lo, hi) = (h * hd, (h + 1) * hd);
                let w = weights[h][j];
                let de = dscores[h][j] * scale;
                for ch in lo..hi {
                    dv_rows[j][ch] += w * g_i[ch];
                    gtv[ch] = w * g_i[ch];
                    dk_rows[j][ch] += de * (q[ch] + tq[ch]);
                    gtk[ch] = de * q[ch];
                    gtq[ch] = de * k_j[ch];
                }
            }
            ctx.tables
                .accumulate_encoding_grad(TableRole::Query, qd, ctx.domain, &gtq, &mut d_tables)?;
            ctx.tables
                .accumulate_encoding_grad(TableRole::Key, qd, ctx.domain, &gtk, &mut d_tables)?;
            ctx.tables
                .accumulate_encoding_grad(TableRole::Value, qd, ctx.domain, &gtv, &mut d_tables)?;
        }
        for p in 0..b {
            for h in 0..heads {
                let (lo, hi) = (h * hd, (h + 1) * hd);
                let w = weights[h][n + p];
                let de = dscores[h][n + p] * scale;
                for ch in lo..hi {
                    dpk_rows[p][ch] += de * q[ch];
                    dpv_rows[p][ch] += w * g_i[ch];
                }
            }
        }
    }

    // Map projection-space gradients back to parameters and inputs.
    for i in 0..n {
        d_query.add_outer(&features[i], &dq_rows[i]);
        d_key.add_outer(&features[i], &dk_rows[i]);
        d_value.add_outer(&features[i], &dv_rows[i]);
        let via_q = ctx.proj.query.left_mul_transpose(&dq_rows[i]);
        let via_k = ctx.proj.key.left_mul_transpose(&dk_rows[i]);
        let via_v = ctx.proj.value.left_mul_transpose(&dv_rows[i]);
        for ch in 0..d {
            d_features[i][ch] = via_q[ch] + via_k[ch] + via_v[ch];
        }
    }
    for p in 0..b {
        d_key.add_outer(&ctx.prompts[p], &dpk_rows[p]);
        d_value.add_outer(&ctx.prompts[p], &dpv_rows[p]);
        let via_k = ctx.proj.key.left_mul_transpose(&dpk_rows[p]);
        let via_v = ctx.proj.value.left_mul_transpose(&dpv_rows[p]);
        for ch in 0..d {
            d_prompts[p][ch] = via_k[ch] + via_v[ch];
        }
    }

    Ok(AttentionGradients {
        features: d_features,
        query: d_query,
        key: d_key,
        value: d_value,
        prompts: d_prompts,
        tables: d_tables,
    })
}

#[inline]
fn dot_range(a: &[f64], b: &[f64], lo: usize, hi: usize) -> f64 {
    crate::linalg::dot(&a[lo..hi], &b[lo..hi])
}
