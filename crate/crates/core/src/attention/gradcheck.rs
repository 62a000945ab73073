//! Finite-difference verification of the attention block gradients.
//!
//! Each trial builds a random small window, computes a scalar loss (the dot
//! product of the outputs with a fixed random upstream), and compares the
//! analytic gradient of every parameter — features, projections, prompts,
//! shared table entries, modulation scalars — against central finite
//! differences.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    window_attention_backward, window_attention_forward, AttentionConfig, ProjectionSet,
    WindowContext,
};
use crate::encoding::{LookupTableSet, QuantizerSpec, TableMode};
use crate::error::Result;
use crate::linalg::dot;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-4;
/// Absolute error floor below which differences always pass.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub seed: u64,
    /// Windows checked per table mode.
    pub trials: usize,
    /// Maximum allowed normalized error.
    pub tolerance: f64,
    pub modes: Vec<TableMode>,
    /// Test hook: corrupt one analytic gradient entry to force a failure.
    pub corrupt: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            seed: 0,
            trials: 50,
            tolerance: 1e-4,
            modes: TableMode::ALL.to_vec(),
            corrupt: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModeReport {
    pub mode: TableMode,
    pub trials: usize,
    pub parameters_checked: usize,
    pub max_error: f64,
    pub worst_parameter: String,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub modes: Vec<ModeReport>,
    pub max_error: f64,
    pub worst_parameter: String,
    pub passed: bool,
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for m in &self.modes {
            writeln!(
                f,
                "gradcheck mode={} trials={} parameters={} max_err={:.3e} worst={} status={}",
                m.mode,
                m.trials,
                m.parameters_checked,
                m.max_error,
                m.worst_parameter,
                if m.passed { "ok" } else { "FAIL" }
            )?;
        }
        write!(
            f,
            "gradcheck overall: {} (tolerance {:.1e}, max_err {:.3e}, worst {})",
            if self.passed { "ok" } else { "FAIL" },
            self.tolerance,
            self.max_error,
            self.worst_parameter
        )
    }
}

/// One randomized window problem with a flat view over all parameters.
struct Problem {
    features: Vec<Vec<f64>>,
    signals: Vec<Vec<f64>>,
    proj: ProjectionSet,
    tables: LookupTableSet,
    quantizer: QuantizerSpec,
    prompts: Vec<Vec<f64>>,
    domain: usize,
    config: AttentionConfig,
    upstream: Vec<Vec<f64>>,
}

impl Problem {
    fn random(rng: &mut ChaCha8Rng, mode: TableMode, with_prompts: bool) -> Problem {
        let dim = 8;
        let heads = 2;
        let n = rng.random_range(1..=8);
        let prompt_count = if with_prompts { 5 } else { 0 };
        let config = AttentionConfig::new(dim, heads, prompt_count).unwrap();
        let quantizer = QuantizerSpec::for_signals(5, 0.1, 5, 3);
        let mut tables = LookupTableSet::new(mode, dim, 9, 2, 5, 3).unwrap();
        tables.init_with_rng(rng);
        // Randomize modulation scalars away from 1 so product-rule gradients
        // are exercised.
        if mode.is_domain_modulated() {
            let shared_len = tables.shared_entry_count() * tables.dim();
            let mut flat = tables.flatten();
            for v in flat[shared_len..].iter_mut() {
                *v = 1.0 + rng.random_range(-0.5..0.5);
            }
            tables.assign_flat(&flat).unwrap();
        }
        let mut proj = ProjectionSet::zeros(dim);
        proj.init_with_rng(rng, 0.5);
        let features = (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let signals = (0..n)
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
        let prompts = (0..prompt_count)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let domain = rng.random_range(0..2);
        let upstream = (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        Problem {
            features,
            signals,
            proj,
            tables,
            quantizer,
            prompts,
            domain,
            config,
            upstream,
        }
    }

    fn n(&self) -> usize {
        self.features.len()
    }

    fn dim(&self) -> usize {
        self.config.dim
    }

    fn param_count(&self) -> usize {
        self.n() * self.dim()
            + 3 * self.dim() * self.dim()
            + self.prompts.len() * self.dim()
            + self.tables.param_count()
    }

    fn get_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for f in &self.features {
            out.extend_from_slice(f);
        }
        out.extend_from_slice(self.proj.query.data());
        out.extend_from_slice(self.proj.key.data());
        out.extend_from_slice(self.proj.value.data());
        for p in &self.prompts {
            out.extend_from_slice(p);
        }
        out.extend(self.tables.flatten());
        out
    }

    fn set_params(&mut self, values: &[f64]) {
        let d = self.dim();
        let mut cursor = 0;
        for f in &mut self.features {
            f.copy_from_slice(&values[cursor..cursor + d]);
            cursor += d;
        }
        for m in [
            &mut self.proj.query,
            &mut self.proj.key,
            &mut self.proj.value,
        ] {
            let len = d * d;
            m.data_mut().copy_from_slice(&values[cursor..cursor + len]);
            cursor += len;
        }
        for p in &mut self.prompts {
            p.copy_from_slice(&values[cursor..cursor + d]);
            cursor += d;
        }
        self.tables
            .assign_flat(&values[cursor..])
            .expect("flat parameter length already checked");
    }

    fn ctx(&self) -> WindowContext<'_> {
        WindowContext {
            proj: &self.proj,
            tables: &self.tables,
            quantizer: &self.quantizer,
            prompts: &self.prompts,
            domain: self.domain,
            config: &self.config,
        }
    }

    fn loss(&self) -> Result<f64> {
        let out = window_attention_forward(&self.features, &self.signals, &self.ctx())?;
        Ok(out
            .iter()
            .zip(self.upstream.iter())
            .map(|(o, g)| dot(o, g))
            .sum())
    }

    fn analytic_grads(&self) -> Result<Vec<f64>> {
        let grads =
            window_attention_backward(&self.features, &self.signals, &self.ctx(), &self.upstream)?;
        let mut out = Vec::with_capacity(self.param_count());
        for f in &grads.features {
            out.extend_from_slice(f);
        }
        out.extend_from_slice(grads.query.data());
        out.extend_from_slice(grads.key.data());
        out.extend_from_slice(grads.value.data());
        for p in &grads.prompts {
            out.extend_from_slice(p);
        }
        out.extend(grads.tables.flatten());
        Ok(out)
    }

    fn param_label(&self, idx: usize) -> String {
        let d = self.dim();
        let mut base = self.n() * d;
        if idx < base {
            return format!("feature[{}][{}]", idx / d, idx % d);
        }
        for name in ["query", "key", "value"] {
            if idx < base + d * d {
                let local = idx - base;
                return format!("{name}[{}][{}]", local / d, local % d);
            }
            base += d * d;
        }
        if idx < base + self.prompts.len() * d {
            let local = idx - base;
            return format!("prompt[{}][{}]", local / d, local % d);
        }
        base += self.prompts.len() * d;
        let labels = self.tables.param_labels();
        labels
            .get(idx - base)
            .cloned()
            .unwrap_or_else(|| format!("tables[{}]", idx - base))
    }
}

/// Normalized error: `|a - n| / max(|a|, |n|, ABS_FLOOR / tolerance)`, so a
/// result below `tolerance` means the difference passed both the relative
/// bound and the absolute floor.
fn normalized_error(analytic: f64, numeric: f64, tolerance: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    diff / analytic.abs().max(numeric.abs()).max(ABS_FLOOR / tolerance)
}

/// Runs the finite-difference suite.
pub fn run_gradcheck(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut modes = Vec::with_capacity(opts.modes.len());
    let mut overall_max = 0.0f64;
    let mut overall_worst = String::from("none");
    for &mode in &opts.modes {
        let mut max_error = 0.0f64;
        let mut worst = String::from("none");
        let mut params_checked = 0usize;
        for trial in 0..opts.trials {
            let mut problem = Problem::random(&mut rng, mode, trial % 2 == 0);
            let mut analytic = problem.analytic_grads()?;
            if opts.corrupt && trial == 0 {
                analytic[0] += 1.0;
            }
            let mut params = problem.get_params();
            params_checked += params.len();
            for idx in 0..params.len() {
                let orig = params[idx];
                params[idx] = orig + FD_STEP;
                problem.set_params(&params);
                let up = problem.loss()?;
                params[idx] = orig - FD_STEP;
                problem.set_params(&params);
                let down = problem.loss()?;
                params[idx] = orig;
                let numeric = (up - down) / (2.0 * FD_STEP);
                let err = normalized_error(analytic[idx], numeric, opts.tolerance);
                if err > max_error {
                    max_error = err;
                    worst = format!("{}:trial{}:{}", mode, trial, problem.param_label(idx));
                }
            }
            problem.set_params(&params);
        }
        let passed = max_error < opts.tolerance;
        if max_error > overall_max {
            overall_max = max_error;
            overall_worst = worst.clone();
        }
        modes.push(ModeReport {
            mode,
            trials: opts.trials,
            parameters_checked: params_checked,
            max_error,
            worst_parameter: worst,
            passed,
        });
    }
    let passed = modes.iter().all(|m| m.passed);
    Ok(GradCheckReport {
        tolerance: opts.tolerance,
        modes,
        max_error: overall_max,
        worst_parameter: overall_worst,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes_for_every_mode() {
        let opts = GradCheckOptions {
            trials: 2,
            ..Default::default()
        };
        let report = run_gradcheck(&opts).unwrap();
        assert!(report.passed, "{report}");
    }

    #[test]
    fn corrupted_gradient_fails() {
        let opts = GradCheckOptions {
            trials: 1,
            modes: vec![TableMode::Base],
            corrupt: true,
            ..Default::default()
        };
        let report = run_gradcheck(&opts).unwrap();
        assert!(!report.passed);
    }

    #[test]
    fn report_text_is_deterministic() {
        let opts = GradCheckOptions {
            trials: 1,
            modes: vec![TableMode::Vm],
            ..Default::default()
        };
        let a = run_gradcheck(&opts).unwrap().to_string();
        let b = run_gradcheck(&opts).unwrap().to_string();
        assert_eq!(a, b);
    }
}
