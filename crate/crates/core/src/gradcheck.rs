//! Analytic-vs-finite-difference gradient verification of the full model.

use std::fmt;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::membership::mf_region;
use crate::params::Parameters;
use crate::training::{batch_loss_and_grad, l2_loss};
use crate::transformer::{model_forward, model_forward_traced, ModelConfig, ModelParams};

pub const FD_STEP: f64 = 1e-6;
/// Denominator floor of the relative error; keeps finite-difference
/// round-off (about 1e-10 at this step) from dominating near-zero gradients.
pub const REL_FLOOR: f64 = 1e-4;
const BATCH: usize = 4;

/// Parameter families reported separately.
pub const GROUPS: [&str; 9] = [
    "embedding",
    "qkv_projection",
    "mf_centers",
    "mf_widths",
    "consequents",
    "layer_norm",
    "ffn",
    "projection",
    "other",
];

/// Family of a tensor name produced by `ModelParams::tensors`.
pub fn param_group(name: &str) -> &'static str {
    if name.starts_with("embedding") {
        "embedding"
    } else if name.starts_with("projection") {
        "projection"
    } else if name.contains(".query.") || name.contains(".key.") || name.contains(".value.") {
        "qkv_projection"
    } else if name.contains(".fis.consequents") {
        "consequents"
    } else if name.contains("_mf.center") {
        "mf_centers"
    } else if name.contains("_mf.") {
        "mf_widths"
    } else if name.contains(".norm") {
        "layer_norm"
    } else if name.contains(".ffn_") {
        "ffn"
    } else {
        "other"
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub group: String,
    pub checked: usize,
    /// Samples dropped because the perturbation crossed an MF breakpoint.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub groups: Vec<GroupReport>,
    pub tolerance: f64,
    pub loss: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_error < self.tolerance)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn group(&self, name: &str) -> Option<&GroupReport> {
        self.groups.iter().find(|g| g.group == name)
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<16} {:>8} {:>8} {:>14}  worst parameter",
            "group", "checked", "skipped", "max rel err"
        )?;
        for g in &self.groups {
            writeln!(
                f,
                "{:<16} {:>8} {:>8} {:>14.3e}  {}",
                g.group, g.checked, g.skipped, g.max_rel_error, g.worst_param
            )?;
        }
        write!(
            f,
            "tolerance {:.1e}: {}",
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// Region codes of every piecewise-linear membership evaluation; equal
/// signatures on both sides of a perturbation mean no kink was crossed.
fn kink_signature(
    params: &ModelParams,
    cfg: &ModelConfig,
    batch: &[(Array2<f64>, Array2<f64>)],
) -> Result<Vec<u8>> {
    let mut sig = Vec::new();
    if !cfg.mf_kind.is_piecewise_linear() {
        return Ok(sig);
    }
    for (x, _) in batch {
        let (_, trace) = model_forward_traced(params, cfg, x.view(), None)?;
        for (bt, block) in trace.blocks.iter().zip(&params.blocks) {
            let (Some(t), Some(fis)) = (bt.fis(), &block.fis) else {
                continue;
            };
            for ((i, j, r), _) in t.mu_q.indexed_iter() {
                let qi = fis.q_bank.token_row(i);
                let ki = fis.k_bank.token_row(i);
                sig.push(mf_region(
                    cfg.mf_kind,
                    t.q[[i, j]],
                    &fis.q_bank.raw_at(qi, j, r),
                ));
                sig.push(mf_region(
                    cfg.mf_kind,
                    t.k[[i, j]],
                    &fis.k_bank.raw_at(ki, j, r),
                ));
            }
        }
    }
    Ok(sig)
}

fn batch_loss(
    params: &ModelParams,
    cfg: &ModelConfig,
    batch: &[(Array2<f64>, Array2<f64>)],
) -> Result<f64> {
    let mut total = 0.0;
    for (x, y) in batch {
        total += l2_loss(model_forward(params, cfg, x.view())?.view(), y.view())?;
    }
    Ok(total / batch.len() as f64)
}

/// Random standard-normal batch shaped for `cfg`.
pub fn random_batch(cfg: &ModelConfig, size: usize, seed: u64) -> Vec<(Array2<f64>, Array2<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..size)
        .map(|_| {
            let x = Array2::from_shape_fn((cfg.lookback, cfg.n_variates), |_| {
                StandardNormal.sample(&mut rng)
            });
            let y = Array2::from_shape_fn((cfg.horizon, cfg.n_variates), |_| {
                StandardNormal.sample(&mut rng)
            });
            (x, y)
        })
        .collect()
}

/// Seeded model and random batch, then [`grad_check_with`].
pub fn grad_check(
    cfg: &ModelConfig,
    seed: u64,
    n_params_sampled: usize,
    tolerance: f64,
) -> Result<GradReport> {
    let params = ModelParams::init(cfg, seed)?;
    let batch = random_batch(cfg, BATCH, seed.wrapping_add(1));
    grad_check_with(&params, cfg, &batch, n_params_sampled, tolerance, seed)
}

/// Samples about `n_params_sampled` scalars spread evenly over the parameter
/// groups (uniform within each group) and compares the analytic gradient of
/// the mean L2 loss with a central difference.
pub fn grad_check_with(
    params: &ModelParams,
    cfg: &ModelConfig,
    batch: &[(Array2<f64>, Array2<f64>)],
    n_params_sampled: usize,
    tolerance: f64,
    seed: u64,
) -> Result<GradReport> {
    if cfg.dropout > 0.0 {
        return Err(Error::Config("gradient check requires dropout = 0".into()));
    }
    let views: Vec<_> = batch.iter().map(|(x, y)| (x.view(), y.view())).collect();
    let (loss, grad) = batch_loss_and_grad(params, cfg, &views, None)?;
    let grad_tensors = grad.tensors();
    let names: Vec<(String, usize)> = params
        .tensors()
        .iter()
        .map(|(n, t)| (n.clone(), t.len()))
        .collect();

    let present: Vec<&str> = GROUPS
        .iter()
        .copied()
        .filter(|g| names.iter().any(|(n, _)| param_group(n) == *g))
        .collect();
    let per_group = n_params_sampled.div_ceil(present.len().max(1)).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164);
    let mut reports = Vec::new();

    for group in present {
        let members: Vec<usize> = (0..names.len())
            .filter(|&t| param_group(&names[t].0) == group)
            .collect();
        let total: usize = members.iter().map(|&t| names[t].1).sum();
        let mut report = GroupReport {
            group: group.to_string(),
            checked: 0,
            skipped: 0,
            max_rel_error: 0.0,
            worst_param: String::new(),
        };
        let mut attempts = 0;
        while report.checked < per_group.min(total) && attempts < 20 * per_group {
            attempts += 1;
            let mut flat = rng.random_range(0..total);
            let mut tensor = members[0];
            for &t in &members {
                if flat < names[t].1 {
                    tensor = t;
                    break;
                }
                flat -= names[t].1;
            }
            let mut plus = params.clone();
            let mut minus = params.clone();
            *plus.tensors_mut()[tensor]
                .1
                .iter_mut()
                .nth(flat)
                .expect("in range") += FD_STEP;
            *minus.tensors_mut()[tensor]
                .1
                .iter_mut()
                .nth(flat)
                .expect("in range") -= FD_STEP;
            if kink_signature(&plus, cfg, batch)? != kink_signature(&minus, cfg, batch)? {
                report.skipped += 1;
                continue;
            }
            let numeric = (batch_loss(&plus, cfg, batch)? - batch_loss(&minus, cfg, batch)?)
                / (2.0 * FD_STEP);
            let analytic = *grad_tensors[tensor].1.iter().nth(flat).expect("in range");
            let err = relative_error(analytic, numeric);
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = format!("{}[{flat}]", names[tensor].0);
            }
            report.checked += 1;
        }
        reports.push(report);
    }
    Ok(GradReport {
        groups: reports,
        tolerance,
        loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::membership::MfKind;
    use crate::transformer::Interaction;

    fn desk(kind: MfKind) -> ModelConfig {
        let mut cfg = ModelConfig::new(3, 16, 4).with_width(8);
        cfg.mf_kind = kind;
        cfg
    }

    #[test]
    fn group_names() {
        assert_eq!(param_group("embedding.weight"), "embedding");
        assert_eq!(param_group("blocks.0.value.bias"), "qkv_projection");
        assert_eq!(param_group("blocks.1.fis.k_mf.center"), "mf_centers");
        assert_eq!(param_group("blocks.1.fis.q_mf.top_width"), "mf_widths");
        assert_eq!(param_group("blocks.1.fis.consequents"), "consequents");
        assert_eq!(param_group("blocks.0.norm2.gain"), "layer_norm");
        assert_eq!(param_group("blocks.0.ffn_out.weight"), "ffn");
        assert_eq!(param_group("projection.bias"), "projection");
    }

    #[test]
    fn every_group_is_covered_and_passes() {
        let report = grad_check(&desk(MfKind::Gaussian), 3, 160, 1e-4).unwrap();
        for g in &GROUPS[..8] {
            let r = report.group(g).unwrap_or_else(|| panic!("missing {g}"));
            assert!(r.checked > 0, "{g}");
        }
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn attention_model_has_no_fuzzy_groups() {
        let mut cfg = desk(MfKind::Gaussian);
        cfg.interaction = Interaction::SelfAttention;
        let report = grad_check(&cfg, 3, 60, 1e-4).unwrap();
        assert!(report.group("mf_centers").is_none());
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn zero_residual_gives_zero_gradients() {
        let cfg = desk(MfKind::Trapezoidal);
        let params = ModelParams::init(&cfg, 4).unwrap();
        let batch: Vec<_> = random_batch(&cfg, 3, 5)
            .into_iter()
            .map(|(x, _)| {
                let y = model_forward(&params, &cfg, x.view()).unwrap();
                (x, y)
            })
            .collect();
        let report = grad_check_with(&params, &cfg, &batch, 80, 1e-4, 0).unwrap();
        assert_eq!(report.loss, 0.0);
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn dropout_is_rejected() {
        let mut cfg = desk(MfKind::Gaussian);
        cfg.dropout = 0.1;
        assert!(grad_check(&cfg, 0, 10, 1e-4).is_err());
    }
}
