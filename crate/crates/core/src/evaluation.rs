//! Metrics, the persistence baseline, the interaction ablation, the
//! membership-function sweep and the token-scaling benchmark.

use std::fmt;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attention::self_attention;
use crate::data::{Normalizer, WindowSet};
use crate::error::{Error, Result};
use crate::fis::{fis_forward, FisParams, DEFAULT_EPSILON};
use crate::membership::MfKind;
use crate::training::{train, TrainConfig, TrainHistory};
use crate::transformer::{model_forward, Interaction, ModelConfig, ModelParams};

fn check_pair(pred: &ArrayView2<'_, f64>, truth: &ArrayView2<'_, f64>) -> Result<()> {
    if pred.dim() != truth.dim() {
        return Err(Error::shape("metric", truth.shape(), pred.shape()));
    }
    if pred.is_empty() {
        return Err(Error::Empty("metric input"));
    }
    Ok(())
}

pub fn mse(pred: ArrayView2<'_, f64>, truth: ArrayView2<'_, f64>) -> Result<f64> {
    check_pair(&pred, &truth)?;
    let s: f64 = pred
        .iter()
        .zip(truth.iter())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(s / pred.len() as f64)
}

pub fn mae(pred: ArrayView2<'_, f64>, truth: ArrayView2<'_, f64>) -> Result<f64> {
    check_pair(&pred, &truth)?;
    let s: f64 = pred
        .iter()
        .zip(truth.iter())
        .map(|(p, t)| (p - t).abs())
        .sum();
    Ok(s / pred.len() as f64)
}

/// Repeats the last observed row for `horizon` steps.
pub fn persistence_baseline(input: ArrayView2<'_, f64>, horizon: usize) -> Result<Array2<f64>> {
    if input.nrows() == 0 {
        return Err(Error::Empty("persistence input"));
    }
    let last = input.row(input.nrows() - 1);
    Ok(Array2::from_shape_fn((horizon, input.ncols()), |(_, j)| {
        last[j]
    }))
}

/// Whether metrics are computed on z-scored or original units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricScale {
    Normalized,
    Denormalized,
}

impl fmt::Display for MetricScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricScale::Normalized => "normalized",
            MetricScale::Denormalized => "denormalized",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub mse: f64,
    pub mae: f64,
    pub horizon: usize,
    pub dataset: String,
    pub interaction: Interaction,
    pub mf_kind: MfKind,
    pub scale: MetricScale,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "dataset,horizon,interaction,mf_kind,scale,mse,mae";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.17e},{:.17e}",
            self.dataset,
            self.horizon,
            self.interaction,
            self.mf_kind,
            self.scale,
            self.mse,
            self.mae
        )
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} horizon {} [{} / {}, {}]: MSE {:.6} MAE {:.6}",
            self.dataset,
            self.horizon,
            self.interaction,
            self.mf_kind,
            self.scale,
            self.mse,
            self.mae
        )
    }
}

/// Sums of squared and absolute errors plus the element count, accumulated
/// in window order.
fn error_sums<F>(windows: &WindowSet, predict: F) -> Result<(f64, f64, usize)>
where
    F: Fn(&crate::data::Window) -> Result<(Array2<f64>, Array2<f64>)> + Sync,
{
    if windows.is_empty() {
        return Err(Error::Empty("evaluation windows"));
    }
    let parts: Vec<Result<(f64, f64, usize)>> = windows
        .windows
        .par_iter()
        .map(|w| {
            let (pred, truth) = predict(w)?;
            check_pair(&pred.view(), &truth.view())?;
            let mut sq = 0.0;
            let mut ab = 0.0;
            for (p, t) in pred.iter().zip(truth.iter()) {
                sq += (p - t) * (p - t);
                ab += (p - t).abs();
            }
            Ok((sq, ab, pred.len()))
        })
        .collect();
    let mut total = (0.0, 0.0, 0usize);
    for p in parts {
        let (sq, ab, n) = p?;
        total.0 += sq;
        total.1 += ab;
        total.2 += n;
    }
    Ok(total)
}

/// `(MSE, MAE)` of the model over every window, on the windows' own scale.
pub fn evaluate_windows(
    params: &ModelParams,
    cfg: &ModelConfig,
    windows: &WindowSet,
) -> Result<(f64, f64)> {
    let (sq, ab, n) = error_sums(windows, |w| {
        Ok((
            model_forward(params, cfg, w.input.view())?,
            w.target.clone(),
        ))
    })?;
    Ok((sq / n as f64, ab / n as f64))
}

/// Metrics on the requested scale. `Denormalized` needs the normalizer the
/// windows were produced with.
pub fn evaluate_report(
    params: &ModelParams,
    cfg: &ModelConfig,
    windows: &WindowSet,
    dataset: &str,
    scale: MetricScale,
    normalizer: Option<&Normalizer>,
) -> Result<MetricReport> {
    let (sq, ab, n) = match scale {
        MetricScale::Normalized => error_sums(windows, |w| {
            Ok((
                model_forward(params, cfg, w.input.view())?,
                w.target.clone(),
            ))
        })?,
        MetricScale::Denormalized => {
            let norm = normalizer.ok_or_else(|| {
                Error::Config("denormalized metrics need the fitted normalizer".into())
            })?;
            error_sums(windows, |w| {
                let pred = model_forward(params, cfg, w.input.view())?;
                Ok((norm.invert(pred.view())?, norm.invert(w.target.view())?))
            })?
        }
    };
    Ok(MetricReport {
        mse: sq / n as f64,
        mae: ab / n as f64,
        horizon: cfg.horizon,
        dataset: dataset.to_string(),
        interaction: cfg.interaction,
        mf_kind: cfg.mf_kind,
        scale,
    })
}

/// `(MSE, MAE)` of [`persistence_baseline`] over every window.
pub fn persistence_metrics(windows: &WindowSet) -> Result<(f64, f64)> {
    let horizon = windows.horizon;
    let (sq, ab, n) = error_sums(windows, |w| {
        Ok((
            persistence_baseline(w.input.view(), horizon)?,
            w.target.clone(),
        ))
    })?;
    Ok((sq / n as f64, ab / n as f64))
}

/// Windows for one experiment, already normalized with `normalizer`.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub label: String,
    pub train: WindowSet,
    pub val: WindowSet,
    pub test: WindowSet,
    pub normalizer: Normalizer,
}

/// Relative improvement of `fis` over `base` in percent; positive means the
/// FIS arm has lower error.
pub fn promotion(base: f64, fis: f64) -> f64 {
    if base == 0.0 {
        0.0
    } else {
        (base - fis) / base * 100.0
    }
}

#[derive(Debug, Clone)]
pub struct ArmResult {
    pub report: MetricReport,
    pub history: TrainHistory,
    pub params: ModelParams,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub self_attention: ArmResult,
    pub fis: ArmResult,
    pub promotion_mse: f64,
    pub promotion_mae: f64,
}

impl AblationReport {
    pub const CSV_HEADER: &'static str =
        "dataset,horizon,scale,sa_mse,sa_mae,fis_mse,fis_mae,promotion_mse_pct,promotion_mae_pct,batch_hash";

    pub fn to_csv(&self) -> String {
        let (a, f) = (&self.self_attention.report, &self.fis.report);
        format!(
            "{}\n{},{},{},{:.6},{:.6},{:.6},{:.6},{:.2},{:.2},{}\n",
            Self::CSV_HEADER,
            a.dataset,
            a.horizon,
            a.scale,
            a.mse,
            a.mae,
            f.mse,
            f.mae,
            self.promotion_mse,
            self.promotion_mae,
            self.fis.history.batch_hash
        )
    }
}

impl fmt::Display for AblationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (a, b) = (&self.self_attention.report, &self.fis.report);
        writeln!(
            f,
            "{:<12} {:>7} | {:^19} | {:^19} | {:^19}",
            "", "", "w/Self-Attention", "w/FIS Interaction", "Promotion"
        )?;
        writeln!(
            f,
            "{:<12} {:>7} | {:>9} {:>9} | {:>9} {:>9} | {:>9} {:>9}",
            "Dataset", "Horizon", "MSE", "MAE", "MSE", "MAE", "MSE", "MAE"
        )?;
        write!(
            f,
            "{:<12} {:>7} | {:>9.3} {:>9.3} | {:>9.3} {:>9.3} | {:>8.1}% {:>8.1}%",
            a.dataset,
            a.horizon,
            a.mse,
            a.mae,
            b.mse,
            b.mae,
            self.promotion_mse,
            self.promotion_mae
        )
    }
}

fn train_arm(
    data: &ExperimentData,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    scale: MetricScale,
) -> Result<ArmResult> {
    let outcome = train(cfg, tc, &data.train, &data.val)?;
    let report = evaluate_report(
        &outcome.params,
        cfg,
        &data.test,
        &data.label,
        scale,
        Some(&data.normalizer),
    )?;
    if !report.mse.is_finite() || !report.mae.is_finite() {
        return Err(Error::NonFinite {
            epoch: tc.epochs,
            step: 0,
            loss: report.mse,
        });
    }
    Ok(ArmResult {
        report,
        history: outcome.history,
        params: outcome.params,
    })
}

/// Trains the self-attention and FIS variants with identical seed, data and
/// settings and compares their test metrics.
pub fn ablation_run(
    data: &ExperimentData,
    shared: &ModelConfig,
    tc: &TrainConfig,
    scale: MetricScale,
) -> Result<AblationReport> {
    let mut sa_cfg = shared.clone();
    sa_cfg.interaction = Interaction::SelfAttention;
    let mut fis_cfg = shared.clone();
    fis_cfg.interaction = Interaction::Fis;
    let sa = train_arm(data, &sa_cfg, tc, scale)?;
    let fis = train_arm(data, &fis_cfg, tc, scale)?;
    if sa.history.batch_hash != fis.history.batch_hash {
        return Err(Error::Config(format!(
            "ablation arms saw different batch streams ({} vs {})",
            sa.history.batch_hash, fis.history.batch_hash
        )));
    }
    Ok(AblationReport {
        promotion_mse: promotion(sa.report.mse, fis.report.mse),
        promotion_mae: promotion(sa.report.mae, fis.report.mae),
        self_attention: sa,
        fis,
    })
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub reports: Vec<MetricReport>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(MetricReport::CSV_HEADER);
        out.push('\n');
        for r in &self.reports {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for SweepReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<12} {:>7} {:<6}", "Dataset", "Horizon", "Metric")?;
        for r in &self.reports {
            let name = r.mf_kind.name();
            let mut title = name[..1].to_uppercase();
            title.push_str(&name[1..]);
            write!(f, " {title:>12}")?;
        }
        let Some(first) = self.reports.first() else {
            return Ok(());
        };
        for (metric, pick) in [("MSE", 0usize), ("MAE", 1)] {
            write!(
                f,
                "\n{:<12} {:>7} {:<6}",
                first.dataset, first.horizon, metric
            )?;
            for r in &self.reports {
                let v = if pick == 0 { r.mse } else { r.mae };
                write!(f, " {v:>12.3}")?;
            }
        }
        Ok(())
    }
}

/// Trains one FIS model per membership-function kind with everything else fixed.
pub fn mf_sweep(
    data: &ExperimentData,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    scale: MetricScale,
) -> Result<SweepReport> {
    let mut reports = Vec::new();
    for kind in MfKind::ALL {
        let mut c = cfg.clone();
        c.interaction = Interaction::Fis;
        c.mf_kind = kind;
        reports.push(train_arm(data, &c, tc, scale)?.report);
    }
    Ok(SweepReport { reports })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kernel {
    Fis,
    SelfAttention,
}

impl Kernel {
    pub fn name(self) -> &'static str {
        match self {
            Kernel::Fis => "fis_interaction",
            Kernel::SelfAttention => "self_attention",
        }
    }

    pub fn complexity(self) -> &'static str {
        match self {
            Kernel::Fis => "O(T*d*R)",
            Kernel::SelfAttention => "O(T^2*d)",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingRow {
    pub kernel: Kernel,
    pub tokens: usize,
    pub median_secs: f64,
    pub mean_secs: f64,
    pub std_secs: f64,
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingReport {
    pub d: usize,
    pub rules: usize,
    pub rows: Vec<ScalingRow>,
}

impl ScalingReport {
    pub const CSV_HEADER: &'static str =
        "kernel,tokens,d,rules,repeats,median_seconds,mean_seconds,std_seconds";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{:.9e},{:.9e},{:.9e}\n",
                r.kernel.name(),
                r.tokens,
                self.d,
                self.rules,
                r.repeats,
                r.median_secs,
                r.mean_secs,
                r.std_secs
            ));
        }
        out
    }

    pub fn median(&self, kernel: Kernel, tokens: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.kernel == kernel && r.tokens == tokens)
            .map(|r| r.median_secs)
    }

    /// `time(large) / time(small)` on medians.
    pub fn ratio(&self, kernel: Kernel, small: usize, large: usize) -> Option<f64> {
        Some(self.median(kernel, large)? / self.median(kernel, small)?)
    }
}

impl fmt::Display for ScalingReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<16} {:<10} {:>6} {:>12} {:>12} {:>12}",
            "Method", "Complexity", "T", "median ms", "mean ms", "std ms"
        )?;
        for (i, r) in self.rows.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(
                f,
                "{:<16} {:<10} {:>6} {:>12.4} {:>12.4} {:>12.4}",
                r.kernel.name(),
                r.kernel.complexity(),
                r.tokens,
                r.median_secs * 1e3,
                r.mean_secs * 1e3,
                r.std_secs * 1e3
            )?;
        }
        Ok(())
    }
}

/// Minimum wall time of one timed repeat; fast kernels are looped to reach it.
const MIN_REPEAT_SECS: f64 = 2e-3;

fn time_kernel(repeats: usize, mut run: impl FnMut()) -> (f64, f64, f64) {
    // warmup, also sizes the inner loop
    let t0 = Instant::now();
    run();
    let once = t0.elapsed().as_secs_f64().max(1e-9);
    let inner = ((MIN_REPEAT_SECS / once).ceil() as usize).clamp(1, 10_000);
    let mut samples: Vec<f64> = (0..repeats)
        .map(|_| {
            let t = Instant::now();
            for _ in 0..inner {
                run();
            }
            t.elapsed().as_secs_f64() / inner as f64
        })
        .collect();
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / samples.len() as f64;
    samples.sort_by(|a, b| a.total_cmp(b));
    let mid = samples.len() / 2;
    let median = if samples.len() % 2 == 1 {
        samples[mid]
    } else {
        0.5 * (samples[mid - 1] + samples[mid])
    };
    (median, mean, var.sqrt())
}

/// Times the forward pass of both kernels at each token count. Runs on the
/// calling thread only.
pub fn bench_scaling(
    token_counts: &[usize],
    d: usize,
    rules: usize,
    repeats: usize,
    seed: u64,
) -> Result<ScalingReport> {
    if repeats == 0 || d == 0 || rules == 0 {
        return Err(Error::Config(
            "bench needs positive repeats, d and rules".into(),
        ));
    }
    let mut rows = Vec::new();
    for kernel in [Kernel::Fis, Kernel::SelfAttention] {
        for &t in token_counts {
            if t == 0 {
                return Err(Error::Config("token counts must be positive".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ t as u64);
            let mut m = || Array2::from_shape_fn((t, d), |_| rng.random_range(-1.0..1.0));
            let (q, k, v) = (m(), m(), m());
            let (median, mean, std) = match kernel {
                Kernel::Fis => {
                    let params =
                        FisParams::init(MfKind::Gaussian, t, d, rules, DEFAULT_EPSILON, seed)?;
                    time_kernel(repeats, || {
                        let out = fis_forward(q.view(), k.view(), v.view(), &params, false)
                            .expect("shapes fixed");
                        std::hint::black_box(out);
                    })
                }
                Kernel::SelfAttention => time_kernel(repeats, || {
                    let out =
                        self_attention(q.view(), k.view(), v.view(), false).expect("shapes fixed");
                    std::hint::black_box(out);
                }),
            };
            rows.push(ScalingRow {
                kernel,
                tokens: t,
                median_secs: median,
                mean_secs: mean,
                std_secs: std,
                repeats,
            });
        }
    }
    Ok(ScalingReport { d, rules, rows })
}
