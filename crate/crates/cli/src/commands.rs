//! One function per subcommand. Each returns the text to print; files go to
//! the output directory.

use std::fmt::Write as _;
use std::path::Path;

use fisformer::data::{
    chronological_split, load_csv, make_windows, synth_sinusoid, Normalizer, RawSeries, SplitSpec,
};
use fisformer::evaluation::{
    ablation_run, bench_scaling, evaluate_report, mf_sweep, ExperimentData, MetricReport,
};
use fisformer::gradcheck::grad_check;
use fisformer::params::Parameters;
use fisformer::training::{train, TrainHistory};
use fisformer::transformer::{
    model_forward, model_forward_traced, Interaction, ModelConfig, ModelParams,
};
use ndarray::{Array2, Array3, Axis};
use serde_json::json;

use crate::checkpoint;
use crate::config::{Ablation, DateColumn, RunConfig, Split};
use crate::error::{CliError, CliResult};

pub const CHECKPOINT_FILE: &str = "model.fisf";
pub const HISTORY_FILE: &str = "history.csv";

fn has_date_column(path: &Path, setting: DateColumn) -> CliResult<bool> {
    match setting {
        DateColumn::Yes => Ok(true),
        DateColumn::No => Ok(false),
        DateColumn::Auto => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            let first = text
                .lines()
                .next()
                .unwrap_or("")
                .split(',')
                .next()
                .unwrap_or("");
            Ok(first.trim().trim_matches('"').eq_ignore_ascii_case("date"))
        }
    }
}

fn read_csv(path: &Path, setting: DateColumn) -> CliResult<RawSeries> {
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "data file {} does not exist",
            path.display()
        )));
    }
    Ok(load_csv(path, has_date_column(path, setting)?)?)
}

pub fn load_series(run: &RunConfig) -> CliResult<RawSeries> {
    match &run.data_path {
        Some(p) => read_csv(p, run.date_column),
        None => Ok(synth_sinusoid(
            run.synth_vars,
            run.synth_length,
            run.synth_seed,
        )),
    }
}

/// Normalized windows for every split plus the model config they imply.
pub struct Prepared {
    pub data: ExperimentData,
    pub model: ModelConfig,
    pub variate_names: Vec<String>,
}

pub fn prepare(run: &RunConfig) -> CliResult<Prepared> {
    let series = load_series(run)?;
    let spec = if run.train_len == 0 && run.val_len == 0 && run.test_len == 0 {
        SplitSpec::default_for(series.len())
    } else {
        SplitSpec::new(run.train_len, run.val_len, run.test_len)
    };
    spec.check_windows(run.lookback, run.horizon)?;
    let (a, b, c) = chronological_split(&series, spec)?;
    let normalizer = Normalizer::fit(&a)?;
    let windows = |s: &RawSeries, stride| -> CliResult<_> {
        Ok(make_windows(
            &normalizer.apply_series(s)?,
            run.lookback,
            run.horizon,
            stride,
        )?)
    };
    let data = ExperimentData {
        label: run.dataset_label(),
        train: windows(&a, run.stride)?,
        val: windows(&b, 1)?,
        test: windows(&c, 1)?,
        normalizer: normalizer.clone(),
    };
    Ok(Prepared {
        model: run.model_config(series.n_vars())?,
        data,
        variate_names: series.variate_names,
    })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn reports_csv(reports: &[&MetricReport]) -> String {
    let mut out = format!("split,{}\n", MetricReport::CSV_HEADER);
    for (split, r) in ["val", "test"].iter().zip(reports) {
        let _ = writeln!(out, "{split},{}", r.csv_row());
    }
    out
}

/// Trains, then writes the checkpoint, history and resolved config to `out`.
///
/// The reported validation metrics come from the parameters as stored in the
/// checkpoint (rounded to `f32`), so `evaluate` reproduces them.
pub fn cmd_train(run: &RunConfig, out: &Path) -> CliResult<String> {
    let prep = prepare(run)?;
    let tc = run.train_config()?;
    ensure_dir(out)?;
    let outcome = train(&prep.model, &tc, &prep.data.train, &prep.data.val)?;
    let mut params = outcome.params;
    params.round_to_f32();
    let label = &prep.data.label;
    let val = evaluate_report(
        &params,
        &prep.model,
        &prep.data.val,
        label,
        run.metric_scale,
        Some(&prep.data.normalizer),
    )?;
    if !val.mse.is_finite() {
        return Err(fisformer::Error::NonFinite {
            epoch: tc.epochs,
            step: 0,
            loss: val.mse,
        }
        .into());
    }
    checkpoint::save(&out.join(CHECKPOINT_FILE), &prep.model, &params)?;
    write_file(
        &out.join(HISTORY_FILE),
        outcome.history.to_csv(run.log_seconds),
    )?;
    write_file(&out.join("run.cfg"), run.to_string())?;

    let mut text = history_table(&outcome.history);
    let _ = writeln!(
        text,
        "best epoch {} (initial val MSE {:.6})",
        outcome.history.best_epoch, outcome.initial_val_mse
    );
    let _ = writeln!(text, "batch stream sha256 {}", outcome.history.batch_hash);
    let _ = write!(text, "val {val}");
    Ok(text)
}

fn history_table(h: &TrainHistory) -> String {
    let mut s = format!(
        "{:>5} {:>12} {:>12} {:>12} {:>8}\n",
        "epoch", "train_loss", "val_mse", "val_mae", "seconds"
    );
    for r in &h.records {
        let _ = writeln!(
            s,
            "{:>5} {:>12.6} {:>12.6} {:>12.6} {:>8.2}",
            r.epoch, r.train_loss, r.val_mse, r.val_mae, r.seconds
        );
    }
    s
}

fn model_for_checkpoint(run: &RunConfig, path: &Path) -> CliResult<(Prepared, ModelParams)> {
    let prep = prepare(run)?;
    let params = checkpoint::load_matching(path, &prep.model)?;
    Ok((prep, params))
}

pub fn cmd_evaluate(run: &RunConfig, ckpt: &Path, out: Option<&Path>) -> CliResult<String> {
    let (prep, params) = model_for_checkpoint(run, ckpt)?;
    let label = &prep.data.label;
    let norm = Some(&prep.data.normalizer);
    let val = evaluate_report(
        &params,
        &prep.model,
        &prep.data.val,
        label,
        run.metric_scale,
        norm,
    )?;
    let test = evaluate_report(
        &params,
        &prep.model,
        &prep.data.test,
        label,
        run.metric_scale,
        norm,
    )?;
    if !val.mse.is_finite() || !test.mse.is_finite() {
        return Err(CliError::Numerical(
            "evaluation produced non-finite metrics".into(),
        ));
    }
    if let Some(dir) = out {
        ensure_dir(dir)?;
        write_file(&dir.join("metrics.csv"), reports_csv(&[&val, &test]))?;
    }
    Ok(format!("val {val}\ntest {test}"))
}

/// Forecasts the `horizon` steps after the last `lookback` rows of `input`,
/// in the input's units.
pub fn cmd_predict(run: &RunConfig, ckpt: &Path, input: &Path, out: &Path) -> CliResult<String> {
    let (prep, params) = model_for_checkpoint(run, ckpt)?;
    let series = read_csv(input, run.date_column)?;
    let cfg = &prep.model;
    if series.n_vars() != cfg.n_variates {
        return Err(CliError::Usage(format!(
            "{} has {} value columns, the model expects {}",
            input.display(),
            series.n_vars(),
            cfg.n_variates
        )));
    }
    if series.len() < cfg.lookback {
        return Err(CliError::Usage(format!(
            "{} has {} rows, at least lookback = {} are needed",
            input.display(),
            series.len(),
            cfg.lookback
        )));
    }
    let start = series.len() - cfg.lookback;
    let x = prep
        .data
        .normalizer
        .apply(series.values.slice(ndarray::s![start.., ..]))?;
    let forecast = prep
        .data
        .normalizer
        .invert(model_forward(&params, cfg, x.view())?.view())?;
    if forecast.iter().any(|v| !v.is_finite()) {
        return Err(CliError::Numerical(
            "forecast contains non-finite values".into(),
        ));
    }
    ensure_dir(out)?;
    let path = out.join("forecast.csv");
    let mut writer = csv::Writer::from_path(&path)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let csv_err = |e: csv::Error| CliError::Usage(format!("{}: {e}", path.display()));
    writer
        .write_record(&series.variate_names)
        .map_err(csv_err)?;
    for row in forecast.rows() {
        writer
            .write_record(row.iter().map(|v| format!("{v:?}")))
            .map_err(csv_err)?;
    }
    writer.flush().map_err(|e| CliError::io(&path, e))?;
    Ok(format!(
        "wrote {} ({} rows x {} columns)",
        path.display(),
        forecast.nrows(),
        forecast.ncols()
    ))
}

fn n_variates(run: &RunConfig) -> CliResult<usize> {
    match &run.data_path {
        Some(p) => Ok(read_csv(p, run.date_column)?.n_vars()),
        None => Ok(run.synth_vars),
    }
}

/// Always 64-bit and always from a seeded initialization.
pub fn cmd_gradcheck(run: &RunConfig) -> CliResult<String> {
    let base = run.model_config(n_variates(run)?)?;
    let kinds = match base.interaction {
        Interaction::Fis => run.gradcheck_kinds.clone(),
        Interaction::SelfAttention => vec![base.mf_kind],
    };
    let mut text = String::new();
    let mut failed = Vec::new();
    for kind in kinds {
        let mut cfg = base.clone();
        cfg.mf_kind = kind;
        let report = grad_check(
            &cfg,
            run.seed,
            run.gradcheck_samples,
            run.gradcheck_tolerance,
        )?;
        let _ = writeln!(text, "== {} / {} ==\n{report}\n", cfg.interaction, kind);
        if !report.passed() {
            failed.push(format!(
                "{kind}: max relative error {:.3e}",
                report.max_rel_error()
            ));
        }
    }
    if failed.is_empty() {
        Ok(text.trim_end().to_string())
    } else {
        Err(CliError::Numerical(format!(
            "{text}gradient check failed: {}",
            failed.join(", ")
        )))
    }
}

pub fn cmd_bench(run: &RunConfig, out: &Path) -> CliResult<String> {
    let report = bench_scaling(
        &run.bench_tokens,
        run.bench_d,
        run.n_rules,
        run.bench_repeats,
        run.seed,
    )?;
    ensure_dir(out)?;
    write_file(&out.join("scaling.csv"), report.to_csv())?;
    Ok(report.to_string())
}

pub fn cmd_ablate(run: &RunConfig, out: &Path) -> CliResult<String> {
    let prep = prepare(run)?;
    let tc = run.train_config()?;
    ensure_dir(out)?;
    match run.ablation {
        Ablation::Interaction => {
            let rep = ablation_run(&prep.data, &prep.model, &tc, run.metric_scale)?;
            write_file(&out.join("ablation.csv"), rep.to_csv())?;
            write_file(
                &out.join("history_self_attention.csv"),
                rep.self_attention.history.to_csv(run.log_seconds),
            )?;
            write_file(
                &out.join("history_fis.csv"),
                rep.fis.history.to_csv(run.log_seconds),
            )?;
            Ok(format!(
                "{rep}\nmetrics on {} scale; both arms trained on batch stream sha256 {}",
                rep.fis.report.scale, rep.fis.history.batch_hash
            ))
        }
        Ablation::MfKind => {
            let rep = mf_sweep(&prep.data, &prep.model, &tc, run.metric_scale)?;
            write_file(&out.join("mf_sweep.csv"), rep.to_csv())?;
            Ok(rep.to_string())
        }
    }
}

fn nested2(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn nested3(a: &Array3<f64>) -> Vec<Vec<Vec<f64>>> {
    a.outer_iter().map(|m| nested2(&m.to_owned())).collect()
}

/// Dumps the fuzzy-interaction internals of every block for one window.
pub fn cmd_trace(run: &RunConfig, ckpt: &Path, window: usize, out: &Path) -> CliResult<String> {
    let (prep, params) = model_for_checkpoint(run, ckpt)?;
    if prep.model.interaction != Interaction::Fis {
        return Err(CliError::Usage(
            "trace needs a model with interaction = fis".into(),
        ));
    }
    let (split_name, set) = match run.trace_split {
        Split::Train => ("train", &prep.data.train),
        Split::Val => ("val", &prep.data.val),
        Split::Test => ("test", &prep.data.test),
    };
    let w = set.windows.get(window).ok_or_else(|| {
        CliError::Usage(format!(
            "window {window} out of range: the {split_name} split has {} windows",
            set.len()
        ))
    })?;
    let (_, trace) = model_forward_traced(&params, &prep.model, w.input.view(), None)?;

    let mut blocks = Vec::new();
    let mut summary = format!(
        "{:>5} {:>16} {:>20}\n",
        "block", "max sum_r pi~", "max |colsum(A) - 1|"
    );
    for (b, bt) in trace.blocks.iter().enumerate() {
        let Some(t) = bt.fis() else { continue };
        let slice_sums = t.pi_tilde.sum_axis(Axis(2));
        let max_slice = slice_sums.iter().copied().fold(f64::MIN, f64::max);
        let col_dev =
            t.a.sum_axis(Axis(0))
                .iter()
                .map(|s| (s - 1.0).abs())
                .fold(0.0, f64::max);
        let _ = writeln!(summary, "{b:>5} {max_slice:>16.12} {col_dev:>20.3e}");
        blocks.push(json!({
            "block": b,
            "firing_strength": nested3(&t.pi),
            "normalized_firing": nested3(&t.pi_tilde),
            "interaction_map": nested2(&t.f_qk),
            "gate": nested2(&t.a),
            "max_normalized_firing_sum": max_slice,
            "max_gate_column_deviation": col_dev,
        }));
    }
    let doc = json!({
        "dataset": prep.data.label,
        "split": split_name,
        "window": window,
        "window_start": w.start,
        "variates": prep.variate_names,
        "mf_kind": prep.model.mf_kind.name(),
        "rules": prep.model.n_rules,
        "layout": "firing arrays are [token][feature][rule]; maps are [token][feature]",
        "blocks": blocks,
    });
    ensure_dir(out)?;
    let path = out.join("trace.json");
    let body = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Usage(e.to_string()))?;
    write_file(&path, body)?;
    Ok(format!("{summary}wrote {}", path.display()))
}
