use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use evdet::autodiff::Checkpoint;
use evdet::backbone::{HeadKind, Model};
use evdet::evaluator::{
    center_duration_errors, curve_from, match_events, precision_at_recall, prf, threshold_grid, Counts, PrCurve,
};
use evdet::io::{read_annotations, read_records, write_annotations, write_record};
use evdet::protocol::{run_protocol, Approach};
use evdet::simgen::{generate, Source, Split};
use evdet::trainer::{make_windows, predict, train_epoch_baseline, train_event, PredictConfig};
use evdet::EventList;
use serde_json::{json, Value};

use crate::config::RunConfig;

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_records(dir: &Path) -> Result<Vec<evdet::SignalRecord>> {
    let records = read_records(dir)?;
    if records.is_empty() {
        bail!("no records found in {}", dir.display());
    }
    Ok(records)
}

pub fn simulate(cfg: &RunConfig, split: Split, background: Option<&Path>, out: &Path) -> Result<Value> {
    ensure_dir(out)?;
    let backgrounds = background.map(load_records).transpose()?;
    let source = match &backgrounds {
        Some(b) => Source::Files(b),
        None => Source::Synthetic,
    };
    let dataset = generate(&cfg.sim, split, &source)?;
    let mut listing = Vec::with_capacity(dataset.records.len());
    for rec in &dataset.records {
        write_record(out, rec)?;
        listing.push(json!({ "id": rec.id(), "n_samples": rec.len(), "n_events": rec.annotations().len() }));
    }
    log::info!("wrote {} records with {} events to {}", listing.len(), dataset.n_annotations(), out.display());
    Ok(json!({
        "split": split.name(),
        "n_records": listing.len(),
        "n_annotations": dataset.n_annotations(),
        "records": listing,
    }))
}

pub fn train(cfg: &RunConfig, scheme: Approach, data: &Path, out: &Path) -> Result<Value> {
    ensure_dir(out)?;
    let records = load_records(data)?;
    let windows = make_windows(&records, cfg.train.window_s, cfg.train.stride_s, cfg.train.backbone.output_stride())?;
    log::info!("training {scheme} model on {} windows from {} records", windows.len(), records.len());
    let outcome = match scheme {
        Approach::Event => train_event(&windows, &cfg.train)?,
        _ => train_epoch_baseline(&windows, &cfg.train)?,
    };
    let ckpt_path = out.join("model.ckpt");
    outcome.checkpoint(&cfg.train)?.write(&ckpt_path)?;
    let trace_path = out.join("loss_trace.csv");
    outcome.trace.write_csv(&trace_path)?;
    let config_path = out.join("config.json");
    crate::manifest::write_json(&config_path, cfg)?;
    Ok(json!({
        "head": if scheme == Approach::Event { "event" } else { "epoch" },
        "n_windows": windows.len(),
        "n_parameters": outcome.model.n_parameters(),
        "final_epoch_loss": outcome.trace.epochs.last(),
        "checkpoint": ckpt_path,
        "loss_trace": trace_path,
        "config": config_path,
    }))
}

pub fn predict_cmd(cfg: &RunConfig, model_path: &Path, data: &Path, out: &Path) -> Result<Value> {
    ensure_dir(out)?;
    let ckpt = Checkpoint::read(model_path)?;
    let model = Model::from_checkpoint(&ckpt)?;
    let head = model.config().head;
    let scheme = cfg.predict.scheme.unwrap_or(match head {
        HeadKind::Event => Approach::Event,
        HeadKind::Epoch => Approach::EpochNone,
    });
    let pc = match scheme.scheme() {
        None => PredictConfig::Event(cfg.decode),
        Some(s) => PredictConfig::Epoch { scheme: s, threshold: cfg.predict.epoch_threshold, postproc: cfg.postproc },
    };
    let records = load_records(data)?;
    let predictions =
        predict(&model, &records, &pc).with_context(|| format!("scheme {scheme} on a model with a {head:?} head"))?;
    let mut listing = Vec::with_capacity(records.len());
    for (rec, events) in records.iter().zip(&predictions) {
        let path = out.join(format!("{}.events.json", rec.id()));
        write_annotations(&path, events, true)?;
        listing.push(json!({ "id": rec.id(), "n_events": events.len() }));
    }
    Ok(json!({ "scheme": scheme, "model": model_path, "records": listing }))
}

/// Prediction/truth pairs: two annotation files, or two directories whose
/// `*.events.json` files are paired by name (a missing prediction file means
/// no predictions for that record).
fn annotation_pairs(pred: &Path, truth: &Path) -> Result<Vec<(String, EventList, EventList)>> {
    if truth.is_file() {
        return Ok(vec![(truth.display().to_string(), read_annotations(pred)?, read_annotations(truth)?)]);
    }
    let mut names: Vec<String> = fs::read_dir(truth)
        .with_context(|| format!("reading {}", truth.display()))?
        .filter_map(|e| e.ok()?.file_name().into_string().ok())
        .filter(|n| n.ends_with(".events.json"))
        .collect();
    names.sort();
    if names.is_empty() {
        bail!("no *.events.json annotation files in {}", truth.display());
    }
    if !pred.is_dir() {
        bail!("{} must be a directory when the truths are a directory", pred.display());
    }
    names
        .into_iter()
        .map(|n| {
            let p: PathBuf = pred.join(&n);
            let preds = if p.exists() { read_annotations(&p)? } else { EventList::empty() };
            Ok((n.clone(), preds, read_annotations(&truth.join(&n))?))
        })
        .collect()
}

pub fn evaluate(cfg: &RunConfig, pred: &Path, truth: &Path, out: &Path) -> Result<Value> {
    ensure_dir(out)?;
    let tau = cfg.evaluate.iou_threshold;
    let pairs = annotation_pairs(pred, truth)?;
    let mut counts = Counts::default();
    let mut sub_threshold = 0;
    let mut fp_no_overlap = 0;
    let mut center_offsets = Vec::new();
    let mut duration_errors = Vec::new();
    for (_, p, t) in &pairs {
        let report = match_events(p, t, tau)?;
        counts += report.counts();
        sub_threshold += report.sub_threshold_overlap;
        fp_no_overlap += report.fp_no_overlap;
        let errs = center_duration_errors(&report, p, t)?;
        center_offsets.extend(errs.center_offsets);
        duration_errors.extend(errs.duration_errors);
    }
    let scores = prf(counts);
    let curve: PrCurve = curve_from(&threshold_grid(cfg.evaluate.grid_points), tau, |th| {
        Ok(pairs.iter().map(|(_, p, t)| (p.above(th), t.clone())).collect())
    })?;
    let curve_path = out.join("pr_curve.csv");
    curve.write_csv(&curve_path)?;
    let at_recall: Vec<Value> = cfg
        .evaluate
        .recall_levels
        .iter()
        .zip(precision_at_recall(&curve, &cfg.evaluate.recall_levels))
        .map(|(r, p)| json!({ "recall": r, "precision": p }))
        .collect();
    let metrics = json!({
        "iou_threshold": tau,
        "n_records": pairs.len(),
        "tp": counts.tp,
        "fp": counts.fp,
        "fn": counts.fn_,
        "precision": scores.precision,
        "recall": scores.recall,
        "f1": scores.f1,
        "sub_threshold_overlap": sub_threshold,
        "fp_no_overlap": fp_no_overlap,
        "center_offsets": center_offsets,
        "duration_errors": duration_errors,
        "center_summary": evdet::evaluator::summarize(&center_offsets),
        "duration_summary": evdet::evaluator::summarize(&duration_errors),
        "precision_at_recall": at_recall,
        "best_operating_point": curve.best(),
    });
    let metrics_path = out.join("metrics.json");
    crate::manifest::write_json(&metrics_path, &metrics)?;
    Ok(json!({ "metrics": metrics_path, "pr_curve": curve_path, "f1": scores.f1 }))
}

pub fn sweep(cfg: &RunConfig, out: &Path) -> Result<Value> {
    ensure_dir(out)?;
    let result = run_protocol(&cfg.protocol())?;
    let results_path = out.join("results.csv");
    result.write_csv(&results_path)?;
    let mut curves = Vec::new();
    for (approach, curve) in &result.curves {
        let path = out.join(format!("pr_{approach}_iou{}.csv", curve.iou_threshold));
        curve.write_csv(&path)?;
        curves.push(path);
    }
    let (event_trace, epoch_trace) = result.traces();
    event_trace.write_csv(&out.join("loss_trace_event.csv"))?;
    epoch_trace.write_csv(&out.join("loss_trace_epoch.csv"))?;
    for row in &result.rows {
        log::info!(
            "IoU {:.2} {:<13} best F1 {:.4} at threshold {:.2}",
            row.iou_threshold,
            row.approach,
            row.best_f1,
            row.best_threshold
        );
    }
    Ok(json!({ "results": results_path, "rows": result.rows, "curves": curves }))
}
