//! One function per subcommand. Each reads its inputs through [`Outputs`]
//! so the manifest can hash them, and returns the metrics for the manifest.

use std::path::Path;

use anyhow::{bail, Context, Result};
use liftprune::data::{parse_idx_images, parse_idx_labels, Dataset};
use liftprune::deeplift::{dataset_importances, ImportanceMap};
use liftprune::export::{self, Series};
use liftprune::mpq::{coarse_search, fine_search, CbReport};
use liftprune::profiler::{profile_cost_with, Criteria};
use liftprune::pruner::{
    global_prune, l1_importances, local_prune, mask_from_json, mask_to_json, unstructured_prune, PruneOutcome,
    PruneReport,
};
use liftprune::sensitivity::{profile, SensitivityProfile};
use liftprune::trainer::{evaluate, fine_tune};
use liftprune::wsq::{quantize_weight_sharing, WsqReport};
use liftprune::zoo::{fixture_cnn, residual_cnn};
use liftprune::{Error, Model};
use serde_json::{json, Value};

use crate::config::{Arch, DataSource, PruneMode, RunConfig};
use crate::output::Outputs;

fn load_idx_pair(out: &mut Outputs, images: &Path, labels: &Path) -> Result<(liftprune::Tensor, Vec<usize>)> {
    let x = parse_idx_images(&out.read_input(images)?).with_context(|| images.display().to_string())?;
    let y = parse_idx_labels(&out.read_input(labels)?).with_context(|| labels.display().to_string())?;
    if x.batch() != y.len() {
        return Err(Error::Format {
            offset: 4,
            message: format!("{} images but {} labels", x.batch(), y.len()),
        }
        .into());
    }
    Ok((x, y))
}

/// Train and test splits.
pub fn load_data(cfg: &RunConfig, out: &mut Outputs) -> Result<(Dataset, Dataset)> {
    match &cfg.data.source {
        DataSource::Fixture { spec } => {
            let data = spec.generate()?.shuffled(spec.seed ^ 0x5eed);
            Ok(data.split(cfg.data.train_fraction)?)
        }
        DataSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => {
            let (xa, ya) = load_idx_pair(out, train_images, train_labels)?;
            let (xb, yb) = load_idx_pair(out, test_images, test_labels)?;
            let classes = ya.iter().chain(&yb).max().map_or(0, |m| m + 1);
            Ok((Dataset::new(xa, ya, classes)?, Dataset::new(xb, yb, classes)?))
        }
    }
}

fn load_model(cfg: &RunConfig, out: &mut Outputs) -> Result<Model> {
    let Some(path) = &cfg.model else {
        return Err(Error::InvalidConfig("no input model: pass --model or set `model`".into()).into());
    };
    let bytes = out.read_input(path)?;
    liftprune::net::read_model(bytes.as_slice()).with_context(|| format!("loading {}", path.display()))
}

fn importances(cfg: &RunConfig, model: &Model, train: &Dataset) -> Result<ImportanceMap> {
    Ok(dataset_importances(model, train, &cfg.attribute.reference, cfg.attribute.target)?)
}

fn sensitivity_profile(cfg: &RunConfig, model: &Model, train: &Dataset, imp: &ImportanceMap) -> Result<SensitivityProfile> {
    let sample = cfg.sensitivity.sample(train)?;
    Ok(profile(model, &sample, imp, &cfg.sensitivity)?)
}

fn per_class_row(label: &str, model: &Model, data: &Dataset) -> Result<(String, Vec<Option<f64>>)> {
    Ok((label.to_string(), evaluate(model, data)?.per_class_accuracy))
}

pub fn train(cfg: &RunConfig, out: &mut Outputs) -> Result<Value> {
    let (train, test) = load_data(cfg, out)?;
    let shape = train.item_shape().to_vec();
    let mut model = match cfg.arch.kind {
        Arch::FixtureCnn => fixture_cnn(&shape, train.class_count, cfg.seed)?,
        Arch::ResidualCnn => residual_cnn(&shape, train.class_count, cfg.arch.width, cfg.seed)?,
    };
    model.recalibrate_batch_norm(&train.images)?;
    let trained = fine_tune(&model, &train, &cfg.train, None)?;
    let mut model = trained.model;
    model.sync_batch_norm(&train.images)?;
    let train_eval = evaluate(&model, &train)?;
    let test_eval = evaluate(&model, &test)?;
    out.write_model("model.lpm", &model)?;
    out.write_str(
        "per_class.csv",
        &export::per_class_csv(test.class_count, &[per_class_row("float", &model, &test)?]),
    )?;
    let metrics = json!({
        "train_accuracy": train_eval.accuracy,
        "test_accuracy": test_eval.accuracy,
        "epoch_losses": trained.epoch_losses,
    });
    out.write_json("metrics.json", &metrics)?;
    Ok(metrics)
}

pub fn attribute(cfg: &RunConfig, out: &mut Outputs) -> Result<Value> {
    let model = load_model(cfg, out)?;
    let (train, _) = load_data(cfg, out)?;
    let imp = importances(cfg, &model, &train)?;
    let mut csv = String::from("layer_id,unit,importance\n");
    for (id, v) in &imp.layers {
        for (u, s) in v.iter().enumerate() {
            csv += &format!("{id},{u},{s:e}\n");
        }
    }
    out.write_json("importances.json", &imp)?;
    out.write_str("importances.csv", &csv)?;
    Ok(json!({ "layers": imp.layers.len() }))
}

fn sensitivity_csv(p: &SensitivityProfile) -> String {
    let mut csv = String::from("layer_id,sensitivity\n");
    for (id, s) in &p.sensitivities {
        csv += &format!("{id},{s:.6}\n");
    }
    csv
}

pub fn sensitivity(cfg: &RunConfig, out: &mut Outputs) -> Result<Value> {
    let model = load_model(cfg, out)?;
    let (train, _) = load_data(cfg, out)?;
    let imp = importances(cfg, &model, &train)?;
    let p = sensitivity_profile(cfg, &model, &train, &imp)?;
    out.write_json("sensitivity.json", &p)?;
    out.write_str("sensitivity.csv", &sensitivity_csv(&p))?;
    Ok(json!({ "probe_layer_id": p.probe_layer_id, "sensitivities": p.to_json() }))
}

fn write_prune_outcome(out: &mut Outputs, label: &str, outcome: &PruneOutcome) -> Result<Value> {
    let report = &outcome.report;
    out.write_model("model.lpm", &outcome.model)?;
    out.write_json("mask.json", &mask_to_json(&outcome.mask))?;
    out.write_str("prune_report.csv", &report.to_csv())?;
    out.write_json("prune_report.json", &json!({ "kind": "prune", "report": report }))?;
    for axis in [Criteria::Nps, Criteria::Macs] {
        let name = match axis {
            Criteria::Nps => "accuracy_vs_nps.csv",
            Criteria::Macs => "accuracy_vs_macs.csv",
        };
        out.write_str(name, &export::accuracy_vs_cost(&[Series::from_prune_report(label, report, axis)], axis))?;
    }
    for w in &report.warnings {
        log::warn!("{w}");
    }
    let (first, last) = (&report.rows[0], &report.rows[report.rows.len() - 1]);
    Ok(json!({
        "rows": report.rows.len(),
        "accuracy_before": first.accuracy,
        "accuracy_after": last.accuracy,
        "nps_before": first.nps,
        "nps_after": last.nps,
        "macs_before": first.macs,
        "macs_after": last.macs,
    }))
}

pub fn prune(cfg: &RunConfig, out: &mut Outputs) -> Result<Value> {
    let model = load_model(cfg, out)?;
    let (train, test) = load_data(cfg, out)?;
    let block = &cfg.prune;
    match block.mode {
        PruneMode::Global => write_prune_outcome(out, "dlp", &global_prune(&model, &train, &test, &block.config)?),
        PruneMode::Unstructured => {
            write_prune_outcome(out, "dlp", &unstructured_prune(&model, &train, &test, &block.config)?)
        }
        PruneMode::Local => {
            let layer = match block.local.layer {
                Some(id) => id,
                None => model
                    .last_conv_id()
                    .ok_or_else(|| Error::InvalidConfig("model has no convolution".into()))?,
            };
            if block.local.amounts.is_empty() {
                bail!(Error::InvalidConfig("prune.local.amounts is empty".into()));
            }
            let dlp = dataset_importances(&model, &train, &block.config.reference, block.config.target)?;
            let mut rankings = vec![("dlp", dlp)];
            if block.local.compare_l1 {
                rankings.push(("l1", l1_importances(&model)?));
            }
            let mut series = Vec::new();
            for (label, imp) in &rankings {
                let mut points = Vec::new();
                for &amount in &block.local.amounts {
                    let (pruned, _) = local_prune(&model, &[layer], amount, imp)?;
                    points.push((amount, evaluate(&pruned, &test)?.accuracy));
                }
                series.push(Series::new(*label, points));
            }
            out.write_str("accuracy_vs_amount.csv", &export::accuracy_vs_amount(&series))?;
            let json_series: Vec<Value> = series
                .iter()
                .map(|s| json!({ "label": s.label, "points": s.points }))
                .collect();
            out.write_json("sweep.json", &json!({ "kind": "sweep", "layer": layer, "series": json_series }))?;
            Ok(json!({ "layer": layer, "series": json_series }))
        }
    }
}

pub fn quantize_ws(cfg: &RunConfig, out: &mut Outputs) -> Result<Value> {
    let model = load_model(cfg, out)?;
    let (train, test) = load_data(cfg, out)?;
    let outcome = quantize_weight_sharing(&model, &train, &test, &cfg.wsq)?;
    let r = &outcome.report;
    out.write_model("model.lpm", &outcome.model)?;
    let books: Vec<Value> = outcome.codebooks.iter().map(|b| b.to_json()).collect();
    out.write_json("codebooks.json", &books)?;
    out.write_str("wsq_report.csv", &format!("{}\n{}\n", WsqReport::CSV_HEADER, r.csv_row()))?;
    out.write_json("wsq_report.json", &json!({ "kind": "wsq", "report": r }))?;
    out.write_str(
        "accuracy_vs_bits.csv",
        &export::accuracy_vs_bits(&[Series::new(r.criteria.name(), vec![(r.bits as f64, r.accuracy_after)])]),
    )?;
    Ok(serde_json::to_value(r)?)
}

pub fn quantize_int(cfg: &RunConfig, out: &mut Outputs) -> Result<Value> {
    let model = load_model(cfg, out)?;
    let (train, test) = load_data(cfg, out)?;
    let imp = importances(cfg, &model, &train)?;
    let prof = sensitivity_profile(cfg, &model, &train, &imp)?;
    let opts = &cfg.mpq.options;
    let coarse = coarse_search(&model, &train, &test, &prof, opts)?;
    let fine = if cfg.mpq.fine_search {
        Some(fine_search(&coarse.model, &train, &test, &prof, &coarse.config, opts)?)
    } else {
        None
    };
    let last = fine.as_ref().unwrap_or(&coarse);
    out.write_json("sensitivity.json", &prof)?;
    out.write_json("quant_config.json", &last.config)?;
    out.write_model("model.lpm", &last.model)?;
    out.write_str("coarse_report.csv", &coarse.report.to_csv())?;
    out.write_str("cb_report.csv", &last.report.to_csv())?;
    out.write_json(
        "mpq_report.json",
        &json!({ "kind": "mpq", "coarse": coarse.report, "fine": fine.as_ref().map(|f| &f.report) }),
    )?;
    for w in coarse.report.warnings.iter().chain(fine.iter().flat_map(|f| &f.report.warnings)) {
        log::warn!("{w}");
    }
    Ok(json!({
        "weight_cb": last.report.weight_cb,
        "act_cb": last.report.act_cb,
        "accuracy": last.report.accuracy,
        "float_accuracy": evaluate(&model, &test)?.accuracy,
        "bits": last.config.bits(),
    }))
}

pub fn profile_cmd(cfg: &RunConfig, out: &mut Outputs) -> Result<Value> {
    let model = load_model(cfg, out)?;
    let mask = match &cfg.profile.mask {
        Some(p) => {
            let v: Value = serde_json::from_slice(&out.read_input(p)?)
                .map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display())))?;
            Some(mask_from_json(&v)?)
        }
        None => None,
    };
    let p = profile_cost_with(&model, &model.input_shape, mask.as_ref(), cfg.profile.options)?;
    let mut csv = String::from("layer_id,kind,macs,nps\n");
    for l in &p.layers {
        csv += &format!("{},{},{},{}\n", l.id, l.kind, l.macs, l.nps);
    }
    out.write_str("profile.csv", &csv)?;
    let summary = json!({
        "total_macs": p.total_macs,
        "total_nps": p.total_nps,
        "total_flops": p.total_flops(),
        "mask_aware": p.mask_aware,
    });
    out.write_json("profile.json", &json!({ "layers": p.layers, "totals": summary }))?;
    Ok(summary)
}

fn accepted_cb_points(report: &CbReport) -> Vec<(f64, f64)> {
    report
        .trace
        .iter()
        .filter(|s| s.accepted)
        .map(|s| (s.weight_cb as f64, s.accuracy))
        .collect()
}

pub fn report(cfg: &RunConfig, out: &mut Outputs) -> Result<Value> {
    if cfg.report.inputs.is_empty() && cfg.report.per_class.is_empty() {
        bail!(Error::InvalidConfig("report needs at least one entry in report.inputs or report.per_class".into()));
    }
    let mut amount = Vec::new();
    let mut nps = Vec::new();
    let mut macs = Vec::new();
    let mut bits = Vec::new();
    let mut cb = Vec::new();
    for input in &cfg.report.inputs {
        let v: Value = serde_json::from_slice(&out.read_input(&input.path)?)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", input.path.display())))?;
        let bad = |m: &str| Error::InvalidConfig(format!("{}: {m}", input.path.display()));
        match v.get("kind").and_then(Value::as_str) {
            Some("prune") => {
                let r: PruneReport = serde_json::from_value(v["report"].clone()).map_err(|e| bad(&e.to_string()))?;
                nps.push(Series::from_prune_report(&input.label, &r, Criteria::Nps));
                macs.push(Series::from_prune_report(&input.label, &r, Criteria::Macs));
            }
            Some("sweep") => {
                let series = v["series"].as_array().ok_or_else(|| bad("sweep without series"))?;
                for s in series {
                    let points: Vec<(f64, f64)> =
                        serde_json::from_value(s["points"].clone()).map_err(|e| bad(&e.to_string()))?;
                    let label = s["label"].as_str().unwrap_or("series");
                    amount.push(Series::new(format!("{}:{label}", input.label), points));
                }
            }
            Some("wsq") => {
                let r: WsqReport = serde_json::from_value(v["report"].clone()).map_err(|e| bad(&e.to_string()))?;
                bits.push(Series::new(input.label.clone(), vec![(r.bits as f64, r.accuracy_after)]));
            }
            Some("mpq") => {
                let key = if v["fine"].is_null() { "coarse" } else { "fine" };
                let r: CbReport = serde_json::from_value(v[key].clone()).map_err(|e| bad(&e.to_string()))?;
                cb.push(Series::new(input.label.clone(), accepted_cb_points(&r)));
            }
            other => return Err(bad(&format!("unknown report kind {other:?}")).into()),
        }
    }
    // wsq points sharing a label form one curve
    let mut merged: Vec<Series> = Vec::new();
    for s in bits {
        match merged.iter_mut().find(|m| m.label == s.label) {
            Some(m) => m.points.extend(s.points),
            None => merged.push(s),
        }
    }
    for s in &mut merged {
        s.points.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    let mut written = Vec::new();
    type Render = fn(&[Series]) -> String;
    let files: [(&str, &[Series], Render); 5] = [
        ("accuracy_vs_amount.csv", &amount, export::accuracy_vs_amount),
        ("accuracy_vs_nps.csv", &nps, |s| export::accuracy_vs_cost(s, Criteria::Nps)),
        ("accuracy_vs_macs.csv", &macs, |s| export::accuracy_vs_cost(s, Criteria::Macs)),
        ("accuracy_vs_bits.csv", &merged, export::accuracy_vs_bits),
        ("accuracy_vs_cb.csv", &cb, |s| export::curve_csv("weight_cb", s)),
    ];
    for (name, series, render) in files {
        if !series.is_empty() {
            out.write_str(name, &render(series))?;
            written.push(name);
        }
    }
    if !cfg.report.per_class.is_empty() {
        let (_, test) = load_data(cfg, out)?;
        let mut rows = Vec::new();
        for entry in &cfg.report.per_class {
            let bytes = out.read_input(&entry.path)?;
            let model = liftprune::net::read_model(bytes.as_slice())
                .with_context(|| format!("loading {}", entry.path.display()))?;
            rows.push(per_class_row(&entry.label, &model, &test)?);
        }
        out.write_str("per_class.csv", &export::per_class_csv(test.class_count, &rows))?;
        written.push("per_class.csv");
    }
    Ok(json!({ "files": written }))
}
