use std::path::{Path, PathBuf};

use dualview_core::engine::{self, AdaptRecord, PretrainRecord, TrainOutcome};
use dualview_core::eval::{self, MetricReport, SelectionMode};
use dualview_core::gradcheck;
use dualview_core::model::{self, Architecture, EstimatorParams};
use dualview_core::simdata::{self, HiddenLabels, RigSpec, PRETRAIN_FILE, PROBE_FILE, RIG_FILE};
use serde_json::{json, Value};

use crate::config::{resolve, RunConfig};
use crate::output::*;
use crate::{CliError, ConfigArgs};

fn load_config(args: &ConfigArgs) -> Result<RunConfig, CliError> {
    let mut cfg = resolve(&args.preset, args.config.as_deref(), &args.set)?;
    if let Some(seed) = args.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn provenance(command: &str, cfg: &RunConfig, inputs: &[(&str, &Path)]) -> Result<Value, CliError> {
    let mut digests = serde_json::Map::new();
    for (name, path) in inputs {
        digests.insert((*name).to_string(), Value::String(sha256_file(path)?));
    }
    Ok(json!({ "command": command, "config": cfg.to_value(), "inputs": digests }))
}

fn default_log(out: &Path) -> PathBuf {
    out.with_extension("log.jsonl")
}

pub fn sim(args: &ConfigArgs, out: &Path, rig_yaw_deg: Option<f64>) -> Result<(), CliError> {
    let mut cfg = load_config(args)?;
    if let Some(yaw) = rig_yaw_deg {
        let distance = match cfg.sim.rig {
            RigSpec::Fixed { distance, .. } | RigSpec::Random { distance } => distance,
        };
        cfg.sim.rig = RigSpec::Fixed {
            relative_yaw_deg: yaw,
            distance,
        };
    }
    let data = simdata::generate_datasets(&cfg.sim)?;
    let prov = provenance("sim", &cfg, &[])?;
    simdata::write_datasets(out, &cfg.sim, &data, &prov)?;
    println!(
        "sim: {} pretrain, {} rig pairs, {} probe pairs; rig {} (relative yaw {:.2} deg); seed {}; wrote {}",
        data.pretrain.len(),
        data.rig_set.len(),
        data.probe.len(),
        data.rig.id,
        data.rig.relative_yaw.to_degrees(),
        cfg.sim.seed,
        out.display()
    );
    Ok(())
}

/// Saves the checkpoint unless the run was aborted, then writes the log.
fn finish_training<R: serde::Serialize>(
    kind: LogKind,
    iterations: usize,
    outcome: &TrainOutcome<R>,
    prov: Value,
    out: &Path,
    log: &Path,
) -> Result<Option<String>, CliError> {
    let digest = if outcome.aborted.is_none() {
        model::save_checkpoint(&outcome.params, &outcome.adam, prov.clone(), out)?;
        Some(sha256_file(out)?)
    } else {
        None
    };
    let header = TrainLogHeader {
        format_version: TRAIN_LOG_FORMAT_VERSION,
        kind,
        iterations,
        records: outcome.log.records.len(),
        aborted: outcome.aborted.clone(),
        checkpoint_sha256: digest.clone(),
        initial_probe_consistency: outcome.log.initial_probe_consistency,
        provenance: prov,
    };
    write_log(log, &header, &outcome.log.records)?;
    if let Some(reason) = &outcome.aborted {
        return Err(CliError::NonFinite(format!("{reason}; partial log kept at {}", log.display())));
    }
    Ok(digest)
}

pub fn pretrain(
    args: &ConfigArgs,
    data: &Path,
    out: &Path,
    log: Option<PathBuf>,
    iterations: Option<usize>,
) -> Result<(), CliError> {
    let mut cfg = load_config(args)?;
    if let Some(n) = iterations {
        cfg.pretrain.iterations = n;
    }
    let file = data.join(PRETRAIN_FILE);
    let (header, views) = simdata::load_pretrain(&file)?;
    let arch = Architecture {
        input: header.d,
        ..Architecture::default()
    };
    let params = EstimatorParams::init(arch, cfg.pretrain.seed);
    let outcome = engine::pretrain(params, &views, &cfg.pretrain)?;
    let prov = provenance("pretrain", &cfg, &[("pretrain", &file)])?;
    let log = log.unwrap_or_else(|| default_log(out));
    let digest = finish_training(LogKind::Pretrain, cfg.pretrain.iterations, &outcome, prov, out, &log)?;
    let last: Option<&PretrainRecord> = outcome.log.records.last();
    println!(
        "pretrain: {} iterations, final gaze loss {:.2} deg; checkpoint {} sha256 {}",
        outcome.log.records.len(),
        last.map_or(f64::NAN, |r| r.l_gaze.to_degrees()),
        out.display(),
        digest.unwrap_or_default()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn adapt(
    args: &ConfigArgs,
    data: &Path,
    init: &Path,
    out: &Path,
    log: Option<PathBuf>,
    iterations: Option<usize>,
    no_stb: bool,
    no_pre: bool,
) -> Result<(), CliError> {
    let mut cfg = load_config(args)?;
    if let Some(n) = iterations {
        cfg.adapt.iterations = n;
    }
    cfg.adapt.enable_stb &= !no_stb;
    cfg.adapt.enable_pre &= !no_pre;
    let (rig_file, pre_file, probe_file) = (data.join(RIG_FILE), data.join(PRETRAIN_FILE), data.join(PROBE_FILE));
    let (_, pairs) = simdata::load_unlabeled(&rig_file)?;
    let (_, pre) = simdata::load_pretrain(&pre_file)?;
    let (_, probe) = simdata::load_unlabeled(&probe_file)?;
    let (params, _) = model::load_checkpoint(init)?;
    let outcome = engine::adapt(params, &pairs, &pre, &probe, &cfg.adapt)?;
    let prov = provenance(
        "adapt",
        &cfg,
        &[("init", init), ("rig", &rig_file), ("pretrain", &pre_file), ("probe", &probe_file)],
    )?;
    let log = log.unwrap_or_else(|| default_log(out));
    let digest = finish_training(LogKind::Adapt, cfg.adapt.iterations, &outcome, prov, out, &log)?;
    let last: Option<&AdaptRecord> = outcome.log.records.last();
    let final_probe = last.and_then(|r| r.probe_consistency);
    println!(
        "adapt: {} iterations (stb {}, pre {}); probe consistency {:.2} -> {:.2} deg; checkpoint {} sha256 {}",
        outcome.log.records.len(),
        cfg.adapt.enable_stb,
        cfg.adapt.enable_pre,
        outcome.log.initial_probe_consistency.unwrap_or(f64::NAN).to_degrees(),
        final_probe.unwrap_or(f64::NAN).to_degrees(),
        out.display(),
        digest.unwrap_or_default()
    );
    Ok(())
}

fn model_report(
    params: &EstimatorParams,
    name: String,
    inputs: &[simdata::DualViewInputs],
    labels: &[HiddenLabels],
    edges: &[f64],
) -> Result<ModelReport, CliError> {
    let preds = engine::predict_pairs(params, inputs)?;
    let mode = |m: SelectionMode| -> Result<ModeReport, CliError> {
        let radians: MetricReport = eval::metric_report(&preds, labels, m, edges)?;
        Ok(ModeReport {
            degrees: Degrees::of(&radians),
            radians,
        })
    };
    Ok(ModelReport {
        model: name,
        predicted: mode(SelectionMode::Predicted)?,
        label: mode(SelectionMode::Label)?,
    })
}

fn change(before: &Degrees, after: &Degrees) -> Degrees {
    let c = eval::relative_change_pct;
    Degrees {
        mono: c(before.mono, after.mono),
        dual_s: c(before.dual_s, after.dual_s),
        dual_a: c(before.dual_a, after.dual_a),
        hpose: c(before.hpose, after.hpose),
        consistency: c(before.consistency, after.consistency),
    }
}

fn print_row(tag: &str, mode: &str, d: &Degrees, pct: Option<&Degrees>) {
    let mut line = format!("{tag:<7}{mode:<10}");
    for (i, (_, v)) in d.fields().iter().enumerate() {
        line.push_str(&format!("{v:>8.2}"));
        if let Some(p) = pct {
            line.push_str(&format!(" ({:+.1}%)", p.fields()[i].1));
        }
    }
    println!("{line}");
}

#[allow(clippy::too_many_arguments)]
pub fn eval(
    args: &ConfigArgs,
    data: &Path,
    checkpoint: Option<&Path>,
    compare: Option<&Path>,
    split: Split,
    out: &Path,
    csv_dir: Option<PathBuf>,
) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    eval::validate_edges(&cfg.eval.bin_edges_deg)?;
    let file = data.join(match split {
        Split::Rig => RIG_FILE,
        Split::Probe => PROBE_FILE,
    });
    let (header, samples) = simdata::load_dual(&file)?;
    let inputs: Vec<_> = samples.iter().map(|s| s.inputs()).collect();
    let labels: Vec<HiddenLabels> = samples.iter().map(|s| s.hidden.clone()).collect();
    let edges = &cfg.eval.bin_edges_deg;

    let (before_params, before_name) = match checkpoint {
        Some(p) => (model::load_checkpoint(p)?.0, sha256_file(p)?),
        None => {
            let arch = Architecture {
                input: header.d,
                ..Architecture::default()
            };
            (EstimatorParams::init(arch, cfg.pretrain.seed), "untrained".to_string())
        }
    };
    let before = model_report(&before_params, before_name, &inputs, &labels, edges)?;
    let after = match compare {
        Some(p) => Some(model_report(&model::load_checkpoint(p)?.0, sha256_file(p)?, &inputs, &labels, edges)?),
        None => None,
    };
    let change_pct = after.as_ref().map(|a| Deltas {
        predicted: change(&before.predicted.degrees, &a.predicted.degrees),
        label: change(&before.label.degrees, &a.label.degrees),
    });

    let mut inputs_prov: Vec<(&str, &Path)> = vec![("eval_set", &file)];
    if let Some(p) = checkpoint {
        inputs_prov.push(("checkpoint", p));
    }
    if let Some(p) = compare {
        inputs_prov.push(("compare", p));
    }
    let report = EvalReport {
        format_version: EVAL_FORMAT_VERSION,
        split,
        samples: samples.len(),
        before,
        after,
        change_pct,
        provenance: provenance("eval", &cfg, &inputs_prov)?,
    };
    write_json(out, &report)?;

    let csv_dir = csv_dir.unwrap_or_else(|| out.parent().map(Path::to_path_buf).unwrap_or_default());
    std::fs::create_dir_all(&csv_dir).map_err(|e| CliError::Io(format!("{}: {e}", csv_dir.display())))?;
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    let mut tables = vec![("before", &report.before)];
    if let Some(a) = &report.after {
        tables.push(("after", a));
    }
    for (tag, m) in &tables {
        for (mode, r) in [("predicted", &m.predicted), ("label", &m.label)] {
            let path = csv_dir.join(format!("{stem}.bins.{tag}.{mode}.csv"));
            std::fs::write(&path, eval::bins_csv(&r.radians.bins))
                .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        }
    }

    println!("eval: {} pairs from the {:?} split (degrees)", report.samples, split);
    println!("{:<7}{:<10}{:>8}{:>8}{:>8}{:>8}{:>8}", "model", "mode", "Mono", "Dual-S", "Dual-A", "HPose", "Cons");
    for (tag, m) in &tables {
        let pct = if *tag == "after" { report.change_pct.as_ref() } else { None };
        print_row(tag, "predicted", &m.predicted.degrees, pct.map(|d| &d.predicted));
        print_row(tag, "label", &m.label.degrees, pct.map(|d| &d.label));
    }
    Ok(())
}

pub fn refine(
    args: &ConfigArgs,
    input: &Path,
    synthesize: bool,
    out: &Path,
    delta: Option<f64>,
) -> Result<(), CliError> {
    let mut cfg = load_config(args)?;
    if let Some(d) = delta {
        cfg.refine.delta = d;
    }
    if !(cfg.refine.delta >= 0.0) {
        return Err(CliError::Usage("delta must be >= 0".into()));
    }
    if synthesize {
        let (recs, _) = simdata::generate_recordings(&cfg.recording)?;
        simdata::write_recordings(input, &recs, cfg.recording.seed, &provenance("refine", &cfg, &[])?)?;
    }
    let (_, recs) = simdata::load_recordings(input)?;
    let frames = recs
        .iter()
        .map(|r| simdata::refine_recording(r, &cfg.refine))
        .collect::<Result<Vec<_>, _>>()?;
    let n = frames.len() as f64;
    let spread_before = frames.iter().map(|f| f.spread_before).sum::<f64>() / n;
    let spread_after = frames.iter().map(|f| f.spread_after).sum::<f64>() / n;
    let max_corr = frames
        .iter()
        .flat_map(|f| f.corrections.iter().flatten())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let summary = RefineSummary {
        frames: frames.len(),
        cameras: recs.first().map_or(0, |r| r.cameras.len()),
        spread_before,
        spread_after,
        reduction_pct: if spread_before > 0.0 { (1.0 - spread_after / spread_before) * 100.0 } else { 0.0 },
        max_abs_correction_deg: max_corr.to_degrees(),
    };
    println!(
        "refine: {} frames x {} cameras, delta {}; head-frame gaze spread {:.3e} -> {:.3e} ({:.1}% lower); max correction {:.3} deg",
        summary.frames,
        summary.cameras,
        cfg.refine.delta,
        summary.spread_before,
        summary.spread_after,
        summary.reduction_pct,
        summary.max_abs_correction_deg
    );
    let report = RefineReport {
        format_version: REFINE_FORMAT_VERSION,
        delta: cfg.refine.delta,
        summary,
        frames,
        provenance: provenance("refine", &cfg, &[("recording", input)])?,
    };
    write_json(out, &report)
}

pub fn gradcheck(args: &ConfigArgs, configs: Option<usize>, corrupt: bool, out: Option<&Path>) -> Result<(), CliError> {
    let mut cfg = load_config(args)?;
    if let Some(n) = configs {
        cfg.gradcheck.configs = n;
    }
    cfg.gradcheck.corrupt |= corrupt;
    if cfg.gradcheck.configs == 0 || cfg.gradcheck.coords == 0 {
        return Err(CliError::Usage("gradcheck needs at least one configuration and coordinate".into()));
    }
    let suites = gradcheck::run_all(&cfg.gradcheck);
    let passed = suites.iter().all(|s| s.passed);
    for s in &suites {
        let mut line = format!(
            "{:<15} {}  max rel error {:.3e} over {} configs / {} coordinates",
            s.name,
            if s.passed { "PASS" } else { "FAIL" },
            s.max_rel_error,
            s.configs,
            s.checked
        );
        if let (false, Some(w)) = (s.passed, &s.worst) {
            line.push_str(&format!(
                "; worst: config {} coordinate {} analytic {:.6e} numeric {:.6e}",
                w.config, w.coordinate, w.analytic, w.numeric
            ));
        }
        println!("{line}");
    }
    if let Some(path) = out {
        write_json(
            path,
            &GradcheckReport {
                format_version: GRADCHECK_FORMAT_VERSION,
                passed,
                suites: suites.clone(),
                provenance: provenance("gradcheck", &cfg, &[])?,
            },
        )?;
    }
    if passed {
        Ok(())
    } else {
        let worst = suites
            .iter()
            .filter(|s| !s.passed)
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
            .expect("a failing suite exists");
        Err(CliError::CheckFailed(format!(
            "gradient check failed; worst suite {} with relative error {:.3e}",
            worst.name, worst.max_rel_error
        )))
    }
}
