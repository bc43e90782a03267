use std::fmt;
use std::fs;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use gsam::adapter::ablation_variants;
use gsam::checkpoint;
use gsam::data::{export_dataset, generate_shapes, import_dataset, Sample};
use gsam::gradcheck::{layer_suite, GradCheckOptions};
use gsam::macs::sweep_csv;
use gsam::train::{evaluate, train_until, TrainState};
use gsam::{ablation_variant, count_macs, size_sweep, Exec, Model};
use serde::Serialize;

use crate::config::RunConfig;
use crate::{AblateArgs, EvalArgs, Format, GenArgs, GradcheckArgs, MacsArgs, SweepArgs, TrainArgs, TrainOverrides};

/// Invalid invocation; reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// `HxW`, or a single number for a square size.
pub fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| format!("invalid size {s:?}; expected HxW with positive integers"))
    };
    match s.split_once(['x', 'X']) {
        Some((h, w)) => Ok((parse(h)?, parse(w)?)),
        None => {
            let n = parse(s)?;
            Ok((n, n))
        }
    }
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
            println!("{text}");
        }
        None => println!("{text}"),
    }
    Ok(())
}

pub fn gen(a: &GenArgs) -> Result<ExitCode> {
    if a.classes < 2 {
        return Err(usage("--classes must be at least 2"));
    }
    let samples = generate_shapes(a.n as usize, a.size, a.classes, a.seed)?;
    let manifest = export_dataset(&a.out, &samples, a.classes, a.seed)?;
    log::info!(
        "wrote {} samples of {}x{} to {}",
        manifest.num_samples,
        manifest.height,
        manifest.width,
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn resolve(o: &TrainOverrides, variant: Option<&str>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(o.config.as_deref())?;
    if let Some(d) = &o.data {
        cfg.paths.data = Some(d.clone());
    }
    if let Some(d) = &o.val_data {
        cfg.paths.val_data = Some(d.clone());
    }
    if let Some(d) = &o.out {
        cfg.paths.out = Some(d.clone());
    }
    if let Some(c) = o.crop {
        cfg.train.augment.crop = Some(c);
    }
    if o.pad_before_crop {
        cfg.train.augment.pad_before_crop = true;
    }
    if let Some(e) = o.epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = o.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = o.lr {
        cfg.train.lr0 = lr;
    }
    if let Some(s) = o.seed {
        cfg.train.seed = s;
    }
    if let Some(p) = o.patch_size {
        cfg.model.encoder.patch_size = p;
    }
    if let Some(v) = variant {
        cfg.adapter_variant = Some(v.to_string());
    }
    if cfg.paths.data.is_none() {
        return Err(usage("no training data: pass --data DIR or set paths.data in the config"));
    }
    if cfg.paths.out.is_none() {
        return Err(usage("no output directory: pass --out DIR or set paths.out in the config"));
    }
    Ok(cfg)
}

/// Applies `adapter_variant` to the model config.
fn model_config(cfg: &RunConfig) -> Result<gsam::ModelConfig> {
    let mut model = cfg.model.clone();
    if let Some(key) = &cfg.adapter_variant {
        let variant = ablation_variant(&model.encoder.adapter, key).map_err(|e| usage(e.to_string()))?;
        log::info!("adapter variant {:?} ({})", variant.key, variant.row_name);
        model.encoder.adapter = variant.config;
    }
    Ok(model)
}

fn load_split(cfg: &RunConfig, num_classes: usize) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let data = cfg.paths.data.as_ref().expect("checked by resolve");
    let (manifest, mut samples) =
        import_dataset(data).with_context(|| format!("loading dataset {}", data.display()))?;
    if manifest.num_classes != num_classes {
        bail!(
            "dataset has {} classes but the model is configured for {}",
            manifest.num_classes,
            num_classes
        );
    }
    let val = match &cfg.paths.val_data {
        Some(v) => import_dataset(v).with_context(|| format!("loading dataset {}", v.display()))?.1,
        None => {
            let f = cfg.paths.val_fraction;
            if !(0.0..1.0).contains(&f) {
                return Err(usage(format!("val_fraction must be in [0, 1), got {f}")));
            }
            let n_val = (samples.len() as f64 * f).round() as usize;
            let n_val = n_val.min(samples.len().saturating_sub(1));
            samples.split_off(samples.len() - n_val)
        }
    };
    Ok((samples, val))
}

#[derive(Serialize)]
struct TrainSummary {
    epochs_run: usize,
    final_loss: Option<f64>,
    val_per_class: Vec<Option<f64>>,
    val_miou: Option<f64>,
    train_samples: usize,
    val_samples: usize,
    parameters: gsam::model::ParamSummary,
}

pub fn train(a: &TrainArgs, exec: Exec) -> Result<ExitCode> {
    let mut cfg = resolve(&a.common, a.adapter_variant.as_deref())?;
    let out = cfg.paths.out.clone().expect("checked by resolve");
    fs::create_dir_all(&out)?;

    let (mut model, mut state) = match &a.resume {
        Some(path) => {
            let ckpt = checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            let (train_cfg, state) = ckpt
                .trainer
                .with_context(|| format!("{} has no training state to resume", path.display()))?;
            if train_cfg != cfg.train {
                log::warn!("resuming with the training config stored in the checkpoint");
            }
            cfg.train = train_cfg;
            cfg.model = ckpt.model.config().clone();
            cfg.adapter_variant = None;
            (ckpt.model, state)
        }
        None => (Model::new(&model_config(&cfg)?, cfg.train.seed)?, TrainState::default()),
    };
    cfg.echo(&out)?;
    let (train_set, val_set) = load_split(&cfg, model.config().num_classes)?;
    log::info!("training on {} samples, validating on {}", train_set.len(), val_set.len());

    let stop = a.stop_after.unwrap_or(cfg.train.epochs);
    let resume_path = out.join("resume.gsam");
    let log_path = out.join("train_log.csv");
    train_until(&mut model, &train_set, &val_set, &cfg.train, &mut state, stop, exec, |m, s| {
        checkpoint::save_resumable(&resume_path, m, &cfg.train, s)?;
        fs::write(&log_path, s.log.to_csv())?;
        Ok(())
    })?;

    checkpoint::save(&out.join("checkpoint.gsam"), &model)?;
    fs::write(&log_path, state.log.to_csv())?;
    fs::write(out.join("train_summary.json"), state.log.summary_json()?)?;
    let report = if val_set.is_empty() {
        None
    } else {
        Some(evaluate(&model, &val_set, exec)?)
    };
    let summary = TrainSummary {
        epochs_run: state.log.epochs.len(),
        final_loss: state.log.epochs.last().map(|r| r.loss),
        val_per_class: report.as_ref().map(|r| r.per_class.clone()).unwrap_or_default(),
        val_miou: report.as_ref().map(|r| r.mean),
        train_samples: train_set.len(),
        val_samples: val_set.len(),
        parameters: model.parameter_summary(),
    };
    let text = serde_json::to_string_pretty(&summary)?;
    fs::write(out.join("eval.json"), &text)?;
    println!("{text}");
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct EvalReport {
    samples: usize,
    per_class: Vec<Option<f64>>,
    miou: f64,
}

pub fn eval(a: &EvalArgs, exec: Exec) -> Result<ExitCode> {
    let ckpt = checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let (_, samples) = import_dataset(&a.data).with_context(|| format!("loading dataset {}", a.data.display()))?;
    let report = evaluate(&ckpt.model, &samples, exec)?;
    let text = serde_json::to_string_pretty(&EvalReport {
        samples: samples.len(),
        per_class: report.per_class,
        miou: report.mean,
    })?;
    write_or_print(a.out.as_deref(), &text)?;
    Ok(ExitCode::SUCCESS)
}

pub fn macs(a: &MacsArgs) -> Result<ExitCode> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    let report = count_macs(&model_config(&cfg)?, a.size)?;
    let text = match a.format {
        Format::Json => report.to_json()?,
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["layer_name", "layer_kind", "input_dims", "macs", "params"])?;
            for e in &report.entries {
                let dims = e.input_dims.iter().map(usize::to_string).collect::<Vec<_>>().join("x");
                w.write_record([
                    e.layer_name.clone(),
                    e.layer_kind.clone(),
                    dims,
                    e.macs.to_string(),
                    e.params.to_string(),
                ])?;
            }
            w.write_record(["total", "", "", &report.total_macs.to_string(), &report.total_params.to_string()])?;
            String::from_utf8(w.into_inner()?)?
        }
    };
    write_or_print(a.out.as_deref(), text.trim_end())?;
    Ok(ExitCode::SUCCESS)
}

pub fn sweep(a: &SweepArgs) -> Result<ExitCode> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    let rows = size_sweep(&model_config(&cfg)?, &a.sizes)?;
    write_or_print(a.out.as_deref(), sweep_csv(&rows).trim_end())?;
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<ExitCode> {
    let opts = GradCheckOptions {
        tolerance: a.tolerance,
        max_elements: (a.max_elements > 0).then_some(a.max_elements),
        seed: a.seed,
        ..GradCheckOptions::default()
    };
    let report = layer_suite(&opts)?;
    for (case, err) in report.per_case() {
        let status = if err < opts.tolerance { "ok" } else { "FAIL" };
        println!("{case:<28} {err:.3e} {status}");
    }
    println!("max relative error: {:.3e} (tolerance {:.0e})", report.max_rel_error(), opts.tolerance);
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    if report.passed() {
        Ok(ExitCode::SUCCESS)
    } else {
        for f in report.failures() {
            eprintln!("failed: {} / {} ({:.3e})", f.case, f.tensor, f.max_rel_error);
        }
        Ok(ExitCode::from(1))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct AblationRow {
    row: String,
    key: String,
    total_params: u64,
    adapter_params: u64,
    learnable_params: u64,
    final_loss: f64,
    val_miou: Option<f64>,
}

pub fn ablate(a: &AblateArgs, exec: Exec) -> Result<ExitCode> {
    let cfg = resolve(&a.common, None)?;
    let out = cfg.paths.out.clone().expect("checked by resolve");
    cfg.echo(&out)?;
    let (train_set, val_set) = load_split(&cfg, cfg.model.num_classes)?;
    let mut rows = Vec::new();
    for variant in ablation_variants(&cfg.model.encoder.adapter) {
        log::info!("ablation: {} ({})", variant.row_name, variant.key);
        let mut model_cfg = cfg.model.clone();
        model_cfg.encoder.adapter = variant.config.clone();
        let mut model = Model::new(&model_cfg, cfg.train.seed)?;
        let mut state = TrainState::default();
        train_until(&mut model, &train_set, &val_set, &cfg.train, &mut state, cfg.train.epochs, exec, |_, _| Ok(()))?;
        let val_miou = if val_set.is_empty() {
            None
        } else {
            Some(evaluate(&model, &val_set, exec)?.mean)
        };
        let adapter_params = model
            .params
            .iter()
            .filter(|(name, _)| name.contains(".adapter."))
            .map(|(_, p)| p.value.len() as u64)
            .sum();
        let summary = model.parameter_summary();
        rows.push(AblationRow {
            row: variant.row_name,
            key: variant.key,
            total_params: summary.total,
            adapter_params,
            learnable_params: summary.learnable,
            final_loss: state.log.epochs.last().map_or(f64::NAN, |r| r.loss),
            val_miou,
        });
    }

    let mut w = csv::Writer::from_path(out.join("ablation.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let mut table = String::from("| Method | key | params | adapter params | loss | mIoU |\n|---|---|---|---|---|---|\n");
    for r in &rows {
        let miou = r.val_miou.map_or("-".to_string(), |v| format!("{v:.4}"));
        table.push_str(&format!(
            "| {} | {} | {} | {} | {:.4} | {} |\n",
            r.row, r.key, r.total_params, r.adapter_params, r.final_loss, miou
        ));
    }
    fs::write(out.join("ablation.md"), &table)?;
    print!("{table}");
    Ok(ExitCode::SUCCESS)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_parse() {
        assert_eq!(parse_size("128x96"), Ok((128, 96)));
        assert_eq!(parse_size("64"), Ok((64, 64)));
        assert_eq!(parse_size("7X5"), Ok((7, 5)));
        assert!(parse_size("0x5").is_err());
        assert!(parse_size("ax5").is_err());
        assert!(parse_size("").is_err());
    }
}
