use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rashnet::checkpoint::{self, encode};
use rashnet::config::{Precision, RunConfig};
use rashnet::data::{
    load_manifest, stratified_kfold, DatasetManifest, FoldPlan, ManifestSource, Preprocess, SkinClass,
};
use rashnet::eval::{cross_validate_report, MetricsReport};
use rashnet::resnet::{Init, Network};
use rashnet::tensor::{DType, Element, OptimizerState};
use rashnet::trainer::{self, fit_protocol, log_to_csv, LrFindConfig, NetworkSweep, ProtocolOutcome};
use rashnet::Tensor;
use serde_json::json;

use crate::error::CliError;
use crate::RunFlags;

fn resolve(flags: &RunFlags) -> Result<RunConfig, CliError> {
    let mut c = RunConfig::default();
    if let Some(path) = &flags.config {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        c.apply_text(&text)?;
    }
    let mut set = |key: &str, value: Option<String>| -> Result<(), CliError> {
        match value {
            Some(v) => Ok(c.set(key, &v)?),
            None => Ok(()),
        }
    };
    let s = |v: &Option<PathBuf>| v.as_ref().map(|p| p.display().to_string());
    set("manifest", s(&flags.manifest))?;
    set("variant", flags.variant.map(|v| v.to_string()))?;
    set("k", flags.k.map(|v| v.to_string()))?;
    set("seed", flags.seed.map(|v| v.to_string()))?;
    set("batch-size", flags.batch_size.map(|v| v.to_string()))?;
    set("epochs-head", flags.epochs_head.map(|v| v.to_string()))?;
    set("epochs-finetune", flags.epochs_finetune.map(|v| v.to_string()))?;
    set("lr-lo", flags.lr_lo.map(|v| v.to_string()))?;
    set("lr-hi", flags.lr_hi.map(|v| v.to_string()))?;
    set("lr-head", flags.lr_head.map(|v| v.to_string()))?;
    set("oversample", flags.oversample.then(|| "true".to_string()))?;
    set("augment", flags.augment.then(|| "true".to_string()))?;
    set("precision", flags.precision.map(|v| v.to_string()))?;
    set("init-checkpoint", s(&flags.init_checkpoint))?;
    set("momentum", flags.momentum.map(|v| v.to_string()))?;
    set("weight-decay", flags.weight_decay.map(|v| v.to_string()))?;
    set("threshold", flags.threshold.map(|v| v.to_string()))?;
    set("resolution", flags.resolution.map(|v| v.to_string()))?;
    set("blocks", flags.blocks.clone())?;
    set("widths", flags.widths.clone())?;
    set("block", flags.block.clone())?;
    set("lr-find-iterations", flags.lr_find_iterations.map(|v| v.to_string()))?;
    c.validate()?;
    Ok(c)
}

fn manifest_of(config: &RunConfig) -> Result<DatasetManifest, CliError> {
    let path = config
        .manifest
        .as_ref()
        .ok_or_else(|| CliError::Usage("--manifest is required".into()))?;
    Ok(load_manifest(path)?)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(path) => write_file(path, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn ingest(flags: &RunFlags, check_files: bool) -> Result<(), CliError> {
    let config = resolve(flags)?;
    let manifest = manifest_of(&config)?;
    if check_files {
        ManifestSource::new(manifest.clone(), Preprocess::default()).check_files()?;
    }
    let mut out = String::from("class\tcount\n");
    for class in SkinClass::ALL {
        let _ = writeln!(out, "{class}\t{}", manifest.count(class));
    }
    let _ = writeln!(out, "total\t{}", manifest.len());
    let _ = writeln!(out, "positive (measles)\t{}", manifest.positives());
    let _ = writeln!(out, "negative\t{}", manifest.negatives());
    print!("{out}");
    Ok(())
}

fn fold_plan(config: &RunConfig, manifest: &DatasetManifest, folds: Option<&Path>) -> Result<FoldPlan, CliError> {
    let plan = match folds {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            FoldPlan::from_csv(&text, config.seed)?
        }
        None => stratified_kfold(manifest, config.k, config.seed)?,
    };
    if plan.sample_count() != manifest.len() {
        return Err(CliError::Data(format!(
            "fold plan covers {} samples but the manifest has {}",
            plan.sample_count(),
            manifest.len()
        )));
    }
    Ok(plan)
}

pub fn split(flags: &RunFlags, out: Option<&Path>) -> Result<(), CliError> {
    let config = resolve(flags)?;
    let manifest = manifest_of(&config)?;
    let plan = fold_plan(&config, &manifest, None)?;
    let labels = manifest.binary_labels();
    for (f, ids) in plan.folds().iter().enumerate() {
        let pos = ids.iter().filter(|&&i| labels[i]).count();
        log::info!("fold {}: {} samples, {} positive", f + 1, ids.len(), pos);
    }
    write_or_print(out, &plan.to_csv())
}

/// Loads a checkpoint in whatever precision it was saved and converts it.
fn load_network<T: Element>(path: &Path) -> Result<Network<T>, CliError> {
    let bytes = checkpoint::read_checkpoint_bytes(path)?;
    match checkpoint::header(&bytes)?.dtype {
        Some(DType::F32) => Ok(checkpoint::decode::<f32>(&bytes)?.cast()),
        Some(DType::F64) => Ok(checkpoint::decode::<f64>(&bytes)?.cast()),
        None => Err(CliError::Data(format!("{}: unknown element type", path.display()))),
    }
}

fn initial_network<T: Element>(config: &RunConfig) -> Result<(Network<T>, String), CliError> {
    match &config.init_checkpoint {
        Some(path) => {
            let mut net = load_network::<T>(path)?;
            if net.config().resolution != config.resolution {
                return Err(CliError::Usage(format!(
                    "checkpoint expects {0}×{0} inputs but --resolution is {1}",
                    net.config().resolution,
                    config.resolution
                )));
            }
            if net.config().num_classes != 2 {
                net.replace_head(2, config.seed)?;
            }
            Ok((net, format!("checkpoint {}", path.display())))
        }
        None => {
            let net = Network::build(config.network_config(2)?, Init::He { seed: config.seed })?;
            Ok((net, format!("random (He normal, seed {})", config.seed)))
        }
    }
}

pub fn lr_find(flags: &RunFlags, out: Option<&Path>) -> Result<(), CliError> {
    let config = resolve(flags)?;
    let manifest = manifest_of(&config)?;
    let plan = fold_plan(&config, &manifest, None)?;
    let source = ManifestSource::new(manifest, Preprocess::with_size(config.resolution));
    source.check_files()?;
    let curve = match config.precision {
        Precision::F32 => sweep_as::<f32>(&config, &source, &plan)?,
        Precision::F64 => sweep_as::<f64>(&config, &source, &plan)?,
    };
    match curve.divergence_rate() {
        Some(rate) => log::info!("loss diverged at {rate:e}"),
        None => log::info!("no divergence within the sweep"),
    }
    log::info!("suggested rate {:e}", curve.suggested);
    write_or_print(out, &curve.to_csv())
}

fn sweep_as<T: Element>(
    config: &RunConfig,
    source: &ManifestSource,
    plan: &FoldPlan,
) -> Result<trainer::LrCurve, CliError> {
    let (mut net, _) = initial_network::<T>(config)?;
    let protocol = config.protocol();
    let mut state = OptimizerState::new(net.params(), config.momentum, config.weight_decay);
    let train = plan.training(0);
    let mut sweep = NetworkSweep::new(
        &mut net,
        &mut state,
        source,
        &train,
        config.batch_size,
        protocol.phase1.freeze,
        config.seed,
    )?;
    let sweep_config = LrFindConfig {
        iterations: config.lr_find_iterations,
        ..LrFindConfig::default()
    };
    Ok(trainer::lr_find(&mut sweep, &sweep_config)?)
}

fn auc_csv<T: Element>(outcome: &ProtocolOutcome<T>) -> String {
    let mut out = String::from("fold,epoch,auc\n");
    for (f, aucs) in outcome.auc_trajectory.iter().enumerate() {
        for (e, a) in aucs.iter().enumerate() {
            let _ = writeln!(out, "{},{},{a:.6}", f + 1, e + 1);
        }
    }
    for (e, a) in outcome.mean_auc_trajectory().iter().enumerate() {
        let _ = writeln!(out, "mean,{},{a:.6}", e + 1);
    }
    out
}

fn titled_table(report: &MetricsReport, title: &str, init: &str) -> String {
    format!("# {title}\n# init: {init}\n{}", report.to_table())
}

pub fn train(flags: &RunFlags, out_dir: &Path, folds: Option<&Path>) -> Result<(), CliError> {
    let config = resolve(flags)?;
    let manifest = manifest_of(&config)?;
    let plan = fold_plan(&config, &manifest, folds)?;
    let source = ManifestSource::new(manifest, Preprocess::with_size(config.resolution));
    source.check_files()?;
    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    write_file(&out_dir.join("run_config.txt"), config.to_text())?;
    write_file(&out_dir.join("folds.csv"), plan.to_csv())?;
    match config.precision {
        Precision::F32 => train_as::<f32>(&config, &source, &plan, out_dir),
        Precision::F64 => train_as::<f64>(&config, &source, &plan, out_dir),
    }
}

fn run_protocol<T: Element>(
    config: &RunConfig,
    source: &ManifestSource,
    plan: &FoldPlan,
    checkpoint_dir: Option<&Path>,
) -> Result<(ProtocolOutcome<T>, String), CliError> {
    let (initial, init) = initial_network::<T>(config)?;
    log::info!("{} from {init}, {} folds", initial.config().label(), plan.k);
    let outcome = fit_protocol(&initial, source, plan, &config.protocol(), |fold, net| {
        if let Some(dir) = checkpoint_dir {
            fs::write(dir.join(format!("fold{}.rnet", fold + 1)), encode(net))?;
        }
        Ok(())
    })?;
    Ok((outcome, init))
}

fn train_as<T: Element>(
    config: &RunConfig,
    source: &ManifestSource,
    plan: &FoldPlan,
    out_dir: &Path,
) -> Result<(), CliError> {
    let (outcome, init) = run_protocol::<T>(config, source, plan, Some(out_dir))?;
    write_file(&out_dir.join("final.rnet"), encode(&outcome.final_network))?;
    let tables = [
        (&outcome.phase1, "phase1", "head-only training, per-fold validation"),
        (
            &outcome.phase2,
            "phase2",
            "after whole-network fine-tuning, per-fold validation",
        ),
    ];
    for (report, name, title) in tables {
        write_file(&out_dir.join(format!("report_{name}.json")), report.to_json() + "\n")?;
        let table = titled_table(report, title, &init);
        write_file(&out_dir.join(format!("report_{name}.txt")), &table)?;
        println!("{table}");
    }
    write_file(&out_dir.join("training_log.csv"), log_to_csv(&outcome.log))?;
    write_file(&out_dir.join("auc_trajectory.csv"), auc_csv(&outcome))?;
    if let Some(curve) = &outcome.lr_curve {
        write_file(&out_dir.join("lr_curve.csv"), curve.to_csv())?;
    }
    let summary = json!({
        "network": outcome.final_network.config(),
        "init": init,
        "phase1_lr": outcome.phase1_lr,
        "phase1": outcome.phase1,
        "phase2": outcome.phase2,
        "mean_auc_trajectory": outcome.mean_auc_trajectory(),
    });
    write_file(
        &out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n",
    )
}

pub fn evaluate(flags: &RunFlags, checkpoint_path: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let config = resolve(flags)?;
    let manifest = manifest_of(&config)?;
    let bytes = checkpoint::read_checkpoint_bytes(checkpoint_path)?;
    let report = match checkpoint::header(&bytes)?.dtype {
        Some(DType::F64) => evaluate_as(&checkpoint::decode::<f64>(&bytes)?, &config, manifest)?,
        _ => evaluate_as(&checkpoint::decode::<f32>(&bytes)?, &config, manifest)?,
    };
    print!(
        "{}",
        titled_table(
            &report,
            "evaluation",
            &format!("checkpoint {}", checkpoint_path.display())
        )
    );
    if let Some(path) = out {
        write_file(path, report.to_json() + "\n")?;
    }
    Ok(())
}

fn evaluate_as<T: Element>(
    net: &Network<T>,
    config: &RunConfig,
    manifest: DatasetManifest,
) -> Result<MetricsReport, CliError> {
    let source = ManifestSource::new(manifest, Preprocess::with_size(net.config().resolution));
    source.check_files()?;
    let ids: Vec<usize> = (0..source.manifest.len()).collect();
    let scored = trainer::evaluate(net, &source, &ids, config.batch_size)?;
    let result = scored.fold_result(config.threshold)?;
    Ok(cross_validate_report(&[result], "evaluate")?)
}

pub fn predict(checkpoint_path: &Path, images: &[PathBuf]) -> Result<(), CliError> {
    let bytes = checkpoint::read_checkpoint_bytes(checkpoint_path)?;
    let lines = match checkpoint::header(&bytes)?.dtype {
        Some(DType::F64) => predict_as(&checkpoint::decode::<f64>(&bytes)?, images)?,
        _ => predict_as(&checkpoint::decode::<f32>(&bytes)?, images)?,
    };
    print!("{lines}");
    Ok(())
}

fn predict_as<T: Element>(net: &Network<T>, images: &[PathBuf]) -> Result<String, CliError> {
    let pre = Preprocess::with_size(net.config().resolution);
    let mut out = String::new();
    for path in images {
        let t = pre.load(path)?;
        let mut shape = vec![1];
        shape.extend_from_slice(t.shape());
        let x: Tensor<T> = t.reshape(shape).map_err(|e| CliError::Data(e.to_string()))?.cast();
        let probs = net.predict_proba(&x)?;
        let score = probs.data()[1].as_f64().clamp(0.0, 1.0);
        let _ = writeln!(out, "{},{score:.6}", path.display());
    }
    Ok(out)
}

pub fn compare_variants(flags: &RunFlags, variants: &[u32], out_dir: &Path) -> Result<(), CliError> {
    let base = resolve(flags)?;
    if base.blocks.is_some() || base.block.is_some() {
        return Err(CliError::Usage(
            "--blocks and --block fix the layout and cannot be combined with compare-variants".into(),
        ));
    }
    if base.init_checkpoint.is_some() {
        return Err(CliError::Usage(
            "compare-variants always starts from random weights".into(),
        ));
    }
    let manifest = manifest_of(&base)?;
    let plan = fold_plan(&base, &manifest, None)?;
    let source = ManifestSource::new(manifest, Preprocess::with_size(base.resolution));
    source.check_files()?;
    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;

    let mut rows = Vec::new();
    let mut table = String::from("Variant\tPhase\tSensitivity (%)\tSpecificity (%)\tAccuracy (%)\tAUC\n");
    for &variant in variants {
        let config = RunConfig {
            variant,
            ..base.clone()
        };
        config.validate()?;
        let (p1, p2) = match config.precision {
            Precision::F32 => {
                let (o, _) = run_protocol::<f32>(&config, &source, &plan, None)?;
                (o.phase1, o.phase2)
            }
            Precision::F64 => {
                let (o, _) = run_protocol::<f64>(&config, &source, &plan, None)?;
                (o.phase1, o.phase2)
            }
        };
        for report in [&p1, &p2] {
            let a = &report.average;
            let auc = a.auc.map_or_else(
                || "-".to_string(),
                |v| format!("{:.4}", rashnet::eval::round_half_even(v, 4)),
            );
            let r2 = |v: f64| rashnet::eval::round_half_even(v, 2);
            let _ = writeln!(
                table,
                "resnet{variant}\t{}\t{:.2}\t{:.2}\t{:.2}\t{auc}",
                report.phase,
                r2(a.sensitivity),
                r2(a.specificity),
                r2(a.accuracy)
            );
        }
        rows.push(json!({ "variant": variant, "phase1": p1, "phase2": p2 }));
    }
    write_file(
        &out_dir.join("compare.json"),
        serde_json::to_string_pretty(&rows).expect("rows serialize") + "\n",
    )?;
    write_file(&out_dir.join("compare.txt"), &table)?;
    print!("{table}");
    Ok(())
}
