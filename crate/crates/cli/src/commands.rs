use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use synct_core::evaluation::{emit_report, evaluate, format_table, write_report, MetricsReport};
use synct_core::net::{load_checkpoint, ModelBundle};
use synct_core::phantom::{
    generate_cohort, load_dataset, write_dataset_meta, write_image, write_labels, write_record,
    DatasetMeta, PairedRecord,
};
use synct_core::training::{infer, train_to_dir, TrainConfig, LAST_CHECKPOINT};
use synct_core::Error;

use crate::args::{
    AblateArgs, Command, DataSelection, EvalArgs, GenerateArgs, InferArgs, PhantomCommand,
    ReportArgs, Split, TrainArgs, TrainOverrides,
};
use crate::manifest::{Manifest, MANIFEST};
use crate::{usage, Failure};

type Outcome = Result<(), Failure>;

pub const RUN_CONFIG: &str = "config.toml";
pub const REPORT_JSON: &str = "report.json";
pub const SLICE: &str = "slice000";

pub fn dispatch(command: Command, argv: &[String]) -> Outcome {
    match command {
        Command::Phantom(PhantomCommand::Generate(a)) => generate(a, argv),
        Command::Train(a) => train(a, argv),
        Command::Infer(a) => infer_cmd(a, argv),
        Command::Eval(a) => eval(a, argv),
        Command::Ablate(a) => ablate(a, argv),
        Command::Report(a) => report(a, argv),
    }
}

/// Creates `dir`, refusing a non-empty one unless `force`.
fn prepare_out(dir: &Path, force: bool) -> Outcome {
    let occupied = dir.is_dir()
        && fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .next()
            .is_some();
    if occupied && !force {
        return Err(usage(format!(
            "{} already exists and is not empty; pass --force to overwrite",
            dir.display()
        )));
    }
    if dir.exists() && !dir.is_dir() {
        return Err(usage(format!("{} is not a directory", dir.display())));
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn prepare_file(path: &Path, force: bool) -> Outcome {
    if path.exists() && !force {
        return Err(usage(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(())
}

fn config_error(e: Error) -> Failure {
    match e {
        Error::InvalidConfig(m) => usage(m),
        other => other.into(),
    }
}

fn generate(a: GenerateArgs, argv: &[String]) -> Outcome {
    if a.count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    prepare_out(&a.out, a.force)?;
    let records = generate_cohort(a.count, a.size, a.seed, a.mode).map_err(|e| match e {
        Error::InvalidPhantom(m) => usage(m),
        other => other.into(),
    })?;
    for r in &records {
        write_record(&a.out, SLICE, r)?;
    }
    let meta = DatasetMeta {
        seed: a.seed,
        size: Some(a.size),
        count: Some(a.count),
        inconsistency: Some(format!("{:?}", a.mode).to_lowercase()),
    };
    write_dataset_meta(&a.out, &meta)?;
    let config = serde_json::to_value(&meta).context("serializing dataset meta")?;
    Manifest::new("phantom generate", argv, Some(a.seed), config).write(&a.out.join(MANIFEST))?;
    eprintln!("wrote {} records to {}", records.len(), a.out.display());
    Ok(())
}

fn resolve_config(common: &TrainOverrides) -> Result<TrainConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            TrainConfig::from_toml(&text).map_err(config_error)?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = common.seed {
        cfg.seed = v;
    }
    if let Some(v) = common.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = common.base_channels {
        cfg.base_channels = v;
    }
    if let Some(v) = common.folds {
        cfg.folds = v;
    }
    if let Some(v) = common.fold {
        cfg.fold = v;
    }
    if common.no_augment {
        cfg.augment = false;
    }
    Ok(cfg)
}

fn train_records(cfg: &TrainConfig, data: &Path) -> Result<Vec<PairedRecord>, Failure> {
    let index = load_dataset(data, cfg.folds).map_err(config_error)?;
    let (train, _) = index.split(cfg.fold);
    if train.is_empty() {
        return Err(usage(format!("no training records in {}", data.display())));
    }
    Ok(index.load_all(&train)?)
}

fn train(a: TrainArgs, argv: &[String]) -> Outcome {
    let mut cfg = resolve_config(&a.common)?;
    if let Some(v) = a.variant {
        cfg.variant = v;
    }
    let data = a.data.or(cfg.data.clone()).ok_or_else(|| usage("--data is required"))?;
    let out = a.out.or(cfg.out.clone()).ok_or_else(|| usage("--out is required"))?;
    cfg.data = Some(data.clone());
    cfg.out = Some(out.clone());
    cfg.validate().map_err(config_error)?;
    if a.resume.is_none() {
        prepare_out(&out, a.force)?;
    }
    let records = train_records(&cfg, &data)?;
    fs::write(out.join(RUN_CONFIG), cfg.to_toml()).context("writing run config")?;
    let config = serde_json::to_value(&cfg).context("serializing config")?;
    Manifest::new("train", argv, Some(cfg.seed), config).write(&out.join(MANIFEST))?;
    let (_, outcome) = train_to_dir(&cfg, &records, &out, a.resume.as_deref())?;
    for e in &outcome.log {
        eprintln!(
            "epoch {:>4}  total {:.4}  l_exc {:.4}  gan_d {:.4}  gan_g {:.4}  seg {:.4}",
            e.epoch, e.losses.total, e.losses.l_exc, e.losses.gan_d, e.losses.gan_g, e.losses.seg_ce
        );
    }
    eprintln!("checkpoint {}", out.join(LAST_CHECKPOINT).display());
    Ok(())
}

/// A checkpoint file, or the `last.ckpt` of a run directory; `run/last`
/// resolves to `run/last.ckpt`.
fn resolve_checkpoint(path: &Path) -> Result<PathBuf, Failure> {
    let candidates = [
        path.to_path_buf(),
        path.join(LAST_CHECKPOINT),
        path.with_extension("ckpt"),
    ];
    candidates
        .into_iter()
        .find(|p| p.is_file())
        .ok_or_else(|| usage(format!("no checkpoint at {}", path.display())))
}

fn run_config(ckpt: &Path) -> Result<Option<TrainConfig>, Failure> {
    let path = ckpt.parent().unwrap_or(Path::new(".")).join(RUN_CONFIG);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Some(TrainConfig::from_toml(&text)?))
}

struct Selected {
    ckpt: PathBuf,
    bundle: ModelBundle<f32>,
    records: Vec<(PairedRecord, String)>,
}

fn select(sel: &DataSelection) -> Result<Selected, Failure> {
    let ckpt = resolve_checkpoint(&sel.checkpoint)?;
    let bundle = load_checkpoint::<f32>(&ckpt)?;
    let run = run_config(&ckpt)?;
    let folds = sel.folds.or(run.as_ref().map(|c| c.folds)).unwrap_or(1);
    let fold = sel.fold.or(run.as_ref().map(|c| c.fold)).unwrap_or(0);
    if fold >= folds {
        return Err(usage(format!("fold {fold} out of {folds} folds")));
    }
    let index = load_dataset(&sel.data, folds).map_err(config_error)?;
    let (train, test) = index.split(fold);
    let paths = match sel.split {
        Split::All => index.records.iter().collect(),
        Split::Train => train,
        Split::Test => test,
    };
    if paths.is_empty() {
        return Err(Error::EmptySplit.into());
    }
    let records = paths
        .iter()
        .map(|p| Ok((index.load(p)?, p.slice.clone())))
        .collect::<Result<Vec<_>, Error>>()?;
    Ok(Selected {
        ckpt,
        bundle,
        records,
    })
}

fn infer_cmd(a: InferArgs, argv: &[String]) -> Outcome {
    let mut s = select(&a.select)?;
    prepare_out(&a.out, a.force)?;
    for (r, slice) in &s.records {
        let out = infer(&mut s.bundle, &r.mr)?;
        let dir = a.out.join(&r.subject_id).join(slice);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        write_image(&dir, "synct", &out.synct)?;
        write_labels(&dir, "label_pred", &out.pred_labels)?;
    }
    let config = serde_json::json!({
        "checkpoint": s.ckpt,
        "data": a.select.data,
        "split": format!("{:?}", a.select.split).to_lowercase(),
        "variant": s.bundle.variant,
    });
    Manifest::new("infer", argv, Some(s.bundle.seed), config).write(&a.out.join(MANIFEST))?;
    eprintln!("wrote {} predictions to {}", s.records.len(), a.out.display());
    Ok(())
}

fn manifest_beside(report: &Path) -> PathBuf {
    report.with_extension(MANIFEST)
}

fn eval(a: EvalArgs, argv: &[String]) -> Outcome {
    let mut s = select(&a.select)?;
    let report_path = a
        .report
        .clone()
        .unwrap_or_else(|| s.ckpt.parent().unwrap_or(Path::new(".")).join(REPORT_JSON));
    prepare_file(&report_path, a.force)?;
    if let Some(plots) = &a.plots {
        prepare_out(plots, a.force)?;
    }
    let records: Vec<PairedRecord> = s.records.iter().map(|(r, _)| r.clone()).collect();
    let label = s.bundle.variant.name();
    let report = evaluate(&mut s.bundle, &records, label, a.plots.as_deref())?;
    write_report(&report, &report_path)?;
    let config = serde_json::json!({
        "checkpoint": s.ckpt,
        "data": a.select.data,
        "split": format!("{:?}", a.select.split).to_lowercase(),
        "report": report_path,
        "plots": a.plots,
    });
    Manifest::new("eval", argv, Some(s.bundle.seed), config).write(&manifest_beside(&report_path))?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report).context("serializing report")?);
    } else {
        print!("{}", format_table(std::slice::from_ref(&report)));
    }
    Ok(())
}

fn ablate(a: AblateArgs, argv: &[String]) -> Outcome {
    if a.seeds == 0 || a.variants.is_empty() {
        return Err(usage("--seeds and --variants must be nonempty"));
    }
    let base = resolve_config(&a.common)?;
    base.validate().map_err(config_error)?;
    let records = train_records(&base, &a.data)?;
    let test = match &a.test_data {
        Some(dir) => {
            let index = load_dataset(dir, 1)?;
            index.load_all(&index.records.iter().collect::<Vec<_>>())?
        }
        None if base.folds > 1 => {
            let index = load_dataset(&a.data, base.folds)?;
            index.load_all(&index.split(base.fold).1)?
        }
        None => return Err(usage("ablate needs --test-data or --folds greater than 1")),
    };
    prepare_out(&a.out, a.force)?;
    let config = serde_json::json!({
        "base": base,
        "variants": a.variants,
        "seeds": a.seeds,
        "data": a.data,
        "test_data": a.test_data,
    });
    Manifest::new("ablate", argv, Some(base.seed), config).write(&a.out.join(MANIFEST))?;

    let mut merged: Vec<Vec<_>> = vec![Vec::new(); a.variants.len()];
    let mut per_seed = Vec::new();
    for k in 0..a.seeds {
        for (v, &variant) in a.variants.iter().enumerate() {
            let cfg = TrainConfig {
                seed: base.seed + k,
                variant,
                ..base.clone()
            };
            let dir = a.out.join(variant.name()).join(format!("seed{}", cfg.seed));
            eprintln!("training {variant} with seed {}", cfg.seed);
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            fs::write(dir.join(RUN_CONFIG), cfg.to_toml()).context("writing run config")?;
            let (mut bundle, _) = train_to_dir(&cfg, &records, &dir, None)?;
            let label = format!("{variant}/seed{}", cfg.seed);
            let report = evaluate(&mut bundle, &test, &label, None)?;
            write_report(&report, &dir.join(REPORT_JSON))?;
            for s in &report.subjects {
                let mut s = s.clone();
                s.subject_id = format!("seed{}/{}", cfg.seed, s.subject_id);
                merged[v].push(s);
            }
            per_seed.push(report);
        }
    }
    let mut reports: Vec<MetricsReport> = a
        .variants
        .iter()
        .zip(merged)
        .map(|(v, subjects)| MetricsReport::from_subjects(v.name(), subjects))
        .collect();
    emit_report(&reports, &a.out)?;
    reports.extend(per_seed);
    let path = a.out.join("table_per_seed.txt");
    fs::write(&path, format_table(&reports[a.variants.len()..]))
        .with_context(|| format!("writing {}", path.display()))?;
    print!("{}", format_table(&reports[..a.variants.len()]));
    Ok(())
}

fn read_reports(path: &Path) -> Result<Vec<MetricsReport>, Failure> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if let Ok(many) = serde_json::from_str::<Vec<MetricsReport>>(&text) {
        return Ok(many);
    }
    let one: MetricsReport = serde_json::from_str(&text)
        .with_context(|| format!("{} is not a metrics report", path.display()))?;
    Ok(vec![one])
}

fn report(a: ReportArgs, argv: &[String]) -> Outcome {
    let mut reports = Vec::new();
    for p in &a.inputs {
        reports.extend(read_reports(p)?);
    }
    prepare_out(&a.out, a.force)?;
    emit_report(&reports, &a.out)?;
    let config = serde_json::json!({ "inputs": a.inputs });
    Manifest::new("report", argv, None, config).write(&a.out.join(MANIFEST))?;
    print!("{}", format_table(&reports));
    Ok(())
}
