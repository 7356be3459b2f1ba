//! Adversarial training of the model bundle, checkpointing, and inference.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adaon::{
    fuse, local_stream, train_adaon, whole_image_terms, AdaOnConfig, AdaOnLoss, LocalMode,
    OrganStyleBank,
};
use crate::losses::{
    exclusion_mask, l1_term, lsgan_term, masked_l1_term, weighted_seg_ce_term, ExclusionMask,
    LossReport, DEFAULT_LAMBDA, SEG_EPS,
};
use crate::net::{load_checkpoint, save_checkpoint, ModelBundle, Variant};
use crate::nn::{AdamConfig, ForwardCtx, HasParams};
use crate::phantom::{
    augment_flip, denormalize_ct, normalize_for_training, ImageSlice, LabelMap, Modality, Organ,
    PairedRecord,
};
use crate::seed::{self, stream};
use crate::{Error, FeatureMap, Result, Scalar};

/// Training hyper-parameters. Every field has a default, so a config file only
/// needs the keys it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub adam: AdamConfig,
    /// Only 1 is supported.
    pub batch_size: usize,
    pub lambda: f64,
    pub seed: u64,
    pub variant: Variant,
    pub base_channels: usize,
    /// Write `epoch_NNNN.ckpt` every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    pub adaon: AdaOnConfig,
    /// Divide the masked reconstruction sum by the included pixel count
    /// instead of the full image.
    pub mean_over_included: bool,
    /// Train on the four flips of every record.
    pub augment: bool,
    pub folds: usize,
    pub fold: usize,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            adam: AdamConfig::default(),
            batch_size: 1,
            lambda: DEFAULT_LAMBDA,
            seed: 0,
            variant: Variant::Full,
            base_channels: 16,
            checkpoint_every: 10,
            adaon: AdaOnConfig::default(),
            mean_over_included: false,
            augment: true,
            folds: 1,
            fold: 0,
            data: None,
            out: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.adam.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.adam.lr));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if self.batch_size != 1 {
            return bad(format!("batch_size must be 1, got {}", self.batch_size));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if self.base_channels < 4 {
            return bad(format!("base_channels must be >= 4, got {}", self.base_channels));
        }
        if self.folds == 0 || self.fold >= self.folds {
            return bad(format!("fold {} out of {} folds", self.fold, self.folds));
        }
        if !(self.adaon.lr > 0.0) {
            return bad(format!("adaon.lr must be positive, got {}", self.adaon.lr));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub epoch: usize,
    pub steps: usize,
    /// Epoch means of the step reports.
    pub losses: LossReport,
    pub seconds: f64,
    /// Seed of the epoch's shuffling and per-step streams.
    pub rng_digest: String,
}

impl TrainLogEntry {
    /// Same entry with the wall-clock time cleared, for run comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            seconds: 0.0,
            ..self.clone()
        }
    }
}

/// A training record in network units.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub mr: FeatureMap<T>,
    pub ct: FeatureMap<T>,
    pub label_mr: LabelMap,
    /// Ground-truth MR organ masks, indexed like [`Organ::ALL`].
    pub organ_masks: [Vec<bool>; 3],
    pub exclusion: ExclusionMask,
}

impl<T: Scalar> Batch<T> {
    pub fn from_record(r: &PairedRecord) -> Result<Self> {
        Ok(Self {
            mr: normalize_for_training(&r.mr)?,
            ct: normalize_for_training(&r.ct)?,
            label_mr: r.label_mr.clone(),
            organ_masks: Organ::ALL.map(|o| r.label_mr.mask(o)),
            exclusion: exclusion_mask(&r.label_mr, &r.label_ct)?,
        })
    }
}

fn local_mode(variant: Variant) -> LocalMode {
    if variant.uses_adaon() {
        LocalMode::Restyle
    } else {
        LocalMode::PassThrough
    }
}

fn check_finite(term: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { term: term.into() })
    }
}

fn step_rng(config: &TrainConfig, epoch: usize, step: usize, net: u64) -> rand_chacha::ChaCha8Rng {
    seed::rng(config.seed, &[stream::STEP, epoch as u64, step as u64, net])
}

/// One discriminator, one generator and (when the variant has a segmenter) one
/// segmenter update on a single record.
///
/// The local stream uses the ground-truth MR organ masks; organs without a
/// trained style are left to the global stream.
pub fn train_step<T: Scalar>(
    bundle: &mut ModelBundle<T>,
    batch: &Batch<T>,
    config: &TrainConfig,
    epoch: usize,
    step: usize,
) -> Result<LossReport> {
    let variant = bundle.variant;
    let mut report = LossReport {
        lambda: config.lambda,
        ..LossReport::default()
    };

    let local = if variant.has_local_stream() {
        let masks = styled_masks(bundle, &batch.organ_masks);
        Some(local_stream(&batch.mr, &masks, &mut bundle.adaon, local_mode(variant))?)
    } else {
        None
    };
    let union = local.as_ref().map(|l| l.union_mask());

    let global = bundle
        .generator
        .forward(&batch.mr, &mut ForwardCtx::train(step_rng(config, epoch, step, 0)))?;
    let fake = match (&local, &union) {
        (Some(l), Some(u)) => fuse(&global, &l.combined, u)?,
        _ => global.clone(),
    };

    // discriminator: real toward 1, fake toward 0; G is not differentiated
    let d = &mut bundle.discriminator;
    d.zero_grad();
    let mut ctx = ForwardCtx::train(step_rng(config, epoch, step, 1));
    let real_term = lsgan_term(&d.forward(&batch.ct, &mut ctx)?, 1.0);
    d.backward_params(&real_term.grad);
    let fake_term = lsgan_term(&d.forward(&fake, &mut ctx)?, 0.0);
    d.backward_params(&fake_term.grad);
    report.gan_d = real_term.value + fake_term.value;
    check_finite("gan_d", report.gan_d)?;
    bundle.optim.discriminator.update(d);

    // generator: adversarial term through the updated D, plus reconstruction
    let mut frozen = ForwardCtx::frozen(step_rng(config, epoch, step, 2));
    let g_term = lsgan_term(&d.forward(&fake, &mut frozen)?, 1.0);
    let mut grad = d.backward(&g_term.grad);
    d.zero_grad();
    report.gan_g = g_term.value;
    check_finite("gan_g", report.gan_g)?;
    if let Some(u) = &union {
        // the fused image takes organ pixels from the local stream
        let n = grad.plane_len();
        for (i, g) in grad.data_mut().iter_mut().enumerate() {
            if u[i % n] {
                *g = T::zero();
            }
        }
    }
    report.l1 = l1_term(&fake, &batch.ct)?.value;
    let recon = if variant.masked_reconstruction() {
        masked_l1_term(&global, &batch.ct, &batch.exclusion, config.mean_over_included)?
    } else {
        l1_term(&global, &batch.ct)?
    };
    report.l_exc = recon.value;
    check_finite("l_exc", report.l_exc)?;
    let lambda = T::c(config.lambda);
    for (g, r) in grad.data_mut().iter_mut().zip(recon.grad.data()) {
        *g += lambda * *r;
    }
    if variant.whole_image_style() {
        let (loss, g) = whole_image_terms(&mut bundle.adaon.encoder, &global, &batch.mr, &batch.ct)?;
        report.style = loss.style;
        report.content = loss.content;
        check_finite("style", report.style)?;
        check_finite("content", report.content)?;
        grad.add_assign(&g);
    }
    bundle.generator.zero_grad();
    bundle.generator.backward(&grad);
    bundle.optim.generator.update(&mut bundle.generator);

    if variant.has_local_stream() {
        let s = &mut bundle.segmenter;
        s.zero_grad();
        let probs = s.forward(&batch.mr, &mut ForwardCtx::train(step_rng(config, epoch, step, 3)))?;
        let ce = weighted_seg_ce_term(&probs, batch.label_mr.classes(), SEG_EPS)?;
        report.seg_ce = ce.value;
        check_finite("seg_ce", report.seg_ce)?;
        s.backward(&ce.grad);
        bundle.optim.segmenter.update(s);
    }

    let report = report.with_total();
    check_finite("total", report.total)?;
    Ok(report)
}

/// Masks of organs the local stream can render: all of them in pass-through
/// mode, only those with a style in the bank when restyling.
fn styled_masks<T: Scalar>(bundle: &ModelBundle<T>, masks: &[Vec<bool>; 3]) -> [Vec<bool>; 3] {
    let mut out = masks.clone();
    if local_mode(bundle.variant) == LocalMode::Restyle {
        for (k, organ) in Organ::ALL.into_iter().enumerate() {
            let styled = bundle.adaon.bank.as_ref().is_some_and(|b| b.get(organ).is_some());
            if !styled {
                out[k].iter_mut().for_each(|v| *v = false);
            }
        }
    }
    out
}

/// Loss curves of the organ decoders, keyed `B`, `R`, `G`.
pub type AdaOnCurves = BTreeMap<String, Vec<AdaOnLoss>>;

/// Build the style bank from masked CT exemplars (CT labels) and train one
/// decoder per organ on masked MR content (MR labels).
pub fn pretrain_adaon<T: Scalar>(
    bundle: &mut ModelBundle<T>,
    records: &[PairedRecord],
    config: &AdaOnConfig,
) -> Result<AdaOnCurves> {
    let mut styles = Vec::new();
    let mut contents: [Vec<(FeatureMap<T>, Vec<bool>)>; 3] = Default::default();
    for r in records {
        let ct = normalize_for_training::<T>(&r.ct)?;
        let mr = normalize_for_training::<T>(&r.mr)?;
        for (k, organ) in Organ::ALL.into_iter().enumerate() {
            let ct_mask = r.label_ct.mask(organ);
            if ct_mask.iter().any(|&b| b) {
                styles.push((organ, ct.clone(), ct_mask));
            }
            let mr_mask = r.label_mr.mask(organ);
            if mr_mask.iter().filter(|&&b| b).count() >= 2 {
                contents[k].push((mr.clone(), mr_mask));
            }
        }
    }
    let bank = OrganStyleBank::from_exemplars(&mut bundle.adaon.encoder, &styles)?;
    let mut curves = AdaOnCurves::new();
    for (k, organ) in Organ::ALL.into_iter().enumerate() {
        let Some(style) = bank.get(organ).cloned() else { continue };
        if contents[k].is_empty() {
            continue;
        }
        let mut rng = seed::rng(bundle.seed, &[stream::ADAON, k as u64]);
        let adaon = &mut bundle.adaon;
        let curve = train_adaon(
            organ,
            &mut adaon.encoder,
            &mut adaon.decoders[k],
            &contents[k],
            &style,
            config,
            &mut rng,
        )?;
        curves.insert(organ.key().to_string(), curve);
    }
    // organs without a trained decoder are dropped from the bank
    let mut bank = bank;
    bank.organs.retain(|key, _| curves.contains_key(key));
    bundle.adaon.bank = Some(bank);
    Ok(curves)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitOutcome {
    pub log: Vec<TrainLogEntry>,
    /// Present when this call ran the decoder pre-stage.
    pub adaon: Option<AdaOnCurves>,
}

fn check_bundle<T: Scalar>(bundle: &ModelBundle<T>, config: &TrainConfig) -> Result<()> {
    if bundle.variant != config.variant
        || bundle.base_channels != config.base_channels
        || bundle.seed != config.seed
    {
        return Err(Error::InvalidConfig(format!(
            "bundle ({}, base {}, seed {}) does not match config ({}, base {}, seed {})",
            bundle.variant,
            bundle.base_channels,
            bundle.seed,
            config.variant,
            config.base_channels,
            config.seed
        )));
    }
    Ok(())
}

fn check_records(records: &[PairedRecord]) -> Result<()> {
    let Some(first) = records.first() else {
        return Err(Error::InvalidConfig("training split is empty".into()));
    };
    let n = first.size();
    if let Some(r) = records.iter().find(|r| r.size() != n) {
        return Err(Error::InvalidConfig(format!(
            "record {} is {}x{}, expected {n}x{n}",
            r.subject_id,
            r.size(),
            r.size()
        )));
    }
    Ok(())
}

/// Continue training `bundle` from its stored epoch up to `config.epochs`.
///
/// `on_epoch` sees the bundle and log entry after every completed epoch.
/// Every random draw derives from the seed, the epoch and the step, so
/// stopping after any epoch and resuming from its checkpoint reproduces the
/// uninterrupted run.
pub fn fit<T: Scalar>(
    bundle: &mut ModelBundle<T>,
    records: &[PairedRecord],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&ModelBundle<T>, &TrainLogEntry) -> Result<()>,
) -> Result<FitOutcome> {
    config.validate()?;
    check_bundle(bundle, config)?;
    let mut outcome = FitOutcome::default();
    if bundle.epoch >= config.epochs {
        return Ok(outcome);
    }
    check_records(records)?;
    let expanded: Vec<PairedRecord> = if config.augment {
        records.iter().flat_map(augment_flip).collect()
    } else {
        records.to_vec()
    };
    if bundle.variant.uses_adaon() && bundle.adaon.bank.is_none() {
        outcome.adaon = Some(pretrain_adaon(bundle, &expanded, &config.adaon)?);
    }
    let batches = expanded
        .iter()
        .map(Batch::from_record)
        .collect::<Result<Vec<Batch<T>>>>()?;
    for epoch in bundle.epoch + 1..=config.epochs {
        let start = Instant::now();
        let shuffle_seed = seed::derive(config.seed, &[stream::SHUFFLE, epoch as u64]);
        let mut order: Vec<usize> = (0..batches.len()).collect();
        order.shuffle(&mut seed::rng(shuffle_seed, &[]));
        let mut reports = Vec::with_capacity(order.len());
        for (step, &i) in order.iter().enumerate() {
            reports.push(train_step(bundle, &batches[i], config, epoch, step)?);
        }
        bundle.epoch = epoch;
        let entry = TrainLogEntry {
            epoch,
            steps: reports.len(),
            losses: LossReport::mean(&reports).expect("at least one step"),
            seconds: start.elapsed().as_secs_f64(),
            rng_digest: format!("{shuffle_seed:016x}"),
        };
        on_epoch(bundle, &entry)?;
        outcome.log.push(entry);
    }
    Ok(outcome)
}

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const TRAIN_LOG: &str = "log.jsonl";
pub const ADAON_LOG: &str = "adaon.json";

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}.ckpt")
}

pub fn read_log(path: &Path) -> Result<Vec<TrainLogEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::json(path, e))
        })
        .collect()
}

fn write_log(path: &Path, entries: &[TrainLogEntry]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&serde_json::to_string(e).expect("log entry serializes"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Train in `out`, writing checkpoints, the JSON-lines log and the decoder
/// loss curves. With `resume`, training continues from that checkpoint; its
/// architecture must match the config, and log entries past its epoch are
/// discarded.
pub fn train_to_dir(
    config: &TrainConfig,
    records: &[PairedRecord],
    out: &Path,
    resume: Option<&Path>,
) -> Result<(ModelBundle<f32>, FitOutcome)> {
    config.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let fresh = ModelBundle::<f32>::initialized(
        config.base_channels,
        config.variant,
        config.seed,
        config.adam,
    )?;
    let log_path = out.join(TRAIN_LOG);
    let (mut bundle, mut log) = match resume {
        Some(path) => {
            let b = load_checkpoint::<f32>(path)?;
            if b.arch_hash() != fresh.arch_hash() {
                return Err(Error::ArchitectureMismatch {
                    expected: fresh.arch_hash(),
                    found: b.arch_hash(),
                });
            }
            check_bundle(&b, config)?;
            let mut log = if log_path.exists() { read_log(&log_path)? } else { Vec::new() };
            log.retain(|e| e.epoch <= b.epoch);
            (b, log)
        }
        None => (fresh, Vec::new()),
    };
    write_log(&log_path, &log)?;
    let every = config.checkpoint_every;
    let outcome = fit(&mut bundle, records, config, |b, entry| {
        let mut f = fs::OpenOptions::new()
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        writeln!(f, "{}", serde_json::to_string(entry).expect("log entry serializes"))
            .map_err(|e| Error::io(&log_path, e))?;
        if every > 0 && entry.epoch % every == 0 {
            save_checkpoint(b, &out.join(epoch_checkpoint_name(entry.epoch)))?;
        }
        Ok(())
    })?;
    if let Some(curves) = &outcome.adaon {
        let path = out.join(ADAON_LOG);
        let text = serde_json::to_string_pretty(curves).expect("curves serialize");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    save_checkpoint(&bundle, &out.join(LAST_CHECKPOINT))?;
    log.extend(outcome.log.iter().cloned());
    Ok((
        bundle,
        FitOutcome {
            log,
            adaon: outcome.adaon,
        },
    ))
}

/// Synthetic CT and predicted organ labels for one MR slice.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub synct: ImageSlice,
    pub pred_labels: LabelMap,
}

/// Per-pixel argmax over class channels; ties go to the lower class id.
pub fn argmax_labels<T: Scalar>(probs: &FeatureMap<T>) -> Vec<u8> {
    let plane = probs.plane_len();
    (0..plane)
        .map(|i| {
            let mut best = 0;
            for c in 1..probs.channels() {
                if probs.data()[c * plane + i] > probs.data()[best * plane + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

/// Segment, synthesize both streams and fuse. Only the MR image is read.
pub fn infer<T: Scalar>(bundle: &mut ModelBundle<T>, mr: &ImageSlice) -> Result<Inference> {
    if mr.modality() != Modality::MR {
        return Err(Error::InvalidImage("inference input must be an MR slice".into()));
    }
    let x = normalize_for_training::<T>(mr)?;
    let global = bundle.generator.forward(&x, &mut ForwardCtx::eval())?;
    if !bundle.variant.has_local_stream() {
        return Ok(Inference {
            synct: denormalize_ct(&global)?,
            pred_labels: LabelMap::background(mr.size(), Modality::MR)?,
        });
    }
    let probs = bundle.segmenter.forward(&x, &mut ForwardCtx::eval())?;
    let pred_labels = LabelMap::new(mr.size(), Modality::MR, argmax_labels(&probs))?;
    let masks = styled_masks(bundle, &Organ::ALL.map(|o| pred_labels.mask(o)));
    let local = local_stream(&x, &masks, &mut bundle.adaon, local_mode(bundle.variant))?;
    let fused = fuse(&global, &local.combined, &local.union_mask())?;
    Ok(Inference {
        synct: denormalize_ct(&fused)?,
        pred_labels,
    })
}
