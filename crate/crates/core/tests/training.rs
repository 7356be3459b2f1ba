use synct_core::adaon::AdaOnConfig;
use synct_core::net::{load_checkpoint, param_digest, ModelBundle, Variant};
use synct_core::nn::AdamConfig;
use synct_core::phantom::{
    denormalize_hu, generate_cohort, Inconsistency, Modality, PairedRecord,
};
use synct_core::training::{
    fit, infer, read_log, train_step, train_to_dir, Batch, TrainConfig, TrainLogEntry,
    LAST_CHECKPOINT, TRAIN_LOG,
};
use synct_core::Error;

fn records(n: usize) -> Vec<PairedRecord> {
    generate_cohort(n, 32, 11, Inconsistency::Both).unwrap()
}

fn small(variant: Variant, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        variant,
        base_channels: 4,
        seed: 5,
        checkpoint_every: 1,
        augment: false,
        adaon: AdaOnConfig {
            iterations: 3,
            ..AdaOnConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn bundle(config: &TrainConfig) -> ModelBundle<f32> {
    ModelBundle::initialized(config.base_channels, config.variant, config.seed, config.adam).unwrap()
}

fn untimed(log: &[TrainLogEntry]) -> Vec<TrainLogEntry> {
    log.iter().map(TrainLogEntry::without_timing).collect()
}

#[test]
fn identical_runs_give_identical_logs() {
    let recs = records(2);
    let cfg = small(Variant::Full, 2);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ba, oa) = train_to_dir(&cfg, &recs, a.path(), None).unwrap();
    let (bb, ob) = train_to_dir(&cfg, &recs, b.path(), None).unwrap();
    assert_eq!(oa.log.len(), 2);
    assert_eq!(untimed(&oa.log), untimed(&ob.log));
    assert_eq!(param_digest(&ba), param_digest(&bb));
    assert_eq!(untimed(&read_log(&a.path().join(TRAIN_LOG)).unwrap()), untimed(&oa.log));
    assert!(oa.adaon.is_some());
}

#[test]
fn resume_matches_uninterrupted() {
    let recs = records(2);
    let full = tempfile::tempdir().unwrap();
    let (b_full, o_full) = train_to_dir(&small(Variant::Full, 3), &recs, full.path(), None).unwrap();

    let part = tempfile::tempdir().unwrap();
    train_to_dir(&small(Variant::Full, 1), &recs, part.path(), None).unwrap();
    let ckpt = part.path().join(LAST_CHECKPOINT);
    let (b_res, o_res) =
        train_to_dir(&small(Variant::Full, 3), &recs, part.path(), Some(&ckpt)).unwrap();
    assert!(o_res.adaon.is_none(), "decoders come from the checkpoint");
    assert_eq!(untimed(&o_full.log), untimed(&o_res.log));
    assert_eq!(param_digest(&b_full), param_digest(&b_res));
    assert_eq!(b_full.optim, b_res.optim);
    let on_disk = load_checkpoint::<f32>(&part.path().join(LAST_CHECKPOINT)).unwrap();
    assert_eq!(param_digest(&on_disk), param_digest(&b_full));
}

#[test]
fn resume_drops_log_entries_past_the_checkpoint() {
    let recs = records(1);
    let dir = tempfile::tempdir().unwrap();
    train_to_dir(&small(Variant::Cgan, 3), &recs, dir.path(), None).unwrap();
    let ckpt = dir.path().join("epoch_0001.ckpt");
    let (_, out) = train_to_dir(&small(Variant::Cgan, 2), &recs, dir.path(), Some(&ckpt)).unwrap();
    let epochs: Vec<usize> = out.log.iter().map(|e| e.epoch).collect();
    assert_eq!(epochs, [1, 2]);
    assert_eq!(read_log(&dir.path().join(TRAIN_LOG)).unwrap().len(), 2);
}

#[test]
fn resume_refuses_other_architecture() {
    let recs = records(1);
    let dir = tempfile::tempdir().unwrap();
    train_to_dir(&small(Variant::Cgan, 1), &recs, dir.path(), None).unwrap();
    let mut wider = small(Variant::Cgan, 2);
    wider.base_channels = 6;
    let err = train_to_dir(&wider, &recs, dir.path(), Some(&dir.path().join(LAST_CHECKPOINT)));
    assert!(matches!(err, Err(Error::ArchitectureMismatch { .. })));
}

#[test]
fn zero_epochs_leaves_bundle_untouched() {
    let cfg = small(Variant::Full, 0);
    let mut b = bundle(&cfg);
    let before = param_digest(&b);
    let out = fit(&mut b, &records(1), &cfg, |_, _| Ok(())).unwrap();
    assert!(out.log.is_empty() && out.adaon.is_none());
    assert_eq!(param_digest(&b), before);
    assert!(b.adaon.bank.is_none());
}

#[test]
fn fit_rejects_mismatched_bundle_and_empty_split() {
    let cfg = small(Variant::Full, 1);
    let mut other = bundle(&small(Variant::Cgan, 1));
    assert!(matches!(fit(&mut other, &records(1), &cfg, |_, _| Ok(())), Err(Error::InvalidConfig(_))));
    let mut b = bundle(&cfg);
    assert!(matches!(fit(&mut b, &[], &cfg, |_, _| Ok(())), Err(Error::InvalidConfig(_))));
}

#[test]
fn step_updates_only_the_trained_networks() {
    let recs = records(1);
    let batch = Batch::<f32>::from_record(&recs[0]).unwrap();
    for variant in Variant::ALL {
        let cfg = small(variant, 1);
        let mut b = bundle(&cfg);
        let before = (
            param_digest(&b.generator),
            param_digest(&b.discriminator),
            param_digest(&b.segmenter),
            param_digest(&b.adaon),
        );
        let report = train_step(&mut b, &batch, &cfg, 1, 0).unwrap();
        assert!(report.total.is_finite());
        assert_ne!(param_digest(&b.generator), before.0, "{variant}");
        assert_ne!(param_digest(&b.discriminator), before.1, "{variant}");
        assert_eq!(
            param_digest(&b.segmenter) != before.2,
            variant.has_local_stream(),
            "{variant}"
        );
        // decoders only move in the pre-stage and the encoder never does
        assert_eq!(param_digest(&b.adaon), before.3, "{variant}");
        assert_eq!(report.seg_ce > 0.0, variant.has_local_stream());
        assert_eq!(report.style > 0.0, variant == Variant::WoSeg);
    }
}

#[test]
fn cgan_inference_has_no_labels() {
    let recs = records(1);
    let mut b = bundle(&small(Variant::Cgan, 1));
    let out = infer(&mut b, &recs[0].mr).unwrap();
    assert_eq!(out.synct.modality(), Modality::CT);
    assert!(out.pred_labels.classes().iter().all(|&c| c == 0));
    assert!(matches!(infer(&mut b, &recs[0].ct), Err(Error::InvalidImage(_))));
}

#[test]
fn pass_through_copies_mr_into_predicted_organs() {
    let recs = records(1);
    let cfg = small(Variant::WoAdaon, 1);
    let mut b = bundle(&cfg);
    // A few segmenter steps so that some organ pixels are predicted.
    let batch = Batch::<f32>::from_record(&recs[0]).unwrap();
    let mut out = infer(&mut b, &recs[0].mr).unwrap();
    for step in 0..40 {
        if out.pred_labels.classes().iter().any(|&c| c != 0) {
            break;
        }
        train_step(&mut b, &batch, &cfg, 1, step).unwrap();
        out = infer(&mut b, &recs[0].mr).unwrap();
    }
    let organ: Vec<usize> = (0..out.pred_labels.classes().len())
        .filter(|&i| out.pred_labels.classes()[i] != 0)
        .collect();
    assert!(!organ.is_empty(), "segmenter predicts some organ pixels");
    let (lo, hi) = Modality::MR.range();
    for i in organ {
        let v = recs[0].mr.pixels()[i] as f64;
        let norm = 2.0 * (v - lo as f64) / (hi - lo) as f64 - 1.0;
        let expect = denormalize_hu(norm);
        assert!((out.synct.pixels()[i] as f64 - expect).abs() < 0.05, "pixel {i}");
    }
}

#[test]
fn config_toml_round_trip() {
    let cfg = small(Variant::WoLexc, 7);
    let back = TrainConfig::from_toml(&cfg.to_toml()).unwrap();
    assert_eq!(back, cfg);
    let partial = TrainConfig::from_toml("epochs = 3\nvariant = \"cgan\"\n").unwrap();
    assert_eq!(partial.epochs, 3);
    assert_eq!(partial.variant, Variant::Cgan);
    assert_eq!(partial.lambda, TrainConfig::default().lambda);
    assert!(matches!(TrainConfig::from_toml("epoch = 3\n"), Err(Error::InvalidConfig(_))));
    assert!(matches!(TrainConfig::from_toml("batch_size = 2\n"), Err(Error::InvalidConfig(_))));
    let mut bad = TrainConfig::default();
    bad.adam = AdamConfig { lr: 0.0, ..bad.adam };
    assert!(bad.validate().is_err());
}
