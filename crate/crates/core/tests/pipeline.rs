use bda::backbone::{transfer_weights, BackboneConfig, BranchMode, UNet};
use bda::config::{Stage, TrainConfig};
use bda::infer::{evaluate, evaluate_samples, predict};
use bda::io::checkpoint::Checkpoint;
use bda::io::dataset::{DatasetManifest, Split};
use bda::io::synth::{generate_samples, synth_generate, SynthConfig};
use bda::sample::{LabelMap, RgbImage, SamplePair, SegSample};
use bda::train::{checkpoint_path, train_stage1, train_stage2};

fn synth(n: usize, seed: u64, split: Split) -> Vec<SamplePair> {
    let cfg = SynthConfig {
        num_samples: n,
        seed,
        ..Default::default()
    };
    generate_samples(&cfg, split)
        .unwrap()
        .into_iter()
        .map(|(s, _)| s)
        .collect()
}

fn seg(samples: &[SamplePair]) -> Vec<SegSample> {
    samples
        .iter()
        .map(|s| SegSample {
            id: s.id.clone(),
            pre: s.pre.clone(),
            label: s.label.clone(),
        })
        .collect()
}

fn quick(stage: Stage, epochs: usize) -> TrainConfig {
    let mut c = TrainConfig::desk(stage);
    c.epochs = epochs;
    c
}

#[test]
fn stage1_never_reads_post_images() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        num_samples: 4,
        ..Default::default()
    };
    let m = synth_generate(&cfg, dir.path(), Split::Train).unwrap();
    let before = m.load_all_seg().unwrap();
    let out_a = tempfile::tempdir().unwrap();
    let a = train_stage1(&before, &[], &quick(Stage::One, 2), Some(out_a.path())).unwrap();

    for r in &m.records {
        std::fs::remove_file(m.path_of(&r.post)).unwrap();
    }
    let m = DatasetManifest::load(dir.path()).unwrap();
    assert!(m.load_all().is_err());
    let after = m.load_all_seg().unwrap();
    assert_eq!(after, before);
    let out_b = tempfile::tempdir().unwrap();
    let b = train_stage1(&after, &[], &quick(Stage::One, 2), Some(out_b.path())).unwrap();
    assert_eq!(a.model.params(), b.model.params());
    let bytes = |d: &std::path::Path| std::fs::read(checkpoint_path(d, Stage::One)).unwrap();
    assert_eq!(bytes(out_a.path()), bytes(out_b.path()));
}

#[test]
fn transfer_is_not_worse_after_the_first_epoch() {
    let data = synth(48, 11, Split::Train);
    let (train, val) = data.split_at(40);
    let s1 = train_stage1(&seg(train), &seg(val), &quick(Stage::One, 8), None).unwrap();
    let cfg = quick(Stage::Two, 1);
    let with = train_stage2(train, val, &cfg, Some(&s1.model), None).unwrap();
    let without = train_stage2(train, val, &cfg, None, None).unwrap();
    let (w, wo) = (
        with.history[0].val_loss.unwrap(),
        without.history[0].val_loss.unwrap(),
    );
    assert!(w <= wo, "with transfer {w}, without {wo}");
}

#[test]
fn stage2_checkpoint_reload_predicts_identically() {
    let data = synth(6, 2, Split::Train);
    let s1 = train_stage1(&seg(&data), &[], &quick(Stage::One, 1), None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let s2 = train_stage2(
        &data,
        &[],
        &quick(Stage::Two, 1),
        Some(&s1.model),
        Some(dir.path()),
    )
    .unwrap();
    let reloaded = Checkpoint::load(&checkpoint_path(dir.path(), Stage::Two))
        .unwrap()
        .to_model()
        .unwrap();
    let a = predict(&s1.model, &s2.model, &data[0]).unwrap();
    let b = predict(&s1.model, &reloaded, &data[0]).unwrap();
    assert_eq!(a, b);
}

#[test]
fn incompatible_stage1_checkpoint_is_rejected_whole() {
    let mut wide = BackboneConfig::desk();
    wide.encoder_channels[2] *= 2;
    let s1 = UNet::build(&wide, BranchMode::Single, 0).unwrap();
    let data = synth(2, 0, Split::Train);
    assert!(train_stage2(&data, &[], &quick(Stage::Two, 1), Some(&s1), None).is_err());
    let mut s2 = UNet::build(&BackboneConfig::desk(), BranchMode::DualShared, 0).unwrap();
    let before = s2.params().clone();
    assert!(transfer_weights(&s1, &mut s2).is_err());
    assert_eq!(s2.params(), &before);
}

#[test]
fn predicts_full_1024_images_without_tiling() {
    let cfg = BackboneConfig::desk();
    let s1 = UNet::build(&cfg, BranchMode::Single, 1).unwrap();
    let s2 = UNet::build(&cfg, BranchMode::DualShared, 2).unwrap();
    let n = 1024;
    let pre = RgbImage::new(n, n, (0..3 * n * n).map(|i| (i * 7 % 251) as u8).collect()).unwrap();
    let post = RgbImage::new(n, n, (0..3 * n * n).map(|i| (i * 13 % 241) as u8).collect()).unwrap();
    let s = SamplePair::new("big", pre, post, LabelMap::zeros(n, n)).unwrap();
    let out = predict(&s1, &s2, &s).unwrap();
    assert_eq!(out.p_b_logits.shape(), &[1, n, n]);
    assert_eq!(out.p_d.shape(), &[5, n, n]);
    assert_eq!((out.p_final.height(), out.p_final.width()), (n, n));
    assert_eq!(out.masked_violations(), 0);
}

#[test]
fn manifest_order_does_not_change_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        num_samples: 5,
        ..Default::default()
    };
    let mut m = synth_generate(&cfg, dir.path(), Split::Test).unwrap();
    let bcfg = BackboneConfig::desk();
    let s1 = UNet::build(&bcfg, BranchMode::Single, 4).unwrap();
    let s2 = UNet::build(&bcfg, BranchMode::DualShared, 5).unwrap();
    let a = evaluate(&m, &s1, &s2).unwrap();
    m.records.reverse();
    m.records.swap(0, 2);
    let b = evaluate(&m, &s1, &s2).unwrap();
    assert_eq!(a.report(), b.report());
    assert_eq!(
        serde_json::to_string(&a.report()).unwrap(),
        serde_json::to_string(&b.report()).unwrap()
    );
}

#[test]
fn perfect_predictions_score_one() {
    // a stage-1 model whose output is the truth is not trainable in a test,
    // so this checks the scoring path with the truth fed back as prediction
    let data = synth(3, 9, Split::Test);
    let mut acc = bda::metrics::Accumulator::new();
    for s in &data {
        let b = s.label.building_mask();
        acc.add(s.label.data(), s.label.data(), &b, &b).unwrap();
    }
    let r = acc.report();
    assert_eq!((r.f1_b, r.f1_d, r.f1_s), (1.0, 1.0, 1.0));
    let bcfg = BackboneConfig::desk();
    let s1 = UNet::build(&bcfg, BranchMode::Single, 4).unwrap();
    let s2 = UNet::build(&bcfg, BranchMode::DualShared, 5).unwrap();
    let e = evaluate_samples(&s1, &s2, &data).unwrap();
    let r = e.report();
    assert!((r.f1_s - (0.3 * r.f1_b + 0.7 * r.f1_d)).abs() < 1e-12);
}
