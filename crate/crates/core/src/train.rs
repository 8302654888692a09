//! Training loops for both stages.
//!
//! Each epoch visits the training samples in a seed-shuffled order. A batch
//! runs one tape per sample, sums the parameter gradients in batch order,
//! averages them and takes one Adam step. All random choices for a sample
//! come from `(seed, epoch, index)`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::augment::{self, DifficultPool, SpatialTransform};
use crate::autodiff::{Tape, Var};
use crate::backbone::{transfer_weights, UNet};
use crate::config::{Stage, TrainConfig};
use crate::error::{Error, Result};
use crate::io::checkpoint::Checkpoint;
use crate::nn;
use crate::optim::{adam_step, AdamState};
use crate::params::Bound;
use crate::rng;
use crate::sample::{SamplePair, SegSample};
use crate::tensor::Tensor;

const STREAM_SHUFFLE: u64 = 0;
const STREAM_CROP: u64 = 1;
const STREAM_FLIP: u64 = 2;
const STREAM_CUTMIX: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: UNet,
    pub history: Vec<EpochRecord>,
    /// Final checkpoint, when an output directory was given.
    pub checkpoint: Option<PathBuf>,
}

/// Where a stage writes its checkpoint and loss curve.
pub fn checkpoint_path(out_dir: &Path, stage: Stage) -> PathBuf {
    out_dir.join(format!("stage{}.bdack", stage.number()))
}

pub fn loss_csv_path(out_dir: &Path, stage: Stage) -> PathBuf {
    out_dir.join(format!("stage{}_loss.csv", stage.number()))
}

/// Splits `n` samples into training and held-out indices. The held-out set
/// is the last `ceil(n · fraction)` samples, but never all of them.
pub fn holdout_split(n: usize, fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let held = ((n as f64 * fraction).ceil() as usize).min(n.saturating_sub(1));
    ((0..n - held).collect(), (n - held..n).collect())
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss\n");
    for r in history {
        let val = r.val_loss.map(|v| format!("{v:.9}")).unwrap_or_default();
        out.push_str(&format!("{},{:.9},{}\n", r.epoch, r.train_loss, val));
    }
    out
}

/// Adds context to numerical failures raised inside a forward or backward pass.
fn numerical_context(e: Error, epoch: usize, id: &str) -> Error {
    match e {
        Error::NonFinite { op } => Error::Numerical(format!(
            "non-finite value in {op} at epoch {}, sample {id}; aborting",
            epoch + 1
        )),
        other => other,
    }
}

fn check_extent(id: &str, h: usize, w: usize) -> Result<()> {
    if h % 32 != 0 || w % 32 != 0 {
        return Err(Error::Data(format!(
            "sample {id}: extent {h}×{w} not divisible by 32"
        )));
    }
    Ok(())
}

fn crop_origin(
    config: &TrainConfig,
    epoch: usize,
    index: usize,
    h: usize,
    w: usize,
) -> Result<(usize, usize)> {
    let mut r = augment::sample_rng(config.seed, epoch as u64, index as u64, STREAM_CROP);
    augment::random_crop_origin(h, w, config.crop, &mut r)
}

fn transform(config: &TrainConfig, epoch: usize, index: usize, square: bool) -> SpatialTransform {
    if !config.augment {
        return SpatialTransform::default();
    }
    let mut r = augment::sample_rng(config.seed, epoch as u64, index as u64, STREAM_FLIP);
    SpatialTransform::draw(&mut r, square)
}

fn metadata(config: &TrainConfig, epoch: usize) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("stage".into(), config.stage.number().to_string()),
        ("epoch".into(), epoch.to_string()),
        ("seed".into(), config.seed.to_string()),
        ("config_hash".into(), config.hash()),
        ("config".into(), config.to_text()),
    ])
}

/// Shared epoch/batch loop. `sample_loss` builds the loss of training
/// sample `index` in `epoch`; `val_loss` scores held-out sample `j`.
fn run<F, V>(
    model: &mut UNet,
    n_train: usize,
    n_val: usize,
    config: &TrainConfig,
    out_dir: Option<&Path>,
    ids: &dyn Fn(usize) -> String,
    sample_loss: F,
    val_loss: V,
) -> Result<(Vec<EpochRecord>, Option<PathBuf>)>
where
    F: for<'t> Fn(&UNet, &Bound<'t>, &'t Tape, usize, usize) -> Result<Var<'t>>,
    V: Fn(&UNet, usize) -> Result<f64>,
{
    if n_train == 0 {
        return Err(Error::Data("training set is empty".into()));
    }
    let adam = config.adam();
    let mut state = AdamState::new(model.params());
    let mut history = Vec::with_capacity(config.epochs);
    let mut last = None;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n_train).collect();
        order.shuffle(&mut rng::derive(
            config.seed,
            &[epoch as u64, u64::MAX, STREAM_SHUFFLE],
        ));

        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut acc: Option<Vec<Tensor>> = None;
            for &i in batch {
                let tape = Tape::new();
                let p = model.params().bind(&tape, true);
                let step = || -> Result<(f64, Vec<Tensor>)> {
                    let loss = sample_loss(model, &p, &tape, epoch, i)?;
                    let value = loss.value().item()?;
                    if !value.is_finite() {
                        return Err(Error::NonFinite { op: "loss" });
                    }
                    let grads = tape.backward(&loss)?;
                    Ok((value, p.gradients(&grads)))
                };
                let (value, grads) = step().map_err(|e| numerical_context(e, epoch, &ids(i)))?;
                loss_sum += value;
                match acc.as_mut() {
                    None => acc = Some(grads),
                    Some(a) => a.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
                }
            }
            let mut grads = acc.expect("batches are non-empty");
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| g.scale_inplace(scale));
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient at epoch {}; aborting",
                    epoch + 1
                )));
            }
            adam_step(model.params_mut(), &grads, &mut state, &adam)?;
        }

        let val = if n_val == 0 {
            None
        } else {
            let mut s = 0.0;
            for j in 0..n_val {
                s += val_loss(model, j)?;
            }
            Some(s / n_val as f64)
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / n_train as f64,
            val_loss: val,
        };
        log::info!(
            "stage {} epoch {}/{}: train loss {:.5}{}",
            config.stage.number(),
            record.epoch,
            config.epochs,
            record.train_loss,
            val.map(|v| format!(", val loss {v:.5}"))
                .unwrap_or_default()
        );
        history.push(record);

        if let Some(dir) = out_dir {
            let path = checkpoint_path(dir, config.stage);
            Checkpoint::from_model(model, metadata(config, epoch + 1)).save(&path)?;
            crate::io::write_atomic(
                &loss_csv_path(dir, config.stage),
                history_csv(&history).as_bytes(),
            )?;
            last = Some(path);
        }
    }
    Ok((history, last))
}

fn seg_loss<'t>(model: &UNet, p: &Bound<'t>, tape: &'t Tape, s: &SegSample) -> Result<Var<'t>> {
    let x = tape.constant(s.pre.to_tensor());
    let prob = model.forward_single(p, &x)?.sigmoid()?;
    nn::binary_cross_entropy(&prob, &s.label.building_tensor())
}

fn damage_loss<'t>(model: &UNet, p: &Bound<'t>, tape: &'t Tape, s: &SamplePair) -> Result<Var<'t>> {
    let pre = tape.constant(s.pre.to_tensor());
    let post = tape.constant(s.post.to_tensor());
    let logits = model.forward_dual(p, &pre, &post)?;
    nn::categorical_cross_entropy(&logits, s.label.data())
}

/// Building segmentation on pre-disaster images only.
pub fn train_stage1(
    train: &[SegSample],
    val: &[SegSample],
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if config.stage != Stage::One {
        return Err(Error::Config("train_stage1 needs stage = 1".into()));
    }
    config.validate()?;
    for s in train.iter().chain(val) {
        check_extent(&s.id, s.label.height(), s.label.width())?;
    }
    let mut model = UNet::from_spec(&config.model_spec(), config.seed)?;
    let ids = |i: usize| train[i].id.clone();
    let (history, checkpoint) = run(
        &mut model,
        train.len(),
        val.len(),
        config,
        out_dir,
        &ids,
        |m, p, tape, epoch, i| {
            let s = &train[i];
            let (h, w) = (s.label.height(), s.label.width());
            let (top, left) = crop_origin(config, epoch, i, h, w)?;
            let c = config.crop;
            let cropped = SegSample {
                id: s.id.clone(),
                pre: s.pre.crop(top, left, c, c)?,
                label: s.label.crop(top, left, c, c)?,
            };
            let t = transform(config, epoch, i, true).apply_seg(&cropped);
            seg_loss(m, p, tape, &t)
        },
        |m, j| {
            let tape = Tape::inference();
            let p = m.params().bind(&tape, false);
            seg_loss(m, &p, &tape, &val[j])?.value().item()
        },
    )?;
    Ok(TrainOutcome {
        model,
        history,
        checkpoint,
    })
}

/// Damage classification on pre/post pairs, optionally initialized from a
/// trained Stage-1 model.
pub fn train_stage2(
    train: &[SamplePair],
    val: &[SamplePair],
    config: &TrainConfig,
    stage1: Option<&UNet>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if config.stage != Stage::Two {
        return Err(Error::Config("train_stage2 needs stage = 2".into()));
    }
    config.validate()?;
    for s in train.iter().chain(val) {
        check_extent(&s.id, s.height(), s.width())?;
    }
    let mut model = UNet::from_spec(&config.model_spec(), config.seed)?;
    if let Some(s1) = stage1 {
        let report = transfer_weights(s1, &mut model)?;
        log::info!(
            "transferred {} stage-1 tensors, {} initialized fresh",
            report.copied.len(),
            report.kept.len()
        );
    }

    let aug = config.augment_config();
    let pool = if config.cutmix {
        let pool = DifficultPool::new(train.iter().map(|s| &s.label), &config.difficult_classes);
        if pool.is_empty() {
            log::warn!(
                "no training sample contains classes {:?}; CutMix disabled",
                config.difficult_classes
            );
        }
        pool
    } else {
        DifficultPool::default()
    };

    let ids = |i: usize| train[i].id.clone();
    let (history, checkpoint) = run(
        &mut model,
        train.len(),
        val.len(),
        config,
        out_dir,
        &ids,
        |m, p, tape, epoch, i| {
            let a = &train[i];
            let mut r = augment::sample_rng(config.seed, epoch as u64, i as u64, STREAM_CUTMIX);
            let mut mixed = None;
            if !pool.is_empty() && r.random_bool(aug.cutmix_probability) {
                let ext = (a.height(), a.width());
                if let Some((j, mask)) = augment::sample_difficult_source(&pool, ext, &aug, &mut r)
                {
                    let b = &train[j];
                    if (b.height(), b.width()) == ext {
                        mixed = Some(augment::cutmix(a, b, &mask)?);
                    }
                }
            }
            let s = mixed.as_ref().unwrap_or(a);
            let (top, left) = crop_origin(config, epoch, i, s.height(), s.width())?;
            let c = config.crop;
            let t = transform(config, epoch, i, true).apply_pair(&s.crop(top, left, c, c)?);
            damage_loss(m, p, tape, &t)
        },
        |m, j| {
            let tape = Tape::inference();
            let p = m.params().bind(&tape, false);
            damage_loss(m, &p, &tape, &val[j])?.value().item()
        },
    )?;
    Ok(TrainOutcome {
        model,
        history,
        checkpoint,
    })
}
