//! Mask-guided inference and evaluation.

use crate::autodiff::softmax_channels;
use crate::backbone::{BranchMode, UNet, ENCODER_STRIDE};
use crate::error::{Error, Result};
use crate::io::dataset::DatasetManifest;
use crate::metrics::{Accumulator, MetricsReport};
use crate::sample::{LabelMap, SamplePair, NUM_CLASSES};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceOutputs {
    /// Stage-1 output before the sigmoid, `1×H×W`.
    pub p_b_logits: Tensor,
    /// Building mask, row-major `H·W`.
    pub p_b: Vec<bool>,
    /// Stage-2 class probabilities, `5×H×W`.
    pub p_d: Tensor,
    pub p_final: LabelMap,
}

impl InferenceOutputs {
    /// Pixels outside the building mask that were predicted non-background.
    pub fn masked_violations(&self) -> usize {
        self.p_b
            .iter()
            .zip(self.p_final.data())
            .filter(|(&b, &c)| !b && c != 0)
            .count()
    }
}

/// `σ(logit) ≥ 0.5`, i.e. `logit ≥ 0`.
pub fn building_mask(logits: &Tensor) -> Vec<bool> {
    logits.data().iter().map(|&z| z >= 0.0).collect()
}

/// Per-pixel argmax of `mask · scores`. Masked pixels have all channels
/// zeroed and resolve to class 0; otherwise ties go to the lowest class.
pub fn mask_guided_argmax(mask: &[bool], scores: &Tensor) -> Result<LabelMap> {
    let (c, h, w) = scores.dims3("mask_guided_argmax")?;
    if c != NUM_CLASSES || mask.len() != h * w {
        return Err(Error::ShapeMismatch {
            op: "mask_guided_argmax",
            lhs: vec![mask.len()],
            rhs: scores.shape().to_vec(),
        });
    }
    let plane = h * w;
    let data = scores.data();
    let labels = (0..plane)
        .map(|i| {
            if !mask[i] {
                return 0;
            }
            let mut best = 0;
            for k in 1..c {
                if data[k * plane + i] > data[best * plane + i] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(h, w, labels)
}

/// Runs both stages on one pair at its original size.
pub fn predict(stage1: &UNet, stage2: &UNet, sample: &SamplePair) -> Result<InferenceOutputs> {
    if stage1.mode() != BranchMode::Single || stage2.mode() != BranchMode::DualShared {
        return Err(Error::InvalidArgument(
            "predict needs a single-branch stage-1 model and a dual-branch stage-2 model".into(),
        ));
    }
    let (h, w) = (sample.height(), sample.width());
    if h % ENCODER_STRIDE != 0 || w % ENCODER_STRIDE != 0 {
        return Err(Error::Data(format!(
            "sample {}: extent {h}×{w} not divisible by {ENCODER_STRIDE}",
            sample.id
        )));
    }
    let pre = sample.pre.to_tensor();
    let p_b_logits = stage1.segment(&pre)?;
    let p_b = building_mask(&p_b_logits);
    let p_d = softmax_channels(&stage2.assess(&pre, &sample.post.to_tensor())?);
    let p_final = mask_guided_argmax(&p_b, &p_d)?;
    Ok(InferenceOutputs {
        p_b_logits,
        p_b,
        p_d,
        p_final,
    })
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub accumulator: Accumulator,
    /// Should always be zero.
    pub masked_violations: usize,
    pub images: usize,
}

impl Evaluation {
    pub fn report(&self) -> MetricsReport {
        self.accumulator.report()
    }
}

/// Scores every sample and sums the counts.
pub fn evaluate_samples<'a>(
    stage1: &UNet,
    stage2: &UNet,
    samples: impl IntoIterator<Item = &'a SamplePair>,
) -> Result<Evaluation> {
    let mut accumulator = Accumulator::new();
    let mut masked_violations = 0;
    let mut images = 0;
    for s in samples {
        let out = predict(stage1, stage2, s)?;
        masked_violations += out.masked_violations();
        accumulator.add(
            out.p_final.data(),
            s.label.data(),
            &out.p_b,
            &s.label.building_mask(),
        )?;
        images += 1;
    }
    Ok(Evaluation {
        accumulator,
        masked_violations,
        images,
    })
}

/// Loads each record of `manifest` in turn, so memory stays at one pair.
pub fn evaluate(manifest: &DatasetManifest, stage1: &UNet, stage2: &UNet) -> Result<Evaluation> {
    if manifest.records.is_empty() {
        return Err(Error::Data("manifest has no records".into()));
    }
    let mut total = Evaluation {
        accumulator: Accumulator::new(),
        masked_violations: 0,
        images: 0,
    };
    for i in 0..manifest.records.len() {
        let s = manifest.load_sample(i)?;
        let e = evaluate_samples(stage1, stage2, [&s])?;
        total.accumulator.merge(&e.accumulator);
        total.masked_violations += e.masked_violations;
        total.images += 1;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::io::dataset::Split;
    use crate::io::synth::{generate_samples, SynthConfig};
    use crate::sample::RgbImage;

    fn models() -> (UNet, UNet) {
        let cfg = BackboneConfig::desk();
        (
            UNet::build(&cfg, BranchMode::Single, 1).unwrap(),
            UNet::build(&cfg, BranchMode::DualShared, 2).unwrap(),
        )
    }

    #[test]
    fn masked_pixel_is_background_whatever_the_scores() {
        let mut scores = Tensor::zeros(&[5, 1, 2]);
        scores.data_mut()[3 * 2] = 9.0;
        scores.data_mut()[3 * 2 + 1] = 9.0;
        let out = mask_guided_argmax(&[false, true], &scores).unwrap();
        assert_eq!(out.data(), &[0, 3]);
    }

    #[test]
    fn one_hot_class_three_wins() {
        let mut scores = Tensor::zeros(&[5, 1, 1]);
        scores.data_mut()[3] = 1.0;
        assert_eq!(mask_guided_argmax(&[true], &scores).unwrap().data(), &[3]);
    }

    #[test]
    fn ties_resolve_to_lowest_class() {
        let scores = Tensor::full(&[5, 1, 1], 0.2);
        assert_eq!(mask_guided_argmax(&[true], &scores).unwrap().data(), &[0]);
        let mut s = Tensor::zeros(&[5, 1, 1]);
        s.data_mut()[2] = 0.5;
        s.data_mut()[4] = 0.5;
        assert_eq!(mask_guided_argmax(&[true], &s).unwrap().data(), &[2]);
    }

    #[test]
    fn threshold_is_inclusive_at_one_half() {
        let logits = Tensor::new(vec![1, 1, 3], vec![-1e-12, 0.0, 2.0]).unwrap();
        assert_eq!(building_mask(&logits), vec![false, true, true]);
    }

    #[test]
    fn predict_checks_extent_and_model_roles() {
        let (s1, s2) = models();
        let img = RgbImage::filled(48, 64, [0; 3]);
        let bad = SamplePair::new("x", img.clone(), img, LabelMap::zeros(48, 64)).unwrap();
        assert_eq!(predict(&s1, &s2, &bad).unwrap_err().exit_code(), 2);
        let img = RgbImage::filled(32, 32, [0; 3]);
        let ok = SamplePair::new("y", img.clone(), img, LabelMap::zeros(32, 32)).unwrap();
        assert!(predict(&s2, &s1, &ok).is_err());
        let out = predict(&s1, &s2, &ok).unwrap();
        assert_eq!(out.p_d.shape(), &[5, 32, 32]);
        assert_eq!(out.masked_violations(), 0);
    }

    #[test]
    fn evaluation_is_order_invariant() {
        let (s1, s2) = models();
        let cfg = SynthConfig {
            num_samples: 4,
            ..Default::default()
        };
        let samples: Vec<SamplePair> = generate_samples(&cfg, Split::Test)
            .unwrap()
            .into_iter()
            .map(|(s, _)| s)
            .collect();
        let a = evaluate_samples(&s1, &s2, &samples).unwrap();
        let b = evaluate_samples(&s1, &s2, samples.iter().rev()).unwrap();
        assert_eq!(a.report(), b.report());
        assert_eq!(a.masked_violations, 0);
        assert_eq!(a.images, 4);
        let r = a.report();
        assert!((r.f1_s - (0.3 * r.f1_b + 0.7 * r.f1_d)).abs() < 1e-15);
    }
}
