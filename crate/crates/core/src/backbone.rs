//! Residual encoder + U-Net decoder.
//!
//! Encoder: five residual levels, each halving the spatial extent. A level is
//! `relu(norm(conv_b(relu(norm(conv_a(x))))) + proj(x))` where `conv_a` is
//! strided (5×5 at level 1, 3×3 elsewhere) and `proj` is a strided 1×1
//! projection.
//!
//! Decoder: four blocks `relu(norm(conv3x3([up2(prev), skip])))` at H/16,
//! H/8, H/4 and H/2, then a final 2× upsample and 3×3 head convolution.
//!
//! In [`BranchMode::DualShared`] the pre and post images run through the
//! same encoder and decoder parameters. Attention modules may sit after
//! decoder blocks 1–3; after block 4 the two streams are concatenated,
//! merged by one conv block and passed to the 5-class head.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::cda::{self, CdaWeights, SeVariant, SeWeights};
use crate::error::{Error, Result};
use crate::mff::{self, MffWeights};
use crate::nn;
use crate::params::{Bound, ConvBlock, ConvLayer, Init, NormLayer, ParamSet};
use crate::tensor::Tensor;

/// Total downsampling factor of the encoder.
pub const ENCODER_STRIDE: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub encoder_channels: Vec<usize>,
    pub decoder_channels: Vec<usize>,
    pub first_kernel: usize,
    pub other_kernel: usize,
    pub input_channels: usize,
    pub stage1_out_channels: usize,
    pub stage2_out_channels: usize,
}

impl BackboneConfig {
    /// Full-width configuration with ResNet-50 level widths.
    pub fn full_scale() -> Self {
        Self {
            encoder_channels: vec![64, 256, 512, 1024, 2048],
            decoder_channels: vec![512, 256, 96, 32],
            ..Self::desk()
        }
    }

    /// Reduced widths for CPU-scale experiments.
    pub fn desk() -> Self {
        Self {
            encoder_channels: vec![8, 16, 32, 64, 128],
            decoder_channels: vec![32, 16, 16, 8],
            first_kernel: 5,
            other_kernel: 3,
            input_channels: 3,
            stage1_out_channels: 1,
            stage2_out_channels: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.len() != 5 || self.decoder_channels.len() != 4 {
            return Err(Error::Config(format!(
                "need 5 encoder and 4 decoder widths, got {} and {}",
                self.encoder_channels.len(),
                self.decoder_channels.len()
            )));
        }
        let all = self
            .encoder_channels
            .iter()
            .chain(&self.decoder_channels)
            .chain([
                &self.first_kernel,
                &self.other_kernel,
                &self.input_channels,
                &self.stage1_out_channels,
                &self.stage2_out_channels,
            ]);
        if all.into_iter().any(|&v| v == 0) {
            return Err(Error::Config(
                "widths and kernel sizes must be positive".into(),
            ));
        }
        if self.first_kernel % 2 == 0 || self.other_kernel % 2 == 0 {
            return Err(Error::Config("kernel sizes must be odd".into()));
        }
        Ok(())
    }

    /// `(channels, height, width)` of the five encoder outputs for an input
    /// of `height×width`.
    pub fn encoder_shapes(&self, height: usize, width: usize) -> Result<Vec<[usize; 3]>> {
        let (mut h, mut w) = (height, width);
        let mut shapes = Vec::with_capacity(5);
        for (level, &c) in self.encoder_channels.iter().enumerate() {
            let k = if level == 0 {
                self.first_kernel
            } else {
                self.other_kernel
            };
            h = nn::conv_output_extent(h, k, 2, k / 2)?;
            w = nn::conv_output_extent(w, k, 2, k / 2)?;
            shapes.push([c, h, w]);
        }
        Ok(shapes)
    }

    /// `(channels, height, width)` of the four decoder blocks.
    pub fn decoder_shapes(&self, height: usize, width: usize) -> Result<Vec<[usize; 3]>> {
        let enc = self.encoder_shapes(height, width)?;
        Ok(self
            .decoder_channels
            .iter()
            .enumerate()
            .map(|(j, &c)| [c, enc[3 - j][1], enc[3 - j][2]])
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchMode {
    /// One branch on the pre-disaster image (building segmentation).
    Single,
    /// Pre and post branches sharing every encoder/decoder parameter.
    DualShared,
}

/// Attention applied after one of the first three decoder blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Attention {
    #[default]
    Off,
    Cda,
    /// Per-stream squeeze-excitation, used for ablation comparisons.
    Se(SeVariant),
}

/// Optional modules around the plain U-Net.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Fusion {
    pub mff: bool,
    /// Decoder levels dconv1, dconv2, dconv3.
    pub attention: [Attention; 3],
}

impl Fusion {
    pub fn none() -> Self {
        Self::default()
    }

    /// Multi-scale fusion plus cross-directional attention at all three levels.
    pub fn full() -> Self {
        Self {
            mff: true,
            attention: [Attention::Cda; 3],
        }
    }

    pub fn is_vanilla(&self) -> bool {
        !self.mff && self.attention.iter().all(|a| *a == Attention::Off)
    }

    /// True when every module enabled in `self` is also enabled in `built`.
    fn within(&self, built: &Fusion) -> bool {
        (!self.mff || built.mff)
            && self
                .attention
                .iter()
                .zip(&built.attention)
                .all(|(a, b)| *a == Attention::Off || a == b)
    }
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub backbone: BackboneConfig,
    pub mode: BranchMode,
    pub fusion: Fusion,
}

#[derive(Clone, Debug)]
struct ResidualBlock {
    conv_a: ConvLayer,
    norm_a: NormLayer,
    conv_b: ConvLayer,
    norm_b: NormLayer,
    proj: ConvLayer,
}

impl ResidualBlock {
    fn register(
        params: &mut ParamSet,
        init: Init,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        k_other: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv_a: ConvLayer::register(
                params,
                init,
                &format!("{name}.conv_a"),
                in_c,
                out_c,
                k,
                2,
            )?,
            norm_a: NormLayer::register(params, &format!("{name}.norm_a"), out_c)?,
            conv_b: ConvLayer::register(
                params,
                init,
                &format!("{name}.conv_b"),
                out_c,
                out_c,
                k_other,
                1,
            )?,
            norm_b: NormLayer::register(params, &format!("{name}.norm_b"), out_c)?,
            proj: ConvLayer::register(params, init, &format!("{name}.proj"), in_c, out_c, 1, 2)?,
        })
    }

    fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let a = self
            .norm_a
            .forward(p, &self.conv_a.forward(p, x)?)?
            .relu()?;
        let b = self.norm_b.forward(p, &self.conv_b.forward(p, &a)?)?;
        b.add(&self.proj.forward(p, x)?)?.relu()
    }
}

#[derive(Clone, Debug)]
enum AttentionWeights {
    Cda(CdaWeights),
    Se(SeWeights),
}

/// Upsample `prev` 2×, concatenate `skip` after it, conv block.
fn decode_block<'t>(
    p: &Bound<'t>,
    block: &ConvBlock,
    prev: &Var<'t>,
    skip: &Var<'t>,
) -> Result<Var<'t>> {
    let up = nn::upsample_nearest(prev, 2)?;
    block.forward(p, &up.concat_channels(skip)?)
}

/// Parameterized U-Net in single or weight-shared dual-branch mode.
#[derive(Clone, Debug)]
pub struct UNet {
    spec: ModelSpec,
    params: ParamSet,
    encoder: Vec<ResidualBlock>,
    decoder: Vec<ConvBlock>,
    merge: Option<ConvBlock>,
    head: ConvLayer,
    mff: Option<MffWeights>,
    attention: Vec<Option<AttentionWeights>>,
    active: Fusion,
}

impl UNet {
    /// Builds with the default modules for `mode`: none for a single branch,
    /// MFF and CDA at all three levels for the dual branch.
    pub fn build(config: &BackboneConfig, mode: BranchMode, seed: u64) -> Result<Self> {
        let fusion = match mode {
            BranchMode::Single => Fusion::none(),
            BranchMode::DualShared => Fusion::full(),
        };
        Self::from_spec(
            &ModelSpec {
                backbone: config.clone(),
                mode,
                fusion,
            },
            seed,
        )
    }

    /// Builds the parameters described by `spec`, initialized from `seed`.
    pub fn from_spec(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let cfg = &spec.backbone;
        cfg.validate()?;
        if spec.mode == BranchMode::Single
            && spec.fusion.attention.iter().any(|a| *a != Attention::Off)
        {
            return Err(Error::Config("attention needs the dual-branch mode".into()));
        }
        let init = Init { seed };
        let mut params = ParamSet::new();
        let enc = &cfg.encoder_channels;
        let dec = &cfg.decoder_channels;

        let mut encoder = Vec::with_capacity(5);
        let mut in_c = cfg.input_channels;
        for (l, &c) in enc.iter().enumerate() {
            let k = if l == 0 {
                cfg.first_kernel
            } else {
                cfg.other_kernel
            };
            encoder.push(ResidualBlock::register(
                &mut params,
                init,
                &format!("enc{}", l + 1),
                in_c,
                c,
                k,
                cfg.other_kernel,
            )?);
            in_c = c;
        }

        let mut decoder = Vec::with_capacity(4);
        let mut prev = enc[4];
        for (j, &c) in dec.iter().enumerate() {
            let skip = enc[3 - j];
            decoder.push(ConvBlock::register(
                &mut params,
                init,
                &format!("dec{}", j + 1),
                prev + skip,
                c,
                cfg.other_kernel,
                1,
            )?);
            prev = c;
        }

        let (merge, out_c) = match spec.mode {
            BranchMode::Single => (None, cfg.stage1_out_channels),
            BranchMode::DualShared => (
                Some(ConvBlock::register(
                    &mut params,
                    init,
                    "merge",
                    2 * dec[3],
                    dec[3],
                    cfg.other_kernel,
                    1,
                )?),
                cfg.stage2_out_channels,
            ),
        };
        let head = ConvLayer::register(
            &mut params,
            init,
            "head",
            dec[3],
            out_c,
            cfg.other_kernel,
            1,
        )?;

        let mff = if spec.fusion.mff {
            Some(MffWeights::register(
                &mut params,
                init,
                "mff",
                cfg.input_channels,
                (enc[0], enc[1]),
            )?)
        } else {
            None
        };

        let mut attention = Vec::with_capacity(3);
        for (j, kind) in spec.fusion.attention.iter().enumerate() {
            let width = dec[j];
            attention.push(match kind {
                Attention::Off => None,
                Attention::Cda => Some(AttentionWeights::Cda(CdaWeights::register(
                    &mut params,
                    init,
                    &format!("cda{}", j + 1),
                    width,
                )?)),
                Attention::Se(v) => Some(AttentionWeights::Se(SeWeights::register(
                    &mut params,
                    init,
                    &format!("se{}", j + 1),
                    width,
                    *v,
                )?)),
            });
        }

        Ok(Self {
            spec: spec.clone(),
            params,
            encoder,
            decoder,
            merge,
            head,
            mff,
            attention,
            active: spec.fusion,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn mode(&self) -> BranchMode {
        self.spec.mode
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Modules used by the forward pass.
    pub fn active(&self) -> Fusion {
        self.active
    }

    /// Switches modules on or off at run time. Only modules that were built
    /// can be switched on.
    pub fn set_active(&mut self, fusion: Fusion) -> Result<()> {
        if !fusion.within(&self.spec.fusion) {
            return Err(Error::Config(format!(
                "cannot activate {fusion:?}; model was built with {:?}",
                self.spec.fusion
            )));
        }
        self.active = fusion;
        Ok(())
    }

    fn check_image(&self, image: &Var<'_>) -> Result<()> {
        let (c, h, w) = image.value().dims3("unet input")?;
        if c != self.spec.backbone.input_channels
            || h % ENCODER_STRIDE != 0
            || w % ENCODER_STRIDE != 0
        {
            return Err(Error::InvalidShape {
                op: "unet input",
                shape: image.shape().to_vec(),
                reason: format!(
                    "need {} channels and extents divisible by {ENCODER_STRIDE}",
                    self.spec.backbone.input_channels
                ),
            });
        }
        Ok(())
    }

    /// Five encoder feature maps at strides 2…32. Multi-scale fusion is
    /// applied to levels 1 and 2 when `with_mff` is set and the module exists.
    pub fn encode<'t>(
        &self,
        p: &Bound<'t>,
        image: &Var<'t>,
        with_mff: bool,
    ) -> Result<Vec<Var<'t>>> {
        self.check_image(image)?;
        let mff = self.mff.as_ref().filter(|_| with_mff);
        let mut feats: Vec<Var<'t>> = Vec::with_capacity(5);
        let mut x = image.clone();
        for (l, block) in self.encoder.iter().enumerate() {
            x = block.forward(p, &x)?;
            if let Some(w) = mff {
                x = match l {
                    0 => mff::fuse_level1(p, w, image, &x)?,
                    1 => mff::fuse_level2(p, w, image, &x)?,
                    _ => x,
                };
            }
            feats.push(x.clone());
        }
        Ok(feats)
    }

    /// Encoder with the currently active modules.
    pub fn forward_encoder<'t>(&self, p: &Bound<'t>, image: &Var<'t>) -> Result<Vec<Var<'t>>> {
        self.encode(p, image, self.active.mff)
    }

    /// Single-branch decoder and head: `out_channels×H×W` logits.
    pub fn forward_decoder<'t>(&self, p: &Bound<'t>, feats: &[Var<'t>]) -> Result<Var<'t>> {
        self.check_feats(feats)?;
        let mut d = feats[4].clone();
        for (j, block) in self.decoder.iter().enumerate() {
            d = decode_block(p, block, &d, &feats[3 - j])?;
        }
        self.head.forward(p, &nn::upsample_nearest(&d, 2)?)
    }

    fn check_feats(&self, feats: &[Var<'_>]) -> Result<()> {
        let ok = feats.len() == 5
            && feats
                .iter()
                .zip(&self.spec.backbone.encoder_channels)
                .all(|(f, &c)| f.shape().first() == Some(&c));
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "forward_decoder",
                lhs: self.spec.backbone.encoder_channels.clone(),
                rhs: feats
                    .iter()
                    .map(|f| f.shape().first().copied().unwrap_or(0))
                    .collect(),
            });
        }
        Ok(())
    }

    /// Stage-1 logits (`1×H×W`) for one image.
    pub fn forward_single<'t>(&self, p: &Bound<'t>, image: &Var<'t>) -> Result<Var<'t>> {
        if self.spec.mode != BranchMode::Single {
            return Err(Error::Config(
                "forward_single on a dual-branch model".into(),
            ));
        }
        let feats = self.forward_encoder(p, image)?;
        self.forward_decoder(p, &feats)
    }

    /// Stage-2 logits (`5×H×W`) for a pre/post pair.
    pub fn forward_dual<'t>(
        &self,
        p: &Bound<'t>,
        pre: &Var<'t>,
        post: &Var<'t>,
    ) -> Result<Var<'t>> {
        let Some(merge) = &self.merge else {
            return Err(Error::Config(
                "forward_dual on a single-branch model".into(),
            ));
        };
        if pre.shape() != post.shape() {
            return Err(Error::ShapeMismatch {
                op: "forward_dual",
                lhs: pre.shape().to_vec(),
                rhs: post.shape().to_vec(),
            });
        }
        let fa = self.forward_encoder(p, pre)?;
        let fb = self.forward_encoder(p, post)?;
        let mut da = fa[4].clone();
        let mut db = fb[4].clone();
        for (j, block) in self.decoder.iter().enumerate() {
            da = decode_block(p, block, &da, &fa[3 - j])?;
            db = decode_block(p, block, &db, &fb[3 - j])?;
            if j >= 3 || self.active.attention[j] == Attention::Off {
                continue;
            }
            match &self.attention[j] {
                Some(AttentionWeights::Cda(w)) => {
                    let out = cda::cda_forward(p, w, &da, &db)?;
                    da = out.u_pre_spa;
                    db = out.u_post_spa;
                }
                Some(AttentionWeights::Se(w)) => {
                    da = cda::se_block(p, w, &da)?;
                    db = cda::se_block(p, w, &db)?;
                }
                None => {}
            }
        }
        let merged = merge.forward(p, &da.concat_channels(&db)?)?;
        self.head.forward(p, &nn::upsample_nearest(&merged, 2)?)
    }

    /// Stage-1 logits without gradient tracking.
    pub fn segment(&self, image: &Tensor) -> Result<Tensor> {
        let tape = Tape::inference();
        let p = self.params.bind(&tape, false);
        let x = tape.constant(image.clone());
        Ok(self.forward_single(&p, &x)?.value().clone())
    }

    /// Stage-2 logits without gradient tracking.
    pub fn assess(&self, pre: &Tensor, post: &Tensor) -> Result<Tensor> {
        let tape = Tape::inference();
        let p = self.params.bind(&tape, false);
        let (a, b) = (tape.constant(pre.clone()), tape.constant(post.clone()));
        Ok(self.forward_dual(&p, &a, &b)?.value().clone())
    }

    /// Encoder outputs without gradient tracking.
    pub fn encoder_features(&self, image: &Tensor, with_mff: bool) -> Result<Vec<Tensor>> {
        let tape = Tape::inference();
        let p = self.params.bind(&tape, false);
        let x = tape.constant(image.clone());
        Ok(self
            .encode(&p, &x, with_mff)?
            .into_iter()
            .map(|v| v.value().clone())
            .collect())
    }

    /// Replaces every parameter from `(name, value)` entries. All names and
    /// shapes are validated before anything is written, so a rejected load
    /// leaves the model untouched.
    pub fn load_params(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        if entries.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                entries.len(),
                self.params.len()
            )));
        }
        let mut plan = Vec::with_capacity(entries.len());
        for (name, value) in entries {
            let id = self
                .params
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            if self.params.get(id).shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape conflict for {name}: model {:?}, checkpoint {:?}",
                    self.params.get(id).shape(),
                    value.shape()
                )));
            }
            plan.push((id, value));
        }
        for (id, value) in plan {
            *self.params.get_mut(id) = value.clone();
        }
        Ok(())
    }
}

/// Names of parameters copied and skipped by [`transfer_weights`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TransferReport {
    pub copied: Vec<String>,
    pub kept: Vec<String>,
}

/// Copies every Stage-1 parameter whose name also exists in the Stage-2
/// model. Stage-2-only parameters and the head keep their initialization.
/// A shared name with a different shape (other than the head) rejects the
/// whole transfer before anything is copied.
pub fn transfer_weights(stage1: &UNet, stage2: &mut UNet) -> Result<TransferReport> {
    let mut report = TransferReport::default();
    let mut plan = Vec::new();
    for id in stage2.params.ids() {
        let name = stage2.params.name(id).to_string();
        match stage1.params.by_name(&name) {
            Some(src) if src.shape() == stage2.params.get(id).shape() => {
                plan.push((id, src.clone()));
                report.copied.push(name);
            }
            Some(src) if !name.starts_with("head.") => {
                return Err(Error::Checkpoint(format!(
                    "cannot transfer {name}: stage-1 shape {:?}, stage-2 shape {:?}",
                    src.shape(),
                    stage2.params.get(id).shape()
                )));
            }
            _ => report.kept.push(name),
        }
    }
    if plan.is_empty() {
        return Err(Error::Checkpoint(
            "no overlapping parameters to transfer".into(),
        ));
    }
    for (id, value) in plan {
        *stage2.params.get_mut(id) = value;
    }
    Ok(report)
}
