//! Full model assembly: dual backbones, fusion stack, heads, meta MLP,
//! post-fusion, feature selection, multi-label classification and the loss.

use crate::attention::{AttentionBranch, AttentionRecord};
use crate::backbone::{Backbone, BackboneConfig, PatchMerging};
use crate::error::{Result, TfkError};
use crate::fusion::{FusedFeatures, FusionConfig, HmtStack, MetaMlp, MtpBlock, PoolHead};
use crate::nn::{Linear, ParamSet};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// The eight diagnostic / seven-point labels with their class vocabularies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSchema {
    pub names: Vec<&'static str>,
    pub class_names: Vec<Vec<&'static str>>,
}

impl LabelSchema {
    /// The fixed Derm7pt schema: 8 labels, 24 classes in total.
    pub fn derm7pt() -> Self {
        LabelSchema {
            names: vec!["DIAG", "PN", "BWV", "VS", "PIG", "STR", "DaG", "RS"],
            class_names: vec![
                vec!["MEL", "NEV", "SK", "BCC", "MISC"],
                vec!["ABS", "TYP", "ATP"],
                vec!["ABS", "PRS"],
                vec!["ABS", "REG", "IR"],
                vec!["ABS", "REG", "IR"],
                vec!["ABS", "REG", "IR"],
                vec!["ABS", "REG", "IR"],
                vec!["ABS", "PRS"],
            ],
        }
    }

    pub fn num_labels(&self) -> usize {
        self.names.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.class_names.iter().map(|c| c.len()).collect()
    }

    pub fn total_classes(&self) -> usize {
        self.class_names.iter().map(|c| c.len()).sum()
    }

    pub fn class_index(&self, label: usize, name: &str) -> Result<usize> {
        self.class_names[label]
            .iter()
            .position(|c| c.eq_ignore_ascii_case(name))
            .ok_or_else(|| {
                TfkError::Schema(format!(
                    "unknown class \"{name}\" for label {}",
                    self.names[label]
                ))
            })
    }
}

/// Which fused vectors feed the classification layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureSelection {
    pub use_cli: bool,
    pub use_der: bool,
    pub use_meta: bool,
}

impl Default for FeatureSelection {
    fn default() -> Self {
        FeatureSelection {
            use_cli: false,
            use_der: true,
            use_meta: true,
        }
    }
}

impl FeatureSelection {
    pub fn count(&self) -> usize {
        usize::from(self.use_cli) + usize::from(self.use_der) + usize::from(self.use_meta)
    }

    pub fn validate(&self) -> Result<()> {
        if self.count() == 0 {
            return Err(TfkError::Config(
                "feature selection must keep at least one fused vector".to_string(),
            ));
        }
        Ok(())
    }
}

/// Everything needed to build a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub fusion: FusionConfig,
    pub selection: FeatureSelection,
    pub schema: LabelSchema,
    pub seed: u64,
}

impl ModelConfig {
    pub fn toy() -> Self {
        ModelConfig {
            backbone: BackboneConfig::toy(),
            fusion: FusionConfig::default(),
            selection: FeatureSelection::default(),
            schema: LabelSchema::derm7pt(),
            seed: 42,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.fusion.validate()?;
        self.selection.validate()?;
        // Fusion attention runs at the backbone's stage geometry.
        for stage in 0..4 {
            let (_, _, c) = self.backbone.stage_dims(stage);
            let heads = self.backbone.stage_heads[stage];
            if self.fusion.stage_counts[stage] > 0 && c % heads != 0 {
                return Err(TfkError::Config(format!(
                    "stage {} fusion heads {heads} do not divide channels {c}",
                    stage + 1
                )));
            }
        }
        Ok(())
    }
}

/// Shared trunk plus one affine head per label.
pub struct ClassificationLayer<T: Real> {
    trunk: Linear<T>,
    heads: Vec<Linear<T>>,
    in_dim: usize,
}

impl<T: Real> ClassificationLayer<T> {
    pub fn new(
        params: &ParamSet<T>,
        path: &str,
        in_dim: usize,
        hidden: usize,
        schema: &LabelSchema,
    ) -> Self {
        let trunk = Linear::new(params, &format!("{path}.trunk"), in_dim, hidden);
        let heads = schema
            .names
            .iter()
            .zip(schema.class_counts())
            .map(|(name, classes)| {
                Linear::new(params, &format!("{path}.head_{name}"), hidden, classes)
            })
            .collect();
        ClassificationLayer {
            trunk,
            heads,
            in_dim,
        }
    }

    /// `[B, k*head_dim]` concatenated features to per-label logits.
    pub fn forward(&self, concat: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let s = concat.shape();
        if s.len() != 2 || s[1] != self.in_dim {
            return Err(TfkError::contract(
                "classification_layer",
                format!(
                    "expected [batch, {}], got {}",
                    self.in_dim,
                    crate::tensor::fmt_shape(s)
                ),
            ));
        }
        let shared = self.trunk.forward(concat)?.gelu();
        self.heads.iter().map(|h| h.forward(&shared)).collect()
    }
}

/// Per-label class distributions for a batch.
pub struct Prediction<T: Real> {
    /// Per label: `[B, classes]` raw logits (kept for the loss).
    pub logits: Vec<Tensor<T>>,
    /// Per label: `[B, classes]` probabilities.
    pub probs: Vec<Tensor<T>>,
    /// Per label: argmax class per batch item.
    pub argmax: Vec<Vec<usize>>,
}

impl<T: Real> Prediction<T> {
    fn from_logits(logits: Vec<Tensor<T>>) -> Result<Self> {
        let mut probs = Vec::with_capacity(logits.len());
        let mut argmax = Vec::with_capacity(logits.len());
        for l in &logits {
            let p = l.softmax_last()?;
            let classes = p.shape()[1];
            let b = p.shape()[0];
            let am = p.with_data(|d| {
                (0..b)
                    .map(|bi| {
                        let row = &d[bi * classes..(bi + 1) * classes];
                        let mut best = 0;
                        for (i, v) in row.iter().enumerate() {
                            if *v > row[best] {
                                best = i;
                            }
                        }
                        best
                    })
                    .collect::<Vec<usize>>()
            });
            probs.push(p);
            argmax.push(am);
        }
        Ok(Prediction {
            logits,
            probs,
            argmax,
        })
    }

    pub fn batch(&self) -> usize {
        self.logits.first().map(|l| l.shape()[0]).unwrap_or(0)
    }
}

/// One forward pass worth of outputs.
pub struct ModelOutput<T: Real> {
    pub prediction: Prediction<T>,
    pub fused: FusedFeatures<T>,
    pub records: Vec<AttentionRecord>,
}

enum Backbones<T: Real> {
    Shared(Backbone<T>),
    Split { der: Backbone<T>, cli: Backbone<T> },
}

/// The assembled multi-modal model.
pub struct TFormer<T: Real> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    backbones: Backbones<T>,
    hmt: HmtStack<T>,
    head_cli: PoolHead<T>,
    head_der: PoolHead<T>,
    meta_mlp: MetaMlp<T>,
    mtp: MtpBlock<T>,
    classifier: ClassificationLayer<T>,
}

impl<T: Real> TFormer<T> {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let params: ParamSet<T> = ParamSet::new(config.seed);
        let backbones = if config.backbone.shared_weights {
            Backbones::Shared(Backbone::new(&params, "backbone.shared", &config.backbone)?)
        } else {
            Backbones::Split {
                der: Backbone::new(&params, "backbone.der", &config.backbone)?,
                cli: Backbone::new(&params, "backbone.cli", &config.backbone)?,
            }
        };
        let mut geom = [(0, 0, 0, 0, 0); 4];
        for (stage, g) in geom.iter_mut().enumerate() {
            let (gh, gw, c) = config.backbone.stage_dims(stage);
            *g = (
                gh,
                gw,
                c,
                config.backbone.stage_heads[stage],
                config.backbone.stage_window(stage),
            );
        }
        let hmt = HmtStack::new(&params, "hmt", &config.fusion, &geom)?;
        let (_, _, c4) = config.backbone.stage_dims(3);
        let dim = config.fusion.head_dim;
        let head_cli = PoolHead::new(&params, "head.cli", c4, dim);
        let head_der = PoolHead::new(&params, "head.der", c4, dim);
        let meta_mlp = MetaMlp::new(&params, "meta_mlp", config.fusion.meta_len, dim);
        let mtp = MtpBlock::new(
            &params,
            "mtp",
            dim,
            config.fusion.mtp_heads,
            config.fusion.mtp_hidden,
        )?;
        let classifier = ClassificationLayer::new(
            &params,
            "classifier",
            config.selection.count() * dim,
            dim,
            &config.schema,
        );
        Ok(TFormer {
            config: config.clone(),
            params,
            backbones,
            hmt,
            head_cli,
            head_der,
            meta_mlp,
            mtp,
            classifier,
        })
    }

    fn backbone_der(&self) -> &Backbone<T> {
        match &self.backbones {
            Backbones::Shared(b) => b,
            Backbones::Split { der, .. } => der,
        }
    }

    fn backbone_cli(&self) -> &Backbone<T> {
        match &self.backbones {
            Backbones::Shared(b) => b,
            Backbones::Split { cli, .. } => cli,
        }
    }

    /// Batched forward over `[B, H, W, 3]` images and `[B, meta_len]`
    /// one-hot vectors.
    pub fn forward(
        &self,
        derm: &Tensor<T>,
        cli: &Tensor<T>,
        meta: &Tensor<T>,
        record: bool,
    ) -> Result<ModelOutput<T>> {
        let der_feats = self.backbone_der().forward(derm)?;
        let cli_feats = self.backbone_cli().forward(cli)?;
        let dm: [Option<&PatchMerging<T>>; 4] = std::array::from_fn(|i| {
            self.backbone_der().merge_into_stage(i)
        });
        let cm: [Option<&PatchMerging<T>>; 4] = std::array::from_fn(|i| {
            self.backbone_cli().merge_into_stage(i)
        });
        let (der_grid, cli_grid, mut records) =
            self.hmt
                .forward(&der_feats.stages, &cli_feats.stages, &dm, &cm, record)?;
        let f_der = self.head_der.forward(&der_grid)?;
        let f_cli = self.head_cli.forward(&cli_grid)?;
        let f_meta0 = self.meta_mlp.forward(meta)?;
        let (f_meta, mtp_rec) = self.mtp.forward(&f_meta0, &f_cli, &f_der, record)?;
        if let Some(w) = mtp_rec {
            records.push(AttentionRecord {
                stage: 0,
                block: 0,
                branch: AttentionBranch::Meta,
                weights: w,
            });
        }

        let sel = self.config.selection;
        let mut concat: Option<Tensor<T>> = None;
        for (on, feat) in [(sel.use_cli, &f_cli), (sel.use_der, &f_der), (sel.use_meta, &f_meta)] {
            if on {
                concat = Some(match concat {
                    None => feat.clone(),
                    Some(acc) => acc.concat(feat, 1)?,
                });
            }
        }
        let concat = concat.expect("selection validated non-empty");
        let logits = self.classifier.forward(&concat)?;
        Ok(ModelOutput {
            prediction: Prediction::from_logits(logits)?,
            fused: FusedFeatures {
                f_cli,
                f_der,
                f_meta0,
                f_meta,
            },
            records,
        })
    }

    /// Single-case convenience wrapper: images `[H, W, 3]`, meta `[meta_len]`.
    pub fn forward_single(
        &self,
        derm: &Tensor<T>,
        cli: &Tensor<T>,
        meta: &Tensor<T>,
        record: bool,
    ) -> Result<ModelOutput<T>> {
        let (h, w) = self.config.backbone.image_size;
        let d = derm.reshape(&[1, h, w, 3])?;
        let c = cli.reshape(&[1, h, w, 3])?;
        let m = meta.reshape(&[1, self.config.fusion.meta_len])?;
        self.forward(&d, &c, &m, record)
    }

    /// Per-module and total parameter element counts; shared parameters are
    /// registered (and therefore counted) once.
    pub fn count_parameters(&self) -> ParamCounts {
        ParamCounts {
            per_module: self.params.counts_by_prefix(),
            total: self.params.num_elements(),
        }
    }
}

/// Parameter count report grouped by top-level module prefix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCounts {
    pub per_module: Vec<(String, usize)>,
    pub total: usize,
}

/// Mean over labels of categorical cross-entropy, computed from logits.
/// `truths[label][b]` is the true class index.
pub fn multi_label_loss<T: Real>(
    pred: &Prediction<T>,
    truths: &[Vec<usize>],
    schema: &LabelSchema,
) -> Result<Tensor<T>> {
    let n_labels = schema.num_labels();
    if pred.logits.len() != n_labels || truths.len() != n_labels {
        return Err(TfkError::contract(
            "multi_label_loss",
            format!(
                "expected {n_labels} labels, got {} predictions / {} truths",
                pred.logits.len(),
                truths.len()
            ),
        ));
    }
    let counts = schema.class_counts();
    let batch = pred.batch();
    let mut total: Option<Tensor<T>> = None;
    for (label, logits) in pred.logits.iter().enumerate() {
        let classes = counts[label];
        if truths[label].len() != batch {
            return Err(TfkError::contract(
                "multi_label_loss",
                format!("label {} truth length mismatch", schema.names[label]),
            ));
        }
        if let Some(bad) = truths[label].iter().find(|&&y| y >= classes) {
            return Err(TfkError::Label {
                label: schema.names[label].to_string(),
                msg: format!("class index {bad} out of range (classes: {classes})"),
            });
        }
        let logp = logits.log_softmax_last()?;
        let idx: std::rc::Rc<Vec<u32>> = std::rc::Rc::new(
            truths[label]
                .iter()
                .enumerate()
                .map(|(b, &y)| (b * classes + y) as u32)
                .collect(),
        );
        let picked = logp.reshape(&[batch * classes])?.gather(&idx, 1, &[batch])?;
        let ce = picked.sum_all().scale(-1.0 / batch as f64);
        total = Some(match total {
            None => ce,
            Some(acc) => acc.add(&ce)?,
        });
    }
    Ok(total.expect("schema has labels").scale(1.0 / n_labels as f64))
}
