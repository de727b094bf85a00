//! Joint training: gated intermediate-domain mixing, two shared-weight
//! branches, the weighted sum of detection and alignment losses, momentum
//! SGD, metrics logging and resumable checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::{
    discriminate_features, discriminate_instances, feature_alignment_loss, instance_alignment_loss, GradientReversal,
};
use crate::autograd::{Graph, Var};
use crate::checkpoint::{self, Checkpoint};
use crate::detector::{batch_images, generate_anchors, AnchorSet, ImageProposals, PyramidFeatures, RpnOutput, NUM_LEVELS};
use crate::error::{Error, Result};
use crate::idig::{build_mix_batch, sample_effective_lambda, validate_lambda_max, MixCoefficient};
use crate::model::{AfanModel, ModelConfig};
use crate::nn::{apply_buffer_updates, ParamStore};
use crate::rng::stream_at;
use crate::synthdata::{AnnotatedSample, BoxSet, ImageTensor};
use crate::tensor::Tensor;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.afan";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Upper bound of the mixing coefficient; 0 turns mixing off.
    pub lambda_max: f64,
    pub alpha: f64,
    pub beta: f64,
    pub learning_rate: f64,
    /// Epochs at whose start the learning rate drops tenfold.
    pub lr_decay_epochs: Vec<usize>,
    pub momentum: f64,
    pub batch_size_per_domain: usize,
    pub epochs: usize,
    pub seed: u64,
    pub grl_scale: f64,
    /// Fraction of all steps over which the reversal scale ramps up from 0.
    pub grl_warmup_fraction: f64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_max: 0.5,
            alpha: 0.1,
            beta: 0.1,
            learning_rate: 0.002,
            lr_decay_epochs: Vec::new(),
            momentum: 0.9,
            batch_size_per_domain: 4,
            epochs: 30,
            seed: 0,
            grl_scale: 1.0,
            grl_warmup_fraction: 0.2,
            checkpoint_interval: 100,
            model: ModelConfig::default(),
        }
    }
}

const CONFIG_KEYS: [&str; 13] = [
    "lambda_max",
    "alpha",
    "beta",
    "learning_rate",
    "lr_decay_epochs",
    "momentum",
    "batch_size_per_domain",
    "epochs",
    "seed",
    "grl_scale",
    "grl_warmup_fraction",
    "checkpoint_interval",
    "model",
];

impl TrainConfig {
    /// Every range violation, in field order.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        // 0 is accepted here and means no mixing
        if self.lambda_max != 0.0 {
            if let Err(e) = validate_lambda_max(self.lambda_max) {
                p.push(format!("lambda_max: {e}"));
            }
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                p.push(format!("{name} must be a non-negative finite number, got {v}"));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            p.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            p.push(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch_size_per_domain == 0 {
            p.push("batch_size_per_domain must be at least 1".into());
        }
        if self.epochs == 0 {
            p.push("epochs must be at least 1".into());
        }
        if !(self.grl_scale > 0.0 && self.grl_scale.is_finite()) {
            p.push(format!("grl_scale must be positive, got {}", self.grl_scale));
        }
        if !(0.0..=1.0).contains(&self.grl_warmup_fraction) {
            p.push(format!("grl_warmup_fraction must lie in [0, 1], got {}", self.grl_warmup_fraction));
        }
        if let Err(e) = self.model.detector.validate() {
            p.push(format!("model.detector: {e}"));
        }
        if self.model.feature_disc_hidden == 0 || self.model.instance_disc_hidden == 0 {
            p.push("model: discriminator widths must be positive".into());
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::validation(p.join("; ")))
        }
    }

    /// Parses a JSON config, reporting unknown keys, type errors and range
    /// violations together.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::validation(format!("config is not valid JSON: {e}")))?;
        let obj = value.as_object().ok_or_else(|| Error::validation("config must be a JSON object"))?;
        let mut problems = Vec::new();
        for k in obj.keys() {
            if !CONFIG_KEYS.contains(&k.as_str()) {
                problems.push(format!("unknown key {k:?}"));
            }
        }
        let defaults = serde_json::to_value(Self::default())?;
        let mut merged = defaults.as_object().cloned().expect("config serialises to an object");
        for key in CONFIG_KEYS {
            if let Some(v) = obj.get(key) {
                let mut probe = merged.clone();
                probe.insert(key.to_string(), v.clone());
                match serde_json::from_value::<Self>(serde_json::Value::Object(probe)) {
                    Ok(_) => {
                        merged.insert(key.to_string(), v.clone());
                    }
                    Err(e) => problems.push(format!("{key}: {e}")),
                }
            }
        }
        let cfg: Self = serde_json::from_value(serde_json::Value::Object(merged))?;
        problems.extend(cfg.problems());
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::validation(problems.join("; ")))
        }
    }

    /// Sorted-key JSON with no whitespace.
    pub fn canonical_json(&self) -> String {
        serde_json::to_value(self).expect("config serialises").to_string()
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    /// The same config with every alignment term and the mixing disabled.
    pub fn degenerate(&self) -> Self {
        Self { lambda_max: 0.0, alpha: 0.0, beta: 0.0, ..self.clone() }
    }

    /// Whether a step reads target images, for mixing or alignment.
    pub fn uses_target(&self) -> bool {
        self.aligns() || self.lambda_max > 0.0
    }

    /// Whether any discriminator term carries weight.
    pub fn aligns(&self) -> bool {
        self.alpha > 0.0 || self.beta > 0.0
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.learning_rate * 0.1f64.powi(drops as i32)
    }

    /// Reversal scale at `step` of `total_steps`.
    pub fn grl_at(&self, step: usize, total_steps: usize) -> f64 {
        let ramp = self.grl_warmup_fraction * total_steps as f64;
        if ramp <= 0.0 {
            self.grl_scale
        } else {
            self.grl_scale * ((step as f64 + 1.0) / ramp).min(1.0)
        }
    }
}

/// Per-step diagnostics that are not part of the metrics log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    /// Detection terms: proposal objectness, proposal regression, head
    /// classification, head regression.
    pub det_terms: [f64; 4],
    /// No proposal reached the instance discriminator.
    pub l_o_empty: bool,
    /// Proposals fed to the instance discriminator, per image of both branches.
    pub aligned_proposals: Vec<usize>,
    pub min_aligned_score: Option<f64>,
    pub grl_scale: f64,
    /// Parameter digests taken before the source and target forward passes.
    pub branch_digests: Option<[String; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub step: usize,
    pub epoch: usize,
    pub l_det: f64,
    pub l_f: f64,
    pub l_o: f64,
    pub total: f64,
    pub lambda_used: f64,
    pub gate_applied: bool,
    pub diagnostics: StepDiagnostics,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub epoch: usize,
    pub l_det: f64,
    pub l_f: f64,
    pub l_o: f64,
    pub total: f64,
    pub lambda: f64,
    pub gate: bool,
}

impl From<&LossBundle> for MetricsRecord {
    fn from(b: &LossBundle) -> Self {
        Self {
            step: b.step,
            epoch: b.epoch,
            l_det: b.l_det,
            l_f: b.l_f,
            l_o: b.l_o,
            total: b.total,
            lambda: b.lambda_used,
            gate: b.gate_applied,
        }
    }
}

/// `l_det + alpha * l_f + beta * l_o`, rejecting non-finite values.
pub fn total_loss(l_det: f64, l_f: f64, l_o: f64, alpha: f64, beta: f64, step: usize) -> Result<f64> {
    for (name, v) in [("l_det", l_det), ("l_f", l_f), ("l_o", l_o), ("alpha", alpha), ("beta", beta)] {
        if !v.is_finite() {
            return Err(Error::Divergence { step, message: format!("{name} is {v}") });
        }
    }
    let total = l_det + alpha * l_f + beta * l_o;
    if !total.is_finite() {
        return Err(Error::Divergence { step, message: format!("total loss is {total}") });
    }
    Ok(total)
}

/// SGD with momentum: `v <- m v + g; w <- w - lr v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub learning_rate: f32,
    pub momentum: f32,
    pub velocity: BTreeMap<String, Tensor<f32>>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Self { learning_rate: learning_rate as f32, momentum: momentum as f32, velocity: BTreeMap::new() }
    }

    /// Updates the parameters named in `grads`; the rest are untouched.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &BTreeMap<String, Tensor<f32>>) {
        for (name, g) in grads {
            let v = self.velocity.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let w = store.get_mut(name).expect("gradient for a known parameter");
            for ((vi, &gi), wi) in v.data_mut().iter_mut().zip(g.data()).zip(w.data_mut()) {
                *vi = self.momentum * *vi + gi;
                *wi -= self.learning_rate * *vi;
            }
        }
    }
}

/// Mutable training state: weights, optimiser and the step counter.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: AfanModel,
    pub store: ParamStore<f32>,
    pub sgd: Sgd,
    pub config: TrainConfig,
    /// Completed steps.
    pub step: usize,
    /// Planned steps, for the reversal warm-up.
    pub total_steps: usize,
    pub record_digests: bool,
}

struct Branch {
    pyramid: PyramidFeatures,
    rpn: RpnOutput,
    anchors: AnchorSet,
    proposals: Vec<ImageProposals>,
}

fn forward_branch(model: &AfanModel, g: &mut Graph<f32>, store: &ParamStore<f32>, images: &[&ImageTensor]) -> Result<Branch> {
    let det = &model.detector;
    let x = g.constant(batch_images(images)?);
    let (_, _, h, w) = g.value(x).nchw();
    let pyramid = det.features(g, store, x)?;
    let rpn = det.rpn_forward(g, store, &pyramid);
    let anchors = generate_anchors(&det.cfg, h, w);
    let shapes: Vec<(usize, usize)> = images.iter().map(|i| (i.height(), i.width())).collect();
    let proposals = det.propose_all(g, &rpn, &anchors, &shapes, &det.cfg.proposals, det.cfg.train_proposals_per_image);
    Ok(Branch { pyramid, rpn, anchors, proposals })
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = AfanModel::new(config.model.clone())?;
        let store = model.init_store(config.seed);
        Ok(Self {
            model,
            store,
            sgd: Sgd::new(config.learning_rate, config.momentum),
            total_steps: 0,
            step: 0,
            record_digests: false,
            config,
        })
    }

    fn detection_terms(
        &self,
        g: &mut Graph<f32>,
        branch: &Branch,
        gts: &[&BoxSet],
    ) -> Result<crate::detector::DetectionLoss> {
        let det = &self.model.detector;
        let train_props: Vec<ImageProposals> =
            branch.proposals.iter().map(|p| p.top(det.cfg.train_proposals_per_image)).collect();
        let mut rng = stream_at(self.config.seed, "sampler", self.step as u64);
        let plan = det.plan_sampling(&branch.anchors, gts, &train_props, &mut rng);
        det.detection_loss(g, &self.store, &branch.pyramid, &branch.rpn, &branch.anchors, &plan)
    }

    fn apply(&mut self, g: &mut Graph<f32>, total: Var, epoch: usize) -> Result<()> {
        let grads = g.param_grads(&g.backward(total));
        if let Some((name, _)) = grads.iter().find(|(_, t)| !t.all_finite()) {
            return Err(Error::Divergence { step: self.step, message: format!("non-finite gradient for {name}") });
        }
        let updates = g.take_buffer_updates();
        self.sgd.learning_rate = self.config.lr_at(epoch) as f32;
        self.sgd.step(&mut self.store, &grads);
        apply_buffer_updates(&mut self.store, updates);
        self.step += 1;
        Ok(())
    }

    /// One plain detector update on annotated samples.
    pub fn supervised_step(&mut self, batch: &[AnnotatedSample], epoch: usize) -> Result<LossBundle> {
        let gts = annotations(batch)?;
        let images: Vec<&ImageTensor> = batch.iter().map(|s| &s.image).collect();
        let mut g = Graph::new();
        let digest = self.record_digests.then(|| self.store.digest());
        let branch = forward_branch(&self.model, &mut g, &self.store, &images)?;
        let det = self.detection_terms(&mut g, &branch, &gts)?;
        let l_det = g.value(det.total).item() as f64;
        let total = total_loss(l_det, 0.0, 0.0, 0.0, 0.0, self.step)?;
        let bundle = LossBundle {
            step: self.step,
            epoch,
            l_det,
            l_f: 0.0,
            l_o: 0.0,
            total,
            lambda_used: 0.0,
            gate_applied: false,
            diagnostics: StepDiagnostics {
                det_terms: [det.rpn_cls, det.rpn_reg, det.head_cls, det.head_reg],
                branch_digests: digest.map(|d| [d.clone(), d]),
                ..Default::default()
            },
        };
        self.apply(&mut g, det.total, epoch)?;
        Ok(bundle)
    }

    /// One joint update on a source and a target mini-batch.
    pub fn train_step(&mut self, source: &[AnnotatedSample], target: &[AnnotatedSample], epoch: usize) -> Result<LossBundle> {
        let cfg = self.config.clone();
        let step = self.step;
        let coefficient = if cfg.lambda_max == 0.0 {
            MixCoefficient::disabled()
        } else {
            sample_effective_lambda(cfg.lambda_max, &mut stream_at(cfg.seed, "mix", step as u64))?
        };
        let mix = build_mix_batch(source, target, coefficient)?;
        let gts: Vec<&BoxSet> = mix.pseudo_source.iter().map(|(_, b)| b).collect();
        let src_images: Vec<&ImageTensor> = mix.pseudo_source.iter().map(|(i, _)| i).collect();
        let grl_scale = cfg.grl_at(step, self.total_steps.max(step + 1));
        let grl = GradientReversal::new(grl_scale)?;

        let mut g = Graph::new();
        let digest_s = self.record_digests.then(|| self.store.digest());
        let src = forward_branch(&self.model, &mut g, &self.store, &src_images)?;
        let det = self.detection_terms(&mut g, &src, &gts)?;
        let l_det = g.value(det.total).item() as f64;
        let mut terms: Vec<(Var, f32)> = vec![(det.total, 1.0)];
        let mut diagnostics = StepDiagnostics {
            det_terms: [det.rpn_cls, det.rpn_reg, det.head_cls, det.head_reg],
            grl_scale,
            ..Default::default()
        };
        let (mut l_f, mut l_o) = (0.0, 0.0);

        if cfg.aligns() {
            let digest_t = self.record_digests.then(|| self.store.digest());
            diagnostics.branch_digests = digest_s.zip(digest_t).map(|(a, b)| [a, b]);
            let tgt_images: Vec<&ImageTensor> = mix.pseudo_target.iter().collect();
            let tgt = forward_branch(&self.model, &mut g, &self.store, &tgt_images)?;
            let (mu_s, mu_t) = (mix.source_label.mu(), mix.target_label.mu());
            let (ns, nt) = (src_images.len(), tgt_images.len());

            if cfg.alpha > 0.0 {
                let combined: Vec<Var> =
                    (0..NUM_LEVELS).map(|l| g.concat0(&[src.pyramid.levels[l], tgt.pyramid.levels[l]])).collect();
                let p = discriminate_features(&self.model.feature_disc, &mut g, &self.store, &combined, &grl, true)?;
                let mu: Vec<f64> = std::iter::repeat_n(mu_s, ns).chain(std::iter::repeat_n(mu_t, nt)).collect();
                let lf = feature_alignment_loss(&mut g, &p, &mu)?;
                l_f = g.value(lf).item() as f64;
                terms.push((lf, cfg.alpha as f32));
            }

            if cfg.beta > 0.0 {
                let params = &self.model.detector.cfg.proposals;
                let mut feats = Vec::new();
                let mut mu = Vec::new();
                let mut min_score: Option<f64> = None;
                for (branch, label) in [(&src, mu_s), (&tgt, mu_t)] {
                    let mut boxes = Vec::new();
                    for (n, p) in branch.proposals.iter().enumerate() {
                        let f = p.filtered(params.score_threshold, params.max_per_image);
                        diagnostics.aligned_proposals.push(f.len());
                        for (b, &s) in f.boxes.iter().zip(&f.scores) {
                            min_score = Some(min_score.map_or(s, |m| m.min(s)));
                            boxes.push((n, *b));
                        }
                    }
                    if !boxes.is_empty() {
                        let rf = self.model.detector.extract_region_features(&mut g, &self.store, &branch.pyramid, &boxes);
                        mu.extend(std::iter::repeat_n(label, rf.kept.len()));
                        feats.push(rf.features);
                    }
                }
                diagnostics.min_aligned_score = min_score;
                if mu.is_empty() {
                    diagnostics.l_o_empty = true;
                } else {
                    let f = if feats.len() == 1 { feats[0] } else { g.concat0(&feats) };
                    let p = discriminate_instances(&self.model.instance_disc, &mut g, &self.store, f, &grl)?;
                    if let Some(lo) = instance_alignment_loss(&mut g, p, &mu)? {
                        l_o = g.value(lo).item() as f64;
                        terms.push((lo, cfg.beta as f32));
                    }
                }
            }
        }

        let total = total_loss(l_det, l_f, l_o, cfg.alpha, cfg.beta, step)?;
        let total_var = if terms.len() == 1 { terms[0].0 } else { g.lincomb(&terms) };
        let bundle = LossBundle {
            step,
            epoch,
            l_det,
            l_f,
            l_o,
            total,
            lambda_used: coefficient.lambda,
            gate_applied: coefficient.gate_applied,
            diagnostics,
        };
        self.apply(&mut g, total_var, epoch)?;
        Ok(bundle)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_hash: self.config.hash(),
            step: self.step,
            model: self.config.model.clone(),
            train_config: serde_json::to_value(&self.config).expect("config serialises"),
            store: self.store.clone(),
            momentum: self.sgd.velocity.clone(),
        }
    }

    /// Restores weights, momentum and step from a checkpoint of the same config.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.config_hash != self.config.hash() {
            return Err(Error::Version(format!(
                "checkpoint config hash {} does not match the run config {}",
                ckpt.config_hash,
                self.config.hash()
            )));
        }
        ckpt.instantiate()?;
        self.store = ckpt.store.clone();
        self.sgd.velocity = ckpt.momentum.clone();
        self.step = ckpt.step;
        Ok(())
    }
}

fn annotations(batch: &[AnnotatedSample]) -> Result<Vec<&BoxSet>> {
    batch
        .iter()
        .map(|s| s.annotation.as_ref().ok_or_else(|| Error::validation(format!("sample {} has no annotation", s.image_id))))
        .collect()
}

/// Options that do not change what a run computes.
#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Directory for the metrics log and checkpoints; existing state there
    /// is resumed.
    pub out_dir: Option<PathBuf>,
    /// Stop (with a checkpoint) once this many steps are complete.
    pub stop_after: Option<usize>,
    pub record_digests: bool,
    /// Log progress every this many steps (0 = never).
    pub log_every: usize,
}

#[derive(Debug)]
pub struct FitOutcome {
    pub trainer: Trainer,
    /// Bundles of the steps run by this call.
    pub log: Vec<LossBundle>,
    pub checkpoint_path: Option<PathBuf>,
    pub completed: bool,
}

pub fn steps_per_epoch(n_source: usize, n_target: Option<usize>, batch: usize) -> usize {
    n_source.max(n_target.unwrap_or(0)).div_ceil(batch)
}

fn epoch_order(seed: u64, name: &str, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_at(seed, name, epoch as u64));
    order
}

fn take_batch(data: &[AnnotatedSample], order: &[usize], k: usize, b: usize) -> Vec<AnnotatedSample> {
    (0..b).map(|j| data[order[(k * b + j) % order.len()]].clone()).collect()
}

/// Keeps the first `lines` lines of the metrics log.
fn truncate_metrics(path: &Path, lines: usize) -> Result<()> {
    if !path.exists() {
        return if lines == 0 { Ok(()) } else { Err(Error::format(None, "metrics log missing for a resumed run")) };
    }
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let kept: Vec<String> = BufReader::new(f).lines().take(lines).collect::<std::io::Result<_>>().map_err(|e| Error::io(path, e))?;
    if kept.len() < lines {
        return Err(Error::format(Some(kept.len()), "metrics log is shorter than the checkpoint step"));
    }
    let mut text = kept.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    checkpoint::write_atomic(path, text.as_bytes())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(Some(i), e.to_string())))
        .collect()
}

/// Trains on `source` (annotated) and, when the config uses alignment,
/// the unannotated `target` set.
pub fn fit(
    source: &[AnnotatedSample],
    target: Option<&[AnnotatedSample]>,
    config: &TrainConfig,
    options: &FitOptions,
) -> Result<FitOutcome> {
    config.validate()?;
    if source.is_empty() {
        return Err(Error::validation("source dataset is empty"));
    }
    annotations(source)?;
    let target = if config.uses_target() {
        let t = target.ok_or_else(|| Error::validation("alignment terms need a target dataset"))?;
        if t.is_empty() {
            return Err(Error::validation("target dataset is empty"));
        }
        Some(t)
    } else {
        None
    };
    let b = config.batch_size_per_domain;
    let spe = steps_per_epoch(source.len(), target.map(|t| t.len()), b);
    let total_steps = spe * config.epochs;
    let mut trainer = Trainer::new(config.clone())?;
    trainer.total_steps = total_steps;
    trainer.record_digests = options.record_digests;

    let paths = options.out_dir.as_ref().map(|d| (d.join(METRICS_FILE), d.join(CHECKPOINT_FILE)));
    if let (Some(dir), Some((metrics, ckpt))) = (&options.out_dir, &paths) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        if ckpt.exists() {
            let c = checkpoint::load(ckpt)?;
            trainer.restore(&c)?;
            log::info!("resuming from step {}", trainer.step);
        }
        truncate_metrics(metrics, trainer.step)?;
    }
    let mut metrics_file = match &paths {
        Some((m, _)) => Some(fs::OpenOptions::new().create(true).append(true).open(m).map_err(|e| Error::io(m, e))?),
        None => None,
    };
    let save = |trainer: &Trainer| -> Result<()> {
        if let Some((_, ckpt)) = &paths {
            checkpoint::save(ckpt, &trainer.checkpoint())?;
        }
        Ok(())
    };

    let mut log = Vec::new();
    let mut completed = true;
    let mut orders: Option<(usize, Vec<usize>, Vec<usize>)> = None;
    while trainer.step < total_steps {
        if options.stop_after.is_some_and(|s| trainer.step >= s) {
            completed = false;
            break;
        }
        let step = trainer.step;
        let (epoch, k) = (step / spe, step % spe);
        if orders.as_ref().is_none_or(|o| o.0 != epoch) {
            let so = epoch_order(config.seed, "order/source", epoch, source.len());
            let to = target.map(|t| epoch_order(config.seed, "order/target", epoch, t.len())).unwrap_or_default();
            orders = Some((epoch, so, to));
        }
        let (_, so, to) = orders.as_ref().expect("orders set above");
        let sb = take_batch(source, so, k, b);
        let bundle = match target {
            Some(t) => {
                let tb = take_batch(t, to, k, b);
                trainer.train_step(&sb, &tb, epoch)?
            }
            None => trainer.supervised_step(&sb, epoch)?,
        };
        if let Some(f) = metrics_file.as_mut() {
            let line = serde_json::to_string(&MetricsRecord::from(&bundle))?;
            let path = &paths.as_ref().expect("paths with file").0;
            writeln!(f, "{line}").and_then(|_| f.flush()).map_err(|e| Error::io(path, e))?;
        }
        if options.log_every > 0 && (step + 1) % options.log_every == 0 {
            log::info!(
                "step {}/{} epoch {epoch}: total {:.4} det {:.4} f {:.4} o {:.4}",
                step + 1,
                total_steps,
                bundle.total,
                bundle.l_det,
                bundle.l_f,
                bundle.l_o
            );
        }
        log.push(bundle);
        if config.checkpoint_interval > 0 && trainer.step % config.checkpoint_interval == 0 && trainer.step < total_steps {
            save(&trainer)?;
        }
    }
    save(&trainer)?;
    Ok(FitOutcome { checkpoint_path: paths.map(|p| p.1), trainer, log, completed })
}

/// Source-only training: no mixing and no alignment terms.
pub fn build_baseline(source: &[AnnotatedSample], config: &TrainConfig, options: &FitOptions) -> Result<FitOutcome> {
    fit(source, None, &config.degenerate(), options)
}

/// Supervised training on annotated target data, the upper reference.
pub fn build_oracle(target: &[AnnotatedSample], config: &TrainConfig, options: &FitOptions) -> Result<FitOutcome> {
    fit(target, None, &config.degenerate(), options)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_loss_arithmetic() {
        assert_eq!(total_loss(1.5, 2.0, 3.0, 0.0, 0.0, 0).unwrap(), 1.5);
        assert!((total_loss(1.0, 2.0, 3.0, 0.5, 0.1, 0).unwrap() - 2.3).abs() < 1e-12);
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.1, 0.1, 0).unwrap(), 0.0);
        match total_loss(f64::NAN, 0.0, 0.0, 0.1, 0.1, 42) {
            Err(Error::Divergence { step, .. }) => assert_eq!(step, 42),
            other => panic!("{other:?}"),
        }
        assert!(total_loss(1.0, f64::INFINITY, 0.0, 0.1, 0.1, 0).is_err());
    }

    #[test]
    fn sgd_matches_hand_steps() {
        let mut store = ParamStore::<f32>::default();
        store.insert("w", Tensor::from_vec(&[1], vec![1.0]));
        let mut sgd = Sgd::new(0.1, 0.9);
        let grads = |g: f32| BTreeMap::from([("w".to_string(), Tensor::from_vec(&[1], vec![g]))]);
        sgd.step(&mut store, &grads(2.0));
        // v = 2, w = 1 - 0.2
        assert!((store.get("w").unwrap().data()[0] - 0.8).abs() < 1e-7);
        sgd.step(&mut store, &grads(-1.0));
        // v = 0.9 * 2 - 1 = 0.8, w = 0.8 - 0.08
        assert!((store.get("w").unwrap().data()[0] - 0.72).abs() < 1e-7);
        assert!((sgd.velocity["w"].data()[0] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn config_defaults_validate_and_hash_is_canonical() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!(c.hash(), TrainConfig::from_json(&c.canonical_json()).unwrap().hash());
        assert_ne!(c.hash(), TrainConfig { seed: 1, ..c.clone() }.hash());
        let v: serde_json::Value = serde_json::from_str(&c.canonical_json()).unwrap();
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn config_errors_are_listed_together() {
        let err = TrainConfig::from_json(r#"{"lambda_max": 0.9, "alpha": -1, "epochs": "x", "bogus": 1}"#).unwrap_err();
        let msg = err.to_string();
        for needle in ["bogus", "epochs", "lambda_max", "alpha"] {
            assert!(msg.contains(needle), "{msg}");
        }
        assert!(err.is_validation());
    }

    #[test]
    fn grl_warmup_ramps_linearly() {
        let c = TrainConfig { grl_warmup_fraction: 0.2, ..Default::default() };
        assert!((c.grl_at(0, 100) - 0.05).abs() < 1e-12);
        assert!((c.grl_at(9, 100) - 0.5).abs() < 1e-12);
        assert_eq!(c.grl_at(50, 100), 1.0);
        let flat = TrainConfig { grl_warmup_fraction: 0.0, ..Default::default() };
        assert_eq!(flat.grl_at(0, 100), 1.0);
    }

    #[test]
    fn step_count_arithmetic() {
        assert_eq!(steps_per_epoch(8, Some(8), 4) * 2, 4);
        assert_eq!(steps_per_epoch(10, Some(3), 4), 3);
        assert_eq!(steps_per_epoch(5, None, 2), 3);
    }
}
