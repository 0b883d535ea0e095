//! The dual-branch trainer.
//!
//! Every step runs the shared backbone on the (augmented) batch and on a
//! masked copy of it, adds up the weighted loss terms, back-propagates once
//! and applies one momentum-SGD update. With masking disabled the masked
//! branch is skipped entirely and the step is plain supervised training.
//!
//! A separate [`train_vanilla`] loop, built only from the model and BCE, is
//! kept as the reference the reduced trainer must reproduce bit for bit.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, batch_indices, stack_batch, Dataset};
use crate::error::{Error, Result};
use crate::evaluation::score_dataset;
use crate::loss::{total_loss_graph, LossBreakdown, LossWeights};
use crate::masking::{apply_mask_batch, sample_mask, Mask, MaskSubsets, Subset};
use crate::metrics::mean_average_precision;
use crate::model::{forward, load_checkpoint_for, save_checkpoint, Architecture, ModelParams};
use crate::numerics::{Graph, Tensor};

/// Which mask pool feeds the masked branch, if any.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Masking {
    #[default]
    High,
    Low,
    None,
}

impl Masking {
    pub fn subset(self) -> Option<Subset> {
        match self {
            Masking::High => Some(Subset::High),
            Masking::Low => Some(Subset::Low),
            Masking::None => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub masking: Masking,
    pub seed: u64,
    /// Save an epoch checkpoint every this many epochs; 0 disables them.
    pub checkpoint_every: usize,
    /// Random horizontal flip and resize-crop of training images.
    pub augment: bool,
    /// Checkpoint to start from instead of a fresh seeded initialization.
    pub init: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 60,
            batch_size: 16,
            weights: LossWeights::default(),
            masking: Masking::High,
            seed: 0,
            checkpoint_every: 0,
            augment: true,
            init: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("train: {m}")));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay {} must be >= 0", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        self.weights.validate()
    }

    /// Loss weights actually used: masking `none` always means vanilla.
    pub fn effective_weights(&self) -> LossWeights {
        match self.masking {
            Masking::None => LossWeights::vanilla(),
            _ => self.weights,
        }
    }

    /// The same config with `weights` replaced by [`Self::effective_weights`].
    pub fn normalized(&self) -> Self {
        Self {
            weights: self.effective_weights(),
            ..self.clone()
        }
    }

    pub fn sgd(&self) -> Sgd {
        Sgd {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Momentum buffers, one per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocities: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            velocities: params.tensors().map(|t| Tensor::zeros(t.shape().to_vec())).collect(),
        }
    }
}

/// `g' = g + wd*theta; v = momentum*v + g'; theta -= lr*v`.
///
/// Every gradient is checked before anything is written, so a failed step
/// leaves both parameters and velocities untouched.
pub fn sgd_step(params: &mut ModelParams, grads: &[Tensor], state: &mut OptimizerState, sgd: &Sgd) -> Result<()> {
    if grads.len() != params.len() || state.velocities.len() != params.len() {
        return Err(Error::shape(
            "sgd_step",
            format!("{} params, {} grads, {} velocities", params.len(), grads.len(), state.velocities.len()),
        ));
    }
    for (((name, p), g), v) in params.iter().zip(grads).zip(&state.velocities) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::shape(
                "sgd_step",
                format!("{name}: param {:?}, grad {:?}, velocity {:?}", p.shape(), g.shape(), v.shape()),
            ));
        }
        g.check_finite(&format!("gradient of {name}"))?;
    }
    for ((p, g), v) in params.tensors_mut().zip(grads).zip(&mut state.velocities) {
        for ((theta, &g), v) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            let g = g + sgd.weight_decay * *theta;
            *v = sgd.momentum * *v + g;
            *theta -= sgd.lr * *v;
        }
    }
    Ok(())
}

/// Loss terms and parameter gradients of one batch, without updating anything.
///
/// `masks` holds one mask per image; `None` skips the masked branch, in which
/// case `mabr` and `laco` are reported as 0 and only `alpha1 * rcg` is used.
pub fn msl_gradients(
    params: &ModelParams,
    images: &Tensor,
    labels: &Tensor,
    masks: Option<&[&Mask]>,
    weights: &LossWeights,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let arch = params.arch();
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let x = g.constant(images.clone());
    let logits_p = forward(arch, &mut g, &bound, x)?;
    let breakdown = match masks {
        Some(masks) => {
            let xm = g.constant(apply_mask_batch(images, masks)?);
            let logits_mp = forward(arch, &mut g, &bound, xm)?;
            let vars = total_loss_graph(&mut g, logits_p, logits_mp, labels, weights)?;
            let b = vars.breakdown(&g);
            check_loss(b.total)?;
            g.backward(vars.total)?;
            b
        }
        None => {
            weights.validate()?;
            let rcg = g.bce_with_logits(logits_p, labels)?;
            let total = g.scale(rcg, weights.alpha1);
            let b = LossBreakdown {
                rcg: g.value(rcg).data()[0],
                mabr: 0.0,
                laco: 0.0,
                total: g.value(total).data()[0],
            };
            check_loss(b.total)?;
            g.backward(total)?;
            b
        }
    };
    Ok((breakdown, bound.grads(&g)))
}

fn check_loss(total: f64) -> Result<()> {
    if total.is_finite() {
        Ok(())
    } else {
        // Epoch and step are filled in by the training loop.
        Err(Error::Diverged { epoch: 0, step: 0, loss: total })
    }
}

/// One optimizer step on a batch; see [`msl_gradients`].
pub fn msl_step(
    params: &mut ModelParams,
    state: &mut OptimizerState,
    images: &Tensor,
    labels: &Tensor,
    masks: Option<&[&Mask]>,
    weights: &LossWeights,
    sgd: &Sgd,
) -> Result<LossBreakdown> {
    if images.shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::Empty("batch".into()));
    }
    let (breakdown, grads) = msl_gradients(params, images, labels, masks, weights)?;
    sgd_step(params, &grads, state, sgd)?;
    Ok(breakdown)
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub rcg: f64,
    pub mabr: f64,
    pub laco: f64,
    pub total: f64,
    pub test_map: f64,
}

pub const LOG_HEADER: &str = "epoch,rcg,mabr,laco,total,test_map";

pub fn log_to_csv(log: &[EpochLog]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for r in log {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.rcg, r.mabr, r.laco, r.total, r.test_map
        ));
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_params: ModelParams,
    pub best_params: ModelParams,
    /// Epoch (1-based) of the best test mAP; 0 when no epoch ran.
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_GOOD_CHECKPOINT: &str = "last_good.ckpt";
pub const LOG_FILE: &str = "log.csv";

pub fn epoch_checkpoint(epoch: usize) -> String {
    format!("epoch_{epoch:03}.ckpt")
}

/// Independent random streams derived from the run seed.
struct Streams {
    augment: ChaCha8Rng,
    masks: ChaCha8Rng,
    shuffle_seed: u64,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let stream = |s| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(s);
            r
        };
        Self {
            augment: stream(1),
            masks: stream(2),
            shuffle_seed: seed.wrapping_add(0x5eed),
        }
    }
}

fn load_batch(dataset: &Dataset, idx: &[usize], do_augment: bool, rng: &mut ChaCha8Rng) -> Result<(Tensor, Tensor)> {
    let views: Vec<_> = idx
        .iter()
        .map(|&i| {
            let s = &dataset.samples[i];
            if do_augment {
                augment(s, rng).image
            } else {
                s.image.clone()
            }
        })
        .collect();
    stack_batch(idx.iter().zip(&views).map(|(&i, img)| (img, dataset.samples[i].labels.as_slice())))
}

fn test_map(params: &ModelParams, test: &Dataset) -> Result<f64> {
    mean_average_precision(&score_dataset(params, test, None)?)
}

fn check_datasets(arch: &Architecture, train: &Dataset, test: &Dataset) -> Result<()> {
    for (name, d) in [("train", train), ("test", test)] {
        if d.is_empty() {
            return Err(Error::Empty(format!("{name} split")));
        }
        if d.num_classes() != arch.num_classes || d.header.height != arch.height || d.header.width != arch.width {
            return Err(Error::ArchMismatch {
                expected: arch.describe(),
                found: format!(
                    "{name} split with K={} and {}x{} images",
                    d.num_classes(),
                    d.header.height,
                    d.header.width
                ),
            });
        }
    }
    Ok(())
}

/// Writes checkpoints and the log as training proceeds.
struct Sink<'a> {
    dir: Option<&'a Path>,
}

impl Sink<'_> {
    fn path(&self, name: &str) -> Option<PathBuf> {
        self.dir.map(|d| d.join(name))
    }

    fn checkpoint(&self, name: &str, params: &ModelParams) -> Result<()> {
        match self.path(name) {
            Some(p) => save_checkpoint(params, &p),
            None => Ok(()),
        }
    }

    fn log(&self, log: &[EpochLog]) -> Result<()> {
        match self.path(LOG_FILE) {
            Some(p) => fs::write(&p, log_to_csv(log)).map_err(|e| Error::io(p, e)),
            None => Ok(()),
        }
    }
}

/// Shared epoch loop; `step` performs one update and returns its losses.
fn run_epochs(
    cfg: &TrainConfig,
    initial: ModelParams,
    train: &Dataset,
    test: &Dataset,
    out_dir: Option<&Path>,
    mut step: impl FnMut(&mut ModelParams, &mut OptimizerState, &Tensor, &Tensor) -> Result<LossBreakdown>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    initial.check_finite()?;
    check_datasets(initial.arch(), train, test)?;
    let sink = Sink { dir: out_dir };
    if let Some(d) = out_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut params = initial;
    let mut state = OptimizerState::new(&params);
    let mut augment_rng = Streams::new(cfg.seed).augment;
    let shuffle_seed = Streams::new(cfg.seed).shuffle_seed;
    let mut best = (params.clone(), 0usize, f64::NEG_INFINITY);
    let mut log = Vec::with_capacity(cfg.epochs);
    sink.log(&log)?;
    for epoch in 1..=cfg.epochs {
        let mut sums = LossBreakdown::default();
        let batches = batch_indices(train.len(), cfg.batch_size, shuffle_seed, epoch)?;
        for (i, idx) in batches.iter().enumerate() {
            let (images, labels) = load_batch(train, idx, cfg.augment, &mut augment_rng)?;
            let b = match step(&mut params, &mut state, &images, &labels) {
                Ok(b) => b,
                Err(Error::Diverged { loss, .. }) => {
                    sink.checkpoint(LAST_GOOD_CHECKPOINT, &params)?;
                    return Err(Error::Diverged { epoch, step: i + 1, loss });
                }
                Err(e @ Error::NonFinite(_)) => {
                    sink.checkpoint(LAST_GOOD_CHECKPOINT, &params)?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            sums.rcg += b.rcg;
            sums.mabr += b.mabr;
            sums.laco += b.laco;
            sums.total += b.total;
        }
        let n = batches.len() as f64;
        let map = test_map(&params, test)?;
        log.push(EpochLog {
            epoch,
            rcg: sums.rcg / n,
            mabr: sums.mabr / n,
            laco: sums.laco / n,
            total: sums.total / n,
            test_map: map,
        });
        if map > best.2 {
            best = (params.clone(), epoch, map);
            sink.checkpoint(BEST_CHECKPOINT, &params)?;
        }
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
            sink.checkpoint(&epoch_checkpoint(epoch), &params)?;
        }
        sink.log(&log)?;
    }
    if cfg.epochs == 0 {
        sink.checkpoint(BEST_CHECKPOINT, &params)?;
    }
    sink.checkpoint(FINAL_CHECKPOINT, &params)?;
    Ok(TrainOutcome {
        final_params: params,
        best_params: best.0,
        best_epoch: best.1,
        log,
    })
}

/// Full MSL training. `subsets` is required unless masking is `none`.
///
/// After each epoch the test mAP is logged and the best-scoring parameters
/// are kept; when `out_dir` is given, `log.csv`, `best.ckpt`, `final.ckpt`
/// and periodic epoch checkpoints are written there.
pub fn train(
    cfg: &TrainConfig,
    arch: &Architecture,
    train_set: &Dataset,
    test_set: &Dataset,
    subsets: Option<&MaskSubsets>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    train_from(cfg, initial_params(cfg, arch)?, train_set, test_set, subsets, out_dir)
}

/// Starting point of a run: `cfg.init` if set, else a fresh init from `cfg.seed`.
pub fn initial_params(cfg: &TrainConfig, arch: &Architecture) -> Result<ModelParams> {
    match &cfg.init {
        Some(path) => load_checkpoint_for(path, arch),
        None => ModelParams::init(arch, cfg.seed),
    }
}

/// [`train`] starting from the given parameters; `cfg.init` is ignored.
pub fn train_from(
    cfg: &TrainConfig,
    initial: ModelParams,
    train_set: &Dataset,
    test_set: &Dataset,
    subsets: Option<&MaskSubsets>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let weights = cfg.effective_weights();
    let sgd = cfg.sgd();
    let which = cfg.masking.subset();
    let pool = match which {
        Some(w) => {
            let s = subsets.ok_or_else(|| Error::InvalidConfig(format!("masking {w} needs mask subsets")))?;
            if s.get(w).is_empty() {
                return Err(Error::Empty(format!("{w} mask subset")));
            }
            Some((s, w))
        }
        None => None,
    };
    let mut mask_rng = Streams::new(cfg.seed).masks;
    run_epochs(cfg, initial, train_set, test_set, out_dir, |params, state, images, labels| {
        let n = images.shape()[0];
        let masks = match pool {
            Some((s, w)) => Some(
                (0..n)
                    .map(|_| sample_mask(s, w, &mut mask_rng))
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        msl_step(params, state, images, labels, masks.as_deref(), &weights, &sgd)
    })
}

/// Plain supervised training on the recognition BCE alone.
pub fn train_vanilla(
    cfg: &TrainConfig,
    arch: &Architecture,
    train_set: &Dataset,
    test_set: &Dataset,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    train_vanilla_from(cfg, initial_params(cfg, arch)?, train_set, test_set, out_dir)
}

pub fn train_vanilla_from(
    cfg: &TrainConfig,
    initial: ModelParams,
    train_set: &Dataset,
    test_set: &Dataset,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let sgd = cfg.sgd();
    run_epochs(cfg, initial, train_set, test_set, out_dir, |params, state, images, labels| {
        vanilla_step(params, state, images, labels, &sgd)
    })
}

/// Forward, BCE, backward and SGD with no masked branch and no loss weights.
pub fn vanilla_step(
    params: &mut ModelParams,
    state: &mut OptimizerState,
    images: &Tensor,
    labels: &Tensor,
    sgd: &Sgd,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let x = g.constant(images.clone());
    let logits = forward(params.arch(), &mut g, &bound, x)?;
    let loss = g.bce_with_logits(logits, labels)?;
    let value = g.value(loss).data()[0];
    check_loss(value)?;
    g.backward(loss)?;
    sgd_step(params, &bound.grads(&g), state, sgd)?;
    Ok(LossBreakdown {
        rcg: value,
        mabr: 0.0,
        laco: 0.0,
        total: value,
    })
}
