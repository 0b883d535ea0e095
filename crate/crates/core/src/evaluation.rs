//! Clean and masked-input evaluation of trained models.
//!
//! Masked evaluation draws one mask per test image from a mask subset with a
//! seeded generator and scores the masked copies; the stored dataset is never
//! modified. [`compare`] evaluates several models side by side and averages
//! the masked scores over a list of evaluation seeds.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{stack_batch, Dataset};
use crate::error::{Error, Result};
use crate::masking::{apply_mask_batch, sample_mask, Mask, MaskSubsets, Subset};
use crate::metrics::{stratified_report, MetricsReport, ScoredPredictions, Stratum, DEFAULT_THRESHOLD};
use crate::model::{predict, ModelParams};

const SCORE_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub threshold: f64,
    /// Mask pool used for masked evaluation.
    pub subset: Subset,
    /// One masked pass per seed; masked metrics are averaged over them.
    pub seeds: Vec<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            subset: Subset::High,
            seeds: vec![0, 1, 2],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidConfig(format!("eval: threshold {} outside (0, 1)", self.threshold)));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("eval: at least one seed is required".into()));
        }
        Ok(())
    }
}

fn check_compatible(params: &ModelParams, dataset: &Dataset) -> Result<()> {
    let a = params.arch();
    let h = &dataset.header;
    if a.num_classes != h.num_classes || a.height != h.height || a.width != h.width {
        return Err(Error::ArchMismatch {
            expected: format!("K={} and {}x{} images", h.num_classes, h.height, h.width),
            found: format!("K={} and {}x{} images", a.num_classes, a.height, a.width),
        });
    }
    if dataset.is_empty() {
        return Err(Error::Empty("evaluation split".into()));
    }
    Ok(())
}

/// Sigmoid scores for every image, optionally multiplied by one mask per image.
pub fn score_dataset(params: &ModelParams, dataset: &Dataset, masks: Option<&[&Mask]>) -> Result<ScoredPredictions> {
    check_compatible(params, dataset)?;
    if let Some(m) = masks {
        if m.len() != dataset.len() {
            return Err(Error::shape(
                "score_dataset",
                format!("{} masks for {} images", m.len(), dataset.len()),
            ));
        }
    }
    let mut scores = Vec::with_capacity(dataset.len() * dataset.num_classes());
    let mut targets = Vec::with_capacity(scores.capacity());
    for (c, chunk) in dataset.samples.chunks(SCORE_CHUNK).enumerate() {
        let (mut images, labels) = stack_batch(chunk.iter().map(|s| (&s.image, s.labels.as_slice())))?;
        if let Some(m) = masks {
            let start = c * SCORE_CHUNK;
            images = apply_mask_batch(&images, &m[start..start + chunk.len()])?;
        }
        scores.extend_from_slice(predict(params, &images)?.data());
        targets.extend(labels.data().iter().map(|&v| v as u8));
    }
    ScoredPredictions::new(dataset.len(), dataset.num_classes(), scores, targets)
}

/// Small / non-small and occluded / non-occluded image strata.
pub fn strata_for(dataset: &Dataset) -> Vec<Stratum> {
    let t = dataset.small_threshold();
    let small: Vec<bool> = dataset.samples.iter().map(|s| s.has_small_object(t)).collect();
    let occluded: Vec<bool> = dataset.samples.iter().map(|s| s.has_occluded_object()).collect();
    let not = |v: &[bool]| v.iter().map(|b| !b).collect();
    let has_meta = dataset.samples.iter().any(|s| !s.objects.is_empty());
    if !has_meta {
        return Vec::new();
    }
    vec![
        Stratum { name: "small".into(), members: small.clone() },
        Stratum { name: "non_small".into(), members: not(&small) },
        Stratum { name: "occluded".into(), members: occluded.clone() },
        Stratum { name: "non_occluded".into(), members: not(&occluded) },
    ]
}

/// Clean evaluation: no augmentation, no masking, full metric suite with strata.
pub fn evaluate(params: &ModelParams, dataset: &Dataset, threshold: f64) -> Result<MetricsReport> {
    let sp = score_dataset(params, dataset, None)?;
    stratified_report(&sp, &strata_for(dataset), threshold)
}

/// Evaluation with explicitly given masks, one per image.
pub fn evaluate_with_masks(
    params: &ModelParams,
    dataset: &Dataset,
    masks: &[&Mask],
    threshold: f64,
) -> Result<MetricsReport> {
    let sp = score_dataset(params, dataset, Some(masks))?;
    stratified_report(&sp, &strata_for(dataset), threshold)
}

/// The masks drawn for each test image under `seed`.
pub fn draw_eval_masks<'a>(subsets: &'a MaskSubsets, which: Subset, n: usize, seed: u64) -> Result<Vec<&'a Mask>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| sample_mask(subsets, which, &mut rng)).collect()
}

/// Each image masked with one mask drawn from `which` under `seed`, then scored.
pub fn evaluate_masked(
    params: &ModelParams,
    dataset: &Dataset,
    subsets: &MaskSubsets,
    which: Subset,
    seed: u64,
    threshold: f64,
) -> Result<MetricsReport> {
    let masks = draw_eval_masks(subsets, which, dataset.len(), seed)?;
    evaluate_with_masks(params, dataset, &masks, threshold)
}

/// The seven headline numbers of a report.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub map: f64,
    pub cp: f64,
    pub cr: f64,
    pub cf1: f64,
    pub op: f64,
    #[serde(rename = "or")]
    pub or_: f64,
    pub of1: f64,
}

pub const METRIC_NAMES: [&str; 7] = ["map", "cp", "cr", "cf1", "op", "or", "of1"];

impl MetricSummary {
    pub fn from_report(r: &MetricsReport) -> Self {
        Self::from_values(r.scalars().map(|(_, v)| v))
    }

    fn from_values(v: [f64; 7]) -> Self {
        Self {
            map: v[0],
            cp: v[1],
            cr: v[2],
            cf1: v[3],
            op: v[4],
            or_: v[5],
            of1: v[6],
        }
    }

    pub fn values(&self) -> [f64; 7] {
        [self.map, self.cp, self.cr, self.cf1, self.op, self.or_, self.of1]
    }

    pub fn named(&self) -> impl Iterator<Item = (&'static str, f64)> {
        METRIC_NAMES.into_iter().zip(self.values())
    }

    pub fn mean(items: &[MetricSummary]) -> Self {
        let mut acc = [0.0; 7];
        for s in items {
            for (a, v) in acc.iter_mut().zip(s.values()) {
                *a += v;
            }
        }
        Self::from_values(acc.map(|a| a / items.len() as f64))
    }

    /// `self - other`, metric by metric.
    pub fn minus(&self, other: &Self) -> Self {
        let (a, b) = (self.values(), other.values());
        Self::from_values(std::array::from_fn(|i| a[i] - b[i]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskedRun {
    pub seed: u64,
    pub report: MetricsReport,
}

/// Clean and masked results of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRobustness {
    pub model: String,
    pub clean: MetricsReport,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub masked_runs: Vec<MaskedRun>,
    /// Mean of the masked runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masked: Option<MetricSummary>,
    /// `masked - clean`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deltas: Option<MetricSummary>,
}

impl ModelRobustness {
    pub fn clean_summary(&self) -> MetricSummary {
        MetricSummary::from_report(&self.clean)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub subset: Option<Subset>,
    pub seeds: Vec<u64>,
    pub threshold: f64,
    pub models: Vec<ModelRobustness>,
}

/// Evaluates each named model clean and, when `subsets` is given, masked
/// under every seed of `cfg`.
pub fn compare(
    models: &[(String, &ModelParams)],
    dataset: &Dataset,
    subsets: Option<&MaskSubsets>,
    cfg: &EvalConfig,
) -> Result<RobustnessReport> {
    cfg.validate()?;
    if models.is_empty() {
        return Err(Error::Empty("model list".into()));
    }
    let mut rows = Vec::with_capacity(models.len());
    for (name, params) in models {
        let clean = evaluate(params, dataset, cfg.threshold)?;
        let mut row = ModelRobustness {
            model: name.clone(),
            clean,
            masked_runs: Vec::new(),
            masked: None,
            deltas: None,
        };
        if let Some(s) = subsets {
            for &seed in &cfg.seeds {
                let report = evaluate_masked(params, dataset, s, cfg.subset, seed, cfg.threshold)?;
                row.masked_runs.push(MaskedRun { seed, report });
            }
            let runs: Vec<_> = row.masked_runs.iter().map(|r| MetricSummary::from_report(&r.report)).collect();
            let masked = MetricSummary::mean(&runs);
            row.deltas = Some(masked.minus(&row.clean_summary()));
            row.masked = Some(masked);
        }
        rows.push(row);
    }
    Ok(RobustnessReport {
        subset: subsets.map(|_| cfg.subset),
        seeds: if subsets.is_some() { cfg.seeds.clone() } else { Vec::new() },
        threshold: cfg.threshold,
        models: rows,
    })
}

/// `model,mode,metric,value` rows: one per model, mode and headline metric.
pub fn plot_csv(report: &RobustnessReport) -> String {
    let mut out = String::from("model,mode,metric,value\n");
    for m in &report.models {
        let mut modes = vec![("clean", m.clean_summary())];
        if let Some(masked) = m.masked {
            modes.push(("masked", masked));
        }
        for (mode, summary) in modes {
            for (metric, value) in summary.named() {
                out.push_str(&format!("{},{mode},{metric},{value}\n", m.model));
            }
        }
    }
    out
}
