//! Multi-label evaluation: per-class average precision, mAP, and the
//! thresholded per-class (CP/CR/CF1) and overall (OP/OR/OF1) scores.
//!
//! AP is the mean of precision at the rank of each positive item, ranking by
//! descending score with ties broken by ascending item index. Classes without
//! positives are left out of mAP, and classes whose precision or recall has a
//! zero denominator are left out of the CP/CR means.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Scores and binary targets for `n` items over `k` classes, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredPredictions {
    n: usize,
    k: usize,
    scores: Vec<f64>,
    targets: Vec<u8>,
}

impl ScoredPredictions {
    pub fn new(n: usize, k: usize, scores: Vec<f64>, targets: Vec<u8>) -> Result<Self> {
        if n == 0 || k == 0 {
            return Err(Error::Empty("prediction set".into()));
        }
        if scores.len() != n * k || targets.len() != n * k {
            return Err(Error::shape(
                "scored predictions",
                format!("{n}x{k} needs {} values, got {} scores and {} targets", n * k, scores.len(), targets.len()),
            ));
        }
        if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("prediction score {s}")));
        }
        if let Some(t) = targets.iter().find(|&&t| t > 1) {
            return Err(Error::InvalidArgument(format!("targets must be 0 or 1, found {t}")));
        }
        Ok(Self { n, k, scores, targets })
    }

    /// From `[N,K]` score and {0,1} target tensors.
    pub fn from_tensors(scores: &Tensor, targets: &Tensor) -> Result<Self> {
        if scores.shape() != targets.shape() || scores.shape().len() != 2 {
            return Err(Error::shape(
                "scored predictions",
                format!("{:?} vs {:?}", scores.shape(), targets.shape()),
            ));
        }
        let t = targets
            .data()
            .iter()
            .map(|&v| match v {
                0.0 => Ok(0),
                1.0 => Ok(1),
                other => Err(Error::InvalidArgument(format!("targets must be 0 or 1, found {other}"))),
            })
            .collect::<Result<_>>()?;
        Self::new(scores.shape()[0], scores.shape()[1], scores.data().to_vec(), t)
    }

    pub fn num_items(&self) -> usize {
        self.n
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn targets(&self) -> &[u8] {
        &self.targets
    }

    pub fn row(&self, i: usize) -> (&[f64], &[u8]) {
        (&self.scores[i * self.k..(i + 1) * self.k], &self.targets[i * self.k..(i + 1) * self.k])
    }

    pub fn column(&self, class: usize) -> (Vec<f64>, Vec<u8>) {
        (0..self.n)
            .map(|i| (self.scores[i * self.k + class], self.targets[i * self.k + class]))
            .unzip()
    }

    /// Rows whose flag is set, in order; `None` when no row is selected.
    pub fn filter_rows(&self, keep: &[bool]) -> Option<Self> {
        assert_eq!(keep.len(), self.n, "one flag per item");
        let mut scores = Vec::new();
        let mut targets = Vec::new();
        let mut n = 0;
        for (i, _) in keep.iter().enumerate().filter(|(_, &k)| k) {
            let (s, t) = self.row(i);
            scores.extend_from_slice(s);
            targets.extend_from_slice(t);
            n += 1;
        }
        (n > 0).then(|| Self { n, k: self.k, scores, targets })
    }
}

/// Mean precision at the ranks of the positive items; `None` without positives.
pub fn average_precision(scores: &[f64], targets: &[u8]) -> Option<f64> {
    assert_eq!(scores.len(), targets.len(), "one target per score");
    let positives = targets.iter().filter(|&&t| t == 1).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if targets[i] == 1 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / positives as f64)
}

pub fn per_class_ap(sp: &ScoredPredictions) -> Vec<Option<f64>> {
    (0..sp.k)
        .map(|c| {
            let (s, t) = sp.column(c);
            average_precision(&s, &t)
        })
        .collect()
}

/// Mean of per-class AP over classes with at least one positive.
pub fn mean_average_precision(sp: &ScoredPredictions) -> Result<f64> {
    mean_defined(&per_class_ap(sp)).ok_or_else(|| Error::Empty("positive targets in every class".into()))
}

fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn precision(&self) -> Option<f64> {
        let d = self.tp + self.fp;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }

    pub fn recall(&self) -> Option<f64> {
        let d = self.tp + self.fn_;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }
}

/// Per-class counts, predicting positive iff `score >= threshold`.
pub fn confusion(sp: &ScoredPredictions, threshold: f64) -> Vec<Confusion> {
    let mut out = vec![Confusion::default(); sp.k];
    for (i, (&s, &t)) in sp.scores.iter().zip(&sp.targets).enumerate() {
        let c = &mut out[i % sp.k];
        match (s >= threshold, t == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => {}
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrfSuite {
    pub cp: f64,
    pub cr: f64,
    pub cf1: f64,
    pub op: f64,
    #[serde(rename = "or")]
    pub or_: f64,
    pub of1: f64,
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

pub fn prf_from_counts(counts: &[Confusion]) -> PrfSuite {
    let precisions: Vec<_> = counts.iter().map(Confusion::precision).collect();
    let recalls: Vec<_> = counts.iter().map(Confusion::recall).collect();
    let cp = mean_defined(&precisions).unwrap_or(0.0);
    let cr = mean_defined(&recalls).unwrap_or(0.0);
    let pooled = counts.iter().fold(Confusion::default(), |a, c| Confusion {
        tp: a.tp + c.tp,
        fp: a.fp + c.fp,
        fn_: a.fn_ + c.fn_,
    });
    let op = pooled.precision().unwrap_or(0.0);
    let or_ = pooled.recall().unwrap_or(0.0);
    PrfSuite {
        cp,
        cr,
        cf1: f1(cp, cr),
        op,
        or_,
        of1: f1(op, or_),
    }
}

/// CP, CR, CF1, OP, OR, OF1 at `threshold`.
pub fn prf_suite(sp: &ScoredPredictions, threshold: f64) -> Result<PrfSuite> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} outside (0, 1)")));
    }
    Ok(prf_from_counts(&confusion(sp, threshold)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub images: usize,
    pub threshold: f64,
    pub map: f64,
    #[serde(flatten)]
    pub prf: PrfSuite,
    pub per_class_ap: Vec<Option<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub strata: Vec<StratumReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratumReport {
    pub name: String,
    pub report: MetricsReport,
}

impl MetricsReport {
    /// Named scalar metrics in a fixed order: map, cp, cr, cf1, op, or, of1.
    pub fn scalars(&self) -> [(&'static str, f64); 7] {
        [
            ("map", self.map),
            ("cp", self.prf.cp),
            ("cr", self.prf.cr),
            ("cf1", self.prf.cf1),
            ("op", self.prf.op),
            ("or", self.prf.or_),
            ("of1", self.prf.of1),
        ]
    }

    pub fn stratum(&self, name: &str) -> Option<&MetricsReport> {
        self.strata.iter().find(|s| s.name == name).map(|s| &s.report)
    }
}

/// Full metric suite without strata.
pub fn report(sp: &ScoredPredictions, threshold: f64) -> Result<MetricsReport> {
    let ap = per_class_ap(sp);
    let map = mean_defined(&ap).ok_or_else(|| Error::Empty("positive targets in every class".into()))?;
    let counts = confusion(sp, threshold);
    let prf = prf_suite(sp, threshold)?;
    let mut notes = Vec::new();
    let no_pos: Vec<String> = ap
        .iter()
        .enumerate()
        .filter(|(_, a)| a.is_none())
        .map(|(c, _)| c.to_string())
        .collect();
    if !no_pos.is_empty() {
        notes.push(format!("classes without positives excluded from mAP and CR: {}", no_pos.join(",")));
    }
    let no_pred: Vec<String> = counts
        .iter()
        .enumerate()
        .filter(|(_, c)| c.precision().is_none())
        .map(|(c, _)| c.to_string())
        .collect();
    if !no_pred.is_empty() {
        notes.push(format!("classes without positive predictions excluded from CP: {}", no_pred.join(",")));
    }
    Ok(MetricsReport {
        images: sp.n,
        threshold,
        map,
        prf,
        per_class_ap: ap,
        strata: Vec::new(),
        notes,
    })
}

/// A named subset of items, one flag per item.
#[derive(Clone, Debug, PartialEq)]
pub struct Stratum {
    pub name: String,
    pub members: Vec<bool>,
}

/// Global report plus one sub-report per non-empty stratum.
pub fn stratified_report(sp: &ScoredPredictions, strata: &[Stratum], threshold: f64) -> Result<MetricsReport> {
    let mut out = report(sp, threshold)?;
    for s in strata {
        let Some(sub) = sp.filter_rows(&s.members) else {
            out.notes.push(format!("stratum {} omitted: no images", s.name));
            continue;
        };
        match report(&sub, threshold) {
            Ok(r) => out.strata.push(StratumReport {
                name: s.name.clone(),
                report: r,
            }),
            Err(Error::Empty(_)) => out.notes.push(format!("stratum {} omitted: no positive targets", s.name)),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// `class,ap,positives,tp,fp,fn,precision,recall` rows; undefined values are empty.
pub fn per_class_csv(sp: &ScoredPredictions, threshold: f64, class_names: Option<&[String]>) -> String {
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("class,name,ap,positives,tp,fp,fn,precision,recall\n");
    let ap = per_class_ap(sp);
    for (c, counts) in confusion(sp, threshold).iter().enumerate() {
        let name = class_names.and_then(|n| n.get(c)).map(String::as_str).unwrap_or("");
        out.push_str(&format!(
            "{c},{name},{},{},{},{},{},{},{}\n",
            fmt(ap[c]),
            counts.tp + counts.fn_,
            counts.tp,
            counts.fp,
            counts.fn_,
            fmt(counts.precision()),
            fmt(counts.recall()),
        ));
    }
    out
}

/// One line of a predictions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub id: String,
    pub scores: Vec<f64>,
    pub targets: Vec<u8>,
}

/// Writes predictions as JSON lines.
pub fn predictions_to_jsonl(ids: &[String], sp: &ScoredPredictions) -> String {
    let mut out = String::new();
    for (i, id) in ids.iter().enumerate() {
        let (s, t) = sp.row(i);
        let rec = PredictionRecord {
            id: id.clone(),
            scores: s.to_vec(),
            targets: t.to_vec(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("serializable"));
        out.push('\n');
    }
    out
}

/// Parses a JSON-lines predictions file.
pub fn predictions_from_jsonl(text: &str) -> Result<(Vec<String>, ScoredPredictions)> {
    let mut ids = Vec::new();
    let mut scores = Vec::new();
    let mut targets = Vec::new();
    let mut k = None;
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: PredictionRecord =
            serde_json::from_str(line).map_err(|e| Error::format("predictions", format!("line {}: {e}", i + 1)))?;
        let width = *k.get_or_insert(rec.scores.len());
        if rec.scores.len() != width || rec.targets.len() != width {
            return Err(Error::format(
                "predictions",
                format!("line {}: expected {width} scores and targets", i + 1),
            ));
        }
        ids.push(rec.id);
        scores.extend(rec.scores);
        targets.extend(rec.targets);
    }
    let sp = ScoredPredictions::new(ids.len(), k.unwrap_or(0), scores, targets)?;
    Ok((ids, sp))
}
