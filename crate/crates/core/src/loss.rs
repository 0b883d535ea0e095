//! Recognition, masked-branch and label-consistency losses.
//!
//! `total = alpha1 * rcg + alpha2 * mabr + alpha3 * laco`, where `rcg` and
//! `mabr` are binary cross-entropies of the clean and masked predictions
//! against the ground truth and `laco` is the squared L2 distance between the
//! two prediction vectors. BCE is averaged over all `N*K` entries; `laco` is
//! summed over classes and averaged over the batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::new(0.3, 0.2, 0.5)
    }
}

impl LossWeights {
    pub const fn new(alpha1: f64, alpha2: f64, alpha3: f64) -> Self {
        Self { alpha1, alpha2, alpha3 }
    }

    /// Plain recognition loss.
    pub const fn vanilla() -> Self {
        Self::new(1.0, 0.0, 0.0)
    }

    /// Recognition plus masked-branch BCE, no consistency.
    pub const fn inter() -> Self {
        Self::new(1.0, 1.0, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha1", self.alpha1), ("alpha2", self.alpha2), ("alpha3", self.alpha3)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!("loss weight {name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    pub fn is_vanilla(&self) -> bool {
        *self == Self::vanilla()
    }

    /// The weighted sum, in the same association order used by the graph.
    pub fn combine(&self, rcg: f64, mabr: f64, laco: f64) -> f64 {
        self.alpha1 * rcg + self.alpha2 * mabr + self.alpha3 * laco
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rcg: f64,
    pub mabr: f64,
    pub laco: f64,
    pub total: f64,
}

fn check_pair(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.shape().len() != 2 {
        return Err(Error::shape(op, format!("expected [N,K], got {:?}", a.shape())));
    }
    Ok(())
}

/// Mean binary cross-entropy of probabilities against a {0,1} target.
pub fn bce(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_pair("bce", pred, target)?;
    if let Some(t) = target.data().iter().find(|&&t| t != 0.0 && t != 1.0) {
        return Err(Error::InvalidArgument(format!("bce target must be 0 or 1, found {t}")));
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            t * p.ln() + (1.0 - t) * (1.0 - p).ln()
        })
        .sum();
    Ok(-sum / pred.len() as f64)
}

/// Batch mean of the per-sample squared Euclidean distance.
pub fn laco(y_p: &Tensor, y_mp: &Tensor) -> Result<f64> {
    check_pair("laco", y_p, y_mp)?;
    let n = y_p.shape()[0] as f64;
    let sum: f64 = y_p
        .data()
        .iter()
        .zip(y_mp.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / n)
}

/// All three terms from probabilities and their weighted total.
pub fn total_loss(y_p: &Tensor, y_mp: &Tensor, y_gt: &Tensor, weights: &LossWeights) -> Result<LossBreakdown> {
    weights.validate()?;
    let rcg = bce(y_p, y_gt)?;
    let mabr = bce(y_mp, y_gt)?;
    let laco = laco(y_p, y_mp)?;
    Ok(LossBreakdown {
        rcg,
        mabr,
        laco,
        total: weights.combine(rcg, mabr, laco),
    })
}

/// Graph version of [`laco`] on probability tensors.
pub fn laco_graph(graph: &mut Graph, y_p: Var, y_mp: Var) -> Result<Var> {
    let n = graph.value(y_p).shape()[0] as f64;
    let diff = graph.sub(y_p, y_mp)?;
    let sq = graph.square(diff);
    let s = graph.sum(sq);
    Ok(graph.scale(s, 1.0 / n))
}

/// Graph nodes of every loss term.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub rcg: Var,
    pub mabr: Var,
    pub laco: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, graph: &Graph) -> LossBreakdown {
        let get = |v: Var| graph.value(v).data()[0];
        LossBreakdown {
            rcg: get(self.rcg),
            mabr: get(self.mabr),
            laco: get(self.laco),
            total: get(self.total),
        }
    }
}

/// Records the full dual-branch objective from the two branches' logits.
///
/// BCE uses the fused logit form; label consistency acts on the sigmoid
/// probabilities and back-propagates into both branches.
pub fn total_loss_graph(
    graph: &mut Graph,
    logits_p: Var,
    logits_mp: Var,
    target: &Tensor,
    weights: &LossWeights,
) -> Result<LossVars> {
    weights.validate()?;
    let rcg = graph.bce_with_logits(logits_p, target)?;
    let mabr = graph.bce_with_logits(logits_mp, target)?;
    let y_p = graph.sigmoid(logits_p);
    let y_mp = graph.sigmoid(logits_mp);
    let laco = laco_graph(graph, y_p, y_mp)?;
    let a = graph.scale(rcg, weights.alpha1);
    let b = graph.scale(mabr, weights.alpha2);
    let c = graph.scale(laco, weights.alpha3);
    let ab = graph.add(a, b)?;
    let total = graph.add(ab, c)?;
    Ok(LossVars { rcg, mabr, laco, total })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, v: &[f64]) -> Tensor {
        Tensor::new(vec![rows, v.len() / rows], v.to_vec()).unwrap()
    }

    #[test]
    fn bce_of_perfect_prediction_is_tiny() {
        let y = t(2, &[1.0, 0.0, 0.0, 1.0]);
        assert!(bce(&y, &y).unwrap() <= 1e-10);
    }

    #[test]
    fn bce_of_coin_flip_is_ln2() {
        let v = bce(&t(1, &[0.5, 0.5]), &t(1, &[1.0, 0.0])).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((v - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn bce_rejects_soft_targets() {
        assert!(bce(&t(1, &[0.5]), &t(1, &[0.3])).is_err());
    }

    #[test]
    fn laco_values() {
        let a = t(1, &[0.8, 0.2]);
        let b = t(1, &[0.6, 0.4]);
        assert_eq!(laco(&a, &a).unwrap(), 0.0);
        assert!((laco(&a, &b).unwrap() - 0.08).abs() < 1e-15);
        assert_eq!(laco(&a, &b).unwrap(), laco(&b, &a).unwrap());
        assert!(laco(&a, &t(2, &[0.1, 0.2])).is_err());
    }

    #[test]
    fn weighted_total() {
        let w = LossWeights::default();
        assert!((w.combine(0.6, 0.7, 0.08) - 0.36).abs() < 1e-15);
        assert!(LossWeights::new(-0.1, 0.0, 0.0).validate().is_err());
    }

    #[test]
    fn reductions_to_vanilla_and_inter() {
        let y_p = t(2, &[0.7, 0.2, 0.4, 0.9]);
        let y_mp = t(2, &[0.6, 0.3, 0.5, 0.5]);
        let gt = t(2, &[1.0, 0.0, 0.0, 1.0]);
        let v = total_loss(&y_p, &y_mp, &gt, &LossWeights::vanilla()).unwrap();
        assert_eq!(v.total, bce(&y_p, &gt).unwrap());
        let i = total_loss(&y_p, &y_mp, &gt, &LossWeights::inter()).unwrap();
        assert_eq!(i.total, bce(&y_p, &gt).unwrap() + bce(&y_mp, &gt).unwrap());
    }

    #[test]
    fn graph_breakdown_matches_weighted_sum() {
        let mut g = Graph::new();
        let zp = g.constant(t(2, &[0.3, -1.2, 2.0, 0.1]));
        let zm = g.constant(t(2, &[-0.3, 0.2, 1.0, -0.4]));
        let gt = t(2, &[1.0, 0.0, 1.0, 1.0]);
        let w = LossWeights::default();
        let vars = total_loss_graph(&mut g, zp, zm, &gt, &w).unwrap();
        let b = vars.breakdown(&g);
        assert_eq!(b.total, w.combine(b.rcg, b.mabr, b.laco));

        let p = crate::numerics::sigmoid(g.value(zp));
        let m = crate::numerics::sigmoid(g.value(zm));
        let plain = total_loss(&p, &m, &gt, &w).unwrap();
        assert!((plain.total - b.total).abs() < 1e-12);
    }
}
