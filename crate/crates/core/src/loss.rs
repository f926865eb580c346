//! Set-prediction loss over matched and unmatched queries.
//!
//! Matched queries pay the negative log-likelihood of their target class plus
//! an L1 coordinate term; unmatched queries pay a down-weighted NLL of the
//! background class. The class term is averaged over all queries, coordinate
//! terms over matched targets. The matching is a forward-pass decision and is
//! held constant during differentiation.

use crate::matcher::{self, BoxCostWeights, Matching, Target};
use crate::nn::{HeadKind, HeadOutput, SetPrediction};
use crate::tensor::{Tensor, TensorError};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the background NLL for unmatched queries.
    pub background: f64,
    pub coord: f64,
    /// Generalized-IoU weight; only box heads use it.
    pub giou: f64,
}

impl LossWeights {
    pub fn keypoint() -> LossWeights {
        LossWeights {
            background: 0.1,
            coord: 1.0,
            giou: 0.0,
        }
    }

    pub fn person() -> LossWeights {
        LossWeights {
            background: 0.1,
            coord: 5.0,
            giou: 2.0,
        }
    }
}

/// How targets are assigned to queries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MatchStrategy {
    /// Optimal assignment under the training cost.
    Hungarian,
    /// Query `c` always serves class `c`.
    ClassSpecific,
    /// Optimal assignment under the weighted class + L1 + GIoU box cost.
    Boxes(BoxCostWeights),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerLoss {
    pub total: f64,
    pub class_term: f64,
    pub coord_term: f64,
    pub giou_term: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub class_term: f64,
    pub coord_term: f64,
    pub giou_term: f64,
    /// One entry per supervised decoder layer.
    pub layers: Vec<LayerLoss>,
}

fn contract(msg: String) -> TensorError {
    TensorError::Contract(msg)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let cols = t.shape()[1];
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

/// Loss of one head output against `targets` under a fixed `matching`.
pub fn set_loss(targets: &[Target], out: &HeadOutput, matching: &Matching, kind: HeadKind, w: &LossWeights) -> Result<(Tensor, LayerLoss), TensorError> {
    let q = out.logits.shape()[0];
    let n_classes = kind.n_classes();
    if out.logits.shape() != [q, n_classes] || out.coords.shape() != [q, kind.n_coords()] {
        return Err(contract(format!(
            "head output {:?}/{:?} does not fit {kind:?}",
            out.logits.shape(),
            out.coords.shape()
        )));
    }
    if matching.assignment.len() != targets.len() || !matching.is_injective() || matching.assignment.iter().any(|&c| c >= q) {
        return Err(contract(format!(
            "matching {:?} is not an injection of {} targets into {q} queries",
            matching.assignment,
            targets.len()
        )));
    }

    let mut mask = vec![0.0; q * n_classes];
    for (query, target) in matching.query_targets(q).into_iter().enumerate() {
        match target {
            Some(t) => mask[query * n_classes + targets[t].class] = 1.0,
            None => mask[query * n_classes + kind.background()] = w.background,
        }
    }
    let class = out
        .logits
        .log_softmax(1)?
        .mul(&Tensor::new(&[q, n_classes], mask)?)?
        .sum()?
        .scale(-1.0 / q as f64)?;
    let mut total = class.clone();
    let mut terms = LayerLoss {
        class_term: class.item()?,
        ..LayerLoss::default()
    };

    if !targets.is_empty() {
        let n = targets.len();
        let nc = kind.n_coords();
        let matched = out.coords.gather(&matching.assignment)?;
        let goal = Tensor::new(&[n, nc], targets.iter().flat_map(|t| t.coords.iter().copied()).collect())?;
        let coord = matched.sub(&goal)?.abs()?.sum()?.scale(1.0 / n as f64)?;
        terms.coord_term = coord.item()?;
        total = total.add(&coord.scale(w.coord)?)?;
        if kind == HeadKind::Person && w.giou != 0.0 {
            let giou = giou_loss(&matched, &goal)?;
            terms.giou_term = giou.item()?;
            total = total.add(&giou.scale(w.giou)?)?;
        }
    }
    terms.total = total.item()?;
    Ok((total, terms))
}

/// Mean `1 − GIoU` between rows of predicted and target `(cx, cy, w, h)` boxes.
pub fn giou_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor, TensorError> {
    let n = pred.shape()[0];
    #[rustfmt::skip]
    let to_edges = Tensor::new(&[4, 4], vec![
        1.0, 1.0, 0.0, 0.0,
        0.0, 0.0, 1.0, 1.0,
        -0.5, 0.5, 0.0, 0.0,
        0.0, 0.0, -0.5, 0.5,
    ])?;
    let p = pred.matmul(&to_edges)?;
    let t = target.matmul(&to_edges)?;
    let col = |x: &Tensor, i: usize| x.slice(1, i, i + 1);
    let (pl, pr, pt, pd) = (col(&p, 0)?, col(&p, 1)?, col(&p, 2)?, col(&p, 3)?);
    let (tl, tr, tt, td) = (col(&t, 0)?, col(&t, 1)?, col(&t, 2)?, col(&t, 3)?);
    let iw = pr.minimum(&tr)?.sub(&pl.maximum(&tl)?)?.relu()?;
    let ih = pd.minimum(&td)?.sub(&pt.maximum(&tt)?)?.relu()?;
    let inter = iw.mul(&ih)?;
    let area_p = pr.sub(&pl)?.mul(&pd.sub(&pt)?)?;
    let area_t = tr.sub(&tl)?.mul(&td.sub(&tt)?)?;
    let union = area_p.add(&area_t)?.sub(&inter)?;
    let ew = pr.maximum(&tr)?.sub(&pl.minimum(&tl)?)?;
    let eh = pd.maximum(&td)?.sub(&pt.minimum(&tt)?)?;
    let enclosing = ew.mul(&eh)?;
    let giou = inter
        .div(&union)?
        .sub(&enclosing.sub(&union)?.div(&enclosing)?)?;
    giou.neg()?.add_scalar(1.0)?.sum()?.scale(1.0 / n as f64)
}

/// Chooses the matching for one layer's predictions.
pub fn match_targets(targets: &[Target], out: &HeadOutput, strategy: MatchStrategy) -> Result<Matching, TensorError> {
    let q = out.logits.shape()[0];
    let wrap = |e: matcher::MatchError| contract(e.to_string());
    match strategy {
        MatchStrategy::ClassSpecific => {
            let assignment: Vec<usize> = targets.iter().map(|t| t.class).collect();
            if assignment.iter().any(|&c| c >= q) {
                return Err(contract(format!(
                    "class-specific matching needs a query per class, have {q}"
                )));
            }
            Ok(Matching {
                assignment,
                total_cost: 0.0,
            })
        }
        MatchStrategy::Hungarian | MatchStrategy::Boxes(_) => {
            let probs: Vec<Vec<f64>> = rows(&out.logits)
                .iter()
                .map(|l| matcher::class_probabilities(l, false))
                .collect();
            let coords = rows(&out.coords);
            let cost = match strategy {
                MatchStrategy::Boxes(bw) => matcher::cost_train_boxes(targets, &probs, &coords, bw),
                _ => matcher::cost_train(targets, &probs, &coords),
            }
            .map_err(wrap)?;
            matcher::hungarian_solve(&cost).map_err(wrap)
        }
    }
}

/// Deep supervision: the set loss on every decoder layer, averaged uniformly.
pub fn deep_supervision_loss(targets: &[Target], pred: &SetPrediction, kind: HeadKind, strategy: MatchStrategy, w: &LossWeights) -> Result<(Tensor, LossBreakdown), TensorError> {
    if pred.layers.is_empty() {
        return Err(contract("no decoder layers to supervise".into()));
    }
    let scale = 1.0 / pred.layers.len() as f64;
    let mut total: Option<Tensor> = None;
    let mut breakdown = LossBreakdown::default();
    for out in &pred.layers {
        let matching = match_targets(targets, out, strategy)?;
        let (loss, terms) = set_loss(targets, out, &matching, kind, w)?;
        let loss = loss.scale(scale)?;
        total = Some(match total {
            Some(t) => t.add(&loss)?,
            None => loss,
        });
        breakdown.class_term += terms.class_term * scale;
        breakdown.coord_term += terms.coord_term * scale;
        breakdown.giou_term += terms.giou_term * scale;
        breakdown.layers.push(terms);
    }
    let total = total.expect("at least one layer");
    breakdown.total = total.item()?;
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;

    const KP: HeadKind = HeadKind::Keypoint { joints: 2 };
    const BIG: f64 = 1e3;

    fn out(logits: Vec<f64>, coords: Vec<f64>, q: usize, k: usize, nc: usize) -> HeadOutput {
        HeadOutput {
            logits: Tensor::new(&[q, k], logits).unwrap(),
            coords: Tensor::new(&[q, nc], coords).unwrap(),
        }
    }

    fn target(class: usize, x: f64, y: f64) -> Target {
        Target {
            class,
            coords: vec![x, y],
        }
    }

    #[test]
    fn perfect_prediction_is_zero() {
        // query 0 -> class 1, query 1 -> background
        let o = out(vec![-BIG, 0.0, -BIG, -BIG, -BIG, 0.0], vec![0.3, 0.4, 0.9, 0.9], 2, 3, 2);
        let m = Matching {
            assignment: vec![0],
            total_cost: 0.0,
        };
        let (_, terms) = set_loss(&[target(1, 0.3, 0.4)], &o, &m, KP, &LossWeights::keypoint()).unwrap();
        assert!(terms.total.abs() < 1e-9);
    }

    #[test]
    fn half_probability_matched_is_ln2() {
        let o = out(vec![0.0, 0.0, -BIG], vec![0.5, 0.5], 1, 3, 2);
        let m = Matching {
            assignment: vec![0],
            total_cost: 0.0,
        };
        let (_, terms) = set_loss(&[target(0, 0.5, 0.5)], &o, &m, KP, &LossWeights::keypoint()).unwrap();
        assert!((terms.class_term - std::f64::consts::LN_2).abs() < 1e-9);
        assert_eq!(terms.coord_term, 0.0);
    }

    #[test]
    fn half_probability_unmatched_is_tenth_ln2() {
        let o = out(vec![0.0, -BIG, 0.0], vec![0.5, 0.5], 1, 3, 2);
        let m = Matching {
            assignment: vec![],
            total_cost: 0.0,
        };
        let (_, terms) = set_loss(&[], &o, &m, KP, &LossWeights::keypoint()).unwrap();
        assert!((terms.total - 0.1 * std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn non_injective_matching_rejected() {
        let o = out(vec![0.0; 6], vec![0.5; 4], 2, 3, 2);
        let m = Matching {
            assignment: vec![1, 1],
            total_cost: 0.0,
        };
        let t = [target(0, 0.1, 0.1), target(1, 0.2, 0.2)];
        assert!(set_loss(&t, &o, &m, KP, &LossWeights::keypoint()).is_err());
    }

    #[test]
    fn perfect_box_has_zero_giou_loss() {
        let b = Tensor::new(&[2, 4], vec![0.5, 0.5, 0.2, 0.4, 0.3, 0.6, 0.1, 0.1]).unwrap();
        assert!(giou_loss(&b, &b).unwrap().item().unwrap().abs() < 1e-12);
    }

    #[test]
    fn giou_loss_matches_geometry() {
        use crate::geometry::BoundingBox;
        let p = [0.4, 0.5, 0.3, 0.2];
        let t = [0.55, 0.45, 0.2, 0.3];
        let expect = 1.0 - BoundingBox::from_cxcywh(p[0], p[1], p[2], p[3]).giou(&BoundingBox::from_cxcywh(t[0], t[1], t[2], t[3]));
        let got = giou_loss(&Tensor::new(&[1, 4], p.to_vec()).unwrap(), &Tensor::new(&[1, 4], t.to_vec()).unwrap())
            .unwrap()
            .item()
            .unwrap();
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn deep_supervision_averages_layers() {
        let perfect = out(vec![-BIG, 0.0, -BIG], vec![0.3, 0.4], 1, 3, 2);
        let half = out(vec![0.0, 0.0, -BIG], vec![0.3, 0.4], 1, 3, 2);
        let pred = SetPrediction {
            initial: perfect.clone(),
            layers: vec![perfect, half],
        };
        let (_, b) = deep_supervision_loss(&[target(1, 0.3, 0.4)], &pred, KP, MatchStrategy::Hungarian, &LossWeights::keypoint()).unwrap();
        assert!((b.total - std::f64::consts::LN_2 / 2.0).abs() < 1e-9);
        assert_eq!(b.layers.len(), 2);
        let weighted = b.class_term + b.coord_term;
        assert!((b.total - weighted).abs() < 1e-9);
    }
}
