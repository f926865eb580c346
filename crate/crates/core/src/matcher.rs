//! Optimal bipartite matching between ground-truth items and query predictions.
//!
//! Rows of a [`CostMatrix`] are targets, columns are queries, and a
//! [`Matching`] is an injective row -> column map minimizing the summed cost.
//! Two cost builders exist: [`cost_train`] mixes the negated class probability
//! with the L1 coordinate deviation, [`cost_infer`] uses only the negated class
//! probability of each prototype label. The solver pads the matrix with
//! zero-cost virtual rows to make it square and runs the shortest augmenting
//! path Hungarian method; [`brute_force_match`] enumerates every injection and
//! serves as the test oracle.

use crate::geometry::BoundingBox;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MatchError {
    #[error("cost matrix has a non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("{targets} targets cannot be matched injectively into {queries} queries")]
    TooManyTargets { targets: usize, queries: usize },
    #[error("brute force refuses {targets} targets × {queries} queries")]
    TooLarge { targets: usize, queries: usize },
    #[error("contract violation: {0}")]
    Contract(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostMode {
    Train,
    Infer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    pub mode: CostMode,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>, mode: CostMode) -> Result<CostMatrix, MatchError> {
        if values.len() != rows * cols {
            return Err(MatchError::Contract(format!(
                "{rows}×{cols} matrix given {} values",
                values.len()
            )));
        }
        if rows > cols {
            return Err(MatchError::TooManyTargets {
                targets: rows,
                queries: cols,
            });
        }
        Ok(CostMatrix {
            rows,
            cols,
            values,
            mode,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], mode: CostMode) -> Result<CostMatrix, MatchError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(MatchError::Contract("ragged cost rows".into()));
        }
        CostMatrix::new(rows.len(), cols, rows.concat(), mode)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Sum of the selected entries, accumulated in row order.
    pub fn cost_of(&self, assignment: &[usize]) -> f64 {
        assignment
            .iter()
            .enumerate()
            .map(|(r, &c)| self.get(r, c))
            .sum()
    }

    fn check_finite(&self) -> Result<(), MatchError> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(MatchError::NonFinite {
                row: i / self.cols,
                col: i % self.cols,
            }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    /// `assignment[i]` is the query matched to target `i`; pairwise distinct.
    pub assignment: Vec<usize>,
    pub total_cost: f64,
}

impl Matching {
    pub fn is_injective(&self) -> bool {
        let mut seen = std::collections::HashSet::new();
        self.assignment.iter().all(|q| seen.insert(*q))
    }

    /// Inverse map: for each of `n_queries` queries, the target it serves.
    pub fn query_targets(&self, n_queries: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n_queries];
        for (t, &q) in self.assignment.iter().enumerate() {
            out[q] = Some(t);
        }
        out
    }
}

/// A ground-truth item: class label plus coordinates in the prediction frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub class: usize,
    pub coords: Vec<f64>,
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Training cost: entry `(i, q) = -p̂_q(c_i) + ‖b_i - b̂_q‖₁`.
pub fn cost_train(targets: &[Target], probs: &[Vec<f64>], coords: &[Vec<f64>]) -> Result<CostMatrix, MatchError> {
    if probs.len() != coords.len() {
        return Err(MatchError::Contract(format!(
            "{} probability rows but {} coordinate rows",
            probs.len(),
            coords.len()
        )));
    }
    let mut values = Vec::with_capacity(targets.len() * probs.len());
    for t in targets {
        for (p, b) in probs.iter().zip(coords) {
            if t.class >= p.len() || t.coords.len() != b.len() {
                return Err(MatchError::Contract(format!(
                    "target class {} / {} coords against {} classes / {} coords",
                    t.class,
                    t.coords.len(),
                    p.len(),
                    b.len()
                )));
            }
            values.push(-p[t.class] + l1(&t.coords, b));
        }
    }
    CostMatrix::new(targets.len(), probs.len(), values, CostMode::Train)
}

/// Weights of the person-stage matching cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxCostWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for BoxCostWeights {
    fn default() -> Self {
        BoxCostWeights {
            class: 1.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

/// Person matching: weighted class and L1 terms on `(cx, cy, w, h)` plus a
/// negated generalized-IoU term.
pub fn cost_train_boxes(targets: &[Target], probs: &[Vec<f64>], boxes: &[Vec<f64>], w: BoxCostWeights) -> Result<CostMatrix, MatchError> {
    let base = cost_train(targets, probs, boxes)?;
    let mut values = Vec::with_capacity(base.values.len());
    for (i, t) in targets.iter().enumerate() {
        let tb = cxcywh(&t.coords);
        for (q, b) in boxes.iter().enumerate() {
            let class_term = -probs[q][t.class];
            let l1_term = base.get(i, q) - class_term;
            let giou = tb.giou(&cxcywh(b));
            values.push(w.class * class_term + w.l1 * l1_term - w.giou * giou);
        }
    }
    CostMatrix::new(targets.len(), boxes.len(), values, CostMode::Train)
}

fn cxcywh(v: &[f64]) -> BoundingBox {
    BoundingBox::from_cxcywh(v[0], v[1], v[2], v[3])
}

/// Inference cost: entry `(j, q) = -p̂_q(c_j)` for each prototype label `c_j`.
pub fn cost_infer(classes: &[usize], probs: &[Vec<f64>]) -> Result<CostMatrix, MatchError> {
    let mut values = Vec::with_capacity(classes.len() * probs.len());
    for &c in classes {
        for p in probs {
            let v = *p.get(c).ok_or_else(|| {
                MatchError::Contract(format!("class {c} outside {} probabilities", p.len()))
            })?;
            values.push(-v);
        }
    }
    CostMatrix::new(classes.len(), probs.len(), values, CostMode::Infer)
}

/// Class probabilities of one query from its logits.
///
/// With `exclude_background`, the background logit (last) is dropped before
/// normalizing, so the returned vector has one entry fewer.
pub fn class_probabilities(logits: &[f64], exclude_background: bool) -> Vec<f64> {
    let used = if exclude_background {
        &logits[..logits.len() - 1]
    } else {
        logits
    };
    let max = used.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = used.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Optimal assignment by the Hungarian method on a zero-padded square matrix.
///
/// Ties are broken deterministically: when several columns reach the same
/// reduced cost during an augmentation, the lowest column index is taken.
pub fn hungarian_solve(cost: &CostMatrix) -> Result<Matching, MatchError> {
    cost.check_finite()?;
    let n = cost.cols;
    let real = cost.rows;
    if real == 0 {
        return Ok(Matching {
            assignment: Vec::new(),
            total_cost: 0.0,
        });
    }
    let at = |i: usize, j: usize| if i < real { cost.get(i, j) } else { 0.0 };

    // 1-based potentials; column 0 is the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of_col[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; real];
    for j in 1..=n {
        let i = row_of_col[j];
        if i >= 1 && i <= real {
            assignment[i - 1] = j - 1;
        }
    }
    let total_cost = cost.cost_of(&assignment);
    Ok(Matching {
        assignment,
        total_cost,
    })
}

pub const BRUTE_FORCE_MAX_TARGETS: usize = 7;
pub const BRUTE_FORCE_MAX_QUERIES: usize = 12;

/// Exhaustive search over all injections; the first optimum in lexicographic
/// order of assignments wins ties.
pub fn brute_force_match(cost: &CostMatrix) -> Result<Matching, MatchError> {
    cost.check_finite()?;
    if cost.rows > BRUTE_FORCE_MAX_TARGETS || cost.cols > BRUTE_FORCE_MAX_QUERIES {
        return Err(MatchError::TooLarge {
            targets: cost.rows,
            queries: cost.cols,
        });
    }
    let mut best: Option<Matching> = None;
    let mut current = Vec::with_capacity(cost.rows);
    let mut used = vec![false; cost.cols];
    fn recurse(cost: &CostMatrix, current: &mut Vec<usize>, used: &mut [bool], best: &mut Option<Matching>) {
        if current.len() == cost.rows {
            let total = cost.cost_of(current);
            if best.as_ref().map_or(true, |b| total < b.total_cost) {
                *best = Some(Matching {
                    assignment: current.clone(),
                    total_cost: total,
                });
            }
            return;
        }
        for c in 0..cost.cols {
            if used[c] {
                continue;
            }
            used[c] = true;
            current.push(c);
            recurse(cost, current, used, best);
            current.pop();
            used[c] = false;
        }
    }
    recurse(cost, &mut current, &mut used, &mut best);
    Ok(best.unwrap_or(Matching {
        assignment: Vec::new(),
        total_cost: 0.0,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[Vec<f64>]) -> CostMatrix {
        CostMatrix::from_rows(rows, CostMode::Train).unwrap()
    }

    #[test]
    fn exact_prediction_costs_minus_one() {
        let t = [Target {
            class: 1,
            coords: vec![0.2, 0.7],
        }];
        let c = cost_train(&t, &[vec![0.0, 1.0, 0.0]], &[vec![0.2, 0.7]]).unwrap();
        assert_eq!(c.get(0, 0), -1.0);
    }

    #[test]
    fn worked_training_cost() {
        // p = 0.8 and an L1 deviation of 0.1 + 0.2
        let t = [Target {
            class: 0,
            coords: vec![0.5, 0.5],
        }];
        let c = cost_train(&t, &[vec![0.8, 0.2]], &[vec![0.6, 0.3]]).unwrap();
        assert!((c.get(0, 0) - (-0.5)).abs() < 1e-15);
    }

    #[test]
    fn one_hot_bijection_costs_minus_j() {
        // query q is one-hot on class (q + 1) % 3
        let probs: Vec<Vec<f64>> = (0..3)
            .map(|q| {
                let mut p = vec![0.0; 4];
                p[(q + 1) % 3] = 1.0;
                p
            })
            .collect();
        let c = cost_infer(&[0, 1, 2], &probs).unwrap();
        let s = hungarian_solve(&c).unwrap();
        assert_eq!(s.assignment, vec![2, 0, 1]);
        assert_eq!(s.total_cost, -3.0);
    }

    #[test]
    fn uniform_probabilities_tie_deterministically() {
        let probs = vec![vec![0.25; 4]; 5];
        let c = cost_infer(&[0, 1, 2], &probs).unwrap();
        let a = hungarian_solve(&c).unwrap();
        let b = hungarian_solve(&c).unwrap();
        assert_eq!(a, b);
        assert!(a.is_injective());
        assert_eq!(a.total_cost, -0.75);
    }

    #[test]
    fn zero_diagonal_is_identity() {
        let c = m(&[
            vec![0.0, 1.0, 2.0],
            vec![3.0, 0.0, 1.0],
            vec![2.0, 5.0, 0.0],
        ]);
        assert_eq!(hungarian_solve(&c).unwrap().assignment, vec![0, 1, 2]);
    }

    #[test]
    fn two_by_two() {
        let s = hungarian_solve(&m(&[vec![1.0, 2.0], vec![2.0, 1.0]])).unwrap();
        assert_eq!(s.assignment, vec![0, 1]);
        assert_eq!(s.total_cost, 2.0);
    }

    #[test]
    fn rectangular_picks_best_columns() {
        let c = m(&[vec![5.0, 1.0, 3.0, 0.5], vec![0.2, 4.0, 3.0, 0.1]]);
        let s = hungarian_solve(&c).unwrap();
        assert_eq!(s.assignment, vec![3, 0]);
        assert_eq!(s, brute_force_match(&c).unwrap());
    }

    #[test]
    fn non_finite_is_rejected() {
        let c = m(&[vec![1.0, f64::NAN]]);
        assert_eq!(
            hungarian_solve(&c).unwrap_err(),
            MatchError::NonFinite { row: 0, col: 1 }
        );
    }

    #[test]
    fn too_many_targets() {
        assert!(CostMatrix::from_rows(&[vec![1.0], vec![2.0]], CostMode::Infer).is_err());
    }

    #[test]
    fn brute_force_guard_and_singleton() {
        assert_eq!(brute_force_match(&m(&[vec![0.7]])).unwrap().total_cost, 0.7);
        let big = CostMatrix::new(8, 8, vec![0.0; 64], CostMode::Train).unwrap();
        assert!(matches!(brute_force_match(&big), Err(MatchError::TooLarge { .. })));
    }

    #[test]
    fn background_exclusion_renormalizes() {
        let p = class_probabilities(&[0.0, 0.0, 5.0], true);
        assert_eq!(p, vec![0.5, 0.5]);
        let p = class_probabilities(&[0.0, 0.0, 0.0], false);
        assert!((p[0] - 1.0 / 3.0).abs() < 1e-15);
    }

    fn matrix_strategy() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
        (1usize..=5, 0usize..=2).prop_flat_map(|(r, extra)| {
            let c = r + extra;
            (Just(r), Just(c), prop::collection::vec(-1.0f64..1.0, r * c))
        })
    }

    proptest! {
        #[test]
        fn matches_brute_force((r, c, v) in matrix_strategy()) {
            let cm = CostMatrix::new(r, c, v, CostMode::Train).unwrap();
            let h = hungarian_solve(&cm).unwrap();
            prop_assert!(h.is_injective());
            prop_assert_eq!(h.total_cost, brute_force_match(&cm).unwrap().total_cost);
            prop_assert_eq!(h.total_cost, cm.cost_of(&h.assignment));
        }

        #[test]
        fn row_shift_moves_total_by_shift((r, c, v) in matrix_strategy(), row in 0usize..5, shift in -2.0f64..2.0) {
            let row = row % r;
            let cm = CostMatrix::new(r, c, v.clone(), CostMode::Train).unwrap();
            let mut shifted = v;
            for j in 0..c {
                shifted[row * c + j] += shift;
            }
            let sm = CostMatrix::new(r, c, shifted, CostMode::Train).unwrap();
            let a = hungarian_solve(&cm).unwrap();
            let b = hungarian_solve(&sm).unwrap();
            prop_assert!((b.total_cost - (a.total_cost + shift)).abs() < 1e-12);
            // the original optimum stays optimal in the shifted problem
            prop_assert!((sm.cost_of(&a.assignment) - b.total_cost).abs() < 1e-12);
        }

        #[test]
        fn column_permutation_permutes_assignment((r, c, v) in matrix_strategy(), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut perm: Vec<usize> = (0..c).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            // new column perm[j] holds old column j
            let mut pv = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    pv[i * c + perm[j]] = v[i * c + j];
                }
            }
            let a = hungarian_solve(&CostMatrix::new(r, c, v, CostMode::Train).unwrap()).unwrap();
            let pm = CostMatrix::new(r, c, pv, CostMode::Train).unwrap();
            let b = hungarian_solve(&pm).unwrap();
            prop_assert!((a.total_cost - b.total_cost).abs() < 1e-12);
            let mapped: Vec<usize> = a.assignment.iter().map(|&j| perm[j]).collect();
            prop_assert!((pm.cost_of(&mapped) - b.total_cost).abs() < 1e-12);
        }
    }
}
