//! Training losses and evaluation metrics.
//!
//! Every loss has a plain `f64` evaluation and a tape version used for
//! training. Nearest-neighbor assignments in the tape Chamfer term are
//! recomputed on each call and frozen for that gradient computation.

use std::fmt;

use crate::autodiff::{Array, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{self, FlowField, FlowSequence, NeighborIndexLists, Point, PointSet};
use crate::layers::points_of;

/// Absolute end-point thresholds (scene units).
pub const ACC_STRICT_EPE: f64 = 0.05;
pub const ACC_RELAXED_EPE: f64 = 0.1;
pub const OUTLIER_EPE: f64 = 0.3;
/// Relative error thresholds.
pub const ACC_STRICT_REL: f64 = 0.05;
pub const ACC_RELAXED_REL: f64 = 0.1;
pub const OUTLIER_REL: f64 = 0.1;

/// Per-iteration weights of a sequence loss.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

impl LossWeights {
    pub fn new(alpha: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() || alpha.len() != beta.len() {
            return Err(Error::InvalidArgument(format!(
                "loss weights need equal nonempty lengths (alpha {}, beta {})",
                alpha.len(),
                beta.len()
            )));
        }
        if alpha.iter().chain(&beta).any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument("loss weights must be finite and >= 0".into()));
        }
        Ok(Self { alpha, beta })
    }

    pub fn constant(k: usize, alpha: f64, beta: f64) -> Result<Self> {
        Self::new(vec![alpha; k], vec![beta; k])
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }
}

fn nearest_squared(q: &Point, reference: &[Point]) -> f64 {
    geometry::squared_distance(q, &reference[geometry::nearest(q, reference)])
}

/// Symmetric Chamfer distance, summed squared nearest-neighbor distances.
pub fn chamfer(sk: &PointSet, t: &PointSet) -> f64 {
    chamfer_with(sk, t, false)
}

/// Chamfer distance; with `normalize` each direction is divided by its count.
pub fn chamfer_with(sk: &PointSet, t: &PointSet, normalize: bool) -> f64 {
    let forward: f64 = sk.points().iter().map(|p| nearest_squared(p, t.points())).sum();
    let backward: f64 = t.points().iter().map(|q| nearest_squared(q, sk.points())).sum();
    if normalize {
        forward / sk.len() as f64 + backward / t.len() as f64
    } else {
        forward + backward
    }
}

/// Laplacian regularization value and the number of points with an empty
/// neighborhood (those contribute 0).
pub fn laplacian_reg_with_diagnostics(
    s: &PointSet,
    f: &FlowField,
    n: &NeighborIndexLists,
) -> Result<(f64, usize)> {
    check_count("laplacian flow", s.len(), f.len())?;
    check_count("laplacian neighborhoods", s.len(), n.len())?;
    let flows = f.vectors();
    let mut total = 0.0;
    let mut empty = 0;
    for (i, list) in n.lists().iter().enumerate() {
        if list.is_empty() {
            empty += 1;
            continue;
        }
        let mut acc = 0.0;
        for &j in list {
            let fj = flows.get(j).ok_or_else(|| {
                Error::InvalidArgument(format!("neighbor index {j} out of range for {} points", flows.len()))
            })?;
            acc += l1_distance(&flows[i], fj);
        }
        total += acc / list.len() as f64;
    }
    Ok((total / s.len() as f64, empty))
}

pub fn laplacian_reg(s: &PointSet, f: &FlowField, n: &NeighborIndexLists) -> Result<f64> {
    Ok(laplacian_reg_with_diagnostics(s, f, n)?.0)
}

fn l1_distance(a: &Point, b: &Point) -> f64 {
    (a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs()
}

/// Mean per-point L1 norm of the residual.
pub fn l1_loss(f: &FlowField, gt: &FlowField) -> Result<f64> {
    check_count("l1 loss", gt.len(), f.len())?;
    let total: f64 = f.vectors().iter().zip(gt.vectors()).map(|(a, b)| l1_distance(a, b)).sum();
    Ok(total / f.len() as f64)
}

fn check_count(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::CountMismatch { what, expected, found });
    }
    Ok(())
}

fn check_weights(weights: &LossWeights, seq: &FlowSequence) -> Result<()> {
    check_count("loss weights", seq.len(), weights.len())
}

/// `Σ_k α_k chamfer(S + F_k, T) + β_k laplacian(S, F_k)`.
pub fn self_supervised_sequence_loss(
    s: &PointSet,
    t: &PointSet,
    seq: &FlowSequence,
    weights: &LossWeights,
    n: &NeighborIndexLists,
) -> Result<f64> {
    check_weights(weights, seq)?;
    let mut total = 0.0;
    for (k, f) in seq.flows().iter().enumerate() {
        let (a, b) = (weights.alpha[k], weights.beta[k]);
        if a != 0.0 {
            total += a * chamfer(&geometry::warp(s, f)?, t);
        }
        if b != 0.0 {
            total += b * laplacian_reg(s, f, n)?;
        }
    }
    Ok(total)
}

/// `Σ_k α_k l1(F_k, F_gt) + β_k laplacian(S, F_k)`.
pub fn supervised_sequence_loss(
    s: &PointSet,
    seq: &FlowSequence,
    gt: &FlowField,
    weights: &LossWeights,
    n: &NeighborIndexLists,
) -> Result<f64> {
    check_weights(weights, seq)?;
    let mut total = 0.0;
    for (k, f) in seq.flows().iter().enumerate() {
        let (a, b) = (weights.alpha[k], weights.beta[k]);
        if a != 0.0 {
            total += a * l1_loss(f, gt)?;
        }
        if b != 0.0 {
            total += b * laplacian_reg(s, f, n)?;
        }
    }
    Ok(total)
}

/// Dataset or scene metrics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRecord {
    pub epe3d: f64,
    pub acc3ds: f64,
    pub acc3dr: f64,
    pub outliers3d: f64,
}

impl fmt::Display for MetricsRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:.6},{:.6},{:.6},{:.6}",
            self.epe3d, self.acc3ds, self.acc3dr, self.outliers3d
        )
    }
}

/// Per-point classification against the metric thresholds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PointVerdict {
    pub strict: bool,
    pub relaxed: bool,
    pub outlier: bool,
}

pub fn classify(epe: f64, gt_norm: f64) -> PointVerdict {
    if gt_norm > 0.0 {
        let rel = epe / gt_norm;
        PointVerdict {
            strict: epe < ACC_STRICT_EPE || rel < ACC_STRICT_REL,
            relaxed: epe < ACC_RELAXED_EPE || rel < ACC_RELAXED_REL,
            outlier: epe > OUTLIER_EPE || rel > OUTLIER_REL,
        }
    } else {
        PointVerdict {
            strict: epe < ACC_STRICT_EPE,
            relaxed: epe < ACC_RELAXED_EPE,
            outlier: epe > OUTLIER_EPE,
        }
    }
}

/// Point-weighted running sums of the metrics.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricsAccumulator {
    points: usize,
    epe_sum: f64,
    strict: usize,
    relaxed: usize,
    outliers: usize,
}

impl MetricsAccumulator {
    pub fn add(&mut self, pred: &FlowField, gt: &FlowField) -> Result<()> {
        check_count("evaluation flow", gt.len(), pred.len())?;
        for (p, g) in pred.vectors().iter().zip(gt.vectors()) {
            let epe = geometry::distance(p, g);
            let v = classify(epe, geometry::distance(g, &[0.0; 3]));
            self.points += 1;
            self.epe_sum += epe;
            self.strict += v.strict as usize;
            self.relaxed += v.relaxed as usize;
            self.outliers += v.outlier as usize;
        }
        Ok(())
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn record(&self) -> Result<MetricsRecord> {
        if self.points == 0 {
            return Err(Error::InvalidArgument("no points were evaluated".into()));
        }
        let n = self.points as f64;
        Ok(MetricsRecord {
            epe3d: self.epe_sum / n,
            acc3ds: self.strict as f64 / n,
            acc3dr: self.relaxed as f64 / n,
            outliers3d: self.outliers as f64 / n,
        })
    }
}

pub fn evaluate(pred: &FlowField, gt: &FlowField) -> Result<MetricsRecord> {
    let mut acc = MetricsAccumulator::default();
    acc.add(pred, gt)?;
    acc.record()
}

/// Chamfer distance between on-tape positions `sk` (`n x 3`) and a fixed
/// target.
pub fn tape_chamfer(tape: &Tape, sk: Var, t: &PointSet, normalize: bool) -> Result<Var> {
    let src = points_of(&tape.value(sk));
    if src.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    let tgt = t.points();
    let (to_target, to_source) = tape.select(|| {
        let a: Vec<usize> = src.iter().map(|p| geometry::nearest(p, tgt)).collect();
        let b: Vec<usize> = tgt.iter().map(|q| geometry::nearest(q, &src)).collect();
        (a, b)
    })?;
    let matched: Vec<f64> = to_target.iter().flat_map(|&j| tgt[j]).collect();
    let matched = tape.constant(Array::matrix(src.len(), 3, matched)?);
    let forward = tape.sum(tape.square(tape.sub(sk, matched)?)?)?;
    let t_var = tape.constant(Array::matrix(t.len(), 3, t.flat())?);
    let back = tape.sub(t_var, tape.gather(sk, &to_source)?)?;
    let backward = tape.sum(tape.square(back)?)?;
    if normalize {
        let f = tape.affine(forward, 1.0 / src.len() as f64, 0.0)?;
        let b = tape.affine(backward, 1.0 / t.len() as f64, 0.0)?;
        tape.add(f, b)
    } else {
        tape.add(forward, backward)
    }
}

/// Laplacian regularization of an on-tape flow (`n x 3`).
pub fn tape_laplacian(tape: &Tape, f: Var, n: &NeighborIndexLists) -> Result<Var> {
    let rows = tape.value(f).rows();
    check_count("laplacian neighborhoods", rows, n.len())?;
    let mut left = Vec::new();
    let mut right = Vec::new();
    let mut weight = Vec::new();
    for (i, list) in n.lists().iter().enumerate() {
        for &j in list {
            if j >= rows {
                return Err(Error::InvalidArgument(format!(
                    "neighbor index {j} out of range for {rows} points"
                )));
            }
            left.push(i);
            right.push(j);
            weight.push(1.0 / (rows as f64 * list.len() as f64));
        }
    }
    if left.is_empty() {
        return Ok(tape.constant(Array::scalar(0.0)));
    }
    let diff = tape.sub(tape.gather(f, &left)?, tape.gather(f, &right)?)?;
    let per_pair = tape.row_sum(tape.abs(diff)?)?;
    let w = tape.constant(Array::column(weight));
    tape.sum(tape.scale_rows(per_pair, w)?)
}

/// Mean per-point L1 residual of an on-tape flow against a fixed one.
pub fn tape_l1(tape: &Tape, f: Var, gt: &FlowField) -> Result<Var> {
    let rows = tape.value(f).rows();
    check_count("l1 loss", gt.len(), rows)?;
    let g = tape.constant(Array::matrix(gt.len(), 3, gt.flat())?);
    let total = tape.sum(tape.abs(tape.sub(f, g)?)?)?;
    tape.affine(total, 1.0 / rows as f64, 0.0)
}

/// Data term of a sequence loss.
#[derive(Clone, Copy, Debug)]
pub enum DataTerm<'a> {
    /// Chamfer distance to the target, optionally count-normalized.
    Chamfer { target: &'a PointSet, normalize: bool },
    /// L1 distance to ground-truth flow.
    L1 { gt: &'a FlowField },
}

/// Tape version of the sequence losses over flows `F_1..F_K`.
pub fn tape_sequence_loss(
    tape: &Tape,
    s: &PointSet,
    flows: &[Var],
    data: DataTerm<'_>,
    weights: &LossWeights,
    n: &NeighborIndexLists,
) -> Result<Var> {
    check_count("loss weights", flows.len(), weights.len())?;
    let s_var = tape.constant(Array::matrix(s.len(), 3, s.flat())?);
    let mut total: Option<Var> = None;
    let mut push = |term: Var, w: f64| -> Result<()> {
        let scaled = tape.affine(term, w, 0.0)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, scaled)?,
            None => scaled,
        });
        Ok(())
    };
    for (k, &f) in flows.iter().enumerate() {
        let (a, b) = (weights.alpha[k], weights.beta[k]);
        if a != 0.0 {
            let term = match data {
                DataTerm::Chamfer { target, normalize } => {
                    tape_chamfer(tape, tape.add(s_var, f)?, target, normalize)?
                }
                DataTerm::L1 { gt } => tape_l1(tape, f, gt)?,
            };
            push(term, a)?;
        }
        if b != 0.0 {
            push(tape_laplacian(tape, f, n)?, b)?;
        }
    }
    Ok(total.unwrap_or_else(|| tape.constant(Array::scalar(0.0))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference_check, Coordinates};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pts(v: &[[f64; 3]]) -> PointSet {
        PointSet::new(v.to_vec()).unwrap()
    }

    fn flow(v: &[[f64; 3]]) -> FlowField {
        FlowField::new(v.to_vec()).unwrap()
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
        (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect()
    }

    #[test]
    fn chamfer_examples() {
        let a = pts(&[[0.0, 0.0, 0.0]]);
        assert_eq!(chamfer(&a, &a), 0.0);
        assert!((chamfer(&a, &pts(&[[1.0, 0.0, 0.0]])) - 2.0).abs() < 1e-12);
        assert!((chamfer(&a, &pts(&[[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])) - 3.0).abs() < 1e-12);
        let norm = chamfer_with(&a, &pts(&[[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]), true);
        assert!((norm - 2.0).abs() < 1e-12);
    }

    #[test]
    fn laplacian_examples() {
        let s = pts(&[[0.0; 3], [0.1, 0.0, 0.0]]);
        let n = NeighborIndexLists::new(vec![vec![1], vec![0]]);
        let f = flow(&[[0.0; 3], [1.0, 0.0, 0.0]]);
        assert!((laplacian_reg(&s, &f, &n).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(laplacian_reg(&s, &flow(&[[0.3, 0.1, 0.2]; 2]), &n).unwrap(), 0.0);
        let lone = NeighborIndexLists::new(vec![vec![1], vec![]]);
        let (v, empty) = laplacian_reg_with_diagnostics(&s, &f, &lone).unwrap();
        assert_eq!(empty, 1);
        assert!((v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn l1_examples() {
        let f = flow(&[[0.3, 0.0, -0.4]]);
        assert!((l1_loss(&f, &FlowField::zeros(1)).unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(l1_loss(&f, &f).unwrap(), 0.0);
        assert!(l1_loss(&f, &FlowField::zeros(2)).is_err());
    }

    #[test]
    fn sequence_losses() {
        let s = pts(&[[0.0; 3], [0.2, 0.0, 0.0]]);
        let t_shift = [0.1, -0.2, 0.05];
        let t = pts(&[t_shift, [0.3, -0.2, 0.05]]);
        let n = NeighborIndexLists::new(vec![vec![1], vec![0]]);
        let aligned = FlowSequence::new(vec![flow(&[t_shift; 2]); 3]).unwrap();
        let w = LossWeights::constant(3, 1.0, 1.0).unwrap();
        assert!(self_supervised_sequence_loss(&s, &t, &aligned, &w, &n).unwrap() < 1e-24);

        let gt = flow(&[[0.0; 3], [1.0, 0.0, 0.0]]);
        let exact = FlowSequence::new(vec![gt.clone()]).unwrap();
        let plain = LossWeights::constant(1, 1.0, 0.0).unwrap();
        let reg = LossWeights::constant(1, 1.0, 0.5).unwrap();
        let a = supervised_sequence_loss(&s, &exact, &gt, &plain, &n).unwrap();
        let b = supervised_sequence_loss(&s, &exact, &gt, &reg, &n).unwrap();
        assert_eq!(a, 0.0);
        assert!(b > a);
        assert!(supervised_sequence_loss(&s, &exact, &gt, &w, &n).is_err());
    }

    #[test]
    fn metric_examples() {
        let gt = flow(&[[1.0, 0.0, 0.0]]);
        let m = evaluate(&gt, &gt).unwrap();
        assert_eq!((m.epe3d, m.acc3ds, m.acc3dr, m.outliers3d), (0.0, 1.0, 1.0, 0.0));
        let m = evaluate(&flow(&[[1.04, 0.0, 0.0]]), &gt).unwrap();
        assert_eq!(m.acc3ds, 1.0);
        let m = evaluate(&flow(&[[1.2, 0.0, 0.0]]), &gt).unwrap();
        assert_eq!(m.outliers3d, 1.0);
        assert_eq!(m.to_string(), "0.200000,0.000000,0.000000,1.000000");
        // Zero ground truth: only the absolute criteria apply.
        let m = evaluate(&flow(&[[0.2, 0.0, 0.0]]), &FlowField::zeros(1)).unwrap();
        assert_eq!((m.acc3ds, m.acc3dr, m.outliers3d), (0.0, 0.0, 0.0));
    }

    #[test]
    fn tape_losses_match_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = pts(&random_cloud(&mut rng, 12));
        let t = pts(&random_cloud(&mut rng, 9));
        let f = flow(&random_cloud(&mut rng, 12));
        let gt = flow(&random_cloud(&mut rng, 12));
        let n = geometry::regularization_neighborhood(&s, 3, 2, 0.5, 1).unwrap();
        let tape = Tape::new();
        let fv = tape.constant(Array::matrix(12, 3, f.flat()).unwrap());
        let sv = tape.constant(Array::matrix(12, 3, s.flat()).unwrap());
        let warped = geometry::warp(&s, &f).unwrap();
        let c = tape.scalar(tape_chamfer(&tape, tape.add(sv, fv).unwrap(), &t, false).unwrap());
        assert!((c - chamfer(&warped, &t)).abs() < 1e-12);
        let l = tape.scalar(tape_laplacian(&tape, fv, &n).unwrap());
        assert!((l - laplacian_reg(&s, &f, &n).unwrap()).abs() < 1e-12);
        let l1 = tape.scalar(tape_l1(&tape, fv, &gt).unwrap());
        assert!((l1 - l1_loss(&f, &gt).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn loss_gradients_pass_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = pts(&random_cloud(&mut rng, 10));
        let t = pts(&random_cloud(&mut rng, 8));
        let gt = flow(&random_cloud(&mut rng, 10));
        let n = geometry::regularization_neighborhood(&s, 3, 2, 0.5, 2).unwrap();
        let f0 = Array::matrix(10, 3, (0..30).map(|_| rng.gen_range(-0.3..0.3)).collect()).unwrap();
        let w = LossWeights::new(vec![1.0, 0.5], vec![0.7, 2.0]).unwrap();
        for data in [DataTerm::Chamfer { target: &t, normalize: false }, DataTerm::L1 { gt: &gt }] {
            let f = |tape: &Tape, p: &[Var]| {
                let second = tape.affine(p[0], 1.5, 0.01)?;
                tape_sequence_loss(tape, &s, &[p[0], second], data, &w, &n)
            };
            let r = finite_difference_check(f, &[f0.clone()], 1e-5, 1e-4, Coordinates::All).unwrap();
            assert!(r.passed, "{r}");
        }
    }

    proptest! {
        #[test]
        fn strict_accuracy_implies_relaxed(
            pred in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..20),
            noise in prop::collection::vec(prop::array::uniform3(-0.2f64..0.2), 20),
        ) {
            let gt: Vec<[f64; 3]> = pred.iter().zip(&noise).map(|(p, e)| [p[0] + e[0], p[1] + e[1], p[2] + e[2]]).collect();
            let m = evaluate(&flow(&pred), &flow(&gt)).unwrap();
            prop_assert!(m.acc3ds <= m.acc3dr);
            prop_assert!(m.epe3d >= 0.0);
            for v in [m.acc3ds, m.acc3dr, m.outliers3d] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn chamfer_rigid_invariance(
            cloud in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 2..15),
            other in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 2..15),
            angle in -3.0f64..3.0,
            shift in prop::array::uniform3(-2.0f64..2.0),
        ) {
            let (c, s) = (angle.cos(), angle.sin());
            let mv = |p: &[f64; 3]| [c * p[0] - s * p[1] + shift[0], s * p[0] + c * p[1] + shift[1], p[2] + shift[2]];
            let a = pts(&cloud);
            let b = pts(&other);
            let a2 = pts(&cloud.iter().map(mv).collect::<Vec<_>>());
            let b2 = pts(&other.iter().map(mv).collect::<Vec<_>>());
            let base = chamfer(&a, &b);
            prop_assert!(base >= 0.0);
            prop_assert!((chamfer(&a2, &b2) - base).abs() <= 1e-9 * (1.0 + base));
        }

        #[test]
        fn laplacian_shift_invariance_and_homogeneity(
            cloud in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 3..15),
            vals in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 15),
            shift in prop::array::uniform3(-2.0f64..2.0),
            scale in 0.0f64..5.0,
        ) {
            let s = pts(&cloud);
            let n = geometry::regularization_neighborhood(&s, 2, 2, 0.8, 0).unwrap();
            let f = flow(&vals[..cloud.len()]);
            let base = laplacian_reg(&s, &f, &n).unwrap();
            let shifted = flow(&f.vectors().iter().map(|v| [v[0] + shift[0], v[1] + shift[1], v[2] + shift[2]]).collect::<Vec<_>>());
            prop_assert!(base >= 0.0);
            prop_assert!((laplacian_reg(&s, &shifted, &n).unwrap() - base).abs() <= 1e-9);
            prop_assert!((laplacian_reg(&s, &f.scaled(scale), &n).unwrap() - scale * base).abs() <= 1e-9 * (1.0 + scale * base));
        }
    }
}
