//! Point sets, flow fields and the deterministic neighborhood primitives
//! (k-nearest neighbors, ball queries, furthest point sampling, warping)
//! that every other module builds on.
//!
//! All queries are exact brute force. Distance ties are always broken by the
//! lower reference index so results are reproducible bit for bit.

use std::cmp::Ordering;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type Point = [f64; 3];

/// An ordered, nonempty collection of finite 3D points.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    points: Vec<Point>,
}

impl PointSet {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyPointSet);
        }
        if let Some(index) = points
            .iter()
            .position(|p| p.iter().any(|c| !c.is_finite()))
        {
            return Err(Error::NonFiniteCoordinate { index });
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn get(&self, i: usize) -> Point {
        self.points[i]
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    /// Points at the given indices, in index order.
    pub fn select(&self, indices: &[usize]) -> PointSet {
        PointSet {
            points: indices.iter().map(|&i| self.points[i]).collect(),
        }
    }

    /// Row-major `n x 3` coordinates.
    pub fn flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| p.iter().copied()).collect()
    }

    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if values.len() % 3 != 0 {
            return Err(Error::InvalidArgument(format!(
                "flat coordinate buffer of length {} is not a multiple of 3",
                values.len()
            )));
        }
        Self::new(values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn centroid(&self) -> Point {
        let n = self.points.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for a in 0..3 {
                c[a] += p[a];
            }
        }
        c.map(|v| v / n)
    }
}

/// Per-point 3D displacement vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    vectors: Vec<Point>,
}

impl FlowField {
    pub fn new(vectors: Vec<Point>) -> Result<Self> {
        if let Some(index) = vectors
            .iter()
            .position(|p| p.iter().any(|c| !c.is_finite()))
        {
            return Err(Error::NonFiniteCoordinate { index });
        }
        Ok(Self { vectors })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            vectors: vec![[0.0; 3]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vectors(&self) -> &[Point] {
        &self.vectors
    }

    pub fn get(&self, i: usize) -> Point {
        self.vectors[i]
    }

    pub fn flat(&self) -> Vec<f64> {
        self.vectors.iter().flat_map(|p| p.iter().copied()).collect()
    }

    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if values.len() % 3 != 0 {
            return Err(Error::InvalidArgument(format!(
                "flat flow buffer of length {} is not a multiple of 3",
                values.len()
            )));
        }
        Self::new(values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn scaled(&self, s: f64) -> FlowField {
        FlowField {
            vectors: self.vectors.iter().map(|v| v.map(|c| c * s)).collect(),
        }
    }

    pub fn negated(&self) -> FlowField {
        self.scaled(-1.0)
    }
}

/// Ordered flow estimates `F_1 .. F_K`, one per refinement iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSequence {
    flows: Vec<FlowField>,
}

impl FlowSequence {
    pub fn new(flows: Vec<FlowField>) -> Result<Self> {
        let first = flows
            .first()
            .ok_or_else(|| Error::InvalidArgument("flow sequence needs K >= 1".into()))?;
        let n = first.len();
        for f in &flows {
            if f.len() != n {
                return Err(Error::CountMismatch {
                    what: "flow sequence member",
                    expected: n,
                    found: f.len(),
                });
            }
        }
        Ok(Self { flows })
    }

    pub fn len(&self) -> usize {
        self.flows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flows.is_empty()
    }

    pub fn flows(&self) -> &[FlowField] {
        &self.flows
    }

    pub fn last(&self) -> &FlowField {
        self.flows.last().expect("flow sequence is nonempty")
    }
}

/// Per-query lists of indices into a reference set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborIndexLists {
    lists: Vec<Vec<usize>>,
}

impl NeighborIndexLists {
    pub fn new(lists: Vec<Vec<usize>>) -> Self {
        Self { lists }
    }

    pub fn lists(&self) -> &[Vec<usize>] {
        &self.lists
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    pub fn get(&self, i: usize) -> &[usize] {
        &self.lists[i]
    }

    pub fn into_lists(self) -> Vec<Vec<usize>> {
        self.lists
    }
}

#[inline]
pub fn squared_distance(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
pub fn distance(a: &Point, b: &Point) -> f64 {
    squared_distance(a, b).sqrt()
}

fn by_distance_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Indices of the `min(k, |reference|)` nearest reference points for every
/// query point, nearest first.
pub fn knn(query: &PointSet, reference: &PointSet, k: usize) -> Result<NeighborIndexLists> {
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    if k == 0 {
        return Err(Error::InvalidArgument("knn requires k >= 1".into()));
    }
    Ok(NeighborIndexLists::new(
        query
            .points()
            .iter()
            .map(|q| knn_single(q, reference.points(), k))
            .collect(),
    ))
}

pub(crate) fn knn_single(q: &Point, reference: &[Point], k: usize) -> Vec<usize> {
    let k = k.min(reference.len());
    let mut scored: Vec<(f64, usize)> = reference
        .iter()
        .enumerate()
        .map(|(j, r)| (squared_distance(q, r), j))
        .collect();
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, by_distance_then_index);
        scored.truncate(k);
    }
    scored.sort_unstable_by(by_distance_then_index);
    scored.into_iter().map(|(_, j)| j).collect()
}

/// Index of the single nearest reference point (lowest index on ties).
pub(crate) fn nearest(q: &Point, reference: &[Point]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, r) in reference.iter().enumerate() {
        let d = squared_distance(q, r);
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

/// Up to `max_count` reference indices within `radius` of each query point,
/// nearest first.
pub fn ball_query(
    query: &PointSet,
    reference: &PointSet,
    radius: f64,
    max_count: usize,
) -> Result<NeighborIndexLists> {
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    if !(radius > 0.0) || max_count == 0 {
        return Err(Error::InvalidArgument(format!(
            "ball query needs radius > 0 and max_count >= 1 (got {radius}, {max_count})"
        )));
    }
    Ok(NeighborIndexLists::new(
        query
            .points()
            .iter()
            .map(|q| ball_single(q, reference.points(), radius, max_count))
            .collect(),
    ))
}

pub(crate) fn ball_single(q: &Point, reference: &[Point], radius: f64, max_count: usize) -> Vec<usize> {
    let r2 = radius * radius;
    let mut inside: Vec<(f64, usize)> = reference
        .iter()
        .enumerate()
        .filter_map(|(j, r)| {
            let d = squared_distance(q, r);
            (d <= r2).then_some((d, j))
        })
        .collect();
    inside.sort_unstable_by(by_distance_then_index);
    inside.truncate(max_count);
    inside.into_iter().map(|(_, j)| j).collect()
}

/// Greedy max-min sampling of `m` distinct indices. The first pick is
/// `seed mod n`; each later pick maximizes the distance to the already
/// chosen set, lowest index on ties.
pub fn furthest_point_sampling(points: &PointSet, m: usize, seed: u64) -> Result<Vec<usize>> {
    let n = points.len();
    if m > n || m == 0 {
        return Err(Error::SampleCount {
            requested: m,
            available: n,
        });
    }
    let pts = points.points();
    let first = (seed % n as u64) as usize;
    let mut picked = Vec::with_capacity(m);
    let mut min_d = vec![f64::INFINITY; n];
    let mut taken = vec![false; n];
    let mut current = first;
    for _ in 0..m {
        picked.push(current);
        taken[current] = true;
        let c = pts[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for j in 0..n {
            if taken[j] {
                continue;
            }
            let d = squared_distance(&pts[j], &c);
            if d < min_d[j] {
                min_d[j] = d;
            }
            if min_d[j] > best_d {
                best_d = min_d[j];
                best = j;
            }
        }
        current = best;
    }
    Ok(picked)
}

/// `source + flow`, point by point.
pub fn warp(source: &PointSet, flow: &FlowField) -> Result<PointSet> {
    if source.len() != flow.len() {
        return Err(Error::CountMismatch {
            what: "warp flow",
            expected: source.len(),
            found: flow.len(),
        });
    }
    PointSet::new(
        source
            .points()
            .iter()
            .zip(flow.vectors())
            .map(|(p, f)| [p[0] + f[0], p[1] + f[1], p[2] + f[2]])
            .collect(),
    )
}

/// Regularization neighborhoods: the `k_a` nearest other points of each
/// point, united with `k_b` points drawn uniformly without replacement from
/// the remaining points inside the `r_b` ball. Self is never included.
pub fn regularization_neighborhood(
    points: &PointSet,
    k_a: usize,
    k_b: usize,
    r_b: f64,
    seed: u64,
) -> Result<NeighborIndexLists> {
    let n = points.len();
    if k_a == 0 || !(r_b > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "regularization neighborhood needs k_a >= 1 and r_b > 0 (got {k_a}, {r_b})"
        )));
    }
    if n - 1 < k_a {
        return Err(Error::InvalidArgument(format!(
            "regularization neighborhood needs at least {k_a} other points, cloud has {}",
            n - 1
        )));
    }
    let pts = points.points();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r2 = r_b * r_b;
    let mut lists = Vec::with_capacity(n);
    for (i, p) in pts.iter().enumerate() {
        let mut scored: Vec<(f64, usize)> = pts
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(j, q)| (squared_distance(p, q), j))
            .collect();
        scored.sort_unstable_by(by_distance_then_index);
        let mut list: Vec<usize> = scored[..k_a].iter().map(|&(_, j)| j).collect();
        if k_b > 0 {
            let candidates: Vec<usize> = scored[k_a..]
                .iter()
                .take_while(|&&(d, _)| d <= r2)
                .map(|&(_, j)| j)
                .collect();
            let take = k_b.min(candidates.len());
            if take > 0 {
                let mut chosen: Vec<usize> = sample(&mut rng, candidates.len(), take)
                    .into_iter()
                    .map(|c| candidates[c])
                    .collect();
                chosen.sort_unstable();
                list.extend(chosen);
            }
        }
        lists.push(list);
    }
    Ok(NeighborIndexLists::new(lists))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(xs: &[f64]) -> PointSet {
        PointSet::new(xs.iter().map(|&x| [x, 0.0, 0.0]).collect()).unwrap()
    }

    #[test]
    fn knn_orders_by_distance() {
        let q = line(&[0.0]);
        let r = line(&[1.0, 2.0, 3.0]);
        assert_eq!(knn(&q, &r, 2).unwrap().get(0), &[0, 1]);
        assert_eq!(knn(&q, &r, 3).unwrap().get(0), &[0, 1, 2]);
        assert_eq!(knn(&q, &r, 10).unwrap().get(0), &[0, 1, 2]);
    }

    #[test]
    fn knn_self_is_nearest() {
        let r = line(&[4.0, -1.0, 2.5, 7.0]);
        let q = r.select(&[2]);
        assert_eq!(knn(&q, &r, 1).unwrap().get(0), &[2]);
    }

    #[test]
    fn knn_ties_break_to_lower_index() {
        let q = line(&[0.0]);
        let r = line(&[1.0, -1.0, 1.0]);
        assert_eq!(knn(&q, &r, 3).unwrap().get(0), &[0, 1, 2]);
    }

    #[test]
    fn ball_query_cases() {
        let q = line(&[0.0]);
        let r = line(&[1.0, 2.0]);
        assert_eq!(ball_query(&q, &r, 1.5, 8).unwrap().get(0), &[0]);
        assert!(ball_query(&q, &r, 0.5, 8).unwrap().get(0).is_empty());
        assert_eq!(ball_query(&q, &r, 5.0, 1).unwrap().get(0), &[0]);
        assert!(ball_query(&q, &r, 0.0, 1).is_err());
    }

    #[test]
    fn fps_on_a_line() {
        let pts = line(&[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(furthest_point_sampling(&pts, 2, 0).unwrap(), vec![0, 3]);
        assert_eq!(furthest_point_sampling(&pts, 3, 0).unwrap(), vec![0, 3, 1]);
        let mut all = furthest_point_sampling(&pts, 4, 2).unwrap();
        assert_eq!(all[0], 2);
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert!(furthest_point_sampling(&pts, 5, 0).is_err());
    }

    #[test]
    fn fps_handles_duplicates() {
        let pts = line(&[0.0, 0.0, 0.0]);
        let mut s = furthest_point_sampling(&pts, 3, 1).unwrap();
        s.sort();
        assert_eq!(s, vec![0, 1, 2]);
    }

    #[test]
    fn warp_cases() {
        let s = PointSet::new(vec![[1.0, 2.0, 3.0]]).unwrap();
        let f = FlowField::new(vec![[0.5, 0.0, -1.0]]).unwrap();
        assert_eq!(warp(&s, &f).unwrap().points(), &[[1.5, 2.0, 2.0]]);
        assert_eq!(warp(&s, &FlowField::zeros(1)).unwrap(), s);
        assert!(warp(&s, &FlowField::zeros(2)).is_err());
    }

    #[test]
    fn regularization_neighborhood_cases() {
        let pts = line(&[0.0, 0.1, 0.2, 0.3, 5.0, 5.1]);
        let plain = regularization_neighborhood(&pts, 2, 0, 1.0, 3).unwrap();
        let nn = knn(&pts, &pts, 3).unwrap();
        for i in 0..pts.len() {
            let expected: Vec<usize> = nn.get(i).iter().copied().filter(|&j| j != i).take(2).collect();
            assert_eq!(plain.get(i), expected.as_slice());
        }
        // The far pair has nothing else inside the ball.
        let with_ball = regularization_neighborhood(&pts, 1, 4, 0.5, 3).unwrap();
        assert_eq!(with_ball.get(4), &[5]);
        assert_eq!(with_ball.get(0), &[1, 2, 3]);

        let two = line(&[0.0, 1.0]);
        let n = regularization_neighborhood(&two, 1, 3, 0.1, 0).unwrap();
        assert_eq!(n.lists(), &[vec![1], vec![0]]);
        assert!(regularization_neighborhood(&two, 2, 0, 0.1, 0).is_err());
    }
}
