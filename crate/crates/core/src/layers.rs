//! Point-cloud network layers: `set_conv`, `set_up_conv`, `flow_embedding`
//! and a per-point GRU cell, all recorded on a [`Tape`].
//!
//! Layers work on [`FeatureVars`], the on-tape counterpart of a
//! [`FeatureMap`]: an `n x 3` position variable plus an optional `n x d`
//! feature variable. Neighbor lists, samples and interpolation weights are
//! taken from the current position values through [`Tape::select`], so they
//! are frozen when a tape is replayed.

use rand::Rng;

use crate::autodiff::{Array, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{self, Point, PointSet};

/// Added to neighbor distances before inverting them for interpolation.
pub const INTERPOLATION_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    fn apply(self, tape: &Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Relu => tape.relu(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

/// One affine map, `y = x W + b`, with `W` of shape `fan_in x fan_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Array,
    pub bias: Array,
}

/// Parameters of a per-point MLP: relu between layers, a configurable
/// activation after the last one.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    name: String,
    dense: Vec<Dense>,
    final_activation: Activation,
}

impl LayerParams {
    /// Weights and biases uniform in `±sqrt(1 / fan_in)`.
    pub fn uniform(name: &str, widths: &[usize], final_activation: Activation, rng: &mut impl Rng) -> Self {
        let dense = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (1.0 / fan_in as f64).sqrt();
                let mut draw = |count: usize| -> Vec<f64> {
                    (0..count).map(|_| rng.gen_range(-bound..=bound)).collect()
                };
                let weight = Array::matrix(fan_in, fan_out, draw(fan_in * fan_out)).unwrap();
                let bias = Array::new(vec![fan_out], draw(fan_out)).unwrap();
                Dense { weight, bias }
            })
            .collect();
        Self {
            name: name.to_string(),
            dense,
            final_activation,
        }
    }

    pub fn zeros(name: &str, widths: &[usize], final_activation: Activation) -> Self {
        let dense = widths
            .windows(2)
            .map(|w| Dense {
                weight: Array::zeros(&[w[0], w[1]]),
                bias: Array::zeros(&[w[1]]),
            })
            .collect();
        Self {
            name: name.to_string(),
            dense,
            final_activation,
        }
    }

    pub fn from_dense(name: &str, dense: Vec<Dense>, final_activation: Activation) -> Result<Self> {
        if dense.is_empty() {
            return Err(Error::InvalidArgument(format!("layer '{name}' has no dense maps")));
        }
        for pair in dense.windows(2) {
            if pair[0].weight.shape()[1] != pair[1].weight.shape()[0] {
                return Err(Error::shape("layer", format!("'{name}' widths do not chain")));
            }
        }
        for d in &dense {
            if d.weight.rank() != 2 || d.bias.len() != d.weight.shape()[1] {
                return Err(Error::shape("layer", format!("'{name}' bias does not match weight")));
            }
        }
        Ok(Self {
            name: name.to_string(),
            dense,
            final_activation,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn fan_in(&self) -> usize {
        self.dense[0].weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.dense.last().unwrap().weight.shape()[1]
    }

    pub fn final_activation(&self) -> Activation {
        self.final_activation
    }

    pub fn dense(&self) -> &[Dense] {
        &self.dense
    }

    pub fn dense_mut(&mut self) -> &mut [Dense] {
        &mut self.dense
    }

    /// `(name, array)` pairs in a fixed order.
    pub fn named_arrays(&self) -> Vec<(String, &Array)> {
        let mut out = Vec::with_capacity(self.dense.len() * 2);
        for (i, d) in self.dense.iter().enumerate() {
            out.push((format!("{}.{i}.weight", self.name), &d.weight));
            out.push((format!("{}.{i}.bias", self.name), &d.bias));
        }
        out
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut Array> {
        self.dense
            .iter_mut()
            .flat_map(|d| [&mut d.weight, &mut d.bias])
            .collect()
    }

    pub fn array_count(&self) -> usize {
        self.dense.len() * 2
    }

    /// Registers every array as a differentiable leaf.
    pub fn bind(&self, tape: &Tape) -> BoundLayer {
        BoundLayer {
            dense: self
                .dense
                .iter()
                .map(|d| (tape.leaf(d.weight.clone()), tape.leaf(d.bias.clone())))
                .collect(),
            final_activation: self.final_activation,
        }
    }

    /// Uses existing tape variables, ordered as in [`Self::named_arrays`].
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundLayer> {
        if vars.len() != self.array_count() {
            return Err(Error::CountMismatch {
                what: "layer variables",
                expected: self.array_count(),
                found: vars.len(),
            });
        }
        Ok(BoundLayer {
            dense: vars.chunks_exact(2).map(|c| (c[0], c[1])).collect(),
            final_activation: self.final_activation,
        })
    }
}

/// A [`LayerParams`] registered on a tape.
#[derive(Clone, Debug)]
pub struct BoundLayer {
    dense: Vec<(Var, Var)>,
    final_activation: Activation,
}

impl BoundLayer {
    pub fn vars(&self) -> Vec<Var> {
        self.dense.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// Id of the first weight, which identifies the binding.
    pub fn identity(&self) -> usize {
        self.dense[0].0.id()
    }

    pub fn apply(&self, tape: &Tape, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.dense.len() - 1;
        for (i, &(w, b)) in self.dense.iter().enumerate() {
            h = tape.matmul(h, w)?;
            h = tape.add_bias(h, b)?;
            h = if i == last {
                self.final_activation.apply(tape, h)?
            } else {
                tape.relu(h)?
            };
        }
        Ok(h)
    }
}

/// Sampled positions plus per-point features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub positions: PointSet,
    pub features: Array,
}

impl FeatureMap {
    pub fn new(positions: PointSet, features: Array) -> Result<Self> {
        if features.rank() != 2 || features.rows() != positions.len() || features.cols() == 0 {
            return Err(Error::shape(
                "feature map",
                format!("{} positions with features {:?}", positions.len(), features.shape()),
            ));
        }
        Ok(Self { positions, features })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn width(&self) -> usize {
        self.features.cols()
    }

    pub fn constant(&self, tape: &Tape) -> FeatureVars {
        FeatureVars {
            positions: positions_constant(tape, &self.positions),
            features: Some(tape.constant(self.features.clone())),
        }
    }
}

/// On-tape positions (`n x 3`) with optional features (`n x d`).
#[derive(Clone, Copy, Debug)]
pub struct FeatureVars {
    pub positions: Var,
    pub features: Option<Var>,
}

impl FeatureVars {
    pub fn read(&self, tape: &Tape) -> Result<FeatureMap> {
        let positions = PointSet::from_flat(tape.value(self.positions).data())?;
        let features = match self.features {
            Some(f) => (*tape.value(f)).clone(),
            None => return Err(Error::InvalidArgument("feature map has no features".into())),
        };
        FeatureMap::new(positions, features)
    }

    pub fn count(&self, tape: &Tape) -> usize {
        tape.value(self.positions).rows()
    }
}

pub fn positions_constant(tape: &Tape, points: &PointSet) -> Var {
    tape.constant(Array::matrix(points.len(), 3, points.flat()).unwrap())
}

pub(crate) fn points_of(values: &Array) -> Vec<Point> {
    values
        .data()
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect()
}

/// Furthest point sampling of the current position values, as a tape selection.
pub fn sample_centers(tape: &Tape, positions: Var, m: usize, seed: u64) -> Result<Vec<usize>> {
    let pts = points_of(&tape.value(positions));
    let n = pts.len();
    if m > n || m == 0 {
        return Err(Error::SampleCount {
            requested: m,
            available: n,
        });
    }
    let set = PointSet::new(pts)?;
    tape.select(|| geometry::furthest_point_sampling(&set, m, seed).expect("m checked above"))
}

/// Set abstraction: samples `m` centers by furthest point sampling, then
/// max-pools a shared MLP over each center's ball neighborhood.
pub fn set_conv(
    tape: &Tape,
    input: &FeatureVars,
    m: usize,
    radius: f64,
    max_neighbors: usize,
    layer: &BoundLayer,
    seed: u64,
) -> Result<FeatureVars> {
    let centers = sample_centers(tape, input.positions, m, seed)?;
    set_conv_at(tape, input, &centers, radius, max_neighbors, layer)
}

/// [`set_conv`] with the centers given as indices into `input`.
///
/// Each neighbor contributes `(neighbor - center) ⊕ neighbor features`.
/// A center with no neighbor in the ball contributes itself.
pub fn set_conv_at(
    tape: &Tape,
    input: &FeatureVars,
    centers: &[usize],
    radius: f64,
    max_neighbors: usize,
    layer: &BoundLayer,
) -> Result<FeatureVars> {
    let pts = points_of(&tape.value(input.positions));
    if let Some(&bad) = centers.iter().find(|&&c| c >= pts.len()) {
        return Err(Error::SampleCount {
            requested: bad + 1,
            available: pts.len(),
        });
    }
    if !(radius > 0.0) || max_neighbors == 0 {
        return Err(Error::InvalidArgument(format!(
            "set_conv needs radius > 0 and max_neighbors >= 1 (got {radius}, {max_neighbors})"
        )));
    }
    let lists = tape.select(|| {
        centers
            .iter()
            .map(|&c| geometry::ball_single(&pts[c], &pts, radius, max_neighbors))
            .collect::<Vec<Vec<usize>>>()
    })?;
    let group = lists.iter().map(Vec::len).max().unwrap_or(0).max(1);
    let mut flat = Vec::with_capacity(centers.len() * group);
    let mut repeated = Vec::with_capacity(centers.len() * group);
    for (&c, list) in centers.iter().zip(&lists) {
        let fill = list.first().copied().unwrap_or(c);
        for slot in 0..group {
            flat.push(list.get(slot).copied().unwrap_or(fill));
            repeated.push(c);
        }
    }
    let neighbor_pos = tape.gather(input.positions, &flat)?;
    let center_pos = tape.gather(input.positions, &repeated)?;
    let offsets = tape.sub(neighbor_pos, center_pos)?;
    let pairs = match input.features {
        Some(f) => {
            let nf = tape.gather(f, &flat)?;
            tape.concat(&[offsets, nf])?
        }
        None => offsets,
    };
    let encoded = layer.apply(tape, pairs)?;
    let pooled = tape.max_reduce_groups(encoded, group)?;
    Ok(FeatureVars {
        positions: tape.gather(input.positions, centers)?,
        features: Some(pooled),
    })
}

/// Feature propagation: inverse-distance interpolation from the 3 nearest
/// coarse points, optional skip features, then a per-point MLP.
///
/// Interpolation weights are computed from position values and are not
/// differentiated with respect to positions.
pub fn set_up_conv(
    tape: &Tape,
    coarse: &FeatureVars,
    fine_positions: Var,
    skip: Option<Var>,
    layer: &BoundLayer,
) -> Result<FeatureVars> {
    let features = coarse
        .features
        .ok_or_else(|| Error::InvalidArgument("set_up_conv needs coarse features".into()))?;
    let coarse_pts = points_of(&tape.value(coarse.positions));
    if coarse_pts.is_empty() {
        return Err(Error::EmptyReference);
    }
    let fine_pts = points_of(&tape.value(fine_positions));
    let (index, weights) = tape.select(|| interpolation_weights(&fine_pts, &coarse_pts))?;
    let group = index.len() / fine_pts.len().max(1);
    let gathered = tape.gather(features, &index)?;
    let w = tape.constant(Array::column(weights));
    let weighted = tape.scale_rows(gathered, w)?;
    let owners: Vec<usize> = (0..fine_pts.len()).flat_map(|i| std::iter::repeat(i).take(group)).collect();
    let mut interpolated = tape.scatter_add(weighted, &owners, fine_pts.len())?;
    if let Some(s) = skip {
        if tape.value(s).rows() != fine_pts.len() {
            return Err(Error::CountMismatch {
                what: "set_up_conv skip features",
                expected: fine_pts.len(),
                found: tape.value(s).rows(),
            });
        }
        interpolated = tape.concat(&[interpolated, s])?;
    }
    Ok(FeatureVars {
        positions: fine_positions,
        features: Some(layer.apply(tape, interpolated)?),
    })
}

/// Flat neighbor indices (groups of `min(3, coarse)`) and normalized
/// inverse-distance weights for every fine point.
pub fn interpolation_weights(fine: &[Point], coarse: &[Point]) -> (Vec<usize>, Vec<f64>) {
    let k = coarse.len().min(3);
    let mut index = Vec::with_capacity(fine.len() * k);
    let mut weights = Vec::with_capacity(fine.len() * k);
    for p in fine {
        let nn = geometry::knn_single(p, coarse, k);
        let inv: Vec<f64> = nn
            .iter()
            .map(|&j| 1.0 / (geometry::distance(p, &coarse[j]) + INTERPOLATION_EPS))
            .collect();
        let total: f64 = inv.iter().sum();
        index.extend(nn);
        weights.extend(inv.iter().map(|w| w / total));
    }
    (index, weights)
}

/// Local correlation between two feature maps: for each point of `a`, an MLP
/// over `(b position - a position) ⊕ a feature ⊕ b feature` for every `b`
/// point in the ball, max-pooled. Points with an empty ball get zeros.
pub fn flow_embedding(
    tape: &Tape,
    a: &FeatureVars,
    b: &FeatureVars,
    radius: f64,
    max_neighbors: usize,
    layer: &BoundLayer,
) -> Result<FeatureVars> {
    let (fa, fb) = match (a.features, b.features) {
        (Some(fa), Some(fb)) => (fa, fb),
        _ => return Err(Error::InvalidArgument("flow_embedding needs features on both inputs".into())),
    };
    let a_pts = points_of(&tape.value(a.positions));
    let b_pts = points_of(&tape.value(b.positions));
    if a_pts.is_empty() || b_pts.is_empty() {
        return Err(Error::EmptyReference);
    }
    if !(radius > 0.0) || max_neighbors == 0 {
        return Err(Error::InvalidArgument(format!(
            "flow_embedding needs radius > 0 and max_neighbors >= 1 (got {radius}, {max_neighbors})"
        )));
    }
    let lists = tape.select(|| {
        a_pts
            .iter()
            .map(|p| geometry::ball_single(p, &b_pts, radius, max_neighbors))
            .collect::<Vec<Vec<usize>>>()
    })?;
    let group = lists.iter().map(Vec::len).max().unwrap_or(0).max(1);
    let mut flat = Vec::with_capacity(a_pts.len() * group);
    let mut repeated = Vec::with_capacity(a_pts.len() * group);
    let mut mask = Vec::with_capacity(a_pts.len());
    for (i, list) in lists.iter().enumerate() {
        let fill = list.first().copied().unwrap_or(0);
        for slot in 0..group {
            flat.push(list.get(slot).copied().unwrap_or(fill));
            repeated.push(i);
        }
        mask.push(if list.is_empty() { 0.0 } else { 1.0 });
    }
    let offsets = tape.sub(tape.gather(b.positions, &flat)?, tape.gather(a.positions, &repeated)?)?;
    let pairs = tape.concat(&[offsets, tape.gather(fa, &repeated)?, tape.gather(fb, &flat)?])?;
    let encoded = layer.apply(tape, pairs)?;
    let mut pooled = tape.max_reduce_groups(encoded, group)?;
    if mask.iter().any(|&m| m == 0.0) {
        let m = tape.constant(Array::column(mask));
        pooled = tape.scale_rows(pooled, m)?;
    }
    Ok(FeatureVars {
        positions: a.positions,
        features: Some(pooled),
    })
}

/// Update, reset and candidate maps of a GRU cell. Each map takes the
/// concatenation `[hidden, input]` (the candidate uses the reset hidden).
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub update: LayerParams,
    pub reset: LayerParams,
    pub candidate: LayerParams,
}

impl GruParams {
    pub fn uniform(name: &str, hidden: usize, input: usize, rng: &mut impl Rng) -> Self {
        let widths = [hidden + input, hidden];
        Self {
            update: LayerParams::uniform(&format!("{name}.update"), &widths, Activation::Sigmoid, rng),
            reset: LayerParams::uniform(&format!("{name}.reset"), &widths, Activation::Sigmoid, rng),
            candidate: LayerParams::uniform(&format!("{name}.candidate"), &widths, Activation::Tanh, rng),
        }
    }

    pub fn zeros(name: &str, hidden: usize, input: usize) -> Self {
        let widths = [hidden + input, hidden];
        Self {
            update: LayerParams::zeros(&format!("{name}.update"), &widths, Activation::Sigmoid),
            reset: LayerParams::zeros(&format!("{name}.reset"), &widths, Activation::Sigmoid),
            candidate: LayerParams::zeros(&format!("{name}.candidate"), &widths, Activation::Tanh),
        }
    }

    pub fn hidden_width(&self) -> usize {
        self.update.fan_out()
    }

    pub fn layers(&self) -> [&LayerParams; 3] {
        [&self.update, &self.reset, &self.candidate]
    }

    pub fn layers_mut(&mut self) -> [&mut LayerParams; 3] {
        [&mut self.update, &mut self.reset, &mut self.candidate]
    }

    pub fn bind(&self, tape: &Tape) -> BoundGru {
        BoundGru {
            update: self.update.bind(tape),
            reset: self.reset.bind(tape),
            candidate: self.candidate.bind(tape),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundGru {
    pub update: BoundLayer,
    pub reset: BoundLayer,
    pub candidate: BoundLayer,
}

/// Intermediate values of one GRU step.
#[derive(Clone, Copy, Debug)]
pub struct GruStep {
    pub hidden: Var,
    pub update_gate: Var,
    pub candidate: Var,
}

pub fn gru_cell(tape: &Tape, hidden: Var, input: Var, gru: &BoundGru) -> Result<Var> {
    Ok(gru_step(tape, hidden, input, gru)?.hidden)
}

/// `z = σ(W_z[h, x])`, `r = σ(W_r[h, x])`, `h̃ = tanh(W_h[r ⊙ h, x])`,
/// `h' = (1 - z) ⊙ h + z ⊙ h̃`.
pub fn gru_step(tape: &Tape, hidden: Var, input: Var, gru: &BoundGru) -> Result<GruStep> {
    let (hr, xr) = (tape.value(hidden).rows(), tape.value(input).rows());
    if hr != xr {
        return Err(Error::CountMismatch {
            what: "gru input rows",
            expected: hr,
            found: xr,
        });
    }
    let hx = tape.concat(&[hidden, input])?;
    let z = gru.update.apply(tape, hx)?;
    let r = gru.reset.apply(tape, hx)?;
    let reset_hidden = tape.mul(r, hidden)?;
    let candidate = gru.candidate.apply(tape, tape.concat(&[reset_hidden, input])?)?;
    let keep = tape.mul(tape.affine(z, -1.0, 1.0)?, hidden)?;
    let take = tape.mul(z, candidate)?;
    Ok(GruStep {
        hidden: tape.add(keep, take)?,
        update_gate: z,
        candidate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, seed: u64) -> PointSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointSet::new((0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect()).unwrap()
    }

    #[test]
    fn set_conv_shape_and_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = cloud(20, 2);
        let t = Tape::new();
        let input = FeatureVars {
            positions: positions_constant(&t, &pts),
            features: None,
        };
        let layer = LayerParams::uniform("c", &[3, 8, 5], Activation::Relu, &mut rng).bind(&t);
        let out = set_conv(&t, &input, 7, 0.4, 6, &layer, 3).unwrap();
        assert_eq!(out.count(&t), 7);
        assert_eq!(t.value(out.features.unwrap()).shape(), &[7, 5]);

        let zero = LayerParams::zeros("z", &[3, 8, 5], Activation::Relu).bind(&t);
        let out = set_conv(&t, &input, 7, 0.4, 6, &zero, 3).unwrap();
        assert!(t.value(out.features.unwrap()).data().iter().all(|&v| v == 0.0));
        assert!(set_conv(&t, &input, 21, 0.4, 6, &zero, 3).is_err());
    }

    #[test]
    fn set_conv_ignores_surplus_neighbor_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts = cloud(10, 5);
        let t = Tape::new();
        let input = FeatureVars {
            positions: positions_constant(&t, &pts),
            features: None,
        };
        let layer = LayerParams::uniform("c", &[3, 6], Activation::Relu, &mut rng).bind(&t);
        let a = set_conv(&t, &input, 4, 0.5, 10, &layer, 0).unwrap();
        let b = set_conv(&t, &input, 4, 0.5, 20, &layer, 0).unwrap();
        assert_eq!(*t.value(a.features.unwrap()), *t.value(b.features.unwrap()));
    }

    #[test]
    fn set_up_conv_interpolates_constants() {
        let coarse_pts = cloud(5, 7);
        let fine_pts = cloud(12, 8);
        let t = Tape::new();
        let c = [0.3, -1.2, 2.5];
        let feats = Array::matrix(5, 3, (0..5).flat_map(|_| c).collect()).unwrap();
        let coarse = FeatureVars {
            positions: positions_constant(&t, &coarse_pts),
            features: Some(t.constant(feats)),
        };
        let mut eye = LayerParams::zeros("id", &[3, 3], Activation::Identity);
        for i in 0..3 {
            eye.dense_mut()[0].weight.data_mut()[i * 3 + i] = 1.0;
        }
        let eye = eye.bind(&t);
        let out = set_up_conv(&t, &coarse, positions_constant(&t, &fine_pts), None, &eye).unwrap();
        let v = t.value(out.features.unwrap());
        for r in 0..12 {
            for a in 0..3 {
                assert!((v.get2(r, a) - c[a]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn set_up_conv_at_a_coarse_point_copies_it() {
        let coarse_pts = cloud(6, 9);
        let t = Tape::new();
        let feats = Array::matrix(6, 2, (0..12).map(|v| v as f64 * 0.7 - 3.0).collect()).unwrap();
        let coarse = FeatureVars {
            positions: positions_constant(&t, &coarse_pts),
            features: Some(t.constant(feats.clone())),
        };
        let mut eye = LayerParams::zeros("id", &[2, 2], Activation::Identity);
        eye.dense_mut()[0].weight.data_mut()[0] = 1.0;
        eye.dense_mut()[0].weight.data_mut()[3] = 1.0;
        let fine = positions_constant(&t, &coarse_pts.select(&[4]));
        let out = set_up_conv(&t, &coarse, fine, None, &eye.bind(&t)).unwrap();
        let v = t.value(out.features.unwrap());
        assert!((v.get2(0, 0) - feats.get2(4, 0)).abs() < 1e-6);
        assert!((v.get2(0, 1) - feats.get2(4, 1)).abs() < 1e-6);

        let zero = LayerParams::zeros("z", &[2, 4], Activation::Identity).bind(&t);
        let out = set_up_conv(&t, &coarse, fine, None, &zero).unwrap();
        assert!(t.value(out.features.unwrap()).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flow_embedding_shapes_and_empty_balls() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a_pts = cloud(9, 12);
        let b_pts = cloud(11, 13);
        let t = Tape::new();
        let fa = Array::matrix(9, 4, (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let fb = Array::matrix(11, 4, (0..44).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let a = FeatureMap::new(a_pts, fa).unwrap().constant(&t);
        let b = FeatureMap::new(b_pts.clone(), fb.clone()).unwrap().constant(&t);
        let layer = LayerParams::uniform("fe", &[11, 8, 6], Activation::Relu, &mut rng).bind(&t);
        let out = flow_embedding(&t, &a, &b, 0.5, 8, &layer).unwrap();
        assert_eq!(t.value(out.features.unwrap()).shape(), &[9, 6]);

        let radius = 0.5;
        let far = PointSet::new(b_pts.points().iter().map(|p| [p[0] + 10.0 * radius, p[1], p[2]]).collect())
            .unwrap();
        let b_far = FeatureMap::new(far, fb).unwrap().constant(&t);
        let out = flow_embedding(&t, &a, &b_far, radius, 8, &layer).unwrap();
        assert!(t.value(out.features.unwrap()).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gru_with_zero_params_halves_hidden() {
        let t = Tape::new();
        let h = t.constant(Array::matrix(2, 3, vec![0.4, -0.8, 1.0, -1.0, 0.0, 0.25]).unwrap());
        let x = t.constant(Array::matrix(2, 2, vec![5.0, -3.0, 0.1, 2.0]).unwrap());
        let gru = GruParams::zeros("g", 3, 2).bind(&t);
        let out = gru_cell(&t, h, x, &gru).unwrap();
        let expected: Vec<f64> = t.value(h).data().iter().map(|v| 0.5 * v).collect();
        assert_eq!(t.value(out).data(), expected.as_slice());

        let x_bad = t.constant(Array::zeros(&[3, 2]));
        assert!(gru_cell(&t, h, x_bad, &gru).is_err());
    }

    #[test]
    fn saturated_update_gate_takes_candidate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Tape::new();
        let h = t.constant(Array::matrix(4, 3, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap());
        let x = t.constant(Array::matrix(4, 2, (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap());
        let mut params = GruParams::uniform("g", 3, 2, &mut rng);
        params.update = LayerParams::zeros("g.update", &[5, 3], Activation::Sigmoid);
        params.update.dense_mut()[0].bias = Array::filled(&[3], 50.0);
        let step = gru_step(&t, h, x, &params.bind(&t)).unwrap();
        let (hn, cand) = (t.value(step.hidden), t.value(step.candidate));
        for (a, b) in hn.data().iter().zip(cand.data()) {
            assert!((a - b).abs() <= 1e-15);
        }
    }
}
