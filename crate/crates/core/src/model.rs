//! The iterative scene-flow model.
//!
//! A global unit encodes both clouds, correlates their coarse descriptors
//! all-to-all and regresses an initial flow `F_1`. A recurrent local unit
//! then refines it: each step warps the source, re-encodes it with the same
//! local encoder, embeds its correlation with the target, updates a GRU state
//! and adds a scaled flow increment.
//!
//! Sampling plans (the furthest-point picks at each encoder level) are
//! computed once per cloud from the unwarped positions and reused for every
//! warped copy, so encoder rows stay aligned with source points across
//! iterations.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Array, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{self, FlowField, FlowSequence, PointSet};
use crate::layers::{
    self, flow_embedding, gru_cell, positions_constant, set_conv_at, set_up_conv, Activation, BoundGru,
    BoundLayer, FeatureMap, FeatureVars, GruParams, LayerParams,
};

/// Architecture and fixed hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Local encoder resolution `n′`.
    pub n_local: usize,
    /// Global encoder resolution `n″`.
    pub n_global: usize,
    pub d_local: usize,
    pub d_global: usize,
    pub d_corr: usize,
    pub d_motion: usize,
    pub d_hidden: usize,
    /// Correlation temperature.
    pub epsilon: f64,
    /// Increment scale constant: step `k` is multiplied by `1 / (C (k - 1) + 1)`.
    pub flow_scale: f64,
    /// Coarse pairs further apart than this get zero correlation.
    pub d_cap: f64,
    /// Ball radius of the first local set_conv.
    pub local_radius: f64,
    /// Ball radius of the second local set_conv.
    pub encoder_radius: f64,
    pub global_radius: f64,
    pub embedding_radius: f64,
    /// Ball radius of the set_convs that run at resolution `n′`.
    pub hidden_radius: f64,
    pub max_neighbors: usize,
    pub sampling_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_local: 64,
            n_global: 16,
            d_local: 32,
            d_global: 64,
            d_corr: 32,
            d_motion: 16,
            d_hidden: 64,
            epsilon: 0.03,
            flow_scale: 1.0,
            d_cap: 10.0,
            local_radius: 0.2,
            encoder_radius: 0.35,
            global_radius: 0.8,
            embedding_radius: 0.4,
            hidden_radius: 0.35,
            max_neighbors: 16,
            sampling_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let dims = [
            ("n_local", self.n_local),
            ("n_global", self.n_global),
            ("d_local", self.d_local),
            ("d_global", self.d_global),
            ("d_corr", self.d_corr),
            ("d_motion", self.d_motion),
            ("d_hidden", self.d_hidden),
            ("max_neighbors", self.max_neighbors),
        ];
        for (name, v) in dims {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if self.n_global > self.n_local {
            return bad(format!(
                "n_global ({}) must not exceed n_local ({})",
                self.n_global, self.n_local
            ));
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be > 0 (got {})", self.epsilon));
        }
        if !(self.flow_scale >= 0.0) {
            return bad(format!("flow_scale must be >= 0 (got {})", self.flow_scale));
        }
        if !(self.d_cap > 0.0) {
            return bad(format!("d_cap must be > 0 (got {})", self.d_cap));
        }
        let radii = [
            ("local_radius", self.local_radius),
            ("encoder_radius", self.encoder_radius),
            ("global_radius", self.global_radius),
            ("embedding_radius", self.embedding_radius),
            ("hidden_radius", self.hidden_radius),
        ];
        for (name, r) in radii {
            if !(r > 0.0) || !r.is_finite() {
                return bad(format!("{name} must be a positive number (got {r})"));
            }
        }
        Ok(())
    }

    /// Width of the GRU input `[local ⊕ embedding ⊕ flow ⊕ motion]`.
    pub fn gru_input_width(&self) -> usize {
        self.d_local + self.d_corr + 3 + self.d_motion
    }

    /// Multiplier applied to the refinement at step `k >= 2`.
    pub fn increment_scale(&self, k: usize) -> f64 {
        1.0 / (self.flow_scale * (k as f64 - 1.0) + 1.0)
    }
}

/// All trainable arrays plus the configuration they were built for.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters {
    config: ModelConfig,
    pub local1: LayerParams,
    pub local2: LayerParams,
    pub global1: LayerParams,
    pub global2: LayerParams,
    pub upsample1: LayerParams,
    pub upsample2: LayerParams,
    pub hidden1: LayerParams,
    pub hidden2: LayerParams,
    pub embedding: LayerParams,
    pub flow_enc1: LayerParams,
    pub flow_enc2: LayerParams,
    pub gru: GruParams,
    pub regressor1: LayerParams,
    pub regressor2: LayerParams,
    pub regressor_up: LayerParams,
}

struct LayerSpec {
    name: &'static str,
    widths: Vec<usize>,
    activation: Activation,
}

fn layer_specs(c: &ModelConfig) -> Vec<LayerSpec> {
    let half = (c.d_local / 2).max(1);
    let spec = |name, widths: Vec<usize>, activation| LayerSpec {
        name,
        widths,
        activation,
    };
    vec![
        spec("local1", vec![3, half, half], Activation::Relu),
        spec("local2", vec![3 + half, c.d_local, c.d_local], Activation::Relu),
        spec("global1", vec![3 + c.d_local, c.d_global, c.d_global], Activation::Relu),
        spec("global2", vec![3 + c.d_global, c.d_global, c.d_global], Activation::Identity),
        spec("upsample1", vec![3 + c.d_local, c.d_local, c.d_local], Activation::Relu),
        spec("upsample2", vec![c.d_local, c.d_local, 3], Activation::Identity),
        spec("hidden1", vec![3 + c.d_local, c.d_hidden], Activation::Relu),
        spec("hidden2", vec![3 + c.d_hidden, c.d_hidden], Activation::Tanh),
        spec("embedding", vec![3 + 2 * c.d_local, c.d_corr, c.d_corr], Activation::Relu),
        spec("flow_enc1", vec![6, c.d_motion, c.d_motion], Activation::Relu),
        spec("flow_enc2", vec![3 + c.d_motion, c.d_motion, c.d_motion], Activation::Relu),
        spec("regressor1", vec![3 + c.d_hidden, c.d_local], Activation::Relu),
        spec("regressor2", vec![3 + c.d_local, c.d_motion], Activation::Relu),
        spec("regressor_up", vec![c.d_motion, c.d_motion, 3], Activation::Identity),
    ]
}

impl ModelParameters {
    /// Seeded uniform initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers: Vec<LayerParams> = layer_specs(&config)
            .iter()
            .map(|s| LayerParams::uniform(s.name, &s.widths, s.activation, &mut rng))
            .collect();
        let gru = GruParams::uniform("gru", config.d_hidden, config.gru_input_width(), &mut rng);
        Ok(Self::assemble(config, &mut layers, gru))
    }

    /// Every weight and bias zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut layers: Vec<LayerParams> = layer_specs(&config)
            .iter()
            .map(|s| LayerParams::zeros(s.name, &s.widths, s.activation))
            .collect();
        let gru = GruParams::zeros("gru", config.d_hidden, config.gru_input_width());
        Ok(Self::assemble(config, &mut layers, gru))
    }

    fn assemble(config: ModelConfig, layers: &mut Vec<LayerParams>, gru: GruParams) -> Self {
        let mut it = layers.drain(..);
        let mut next = || it.next().expect("layer spec count");
        Self {
            local1: next(),
            local2: next(),
            global1: next(),
            global2: next(),
            upsample1: next(),
            upsample2: next(),
            hidden1: next(),
            hidden2: next(),
            embedding: next(),
            flow_enc1: next(),
            flow_enc2: next(),
            regressor1: next(),
            regressor2: next(),
            regressor_up: next(),
            gru,
            config,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Layers in canonical order.
    pub fn layers(&self) -> Vec<&LayerParams> {
        let [u, r, c] = self.gru.layers();
        vec![
            &self.local1,
            &self.local2,
            &self.global1,
            &self.global2,
            &self.upsample1,
            &self.upsample2,
            &self.hidden1,
            &self.hidden2,
            &self.embedding,
            &self.flow_enc1,
            &self.flow_enc2,
            u,
            r,
            c,
            &self.regressor1,
            &self.regressor2,
            &self.regressor_up,
        ]
    }

    fn layers_mut(&mut self) -> Vec<&mut LayerParams> {
        let [u, r, c] = self.gru.layers_mut();
        vec![
            &mut self.local1,
            &mut self.local2,
            &mut self.global1,
            &mut self.global2,
            &mut self.upsample1,
            &mut self.upsample2,
            &mut self.hidden1,
            &mut self.hidden2,
            &mut self.embedding,
            &mut self.flow_enc1,
            &mut self.flow_enc2,
            u,
            r,
            c,
            &mut self.regressor1,
            &mut self.regressor2,
            &mut self.regressor_up,
        ]
    }

    /// `(name, array)` pairs in canonical order.
    pub fn named_arrays(&self) -> Vec<(String, &Array)> {
        self.layers().into_iter().flat_map(|l| l.named_arrays()).collect()
    }

    pub fn arrays(&self) -> Vec<Array> {
        self.named_arrays().into_iter().map(|(_, a)| a.clone()).collect()
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut Array> {
        self.layers_mut().into_iter().flat_map(|l| l.arrays_mut()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.named_arrays().iter().map(|(_, a)| a.len()).sum()
    }

    /// Replaces every array by name. Names and shapes must match exactly.
    pub fn load_named(&mut self, arrays: &[(String, Array)]) -> Result<()> {
        let names: Vec<(String, Vec<usize>)> = self
            .named_arrays()
            .into_iter()
            .map(|(n, a)| (n, a.shape().to_vec()))
            .collect();
        if names.len() != arrays.len() {
            return Err(Error::CountMismatch {
                what: "model arrays",
                expected: names.len(),
                found: arrays.len(),
            });
        }
        for ((want, shape), (got, a)) in names.iter().zip(arrays) {
            if want != got || shape.as_slice() != a.shape() {
                return Err(Error::InvalidArgument(format!(
                    "expected array '{want}' {shape:?}, found '{got}' {:?}",
                    a.shape()
                )));
            }
        }
        for (slot, (_, a)) in self.arrays_mut().into_iter().zip(arrays) {
            *slot = a.clone();
        }
        Ok(())
    }

    /// Registers every array on the tape as a leaf.
    pub fn bind(&self, tape: &Tape) -> BoundModel {
        let vars: Vec<Var> = self.arrays().into_iter().map(|a| tape.leaf(a)).collect();
        self.bind_vars(&vars).expect("variable count matches parameters")
    }

    /// Builds the on-tape model from existing variables, ordered as in
    /// [`Self::named_arrays`].
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundModel> {
        let total: usize = self.layers().iter().map(|l| l.array_count()).sum();
        if vars.len() != total {
            return Err(Error::CountMismatch {
                what: "model variables",
                expected: total,
                found: vars.len(),
            });
        }
        let mut bound = Vec::new();
        let mut offset = 0;
        for l in self.layers() {
            bound.push(l.bind_vars(&vars[offset..offset + l.array_count()])?);
            offset += l.array_count();
        }
        let mut it = bound.into_iter();
        let mut next = || it.next().expect("layer count");
        Ok(BoundModel {
            local1: next(),
            local2: next(),
            global1: next(),
            global2: next(),
            upsample1: next(),
            upsample2: next(),
            hidden1: next(),
            hidden2: next(),
            embedding: next(),
            flow_enc1: next(),
            flow_enc2: next(),
            gru: BoundGru {
                update: next(),
                reset: next(),
                candidate: next(),
            },
            regressor1: next(),
            regressor2: next(),
            regressor_up: next(),
            vars: vars.to_vec(),
            config: self.config.clone(),
        })
    }
}

/// Model layers registered on one tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub local1: BoundLayer,
    pub local2: BoundLayer,
    pub global1: BoundLayer,
    pub global2: BoundLayer,
    pub upsample1: BoundLayer,
    pub upsample2: BoundLayer,
    pub hidden1: BoundLayer,
    pub hidden2: BoundLayer,
    pub embedding: BoundLayer,
    pub flow_enc1: BoundLayer,
    pub flow_enc2: BoundLayer,
    pub gru: BoundGru,
    pub regressor1: BoundLayer,
    pub regressor2: BoundLayer,
    pub regressor_up: BoundLayer,
    vars: Vec<Var>,
    config: ModelConfig,
}

impl BoundModel {
    /// Parameter variables in canonical order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }
}

/// Furthest-point picks for the four encoder levels of one cloud. Each level
/// indexes into the points kept by the previous one.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingPlan {
    pub level1: Vec<usize>,
    pub level2: Vec<usize>,
    pub global1: Vec<usize>,
    pub global2: Vec<usize>,
}

impl SamplingPlan {
    pub fn new(points: &PointSet, config: &ModelConfig, seed: u64) -> Result<Self> {
        let n = points.len();
        if n < config.n_local {
            return Err(Error::SampleCount {
                requested: config.n_local,
                available: n,
            });
        }
        let level1 = geometry::furthest_point_sampling(points, (2 * config.n_local).min(n), seed)?;
        let kept1 = points.select(&level1);
        let level2 = geometry::furthest_point_sampling(&kept1, config.n_local, seed)?;
        let kept2 = kept1.select(&level2);
        let global1 =
            geometry::furthest_point_sampling(&kept2, (2 * config.n_global).min(config.n_local), seed)?;
        let kept3 = kept2.select(&global1);
        let global2 = geometry::furthest_point_sampling(&kept3, config.n_global, seed)?;
        Ok(Self {
            level1,
            level2,
            global1,
            global2,
        })
    }

    /// Indices into the original cloud of the `n′` local-resolution points.
    pub fn local_indices(&self) -> Vec<usize> {
        self.level2.iter().map(|&i| self.level1[i]).collect()
    }
}

fn encode_local(tape: &Tape, m: &BoundModel, positions: Var, plan: &SamplingPlan) -> Result<FeatureVars> {
    let c = &m.config;
    let input = FeatureVars {
        positions,
        features: None,
    };
    let a = set_conv_at(tape, &input, &plan.level1, c.local_radius, c.max_neighbors, &m.local1)?;
    set_conv_at(tape, &a, &plan.level2, c.encoder_radius, c.max_neighbors, &m.local2)
}

fn encode_global(tape: &Tape, m: &BoundModel, local: &FeatureVars, plan: &SamplingPlan) -> Result<FeatureVars> {
    let c = &m.config;
    let a = set_conv_at(tape, local, &plan.global1, c.global_radius, c.max_neighbors, &m.global1)?;
    set_conv_at(tape, &a, &plan.global2, c.global_radius, c.max_neighbors, &m.global2)
}

fn all_indices(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn init_hidden_tape(tape: &Tape, m: &BoundModel, local_s: &FeatureVars) -> Result<Var> {
    let c = &m.config;
    let centers = all_indices(local_s.count(tape));
    let a = set_conv_at(tape, local_s, &centers, c.hidden_radius, c.max_neighbors, &m.hidden1)?;
    let b = set_conv_at(tape, &a, &centers, c.hidden_radius, c.max_neighbors, &m.hidden2)?;
    Ok(b.features.expect("set_conv output has features"))
}

/// Soft correspondences between coarse source and target descriptors.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMatrix {
    pub values: Array,
    pub source_positions: PointSet,
    pub target_positions: PointSet,
}

impl CorrelationMatrix {
    /// Number of stored entries.
    pub fn entry_count(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values.get2(i, j)
    }
}

fn check_feature_norms(values: &Array, side: &'static str) -> Result<()> {
    for r in 0..values.rows() {
        if values.row(r).iter().all(|&v| v == 0.0) {
            return Err(Error::DegenerateFeature { side, row: r });
        }
    }
    Ok(())
}

fn unit_rows(tape: &Tape, x: Var) -> Result<Var> {
    let norm = tape.sqrt(tape.row_sum(tape.square(x)?)?)?;
    let ones = tape.constant(Array::filled(&[tape.value(x).rows(), 1], 1.0));
    tape.scale_rows(x, tape.div(ones, norm)?)
}

fn correlation_tape(tape: &Tape, c: &ModelConfig, hs: &FeatureVars, ht: &FeatureVars) -> Result<Var> {
    let (fs, ft) = match (hs.features, ht.features) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::InvalidArgument("correlation needs features on both sides".into())),
    };
    let (vs, vt) = (tape.value(fs), tape.value(ft));
    if vs.cols() != vt.cols() {
        return Err(Error::shape(
            "correlation",
            format!("feature widths {} and {}", vs.cols(), vt.cols()),
        ));
    }
    check_feature_norms(&vs, "source")?;
    check_feature_norms(&vt, "target")?;
    let sim = tape.matmul_transposed(unit_rows(tape, fs)?, unit_rows(tape, ft)?)?;
    let m = tape.exp(tape.affine(sim, 1.0 / c.epsilon, -1.0 / c.epsilon)?)?;
    let ps = layers::points_of(&tape.value(hs.positions));
    let pt = layers::points_of(&tape.value(ht.positions));
    let mut mask = Vec::with_capacity(ps.len() * pt.len());
    let mut capped = false;
    for p in &ps {
        for q in &pt {
            let keep = geometry::distance(p, q) <= c.d_cap;
            capped |= !keep;
            mask.push(if keep { 1.0 } else { 0.0 });
        }
    }
    if capped {
        let mask = tape.constant(Array::matrix(ps.len(), pt.len(), mask)?);
        tape.mul(m, mask)
    } else {
        Ok(m)
    }
}

/// Correlation-weighted mean target position minus source position, per
/// coarse source point. Rows with zero total weight get zero flow; their
/// count is returned alongside.
fn global_flow_tape(tape: &Tape, m: Var, source_positions: Var, target_positions: Var) -> Result<(Var, usize)> {
    let mv = tape.value(m);
    let rows = mv.rows();
    let dead: Vec<bool> = (0..rows).map(|r| mv.row(r).iter().sum::<f64>() <= 0.0).collect();
    let dead_count = dead.iter().filter(|&&d| d).count();
    let weighted = tape.matmul(m, target_positions)?;
    let mut total = tape.row_sum(m)?;
    if dead_count > 0 {
        let pad = tape.constant(Array::column(dead.iter().map(|&d| if d { 1.0 } else { 0.0 }).collect()));
        total = tape.add(total, pad)?;
    }
    let ones = tape.constant(Array::filled(&[rows, 1], 1.0));
    let mean = tape.scale_rows(weighted, tape.div(ones, total)?)?;
    let mut flow = tape.sub(mean, source_positions)?;
    if dead_count > 0 {
        let live = tape.constant(Array::column(dead.iter().map(|&d| if d { 0.0 } else { 1.0 }).collect()));
        flow = tape.scale_rows(flow, live)?;
    }
    Ok((flow, dead_count))
}

fn upsample_tape(
    tape: &Tape,
    m: &BoundModel,
    coarse_flow: Var,
    coarse_positions: Var,
    local_s: &FeatureVars,
    full_positions: Var,
) -> Result<Var> {
    let coarse = FeatureVars {
        positions: coarse_positions,
        features: Some(coarse_flow),
    };
    let mid = set_up_conv(tape, &coarse, local_s.positions, local_s.features, &m.upsample1)?;
    let full = set_up_conv(tape, &mid, full_positions, None, &m.upsample2)?;
    Ok(full.features.expect("set_up_conv output has features"))
}

/// Per-iteration state shared by the refinement steps of one forward pass.
struct UpdateContext {
    source: Var,
    plan: SamplingPlan,
    local_t: FeatureVars,
    local_positions: Var,
    average_index: Vec<usize>,
    average_owner: Vec<usize>,
    average_weight: Vec<f64>,
}

impl UpdateContext {
    fn new(tape: &Tape, c: &ModelConfig, s: &PointSet, source: Var, plan: SamplingPlan, local_t: FeatureVars) -> Result<Self> {
        let local = plan.local_indices();
        let mut average_index = Vec::new();
        let mut average_owner = Vec::new();
        let mut average_weight = Vec::new();
        for (row, &center) in local.iter().enumerate() {
            let list = geometry::ball_single(&s.get(center), s.points(), c.local_radius, c.max_neighbors);
            for &j in &list {
                average_index.push(j);
                average_owner.push(row);
                average_weight.push(1.0 / list.len() as f64);
            }
        }
        Ok(Self {
            source,
            local_positions: tape.gather(source, &local)?,
            plan,
            local_t,
            average_index,
            average_owner,
            average_weight,
        })
    }
}

/// Flow increment, new flow and new hidden state of one refinement step.
struct StepOutput {
    flow: Var,
    increment: Var,
    hidden: Var,
    local_binding: usize,
}

fn update_step_tape(
    tape: &Tape,
    m: &BoundModel,
    ctx: &UpdateContext,
    flow_prev: Var,
    hidden_prev: Var,
    k: usize,
) -> Result<StepOutput> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "refinement steps start at k = 2 (got {k})"
        )));
    }
    let c = &m.config;
    let warped = tape.add(ctx.source, flow_prev)?;
    let local_k = encode_local(tape, m, warped, &ctx.plan)?;
    let embedding = flow_embedding(tape, &local_k, &ctx.local_t, c.embedding_radius, c.max_neighbors, &m.embedding)?;

    let flow_input = FeatureVars {
        positions: ctx.source,
        features: Some(flow_prev),
    };
    let motion1 = set_conv_at(tape, &flow_input, &ctx.plan.level1, c.local_radius, c.max_neighbors, &m.flow_enc1)?;
    let motion = set_conv_at(tape, &motion1, &ctx.plan.level2, c.encoder_radius, c.max_neighbors, &m.flow_enc2)?;

    let gathered = tape.gather(flow_prev, &ctx.average_index)?;
    let weights = tape.constant(Array::column(ctx.average_weight.clone()));
    let rows = ctx.plan.level2.len();
    let flow_coarse = tape.scatter_add(tape.scale_rows(gathered, weights)?, &ctx.average_owner, rows)?;

    let x = tape.concat(&[
        local_k.features.expect("encoder output has features"),
        embedding.features.expect("embedding output has features"),
        flow_coarse,
        motion.features.expect("flow encoder output has features"),
    ])?;
    let hidden = gru_cell(tape, hidden_prev, x, &m.gru)?;

    let centers = all_indices(rows);
    let state = FeatureVars {
        positions: ctx.local_positions,
        features: Some(hidden),
    };
    let r1 = set_conv_at(tape, &state, &centers, c.hidden_radius, c.max_neighbors, &m.regressor1)?;
    let r2 = set_conv_at(tape, &r1, &centers, c.hidden_radius, c.max_neighbors, &m.regressor2)?;
    let raw = set_up_conv(tape, &r2, ctx.source, None, &m.regressor_up)?
        .features
        .expect("set_up_conv output has features");
    let increment = tape.affine(raw, c.increment_scale(k), 0.0)?;
    Ok(StepOutput {
        flow: tape.add(flow_prev, increment)?,
        increment,
        hidden,
        local_binding: m.local1.identity(),
    })
}

/// Everything a forward pass leaves on the tape.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `F_1..F_K`, each `n₁ x 3`.
    pub flows: Vec<Var>,
    /// Scaled increments `ΔF_2..ΔF_K`.
    pub increments: Vec<Var>,
    /// Hidden states `h_1..h_K`.
    pub hidden: Vec<Var>,
    pub correlation: CorrelationMatrix,
    /// Coarse source rows whose correlation weights were all zero.
    pub zero_correlation_rows: usize,
    /// Identity of the local encoder weights used for S, T and each warped S.
    pub local_encoder_bindings: Vec<usize>,
}

/// Runs `iterations` flow estimates on the tape.
pub fn forward_on_tape(
    tape: &Tape,
    m: &BoundModel,
    s: &PointSet,
    t: &PointSet,
    iterations: usize,
) -> Result<ForwardTrace> {
    if iterations == 0 {
        return Err(Error::InvalidArgument("iterations must be >= 1".into()));
    }
    let c = &m.config;
    let s_plan = SamplingPlan::new(s, c, c.sampling_seed)?;
    let t_plan = SamplingPlan::new(t, c, c.sampling_seed.wrapping_add(1))?;
    let s_pos = positions_constant(tape, s);
    let t_pos = positions_constant(tape, t);

    let local_s = encode_local(tape, m, s_pos, &s_plan)?;
    let local_t = encode_local(tape, m, t_pos, &t_plan)?;
    let mut bindings = vec![m.local1.identity(), m.local1.identity()];
    let global_s = encode_global(tape, m, &local_s, &s_plan)?;
    let global_t = encode_global(tape, m, &local_t, &t_plan)?;

    let corr = correlation_tape(tape, c, &global_s, &global_t)?;
    let (coarse_flow, dead) = global_flow_tape(tape, corr, global_s.positions, global_t.positions)?;
    let correlation = CorrelationMatrix {
        values: (*tape.value(corr)).clone(),
        source_positions: PointSet::from_flat(tape.value(global_s.positions).data())?,
        target_positions: PointSet::from_flat(tape.value(global_t.positions).data())?,
    };
    let first = upsample_tape(tape, m, coarse_flow, global_s.positions, &local_s, s_pos)?;
    let mut hidden = init_hidden_tape(tape, m, &local_s)?;

    let mut flows = vec![first];
    let mut hidden_states = vec![hidden];
    let mut increments = Vec::new();
    if iterations > 1 {
        let ctx = UpdateContext::new(tape, c, s, s_pos, s_plan, local_t)?;
        for k in 2..=iterations {
            let step = update_step_tape(tape, m, &ctx, *flows.last().unwrap(), hidden, k)?;
            hidden = step.hidden;
            bindings.push(step.local_binding);
            flows.push(step.flow);
            increments.push(step.increment);
            hidden_states.push(hidden);
        }
    }
    Ok(ForwardTrace {
        flows,
        increments,
        hidden: hidden_states,
        correlation,
        zero_correlation_rows: dead,
        local_encoder_bindings: bindings,
    })
}

pub(crate) fn flow_of(tape: &Tape, v: Var) -> Result<FlowField> {
    FlowField::from_flat(tape.value(v).data())
}

/// Predicts the flow sequence `F_1..F_K`.
pub fn forward(params: &ModelParameters, s: &PointSet, t: &PointSet, iterations: usize) -> Result<FlowSequence> {
    let tape = Tape::new();
    let m = params.bind(&tape);
    let trace = forward_on_tape(&tape, &m, s, t, iterations)?;
    let flows = trace.flows.iter().map(|&v| flow_of(&tape, v)).collect::<Result<Vec<_>>>()?;
    FlowSequence::new(flows)
}

/// Two local set_convs; resolution `n′`, width `d_local`.
pub fn local_encode(points: &PointSet, params: &ModelParameters) -> Result<FeatureMap> {
    let c = params.config();
    let plan = SamplingPlan::new(points, c, c.sampling_seed)?;
    let tape = Tape::new();
    let m = params.bind(&tape);
    encode_local(&tape, &m, positions_constant(&tape, points), &plan)?.read(&tape)
}

/// Global set_convs on top of a local feature map; resolution `n″`.
pub fn global_encode(local: &FeatureMap, params: &ModelParameters) -> Result<FeatureMap> {
    let c = params.config();
    if c.n_global > local.len() {
        return Err(Error::SampleCount {
            requested: c.n_global,
            available: local.len(),
        });
    }
    let tape = Tape::new();
    let m = params.bind(&tape);
    let input = local.constant(&tape);
    let g1 = geometry::furthest_point_sampling(&local.positions, (2 * c.n_global).min(local.len()), c.sampling_seed)?;
    let g2 = geometry::furthest_point_sampling(&local.positions.select(&g1), c.n_global, c.sampling_seed)?;
    let plan = SamplingPlan {
        level1: Vec::new(),
        level2: Vec::new(),
        global1: g1,
        global2: g2,
    };
    encode_global(&tape, &m, &input, &plan)?.read(&tape)
}

/// `M_ij = exp((cos(h_i, h_j) - 1) / ε)`, zeroed beyond `d_cap`.
pub fn correlation_matrix(hs: &FeatureMap, ht: &FeatureMap, epsilon: f64, d_cap: f64) -> Result<CorrelationMatrix> {
    let config = ModelConfig {
        epsilon,
        d_cap,
        ..ModelConfig::default()
    };
    config.validate()?;
    let tape = Tape::new();
    let m = correlation_tape(&tape, &config, &hs.constant(&tape), &ht.constant(&tape))?;
    Ok(CorrelationMatrix {
        values: (*tape.value(m)).clone(),
        source_positions: hs.positions.clone(),
        target_positions: ht.positions.clone(),
    })
}

/// Coarse flow from a correlation matrix and the number of all-zero rows.
pub fn global_flow(m: &CorrelationMatrix) -> Result<(FlowField, usize)> {
    let (rows, cols) = (m.values.rows(), m.values.cols());
    if rows != m.source_positions.len() || cols != m.target_positions.len() {
        return Err(Error::shape(
            "global_flow",
            format!(
                "matrix {rows}x{cols} for {} source and {} target points",
                m.source_positions.len(),
                m.target_positions.len()
            ),
        ));
    }
    if m.values.data().iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::InvalidArgument("correlation weights must be nonnegative".into()));
    }
    let tape = Tape::new();
    let mv = tape.constant(m.values.clone());
    let sp = positions_constant(&tape, &m.source_positions);
    let tp = positions_constant(&tape, &m.target_positions);
    let (flow, dead) = global_flow_tape(&tape, mv, sp, tp)?;
    Ok((flow_of(&tape, flow)?, dead))
}

/// Regresses `F_1` at full resolution from the coarse flow, using the local
/// source features as skip input.
pub fn upsample_global_flow(
    coarse_flow: &FlowField,
    coarse_positions: &PointSet,
    local_s: &FeatureMap,
    full_positions: &PointSet,
    params: &ModelParameters,
) -> Result<FlowField> {
    if coarse_flow.len() != coarse_positions.len() {
        return Err(Error::CountMismatch {
            what: "coarse flow",
            expected: coarse_positions.len(),
            found: coarse_flow.len(),
        });
    }
    let tape = Tape::new();
    let m = params.bind(&tape);
    let cf = tape.constant(Array::matrix(coarse_flow.len(), 3, coarse_flow.flat())?);
    let out = upsample_tape(
        &tape,
        &m,
        cf,
        positions_constant(&tape, coarse_positions),
        &local_s.constant(&tape),
        positions_constant(&tape, full_positions),
    )?;
    flow_of(&tape, out)
}

/// Initial hidden state from the local source features.
pub fn init_hidden(local_s: &FeatureMap, params: &ModelParameters) -> Result<Array> {
    let tape = Tape::new();
    let m = params.bind(&tape);
    let h = init_hidden_tape(&tape, &m, &local_s.constant(&tape))?;
    Ok((*tape.value(h)).clone())
}

/// One refinement step `k >= 2`: returns `F_k` and `h_k`.
pub fn local_update_step(
    s: &PointSet,
    local_t: &FeatureMap,
    flow_prev: &FlowField,
    hidden_prev: &Array,
    k: usize,
    params: &ModelParameters,
) -> Result<(FlowField, Array)> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "refinement steps start at k = 2 (got {k})"
        )));
    }
    if flow_prev.len() != s.len() {
        return Err(Error::CountMismatch {
            what: "previous flow",
            expected: s.len(),
            found: flow_prev.len(),
        });
    }
    let c = params.config();
    let tape = Tape::new();
    let m = params.bind(&tape);
    let plan = SamplingPlan::new(s, c, c.sampling_seed)?;
    let source = positions_constant(&tape, s);
    let ctx = UpdateContext::new(&tape, c, s, source, plan, local_t.constant(&tape))?;
    let f = tape.constant(Array::matrix(s.len(), 3, flow_prev.flat())?);
    let h = tape.constant(hidden_prev.clone());
    let step = update_step_tape(&tape, &m, &ctx, f, h, k)?;
    Ok((flow_of(&tape, step.flow)?, (*tape.value(step.hidden)).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            n_local: 16,
            n_global: 4,
            d_local: 8,
            d_global: 8,
            d_corr: 6,
            d_motion: 4,
            d_hidden: 6,
            local_radius: 0.35,
            encoder_radius: 0.5,
            global_radius: 0.9,
            embedding_radius: 0.5,
            hidden_radius: 0.5,
            max_neighbors: 8,
            ..ModelConfig::default()
        }
    }

    fn cloud(n: usize, seed: u64) -> PointSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointSet::new((0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect()).unwrap()
    }

    fn shifted(s: &PointSet, d: [f64; 3]) -> PointSet {
        PointSet::new(s.points().iter().map(|p| [p[0] + d[0], p[1] + d[1], p[2] + d[2]]).collect()).unwrap()
    }

    fn feature_map(points: Vec<[f64; 3]>, feats: Vec<Vec<f64>>) -> FeatureMap {
        let w = feats[0].len();
        let n = feats.len();
        FeatureMap::new(
            PointSet::new(points).unwrap(),
            Array::matrix(n, w, feats.into_iter().flatten().collect()).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn correlation_examples() {
        let hs = feature_map(vec![[0.0; 3]], vec![vec![1.0, 0.0]]);
        let angle = 0.97f64.acos();
        let ht = feature_map(
            vec![[0.1, 0.0, 0.0], [0.2, 0.0, 0.0], [20.0, 0.0, 0.0]],
            vec![vec![2.0, 0.0], vec![angle.cos(), angle.sin()], vec![1.0, 0.0]],
        );
        let m = correlation_matrix(&hs, &ht, 0.03, 10.0).unwrap();
        assert_eq!(m.get(0, 0), 1.0);
        assert!((m.get(0, 1) - (-1.0f64).exp()).abs() < 1e-12);
        assert_eq!(m.get(0, 2), 0.0);
        let zero = feature_map(vec![[0.0; 3]], vec![vec![0.0, 0.0]]);
        assert!(matches!(
            correlation_matrix(&zero, &ht, 0.03, 10.0),
            Err(Error::DegenerateFeature { .. })
        ));
    }

    #[test]
    fn global_flow_examples() {
        let src = PointSet::new(vec![[0.0; 3], [5.0, 5.0, 5.0]]).unwrap();
        let tgt = PointSet::new(vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        let m = CorrelationMatrix {
            values: Array::matrix(2, 2, vec![3.0, 1.0, 0.0, 0.0]).unwrap(),
            source_positions: src,
            target_positions: tgt,
        };
        let (f, dead) = global_flow(&m).unwrap();
        let expected = [0.75, 0.25, 0.0];
        for a in 0..3 {
            assert!((f.get(0)[a] - expected[a]).abs() < 1e-12);
        }
        assert_eq!(f.get(1), [0.0; 3]);
        assert_eq!(dead, 1);
    }

    #[test]
    fn forward_sequence_lengths_and_shared_encoder() {
        let config = small_config();
        let params = ModelParameters::new(config, 3).unwrap();
        let s = cloud(40, 1);
        let t = shifted(&cloud(36, 2), [0.05, 0.0, 0.0]);
        for k in [1, 3, 6] {
            let tape = Tape::new();
            let m = params.bind(&tape);
            let trace = forward_on_tape(&tape, &m, &s, &t, k).unwrap();
            assert_eq!(trace.flows.len(), k);
            assert_eq!(trace.local_encoder_bindings.len(), k + 1);
            assert!(trace.local_encoder_bindings.iter().all(|&b| b == m.local1.identity()));
            for (i, inc) in trace.increments.iter().enumerate() {
                let prev = tape.value(trace.flows[i]);
                let next = tape.value(trace.flows[i + 1]);
                let inc = tape.value(*inc);
                for j in 0..prev.len() {
                    assert!((next.data()[j] - prev.data()[j] - inc.data()[j]).abs() < 1e-15);
                }
            }
            for h in &trace.hidden {
                assert!(tape.value(*h).data().iter().all(|v| v.abs() <= 1.0));
            }
            assert_eq!(trace.correlation.entry_count(), 16);
        }
    }

    #[test]
    fn zero_regressor_keeps_flow() {
        let config = small_config();
        let mut params = ModelParameters::new(config.clone(), 4).unwrap();
        params.regressor_up = LayerParams::zeros("regressor_up", &[config.d_motion, config.d_motion, 3], Activation::Identity);
        let s = cloud(40, 5);
        let t = shifted(&s, [0.1, 0.0, 0.0]);
        let seq = forward(&params, &s, &t, 4).unwrap();
        for f in &seq.flows()[1..] {
            assert_eq!(f, &seq.flows()[0]);
        }
    }

    #[test]
    fn increment_scale_values() {
        let c = ModelConfig::default();
        assert_eq!(c.increment_scale(2), 0.5);
        assert!((c.increment_scale(3) - 1.0 / 3.0).abs() < 1e-15);
        let c0 = ModelConfig {
            flow_scale: 0.0,
            ..c
        };
        assert_eq!(c0.increment_scale(7), 1.0);
    }

    #[test]
    fn update_step_scale_is_applied() {
        let base = small_config();
        let params = ModelParameters::new(base.clone(), 9).unwrap();
        let mut unscaled = params.clone();
        unscaled.config.flow_scale = 0.0;
        let s = cloud(40, 6);
        let local_t = local_encode(&shifted(&s, [0.1, 0.0, 0.0]), &params).unwrap();
        let f = FlowField::new(vec![[0.05, 0.0, 0.0]; 40]).unwrap();
        let h = Array::filled(&[base.n_local, base.d_hidden], 0.1);
        for k in [2usize, 3] {
            let (fk, _) = local_update_step(&s, &local_t, &f, &h, k, &params).unwrap();
            let (f1, _) = local_update_step(&s, &local_t, &f, &h, k, &unscaled).unwrap();
            for (a, (b, p)) in fk.vectors().iter().zip(f1.vectors().iter().zip(f.vectors())) {
                for d in 0..3 {
                    let want = (b[d] - p[d]) / k as f64;
                    assert!(((a[d] - p[d]) - want).abs() < 1e-14);
                }
            }
        }
        assert!(local_update_step(&s, &local_t, &f, &h, 1, &params).is_err());
    }

    #[test]
    fn zero_parameters_give_zero_outputs() {
        let config = small_config();
        let zero = ModelParameters::zeros(config.clone()).unwrap();
        let s = cloud(40, 7);
        let local = local_encode(&s, &zero).unwrap();
        assert_eq!(local.len(), config.n_local);
        assert!(local.features.data().iter().all(|&v| v == 0.0));
        assert!(init_hidden(&local, &zero).unwrap().data().iter().all(|&v| v == 0.0));
        let coarse = FlowField::new(vec![[0.3, -0.1, 0.2]; 4]).unwrap();
        let f1 = upsample_global_flow(&coarse, &s.select(&[0, 1, 2, 3]), &local, &s, &zero).unwrap();
        assert!(f1.vectors().iter().all(|v| *v == [0.0; 3]));
    }

    #[test]
    fn identity_upsampler_copies_constant_flow() {
        let config = small_config();
        let mut p = ModelParameters::zeros(config.clone()).unwrap();
        let d = config.d_local;
        // upsample1: units 2a / 2a+1 carry +flow_a / -flow_a through the relus.
        {
            let dense = p.upsample1.dense_mut();
            for a in 0..3 {
                dense[0].weight.data_mut()[a * d + 2 * a] = 1.0;
                dense[0].weight.data_mut()[a * d + 2 * a + 1] = -1.0;
            }
            for u in 0..6 {
                dense[1].weight.data_mut()[u * d + u] = 1.0;
            }
        }
        {
            let dense = p.upsample2.dense_mut();
            for u in 0..6 {
                dense[0].weight.data_mut()[u * d + u] = 1.0;
            }
            for a in 0..3 {
                dense[1].weight.data_mut()[(2 * a) * 3 + a] = 1.0;
                dense[1].weight.data_mut()[(2 * a + 1) * 3 + a] = -1.0;
            }
        }
        let s = cloud(40, 8);
        let local = local_encode(&s, &p).unwrap();
        let c = [0.3, -0.1, 0.2];
        let coarse = FlowField::new(vec![c; 4]).unwrap();
        let f1 = upsample_global_flow(&coarse, &s.select(&[0, 9, 18, 27]), &local, &s, &p).unwrap();
        for v in f1.vectors() {
            for a in 0..3 {
                assert!((v[a] - c[a]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn named_arrays_roundtrip() {
        let config = small_config();
        let a = ModelParameters::new(config.clone(), 1).unwrap();
        let mut b = ModelParameters::new(config, 2).unwrap();
        assert_ne!(a, b);
        let named: Vec<(String, Array)> = a.named_arrays().into_iter().map(|(n, x)| (n, x.clone())).collect();
        b.load_named(&named).unwrap();
        assert_eq!(a, b);
        let mut bad = named.clone();
        bad.pop();
        assert!(b.load_named(&bad).is_err());
    }

    #[test]
    fn config_validation() {
        let c = ModelConfig {
            n_global: 100,
            ..ModelConfig::default()
        };
        assert!(ModelParameters::new(c, 0).is_err());
        let c = ModelConfig {
            epsilon: 0.0,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
        let s = cloud(10, 0);
        assert!(local_encode(&s, &ModelParameters::new(ModelConfig::default(), 0).unwrap()).is_err());
    }
}
