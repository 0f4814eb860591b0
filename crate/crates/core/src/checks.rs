//! Finite-difference gradient checks for every layer, every loss and the
//! whole model. Shared by the `gradcheck` command and the test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_difference_check, Array, Coordinates, GradientReport, Tape, Var};
use crate::error::Result;
use crate::geometry::{self, FlowField, PointSet};
use crate::layers::{
    flow_embedding, gru_cell, set_conv, set_up_conv, Activation, FeatureVars, GruParams, LayerParams,
};
use crate::model::{forward_on_tape, ModelConfig, ModelParameters};
use crate::objectives::{tape_chamfer, tape_l1, tape_laplacian, tape_sequence_loss, DataTerm, LossWeights};
use crate::synthetic::{generate, SceneRecipe};

pub const FD_STEP: f64 = 1e-5;
pub const LAYER_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;
/// Coordinates perturbed per parameter array in the whole-model check.
pub const MODEL_COORDINATES_PER_ARRAY: usize = 2;

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array {
    Array::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Array {
    Array::matrix(n, 3, (0..n * 3).map(|_| rng.gen::<f64>()).collect()).unwrap()
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output entry matters.
fn project(tape: &Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = Array::new(shape.clone(), (0..shape.iter().product()).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    tape.sum(tape.mul(out, tape.constant(r))?)
}

fn with_layer(mut params: Vec<Array>, layer: &LayerParams) -> Vec<Array> {
    params.extend(layer.named_arrays().into_iter().map(|(_, a)| a.clone()));
    params
}

fn check(f: impl Fn(&Tape, &[Var]) -> Result<Var>, params: &[Array], tol: f64) -> Result<GradientReport> {
    finite_difference_check(f, params, FD_STEP, tol, Coordinates::All)
}

/// Checks set_conv, set_up_conv, flow_embedding, gru_cell and the three
/// losses at random points drawn from `seed`.
pub fn layer_checks(seed: u64) -> Result<Vec<(String, GradientReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let layer = LayerParams::uniform("set_conv", &[6, 8, 5], Activation::Relu, &mut rng);
    let params = with_layer(vec![cloud(&mut rng, 24), uniform(&mut rng, 24, 3, 1.0)], &layer);
    let report = check(
        |t, p| {
            let input = FeatureVars {
                positions: p[0],
                features: Some(p[1]),
            };
            let out = set_conv(t, &input, 8, 0.5, 6, &layer.bind_vars(&p[2..])?, seed)?;
            project(t, out.features.unwrap(), seed)
        },
        &params,
        LAYER_TOLERANCE,
    )?;
    out.push(("set_conv".to_string(), report));

    let layer = LayerParams::uniform("set_up_conv", &[6, 7, 3], Activation::Identity, &mut rng);
    let coarse_pos = cloud(&mut rng, 6);
    let fine_pos = cloud(&mut rng, 15);
    let params = with_layer(vec![uniform(&mut rng, 6, 4, 1.0), uniform(&mut rng, 15, 2, 1.0)], &layer);
    let report = check(
        |t, p| {
            let coarse = FeatureVars {
                positions: t.constant(coarse_pos.clone()),
                features: Some(p[0]),
            };
            let fine = t.constant(fine_pos.clone());
            let out = set_up_conv(t, &coarse, fine, Some(p[1]), &layer.bind_vars(&p[2..])?)?;
            project(t, out.features.unwrap(), seed)
        },
        &params,
        LAYER_TOLERANCE,
    )?;
    out.push(("set_up_conv".to_string(), report));

    let layer = LayerParams::uniform("flow_embedding", &[9, 8, 6], Activation::Relu, &mut rng);
    let params = with_layer(
        vec![
            cloud(&mut rng, 10),
            uniform(&mut rng, 10, 3, 1.0),
            cloud(&mut rng, 12),
            uniform(&mut rng, 12, 3, 1.0),
        ],
        &layer,
    );
    let report = check(
        |t, p| {
            let a = FeatureVars {
                positions: p[0],
                features: Some(p[1]),
            };
            let b = FeatureVars {
                positions: p[2],
                features: Some(p[3]),
            };
            let out = flow_embedding(t, &a, &b, 0.5, 6, &layer.bind_vars(&p[4..])?)?;
            project(t, out.features.unwrap(), seed)
        },
        &params,
        LAYER_TOLERANCE,
    )?;
    out.push(("flow_embedding".to_string(), report));

    let gru = GruParams::uniform("gru", 4, 5, &mut rng);
    let mut params = vec![uniform(&mut rng, 7, 4, 1.0), uniform(&mut rng, 7, 5, 1.0)];
    for l in gru.layers() {
        params = with_layer(params, l);
    }
    let report = check(
        |t, p| {
            let [u, r, c] = gru.layers();
            let (nu, nr) = (u.array_count(), r.array_count());
            let bound = crate::layers::BoundGru {
                update: u.bind_vars(&p[2..2 + nu])?,
                reset: r.bind_vars(&p[2 + nu..2 + nu + nr])?,
                candidate: c.bind_vars(&p[2 + nu + nr..])?,
            };
            let h = gru_cell(t, p[0], p[1], &bound)?;
            project(t, h, seed)
        },
        &params,
        LAYER_TOLERANCE,
    )?;
    out.push(("gru_cell".to_string(), report));

    let s = PointSet::from_flat(cloud(&mut rng, 14).data())?;
    let target = PointSet::from_flat(cloud(&mut rng, 11).data())?;
    let gt = FlowField::from_flat(uniform(&mut rng, 14, 3, 0.3).data())?;
    let nbrs = geometry::regularization_neighborhood(&s, 3, 3, 0.5, seed)?;
    let flow = uniform(&mut rng, 14, 3, 0.3);
    let s_arr = Array::matrix(s.len(), 3, s.flat())?;
    let report = check(
        |t, p| tape_chamfer(t, t.add(t.constant(s_arr.clone()), p[0])?, &target, false),
        &[flow.clone()],
        LAYER_TOLERANCE,
    )?;
    out.push(("chamfer".to_string(), report));
    let report = check(|t, p| tape_laplacian(t, p[0], &nbrs), &[flow.clone()], LAYER_TOLERANCE)?;
    out.push(("laplacian".to_string(), report));
    let report = check(|t, p| tape_l1(t, p[0], &gt), &[flow], LAYER_TOLERANCE)?;
    out.push(("l1".to_string(), report));
    Ok(out)
}

/// Self-supervised sequence loss of the default-size model on a generated
/// scene, checked on [`MODEL_COORDINATES_PER_ARRAY`] random coordinates of
/// every parameter array.
pub fn model_check(seed: u64) -> Result<GradientReport> {
    let scene = generate(&SceneRecipe {
        dropout: 0.1,
        seed,
        ..SceneRecipe::default()
    })?;
    let params = ModelParameters::new(ModelConfig::default(), seed)?;
    let iterations = 3;
    let nbrs = geometry::regularization_neighborhood(&scene.source, 4, 8, 0.25, seed)?;
    let weights = LossWeights::constant(iterations, 1.0, 1.0)?;
    finite_difference_check(
        |t, p| {
            let m = params.bind_vars(p)?;
            let trace = forward_on_tape(t, &m, &scene.source, &scene.target, iterations)?;
            let data = DataTerm::Chamfer {
                target: &scene.target,
                normalize: false,
            };
            tape_sequence_loss(t, &scene.source, &trace.flows, data, &weights, &nbrs)
        },
        &params.arrays(),
        FD_STEP,
        MODEL_TOLERANCE,
        Coordinates::PerParam {
            count: MODEL_COORDINATES_PER_ARRAY,
            seed,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_and_loss_checks_pass() {
        for (name, report) in layer_checks(0).unwrap() {
            assert!(report.passed, "{name}: {report}");
        }
    }
}
