//! Held-out behaviour of the refinement steps of a trained model.

use flowstep::geometry;
use flowstep::objectives::chamfer;
use flowstep::synthetic::{generate_set, SceneRecipe};
use flowstep::train::{self, infer, OptimizerKind, TrainConfig};

#[test]
fn refinement_reduces_chamfer_on_most_held_out_scenes() {
    let recipe = SceneRecipe {
        dropout: 0.1,
        seed: 1000,
        ..SceneRecipe::default()
    };
    let mut scenes = generate_set(&recipe, 64).unwrap();
    let held_out = scenes.split_off(48);
    let config = TrainConfig {
        optimizer: OptimizerKind::Adam,
        ..TrainConfig::default()
    };
    let params = train::train(&config, &scenes, None).unwrap().checkpoint.params;
    let mut pairs = Vec::new();
    for scene in &held_out {
        let flows = infer(&params, scene, 4).unwrap();
        let at = |k: usize| chamfer(&geometry::warp(&scene.source, &flows.flows()[k]).unwrap(), &scene.target);
        pairs.push((at(0), at(3)));
    }
    let improved = pairs.iter().filter(|(first, last)| last <= first).count();
    assert!(
        10 * improved >= 9 * held_out.len(),
        "chamfer(S_4, T) <= chamfer(S_1, T) on {improved}/{} scenes: {pairs:?}",
        held_out.len()
    );
}
