//! Synthetic data recipes: class-conditional Gaussians with configurable
//! mean layout and covariance family, so every experiment can run with zero
//! external files.

use crate::config::SyntheticRecipe;
use crate::error::{HarnessError, Result};
use ghofl_core::datamodel::LabeledEmbeddingSet;
use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

/// Class means for the recipe's layout.
pub fn class_means(recipe: &SyntheticRecipe) -> Result<Array2<f64>> {
    let c = recipe.classes;
    let d = recipe.dim;
    let sep = recipe.means.separation;
    let mut means = Array2::<f64>::zeros((c, d));
    match recipe.means.layout.as_str() {
        "simplex" => {
            // Centered regular simplex in the first C coordinates.
            for i in 0..c {
                for j in 0..c {
                    means[[i, j]] = sep * (f64::from(i == j) - 1.0 / c as f64);
                }
            }
        }
        "axis" => {
            // Means spaced `sep` apart along the first coordinate, centered.
            for i in 0..c {
                means[[i, 0]] = sep * (i as f64 - (c as f64 - 1.0) / 2.0);
            }
        }
        other => return Err(HarnessError::Config(format!("unknown mean layout '{other}'"))),
    }
    Ok(means)
}

/// Per-class, per-dimension standard deviations.
fn class_stds(recipe: &SyntheticRecipe, rng: &mut ChaCha12Rng) -> Result<Array2<f64>> {
    let c = recipe.classes;
    let d = recipe.dim;
    Ok(match recipe.covariance.family.as_str() {
        "identity" => Array2::from_elem((c, d), 1.0),
        "isotropic" => {
            let vars = recipe
                .covariance
                .variances
                .as_ref()
                .ok_or_else(|| HarnessError::Config("isotropic needs `variances`".into()))?;
            let mut stds = Array2::<f64>::zeros((c, d));
            for (cl, &v) in vars.iter().enumerate() {
                stds.row_mut(cl).fill(v.sqrt());
            }
            stds
        }
        "anisotropic" => {
            let (lo, hi) = recipe
                .covariance
                .scale_range
                .ok_or_else(|| HarnessError::Config("anisotropic needs `scale_range`".into()))?;
            Array2::from_shape_fn((c, d), |_| {
                let u: f64 = rng.random();
                (lo + u * (hi - lo)).sqrt()
            })
        }
        other => {
            return Err(HarnessError::Config(format!(
                "unknown covariance family '{other}'"
            )))
        }
    })
}

fn draw_split(
    recipe: &SyntheticRecipe,
    means: &Array2<f64>,
    stds: &Array2<f64>,
    per_class: usize,
    rng: &mut ChaCha12Rng,
) -> LabeledEmbeddingSet {
    let c = recipe.classes;
    let d = recipe.dim;
    let n = c * per_class;
    let mut features = Array2::<f64>::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    for cl in 0..c {
        for i in 0..per_class {
            let row = cl * per_class + i;
            for j in 0..d {
                let g: f64 = rng.sample(StandardNormal);
                features[[row, j]] = means[[cl, j]] + stds[[cl, j]] * g;
            }
            labels.push(cl as u32);
        }
    }
    LabeledEmbeddingSet::new(features, labels, c).expect("recipe output is valid by construction")
}

/// Generate the train and test splits of a recipe. Deterministic in the
/// recipe seed; the test split uses an independent derived stream.
pub fn generate(recipe: &SyntheticRecipe) -> Result<(LabeledEmbeddingSet, LabeledEmbeddingSet)> {
    crate::config::validate_recipe(recipe)?;
    let means = class_means(recipe)?;
    let mut cov_rng = ChaCha12Rng::seed_from_u64(ghofl_core::prng::split(recipe.seed, 0xC0F));
    let stds = class_stds(recipe, &mut cov_rng)?;
    let mut train_rng = ChaCha12Rng::seed_from_u64(ghofl_core::prng::split(recipe.seed, 1));
    let mut test_rng = ChaCha12Rng::seed_from_u64(ghofl_core::prng::split(recipe.seed, 2));
    let train = draw_split(recipe, &means, &stds, recipe.train_per_class, &mut train_rng);
    let test = draw_split(recipe, &means, &stds, recipe.test_per_class, &mut test_rng);
    Ok((train, test))
}
