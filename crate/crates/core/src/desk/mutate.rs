//! Seeded neuron randomization.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::DeskModel;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "layer")]
pub enum MutationTarget {
    /// Every encoder layer.
    Encoder,
    /// Every head layer.
    Head,
    Layer(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MutationSpec {
    pub target: MutationTarget,
    /// Neurons replaced in each targeted layer.
    pub n_neurons: usize,
    pub seed: u64,
    /// Half-width of the uniform replacement range; defaults to three times
    /// the standard deviation of the layer's weights.
    #[serde(default)]
    pub range: Option<f64>,
}

/// One randomized neuron.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MutatedNeuron {
    pub layer: usize,
    pub neuron: usize,
}

fn weight_std<T: Scalar>(w: &[T]) -> f64 {
    let n = w.len() as f64;
    let mean = w.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / n;
    (w.iter().map(|v| (v.to_f64_lossy() - mean).powi(2)).sum::<f64>() / n).sqrt()
}

impl MutationSpec {
    pub fn layers<T: Scalar>(&self, model: &DeskModel<T>) -> Result<Vec<usize>> {
        match self.target {
            MutationTarget::Encoder => Ok((0..model.split_index).collect()),
            MutationTarget::Head => Ok((model.split_index..model.layers.len()).collect()),
            MutationTarget::Layer(l) if l < model.layers.len() => Ok(vec![l]),
            MutationTarget::Layer(l) => {
                Err(Error::Config(format!("layer {l} out of range for a {}-layer model", model.layers.len())))
            }
        }
    }

    /// Returns the mutated copy and the list of randomized neurons. The
    /// original model is untouched.
    pub fn apply<T: Scalar>(&self, model: &DeskModel<T>) -> Result<(DeskModel<T>, Vec<MutatedNeuron>)> {
        if let Some(r) = self.range {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::Config("mutation range must be positive".into()));
            }
        }
        let layers = self.layers(model)?;
        for &l in &layers {
            let width = model.layers[l].width();
            if self.n_neurons > width {
                return Err(Error::Config(format!("cannot mutate {} neurons of a {width}-wide layer {l}", self.n_neurons)));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut out = model.clone();
        let mut touched = Vec::new();
        for l in layers {
            let layer = &mut out.layers[l];
            let r = self.range.unwrap_or_else(|| 3.0 * weight_std(layer.weights.data()));
            let r = if r > 0.0 { r } else { 1.0 };
            let mut neurons = sample(&mut rng, layer.width(), self.n_neurons).into_vec();
            neurons.sort_unstable();
            for &n in &neurons {
                for w in layer.weights.row_mut(n) {
                    *w = T::from_f64_lossy(rng.random_range(-r..=r));
                }
                layer.bias[n] = T::from_f64_lossy(rng.random_range(-r..=r));
                touched.push(MutatedNeuron { layer: l, neuron: n });
            }
        }
        Ok((out, touched))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> DeskModel<f64> {
        DeskModel::init(&[4, 6, 6, 3], 2, 1).unwrap()
    }

    #[test]
    fn head_mutation_leaves_encoder_untouched() {
        let m = model();
        let spec = MutationSpec { target: MutationTarget::Head, n_neurons: 2, seed: 3, range: None };
        let (mutated, touched) = spec.apply(&m).unwrap();
        assert_eq!(touched.len(), 2);
        assert!(touched.iter().all(|t| t.layer == 2));
        assert_eq!(mutated.layers[..2], m.layers[..2]);
        assert_ne!(mutated.layers[2], m.layers[2]);
        let x = [0.3, -0.1, 0.8, 0.2];
        assert_eq!(mutated.encode(&x).unwrap(), m.encode(&x).unwrap());
    }

    #[test]
    fn only_selected_rows_change() {
        let m = model();
        let spec = MutationSpec { target: MutationTarget::Encoder, n_neurons: 3, seed: 4, range: Some(0.5) };
        let (mutated, touched) = spec.apply(&m).unwrap();
        assert_eq!(touched.len(), 6);
        for l in 0..2 {
            for r in 0..m.layers[l].width() {
                let hit = touched.contains(&MutatedNeuron { layer: l, neuron: r });
                let same = mutated.layers[l].weights.row(r) == m.layers[l].weights.row(r);
                assert_eq!(hit, !same);
                if hit {
                    assert!(mutated.layers[l].weights.row(r).iter().all(|w| w.abs() <= 0.5));
                }
            }
        }
        assert_eq!(mutated.layers[2], m.layers[2]);
    }

    #[test]
    fn mutation_is_seeded() {
        let m = model();
        let spec = MutationSpec { target: MutationTarget::Layer(1), n_neurons: 2, seed: 9, range: None };
        assert_eq!(spec.apply(&m).unwrap(), spec.apply(&m).unwrap());
        let other = MutationSpec { seed: 10, ..spec.clone() };
        assert_ne!(spec.apply(&m).unwrap().0, other.apply(&m).unwrap().0);
    }

    #[test]
    fn oversized_mutation_is_rejected() {
        let m = model();
        let spec = MutationSpec { target: MutationTarget::Head, n_neurons: 4, seed: 0, range: None };
        assert!(matches!(spec.apply(&m), Err(Error::Config(_))));
        let spec = MutationSpec { target: MutationTarget::Layer(7), n_neurons: 1, seed: 0, range: None };
        assert!(spec.apply(&m).is_err());
    }

    #[test]
    fn zero_neurons_is_identity() {
        let m = model();
        let spec = MutationSpec { target: MutationTarget::Encoder, n_neurons: 0, seed: 5, range: None };
        let (mutated, touched) = spec.apply(&m).unwrap();
        assert!(touched.is_empty());
        assert_eq!(mutated, m);
    }
}
