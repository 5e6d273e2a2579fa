//! Synthetic desk: a world with known concepts, a trainable classifier, and
//! the mutation and attack tools used to inject errors.

pub mod attack;
pub mod model;
pub mod mutate;
pub mod train;
pub mod world;

pub use attack::{attack, attack_rows, perturbation_norm, Adversarial, AttackKind, AttackSpec};
pub use model::{load_model, save_model, Activation, DeskModel, Layer};
pub use mutate::{MutatedNeuron, MutationSpec, MutationTarget};
pub use train::{train, TrainConfig, TrainReport};
pub use world::{generate_world, ClassProfile, LabeledSet, SyntheticWorld, WorldConfig};
