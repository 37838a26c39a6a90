//! Sequences, synthetic scene generation, crops and training pairs.

pub mod crop;
pub mod pairs;
pub mod sequence;
pub mod synth;

pub use crop::{crop_patch, crop_sides, patch_tensor};
pub use pairs::{build_training_set, make_label, pairs_from_sequence, synthetic_pairs, LabelKind, PairConfig, TrainingPair};
pub use sequence::{load_sequence, load_sequences, save_sequence, Frames, Sequence};
pub use synth::{generate_sequence, scene_suite, Occlusion, SuiteConfig, HEAVY_DRIFT_RATE, RenderedFrame, SceneRenderer, SyntheticSceneConfig};
