//! Tree-structured hidden Markov models over dependency-parsed corpora.
//!
//! Sentences are rooted single-parent trees whose hidden states generate
//! words; the labeled grammatical relation between a word and its head is a
//! second observed variable that conditions both transitions and emissions.
//! Training is unsupervised (batch EM or mini-batch stepwise EM, optionally
//! with state splitting), inference is exact sum-product / max-product
//! message passing on each tree, and the trained model yields per-token
//! posterior vectors, per-type averaged vectors, and categorical state
//! labels.

pub mod corpus;
pub mod inference;
pub mod model;
pub mod representations;
pub mod rng;
pub mod tensor;
pub mod training;

pub use corpus::{DepTree, RawSentence, SynFuncInventory, Topology, Vocabulary};
pub use inference::{BeliefTable, ProjectionConfig};
pub use model::{BrownClusterMap, ModelMeta, ModelParams};
pub use training::{SufficientStats, TrainConfig, TrainMode};
