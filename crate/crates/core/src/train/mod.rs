//! Downstream stage: oracle teacher training on privileged state, and the
//! learning-by-cheating student trainer with the annealed KL objective.

mod decay;
mod kl;
mod oracle;
mod student;

pub use decay::alpha;
pub use kl::{kl_gaussian, kl_gaussian_monte_carlo, kl_gaussian_taped};
pub use oracle::{train_oracle, EvalPoint, OraclePolicy, OracleTrainer, TrainOutcome, UpdateLog};
pub use student::{student_loss, train_student, FrozenEncoder, StudentPolicy, StudentTrainer};
