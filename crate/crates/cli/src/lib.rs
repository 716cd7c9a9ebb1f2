//! Library surface of the `omcrl` binary: each subcommand is an ordinary
//! function over a resolved [`RunConfig`], so the pipeline can be driven
//! in-process (tests) or from the command line.

pub mod artifacts;
pub mod commands;
pub mod corpus_io;
pub mod plot;

pub use commands::{
    cmd_collect, cmd_distill, cmd_eval, cmd_plot, cmd_pretrain, cmd_teach, DistillOptions,
    PretrainOptions,
};
