pub mod chat;
pub mod convert;
pub mod eval;
pub mod generate;
pub mod train;

use std::path::Path;

use cedual::checkpoint::Checkpoint;
use cedual::data::labels::LabelSet;
use cedual::model::DecodeStrategy;

use crate::error::CliResult;

/// Emotion names for a model with `k` classes: the first `k` bundled labels.
pub fn labels_for(k: usize) -> CliResult<LabelSet> {
    Ok(LabelSet::first(k)?)
}

pub fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Ok(Checkpoint::load(path)?)
}

/// Decoding strategy as a command-line value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum Strategy {
    #[default]
    Greedy,
    Beam,
}

impl From<Strategy> for DecodeStrategy {
    fn from(s: Strategy) -> Self {
        match s {
            Strategy::Greedy => DecodeStrategy::Greedy,
            Strategy::Beam => DecodeStrategy::Beam,
        }
    }
}
