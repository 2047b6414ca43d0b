mod corpus;
mod evaluate;
mod generate;
mod serve;
mod train;

pub use corpus::{ingest, synth_data};
pub use evaluate::{ablate, eval};
pub use generate::generate;
pub use serve::serve;
pub use train::{corrupt, train};
