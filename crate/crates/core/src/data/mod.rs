pub mod batch;
pub mod corpus;
pub mod dialogue;
pub mod labels;
pub mod synth;
pub mod tokenize;
pub mod vocab;

pub use batch::{batchify, encode_example, Batch, EncodedExample};
pub use corpus::{build_vocabulary, load_corpus, CorpusFormat, DialogueRecord};
pub use dialogue::{DialogueExample, Role, Utterance};
pub use labels::LabelSet;
pub use tokenize::tokenize;
pub use vocab::Vocabulary;
