//! Audio I/O, log-mel features, the synthetic corpus and corpus statistics.

pub mod corpus;
pub mod mel;
pub mod pitch;
pub mod wav;

pub use corpus::{generate_toy_corpus, toy_token_table, Intonation, Manifest, ToyCorpusOptions, UtteranceRecord};
pub use mel::{wav_to_mel, MelConfig, MelExtractor, MelSpectrogram};
pub use pitch::{corpus_stats, CorpusStats, PitchConfig};
pub use wav::{load_wav, save_wav, Waveform};
