//! Speech recognition toolkit for small devices: log-mel features, an
//! encoder/decoder transformer, low-rank compression of its linear layers,
//! FLOP accounting, WER scoring, corpus filtering and a benchmark harness.

pub mod audio;
pub mod bench;
pub mod compress;
pub mod filter;
pub mod flops;
pub mod model;
pub mod tensor;
pub mod wer;

pub use audio::{estimate_stnr, ingest, log_mel, AudioClip, AudioError, MelFeatures, StnrEstimate};
pub use bench::{bench_once, bench_suite, BenchConfig, BenchError, BenchRecord, BenchSummary, Engine, TelemetrySample};
pub use compress::{compress_bundle, select_rank, CompressError, CompressionMode, CompressionPolicy, CompressionReport};
pub use filter::{run_pipeline, DataVersion, FilterConfig, FilterError, FilterReport, Split, UtteranceRecord};
pub use flops::{flops_linear, flops_model, FlopReport, LinearVariant};
pub use model::{greedy_decode, load_bundle, save_bundle, transcribe, LinearLayer, ModelBundle, ModelConfig, ModelError, Transcript};
pub use tensor::{FlopCounter, Matrix};
pub use wer::{corpus_wer, normalize, wer, CorpusWer, WerBreakdown, WerError};

/// Any error raised by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Compress(#[from] CompressError),
    #[error(transparent)]
    Wer(#[from] WerError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Bench(#[from] BenchError),
}
