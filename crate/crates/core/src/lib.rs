//! Two-stage analysis of reasoning traces: an explicit Markov chain over
//! step categories and per-category Gaussian regime mixtures over layer-wise
//! hidden states, linked across steps by bridge matrices.

pub mod category;
pub mod cli;
pub mod codec;
pub mod diagnostics;
pub mod explicit;
pub mod implicit;
pub mod parallel;
pub mod preprocess;
pub mod synth;
pub mod trace;

pub use category::Category;

use thiserror::Error;

/// Any failure surfaced by the pipeline, tagged with its stage.
#[derive(Debug, Error)]
pub enum Error {
    #[error("trace: {0}")]
    Trace(#[from] trace::TraceError),
    #[error("preprocess: {0}")]
    Preprocess(#[from] preprocess::PreprocessError),
    #[error("explicit: {0}")]
    Explicit(#[from] explicit::ExplicitError),
    #[error("implicit: {0}")]
    Implicit(#[from] implicit::ImplicitError),
    #[error("diagnostics: {0}")]
    Diagnostics(#[from] diagnostics::DiagnosticsError),
    #[error("synth: {0}")]
    Synth(#[from] synth::SynthError),
    #[error("usage: {0}")]
    Usage(String),
    #[error("i/o on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// 1 usage, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        use explicit::ExplicitError as E;
        use implicit::ImplicitError as I;
        use preprocess::PreprocessError as P;
        match self {
            Error::Usage(_) => 1,
            Error::Implicit(I::InvalidConfig(_)) => 1,
            Error::Explicit(E::ZeroOrder | E::EmptyRange) => 1,
            Error::Preprocess(P::DegenerateLayer { .. }) => 3,
            Error::Explicit(E::UniformFilledRows(_)) => 3,
            Error::Implicit(I::SingleCluster) => 3,
            _ => 2,
        }
    }
}
