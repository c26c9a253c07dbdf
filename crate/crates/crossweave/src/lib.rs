//! Collaborative transfer learning between mutually distrustful data domains.
//!
//! Each of `n` domains trains a local CNN and, after every hooked pooling
//! layer, exchanges activation-map knowledge through MAC-authenticated
//! additive secret shares. Openings are verified in batches; any tampered
//! announcement trips the check and the whole computation aborts with ⊥.
//!
//! Module layout mirrors the protocol stack:
//!
//! * [`ring`] — wraparound arithmetic over `Z_{2^κ}` and the fixed-point codec
//! * [`sharing`] — authenticated additive shares and their linear algebra
//! * [`dealer`] — trusted-dealer offline phase (MAC key, Beaver triples, input masks)
//! * [`transport`] — deterministic in-process channels and framed TCP
//! * [`protocol`] — the online phase: openings, batched MAC checks, Beaver
//!   multiplication, vector multiplication
//! * [`transfer`] — cross/weave units mixing activation maps under a degree matrix
//! * [`cnn`] — the per-domain network (forward/backward/SGD)
//! * [`data`] — IDX datasets and the synthetic digit corpus
//! * [`train`] — solo and collaborative training loops
//! * [`adversary`] — scripted deviations and detection-rate measurement
//! * [`config`] — run configuration files
//! * [`report`] — metrics records and comparison tables

pub mod adversary;
pub mod cnn;
pub mod config;
pub mod data;
pub mod dealer;
pub mod protocol;
pub mod report;
pub mod ring;
pub mod sharing;
pub mod train;
pub mod transfer;
pub mod transport;

/// Process exit code for a run that ended in ⊥ (a failed MAC check).
pub const ABORT_EXIT_CODE: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{context}: value {value} outside representable range |m| < 2^{bound_log2}")]
    OutOfRange {
        value: f64,
        bound_log2: i64,
        context: String,
    },
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: [usize; 3],
        got: [usize; 3],
        context: String,
    },
    #[error("beaver triple pool exhausted; the run was under-provisioned")]
    TriplesExhausted,
    #[error("input mask pool exhausted for owner {owner}; the run was under-provisioned")]
    MasksExhausted { owner: u16 },
    #[error("MAC check failed in round {round}: ⊥, aborting")]
    MacCheckFailed { round: u32 },
    #[error("party {sender} signalled ⊥ in round {round}")]
    RemoteAbort { round: u32, sender: u16 },
    #[error("transport failure in round {round}: {detail}")]
    Transport { round: u32, detail: String },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("bad preprocessing file: {0}")]
    BadPreprocessingFile(String),
    #[error("bad dataset file: {0}")]
    BadDataset(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("cannot evaluate on an empty test set")]
    EmptyTestSet,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors that mean "a verification tripped", i.e. the ⊥ outcome.
    pub fn is_abort(&self) -> bool {
        matches!(
            self,
            Error::MacCheckFailed { .. } | Error::RemoteAbort { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
