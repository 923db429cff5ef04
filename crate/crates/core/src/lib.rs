//! Confidential dossier sharing through an untrusted synchronizer.
//!
//! Owners keep their dossiers in plaintext on their own agent. Each receiver
//! gets a redacted view sealed under a symmetric key made for that
//! (dossier, receiver) pair. The synchronizer only ever holds those keys
//! wrapped under the receiver's public key, plus the sealed pending views.
//! Deleting a wrapped key is how access is revoked.
//!
//! Modules, bottom up:
//!
//! - [`model`]: dossiers, redaction, access lists, version merge
//! - [`crypto`]: identities, key wrapping, sealing, signatures
//! - [`wire`]: canonical encoding, framing, handshake
//! - [`store`]: snapshot plus command log persistence
//! - [`synchronizer`]: the untrusted server
//! - [`agent`]: the trusted client and its protocol sequences
//! - [`simnet`]: deterministic simulation and trace checks

pub mod agent;
pub mod crypto;
pub mod model;
pub mod simnet;
pub mod store;
pub mod synchronizer;
pub mod wire;

pub use agent::{Agent, AgentConfig, AgentError, DossierView, RevokePolicy, Session, TcpSession};
pub use crypto::{Identity, SUITE_ID};
pub use model::{Dossier, DossierId, FieldName, FieldValue, Fields, RedactedView, UserId, Version};
pub use synchronizer::{SyncService, SyncState};

/// The guide's chapters, compiled so their examples run as doctests.
#[cfg(doctest)]
pub mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/model.md")]
    pub mod model {}
    #[doc = include_str!("../../../book/src/crypto.md")]
    pub mod crypto {}
    #[doc = include_str!("../../../book/src/wire.md")]
    pub mod wire {}
    #[doc = include_str!("../../../book/src/synchronizer.md")]
    pub mod synchronizer {}
    #[doc = include_str!("../../../book/src/agent.md")]
    pub mod agent {}
    #[doc = include_str!("../../../book/src/persistence.md")]
    pub mod persistence {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    pub mod simulation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
