//! Identity keys, per-grant symmetric keys, key wrapping, signatures and
//! salted authenticated encryption.
//!
//! # Suite
//!
//! One suite is implemented, named by [`SUITE_ID`]:
//!
//! * identities carry an X25519 key pair for confidentiality and an Ed25519
//!   key pair for origin;
//! * a [`SymKey`] is wrapped for a receiver with an ephemeral X25519 exchange,
//!   HKDF-SHA256 and ChaCha20-Poly1305 (`eph_pub || ciphertext`, 80 bytes);
//! * dossier payloads are sealed with XChaCha20-Poly1305 under a fresh random
//!   24-byte nonce per call.
//!
//! Every operation that needs randomness takes an explicit `RngCore +
//! CryptoRng`, so the simulator can run the protocol from a seed while the
//! binaries use the operating system source.

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, XChaCha20Poly1305, XNonce};
use ed25519_dalek::{Signer, SigningKey, VerifyingKey};
use hkdf::Hkdf;
use rand_core::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;
use x25519_dalek::{PublicKey, StaticSecret};
use zeroize::{Zeroize, ZeroizeOnDrop};

use crate::model::UserId;
use crate::wire::Bytes;

/// Identifier of the primitive suite, exchanged in the connection handshake.
pub const SUITE_ID: &str = "x25519-ed25519-xchacha20poly1305";

pub const SYM_KEY_LEN: usize = 32;
pub const NONCE_LEN: usize = 24;
pub const SIGNATURE_LEN: usize = 64;
/// Length of [`wrap_key`] output.
pub const WRAPPED_KEY_LEN: usize = 32 + SYM_KEY_LEN + 16;
/// Largest plaintext [`seal`] accepts.
pub const MAX_PLAINTEXT_LEN: usize = 1 << 20;

const WRAP_INFO: &[u8] = b"dossier-sync key wrap v1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("entropy source unavailable")]
    EntropyUnavailable,
    #[error("malformed public key")]
    MalformedPublicKey,
    #[error("key unwrap failed")]
    UnwrapFailed,
    #[error("plaintext of {0} bytes exceeds the {MAX_PLAINTEXT_LEN} byte limit")]
    PlaintextTooLarge(usize),
    #[error("authenticated decryption failed")]
    OpenFailed,
}

fn random_array<const N: usize, R: RngCore + CryptoRng + ?Sized>(rng: &mut R) -> Result<[u8; N], CryptoError> {
    let mut out = [0u8; N];
    rng.try_fill_bytes(&mut out)
        .map_err(|_| CryptoError::EntropyUnavailable)?;
    Ok(out)
}

/// A 32-byte symmetric key, one per (dossier, receiver) grant.
#[derive(Clone, PartialEq, Eq, Zeroize, ZeroizeOnDrop, Serialize, Deserialize)]
pub struct SymKey(#[serde(with = "crate::wire::b64_array")] [u8; SYM_KEY_LEN]);

impl SymKey {
    pub fn from_bytes(bytes: [u8; SYM_KEY_LEN]) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; SYM_KEY_LEN] {
        &self.0
    }
}

impl std::fmt::Debug for SymKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("SymKey(..)")
    }
}

pub fn gen_sym_key<R: RngCore + CryptoRng + ?Sized>(rng: &mut R) -> Result<SymKey, CryptoError> {
    random_array(rng).map(SymKey)
}

/// The public half of an identity, as held in the synchronizer registry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicKeyBundle {
    pub user: UserId,
    #[serde(with = "crate::wire::b64_array")]
    pub enc_public: [u8; 32],
    #[serde(with = "crate::wire::b64_array")]
    pub sig_public: [u8; 32],
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Signature(pub Bytes);

impl Signature {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0 .0
    }
}

/// A user's private keys. Never leaves the agent process or its identity file.
#[derive(Clone)]
pub struct Identity {
    user: UserId,
    enc_private: StaticSecret,
    sig_private: SigningKey,
}

impl std::fmt::Debug for Identity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Identity").field("user", &self.user).finish_non_exhaustive()
    }
}

impl Identity {
    pub fn generate<R: RngCore + CryptoRng + ?Sized>(user: UserId, rng: &mut R) -> Result<Self, CryptoError> {
        let enc: [u8; 32] = random_array(rng)?;
        let sig: [u8; 32] = random_array(rng)?;
        Ok(Self::from_secrets(user, enc, sig))
    }

    pub fn from_secrets(user: UserId, enc_private: [u8; 32], sig_private: [u8; 32]) -> Self {
        Self {
            user,
            enc_private: StaticSecret::from(enc_private),
            sig_private: SigningKey::from_bytes(&sig_private),
        }
    }

    pub fn user(&self) -> &UserId {
        &self.user
    }

    pub fn public(&self) -> PublicKeyBundle {
        PublicKeyBundle {
            user: self.user.clone(),
            enc_public: PublicKey::from(&self.enc_private).to_bytes(),
            sig_public: self.sig_private.verifying_key().to_bytes(),
        }
    }

    pub fn sign(&self, msg: &[u8]) -> Signature {
        sign(msg, &self.sig_private)
    }

    pub fn unwrap_key(&self, wrapped: &[u8]) -> Result<SymKey, CryptoError> {
        unwrap_key(wrapped, &self.enc_private)
    }

    pub(crate) fn secret_bytes(&self) -> ([u8; 32], [u8; 32]) {
        (self.enc_private.to_bytes(), self.sig_private.to_bytes())
    }
}

/// Same as [`Identity::generate`].
pub fn gen_identity<R: RngCore + CryptoRng + ?Sized>(user: UserId, rng: &mut R) -> Result<Identity, CryptoError> {
    Identity::generate(user, rng)
}

fn wrap_cipher(shared: &[u8; 32], eph_pub: &[u8; 32], receiver_pub: &[u8; 32]) -> ChaCha20Poly1305 {
    let mut salt = [0u8; 64];
    salt[..32].copy_from_slice(eph_pub);
    salt[32..].copy_from_slice(receiver_pub);
    let hk = Hkdf::<Sha256>::new(Some(&salt), shared);
    let mut okm = [0u8; 32];
    hk.expand(WRAP_INFO, &mut okm)
        .expect("32 bytes is a valid HKDF-SHA256 output length");
    let cipher = ChaCha20Poly1305::new((&okm).into());
    okm.zeroize();
    cipher
}

/// Encrypts `key` so that only the holder of `receiver`'s encryption key can read it.
pub fn wrap_key<R: RngCore + CryptoRng + ?Sized>(
    key: &SymKey,
    receiver: &PublicKeyBundle,
    rng: &mut R,
) -> Result<Vec<u8>, CryptoError> {
    let eph = StaticSecret::from(random_array::<32, _>(rng)?);
    let eph_pub = PublicKey::from(&eph).to_bytes();
    let shared = eph.diffie_hellman(&PublicKey::from(receiver.enc_public));
    if !shared.was_contributory() {
        return Err(CryptoError::MalformedPublicKey);
    }
    let cipher = wrap_cipher(shared.as_bytes(), &eph_pub, &receiver.enc_public);
    // Each wrapping key is derived from a fresh ephemeral secret and used once.
    let ct = cipher
        .encrypt(&[0u8; 12].into(), key.as_bytes().as_slice())
        .map_err(|_| CryptoError::MalformedPublicKey)?;
    let mut out = Vec::with_capacity(WRAPPED_KEY_LEN);
    out.extend_from_slice(&eph_pub);
    out.extend_from_slice(&ct);
    Ok(out)
}

pub fn unwrap_key(wrapped: &[u8], private: &StaticSecret) -> Result<SymKey, CryptoError> {
    if wrapped.len() != WRAPPED_KEY_LEN {
        return Err(CryptoError::UnwrapFailed);
    }
    let eph_pub: [u8; 32] = wrapped[..32].try_into().expect("length checked");
    let shared = private.diffie_hellman(&PublicKey::from(eph_pub));
    if !shared.was_contributory() {
        return Err(CryptoError::UnwrapFailed);
    }
    let own_pub = PublicKey::from(private).to_bytes();
    let cipher = wrap_cipher(shared.as_bytes(), &eph_pub, &own_pub);
    let mut pt = cipher
        .decrypt(&[0u8; 12].into(), &wrapped[32..])
        .map_err(|_| CryptoError::UnwrapFailed)?;
    let key: [u8; SYM_KEY_LEN] = pt.as_slice().try_into().map_err(|_| CryptoError::UnwrapFailed)?;
    pt.zeroize();
    Ok(SymKey(key))
}

/// Nonce plus authenticated ciphertext.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SealedBox {
    pub nonce: Bytes,
    pub ciphertext: Bytes,
}

pub fn seal<R: RngCore + CryptoRng + ?Sized>(
    plaintext: &[u8],
    key: &SymKey,
    rng: &mut R,
) -> Result<SealedBox, CryptoError> {
    if plaintext.len() > MAX_PLAINTEXT_LEN {
        return Err(CryptoError::PlaintextTooLarge(plaintext.len()));
    }
    let nonce: [u8; NONCE_LEN] = random_array(rng)?;
    let cipher = XChaCha20Poly1305::new(key.as_bytes().into());
    let ciphertext = cipher
        .encrypt(XNonce::from_slice(&nonce), plaintext)
        .map_err(|_| CryptoError::PlaintextTooLarge(plaintext.len()))?;
    Ok(SealedBox {
        nonce: Bytes(nonce.to_vec()),
        ciphertext: Bytes(ciphertext),
    })
}

pub fn open(sealed: &SealedBox, key: &SymKey) -> Result<Vec<u8>, CryptoError> {
    if sealed.nonce.0.len() != NONCE_LEN {
        return Err(CryptoError::OpenFailed);
    }
    let cipher = XChaCha20Poly1305::new(key.as_bytes().into());
    cipher
        .decrypt(
            XNonce::from_slice(&sealed.nonce.0),
            Payload {
                msg: &sealed.ciphertext.0,
                aad: &[],
            },
        )
        .map_err(|_| CryptoError::OpenFailed)
}

pub fn sign(msg: &[u8], private: &SigningKey) -> Signature {
    Signature(Bytes(private.sign(msg).to_bytes().to_vec()))
}

/// Never fails: malformed keys or signatures verify as `false`.
pub fn verify(msg: &[u8], sig: &Signature, public: &PublicKeyBundle) -> bool {
    let Ok(bytes) = <[u8; SIGNATURE_LEN]>::try_from(sig.as_bytes()) else {
        return false;
    };
    let Ok(key) = VerifyingKey::from_bytes(&public.sig_public) else {
        return false;
    };
    key.verify_strict(msg, &ed25519_dalek::Signature::from_bytes(&bytes))
        .is_ok()
}

/// Entropy from the operating system.
pub fn os_rng() -> rand_core::OsRng {
    rand_core::OsRng
}
