//! Cryptographic primitives used throughout the protocol.
//!
//! Everything here is stateless. Signatures are Ed25519, key agreement is
//! X25519, hashing is SHA-256, key derivation is HKDF-SHA256 and symmetric
//! encryption is ChaCha20-Poly1305.
//!
//! Byte encodings are fixed: public and secret keys are raw 32-byte strings,
//! signatures are 64 bytes, and sealed boxes are `nonce(12) ‖ ciphertext ‖ tag(16)`.

use std::fmt;

use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use ed25519_dalek::{Signer, Verifier};
use hkdf::Hkdf;
use rand::rngs::OsRng;
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// HKDF `info` label. Bumping the protocol version changes every derived key.
pub const KDF_INFO: &[u8] = b"saga/v1/sdhk";

pub const PUBLIC_KEY_LEN: usize = 32;
pub const SIGNATURE_LEN: usize = 64;
pub const SEAL_NONCE_LEN: usize = 12;
pub const SEAL_TAG_LEN: usize = 16;
pub const SHARED_KEY_LEN: usize = 32;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("key agreement produced a non-contributory output (low-order public key)")]
    LowOrderPoint,
    #[error("key derivation requires non-empty input keying material")]
    EmptyKeyMaterial,
    #[error("ciphertext failed authentication")]
    Tampered,
    #[error("ciphertext is shorter than nonce and tag")]
    Truncated,
    #[error("invalid key encoding: {0}")]
    InvalidKey(&'static str),
}

macro_rules! hex_bytes_newtype {
    ($(#[$meta:meta])* $name:ident, $len:expr) => {
        $(#[$meta])*
        #[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub struct $name(pub [u8; $len]);

        impl $name {
            pub fn as_bytes(&self) -> &[u8; $len] {
                &self.0
            }

            pub fn from_slice(bytes: &[u8]) -> Option<Self> {
                <[u8; $len]>::try_from(bytes).ok().map(Self)
            }

            pub fn to_hex(&self) -> String {
                hex::encode(self.0)
            }

            pub fn from_hex(s: &str) -> Result<Self, CryptoError> {
                let raw = hex::decode(s.trim()).map_err(|_| CryptoError::InvalidKey("not hex"))?;
                Self::from_slice(&raw).ok_or(CryptoError::InvalidKey("wrong length"))
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({}…)", stringify!($name), &self.to_hex()[..12])
            }
        }

        impl Serialize for $name {
            fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&self.to_hex())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                Self::from_hex(&s).map_err(serde::de::Error::custom)
            }
        }
    };
}

hex_bytes_newtype!(
    /// Ed25519 verifying key.
    SigningPublicKey,
    PUBLIC_KEY_LEN
);
hex_bytes_newtype!(
    /// X25519 public key.
    ExchangePublicKey,
    PUBLIC_KEY_LEN
);
hex_bytes_newtype!(
    /// Ed25519 signature.
    Signature,
    SIGNATURE_LEN
);
hex_bytes_newtype!(
    /// SHA-256 digest.
    Digest32,
    32
);

/// Long-term signing identity. The secret half is never serialized by this
/// type; use [`SigningKeyPair::secret_bytes`] explicitly when persisting to an
/// identity directory.
#[derive(Clone)]
pub struct SigningKeyPair {
    inner: ed25519_dalek::SigningKey,
}

impl SigningKeyPair {
    pub fn generate() -> Self {
        Self::generate_with(&mut OsRng)
    }

    pub fn generate_with<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        Self {
            inner: ed25519_dalek::SigningKey::generate(rng),
        }
    }

    pub fn from_secret_bytes(secret: [u8; 32]) -> Self {
        Self {
            inner: ed25519_dalek::SigningKey::from_bytes(&secret),
        }
    }

    pub fn secret_bytes(&self) -> [u8; 32] {
        self.inner.to_bytes()
    }

    pub fn public(&self) -> SigningPublicKey {
        SigningPublicKey(self.inner.verifying_key().to_bytes())
    }

    pub fn sign(&self, message: &[u8]) -> Signature {
        Signature(self.inner.sign(message).to_bytes())
    }
}

impl fmt::Debug for SigningKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SigningKeyPair")
            .field("public", &self.public())
            .finish_non_exhaustive()
    }
}

pub fn keygen_sign() -> SigningKeyPair {
    SigningKeyPair::generate()
}

pub fn sign(secret: &SigningKeyPair, message: &[u8]) -> Signature {
    secret.sign(message)
}

/// Verifies `sig` over exactly `message`. Malformed keys or signatures yield
/// `false`.
pub fn verify(public: &SigningPublicKey, message: &[u8], sig: &Signature) -> bool {
    verify_bytes(public, message, &sig.0)
}

/// Like [`verify`] but over raw signature bytes of any length.
pub fn verify_bytes(public: &SigningPublicKey, message: &[u8], sig: &[u8]) -> bool {
    let Ok(key) = ed25519_dalek::VerifyingKey::from_bytes(&public.0) else {
        return false;
    };
    let Ok(sig) = ed25519_dalek::Signature::from_slice(sig) else {
        return false;
    };
    key.verify(message, &sig).is_ok()
}

/// X25519 key pair: access-control keys and one-time keys.
#[derive(Clone)]
pub struct ExchangeKeyPair {
    secret: x25519_dalek::StaticSecret,
    public: ExchangePublicKey,
}

impl ExchangeKeyPair {
    pub fn generate() -> Self {
        Self::generate_with(&mut OsRng)
    }

    pub fn generate_with<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let secret = x25519_dalek::StaticSecret::random_from_rng(rng);
        Self::from_static(secret)
    }

    pub fn from_secret_bytes(secret: [u8; 32]) -> Self {
        Self::from_static(x25519_dalek::StaticSecret::from(secret))
    }

    fn from_static(secret: x25519_dalek::StaticSecret) -> Self {
        let public = ExchangePublicKey(x25519_dalek::PublicKey::from(&secret).to_bytes());
        Self { secret, public }
    }

    pub fn public(&self) -> ExchangePublicKey {
        self.public
    }

    pub fn secret_bytes(&self) -> [u8; 32] {
        self.secret.to_bytes()
    }

    pub fn dh(&self, peer: &ExchangePublicKey) -> Result<[u8; 32], CryptoError> {
        let shared = self.secret.diffie_hellman(&x25519_dalek::PublicKey::from(peer.0));
        if !shared.was_contributory() {
            return Err(CryptoError::LowOrderPoint);
        }
        Ok(shared.to_bytes())
    }
}

impl fmt::Debug for ExchangeKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExchangeKeyPair")
            .field("public", &self.public)
            .finish_non_exhaustive()
    }
}

pub fn keygen_exchange() -> ExchangeKeyPair {
    ExchangeKeyPair::generate()
}

pub fn dh(secret: &ExchangeKeyPair, public: &ExchangePublicKey) -> Result<[u8; 32], CryptoError> {
    secret.dh(public)
}

/// 256-bit symmetric key. Only produced by [`kdf`].
#[derive(Clone, PartialEq, Eq)]
pub struct SharedKey([u8; SHARED_KEY_LEN]);

impl SharedKey {
    pub fn as_bytes(&self) -> &[u8; SHARED_KEY_LEN] {
        &self.0
    }
}

impl fmt::Debug for SharedKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SharedKey(..)")
    }
}

pub fn kdf(ikm: &[u8]) -> Result<SharedKey, CryptoError> {
    kdf_with(ikm, None, KDF_INFO)
}

/// HKDF-SHA256 with an explicit salt and label, used for channel keys.
pub fn kdf_with(ikm: &[u8], salt: Option<&[u8]>, info: &[u8]) -> Result<SharedKey, CryptoError> {
    if ikm.is_empty() {
        return Err(CryptoError::EmptyKeyMaterial);
    }
    let hk = Hkdf::<Sha256>::new(salt, ikm);
    let mut okm = [0u8; SHARED_KEY_LEN];
    hk.expand(info, &mut okm)
        .expect("32 bytes is a valid HKDF-SHA256 output length");
    Ok(SharedKey(okm))
}

/// Authenticated encryption with a random nonce: `nonce ‖ ciphertext ‖ tag`.
pub fn seal(key: &SharedKey, plaintext: &[u8]) -> Vec<u8> {
    let mut nonce = [0u8; SEAL_NONCE_LEN];
    OsRng.fill_bytes(&mut nonce);
    seal_with_nonce(key, &nonce, plaintext)
}

pub fn seal_with_nonce(key: &SharedKey, nonce: &[u8; SEAL_NONCE_LEN], plaintext: &[u8]) -> Vec<u8> {
    let cipher = ChaCha20Poly1305::new(Key::from_slice(&key.0));
    let body = cipher
        .encrypt(Nonce::from_slice(nonce), plaintext)
        .expect("chacha20poly1305 encryption is infallible for in-memory buffers");
    let mut out = Vec::with_capacity(SEAL_NONCE_LEN + body.len());
    out.extend_from_slice(nonce);
    out.extend_from_slice(&body);
    out
}

pub fn open(key: &SharedKey, sealed: &[u8]) -> Result<Vec<u8>, CryptoError> {
    if sealed.len() < SEAL_NONCE_LEN + SEAL_TAG_LEN {
        return Err(CryptoError::Truncated);
    }
    let (nonce, body) = sealed.split_at(SEAL_NONCE_LEN);
    let cipher = ChaCha20Poly1305::new(Key::from_slice(&key.0));
    cipher
        .decrypt(Nonce::from_slice(nonce), body)
        .map_err(|_| CryptoError::Tampered)
}

pub fn hash(message: &[u8]) -> Digest32 {
    Digest32(Sha256::digest(message).into())
}

/// Canonical encoding of a labelled tuple for signing: each element is
/// prefixed with its length as a big-endian u32. The label separates
/// signature domains.
pub fn encode_tuple(label: &str, fields: &[&[u8]]) -> Vec<u8> {
    let total = 4 + label.len() + fields.iter().map(|f| 4 + f.len()).sum::<usize>();
    let mut out = Vec::with_capacity(total);
    for part in std::iter::once(label.as_bytes()).chain(fields.iter().copied()) {
        out.extend_from_slice(&(part.len() as u32).to_be_bytes());
        out.extend_from_slice(part);
    }
    out
}

/// `⟨subject_id, subject_public⟩` signed by an issuer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Certificate {
    pub subject_id: String,
    pub subject_public: SigningPublicKey,
    pub issuer_signature: Signature,
}

impl Certificate {
    fn signed_content(subject_id: &str, subject_public: &SigningPublicKey) -> Vec<u8> {
        encode_tuple("saga/cert", &[subject_id.as_bytes(), &subject_public.0])
    }

    pub fn issue(issuer: &SigningKeyPair, subject_id: &str, subject_public: SigningPublicKey) -> Self {
        let issuer_signature = issuer.sign(&Self::signed_content(subject_id, &subject_public));
        Self {
            subject_id: subject_id.to_owned(),
            subject_public,
            issuer_signature,
        }
    }

    pub fn verify(&self, issuer: &SigningPublicKey) -> bool {
        verify(
            issuer,
            &Self::signed_content(&self.subject_id, &self.subject_public),
            &self.issuer_signature,
        )
    }

    /// Stable byte encoding used when a certificate is itself signed over.
    pub fn to_bytes(&self) -> Vec<u8> {
        encode_tuple(
            "saga/cert-body",
            &[self.subject_id.as_bytes(), &self.subject_public.0, &self.issuer_signature.0],
        )
    }
}

/// The certificate authority deployed alongside the Provider.
#[derive(Debug, Clone)]
pub struct CertificateAuthority {
    keys: SigningKeyPair,
}

impl CertificateAuthority {
    pub fn new(keys: SigningKeyPair) -> Self {
        Self { keys }
    }

    pub fn generate() -> Self {
        Self::new(SigningKeyPair::generate())
    }

    pub fn public(&self) -> SigningPublicKey {
        self.keys.public()
    }

    pub fn keys(&self) -> &SigningKeyPair {
        &self.keys
    }

    pub fn issue(&self, subject_id: &str, subject_public: SigningPublicKey) -> Certificate {
        Certificate::issue(&self.keys, subject_id, subject_public)
    }
}
