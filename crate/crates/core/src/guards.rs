//! Switches for the individual enforcement checks.
//!
//! Every guard is on by default and production code never turns one off.
//! The harness mutation mode disables one guard at a time to show that each
//! attack scenario is stopped by the check it claims to exercise.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Guard {
    /// Channel handshake requires a CA-issued certificate.
    CertificateCheck,
    /// Token requests must carry a live one-time key.
    CredentialCheck,
    /// Receiver rejects expired and over-quota tokens.
    TokenLifetime,
    /// Receiver verifies the initiator's metadata bound to the channel
    /// identity: Provider signature, owner certificate and owner signature.
    ProviderSignature,
    /// Receiver checks the token holder against the presenting agent.
    HolderBinding,
    /// Provider enforces the receiver's contact policy.
    ContactPolicy,
    /// Provider requires human verification at user registration.
    HumanVerification,
}

impl Guard {
    pub const ALL: [Guard; 7] = [
        Guard::CertificateCheck,
        Guard::CredentialCheck,
        Guard::TokenLifetime,
        Guard::ProviderSignature,
        Guard::HolderBinding,
        Guard::ContactPolicy,
        Guard::HumanVerification,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Guard::CertificateCheck => "certificate-check",
            Guard::CredentialCheck => "credential-check",
            Guard::TokenLifetime => "token-lifetime",
            Guard::ProviderSignature => "provider-signature",
            Guard::HolderBinding => "holder-binding",
            Guard::ContactPolicy => "contact-policy",
            Guard::HumanVerification => "human-verification",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Guards {
    disabled: Option<Guard>,
}

impl Default for Guards {
    fn default() -> Self {
        Self::all()
    }
}

impl Guards {
    pub fn all() -> Self {
        Self { disabled: None }
    }

    pub fn without(guard: Guard) -> Self {
        Self {
            disabled: Some(guard),
        }
    }

    pub fn enabled(&self, guard: Guard) -> bool {
        self.disabled != Some(guard)
    }
}
