//! Data exchanged between users, agents and the Provider, and the exact byte
//! strings each signature covers.

use std::fmt;
use std::net::{IpAddr, SocketAddr};

use serde::{Deserialize, Serialize};

use crate::crypto::{self, Certificate, ExchangePublicKey, Signature, SigningKeyPair, SigningPublicKey};
use crate::policy::{AgentId, ContactPolicy};

/// `⟨device, IP, port⟩`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EndpointDescriptor {
    pub device: String,
    pub ip: IpAddr,
    pub port: u16,
}

impl EndpointDescriptor {
    pub fn new(device: impl Into<String>, ip: IpAddr, port: u16) -> Self {
        Self {
            device: device.into(),
            ip,
            port,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.port != 0 && !self.device.is_empty()
    }

    pub fn socket_addr(&self) -> SocketAddr {
        SocketAddr::new(self.ip, self.port)
    }

    fn encode(&self) -> Vec<u8> {
        crypto::encode_tuple(
            "saga/endpoint",
            &[self.device.as_bytes(), self.ip.to_string().as_bytes(), &self.port.to_be_bytes()],
        )
    }
}

impl fmt::Display for EndpointDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.device, self.socket_addr())
    }
}

/// Bytes covered by the owner's agent signature:
/// `⟨aid, ED, PK_A, PAC_A, PK_Prov⟩`.
pub fn agent_owner_message(
    agent_id: &AgentId,
    endpoint: &EndpointDescriptor,
    agent_tls_public: &SigningPublicKey,
    access_control_public: &ExchangePublicKey,
    provider_public: &SigningPublicKey,
) -> Vec<u8> {
    crypto::encode_tuple(
        "saga/agent-owner",
        &[
            agent_id.to_string().as_bytes(),
            &endpoint.encode(),
            agent_tls_public.as_bytes(),
            access_control_public.as_bytes(),
            provider_public.as_bytes(),
        ],
    )
}

/// Bytes covered by the owner's one-time-key signature: `⟨aid, OTK⟩`.
pub fn otk_message(agent_id: &AgentId, otk: &ExchangePublicKey) -> Vec<u8> {
    crypto::encode_tuple("saga/otk", &[agent_id.to_string().as_bytes(), otk.as_bytes()])
}

/// Bytes covered by the Provider's agent signature:
/// `⟨aid, crt_A, ED, PAC_A, σ_A^U⟩`.
pub fn provider_message(
    agent_id: &AgentId,
    tls_cert: &Certificate,
    endpoint: &EndpointDescriptor,
    access_control_public: &ExchangePublicKey,
    owner_signature: &Signature,
) -> Vec<u8> {
    crypto::encode_tuple(
        "saga/provider",
        &[
            agent_id.to_string().as_bytes(),
            &tls_cert.to_bytes(),
            &endpoint.encode(),
            access_control_public.as_bytes(),
            owner_signature.as_bytes(),
        ],
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedOtk {
    pub key: ExchangePublicKey,
    pub signature: Signature,
}

impl SignedOtk {
    pub fn sign(owner: &SigningKeyPair, agent_id: &AgentId, key: ExchangePublicKey) -> Self {
        Self {
            key,
            signature: owner.sign(&otk_message(agent_id, &key)),
        }
    }

    pub fn verify(&self, owner_public: &SigningPublicKey, agent_id: &AgentId) -> bool {
        crypto::verify(owner_public, &otk_message(agent_id, &self.key), &self.signature)
    }
}

/// Everything a user submits to register an agent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentRegistration {
    pub agent_id: AgentId,
    pub endpoint: EndpointDescriptor,
    pub policy: ContactPolicy,
    pub tls_cert: Certificate,
    pub access_control_public: ExchangePublicKey,
    pub otks: Vec<SignedOtk>,
    pub owner_signature: Signature,
}

/// The agent's public metadata as presented to a receiving agent, together
/// with the owner's certificate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitiatorInfo {
    pub agent_id: AgentId,
    pub tls_cert: Certificate,
    pub endpoint: EndpointDescriptor,
    pub access_control_public: ExchangePublicKey,
    pub owner_signature: Signature,
    pub owner_cert: Certificate,
}

/// Token request sent by the initiator to the receiver.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRequest {
    pub initiator: InitiatorInfo,
    pub provider_signature: Signature,
    /// Absent when an adversary tries to obtain a token without a key.
    pub otk: Option<ExchangePublicKey>,
}

/// Receiver access information returned by contact resolution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContactGrant {
    pub owner_cert: Certificate,
    pub agent_id: AgentId,
    pub endpoint: EndpointDescriptor,
    pub tls_cert: Certificate,
    pub access_control_public: ExchangePublicKey,
    pub otk: ExchangePublicKey,
    pub otk_signature: Signature,
    pub agent_signature: Signature,
}

/// Which signed item failed verification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "item", content = "index")]
pub enum SignedItem {
    UserCertificate,
    AgentCertificate,
    AgentSignature,
    Otk(usize),
    ProviderSignature,
}

impl fmt::Display for SignedItem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SignedItem::UserCertificate => f.write_str("user certificate"),
            SignedItem::AgentCertificate => f.write_str("agent certificate"),
            SignedItem::AgentSignature => f.write_str("owner signature over agent metadata"),
            SignedItem::Otk(i) => write!(f, "owner signature over one-time key #{i}"),
            SignedItem::ProviderSignature => f.write_str("provider signature"),
        }
    }
}

/// Login credentials presented with every owner operation.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserCredentials {
    pub user_id: String,
    pub password: String,
}

impl UserCredentials {
    pub fn new(user_id: impl Into<String>, password: impl Into<String>) -> Self {
        Self {
            user_id: user_id.into(),
            password: password.into(),
        }
    }
}

impl fmt::Debug for UserCredentials {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("UserCredentials")
            .field("user_id", &self.user_id)
            .finish_non_exhaustive()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{keygen_exchange, keygen_sign};

    fn ed(port: u16) -> EndpointDescriptor {
        EndpointDescriptor::new("laptop", "127.0.0.1".parse().unwrap(), port)
    }

    #[test]
    fn owner_message_binds_every_field() {
        let aid: AgentId = "alice@x.com:cal".parse().unwrap();
        let pk = keygen_sign().public();
        let pac = keygen_exchange().public();
        let prov = keygen_sign().public();
        let base = agent_owner_message(&aid, &ed(1), &pk, &pac, &prov);
        assert_ne!(base, agent_owner_message(&aid, &ed(2), &pk, &pac, &prov));
        assert_ne!(base, agent_owner_message(&aid, &ed(1), &pk, &pac, &keygen_sign().public()));
        let other: AgentId = "alice@x.com:mail".parse().unwrap();
        assert_ne!(base, agent_owner_message(&other, &ed(1), &pk, &pac, &prov));
    }

    #[test]
    fn otk_signature_is_agent_bound() {
        let owner = keygen_sign();
        let aid: AgentId = "alice@x.com:cal".parse().unwrap();
        let other: AgentId = "alice@x.com:mail".parse().unwrap();
        let otk = SignedOtk::sign(&owner, &aid, keygen_exchange().public());
        assert!(otk.verify(&owner.public(), &aid));
        assert!(!otk.verify(&owner.public(), &other));
        assert!(!otk.verify(&keygen_sign().public(), &aid));
    }

    #[test]
    fn credentials_debug_hides_password() {
        let c = UserCredentials::new("a@b.c", "hunter2");
        assert!(!format!("{c:?}").contains("hunter2"));
    }
}
