//! The Provider's request/response API over a secure channel.
//!
//! Requests travel as JSON in `PROVIDER_REQUEST` frames. The initiator of a
//! contact resolution is always the authenticated channel peer, never a
//! field of the request.

use std::fmt;
use std::net::SocketAddr;
use std::sync::atomic::AtomicBool;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{Certificate, Signature, SigningKeyPair, SigningPublicKey};
use crate::policy::{AgentId, ContactPolicy};
use crate::records::{AgentRegistration, ContactGrant, SignedOtk, UserCredentials};
use crate::registry::{ErrorCode, Registry, RegistryError};
use crate::transport::{self, ChannelConfig, Frame, FrameType, Network, ServerHandle, TransportError};

/// Certificate subject the Provider presents on every channel.
pub const PROVIDER_ID: &str = "saga-provider";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ProviderRequest {
    Health,
    RegisterUser {
        user_id: String,
        password: String,
        certificate: Certificate,
    },
    RegisterAgent {
        credentials: UserCredentials,
        submission: AgentRegistration,
    },
    ResolveContact {
        receiver: AgentId,
    },
    UpdatePolicy {
        credentials: UserCredentials,
        agent_id: AgentId,
        policy: ContactPolicy,
    },
    RefreshOtks {
        credentials: UserCredentials,
        agent_id: AgentId,
        otks: Vec<SignedOtk>,
    },
    DeactivateAgent {
        credentials: UserCredentials,
        agent_id: AgentId,
    },
    ResetCounter {
        credentials: UserCredentials,
        agent_id: AgentId,
        initiator: AgentId,
    },
    PoolStatus {
        credentials: UserCredentials,
        agent_id: AgentId,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ProviderResponse {
    Ok,
    Health { users: usize, agents: usize },
    AgentRegistered { provider_signature: Signature },
    Grant { grant: Box<ContactGrant> },
    PoolSize { pool_size: usize, unconsumed: usize },
    Error { error: RegistryError },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ServiceError {
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("unexpected provider response: {0}")]
    Protocol(String),
}

impl ServiceError {
    pub fn code(&self) -> Option<ErrorCode> {
        match self {
            ServiceError::Registry(e) => Some(e.code()),
            _ => None,
        }
    }
}

fn handle(registry: &Registry, peer: Option<&str>, request: ProviderRequest) -> ProviderResponse {
    let result = match request {
        ProviderRequest::Health => {
            let dump = registry.dump();
            return ProviderResponse::Health {
                users: dump.users.len(),
                agents: dump.agents.len(),
            };
        }
        ProviderRequest::RegisterUser {
            user_id,
            password,
            certificate,
        } => registry
            .register_user(&user_id, &password, certificate)
            .map(|_| ProviderResponse::Ok),
        ProviderRequest::RegisterAgent { credentials, submission } => registry
            .register_agent(&credentials, submission)
            .map(|provider_signature| ProviderResponse::AgentRegistered { provider_signature }),
        ProviderRequest::ResolveContact { receiver } => match peer.and_then(|p| p.parse::<AgentId>().ok()) {
            Some(initiator) => registry
                .resolve_contact(&initiator, &receiver)
                .map(|grant| ProviderResponse::Grant { grant: Box::new(grant) }),
            None => Err(RegistryError::AuthFailed),
        },
        ProviderRequest::UpdatePolicy {
            credentials,
            agent_id,
            policy,
        } => registry
            .update_policy(&credentials, &agent_id, policy)
            .map(|_| ProviderResponse::Ok),
        ProviderRequest::RefreshOtks {
            credentials,
            agent_id,
            otks,
        } => registry
            .refresh_otks(&credentials, &agent_id, otks)
            .map(|_| ProviderResponse::Ok),
        ProviderRequest::DeactivateAgent { credentials, agent_id } => registry
            .deactivate_agent(&credentials, &agent_id)
            .map(|_| ProviderResponse::Ok),
        ProviderRequest::ResetCounter {
            credentials,
            agent_id,
            initiator,
        } => registry
            .reset_counter(&credentials, &agent_id, &initiator)
            .map(|_| ProviderResponse::Ok),
        ProviderRequest::PoolStatus { credentials, agent_id } => registry
            .authenticate(&credentials)
            .and_then(|_| {
                let record = registry
                    .agent_record(&agent_id)
                    .ok_or_else(|| RegistryError::NotFound(agent_id.to_string()))?;
                if record.owner != credentials.user_id {
                    return Err(RegistryError::Forbidden);
                }
                Ok(ProviderResponse::PoolSize {
                    pool_size: record.otk_pool.len(),
                    unconsumed: record.unconsumed(),
                })
            }),
    };
    result.unwrap_or_else(|error| ProviderResponse::Error { error })
}

/// Channel credentials for the Provider: a CA-issued certificate over the
/// Provider's signing key.
pub fn provider_channel_config(ca: &crate::crypto::CertificateAuthority, provider_keys: &SigningKeyPair) -> ChannelConfig {
    ChannelConfig::new(ca.issue(PROVIDER_ID, provider_keys.public()), provider_keys.clone(), ca.public())
}

/// Serves `registry` on `addr` until the handle is stopped.
pub fn serve_provider(
    registry: Arc<Registry>,
    network: &Network,
    addr: SocketAddr,
    config: ChannelConfig,
    sim: transport::SimOptions,
) -> Result<ServerHandle, TransportError> {
    let listener = network.listen_with(addr, sim)?;
    Ok(transport::spawn_server(listener, config, move |mut channel, stop: &AtomicBool| {
        let peer = channel.peer_id().map(str::to_owned);
        loop {
            let frame = match transport::recv_until_stopped(&mut channel, stop) {
                Ok(Some(frame)) => frame,
                Ok(None) | Err(TransportError::Closed) => return,
                Err(e) => {
                    tracing::debug!(error = %e, "provider connection ended");
                    return;
                }
            };
            let response = if frame.frame_type != FrameType::ProviderRequest {
                ProviderResponse::Error {
                    error: RegistryError::Invalid(format!("unexpected {:?} frame", frame.frame_type)),
                }
            } else {
                match serde_json::from_slice(&frame.payload) {
                    Ok(request) => handle(&registry, peer.as_deref(), request),
                    Err(e) => ProviderResponse::Error {
                        error: RegistryError::Invalid(e.to_string()),
                    },
                }
            };
            let payload = serde_json::to_vec(&response).expect("responses serialize");
            if channel.send(&Frame::new(FrameType::ProviderResponse, payload)).is_err() {
                return;
            }
        }
    }))
}

/// Anything that can perform contact resolution on an agent's behalf.
pub trait ContactResolver: Send + Sync {
    fn resolve_contact(&self, receiver: &AgentId) -> Result<ContactGrant, ServiceError>;
    fn provider_public(&self) -> SigningPublicKey;
}

/// Remote Provider connection.
pub struct ProviderClient {
    channel: Mutex<transport::SecureChannel>,
    provider_public: SigningPublicKey,
}

impl fmt::Debug for ProviderClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProviderClient")
            .field("provider_public", &self.provider_public)
            .finish_non_exhaustive()
    }
}

impl ProviderClient {
    pub fn connect(network: &Network, config: &ChannelConfig, addr: SocketAddr) -> Result<Self, ServiceError> {
        let channel = transport::connect(network, config, addr, Some(PROVIDER_ID))?;
        let provider_public = channel
            .peer_certificate()
            .map(|c| c.subject_public)
            .ok_or_else(|| ServiceError::Protocol("provider presented no certificate".into()))?;
        Ok(Self {
            channel: Mutex::new(channel),
            provider_public,
        })
    }

    pub fn provider_public(&self) -> SigningPublicKey {
        self.provider_public
    }

    pub fn call(&self, request: &ProviderRequest) -> Result<ProviderResponse, ServiceError> {
        let payload = serde_json::to_vec(request).expect("requests serialize");
        let reply = self
            .channel
            .lock()
            .unwrap()
            .call(&Frame::new(FrameType::ProviderRequest, payload))?;
        if reply.frame_type != FrameType::ProviderResponse {
            return Err(ServiceError::Protocol(format!("{:?} frame", reply.frame_type)));
        }
        match serde_json::from_slice(&reply.payload) {
            Ok(ProviderResponse::Error { error }) => Err(ServiceError::Registry(error)),
            Ok(response) => Ok(response),
            Err(e) => Err(ServiceError::Protocol(e.to_string())),
        }
    }

    fn expect_ok(&self, request: &ProviderRequest) -> Result<(), ServiceError> {
        match self.call(request)? {
            ProviderResponse::Ok => Ok(()),
            other => Err(ServiceError::Protocol(format!("{other:?}"))),
        }
    }

    pub fn health(&self) -> Result<(usize, usize), ServiceError> {
        match self.call(&ProviderRequest::Health)? {
            ProviderResponse::Health { users, agents } => Ok((users, agents)),
            other => Err(ServiceError::Protocol(format!("{other:?}"))),
        }
    }

    pub fn register_user(&self, user_id: &str, password: &str, certificate: Certificate) -> Result<(), ServiceError> {
        self.expect_ok(&ProviderRequest::RegisterUser {
            user_id: user_id.to_owned(),
            password: password.to_owned(),
            certificate,
        })
    }

    pub fn register_agent(
        &self,
        credentials: &UserCredentials,
        submission: AgentRegistration,
    ) -> Result<Signature, ServiceError> {
        match self.call(&ProviderRequest::RegisterAgent {
            credentials: credentials.clone(),
            submission,
        })? {
            ProviderResponse::AgentRegistered { provider_signature } => Ok(provider_signature),
            other => Err(ServiceError::Protocol(format!("{other:?}"))),
        }
    }

    pub fn update_policy(
        &self,
        credentials: &UserCredentials,
        agent_id: &AgentId,
        policy: ContactPolicy,
    ) -> Result<(), ServiceError> {
        self.expect_ok(&ProviderRequest::UpdatePolicy {
            credentials: credentials.clone(),
            agent_id: agent_id.clone(),
            policy,
        })
    }

    pub fn refresh_otks(
        &self,
        credentials: &UserCredentials,
        agent_id: &AgentId,
        otks: Vec<SignedOtk>,
    ) -> Result<(), ServiceError> {
        self.expect_ok(&ProviderRequest::RefreshOtks {
            credentials: credentials.clone(),
            agent_id: agent_id.clone(),
            otks,
        })
    }

    pub fn deactivate_agent(&self, credentials: &UserCredentials, agent_id: &AgentId) -> Result<(), ServiceError> {
        self.expect_ok(&ProviderRequest::DeactivateAgent {
            credentials: credentials.clone(),
            agent_id: agent_id.clone(),
        })
    }

    pub fn reset_counter(
        &self,
        credentials: &UserCredentials,
        agent_id: &AgentId,
        initiator: &AgentId,
    ) -> Result<(), ServiceError> {
        self.expect_ok(&ProviderRequest::ResetCounter {
            credentials: credentials.clone(),
            agent_id: agent_id.clone(),
            initiator: initiator.clone(),
        })
    }

    pub fn pool_status(&self, credentials: &UserCredentials, agent_id: &AgentId) -> Result<(usize, usize), ServiceError> {
        match self.call(&ProviderRequest::PoolStatus {
            credentials: credentials.clone(),
            agent_id: agent_id.clone(),
        })? {
            ProviderResponse::PoolSize { pool_size, unconsumed } => Ok((pool_size, unconsumed)),
            other => Err(ServiceError::Protocol(format!("{other:?}"))),
        }
    }
}

impl ContactResolver for ProviderClient {
    fn resolve_contact(&self, receiver: &AgentId) -> Result<ContactGrant, ServiceError> {
        match self.call(&ProviderRequest::ResolveContact {
            receiver: receiver.clone(),
        })? {
            ProviderResponse::Grant { grant } => Ok(*grant),
            other => Err(ServiceError::Protocol(format!("{other:?}"))),
        }
    }

    fn provider_public(&self) -> SigningPublicKey {
        self.provider_public
    }
}

/// In-process resolver bound to one initiator.
pub struct LocalResolver {
    registry: Arc<Registry>,
    initiator: AgentId,
}

impl LocalResolver {
    pub fn new(registry: Arc<Registry>, initiator: AgentId) -> Self {
        Self { registry, initiator }
    }
}

impl ContactResolver for LocalResolver {
    fn resolve_contact(&self, receiver: &AgentId) -> Result<ContactGrant, ServiceError> {
        Ok(self.registry.resolve_contact(&self.initiator, receiver)?)
    }

    fn provider_public(&self) -> SigningPublicKey {
        self.registry.provider_public()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::CertificateAuthority;
    use crate::registry::{PasswordCost, RegistryConfig};

    #[test]
    fn registry_errors_keep_their_code_on_the_wire() {
        let errors = [
            RegistryError::AuthFailed,
            RegistryError::NotPermitted {
                receiver: "a@b.c:x".into(),
                initiator: "d@e.f:y".into(),
            },
            RegistryError::BadSignature(crate::records::SignedItem::Otk(3)),
            RegistryError::NotHuman("x@y.z".into()),
        ];
        for error in errors {
            let json = serde_json::to_string(&ProviderResponse::Error { error: error.clone() }).unwrap();
            assert!(json.contains(error.code().as_str()), "{json}");
            let back: ProviderResponse = serde_json::from_str(&json).unwrap();
            assert_eq!(back, ProviderResponse::Error { error });
        }
    }

    #[test]
    fn remote_roundtrip_over_sim_network() {
        let ca = CertificateAuthority::generate();
        let provider_keys = SigningKeyPair::generate();
        let mut config = RegistryConfig::new(ca.public(), provider_keys.clone());
        config.password_cost = PasswordCost::minimal();
        let registry = Arc::new(Registry::in_memory(config));
        let network = Network::simulated();
        let addr: SocketAddr = "127.0.0.1:7700".parse().unwrap();
        let server = serve_provider(
            registry.clone(),
            &network,
            addr,
            provider_channel_config(&ca, &provider_keys),
            Default::default(),
        )
        .unwrap();

        let user_keys = SigningKeyPair::generate();
        let cert = ca.issue("alice@x.com", user_keys.public());
        let client = ProviderClient::connect(
            &network,
            &ChannelConfig::new(cert.clone(), user_keys, ca.public()),
            addr,
        )
        .unwrap();
        assert_eq!(client.provider_public(), provider_keys.public());
        client.register_user("alice@x.com", "pw", cert.clone()).unwrap();
        let err = client.register_user("alice@x.com", "pw", cert).unwrap_err();
        assert_eq!(err.code(), Some(ErrorCode::Conflict));
        assert_eq!(client.health().unwrap(), (1, 0));
        // A user certificate is not an agent identity.
        let receiver: AgentId = "bob@x.com:cal".parse().unwrap();
        assert_eq!(client.resolve_contact(&receiver).unwrap_err().code(), Some(ErrorCode::AuthFailed));
        server.stop();
    }
}
