//! Agent runtime: registration preparation, the initiating side of contact
//! establishment, and the receiving side that issues and enforces tokens.
//!
//! All enforcement lives on the receiving side. [`AgentRuntime`] never trusts
//! anything an initiator keeps locally: a request reaches the application
//! handler only with a ledgered, live, holder-matched token.

use std::collections::HashMap;
use std::fmt;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::crypto::{self, Certificate, CertificateAuthority, ExchangeKeyPair, ExchangePublicKey, Signature, SigningKeyPair, SigningPublicKey};
use crate::exec::Execution;
use crate::guards::{Guard, Guards};
use crate::policy::{AgentId, ContactPolicy};
use crate::records::{
    agent_owner_message, provider_message, AgentRegistration, ContactGrant, EndpointDescriptor, InitiatorInfo,
    SignedItem, SignedOtk, TokenRequest,
};
use crate::service::{ContactResolver, ServiceError};
use crate::token::{
    self, AccessToken, Decision, OtkStore, RejectReason, TokenCache, TokenError, TokenLedger, TokenParams,
    DEFAULT_EXPIRY_GRACE_SECS,
};
use crate::transport::{self, ChannelConfig, Frame, FrameTap, FrameType, Network, SecureChannel, ServerHandle, SimOptions, TransportError};

/// Generates `n` one-time key pairs and their owner signatures.
pub fn prepare_otks(
    owner: &SigningKeyPair,
    agent_id: &AgentId,
    n: usize,
    execution: Execution,
) -> (Vec<ExchangeKeyPair>, Vec<SignedOtk>) {
    let secrets = execution.map_range(n, |_| ExchangeKeyPair::generate());
    let signed = execution.map(&secrets, |k| SignedOtk::sign(owner, agent_id, k.public()));
    (secrets, signed)
}

/// Key material and submission produced by [`prepare_registration`].
pub struct PreparedAgent {
    pub submission: AgentRegistration,
    pub tls_keys: SigningKeyPair,
    pub access_keys: ExchangeKeyPair,
    pub otk_secrets: Vec<ExchangeKeyPair>,
}

impl fmt::Debug for PreparedAgent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PreparedAgent")
            .field("agent_id", &self.submission.agent_id)
            .finish_non_exhaustive()
    }
}

/// Builds everything the owner submits to register an agent.
#[allow(clippy::too_many_arguments)]
pub fn prepare_registration(
    owner: &SigningKeyPair,
    ca: &CertificateAuthority,
    agent_id: AgentId,
    endpoint: EndpointDescriptor,
    policy: ContactPolicy,
    otk_count: usize,
    provider_public: &SigningPublicKey,
    execution: Execution,
) -> PreparedAgent {
    let tls_keys = SigningKeyPair::generate();
    let tls_cert = ca.issue(&agent_id.to_string(), tls_keys.public());
    let access_keys = ExchangeKeyPair::generate();
    let (otk_secrets, otks) = prepare_otks(owner, &agent_id, otk_count, execution);
    let owner_signature = owner.sign(&agent_owner_message(
        &agent_id,
        &endpoint,
        &tls_cert.subject_public,
        &access_keys.public(),
        provider_public,
    ));
    PreparedAgent {
        submission: AgentRegistration {
            agent_id,
            endpoint,
            policy,
            tls_cert,
            access_control_public: access_keys.public(),
            otks,
            owner_signature,
        },
        tls_keys,
        access_keys,
        otk_secrets,
    }
}

impl PreparedAgent {
    pub fn into_identity(
        self,
        provider_signature: Signature,
        owner_cert: Certificate,
        provider_public: SigningPublicKey,
    ) -> AgentIdentity {
        let otks = OtkStore::new();
        otks.extend(self.otk_secrets);
        AgentIdentity {
            agent_id: self.submission.agent_id,
            endpoint: self.submission.endpoint,
            tls_keys: self.tls_keys,
            tls_cert: self.submission.tls_cert,
            access_keys: self.access_keys,
            otks,
            owner_signature: self.submission.owner_signature,
            provider_signature,
            owner_cert,
            provider_public,
        }
    }
}

/// A registered agent's credentials.
pub struct AgentIdentity {
    pub agent_id: AgentId,
    pub endpoint: EndpointDescriptor,
    pub tls_keys: SigningKeyPair,
    pub tls_cert: Certificate,
    pub access_keys: ExchangeKeyPair,
    pub otks: OtkStore,
    pub owner_signature: Signature,
    pub provider_signature: Signature,
    pub owner_cert: Certificate,
    pub provider_public: SigningPublicKey,
}

impl fmt::Debug for AgentIdentity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AgentIdentity")
            .field("agent_id", &self.agent_id)
            .field("endpoint", &self.endpoint)
            .finish_non_exhaustive()
    }
}

impl AgentIdentity {
    pub fn initiator_info(&self) -> InitiatorInfo {
        InitiatorInfo {
            agent_id: self.agent_id.clone(),
            tls_cert: self.tls_cert.clone(),
            endpoint: self.endpoint.clone(),
            access_control_public: self.access_keys.public(),
            owner_signature: self.owner_signature,
            owner_cert: self.owner_cert.clone(),
        }
    }

    pub fn channel_config(&self, ca_public: SigningPublicKey) -> ChannelConfig {
        ChannelConfig::new(self.tls_cert.clone(), self.tls_keys.clone(), ca_public)
    }

    /// Whether the Provider's signature covers this identity's metadata.
    pub fn provider_signature_valid(&self) -> bool {
        crypto::verify(
            &self.provider_public,
            &provider_message(
                &self.agent_id,
                &self.tls_cert,
                &self.endpoint,
                &self.access_keys.public(),
                &self.owner_signature,
            ),
            &self.provider_signature,
        )
    }
}

/// Which receiver-side check stopped a request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Check {
    ProviderSignature,
    OwnerCertificate,
    OwnerSignature,
    OneTimeKey,
    TokenValidation,
    Malformed,
}

impl Check {
    pub fn name(self) -> &'static str {
        match self {
            Check::ProviderSignature => "provider-signature",
            Check::OwnerCertificate => "owner-certificate",
            Check::OwnerSignature => "owner-signature",
            Check::OneTimeKey => "one-time-key",
            Check::TokenValidation => "token-validation",
            Check::Malformed => "malformed",
        }
    }
}

/// Payload of an `ERROR` frame sent by a receiving agent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Error)]
#[error("{check:?} check failed: {code}")]
pub struct ProtocolFault {
    pub check: Check,
    pub code: String,
}

impl ProtocolFault {
    fn new(check: Check, code: &str) -> Self {
        Self {
            check,
            code: code.to_owned(),
        }
    }

    fn rejected(reason: RejectReason) -> Self {
        Self::new(Check::TokenValidation, reason.code())
    }

    pub fn reject_reason(&self) -> Option<RejectReason> {
        (self.check == Check::TokenValidation)
            .then(|| RejectReason::from_code(&self.code))
            .flatten()
    }

    fn frame(&self) -> Frame {
        Frame::new(FrameType::Error, serde_json::to_vec(self).expect("faults serialize"))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AgentError {
    #[error("provider: {0}")]
    Provider(#[from] ServiceError),
    #[error("grant verification failed: {0}")]
    GrantVerification(SignedItem),
    #[error("grant is for {actual}, expected {expected}")]
    GrantMismatch { expected: String, actual: String },
    #[error("transport: {0}")]
    Transport(#[from] TransportError),
    #[error("receiver refused the token request: {0}")]
    TokenRequestRejected(ProtocolFault),
    #[error("receiver rejected the request: {}", .0.code())]
    Rejected(RejectReason),
    #[error("issued token unusable: {0}")]
    TokenUnusable(TokenError),
    #[error("protocol violation: {0}")]
    Protocol(String),
}

/// Application logic behind an agent. Implementations must be reentrant
/// unless the runtime is configured to serialize calls.
pub trait RequestHandler: Send + Sync {
    fn handle(&self, from: Option<&AgentId>, payload: &[u8]) -> Vec<u8>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct EchoHandler;

impl RequestHandler for EchoHandler {
    fn handle(&self, _from: Option<&AgentId>, payload: &[u8]) -> Vec<u8> {
        payload.to_vec()
    }
}

/// Replies with a fixed script, cycling when it runs out.
#[derive(Debug)]
pub struct ScriptedHandler {
    replies: Vec<Vec<u8>>,
    next: AtomicUsize,
}

impl ScriptedHandler {
    pub fn new(replies: Vec<Vec<u8>>) -> Self {
        assert!(!replies.is_empty(), "script needs at least one reply");
        Self {
            replies,
            next: AtomicUsize::new(0),
        }
    }
}

impl RequestHandler for ScriptedHandler {
    fn handle(&self, _from: Option<&AgentId>, _payload: &[u8]) -> Vec<u8> {
        let i = self.next.fetch_add(1, Ordering::SeqCst);
        self.replies[i % self.replies.len()].clone()
    }
}

/// Wraps a handler and logs every call it receives.
#[derive(Debug, Default)]
pub struct RecordingHandler<H> {
    inner: H,
    calls: Mutex<Vec<(Option<AgentId>, Vec<u8>)>>,
}

impl<H: RequestHandler> RecordingHandler<H> {
    pub fn new(inner: H) -> Self {
        Self {
            inner,
            calls: Mutex::new(Vec::new()),
        }
    }

    pub fn calls(&self) -> Vec<(Option<AgentId>, Vec<u8>)> {
        self.calls.lock().unwrap().clone()
    }

    pub fn call_count(&self) -> usize {
        self.calls.lock().unwrap().len()
    }
}

impl<H: RequestHandler> RequestHandler for RecordingHandler<H> {
    fn handle(&self, from: Option<&AgentId>, payload: &[u8]) -> Vec<u8> {
        self.calls.lock().unwrap().push((from.cloned(), payload.to_vec()));
        self.inner.handle(from, payload)
    }
}

impl<H: RequestHandler + ?Sized> RequestHandler for Arc<H> {
    fn handle(&self, from: Option<&AgentId>, payload: &[u8]) -> Vec<u8> {
        (**self).handle(from, payload)
    }
}

/// Receiver-side settings.
#[derive(Debug, Clone, Copy)]
pub struct ReceiverConfig {
    pub token: TokenParams,
    pub grace_seconds: u64,
    pub guards: Guards,
    pub serialize_handler: bool,
}

impl Default for ReceiverConfig {
    fn default() -> Self {
        Self {
            token: TokenParams::default(),
            grace_seconds: DEFAULT_EXPIRY_GRACE_SECS,
            guards: Guards::all(),
            serialize_handler: false,
        }
    }
}

/// What happened on the receiving side, in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReceiverEvent {
    TokenIssued { peer: Option<String> },
    TokenRequestRefused { peer: Option<String>, check: Check },
    RequestAccepted { peer: Option<String>, used: u32 },
    RequestRejected { peer: Option<String>, reason: RejectReason },
    Released { peer: Option<String> },
}

/// The receiving half of an agent.
pub struct AgentRuntime {
    identity: Arc<AgentIdentity>,
    ca_public: SigningPublicKey,
    config: ReceiverConfig,
    ledger: TokenLedger,
    peers: Mutex<HashMap<String, ExchangePublicKey>>,
    handler: Box<dyn RequestHandler>,
    handler_lock: Mutex<()>,
    clock: Arc<dyn Clock>,
    events: Mutex<Vec<ReceiverEvent>>,
    tap: Option<Arc<FrameTap>>,
}

impl fmt::Debug for AgentRuntime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AgentRuntime")
            .field("agent_id", &self.identity.agent_id)
            .finish_non_exhaustive()
    }
}

impl AgentRuntime {
    pub fn new(
        identity: Arc<AgentIdentity>,
        ca_public: SigningPublicKey,
        config: ReceiverConfig,
        handler: Box<dyn RequestHandler>,
        clock: Arc<dyn Clock>,
    ) -> Self {
        Self {
            identity,
            ca_public,
            ledger: TokenLedger::new(config.grace_seconds).with_guards(config.guards),
            config,
            peers: Mutex::new(HashMap::new()),
            handler,
            handler_lock: Mutex::new(()),
            clock,
            events: Mutex::new(Vec::new()),
            tap: None,
        }
    }

    /// Records every plaintext frame on inbound channels.
    pub fn with_tap(mut self, tap: Arc<FrameTap>) -> Self {
        self.tap = Some(tap);
        self
    }

    pub fn identity(&self) -> &Arc<AgentIdentity> {
        &self.identity
    }

    pub fn ledger(&self) -> &TokenLedger {
        &self.ledger
    }

    pub fn events(&self) -> Vec<ReceiverEvent> {
        self.events.lock().unwrap().clone()
    }

    fn log(&self, event: ReceiverEvent) {
        tracing::debug!(agent = %self.identity.agent_id, ?event);
        self.events.lock().unwrap().push(event);
    }

    fn verify_metadata(&self, peer: Option<&Certificate>, request: &TokenRequest) -> Result<(), Check> {
        let info = &request.initiator;
        // The signed tuple is rebuilt from the channel identity, so metadata
        // copied from another agent cannot verify.
        let peer = peer.ok_or(Check::ProviderSignature)?;
        let channel_aid: AgentId = peer.subject_id.parse().map_err(|_| Check::ProviderSignature)?;
        let message = provider_message(
            &channel_aid,
            peer,
            &info.endpoint,
            &info.access_control_public,
            &info.owner_signature,
        );
        if !crypto::verify(&self.identity.provider_public, &message, &request.provider_signature) {
            return Err(Check::ProviderSignature);
        }
        let owner = &info.owner_cert;
        if owner.subject_id != channel_aid.user_id() || !owner.verify(&self.ca_public) {
            return Err(Check::OwnerCertificate);
        }
        let owner_message = agent_owner_message(
            &channel_aid,
            &info.endpoint,
            &peer.subject_public,
            &info.access_control_public,
            &self.identity.provider_public,
        );
        if !crypto::verify(&owner.subject_public, &owner_message, &info.owner_signature) {
            return Err(Check::OwnerSignature);
        }
        Ok(())
    }

    /// Verifies a token request and issues a token bound to the initiator's
    /// access-control key.
    pub fn handle_token_request(
        &self,
        peer: Option<&Certificate>,
        request: &TokenRequest,
    ) -> Result<AccessToken, ProtocolFault> {
        let peer_id = peer.map(|c| c.subject_id.clone());
        let refuse = |check: Check, code: &str| {
            self.log(ReceiverEvent::TokenRequestRefused {
                peer: peer_id.clone(),
                check,
            });
            ProtocolFault::new(check, code)
        };
        let guards = self.config.guards;
        if guards.enabled(Guard::ProviderSignature) {
            self.verify_metadata(peer, request)
                .map_err(|check| refuse(check, "BAD_SIGNATURE"))?;
        }
        let initiator_pac = request.initiator.access_control_public;
        let sdhk = match request.otk {
            Some(otk) => match token::derive_sdhk_receiver(&self.identity.otks, &otk, &initiator_pac) {
                Ok(key) => Some(key),
                Err(TokenError::InvalidOtk) => None,
                Err(_) => return Err(refuse(Check::OneTimeKey, "INVALID_KEY")),
            },
            None => None,
        };
        let sdhk = match sdhk {
            Some(key) => key,
            None if !guards.enabled(Guard::CredentialCheck) => {
                let shared = self
                    .identity
                    .access_keys
                    .dh(&initiator_pac)
                    .map_err(|_| refuse(Check::OneTimeKey, "INVALID_KEY"))?;
                crypto::kdf(&shared).map_err(|_| refuse(Check::OneTimeKey, "INVALID_KEY"))?
            }
            None => return Err(refuse(Check::OneTimeKey, "INVALID_OTK")),
        };
        let token = self
            .ledger
            .issue_for(
                &sdhk,
                self.config.token,
                initiator_pac,
                Some(request.initiator.agent_id.clone()),
                Vec::new(),
                self.clock.now(),
            )
            .map_err(|_| refuse(Check::Malformed, "INVALID_PARAMS"))?;
        if let Some(id) = &peer_id {
            self.peers.lock().unwrap().insert(id.clone(), initiator_pac);
        }
        self.log(ReceiverEvent::TokenIssued { peer: peer_id });
        Ok(token)
    }

    /// Validates the token attached to an application request and, only if
    /// accepted, invokes the handler.
    pub fn handle_app_request(
        &self,
        peer: Option<&Certificate>,
        token: Option<&[u8]>,
        payload: &[u8],
    ) -> Result<Vec<u8>, RejectReason> {
        let peer_id = peer.map(|c| c.subject_id.clone());
        let decision = match token {
            None => Decision::Reject(RejectReason::UnknownToken),
            Some(bytes) => {
                let presenter_pac = peer_id.as_ref().and_then(|id| self.peers.lock().unwrap().get(id).copied());
                self.ledger
                    .validate(&AccessToken(bytes.to_vec()), presenter_pac.as_ref(), self.clock.now())
            }
        };
        match decision {
            Decision::Accept { used } => {
                self.log(ReceiverEvent::RequestAccepted {
                    peer: peer_id.clone(),
                    used,
                });
                let from = peer_id.and_then(|id| id.parse::<AgentId>().ok());
                let _serial = self.config.serialize_handler.then(|| self.handler_lock.lock().unwrap());
                Ok(self.handler.handle(from.as_ref(), payload))
            }
            Decision::Reject(reason) => {
                self.log(ReceiverEvent::RequestRejected { peer: peer_id, reason });
                Err(reason)
            }
        }
    }

    pub fn handle_release(&self, peer: Option<&Certificate>, token: Option<&[u8]>) {
        if let Some(bytes) = token {
            if self.ledger.release(&AccessToken(bytes.to_vec())) {
                self.log(ReceiverEvent::Released {
                    peer: peer.map(|c| c.subject_id.clone()),
                });
            }
        }
    }

    /// Processes frames on one inbound channel until it closes, a request is
    /// refused, or `stop` is raised.
    pub fn serve_channel(&self, mut channel: SecureChannel, stop: &AtomicBool) {
        let peer = channel.peer_certificate().cloned();
        loop {
            let frame = match transport::recv_until_stopped(&mut channel, stop) {
                Ok(Some(frame)) => frame,
                Ok(None) => return,
                Err(e) => {
                    if e != TransportError::Closed {
                        tracing::debug!(agent = %self.identity.agent_id, error = %e, "inbound channel aborted");
                    }
                    return;
                }
            };
            let reply = match frame.frame_type {
                FrameType::TokenRequest => match serde_json::from_slice::<TokenRequest>(&frame.payload) {
                    Ok(request) => self
                        .handle_token_request(peer.as_ref(), &request)
                        .map(|t| Frame::new(FrameType::TokenResponse, t.0)),
                    Err(_) => Err(ProtocolFault::new(Check::Malformed, "MALFORMED")),
                },
                FrameType::AppRequest => self
                    .handle_app_request(peer.as_ref(), frame.token.as_deref(), &frame.payload)
                    .map(|body| Frame::new(FrameType::AppResponse, body))
                    .map_err(ProtocolFault::rejected),
                FrameType::Release => {
                    self.handle_release(peer.as_ref(), frame.token.as_deref());
                    continue;
                }
                _ => Err(ProtocolFault::new(Check::Malformed, "UNEXPECTED_FRAME")),
            };
            match reply {
                Ok(frame) => {
                    if channel.send(&frame).is_err() {
                        return;
                    }
                }
                Err(fault) => {
                    // Every refusal terminates the session.
                    let _ = channel.send(&fault.frame());
                    return;
                }
            }
        }
    }

    /// Listens on the identity's endpoint.
    pub fn serve(self: &Arc<Self>, network: &Network, sim: SimOptions) -> Result<ServerHandle, TransportError> {
        self.serve_at(network, self.identity.endpoint.socket_addr(), sim)
    }

    pub fn serve_at(
        self: &Arc<Self>,
        network: &Network,
        addr: SocketAddr,
        sim: SimOptions,
    ) -> Result<ServerHandle, TransportError> {
        let listener = network.listen_with(addr, sim)?;
        let mut config = self.identity.channel_config(self.ca_public);
        config.guards = self.config.guards;
        config.tap = self.tap.clone();
        let runtime = self.clone();
        Ok(transport::spawn_server(listener, config, move |channel, stop| {
            runtime.serve_channel(channel, stop)
        }))
    }
}

fn fault_from(frame: &Frame) -> ProtocolFault {
    serde_json::from_slice(&frame.payload).unwrap_or_else(|_| ProtocolFault::new(Check::Malformed, "UNPARSEABLE_ERROR"))
}

/// Sends a token request and waits for the token.
pub fn request_token(channel: &mut SecureChannel, request: &TokenRequest) -> Result<AccessToken, AgentError> {
    let payload = serde_json::to_vec(request).expect("token requests serialize");
    let reply = channel.call(&Frame::new(FrameType::TokenRequest, payload))?;
    match reply.frame_type {
        FrameType::TokenResponse => Ok(AccessToken(reply.payload)),
        FrameType::Error => Err(AgentError::TokenRequestRejected(fault_from(&reply))),
        other => Err(AgentError::Protocol(format!("unexpected {other:?} frame"))),
    }
}

/// Sends one application request, optionally carrying a token.
pub fn send_app_request(
    channel: &mut SecureChannel,
    token: Option<&AccessToken>,
    payload: &[u8],
) -> Result<Vec<u8>, AgentError> {
    let frame = match token {
        Some(t) => Frame::with_token(FrameType::AppRequest, t.0.clone(), payload.to_vec()),
        None => Frame::new(FrameType::AppRequest, payload.to_vec()),
    };
    let reply = channel.call(&frame)?;
    match reply.frame_type {
        FrameType::AppResponse => Ok(reply.payload),
        FrameType::Error => {
            let fault = fault_from(&reply);
            match fault.reject_reason() {
                Some(reason) => Err(AgentError::Rejected(reason)),
                None => Err(AgentError::TokenRequestRejected(fault)),
            }
        }
        other => Err(AgentError::Protocol(format!("unexpected {other:?} frame"))),
    }
}

pub fn send_release(channel: &mut SecureChannel, token: &AccessToken) -> Result<(), AgentError> {
    channel.send(&Frame::with_token(FrameType::Release, token.0.clone(), Vec::new()))?;
    Ok(())
}

/// Checks the three owner-issued items of a contact grant.
pub fn verify_grant(
    grant: &ContactGrant,
    receiver: &AgentId,
    ca_public: &SigningPublicKey,
    provider_public: &SigningPublicKey,
) -> Result<(), AgentError> {
    if grant.agent_id != *receiver || grant.tls_cert.subject_id != receiver.to_string() {
        return Err(AgentError::GrantMismatch {
            expected: receiver.to_string(),
            actual: grant.agent_id.to_string(),
        });
    }
    let owner = &grant.owner_cert;
    if owner.subject_id != receiver.user_id() || !owner.verify(ca_public) {
        return Err(AgentError::GrantVerification(SignedItem::UserCertificate));
    }
    let message = agent_owner_message(
        &grant.agent_id,
        &grant.endpoint,
        &grant.tls_cert.subject_public,
        &grant.access_control_public,
        provider_public,
    );
    if !crypto::verify(&owner.subject_public, &message, &grant.agent_signature) {
        return Err(AgentError::GrantVerification(SignedItem::AgentSignature));
    }
    let otk = SignedOtk {
        key: grant.otk,
        signature: grant.otk_signature,
    };
    if !otk.verify(&owner.subject_public, receiver) {
        return Err(AgentError::GrantVerification(SignedItem::Otk(0)));
    }
    Ok(())
}

/// The initiating half of an agent.
pub struct Initiator {
    identity: Arc<AgentIdentity>,
    resolver: Arc<dyn ContactResolver>,
    network: Network,
    ca_public: SigningPublicKey,
    clock: Arc<dyn Clock>,
    cache: Mutex<TokenCache>,
    sessions: Mutex<HashMap<AgentId, SecureChannel>>,
    endpoints: Mutex<HashMap<AgentId, SocketAddr>>,
    provider_cycles: AtomicU64,
    authorization_nanos: AtomicU64,
    tap: Option<Arc<FrameTap>>,
}

impl fmt::Debug for Initiator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Initiator")
            .field("agent_id", &self.identity.agent_id)
            .finish_non_exhaustive()
    }
}

impl Initiator {
    pub fn new(
        identity: Arc<AgentIdentity>,
        resolver: Arc<dyn ContactResolver>,
        network: Network,
        ca_public: SigningPublicKey,
        clock: Arc<dyn Clock>,
    ) -> Self {
        Self {
            identity,
            resolver,
            network,
            ca_public,
            clock,
            cache: Mutex::new(TokenCache::new()),
            sessions: Mutex::new(HashMap::new()),
            endpoints: Mutex::new(HashMap::new()),
            provider_cycles: AtomicU64::new(0),
            authorization_nanos: AtomicU64::new(0),
            tap: None,
        }
    }

    /// Records every plaintext frame on outbound channels.
    pub fn with_tap(mut self, tap: Arc<FrameTap>) -> Self {
        self.tap = Some(tap);
        self
    }

    pub fn identity(&self) -> &Arc<AgentIdentity> {
        &self.identity
    }

    /// Number of contact resolutions performed so far.
    pub fn provider_cycles(&self) -> u64 {
        self.provider_cycles.load(Ordering::SeqCst)
    }

    /// Wall time spent inside [`Initiator::initiate_contact`].
    pub fn authorization_time(&self) -> Duration {
        Duration::from_nanos(self.authorization_nanos.load(Ordering::SeqCst))
    }

    pub fn cached_token(&self, receiver: &AgentId) -> Option<AccessToken> {
        self.cache.lock().unwrap().should_reuse(receiver, self.clock.now())
    }

    fn channel_config(&self) -> ChannelConfig {
        let mut config = self.identity.channel_config(self.ca_public);
        config.tap = self.tap.clone();
        config
    }

    fn with_session<T>(
        &self,
        receiver: &AgentId,
        f: impl FnOnce(&mut SecureChannel) -> Result<T, AgentError>,
    ) -> Result<T, AgentError> {
        let mut sessions = self.sessions.lock().unwrap();
        if sessions.get(receiver).is_none_or(|c| c.is_broken()) {
            let addr = *self
                .endpoints
                .lock()
                .unwrap()
                .get(receiver)
                .ok_or_else(|| AgentError::Protocol(format!("no endpoint known for {receiver}")))?;
            let receiver_id = receiver.to_string();
            let channel = transport::connect(&self.network, &self.channel_config(), addr, Some(&receiver_id))?;
            sessions.insert(receiver.clone(), channel);
        }
        let channel = sessions.get_mut(receiver).expect("session just ensured");
        let result = f(channel);
        // Receivers close the session on every refusal.
        if matches!(
            result,
            Err(AgentError::Transport(_) | AgentError::Rejected(_) | AgentError::TokenRequestRejected(_) | AgentError::Protocol(_))
        ) {
            sessions.remove(receiver);
        }
        result
    }

    /// Obtains a fresh token for `receiver`: contact resolution, grant
    /// verification, channel establishment and token request.
    pub fn initiate_contact(&self, receiver: &AgentId) -> Result<AccessToken, AgentError> {
        let start = Instant::now();
        let result = self.contact(receiver);
        self.authorization_nanos
            .fetch_add(start.elapsed().as_nanos() as u64, Ordering::SeqCst);
        result
    }

    fn contact(&self, receiver: &AgentId) -> Result<AccessToken, AgentError> {
        let grant = self.resolver.resolve_contact(receiver)?;
        self.provider_cycles.fetch_add(1, Ordering::SeqCst);
        verify_grant(&grant, receiver, &self.ca_public, &self.resolver.provider_public())?;
        self.endpoints
            .lock()
            .unwrap()
            .insert(receiver.clone(), grant.endpoint.socket_addr());

        let request = TokenRequest {
            initiator: self.identity.initiator_info(),
            provider_signature: self.identity.provider_signature,
            otk: Some(grant.otk),
        };
        let token = self.with_session(receiver, |channel| request_token(channel, &request))?;
        let sdhk = token::derive_sdhk_initiator(&self.identity.access_keys, &grant.otk).map_err(AgentError::TokenUnusable)?;
        let plaintext = token::read_token(&sdhk, &token).map_err(AgentError::TokenUnusable)?;
        if plaintext.initiator_pac != self.identity.access_keys.public() {
            return Err(AgentError::Protocol("token bound to a different access-control key".into()));
        }
        self.cache.lock().unwrap().insert(receiver.clone(), token.clone(), &plaintext);
        Ok(token)
    }

    /// Sends one request, reusing a cached token when it has quota and time
    /// left. A quota or expiry rejection triggers at most one fresh contact.
    pub fn request(&self, receiver: &AgentId, payload: &[u8]) -> Result<Vec<u8>, AgentError> {
        let mut retried = false;
        loop {
            let token = match self.cached_token(receiver) {
                Some(t) => t,
                None => self.initiate_contact(receiver)?,
            };
            let sent = self.with_session(receiver, |channel| send_app_request(channel, Some(&token), payload));
            // A reset session is re-established once with the same token.
            let sent = match sent {
                Err(AgentError::Transport(TransportError::Closed)) => {
                    self.with_session(receiver, |channel| send_app_request(channel, Some(&token), payload))
                }
                other => other,
            };
            match sent {
                Ok(reply) => {
                    self.cache.lock().unwrap().record_use(receiver);
                    return Ok(reply);
                }
                Err(AgentError::Rejected(RejectReason::QuotaExceeded | RejectReason::Expired)) if !retried => {
                    retried = true;
                    self.cache.lock().unwrap().remove(receiver);
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// Discards the token for `receiver` on both sides. Idempotent.
    pub fn release(&self, receiver: &AgentId) -> Result<(), AgentError> {
        let Some(token) = self.cache.lock().unwrap().remove(receiver) else {
            return Ok(());
        };
        let mut sessions = self.sessions.lock().unwrap();
        if let Some(channel) = sessions.get_mut(receiver) {
            if send_release(channel, &token).is_err() {
                sessions.remove(receiver);
            }
        }
        Ok(())
    }

    /// Drops the open channel to `receiver`, keeping the cached token.
    pub fn disconnect(&self, receiver: &AgentId) {
        self.sessions.lock().unwrap().remove(receiver);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use crate::policy::PolicyRule;
    use crate::registry::{PasswordCost, Registry, RegistryConfig};
    use crate::records::UserCredentials;
    use crate::service::LocalResolver;

    struct World {
        ca: CertificateAuthority,
        registry: Arc<Registry>,
        network: Network,
        clock: Arc<ManualClock>,
        next_port: std::cell::Cell<u16>,
    }

    struct Owner {
        keys: SigningKeyPair,
        cert: Certificate,
        creds: UserCredentials,
    }

    impl World {
        fn new() -> Self {
            let ca = CertificateAuthority::generate();
            let mut config = RegistryConfig::new(ca.public(), SigningKeyPair::generate());
            config.password_cost = PasswordCost::minimal();
            Self {
                registry: Arc::new(Registry::in_memory(config)),
                ca,
                network: Network::simulated(),
                clock: Arc::new(ManualClock::new(1_000_000)),
                next_port: std::cell::Cell::new(8000),
            }
        }

        fn owner(&self, id: &str) -> Owner {
            let keys = SigningKeyPair::generate();
            let cert = self.ca.issue(id, keys.public());
            self.registry.register_user(id, "pw", cert.clone()).unwrap();
            Owner {
                keys,
                cert,
                creds: UserCredentials::new(id, "pw"),
            }
        }

        fn agent(&self, owner: &Owner, name: &str, otks: usize, policy: ContactPolicy) -> Arc<AgentIdentity> {
            let port = self.next_port.get();
            self.next_port.set(port + 1);
            let prepared = prepare_registration(
                &owner.keys,
                &self.ca,
                AgentId::new(&owner.creds.user_id, name).unwrap(),
                EndpointDescriptor::new("test", "127.0.0.1".parse().unwrap(), port),
                policy,
                otks,
                &self.registry.provider_public(),
                Execution::Parallel,
            );
            let sig = self
                .registry
                .register_agent(&owner.creds, prepared.submission.clone())
                .unwrap();
            Arc::new(prepared.into_identity(sig, owner.cert.clone(), self.registry.provider_public()))
        }

        fn runtime(&self, identity: Arc<AgentIdentity>, qmax: u32) -> (Arc<AgentRuntime>, Arc<RecordingHandler<EchoHandler>>, ServerHandle) {
            let handler = Arc::new(RecordingHandler::new(EchoHandler));
            let config = ReceiverConfig {
                token: TokenParams {
                    lifetime_seconds: 600,
                    max_requests: qmax,
                },
                ..Default::default()
            };
            let runtime = Arc::new(AgentRuntime::new(
                identity,
                self.ca.public(),
                config,
                Box::new(handler.clone()),
                self.clock.clone(),
            ));
            let server = runtime.serve(&self.network, SimOptions::default()).unwrap();
            (runtime, handler, server)
        }

        fn initiator(&self, identity: Arc<AgentIdentity>) -> Initiator {
            let resolver = Arc::new(LocalResolver::new(self.registry.clone(), identity.agent_id.clone()));
            Initiator::new(identity, resolver, self.network.clone(), self.ca.public(), self.clock.clone())
        }
    }

    fn open_policy() -> ContactPolicy {
        ContactPolicy::new(vec![PolicyRule::new("*:*", 100).unwrap()]).unwrap()
    }

    #[test]
    fn prepared_registration_is_self_consistent() {
        let owner = SigningKeyPair::generate();
        let ca = CertificateAuthority::generate();
        let provider = SigningKeyPair::generate().public();
        let aid: AgentId = "a@b.com:x".parse().unwrap();
        let p = prepare_registration(
            &owner,
            &ca,
            aid.clone(),
            EndpointDescriptor::new("d", "127.0.0.1".parse().unwrap(), 1),
            ContactPolicy::empty(),
            10,
            &provider,
            Execution::Sequential,
        );
        assert_eq!(p.submission.otks.len(), 10);
        assert!(p.submission.otks.iter().all(|o| o.verify(&owner.public(), &aid)));
        let msg = agent_owner_message(
            &aid,
            &p.submission.endpoint,
            &p.submission.tls_cert.subject_public,
            &p.submission.access_control_public,
            &provider,
        );
        assert!(crypto::verify(&owner.public(), &msg, &p.submission.owner_signature));
        assert!(p.submission.tls_cert.verify(&ca.public()));
    }

    #[test]
    fn quota_cycle_and_handler_sequence() {
        let w = World::new();
        let alice = w.owner("alice@x.com");
        let bob = w.owner("bob@x.com");
        let receiver = w.agent(&alice, "cal", 10, open_policy());
        let initiator_id = w.agent(&bob, "mail", 0, ContactPolicy::empty());
        let (runtime, handler, _server) = w.runtime(receiver.clone(), 10);
        let init = w.initiator(initiator_id.clone());

        for i in 0..25u8 {
            assert_eq!(init.request(&receiver.agent_id, &[i]).unwrap(), vec![i]);
        }
        assert_eq!(init.provider_cycles(), 3);
        assert_eq!(w.registry.pool_status(&receiver.agent_id), Some((10, 7)));
        assert_eq!(receiver.otks.len(), 7);
        let seen: Vec<u8> = handler.calls().into_iter().map(|(_, p)| p[0]).collect();
        assert_eq!(seen, (0..25).collect::<Vec<_>>());
        assert!(handler.calls().iter().all(|(from, _)| from.as_ref() == Some(&initiator_id.agent_id)));
        assert_eq!(runtime.ledger().live_count(), 3);
    }

    #[test]
    fn over_quota_on_same_token_is_rejected_without_handler_call() {
        let w = World::new();
        let alice = w.owner("alice@x.com");
        let bob = w.owner("bob@x.com");
        let receiver = w.agent(&alice, "cal", 5, open_policy());
        let initiator_id = w.agent(&bob, "mail", 0, ContactPolicy::empty());
        let (_runtime, handler, _server) = w.runtime(receiver.clone(), 10);
        let init = w.initiator(initiator_id.clone());
        let token = init.initiate_contact(&receiver.agent_id).unwrap();

        let mut ch = transport::connect(
            &w.network,
            &initiator_id.channel_config(w.ca.public()),
            receiver.endpoint.socket_addr(),
            None,
        )
        .unwrap();
        for i in 0..10u8 {
            send_app_request(&mut ch, Some(&token), &[i]).unwrap();
        }
        assert_eq!(
            send_app_request(&mut ch, Some(&token), b"11").unwrap_err(),
            AgentError::Rejected(RejectReason::QuotaExceeded)
        );
        assert_eq!(handler.call_count(), 10);
    }

    #[test]
    fn release_then_reuse_is_unknown_and_next_contact_uses_fresh_otk() {
        let w = World::new();
        let alice = w.owner("alice@x.com");
        let bob = w.owner("bob@x.com");
        let receiver = w.agent(&alice, "cal", 5, open_policy());
        let initiator_id = w.agent(&bob, "mail", 0, ContactPolicy::empty());
        let (_runtime, _handler, _server) = w.runtime(receiver.clone(), 10);
        let init = w.initiator(initiator_id.clone());
        init.request(&receiver.agent_id, b"hi").unwrap();
        let token = init.cached_token(&receiver.agent_id).unwrap();
        init.release(&receiver.agent_id).unwrap();
        init.release(&receiver.agent_id).unwrap();
        let mut ch = transport::connect(
            &w.network,
            &initiator_id.channel_config(w.ca.public()),
            receiver.endpoint.socket_addr(),
            None,
        )
        .unwrap();
        assert_eq!(
            send_app_request(&mut ch, Some(&token), b"x").unwrap_err(),
            AgentError::Rejected(RejectReason::UnknownToken)
        );
        let counter = w.registry.counter(&receiver.agent_id, &initiator_id.agent_id).unwrap();
        init.request(&receiver.agent_id, b"again").unwrap();
        assert_eq!(w.registry.counter(&receiver.agent_id, &initiator_id.agent_id), Some(counter - 1));
    }

    #[test]
    fn corrupted_grant_aborts_before_contacting_receiver() {
        let w = World::new();
        let alice = w.owner("alice@x.com");
        let bob = w.owner("bob@x.com");
        let receiver = w.agent(&alice, "cal", 5, open_policy());
        let initiator_id = w.agent(&bob, "mail", 0, ContactPolicy::empty());
        let mut grant = w.registry.resolve_contact(&initiator_id.agent_id, &receiver.agent_id).unwrap();
        let ok = verify_grant(&grant, &receiver.agent_id, &w.ca.public(), &w.registry.provider_public());
        assert!(ok.is_ok());
        grant.otk_signature.0[5] ^= 1;
        assert_eq!(
            verify_grant(&grant, &receiver.agent_id, &w.ca.public(), &w.registry.provider_public()).unwrap_err(),
            AgentError::GrantVerification(SignedItem::Otk(0))
        );
        let mut grant2 = w.registry.resolve_contact(&initiator_id.agent_id, &receiver.agent_id).unwrap();
        grant2.endpoint.port += 1;
        assert_eq!(
            verify_grant(&grant2, &receiver.agent_id, &w.ca.public(), &w.registry.provider_public()).unwrap_err(),
            AgentError::GrantVerification(SignedItem::AgentSignature)
        );
    }

    #[test]
    fn session_reset_resumes_with_cached_token() {
        let w = World::new();
        let alice = w.owner("alice@x.com");
        let bob = w.owner("bob@x.com");
        let receiver = w.agent(&alice, "cal", 5, open_policy());
        let initiator_id = w.agent(&bob, "mail", 0, ContactPolicy::empty());
        let (_runtime, handler, _server) = w.runtime(receiver.clone(), 10);
        let init = w.initiator(initiator_id);
        init.request(&receiver.agent_id, b"1").unwrap();
        init.disconnect(&receiver.agent_id);
        init.request(&receiver.agent_id, b"2").unwrap();
        assert_eq!(init.provider_cycles(), 1);
        assert_eq!(handler.call_count(), 2);
    }

    #[test]
    fn expired_token_triggers_single_fresh_contact() {
        let w = World::new();
        let alice = w.owner("alice@x.com");
        let bob = w.owner("bob@x.com");
        let receiver = w.agent(&alice, "cal", 5, open_policy());
        let initiator_id = w.agent(&bob, "mail", 0, ContactPolicy::empty());
        let (_runtime, _handler, _server) = w.runtime(receiver.clone(), 10);
        let init = w.initiator(initiator_id);
        init.request(&receiver.agent_id, b"1").unwrap();
        w.clock.advance(600 + DEFAULT_EXPIRY_GRACE_SECS + 1);
        init.request(&receiver.agent_id, b"2").unwrap();
        assert_eq!(init.provider_cycles(), 2);
    }

    #[test]
    fn secrets_never_cross_the_wire() {
        let w = World::new();
        let alice = w.owner("alice@x.com");
        let bob = w.owner("bob@x.com");
        let receiver = w.agent(&alice, "cal", 3, open_policy());
        let initiator_id = w.agent(&bob, "mail", 0, ContactPolicy::empty());
        let tap = Arc::new(FrameTap::default());
        let runtime = Arc::new(
            AgentRuntime::new(
                receiver.clone(),
                w.ca.public(),
                ReceiverConfig::default(),
                Box::new(EchoHandler),
                w.clock.clone(),
            )
            .with_tap(tap.clone()),
        );
        let _server = runtime.serve(&w.network, SimOptions::default()).unwrap();
        let init = w.initiator(initiator_id.clone()).with_tap(tap.clone());
        for i in 0..3u8 {
            init.request(&receiver.agent_id, &[i]).unwrap();
        }
        let secrets: Vec<Vec<u8>> = vec![
            receiver.access_keys.secret_bytes().to_vec(),
            initiator_id.access_keys.secret_bytes().to_vec(),
            receiver.tls_keys.secret_bytes().to_vec(),
            initiator_id.tls_keys.secret_bytes().to_vec(),
        ];
        let frames = tap.frames();
        assert!(frames.len() >= 8);
        for (_, frame) in frames {
            let mut bytes = frame.payload.clone();
            bytes.extend(frame.token.unwrap_or_default());
            for s in &secrets {
                assert!(!bytes.windows(32).any(|w| w == s.as_slice()));
                assert!(!String::from_utf8_lossy(&bytes).contains(&hex::encode(s)));
            }
        }
    }

    #[test]
    fn concurrent_inbound_sessions() {
        let w = World::new();
        let alice = w.owner("alice@x.com");
        let receiver = w.agent(&alice, "cal", 64, open_policy());
        let (_runtime, handler, _server) = w.runtime(receiver.clone(), 10);
        let initiators: Vec<_> = (0..8)
            .map(|i| {
                let o = w.owner(&format!("u{i}@x.com"));
                w.initiator(w.agent(&o, "a", 0, ContactPolicy::empty()))
            })
            .collect();
        std::thread::scope(|s| {
            for init in &initiators {
                let target = receiver.agent_id.clone();
                s.spawn(move || {
                    for i in 0..15u8 {
                        assert_eq!(init.request(&target, &[i]).unwrap(), vec![i]);
                    }
                });
            }
        });
        assert_eq!(handler.call_count(), 8 * 15);
    }
}
