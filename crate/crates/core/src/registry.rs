//! The Provider's authoritative state: user registry, agent registry, OTK
//! pools and per-pair OTK counters.
//!
//! Every mutation is first appended to a [`RegistryStore`] and only then
//! applied in memory, so replaying the store reproduces the registry exactly.
//! Agent records are locked individually; contact resolution on one receiver
//! never blocks operations on another.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use argon2::password_hash::rand_core::OsRng as PhOsRng;
use argon2::password_hash::{PasswordHash, PasswordHasher, PasswordVerifier, SaltString};
use argon2::{Algorithm, Argon2, Params, Version};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{self, Certificate, ExchangePublicKey, Signature, SigningKeyPair, SigningPublicKey};
use crate::exec::Execution;
use crate::guards::{Guard, Guards};
use crate::policy::{self, AgentId, ContactPolicy, PolicyDecision};
use crate::records::{
    agent_owner_message, provider_message, AgentRegistration, ContactGrant, EndpointDescriptor, SignedItem,
    SignedOtk, UserCredentials,
};

/// Stable machine-readable error codes of the Provider API.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    AuthFailed,
    Conflict,
    NotPermitted,
    QuotaExhausted,
    PoolExhausted,
    NotFound,
    BadSignature,
    Forbidden,
    NotHuman,
    Invalid,
    Internal,
}

impl ErrorCode {
    pub const ALL: [ErrorCode; 11] = [
        ErrorCode::AuthFailed,
        ErrorCode::Conflict,
        ErrorCode::NotPermitted,
        ErrorCode::QuotaExhausted,
        ErrorCode::PoolExhausted,
        ErrorCode::NotFound,
        ErrorCode::BadSignature,
        ErrorCode::Forbidden,
        ErrorCode::NotHuman,
        ErrorCode::Invalid,
        ErrorCode::Internal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::AuthFailed => "AUTH_FAILED",
            ErrorCode::Conflict => "CONFLICT",
            ErrorCode::NotPermitted => "NOT_PERMITTED",
            ErrorCode::QuotaExhausted => "QUOTA_EXHAUSTED",
            ErrorCode::PoolExhausted => "POOL_EXHAUSTED",
            ErrorCode::NotFound => "NOT_FOUND",
            ErrorCode::BadSignature => "BAD_SIGNATURE",
            ErrorCode::Forbidden => "FORBIDDEN",
            ErrorCode::NotHuman => "NOT_HUMAN",
            ErrorCode::Invalid => "INVALID",
            ErrorCode::Internal => "INTERNAL",
        }
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Serialized on the wire as `{"code": ..., "detail": ...}`.
#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "code", content = "detail", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RegistryError {
    #[error("authentication failed")]
    AuthFailed,
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("{initiator} is not permitted to contact {receiver}")]
    NotPermitted { receiver: String, initiator: String },
    #[error("OTK quota for {initiator} towards {receiver} is exhausted")]
    QuotaExhausted { receiver: String, initiator: String },
    #[error("OTK pool of {0} is exhausted")]
    PoolExhausted(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("bad signature: {0}")]
    BadSignature(SignedItem),
    #[error("forbidden")]
    Forbidden,
    #[error("human verification failed for {0}")]
    NotHuman(String),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl RegistryError {
    pub fn code(&self) -> ErrorCode {
        match self {
            RegistryError::AuthFailed => ErrorCode::AuthFailed,
            RegistryError::Conflict(_) => ErrorCode::Conflict,
            RegistryError::NotPermitted { .. } => ErrorCode::NotPermitted,
            RegistryError::QuotaExhausted { .. } => ErrorCode::QuotaExhausted,
            RegistryError::PoolExhausted(_) => ErrorCode::PoolExhausted,
            RegistryError::NotFound(_) => ErrorCode::NotFound,
            RegistryError::BadSignature(_) => ErrorCode::BadSignature,
            RegistryError::Forbidden => ErrorCode::Forbidden,
            RegistryError::NotHuman(_) => ErrorCode::NotHuman,
            RegistryError::Invalid(_) => ErrorCode::Invalid,
            RegistryError::Internal(_) => ErrorCode::Internal,
        }
    }
}

impl From<io::Error> for RegistryError {
    fn from(e: io::Error) -> Self {
        RegistryError::Internal(e.to_string())
    }
}

/// External service deciding whether a registering user is human.
pub trait HumanVerifier: Send + Sync {
    fn is_human(&self, user_id: &str) -> bool;
}

/// Approves everyone except the listed user ids (exact match) or domains
/// (entries starting with `@`).
#[derive(Debug, Default, Clone)]
pub struct DenylistVerifier {
    denied: HashSet<String>,
}

impl DenylistVerifier {
    pub fn new<I, S>(denied: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            denied: denied.into_iter().map(Into::into).collect(),
        }
    }
}

impl HumanVerifier for DenylistVerifier {
    fn is_human(&self, user_id: &str) -> bool {
        let domain = user_id.find('@').map(|i| &user_id[i..]);
        !self.denied.contains(user_id) && !domain.is_some_and(|d| self.denied.contains(d))
    }
}

/// Argon2id cost parameters for password verifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PasswordCost {
    pub memory_kib: u32,
    pub iterations: u32,
}

impl Default for PasswordCost {
    fn default() -> Self {
        Self {
            memory_kib: 19 * 1024,
            iterations: 2,
        }
    }
}

impl PasswordCost {
    /// Minimal cost for throwaway harness worlds.
    pub fn minimal() -> Self {
        Self {
            memory_kib: 64,
            iterations: 1,
        }
    }

    fn hasher(self) -> Argon2<'static> {
        let params = Params::new(self.memory_kib, self.iterations, 1, None).expect("valid argon2 params");
        Argon2::new(Algorithm::Argon2id, Version::V0x13, params)
    }
}

fn hash_password(cost: PasswordCost, password: &str) -> Result<String, RegistryError> {
    let salt = SaltString::generate(&mut PhOsRng);
    cost.hasher()
        .hash_password(password.as_bytes(), &salt)
        .map(|h| h.to_string())
        .map_err(|e| RegistryError::Internal(e.to_string()))
}

fn check_password(verifier: &str, password: &str) -> bool {
    let Ok(parsed) = PasswordHash::new(verifier) else {
        return false;
    };
    // The PHC string carries its own parameters.
    Argon2::default().verify_password(password.as_bytes(), &parsed).is_ok()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: String,
    pub password_verifier: String,
    pub certificate: Certificate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PooledOtk {
    pub key: ExchangePublicKey,
    pub signature: Signature,
    pub consumed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentRecord {
    pub agent_id: AgentId,
    pub owner: String,
    pub endpoint: EndpointDescriptor,
    pub tls_cert: Certificate,
    pub access_control_public: ExchangePublicKey,
    pub otk_pool: Vec<PooledOtk>,
    pub policy: ContactPolicy,
    pub owner_signature: Signature,
    pub provider_signature: Signature,
    pub active: bool,
}

impl AgentRecord {
    pub fn unconsumed(&self) -> usize {
        self.otk_pool.iter().filter(|o| !o.consumed).count()
    }
}

/// One write-ahead log entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum RegistryEvent {
    UserRegistered { record: UserRecord },
    AgentRegistered { record: AgentRecord },
    ContactResolved { receiver: AgentId, initiator: AgentId, otk: ExchangePublicKey, remaining: u32 },
    PolicyUpdated { agent_id: AgentId, policy: ContactPolicy },
    OtksRefreshed { agent_id: AgentId, otks: Vec<SignedOtk> },
    AgentDeactivated { agent_id: AgentId },
    CounterReset { agent_id: AgentId, initiator: AgentId },
}

/// Durable event sink. `load` returns events in append order.
pub trait RegistryStore: Send + Sync {
    fn append(&self, event: &RegistryEvent) -> io::Result<()>;
    fn load(&self) -> io::Result<Vec<RegistryEvent>>;
}

#[derive(Debug, Default)]
pub struct MemoryStore {
    events: Mutex<Vec<RegistryEvent>>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl RegistryStore for MemoryStore {
    fn append(&self, event: &RegistryEvent) -> io::Result<()> {
        self.events.lock().unwrap().push(event.clone());
        Ok(())
    }

    fn load(&self) -> io::Result<Vec<RegistryEvent>> {
        Ok(self.events.lock().unwrap().clone())
    }
}

/// JSON-lines append log, synced to disk after every event.
#[derive(Debug)]
pub struct FileStore {
    path: PathBuf,
    file: Mutex<File>,
}

impl FileStore {
    pub fn open(path: impl AsRef<Path>) -> io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new().create(true).append(true).read(true).open(&path)?;
        Ok(Self {
            path,
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl RegistryStore for FileStore {
    fn append(&self, event: &RegistryEvent) -> io::Result<()> {
        let mut line = serde_json::to_vec(event)?;
        line.push(b'\n');
        let mut file = self.file.lock().unwrap();
        file.write_all(&line)?;
        file.sync_data()
    }

    fn load(&self) -> io::Result<Vec<RegistryEvent>> {
        let reader = BufReader::new(File::open(&self.path)?);
        let mut events = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let event = serde_json::from_str(&line).map_err(|e| {
                io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!("{}: corrupt record at line {}: {e}", self.path.display(), n + 1),
                )
            })?;
            events.push(event);
        }
        Ok(events)
    }
}

#[derive(Debug)]
struct AgentEntry {
    record: AgentRecord,
    counters: BTreeMap<AgentId, u32>,
    cursor: usize,
}

impl AgentEntry {
    fn new(record: AgentRecord) -> Self {
        let mut entry = Self {
            record,
            counters: BTreeMap::new(),
            cursor: 0,
        };
        entry.advance_cursor();
        entry
    }

    fn advance_cursor(&mut self) {
        while self.cursor < self.record.otk_pool.len() && self.record.otk_pool[self.cursor].consumed {
            self.cursor += 1;
        }
    }

    fn next_otk(&self) -> Option<&PooledOtk> {
        self.record.otk_pool.get(self.cursor)
    }

    fn apply_resolved(&mut self, initiator: &AgentId, otk: &ExchangePublicKey, remaining: u32) {
        if let Some(slot) = self.record.otk_pool.iter_mut().find(|o| o.key == *otk && !o.consumed) {
            slot.consumed = true;
        }
        self.advance_cursor();
        self.counters.insert(initiator.clone(), remaining);
    }

    fn apply_policy(&mut self, policy: ContactPolicy) {
        for (initiator, remaining) in self.counters.iter_mut() {
            if let PolicyDecision::Allowed(budget) = policy.decide(initiator) {
                *remaining = (*remaining).min(budget);
            }
        }
        self.record.policy = policy;
    }

    fn apply_refresh(&mut self, otks: &[SignedOtk]) {
        self.record.otk_pool.retain(|o| !o.consumed);
        self.record.otk_pool.extend(otks.iter().map(|o| PooledOtk {
            key: o.key,
            signature: o.signature,
            consumed: false,
        }));
        self.cursor = 0;
        self.advance_cursor();
    }
}

#[derive(Debug, Default)]
struct AgentIndex {
    by_id: HashMap<AgentId, Arc<Mutex<AgentEntry>>>,
    endpoints: HashMap<SocketAddr, AgentId>,
}

#[derive(Debug, Default)]
pub struct RegistryStats {
    resolve_calls: AtomicU64,
    grants_issued: AtomicU64,
}

impl RegistryStats {
    pub fn resolve_calls(&self) -> u64 {
        self.resolve_calls.load(Ordering::SeqCst)
    }

    pub fn grants_issued(&self) -> u64 {
        self.grants_issued.load(Ordering::SeqCst)
    }
}

pub struct RegistryConfig {
    pub ca_public: SigningPublicKey,
    pub provider_keys: SigningKeyPair,
    pub verifier: Box<dyn HumanVerifier>,
    pub password_cost: PasswordCost,
    pub guards: Guards,
    pub execution: Execution,
}

impl RegistryConfig {
    pub fn new(ca_public: SigningPublicKey, provider_keys: SigningKeyPair) -> Self {
        Self {
            ca_public,
            provider_keys,
            verifier: Box::new(DenylistVerifier::default()),
            password_cost: PasswordCost::default(),
            guards: Guards::all(),
            execution: Execution::default(),
        }
    }
}

/// Problem found by [`Registry::audit`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AuditFinding {
    pub agent_id: AgentId,
    pub item: SignedItem,
}

/// Canonical, secret-free snapshot of registry contents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryDump {
    pub users: Vec<UserSummary>,
    pub agents: Vec<AgentSummary>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSummary {
    pub user_id: String,
    pub certificate: Certificate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentSummary {
    pub agent_id: AgentId,
    pub owner: String,
    pub endpoint: EndpointDescriptor,
    pub active: bool,
    pub policy: ContactPolicy,
    pub pool_size: usize,
    pub unconsumed: usize,
    pub counters: BTreeMap<String, u32>,
}

pub struct Registry {
    ca_public: SigningPublicKey,
    provider_keys: SigningKeyPair,
    verifier: Box<dyn HumanVerifier>,
    password_cost: PasswordCost,
    guards: Guards,
    execution: Execution,
    users: RwLock<HashMap<String, UserRecord>>,
    agents: RwLock<AgentIndex>,
    store: Box<dyn RegistryStore>,
    stats: RegistryStats,
}

impl fmt::Debug for Registry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry")
            .field("provider", &self.provider_keys.public())
            .finish_non_exhaustive()
    }
}

impl Registry {
    /// Builds a registry and replays everything already in `store`.
    pub fn open(config: RegistryConfig, store: Box<dyn RegistryStore>) -> Result<Self, RegistryError> {
        let registry = Self {
            ca_public: config.ca_public,
            provider_keys: config.provider_keys,
            verifier: config.verifier,
            password_cost: config.password_cost,
            guards: config.guards,
            execution: config.execution,
            users: RwLock::new(HashMap::new()),
            agents: RwLock::new(AgentIndex::default()),
            store,
            stats: RegistryStats::default(),
        };
        for event in registry.store.load()? {
            registry.replay(event)?;
        }
        Ok(registry)
    }

    pub fn in_memory(config: RegistryConfig) -> Self {
        Self::open(config, Box::new(MemoryStore::new())).expect("empty memory store replays")
    }

    pub fn provider_public(&self) -> SigningPublicKey {
        self.provider_keys.public()
    }

    pub fn ca_public(&self) -> SigningPublicKey {
        self.ca_public
    }

    pub fn stats(&self) -> &RegistryStats {
        &self.stats
    }

    fn replay(&self, event: RegistryEvent) -> Result<(), RegistryError> {
        let corrupt = |what: &str| RegistryError::Internal(format!("log replay: {what}"));
        match event {
            RegistryEvent::UserRegistered { record } => {
                self.users.write().unwrap().insert(record.user_id.clone(), record);
            }
            RegistryEvent::AgentRegistered { record } => {
                let mut index = self.agents.write().unwrap();
                index.endpoints.insert(record.endpoint.socket_addr(), record.agent_id.clone());
                index
                    .by_id
                    .insert(record.agent_id.clone(), Arc::new(Mutex::new(AgentEntry::new(record))));
            }
            RegistryEvent::ContactResolved { receiver, initiator, otk, remaining } => {
                let entry = self.entry(&receiver).ok_or_else(|| corrupt("unknown receiver"))?;
                entry.lock().unwrap().apply_resolved(&initiator, &otk, remaining);
            }
            RegistryEvent::PolicyUpdated { agent_id, policy } => {
                let entry = self.entry(&agent_id).ok_or_else(|| corrupt("unknown agent"))?;
                entry.lock().unwrap().apply_policy(policy);
            }
            RegistryEvent::OtksRefreshed { agent_id, otks } => {
                let entry = self.entry(&agent_id).ok_or_else(|| corrupt("unknown agent"))?;
                entry.lock().unwrap().apply_refresh(&otks);
            }
            RegistryEvent::AgentDeactivated { agent_id } => {
                let entry = self.entry(&agent_id).ok_or_else(|| corrupt("unknown agent"))?;
                entry.lock().unwrap().record.active = false;
            }
            RegistryEvent::CounterReset { agent_id, initiator } => {
                let entry = self.entry(&agent_id).ok_or_else(|| corrupt("unknown agent"))?;
                entry.lock().unwrap().counters.remove(&initiator);
            }
        }
        Ok(())
    }

    fn entry(&self, agent_id: &AgentId) -> Option<Arc<Mutex<AgentEntry>>> {
        self.agents.read().unwrap().by_id.get(agent_id).cloned()
    }

    fn user_public(&self, user_id: &str) -> Option<SigningPublicKey> {
        self.users.read().unwrap().get(user_id).map(|u| u.certificate.subject_public)
    }

    pub fn register_user(&self, user_id: &str, password: &str, certificate: Certificate) -> Result<(), RegistryError> {
        if !policy::is_email_form(user_id) {
            return Err(RegistryError::Invalid(format!("user id {user_id:?} is not email-form")));
        }
        if certificate.subject_id != user_id || !certificate.verify(&self.ca_public) {
            return Err(RegistryError::BadSignature(SignedItem::UserCertificate));
        }
        if self.guards.enabled(Guard::HumanVerification) && !self.verifier.is_human(user_id) {
            return Err(RegistryError::NotHuman(user_id.to_owned()));
        }
        if self.users.read().unwrap().contains_key(user_id) {
            return Err(RegistryError::Conflict(format!("user {user_id} already exists")));
        }
        let record = UserRecord {
            user_id: user_id.to_owned(),
            password_verifier: hash_password(self.password_cost, password)?,
            certificate,
        };
        let mut users = self.users.write().unwrap();
        if users.contains_key(user_id) {
            return Err(RegistryError::Conflict(format!("user {user_id} already exists")));
        }
        self.store.append(&RegistryEvent::UserRegistered { record: record.clone() })?;
        users.insert(user_id.to_owned(), record);
        Ok(())
    }

    pub fn authenticate(&self, credentials: &UserCredentials) -> Result<(), RegistryError> {
        let verifier = self
            .users
            .read()
            .unwrap()
            .get(&credentials.user_id)
            .map(|u| u.password_verifier.clone())
            .ok_or(RegistryError::AuthFailed)?;
        if check_password(&verifier, &credentials.password) {
            Ok(())
        } else {
            Err(RegistryError::AuthFailed)
        }
    }

    fn verify_otks(&self, owner: &SigningPublicKey, agent_id: &AgentId, otks: &[SignedOtk]) -> Result<(), RegistryError> {
        match self.execution.find_first_failure(otks, |o| o.verify(owner, agent_id)) {
            Some(i) => Err(RegistryError::BadSignature(SignedItem::Otk(i))),
            None => Ok(()),
        }
    }

    /// Verifies and stores an agent registration; returns the Provider's
    /// signature over the agent's metadata.
    pub fn register_agent(
        &self,
        credentials: &UserCredentials,
        submission: AgentRegistration,
    ) -> Result<Signature, RegistryError> {
        self.authenticate(credentials)?;
        let aid = &submission.agent_id;
        if aid.user_id() != credentials.user_id {
            return Err(RegistryError::Forbidden);
        }
        if !submission.endpoint.is_valid() {
            return Err(RegistryError::Invalid(format!("endpoint {} is not valid", submission.endpoint)));
        }
        let owner_public = self.user_public(&credentials.user_id).ok_or(RegistryError::AuthFailed)?;
        if submission.tls_cert.subject_id != aid.to_string() || !submission.tls_cert.verify(&self.ca_public) {
            return Err(RegistryError::BadSignature(SignedItem::AgentCertificate));
        }
        let owner_message = agent_owner_message(
            aid,
            &submission.endpoint,
            &submission.tls_cert.subject_public,
            &submission.access_control_public,
            &self.provider_keys.public(),
        );
        if !crypto::verify(&owner_public, &owner_message, &submission.owner_signature) {
            return Err(RegistryError::BadSignature(SignedItem::AgentSignature));
        }
        self.verify_otks(&owner_public, aid, &submission.otks)?;
        let mut seen = HashSet::new();
        if !submission.otks.iter().all(|o| seen.insert(o.key)) {
            return Err(RegistryError::Invalid("duplicate one-time key in submission".into()));
        }

        let provider_signature = self.provider_keys.sign(&provider_message(
            aid,
            &submission.tls_cert,
            &submission.endpoint,
            &submission.access_control_public,
            &submission.owner_signature,
        ));
        let record = AgentRecord {
            agent_id: aid.clone(),
            owner: credentials.user_id.clone(),
            endpoint: submission.endpoint,
            tls_cert: submission.tls_cert,
            access_control_public: submission.access_control_public,
            otk_pool: submission
                .otks
                .into_iter()
                .map(|o| PooledOtk {
                    key: o.key,
                    signature: o.signature,
                    consumed: false,
                })
                .collect(),
            policy: submission.policy,
            owner_signature: submission.owner_signature,
            provider_signature,
            active: true,
        };

        let mut index = self.agents.write().unwrap();
        if index.by_id.contains_key(aid) {
            return Err(RegistryError::Conflict(format!("agent {aid} already registered")));
        }
        let addr = record.endpoint.socket_addr();
        if let Some(holder) = index.endpoints.get(&addr) {
            return Err(RegistryError::Conflict(format!("endpoint {addr} already bound to {holder}")));
        }
        self.store.append(&RegistryEvent::AgentRegistered { record: record.clone() })?;
        index.endpoints.insert(addr, aid.clone());
        index.by_id.insert(aid.clone(), Arc::new(Mutex::new(AgentEntry::new(record))));
        Ok(provider_signature)
    }

    /// Issues one OTK of `receiver` to `initiator`, subject to the receiver's
    /// contact policy and the pair's remaining quota.
    pub fn resolve_contact(&self, initiator: &AgentId, receiver: &AgentId) -> Result<ContactGrant, RegistryError> {
        self.stats.resolve_calls.fetch_add(1, Ordering::SeqCst);
        let initiator_active = self
            .entry(initiator)
            .map(|e| e.lock().unwrap().record.active)
            .unwrap_or(false);
        if !initiator_active {
            return Err(RegistryError::AuthFailed);
        }
        let entry = self
            .entry(receiver)
            .ok_or_else(|| RegistryError::NotFound(receiver.to_string()))?;
        let owner_cert = {
            let owner = entry.lock().unwrap().record.owner.clone();
            self.users
                .read()
                .unwrap()
                .get(&owner)
                .map(|u| u.certificate.clone())
                .ok_or_else(|| RegistryError::Internal(format!("owner {owner} missing")))?
        };

        let mut entry = entry.lock().unwrap();
        if !entry.record.active {
            return Err(RegistryError::NotFound(receiver.to_string()));
        }
        let budget = match entry.record.policy.decide(initiator) {
            PolicyDecision::Allowed(b) => b,
            _ if !self.guards.enabled(Guard::ContactPolicy) => u32::MAX,
            PolicyDecision::NoMatch | PolicyDecision::Blocked => {
                return Err(RegistryError::NotPermitted {
                    receiver: receiver.to_string(),
                    initiator: initiator.to_string(),
                })
            }
        };
        let remaining = entry.counters.get(initiator).copied().unwrap_or(budget);
        if remaining == 0 {
            return Err(RegistryError::QuotaExhausted {
                receiver: receiver.to_string(),
                initiator: initiator.to_string(),
            });
        }
        let otk = entry
            .next_otk()
            .cloned()
            .ok_or_else(|| RegistryError::PoolExhausted(receiver.to_string()))?;
        let event = RegistryEvent::ContactResolved {
            receiver: receiver.clone(),
            initiator: initiator.clone(),
            otk: otk.key,
            remaining: remaining - 1,
        };
        self.store.append(&event)?;
        entry.apply_resolved(initiator, &otk.key, remaining - 1);
        self.stats.grants_issued.fetch_add(1, Ordering::SeqCst);

        let record = &entry.record;
        Ok(ContactGrant {
            owner_cert,
            agent_id: record.agent_id.clone(),
            endpoint: record.endpoint.clone(),
            tls_cert: record.tls_cert.clone(),
            access_control_public: record.access_control_public,
            otk: otk.key,
            otk_signature: otk.signature,
            agent_signature: record.owner_signature,
        })
    }

    fn owned_entry(
        &self,
        credentials: &UserCredentials,
        agent_id: &AgentId,
    ) -> Result<Arc<Mutex<AgentEntry>>, RegistryError> {
        self.authenticate(credentials)?;
        let entry = self
            .entry(agent_id)
            .ok_or_else(|| RegistryError::NotFound(agent_id.to_string()))?;
        if entry.lock().unwrap().record.owner != credentials.user_id {
            return Err(RegistryError::Forbidden);
        }
        Ok(entry)
    }

    /// Replaces the policy. Existing pair counters are clamped down to the
    /// new budget, never raised.
    pub fn update_policy(
        &self,
        credentials: &UserCredentials,
        agent_id: &AgentId,
        policy: ContactPolicy,
    ) -> Result<(), RegistryError> {
        let entry = self.owned_entry(credentials, agent_id)?;
        let mut entry = entry.lock().unwrap();
        self.store.append(&RegistryEvent::PolicyUpdated {
            agent_id: agent_id.clone(),
            policy: policy.clone(),
        })?;
        entry.apply_policy(policy);
        Ok(())
    }

    /// Appends freshly signed OTKs and prunes consumed ones. A single bad
    /// signature rejects the whole batch.
    pub fn refresh_otks(
        &self,
        credentials: &UserCredentials,
        agent_id: &AgentId,
        otks: Vec<SignedOtk>,
    ) -> Result<usize, RegistryError> {
        let entry = self.owned_entry(credentials, agent_id)?;
        let owner_public = self.user_public(&credentials.user_id).ok_or(RegistryError::AuthFailed)?;
        self.verify_otks(&owner_public, agent_id, &otks)?;
        let mut entry = entry.lock().unwrap();
        let mut seen: HashSet<_> = entry.record.otk_pool.iter().map(|o| o.key).collect();
        if !otks.iter().all(|o| seen.insert(o.key)) {
            return Err(RegistryError::Invalid("one-time key already present".into()));
        }
        self.store.append(&RegistryEvent::OtksRefreshed {
            agent_id: agent_id.clone(),
            otks: otks.clone(),
        })?;
        entry.apply_refresh(&otks);
        Ok(entry.record.otk_pool.len())
    }

    pub fn deactivate_agent(&self, credentials: &UserCredentials, agent_id: &AgentId) -> Result<(), RegistryError> {
        let entry = self.owned_entry(credentials, agent_id)?;
        let mut entry = entry.lock().unwrap();
        self.store.append(&RegistryEvent::AgentDeactivated {
            agent_id: agent_id.clone(),
        })?;
        entry.record.active = false;
        Ok(())
    }

    /// Drops the pair counter so the next contact re-reads the policy budget.
    pub fn reset_counter(
        &self,
        credentials: &UserCredentials,
        agent_id: &AgentId,
        initiator: &AgentId,
    ) -> Result<(), RegistryError> {
        let entry = self.owned_entry(credentials, agent_id)?;
        let mut entry = entry.lock().unwrap();
        self.store.append(&RegistryEvent::CounterReset {
            agent_id: agent_id.clone(),
            initiator: initiator.clone(),
        })?;
        entry.counters.remove(initiator);
        Ok(())
    }

    pub fn agent_record(&self, agent_id: &AgentId) -> Option<AgentRecord> {
        self.entry(agent_id).map(|e| e.lock().unwrap().record.clone())
    }

    pub fn counter(&self, receiver: &AgentId, initiator: &AgentId) -> Option<u32> {
        self.entry(receiver)?.lock().unwrap().counters.get(initiator).copied()
    }

    /// `(pool size, unconsumed)` for an agent.
    pub fn pool_status(&self, agent_id: &AgentId) -> Option<(usize, usize)> {
        let entry = self.entry(agent_id)?;
        let entry = entry.lock().unwrap();
        Some((entry.record.otk_pool.len(), entry.record.unconsumed()))
    }

    /// Re-verifies every stored signature.
    pub fn audit(&self) -> Vec<AuditFinding> {
        let entries: Vec<_> = self.agents.read().unwrap().by_id.values().cloned().collect();
        let records: Vec<AgentRecord> = entries.iter().map(|e| e.lock().unwrap().record.clone()).collect();
        let users = self.users.read().unwrap().clone();
        let provider_public = self.provider_keys.public();
        let mut findings: Vec<AuditFinding> = self
            .execution
            .map(&records, |r| {
                let fail = |item| AuditFinding {
                    agent_id: r.agent_id.clone(),
                    item,
                };
                let Some(owner) = users.get(&r.owner) else {
                    return vec![fail(SignedItem::UserCertificate)];
                };
                let mut out = Vec::new();
                if !owner.certificate.verify(&self.ca_public) {
                    out.push(fail(SignedItem::UserCertificate));
                }
                if !r.tls_cert.verify(&self.ca_public) {
                    out.push(fail(SignedItem::AgentCertificate));
                }
                let owner_pk = owner.certificate.subject_public;
                let msg = agent_owner_message(
                    &r.agent_id,
                    &r.endpoint,
                    &r.tls_cert.subject_public,
                    &r.access_control_public,
                    &provider_public,
                );
                if !crypto::verify(&owner_pk, &msg, &r.owner_signature) {
                    out.push(fail(SignedItem::AgentSignature));
                }
                for (i, otk) in r.otk_pool.iter().enumerate() {
                    let signed = SignedOtk {
                        key: otk.key,
                        signature: otk.signature,
                    };
                    if !signed.verify(&owner_pk, &r.agent_id) {
                        out.push(fail(SignedItem::Otk(i)));
                    }
                }
                let pmsg = provider_message(
                    &r.agent_id,
                    &r.tls_cert,
                    &r.endpoint,
                    &r.access_control_public,
                    &r.owner_signature,
                );
                if !crypto::verify(&provider_public, &pmsg, &r.provider_signature) {
                    out.push(fail(SignedItem::ProviderSignature));
                }
                out
            })
            .into_iter()
            .flatten()
            .collect();
        findings.sort_by(|a, b| a.agent_id.cmp(&b.agent_id));
        findings
    }

    pub fn dump(&self) -> RegistryDump {
        let mut users: Vec<UserSummary> = self
            .users
            .read()
            .unwrap()
            .values()
            .map(|u| UserSummary {
                user_id: u.user_id.clone(),
                certificate: u.certificate.clone(),
            })
            .collect();
        users.sort_by(|a, b| a.user_id.cmp(&b.user_id));
        let entries: Vec<_> = self.agents.read().unwrap().by_id.values().cloned().collect();
        let mut agents: Vec<AgentSummary> = entries
            .iter()
            .map(|e| {
                let e = e.lock().unwrap();
                AgentSummary {
                    agent_id: e.record.agent_id.clone(),
                    owner: e.record.owner.clone(),
                    endpoint: e.record.endpoint.clone(),
                    active: e.record.active,
                    policy: e.record.policy.clone(),
                    pool_size: e.record.otk_pool.len(),
                    unconsumed: e.record.unconsumed(),
                    counters: e.counters.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
                }
            })
            .collect();
        agents.sort_by(|a, b| a.agent_id.cmp(&b.agent_id));
        RegistryDump { users, agents }
    }
}
