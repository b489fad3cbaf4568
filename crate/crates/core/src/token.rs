//! Access-control tokens: pairwise key derivation from one-time keys, token
//! issuance and validation at the receiver, and reuse tracking at the
//! initiator.
//!
//! The receiver is authoritative for usage counting. The initiator mirrors
//! the count only to decide when a fresh authorization cycle is needed.

use std::collections::HashMap;
use std::sync::Mutex;

use rand::rngs::OsRng;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{self, CryptoError, ExchangeKeyPair, ExchangePublicKey, SharedKey, SEAL_NONCE_LEN};
use crate::guards::{Guard, Guards};
use crate::policy::AgentId;

/// Clock-skew allowance applied to `expires_at` at the receiver.
pub const DEFAULT_EXPIRY_GRACE_SECS: u64 = 30;

pub const TOKEN_NONCE_LEN: usize = 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TokenError {
    #[error("one-time key is unknown or already consumed")]
    InvalidOtk,
    #[error("token parameters invalid: {0}")]
    InvalidParams(&'static str),
    #[error("token plaintext is malformed")]
    Malformed,
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

/// Why the receiver refused a token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RejectReason {
    WrongHolder,
    Expired,
    QuotaExceeded,
    UnknownToken,
    Tampered,
}

impl RejectReason {
    pub fn code(self) -> &'static str {
        match self {
            RejectReason::WrongHolder => "WRONG_HOLDER",
            RejectReason::Expired => "EXPIRED",
            RejectReason::QuotaExceeded => "QUOTA_EXCEEDED",
            RejectReason::UnknownToken => "UNKNOWN_TOKEN",
            RejectReason::Tampered => "TAMPERED",
        }
    }

    pub fn from_code(code: &str) -> Option<Self> {
        [
            RejectReason::WrongHolder,
            RejectReason::Expired,
            RejectReason::QuotaExceeded,
            RejectReason::UnknownToken,
            RejectReason::Tampered,
        ]
        .into_iter()
        .find(|r| r.code() == code)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    /// Accepted; `used` counts this request.
    Accept { used: u32 },
    Reject(RejectReason),
}

impl Decision {
    pub fn is_accept(&self) -> bool {
        matches!(self, Decision::Accept { .. })
    }
}

/// `⟨N, T_issued, T_expire, Q_max, PAC_B⟩` plus an optional opaque task label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenPlaintext {
    pub nonce: [u8; TOKEN_NONCE_LEN],
    pub issued_at: u64,
    pub expires_at: u64,
    pub max_requests: u32,
    pub initiator_pac: ExchangePublicKey,
    pub task_label: Vec<u8>,
}

impl TokenPlaintext {
    /// Fixed field order, each field prefixed by a big-endian u16 length.
    pub fn encode(&self) -> Vec<u8> {
        let fields: [&[u8]; 6] = [
            &self.nonce,
            &self.issued_at.to_be_bytes(),
            &self.expires_at.to_be_bytes(),
            &self.max_requests.to_be_bytes(),
            self.initiator_pac.as_bytes(),
            &self.task_label,
        ];
        let mut out = Vec::with_capacity(fields.iter().map(|f| 2 + f.len()).sum());
        for f in fields {
            out.extend_from_slice(&(f.len() as u16).to_be_bytes());
            out.extend_from_slice(f);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, TokenError> {
        let mut fields = Vec::with_capacity(6);
        let mut rest = bytes;
        while !rest.is_empty() {
            if rest.len() < 2 {
                return Err(TokenError::Malformed);
            }
            let len = u16::from_be_bytes([rest[0], rest[1]]) as usize;
            rest = &rest[2..];
            if rest.len() < len {
                return Err(TokenError::Malformed);
            }
            fields.push(&rest[..len]);
            rest = &rest[len..];
        }
        let [nonce, issued, expires, max, pac, label] = fields[..] else {
            return Err(TokenError::Malformed);
        };
        let plain = Self {
            nonce: nonce.try_into().map_err(|_| TokenError::Malformed)?,
            issued_at: u64::from_be_bytes(issued.try_into().map_err(|_| TokenError::Malformed)?),
            expires_at: u64::from_be_bytes(expires.try_into().map_err(|_| TokenError::Malformed)?),
            max_requests: u32::from_be_bytes(max.try_into().map_err(|_| TokenError::Malformed)?),
            initiator_pac: ExchangePublicKey::from_slice(pac).ok_or(TokenError::Malformed)?,
            task_label: label.to_vec(),
        };
        if plain.expires_at <= plain.issued_at || plain.max_requests == 0 {
            return Err(TokenError::Malformed);
        }
        Ok(plain)
    }
}

/// Sealed token bytes as carried on the wire.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AccessToken(#[serde(with = "hex::serde")] pub Vec<u8>);

impl AccessToken {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    /// The AEAD nonce prefix, unique per issued token; used as ledger key.
    fn ledger_key(&self) -> Option<[u8; SEAL_NONCE_LEN]> {
        self.0.get(..SEAL_NONCE_LEN)?.try_into().ok()
    }
}

impl std::fmt::Debug for AccessToken {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "AccessToken({} bytes)", self.0.len())
    }
}

/// Receiver-configured token parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenParams {
    pub lifetime_seconds: u64,
    pub max_requests: u32,
}

impl Default for TokenParams {
    fn default() -> Self {
        Self {
            lifetime_seconds: 600,
            max_requests: 10,
        }
    }
}

/// The receiver's local one-time secrets, keyed by public half.
pub struct OtkStore {
    keys: Mutex<HashMap<ExchangePublicKey, ExchangeKeyPair>>,
    on_consume: Option<Box<dyn Fn(&ExchangePublicKey) + Send + Sync>>,
}

impl Default for OtkStore {
    fn default() -> Self {
        Self::new()
    }
}

impl OtkStore {
    pub fn new() -> Self {
        Self {
            keys: Mutex::new(HashMap::new()),
            on_consume: None,
        }
    }

    /// Registers a callback run after a key is removed, e.g. to delete its file.
    pub fn with_consume_hook(mut self, hook: impl Fn(&ExchangePublicKey) + Send + Sync + 'static) -> Self {
        self.on_consume = Some(Box::new(hook));
        self
    }

    pub fn insert(&self, pair: ExchangeKeyPair) {
        self.keys.lock().unwrap().insert(pair.public(), pair);
    }

    pub fn extend(&self, pairs: impl IntoIterator<Item = ExchangeKeyPair>) {
        let mut keys = self.keys.lock().unwrap();
        for pair in pairs {
            keys.insert(pair.public(), pair);
        }
    }

    pub fn contains(&self, otk: &ExchangePublicKey) -> bool {
        self.keys.lock().unwrap().contains_key(otk)
    }

    pub fn len(&self) -> usize {
        self.keys.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn take(&self, otk: &ExchangePublicKey) -> Option<ExchangeKeyPair> {
        let taken = self.keys.lock().unwrap().remove(otk);
        if taken.is_some() {
            if let Some(hook) = &self.on_consume {
                hook(otk);
            }
        }
        taken
    }
}

/// `SDHK = KDF(DH(SOTK, PAC_B))`. The one-time secret is removed from the
/// store whether or not derivation succeeds.
pub fn derive_sdhk_receiver(
    store: &OtkStore,
    otk: &ExchangePublicKey,
    initiator_pac: &ExchangePublicKey,
) -> Result<SharedKey, TokenError> {
    let secret = store.take(otk).ok_or(TokenError::InvalidOtk)?;
    Ok(crypto::kdf(&secret.dh(initiator_pac)?)?)
}

/// `SDHK = KDF(DH(SAC_B, OTK_A))`.
pub fn derive_sdhk_initiator(
    initiator_access: &ExchangeKeyPair,
    receiver_otk: &ExchangePublicKey,
) -> Result<SharedKey, TokenError> {
    Ok(crypto::kdf(&initiator_access.dh(receiver_otk)?)?)
}

/// Opens a token under the pairwise key.
pub fn read_token(sdhk: &SharedKey, token: &AccessToken) -> Result<TokenPlaintext, TokenError> {
    TokenPlaintext::decode(&crypto::open(sdhk, token.as_bytes())?)
}

#[derive(Debug, Clone)]
struct LedgerEntry {
    sdhk: SharedKey,
    plaintext: TokenPlaintext,
    holder: Option<AgentId>,
    used: u32,
    live: bool,
}

/// Snapshot of one ledger entry, for inspection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerView {
    pub nonce: [u8; TOKEN_NONCE_LEN],
    pub initiator_pac: ExchangePublicKey,
    pub expires_at: u64,
    pub used: u32,
    pub max_requests: u32,
    pub live: bool,
}

/// Receiver-side record of issued tokens. Check-and-increment is atomic.
pub struct TokenLedger {
    entries: Mutex<HashMap<[u8; SEAL_NONCE_LEN], LedgerEntry>>,
    grace_secs: u64,
    guards: Guards,
}

impl Default for TokenLedger {
    fn default() -> Self {
        Self::new(DEFAULT_EXPIRY_GRACE_SECS)
    }
}

impl TokenLedger {
    pub fn new(grace_secs: u64) -> Self {
        Self {
            entries: Mutex::new(HashMap::new()),
            grace_secs,
            guards: Guards::all(),
        }
    }

    pub fn with_guards(mut self, guards: Guards) -> Self {
        self.guards = guards;
        self
    }

    pub fn grace_secs(&self) -> u64 {
        self.grace_secs
    }

    pub fn issue(
        &self,
        sdhk: &SharedKey,
        params: TokenParams,
        initiator_pac: ExchangePublicKey,
        now: u64,
    ) -> Result<AccessToken, TokenError> {
        self.issue_for(sdhk, params, initiator_pac, None, Vec::new(), now)
    }

    pub fn issue_for(
        &self,
        sdhk: &SharedKey,
        params: TokenParams,
        initiator_pac: ExchangePublicKey,
        holder: Option<AgentId>,
        task_label: Vec<u8>,
        now: u64,
    ) -> Result<AccessToken, TokenError> {
        if params.lifetime_seconds == 0 {
            return Err(TokenError::InvalidParams("lifetime must be positive"));
        }
        if params.max_requests == 0 {
            return Err(TokenError::InvalidParams("max_requests must be at least 1"));
        }
        if task_label.len() > u16::MAX as usize {
            return Err(TokenError::InvalidParams("task label too long"));
        }
        let mut nonce = [0u8; TOKEN_NONCE_LEN];
        OsRng.fill_bytes(&mut nonce);
        let plaintext = TokenPlaintext {
            nonce,
            issued_at: now,
            expires_at: now + params.lifetime_seconds,
            max_requests: params.max_requests,
            initiator_pac,
            task_label,
        };
        let mut entries = self.entries.lock().unwrap();
        // The AEAD nonce is random; retry on the (astronomically unlikely)
        // collision with a live ledger key.
        let token = loop {
            let token = AccessToken(crypto::seal(sdhk, &plaintext.encode()));
            let key = token.ledger_key().expect("sealed output carries a nonce");
            if let std::collections::hash_map::Entry::Vacant(slot) = entries.entry(key) {
                slot.insert(LedgerEntry {
                    sdhk: sdhk.clone(),
                    plaintext,
                    holder,
                    used: 0,
                    live: true,
                });
                break token;
            }
        };
        Ok(token)
    }

    /// Validates a presented token and, on acceptance, counts the request.
    /// `presenter_pac` is `None` when the presenting agent has no known
    /// access-control key; such a presenter can never be the holder.
    pub fn validate(&self, token: &AccessToken, presenter_pac: Option<&ExchangePublicKey>, now: u64) -> Decision {
        let Some(key) = token.ledger_key() else {
            return Decision::Reject(RejectReason::UnknownToken);
        };
        let mut entries = self.entries.lock().unwrap();
        let Some(entry) = entries.get_mut(&key) else {
            return Decision::Reject(RejectReason::UnknownToken);
        };
        match read_token(&entry.sdhk, token) {
            Ok(plain) if plain == entry.plaintext => {}
            _ => return Decision::Reject(RejectReason::Tampered),
        }
        if !entry.live {
            return Decision::Reject(RejectReason::UnknownToken);
        }
        if self.guards.enabled(Guard::HolderBinding) && presenter_pac != Some(&entry.plaintext.initiator_pac) {
            return Decision::Reject(RejectReason::WrongHolder);
        }
        if self.guards.enabled(Guard::TokenLifetime) {
            if now > entry.plaintext.expires_at.saturating_add(self.grace_secs) {
                return Decision::Reject(RejectReason::Expired);
            }
            if entry.used >= entry.plaintext.max_requests {
                return Decision::Reject(RejectReason::QuotaExceeded);
            }
        }
        entry.used += 1;
        Decision::Accept { used: entry.used }
    }

    /// Marks the token dead. Returns whether a live entry was released.
    pub fn release(&self, token: &AccessToken) -> bool {
        let Some(key) = token.ledger_key() else {
            return false;
        };
        let mut entries = self.entries.lock().unwrap();
        match entries.get_mut(&key) {
            Some(entry) if entry.live && crypto::open(&entry.sdhk, token.as_bytes()).is_ok() => {
                entry.live = false;
                true
            }
            _ => false,
        }
    }

    /// Drops entries that can no longer be accepted. Released entries stay
    /// until their expiry so that reuse reports `UNKNOWN_TOKEN` consistently.
    pub fn prune(&self, now: u64) -> usize {
        let mut entries = self.entries.lock().unwrap();
        let before = entries.len();
        entries.retain(|_, e| now <= e.plaintext.expires_at.saturating_add(self.grace_secs));
        before - entries.len()
    }

    pub fn holder_of(&self, token: &AccessToken) -> Option<AgentId> {
        let key = token.ledger_key()?;
        self.entries.lock().unwrap().get(&key)?.holder.clone()
    }

    pub fn view(&self, token: &AccessToken) -> Option<LedgerView> {
        let key = token.ledger_key()?;
        let entries = self.entries.lock().unwrap();
        let e = entries.get(&key)?;
        Some(LedgerView {
            nonce: e.plaintext.nonce,
            initiator_pac: e.plaintext.initiator_pac,
            expires_at: e.plaintext.expires_at,
            used: e.used,
            max_requests: e.plaintext.max_requests,
            live: e.live,
        })
    }

    pub fn live_count(&self) -> usize {
        self.entries.lock().unwrap().values().filter(|e| e.live).count()
    }
}

#[derive(Debug, Clone)]
struct CachedToken {
    token: AccessToken,
    expires_at: u64,
    max_requests: u32,
    used: u32,
}

/// Initiator-side token cache, one entry per receiver.
#[derive(Debug, Default)]
pub struct TokenCache {
    entries: HashMap<AgentId, CachedToken>,
}

impl TokenCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, receiver: AgentId, token: AccessToken, plaintext: &TokenPlaintext) {
        self.entries.insert(
            receiver,
            CachedToken {
                token,
                expires_at: plaintext.expires_at,
                max_requests: plaintext.max_requests,
                used: 0,
            },
        );
    }

    /// The cached token, if it is unexpired and has quota left locally.
    pub fn should_reuse(&self, receiver: &AgentId, now: u64) -> Option<AccessToken> {
        self.entries
            .get(receiver)
            .filter(|c| now <= c.expires_at && c.used < c.max_requests)
            .map(|c| c.token.clone())
    }

    pub fn record_use(&mut self, receiver: &AgentId) {
        if let Some(c) = self.entries.get_mut(receiver) {
            c.used += 1;
        }
    }

    pub fn used(&self, receiver: &AgentId) -> Option<u32> {
        self.entries.get(receiver).map(|c| c.used)
    }

    /// Drops the cached token; returns it if one was present.
    pub fn remove(&mut self, receiver: &AgentId) -> Option<AccessToken> {
        self.entries.remove(receiver).map(|c| c.token)
    }
}

pub fn should_reuse(cache: &TokenCache, receiver: &AgentId, now: u64) -> Option<AccessToken> {
    cache.should_reuse(receiver, now)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::keygen_exchange;
    use proptest::prelude::*;

    fn pair() -> (OtkStore, ExchangePublicKey, ExchangeKeyPair) {
        let store = OtkStore::new();
        let otk = keygen_exchange();
        let otk_pub = otk.public();
        store.insert(otk);
        (store, otk_pub, keygen_exchange())
    }

    #[test]
    fn sdhk_agreement_and_single_use() {
        let (store, otk_pub, sac_b) = pair();
        let k_init = derive_sdhk_initiator(&sac_b, &otk_pub).unwrap();
        let k_recv = derive_sdhk_receiver(&store, &otk_pub, &sac_b.public()).unwrap();
        assert_eq!(k_init, k_recv);
        assert_eq!(
            derive_sdhk_receiver(&store, &otk_pub, &sac_b.public()),
            Err(TokenError::InvalidOtk)
        );
        assert_eq!(
            derive_sdhk_receiver(&store, &keygen_exchange().public(), &sac_b.public()),
            Err(TokenError::InvalidOtk)
        );
    }

    #[test]
    fn distinct_otks_give_distinct_keys() {
        let sac_b = keygen_exchange();
        let a = derive_sdhk_initiator(&sac_b, &keygen_exchange().public()).unwrap();
        let b = derive_sdhk_initiator(&sac_b, &keygen_exchange().public()).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn consume_hook_runs() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        use std::sync::Arc;
        let hits = Arc::new(AtomicUsize::new(0));
        let h = hits.clone();
        let store = OtkStore::new().with_consume_hook(move |_| {
            h.fetch_add(1, Ordering::SeqCst);
        });
        let otk = keygen_exchange();
        let otk_pub = otk.public();
        store.insert(otk);
        derive_sdhk_receiver(&store, &otk_pub, &keygen_exchange().public()).unwrap();
        assert_eq!(hits.load(Ordering::SeqCst), 1);
        assert!(store.is_empty());
    }

    #[test]
    fn issued_token_construction() {
        let ledger = TokenLedger::default();
        let sdhk = crypto::kdf(b"sdhk").unwrap();
        let pac = keygen_exchange().public();
        let params = TokenParams {
            lifetime_seconds: 600,
            max_requests: 10,
        };
        let t1 = ledger.issue(&sdhk, params, pac, 1_000).unwrap();
        let t2 = ledger.issue(&sdhk, params, pac, 1_000).unwrap();
        let p1 = read_token(&sdhk, &t1).unwrap();
        let p2 = read_token(&sdhk, &t2).unwrap();
        assert_eq!(p1.expires_at - p1.issued_at, 600);
        assert_eq!(p1.max_requests, 10);
        assert_eq!(p1.initiator_pac, pac);
        assert_ne!(p1.nonce, p2.nonce);
        assert_eq!(ledger.live_count(), 2);
        assert!(ledger
            .issue(&sdhk, TokenParams { lifetime_seconds: 0, max_requests: 1 }, pac, 0)
            .is_err());
        assert!(ledger
            .issue(&sdhk, TokenParams { lifetime_seconds: 1, max_requests: 0 }, pac, 0)
            .is_err());
    }

    #[test]
    fn validation_reasons() {
        let ledger = TokenLedger::new(30);
        let sdhk = crypto::kdf(b"sdhk").unwrap();
        let holder = keygen_exchange().public();
        let other = keygen_exchange().public();
        let params = TokenParams {
            lifetime_seconds: 100,
            max_requests: 2,
        };
        let t = ledger.issue(&sdhk, params, holder, 1_000).unwrap();
        assert_eq!(ledger.validate(&t, Some(&other), 1_000), Decision::Reject(RejectReason::WrongHolder));
        assert_eq!(ledger.validate(&t, Some(&holder), 1_000), Decision::Accept { used: 1 });
        assert_eq!(ledger.validate(&t, Some(&holder), 1_130), Decision::Accept { used: 2 });
        assert_eq!(ledger.validate(&t, Some(&holder), 1_001), Decision::Reject(RejectReason::QuotaExceeded));

        let t = ledger.issue(&sdhk, params, holder, 1_000).unwrap();
        assert_eq!(ledger.validate(&t, Some(&holder), 1_131), Decision::Reject(RejectReason::Expired));

        let mut tampered = t.clone();
        let last = tampered.0.len() - 1;
        tampered.0[last] ^= 1;
        assert_eq!(ledger.validate(&tampered, Some(&holder), 1_000), Decision::Reject(RejectReason::Tampered));
        let unknown = AccessToken(crypto::seal(&sdhk, b"x"));
        assert_eq!(ledger.validate(&unknown, Some(&holder), 1_000), Decision::Reject(RejectReason::UnknownToken));
        assert_eq!(
            ledger.validate(&AccessToken(vec![1, 2]), Some(&holder), 1_000),
            Decision::Reject(RejectReason::UnknownToken)
        );
    }

    #[test]
    fn release_is_idempotent_and_final() {
        let ledger = TokenLedger::default();
        let sdhk = crypto::kdf(b"sdhk").unwrap();
        let holder = keygen_exchange().public();
        let t = ledger.issue(&sdhk, TokenParams::default(), holder, 0).unwrap();
        assert!(ledger.validate(&t, Some(&holder), 0).is_accept());
        assert!(ledger.release(&t));
        assert!(!ledger.release(&t));
        assert_eq!(ledger.validate(&t, Some(&holder), 0), Decision::Reject(RejectReason::UnknownToken));
        assert_eq!(ledger.prune(10_000), 1);
    }

    #[test]
    fn disabled_guards_let_checks_through() {
        let sdhk = crypto::kdf(b"sdhk").unwrap();
        let holder = keygen_exchange().public();
        let params = TokenParams {
            lifetime_seconds: 1,
            max_requests: 1,
        };
        let ledger = TokenLedger::new(0).with_guards(Guards::without(Guard::TokenLifetime));
        let t = ledger.issue(&sdhk, params, holder, 0).unwrap();
        for _ in 0..3 {
            assert!(ledger.validate(&t, Some(&holder), 100).is_accept());
        }
        let ledger = TokenLedger::new(0).with_guards(Guards::without(Guard::HolderBinding));
        let t = ledger.issue(&sdhk, params, holder, 0).unwrap();
        assert!(ledger.validate(&t, Some(&keygen_exchange().public()), 0).is_accept());
    }

    #[test]
    fn cache_reuse_rules() {
        let sdhk = crypto::kdf(b"sdhk").unwrap();
        let ledger = TokenLedger::default();
        let pac = keygen_exchange().public();
        let receiver: AgentId = "a@x.com:r".parse().unwrap();
        let t = ledger
            .issue(&sdhk, TokenParams { lifetime_seconds: 60, max_requests: 2 }, pac, 100)
            .unwrap();
        let mut cache = TokenCache::new();
        assert!(cache.should_reuse(&receiver, 100).is_none());
        cache.insert(receiver.clone(), t.clone(), &read_token(&sdhk, &t).unwrap());
        assert_eq!(cache.should_reuse(&receiver, 100), Some(t.clone()));
        assert!(cache.should_reuse(&receiver, 161).is_none());
        cache.record_use(&receiver);
        cache.record_use(&receiver);
        assert!(cache.should_reuse(&receiver, 100).is_none());
        assert_eq!(cache.remove(&receiver), Some(t));
    }

    #[test]
    fn provider_cycles_follow_ceiling() {
        // 100 requests with Q_max = 10: a new token is needed every 10 requests.
        let sdhk = crypto::kdf(b"sdhk").unwrap();
        let ledger = TokenLedger::default();
        let pac = keygen_exchange().public();
        let receiver: AgentId = "a@x.com:r".parse().unwrap();
        let mut cache = TokenCache::new();
        let mut cycles = 0;
        for _ in 0..100 {
            let token = match cache.should_reuse(&receiver, 0) {
                Some(t) => t,
                None => {
                    cycles += 1;
                    let t = ledger
                        .issue(&sdhk, TokenParams { lifetime_seconds: 600, max_requests: 10 }, pac, 0)
                        .unwrap();
                    cache.insert(receiver.clone(), t.clone(), &read_token(&sdhk, &t).unwrap());
                    t
                }
            };
            assert!(ledger.validate(&token, Some(&pac), 0).is_accept());
            cache.record_use(&receiver);
        }
        assert_eq!(cycles, 10);
    }

    #[test]
    fn accepted_requests_never_exceed_quota() {
        let sdhk = crypto::kdf(b"sdhk").unwrap();
        let pac = keygen_exchange().public();
        for q in [1u32, 2, 10] {
            let ledger = TokenLedger::default();
            let t = ledger
                .issue(&sdhk, TokenParams { lifetime_seconds: 600, max_requests: q }, pac, 0)
                .unwrap();
            let accepted = (0..3 * q).filter(|_| ledger.validate(&t, Some(&pac), 0).is_accept()).count();
            assert_eq!(accepted, q as usize);
        }
    }

    #[test]
    fn wrong_holder_for_random_pairs() {
        let sdhk = crypto::kdf(b"sdhk").unwrap();
        let ledger = TokenLedger::default();
        for _ in 0..100 {
            let x = keygen_exchange().public();
            let y = keygen_exchange().public();
            let t = ledger.issue(&sdhk, TokenParams::default(), x, 0).unwrap();
            assert_eq!(ledger.validate(&t, Some(&y), 0), Decision::Reject(RejectReason::WrongHolder));
        }
    }

    #[test]
    fn end_to_end_agreement_over_random_pairs() {
        for _ in 0..100 {
            let (store, otk_pub, sac_b) = pair();
            let ki = derive_sdhk_initiator(&sac_b, &otk_pub).unwrap();
            let kr = derive_sdhk_receiver(&store, &otk_pub, &sac_b.public()).unwrap();
            let ledger = TokenLedger::default();
            let t = ledger.issue(&kr, TokenParams::default(), sac_b.public(), 5).unwrap();
            let plain = read_token(&ki, &t).unwrap();
            assert_eq!(plain.initiator_pac, sac_b.public());
            assert_eq!(plain.issued_at, 5);
        }
    }

    #[test]
    fn plaintext_decode_rejects_garbage() {
        assert!(TokenPlaintext::decode(&[]).is_err());
        assert!(TokenPlaintext::decode(&[0, 5, 1]).is_err());
        let good = TokenPlaintext {
            nonce: [7; 16],
            issued_at: 1,
            expires_at: 2,
            max_requests: 3,
            initiator_pac: keygen_exchange().public(),
            task_label: b"calendar".to_vec(),
        };
        assert_eq!(TokenPlaintext::decode(&good.encode()).unwrap(), good);
        let mut bad = good.clone();
        bad.expires_at = 1;
        assert!(TokenPlaintext::decode(&bad.encode()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn expiry_is_monotone(lifetime in 1u64..200, probes in proptest::collection::vec(0u64..600, 1..30)) {
            let sdhk = crypto::kdf(b"sdhk").unwrap();
            let ledger = TokenLedger::new(30);
            let pac = keygen_exchange().public();
            let t = ledger
                .issue(&sdhk, TokenParams { lifetime_seconds: lifetime, max_requests: u32::MAX }, pac, 0)
                .unwrap();
            let mut times = probes;
            times.sort_unstable();
            let mut expired = false;
            for now in times {
                let d = ledger.validate(&t, Some(&pac), now);
                if expired {
                    prop_assert_eq!(d, Decision::Reject(RejectReason::Expired));
                }
                if d == Decision::Reject(RejectReason::Expired) {
                    expired = true;
                }
                prop_assert_eq!(d.is_accept(), now <= lifetime + 30);
            }
        }
    }
}
