//! Self-contained reproduction of the protocol's security and cost claims:
//! the eight attack scenarios, a guard mutation matrix, the protocol
//! overhead model and the Provider capacity model.
//!
//! Every scenario builds a fresh in-process world (registry, simulated
//! network, manual clock). Reports carry no timings or key material, so a
//! run is byte-for-byte reproducible.

use std::fmt;
use std::net::SocketAddr;
use std::str::FromStr;
use std::sync::atomic::{AtomicU16, Ordering};
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::agent::{
    self, AgentError, AgentIdentity, AgentRuntime, EchoHandler, Initiator, ReceiverConfig, RecordingHandler,
};
use crate::clock::{Clock, ManualClock};
use crate::crypto::{CertificateAuthority, ExchangeKeyPair, SigningKeyPair};
use crate::exec::Execution;
use crate::guards::{Guard, Guards};
use crate::policy::{AgentId, ContactPolicy, PolicyRule};
use crate::records::{EndpointDescriptor, TokenRequest, UserCredentials};
use crate::registry::{DenylistVerifier, PasswordCost, Registry, RegistryConfig, RegistryError};
use crate::service::{self, LocalResolver, ProviderClient, ServiceError};
use crate::token::{self, OtkStore, TokenCache, TokenLedger, TokenParams};
use crate::transport::{self, ChannelConfig, Network, RttDistribution, ServerHandle, SimOptions, TransportError};

pub const STEP_CONTACT_RESOLUTION: &str = "communication.step2";
pub const STEP_CHANNEL: &str = "communication.step4";
pub const STEP_TOKEN_REQUEST: &str = "communication.step6";
pub const STEP_REQUEST: &str = "communication.step8";
pub const STEP_TOKEN_REUSE: &str = "communication.token-reuse";
pub const STEP_HUMAN_VERIFICATION: &str = "user-registration.step5";

/// Domain the harness's human verifier refuses.
pub const BOT_DOMAIN: &str = "@replica.example";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Scenario {
    A1,
    A2,
    A3,
    A4,
    A5,
    A6,
    A7,
    A8,
}

impl Scenario {
    pub const ALL: [Scenario; 8] = [
        Scenario::A1,
        Scenario::A2,
        Scenario::A3,
        Scenario::A4,
        Scenario::A5,
        Scenario::A6,
        Scenario::A7,
        Scenario::A8,
    ];

    pub fn expected_step(self) -> &'static str {
        match self {
            Scenario::A1 => STEP_CHANNEL,
            Scenario::A2 | Scenario::A4 => STEP_TOKEN_REQUEST,
            Scenario::A3 | Scenario::A5 => STEP_REQUEST,
            Scenario::A6 => STEP_CONTACT_RESOLUTION,
            Scenario::A7 => STEP_HUMAN_VERIFICATION,
            Scenario::A8 => STEP_TOKEN_REUSE,
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Scenario::A1 => "contact without a CA-issued certificate",
            Scenario::A2 => "token request without a one-time key",
            Scenario::A3 => "request with an expired token",
            Scenario::A4 => "impersonation with another agent's metadata and provider signature",
            Scenario::A5 => "replay of a token issued to a different agent",
            Scenario::A6 => "contact resolution denied by the receiver's policy",
            Scenario::A7 => "user registration by an automated agent",
            Scenario::A8 => "abuse of a valid token beyond its quota or lifetime",
        }
    }

    /// Guards whose removal must let this scenario through.
    pub fn guards(self) -> &'static [Guard] {
        match self {
            Scenario::A1 => &[Guard::CertificateCheck],
            Scenario::A2 => &[Guard::CredentialCheck],
            Scenario::A3 | Scenario::A8 => &[Guard::TokenLifetime],
            Scenario::A4 => &[Guard::ProviderSignature],
            Scenario::A5 => &[Guard::HolderBinding],
            Scenario::A6 => &[Guard::ContactPolicy],
            Scenario::A7 => &[Guard::HumanVerification],
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scenario::ALL
            .into_iter()
            .find(|x| x.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown scenario {s:?} (expected A1..A8)"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AttackReport {
    pub scenario: Scenario,
    pub detected_at_step: Option<String>,
    pub expected_step: String,
    pub pass: bool,
    pub check: Option<String>,
    pub error_code: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub requests_accepted: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q_max: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub disabled_guard: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

struct Detection {
    step: &'static str,
    check: String,
    code: String,
}

impl Detection {
    fn new(step: &'static str, check: &str, code: &str) -> Self {
        Self {
            step,
            check: check.to_owned(),
            code: code.to_owned(),
        }
    }
}

/// A running receiver, the handler recording what reached it, and its server.
pub type Served = (Arc<AgentRuntime>, Arc<RecordingHandler<EchoHandler>>, ServerHandle);

/// An in-process deployment: CA, registry, simulated network, manual clock.
pub struct World {
    pub ca: CertificateAuthority,
    pub registry: Arc<Registry>,
    pub network: Network,
    pub clock: Arc<ManualClock>,
    pub guards: Guards,
    pub provider_keys: SigningKeyPair,
    next_port: AtomicU16,
}

pub struct Owner {
    pub keys: SigningKeyPair,
    pub cert: crate::crypto::Certificate,
    pub credentials: UserCredentials,
}

pub const HARNESS_EPOCH: u64 = 1_700_000_000;

impl World {
    pub fn new(guards: Guards) -> Self {
        let ca = CertificateAuthority::generate();
        let provider_keys = SigningKeyPair::generate();
        let mut config = RegistryConfig::new(ca.public(), provider_keys.clone());
        config.password_cost = PasswordCost::minimal();
        config.guards = guards;
        config.verifier = Box::new(DenylistVerifier::new([BOT_DOMAIN]));
        Self {
            registry: Arc::new(Registry::in_memory(config)),
            ca,
            network: Network::simulated(),
            clock: Arc::new(ManualClock::new(HARNESS_EPOCH)),
            guards,
            provider_keys,
            next_port: AtomicU16::new(20000),
        }
    }

    pub fn owner(&self, user_id: &str) -> Result<Owner, RegistryError> {
        let keys = SigningKeyPair::generate();
        let cert = self.ca.issue(user_id, keys.public());
        self.registry.register_user(user_id, "correct horse", cert.clone())?;
        Ok(Owner {
            keys,
            cert,
            credentials: UserCredentials::new(user_id, "correct horse"),
        })
    }

    pub fn agent(
        &self,
        owner: &Owner,
        name: &str,
        otks: usize,
        policy: ContactPolicy,
    ) -> Result<Arc<AgentIdentity>, RegistryError> {
        let port = self.next_port.fetch_add(1, Ordering::SeqCst);
        let agent_id = AgentId::new(&owner.credentials.user_id, name)
            .map_err(|e| RegistryError::Invalid(e.to_string()))?;
        let prepared = agent::prepare_registration(
            &owner.keys,
            &self.ca,
            agent_id,
            EndpointDescriptor::new("sim", "127.0.0.1".parse().unwrap(), port),
            policy,
            otks,
            &self.registry.provider_public(),
            Execution::Parallel,
        );
        let signature = self.registry.register_agent(&owner.credentials, prepared.submission.clone())?;
        Ok(Arc::new(prepared.into_identity(
            signature,
            owner.cert.clone(),
            self.registry.provider_public(),
        )))
    }

    pub fn receiver_config(&self, q_max: u32, lifetime_seconds: u64) -> ReceiverConfig {
        ReceiverConfig {
            token: TokenParams {
                lifetime_seconds,
                max_requests: q_max,
            },
            guards: self.guards,
            ..Default::default()
        }
    }

    pub fn serve(
        &self,
        identity: Arc<AgentIdentity>,
        config: ReceiverConfig,
    ) -> Result<Served, TransportError> {
        let handler = Arc::new(RecordingHandler::new(EchoHandler));
        let runtime = Arc::new(AgentRuntime::new(
            identity,
            self.ca.public(),
            config,
            Box::new(handler.clone()),
            self.clock.clone(),
        ));
        let server = runtime.serve(&self.network, SimOptions::default())?;
        Ok((runtime, handler, server))
    }

    pub fn initiator(&self, identity: Arc<AgentIdentity>) -> Initiator {
        let resolver = Arc::new(LocalResolver::new(self.registry.clone(), identity.agent_id.clone()));
        Initiator::new(identity, resolver, self.network.clone(), self.ca.public(), self.clock.clone())
    }

    pub fn connect_as(
        &self,
        config: &ChannelConfig,
        target: &AgentIdentity,
    ) -> Result<transport::SecureChannel, TransportError> {
        transport::connect(&self.network, config, target.endpoint.socket_addr(), None)
    }
}

/// Default victim policy: benign domain plus the adversary's own agents.
fn victim_policy(admit_adversary: bool, q_max: u32) -> ContactPolicy {
    let mut rules = vec![PolicyRule::new("*@benign.example:*", q_max as i64).unwrap()];
    if admit_adversary {
        rules.push(PolicyRule::new("mallory@evil.example:*", q_max as i64).unwrap());
    }
    ContactPolicy::new(rules).unwrap()
}

const Q_MAX: u32 = 5;
const LIFETIME: u64 = 120;

fn run(scenario: Scenario, world: &World) -> Result<(Option<Detection>, Option<u32>), String> {
    let err = |e: &dyn fmt::Display| e.to_string();
    let alice = world.owner("alice@benign.example").map_err(|e| err(&e))?;
    let victim = world
        .agent(&alice, "calendar", 64, victim_policy(scenario != Scenario::A6, Q_MAX))
        .map_err(|e| err(&e))?;
    let (_runtime, handler, _server) = world
        .serve(victim.clone(), world.receiver_config(Q_MAX, LIFETIME))
        .map_err(|e| err(&e))?;

    let detection = match scenario {
        Scenario::A1 => {
            let anonymous = ChannelConfig::anonymous(world.ca.public());
            match world.connect_as(&anonymous, &victim) {
                Err(e) => Some(Detection::new(STEP_CHANNEL, "certificate", &handshake_code(&e))),
                Ok(mut channel) => {
                    // Past the channel the adversary has no credential at all.
                    match agent::send_app_request(&mut channel, None, b"hello") {
                        Err(AgentError::Rejected(r)) => Some(Detection::new(STEP_TOKEN_REQUEST, "credential", r.code())),
                        _ => None,
                    }
                }
            }
        }
        Scenario::A2 => {
            let mallory = world.owner("mallory@evil.example").map_err(|e| err(&e))?;
            let m = world.agent(&mallory, "probe", 0, ContactPolicy::empty()).map_err(|e| err(&e))?;
            let mut channel = world
                .connect_as(&m.channel_config(world.ca.public()), &victim)
                .map_err(|e| err(&e))?;
            let request = TokenRequest {
                initiator: m.initiator_info(),
                provider_signature: m.provider_signature,
                otk: None,
            };
            match agent::request_token(&mut channel, &request) {
                Err(AgentError::TokenRequestRejected(f)) => Some(Detection::new(STEP_TOKEN_REQUEST, f.check.name(), &f.code)),
                Err(e) => return Err(err(&e)),
                Ok(token) => request_outcome(agent::send_app_request(&mut channel, Some(&token), b"payload")),
            }
        }
        Scenario::A3 => {
            let mallory = world.owner("mallory@evil.example").map_err(|e| err(&e))?;
            let m = world.agent(&mallory, "probe", 0, ContactPolicy::empty()).map_err(|e| err(&e))?;
            let init = world.initiator(m.clone());
            init.request(&victim.agent_id, b"legitimate").map_err(|e| err(&e))?;
            let token = init.cached_token(&victim.agent_id).ok_or("no token cached")?;
            world.clock.advance(LIFETIME + token::DEFAULT_EXPIRY_GRACE_SECS + 1);
            let mut channel = world
                .connect_as(&m.channel_config(world.ca.public()), &victim)
                .map_err(|e| err(&e))?;
            request_outcome(agent::send_app_request(&mut channel, Some(&token), b"late"))
        }
        Scenario::A4 => {
            let carol = world.owner("carol@benign.example").map_err(|e| err(&e))?;
            let c = world.agent(&carol, "assistant", 0, ContactPolicy::empty()).map_err(|e| err(&e))?;
            let mallory = world.owner("mallory@evil.example").map_err(|e| err(&e))?;
            let m = world.agent(&mallory, "probe", 0, ContactPolicy::empty()).map_err(|e| err(&e))?;
            let grant = world
                .registry
                .resolve_contact(&m.agent_id, &victim.agent_id)
                .map_err(|e| err(&e))?;
            let mut channel = world
                .connect_as(&m.channel_config(world.ca.public()), &victim)
                .map_err(|e| err(&e))?;
            // Carol's public metadata and provider signature, over Mallory's channel.
            let request = TokenRequest {
                initiator: c.initiator_info(),
                provider_signature: c.provider_signature,
                otk: Some(grant.otk),
            };
            match agent::request_token(&mut channel, &request) {
                Err(AgentError::TokenRequestRejected(f)) => Some(Detection::new(STEP_TOKEN_REQUEST, f.check.name(), &f.code)),
                Err(e) => return Err(err(&e)),
                Ok(token) => request_outcome(agent::send_app_request(&mut channel, Some(&token), b"as carol")),
            }
        }
        Scenario::A5 => {
            let bob = world.owner("bob@benign.example").map_err(|e| err(&e))?;
            let b = world.agent(&bob, "mail", 0, ContactPolicy::empty()).map_err(|e| err(&e))?;
            let init = world.initiator(b);
            init.request(&victim.agent_id, b"from bob").map_err(|e| err(&e))?;
            let stolen = init.cached_token(&victim.agent_id).ok_or("no token cached")?;
            let mallory = world.owner("mallory@evil.example").map_err(|e| err(&e))?;
            let m = world.agent(&mallory, "probe", 0, ContactPolicy::empty()).map_err(|e| err(&e))?;
            let mut channel = world
                .connect_as(&m.channel_config(world.ca.public()), &victim)
                .map_err(|e| err(&e))?;
            request_outcome(agent::send_app_request(&mut channel, Some(&stolen), b"from mallory"))
        }
        Scenario::A6 => {
            let mallory = world.owner("mallory@evil.example").map_err(|e| err(&e))?;
            let m = world.agent(&mallory, "probe", 0, ContactPolicy::empty()).map_err(|e| err(&e))?;
            let init = world.initiator(m);
            match init.request(&victim.agent_id, b"unsolicited") {
                Err(AgentError::Provider(ServiceError::Registry(e))) => {
                    Some(Detection::new(STEP_CONTACT_RESOLUTION, "contact-policy", e.code().as_str()))
                }
                Err(e) => return Err(err(&e)),
                Ok(_) => None,
            }
        }
        Scenario::A7 => {
            let keys = SigningKeyPair::generate();
            let user_id = format!("copy-1{BOT_DOMAIN}");
            let cert = world.ca.issue(&user_id, keys.public());
            match world.registry.register_user(&user_id, "generated", cert) {
                Err(e @ RegistryError::NotHuman(_)) => {
                    Some(Detection::new(STEP_HUMAN_VERIFICATION, "human-verification", e.code().as_str()))
                }
                Err(e) => return Err(err(&e)),
                Ok(()) => None,
            }
        }
        Scenario::A8 => {
            let mallory = world.owner("mallory@evil.example").map_err(|e| err(&e))?;
            let m = world.agent(&mallory, "probe", 0, ContactPolicy::empty()).map_err(|e| err(&e))?;
            let init = world.initiator(m.clone());
            let token = init.initiate_contact(&victim.agent_id).map_err(|e| err(&e))?;
            let mut channel = world
                .connect_as(&m.channel_config(world.ca.public()), &victim)
                .map_err(|e| err(&e))?;
            let mut accepted = 0u32;
            let mut stop = None;
            for i in 0..Q_MAX * 3 {
                match agent::send_app_request(&mut channel, Some(&token), &i.to_be_bytes()) {
                    Ok(_) => accepted += 1,
                    Err(AgentError::Rejected(r)) => {
                        stop = Some(r);
                        break;
                    }
                    Err(e) => return Err(err(&e)),
                }
            }
            // A second token is bounded by its lifetime as well.
            let late_token = init.initiate_contact(&victim.agent_id).map_err(|e| err(&e))?;
            world.clock.advance(LIFETIME + token::DEFAULT_EXPIRY_GRACE_SECS + 1);
            let mut late_channel = world
                .connect_as(&m.channel_config(world.ca.public()), &victim)
                .map_err(|e| err(&e))?;
            let late = agent::send_app_request(&mut late_channel, Some(&late_token), b"late");
            let bounded = accepted <= Q_MAX && stop.is_some() && matches!(late, Err(AgentError::Rejected(_)));
            if handler.call_count() as u32 != accepted + u32::from(late.is_ok()) {
                return Err("handler saw requests the ledger did not accept".into());
            }
            let detection = bounded.then(|| {
                Detection::new(STEP_TOKEN_REUSE, "token-validation", stop.map(|r| r.code()).unwrap_or_default())
            });
            return Ok((detection, Some(accepted)));
        }
    };
    Ok((detection, None))
}

fn handshake_code(e: &TransportError) -> String {
    match e {
        TransportError::HandshakeRejected(_) => "HANDSHAKE_REJECTED".into(),
        TransportError::BadCertificate => "BAD_CERTIFICATE".into(),
        other => format!("{other:?}").to_uppercase(),
    }
}

fn request_outcome(result: Result<Vec<u8>, AgentError>) -> Option<Detection> {
    match result {
        Ok(_) => None,
        Err(AgentError::Rejected(r)) => Some(Detection::new(STEP_REQUEST, "token-validation", r.code())),
        Err(AgentError::TokenRequestRejected(f)) => Some(Detection::new(STEP_REQUEST, f.check.name(), &f.code)),
        Err(_) => Some(Detection::new(STEP_REQUEST, "transport", "CLOSED")),
    }
}

/// Runs one scenario against a fresh world with the given guards.
pub fn run_attack(scenario: Scenario, guards: Guards) -> AttackReport {
    let world = World::new(guards);
    let disabled_guard = Guard::ALL
        .into_iter()
        .find(|g| !guards.enabled(*g))
        .map(|g| g.name().to_owned());
    let (detection, accepted, note) = match run(scenario, &world) {
        Ok((d, a)) => (d, a, None),
        Err(e) => (None, None, Some(format!("scenario setup failed: {e}"))),
    };
    let detected_at_step = detection.as_ref().map(|d| d.step.to_owned());
    let pass = note.is_none() && detected_at_step.as_deref() == Some(scenario.expected_step());
    AttackReport {
        scenario,
        detected_at_step,
        expected_step: scenario.expected_step().to_owned(),
        pass,
        check: detection.as_ref().map(|d| d.check.clone()),
        error_code: detection.map(|d| d.code),
        requests_accepted: accepted,
        q_max: (scenario == Scenario::A8).then_some(Q_MAX),
        disabled_guard,
        note,
    }
}

pub fn run_all(guards: Guards) -> Vec<AttackReport> {
    Scenario::ALL.into_iter().map(|s| run_attack(s, guards)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MutationResult {
    pub disabled_guard: String,
    pub expected_failures: Vec<Scenario>,
    pub actual_failures: Vec<Scenario>,
    pub pass: bool,
}

/// Disables each guard in turn and checks that exactly the scenarios relying
/// on it stop passing.
pub fn mutation_matrix() -> Vec<MutationResult> {
    Guard::ALL
        .into_iter()
        .map(|guard| {
            let expected: Vec<Scenario> = Scenario::ALL
                .into_iter()
                .filter(|s| s.guards().contains(&guard))
                .collect();
            let actual: Vec<Scenario> = run_all(Guards::without(guard))
                .into_iter()
                .filter(|r| !r.pass)
                .map(|r| r.scenario)
                .collect();
            MutationResult {
                disabled_guard: guard.name().to_owned(),
                pass: expected == actual,
                expected_failures: expected,
                actual_failures: actual,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverheadModel {
    pub rtt: RttDistribution,
    pub t_crypto_ms: f64,
    pub q_max: u32,
    pub m: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Overhead {
    pub provider_cycles: u64,
    pub total_ms: f64,
    pub amortized_ms: f64,
}

/// `⌈m / q_max⌉`.
pub fn provider_cycles(m: u32, q_max: u32) -> u64 {
    assert!(q_max >= 1 && m >= 1, "q_max and m must be positive");
    u64::from(m.div_ceil(q_max))
}

/// Analytic overhead using the mean RTT.
pub fn protocol_overhead(model: &OverheadModel) -> Overhead {
    let cycles = provider_cycles(model.m, model.q_max);
    let total_ms = (model.rtt.mean() + model.t_crypto_ms) * cycles as f64;
    Overhead {
        provider_cycles: cycles,
        total_ms,
        amortized_ms: total_ms / f64::from(model.m),
    }
}

/// Monte Carlo totals: each trial samples one RTT per provider cycle.
/// Trial `i` is seeded with `seed + i`, so results do not depend on the
/// execution mode.
pub fn simulate_overhead(model: &OverheadModel, trials: usize, seed: u64, execution: Execution) -> Vec<f64> {
    let cycles = provider_cycles(model.m, model.q_max);
    execution.map_range(trials, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        (0..cycles)
            .map(|_| model.rtt.sample(&mut rng) + model.t_crypto_ms)
            .sum()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeasuredOverhead {
    pub q_max: u32,
    pub m: u32,
    pub rtt_ms: f64,
    pub provider_cycles: u64,
    pub expected_cycles: u64,
    pub total_ms: f64,
    pub amortized_ms: f64,
    /// Per-cycle cost measured with zero injected RTT.
    pub host_t_crypto_ms: f64,
    pub predicted_total_ms: f64,
}

struct OverheadRig {
    world: World,
    _provider: ServerHandle,
    _receiver: ServerHandle,
    receiver: AgentId,
    initiator: Initiator,
}

fn overhead_rig(q_max: u32, pool: usize, rtt_ms: f64, port: u16) -> Result<OverheadRig, String> {
    let world = World::new(Guards::all());
    let err = |e: &dyn fmt::Display| e.to_string();
    let alice = world.owner("alice@benign.example").map_err(|e| err(&e))?;
    let policy = ContactPolicy::new(vec![PolicyRule::new("*:*", (pool as i64).max(1)).unwrap()]).unwrap();
    let receiver = world.agent(&alice, "calendar", pool, policy).map_err(|e| err(&e))?;
    let bob = world.owner("bob@benign.example").map_err(|e| err(&e))?;
    let initiator_identity = world.agent(&bob, "mail", 0, ContactPolicy::empty()).map_err(|e| err(&e))?;
    let (_runtime, _handler, receiver_server) = world
        .serve(receiver.clone(), world.receiver_config(q_max, 3600))
        .map_err(|e| err(&e))?;

    let provider_addr = SocketAddr::from(([127, 0, 0, 1], port));
    let provider_cfg = service::provider_channel_config(&world.ca, &world.provider_keys);
    let provider = service::serve_provider(
        world.registry.clone(),
        &world.network,
        provider_addr,
        provider_cfg,
        SimOptions {
            rtt: Some(RttDistribution::fixed(rtt_ms)),
            ..Default::default()
        },
    )
    .map_err(|e| err(&e))?;
    let client = ProviderClient::connect(
        &world.network,
        &initiator_identity.channel_config(world.ca.public()),
        provider_addr,
    )
    .map_err(|e| err(&e))?;
    let initiator = Initiator::new(
        initiator_identity,
        Arc::new(client),
        world.network.clone(),
        world.ca.public(),
        world.clock.clone(),
    );
    Ok(OverheadRig {
        receiver: receiver.agent_id.clone(),
        world,
        _provider: provider,
        _receiver: receiver_server,
        initiator,
    })
}

/// Average wall time of one full provider cycle with no injected latency.
pub fn calibrate_t_crypto(cycles: u32) -> Result<f64, String> {
    let rig = overhead_rig(1, cycles as usize + 1, 0.0, 39_999)?;
    // Warm-up cycle opens the receiver channel.
    rig.initiator.request(&rig.receiver, b"warm").map_err(|e| e.to_string())?;
    let before = rig.initiator.authorization_time();
    for i in 0..cycles {
        rig.initiator
            .request(&rig.receiver, &i.to_be_bytes())
            .map_err(|e| e.to_string())?;
    }
    let spent = rig.initiator.authorization_time() - before;
    Ok(spent.as_secs_f64() * 1000.0 / f64::from(cycles))
}

/// Runs `m` requests through the full stack with a fixed Provider RTT and
/// measures time spent obtaining tokens.
pub fn measured_overhead(q_max: u32, m: u32, rtt_ms: f64, host_t_crypto_ms: f64) -> Result<MeasuredOverhead, String> {
    let expected_cycles = provider_cycles(m, q_max);
    let rig = overhead_rig(q_max, expected_cycles as usize + 1, rtt_ms, 40_000)?;
    let calls_before = rig.world.registry.stats().resolve_calls();
    for i in 0..m {
        rig.initiator
            .request(&rig.receiver, &i.to_be_bytes())
            .map_err(|e| e.to_string())?;
    }
    let cycles = rig.world.registry.stats().resolve_calls() - calls_before;
    let total_ms = rig.initiator.authorization_time().as_secs_f64() * 1000.0;
    Ok(MeasuredOverhead {
        q_max,
        m,
        rtt_ms,
        provider_cycles: cycles,
        expected_cycles,
        total_ms,
        amortized_ms: total_ms / f64::from(m),
        host_t_crypto_ms,
        predicted_total_ms: (rtt_ms + host_t_crypto_ms) * expected_cycles as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CapacityModel {
    pub throughput_per_minute: f64,
    pub lifetime_seconds: f64,
}

/// Agents the Provider can keep supplied with tokens: throughput per minute
/// times token lifetime in minutes.
pub fn capacity(model: &CapacityModel) -> f64 {
    assert!(model.throughput_per_minute > 0.0 && model.lifetime_seconds > 0.0);
    model.throughput_per_minute * model.lifetime_seconds / 60.0
}

/// Contact resolutions per minute against an in-memory registry, with
/// `initiators` concurrent callers each resolving `per_initiator` times.
pub fn measure_resolve_throughput(initiators: usize, per_initiator: usize, execution: Execution) -> Result<f64, String> {
    let world = World::new(Guards::all());
    let err = |e: &dyn fmt::Display| e.to_string();
    let alice = world.owner("alice@benign.example").map_err(|e| err(&e))?;
    let total = initiators * per_initiator;
    let policy = ContactPolicy::new(vec![PolicyRule::new("*:*", per_initiator as i64).unwrap()]).unwrap();
    let receiver = world.agent(&alice, "calendar", total, policy).map_err(|e| err(&e))?;
    let ids: Vec<AgentId> = (0..initiators)
        .map(|i| {
            let o = world.owner(&format!("user{i}@benign.example")).map_err(|e| err(&e))?;
            world
                .agent(&o, "a", 0, ContactPolicy::empty())
                .map(|a| a.agent_id.clone())
                .map_err(|e| err(&e))
        })
        .collect::<Result<_, _>>()?;
    let start = Instant::now();
    let ok = execution.map(&ids, |id| {
        (0..per_initiator)
            .filter(|_| world.registry.resolve_contact(id, &receiver.agent_id).is_ok())
            .count()
    });
    let elapsed = start.elapsed().as_secs_f64();
    let granted: usize = ok.iter().sum();
    if granted != total {
        return Err(format!("{granted} of {total} resolutions succeeded"));
    }
    Ok(total as f64 / elapsed * 60.0)
}

/// Mean wall-clock cost of the token operations, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CryptoCosts {
    pub keypair_generation_ms: f64,
    pub token_generation_ms: f64,
    pub token_decryption_ms: f64,
    pub token_validation_initiator_ms: f64,
    pub token_validation_receiver_ms: f64,
    pub agent_registration_prep_ms: f64,
}

impl CryptoCosts {
    /// Generation, decryption and both validations together.
    pub fn token_lifecycle_ms(&self) -> f64 {
        self.token_generation_ms
            + self.token_decryption_ms
            + self.token_validation_initiator_ms
            + self.token_validation_receiver_ms
    }
}

fn mean_ms(iterations: u32, mut f: impl FnMut()) -> f64 {
    let start = Instant::now();
    for _ in 0..iterations {
        f();
    }
    start.elapsed().as_secs_f64() * 1000.0 / f64::from(iterations)
}

/// Times each token operation over `iterations` runs. Registration prep
/// uses `otks` one-time keys.
pub fn measure_crypto_costs(iterations: u32, otks: usize) -> CryptoCosts {
    let iterations = iterations.max(1);
    let receiver_access = ExchangeKeyPair::generate();
    let initiator_access = ExchangeKeyPair::generate();
    let clock = ManualClock::new(HARNESS_EPOCH);
    let params = TokenParams::default();
    let ledger = TokenLedger::default();

    let store = OtkStore::new();
    let otk_pairs: Vec<ExchangeKeyPair> = (0..iterations).map(|_| ExchangeKeyPair::generate()).collect();
    let otk_publics: Vec<_> = otk_pairs.iter().map(|p| p.public()).collect();
    store.extend(otk_pairs);

    let mut tokens = Vec::with_capacity(iterations as usize);
    let mut otk_iter = otk_publics.iter();
    let token_generation_ms = mean_ms(iterations, || {
        let otk = otk_iter.next().expect("one key per iteration");
        let sdhk = token::derive_sdhk_receiver(&store, otk, &initiator_access.public()).expect("fresh key");
        let t = ledger
            .issue(&sdhk, params, initiator_access.public(), clock.now())
            .expect("valid params");
        tokens.push((*otk, t));
    });

    let mut plaintexts = Vec::with_capacity(tokens.len());
    let mut tok_iter = tokens.iter();
    let token_decryption_ms = mean_ms(iterations, || {
        let (otk, t) = tok_iter.next().expect("one token per iteration");
        let sdhk = token::derive_sdhk_initiator(&initiator_access, otk).expect("valid key");
        plaintexts.push((t.clone(), token::read_token(&sdhk, t).expect("own token")));
    });

    let mut cache = TokenCache::new();
    let receiver_id: AgentId = "alice@benign.example:calendar".parse().unwrap();
    let mut pt_iter = plaintexts.iter();
    let token_validation_initiator_ms = mean_ms(iterations, || {
        let (t, plain) = pt_iter.next().expect("one token per iteration");
        cache.insert(receiver_id.clone(), t.clone(), plain);
        assert!(cache.should_reuse(&receiver_id, clock.now()).is_some());
    });

    let pac = initiator_access.public();
    let mut tok_iter = tokens.iter();
    let token_validation_receiver_ms = mean_ms(iterations, || {
        let (_, t) = tok_iter.next().expect("one token per iteration");
        assert!(ledger.validate(t, Some(&pac), clock.now()).is_accept());
    });

    let keypair_generation_ms = mean_ms(iterations, || {
        let _ = ExchangeKeyPair::generate();
        let _ = SigningKeyPair::generate();
    }) / 2.0;

    let owner = SigningKeyPair::generate();
    let ca = CertificateAuthority::generate();
    let provider = SigningKeyPair::generate().public();
    let agent_id = receiver_id.clone();
    let endpoint = EndpointDescriptor::new("bench", "127.0.0.1".parse().unwrap(), 1);
    let prep_iterations = (iterations / 10).max(1);
    let agent_registration_prep_ms = mean_ms(prep_iterations, || {
        let _ = agent::prepare_registration(
            &owner,
            &ca,
            agent_id.clone(),
            endpoint.clone(),
            ContactPolicy::empty(),
            otks,
            &provider,
            Execution::Sequential,
        );
    });
    let _ = receiver_access;

    CryptoCosts {
        keypair_generation_ms,
        token_generation_ms,
        token_decryption_ms,
        token_validation_initiator_ms,
        token_validation_receiver_ms,
        agent_registration_prep_ms,
    }
}

/// Upper bound used for cost-magnitude checks: an order of magnitude over
/// the reference figure.
pub const MAGNITUDE_FACTOR: f64 = 10.0;

pub fn within_magnitude(measured_ms: f64, reference_ms: f64) -> bool {
    measured_ms <= reference_ms * MAGNITUDE_FACTOR
}
