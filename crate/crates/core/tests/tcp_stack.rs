//! Provider and agents over real localhost TCP.

use std::net::{SocketAddr, TcpListener};
use std::sync::Arc;

use saga_core::agent::{self, AgentError, AgentRuntime, EchoHandler, Initiator, ReceiverConfig};
use saga_core::clock::SystemClock;
use saga_core::crypto::{CertificateAuthority, SigningKeyPair};
use saga_core::exec::Execution;
use saga_core::policy::{AgentId, ContactPolicy, PolicyRule};
use saga_core::records::{EndpointDescriptor, UserCredentials};
use saga_core::registry::{PasswordCost, Registry, RegistryConfig, RegistryError};
use saga_core::service::{self, ProviderClient, ServiceError};
use saga_core::token::TokenParams;
use saga_core::transport::{ChannelConfig, Network, SimOptions};

fn free_addr() -> SocketAddr {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap()
}

struct Owner {
    keys: SigningKeyPair,
    creds: UserCredentials,
    client: ProviderClient,
}

fn owner(ca: &CertificateAuthority, provider: SocketAddr, user: &str) -> Owner {
    let keys = SigningKeyPair::generate();
    let cert = ca.issue(user, keys.public());
    let config = ChannelConfig::new(cert.clone(), keys.clone(), ca.public());
    let client = ProviderClient::connect(&Network::Tcp, &config, provider).unwrap();
    client.register_user(user, "pw", cert).unwrap();
    Owner {
        keys,
        creds: UserCredentials::new(user, "pw"),
        client,
    }
}

fn agent(ca: &CertificateAuthority, o: &Owner, name: &str, otks: usize, policy: ContactPolicy) -> Arc<agent::AgentIdentity> {
    let id = AgentId::new(&o.creds.user_id, name).unwrap();
    let addr = free_addr();
    let prepared = agent::prepare_registration(
        &o.keys,
        ca,
        id,
        EndpointDescriptor::new("test", addr.ip(), addr.port()),
        policy,
        otks,
        &o.client.provider_public(),
        Execution::Parallel,
    );
    let sig = o.client.register_agent(&o.creds, prepared.submission.clone()).unwrap();
    let user_cert = ca.issue(&o.creds.user_id, o.keys.public());
    Arc::new(prepared.into_identity(sig, user_cert, o.client.provider_public()))
}

#[test]
fn exchange_over_tcp() {
    let ca = CertificateAuthority::generate();
    let provider_keys = SigningKeyPair::generate();
    let mut config = RegistryConfig::new(ca.public(), provider_keys.clone());
    config.password_cost = PasswordCost::minimal();
    let registry = Arc::new(Registry::in_memory(config));
    let provider_addr = free_addr();
    let _provider = service::serve_provider(
        registry.clone(),
        &Network::Tcp,
        provider_addr,
        service::provider_channel_config(&ca, &provider_keys),
        SimOptions::default(),
    )
    .unwrap();

    let alice = owner(&ca, provider_addr, "alice@company.com");
    let bob = owner(&ca, provider_addr, "bob@mail.com");
    let policy = ContactPolicy::new(vec![PolicyRule::new("bob@mail.com:*", 3).unwrap()]).unwrap();
    let receiver = agent(&ca, &alice, "calendar", 5, policy);
    let sender = agent(&ca, &bob, "mail", 0, ContactPolicy::empty());

    let runtime = Arc::new(AgentRuntime::new(
        receiver.clone(),
        ca.public(),
        ReceiverConfig {
            token: TokenParams {
                lifetime_seconds: 60,
                max_requests: 4,
            },
            ..Default::default()
        },
        Box::new(EchoHandler),
        Arc::new(SystemClock),
    ));
    let _server = runtime.serve(&Network::Tcp, SimOptions::default()).unwrap();

    let client = ProviderClient::connect(&Network::Tcp, &sender.channel_config(ca.public()), provider_addr).unwrap();
    let initiator = Initiator::new(sender, Arc::new(client), Network::Tcp, ca.public(), Arc::new(SystemClock));
    for i in 0..12u32 {
        let reply = initiator.request(&receiver.agent_id, &i.to_be_bytes()).unwrap();
        assert_eq!(reply, i.to_be_bytes());
    }
    // Budget of 3 one-time keys, 4 requests each.
    assert_eq!(initiator.provider_cycles(), 3);
    assert_eq!(receiver.otks.len(), 2);
    match initiator.request(&receiver.agent_id, b"one more") {
        Err(AgentError::Provider(ServiceError::Registry(RegistryError::QuotaExhausted { .. }))) => {}
        other => panic!("expected QUOTA_EXHAUSTED, got {other:?}"),
    }
    assert_eq!(registry.pool_status(&receiver.agent_id), Some((5, 2)));
}
