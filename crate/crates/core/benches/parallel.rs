use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use saga_core::agent;
use saga_core::crypto::{CertificateAuthority, SigningKeyPair};
use saga_core::exec::Execution;
use saga_core::harness::{self, OverheadModel};
use saga_core::policy::{AgentId, ContactPolicy};
use saga_core::records::{EndpointDescriptor, UserCredentials};
use saga_core::registry::{PasswordCost, Registry, RegistryConfig};
use saga_core::transport::RttDistribution;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn otk_generation(c: &mut Criterion) {
    let owner = SigningKeyPair::generate();
    let id: AgentId = "alice@example.com:calendar".parse().unwrap();
    let mut group = c.benchmark_group("otk_generation_1000");
    for (name, mode) in MODES {
        group.bench_function(name, |b| b.iter(|| agent::prepare_otks(&owner, &id, 1000, mode)));
    }
    group.finish();
}

fn otk_verification(c: &mut Criterion) {
    let owner = SigningKeyPair::generate();
    let id: AgentId = "alice@example.com:calendar".parse().unwrap();
    let (_, signed) = agent::prepare_otks(&owner, &id, 1000, Execution::Parallel);
    let public = owner.public();
    let mut group = c.benchmark_group("otk_verification_1000");
    for (name, mode) in MODES {
        group.bench_function(name, |b| {
            b.iter(|| assert!(mode.find_first_failure(&signed, |o| o.verify(&public, &id)).is_none()))
        });
    }
    group.finish();
}

fn registry_with(execution: Execution, agents: usize) -> Registry {
    let ca = CertificateAuthority::generate();
    let provider = SigningKeyPair::generate();
    let mut config = RegistryConfig::new(ca.public(), provider.clone());
    config.password_cost = PasswordCost::minimal();
    config.execution = execution;
    let registry = Registry::in_memory(config);
    let keys = SigningKeyPair::generate();
    let user = "alice@example.com";
    registry
        .register_user(user, "pw", ca.issue(user, keys.public()))
        .unwrap();
    let creds = UserCredentials::new(user, "pw");
    for i in 0..agents {
        let prepared = agent::prepare_registration(
            &keys,
            &ca,
            AgentId::new(user, &format!("a{i}")).unwrap(),
            EndpointDescriptor::new("bench", "127.0.0.1".parse().unwrap(), 10_000 + i as u16),
            ContactPolicy::empty(),
            8,
            &provider.public(),
            Execution::Parallel,
        );
        registry.register_agent(&creds, prepared.submission).unwrap();
    }
    registry
}

fn audit(c: &mut Criterion) {
    let mut group = c.benchmark_group("audit_200_agents");
    group.sample_size(20);
    for (name, mode) in MODES {
        let registry = registry_with(mode, 200);
        group.bench_function(name, |b| b.iter(|| assert!(registry.audit().is_empty())));
    }
    group.finish();
}

fn overhead_monte_carlo(c: &mut Criterion) {
    let model = OverheadModel {
        rtt: RttDistribution::new(vec![(20.0, 1.0), (50.0, 2.0), (120.0, 1.0)]).unwrap(),
        t_crypto_ms: 7.0,
        q_max: 10,
        m: 1000,
    };
    let mut group = c.benchmark_group("overhead_monte_carlo");
    for trials in [1_000usize, 20_000] {
        for (name, mode) in MODES {
            group.bench_with_input(BenchmarkId::new(name, trials), &trials, |b, &n| {
                b.iter(|| harness::simulate_overhead(&model, n, 7, mode))
            });
        }
    }
    group.finish();
}

fn resolve_throughput(c: &mut Criterion) {
    let mut group = c.benchmark_group("resolve_8x100");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_function(name, |b| b.iter(|| harness::measure_resolve_throughput(8, 100, mode).unwrap()));
    }
    group.finish();
}

criterion_group!(
    benches,
    otk_generation,
    otk_verification,
    audit,
    overhead_monte_carlo,
    resolve_throughput
);
criterion_main!(benches);
