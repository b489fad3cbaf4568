use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use clap::Subcommand;
use serde::Serialize;

use saga_core::crypto::SigningKeyPair;
use saga_core::registry::{DenylistVerifier, FileStore, Registry, RegistryConfig};
use saga_core::service::{self, ProviderClient};
use saga_core::transport::{ChannelConfig, Network, SimOptions};

use crate::error::CliError;
use crate::files::ProviderState;
use crate::{CaDir, Context};

#[derive(Subcommand, Debug)]
pub enum ProviderCommand {
    /// Create a state directory with a fresh CA and Provider key.
    Init {
        #[arg(long, default_value = "saga-provider")]
        state_dir: PathBuf,
    },
    /// Run the Provider until SIGTERM or SIGINT.
    Serve {
        #[arg(long, default_value = "saga-provider")]
        state_dir: PathBuf,
        /// Listen address; defaults to --provider.
        #[arg(long)]
        listen: Option<SocketAddr>,
        /// User id or `@domain` the human verifier refuses. Repeatable.
        #[arg(long = "deny")]
        deny: Vec<String>,
    },
    /// Print the registry contents without secrets.
    Dump {
        #[arg(long, default_value = "saga-provider")]
        state_dir: PathBuf,
    },
    /// Check that the Provider answers.
    Health {
        #[command(flatten)]
        ca: CaDir,
    },
}

pub fn run(ctx: &Context, command: ProviderCommand) -> Result<(), CliError> {
    match command {
        ProviderCommand::Init { state_dir } => {
            let state = ProviderState::init(&state_dir)?;
            #[derive(Serialize)]
            struct Out {
                state_dir: PathBuf,
                ca_public: String,
                provider_public: String,
            }
            let out = Out {
                state_dir,
                ca_public: state.ca.public().to_hex(),
                provider_public: state.provider_keys.public().to_hex(),
            };
            ctx.emit(&out, || format!("initialized {}", out.state_dir.display()));
            Ok(())
        }
        ProviderCommand::Serve { state_dir, listen, deny } => serve(ctx, state_dir, listen.unwrap_or(ctx.provider), deny),
        ProviderCommand::Dump { state_dir } => {
            let state = ProviderState::open(&state_dir)?;
            let registry = open_registry(&state, Vec::new())?;
            let dump = registry.dump();
            match ctx.format {
                crate::Format::Json => println!("{}", serde_json::to_string(&dump).expect("dump serializes")),
                crate::Format::Human => println!("{}", serde_json::to_string_pretty(&dump).expect("dump serializes")),
            }
            Ok(())
        }
        ProviderCommand::Health { ca } => {
            let state = ProviderState::open(&ca.ca_dir)?;
            let keys = SigningKeyPair::generate();
            let config = ChannelConfig::new(state.ca.issue("operator", keys.public()), keys, state.ca.public());
            let client = ProviderClient::connect(&Network::Tcp, &config, ctx.provider)?;
            let (users, agents) = client.health()?;
            #[derive(Serialize)]
            struct Out {
                status: &'static str,
                users: usize,
                agents: usize,
            }
            ctx.emit(&Out { status: "ok", users, agents }, || {
                format!("provider at {} is up: {users} users, {agents} agents", ctx.provider)
            });
            Ok(())
        }
    }
}

fn open_registry(state: &ProviderState, deny: Vec<String>) -> Result<Registry, CliError> {
    let log = state.registry_log();
    let store = FileStore::open(&log).map_err(|e| CliError::io(&log, e))?;
    let mut config = RegistryConfig::new(state.ca.public(), state.provider_keys.clone());
    config.verifier = Box::new(DenylistVerifier::new(deny));
    Registry::open(config, Box::new(store))
        .map_err(|e| CliError::failure(format!("cannot load {}: {e}", log.display())))
}

/// Blocks until SIGTERM or SIGINT, calling `tick` about once a second.
pub fn wait_for_signal(mut tick: impl FnMut()) -> Result<(), CliError> {
    let stop = Arc::new(AtomicBool::new(false));
    for signal in [signal_hook::consts::SIGTERM, signal_hook::consts::SIGINT] {
        signal_hook::flag::register(signal, stop.clone())
            .map_err(|e| CliError::failure(format!("cannot install signal handler: {e}")))?;
    }
    let mut ticks = 0u32;
    while !stop.load(Ordering::SeqCst) {
        std::thread::sleep(Duration::from_millis(100));
        ticks += 1;
        if ticks.is_multiple_of(10) {
            tick();
        }
    }
    Ok(())
}

fn serve(ctx: &Context, state_dir: PathBuf, addr: SocketAddr, deny: Vec<String>) -> Result<(), CliError> {
    let state = ProviderState::open(&state_dir)?;
    let registry = Arc::new(open_registry(&state, deny)?);
    let config = service::provider_channel_config(&state.ca, &state.provider_keys);
    let server = service::serve_provider(registry.clone(), &Network::Tcp, addr, config, SimOptions::default())?;
    #[derive(Serialize)]
    struct Listening {
        event: &'static str,
        address: SocketAddr,
    }
    ctx.emit(
        &Listening {
            event: "listening",
            address: server.local_addr(),
        },
        || format!("provider listening on {}", server.local_addr()),
    );
    wait_for_signal(|| {})?;
    server.stop();
    let stats = registry.stats();
    tracing::info!(
        resolve_calls = stats.resolve_calls(),
        grants = stats.grants_issued(),
        "provider stopped"
    );
    Ok(())
}
