use std::sync::Arc;

use clap::Subcommand;
use serde::Serialize;

use saga_core::agent::{AgentRuntime, EchoHandler, Initiator, ReceiverConfig};
use saga_core::clock::SystemClock;
use saga_core::policy::AgentId;
use saga_core::service::ProviderClient;
use saga_core::token::TokenParams;
use saga_core::transport::{Network, SimOptions};

use crate::error::CliError;
use crate::files::IdentityDir;
use crate::provider::wait_for_signal;
use crate::Context;

#[derive(Subcommand, Debug)]
pub enum AgentCommand {
    /// Accept contacts on the agent's registered endpoint until SIGTERM.
    Serve {
        #[arg(long)]
        name: String,
        /// Requests allowed per issued token.
        #[arg(long, default_value_t = 10)]
        qmax: u32,
        #[arg(long, default_value_t = 600)]
        lifetime_seconds: u64,
    },
    /// Send requests to another agent, contacting the Provider when needed.
    Send {
        #[arg(long)]
        name: String,
        #[arg(long)]
        to: AgentId,
        #[arg(long, default_value_t = 1)]
        count: u32,
        #[arg(long, default_value = "hello")]
        message: String,
    },
}

pub fn run(ctx: &Context, command: AgentCommand) -> Result<(), CliError> {
    match command {
        AgentCommand::Serve {
            name,
            qmax,
            lifetime_seconds,
        } => serve(ctx, &name, qmax, lifetime_seconds),
        AgentCommand::Send { name, to, count, message } => send(ctx, &name, &to, count, &message),
    }
}

fn serve(ctx: &Context, name: &str, qmax: u32, lifetime_seconds: u64) -> Result<(), CliError> {
    if qmax == 0 || lifetime_seconds == 0 {
        return Err(CliError::failure("--qmax and --lifetime-seconds must be positive"));
    }
    let id = IdentityDir::open(&ctx.identity_dir)?;
    let identity = Arc::new(id.load_agent(name)?);
    let config = ReceiverConfig {
        token: TokenParams {
            lifetime_seconds,
            max_requests: qmax,
        },
        ..Default::default()
    };
    let runtime = Arc::new(AgentRuntime::new(
        identity.clone(),
        id.manifest.ca_public,
        config,
        Box::new(EchoHandler),
        Arc::new(SystemClock),
    ));
    let server = runtime.serve(&Network::Tcp, SimOptions::default())?;

    #[derive(Serialize)]
    struct Listening<'a> {
        event: &'static str,
        agent_id: &'a AgentId,
        address: std::net::SocketAddr,
        otks: usize,
    }
    ctx.emit(
        &Listening {
            event: "listening",
            agent_id: &identity.agent_id,
            address: server.local_addr(),
            otks: identity.otks.len(),
        },
        || format!("{} listening on {}", identity.agent_id, server.local_addr()),
    );
    // Keys uploaded by `refresh-otks` while running.
    wait_for_signal(|| match id.load_otks(name) {
        Ok(keys) => {
            for key in keys {
                if !identity.otks.contains(&key.public()) {
                    identity.otks.insert(key);
                }
            }
            runtime.ledger().prune(saga_core::clock::Clock::now(&SystemClock));
        }
        Err(e) => tracing::warn!(error = %e, "cannot rescan one-time keys"),
    })?;
    server.stop();
    Ok(())
}

fn send(ctx: &Context, name: &str, to: &AgentId, count: u32, message: &str) -> Result<(), CliError> {
    let id = IdentityDir::open(&ctx.identity_dir)?;
    let identity = Arc::new(id.load_agent(name)?);
    let ca_public = id.manifest.ca_public;
    let client = ProviderClient::connect(&Network::Tcp, &identity.channel_config(ca_public), ctx.provider)?;
    if client.provider_public() != identity.provider_public {
        return Err(CliError::failure(format!(
            "provider at {} does not hold the key {} was registered with",
            ctx.provider, identity.agent_id
        )));
    }
    let initiator = Initiator::new(identity, Arc::new(client), Network::Tcp, ca_public, Arc::new(SystemClock));

    #[derive(Serialize)]
    struct Out<'a> {
        to: &'a AgentId,
        sent: u32,
        accepted: u32,
        provider_cycles: u64,
        #[serde(skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    }
    let mut accepted = 0;
    let mut failure = None;
    for i in 0..count {
        match initiator.request(to, format!("{message} #{i}").as_bytes()) {
            Ok(reply) => {
                accepted += 1;
                tracing::debug!(reply = %String::from_utf8_lossy(&reply), "reply");
            }
            Err(e) => {
                failure = Some(CliError::from(e));
                break;
            }
        }
    }
    let _ = initiator.release(to);
    let out = Out {
        to,
        sent: accepted + u32::from(failure.is_some()),
        accepted,
        provider_cycles: initiator.provider_cycles(),
        error: failure.as_ref().map(|e| e.message.clone()),
    };
    ctx.emit(&out, || {
        format!(
            "{accepted} of {count} requests accepted by {to}, {} provider cycles",
            out.provider_cycles
        )
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}
