use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

mod agent;
mod error;
mod files;
mod harness;
mod provider;
mod user;

#[derive(Parser, Debug)]
#[command(name = "saga", version, about = "Agent registry, agent daemons and protocol harness")]
struct Cli {
    /// Provider address.
    #[arg(long, global = true, default_value = "127.0.0.1:7400", env = "SAGA_PROVIDER")]
    provider: SocketAddr,

    /// Directory holding the user's keys, certificates and agents.
    #[arg(long, global = true, default_value = "saga-identity", env = "SAGA_IDENTITY_DIR")]
    identity_dir: PathBuf,

    #[arg(long, global = true, value_enum, default_value_t = Format::Human)]
    format: Format,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Human,
    Json,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Provider daemon and state management.
    #[command(subcommand)]
    Provider(provider::ProviderCommand),
    /// Create a user identity, get it certified and register it.
    RegisterUser(user::RegisterUser),
    /// Register a new agent owned by this identity.
    RegisterAgent(user::RegisterAgent),
    /// Replace an agent's contact policy.
    UpdatePolicy(user::UpdatePolicy),
    /// Generate and upload fresh one-time keys.
    RefreshOtks(user::RefreshOtks),
    /// Deactivate an agent.
    Deactivate(user::AgentName),
    /// Restore an initiator's one-time key budget from the policy.
    ResetCounter(user::ResetCounter),
    /// Show an agent's one-time key pool.
    PoolStatus(user::AgentName),
    /// Ask the Provider for a contact grant as one of this identity's agents.
    Resolve(user::Resolve),
    /// Run an agent or send requests as one.
    #[command(subcommand)]
    Agent(agent::AgentCommand),
    /// Attack scenarios and cost models.
    #[command(subcommand)]
    Harness(harness::HarnessCommand),
}

#[derive(Args, Debug, Clone)]
pub struct CaDir {
    /// Directory holding the CA key (the provider state directory in a
    /// single-host deployment).
    #[arg(long, default_value = "saga-provider", env = "SAGA_CA_DIR")]
    pub ca_dir: PathBuf,
}

/// Global options shared by every command.
pub struct Context {
    pub provider: SocketAddr,
    pub identity_dir: PathBuf,
    pub format: Format,
}

impl Context {
    /// Prints `value` as one JSON line, or `human` in human mode.
    pub fn emit<T: Serialize>(&self, value: &T, human: impl FnOnce() -> String) {
        match self.format {
            Format::Json => println!("{}", serde_json::to_string(value).expect("output serializes")),
            Format::Human => println!("{}", human()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_env("SAGA_LOG"))
        .with_writer(std::io::stderr)
        .init();
    let ctx = Context {
        provider: cli.provider,
        identity_dir: cli.identity_dir,
        format: cli.format,
    };
    let result = match cli.command {
        Command::Provider(c) => provider::run(&ctx, c),
        Command::RegisterUser(c) => user::register_user(&ctx, c),
        Command::RegisterAgent(c) => user::register_agent(&ctx, c),
        Command::UpdatePolicy(c) => user::update_policy(&ctx, c),
        Command::RefreshOtks(c) => user::refresh_otks(&ctx, c),
        Command::Deactivate(c) => user::deactivate(&ctx, c),
        Command::ResetCounter(c) => user::reset_counter(&ctx, c),
        Command::PoolStatus(c) => user::pool_status(&ctx, c),
        Command::Resolve(c) => user::resolve(&ctx, c),
        Command::Agent(c) => agent::run(&ctx, c),
        Command::Harness(c) => harness::run(&ctx, c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("saga: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
