use std::fs;
use std::net::SocketAddr;
use std::path::PathBuf;

use clap::Args;
use serde::Serialize;

use saga_core::agent;
use saga_core::crypto::SigningKeyPair;
use saga_core::exec::Execution;
use saga_core::policy::{AgentId, ContactPolicy};
use saga_core::records::{EndpointDescriptor, UserCredentials};
use saga_core::service::{ContactResolver, ProviderClient};
use saga_core::transport::{ChannelConfig, Network};

use crate::error::CliError;
use crate::files::{AgentFile, IdentityDir, ProviderState};
use crate::{CaDir, Context};

#[derive(Args, Debug)]
pub struct RegisterUser {
    /// Email-form user id.
    #[arg(long)]
    pub user: String,
    #[arg(long, env = "SAGA_PASSWORD", hide_env_values = true)]
    pub password: String,
    #[command(flatten)]
    pub ca: CaDir,
}

#[derive(Args, Debug)]
pub struct RegisterAgent {
    #[arg(long)]
    pub name: String,
    /// Address the agent will listen on.
    #[arg(long)]
    pub endpoint: SocketAddr,
    /// Device label recorded with the endpoint.
    #[arg(long, default_value = "localhost")]
    pub device: String,
    /// Number of one-time keys to generate and upload.
    #[arg(long, default_value_t = 10)]
    pub otks: usize,
    /// Contact policy file; without one, nobody may contact the agent.
    #[arg(long)]
    pub policy_file: Option<PathBuf>,
    #[command(flatten)]
    pub ca: CaDir,
}

#[derive(Args, Debug)]
pub struct UpdatePolicy {
    #[arg(long)]
    pub name: String,
    #[arg(long)]
    pub policy_file: PathBuf,
}

#[derive(Args, Debug)]
pub struct RefreshOtks {
    #[arg(long)]
    pub name: String,
    #[arg(long, default_value_t = 10)]
    pub otks: usize,
}

#[derive(Args, Debug)]
pub struct AgentName {
    #[arg(long)]
    pub name: String,
}

#[derive(Args, Debug)]
pub struct ResetCounter {
    #[arg(long)]
    pub name: String,
    /// Initiating agent whose budget is restored.
    #[arg(long)]
    pub initiator: AgentId,
}

#[derive(Args, Debug)]
pub struct Resolve {
    /// Local agent on whose behalf to resolve.
    #[arg(long)]
    pub name: String,
    #[arg(long)]
    pub to: AgentId,
}

fn read_policy(path: &PathBuf) -> Result<ContactPolicy, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    ContactPolicy::from_json(&text).map_err(|e| CliError::new(19, format!("{}: {e}", path.display())))
}

/// Provider connection authenticated with the owner's certificate.
fn owner_client(ctx: &Context, id: &IdentityDir) -> Result<ProviderClient, CliError> {
    let config = ChannelConfig::new(id.user_cert()?, id.user_keys()?, id.manifest.ca_public);
    Ok(ProviderClient::connect(&Network::Tcp, &config, ctx.provider)?)
}

#[derive(Serialize)]
struct Done<'a> {
    status: &'static str,
    agent_id: &'a AgentId,
}

pub fn register_user(ctx: &Context, args: RegisterUser) -> Result<(), CliError> {
    if ctx.identity_dir.join("manifest.json").exists() {
        return Err(CliError::failure(format!("{} already holds an identity", ctx.identity_dir.display())));
    }
    let ca = ProviderState::open(&args.ca.ca_dir)?.ca;
    let keys = SigningKeyPair::generate();
    let cert = ca.issue(&args.user, keys.public());
    let config = ChannelConfig::new(cert.clone(), keys.clone(), ca.public());
    let client = ProviderClient::connect(&Network::Tcp, &config, ctx.provider)?;
    client.register_user(&args.user, &args.password, cert.clone())?;

    let id = IdentityDir::create(&ctx.identity_dir, &args.user, ca.public())?;
    id.save_user(&keys, &cert, &UserCredentials::new(&args.user, &args.password))?;
    #[derive(Serialize)]
    struct Out<'a> {
        status: &'static str,
        user_id: &'a str,
    }
    ctx.emit(
        &Out {
            status: "registered",
            user_id: &args.user,
        },
        || format!("registered {} (identity in {})", args.user, ctx.identity_dir.display()),
    );
    Ok(())
}

pub fn register_agent(ctx: &Context, args: RegisterAgent) -> Result<(), CliError> {
    let mut id = IdentityDir::open(&ctx.identity_dir)?;
    let agent_id = id.agent_id(&args.name)?;
    if id.agent_dir(&args.name).join("agent.json").exists() {
        return Err(CliError::new(11, format!("agent {agent_id} already exists locally")));
    }
    let ca = ProviderState::open(&args.ca.ca_dir)?.ca;
    if ca.public() != id.manifest.ca_public {
        return Err(CliError::failure(format!("{} holds a different CA", args.ca.ca_dir.display())));
    }
    let policy = match &args.policy_file {
        Some(path) => read_policy(path)?,
        None => ContactPolicy::empty(),
    };
    let client = owner_client(ctx, &id)?;
    let provider_public = client.provider_public();
    let endpoint = EndpointDescriptor::new(args.device, args.endpoint.ip(), args.endpoint.port());
    let prepared = agent::prepare_registration(
        &id.user_keys()?,
        &ca,
        agent_id.clone(),
        endpoint.clone(),
        policy,
        args.otks,
        &provider_public,
        Execution::Parallel,
    );
    let provider_signature = client.register_agent(&id.credentials()?, prepared.submission.clone())?;
    let file = AgentFile {
        agent_id: agent_id.clone(),
        endpoint,
        tls_cert: prepared.submission.tls_cert.clone(),
        access_control_public: prepared.access_keys.public(),
        owner_signature: prepared.submission.owner_signature,
        provider_signature,
        provider_public,
    };
    id.save_agent(&args.name, &file, &prepared.tls_keys, &prepared.access_keys, &prepared.otk_secrets)?;

    #[derive(Serialize)]
    struct Out<'a> {
        status: &'static str,
        agent_id: &'a AgentId,
        endpoint: SocketAddr,
        otks: usize,
    }
    ctx.emit(
        &Out {
            status: "registered",
            agent_id: &agent_id,
            endpoint: args.endpoint,
            otks: args.otks,
        },
        || format!("registered {agent_id} at {} with {} one-time keys", args.endpoint, args.otks),
    );
    Ok(())
}

pub fn update_policy(ctx: &Context, args: UpdatePolicy) -> Result<(), CliError> {
    let id = IdentityDir::open(&ctx.identity_dir)?;
    let agent_id = id.agent_id(&args.name)?;
    let policy = read_policy(&args.policy_file)?;
    owner_client(ctx, &id)?.update_policy(&id.credentials()?, &agent_id, policy)?;
    ctx.emit(
        &Done {
            status: "policy-updated",
            agent_id: &agent_id,
        },
        || format!("updated the contact policy of {agent_id}"),
    );
    Ok(())
}

pub fn refresh_otks(ctx: &Context, args: RefreshOtks) -> Result<(), CliError> {
    let id = IdentityDir::open(&ctx.identity_dir)?;
    let agent_id = id.agent_id(&args.name)?;
    id.agent_file(&args.name)?;
    let (secrets, signed) = agent::prepare_otks(&id.user_keys()?, &agent_id, args.otks, Execution::Parallel);
    // Secrets go to disk first so a running daemon can pick them up before
    // the Provider hands them out.
    id.save_otks(&args.name, &secrets)?;
    if let Err(e) = owner_client(ctx, &id).and_then(|c| Ok(c.refresh_otks(&id.credentials()?, &agent_id, signed)?)) {
        for s in &secrets {
            let _ = fs::remove_file(id.otk_dir(&args.name).join(s.public().to_hex()));
        }
        return Err(e);
    }
    #[derive(Serialize)]
    struct Out<'a> {
        status: &'static str,
        agent_id: &'a AgentId,
        otks: usize,
    }
    ctx.emit(
        &Out {
            status: "otks-refreshed",
            agent_id: &agent_id,
            otks: args.otks,
        },
        || format!("uploaded {} one-time keys for {agent_id}", args.otks),
    );
    Ok(())
}

pub fn deactivate(ctx: &Context, args: AgentName) -> Result<(), CliError> {
    let id = IdentityDir::open(&ctx.identity_dir)?;
    let agent_id = id.agent_id(&args.name)?;
    owner_client(ctx, &id)?.deactivate_agent(&id.credentials()?, &agent_id)?;
    ctx.emit(
        &Done {
            status: "deactivated",
            agent_id: &agent_id,
        },
        || format!("deactivated {agent_id}"),
    );
    Ok(())
}

pub fn reset_counter(ctx: &Context, args: ResetCounter) -> Result<(), CliError> {
    let id = IdentityDir::open(&ctx.identity_dir)?;
    let agent_id = id.agent_id(&args.name)?;
    owner_client(ctx, &id)?.reset_counter(&id.credentials()?, &agent_id, &args.initiator)?;
    ctx.emit(
        &Done {
            status: "counter-reset",
            agent_id: &agent_id,
        },
        || format!("reset the budget of {} at {agent_id}", args.initiator),
    );
    Ok(())
}

pub fn pool_status(ctx: &Context, args: AgentName) -> Result<(), CliError> {
    let id = IdentityDir::open(&ctx.identity_dir)?;
    let agent_id = id.agent_id(&args.name)?;
    let (pool_size, unconsumed) = owner_client(ctx, &id)?.pool_status(&id.credentials()?, &agent_id)?;
    let local = id.load_otks(&args.name)?.len();
    #[derive(Serialize)]
    struct Out<'a> {
        agent_id: &'a AgentId,
        pool_size: usize,
        unconsumed: usize,
        local_secrets: usize,
    }
    ctx.emit(
        &Out {
            agent_id: &agent_id,
            pool_size,
            unconsumed,
            local_secrets: local,
        },
        || format!("{agent_id}: {unconsumed} of {pool_size} one-time keys unused, {local} secrets on disk"),
    );
    Ok(())
}

pub fn resolve(ctx: &Context, args: Resolve) -> Result<(), CliError> {
    let id = IdentityDir::open(&ctx.identity_dir)?;
    let identity = id.load_agent(&args.name)?;
    let client = ProviderClient::connect(&Network::Tcp, &identity.channel_config(id.manifest.ca_public), ctx.provider)?;
    let grant = client.resolve_contact(&args.to)?;
    agent::verify_grant(&grant, &args.to, &id.manifest.ca_public, &client.provider_public())?;
    #[derive(Serialize)]
    struct Out {
        agent_id: AgentId,
        endpoint: SocketAddr,
        otk: String,
    }
    let out = Out {
        agent_id: grant.agent_id.clone(),
        endpoint: grant.endpoint.socket_addr(),
        otk: grant.otk.to_hex(),
    };
    ctx.emit(&out, || format!("{} at {} (one-time key {})", out.agent_id, out.endpoint, out.otk));
    Ok(())
}
