//! On-disk layout for identity and provider state directories.
//!
//! Identity directory (one user, any number of agents):
//!
//! ```text
//! manifest.json                 user id, CA and Provider public keys, agent names
//! user.key                      owner signing secret, hex (0600)
//! user.cert.json                CA-issued owner certificate
//! credentials.json              Provider login (0600)
//! agents/<name>/agent.json      public metadata and signatures
//! agents/<name>/tls.key         channel signing secret, hex (0600)
//! agents/<name>/access.key      access-control exchange secret, hex (0600)
//! agents/<name>/otks/<public>   one-time exchange secret, hex (0600); deleted once used
//! ```
//!
//! Provider state directory:
//!
//! ```text
//! manifest.json                 CA and Provider public keys
//! ca.key, provider.key          signing secrets, hex (0600)
//! registry.jsonl                registry event log
//! ```
//!
//! Directories are created 0700. Public keys and signatures are hex inside
//! JSON.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use saga_core::agent::AgentIdentity;
use saga_core::crypto::{Certificate, CertificateAuthority, ExchangeKeyPair, ExchangePublicKey, Signature, SigningKeyPair, SigningPublicKey};
use saga_core::policy::AgentId;
use saga_core::records::{EndpointDescriptor, UserCredentials};
use saga_core::token::OtkStore;

use crate::error::CliError;

pub const FORMAT_VERSION: u32 = 1;

fn restrict(path: &Path, mode: u32) -> io::Result<()> {
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        fs::set_permissions(path, fs::Permissions::from_mode(mode))?;
    }
    #[cfg(not(unix))]
    let _ = (path, mode);
    Ok(())
}

pub fn private_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))?;
    restrict(path, 0o700).map_err(|e| CliError::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8], secret: bool) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    if secret {
        restrict(&tmp, 0o600).map_err(|e| CliError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T, secret: bool) -> Result<(), CliError> {
    let mut text = serde_json::to_vec_pretty(value).expect("state serializes");
    text.push(b'\n');
    write_file(path, &text, secret)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_slice(&text).map_err(|e| CliError::failure(format!("{}: malformed: {e}", path.display())))
}

fn write_secret(path: &Path, secret: [u8; 32]) -> Result<(), CliError> {
    write_file(path, hex::encode(secret).as_bytes(), true)
}

fn read_secret(path: &Path) -> Result<[u8; 32], CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut out = [0u8; 32];
    hex::decode_to_slice(text.trim(), &mut out)
        .map_err(|_| CliError::failure(format!("{}: not a 32-byte hex secret", path.display())))?;
    Ok(out)
}

pub fn read_signing(path: &Path) -> Result<SigningKeyPair, CliError> {
    read_secret(path).map(SigningKeyPair::from_secret_bytes)
}

pub fn write_signing(path: &Path, keys: &SigningKeyPair) -> Result<(), CliError> {
    write_secret(path, keys.secret_bytes())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProviderManifest {
    pub format: u32,
    pub ca_public: SigningPublicKey,
    pub provider_public: SigningPublicKey,
}

/// Provider state directory, including the deployment's CA.
pub struct ProviderState {
    pub dir: PathBuf,
    pub ca: CertificateAuthority,
    pub provider_keys: SigningKeyPair,
}

impl ProviderState {
    pub fn init(dir: &Path) -> Result<Self, CliError> {
        if dir.join("manifest.json").exists() {
            return Err(CliError::failure(format!("{} is already initialized", dir.display())));
        }
        private_dir(dir)?;
        let ca = CertificateAuthority::generate();
        let provider_keys = SigningKeyPair::generate();
        write_signing(&dir.join("ca.key"), ca.keys())?;
        write_signing(&dir.join("provider.key"), &provider_keys)?;
        write_json(
            &dir.join("manifest.json"),
            &ProviderManifest {
                format: FORMAT_VERSION,
                ca_public: ca.public(),
                provider_public: provider_keys.public(),
            },
            false,
        )?;
        Ok(Self {
            dir: dir.to_path_buf(),
            ca,
            provider_keys,
        })
    }

    /// Loads and cross-checks the state directory.
    pub fn open(dir: &Path) -> Result<Self, CliError> {
        let manifest_path = dir.join("manifest.json");
        if !manifest_path.exists() {
            return Err(CliError::failure(format!(
                "{} is not a provider state directory (run `saga provider init`)",
                dir.display()
            )));
        }
        let manifest: ProviderManifest = read_json(&manifest_path)?;
        if manifest.format != FORMAT_VERSION {
            return Err(CliError::failure(format!("{}: unsupported format {}", manifest_path.display(), manifest.format)));
        }
        let ca = CertificateAuthority::new(read_signing(&dir.join("ca.key"))?);
        let provider_keys = read_signing(&dir.join("provider.key"))?;
        if ca.public() != manifest.ca_public || provider_keys.public() != manifest.provider_public {
            return Err(CliError::failure(format!("{}: keys do not match the manifest", dir.display())));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            ca,
            provider_keys,
        })
    }

    pub fn registry_log(&self) -> PathBuf {
        self.dir.join("registry.jsonl")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdentityManifest {
    pub format: u32,
    pub user_id: String,
    pub ca_public: SigningPublicKey,
    pub agents: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentFile {
    pub agent_id: AgentId,
    pub endpoint: EndpointDescriptor,
    pub tls_cert: Certificate,
    pub access_control_public: ExchangePublicKey,
    pub owner_signature: Signature,
    pub provider_signature: Signature,
    pub provider_public: SigningPublicKey,
}

/// A user's identity directory.
pub struct IdentityDir {
    pub dir: PathBuf,
    pub manifest: IdentityManifest,
}

impl IdentityDir {
    pub fn create(dir: &Path, user_id: &str, ca_public: SigningPublicKey) -> Result<Self, CliError> {
        if dir.join("manifest.json").exists() {
            return Err(CliError::failure(format!("{} already holds an identity", dir.display())));
        }
        private_dir(dir)?;
        let id = Self {
            dir: dir.to_path_buf(),
            manifest: IdentityManifest {
                format: FORMAT_VERSION,
                user_id: user_id.to_owned(),
                ca_public,
                agents: Vec::new(),
            },
        };
        id.save_manifest()?;
        Ok(id)
    }

    pub fn open(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join("manifest.json");
        if !path.exists() {
            return Err(CliError::failure(format!(
                "{} holds no identity (run `saga register-user`)",
                dir.display()
            )));
        }
        let manifest: IdentityManifest = read_json(&path)?;
        if manifest.format != FORMAT_VERSION {
            return Err(CliError::failure(format!("{}: unsupported format {}", path.display(), manifest.format)));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn save_manifest(&self) -> Result<(), CliError> {
        write_json(&self.dir.join("manifest.json"), &self.manifest, false)
    }

    pub fn save_user(&self, keys: &SigningKeyPair, cert: &Certificate, credentials: &UserCredentials) -> Result<(), CliError> {
        write_signing(&self.dir.join("user.key"), keys)?;
        write_json(&self.dir.join("user.cert.json"), cert, false)?;
        write_json(&self.dir.join("credentials.json"), credentials, true)
    }

    pub fn user_keys(&self) -> Result<SigningKeyPair, CliError> {
        read_signing(&self.dir.join("user.key"))
    }

    pub fn user_cert(&self) -> Result<Certificate, CliError> {
        read_json(&self.dir.join("user.cert.json"))
    }

    pub fn credentials(&self) -> Result<UserCredentials, CliError> {
        read_json(&self.dir.join("credentials.json"))
    }

    pub fn agent_dir(&self, name: &str) -> PathBuf {
        self.dir.join("agents").join(name)
    }

    pub fn otk_dir(&self, name: &str) -> PathBuf {
        self.agent_dir(name).join("otks")
    }

    pub fn agent_id(&self, name: &str) -> Result<AgentId, CliError> {
        AgentId::new(&self.manifest.user_id, name).map_err(|e| CliError::failure(e.to_string()))
    }

    pub fn save_agent(
        &mut self,
        name: &str,
        file: &AgentFile,
        tls_keys: &SigningKeyPair,
        access_keys: &ExchangeKeyPair,
        otks: &[ExchangeKeyPair],
    ) -> Result<(), CliError> {
        let dir = self.agent_dir(name);
        private_dir(&dir)?;
        write_signing(&dir.join("tls.key"), tls_keys)?;
        write_secret(&dir.join("access.key"), access_keys.secret_bytes())?;
        self.save_otks(name, otks)?;
        write_json(&dir.join("agent.json"), file, false)?;
        if !self.manifest.agents.iter().any(|a| a == name) {
            self.manifest.agents.push(name.to_owned());
            self.manifest.agents.sort();
        }
        self.save_manifest()
    }

    pub fn save_otks(&self, name: &str, otks: &[ExchangeKeyPair]) -> Result<(), CliError> {
        let dir = self.otk_dir(name);
        private_dir(&dir)?;
        for otk in otks {
            write_secret(&dir.join(otk.public().to_hex()), otk.secret_bytes())?;
        }
        Ok(())
    }

    /// Secret one-time keys still on disk for `name`.
    pub fn load_otks(&self, name: &str) -> Result<Vec<ExchangeKeyPair>, CliError> {
        let dir = self.otk_dir(name);
        let entries = match fs::read_dir(&dir) {
            Ok(entries) => entries,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(CliError::io(&dir, e)),
        };
        let mut out = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| CliError::io(&dir, e))?.path();
            if path.extension().is_some_and(|x| x == "tmp") {
                continue;
            }
            let pair = ExchangeKeyPair::from_secret_bytes(read_secret(&path)?);
            let name_ok = path.file_name().and_then(|n| n.to_str()) == Some(pair.public().to_hex().as_str());
            if !name_ok {
                return Err(CliError::failure(format!("{}: key does not match its file name", path.display())));
            }
            out.push(pair);
        }
        Ok(out)
    }

    pub fn agent_file(&self, name: &str) -> Result<AgentFile, CliError> {
        let path = self.agent_dir(name).join("agent.json");
        if !path.exists() {
            return Err(CliError::failure(format!("no agent {name:?} in {}", self.dir.display())));
        }
        read_json(&path)
    }

    /// Full agent credentials. Each one-time key file is deleted as soon as
    /// the key is consumed.
    pub fn load_agent(&self, name: &str) -> Result<AgentIdentity, CliError> {
        let file = self.agent_file(name)?;
        let dir = self.agent_dir(name);
        let access_keys = ExchangeKeyPair::from_secret_bytes(read_secret(&dir.join("access.key"))?);
        if access_keys.public() != file.access_control_public {
            return Err(CliError::failure(format!("{}: access key does not match agent.json", dir.display())));
        }
        let otk_dir = self.otk_dir(name);
        let otks = OtkStore::new().with_consume_hook(move |otk| {
            let path = otk_dir.join(otk.to_hex());
            if let Err(e) = fs::remove_file(&path) {
                tracing::warn!(path = %path.display(), error = %e, "could not delete used one-time key");
            }
        });
        otks.extend(self.load_otks(name)?);
        Ok(AgentIdentity {
            agent_id: file.agent_id,
            endpoint: file.endpoint,
            tls_keys: read_signing(&dir.join("tls.key"))?,
            tls_cert: file.tls_cert,
            access_keys,
            otks,
            owner_signature: file.owner_signature,
            provider_signature: file.provider_signature,
            owner_cert: self.user_cert()?,
            provider_public: file.provider_public,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[cfg(unix)]
    fn mode(path: &Path) -> u32 {
        use std::os::unix::fs::PermissionsExt;
        fs::metadata(path).unwrap().permissions().mode() & 0o777
    }

    #[test]
    fn provider_state_round_trips() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("provider");
        let created = ProviderState::init(&dir).unwrap();
        let opened = ProviderState::open(&dir).unwrap();
        assert_eq!(created.ca.public(), opened.ca.public());
        assert_eq!(created.provider_keys.public(), opened.provider_keys.public());
        assert!(ProviderState::init(&dir).is_err());
        #[cfg(unix)]
        {
            assert_eq!(mode(&dir), 0o700);
            assert_eq!(mode(&dir.join("ca.key")), 0o600);
        }
    }

    #[test]
    fn swapped_key_file_is_reported() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("provider");
        ProviderState::init(&dir).unwrap();
        write_signing(&dir.join("provider.key"), &SigningKeyPair::generate()).unwrap();
        let err = ProviderState::open(&dir).err().unwrap();
        assert!(err.message.contains("do not match"), "{err}");
    }

    #[test]
    fn otk_files_are_named_by_public_key() {
        let tmp = tempfile::tempdir().unwrap();
        let id = IdentityDir::create(tmp.path(), "alice@example.com", SigningKeyPair::generate().public()).unwrap();
        let otks: Vec<_> = (0..3).map(|_| ExchangeKeyPair::generate()).collect();
        id.save_otks("a", &otks).unwrap();
        let mut loaded: Vec<_> = id.load_otks("a").unwrap().iter().map(|k| k.public()).collect();
        let mut expected: Vec<_> = otks.iter().map(|k| k.public()).collect();
        loaded.sort_by_key(|k| k.0);
        expected.sort_by_key(|k| k.0);
        assert_eq!(loaded, expected);
        #[cfg(unix)]
        assert_eq!(mode(&id.otk_dir("a").join(otks[0].public().to_hex())), 0o600);
    }
}
