#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdout, Command, Output, Stdio};
use std::time::{Duration, Instant};

pub const BIN: &str = env!("CARGO_BIN_EXE_saga");

pub fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

/// A scratch deployment: provider state dir plus identity dirs under one
/// temporary directory.
pub struct Deployment {
    pub root: tempfile::TempDir,
    pub provider: String,
}

impl Deployment {
    pub fn new() -> Self {
        let d = Self {
            root: tempfile::tempdir().unwrap(),
            provider: format!("127.0.0.1:{}", free_port()),
        };
        let out = d.saga(&["provider", "init", "--state-dir", "prov"]);
        assert!(out.status.success(), "{}", stderr(&out));
        d
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.path().join(rel)
    }

    pub fn command(&self, args: &[&str]) -> Command {
        let mut c = Command::new(BIN);
        c.current_dir(self.root.path())
            .env("SAGA_PROVIDER", &self.provider)
            .env("SAGA_CA_DIR", "prov")
            .env_remove("SAGA_IDENTITY_DIR")
            .env_remove("SAGA_PASSWORD")
            .args(args);
        c
    }

    pub fn saga(&self, args: &[&str]) -> Output {
        self.command(args).output().unwrap()
    }

    pub fn as_user(&self, identity: &str, args: &[&str]) -> Output {
        let mut full = vec!["--format", "json", "--identity-dir", identity];
        full.extend_from_slice(args);
        self.saga(&full)
    }

    pub fn start_provider(&self) -> Daemon {
        Daemon::spawn(self.command(&["provider", "serve", "--state-dir", "prov", "--deny", "@bots.example"]))
    }

    pub fn register(&self, identity: &str, user: &str) {
        let out = self.as_user(identity, &["register-user", "--user", user, "--password", "hunter2"]);
        assert!(out.status.success(), "{}", stderr(&out));
    }

    pub fn write(&self, rel: &str, text: &str) {
        std::fs::write(self.path(rel), text).unwrap();
    }
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn json(out: &Output) -> serde_json::Value {
    let text = stdout(out);
    let line = text.lines().last().unwrap_or_else(|| panic!("no output; stderr: {}", stderr(out)));
    serde_json::from_str(line).unwrap()
}

pub fn count_files(dir: &Path) -> usize {
    std::fs::read_dir(dir).map(|d| d.count()).unwrap_or(0)
}

/// A background `saga` process, stopped with SIGTERM on drop.
pub struct Daemon {
    child: Child,
    _stdout: BufReader<ChildStdout>,
    pub first_line: String,
}

impl Daemon {
    pub fn spawn(mut command: Command) -> Self {
        let mut child = command
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .unwrap();
        let mut reader = BufReader::new(child.stdout.take().unwrap());
        let mut first_line = String::new();
        reader.read_line(&mut first_line).unwrap();
        assert!(first_line.contains("listening"), "daemon did not start: {first_line:?}");
        Self {
            child,
            _stdout: reader,
            first_line,
        }
    }

    /// Sends SIGTERM and waits for a clean exit.
    pub fn terminate(mut self) -> std::process::ExitStatus {
        self.signal();
        self.wait()
    }

    fn signal(&self) {
        Command::new("kill")
            .args(["-TERM", &self.child.id().to_string()])
            .status()
            .unwrap();
    }

    fn wait(&mut self) -> std::process::ExitStatus {
        let deadline = Instant::now() + Duration::from_secs(10);
        loop {
            if let Some(status) = self.child.try_wait().unwrap() {
                return status;
            }
            if Instant::now() > deadline {
                let _ = self.child.kill();
                panic!("daemon ignored SIGTERM");
            }
            std::thread::sleep(Duration::from_millis(20));
        }
    }
}

impl Drop for Daemon {
    fn drop(&mut self) {
        if let Ok(None) = self.child.try_wait() {
            self.signal();
            let _ = self.wait();
        }
    }
}
