mod common;

use common::{count_files, json, stderr, stdout, Deployment};

const EXAMPLE_POLICY: &str = r#"// calendar assistant: who may reach it
[
  { "agents": "alice@company.com:calendar_agent", "budget": 15 },
  { "agents": "*@company.com:calendar_agent", "budget": 10 },
  { "agents": "bob@mail.com:*", "budget": 100 }
]"#;

#[test]
fn start_probe_stop() {
    let d = Deployment::new();
    let provider = d.start_provider();
    let out = d.saga(&["--format", "json", "provider", "health"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(json(&out)["status"], "ok");
    assert!(provider.terminate().success());
}

#[test]
fn occupied_port_is_named() {
    let d = Deployment::new();
    let _first = d.start_provider();
    let out = d.saga(&["provider", "serve", "--state-dir", "prov"]);
    assert!(!out.status.success());
    let port = d.provider.rsplit(':').next().unwrap();
    assert!(stderr(&out).contains(port), "{}", stderr(&out));
}

#[test]
fn corrupt_state_dir_fails_startup() {
    let d = Deployment::new();
    d.write("prov/provider.key", "not hex");
    let out = d.saga(&["provider", "serve", "--state-dir", "prov"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("provider.key"), "{}", stderr(&out));

    let d = Deployment::new();
    d.write("prov/registry.jsonl", "{\"event\":\"user_registered\"}\n");
    let out = d.saga(&["provider", "serve", "--state-dir", "prov"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("line 1"), "{}", stderr(&out));
}

#[test]
fn registry_survives_restart() {
    let d = Deployment::new();
    let provider = d.start_provider();
    d.register("alice", "alice@company.com");
    d.register("bob", "bob@mail.com");
    d.write("policy.json", EXAMPLE_POLICY);
    let port = common::free_port().to_string();
    let endpoint = format!("127.0.0.1:{port}");
    let out = d.as_user(
        "alice",
        &["register-agent", "--name", "calendar_agent", "--endpoint", &endpoint, "--otks", "5", "--policy-file", "policy.json"],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let endpoint = format!("127.0.0.1:{}", common::free_port());
    let out = d.as_user("bob", &["register-agent", "--name", "mail", "--endpoint", &endpoint, "--otks", "2"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let out = d.as_user("bob", &["resolve", "--name", "mail", "--to", "alice@company.com:calendar_agent"]);
    assert!(out.status.success(), "{}", stderr(&out));

    let before = d.saga(&["--format", "json", "provider", "dump", "--state-dir", "prov"]);
    assert!(provider.terminate().success());
    let provider = d.start_provider();
    let after = d.saga(&["--format", "json", "provider", "dump", "--state-dir", "prov"]);
    assert_eq!(stdout(&before), stdout(&after));
    let dump = json(&after);
    assert_eq!(dump["agents"][0]["counters"]["bob@mail.com:mail"], 99);
    assert_eq!(dump["agents"][0]["unconsumed"], 4);

    // The restarted Provider still serves the same state.
    let out = d.as_user("alice", &["pool-status", "--name", "calendar_agent"]);
    assert_eq!(json(&out)["unconsumed"], 4);
    drop(provider);
}

#[test]
fn register_agent_writes_otk_secrets() {
    let d = Deployment::new();
    let _provider = d.start_provider();
    d.register("alice", "alice@company.com");
    let endpoint = format!("127.0.0.1:{}", common::free_port());
    let out = d.as_user("alice", &["register-agent", "--name", "a", "--endpoint", &endpoint, "--otks", "10"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(count_files(&d.path("alice/agents/a/otks")), 10);
    let out = d.as_user("alice", &["pool-status", "--name", "a"]);
    let status = json(&out);
    assert_eq!(status["pool_size"], 10);
    assert_eq!(status["unconsumed"], 10);

    let out = d.as_user("alice", &["refresh-otks", "--name", "a", "--otks", "3"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(count_files(&d.path("alice/agents/a/otks")), 13);
    assert_eq!(json(&d.as_user("alice", &["pool-status", "--name", "a"]))["pool_size"], 13);

    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        let mode = |p: &str| std::fs::metadata(d.path(p)).unwrap().permissions().mode() & 0o777;
        assert_eq!(mode("alice"), 0o700);
        assert_eq!(mode("alice/user.key"), 0o600);
        assert_eq!(mode("alice/credentials.json"), 0o600);
        assert_eq!(mode("alice/agents/a/tls.key"), 0o600);
    }
}

#[test]
fn example_policy_drives_resolution() {
    let d = Deployment::new();
    let _provider = d.start_provider();
    for (dir, user) in [("c", "carol@corp.example"), ("alice", "alice@company.com"), ("dave", "dave@company.com"), ("eve", "eve@other.example")] {
        d.register(dir, user);
    }
    let endpoint = || format!("127.0.0.1:{}", common::free_port());
    d.write("policy.json", EXAMPLE_POLICY);
    let e = endpoint();
    let out = d.as_user("c", &["register-agent", "--name", "helper", "--endpoint", &e, "--otks", "30"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let out = d.as_user("c", &["update-policy", "--name", "helper", "--policy-file", "policy.json"]);
    assert!(out.status.success(), "{}", stderr(&out));
    for dir in ["alice", "dave", "eve"] {
        let e = endpoint();
        let out = d.as_user(dir, &["register-agent", "--name", "calendar_agent", "--endpoint", &e, "--otks", "0"]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    for (dir, expect) in [("alice", Some(14)), ("dave", Some(9)), ("eve", None)] {
        let out = d.as_user(dir, &["resolve", "--name", "calendar_agent", "--to", "carol@corp.example:helper"]);
        match expect {
            Some(_) => assert!(out.status.success(), "{}", stderr(&out)),
            None => assert_eq!(out.status.code(), Some(12), "{}", stderr(&out)),
        }
    }
    let dump = json(&d.saga(&["--format", "json", "provider", "dump", "--state-dir", "prov"]));
    let counters = &dump["agents"].as_array().unwrap().iter().find(|a| a["agent_id"] == "carol@corp.example:helper").unwrap()["counters"];
    assert_eq!(counters["alice@company.com:calendar_agent"], 14);
    assert_eq!(counters["dave@company.com:calendar_agent"], 9);
}

#[test]
fn deactivated_agent_resolves_not_found() {
    let d = Deployment::new();
    let _provider = d.start_provider();
    d.register("alice", "alice@company.com");
    d.register("bob", "bob@mail.com");
    d.write("policy.json", EXAMPLE_POLICY);
    let e = format!("127.0.0.1:{}", common::free_port());
    d.as_user("alice", &["register-agent", "--name", "a", "--endpoint", &e, "--otks", "2", "--policy-file", "policy.json"]);
    let e = format!("127.0.0.1:{}", common::free_port());
    d.as_user("bob", &["register-agent", "--name", "b", "--endpoint", &e, "--otks", "0"]);
    assert!(d.as_user("bob", &["resolve", "--name", "b", "--to", "alice@company.com:a"]).status.success());
    assert!(d.as_user("alice", &["deactivate", "--name", "a"]).status.success());
    let out = d.as_user("bob", &["resolve", "--name", "b", "--to", "alice@company.com:a"]);
    assert_eq!(out.status.code(), Some(15), "{}", stderr(&out));
    assert!(stderr(&out).contains("NOT_FOUND"));
}

#[test]
fn registry_errors_map_to_exit_codes() {
    let d = Deployment::new();
    let _provider = d.start_provider();
    let out = d.as_user("bot", &["register-user", "--user", "clone@bots.example", "--password", "x"]);
    assert_eq!(out.status.code(), Some(18), "{}", stderr(&out));
    assert!(!d.path("bot").exists(), "failed registration must not leave an identity");

    d.register("alice", "alice@company.com");
    d.register("alice2", "alice@company.com.au");
    // Same user id again, from a fresh identity dir.
    let out = d.as_user("again", &["register-user", "--user", "alice@company.com", "--password", "x"]);
    assert_eq!(out.status.code(), Some(11), "{}", stderr(&out));

    std::fs::write(d.path("alice/credentials.json"), r#"{"user_id":"alice@company.com","password":"wrong"}"#).unwrap();
    let e = format!("127.0.0.1:{}", common::free_port());
    let out = d.as_user("alice", &["register-agent", "--name", "a", "--endpoint", &e]);
    assert_eq!(out.status.code(), Some(10), "{}", stderr(&out));
}

#[test]
fn no_secret_material_in_output() {
    let d = Deployment::new();
    let provider = d.start_provider();
    d.register("alice", "alice@company.com");
    let e = format!("127.0.0.1:{}", common::free_port());
    let reg = d.as_user("alice", &["register-agent", "--name", "a", "--endpoint", &e, "--otks", "3"]);
    let dump = d.saga(&["provider", "dump", "--state-dir", "prov"]);
    let pool = d.as_user("alice", &["pool-status", "--name", "a"]);
    let mut printed = String::new();
    for out in [&reg, &dump, &pool] {
        printed.push_str(&stdout(out));
        printed.push_str(&stderr(out));
    }
    printed.push_str(&provider.first_line);
    let mut secrets = vec![
        std::fs::read_to_string(d.path("prov/ca.key")).unwrap(),
        std::fs::read_to_string(d.path("prov/provider.key")).unwrap(),
        std::fs::read_to_string(d.path("alice/user.key")).unwrap(),
        std::fs::read_to_string(d.path("alice/agents/a/tls.key")).unwrap(),
        std::fs::read_to_string(d.path("alice/agents/a/access.key")).unwrap(),
    ];
    for entry in std::fs::read_dir(d.path("alice/agents/a/otks")).unwrap() {
        secrets.push(std::fs::read_to_string(entry.unwrap().path()).unwrap());
    }
    for secret in secrets {
        assert!(!printed.contains(secret.trim()));
    }
    assert!(!printed.contains("hunter2"));
}

#[test]
fn harness_attack_reports_step() {
    let d = Deployment::new();
    let out = d.saga(&["--format", "json", "harness", "attack", "A3"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report = json(&out);
    assert_eq!(report["scenario"], "A3");
    assert_eq!(report["detected_at_step"], "communication.step8");
    assert_eq!(report["pass"], true);

    let out = d.saga(&["--format", "json", "harness", "attack", "A3", "--disable-guard", "token-lifetime"]);
    assert_eq!(out.status.code(), Some(23));
    assert_eq!(json(&out)["pass"], false);

    let out = d.saga(&["harness", "attack", "A9"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn harness_overhead_counts_cycles() {
    let d = Deployment::new();
    let run = || d.saga(&["--format", "json", "harness", "overhead", "--qmax", "10", "--m", "100", "--seed", "42"]);
    let first = run();
    assert!(first.status.success(), "{}", stderr(&first));
    let report = json(&first);
    assert_eq!(report["provider_cycles"], 10);
    assert_eq!(report["analytic"]["total_ms"], 570.0);
    assert_eq!(stdout(&first), stdout(&run()));
}

#[test]
fn harness_reports_are_reproducible() {
    let d = Deployment::new();
    let a = d.saga(&["--format", "json", "harness", "attacks"]);
    let b = d.saga(&["--format", "json", "harness", "attacks"]);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(stdout(&a).lines().count(), 8);
    assert_eq!(stdout(&a), stdout(&b));
}
