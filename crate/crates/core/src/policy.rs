//! Contact policies: which initiating agents may obtain one-time keys for a
//! receiving agent, and how many.
//!
//! A policy is a list of `{ "agents": <pattern>, "budget": <n> }` rules. A
//! pattern has the same `user@domain:agent` shape as an agent id, and `*`
//! matches any run of characters on its own side of the `:`. When several
//! rules match, the most specific one decides the budget:
//!
//! 1. more literal (non-`*`) characters wins,
//! 2. then fewer `*` tokens wins,
//! 3. then the lexicographically smaller pattern wins.
//!
//! The order is total, so the outcome never depends on rule order.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Budget value meaning "never issue keys to this initiator".
pub const BLOCKED: i64 = -1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PolicyError {
    #[error("invalid agent id {0:?}: expected user@domain:agent")]
    InvalidAgentId(String),
    #[error("invalid pattern {0:?}: expected exactly one ':' separator")]
    InvalidPattern(String),
    #[error("invalid budget {budget} for pattern {pattern:?}: must be >= -1")]
    InvalidBudget { pattern: String, budget: i64 },
    #[error("duplicate pattern {0:?}")]
    DuplicatePattern(String),
    #[error("malformed policy document: {0}")]
    Malformed(String),
}

/// `user_id:agent_name`, where `user_id` is an email-form identifier.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AgentId {
    user_id: String,
    agent_name: String,
}

impl AgentId {
    pub fn new(user_id: &str, agent_name: &str) -> Result<Self, PolicyError> {
        let candidate = format!("{user_id}:{agent_name}");
        let valid = !agent_name.is_empty()
            && !agent_name.contains(':')
            && !user_id.contains(':')
            && is_email_form(user_id);
        if !valid {
            return Err(PolicyError::InvalidAgentId(candidate));
        }
        Ok(Self {
            user_id: user_id.to_owned(),
            agent_name: agent_name.to_owned(),
        })
    }

    pub fn user_id(&self) -> &str {
        &self.user_id
    }

    pub fn agent_name(&self) -> &str {
        &self.agent_name
    }
}

pub(crate) fn is_email_form(user_id: &str) -> bool {
    let mut parts = user_id.split('@');
    matches!(
        (parts.next(), parts.next(), parts.next()),
        (Some(local), Some(domain), None) if !local.is_empty() && !domain.is_empty()
    ) && !user_id.contains(':')
        && !user_id.chars().any(char::is_whitespace)
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.user_id, self.agent_name)
    }
}

impl FromStr for AgentId {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (user, agent) = s
            .split_once(':')
            .ok_or_else(|| PolicyError::InvalidAgentId(s.to_owned()))?;
        Self::new(user, agent).map_err(|_| PolicyError::InvalidAgentId(s.to_owned()))
    }
}

impl Serialize for AgentId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for AgentId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PolicyRule {
    #[serde(rename = "agents")]
    pub pattern: String,
    pub budget: i64,
}

impl PolicyRule {
    pub fn new(pattern: impl Into<String>, budget: i64) -> Result<Self, PolicyError> {
        let rule = Self {
            pattern: pattern.into(),
            budget,
        };
        rule.validate()?;
        Ok(rule)
    }

    fn validate(&self) -> Result<(), PolicyError> {
        if self.pattern.is_empty() || self.pattern.matches(':').count() != 1 {
            return Err(PolicyError::InvalidPattern(self.pattern.clone()));
        }
        if self.budget < BLOCKED {
            return Err(PolicyError::InvalidBudget {
                pattern: self.pattern.clone(),
                budget: self.budget,
            });
        }
        Ok(())
    }

    pub fn matches(&self, agent: &AgentId) -> bool {
        let (user_pat, agent_pat) = self
            .pattern
            .split_once(':')
            .expect("validated patterns contain a separator");
        glob_match(user_pat, agent.user_id()) && glob_match(agent_pat, agent.agent_name())
    }

    pub fn literal_chars(&self) -> usize {
        self.pattern.chars().filter(|&c| c != '*').count()
    }

    /// Number of maximal `*` runs; `**` counts as one token.
    pub fn wildcard_tokens(&self) -> usize {
        let mut tokens = 0;
        let mut prev_star = false;
        for c in self.pattern.chars() {
            let star = c == '*';
            if star && !prev_star {
                tokens += 1;
            }
            prev_star = star;
        }
        tokens
    }

    /// `Ordering::Greater` when `self` is more specific than `other`.
    pub fn specificity_cmp(&self, other: &PolicyRule) -> Ordering {
        self.literal_chars()
            .cmp(&other.literal_chars())
            .then_with(|| other.wildcard_tokens().cmp(&self.wildcard_tokens()))
            .then_with(|| other.pattern.cmp(&self.pattern))
    }
}

/// Iterative wildcard match with single-point backtracking; linear in
/// practice and never recursive.
fn glob_match(pattern: &str, text: &str) -> bool {
    let p: Vec<char> = pattern.chars().collect();
    let t: Vec<char> = text.chars().collect();
    let (mut pi, mut ti) = (0, 0);
    let mut backtrack: Option<(usize, usize)> = None;
    while ti < t.len() {
        if pi < p.len() && p[pi] == '*' {
            backtrack = Some((pi, ti));
            pi += 1;
        } else if pi < p.len() && p[pi] == t[ti] {
            pi += 1;
            ti += 1;
        } else if let Some((star_p, star_t)) = backtrack {
            pi = star_p + 1;
            ti = star_t + 1;
            backtrack = Some((star_p, star_t + 1));
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|&c| c == '*')
}

/// Outcome of evaluating a policy for one initiator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyDecision {
    NoMatch,
    Blocked,
    Allowed(u32),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct ContactPolicy {
    rules: Vec<PolicyRule>,
}

impl ContactPolicy {
    pub fn new(rules: Vec<PolicyRule>) -> Result<Self, PolicyError> {
        let mut seen = std::collections::HashSet::new();
        for rule in &rules {
            rule.validate()?;
            if !seen.insert(rule.pattern.as_str()) {
                return Err(PolicyError::DuplicatePattern(rule.pattern.clone()));
            }
        }
        Ok(Self { rules })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn rules(&self) -> &[PolicyRule] {
        &self.rules
    }

    /// Parses the JSON policy file format. Whole-line `//` comments are
    /// accepted so that annotated policy files load unchanged.
    pub fn from_json(text: &str) -> Result<Self, PolicyError> {
        let stripped: String = text
            .lines()
            .filter(|line| !line.trim_start().starts_with("//"))
            .collect::<Vec<_>>()
            .join("\n");
        let rules: Vec<PolicyRule> =
            serde_json::from_str(&stripped).map_err(|e| PolicyError::Malformed(e.to_string()))?;
        Self::new(rules)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(&self.rules).expect("policy rules always serialize")
    }

    pub fn match_rule(&self, initiator: &AgentId) -> Option<&PolicyRule> {
        self.rules
            .iter()
            .filter(|r| r.matches(initiator))
            .max_by(|a, b| a.specificity_cmp(b))
    }

    pub fn otk_budget(&self, initiator: &AgentId) -> i64 {
        self.match_rule(initiator).map_or(BLOCKED, |r| r.budget)
    }

    pub fn decide(&self, initiator: &AgentId) -> PolicyDecision {
        match self.match_rule(initiator) {
            None => PolicyDecision::NoMatch,
            Some(r) if r.budget == BLOCKED => PolicyDecision::Blocked,
            Some(r) => PolicyDecision::Allowed(u32::try_from(r.budget).unwrap_or(u32::MAX)),
        }
    }
}

impl<'de> Deserialize<'de> for ContactPolicy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rules = Vec::<PolicyRule>::deserialize(d)?;
        Self::new(rules).map_err(serde::de::Error::custom)
    }
}

pub fn match_rule<'a>(policy: &'a ContactPolicy, initiator: &AgentId) -> Option<&'a PolicyRule> {
    policy.match_rule(initiator)
}

pub fn otk_budget(policy: &ContactPolicy, initiator: &AgentId) -> i64 {
    policy.otk_budget(initiator)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const EXAMPLE_POLICY: &str = r#"// calendar assistant: who may reach it
[
  {
    "agents": "alice@company.com:calendar_agent",
    "budget": 15
  },
  {
    "agents": "*@company.com:calendar_agent",
    "budget": 10
  },
  {
    "agents": "bob@mail.com:*",
    "budget": 100
  }
]"#;

    fn id(s: &str) -> AgentId {
        s.parse().unwrap()
    }

    #[test]
    fn example_policy_budgets() {
        let policy = ContactPolicy::from_json(EXAMPLE_POLICY).unwrap();
        let alice = id("alice@company.com:calendar_agent");
        assert_eq!(policy.match_rule(&alice).unwrap().budget, 15);
        assert_eq!(policy.otk_budget(&alice), 15);
        assert_eq!(
            policy.match_rule(&id("carol@company.com:calendar_agent")).unwrap().pattern,
            "*@company.com:calendar_agent"
        );
        assert_eq!(policy.match_rule(&id("bob@mail.com:email_agent")).unwrap().budget, 100);
        assert!(policy.match_rule(&id("eve@other.org:calendar_agent")).is_none());
        assert_eq!(policy.otk_budget(&id("eve@other.org:calendar_agent")), BLOCKED);
    }

    #[test]
    fn empty_and_blocking_policies() {
        assert_eq!(ContactPolicy::empty().otk_budget(&id("a@b.c:x")), -1);
        assert_eq!(ContactPolicy::empty().decide(&id("a@b.c:x")), PolicyDecision::NoMatch);
        let policy = ContactPolicy::new(vec![PolicyRule::new("*@evil.com:*", -1).unwrap()]).unwrap();
        assert_eq!(policy.otk_budget(&id("mal@evil.com:bot")), -1);
        assert_eq!(policy.decide(&id("mal@evil.com:bot")), PolicyDecision::Blocked);
    }

    #[test]
    fn zero_budget_is_allowed_but_empty() {
        let policy = ContactPolicy::new(vec![PolicyRule::new("*:*", 0).unwrap()]).unwrap();
        assert_eq!(policy.decide(&id("a@b.c:x")), PolicyDecision::Allowed(0));
    }

    #[test]
    fn wildcards_do_not_cross_the_separator() {
        let rule = PolicyRule::new("*@company.com:*", 1).unwrap();
        assert!(rule.matches(&id("x@company.com:y")));
        assert!(!rule.matches(&id("x@company.com.evil:y")));
        let rule = PolicyRule::new("a*:b", 1).unwrap();
        assert!(!rule.matches(&id("a@x.y:c")));
    }

    #[test]
    fn validation_errors() {
        assert!(matches!(PolicyRule::new("", 1), Err(PolicyError::InvalidPattern(_))));
        assert!(matches!(PolicyRule::new("noseparator", 1), Err(PolicyError::InvalidPattern(_))));
        assert!(matches!(PolicyRule::new("a:b:c", 1), Err(PolicyError::InvalidPattern(_))));
        assert!(matches!(PolicyRule::new("*:*", -2), Err(PolicyError::InvalidBudget { .. })));
        let dup = vec![PolicyRule::new("*:*", 1).unwrap(), PolicyRule::new("*:*", 2).unwrap()];
        assert!(matches!(ContactPolicy::new(dup), Err(PolicyError::DuplicatePattern(_))));
        assert!(ContactPolicy::from_json(r#"[{"agents": "*:*", "budget": 1}, {"agents": "*:*", "budget": 2}]"#).is_err());
        assert!(ContactPolicy::from_json("{").is_err());
    }

    #[test]
    fn agent_id_parsing() {
        let a = id("alice@company.com:calendar_agent");
        assert_eq!(a.user_id(), "alice@company.com");
        assert_eq!(a.agent_name(), "calendar_agent");
        assert_eq!(a.to_string(), "alice@company.com:calendar_agent");
        for bad in ["alice:x", "a@b@c:x", "a@b.c:", "a@b.c:x:y", "a@b.c", "@b:x", " a@b:x"] {
            assert!(bad.parse::<AgentId>().is_err(), "{bad} accepted");
        }
    }

    #[test]
    fn glob_cases() {
        assert!(glob_match("*", ""));
        assert!(glob_match("a*b*c", "axxbyyc"));
        assert!(!glob_match("a*b*c", "axxbyy"));
        assert!(glob_match("**x", "abx"));
        assert!(!glob_match("abc", "ab"));
        assert!(glob_match("*@company.com", "alice@company.com"));
    }

    fn segment() -> impl Strategy<Value = String> {
        proptest::string::string_regex("[a-c]{0,3}").unwrap()
    }

    fn pattern_side() -> impl Strategy<Value = String> {
        proptest::string::string_regex("[a-c*@.]{1,5}").unwrap()
    }

    fn policy_strategy() -> impl Strategy<Value = Vec<PolicyRule>> {
        proptest::collection::vec((pattern_side(), pattern_side(), -1i64..20), 0..8).prop_map(|raw| {
            let mut seen = std::collections::HashSet::new();
            raw.into_iter()
                .map(|(u, a, b)| PolicyRule::new(format!("{u}:{a}"), b).unwrap())
                .filter(|r| seen.insert(r.pattern.clone()))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn resolution_is_order_independent(
            rules in policy_strategy(),
            local in segment(), domain in segment(), name in segment(),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let initiator = AgentId::new(&format!("{local}x@{domain}y"), &format!("{name}z")).unwrap();
            let policy = ContactPolicy::new(rules.clone()).unwrap();
            let mut shuffled = rules;
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let shuffled = ContactPolicy::new(shuffled).unwrap();
            prop_assert_eq!(policy.match_rule(&initiator), shuffled.match_rule(&initiator));
            prop_assert!(policy.otk_budget(&initiator) >= -1);
        }

        #[test]
        fn literal_match_beats_wildcards(
            rules in policy_strategy(),
            local in segment(), domain in segment(), name in segment(),
        ) {
            let initiator = AgentId::new(&format!("{local}x@{domain}y"), &format!("{name}z")).unwrap();
            let exact = initiator.to_string();
            let mut rules: Vec<_> = rules.into_iter().filter(|r| r.pattern != exact).collect();
            rules.push(PolicyRule::new(exact.clone(), 3).unwrap());
            let policy = ContactPolicy::new(rules).unwrap();
            prop_assert_eq!(&policy.match_rule(&initiator).unwrap().pattern, &exact);
        }

        #[test]
        fn serialization_roundtrip(rules in policy_strategy()) {
            let policy = ContactPolicy::new(rules).unwrap();
            let back = ContactPolicy::from_json(&policy.to_json_pretty()).unwrap();
            prop_assert_eq!(back, policy);
        }
    }
}
