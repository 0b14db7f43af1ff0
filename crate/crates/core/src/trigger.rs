//! Rule-triggered actions with per-host sustain and cooldown.
//!
//! Each (rule, host) pair runs a small state machine once per evaluation
//! cycle:
//!
//! ```text
//! armed      --true-->  pending(1), or fire when sustain == 1
//! pending(k) --true-->  pending(k+1), or fire when k+1 == sustain
//! armed/pending --false--> armed
//! fire       -->        cooldown(now + cooldown_seconds)
//! cooldown(u) --now >= u--> armed, then this cycle's condition applies
//! ```
//!
//! Hosts that leave the rule's scope (or the index) reset to armed.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Stdio;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

use crate::index::IndexSnapshot;
use crate::model::Epoch;
use crate::query::{parse_clause, CompareOp, Expr, Path as QueryPath, Query};

/// Per-action execution limit.
pub const ACTION_TIMEOUT: Duration = Duration::from_secs(10);

/// Fired actions kept in memory for `GET /v1/triggers/fired`.
const HISTORY_LIMIT: usize = 1000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    /// Message template; `{rule}`, `{host}` and `{value}` are substituted.
    Log(String),
    /// Shell command run with TRIGGER_RULE, TRIGGER_HOST and TRIGGER_VALUE set.
    Exec(String),
    /// URL receiving the fired action as JSON.
    Webhook(String),
}

fn enabled_default() -> bool {
    true
}

/// Rule as written in a rules file or sent over HTTP.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleSpec {
    pub id: String,
    /// Query selecting the watched hosts; empty watches every host.
    #[serde(default)]
    pub scope: String,
    /// One `path op literal` clause.
    pub condition: String,
    pub sustain_samples: u32,
    #[serde(default)]
    pub cooldown_seconds: u64,
    pub action: Action,
    #[serde(default = "enabled_default")]
    pub enabled: bool,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TriggerError {
    #[error("rule {rule}: {reason}")]
    ValidationError { rule: String, reason: String },
    #[error("rule {0} already exists")]
    DuplicateRule(String),
    #[error("unknown rule {0}")]
    UnknownRule(String),
}

/// A validated rule.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerRule {
    pub spec: RuleSpec,
    scope: Query,
    condition: Expr,
}

impl TriggerRule {
    pub fn new(spec: RuleSpec) -> Result<Self, TriggerError> {
        let invalid = |reason: String| TriggerError::ValidationError {
            rule: spec.id.clone(),
            reason,
        };
        if spec.id.is_empty() {
            return Err(invalid("empty id".into()));
        }
        if spec.sustain_samples == 0 {
            return Err(invalid("sustain_samples must be at least 1".into()));
        }
        let scope = Query::parse(&spec.scope).map_err(|e| invalid(format!("scope: {e}")))?;
        let condition =
            parse_clause(&spec.condition).map_err(|e| invalid(format!("condition: {e}")))?;
        match &spec.action {
            Action::Exec(c) if c.trim().is_empty() => {
                return Err(invalid("empty exec command".into()))
            }
            Action::Webhook(u) if !(u.starts_with("http://") || u.starts_with("https://")) => {
                return Err(invalid(format!("webhook URL must be http(s): {u}")))
            }
            _ => {}
        }
        Ok(TriggerRule {
            spec,
            scope,
            condition,
        })
    }

    pub fn id(&self) -> &str {
        &self.spec.id
    }

    pub fn enabled(&self) -> bool {
        self.spec.enabled
    }

    fn condition_parts(&self) -> (&QueryPath, CompareOp) {
        match &self.condition {
            Expr::Compare { path, op, .. } => (path, *op),
            _ => unreachable!("validated as a single clause"),
        }
    }
}

impl Serialize for TriggerRule {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.spec.serialize(s)
    }
}

/// Parses and validates a rules file (JSON array of rules).
pub fn load_rules(bytes: &[u8]) -> Result<Vec<TriggerRule>, TriggerError> {
    let raw: Vec<serde_json::Value> =
        serde_json::from_slice(bytes).map_err(|e| TriggerError::ValidationError {
            rule: String::new(),
            reason: e.to_string(),
        })?;
    let mut rules: Vec<TriggerRule> = Vec::new();
    for (i, v) in raw.into_iter().enumerate() {
        let id = v
            .get("id")
            .and_then(|x| x.as_str())
            .map(str::to_owned)
            .unwrap_or_else(|| format!("#{i}"));
        let spec: RuleSpec =
            serde_json::from_value(v).map_err(|e| TriggerError::ValidationError {
                rule: id.clone(),
                reason: e.to_string(),
            })?;
        let rule = TriggerRule::new(spec)?;
        if rules.iter().any(|r| r.id() == rule.id()) {
            return Err(TriggerError::DuplicateRule(rule.id().to_owned()));
        }
        rules.push(rule);
    }
    Ok(rules)
}

// ---------------------------------------------------------------------------
// State machine

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "phase", rename_all = "snake_case")]
pub enum Phase {
    Armed,
    Pending { count: u32 },
    Cooldown { until: Epoch },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RuleHostState {
    pub phase: Phase,
    pub last_fired_at: Option<Epoch>,
}

impl Default for RuleHostState {
    fn default() -> Self {
        RuleHostState {
            phase: Phase::Armed,
            last_fired_at: None,
        }
    }
}

/// (rule id, host id) -> state. Absent entries are armed.
pub type RuleStates = BTreeMap<(String, String), RuleHostState>;

/// A rule crossing its sustain threshold on one host.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Firing {
    pub rule: String,
    pub host: String,
    pub fired_at: Epoch,
    /// Lexical form of the value that satisfied the condition.
    pub value: String,
    #[serde(skip)]
    pub action: Action,
}

/// Advances every enabled rule over every in-scope host of `snapshot`.
pub fn evaluate_cycle(
    rules: &[TriggerRule],
    snapshot: &IndexSnapshot,
    states: &mut RuleStates,
    now: Epoch,
) -> Vec<Firing> {
    states.retain(|(rule, _), _| rules.iter().any(|r| r.id() == rule));
    let mut fired = Vec::new();
    for rule in rules.iter().filter(|r| r.enabled()) {
        let in_scope: Vec<_> = snapshot
            .hosts()
            .filter(|h| h.is_live(now) && rule.scope.matches(h, now))
            .collect();
        states.retain(|(r, host), _| r != rule.id() || in_scope.iter().any(|h| &h.host_id == host));

        let (path, _) = rule.condition_parts();
        for host in in_scope {
            let key = (rule.id().to_owned(), host.host_id.clone());
            let mut state = states.get(&key).copied().unwrap_or_default();
            if let Phase::Cooldown { until } = state.phase {
                if now < until {
                    continue;
                }
                state.phase = Phase::Armed;
            }
            let holds = rule.condition.matches(host, now);
            let count = match (holds, state.phase) {
                (false, _) => None,
                (true, Phase::Pending { count }) => Some(count + 1),
                (true, _) => Some(1),
            };
            state.phase = match count {
                None => Phase::Armed,
                Some(k) if k >= rule.spec.sustain_samples => {
                    fired.push(Firing {
                        rule: rule.id().to_owned(),
                        host: host.host_id.clone(),
                        fired_at: now,
                        value: path
                            .resolve(host, now)
                            .map(|v| v.lexical())
                            .unwrap_or_default(),
                        action: rule.spec.action.clone(),
                    });
                    state.last_fired_at = Some(now);
                    if rule.spec.cooldown_seconds == 0 {
                        Phase::Armed
                    } else {
                        Phase::Cooldown {
                            until: now + rule.spec.cooldown_seconds,
                        }
                    }
                }
                Some(k) => Phase::Pending { count: k },
            };
            if state == RuleHostState::default() {
                states.remove(&key);
            } else {
                states.insert(key, state);
            }
        }
    }
    fired
}

// ---------------------------------------------------------------------------
// Actions

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum ActionOutcome {
    Logged,
    ExecOk,
    ExecFailed {
        code: i32,
    },
    WebhookOk,
    /// `status` is absent when no HTTP response arrived.
    WebhookFailed {
        status: Option<u16>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FiredAction {
    pub rule: String,
    pub host: String,
    pub fired_at: Epoch,
    pub value: String,
    pub outcome: ActionOutcome,
    /// The rendered line for log actions.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

pub fn render_log_message(template: &str, firing: &Firing) -> String {
    template
        .replace("{rule}", &firing.rule)
        .replace("{host}", &firing.host)
        .replace("{value}", &firing.value)
}

/// Runs the action for `firing`; failures only show up in the outcome.
pub async fn execute_action(firing: &Firing, client: &reqwest::Client) -> FiredAction {
    let (outcome, message) = match &firing.action {
        Action::Log(template) => {
            let line = render_log_message(template, firing);
            info!(rule = %firing.rule, host = %firing.host, "{line}");
            (ActionOutcome::Logged, Some(line))
        }
        Action::Exec(command) => (run_exec_action(command, firing).await, None),
        Action::Webhook(url) => (post_webhook(url, firing, client).await, None),
    };
    FiredAction {
        rule: firing.rule.clone(),
        host: firing.host.clone(),
        fired_at: firing.fired_at,
        value: firing.value.clone(),
        outcome,
        message,
    }
}

async fn run_exec_action(command: &str, firing: &Firing) -> ActionOutcome {
    let child = tokio::process::Command::new("sh")
        .arg("-c")
        .arg(command)
        .env("TRIGGER_RULE", &firing.rule)
        .env("TRIGGER_HOST", &firing.host)
        .env("TRIGGER_VALUE", &firing.value)
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .kill_on_drop(true)
        .spawn();
    let mut child = match child {
        Ok(c) => c,
        Err(e) => {
            warn!(error = %e, "cannot spawn trigger command");
            return ActionOutcome::ExecFailed { code: -1 };
        }
    };
    match tokio::time::timeout(ACTION_TIMEOUT, child.wait()).await {
        Ok(Ok(status)) if status.success() => ActionOutcome::ExecOk,
        Ok(Ok(status)) => ActionOutcome::ExecFailed {
            code: status.code().unwrap_or(-1),
        },
        Ok(Err(_)) | Err(_) => ActionOutcome::ExecFailed { code: -1 },
    }
}

async fn post_webhook(url: &str, firing: &Firing, client: &reqwest::Client) -> ActionOutcome {
    let send = client.post(url).json(firing).timeout(ACTION_TIMEOUT).send();
    match send.await {
        Ok(resp) if resp.status().is_success() => ActionOutcome::WebhookOk,
        Ok(resp) => ActionOutcome::WebhookFailed {
            status: Some(resp.status().as_u16()),
        },
        Err(e) => {
            warn!(%url, error = %e, "webhook failed");
            ActionOutcome::WebhookFailed { status: None }
        }
    }
}

// ---------------------------------------------------------------------------
// Rule store and service

/// Rule set shared between the HTTP CRUD surface and the evaluation loop.
/// The loop copies the rules at the start of each cycle, so edits apply from
/// the next cycle.
#[derive(Default)]
pub struct TriggerStore {
    rules: Mutex<Vec<TriggerRule>>,
}

impl TriggerStore {
    pub fn new(rules: Vec<TriggerRule>) -> Self {
        TriggerStore {
            rules: Mutex::new(rules),
        }
    }

    fn lock(&self) -> MutexGuard<'_, Vec<TriggerRule>> {
        self.rules.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn list(&self) -> Vec<TriggerRule> {
        self.lock().clone()
    }

    pub fn get(&self, id: &str) -> Option<TriggerRule> {
        self.lock().iter().find(|r| r.id() == id).cloned()
    }

    pub fn add(&self, spec: RuleSpec) -> Result<TriggerRule, TriggerError> {
        let rule = TriggerRule::new(spec)?;
        let mut rules = self.lock();
        if rules.iter().any(|r| r.id() == rule.id()) {
            return Err(TriggerError::DuplicateRule(rule.id().to_owned()));
        }
        rules.push(rule.clone());
        Ok(rule)
    }

    pub fn delete(&self, id: &str) -> Result<TriggerRule, TriggerError> {
        let mut rules = self.lock();
        let pos = rules
            .iter()
            .position(|r| r.id() == id)
            .ok_or_else(|| TriggerError::UnknownRule(id.to_owned()))?;
        Ok(rules.remove(pos))
    }

    pub fn set_enabled(&self, id: &str, enabled: bool) -> Result<TriggerRule, TriggerError> {
        let mut rules = self.lock();
        let rule = rules
            .iter_mut()
            .find(|r| r.id() == id)
            .ok_or_else(|| TriggerError::UnknownRule(id.to_owned()))?;
        rule.spec.enabled = enabled;
        Ok(rule.clone())
    }
}

/// Owns rule state and runs evaluation cycles.
pub struct TriggerService {
    store: Arc<TriggerStore>,
    states: tokio::sync::Mutex<RuleStates>,
    log_path: Option<PathBuf>,
    client: reqwest::Client,
    history: Mutex<VecDeque<FiredAction>>,
}

impl TriggerService {
    pub fn new(store: Arc<TriggerStore>, log_path: Option<PathBuf>) -> Self {
        TriggerService {
            store,
            states: tokio::sync::Mutex::new(RuleStates::new()),
            log_path,
            client: reqwest::Client::new(),
            history: Mutex::new(VecDeque::new()),
        }
    }

    pub fn store(&self) -> &Arc<TriggerStore> {
        &self.store
    }

    /// One evaluation cycle: advance state, run the fired actions
    /// concurrently, append them to the trigger log.
    pub async fn run_cycle(&self, snapshot: &IndexSnapshot, now: Epoch) -> Vec<FiredAction> {
        let rules = self.store.list();
        let firings = {
            let mut states = self.states.lock().await;
            evaluate_cycle(&rules, snapshot, &mut states, now)
        };
        let fired =
            futures::future::join_all(firings.iter().map(|f| execute_action(f, &self.client)))
                .await;
        if let Some(path) = &self.log_path {
            if let Err(e) = append_log(path, &fired) {
                warn!(path = %path.display(), error = %e, "cannot write trigger log");
            }
        }
        let mut history = self.history.lock().unwrap_or_else(|e| e.into_inner());
        for f in &fired {
            history.push_back(f.clone());
            if history.len() > HISTORY_LIMIT {
                history.pop_front();
            }
        }
        fired
    }

    pub fn recent(&self) -> Vec<FiredAction> {
        self.history
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .iter()
            .cloned()
            .collect()
    }

    pub async fn states(&self) -> RuleStates {
        self.states.lock().await.clone()
    }
}

fn append_log(path: &Path, fired: &[FiredAction]) -> std::io::Result<()> {
    if fired.is_empty() {
        return Ok(());
    }
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    let mut buf = Vec::new();
    for f in fired {
        serde_json::to_writer(&mut buf, f)?;
        buf.push(b'\n');
    }
    file.write_all(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::Index;
    use crate::model::{ClusterView, HostRecord, MetricKind, MetricSample, Value};

    fn rule(condition: &str, sustain: u32, cooldown: u64) -> TriggerRule {
        TriggerRule::new(RuleSpec {
            id: "high-load".into(),
            scope: String::new(),
            condition: condition.into(),
            sustain_samples: sustain,
            cooldown_seconds: cooldown,
            action: Action::Log("high load on {host}".into()),
            enabled: true,
        })
        .unwrap()
    }

    fn snapshot_with_load(host: &str, load: f64, t: Epoch) -> Arc<IndexSnapshot> {
        let idx = Index::new();
        let view = ClusterView::new("lab", t).with_host(
            HostRecord::new(host, "lab", "1", t).with_sample(
                MetricSample::new(
                    "load.one",
                    Value::Float(load),
                    "",
                    MetricKind::Dynamic,
                    t,
                    30,
                )
                .unwrap(),
            ),
        );
        idx.ingest(&view, t);
        idx.snapshot()
    }

    fn run_trace(r: &TriggerRule, trace: &[f64]) -> Vec<usize> {
        let mut states = RuleStates::new();
        let mut cycles = Vec::new();
        for (i, v) in trace.iter().enumerate() {
            let t = 1000 + 10 * i as Epoch;
            let fired = evaluate_cycle(
                std::slice::from_ref(r),
                &snapshot_with_load("hostA", *v, t),
                &mut states,
                t,
            );
            cycles.extend(std::iter::repeat_n(i + 1, fired.len()));
        }
        cycles
    }

    #[test]
    fn fires_at_third_cycle() {
        assert_eq!(
            run_trace(&rule("load.one > 0.9", 2, 0), &[0.5, 0.95, 0.97]),
            vec![3]
        );
    }

    #[test]
    fn never_true_never_fires() {
        assert!(run_trace(&rule("load.one > 0.9", 1, 0), &[0.1, 0.2, 0.3, 0.9]).is_empty());
    }

    #[test]
    fn cooldown_suppresses_refire() {
        assert_eq!(
            run_trace(&rule("load.one > 0.9", 2, 3600), &[0.95, 0.97, 0.99, 0.99]),
            vec![2]
        );
    }

    #[test]
    fn zero_cooldown_rearms_immediately() {
        assert_eq!(
            run_trace(&rule("load.one > 0.9", 1, 0), &[0.95, 0.97, 0.5, 0.99]),
            vec![1, 2, 4]
        );
    }

    #[test]
    fn disabled_rule_does_nothing() {
        let mut r = rule("load.one > 0.9", 1, 0);
        r.spec.enabled = false;
        assert!(run_trace(&r, &[0.95, 0.97]).is_empty());
    }

    #[test]
    fn absent_host_resets_to_armed() {
        let r = rule("load.one > 0.9", 2, 0);
        let mut states = RuleStates::new();
        evaluate_cycle(
            std::slice::from_ref(&r),
            &snapshot_with_load("a", 0.95, 100),
            &mut states,
            100,
        );
        assert_eq!(states.len(), 1);
        evaluate_cycle(
            std::slice::from_ref(&r),
            &snapshot_with_load("b", 0.1, 110),
            &mut states,
            110,
        );
        assert!(states.is_empty());
    }

    #[test]
    fn fired_value_is_condition_value() {
        let r = rule("load.one > 0.9", 1, 0);
        let mut states = RuleStates::new();
        let fired = evaluate_cycle(
            std::slice::from_ref(&r),
            &snapshot_with_load("a", 0.95, 100),
            &mut states,
            100,
        );
        assert_eq!(fired[0].value, "0.95");
        assert_eq!(fired[0].host, "a");
    }

    #[test]
    fn validation_names_the_rule() {
        let spec = RuleSpec {
            id: "broken".into(),
            scope: String::new(),
            condition: "cpu.count >".into(),
            sustain_samples: 1,
            cooldown_seconds: 0,
            action: Action::Log("x".into()),
            enabled: true,
        };
        match TriggerRule::new(spec.clone()) {
            Err(TriggerError::ValidationError { rule, .. }) => assert_eq!(rule, "broken"),
            other => panic!("{other:?}"),
        }
        let mut s = spec.clone();
        s.condition = "a == 1 and b == 2".into();
        assert!(TriggerRule::new(s).is_err());
        let mut s = spec;
        s.condition = "a == 1".into();
        s.sustain_samples = 0;
        assert!(TriggerRule::new(s).is_err());
    }

    #[test]
    fn load_rules_file() {
        let rules = load_rules(
            br#"[{"id":"r1","condition":"load.one > 0.9","sustain_samples":2,"cooldown_seconds":60,"action":{"log":"high load on {host}"}}]"#,
        )
        .unwrap();
        assert_eq!(rules.len(), 1);
        assert!(rules[0].enabled());
        let err = load_rules(
            br#"[{"id":"r1","condition":"cpu.count >","sustain_samples":1,"action":{"log":"x"}}]"#,
        )
        .unwrap_err();
        assert!(matches!(err, TriggerError::ValidationError { ref rule, .. } if rule == "r1"));
        let dup = br#"[{"id":"r","condition":"a == 1","sustain_samples":1,"action":{"log":"x"}},{"id":"r","condition":"a == 1","sustain_samples":1,"action":{"log":"x"}}]"#;
        assert_eq!(
            load_rules(dup).unwrap_err(),
            TriggerError::DuplicateRule("r".into())
        );
    }

    #[test]
    fn log_template_substitution() {
        let f = Firing {
            rule: "r".into(),
            host: "hostA".into(),
            fired_at: 1,
            value: "0.97".into(),
            action: Action::Log(String::new()),
        };
        assert_eq!(
            render_log_message("high load on {host}", &f),
            "high load on hostA"
        );
        assert_eq!(render_log_message("{rule}:{value}", &f), "r:0.97");
    }

    #[tokio::test]
    async fn exec_outcomes() {
        let client = reqwest::Client::new();
        let mut f = Firing {
            rule: "r".into(),
            host: "h".into(),
            fired_at: 1,
            value: "1".into(),
            action: Action::Exec("/bin/false".into()),
        };
        assert_eq!(
            execute_action(&f, &client).await.outcome,
            ActionOutcome::ExecFailed { code: 1 }
        );
        f.action = Action::Exec(
            r#"test "$TRIGGER_HOST" = h && test "$TRIGGER_RULE" = r && test "$TRIGGER_VALUE" = 1"#
                .into(),
        );
        assert_eq!(
            execute_action(&f, &client).await.outcome,
            ActionOutcome::ExecOk
        );
    }

    #[test]
    fn store_crud() {
        let store = TriggerStore::default();
        let spec = rule("load.one > 0.9", 1, 0).spec;
        store.add(spec.clone()).unwrap();
        assert_eq!(
            store.add(spec).unwrap_err(),
            TriggerError::DuplicateRule("high-load".into())
        );
        assert!(!store.set_enabled("high-load", false).unwrap().enabled());
        store.delete("high-load").unwrap();
        assert!(store.list().is_empty());
        assert!(store.delete("high-load").is_err());
    }
}
