//! Line-oriented scenario scripts and the command executor shared with the
//! HTTP service.
//!
//! Each non-blank line is `command [json-object]`; `#` starts a comment
//! line. Arguments default to `{}`. A command that fails must be followed
//! by an `expect` line naming the failure, otherwise the run stops with
//! `CommandFailed`. Tenant invariants are checked after every command.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::clock::{Millis, SimClock, MINUTE};
use crate::identity::AuthToken;
use crate::iwm::{Objective, WorkloadRequest};
use crate::monitor::Severity;
use crate::orchestrator::{
    FaasError, FederationConfig, JoinRequest, MemberStatus, Orchestrator, PublishRequest, Sfac, TenantRequest,
};
use crate::policy::pap::AdminPolicy;
use crate::registry::ChainStatus;
use crate::simcloud::{CloudSpec, Fabric, SimCloud};

/// Who issues a command: a session name bound by `login` or `join`, or a
/// token passed through verbatim.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Who {
    Token(AuthToken),
    Name(String),
}

fn one() -> u64 {
    1
}

fn use_action() -> String {
    crate::iwm::USE_ACTION.to_string()
}

fn min_cost() -> Objective {
    Objective::MinCost
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", content = "args", rename_all = "kebab-case")]
pub enum Command {
    Seed {
        value: u64,
    },
    Cloud(CloudSpec),
    CreateFederation(Sfac),
    Login {
        #[serde(rename = "as")]
        name: String,
        cloud: String,
        user: String,
        secret: String,
    },
    Join {
        #[serde(flatten)]
        request: JoinRequest,
        /// Binds the joining administrator's session to this name.
        #[serde(rename = "as", default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
    },
    CreateTenant {
        #[serde(rename = "as")]
        who: Who,
        #[serde(flatten)]
        tenant: TenantRequest,
    },
    Publish {
        #[serde(rename = "as")]
        who: Who,
        #[serde(flatten)]
        request: PublishRequest,
    },
    AdminPolicy {
        #[serde(rename = "as")]
        who: Who,
        #[serde(flatten)]
        policy: AdminPolicy,
    },
    AmendPolicy {
        #[serde(rename = "as")]
        who: Who,
        service_id: String,
        policies: Value,
    },
    Leave {
        #[serde(rename = "as")]
        who: Who,
        cloud: String,
    },
    Request {
        #[serde(rename = "as")]
        who: Who,
        demand: u64,
        #[serde(default = "min_cost")]
        objective: Objective,
        #[serde(default)]
        required: BTreeMap<String, String>,
    },
    Select {
        #[serde(rename = "as")]
        who: Who,
        service_id: String,
    },
    Use {
        #[serde(rename = "as")]
        who: Who,
        service_id: String,
        #[serde(default = "use_action")]
        action: String,
    },
    Sla {
        service_id: String,
        metric: String,
        value: f64,
    },
    AdvanceClock {
        #[serde(default)]
        ms: Millis,
        #[serde(default)]
        minutes: u64,
    },
    Scan {},
    Audit {
        #[serde(default)]
        train_until: Option<Millis>,
    },
    Revalidate {},
    InjectFault {
        endpoint: String,
        op: String,
        #[serde(default = "one")]
        ordinal: u64,
        #[serde(default = "one")]
        count: u64,
    },
    Terminate {
        #[serde(rename = "as")]
        who: Who,
    },
    Expect(Expectation),
}

impl Command {
    pub fn name(&self) -> String {
        match serde_json::to_value(self) {
            Ok(Value::Object(m)) => m.get("command").and_then(Value::as_str).unwrap_or("?").to_string(),
            _ => "?".into(),
        }
    }

    /// Parses `name {json}`.
    pub fn parse(line: &str) -> Result<Self, String> {
        let line = line.trim();
        let (name, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
        let args: Value = if rest.trim().is_empty() {
            json!({})
        } else {
            serde_json::from_str(rest.trim()).map_err(|e| format!("arguments of {name}: {e}"))?
        };
        serde_json::from_value(json!({"command": name, "args": args})).map_err(|e| format!("{name}: {e}"))
    }
}

/// Checks against the previous command's outcome and the federation state.
/// Every field is optional; all present fields must hold.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expectation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ok: Option<bool>,
    /// Error code of the previous command.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Member cloud id to status.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<BTreeMap<String, MemberStatus>>,
    /// Number of active members.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub member_count: Option<usize>,
    /// Ranked service ids returned by the previous `request`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offers: Option<Vec<String>>,
    /// Result document of the previous `use`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    /// Some alert of this severity has been raised.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alert: Option<Severity>,
    /// Number of findings reported by the previous `audit`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub findings: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chain_valid: Option<bool>,
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("no federation has been created")]
    NoFederation,
    #[error("a federation already exists")]
    FederationExists,
    #[error("unknown session name {0}")]
    UnknownLogin(String),
    #[error("{0} is not a command")]
    NotACommand(&'static str),
    #[error(transparent)]
    Faas(#[from] FaasError),
}

impl SessionError {
    pub fn code(&self) -> &'static str {
        match self {
            SessionError::NoFederation => "NoFederation",
            SessionError::FederationExists => "FederationExists",
            SessionError::UnknownLogin(_) => "UnknownLogin",
            SessionError::NotACommand(_) => "NotACommand",
            SessionError::Faas(e) => e.code(),
        }
    }
}

fn out<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("outputs serialize")
}

/// A federation context plus the named logins of its users.
pub struct Session {
    seed: u64,
    clock: SimClock,
    ledger_path: Option<PathBuf>,
    pending: Vec<SimCloud>,
    orchestrator: Option<Arc<Orchestrator>>,
    logins: BTreeMap<String, AuthToken>,
}

impl Session {
    pub fn new(seed: u64, ledger_path: Option<PathBuf>) -> Self {
        Self {
            seed,
            clock: SimClock::new(0),
            ledger_path,
            pending: Vec::new(),
            orchestrator: None,
            logins: BTreeMap::new(),
        }
    }

    pub fn orchestrator(&self) -> Option<&Arc<Orchestrator>> {
        self.orchestrator.as_ref()
    }

    pub fn clock(&self) -> &SimClock {
        &self.clock
    }

    fn orch(&self) -> Result<&Arc<Orchestrator>, SessionError> {
        self.orchestrator.as_ref().ok_or(SessionError::NoFederation)
    }

    fn token(&self, who: &Who) -> Result<AuthToken, SessionError> {
        match who {
            Who::Token(t) => Ok(t.clone()),
            Who::Name(n) => self.logins.get(n).cloned().ok_or_else(|| SessionError::UnknownLogin(n.clone())),
        }
    }

    /// Runs one command. `expect` is handled by the runner.
    pub fn execute(&mut self, cmd: &Command) -> Result<Value, SessionError> {
        match cmd {
            Command::Seed { value } => {
                if self.orchestrator.is_some() {
                    return Err(SessionError::FederationExists);
                }
                self.seed = *value;
                Ok(json!({"seed": value}))
            }
            Command::Cloud(spec) => {
                let cloud = spec.build(self.seed);
                match &self.orchestrator {
                    Some(o) => o.with_fabric(|f| f.add_cloud(cloud)),
                    None => self.pending.push(cloud),
                }
                Ok(json!({"cloud": spec.id}))
            }
            Command::CreateFederation(sfac) => {
                if self.orchestrator.is_some() {
                    return Err(SessionError::FederationExists);
                }
                let mut fabric = Fabric::new();
                for c in &self.pending {
                    fabric.add_cloud(c.clone());
                }
                let config = FederationConfig {
                    seed: self.seed,
                    clock: self.clock.clone(),
                    ledger_path: self.ledger_path.clone(),
                };
                let o = Orchestrator::create_federation(fabric, sfac.clone(), config)?;
                self.pending.clear();
                let contract = o.state().contract;
                self.orchestrator = Some(Arc::new(o));
                Ok(json!({"federation_id": sfac.federation_id, "contract": contract}))
            }
            Command::Login {
                name,
                cloud,
                user,
                secret,
            } => {
                let token = self.orch()?.login(cloud, user, secret)?;
                self.logins.insert(name.clone(), token.clone());
                Ok(json!({"principal": token.principal_id, "token": token}))
            }
            Command::Join { request, name } => {
                let receipt = self.orch()?.join(request)?;
                if let Some(n) = name {
                    self.logins.insert(n.clone(), receipt.token.clone());
                }
                Ok(out(&receipt))
            }
            Command::CreateTenant { who, tenant } => {
                let t = self.token(who)?;
                Ok(out(&self.orch()?.create_tenant(&t, tenant)?))
            }
            Command::Publish { who, request } => {
                let t = self.token(who)?;
                Ok(out(&self.orch()?.publish(&t, request)?))
            }
            Command::AdminPolicy { who, policy } => {
                let t = self.token(who)?;
                Ok(json!({"block": self.orch()?.set_admin_policy(&t, policy)?}))
            }
            Command::AmendPolicy { who, service_id, policies } => {
                let t = self.token(who)?;
                Ok(json!({"block": self.orch()?.amend_policy(&t, service_id, policies)?}))
            }
            Command::Leave { who, cloud } => {
                let t = self.token(who)?;
                Ok(out(&self.orch()?.leave(&t, cloud)?))
            }
            Command::Request {
                who,
                demand,
                objective,
                required,
            } => {
                let t = self.token(who)?;
                let request = WorkloadRequest {
                    consumer: t.principal_id.clone(),
                    required: required.clone(),
                    demand: *demand,
                    objective: *objective,
                };
                Ok(out(&self.orch()?.request_service(&t, &request)?))
            }
            Command::Select { who, service_id } => {
                let t = self.token(who)?;
                Ok(out(&self.orch()?.select(&t, service_id)?))
            }
            Command::Use {
                who,
                service_id,
                action,
            } => {
                let t = self.token(who)?;
                Ok(out(&self.orch()?.use_service(&t, service_id, action)?))
            }
            Command::Sla {
                service_id,
                metric,
                value,
            } => Ok(json!({"block": self.orch()?.sla_ingest(service_id, metric, *value)?})),
            Command::AdvanceClock { ms, minutes } => {
                self.clock.advance(ms + minutes * MINUTE);
                Ok(json!({"now": self.clock.now()}))
            }
            Command::Scan {} => Ok(out(&self.orch()?.forced_leave_scan())),
            Command::Audit { train_until } => {
                let (report, raised) = self.orch()?.audit(*train_until)?;
                Ok(json!({
                    "transactions": report.transactions,
                    "roles": report.roles.len(),
                    "findings": report.findings,
                    "raised": raised,
                }))
            }
            Command::Revalidate {} => Ok(json!({"mismatches": self.orch()?.revalidate()?})),
            Command::InjectFault {
                endpoint,
                op,
                ordinal,
                count,
            } => {
                let fault = |f: &mut Fabric| f.inject_fault(endpoint, op, *ordinal, *count);
                match &self.orchestrator {
                    Some(o) => o.with_fabric(fault),
                    // Before creation the fault is not observable; refuse it.
                    None => return Err(SessionError::NoFederation),
                }
                Ok(json!({"endpoint": endpoint, "op": op, "ordinal": ordinal, "count": count}))
            }
            Command::Terminate { who } => {
                let t = self.token(who)?;
                Ok(json!({"block": self.orch()?.terminate(&t)?}))
            }
            Command::Expect(_) => Err(SessionError::NotACommand("expect")),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ScenarioError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: assertion failed: {message}")]
    AssertionFailed { line: usize, message: String },
    #[error("line {line}: {code}: {message}")]
    CommandFailed { line: usize, code: String, message: String },
    #[error("line {line}: invariant broken: {message}")]
    InvariantBroken { line: usize, message: String },
}

impl ScenarioError {
    pub fn line(&self) -> usize {
        match self {
            ScenarioError::Parse { line, .. }
            | ScenarioError::AssertionFailed { line, .. }
            | ScenarioError::CommandFailed { line, .. }
            | ScenarioError::InvariantBroken { line, .. } => *line,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub line: usize,
    pub command: String,
    pub ok: bool,
    /// Command output, or `{"error": code, "message": ...}`.
    pub output: Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub steps: Vec<Step>,
    /// Hex hash of the last ledger block.
    pub ledger_tip: Option<String>,
    pub records: usize,
}

/// Parses a whole script; `(line number, command)` pairs, 1-based.
pub fn parse_scenario(text: &str) -> Result<Vec<(usize, Command)>, ScenarioError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cmd = Command::parse(line).map_err(|message| ScenarioError::Parse { line: i + 1, message })?;
        out.push((i + 1, cmd));
    }
    Ok(out)
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub seed: u64,
    pub ledger_path: Option<PathBuf>,
}

/// Executes a script against a fresh federation context.
pub fn run_scenario(text: &str, options: &RunOptions) -> Result<ScenarioReport, ScenarioError> {
    let commands = parse_scenario(text)?;
    let mut session = Session::new(options.seed, options.ledger_path.clone());
    run_commands(&mut session, &commands)
}

pub fn run_commands(session: &mut Session, commands: &[(usize, Command)]) -> Result<ScenarioReport, ScenarioError> {
    let mut steps: Vec<Step> = Vec::new();
    // Set while a failed command awaits its `expect`.
    let mut unchecked: Option<(usize, String, String)> = None;
    for (line, cmd) in commands {
        let line = *line;
        if let Command::Expect(e) = cmd {
            let last = steps.last().ok_or(ScenarioError::AssertionFailed {
                line,
                message: "nothing to check yet".into(),
            })?;
            check(session, e, last).map_err(|message| ScenarioError::AssertionFailed { line, message })?;
            unchecked = None;
            continue;
        }
        if let Some((l, code, message)) = unchecked.take() {
            return Err(ScenarioError::CommandFailed { line: l, code, message });
        }
        let step = match session.execute(cmd) {
            Ok(output) => Step {
                line,
                command: cmd.name(),
                ok: true,
                output,
            },
            Err(e) => {
                unchecked = Some((line, e.code().to_string(), e.to_string()));
                Step {
                    line,
                    command: cmd.name(),
                    ok: false,
                    output: json!({"error": e.code(), "message": e.to_string()}),
                }
            }
        };
        steps.push(step);
        if let Some(o) = session.orchestrator() {
            o.check_invariants()
                .map_err(|message| ScenarioError::InvariantBroken { line, message })?;
        }
    }
    if let Some((line, code, message)) = unchecked {
        return Err(ScenarioError::CommandFailed { line, code, message });
    }
    let (ledger_tip, records) = match session.orchestrator() {
        Some(o) => (
            o.registry().tip().map(|d| d.to_hex()),
            o.registry().record_count(),
        ),
        None => (None, 0),
    };
    Ok(ScenarioReport {
        steps,
        ledger_tip,
        records,
    })
}

fn check(session: &Session, e: &Expectation, last: &Step) -> Result<(), String> {
    if let Some(ok) = e.ok {
        if last.ok != ok {
            return Err(format!("expected ok={ok}, got {}", last.output));
        }
    }
    if let Some(code) = &e.error {
        let got = last.output.get("error").and_then(Value::as_str);
        if last.ok || got != Some(code.as_str()) {
            return Err(format!("expected error {code}, got {}", last.output));
        }
    }
    if let Some(ids) = &e.offers {
        let got: Vec<&str> = last
            .output
            .get("offers")
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(|o| o.get("service_id").and_then(Value::as_str)).collect())
            .unwrap_or_default();
        if got != ids.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(format!("expected offers {ids:?}, got {got:?}"));
        }
    }
    if let Some(result) = &e.result {
        let got = last.output.get("result");
        if got != Some(result) {
            return Err(format!("expected result {result}, got {}", got.unwrap_or(&Value::Null)));
        }
    }
    if let Some(n) = e.findings {
        let got = last.output.get("findings").and_then(Value::as_array).map(Vec::len);
        if got != Some(n) {
            return Err(format!("expected {n} findings, got {got:?}"));
        }
    }
    let needs_federation =
        e.status.is_some() || e.member_count.is_some() || e.alert.is_some() || e.chain_valid.is_some();
    if !needs_federation {
        return Ok(());
    }
    let o = session.orchestrator().ok_or("no federation to inspect")?;
    let state = o.state();
    if let Some(expected) = &e.status {
        for (cloud, status) in expected {
            let got = state.members.get(cloud).map(|m| m.status);
            if got != Some(*status) {
                return Err(format!("expected {cloud} {status:?}, got {got:?}"));
            }
        }
    }
    if let Some(n) = e.member_count {
        let got = state.active_members().len();
        if got != n {
            return Err(format!("expected {n} active members, got {got}"));
        }
    }
    if let Some(sev) = e.alert {
        let alerts = o.alert_feed(0).map_err(|e| e.to_string())?;
        if !alerts.iter().any(|a| a.severity == sev) {
            return Err(format!("no {sev:?} alert among {}", alerts.len()));
        }
    }
    if let Some(valid) = e.chain_valid {
        let got = o.verify_ledger() == ChainStatus::Valid;
        if got != valid {
            return Err(format!("expected chain_valid={valid}, got {got}"));
        }
    }
    Ok(())
}
