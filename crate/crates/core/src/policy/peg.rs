//! Enforcement gateway and its helpers: the repository point reading
//! policies from the registry, the information point resolving environment
//! attributes, and the DTS dispatcher that runs obligations.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{pdp_decide, AccessRequest, Decision, DtsInvocation, Outcome, Phase, Policy, PolicyError};
use crate::anonymization::{Anonymizer, Dataset, DpOutcome, GeneralizationHierarchy, KAnonConfig};
use crate::clock::{Millis, SimClock};
use crate::identity::{AuthToken, CryptoToken, IdentityManager};
use crate::masking::MaskingService;
use crate::registry::{RecordKind, Registry};

pub type DecisionFn = Arc<dyn Fn(&AccessRequest, &[Policy]) -> Result<Decision, PolicyError> + Send + Sync>;

/// What happened after the decision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EnforcementStatus {
    /// Usage permitted and the transformed result handed back.
    Delivered,
    /// Request-phase permit; nothing was invoked.
    Authorized,
    Denied,
    AuthFailed,
    ProviderFailed,
    ObligationFailed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccessEvent {
    pub request: AccessRequest,
    pub decision: Decision,
    pub enforcing_component: String,
    pub timestamp: Millis,
    pub status: EnforcementStatus,
}

/// Receives one event per enforcement; returns the ledger block it landed in.
pub trait AccessEventSink {
    fn record(&self, event: &AccessEvent) -> Result<u64, String>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnforcementOutcome {
    pub decision: Decision,
    pub status: EnforcementStatus,
    pub result: Option<Value>,
    pub event_block: u64,
}

/// Policy repository point.
#[derive(Clone, Debug)]
pub struct Prp {
    registry: Arc<Registry>,
    token: CryptoToken,
}

impl Prp {
    pub fn new(registry: Arc<Registry>, token: CryptoToken) -> Self {
        Self { registry, token }
    }

    /// Policies currently in force for `service_id`; empty when unpublished.
    pub fn fetch(&self, service_id: &str) -> Result<Vec<Policy>, PolicyError> {
        match self.registry.get_latest(&self.token, RecordKind::AccessPolicy, service_id)? {
            Some(rec) => rec.decode().map_err(|e| PolicyError::PolicyDecode(e.to_string())),
            None => Ok(Vec::new()),
        }
    }
}

/// Policy information point: environment attributes only.
#[derive(Clone, Debug)]
pub struct Pip {
    registry: Arc<Registry>,
    token: CryptoToken,
    clock: SimClock,
}

impl Pip {
    pub const ATTRIBUTES: [&'static str; 3] = ["environment.time", "environment.member_count", "environment.tenant_count"];

    pub fn new(registry: Arc<Registry>, token: CryptoToken, clock: SimClock) -> Self {
        Self { registry, token, clock }
    }

    pub fn resolve(&self, path: &str) -> Result<String, PolicyError> {
        let count = |kind| -> Result<String, PolicyError> {
            Ok(self.registry.live_keys(&self.token, kind)?.len().to_string())
        };
        match path {
            "environment.time" => Ok(self.clock.now().to_string()),
            "environment.member_count" => count(RecordKind::Membership),
            "environment.tenant_count" => count(RecordKind::TenantConfig),
            other => Err(PolicyError::UnknownAttribute(other.to_string())),
        }
    }

    /// Fills every resolvable environment attribute into `request`.
    pub fn enrich(&self, request: &mut AccessRequest) -> Result<(), PolicyError> {
        for path in Self::ATTRIBUTES {
            let value = self.resolve(path)?;
            request.environment.insert(path["environment.".len()..].to_string(), value);
        }
        Ok(())
    }
}

/// Runs obligations on provider results.
#[derive(Clone, Debug)]
pub struct DtsServices {
    pub masking: Arc<MaskingService>,
    pub anonymizer: Arc<Anonymizer>,
}

impl DtsServices {
    pub fn apply(&self, invocation: &DtsInvocation, value: Value, recipient: &str) -> Result<Value, String> {
        match invocation {
            DtsInvocation::Mask { policy } => self
                .masking
                .mask(&value, policy)
                .map(|o| o.document)
                .map_err(|e| e.to_string()),
            DtsInvocation::Anonymize {
                k,
                max_suppressed,
                hierarchies,
            } => {
                let ds: Dataset = serde_json::from_value(value).map_err(|e| format!("result is not a table: {e}"))?;
                let mut h: BTreeMap<String, GeneralizationHierarchy> = hierarchies.clone();
                for c in ds.quasi_identifiers() {
                    h.entry(ds.columns[c].name.clone())
                        .or_insert_with(GeneralizationHierarchy::suppression_only);
                }
                let config = KAnonConfig::new(*k).with_max_suppressed(*max_suppressed);
                let release = self
                    .anonymizer
                    .release_kanon(recipient, &ds, &config, &h)
                    .map_err(|e| e.to_string())?;
                Ok(serde_json::to_value(release.dataset).expect("dataset serializes"))
            }
            DtsInvocation::DifferentialPrivacy {
                query,
                epsilon,
                sensitivity,
                budget,
            } => {
                let ds: Dataset = serde_json::from_value(value).map_err(|e| format!("result is not a table: {e}"))?;
                match self
                    .anonymizer
                    .release_dp(recipient, &ds, query, *epsilon, *sensitivity, *budget)
                    .map_err(|e| e.to_string())?
                {
                    DpOutcome::Released(r) => Ok(serde_json::to_value(r).expect("release serializes")),
                    DpOutcome::Denied { spent } => Err(format!(
                        "privacy budget exhausted for {recipient}: spent {spent}, asked {epsilon}, cap {budget}"
                    )),
                }
            }
            DtsInvocation::Smc {} => Err("SMC is not applicable to results".into()),
        }
    }
}

/// Policy enforcement gateway.
#[derive(Clone)]
pub struct Peg {
    identity: Arc<IdentityManager>,
    prp: Prp,
    pip: Pip,
    decide: DecisionFn,
    dts: Option<DtsServices>,
    component: String,
}

impl std::fmt::Debug for Peg {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Peg").field("component", &self.component).finish_non_exhaustive()
    }
}

impl Peg {
    pub fn new(identity: Arc<IdentityManager>, prp: Prp, pip: Pip) -> Self {
        Self {
            identity,
            prp,
            pip,
            decide: Arc::new(pdp_decide),
            dts: None,
            component: "ds-peg".into(),
        }
    }

    pub fn with_dts(mut self, dts: DtsServices) -> Self {
        self.dts = Some(dts);
        self
    }

    /// Swaps the decision point, e.g. for a corrupted stub in tests.
    pub fn with_decision_fn(mut self, decide: DecisionFn) -> Self {
        self.decide = decide;
        self
    }

    pub fn with_component(mut self, name: &str) -> Self {
        self.component = name.to_string();
        self
    }

    pub fn prp(&self) -> &Prp {
        &self.prp
    }

    pub fn pip(&self) -> &Pip {
        &self.pip
    }

    /// Decision without enforcement or logging, for request-phase filtering.
    pub fn decide_for(&self, principal_subject: BTreeMap<String, String>, mut request: AccessRequest) -> Result<Decision, PolicyError> {
        request.subject = principal_subject;
        request.check()?;
        let policies = self.prp.fetch(request.service_id().unwrap_or_default())?;
        self.pip.enrich(&mut request)?;
        (self.decide)(&request, &policies)
    }

    /// Authenticates, decides, invokes the provider on a usage permit,
    /// applies obligations in order, and records exactly one event.
    ///
    /// The subject attributes come from the token's principal; whatever the
    /// caller put in `request.subject` is replaced.
    pub fn enforce(
        &self,
        auth: &AuthToken,
        mut request: AccessRequest,
        sink: &dyn AccessEventSink,
        provider: &mut dyn FnMut(&AccessRequest) -> Result<Value, String>,
    ) -> Result<EnforcementOutcome, PolicyError> {
        let principal = self.identity.validate(auth).ok();
        request.subject = match &principal {
            Some(p) => p.subject_attributes(),
            None => [("authenticated".to_string(), "false".to_string())].into(),
        };
        request.check()?;
        let policies = self.prp.fetch(request.service_id().unwrap_or_default())?;
        self.pip.enrich(&mut request)?;
        let decision = (self.decide)(&request, &policies)?;

        let mut failure = None;
        let (status, result) = match &principal {
            None => (EnforcementStatus::AuthFailed, None),
            Some(_) if decision.outcome != Outcome::Permit => (EnforcementStatus::Denied, None),
            Some(_) if request.phase() == Some(Phase::Request) => (EnforcementStatus::Authorized, None),
            Some(p) => match provider(&request) {
                Err(e) => {
                    failure = Some(PolicyError::ProviderFailed(e));
                    (EnforcementStatus::ProviderFailed, None)
                }
                Ok(raw) => match self.apply_obligations(&decision, raw, &p.id) {
                    Ok(v) => (EnforcementStatus::Delivered, Some(v)),
                    Err(e) => {
                        failure = Some(PolicyError::ObligationFailed(e));
                        (EnforcementStatus::ObligationFailed, None)
                    }
                },
            },
        };

        let event = AccessEvent {
            request,
            decision: decision.clone(),
            enforcing_component: self.component.clone(),
            timestamp: self.pip.clock.now(),
            status,
        };
        let event_block = sink.record(&event).map_err(PolicyError::EventNotRecorded)?;
        if principal.is_none() {
            return Err(PolicyError::AuthFailed);
        }
        if let Some(e) = failure {
            return Err(e);
        }
        Ok(EnforcementOutcome {
            decision,
            status,
            result,
            event_block,
        })
    }

    fn apply_obligations(&self, decision: &Decision, mut value: Value, recipient: &str) -> Result<Value, String> {
        if decision.obligations.is_empty() {
            return Ok(value);
        }
        let dts = self.dts.as_ref().ok_or("no data transformation services configured")?;
        for o in &decision.obligations {
            value = dts.apply(o, value, recipient)?;
        }
        Ok(value)
    }
}
