//! Federation administration: the five operating phases over the simulated
//! clouds, the tenant model, the forced-leave timer and the alert feed.
//!
//! Phases 1 to 3 are atomic. Every fabric step pushes a compensating action
//! and the ledger append is the last step, so a failure anywhere undoes the
//! fabric and identity changes and leaves the ledger untouched.

pub mod configurator;
pub mod model;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub use configurator::{configure_sections, unconfigure, ConfigUndo, ConfigurationFailed};
pub use model::*;

use crate::anonymization::Anonymizer;
use crate::audit::{publish_findings, run_audit, AuditEvent, AuditReport, DetectorConfig, DEFAULT_GAP, DEFAULT_THETA};
use crate::clock::{Millis, SimClock};
use crate::digest::Digest;
use crate::identity::{
    AuthToken, ComponentRole, CryptoToken, IdentityError, IdentityManager, IdpDescriptor, Principal, PrincipalKind,
    TokenAuthority,
};
use crate::iwm::{request_for, DeploymentPlan, Exclusion, Iwm, IwmError, ServiceOffer, WorkloadRequest};
use crate::masking::{KeyRing, MaskingError, MaskingService};
use crate::monitor::{Alert, AlertDraft, AlertFeed, AlertKind, Monitor, MonitorError, Severity, SlaPolicy, SlaReport, SlaStatus};
use crate::policy::pap::{pap_check_amendment, AdminPolicy, PapVerdict};
use crate::policy::peg::{DtsServices, EnforcementStatus, Peg, Pip, Prp};
use crate::policy::{validate_policy_value, Decision, Phase, PolicyError, SyntaxIssue};
use crate::registry::{ChainStatus, RecordDraft, RecordKind, Registry, RegistryError};
use crate::simcloud::{Capability, Fabric, FabricSnapshot, SimError, TenantFootprint, Vm};
use crate::smc::{smc_aggregate, SmcDeployment, SmcOp};

/// Attempts per fabric call while leaving.
pub const LEAVE_ATTEMPTS: u64 = 3;

#[derive(Debug, Error)]
pub enum FaasError {
    #[error("a federation needs at least two founders, got {0}")]
    TooFewFounders(usize),
    #[error("{cloud} lacks the {capability:?} prerequisite")]
    MissingPrerequisite { cloud: String, capability: Capability },
    #[error("{cloud} has no free section")]
    NoFreeSection { cloud: String },
    #[error("authentication failed: {0}")]
    AuthFailed(String),
    #[error("forbidden: {0}")]
    Forbidden(String),
    #[error(transparent)]
    ConfigurationFailed(#[from] ConfigurationFailed),
    #[error("the federation is closed to new members")]
    FederationClosed,
    #[error("the federation has been terminated")]
    Terminated,
    #[error("{0} is already an active member")]
    AlreadyMember(String),
    #[error("{0} is not an active member")]
    NotActive(String),
    #[error("{0} is the last active member; terminate the federation instead")]
    LastMember(String),
    #[error("policy document rejected: {}", issues.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; "))]
    PolicyInvalid { issues: Vec<SyntaxIssue> },
    #[error("invalid SLA policy: {0}")]
    SlaInvalid(String),
    #[error(transparent)]
    InvariantViolation(#[from] InvariantViolation),
    #[error("section {0} is unknown or already assigned")]
    SectionUnavailable(String),
    #[error("unknown tenant {0}")]
    UnknownTenant(String),
    #[error("unknown service {0}")]
    UnknownService(String),
    #[error("service {0} is already published")]
    DuplicateService(String),
    #[error("invalid service id {0:?}")]
    InvalidServiceId(String),
    #[error("{0} was not in the last offered list")]
    InvalidChoice(String),
    #[error("{consumer} holds no grant for {service_id}")]
    NoGrant { consumer: String, service_id: String },
    #[error("access denied by {}", .0.matched_policy_ids.join(", "))]
    Denied(Decision),
    #[error("deallocation failed: {0}")]
    DeallocationFailed(String),
    #[error("fabric: {0}")]
    Sim(#[from] SimError),
    #[error(transparent)]
    Iwm(#[from] IwmError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Monitor(#[from] MonitorError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Masking(#[from] MaskingError),
    #[error("identity: {0}")]
    Identity(#[from] IdentityError),
}

impl FaasError {
    /// Stable variant name used by scenario assertions and the HTTP layer.
    pub fn code(&self) -> &'static str {
        use FaasError::*;
        match self {
            TooFewFounders(_) => "TooFewFounders",
            MissingPrerequisite { .. } => "MissingPrerequisite",
            NoFreeSection { .. } => "NoFreeSection",
            AuthFailed(_) => "AuthFailed",
            Forbidden(_) => "Forbidden",
            ConfigurationFailed(_) => "ConfigurationFailed",
            FederationClosed => "FederationClosed",
            Terminated => "Terminated",
            AlreadyMember(_) => "AlreadyMember",
            NotActive(_) => "NotActive",
            LastMember(_) => "LastMember",
            PolicyInvalid { .. } => "PolicyInvalid",
            SlaInvalid(_) => "SlaInvalid",
            InvariantViolation(_) => "InvariantViolation",
            SectionUnavailable(_) => "SectionUnavailable",
            UnknownTenant(_) => "UnknownTenant",
            UnknownService(_) => "UnknownService",
            DuplicateService(_) => "DuplicateService",
            InvalidServiceId(_) => "InvalidServiceId",
            InvalidChoice(_) => "InvalidChoice",
            NoGrant { .. } => "NoGrant",
            Denied(_) => "Denied",
            DeallocationFailed(_) => "DeallocationFailed",
            Sim(_) => "FabricError",
            Iwm(IwmError::NoCandidates) => "NoCandidates",
            Iwm(IwmError::CapacityExhausted { .. }) => "CapacityExhausted",
            Iwm(IwmError::AdapterFailure(_)) => "AdapterFailure",
            Iwm(IwmError::InvalidRequest(_)) => "InvalidRequest",
            Iwm(IwmError::InvalidOffer { .. }) => "InvalidOffer",
            Iwm(_) => "BrokerError",
            Policy(PolicyError::AuthFailed) => "AuthFailed",
            Policy(PolicyError::ProviderFailed(_)) => "ProviderFailed",
            Policy(PolicyError::ObligationFailed(_)) => "ObligationFailed",
            Policy(_) => "PolicyError",
            Monitor(MonitorError::InvalidCursor { .. }) => "InvalidCursor",
            Monitor(_) => "MonitorError",
            Registry(_) => "RegistryError",
            Masking(_) => "MaskingError",
            Identity(_) => "AuthFailed",
        }
    }
}

#[derive(Clone, Debug)]
pub struct FederationConfig {
    /// Drives the federation key and every random source.
    pub seed: u64,
    pub clock: SimClock,
    /// Mirror the ledger to this file.
    pub ledger_path: Option<PathBuf>,
}

impl FederationConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            clock: SimClock::new(0),
            ledger_path: None,
        }
    }
}

/// Key material derived from a label and the run seed.
pub fn derive_key(label: &str, seed: u64) -> [u8; 32] {
    let mut bytes = label.as_bytes().to_vec();
    bytes.extend_from_slice(&seed.to_be_bytes());
    Digest::of(&bytes).0
}

/// How a published service computes its result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ServiceBackend {
    /// Returns a fixed document.
    Static { data: Value },
    /// Aggregates the inputs with secret sharing across the tenant's clouds.
    Smc { op: SmcOp, inputs: Vec<u64> },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TenantRequest {
    pub id: String,
    pub kind: TenantKind,
    pub sections: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PublishRequest {
    pub offer: ServiceOffer,
    /// Access policy document, a JSON list of policies.
    #[serde(default)]
    pub policies: Value,
    #[serde(default)]
    pub sla: Vec<SlaPolicy>,
    pub backend: ServiceBackend,
    /// Delegation of policy editing, stored alongside the policies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub admin: Option<AdminPolicy>,
    /// Creates the offer's tenant as part of publishing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_tenant: Option<TenantRequest>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinRequest {
    pub cloud: String,
    pub user: String,
    pub secret: String,
    /// The agreement is signed off-line; this records that it was.
    #[serde(default = "yes")]
    pub countersigned: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HostedService {
    pub service_id: String,
    pub provider: String,
    pub tenant: String,
    pub backend: ServiceBackend,
    pub published_at: Millis,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grant {
    pub consumer: String,
    pub service_id: String,
    pub cloud: String,
    pub tenant: String,
    pub vms: Vec<String>,
    pub demand: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Notification {
    pub cloud: String,
    pub notified_at: Millis,
    /// Start of the breach streak that was notified.
    pub since: Millis,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FederationState {
    pub sfac: Sfac,
    /// Hex hash of the genesis block.
    pub contract: String,
    pub members: BTreeMap<String, MemberCloud>,
    pub tenants: BTreeMap<String, Tenant>,
    pub services: BTreeMap<String, HostedService>,
    /// Keyed by `(consumer, service_id)`.
    #[serde(with = "pair_map")]
    pub grants: BTreeMap<(String, String), Grant>,
    /// Last ranked offer list per consumer, with the requested demand.
    pub offered: BTreeMap<String, (u64, Vec<String>)>,
    /// Open SLA notifications keyed by evidence key.
    pub notifications: BTreeMap<String, Notification>,
    pub terminated: bool,
}

impl FederationState {
    pub fn active_members(&self) -> BTreeSet<String> {
        self.members
            .values()
            .filter(|m| m.status == MemberStatus::Active)
            .map(|m| m.cloud_id.clone())
            .collect()
    }

    fn is_active(&self, cloud: &str) -> bool {
        self.members.get(cloud).is_some_and(|m| m.status == MemberStatus::Active)
    }
}

mod pair_map {
    use super::Grant;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeMap;

    pub fn serialize<S: Serializer>(m: &BTreeMap<(String, String), Grant>, s: S) -> Result<S::Ok, S::Error> {
        m.values().collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<(String, String), Grant>, D::Error> {
        let v: Vec<Grant> = Vec::deserialize(d)?;
        Ok(v.into_iter().map(|g| ((g.consumer.clone(), g.service_id.clone()), g)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JoinReceipt {
    pub cloud: String,
    pub section: String,
    pub block: u64,
    /// Session for the administrator who joined.
    pub token: AuthToken,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PublishReceipt {
    pub service_id: String,
    pub tenant: String,
    pub block: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeaveReceipt {
    pub cloud: String,
    pub forced: bool,
    pub block: u64,
    pub removed_services: Vec<String>,
    pub removed_tenants: Vec<String>,
    pub released_grants: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequestOutcome {
    pub offers: Vec<ServiceOffer>,
    pub excluded: Vec<Exclusion>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectOutcome {
    pub service_id: String,
    pub provider: String,
    pub resources: Vec<String>,
    pub remaining_capacity: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UseOutcome {
    pub status: EnforcementStatus,
    pub result: Option<Value>,
    pub decision: Decision,
    pub event_block: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum ScanAction {
    Notified { cloud: String, key: String, since: Millis },
    Cleared { cloud: String, key: String },
    ForcedLeave { cloud: String },
    LeaveFailed { cloud: String, reason: String },
}

#[derive(Clone, Debug, Serialize)]
struct Removal<'a> {
    reason: &'a str,
    cloud: &'a str,
    at: Millis,
}

/// Compensating actions, applied newest first on abort.
#[derive(Debug)]
enum Undo {
    ReleaseSection { cloud: String, section: String },
    Unconfigure(ConfigUndo),
    RemoveIdp(String),
    Refederate(IdpDescriptor),
    Unhost { cloud: String, service: String },
    RestoreVm(Vm),
    Regrant { cloud: String, tenant: String, principal: String },
    RestoreTenant(TenantFootprint),
    Relink { tenant: String, sections: Vec<String> },
    Reinform { cloud: String, tenant: String },
}

#[derive(Clone, Debug)]
struct Tokens {
    fam: CryptoToken,
}

/// The federation kernel.
pub struct Orchestrator {
    clock: SimClock,
    registry: Arc<Registry>,
    identity: Arc<IdentityManager>,
    tokens: Tokens,
    peg: Peg,
    iwm: Iwm,
    monitor: Arc<Monitor>,
    alerts: Arc<AlertFeed>,
    fabric: Mutex<Fabric>,
    state: RwLock<FederationState>,
    /// Phases 1 to 3 hold it exclusively; consumer operations share it.
    gate: RwLock<()>,
    rng: Mutex<ChaCha20Rng>,
}

impl std::fmt::Debug for Orchestrator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Orchestrator")
            .field("federation", &self.state.read().sfac.federation_id)
            .finish_non_exhaustive()
    }
}

impl Orchestrator {
    /// Phase 1 from scratch: checks the founders, builds the infrastructure
    /// tenant with one section per founder, writes the genesis contract and
    /// the founders' membership records.
    pub fn create_federation(mut fabric: Fabric, sfac: Sfac, config: FederationConfig) -> Result<Self, FaasError> {
        let founders: BTreeSet<String> = sfac.members.iter().cloned().collect();
        if founders.len() < 2 {
            return Err(FaasError::TooFewFounders(founders.len()));
        }
        let clock = config.clock.clone();
        let authority = TokenAuthority::new(derive_key("federation", config.seed), clock.clone());
        let identity = Arc::new(IdentityManager::new(authority.clone()));
        let registry = Arc::new(Registry::new(authority.clone()));
        if let Some(path) = &config.ledger_path {
            registry.attach_file(path)?;
        }

        let mut capabilities = BTreeMap::new();
        for f in &founders {
            let caps = fabric.describe_capabilities(f)?;
            if let Some(missing) = Capability::ALL.into_iter().find(|c| !caps.contains(c)) {
                return Err(FaasError::MissingPrerequisite {
                    cloud: f.clone(),
                    capability: missing,
                });
            }
            let idp = fabric.cloud(f).and_then(|c| c.idp.clone()).ok_or(FaasError::MissingPrerequisite {
                cloud: f.clone(),
                capability: Capability::Identity,
            })?;
            identity.federate_idp(f, idp)?;
            capabilities.insert(f.clone(), caps);
        }

        let all = [InfraService::Core, InfraService::Network, InfraService::Access];
        let mut sections = Vec::new();
        for f in &founders {
            let section = first_free_section(&fabric, f)?;
            fabric.allocate_tenant(f, INFRA_TENANT, &section.id)?;
            configure_sections(&mut fabric, f, INFRA_TENANT, std::slice::from_ref(&section.id), &all)?;
            sections.push(section);
        }
        let infra = Tenant::infrastructure(sections, &founders)?;

        let genesis = registry.genesis(serde_json::to_vec(&sfac).expect("sfac serializes"))?;
        let contract = genesis.hash.to_hex();
        let fam = authority.issue_component(ComponentRole::Fam);
        let now = clock.now();
        let mut drafts: Vec<RecordDraft> = founders
            .iter()
            .map(|f| {
                let rec = MembershipRecord {
                    cloud_id: f.clone(),
                    contract: contract.clone(),
                    status: MemberStatus::Active,
                    capabilities: capabilities[f].clone(),
                    at: now,
                    forced: false,
                };
                RecordDraft::json(RecordKind::Membership, f, 0, &rec)
            })
            .collect();
        drafts.push(tenant_draft(&registry, &contract, &infra));
        registry.append(&fam, drafts)?;

        let members = founders
            .iter()
            .map(|f| {
                (
                    f.clone(),
                    MemberCloud {
                        cloud_id: f.clone(),
                        capabilities: capabilities[f].clone(),
                        status: MemberStatus::Active,
                        joined_at: now,
                        left_at: None,
                        forced: false,
                    },
                )
            })
            .collect();

        let alerts = Arc::new(AlertFeed::new(clock.clone()));
        let ds = authority.issue_component(ComponentRole::Ds);
        let monitor = Arc::new(Monitor::new(
            registry.clone(),
            authority.issue_component(ComponentRole::Frm),
            clock.clone(),
            alerts.clone(),
        ));
        let keys = KeyRing::new().with_key("default", derive_key("masking", config.seed));
        let dts = DtsServices {
            masking: Arc::new(MaskingService::new(
                registry.clone(),
                authority.issue_component(ComponentRole::Dm),
                keys,
                config.seed,
            )?),
            anonymizer: Arc::new(Anonymizer::new(
                registry.clone(),
                authority.issue_component(ComponentRole::Anm),
                clock.clone(),
                config.seed,
            )),
        };
        let peg = Peg::new(
            identity.clone(),
            Prp::new(registry.clone(), ds.clone()),
            Pip::new(registry.clone(), ds, clock.clone()),
        )
        .with_dts(dts);
        let iwm = Iwm::new(registry.clone(), authority.issue_component(ComponentRole::Iwm), peg.clone());

        Ok(Self {
            clock,
            registry,
            identity,
            tokens: Tokens { fam },
            peg,
            iwm,
            monitor,
            alerts,
            fabric: Mutex::new(fabric),
            state: RwLock::new(FederationState {
                sfac,
                contract,
                members,
                tenants: [(INFRA_TENANT.to_string(), infra)].into(),
                services: BTreeMap::new(),
                grants: BTreeMap::new(),
                offered: BTreeMap::new(),
                notifications: BTreeMap::new(),
                terminated: false,
            }),
            gate: RwLock::new(()),
            rng: Mutex::new(ChaCha20Rng::seed_from_u64(config.seed)),
        })
    }

    // ---- accessors ----

    pub fn clock(&self) -> &SimClock {
        &self.clock
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.registry
    }

    pub fn identity(&self) -> &Arc<IdentityManager> {
        &self.identity
    }

    pub fn monitor(&self) -> &Arc<Monitor> {
        &self.monitor
    }

    pub fn peg(&self) -> &Peg {
        &self.peg
    }

    pub fn iwm(&self) -> &Iwm {
        &self.iwm
    }

    pub fn state(&self) -> FederationState {
        self.state.read().clone()
    }

    /// Runs `f` with exclusive access to the simulated clouds.
    pub fn with_fabric<T>(&self, f: impl FnOnce(&mut Fabric) -> T) -> T {
        f(&mut self.fabric.lock())
    }

    pub fn fabric_snapshot(&self) -> FabricSnapshot {
        self.fabric.lock().snapshot()
    }

    pub fn alerts(&self) -> &Arc<AlertFeed> {
        &self.alerts
    }

    pub fn alert_feed(&self, cursor: u64) -> Result<Vec<Alert>, FaasError> {
        Ok(self.alerts.since(cursor)?)
    }

    pub fn verify_ledger(&self) -> ChainStatus {
        self.registry.verify_chain()
    }

    /// Signs a user in through their cloud's federated identity provider.
    pub fn login(&self, cloud: &str, user: &str, secret: &str) -> Result<AuthToken, FaasError> {
        self.identity
            .authenticate(cloud, user, secret)
            .map_err(|e| FaasError::AuthFailed(e.to_string()))
    }

    /// Live offers as published.
    pub fn services(&self) -> Result<Vec<ServiceOffer>, FaasError> {
        Ok(self.iwm.offers()?)
    }

    /// SLA policies currently in force for `service_id`.
    pub fn sla_policies(&self, service_id: &str) -> Result<Vec<SlaPolicy>, FaasError> {
        match self.registry.get_latest(&self.tokens.fam, RecordKind::SlaPolicy, service_id)? {
            Some(rec) => rec.decode().map_err(|e| FaasError::SlaInvalid(e.to_string())),
            None => Ok(Vec::new()),
        }
    }

    pub fn sla_report(&self) -> Result<SlaReport, FaasError> {
        let mut policies = Vec::new();
        for sid in self.state.read().services.keys() {
            policies.extend(self.sla_policies(sid)?);
        }
        Ok(self.monitor.sla_report(&policies, self.clock.now())?)
    }

    pub fn sla_ingest(&self, service_id: &str, metric: &str, value: f64) -> Result<u64, FaasError> {
        Ok(self.monitor.sla_ingest(service_id, metric, value, self.clock.now())?)
    }

    fn principal(&self, auth: &AuthToken) -> Result<Principal, FaasError> {
        self.identity.validate(auth).map_err(|e| FaasError::AuthFailed(e.to_string()))
    }

    /// The caller must administer an active member cloud.
    fn member_admin(&self, auth: &AuthToken) -> Result<Principal, FaasError> {
        let p = self.principal(auth)?;
        if p.kind != PrincipalKind::MemberCloudAdmin {
            return Err(FaasError::Forbidden(format!("{} is not a member cloud administrator", p.id)));
        }
        if !self.state.read().is_active(&p.home_cloud) {
            return Err(FaasError::NotActive(p.home_cloud));
        }
        Ok(p)
    }

    fn check_live(&self) -> Result<(), FaasError> {
        if self.state.read().terminated {
            return Err(FaasError::Terminated);
        }
        Ok(())
    }

    fn commit(&self, drafts: Vec<RecordDraft>) -> Result<u64, FaasError> {
        Ok(self.registry.append(&self.tokens.fam, drafts)?)
    }

    fn compensate(&self, fabric: &mut Fabric, undo: Vec<Undo>) {
        for u in undo.into_iter().rev() {
            let _ = match u {
                Undo::ReleaseSection { cloud, section } => fabric.release_section(&cloud, &section).map(|_| ()),
                Undo::Unconfigure(c) => {
                    unconfigure(fabric, &c);
                    Ok(())
                }
                Undo::RemoveIdp(cloud) => {
                    self.identity.remove_idp(&cloud);
                    Ok(())
                }
                Undo::Refederate(idp) => {
                    let _ = self.identity.federate_idp(&idp.cloud_id.clone(), idp);
                    Ok(())
                }
                Undo::Unhost { cloud, service } => fabric.unhost_service(&cloud, &service),
                Undo::RestoreVm(vm) => fabric.restore_vm(&vm),
                Undo::Regrant { cloud, tenant, principal } => fabric.grant_access(&cloud, &tenant, &principal).map(|_| ()),
                Undo::RestoreTenant(fp) => fabric.restore_tenant(&fp),
                Undo::Relink { tenant, sections } => fabric.link_sections(&tenant, &sections),
                Undo::Reinform { cloud, tenant } => fabric.inform_deployment_manager(&cloud, &tenant),
            };
        }
    }

    // ---- phase 1: join ----

    pub fn join(&self, request: &JoinRequest) -> Result<JoinReceipt, FaasError> {
        let _phase = self.gate.write();
        self.check_live()?;
        {
            let st = self.state.read();
            if !st.sfac.open {
                return Err(FaasError::FederationClosed);
            }
            if st.is_active(&request.cloud) {
                return Err(FaasError::AlreadyMember(request.cloud.clone()));
            }
        }
        if !request.countersigned {
            return Err(FaasError::AuthFailed("the agreement is not countersigned".into()));
        }
        let mut fabric = self.fabric.lock();
        let mut undo = Vec::new();
        match self.join_steps(&mut fabric, request, &mut undo) {
            Ok(receipt) => Ok(receipt),
            Err(e) => {
                self.compensate(&mut fabric, undo);
                Err(e)
            }
        }
    }

    fn join_steps(&self, fabric: &mut Fabric, req: &JoinRequest, undo: &mut Vec<Undo>) -> Result<JoinReceipt, FaasError> {
        let cloud = req.cloud.as_str();
        // Authentication against the cloud's own provider, then federation.
        let assertion = fabric
            .local_authenticate(cloud, &req.user, &req.secret)
            .map_err(|e| FaasError::AuthFailed(e.to_string()))?;
        if assertion.kind != PrincipalKind::MemberCloudAdmin {
            return Err(FaasError::AuthFailed(format!("{}@{cloud} is not a cloud administrator", req.user)));
        }
        let idp = fabric
            .cloud(cloud)
            .and_then(|c| c.idp.clone())
            .ok_or(FaasError::MissingPrerequisite {
                cloud: cloud.to_string(),
                capability: Capability::Identity,
            })?;
        self.identity.federate_idp(cloud, idp)?;
        undo.push(Undo::RemoveIdp(cloud.to_string()));
        let token = self
            .identity
            .authenticate(cloud, &req.user, &req.secret)
            .map_err(|e| FaasError::AuthFailed(e.to_string()))?;

        // Prerequisites and infrastructure federation.
        let caps = fabric.describe_capabilities(cloud)?;
        if let Some(missing) = Capability::ALL.into_iter().find(|c| !caps.contains(c)) {
            return Err(FaasError::MissingPrerequisite {
                cloud: cloud.to_string(),
                capability: missing,
            });
        }
        let section = first_free_section(fabric, cloud)?;
        fabric.allocate_tenant(cloud, INFRA_TENANT, &section.id)?;
        undo.push(Undo::ReleaseSection {
            cloud: cloud.to_string(),
            section: section.id.clone(),
        });
        let all = [InfraService::Core, InfraService::Network, InfraService::Access];
        let config = configure_sections(fabric, cloud, INFRA_TENANT, std::slice::from_ref(&section.id), &all)?;
        undo.push(Undo::Unconfigure(config));

        let (infra, contract) = {
            let st = self.state.read();
            let mut infra = st.tenants[INFRA_TENANT].clone();
            infra.sections.push(section.clone());
            let mut members = st.active_members();
            members.insert(cloud.to_string());
            infra.validate(&members)?;
            (infra, st.contract.clone())
        };
        let federation = self.state.read().sfac.federation_id.clone();
        fabric.notify(cloud, &format!("joined {federation}"))?;

        // Evidence last.
        let now = self.clock.now();
        let record = MembershipRecord {
            cloud_id: cloud.to_string(),
            contract: contract.clone(),
            status: MemberStatus::Active,
            capabilities: caps.clone(),
            at: now,
            forced: false,
        };
        let block = self.commit(vec![
            RecordDraft::json(
                RecordKind::Membership,
                cloud,
                self.registry.next_seq(RecordKind::Membership, cloud),
                &record,
            ),
            tenant_draft(&self.registry, &contract, &infra),
        ])?;

        let mut st = self.state.write();
        st.members.insert(
            cloud.to_string(),
            MemberCloud {
                cloud_id: cloud.to_string(),
                capabilities: caps,
                status: MemberStatus::Active,
                joined_at: now,
                left_at: None,
                forced: false,
            },
        );
        st.tenants.insert(INFRA_TENANT.to_string(), infra);
        Ok(JoinReceipt {
            cloud: cloud.to_string(),
            section: section.id,
            block,
            token,
        })
    }

    // ---- phase 2: tenants and publishing ----

    /// Creates an operational tenant owned by the caller's cloud.
    pub fn create_tenant(&self, auth: &AuthToken, request: &TenantRequest) -> Result<Tenant, FaasError> {
        let _phase = self.gate.write();
        self.check_live()?;
        let admin = self.member_admin(auth)?;
        let mut fabric = self.fabric.lock();
        let mut undo = Vec::new();
        let result = (|| {
            let tenant = self.provision_tenant(&mut fabric, request, &admin.home_cloud, &mut undo)?;
            fabric.notify(&admin.home_cloud, &format!("tenant {} created", tenant.id))?;
            let contract = self.state.read().contract.clone();
            self.commit(vec![tenant_draft(&self.registry, &contract, &tenant)])?;
            Ok(tenant)
        })();
        match result {
            Ok(tenant) => {
                self.state.write().tenants.insert(tenant.id.clone(), tenant.clone());
                Ok(tenant)
            }
            Err(e) => {
                self.compensate(&mut fabric, undo);
                Err(e)
            }
        }
    }

    fn provision_tenant(
        &self,
        fabric: &mut Fabric,
        request: &TenantRequest,
        owner: &str,
        undo: &mut Vec<Undo>,
    ) -> Result<Tenant, FaasError> {
        let members = {
            let st = self.state.read();
            if st.tenants.contains_key(&request.id) || request.id == INFRA_TENANT {
                return Err(InvariantViolation(format!("tenant {} already exists", request.id)).into());
            }
            st.active_members()
        };
        let mut sections = Vec::new();
        for sid in &request.sections {
            let found = fabric
                .clouds()
                .find_map(|c| c.free_sections().into_iter().find(|s| &s.id == sid).cloned())
                .ok_or_else(|| FaasError::SectionUnavailable(sid.clone()))?;
            if !members.contains(&found.cloud_id) {
                return Err(InvariantViolation(format!("section {sid} belongs to non-member {}", found.cloud_id)).into());
            }
            sections.push(found);
        }
        let tenant = Tenant::new(&request.id, request.kind, owner, sections)?;
        tenant.validate(&members)?;
        for s in &tenant.sections {
            fabric.allocate_tenant(&s.cloud_id, &tenant.id, &s.id)?;
            undo.push(Undo::ReleaseSection {
                cloud: s.cloud_id.clone(),
                section: s.id.clone(),
            });
        }
        let services: Vec<InfraService> = tenant.services.iter().copied().collect();
        for cloud in tenant.clouds() {
            let config = configure_sections(fabric, cloud, &tenant.id, &tenant.sections_on(cloud), &services)?;
            undo.push(Undo::Unconfigure(config));
        }
        Ok(tenant)
    }

    pub fn publish(&self, auth: &AuthToken, request: &PublishRequest) -> Result<PublishReceipt, FaasError> {
        let _phase = self.gate.write();
        self.check_live()?;
        let admin = self.member_admin(auth)?;
        let offer = &request.offer;
        let sid = offer.service_id.as_str();
        if sid.is_empty() || sid.contains([':', '/', '@']) {
            return Err(FaasError::InvalidServiceId(sid.to_string()));
        }
        offer.check()?;
        if offer.provider_cloud != admin.home_cloud {
            return Err(FaasError::Forbidden(format!(
                "{} may only publish services of {}",
                admin.id, admin.home_cloud
            )));
        }
        if self.iwm.offer(sid)?.is_some() {
            return Err(FaasError::DuplicateService(sid.to_string()));
        }

        // Sanity check of the received policies.
        let doc = if request.policies.is_null() { json!([]) } else { request.policies.clone() };
        let policies = validate_policy_value(&doc).map_err(|issues| FaasError::PolicyInvalid { issues })?;
        for p in &request.sla {
            p.check().map_err(|e| FaasError::SlaInvalid(e.to_string()))?;
            if p.service_id != sid {
                return Err(FaasError::SlaInvalid(format!("SLA policy names {}, not {sid}", p.service_id)));
            }
        }
        if let Some(a) = &request.admin {
            if a.service_id != sid {
                return Err(FaasError::PolicyInvalid {
                    issues: vec![SyntaxIssue {
                        policy: None,
                        message: format!("admin policy names {}, not {sid}", a.service_id),
                    }],
                });
            }
        }

        let mut fabric = self.fabric.lock();
        let mut undo = Vec::new();
        let result = (|| {
            let (tenant, created) = match &request.new_tenant {
                Some(t) => {
                    if t.id != offer.tenant {
                        return Err(FaasError::UnknownTenant(offer.tenant.clone()));
                    }
                    (self.provision_tenant(&mut fabric, t, &admin.home_cloud, &mut undo)?, true)
                }
                None => {
                    let st = self.state.read();
                    let t = st
                        .tenants
                        .get(&offer.tenant)
                        .ok_or_else(|| FaasError::UnknownTenant(offer.tenant.clone()))?;
                    if t.owner.as_deref() != Some(admin.home_cloud.as_str()) {
                        return Err(FaasError::Forbidden(format!(
                            "tenant {} is not owned by {}",
                            t.id, admin.home_cloud
                        )));
                    }
                    (t.clone(), false)
                }
            };
            if tenant.sections_on(&offer.provider_cloud).is_empty() {
                return Err(InvariantViolation(format!(
                    "tenant {} has no section on provider {}",
                    tenant.id, offer.provider_cloud
                ))
                .into());
            }
            if let ServiceBackend::Smc { .. } = request.backend {
                if !tenant.smc_capable() {
                    return Err(InvariantViolation(format!(
                        "SMC service {sid} needs sections on more than two members, tenant {} spans {}",
                        tenant.id,
                        tenant.clouds().len()
                    ))
                    .into());
                }
            }
            let data = serde_json::to_value(&request.backend).expect("backend serializes");
            fabric.host_service(&offer.provider_cloud, &tenant.id, sid, &data)?;
            undo.push(Undo::Unhost {
                cloud: offer.provider_cloud.clone(),
                service: sid.to_string(),
            });
            fabric.notify(&offer.provider_cloud, &format!("service {sid} published"))?;

            let contract = self.state.read().contract.clone();
            let mut drafts = Vec::new();
            if created {
                drafts.push(tenant_draft(&self.registry, &contract, &tenant));
            }
            let seq = |kind, key: &str| self.registry.next_seq(kind, key);
            drafts.push(RecordDraft::json(RecordKind::Service, sid, seq(RecordKind::Service, sid), offer));
            drafts.push(RecordDraft::json(
                RecordKind::AccessPolicy,
                sid,
                seq(RecordKind::AccessPolicy, sid),
                &policies,
            ));
            drafts.push(RecordDraft::json(
                RecordKind::SlaPolicy,
                sid,
                seq(RecordKind::SlaPolicy, sid),
                &request.sla,
            ));
            if let Some(a) = &request.admin {
                let key = AdminPolicy::registry_key(sid);
                drafts.push(RecordDraft::json(RecordKind::AccessPolicy, &key, seq(RecordKind::AccessPolicy, &key), a));
            }
            let block = self.commit(drafts)?;
            Ok((tenant, created, block))
        })();
        match result {
            Ok((tenant, created, block)) => {
                let mut st = self.state.write();
                if created {
                    st.tenants.insert(tenant.id.clone(), tenant.clone());
                }
                st.services.insert(
                    sid.to_string(),
                    HostedService {
                        service_id: sid.to_string(),
                        provider: offer.provider_cloud.clone(),
                        tenant: tenant.id.clone(),
                        backend: request.backend.clone(),
                        published_at: self.clock.now(),
                    },
                );
                Ok(PublishReceipt {
                    service_id: sid.to_string(),
                    tenant: tenant.id,
                    block,
                })
            }
            Err(e) => {
                self.compensate(&mut fabric, undo);
                Err(e)
            }
        }
    }

    /// Replaces a service's access policies after the administration check.
    pub fn amend_policy(&self, auth: &AuthToken, service_id: &str, policies: &Value) -> Result<u64, FaasError> {
        let _phase = self.gate.write();
        self.check_live()?;
        let editor = self.principal(auth)?;
        let offer = self
            .iwm
            .offer(service_id)?
            .ok_or_else(|| FaasError::UnknownService(service_id.to_string()))?;
        let new = validate_policy_value(policies).map_err(|issues| FaasError::PolicyInvalid { issues })?;
        let old = self.peg.prp().fetch(service_id)?;
        let admin = self.admin_policy(service_id)?;
        if let PapVerdict::Deny { reason } = pap_check_amendment(&editor, &offer.provider_cloud, admin.as_ref(), &old, &new) {
            return Err(FaasError::Forbidden(reason));
        }
        let seq = self.registry.next_seq(RecordKind::AccessPolicy, service_id);
        self.commit(vec![RecordDraft::json(RecordKind::AccessPolicy, service_id, seq, &new)])
    }

    /// Sets who besides the owner may edit which parts of a service's
    /// policies. Only the owner cloud's administrator may do this.
    pub fn set_admin_policy(&self, auth: &AuthToken, admin: &AdminPolicy) -> Result<u64, FaasError> {
        let _phase = self.gate.write();
        self.check_live()?;
        let editor = self.principal(auth)?;
        let offer = self
            .iwm
            .offer(&admin.service_id)?
            .ok_or_else(|| FaasError::UnknownService(admin.service_id.clone()))?;
        if !(editor.kind == PrincipalKind::MemberCloudAdmin && editor.home_cloud == offer.provider_cloud) {
            return Err(FaasError::Forbidden(format!(
                "only the administrator of {} may delegate policy editing",
                offer.provider_cloud
            )));
        }
        let key = AdminPolicy::registry_key(&admin.service_id);
        let seq = self.registry.next_seq(RecordKind::AccessPolicy, &key);
        self.commit(vec![RecordDraft::json(RecordKind::AccessPolicy, &key, seq, admin)])
    }

    pub fn admin_policy(&self, service_id: &str) -> Result<Option<AdminPolicy>, FaasError> {
        let key = AdminPolicy::registry_key(service_id);
        match self.registry.get_latest(&self.tokens.fam, RecordKind::AccessPolicy, &key)? {
            Some(rec) => rec
                .decode()
                .map(Some)
                .map_err(|e| FaasError::Policy(PolicyError::PolicyDecode(e.to_string()))),
            None => Ok(None),
        }
    }

    // ---- phase 3: leave ----

    /// Voluntary leave, requested by the cloud's own administrator.
    pub fn leave(&self, auth: &AuthToken, cloud: &str) -> Result<LeaveReceipt, FaasError> {
        let _phase = self.gate.write();
        self.check_live()?;
        let p = self.principal(auth)?;
        if p.kind != PrincipalKind::MemberCloudAdmin || p.home_cloud != cloud {
            return Err(FaasError::AuthFailed(format!("{} may not withdraw {cloud}", p.id)));
        }
        self.leave_inner(cloud, false, false)
    }

    fn leave_inner(&self, cloud: &str, forced: bool, allow_last: bool) -> Result<LeaveReceipt, FaasError> {
        {
            let st = self.state.read();
            if !st.is_active(cloud) {
                return Err(FaasError::NotActive(cloud.to_string()));
            }
            if !allow_last && st.active_members().len() <= 1 {
                return Err(FaasError::LastMember(cloud.to_string()));
            }
        }
        let mut fabric = self.fabric.lock();
        let mut undo = Vec::new();
        match self.leave_steps(&mut fabric, cloud, forced, &mut undo) {
            Ok(receipt) => Ok(receipt),
            Err(e) => {
                self.compensate(&mut fabric, undo);
                self.alerts.raise(
                    AlertDraft::new(
                        AlertKind::Operational,
                        Severity::Critical,
                        cloud,
                        format!("leave of {cloud} aborted: {e}"),
                    )
                    .with_fingerprint(format!("LEAVE_FAILED|{cloud}|{}", self.clock.now())),
                );
                Err(match e {
                    FaasError::Sim(s) => FaasError::DeallocationFailed(s.to_string()),
                    other => other,
                })
            }
        }
    }

    fn leave_steps(&self, fabric: &mut Fabric, cloud: &str, forced: bool, undo: &mut Vec<Undo>) -> Result<LeaveReceipt, FaasError> {
        let st = self.state.read().clone();
        let now = self.clock.now();

        // Tenants that go away: owned by the leaver or using one of its sections.
        let doomed: BTreeSet<String> = st
            .tenants
            .values()
            .filter(|t| t.kind != TenantKind::Infrastructure)
            .filter(|t| t.owner.as_deref() == Some(cloud) || t.clouds().contains(cloud))
            .map(|t| t.id.clone())
            .collect();
        let removed_services: Vec<String> = st
            .services
            .values()
            .filter(|s| doomed.contains(&s.tenant))
            .map(|s| s.service_id.clone())
            .collect();

        // 1. Release the services the leaver's principals acquired elsewhere.
        let mut returned: BTreeMap<String, u64> = BTreeMap::new();
        let mut revoke: BTreeSet<(String, String, String)> = BTreeSet::new();
        let mut released = 0;
        for g in st.grants.values() {
            if home_of(&g.consumer) != cloud || doomed.contains(&g.tenant) {
                continue;
            }
            for vm_id in &g.vms {
                if let Some(vm) = retry(|| fabric.destroy_vm(&g.cloud, vm_id))? {
                    undo.push(Undo::RestoreVm(vm));
                }
            }
            *returned.entry(g.service_id.clone()).or_default() += g.demand;
            revoke.insert((g.cloud.clone(), g.tenant.clone(), g.consumer.clone()));
            released += 1;
        }
        for (c, t, p) in revoke {
            retry(|| fabric.revoke_access(&c, &t, &p))?;
            undo.push(Undo::Regrant {
                cloud: c,
                tenant: t,
                principal: p,
            });
        }

        // 2. Deallocate the doomed tenants everywhere, then the leaver's
        //    infrastructure sections.
        let mut teardown: Vec<(String, Vec<String>, Vec<String>)> = doomed
            .iter()
            .map(|t| {
                let tenant = &st.tenants[t];
                let clouds = tenant.clouds().into_iter().map(String::from).collect();
                let sections = tenant.sections.iter().map(|s| s.id.clone()).collect();
                (t.clone(), clouds, sections)
            })
            .collect();
        let infra_sections = st.tenants[INFRA_TENANT].sections_on(cloud);
        teardown.push((INFRA_TENANT.to_string(), vec![cloud.to_string()], infra_sections.clone()));
        for (tenant, clouds, sections) in &teardown {
            for c in clouds {
                if let Some(fp) = retry(|| fabric.release_tenant(c, tenant))? {
                    undo.push(Undo::RestoreTenant(fp));
                }
            }
            retry(|| fabric.unlink_sections(tenant, sections))?;
            undo.push(Undo::Relink {
                tenant: tenant.clone(),
                sections: sections.clone(),
            });
            for c in clouds {
                if fabric.is_configured(c, tenant) {
                    retry(|| fabric.forget_configuration(c, tenant))?;
                    undo.push(Undo::Reinform {
                        cloud: c.clone(),
                        tenant: tenant.clone(),
                    });
                }
            }
        }

        // 3. Drop the leaver's identity provider and tell it.
        if let Some(idp) = self.identity.remove_idp(cloud) {
            undo.push(Undo::Refederate(idp));
        }
        let why = if forced { "forced to leave" } else { "left" };
        retry(|| fabric.notify(cloud, &format!("{cloud} {why} {}", st.sfac.federation_id)))?;

        // 4. Ledger: tombstones, returned capacity, updated infrastructure.
        let removal = Removal {
            reason: why,
            cloud,
            at: now,
        };
        let seq = |kind, key: &str| self.registry.next_seq(kind, key);
        let mut drafts = Vec::new();
        for sid in &removed_services {
            for kind in [RecordKind::Service, RecordKind::AccessPolicy, RecordKind::SlaPolicy] {
                drafts.push(RecordDraft::json(kind, sid.as_str(), seq(kind, sid), &removal).tombstone());
            }
            let key = AdminPolicy::registry_key(sid);
            if self.registry.get_latest(&self.tokens.fam, RecordKind::AccessPolicy, &key)?.is_some() {
                drafts.push(RecordDraft::json(RecordKind::AccessPolicy, &key, seq(RecordKind::AccessPolicy, &key), &removal).tombstone());
            }
        }
        for (sid, units) in &returned {
            let mut offer = self.iwm.offer(sid)?.ok_or_else(|| FaasError::UnknownService(sid.clone()))?;
            offer.capacity += units;
            drafts.push(RecordDraft::json(RecordKind::Service, sid.as_str(), seq(RecordKind::Service, sid), &offer));
        }
        for t in &doomed {
            drafts.push(RecordDraft::json(RecordKind::TenantConfig, t.as_str(), seq(RecordKind::TenantConfig, t), &removal).tombstone());
        }
        let mut infra = st.tenants[INFRA_TENANT].clone();
        infra.sections.retain(|s| s.cloud_id != cloud);
        let mut remaining = st.active_members();
        remaining.remove(cloud);
        if infra.sections.is_empty() {
            drafts.push(
                RecordDraft::json(RecordKind::TenantConfig, INFRA_TENANT, seq(RecordKind::TenantConfig, INFRA_TENANT), &removal)
                    .tombstone(),
            );
        } else {
            infra.validate(&remaining)?;
            drafts.push(tenant_draft(&self.registry, &st.contract, &infra));
        }
        let member = &st.members[cloud];
        let record = MembershipRecord {
            cloud_id: cloud.to_string(),
            contract: st.contract.clone(),
            status: MemberStatus::Left,
            capabilities: member.capabilities.clone(),
            at: now,
            forced,
        };
        drafts.push(RecordDraft::json(RecordKind::Membership, cloud, seq(RecordKind::Membership, cloud), &record).tombstone());
        let block = self.commit(drafts)?;

        let mut st = self.state.write();
        if let Some(m) = st.members.get_mut(cloud) {
            m.status = MemberStatus::Left;
            m.left_at = Some(now);
            m.forced = forced;
        }
        for t in &doomed {
            st.tenants.remove(t);
        }
        if infra.sections.is_empty() {
            st.tenants.remove(INFRA_TENANT);
        } else {
            st.tenants.insert(INFRA_TENANT.to_string(), infra);
        }
        for sid in &removed_services {
            st.services.remove(sid);
        }
        let gone: BTreeSet<&String> = removed_services.iter().collect();
        st.grants
            .retain(|_, g| !gone.contains(&g.service_id) && home_of(&g.consumer) != cloud);
        st.offered.retain(|consumer, _| home_of(consumer) != cloud);
        for (_, list) in st.offered.values_mut() {
            list.retain(|s| !gone.contains(s));
        }
        st.notifications.retain(|_, n| n.cloud != cloud);
        Ok(LeaveReceipt {
            cloud: cloud.to_string(),
            forced,
            block,
            removed_services,
            removed_tenants: doomed.into_iter().collect(),
            released_grants: released,
        })
    }

    /// Leaves every member, then closes the agreement with a tombstone.
    pub fn terminate(&self, auth: &AuthToken) -> Result<u64, FaasError> {
        let _phase = self.gate.write();
        self.check_live()?;
        self.member_admin(auth)?;
        let members: Vec<String> = self.state.read().active_members().into_iter().collect();
        let last = members.len().saturating_sub(1);
        for (i, m) in members.iter().enumerate() {
            self.leave_inner(m, false, i == last)?;
        }
        let seq = self.registry.next_seq(RecordKind::Contract, "sfac");
        let removal = Removal {
            reason: "terminated",
            cloud: "",
            at: self.clock.now(),
        };
        let block = self.commit(vec![RecordDraft::json(RecordKind::Contract, "sfac", seq, &removal).tombstone()])?;
        self.state.write().terminated = true;
        Ok(block)
    }

    // ---- phase 4: request and select ----

    pub fn request_service(&self, auth: &AuthToken, request: &WorkloadRequest) -> Result<RequestOutcome, FaasError> {
        let _consumer_op = self.gate.read();
        self.check_live()?;
        let p = self.principal(auth)?;
        let mut request = request.clone();
        request.consumer = p.id.clone();
        let matched = self.iwm.match_offers(&request)?;
        let filtered = self.iwm.filter_authorized(&p.subject_attributes(), matched);
        let ranked = crate::iwm::optimise(&filtered.kept, request.objective)?;
        self.state.write().offered.insert(
            p.id.clone(),
            (request.demand, ranked.iter().map(|o| o.service_id.clone()).collect()),
        );
        Ok(RequestOutcome {
            offers: ranked,
            excluded: filtered.excluded,
        })
    }

    /// Executes the deployment plan for one of the last offered services
    /// and grants the consumer access to its tenant.
    pub fn select(&self, auth: &AuthToken, service_id: &str) -> Result<SelectOutcome, FaasError> {
        let _consumer_op = self.gate.read();
        self.check_live()?;
        let p = self.principal(auth)?;
        let demand = match self.state.read().offered.get(&p.id) {
            Some((demand, list)) if list.iter().any(|s| s == service_id) => *demand,
            _ => return Err(FaasError::InvalidChoice(service_id.to_string())),
        };
        let offer = self
            .iwm
            .offer(service_id)?
            .ok_or_else(|| FaasError::UnknownService(service_id.to_string()))?;
        let plan = DeploymentPlan::for_offer(&offer, &p.id, demand);
        let receipt = {
            let mut fabric = self.fabric.lock();
            self.iwm.execute(&plan, &mut fabric, |updated| {
                let seq = self.registry.next_seq(RecordKind::Service, service_id);
                self.registry
                    .append(&self.tokens.fam, vec![RecordDraft::json(RecordKind::Service, service_id, seq, updated)])
                    .map(|_| ())
                    .map_err(|e| e.to_string())
            })?
        };
        let vms: Vec<String> = receipt.resources.iter().filter(|r| !r.starts_with("grant:")).cloned().collect();
        let mut st = self.state.write();
        let grant = st.grants.entry((p.id.clone(), service_id.to_string())).or_insert_with(|| Grant {
            consumer: p.id.clone(),
            service_id: service_id.to_string(),
            cloud: offer.provider_cloud.clone(),
            tenant: offer.tenant.clone(),
            vms: Vec::new(),
            demand: 0,
        });
        grant.vms.extend(vms);
        grant.demand += demand;
        st.offered.remove(&p.id);
        Ok(SelectOutcome {
            service_id: service_id.to_string(),
            provider: offer.provider_cloud,
            resources: receipt.resources,
            remaining_capacity: receipt.remaining_capacity,
        })
    }

    // ---- phase 5: usage ----

    /// Calls a granted service through the enforcement gateway. The
    /// provider is reached over the tenant's ACCESS bus; secret-sharing
    /// services aggregate across the tenant's clouds.
    pub fn use_service(&self, auth: &AuthToken, service_id: &str, action: &str) -> Result<UseOutcome, FaasError> {
        let _consumer_op = self.gate.read();
        self.check_live()?;
        let principal = self.identity.validate(auth).ok();
        let (hosted, tenant) = {
            let st = self.state.read();
            if let Some(p) = &principal {
                if !st.grants.contains_key(&(p.id.clone(), service_id.to_string())) {
                    return Err(FaasError::NoGrant {
                        consumer: p.id.clone(),
                        service_id: service_id.to_string(),
                    });
                }
            }
            let hosted = st
                .services
                .get(service_id)
                .cloned()
                .ok_or_else(|| FaasError::UnknownService(service_id.to_string()))?;
            let tenant = st.tenants.get(&hosted.tenant).cloned();
            (hosted, tenant)
        };
        let offer = self
            .iwm
            .offer(service_id)?
            .ok_or_else(|| FaasError::UnknownService(service_id.to_string()))?;
        let mut request = request_for(BTreeMap::new(), &offer, Phase::Usage);
        request.action = action.to_string();

        let consumer = principal.as_ref().map(|p| p.id.clone()).unwrap_or_default();
        let mut provider = |req: &crate::policy::AccessRequest| -> Result<Value, String> {
            let raw = self
                .fabric
                .lock()
                .invoke_service(&hosted.provider, &hosted.tenant, service_id, &consumer, &req.action)
                .map_err(|e| e.to_string())?;
            let backend: ServiceBackend = serde_json::from_value(raw).map_err(|e| e.to_string())?;
            match backend {
                ServiceBackend::Static { data } => Ok(data),
                ServiceBackend::Smc { op, inputs } => {
                    let tenant = tenant.as_ref().ok_or("tenant vanished")?;
                    let clouds: Vec<&str> = tenant.clouds().into_iter().collect();
                    let deployment = SmcDeployment::new(&tenant.id, &clouds).map_err(|e| e.to_string())?;
                    let run = smc_aggregate(&deployment, &inputs, op, &mut *self.rng.lock()).map_err(|e| e.to_string())?;
                    Ok(serde_json::to_value(run.result).expect("result serializes"))
                }
            }
        };
        let outcome = self.peg.enforce(auth, request, &*self.monitor, &mut provider)?;
        if outcome.status == EnforcementStatus::Denied {
            return Err(FaasError::Denied(outcome.decision));
        }
        Ok(UseOutcome {
            status: outcome.status,
            result: outcome.result,
            decision: outcome.decision,
            event_block: outcome.event_block,
        })
    }

    // ---- monitoring, forced leave, audit ----

    /// Timed-alert rule: the first scan that sees a member's SLA violated
    /// notifies it; if the violation is still unbroken `grace` later, the
    /// member is forced out.
    pub fn forced_leave_scan(&self) -> Vec<ScanAction> {
        let _phase = self.gate.write();
        if self.state.read().terminated {
            return Vec::new();
        }
        let now = self.clock.now();
        let (members, services, default_grace) = {
            let st = self.state.read();
            (st.active_members(), st.services.clone(), st.sfac.grace)
        };
        let mut actions = Vec::new();
        for member in members {
            let mut force = false;
            for s in services.values().filter(|s| s.provider == member) {
                let policies = match self.sla_policies(&s.service_id) {
                    Ok(p) => p,
                    Err(e) => {
                        self.operational(&member, &format!("SLA policies of {} unreadable: {e}", s.service_id));
                        continue;
                    }
                };
                for p in policies {
                    let key = p.evidence_key();
                    let grace = p.grace.unwrap_or(default_grace);
                    let status = match self.monitor.sla_check(&p, now) {
                        Ok(s) => s,
                        Err(e) => {
                            self.operational(&member, &format!("SLA check of {key} failed: {e}"));
                            continue;
                        }
                    };
                    let mut st = self.state.write();
                    match status {
                        SlaStatus::Violating { since } => {
                            let fresh = match st.notifications.get(&key) {
                                None => true,
                                Some(n) => since > n.since,
                            };
                            if fresh {
                                st.notifications.insert(
                                    key.clone(),
                                    Notification {
                                        cloud: member.clone(),
                                        notified_at: now,
                                        since,
                                    },
                                );
                                drop(st);
                                let _ = self
                                    .fabric
                                    .lock()
                                    .notify(&member, &format!("SLA {key} violated since {since}; grace {grace} ms"));
                                actions.push(ScanAction::Notified {
                                    cloud: member.clone(),
                                    key,
                                    since,
                                });
                            } else if now - st.notifications[&key].notified_at >= grace {
                                force = true;
                            }
                        }
                        SlaStatus::Compliant | SlaStatus::NoEvidence => {
                            if st.notifications.remove(&key).is_some() {
                                actions.push(ScanAction::Cleared {
                                    cloud: member.clone(),
                                    key,
                                });
                            }
                        }
                    }
                }
            }
            if force {
                match self.leave_inner(&member, true, false) {
                    Ok(_) => {
                        self.alerts.raise(
                            AlertDraft::new(
                                AlertKind::SlaViolation,
                                Severity::Critical,
                                &member,
                                format!("{member} forced to leave after SLA violation outlasted the grace period"),
                            )
                            .with_fingerprint(format!("FORCED_LEAVE|{member}|{now}")),
                        );
                        actions.push(ScanAction::ForcedLeave { cloud: member });
                    }
                    Err(e) => actions.push(ScanAction::LeaveFailed {
                        cloud: member,
                        reason: e.to_string(),
                    }),
                }
            }
        }
        actions
    }

    fn operational(&self, subject: &str, message: &str) {
        self.alerts.raise(AlertDraft::new(AlertKind::Operational, Severity::Warn, subject, message));
    }

    /// Re-decides every logged event; returns the number of mismatches.
    pub fn revalidate(&self) -> Result<usize, FaasError> {
        Ok(self.monitor.revalidate_all()?)
    }

    /// Offline audit over the access log; findings go to the alert feed.
    pub fn audit(&self, train_until: Option<Millis>) -> Result<(AuditReport, usize), FaasError> {
        let events: Vec<AuditEvent> = self
            .monitor
            .logged_events()?
            .iter()
            .map(|(_, e)| AuditEvent::from(e))
            .collect();
        let report = run_audit(&events, train_until, DEFAULT_THETA, DEFAULT_GAP, &DetectorConfig::default());
        let raised = publish_findings(&report.findings, &self.alerts);
        Ok((report, raised))
    }

    /// Checks the tenant invariants, the enrolment evidence of every member,
    /// and that cross-tenant calls only went over ACCESS bus endpoints.
    pub fn check_invariants(&self) -> Result<(), String> {
        let st = self.state.read();
        let members = st.active_members();
        for t in st.tenants.values() {
            t.validate(&members).map_err(|e| e.to_string())?;
        }
        if !st.terminated && !st.tenants.contains_key(INFRA_TENANT) {
            return Err("no infrastructure tenant".into());
        }
        for m in st.members.values() {
            let history = self
                .registry
                .get_history(&self.tokens.fam, RecordKind::Membership, &m.cloud_id)
                .map_err(|e| e.to_string())?;
            let enrolled = history.iter().any(|r| {
                r.decode::<MembershipRecord>()
                    .is_ok_and(|rec| rec.status == MemberStatus::Active && rec.contract == st.contract)
            });
            if !enrolled {
                return Err(format!("{} has no enrolment evidence", m.cloud_id));
            }
        }
        let fabric = self.fabric.lock();
        if let Some(r) = fabric
            .log()
            .iter()
            .find(|r| r.op == "invoke_service" && !r.endpoint.starts_with("access:"))
        {
            return Err(format!("call {} bypassed the ACCESS bus", r.seq));
        }
        if let Some(c) = fabric.clouds().find(|c| c.channel_open) {
            return Err(format!("setup channel to {} left open", c.id));
        }
        Ok(())
    }
}

fn home_of(principal: &str) -> &str {
    principal.rsplit_once('@').map_or("", |(_, c)| c)
}

fn first_free_section(fabric: &Fabric, cloud: &str) -> Result<Section, FaasError> {
    fabric
        .cloud(cloud)
        .ok_or_else(|| FaasError::Sim(SimError::UnknownCloud(cloud.to_string())))?
        .free_sections()
        .first()
        .map(|s| (*s).clone())
        .ok_or_else(|| FaasError::NoFreeSection {
            cloud: cloud.to_string(),
        })
}

fn tenant_draft(registry: &Registry, contract: &str, tenant: &Tenant) -> RecordDraft {
    let record = TenantRecord {
        contract: contract.to_string(),
        tenant: tenant.clone(),
    };
    RecordDraft::json(
        RecordKind::TenantConfig,
        &tenant.id,
        registry.next_seq(RecordKind::TenantConfig, &tenant.id),
        &record,
    )
}

/// Runs a deallocation call up to [`LEAVE_ATTEMPTS`] times. Missing
/// resources count as already released.
fn retry<T>(mut call: impl FnMut() -> Result<T, SimError>) -> Result<Option<T>, FaasError> {
    let mut last = None;
    for _ in 0..LEAVE_ATTEMPTS {
        match call() {
            Ok(v) => return Ok(Some(v)),
            Err(SimError::UnknownVm(_) | SimError::UnknownTenant { .. } | SimError::NoGrant { .. }) => return Ok(None),
            Err(e) => last = Some(e),
        }
    }
    Err(FaasError::DeallocationFailed(last.expect("at least one attempt").to_string()))
}

#[cfg(test)]
mod tests;
