//! Workload brokerage: match published offers against a request, keep the
//! ones the consumer may use, rank them, and execute a deployment plan on
//! the chosen provider with compensating rollback.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::identity::CryptoToken;
use crate::policy::peg::Peg;
use crate::policy::{AccessRequest, Decision, Phase};
use crate::registry::{RecordKind, Registry, RegistryError};
use crate::simcloud::{Fabric, SimError};

/// Action name used for brokered service requests and their usage.
pub const USE_ACTION: &str = "use";

#[derive(Debug, Error)]
pub enum IwmError {
    #[error("no candidate offers")]
    NoCandidates,
    #[error("offer {service_id} has {available} units left, {requested} requested")]
    CapacityExhausted {
        service_id: String,
        requested: u64,
        available: u64,
    },
    #[error("adapter failure: {0}")]
    AdapterFailure(SimError),
    #[error("capacity update failed: {0}")]
    CommitFailed(String),
    #[error("invalid workload request: {0}")]
    InvalidRequest(String),
    #[error("invalid offer {service_id}: {reason}")]
    InvalidOffer { service_id: String, reason: String },
    #[error("offer {0} is no longer published")]
    UnknownOffer(String),
    #[error("stored offer does not decode: {0}")]
    Decode(String),
    #[error(transparent)]
    Registry(#[from] RegistryError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServiceOffer {
    pub service_id: String,
    pub provider_cloud: String,
    pub tenant: String,
    pub capacity: u64,
    pub unit_cost: f64,
    pub availability: f64,
    #[serde(default)]
    pub characteristics: BTreeMap<String, String>,
}

impl ServiceOffer {
    pub fn check(&self) -> Result<(), IwmError> {
        let bad = |reason: &str| {
            Err(IwmError::InvalidOffer {
                service_id: self.service_id.clone(),
                reason: reason.to_string(),
            })
        };
        if self.service_id.is_empty() {
            return bad("empty service id");
        }
        if !(self.unit_cost.is_finite() && self.unit_cost >= 0.0) {
            return bad("unit_cost must be a non-negative number");
        }
        if !(0.0..=1.0).contains(&self.availability) {
            return bad("availability must lie in [0, 1]");
        }
        Ok(())
    }

    /// Resource attributes the access-control engine sees for this offer.
    /// Characteristics come first so the identifying fields cannot be
    /// shadowed by a characteristic of the same name.
    pub fn resource_attributes(&self) -> BTreeMap<String, String> {
        let mut attrs = self.characteristics.clone();
        attrs.insert("service_id".into(), self.service_id.clone());
        attrs.insert("provider_cloud".into(), self.provider_cloud.clone());
        attrs.insert("tenant".into(), self.tenant.clone());
        attrs
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Objective {
    MinCost,
    MaxAvailability,
    Weighted { w_cost: f64, w_avail: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkloadRequest {
    pub consumer: String,
    #[serde(default)]
    pub required: BTreeMap<String, String>,
    pub demand: u64,
    pub objective: Objective,
}

impl WorkloadRequest {
    pub fn check(&self) -> Result<(), IwmError> {
        if self.demand == 0 {
            return Err(IwmError::InvalidRequest("demand must be positive".into()));
        }
        if let Objective::Weighted { w_cost, w_avail } = self.objective {
            let ok = |w: f64| w.is_finite() && w >= 0.0;
            if !ok(w_cost) || !ok(w_avail) {
                return Err(IwmError::InvalidRequest("weights must be non-negative".into()));
            }
            if w_cost == 0.0 && w_avail == 0.0 {
                return Err(IwmError::InvalidRequest("weights must not both be zero".into()));
            }
        }
        Ok(())
    }
}

/// The request-phase access request for `offer`.
pub fn request_for(subject: BTreeMap<String, String>, offer: &ServiceOffer, phase: Phase) -> AccessRequest {
    AccessRequest::new(subject, USE_ACTION, offer.resource_attributes(), phase)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PlanAction {
    ProvisionVm { cloud: String, size: u64, tenant: String, owner: String },
    OpenAccess { cloud: String, tenant: String, principal: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeploymentPlan {
    pub offer: ServiceOffer,
    pub consumer: String,
    pub demand: u64,
    pub actions: Vec<PlanAction>,
}

impl DeploymentPlan {
    /// One VM of `demand` units in the provider tenant, then access for the consumer.
    pub fn for_offer(offer: &ServiceOffer, consumer: &str, demand: u64) -> Self {
        Self {
            offer: offer.clone(),
            consumer: consumer.to_string(),
            demand,
            actions: vec![
                PlanAction::ProvisionVm {
                    cloud: offer.provider_cloud.clone(),
                    size: demand,
                    tenant: offer.tenant.clone(),
                    owner: consumer.to_string(),
                },
                PlanAction::OpenAccess {
                    cloud: offer.provider_cloud.clone(),
                    tenant: offer.tenant.clone(),
                    principal: consumer.to_string(),
                },
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Receipt {
    pub service_id: String,
    pub consumer: String,
    /// VM ids and access grants (`grant:<tenant>:<principal>`) created.
    pub resources: Vec<String>,
    pub remaining_capacity: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub service_id: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Filtered {
    pub kept: Vec<ServiceOffer>,
    pub excluded: Vec<Exclusion>,
}

/// Ranks candidates by the objective. Ties go to the smaller
/// `provider_cloud`, then the smaller `service_id`.
pub fn optimise(candidates: &[ServiceOffer], objective: Objective) -> Result<Vec<ServiceOffer>, IwmError> {
    if candidates.is_empty() {
        return Err(IwmError::NoCandidates);
    }
    let scores = scores(candidates, objective);
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .unwrap_or(Ordering::Equal)
            .then_with(|| tie_break(&candidates[a], &candidates[b]))
    });
    Ok(order.into_iter().map(|i| candidates[i].clone()).collect())
}

/// Score per candidate; lower ranks first.
pub fn scores(candidates: &[ServiceOffer], objective: Objective) -> Vec<f64> {
    match objective {
        Objective::MinCost => candidates.iter().map(|o| o.unit_cost).collect(),
        Objective::MaxAvailability => candidates.iter().map(|o| -o.availability).collect(),
        Objective::Weighted { w_cost, w_avail } => {
            let max = candidates.iter().map(|o| o.unit_cost).fold(0.0, f64::max);
            candidates
                .iter()
                .map(|o| {
                    let norm = if max > 0.0 { o.unit_cost / max } else { 0.0 };
                    w_cost * norm - w_avail * o.availability
                })
                .collect()
        }
    }
}

fn tie_break(a: &ServiceOffer, b: &ServiceOffer) -> Ordering {
    a.provider_cloud
        .cmp(&b.provider_cloud)
        .then_with(|| a.service_id.cmp(&b.service_id))
}

/// The brokerage component. Read paths are shared; `execute` needs the
/// fabric exclusively, which serializes capacity updates.
#[derive(Clone, Debug)]
pub struct Iwm {
    registry: Arc<Registry>,
    token: CryptoToken,
    peg: Peg,
}

impl Iwm {
    pub fn new(registry: Arc<Registry>, token: CryptoToken, peg: Peg) -> Self {
        Self { registry, token, peg }
    }

    /// All live offers in service-id order.
    pub fn offers(&self) -> Result<Vec<ServiceOffer>, IwmError> {
        let mut out = Vec::new();
        for key in self.registry.live_keys(&self.token, RecordKind::Service)? {
            if let Some(offer) = self.offer(&key)? {
                out.push(offer);
            }
        }
        Ok(out)
    }

    pub fn offer(&self, service_id: &str) -> Result<Option<ServiceOffer>, IwmError> {
        match self.registry.get_latest(&self.token, RecordKind::Service, service_id)? {
            Some(rec) => rec.decode().map(Some).map_err(|e| IwmError::Decode(e.to_string())),
            None => Ok(None),
        }
    }

    /// Offers whose characteristics include the required ones and whose
    /// capacity covers the demand.
    pub fn match_offers(&self, request: &WorkloadRequest) -> Result<Vec<ServiceOffer>, IwmError> {
        request.check()?;
        Ok(self
            .offers()?
            .into_iter()
            .filter(|o| o.capacity >= request.demand)
            .filter(|o| {
                request
                    .required
                    .iter()
                    .all(|(k, v)| o.characteristics.get(k) == Some(v))
            })
            .collect())
    }

    /// Keeps the candidates whose request-phase decision is PERMIT, in order.
    pub fn filter_authorized(&self, subject: &BTreeMap<String, String>, candidates: Vec<ServiceOffer>) -> Filtered {
        let mut kept = Vec::new();
        let mut excluded = Vec::new();
        for offer in candidates {
            let request = request_for(subject.clone(), &offer, Phase::Request);
            match self.peg.decide_for(subject.clone(), request) {
                Ok(d) if d.is_permit() => kept.push(offer),
                Ok(d) => excluded.push(Exclusion {
                    service_id: offer.service_id,
                    reason: describe(&d),
                }),
                Err(e) => excluded.push(Exclusion {
                    service_id: offer.service_id,
                    reason: e.to_string(),
                }),
            }
        }
        Filtered { kept, excluded }
    }

    /// Applies every plan action or none. `commit` persists the reduced
    /// capacity; if it fails, the actions are rolled back too.
    pub fn execute(
        &self,
        plan: &DeploymentPlan,
        fabric: &mut Fabric,
        commit: impl FnOnce(&ServiceOffer) -> Result<(), String>,
    ) -> Result<Receipt, IwmError> {
        let id = &plan.offer.service_id;
        let current = self.offer(id)?.ok_or_else(|| IwmError::UnknownOffer(id.clone()))?;
        if current.capacity < plan.demand {
            return Err(IwmError::CapacityExhausted {
                service_id: id.clone(),
                requested: plan.demand,
                available: current.capacity,
            });
        }

        // (action, resource id, whether rollback must undo it)
        let mut done: Vec<(PlanAction, String, bool)> = Vec::new();
        for action in &plan.actions {
            let applied = match action {
                PlanAction::ProvisionVm { cloud, size, tenant, owner } => {
                    fabric.create_vm(cloud, *size, tenant, owner).map(|id| (id, true))
                }
                PlanAction::OpenAccess { cloud, tenant, principal } => fabric
                    .grant_access(cloud, tenant, principal)
                    .map(|new| (format!("grant:{tenant}:{principal}"), new)),
            };
            match applied {
                Ok((resource, undo)) => done.push((action.clone(), resource, undo)),
                Err(e) => {
                    rollback(fabric, &done);
                    return Err(IwmError::AdapterFailure(e));
                }
            }
        }

        let mut updated = current;
        updated.capacity -= plan.demand;
        if let Err(e) = commit(&updated) {
            rollback(fabric, &done);
            return Err(IwmError::CommitFailed(e));
        }
        Ok(Receipt {
            service_id: id.clone(),
            consumer: plan.consumer.clone(),
            resources: done.into_iter().map(|(_, r, _)| r).collect(),
            remaining_capacity: updated.capacity,
        })
    }
}

/// Undoes applied actions newest first, leaving pre-existing grants alone.
/// Compensation is best effort: a failing undo is logged by the fabric and
/// skipped.
fn rollback(fabric: &mut Fabric, done: &[(PlanAction, String, bool)]) {
    for (action, resource, _) in done.iter().rev().filter(|d| d.2) {
        let _ = match action {
            PlanAction::ProvisionVm { cloud, .. } => fabric.destroy_vm(cloud, resource).map(|_| ()),
            PlanAction::OpenAccess { cloud, tenant, principal } => fabric.revoke_access(cloud, tenant, principal),
        };
    }
}

fn describe(d: &Decision) -> String {
    if d.matched_policy_ids.is_empty() {
        format!("{:?}: no applicable policy", d.outcome)
    } else {
        format!("{:?} by {}", d.outcome, d.matched_policy_ids.join(", "))
    }
}
