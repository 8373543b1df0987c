//! Federation data model: the agreement contract, member clouds, tenants
//! and their structural invariants, and the ledger payloads that record them.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Millis;
use crate::simcloud::{Capability, SectionSpec};

/// An atomic container of physical resources owned by one cloud.
pub type Section = SectionSpec;

pub const INFRA_TENANT: &str = "infra";

/// The federation agreement. Stored as the genesis CONTRACT payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sfac {
    pub federation_id: String,
    /// Founding members.
    pub members: Vec<String>,
    /// Infrastructure assets each member commits, in resource units.
    #[serde(default)]
    pub assets: BTreeMap<String, u64>,
    /// Services the members declare they will publish.
    #[serde(default)]
    pub services: Vec<String>,
    /// High-level SLA appointments, free text.
    #[serde(default)]
    pub sla: Vec<String>,
    /// How long an SLA violation may persist after notification before
    /// the member is forced to leave.
    pub grace: Millis,
    /// Whether clouds may join after creation.
    #[serde(default = "yes")]
    pub open: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MemberStatus {
    Active,
    Leaving,
    Left,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemberCloud {
    pub cloud_id: String,
    pub capabilities: BTreeSet<Capability>,
    pub status: MemberStatus,
    pub joined_at: Millis,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub left_at: Option<Millis>,
    #[serde(default)]
    pub forced: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TenantKind {
    Infrastructure,
    OpStandard,
    OpSegregated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum InfraService {
    Core,
    Network,
    Access,
}

impl InfraService {
    pub fn container(self, tenant: &str) -> String {
        let name = match self {
            InfraService::Core => "core",
            InfraService::Network => "network",
            InfraService::Access => "access",
        };
        format!("{name}@{tenant}")
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("tenant invariant violated: {0}")]
pub struct InvariantViolation(pub String);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tenant {
    pub id: String,
    pub kind: TenantKind,
    pub sections: Vec<Section>,
    /// Owning cloud; `None` only for the infrastructure tenant.
    pub owner: Option<String>,
    pub services: BTreeSet<InfraService>,
}

fn violation<T>(msg: impl Into<String>) -> Result<T, InvariantViolation> {
    Err(InvariantViolation(msg.into()))
}

impl Tenant {
    /// The single infrastructure tenant: at least one section from every
    /// member and none from anyone else.
    pub fn infrastructure(sections: Vec<Section>, members: &BTreeSet<String>) -> Result<Self, InvariantViolation> {
        let t = Self {
            id: INFRA_TENANT.into(),
            kind: TenantKind::Infrastructure,
            sections,
            owner: None,
            services: [InfraService::Core, InfraService::Network, InfraService::Access].into(),
        };
        t.validate(members)?;
        Ok(t)
    }

    /// One section, on the owner's cloud.
    pub fn segregated(id: &str, owner: &str, sections: Vec<Section>) -> Result<Self, InvariantViolation> {
        let t = Self {
            id: id.into(),
            kind: TenantKind::OpSegregated,
            sections,
            owner: Some(owner.into()),
            services: [InfraService::Access].into(),
        };
        t.validate_operational()?;
        Ok(t)
    }

    /// One or more sections, possibly on several clouds, one owner.
    pub fn standard(id: &str, owner: &str, sections: Vec<Section>) -> Result<Self, InvariantViolation> {
        let t = Self {
            id: id.into(),
            kind: TenantKind::OpStandard,
            sections,
            owner: Some(owner.into()),
            services: [InfraService::Access].into(),
        };
        t.validate_operational()?;
        Ok(t)
    }

    pub fn new(id: &str, kind: TenantKind, owner: &str, sections: Vec<Section>) -> Result<Self, InvariantViolation> {
        match kind {
            TenantKind::OpSegregated => Self::segregated(id, owner, sections),
            TenantKind::OpStandard => Self::standard(id, owner, sections),
            TenantKind::Infrastructure => violation("the infrastructure tenant is created with the federation"),
        }
    }

    pub fn clouds(&self) -> BTreeSet<&str> {
        self.sections.iter().map(|s| s.cloud_id.as_str()).collect()
    }

    pub fn sections_on(&self, cloud: &str) -> Vec<String> {
        self.sections
            .iter()
            .filter(|s| s.cloud_id == cloud)
            .map(|s| s.id.clone())
            .collect()
    }

    /// May host secret-sharing services: sections on at least three clouds.
    pub fn smc_capable(&self) -> bool {
        self.clouds().len() >= crate::smc::MIN_SERVERS
    }

    fn validate_common(&self) -> Result<(), InvariantViolation> {
        if self.id.is_empty() {
            return violation("empty tenant id");
        }
        if self.sections.is_empty() {
            return violation(format!("{} has no sections", self.id));
        }
        let mut seen = BTreeSet::new();
        for s in &self.sections {
            if !seen.insert(&s.id) {
                return violation(format!("section {} listed twice", s.id));
            }
        }
        Ok(())
    }

    fn validate_operational(&self) -> Result<(), InvariantViolation> {
        self.validate_common()?;
        if self.id == INFRA_TENANT {
            return violation(format!("{INFRA_TENANT} is reserved"));
        }
        let Some(owner) = &self.owner else {
            return violation(format!("{} has no owner", self.id));
        };
        if self.services != BTreeSet::from([InfraService::Access]) {
            return violation(format!("{} must carry ACCESS only", self.id));
        }
        match self.kind {
            TenantKind::OpSegregated => {
                if self.sections.len() != 1 {
                    return violation(format!(
                        "segregated tenant {} needs exactly one section, has {}",
                        self.id,
                        self.sections.len()
                    ));
                }
                if &self.sections[0].cloud_id != owner {
                    return violation(format!(
                        "segregated tenant {} section {} belongs to {}, not owner {owner}",
                        self.id, self.sections[0].id, self.sections[0].cloud_id
                    ));
                }
                Ok(())
            }
            TenantKind::OpStandard => Ok(()),
            TenantKind::Infrastructure => violation("operational check on the infrastructure tenant"),
        }
    }

    /// Full structural check; `members` are the ACTIVE member ids.
    pub fn validate(&self, members: &BTreeSet<String>) -> Result<(), InvariantViolation> {
        match self.kind {
            TenantKind::Infrastructure => {
                self.validate_common()?;
                if self.owner.is_some() {
                    return violation("the infrastructure tenant has no owner");
                }
                let all = BTreeSet::from([InfraService::Core, InfraService::Network, InfraService::Access]);
                if self.services != all {
                    return violation("the infrastructure tenant carries CORE, NETWORK and ACCESS");
                }
                if self.sections.len() < members.len() {
                    return violation(format!(
                        "{} sections for {} members",
                        self.sections.len(),
                        members.len()
                    ));
                }
                let clouds = self.clouds();
                if let Some(m) = members.iter().find(|m| !clouds.contains(m.as_str())) {
                    return violation(format!("member {m} has no infrastructure section"));
                }
                if let Some(c) = clouds.iter().find(|c| !members.contains(**c)) {
                    return violation(format!("infrastructure section on non-member {c}"));
                }
                Ok(())
            }
            _ => {
                self.validate_operational()?;
                let owner = self.owner.as_deref().unwrap_or_default();
                if !members.contains(owner) {
                    return violation(format!("owner {owner} of {} is not an active member", self.id));
                }
                Ok(())
            }
        }
    }
}

/// MEMBERSHIP payload, keyed by cloud id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MembershipRecord {
    pub cloud_id: String,
    /// Hex hash of the genesis block holding the agreement.
    pub contract: String,
    pub status: MemberStatus,
    pub capabilities: BTreeSet<Capability>,
    pub at: Millis,
    #[serde(default)]
    pub forced: bool,
}

/// TENANT_CONFIG payload, keyed by tenant id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TenantRecord {
    pub contract: String,
    pub tenant: Tenant,
}
