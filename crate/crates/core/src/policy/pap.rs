//! Policy administration point: who may amend a service's policies, and
//! which parts of them.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::Policy;
use crate::identity::{Principal, PrincipalKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyField {
    Target,
    Effect,
    Obligations,
    /// Adding or removing whole policies.
    Policies,
}

/// Set by the owning member cloud's administrator. Stored as an
/// ACCESS_POLICY record under `admin:<service_id>`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdminPolicy {
    pub service_id: String,
    /// Principal ids (`user@cloud`) or principal kinds (`TENANT_ADMIN`).
    pub allowed_editors: BTreeSet<String>,
    pub editable_fields: BTreeSet<PolicyField>,
}

impl AdminPolicy {
    pub fn registry_key(service_id: &str) -> String {
        format!("admin:{service_id}")
    }

    pub fn admits(&self, editor: &Principal) -> bool {
        self.allowed_editors.contains(&editor.id) || self.allowed_editors.contains(editor.kind.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum PapVerdict {
    Allow,
    Deny { reason: String },
}

/// Fields that differ between two versions, matching policies by id.
pub fn changed_fields(old: &[Policy], new: &[Policy]) -> BTreeSet<PolicyField> {
    let old_by_id: BTreeMap<&str, &Policy> = old.iter().map(|p| (p.id.as_str(), p)).collect();
    let new_by_id: BTreeMap<&str, &Policy> = new.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut out = BTreeSet::new();
    if old_by_id.keys().ne(new_by_id.keys()) {
        out.insert(PolicyField::Policies);
    }
    for (id, n) in &new_by_id {
        if let Some(o) = old_by_id.get(id) {
            if o.target != n.target {
                out.insert(PolicyField::Target);
            }
            if o.effect != n.effect {
                out.insert(PolicyField::Effect);
            }
            if o.obligations != n.obligations {
                out.insert(PolicyField::Obligations);
            }
        }
    }
    out
}

/// The owning cloud's administrator may always edit; anyone else needs an
/// admin policy naming them and covering every changed field.
pub fn pap_check_amendment(
    editor: &Principal,
    owner_cloud: &str,
    admin: Option<&AdminPolicy>,
    old: &[Policy],
    new: &[Policy],
) -> PapVerdict {
    if editor.kind == PrincipalKind::MemberCloudAdmin && editor.home_cloud == owner_cloud {
        return PapVerdict::Allow;
    }
    let Some(admin) = admin else {
        return PapVerdict::Deny {
            reason: format!("only the administrator of {owner_cloud} may edit these policies"),
        };
    };
    if !admin.admits(editor) {
        return PapVerdict::Deny {
            reason: format!("{} is not an allowed editor of {}", editor.id, admin.service_id),
        };
    }
    let outside: Vec<PolicyField> = changed_fields(old, new)
        .difference(&admin.editable_fields)
        .copied()
        .collect();
    if outside.is_empty() {
        PapVerdict::Allow
    } else {
        let names: Vec<String> = outside
            .iter()
            .map(|f| serde_json::to_value(f).expect("field serializes").as_str().unwrap_or_default().to_string())
            .collect();
        PapVerdict::Deny {
            reason: format!("fields not editable by {}: {}", editor.id, names.join(", ")),
        }
    }
}
