//! Simulated member clouds plus the federation-side endpoints (deployment
//! manager, network service, tenant bus), with deterministic fault injection
//! and a complete call log.
//!
//! Every operation appends exactly one [`CallRecord`], failed ones included.
//! Clouds hold a resource pool that only VMs draw from, so
//! `pool + Σ vm sizes` is constant per cloud. Section allocations, channels,
//! containers and grants are bookkeeping.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Debug;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::clock::Millis;
use crate::identity::{IdpDescriptor, PrincipalKind};

pub const DEPLOYMENT_MANAGER: &str = "deployment-manager";
pub const NETWORK: &str = "network";

pub fn bus_endpoint(tenant: &str) -> String {
    format!("access:{tenant}")
}

#[derive(Clone, Debug, Error, PartialEq, Eq, Serialize, Deserialize)]
pub enum SimError {
    #[error("unknown cloud {0}")]
    UnknownCloud(String),
    #[error("{cloud} has {available} units, {requested} requested")]
    CapacityExhausted { cloud: String, requested: u64, available: u64 },
    #[error("unknown vm {0}")]
    UnknownVm(String),
    #[error("vm {0} already exists")]
    DuplicateVm(String),
    #[error("setup channel to {0} is already open")]
    ChannelAlreadyOpen(String),
    #[error("no setup channel to {0}")]
    NoChannel(String),
    #[error("injected fault on {endpoint}.{op} call #{ordinal}")]
    InjectedFault { endpoint: String, op: String, ordinal: u64 },
    #[error("bad credential")]
    BadCredential,
    #[error("section {0} is unknown or already allocated")]
    SectionUnavailable(String),
    #[error("{cloud} hosts nothing for tenant {tenant}")]
    UnknownTenant { cloud: String, tenant: String },
    #[error("{0} is unreachable")]
    Unreachable(String),
    #[error("no grant for {principal} on {tenant}")]
    NoGrant { tenant: String, principal: String },
    #[error("service {0} is not hosted")]
    UnknownService(String),
    #[error("container {container} is not deployed on {cloud}")]
    UnknownContainer { cloud: String, container: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Capability {
    ResourceMgmt,
    VmMgmt,
    Identity,
}

impl Capability {
    pub const ALL: [Capability; 3] = [Capability::ResourceMgmt, Capability::VmMgmt, Capability::Identity];
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SectionSpec {
    pub id: String,
    pub cloud_id: String,
    pub units: u64,
    pub network: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vm {
    pub id: String,
    pub cloud_id: String,
    pub size: u64,
    pub tenant: String,
    pub owner: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assertion {
    pub cloud_id: String,
    pub user_id: String,
    pub kind: PrincipalKind,
}

/// Everything a cloud held for one tenant, enough to put it back.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TenantFootprint {
    pub cloud_id: String,
    pub tenant: String,
    pub sections: Vec<String>,
    pub vms: Vec<Vm>,
    pub containers: Vec<String>,
    pub grants: Vec<String>,
    pub services: BTreeMap<String, Value>,
}

/// State of one simulated cloud.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimCloud {
    pub id: String,
    pub pool: u64,
    pub capabilities: BTreeSet<Capability>,
    #[serde(skip)]
    pub idp: Option<IdpDescriptor>,
    pub sections: Vec<SectionSpec>,
    /// section id → tenant
    pub allocations: BTreeMap<String, String>,
    pub vms: BTreeMap<String, Vm>,
    pub channel_open: bool,
    /// section id → tenant it is wired into
    pub connected: BTreeMap<String, String>,
    /// Containers pulled from the hub, named `<service>@<tenant>`.
    pub containers: BTreeSet<String>,
    /// (tenant, principal id)
    pub grants: BTreeSet<(String, String)>,
    /// service id → (tenant, result document)
    pub services: BTreeMap<String, (String, Value)>,
    pub reachable: bool,
}

fn default_pool() -> u64 {
    100
}

fn default_sections() -> usize {
    3
}

fn default_units() -> u64 {
    4
}

fn service_user() -> PrincipalKind {
    PrincipalKind::ServiceUser
}

/// A local account in a cloud description.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSpec {
    pub user: String,
    pub secret: String,
    #[serde(default = "service_user")]
    pub kind: PrincipalKind,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
}

/// Serializable description of a simulated cloud.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CloudSpec {
    pub id: String,
    #[serde(default = "default_pool")]
    pub pool: u64,
    #[serde(default = "default_sections")]
    pub sections: usize,
    #[serde(default = "default_units")]
    pub units: u64,
    /// All capabilities when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capabilities: Option<Vec<Capability>>,
    #[serde(default)]
    pub users: Vec<UserSpec>,
}

impl CloudSpec {
    pub fn new(id: &str) -> Self {
        Self {
            id: id.to_string(),
            pool: default_pool(),
            sections: default_sections(),
            units: default_units(),
            capabilities: None,
            users: Vec::new(),
        }
    }

    pub fn with_user(mut self, user: &str, secret: &str, kind: PrincipalKind) -> Self {
        self.users.push(UserSpec {
            user: user.to_string(),
            secret: secret.to_string(),
            kind,
            attributes: BTreeMap::new(),
        });
        self
    }

    /// Builds the cloud; `seed` drives the credential salts.
    pub fn build(&self, seed: u64) -> SimCloud {
        let d = crate::digest::Digest::of(self.id.as_bytes()).0;
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ u64::from_be_bytes(d[..8].try_into().expect("8 bytes")));
        let mut idp = IdpDescriptor::new(&self.id);
        for u in &self.users {
            idp.add_user(&u.user, &u.secret, u.kind, u.attributes.clone(), &mut rng);
        }
        let mut cloud = SimCloud::new(&self.id, self.pool)
            .with_idp(idp)
            .with_sections(self.sections, self.units);
        if let Some(caps) = &self.capabilities {
            cloud = cloud.with_capabilities(caps);
        }
        cloud
    }
}

impl SimCloud {
    pub fn new(id: &str, pool: u64) -> Self {
        Self {
            id: id.to_string(),
            pool,
            capabilities: Capability::ALL.into_iter().collect(),
            idp: None,
            sections: Vec::new(),
            allocations: BTreeMap::new(),
            vms: BTreeMap::new(),
            channel_open: false,
            connected: BTreeMap::new(),
            containers: BTreeSet::new(),
            grants: BTreeSet::new(),
            services: BTreeMap::new(),
            reachable: true,
        }
    }

    pub fn with_idp(mut self, idp: IdpDescriptor) -> Self {
        self.idp = Some(idp);
        self
    }

    /// Adds `count` sections of `units` each, ids `<cloud>-s<n>`.
    pub fn with_sections(mut self, count: usize, units: u64) -> Self {
        let start = self.sections.len();
        for n in start..start + count {
            self.sections.push(SectionSpec {
                id: format!("{}-s{}", self.id, n + 1),
                cloud_id: self.id.clone(),
                units,
                network: format!("10.{}.{}.0/24", self.id.len() % 256, n + 1),
            });
        }
        self
    }

    pub fn with_capabilities(mut self, caps: &[Capability]) -> Self {
        self.capabilities = caps.iter().copied().collect();
        self
    }

    pub fn vm_total(&self) -> u64 {
        self.vms.values().map(|v| v.size).sum()
    }

    pub fn free_sections(&self) -> Vec<&SectionSpec> {
        self.sections
            .iter()
            .filter(|s| !self.allocations.contains_key(&s.id))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub seq: u64,
    pub endpoint: String,
    pub op: String,
    pub args: Value,
    pub ok: bool,
    pub detail: String,
    pub latency: Millis,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultPlan {
    pub endpoint: String,
    pub op: String,
    /// First failing invocation, counted from 1 since the cloud started.
    pub first: u64,
    /// Number of consecutive failing invocations.
    pub count: u64,
}

/// Comparable view of all resource state, used to check that aborted
/// phases leave nothing behind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FabricSnapshot {
    pub clouds: BTreeMap<String, SimCloud>,
    pub dm_configured: BTreeSet<(String, String)>,
    pub links: BTreeMap<String, BTreeSet<String>>,
}

/// The clouds and federation-side endpoints.
#[derive(Clone, Debug, Default)]
pub struct Fabric {
    clouds: BTreeMap<String, SimCloud>,
    /// (cloud, tenant) pairs the deployment manager has been told are configured.
    dm_configured: BTreeSet<(String, String)>,
    /// tenant → sections linked at the network service
    links: BTreeMap<String, BTreeSet<String>>,
    log: Vec<CallRecord>,
    counters: BTreeMap<(String, String), u64>,
    faults: Vec<FaultPlan>,
    next_vm: u64,
    latency: Millis,
}

impl Fabric {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_latency(mut self, latency: Millis) -> Self {
        self.latency = latency;
        self
    }

    pub fn add_cloud(&mut self, cloud: SimCloud) {
        self.clouds.insert(cloud.id.clone(), cloud);
    }

    pub fn cloud(&self, id: &str) -> Option<&SimCloud> {
        self.clouds.get(id)
    }

    pub fn cloud_mut(&mut self, id: &str) -> Option<&mut SimCloud> {
        self.clouds.get_mut(id)
    }

    pub fn clouds(&self) -> impl Iterator<Item = &SimCloud> {
        self.clouds.values()
    }

    pub fn log(&self) -> &[CallRecord] {
        &self.log
    }

    pub fn log_since(&self, seq: u64) -> &[CallRecord] {
        &self.log[seq as usize..]
    }

    pub fn log_len(&self) -> u64 {
        self.log.len() as u64
    }

    pub fn snapshot(&self) -> FabricSnapshot {
        FabricSnapshot {
            clouds: self.clouds.clone(),
            dm_configured: self.dm_configured.clone(),
            links: self.links.clone(),
        }
    }

    pub fn is_configured(&self, cloud: &str, tenant: &str) -> bool {
        self.dm_configured.contains(&(cloud.to_string(), tenant.to_string()))
    }

    /// Makes invocations `ordinal .. ordinal + count` (counted from the next
    /// call, starting at 1) of `endpoint.op` fail.
    pub fn inject_fault(&mut self, endpoint: &str, op: &str, ordinal: u64, count: u64) {
        let done = self
            .counters
            .get(&(endpoint.to_string(), op.to_string()))
            .copied()
            .unwrap_or(0);
        self.faults.push(FaultPlan {
            endpoint: endpoint.to_string(),
            op: op.to_string(),
            first: done + ordinal.max(1),
            count: count.max(1),
        });
    }

    pub fn clear_faults(&mut self) {
        self.faults.clear();
    }

    pub fn faults(&self) -> &[FaultPlan] {
        &self.faults
    }

    fn call<T: Debug>(
        &mut self,
        endpoint: &str,
        op: &str,
        args: Value,
        body: impl FnOnce(&mut Self) -> Result<T, SimError>,
    ) -> Result<T, SimError> {
        let key = (endpoint.to_string(), op.to_string());
        let n = {
            let c = self.counters.entry(key).or_insert(0);
            *c += 1;
            *c
        };
        let faulted = self
            .faults
            .iter()
            .any(|f| f.endpoint == endpoint && f.op == op && n >= f.first && n < f.first + f.count);
        let result = if faulted {
            Err(SimError::InjectedFault {
                endpoint: endpoint.to_string(),
                op: op.to_string(),
                ordinal: n,
            })
        } else {
            body(self)
        };
        let (ok, detail) = match &result {
            Ok(v) => (true, format!("{v:?}")),
            Err(e) => (false, e.to_string()),
        };
        self.log.push(CallRecord {
            seq: self.log.len() as u64,
            endpoint: endpoint.to_string(),
            op: op.to_string(),
            args,
            ok,
            detail,
            latency: self.latency,
        });
        result
    }

    fn get(&mut self, cloud: &str) -> Result<&mut SimCloud, SimError> {
        let c = self
            .clouds
            .get_mut(cloud)
            .ok_or_else(|| SimError::UnknownCloud(cloud.to_string()))?;
        if !c.reachable {
            return Err(SimError::Unreachable(cloud.to_string()));
        }
        Ok(c)
    }

    pub fn describe_capabilities(&mut self, cloud: &str) -> Result<BTreeSet<Capability>, SimError> {
        self.call(cloud, "describe_capabilities", json!({}), |f| {
            Ok(f.get(cloud)?.capabilities.clone())
        })
    }

    /// Checks a credential against the cloud's own identity provider.
    pub fn local_authenticate(&mut self, cloud: &str, user: &str, credential: &str) -> Result<Assertion, SimError> {
        self.call(cloud, "local_authenticate", json!({"user": user}), |f| {
            let c = f.get(cloud)?;
            match c.idp.as_ref().and_then(|idp| idp.users.get(user)) {
                Some(stored) if stored.matches(credential) => Ok(Assertion {
                    cloud_id: cloud.to_string(),
                    user_id: user.to_string(),
                    kind: stored.kind,
                }),
                _ => Err(SimError::BadCredential),
            }
        })
    }

    /// Confirms with the home cloud that a principal still exists.
    pub fn verify_principal(&mut self, cloud: &str, user: &str) -> Result<PrincipalKind, SimError> {
        self.call(cloud, "verify_principal", json!({"user": user}), |f| {
            f.get(cloud)?
                .idp
                .as_ref()
                .and_then(|idp| idp.users.get(user))
                .map(|s| s.kind)
                .ok_or(SimError::BadCredential)
        })
    }

    pub fn create_vm(&mut self, cloud: &str, size: u64, tenant: &str, owner: &str) -> Result<String, SimError> {
        let id = format!("vm-{}", self.next_vm + 1);
        let args = json!({"size": size, "tenant": tenant, "owner": owner});
        let out = self.call(cloud, "create_vm", args, |f| {
            let c = f.get(cloud)?;
            if size > c.pool {
                return Err(SimError::CapacityExhausted {
                    cloud: cloud.to_string(),
                    requested: size,
                    available: c.pool,
                });
            }
            c.pool -= size;
            c.vms.insert(
                id.clone(),
                Vm {
                    id: id.clone(),
                    cloud_id: cloud.to_string(),
                    size,
                    tenant: tenant.to_string(),
                    owner: owner.to_string(),
                },
            );
            Ok(id.clone())
        });
        if out.is_ok() {
            self.next_vm += 1;
        }
        out
    }

    pub fn destroy_vm(&mut self, cloud: &str, vm_id: &str) -> Result<Vm, SimError> {
        self.call(cloud, "destroy_vm", json!({"vm": vm_id}), |f| {
            let c = f.get(cloud)?;
            let vm = c.vms.remove(vm_id).ok_or_else(|| SimError::UnknownVm(vm_id.to_string()))?;
            c.pool += vm.size;
            Ok(vm)
        })
    }

    /// Recreates a destroyed VM under its old id.
    pub fn restore_vm(&mut self, vm: &Vm) -> Result<(), SimError> {
        self.call(&vm.cloud_id, "restore_vm", json!({"vm": vm.id, "size": vm.size}), |f| {
            let c = f.get(&vm.cloud_id)?;
            if c.vms.contains_key(&vm.id) {
                return Err(SimError::DuplicateVm(vm.id.clone()));
            }
            if vm.size > c.pool {
                return Err(SimError::CapacityExhausted {
                    cloud: vm.cloud_id.clone(),
                    requested: vm.size,
                    available: c.pool,
                });
            }
            c.pool -= vm.size;
            c.vms.insert(vm.id.clone(), vm.clone());
            Ok(())
        })
    }

    pub fn open_setup_channel(&mut self, cloud: &str) -> Result<(), SimError> {
        self.call(cloud, "open_setup_channel", json!({}), |f| {
            let c = f.get(cloud)?;
            if c.channel_open {
                return Err(SimError::ChannelAlreadyOpen(cloud.to_string()));
            }
            c.channel_open = true;
            Ok(())
        })
    }

    pub fn close_setup_channel(&mut self, cloud: &str) -> Result<(), SimError> {
        self.call(cloud, "close_setup_channel", json!({}), |f| {
            let c = f.get(cloud)?;
            if !c.channel_open {
                return Err(SimError::NoChannel(cloud.to_string()));
            }
            c.channel_open = false;
            Ok(())
        })
    }

    /// Wires a section of `cloud` into `tenant`'s network.
    pub fn connect_section(&mut self, cloud: &str, section: &str, tenant: &str) -> Result<(), SimError> {
        self.call(cloud, "connect_section", json!({"section": section, "tenant": tenant}), |f| {
            let c = f.get(cloud)?;
            if !c.sections.iter().any(|s| s.id == section) {
                return Err(SimError::SectionUnavailable(section.to_string()));
            }
            c.connected.insert(section.to_string(), tenant.to_string());
            Ok(())
        })
    }

    pub fn disconnect_section(&mut self, cloud: &str, section: &str) -> Result<(), SimError> {
        self.call(cloud, "disconnect_section", json!({"section": section}), |f| {
            f.get(cloud)?.connected.remove(section);
            Ok(())
        })
    }

    /// The network service merges the sections' networks.
    pub fn link_sections(&mut self, tenant: &str, sections: &[String]) -> Result<(), SimError> {
        self.call(NETWORK, "link_sections", json!({"tenant": tenant, "sections": sections}), |f| {
            f.links.entry(tenant.to_string()).or_default().extend(sections.iter().cloned());
            Ok(())
        })
    }

    pub fn unlink_sections(&mut self, tenant: &str, sections: &[String]) -> Result<(), SimError> {
        self.call(NETWORK, "unlink_sections", json!({"tenant": tenant, "sections": sections}), |f| {
            if let Some(set) = f.links.get_mut(tenant) {
                for s in sections {
                    set.remove(s);
                }
                if set.is_empty() {
                    f.links.remove(tenant);
                }
            }
            Ok(())
        })
    }

    pub fn collect_section_info(&mut self, tenant: &str, cloud: &str) -> Result<Vec<SectionSpec>, SimError> {
        self.call(DEPLOYMENT_MANAGER, "collect_section_info", json!({"tenant": tenant, "cloud": cloud}), |f| {
            let c = f.get(cloud)?;
            Ok(c.sections
                .iter()
                .filter(|s| c.connected.get(&s.id).is_some_and(|t| t == tenant))
                .cloned()
                .collect())
        })
    }

    /// The deployment manager picks which infrastructure services to install.
    pub fn decide_services(&mut self, tenant: &str, wanted: &[String]) -> Result<Vec<String>, SimError> {
        self.call(DEPLOYMENT_MANAGER, "decide_services", json!({"tenant": tenant, "services": wanted}), |_| {
            Ok(wanted.to_vec())
        })
    }

    pub fn send_actions(&mut self, cloud: &str, actions: &[String]) -> Result<(), SimError> {
        self.call(cloud, "send_actions", json!({"actions": actions}), |f| {
            if !f.get(cloud)?.channel_open {
                return Err(SimError::NoChannel(cloud.to_string()));
            }
            Ok(())
        })
    }

    /// Pulls a container from the hub; a cached one is a no-op.
    pub fn deploy_container(&mut self, cloud: &str, name: &str) -> Result<bool, SimError> {
        self.call(cloud, "deploy_container", json!({"name": name}), |f| {
            let c = f.get(cloud)?;
            if !c.channel_open {
                return Err(SimError::NoChannel(cloud.to_string()));
            }
            Ok(c.containers.insert(name.to_string()))
        })
    }

    pub fn remove_container(&mut self, cloud: &str, name: &str) -> Result<(), SimError> {
        self.call(cloud, "remove_container", json!({"name": name}), |f| {
            let c = f.get(cloud)?;
            if !c.containers.remove(name) {
                return Err(SimError::UnknownContainer {
                    cloud: cloud.to_string(),
                    container: name.to_string(),
                });
            }
            Ok(())
        })
    }

    pub fn config_ack(&mut self, cloud: &str, tenant: &str) -> Result<(), SimError> {
        self.call(DEPLOYMENT_MANAGER, "config_ack", json!({"cloud": cloud, "tenant": tenant}), |_| Ok(()))
    }

    pub fn inform_deployment_manager(&mut self, cloud: &str, tenant: &str) -> Result<(), SimError> {
        self.call(DEPLOYMENT_MANAGER, "inform_deployment_manager", json!({"cloud": cloud, "tenant": tenant}), |f| {
            f.dm_configured.insert((cloud.to_string(), tenant.to_string()));
            Ok(())
        })
    }

    pub fn forget_configuration(&mut self, cloud: &str, tenant: &str) -> Result<(), SimError> {
        self.call(DEPLOYMENT_MANAGER, "forget_configuration", json!({"cloud": cloud, "tenant": tenant}), |f| {
            f.dm_configured.remove(&(cloud.to_string(), tenant.to_string()));
            Ok(())
        })
    }

    pub fn allocate_tenant(&mut self, cloud: &str, tenant: &str, section: &str) -> Result<(), SimError> {
        self.call(cloud, "allocate_tenant", json!({"tenant": tenant, "section": section}), |f| {
            let c = f.get(cloud)?;
            if !c.sections.iter().any(|s| s.id == section) || c.allocations.contains_key(section) {
                return Err(SimError::SectionUnavailable(section.to_string()));
            }
            c.allocations.insert(section.to_string(), tenant.to_string());
            Ok(())
        })
    }

    /// Tears down everything `cloud` holds for `tenant`: sections, VMs,
    /// containers, grants and hosted services.
    pub fn release_tenant(&mut self, cloud: &str, tenant: &str) -> Result<TenantFootprint, SimError> {
        self.call(cloud, "release_tenant", json!({"tenant": tenant}), |f| {
            let c = f.get(cloud)?;
            let suffix = format!("@{tenant}");
            let sections: Vec<String> = c
                .allocations
                .iter()
                .filter(|(_, t)| *t == tenant)
                .map(|(s, _)| s.clone())
                .collect();
            let vms: Vec<Vm> = c.vms.values().filter(|v| v.tenant == tenant).cloned().collect();
            let containers: Vec<String> = c.containers.iter().filter(|n| n.ends_with(&suffix)).cloned().collect();
            let grants: Vec<String> = c
                .grants
                .iter()
                .filter(|(t, _)| t == tenant)
                .map(|(_, p)| p.clone())
                .collect();
            let services: BTreeMap<String, Value> = c
                .services
                .iter()
                .filter(|(_, (t, _))| t == tenant)
                .map(|(s, (_, v))| (s.clone(), v.clone()))
                .collect();
            if sections.is_empty() && vms.is_empty() && containers.is_empty() && grants.is_empty() && services.is_empty()
            {
                return Err(SimError::UnknownTenant {
                    cloud: cloud.to_string(),
                    tenant: tenant.to_string(),
                });
            }
            for s in &sections {
                c.allocations.remove(s);
                c.connected.remove(s);
            }
            for v in &vms {
                c.vms.remove(&v.id);
                c.pool += v.size;
            }
            for n in &containers {
                c.containers.remove(n);
            }
            for p in &grants {
                c.grants.remove(&(tenant.to_string(), p.clone()));
            }
            for s in services.keys() {
                c.services.remove(s);
            }
            Ok(TenantFootprint {
                cloud_id: cloud.to_string(),
                tenant: tenant.to_string(),
                sections,
                vms,
                containers,
                grants,
                services,
            })
        })
    }

    pub fn restore_tenant(&mut self, fp: &TenantFootprint) -> Result<(), SimError> {
        self.call(&fp.cloud_id, "restore_tenant", json!({"tenant": fp.tenant}), |f| {
            let c = f.get(&fp.cloud_id)?;
            let need: u64 = fp.vms.iter().map(|v| v.size).sum();
            if need > c.pool {
                return Err(SimError::CapacityExhausted {
                    cloud: fp.cloud_id.clone(),
                    requested: need,
                    available: c.pool,
                });
            }
            for s in &fp.sections {
                c.allocations.insert(s.clone(), fp.tenant.clone());
                c.connected.insert(s.clone(), fp.tenant.clone());
            }
            for v in &fp.vms {
                c.pool -= v.size;
                c.vms.insert(v.id.clone(), v.clone());
            }
            c.containers.extend(fp.containers.iter().cloned());
            for p in &fp.grants {
                c.grants.insert((fp.tenant.clone(), p.clone()));
            }
            for (s, v) in &fp.services {
                c.services.insert(s.clone(), (fp.tenant.clone(), v.clone()));
            }
            Ok(())
        })
    }

    /// Releases a single section of `cloud` from `tenant`.
    pub fn release_section(&mut self, cloud: &str, section: &str) -> Result<String, SimError> {
        self.call(cloud, "release_section", json!({"section": section}), |f| {
            let c = f.get(cloud)?;
            let tenant = c
                .allocations
                .remove(section)
                .ok_or_else(|| SimError::SectionUnavailable(section.to_string()))?;
            c.connected.remove(section);
            Ok(tenant)
        })
    }

    /// Returns whether the grant is new.
    pub fn grant_access(&mut self, cloud: &str, tenant: &str, principal: &str) -> Result<bool, SimError> {
        self.call(cloud, "grant_access", json!({"tenant": tenant, "principal": principal}), |f| {
            Ok(f.get(cloud)?.grants.insert((tenant.to_string(), principal.to_string())))
        })
    }

    pub fn revoke_access(&mut self, cloud: &str, tenant: &str, principal: &str) -> Result<(), SimError> {
        self.call(cloud, "revoke_access", json!({"tenant": tenant, "principal": principal}), |f| {
            if !f.get(cloud)?.grants.remove(&(tenant.to_string(), principal.to_string())) {
                return Err(SimError::NoGrant {
                    tenant: tenant.to_string(),
                    principal: principal.to_string(),
                });
            }
            Ok(())
        })
    }

    pub fn host_service(&mut self, cloud: &str, tenant: &str, service: &str, data: &Value) -> Result<(), SimError> {
        self.call(cloud, "host_service", json!({"tenant": tenant, "service": service}), |f| {
            f.get(cloud)?
                .services
                .insert(service.to_string(), (tenant.to_string(), data.clone()));
            Ok(())
        })
    }

    pub fn unhost_service(&mut self, cloud: &str, service: &str) -> Result<(), SimError> {
        self.call(cloud, "unhost_service", json!({"service": service}), |f| {
            f.get(cloud)?
                .services
                .remove(service)
                .map(|_| ())
                .ok_or_else(|| SimError::UnknownService(service.to_string()))
        })
    }

    /// Calls a hosted service. The request crosses into the provider tenant
    /// through its ACCESS bus endpoint, never directly.
    pub fn invoke_service(
        &mut self,
        cloud: &str,
        tenant: &str,
        service: &str,
        principal: &str,
        action: &str,
    ) -> Result<Value, SimError> {
        let args = json!({"cloud": cloud, "service": service, "principal": principal, "action": action});
        self.call(&bus_endpoint(tenant), "invoke_service", args, |f| {
            let c = f.get(cloud)?;
            if !c.grants.contains(&(tenant.to_string(), principal.to_string())) {
                return Err(SimError::NoGrant {
                    tenant: tenant.to_string(),
                    principal: principal.to_string(),
                });
            }
            match c.services.get(service) {
                Some((t, v)) if t == tenant => Ok(v.clone()),
                _ => Err(SimError::UnknownService(service.to_string())),
            }
        })
    }

    pub fn notify(&mut self, cloud: &str, message: &str) -> Result<(), SimError> {
        self.call(cloud, "notify", json!({"message": message}), |f| f.get(cloud).map(|_| ()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn fabric() -> Fabric {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut idp = IdpDescriptor::new("A");
        idp.add_user("admin", "pw", PrincipalKind::MemberCloudAdmin, BTreeMap::new(), &mut rng);
        let mut f = Fabric::new();
        f.add_cloud(SimCloud::new("A", 10).with_sections(2, 4).with_idp(idp));
        f.add_cloud(SimCloud::new("B", 10).with_sections(1, 4));
        f
    }

    #[test]
    fn vm_examples() {
        let mut f = fabric();
        let id = f.create_vm("A", 4, "t", "u@B").unwrap();
        assert_eq!(f.cloud("A").unwrap().pool, 6);
        assert!(matches!(f.create_vm("A", 11, "t", "u"), Err(SimError::CapacityExhausted { .. })));
        let vm = f.destroy_vm("A", &id).unwrap();
        assert_eq!(f.destroy_vm("A", &id), Err(SimError::UnknownVm(id.clone())));
        f.restore_vm(&vm).unwrap();
        assert_eq!(f.cloud("A").unwrap().vms[&id], vm);
        assert_eq!(f.log().len(), 5);
        assert!(!f.log()[1].ok && !f.log()[3].ok);
    }

    #[test]
    fn channel_examples() {
        let mut f = fabric();
        assert_eq!(f.close_setup_channel("A"), Err(SimError::NoChannel("A".into())));
        f.open_setup_channel("A").unwrap();
        assert!(f.cloud("A").unwrap().channel_open);
        assert_eq!(f.open_setup_channel("A"), Err(SimError::ChannelAlreadyOpen("A".into())));
        assert_eq!(f.deploy_container("B", "access@t"), Err(SimError::NoChannel("B".into())));
        assert_eq!(f.deploy_container("A", "access@t"), Ok(true));
        assert_eq!(f.deploy_container("A", "access@t"), Ok(false));
        assert!(f.cloud("A").unwrap().containers.contains("access@t"));
    }

    #[test]
    fn authentication_examples() {
        let mut f = fabric();
        assert_eq!(f.local_authenticate("A", "admin", "pw").unwrap().kind, PrincipalKind::MemberCloudAdmin);
        assert_eq!(f.local_authenticate("A", "admin", "nope"), Err(SimError::BadCredential));
        assert_eq!(f.local_authenticate("A", "ghost", "pw"), Err(SimError::BadCredential));
        assert_eq!(f.local_authenticate("B", "admin", "pw"), Err(SimError::BadCredential));
    }

    #[test]
    fn fault_examples() {
        let mut f = fabric();
        f.inject_fault("A", "create_vm", 2, 1);
        assert!(f.create_vm("A", 1, "t", "u").is_ok());
        assert!(matches!(f.create_vm("A", 1, "t", "u"), Err(SimError::InjectedFault { ordinal: 2, .. })));
        assert!(f.create_vm("A", 1, "t", "u").is_ok());
        // Ordinals count from the injection point.
        f.inject_fault("A", "create_vm", 1, 2);
        assert!(f.create_vm("A", 1, "t", "u").is_err());
        assert!(f.create_vm("A", 1, "t", "u").is_err());
        assert!(f.create_vm("A", 1, "t", "u").is_ok());
        // Faulted calls are logged and change nothing.
        assert_eq!(f.cloud("A").unwrap().pool, 7);
        assert_eq!(f.log().iter().filter(|r| !r.ok).count(), 3);
        let mut clean = fabric();
        clean.open_setup_channel("A").unwrap();
        assert!(clean.log().iter().all(|r| r.ok));
    }

    #[test]
    fn tenant_footprint_round_trip() {
        let mut f = fabric();
        f.allocate_tenant("A", "t", "A-s1").unwrap();
        assert_eq!(f.allocate_tenant("A", "u", "A-s1"), Err(SimError::SectionUnavailable("A-s1".into())));
        f.connect_section("A", "A-s1", "t").unwrap();
        f.open_setup_channel("A").unwrap();
        f.deploy_container("A", "access@t").unwrap();
        f.close_setup_channel("A").unwrap();
        f.create_vm("A", 3, "t", "u@B").unwrap();
        f.grant_access("A", "t", "u@B").unwrap();
        f.host_service("A", "t", "svc", &json!({"x": 1})).unwrap();
        let before = f.snapshot();
        let fp = f.release_tenant("A", "t").unwrap();
        assert_eq!(fp.vms.len(), 1);
        assert_eq!(f.cloud("A").unwrap().pool, 10);
        assert!(f.cloud("A").unwrap().allocations.is_empty());
        assert!(matches!(f.release_tenant("A", "t"), Err(SimError::UnknownTenant { .. })));
        f.restore_tenant(&fp).unwrap();
        assert_eq!(f.snapshot(), before);
    }

    #[test]
    fn invocation_goes_through_the_bus() {
        let mut f = fabric();
        f.host_service("A", "t", "svc", &json!([1, 2])).unwrap();
        assert!(matches!(f.invoke_service("A", "t", "svc", "u@B", "read"), Err(SimError::NoGrant { .. })));
        f.grant_access("A", "t", "u@B").unwrap();
        assert_eq!(f.invoke_service("A", "t", "svc", "u@B", "read").unwrap(), json!([1, 2]));
        let last = f.log().last().unwrap();
        assert_eq!(last.endpoint, "access:t");
    }

    #[test]
    fn unreachable_cloud() {
        let mut f = fabric();
        f.cloud_mut("B").unwrap().reachable = false;
        assert_eq!(f.notify("B", "hi"), Err(SimError::Unreachable("B".into())));
        assert_eq!(f.notify("Z", "hi"), Err(SimError::UnknownCloud("Z".into())));
    }

    #[derive(Clone, Debug)]
    enum Op {
        Create(u64),
        Destroy(usize),
        Restore(usize),
        Fault(u64),
    }

    proptest! {
        #[test]
        fn pool_plus_vms_is_conserved(ops in prop::collection::vec(prop_oneof![
            (0u64..6).prop_map(Op::Create),
            (0usize..8).prop_map(Op::Destroy),
            (0usize..8).prop_map(Op::Restore),
            (1u64..3).prop_map(Op::Fault),
        ], 0..60)) {
            let mut f = fabric();
            let mut destroyed: Vec<Vm> = Vec::new();
            let mut ids: Vec<String> = Vec::new();
            let total = 10;
            for op in ops {
                let before = f.log().len();
                match op {
                    Op::Create(size) => {
                        if let Ok(id) = f.create_vm("A", size, "t", "u") {
                            ids.push(id);
                        }
                    }
                    Op::Destroy(i) => {
                        if let Some(id) = ids.get(i).cloned() {
                            if let Ok(vm) = f.destroy_vm("A", &id) {
                                destroyed.push(vm);
                            }
                        } else {
                            let _ = f.destroy_vm("A", "vm-none");
                        }
                    }
                    Op::Restore(i) => {
                        if let Some(vm) = destroyed.get(i).cloned() {
                            let _ = f.restore_vm(&vm);
                        } else {
                            let _ = f.notify("A", "noop");
                        }
                    }
                    Op::Fault(n) => {
                        f.inject_fault("A", "create_vm", n, 1);
                        let _ = f.notify("A", "fault");
                    }
                }
                prop_assert_eq!(f.log().len(), before + 1);
                let c = f.cloud("A").unwrap();
                prop_assert_eq!(c.pool + c.vm_total(), total);
            }
        }
    }
}
