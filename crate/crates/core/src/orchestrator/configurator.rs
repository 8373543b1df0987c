//! Deployment-manager flow that wires a cloud's sections into a tenant and
//! installs the tenant's infrastructure services there.
//!
//! The exchange runs ten steps in a fixed order:
//!
//! | step | endpoint           | operation                   |
//! |------|--------------------|-----------------------------|
//! | 6.1  | cloud              | `open_setup_channel`        |
//! | 6.2  | cloud              | `connect_section` (each)    |
//! | 6.3  | network            | `link_sections`             |
//! | 6.4  | deployment-manager | `collect_section_info`      |
//! | 6.5  | deployment-manager | `decide_services`           |
//! | 6.6  | cloud              | `send_actions`              |
//! | 6.7  | cloud              | `deploy_container` (each)   |
//! | 6.8  | deployment-manager | `config_ack`                |
//! | 6.9  | cloud              | `close_setup_channel`       |
//! | 6.10 | deployment-manager | `inform_deployment_manager` |
//!
//! A failing step tears everything down again, closing the setup channel
//! last, and reports which step failed.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::model::InfraService;
use crate::simcloud::{Fabric, SimError};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("configuring {tenant} on {cloud} failed at step {step}: {source}")]
pub struct ConfigurationFailed {
    pub cloud: String,
    pub tenant: String,
    pub step: &'static str,
    pub source: SimError,
}

/// What a successful run changed, so a later abort can undo it.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigUndo {
    pub cloud: String,
    pub tenant: String,
    pub connected: Vec<String>,
    pub linked: Vec<String>,
    pub containers: Vec<String>,
    pub informed: bool,
}

impl ConfigUndo {
    pub fn is_empty(&self) -> bool {
        self.connected.is_empty() && self.linked.is_empty() && self.containers.is_empty() && !self.informed
    }
}

/// Runs the ten-step flow for `sections` of `cloud` in `tenant`.
/// Idempotent: a (cloud, tenant) pair the deployment manager already knows
/// is acknowledged without any calls.
pub fn configure_sections(
    fabric: &mut Fabric,
    cloud: &str,
    tenant: &str,
    sections: &[String],
    services: &[InfraService],
) -> Result<ConfigUndo, ConfigurationFailed> {
    let mut undo = ConfigUndo {
        cloud: cloud.to_string(),
        tenant: tenant.to_string(),
        ..ConfigUndo::default()
    };
    if fabric.is_configured(cloud, tenant) {
        return Ok(undo);
    }
    let fail = |step: &'static str, source: SimError| ConfigurationFailed {
        cloud: cloud.to_string(),
        tenant: tenant.to_string(),
        step,
        source,
    };

    fabric.open_setup_channel(cloud).map_err(|e| fail("6.1", e))?;
    match run_steps(fabric, cloud, tenant, sections, services, &mut undo) {
        Ok(()) => Ok(undo),
        Err((step, e)) => {
            unconfigure(fabric, &undo);
            // Post-configuration teardown of the setup channel.
            if fabric.cloud(cloud).is_some_and(|c| c.channel_open) {
                let _ = fabric.close_setup_channel(cloud);
            }
            Err(fail(step, e))
        }
    }
}

fn run_steps(
    fabric: &mut Fabric,
    cloud: &str,
    tenant: &str,
    sections: &[String],
    services: &[InfraService],
    undo: &mut ConfigUndo,
) -> Result<(), (&'static str, SimError)> {
    for s in sections {
        fabric.connect_section(cloud, s, tenant).map_err(|e| ("6.2", e))?;
        undo.connected.push(s.clone());
    }
    fabric.link_sections(tenant, sections).map_err(|e| ("6.3", e))?;
    undo.linked = sections.to_vec();
    fabric.collect_section_info(tenant, cloud).map_err(|e| ("6.4", e))?;
    let names: Vec<String> = services.iter().map(|s| s.container(tenant)).collect();
    let chosen = fabric.decide_services(tenant, &names).map_err(|e| ("6.5", e))?;
    let actions: Vec<String> = chosen.iter().map(|n| format!("deploy {n}")).collect();
    fabric.send_actions(cloud, &actions).map_err(|e| ("6.6", e))?;
    for name in &chosen {
        if fabric.deploy_container(cloud, name).map_err(|e| ("6.7", e))? {
            undo.containers.push(name.clone());
        }
    }
    fabric.config_ack(cloud, tenant).map_err(|e| ("6.8", e))?;
    fabric.close_setup_channel(cloud).map_err(|e| ("6.9", e))?;
    fabric.inform_deployment_manager(cloud, tenant).map_err(|e| ("6.10", e))?;
    undo.informed = true;
    Ok(())
}

/// Reverts a configuration, newest change first. Best effort: failures
/// are visible in the call log.
pub fn unconfigure(fabric: &mut Fabric, undo: &ConfigUndo) {
    if undo.informed {
        let _ = fabric.forget_configuration(&undo.cloud, &undo.tenant);
    }
    for name in undo.containers.iter().rev() {
        let _ = fabric.remove_container(&undo.cloud, name);
    }
    if !undo.linked.is_empty() {
        let _ = fabric.unlink_sections(&undo.tenant, &undo.linked);
    }
    for s in undo.connected.iter().rev() {
        let _ = fabric.disconnect_section(&undo.cloud, s);
    }
}
