//! Runtime monitoring: the access log, decision re-validation, SLA evidence
//! and checks, and the alert feed shared with the orchestrator.

use std::collections::{BTreeSet, HashSet};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Millis, SimClock};
use crate::digest::Digest;
use crate::identity::CryptoToken;
use crate::policy::{pdp_decide, policy_set_digest, AccessEvent, AccessEventSink, DecisionFn, Policy};
use crate::registry::{RecordDraft, RecordKind, RecordRef, Registry, RegistryError};

pub const ACCESS_LOG_KEY: &str = "log";
const MAX_APPEND_ATTEMPTS: usize = 16;

#[derive(Debug, Error)]
pub enum MonitorError {
    #[error("no policy version with digest {0}")]
    UnknownPolicyVersion(Digest),
    #[error("event has no resource.service_id")]
    MissingService,
    #[error("stored record is unreadable: {0}")]
    Decode(String),
    #[error("cursor {cursor} is past the last alert {last}")]
    InvalidCursor { cursor: u64, last: u64 },
    #[error("invalid SLA policy: {0}")]
    InvalidSlaPolicy(String),
    #[error("log append kept conflicting")]
    Contention,
    #[error(transparent)]
    Registry(#[from] RegistryError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AlertKind {
    PolicyMismatch,
    SlaViolation,
    AuditFinding,
    /// Failures of federation operations, e.g. a deallocation that kept failing.
    Operational,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Severity {
    Info,
    Warn,
    Critical,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alert {
    pub id: u64,
    pub kind: AlertKind,
    pub severity: Severity,
    /// Member cloud or service the alert is about.
    pub subject: String,
    pub message: String,
    pub evidence: Vec<RecordRef>,
    pub timestamp: Millis,
    /// Alerts with a fingerprint already in the feed are dropped.
    pub fingerprint: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlertDraft {
    pub kind: AlertKind,
    pub severity: Severity,
    pub subject: String,
    pub message: String,
    pub evidence: Vec<RecordRef>,
    pub fingerprint: String,
}

impl AlertDraft {
    pub fn new(kind: AlertKind, severity: Severity, subject: &str, message: impl Into<String>) -> Self {
        let message = message.into();
        Self {
            kind,
            severity,
            subject: subject.to_string(),
            fingerprint: format!("{kind:?}|{severity:?}|{subject}|{message}"),
            message,
            evidence: Vec::new(),
        }
    }

    pub fn with_evidence(mut self, evidence: Vec<RecordRef>) -> Self {
        self.evidence = evidence;
        self
    }

    pub fn with_fingerprint(mut self, fingerprint: impl Into<String>) -> Self {
        self.fingerprint = fingerprint.into();
        self
    }
}

#[derive(Debug, Default)]
struct FeedState {
    alerts: Vec<Alert>,
    fingerprints: HashSet<String>,
}

/// Ordered, deduplicated alert stream. Ids start at 1; a cursor is the last
/// id a reader has seen (0 before the first).
#[derive(Debug)]
pub struct AlertFeed {
    clock: SimClock,
    state: Mutex<FeedState>,
    changed: Condvar,
}

impl AlertFeed {
    pub fn new(clock: SimClock) -> Self {
        Self {
            clock,
            state: Mutex::new(FeedState::default()),
            changed: Condvar::new(),
        }
    }

    /// Returns the new alert's id, or `None` for a duplicate.
    pub fn raise(&self, draft: AlertDraft) -> Option<u64> {
        let mut st = self.state.lock();
        if !st.fingerprints.insert(draft.fingerprint.clone()) {
            return None;
        }
        let id = st.alerts.len() as u64 + 1;
        st.alerts.push(Alert {
            id,
            kind: draft.kind,
            severity: draft.severity,
            subject: draft.subject,
            message: draft.message,
            evidence: draft.evidence,
            timestamp: self.clock.now(),
            fingerprint: draft.fingerprint,
        });
        self.changed.notify_all();
        Some(id)
    }

    pub fn last_id(&self) -> u64 {
        self.state.lock().alerts.len() as u64
    }

    pub fn since(&self, cursor: u64) -> Result<Vec<Alert>, MonitorError> {
        let st = self.state.lock();
        Self::slice(&st, cursor)
    }

    /// Like [`since`](Self::since) but waits up to `timeout` for something new.
    pub fn wait_since(&self, cursor: u64, timeout: Duration) -> Result<Vec<Alert>, MonitorError> {
        let mut st = self.state.lock();
        if st.alerts.len() as u64 == cursor {
            self.changed.wait_for(&mut st, timeout);
        }
        Self::slice(&st, cursor)
    }

    pub fn all(&self) -> Vec<Alert> {
        self.state.lock().alerts.clone()
    }

    fn slice(st: &FeedState, cursor: u64) -> Result<Vec<Alert>, MonitorError> {
        let last = st.alerts.len() as u64;
        if cursor > last {
            return Err(MonitorError::InvalidCursor { cursor, last });
        }
        Ok(st.alerts[cursor as usize..].to_vec())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparator {
    #[serde(rename = "<=")]
    AtMost,
    #[serde(rename = ">=")]
    AtLeast,
}

impl Comparator {
    /// Strict breach: a value exactly at the threshold complies.
    pub fn breached(self, value: f64, threshold: f64) -> bool {
        match self {
            Comparator::AtMost => value > threshold,
            Comparator::AtLeast => value < threshold,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlaPolicy {
    pub service_id: String,
    pub metric: String,
    pub comparator: Comparator,
    pub threshold: f64,
    pub window: Millis,
    /// Overrides the federation-wide grace when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grace: Option<Millis>,
}

impl SlaPolicy {
    pub fn check(&self) -> Result<(), MonitorError> {
        if self.window == 0 {
            return Err(MonitorError::InvalidSlaPolicy("window must be positive".into()));
        }
        if self.grace == Some(0) {
            return Err(MonitorError::InvalidSlaPolicy("grace must be positive".into()));
        }
        if !self.threshold.is_finite() {
            return Err(MonitorError::InvalidSlaPolicy("threshold must be finite".into()));
        }
        if self.metric.is_empty() || self.metric.contains('/') {
            return Err(MonitorError::InvalidSlaPolicy(format!("bad metric name {:?}", self.metric)));
        }
        Ok(())
    }

    pub fn evidence_key(&self) -> String {
        evidence_key(&self.service_id, &self.metric)
    }
}

pub fn evidence_key(service_id: &str, metric: &str) -> String {
    format!("{service_id}/{metric}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlaSample {
    pub service_id: String,
    pub metric: String,
    pub value: f64,
    pub timestamp: Millis,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SlaStatus {
    Compliant,
    /// `since` is the earliest evaluation instant from which every windowed
    /// mean up to `now` breached.
    Violating { since: Millis },
    NoEvidence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlaReportRow {
    pub service_id: String,
    pub metric: String,
    pub status: SlaStatus,
    /// Windowed mean at report time, if the window has samples.
    pub mean: Option<f64>,
    pub samples: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SlaReport {
    pub rows: Vec<SlaReportRow>,
    /// Evidence keys for which no SLA policy is in force.
    pub orphans: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum Revalidation {
    Ok,
    Mismatch { recomputed: crate::policy::Outcome },
}

/// The FRM component.
#[derive(Clone)]
pub struct Monitor {
    registry: Arc<Registry>,
    token: CryptoToken,
    clock: SimClock,
    alerts: Arc<AlertFeed>,
    decide: DecisionFn,
}

impl std::fmt::Debug for Monitor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Monitor").finish_non_exhaustive()
    }
}

impl Monitor {
    pub fn new(registry: Arc<Registry>, token: CryptoToken, clock: SimClock, alerts: Arc<AlertFeed>) -> Self {
        Self {
            registry,
            token,
            clock,
            alerts,
            decide: Arc::new(pdp_decide),
        }
    }

    pub fn alerts(&self) -> &Arc<AlertFeed> {
        &self.alerts
    }

    /// Appends one ACCESS_LOG record; returns its block index.
    pub fn record_event(&self, event: &AccessEvent) -> Result<u64, MonitorError> {
        self.append_retrying(RecordKind::AccessLog, ACCESS_LOG_KEY, event)
    }

    fn append_retrying<T: Serialize>(&self, kind: RecordKind, key: &str, value: &T) -> Result<u64, MonitorError> {
        for _ in 0..MAX_APPEND_ATTEMPTS {
            let seq = self.registry.next_seq(kind, key);
            match self.registry.append(&self.token, vec![RecordDraft::json(kind, key, seq, value)]) {
                Ok(block) => return Ok(block),
                Err(RegistryError::SeqConflict { .. }) => continue,
                Err(e) => return Err(e.into()),
            }
        }
        Err(MonitorError::Contention)
    }

    /// Every logged event with its ledger position, chronological.
    pub fn logged_events(&self) -> Result<Vec<(RecordRef, AccessEvent)>, MonitorError> {
        self.registry
            .get_history_refs(&self.token, RecordKind::AccessLog, ACCESS_LOG_KEY)?
            .into_iter()
            .map(|(r, rec)| {
                rec.decode()
                    .map(|e| (r, e))
                    .map_err(|e| MonitorError::Decode(e.to_string()))
            })
            .collect()
    }

    /// Events with `from <= timestamp < to`.
    pub fn export_logs(&self, from: Millis, to: Millis) -> Result<Vec<AccessEvent>, MonitorError> {
        Ok(self
            .logged_events()?
            .into_iter()
            .map(|(_, e)| e)
            .filter(|e| e.timestamp >= from && e.timestamp < to)
            .collect())
    }

    /// The policy list the decision was made against.
    pub fn policies_at(&self, service_id: &str, digest: &Digest) -> Result<Vec<Policy>, MonitorError> {
        if *digest == policy_set_digest(&[]) {
            return Ok(Vec::new());
        }
        for rec in self.registry.get_history(&self.token, RecordKind::AccessPolicy, service_id)? {
            if rec.tombstone {
                continue;
            }
            let Ok(policies) = rec.decode::<Vec<Policy>>() else {
                continue;
            };
            if policy_set_digest(&policies) == *digest {
                return Ok(policies);
            }
        }
        Err(MonitorError::UnknownPolicyVersion(*digest))
    }

    /// Recomputes the decision under the policy version it cites; raises a
    /// critical alert on disagreement.
    pub fn revalidate(&self, event: &AccessEvent, evidence: Option<RecordRef>) -> Result<Revalidation, MonitorError> {
        let service = event.request.service_id().ok_or(MonitorError::MissingService)?;
        let policies = self.policies_at(service, &event.decision.policy_version_digest)?;
        let recomputed = (self.decide)(&event.request, &policies)
            .map_err(|e| MonitorError::Decode(e.to_string()))?;
        if recomputed == event.decision {
            return Ok(Revalidation::Ok);
        }
        let where_ = evidence.map_or_else(
            || format!("{}@{}", event.request.subject.get("id").cloned().unwrap_or_default(), event.timestamp),
            |r| format!("block {} record {}", r.block, r.position),
        );
        self.alerts.raise(
            AlertDraft::new(
                AlertKind::PolicyMismatch,
                Severity::Critical,
                service,
                format!(
                    "logged decision {:?} at {where_} disagrees with recomputed {:?}",
                    event.decision.outcome, recomputed.outcome
                ),
            )
            .with_evidence(evidence.into_iter().collect())
            .with_fingerprint(format!("POLICY_MISMATCH|{where_}")),
        );
        Ok(Revalidation::Mismatch {
            recomputed: recomputed.outcome,
        })
    }

    /// Re-validates the whole log; returns the number of mismatches.
    pub fn revalidate_all(&self) -> Result<usize, MonitorError> {
        let mut mismatches = 0;
        for (r, event) in self.logged_events()? {
            if let Revalidation::Mismatch { .. } = self.revalidate(&event, Some(r))? {
                mismatches += 1;
            }
        }
        Ok(mismatches)
    }

    pub fn sla_ingest(&self, service_id: &str, metric: &str, value: f64, timestamp: Millis) -> Result<u64, MonitorError> {
        let sample = SlaSample {
            service_id: service_id.to_string(),
            metric: metric.to_string(),
            value,
            timestamp,
        };
        self.append_retrying(RecordKind::SlaEvidence, &evidence_key(service_id, metric), &sample)
    }

    pub fn samples(&self, service_id: &str, metric: &str) -> Result<Vec<SlaSample>, MonitorError> {
        let mut out: Vec<SlaSample> = self
            .registry
            .get_history(&self.token, RecordKind::SlaEvidence, &evidence_key(service_id, metric))?
            .iter()
            .filter(|r| !r.tombstone)
            .map(|r| r.decode().map_err(|e| MonitorError::Decode(e.to_string())))
            .collect::<Result<_, _>>()?;
        out.sort_by_key(|s| s.timestamp);
        Ok(out)
    }

    /// Evaluates the policy at `now` and raises the matching alert.
    pub fn sla_check(&self, policy: &SlaPolicy, now: Millis) -> Result<SlaStatus, MonitorError> {
        policy.check()?;
        let samples = self.samples(&policy.service_id, &policy.metric)?;
        let status = evaluate_sla(policy, &samples, now);
        match status {
            SlaStatus::Violating { since } => {
                self.alerts.raise(
                    AlertDraft::new(
                        AlertKind::SlaViolation,
                        Severity::Warn,
                        &policy.service_id,
                        format!(
                            "{} breaches {:?} {} since {since}",
                            policy.metric, policy.comparator, policy.threshold
                        ),
                    )
                    .with_fingerprint(format!("SLA|{}|{since}", policy.evidence_key())),
                );
            }
            SlaStatus::NoEvidence => {
                self.alerts.raise(
                    AlertDraft::new(
                        AlertKind::SlaViolation,
                        Severity::Info,
                        &policy.service_id,
                        format!("no {} evidence in the last {} ms", policy.metric, policy.window),
                    )
                    .with_fingerprint(format!("SLA-EMPTY|{}", policy.evidence_key())),
                );
            }
            SlaStatus::Compliant => {}
        }
        Ok(status)
    }

    /// Current status of every policy plus evidence keys no policy covers.
    /// Does not raise alerts.
    pub fn sla_report(&self, policies: &[SlaPolicy], now: Millis) -> Result<SlaReport, MonitorError> {
        let mut rows = Vec::new();
        let mut covered = BTreeSet::new();
        for p in policies {
            covered.insert(p.evidence_key());
            let samples = self.samples(&p.service_id, &p.metric)?;
            let mean = window_mean(&samples, now.saturating_sub(p.window), now);
            rows.push(SlaReportRow {
                service_id: p.service_id.clone(),
                metric: p.metric.clone(),
                status: evaluate_sla(p, &samples, now),
                mean,
                samples: samples.len(),
            });
        }
        let orphans = self
            .registry
            .live_keys(&self.token, RecordKind::SlaEvidence)?
            .into_iter()
            .filter(|k| !covered.contains(k))
            .collect();
        Ok(SlaReport { rows, orphans })
    }

    pub fn now(&self) -> Millis {
        self.clock.now()
    }
}

impl AccessEventSink for Monitor {
    fn record(&self, event: &AccessEvent) -> Result<u64, String> {
        self.record_event(event).map_err(|e| e.to_string())
    }
}

/// Mean of samples with `from <= t <= to`.
fn window_mean(samples: &[SlaSample], from: Millis, to: Millis) -> Option<f64> {
    let vals: Vec<f64> = samples
        .iter()
        .filter(|s| s.timestamp >= from && s.timestamp <= to)
        .map(|s| s.value)
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Pure SLA evaluation over sorted samples.
pub fn evaluate_sla(policy: &SlaPolicy, samples: &[SlaSample], now: Millis) -> SlaStatus {
    let breaching_at = |t: Millis| {
        window_mean(samples, t.saturating_sub(policy.window), t)
            .is_some_and(|m| policy.comparator.breached(m, policy.threshold))
    };
    match window_mean(samples, now.saturating_sub(policy.window), now) {
        None => return SlaStatus::NoEvidence,
        Some(m) if !policy.comparator.breached(m, policy.threshold) => return SlaStatus::Compliant,
        Some(_) => {}
    }
    // Walk back over earlier evaluation instants while the breach holds.
    let mut since = now;
    let instants: BTreeSet<Millis> = samples.iter().map(|s| s.timestamp).filter(|t| *t < now).collect();
    for &t in instants.iter().rev() {
        if breaching_at(t) {
            since = t;
        } else {
            break;
        }
    }
    SlaStatus::Violating { since }
}
