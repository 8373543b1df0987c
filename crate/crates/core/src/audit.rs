//! Offline security audit over exported access logs: sessionization into
//! business transactions, role mining, and rule-based anomaly detection.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::clock::{Millis, MINUTE};
use crate::monitor::{AlertDraft, AlertFeed, AlertKind, Severity};
use crate::policy::{AccessEvent, Outcome};

pub const DEFAULT_GAP: Millis = 10 * MINUTE;
pub const DEFAULT_THETA: f64 = 0.6;
pub const DEFAULT_PROBE_THRESHOLD: usize = 5;

/// `(action, resource class)`; the class is the service id.
pub type Permission = (String, String);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEvent {
    pub subject: String,
    pub action: String,
    pub resource_class: String,
    pub permitted: bool,
    pub timestamp: Millis,
}

impl AuditEvent {
    pub fn permission(&self) -> Permission {
        (self.action.clone(), self.resource_class.clone())
    }
}

impl From<&AccessEvent> for AuditEvent {
    fn from(e: &AccessEvent) -> Self {
        Self {
            subject: e.request.subject.get("id").cloned().unwrap_or_else(|| "<anonymous>".into()),
            action: e.request.action.clone(),
            resource_class: e.request.service_id().unwrap_or_default().to_string(),
            permitted: e.decision.outcome == Outcome::Permit,
            timestamp: e.timestamp,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BusinessTransaction {
    pub subject: String,
    pub events: Vec<AuditEvent>,
    pub start: Millis,
    pub end: Millis,
}

/// Splits each subject's events wherever the gap to the previous event
/// exceeds `gap`. Output is ordered by subject, then start time.
pub fn aggregate(events: &[AuditEvent], gap: Millis) -> Vec<BusinessTransaction> {
    let mut by_subject: BTreeMap<&str, Vec<&AuditEvent>> = BTreeMap::new();
    for e in events {
        by_subject.entry(&e.subject).or_default().push(e);
    }
    let mut out = Vec::new();
    for (subject, mut evs) in by_subject {
        evs.sort_by_key(|e| e.timestamp);
        let mut current: Vec<AuditEvent> = Vec::new();
        for e in evs {
            if let Some(last) = current.last() {
                if e.timestamp - last.timestamp > gap {
                    out.push(transaction(subject, std::mem::take(&mut current)));
                }
            }
            current.push(e.clone());
        }
        if !current.is_empty() {
            out.push(transaction(subject, current));
        }
    }
    out
}

fn transaction(subject: &str, events: Vec<AuditEvent>) -> BusinessTransaction {
    BusinessTransaction {
        subject: subject.to_string(),
        start: events[0].timestamp,
        end: events[events.len() - 1].timestamp,
        events,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinedRole {
    pub role_id: String,
    pub members: BTreeSet<String>,
    pub signature: BTreeSet<Permission>,
}

pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Permitted `(action, resource class)` pairs per subject.
pub fn permission_sets(events: &[AuditEvent]) -> BTreeMap<String, BTreeSet<Permission>> {
    let mut out: BTreeMap<String, BTreeSet<Permission>> = BTreeMap::new();
    for e in events.iter().filter(|e| e.permitted) {
        out.entry(e.subject.clone()).or_default().insert(e.permission());
    }
    out
}

/// True when every member's set is at least `theta`-similar to the
/// intersection of all members' sets.
pub fn block_is_valid(sets: &[&BTreeSet<Permission>], theta: f64) -> bool {
    let Some((first, rest)) = sets.split_first() else {
        return true;
    };
    let common: BTreeSet<Permission> = rest
        .iter()
        .fold((*first).clone(), |acc, s| acc.intersection(s).cloned().collect());
    sets.iter().all(|s| jaccard(s, &common) >= theta)
}

struct Cluster {
    members: BTreeSet<String>,
    signature: BTreeSet<Permission>,
}

/// Greedy agglomerative clustering of subjects by the Jaccard similarity of
/// their cluster signatures (the intersection of member sets).
///
/// Each round merges the most similar pair whose merge keeps every member
/// within `theta` of the new signature; ties go to the pair whose smallest
/// member ids sort first. Stops when no such pair reaches `theta`.
pub fn mine_roles(events: &[AuditEvent], theta: f64) -> Vec<MinedRole> {
    let sets = permission_sets(events);
    let mut clusters: Vec<Cluster> = sets
        .iter()
        .map(|(s, p)| Cluster {
            members: [s.clone()].into(),
            signature: p.clone(),
        })
        .collect();
    loop {
        let mut best: Option<(f64, (&str, &str), usize, usize)> = None;
        for i in 0..clusters.len() {
            for j in i + 1..clusters.len() {
                let sim = jaccard(&clusters[i].signature, &clusters[j].signature);
                if sim < theta {
                    continue;
                }
                let members: Vec<&BTreeSet<Permission>> = clusters[i]
                    .members
                    .iter()
                    .chain(&clusters[j].members)
                    .map(|m| &sets[m])
                    .collect();
                if !block_is_valid(&members, theta) {
                    continue;
                }
                let key = (
                    clusters[i].members.first().expect("non-empty").as_str(),
                    clusters[j].members.first().expect("non-empty").as_str(),
                );
                let key = if key.0 <= key.1 { key } else { (key.1, key.0) };
                let better = match &best {
                    None => true,
                    Some((bs, bk, _, _)) => sim > *bs || (sim == *bs && key < *bk),
                };
                if better {
                    best = Some((sim, key, i, j));
                }
            }
        }
        let Some((_, _, i, j)) = best else { break };
        let b = clusters.remove(j);
        let a = &mut clusters[i];
        a.signature = a.signature.intersection(&b.signature).cloned().collect();
        a.members.extend(b.members);
    }
    clusters.sort_by(|a, b| a.members.first().cmp(&b.members.first()));
    clusters
        .into_iter()
        .enumerate()
        .map(|(n, c)| MinedRole {
            role_id: format!("role-{}", n + 1),
            members: c.members,
            signature: c.signature,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// A subject is probing when it collects more than this many denials...
    pub probe_threshold: usize,
    /// ...within any window of this length.
    pub probe_window: Millis,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            probe_threshold: DEFAULT_PROBE_THRESHOLD,
            probe_window: DEFAULT_GAP,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "finding", rename_all = "snake_case")]
pub enum Finding {
    OutOfRole {
        subject: String,
        action: String,
        resource_class: String,
        timestamp: Millis,
        /// Position of the event in the analysed list.
        index: usize,
    },
    Probing {
        subject: String,
        window_start: Millis,
        denials: usize,
    },
    /// A granted permission no role member ever exercised.
    ExcessGrant { action: String, resource_class: String },
}

impl Finding {
    pub fn to_alert(&self) -> AlertDraft {
        let (subject, severity, message) = match self {
            Finding::OutOfRole {
                subject,
                action,
                resource_class,
                timestamp,
                ..
            } => (
                subject.clone(),
                Severity::Warn,
                format!("out-of-role {action} on {resource_class} at {timestamp}"),
            ),
            Finding::Probing {
                subject,
                window_start,
                denials,
            } => (
                subject.clone(),
                Severity::Warn,
                format!("{denials} denials in the window starting {window_start}"),
            ),
            Finding::ExcessGrant { action, resource_class } => (
                resource_class.clone(),
                Severity::Info,
                format!("{action} on {resource_class} is granted but never exercised"),
            ),
        };
        AlertDraft::new(AlertKind::AuditFinding, severity, &subject, message)
    }
}

/// Flags permitted events outside the subject's role signature, and
/// subjects whose denials in some window exceed the threshold. Subjects
/// without a role have an empty signature.
pub fn detect_anomalies(events: &[AuditEvent], roles: &[MinedRole], config: &DetectorConfig) -> Vec<Finding> {
    let mut signature_of: BTreeMap<&str, &BTreeSet<Permission>> = BTreeMap::new();
    for r in roles {
        for m in &r.members {
            signature_of.insert(m, &r.signature);
        }
    }
    let empty = BTreeSet::new();
    let mut findings: Vec<Finding> = events
        .iter()
        .enumerate()
        .filter(|(_, e)| e.permitted)
        .filter(|(_, e)| !signature_of.get(e.subject.as_str()).copied().unwrap_or(&empty).contains(&e.permission()))
        .map(|(index, e)| Finding::OutOfRole {
            subject: e.subject.clone(),
            action: e.action.clone(),
            resource_class: e.resource_class.clone(),
            timestamp: e.timestamp,
            index,
        })
        .collect();

    let mut denials: BTreeMap<&str, Vec<Millis>> = BTreeMap::new();
    for e in events.iter().filter(|e| !e.permitted) {
        denials.entry(&e.subject).or_default().push(e.timestamp);
    }
    for (subject, mut times) in denials {
        times.sort_unstable();
        let mut lo = 0;
        for hi in 0..times.len() {
            while times[hi] - times[lo] > config.probe_window {
                lo += 1;
            }
            let count = hi - lo + 1;
            if count > config.probe_threshold {
                findings.push(Finding::Probing {
                    subject: subject.to_string(),
                    window_start: times[lo],
                    denials: times[lo..].iter().take_while(|t| **t - times[lo] <= config.probe_window).count(),
                });
                break;
            }
        }
    }
    findings
}

/// Granted permissions never exercised by any subject.
pub fn excess_grants(events: &[AuditEvent], granted: &BTreeSet<Permission>) -> Vec<Finding> {
    let exercised: BTreeSet<Permission> = events.iter().filter(|e| e.permitted).map(AuditEvent::permission).collect();
    granted
        .difference(&exercised)
        .map(|(action, resource_class)| Finding::ExcessGrant {
            action: action.clone(),
            resource_class: resource_class.clone(),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub transactions: usize,
    pub roles: Vec<MinedRole>,
    pub findings: Vec<Finding>,
}

/// Mines roles on events before `train_until` (all events when `None`),
/// then scans every event.
pub fn run_audit(
    events: &[AuditEvent],
    train_until: Option<Millis>,
    theta: f64,
    gap: Millis,
    config: &DetectorConfig,
) -> AuditReport {
    let training: Vec<AuditEvent> = match train_until {
        Some(t) => events.iter().filter(|e| e.timestamp < t).cloned().collect(),
        None => events.to_vec(),
    };
    let roles = mine_roles(&training, theta);
    AuditReport {
        transactions: aggregate(events, gap).len(),
        findings: detect_anomalies(events, &roles, config),
        roles,
    }
}

/// Pushes findings to the feed; returns how many were new.
pub fn publish_findings(findings: &[Finding], feed: &AlertFeed) -> usize {
    findings.iter().filter_map(|f| feed.raise(f.to_alert())).count()
}
