//! Offline subcommands over files: masking, anonymization, differential
//! privacy and the access-log audit.

use std::collections::BTreeMap;

use anyhow::{anyhow, bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use serde_json::Value;

use faas_core::anonymization::dataset::Dataset;
use faas_core::anonymization::dp::{dp_release, DpQuery, DpRelease};
use faas_core::anonymization::kanon::{k_anonymize_with, GeneralizationHierarchy, KAnonConfig, KAnonRelease};
use faas_core::audit::{publish_findings, run_audit, AuditEvent, AuditReport, DetectorConfig};
use faas_core::clock::{Millis, SimClock};
use faas_core::masking::{mask_document, unmask_document, validate_masking_policy, KeyRing, MaskingPolicy, TokenizationTable};
use faas_core::monitor::{Alert, AlertFeed};
use faas_core::orchestrator::derive_key;
use faas_core::policy::peg::AccessEvent;
use faas_core::registry::{parse_ledger, verify_ledger_bytes, ChainStatus, RecordKind};

fn policy(text: &str) -> Result<MaskingPolicy> {
    validate_masking_policy(text).map_err(|issues| {
        let list: Vec<String> = issues.iter().map(|i| format!("rule {}: {}", i.rule, i.message)).collect();
        anyhow!("invalid masking policy: {}", list.join("; "))
    })
}

/// Keys named by the policy, derived from the seed.
fn keys(policy: &MaskingPolicy, seed: u64) -> KeyRing {
    let mut ring = KeyRing::new();
    for rule in &policy.rules {
        if let Some(id) = rule.params.get("key") {
            ring.insert(id, derive_key(&format!("masking:{id}"), seed));
        }
    }
    ring
}

#[derive(Debug, Serialize)]
pub struct Masked {
    pub document: Value,
    pub table: TokenizationTable,
}

/// Masks `payload`; `table` continues an existing tokenization table.
pub fn mask(payload: &str, policy_text: &str, table: Option<&str>, seed: u64) -> Result<Masked> {
    let doc: Value = serde_json::from_str(payload).context("payload is not JSON")?;
    let policy = policy(policy_text)?;
    let mut table = match table {
        Some(t) => TokenizationTable::from_json(t.as_bytes()).context("tokenization table")?,
        None => TokenizationTable::default(),
    };
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let document = mask_document(&doc, &policy, &mut table, &keys(&policy, seed), &mut rng)?;
    Ok(Masked { document, table })
}

pub fn unmask(masked: &str, policy_text: &str, table: &str, seed: u64) -> Result<Value> {
    let doc: Value = serde_json::from_str(masked).context("masked payload is not JSON")?;
    let policy = policy(policy_text)?;
    let table = TokenizationTable::from_json(table.as_bytes()).context("tokenization table")?;
    Ok(unmask_document(&doc, &policy, &table, &keys(&policy, seed))?)
}

/// k-anonymizes a delimited dataset with per-column hierarchies given as
/// a JSON object `{column: {"levels": [...]}}`.
pub fn anonymize(data: &str, delimiter: u8, hierarchies: &str, k: usize, max_suppressed: usize) -> Result<KAnonRelease> {
    let dataset = Dataset::from_delimited(data, delimiter)?;
    let raw: BTreeMap<String, GeneralizationHierarchy> =
        serde_json::from_str(hierarchies).context("hierarchies are not a JSON object of hierarchies")?;
    let mut checked = BTreeMap::new();
    for (col, h) in raw {
        let h = GeneralizationHierarchy::new(h.levels).map_err(|e| anyhow!("hierarchy for {col}: {e}"))?;
        checked.insert(col, h);
    }
    Ok(k_anonymize_with(&dataset, &KAnonConfig::new(k).with_max_suppressed(max_suppressed), &checked)?)
}

/// `count`, `sum:<column>` or `avg:<column>`.
pub fn parse_query(s: &str) -> Result<DpQuery> {
    match s.split_once(':') {
        None if s.eq_ignore_ascii_case("count") => Ok(DpQuery::Count),
        Some((q, col)) if q.eq_ignore_ascii_case("sum") => Ok(DpQuery::Sum(col.to_string())),
        Some((q, col)) if q.eq_ignore_ascii_case("avg") => Ok(DpQuery::Avg(col.to_string())),
        _ => bail!("query must be count, sum:<column> or avg:<column>, got {s:?}"),
    }
}

pub fn dp_query(data: &str, delimiter: u8, query: &DpQuery, epsilon: f64, sensitivity: Option<f64>, seed: u64) -> Result<DpRelease> {
    let dataset = Dataset::from_delimited(data, delimiter)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    Ok(dp_release(&dataset, query, epsilon, sensitivity, &mut rng)?)
}

#[derive(Debug, Serialize)]
pub struct AuditOutput {
    pub events: usize,
    pub report: AuditReport,
    pub alerts: Vec<Alert>,
}

/// Audits the access log held in a ledger file. The file must verify.
pub fn audit_ledger(bytes: &[u8], train_until: Option<Millis>, theta: f64, gap: Millis) -> Result<AuditOutput> {
    if let ChainStatus::Violation(i) = verify_ledger_bytes(bytes) {
        bail!("ledger fails verification at block {i}; refusing to audit tampered evidence");
    }
    let blocks = parse_ledger(bytes).map_err(|line| anyhow!("ledger line {line} does not parse"))?;
    let mut events = Vec::new();
    for block in &blocks {
        for r in block.records.iter().filter(|r| r.kind == RecordKind::AccessLog && !r.tombstone) {
            let e: AccessEvent = r.decode().with_context(|| format!("access event {}", r.key))?;
            events.push(AuditEvent::from(&e));
        }
    }
    let report = run_audit(&events, train_until, theta, gap, &DetectorConfig::default());
    let feed = AlertFeed::new(SimClock::new(blocks.last().map_or(0, |b| b.timestamp)));
    publish_findings(&report.findings, &feed);
    Ok(AuditOutput {
        events: events.len(),
        report,
        alerts: feed.all(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const POLICY: &str = r#"{"rules":[
        {"selector":"name","op":"TOKENIZE"},
        {"selector":"card","op":"FPE","params":{"key":"k1"}},
        {"selector":"ssn","op":"REDACT"}
    ]}"#;

    #[test]
    fn mask_then_unmask_restores_reversible_fields() {
        let payload = r#"{"name":"Ada","card":"4111-1111","ssn":"123-45-6789","keep":1}"#;
        let masked = mask(payload, POLICY, None, 9).unwrap();
        assert_ne!(masked.document["name"], "Ada");
        assert_eq!(masked.document["ssn"], "*****");
        let table = serde_json::to_string(&masked.table).unwrap();
        let back = unmask(&masked.document.to_string(), POLICY, &table, 9).unwrap();
        assert_eq!(back["name"], "Ada");
        assert_eq!(back["card"], "4111-1111");
        assert_eq!(back["ssn"], "*****");
        assert_eq!(back["keep"], 1);
    }

    #[test]
    fn query_grammar() {
        assert_eq!(parse_query("count").unwrap(), DpQuery::Count);
        assert_eq!(parse_query("sum:age").unwrap(), DpQuery::Sum("age".into()));
        assert!(parse_query("median:age").is_err());
    }
}
