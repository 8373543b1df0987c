//! Attribute-based access control.
//!
//! A policy is a target (a conjunction of attribute predicates), an effect,
//! and obligations that run on the provider's result. Decisions combine with
//! deny-overrides; NOT_APPLICABLE is left for the enforcement gateway to
//! treat as a denial.
//!
//! Attribute paths live in four namespaces: `subject.<name>`,
//! `action.id`, `resource.<name>` and `environment.<name>`. A predicate over
//! a missing attribute is false.

pub mod pap;
pub mod peg;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::anonymization::{DpQuery, GeneralizationHierarchy};
use crate::digest::Digest;
use crate::masking::{check_policy, MaskingPolicy};

pub use pap::{pap_check_amendment, AdminPolicy, PapVerdict, PolicyField};
pub use peg::{
    AccessEvent, AccessEventSink, DecisionFn, DtsServices, EnforcementOutcome, EnforcementStatus, Peg, Pip, Prp,
};

pub const NAMESPACES: [&str; 4] = ["subject", "action", "resource", "environment"];

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("malformed policy {policy}: {reason}")]
    MalformedPolicy { policy: String, reason: String },
    #[error("authentication failed")]
    AuthFailed,
    #[error("unknown attribute {0}")]
    UnknownAttribute(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("obligation failed: {0}")]
    ObligationFailed(String),
    #[error("provider failed: {0}")]
    ProviderFailed(String),
    #[error("access event not recorded: {0}")]
    EventNotRecorded(String),
    #[error("stored policies are unreadable: {0}")]
    PolicyDecode(String),
    #[error(transparent)]
    Registry(#[from] crate::registry::RegistryError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Phase {
    Request,
    Usage,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Request => "REQUEST",
            Phase::Usage => "USAGE",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessRequest {
    pub subject: BTreeMap<String, String>,
    pub action: String,
    pub resource: BTreeMap<String, String>,
    pub environment: BTreeMap<String, String>,
}

impl AccessRequest {
    pub fn new(
        subject: BTreeMap<String, String>,
        action: &str,
        resource: BTreeMap<String, String>,
        phase: Phase,
    ) -> Self {
        Self {
            subject,
            action: action.to_string(),
            resource,
            environment: [("phase".to_string(), phase.as_str().to_string())].into(),
        }
    }

    pub fn check(&self) -> Result<(), PolicyError> {
        if self.subject.is_empty() {
            return Err(PolicyError::InvalidRequest("empty subject".into()));
        }
        if self.resource.is_empty() {
            return Err(PolicyError::InvalidRequest("empty resource".into()));
        }
        match self.environment.get("phase").map(String::as_str) {
            Some("REQUEST" | "USAGE") => Ok(()),
            Some(other) => Err(PolicyError::InvalidRequest(format!("unknown phase {other:?}"))),
            None => Err(PolicyError::InvalidRequest("missing environment.phase".into())),
        }
    }

    pub fn phase(&self) -> Option<Phase> {
        match self.environment.get("phase").map(String::as_str) {
            Some("REQUEST") => Some(Phase::Request),
            Some("USAGE") => Some(Phase::Usage),
            _ => None,
        }
    }

    pub fn service_id(&self) -> Option<&str> {
        self.resource.get("service_id").map(String::as_str)
    }

    /// Looks up `namespace.name`; `None` when absent.
    pub fn attribute(&self, path: &str) -> Option<&str> {
        let (ns, name) = path.split_once('.')?;
        match ns {
            "subject" => self.subject.get(name).map(String::as_str),
            "action" if name == "id" => Some(self.action.as_str()),
            "resource" => self.resource.get(name).map(String::as_str),
            "environment" => self.environment.get(name).map(String::as_str),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operator {
    Equals,
    NotEquals,
    In,
    Le,
    Ge,
}

impl Operator {
    const NAMES: [(&'static str, Operator); 5] = [
        ("equals", Operator::Equals),
        ("not_equals", Operator::NotEquals),
        ("in", Operator::In),
        ("le", Operator::Le),
        ("ge", Operator::Ge),
    ];

    pub fn parse(s: &str) -> Option<Self> {
        Self::NAMES.iter().find(|(n, _)| *n == s).map(|(_, op)| *op)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Literal {
    Number(f64),
    Text(String),
    Set(Vec<String>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    pub attribute: String,
    pub op: Operator,
    pub value: Literal,
}

impl Predicate {
    pub fn new(attribute: &str, op: Operator, value: Literal) -> Self {
        Self {
            attribute: attribute.to_string(),
            op,
            value,
        }
    }

    pub fn equals(attribute: &str, value: &str) -> Self {
        Self::new(attribute, Operator::Equals, Literal::Text(value.to_string()))
    }

    pub fn not_equals(attribute: &str, value: &str) -> Self {
        Self::new(attribute, Operator::NotEquals, Literal::Text(value.to_string()))
    }

    pub fn in_set<S: AsRef<str>>(attribute: &str, values: &[S]) -> Self {
        Self::new(
            attribute,
            Operator::In,
            Literal::Set(values.iter().map(|v| v.as_ref().to_string()).collect()),
        )
    }

    fn problem(&self) -> Option<String> {
        match self.attribute.split_once('.') {
            Some((ns, name)) if NAMESPACES.contains(&ns) && !name.is_empty() => {
                if ns == "action" && name != "id" {
                    return Some(format!("action namespace only has \"id\", got {:?}", self.attribute));
                }
            }
            Some((ns, _)) => return Some(format!("unknown attribute namespace \"{ns}.\"")),
            None => return Some(format!("attribute {:?} has no namespace", self.attribute)),
        }
        match (self.op, &self.value) {
            (Operator::Equals | Operator::NotEquals, Literal::Text(_) | Literal::Number(_)) => None,
            (Operator::In, Literal::Set(_)) => None,
            (Operator::Le | Operator::Ge, Literal::Number(n)) if n.is_finite() => None,
            (op, _) => Some(format!("literal does not fit operator {op:?}")),
        }
    }

    /// Assumes the predicate is well formed.
    pub fn holds(&self, request: &AccessRequest) -> bool {
        let Some(actual) = request.attribute(&self.attribute) else {
            return false;
        };
        let numeric = || actual.trim().parse::<f64>().ok();
        match (self.op, &self.value) {
            (Operator::Equals, Literal::Text(t)) => actual == t,
            (Operator::Equals, Literal::Number(n)) => numeric() == Some(*n),
            (Operator::NotEquals, Literal::Text(t)) => actual != t,
            (Operator::NotEquals, Literal::Number(n)) => numeric() != Some(*n),
            (Operator::In, Literal::Set(set)) => set.iter().any(|s| s == actual),
            (Operator::Le, Literal::Number(n)) => numeric().is_some_and(|a| a <= *n),
            (Operator::Ge, Literal::Number(n)) => numeric().is_some_and(|a| a >= *n),
            _ => false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Effect {
    Permit,
    Deny,
}

/// A data transformation applied to a permitted result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dts", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DtsInvocation {
    Mask {
        policy: MaskingPolicy,
    },
    /// Tabular results only. Quasi-identifiers without a hierarchy fall back
    /// to suppression.
    Anonymize {
        k: usize,
        #[serde(default)]
        max_suppressed: usize,
        #[serde(default)]
        hierarchies: BTreeMap<String, GeneralizationHierarchy>,
    },
    DifferentialPrivacy {
        query: DpQuery,
        epsilon: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sensitivity: Option<f64>,
        budget: f64,
    },
    /// Present so documents naming it parse; always rejected by validation.
    Smc {},
}

impl DtsInvocation {
    fn problem(&self) -> Option<String> {
        match self {
            DtsInvocation::Mask { policy } => check_policy(policy).err().map(|issues| {
                let msgs: Vec<String> = issues.into_iter().map(|i| i.message).collect();
                format!("masking obligation: {}", msgs.join("; "))
            }),
            DtsInvocation::Anonymize { k, .. } if *k == 0 => Some("anonymize obligation needs k >= 1".into()),
            DtsInvocation::Anonymize { .. } => None,
            DtsInvocation::DifferentialPrivacy {
                query,
                epsilon,
                sensitivity,
                budget,
            } => {
                if !(*epsilon > 0.0 && epsilon.is_finite()) {
                    Some(format!("epsilon must be positive, got {epsilon}"))
                } else if !(*budget >= 0.0 && budget.is_finite()) {
                    Some(format!("budget must be non-negative, got {budget}"))
                } else if !matches!(query, DpQuery::Count) && sensitivity.is_none_or(|s| !(s > 0.0)) {
                    Some("SUM and AVG need a positive sensitivity".into())
                } else {
                    None
                }
            }
            DtsInvocation::Smc {} => {
                Some("SMC provides a service and cannot be applied to a result as an obligation".into())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub id: String,
    #[serde(default)]
    pub target: Vec<Predicate>,
    pub effect: Effect,
    #[serde(default)]
    pub obligations: Vec<DtsInvocation>,
    #[serde(default)]
    pub version: u64,
}

impl Policy {
    pub fn permit(id: &str, target: Vec<Predicate>) -> Self {
        Self {
            id: id.to_string(),
            target,
            effect: Effect::Permit,
            obligations: Vec::new(),
            version: 0,
        }
    }

    pub fn deny(id: &str, target: Vec<Predicate>) -> Self {
        Self {
            effect: Effect::Deny,
            ..Self::permit(id, target)
        }
    }

    pub fn with_obligation(mut self, o: DtsInvocation) -> Self {
        self.obligations.push(o);
        self
    }

    pub fn applies_to(&self, request: &AccessRequest) -> bool {
        self.target.iter().all(|p| p.holds(request))
    }

    fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.id.is_empty() {
            out.push("empty policy id".into());
        }
        out.extend(self.target.iter().filter_map(Predicate::problem));
        out.extend(self.obligations.iter().filter_map(DtsInvocation::problem));
        if self.effect == Effect::Deny && !self.obligations.is_empty() {
            out.push("obligations on a DENY policy never apply".into());
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Outcome {
    Permit,
    Deny,
    NotApplicable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub outcome: Outcome,
    pub matched_policy_ids: Vec<String>,
    pub obligations: Vec<DtsInvocation>,
    pub policy_version_digest: Digest,
}

impl Decision {
    pub fn is_permit(&self) -> bool {
        self.outcome == Outcome::Permit
    }
}

/// Digest over the canonical text of a policy list; identifies which
/// version a decision was made against.
pub fn policy_set_digest(policies: &[Policy]) -> Digest {
    Digest::of(&serde_json::to_vec(policies).expect("policies serialize"))
}

/// Deny-overrides evaluation. Matched ids are those of the policies that
/// determined the outcome.
pub fn pdp_decide(request: &AccessRequest, policies: &[Policy]) -> Result<Decision, PolicyError> {
    for p in policies {
        if let Some(reason) = p.target.iter().find_map(Predicate::problem) {
            return Err(PolicyError::MalformedPolicy {
                policy: p.id.clone(),
                reason,
            });
        }
    }
    let applicable: Vec<&Policy> = policies.iter().filter(|p| p.applies_to(request)).collect();
    let deny: Vec<String> = applicable
        .iter()
        .filter(|p| p.effect == Effect::Deny)
        .map(|p| p.id.clone())
        .collect();
    let digest = policy_set_digest(policies);
    if !deny.is_empty() {
        return Ok(Decision {
            outcome: Outcome::Deny,
            matched_policy_ids: deny,
            obligations: Vec::new(),
            policy_version_digest: digest,
        });
    }
    let permits: Vec<&&Policy> = applicable.iter().filter(|p| p.effect == Effect::Permit).collect();
    if permits.is_empty() {
        return Ok(Decision {
            outcome: Outcome::NotApplicable,
            matched_policy_ids: Vec::new(),
            obligations: Vec::new(),
            policy_version_digest: digest,
        });
    }
    let mut obligations: Vec<DtsInvocation> = Vec::new();
    for o in permits.iter().flat_map(|p| &p.obligations) {
        if !obligations.contains(o) {
            obligations.push(o.clone());
        }
    }
    Ok(Decision {
        outcome: Outcome::Permit,
        matched_policy_ids: permits.iter().map(|p| p.id.clone()).collect(),
        obligations,
        policy_version_digest: digest,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntaxIssue {
    /// Position of the policy in the document, if the problem is local to one.
    pub policy: Option<usize>,
    pub message: String,
}

impl std::fmt::Display for SyntaxIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.policy {
            Some(i) => write!(f, "policy {i}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// Checks a policy document (a JSON array of policies) and reports every
/// problem found, naming offending operators and namespaces.
pub fn validate_policy_syntax(document: &str) -> Result<Vec<Policy>, Vec<SyntaxIssue>> {
    let doc: Value = serde_json::from_str(document).map_err(|e| {
        vec![SyntaxIssue {
            policy: None,
            message: format!("unparseable document: {e}"),
        }]
    })?;
    validate_policy_value(&doc)
}

pub fn validate_policy_value(doc: &Value) -> Result<Vec<Policy>, Vec<SyntaxIssue>> {
    let Some(items) = doc.as_array() else {
        return Err(vec![SyntaxIssue {
            policy: None,
            message: "policy document must be a list".into(),
        }]);
    };
    let mut issues = Vec::new();
    let mut policies = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, item) in items.iter().enumerate() {
        let mut local: Vec<String> = Vec::new();
        let mut issue = |message: String| local.push(message);
        if let Some(preds) = item.get("target").and_then(Value::as_array) {
            for p in preds {
                if let Some(op) = p.get("op").and_then(Value::as_str) {
                    if Operator::parse(op).is_none() {
                        issue(format!("unknown operator \"{op}\""));
                    }
                }
                if let Some(attr) = p.get("attribute").and_then(Value::as_str) {
                    match attr.split_once('.') {
                        Some((ns, _)) if !NAMESPACES.contains(&ns) => {
                            issue(format!("unknown attribute namespace \"{ns}.\""))
                        }
                        _ => {}
                    }
                }
            }
        }
        if let Some(effect) = item.get("effect").and_then(Value::as_str) {
            if effect != "PERMIT" && effect != "DENY" {
                issue(format!("unknown effect \"{effect}\""));
            }
        }
        if local.is_empty() {
            match serde_json::from_value::<Policy>(item.clone()) {
                Ok(p) => {
                    local.extend(p.problems());
                    if !ids.insert(p.id.clone()) {
                        local.push(format!("duplicate policy id {:?}", p.id));
                    }
                    policies.push(p);
                }
                Err(e) => local.push(format!("malformed policy: {e}")),
            }
        }
        issues.extend(local.into_iter().map(|message| SyntaxIssue {
            policy: Some(i),
            message,
        }));
    }
    if issues.is_empty() {
        Ok(policies)
    } else {
        Err(issues)
    }
}

/// Structural check for policies built in code.
pub fn check_policies(policies: &[Policy]) -> Result<(), Vec<SyntaxIssue>> {
    validate_policy_value(&serde_json::to_value(policies).expect("policies serialize")).map(|_| ())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{MaskOp, MaskRule};
    use proptest::prelude::*;

    fn req(cloud: &str, phase: Phase) -> AccessRequest {
        AccessRequest::new(
            [("id".into(), format!("u@{cloud}")), ("home_cloud".into(), cloud.into())].into(),
            "invoke",
            [("service_id".into(), "svc".into())].into(),
            phase,
        )
    }

    #[test]
    fn decide_examples() {
        let r = req("A", Phase::Usage);
        assert_eq!(pdp_decide(&r, &[]).unwrap().outcome, Outcome::NotApplicable);
        let permit = Policy::permit("p", vec![Predicate::equals("subject.home_cloud", "A")]);
        let d = pdp_decide(&r, &[permit.clone()]).unwrap();
        assert_eq!(d.outcome, Outcome::Permit);
        assert_eq!(d.matched_policy_ids, vec!["p".to_string()]);
        let deny = Policy::deny("d", vec![Predicate::equals("action.id", "invoke")]);
        let d = pdp_decide(&r, &[permit, deny]).unwrap();
        assert_eq!(d.outcome, Outcome::Deny);
        assert_eq!(d.matched_policy_ids, vec!["d".to_string()]);
    }

    /// Every combination of two policies' effects and applicability against
    /// the deny-overrides table.
    #[test]
    fn two_policy_combining_table() {
        let r = req("A", Phase::Usage);
        let matching = Predicate::equals("subject.home_cloud", "A");
        let missing = Predicate::equals("subject.home_cloud", "B");
        for e1 in [Effect::Permit, Effect::Deny] {
            for e2 in [Effect::Permit, Effect::Deny] {
                for a1 in [false, true] {
                    for a2 in [false, true] {
                        let mk = |id: &str, e: Effect, a: bool| Policy {
                            effect: e,
                            ..Policy::permit(id, vec![if a { matching.clone() } else { missing.clone() }])
                        };
                        let set = [mk("1", e1, a1), mk("2", e2, a2)];
                        let effects: Vec<Effect> = [(e1, a1), (e2, a2)]
                            .iter()
                            .filter(|(_, a)| *a)
                            .map(|(e, _)| *e)
                            .collect();
                        let expected = if effects.contains(&Effect::Deny) {
                            Outcome::Deny
                        } else if effects.contains(&Effect::Permit) {
                            Outcome::Permit
                        } else {
                            Outcome::NotApplicable
                        };
                        assert_eq!(pdp_decide(&r, &set).unwrap().outcome, expected);
                    }
                }
            }
        }
    }

    #[test]
    fn operators() {
        let mut r = req("A", Phase::Usage);
        r.subject.insert("clearance".into(), "3".into());
        let holds = |p: Predicate| p.holds(&r);
        assert!(holds(Predicate::new("subject.clearance", Operator::Le, Literal::Number(3.0))));
        assert!(holds(Predicate::new("subject.clearance", Operator::Ge, Literal::Number(3.0))));
        assert!(!holds(Predicate::new("subject.clearance", Operator::Ge, Literal::Number(3.5))));
        assert!(holds(Predicate::new("subject.clearance", Operator::Equals, Literal::Number(3.0))));
        assert!(holds(Predicate::in_set("subject.home_cloud", &["A", "B"])));
        assert!(!holds(Predicate::in_set("subject.home_cloud", &["C"])));
        assert!(holds(Predicate::not_equals("subject.home_cloud", "B")));
        // Missing attributes never satisfy a predicate, not even not_equals.
        assert!(!holds(Predicate::not_equals("subject.missing", "B")));
        assert!(!holds(Predicate::new("subject.home_cloud", Operator::Le, Literal::Number(1.0))));
        assert!(holds(Predicate::equals("environment.phase", "USAGE")));
        assert!(!holds(Predicate::equals("action.name", "invoke")));
    }

    #[test]
    fn empty_target_applies_everywhere() {
        let d = pdp_decide(&req("Z", Phase::Request), &[Policy::permit("all", vec![])]).unwrap();
        assert!(d.is_permit());
    }

    #[test]
    fn malformed_predicates_are_errors() {
        let bad = Policy::permit("p", vec![Predicate::new("subject.x", Operator::In, Literal::Text("a".into()))]);
        assert!(matches!(
            pdp_decide(&req("A", Phase::Usage), &[bad]),
            Err(PolicyError::MalformedPolicy { .. })
        ));
        let bad_ns = Policy::permit("p", vec![Predicate::equals("foo.x", "a")]);
        assert!(pdp_decide(&req("A", Phase::Usage), &[bad_ns]).is_err());
    }

    #[test]
    fn obligations_are_unioned_in_order() {
        let redact = DtsInvocation::Mask {
            policy: MaskingPolicy::new(vec![MaskRule::new("ssn", MaskOp::Redact)]),
        };
        let anon = DtsInvocation::Anonymize {
            k: 2,
            max_suppressed: 0,
            hierarchies: BTreeMap::new(),
        };
        let p1 = Policy::permit("a", vec![]).with_obligation(redact.clone());
        let p2 = Policy::permit("b", vec![])
            .with_obligation(anon.clone())
            .with_obligation(redact.clone());
        let d = pdp_decide(&req("A", Phase::Usage), &[p1.clone(), p2]).unwrap();
        assert_eq!(d.obligations, vec![redact, anon]);
        let d = pdp_decide(&req("A", Phase::Usage), &[p1, Policy::deny("x", vec![])]).unwrap();
        assert!(d.obligations.is_empty());
    }

    #[test]
    fn digest_tracks_content() {
        let a = vec![Policy::permit("p", vec![Predicate::equals("subject.home_cloud", "A")])];
        let mut b = a.clone();
        assert_eq!(policy_set_digest(&a), policy_set_digest(&b));
        b[0].effect = Effect::Deny;
        assert_ne!(policy_set_digest(&a), policy_set_digest(&b));
    }

    #[test]
    fn syntax_examples() {
        let good = r#"[{"id":"p","target":[{"attribute":"subject.home_cloud","op":"equals","value":"A"}],"effect":"PERMIT"}]"#;
        assert_eq!(validate_policy_syntax(good).unwrap().len(), 1);

        let regex = r#"[{"id":"p","target":[{"attribute":"subject.id","op":"regex","value":".*"}],"effect":"PERMIT"}]"#;
        let errs = validate_policy_syntax(regex).unwrap_err();
        assert!(errs[0].message.contains("\"regex\""), "{errs:?}");

        let ns = r#"[{"id":"p","target":[{"attribute":"foo.bar","op":"equals","value":"x"}],"effect":"PERMIT"}]"#;
        let errs = validate_policy_syntax(ns).unwrap_err();
        assert!(errs[0].message.contains("\"foo.\""), "{errs:?}");

        let effect = r#"[{"id":"p","effect":"MAYBE"}]"#;
        assert!(validate_policy_syntax(effect).unwrap_err()[0].message.contains("MAYBE"));

        let dup = r#"[{"id":"p","effect":"PERMIT"},{"id":"p","effect":"DENY"}]"#;
        assert!(validate_policy_syntax(dup).is_err());
        assert!(validate_policy_syntax("{}").is_err());
        assert!(validate_policy_syntax("nope").is_err());
    }

    #[test]
    fn obligation_documents() {
        let doc = r#"[{"id":"p","effect":"PERMIT","obligations":[
            {"dts":"MASK","policy":{"rules":[{"selector":"ssn","op":"REDACT"}]}},
            {"dts":"ANONYMIZE","k":2},
            {"dts":"DIFFERENTIAL_PRIVACY","query":{"query":"SUM","column":"salary"},"epsilon":0.5,"sensitivity":10,"budget":1}
        ]}]"#;
        let p = validate_policy_syntax(doc).unwrap();
        assert_eq!(p[0].obligations.len(), 3);
        let smc = r#"[{"id":"p","effect":"PERMIT","obligations":[{"dts":"SMC"}]}]"#;
        assert!(validate_policy_syntax(smc).unwrap_err()[0].message.contains("SMC"));
        let no_sens = r#"[{"id":"p","effect":"PERMIT","obligations":[
            {"dts":"DIFFERENTIAL_PRIVACY","query":{"query":"AVG","column":"x"},"epsilon":1,"budget":1}]}]"#;
        assert!(validate_policy_syntax(no_sens).is_err());
        let bad_mask = r#"[{"id":"p","effect":"PERMIT","obligations":[
            {"dts":"MASK","policy":{"rules":[{"selector":"a","op":"ENCRYPT"}]}}]}]"#;
        assert!(validate_policy_syntax(bad_mask).is_err());
        // Canonical text round trip.
        let text = serde_json::to_string(&p).unwrap();
        assert_eq!(validate_policy_syntax(&text).unwrap(), p);
    }

    fn arb_predicate() -> impl Strategy<Value = Predicate> {
        let attr = prop_oneof![
            Just("subject.home_cloud"),
            Just("subject.kind"),
            Just("resource.service_id"),
            Just("action.id"),
        ];
        let val = prop_oneof![Just("A"), Just("B"), Just("svc"), Just("invoke"), Just("SERVICE_USER")];
        (attr, val, any::<bool>()).prop_map(|(a, v, eq)| {
            if eq {
                Predicate::equals(a, v)
            } else {
                Predicate::not_equals(a, v)
            }
        })
    }

    fn arb_policy() -> impl Strategy<Value = Policy> {
        (prop::collection::vec(arb_predicate(), 0..3), any::<bool>(), 0u32..1000).prop_map(|(t, permit, id)| {
            if permit {
                Policy::permit(&format!("p{id}"), t)
            } else {
                Policy::deny(&format!("d{id}"), t)
            }
        })
    }

    proptest! {
        #[test]
        fn adding_deny_never_grants(set in prop::collection::vec(arb_policy(), 0..6), extra in arb_policy(), cloud in prop_oneof![Just("A"), Just("B")]) {
            let r = req(cloud, Phase::Usage);
            let before = pdp_decide(&r, &set).unwrap();
            let mut extended = set.clone();
            extended.push(Policy { effect: Effect::Deny, ..extra });
            let after = pdp_decide(&r, &extended).unwrap();
            if before.outcome == Outcome::Deny {
                prop_assert_eq!(after.outcome, Outcome::Deny);
            }
            if after.outcome == Outcome::Permit {
                prop_assert_eq!(before.outcome, Outcome::Permit);
            }
        }

        #[test]
        fn permit_needs_an_applicable_permit(set in prop::collection::vec(arb_policy(), 0..6)) {
            let r = req("A", Phase::Usage);
            let d = pdp_decide(&r, &set).unwrap();
            prop_assert_eq!(d.clone(), pdp_decide(&r, &set).unwrap());
            if d.is_permit() {
                prop_assert!(set.iter().any(|p| p.effect == Effect::Permit && p.applies_to(&r)));
            } else {
                prop_assert!(d.obligations.is_empty());
            }
        }
    }
}
