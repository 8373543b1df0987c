use super::*;
use crate::clock::MINUTE;
use crate::monitor::Comparator;
use crate::policy::pap::PolicyField;
use crate::policy::{Policy, Predicate};
use crate::simcloud::CloudSpec;

const PW: &str = "pw";

fn spec(id: &str) -> CloudSpec {
    CloudSpec::new(id)
        .with_user("admin", PW, PrincipalKind::MemberCloudAdmin)
        .with_user("alice", PW, PrincipalKind::ServiceUser)
}

/// A, B and C found the federation; D is reachable but not a member.
fn federation() -> Orchestrator {
    let mut fabric = Fabric::new();
    for id in ["A", "B", "C", "D"] {
        fabric.add_cloud(spec(id).build(7));
    }
    let sfac = Sfac {
        federation_id: "fed".into(),
        members: vec!["A".into(), "B".into(), "C".into()],
        assets: BTreeMap::new(),
        services: Vec::new(),
        sla: Vec::new(),
        grace: 10 * MINUTE,
        open: true,
    };
    Orchestrator::create_federation(fabric, sfac, FederationConfig::new(7)).unwrap()
}

fn admin(o: &Orchestrator, cloud: &str) -> AuthToken {
    o.login(cloud, "admin", PW).unwrap()
}

fn alice(o: &Orchestrator, cloud: &str) -> AuthToken {
    o.login(cloud, "alice", PW).unwrap()
}

fn join_d() -> JoinRequest {
    JoinRequest {
        cloud: "D".into(),
        user: "admin".into(),
        secret: PW.into(),
        countersigned: true,
    }
}

fn offer(sid: &str, cloud: &str, tenant: &str) -> ServiceOffer {
    ServiceOffer {
        service_id: sid.into(),
        provider_cloud: cloud.into(),
        tenant: tenant.into(),
        capacity: 10,
        unit_cost: 1.0,
        availability: 0.99,
        characteristics: BTreeMap::new(),
    }
}

fn open_policy() -> Value {
    serde_json::to_value(vec![Policy::permit("open", vec![])]).unwrap()
}

fn publish_static(o: &Orchestrator, sid: &str, cloud: &str, sections: &[&str]) -> PublishReceipt {
    let tenant = format!("t-{sid}");
    o.publish(
        &admin(o, cloud),
        &PublishRequest {
            offer: offer(sid, cloud, &tenant),
            policies: open_policy(),
            sla: Vec::new(),
            backend: ServiceBackend::Static { data: json!({"answer": 42}) },
            admin: None,
            new_tenant: Some(TenantRequest {
                id: tenant,
                kind: if sections.len() == 1 { TenantKind::OpSegregated } else { TenantKind::OpStandard },
                sections: sections.iter().map(|s| s.to_string()).collect(),
            }),
        },
    )
    .unwrap()
}

fn workload(demand: u64) -> WorkloadRequest {
    WorkloadRequest {
        consumer: String::new(),
        required: BTreeMap::new(),
        demand,
        objective: crate::iwm::Objective::MinCost,
    }
}

/// Everything a failed atomic phase must leave untouched.
#[derive(Debug, PartialEq)]
struct Observed {
    records: usize,
    fabric: FabricSnapshot,
    state: FederationState,
    federated: Vec<bool>,
}

fn observe(o: &Orchestrator) -> Observed {
    Observed {
        records: o.registry().record_count(),
        fabric: o.fabric_snapshot(),
        state: o.state(),
        federated: ["A", "B", "C", "D"].iter().map(|c| o.identity().is_federated(c)).collect(),
    }
}

/// Runs `phase` once cleanly to learn its fabric calls, then re-runs it
/// on a fresh setup with a fault at each call in turn.
fn sweep<S, P>(setup: S, phase: P, count: u64) -> usize
where
    S: Fn() -> Orchestrator,
    P: Fn(&Orchestrator) -> Result<(), FaasError>,
{
    let o = setup();
    let start = o.with_fabric(|f| f.log_len()) as u64;
    phase(&o).unwrap();
    let calls: Vec<(String, String)> = o.with_fabric(|f| {
        f.log_since(start)
            .iter()
            .map(|r| (r.endpoint.clone(), r.op.clone()))
            .collect()
    });
    assert!(!calls.is_empty());
    for (i, (endpoint, op)) in calls.iter().enumerate() {
        let ordinal = calls[..i].iter().filter(|(e, p)| e == endpoint && p == op).count() as u64 + 1;
        let o = setup();
        let before = observe(&o);
        o.with_fabric(|f| f.inject_fault(endpoint, op, ordinal, count));
        assert!(phase(&o).is_err(), "fault at {endpoint}/{op}#{ordinal} did not abort");
        assert_eq!(observe(&o), before, "fault at {endpoint}/{op}#{ordinal} left residue");
        o.check_invariants().unwrap();
    }
    calls.len()
}

#[test]
fn founding_builds_the_infrastructure_tenant() {
    let o = federation();
    o.check_invariants().unwrap();
    let st = o.state();
    assert_eq!(st.active_members().len(), 3);
    assert_eq!(st.tenants[INFRA_TENANT].sections.len(), 3);
    // Genesis plus three memberships and the infrastructure tenant.
    assert_eq!(o.registry().record_count(), 5);
    assert_eq!(o.verify_ledger(), ChainStatus::Valid);

    let mut fabric = Fabric::new();
    fabric.add_cloud(spec("A").build(1));
    let sfac = Sfac {
        members: vec!["A".into()],
        ..st.sfac
    };
    assert!(matches!(
        Orchestrator::create_federation(fabric, sfac, FederationConfig::new(1)),
        Err(FaasError::TooFewFounders(1))
    ));
}

#[test]
fn join_examples() {
    let o = federation();
    let receipt = o.join(&join_d()).unwrap();
    assert_eq!(receipt.section, "D-s1");
    assert_eq!(o.state().active_members().len(), 4);
    o.check_invariants().unwrap();
    assert!(matches!(o.join(&join_d()), Err(FaasError::AlreadyMember(_))));

    let o = federation();
    let records = o.registry().record_count();
    let bad = JoinRequest {
        secret: "nope".into(),
        ..join_d()
    };
    assert!(matches!(o.join(&bad), Err(FaasError::AuthFailed(_))));
    let user = JoinRequest {
        user: "alice".into(),
        ..join_d()
    };
    assert!(matches!(o.join(&user), Err(FaasError::AuthFailed(_))));
    let unsigned = JoinRequest {
        countersigned: false,
        ..join_d()
    };
    assert!(matches!(o.join(&unsigned), Err(FaasError::AuthFailed(_))));
    assert_eq!(o.registry().record_count(), records);
    assert!(!o.identity().is_federated("D"));
}

#[test]
fn join_without_capabilities_is_rejected() {
    let mut fabric = Fabric::new();
    for id in ["A", "B"] {
        fabric.add_cloud(spec(id).build(1));
    }
    let mut d = spec("D");
    d.capabilities = Some(vec![Capability::ResourceMgmt, Capability::Identity]);
    fabric.add_cloud(d.build(1));
    let sfac = Sfac {
        federation_id: "f".into(),
        members: vec!["A".into(), "B".into()],
        assets: BTreeMap::new(),
        services: Vec::new(),
        sla: Vec::new(),
        grace: MINUTE,
        open: true,
    };
    let o = Orchestrator::create_federation(fabric, sfac, FederationConfig::new(1)).unwrap();
    let before = observe(&o);
    assert!(matches!(
        o.join(&join_d()),
        Err(FaasError::MissingPrerequisite {
            capability: Capability::VmMgmt,
            ..
        })
    ));
    assert_eq!(observe(&o), before);
}

#[test]
fn join_is_atomic_under_every_single_fault() {
    let n = sweep(federation, |o| o.join(&join_d()).map(|_| ()), 1);
    assert!(n >= 12, "join made only {n} calls");
}

#[test]
fn publish_is_atomic_under_every_single_fault() {
    sweep(
        federation,
        |o| {
            o.publish(
                &admin(o, "A"),
                &PublishRequest {
                    offer: offer("s", "A", "t"),
                    policies: open_policy(),
                    sla: Vec::new(),
                    backend: ServiceBackend::Static { data: json!(1) },
                    admin: None,
                    new_tenant: Some(TenantRequest {
                        id: "t".into(),
                        kind: TenantKind::OpStandard,
                        sections: vec!["A-s2".into(), "B-s2".into()],
                    }),
                },
            )
            .map(|_| ())
        },
        1,
    );
}

#[test]
fn request_select_use_round_trip() {
    let o = federation();
    publish_static(&o, "weather", "A", &["A-s2"]);
    let bob = alice(&o, "B");
    let out = o.request_service(&bob, &workload(3)).unwrap();
    assert_eq!(out.offers.len(), 1);
    assert!(matches!(o.select(&bob, "other"), Err(FaasError::InvalidChoice(_))));
    let sel = o.select(&bob, "weather").unwrap();
    assert_eq!(sel.remaining_capacity, 7);
    assert_eq!(o.iwm().offer("weather").unwrap().unwrap().capacity, 7);
    // The offered list is consumed by the selection.
    assert!(matches!(o.select(&bob, "weather"), Err(FaasError::InvalidChoice(_))));

    let used = o.use_service(&bob, "weather", "read").unwrap();
    assert_eq!(used.result, Some(json!({"answer": 42})));
    o.check_invariants().unwrap();

    // Someone without a grant is refused before the provider is called.
    let carol = alice(&o, "C");
    let calls = o.with_fabric(|f| f.log_len());
    assert!(matches!(o.use_service(&carol, "weather", "read"), Err(FaasError::NoGrant { .. })));
    assert_eq!(o.with_fabric(|f| f.log_len()), calls);
}

#[test]
fn invalid_token_is_logged_and_refused() {
    let o = federation();
    publish_static(&o, "weather", "A", &["A-s2"]);
    let mut forged = alice(&o, "B");
    forged.mac[0] ^= 1;
    let logged = o.monitor().logged_events().unwrap().len();
    let err = o.use_service(&forged, "weather", "read").unwrap_err();
    assert_eq!(err.code(), "AuthFailed");
    assert_eq!(o.monitor().logged_events().unwrap().len(), logged + 1);
}

#[test]
fn policies_filter_offers_and_deny_usage() {
    let o = federation();
    let only_c = serde_json::to_value(vec![Policy::permit(
        "c-only",
        vec![Predicate::equals("subject.home_cloud", "C")],
    )])
    .unwrap();
    o.publish(
        &admin(&o, "A"),
        &PublishRequest {
            offer: offer("s", "A", "t"),
            policies: only_c,
            sla: Vec::new(),
            backend: ServiceBackend::Static { data: json!(1) },
            admin: None,
            new_tenant: Some(TenantRequest {
                id: "t".into(),
                kind: TenantKind::OpSegregated,
                sections: vec!["A-s2".into()],
            }),
        },
    )
    .unwrap();
    let bob = alice(&o, "B");
    assert!(matches!(
        o.request_service(&bob, &workload(1)),
        Err(FaasError::Iwm(IwmError::NoCandidates))
    ));
    let carol = alice(&o, "C");
    assert_eq!(o.request_service(&carol, &workload(1)).unwrap().offers.len(), 1);
}

#[test]
fn smc_services_need_three_clouds() {
    let o = federation();
    let smc = |sections: Vec<String>, sid: &str| PublishRequest {
        offer: offer(sid, "A", sid),
        policies: open_policy(),
        sla: Vec::new(),
        backend: ServiceBackend::Smc {
            op: SmcOp::Sum,
            inputs: vec![5, 7, 11],
        },
        admin: None,
        new_tenant: Some(TenantRequest {
            id: sid.into(),
            kind: TenantKind::OpStandard,
            sections,
        }),
    };
    let before = observe(&o);
    let err = o.publish(&admin(&o, "A"), &smc(vec!["A-s2".into(), "B-s2".into()], "two")).unwrap_err();
    assert_eq!(err.code(), "InvariantViolation");
    assert_eq!(observe(&o), before);

    o.publish(
        &admin(&o, "A"),
        &smc(vec!["A-s2".into(), "B-s2".into(), "C-s2".into()], "three"),
    )
    .unwrap();
    let bob = alice(&o, "B");
    o.request_service(&bob, &workload(1)).unwrap();
    o.select(&bob, "three").unwrap();
    let result = o.use_service(&bob, "three", "sum").unwrap().result.unwrap();
    assert_eq!(result["value"], json!(23));
}

#[test]
fn publish_rejections_leave_no_trace() {
    let o = federation();
    publish_static(&o, "s", "A", &["A-s2"]);
    let before = observe(&o);
    let tok = admin(&o, "A");
    let dup = PublishRequest {
        offer: offer("s", "A", "t-s"),
        policies: open_policy(),
        sla: Vec::new(),
        backend: ServiceBackend::Static { data: json!(1) },
        admin: None,
        new_tenant: None,
    };
    assert!(matches!(o.publish(&tok, &dup), Err(FaasError::DuplicateService(_))));
    let bad_policy = PublishRequest {
        offer: offer("s2", "A", "t-s"),
        policies: json!([{"id": "x", "effect": "MAYBE"}]),
        ..dup.clone()
    };
    assert!(matches!(o.publish(&tok, &bad_policy), Err(FaasError::PolicyInvalid { .. })));
    let foreign = PublishRequest {
        offer: offer("s3", "B", "t-s"),
        ..dup.clone()
    };
    assert!(matches!(o.publish(&tok, &foreign), Err(FaasError::Forbidden(_))));
    let taken = PublishRequest {
        offer: offer("s4", "A", "t4"),
        new_tenant: Some(TenantRequest {
            id: "t4".into(),
            kind: TenantKind::OpSegregated,
            sections: vec!["A-s2".into()],
        }),
        ..dup
    };
    assert!(matches!(o.publish(&tok, &taken), Err(FaasError::SectionUnavailable(_))));
    assert_eq!(observe(&o), before);
}

#[test]
fn leave_releases_grants_and_dependent_tenants() {
    let o = federation();
    publish_static(&o, "a-only", "A", &["A-s2"]);
    publish_static(&o, "spans-b", "A", &["A-s3", "B-s2"]);
    let bob = alice(&o, "B");
    o.request_service(&bob, &workload(4)).unwrap();
    o.select(&bob, "a-only").unwrap();
    let carol = alice(&o, "C");
    o.request_service(&carol, &workload(2)).unwrap();
    o.select(&carol, "spans-b").unwrap();

    let receipt = o.leave(&admin(&o, "B"), "B").unwrap();
    assert_eq!(receipt.removed_services, vec!["spans-b"]);
    assert_eq!(receipt.removed_tenants, vec!["t-spans-b"]);
    assert_eq!(receipt.released_grants, 1);
    let st = o.state();
    assert_eq!(st.members["B"].status, MemberStatus::Left);
    assert!(st.grants.is_empty());
    assert_eq!(o.iwm().offer("a-only").unwrap().unwrap().capacity, 10);
    assert!(o.iwm().offer("spans-b").unwrap().is_none());
    assert!(!o.identity().is_federated("B"));
    o.with_fabric(|f| {
        let b = f.cloud("B").unwrap();
        assert!(b.allocations.is_empty());
        assert!(b.containers.is_empty());
        assert_eq!(f.cloud("A").unwrap().vm_total(), 0);
        assert!(f.cloud("A").unwrap().grants.is_empty());
    });
    o.check_invariants().unwrap();
    assert_eq!(o.verify_ledger(), ChainStatus::Valid);
}

fn leave_setup() -> Orchestrator {
    let o = federation();
    publish_static(&o, "a-only", "A", &["A-s2"]);
    publish_static(&o, "spans-b", "A", &["A-s3", "B-s2"]);
    let bob = alice(&o, "B");
    o.request_service(&bob, &workload(4)).unwrap();
    o.select(&bob, "a-only").unwrap();
    o
}

#[test]
fn leave_retries_transient_faults() {
    let o = leave_setup();
    o.with_fabric(|f| f.inject_fault("A", "destroy_vm", 1, 2));
    o.leave(&admin(&o, "B"), "B").unwrap();
    o.check_invariants().unwrap();
}

#[test]
fn leave_is_atomic_under_persistent_faults() {
    sweep(leave_setup, |o| o.leave(&admin(o, "B"), "B").map(|_| ()), LEAVE_ATTEMPTS);
}

#[test]
fn last_member_cannot_leave() {
    let o = federation();
    o.leave(&admin(&o, "A"), "A").unwrap();
    o.leave(&admin(&o, "B"), "B").unwrap();
    assert!(matches!(o.leave(&admin(&o, "C"), "C"), Err(FaasError::LastMember(_))));
    o.check_invariants().unwrap();
}

fn sla_setup(window: Millis, grace: Option<Millis>) -> Orchestrator {
    let o = federation();
    o.publish(
        &admin(&o, "A"),
        &PublishRequest {
            offer: offer("s", "A", "t"),
            policies: open_policy(),
            sla: vec![SlaPolicy {
                service_id: "s".into(),
                metric: "latency".into(),
                comparator: Comparator::AtMost,
                threshold: 100.0,
                window,
                grace,
            }],
            backend: ServiceBackend::Static { data: json!(1) },
            admin: None,
            new_tenant: Some(TenantRequest {
                id: "t".into(),
                kind: TenantKind::OpSegregated,
                sections: vec!["A-s2".into()],
            }),
        },
    )
    .unwrap();
    o
}

/// Feeds one sample per minute for `minutes` and scans after each.
fn run(o: &Orchestrator, minutes: u64, value: f64) -> Vec<ScanAction> {
    let mut actions = Vec::new();
    for _ in 0..minutes {
        o.clock().advance(MINUTE);
        o.sla_ingest("s", "latency", value).unwrap();
        actions.extend(o.forced_leave_scan());
    }
    actions
}

#[test]
fn violation_outlasting_grace_forces_leave() {
    let o = sla_setup(5 * MINUTE, None);
    assert!(run(&o, 3, 50.0).is_empty());
    let first = run(&o, 1, 900.0);
    assert!(matches!(first.as_slice(), [ScanAction::Notified { cloud, .. }] if cloud == "A"));
    // Nine more minutes: one short of the ten-minute grace.
    assert!(run(&o, 9, 900.0).is_empty());
    assert_eq!(o.state().members["A"].status, MemberStatus::Active);
    let last = run(&o, 1, 900.0);
    assert_eq!(last, vec![ScanAction::ForcedLeave { cloud: "A".into() }]);
    let st = o.state();
    assert!(st.members["A"].forced);
    assert_eq!(st.members["A"].status, MemberStatus::Left);
    let alerts = o.alert_feed(0).unwrap();
    assert!(alerts
        .iter()
        .any(|a| a.severity == Severity::Critical && a.subject == "A" && a.kind == AlertKind::SlaViolation));
    o.check_invariants().unwrap();
}

#[test]
fn recovery_resets_the_timer() {
    let o = sla_setup(MINUTE, Some(3 * MINUTE));
    run(&o, 2, 900.0);
    // Two good samples bring the window mean back under the threshold.
    let recovered = run(&o, 3, 10.0);
    assert!(recovered.iter().any(|a| matches!(a, ScanAction::Cleared { .. })));
    let again = run(&o, 2, 900.0);
    assert!(matches!(again.as_slice(), [ScanAction::Notified { .. }]));
    assert_eq!(o.state().members["A"].status, MemberStatus::Active);
}

#[test]
fn amendments_follow_the_admin_policy() {
    let o = federation();
    publish_static(&o, "s", "A", &["A-s2"]);
    let owner = admin(&o, "A");
    let outsider = admin(&o, "B");
    let narrowed = serde_json::to_value(vec![Policy::permit(
        "open",
        vec![Predicate::equals("subject.home_cloud", "C")],
    )])
    .unwrap();
    assert!(matches!(o.amend_policy(&outsider, "s", &narrowed), Err(FaasError::Forbidden(_))));
    assert!(matches!(
        o.set_admin_policy(
            &outsider,
            &AdminPolicy {
                service_id: "s".into(),
                allowed_editors: ["admin@B".to_string()].into(),
                editable_fields: [PolicyField::Target].into(),
            }
        ),
        Err(FaasError::Forbidden(_))
    ));
    o.set_admin_policy(
        &owner,
        &AdminPolicy {
            service_id: "s".into(),
            allowed_editors: ["admin@B".to_string()].into(),
            editable_fields: [PolicyField::Target].into(),
        },
    )
    .unwrap();
    o.amend_policy(&outsider, "s", &narrowed).unwrap();
    let bob = alice(&o, "B");
    assert!(o.request_service(&bob, &workload(1)).is_err());
}

#[test]
fn termination_tombstones_the_contract() {
    let o = federation();
    publish_static(&o, "s", "A", &["A-s2", "B-s2"]);
    o.terminate(&admin(&o, "A")).unwrap();
    let st = o.state();
    assert!(st.terminated);
    assert!(st.active_members().is_empty());
    assert!(st.tenants.is_empty());
    assert_eq!(o.verify_ledger(), ChainStatus::Valid);
    assert!(matches!(o.join(&join_d()), Err(FaasError::Terminated)));
    o.with_fabric(|f| assert!(f.clouds().all(|c| c.allocations.is_empty() && c.containers.is_empty())));
}
