//! Anonymization: k-anonymous release of micro data, Laplace-noised summary
//! statistics, and a per-recipient sharing history kept on the ledger.

pub mod dataset;
pub mod dp;
pub mod kanon;

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use parking_lot::Mutex;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Millis, SimClock};
use crate::identity::CryptoToken;
use crate::registry::{RecordDraft, RecordKind, Registry, RegistryError};

pub use dataset::{Column, ColumnRole, ColumnType, Dataset};
pub use dp::{dp_release, sample_laplace, DpQuery, DpRelease};
pub use kanon::{k_anonymize, k_anonymize_with, GeneralizationHierarchy, GeneralizationLevel, KAnonConfig, KAnonRelease};

/// Slack on the budget comparison so that 0.1 + 0.2 + 0.7 still fits in 1.
const BUDGET_TOLERANCE: f64 = 1e-9;
const MAX_APPEND_ATTEMPTS: usize = 16;

#[derive(Debug, Error)]
pub enum AnonError {
    #[error("row {row} has the wrong number of cells")]
    ArityMismatch { row: usize },
    #[error("column {column}: {value:?} is not an integer")]
    NotInteger { column: String, value: String },
    #[error("unknown column {0}")]
    UnknownColumn(String),
    #[error("dataset parse error: {0}")]
    Parse(String),
    #[error("k must be at least 1")]
    KMustBePositive,
    #[error("no release satisfies k={k} over {rows} rows")]
    InfeasibleK { k: usize, rows: usize },
    #[error("no hierarchy for quasi-identifier {0}")]
    MissingHierarchy(String),
    #[error("invalid hierarchy for {column}: {reason}")]
    InvalidHierarchy { column: String, reason: String },
    #[error("epsilon must be positive, got {0}")]
    NonPositiveEpsilon(f64),
    #[error("SUM and AVG need a positive sensitivity bound")]
    MissingSensitivity,
    #[error("history record is malformed: {0}")]
    HistoryDecode(String),
    #[error("history append kept conflicting")]
    Contention,
    #[error(transparent)]
    Registry(#[from] RegistryError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ReleaseKind {
    Kanon,
    Dp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnonHistoryEntry {
    pub recipient: String,
    pub kind: ReleaseKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensitivity: Option<f64>,
    pub timestamp: Millis,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum BudgetDecision {
    Allow,
    Deny { spent: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum DpOutcome {
    Released(DpRelease),
    Denied { spent: f64 },
}

fn allows(spent: f64, proposed: f64, budget: f64) -> bool {
    spent + proposed <= budget + BUDGET_TOLERANCE
}

/// The ANM component. Every release for a recipient goes through a
/// compare-and-append on `ANON_HISTORY/<recipient>`, so concurrent releases
/// cannot jointly overspend.
pub struct Anonymizer {
    registry: Arc<Registry>,
    token: CryptoToken,
    clock: SimClock,
    record_history: bool,
    rng: Mutex<ChaCha20Rng>,
    // Spend when history recording is off.
    local_spend: Mutex<HashMap<String, f64>>,
}

impl std::fmt::Debug for Anonymizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Anonymizer")
            .field("record_history", &self.record_history)
            .finish_non_exhaustive()
    }
}

impl Anonymizer {
    pub fn new(registry: Arc<Registry>, token: CryptoToken, clock: SimClock, seed: u64) -> Self {
        Self {
            registry,
            token,
            clock,
            record_history: true,
            rng: Mutex::new(ChaCha20Rng::seed_from_u64(seed)),
            local_spend: Mutex::new(HashMap::new()),
        }
    }

    /// With recording off the budget is tracked in memory only.
    pub fn with_history(mut self, record: bool) -> Self {
        self.record_history = record;
        self
    }

    pub fn history(&self, recipient: &str) -> Result<Vec<AnonHistoryEntry>, AnonError> {
        self.registry
            .get_history(&self.token, RecordKind::AnonHistory, recipient)?
            .iter()
            .filter(|r| !r.tombstone)
            .map(|r| r.decode().map_err(|e| AnonError::HistoryDecode(e.to_string())))
            .collect()
    }

    pub fn spent(&self, recipient: &str) -> Result<f64, AnonError> {
        if !self.record_history {
            return Ok(self.local_spend.lock().get(recipient).copied().unwrap_or(0.0));
        }
        Ok(self.history(recipient)?.iter().filter_map(|e| e.epsilon).sum())
    }

    pub fn check_budget(&self, recipient: &str, epsilon: f64, budget: f64) -> Result<BudgetDecision, AnonError> {
        let spent = self.spent(recipient)?;
        Ok(if allows(spent, epsilon, budget) {
            BudgetDecision::Allow
        } else {
            BudgetDecision::Deny { spent }
        })
    }

    /// Budget check, noisy release, and history append as one step. The
    /// release is discarded if the append loses a race; the check is then
    /// redone against the newer history.
    pub fn release_dp(
        &self,
        recipient: &str,
        dataset: &Dataset,
        query: &DpQuery,
        epsilon: f64,
        sensitivity: Option<f64>,
        budget: f64,
    ) -> Result<DpOutcome, AnonError> {
        if !self.record_history {
            let mut spend = self.local_spend.lock();
            let spent = spend.get(recipient).copied().unwrap_or(0.0);
            if !allows(spent, epsilon, budget) {
                return Ok(DpOutcome::Denied { spent });
            }
            let release = dp_release(dataset, query, epsilon, sensitivity, &mut *self.rng.lock())?;
            spend.insert(recipient.to_string(), spent + epsilon);
            return Ok(DpOutcome::Released(release));
        }
        for _ in 0..MAX_APPEND_ATTEMPTS {
            let seq = self.registry.next_seq(RecordKind::AnonHistory, recipient);
            let spent = self.spent(recipient)?;
            if !allows(spent, epsilon, budget) {
                return Ok(DpOutcome::Denied { spent });
            }
            let release = dp_release(dataset, query, epsilon, sensitivity, &mut *self.rng.lock())?;
            let entry = AnonHistoryEntry {
                recipient: recipient.to_string(),
                kind: ReleaseKind::Dp,
                k: None,
                epsilon: Some(epsilon),
                sensitivity: Some(match query {
                    DpQuery::Count => 1.0,
                    _ => sensitivity.unwrap_or_default(),
                }),
                timestamp: self.clock.now(),
            };
            match self.append(recipient, seq, &entry) {
                Ok(()) => return Ok(DpOutcome::Released(release)),
                Err(RegistryError::SeqConflict { .. }) => continue,
                Err(e) => return Err(e.into()),
            }
        }
        Err(AnonError::Contention)
    }

    pub fn release_kanon(
        &self,
        recipient: &str,
        dataset: &Dataset,
        config: &KAnonConfig,
        hierarchies: &BTreeMap<String, GeneralizationHierarchy>,
    ) -> Result<KAnonRelease, AnonError> {
        let release = k_anonymize_with(dataset, config, hierarchies)?;
        if self.record_history {
            let entry = AnonHistoryEntry {
                recipient: recipient.to_string(),
                kind: ReleaseKind::Kanon,
                k: Some(config.k),
                epsilon: None,
                sensitivity: None,
                timestamp: self.clock.now(),
            };
            for attempt in 0..MAX_APPEND_ATTEMPTS {
                let seq = self.registry.next_seq(RecordKind::AnonHistory, recipient);
                match self.append(recipient, seq, &entry) {
                    Ok(()) => break,
                    Err(RegistryError::SeqConflict { .. }) if attempt + 1 < MAX_APPEND_ATTEMPTS => continue,
                    Err(RegistryError::SeqConflict { .. }) => return Err(AnonError::Contention),
                    Err(e) => return Err(e.into()),
                }
            }
        }
        Ok(release)
    }

    fn append(&self, recipient: &str, seq: u64, entry: &AnonHistoryEntry) -> Result<(), RegistryError> {
        self.registry
            .append(&self.token, vec![RecordDraft::json(RecordKind::AnonHistory, recipient, seq, entry)])
            .map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identity::{ComponentRole, TokenAuthority};
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn setup() -> (Anonymizer, Arc<Registry>, TokenAuthority) {
        let clock = SimClock::new(0);
        let authority = TokenAuthority::new([3; 32], clock.clone());
        let reg = Arc::new(Registry::new(authority.clone()));
        reg.genesis(b"{}".to_vec()).unwrap();
        let anm = Anonymizer::new(reg.clone(), authority.issue_component(ComponentRole::Anm), clock, 11);
        (anm, reg, authority)
    }

    fn rows(n: usize) -> Dataset {
        let cols = vec![Column::new("v", ColumnRole::Sensitive, ColumnType::Integer)];
        Dataset::new(cols, (0..n).map(|i| vec![i.to_string()]).collect()).unwrap()
    }

    #[test]
    fn budget_examples() {
        let (anm, _, _) = setup();
        let ds = rows(10);
        assert_eq!(anm.check_budget("r", 0.5, 1.0).unwrap(), BudgetDecision::Allow);
        for _ in 0..2 {
            assert!(matches!(
                anm.release_dp("r", &ds, &DpQuery::Count, 0.5, None, 1.0).unwrap(),
                DpOutcome::Released(_)
            ));
        }
        assert_eq!(anm.check_budget("r", 0.1, 1.0).unwrap(), BudgetDecision::Deny { spent: 1.0 });
        assert_eq!(
            anm.release_dp("r", &ds, &DpQuery::Count, 0.1, None, 1.0).unwrap(),
            DpOutcome::Denied { spent: 1.0 }
        );
        assert_eq!(anm.history("r").unwrap().len(), 2);
        assert_eq!(anm.check_budget("other", 1.0, 1.0).unwrap(), BudgetDecision::Allow);
    }

    #[test]
    fn deny_reports_spent() {
        let (anm, _, _) = setup();
        anm.release_dp("r", &rows(5), &DpQuery::Count, 0.8, None, 1.0).unwrap();
        assert_eq!(anm.check_budget("r", 0.3, 1.0).unwrap(), BudgetDecision::Deny { spent: 0.8 });
    }

    #[test]
    fn failed_release_leaves_no_history() {
        let (anm, reg, _) = setup();
        let before = reg.len();
        assert!(anm
            .release_dp("r", &rows(5), &DpQuery::Sum("v".into()), 0.5, None, 1.0)
            .is_err());
        assert_eq!(reg.len(), before);
    }

    #[test]
    fn kanon_release_is_recorded_without_spending() {
        let (anm, _, _) = setup();
        let cols = vec![Column::new("age", ColumnRole::QuasiIdentifier, ColumnType::Integer)];
        let ds = Dataset::new(cols, vec![vec!["30".into()], vec!["31".into()]]).unwrap();
        let h = [("age".to_string(), GeneralizationHierarchy::intervals(&[10]).unwrap())].into();
        let rel = anm.release_kanon("r", &ds, &KAnonConfig::new(2), &h).unwrap();
        assert_eq!(rel.levels[0].1, 1);
        let hist = anm.history("r").unwrap();
        assert_eq!(hist[0].kind, ReleaseKind::Kanon);
        assert_eq!(hist[0].k, Some(2));
        assert_eq!(anm.spent("r").unwrap(), 0.0);
    }

    #[test]
    fn history_off_uses_memory() {
        let (anm, reg, _) = setup();
        let anm = anm.with_history(false);
        let before = reg.len();
        anm.release_dp("r", &rows(5), &DpQuery::Count, 0.6, None, 1.0).unwrap();
        assert_eq!(
            anm.release_dp("r", &rows(5), &DpQuery::Count, 0.6, None, 1.0).unwrap(),
            DpOutcome::Denied { spent: 0.6 }
        );
        assert_eq!(reg.len(), before);
    }

    #[test]
    fn wrong_role_cannot_append_history() {
        let (_, reg, authority) = setup();
        let frm = Anonymizer::new(reg, authority.issue_component(ComponentRole::Frm), SimClock::new(0), 1);
        assert!(matches!(
            frm.release_dp("r", &rows(3), &DpQuery::Count, 0.1, None, 1.0),
            Err(AnonError::Registry(RegistryError::Unauthorized { .. }))
        ));
    }

    #[test]
    fn concurrent_releases_never_overspend() {
        let mut seeds = ChaCha20Rng::seed_from_u64(7);
        for _ in 0..10 {
            let (anm, reg, authority) = setup();
            let anm = Arc::new(anm);
            let budget = 1.0;
            let mut eps: Vec<f64> = (0..24).map(|_| seeds.gen_range(1..=4) as f64 / 10.0).collect();
            eps.shuffle(&mut seeds);
            let handles: Vec<_> = eps
                .chunks(6)
                .enumerate()
                .map(|(t, chunk)| {
                    let chunk = chunk.to_vec();
                    let anm = if t % 2 == 0 {
                        anm.clone()
                    } else {
                        // A second ANM instance over the same ledger.
                        Arc::new(Anonymizer::new(
                            reg.clone(),
                            authority.issue_component(ComponentRole::Anm),
                            SimClock::new(0),
                            t as u64,
                        ))
                    };
                    std::thread::spawn(move || {
                        let ds = rows(4);
                        chunk
                            .iter()
                            .filter(|&&e| {
                                matches!(
                                    anm.release_dp("shared", &ds, &DpQuery::Count, e, None, budget).unwrap(),
                                    DpOutcome::Released(_)
                                )
                            })
                            .sum::<f64>()
                    })
                })
                .collect();
            let allowed: f64 = handles.into_iter().map(|h| h.join().unwrap()).sum();
            assert!(allowed <= budget + BUDGET_TOLERANCE, "allowed {allowed}");
            assert!((anm.spent("shared").unwrap() - allowed).abs() < 1e-9);
        }
    }
}
