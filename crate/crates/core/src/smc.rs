//! Additive secret sharing over Z/2^64 with SUM and MEAN protocols.
//!
//! Computing servers are sequential actors driven by a harness that delivers
//! messages in a shuffled but recorded order. Servers only ever receive their
//! own input shares; they publish nothing but their partial sum.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MIN_SERVERS: usize = 3;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SmcError {
    #[error("secret sharing needs at least {MIN_SERVERS} servers, got {0}")]
    TooFewServers(usize),
    #[error("no share for server {0}")]
    MissingShare(usize),
    #[error("two shares for server {0}")]
    DuplicateIndex(usize),
    #[error("servers span {0} distinct clouds, need at least {MIN_SERVERS}")]
    TooFewClouds(usize),
    #[error("input {index} is {value}, bound is below {bound}")]
    Overflow { index: usize, value: u64, bound: u128 },
    #[error("no inputs")]
    NoInputs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Share {
    pub server_index: usize,
    pub value: u64,
}

/// Splits `secret` into `n` shares that sum to it modulo 2^64.
pub fn share<R: Rng + ?Sized>(secret: u64, n: usize, rng: &mut R) -> Result<Vec<Share>, SmcError> {
    if n < MIN_SERVERS {
        return Err(SmcError::TooFewServers(n));
    }
    let mut shares: Vec<Share> = (0..n - 1)
        .map(|i| Share {
            server_index: i,
            value: rng.gen(),
        })
        .collect();
    let last = shares.iter().fold(secret, |acc, s| acc.wrapping_sub(s.value));
    shares.push(Share {
        server_index: n - 1,
        value: last,
    });
    Ok(shares)
}

/// Sums one share per server index `0..=max`.
pub fn reconstruct(shares: &[Share]) -> Result<u64, SmcError> {
    let n = shares.iter().map(|s| s.server_index + 1).max().unwrap_or(0);
    let mut seen = vec![false; n];
    for s in shares {
        if std::mem::replace(&mut seen[s.server_index], true) {
            return Err(SmcError::DuplicateIndex(s.server_index));
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(SmcError::MissingShare(missing));
    }
    if n < MIN_SERVERS {
        return Err(SmcError::TooFewServers(n));
    }
    Ok(shares.iter().fold(0u64, |acc, s| acc.wrapping_add(s.value)))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerPlacement {
    pub server_index: usize,
    pub cloud_id: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmcDeployment {
    pub tenant: String,
    pub placements: Vec<ServerPlacement>,
}

impl SmcDeployment {
    /// Places server `i` on `clouds[i]`.
    pub fn new(tenant: impl Into<String>, clouds: &[&str]) -> Result<Self, SmcError> {
        if clouds.len() < MIN_SERVERS {
            return Err(SmcError::TooFewServers(clouds.len()));
        }
        let distinct: BTreeSet<&str> = clouds.iter().copied().collect();
        if distinct.len() < MIN_SERVERS {
            return Err(SmcError::TooFewClouds(distinct.len()));
        }
        Ok(Self {
            tenant: tenant.into(),
            placements: clouds
                .iter()
                .enumerate()
                .map(|(server_index, c)| ServerPlacement {
                    server_index,
                    cloud_id: c.to_string(),
                })
                .collect(),
        })
    }

    pub fn servers(&self) -> usize {
        self.placements.len()
    }

    pub fn clouds(&self) -> BTreeSet<&str> {
        self.placements.iter().map(|p| p.cloud_id.as_str()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SmcOp {
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "UPPERCASE")]
pub enum SmcResult {
    Sum { value: u64 },
    /// Exact rational `numerator / denominator`.
    Mean { numerator: u64, denominator: u64 },
}

impl SmcResult {
    pub fn as_f64(&self) -> f64 {
        match *self {
            SmcResult::Sum { value } => value as f64,
            SmcResult::Mean { numerator, denominator } => numerator as f64 / denominator as f64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "role", content = "index", rename_all = "snake_case")]
pub enum Endpoint {
    InputParty(usize),
    Server(usize),
    Reconstructor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Payload {
    InputShare { value: u64 },
    PartialSum { value: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub from: Endpoint,
    pub to: Endpoint,
    pub payload: Payload,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageLog {
    /// In delivery order.
    pub delivered: Vec<Message>,
}

impl MessageLog {
    /// Everything `endpoint` received.
    pub fn view_of(&self, endpoint: Endpoint) -> Vec<Message> {
        self.delivered.iter().filter(|m| m.to == endpoint).copied().collect()
    }
}

#[derive(Debug)]
struct ComputingServer {
    index: usize,
    partial: u64,
    received: usize,
}

impl ComputingServer {
    fn on_share(&mut self, value: u64) {
        self.partial = self.partial.wrapping_add(value);
        self.received += 1;
    }

    fn publish(&self) -> Message {
        Message {
            from: Endpoint::Server(self.index),
            to: Endpoint::Reconstructor,
            payload: Payload::PartialSum { value: self.partial },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmcRun {
    pub result: SmcResult,
    pub log: MessageLog,
}

/// Runs SUM or MEAN over `inputs`, one per input party.
pub fn smc_aggregate<R: Rng + ?Sized>(
    deployment: &SmcDeployment,
    inputs: &[u64],
    op: SmcOp,
    rng: &mut R,
) -> Result<SmcRun, SmcError> {
    let n = deployment.servers();
    if n < MIN_SERVERS {
        return Err(SmcError::TooFewServers(n));
    }
    if deployment.clouds().len() < MIN_SERVERS {
        return Err(SmcError::TooFewClouds(deployment.clouds().len()));
    }
    if inputs.is_empty() {
        return Err(SmcError::NoInputs);
    }
    let bound = (1u128 << 64) / inputs.len() as u128;
    if let Some((index, &value)) = inputs.iter().enumerate().find(|(_, v)| **v as u128 >= bound) {
        return Err(SmcError::Overflow { index, value, bound });
    }

    let mut outbox = Vec::with_capacity(inputs.len() * n);
    for (party, &secret) in inputs.iter().enumerate() {
        for s in share(secret, n, rng)? {
            outbox.push(Message {
                from: Endpoint::InputParty(party),
                to: Endpoint::Server(s.server_index),
                payload: Payload::InputShare { value: s.value },
            });
        }
    }
    outbox.shuffle(rng);

    let mut servers: Vec<ComputingServer> = (0..n)
        .map(|index| ComputingServer {
            index,
            partial: 0,
            received: 0,
        })
        .collect();
    let mut log = MessageLog::default();
    for msg in outbox {
        if let (Endpoint::Server(i), Payload::InputShare { value }) = (msg.to, msg.payload) {
            servers[i].on_share(value);
        }
        log.delivered.push(msg);
    }
    debug_assert!(servers.iter().all(|s| s.received == inputs.len()));

    let mut partials: Vec<Message> = servers.iter().map(ComputingServer::publish).collect();
    partials.shuffle(rng);
    let mut shares = Vec::with_capacity(n);
    for msg in partials {
        if let (Endpoint::Server(i), Payload::PartialSum { value }) = (msg.from, msg.payload) {
            shares.push(Share {
                server_index: i,
                value,
            });
        }
        log.delivered.push(msg);
    }
    let total = reconstruct(&shares)?;
    let result = match op {
        SmcOp::Sum => SmcResult::Sum { value: total },
        SmcOp::Mean => SmcResult::Mean {
            numerator: total,
            denominator: inputs.len() as u64,
        },
    };
    Ok(SmcRun { result, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn three() -> SmcDeployment {
        SmcDeployment::new("t", &["a", "b", "c"]).unwrap()
    }

    #[test]
    fn share_examples() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let zero = share(0, 3, &mut rng).unwrap();
        assert_eq!(zero.iter().fold(0u64, |a, s| a.wrapping_add(s.value)), 0);
        let s = share(42, 3, &mut rng).unwrap();
        assert_eq!(s[2].value, 42u64.wrapping_sub(s[0].value).wrapping_sub(s[1].value));
        assert_eq!(reconstruct(&s), Ok(42));
        assert_eq!(share(1, 2, &mut rng), Err(SmcError::TooFewServers(2)));
    }

    #[test]
    fn reconstruct_errors() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let s = share(9, 3, &mut rng).unwrap();
        assert_eq!(reconstruct(&[s[0], s[2]]), Err(SmcError::MissingShare(1)));
        assert_eq!(reconstruct(&[s[0], s[0], s[1], s[2]]), Err(SmcError::DuplicateIndex(0)));
    }

    #[test]
    fn aggregate_examples() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let run = smc_aggregate(&three(), &[5, 7, 9], SmcOp::Sum, &mut rng).unwrap();
        assert_eq!(run.result, SmcResult::Sum { value: 21 });
        let run = smc_aggregate(&three(), &[4, 8], SmcOp::Mean, &mut rng).unwrap();
        assert_eq!(run.result, SmcResult::Mean { numerator: 12, denominator: 2 });
        assert_eq!(run.result.as_f64(), 6.0);
    }

    #[test]
    fn placement_rule() {
        assert_eq!(SmcDeployment::new("t", &["a", "b"]).unwrap_err(), SmcError::TooFewServers(2));
        assert_eq!(SmcDeployment::new("t", &["a", "a", "b"]).unwrap_err(), SmcError::TooFewClouds(2));
        assert!(SmcDeployment::new("t", &["a", "b", "c", "a"]).is_ok());
    }

    #[test]
    fn overflow_precondition() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let big = u64::MAX / 2 + 1;
        assert!(matches!(
            smc_aggregate(&three(), &[1, big], SmcOp::Sum, &mut rng),
            Err(SmcError::Overflow { index: 1, .. })
        ));
        assert!(smc_aggregate(&three(), &[u64::MAX], SmcOp::Sum, &mut rng).is_ok());
        assert_eq!(smc_aggregate(&three(), &[], SmcOp::Sum, &mut rng).unwrap_err(), SmcError::NoInputs);
    }

    #[test]
    fn servers_see_only_their_shares() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let run = smc_aggregate(&three(), &[10, 20, 30], SmcOp::Sum, &mut rng).unwrap();
        for i in 0..3 {
            let view = run.log.view_of(Endpoint::Server(i));
            assert_eq!(view.len(), 3);
            assert!(view.iter().all(|m| matches!(m.from, Endpoint::InputParty(_))));
        }
        // Servers never message each other.
        assert!(run
            .log
            .delivered
            .iter()
            .all(|m| !matches!((m.from, m.to), (Endpoint::Server(_), Endpoint::Server(_)))));
        assert_eq!(run.log.view_of(Endpoint::Reconstructor).len(), 3);
    }

    #[test]
    fn delivery_order_does_not_matter() {
        let inputs = [3, 1, 4, 1, 5, 9, 2, 6];
        let results: BTreeSet<u64> = (0..20)
            .map(|seed| {
                let mut rng = ChaCha20Rng::seed_from_u64(seed);
                match smc_aggregate(&three(), &inputs, SmcOp::Sum, &mut rng).unwrap().result {
                    SmcResult::Sum { value } => value,
                    other => panic!("{other:?}"),
                }
            })
            .collect();
        assert_eq!(results, BTreeSet::from([31]));
    }

    /// Pearson statistic of the top four bits of `values` against uniform.
    fn chi_squared_16(values: &[u64]) -> f64 {
        let mut bins = [0f64; 16];
        for v in values {
            bins[(v >> 60) as usize] += 1.0;
        }
        let expected = values.len() as f64 / 16.0;
        bins.iter().map(|o| (o - expected).powi(2) / expected).sum()
    }

    #[test]
    fn server_views_look_uniform() {
        // df = 15, alpha = 0.01
        const CRITICAL: f64 = 30.578;
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let mut views = vec![Vec::new(); 3];
        for _ in 0..10_000 {
            let run = smc_aggregate(&three(), &[1, 2, 3], SmcOp::Sum, &mut rng).unwrap();
            for (i, view) in views.iter_mut().enumerate() {
                view.extend(run.log.view_of(Endpoint::Server(i)).iter().map(|m| match m.payload {
                    Payload::InputShare { value } => value,
                    Payload::PartialSum { value } => value,
                }));
            }
        }
        for view in &views {
            assert!(chi_squared_16(view) < CRITICAL);
        }
    }

    proptest! {
        #[test]
        fn sum_matches_plaintext(inputs in prop::collection::vec(0u64..(1 << 40), 1..20), seed: u64, n in 3usize..6) {
            let clouds: Vec<String> = (0..n).map(|i| format!("c{i}")).collect();
            let refs: Vec<&str> = clouds.iter().map(String::as_str).collect();
            let dep = SmcDeployment::new("t", &refs).unwrap();
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let run = smc_aggregate(&dep, &inputs, SmcOp::Sum, &mut rng).unwrap();
            prop_assert_eq!(run.result, SmcResult::Sum { value: inputs.iter().sum() });
        }

        #[test]
        fn reconstruct_inverts_share(secret: u64, seed: u64, n in 3usize..8) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let mut s = share(secret, n, &mut rng).unwrap();
            s.reverse();
            prop_assert_eq!(reconstruct(&s), Ok(secret));
        }
    }
}
