//! Append-only, hash-chained governance ledger and its token-guarded
//! access interface.
//!
//! # Canonical encodings
//!
//! A block hash is SHA-256 over this byte sequence (integers big-endian,
//! `str`/`bytes` fields prefixed by their length as a `u64`):
//!
//! ```text
//! index:u64 | prev_hash:[u8;32] | timestamp:u64 | record_count:u64 | record*
//! record = kind_code:u8 | key:str | seq:u64 | author:str | tombstone:u8 | payload:bytes
//! ```
//!
//! On disk the ledger is one block per line, each line the compact JSON
//! object `{"index","prev_hash","timestamp","records","hash"}` with digests
//! and payloads as lowercase hex. A line is accepted only if re-encoding the
//! parsed block reproduces it byte for byte.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use parking_lot::{Mutex, RwLock};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Millis, SimClock};
use crate::digest::{hex_bytes, CanonicalWriter, Digest};
use crate::identity::{ComponentRole, CryptoToken, IdentityError, TokenAuthority};

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("ledger already has a genesis block")]
    LedgerNotEmpty,
    #[error("ledger has no genesis block")]
    NoGenesis,
    #[error("invalid token")]
    InvalidToken,
    #[error("{role} may not {access} {kind} records")]
    Unauthorized {
        role: ComponentRole,
        kind: RecordKind,
        access: Access,
    },
    #[error("seq conflict on {kind}/{key}: expected {expected}, got {got}")]
    SeqConflict {
        kind: RecordKind,
        key: String,
        expected: u64,
        got: u64,
    },
    #[error("append with no records")]
    EmptyAppend,
    #[error("ledger line {line} is not a valid block")]
    Parse { line: u64 },
    #[error("ledger chain is broken at block {0}")]
    BrokenChain(u64),
    #[error("ledger io: {0}")]
    Io(#[from] std::io::Error),
}

impl From<IdentityError> for RegistryError {
    fn from(_: IdentityError) -> Self {
        RegistryError::InvalidToken
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RecordKind {
    Contract,
    Membership,
    Service,
    AccessPolicy,
    SlaPolicy,
    AccessLog,
    SlaEvidence,
    MaskingTable,
    AnonHistory,
    TenantConfig,
}

impl RecordKind {
    pub const ALL: [RecordKind; 10] = [
        RecordKind::Contract,
        RecordKind::Membership,
        RecordKind::Service,
        RecordKind::AccessPolicy,
        RecordKind::SlaPolicy,
        RecordKind::AccessLog,
        RecordKind::SlaEvidence,
        RecordKind::MaskingTable,
        RecordKind::AnonHistory,
        RecordKind::TenantConfig,
    ];

    fn code(self) -> u8 {
        self as u8
    }
}

impl fmt::Display for RecordKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit variant");
        f.write_str(s.as_str().unwrap_or_default())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Access {
    Read,
    Append,
}

impl fmt::Display for Access {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Access::Read => "read",
            Access::Append => "append",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GovernanceRecord {
    pub kind: RecordKind,
    pub key: String,
    pub seq: u64,
    pub author: ComponentRole,
    pub tombstone: bool,
    #[serde(with = "hex_bytes")]
    pub payload: Vec<u8>,
}

impl GovernanceRecord {
    pub fn decode<T: DeserializeOwned>(&self) -> Result<T, serde_json::Error> {
        serde_json::from_slice(&self.payload)
    }

    fn encode_into(&self, w: &mut CanonicalWriter) {
        w.u8(self.kind.code())
            .str(&self.key)
            .u64(self.seq)
            .str(self.author.as_str())
            .u8(self.tombstone as u8)
            .bytes(&self.payload);
    }
}

/// Caller-supplied part of a record; the author is taken from the token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecordDraft {
    pub kind: RecordKind,
    pub key: String,
    pub seq: u64,
    pub tombstone: bool,
    pub payload: Vec<u8>,
}

impl RecordDraft {
    pub fn new(kind: RecordKind, key: impl Into<String>, seq: u64, payload: Vec<u8>) -> Self {
        Self {
            kind,
            key: key.into(),
            seq,
            tombstone: false,
            payload,
        }
    }

    /// A draft whose payload is the canonical JSON encoding of `value`.
    pub fn json<T: Serialize>(kind: RecordKind, key: impl Into<String>, seq: u64, value: &T) -> Self {
        Self::new(kind, key, seq, serde_json::to_vec(value).expect("serializable payload"))
    }

    pub fn tombstone(mut self) -> Self {
        self.tombstone = true;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Block {
    pub index: u64,
    pub prev_hash: Digest,
    pub timestamp: Millis,
    pub records: Vec<GovernanceRecord>,
    pub hash: Digest,
}

impl Block {
    pub fn compute_hash(&self) -> Digest {
        let mut w = CanonicalWriter::new();
        w.u64(self.index)
            .raw(&self.prev_hash.0)
            .u64(self.timestamp)
            .u64(self.records.len() as u64);
        for r in &self.records {
            r.encode_into(&mut w);
        }
        Digest::of(&w.finish())
    }

    fn seal(index: u64, prev_hash: Digest, timestamp: Millis, records: Vec<GovernanceRecord>) -> Self {
        let mut block = Block {
            index,
            prev_hash,
            timestamp,
            records,
            hash: Digest::ZERO,
        };
        block.hash = block.compute_hash();
        block
    }

    /// Canonical one-line text form, without the trailing newline.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("block serializes")
    }

    /// Strict inverse of [`Block::to_line`].
    pub fn from_line(line: &[u8]) -> Option<Block> {
        let block: Block = serde_json::from_slice(line).ok()?;
        (block.to_line().as_bytes() == line).then_some(block)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "index", rename_all = "lowercase")]
pub enum ChainStatus {
    Valid,
    Violation(u64),
}

/// Checks every block invariant and returns the smallest violating index.
pub fn verify_blocks(blocks: &[Block]) -> ChainStatus {
    let mut seqs: BTreeMap<(RecordKind, &str), u64> = BTreeMap::new();
    let mut prev = Digest::ZERO;
    for (i, block) in blocks.iter().enumerate() {
        let i = i as u64;
        let mut ok = block.index == i && block.prev_hash == prev && block.compute_hash() == block.hash;
        if i == 0 {
            ok &= block.records.len() == 1 && block.records[0].kind == RecordKind::Contract;
        } else {
            ok &= !block.records.is_empty();
        }
        for r in &block.records {
            let next = seqs.entry((r.kind, r.key.as_str())).or_insert(0);
            ok &= r.seq == *next;
            *next += 1;
        }
        if !ok {
            return ChainStatus::Violation(i);
        }
        prev = block.hash;
    }
    ChainStatus::Valid
}

/// Parses a ledger file and verifies it. An unparseable or non-canonical line
/// is a violation at that line's index.
pub fn verify_ledger_bytes(bytes: &[u8]) -> ChainStatus {
    match parse_ledger(bytes) {
        Ok(blocks) => verify_blocks(&blocks),
        Err(line) => {
            // Blocks before the bad line may themselves be broken.
            let prefix = parse_ledger_prefix(bytes, line);
            match verify_blocks(&prefix) {
                ChainStatus::Violation(i) => ChainStatus::Violation(i),
                ChainStatus::Valid => ChainStatus::Violation(line),
            }
        }
    }
}

fn split_lines(bytes: &[u8]) -> Result<Vec<&[u8]>, u64> {
    if bytes.is_empty() {
        return Ok(Vec::new());
    }
    let mut lines: Vec<&[u8]> = bytes.split(|&b| b == b'\n').collect();
    // A well-formed file ends with a newline, leaving one empty tail piece.
    match lines.pop() {
        Some(tail) if tail.is_empty() => Ok(lines),
        _ => Err(lines.len() as u64),
    }
}

fn parse_ledger_prefix(bytes: &[u8], upto: u64) -> Vec<Block> {
    bytes
        .split(|&b| b == b'\n')
        .take(upto as usize)
        .filter_map(Block::from_line)
        .collect()
}

/// Parses every line, returning the index of the first bad line on failure.
pub fn parse_ledger(bytes: &[u8]) -> Result<Vec<Block>, u64> {
    let lines = split_lines(bytes)?;
    lines
        .iter()
        .enumerate()
        .map(|(i, l)| Block::from_line(l).ok_or(i as u64))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuthorizationMatrix {
    grants: BTreeMap<ComponentRole, BTreeSet<(RecordKind, Access)>>,
}

impl Default for AuthorizationMatrix {
    fn default() -> Self {
        use RecordKind::*;
        let mut grants: BTreeMap<ComponentRole, BTreeSet<(RecordKind, Access)>> = BTreeMap::new();
        for role in ComponentRole::ALL {
            let set = grants.entry(role).or_default();
            for kind in RecordKind::ALL {
                if kind != MaskingTable {
                    set.insert((kind, Access::Read));
                }
            }
        }
        let appends: [(ComponentRole, &[RecordKind]); 4] = [
            (
                ComponentRole::Fam,
                &[Contract, Membership, Service, AccessPolicy, SlaPolicy, TenantConfig],
            ),
            (ComponentRole::Frm, &[AccessLog, SlaEvidence]),
            (ComponentRole::Dm, &[MaskingTable]),
            (ComponentRole::Anm, &[AnonHistory]),
        ];
        for (role, kinds) in appends {
            let set = grants.entry(role).or_default();
            set.extend(kinds.iter().map(|k| (*k, Access::Append)));
        }
        grants
            .entry(ComponentRole::Dm)
            .or_default()
            .insert((MaskingTable, Access::Read));
        Self { grants }
    }
}

impl AuthorizationMatrix {
    pub fn permits(&self, role: ComponentRole, kind: RecordKind, access: Access) -> bool {
        self.grants
            .get(&role)
            .is_some_and(|s| s.contains(&(kind, access)))
    }
}

/// Position of a record inside the chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RecordRef {
    pub block: u64,
    pub position: u32,
}

#[derive(Default)]
struct Chain {
    blocks: Vec<Block>,
    index: BTreeMap<(RecordKind, String), Vec<RecordRef>>,
}

impl Chain {
    fn next_seq(&self, kind: RecordKind, key: &str) -> u64 {
        self.index
            .get(&(kind, key.to_string()))
            .map_or(0, |v| v.len() as u64)
    }

    fn record(&self, r: RecordRef) -> &GovernanceRecord {
        &self.blocks[r.block as usize].records[r.position as usize]
    }

    fn push(&mut self, block: Block) {
        for (pos, r) in block.records.iter().enumerate() {
            self.index.entry((r.kind, r.key.clone())).or_default().push(RecordRef {
                block: block.index,
                position: pos as u32,
            });
        }
        self.blocks.push(block);
    }
}

/// The governance registry. Appends are linearized by a single write lock;
/// readers observe a prefix of the chain.
pub struct Registry {
    authority: TokenAuthority,
    matrix: AuthorizationMatrix,
    clock: SimClock,
    chain: RwLock<Chain>,
    sink: Mutex<Option<File>>,
}

impl fmt::Debug for Registry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry").field("blocks", &self.len()).finish()
    }
}

impl Registry {
    pub fn new(authority: TokenAuthority) -> Self {
        let clock = authority.clock().clone();
        Self {
            authority,
            matrix: AuthorizationMatrix::default(),
            clock,
            chain: RwLock::new(Chain::default()),
            sink: Mutex::new(None),
        }
    }

    /// Rebuilds a registry from a ledger file's contents, refusing broken chains.
    pub fn from_ledger_bytes(authority: TokenAuthority, bytes: &[u8]) -> Result<Self, RegistryError> {
        let blocks = parse_ledger(bytes).map_err(|line| RegistryError::Parse { line })?;
        if let ChainStatus::Violation(i) = verify_blocks(&blocks) {
            return Err(RegistryError::BrokenChain(i));
        }
        let registry = Self::new(authority);
        {
            let mut chain = registry.chain.write();
            for b in blocks {
                chain.push(b);
            }
        }
        Ok(registry)
    }

    /// Mirrors every future block to `path` as an append-only file. Existing
    /// blocks are written first, replacing the file's contents.
    pub fn attach_file(&self, path: &Path) -> Result<(), RegistryError> {
        let mut file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)?;
        file.write_all(self.ledger_text().as_bytes())?;
        file.flush()?;
        *self.sink.lock() = Some(file);
        Ok(())
    }

    fn persist(&self, block: &Block) -> Result<(), RegistryError> {
        if let Some(file) = self.sink.lock().as_mut() {
            let mut line = block.to_line();
            line.push('\n');
            file.write_all(line.as_bytes())?;
            file.flush()?;
        }
        Ok(())
    }

    pub fn matrix(&self) -> &AuthorizationMatrix {
        &self.matrix
    }

    pub fn genesis(&self, contract_payload: Vec<u8>) -> Result<Block, RegistryError> {
        let mut chain = self.chain.write();
        if !chain.blocks.is_empty() {
            return Err(RegistryError::LedgerNotEmpty);
        }
        let record = GovernanceRecord {
            kind: RecordKind::Contract,
            key: "sfac".into(),
            seq: 0,
            author: ComponentRole::Fam,
            tombstone: false,
            payload: contract_payload,
        };
        let block = Block::seal(0, Digest::ZERO, self.clock.now(), vec![record]);
        self.persist(&block)?;
        chain.push(block.clone());
        Ok(block)
    }

    fn authorize(&self, token: &CryptoToken, kind: RecordKind, access: Access) -> Result<ComponentRole, RegistryError> {
        let role = self.authority.verify_component(token)?;
        if !self.matrix.permits(role, kind, access) {
            return Err(RegistryError::Unauthorized { role, kind, access });
        }
        Ok(role)
    }

    /// Appends all drafts as one block, or nothing.
    pub fn append(&self, token: &CryptoToken, drafts: Vec<RecordDraft>) -> Result<u64, RegistryError> {
        if drafts.is_empty() {
            return Err(RegistryError::EmptyAppend);
        }
        let mut role = None;
        for d in &drafts {
            role = Some(self.authorize(token, d.kind, Access::Append)?);
        }
        let author = role.expect("non-empty drafts");

        let mut chain = self.chain.write();
        let Some(tip) = chain.blocks.last() else {
            return Err(RegistryError::NoGenesis);
        };
        let (index, prev_hash) = (tip.index + 1, tip.hash);

        let mut pending: BTreeMap<(RecordKind, &str), u64> = BTreeMap::new();
        for d in &drafts {
            let expected = pending
                .entry((d.kind, d.key.as_str()))
                .or_insert_with(|| chain.next_seq(d.kind, &d.key));
            if d.seq != *expected {
                return Err(RegistryError::SeqConflict {
                    kind: d.kind,
                    key: d.key.clone(),
                    expected: *expected,
                    got: d.seq,
                });
            }
            *expected += 1;
        }

        let records = drafts
            .into_iter()
            .map(|d| GovernanceRecord {
                kind: d.kind,
                key: d.key,
                seq: d.seq,
                author,
                tombstone: d.tombstone,
                payload: d.payload,
            })
            .collect();
        let block = Block::seal(index, prev_hash, self.clock.now(), records);
        self.persist(&block)?;
        chain.push(block);
        Ok(index)
    }

    /// Seq the next record for `(kind, key)` must carry.
    pub fn next_seq(&self, kind: RecordKind, key: &str) -> u64 {
        self.chain.read().next_seq(kind, key)
    }

    pub fn get_latest(
        &self,
        token: &CryptoToken,
        kind: RecordKind,
        key: &str,
    ) -> Result<Option<GovernanceRecord>, RegistryError> {
        self.authorize(token, kind, Access::Read)?;
        let chain = self.chain.read();
        let latest = chain
            .index
            .get(&(kind, key.to_string()))
            .and_then(|refs| refs.last())
            .map(|r| chain.record(*r));
        Ok(latest.filter(|r| !r.tombstone).cloned())
    }

    pub fn get_history(
        &self,
        token: &CryptoToken,
        kind: RecordKind,
        key: &str,
    ) -> Result<Vec<GovernanceRecord>, RegistryError> {
        self.authorize(token, kind, Access::Read)?;
        let chain = self.chain.read();
        Ok(chain
            .index
            .get(&(kind, key.to_string()))
            .map(|refs| refs.iter().map(|r| chain.record(*r).clone()).collect())
            .unwrap_or_default())
    }

    /// History with the block position of every record.
    pub fn get_history_refs(
        &self,
        token: &CryptoToken,
        kind: RecordKind,
        key: &str,
    ) -> Result<Vec<(RecordRef, GovernanceRecord)>, RegistryError> {
        self.authorize(token, kind, Access::Read)?;
        let chain = self.chain.read();
        Ok(chain
            .index
            .get(&(kind, key.to_string()))
            .map(|refs| refs.iter().map(|r| (*r, chain.record(*r).clone())).collect())
            .unwrap_or_default())
    }

    /// Keys of `kind` whose latest record is not a tombstone, sorted.
    pub fn live_keys(&self, token: &CryptoToken, kind: RecordKind) -> Result<Vec<String>, RegistryError> {
        self.authorize(token, kind, Access::Read)?;
        let chain = self.chain.read();
        Ok(chain
            .index
            .range((kind, String::new())..)
            .take_while(|((k, _), _)| *k == kind)
            .filter(|(_, refs)| refs.last().is_some_and(|r| !chain.record(*r).tombstone))
            .map(|((_, key), _)| key.clone())
            .collect())
    }

    /// Every key ever written for `kind`, including tombstoned ones.
    pub fn all_keys(&self, token: &CryptoToken, kind: RecordKind) -> Result<Vec<String>, RegistryError> {
        self.authorize(token, kind, Access::Read)?;
        let chain = self.chain.read();
        Ok(chain
            .index
            .range((kind, String::new())..)
            .take_while(|((k, _), _)| *k == kind)
            .map(|((_, key), _)| key.clone())
            .collect())
    }

    pub fn verify_chain(&self) -> ChainStatus {
        verify_blocks(&self.chain.read().blocks)
    }

    pub fn len(&self) -> usize {
        self.chain.read().blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn record_count(&self) -> usize {
        self.chain.read().blocks.iter().map(|b| b.records.len()).sum()
    }

    pub fn tip(&self) -> Option<Digest> {
        self.chain.read().blocks.last().map(|b| b.hash)
    }

    pub fn blocks(&self) -> Vec<Block> {
        self.chain.read().blocks.clone()
    }

    pub fn blocks_range(&self, from: usize, limit: usize) -> Vec<Block> {
        let chain = self.chain.read();
        chain.blocks.iter().skip(from).take(limit).cloned().collect()
    }

    pub fn ledger_text(&self) -> String {
        let chain = self.chain.read();
        let mut out = String::new();
        for b in &chain.blocks {
            out.push_str(&b.to_line());
            out.push('\n');
        }
        out
    }
}

/// A follower that replays blocks from a leader and re-verifies each link.
#[derive(Debug, Default)]
pub struct Replica {
    blocks: Vec<Block>,
}

impl Replica {
    pub fn new() -> Self {
        Self::default()
    }

    /// Pulls blocks the replica has not seen; stops at the first block that
    /// would break the chain and reports it.
    pub fn sync(&mut self, leader: &Registry) -> Result<usize, RegistryError> {
        let fresh = leader.blocks_range(self.blocks.len(), usize::MAX);
        let mut accepted = 0;
        for block in fresh {
            let mut candidate = self.blocks.clone();
            candidate.push(block.clone());
            if verify_blocks(&candidate) != ChainStatus::Valid {
                return Err(RegistryError::BrokenChain(block.index));
            }
            self.blocks.push(block);
            accepted += 1;
        }
        Ok(accepted)
    }

    pub fn tip(&self) -> Option<Digest> {
        self.blocks.last().map(|b| b.hash)
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::{Arc, Barrier};

    fn setup() -> (Registry, TokenAuthority) {
        let clock = SimClock::new(5_000);
        let authority = TokenAuthority::new([3u8; 32], clock);
        (Registry::new(authority.clone()), authority)
    }

    fn fam(a: &TokenAuthority) -> CryptoToken {
        a.issue_component(ComponentRole::Fam)
    }

    #[test]
    fn genesis_block_shape() {
        let (reg, _) = setup();
        let b = reg.genesis(b"contract".to_vec()).unwrap();
        assert_eq!(b.index, 0);
        assert_eq!(b.prev_hash, Digest::ZERO);
        assert_eq!(b.records.len(), 1);
        assert_eq!(b.records[0].kind, RecordKind::Contract);
        assert_eq!(reg.verify_chain(), ChainStatus::Valid);
        assert!(matches!(reg.genesis(b"c".to_vec()), Err(RegistryError::LedgerNotEmpty)));
    }

    #[test]
    fn append_before_genesis() {
        let (reg, a) = setup();
        let draft = RecordDraft::new(RecordKind::Service, "s", 0, vec![]);
        assert!(matches!(reg.append(&fam(&a), vec![draft]), Err(RegistryError::NoGenesis)));
    }

    #[test]
    fn matrix_enforced_on_append_and_read() {
        let (reg, a) = setup();
        reg.genesis(vec![]).unwrap();
        let frm = a.issue_component(ComponentRole::Frm);
        let log = RecordDraft::new(RecordKind::AccessLog, "log", 0, b"e".to_vec());
        assert_eq!(reg.append(&frm, vec![log]).unwrap(), 1);
        let pol = RecordDraft::new(RecordKind::AccessPolicy, "svc", 0, b"p".to_vec());
        assert!(matches!(
            reg.append(&frm, vec![pol]),
            Err(RegistryError::Unauthorized { kind: RecordKind::AccessPolicy, .. })
        ));

        let dm = a.issue_component(ComponentRole::Dm);
        let table = RecordDraft::new(RecordKind::MaskingTable, "tokens", 0, b"{}".to_vec());
        reg.append(&dm, vec![table]).unwrap();
        assert!(reg.get_latest(&dm, RecordKind::MaskingTable, "tokens").unwrap().is_some());
        assert!(matches!(
            reg.get_latest(&fam(&a), RecordKind::MaskingTable, "tokens"),
            Err(RegistryError::Unauthorized { access: Access::Read, .. })
        ));
    }

    #[test]
    fn every_matrix_denial_holds() {
        let m = AuthorizationMatrix::default();
        let appenders: BTreeMap<RecordKind, ComponentRole> = [
            (RecordKind::Contract, ComponentRole::Fam),
            (RecordKind::Membership, ComponentRole::Fam),
            (RecordKind::Service, ComponentRole::Fam),
            (RecordKind::AccessPolicy, ComponentRole::Fam),
            (RecordKind::SlaPolicy, ComponentRole::Fam),
            (RecordKind::TenantConfig, ComponentRole::Fam),
            (RecordKind::AccessLog, ComponentRole::Frm),
            (RecordKind::SlaEvidence, ComponentRole::Frm),
            (RecordKind::MaskingTable, ComponentRole::Dm),
            (RecordKind::AnonHistory, ComponentRole::Anm),
        ]
        .into_iter()
        .collect();
        for role in ComponentRole::ALL {
            for kind in RecordKind::ALL {
                assert_eq!(m.permits(role, kind, Access::Append), appenders[&kind] == role);
                let readable = kind != RecordKind::MaskingTable || role == ComponentRole::Dm;
                assert_eq!(m.permits(role, kind, Access::Read), readable);
            }
        }
    }

    #[test]
    fn forged_token_rejected() {
        let (reg, a) = setup();
        reg.genesis(vec![]).unwrap();
        let mut t = a.issue_component(ComponentRole::Frm);
        t.role = ComponentRole::Fam;
        let d = RecordDraft::new(RecordKind::Service, "s", 0, vec![]);
        assert!(matches!(reg.append(&t, vec![d]), Err(RegistryError::InvalidToken)));
        let other = TokenAuthority::new([9u8; 32], SimClock::new(0));
        let d = RecordDraft::new(RecordKind::Service, "s", 0, vec![]);
        assert!(matches!(
            reg.append(&other.issue_component(ComponentRole::Fam), vec![d]),
            Err(RegistryError::InvalidToken)
        ));
    }

    #[test]
    fn latest_history_and_tombstones() {
        let (reg, a) = setup();
        let t = fam(&a);
        reg.genesis(vec![]).unwrap();
        assert!(reg.get_latest(&t, RecordKind::Service, "k").unwrap().is_none());
        assert!(reg.get_history(&t, RecordKind::Service, "k").unwrap().is_empty());
        reg.append(&t, vec![RecordDraft::new(RecordKind::Service, "k", 0, b"v0".to_vec())])
            .unwrap();
        reg.append(&t, vec![RecordDraft::new(RecordKind::Service, "k", 1, b"v1".to_vec())])
            .unwrap();
        let latest = reg.get_latest(&t, RecordKind::Service, "k").unwrap().unwrap();
        assert_eq!((latest.seq, latest.payload.as_slice()), (1, &b"v1"[..]));
        assert_eq!(reg.live_keys(&t, RecordKind::Service).unwrap(), vec!["k"]);

        reg.append(
            &t,
            vec![RecordDraft::new(RecordKind::Service, "k", 2, vec![]).tombstone()],
        )
        .unwrap();
        assert!(reg.get_latest(&t, RecordKind::Service, "k").unwrap().is_none());
        let h = reg.get_history(&t, RecordKind::Service, "k").unwrap();
        assert_eq!(h.iter().map(|r| r.seq).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(h.last().unwrap().tombstone);
        assert!(reg.live_keys(&t, RecordKind::Service).unwrap().is_empty());
        assert_eq!(reg.all_keys(&t, RecordKind::Service).unwrap(), vec!["k"]);
    }

    #[test]
    fn failed_append_leaves_chain_untouched() {
        let (reg, a) = setup();
        let t = fam(&a);
        reg.genesis(vec![]).unwrap();
        reg.append(&t, vec![RecordDraft::new(RecordKind::Service, "k", 0, vec![1])])
            .unwrap();
        let before = reg.ledger_text();
        let batch = vec![
            RecordDraft::new(RecordKind::Service, "other", 0, vec![2]),
            RecordDraft::new(RecordKind::Service, "k", 0, vec![3]),
        ];
        assert!(matches!(reg.append(&t, batch), Err(RegistryError::SeqConflict { expected: 1, got: 0, .. })));
        let batch = vec![
            RecordDraft::new(RecordKind::Service, "x", 0, vec![2]),
            RecordDraft::new(RecordKind::AccessLog, "x", 0, vec![3]),
        ];
        assert!(matches!(reg.append(&t, batch), Err(RegistryError::Unauthorized { .. })));
        assert_eq!(reg.ledger_text(), before);
    }

    #[test]
    fn batch_may_advance_one_key_twice() {
        let (reg, a) = setup();
        let t = fam(&a);
        reg.genesis(vec![]).unwrap();
        let batch = vec![
            RecordDraft::new(RecordKind::Service, "k", 0, vec![]),
            RecordDraft::new(RecordKind::Service, "k", 1, vec![]),
        ];
        reg.append(&t, batch).unwrap();
        assert_eq!(reg.next_seq(RecordKind::Service, "k"), 2);
        assert_eq!(reg.verify_chain(), ChainStatus::Valid);
    }

    #[test]
    fn concurrent_writers_on_same_seq() {
        for _ in 0..20 {
            let (reg, a) = setup();
            reg.genesis(vec![]).unwrap();
            let reg = Arc::new(reg);
            let barrier = Arc::new(Barrier::new(2));
            let handles: Vec<_> = (0..2u8)
                .map(|w| {
                    let reg = Arc::clone(&reg);
                    let barrier = Arc::clone(&barrier);
                    let t = a.issue_component(ComponentRole::Frm);
                    std::thread::spawn(move || {
                        barrier.wait();
                        reg.append(&t, vec![RecordDraft::new(RecordKind::AccessLog, "log", 0, vec![w])])
                    })
                })
                .collect();
            let results: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
            assert_eq!(results.iter().filter(|r| r.is_ok()).count(), 1);
            assert_eq!(
                results
                    .iter()
                    .filter(|r| matches!(r, Err(RegistryError::SeqConflict { .. })))
                    .count(),
                1
            );
            let frm = a.issue_component(ComponentRole::Frm);
            assert_eq!(reg.get_history(&frm, RecordKind::AccessLog, "log").unwrap().len(), 1);
        }
    }

    fn five_block_chain() -> Vec<Block> {
        let (reg, a) = setup();
        let t = fam(&a);
        reg.genesis(b"c".to_vec()).unwrap();
        for i in 0..4u64 {
            reg.append(&t, vec![RecordDraft::new(RecordKind::Service, format!("s{i}"), 0, vec![i as u8; 4])])
                .unwrap();
        }
        reg.blocks()
    }

    #[test]
    fn untampered_chain_is_valid() {
        assert_eq!(verify_blocks(&five_block_chain()), ChainStatus::Valid);
    }

    #[test]
    fn payload_flip_detected_at_block() {
        let mut blocks = five_block_chain();
        blocks[3].records[0].payload[0] ^= 0x01;
        assert_eq!(verify_blocks(&blocks), ChainStatus::Violation(3));
    }

    #[test]
    fn splice_detected_at_gap() {
        let mut blocks = five_block_chain();
        let removed = blocks.remove(2);
        // The block now sitting at position 2 should have linked to the spliced-out one.
        assert_eq!(blocks[2].prev_hash, removed.hash);
        assert_ne!(blocks[2].prev_hash, blocks[1].hash);
        // Relink block 3 onto block 1 and reseal it: its index field still says 3.
        blocks[2].prev_hash = blocks[1].hash;
        blocks[2].hash = blocks[2].compute_hash();
        assert_eq!(verify_blocks(&blocks), ChainStatus::Violation(2));
    }

    #[test]
    fn ledger_text_round_trip() {
        let (reg, a) = setup();
        reg.genesis(b"c".to_vec()).unwrap();
        reg.append(&fam(&a), vec![RecordDraft::new(RecordKind::Service, "s", 0, b"x".to_vec())])
            .unwrap();
        let text = reg.ledger_text();
        assert_eq!(verify_ledger_bytes(text.as_bytes()), ChainStatus::Valid);
        let copy = Registry::from_ledger_bytes(a.clone(), text.as_bytes()).unwrap();
        assert_eq!(copy.tip(), reg.tip());
        assert_eq!(copy.next_seq(RecordKind::Service, "s"), 1);
    }

    #[test]
    fn file_level_violations() {
        let (reg, a) = setup();
        reg.genesis(b"c".to_vec()).unwrap();
        for i in 0..3 {
            reg.append(&fam(&a), vec![RecordDraft::new(RecordKind::Service, "s", i, vec![1, 2, 3])])
                .unwrap();
        }
        let text = reg.ledger_text();
        let bytes = text.as_bytes();
        let truncated = &bytes[..bytes.len() - 10];
        assert_eq!(verify_ledger_bytes(truncated), ChainStatus::Violation(3));

        let second_line_start = text.find('\n').unwrap() + 1;
        let mut flipped = bytes.to_vec();
        // Uppercase a hex digit in block 1's hash: same value, non-canonical text.
        let hash_pos = second_line_start + text[second_line_start..].find("\"hash\":\"").unwrap() + 8;
        let idx = (hash_pos..).find(|&p| flipped[p].is_ascii_lowercase()).unwrap();
        flipped[idx] = flipped[idx].to_ascii_uppercase();
        assert_eq!(verify_ledger_bytes(&flipped), ChainStatus::Violation(1));
        assert_eq!(verify_ledger_bytes(b""), ChainStatus::Valid);
    }

    #[test]
    fn replica_follows_and_rejects_forks() {
        let (reg, a) = setup();
        reg.genesis(b"c".to_vec()).unwrap();
        let mut replica = Replica::new();
        assert_eq!(replica.sync(&reg).unwrap(), 1);
        reg.append(&fam(&a), vec![RecordDraft::new(RecordKind::Service, "s", 0, vec![])])
            .unwrap();
        assert_eq!(replica.sync(&reg).unwrap(), 1);
        assert_eq!(replica.tip(), reg.tip());

        let (other, b) = setup();
        other.genesis(b"different".to_vec()).unwrap();
        other
            .append(&fam(&b), vec![RecordDraft::new(RecordKind::Service, "s", 0, vec![])])
            .unwrap();
        other
            .append(&fam(&b), vec![RecordDraft::new(RecordKind::Service, "s", 1, vec![])])
            .unwrap();
        assert!(matches!(replica.sync(&other), Err(RegistryError::BrokenChain(2))));
    }

    #[test]
    fn attached_file_mirrors_chain() {
        let dir = std::env::temp_dir().join(format!("ledger-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ledger.txt");
        let (reg, a) = setup();
        reg.genesis(b"c".to_vec()).unwrap();
        reg.attach_file(&path).unwrap();
        reg.append(&fam(&a), vec![RecordDraft::new(RecordKind::Service, "s", 0, vec![])])
            .unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), reg.ledger_text());
        std::fs::remove_dir_all(&dir).ok();
    }
}
