//! Data masking: selector-driven redaction, tokenization (plain and
//! format-preserving) and encryption (AES-256-GCM and format-preserving) of
//! text leaves inside JSON payloads.
//!
//! The format-preserving cipher is a four-round keyed Feistel permutation over
//! the per-position character-class alphabets of the input (digits, upper- and
//! lowercase ASCII letters); every other character is kept verbatim. It is
//! format-preserving and deterministic, not a vetted cipher.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use aes_gcm::aead::{Aead, KeyInit};
use aes_gcm::{Aes256Gcm, Nonce};
use hmac::{Hmac, Mac};
use parking_lot::Mutex;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::Sha256;
use thiserror::Error;

use crate::identity::CryptoToken;
use crate::registry::{RecordDraft, RecordKind, Registry, RegistryError};

pub const DEFAULT_REDACT_GLYPH: &str = "*****";
const TABLE_KEY: &str = "tokenization";
const TOKEN_LEN: usize = 16;
const MAX_TOKEN_ATTEMPTS: usize = 64;
const FEISTEL_ROUNDS: u8 = 4;

#[derive(Debug, Error)]
pub enum MaskingError {
    #[error("selector {0:?} matched nothing")]
    SelectorMiss(String),
    #[error("value at {0} is not text")]
    NotText(String),
    #[error("invalid masking policy: {0:?}")]
    InvalidPolicy(Vec<PolicyIssue>),
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("unknown key id {0:?}")]
    UnknownKey(String),
    #[error("ciphertext does not open under key {0:?}")]
    WrongKey(String),
    #[error("malformed ciphertext")]
    MalformedCiphertext,
    #[error("no unused token left for {0:?}")]
    TokenSpaceExhausted(String),
    #[error("tokenization table version {0} not found")]
    UnknownTableVersion(u64),
    #[error("tokenization table payload: {0}")]
    TableDecode(#[from] serde_json::Error),
    #[error(transparent)]
    Registry(#[from] RegistryError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum MaskOp {
    Redact,
    Tokenize,
    Fpt,
    Encrypt,
    Fpe,
}

impl MaskOp {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "REDACT" => Some(MaskOp::Redact),
            "TOKENIZE" => Some(MaskOp::Tokenize),
            "FPT" => Some(MaskOp::Fpt),
            "ENCRYPT" => Some(MaskOp::Encrypt),
            "FPE" => Some(MaskOp::Fpe),
            _ => None,
        }
    }

    fn needs_key(self) -> bool {
        matches!(self, MaskOp::Encrypt | MaskOp::Fpe)
    }

    pub fn is_reversible(self) -> bool {
        self != MaskOp::Redact
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRule {
    pub selector: String,
    pub op: MaskOp,
    #[serde(default)]
    pub params: BTreeMap<String, String>,
}

impl MaskRule {
    pub fn new(selector: &str, op: MaskOp) -> Self {
        Self {
            selector: selector.into(),
            op,
            params: BTreeMap::new(),
        }
    }

    pub fn with_param(mut self, k: &str, v: &str) -> Self {
        self.params.insert(k.into(), v.into());
        self
    }

    fn key_id(&self) -> &str {
        self.params.get("key").map(String::as_str).unwrap_or_default()
    }
}

fn default_strict() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskingPolicy {
    pub rules: Vec<MaskRule>,
    /// Strict policies fail on selectors that match nothing.
    #[serde(default = "default_strict")]
    pub strict: bool,
}

impl MaskingPolicy {
    pub fn new(rules: Vec<MaskRule>) -> Self {
        Self { rules, strict: true }
    }

    pub fn lenient(mut self) -> Self {
        self.strict = false;
        self
    }

    pub fn has_tokenizing_rules(&self) -> bool {
        self.rules.iter().any(|r| matches!(r.op, MaskOp::Tokenize | MaskOp::Fpt))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyIssue {
    pub rule: usize,
    pub message: String,
}

#[derive(Deserialize)]
struct RawRule {
    selector: String,
    op: String,
    #[serde(default)]
    params: BTreeMap<String, String>,
}

#[derive(Deserialize)]
struct RawPolicy {
    rules: Vec<RawRule>,
    strict: Option<bool>,
}

/// Parses and validates a masking policy document, reporting every problem.
pub fn validate_masking_policy(document: &str) -> Result<MaskingPolicy, Vec<PolicyIssue>> {
    let raw: RawPolicy = serde_json::from_str(document).map_err(|e| {
        vec![PolicyIssue {
            rule: 0,
            message: format!("unparseable policy: {e}"),
        }]
    })?;
    let mut issues = Vec::new();
    let mut rules = Vec::new();
    for (i, r) in raw.rules.into_iter().enumerate() {
        if let Err(e) = Selector::parse(&r.selector) {
            issues.push(PolicyIssue {
                rule: i,
                message: format!("bad selector {:?}: {e}", r.selector),
            });
        }
        let Some(op) = MaskOp::parse(&r.op) else {
            issues.push(PolicyIssue {
                rule: i,
                message: format!("unknown op {:?}", r.op),
            });
            continue;
        };
        if op.needs_key() && r.params.get("key").is_none_or(|k| k.is_empty()) {
            issues.push(PolicyIssue {
                rule: i,
                message: format!("{:?} rule is missing required param \"key\"", r.op),
            });
        }
        rules.push(MaskRule {
            selector: r.selector,
            op,
            params: r.params,
        });
    }
    if issues.is_empty() {
        Ok(MaskingPolicy {
            rules,
            strict: raw.strict.unwrap_or(true),
        })
    } else {
        Err(issues)
    }
}

/// Structural checks for a policy built in code.
pub fn check_policy(policy: &MaskingPolicy) -> Result<(), Vec<PolicyIssue>> {
    let doc = serde_json::to_string(policy).expect("policy serializes");
    validate_masking_policy(&doc).map(|_| ())
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
enum Step {
    Key(String),
    Index(usize),
    AnyIndex,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Selector(Vec<Step>);

impl Selector {
    /// Grammar: `key ( '.' key | '[' digits ']' | '[*]' )*` where keys are
    /// non-empty runs of `[A-Za-z0-9_-]`. A leading bracket step is allowed.
    fn parse(s: &str) -> Result<Self, String> {
        let bytes = s.as_bytes();
        let mut steps = Vec::new();
        let mut i = 0;
        let is_key = |b: u8| b.is_ascii_alphanumeric() || b == b'_' || b == b'-';
        let mut expect_key = true;
        while i < bytes.len() {
            match bytes[i] {
                b'[' if steps.is_empty() || !expect_key => {
                    let end = s[i..].find(']').ok_or("unclosed '['")? + i;
                    let inner = &s[i + 1..end];
                    if inner == "*" {
                        steps.push(Step::AnyIndex);
                    } else if !inner.is_empty() && inner.bytes().all(|b| b.is_ascii_digit()) {
                        steps.push(Step::Index(inner.parse().map_err(|_| "index too large")?));
                    } else {
                        return Err(format!("bad index {inner:?}"));
                    }
                    i = end + 1;
                    expect_key = false;
                }
                b'.' if !steps.is_empty() && !expect_key => {
                    i += 1;
                    expect_key = true;
                    if i >= bytes.len() {
                        return Err("trailing '.'".into());
                    }
                }
                b if is_key(b) && expect_key => {
                    let start = i;
                    while i < bytes.len() && is_key(bytes[i]) {
                        i += 1;
                    }
                    steps.push(Step::Key(s[start..i].to_string()));
                    expect_key = false;
                }
                other => return Err(format!("unexpected {:?} at {i}", other as char)),
            }
        }
        if steps.is_empty() {
            return Err("empty selector".into());
        }
        Ok(Selector(steps))
    }

    /// Concrete paths of every node the selector reaches, and whether the
    /// selector reached an existing but empty list through a wildcard.
    fn resolve(&self, doc: &Value) -> (Vec<Vec<Step>>, bool) {
        let mut out = Vec::new();
        let mut path = Vec::new();
        let mut vacuous = false;
        Self::walk(&self.0, doc, &mut path, &mut out, &mut vacuous);
        (out, vacuous)
    }

    fn walk(steps: &[Step], node: &Value, path: &mut Vec<Step>, out: &mut Vec<Vec<Step>>, vacuous: &mut bool) {
        let Some((first, rest)) = steps.split_first() else {
            out.push(path.clone());
            return;
        };
        match (first, node) {
            (Step::Key(k), Value::Object(map)) => {
                if let Some(child) = map.get(k) {
                    path.push(first.clone());
                    Self::walk(rest, child, path, out, vacuous);
                    path.pop();
                }
            }
            (Step::Index(i), Value::Array(items)) => {
                if let Some(child) = items.get(*i) {
                    path.push(first.clone());
                    Self::walk(rest, child, path, out, vacuous);
                    path.pop();
                }
            }
            (Step::AnyIndex, Value::Array(items)) => {
                *vacuous |= items.is_empty();
                for (i, child) in items.iter().enumerate() {
                    path.push(Step::Index(i));
                    Self::walk(rest, child, path, out, vacuous);
                    path.pop();
                }
            }
            _ => {}
        }
    }
}

fn render_path(path: &[Step]) -> String {
    let mut s = String::new();
    for step in path {
        match step {
            Step::Key(k) => {
                if !s.is_empty() {
                    s.push('.');
                }
                s.push_str(k);
            }
            Step::Index(i) => s.push_str(&format!("[{i}]")),
            Step::AnyIndex => s.push_str("[*]"),
        }
    }
    s
}

fn node_mut<'a>(doc: &'a mut Value, path: &[Step]) -> Option<&'a mut Value> {
    path.iter().try_fold(doc, |node, step| match step {
        Step::Key(k) => node.get_mut(k.as_str()),
        Step::Index(i) => node.get_mut(*i),
        Step::AnyIndex => None,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableEntry {
    pub op: MaskOp,
    pub original: String,
}

/// Bijective token ↔ original map, persisted as full snapshots.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizationTable {
    pub version: u64,
    pub entries: BTreeMap<String, TableEntry>,
    #[serde(skip)]
    reverse: BTreeMap<(MaskOp, String), String>,
}

impl TokenizationTable {
    pub fn new() -> Self {
        Self::default()
    }

    fn rebuild_reverse(&mut self) {
        self.reverse = self
            .entries
            .iter()
            .map(|(tok, e)| ((e.op, e.original.clone()), tok.clone()))
            .collect();
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, serde_json::Error> {
        let mut t: TokenizationTable = serde_json::from_slice(bytes)?;
        t.rebuild_reverse();
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&self, token: &str) -> Option<&TableEntry> {
        self.entries.get(token)
    }

    fn token_for(&self, op: MaskOp, original: &str) -> Option<&String> {
        self.reverse.get(&(op, original.to_string()))
    }

    fn insert(&mut self, token: String, op: MaskOp, original: String) {
        self.reverse.insert((op, original.clone()), token.clone());
        self.entries.insert(token, TableEntry { op, original });
    }
}

/// Symmetric keys addressed by id.
#[derive(Clone, Default)]
pub struct KeyRing {
    keys: BTreeMap<String, [u8; 32]>,
}

impl fmt::Debug for KeyRing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyRing")
            .field("ids", &self.keys.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl KeyRing {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_key(mut self, id: &str, key: [u8; 32]) -> Self {
        self.insert(id, key);
        self
    }

    pub fn insert(&mut self, id: &str, key: [u8; 32]) {
        self.keys.insert(id.to_string(), key);
    }

    fn get(&self, id: &str) -> Result<&[u8; 32], MaskingError> {
        self.keys.get(id).ok_or_else(|| MaskingError::UnknownKey(id.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum CharClass {
    Digit,
    Upper,
    Lower,
    Other,
}

impl CharClass {
    fn of(c: char) -> Self {
        if c.is_ascii_digit() {
            CharClass::Digit
        } else if c.is_ascii_uppercase() {
            CharClass::Upper
        } else if c.is_ascii_lowercase() {
            CharClass::Lower
        } else {
            CharClass::Other
        }
    }

    fn radix(self) -> u32 {
        match self {
            CharClass::Digit => 10,
            CharClass::Upper | CharClass::Lower => 26,
            CharClass::Other => 1,
        }
    }

    fn base(self) -> u8 {
        match self {
            CharClass::Digit => b'0',
            CharClass::Upper => b'A',
            CharClass::Lower => b'a',
            CharClass::Other => 0,
        }
    }

    fn symbol(self, c: char) -> u32 {
        c as u32 - self.base() as u32
    }

    fn char(self, v: u32) -> char {
        (self.base() + v as u8) as char
    }

    fn tag(self) -> u8 {
        match self {
            CharClass::Digit => b'9',
            CharClass::Upper => b'A',
            CharClass::Lower => b'a',
            CharClass::Other => b'_',
        }
    }
}

fn random_in_format(input: &str, rng: &mut impl Rng) -> String {
    input
        .chars()
        .map(|c| match CharClass::of(c) {
            CharClass::Other => c,
            class => class.char(rng.gen_range(0..class.radix())),
        })
        .collect()
}

fn random_token(rng: &mut impl Rng) -> String {
    const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789";
    let body: String = (0..TOKEN_LEN)
        .map(|_| ALPHABET[rng.gen_range(0..ALPHABET.len())] as char)
        .collect();
    format!("tok_{body}")
}

/// The keyed format-preserving permutation.
pub struct FormatPreservingCipher<'k> {
    key: &'k [u8; 32],
}

impl<'k> FormatPreservingCipher<'k> {
    pub fn new(key: &'k [u8; 32]) -> Self {
        Self { key }
    }

    fn round_stream(&self, round: u8, tweak: &[u8], other: &[u32], len: usize) -> Vec<u16> {
        let mut out = Vec::with_capacity(len);
        let mut counter = 0u32;
        while out.len() < len {
            let mut mac = <Hmac<Sha256> as Mac>::new_from_slice(self.key).expect("any key length");
            mac.update(&[round]);
            mac.update(&(tweak.len() as u64).to_be_bytes());
            mac.update(tweak);
            for v in other {
                mac.update(&v.to_be_bytes());
            }
            mac.update(&counter.to_be_bytes());
            let block = mac.finalize().into_bytes();
            out.extend(block.chunks(2).map(|c| u16::from_be_bytes([c[0], c[1]])));
            counter += 1;
        }
        out.truncate(len);
        out
    }

    fn transform(&self, input: &str, forward: bool) -> String {
        let chars: Vec<char> = input.chars().collect();
        let classes: Vec<CharClass> = chars.iter().map(|c| CharClass::of(*c)).collect();
        let tweak: Vec<u8> = chars
            .iter()
            .zip(&classes)
            .flat_map(|(c, cl)| match cl {
                CharClass::Other => {
                    let mut buf = [0u8; 4];
                    let mut v = vec![b'_'];
                    v.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
                    v
                }
                _ => vec![cl.tag()],
            })
            .collect();
        let positions: Vec<usize> = (0..chars.len()).filter(|&i| classes[i] != CharClass::Other).collect();
        let mut digits: Vec<u32> = positions.iter().map(|&i| classes[i].symbol(chars[i])).collect();
        let radices: Vec<u32> = positions.iter().map(|&i| classes[i].radix()).collect();
        let split = positions.len() / 2;

        let rounds: Vec<u8> = if forward {
            (0..FEISTEL_ROUNDS).collect()
        } else {
            (0..FEISTEL_ROUNDS).rev().collect()
        };
        for round in rounds {
            let (target, source) = if round % 2 == 0 { (0..split, split..digits.len()) } else { (split..digits.len(), 0..split) };
            let stream = self.round_stream(round, &tweak, &digits[source], target.len());
            for (offset, idx) in target.enumerate() {
                let r = radices[idx];
                let f = stream[offset] as u32 % r;
                digits[idx] = if forward { (digits[idx] + f) % r } else { (digits[idx] + r - f) % r };
            }
        }

        let mut out = chars;
        for (k, &i) in positions.iter().enumerate() {
            out[i] = classes[i].char(digits[k]);
        }
        out.into_iter().collect()
    }

    pub fn encrypt(&self, plaintext: &str) -> String {
        self.transform(plaintext, true)
    }

    pub fn decrypt(&self, ciphertext: &str) -> String {
        self.transform(ciphertext, false)
    }
}

fn aes_encrypt(key: &[u8; 32], plaintext: &str, rng: &mut impl RngCore) -> String {
    let cipher = Aes256Gcm::new_from_slice(key).expect("32-byte key");
    let mut nonce = [0u8; 12];
    rng.fill_bytes(&mut nonce);
    let ct = cipher
        .encrypt(Nonce::from_slice(&nonce), plaintext.as_bytes())
        .expect("in-memory encryption");
    let mut out = nonce.to_vec();
    out.extend(ct);
    hex::encode(out)
}

fn aes_decrypt(key: &[u8; 32], key_id: &str, ciphertext: &str) -> Result<String, MaskingError> {
    let bytes = hex::decode(ciphertext).map_err(|_| MaskingError::MalformedCiphertext)?;
    if bytes.len() < 12 + 16 {
        return Err(MaskingError::MalformedCiphertext);
    }
    let cipher = Aes256Gcm::new_from_slice(key).expect("32-byte key");
    let plain = cipher
        .decrypt(Nonce::from_slice(&bytes[..12]), &bytes[12..])
        .map_err(|_| MaskingError::WrongKey(key_id.to_string()))?;
    String::from_utf8(plain).map_err(|_| MaskingError::MalformedCiphertext)
}

/// Applies `policy` to `doc`. New tokens are written into `table`.
pub fn mask_document(
    doc: &Value,
    policy: &MaskingPolicy,
    table: &mut TokenizationTable,
    keys: &KeyRing,
    rng: &mut impl Rng,
) -> Result<Value, MaskingError> {
    let mut out = doc.clone();
    let mut done: BTreeSet<Vec<Step>> = BTreeSet::new();
    for rule in &policy.rules {
        let selector = Selector::parse(&rule.selector)
            .map_err(|e| MaskingError::InvalidPolicy(vec![PolicyIssue { rule: 0, message: e }]))?;
        let (paths, vacuous) = selector.resolve(doc);
        if paths.is_empty() && !vacuous && policy.strict {
            return Err(MaskingError::SelectorMiss(rule.selector.clone()));
        }
        for path in paths {
            if done.contains(&path) {
                continue;
            }
            let leaf = node_mut(&mut out, &path).expect("path resolved on the same shape");
            let Value::String(text) = leaf else {
                return Err(MaskingError::NotText(render_path(&path)));
            };
            let masked = match rule.op {
                MaskOp::Redact => rule
                    .params
                    .get("glyph")
                    .cloned()
                    .unwrap_or_else(|| DEFAULT_REDACT_GLYPH.to_string()),
                MaskOp::Tokenize => tokenize(table, MaskOp::Tokenize, text, rng)?,
                MaskOp::Fpt => tokenize(table, MaskOp::Fpt, text, rng)?,
                MaskOp::Encrypt => aes_encrypt(keys.get(rule.key_id())?, text, rng),
                MaskOp::Fpe => FormatPreservingCipher::new(keys.get(rule.key_id())?).encrypt(text),
            };
            *text = masked;
            done.insert(path);
        }
    }
    Ok(out)
}

fn tokenize(table: &mut TokenizationTable, op: MaskOp, original: &str, rng: &mut impl Rng) -> Result<String, MaskingError> {
    if let Some(tok) = table.token_for(op, original) {
        return Ok(tok.clone());
    }
    let token = if op == MaskOp::Fpt && !original.chars().any(|c| CharClass::of(c) != CharClass::Other) {
        // Only one string has this format: the input itself.
        original.to_string()
    } else {
        (0..MAX_TOKEN_ATTEMPTS)
            .map(|_| match op {
                MaskOp::Fpt => random_in_format(original, rng),
                _ => random_token(rng),
            })
            .find(|t| t != original && !table.entries.contains_key(t))
            .ok_or_else(|| MaskingError::TokenSpaceExhausted(original.to_string()))?
    };
    if table.entries.contains_key(&token) {
        return Err(MaskingError::TokenSpaceExhausted(original.to_string()));
    }
    table.insert(token.clone(), op, original.to_string());
    Ok(token)
}

/// Reverses every reversible rule of `policy`; redacted leaves stay redacted.
pub fn unmask_document(
    doc: &Value,
    policy: &MaskingPolicy,
    table: &TokenizationTable,
    keys: &KeyRing,
) -> Result<Value, MaskingError> {
    let mut out = doc.clone();
    let mut done: BTreeSet<Vec<Step>> = BTreeSet::new();
    for rule in &policy.rules {
        let selector = Selector::parse(&rule.selector)
            .map_err(|e| MaskingError::InvalidPolicy(vec![PolicyIssue { rule: 0, message: e }]))?;
        let (paths, vacuous) = selector.resolve(doc);
        if paths.is_empty() && !vacuous && policy.strict {
            return Err(MaskingError::SelectorMiss(rule.selector.clone()));
        }
        for path in paths {
            if !done.insert(path.clone()) {
                continue;
            }
            let leaf = node_mut(&mut out, &path).expect("path resolved on the same shape");
            let Value::String(text) = leaf else {
                return Err(MaskingError::NotText(render_path(&path)));
            };
            let restored = match rule.op {
                MaskOp::Redact => continue,
                MaskOp::Tokenize | MaskOp::Fpt => match table.lookup(text) {
                    Some(entry) if entry.op == rule.op => entry.original.clone(),
                    _ => return Err(MaskingError::UnknownToken(text.clone())),
                },
                MaskOp::Encrypt => aes_decrypt(keys.get(rule.key_id())?, rule.key_id(), text)?,
                MaskOp::Fpe => FormatPreservingCipher::new(keys.get(rule.key_id())?).decrypt(text),
            };
            *text = restored;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskOutcome {
    pub document: Value,
    /// Table snapshot needed to unmask; `None` when no table was ever persisted.
    pub table_version: Option<u64>,
}

struct ServiceState {
    table: TokenizationTable,
    persisted: bool,
    rng: ChaCha20Rng,
}

/// The masking service: owns the live tokenization table and persists each
/// change as a full snapshot through the registry.
pub struct MaskingService {
    registry: Arc<Registry>,
    token: CryptoToken,
    keys: KeyRing,
    state: Mutex<ServiceState>,
}

impl fmt::Debug for MaskingService {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MaskingService").field("keys", &self.keys).finish()
    }
}

impl MaskingService {
    /// Loads the latest persisted table, if any.
    pub fn new(registry: Arc<Registry>, token: CryptoToken, keys: KeyRing, seed: u64) -> Result<Self, MaskingError> {
        let (table, persisted) = match registry.get_latest(&token, RecordKind::MaskingTable, TABLE_KEY)? {
            Some(rec) => (TokenizationTable::from_json(&rec.payload)?, true),
            None => (TokenizationTable::new(), false),
        };
        Ok(Self {
            registry,
            token,
            keys,
            state: Mutex::new(ServiceState {
                table,
                persisted,
                rng: ChaCha20Rng::seed_from_u64(seed),
            }),
        })
    }

    pub fn keys(&self) -> &KeyRing {
        &self.keys
    }

    pub fn mask(&self, payload: &Value, policy: &MaskingPolicy) -> Result<MaskOutcome, MaskingError> {
        check_policy(policy).map_err(MaskingError::InvalidPolicy)?;
        let mut state = self.state.lock();
        let mut table = state.table.clone();
        let document = mask_document(payload, policy, &mut table, &self.keys, &mut state.rng)?;
        if table.entries != state.table.entries {
            let seq = self.registry.next_seq(RecordKind::MaskingTable, TABLE_KEY);
            table.version = seq;
            self.registry
                .append(&self.token, vec![RecordDraft::json(RecordKind::MaskingTable, TABLE_KEY, seq, &table)])?;
            state.table = table;
            state.persisted = true;
        }
        let table_version = state.persisted.then_some(state.table.version);
        Ok(MaskOutcome { document, table_version })
    }

    /// Loads the table snapshot persisted at `version`.
    pub fn table_at(&self, version: u64) -> Result<TokenizationTable, MaskingError> {
        let history = self.registry.get_history(&self.token, RecordKind::MaskingTable, TABLE_KEY)?;
        let rec = history
            .get(version as usize)
            .ok_or(MaskingError::UnknownTableVersion(version))?;
        Ok(TokenizationTable::from_json(&rec.payload)?)
    }

    pub fn unmask(&self, masked: &Value, policy: &MaskingPolicy, table_version: Option<u64>) -> Result<Value, MaskingError> {
        check_policy(policy).map_err(MaskingError::InvalidPolicy)?;
        let table = match table_version {
            Some(v) => self.table_at(v)?,
            None => TokenizationTable::new(),
        };
        unmask_document(masked, policy, &table, &self.keys)
    }
}
