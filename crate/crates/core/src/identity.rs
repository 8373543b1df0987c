//! Identity management: federated per-cloud identity providers, reusable
//! SSO tokens for principals and MACed crypto-tokens for platform components.
//!
//! Tokens are HMAC-SHA-256 over a length-prefixed field encoding keyed by a
//! single symmetric federation key.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use hmac::{Hmac, Mac};
use parking_lot::RwLock;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;

use crate::clock::{Millis, SimClock, HOUR};
use crate::digest::{hex_bytes, CanonicalWriter, Digest};

type HmacSha256 = Hmac<Sha256>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IdentityError {
    #[error("cloud {0} is already federated")]
    DuplicateCloud(String),
    #[error("cloud {0} is not federated")]
    UnknownCloud(String),
    #[error("bad credential")]
    BadCredential,
    #[error("invalid token")]
    InvalidToken,
    #[error("token expired")]
    Expired,
    #[error("unknown component role {0:?}")]
    UnknownRole(String),
}

/// Platform components that receive crypto-tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ComponentRole {
    Fam,
    Iwm,
    Ds,
    Frm,
    Dm,
    Anm,
}

impl ComponentRole {
    pub const ALL: [ComponentRole; 6] = [
        ComponentRole::Fam,
        ComponentRole::Iwm,
        ComponentRole::Ds,
        ComponentRole::Frm,
        ComponentRole::Dm,
        ComponentRole::Anm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ComponentRole::Fam => "FAM",
            ComponentRole::Iwm => "IWM",
            ComponentRole::Ds => "DS",
            ComponentRole::Frm => "FRM",
            ComponentRole::Dm => "DM",
            ComponentRole::Anm => "ANM",
        }
    }
}

impl fmt::Display for ComponentRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ComponentRole {
    type Err = IdentityError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ComponentRole::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| IdentityError::UnknownRole(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PrincipalKind {
    ServiceUser,
    MemberCloudAdmin,
    TenantAdmin,
    Component,
    Cloud,
}

impl PrincipalKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PrincipalKind::ServiceUser => "SERVICE_USER",
            PrincipalKind::MemberCloudAdmin => "MEMBER_CLOUD_ADMIN",
            PrincipalKind::TenantAdmin => "TENANT_ADMIN",
            PrincipalKind::Component => "COMPONENT",
            PrincipalKind::Cloud => "CLOUD",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Principal {
    /// Qualified as `user@cloud`.
    pub id: String,
    pub kind: PrincipalKind,
    pub home_cloud: String,
    pub attributes: BTreeMap<String, String>,
}

impl Principal {
    pub fn qualified_id(user_id: &str, cloud_id: &str) -> String {
        format!("{user_id}@{cloud_id}")
    }

    /// Subject attributes handed to the access-control engine.
    pub fn subject_attributes(&self) -> BTreeMap<String, String> {
        let mut attrs = self.attributes.clone();
        attrs.insert("id".into(), self.id.clone());
        attrs.insert("home_cloud".into(), self.home_cloud.clone());
        attrs.insert("kind".into(), self.kind.as_str().into());
        attrs
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthToken {
    pub principal_id: String,
    pub issued_at: Millis,
    pub expires_at: Millis,
    #[serde(with = "hex_bytes")]
    pub mac: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CryptoToken {
    pub role: ComponentRole,
    pub issued_at: Millis,
    #[serde(with = "hex_bytes")]
    pub mac: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredCredential {
    #[serde(with = "hex_bytes")]
    pub salt: Vec<u8>,
    pub digest: Digest,
    pub kind: PrincipalKind,
    pub attributes: BTreeMap<String, String>,
}

impl StoredCredential {
    fn salted(salt: &[u8], secret: &str) -> Digest {
        let mut w = CanonicalWriter::new();
        w.bytes(salt).str(secret);
        Digest::of(&w.finish())
    }

    pub fn matches(&self, secret: &str) -> bool {
        Self::salted(&self.salt, secret) == self.digest
    }
}

/// Verifier material for one cloud's local identity provider.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdpDescriptor {
    pub cloud_id: String,
    pub users: BTreeMap<String, StoredCredential>,
}

impl IdpDescriptor {
    pub fn new(cloud_id: impl Into<String>) -> Self {
        Self {
            cloud_id: cloud_id.into(),
            users: BTreeMap::new(),
        }
    }

    pub fn add_user(
        &mut self,
        user_id: &str,
        secret: &str,
        kind: PrincipalKind,
        attributes: BTreeMap<String, String>,
        rng: &mut impl RngCore,
    ) {
        let mut salt = vec![0u8; 16];
        rng.fill_bytes(&mut salt);
        let digest = StoredCredential::salted(&salt, secret);
        self.users.insert(
            user_id.to_string(),
            StoredCredential {
                salt,
                digest,
                kind,
                attributes,
            },
        );
    }
}

/// Federation key holder: issues and validates both token kinds.
#[derive(Clone)]
pub struct TokenAuthority {
    key: [u8; 32],
    clock: SimClock,
    lifetime: Millis,
}

impl fmt::Debug for TokenAuthority {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TokenAuthority")
            .field("lifetime", &self.lifetime)
            .finish_non_exhaustive()
    }
}

impl TokenAuthority {
    pub fn new(key: [u8; 32], clock: SimClock) -> Self {
        Self {
            key,
            clock,
            lifetime: HOUR,
        }
    }

    pub fn with_lifetime(mut self, lifetime: Millis) -> Self {
        self.lifetime = lifetime;
        self
    }

    pub fn clock(&self) -> &SimClock {
        &self.clock
    }

    fn mac(&self, fields: &[u8]) -> HmacSha256 {
        let mut mac = HmacSha256::new_from_slice(&self.key).expect("hmac accepts any key length");
        mac.update(fields);
        mac
    }

    fn auth_fields(principal_id: &str, issued_at: Millis, expires_at: Millis) -> Vec<u8> {
        let mut w = CanonicalWriter::new();
        w.str("auth").str(principal_id).u64(issued_at).u64(expires_at);
        w.finish()
    }

    fn component_fields(role: ComponentRole, issued_at: Millis) -> Vec<u8> {
        let mut w = CanonicalWriter::new();
        w.str("component").str(role.as_str()).u64(issued_at);
        w.finish()
    }

    pub fn issue_auth(&self, principal_id: &str) -> AuthToken {
        let issued_at = self.clock.now();
        let expires_at = issued_at.saturating_add(self.lifetime);
        let mac = self
            .mac(&Self::auth_fields(principal_id, issued_at, expires_at))
            .finalize()
            .into_bytes()
            .to_vec();
        AuthToken {
            principal_id: principal_id.to_string(),
            issued_at,
            expires_at,
            mac,
        }
    }

    /// Checks the MAC, then expiry. Returns the principal id on success.
    pub fn verify_auth<'a>(&self, token: &'a AuthToken) -> Result<&'a str, IdentityError> {
        self.mac(&Self::auth_fields(&token.principal_id, token.issued_at, token.expires_at))
            .verify_slice(&token.mac)
            .map_err(|_| IdentityError::InvalidToken)?;
        if self.clock.now() >= token.expires_at {
            return Err(IdentityError::Expired);
        }
        Ok(&token.principal_id)
    }

    pub fn issue_component(&self, role: ComponentRole) -> CryptoToken {
        let issued_at = self.clock.now();
        let mac = self
            .mac(&Self::component_fields(role, issued_at))
            .finalize()
            .into_bytes()
            .to_vec();
        CryptoToken {
            role,
            issued_at,
            mac,
        }
    }

    pub fn verify_component(&self, token: &CryptoToken) -> Result<ComponentRole, IdentityError> {
        self.mac(&Self::component_fields(token.role, token.issued_at))
            .verify_slice(&token.mac)
            .map_err(|_| IdentityError::InvalidToken)?;
        Ok(token.role)
    }
}

/// The federated identity manager.
#[derive(Debug)]
pub struct IdentityManager {
    authority: TokenAuthority,
    idps: RwLock<BTreeMap<String, IdpDescriptor>>,
}

impl IdentityManager {
    pub fn new(authority: TokenAuthority) -> Self {
        Self {
            authority,
            idps: RwLock::new(BTreeMap::new()),
        }
    }

    pub fn authority(&self) -> &TokenAuthority {
        &self.authority
    }

    pub fn federate_idp(&self, cloud_id: &str, descriptor: IdpDescriptor) -> Result<(), IdentityError> {
        let mut idps = self.idps.write();
        if idps.contains_key(cloud_id) {
            return Err(IdentityError::DuplicateCloud(cloud_id.to_string()));
        }
        idps.insert(cloud_id.to_string(), descriptor);
        Ok(())
    }

    /// Drops a cloud's verifier material; its users can no longer sign in
    /// and their outstanding tokens stop validating.
    pub fn remove_idp(&self, cloud_id: &str) -> Option<IdpDescriptor> {
        self.idps.write().remove(cloud_id)
    }

    pub fn is_federated(&self, cloud_id: &str) -> bool {
        self.idps.read().contains_key(cloud_id)
    }

    /// Replaces the verifier material of an already federated cloud.
    pub fn update_idp(&self, descriptor: IdpDescriptor) -> Result<(), IdentityError> {
        let mut idps = self.idps.write();
        match idps.get_mut(&descriptor.cloud_id) {
            Some(slot) => {
                *slot = descriptor;
                Ok(())
            }
            None => Err(IdentityError::UnknownCloud(descriptor.cloud_id)),
        }
    }

    pub fn authenticate(&self, cloud_id: &str, user_id: &str, credential: &str) -> Result<AuthToken, IdentityError> {
        let idps = self.idps.read();
        let idp = idps
            .get(cloud_id)
            .ok_or_else(|| IdentityError::UnknownCloud(cloud_id.to_string()))?;
        match idp.users.get(user_id) {
            Some(stored) if stored.matches(credential) => {
                Ok(self.authority.issue_auth(&Principal::qualified_id(user_id, cloud_id)))
            }
            _ => Err(IdentityError::BadCredential),
        }
    }

    pub fn principal(&self, principal_id: &str) -> Option<Principal> {
        let (user, cloud) = principal_id.rsplit_once('@')?;
        let idps = self.idps.read();
        let stored = idps.get(cloud)?.users.get(user)?;
        Some(Principal {
            id: principal_id.to_string(),
            kind: stored.kind,
            home_cloud: cloud.to_string(),
            attributes: stored.attributes.clone(),
        })
    }

    pub fn validate(&self, token: &AuthToken) -> Result<Principal, IdentityError> {
        let id = self.authority.verify_auth(token)?;
        self.principal(id).ok_or(IdentityError::InvalidToken)
    }

    pub fn validate_component(&self, token: &CryptoToken) -> Result<ComponentRole, IdentityError> {
        self.authority.verify_component(token)
    }

    pub fn issue_component_token(&self, role: &str) -> Result<CryptoToken, IdentityError> {
        let role: ComponentRole = role.parse()?;
        Ok(self.authority.issue_component(role))
    }
}
