//! Dossiers, access lists, redaction and the version rule for incoming updates.
//!
//! A dossier is a flat map of named fields to opaque byte values with exactly
//! one owner. Receivers never see a dossier, only a [`RedactedView`]: the
//! projection of the dossier onto the fields they were granted.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum length in bytes of a [`UserId`].
pub const MAX_USER_ID_LEN: usize = 64;
/// Maximum length in bytes of a [`DossierId`].
pub const MAX_DOSSIER_ID_LEN: usize = 128;
/// Maximum length in bytes of a [`FieldName`].
pub const MAX_FIELD_NAME_LEN: usize = 64;
/// Maximum length in bytes of a single field value.
pub const MAX_FIELD_VALUE_LEN: usize = 64 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("{kind} must be non-empty and at most {max} bytes (got {len})")]
    InvalidName {
        kind: &'static str,
        max: usize,
        len: usize,
    },
    #[error("field value of {len} bytes exceeds {MAX_FIELD_VALUE_LEN}")]
    ValueTooLarge { len: usize },
    #[error("unknown field `{0}`")]
    UnknownField(FieldName),
    #[error("identity mismatch: update for {incoming} does not match local {local}")]
    IdentityMismatch { local: String, incoming: String },
    #[error("a grant must name at least one field")]
    EmptyGrant,
    #[error("the owner of a dossier cannot be one of its receivers")]
    OwnerAsReceiver,
}

macro_rules! bounded_name {
    ($(#[$doc:meta])* $name:ident, $max:expr, $kind:literal) => {
        $(#[$doc])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(try_from = "String", into = "String")]
        pub struct $name(String);

        impl $name {
            pub fn new(name: impl Into<String>) -> Result<Self, ModelError> {
                let name = name.into();
                if name.is_empty() || name.len() > $max {
                    return Err(ModelError::InvalidName {
                        kind: $kind,
                        max: $max,
                        len: name.len(),
                    });
                }
                Ok(Self(name))
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl TryFrom<String> for $name {
            type Error = ModelError;

            fn try_from(value: String) -> Result<Self, Self::Error> {
                Self::new(value)
            }
        }

        impl TryFrom<&str> for $name {
            type Error = ModelError;

            fn try_from(value: &str) -> Result<Self, Self::Error> {
                Self::new(value)
            }
        }

        impl From<$name> for String {
            fn from(value: $name) -> String {
                value.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl std::str::FromStr for $name {
            type Err = ModelError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                Self::new(s)
            }
        }
    };
}

bounded_name!(
    /// A user of the deployment. Compared byte-wise.
    UserId,
    MAX_USER_ID_LEN,
    "user id"
);
bounded_name!(
    /// Deployment-wide dossier identifier.
    DossierId,
    MAX_DOSSIER_ID_LEN,
    "dossier id"
);
bounded_name!(FieldName, MAX_FIELD_NAME_LEN, "field name");

/// Owner edit counter. Starts at 1 and only ever grows.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct Version(pub u64);

impl Version {
    pub const INITIAL: Version = Version(1);

    pub fn next(self) -> Version {
        Version(self.0 + 1)
    }
}

impl fmt::Display for Version {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}", self.0)
    }
}

/// Field values are opaque bytes.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "crate::wire::Bytes", into = "crate::wire::Bytes")]
pub struct FieldValue(Vec<u8>);

impl FieldValue {
    pub fn new(bytes: impl Into<Vec<u8>>) -> Result<Self, ModelError> {
        let bytes = bytes.into();
        if bytes.len() > MAX_FIELD_VALUE_LEN {
            return Err(ModelError::ValueTooLarge { len: bytes.len() });
        }
        Ok(Self(bytes))
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

impl TryFrom<crate::wire::Bytes> for FieldValue {
    type Error = ModelError;

    fn try_from(value: crate::wire::Bytes) -> Result<Self, Self::Error> {
        Self::new(value.0)
    }
}

impl From<FieldValue> for crate::wire::Bytes {
    fn from(value: FieldValue) -> Self {
        crate::wire::Bytes(value.0)
    }
}

pub type Fields = BTreeMap<FieldName, FieldValue>;

/// An owner-held plaintext record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dossier {
    pub id: DossierId,
    pub owner: UserId,
    pub version: Version,
    pub fields: Fields,
}

impl Dossier {
    pub fn new(id: DossierId, owner: UserId, fields: Fields) -> Self {
        Self {
            id,
            owner,
            version: Version::INITIAL,
            fields,
        }
    }

    pub fn field_names(&self) -> BTreeSet<FieldName> {
        self.fields.keys().cloned().collect()
    }
}

/// What a receiver is allowed to see of a dossier at one version.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RedactedView {
    pub id: DossierId,
    pub owner: UserId,
    pub version: Version,
    pub fields: Fields,
}

impl RedactedView {
    /// Reinterprets the view as a dossier, e.g. to redact it again.
    pub fn into_dossier(self) -> Dossier {
        Dossier {
            id: self.id,
            owner: self.owner,
            version: self.version,
            fields: self.fields,
        }
    }
}

/// Projects `dossier` onto `allowed`.
pub fn redact(dossier: &Dossier, allowed: &BTreeSet<FieldName>) -> Result<RedactedView, ModelError> {
    if let Some(missing) = allowed.iter().find(|f| !dossier.fields.contains_key(*f)) {
        return Err(ModelError::UnknownField(missing.clone()));
    }
    let fields = dossier
        .fields
        .iter()
        .filter(|(name, _)| allowed.contains(*name))
        .map(|(name, value)| (name.clone(), value.clone()))
        .collect();
    Ok(RedactedView {
        id: dossier.id.clone(),
        owner: dossier.owner.clone(),
        version: dossier.version,
        fields,
    })
}

/// Last-writer-wins by version: stale and duplicate updates leave `local` in place.
pub fn apply_incoming(
    local: Option<RedactedView>,
    incoming: RedactedView,
) -> Result<RedactedView, ModelError> {
    match local {
        None => Ok(incoming),
        Some(local) => {
            check_identity(&local.id, &local.owner, &incoming.id, &incoming.owner)?;
            if incoming.version > local.version {
                Ok(incoming)
            } else {
                Ok(local)
            }
        }
    }
}

pub(crate) fn check_identity(
    local_id: &DossierId,
    local_owner: &UserId,
    id: &DossierId,
    owner: &UserId,
) -> Result<(), ModelError> {
    if local_id != id || local_owner != owner {
        return Err(ModelError::IdentityMismatch {
            local: format!("{local_id}@{local_owner}"),
            incoming: format!("{id}@{owner}"),
        });
    }
    Ok(())
}

/// Per-dossier, per-receiver field permissions.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Acl {
    entries: BTreeMap<DossierId, BTreeMap<UserId, BTreeSet<FieldName>>>,
}

impl Acl {
    pub fn new() -> Self {
        Self::default()
    }

    /// Installs or replaces the grant for `(dossier, receiver)`.
    pub fn grant(
        &mut self,
        dossier: &DossierId,
        owner: &UserId,
        receiver: &UserId,
        fields: BTreeSet<FieldName>,
    ) -> Result<(), ModelError> {
        if fields.is_empty() {
            return Err(ModelError::EmptyGrant);
        }
        if receiver == owner {
            return Err(ModelError::OwnerAsReceiver);
        }
        self.entries
            .entry(dossier.clone())
            .or_default()
            .insert(receiver.clone(), fields);
        Ok(())
    }

    pub fn revoke(&mut self, dossier: &DossierId, receiver: &UserId) {
        if let Some(rows) = self.entries.get_mut(dossier) {
            rows.remove(receiver);
            if rows.is_empty() {
                self.entries.remove(dossier);
            }
        }
    }

    pub fn get(&self, dossier: &DossierId, receiver: &UserId) -> Option<&BTreeSet<FieldName>> {
        self.entries.get(dossier)?.get(receiver)
    }

    /// Receivers of `dossier` in byte order.
    pub fn receivers(&self, dossier: &DossierId) -> impl Iterator<Item = (&UserId, &BTreeSet<FieldName>)> {
        self.entries.get(dossier).into_iter().flatten()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&DossierId, &UserId, &BTreeSet<FieldName>)> {
        self.entries
            .iter()
            .flat_map(|(d, rows)| rows.iter().map(move |(r, f)| (d, r, f)))
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
