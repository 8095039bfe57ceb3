use std::borrow::Borrow;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::EnokiError;

fn is_node_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '-'
}

fn is_keygroup_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.')
}

macro_rules! token_newtype {
    ($(#[$meta:meta])* $name:ident, $valid:ident, $what:literal) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(String);

        impl $name {
            pub fn new(raw: impl Into<String>) -> Result<Self, EnokiError> {
                let raw = raw.into();
                if raw.is_empty() || !raw.chars().all($valid) {
                    return Err(EnokiError::bad_request(format!(
                        concat!("invalid ", $what, " {:?}"),
                        raw
                    )));
                }
                Ok($name(raw))
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl FromStr for $name {
            type Err = EnokiError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                $name::new(s)
            }
        }

        impl AsRef<str> for $name {
            fn as_ref(&self) -> &str {
                &self.0
            }
        }

        impl Borrow<str> for $name {
            fn borrow(&self) -> &str {
                &self.0
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&self.0)
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let raw = String::deserialize(d)?;
                $name::new(raw).map_err(serde::de::Error::custom)
            }
        }
    };
}

token_newtype!(
    /// Identifier of one node (edge, cloud or client) in a deployment.
    ///
    /// Letters, digits and hyphens only. The derived `Ord` is the
    /// lexicographic order used for deterministic tie-breaks.
    NodeId,
    is_node_char,
    "node id"
);

token_newtype!(
    /// Name of a replicated key-value container.
    KeygroupName,
    is_keygroup_char,
    "keygroup name"
);
