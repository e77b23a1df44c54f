//! Identifier newtypes and virtual time.

use serde::{Deserialize, Serialize};
use std::fmt;

/// Virtual time in whole seconds since scenario start.
pub type VirtualTime = u64;

/// A span of virtual time in whole seconds.
pub type Seconds = u64;

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(s: impl Into<String>) -> Self {
                Self(s.into())
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

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }
    };
}

id_type!(
    /// Cloud provider identifier, e.g. `private` or `public`.
    ProviderId
);
id_type!(
    /// Instance identifier, unique across every provider.
    InstanceId
);
id_type!(
    /// Model Library image identifier.
    ImageId
);
id_type!(
    /// Identifier of one model served by an image.
    ModelId
);
id_type!(
    /// Broker-issued session identifier.
    SessionId
);
id_type!(
    /// Identifies the client end of a duplex control channel.
    ClientId
);
