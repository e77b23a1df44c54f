//! Control-channel messages. One JSON object per UTF-8 text frame.

use crate::ids::{ModelId, SessionId};
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateReason {
    Initial,
    DegradationReplacement,
    Rebalance,
    ReverseMigration,
}

impl UpdateReason {
    pub const ALL: [UpdateReason; 4] = [
        UpdateReason::Initial,
        UpdateReason::DegradationReplacement,
        UpdateReason::Rebalance,
        UpdateReason::ReverseMigration,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            UpdateReason::Initial => "initial",
            UpdateReason::DegradationReplacement => "degradation_replacement",
            UpdateReason::Rebalance => "rebalance",
            UpdateReason::ReverseMigration => "reverse_migration",
        }
    }
}

impl fmt::Display for UpdateReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ClientMessage {
    Hello { model_id: ModelId },
    Bye { session_id: SessionId },
    Ping { session_id: SessionId },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ServerMessage {
    Assign {
        session_id: SessionId,
        address: String,
        epoch: u64,
    },
    Update {
        session_id: SessionId,
        address: String,
        epoch: u64,
        reason: UpdateReason,
    },
    Error {
        code: String,
        detail: String,
    },
}

macro_rules! frame_codec {
    ($t:ty) => {
        impl $t {
            pub fn encode(&self) -> String {
                serde_json::to_string(self).expect("messages always serialize")
            }

            pub fn decode(frame: &str) -> Result<Self, serde_json::Error> {
                serde_json::from_str(frame)
            }
        }
    };
}

frame_codec!(ClientMessage);
frame_codec!(ServerMessage);

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn wire_shape() {
        let hello = ClientMessage::Hello {
            model_id: "topmodel-stub".into(),
        };
        assert_eq!(hello.encode(), r#"{"type":"HELLO","model_id":"topmodel-stub"}"#);
        let upd = ServerMessage::Update {
            session_id: "sess-000001".into(),
            address: "public-inst3:8080".into(),
            epoch: 2,
            reason: UpdateReason::ReverseMigration,
        };
        assert_eq!(
            upd.encode(),
            r#"{"type":"UPDATE","session_id":"sess-000001","address":"public-inst3:8080","epoch":2,"reason":"reverse_migration"}"#
        );
        assert_eq!(
            ClientMessage::decode(r#"{"type":"BYE","session_id":"s"}"#).unwrap(),
            ClientMessage::Bye { session_id: "s".into() }
        );
        assert!(ClientMessage::decode(r#"{"type":"ASSIGN"}"#).is_err());
        assert!(ClientMessage::decode("not json").is_err());
    }

    proptest! {
        #[test]
        fn server_frames_round_trip(sid in "[a-z0-9-]{1,12}", addr in "[a-z0-9:.-]{1,20}", epoch in 1u64..1_000_000, r in 0usize..4) {
            let msg = ServerMessage::Update {
                session_id: sid.into(),
                address: addr,
                epoch,
                reason: UpdateReason::ALL[r],
            };
            prop_assert_eq!(ServerMessage::decode(&msg.encode()).unwrap(), msg);
        }
    }
}
