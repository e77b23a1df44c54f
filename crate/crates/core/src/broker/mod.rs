//! Resource Broker: owns the session table, assigns sessions through a
//! [`Placer`], pushes reassignments to clients and journals every mutation
//! before the corresponding message leaves.

pub mod journal;
pub mod protocol;

use crate::ids::{ClientId, InstanceId, ModelId, SessionId, VirtualTime};
use crate::provider::{InstanceRecord, InstanceState};
use journal::{replay, Journal, JournalEntry, JournalStore, Truncation};
use protocol::{ClientMessage, ServerMessage, UpdateReason};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Active,
    Migrating,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: SessionId,
    pub model_id: ModelId,
    pub instance_id: InstanceId,
    pub address: String,
    pub client: ClientId,
    pub epoch: u64,
    pub state: SessionState,
    pub created_at: VirtualTime,
    pub last_activity: VirtualTime,
}

impl Session {
    pub fn id_for(serial: u64) -> SessionId {
        SessionId(format!("sess-{serial:06}"))
    }

    /// Numeric part of a broker-issued id (0 for foreign ids).
    pub fn serial(&self) -> u64 {
        self.session_id
            .as_str()
            .strip_prefix("sess-")
            .and_then(|n| n.parse().ok())
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionUpdate {
    pub session_id: SessionId,
    pub new_address: String,
    pub new_instance_id: InstanceId,
    pub epoch: u64,
    pub reason: UpdateReason,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Placement {
    pub instance_id: InstanceId,
    pub address: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlacementError {
    #[error("unknown model {0}")]
    UnknownModel(ModelId),
    #[error("no instance obtainable for model {0}")]
    PlacementFailed(ModelId),
}

/// Read-only view of how sessions are spread over instances.
pub trait SessionCounts {
    fn session_count(&self, instance: &InstanceId) -> u32;
}

/// Chooses the instance a new session goes to.
pub trait Placer {
    fn place(&mut self, model: &ModelId, sessions: &dyn SessionCounts) -> Result<Placement, PlacementError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BrokerError {
    #[error("unknown model {0}")]
    UnknownModel(ModelId),
    #[error("placement failed for model {0}")]
    PlacementFailed(ModelId),
    #[error("unknown session {0}")]
    UnknownSession(SessionId),
    #[error("session {0} is already closed")]
    AlreadyClosed(SessionId),
    #[error("target instance {0} cannot take sessions")]
    TargetNotRunning(InstanceId),
    #[error("malformed frame: {0}")]
    MalformedFrame(String),
    #[error("sessions journal: {0}")]
    Persist(String),
}

impl BrokerError {
    pub fn code(&self) -> &'static str {
        match self {
            BrokerError::UnknownModel(_) => "unknown_model",
            BrokerError::PlacementFailed(_) => "placement_failed",
            BrokerError::UnknownSession(_) => "unknown_session",
            BrokerError::AlreadyClosed(_) => "already_closed",
            BrokerError::TargetNotRunning(_) => "target_not_running",
            BrokerError::MalformedFrame(_) => "malformed",
            BrokerError::Persist(_) => "internal",
        }
    }
}

impl From<PlacementError> for BrokerError {
    fn from(e: PlacementError) -> Self {
        match e {
            PlacementError::UnknownModel(m) => BrokerError::UnknownModel(m),
            PlacementError::PlacementFailed(m) => BrokerError::PlacementFailed(m),
        }
    }
}

fn persist_err(e: std::io::Error) -> BrokerError {
    BrokerError::Persist(e.to_string())
}

/// A frame queued for a client channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outgoing {
    pub client: ClientId,
    pub frame: String,
}

/// What handling one client frame did.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FrameOutcome {
    Assigned(SessionUpdate),
    Closed(Session),
    Pinged { reassigned: bool },
    Rejected(BrokerError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecoveryReport {
    pub sessions: usize,
    pub records: usize,
    pub truncation: Option<Truncation>,
}

pub struct Broker {
    sessions: BTreeMap<SessionId, Session>,
    closed: BTreeSet<SessionId>,
    by_instance: BTreeMap<InstanceId, BTreeSet<SessionId>>,
    /// Sessions whose client channel is connected, and to whom.
    live_channels: BTreeMap<SessionId, ClientId>,
    next_session: u64,
    journal: Journal,
    outbox: Vec<Outgoing>,
    undelivered: u64,
}

impl Broker {
    /// A broker with an empty session table writing a fresh journal to `store`.
    pub fn new(store: Box<dyn JournalStore>) -> Result<Self, BrokerError> {
        let mut journal = Journal::new(store);
        journal.compact(1, []).map_err(persist_err)?;
        Ok(Self::with_state(journal, BTreeMap::new(), BTreeSet::new(), 1))
    }

    fn with_state(
        journal: Journal,
        sessions: BTreeMap<SessionId, Session>,
        closed: BTreeSet<SessionId>,
        next_session: u64,
    ) -> Self {
        let mut by_instance: BTreeMap<InstanceId, BTreeSet<SessionId>> = BTreeMap::new();
        for s in sessions.values() {
            by_instance
                .entry(s.instance_id.clone())
                .or_default()
                .insert(s.session_id.clone());
        }
        Self {
            sessions,
            closed,
            by_instance,
            live_channels: BTreeMap::new(),
            next_session,
            journal,
            outbox: Vec::new(),
            undelivered: 0,
        }
    }

    /// Rebuilds the broker from its journal. Every recovered channel starts
    /// stale; the client's next message re-establishes it. A damaged tail is
    /// dropped, reported, and the journal rewritten from the valid prefix.
    pub fn recover(store: Box<dyn JournalStore>) -> Result<(Self, RecoveryReport), BrokerError> {
        let bytes = store.read_all().map_err(persist_err)?;
        let rep = replay(&bytes);
        let (open, closed): (BTreeMap<_, _>, BTreeMap<_, _>) = rep
            .sessions
            .into_iter()
            .partition(|(_, s)| s.state != SessionState::Closed);
        let mut sessions = open;
        for s in sessions.values_mut() {
            // an interrupted migration already persisted its new epoch
            s.state = SessionState::Active;
        }
        let mut journal = Journal::new(store);
        journal
            .compact(rep.next_session, sessions.values())
            .map_err(persist_err)?;
        let report = RecoveryReport {
            sessions: sessions.len(),
            records: rep.records,
            truncation: rep.truncation,
        };
        Ok((
            Self::with_state(journal, sessions, closed.into_keys().collect(), rep.next_session),
            report,
        ))
    }

    /// Drops all in-memory state, handing back the durable store.
    pub fn crash(self) -> Box<dyn JournalStore> {
        self.journal.into_store()
    }

    pub fn journal_bytes(&self) -> Result<Vec<u8>, BrokerError> {
        self.journal.read_all().map_err(persist_err)
    }

    fn persist(&mut self, session: &Session) -> Result<(), BrokerError> {
        self.journal
            .append(&JournalEntry::Upsert {
                session: session.clone(),
            })
            .map_err(persist_err)?;
        if self.journal.wants_compaction(self.sessions.len()) {
            self.journal
                .compact(self.next_session, self.sessions.values())
                .map_err(persist_err)?;
        }
        Ok(())
    }

    fn send(&mut self, session: &SessionId, msg: &ServerMessage) {
        match self.live_channels.get(session) {
            Some(client) => self.outbox.push(Outgoing {
                client: client.clone(),
                frame: msg.encode(),
            }),
            None => self.undelivered += 1,
        }
    }

    fn send_to(&mut self, client: &ClientId, msg: &ServerMessage) {
        self.outbox.push(Outgoing {
            client: client.clone(),
            frame: msg.encode(),
        });
    }

    pub fn handle_hello(
        &mut self,
        now: VirtualTime,
        model: &ModelId,
        client: &ClientId,
        placer: &mut dyn Placer,
    ) -> Result<SessionUpdate, BrokerError> {
        let placement = match placer.place(model, &*self) {
            Ok(p) => p,
            Err(e) => {
                let err = BrokerError::from(e);
                self.send_to(client, &error_message(&err));
                return Err(err);
            }
        };
        let session = Session {
            session_id: Session::id_for(self.next_session),
            model_id: model.clone(),
            instance_id: placement.instance_id.clone(),
            address: placement.address.clone(),
            client: client.clone(),
            epoch: 1,
            state: SessionState::Active,
            created_at: now,
            last_activity: now,
        };
        self.next_session += 1;
        let id = session.session_id.clone();
        self.sessions.insert(id.clone(), session.clone());
        self.by_instance
            .entry(placement.instance_id.clone())
            .or_default()
            .insert(id.clone());
        self.persist(&session)?;
        self.live_channels.insert(id.clone(), client.clone());
        self.send(
            &id,
            &ServerMessage::Assign {
                session_id: id.clone(),
                address: placement.address.clone(),
                epoch: 1,
            },
        );
        Ok(SessionUpdate {
            session_id: id,
            new_address: placement.address,
            new_instance_id: placement.instance_id,
            epoch: 1,
            reason: UpdateReason::Initial,
        })
    }

    pub fn handle_bye(&mut self, now: VirtualTime, session_id: &SessionId) -> Result<Session, BrokerError> {
        if self.closed.contains(session_id) {
            return Err(BrokerError::AlreadyClosed(session_id.clone()));
        }
        let mut session = self
            .sessions
            .remove(session_id)
            .ok_or_else(|| BrokerError::UnknownSession(session_id.clone()))?;
        session.state = SessionState::Closed;
        session.last_activity = now;
        if let Some(set) = self.by_instance.get_mut(&session.instance_id) {
            set.remove(session_id);
            if set.is_empty() {
                self.by_instance.remove(&session.instance_id);
            }
        }
        self.closed.insert(session_id.clone());
        self.live_channels.remove(session_id);
        self.persist(&session)?;
        Ok(session)
    }

    /// Moves an active session to `target` and tells its client. The new
    /// epoch is journaled before the UPDATE frame is queued.
    pub fn push_update(
        &mut self,
        now: VirtualTime,
        session_id: &SessionId,
        target: &InstanceRecord,
        reason: UpdateReason,
    ) -> Result<SessionUpdate, BrokerError> {
        let mut session = match self.sessions.get(session_id) {
            Some(s) if s.state == SessionState::Active => s.clone(),
            _ => return Err(BrokerError::UnknownSession(session_id.clone())),
        };
        if !matches!(target.state, InstanceState::Pending | InstanceState::Running) {
            return Err(BrokerError::TargetNotRunning(target.instance_id.clone()));
        }
        let old = session.instance_id.clone();
        session.epoch += 1;
        session.instance_id = target.instance_id.clone();
        session.address = target.address.clone();
        session.state = SessionState::Migrating;
        session.last_activity = now;
        self.persist(&session)?;

        if let Some(set) = self.by_instance.get_mut(&old) {
            set.remove(session_id);
            if set.is_empty() {
                self.by_instance.remove(&old);
            }
        }
        self.by_instance
            .entry(target.instance_id.clone())
            .or_default()
            .insert(session_id.clone());
        let update = SessionUpdate {
            session_id: session_id.clone(),
            new_address: target.address.clone(),
            new_instance_id: target.instance_id.clone(),
            epoch: session.epoch,
            reason,
        };
        self.send(
            session_id,
            &ServerMessage::Update {
                session_id: session_id.clone(),
                address: update.new_address.clone(),
                epoch: update.epoch,
                reason,
            },
        );
        session.state = SessionState::Active;
        self.persist(&session)?;
        self.sessions.insert(session_id.clone(), session);
        Ok(update)
    }

    /// Keep-alive. On a stale channel the client gets a fresh ASSIGN carrying
    /// the current epoch. Returns whether that happened.
    pub fn handle_ping(
        &mut self,
        now: VirtualTime,
        session_id: &SessionId,
        client: &ClientId,
    ) -> Result<bool, BrokerError> {
        let Some(session) = self.sessions.get_mut(session_id) else {
            let err = if self.closed.contains(session_id) {
                BrokerError::AlreadyClosed(session_id.clone())
            } else {
                BrokerError::UnknownSession(session_id.clone())
            };
            return Err(err);
        };
        session.last_activity = now;
        if self.live_channels.get(session_id) == Some(client) {
            return Ok(false);
        }
        session.client = client.clone();
        let msg = ServerMessage::Assign {
            session_id: session_id.clone(),
            address: session.address.clone(),
            epoch: session.epoch,
        };
        self.live_channels.insert(session_id.clone(), client.clone());
        self.send(session_id, &msg);
        Ok(true)
    }

    /// Decodes and dispatches one client frame. Errors are answered with an
    /// ERROR frame as well as returned.
    pub fn handle_frame(
        &mut self,
        now: VirtualTime,
        client: &ClientId,
        frame: &str,
        placer: &mut dyn Placer,
    ) -> FrameOutcome {
        let msg = match ClientMessage::decode(frame) {
            Ok(m) => m,
            Err(e) => {
                let err = BrokerError::MalformedFrame(e.to_string());
                self.send_to(client, &error_message(&err));
                return FrameOutcome::Rejected(err);
            }
        };
        let result = match msg {
            ClientMessage::Hello { model_id } => {
                // handle_hello answers errors itself
                return match self.handle_hello(now, &model_id, client, placer) {
                    Ok(u) => FrameOutcome::Assigned(u),
                    Err(e) => FrameOutcome::Rejected(e),
                };
            }
            ClientMessage::Bye { session_id } => self.handle_bye(now, &session_id).map(FrameOutcome::Closed),
            ClientMessage::Ping { session_id } => self
                .handle_ping(now, &session_id, client)
                .map(|reassigned| FrameOutcome::Pinged { reassigned }),
        };
        result.unwrap_or_else(|err| {
            self.send_to(client, &error_message(&err));
            FrameOutcome::Rejected(err)
        })
    }

    pub fn drain_outbox(&mut self) -> Vec<Outgoing> {
        std::mem::take(&mut self.outbox)
    }

    /// UPDATE frames that could not be sent because the channel was stale.
    pub fn undelivered(&self) -> u64 {
        self.undelivered
    }

    pub fn session(&self, id: &SessionId) -> Option<&Session> {
        self.sessions.get(id)
    }

    /// Non-closed sessions in id order.
    pub fn sessions(&self) -> impl Iterator<Item = &Session> {
        self.sessions.values()
    }

    pub fn sessions_on(&self, instance: &InstanceId) -> Vec<SessionId> {
        self.by_instance
            .get(instance)
            .map(|s| s.iter().cloned().collect())
            .unwrap_or_default()
    }

    /// Instances referenced by at least one open session.
    pub fn referenced_instances(&self) -> impl Iterator<Item = &InstanceId> {
        self.by_instance.keys()
    }

    pub fn is_channel_live(&self, id: &SessionId) -> bool {
        self.live_channels.contains_key(id)
    }
}

impl SessionCounts for Broker {
    fn session_count(&self, instance: &InstanceId) -> u32 {
        self.by_instance.get(instance).map_or(0, |s| s.len() as u32)
    }
}

fn error_message(err: &BrokerError) -> ServerMessage {
    ServerMessage::Error {
        code: err.code().to_owned(),
        detail: err.to_string(),
    }
}
