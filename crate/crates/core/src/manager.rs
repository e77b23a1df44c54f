//! The infrastructure manager: broker and balancer running as one process
//! that can crash and come back from the sessions journal.

use crate::balancer::{Balancer, BalancerConfig, Decision, DegradationVerdict};
use crate::broker::journal::JournalStore;
use crate::broker::{Broker, BrokerError, FrameOutcome, Outgoing, RecoveryReport};
use crate::ids::{ClientId, VirtualTime};
use crate::library::ModelLibrary;
use crate::provider::CloudProvider;

// one per manager, so the size gap between variants costs nothing
#[allow(clippy::large_enum_variant)]
enum Process {
    Up { broker: Broker, balancer: Balancer },
    Down { store: Box<dyn JournalStore> },
}

pub struct Manager {
    config: BalancerConfig,
    library: ModelLibrary,
    process: Option<Process>,
    /// UPDATE frames dropped on stale channels by brokers that later crashed.
    undelivered_before: u64,
    decisions: Vec<Decision>,
    /// A session closed and the balancer has not reacted yet.
    session_ended: bool,
}

impl Manager {
    pub fn start(
        config: BalancerConfig,
        library: ModelLibrary,
        store: Box<dyn JournalStore>,
    ) -> Result<Self, BrokerError> {
        let broker = Broker::new(store)?;
        let balancer = Balancer::new(config.clone());
        Ok(Self {
            config,
            library,
            process: Some(Process::Up { broker, balancer }),
            undelivered_before: 0,
            decisions: Vec::new(),
            session_ended: false,
        })
    }

    pub fn is_up(&self) -> bool {
        matches!(self.process, Some(Process::Up { .. }))
    }

    pub fn library(&self) -> &ModelLibrary {
        &self.library
    }

    pub fn config(&self) -> &BalancerConfig {
        &self.config
    }

    pub fn broker(&self) -> Option<&Broker> {
        match &self.process {
            Some(Process::Up { broker, .. }) => Some(broker),
            _ => None,
        }
    }

    pub fn balancer(&self) -> Option<&Balancer> {
        match &self.process {
            Some(Process::Up { balancer, .. }) => Some(balancer),
            _ => None,
        }
    }

    fn collect(&mut self) {
        if let Some(Process::Up { balancer, .. }) = &mut self.process {
            self.decisions.extend(balancer.drain_log());
        }
    }

    /// Handles one client frame; `None` while the manager is down.
    ///
    /// The balancer's reaction to a closed session (reverse migration,
    /// scale-in) is deferred to [`Manager::settle`] so callers can log the
    /// close first. The next frame or tick settles it anyway.
    pub fn handle_frame<C: CloudProvider + ?Sized>(
        &mut self,
        cloud: &mut C,
        now: VirtualTime,
        client: &ClientId,
        frame: &str,
    ) -> Option<FrameOutcome> {
        self.settle(cloud, now);
        let Some(Process::Up { broker, balancer }) = &mut self.process else {
            return None;
        };
        let outcome = {
            let mut placer = balancer.placer(cloud, &self.library);
            broker.handle_frame(now, client, frame, &mut placer)
        };
        self.session_ended = matches!(outcome, FrameOutcome::Closed(_));
        self.collect();
        Some(outcome)
    }

    /// Runs the balancer's follow-up to a session close, if one is owed.
    pub fn settle<C: CloudProvider + ?Sized>(&mut self, cloud: &mut C, now: VirtualTime) {
        if !std::mem::take(&mut self.session_ended) {
            return;
        }
        if let Some(Process::Up { broker, balancer }) = &mut self.process {
            balancer.on_session_end(cloud, &self.library, broker, now);
        }
        self.collect();
    }

    /// One balancer monitoring round; a no-op while down.
    pub fn tick<C: CloudProvider + ?Sized>(&mut self, cloud: &mut C, now: VirtualTime) -> Vec<DegradationVerdict> {
        self.settle(cloud, now);
        let Some(Process::Up { broker, balancer }) = &mut self.process else {
            return Vec::new();
        };
        let verdicts = balancer.monitor_tick(cloud, &self.library, broker, now);
        self.collect();
        verdicts
    }

    pub fn drain_outbox(&mut self) -> Vec<Outgoing> {
        match &mut self.process {
            Some(Process::Up { broker, .. }) => broker.drain_outbox(),
            _ => Vec::new(),
        }
    }

    pub fn drain_decisions(&mut self) -> Vec<Decision> {
        std::mem::take(&mut self.decisions)
    }

    /// UPDATE frames that never reached a client, across restarts.
    pub fn undelivered(&self) -> u64 {
        self.undelivered_before + self.broker().map_or(0, Broker::undelivered)
    }

    /// Loses all in-memory state. Queued frames are lost with it.
    pub fn crash(&mut self) {
        self.session_ended = false;
        if let Some(Process::Up { broker, .. }) = self.process.take() {
            self.undelivered_before += broker.undelivered();
            self.process = Some(Process::Down { store: broker.crash() });
        } else {
            self.process = self.process.take();
        }
    }

    /// Restarts from the journal. The new balancer rediscovers booting
    /// replacements from the cloud and restarts its cooldown at `now`.
    pub fn restart<C: CloudProvider + ?Sized>(
        &mut self,
        cloud: &C,
        now: VirtualTime,
    ) -> Result<RecoveryReport, BrokerError> {
        let store = match self.process.take() {
            Some(Process::Down { store }) => store,
            other => {
                self.process = other;
                return Err(BrokerError::Persist("manager is already running".into()));
            }
        };
        let (broker, report) = Broker::recover(store)?;
        let balancer = Balancer::resume(self.config.clone(), cloud, now);
        self.process = Some(Process::Up { broker, balancer });
        Ok(report)
    }
}
