//! Drives one scenario to completion on a [`SimCloud`].
//!
//! Clients, the manager and the cloud share one event queue. Client frames
//! reach the manager instantly while it is up; while it is down they are
//! retried with capped exponential backoff and seeded jitter.

use super::report::MetricsReport;
use super::spec::{FaultTarget, ScenarioEvent, ScenarioSpec};
use crate::balancer::Decision;
use crate::broker::journal::{JournalStore, MemoryStore};
use crate::broker::protocol::{ClientMessage, ServerMessage, UpdateReason};
use crate::broker::{BrokerError, FrameOutcome, SessionCounts};
use crate::gateway::ModelRequest;
use crate::ids::{ClientId, InstanceId, ModelId, Seconds, SessionId, VirtualTime};
use crate::manager::Manager;
use crate::provider::{CloudProvider, InstanceRecord, InstanceState, ProviderKind};
use crate::sim::{FaultInjection, SimCloud, Trace};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

pub const RETRY_BASE: Seconds = 1;
pub const RETRY_CAP: Seconds = 30;

/// Something scheduled by the harness on the shared queue.
#[derive(Debug, Clone, PartialEq)]
pub enum Cmd {
    Scenario(ScenarioEvent),
    Send {
        client: usize,
        msg: ClientMessage,
        attempt: u32,
    },
    Restart,
    Tick,
}

/// What one client saw over the run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClientRecord {
    pub name: String,
    pub model: ModelId,
    pub session: Option<SessionId>,
    pub address: Option<String>,
    pub epoch: u64,
    pub arrived_at: VirtualTime,
    /// `(time, epoch)` of every ASSIGN received.
    pub assigns: Vec<(VirtualTime, u64)>,
    /// `(time, epoch, reason)` of every UPDATE applied.
    pub updates: Vec<(VirtualTime, u64, UpdateReason)>,
    pub epoch_regressions: u64,
    pub stale_updates: u64,
    pub hello_pending: bool,
    pub departing: bool,
    pub closed: bool,
    pub rejected: bool,
    pub channel_live: bool,
    pub requests_served: u64,
    pub requests_failed: u64,
}

impl ClientRecord {
    pub fn updates_with(&self, reason: UpdateReason) -> usize {
        self.updates.iter().filter(|u| u.2 == reason).count()
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: MetricsReport,
    pub trace: Trace,
    pub clients: Vec<ClientRecord>,
    /// Client name -> instance of its open session at the end.
    pub final_mapping: BTreeMap<String, Option<InstanceId>>,
    /// Client name -> broker epoch of its open session at the end.
    pub final_epochs: BTreeMap<String, u64>,
    /// Broken invariants noticed while running; empty for a healthy run.
    pub violations: Vec<String>,
    pub instances: Vec<InstanceRecord>,
    pub histories: BTreeMap<InstanceId, Vec<(VirtualTime, InstanceState)>>,
    pub journal: Vec<u8>,
}

struct Harness {
    spec: ScenarioSpec,
    manager: Manager,
    clients: Vec<ClientRecord>,
    by_name: BTreeMap<String, usize>,
    by_id: BTreeMap<ClientId, usize>,
    retry_rng: ChaCha8Rng,
    request_rng: ChaCha8Rng,
    report: MetricsReport,
    violations: Vec<String>,
    outbox_updates: u64,
    next_request: u64,
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Delay before retry number `attempt` (0-based): `min(cap, base * 2^attempt)`
/// plus up to half that again of seeded jitter.
pub fn backoff(attempt: u32, rng: &mut impl Rng) -> Seconds {
    let exp = RETRY_BASE.saturating_mul(1u64 << attempt.min(16));
    let delay = exp.min(RETRY_CAP);
    delay + rng.gen_range(0..=delay / 2)
}

/// Arrival times after seeded jitter. Each arrival moves by up to `jitter`
/// but never past the same client's next event or the end of the run.
pub fn jittered_times(spec: &ScenarioSpec) -> Vec<VirtualTime> {
    let mut rng = rng_stream(spec.seed, 1);
    let mut times: Vec<VirtualTime> = spec.events.iter().map(|e| e.at).collect();
    for (i, ev) in spec.events.iter().enumerate() {
        let ScenarioEvent::Arrive { client, .. } = &ev.event else {
            continue;
        };
        if spec.jitter == 0 {
            continue;
        }
        let delta = rng.gen_range(0..=spec.jitter);
        let next = spec.events[i + 1..]
            .iter()
            .filter(|e| event_client(&e.event) == Some(client.as_str()))
            .map(|e| e.at)
            .min()
            .unwrap_or(spec.duration);
        times[i] = (ev.at + delta).min(next).min(spec.duration);
    }
    times
}

fn event_client(ev: &ScenarioEvent) -> Option<&str> {
    match ev {
        ScenarioEvent::Arrive { client, .. }
        | ScenarioEvent::Depart { client }
        | ScenarioEvent::Burst { client, .. } => Some(client),
        ScenarioEvent::Fault {
            target: FaultTarget::Session(c),
            ..
        } => Some(c),
        _ => None,
    }
}

fn request_params(model: &ModelId, rng: &mut ChaCha8Rng) -> BTreeMap<String, f64> {
    let names: &[&str] = match model.as_str() {
        "topmodel-stub" => &["a", "b"],
        "fluxmodel-stub" => &["k", "c_in", "c_out", "area"],
        _ => &["x"],
    };
    names
        .iter()
        .map(|n| ((*n).to_owned(), (rng.gen_range(0..10_000) as f64) / 100.0))
        .collect()
}

impl Harness {
    fn sync_counts(&self, cloud: &mut SimCloud<Cmd>) {
        let Some(broker) = self.manager.broker() else { return };
        let live: Vec<InstanceId> = cloud
            .list_instances(None)
            .unwrap_or_default()
            .into_iter()
            .map(|r| r.instance_id)
            .collect();
        for id in live {
            cloud.set_session_count(&id, broker.session_count(&id));
        }
    }

    fn flush_decisions(&mut self, cloud: &mut SimCloud<Cmd>) {
        for d in self.manager.drain_decisions() {
            match &d {
                Decision::Saturated { .. } => self.report.saturation_events += 1,
                Decision::PlacementFailed { .. } => self.report.placement_failures += 1,
                Decision::Verdict(v) => *self.report.verdicts.entry(v.rule.as_str().to_owned()).or_default() += 1,
                Decision::Migrated { reason, .. } => {
                    *self.report.migrations.entry(reason.as_str().to_owned()).or_default() += 1
                }
                _ => {}
            }
            let (kind, subject, detail) = d.trace_fields();
            cloud.record(kind, subject, detail);
        }
    }

    fn after_manager_call(&mut self, cloud: &mut SimCloud<Cmd>) {
        let now = cloud.now();
        self.flush_decisions(cloud);
        for out in self.manager.drain_outbox() {
            let Some(&idx) = self.by_id.get(&out.client) else {
                continue;
            };
            let msg = match ServerMessage::decode(&out.frame) {
                Ok(m) => m,
                Err(e) => {
                    self.violations
                        .push(format!("undecodable frame to {}: {e}", out.client));
                    continue;
                }
            };
            self.deliver(cloud, now, idx, msg);
        }
        self.sync_counts(cloud);
    }

    fn deliver(&mut self, cloud: &mut SimCloud<Cmd>, now: VirtualTime, idx: usize, msg: ServerMessage) {
        let c = &mut self.clients[idx];
        match msg {
            ServerMessage::Assign {
                session_id,
                address,
                epoch,
            } => {
                if epoch < c.epoch {
                    c.epoch_regressions += 1;
                }
                c.session = Some(session_id.clone());
                c.address = Some(address.clone());
                c.epoch = c.epoch.max(epoch);
                c.hello_pending = false;
                c.channel_live = true;
                c.assigns.push((now, epoch));
                let name = c.name.clone();
                let departing = c.departing && !c.closed;
                cloud.record(
                    "client_assign",
                    &name,
                    format!("session={session_id} address={address} epoch={epoch}"),
                );
                if departing {
                    self.send(cloud, now, idx, ClientMessage::Bye { session_id }, 0);
                }
            }
            ServerMessage::Update {
                session_id,
                address,
                epoch,
                reason,
            } => {
                self.outbox_updates += 1;
                if epoch <= c.epoch {
                    c.stale_updates += 1;
                    return;
                }
                c.address = Some(address.clone());
                c.epoch = epoch;
                c.updates.push((now, epoch, reason));
                let name = c.name.clone();
                cloud.record(
                    "client_update",
                    &name,
                    format!(
                        "session={session_id} address={address} epoch={epoch} reason={}",
                        reason.as_str()
                    ),
                );
            }
            ServerMessage::Error { code, detail } => {
                if c.hello_pending {
                    c.hello_pending = false;
                    c.rejected = true;
                }
                let name = c.name.clone();
                cloud.record(
                    "client_error",
                    &name,
                    format!("code={code} detail={}", detail.replace(['\t', '\n'], " ")),
                );
            }
        }
    }

    fn send(&mut self, cloud: &mut SimCloud<Cmd>, at: VirtualTime, client: usize, msg: ClientMessage, attempt: u32) {
        cloud
            .schedule(at, Cmd::Send { client, msg, attempt })
            .expect("sends are never scheduled in the past");
    }

    fn handle(&mut self, cloud: &mut SimCloud<Cmd>, cmd: Cmd) {
        let now = cloud.now();
        match cmd {
            Cmd::Scenario(ev) => self.scenario_event(cloud, now, ev),
            Cmd::Send { client, msg, attempt } => self.deliver_send(cloud, now, client, msg, attempt),
            Cmd::Restart => self.restart(cloud, now),
            Cmd::Tick => {
                if self.manager.is_up() {
                    self.manager.tick(cloud, now);
                    let failures_before = self.report.placement_failures;
                    self.after_manager_call(cloud);
                    if self.report.placement_failures == failures_before {
                        self.check_consistency(cloud, now);
                    }
                }
                let next = now + self.spec.balancer.monitor_interval;
                if next <= self.spec.duration {
                    cloud.schedule(next, Cmd::Tick).expect("future tick");
                }
            }
        }
        let public = cloud
            .list_instances(None)
            .unwrap_or_default()
            .iter()
            .filter(|r| {
                cloud
                    .provider(&r.provider_id)
                    .is_some_and(|p| p.kind == ProviderKind::Public)
            })
            .count() as u64;
        self.report.max_concurrent_public = self.report.max_concurrent_public.max(public);
    }

    /// After a tick no open session may sit on a draining or dead instance.
    fn check_consistency(&mut self, cloud: &SimCloud<Cmd>, now: VirtualTime) {
        let Some(broker) = self.manager.broker() else { return };
        for s in broker.sessions() {
            let state = cloud.instance(&s.instance_id).map(|r| r.state);
            if !matches!(
                state,
                Some(InstanceState::Pending | InstanceState::Running | InstanceState::Degraded)
            ) {
                self.violations.push(format!(
                    "t={now}: session {} references {} in state {:?}",
                    s.session_id, s.instance_id, state
                ));
            }
        }
    }

    fn deliver_send(
        &mut self,
        cloud: &mut SimCloud<Cmd>,
        now: VirtualTime,
        idx: usize,
        msg: ClientMessage,
        attempt: u32,
    ) {
        let c = &self.clients[idx];
        if let ClientMessage::Ping { .. } = msg {
            if c.closed || c.channel_live {
                return;
            }
        }
        if c.closed {
            return;
        }
        let client_id = ClientId(c.name.clone());
        let Some(outcome) = self.manager.handle_frame(cloud, now, &client_id, &msg.encode()) else {
            let delay = backoff(attempt, &mut self.retry_rng);
            let name = self.clients[idx].name.clone();
            cloud.record("client_retry", &name, format!("attempt={} delay={delay}", attempt + 1));
            self.send(cloud, now + delay, idx, msg, attempt + 1);
            return;
        };
        let name = self.clients[idx].name.clone();
        if !matches!(outcome, FrameOutcome::Closed(_)) {
            self.flush_decisions(cloud);
        }
        match &outcome {
            FrameOutcome::Assigned(u) => {
                self.report.sessions_total += 1;
                let provider = cloud
                    .instance(&u.new_instance_id)
                    .map(|r| r.provider_id.to_string())
                    .unwrap_or_default();
                *self
                    .report
                    .sessions_by_first_provider
                    .entry(provider.clone())
                    .or_default() += 1;
                cloud.record(
                    "assign",
                    &u.session_id,
                    format!(
                        "client={name} instance={} provider={provider} epoch={}",
                        u.new_instance_id, u.epoch
                    ),
                );
            }
            FrameOutcome::Closed(s) => {
                self.clients[idx].closed = true;
                cloud.record(
                    "bye",
                    &s.session_id,
                    format!("client={name} instance={}", s.instance_id),
                );
                self.flush_decisions(cloud);
                self.manager.settle(cloud, now);
            }
            FrameOutcome::Pinged { reassigned } => {
                cloud.record("ping", &name, format!("reassigned={reassigned}"));
            }
            FrameOutcome::Rejected(e) => {
                cloud.record("rejected", &name, format!("code={}", e.code()));
                match (&msg, e) {
                    (ClientMessage::Bye { .. }, BrokerError::UnknownSession(_) | BrokerError::AlreadyClosed(_)) => {
                        self.clients[idx].closed = true;
                    }
                    (ClientMessage::Ping { .. }, BrokerError::UnknownSession(_)) => {
                        // the session was lost with a damaged journal tail
                        self.clients[idx].closed = true;
                        self.clients[idx].session = None;
                    }
                    _ => {}
                }
            }
        }
        self.after_manager_call(cloud);
    }

    fn scenario_event(&mut self, cloud: &mut SimCloud<Cmd>, now: VirtualTime, ev: ScenarioEvent) {
        match ev {
            ScenarioEvent::Arrive { client, model } => {
                let idx = self.by_name[&client];
                let c = &mut self.clients[idx];
                c.arrived_at = now;
                c.hello_pending = true;
                cloud.record("arrive", &client, format!("model={model}"));
                self.deliver_send(cloud, now, idx, ClientMessage::Hello { model_id: model }, 0);
            }
            ScenarioEvent::Depart { client } => {
                let idx = self.by_name[&client];
                let c = &mut self.clients[idx];
                c.departing = true;
                cloud.record("depart", &client, "");
                match (c.session.clone(), c.rejected) {
                    (Some(sid), _) => self.deliver_send(cloud, now, idx, ClientMessage::Bye { session_id: sid }, 0),
                    (None, true) => c.closed = true,
                    // BYE follows the ASSIGN
                    (None, false) => {}
                }
            }
            ScenarioEvent::Burst {
                client,
                count,
                every,
                until,
            } => {
                let idx = self.by_name[&client];
                self.burst(cloud, now, idx, count);
                if let Some(every) = every {
                    let next = now + every;
                    let open = !self.clients[idx].closed && !self.clients[idx].departing;
                    if open && next <= until.unwrap_or(self.spec.duration).min(self.spec.duration) {
                        cloud
                            .schedule(
                                next,
                                Cmd::Scenario(ScenarioEvent::Burst {
                                    client,
                                    count,
                                    every: Some(every),
                                    until,
                                }),
                            )
                            .expect("future burst");
                    }
                }
            }
            ScenarioEvent::Fault { target, kind, duration } => {
                let instance = match &target {
                    FaultTarget::Instance(id) => Some(id.clone()),
                    FaultTarget::Session(name) => {
                        let addr = self.clients[self.by_name[name]].address.clone();
                        addr.and_then(|a| {
                            cloud
                                .all_instances()
                                .find(|r| r.address == a)
                                .map(|r| r.instance_id.clone())
                        })
                    }
                };
                let Some(instance_id) = instance else {
                    cloud.record("fault_skipped", &target, "no instance");
                    return;
                };
                let fault = FaultInjection {
                    instance_id: instance_id.clone(),
                    kind,
                    start: now,
                    duration,
                };
                if let Err(e) = cloud.inject_fault(fault) {
                    cloud.record("fault_skipped", &target, e);
                }
            }
            ScenarioEvent::BrokerCrash { restart_delay } => {
                if !self.manager.is_up() {
                    cloud.record("im_crash", "manager", "ignored=already_down");
                    return;
                }
                self.manager.crash();
                self.report.broker_crashes += 1;
                cloud.record("im_crash", "manager", format!("restart_in={restart_delay}"));
                cloud
                    .schedule(now + restart_delay, Cmd::Restart)
                    .expect("future restart");
                for idx in 0..self.clients.len() {
                    let c = &mut self.clients[idx];
                    if c.closed || !c.channel_live {
                        continue;
                    }
                    c.channel_live = false;
                    if let Some(sid) = c.session.clone() {
                        let delay = backoff(0, &mut self.retry_rng);
                        self.send(cloud, now + delay, idx, ClientMessage::Ping { session_id: sid }, 1);
                    }
                }
            }
        }
    }

    fn restart(&mut self, cloud: &mut SimCloud<Cmd>, now: VirtualTime) {
        match self.manager.restart(cloud, now) {
            Ok(rep) => {
                if rep.truncation.is_some() {
                    self.report.journal_truncations += 1;
                }
                let trunc = rep
                    .truncation
                    .map_or("none".to_owned(), |t| format!("{:?}@{}", t.cause, t.valid_bytes));
                cloud.record(
                    "im_restart",
                    "manager",
                    format!("sessions={} records={} truncation={trunc}", rep.sessions, rep.records),
                );
                self.sync_counts(cloud);
            }
            Err(e) => {
                self.violations.push(format!("restart failed: {e}"));
                cloud.record("im_restart", "manager", format!("error={e}"));
            }
        }
    }

    fn burst(&mut self, cloud: &mut SimCloud<Cmd>, now: VirtualTime, idx: usize, count: u32) {
        let c = &self.clients[idx];
        let name = c.name.clone();
        let model = c.model.clone();
        let target = c.address.as_ref().filter(|_| !c.closed).and_then(|a| {
            cloud
                .all_instances()
                .find(|r| &r.address == a)
                .map(|r| r.instance_id.clone())
        });
        let Some(instance) = target else {
            self.clients[idx].requests_failed += u64::from(count);
            self.report.requests_failed += u64::from(count);
            cloud.record("burst", &name, format!("instance=none served=0 failed={count}"));
            return;
        };
        let (mut served, mut failed) = (0u64, 0u64);
        for _ in 0..count {
            self.next_request += 1;
            let req = ModelRequest {
                model_id: model.clone(),
                parameters: request_params(&model, &mut self.request_rng),
                request_id: format!("{name}-r{}", self.next_request),
            };
            match cloud.deliver_request(&instance, &req) {
                Ok(_) => served += 1,
                Err(_) => failed += 1,
            }
        }
        let c = &mut self.clients[idx];
        c.requests_served += served;
        c.requests_failed += failed;
        self.report.requests_served += served;
        self.report.requests_failed += failed;
        let _ = now;
        cloud.record(
            "burst",
            &name,
            format!("instance={instance} served={served} failed={failed}"),
        );
    }
}

/// Runs `spec` with an in-memory sessions journal.
pub fn run_scenario(spec: &ScenarioSpec) -> RunOutcome {
    run_scenario_with_store(spec, Box::new(MemoryStore::default())).expect("the in-memory journal cannot fail")
}

/// Runs `spec`, journaling sessions to `store`.
pub fn run_scenario_with_store(spec: &ScenarioSpec, store: Box<dyn JournalStore>) -> Result<RunOutcome, BrokerError> {
    let library = spec
        .library()
        .map_err(|e| BrokerError::Persist(format!("scenario library: {e}")))?;
    let mut cloud: SimCloud<Cmd> = SimCloud::new(spec.providers.clone(), spec.load, spec.balancer.monitor_interval);
    for img in library.list_images() {
        cloud.publish_image(img);
    }
    let manager = Manager::start(spec.balancer.clone(), library, store)?;
    let provider_ids: Vec<String> = spec.providers.iter().map(|p| p.provider_id.to_string()).collect();

    let mut clients = Vec::new();
    let mut by_name = BTreeMap::new();
    let mut by_id = BTreeMap::new();
    for ev in &spec.events {
        if let ScenarioEvent::Arrive { client, model } = &ev.event {
            by_name.insert(client.clone(), clients.len());
            by_id.insert(ClientId(client.clone()), clients.len());
            clients.push(ClientRecord {
                name: client.clone(),
                model: model.clone(),
                ..ClientRecord::default()
            });
        }
    }
    let mut h = Harness {
        spec: spec.clone(),
        manager,
        clients,
        by_name,
        by_id,
        retry_rng: rng_stream(spec.seed, 2),
        request_rng: rng_stream(spec.seed, 3),
        report: MetricsReport::empty(&spec.name, spec.seed, &provider_ids),
        violations: Vec::new(),
        outbox_updates: 0,
        next_request: 0,
    };

    cloud.record(
        "scenario",
        &spec.name,
        format!("seed={} duration={}", spec.seed, spec.duration),
    );
    let times = jittered_times(spec);
    let mut order: Vec<usize> = (0..spec.events.len()).collect();
    order.sort_by_key(|&i| (times[i], i));
    for i in order {
        cloud
            .schedule(times[i], Cmd::Scenario(spec.events[i].event.clone()))
            .expect("scenario events start at or after zero");
    }
    let interval = spec.balancer.monitor_interval;
    if interval <= spec.duration {
        cloud.schedule(interval, Cmd::Tick).expect("first tick");
    }

    cloud.run_until(spec.duration, &mut |c: &mut SimCloud<Cmd>, cmd| h.handle(c, cmd));
    if !h.manager.is_up() {
        h.restart(&mut cloud, spec.duration);
    }

    let mut final_mapping = BTreeMap::new();
    let mut final_epochs = BTreeMap::new();
    if let Some(broker) = h.manager.broker() {
        for c in &h.clients {
            let open = c
                .session
                .as_ref()
                .filter(|_| !c.closed)
                .and_then(|sid| broker.session(sid));
            final_mapping.insert(c.name.clone(), open.map(|s| s.instance_id.clone()));
            if let Some(s) = open {
                final_epochs.insert(c.name.clone(), s.epoch);
            }
        }
        h.report.open_sessions_at_end = broker.sessions().count() as u64;
    }
    let journal = h
        .manager
        .broker()
        .map(|b| b.journal_bytes().unwrap_or_default())
        .unwrap_or_default();

    cloud.teardown();
    let mut r = h.report;
    r.update_messages = h.outbox_updates + h.manager.undelivered();
    r.undelivered_updates = h.manager.undelivered();
    let mut total = 0.0;
    for inst in cloud.all_instances() {
        let p = inst.provider_id.to_string();
        *r.instances_launched.entry(p.clone()).or_default() += 1;
        if inst.state == InstanceState::Terminated {
            *r.instances_terminated.entry(p).or_default() += 1;
        }
        if let (Some(end), Some(desc)) = (inst.terminate_time, cloud.provider(&inst.provider_id)) {
            total += desc.charge(end - inst.launch_time);
        }
    }
    r.total_cost = total;
    r.provider_accrued_cost = cloud.accrued_cost();
    cloud.record(
        "end",
        &spec.name,
        format!("cost={}", crate::textfmt::fmt_f64(r.provider_accrued_cost)),
    );
    r.trace_lines = cloud.trace().len() as u64;
    r.trace_hash = cloud.trace().hash();

    let instances: Vec<InstanceRecord> = cloud.all_instances().cloned().collect();
    let histories = instances
        .iter()
        .map(|i| (i.instance_id.clone(), cloud.state_history(&i.instance_id).to_vec()))
        .collect();
    Ok(RunOutcome {
        report: r,
        trace: cloud.trace().clone(),
        clients: h.clients,
        final_mapping,
        final_epochs,
        violations: h.violations,
        instances,
        histories,
        journal,
    })
}
