use super::queue::{EventQueue, PastEvent};
use super::trace::Trace;
use crate::gateway::{GatewayError, ModelRequest, ModelResult, ModelService};
use crate::ids::{ImageId, InstanceId, ModelId, ProviderId, Seconds, VirtualTime};
use crate::library::ImageDescriptor;
use crate::provider::{
    CloudProvider, HealthSample, InstanceRecord, InstanceState, Labels, ProviderDescriptor, ProviderError,
    TerminationAck,
};
use crate::textfmt::{fmt_f64, FieldError, Record};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

pub const DEFAULT_MONITOR_INTERVAL: Seconds = 10;

/// Synthetic per-instance load. A sample over an interval in which the
/// instance held `k` sessions and served `r` requests is
///
/// * `cpu = min(1, k * per_session_cpu)`
/// * `net_in = r * per_request_bytes_in`, `net_out = r * per_request_bytes_out`
/// * `disk_read = disk_write = r * disk_bytes_per_request`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoadModel {
    pub per_session_cpu: f64,
    pub per_request_bytes_in: u64,
    pub per_request_bytes_out: u64,
    pub disk_bytes_per_request: u64,
}

impl Default for LoadModel {
    fn default() -> Self {
        Self {
            per_session_cpu: 0.2,
            per_request_bytes_in: 4096,
            per_request_bytes_out: 16384,
            disk_bytes_per_request: 8192,
        }
    }
}

impl LoadModel {
    pub fn cpu_for_sessions(&self, sessions: u32) -> f64 {
        (sessions as f64 * self.per_session_cpu).min(1.0)
    }

    pub fn from_record(rec: &Record) -> Result<Self, Vec<FieldError>> {
        let mut errs = rec.check_fields(&["per_session_cpu", "bytes_in", "bytes_out", "disk"]);
        let d = Self::default();
        let mut out = d;
        match rec.parse_or("per_session_cpu", d.per_session_cpu) {
            Ok(v) if v.is_finite() && v >= 0.0 => out.per_session_cpu = v,
            Ok(_) => errs.push(rec.error("per_session_cpu must be a non-negative number")),
            Err(e) => errs.push(e),
        }
        for (key, slot) in [
            ("bytes_in", &mut out.per_request_bytes_in),
            ("bytes_out", &mut out.per_request_bytes_out),
            ("disk", &mut out.disk_bytes_per_request),
        ] {
            match rec.parse_opt(key) {
                Ok(Some(v)) => *slot = v,
                Ok(None) => {}
                Err(e) => errs.push(e),
            }
        }
        if errs.is_empty() {
            Ok(out)
        } else {
            Err(errs)
        }
    }

    pub fn to_line(&self) -> String {
        format!(
            "load per_session_cpu={} bytes_in={} bytes_out={} disk={}",
            fmt_f64(self.per_session_cpu),
            self.per_request_bytes_in,
            self.per_request_bytes_out,
            self.disk_bytes_per_request
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    CpuSaturation,
    NetworkBlackhole,
    Crash,
}

impl fmt::Display for FaultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FaultKind::CpuSaturation => "cpu_saturation",
            FaultKind::NetworkBlackhole => "network_blackhole",
            FaultKind::Crash => "crash",
        })
    }
}

impl FromStr for FaultKind {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "cpu_saturation" => Ok(FaultKind::CpuSaturation),
            "network_blackhole" => Ok(FaultKind::NetworkBlackhole),
            "crash" => Ok(FaultKind::Crash),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultInjection {
    pub instance_id: InstanceId,
    pub kind: FaultKind,
    pub start: VirtualTime,
    /// `None` means permanent.
    pub duration: Option<Seconds>,
}

impl FaultInjection {
    /// Whether a sample closing at `at` (covering `(at - interval, at]`) lies
    /// wholly inside the fault window.
    fn covers(&self, at: VirtualTime, interval: Seconds) -> bool {
        let Some(open) = at.checked_sub(interval) else {
            return false;
        };
        open >= self.start && self.duration.is_none_or(|d| at <= self.start + d)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DeliveryError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum CloudEvent<X> {
    Boot(InstanceId),
    Crash(InstanceId),
    Sample,
    External(X),
}

/// Deterministic discrete-event cloud. Implements [`CloudProvider`] for any
/// number of providers and carries external commands of type `X` on the same
/// queue, so that every actor is driven by one event loop.
pub struct SimCloud<X = ()> {
    queue: EventQueue<CloudEvent<X>>,
    providers: Vec<ProviderDescriptor>,
    images: BTreeMap<ImageId, (u32, BTreeSet<ModelId>)>,
    instances: BTreeMap<InstanceId, InstanceRecord>,
    services: BTreeMap<InstanceId, ModelService>,
    history: BTreeMap<InstanceId, Vec<(VirtualTime, InstanceState)>>,
    faults: Vec<FaultInjection>,
    load: LoadModel,
    monitor_interval: Seconds,
    next_instance: u64,
    closed_cost: f64,
    trace: Trace,
}

impl<X> SimCloud<X> {
    pub fn new(providers: Vec<ProviderDescriptor>, load: LoadModel, monitor_interval: Seconds) -> Self {
        assert!(monitor_interval > 0, "monitor interval must be positive");
        let mut queue = EventQueue::new();
        queue
            .schedule(monitor_interval, CloudEvent::Sample)
            .expect("clock starts at zero");
        Self {
            queue,
            providers,
            images: BTreeMap::new(),
            instances: BTreeMap::new(),
            services: BTreeMap::new(),
            history: BTreeMap::new(),
            faults: Vec::new(),
            load,
            monitor_interval,
            next_instance: 1,
            closed_cost: 0.0,
            trace: Trace::default(),
        }
    }

    pub fn monitor_interval(&self) -> Seconds {
        self.monitor_interval
    }

    pub fn load_model(&self) -> &LoadModel {
        &self.load
    }

    /// Makes the current version of an image launchable.
    pub fn publish_image(&mut self, image: &ImageDescriptor) {
        self.images
            .insert(image.image_id.clone(), (image.version, image.model_ids.clone()));
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn trace_mut(&mut self) -> &mut Trace {
        &mut self.trace
    }

    pub fn record(&mut self, kind: &str, subject: impl fmt::Display, detail: impl fmt::Display) {
        let now = self.queue.now();
        self.trace.record(now, kind, subject, detail);
    }

    pub fn schedule(&mut self, at: VirtualTime, command: X) -> Result<(), PastEvent> {
        self.queue.schedule(at, CloudEvent::External(command)).map(|_| ())
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }

    /// Processes every event with timestamp `<= t` in order, handing external
    /// commands to `handler`, then sets the clock to `t`. Returns the number
    /// of events processed.
    pub fn run_until<H>(&mut self, t: VirtualTime, handler: &mut H) -> usize
    where
        H: FnMut(&mut SimCloud<X>, X),
    {
        assert!(t >= self.queue.now(), "run_until cannot move the clock backwards");
        let mut processed = 0;
        while let Some((_, ev)) = self.queue.pop_due(t) {
            processed += 1;
            match ev {
                CloudEvent::Boot(id) => self.boot(&id),
                CloudEvent::Crash(id) => self.crash(&id),
                CloudEvent::Sample => self.sample_all(),
                CloudEvent::External(x) => handler(self, x),
            }
        }
        self.queue.advance_to(t);
        processed
    }

    fn transition(&mut self, id: &InstanceId, to: InstanceState) -> Result<(), ProviderError> {
        let now = self.queue.now();
        let rec = self
            .instances
            .get_mut(id)
            .ok_or_else(|| ProviderError::UnknownInstance(id.clone()))?;
        if !rec.state.can_transition_to(to) {
            return Err(ProviderError::InvalidTransition {
                id: id.clone(),
                from: rec.state,
                to,
            });
        }
        rec.state = to;
        if to == InstanceState::Terminated {
            rec.terminate_time = Some(now);
        }
        if let Some(svc) = self.services.get_mut(id) {
            svc.state = to;
        }
        self.history.entry(id.clone()).or_default().push((now, to));
        Ok(())
    }

    fn boot(&mut self, id: &InstanceId) {
        if self.instances.get(id).map(|r| r.state) != Some(InstanceState::Pending) {
            return;
        }
        self.transition(id, InstanceState::Running).expect("pending boots");
        let now = self.queue.now();
        let sessions = self.services[id].session_count();
        let mut sample = HealthSample::idle(now);
        sample.cpu = if self.fault_active(id, FaultKind::CpuSaturation, now) {
            1.0
        } else {
            self.load.cpu_for_sessions(sessions)
        };
        self.instances.get_mut(id).unwrap().last_sample = Some(sample);
        self.record("boot", id, "state=running");
    }

    fn crash(&mut self, id: &InstanceId) {
        let Some(rec) = self.instances.get(id) else { return };
        if !rec.is_live() {
            return;
        }
        let cost = self.close_billing(id);
        self.record("crash", id, format!("cost={}", fmt_f64(cost)));
    }

    fn fault_active(&self, id: &InstanceId, kind: FaultKind, at: VirtualTime) -> bool {
        self.faults
            .iter()
            .any(|f| &f.instance_id == id && f.kind == kind && f.covers(at, self.monitor_interval))
    }

    fn sample_all(&mut self) {
        let now = self.queue.now();
        let ids: Vec<InstanceId> = self
            .instances
            .values()
            .filter(|r| r.state.is_observable())
            .map(|r| r.instance_id.clone())
            .collect();
        for id in ids {
            let svc = self.services.get_mut(&id).expect("every instance has a service");
            let stats = svc.take_interval();
            let sessions = svc.session_count();
            let r = stats.requests;
            let mut sample = HealthSample {
                at: now,
                cpu: self.load.cpu_for_sessions(sessions),
                disk_read: r * self.load.disk_bytes_per_request,
                disk_write: r * self.load.disk_bytes_per_request,
                net_in: r * self.load.per_request_bytes_in,
                net_out: r * self.load.per_request_bytes_out,
            };
            if self.fault_active(&id, FaultKind::CpuSaturation, now) {
                sample.cpu = 1.0;
            }
            if self.fault_active(&id, FaultKind::NetworkBlackhole, now) {
                sample.net_out = 0;
            }
            self.trace.record(
                now,
                "sample",
                &id,
                format!(
                    "cpu={} net_in={} net_out={} disk_read={} disk_write={} sessions={sessions}",
                    fmt_f64(sample.cpu),
                    sample.net_in,
                    sample.net_out,
                    sample.disk_read,
                    sample.disk_write
                ),
            );
            self.instances.get_mut(&id).unwrap().last_sample = Some(sample);
        }
        self.queue
            .schedule(now + self.monitor_interval, CloudEvent::Sample)
            .expect("future sample");
    }

    fn close_billing(&mut self, id: &InstanceId) -> f64 {
        self.transition(id, InstanceState::Terminated)
            .expect("live instances can terminate");
        let rec = &self.instances[id];
        let elapsed = rec.terminate_time.unwrap() - rec.launch_time;
        let cost = self
            .provider(&rec.provider_id)
            .map(|p| p.charge(elapsed))
            .unwrap_or(0.0);
        self.closed_cost += cost;
        cost
    }

    /// Registers a fault. Its effects show in samples from the first whole
    /// interval after `start`; a crash terminates the instance silently at
    /// `start`.
    pub fn inject_fault(&mut self, fault: FaultInjection) -> Result<(), ProviderError> {
        if !self.instances.contains_key(&fault.instance_id) {
            return Err(ProviderError::UnknownInstance(fault.instance_id));
        }
        self.record(
            "fault",
            &fault.instance_id,
            format!(
                "kind={} start={} duration={}",
                fault.kind,
                fault.start,
                fault.duration.map_or("permanent".to_owned(), |d| d.to_string())
            ),
        );
        if fault.kind == FaultKind::Crash {
            let at = fault.start.max(self.queue.now());
            self.queue
                .schedule(at, CloudEvent::Crash(fault.instance_id.clone()))
                .expect("not in the past");
        }
        self.faults.push(fault);
        Ok(())
    }

    pub fn set_session_count(&mut self, id: &InstanceId, n: u32) {
        if let Some(svc) = self.services.get_mut(id) {
            svc.set_session_count(n);
        }
    }

    pub fn service(&self, id: &InstanceId) -> Option<&ModelService> {
        self.services.get(id)
    }

    /// Delivers a model request to the instance's service.
    pub fn deliver_request(&mut self, id: &InstanceId, req: &ModelRequest) -> Result<ModelResult, DeliveryError> {
        let rec = self
            .instances
            .get(id)
            .ok_or_else(|| ProviderError::UnknownInstance(id.clone()))?;
        if !rec.state.is_observable() {
            return Err(ProviderError::NotRunning(id.clone()).into());
        }
        Ok(self.services.get_mut(id).unwrap().run_model(req)?)
    }

    /// The full state history of one instance, starting with `Pending`.
    pub fn state_history(&self, id: &InstanceId) -> &[(VirtualTime, InstanceState)] {
        self.history.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Every instance ever launched, in id order.
    pub fn all_instances(&self) -> impl Iterator<Item = &InstanceRecord> {
        self.instances.values()
    }

    /// Terminates every live instance. Returns how many were torn down.
    pub fn teardown(&mut self) -> usize {
        let live: Vec<InstanceId> = self
            .instances
            .values()
            .filter(|r| r.is_live())
            .map(|r| r.instance_id.clone())
            .collect();
        for id in &live {
            let cost = self.close_billing(id);
            self.record("terminate", id, format!("cost={} reason=teardown", fmt_f64(cost)));
        }
        live.len()
    }
}

impl<X> CloudProvider for SimCloud<X> {
    fn now(&self) -> VirtualTime {
        self.queue.now()
    }

    fn providers(&self) -> &[ProviderDescriptor] {
        &self.providers
    }

    fn launch(
        &mut self,
        provider: &ProviderId,
        image: &ImageId,
        labels: Labels,
    ) -> Result<InstanceRecord, ProviderError> {
        let desc = self
            .provider(provider)
            .ok_or_else(|| ProviderError::UnknownProvider(provider.clone()))?
            .clone();
        let (version, models) = self
            .images
            .get(image)
            .cloned()
            .ok_or_else(|| ProviderError::UnknownImage(image.clone()))?;
        if let Some(cap) = desc.capacity {
            if self.live_count(provider) >= cap as usize {
                return Err(ProviderError::CapacityExceeded(provider.clone()));
            }
        }
        let n = self.next_instance;
        self.next_instance += 1;
        let now = self.queue.now();
        let id = InstanceId(format!("{provider}-i{n:05}"));
        let rec = InstanceRecord {
            instance_id: id.clone(),
            provider_id: provider.clone(),
            image_id: image.clone(),
            image_version: version,
            address: format!("{provider}-inst{n}:8080"),
            state: InstanceState::Pending,
            launch_time: now,
            terminate_time: None,
            last_sample: None,
            labels,
        };
        self.instances.insert(id.clone(), rec.clone());
        self.services.insert(
            id.clone(),
            ModelService::new(id.clone(), image.clone(), version, models),
        );
        self.history.insert(id.clone(), vec![(now, InstanceState::Pending)]);
        self.queue
            .schedule(now + desc.boot_time, CloudEvent::Boot(id.clone()))
            .expect("boot is never in the past");
        let labels: Vec<String> = rec.labels.iter().map(|(k, v)| format!(" {k}={v}")).collect();
        self.record(
            "launch",
            &id,
            format!("provider={provider} image={image} version={version}{}", labels.concat()),
        );
        Ok(rec)
    }

    fn terminate(&mut self, instance: &InstanceId) -> Result<TerminationAck, ProviderError> {
        match self.instances.get(instance) {
            None => return Err(ProviderError::UnknownInstance(instance.clone())),
            Some(r) if !r.is_live() => return Err(ProviderError::AlreadyTerminated(instance.clone())),
            Some(_) => {}
        }
        let cost = self.close_billing(instance);
        self.record("terminate", instance, format!("cost={}", fmt_f64(cost)));
        Ok(TerminationAck {
            instance_id: instance.clone(),
            at: self.queue.now(),
            cost,
        })
    }

    fn poll_metrics(&mut self, instance: &InstanceId) -> Result<HealthSample, ProviderError> {
        let rec = self
            .instances
            .get(instance)
            .ok_or_else(|| ProviderError::UnknownInstance(instance.clone()))?;
        if !rec.state.is_observable() {
            return Err(ProviderError::NotRunning(instance.clone()));
        }
        Ok(rec.last_sample.expect("running instances always carry a sample"))
    }

    fn list_instances(&self, provider: Option<&ProviderId>) -> Result<Vec<InstanceRecord>, ProviderError> {
        if let Some(p) = provider {
            if self.provider(p).is_none() {
                return Err(ProviderError::UnknownProvider(p.clone()));
            }
        }
        let mut out: Vec<InstanceRecord> = self
            .instances
            .values()
            .filter(|r| r.is_live() && provider.is_none_or(|p| &r.provider_id == p))
            .cloned()
            .collect();
        out.sort_by(|a, b| (a.launch_time, &a.instance_id).cmp(&(b.launch_time, &b.instance_id)));
        Ok(out)
    }

    fn live_count(&self, provider: &ProviderId) -> usize {
        self.instances
            .values()
            .filter(|r| r.is_live() && &r.provider_id == provider)
            .count()
    }

    fn instance(&self, instance: &InstanceId) -> Option<&InstanceRecord> {
        self.instances.get(instance)
    }

    fn set_state(&mut self, instance: &InstanceId, to: InstanceState) -> Result<(), ProviderError> {
        if !matches!(to, InstanceState::Degraded | InstanceState::Draining) {
            let from = self
                .instances
                .get(instance)
                .ok_or_else(|| ProviderError::UnknownInstance(instance.clone()))?
                .state;
            return Err(ProviderError::InvalidTransition {
                id: instance.clone(),
                from,
                to,
            });
        }
        self.transition(instance, to)?;
        self.record("state", instance, format!("state={to}"));
        Ok(())
    }

    fn accrued_cost(&self) -> f64 {
        let now = self.queue.now();
        let live: f64 = self
            .instances
            .values()
            .filter(|r| r.is_live())
            .map(|r| {
                self.provider(&r.provider_id)
                    .map(|p| p.charge(now - r.launch_time))
                    .unwrap_or(0.0)
            })
            .sum();
        self.closed_cost + live
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::HOUR;

    type Cloud = SimCloud<()>;

    fn cloud() -> Cloud {
        let mut c = Cloud::new(
            vec![
                ProviderDescriptor::private("private", 2),
                ProviderDescriptor::public("public"),
            ],
            LoadModel::default(),
            10,
        );
        c.publish_image(&ImageDescriptor::new("topo", &["topmodel-stub"]));
        c
    }

    fn run(c: &mut Cloud, t: VirtualTime) -> usize {
        c.run_until(t, &mut |_, _| {})
    }

    fn launch(c: &mut Cloud, p: &str) -> Result<InstanceRecord, ProviderError> {
        c.launch(&p.into(), &"topo".into(), Labels::new())
    }

    #[test]
    fn private_capacity_is_enforced() {
        let mut c = cloud();
        launch(&mut c, "private").unwrap();
        let second = launch(&mut c, "private").unwrap();
        assert_eq!(second.state, InstanceState::Pending);
        assert_eq!(c.free_capacity(&"private".into()), Some(0));
        assert_eq!(
            launch(&mut c, "private"),
            Err(ProviderError::CapacityExceeded("private".into()))
        );
    }

    #[test]
    fn public_is_elastic() {
        let mut c = cloud();
        for _ in 0..50 {
            launch(&mut c, "public").unwrap();
        }
        assert!(launch(&mut c, "public").is_ok());
        assert_eq!(c.free_capacity(&"public".into()), None);
    }

    #[test]
    fn launch_errors() {
        let mut c = cloud();
        assert_eq!(
            c.launch(&"mars".into(), &"topo".into(), Labels::new()),
            Err(ProviderError::UnknownProvider("mars".into()))
        );
        assert_eq!(
            c.launch(&"private".into(), &"nope".into(), Labels::new()),
            Err(ProviderError::UnknownImage("nope".into()))
        );
    }

    #[test]
    fn terminate_bills_rounded_up() {
        let mut c = cloud();
        let rec = launch(&mut c, "public").unwrap();
        run(&mut c, 61 * 60);
        let ack = c.terminate(&rec.instance_id).unwrap();
        assert_eq!(ack.cost, 2.0);
        assert_eq!(c.accrued_cost(), 2.0);
        assert_eq!(
            c.terminate(&rec.instance_id),
            Err(ProviderError::AlreadyTerminated(rec.instance_id.clone()))
        );
        let r = c.instance(&rec.instance_id).unwrap();
        assert_eq!(r.terminate_time, Some(61 * 60));
        // freed slots
        assert!(c.list_instances(None).unwrap().is_empty());
    }

    #[test]
    fn terminate_pending_bills_one_period() {
        let mut c = cloud();
        run(&mut c, 5);
        let rec = launch(&mut c, "public").unwrap();
        run(&mut c, 10);
        assert_eq!(c.instance(&rec.instance_id).unwrap().state, InstanceState::Pending);
        assert_eq!(c.terminate(&rec.instance_id).unwrap().cost, 1.0);
        // terminate with zero elapsed time is still one period
        let rec = launch(&mut c, "public").unwrap();
        assert_eq!(c.terminate(&rec.instance_id).unwrap().cost, 1.0);
    }

    #[test]
    fn private_costs_nothing() {
        let mut c = cloud();
        let rec = launch(&mut c, "private").unwrap();
        run(&mut c, 5 * HOUR);
        assert_eq!(c.terminate(&rec.instance_id).unwrap().cost, 0.0);
        assert_eq!(c.accrued_cost(), 0.0);
    }

    #[test]
    fn boot_delay_boundary() {
        let mut c = cloud();
        let rec = launch(&mut c, "private").unwrap();
        run(&mut c, 29);
        assert_eq!(c.instance(&rec.instance_id).unwrap().state, InstanceState::Pending);
        assert_eq!(
            c.poll_metrics(&rec.instance_id),
            Err(ProviderError::NotRunning(rec.instance_id.clone()))
        );
        run(&mut c, 30);
        assert_eq!(c.instance(&rec.instance_id).unwrap().state, InstanceState::Running);
    }

    #[test]
    fn run_until_now_keeps_clock() {
        let mut c = cloud();
        run(&mut c, 15);
        c.schedule(15, ()).unwrap();
        let mut seen = 0;
        assert_eq!(c.run_until(15, &mut |_, _| seen += 1), 1);
        assert_eq!(seen, 1);
        assert_eq!(c.now(), 15);
        assert_eq!(c.schedule(14, ()), Err(PastEvent { at: 14, now: 15 }));
    }

    #[test]
    fn idle_and_loaded_samples() {
        let mut c = cloud();
        let a = launch(&mut c, "private").unwrap().instance_id;
        let b = launch(&mut c, "private").unwrap().instance_id;
        c.set_session_count(&b, 3);
        run(&mut c, 40);
        let idle = c.poll_metrics(&a).unwrap();
        assert_eq!((idle.cpu, idle.net_in, idle.net_out), (0.0, 0, 0));
        let loaded = c.poll_metrics(&b).unwrap();
        // oracle: min(1, 3 * 0.2)
        assert!((loaded.cpu - 0.6).abs() < 1e-12);
        c.set_session_count(&b, 7);
        run(&mut c, 50);
        assert_eq!(c.poll_metrics(&b).unwrap().cpu, 1.0);
    }

    #[test]
    fn polls_within_interval_are_identical() {
        let mut c = cloud();
        let a = launch(&mut c, "private").unwrap().instance_id;
        run(&mut c, 40);
        let s1 = c.poll_metrics(&a).unwrap();
        run(&mut c, 45);
        assert_eq!(c.poll_metrics(&a).unwrap(), s1);
        run(&mut c, 50);
        assert_ne!(c.poll_metrics(&a).unwrap().at, s1.at);
    }

    #[test]
    fn cpu_fault_shows_from_first_full_interval() {
        let mut c = cloud();
        let a = launch(&mut c, "private").unwrap().instance_id;
        run(&mut c, 100);
        c.inject_fault(FaultInjection {
            instance_id: a.clone(),
            kind: FaultKind::CpuSaturation,
            start: 100,
            duration: Some(30),
        })
        .unwrap();
        run(&mut c, 100);
        assert_eq!(c.poll_metrics(&a).unwrap().cpu, 0.0);
        for t in [110, 120, 130] {
            run(&mut c, t);
            assert_eq!(c.poll_metrics(&a).unwrap().cpu, 1.0, "t={t}");
        }
        run(&mut c, 140);
        assert_eq!(c.poll_metrics(&a).unwrap().cpu, 0.0);
    }

    #[test]
    fn blackhole_keeps_inbound_traffic() {
        let mut c = cloud();
        let a = launch(&mut c, "private").unwrap().instance_id;
        run(&mut c, 30);
        c.inject_fault(FaultInjection {
            instance_id: a.clone(),
            kind: FaultKind::NetworkBlackhole,
            start: 30,
            duration: None,
        })
        .unwrap();
        let req = ModelRequest {
            model_id: "topmodel-stub".into(),
            parameters: [("a".to_owned(), 1.0), ("b".to_owned(), 2.0)].into_iter().collect(),
            request_id: "r".into(),
        };
        c.deliver_request(&a, &req).unwrap();
        run(&mut c, 40);
        let s = c.poll_metrics(&a).unwrap();
        assert!(s.net_in > 0);
        assert_eq!(s.net_out, 0);
    }

    #[test]
    fn crash_is_silent_and_fails_polls() {
        let mut c = cloud();
        let a = launch(&mut c, "public").unwrap().instance_id;
        run(&mut c, 50);
        c.inject_fault(FaultInjection {
            instance_id: a.clone(),
            kind: FaultKind::Crash,
            start: 60,
            duration: None,
        })
        .unwrap();
        run(&mut c, 60);
        assert_eq!(c.instance(&a).unwrap().state, InstanceState::Terminated);
        assert_eq!(c.poll_metrics(&a), Err(ProviderError::NotRunning(a.clone())));
        assert_eq!(c.accrued_cost(), 1.0);
        assert!(matches!(
            c.inject_fault(FaultInjection {
                instance_id: "ghost".into(),
                kind: FaultKind::Crash,
                start: 0,
                duration: None
            }),
            Err(ProviderError::UnknownInstance(_))
        ));
    }

    #[test]
    fn listing_order_and_filters() {
        let mut c = cloud();
        assert!(c.list_instances(None).unwrap().is_empty());
        let a = launch(&mut c, "private").unwrap().instance_id;
        run(&mut c, 3);
        let b = launch(&mut c, "public").unwrap().instance_id;
        let all: Vec<_> = c
            .list_instances(None)
            .unwrap()
            .into_iter()
            .map(|r| r.instance_id)
            .collect();
        assert_eq!(all, [a.clone(), b]);
        assert_eq!(c.list_instances(Some(&"private".into())).unwrap().len(), 1);
        c.terminate(&a).unwrap();
        assert!(c.list_instances(Some(&"private".into())).unwrap().is_empty());
        assert_eq!(
            c.list_instances(Some(&"mars".into())),
            Err(ProviderError::UnknownProvider("mars".into()))
        );
    }

    #[test]
    fn state_history_follows_graph() {
        let mut c = cloud();
        let a = launch(&mut c, "private").unwrap().instance_id;
        run(&mut c, 30);
        c.set_state(&a, InstanceState::Degraded).unwrap();
        c.set_state(&a, InstanceState::Draining).unwrap();
        assert!(c.set_state(&a, InstanceState::Degraded).is_err());
        assert!(c.set_state(&a, InstanceState::Running).is_err());
        c.terminate(&a).unwrap();
        let states: Vec<_> = c.state_history(&a).iter().map(|(_, s)| *s).collect();
        use InstanceState::*;
        assert_eq!(states, [Pending, Running, Degraded, Draining, Terminated]);
        for w in states.windows(2) {
            assert!(w[0].can_transition_to(w[1]));
        }
    }

    #[test]
    fn instances_keep_their_launch_version() {
        let mut c = cloud();
        let old = launch(&mut c, "private").unwrap();
        let mut d = ImageDescriptor::new("topo", &["topmodel-stub"]);
        d.version = 2;
        c.publish_image(&d);
        let new = launch(&mut c, "private").unwrap();
        assert_eq!((old.image_version, new.image_version), (1, 2));
        assert_eq!(c.service(&old.instance_id).unwrap().health().version, 1);
    }

    #[test]
    fn teardown_leaves_nothing_live() {
        let mut c = cloud();
        launch(&mut c, "private").unwrap();
        launch(&mut c, "public").unwrap();
        run(&mut c, 100);
        assert_eq!(c.teardown(), 2);
        assert!(c.list_instances(None).unwrap().is_empty());
        assert!(c.all_instances().all(|r| r.terminate_time.is_some()));
    }
}
