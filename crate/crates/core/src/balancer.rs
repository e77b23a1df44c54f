//! Load Balancer: placement, health-driven replacement, reverse migration to
//! the private cloud and same-provider rebalancing.
//!
//! All decisions happen inside calls made by the infrastructure manager; the
//! balancer never reads state mid-mutation. Every decision is also appended
//! to an event log the caller drains into the trace.

use crate::broker::protocol::UpdateReason;
use crate::broker::{Broker, Placement, PlacementError, Placer, SessionCounts};
use crate::ids::{InstanceId, ModelId, ProviderId, Seconds, VirtualTime};
use crate::library::{ImageDescriptor, ModelClass, ModelLibrary};
use crate::provider::{
    CloudProvider, HealthSample, InstanceRecord, InstanceState, Labels, ProviderError, ProviderKind,
};
use crate::textfmt::{fmt_f64, keep, FieldError, Record};
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

/// Label a replacement instance carries, naming the instance it replaces.
pub const REPLACES_LABEL: &str = "replaces";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlacementPolicy {
    PrivateFirst,
    ModelClassRouting,
}

impl fmt::Display for PlacementPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PlacementPolicy::PrivateFirst => "private_first",
            PlacementPolicy::ModelClassRouting => "model_class_routing",
        })
    }
}

impl FromStr for PlacementPolicy {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "private_first" => Ok(PlacementPolicy::PrivateFirst),
            "model_class_routing" => Ok(PlacementPolicy::ModelClassRouting),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalancerConfig {
    pub monitor_interval: Seconds,
    pub cpu_high_threshold: f64,
    pub sustained_window: usize,
    /// Fraction of private session slots in use below which reverse
    /// migration kicks in.
    pub underuse_threshold: f64,
    pub migration_cooldown: Seconds,
    pub placement_policy: PlacementPolicy,
}

impl Default for BalancerConfig {
    fn default() -> Self {
        Self {
            monitor_interval: 10,
            cpu_high_threshold: 0.90,
            sustained_window: 5,
            underuse_threshold: 0.50,
            migration_cooldown: 120,
            placement_policy: PlacementPolicy::PrivateFirst,
        }
    }
}

impl BalancerConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.monitor_interval == 0 {
            out.push("monitor_interval must be positive".to_owned());
        }
        for (name, v) in [
            ("cpu_high", self.cpu_high_threshold),
            ("underuse", self.underuse_threshold),
        ] {
            if !(v > 0.0 && v < 1.0) {
                out.push(format!("{name} must lie strictly between 0 and 1, got {v}"));
            }
        }
        if self.sustained_window == 0 {
            out.push("window must be at least 1".to_owned());
        }
        out
    }

    /// `balancer monitor_interval=10 cpu_high=0.9 window=5 underuse=0.5 cooldown=120 policy=private_first`;
    /// absent fields keep their defaults.
    pub fn from_record(rec: &Record) -> Result<Self, Vec<FieldError>> {
        let mut errs = rec.check_fields(&[
            "monitor_interval",
            "cpu_high",
            "window",
            "underuse",
            "cooldown",
            "policy",
        ]);
        let d = Self::default();
        let cfg = Self {
            monitor_interval: keep(&mut errs, rec.parse_or("monitor_interval", d.monitor_interval))
                .unwrap_or(d.monitor_interval),
            cpu_high_threshold: keep(&mut errs, rec.parse_or("cpu_high", d.cpu_high_threshold))
                .unwrap_or(d.cpu_high_threshold),
            sustained_window: keep(&mut errs, rec.parse_or("window", d.sustained_window)).unwrap_or(d.sustained_window),
            underuse_threshold: keep(&mut errs, rec.parse_or("underuse", d.underuse_threshold))
                .unwrap_or(d.underuse_threshold),
            migration_cooldown: keep(&mut errs, rec.parse_or("cooldown", d.migration_cooldown))
                .unwrap_or(d.migration_cooldown),
            placement_policy: keep(&mut errs, rec.parse_or("policy", d.placement_policy)).unwrap_or(d.placement_policy),
        };
        errs.extend(cfg.problems().into_iter().map(|m| rec.error(m)));
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(errs)
        }
    }

    pub fn to_line(&self) -> String {
        format!(
            "balancer monitor_interval={} cpu_high={} window={} underuse={} cooldown={} policy={}",
            self.monitor_interval,
            fmt_f64(self.cpu_high_threshold),
            self.sustained_window,
            fmt_f64(self.underuse_threshold),
            self.migration_cooldown,
            self.placement_policy
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Rule {
    SustainedCpu,
    Blackhole,
    CrashDetected,
}

impl Rule {
    pub const ALL: [Rule; 3] = [Rule::SustainedCpu, Rule::Blackhole, Rule::CrashDetected];

    pub fn as_str(self) -> &'static str {
        match self {
            Rule::SustainedCpu => "sustained_cpu",
            Rule::Blackhole => "blackhole",
            Rule::CrashDetected => "crash_detected",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Evidence {
    Window(Vec<HealthSample>),
    PollFailure(ProviderError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DegradationVerdict {
    pub instance_id: InstanceId,
    pub rule: Rule,
    pub evidence: Evidence,
}

/// The window predicates, exposed so tests can check verdict soundness.
pub fn cpu_window_fires(window: &[HealthSample], threshold: f64, len: usize) -> bool {
    window.len() == len && window.iter().all(|s| s.cpu >= threshold)
}

pub fn blackhole_window_fires(window: &[HealthSample], len: usize) -> bool {
    window.len() == len && window.iter().all(|s| s.net_out == 0 && s.net_in > 0)
}

/// One decision, as logged for the trace and the metrics report.
#[derive(Debug, Clone, PartialEq)]
pub enum Decision {
    Placed {
        model: ModelId,
        instance: InstanceId,
        provider: ProviderId,
        launched: bool,
    },
    Saturated {
        model: ModelId,
    },
    PlacementFailed {
        model: ModelId,
    },
    Verdict(DegradationVerdict),
    ReplacementLaunched {
        old: InstanceId,
        new: InstanceId,
    },
    Migrated {
        session: crate::ids::SessionId,
        from: InstanceId,
        to: InstanceId,
        epoch: u64,
        reason: UpdateReason,
    },
    Retired {
        instance: InstanceId,
        why: &'static str,
    },
}

impl Decision {
    /// `(kind, subject, detail)` for a trace line.
    pub fn trace_fields(&self) -> (&'static str, String, String) {
        match self {
            Decision::Placed {
                model,
                instance,
                provider,
                launched,
            } => (
                "place",
                model.to_string(),
                format!(
                    "instance={instance} provider={provider} via={}",
                    if *launched { "launch" } else { "fill" }
                ),
            ),
            Decision::Saturated { model } => ("saturated", model.to_string(), "tier=private".into()),
            Decision::PlacementFailed { model } => ("placement_failed", model.to_string(), String::new()),
            Decision::Verdict(v) => {
                let detail = match &v.evidence {
                    Evidence::Window(w) => {
                        let cpu: Vec<String> = w.iter().map(|s| fmt_f64(s.cpu)).collect();
                        let out: Vec<String> = w.iter().map(|s| s.net_out.to_string()).collect();
                        format!("rule={} cpu={} net_out={}", v.rule, cpu.join(","), out.join(","))
                    }
                    Evidence::PollFailure(e) => format!("rule={} poll={e}", v.rule),
                };
                ("verdict", v.instance_id.to_string(), detail)
            }
            Decision::ReplacementLaunched { old, new } => ("replace", old.to_string(), format!("replacement={new}")),
            Decision::Migrated {
                session,
                from,
                to,
                epoch,
                reason,
            } => (
                "migrate",
                session.to_string(),
                format!("from={from} to={to} epoch={epoch} reason={}", reason.as_str()),
            ),
            Decision::Retired { instance, why } => ("retire", instance.to_string(), format!("why={why}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Replacement {
    new: InstanceId,
    rule: Rule,
}

pub struct Balancer {
    config: BalancerConfig,
    windows: BTreeMap<InstanceId, VecDeque<HealthSample>>,
    /// Degraded instance -> replacement still booting.
    replacements: BTreeMap<InstanceId, Replacement>,
    last_reverse: Option<VirtualTime>,
    log: Vec<Decision>,
}

fn max_sessions_of(library: &ModelLibrary, rec: &InstanceRecord) -> u32 {
    library
        .image_version(&rec.image_id, rec.image_version)
        .or_else(|| library.image(&rec.image_id))
        .map_or(1, |d| d.max_sessions)
}

fn serves(library: &ModelLibrary, rec: &InstanceRecord, model: &ModelId) -> bool {
    library
        .image_version(&rec.image_id, rec.image_version)
        .is_some_and(|d| d.model_ids.contains(model))
}

fn accepts_sessions(state: InstanceState) -> bool {
    matches!(state, InstanceState::Pending | InstanceState::Running)
}

impl Balancer {
    pub fn new(config: BalancerConfig) -> Self {
        Self {
            config,
            windows: BTreeMap::new(),
            replacements: BTreeMap::new(),
            last_reverse: None,
            log: Vec::new(),
        }
    }

    /// A balancer taking over after a manager restart at `now`: pending
    /// replacements are rediscovered from instance labels and the cooldown
    /// restarts.
    pub fn resume<C: CloudProvider + ?Sized>(config: BalancerConfig, cloud: &C, now: VirtualTime) -> Self {
        let mut b = Self::new(config);
        b.last_reverse = Some(now);
        for rec in cloud.list_instances(None).unwrap_or_default() {
            let Some(old) = rec.labels.get(REPLACES_LABEL) else {
                continue;
            };
            let old = InstanceId::from(old.as_str());
            if cloud.instance(&old).is_some_and(|o| o.state == InstanceState::Degraded) {
                b.replacements.insert(
                    old,
                    Replacement {
                        new: rec.instance_id.clone(),
                        rule: Rule::SustainedCpu,
                    },
                );
            }
        }
        b
    }

    pub fn config(&self) -> &BalancerConfig {
        &self.config
    }

    pub fn drain_log(&mut self) -> Vec<Decision> {
        std::mem::take(&mut self.log)
    }

    /// Degraded instance -> its booting replacement.
    pub fn pending_replacements(&self) -> impl Iterator<Item = (&InstanceId, &InstanceId)> {
        self.replacements.iter().map(|(o, r)| (o, &r.new))
    }

    fn tiers<C: CloudProvider + ?Sized>(&self, cloud: &C, kind: ProviderKind) -> Vec<ProviderId> {
        cloud
            .providers()
            .iter()
            .filter(|p| p.kind == kind)
            .map(|p| p.provider_id.clone())
            .collect()
    }

    /// Provider groups tried in order for `image`: each group is one tier.
    fn tier_order<C: CloudProvider + ?Sized>(
        &self,
        cloud: &C,
        image: &ImageDescriptor,
    ) -> Vec<(ProviderKind, Vec<ProviderId>)> {
        let private = (ProviderKind::Private, self.tiers(cloud, ProviderKind::Private));
        let public = (ProviderKind::Public, self.tiers(cloud, ProviderKind::Public));
        match (self.config.placement_policy, image.model_class) {
            (PlacementPolicy::ModelClassRouting, ModelClass::Streamlined) => vec![public],
            _ => vec![private, public],
        }
    }

    /// Whether `image` may live on the private tier under the current policy.
    fn private_allowed(&self, image: &ImageDescriptor) -> bool {
        !(self.config.placement_policy == PlacementPolicy::ModelClassRouting
            && image.model_class == ModelClass::Streamlined)
    }

    /// Fill step: the least-loaded instance of `image` on `provider` with a
    /// free slot.
    fn fill_candidate<C: CloudProvider + ?Sized>(
        &self,
        cloud: &C,
        library: &ModelLibrary,
        sessions: &dyn SessionCounts,
        provider: &ProviderId,
        model: &ModelId,
        image: &ImageDescriptor,
    ) -> Option<InstanceRecord> {
        let booting_replacements: BTreeSet<&InstanceId> = self.replacements.values().map(|r| &r.new).collect();
        cloud
            .list_instances(Some(provider))
            .unwrap_or_default()
            .into_iter()
            .filter(|r| {
                r.image_id == image.image_id
                    && accepts_sessions(r.state)
                    && serves(library, r, model)
                    && !booting_replacements.contains(&r.instance_id)
                    && sessions.session_count(&r.instance_id) < max_sessions_of(library, r)
            })
            .min_by(|a, b| {
                let ka = (sessions.session_count(&a.instance_id), &a.instance_id);
                let kb = (sessions.session_count(&b.instance_id), &b.instance_id);
                ka.cmp(&kb)
            })
    }

    fn try_launch<C: CloudProvider + ?Sized>(
        &self,
        cloud: &mut C,
        provider: &ProviderId,
        image: &ImageDescriptor,
        labels: Labels,
    ) -> Option<InstanceRecord> {
        if cloud.free_capacity(provider) == Some(0) {
            return None;
        }
        cloud.launch(provider, &image.image_id, labels).ok()
    }

    /// Fill-then-launch over one tier.
    fn place_on_tier<C: CloudProvider + ?Sized>(
        &mut self,
        cloud: &mut C,
        library: &ModelLibrary,
        sessions: &dyn SessionCounts,
        providers: &[ProviderId],
        model: &ModelId,
        image: &ImageDescriptor,
    ) -> Option<(InstanceRecord, bool)> {
        for p in providers {
            if let Some(r) = self.fill_candidate(cloud, library, sessions, p, model, image) {
                return Some((r, false));
            }
        }
        for p in providers {
            if let Some(r) = self.try_launch(cloud, p, image, Labels::new()) {
                return Some((r, true));
            }
        }
        None
    }

    /// Chooses (and if need be launches) the instance for a new session.
    pub fn place<C: CloudProvider + ?Sized>(
        &mut self,
        cloud: &mut C,
        library: &ModelLibrary,
        sessions: &dyn SessionCounts,
        model: &ModelId,
    ) -> Result<Placement, PlacementError> {
        let image = library
            .resolve(model)
            .map_err(|_| PlacementError::UnknownModel(model.clone()))?
            .clone();
        for (kind, providers) in self.tier_order(cloud, &image) {
            if let Some((rec, launched)) = self.place_on_tier(cloud, library, sessions, &providers, model, &image) {
                self.log.push(Decision::Placed {
                    model: model.clone(),
                    instance: rec.instance_id.clone(),
                    provider: rec.provider_id.clone(),
                    launched,
                });
                return Ok(Placement {
                    instance_id: rec.instance_id,
                    address: rec.address,
                });
            }
            if kind == ProviderKind::Private {
                self.log.push(Decision::Saturated { model: model.clone() });
            }
        }
        self.log.push(Decision::PlacementFailed { model: model.clone() });
        Err(PlacementError::PlacementFailed(model.clone()))
    }

    /// Adapter handing this balancer to the broker as its [`Placer`].
    pub fn placer<'a, C: CloudProvider + ?Sized>(
        &'a mut self,
        cloud: &'a mut C,
        library: &'a ModelLibrary,
    ) -> BalancerPlacer<'a, C> {
        BalancerPlacer {
            balancer: self,
            cloud,
            library,
        }
    }

    /// One monitoring round: poll, judge, replace, then reverse-migrate,
    /// rebalance and retire idle instances.
    pub fn monitor_tick<C: CloudProvider + ?Sized>(
        &mut self,
        cloud: &mut C,
        library: &ModelLibrary,
        broker: &mut Broker,
        now: VirtualTime,
    ) -> Vec<DegradationVerdict> {
        let verdicts = self.judge(cloud, broker);
        for v in &verdicts {
            self.log.push(Decision::Verdict(v.clone()));
            // a failed replacement leaves the instance as is; the verdict fires again next tick
            let _ = self.replace_instance(cloud, library, broker, now, v);
        }
        self.complete_replacements(cloud, library, broker, now);
        self.reverse_migrate(cloud, library, broker, now);
        self.rebalance(cloud, broker, now);
        self.retire_idle(cloud, broker);
        verdicts
    }

    fn judge<C: CloudProvider + ?Sized>(&mut self, cloud: &mut C, broker: &Broker) -> Vec<DegradationVerdict> {
        let mut poll_set: BTreeSet<InstanceId> = cloud
            .list_instances(None)
            .unwrap_or_default()
            .into_iter()
            .map(|r| r.instance_id)
            .collect();
        poll_set.extend(broker.referenced_instances().cloned());
        let window_len = self.config.sustained_window;
        let mut verdicts = Vec::new();
        for id in poll_set {
            match cloud.poll_metrics(&id) {
                Ok(sample) => {
                    let w = self.windows.entry(id.clone()).or_default();
                    if w.back().is_none_or(|last| last.at < sample.at) {
                        w.push_back(sample);
                        while w.len() > window_len {
                            w.pop_front();
                        }
                    }
                    let state = cloud.instance(&id).map(|r| r.state);
                    if state != Some(InstanceState::Running) {
                        continue;
                    }
                    let w: Vec<HealthSample> = w.iter().copied().collect();
                    let rule = if cpu_window_fires(&w, self.config.cpu_high_threshold, window_len) {
                        Some(Rule::SustainedCpu)
                    } else if blackhole_window_fires(&w, window_len) {
                        Some(Rule::Blackhole)
                    } else {
                        None
                    };
                    if let Some(rule) = rule {
                        verdicts.push(DegradationVerdict {
                            instance_id: id,
                            rule,
                            evidence: Evidence::Window(w),
                        });
                    }
                }
                Err(e) => {
                    self.windows.remove(&id);
                    let gone = cloud.instance(&id).is_none_or(|r| r.state == InstanceState::Terminated);
                    if gone && broker.session_count(&id) > 0 {
                        verdicts.push(DegradationVerdict {
                            instance_id: id,
                            rule: Rule::CrashDetected,
                            evidence: Evidence::PollFailure(e),
                        });
                    }
                }
            }
        }
        verdicts
    }

    fn migrate<C: CloudProvider + ?Sized>(
        &mut self,
        cloud: &C,
        broker: &mut Broker,
        now: VirtualTime,
        session: &crate::ids::SessionId,
        target: &InstanceId,
        reason: UpdateReason,
    ) -> bool {
        let Some(rec) = cloud.instance(target) else {
            return false;
        };
        let from = match broker.session(session) {
            Some(s) => s.instance_id.clone(),
            None => return false,
        };
        match broker.push_update(now, session, rec, reason) {
            Ok(u) => {
                self.log.push(Decision::Migrated {
                    session: session.clone(),
                    from,
                    to: target.clone(),
                    epoch: u.epoch,
                    reason,
                });
                true
            }
            Err(_) => false,
        }
    }

    fn retire<C: CloudProvider + ?Sized>(&mut self, cloud: &mut C, id: &InstanceId, why: &'static str) {
        let Some(state) = cloud.instance(id).map(|r| r.state) else {
            return;
        };
        if !state.is_live() {
            return;
        }
        if state != InstanceState::Draining && state != InstanceState::Pending {
            let _ = cloud.set_state(id, InstanceState::Draining);
        }
        if cloud.terminate(id).is_ok() {
            self.windows.remove(id);
            self.log.push(Decision::Retired {
                instance: id.clone(),
                why,
            });
        }
    }

    /// Launches the replacement for a verdict's subject. Crash verdicts move
    /// their sessions at once; the others wait for the replacement to boot.
    /// Returns the replacement and how many sessions moved now.
    pub fn replace_instance<C: CloudProvider + ?Sized>(
        &mut self,
        cloud: &mut C,
        library: &ModelLibrary,
        broker: &mut Broker,
        now: VirtualTime,
        verdict: &DegradationVerdict,
    ) -> Result<(Option<InstanceId>, usize), PlacementError> {
        let old_id = &verdict.instance_id;
        let old = cloud.instance(old_id).cloned();
        let old_state = old.as_ref().map(|r| r.state);
        if old_state == Some(InstanceState::Draining) {
            return Ok((None, 0));
        }
        let affected = broker.sessions_on(old_id);
        if affected.is_empty() {
            self.retire(cloud, old_id, "degraded_idle");
            return Ok((None, 0));
        }
        let model_of_first = broker
            .session(&affected[0])
            .map(|s| s.model_id.clone())
            .unwrap_or_else(|| ModelId::from(""));
        let image = old
            .as_ref()
            .and_then(|r| library.image(&r.image_id))
            .or_else(|| {
                broker
                    .session(&affected[0])
                    .and_then(|s| library.resolve(&s.model_id).ok())
            })
            .cloned()
            .ok_or_else(|| PlacementError::UnknownModel(model_of_first.clone()))?;

        let existing = self
            .replacements
            .get(old_id)
            .map(|r| r.new.clone())
            .filter(|n| cloud.instance(n).is_some_and(|r| accepts_sessions(r.state)));
        let new_id = match existing {
            Some(n) => n,
            None => {
                let Some(rec) = self.launch_replacement(cloud, old.as_ref(), old_id, &image) else {
                    self.log.push(Decision::PlacementFailed {
                        model: model_of_first.clone(),
                    });
                    return Err(PlacementError::PlacementFailed(model_of_first));
                };
                self.log.push(Decision::ReplacementLaunched {
                    old: old_id.clone(),
                    new: rec.instance_id.clone(),
                });
                rec.instance_id
            }
        };

        if verdict.rule == Rule::CrashDetected {
            self.replacements.remove(old_id);
            let mut moved = 0;
            for s in &affected {
                if self.migrate(cloud, broker, now, s, &new_id, UpdateReason::DegradationReplacement) {
                    moved += 1;
                }
            }
            return Ok((Some(new_id), moved));
        }
        if old_state == Some(InstanceState::Running) {
            let _ = cloud.set_state(old_id, InstanceState::Degraded);
        }
        self.replacements.insert(
            old_id.clone(),
            Replacement {
                new: new_id.clone(),
                rule: verdict.rule,
            },
        );
        Ok((Some(new_id), 0))
    }

    /// Same tier as the old instance, falling back to the public tier.
    fn launch_replacement<C: CloudProvider + ?Sized>(
        &self,
        cloud: &mut C,
        old: Option<&InstanceRecord>,
        old_id: &InstanceId,
        image: &ImageDescriptor,
    ) -> Option<InstanceRecord> {
        let mut order: Vec<ProviderId> = Vec::new();
        if let Some(o) = old {
            order.push(o.provider_id.clone());
        }
        for (_, tier) in self.tier_order(cloud, image) {
            for p in tier {
                if !order.contains(&p) {
                    order.push(p);
                }
            }
        }
        let labels: Labels = [(REPLACES_LABEL.to_owned(), old_id.to_string())].into_iter().collect();
        order
            .iter()
            .find_map(|p| self.try_launch(cloud, p, image, labels.clone()))
    }

    fn complete_replacements<C: CloudProvider + ?Sized>(
        &mut self,
        cloud: &mut C,
        library: &ModelLibrary,
        broker: &mut Broker,
        now: VirtualTime,
    ) {
        let pending: Vec<(InstanceId, Replacement)> =
            self.replacements.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        for (old, rep) in pending {
            let new_state = cloud.instance(&rep.new).map(|r| r.state);
            match new_state {
                Some(InstanceState::Running) => {
                    self.replacements.remove(&old);
                    for s in broker.sessions_on(&old) {
                        self.migrate(cloud, broker, now, &s, &rep.new, UpdateReason::DegradationReplacement);
                    }
                    if broker.session_count(&old) == 0 {
                        self.retire(cloud, &old, "replaced");
                    } else if cloud.instance(&old).is_some_and(|r| r.state == InstanceState::Degraded) {
                        let _ = cloud.set_state(&old, InstanceState::Draining);
                    }
                }
                Some(InstanceState::Pending) => {}
                _ => {
                    // the replacement died before booting: start over
                    self.replacements.remove(&old);
                    let v = DegradationVerdict {
                        instance_id: old.clone(),
                        rule: rep.rule,
                        evidence: Evidence::Window(Vec::new()),
                    };
                    if self.replace_instance(cloud, library, broker, now, &v).is_err() {
                        self.replacements.insert(old, rep);
                    }
                }
            }
        }
    }

    /// Slots on the private tier: `(used, total)`, where total counts the
    /// slots of live private instances plus what free launch capacity would
    /// add for an instance of `image`.
    pub fn private_occupancy<C: CloudProvider + ?Sized>(
        &self,
        cloud: &C,
        library: &ModelLibrary,
        sessions: &dyn SessionCounts,
        image: &ImageDescriptor,
    ) -> (u64, u64) {
        let mut used = 0u64;
        let mut total = 0u64;
        for p in self.tiers(cloud, ProviderKind::Private) {
            for r in cloud.list_instances(Some(&p)).unwrap_or_default() {
                if !accepts_sessions(r.state) && r.state != InstanceState::Degraded {
                    continue;
                }
                used += u64::from(sessions.session_count(&r.instance_id));
                total += u64::from(max_sessions_of(library, &r));
            }
            let free = cloud.free_capacity(&p).unwrap_or(0) as u64;
            total += free * u64::from(image.max_sessions);
        }
        (used, total)
    }

    /// Moves the sessions of the least-loaded public instance back to the
    /// private tier when private slots are underused.
    pub fn reverse_migrate<C: CloudProvider + ?Sized>(
        &mut self,
        cloud: &mut C,
        library: &ModelLibrary,
        broker: &mut Broker,
        now: VirtualTime,
    ) -> usize {
        if self
            .last_reverse
            .is_some_and(|t| now < t + self.config.migration_cooldown)
        {
            return 0;
        }
        let private = self.tiers(cloud, ProviderKind::Private);
        let public = self.tiers(cloud, ProviderKind::Public);
        let images: Vec<ImageDescriptor> = library.list_images().into_iter().cloned().collect();
        for image in images {
            if !self.private_allowed(&image) {
                continue;
            }
            let (used, total) = self.private_occupancy(cloud, library, &*broker, &image);
            if total == 0 || (used as f64) / (total as f64) >= self.config.underuse_threshold {
                continue;
            }
            let victim = public
                .iter()
                .flat_map(|p| cloud.list_instances(Some(p)).unwrap_or_default())
                .filter(|r| r.image_id == image.image_id && r.state == InstanceState::Running)
                .map(|r| (broker.session_count(&r.instance_id), r.instance_id))
                .filter(|(n, _)| *n > 0)
                .min();
            let Some((n, victim)) = victim else { continue };

            // can the private tier host all of them?
            let mut room = 0u64;
            for p in &private {
                for r in cloud.list_instances(Some(p)).unwrap_or_default() {
                    if r.image_id == image.image_id && accepts_sessions(r.state) {
                        room += u64::from(
                            max_sessions_of(library, &r).saturating_sub(broker.session_count(&r.instance_id)),
                        );
                    }
                }
                room += cloud.free_capacity(p).unwrap_or(0) as u64 * u64::from(image.max_sessions);
            }
            if room < u64::from(n) {
                continue;
            }
            let mut moved = 0;
            for s in broker.sessions_on(&victim) {
                let Some(model) = broker.session(&s).map(|x| x.model_id.clone()) else {
                    continue;
                };
                let Some((target, launched)) = self.place_on_tier(cloud, library, &*broker, &private, &model, &image)
                else {
                    break;
                };
                self.log.push(Decision::Placed {
                    model,
                    instance: target.instance_id.clone(),
                    provider: target.provider_id.clone(),
                    launched,
                });
                if self.migrate(
                    cloud,
                    broker,
                    now,
                    &s,
                    &target.instance_id,
                    UpdateReason::ReverseMigration,
                ) {
                    moved += 1;
                }
            }
            if broker.session_count(&victim) == 0 {
                self.retire(cloud, &victim, "reverse_migrated");
            }
            if moved > 0 {
                self.last_reverse = Some(now);
                return moved;
            }
        }
        0
    }

    /// At most one move per image per call, fullest to emptiest, within one
    /// provider.
    pub fn rebalance<C: CloudProvider + ?Sized>(
        &mut self,
        cloud: &mut C,
        broker: &mut Broker,
        now: VirtualTime,
    ) -> usize {
        let mut by_image: BTreeMap<_, BTreeMap<ProviderId, Vec<InstanceId>>> = BTreeMap::new();
        for r in cloud.list_instances(None).unwrap_or_default() {
            if r.state == InstanceState::Running && !self.replacements.values().any(|x| x.new == r.instance_id) {
                by_image
                    .entry(r.image_id.clone())
                    .or_default()
                    .entry(r.provider_id.clone())
                    .or_default()
                    .push(r.instance_id);
            }
        }
        let mut moved = 0;
        for (_, providers) in by_image {
            for (_, group) in providers {
                if group.len() < 2 {
                    continue;
                }
                let count = |id: &InstanceId| broker.session_count(id);
                let fullest = group
                    .iter()
                    .max_by(|a, b| count(a).cmp(&count(b)).then_with(|| b.cmp(a)))
                    .unwrap()
                    .clone();
                let emptiest = group
                    .iter()
                    .min_by(|a, b| count(a).cmp(&count(b)).then_with(|| a.cmp(b)))
                    .unwrap()
                    .clone();
                if count(&fullest) < count(&emptiest) + 2 {
                    continue;
                }
                let session = broker.sessions_on(&fullest).pop().expect("fullest has sessions");
                if self.migrate(cloud, broker, now, &session, &emptiest, UpdateReason::Rebalance) {
                    moved += 1;
                    break;
                }
            }
        }
        moved
    }

    /// Terminates empty draining instances and empty public ones. Idle
    /// private instances stay up: they cost nothing.
    pub fn retire_idle<C: CloudProvider + ?Sized>(&mut self, cloud: &mut C, broker: &Broker) {
        let replacements: BTreeSet<InstanceId> = self
            .replacements
            .iter()
            .flat_map(|(o, r)| [o.clone(), r.new.clone()])
            .collect();
        for r in cloud.list_instances(None).unwrap_or_default() {
            if replacements.contains(&r.instance_id) || broker.session_count(&r.instance_id) > 0 {
                continue;
            }
            let public = cloud
                .provider(&r.provider_id)
                .is_some_and(|p| p.kind == ProviderKind::Public);
            match r.state {
                InstanceState::Draining => self.retire(cloud, &r.instance_id, "drained"),
                InstanceState::Running if public => self.retire(cloud, &r.instance_id, "idle_public"),
                _ => {}
            }
        }
    }

    /// Reaction to a session ending on `instance`.
    pub fn on_session_end<C: CloudProvider + ?Sized>(
        &mut self,
        cloud: &mut C,
        library: &ModelLibrary,
        broker: &mut Broker,
        now: VirtualTime,
    ) -> usize {
        let moved = self.reverse_migrate(cloud, library, broker, now);
        self.retire_idle(cloud, broker);
        moved
    }
}

pub struct BalancerPlacer<'a, C: CloudProvider + ?Sized> {
    balancer: &'a mut Balancer,
    cloud: &'a mut C,
    library: &'a ModelLibrary,
}

impl<C: CloudProvider + ?Sized> Placer for BalancerPlacer<'_, C> {
    fn place(&mut self, model: &ModelId, sessions: &dyn SessionCounts) -> Result<Placement, PlacementError> {
        self.balancer.place(self.cloud, self.library, sessions, model)
    }
}
