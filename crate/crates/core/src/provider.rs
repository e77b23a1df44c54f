//! Cross-cloud provider abstraction.
//!
//! The broker and balancer talk to every cloud through [`CloudProvider`]; they
//! never learn which backend sits behind it. The only backend shipped here is
//! the deterministic [`SimCloud`](crate::sim::SimCloud).

use crate::ids::{ImageId, InstanceId, ProviderId, Seconds, VirtualTime};
use crate::textfmt::{fmt_f64, keep, parse_document, FieldError, Record};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

pub const CATALOG_HEADER: &str = "evop-providers v1";

/// One billing granularity unit used by default: a virtual hour.
pub const HOUR: Seconds = 3600;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Private,
    Public,
}

impl fmt::Display for ProviderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProviderKind::Private => "private",
            ProviderKind::Public => "public",
        })
    }
}

impl FromStr for ProviderKind {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "private" => Ok(ProviderKind::Private),
            "public" => Ok(ProviderKind::Public),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderDescriptor {
    pub provider_id: ProviderId,
    pub kind: ProviderKind,
    /// Maximum concurrent non-terminated instances; `None` means elastic.
    pub capacity: Option<u32>,
    /// Currency units per instance-hour.
    pub cost_rate: f64,
    pub billing_granularity: Seconds,
    pub boot_time: Seconds,
}

impl ProviderDescriptor {
    pub fn private(id: &str, capacity: u32) -> Self {
        Self {
            provider_id: id.into(),
            kind: ProviderKind::Private,
            capacity: Some(capacity),
            cost_rate: 0.0,
            billing_granularity: HOUR,
            boot_time: 30,
        }
    }

    pub fn public(id: &str) -> Self {
        Self {
            provider_id: id.into(),
            kind: ProviderKind::Public,
            capacity: None,
            cost_rate: 1.0,
            billing_granularity: HOUR,
            boot_time: 30,
        }
    }

    /// Checks the per-descriptor invariants. A bounded public provider is only
    /// accepted when `allow_bounded_public` is set (used to provoke total
    /// saturation in tests).
    pub fn validate(&self, allow_bounded_public: bool) -> Vec<String> {
        let mut errs = Vec::new();
        let id = &self.provider_id;
        if id.as_str().is_empty() {
            errs.push("provider id is empty".to_owned());
        }
        match (self.kind, self.capacity) {
            (ProviderKind::Private, None) => errs.push(format!("private provider {id} must declare a capacity")),
            (ProviderKind::Public, Some(_)) if !allow_bounded_public => errs.push(format!(
                "public provider {id} is elastic and must not declare a capacity"
            )),
            _ => {}
        }
        if self.capacity == Some(0) {
            errs.push(format!("provider {id} capacity must be positive"));
        }
        if !(self.cost_rate.is_finite() && self.cost_rate >= 0.0) {
            errs.push(format!("provider {id} cost_rate must be a non-negative number"));
        }
        if self.billing_granularity == 0 {
            errs.push(format!("provider {id} billing granularity must be positive"));
        }
        errs
    }

    /// Charge for an instance that has been alive for `elapsed` seconds.
    pub fn charge(&self, elapsed: Seconds) -> f64 {
        billed_cost(elapsed, self.billing_granularity, self.cost_rate)
    }

    pub fn from_record(rec: &Record) -> Result<Self, Vec<FieldError>> {
        let mut errs = rec.check_fields(&["kind", "capacity", "test_capacity", "cost_rate", "billing", "boot"]);
        let id = match rec.positional(0, "a provider id") {
            Ok(id) => id.to_owned(),
            Err(e) => {
                errs.push(e);
                String::new()
            }
        };
        let kind: Option<ProviderKind> = keep(&mut errs, rec.parse_required("kind"));
        let capacity: Option<Option<u32>> = keep(&mut errs, rec.parse_opt("capacity"));
        let test_capacity: Option<Option<u32>> = keep(&mut errs, rec.parse_opt("test_capacity"));
        let default_rate = if kind == Some(ProviderKind::Private) { 0.0 } else { 1.0 };
        let cost_rate = keep(&mut errs, rec.parse_or("cost_rate", default_rate));
        let billing = keep(&mut errs, rec.parse_or("billing", HOUR));
        let boot = keep(&mut errs, rec.parse_or("boot", 30));
        let (Some(kind), Some(capacity), Some(test_capacity), Some(cost_rate), Some(billing), Some(boot)) =
            (kind, capacity, test_capacity, cost_rate, billing, boot)
        else {
            return Err(errs);
        };
        if !errs.is_empty() {
            return Err(errs);
        }
        let desc = Self {
            provider_id: ProviderId(id),
            kind,
            capacity: capacity.or(test_capacity),
            cost_rate,
            billing_granularity: billing,
            boot_time: boot,
        };
        let problems = desc.validate(test_capacity.is_some() && kind == ProviderKind::Public);
        if problems.is_empty() {
            Ok(desc)
        } else {
            Err(problems.into_iter().map(|p| rec.error(p)).collect())
        }
    }

    pub fn to_line(&self) -> String {
        let mut s = format!("provider {} kind={}", self.provider_id, self.kind);
        if let Some(c) = self.capacity {
            let key = match self.kind {
                ProviderKind::Private => "capacity",
                ProviderKind::Public => "test_capacity",
            };
            s.push_str(&format!(" {key}={c}"));
        }
        s.push_str(&format!(
            " cost_rate={} billing={} boot={}",
            fmt_f64(self.cost_rate),
            self.billing_granularity,
            self.boot_time
        ));
        s
    }
}

/// Billing rule: charge whole granularity periods, rounding the elapsed time
/// up, with a minimum of one period for any launched instance.
pub fn billed_cost(elapsed: Seconds, granularity: Seconds, rate_per_hour: f64) -> f64 {
    let periods = elapsed.div_ceil(granularity).max(1);
    periods as f64 * granularity as f64 / HOUR as f64 * rate_per_hour
}

/// Catalog-level checks on top of per-descriptor validation.
pub fn validate_catalog(providers: &[ProviderDescriptor]) -> Vec<String> {
    let mut errs = Vec::new();
    let mut seen = BTreeMap::new();
    for p in providers {
        if seen.insert(p.provider_id.clone(), ()).is_some() {
            errs.push(format!("duplicate provider id {}", p.provider_id));
        }
    }
    let zero_rated = providers.iter().filter(|p| p.cost_rate == 0.0).count();
    if zero_rated > 1 {
        errs.push(format!(
            "{zero_rated} providers have cost_rate 0; at most one (the owned private cloud) may"
        ));
    }
    errs
}

/// Reads a standalone provider catalog file.
pub fn parse_catalog(text: &str) -> Result<Vec<ProviderDescriptor>, Vec<FieldError>> {
    let records = parse_document(text, CATALOG_HEADER)?;
    let mut errs = Vec::new();
    let mut out = Vec::new();
    for rec in &records {
        if rec.keyword != "provider" {
            errs.push(rec.error(format!("unexpected `{}` record in provider catalog", rec.keyword)));
            continue;
        }
        match ProviderDescriptor::from_record(rec) {
            Ok(p) => out.push(p),
            Err(e) => errs.extend(e),
        }
    }
    errs.extend(
        validate_catalog(&out)
            .into_iter()
            .map(|m| FieldError { line: 0, message: m }),
    );
    if errs.is_empty() {
        Ok(out)
    } else {
        Err(errs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceState {
    Pending,
    Running,
    Degraded,
    Draining,
    Terminated,
}

impl InstanceState {
    /// The lifecycle graph. Any live state may be terminated (crashes and
    /// early termination of a pending instance); nothing leaves `Terminated`.
    pub fn can_transition_to(self, to: InstanceState) -> bool {
        use InstanceState::*;
        matches!(
            (self, to),
            (Pending, Running)
                | (Running, Degraded)
                | (Running, Draining)
                | (Degraded, Draining)
                | (Pending | Running | Degraded | Draining, Terminated)
        )
    }

    pub fn is_live(self) -> bool {
        self != InstanceState::Terminated
    }

    /// States in which the instance can be polled for metrics.
    pub fn is_observable(self) -> bool {
        matches!(
            self,
            InstanceState::Running | InstanceState::Degraded | InstanceState::Draining
        )
    }
}

impl fmt::Display for InstanceState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InstanceState::Pending => "pending",
            InstanceState::Running => "running",
            InstanceState::Degraded => "degraded",
            InstanceState::Draining => "draining",
            InstanceState::Terminated => "terminated",
        })
    }
}

/// CPU, disk and network statistics for one monitoring interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HealthSample {
    pub at: VirtualTime,
    pub cpu: f64,
    pub disk_read: u64,
    pub disk_write: u64,
    pub net_in: u64,
    pub net_out: u64,
}

impl HealthSample {
    pub fn idle(at: VirtualTime) -> Self {
        Self {
            at,
            cpu: 0.0,
            disk_read: 0,
            disk_write: 0,
            net_in: 0,
            net_out: 0,
        }
    }

    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.cpu)
    }
}

/// Free-form key/value tags attached at launch, readable by any later manager.
pub type Labels = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub instance_id: InstanceId,
    pub provider_id: ProviderId,
    pub image_id: ImageId,
    pub image_version: u32,
    pub address: String,
    pub state: InstanceState,
    pub launch_time: VirtualTime,
    pub terminate_time: Option<VirtualTime>,
    pub last_sample: Option<HealthSample>,
    pub labels: Labels,
}

impl InstanceRecord {
    pub fn is_live(&self) -> bool {
        self.state.is_live()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TerminationAck {
    pub instance_id: InstanceId,
    pub at: VirtualTime,
    /// Final charge for the instance's whole lifetime.
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProviderError {
    #[error("provider {0} is at capacity")]
    CapacityExceeded(ProviderId),
    #[error("unknown image {0}")]
    UnknownImage(ImageId),
    #[error("unknown provider {0}")]
    UnknownProvider(ProviderId),
    #[error("unknown instance {0}")]
    UnknownInstance(InstanceId),
    #[error("instance {0} is already terminated")]
    AlreadyTerminated(InstanceId),
    #[error("instance {0} is not running")]
    NotRunning(InstanceId),
    #[error("instance {id} cannot move from {from} to {to}")]
    InvalidTransition {
        id: InstanceId,
        from: InstanceState,
        to: InstanceState,
    },
}

/// What the broker and balancer may ask of any cloud.
///
/// Every call is atomic with respect to every other.
pub trait CloudProvider {
    fn now(&self) -> VirtualTime;

    fn providers(&self) -> &[ProviderDescriptor];

    fn provider(&self, id: &ProviderId) -> Option<&ProviderDescriptor> {
        self.providers().iter().find(|p| &p.provider_id == id)
    }

    /// Starts a new instance in `Pending`. It counts against capacity at once.
    fn launch(
        &mut self,
        provider: &ProviderId,
        image: &ImageId,
        labels: Labels,
    ) -> Result<InstanceRecord, ProviderError>;

    fn terminate(&mut self, instance: &InstanceId) -> Result<TerminationAck, ProviderError>;

    /// Latest completed-interval sample of a running, degraded or draining
    /// instance.
    fn poll_metrics(&mut self, instance: &InstanceId) -> Result<HealthSample, ProviderError>;

    /// Non-terminated instances ordered by launch time then id.
    fn list_instances(&self, provider: Option<&ProviderId>) -> Result<Vec<InstanceRecord>, ProviderError>;

    /// Any instance ever launched, terminated ones included.
    fn instance(&self, instance: &InstanceId) -> Option<&InstanceRecord>;

    /// Marks a live instance degraded or draining.
    fn set_state(&mut self, instance: &InstanceId, to: InstanceState) -> Result<(), ProviderError>;

    /// Total charge accrued so far across all providers.
    fn accrued_cost(&self) -> f64;

    fn live_count(&self, provider: &ProviderId) -> usize {
        self.list_instances(Some(provider)).map(|v| v.len()).unwrap_or(0)
    }

    /// Remaining launch slots on `provider`; `None` when elastic.
    fn free_capacity(&self, provider: &ProviderId) -> Option<usize> {
        let cap = self.provider(provider)?.capacity? as usize;
        Some(cap.saturating_sub(self.live_count(provider)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textfmt::parse_line;

    #[test]
    fn billing_rounds_up_to_granularity() {
        // 61 minutes at 1.0/h with hourly periods: two periods.
        assert_eq!(billed_cost(61 * 60, HOUR, 1.0), 2.0);
        assert_eq!(billed_cost(HOUR, HOUR, 1.0), 1.0);
        assert_eq!(billed_cost(HOUR + 1, HOUR, 1.0), 2.0);
        // minimum charge of one period
        assert_eq!(billed_cost(0, HOUR, 1.0), 1.0);
        assert_eq!(billed_cost(10, HOUR, 0.0), 0.0);
        // 15-minute granularity, 20 minutes alive: two quarter-hour periods
        assert_eq!(billed_cost(20 * 60, 900, 2.0), 1.0);
    }

    #[test]
    fn transition_graph() {
        use InstanceState::*;
        assert!(Pending.can_transition_to(Running));
        assert!(Running.can_transition_to(Degraded));
        assert!(Degraded.can_transition_to(Draining));
        assert!(Draining.can_transition_to(Terminated));
        assert!(Pending.can_transition_to(Terminated));
        assert!(!Terminated.can_transition_to(Running));
        assert!(!Draining.can_transition_to(Running));
        assert!(!Degraded.can_transition_to(Running));
        assert!(!Pending.can_transition_to(Degraded));
        assert!(!Terminated.can_transition_to(Terminated));
    }

    #[test]
    fn descriptor_invariants() {
        assert!(ProviderDescriptor::private("p", 2).validate(false).is_empty());
        assert!(ProviderDescriptor::public("q").validate(false).is_empty());
        let mut p = ProviderDescriptor::private("p", 2);
        p.capacity = None;
        assert_eq!(p.validate(false).len(), 1);
        let mut q = ProviderDescriptor::public("q");
        q.capacity = Some(3);
        assert_eq!(q.validate(false).len(), 1);
        assert!(q.validate(true).is_empty());
    }

    #[test]
    fn only_one_free_provider() {
        let mut a = ProviderDescriptor::private("a", 1);
        let mut b = ProviderDescriptor::public("b");
        assert!(validate_catalog(&[a.clone(), b.clone()]).is_empty());
        b.cost_rate = 0.0;
        assert_eq!(validate_catalog(&[a.clone(), b.clone()]).len(), 1);
        a.provider_id = "b".into();
        assert_eq!(validate_catalog(&[a, b]).len(), 2);
    }

    #[test]
    fn record_round_trip() {
        for d in [ProviderDescriptor::private("ecc", 4), ProviderDescriptor::public("aws")] {
            let rec = parse_line(1, &d.to_line()).unwrap().unwrap();
            assert_eq!(ProviderDescriptor::from_record(&rec).unwrap(), d);
        }
    }

    #[test]
    fn catalog_reports_every_error() {
        let text = "evop-providers v1\n\
                    provider a kind=private\n\
                    provider b kind=public capacity=3\n\
                    provider c kind=cloudy\n";
        let errs = parse_catalog(text).unwrap_err();
        assert_eq!(errs.len(), 3, "{errs:?}");
    }
}
