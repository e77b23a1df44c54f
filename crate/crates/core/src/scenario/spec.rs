//! Declarative scenarios: `evop-scenario v1` documents and the optional main
//! configuration file.

use crate::balancer::BalancerConfig;
use crate::ids::{InstanceId, ModelId, Seconds, VirtualTime};
use crate::library::{ImageDescriptor, ModelLibrary};
use crate::provider::{validate_catalog, ProviderDescriptor};
use crate::sim::{FaultKind, LoadModel};
use crate::textfmt::{keep, parse_document, FieldError, Record};
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const SCENARIO_HEADER: &str = "evop-scenario v1";
pub const CONFIG_HEADER: &str = "evop-config v1";
pub const DEFAULT_DURATION: Seconds = 3600;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FaultTarget {
    /// Whatever instance hosts this client's session when the fault fires.
    Session(String),
    Instance(InstanceId),
}

impl fmt::Display for FaultTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FaultTarget::Session(r) => write!(f, "@{r}"),
            FaultTarget::Instance(i) => write!(f, "{i}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScenarioEvent {
    Arrive {
        client: String,
        model: ModelId,
    },
    Depart {
        client: String,
    },
    Burst {
        client: String,
        count: u32,
        every: Option<Seconds>,
        until: Option<VirtualTime>,
    },
    Fault {
        target: FaultTarget,
        kind: FaultKind,
        duration: Option<Seconds>,
    },
    BrokerCrash {
        restart_delay: Seconds,
    },
}

impl ScenarioEvent {
    fn client(&self) -> Option<&str> {
        match self {
            ScenarioEvent::Arrive { client, .. }
            | ScenarioEvent::Depart { client }
            | ScenarioEvent::Burst { client, .. } => Some(client),
            ScenarioEvent::Fault {
                target: FaultTarget::Session(client),
                ..
            } => Some(client),
            _ => None,
        }
    }

    pub fn to_line(&self, at: VirtualTime) -> String {
        let body = match self {
            ScenarioEvent::Arrive { client, model } => format!("arrive {client} model={model}"),
            ScenarioEvent::Depart { client } => format!("depart {client}"),
            ScenarioEvent::Burst {
                client,
                count,
                every,
                until,
            } => {
                let mut s = format!("burst {client} count={count}");
                if let Some(e) = every {
                    s.push_str(&format!(" every={e}"));
                }
                if let Some(u) = until {
                    s.push_str(&format!(" until={u}"));
                }
                s
            }
            ScenarioEvent::Fault { target, kind, duration } => {
                let mut s = format!("fault {target} kind={kind}");
                if let Some(d) = duration {
                    s.push_str(&format!(" duration={d}"));
                }
                s
            }
            ScenarioEvent::BrokerCrash { restart_delay } => format!("broker_crash restart_delay={restart_delay}"),
        };
        format!("at {at} {body}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimedEvent {
    pub at: VirtualTime,
    pub event: ScenarioEvent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub name: String,
    pub seed: u64,
    pub duration: Seconds,
    /// Upper bound of the seeded delay added to each arrival.
    pub jitter: Seconds,
    pub providers: Vec<ProviderDescriptor>,
    pub images: Vec<ImageDescriptor>,
    pub balancer: BalancerConfig,
    pub load: LoadModel,
    /// Sorted by time; equal times keep file order.
    pub events: Vec<TimedEvent>,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}", join_errors("parse error", .0))]
    Parse(Vec<FieldError>),
    #[error("{}", join_errors("invalid scenario", .0))]
    Validation(Vec<FieldError>),
}

impl ScenarioError {
    pub fn errors(&self) -> &[FieldError] {
        match self {
            ScenarioError::Parse(e) | ScenarioError::Validation(e) => e,
            ScenarioError::Io { .. } => &[],
        }
    }
}

fn join_errors(what: &str, errs: &[FieldError]) -> String {
    let lines: Vec<String> = errs.iter().map(|e| format!("  {e}")).collect();
    format!("{what} ({} problem(s)):\n{}", errs.len(), lines.join("\n"))
}

/// Settings from the file named by `EVOP_CONFIG`. Scenario files override
/// the balancer and load settings; the paths serve the CLI.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MainConfig {
    pub balancer: Option<BalancerConfig>,
    pub load: Option<LoadModel>,
    pub library: Option<PathBuf>,
    pub journal: Option<PathBuf>,
}

impl MainConfig {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let records = parse_document(text, CONFIG_HEADER).map_err(ScenarioError::Parse)?;
        let mut errs = Vec::new();
        let mut cfg = MainConfig::default();
        for rec in &records {
            match rec.keyword.as_str() {
                "balancer" => match BalancerConfig::from_record(rec) {
                    Ok(b) => cfg.balancer = Some(b),
                    Err(e) => errs.extend(e),
                },
                "load" => match LoadModel::from_record(rec) {
                    Ok(l) => cfg.load = Some(l),
                    Err(e) => errs.extend(e),
                },
                "library" | "journal" => {
                    errs.extend(rec.check_fields(&["path"]));
                    if let Some(p) = keep(&mut errs, rec.required("path")) {
                        let slot = if rec.keyword == "library" {
                            &mut cfg.library
                        } else {
                            &mut cfg.journal
                        };
                        *slot = Some(PathBuf::from(p));
                    }
                }
                other => errs.push(rec.error(format!("unknown record `{other}`"))),
            }
        }
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(ScenarioError::Validation(errs))
        }
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Reads the file named by `EVOP_CONFIG`, or returns defaults when unset.
    pub fn from_env() -> Result<Self, ScenarioError> {
        match std::env::var_os("EVOP_CONFIG") {
            Some(p) if !p.is_empty() => Self::load(Path::new(&p)),
            _ => Ok(Self::default()),
        }
    }
}

fn default_providers() -> Vec<ProviderDescriptor> {
    vec![
        ProviderDescriptor::private("private", 4),
        ProviderDescriptor::public("public"),
    ]
}

fn default_images() -> Vec<ImageDescriptor> {
    vec![ImageDescriptor::new("hydro", &["topmodel-stub", "fluxmodel-stub"])]
}

fn parse_event(rec: &Record, errs: &mut Vec<FieldError>) -> Option<TimedEvent> {
    let at: VirtualTime = match rec.positional(0, "a time") {
        Ok(t) => match t.parse() {
            Ok(v) => v,
            Err(_) => {
                errs.push(rec.error(format!("invalid time `{t}`")));
                return None;
            }
        },
        Err(e) => {
            errs.push(e);
            return None;
        }
    };
    let verb = keep(errs, rec.positional(1, "an event kind"))?;
    let arg = |errs: &mut Vec<FieldError>, what: &str| keep(errs, rec.positional(2, what)).map(str::to_owned);
    let n_positional = |n: usize, errs: &mut Vec<FieldError>| {
        if rec.positional.len() > n {
            errs.push(rec.error(format!("unexpected `{}` in {verb} event", rec.positional[n])));
        }
    };
    let event = match verb {
        "arrive" => {
            errs.extend(rec.check_fields(&["model"]));
            n_positional(3, errs);
            let client = arg(errs, "a client reference")?;
            let model = keep(errs, rec.required("model"))?;
            ScenarioEvent::Arrive {
                client,
                model: ModelId::from(model),
            }
        }
        "depart" => {
            errs.extend(rec.check_fields(&[]));
            n_positional(3, errs);
            ScenarioEvent::Depart {
                client: arg(errs, "a client reference")?,
            }
        }
        "burst" => {
            errs.extend(rec.check_fields(&["count", "every", "until"]));
            n_positional(3, errs);
            let client = arg(errs, "a client reference")?;
            let count = keep(errs, rec.parse_required("count"));
            let every = keep(errs, rec.parse_opt::<Seconds>("every"));
            let until = keep(errs, rec.parse_opt("until"));
            if every == Some(Some(0)) {
                errs.push(rec.error("every must be positive"));
            }
            ScenarioEvent::Burst {
                client,
                count: count?,
                every: every?,
                until: until?,
            }
        }
        "fault" => {
            errs.extend(rec.check_fields(&["kind", "duration"]));
            n_positional(3, errs);
            let target = arg(errs, "a fault target")?;
            let target = match target.strip_prefix('@') {
                Some(r) => FaultTarget::Session(r.to_owned()),
                None => FaultTarget::Instance(InstanceId::from(target)),
            };
            let kind = keep(errs, rec.parse_required("kind"));
            let duration = keep(errs, rec.parse_opt("duration"));
            ScenarioEvent::Fault {
                target,
                kind: kind?,
                duration: duration?,
            }
        }
        "broker_crash" => {
            errs.extend(rec.check_fields(&["restart_delay"]));
            n_positional(2, errs);
            ScenarioEvent::BrokerCrash {
                restart_delay: keep(errs, rec.parse_or("restart_delay", 5))?,
            }
        }
        other => {
            errs.push(rec.error(format!("unknown event `{other}`")));
            return None;
        }
    };
    Some(TimedEvent { at, event })
}

impl ScenarioSpec {
    /// Parses with built-in defaults for anything the file leaves out.
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        Self::parse_with(text, &MainConfig::default())
    }

    pub fn parse_with(text: &str, base: &MainConfig) -> Result<Self, ScenarioError> {
        let records = parse_document(text, SCENARIO_HEADER).map_err(ScenarioError::Parse)?;
        let mut errs = Vec::new();
        let mut spec = ScenarioSpec {
            name: "scenario".to_owned(),
            seed: 0,
            duration: DEFAULT_DURATION,
            jitter: 0,
            providers: Vec::new(),
            images: Vec::new(),
            balancer: base.balancer.clone().unwrap_or_default(),
            load: base.load.unwrap_or_default(),
            events: Vec::new(),
        };
        let mut event_lines = Vec::new();
        for rec in &records {
            let single = |errs: &mut Vec<FieldError>| {
                errs.extend(rec.check_fields(&[]));
                keep(errs, rec.positional(0, "a value")).map(str::to_owned)
            };
            match rec.keyword.as_str() {
                "name" => {
                    if let Some(v) = single(&mut errs) {
                        spec.name = v;
                    }
                }
                "seed" | "duration" | "jitter" => {
                    let Some(v) = single(&mut errs) else { continue };
                    match v.parse::<u64>() {
                        Ok(n) => match rec.keyword.as_str() {
                            "seed" => spec.seed = n,
                            "duration" => spec.duration = n,
                            _ => spec.jitter = n,
                        },
                        Err(_) => errs.push(rec.error(format!("invalid {} `{v}`", rec.keyword))),
                    }
                }
                "provider" => match ProviderDescriptor::from_record(rec) {
                    Ok(p) => spec.providers.push(p),
                    Err(e) => errs.extend(e),
                },
                "image" => match ImageDescriptor::from_record(rec) {
                    Ok(i) => spec.images.push(i),
                    Err(e) => errs.extend(e),
                },
                "balancer" => match BalancerConfig::from_record(rec) {
                    Ok(b) => spec.balancer = b,
                    Err(e) => errs.extend(e),
                },
                "load" => match LoadModel::from_record(rec) {
                    Ok(l) => spec.load = l,
                    Err(e) => errs.extend(e),
                },
                "at" => {
                    if let Some(ev) = parse_event(rec, &mut errs) {
                        event_lines.push(rec.line);
                        spec.events.push(ev);
                    }
                }
                other => errs.push(rec.error(format!("unknown record `{other}`"))),
            }
        }
        if spec.providers.is_empty() {
            spec.providers = default_providers();
        }
        if spec.images.is_empty() {
            spec.images = default_images();
        }
        if !errs.is_empty() {
            return Err(ScenarioError::Parse(errs));
        }
        let mut order: Vec<usize> = (0..spec.events.len()).collect();
        order.sort_by_key(|&i| spec.events[i].at);
        spec.events = order.iter().map(|&i| spec.events[i].clone()).collect();
        let lines: Vec<usize> = order.iter().map(|&i| event_lines[i]).collect();
        let problems = spec.validate_at(&lines);
        if problems.is_empty() {
            Ok(spec)
        } else {
            Err(ScenarioError::Validation(problems))
        }
    }

    pub fn load(path: &Path, base: &MainConfig) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_owned(),
            source,
        })?;
        let mut spec = Self::parse_with(&text, base)?;
        if spec.name == "scenario" {
            if let Some(stem) = path.file_stem() {
                spec.name = stem.to_string_lossy().into_owned();
            }
        }
        Ok(spec)
    }

    /// Every semantic problem, with line numbers when known (0 otherwise).
    pub fn validate(&self) -> Vec<FieldError> {
        self.validate_at(&[])
    }

    fn validate_at(&self, lines: &[usize]) -> Vec<FieldError> {
        let mut out = Vec::new();
        let at_line = |line: usize, message: String| FieldError { line, message };
        for p in validate_catalog(&self.providers) {
            out.push(at_line(0, p));
        }
        if let Err(e) = self.library() {
            out.push(at_line(0, e.to_string()));
        }
        for p in self.balancer.problems() {
            out.push(at_line(0, p));
        }
        if self.duration == 0 {
            out.push(at_line(0, "duration must be positive".into()));
        }
        let library = self.library().ok();
        // client ref -> (arrived, departed)
        let mut clients: BTreeMap<&str, bool> = BTreeMap::new();
        for (i, ev) in self.events.iter().enumerate() {
            let line = lines.get(i).copied().unwrap_or(0);
            if ev.at > self.duration {
                out.push(at_line(
                    line,
                    format!("event at {} is after the scenario duration {}", ev.at, self.duration),
                ));
            }
            match &ev.event {
                ScenarioEvent::Arrive { client, model } => {
                    if clients.insert(client, false).is_some() {
                        out.push(at_line(line, format!("client `{client}` arrives twice")));
                    }
                    if let Some(lib) = &library {
                        if lib.resolve(model).is_err() {
                            out.push(at_line(line, format!("no image serves model `{model}`")));
                        }
                    }
                }
                other => {
                    let Some(client) = other.client() else { continue };
                    match clients.get(client) {
                        None => out.push(at_line(
                            line,
                            format!("`{client}` does not refer to an earlier arrival"),
                        )),
                        Some(true) => out.push(at_line(line, format!("client `{client}` has already departed"))),
                        Some(false) => {
                            if matches!(other, ScenarioEvent::Depart { .. }) {
                                clients.insert(client, true);
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// The model library the scenario's images form.
    pub fn library(&self) -> Result<ModelLibrary, crate::library::LibraryError> {
        let mut lib = ModelLibrary::new();
        for img in &self.images {
            lib.register_image(img.clone())?;
        }
        Ok(lib)
    }

    /// Renders the spec back to its file format.
    pub fn to_text(&self) -> String {
        let mut out = vec![
            SCENARIO_HEADER.to_owned(),
            format!("name {}", self.name),
            format!("seed {}", self.seed),
            format!("duration {}", self.duration),
            format!("jitter {}", self.jitter),
        ];
        out.extend(self.providers.iter().map(ProviderDescriptor::to_line));
        out.extend(self.images.iter().map(ImageDescriptor::to_line));
        out.push(self.balancer.to_line());
        out.push(self.load.to_line());
        out.extend(self.events.iter().map(|e| e.event.to_line(e.at)));
        out.push(String::new());
        out.join("\n")
    }

    /// A copy with a manager crash inserted at `at` (after events at the same time).
    pub fn with_crash(&self, at: VirtualTime, restart_delay: Seconds) -> Self {
        let mut spec = self.clone();
        let pos = spec.events.partition_point(|e| e.at <= at);
        spec.events.insert(
            pos,
            TimedEvent {
                at,
                event: ScenarioEvent::BrokerCrash { restart_delay },
            },
        );
        spec
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_scenario_gets_defaults() {
        let spec = ScenarioSpec::parse("evop-scenario v1\nat 0 arrive s1 model=topmodel-stub\n").unwrap();
        assert_eq!(spec.seed, 0);
        assert_eq!(spec.duration, DEFAULT_DURATION);
        assert_eq!(spec.balancer, BalancerConfig::default());
        assert_eq!(spec.providers.len(), 2);
        assert_eq!(spec.events.len(), 1);
    }

    #[test]
    fn unknown_departure_is_named() {
        let err = ScenarioSpec::parse("evop-scenario v1\nat 5 depart ghost\n").unwrap_err();
        let ScenarioError::Validation(errs) = err else {
            panic!("{err}")
        };
        assert_eq!(errs.len(), 1);
        assert!(errs[0].message.contains("ghost"));
        assert_eq!(errs[0].line, 2);
    }

    #[test]
    fn event_past_duration_is_rejected() {
        let err =
            ScenarioSpec::parse("evop-scenario v1\nduration 100\nat 101 arrive a model=topmodel-stub\n").unwrap_err();
        assert!(matches!(err, ScenarioError::Validation(ref e) if e.len() == 1 && e[0].line == 3));
    }

    #[test]
    fn all_problems_reported() {
        let text = "evop-scenario v1\n\
                    seed x\n\
                    at 1 arrive a model=nope\n\
                    at 2 depart b\n\
                    at 3 frobnicate a\n\
                    balancer window=0\n";
        let err = ScenarioSpec::parse(text).unwrap_err();
        // syntax problems come first; semantic checks need a parsed document
        assert_eq!(err.errors().len(), 3);
        let text = "evop-scenario v1\nat 1 arrive a model=nope\nat 2 depart b\nat 3 depart a\nat 4 burst a count=1\n";
        let err = ScenarioSpec::parse(text).unwrap_err();
        assert_eq!(err.errors().len(), 3, "{err}");
    }

    #[test]
    fn text_round_trip() {
        let text = "evop-scenario v1\nseed 9\nduration 500\n\
                    provider p1 kind=private capacity=2\nprovider aws kind=public\n\
                    image topo models=topmodel-stub max_sessions=1\n\
                    at 10 arrive a model=topmodel-stub\n\
                    at 20 burst a count=5 every=10 until=100\n\
                    at 30 fault @a kind=cpu_saturation duration=60\n\
                    at 40 broker_crash restart_delay=7\n\
                    at 90 depart a\n";
        let spec = ScenarioSpec::parse(text).unwrap();
        assert_eq!(ScenarioSpec::parse(&spec.to_text()).unwrap(), spec);
    }

    #[test]
    fn events_sorted_stably() {
        let text =
            "evop-scenario v1\nat 10 arrive b model=topmodel-stub\nat 0 arrive a model=topmodel-stub\nat 10 depart a\n";
        let spec = ScenarioSpec::parse(text).unwrap();
        let at: Vec<u64> = spec.events.iter().map(|e| e.at).collect();
        assert_eq!(at, [0, 10, 10]);
        assert!(matches!(&spec.events[1].event, ScenarioEvent::Arrive { client, .. } if client == "b"));
    }

    #[test]
    fn main_config_supplies_defaults() {
        let cfg = MainConfig::parse("evop-config v1\nbalancer cooldown=30\nlibrary path=/tmp/lib.txt\n").unwrap();
        assert_eq!(cfg.library.as_deref(), Some(Path::new("/tmp/lib.txt")));
        let spec = ScenarioSpec::parse_with("evop-scenario v1\n", &cfg).unwrap();
        assert_eq!(spec.balancer.migration_cooldown, 30);
        let spec = ScenarioSpec::parse_with("evop-scenario v1\nbalancer cooldown=60\n", &cfg).unwrap();
        assert_eq!(spec.balancer.migration_cooldown, 60);
    }

    #[test]
    fn crash_insertion_keeps_order() {
        let spec =
            ScenarioSpec::parse("evop-scenario v1\nat 10 arrive a model=topmodel-stub\nat 20 depart a\n").unwrap();
        let crashed = spec.with_crash(10, 5);
        assert!(matches!(
            crashed.events[1].event,
            ScenarioEvent::BrokerCrash { restart_delay: 5 }
        ));
        assert_eq!(crashed.events.len(), 3);
    }
}
