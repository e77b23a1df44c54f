//! Independent trace replay shared by the integration tests.
//!
//! Rebuilds instance and session state purely from trace text, without
//! calling into the balancer or broker, so tests can check placement and
//! migration decisions against what actually happened.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone)]
pub struct Line {
    pub at: u64,
    pub kind: String,
    pub subject: String,
    pub fields: BTreeMap<String, String>,
    pub raw_detail: String,
}

pub fn parse(trace: &str) -> Vec<Line> {
    trace
        .lines()
        .map(|l| {
            let mut parts = l.splitn(4, '\t');
            let at = parts.next().unwrap().parse().expect("timestamp");
            let kind = parts.next().unwrap().to_owned();
            let subject = parts.next().unwrap_or("").to_owned();
            let raw_detail = parts.next().unwrap_or("").to_owned();
            let fields = raw_detail
                .split(' ')
                .filter_map(|kv| kv.split_once('='))
                .map(|(k, v)| (k.to_owned(), v.to_owned()))
                .collect();
            Line {
                at,
                kind,
                subject,
                fields,
                raw_detail,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum St {
    Pending,
    Running,
    Degraded,
    Draining,
    Gone,
}

#[derive(Debug, Clone)]
pub struct Inst {
    pub provider: String,
    pub image: String,
    pub state: St,
    pub sessions: BTreeSet<String>,
}

impl Inst {
    pub fn accepting(&self) -> bool {
        matches!(self.state, St::Pending | St::Running)
    }
}

/// Instance and session state as implied by the trace lines seen so far.
#[derive(Debug, Clone, Default)]
pub struct Model {
    pub instances: BTreeMap<String, Inst>,
    pub session_at: BTreeMap<String, String>,
}

impl Model {
    pub fn apply(&mut self, l: &Line) {
        let f = |k: &str| l.fields.get(k).cloned().unwrap_or_default();
        match l.kind.as_str() {
            "launch" => {
                self.instances.insert(
                    l.subject.clone(),
                    Inst {
                        provider: f("provider"),
                        image: f("image"),
                        state: St::Pending,
                        sessions: BTreeSet::new(),
                    },
                );
            }
            "boot" => self.set_state(&l.subject, St::Running),
            "state" => match f("state").as_str() {
                "degraded" => self.set_state(&l.subject, St::Degraded),
                "draining" => self.set_state(&l.subject, St::Draining),
                "running" => self.set_state(&l.subject, St::Running),
                _ => {}
            },
            "terminate" | "crash" => self.set_state(&l.subject, St::Gone),
            "assign" => self.put(&l.subject, &f("instance")),
            "migrate" => self.put(&l.subject, &f("to")),
            "bye" => {
                if let Some(i) = self.session_at.remove(&l.subject) {
                    if let Some(inst) = self.instances.get_mut(&i) {
                        inst.sessions.remove(&l.subject);
                    }
                }
            }
            _ => {}
        }
    }

    fn set_state(&mut self, id: &str, st: St) {
        if let Some(i) = self.instances.get_mut(id) {
            i.state = st;
        }
    }

    fn put(&mut self, session: &str, instance: &str) {
        if let Some(old) = self.session_at.insert(session.to_owned(), instance.to_owned()) {
            if let Some(i) = self.instances.get_mut(&old) {
                i.sessions.remove(session);
            }
        }
        if let Some(i) = self.instances.get_mut(instance) {
            i.sessions.insert(session.to_owned());
        }
    }

    pub fn live_on(&self, provider: &str) -> usize {
        self.instances
            .values()
            .filter(|i| i.provider == provider && i.state != St::Gone)
            .count()
    }
}

/// Epochs each client saw, in delivery order.
pub fn client_epochs(lines: &[Line]) -> BTreeMap<String, Vec<(u64, u64)>> {
    let mut out: BTreeMap<String, Vec<(u64, u64)>> = BTreeMap::new();
    for l in lines {
        if l.kind == "client_assign" || l.kind == "client_update" {
            let e: u64 = l.fields["epoch"].parse().unwrap();
            out.entry(l.subject.clone()).or_default().push((l.at, e));
        }
    }
    out
}

/// Random single-image scenario text. With `bound`, clients are only admitted
/// while the number of overlapping stays (closed intervals, so arrival jitter
/// cannot create extra overlap) stays within `capacity * max_sessions`.
pub struct Generated {
    pub text: String,
    pub capacity: u32,
    pub max_sessions: u32,
    pub peak: u32,
}

pub fn generate(rng: &mut impl rand::Rng, idx: usize, bounded: bool) -> Generated {
    let capacity = rng.gen_range(1..=3u32);
    let max_sessions = rng.gen_range(1..=4u32);
    let limit = capacity * max_sessions;
    let duration = 600u64;
    let jitter = rng.gen_range(0..=5u64);
    let mut stays: Vec<(u64, u64)> = Vec::new();
    let mut events = Vec::new();
    for c in 0..rng.gen_range(1..=14) {
        let arrive = rng.gen_range(0..400u64);
        let depart = if rng.gen_bool(0.8) {
            arrive + rng.gen_range(20..=300u64)
        } else {
            duration
        };
        let mut trial = stays.clone();
        trial.push((arrive, depart));
        if bounded && peak_overlap(&trial) > limit {
            continue;
        }
        stays = trial;
        let model = if rng.gen_bool(0.5) {
            "topmodel-stub"
        } else {
            "fluxmodel-stub"
        };
        events.push(format!("at {arrive} arrive c{c} model={model}"));
        if arrive + 10 < depart.min(duration) && rng.gen_bool(0.5) {
            events.push(format!("at {} burst c{c} count=3", arrive + 10));
        }
        if depart < duration {
            events.push(format!("at {depart} depart c{c}"));
        }
    }
    let text = format!(
        "evop-scenario v1\nname gen-{idx}\nseed {}\nduration {duration}\njitter {jitter}\n\
         provider private kind=private capacity={capacity}\nprovider public kind=public\n\
         image hydro models=topmodel-stub,fluxmodel-stub max_sessions={max_sessions}\n{}\n",
        rng.gen::<u32>(),
        events.join("\n")
    );
    Generated {
        text,
        capacity,
        max_sessions,
        peak: peak_overlap(&stays),
    }
}

/// Maximum number of closed intervals sharing a point.
pub fn peak_overlap(stays: &[(u64, u64)]) -> u32 {
    stays
        .iter()
        .flat_map(|&(a, d)| [a, d])
        .map(|t| stays.iter().filter(|&&(a, d)| a <= t && t <= d).count() as u32)
        .max()
        .unwrap_or(0)
}
