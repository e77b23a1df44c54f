use crate::balancer::Rule;
use crate::broker::protocol::UpdateReason;
use crate::textfmt::fmt_f64;
use std::collections::BTreeMap;

pub const REPORT_HEADER: &str = "evop-report v1";

/// Aggregate outcome of one scenario run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub scenario: String,
    pub seed: u64,
    pub sessions_total: u64,
    /// Provider id of each session's first placement.
    pub sessions_by_first_provider: BTreeMap<String, u64>,
    /// Reassignments by reason; `initial` is never counted.
    pub migrations: BTreeMap<String, u64>,
    /// UPDATE frames the broker produced, delivered or not.
    pub update_messages: u64,
    pub undelivered_updates: u64,
    pub instances_launched: BTreeMap<String, u64>,
    pub instances_terminated: BTreeMap<String, u64>,
    /// Sum of the per-instance charges seen on termination.
    pub total_cost: f64,
    /// What the provider layer itself reports as accrued.
    pub provider_accrued_cost: f64,
    pub saturation_events: u64,
    pub placement_failures: u64,
    pub verdicts: BTreeMap<String, u64>,
    pub max_concurrent_public: u64,
    pub broker_crashes: u64,
    pub journal_truncations: u64,
    pub requests_served: u64,
    pub requests_failed: u64,
    pub open_sessions_at_end: u64,
    pub trace_lines: u64,
    pub trace_hash: String,
}

impl MetricsReport {
    /// A report with every reason, rule and provider key present at zero.
    pub fn empty(scenario: &str, seed: u64, providers: &[String]) -> Self {
        let zeros = |keys: &mut dyn Iterator<Item = String>| keys.map(|k| (k, 0)).collect::<BTreeMap<_, _>>();
        Self {
            scenario: scenario.to_owned(),
            seed,
            sessions_by_first_provider: zeros(&mut providers.iter().cloned()),
            migrations: zeros(
                &mut UpdateReason::ALL
                    .iter()
                    .filter(|r| **r != UpdateReason::Initial)
                    .map(|r| r.as_str().to_owned()),
            ),
            instances_launched: zeros(&mut providers.iter().cloned()),
            instances_terminated: zeros(&mut providers.iter().cloned()),
            verdicts: zeros(&mut Rule::ALL.iter().map(|r| r.as_str().to_owned())),
            ..Self::default()
        }
    }

    pub fn total_migrations(&self) -> u64 {
        self.migrations.values().sum()
    }

    /// Problems with the report's internal bookkeeping; empty when it adds up.
    pub fn reconciliation_errors(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.total_migrations() != self.update_messages {
            out.push(format!(
                "migrations by reason sum to {} but {} UPDATE messages were produced",
                self.total_migrations(),
                self.update_messages
            ));
        }
        if (self.total_cost - self.provider_accrued_cost).abs() > 1e-9 {
            out.push(format!(
                "cost {} differs from the provider total {}",
                fmt_f64(self.total_cost),
                fmt_f64(self.provider_accrued_cost)
            ));
        }
        if self.instances_launched != self.instances_terminated {
            out.push("some launched instances were never terminated".to_owned());
        }
        let first: u64 = self.sessions_by_first_provider.values().sum();
        if first != self.sessions_total {
            out.push(format!("{first} first placements for {} sessions", self.sessions_total));
        }
        out
    }

    /// `key value` lines in a fixed order; maps expand to `key.sub value`.
    pub fn to_text(&self) -> String {
        let mut lines = vec![REPORT_HEADER.to_owned()];
        let mut kv = |k: &str, v: String| lines.push(format!("{k} {v}"));
        kv("scenario", self.scenario.clone());
        kv("seed", self.seed.to_string());
        kv("sessions_total", self.sessions_total.to_string());
        for (p, n) in &self.sessions_by_first_provider {
            kv(&format!("sessions_by_first_provider.{p}"), n.to_string());
        }
        for (r, n) in &self.migrations {
            kv(&format!("migrations.{r}"), n.to_string());
        }
        kv("update_messages", self.update_messages.to_string());
        kv("undelivered_updates", self.undelivered_updates.to_string());
        for (p, n) in &self.instances_launched {
            kv(&format!("instances_launched.{p}"), n.to_string());
        }
        for (p, n) in &self.instances_terminated {
            kv(&format!("instances_terminated.{p}"), n.to_string());
        }
        kv("total_cost", fmt_f64(self.total_cost));
        kv("provider_accrued_cost", fmt_f64(self.provider_accrued_cost));
        kv("saturation_events", self.saturation_events.to_string());
        kv("placement_failures", self.placement_failures.to_string());
        for (r, n) in &self.verdicts {
            kv(&format!("verdicts.{r}"), n.to_string());
        }
        kv("max_concurrent_public", self.max_concurrent_public.to_string());
        kv("broker_crashes", self.broker_crashes.to_string());
        kv("journal_truncations", self.journal_truncations.to_string());
        kv("requests_served", self.requests_served.to_string());
        kv("requests_failed", self.requests_failed.to_string());
        kv("open_sessions_at_end", self.open_sessions_at_end.to_string());
        kv("trace_lines", self.trace_lines.to_string());
        kv("trace_hash", self.trace_hash.clone());
        lines.push(String::new());
        lines.join("\n")
    }

    /// Reads a report back as flat `key -> value` pairs.
    pub fn parse_flat(text: &str) -> Option<BTreeMap<String, String>> {
        let mut lines = text.lines();
        if lines.next()? != REPORT_HEADER {
            return None;
        }
        lines
            .filter(|l| !l.is_empty())
            .map(|l| l.split_once(' ').map(|(k, v)| (k.to_owned(), v.to_owned())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_report_has_all_keys() {
        let r = MetricsReport::empty("s", 1, &["private".into(), "public".into()]);
        assert_eq!(r.migrations.len(), 3);
        assert_eq!(r.verdicts.len(), 3);
        assert!(r.reconciliation_errors().is_empty());
    }

    #[test]
    fn text_is_stable_and_flat() {
        let mut r = MetricsReport::empty("s", 1, &["private".into()]);
        r.total_cost = 2.0;
        r.provider_accrued_cost = 2.0;
        let text = r.to_text();
        assert_eq!(text, r.clone().to_text());
        let flat = MetricsReport::parse_flat(&text).unwrap();
        assert_eq!(flat["total_cost"], "2.0");
        assert_eq!(flat["migrations.rebalance"], "0");
    }

    #[test]
    fn mismatches_are_reported() {
        let mut r = MetricsReport::empty("s", 1, &[]);
        r.update_messages = 2;
        r.migrations.insert("rebalance".into(), 1);
        r.total_cost = 1.0;
        assert_eq!(r.reconciliation_errors().len(), 2);
    }
}
