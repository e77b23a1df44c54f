//! The canonical scenario suite shipped with the crate.

use super::spec::ScenarioSpec;

pub const BUNDLED: &[(&str, &str)] = &[
    ("fill", include_str!("../../scenarios/fill.scn")),
    ("overflow", include_str!("../../scenarios/overflow.scn")),
    (
        "drain-and-reverse-migrate",
        include_str!("../../scenarios/drain-and-reverse-migrate.scn"),
    ),
    ("cpu-fault", include_str!("../../scenarios/cpu-fault.scn")),
    ("blackhole-fault", include_str!("../../scenarios/blackhole-fault.scn")),
    ("crash-recovery", include_str!("../../scenarios/crash-recovery.scn")),
    (
        "model-class-routing",
        include_str!("../../scenarios/model-class-routing.scn"),
    ),
    (
        "rebalance-convergence",
        include_str!("../../scenarios/rebalance-convergence.scn"),
    ),
];

pub fn bundled(name: &str) -> Option<ScenarioSpec> {
    BUNDLED
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| ScenarioSpec::parse(text).expect("bundled scenarios are valid"))
}

pub fn all_bundled() -> Vec<ScenarioSpec> {
    BUNDLED
        .iter()
        .map(|(_, text)| ScenarioSpec::parse(text).expect("bundled scenarios are valid"))
        .collect()
}
