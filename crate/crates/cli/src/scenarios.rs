//! Shipped scenario catalog: curated configurations embedded in the binary
//! so `run <name>` works without any files on disk.

/// One embedded scenario document.
pub struct ShippedScenario {
    pub name: &'static str,
    pub json: &'static str,
}

/// All shipped scenarios, sorted by name. The listing order is part of the
/// command-line contract (`list-scenarios` output is stable).
pub const SCENARIOS: &[ShippedScenario] = &[
    ShippedScenario {
        name: "brownian-martingale",
        json: include_str!("../scenarios/brownian-martingale.json"),
    },
    ShippedScenario {
        name: "comparison-shift",
        json: include_str!("../scenarios/comparison-shift.json"),
    },
    ShippedScenario {
        name: "comparison-shift-ode",
        json: include_str!("../scenarios/comparison-shift-ode.json"),
    },
    ShippedScenario {
        name: "coupled-linear",
        json: include_str!("../scenarios/coupled-linear.json"),
    },
    ShippedScenario {
        name: "decoupled-constant",
        json: include_str!("../scenarios/decoupled-constant.json"),
    },
    ShippedScenario {
        name: "heat-quadratic",
        json: include_str!("../scenarios/heat-quadratic.json"),
    },
    ShippedScenario {
        name: "mollified-abs",
        json: include_str!("../scenarios/mollified-abs.json"),
    },
    ShippedScenario {
        name: "mollified-smooth",
        json: include_str!("../scenarios/mollified-smooth.json"),
    },
    ShippedScenario {
        name: "mollify-abs",
        json: include_str!("../scenarios/mollify-abs.json"),
    },
];

/// Look up a shipped scenario by exact name.
pub fn find(name: &str) -> Option<&'static ShippedScenario> {
    SCENARIOS.iter().find(|s| s.name == name)
}

/// `(name, description)` pairs for the listing, in catalog order.
pub fn catalog() -> Vec<(&'static str, String)> {
    SCENARIOS
        .iter()
        .map(|s| {
            let description = crate::config::parse_config(s.json, s.name)
                .map(|cfg| cfg.description)
                .unwrap_or_else(|e| format!("(unreadable: {e})"));
            (s.name, description)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{parse_config, validate};

    #[test]
    fn every_shipped_scenario_parses_validates_and_matches_its_name() {
        for s in SCENARIOS {
            let cfg = parse_config(s.json, s.name)
                .unwrap_or_else(|e| panic!("{}: {e}", s.name));
            assert_eq!(cfg.label, s.name, "label must equal the catalog name");
            assert!(!cfg.description.is_empty(), "{} needs a description", s.name);
            validate(&cfg).unwrap_or_else(|e| panic!("{}: {e}", s.name));
        }
    }

    #[test]
    fn catalog_is_sorted_and_findable() {
        let names: Vec<&str> = SCENARIOS.iter().map(|s| s.name).collect();
        let mut sorted = names.clone();
        sorted.sort_unstable();
        assert_eq!(names, sorted, "catalog must stay alphabetized");
        assert!(find("coupled-linear").is_some());
        assert!(find("no-such-scenario").is_none());
    }
}
