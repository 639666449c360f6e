//! Level 3: appliance commands from fused window state.
//!
//! Decision rules are data (`shr/1` files): a condition over the current
//! window's labels, environment, clock and appliance states, plus a target
//! appliance and the state to command it into. The engine adds the
//! stability machinery — hold counts, per-rule cooldowns, per-appliance
//! priority arbitration — and an assumed-effect overlay so a command's
//! outcome is visible to subsequent windows even though nothing actually
//! actuates in a simulation.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::predicate::{Expr, Kind, PredicateError, Scope, Value, Vocabulary};
use crate::time::{Nanos, NS_PER_SEC};

pub const RULES_VERSION: &str = "shr/1";

#[derive(Debug, Error)]
pub enum RuleError {
    #[error("rules io: {0}")]
    Io(#[from] std::io::Error),
    #[error("rules parse: {0}")]
    Parse(String),
    #[error("rules invalid: {0}")]
    Invalid(String),
    #[error("rule `{rule}`: {source}")]
    Rule {
        rule: String,
        #[source]
        source: PredicateError,
    },
}

#[derive(Debug, Clone)]
pub struct DecisionRule {
    pub id: String,
    pub priority: i32,
    pub when: Expr,
    /// Original condition text, echoed into traces.
    pub source: String,
    pub target: u16,
    pub state: String,
    pub hold_windows: u32,
    pub cooldown_s: f64,
    pub params: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RuleDefaults {
    pub hold_windows: u32,
    pub cooldown_s: f64,
}

impl Default for RuleDefaults {
    fn default() -> Self {
        RuleDefaults { hold_windows: 2, cooldown_s: 60.0 }
    }
}

#[derive(Debug, Clone)]
pub struct RuleSet {
    pub devices: Vec<u16>,
    pub defaults: RuleDefaults,
    pub rules: Vec<DecisionRule>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRuleSet {
    version: String,
    devices: Vec<u16>,
    #[serde(default)]
    defaults: RuleDefaults,
    #[serde(default)]
    rules: Vec<RawRule>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRule {
    id: String,
    priority: i32,
    when: String,
    target: u16,
    state: String,
    hold_windows: Option<u32>,
    cooldown_s: Option<f64>,
    #[serde(default)]
    params: BTreeMap<String, f64>,
}

/// Fields a decision condition may reference.
pub const DECISION_FIELDS: &[(&str, Kind)] = &[
    ("activity", Kind::Str),
    ("activity_confidence", Kind::Num),
    ("emotion", Kind::Str),
    ("emotion_confidence", Kind::Num),
    ("temperature", Kind::Num),
    ("humidity", Kind::Num),
    ("tod", Kind::Num),
];

impl RuleSet {
    pub fn parse(text: &str) -> Result<RuleSet, RuleError> {
        let raw: RawRuleSet =
            toml::from_str(text).map_err(|e| RuleError::Parse(e.to_string()))?;
        if raw.version != RULES_VERSION {
            return Err(RuleError::Invalid(format!(
                "unsupported rules version {:?}",
                raw.version
            )));
        }
        let mut ids = std::collections::BTreeSet::new();
        let mut rules = Vec::with_capacity(raw.rules.len());
        for r in &raw.rules {
            if !ids.insert(r.id.clone()) {
                return Err(RuleError::Invalid(format!("duplicate rule id {:?}", r.id)));
            }
            if !raw.devices.contains(&r.target) {
                return Err(RuleError::Invalid(format!(
                    "rule {:?} targets undeclared appliance {}",
                    r.id, r.target
                )));
            }
            if r.state.is_empty() {
                return Err(RuleError::Invalid(format!("rule {:?} commands an empty state", r.id)));
            }
            let hold_windows = r.hold_windows.unwrap_or(raw.defaults.hold_windows);
            let cooldown_s = r.cooldown_s.unwrap_or(raw.defaults.cooldown_s);
            if hold_windows == 0 {
                return Err(RuleError::Invalid(format!("rule {:?} hold_windows must be >= 1", r.id)));
            }
            if !(cooldown_s >= 0.0 && cooldown_s.is_finite()) {
                return Err(RuleError::Invalid(format!("rule {:?} cooldown_s invalid", r.id)));
            }
            if r.params.values().any(|v| !v.is_finite()) {
                return Err(RuleError::Invalid(format!("rule {:?} has non-finite params", r.id)));
            }
            let param_names: Vec<&str> = r.params.keys().map(String::as_str).collect();
            let vocab = Vocabulary {
                fields: DECISION_FIELDS,
                device_ids: &raw.devices,
                params: &param_names,
            };
            let when = Expr::parse(&r.when)
                .and_then(|e| e.check(&vocab).map(|()| e))
                .map_err(|source| RuleError::Rule { rule: r.id.clone(), source })?;
            rules.push(DecisionRule {
                id: r.id.clone(),
                priority: r.priority,
                when,
                source: r.when.clone(),
                target: r.target,
                state: r.state.clone(),
                hold_windows,
                cooldown_s,
                params: r.params.clone(),
            });
        }
        Ok(RuleSet { devices: raw.devices, defaults: raw.defaults, rules })
    }

    pub fn load(path: &Path) -> Result<RuleSet, RuleError> {
        RuleSet::parse(&std::fs::read_to_string(path)?)
    }

    /// The rule set compiled into the binary; also the documented default.
    pub fn builtin() -> RuleSet {
        RuleSet::parse(include_str!("../../../fixtures/rules_default.shr"))
            .expect("embedded rules are valid")
    }

    /// Cross-check appliance references against a scenario's declarations.
    pub fn check_devices(&self, declared: &[u16]) -> Result<(), RuleError> {
        for id in &self.devices {
            if !declared.contains(id) {
                return Err(RuleError::Invalid(format!(
                    "rules reference appliance {id}, which the scenario does not declare"
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Window state and the engine

/// One window of fused room state, as the decision layer sees it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowState {
    pub start_ns: Nanos,
    pub end_ns: Nanos,
    pub activity: String,
    pub activity_confidence: f64,
    pub emotion: String,
    pub emotion_confidence: f64,
    pub temperature: Option<f64>,
    pub humidity: Option<f64>,
    pub tod_s: f64,
    /// Appliance states as observed by the usage sensors.
    pub devices: BTreeMap<u16, String>,
}

struct RuleScope<'a> {
    window: &'a WindowState,
    view: &'a BTreeMap<u16, String>,
    params: &'a BTreeMap<String, f64>,
}

impl Scope for RuleScope<'_> {
    fn field(&self, name: &str) -> Value {
        let w = self.window;
        match name {
            "activity" => Value::Str(w.activity.clone()),
            "activity_confidence" => Value::Num(w.activity_confidence),
            "emotion" => Value::Str(w.emotion.clone()),
            "emotion_confidence" => Value::Num(w.emotion_confidence),
            "temperature" => w.temperature.map_or(Value::Missing, Value::Num),
            "humidity" => w.humidity.map_or(Value::Missing, Value::Num),
            "tod" => Value::Num(w.tod_s),
            _ => Value::Missing,
        }
    }

    fn device(&self, id: u16) -> Value {
        self.view.get(&id).cloned().map_or(Value::Missing, Value::Str)
    }

    fn param(&self, name: &str) -> Option<f64> {
        self.params.get(name).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Command {
    pub rule: String,
    pub target: u16,
    pub state: String,
    pub priority: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suppressed {
    pub rule: String,
    /// The rule that outranked it for the same appliance.
    pub by: String,
    pub target: u16,
}

/// Everything that happened in one decided window; one JSON line of the
/// decision log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub start_ns: Nanos,
    pub end_ns: Nanos,
    pub activity: String,
    pub emotion: String,
    pub tod_s: f64,
    pub commands: Vec<Command>,
    pub suppressed: Vec<Suppressed>,
}

#[derive(Debug)]
pub struct DecisionEngine<'a> {
    rules: &'a RuleSet,
    holds: BTreeMap<String, u32>,
    last_fire_end: BTreeMap<String, Nanos>,
    /// Commanded states assumed in effect until the observed state agrees.
    overlay: BTreeMap<u16, String>,
}

impl<'a> DecisionEngine<'a> {
    pub fn new(rules: &'a RuleSet) -> DecisionEngine<'a> {
        DecisionEngine {
            rules,
            holds: BTreeMap::new(),
            last_fire_end: BTreeMap::new(),
            overlay: BTreeMap::new(),
        }
    }

    /// The appliance states the engine currently believes, observed values
    /// overridden by not-yet-acknowledged commands.
    pub fn device_view(&self, observed: &BTreeMap<u16, String>) -> BTreeMap<u16, String> {
        let mut view = observed.clone();
        for (id, state) in &self.overlay {
            view.insert(*id, state.clone());
        }
        view
    }

    /// Feeds one window; returns a record when at least one command fired.
    pub fn step(&mut self, w: &WindowState) -> Option<DecisionRecord> {
        // Observed state catching up with a command acknowledges it.
        self.overlay.retain(|id, state| w.devices.get(id) != Some(state));
        let view = self.device_view(&w.devices);

        // Hold counting and eligibility.
        let mut eligible: Vec<&DecisionRule> = Vec::new();
        for rule in &self.rules.rules {
            let scope = RuleScope { window: w, view: &view, params: &rule.params };
            if rule.when.eval(&scope) {
                let held = self.holds.entry(rule.id.clone()).or_insert(0);
                *held += 1;
                let cooled = self.last_fire_end.get(&rule.id).is_none_or(|&t| {
                    w.start_ns - t >= (rule.cooldown_s * NS_PER_SEC as f64) as Nanos
                });
                if *held >= rule.hold_windows && cooled {
                    eligible.push(rule);
                }
            } else {
                self.holds.insert(rule.id.clone(), 0);
            }
        }
        if eligible.is_empty() {
            return None;
        }

        // One winner per appliance: highest priority, ties to the smaller id.
        let mut by_target: BTreeMap<u16, Vec<&DecisionRule>> = BTreeMap::new();
        for r in eligible {
            by_target.entry(r.target).or_default().push(r);
        }
        let mut commands = Vec::new();
        let mut suppressed = Vec::new();
        for (target, mut group) in by_target {
            group.sort_by(|a, b| b.priority.cmp(&a.priority).then(a.id.cmp(&b.id)));
            let winner = group[0];
            commands.push(Command {
                rule: winner.id.clone(),
                target,
                state: winner.state.clone(),
                priority: winner.priority,
            });
            for loser in &group[1..] {
                suppressed.push(Suppressed {
                    rule: loser.id.clone(),
                    by: winner.id.clone(),
                    target,
                });
            }
            self.overlay.insert(target, winner.state.clone());
            self.last_fire_end.insert(winner.id.clone(), w.end_ns);
        }
        Some(DecisionRecord {
            start_ns: w.start_ns,
            end_ns: w.end_ns,
            activity: w.activity.clone(),
            emotion: w.emotion.clone(),
            tod_s: w.tod_s,
            commands,
            suppressed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn window(k: i64, activity: &str, devices: &[(u16, &str)]) -> WindowState {
        let start = k * 2_500_000_000;
        WindowState {
            start_ns: start,
            end_ns: start + 5 * NS_PER_SEC,
            activity: activity.into(),
            activity_confidence: 0.9,
            emotion: "neutral".into(),
            emotion_confidence: 0.5,
            temperature: Some(21.0),
            humidity: Some(45.0),
            tod_s: 80_000.0,
            devices: devices.iter().map(|&(d, s)| (d, s.to_string())).collect(),
        }
    }

    const OBSERVED: &[(u16, &str)] = &[(13, "off"), (14, "on"), (15, "off"), (16, "idle")];

    #[test]
    fn builtin_rules_parse_with_defaults() {
        let r = RuleSet::builtin();
        assert_eq!(r.rules.len(), 8);
        assert_eq!(r.devices, vec![13, 14, 15, 16]);
        let vent = r.rules.iter().find(|x| x.id == "cook_vent_on").unwrap();
        assert_eq!(vent.hold_windows, 2);
        assert_eq!(vent.cooldown_s, 60.0);
        let heat = r.rules.iter().find(|x| x.id == "comfort_heat").unwrap();
        assert_eq!(heat.params["t_low"], 19.0);
        r.check_devices(&[12, 13, 14, 15, 16]).unwrap();
        assert!(r.check_devices(&[13, 14]).is_err());
    }

    #[test]
    fn validation_rejects_malformed_sets() {
        let base = include_str!("../../../fixtures/rules_default.shr");
        assert!(matches!(
            RuleSet::parse(&base.replace("shr/1", "shr/2")),
            Err(RuleError::Invalid(_))
        ));
        assert!(matches!(
            RuleSet::parse(&base.replace("id = \"sleep_tv_off\"", "id = \"sleep_lights_off\"")),
            Err(RuleError::Invalid(_))
        ));
        assert!(matches!(
            RuleSet::parse(&base.replace("target = 15", "target = 99")),
            Err(RuleError::Invalid(_))
        ));
        assert!(matches!(
            RuleSet::parse(&base.replace("$t_low", "$t_wrong")),
            Err(RuleError::Rule { .. })
        ));
        assert!(matches!(
            RuleSet::parse(&base.replace("activity = 'sleeping'", "mood = 'sleepy'")),
            Err(RuleError::Rule { .. })
        ));
        assert!(matches!(
            RuleSet::parse(&(base.to_string() + "\n[[rules]]\nid = \"z\"\npriority = 1\nwhen = \"tod < 1\"\ntarget = 13\nstate = \"x\"\nhold_windows = 0\n")),
            Err(RuleError::Invalid(_))
        ));
    }

    #[test]
    fn hold_fire_overlay_and_release() {
        let rules = RuleSet::builtin();
        let mut engine = DecisionEngine::new(&rules);

        // Cooking: no fire on the first window, vent on at the second.
        assert!(engine.step(&window(0, "cooking", OBSERVED)).is_none());
        let rec = engine.step(&window(1, "cooking", OBSERVED)).unwrap();
        assert_eq!(rec.commands.len(), 1);
        assert_eq!(
            (rec.commands[0].rule.as_str(), rec.commands[0].target, rec.commands[0].state.as_str()),
            ("cook_vent_on", 15, "on")
        );
        assert!(rec.suppressed.is_empty());

        // Still cooking: the overlay says the vent is on, so the guard
        // condition is false and nothing re-fires.
        assert!(engine.step(&window(2, "cooking", OBSERVED)).is_none());

        // Done cooking: vent-off needs its own two windows.
        assert!(engine.step(&window(3, "eating", OBSERVED)).is_none());
        let rec = engine.step(&window(4, "eating", OBSERVED)).unwrap();
        assert_eq!(rec.commands[0].rule, "cook_vent_off");
        assert_eq!(engine.device_view(&window(4, "eating", OBSERVED).devices)[&15], "off");
    }

    #[test]
    fn priority_arbitration_and_tie_break() {
        let text = r#"
version = "shr/1"
devices = [14]
[defaults]
hold_windows = 1
cooldown_s = 0.0

[[rules]]
id = "b_low"
priority = 3
when = "activity = 'sleeping'"
target = 14
state = "dim"

[[rules]]
id = "a_high"
priority = 7
when = "activity = 'sleeping'"
target = 14
state = "off"

[[rules]]
id = "c_tie"
priority = 7
when = "activity = 'sleeping'"
target = 14
state = "night"
"#;
        let rules = RuleSet::parse(text).unwrap();
        let mut engine = DecisionEngine::new(&rules);
        let rec = engine.step(&window(0, "sleeping", &[(14, "on")])).unwrap();
        assert_eq!(rec.commands.len(), 1);
        // Priority 7 beats 3; between a_high and c_tie the smaller id wins.
        assert_eq!(rec.commands[0].rule, "a_high");
        assert_eq!(rec.commands[0].state, "off");
        let mut losers: Vec<(&str, &str)> = rec
            .suppressed
            .iter()
            .map(|s| (s.rule.as_str(), s.by.as_str()))
            .collect();
        losers.sort();
        assert_eq!(losers, vec![("b_low", "a_high"), ("c_tie", "a_high")]);
    }

    #[test]
    fn cooldown_gates_refire_and_observed_state_acknowledges() {
        let text = r#"
version = "shr/1"
devices = [16]
[defaults]
hold_windows = 2
cooldown_s = 10.0

[[rules]]
id = "heat"
priority = 5
when = "temperature < $t_low"
target = 16
state = "heat"
[rules.params]
t_low = 19.0
"#;
        let rules = RuleSet::parse(text).unwrap();
        let mut engine = DecisionEngine::new(&rules);
        let cold = |k: i64| {
            let mut w = window(k, "sitting", &[(16, "idle")]);
            w.temperature = Some(15.0);
            w
        };
        assert!(engine.step(&cold(0)).is_none());
        assert!(engine.step(&cold(1)).is_some(), "hold satisfied");
        // Fire ended at 2.5 + 5 = 7.5 s; cooldown 10 s means eligibility
        // returns at window start >= 17.5 s, i.e. k = 7.
        for k in 2..7 {
            assert!(engine.step(&cold(k)).is_none(), "window {k} inside cooldown");
        }
        assert!(engine.step(&cold(7)).is_some());

        // Observed state matching the overlay acknowledges the command.
        let mut acked = cold(8);
        acked.devices.insert(16, "heat".into());
        engine.step(&acked);
        assert_eq!(engine.device_view(&acked.devices)[&16], "heat");

        // Missing temperature satisfies nothing.
        let mut engine = DecisionEngine::new(&rules);
        let mut blank = cold(0);
        blank.temperature = None;
        assert!(engine.step(&blank).is_none());
        assert!(engine.step(&blank).is_none());
    }

    #[test]
    fn hold_resets_when_condition_breaks() {
        let rules = RuleSet::builtin();
        let mut engine = DecisionEngine::new(&rules);
        assert!(engine.step(&window(0, "cooking", OBSERVED)).is_none());
        assert!(engine.step(&window(1, "walking", OBSERVED)).is_none());
        assert!(engine.step(&window(2, "cooking", OBSERVED)).is_none(), "count restarted");
        assert!(engine.step(&window(3, "cooking", OBSERVED)).is_some());
    }

    #[test]
    fn decision_records_serialize_stably() {
        let rec = DecisionRecord {
            start_ns: 0,
            end_ns: 5_000_000_000,
            activity: "sleeping".into(),
            emotion: "tired".into(),
            tod_s: 79_320.0,
            commands: vec![Command {
                rule: "sleep_lights_off".into(),
                target: 14,
                state: "off".into(),
                priority: 10,
            }],
            suppressed: vec![],
        };
        let line = serde_json::to_string(&rec).unwrap();
        assert_eq!(
            line,
            "{\"start_ns\":0,\"end_ns\":5000000000,\"activity\":\"sleeping\",\
             \"emotion\":\"tired\",\"tod_s\":79320.0,\"commands\":[{\"rule\":\
             \"sleep_lights_off\",\"target\":14,\"state\":\"off\",\"priority\":10}],\
             \"suppressed\":[]}"
        );
        let back: DecisionRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back, rec);
    }
}
