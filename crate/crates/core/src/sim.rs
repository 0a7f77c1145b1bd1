//! Deterministic simulated sensors and the reference plugin logic.
//!
//! The same [`SimPlugin`] state machine backs the in-process reference
//! plugin and the `mosden-sim-plugin` executable, so both transports emit
//! identical sequences for identical configuration.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::{self, BufRead, Write};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value as Json;

use crate::element::element_to_json;
use crate::model::{DataField, Schema, StreamElement, TimestampMs, Value, ValueType};
use crate::protocol::{Handshake, PluginReply, PluginRequest};

pub const SIM_PLUGIN_ID: &str = "sim";
pub const SIM_PLUGIN_VERSION: &str = "1.0.0";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimKind {
    Constant,
    Ramp,
    Sine,
    SeededNoise,
}

impl SimKind {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "constant" => SimKind::Constant,
            "ramp" => SimKind::Ramp,
            "sine" => SimKind::Sine,
            "seeded_noise" => SimKind::SeededNoise,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StallOn {
    Configuration,
    Schema,
    Readings,
}

/// Injected misbehaviour, one per host error path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultMode {
    None,
    /// Emits a string where the schema declares a double.
    WrongType,
    /// Never answers the selected call.
    Stall(StallOn),
    /// Re-emits the first timestamp, which is older than the stream head.
    DuplicateTimestamp,
}

/// Immutable description of one simulated sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SimProfile {
    pub kind: SimKind,
    pub seed: u64,
    pub period_ms: u64,
    pub amplitude: f64,
    pub offset: f64,
    pub sampling_ms: u64,
    /// When set, call `i` is stamped `epoch_ms + i * sampling_ms` instead of
    /// the reading clock.
    pub epoch_ms: Option<TimestampMs>,
    pub schema: Schema,
    pub fault: FaultMode,
    /// The fault fires on calls where `(index + 1) % fault_every == 0`.
    pub fault_every: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

fn parse_num<T: std::str::FromStr>(
    config: &BTreeMap<String, String>,
    key: &str,
    default: T,
) -> Result<T, ConfigError> {
    match config.get(key) {
        None => Ok(default),
        Some(s) => s
            .parse()
            .map_err(|_| ConfigError(format!("invalid value for config key {key}: {s:?}"))),
    }
}

impl SimProfile {
    /// Builds a profile from a binding config map. `seed` is required; all
    /// other keys have defaults and unknown keys are ignored.
    pub fn from_config(config: &BTreeMap<String, String>) -> Result<Self, ConfigError> {
        let seed = config
            .get("seed")
            .ok_or_else(|| ConfigError("missing required config key: seed".into()))?
            .parse()
            .map_err(|_| ConfigError("invalid value for config key seed".into()))?;
        let kind_s = config.get("kind").map_or("constant", String::as_str);
        let kind = SimKind::parse(kind_s)
            .ok_or_else(|| ConfigError(format!("unknown kind {kind_s:?}")))?;
        let stall_on = match config.get("stall_on").map(String::as_str) {
            None | Some("readings") => StallOn::Readings,
            Some("schema") => StallOn::Schema,
            Some("configuration") => StallOn::Configuration,
            Some(other) => return Err(ConfigError(format!("unknown stall_on {other:?}"))),
        };
        let fault = match config.get("fault_mode").map(String::as_str) {
            None | Some("none") => FaultMode::None,
            Some("wrong_type") => FaultMode::WrongType,
            Some("stall") => FaultMode::Stall(stall_on),
            Some("duplicate_timestamp") => FaultMode::DuplicateTimestamp,
            Some(other) => return Err(ConfigError(format!("unknown fault_mode {other:?}"))),
        };
        let field = config.get("field").map_or("temp", String::as_str);
        let unit = config.get("unit").map_or("celsius", String::as_str);
        let schema = Schema::new(vec![DataField::new(
            field,
            ValueType::Double,
            (!unit.is_empty()).then(|| unit.to_string()),
        )
        .map_err(|e| ConfigError(e.to_string()))?])
        .map_err(|e| ConfigError(e.to_string()))?;
        let period_ms = parse_num(config, "period_ms", 60_000u64)?;
        let sampling_ms = parse_num(config, "sampling_ms", 1000u64)?;
        let fault_every = parse_num(config, "fault_every", 1u64)?;
        if period_ms == 0 || sampling_ms == 0 || fault_every == 0 {
            return Err(ConfigError(
                "period_ms, sampling_ms and fault_every must be positive".into(),
            ));
        }
        let epoch_ms = config
            .get("epoch_ms")
            .map(|s| {
                s.parse()
                    .map_err(|_| ConfigError("invalid value for config key epoch_ms".into()))
            })
            .transpose()?;
        Ok(Self {
            kind,
            seed,
            period_ms,
            amplitude: parse_num(config, "amplitude", 1.0)?,
            offset: parse_num(config, "offset", 0.0)?,
            sampling_ms,
            epoch_ms,
            schema,
            fault,
            fault_every,
        })
    }

    pub fn value_at(&self, call_index: u64) -> f64 {
        match self.kind {
            SimKind::Constant => self.offset,
            SimKind::Ramp => self.offset + call_index as f64,
            SimKind::Sine => {
                let t = (call_index * self.sampling_ms) as f64;
                self.offset + self.amplitude * (2.0 * PI * t / self.period_ms as f64).sin()
            }
            SimKind::SeededNoise => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_word_pos(u128::from(call_index) * 2);
                self.offset + self.amplitude * rng.gen_range(-1.0..1.0)
            }
        }
    }

    fn faulted(&self, call_index: u64) -> bool {
        self.fault != FaultMode::None && (call_index + 1) % self.fault_every == 0
    }
}

/// Pure reading for `call_index`, stamped from `epoch_ms` (or 0).
pub fn next_value(p: &SimProfile, call_index: u64) -> StreamElement {
    StreamElement::new(
        p.epoch_ms.unwrap_or(0) + (call_index * p.sampling_ms) as i64,
        vec![Value::Double(p.value_at(call_index))],
    )
}

/// What the plugin does in response to one request.
#[derive(Debug, Clone, PartialEq)]
pub enum SimAction {
    Reply(PluginReply),
    /// Never reply (simulated hang).
    Stall,
}

pub type ReadClock = Box<dyn Fn() -> TimestampMs + Send + Sync>;

pub fn system_time_ms() -> TimestampMs {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or(0)
}

/// Reference plugin state machine: owns its call counter.
pub struct SimPlugin {
    profile: Option<SimProfile>,
    calls: u64,
    first_ts: Option<TimestampMs>,
    clock: ReadClock,
}

impl std::fmt::Debug for SimPlugin {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SimPlugin")
            .field("profile", &self.profile)
            .field("calls", &self.calls)
            .finish()
    }
}

impl Default for SimPlugin {
    fn default() -> Self {
        Self::with_clock(Box::new(system_time_ms))
    }
}

impl SimPlugin {
    pub fn with_clock(clock: ReadClock) -> Self {
        Self {
            profile: None,
            calls: 0,
            first_ts: None,
            clock,
        }
    }

    pub fn profile(&self) -> Option<&SimProfile> {
        self.profile.as_ref()
    }

    pub fn handle(&mut self, req: &PluginRequest) -> SimAction {
        match req {
            PluginRequest::SetConfiguration { config } => match SimProfile::from_config(config) {
                Ok(p) => {
                    if p.fault == FaultMode::Stall(StallOn::Configuration) {
                        return SimAction::Stall;
                    }
                    self.profile = Some(p);
                    self.calls = 0;
                    self.first_ts = None;
                    SimAction::Reply(PluginReply::Ok(Json::Null))
                }
                Err(e) => SimAction::Reply(PluginReply::Err(e.0)),
            },
            PluginRequest::GetDataStructure => {
                let Some(p) = &self.profile else {
                    return SimAction::Reply(PluginReply::Err("not configured".into()));
                };
                if p.fault == FaultMode::Stall(StallOn::Schema) {
                    return SimAction::Stall;
                }
                SimAction::Reply(PluginReply::Ok(
                    serde_json::to_value(&p.schema).expect("schema serializes"),
                ))
            }
            PluginRequest::GetReadings => {
                let Some(p) = &self.profile else {
                    return SimAction::Reply(PluginReply::Err("not configured".into()));
                };
                let idx = self.calls;
                let faulted = p.faulted(idx);
                if faulted && p.fault == FaultMode::Stall(StallOn::Readings) {
                    return SimAction::Stall;
                }
                self.calls += 1;
                let mut e = next_value(p, idx);
                if p.epoch_ms.is_none() {
                    e.timestamp = (self.clock)();
                }
                let first = *self.first_ts.get_or_insert(e.timestamp);
                let mut json = element_to_json(&p.schema, &e).expect("sim element matches schema");
                if faulted {
                    match p.fault {
                        FaultMode::WrongType => {
                            let name = p.schema.fields()[0].name();
                            json["values"][name] = Json::String("not-a-number".into());
                        }
                        FaultMode::DuplicateTimestamp => json["timestamp"] = first.into(),
                        _ => {}
                    }
                }
                SimAction::Reply(PluginReply::Ok(json))
            }
        }
    }
}

/// Runs the reference plugin over line-delimited stdio until stdin closes.
pub fn run_stdio<R: BufRead, W: Write>(
    input: R,
    mut output: W,
    mut plugin: SimPlugin,
) -> io::Result<()> {
    let hs = Handshake::new(SIM_PLUGIN_ID, SIM_PLUGIN_VERSION);
    writeln!(
        output,
        "{}",
        serde_json::to_string(&hs).expect("handshake serializes")
    )?;
    output.flush()?;
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let action = match serde_json::from_str::<PluginRequest>(&line) {
            Ok(req) => plugin.handle(&req),
            Err(e) => SimAction::Reply(PluginReply::Err(format!("malformed request: {e}"))),
        };
        match action {
            SimAction::Reply(r) => {
                output.write_all(r.to_line().as_bytes())?;
                output.flush()?;
            }
            SimAction::Stall => loop {
                std::thread::park();
            },
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    #[test]
    fn ramp_minute_average() {
        let p = SimProfile::from_config(&cfg(&[("seed", "1"), ("kind", "ramp")])).unwrap();
        let values: Vec<f64> = (0..60).map(|i| p.value_at(i)).collect();
        assert_eq!(values[0], 0.0);
        assert_eq!(values[59], 59.0);
        // arithmetic series: (0 + 59) / 2
        assert_eq!(values.iter().sum::<f64>() / 60.0, 29.5);
    }

    #[test]
    fn constant_profile() {
        let p = SimProfile::from_config(&cfg(&[("seed", "1"), ("offset", "7")])).unwrap();
        assert!((0..100).all(|i| p.value_at(i) == 7.0));
    }

    #[test]
    fn sine_profile_quarter_period() {
        let p = SimProfile::from_config(&cfg(&[
            ("seed", "1"),
            ("kind", "sine"),
            ("period_ms", "4000"),
            ("amplitude", "2"),
            ("offset", "10"),
        ]))
        .unwrap();
        assert_eq!(p.value_at(0), 10.0);
        assert!((p.value_at(1) - 12.0).abs() < 1e-12);
        assert!((p.value_at(3) - 8.0).abs() < 1e-12);
    }

    #[test]
    fn noise_is_pure_in_seed_and_index() {
        let p = SimProfile::from_config(&cfg(&[("seed", "42"), ("kind", "seeded_noise")])).unwrap();
        let a: Vec<u64> = (0..50).map(|i| p.value_at(i).to_bits()).collect();
        let b: Vec<u64> = (0..50)
            .rev()
            .map(|i| p.value_at(i).to_bits())
            .rev()
            .collect();
        assert_eq!(a, b);
        assert!(p.value_at(0) >= -1.0 && p.value_at(0) < 1.0);
        let q = SimProfile::from_config(&cfg(&[("seed", "43"), ("kind", "seeded_noise")])).unwrap();
        assert_ne!(p.value_at(0), q.value_at(0));
    }

    #[test]
    fn seed_is_required() {
        let mut sim = SimPlugin::default();
        let reply = sim.handle(&PluginRequest::SetConfiguration { config: cfg(&[]) });
        match reply {
            SimAction::Reply(PluginReply::Err(msg)) => assert!(msg.contains("seed"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn reference_schema() {
        let mut sim = SimPlugin::default();
        sim.handle(&PluginRequest::SetConfiguration {
            config: cfg(&[("seed", "42")]),
        });
        assert_eq!(
            sim.handle(&PluginRequest::GetDataStructure),
            SimAction::Reply(PluginReply::Ok(serde_json::json!([
                {"name": "temp", "value_type": "double", "unit": "celsius"}
            ])))
        );
    }

    #[test]
    fn faults_follow_schedule() {
        let mut sim = SimPlugin::with_clock(Box::new(|| 0));
        sim.handle(&PluginRequest::SetConfiguration {
            config: cfg(&[
                ("seed", "1"),
                ("fault_mode", "wrong_type"),
                ("fault_every", "2"),
                ("epoch_ms", "1000"),
            ]),
        });
        let kinds: Vec<bool> = (0..4)
            .map(|_| match sim.handle(&PluginRequest::GetReadings) {
                SimAction::Reply(PluginReply::Ok(j)) => j["values"]["temp"].is_string(),
                other => panic!("{other:?}"),
            })
            .collect();
        assert_eq!(kinds, vec![false, true, false, true]);
    }

    #[test]
    fn stdio_session() {
        let input = concat!(
            r#"{"op":"set_configuration","config":{"seed":"3","kind":"ramp","epoch_ms":"5000"}}"#,
            "\n",
            r#"{"op":"get_data_structure"}"#,
            "\n",
            r#"{"op":"get_readings"}"#,
            "\n",
            "garbage\n",
        );
        let mut out = Vec::new();
        run_stdio(input.as_bytes(), &mut out, SimPlugin::default()).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            r#"{"protocol":"mosden-plugin/1","plugin_id":"sim","version":"1.0.0"}"#
        );
        assert_eq!(lines[1], r#"{"ok":true,"result":null}"#);
        assert_eq!(
            lines[3],
            r#"{"ok":true,"result":{"timestamp":5000,"values":{"temp":0.0}}}"#
        );
        assert!(lines[4].starts_with(r#"{"ok":false,"error":"malformed request"#));
    }
}
