use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::BusError;

pub const WILDCARD: &str = "*";

/// Dot-separated topic address, e.g. `edge.edge1.sensors.Voltmeter Gen1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RoutingKey {
    segments: Vec<String>,
}

fn check_atom(s: &str, whole: &str) -> Result<(), BusError> {
    if s.is_empty() || s.contains('.') || s == WILDCARD {
        return Err(BusError::MalformedKey(whole.to_string()));
    }
    Ok(())
}

impl RoutingKey {
    pub fn new<I, S>(segments: I) -> Result<Self, BusError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let segments: Vec<String> = segments.into_iter().map(Into::into).collect();
        let whole = segments.join(".");
        if segments.is_empty() {
            return Err(BusError::MalformedKey(whole));
        }
        for s in &segments {
            check_atom(s, &whole)?;
        }
        Ok(Self { segments })
    }

    pub fn sensor(edge: &str, sensor: &str) -> Result<Self, BusError> {
        Self::new(["edge", edge, "sensors", sensor])
    }

    pub fn actuator(edge: &str, actuator: &str) -> Result<Self, BusError> {
        Self::new(["edge", edge, "actuators", actuator])
    }

    pub fn heartbeat(node: &str) -> Result<Self, BusError> {
        Self::new(["edge", node, "heartbeat"])
    }

    pub fn alarms(node: &str) -> Result<Self, BusError> {
        Self::new(["edge", node, "alarms"])
    }

    pub fn agent_tasks(node: &str) -> Result<Self, BusError> {
        Self::new(["agent", node, "tasks"])
    }

    pub fn agent_results(node: &str) -> Result<Self, BusError> {
        Self::new(["agent", node, "results"])
    }

    pub fn segments(&self) -> &[String] {
        &self.segments
    }

    pub fn segment(&self, i: usize) -> Option<&str> {
        self.segments.get(i).map(String::as_str)
    }

    /// `(edge, sensor)` for keys of the shape `edge.<E>.sensors.<S>`.
    pub fn as_sensor(&self) -> Option<(&str, &str)> {
        match self.segments.as_slice() {
            [a, e, s, l] if a == "edge" && s == "sensors" => Some((e, l)),
            _ => None,
        }
    }

    /// `(edge, actuator)` for keys of the shape `edge.<E>.actuators.<A>`.
    pub fn as_actuator(&self) -> Option<(&str, &str)> {
        match self.segments.as_slice() {
            [a, e, s, l] if a == "edge" && s == "actuators" => Some((e, l)),
            _ => None,
        }
    }
}

impl fmt::Display for RoutingKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.segments.join("."))
    }
}

impl FromStr for RoutingKey {
    type Err = BusError;

    fn from_str(s: &str) -> Result<Self, BusError> {
        Self::new(s.split('.'))
    }
}

impl Serialize for RoutingKey {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for RoutingKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Subscription pattern. `*` matches exactly one segment.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct KeyPattern {
    segments: Vec<Option<String>>,
}

impl KeyPattern {
    pub fn matches(&self, key: &RoutingKey) -> bool {
        self.segments.len() == key.segments.len()
            && self
                .segments
                .iter()
                .zip(&key.segments)
                .all(|(p, k)| p.as_ref().is_none_or(|p| p == k))
    }

    pub fn exact(key: &RoutingKey) -> Self {
        Self {
            segments: key.segments.iter().cloned().map(Some).collect(),
        }
    }
}

impl fmt::Display for KeyPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = self
            .segments
            .iter()
            .map(|s| s.as_deref().unwrap_or(WILDCARD))
            .collect();
        f.write_str(&parts.join("."))
    }
}

impl FromStr for KeyPattern {
    type Err = BusError;

    fn from_str(s: &str) -> Result<Self, BusError> {
        let segments = s
            .split('.')
            .map(|seg| match seg {
                WILDCARD => Ok(None),
                _ => check_atom(seg, s).map(|_| Some(seg.to_string())),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { segments })
    }
}

impl Serialize for KeyPattern {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for KeyPattern {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn key(s: &str) -> RoutingKey {
        s.parse().unwrap()
    }

    fn pat(s: &str) -> KeyPattern {
        s.parse().unwrap()
    }

    #[test]
    fn spec_examples() {
        assert!(pat("edge.*.sensors.*").matches(&key("edge.edge1.sensors.V1")));
        assert!(pat("edge.edge1.actuators.*").matches(&key("edge.edge1.actuators.SwitchGen1")));
        assert!(!pat("edge.*.sensors.*").matches(&key("edge.edge1.actuators.S")));
        assert!(!pat("edge.*.sensors.*").matches(&key("edge.edge1.sensors")));
    }

    #[test]
    fn malformed() {
        for bad in ["", "a..b", ".a", "a.", "a.*.b"] {
            assert!(bad.parse::<RoutingKey>().is_err(), "{bad:?}");
        }
        assert!("a..b".parse::<KeyPattern>().is_err());
        assert!(RoutingKey::sensor("e", "bad.label").is_err());
        let k = RoutingKey::sensor("edge1", "Voltmeter Gen1").unwrap();
        assert_eq!(k.to_string(), "edge.edge1.sensors.Voltmeter Gen1");
        assert_eq!(k.as_sensor(), Some(("edge1", "Voltmeter Gen1")));
        assert_eq!(k.as_actuator(), None);
    }

    fn naive(pattern: &str, key: &str) -> bool {
        let p: Vec<&str> = pattern.split('.').collect();
        let k: Vec<&str> = key.split('.').collect();
        p.len() == k.len() && p.iter().zip(&k).all(|(a, b)| *a == "*" || a == b)
    }

    proptest! {
        #[test]
        fn matching_equals_naive_oracle(
            k in proptest::collection::vec(proptest::sample::select(vec!["a", "b", "c"]), 1..5),
            p in proptest::collection::vec(proptest::sample::select(vec!["a", "b", "*"]), 1..5),
        ) {
            let (k, p) = (k.join("."), p.join("."));
            prop_assert_eq!(pat(&p).matches(&key(&k)), naive(&p, &k));
        }
    }
}
