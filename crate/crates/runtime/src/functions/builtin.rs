use edgetwin_core::Severity;
use edgetwin_messaging::command;
use serde_json::Value;

use super::{Actuators, FunctionError, Params, Sensors};

pub const VOLT_LIMITATION: &str = "VoltLimitation";

/// Opens every bound switch when any value of a sensor's latest reading is
/// strictly above `threshold`, and raises a critical alarm.
pub fn volt_limitation(sensors: &Sensors, actuators: &Actuators, params: &Params) -> Result<Option<Value>, FunctionError> {
    let threshold = params
        .get("threshold")
        .and_then(Value::as_f64)
        .ok_or_else(|| FunctionError::MissingParameter("threshold".into()))?;

    let over = sensors.values().find_map(|s| {
        let m = s.latest()?;
        let peak = m.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (peak > threshold).then(|| (s.label().to_string(), peak))
    });
    let Some((sensor, peak)) = over else {
        return Ok(None);
    };

    let cmd = command("open");
    for switch in actuators.labels() {
        actuators.actuate(switch, cmd.clone())?;
    }
    actuators.alarm(
        Severity::Critical,
        Some(&sensor),
        &format!("overvoltage on {sensor}: {peak} > {threshold}, switch opened"),
    );
    Ok(Some(serde_json::to_value(cmd).unwrap()))
}
