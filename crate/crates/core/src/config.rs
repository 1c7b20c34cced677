//! Sectioned TOML experiment configuration with `section.key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::channel::{dbm_per_hz_to_watts, ChannelParams};
use crate::controller::{BaselinePower, Policy};
use crate::error::{Error, Result};
use crate::workloads::ModelKind;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunConfig,
    pub mobility: MobilityConfig,
    pub channel: ChannelConfig,
    pub controller: ControllerConfig,
    pub task: TaskConfig,
    pub bounds: BoundsConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub rounds: usize,
    pub devices: usize,
    pub seed: u64,
    pub round_duration_s: f64,
    pub output_path: String,
    /// Held-out loss that defines rounds-to-target.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_loss: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            rounds: 200,
            devices: 10,
            seed: 1,
            round_duration_s: 10.0,
            output_path: "out".into(),
            target_loss: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MobilityModel {
    Exponential,
    Waypoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MobilityConfig {
    pub model: MobilityModel,
    pub mean_contact_s: f64,
    pub mean_intercontact_s: f64,
    /// Contact constant `C` (`c = C / v`); defaults to `mean_contact_s`.
    #[serde(rename = "C", skip_serializing_if = "Option::is_none")]
    pub contact_const: Option<f64>,
    /// Inter-contact constant `Lambda`; defaults to `mean_intercontact_s`.
    #[serde(rename = "Lambda", skip_serializing_if = "Option::is_none")]
    pub intercontact_const: Option<f64>,
    /// Exponential model: enables `1/v` scaling. Waypoint model: mean speed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub speed_mps: Option<f64>,
    /// Device-MES distance for the exponential model.
    pub distance_m: f64,
    pub area_m: [f64; 2],
    pub range_m: f64,
    /// Waypoint pause upper limit; defaults to the round duration.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_pause_s: Option<f64>,
    /// Waypoint integration step.
    pub step_s: f64,
    /// Separate root seed for mobility streams.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for MobilityConfig {
    fn default() -> Self {
        Self {
            model: MobilityModel::Exponential,
            mean_contact_s: 4.0,
            mean_intercontact_s: 40.0,
            contact_const: None,
            intercontact_const: None,
            speed_mps: None,
            distance_m: 50.0,
            area_m: [1000.0, 1000.0],
            range_m: 100.0,
            max_pause_s: None,
            step_s: 1.0,
            seed: None,
        }
    }
}

impl MobilityConfig {
    /// `(mean contact, mean inter-contact)` after optional speed scaling.
    pub fn contact_means(&self) -> (f64, f64) {
        match self.speed_mps {
            Some(v) if self.model == MobilityModel::Exponential => (
                self.contact_const.unwrap_or(self.mean_contact_s) / v,
                self.intercontact_const.unwrap_or(self.mean_intercontact_s) / v,
            ),
            _ => (self.mean_contact_s, self.mean_intercontact_s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    pub bandwidth_hz: f64,
    pub carrier_ghz: f64,
    pub noise_dbm_hz: f64,
    pub p_max_w: f64,
    pub los_prob: f64,
    pub shadow_sigma_los_db: f64,
    pub shadow_sigma_nlos_db: f64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        let p = ChannelParams::default();
        Self {
            bandwidth_hz: p.bandwidth,
            carrier_ghz: p.carrier_ghz,
            noise_dbm_hz: -174.0,
            p_max_w: p.p_max,
            los_prob: p.los_probability,
            shadow_sigma_los_db: p.shadow_sigma_los_db,
            shadow_sigma_nlos_db: p.shadow_sigma_nlos_db,
        }
    }
}

impl ChannelConfig {
    pub fn params(&self) -> ChannelParams {
        ChannelParams {
            bandwidth: self.bandwidth_hz,
            carrier_ghz: self.carrier_ghz,
            noise_psd: dbm_per_hz_to_watts(self.noise_dbm_hz),
            shadow_sigma_los_db: self.shadow_sigma_los_db,
            shadow_sigma_nlos_db: self.shadow_sigma_nlos_db,
            los_probability: self.los_prob,
            p_max: self.p_max_w,
        }
    }
}

/// Scalar budget or `[min, max]` for a per-device uniform draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BudgetSetting {
    Fixed(f64),
    Range([f64; 2]),
}

/// `"max"`, `"budget_matched"`, or a power in W.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BaselinePowerSetting {
    Watts(f64),
    Named(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub policy: String,
    #[serde(rename = "V")]
    pub v: f64,
    pub energy_budget_j: BudgetSetting,
    pub u_bits: u32,
    pub baseline_power: BaselinePowerSetting,
    /// Refuse uploads that would overspend a device's budget (all policies).
    pub hard_budget: bool,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            policy: "mads".into(),
            v: 1e-4,
            energy_budget_j: BudgetSetting::Range([50.0, 150.0]),
            u_bits: 32,
            baseline_power: BaselinePowerSetting::Named("max".into()),
            hard_budget: false,
        }
    }
}

impl ControllerConfig {
    pub fn policy(&self) -> Result<Policy> {
        Policy::from_name(&self.policy, self.v).ok_or_else(|| {
            Error::config(
                "controller.policy",
                format!(
                    "unknown policy `{}` (expected mads, afl, afl_spar, sfl_spar or optimal)",
                    self.policy
                ),
            )
        })
    }

    pub fn baseline_power(&self) -> Result<BaselinePower> {
        match &self.baseline_power {
            BaselinePowerSetting::Watts(w) => Ok(BaselinePower::Fixed(*w)),
            BaselinePowerSetting::Named(n) => match n.as_str() {
                "max" => Ok(BaselinePower::Max),
                "budget_matched" => Ok(BaselinePower::BudgetMatched),
                other => Err(Error::config(
                    "controller.baseline_power",
                    format!("expected \"max\", \"budget_matched\" or watts, got `{other}`"),
                )),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: ModelKind,
    /// Expected model size; checked against the architecture when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s: Option<usize>,
    pub features: usize,
    pub classes: usize,
    pub hidden: usize,
    pub samples: usize,
    pub test_samples: usize,
    /// Spread of the class centres.
    pub separation: f64,
    pub rho: f64,
    pub batch_size: usize,
    pub eta: f64,
    /// Optional CSV (`features..., label`) replacing the synthetic data.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_path: Option<String>,
    /// Held-out share of a loaded CSV.
    pub test_fraction: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Logistic,
            s: None,
            features: 99,
            classes: 10,
            hidden: 16,
            samples: 2000,
            test_samples: 500,
            separation: 1.0,
            rho: 0.1,
            batch_size: 16,
            eta: 0.05,
            data_path: None,
            test_fraction: 0.2,
        }
    }
}

/// Constants for the bound evaluators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundsConfig {
    #[serde(rename = "L")]
    pub l: f64,
    #[serde(rename = "G2")]
    pub g2: f64,
    pub sigma: f64,
    #[serde(rename = "F0")]
    pub f0_gap: f64,
}

impl Default for BoundsConfig {
    fn default() -> Self {
        Self {
            l: 1.0,
            g2: 1.0,
            sigma: 1.0,
            f0_gap: 1.0,
        }
    }
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::config(
            field,
            format!("must be positive and finite, got {v}"),
        ))
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::config("<file>", e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::config("<file>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<config>", e.to_string()))
    }

    /// Apply one `section.key=value` override and re-validate.
    pub fn set(&self, assignment: &str) -> Result<Self> {
        Self::from_toml_str(&self.to_toml()?, &[assignment.to_string()])
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.run;
        if r.devices == 0 {
            return Err(Error::config("run.devices", "need at least one device"));
        }
        positive("run.round_duration_s", r.round_duration_s)?;
        if r.seed > i64::MAX as u64 {
            return Err(Error::config(
                "run.seed",
                "must fit in a signed 64-bit TOML integer",
            ));
        }
        if let Some(t) = r.target_loss {
            if !t.is_finite() {
                return Err(Error::config("run.target_loss", "must be finite"));
            }
        }

        let m = &self.mobility;
        positive("mobility.mean_contact_s", m.mean_contact_s)?;
        positive("mobility.mean_intercontact_s", m.mean_intercontact_s)?;
        if let Some(c) = m.contact_const {
            positive("mobility.C", c)?;
        }
        if let Some(l) = m.intercontact_const {
            positive("mobility.Lambda", l)?;
        }
        if let Some(v) = m.speed_mps {
            positive("mobility.speed_mps", v)?;
        }
        positive("mobility.distance_m", m.distance_m)?;
        positive("mobility.area_m[0]", m.area_m[0])?;
        positive("mobility.area_m[1]", m.area_m[1])?;
        positive("mobility.range_m", m.range_m)?;
        positive("mobility.step_s", m.step_s)?;
        if let Some(p) = m.max_pause_s {
            if !(p >= 0.0 && p.is_finite()) {
                return Err(Error::config("mobility.max_pause_s", "must be non-negative"));
            }
        }

        let c = &self.channel;
        positive("channel.bandwidth_hz", c.bandwidth_hz)?;
        positive("channel.carrier_ghz", c.carrier_ghz)?;
        positive("channel.p_max_w", c.p_max_w)?;
        if !c.noise_dbm_hz.is_finite() {
            return Err(Error::config("channel.noise_dbm_hz", "must be finite"));
        }
        if !(0.0..=1.0).contains(&c.los_prob) {
            return Err(Error::config("channel.los_prob", "must lie in [0, 1]"));
        }
        if !(c.shadow_sigma_los_db >= 0.0) {
            return Err(Error::config(
                "channel.shadow_sigma_los_db",
                "must be non-negative",
            ));
        }
        if !(c.shadow_sigma_nlos_db >= 0.0) {
            return Err(Error::config(
                "channel.shadow_sigma_nlos_db",
                "must be non-negative",
            ));
        }

        let k = &self.controller;
        k.policy()?;
        k.baseline_power()?;
        positive("controller.V", k.v)?;
        if k.u_bits == 0 {
            return Err(Error::config("controller.u_bits", "must be positive"));
        }
        match k.energy_budget_j {
            BudgetSetting::Fixed(b) => positive("controller.energy_budget_j", b)?,
            BudgetSetting::Range([lo, hi]) => {
                positive("controller.energy_budget_j", lo)?;
                if !(hi >= lo && hi.is_finite()) {
                    return Err(Error::config(
                        "controller.energy_budget_j",
                        format!("range [{lo}, {hi}] is empty"),
                    ));
                }
            }
        }
        if let BaselinePower::Fixed(w) = k.baseline_power()? {
            positive("controller.baseline_power", w)?;
        }

        let t = &self.task;
        if t.features == 0 && t.data_path.is_none() {
            return Err(Error::config("task.features", "must be positive"));
        }
        if t.classes == 0 {
            return Err(Error::config("task.classes", "must be positive"));
        }
        if t.kind == ModelKind::Mlp && t.hidden == 0 {
            return Err(Error::config("task.hidden", "the MLP needs hidden units"));
        }
        if t.samples < r.devices && t.data_path.is_none() {
            return Err(Error::config(
                "task.samples",
                "need at least one sample per device",
            ));
        }
        if t.test_samples == 0 && t.data_path.is_none() {
            return Err(Error::config("task.test_samples", "must be positive"));
        }
        positive("task.rho", t.rho)?;
        positive("task.eta", t.eta)?;
        positive("task.separation", t.separation)?;
        if t.batch_size == 0 {
            return Err(Error::config("task.batch_size", "must be positive"));
        }
        if !(t.test_fraction > 0.0 && t.test_fraction < 1.0) {
            return Err(Error::config("task.test_fraction", "must lie in (0, 1)"));
        }

        let b = &self.bounds;
        positive("bounds.L", b.l)?;
        positive("bounds.G2", b.g2)?;
        positive("bounds.sigma", b.sigma)?;
        positive("bounds.F0", b.f0_gap)?;
        Ok(())
    }
}

/// Parse `section.key=value`; the value is read as a TOML value, falling back
/// to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "expected section.key=value"))?;
    let key = key.trim();
    let (section, field) = key
        .split_once('.')
        .ok_or_else(|| Error::config(key, "expected section.key"))?;
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let entry = table
        .entry(section.to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    match entry {
        toml::Value::Table(t) => {
            t.insert(field.to_string(), value);
            Ok(())
        }
        _ => Err(Error::config(section, "is not a section")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_parse_values() {
        let cfg = ExperimentConfig::from_toml_str(
            "[run]\nrounds = 5\n",
            &[
                "run.devices=3".into(),
                "controller.V=1e-6".into(),
                "controller.policy=afl_spar".into(),
                "controller.energy_budget_j=[10, 20]".into(),
                "mobility.model=waypoint".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.run.rounds, 5);
        assert_eq!(cfg.run.devices, 3);
        assert_eq!(cfg.controller.v, 1e-6);
        assert_eq!(cfg.controller.policy, "afl_spar");
        assert_eq!(cfg.controller.energy_budget_j, BudgetSetting::Range([10.0, 20.0]));
        assert_eq!(cfg.mobility.model, MobilityModel::Waypoint);
        let again = cfg.set("task.eta=0.2").unwrap();
        assert_eq!(again.task.eta, 0.2);
        assert_eq!(again.run.devices, 3);
    }

    #[test]
    fn errors_name_the_field() {
        let e = ExperimentConfig::from_toml_str("", &["run.round_duration_s=-1".into()]).unwrap_err();
        assert!(
            matches!(e, Error::Config { ref field, .. } if field == "run.round_duration_s"),
            "{e}"
        );
        let e = ExperimentConfig::from_toml_str("", &["controller.policy=fedmobile".into()]).unwrap_err();
        assert!(matches!(e, Error::Config { ref field, .. } if field == "controller.policy"));
        assert!(ExperimentConfig::from_toml_str("[run]\nbogus = 1\n", &[]).is_err());
        assert!(ExperimentConfig::from_toml_str("", &["nodot=1".into()]).is_err());
    }

    #[test]
    fn speed_scaling_means() {
        let cfg =
            ExperimentConfig::from_toml_str("[mobility]\nC = 40.0\nLambda = 400.0\nspeed_mps = 4.0\n", &[])
                .unwrap();
        assert_eq!(cfg.mobility.contact_means(), (10.0, 100.0));
    }
}
