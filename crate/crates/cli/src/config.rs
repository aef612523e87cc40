//! Run configuration files.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use modesched::models::{load_network, make_disturbance, VEHICLE_HORIZON, VEHICLE_INITIAL_MODE};
use modesched::{
    HorizonConfig, ModeSchedule, OptimizerConfig, PowerNetwork, SwitchedSystem, VehicleModel,
};
use serde::{Deserialize, Serialize};

/// Default number of grid cells in exported time series.
pub const DEFAULT_SAMPLES: usize = 1000;
/// Horizon of power-network runs when none is given.
pub const DEFAULT_POWER_HORIZON: f64 = 5.0;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum ModelConfig {
    Vehicle,
    Power {
        /// Network file, relative to the configuration file.
        network: PathBuf,
        /// Half-width of the uniform initial angle disturbance (rad).
        #[serde(default)]
        disturbance: f64,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    #[default]
    Optimize,
    Horizon,
}

/// A single JSON configuration document.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub mode: RunMode,
    /// Optimisation horizon; the window length in horizon mode.
    #[serde(default)]
    pub horizon: Option<f64>,
    /// Initial state. Vehicle: `[X, Y, ψ]`; power: `[δ…, δ̇…]`. Defaults to
    /// the model's nominal start.
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    /// One-based mode of the constant initial schedule.
    #[serde(default)]
    pub initial_mode: Option<usize>,
    /// Schedule JSON file used as the initial schedule instead.
    #[serde(default)]
    pub initial_schedule: Option<PathBuf>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub receding: Option<HorizonConfig>,
    /// Output directory, relative to the working directory.
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub samples: Option<usize>,
}

/// Instantiated model.
pub enum Model {
    Vehicle(VehicleModel<f64>),
    Power(PowerNetwork<f64>),
}

impl Model {
    pub fn system(&self) -> &dyn SwitchedSystem<f64> {
        match self {
            Model::Vehicle(m) => m,
            Model::Power(m) => m,
        }
    }

    pub fn state_names(&self) -> Vec<String> {
        match self {
            Model::Vehicle(_) => ["X", "Y", "psi", "clock"].map(String::from).to_vec(),
            Model::Power(net) => {
                let m = net.num_generators();
                (1..=m)
                    .map(|i| format!("delta{i}"))
                    .chain((1..=m).map(|i| format!("rate{i}")))
                    .collect()
            }
        }
    }
}

/// Everything needed to start a run, validated.
pub struct Prepared {
    pub config: RunConfig,
    pub model: Model,
    pub x0: Vec<f64>,
    pub u0: ModeSchedule<f64>,
    pub output: PathBuf,
    pub samples: usize,
    pub raw: Vec<u8>,
}

/// Parses a configuration, fills model-dependent defaults and applies the
/// command-line overrides.
pub fn parse(raw: &[u8], seed: Option<u64>) -> anyhow::Result<RunConfig> {
    let mut value: serde_json::Value =
        serde_json::from_slice(raw).context("configuration is not valid JSON")?;
    let is_power = value
        .pointer("/model/type")
        .and_then(|v| v.as_str())
        .is_some_and(|t| t == "power");
    let obj = value
        .as_object_mut()
        .ok_or_else(|| anyhow!("configuration must be a JSON object"))?;
    let opt = obj
        .entry("optimizer")
        .or_insert_with(|| serde_json::json!({}))
        .as_object_mut()
        .ok_or_else(|| anyhow!("optimizer must be an object"))?;
    if is_power && !opt.contains_key("beta") {
        opt.insert("beta".into(), 0.1.into());
    }
    let mut cfg: RunConfig = serde_json::from_value(value).context("invalid configuration")?;
    if let Some(s) = seed {
        cfg.optimizer.seed = s;
    }
    cfg.horizon = Some(match (cfg.mode, cfg.horizon, &cfg.receding) {
        (RunMode::Horizon, Some(h), Some(r)) if h != r.window => {
            bail!("horizon {h} differs from the receding window {}", r.window)
        }
        (RunMode::Horizon, _, Some(r)) => r.window,
        (RunMode::Horizon, _, None) => bail!("mode \"horizon\" needs a \"receding\" section"),
        (RunMode::Optimize, Some(h), _) => h,
        (RunMode::Optimize, None, _) => match cfg.model {
            ModelConfig::Vehicle => VEHICLE_HORIZON,
            ModelConfig::Power { .. } => DEFAULT_POWER_HORIZON,
        },
    });
    Ok(cfg)
}

/// Validates a parsed configuration and builds the model and initial data.
/// Nothing is written to disk.
pub fn prepare(path: &Path, out: Option<&Path>, seed: Option<u64>) -> anyhow::Result<Prepared> {
    let raw = std::fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut config = parse(&raw, seed)?;
    let base = path.parent().unwrap_or(Path::new("."));
    config.optimizer.validate().context("optimizer settings")?;
    if let Some(r) = &config.receding {
        r.validate().context("receding settings")?;
    }
    let horizon = config.horizon.expect("filled by parse");
    if !(horizon > 0.0 && horizon.is_finite()) {
        bail!("horizon must be positive, got {horizon}");
    }
    let samples = config.samples.unwrap_or(DEFAULT_SAMPLES);
    if samples == 0 {
        bail!("samples must be positive");
    }
    let (model, default_mode) = match &config.model {
        ModelConfig::Vehicle => (Model::Vehicle(VehicleModel::new()), VEHICLE_INITIAL_MODE),
        ModelConfig::Power {
            network,
            disturbance,
        } => {
            if disturbance.is_nan() || *disturbance < 0.0 {
                bail!("disturbance must be non-negative, got {disturbance}");
            }
            let file = base.join(network);
            let net = load_network(&file).with_context(|| format!("network {}", file.display()))?;
            (Model::Power(net), 0)
        }
    };
    let sys = model.system();
    let n = sys.num_states();
    let x0 = match (&model, &config.x0, &config.model) {
        (Model::Vehicle(_), Some(x), _) if x.len() == 3 => vec![x[0], x[1], x[2], 0.0],
        (_, Some(x), _) if x.len() == n => x.clone(),
        (_, Some(x), _) => bail!("x0 has {} entries, the model has {n} states", x.len()),
        (Model::Vehicle(_), None, _) => VehicleModel::initial_state(),
        (Model::Power(net), None, ModelConfig::Power { disturbance, .. }) => {
            let d = make_disturbance(config.optimizer.seed, *disturbance, net.num_generators())?;
            net.initial_state(&d)?
        }
        _ => unreachable!(),
    };
    if x0.iter().any(|v| !v.is_finite()) {
        bail!("x0 must be finite");
    }
    let modes = sys.num_modes();
    let u0 = match (&config.initial_schedule, config.initial_mode) {
        (Some(_), Some(_)) => bail!("give either initial_mode or initial_schedule, not both"),
        (Some(file), None) => {
            let file = base.join(file);
            let text = std::fs::read_to_string(&file)
                .with_context(|| format!("cannot read {}", file.display()))?;
            let s: ModeSchedule<f64> = ModeSchedule::from_json(&text)
                .with_context(|| format!("schedule {}", file.display()))?;
            if s.num_modes() != modes || (s.horizon() - horizon).abs() > 1e-12 * horizon {
                bail!("initial schedule must have {modes} modes and horizon {horizon}");
            }
            s
        }
        (None, Some(m)) if (1..=modes).contains(&m) => {
            ModeSchedule::constant(m - 1, horizon, modes)?
        }
        (None, Some(m)) => bail!("initial_mode {m} outside 1..={modes}"),
        (None, None) => ModeSchedule::constant(default_mode, horizon, modes)?,
    };
    let output = out
        .map(Path::to_path_buf)
        .or_else(|| config.output.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    config.output = Some(output.clone());
    config.samples = Some(samples);
    config.x0 = Some(x0.clone());
    if config.initial_schedule.is_none() {
        config.initial_mode = Some(u0.sequence()[0] + 1);
    }
    Ok(Prepared {
        config,
        model,
        x0,
        u0,
        output,
        samples,
        raw,
    })
}
