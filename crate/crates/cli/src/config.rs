//! The run configuration: one TOML file plus `--set key=value` overrides.
//!
//! Every section and key has a default. Unknown keys are rejected together,
//! each with the line it appears on.

use serde::{Deserialize, Serialize};
use spherediff::datasets::SyntheticSource;
use spherediff::precompute::TableConfig;
use spherediff::predictor::Context;
use spherediff::schedules::{NoiseSchedule, TimeProposal};
use spherediff::training::{Mode, Objective, SplitCodec, TrainConfig};

use crate::exit::ExitError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Geometry {
    pub vocab: usize,
    /// Base for dimension splitting; absent means the default rule.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split_base: Option<usize>,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            vocab: 8,
            split_base: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub sigma0: f64,
    #[serde(rename = "sigmaT")]
    pub sigma_t: f64,
    pub horizon: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        let s = NoiseSchedule::default();
        Self {
            sigma0: s.sigma0,
            sigma_t: s.sigma_t,
            horizon: s.horizon,
        }
    }
}

/// Proposal plateau in absolute time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProposalConfig {
    pub epsilon: f64,
    pub a: f64,
    pub b: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        let p = TimeProposal::default_for(1.0);
        Self {
            epsilon: p.epsilon,
            a: p.a,
            b: p.b,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrecomputeConfig {
    pub trajectories: usize,
    pub steps: usize,
    pub calibrate: bool,
}

impl Default for PrecomputeConfig {
    fn default() -> Self {
        let t = TableConfig::default();
        Self {
            trajectories: t.trajectories,
            steps: t.steps,
            calibrate: t.calibrate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub context: Context,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            context: Context::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub objective: Objective,
    pub batch_size: usize,
    pub seq_len: usize,
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub grad_clip: f64,
    pub lambda: f64,
    pub stop_delta: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            objective: t.objective,
            batch_size: t.batch_size,
            seq_len: t.seq_len,
            steps: t.steps,
            lr: t.lr,
            weight_decay: t.weight_decay,
            ema_decay: t.ema_decay,
            grad_clip: t.grad_clip,
            lambda: t.lambda,
            stop_delta: t.stop_delta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub quad: usize,
    pub draws: usize,
    pub substeps: usize,
    /// Sequences drawn from the source or corpus when no file is given.
    pub num_seqs: usize,
    pub len: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            quad: 64,
            draws: 4,
            substeps: 8,
            num_seqs: 64,
            len: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiagnoseSection {
    /// Samples per set and replicate in the MMD comparison.
    pub mmd_samples: usize,
    pub mmd_replicates: usize,
    /// Interior times `j T / (n + 1)`, `j = 1..=n`.
    pub mmd_times: usize,
    pub sim_steps: usize,
    /// Trajectories for the projected and radial curves.
    pub trajectories: usize,
    pub ablation_steps: usize,
}

impl Default for DiagnoseSection {
    fn default() -> Self {
        Self {
            mmd_samples: 500,
            mmd_replicates: 8,
            mmd_times: 8,
            sim_steps: 1024,
            trajectories: 4096,
            ablation_steps: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceConfig {
    #[serde(flatten)]
    pub spec: SyntheticSource,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: Mode,
    pub geometry: Geometry,
    pub schedule: ScheduleConfig,
    pub proposal: ProposalConfig,
    pub precompute: PrecomputeConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub diagnose: DiagnoseSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source: Option<SourceConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: Mode::Masked,
            geometry: Geometry::default(),
            schedule: ScheduleConfig::default(),
            proposal: ProposalConfig::default(),
            precompute: PrecomputeConfig::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            diagnose: DiagnoseSection::default(),
            source: None,
        }
    }
}

/// Keys accepted in each section, taken from the serialized defaults plus
/// the optional ones.
fn known_keys() -> toml::Table {
    let mut t = toml::Table::try_from(RunConfig::default()).expect("defaults serialize");
    if let Some(toml::Value::Table(g)) = t.get_mut("geometry") {
        g.insert("split_base".into(), toml::Value::Integer(0));
    }
    let mut source = toml::Table::new();
    for k in ["kind", "probs", "matrix", "seed"] {
        source.insert(k.into(), toml::Value::Integer(0));
    }
    t.insert("source".into(), toml::Value::Table(source));
    t
}

/// 1-based line of `key` inside `[section]` (`section` empty for the root).
fn line_of(text: &str, section: &str, key: &str) -> Option<usize> {
    let want = if section.is_empty() {
        key.to_string()
    } else {
        format!("{section}.{key}")
    };
    let mut current = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = name.trim().to_string();
            if current == want {
                return Some(i + 1);
            }
            continue;
        }
        let Some((lhs, _)) = line.split_once('=') else { continue };
        let lhs = lhs.trim().trim_matches('"');
        let full = if current.is_empty() {
            lhs.to_string()
        } else {
            format!("{current}.{lhs}")
        };
        if full == want || (current.is_empty() && lhs == want) {
            return Some(i + 1);
        }
    }
    None
}

fn unknown_keys(table: &toml::Table, known: &toml::Table, section: &str, text: &str, out: &mut Vec<String>) {
    for (key, value) in table {
        let path = if section.is_empty() {
            key.clone()
        } else {
            format!("{section}.{key}")
        };
        match known.get(key) {
            None => {
                let line = line_of(text, section, key)
                    .or_else(|| line_of(text, "", &path))
                    .map_or("command line".to_string(), |l| format!("line {l}"));
                out.push(format!("unknown key `{path}` ({line})"));
            }
            Some(toml::Value::Table(k)) => {
                if let toml::Value::Table(t) = value {
                    unknown_keys(t, k, &path, text, out);
                }
            }
            Some(_) => {}
        }
    }
}

/// Parses a `--set` value as TOML, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), ExitError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ExitError::config(format!("override `{assignment}` is not of the form key=value")))?;
    let parts: Vec<&str> = path.trim().split('.').collect();
    let mut node = table;
    for part in &parts[..parts.len() - 1] {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = match entry {
            toml::Value::Table(t) => t,
            _ => {
                return Err(ExitError::config(format!(
                    "override `{path}`: `{part}` is not a section"
                )))
            }
        };
    }
    node.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Parses `text` with overrides, then validates.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, ExitError> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| ExitError::config(format!("config is not valid TOML: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut problems = Vec::new();
        unknown_keys(&table, &known_keys(), "", text, &mut problems);
        if !problems.is_empty() {
            return Err(ExitError::config(format!(
                "invalid config keys:\n  {}",
                problems.join("\n  ")
            )));
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| ExitError::config(format!("invalid config value: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path, overrides: &[String]) -> Result<Self, ExitError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExitError::missing(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn schedule(&self) -> Result<NoiseSchedule, ExitError> {
        let s = &self.schedule;
        let sched = NoiseSchedule::new(s.sigma0, s.sigma_t, s.horizon).map_err(ExitError::config_from)?;
        sched.check_gradual().map_err(ExitError::config_from)?;
        Ok(sched)
    }

    pub fn proposal(&self) -> Result<TimeProposal, ExitError> {
        let p = &self.proposal;
        TimeProposal::new(p.epsilon, p.a, p.b, self.schedule.horizon).map_err(ExitError::config_from)
    }

    pub fn codec(&self) -> Result<SplitCodec, ExitError> {
        SplitCodec::new(self.geometry.vocab, self.geometry.split_base, self.mode).map_err(ExitError::config_from)
    }

    pub fn table_config(&self) -> TableConfig {
        TableConfig {
            trajectories: self.precompute.trajectories,
            steps: self.precompute.steps,
            calibrate: self.precompute.calibrate,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig, ExitError> {
        let t = &self.train;
        Ok(TrainConfig {
            objective: t.objective,
            batch_size: t.batch_size,
            seq_len: t.seq_len,
            steps: t.steps,
            lr: t.lr,
            weight_decay: t.weight_decay,
            ema_decay: t.ema_decay,
            grad_clip: t.grad_clip,
            seed: self.seed,
            proposal: self.proposal()?,
            lambda: t.lambda,
            stop_delta: t.stop_delta,
        })
    }

    /// Cross-field checks, all before any compute starts.
    pub fn validate(&self) -> Result<(), ExitError> {
        let schedule = self.schedule()?;
        let codec = self.codec()?;
        self.train_config()?
            .validate(&schedule)
            .map_err(ExitError::config_from)?;
        codec
            .architecture(self.model.hidden.clone(), self.model.context)
            .validate()
            .map_err(ExitError::config_from)?;
        if self.precompute.trajectories == 0 || self.precompute.steps == 0 {
            return Err(ExitError::config("precompute needs trajectories and steps"));
        }
        let e = &self.eval;
        if e.quad < 8 || e.draws == 0 || e.substeps == 0 || e.num_seqs == 0 || e.len == 0 {
            return Err(ExitError::config(
                "eval needs quad >= 8 and positive draws, substeps, num_seqs, len",
            ));
        }
        let d = &self.diagnose;
        if d.mmd_samples < 2 || d.mmd_replicates == 0 || d.mmd_times == 0 || d.sim_steps == 0 || d.trajectories == 0 {
            return Err(ExitError::config("diagnose sizes must be positive (mmd_samples >= 2)"));
        }
        if let Some(src) = &self.source {
            src.spec.validate().map_err(ExitError::config_from)?;
            if src.spec.vocab() != self.geometry.vocab {
                return Err(ExitError::config(format!(
                    "source has {} symbols but geometry.vocab is {}",
                    src.spec.vocab(),
                    self.geometry.vocab
                )));
            }
        }
        Ok(())
    }
}
