use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::hooks::BlockInfo;
use crate::makvs::StyleStrength;
use crate::steer::{SteerConfig, TokenSelection};

/// A set of self-attention blocks, written as `2-6`, `2,3,7`, `last:8`,
/// `all` or `none`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSelection {
    None,
    All,
    Indices(BTreeSet<usize>),
    /// The final `n` blocks in forward order.
    Last(usize),
}

impl LayerSelection {
    pub fn range(lo: usize, hi: usize) -> Self {
        LayerSelection::Indices((lo..=hi).collect())
    }

    pub fn resolve(&self, blocks: &[BlockInfo]) -> Result<BTreeSet<usize>> {
        let n = blocks.len();
        match self {
            LayerSelection::None => Ok(BTreeSet::new()),
            LayerSelection::All => Ok(blocks.iter().map(|b| b.index).collect()),
            LayerSelection::Last(k) => {
                if *k > n {
                    return Err(Error::invalid(format!("last:{k} exceeds the {n} available blocks")));
                }
                Ok(blocks[n - k..].iter().map(|b| b.index).collect())
            }
            LayerSelection::Indices(set) => {
                if let Some(bad) = set.iter().find(|l| !blocks.iter().any(|b| b.index == **l)) {
                    return Err(Error::invalid(format!(
                        "layer {bad} does not exist; blocks are numbered 1..={n}"
                    )));
                }
                Ok(set.clone())
            }
        }
    }
}

impl fmt::Display for LayerSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSelection::None => f.write_str("none"),
            LayerSelection::All => f.write_str("all"),
            LayerSelection::Last(k) => write!(f, "last:{k}"),
            LayerSelection::Indices(set) => {
                let v: Vec<usize> = set.iter().copied().collect();
                let contiguous = v.windows(2).all(|w| w[1] == w[0] + 1);
                if v.len() > 2 && contiguous {
                    write!(f, "{}-{}", v[0], v[v.len() - 1])
                } else if v.is_empty() {
                    f.write_str("none")
                } else {
                    let parts: Vec<String> = v.iter().map(|i| i.to_string()).collect();
                    f.write_str(&parts.join(","))
                }
            }
        }
    }
}

impl FromStr for LayerSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::invalid(format!("cannot parse layer selection `{s}`"));
        match s {
            "none" | "" => return Ok(LayerSelection::None),
            "all" => return Ok(LayerSelection::All),
            _ => {}
        }
        if let Some(k) = s.strip_prefix("last:") {
            return k.trim().parse().map(LayerSelection::Last).map_err(|_| bad());
        }
        let mut set = BTreeSet::new();
        for part in s.split(',') {
            let part = part.trim();
            if let Some((lo, hi)) = part.split_once('-') {
                let lo: usize = lo.trim().parse().map_err(|_| bad())?;
                let hi: usize = hi.trim().parse().map_err(|_| bad())?;
                if lo == 0 || hi < lo {
                    return Err(bad());
                }
                set.extend(lo..=hi);
            } else {
                let i: usize = part.parse().map_err(|_| bad())?;
                if i == 0 {
                    return Err(bad());
                }
                set.insert(i);
            }
        }
        Ok(LayerSelection::Indices(set))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Toy,
    External,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Toy => "toy",
            BackendKind::External => "external",
        })
    }
}

impl FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "toy" => Ok(BackendKind::Toy),
            "external" => Ok(BackendKind::External),
            other => Err(Error::invalid(format!(
                "unknown backend `{other}` (expected toy or external)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub tau: f64,
    pub lambda: f64,
    pub eta: f64,
    pub steps: usize,
    /// Passed through to external backends; the toy backend runs unguided.
    pub guidance_scale: f64,
    pub sams_layers: LayerSelection,
    pub makvs_layers: LayerSelection,
    /// Renormalise masked self-attention rows (off by default).
    pub sams_renormalize: bool,
    /// Use the keys-only replacement instead of the concatenated form.
    pub makvs_naive: bool,
    pub steer: SteerConfig,
    pub seed: u64,
    pub backend: BackendKind,
    pub dump_dir: Option<PathBuf>,
    pub dump_stride: usize,
    /// `None` dumps the union of the mechanism layers.
    pub dump_layers: Option<LayerSelection>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            lambda: StyleStrength::STYLIZED,
            eta: 0.6,
            steps: 50,
            guidance_scale: 7.5,
            sams_layers: LayerSelection::range(2, 6),
            makvs_layers: LayerSelection::Last(8),
            sams_renormalize: false,
            makvs_naive: false,
            steer: SteerConfig::default(),
            seed: 0,
            backend: BackendKind::Toy,
            dump_dir: None,
            dump_stride: 5,
            dump_layers: None,
        }
    }
}

/// Names of every key accepted by [`RunConfig::set`], in snapshot order.
pub const CONFIG_KEYS: &[&str] = &[
    "tau",
    "lambda",
    "eta",
    "steps",
    "guidance_scale",
    "sams_layers",
    "makvs_layers",
    "sams_renormalize",
    "makvs_naive",
    "steer_enabled",
    "steer_iterations",
    "steer_step_size",
    "steer_epsilon",
    "steer_tokens",
    "steer_resolutions",
    "steer_stride",
    "seed",
    "backend",
    "dump_dir",
    "dump_stride",
    "dump_layers",
];

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::invalid(format!("{key}: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::invalid(format!("{key}: expected true or false, got `{value}`"))),
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Checks every field, naming the offending key on failure.
    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, msg: String| Err(Error::invalid(format!("{key}: {msg}")));
        if !(self.tau >= 0.0 && self.tau < 1.0) {
            return fail("tau", format!("must lie in [0, 1), got {}", self.tau));
        }
        if StyleStrength::new(self.lambda).is_err() {
            return fail("lambda", format!("must be finite and >= 0, got {}", self.lambda));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return fail("eta", format!("must lie in the open interval (0, 1), got {}", self.eta));
        }
        if self.steps < 2 {
            return fail("steps", format!("must be at least 2, got {}", self.steps));
        }
        if !(self.guidance_scale.is_finite() && self.guidance_scale >= 0.0) {
            return fail("guidance_scale", format!("must be finite and >= 0, got {}", self.guidance_scale));
        }
        if self.dump_stride == 0 {
            return fail("dump_stride", "must be >= 1".into());
        }
        let st = &self.steer;
        if !(st.step_size.is_finite() && st.step_size > 0.0) {
            return fail("steer_step_size", format!("must be positive, got {}", st.step_size));
        }
        if st.iterations_per_timestep == 0 {
            return fail("steer_iterations", "must be >= 1".into());
        }
        if !(st.epsilon_clamp > 0.0 && st.epsilon_clamp <= 1e-2) {
            return fail("steer_epsilon", format!("must lie in (0, 1e-2], got {}", st.epsilon_clamp));
        }
        if st.stride == 0 {
            return fail("steer_stride", "must be >= 1".into());
        }
        st.validate()
    }

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "tau" => self.tau = parse_num(key, v)?,
            "lambda" => self.lambda = parse_num(key, v)?,
            "eta" => self.eta = parse_num(key, v)?,
            "steps" => self.steps = parse_num(key, v)?,
            "guidance_scale" => self.guidance_scale = parse_num(key, v)?,
            "sams_layers" => self.sams_layers = v.parse().map_err(|e| Error::invalid(format!("{key}: {e}")))?,
            "makvs_layers" => self.makvs_layers = v.parse().map_err(|e| Error::invalid(format!("{key}: {e}")))?,
            "sams_renormalize" => self.sams_renormalize = parse_bool(key, v)?,
            "makvs_naive" => self.makvs_naive = parse_bool(key, v)?,
            "steer_enabled" => self.steer.enabled = parse_bool(key, v)?,
            "steer_iterations" => self.steer.iterations_per_timestep = parse_num(key, v)?,
            "steer_step_size" => self.steer.step_size = parse_num(key, v)?,
            "steer_epsilon" => self.steer.epsilon_clamp = parse_num(key, v)?,
            "steer_tokens" => {
                self.steer.tokens = if v == "all" {
                    TokenSelection::AllPrompt
                } else {
                    TokenSelection::Indices(
                        v.split(',').map(|t| parse_num(key, t)).collect::<Result<_>>()?,
                    )
                }
            }
            "steer_resolutions" => {
                self.steer.resolutions = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',').map(|t| parse_num(key, t)).collect::<Result<_>>()?
                }
            }
            "steer_stride" => self.steer.stride = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "backend" => self.backend = v.parse()?,
            "dump_dir" => self.dump_dir = (!v.is_empty() && v != "none").then(|| PathBuf::from(v)),
            "dump_stride" => self.dump_stride = parse_num(key, v)?,
            "dump_layers" => {
                self.dump_layers = if v == "auto" {
                    None
                } else {
                    Some(v.parse().map_err(|e| Error::invalid(format!("{key}: {e}")))?)
                }
            }
            other => return Err(Error::invalid(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Every field as `(key, value)` text that [`RunConfig::set`] reads back
    /// to an equal config.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let s = &self.steer;
        let values = [
            self.tau.to_string(),
            self.lambda.to_string(),
            self.eta.to_string(),
            self.steps.to_string(),
            self.guidance_scale.to_string(),
            self.sams_layers.to_string(),
            self.makvs_layers.to_string(),
            self.sams_renormalize.to_string(),
            self.makvs_naive.to_string(),
            s.enabled.to_string(),
            s.iterations_per_timestep.to_string(),
            s.step_size.to_string(),
            s.epsilon_clamp.to_string(),
            match &s.tokens {
                TokenSelection::AllPrompt => "all".to_string(),
                TokenSelection::Indices(ix) => join(ix),
            },
            join(&s.resolutions),
            s.stride.to_string(),
            self.seed.to_string(),
            self.backend.to_string(),
            self.dump_dir
                .as_ref()
                .map_or_else(|| "none".to_string(), |p| p.display().to_string()),
            self.dump_stride.to_string(),
            self.dump_layers
                .as_ref()
                .map_or_else(|| "auto".to_string(), ToString::to_string),
        ];
        CONFIG_KEYS
            .iter()
            .zip(values)
            .map(|(k, v)| (k.to_string(), v))
            .collect()
    }
}
