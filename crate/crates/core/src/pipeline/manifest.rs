use std::path::{Path, PathBuf};

use crate::analysis::DumpEntry;
use crate::error::{Error, Result};
use crate::hooks::InterceptorKind;
use crate::kv::{write_section, KvDocument};
use crate::schedule::Stage;
use crate::steer::SteerRecord;

use super::config::RunConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step_index: usize,
    pub timestep: usize,
    pub stage: Stage,
    /// Interceptors active during the step's noise prediction.
    pub hook_log: Vec<(usize, InterceptorKind)>,
    pub steer: Option<SteerRecord>,
}

impl StepRecord {
    pub fn has_kind(&self, kind: InterceptorKind) -> bool {
        self.hook_log.iter().any(|(_, k)| *k == kind)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub config: RunConfig,
    pub prompt: String,
    pub image_path: Option<PathBuf>,
    pub mask_path: Option<PathBuf>,
    pub output_path: Option<PathBuf>,
    pub backend: String,
    pub parameter_checksum: Option<String>,
    pub input_checksum: String,
    pub latent_checksum: String,
    pub structure_steps: usize,
    pub style_steps: usize,
    pub transition_index: usize,
    pub steps: Vec<StepRecord>,
    pub dumps: Vec<DumpEntry>,
    /// Wall-clock seconds per phase. The only nondeterministic part.
    pub timing: Vec<(String, f64)>,
}

fn opt_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(|| "none".into(), |p| p.display().to_string())
}

fn parse_opt_path(v: &str) -> Option<PathBuf> {
    (v != "none" && !v.is_empty()).then(|| PathBuf::from(v))
}

fn kind_from_str(s: &str) -> Option<InterceptorKind> {
    Some(match s {
        "sams" => InterceptorKind::Sams,
        "makvs" => InterceptorKind::Makvs,
        "makvs_naive" => InterceptorKind::MakvsNaive,
        "custom" => InterceptorKind::Custom,
        _ => return None,
    })
}

fn format_step(s: &StepRecord) -> String {
    let hooks = if s.hook_log.is_empty() {
        "-".to_string()
    } else {
        s.hook_log
            .iter()
            .map(|(l, k)| format!("{l}:{k}"))
            .collect::<Vec<_>>()
            .join(",")
    };
    let steer = match &s.steer {
        None => "-".to_string(),
        Some(r) => r.losses.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
    };
    let aborted = s.steer.as_ref().is_some_and(|r| r.aborted);
    format!(
        "index={} timestep={} stage={} hooks={hooks} steer={steer} aborted={aborted}",
        s.step_index, s.timestep, s.stage
    )
}

fn field<'a>(line: &'a str, key: &str) -> Option<&'a str> {
    line.split_whitespace()
        .find_map(|t| t.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
}

fn parse_step(line: &str, origin: &Path) -> Result<StepRecord> {
    let bad = |what: &str| Error::format(origin, format!("step record `{line}`: {what}"));
    let num = |key: &str| -> Result<usize> {
        field(line, key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(&format!("bad or missing `{key}`")))
    };
    let stage: Stage = field(line, "stage")
        .ok_or_else(|| bad("missing `stage`"))?
        .parse()
        .map_err(|_| bad("unknown stage"))?;
    let hooks = field(line, "hooks").ok_or_else(|| bad("missing `hooks`"))?;
    let hook_log = if hooks == "-" {
        Vec::new()
    } else {
        hooks
            .split(',')
            .map(|h| {
                let (l, k) = h.split_once(':').ok_or_else(|| bad("bad hook entry"))?;
                Ok((
                    l.parse().map_err(|_| bad("bad hook layer"))?,
                    kind_from_str(k).ok_or_else(|| bad("bad hook kind"))?,
                ))
            })
            .collect::<Result<_>>()?
    };
    let steer_text = field(line, "steer").ok_or_else(|| bad("missing `steer`"))?;
    let aborted = field(line, "aborted") == Some("true");
    let steer = if steer_text == "-" {
        None
    } else {
        Some(SteerRecord {
            losses: steer_text
                .split(',')
                .map(|v| v.parse().map_err(|_| bad("bad steer loss")))
                .collect::<Result<_>>()?,
            aborted,
            diagnostic: None,
        })
    };
    Ok(StepRecord {
        step_index: num("index")?,
        timestep: num("timestep")?,
        stage,
        hook_log,
        steer,
    })
}

impl RunManifest {
    /// Text form; with `include_timing = false` two runs of the same job
    /// produce identical text.
    pub fn to_text(&self, include_timing: bool) -> String {
        let mut out = String::from("# inpainting run manifest\n\n");
        let mut cfg = self.config.to_pairs();
        cfg.push(("image".into(), opt_path(&self.image_path)));
        cfg.push(("mask".into(), opt_path(&self.mask_path)));
        cfg.push(("prompt".into(), self.prompt.clone()));
        write_section(&mut out, "config", &cfg);
        write_section(
            &mut out,
            "schedule",
            &[
                ("structure_steps".into(), self.structure_steps.to_string()),
                ("style_steps".into(), self.style_steps.to_string()),
                ("transition_index".into(), self.transition_index.to_string()),
            ],
        );
        let mut steps: Vec<(String, String)> = Vec::new();
        for s in &self.steps {
            steps.push(("step".into(), format_step(s)));
            if let Some(d) = s.steer.as_ref().and_then(|r| r.diagnostic.as_ref()) {
                steps.push(("diagnostic".into(), format!("{} {}", s.step_index, d.replace('\n', " "))));
            }
        }
        write_section(&mut out, "steps", &steps);
        let dumps: Vec<(String, String)> = self.dumps.iter().map(|d| ("record".into(), d.to_string())).collect();
        write_section(&mut out, "dumps", &dumps);
        write_section(
            &mut out,
            "summary",
            &[
                ("backend".into(), self.backend.clone()),
                (
                    "parameter_checksum".into(),
                    self.parameter_checksum.clone().unwrap_or_else(|| "none".into()),
                ),
                ("input_checksum".into(), self.input_checksum.clone()),
                ("latent_checksum".into(), self.latent_checksum.clone()),
                ("output".into(), opt_path(&self.output_path)),
            ],
        );
        if include_timing {
            let timing: Vec<(String, String)> = self
                .timing
                .iter()
                .map(|(k, v)| (format!("{k}_seconds"), v.to_string()))
                .collect();
            write_section(&mut out, "timing", &timing);
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text(true)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&KvDocument::load(path)?, path)
    }

    pub fn parse(doc: &KvDocument, origin: &Path) -> Result<Self> {
        let need = |section: &str, key: &str| -> Result<String> {
            doc.get(section, key)
                .map(str::to_string)
                .ok_or_else(|| Error::format(origin, format!("missing `{key}` in [{section}]")))
        };
        let count = |section: &str, key: &str| -> Result<usize> {
            need(section, key)?
                .parse()
                .map_err(|_| Error::format(origin, format!("`{key}` is not an integer")))
        };
        let mut config = RunConfig::default();
        for (k, v) in doc.section("config") {
            match k {
                "image" | "mask" | "prompt" => {}
                _ => config
                    .set(k, v)
                    .map_err(|e| Error::format(origin, e.to_string()))?,
            }
        }
        let mut steps = Vec::new();
        for (k, v) in doc.section("steps") {
            match k {
                "step" => steps.push(parse_step(v, origin)?),
                "diagnostic" => {
                    let (idx, msg) = v.split_once(' ').unwrap_or((v, ""));
                    let idx: usize = idx
                        .parse()
                        .map_err(|_| Error::format(origin, "bad diagnostic step index"))?;
                    if let Some(r) = steps
                        .iter_mut()
                        .find(|s: &&mut StepRecord| s.step_index == idx)
                        .and_then(|s| s.steer.as_mut())
                    {
                        r.diagnostic = Some(msg.to_string());
                    }
                }
                other => return Err(Error::format(origin, format!("unknown key `{other}` in [steps]"))),
            }
        }
        let dumps = doc
            .section("dumps")
            .map(|(_, v)| {
                let get = |key: &str| {
                    field(v, key).ok_or_else(|| Error::format(origin, format!("dump record missing `{key}`")))
                };
                let num = |key: &str| -> Result<usize> {
                    get(key)?
                        .parse()
                        .map_err(|_| Error::format(origin, format!("dump `{key}` is not an integer")))
                };
                Ok(DumpEntry {
                    layer: num("layer")?,
                    step: num("step")?,
                    timestep: num("timestep")?,
                    kind: get("kind")?.parse()?,
                    resolution: (num("height")?, num("width")?),
                    file: get("file")?.to_string(),
                })
            })
            .collect::<Result<_>>()?;
        let timing = doc
            .section("timing")
            .map(|(k, v)| {
                let name = k.strip_suffix("_seconds").unwrap_or(k).to_string();
                v.parse()
                    .map(|s| (name, s))
                    .map_err(|_| Error::format(origin, format!("timing `{k}` is not a number")))
            })
            .collect::<Result<_>>()?;
        let checksum = need("summary", "parameter_checksum")?;
        Ok(Self {
            config,
            prompt: doc.get("config", "prompt").unwrap_or("").to_string(),
            image_path: doc.get("config", "image").and_then(parse_opt_path),
            mask_path: doc.get("config", "mask").and_then(parse_opt_path),
            output_path: doc.get("summary", "output").and_then(parse_opt_path),
            backend: need("summary", "backend")?,
            parameter_checksum: (checksum != "none").then_some(checksum),
            input_checksum: need("summary", "input_checksum")?,
            latent_checksum: need("summary", "latent_checksum")?,
            structure_steps: count("schedule", "structure_steps")?,
            style_steps: count("schedule", "style_steps")?,
            transition_index: count("schedule", "transition_index")?,
            steps,
            dumps,
            timing,
        })
    }

    /// Steps where both masked self-attention and style injection were active.
    pub fn co_active_steps(&self) -> Vec<usize> {
        self.steps
            .iter()
            .filter(|s| {
                s.has_kind(InterceptorKind::Sams)
                    && (s.has_kind(InterceptorKind::Makvs) || s.has_kind(InterceptorKind::MakvsNaive))
            })
            .map(|s| s.step_index)
            .collect()
    }

    pub fn steer_records(&self) -> impl Iterator<Item = (usize, &SteerRecord)> {
        self.steps
            .iter()
            .filter_map(|s| s.steer.as_ref().map(|r| (s.step_index, r)))
    }
}
