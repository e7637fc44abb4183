//! Complete inpainting runs.
//!
//! [`run_with_backend`] encodes the inputs, builds the stage schedule and then
//! for each sampler step: steers the latent (structure steps), predicts noise
//! with the step's interceptors installed, takes a DDIM step, and re-imposes
//! the forward-noised source latent outside the mask.

mod ablation;
mod backend;
mod config;
mod manifest;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

pub use image::RgbImage;
use sha2::{Digest, Sha256};

pub use ablation::{run_ablation, AblationReport, AblationRow, AblationVariant};
pub use backend::{BackendAdapter, TextEncoding, ToyBackend};
pub use config::{BackendKind, LayerSelection, RunConfig, CONFIG_KEYS};
pub use manifest::{RunManifest, StepRecord};

use crate::analysis::{DumpKind, DumpRecord, DumpWriter};
use crate::error::{Error, Result};
use crate::hooks::{BlockInfo, HookSet, LayerFilter, MakvsInterceptor, SamsInterceptor};
use crate::latent::Latent;
use crate::makvs::StyleStrength;
use crate::mask::{flatten_mask, resize_mask, soften_mask, BinaryMask, FlatMask, SoftMaskVector};
use crate::sams::SamsOptions;
use crate::schedule::{build_schedule_from_times, StageSchedule, StepEntry};
use crate::toy::TRAIN_TIMESTEPS;

/// Latent-grid masks per block resolution, computed once per run.
#[derive(Debug, Clone)]
pub struct MaskCache {
    pub flat: BTreeMap<(usize, usize), FlatMask>,
    pub soft: BTreeMap<(usize, usize), SoftMaskVector>,
}

impl MaskCache {
    pub fn new(latent_mask: &BinaryMask, blocks: &[BlockInfo], tau: f64) -> Result<Self> {
        let mut flat = BTreeMap::new();
        let mut soft = BTreeMap::new();
        for b in blocks {
            if flat.contains_key(&b.resolution) {
                continue;
            }
            let f = flatten_mask(&resize_mask(latent_mask, b.resolution)?);
            soft.insert(b.resolution, soften_mask(&f, tau)?);
            flat.insert(b.resolution, f);
        }
        Ok(Self { flat, soft })
    }
}

/// Builds the hook set for one schedule entry: masked self-attention on the
/// entry's structure layers, style injection on its style layers.
pub fn install_interceptors(
    blocks: &[BlockInfo],
    entry: &StepEntry,
    cache: &MaskCache,
    cfg: &RunConfig,
) -> Result<HookSet> {
    let block = |l: usize| {
        blocks
            .iter()
            .find(|b| b.index == l)
            .ok_or_else(|| Error::invalid(format!("no self-attention block {l}")))
    };
    let mut hooks = HookSet::new();
    for &l in &entry.sams_layers {
        let res = block(l)?.resolution;
        hooks.install(
            l,
            Arc::new(SamsInterceptor {
                softmask: cache.soft[&res].clone(),
                options: SamsOptions {
                    renormalize: cfg.sams_renormalize,
                },
            }),
        )?;
    }
    let strength = StyleStrength::new(cfg.lambda)?;
    for &l in &entry.makvs_layers {
        let res = block(l)?.resolution;
        // Schedule entries never mix the two sets; `install` rejects a clash.
        hooks.install(
            l,
            Arc::new(MakvsInterceptor {
                mask: cache.flat[&res].clone(),
                strength,
                naive: cfg.makvs_naive,
            }),
        )?;
    }
    Ok(hooks)
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub image: RgbImage,
    pub latent: Latent,
    /// The encoded input image.
    pub source_latent: Latent,
    /// The mask at latent resolution.
    pub latent_mask: BinaryMask,
    pub manifest: RunManifest,
}

fn sha_hex(h: Sha256) -> String {
    backend::hex(&h.finalize())
}

pub fn latent_checksum(latent: &Latent) -> String {
    let mut h = Sha256::new();
    for v in latent.data.iter() {
        h.update(v.to_bits().to_le_bytes());
    }
    sha_hex(h)
}

fn input_checksum(image: &RgbImage, mask: &BinaryMask, prompt: &str) -> String {
    let mut h = Sha256::new();
    h.update((image.width() as u64).to_le_bytes());
    h.update((image.height() as u64).to_le_bytes());
    h.update(image.as_raw());
    h.update(mask.values().iter().map(|&b| u8::from(b)).collect::<Vec<_>>());
    h.update(prompt.as_bytes());
    sha_hex(h)
}

/// Step times as fractions of the training horizon.
fn step_times(timesteps: &[usize]) -> Vec<f64> {
    timesteps
        .iter()
        .map(|&t| t as f64 / TRAIN_TIMESTEPS as f64)
        .collect()
}

fn check_inputs(image: &RgbImage, mask: &BinaryMask, prompt: &str) -> Result<()> {
    if (image.height() as usize, image.width() as usize) != mask.resolution() {
        return Err(Error::invalid(format!(
            "image is {}x{} but mask is {}x{}",
            image.width(),
            image.height(),
            mask.width(),
            mask.height()
        )));
    }
    if prompt.contains(['\n', '\r']) {
        return Err(Error::invalid("prompt must be a single line"));
    }
    Ok(())
}

/// Runs on the backend named by `cfg.backend`.
pub fn run_inpaint(image: &RgbImage, mask: &BinaryMask, prompt: &str, cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    check_inputs(image, mask, prompt)?;
    match cfg.backend {
        BackendKind::Toy => {
            let backend = ToyBackend::for_image(image.height() as usize, image.width() as usize, cfg.seed)?;
            run_with_backend(&backend, image, mask, prompt, cfg)
        }
        BackendKind::External => Err(Error::Unsupported(
            "no external backend is linked into this build; embed the library and call run_with_backend"
                .into(),
        )),
    }
}

fn dump_step(
    writer: &mut DumpWriter,
    out: &crate::toy::DenoiseOutput,
    step: usize,
    timestep: usize,
) -> Result<()> {
    let to_f32 = |a: &ndarray::Array2<f64>| a.mapv(|v| v as f32);
    for m in &out.self_maps {
        let base = DumpRecord {
            layer: m.layer,
            step,
            timestep,
            kind: DumpKind::SelfAttention,
            resolution: m.resolution,
            payload: to_f32(&m.weights),
        };
        writer.write(&base)?;
        if let Some(modified) = &m.modified {
            writer.write(&DumpRecord {
                kind: DumpKind::SelfModified,
                payload: to_f32(modified),
                ..base
            })?;
        }
    }
    for c in &out.cross_maps {
        writer.write(&DumpRecord {
            layer: c.layer_index,
            step,
            timestep,
            kind: DumpKind::Cross,
            resolution: c.resolution,
            payload: to_f32(&c.weights),
        })?;
    }
    Ok(())
}

/// The schedule a run with `cfg` follows on `backend`.
pub fn plan_schedule<B: BackendAdapter + ?Sized>(backend: &B, cfg: &RunConfig) -> Result<(Vec<usize>, StageSchedule)> {
    let timesteps = backend.timesteps(cfg.steps)?;
    let sams = cfg
        .sams_layers
        .resolve(backend.blocks())
        .map_err(|e| Error::invalid(format!("sams_layers: {e}")))?;
    let makvs = cfg
        .makvs_layers
        .resolve(backend.blocks())
        .map_err(|e| Error::invalid(format!("makvs_layers: {e}")))?;
    let schedule = build_schedule_from_times(cfg.eta, &step_times(&timesteps), &sams, &makvs)?
        .with_steer(cfg.steer.enabled, cfg.steer.stride)?;
    Ok((timesteps, schedule))
}

pub fn run_with_backend<B: BackendAdapter + ?Sized>(
    backend: &B,
    image: &RgbImage,
    mask: &BinaryMask,
    prompt: &str,
    cfg: &RunConfig,
) -> Result<RunOutput> {
    let started = Instant::now();
    cfg.validate()?;
    check_inputs(image, mask, prompt)?;
    let blocks = backend.blocks().to_vec();
    let (timesteps, schedule) = plan_schedule(backend, cfg)?;
    let makvs_set = cfg.makvs_layers.resolve(&blocks)?;
    let dump_set: BTreeSet<usize> = match &cfg.dump_layers {
        Some(sel) => sel.resolve(&blocks).map_err(|e| Error::invalid(format!("dump_layers: {e}")))?,
        None => cfg.sams_layers.resolve(&blocks)?.union(&makvs_set).copied().collect(),
    };

    let source = backend.encode_image(image)?;
    let (latent_mask, cond) = backend.condition(image, mask)?;
    let cache = MaskCache::new(&latent_mask, &blocks, cfg.tau)?;
    for l in &makvs_set {
        let res = blocks.iter().find(|b| b.index == *l).expect("resolved").resolution;
        if cache.flat[&res].unmasked_count() == 0 {
            return Err(Error::UnrepresentableStyle {
                height: res.0,
                width: res.1,
            });
        }
    }
    let text = backend.encode_text(prompt)?;
    let tokens = cfg.steer.tokens.resolve(&text.prompt_tokens);
    if let Some(bad) = tokens.iter().find(|&&t| t >= text.embeddings.nrows()) {
        return Err(Error::invalid(format!(
            "steer_tokens: token {bad} out of range for {} tokens",
            text.embeddings.nrows()
        )));
    }
    let mut writer = cfg.dump_dir.as_ref().map(DumpWriter::create).transpose()?;

    let blend = |z: &mut Latent, t_prev: Option<usize>| {
        let noised = backend.noise_latent(&source, t_prev, cfg.seed);
        let (c, h, w) = z.shape();
        for i in 0..h {
            for j in 0..w {
                if !latent_mask.get(i, j) {
                    for ch in 0..c {
                        z.data[[ch, i, j]] = noised.data[[ch, i, j]];
                    }
                }
            }
        }
    };

    let mut z = backend.initial_latent(cfg.seed);
    let mut records = Vec::with_capacity(cfg.steps);
    let mut stage_time: BTreeMap<String, f64> = BTreeMap::new();
    for (k, &t) in timesteps.iter().enumerate() {
        let step_started = Instant::now();
        let t_prev = timesteps.get(k + 1).copied();
        let entry = schedule.mechanisms_at(k)?;
        let at_step = |e: Error| Error::Backend {
            step: k,
            message: e.to_string(),
        };
        let mut hooks = install_interceptors(&blocks, entry, &cache, cfg)?;

        let steer = if entry.steer_active && !tokens.is_empty() {
            let outcome = backend
                .steer(&z, t, &text, &cond, &hooks, &cache.flat, &tokens, &cfg.steer)
                .map_err(at_step)?;
            z = outcome.latent;
            Some(outcome.record)
        } else {
            None
        };

        let dumping = writer.is_some() && k % cfg.dump_stride == 0 && !dump_set.is_empty();
        if dumping {
            hooks.capture_self = LayerFilter::Only(dump_set.clone());
            hooks.capture_cross = LayerFilter::Only(dump_set.clone());
        }
        let out = backend.predict_noise(&z, t, &text, &cond, &hooks).map_err(at_step)?;
        if let (true, Some(w)) = (dumping, writer.as_mut()) {
            dump_step(w, &out, k, t)?;
        }
        z = backend.sampler_step(&z, &out.epsilon, t, t_prev);
        blend(&mut z, t_prev);
        if !z.is_finite() {
            return Err(at_step(Error::NonFinite("latent after sampler step".into())));
        }
        records.push(StepRecord {
            step_index: k,
            timestep: t,
            stage: entry.stage,
            hook_log: out.hook_log,
            steer,
        });
        *stage_time.entry(entry.stage.to_string()).or_default() += step_started.elapsed().as_secs_f64();
    }

    let decode_started = Instant::now();
    let output = backend.decode(&z)?;
    stage_time.insert("decode".into(), decode_started.elapsed().as_secs_f64());
    let dumps = match writer {
        Some(w) => w.finish()?,
        None => Vec::new(),
    };
    stage_time.insert("total".into(), started.elapsed().as_secs_f64());
    let manifest = RunManifest {
        config: cfg.clone(),
        prompt: prompt.to_string(),
        image_path: None,
        mask_path: None,
        output_path: None,
        backend: backend.name().to_string(),
        parameter_checksum: backend.parameter_checksum(),
        input_checksum: input_checksum(image, mask, prompt),
        latent_checksum: latent_checksum(&z),
        structure_steps: schedule.structure_steps(),
        style_steps: schedule.style_steps(),
        transition_index: schedule.transition_index(),
        steps: records,
        dumps,
        timing: stage_time.into_iter().collect(),
    };
    Ok(RunOutput {
        image: output,
        latent: z,
        source_latent: source,
        latent_mask,
        manifest,
    })
}

/// Loads an RGB image, converting other pixel formats.
pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    image::open(path)
        .map(|i| i.to_rgb8())
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

pub fn save_png(image: &RgbImage, path: &Path) -> Result<()> {
    image.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}
