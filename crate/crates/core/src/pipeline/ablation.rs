use std::fmt;

use image::RgbImage;

use crate::error::Result;
use crate::mask::BinaryMask;

use super::config::{LayerSelection, RunConfig};
use super::{run_with_backend, BackendAdapter, RunOutput};

/// The four mechanism combinations, in table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationVariant {
    Baseline,
    Sams,
    SamsSteer,
    Full,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [
        AblationVariant::Baseline,
        AblationVariant::Sams,
        AblationVariant::SamsSteer,
        AblationVariant::Full,
    ];

    /// `base` with the mechanisms this variant leaves out switched off.
    pub fn configure(self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        let (sams, steer, makvs) = match self {
            AblationVariant::Baseline => (false, false, false),
            AblationVariant::Sams => (true, false, false),
            AblationVariant::SamsSteer => (true, true, false),
            AblationVariant::Full => (true, true, true),
        };
        if !sams {
            cfg.sams_layers = LayerSelection::None;
        }
        if !makvs {
            cfg.makvs_layers = LayerSelection::None;
        }
        cfg.steer.enabled = steer;
        if let Some(dir) = &base.dump_dir {
            cfg.dump_dir = Some(dir.join(self.to_string()));
        }
        cfg
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationVariant::Baseline => "baseline",
            AblationVariant::Sams => "sams",
            AblationVariant::SamsSteer => "sams_steer",
            AblationVariant::Full => "full",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub seed: u64,
    pub hook_events: usize,
    pub steer_steps: usize,
    /// L-infinity distance to the baseline's final latent inside the mask.
    pub masked_delta: f64,
    pub unmasked_delta: f64,
    pub first_steer_loss: Option<f64>,
    pub last_steer_loss: Option<f64>,
    /// Every steering update left the loss no higher than before it.
    pub steer_descends: bool,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub runs: Vec<(AblationVariant, RunOutput)>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_tsv(&self) -> String {
        let fmt_opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| v.to_string());
        let mut out = String::from(
            "variant\tseed\thook_events\tsteer_steps\tmasked_linf\tunmasked_linf\tsteer_loss_first\tsteer_loss_last\tsteer_descends\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.variant,
                r.seed,
                r.hook_events,
                r.steer_steps,
                r.masked_delta,
                r.unmasked_delta,
                fmt_opt(r.first_steer_loss),
                fmt_opt(r.last_steer_loss),
                r.steer_descends
            ));
        }
        out
    }

    /// One line per steered step: `variant step timestep losses...`.
    pub fn trajectories_tsv(&self) -> String {
        let mut out = String::from("variant\tstep\ttimestep\tlosses\taborted\n");
        for (variant, run) in &self.runs {
            for s in &run.manifest.steps {
                if let Some(r) = &s.steer {
                    let losses: Vec<String> = r.losses.iter().map(f64::to_string).collect();
                    out.push_str(&format!(
                        "{variant}\t{}\t{}\t{}\t{}\n",
                        s.step_index,
                        s.timestep,
                        losses.join(","),
                        r.aborted
                    ));
                }
            }
        }
        out
    }
}

/// Runs the four variants with one shared seed and tabulates their
/// differences from the baseline.
pub fn run_ablation<B: BackendAdapter + ?Sized>(
    backend: &B,
    image: &RgbImage,
    mask: &BinaryMask,
    prompt: &str,
    base: &RunConfig,
) -> Result<AblationReport> {
    let mut runs = Vec::with_capacity(4);
    for v in AblationVariant::ALL {
        runs.push((v, run_with_backend(backend, image, mask, prompt, &v.configure(base))?));
    }
    let baseline = runs[0].1.latent.clone();
    let rows = runs
        .iter()
        .map(|(variant, out)| {
            let m = &out.manifest;
            let losses: Vec<f64> = m
                .steer_records()
                .flat_map(|(_, r)| r.losses.iter().copied())
                .collect();
            AblationRow {
                variant: *variant,
                seed: m.config.seed,
                hook_events: m.steps.iter().map(|s| s.hook_log.len()).sum(),
                steer_steps: m.steer_records().count(),
                masked_delta: out.latent.max_abs_diff_in_region(&baseline, &out.latent_mask, true),
                unmasked_delta: out.latent.max_abs_diff_in_region(&baseline, &out.latent_mask, false),
                first_steer_loss: losses.first().copied(),
                last_steer_loss: losses.last().copied(),
                steer_descends: m
                    .steer_records()
                    .all(|(_, r)| !r.aborted && r.losses.windows(2).all(|w| w[1] <= w[0])),
            }
        })
        .collect();
    Ok(AblationReport { runs, rows })
}
