//! `attnpaint`: run, ablate and inspect attention-level inpainting.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use attnpaint_core::analysis::{pca_rgb, read_index, read_payload, DumpKind};
use attnpaint_core::kv::KvDocument;
use attnpaint_core::mask::BinaryMask;
use attnpaint_core::pipeline::{
    load_rgb, run_ablation, run_inpaint, save_png, BackendKind, RgbImage, RunConfig, RunOutput, ToyBackend,
};
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "attnpaint", version, about = "Training-free attention mechanisms for diffusion inpainting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Inpaint one image and write the result with its manifest.
    Run(RunArgs),
    /// Run the four mechanism combinations with one seed and compare them.
    Ablate(RunArgs),
    /// Render principal-component images of dumped attention maps.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    lambda: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    eta: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    backend: Option<String>,
    /// Flat `key = value` file; a previous run's manifest also works.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dump_dir: Option<PathBuf>,
    #[arg(long)]
    dump_stride: Option<usize>,
    #[arg(long)]
    dump_layers: Option<String>,
    #[arg(long)]
    sams_layers: Option<String>,
    #[arg(long)]
    makvs_layers: Option<String>,
    #[arg(long)]
    steer_iters: Option<usize>,
    #[arg(long)]
    steer_step_size: Option<f64>,
    #[arg(long)]
    no_steer: bool,
    #[arg(long)]
    guidance_scale: Option<f64>,
    /// Where outputs and manifests go.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    /// Dump directory written by `run --dump-dir`.
    #[arg(long)]
    dump: PathBuf,
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long)]
    step: Option<usize>,
    /// self, self_modified or cross; default is both self kinds.
    #[arg(long)]
    kind: Option<String>,
    /// Defaults to `<dump>/pca`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

enum Failure {
    /// Bad input from the user: exit 2.
    Usage(String),
    /// Exit 1.
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult<T> = Result<T, Failure>;

fn flag_for(key: &str) -> String {
    let name = match key {
        "steer_iterations" => "steer-iters",
        "steer_enabled" => "no-steer",
        other => return format!("--{}", other.replace('_', "-")),
    };
    format!("--{name}")
}

/// Validation messages from the library start with the config key.
fn usage_from_config_error(msg: &str) -> Failure {
    let msg = msg.strip_prefix("invalid argument: ").unwrap_or(msg);
    match msg.split_once(':') {
        Some((key, rest)) if attnpaint_core::pipeline::CONFIG_KEYS.contains(&key) => {
            Failure::Usage(format!("{}:{rest}", flag_for(key)))
        }
        _ => Failure::Usage(msg.to_string()),
    }
}

struct Job {
    image: PathBuf,
    mask: PathBuf,
    prompt: String,
    cfg: RunConfig,
}

fn resolve_job(args: &RunArgs) -> CliResult<Job> {
    let mut cfg = RunConfig::default();
    let mut image = None;
    let mut mask = None;
    let mut prompt = None;
    if let Some(path) = &args.config {
        let doc = KvDocument::load(path).map_err(|e| Failure::Usage(format!("--config: {e}")))?;
        let section = if doc.has_sections() { "config" } else { "" };
        for (k, v) in doc.section(section) {
            match k {
                "image" => image = (v != "none").then(|| PathBuf::from(v)),
                "mask" => mask = (v != "none").then(|| PathBuf::from(v)),
                "prompt" => prompt = Some(v.to_string()),
                _ => cfg
                    .set(k, v)
                    .map_err(|e| Failure::Usage(format!("--config {}: {e}", path.display())))?,
            }
        }
    }
    let set = |cfg: &mut RunConfig, key: &str, value: String| {
        cfg.set(key, &value)
            .map_err(|e| Failure::Usage(format!("{}: {e}", flag_for(key))))
    };
    let numbers: [(&str, Option<String>); 10] = [
        ("tau", args.tau.map(|v| v.to_string())),
        ("lambda", args.lambda.map(|v| v.to_string())),
        ("eta", args.eta.map(|v| v.to_string())),
        ("steps", args.steps.map(|v| v.to_string())),
        ("seed", args.seed.map(|v| v.to_string())),
        ("steer_iterations", args.steer_iters.map(|v| v.to_string())),
        ("steer_step_size", args.steer_step_size.map(|v| v.to_string())),
        ("guidance_scale", args.guidance_scale.map(|v| v.to_string())),
        ("dump_stride", args.dump_stride.map(|v| v.to_string())),
        ("dump_dir", args.dump_dir.as_ref().map(|p| p.display().to_string())),
    ];
    for (key, value) in numbers {
        if let Some(v) = value {
            set(&mut cfg, key, v)?;
        }
    }
    let texts: [(&str, &Option<String>); 4] = [
        ("backend", &args.backend),
        ("sams_layers", &args.sams_layers),
        ("makvs_layers", &args.makvs_layers),
        ("dump_layers", &args.dump_layers),
    ];
    for (key, value) in texts {
        if let Some(v) = value {
            set(&mut cfg, key, v.clone())?;
        }
    }
    if args.no_steer {
        cfg.steer.enabled = false;
    }
    cfg.validate().map_err(|e| usage_from_config_error(&e.to_string()))?;

    let missing = |flag: &str| Failure::Usage(format!("--{flag} is required (or set `{flag}` in the config file)"));
    let image = args.image.clone().or(image).ok_or_else(|| missing("image"))?;
    let mask = args.mask.clone().or(mask).ok_or_else(|| missing("mask"))?;
    let prompt = args.prompt.clone().or(prompt).ok_or_else(|| missing("prompt"))?;
    if prompt.contains(['\n', '\r']) {
        return Err(Failure::Usage("--prompt: must be a single line".into()));
    }
    Ok(Job {
        image,
        mask,
        prompt,
        cfg,
    })
}

fn absolute(path: &Path) -> PathBuf {
    fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf())
}

fn load_inputs(job: &Job) -> CliResult<(RgbImage, BinaryMask)> {
    let img = load_rgb(&job.image).map_err(|e| Failure::Usage(format!("--image: {e}")))?;
    let mask = BinaryMask::load(&job.mask).map_err(|e| Failure::Usage(format!("--mask: {e}")))?;
    if (img.height() as usize, img.width() as usize) != mask.resolution() {
        return Err(Failure::Usage(format!(
            "--mask: mask is {}x{} but the image is {}x{}",
            mask.width(),
            mask.height(),
            img.width(),
            img.height()
        )));
    }
    if job.cfg.backend == BackendKind::Toy && (img.width() % 8 != 0 || img.height() % 8 != 0) {
        return Err(Failure::Usage(format!(
            "--image: the toy backend needs sides divisible by 8, got {}x{}",
            img.width(),
            img.height()
        )));
    }
    Ok((img, mask))
}

fn write_run(job: &Job, out: &mut RunOutput, dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let png = dir.join("output.png");
    save_png(&out.image, &png)?;
    let m = &mut out.manifest;
    m.image_path = Some(absolute(&job.image));
    m.mask_path = Some(absolute(&job.mask));
    m.output_path = Some(absolute(&png));
    m.write(&dir.join("manifest.txt"))?;
    Ok(())
}

fn cmd_run(args: &RunArgs) -> CliResult<()> {
    let job = resolve_job(args)?;
    let (img, mask) = load_inputs(&job)?;
    let mut out = run_inpaint(&img, &mask, &job.prompt, &job.cfg).map_err(anyhow::Error::from)?;
    write_run(&job, &mut out, &args.out_dir)?;
    let m = &out.manifest;
    println!(
        "{} steps ({} structure, {} style); output {}",
        m.steps.len(),
        m.structure_steps,
        m.style_steps,
        args.out_dir.join("output.png").display()
    );
    Ok(())
}

fn cmd_ablate(args: &RunArgs) -> CliResult<()> {
    let job = resolve_job(args)?;
    let (img, mask) = load_inputs(&job)?;
    if job.cfg.backend != BackendKind::Toy {
        return Err(Failure::Runtime(anyhow::anyhow!(
            "ablation needs the toy backend; no external backend is linked"
        )));
    }
    let backend = ToyBackend::for_image(img.height() as usize, img.width() as usize, job.cfg.seed)
        .map_err(anyhow::Error::from)?;
    let mut report =
        run_ablation(&backend, &img, &mask, &job.prompt, &job.cfg).map_err(anyhow::Error::from)?;
    for (variant, out) in &mut report.runs {
        write_run(&job, out, &args.out_dir.join(variant.to_string()))?;
    }
    let table = report.to_tsv();
    let write = |name: &str, text: &str| -> anyhow::Result<()> {
        let p = args.out_dir.join(name);
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
    };
    write("ablation.tsv", &table)?;
    write("steer_trajectories.tsv", &report.trajectories_tsv())?;
    print!("{table}");
    Ok(())
}

fn cmd_analyze(args: &AnalyzeArgs) -> CliResult<()> {
    let kinds: Vec<DumpKind> = match &args.kind {
        Some(k) => vec![k.parse().map_err(|e| Failure::Usage(format!("--kind: {e}")))?],
        None => vec![DumpKind::SelfAttention, DumpKind::SelfModified],
    };
    let entries = read_index(&args.dump).map_err(anyhow::Error::from)?;
    let selected: Vec<_> = entries
        .into_iter()
        .filter(|e| kinds.contains(&e.kind))
        .filter(|e| args.layer.is_none_or(|l| e.layer == l))
        .filter(|e| args.step.is_none_or(|s| e.step == s))
        .collect();
    let out_dir = args.out_dir.clone().unwrap_or_else(|| args.dump.join("pca"));
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut report = String::from("file\tlayer\tstep\ttimestep\tkind\tvar1\tvar2\tvar3\tdegenerate\n");
    for e in &selected {
        let payload = read_payload(&args.dump, e).map_err(anyhow::Error::from)?;
        let pca = pca_rgb(&payload.mapv(f64::from), e.resolution)
            .with_context(|| format!("PCA of {}", e.file))?;
        let name = format!("L{:02}_S{:03}_{}.png", e.layer, e.step, e.kind);
        save_png(&pca.to_image(), &out_dir.join(&name)).map_err(anyhow::Error::from)?;
        let v = pca.explained_variance;
        report.push_str(&format!(
            "{name}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            e.layer,
            e.step,
            e.timestep,
            e.kind,
            v[0],
            v[1],
            v[2],
            pca.is_degenerate()
        ));
    }
    let report_path = out_dir.join("pca_report.tsv");
    fs::write(&report_path, &report).with_context(|| format!("writing {}", report_path.display()))?;
    println!("{} records analysed; report {}", selected.len(), report_path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Analyze(a) => cmd_analyze(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
