//! `gatefill` command line: corpus generation, pretraining, both training stages, ablations,
//! evaluation, editing, single-image inpainting and the HTTP service.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use gatefill_core::checkpoint::Checkpoint;
use gatefill_core::config::{read_kv, render_kv};
use gatefill_core::editing::{apply_edit, edit_probe, learn_directions, Directions};
use gatefill_core::evaluation::{difficulty_sweep, path_errors, SweepOptions};
use gatefill_core::imageio;
use gatefill_core::masking::{compose_final, mask_batch, sample_mask};
use gatefill_core::pretrain::pretrain_base_gan;
use gatefill_core::runlog::RunLog;
use gatefill_core::stylegan::sample_z;
use gatefill_core::training::{train, RunOutput};
use gatefill_core::{corpus, Ablation, MaskBand, ModelConfig, PretrainConfig, Profile, Stage, TrainConfig};
use gatefill_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser, Debug)]
#[command(name = "gatefill", version, about = "Diverse image inpainting by GAN inversion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the procedural face corpus to PNGs with an attribute table.
    GenCorpus(GenCorpus),
    /// Train the attribute classifier and the base GAN.
    Pretrain(Pretrain),
    /// Train encoder and mixer against a frozen base GAN.
    TrainStage1(TrainStage),
    /// Train the skip refiner on top of a stage-1 checkpoint.
    TrainStage2(TrainStage),
    /// Train one row of the ablation table end to end from a base checkpoint.
    Ablation(AblationArgs),
    /// FID, diversity and IDS per mask band.
    Eval(Eval),
    /// Learn attribute directions, or inpaint with an edit applied.
    Edit(Edit),
    /// Complete one masked image.
    Inpaint(Inpaint),
    /// Run the HTTP service.
    Serve(Serve),
}

#[derive(Args, Debug)]
pub struct Common {
    /// Run directory for config snapshot, logs, checkpoints and reports.
    #[arg(long)]
    pub out: PathBuf,
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides applied after the config file, `key=value`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct GenCorpus {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    #[arg(long, default_value = "cpu")]
    pub profile: Profile,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write this many random masks.
    #[arg(long, default_value_t = 0)]
    pub masks: usize,
}

#[derive(Args, Debug)]
pub struct Pretrain {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value = "cpu")]
    pub profile: Profile,
}

#[derive(Args, Debug)]
pub struct TrainStage {
    #[command(flatten)]
    pub common: Common,
    /// Starting checkpoint: base GAN for stage 1, stage-1 model for stage 2.
    #[arg(long)]
    pub from: PathBuf,
}

#[derive(Args, Debug)]
pub struct AblationArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=5))]
    pub id: u8,
    /// Base GAN checkpoint.
    #[arg(long)]
    pub base: PathBuf,
    /// Steps for stage 2, when the variant has one; defaults to `total_steps`.
    #[arg(long)]
    pub stage2_steps: Option<u64>,
}

#[derive(Args, Debug)]
pub struct Eval {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Held-out inputs per band.
    #[arg(long, default_value_t = 500)]
    pub samples: usize,
    /// Comma-separated bands, each `lo-hi` or `easy`/`difficult`/`full`.
    #[arg(long, default_value = "easy,difficult", value_delimiter = ',', value_parser = parse_band)]
    pub bands: Vec<MaskBand>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Skip the second-stage refinement even when the checkpoint has it.
    #[arg(long)]
    pub stage1_only: bool,
    /// Also report first-pass errors with the source latent versus a fresh one.
    #[arg(long)]
    pub path_errors: bool,
}

#[derive(Args, Debug)]
pub struct Edit {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Learn directions for these attributes and attach them to the checkpoint.
    #[arg(long, value_delimiter = ',')]
    pub learn: Vec<String>,
    /// Generated samples per learned direction.
    #[arg(long, default_value_t = 5000)]
    pub samples: usize,
    #[arg(long)]
    pub direction: Option<String>,
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    pub strength: f64,
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Return the raw generator output instead of re-imposing the known pixels.
    #[arg(long)]
    pub whole_image: bool,
}

#[derive(Args, Debug)]
pub struct Inpaint {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// White keeps a pixel, black marks it for filling.
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Completions to draw; more than one writes a horizontal strip.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct Serve {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long)]
    pub profile: Option<Profile>,
    #[arg(long, default_value_t = 256)]
    pub max_sessions: usize,
    #[arg(long)]
    pub session_file: Option<PathBuf>,
}

fn parse_band(s: &str) -> Result<MaskBand, String> {
    match s {
        "easy" => Ok(MaskBand::EASY),
        "difficult" => Ok(MaskBand::DIFFICULT),
        "full" => Ok(MaskBand::FULL),
        _ => {
            let (lo, hi) = s.split_once('-').ok_or_else(|| format!("band `{s}`: expected lo-hi or easy/difficult/full"))?;
            let num = |x: &str| x.parse::<f64>().map_err(|_| format!("band bound `{x}` is not a number"));
            MaskBand::new(num(lo)?, num(hi)?).map_err(|e| e.to_string())
        }
    }
}

/// Parses `argv` and runs it; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn settings(common: &Common) -> anyhow::Result<Vec<(String, String)>> {
    let mut pairs = match &common.config {
        Some(p) => read_kv(p)?,
        None => Vec::new(),
    };
    for o in &common.overrides {
        let (k, v) = o.split_once('=').with_context(|| format!("--set expects key=value, got `{o}`"))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(s) = common.seed {
        pairs.push(("seed".into(), s.to_string()));
    }
    Ok(pairs)
}

fn announce(out: &Path, pairs: &[(String, String)]) -> anyhow::Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let text = render_kv(pairs);
    print!("resolved config:\n{text}");
    std::fs::write(out.join("config.txt"), &text)?;
    Ok(())
}

fn train_config(common: &Common, stage: Stage, ablation: Option<Ablation>) -> anyhow::Result<TrainConfig> {
    let mut cfg = TrainConfig { stage, ..TrainConfig::default() };
    if let Some(a) = ablation {
        a.apply(&mut cfg);
    }
    for (k, v) in settings(common)? {
        cfg.set(&k, &v)?;
    }
    cfg.stage = stage;
    cfg.validate()?;
    Ok(cfg)
}

fn run_training(start: Checkpoint, cfg: &TrainConfig, out: &Path, name: &str) -> anyhow::Result<Checkpoint> {
    let ck_path = out.join(format!("{name}.safetensors"));
    let mut run = RunOutput { log: RunLog::create(&out.join(format!("{name}.jsonl")))?, checkpoint: Some(ck_path.clone()) };
    let ck = train(start, cfg, &mut run)?;
    println!("wrote {}", ck_path.display());
    Ok(ck)
}

fn load(path: &Path) -> anyhow::Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn read_inputs(model_cfg: &ModelConfig, image: &Path, mask: &Path) -> anyhow::Result<(Tensor<f32>, gatefill_core::BinaryMask)> {
    let img: Tensor<f32> = imageio::read_png(image)?;
    let m = imageio::read_mask(mask)?;
    let r = model_cfg.resolution;
    if img.shape() != [3, r, r] || (m.height(), m.width()) != (r, r) {
        bail!("image and mask must both be {r}x{r}");
    }
    Ok((img, m))
}

fn execute(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::GenCorpus(a) => {
            let size = ModelConfig::profile(a.profile).resolution;
            println!("resolved config:\ncount = {}\nresolution = {size}\nseed = {}\nmasks = {}", a.count, a.seed, a.masks);
            corpus::write_corpus(&a.out, a.count, size, a.seed)?;
            if a.masks > 0 {
                let dir = a.out.join("masks");
                std::fs::create_dir_all(&dir)?;
                for i in 0..a.masks {
                    let m = sample_mask(MaskBand::FULL, size, a.seed.wrapping_add(i as u64))?;
                    imageio::write_mask(&dir.join(format!("mask_{i:06}.png")), &m)?;
                }
            }
            println!("wrote {} images to {}", a.count, a.out.display());
        }
        Command::Pretrain(a) => {
            let mut cfg = PretrainConfig::default();
            let pairs = settings(&a.common)?;
            for (k, v) in &pairs {
                cfg.set(k, v)?;
            }
            cfg.validate()?;
            let mut shown = vec![("profile".to_string(), format!("{:?}", a.profile).to_lowercase())];
            shown.extend(pretrain_pairs(&cfg));
            announce(&a.common.out, &shown)?;
            let model_cfg = ModelConfig::profile(a.profile);
            let mut log = RunLog::create(&a.common.out.join("pretrain.jsonl"))?;
            let ck = pretrain_base_gan(&model_cfg, &cfg, true, &mut log)?;
            let path = a.common.out.join("base.safetensors");
            ck.save(&path)?;
            println!("wrote {}", path.display());
        }
        Command::TrainStage1(a) => {
            let cfg = train_config(&a.common, Stage::Stage1, None)?;
            announce(&a.common.out, &cfg.to_pairs())?;
            run_training(load(&a.from)?, &cfg, &a.common.out, "stage1")?;
        }
        Command::TrainStage2(a) => {
            let start = load(&a.from)?;
            let mut cfg = train_config(&a.common, Stage::Stage2, None)?;
            if !a.common.overrides.iter().any(|o| o.starts_with("gated_mixer")) {
                cfg.gated_mixer = start.model.mixer.gated;
            }
            announce(&a.common.out, &cfg.to_pairs())?;
            run_training(start, &cfg, &a.common.out, "stage2")?;
        }
        Command::Ablation(a) => {
            let ab = Ablation::by_id(a.id)?;
            println!(
                "ablation {}: full_recons = {}, gated_mixer = {}, second_stage = {}",
                ab.id, ab.full_recons, ab.gated_mixer, ab.second_stage
            );
            let s1 = train_config(&a.common, Stage::Stage1, Some(ab))?;
            announce(&a.common.out, &s1.to_pairs())?;
            let ck = run_training(load(&a.base)?, &s1, &a.common.out, "stage1")?;
            if ab.second_stage {
                let s2 = TrainConfig { stage: Stage::Stage2, total_steps: a.stage2_steps.unwrap_or(s1.total_steps), ..s1 };
                run_training(ck, &s2, &a.common.out, "stage2")?;
            }
        }
        Command::Eval(a) => {
            let ck = load(&a.checkpoint)?;
            let opts = SweepOptions { seed: a.seed, corpus_seed: 0, refine: a.stage1_only.then_some(false) };
            let bands: Vec<String> = a.bands.iter().map(|b| b.to_string()).collect();
            announce(
                &a.out,
                &[
                    ("checkpoint".into(), a.checkpoint.display().to_string()),
                    ("stage".into(), ck.stage().to_string()),
                    ("samples".into(), a.samples.to_string()),
                    ("bands".into(), bands.join(",")),
                    ("refine".into(), (!a.stage1_only && ck.model.has_refiner()).to_string()),
                    ("seed".into(), a.seed.to_string()),
                ],
            )?;
            let report = difficulty_sweep(&ck.model, &a.bands, a.samples, &opts)?;
            let mut text = report.to_toml()?;
            if a.path_errors {
                let (pa, pb) = path_errors(&ck.model, MaskBand::FULL, a.samples, a.seed)?;
                text.push_str(&format!("\n[path_errors]\nsame_latent = {pa}\nfresh_latent = {pb}\n"));
            }
            std::fs::write(a.out.join("metrics.toml"), &text)?;
            print!("{text}");
        }
        Command::Edit(a) => edit(a)?,
        Command::Inpaint(a) => {
            let ck = load(&a.checkpoint)?;
            let (img, m) = read_inputs(&ck.model.cfg, &a.image, &a.mask)?;
            println!("resolved config:\ncheckpoint = {}\nseed = {}\ncount = {}", a.checkpoint.display(), a.seed, a.count);
            let r = ck.model.cfg.resolution;
            let images = Tensor::stack(&vec![img; a.count.max(1)])?;
            let masks = mask_batch(&vec![m; a.count.max(1)])?;
            let z = sample_z(a.count.max(1), ck.model.cfg.z_dim, &mut ChaCha8Rng::seed_from_u64(a.seed));
            let c = ck.model.complete(&images, &masks, &z)?;
            let out = if a.count > 1 { imageio::strip(&c.composite) } else { c.composite.reshape(&[3, r, r])? };
            imageio::write_png(&a.out, &out)?;
            println!("wrote {}", a.out.display());
        }
        Command::Serve(a) => {
            let cfg = gatefill_service::ServiceConfig {
                checkpoint: a.checkpoint,
                profile: a.profile,
                port: a.port,
                max_sessions: a.max_sessions,
                persist: a.session_file,
            };
            println!("resolved config:\n{cfg:?}");
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(gatefill_service::serve(cfg)).map_err(anyhow::Error::msg)?;
        }
    }
    Ok(())
}

fn pretrain_pairs(c: &PretrainConfig) -> Vec<(String, String)> {
    [
        ("gan_steps", c.gan_steps.to_string()),
        ("batch_size", c.batch_size.to_string()),
        ("lr", c.lr.to_string()),
        ("adam_beta1", c.adam_beta1.to_string()),
        ("adam_beta2", c.adam_beta2.to_string()),
        ("r1_gamma", c.r1_gamma.to_string()),
        ("r1_every", c.r1_every.to_string()),
        ("classifier_steps", c.classifier_steps.to_string()),
        ("classifier_lr", c.classifier_lr.to_string()),
        ("corpus_size", c.corpus_size.to_string()),
        ("corpus_seed", c.corpus_seed.to_string()),
        ("seed", c.seed.to_string()),
        ("log_every", c.log_every.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

fn edit(a: Edit) -> anyhow::Result<()> {
    let mut ck = load(&a.checkpoint)?;
    if !a.learn.is_empty() {
        println!("resolved config:\nattributes = {}\nsamples = {}\nseed = {}", a.learn.join(","), a.samples, a.seed);
        let names: Vec<&str> = a.learn.iter().map(String::as_str).collect();
        let mut dirs = match ck.directions_path(&a.checkpoint) {
            Some(p) if p.exists() => Directions::load(&p)?,
            _ => Directions::default(),
        };
        let learned = learn_directions(&ck.model, &names, a.samples, a.seed)?;
        for d in learned.directions {
            let probe = edit_probe(&ck.model, &d, 3.0, 500, a.seed.wrapping_add(1))?;
            println!("{}: sigma {:.4}, flip rate at 3 sigma {:.3}", d.name, d.sigma, probe.flip_rate);
            dirs.insert(d);
        }
        let stem = a.checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
        let file = format!("{stem}.directions.json");
        dirs.save(&a.checkpoint.with_file_name(&file))?;
        ck.directions = Some(file);
        ck.save(&a.checkpoint)?;
        println!("attached {} directions to {}", dirs.directions.len(), a.checkpoint.display());
        return Ok(());
    }
    let (Some(name), Some(image), Some(mask), Some(out)) = (&a.direction, &a.image, &a.mask, &a.out) else {
        bail!("edit needs --learn, or --direction with --image, --mask and --out");
    };
    let dirs = match ck.directions_path(&a.checkpoint) {
        Some(p) => Directions::load(&p)?,
        None => bail!("{} has no directions; run `gatefill edit --learn hat` first", a.checkpoint.display()),
    };
    let d = dirs.get(name)?;
    println!("resolved config:\ndirection = {name}\nstrength = {}\nseed = {}\nwhole_image = {}", a.strength, a.seed, a.whole_image);
    let (img, m) = read_inputs(&ck.model.cfg, image, mask)?;
    let r = ck.model.cfg.resolution;
    let images = img.clone().reshape(&[1, 3, r, r])?;
    let masks = mask_batch(std::slice::from_ref(&m))?;
    let z = sample_z(1, ck.model.cfg.z_dim, &mut ChaCha8Rng::seed_from_u64(a.seed));
    let shape = [1, ck.model.cfg.n_styles(), ck.model.cfg.w_dim];
    let offset = apply_edit(&Tensor::<f32>::zeros(&shape), d, a.strength)?;
    let c = ck.model.complete_with(&images, &masks, &z, Some(&offset), ck.model.has_refiner())?;
    let raw = c.output.reshape(&[3, r, r])?;
    let result = if a.whole_image { raw } else { compose_final(&img, &m, &raw)? };
    imageio::write_png(out, &result)?;
    println!("wrote {}", out.display());
    Ok(())
}
