//! `deeperaser` command-line tool.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use deeperaser::checkpoint;
use deeperaser::eval::{evaluate_each, Predictor, Protocol};
use deeperaser::metrics::{composite_non_text, MetricReport};
use deeperaser::model::{forward, ModelConfig};
use deeperaser::synth::{self, SceneGenerator, SynthConfig};
use deeperaser::training::{run_ablation, AblationRow, TrainConfig, TrainSource, Trainer, Variant};
use deeperaser::viz::latent_heatmap;
use deeperaser::{io, Model, Tensor};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "deeperaser", version, about = "Iterative scene-text eraser")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic text dataset.
    Synth(SynthArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Score a checkpoint or saved predictions.
    Eval(EvalArgs),
    /// Erase the masked text of one image.
    Infer(InferArgs),
    /// Train and score one ablation variant, appending a table row.
    Ablate(AblateArgs),
    /// Write every intermediate prediction I_1 … I_K.
    DumpIters(DumpArgs),
    /// Write a heatmap of mean |l_k| for every iteration.
    DumpLatents(DumpArgs),
    /// Run the HTTP inference service.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthFormat {
    /// images/, gts/ (text-free backgrounds) and anns/ polygons.
    Dataset,
    /// images/, gts/ and masks/ with a random part mask per sample.
    Triplets,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, value_enum, default_value_t = SynthFormat::Dataset)]
    format: SynthFormat,
    /// Probability of excluding each instance from a part mask.
    #[arg(long, default_value_t = 0.4)]
    alpha: f64,
    /// Directory of PNG textures used as backgrounds.
    #[arg(long)]
    textures: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset directory (images/, gts/, anns/ or masks/).
    #[arg(long, conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Train on this many generated scenes instead of a directory.
    #[arg(long)]
    synthetic: Option<usize>,
    /// Seed for generated scenes.
    #[arg(long, default_value_t = 0)]
    synth_seed: u64,
    /// Side of generated scenes.
    #[arg(long, default_value_t = 64)]
    synth_size: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// `key = value` training configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// JSONL step log; defaults to `<out>.log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Continue from a checkpoint with optimizer state.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, required_unless_present = "predictions", conflicts_with = "predictions")]
    checkpoint: Option<PathBuf>,
    /// Directory of `<id>.png` predictions.
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long, default_value = "raw")]
    protocol: Protocol,
    /// Write the mean report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write per-image metrics as CSV.
    #[arg(long)]
    per_image: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    image: PathBuf,
    /// 8-bit single-channel PNG, 255 = erase.
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Iterations; defaults to the trained count.
    #[arg(long)]
    iters: Option<usize>,
    /// Also write every N-th intermediate prediction as iter_XX.png.
    #[arg(long)]
    dump_every: Option<usize>,
    /// Directory for dumped frames; defaults to the output's directory.
    #[arg(long)]
    dump_dir: Option<PathBuf>,
    /// Skip compositing: keep network output outside the mask too.
    #[arg(long)]
    raw: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    variant: Variant,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    /// Evaluation set; defaults to the full-mask triplets of the training data.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    /// Results table; created with a header when missing.
    #[arg(long)]
    table: PathBuf,
    /// Evaluation iterations; defaults to the variant's training count.
    #[arg(long)]
    eval_iters: Option<usize>,
    /// Also save the trained model.
    #[arg(long)]
    save: Option<PathBuf>,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    iters: Option<usize>,
}

#[derive(Args)]
struct ServeArgs {
    /// Defaults to $DEEPERASER_CHECKPOINT.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Defaults to $DEEPERASER_PORT, then 8080.
    #[arg(long)]
    port: Option<u16>,
    #[arg(long, default_value_t = deeperaser_serve::DEFAULT_MAX_SIDE)]
    max_side: u32,
    /// Static UI build served at `/`.
    #[arg(long)]
    static_dir: Option<PathBuf>,
    /// Allowed CORS origin; any when unset.
    #[arg(long)]
    cors_origin: Option<String>,
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<deeperaser::Error> for Failure {
    fn from(e: deeperaser::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let res = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::DumpIters(a) => cmd_dump_iters(a),
        Command::DumpLatents(a) => cmd_dump_latents(a),
        Command::Serve(a) => cmd_serve(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    let cfg = SynthConfig {
        height: a.height,
        width: a.width,
        ..SynthConfig::default()
    };
    let mut gen = SceneGenerator::new(cfg, a.seed);
    if let Some(dir) = &a.textures {
        gen = gen.with_textures(load_textures(dir)?);
    }
    let width = a.count.max(1).to_string().len().max(4);
    let scenes: Vec<(String, _)> = (0..a.count).map(|i| (format!("{i:0width$}"), gen.next_scene())).collect();
    match a.format {
        SynthFormat::Dataset => {
            synth::write_dataset_dir(&a.out, &scenes)?;
        }
        SynthFormat::Triplets => {
            if !(0.0..=1.0).contains(&a.alpha) {
                return Err(Failure::Usage(format!("--alpha must be in [0, 1], got {}", a.alpha)));
            }
            let triplets: Vec<_> = scenes
                .iter()
                .enumerate()
                .map(|(i, (id, s))| {
                    let mut t = synth::make_triplet(s, a.alpha, a.seed.wrapping_add(i as u64));
                    t.id = id.clone();
                    t
                })
                .collect();
            synth::write_triplets_dir(&a.out, &triplets)?;
        }
    }
    println!("wrote {} samples to {}", a.count, a.out.display());
    Ok(())
}

fn load_textures(dir: &Path) -> anyhow::Result<Vec<deeperaser::io::RgbImage>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("png"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no PNG textures in {}", dir.display());
    }
    paths.iter().map(|p| Ok(io::load_rgb(p)?)).collect()
}

fn read_config(path: Option<&Path>) -> Result<(TrainConfig, ModelConfig), Failure> {
    match path {
        None => Ok((TrainConfig::default(), ModelConfig::default())),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading {}", p.display()))
                .map_err(Failure::Runtime)?;
            TrainConfig::parse(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))
        }
    }
}

fn training_sources(d: &DataArgs) -> Result<Vec<TrainSource>, Failure> {
    match (&d.data, d.synthetic) {
        (Some(dir), None) => Ok(synth::load_annotated_dir(dir)?.into_iter().map(TrainSource::Annotated).collect()),
        (None, Some(n)) => {
            if n == 0 {
                return Err(Failure::Usage("--synthetic must be >= 1".into()));
            }
            let cfg = SynthConfig {
                height: d.synth_size,
                width: d.synth_size,
                ..SynthConfig::default()
            };
            let mut gen = SceneGenerator::new(cfg, d.synth_seed);
            Ok((0..n).map(|_| TrainSource::Scene(gen.next_scene())).collect())
        }
        _ => Err(Failure::Usage("give exactly one of --data or --synthetic".into())),
    }
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let (mut tcfg, mcfg) = read_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        tcfg.seed = s;
    }
    let data = training_sources(&a.data)?;
    let (model, optimizer) = match &a.resume {
        Some(p) => {
            let loaded = checkpoint::load(p)?;
            if loaded.model.config() != &tcfg.model_config(&mcfg) {
                return Err(Failure::Runtime(anyhow::anyhow!(
                    "{}: model configuration differs from the training configuration",
                    p.display()
                )));
            }
            (loaded.model, loaded.optimizer)
        }
        None => (Model::<f32>::init(tcfg.model_config(&mcfg), tcfg.seed)?, None),
    };
    let mut trainer = Trainer::new(model, tcfg.clone(), data.len())?;
    if let Some(opt) = optimizer {
        let per_epoch = data.len().div_ceil(tcfg.batch_size);
        trainer.step = opt.step as usize;
        trainer.epoch = trainer.step / per_epoch;
        trainer.optimizer = opt;
    }
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".log.jsonl");
        PathBuf::from(p)
    });
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let mut write_err = None;
    let res = trainer.fit(&data, |r| {
        let line = serde_json::to_string(r).expect("report serializes");
        if let Err(e) = writeln!(log, "{line}") {
            write_err.get_or_insert(e);
        }
        if r.step % 50 == 0 {
            eprintln!("step {:>6}  lr {:.3e}  loss {:.5}", r.step, r.lr, r.total);
        }
    });
    if let Some(e) = write_err {
        return Err(Failure::Runtime(anyhow::Error::new(e).context(format!("writing {}", log_path.display()))));
    }
    // Keep what was learned even when a step blew up.
    checkpoint::save(&a.out, &trainer.model, Some(&trainer.optimizer))?;
    res?;
    println!("trained {} steps; checkpoint {} ({})", trainer.step, a.out.display(), checkpoint::checkpoint_id(&trainer.model));
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let data = synth::load_dataset_dir(&a.data)?;
    let loaded;
    let predictor = match (&a.checkpoint, &a.predictions) {
        (Some(c), None) => {
            loaded = checkpoint::load(c)?;
            let iterations = a.iters.unwrap_or(loaded.model.config().iterations);
            if iterations == 0 {
                return Err(Failure::Usage("--iters must be >= 1".into()));
            }
            Predictor::Model {
                model: &loaded.model,
                iterations,
            }
        }
        (None, Some(dir)) => Predictor::Dir(dir),
        _ => return Err(Failure::Usage("give exactly one of --checkpoint or --predictions".into())),
    };
    let each = evaluate_each(&predictor, &data, a.protocol)?;
    let reports: Vec<MetricReport> = each.iter().map(|(_, r)| r.clone()).collect();
    let mean = MetricReport::mean(&reports)?;
    print!("{}", mean.to_text());
    if let Some(p) = &a.out {
        std::fs::write(p, serde_json::to_string_pretty(&mean).expect("report serializes"))
            .with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = &a.per_image {
        let mut s = format!("id,{}\n", MetricReport::CSV_HEADER);
        for (id, r) in &each {
            s.push_str(&format!("{id},{}\n", r.to_csv_row()));
        }
        std::fs::write(p, s).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

struct Loaded {
    model: Model<f32>,
    image: Tensor<f32>,
    mask: Tensor<f32>,
    iters: usize,
}

fn load_inputs(image: &Path, mask: &Path, ckpt: &Path, iters: Option<usize>) -> Result<Loaded, Failure> {
    let image_t = io::load_image_tensor(image)?;
    let mask_t = io::load_mask(mask)?;
    if !mask_t.same_spatial(&image_t) {
        return Err(Failure::Runtime(anyhow::anyhow!(
            "{}: mask is {}x{} but the image is {}x{}",
            mask.display(),
            mask_t.width(),
            mask_t.height(),
            image_t.width(),
            image_t.height()
        )));
    }
    let model = checkpoint::load(ckpt)?.model;
    let iters = iters.unwrap_or(model.config().iterations);
    if iters == 0 {
        return Err(Failure::Usage("--iters must be >= 1".into()));
    }
    Ok(Loaded {
        model,
        image: image_t,
        mask: mask_t,
        iters,
    })
}

/// `iter_01.png` … with at least two digits.
fn frame_name(k: usize, total: usize) -> String {
    let width = total.to_string().len().max(2);
    format!("iter_{k:0width$}.png")
}

fn cmd_infer(a: InferArgs) -> CmdResult {
    if a.dump_every == Some(0) {
        return Err(Failure::Usage("--dump-every must be >= 1".into()));
    }
    let l = load_inputs(&a.image, &a.mask, &a.checkpoint, a.iters)?;
    let out = forward(&l.model, &l.image, &l.mask, l.iters)?;
    let last = io::round_trip_8bit(out.predictions.last().expect("at least one prediction"));
    let result = if a.raw { last } else { composite_non_text(&last, &l.image, &l.mask)? };
    io::save_tensor_png(&result, &a.out)?;
    if let Some(every) = a.dump_every {
        let dir = a
            .dump_dir
            .clone()
            .unwrap_or_else(|| a.out.parent().map(Path::to_path_buf).unwrap_or_default());
        let total = out.predictions.len();
        for (i, p) in out.predictions.iter().enumerate() {
            let k = i + 1;
            if k % every == 0 {
                io::save_tensor_png(p, &dir.join(frame_name(k, total)))?;
            }
        }
    }
    Ok(())
}

fn cmd_dump_iters(a: DumpArgs) -> CmdResult {
    let l = load_inputs(&a.image, &a.mask, &a.checkpoint, a.iters)?;
    let out = forward(&l.model, &l.image, &l.mask, l.iters)?;
    let total = out.predictions.len();
    for (i, p) in out.predictions.iter().enumerate() {
        io::save_tensor_png(p, &a.out_dir.join(frame_name(i + 1, total)))?;
    }
    println!("wrote {total} frames to {}", a.out_dir.display());
    Ok(())
}

fn cmd_dump_latents(a: DumpArgs) -> CmdResult {
    let l = load_inputs(&a.image, &a.mask, &a.checkpoint, a.iters)?;
    let out = forward(&l.model, &l.image, &l.mask, l.iters)?;
    let total = out.latents.len();
    for (i, lat) in out.latents.iter().enumerate() {
        let heat = latent_heatmap(lat);
        io::save_gray(&io::plane_to_gray(&heat), &a.out_dir.join(frame_name(i + 1, total)))?;
    }
    println!("wrote {total} heatmaps to {}", a.out_dir.display());
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> CmdResult {
    let (tcfg, mcfg) = read_config(a.config.as_deref())?;
    let train = training_sources(&a.data)?;
    let eval = match &a.eval_data {
        Some(dir) => synth::load_dataset_dir(dir)?,
        None => train
            .iter()
            .map(|s| s.draw(deeperaser::training::MaskMode::All, 0.0, 0))
            .collect(),
    };
    if a.eval_iters == Some(0) {
        return Err(Failure::Usage("--eval-iters must be >= 1".into()));
    }
    let result = run_ablation(a.variant, &tcfg, &mcfg, &train, &eval, a.eval_iters)?;
    let row: AblationRow = result.row;
    let fresh = !a.table.exists() || std::fs::metadata(&a.table).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&a.table)
        .with_context(|| format!("opening {}", a.table.display()))?;
    if fresh {
        writeln!(f, "{}", AblationRow::CSV_HEADER).context("writing table")?;
    }
    writeln!(f, "{}", row.to_csv_row()).context("writing table")?;
    if let Some(p) = &a.save {
        checkpoint::save(p, &result.model, None)?;
    }
    println!("{}", row.to_csv_row());
    Ok(())
}

fn cmd_serve(a: ServeArgs) -> CmdResult {
    let checkpoint = match a.checkpoint {
        Some(p) => p,
        None => std::env::var(deeperaser_serve::ENV_CHECKPOINT)
            .map(PathBuf::from)
            .map_err(|_| Failure::Usage(format!("--checkpoint or ${} is required", deeperaser_serve::ENV_CHECKPOINT)))?,
    };
    let port = match a.port {
        Some(p) => p,
        None => match std::env::var(deeperaser_serve::ENV_PORT) {
            Ok(v) => v
                .parse()
                .map_err(|_| Failure::Usage(format!("${}: invalid port {v:?}", deeperaser_serve::ENV_PORT)))?,
            Err(_) => deeperaser_serve::DEFAULT_PORT,
        },
    };
    let config = deeperaser_serve::ServeConfig {
        checkpoint,
        port,
        max_side: a.max_side,
        static_dir: a.static_dir.or_else(|| std::env::var(deeperaser_serve::ENV_STATIC_DIR).ok().map(PathBuf::from)),
        cors_origin: a.cors_origin.or_else(|| std::env::var(deeperaser_serve::ENV_CORS_ORIGIN).ok()),
    };
    let rt = tokio::runtime::Runtime::new().context("starting runtime")?;
    rt.block_on(deeperaser_serve::run(config)).map_err(|e| Failure::Runtime(anyhow::anyhow!(e)))
}
