use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use fvforge::augment::{plan_views, PoolOrder};
use fvforge::classify::SvmConfig;
use fvforge::eval::{evaluate_table, Integrator, ScoreTable};
use fvforge::fisher::{FvNorm, IntraBlocks};
use fvforge::fusion::FusionWeights;
use fvforge::gmm::{GmmConfig, GmmModel};
use fvforge::normalize::{DescriptorSet, Provenance, TddMode, DEFAULT_EPSILON};
use fvforge::pca::PcaModel;
use fvforge::pipeline::stages;
use fvforge::pipeline::synth::{synth, SynthConfig};
use fvforge::pipeline::{self, PipelineConfig};
use fvforge::tensors::{load_manifest, read_map, read_vector, write_tensor, Split};
use fvforge::{Error, GlobalVector, Result, ScoreVector};

#[derive(Parser)]
#[command(name = "fvforge", version, about = "Two-stream global and Fisher-vector recognition over activation tensors")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the five-crop view plan of an image as CSV.
    PlanViews(PlanViewsArgs),
    /// Normalize a conv map and write its descriptors.
    Tdd(TddArgs),
    /// Fit PCA on descriptor files.
    FitPca(FitPcaArgs),
    /// Project a descriptor file with a PCA model.
    ApplyPca(ApplyPcaArgs),
    /// Fit a diagonal GMM on descriptor files.
    FitGmm(FitGmmArgs),
    /// Encode one image's per-view descriptor files into a Fisher vector.
    EncodeFv(EncodeFvArgs),
    /// Sum-pool per-view vectors of one image.
    Pool(PoolArgs),
    /// Weighted sum of two score vectors (or score tables), or weighted
    /// concatenation of two feature vectors.
    Fuse(FuseArgs),
    /// Train one-vs-rest linear SVMs on per-image feature files.
    TrainSvm(TrainSvmArgs),
    /// Score feature files with a trained model.
    Predict(PredictArgs),
    /// Gather per-image score vectors into a scores table.
    CollectScores(CollectScoresArgs),
    /// Per-class AP, mAP and top-1 of a scores table.
    Evaluate(EvaluateArgs),
    /// Run a whole scenario from a manifest.
    Run(RunArgs),
    /// Generate a seeded synthetic dataset and its manifest.
    Synth(SynthArgs),
}

#[derive(Args)]
struct PlanViewsArgs {
    #[arg(long)]
    width: u32,
    #[arg(long)]
    height: u32,
    #[arg(long, value_delimiter = ',', default_value = "256,384,512")]
    scales: Vec<u32>,
    #[arg(long, default_value_t = 224)]
    crop: u32,
    #[arg(long)]
    no_flips: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Channel,
    Spatial,
    Both,
}

impl From<ModeArg> for TddMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Channel => TddMode::Channel,
            ModeArg::Spatial => TddMode::Spatial,
            ModeArg::Both => TddMode::Both,
        }
    }
}

#[derive(Args)]
struct TddArgs {
    #[arg(long, value_enum)]
    mode: ModeArg,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    epsilon: f64,
}

#[derive(Args)]
struct FitPcaArgs {
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long = "in", num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ApplyPcaArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitGmmArgs {
    #[arg(long, default_value_t = 256)]
    k: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    #[arg(long, default_value_t = 500_000)]
    max_descriptors: usize,
    #[arg(long = "in", num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolArg {
    SumThenNormalize,
    NormalizeThenSum,
}

impl From<PoolArg> for PoolOrder {
    fn from(p: PoolArg) -> Self {
        match p {
            PoolArg::SumThenNormalize => PoolOrder::SumThenNormalize,
            PoolArg::NormalizeThenSum => PoolOrder::NormalizeThenSum,
        }
    }
}

#[derive(Args)]
struct EncodeFvArgs {
    #[arg(long)]
    gmm: PathBuf,
    /// One projected descriptor file per view.
    #[arg(long = "in", num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Comma list of intra, power, l2 or none.
    #[arg(long, default_value = "intra,power")]
    norm: String,
    #[arg(long, default_value = "per_order")]
    intra_blocks: String,
    #[arg(long, value_enum, default_value = "sum-then-normalize")]
    pool: PoolArg,
}

#[derive(Args)]
struct PoolArgs {
    #[arg(long = "in", num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// ℓ2-normalize the pooled vector.
    #[arg(long)]
    l2: bool,
    #[arg(long, value_enum, default_value = "sum-then-normalize")]
    pool: PoolArg,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum FuseMode {
    Scores,
    Features,
}

#[derive(Args)]
struct FuseArgs {
    #[arg(long, value_enum)]
    mode: FuseMode,
    /// Weights of the first and second input.
    #[arg(long, default_value = "1,1")]
    alpha: FusionWeights,
    /// Exactly two inputs: object then scene (or fc then conv). Score
    /// tables (`.csv`) are fused row by row.
    #[arg(long = "in", num_args = 2, required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainSvmArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory holding `<image_id>.fvt` for every training image.
    #[arg(long)]
    features: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    c: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    max_epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Feature files; each file stem is taken as the image id.
    #[arg(long = "in", num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CollectScoresArgs {
    /// Score vector files; each file stem is taken as the image id.
    #[arg(long = "in", num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value = "step")]
    integrator: String,
    /// Also write the report CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Pipeline config (TOML); the shipped defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// Training images per class.
    #[arg(long, default_value_t = 20)]
    images_per_class: usize,
    #[arg(long, default_value_t = 10)]
    test_per_class: usize,
    #[arg(long, default_value_t = 2)]
    views: usize,
    #[arg(long, default_value_t = 6)]
    map_size: usize,
    #[arg(long, default_value_t = 32)]
    channels: usize,
    #[arg(long, default_value_t = 64)]
    fc_dim: usize,
    #[arg(long, default_value_t = 0.5)]
    noise: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Parameter(_) => 2,
        Error::Numeric(_) => 4,
        Error::Io { .. }
        | Error::Format(_)
        | Error::Corrupt(_)
        | Error::Data(_)
        | Error::Shape(_)
        | Error::Validation(_)
        | Error::UndefinedAp => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.quiet {
            log::LevelFilter::Warn
        } else {
            log::LevelFilter::Info
        })
        .format(|buf, record| {
            writeln!(
                buf,
                "level={} {}",
                record.level().as_str().to_lowercase(),
                record.args()
            )
        })
        .target(env_logger::Target::Stderr)
        .init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn read_descriptors(path: &Path) -> Result<DescriptorSet> {
    Ok(DescriptorSet::from_map(read_map(path)?, Provenance::Raw))
}

fn write_descriptors(set: &DescriptorSet, path: &Path) -> Result<()> {
    write_tensor(&set.to_map()?.into(), path)
}

fn image_id(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .ok_or_else(|| Error::Parameter(format!("cannot take an image id from {}", path.display())))
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "csv")
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::PlanViews(a) => {
            let plan = plan_views(a.width, a.height, &a.scales, a.crop, !a.no_flips)?;
            print!("{}", plan.to_csv());
            info!("stage=plan_views views={}", plan.views.len());
        }
        Command::Tdd(a) => {
            let set = stages::tdd_descriptors(&read_map(&a.input)?, a.mode.into(), a.epsilon)?;
            write_descriptors(&set, &a.out)?;
            info!("stage=tdd descriptors={} dim={}", set.len(), set.dim());
        }
        Command::FitPca(a) => {
            let sets = a
                .inputs
                .iter()
                .map(|p| read_descriptors(p))
                .collect::<Result<Vec<_>>>()?;
            stages::fit_pca_stage(&sets, a.dim, &a.out)?;
        }
        Command::ApplyPca(a) => {
            let model = PcaModel::load(&a.model)?;
            let set = stages::project_stage(&model, &read_descriptors(&a.input)?)?;
            write_descriptors(&set, &a.out)?;
            info!("stage=apply_pca descriptors={} dim={}", set.len(), set.dim());
        }
        Command::FitGmm(a) => {
            let cfg = GmmConfig {
                k: a.k,
                seed: a.seed,
                max_iters: a.max_iters,
                tol: a.tol,
                max_descriptors: a.max_descriptors,
                ..GmmConfig::default()
            };
            let sets = a
                .inputs
                .iter()
                .map(|p| read_descriptors(p))
                .collect::<Result<Vec<_>>>()?;
            stages::fit_gmm_stage(&sets, &cfg, &a.out)?;
        }
        Command::EncodeFv(a) => {
            let gmm = GmmModel::load(&a.gmm)?;
            let blocks: IntraBlocks = a.intra_blocks.parse()?;
            let norm = FvNorm::parse_list(&a.norm, blocks)?;
            let views = a
                .inputs
                .iter()
                .map(|p| read_descriptors(p))
                .collect::<Result<Vec<_>>>()?;
            let fv = stages::encode_image(&gmm, &views, norm, a.pool.into())?;
            write_tensor(&fv.clone().into(), &a.out)?;
            info!("stage=encode_fv views={} dim={}", views.len(), fv.data().len());
        }
        Command::Pool(a) => {
            let views = a
                .inputs
                .iter()
                .map(|p| read_vector(p))
                .collect::<Result<Vec<_>>>()?;
            let pooled = stages::pool_vectors(&views, a.l2, a.pool.into())?;
            write_tensor(&pooled.into(), &a.out)?;
        }
        Command::Fuse(a) => fuse(a)?,
        Command::TrainSvm(a) => {
            let manifest = load_manifest(&a.manifest)?;
            let mut x = Vec::new();
            let mut y = Vec::new();
            for e in manifest.split(Split::Train) {
                let f = read_vector(&a.features.join(format!("{}.fvt", e.image_id)))?;
                x.push(f.into_data());
                y.push(e.label.expect("training entries are labeled"));
            }
            let cfg = SvmConfig {
                c: a.c,
                seed: a.seed,
                max_epochs: a.max_epochs,
                tol: a.tol,
            };
            stages::train_svm_stage(&x, &y, manifest.class_names(), &cfg, &a.out)?;
        }
        Command::Predict(a) => {
            let model = fvforge::classify::LinearModel::load(&a.model)?;
            let ids = a
                .inputs
                .iter()
                .map(|p| image_id(p))
                .collect::<Result<Vec<_>>>()?;
            let features = a
                .inputs
                .iter()
                .map(|p| read_vector(p).map(GlobalVector::into_data))
                .collect::<Result<Vec<_>>>()?;
            let table = stages::predict_stage(&model, &ids, &features)?;
            table.write(&a.out)?;
            info!("stage=predict images={}", ids.len());
        }
        Command::CollectScores(a) => {
            let mut table = ScoreTable::default();
            for p in &a.inputs {
                table.push(image_id(p)?, read_vector(p)?.into_data());
            }
            table.write(&a.out)?;
        }
        Command::Evaluate(a) => {
            let table = ScoreTable::read(&a.scores)?;
            let manifest_path = a
                .manifest
                .ok_or_else(|| Error::Parameter("evaluate needs --manifest for labels".into()))?;
            let integrator: Integrator = a.integrator.parse()?;
            let manifest = load_manifest(&manifest_path)?;
            let report = evaluate_table(&table, &manifest, integrator)?;
            if let Some(out) = &a.out {
                report.write(out)?;
            }
            print!("{}", report.to_csv());
            println!("{}", report.summary_line());
            info!("stage=evaluate images={} {}", report.images, report.summary_line());
        }
        Command::Run(a) => {
            let cfg = match &a.config {
                Some(p) => PipelineConfig::load(p)?,
                None => PipelineConfig::from_toml(pipeline::DEFAULT_CONFIG)?,
            };
            let manifest = load_manifest(&a.manifest)?;
            let report = pipeline::run(&manifest, &cfg, &a.out)?;
            info!(
                "stage=run scenario={} out={}",
                cfg.scenario.as_str(),
                a.out.display()
            );
            println!("{}", report.summary_line());
        }
        Command::Synth(a) => {
            let cfg = SynthConfig {
                classes: a.classes,
                train_per_class: a.images_per_class,
                test_per_class: a.test_per_class,
                views: a.views,
                map_size: a.map_size,
                channels: a.channels,
                fc_dim: a.fc_dim,
                noise: a.noise,
                seed: a.seed,
                ..SynthConfig::default()
            };
            synth(&cfg, &a.out)?;
        }
    }
    Ok(())
}

fn fuse(a: FuseArgs) -> Result<()> {
    let (first, second) = (&a.inputs[0], &a.inputs[1]);
    match a.mode {
        FuseMode::Scores if is_csv(first) || is_csv(second) => {
            let fused = stages::fuse_tables(
                &ScoreTable::read(first)?,
                &ScoreTable::read(second)?,
                a.alpha,
            )?;
            fused.write(&a.out)
        }
        FuseMode::Scores => {
            let s1 = ScoreVector::new(read_vector(first)?.into_data())?;
            let s2 = ScoreVector::new(read_vector(second)?.into_data())?;
            let fused = stages::fuse_score_stage(&s1, &s2, a.alpha)?;
            write_tensor(&stages::score_tensor(&fused)?.into(), &a.out)
        }
        FuseMode::Features => {
            let fused =
                stages::fuse_feature_stage(&read_vector(first)?, &read_vector(second)?, a.alpha, "fused")?;
            write_tensor(&fused.into(), &a.out)
        }
    }
    .inspect(|_| info!("stage=fuse out={}", a.out.display()))
}
