use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use segscape::graph::{build_hierarchy, horizontal_cut, Criterion, CutConfig, GradientImage};
use segscape::projector::{write_layout_json, ProjectionConfig};
use segscape::session::{
    evaluate, mask_from_region_labels, oracle_majority_labels, CanvasRect, EvalMode, LabelMask, Metrics,
    ProviderSpec, Session, SessionConfig,
};

#[derive(Parser)]
#[command(name = "segscape", version, about = "Interactive segment annotation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cut every image's watershed hierarchy and start a session from the segments.
    Partition(PartitionArgs),
    /// Re-describe all segments of a session with a feature provider.
    Features(FeaturesArgs),
    /// Reveal images and lay the shown segments out in 2D.
    Project(ProjectArgs),
    /// Label segments by ground-truth majority or by a canvas rectangle.
    Label(LabelArgs),
    /// Run one metric-learning round on the labeled segments.
    Train(TrainArgs),
    /// Fixed cut plus majority-vote labels scored against ground truth.
    OracleEval(OracleEvalArgs),
    /// Split each image's segments along ground-truth class borders.
    GtConstrain(GtConstrainArgs),
    /// Score predicted masks against ground-truth masks.
    Iou(IouArgs),
    /// Write indexed label masks and the palette.
    ExportMasks(ExportArgs),
    /// Serve the session over HTTP.
    Serve(ServeArgs),
}

#[derive(Args)]
struct InputArgs {
    /// Directory of `<name>.png` images.
    #[arg(long)]
    images: PathBuf,
    /// Directory of `<name>.fsgr` gradients; defaults to the image directory.
    #[arg(long)]
    gradients: Option<PathBuf>,
}

#[derive(Args)]
struct CutArgs {
    #[arg(long, default_value = "volume")]
    criterion: Criterion,
    #[arg(long, default_value_t = 1000.0)]
    threshold: f64,
}

impl CutArgs {
    fn config(&self) -> Result<CutConfig> {
        Ok(CutConfig::new(self.criterion, self.threshold)?)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ProviderKind {
    Builtin,
    File,
}

#[derive(Args)]
struct ProviderArgs {
    #[arg(long, value_enum, default_value = "builtin")]
    provider: ProviderKind,
    /// FSAF table keyed by segment; required with `--provider file`.
    #[arg(long)]
    feature_file: Option<PathBuf>,
}

impl ProviderArgs {
    fn spec(&self) -> Result<ProviderSpec> {
        match (self.provider, &self.feature_file) {
            (ProviderKind::Builtin, None) => Ok(ProviderSpec::Builtin),
            (ProviderKind::Builtin, Some(_)) => bail!("--feature-file requires --provider file"),
            (ProviderKind::File, Some(p)) => Ok(ProviderSpec::File(p.clone())),
            (ProviderKind::File, None) => bail!("--provider file requires --feature-file"),
        }
    }
}

#[derive(Args)]
struct PartitionArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    cut: CutArgs,
    #[command(flatten)]
    provider: ProviderArgs,
    /// Seeds the initial embedding head.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Session directory to create.
    #[arg(long)]
    session: PathBuf,
}

#[derive(Args)]
struct FeaturesArgs {
    #[arg(long)]
    session: PathBuf,
    #[command(flatten)]
    provider: ProviderArgs,
    /// Also write the feature table here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProjectArgs {
    #[arg(long)]
    session: PathBuf,
    /// Number of further images to reveal; all remaining when omitted.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long, default_value_t = 15)]
    k: usize,
    #[arg(long, default_value_t = 0.01)]
    min_dist: f64,
    /// Label supervision strength in [0, 1].
    #[arg(long, default_value_t = 0.5)]
    supervision: f64,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the layout JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LabelArgs {
    #[arg(long)]
    session: PathBuf,
    /// Ground-truth mask directory (`<image id>.png`).
    #[arg(long, conflicts_with_all = ["rect", "label"])]
    gt: Option<PathBuf>,
    /// Canvas rectangle `x0 y0 x1 y1`, inclusive.
    #[arg(long, num_args = 4, value_names = ["X0", "Y0", "X1", "Y1"], allow_negative_numbers = true, requires = "label")]
    rect: Option<Vec<f64>>,
    /// Palette id to assign inside `--rect`.
    #[arg(long)]
    label: Option<u32>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    session: PathBuf,
    /// Label by ground-truth majority before training.
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    triplets: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the head checkpoint here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Score only with this mode; all modes when omitted.
    #[arg(long)]
    mode: Option<EvalMode>,
    /// Print one score row per image instead of the summary.
    #[arg(long)]
    per_image: bool,
}

#[derive(Args)]
struct OracleEvalArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long)]
    gt: PathBuf,
    #[command(flatten)]
    cut: CutArgs,
    #[command(flatten)]
    eval: EvalArgs,
}

#[derive(Args)]
struct GtConstrainArgs {
    #[arg(long)]
    session: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Also label each new segment by its ground-truth class.
    #[arg(long)]
    label: bool,
}

#[derive(Args)]
struct IouArgs {
    /// Directory of predicted masks (`<image id>.png`).
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[command(flatten)]
    eval: EvalArgs,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    session: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    session: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Partition(a) => partition(a),
        Command::Features(a) => features(a),
        Command::Project(a) => project(a),
        Command::Label(a) => label(a),
        Command::Train(a) => train(a),
        Command::OracleEval(a) => oracle_eval(a),
        Command::GtConstrain(a) => gt_constrain(a),
        Command::Iou(a) => iou(a),
        Command::ExportMasks(a) => export_masks(a),
        Command::Serve(a) => serve(a),
    }
}

/// `*.png` files of a directory, sorted by name.
fn pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == "png") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem().unwrap_or_default().to_string_lossy().into_owned()
}

/// Image paths with their gradient files.
fn discover(input: &InputArgs) -> Result<(Vec<PathBuf>, Vec<PathBuf>)> {
    let images = pngs(&input.images)?;
    if images.is_empty() {
        bail!("no .png images in {}", input.images.display());
    }
    let grad_dir = input.gradients.as_ref().unwrap_or(&input.images);
    let mut gradients = Vec::with_capacity(images.len());
    for img in &images {
        let g = grad_dir.join(format!("{}.fsgr", stem(img)));
        if !g.is_file() {
            bail!("missing gradient {} for {}", g.display(), img.display());
        }
        gradients.push(g);
    }
    Ok((images, gradients))
}

fn open(dir: &Path) -> Result<Session> {
    Session::load(dir).with_context(|| format!("loading session {}", dir.display()))
}

fn save(session: &Session, dir: &Path) -> Result<()> {
    session
        .save(dir)
        .with_context(|| format!("saving session {}", dir.display()))
}

/// Ground-truth mask for `id` from `dir`, if present.
fn gt_mask(dir: &Path, id: &str) -> Result<Option<LabelMask>> {
    let path = dir.join(format!("{id}.png"));
    if !path.is_file() {
        return Ok(None);
    }
    Ok(Some(
        LabelMask::load_png(&path, id).with_context(|| format!("reading {}", path.display()))?,
    ))
}

fn partition(a: PartitionArgs) -> Result<()> {
    let (images, gradients) = discover(&a.input)?;
    let config = SessionConfig {
        seed: a.seed,
        ..SessionConfig::default()
    };
    let session = Session::ingest(&images, &gradients, a.cut.config()?, a.provider.spec()?, config)?;
    save(&session, &a.session)?;
    println!("image\tsegments");
    for info in session.images() {
        println!("{}\t{}", info.id, info.segments);
    }
    Ok(())
}

fn features(a: FeaturesArgs) -> Result<()> {
    let mut session = open(&a.session)?;
    session.set_provider(a.provider.spec()?)?;
    if let Some(out) = &a.out {
        session.feature_file()?.save(out)?;
    }
    save(&session, &a.session)?;
    println!("segments\tdimension");
    println!("{}\t{}", session.segment_count(), session.feature_dimension());
    Ok(())
}

fn project(a: ProjectArgs) -> Result<()> {
    let mut session = open(&a.session)?;
    let global = ProjectionConfig {
        k: a.k,
        min_dist: a.min_dist,
        supervision: a.supervision,
        epochs: a.epochs,
        seed: a.seed,
        ..session.config().projection
    };
    let local = ProjectionConfig {
        seed: a.seed,
        ..session.config().local_projection
    };
    session.set_projection_config(global, local)?;
    let remaining = session.images().len() - session.batch_cursor();
    session.next_batch(a.batch.unwrap_or(remaining))?;
    session.reproject()?;
    if let Some(out) = &a.out {
        write_layout_json(out, &session.layout_points())?;
    }
    save(&session, &a.session)?;
    println!("shown\t{}", session.shown_keys().len());
    Ok(())
}

fn label(a: LabelArgs) -> Result<()> {
    let mut session = open(&a.session)?;
    let count = match (&a.gt, &a.rect, a.label) {
        (Some(gt), None, None) => oracle_label(&mut session, gt)?,
        (None, Some(r), Some(l)) => session.assign_label_box(CanvasRect::new(r[0], r[1], r[2], r[3]), l)?,
        _ => bail!("give either --gt or --rect with --label"),
    };
    save(&session, &a.session)?;
    println!("labeled\t{count}");
    Ok(())
}

fn oracle_label(session: &mut Session, gt_dir: &Path) -> Result<usize> {
    let mut count = 0;
    let mut found = false;
    for id in session.image_ids() {
        if let Some(gt) = gt_mask(gt_dir, &id)? {
            count += session.apply_oracle_labels(&id, &gt)?;
            found = true;
        }
    }
    if !found {
        bail!("no ground-truth masks for session images in {}", gt_dir.display());
    }
    Ok(count)
}

fn train(a: TrainArgs) -> Result<()> {
    let mut session = open(&a.session)?;
    if let Some(gt) = &a.gt {
        oracle_label(&mut session, gt)?;
    }
    let mut cfg = session.config().train;
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.triplets_per_epoch = a.triplets.unwrap_or(cfg.triplets_per_epoch);
    cfg.learning_rate = a.learning_rate.unwrap_or(cfg.learning_rate);
    cfg.margin = a.margin.unwrap_or(cfg.margin);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    session.set_train_config(cfg)?;
    println!("epoch\tloss");
    session.train(|epoch, loss| println!("{epoch}\t{loss}"))?;
    if let Some(out) = &a.out {
        session.head().save(out)?;
    }
    save(&session, &a.session)
}

fn print_metrics(metrics: &[Metrics], per_image: bool) {
    if per_image {
        let modes: Vec<&str> = metrics.iter().map(|m| m.mode.as_str()).collect();
        println!("image\t{}", modes.join("\t"));
        for (i, row) in metrics[0].per_image.iter().enumerate() {
            let scores: Vec<String> = metrics
                .iter()
                .map(|m| m.per_image[i].score.map_or_else(|| "NA".to_owned(), |s| s.to_string()))
                .collect();
            println!("{}\t{}", row.image_id, scores.join("\t"));
        }
    } else {
        println!("mode\tmean\tmedian\timages");
        for m in metrics {
            let scored = m.per_image.iter().filter(|s| s.score.is_some()).count();
            println!("{}\t{}\t{}\t{}", m.mode, m.mean, m.median, scored);
        }
    }
}

fn score(preds: &[LabelMask], gts: &[LabelMask], eval: &EvalArgs) -> Result<()> {
    let modes = match eval.mode {
        Some(m) => vec![m],
        None => EvalMode::ALL.to_vec(),
    };
    let metrics = modes
        .into_iter()
        .map(|m| evaluate(preds, gts, m))
        .collect::<segscape::Result<Vec<_>>>()?;
    print_metrics(&metrics, eval.per_image);
    Ok(())
}

fn oracle_eval(a: OracleEvalArgs) -> Result<()> {
    let (images, gradients) = discover(&a.input)?;
    let cut = a.cut.config()?;
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for (img, grad) in images.iter().zip(&gradients) {
        let id = stem(img);
        let Some(gt) = gt_mask(&a.gt, &id)? else {
            bail!("no ground truth for {id} in {}", a.gt.display());
        };
        let g = GradientImage::load(grad)?;
        let part = horizontal_cut(&build_hierarchy(&g, cut.criterion)?, cut.threshold)?;
        let labels = oracle_majority_labels(&part, &gt)?;
        preds.push(mask_from_region_labels(&id, &part, &labels)?);
        gts.push(gt);
    }
    score(&preds, &gts, &a.eval)
}

fn gt_constrain(a: GtConstrainArgs) -> Result<()> {
    let mut session = open(&a.session)?;
    println!("image\tkept\tadded\tremoved");
    for id in session.image_ids() {
        let Some(gt) = gt_mask(&a.gt, &id)? else {
            log::warn!("no ground truth for {id}; left unchanged");
            continue;
        };
        let r = session.constrain_to_gt(&id, &gt)?;
        if a.label {
            session.apply_oracle_labels(&id, &gt)?;
        }
        println!("{id}\t{}\t{}\t{}", r.kept.len(), r.added.len(), r.removed.len());
    }
    save(&session, &a.session)
}

fn iou(a: IouArgs) -> Result<()> {
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for p in pngs(&a.pred)? {
        let id = stem(&p);
        let Some(gt) = gt_mask(&a.gt, &id)? else {
            bail!("no ground truth for {id} in {}", a.gt.display());
        };
        preds.push(LabelMask::load_png(&p, id.as_str())?);
        gts.push(gt);
    }
    if preds.is_empty() {
        bail!("no predicted masks in {}", a.pred.display());
    }
    score(&preds, &gts, &a.eval)
}

fn export_masks(a: ExportArgs) -> Result<()> {
    let session = open(&a.session)?;
    for path in session.export_masks(&a.out)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let session = open(&a.session)?;
    let state = segscape_service::AppState::new(session, Some(a.session.clone()));
    let addr = SocketAddr::new(a.host, a.port);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(segscape_service::serve(state, addr))
        .with_context(|| format!("serving on {addr}"))
}
