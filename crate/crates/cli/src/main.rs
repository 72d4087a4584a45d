//! `tbcnn` command-line tool.
//!
//! Exit status: 0 success, 1 usage error, 2 data or validation error,
//! 3 numeric failure. Log verbosity comes from `TBCNN_LOG` (default `warn`).

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use tbcnn::analysis::{
    agglomerative_cluster, distances_to_csv, export_dendrogram, nearest_neighbors, pairwise_distances,
    DendrogramFormat, Linkage,
};
use tbcnn::ast::{annotate, build_vocab, parse_dataset, parse_tree, write_dataset, Ast, UnknownSymbols};
use tbcnn::baselines::{train_linear, BaselineCheckpoint, BaselineError, LinearConfig, LinearModel, LossKind};
use tbcnn::checkpoint::{read_file, write_file, CheckpointError};
use tbcnn::datagen::{generate_corpus, GenConfig};
use tbcnn::gradcheck::{run_gradcheck, GradcheckConfig};
use tbcnn::network::{assign_pool_regions, conv_coefficients, TbcnnModel, WindowLevel};
use tbcnn::pretrain::{run_pretrain, EmbeddingCheckpoint, PretrainConfig, PretrainError};
use tbcnn::trainer::{
    curve_to_tsv, evaluate, split_dataset, train, InitMode, LabeledDataset, SplitPart, TrainConfig, TrainError,
};

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
            Self::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usage(m) => write!(f, "usage error: {m}"),
            Self::Data(m) => write!(f, "data error: {m}"),
            Self::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<tbcnn::ast::AstError> for CliError {
    fn from(e: tbcnn::ast::AstError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => Self::Numeric(e.to_string()),
            TrainError::Config(_) | TrainError::MissingPretrained => Self::Usage(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<PretrainError> for CliError {
    fn from(e: PretrainError) -> Self {
        match e {
            PretrainError::InvalidConfig(_) => Self::Usage(e.to_string()),
            PretrainError::NonFinite | PretrainError::Numerics(_) => Self::Numeric(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<BaselineError> for CliError {
    fn from(e: BaselineError) -> Self {
        match e {
            BaselineError::Diverged(_) => Self::Numeric(e.to_string()),
            BaselineError::Config(_) => Self::Usage(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

type CliResult = Result<(), CliError>;

#[derive(Parser)]
#[command(name = "tbcnn", version, about = "Tree-based convolutional networks over program ASTs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labelled dataset.
    Gen {
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 200)]
        per_class: usize,
        /// Give every class the same node-kind counts.
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        count_matched: bool,
        #[arg(long, default_value_t = 20)]
        min_nodes: usize,
        #[arg(long, default_value_t = 60)]
        max_nodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn symbol embeddings from the trees of a dataset (labels unused).
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 30)]
        nf: usize,
        #[arg(long, default_value_t = 1.0)]
        margin: f64,
        #[arg(long, default_value_t = 0.03)]
        lr: f64,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a classifier on the train split, selecting the best CV epoch.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// `key = value` configuration file; missing keys keep their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        init: Option<InitArg>,
        /// Embedding checkpoint, required with `--init pretrained`.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Append bag-of-words counts to the pooled features.
        #[arg(long)]
        bow: bool,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the configured epoch count.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        curve_out: Option<PathBuf>,
    },
    /// Report error rate, cross-entropy and confusion on one split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Split seed; must match the seed used for training.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Class probabilities for one AST document.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        ast: PathBuf,
        /// Print per-node window coefficients, depth and pooling region.
        #[arg(long)]
        show_eta: bool,
    },
    /// Hierarchical clustering of learned embeddings.
    Cluster {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long, value_enum, default_value_t = LinkageArg::Average)]
        linkage: LinkageArg,
        #[arg(long, value_enum, default_value_t = FormatArg::Json)]
        format: FormatArg,
        /// Also list the nearest neighbours of this symbol.
        #[arg(long)]
        nearest: Option<String>,
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Write the pairwise distance matrix as CSV.
        #[arg(long)]
        distances_out: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Bag-of-words linear baseline.
    Baseline {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = MethodArg::Lr)]
        method: MethodArg,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        #[arg(long, default_value_t = 1e-4)]
        l2: f64,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        /// Drives both the split and the sample order.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every analytic gradient.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        dims: usize,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Random,
    Pretrained,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Cv,
    Test,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum LinkageArg {
    Average,
    Single,
    Complete,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Newick,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Lr,
    Svm,
}

fn read(path: &Path) -> Result<String, CliError> {
    Ok(read_file(path)?)
}

fn write(path: &Path, contents: &str) -> CliResult {
    Ok(write_file(path, contents)?)
}

fn load_records(path: &Path) -> Result<Vec<tbcnn::ast::DatasetRecord>, CliError> {
    let records = parse_dataset(&read(path)?)?;
    if records.is_empty() {
        return Err(CliError::Data(format!("{}: no records", path.display())));
    }
    Ok(records)
}

fn split_indices(labels: &[usize], split: SplitArg, seed: u64) -> Result<Vec<usize>, CliError> {
    let part = match split {
        SplitArg::All => return Ok((0..labels.len()).collect()),
        SplitArg::Train => SplitPart::Train,
        SplitArg::Cv => SplitPart::Cv,
        SplitArg::Test => SplitPart::Test,
    };
    Ok(split_dataset(labels, seed)?.part(part).to_vec())
}

fn cmd_gen(config: GenConfig, out: &Path) -> CliResult {
    let generated = generate_corpus(&config).map_err(|e| CliError::Usage(e.to_string()))?;
    write(out, &write_dataset(&generated.records))?;
    println!("wrote {} records ({} classes) to {}", generated.records.len(), config.n_classes, out.display());
    Ok(())
}

fn cmd_pretrain(data: &Path, config: PretrainConfig, out: &Path) -> CliResult {
    let records = load_records(data)?;
    let mut vocab = build_vocab(records.iter().map(|r| &r.ast))?;
    let trees = records
        .iter()
        .map(|r| Ast::from_raw(&r.ast, &mut vocab, UnknownSymbols::Reject).map(annotate))
        .collect::<Result<Vec<_>, _>>()?;
    let output = run_pretrain(&trees, &vocab, &config)?;
    write(out, &EmbeddingCheckpoint::new(vocab, output.params).to_json())?;
    if let Some(last) = output.loss_curve.last() {
        println!("final mean hinge loss {last:.6}");
    }
    println!("wrote embeddings to {}", out.display());
    Ok(())
}

struct TrainArgs<'a> {
    data: &'a Path,
    config: Option<&'a Path>,
    init: Option<InitArg>,
    embeddings: Option<&'a Path>,
    bow: bool,
    seed: Option<u64>,
    epochs: Option<usize>,
    out: &'a Path,
    curve_out: Option<&'a Path>,
}

fn cmd_train(a: TrainArgs<'_>) -> CliResult {
    let mut config = match a.config {
        Some(p) => TrainConfig::parse(&read(p)?)?,
        None => TrainConfig::default(),
    };
    match a.init {
        Some(InitArg::Random) => config.init = InitMode::Random,
        Some(InitArg::Pretrained) => config.init = InitMode::Pretrained,
        None => {}
    }
    config.bow_combine |= a.bow;
    config.seed = a.seed.unwrap_or(config.seed);
    config.epochs = a.epochs.unwrap_or(config.epochs);
    let records = load_records(a.data)?;
    let (mut vocab, policy, pretrained) = match (config.init, a.embeddings) {
        (InitMode::Pretrained, None) => {
            return Err(CliError::Usage("--init pretrained needs --embeddings".into()));
        }
        (InitMode::Pretrained, Some(p)) => {
            let ck = EmbeddingCheckpoint::from_json(&read(p)?)?;
            if ck.n_f != config.n_f {
                return Err(CliError::Data(format!(
                    "embeddings have n_f = {}, configuration has n_f = {}",
                    ck.n_f, config.n_f
                )));
            }
            (ck.vocab.clone(), UnknownSymbols::MapToUnk, Some(ck.into_params()))
        }
        (InitMode::Random, _) => (build_vocab(records.iter().map(|r| &r.ast))?, UnknownSymbols::Reject, None),
    };
    let ds = LabeledDataset::from_records(&records, &mut vocab, policy, None, a.data.display().to_string())?;
    let split = split_dataset(&ds.labels, config.seed)?;
    let output = train(&ds, &vocab, &split, &config, pretrained.as_ref())?;
    write(a.out, &output.model.to_json())?;
    if let Some(p) = a.curve_out {
        write(p, &curve_to_tsv(&output.curve))?;
    }
    match output.best_cv_cost() {
        Some(cost) => println!("best epoch {} with CV cost {cost:.6}", output.best_epoch),
        None => println!("no epochs run; saved the initial parameters"),
    }
    println!("wrote model to {}", a.out.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<TbcnnModel, CliError> {
    Ok(TbcnnModel::from_json(&read(path)?)?)
}

fn cmd_eval(model: &Path, data: &Path, split: SplitArg, seed: u64) -> CliResult {
    let model = load_model(model)?;
    let records = load_records(data)?;
    let mut vocab = model.vocab.clone();
    let ds = LabeledDataset::from_records(
        &records,
        &mut vocab,
        UnknownSymbols::MapToUnk,
        Some(model.hyper.n_classes),
        data.display().to_string(),
    )?;
    let idx = split_indices(&ds.labels, split, seed)?;
    let metrics = evaluate(&model, &ds, &idx)?;
    print!("{}", metrics.to_text());
    println!("{}", serde_json::to_string(&metrics).expect("metrics serialize"));
    Ok(())
}

fn cmd_predict(model: &Path, ast: &Path, show_eta: bool) -> CliResult {
    let model = load_model(model)?;
    let raw = parse_tree(&read(ast)?)?;
    let mut vocab = model.vocab.clone();
    let tree = annotate(Ast::from_raw(&raw, &mut vocab, UnknownSymbols::MapToUnk)?);
    let trace = model.forward(&tree).map_err(|e| CliError::Data(e.to_string()))?;
    if show_eta {
        print_window_details(&tree, &model);
    }
    for (c, p) in trace.probabilities.iter().enumerate() {
        println!("class {c}: {p:.6}");
    }
    let doc = json!({ "predicted": trace.predicted(), "probabilities": trace.probabilities.to_vec() });
    println!("{doc}");
    Ok(())
}

fn print_window_details(tree: &tbcnn::ast::AnnotatedAst, model: &TbcnnModel) {
    let ast = tree.ast();
    let assignment = assign_pool_regions(tree, model.hyper.k);
    println!("node\tsymbol\tdepth\th_pos\tregion\teta_t\teta_l\teta_r (as a child)");
    let mut as_child = vec![None; ast.len()];
    for i in 0..ast.len() {
        let kids = ast.children(i);
        for (p, &c) in kids.iter().enumerate() {
            as_child[c] = Some(conv_coefficients(WindowLevel::Bottom { position: p + 1, siblings: kids.len() }));
        }
    }
    for i in ast.preorder() {
        let (t, l, r) = as_child[i].unwrap_or_else(|| conv_coefficients(WindowLevel::Top));
        println!(
            "{i}\t{}\t{}\t{:.3}\t{:?}\t{t:.3}\t{l:.3}\t{r:.3}",
            model.vocab.symbol(ast.symbol(i)).unwrap_or("<UNK>"),
            tree.depth(i),
            tree.h_pos(i),
            assignment.regions[i],
        );
    }
}

struct ClusterArgs<'a> {
    embeddings: &'a Path,
    linkage: LinkageArg,
    format: FormatArg,
    nearest: Option<&'a str>,
    k: usize,
    distances_out: Option<&'a Path>,
    out: Option<&'a Path>,
}

fn cmd_cluster(a: ClusterArgs<'_>) -> CliResult {
    let ck = EmbeddingCheckpoint::from_json(&read(a.embeddings)?)?;
    // The <UNK> row carries no learned meaning of its own.
    let labels: Vec<String> = ck.vocab.symbols().to_vec();
    let m = ck.embeddings.matrix();
    let rows: Vec<&[f64]> = (0..labels.len()).map(|i| m.row(i)).collect();
    let vectors = tbcnn::numerics::DenseMatrix::from_rows(&rows).map_err(|e| CliError::Data(e.to_string()))?;
    let err = |e: tbcnn::analysis::AnalysisError| CliError::Data(e.to_string());
    let d = pairwise_distances(&vectors).map_err(err)?;
    if let Some(p) = a.distances_out {
        write(p, &distances_to_csv(&labels, &d))?;
    }
    let linkage = match a.linkage {
        LinkageArg::Average => Linkage::Average,
        LinkageArg::Single => Linkage::Single,
        LinkageArg::Complete => Linkage::Complete,
    };
    let format = match a.format {
        FormatArg::Json => DendrogramFormat::Json,
        FormatArg::Newick => DendrogramFormat::Newick,
    };
    let dendrogram = agglomerative_cluster(&d, labels.clone(), linkage).map_err(err)?;
    let text = export_dendrogram(&dendrogram, format);
    match a.out {
        Some(p) => write(p, &text)?,
        None => println!("{text}"),
    }
    if let Some(query) = a.nearest {
        for (i, dist) in nearest_neighbors(&vectors, &labels, query, a.k).map_err(err)? {
            eprintln!("{}\t{dist:.6}", labels[i]);
        }
    }
    Ok(())
}

fn cmd_baseline(data: &Path, loss: LossKind, cfg: LinearConfig, out: Option<&Path>) -> CliResult {
    let records = load_records(data)?;
    let mut vocab = build_vocab(records.iter().map(|r| &r.ast))?;
    let ds = LabeledDataset::from_records(&records, &mut vocab, UnknownSymbols::Reject, None, "")?;
    let split = split_dataset(&ds.labels, cfg.seed)?;
    let xs = |idx: &[usize]| idx.iter().map(|&i| ds.bows[i].as_f64()).collect::<Vec<_>>();
    let ys = |idx: &[usize]| idx.iter().map(|&i| ds.labels[i]).collect::<Vec<_>>();
    let model = train_linear(&xs(&split.train), &ys(&split.train), ds.n_classes, &LinearConfig { loss, ..cfg })?;
    let error = |m: &LinearModel, idx: &[usize]| {
        let wrong = xs(idx).iter().zip(ys(idx)).filter(|(x, y)| m.predict(x) != *y).count();
        100.0 * wrong as f64 / idx.len() as f64
    };
    let (cv, test) = (error(&model, &split.cv), error(&model, &split.test));
    println!("cv error rate: {cv:.2}%\ntest error rate: {test:.2}%");
    println!("{}", json!({ "method": format!("{loss:?}"), "cv_error_rate": cv, "test_error_rate": test }));
    if let Some(p) = out {
        write(p, &BaselineCheckpoint { vocab, model }.to_json())?;
    }
    Ok(())
}

fn cmd_gradcheck(seed: u64, dims: usize, seeds: usize) -> CliResult {
    if dims == 0 || seeds == 0 {
        return Err(CliError::Usage("--dims and --seeds must be positive".into()));
    }
    let report = run_gradcheck(&GradcheckConfig { seed, dims, n_seeds: seeds, ..Default::default() });
    for c in report.checks.iter().filter(|c| c.max_rel_err > report.tolerance) {
        println!("{} seed {} {}: max rel err {:.3e}", c.objective, c.seed, c.tensor, c.max_rel_err);
    }
    println!("{}", report.summary());
    if report.passed {
        Ok(())
    } else {
        Err(CliError::Numeric("gradient check failed".into()))
    }
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Gen { classes, per_class, count_matched, min_nodes, max_nodes, seed, out } => cmd_gen(
            GenConfig { n_classes: classes, per_class, min_nodes, max_nodes, count_matched, seed },
            &out,
        ),
        Command::Pretrain { data, nf, margin, lr, epochs, seed, out } => cmd_pretrain(
            &data,
            PretrainConfig { n_f: nf, margin, lr, epochs, seed, ..Default::default() },
            &out,
        ),
        Command::Train { data, config, init, embeddings, bow, seed, epochs, out, curve_out } => cmd_train(TrainArgs {
            data: &data,
            config: config.as_deref(),
            init,
            embeddings: embeddings.as_deref(),
            bow,
            seed,
            epochs,
            out: &out,
            curve_out: curve_out.as_deref(),
        }),
        Command::Eval { model, data, split, seed } => cmd_eval(&model, &data, split, seed),
        Command::Predict { model, ast, show_eta } => cmd_predict(&model, &ast, show_eta),
        Command::Cluster { embeddings, linkage, format, nearest, k, distances_out, out } => cmd_cluster(ClusterArgs {
            embeddings: &embeddings,
            linkage,
            format,
            nearest: nearest.as_deref(),
            k,
            distances_out: distances_out.as_deref(),
            out: out.as_deref(),
        }),
        Command::Baseline { data, method, lr, l2, epochs, seed, out } => {
            let loss = match method {
                MethodArg::Lr => LossKind::Logistic,
                MethodArg::Svm => LossKind::Hinge,
            };
            cmd_baseline(&data, loss, LinearConfig { loss, lr, l2, epochs, seed }, out.as_deref())
        }
        Command::Gradcheck { seed, dims, seeds } => cmd_gradcheck(seed, dims, seeds),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("TBCNN_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}
