use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use reopt_core::consistency::ConsistencyMatrix;
use reopt_core::error::{Error, Result};
use reopt_core::eval::{evaluate, score_change_stats_from_deltas, EvalConfig, EvalReport};
use reopt_core::frequency::{collect_stats, frequency_consistency, CooccurrenceMode, LogBase};
use reopt_core::graph::{
    crop_conceptnet, crop_graph, default_positive_relations, graph_consistency,
    parse_relation_list, read_tsv_edges, ConceptGraph, MissingConceptPolicy, RwrConfig, Symmetrize,
};
use reopt_core::hybrid::{hybrid_consistency, EdgeWeighting, HybridConfig};
use reopt_core::interchange::{
    load_detections, load_ground_truth, load_vocabulary, read_detections,
    vocabulary_from_ground_truth, write_detections, write_ground_truth,
};
use reopt_core::model::{ImageDetections, LabelVocabulary};
use reopt_core::reopt::{
    read_deltas_csv, reoptimize_all, write_deltas_csv, ReoptConfig, SolverKind,
};
use reopt_core::sweep::{run_sweep, write_trials_csv, ConsistencySource, SweepSpec};
use reopt_core::synthetic::{generate, SynthConfig};

/// Knowledge-aware re-optimization of object-detection scores.
#[derive(Parser, Debug)]
#[command(name = "reopt", version)]
struct Cli {
    /// Seed for commands that sample (synth, sweep).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, default_value = "warn")]
    log_level: log::LevelFilter,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Filter a concept graph to positive relations and one language.
    CropGraph(CropGraphArgs),
    /// Build a consistency matrix from annotations and/or a concept graph.
    BuildConsistency(BuildArgs),
    /// Re-optimize detection scores against a consistency matrix.
    Reoptimize(ReoptArgs),
    /// Evaluate detections against ground truth.
    Evaluate(EvaluateArgs),
    /// Baseline vs re-optimized metrics side by side.
    Compare(CompareArgs),
    /// Statistics of the per-detection score changes.
    ScoreStats(ScoreStatsArgs),
    /// Seeded hyperparameter search.
    Sweep(SweepArgs),
    /// Write a synthetic dataset (detections, ground truth, vocabulary).
    Synth(SynthArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum GraphFormat {
    Tsv,
    Conceptnet,
}

#[derive(Args, Debug)]
struct CropGraphArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "tsv")]
    format: GraphFormat,
    /// Keep only concepts of this language, e.g. `en`.
    #[arg(long)]
    lang: Option<String>,
    /// File with one relation name per line, replacing the built-in list.
    #[arg(long)]
    relations: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Method {
    Frequency,
    KnowledgeGraph,
    Hybrid,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ModeArg {
    PerImage,
    Pooled,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum LogBaseArg {
    Natural,
    Base10,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum WeightingArg {
    Binary,
    Count,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SymmetrizeArg {
    Mean,
    Max,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum MissingArg {
    Warn,
    Error,
}

#[derive(Args, Debug)]
struct BuildArgs {
    #[arg(long, value_enum)]
    method: Method,
    /// COCO-style ground truth (frequency and hybrid).
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Vocabulary JSON; defaults to the annotation categories.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Cropped graph TSV (knowledge-graph).
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the matrix as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "per-image")]
    cooccurrence: ModeArg,
    #[arg(long, value_enum, default_value = "natural")]
    log_base: LogBaseArg,
    #[arg(long, default_value_t = 0.0)]
    gamma: f64,
    #[arg(long, value_enum, default_value = "binary")]
    edge_weighting: WeightingArg,
    #[arg(long, default_value_t = 0.15)]
    restart_prob: f64,
    #[arg(long, default_value_t = 1e-9)]
    rwr_tolerance: f64,
    #[arg(long, default_value_t = 10_000)]
    rwr_max_iterations: usize,
    #[arg(long, value_enum, default_value = "mean")]
    symmetrize: SymmetrizeArg,
    #[arg(long, value_enum, default_value = "warn")]
    missing_concept: MissingArg,
}

#[derive(Args, Debug)]
struct ReoptArgs {
    #[arg(long)]
    detections: PathBuf,
    #[arg(long)]
    consistency: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Deltas sidecar; defaults to `<out>.deltas.csv`.
    #[arg(long)]
    deltas: Option<PathBuf>,
    #[arg(long, default_value_t = 0.75)]
    epsilon: f64,
    #[arg(long, default_value_t = 100)]
    top_k: usize,
    #[arg(long, default_value_t = 99)]
    neighbor_boxes: usize,
    #[arg(long, default_value_t = 3)]
    classes_considered: usize,
    #[arg(long, default_value_t = 0.0)]
    score_threshold: f64,
    #[arg(long)]
    allow_epsilon_above_one: bool,
    #[arg(long, value_enum, default_value = "jacobi")]
    solver: SolverArg,
    #[arg(long, default_value_t = 1e-9)]
    tolerance: f64,
    #[arg(long, default_value_t = 100_000)]
    max_iterations: usize,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SolverArg {
    Jacobi,
    Dense,
}

#[derive(Args, Debug, Clone)]
struct EvalOptions {
    #[arg(long)]
    ground_truth: PathBuf,
    /// Evaluate at this single IoU instead of 0.50:0.95.
    #[arg(long)]
    iou: Option<f64>,
    #[arg(long, default_value_t = 100)]
    max_detections: usize,
    /// Label excluded from ranking and metrics.
    #[arg(long)]
    background: Option<String>,
    /// Write the report as JSON to this path.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    detections: PathBuf,
    /// Baseline detections to compare against.
    #[arg(long)]
    compare: Option<PathBuf>,
    #[command(flatten)]
    eval: EvalOptions,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[arg(long)]
    baseline: PathBuf,
    #[arg(long)]
    reoptimized: PathBuf,
    #[command(flatten)]
    eval: EvalOptions,
}

#[derive(Args, Debug)]
struct ScoreStatsArgs {
    /// Detections before re-optimization.
    #[arg(long)]
    before: PathBuf,
    /// Deltas sidecar written by `reoptimize`.
    #[arg(long)]
    deltas: PathBuf,
    #[arg(long, default_value_t = 100)]
    top_k: usize,
    #[arg(long)]
    background: Option<String>,
    /// CSV destination; standard output if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    detections: PathBuf,
    #[arg(long)]
    ground_truth: PathBuf,
    /// Fixed consistency matrix.
    #[arg(long, conflicts_with = "hybrid_annotations")]
    consistency: Option<PathBuf>,
    /// Build hybrid matrices per trial from these annotations (needed to search gamma).
    #[arg(long)]
    hybrid_annotations: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    include_wall_time: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 20)]
    images: usize,
    #[arg(long, default_value_t = 6)]
    max_objects: usize,
    #[arg(long, default_value_t = 2)]
    false_positives: usize,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn with_background(vocab: LabelVocabulary, background: Option<&str>) -> Result<LabelVocabulary> {
    match background {
        Some(b) => vocab.with_background(b),
        None => Ok(vocab),
    }
}

fn crop(args: CropGraphArgs) -> Result<()> {
    let relations = match &args.relations {
        Some(p) => parse_relation_list(&std::fs::read_to_string(p).map_err(io_err(p))?),
        None => default_positive_relations(),
    };
    let reader = open(&args.input)?;
    let graph = match args.format {
        GraphFormat::Tsv => crop_graph(read_tsv_edges(reader)?, args.lang.as_deref(), &relations),
        GraphFormat::Conceptnet => crop_conceptnet(reader, args.lang.as_deref(), &relations)?,
    };
    log::info!(
        "cropped graph: {} nodes, {} edges",
        graph.node_count(),
        graph.edge_count()
    );
    let mut w = create(&args.out)?;
    graph.write_tsv(&mut w).map_err(io_err(&args.out))?;
    w.flush().map_err(io_err(&args.out))
}

fn build(args: BuildArgs) -> Result<()> {
    let rwr = RwrConfig {
        restart_prob: args.restart_prob,
        tolerance: args.rwr_tolerance,
        max_iterations: args.rwr_max_iterations,
    };
    let symmetrize = match args.symmetrize {
        SymmetrizeArg::Mean => Symmetrize::Mean,
        SymmetrizeArg::Max => Symmetrize::Max,
    };
    let vocab = |annotations: Option<&Path>| -> Result<LabelVocabulary> {
        match (&args.vocab, annotations) {
            (Some(v), _) => load_vocabulary(v),
            (None, Some(a)) => vocabulary_from_ground_truth(a),
            (None, None) => Err(Error::Config("--vocab is required for this method".into())),
        }
    };
    let stats = |vocab: &LabelVocabulary| {
        let path = args
            .annotations
            .as_deref()
            .ok_or_else(|| Error::Config("--annotations is required for this method".into()))?;
        let gt = load_ground_truth(path, vocab)?;
        let mode = match args.cooccurrence {
            ModeArg::PerImage => CooccurrenceMode::PerImage,
            ModeArg::Pooled => CooccurrenceMode::Pooled,
        };
        collect_stats(&gt, vocab, mode)
    };
    let matrix = match args.method {
        Method::Frequency => {
            let vocab = vocab(args.annotations.as_deref())?;
            let base = match args.log_base {
                LogBaseArg::Natural => LogBase::Natural,
                LogBaseArg::Base10 => LogBase::Base10,
            };
            frequency_consistency(&stats(&vocab)?, &vocab, base)?
        }
        Method::Hybrid => {
            let vocab = vocab(args.annotations.as_deref())?;
            let cfg = HybridConfig {
                gamma: args.gamma,
                edge_weighting: match args.edge_weighting {
                    WeightingArg::Binary => EdgeWeighting::Binary,
                    WeightingArg::Count => EdgeWeighting::Count,
                },
                rwr,
                symmetrize,
            };
            hybrid_consistency(&stats(&vocab)?, &vocab, &cfg)?
        }
        Method::KnowledgeGraph => {
            let vocab = vocab(None)?;
            let path = args
                .graph
                .as_deref()
                .ok_or_else(|| Error::Config("--graph is required for knowledge-graph".into()))?;
            let edges = read_tsv_edges(open(path)?)?;
            let graph = ConceptGraph::from_weighted_pairs(
                edges
                    .iter()
                    .map(|e| (e.start.as_str(), e.end.as_str(), e.weight)),
            );
            let missing = match args.missing_concept {
                MissingArg::Warn => MissingConceptPolicy::Warn,
                MissingArg::Error => MissingConceptPolicy::Error,
            };
            graph_consistency(&graph, &vocab, &rwr, symmetrize, missing)?
        }
    };
    matrix.save(&args.out)?;
    if let Some(csv) = &args.csv {
        let mut w = create(csv)?;
        matrix.write_csv(&mut w)?;
    }
    Ok(())
}

fn reoptimize(args: ReoptArgs) -> Result<()> {
    let s = ConsistencyMatrix::load(&args.consistency)?;
    let dets = load_detections(&args.detections, s.vocab())?;
    let cfg = ReoptConfig {
        epsilon: args.epsilon,
        top_k_detections: args.top_k,
        neighbor_boxes: args.neighbor_boxes,
        classes_considered: args.classes_considered,
        post_score_threshold: args.score_threshold,
        solver_tolerance: args.tolerance,
        solver_max_iterations: args.max_iterations,
        allow_epsilon_above_one: args.allow_epsilon_above_one,
        solver: match args.solver {
            SolverArg::Jacobi => SolverKind::Jacobi,
            SolverArg::Dense => SolverKind::Dense,
        },
    };
    let result = reoptimize_all(&dets, &s, &cfg)?;
    let worst = result
        .solver_stats
        .iter()
        .map(|st| st.residual)
        .fold(0.0, f64::max);
    log::info!(
        "re-optimized {} images, worst residual {worst:e}",
        result.images.len()
    );
    write_detections(&args.out, s.vocab(), &result.images)?;
    let deltas = args.deltas.unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".deltas.csv");
        PathBuf::from(p)
    });
    write_deltas_csv(create(&deltas)?, &result.per_detection_deltas)
}

struct Loaded {
    vocab: LabelVocabulary,
    dets: Vec<ImageDetections>,
}

fn load_for_eval(path: &Path, background: Option<&str>) -> Result<Loaded> {
    let (vocab, dets) = read_detections(path)?;
    Ok(Loaded {
        vocab: with_background(vocab, background)?,
        dets,
    })
}

fn eval_config(opts: &EvalOptions) -> EvalConfig {
    let base = match opts.iou {
        Some(t) => EvalConfig::single_threshold(t),
        None => EvalConfig::default(),
    };
    EvalConfig {
        max_detections: opts.max_detections,
        ..base
    }
}

fn write_report_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

fn evaluate_one(path: &Path, opts: &EvalOptions) -> Result<(LabelVocabulary, EvalReport)> {
    let loaded = load_for_eval(path, opts.background.as_deref())?;
    let gt = load_ground_truth(&opts.ground_truth, &loaded.vocab)?;
    let report = evaluate(&loaded.dets, &gt, &loaded.vocab, &eval_config(opts))?;
    Ok((loaded.vocab, report))
}

fn compare_reports(baseline: &Path, reoptimized: &Path, opts: &EvalOptions) -> Result<()> {
    let (vb, base) = evaluate_one(baseline, opts)?;
    let (vr, re) = evaluate_one(reoptimized, opts)?;
    if vb.labels() != vr.labels() {
        return Err(Error::VocabularyMismatch(
            "baseline and re-optimized detections use different vocabularies".into(),
        ));
    }
    print!("{}", re.compare_table(&base));
    if let Some(json) = &opts.json {
        write_report_json(
            json,
            &serde_json::json!({ "baseline": base, "reoptimized": re }),
        )?;
    }
    Ok(())
}

fn evaluate_cmd(args: EvaluateArgs) -> Result<()> {
    if let Some(baseline) = &args.compare {
        return compare_reports(baseline, &args.detections, &args.eval);
    }
    let (_, report) = evaluate_one(&args.detections, &args.eval)?;
    print!("{}", report.to_table());
    if let Some(json) = &args.eval.json {
        write_report_json(json, &serde_json::to_value(&report)?)?;
    }
    Ok(())
}

fn score_stats(args: ScoreStatsArgs) -> Result<()> {
    let loaded = load_for_eval(&args.before, args.background.as_deref())?;
    let deltas = read_deltas_csv(open(&args.deltas)?)?;
    let stats = score_change_stats_from_deltas(
        &loaded.dets,
        &deltas,
        args.top_k,
        loaded.vocab.background(),
    )?;
    let out: Box<dyn Write> = match &args.out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = out;
    writeln!(w, "mean,max,min,std_dev,count")
        .and_then(|_| {
            writeln!(
                w,
                "{},{},{},{},{}",
                stats.mean, stats.max, stats.min, stats.std_dev, stats.count
            )
        })
        .and_then(|_| w.flush())
        .map_err(io_err(args.out.as_deref().unwrap_or(Path::new("<stdout>"))))
}

fn sweep(args: SweepArgs, seed: Option<u64>) -> Result<()> {
    let text = std::fs::read_to_string(&args.spec).map_err(io_err(&args.spec))?;
    let mut spec: SweepSpec = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: args.spec.clone(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let source = match (&args.consistency, &args.hybrid_annotations) {
        (Some(c), None) => ConsistencySource::Fixed(ConsistencyMatrix::load(c)?),
        (None, Some(a)) => {
            let vocab = read_detections(&args.detections)?.0;
            let gt = load_ground_truth(a, &vocab)?;
            ConsistencySource::Hybrid {
                stats: collect_stats(&gt, &vocab, CooccurrenceMode::PerImage)?,
                vocab,
                config: HybridConfig::default(),
            }
        }
        _ => {
            return Err(Error::Config(
                "give exactly one of --consistency or --hybrid-annotations".into(),
            ))
        }
    };
    let vocab = match &source {
        ConsistencySource::Fixed(s) => s.vocab().clone(),
        ConsistencySource::Hybrid { vocab, .. } => vocab.clone(),
    };
    let dets = load_detections(&args.detections, &vocab)?;
    let gt = load_ground_truth(&args.ground_truth, &vocab)?;
    let trials = run_sweep(&dets, &gt, &source, &spec)?;
    if let Some(best) = trials.first().and_then(|t| t.summary.map(|s| (t, s))) {
        log::info!(
            "best trial {}: objective {} with {:?}",
            best.0.id,
            best.1.objective,
            best.0.params
        );
    }
    let mut w = create(&args.out)?;
    write_trials_csv(&mut w, &trials, args.include_wall_time)
}

fn synth(args: SynthArgs, seed: Option<u64>) -> Result<()> {
    let cfg = SynthConfig {
        images: args.images,
        max_objects: args.max_objects,
        false_positives: args.false_positives,
        seed: seed.unwrap_or(0),
        ..SynthConfig::default()
    };
    let data = generate(&cfg)?;
    std::fs::create_dir_all(&args.out_dir).map_err(io_err(&args.out_dir))?;
    write_detections(
        &args.out_dir.join("detections.json"),
        &data.vocab,
        &data.detections,
    )?;
    write_ground_truth(
        &args.out_dir.join("ground_truth.json"),
        &data.vocab,
        &data.image_ids,
        &data.ground_truth,
    )?;
    let vocab_path = args.out_dir.join("vocab.json");
    let mut w = create(&vocab_path)?;
    serde_json::to_writer_pretty(&mut w, &data.vocab)?;
    w.write_all(b"\n").map_err(io_err(&vocab_path))?;
    w.flush().map_err(io_err(&vocab_path))
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::CropGraph(a) => crop(a),
        Command::BuildConsistency(a) => build(a),
        Command::Reoptimize(a) => reoptimize(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Compare(a) => compare_reports(&a.baseline, &a.reoptimized, &a.eval),
        Command::ScoreStats(a) => score_stats(a),
        Command::Sweep(a) => sweep(a, cli.seed),
        Command::Synth(a) => synth(a, cli.seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_runtime() { 2 } else { 1 })
        }
    }
}
