//! Command-line front end.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::darts::{derive_genotype, history_csv as search_history_csv, search_run, SearchConfig, SplitDataset};
use crate::error::{Error, Result};
use crate::eval::{
    format_embeddings_csv, parse_embeddings_csv, rank1_identification, tar_at_far,
    verification_accuracy_from_scores, PairProtocol,
};
use crate::gradcheck::{run_suite, DEFAULT_SEEDS, TOLERANCE};
use crate::io::config::{merge_into_args, parse_config};
use crate::io::{
    load_checkpoint, load_dataset, load_idx, read_file, save_checkpoint, save_dataset, synth_identities, write_atomic,
    Dataset, SynthConfig,
};
use crate::kd::{
    history_csv, train_student, train_teacher, FaceModel, ModelArch, TeacherTimeline,
    TrainSchedule,
};
use crate::losses::{KdMode, LossConfig, DEFAULT_LAMBDA, DEFAULT_MARGIN, DEFAULT_SCALE};
use crate::net::{build_network, census, summarize, VariantSpec};
use crate::search_space::{AlphaTable, Genotype};
use crate::tensor::Tensor;

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "pocketnet", version, about = "Cell-based face embedding networks: search, build, distil, evaluate")]
struct Cli {
    /// `key = value` file supplying defaults for any flag of the subcommand.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Bilevel architecture search; writes alphas, genotype and loss history.
    Search(SearchArgs),
    /// Derives a genotype from an alpha dump.
    Derive(DeriveArgs),
    /// Per-stage structure report of a network.
    Build(NetArgs),
    /// Parameter and FLOP census as CSV.
    Count(NetArgs),
    /// Trains a teacher and checkpoints every epoch.
    TrainTeacher(TeacherArgs),
    /// Trains a student, optionally distilled from a teacher directory.
    TrainStudent(StudentArgs),
    /// Verification, TAR@FAR and rank-1 metrics over embeddings.
    Eval(EvalArgs),
    /// Finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Writes a synthetic identity dataset.
    SynthData(SynthArgs),
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset file, or IDX images when --labels is given.
    #[arg(long)]
    data: PathBuf,
    /// IDX labels file.
    #[arg(long)]
    labels: Option<PathBuf>,
}

impl DataArgs {
    fn load(&self) -> Result<Dataset> {
        match &self.labels {
            Some(l) => load_idx(&self.data, l),
            None => load_dataset(&self.data),
        }
    }
}

#[derive(Args, Debug)]
struct SearchArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 64)]
    init_channels: usize,
    #[arg(long, default_value_t = 8)]
    cells: usize,
    #[arg(long, default_value_t = 4)]
    nodes: usize,
    #[arg(long, default_value_t = 0.1)]
    w_lr_max: f64,
    #[arg(long, default_value_t = 0.004)]
    w_lr_min: f64,
    #[arg(long, default_value_t = 0.0012)]
    alpha_lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DeriveArgs {
    #[arg(long)]
    alphas: PathBuf,
    /// Genotype file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct NetArgs {
    #[arg(long, default_value = "S-128")]
    variant: String,
    #[arg(long, default_value = "pocketnet.genotype")]
    genotype: PathBuf,
    #[arg(long)]
    input_size: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long, default_value = "pocketnet.genotype")]
    genotype: PathBuf,
    #[arg(long, default_value_t = 16)]
    stem_channels: usize,
    /// Normal cells per stage, `a:b:c`.
    #[arg(long, default_value = "1:1:1")]
    normal_cells: String,
    #[arg(long, default_value_t = 128)]
    embedding_dim: usize,
    #[arg(long, default_value_t = 128)]
    head_width: usize,
    #[arg(long, default_value_t = DEFAULT_SCALE)]
    scale: f64,
    #[arg(long, default_value_t = DEFAULT_MARGIN)]
    margin: f64,
}

impl ModelArgs {
    fn arch(&self, data: &Dataset) -> Result<ModelArch> {
        if data.height != data.width {
            return Err(Error::invalid(format!("images must be square, got {}x{}", data.height, data.width)));
        }
        let counts: Vec<usize> = self
            .normal_cells
            .split(':')
            .map(|s| s.trim().parse().map_err(|_| Error::invalid(format!("bad --normal-cells {:?}", self.normal_cells))))
            .collect::<Result<_>>()?;
        let counts: [usize; 3] = counts
            .try_into()
            .map_err(|_| Error::invalid("--normal-cells needs three counts, e.g. 1:1:1"))?;
        Ok(ModelArch {
            variant: VariantSpec::custom(self.stem_channels, counts, self.embedding_dim, data.height)
                .with_head_width(self.head_width),
            genotype: read_genotype(&self.genotype)?,
            classes: data.classes,
            scale: self.scale,
            margin: self.margin,
        })
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, default_value_t = 3)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TeacherArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainArgs,
    /// Timeline directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct StudentArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long, default_value = "multi-step", value_parser = ["none", "converged", "multi-step"])]
    kd_mode: String,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    /// Teacher timeline directory (required unless --kd-mode none).
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Embeddings as CSV `id,dim0,...` or a checkpoint of rank-1 arrays.
    #[arg(long, conflicts_with_all = ["model", "data"])]
    embeddings: Option<PathBuf>,
    /// Trained model directory (with --data); sample ids are indices.
    #[arg(long, requires = "data")]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Pair protocol, lines `a,b,0|1`.
    #[arg(long)]
    pairs: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    #[arg(long, default_value_t = 0.01)]
    far: f64,
    #[arg(long)]
    write_embeddings: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = DEFAULT_SEEDS)]
    seeds: usize,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    ids: usize,
    #[arg(long, default_value_t = 20)]
    per_id: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long)]
    out: PathBuf,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numerical(_) => EXIT_NUMERICAL,
        Error::InvalidArgument(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn config_path(args: &[String]) -> Option<String> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(p.to_string());
        }
    }
    None
}

/// Runs one invocation; returns the process exit code.
pub fn run(args: Vec<String>) -> i32 {
    let args = match config_path(&args) {
        None => args,
        Some(p) => {
            let cfg = read_file(Path::new(&p))
                .and_then(|b| String::from_utf8(b).map_err(|_| Error::invalid(format!("{p} is not UTF-8"))))
                .and_then(|t| parse_config(&t));
            match cfg {
                Ok(cfg) => merge_into_args(&args, &cfg),
                Err(e) => {
                    eprintln!("error: config {p}: {e}");
                    return EXIT_USAGE;
                }
            }
        }
    };
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    String::from_utf8(read_file(path)?).map_err(|_| Error::Format {
        what: "text file",
        offset: 0,
        reason: format!("{} is not UTF-8", path.display()),
    })
}

fn read_genotype(path: &Path) -> Result<Genotype> {
    read_text(path)?.parse()
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Search(a) => search(a),
        Command::Derive(a) => {
            let table = AlphaTable::from_named_arrays(&load_checkpoint(&a.alphas)?)?;
            emit(a.out.as_deref(), &derive_genotype(&table)?.to_string())
        }
        Command::Build(a) => {
            let model = net_model(&a)?;
            emit(a.out.as_deref(), &summarize(&model.net))
        }
        Command::Count(a) => {
            let model = net_model(&a)?;
            emit(a.out.as_deref(), &census(&model.net).to_csv())
        }
        Command::TrainTeacher(a) => teacher(a),
        Command::TrainStudent(a) => student(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::SynthData(a) => {
            let mut cfg = SynthConfig::new(a.ids, a.per_id, a.size, a.seed);
            cfg.noise = a.noise;
            save_dataset(&synth_identities(&cfg)?, &a.out)
        }
    }
}

fn net_model(a: &NetArgs) -> Result<crate::net::Model<f32>> {
    let mut variant: VariantSpec = a.variant.parse()?;
    if let Some(s) = a.input_size {
        variant = variant.with_input_size(s);
    }
    build_network::<f32>(&read_genotype(&a.genotype)?, &variant, 0)
}

fn search(a: SearchArgs) -> Result<()> {
    let data = a.data.load()?;
    let cfg = SearchConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        w_lr_max: a.w_lr_max,
        w_lr_min: a.w_lr_min,
        alpha_lr: a.alpha_lr,
        init_channels: a.init_channels,
        n_cells: a.cells,
        n_intermediate: a.nodes,
        seed: a.seed,
        ..SearchConfig::default()
    };
    let out = search_run::<f32>(&SplitDataset::from_dataset(&data)?, &cfg)?;
    create_dir(&a.out)?;
    save_checkpoint(&out.alphas.to_named_arrays(), &a.out.join("alphas.pktn"))?;
    write_atomic(&a.out.join("search.genotype"), derive_genotype(&out.alphas)?.to_string().as_bytes())?;
    write_atomic(&a.out.join("history.csv"), search_history_csv(&out.history).as_bytes())
}

fn schedule(t: &TrainArgs, data: &Dataset) -> Result<TrainSchedule> {
    TrainSchedule::for_epochs(t.epochs, data.len(), t.batch_size, t.lr, t.seed)
}

fn teacher(a: TeacherArgs) -> Result<()> {
    let data = a.data.load()?;
    let mut model = FaceModel::<f32>::new(a.model.arch(&data)?, a.train.seed)?;
    let run = train_teacher(&mut model, &data, &schedule(&a.train, &data)?, &a.out)?;
    write_atomic(&a.out.join("history.csv"), history_csv(&run.history).as_bytes())
}

pub const STUDENT_STEM: &str = "student";

fn student(a: StudentArgs) -> Result<()> {
    let data = a.data.load()?;
    let mode: KdMode = a.kd_mode.parse()?;
    let timeline = match (&a.teacher, mode) {
        (_, KdMode::None) => None,
        (Some(dir), _) => Some(TeacherTimeline::open(dir)?),
        (None, _) => return Err(Error::invalid(format!("--kd-mode {mode} needs --teacher"))),
    };
    let arch = a.model.arch(&data)?;
    let mut model = FaceModel::<f32>::new(arch.clone(), a.train.seed)?;
    let sched = schedule(&a.train, &data)?;
    let history = train_student(&mut model, &data, &sched, &LossConfig::new(a.lambda, mode)?, timeline.as_ref())?;
    arch.save(&a.out, STUDENT_STEM)?;
    save_checkpoint(&model.to_arrays(), &a.out.join(format!("{STUDENT_STEM}.pktn")))?;
    write_atomic(&a.out.join("history.csv"), history_csv(&history).as_bytes())
}

/// Loads a trained model directory: a student or a teacher timeline (the
/// converged checkpoint).
fn load_model_dir(dir: &Path) -> Result<FaceModel<f32>> {
    let student = dir.join(format!("{STUDENT_STEM}.pktn"));
    if student.exists() {
        return FaceModel::from_checkpoint(ModelArch::load(dir, STUDENT_STEM)?, &student);
    }
    let t = TeacherTimeline::open(dir)?;
    let (_, path) = t.converged();
    FaceModel::from_checkpoint(t.arch()?, path)
}

fn embed_dataset(model: &mut FaceModel<f32>, data: &Dataset) -> Result<Vec<(String, Vec<f32>)>> {
    let mut rows = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(64) {
        let (x, _) = data.batch::<f32>(chunk, None)?;
        let e = model.embed(x)?;
        let d = e.shape()[1];
        for (k, &i) in chunk.iter().enumerate() {
            rows.push((i.to_string(), e.data()[k * d..(k + 1) * d].to_vec()));
        }
    }
    Ok(rows)
}

fn load_embeddings(path: &Path) -> Result<Vec<(String, Vec<f32>)>> {
    let bytes = read_file(path)?;
    if bytes.starts_with(crate::io::checkpoint::MAGIC) {
        load_checkpoint(path)?
            .into_iter()
            .map(|(name, t): (String, Tensor<f32>)| {
                if t.rank() != 1 {
                    return Err(Error::Format {
                        what: "embedding checkpoint",
                        offset: 0,
                        reason: format!("array {name:?} has rank {}, expected 1", t.rank()),
                    });
                }
                Ok((name, t.into_data()))
            })
            .collect()
    } else {
        parse_embeddings_csv(&read_text(path)?)
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let (rows, labels) = match (&a.embeddings, &a.model, &a.data) {
        (Some(p), _, _) => (load_embeddings(p)?, None),
        (None, Some(m), Some(d)) => {
            let data = load_dataset(d)?;
            let mut model = load_model_dir(m)?;
            (embed_dataset(&mut model, &data)?, Some(data.labels.clone()))
        }
        _ => return Err(Error::invalid("eval needs --embeddings, or --model with --data")),
    };
    if let Some(p) = &a.write_embeddings {
        write_atomic(p, format_embeddings_csv(&rows).as_bytes())?;
    }
    let mut report = String::from("metric,value\n");
    if let Some(p) = &a.pairs {
        let protocol = PairProtocol::parse(&read_text(p)?, a.folds)?;
        let map: HashMap<String, Vec<f32>> = rows.iter().cloned().collect();
        let scores = protocol.scores(&map)?;
        let acc = verification_accuracy_from_scores(&scores, protocol.fold_count)?;
        let genuine: Vec<f64> = scores.iter().filter(|s| s.1).map(|s| s.0).collect();
        let impostor: Vec<f64> = scores.iter().filter(|s| !s.1).map(|s| s.0).collect();
        let _ = writeln!(report, "verification_accuracy,{acc}");
        let _ = writeln!(report, "tar_at_far_{},{}", a.far, tar_at_far(&genuine, &impostor, a.far)?);
    }
    if let Some(labels) = labels {
        // the first sample of each identity forms the gallery
        let mut seen = std::collections::HashSet::new();
        let (mut g, mut gl, mut p, mut pl) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for ((_, e), &l) in rows.iter().zip(&labels) {
            if seen.insert(l) {
                g.push(e.clone());
                gl.push(l);
            } else {
                p.push(e.clone());
                pl.push(l);
            }
        }
        if !p.is_empty() {
            let _ = writeln!(report, "rank1_identification,{}", rank1_identification(&p, &pl, &g, &gl)?);
        }
    }
    if a.pairs.is_none() && report.lines().count() == 1 {
        return Err(Error::invalid("nothing to evaluate: give --pairs, or --model with --data"));
    }
    emit(a.out.as_deref(), &report)
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let reports = run_suite(a.seeds)?;
    let mut failed = 0;
    println!("op,seeds,worst_rel_error,status");
    for r in &reports {
        let status = if r.passed() { "ok" } else { "FAIL" };
        failed += usize::from(!r.passed());
        println!("{},{},{:.3e},{status}", r.op, r.seeds, r.worst_error);
    }
    if failed > 0 {
        return Err(Error::Numerical(format!(
            "{failed} operations exceed relative error {TOLERANCE}"
        )));
    }
    Ok(())
}
