use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use dfq::bn_stats::{capture_empirical_stats, extract_reference_stats};
use dfq::checkpoint::{
    load_classifier, load_generator, load_quant_spec, load_teacher, save_classifier, save_generator,
    save_teacher, write_tensors,
};
use dfq::classify::{build_desk_teacher, evaluate, TeacherTrainConfig};
use dfq::data::{dataset_card, DataSource, Split, DATA_DIR_ENV};
use dfq::distill::{
    evaluate_student, train_data_dependent_qat, train_data_free_qat, DistillContext, DistillReport, KdConfig,
};
use dfq::grid::export_sample_grid;
use dfq::nn::{Architecture, ConditionalGenerator, GeneratorConfig, TeacherModel};
use dfq::pipeline::{render_table, run_plan, ExperimentPlan};
use dfq::student::{quantize_teacher, BitPlan, StudentModel};
use dfq::zscgan::{sample_synthetic, train_generator_with_state, GeneratorTrainer, LossMode, TrainHooks, ZsCganConfig};
use dfq::Tensor32;

#[derive(Parser)]
#[command(name = "dfq", version, about = "Data-free quantization with a zero-shot conditional generator")]
struct Cli {
    /// Dataset root (one sub-directory per dataset, each with SHA256SUMS).
    #[arg(long, global = true, env = DATA_DIR_ENV, default_value = "data")]
    data_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a classifier with batch norm to serve as the frozen teacher.
    TrainTeacher(TrainTeacher),
    /// Train a conditional generator against a frozen teacher.
    TrainGenerator(TrainGenerator),
    /// Sample labelled synthetic images.
    Generate(Generate),
    /// Min/max post-training quantization.
    Ptq(Ptq),
    /// Quantization-aware training by distillation.
    Qat(Qat),
    /// Top-1 accuracy of a teacher or quantized student on a dataset split.
    Evaluate(Evaluate),
    /// Run an experiment plan (JSON) end to end.
    RunPlan(RunPlan),
    /// Dump batch-norm statistics as JSON rows.
    ExportStats(ExportStats),
    /// Write a PNG grid of generated samples, one row per class.
    ExportGrid(ExportGrid),
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Desk,
    Paper,
}

impl Profile {
    fn name(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum QatMode {
    DataFree,
    DataDependent,
}

#[derive(Args)]
struct TrainTeacher {
    #[arg(long, default_value = "mnist-lite")]
    dataset: String,
    /// mnist-bn-cnn or resnet-mini; defaults by dataset.
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Train on the first N images only.
    #[arg(long)]
    train_limit: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainGenerator {
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long, default_value = "ce+bns", value_parser = parse_mode)]
    mode: LossMode,
    #[arg(long, value_enum, default_value = "desk")]
    profile: Profile,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batches_per_epoch: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    bns_weight: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for the generator, its optimizer state and the loss curve.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Generate {
    #[arg(long)]
    generator: PathBuf,
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// safetensors file with `images`, `labels` and `teacher_probs`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct QuantArgs {
    #[arg(long, default_value_t = 8, value_parser = parse_bits)]
    bits: u32,
    /// Keep the input, first and last layers and the logits at 8 bits.
    #[arg(long)]
    keep_io_8bit: bool,
    /// One set of weight parameters per output channel instead of per tensor.
    #[arg(long)]
    per_channel: bool,
    /// Fold batch norm into the preceding convolutions before quantizing.
    #[arg(long)]
    fold_bn: bool,
    /// Calibration images.
    #[arg(long, default_value_t = 1024)]
    samples: usize,
}

#[derive(Args)]
struct Ptq {
    #[arg(long)]
    teacher: PathBuf,
    /// Calibrate on generator samples; without it the real training split is used.
    #[arg(long)]
    generator: Option<PathBuf>,
    #[command(flatten)]
    quant: QuantArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Qat {
    #[arg(long, value_enum)]
    mode: QatMode,
    /// Teacher checkpoint the student is cloned from.
    #[arg(long)]
    student_from: PathBuf,
    #[arg(long, required_if_eq("mode", "data-free"))]
    generator: Option<PathBuf>,
    #[command(flatten)]
    quant: QuantArgs,
    #[arg(long, value_enum, default_value = "desk")]
    profile: Profile,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batches_per_epoch: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Freeze the generator during data-free distillation.
    #[arg(long)]
    no_generator_updates: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for the student and its report.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Evaluate {
    /// Teacher or student checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Defaults to the dataset recorded in the checkpoint.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct RunPlan {
    /// Plan file; see `--print-preset` for the format.
    #[arg(long, required_unless_present = "preset")]
    plan: Option<PathBuf>,
    /// Built-in plan (mnist-desk).
    #[arg(long)]
    preset: Option<String>,
    /// Override the plan's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the plan as JSON and exit.
    #[arg(long)]
    print_preset: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum StatsSource {
    /// Running statistics stored in the teacher.
    Reference,
    /// Batch statistics of generator samples.
    Generator,
}

#[derive(Args)]
struct ExportStats {
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long, value_enum, default_value = "reference")]
    source: StatsSource,
    #[arg(long, required_if_eq("source", "generator"))]
    generator: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportGrid {
    #[arg(long)]
    generator: PathBuf,
    #[arg(long)]
    teacher: PathBuf,
    /// Comma-separated class indices; all classes by default.
    #[arg(long, value_delimiter = ',')]
    classes: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn parse_bits(s: &str) -> std::result::Result<u32, String> {
    match s {
        "8" => Ok(8),
        "6" => Ok(6),
        _ => Err(format!("unsupported bit width `{s}` (expected 8 or 6)")),
    }
}

fn parse_mode(s: &str) -> std::result::Result<LossMode, String> {
    LossMode::parse(s).map_err(|e| e.to_string())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let source = DataSource::new(&cli.data_dir);
    match cli.command {
        Command::TrainTeacher(a) => train_teacher(a, &source),
        Command::TrainGenerator(a) => train_generator(a),
        Command::Generate(a) => generate(a),
        Command::Ptq(a) => ptq(a, &source),
        Command::Qat(a) => qat(a, &source),
        Command::Evaluate(a) => evaluate_cmd(a, &source),
        Command::RunPlan(a) => run_plan_cmd(a, &source),
        Command::ExportStats(a) => export_stats(a),
        Command::ExportGrid(a) => export_grid(a),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    }
    Ok(())
}

fn teacher_dataset(path: &Path) -> Result<(TeacherModel<f32>, String)> {
    let (teacher, manifest) = load_teacher::<f32>(path).with_context(|| format!("loading teacher {}", path.display()))?;
    let dataset = manifest
        .dataset
        .clone()
        .with_context(|| format!("{} does not record its dataset", path.display()))?;
    Ok((teacher, dataset))
}

fn train_teacher(a: TrainTeacher, source: &DataSource) -> Result<()> {
    let card = dataset_card(&a.dataset)?;
    let mut cfg = if card.shape[0] == 3 {
        TeacherTrainConfig::cifar10()
    } else {
        TeacherTrainConfig::mnist(&a.dataset)
    };
    cfg.dataset = a.dataset.clone();
    if let Some(arch) = &a.arch {
        cfg.architecture = Architecture::parse(arch)?;
    }
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.lr = a.lr.unwrap_or(cfg.lr);
    cfg.train_limit = a.train_limit.unwrap_or(0);
    cfg.seed = a.seed;
    let (teacher, history) = build_desk_teacher::<f32>(&cfg, source)?;
    ensure_parent(&a.out)?;
    save_teacher(&a.out, &teacher, Some(&a.dataset))?;
    let mut csv = String::from("epoch,loss,train_accuracy\n");
    for h in &history {
        csv.push_str(&format!("{},{},{}\n", h.epoch, h.loss, h.train_accuracy));
    }
    fs::write(a.out.with_extension("history.csv"), csv)?;
    println!(
        "teacher {} test accuracy {:.4} -> {}",
        teacher.net().arch.id(),
        teacher.recorded_accuracy().unwrap_or(f64::NAN),
        a.out.display()
    );
    Ok(())
}

fn generator_files(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join("generator.safetensors"), dir.join("generator.adam.safetensors"))
}

/// Optimizer state written next to a generator by `train-generator`.
fn trainer_path(generator: &Path) -> PathBuf {
    let stem = generator.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    generator.with_file_name(format!("{stem}.adam.safetensors"))
}

fn train_generator(a: TrainGenerator) -> Result<()> {
    let (teacher, _) = teacher_dataset(&a.teacher)?;
    let net = teacher.net();
    let mut cfg = ZsCganConfig::profile(a.profile.name(), net.input_shape)?;
    cfg.loss_mode = a.mode;
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.batches_per_epoch = a.batches_per_epoch.unwrap_or(cfg.batches_per_epoch);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.lr = a.lr.unwrap_or(cfg.lr);
    cfg.bns_weight = a.bns_weight.unwrap_or(cfg.bns_weight);
    cfg.seed = a.seed;
    let gcfg = GeneratorConfig::for_input(net.input_shape, net.num_classes)?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(a.seed);
    let mut gen = ConditionalGenerator::<f32>::new(gcfg, net.normalization.clone(), &mut rng)?;
    fs::create_dir_all(&a.out)?;
    let hooks = TrainHooks {
        out_dir: Some(a.out.clone()),
        on_epoch: None,
    };
    let (report, trainer) = train_generator_with_state(&mut gen, &teacher, &cfg, hooks)?;
    let (gpath, apath) = generator_files(&a.out);
    save_generator(&gpath, &gen, Some(&teacher.digest()), Some(a.mode.as_str()))?;
    trainer.save(&apath)?;
    fs::write(a.out.join("report.csv"), report.to_csv())?;
    let rows: Vec<Vec<String>> = report
        .epochs
        .iter()
        .map(|e| {
            vec![
                e.epoch.to_string(),
                format!("{:.4}", e.total),
                format!("{:.4}", e.ce),
                format!("{:.4}", e.bns),
                format!("{:.3}", e.fidelity),
                format!("{:.1}", e.seconds),
            ]
        })
        .collect();
    print!("{}", render_table(&["epoch", "total", "ce", "bns", "fidelity", "seconds"], &rows));
    let fid = sample_synthetic(&gen, &teacher, 1000, a.seed.wrapping_add(1))?.fidelity();
    println!("label fidelity on 1000 fresh samples: {fid:.3}");
    println!("generator -> {}", gpath.display());
    Ok(())
}

fn generate(a: Generate) -> Result<()> {
    let (teacher, _) = load_teacher::<f32>(&a.teacher)?;
    let (gen, _) = load_generator::<f32>(&a.generator)?;
    let batch = sample_synthetic(&gen, &teacher, a.n, a.seed)?;
    let labels = Tensor32::from_vec(&[batch.len()], batch.labels.iter().map(|&l| l as f32).collect())?;
    ensure_parent(&a.out)?;
    write_tensors(
        &a.out,
        &[
            ("images".to_string(), &batch.images),
            ("labels".to_string(), &labels),
            ("teacher_probs".to_string(), &batch.teacher_probs),
        ],
    )?;
    println!("{} samples, label fidelity {:.3} -> {}", batch.len(), batch.fidelity(), a.out.display());
    Ok(())
}

fn calibrate(
    teacher: &TeacherModel<f32>,
    generator: Option<&ConditionalGenerator<f32>>,
    dataset: &str,
    source: &DataSource,
    q: &QuantArgs,
    seed: u64,
) -> Result<StudentModel<f32>> {
    let plan = BitPlan {
        bits: q.bits,
        keep_io_8bit: q.keep_io_8bit,
        per_channel: q.per_channel,
        fold_bn: q.fold_bn,
    };
    let student = match generator {
        Some(g) => {
            let _embargo = source.audit.embargo_train("data-free calibration");
            quantize_teacher(teacher, sample_synthetic(g, teacher, q.samples, seed)?.chunks(256), plan)?
        }
        None => {
            let train = source.load(dataset, Split::Train)?.take(q.samples);
            let idx: Vec<Vec<usize>> = train.sequential_batches(256);
            quantize_teacher(teacher, idx.iter().map(|i| train.batch::<f32>(i).0), plan)?
        }
    };
    Ok(student)
}

fn ptq(a: Ptq, source: &DataSource) -> Result<()> {
    let (teacher, dataset) = teacher_dataset(&a.teacher)?;
    let gen = a.generator.as_deref().map(load_generator::<f32>).transpose()?.map(|g| g.0);
    let student = calibrate(&teacher, gen.as_ref(), &dataset, source, &a.quant, a.seed)?;
    let test = source.load(&dataset, Split::Test)?;
    let acc = evaluate_student(&student, &test)?;
    ensure_parent(&a.out)?;
    save_classifier(&a.out, &student.net, Some(acc), Some(&dataset), Some(&student.spec))?;
    let kind = if gen.is_some() { "DF-PTQ" } else { "DD-PTQ" };
    println!(
        "{kind} INT{} accuracy {:.4} (FP32 {:.4}) -> {}",
        a.quant.bits,
        acc,
        teacher.recorded_accuracy().unwrap_or(f64::NAN),
        a.out.display()
    );
    Ok(())
}

fn report_table(r: &DistillReport) -> String {
    let cell = |v: Option<f64>, p: usize| v.map(|x| format!("{x:.p$}")).unwrap_or_else(|| "-".into());
    let rows: Vec<Vec<String>> = r
        .epochs
        .iter()
        .map(|e| {
            vec![
                e.epoch.to_string(),
                format!("{:.4}", e.kd_loss),
                cell(e.accuracy, 4),
                cell(e.generator_total, 4),
                cell(e.generator_fidelity, 3),
                format!("{:.1}", e.seconds),
            ]
        })
        .collect();
    render_table(&["epoch", "kd_loss", "accuracy", "gen_loss", "gen_fidelity", "seconds"], &rows)
}

fn qat(a: Qat, source: &DataSource) -> Result<()> {
    let (teacher, dataset) = teacher_dataset(&a.student_from)?;
    let mut kd = KdConfig::profile(a.profile.name())?;
    kd.epochs = a.epochs.unwrap_or(kd.epochs);
    kd.batches_per_epoch = a.batches_per_epoch.unwrap_or(kd.batches_per_epoch);
    kd.batch_size = a.batch_size.unwrap_or(kd.batch_size);
    kd.lr = a.lr.unwrap_or(kd.lr);
    kd.temperature = a.temperature.unwrap_or(kd.temperature);
    kd.continue_generator_updates = !a.no_generator_updates;
    kd.seed = a.seed;
    let test = source.load(&dataset, Split::Test)?;
    fs::create_dir_all(&a.out)?;
    let ctx = DistillContext {
        test: Some(&test),
        out_dir: Some(&a.out),
    };
    let (mut student, report) = match a.mode {
        QatMode::DataFree => {
            let gpath = a.generator.as_ref().expect("required by clap");
            let (mut gen, manifest) = load_generator::<f32>(gpath)?;
            let mut student = calibrate(&teacher, Some(&gen), &dataset, source, &a.quant, a.seed)?;
            let ptq = evaluate_student(&student, &test)?;
            info!("DF-PTQ starting point: {ptq:.4}");
            let mut trainer = if kd.continue_generator_updates {
                let tp = trainer_path(gpath);
                Some(if tp.exists() {
                    GeneratorTrainer::load(&tp, &teacher)?
                } else {
                    let mut cfg = ZsCganConfig::profile(a.profile.name(), teacher.net().input_shape)?;
                    if let Some(m) = manifest.loss_mode.as_deref() {
                        cfg.loss_mode = LossMode::parse(m)?;
                    }
                    log::warn!("no optimizer state next to the generator; starting a fresh one");
                    GeneratorTrainer::new(cfg, &teacher)?
                })
            } else {
                None
            };
            let _embargo = source.audit.embargo_train("data-free qat");
            let report = train_data_free_qat(&mut student, &teacher, &mut gen, trainer.as_mut(), &kd, ctx)?;
            if kd.continue_generator_updates {
                save_generator(&a.out.join("generator.safetensors"), &gen, Some(&teacher.digest()), manifest.loss_mode.as_deref())?;
            }
            (student, report)
        }
        QatMode::DataDependent => {
            let mut student = calibrate(&teacher, None, &dataset, source, &a.quant, a.seed)?;
            let train = source.load(&dataset, Split::Train)?;
            let report = train_data_dependent_qat(&mut student, &teacher, &train, &kd, ctx)?;
            (student, report)
        }
    };
    student.refresh_weight_params()?;
    let acc = report.final_accuracy();
    save_classifier(
        &a.out.join("student.safetensors"),
        &student.net,
        acc,
        Some(&dataset),
        Some(&student.spec),
    )?;
    fs::write(a.out.join("report.csv"), report.to_csv())?;
    print!("{}", report_table(&report));
    if let Some(acc) = acc {
        println!("final accuracy {acc:.4} (FP32 {:.4})", teacher.recorded_accuracy().unwrap_or(f64::NAN));
    }
    Ok(())
}

fn evaluate_cmd(a: Evaluate, source: &DataSource) -> Result<()> {
    let (net, manifest) = load_classifier::<f32>(&a.model)?;
    let dataset = a
        .dataset
        .or(manifest.dataset.clone())
        .context("no dataset given and none recorded in the checkpoint")?;
    let split = match a.split.as_str() {
        "test" => Split::Test,
        "train" => Split::Train,
        other => bail!("unknown split `{other}` (expected train or test)"),
    };
    let ds = source.load(&dataset, split)?;
    let acc = if manifest.quant_spec.is_some() {
        let spec = load_quant_spec::<f32>(&a.model, &manifest)?;
        evaluate_student(&StudentModel::new(net, spec)?, &ds)?
    } else {
        evaluate(&net, &ds)?
    };
    println!("{dataset} {split}: top-1 {acc:.4} ({} images)", ds.len());
    Ok(())
}

fn run_plan_cmd(a: RunPlan, source: &DataSource) -> Result<()> {
    let mut plan = match (&a.plan, a.preset.as_deref()) {
        (Some(p), _) => ExperimentPlan::from_json(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        (None, Some("mnist-desk")) => ExperimentPlan::mnist_desk("runs/mnist-desk"),
        (None, Some(other)) => bail!("unknown preset `{other}` (available: mnist-desk)"),
        (None, None) => unreachable!("clap requires one of them"),
    };
    if let Some(out) = a.out {
        plan.out_dir = out;
    }
    if a.print_preset {
        println!("{}", plan.to_json()?);
        return Ok(());
    }
    let outcome = run_plan::<f32>(&plan, source)?;
    print!("{}", outcome.tables);
    println!(
        "\n{} stages, {} resumed; results in {}",
        outcome.records.len(),
        outcome.resumed.len(),
        plan.out_dir.display()
    );
    Ok(())
}

fn export_stats(a: ExportStats) -> Result<()> {
    let (teacher, _) = load_teacher::<f32>(&a.teacher)?;
    let json = match a.source {
        StatsSource::Reference => extract_reference_stats(teacher.net())?.to_json()?,
        StatsSource::Generator => {
            let (gen, _) = load_generator::<f32>(a.generator.as_ref().expect("required by clap"))?;
            let batch = sample_synthetic(&gen, &teacher, a.n, a.seed)?;
            capture_empirical_stats(&teacher, &batch.images)?.table.to_json()?
        }
    };
    ensure_parent(&a.out)?;
    fs::write(&a.out, json)?;
    println!("statistics -> {}", a.out.display());
    Ok(())
}

fn export_grid(a: ExportGrid) -> Result<()> {
    let (teacher, manifest) = load_teacher::<f32>(&a.teacher)?;
    let (gen, _) = load_generator::<f32>(&a.generator)?;
    let k = gen.num_classes();
    let classes: Vec<usize> = if a.classes.is_empty() { (0..k).collect() } else { a.classes };
    let names: Vec<String> = match manifest.dataset.as_deref().map(dataset_card) {
        Some(Ok(card)) => card.class_names.iter().map(|s| s.to_string()).collect(),
        _ => (0..k).map(|i| i.to_string()).collect(),
    };
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    ensure_parent(&a.out)?;
    let grid = export_sample_grid(&gen, &teacher, &classes, &names, a.per_class, a.seed, &a.out)?;
    let hits: usize = grid.tiles.iter().flatten().filter(|t| t.predicted == t.class).count();
    println!(
        "{}x{} grid ({}x{} px), teacher agrees on {hits}/{} tiles -> {}",
        grid.rows,
        grid.cols,
        grid.width,
        grid.height,
        grid.rows * grid.cols,
        a.out.display()
    );
    Ok(())
}
