//! Experiment plans: teacher, generators and a grid of quantisation cells,
//! run in dependency order with per-stage checkpoints so an interrupted
//! run picks up where it stopped.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{load_generator, load_teacher, save_classifier, save_generator, save_teacher};
use crate::classify::{build_desk_teacher, TeacherTrainConfig};
use crate::data::{DataSource, Dataset, Split};
use crate::distill::{evaluate_student, train_data_dependent_qat, train_data_free_qat, DistillContext, KdConfig};
use crate::error::{Error, Result};
use crate::nn::{ConditionalGenerator, GeneratorConfig, TeacherModel};
use crate::scalar::Scalar;
use crate::student::{quantize_teacher, BitPlan};
use crate::zscgan::{sample_synthetic, train_generator_with_state, GeneratorTrainer, LossMode, TrainHooks, ZsCganConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "DF-PTQ")]
    DfPtq,
    #[serde(rename = "DF-QAT")]
    DfQat,
    #[serde(rename = "DD-PTQ")]
    DdPtq,
    #[serde(rename = "DD-QAT")]
    DdQat,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::DfPtq, Method::DfQat, Method::DdPtq, Method::DdQat];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::DfPtq => "DF-PTQ",
            Method::DfQat => "DF-QAT",
            Method::DdPtq => "DD-PTQ",
            Method::DdQat => "DD-QAT",
        }
    }

    pub fn is_data_free(self) -> bool {
        matches!(self, Method::DfPtq | Method::DfQat)
    }

    pub fn is_qat(self) -> bool {
        matches!(self, Method::DfQat | Method::DdQat)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub method: Method,
    pub bits: u32,
    /// Generator objective for data-free cells; ignored otherwise.
    #[serde(default)]
    pub loss_mode: Option<LossMode>,
}

impl CellSpec {
    pub fn id(&self, seed: u64) -> String {
        let mode = match (self.method.is_data_free(), self.loss_mode) {
            (true, Some(m)) => format!("-{m}"),
            _ => String::new(),
        };
        format!("{}-int{}{}-s{seed}", self.method.as_str().to_ascii_lowercase(), self.bits, mode)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub name: String,
    pub teacher: TeacherTrainConfig,
    /// Schedule shared by every generator; the loss mode and seed come from
    /// the cells.
    pub generator: ZsCganConfig,
    pub kd: KdConfig,
    /// Images used for min/max calibration.
    pub calibration_samples: usize,
    #[serde(default)]
    pub keep_io_8bit: bool,
    /// Per-output-channel weight quantisation.
    #[serde(default)]
    pub per_channel: bool,
    /// Fold batch norm into convolutions before quantising.
    #[serde(default)]
    pub fold_bn: bool,
    pub seeds: Vec<u64>,
    pub cells: Vec<CellSpec>,
    pub out_dir: PathBuf,
}

impl ExperimentPlan {
    pub fn from_json(text: &str) -> Result<Self> {
        let plan: Self = serde_json::from_str(text)?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.cells.is_empty() {
            return Err(Error::Config("plan needs at least one seed and one cell".into()));
        }
        if self.calibration_samples == 0 {
            return Err(Error::Config("calibration needs at least one sample".into()));
        }
        for c in &self.cells {
            if !crate::quant::SUPPORTED_BITS.contains(&c.bits) {
                return Err(Error::Config(format!("unsupported bit width {}", c.bits)));
            }
            if c.method.is_data_free() && c.loss_mode.is_none() {
                return Err(Error::Config(format!("{} cell needs a generator loss mode", c.method)));
            }
        }
        self.generator.validate()?;
        self.kd.validate()?;
        if self.cells.iter().any(|c| c.method == Method::DfQat) {
            self.kd.validate_data_free()?;
        }
        Ok(())
    }

    /// The MNIST plan behind the desk-scale acceptance run: one teacher,
    /// three generators per seed and INT8/INT6 cells.
    pub fn mnist_desk(out_dir: impl Into<PathBuf>) -> Self {
        let mut generator = ZsCganConfig::desk([1, 28, 28]);
        generator.epochs = 5;
        generator.batches_per_epoch = 100;
        generator.batch_size = 64;
        let mut kd = KdConfig::desk();
        kd.epochs = 1;
        kd.batches_per_epoch = 200;
        kd.batch_size = 64;
        let df = |method, bits, mode| CellSpec {
            method,
            bits,
            loss_mode: Some(mode),
        };
        let dd = |method, bits| CellSpec {
            method,
            bits,
            loss_mode: None,
        };
        let mut cells = Vec::new();
        for bits in [8, 6] {
            cells.push(df(Method::DfPtq, bits, LossMode::CePlusBns));
            cells.push(df(Method::DfQat, bits, LossMode::CePlusBns));
        }
        for mode in [LossMode::CeOnly, LossMode::BnsOnly] {
            cells.push(df(Method::DfPtq, 8, mode));
            cells.push(df(Method::DfQat, 8, mode));
        }
        cells.push(dd(Method::DdPtq, 8));
        cells.push(dd(Method::DdQat, 8));
        Self {
            name: "mnist-desk".into(),
            teacher: TeacherTrainConfig::mnist("mnist-lite"),
            generator,
            kd,
            calibration_samples: 1024,
            keep_io_8bit: false,
            per_channel: false,
            fold_bn: false,
            seeds: vec![0, 1, 2],
            cells,
            out_dir: out_dir.into(),
        }
    }

    pub fn digest(&self) -> String {
        digest_of(self)
    }
}

fn digest_of<S: Serialize>(value: &S) -> String {
    let bytes = serde_json::to_vec(value).expect("plan types serialise");
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Teacher,
    Generator,
    Cell,
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub id: String,
    pub stage: Stage,
    pub method: Option<Method>,
    pub bits: Option<u32>,
    pub loss_mode: Option<LossMode>,
    pub seed: Option<u64>,
    /// Top-1 on the test split (teacher, or quantised student).
    pub accuracy: Option<f64>,
    /// Generator label fidelity.
    pub fidelity: Option<f64>,
    /// Accuracy of the calibrated student before QAT.
    pub ptq_accuracy: Option<f64>,
    pub loss_curve: Vec<f64>,
    pub seconds: f64,
    pub config_digest: String,
    pub code_version: String,
    /// Training-split opens attempted while this stage ran.
    pub train_split_reads: usize,
    /// Files written by this stage, relative to the plan directory.
    pub artifacts: Vec<String>,
}

impl MetricsRecord {
    fn new(id: String, stage: Stage, config_digest: String) -> Self {
        Self {
            id,
            stage,
            method: None,
            bits: None,
            loss_mode: None,
            seed: None,
            accuracy: None,
            fidelity: None,
            ptq_accuracy: None,
            loss_curve: Vec::new(),
            seconds: 0.0,
            config_digest,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            train_split_reads: 0,
            artifacts: Vec::new(),
        }
    }
}

/// Mean and range of one (method, bits, loss mode) group over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub bits: u32,
    pub loss_mode: Option<LossMode>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

/// DF-QAT against DF-PTQ for one (loss mode, bits).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub bits: u32,
    pub loss_mode: LossMode,
    pub ptq: f64,
    pub qat: f64,
    pub pass: bool,
}

#[derive(Clone, Debug)]
pub struct PlanOutcome {
    pub teacher_accuracy: f64,
    pub teacher_digest: String,
    pub records: Vec<MetricsRecord>,
    pub summary: Vec<SummaryRow>,
    pub checks: Vec<OrderingCheck>,
    /// Stages skipped because a matching completed record was on disk.
    pub resumed: Vec<String>,
    pub tables: String,
}

impl PlanOutcome {
    pub fn record(&self, id: &str) -> Option<&MetricsRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn summary_for(&self, method: Method, bits: u32, loss_mode: Option<LossMode>) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|r| r.method == method && r.bits == bits && (!method.is_data_free() || r.loss_mode == loss_mode))
    }

    /// Generator records for one loss mode across seeds.
    pub fn generators(&self, mode: LossMode) -> Vec<&MetricsRecord> {
        self.records
            .iter()
            .filter(|r| r.stage == Stage::Generator && r.loss_mode == Some(mode))
            .collect()
    }
}

struct Runner<'a> {
    plan: &'a ExperimentPlan,
    source: &'a DataSource,
    dir: PathBuf,
    metrics: PathBuf,
    resumed: Vec<String>,
    records: Vec<MetricsRecord>,
}

impl Runner<'_> {
    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.dir).unwrap_or(p).display().to_string()
    }

    fn done_path(&self, id: &str) -> PathBuf {
        self.dir.join("done").join(format!("{id}.json"))
    }

    /// The completed record for `id` if it was produced by the same config.
    fn completed(&mut self, id: &str, digest: &str) -> Option<MetricsRecord> {
        let text = fs::read_to_string(self.done_path(id)).ok()?;
        let rec: MetricsRecord = serde_json::from_str(&text).ok()?;
        let complete = rec.config_digest == digest && rec.artifacts.iter().all(|a| self.dir.join(a).exists());
        if complete {
            log::info!("{id}: already complete, skipping");
            self.resumed.push(id.to_string());
            self.records.push(rec.clone());
            Some(rec)
        } else {
            None
        }
    }

    fn finish(&mut self, rec: MetricsRecord) -> Result<MetricsRecord> {
        let mut f = OpenOptions::new().create(true).append(true).open(&self.metrics)?;
        writeln!(f, "{}", serde_json::to_string(&rec)?)?;
        fs::write(self.done_path(&rec.id), serde_json::to_string_pretty(&rec)?)?;
        self.records.push(rec.clone());
        Ok(rec)
    }

    fn teacher<T: Scalar>(&mut self) -> Result<(TeacherModel<T>, MetricsRecord)> {
        let id = "teacher".to_string();
        let digest = digest_of(&self.plan.teacher);
        let path = self.dir.join("teacher.safetensors");
        if let Some(rec) = self.completed(&id, &digest) {
            return Ok((load_teacher(&path)?.0, rec));
        }
        let start = Instant::now();
        self.source.audit.set_context(Some(&id));
        let built = build_desk_teacher::<T>(&self.plan.teacher, self.source);
        self.source.audit.set_context(None);
        let (teacher, history) = built?;
        save_teacher(&path, &teacher, Some(&self.plan.teacher.dataset))?;
        let mut rec = MetricsRecord::new(id.clone(), Stage::Teacher, digest);
        rec.accuracy = teacher.recorded_accuracy();
        rec.loss_curve = history.iter().map(|h| h.loss).collect();
        rec.seconds = start.elapsed().as_secs_f64();
        rec.train_split_reads = self.source.audit.train_reads(&id);
        rec.artifacts = vec![self.rel(&path), self.rel(&crate::checkpoint::manifest_path(&path))];
        let rec = self.finish(rec)?;
        Ok((teacher, rec))
    }

    fn generator_paths(&self, mode: LossMode, seed: u64) -> (PathBuf, PathBuf) {
        let base = self.dir.join("generators");
        (
            base.join(format!("{mode}-s{seed}.safetensors")),
            base.join(format!("{mode}-s{seed}.adam.safetensors")),
        )
    }

    fn generator_config(&self, mode: LossMode, seed: u64) -> ZsCganConfig {
        let mut cfg = self.plan.generator.clone();
        cfg.loss_mode = mode;
        cfg.seed = self.plan.generator.seed.wrapping_add(seed);
        cfg
    }

    fn generator<T: Scalar>(&mut self, teacher: &TeacherModel<T>, mode: LossMode, seed: u64) -> Result<()> {
        let id = format!("generator-{mode}-s{seed}");
        let cfg = self.generator_config(mode, seed);
        let digest = digest_of(&(&cfg, teacher.digest(), seed));
        if self.completed(&id, &digest).is_some() {
            return Ok(());
        }
        let start = Instant::now();
        let _embargo = self.source.audit.embargo_train(&id);
        let net = teacher.net();
        let gcfg = GeneratorConfig::for_input(net.input_shape, net.num_classes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gen = ConditionalGenerator::<T>::new(gcfg, net.normalization.clone(), &mut rng)?;
        let (path, adam) = self.generator_paths(mode, seed);
        fs::create_dir_all(path.parent().expect("generator dir"))?;
        let hooks = TrainHooks {
            out_dir: path.parent().map(Path::to_path_buf),
            on_epoch: None,
        };
        let (report, trainer) = train_generator_with_state(&mut gen, teacher, &cfg, hooks)?;
        save_generator(&path, &gen, Some(&teacher.digest()), Some(mode.as_str()))?;
        trainer.save(&adam)?;
        let csv = path.with_extension("csv");
        fs::write(&csv, report.to_csv())?;
        let mut rec = MetricsRecord::new(id.clone(), Stage::Generator, digest);
        rec.loss_mode = Some(mode);
        rec.seed = Some(seed);
        rec.fidelity = Some(sample_synthetic(&gen, teacher, 1000, seed.wrapping_add(7919))?.fidelity());
        rec.loss_curve = report.epochs.iter().map(|e| e.total).collect();
        rec.seconds = start.elapsed().as_secs_f64();
        rec.train_split_reads = self.source.audit.train_reads(&id);
        rec.artifacts = [
            path.clone(),
            crate::checkpoint::manifest_path(&path),
            adam.clone(),
            crate::checkpoint::manifest_path(&adam),
            csv,
        ]
        .iter()
        .map(|p| self.rel(p))
        .collect();
        self.finish(rec)?;
        Ok(())
    }

    fn cell<T: Scalar>(&mut self, teacher: &TeacherModel<T>, test: &Dataset, cell: &CellSpec, seed: u64) -> Result<()> {
        let id = cell.id(seed);
        let plan = self.plan;
        let gen_cfg = cell.loss_mode.filter(|_| cell.method.is_data_free()).map(|m| self.generator_config(m, seed));
        let mut kd = plan.kd.clone();
        kd.seed = plan.kd.seed.wrapping_add(seed);
        let digest = digest_of(&(
            cell,
            seed,
            teacher.digest(),
            &gen_cfg,
            cell.method.is_qat().then_some(&kd),
            plan.calibration_samples,
            (plan.keep_io_8bit, plan.per_channel, plan.fold_bn),
            &plan.teacher.dataset,
        ));
        if self.completed(&id, &digest).is_some() {
            return Ok(());
        }
        let start = Instant::now();
        let dir = self.dir.join("cells").join(&id);
        fs::create_dir_all(&dir)?;
        let bits = BitPlan {
            bits: cell.bits,
            keep_io_8bit: plan.keep_io_8bit,
            per_channel: plan.per_channel,
            fold_bn: plan.fold_bn,
        };
        let ctx = DistillContext {
            test: Some(test),
            out_dir: Some(&dir),
        };
        let mut rec = MetricsRecord::new(id.clone(), Stage::Cell, digest);
        let (student, report) = if cell.method.is_data_free() {
            let _embargo = self.source.audit.embargo_train(&id);
            let mode = cell.loss_mode.expect("validated");
            let (gpath, adam) = self.generator_paths(mode, seed);
            let (mut gen, _) = load_generator::<T>(&gpath)?;
            let syn = sample_synthetic(&gen, teacher, plan.calibration_samples, seed)?;
            let mut student = quantize_teacher(teacher, syn.chunks(256), bits)?;
            rec.ptq_accuracy = Some(evaluate_student(&student, test)?);
            let report = if cell.method == Method::DfQat {
                let mut trainer = kd
                    .continue_generator_updates
                    .then(|| GeneratorTrainer::load(&adam, teacher))
                    .transpose()?;
                Some(train_data_free_qat(&mut student, teacher, &mut gen, trainer.as_mut(), &kd, ctx)?)
            } else {
                None
            };
            (student, report)
        } else {
            self.source.audit.set_context(Some(&id));
            let train = self.source.load(&plan.teacher.dataset, Split::Train);
            self.source.audit.set_context(None);
            let train = train?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let idx: Vec<usize> = train
                .shuffled_batches(plan.calibration_samples.min(train.len()), &mut rng)
                .swap_remove(0);
            let (x, _) = train.batch::<T>(&idx);
            let chunks: Vec<_> = (0..idx.len())
                .step_by(256)
                .map(|s| x.slice_rows(s, 256.min(idx.len() - s)))
                .collect();
            let mut student = quantize_teacher(teacher, chunks, bits)?;
            rec.ptq_accuracy = Some(evaluate_student(&student, test)?);
            let report = if cell.method == Method::DdQat {
                Some(train_data_dependent_qat(&mut student, teacher, &train, &kd, ctx)?)
            } else {
                None
            };
            (student, report)
        };
        rec.accuracy = match &report {
            Some(r) => r.final_accuracy(),
            None => rec.ptq_accuracy,
        };
        let spath = dir.join("student.safetensors");
        save_classifier(&spath, &student.net, rec.accuracy, Some(&plan.teacher.dataset), Some(&student.spec))?;
        rec.artifacts = vec![
            self.rel(&spath),
            self.rel(&crate::checkpoint::manifest_path(&spath)),
            self.rel(&spath.with_extension("qspec.json")),
        ];
        if let Some(r) = &report {
            let csv = dir.join("report.csv");
            fs::write(&csv, r.to_csv())?;
            rec.artifacts.push(self.rel(&csv));
            rec.loss_curve = r.epochs.iter().map(|e| e.kd_loss).collect();
        }
        rec.method = Some(cell.method);
        rec.bits = Some(cell.bits);
        rec.loss_mode = cell.loss_mode.filter(|_| cell.method.is_data_free());
        rec.seed = Some(seed);
        rec.seconds = start.elapsed().as_secs_f64();
        rec.train_split_reads = self.source.audit.train_reads(&id);
        log::info!("{id}: accuracy {:.4}", rec.accuracy.unwrap_or(f64::NAN));
        self.finish(rec)?;
        Ok(())
    }
}

/// Runs every stage of `plan`, skipping stages whose completed record and
/// artefacts are already on disk, and renders the result tables.
pub fn run_plan<T: Scalar>(plan: &ExperimentPlan, source: &DataSource) -> Result<PlanOutcome> {
    plan.validate()?;
    let dir = plan.out_dir.clone();
    fs::create_dir_all(dir.join("done"))?;
    fs::write(dir.join("plan.json"), plan.to_json()?)?;
    let mut r = Runner {
        plan,
        source,
        metrics: dir.join("metrics.jsonl"),
        dir,
        resumed: Vec::new(),
        records: Vec::new(),
    };
    let (teacher, trec) = r.teacher::<T>()?;
    let teacher_digest = teacher.digest();
    let test = {
        source.audit.set_context(Some("evaluation"));
        let t = source.load(&plan.teacher.dataset, Split::Test);
        source.audit.set_context(None);
        t?
    };
    for &seed in &plan.seeds {
        let mut modes: Vec<LossMode> = plan.cells.iter().filter(|c| c.method.is_data_free()).filter_map(|c| c.loss_mode).collect();
        modes.dedup();
        modes.sort_by_key(|m| LossMode::ALL.iter().position(|x| x == m));
        modes.dedup();
        for mode in modes {
            r.generator(&teacher, mode, seed)?;
        }
    }
    for &seed in &plan.seeds {
        for cell in &plan.cells {
            r.cell(&teacher, &test, cell, seed)?;
        }
    }
    if teacher.digest() != teacher_digest {
        return Err(Error::Contract("teacher parameters changed during the plan".into()));
    }
    let summary = summarise(&r.records);
    let checks = ordering_checks(&summary);
    let teacher_accuracy = trec.accuracy.unwrap_or(f64::NAN);
    let tables = render_tables(plan, teacher.net().arch.id(), teacher_accuracy, &summary, &checks);
    write_tables(&r.dir, &summary, &tables)?;
    Ok(PlanOutcome {
        teacher_accuracy,
        teacher_digest,
        records: r.records,
        summary,
        checks,
        resumed: r.resumed,
        tables,
    })
}

fn summarise(records: &[MetricsRecord]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(Method, std::cmp::Reverse<u32>, Option<usize>), (Option<LossMode>, Vec<f64>)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.stage == Stage::Cell) {
        let (Some(m), Some(b), Some(acc)) = (r.method, r.bits, r.accuracy) else {
            continue;
        };
        let key = (m, std::cmp::Reverse(b), r.loss_mode.map(|l| LossMode::ALL.iter().position(|x| *x == l).unwrap_or(0)));
        groups.entry(key).or_insert_with(|| (r.loss_mode, Vec::new())).1.push(acc);
    }
    groups
        .into_iter()
        .map(|((method, bits, _), (loss_mode, accuracies))| {
            let mean = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
            let min = accuracies.iter().copied().fold(f64::INFINITY, f64::min);
            let max = accuracies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            SummaryRow {
                method,
                bits: bits.0,
                loss_mode,
                accuracies,
                mean,
                min,
                max,
            }
        })
        .collect()
}

fn ordering_checks(summary: &[SummaryRow]) -> Vec<OrderingCheck> {
    summary
        .iter()
        .filter(|q| q.method == Method::DfQat)
        .filter_map(|q| {
            let p = summary
                .iter()
                .find(|p| p.method == Method::DfPtq && p.bits == q.bits && p.loss_mode == q.loss_mode)?;
            Some(OrderingCheck {
                bits: q.bits,
                loss_mode: q.loss_mode?,
                ptq: p.mean,
                qat: q.mean,
                pass: q.mean >= p.mean,
            })
        })
        .collect()
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

fn pct_range(r: &SummaryRow) -> String {
    if r.accuracies.len() > 1 {
        format!("{} ({}-{})", pct(r.mean), pct(r.min), pct(r.max))
    } else {
        pct(r.mean)
    }
}

/// Column-aligned text table.
pub fn render_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        parts.join("  ").trim_end().to_string()
    };
    let mut out = line(headers.to_vec());
    out.push('\n');
    out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
    out.push('\n');
    for row in rows {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

fn render_tables(plan: &ExperimentPlan, arch: &str, fp32: f64, summary: &[SummaryRow], checks: &[OrderingCheck]) -> String {
    let primary = plan
        .cells
        .iter()
        .find(|c| c.method.is_data_free())
        .and_then(|c| c.loss_mode)
        .unwrap_or(LossMode::CePlusBns);
    let mut bits: Vec<u32> = summary.iter().map(|r| r.bits).collect();
    bits.sort_unstable_by(|a, b| b.cmp(a));
    bits.dedup();
    let find = |m: Method, b: u32, mode: Option<LossMode>| {
        summary
            .iter()
            .find(|r| r.method == m && r.bits == b && (!m.is_data_free() || r.loss_mode == mode))
            .map(pct_range)
            .unwrap_or_else(|| "-".into())
    };
    let mut out = String::new();
    let _ = writeln!(
        out,
        "Accuracy (%) on the test split, {} seed(s), generator objective {primary}\n",
        plan.seeds.len()
    );
    let rows: Vec<Vec<String>> = bits
        .iter()
        .map(|&b| {
            let mut row = vec![format!("{arch} INT{b}"), pct(fp32)];
            row.extend(Method::ALL.iter().map(|&m| find(m, b, Some(primary))));
            row
        })
        .collect();
    out.push_str(&render_table(&["model", "FP32", "DF-PTQ", "DF-QAT", "DD-PTQ", "DD-QAT"], &rows));

    let modes: Vec<LossMode> = LossMode::ALL
        .into_iter()
        .filter(|m| summary.iter().any(|r| r.loss_mode == Some(*m)))
        .collect();
    if modes.len() > 1 {
        let _ = writeln!(out, "\nGenerator objective ablation\n");
        let mut headers = vec!["objective".to_string()];
        for &b in &bits {
            headers.push(format!("DF-PTQ INT{b}"));
            headers.push(format!("DF-QAT INT{b}"));
        }
        let rows: Vec<Vec<String>> = modes
            .iter()
            .map(|&m| {
                let mut row = vec![m.to_string().to_ascii_uppercase()];
                for &b in &bits {
                    row.push(find(Method::DfPtq, b, Some(m)));
                    row.push(find(Method::DfQat, b, Some(m)));
                }
                row
            })
            .collect();
        let h: Vec<&str> = headers.iter().map(String::as_str).collect();
        out.push_str(&render_table(&h, &rows));
    }
    if !checks.is_empty() {
        let _ = writeln!(out, "\nDF-QAT >= DF-PTQ\n");
        for c in checks {
            let _ = writeln!(
                out,
                "{} INT{} {}: QAT {} vs PTQ {}",
                if c.pass { "PASS" } else { "FAIL" },
                c.bits,
                c.loss_mode,
                pct(c.qat),
                pct(c.ptq)
            );
        }
    }
    out
}

fn write_tables(dir: &Path, summary: &[SummaryRow], tables: &str) -> Result<()> {
    let mut csv = String::from("method,bits,loss_mode,seeds,mean,min,max\n");
    for r in summary {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.method,
            r.bits,
            r.loss_mode.map(|m| m.to_string()).unwrap_or_default(),
            r.accuracies.len(),
            r.mean,
            r.min,
            r.max
        );
    }
    fs::write(dir.join("results.csv"), csv)?;
    fs::write(dir.join("results.txt"), tables)?;
    Ok(())
}

/// Reads every record from a plan's `metrics.jsonl`.
pub fn read_metrics(dir: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(dir.join("metrics.jsonl"))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
