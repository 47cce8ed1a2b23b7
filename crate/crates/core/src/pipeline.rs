//! Phased training: self-studying, co-studying, tutoring, the ablation
//! baselines built from the same pieces, evaluation and the per-epoch run
//! record.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::config::{ExperimentConfig, OptimizerConfig, RunMode, MAX_QUANT_BITS};
use crate::data::Dataset;
use crate::distill::{self, Regressor};
use crate::error::{QkdError, Result};
use crate::models::{NetworkSpec, NetworkState, Precision};
use crate::optim::{adam_step, sgd_step, IntervalRole, ParamKind, Parameter};
use crate::tensor::Tensor;

const EVAL_BATCH: usize = 500;

/// Label written to the `phase` column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "SS")]
    SelfStudy,
    #[serde(rename = "CS")]
    CoStudy,
    #[serde(rename = "TU")]
    Tutoring,
    /// Cross-entropy only (baseline, or full-precision pre-training).
    #[serde(rename = "BL")]
    Baseline,
    /// Frozen-teacher logit distillation outside the QKD schedule.
    #[serde(rename = "AP")]
    Apprentice,
    #[serde(rename = "AD")]
    ActivationDistill,
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Phase::SelfStudy => "SS",
            Phase::CoStudy => "CS",
            Phase::Tutoring => "TU",
            Phase::Baseline => "BL",
            Phase::Apprentice => "AP",
            Phase::ActivationDistill => "AD",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "SS" => Phase::SelfStudy,
            "CS" => Phase::CoStudy,
            "TU" => Phase::Tutoring,
            "BL" => Phase::Baseline,
            "AP" => Phase::Apprentice,
            "AD" => Phase::ActivationDistill,
            _ => return Err(QkdError::Config(format!("unknown phase '{}'", s))),
        })
    }
}

/// Top-1/top-5 accuracy in percent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub top1: f64,
    pub top5: f64,
    /// False when the task has fewer than five classes; `top5` is then 100.
    pub top5_defined: bool,
}

/// Index of the largest value; ties resolve to the lowest index.
fn rank_of_label(row: &[f64], label: usize) -> usize {
    let v = row[label];
    row.iter()
        .enumerate()
        .filter(|&(j, &x)| x > v || (x == v && j < label))
        .count()
}

/// Top-1/top-5 from a logit matrix.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<Metrics> {
    let (n, m) = match logits.shape() {
        [n, m] => (*n, *m),
        s => return Err(QkdError::Dimension(format!("logits must be [N, m], got {:?}", s))),
    };
    if n != labels.len() || n == 0 {
        return Err(QkdError::Contract(format!("{} logit rows for {} labels", n, labels.len())));
    }
    let (mut c1, mut c5) = (0usize, 0usize);
    for (row, &y) in logits.data().chunks(m).zip(labels) {
        let r = rank_of_label(row, y);
        c1 += (r == 0) as usize;
        c5 += (r < 5) as usize;
    }
    let pct = |c: usize| 100.0 * c as f64 / n as f64;
    Ok(Metrics {
        top1: pct(c1),
        top5: if m < 5 { 100.0 } else { pct(c5) },
        top5_defined: m >= 5,
    })
}

fn correct_top1(logits: &Tensor, labels: &[usize]) -> usize {
    let m = logits.shape()[1];
    logits
        .data()
        .chunks(m)
        .zip(labels)
        .filter(|(row, &y)| rank_of_label(row, y) == 0)
        .count()
}

fn eval_logits(state: &NetworkState, data: &Dataset) -> Result<Tensor> {
    if data.is_empty() {
        return Err(QkdError::Contract("cannot evaluate on an empty dataset".into()));
    }
    let m = state.spec().num_classes;
    let mut out = Vec::with_capacity(data.len() * m);
    let mut start = 0;
    while start < data.len() {
        let end = (start + EVAL_BATCH).min(data.len());
        let (x, _) = data.range(start, end)?;
        out.extend_from_slice(state.forward(&x)?.data());
        start = end;
    }
    Tensor::new(vec![data.len(), m], out)
}

/// Accuracy of `state` on `data` in its current precision mode.
pub fn evaluate(state: &NetworkState, data: &Dataset) -> Result<Metrics> {
    accuracy(&eval_logits(state, data)?, data.labels())
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub phase: Phase,
    pub mode: String,
    pub bits: u32,
    /// Running top-1 over the epoch's training minibatches.
    pub student_train_top1: f64,
    pub student_test_top1: f64,
    pub student_test_top5: f64,
    /// NaN when no teacher takes part (BL, SS-only epochs of pre-training).
    pub teacher_test_top1: f64,
    /// Epoch-mean cross-entropy of the student.
    pub loss_ce: f64,
    /// Epoch-mean distillation term of the student objective: KL at the
    /// temperature for logit distillation, the regression MSE for AD, 0 for
    /// CE-only phases.
    pub loss_kl: f64,
    /// Mean `KL(z_T || z_S)` at the temperature over the test split.
    #[serde(rename = "mean_kl_T")]
    pub mean_kl_t: f64,
    pub teacher_frozen: bool,
    pub wallclock_s: f64,
}

pub const CSV_HEADER: [&str; 13] = [
    "epoch",
    "phase",
    "mode",
    "bits",
    "student_train_top1",
    "student_test_top1",
    "student_test_top5",
    "teacher_test_top1",
    "loss_ce",
    "loss_kl",
    "mean_kl_T",
    "teacher_frozen",
    "wallclock_s",
];

/// Per-epoch history of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub mode: RunMode,
    pub bits: u32,
    pub rows: Vec<EpochRow>,
    /// Student test top-1 right after initialization (quantized S_F).
    pub initial_student_test_top1: f64,
    /// Teacher test top-1 before any teacher training.
    pub initial_teacher_test_top1: f64,
    pub top5_defined: bool,
}

impl RunRecord {
    pub fn final_student_test_top1(&self) -> f64 {
        self.rows.last().map_or(self.initial_student_test_top1, |r| r.student_test_top1)
    }

    pub fn phase_epochs(&self, phase: Phase) -> usize {
        self.rows.iter().filter(|r| r.phase == phase).count()
    }

    /// Teacher test top-1 just before and right after co-studying.
    pub fn teacher_across_co_study(&self) -> Option<(f64, f64)> {
        let first = self.rows.iter().position(|r| r.phase == Phase::CoStudy)?;
        let last = self.rows.iter().rposition(|r| r.phase == Phase::CoStudy)?;
        let before = if first == 0 {
            self.initial_teacher_test_top1
        } else {
            self.rows[first - 1].teacher_test_top1
        };
        Some((before, self.rows[last].teacher_test_top1))
    }

    /// Mean of `mean_kl_T` over the last quarter of epochs (at least one).
    pub fn final_quarter_kl(&self) -> Option<f64> {
        if self.rows.is_empty() {
            return None;
        }
        let k = (self.rows.len() / 4).max(1);
        let tail = &self.rows[self.rows.len() - k..];
        Some(tail.iter().map(|r| r.mean_kl_t).sum::<f64>() / k as f64)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_rows(&self.rows, path)
    }
}

pub fn write_rows(rows: &[EpochRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| QkdError::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.phase.label().to_string(),
            r.mode.clone(),
            r.bits.to_string(),
            r.student_train_top1.to_string(),
            r.student_test_top1.to_string(),
            r.student_test_top5.to_string(),
            r.teacher_test_top1.to_string(),
            r.loss_ce.to_string(),
            r.loss_kl.to_string(),
            r.mean_kl_t.to_string(),
            r.teacher_frozen.to_string(),
            r.wallclock_s.to_string(),
        ])?;
    }
    w.flush().map_err(|e| QkdError::io(path, e))?;
    Ok(())
}

/// Reads a record CSV back; the header must match exactly.
pub fn read_rows(path: impl AsRef<Path>) -> Result<Vec<EpochRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(QkdError::Config(format!("{}: unexpected header {:?}", path.display(), header)));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .parse::<f64>()
                .map_err(|e| QkdError::Config(format!("{}: column {}: {}", path.display(), CSV_HEADER[i], e)))
        };
        let int = |i: usize| -> Result<u64> {
            rec[i]
                .parse::<u64>()
                .map_err(|e| QkdError::Config(format!("{}: column {}: {}", path.display(), CSV_HEADER[i], e)))
        };
        rows.push(EpochRow {
            epoch: int(0)? as usize,
            phase: Phase::parse(&rec[1])?,
            mode: rec[2].to_string(),
            bits: int(3)? as u32,
            student_train_top1: num(4)?,
            student_test_top1: num(5)?,
            student_test_top5: num(6)?,
            teacher_test_top1: num(7)?,
            loss_ce: num(8)?,
            loss_kl: num(9)?,
            mean_kl_t: num(10)?,
            teacher_frozen: rec[11]
                .parse()
                .map_err(|_| QkdError::Config(format!("{}: bad teacher_frozen '{}'", path.display(), &rec[11])))?,
            wallclock_s: num(12)?,
        });
    }
    Ok(rows)
}

/// Piecewise-constant LR: `base * gamma^(milestones passed)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSchedule {
    pub base: f64,
    pub gamma: f64,
    pub milestones: Vec<usize>,
}

impl StepSchedule {
    /// Milestones at the given fractions of `len` epochs, rounded to the
    /// nearest epoch.
    pub fn at_fractions(base: f64, gamma: f64, len: usize, fractions: &[(usize, usize)]) -> Self {
        let milestones = fractions
            .iter()
            .map(|&(num, den)| (len * num + den / 2) / den)
            .filter(|&e| e > 0 && e < len)
            .collect();
        StepSchedule { base, gamma, milestones }
    }

    /// Self-study stage: drop after each third.
    pub fn self_study(base: f64, gamma: f64, len: usize) -> Self {
        Self::at_fractions(base, gamma, len, &[(1, 3), (2, 3)])
    }

    /// Main stage: drops at 80/170 and 120/170 of the way through.
    pub fn main(base: f64, gamma: f64, len: usize) -> Self {
        Self::at_fractions(base, gamma, len, &[(80, 170), (120, 170)])
    }

    /// LR during epoch `e` (0-based within the stage).
    pub fn lr(&self, e: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| e >= m).count();
        self.base * self.gamma.powi(passed as i32)
    }
}

/// SGD on weights; Adam on intervals when the network is quantized.
/// Intervals of a full-precision network do not influence its output and
/// are left untouched.
pub fn mixed_step(state: &mut NetworkState, lr: f64, opt: &OptimizerConfig) -> Result<()> {
    let quantized = state.precision() == Precision::Quantized;
    let (lr_w, lr_x) = opt.interval_lrs(lr);
    let mut weights = Vec::new();
    let mut iw = Vec::new();
    let mut ix = Vec::new();
    for p in state.params_mut() {
        match p.kind {
            ParamKind::Weight => weights.push(p),
            ParamKind::Interval(IntervalRole::Weight) => iw.push(p),
            ParamKind::Interval(IntervalRole::Activation) => ix.push(p),
        }
    }
    sgd_step(weights, lr, opt.momentum, opt.weight_decay)?;
    if quantized {
        adam_step(iw, lr_w, opt.beta1, opt.beta2, opt.eps)?;
        adam_step(ix, lr_x, opt.beta1, opt.beta2, opt.eps)?;
    }
    Ok(())
}

/// What the student learns from besides the labels, for one minibatch.
enum Guide<'r> {
    None,
    Logits(Tensor),
    Features(Tensor, &'r mut Regressor),
}

#[derive(Debug, Default, Clone, Copy)]
struct EpochStats {
    samples: usize,
    correct: usize,
    ce_sum: f64,
    distill_sum: f64,
}

impl EpochStats {
    fn add(&mut self, n: usize, correct: usize, ce: f64, distill: f64) {
        self.samples += n;
        self.correct += correct;
        self.ce_sum += ce * n as f64;
        self.distill_sum += distill * n as f64;
    }

    fn train_top1(&self) -> f64 {
        100.0 * self.correct as f64 / self.samples.max(1) as f64
    }

    fn ce(&self) -> f64 {
        self.ce_sum / self.samples.max(1) as f64
    }

    fn distill(&self) -> f64 {
        self.distill_sum / self.samples.max(1) as f64
    }
}

/// Whether `bits` selects a quantized student.
pub fn is_quantized_bits(bits: u32) -> bool {
    bits <= MAX_QUANT_BITS
}

/// Training context shared by the phases of one run: data, settings, the
/// shuffling RNG, the LR schedule of the current stage, and the record.
pub struct Session<'a> {
    cfg: &'a ExperimentConfig,
    train: &'a Dataset,
    test: &'a Dataset,
    rng: ChaCha8Rng,
    bits: u32,
    mode_label: String,
    schedule: StepSchedule,
    stage_epoch: usize,
    rows: Vec<EpochRow>,
    record_wallclock: bool,
}

impl<'a> Session<'a> {
    pub fn new(cfg: &'a ExperimentConfig, train: &'a Dataset, test: &'a Dataset, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() || test.is_empty() {
            return Err(QkdError::Config("train and test splits must be non-empty".into()));
        }
        Ok(Session {
            cfg,
            train,
            test,
            rng: ChaCha8Rng::seed_from_u64(seed),
            bits: cfg.run.bits,
            mode_label: cfg.run.mode.label().to_string(),
            schedule: StepSchedule::main(cfg.optimizer.lr, cfg.plan.lr_gamma, cfg.plan.total()),
            stage_epoch: 0,
            rows: Vec::new(),
            record_wallclock: cfg.run.record_wallclock,
        })
    }

    fn with_label(mut self, label: &str) -> Self {
        self.mode_label = label.to_string();
        self
    }

    /// Starts a new LR stage of `len` epochs at the configured base LR.
    pub fn begin_stage(&mut self, schedule: StepSchedule) {
        self.schedule = schedule;
        self.stage_epoch = 0;
    }

    pub fn rows(&self) -> &[EpochRow] {
        &self.rows
    }

    pub fn into_rows(self) -> Vec<EpochRow> {
        self.rows
    }

    fn current_lr(&self) -> f64 {
        self.schedule.lr(self.stage_epoch)
    }

    fn shuffled_batches(&mut self) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.train.len()).collect();
        idx.shuffle(&mut self.rng);
        idx.chunks(self.cfg.plan.batch_size).map(<[usize]>::to_vec).collect()
    }

    fn check_student(&self, student: &NetworkState) -> Result<()> {
        if is_quantized_bits(self.bits) {
            if student.precision() != Precision::Quantized {
                return Err(QkdError::State("student must be in quantized mode".into()));
            }
            if student.spec().bits != self.bits {
                return Err(QkdError::Config(format!(
                    "student is configured for {} bits but the run uses {}",
                    student.spec().bits,
                    self.bits
                )));
            }
        }
        Ok(())
    }

    fn check_teacher(teacher: &NetworkState) -> Result<()> {
        if teacher.precision() != Precision::FullPrecision {
            return Err(QkdError::State("teacher must run in full precision".into()));
        }
        Ok(())
    }

    /// One student update; returns (correct, ce, distillation term).
    fn student_step(
        &self,
        student: &mut NetworkState,
        x: &Tensor,
        y: &[usize],
        guide: Guide<'_>,
        lr: f64,
    ) -> Result<(usize, f64, f64)> {
        let cfg = self.cfg;
        let mut g = Graph::new();
        let fwd = student.forward_graph(&mut g, x, true)?;
        let correct = correct_top1(g.value(fwd.logits), y);
        let t = cfg.distill.temperature;
        let (loss, ce, dist, reg) = match guide {
            Guide::None => {
                let ce = distill::ce_loss(&mut g, fwd.logits, y)?;
                (ce, ce, None, None)
            }
            Guide::Logits(z_t) => {
                let k = distill::kd_loss(&mut g, fwd.logits, &z_t, y, t, cfg.distill.student_kl_weight)?;
                (k.total, k.ce, Some(k.kl), None)
            }
            Guide::Features(f_t, reg) => {
                let ce = distill::ce_loss(&mut g, fwd.logits, y)?;
                let rv = g.variable(reg.weight.value.clone());
                let l2 = distill::activation_distill_loss(&mut g, fwd.features, &f_t, rv)?;
                let total = g.add(ce, l2)?;
                (total, ce, Some(l2), Some((rv, reg)))
            }
        };
        let grads = g.backward(loss)?;
        student.zero_grads();
        student.accumulate_grads(&fwd, &grads);
        mixed_step(student, lr, &cfg.optimizer)?;
        if let Some((rv, reg)) = reg {
            reg.weight.zero_grad();
            if let Some(gr) = grads.get(rv) {
                reg.weight.grad.add_assign(gr);
            }
            let o = &cfg.optimizer;
            sgd_step(std::iter::once(&mut reg.weight), lr, o.momentum, o.weight_decay)?;
        }
        let ce_v = g.value(ce).item();
        let dist_v = dist.map_or(0.0, |d| g.value(d).item());
        Ok((correct, ce_v, dist_v))
    }

    fn finish_epoch(
        &mut self,
        phase: Phase,
        student: &NetworkState,
        teacher: Option<&NetworkState>,
        teacher_frozen: bool,
        stats: EpochStats,
        seconds: f64,
    ) -> Result<()> {
        let s_logits = eval_logits(student, self.test)?;
        let sm = accuracy(&s_logits, self.test.labels())?;
        let (t_top1, kl) = match teacher {
            Some(t) => {
                let t_logits = eval_logits(t, self.test)?;
                let tm = accuracy(&t_logits, self.test.labels())?;
                let kl = distill::kl_divergence(&t_logits, &s_logits, self.cfg.distill.temperature)?;
                (tm.top1, kl)
            }
            None => (f64::NAN, f64::NAN),
        };
        self.rows.push(EpochRow {
            epoch: self.rows.len() + 1,
            phase,
            mode: self.mode_label.clone(),
            bits: self.bits,
            student_train_top1: stats.train_top1(),
            student_test_top1: sm.top1,
            student_test_top5: sm.top5,
            teacher_test_top1: t_top1,
            loss_ce: stats.ce(),
            loss_kl: stats.distill(),
            mean_kl_t: kl,
            teacher_frozen,
            wallclock_s: if self.record_wallclock { seconds } else { 0.0 },
        });
        self.stage_epoch += 1;
        Ok(())
    }

    /// Student-only epochs against a fixed guide source. The teacher, when
    /// present, is only read.
    fn student_epochs(
        &mut self,
        phase: Phase,
        student: &mut NetworkState,
        teacher: Option<&NetworkState>,
        mut regressor: Option<&mut Regressor>,
        epochs: usize,
    ) -> Result<()> {
        self.check_student(student)?;
        if let Some(t) = teacher {
            Self::check_teacher(t)?;
        }
        for _ in 0..epochs {
            let lr = self.current_lr();
            let start = Instant::now();
            let mut stats = EpochStats::default();
            for idx in self.shuffled_batches() {
                let (x, y) = self.train.batch(&idx)?;
                let guide = match (phase, teacher, regressor.as_deref_mut()) {
                    (Phase::ActivationDistill, Some(t), Some(r)) => Guide::Features(t.forward_with_features(&x)?.1, r),
                    (Phase::Tutoring | Phase::Apprentice, Some(t), _) => Guide::Logits(t.forward(&x)?),
                    (Phase::SelfStudy | Phase::Baseline, _, _) => Guide::None,
                    _ => return Err(QkdError::State(format!("phase {} lacks its teacher", phase.label()))),
                };
                let (c, ce, d) = self.student_step(student, &x, &y, guide, lr)?;
                stats.add(idx.len(), c, ce, d);
            }
            let secs = start.elapsed().as_secs_f64();
            self.finish_epoch(phase, student, teacher, teacher.is_some(), stats, secs)?;
        }
        Ok(())
    }

    /// Cross-entropy training of the quantized student alone.
    pub fn phase_self_study(&mut self, student: &mut NetworkState, epochs: usize, teacher: Option<&NetworkState>) -> Result<()> {
        self.student_epochs(Phase::SelfStudy, student, teacher, None, epochs)
    }

    /// Cross-entropy training outside the QKD schedule (BL, SS+BL tail, pre-training).
    pub fn phase_baseline(&mut self, student: &mut NetworkState, epochs: usize, teacher: Option<&NetworkState>) -> Result<()> {
        self.student_epochs(Phase::Baseline, student, teacher, None, epochs)
    }

    /// Frozen-teacher logit distillation.
    pub fn phase_tutoring(&mut self, teacher: &NetworkState, student: &mut NetworkState, epochs: usize) -> Result<()> {
        self.student_epochs(Phase::Tutoring, student, Some(teacher), None, epochs)
    }

    /// Same update as tutoring, recorded as the AP* baseline.
    pub fn phase_apprentice(&mut self, teacher: &NetworkState, student: &mut NetworkState, epochs: usize) -> Result<()> {
        self.student_epochs(Phase::Apprentice, student, Some(teacher), None, epochs)
    }

    /// CE plus last-block featuremap regression onto a frozen teacher.
    pub fn phase_activation_distill(
        &mut self,
        teacher: &NetworkState,
        student: &mut NetworkState,
        regressor: &mut Regressor,
        epochs: usize,
    ) -> Result<()> {
        self.student_epochs(Phase::ActivationDistill, student, Some(teacher), Some(regressor), epochs)
    }

    /// Mutual training: per minibatch the teacher takes a step on its KD
    /// objective against the student's (detached) logits, then the student
    /// takes a step against the teacher's logits.
    pub fn phase_co_study(&mut self, teacher: &mut NetworkState, student: &mut NetworkState, epochs: usize) -> Result<()> {
        self.check_student(student)?;
        Self::check_teacher(teacher)?;
        let cfg = self.cfg;
        let t = cfg.distill.temperature;
        for _ in 0..epochs {
            let lr = self.current_lr();
            let start = Instant::now();
            let mut stats = EpochStats::default();
            for idx in self.shuffled_batches() {
                let (x, y) = self.train.batch(&idx)?;
                let mut gs = Graph::new();
                let fs = student.forward_graph(&mut gs, &x, true)?;
                let z_s = gs.value(fs.logits).clone();
                let correct = correct_top1(&z_s, &y);

                let mut gt = Graph::new();
                let ft = teacher.forward_graph(&mut gt, &x, true)?;
                let z_t_before = gt.value(ft.logits).clone();
                let kt = distill::kd_loss(&mut gt, ft.logits, &z_s, &y, t, cfg.distill.teacher_kl_weight)?;
                let grads_t = gt.backward(kt.total)?;
                teacher.zero_grads();
                teacher.accumulate_grads(&ft, &grads_t);
                mixed_step(teacher, lr, &cfg.optimizer)?;

                let z_t = if cfg.distill.fresh_teacher_logits {
                    teacher.forward(&x)?
                } else {
                    z_t_before
                };
                let ks = distill::kd_loss(&mut gs, fs.logits, &z_t, &y, t, cfg.distill.student_kl_weight)?;
                let grads_s = gs.backward(ks.total)?;
                student.zero_grads();
                student.accumulate_grads(&fs, &grads_s);
                mixed_step(student, lr, &cfg.optimizer)?;
                stats.add(idx.len(), correct, gs.value(ks.ce).item(), gs.value(ks.kl).item());
            }
            let secs = start.elapsed().as_secs_f64();
            self.finish_epoch(Phase::CoStudy, student, Some(teacher), false, stats, secs)?;
        }
        Ok(())
    }
}

/// Derives independent seeds for the parts of a run.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TAG_TEACHER_INIT: u64 = 1;
const TAG_STUDENT_INIT: u64 = 2;
const TAG_PRETRAIN_TEACHER: u64 = 3;
const TAG_PRETRAIN_STUDENT: u64 = 4;
const TAG_RUN: u64 = 5;
const TAG_REGRESSOR: u64 = 6;

/// Full-precision networks for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Pretrained {
    pub teacher: NetworkState,
    pub student: NetworkState,
}

fn network_spec(name: &str, train: &Dataset) -> Result<NetworkSpec> {
    let input = crate::models::InputShape::from_dims(train.sample_shape())?;
    // The bit-width is a placeholder until `init_student` picks the run's;
    // full-precision mode bypasses every quantizer.
    NetworkSpec::named(name, input, train.num_classes(), crate::models::EDGE_LAYER_BITS)
}

/// Cross-entropy training of a fresh full-precision network.
pub fn pretrain_network(
    cfg: &ExperimentConfig,
    name: &str,
    train: &Dataset,
    test: &Dataset,
    seed: u64,
) -> Result<(NetworkState, Vec<EpochRow>)> {
    let spec = network_spec(name, train)?;
    let mut net = NetworkState::build(&spec, seed)?;
    let mut pre_cfg = cfg.clone();
    pre_cfg.optimizer.lr = cfg.pretrain.lr;
    pre_cfg.run.bits = 32;
    let mut session = Session::new(&pre_cfg, train, test, derive_seed(seed, TAG_RUN))?.with_label("FP");
    session.begin_stage(StepSchedule::main(cfg.pretrain.lr, cfg.plan.lr_gamma, cfg.pretrain.epochs));
    session.phase_baseline(&mut net, cfg.pretrain.epochs, None)?;
    net.zero_grads();
    net.reset_optimizer_state();
    Ok((net, session.into_rows()))
}

/// Pre-trains the configured teacher and student.
pub fn pretrain(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset) -> Result<Pretrained> {
    let seed = cfg.run.seed;
    let (teacher, _) = pretrain_network(
        cfg,
        &cfg.run.teacher,
        train,
        test,
        derive_seed(seed, TAG_TEACHER_INIT) ^ TAG_PRETRAIN_TEACHER,
    )?;
    let (student, _) = pretrain_network(
        cfg,
        &cfg.run.student,
        train,
        test,
        derive_seed(seed, TAG_STUDENT_INIT) ^ TAG_PRETRAIN_STUDENT,
    )?;
    Ok(Pretrained { teacher, student })
}

/// Turns `S_F` into the run's starting student: target bit-width, min-max
/// intervals from the first training minibatch, quantized mode.
pub fn init_student(student_fp: &NetworkState, cfg: &ExperimentConfig, train: &Dataset) -> Result<NetworkState> {
    if student_fp.precision() != Precision::FullPrecision {
        return Err(QkdError::State("pre-trained student must be full precision".into()));
    }
    let mut s = student_fp.clone();
    s.zero_grads();
    s.reset_optimizer_state();
    s.set_ste(cfg.distill.ste);
    if is_quantized_bits(cfg.run.bits) {
        s.set_bits(cfg.run.bits)?;
        let n = cfg.plan.batch_size.min(train.len());
        let (probe, _) = train.range(0, n)?;
        s.init_intervals_minmax(&probe)?;
        s.set_precision(Precision::Quantized);
    }
    Ok(s)
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub record: RunRecord,
    pub student: NetworkState,
    pub teacher: NetworkState,
}

/// Runs one mode of the comparison from pre-trained full-precision networks.
///
/// Epoch budgets: modes with self-study spend `epochs_ss` on it and the
/// rest of the total on their main recipe; CS+TU splits its whole budget
/// as `epochs_ss + epochs_cs` co-study then `epochs_tu` tutoring; the
/// others use the full total.
pub fn run_experiment(cfg: &ExperimentConfig, pre: &Pretrained, train: &Dataset, test: &Dataset) -> Result<RunOutcome> {
    cfg.validate()?;
    let mode = cfg.run.mode;
    let plan = &cfg.plan;
    if pre.teacher.spec().name != cfg.run.teacher || pre.student.spec().name != cfg.run.student {
        return Err(QkdError::Config(format!(
            "checkpoints are '{}'/'{}' but the run expects '{}'/'{}'",
            pre.teacher.spec().name,
            pre.student.spec().name,
            cfg.run.teacher,
            cfg.run.student
        )));
    }
    if pre.teacher.precision() != Precision::FullPrecision {
        return Err(QkdError::State("pre-trained teacher must be full precision".into()));
    }
    let mut teacher = pre.teacher.clone();
    teacher.zero_grads();
    teacher.reset_optimizer_state();
    let mut student = init_student(&pre.student, cfg, train)?;

    let initial_teacher = evaluate(&teacher, test)?;
    let initial_student = evaluate(&student, test)?;

    let seed = cfg.run.seed;
    let mut session = Session::new(cfg, train, test, derive_seed(seed, TAG_RUN))?;
    let lr = cfg.optimizer.lr;
    let gamma = plan.lr_gamma;
    let total = plan.total();

    let ss_epochs = if mode.uses_self_study() { plan.epochs_ss } else { 0 };
    if ss_epochs > 0 {
        session.begin_stage(StepSchedule::self_study(lr, gamma, ss_epochs));
        session.phase_self_study(&mut student, ss_epochs, Some(&teacher))?;
        if cfg.distill.reset_moments {
            student.reset_optimizer_state();
        }
    }
    let main = total - ss_epochs;
    session.begin_stage(StepSchedule::main(lr, gamma, main));
    match mode {
        RunMode::Bl | RunMode::SsBl => session.phase_baseline(&mut student, main, Some(&teacher))?,
        RunMode::Ap | RunMode::SsAp => session.phase_apprentice(&teacher, &mut student, main)?,
        RunMode::Qkd => {
            session.phase_co_study(&mut teacher, &mut student, plan.epochs_cs)?;
            session.phase_tutoring(&teacher, &mut student, plan.epochs_tu)?;
        }
        RunMode::CsTu => {
            session.phase_co_study(&mut teacher, &mut student, plan.epochs_ss + plan.epochs_cs)?;
            session.phase_tutoring(&teacher, &mut student, plan.epochs_tu)?;
        }
        RunMode::Ad | RunMode::SsAd => {
            let cs = student_feature_width(&student, train)?;
            let ct = student_feature_width(&teacher, train)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_REGRESSOR));
            let mut reg = Regressor::new(cs, ct, &mut rng);
            session.phase_activation_distill(&teacher, &mut student, &mut reg, main)?;
        }
    }
    teacher.zero_grads();
    student.zero_grads();
    let record = RunRecord {
        mode,
        bits: cfg.run.bits,
        rows: session.into_rows(),
        initial_student_test_top1: initial_student.top1,
        initial_teacher_test_top1: initial_teacher.top1,
        top5_defined: initial_student.top5_defined,
    };
    Ok(RunOutcome { record, student, teacher })
}

fn student_feature_width(net: &NetworkState, data: &Dataset) -> Result<usize> {
    let (x, _) = data.range(0, 1)?;
    Ok(net.forward_with_features(&x)?.1.shape()[1])
}

/// The parameters of `net`, for bitwise comparisons in tests and tools.
pub fn snapshot(net: &NetworkState) -> Vec<Parameter> {
    net.params().to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticParams};

    #[test]
    fn accuracy_fixture() {
        // Sample 0: label 2 is the max. Sample 1: label 0 ties with 1 and wins
        // by index. Sample 2: label 1 ranks third.
        let z = Tensor::from_rows(&[&[0.1, 0.2, 0.9], &[0.5, 0.5, 0.0], &[0.7, 0.1, 0.3]]).unwrap();
        let m = accuracy(&z, &[2, 0, 1]).unwrap();
        assert!((m.top1 - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.top5, 100.0);
        assert!(!m.top5_defined);
        // The tied loser is not top-1.
        let m = accuracy(&z, &[2, 1, 0]).unwrap();
        assert!((m.top1 - 200.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn constant_logits_hit_class_zero_only() {
        let z = Tensor::zeros(&[20, 10]);
        let labels: Vec<usize> = (0..20).map(|i| i % 10).collect();
        let m = accuracy(&z, &labels).unwrap();
        assert_eq!(m.top1, 10.0);
        assert_eq!(m.top5, 50.0);
    }

    #[test]
    fn schedules() {
        let s = StepSchedule::self_study(1.0, 0.1, 6);
        assert_eq!(s.milestones, vec![2, 4]);
        assert_eq!(s.lr(1), 1.0);
        assert!((s.lr(3) - 0.1).abs() < 1e-15);
        let m = StepSchedule::main(1.0, 0.1, 170);
        assert_eq!(m.milestones, vec![80, 120]);
        let m = StepSchedule::main(1.0, 0.1, 34);
        assert_eq!(m.milestones, vec![16, 24]);
        assert!(StepSchedule::main(1.0, 0.1, 1).milestones.is_empty());
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, 1), derive_seed(1, 2));
        assert_ne!(derive_seed(1, 1), derive_seed(2, 1));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![EpochRow {
            epoch: 1,
            phase: Phase::CoStudy,
            mode: "QKD".into(),
            bits: 2,
            student_train_top1: 50.25,
            student_test_top1: 1.0 / 3.0,
            student_test_top5: 99.0,
            teacher_test_top1: f64::NAN,
            loss_ce: 0.1,
            loss_kl: 1e-300,
            mean_kl_t: 0.7,
            teacher_frozen: false,
            wallclock_s: 0.0,
        }];
        let p = dir.path().join("r.csv");
        write_rows(&rows, &p).unwrap();
        let back = read_rows(&p).unwrap();
        assert_eq!(back[0].student_test_top1, rows[0].student_test_top1);
        assert!(back[0].teacher_test_top1.is_nan());
        assert_eq!(back[0].loss_kl, 1e-300);
        assert_eq!(back[0].phase, Phase::CoStudy);
    }

    fn tiny() -> (ExperimentConfig, Dataset, Dataset) {
        let mut cfg = ExperimentConfig::default();
        cfg.plan = crate::config::PhasePlan {
            epochs_ss: 1,
            epochs_cs: 1,
            epochs_tu: 1,
            batch_size: 32,
            lr_gamma: 0.1,
        };
        cfg.pretrain.epochs = 1;
        let p = SyntheticParams {
            train_samples: 128,
            test_samples: 64,
            ..SyntheticParams::default()
        };
        let (train, test) = gen_synthetic(&p, 3).unwrap();
        (cfg, train, test)
    }

    #[test]
    fn every_mode_runs_and_labels_phases() {
        let (mut cfg, train, test) = tiny();
        let pre = pretrain(&cfg, &train, &test).unwrap();
        for mode in RunMode::ALL {
            cfg.run.mode = mode;
            let out = run_experiment(&cfg, &pre, &train, &test).unwrap();
            let r = &out.record;
            assert_eq!(r.rows.len(), 3, "{}", mode);
            assert_eq!(r.phase_epochs(Phase::SelfStudy), mode.uses_self_study() as usize, "{}", mode);
            let teacher_changed = out.teacher != pre.teacher;
            assert_eq!(teacher_changed, matches!(mode, RunMode::Qkd | RunMode::CsTu), "{}", mode);
            assert!(r.rows.iter().all(|row| row.mode == mode.label()));
        }
    }

    #[test]
    fn quantized_student_needs_matching_bits() {
        let (cfg, train, test) = tiny();
        let pre = pretrain(&cfg, &train, &test).unwrap();
        let mut student = init_student(&pre.student, &cfg, &train).unwrap();
        let mut other = cfg.clone();
        other.run.bits = 4;
        let mut s = Session::new(&other, &train, &test, 0).unwrap();
        let mut teacher = pre.teacher.clone();
        let err = s.phase_co_study(&mut teacher, &mut student, 1).unwrap_err();
        assert!(matches!(err, QkdError::Config(_)), "{:?}", err);
    }
}
