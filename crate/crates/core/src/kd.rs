//! Teacher training with per-epoch checkpoints and student training with
//! optional (converged or epoch-synchronised) embedding distillation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::io::config::parse_config;
use crate::io::{load_checkpoint, read_file, save_checkpoint, write_atomic, Dataset, NamedArrays};
use crate::losses::{arcface_loss, combined_loss, embed_mse, ArcFaceHead, KdMode, LossConfig};
use crate::net::{build_network, Model, VariantSpec};
use crate::optim::Sgd;
use crate::param::{Builder, Ctx, Mode, ParamGroup};
use crate::scalar::Real;
use crate::schedule::{scaled_milestones, step_lr};
use crate::search_space::Genotype;
use crate::tensor::Tensor;

pub const MILESTONE_FACTOR: f64 = 0.1;
pub const MOMENTUM: f64 = 0.9;
pub const WEIGHT_DECAY: f64 = 5e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSchedule {
    pub total_iterations: usize,
    pub steps_per_epoch: usize,
    pub lr_init: f64,
    pub milestones: Vec<usize>,
    pub milestone_factor: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl TrainSchedule {
    /// `epochs` passes over `n_samples` with the reference milestone shape.
    pub fn for_epochs(epochs: usize, n_samples: usize, batch_size: usize, lr_init: f64, seed: u64) -> Result<Self> {
        if batch_size == 0 || n_samples < batch_size {
            return Err(Error::invalid(format!(
                "batch size {batch_size} does not fit {n_samples} samples"
            )));
        }
        let steps_per_epoch = n_samples / batch_size;
        let total_iterations = epochs * steps_per_epoch;
        let s = Self {
            total_iterations,
            steps_per_epoch,
            lr_init,
            milestones: scaled_milestones(total_iterations),
            milestone_factor: MILESTONE_FACTOR,
            batch_size,
            momentum: MOMENTUM,
            weight_decay: WEIGHT_DECAY,
            seed,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps_per_epoch == 0 || self.total_iterations == 0 || self.total_iterations % self.steps_per_epoch != 0 {
            return Err(Error::invalid(format!(
                "{} iterations is not a whole number of {}-step epochs",
                self.total_iterations, self.steps_per_epoch
            )));
        }
        if !(self.lr_init > 0.0) || !self.lr_init.is_finite() {
            return Err(Error::invalid(format!("initial learning rate must be positive, got {}", self.lr_init)));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("milestones must be strictly increasing"));
        }
        if self.milestones.last().is_some_and(|&m| m >= self.total_iterations) {
            return Err(Error::invalid("milestones must fall before the last iteration"));
        }
        Ok(())
    }

    pub fn epochs(&self) -> usize {
        self.total_iterations / self.steps_per_epoch
    }

    pub fn lr(&self, iteration: usize) -> f64 {
        step_lr(iteration, self.lr_init, &self.milestones, self.milestone_factor)
    }
}

/// Everything needed to rebuild a trained network from a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelArch {
    pub variant: VariantSpec,
    pub genotype: Genotype,
    pub classes: usize,
    pub scale: f64,
    pub margin: f64,
}

impl ModelArch {
    /// `key = value` lines; the genotype is kept in its own file.
    pub fn to_text(&self) -> String {
        let v = &self.variant;
        let [a, b, c] = v.n_normal_per_stage;
        format!(
            "variant = {}\nstem_channels = {}\nnormal_cells = {a}:{b}:{c}\nembedding_dim = {}\ninput_size = {}\nhead_width = {}\nclasses = {}\nscale = {}\nmargin = {}\n",
            v.name, v.stem_channels, v.embedding_dim, v.input_size, v.head_width, self.classes, self.scale, self.margin
        )
    }

    pub fn from_text(text: &str, genotype: Genotype) -> Result<Self> {
        let kv = parse_config(text)?;
        let get = |k: &str| -> Result<&str> {
            kv.iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::invalid(format!("architecture file lacks {k:?}")))
        };
        fn num<N: std::str::FromStr>(k: &str, v: &str) -> Result<N> {
            v.parse().map_err(|_| Error::invalid(format!("bad value {v:?} for {k:?}")))
        }
        let counts: Vec<usize> = get("normal-cells")?
            .split(':')
            .map(|s| num("normal-cells", s))
            .collect::<Result<_>>()?;
        let counts: [usize; 3] = counts
            .try_into()
            .map_err(|_| Error::invalid("normal-cells needs three counts"))?;
        let mut variant = VariantSpec::custom(
            num("stem-channels", get("stem-channels")?)?,
            counts,
            num("embedding-dim", get("embedding-dim")?)?,
            num("input-size", get("input-size")?)?,
        )
        .with_head_width(num("head-width", get("head-width")?)?);
        variant.name = get("variant")?.to_string();
        Ok(Self {
            variant,
            genotype,
            classes: num("classes", get("classes")?)?,
            scale: num("scale", get("scale")?)?,
            margin: num("margin", get("margin")?)?,
        })
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join(format!("{stem}.arch")), self.to_text().as_bytes())?;
        write_atomic(&dir.join(format!("{stem}.genotype")), self.genotype.to_string().as_bytes())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let text = |p: PathBuf| -> Result<String> {
            String::from_utf8(read_file(&p)?).map_err(|_| Error::invalid(format!("{} is not UTF-8", p.display())))
        };
        let genotype: Genotype = text(dir.join(format!("{stem}.genotype")))?.parse()?;
        Self::from_text(&text(dir.join(format!("{stem}.arch")))?, genotype)
    }
}

/// An embedding network with its margin-softmax head. Both share one store.
#[derive(Clone, Debug)]
pub struct FaceModel<T> {
    pub model: Model<T>,
    pub head: ArcFaceHead,
    pub arch: ModelArch,
}

impl<T: Real> FaceModel<T> {
    pub fn new(arch: ModelArch, seed: u64) -> Result<Self> {
        let mut model = build_network::<T>(&arch.genotype, &arch.variant, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa2cf_ace0);
        let mut b = Builder::new(&mut model.store, &mut rng);
        let head = b.scope("arcface", |b| {
            ArcFaceHead::build(b, arch.classes, arch.variant.embedding_dim, arch.scale, arch.margin)
        })?;
        Ok(Self { model, head, arch })
    }

    pub fn embedding_dim(&self) -> usize {
        self.arch.variant.embedding_dim
    }

    pub fn embed(&mut self, x: Tensor<T>) -> Result<Tensor<T>> {
        self.model.embed(x)
    }

    pub fn to_arrays(&self) -> NamedArrays {
        self.model
            .store
            .named_arrays()
            .into_iter()
            .map(|(n, t)| (n, t.cast::<f32>()))
            .collect()
    }

    pub fn load_arrays(&mut self, arrays: &NamedArrays) -> Result<()> {
        let cast: Vec<(String, Tensor<T>)> = arrays.iter().map(|(n, t)| (n.clone(), t.cast::<T>())).collect();
        self.model.store.load_named(&cast)
    }

    pub fn from_checkpoint(arch: ModelArch, path: &Path) -> Result<Self> {
        let mut m = Self::new(arch, 0)?;
        m.load_arrays(&load_checkpoint(path)?)?;
        Ok(m)
    }
}

/// Per-epoch teacher checkpoints, epochs numbered from 1.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherTimeline {
    pub dir: PathBuf,
    pub entries: Vec<(usize, PathBuf)>,
}

pub const TEACHER_STEM: &str = "teacher";

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:03}.pktn")
}

impl TeacherTimeline {
    /// Scans `dir` for `epoch_NNN.pktn` and checks the epochs run 1..=n and
    /// every file decodes.
    pub fn open(dir: &Path) -> Result<Self> {
        let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::new();
        for ent in rd {
            let ent = ent.map_err(|e| Error::io(dir, e))?;
            let name = ent.file_name().to_string_lossy().into_owned();
            if let Some(num) = name.strip_prefix("epoch_").and_then(|s| s.strip_suffix(".pktn")) {
                let e: usize = num
                    .parse()
                    .map_err(|_| Error::invalid(format!("unexpected checkpoint name {name:?}")))?;
                entries.push((e, ent.path()));
            }
        }
        entries.sort();
        let t = Self {
            dir: dir.to_path_buf(),
            entries,
        };
        t.validate()?;
        for (_, p) in &t.entries {
            load_checkpoint(p)?;
        }
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::invalid(format!("no teacher checkpoints in {}", self.dir.display())));
        }
        for (i, (e, _)) in self.entries.iter().enumerate() {
            if *e != i + 1 {
                return Err(Error::invalid(format!("teacher epochs are not contiguous from 1: found {e} at position {}", i + 1)));
            }
        }
        Ok(())
    }

    pub fn last_epoch(&self) -> usize {
        self.entries.len()
    }

    pub fn converged(&self) -> (usize, &Path) {
        let (e, p) = self.entries.last().expect("validated: non-empty");
        (*e, p)
    }

    pub fn arch(&self) -> Result<ModelArch> {
        ModelArch::load(&self.dir, TEACHER_STEM)
    }
}

/// The checkpoint the student is distilled from during epoch `e`.
pub fn teacher_for_epoch(timeline: &TeacherTimeline, e: usize, mode: KdMode) -> Result<(usize, &Path)> {
    match mode {
        KdMode::Converged => Ok(timeline.converged()),
        KdMode::MultiStep => {
            if e == 0 || e > timeline.last_epoch() {
                return Err(Error::invalid(format!(
                    "epoch {e} has no teacher checkpoint (timeline covers 1..={})",
                    timeline.last_epoch()
                )));
            }
            let (ep, p) = &timeline.entries[e - 1];
            Ok((*ep, p))
        }
        KdMode::None => Err(Error::invalid("no teacher is used without distillation")),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub iteration: usize,
    pub epoch: usize,
    pub arc_loss: f64,
    pub mse_loss: Option<f64>,
    pub lr: f64,
    pub teacher_epoch_used: Option<usize>,
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut s = String::from("iteration,epoch,arc_loss,mse_loss,lr,teacher_epoch_used\n");
    for r in rows {
        let opt = |v: Option<String>| v.unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.iteration,
            r.epoch,
            r.arc_loss,
            opt(r.mse_loss.map(|m| m.to_string())),
            r.lr,
            opt(r.teacher_epoch_used.map(|e| e.to_string()))
        );
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub arc_loss: f64,
    pub mse_loss: Option<f64>,
}

/// Mean losses per epoch.
pub fn epoch_means(rows: &[HistoryRow]) -> Vec<EpochSummary> {
    let mut out: Vec<(usize, f64, f64, usize)> = Vec::new();
    for r in rows {
        match out.last_mut() {
            Some(last) if last.0 == r.epoch => {
                last.1 += r.arc_loss;
                last.2 += r.mse_loss.unwrap_or(0.0);
                last.3 += 1;
            }
            _ => out.push((r.epoch, r.arc_loss, r.mse_loss.unwrap_or(0.0), 1)),
        }
    }
    let has_mse = rows.iter().any(|r| r.mse_loss.is_some());
    out.into_iter()
        .map(|(epoch, a, m, n)| EpochSummary {
            epoch,
            arc_loss: a / n as f64,
            mse_loss: has_mse.then(|| m / n as f64),
        })
        .collect()
}

/// Loads teacher checkpoints on demand, keeping the current one.
struct TeacherSource<'a, T> {
    timeline: &'a TeacherTimeline,
    mode: KdMode,
    arch: ModelArch,
    current: Option<(usize, FaceModel<T>)>,
}

impl<T: Real> TeacherSource<'_, T> {
    fn for_epoch(&mut self, e: usize) -> Result<(usize, &mut FaceModel<T>)> {
        let (used, path) = teacher_for_epoch(self.timeline, e, self.mode)?;
        if self.current.as_ref().map(|c| c.0) != Some(used) {
            let m = FaceModel::from_checkpoint(self.arch.clone(), path)?;
            self.current = Some((used, m));
        }
        let (_, m) = self.current.as_mut().expect("just loaded");
        Ok((used, m))
    }
}

fn fit<T: Real>(
    model: &mut FaceModel<T>,
    data: &Dataset,
    schedule: &TrainSchedule,
    loss_cfg: &LossConfig,
    mut teacher: Option<TeacherSource<'_, T>>,
    mut after_epoch: impl FnMut(usize, &FaceModel<T>) -> Result<()>,
) -> Result<Vec<HistoryRow>> {
    schedule.validate()?;
    if data.len() < schedule.batch_size {
        return Err(Error::invalid("dataset smaller than one batch"));
    }
    if data.classes != model.arch.classes {
        return Err(Error::invalid(format!(
            "dataset has {} classes, model head {}",
            data.classes, model.arch.classes
        )));
    }
    let sgd = Sgd::new(schedule.momentum, schedule.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(schedule.total_iterations);
    let mut iteration = 0;
    for epoch in 1..=schedule.epochs() {
        order.shuffle(&mut rng);
        for s in 0..schedule.steps_per_epoch {
            let idx = &order[s * schedule.batch_size..(s + 1) * schedule.batch_size];
            let flips: Vec<bool> = idx.iter().map(|_| rng.random_bool(0.5)).collect();
            let (x, labels) = data.batch::<T>(idx, Some(&flips))?;
            let target = match teacher.as_mut() {
                Some(src) => {
                    let (used, t) = src.for_epoch(epoch)?;
                    Some((used, t.embed(x.clone())?))
                }
                None => None,
            };
            let lr = schedule.lr(iteration);
            let tape = Tape::new();
            let (arc, mse, total) = {
                let mut ctx = Ctx::new(&tape, &mut model.model.store, Mode::Train, &[ParamGroup::Weights]);
                let xv = tape.constant(x);
                let emb = model.model.net.forward(&mut ctx, xv)?;
                let arc = arcface_loss(&mut ctx, emb, &labels, &model.head)?;
                let mse = target.as_ref().map(|(_, t)| embed_mse(emb, t)).transpose()?;
                let total = combined_loss(arc, mse, loss_cfg)?;
                ctx.commit_stats();
                (arc.item().as_f64(), mse.map(|m| m.item().as_f64()), total)
            };
            if !total.item().as_f64().is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss at iteration {iteration} (epoch {epoch})"
                )));
            }
            let grads = tape.backward(total)?;
            model.model.store.zero_grad();
            model.model.store.accumulate(&tape, &grads);
            sgd.step(&mut model.model.store, ParamGroup::Weights, lr)?;
            history.push(HistoryRow {
                iteration,
                epoch,
                arc_loss: arc,
                mse_loss: mse,
                lr,
                teacher_epoch_used: target.map(|(e, _)| e),
            });
            iteration += 1;
        }
        after_epoch(epoch, model)?;
    }
    model.model.store.zero_grad();
    Ok(history)
}

#[derive(Clone, Debug)]
pub struct TeacherRun {
    pub timeline: TeacherTimeline,
    pub history: Vec<HistoryRow>,
}

/// Trains with the margin loss alone and writes `epoch_NNN.pktn` after every
/// epoch, plus the architecture files, into `dir`.
pub fn train_teacher<T: Real>(
    teacher: &mut FaceModel<T>,
    data: &Dataset,
    schedule: &TrainSchedule,
    dir: &Path,
) -> Result<TeacherRun> {
    teacher.arch.save(dir, TEACHER_STEM)?;
    let mut entries = Vec::new();
    let total = schedule.epochs();
    let history = fit(teacher, data, schedule, &LossConfig::new(0.0, KdMode::None)?, None, |epoch, m| {
        let path = dir.join(epoch_checkpoint_name(epoch));
        save_checkpoint(&m.to_arrays(), &path).map_err(|e| {
            Error::invalid(format!(
                "teacher checkpoint for epoch {epoch} failed after {} of {total} were written: {e}",
                entries.len()
            ))
        })?;
        entries.push((epoch, path));
        Ok(())
    })?;
    let timeline = TeacherTimeline {
        dir: dir.to_path_buf(),
        entries,
    };
    timeline.validate()?;
    Ok(TeacherRun { timeline, history })
}

/// Trains the student; with distillation the teacher for each epoch is
/// chosen by [`teacher_for_epoch`] and evaluated with frozen statistics.
pub fn train_student<T: Real>(
    student: &mut FaceModel<T>,
    data: &Dataset,
    schedule: &TrainSchedule,
    loss_cfg: &LossConfig,
    timeline: Option<&TeacherTimeline>,
) -> Result<Vec<HistoryRow>> {
    let teacher = match loss_cfg.kd_mode {
        KdMode::None => None,
        mode => {
            let timeline = timeline.ok_or_else(|| Error::invalid(format!("kd mode {mode} needs a teacher timeline")))?;
            timeline.validate()?;
            let arch = timeline.arch()?;
            if arch.variant.embedding_dim != student.embedding_dim() {
                return Err(Error::invalid(format!(
                    "teacher embeds into {} dimensions, student into {}",
                    arch.variant.embedding_dim,
                    student.embedding_dim()
                )));
            }
            if mode == KdMode::MultiStep && timeline.last_epoch() < schedule.epochs() {
                return Err(Error::invalid(format!(
                    "multi-step distillation over {} epochs needs as many teacher checkpoints, found {}",
                    schedule.epochs(),
                    timeline.last_epoch()
                )));
            }
            Some(TeacherSource {
                timeline,
                mode,
                arch,
                current: None,
            })
        }
    };
    fit(student, data, schedule, loss_cfg, teacher, |_, _| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn timeline(n: usize) -> TeacherTimeline {
        TeacherTimeline {
            dir: PathBuf::from("t"),
            entries: (1..=n).map(|e| (e, PathBuf::from(epoch_checkpoint_name(e)))).collect(),
        }
    }

    #[test]
    fn teacher_selection() {
        let t = timeline(5);
        assert_eq!(teacher_for_epoch(&t, 2, KdMode::MultiStep).unwrap().0, 2);
        assert_eq!(teacher_for_epoch(&t, 2, KdMode::MultiStep).unwrap().1, Path::new("epoch_002.pktn"));
        for e in 1..=7 {
            assert_eq!(teacher_for_epoch(&t, e, KdMode::Converged).unwrap().0, 5);
        }
        assert!(teacher_for_epoch(&t, 6, KdMode::MultiStep).is_err());
        assert!(teacher_for_epoch(&t, 0, KdMode::MultiStep).is_err());
    }

    #[test]
    fn schedule_shape() {
        let s = TrainSchedule::for_epochs(5, 590, 10, 0.1, 0).unwrap();
        assert_eq!(s.total_iterations, 295);
        assert_eq!(s.milestones, vec![80, 140, 210, 280]);
        assert!((s.lr(0) - 0.1).abs() < 1e-15);
        assert!((s.lr(80) - 0.01).abs() < 1e-15);
        assert!((s.lr(150) - 1e-3).abs() < 1e-15);
        assert!((s.lr(294) - 1e-5).abs() < 1e-18);
        let bad = TrainSchedule {
            milestones: vec![5, 5],
            ..s
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn arch_text_roundtrip() {
        let a = ModelArch {
            variant: VariantSpec::custom(8, [1, 2, 1], 16, 32).with_head_width(32),
            genotype: Genotype::pocketnet(),
            classes: 10,
            scale: 64.0,
            margin: 0.5,
        };
        assert_eq!(ModelArch::from_text(&a.to_text(), a.genotype.clone()).unwrap(), a);
    }

    #[test]
    fn epoch_means_group_rows() {
        let row = |it, epoch, arc| HistoryRow {
            iteration: it,
            epoch,
            arc_loss: arc,
            mse_loss: None,
            lr: 0.1,
            teacher_epoch_used: None,
        };
        let m = epoch_means(&[row(0, 1, 2.0), row(1, 1, 4.0), row(2, 2, 1.0)]);
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].arc_loss, 3.0);
        assert_eq!(m[1].mse_loss, None);
        let csv = history_csv(&[row(0, 1, 2.0)]);
        assert_eq!(csv.lines().nth(1).unwrap(), "0,1,2,,0.1,");
    }
}
