//! Bilevel architecture search and genotype derivation.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{softmax_row, Tape, Var};
use crate::error::{Error, Result};
use crate::io::Dataset;
use crate::optim::{Adam, Sgd};
use crate::param::{BnIds, Builder, Ctx, Mode, ParamGroup, ParamId, ParamStore};
use crate::scalar::Real;
use crate::schedule::cosine_lr;
use crate::search_space::{AlphaTable, Cell, CellDims, CellKind, CellTemplate, Genotype, NodeInput, OpKind};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SearchConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub w_lr_max: f64,
    pub w_lr_min: f64,
    pub w_momentum: f64,
    pub w_weight_decay: f64,
    pub alpha_lr: f64,
    pub alpha_betas: (f64, f64),
    pub alpha_weight_decay: f64,
    pub init_channels: usize,
    pub n_cells: usize,
    pub n_intermediate: usize,
    pub candidates: Vec<OpKind>,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 128,
            w_lr_max: 0.1,
            w_lr_min: 0.004,
            w_momentum: 0.9,
            w_weight_decay: 3e-4,
            alpha_lr: 0.0012,
            alpha_betas: (0.5, 0.999),
            alpha_weight_decay: 1e-3,
            init_channels: 64,
            n_cells: 8,
            n_intermediate: 4,
            candidates: OpKind::ALL.to_vec(),
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("w_lr_max", self.w_lr_max),
            ("w_lr_min", self.w_lr_min),
            ("alpha_lr", self.alpha_lr),
        ];
        for (name, v) in rates {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.w_lr_min < self.w_lr_max) {
            return Err(Error::invalid(format!(
                "w_lr_min {} must be below w_lr_max {}",
                self.w_lr_min, self.w_lr_max
            )));
        }
        if self.batch_size == 0 || self.init_channels == 0 || self.n_cells == 0 {
            return Err(Error::invalid("batch size, channels and cell count must be positive"));
        }
        if self.init_channels % self.n_intermediate != 0 {
            return Err(Error::invalid(format!(
                "init_channels {} must be divisible by {} intermediate nodes",
                self.init_channels, self.n_intermediate
            )));
        }
        AlphaTable::zeros(self.n_intermediate, self.candidates.clone())?;
        Ok(())
    }

    /// Indices of reduction cells: a third and two thirds of the way in.
    pub fn reduction_cells(&self) -> Vec<usize> {
        if self.n_cells < 3 {
            Vec::new()
        } else {
            vec![self.n_cells / 3, 2 * self.n_cells / 3]
        }
    }
}

/// Two disjoint labelled halves: weights train on one, alphas on the other.
#[derive(Clone, Debug)]
pub struct SplitDataset {
    pub train: Dataset,
    pub val: Dataset,
}

impl SplitDataset {
    pub fn new(train: Dataset, val: Dataset) -> Result<Self> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::invalid("both halves of the search split must be non-empty"));
        }
        Ok(Self { train, val })
    }

    /// Alternating samples go to each half.
    pub fn from_dataset(d: &Dataset) -> Result<Self> {
        let (a, b) = d.split_halves()?;
        Self::new(a, b)
    }
}

#[derive(Clone, Debug)]
pub struct SearchNetwork {
    pub classes: usize,
    pub candidates: Vec<OpKind>,
    pub n_intermediate: usize,
    stem_conv: ParamId,
    stem_bn: BnIds,
    pub cells: Vec<Cell>,
    fc_weight: ParamId,
    fc_bias: ParamId,
    pub alpha_normal: Vec<ParamId>,
    pub alpha_reduce: Vec<ParamId>,
}

/// Supernet structure with its parameters (weights and alphas).
#[derive(Clone, Debug)]
pub struct Supernet<T> {
    pub net: SearchNetwork,
    pub store: ParamStore<T>,
}

impl<T: Real> Supernet<T> {
    pub fn new(cfg: &SearchConfig, classes: usize) -> Result<Self> {
        cfg.validate()?;
        if classes < 2 {
            return Err(Error::invalid("search needs at least two classes"));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let n_edges = crate::search_space::edge_count(cfg.n_intermediate);
        let k = cfg.candidates.len();
        let (alpha_normal, alpha_reduce) = b.with_group(ParamGroup::Arch, |b| -> Result<_> {
            let mut mk = |label: &str| -> Result<Vec<ParamId>> {
                (0..n_edges)
                    .map(|e| {
                        let t = Tensor::randn(&[k], 1e-3, b.rng)?;
                        b.tensor(&format!("alpha.{label}.{e}"), t)
                    })
                    .collect()
            };
            Ok((mk("normal")?, mk("reduce")?))
        })?;

        let c0 = cfg.init_channels;
        let stem_conv = b.scope("stem", |b| b.conv("conv", 3, c0, 3, 1))?;
        let stem_bn = b.scope("stem", |b| b.bn("bn", c0))?;
        let reductions = cfg.reduction_cells();
        let mut cells = Vec::with_capacity(cfg.n_cells);
        let (mut c_pp, mut c_p, mut c_cur) = (c0, c0, c0);
        let mut reduction_prev = false;
        for i in 0..cfg.n_cells {
            let kind = if reductions.contains(&i) {
                c_cur *= 2;
                CellKind::Reduction
            } else {
                CellKind::Normal
            };
            let template = CellTemplate::new(cfg.n_intermediate, kind)?;
            let dims = CellDims {
                c_prev_prev: c_pp,
                c_prev: c_p,
                c_out: c_cur,
                reduction_prev,
            };
            let cell = b.scope(format!("cells.{i}"), |b| Cell::supernet(b, template, &cfg.candidates, dims))?;
            c_pp = c_p;
            c_p = cell.c_out();
            reduction_prev = kind.is_reduction();
            cells.push(cell);
        }
        let std = (1.0 / c_p as f64).sqrt();
        let fc_weight = b.scope("classifier", |b| -> Result<ParamId> {
            let w = Tensor::randn(&[classes, c_p], std, b.rng)?;
            b.tensor("weight", w)
        })?;
        let fc_bias = b.scope("classifier", |b| b.tensor("bias", Tensor::zeros(&[classes])?))?;
        Ok(Self {
            net: SearchNetwork {
                classes,
                candidates: cfg.candidates.clone(),
                n_intermediate: cfg.n_intermediate,
                stem_conv,
                stem_bn,
                cells,
                fc_weight,
                fc_bias,
                alpha_normal,
                alpha_reduce,
            },
            store,
        })
    }

    pub fn alphas(&self) -> AlphaTable {
        let read = |ids: &[ParamId]| -> Vec<Vec<f64>> {
            ids.iter()
                .map(|&id| self.store.param(id).value.data().iter().map(|v| v.as_f64()).collect())
                .collect()
        };
        AlphaTable {
            n_intermediate: self.net.n_intermediate,
            candidates: self.net.candidates.clone(),
            normal: read(&self.net.alpha_normal),
            reduce: read(&self.net.alpha_reduce),
        }
    }

    pub fn set_alphas(&mut self, table: &AlphaTable) -> Result<()> {
        if table.candidates != self.net.candidates || table.n_intermediate != self.net.n_intermediate {
            return Err(Error::invalid("alpha table does not match the supernet layout"));
        }
        table.validate()?;
        for (ids, rows) in [(&self.net.alpha_normal, &table.normal), (&self.net.alpha_reduce, &table.reduce)] {
            for (&id, row) in ids.iter().zip(rows) {
                for (d, &v) in self.store.param_mut(id).value.data_mut().iter_mut().zip(row) {
                    *d = T::lit(v);
                }
            }
        }
        Ok(())
    }

    /// Mean cross-entropy of one batch, traced with the given trainable group.
    pub fn loss<'t>(&mut self, tape: &'t Tape<T>, x: Tensor<T>, labels: &[usize], trainable: ParamGroup) -> Result<Var<'t, T>> {
        let mut ctx = Ctx::new(tape, &mut self.store, Mode::Train, &[trainable]);
        let xv = tape.constant(x);
        let logits = self.net.forward(&mut ctx, xv)?;
        ctx.commit_stats();
        logits.cross_entropy(labels)
    }
}

impl SearchNetwork {
    pub fn forward<'t, T: Real>(&self, ctx: &mut Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let an: Vec<_> = self.alpha_normal.iter().map(|&id| ctx.param(id)).collect();
        let ar: Vec<_> = self.alpha_reduce.iter().map(|&id| ctx.param(id)).collect();
        let s = x.conv2d(ctx.param(self.stem_conv), 2, 1, 1)?;
        let s = ctx.batch_norm(s, &self.stem_bn)?;
        let (mut s0, mut s1) = (s, s);
        for cell in &self.cells {
            let alphas = if cell.template.kind.is_reduction() { &ar } else { &an };
            let y = cell.forward(ctx, s0, s1, Some(alphas))?;
            s0 = s1;
            s1 = y;
        }
        let pooled = s1.global_avg_pool()?;
        pooled.matmul_nt(ctx.param(self.fc_weight))?.add_bias(ctx.param(self.fc_bias))
    }
}

/// Rates used by one bilevel step; a zero rate skips that update.
#[derive(Clone, Copy, Debug)]
pub struct StepRates {
    pub w_lr: f64,
    pub alpha_lr: f64,
}

/// One alternating update: an Adam step on the alphas against the
/// validation batch (weights frozen), then a momentum-SGD step on the
/// weights against the training batch (alphas frozen). Returns both losses
/// as measured before their updates.
pub fn bilevel_step<T: Real>(
    net: &mut Supernet<T>,
    train: (Tensor<T>, &[usize]),
    val: (Tensor<T>, &[usize]),
    rates: StepRates,
    sgd: &Sgd,
    adam: &mut Adam<T>,
) -> Result<(f64, f64)> {
    net.store.zero_grad();
    let val_loss = {
        let tape = Tape::new();
        let loss = net.loss(&tape, val.0, val.1, ParamGroup::Arch)?;
        let v = loss.item().as_f64();
        if !v.is_finite() {
            return Err(Error::Numerical(format!("validation loss is {v}")));
        }
        let g = tape.backward(loss)?;
        net.store.accumulate(&tape, &g);
        v
    };
    if rates.alpha_lr > 0.0 {
        adam.step(&mut net.store, ParamGroup::Arch, rates.alpha_lr)?;
    }
    net.store.zero_grad();
    let train_loss = {
        let tape = Tape::new();
        let loss = net.loss(&tape, train.0, train.1, ParamGroup::Weights)?;
        let v = loss.item().as_f64();
        if !v.is_finite() {
            return Err(Error::Numerical(format!("training loss is {v}")));
        }
        let g = tape.backward(loss)?;
        net.store.accumulate(&tape, &g);
        v
    };
    if rates.w_lr > 0.0 {
        sgd.step(&mut net.store, ParamGroup::Weights, rates.w_lr)?;
    }
    net.store.zero_grad();
    Ok((train_loss, val_loss))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub w_lr: f64,
}

pub fn history_csv(history: &[SearchEpoch]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,w_lr\n");
    for h in history {
        let _ = writeln!(s, "{},{},{},{}", h.epoch, h.train_loss, h.val_loss, h.w_lr);
    }
    s
}

pub struct SearchOutcome<T> {
    pub supernet: Supernet<T>,
    pub alphas: AlphaTable,
    pub history: Vec<SearchEpoch>,
}

/// Runs `epochs × ⌊|train| / batch⌋` bilevel steps with a per-epoch
/// cosine-annealed weight learning rate.
pub fn search_run<T: Real>(data: &SplitDataset, cfg: &SearchConfig) -> Result<SearchOutcome<T>> {
    cfg.validate()?;
    if data.train.classes != data.val.classes {
        return Err(Error::invalid("search halves disagree on the class count"));
    }
    let steps = data.train.len() / cfg.batch_size;
    if steps == 0 || data.val.len() < cfg.batch_size {
        return Err(Error::invalid(format!(
            "batch size {} exceeds a search half ({} train, {} val samples)",
            cfg.batch_size,
            data.train.len(),
            data.val.len()
        )));
    }
    let mut net = Supernet::<T>::new(cfg, data.train.classes)?;
    let sgd = Sgd::new(cfg.w_momentum, cfg.w_weight_decay);
    let mut adam = Adam::new(cfg.alpha_betas.0, cfg.alpha_betas.1, cfg.alpha_weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0001);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut train_idx: Vec<usize> = (0..data.train.len()).collect();
    let mut val_idx: Vec<usize> = (0..data.val.len()).collect();
    for epoch in 0..cfg.epochs {
        let w_lr = cosine_lr(epoch, cfg.epochs, cfg.w_lr_max, cfg.w_lr_min)?;
        train_idx.shuffle(&mut rng);
        val_idx.shuffle(&mut rng);
        let (mut tl, mut vl) = (0.0, 0.0);
        for s in 0..steps {
            let bt = &train_idx[s * cfg.batch_size..(s + 1) * cfg.batch_size];
            let vo = (s * cfg.batch_size) % (data.val.len() - cfg.batch_size + 1);
            let bv = &val_idx[vo..vo + cfg.batch_size];
            let (xt, yt) = data.train.batch::<T>(bt, None)?;
            let (xv, yv) = data.val.batch::<T>(bv, None)?;
            let rates = StepRates {
                w_lr,
                alpha_lr: cfg.alpha_lr,
            };
            let (t, v) = bilevel_step(&mut net, (xt, &yt), (xv, &yv), rates, &sgd, &mut adam).map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!("search aborted at epoch {}, batch {s}: {m}", epoch + 1)),
                other => other,
            })?;
            tl += t;
            vl += v;
        }
        history.push(SearchEpoch {
            epoch: epoch + 1,
            train_loss: tl / steps as f64,
            val_loss: vl / steps as f64,
            w_lr,
        });
    }
    let alphas = net.alphas();
    Ok(SearchOutcome {
        supernet: net,
        alphas,
        history,
    })
}

/// Per edge, the strongest non-zero op (ties: op order); per node, the two
/// edges whose chosen op has the largest softmax weight (ties: lower
/// predecessor). Inputs are listed by predecessor index.
pub fn derive_genotype(alphas: &AlphaTable) -> Result<Genotype> {
    alphas.validate()?;
    let derive_cell = |rows: &[Vec<f64>]| -> Vec<[NodeInput; 2]> {
        let mut nodes = Vec::with_capacity(alphas.n_intermediate);
        let mut e = 0;
        for j in 0..alphas.n_intermediate {
            let mut scored: Vec<(f64, usize, OpKind)> = Vec::with_capacity(j + 2);
            for i in 0..j + 2 {
                let w = softmax_row(&rows[e]);
                e += 1;
                let best = alphas
                    .candidates
                    .iter()
                    .zip(&w)
                    .filter(|(k, _)| **k != OpKind::Zero)
                    .fold(None::<(OpKind, f64)>, |acc, (&k, &p)| match acc {
                        Some((bk, bp)) if bp > p || (bp == p && bk < k) => Some((bk, bp)),
                        _ => Some((k, p)),
                    })
                    .expect("validated: a non-zero candidate exists");
                scored.push((best.1, i, best.0));
            }
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut top = [scored[0], scored[1]];
            top.sort_by_key(|s| s.1);
            nodes.push(top.map(|(_, from, op)| NodeInput { from, op }));
        }
        nodes
    };
    Genotype::new(alphas.n_intermediate, derive_cell(&alphas.normal), derive_cell(&alphas.reduce))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot(k: usize, hot: usize) -> Vec<f64> {
        (0..k).map(|i| if i == hot { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn one_hot_edge_picks_that_op() {
        let mut t = AlphaTable::zeros(1, OpKind::ALL.to_vec()).unwrap();
        t.normal[0] = one_hot(8, 0);
        t.normal[1] = one_hot(8, 3);
        let g = derive_genotype(&t).unwrap();
        assert_eq!(g.normal[0][0].op, OpKind::SepConv3);
        assert_eq!(g.normal[0][1].op, OpKind::Conv1x1);
    }

    #[test]
    fn zero_is_never_chosen() {
        let mut t = AlphaTable::zeros(1, OpKind::ALL.to_vec()).unwrap();
        for row in t.normal.iter_mut().chain(t.reduce.iter_mut()) {
            *row = vec![0.0; 8];
            row[7] = 5.0;
            row[1] = 2.0;
        }
        let g = derive_genotype(&t).unwrap();
        assert!(g.normal.iter().chain(&g.reduce).flatten().all(|n| n.op == OpKind::SepConv5));
    }

    #[test]
    fn reductions_sit_at_thirds() {
        let cfg = SearchConfig::default();
        assert_eq!(cfg.reduction_cells(), vec![2, 5]);
        let tiny = SearchConfig {
            n_cells: 2,
            ..SearchConfig::default()
        };
        assert!(tiny.reduction_cells().is_empty());
    }

    #[test]
    fn config_validation() {
        assert!(SearchConfig::default().validate().is_ok());
        let bad = SearchConfig {
            w_lr_min: 0.2,
            ..SearchConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
