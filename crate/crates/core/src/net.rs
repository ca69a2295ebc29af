//! PocketNet assembly, parameter and FLOP accounting.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::out_extent;
use crate::param::{BnIds, Builder, Ctx, Mode, ParamGroup, ParamId, ParamStore};
use crate::scalar::Real;
use crate::search_space::{Cell, CellDims, CellKind, Genotype};
use crate::tensor::Tensor;

pub const HEAD_WIDTH: usize = 512;
/// Stem plus three reductions.
pub const TOTAL_STRIDE: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VariantSpec {
    pub name: String,
    pub stem_channels: usize,
    pub n_normal_per_stage: [usize; 3],
    pub embedding_dim: usize,
    pub input_size: usize,
    pub head_width: usize,
}

impl VariantSpec {
    pub fn small(embedding_dim: usize) -> Self {
        Self {
            name: format!("S-{embedding_dim}"),
            stem_channels: 64,
            n_normal_per_stage: [6, 5, 4],
            embedding_dim,
            input_size: 112,
            head_width: HEAD_WIDTH,
        }
    }

    pub fn medium(embedding_dim: usize) -> Self {
        Self {
            name: format!("M-{embedding_dim}"),
            stem_channels: 128,
            n_normal_per_stage: [3, 2, 1],
            embedding_dim,
            input_size: 112,
            head_width: HEAD_WIDTH,
        }
    }

    pub fn custom(stem_channels: usize, n_normal_per_stage: [usize; 3], embedding_dim: usize, input_size: usize) -> Self {
        Self {
            name: "custom".into(),
            stem_channels,
            n_normal_per_stage,
            embedding_dim,
            input_size,
            head_width: HEAD_WIDTH,
        }
    }

    pub fn with_input_size(mut self, input_size: usize) -> Self {
        self.input_size = input_size;
        self
    }

    pub fn with_head_width(mut self, head_width: usize) -> Self {
        self.head_width = head_width;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_normal_per_stage.contains(&0) {
            return Err(Error::invalid("every stage needs at least one normal cell"));
        }
        if self.embedding_dim == 0 || self.stem_channels == 0 || self.head_width == 0 {
            return Err(Error::invalid("channel counts must be positive"));
        }
        Ok(())
    }
}

impl FromStr for VariantSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "S-128" => Ok(Self::small(128)),
            "S-256" => Ok(Self::small(256)),
            "M-128" => Ok(Self::medium(128)),
            "M-256" => Ok(Self::medium(256)),
            _ => Err(Error::invalid(format!(
                "unknown variant {s:?} (expected S-128, S-256, M-128 or M-256)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageKind {
    Stem,
    Normal,
    Reduction,
    Head,
    Gdc,
    Embedding,
}

/// One table row: a block (or a run of identical-role cells).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StagePlan {
    pub kind: StageKind,
    /// Short id used in CSV output.
    pub id: String,
    /// Human-readable operation name.
    pub label: String,
    /// `[C, H, W]` after the stage.
    pub out_shape: [usize; 3],
    pub repeat: usize,
    /// Indices into the network's cell list.
    pub cells: std::ops::Range<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkPlan {
    pub stages: Vec<StagePlan>,
    pub gdc_kernel: usize,
}

impl NetworkPlan {
    pub fn new(variant: &VariantSpec) -> Result<Self> {
        variant.validate()?;
        let s = variant.input_size;
        let mut extent = out_extent(s, 3, 2, 1).ok_or_else(|| Error::invalid(format!("input size {s} is too small")))?;
        let mut c = variant.stem_channels;
        let mut stages = vec![StagePlan {
            kind: StageKind::Stem,
            id: "stem".into(),
            label: "Conv2d(k=3,s=2,p=1),BN".into(),
            out_shape: [c, extent, extent],
            repeat: 1,
            cells: 0..0,
        }];
        let mut cell = 0;
        let mut first_normal = 1;
        for (st, &n) in variant.n_normal_per_stage.iter().enumerate() {
            let last = first_normal + n - 1;
            stages.push(StagePlan {
                kind: StageKind::Normal,
                id: format!("normal{}", st + 1),
                label: if n == 1 {
                    format!("Normal-Cell {first_normal}")
                } else {
                    format!("Normal-Cell {first_normal}-{last}")
                },
                out_shape: [c, extent, extent],
                repeat: n,
                cells: cell..cell + n,
            });
            cell += n;
            first_normal = last + 1;
            c *= 2;
            extent = extent.div_ceil(2);
            stages.push(StagePlan {
                kind: StageKind::Reduction,
                id: format!("reduction{}", st + 1),
                label: format!("Reduction-Cell {}", st + 1),
                out_shape: [c, extent, extent],
                repeat: 1,
                cells: cell..cell + 1,
            });
            cell += 1;
        }
        if s % TOTAL_STRIDE != 0 || extent != s / TOTAL_STRIDE {
            return Err(Error::invalid(format!(
                "input size {s} gives a final feature map of {extent}x{extent}; \
                 the global depthwise kernel needs input divisible by {TOTAL_STRIDE}"
            )));
        }
        let hw = variant.head_width;
        stages.push(StagePlan {
            kind: StageKind::Head,
            id: "head".into(),
            label: "PReLU, Conv2d(k=1), BN, PReLU".into(),
            out_shape: [hw, extent, extent],
            repeat: 1,
            cells: 0..0,
        });
        stages.push(StagePlan {
            kind: StageKind::Gdc,
            id: "gdc".into(),
            label: format!("Conv2d(k={extent},g={hw}), BN"),
            out_shape: [hw, 1, 1],
            repeat: 1,
            cells: 0..0,
        });
        stages.push(StagePlan {
            kind: StageKind::Embedding,
            id: "embedding".into(),
            label: "Conv2d(k=1), BN".into(),
            out_shape: [variant.embedding_dim, 1, 1],
            repeat: 1,
            cells: 0..0,
        });
        Ok(Self {
            stages,
            gdc_kernel: extent,
        })
    }
}

#[derive(Clone, Debug)]
struct ConvBn {
    conv: ParamId,
    bn: BnIds,
    stride: usize,
    pad: usize,
    groups: usize,
}

impl ConvBn {
    fn forward<'t, T: Real>(&self, ctx: &mut Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = x.conv2d(ctx.param(self.conv), self.stride, self.pad, self.groups)?;
        ctx.batch_norm(y, &self.bn)
    }
}

/// Network structure. Parameters live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Network {
    pub variant: VariantSpec,
    pub genotype: Genotype,
    pub plan: NetworkPlan,
    stem: ConvBn,
    pub cells: Vec<Cell>,
    head_act_in: ParamId,
    head: ConvBn,
    head_act_out: ParamId,
    gdc: ConvBn,
    embedding: ConvBn,
}

/// A network together with its parameters.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub net: Network,
    pub store: ParamStore<T>,
}

fn conv_bn<T: Real, R: rand::Rng>(
    b: &mut Builder<'_, T, R>,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<ConvBn> {
    Ok(ConvBn {
        conv: b.conv("conv", cin, cout, k, groups)?,
        bn: b.bn("bn", cout)?,
        stride,
        pad,
        groups,
    })
}

pub fn build_network<T: Real>(genotype: &Genotype, variant: &VariantSpec, seed: u64) -> Result<Model<T>> {
    genotype.validate()?;
    let plan = NetworkPlan::new(variant)?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder::new(&mut store, &mut rng);
    let c0 = variant.stem_channels;
    let stem = b.scope("stem", |b| conv_bn(b, 3, c0, 3, 2, 1, 1))?;

    let mut cells = Vec::new();
    let (mut c_pp, mut c_p, mut c_cur) = (c0, c0, c0);
    let mut reduction_prev = false;
    for stage in &plan.stages {
        let kind = match stage.kind {
            StageKind::Normal => CellKind::Normal,
            StageKind::Reduction => CellKind::Reduction,
            _ => continue,
        };
        for _ in stage.cells.clone() {
            if kind.is_reduction() {
                c_cur *= 2;
            }
            let dims = CellDims {
                c_prev_prev: c_pp,
                c_prev: c_p,
                c_out: c_cur,
                reduction_prev,
            };
            let idx = cells.len();
            let cell = b.scope(format!("cells.{idx}"), |b| {
                Cell::discrete(b, genotype.cell(kind.is_reduction()), kind, dims)
            })?;
            c_pp = c_p;
            c_p = cell.c_out();
            reduction_prev = kind.is_reduction();
            cells.push(cell);
        }
    }
    let hw = variant.head_width;
    let head_act_in = b.scope("head", |b| b.prelu("act_in", c_p))?;
    let head = b.scope("head", |b| conv_bn(b, c_p, hw, 1, 1, 0, 1))?;
    let head_act_out = b.scope("head", |b| b.prelu("act_out", hw))?;
    let k = plan.gdc_kernel;
    let gdc = b.scope("gdc", |b| conv_bn(b, hw, hw, k, 1, 0, hw))?;
    let embedding = b.scope("embedding", |b| conv_bn(b, hw, variant.embedding_dim, 1, 1, 0, 1))?;
    Ok(Model {
        net: Network {
            variant: variant.clone(),
            genotype: genotype.clone(),
            plan,
            stem,
            cells,
            head_act_in,
            head,
            head_act_out,
            gdc,
            embedding,
        },
        store,
    })
}

impl Network {
    /// `N×3×S×S → N×D` embeddings (not normalised).
    pub fn forward<'t, T: Real>(&self, ctx: &mut Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let [n, c, h, w] = x.value().dims4()?;
        let s = self.variant.input_size;
        if c != 3 || h != s || w != s {
            return Err(Error::shape("network input", &[n, c, h, w], &[n, 3, s, s]));
        }
        let stem = self.stem.forward(ctx, x)?;
        let (mut s0, mut s1) = (stem, stem);
        for cell in &self.cells {
            let y = cell.forward(ctx, s0, s1, None)?;
            s0 = s1;
            s1 = y;
        }
        let a = s1.prelu(ctx.param(self.head_act_in))?;
        let hd = self.head.forward(ctx, a)?;
        let hd = hd.prelu(ctx.param(self.head_act_out))?;
        let g = self.gdc.forward(ctx, hd)?;
        let e = self.embedding.forward(ctx, g)?;
        e.reshape(&[n, self.variant.embedding_dim])
    }

    /// Per-stage trainable parameter counts from the structural formulas.
    pub fn stage_params(&self) -> Vec<usize> {
        let v = &self.variant;
        let hw = v.head_width;
        let c_last = self.cells.last().map(Cell::c_out).unwrap_or(v.stem_channels);
        let k = self.plan.gdc_kernel;
        self.plan
            .stages
            .iter()
            .map(|st| match st.kind {
                StageKind::Stem => 3 * 9 * v.stem_channels + 2 * v.stem_channels,
                StageKind::Normal | StageKind::Reduction => self.cells[st.cells.clone()].iter().map(Cell::param_count).sum(),
                StageKind::Head => c_last + c_last * hw + 2 * hw + hw,
                StageKind::Gdc => hw * k * k + 2 * hw,
                StageKind::Embedding => hw * v.embedding_dim + 2 * v.embedding_dim,
            })
            .collect()
    }

    /// Per-stage multiply-accumulates for a single input sample.
    pub fn stage_macs(&self) -> Vec<u64> {
        let v = &self.variant;
        let hw = v.head_width as u64;
        let s1 = self.plan.stages[0].out_shape[1];
        let mut pp = (s1, s1);
        let mut p = (s1, s1);
        let c_last = self.cells.last().map(Cell::c_out).unwrap_or(v.stem_channels) as u64;
        let k = self.plan.gdc_kernel as u64;
        self.plan
            .stages
            .iter()
            .map(|st| match st.kind {
                StageKind::Stem => (s1 * s1 * v.stem_channels * 27) as u64,
                StageKind::Normal | StageKind::Reduction => {
                    let mut total = 0;
                    for cell in &self.cells[st.cells.clone()] {
                        total += cell.macs(p, pp);
                        let out = if cell.template.kind.is_reduction() {
                            (p.0.div_ceil(2), p.1.div_ceil(2))
                        } else {
                            p
                        };
                        pp = p;
                        p = out;
                    }
                    total
                }
                StageKind::Head => k * k * c_last * hw,
                StageKind::Gdc => hw * k * k,
                StageKind::Embedding => hw * v.embedding_dim as u64,
            })
            .collect()
    }
}

/// Parameter and FLOP census. FLOPs are counted as 2 × multiply-accumulate
/// over convolutions, per input sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Census {
    pub rows: Vec<CensusRow>,
    pub total_params: usize,
    pub total_flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CensusRow {
    pub id: String,
    pub label: String,
    pub out_shape: [usize; 3],
    pub repeat: usize,
    pub params: usize,
    pub flops: u64,
}

pub const FLOP_CONVENTION: &str = "flops = 2 x multiply-accumulate over convolutions, per sample";

pub fn count_params(net: &Network) -> (usize, Vec<usize>) {
    let per = net.stage_params();
    (per.iter().sum(), per)
}

pub fn count_flops(net: &Network) -> (u64, Vec<u64>) {
    let per: Vec<u64> = net.stage_macs().into_iter().map(|m| 2 * m).collect();
    (per.iter().sum(), per)
}

pub fn census(net: &Network) -> Census {
    let (total_params, params) = count_params(net);
    let (total_flops, flops) = count_flops(net);
    let rows = net
        .plan
        .stages
        .iter()
        .zip(params.iter().zip(&flops))
        .map(|(st, (&p, &f))| CensusRow {
            id: st.id.clone(),
            label: st.label.clone(),
            out_shape: st.out_shape,
            repeat: st.repeat,
            params: p,
            flops: f,
        })
        .collect();
    Census {
        rows,
        total_params,
        total_flops,
    }
}

impl Census {
    /// `stage,params,flops` lines, header first, `total` last.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,params,flops\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.id, r.params, r.flops);
        }
        let _ = writeln!(s, "total,{},{}", self.total_params, self.total_flops);
        s
    }
}

impl fmt::Display for Census {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(9).max(9);
        writeln!(f, "{:<w$} | {:<16} | {:>2} | {:>10}", "Operation", "Output", "R", "Param.")?;
        writeln!(f, "{}", "-".repeat(w + 37))?;
        for r in &self.rows {
            let [c, h, ww] = r.out_shape;
            writeln!(
                f,
                "{:<w$} | {:<16} | {:>2} | {:>10}",
                r.label,
                format!("[{c} x {h} x {ww}]"),
                r.repeat,
                r.params
            )?;
        }
        writeln!(f, "{}", "-".repeat(w + 37))?;
        writeln!(f, "total params: {}", self.total_params)?;
        writeln!(f, "total flops: {} ({:.2} M)", self.total_flops, self.total_flops as f64 / 1e6)?;
        writeln!(f, "{FLOP_CONVENTION}")
    }
}

/// Table-style report of a built network.
pub fn summarize(net: &Network) -> String {
    census(net).to_string()
}

impl<T: Real> Model<T> {
    pub fn forward<'t>(&mut self, tape: &'t Tape<T>, x: Tensor<T>, mode: Mode, trainable: &[ParamGroup]) -> Result<Var<'t, T>> {
        let mut ctx = Ctx::new(tape, &mut self.store, mode, trainable);
        let xv = tape.constant(x);
        let y = self.net.forward(&mut ctx, xv)?;
        ctx.commit_stats();
        Ok(y)
    }

    /// Eval-mode embeddings for a batch, as plain values.
    pub fn embed(&mut self, x: Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let y = self.forward(&tape, x, Mode::Eval, &[])?;
        Ok((*y.value()).clone())
    }

    pub fn param_count(&self) -> usize {
        self.store.numel(ParamGroup::Weights)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_variant_fixed_stages() {
        let m = build_network::<f32>(&Genotype::pocketnet(), &VariantSpec::small(128), 0).unwrap();
        let (total, per) = count_params(&m.net);
        assert_eq!(per.len(), 10);
        assert_eq!(per[0], 1856);
        assert_eq!(&per[7..], &[264_192, 26_112, 65_792]);
        assert_eq!(total, m.param_count());
        assert_eq!(m.net.plan.stages[6].out_shape, [512, 7, 7]);
    }

    #[test]
    fn medium_variant_shapes() {
        let m = build_network::<f32>(&Genotype::pocketnet(), &VariantSpec::medium(128), 0).unwrap();
        assert_eq!(m.net.plan.stages[6].out_shape, [1024, 7, 7]);
        let (_, per) = count_params(&m.net);
        assert_eq!(per[0], 3712);
        assert_eq!(per[7], 526_848);
    }

    #[test]
    fn gdc_kernel_must_match() {
        let v = VariantSpec::small(128).with_input_size(100);
        let err = NetworkPlan::new(&v).unwrap_err().to_string();
        assert!(err.contains("7x7"), "{err}");
        assert_eq!(NetworkPlan::new(&VariantSpec::small(128).with_input_size(32)).unwrap().gdc_kernel, 2);
    }

    #[test]
    fn tiny_forward_is_finite() {
        let v = VariantSpec::custom(8, [1, 1, 1], 16, 32).with_head_width(32);
        let mut m = build_network::<f32>(&Genotype::pocketnet(), &v, 3).unwrap();
        let x = Tensor::uniform(&[2, 3, 32, 32], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let e = m.embed(x).unwrap();
        assert_eq!(e.shape(), &[2, 16]);
        assert!(e.all_finite());
    }

    #[test]
    fn report_rows_and_csv() {
        let m = build_network::<f32>(&Genotype::pocketnet(), &VariantSpec::small(128), 0).unwrap();
        let c = census(&m.net);
        assert_eq!(c.rows.len(), 10);
        let reps: Vec<usize> = c.rows.iter().filter(|r| r.id.starts_with("normal")).map(|r| r.repeat).collect();
        assert_eq!(reps, [6, 5, 4]);
        assert_eq!(c.rows.iter().map(|r| r.params).sum::<usize>(), c.total_params);
        let csv = c.to_csv();
        assert!(csv.starts_with("stage,params,flops\nstem,1856,"));
        assert_eq!(csv.lines().count(), 12);
    }
}
