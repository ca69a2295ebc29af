use rand::Rng;

use super::genotype::CellGenotype;
use super::ops::{op_macs, EdgeOp, OpKind};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::kernels::out_extent;
use crate::param::{BnIds, Builder, Ctx, ParamId};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellKind {
    Normal,
    Reduction,
}

impl CellKind {
    pub fn is_reduction(self) -> bool {
        self == CellKind::Reduction
    }
}

/// Edge layout of a cell: intermediate node `j` has one edge from every
/// earlier node `i < j + 2` (indices 0 and 1 are the cell inputs).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellTemplate {
    pub n_intermediate: usize,
    pub kind: CellKind,
}

impl CellTemplate {
    pub fn new(n_intermediate: usize, kind: CellKind) -> Result<Self> {
        if n_intermediate == 0 {
            return Err(Error::invalid("a cell needs at least one intermediate node"));
        }
        Ok(Self { n_intermediate, kind })
    }

    pub fn n_edges(&self) -> usize {
        edge_count(self.n_intermediate)
    }

    /// `(from, node)` for every supernet edge, grouped by node.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.n_intermediate)
            .flat_map(|j| (0..j + 2).map(move |i| (i, j)))
            .collect()
    }

    /// Flat index of edge `from → node j`.
    pub fn edge_index(&self, from: usize, j: usize) -> usize {
        edge_offset(j) + from
    }

    pub fn edge_stride(&self, from: usize) -> usize {
        edge_stride(self.kind, from)
    }
}

pub fn edge_count(n_intermediate: usize) -> usize {
    n_intermediate * (n_intermediate + 3) / 2
}

fn edge_offset(j: usize) -> usize {
    // Σ_{j'<j} (j' + 2)
    j * (j + 3) / 2
}

fn edge_stride(kind: CellKind, from: usize) -> usize {
    if kind.is_reduction() && from < 2 {
        2
    } else {
        1
    }
}

/// PReLU → 1×1 conv (optionally strided) → BN, mapping a previous cell's
/// output to the node width.
#[derive(Clone, Debug)]
pub struct Preprocess {
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    act: ParamId,
    conv: ParamId,
    bn: BnIds,
}

impl Preprocess {
    pub fn build<T: Real, R: Rng>(b: &mut Builder<'_, T, R>, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            cin,
            cout,
            stride,
            act: b.prelu("act", cin)?,
            conv: b.conv("conv", cin, cout, 1, 1)?,
            bn: b.bn("bn", cout)?,
        })
    }

    pub fn param_count(&self) -> usize {
        preprocess_params(self.cin, self.cout)
    }

    pub fn forward<'t, T: Real>(&self, ctx: &mut Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let a = x.prelu(ctx.param(self.act))?;
        let c = a.conv2d(ctx.param(self.conv), self.stride, 0, 1)?;
        ctx.batch_norm(c, &self.bn)
    }
}

pub fn preprocess_params(cin: usize, cout: usize) -> usize {
    cin + cin * cout + 2 * cout
}

#[derive(Clone, Debug)]
pub enum CellBody {
    /// Every candidate on every edge; weights come from shared alphas.
    Mixed {
        candidates: Vec<OpKind>,
        /// `edges[e][k]` is candidate `k` on flat edge `e`.
        edges: Vec<Vec<EdgeOp>>,
    },
    /// Two chosen `(from, op)` inputs per node.
    Discrete { nodes: Vec<[(usize, EdgeOp); 2]> },
}

/// A cell with its input preprocessing.
#[derive(Clone, Debug)]
pub struct Cell {
    pub template: CellTemplate,
    /// Per-node channel width; the cell emits `n_intermediate · width`.
    pub width: usize,
    pub reduction_prev: bool,
    pub pre0: Preprocess,
    pub pre1: Preprocess,
    pub body: CellBody,
}

/// Input/output widths of a cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellDims {
    pub c_prev_prev: usize,
    pub c_prev: usize,
    /// Output channels; must be divisible by the node count.
    pub c_out: usize,
    pub reduction_prev: bool,
}

fn node_width(template: &CellTemplate, c_out: usize) -> Result<usize> {
    if c_out == 0 || c_out % template.n_intermediate != 0 {
        return Err(Error::invalid(format!(
            "cell width {c_out} is not divisible by {} intermediate nodes",
            template.n_intermediate
        )));
    }
    Ok(c_out / template.n_intermediate)
}

fn build_pre<T: Real, R: Rng>(b: &mut Builder<'_, T, R>, dims: CellDims, width: usize) -> Result<(Preprocess, Preprocess)> {
    let s0 = if dims.reduction_prev { 2 } else { 1 };
    let pre0 = b.scope("pre0", |b| Preprocess::build(b, dims.c_prev_prev, width, s0))?;
    let pre1 = b.scope("pre1", |b| Preprocess::build(b, dims.c_prev, width, 1))?;
    Ok((pre0, pre1))
}

impl Cell {
    pub fn supernet<T: Real, R: Rng>(
        b: &mut Builder<'_, T, R>,
        template: CellTemplate,
        candidates: &[OpKind],
        dims: CellDims,
    ) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::invalid("supernet edge needs at least one candidate"));
        }
        let width = node_width(&template, dims.c_out)?;
        let (pre0, pre1) = build_pre(b, dims, width)?;
        let mut edges = Vec::with_capacity(template.n_edges());
        for (e, (from, _)) in template.edges().into_iter().enumerate() {
            let stride = template.edge_stride(from);
            let ops = b.scope(format!("edge.{e}"), |b| {
                candidates
                    .iter()
                    .map(|&k| EdgeOp::build(b, k, width, stride))
                    .collect::<Result<Vec<_>>>()
            })?;
            edges.push(ops);
        }
        Ok(Self {
            template,
            width,
            reduction_prev: dims.reduction_prev,
            pre0,
            pre1,
            body: CellBody::Mixed {
                candidates: candidates.to_vec(),
                edges,
            },
        })
    }

    pub fn discrete<T: Real, R: Rng>(
        b: &mut Builder<'_, T, R>,
        genotype: &CellGenotype,
        kind: CellKind,
        dims: CellDims,
    ) -> Result<Self> {
        let template = CellTemplate::new(genotype.len(), kind)?;
        let width = node_width(&template, dims.c_out)?;
        let (pre0, pre1) = build_pre(b, dims, width)?;
        let mut nodes = Vec::with_capacity(genotype.len());
        for (j, pair) in genotype.iter().enumerate() {
            let mut build = |slot: usize| -> Result<(usize, EdgeOp)> {
                let inp = pair[slot];
                if inp.from >= j + 2 || inp.op == OpKind::Zero {
                    return Err(Error::invalid(format!("invalid input {:?} for node{j}", inp)));
                }
                let stride = template.edge_stride(inp.from);
                let op = b.scope(format!("node{j}.{slot}"), |b| EdgeOp::build(b, inp.op, width, stride))?;
                Ok((inp.from, op))
            };
            nodes.push([build(0)?, build(1)?]);
        }
        Ok(Self {
            template,
            width,
            reduction_prev: dims.reduction_prev,
            pre0,
            pre1,
            body: CellBody::Discrete { nodes },
        })
    }

    /// The discrete cell selected by `genotype` out of this supernet cell,
    /// sharing its parameters.
    pub fn discretize(&self, genotype: &CellGenotype) -> Result<Self> {
        let CellBody::Mixed { candidates, edges } = &self.body else {
            return Err(Error::invalid("only a supernet cell can be discretized"));
        };
        if genotype.len() != self.template.n_intermediate {
            return Err(Error::invalid(format!(
                "genotype has {} nodes, cell has {}",
                genotype.len(),
                self.template.n_intermediate
            )));
        }
        let mut nodes = Vec::with_capacity(genotype.len());
        for (j, pair) in genotype.iter().enumerate() {
            let pick = |slot: usize| -> Result<(usize, EdgeOp)> {
                let inp = pair[slot];
                if inp.from >= j + 2 {
                    return Err(Error::invalid(format!("predecessor {} out of range for node{j}", inp.from)));
                }
                let k = candidates
                    .iter()
                    .position(|&c| c == inp.op)
                    .ok_or_else(|| Error::invalid(format!("{} is not a candidate of this supernet", inp.op)))?;
                Ok((inp.from, edges[self.template.edge_index(inp.from, j)][k].clone()))
            };
            nodes.push([pick(0)?, pick(1)?]);
        }
        Ok(Self {
            template: self.template.clone(),
            width: self.width,
            reduction_prev: self.reduction_prev,
            pre0: self.pre0.clone(),
            pre1: self.pre1.clone(),
            body: CellBody::Discrete { nodes },
        })
    }

    pub fn c_out(&self) -> usize {
        self.width * self.template.n_intermediate
    }

    pub fn param_count(&self) -> usize {
        let body: usize = match &self.body {
            CellBody::Mixed { edges, .. } => edges.iter().flatten().map(EdgeOp::param_count).sum(),
            CellBody::Discrete { nodes } => nodes.iter().flatten().map(|(_, op)| op.param_count()).sum(),
        };
        self.pre0.param_count() + self.pre1.param_count() + body
    }

    /// Multiply-accumulates per sample given the spatial size `hw` of the
    /// cell inputs' common (post-preprocessing) extent.
    pub fn macs(&self, hw: (usize, usize), prev_prev_hw: (usize, usize)) -> u64 {
        let pre = |p: &Preprocess, (h, w): (usize, usize)| -> u64 {
            let oh = out_extent(h, 1, p.stride, 0).unwrap_or(0);
            let ow = out_extent(w, 1, p.stride, 0).unwrap_or(0);
            (oh * ow * p.cin * p.cout) as u64
        };
        let mut total = pre(&self.pre0, prev_prev_hw) + pre(&self.pre1, hw);
        let op_cost = |op: &EdgeOp, from: usize| -> u64 {
            // inputs are at the cell input extent; intermediates of a
            // reduction cell are already halved
            let (h, w) = if self.template.kind.is_reduction() && from >= 2 {
                (hw.0.div_ceil(2), hw.1.div_ceil(2))
            } else {
                hw
            };
            op_macs(op.kind, op.channels, op.stride, h, w)
        };
        match &self.body {
            CellBody::Mixed { edges, .. } => {
                for ((from, _), ops) in self.template.edges().into_iter().zip(edges) {
                    total += ops.iter().map(|op| op_cost(op, from)).sum::<u64>();
                }
            }
            CellBody::Discrete { nodes } => {
                for (from, op) in nodes.iter().flatten() {
                    total += op_cost(op, *from);
                }
            }
        }
        total
    }

    /// Runs the cell. `alphas` holds one variable per flat edge (length
    /// `candidates.len()`) and is required for supernet cells.
    pub fn forward<'t, T: Real>(
        &self,
        ctx: &mut Ctx<'t, '_, T>,
        prev_prev: Var<'t, T>,
        prev: Var<'t, T>,
        alphas: Option<&[Var<'t, T>]>,
    ) -> Result<Var<'t, T>> {
        let s0 = self.pre0.forward(ctx, prev_prev)?;
        let s1 = self.pre1.forward(ctx, prev)?;
        let (a, b) = (s0.shape(), s1.shape());
        if a != b {
            return Err(Error::shape("cell inputs", &a, &b));
        }
        let mut states = vec![s0, s1];
        match &self.body {
            CellBody::Mixed { edges, .. } => {
                let alphas = alphas.ok_or_else(|| Error::invalid("supernet cell needs alphas"))?;
                if alphas.len() != edges.len() {
                    return Err(Error::shape("cell alphas", &[edges.len()], &[alphas.len()]));
                }
                for j in 0..self.template.n_intermediate {
                    let mut terms = Vec::with_capacity(j + 2);
                    for i in 0..j + 2 {
                        let e = self.template.edge_index(i, j);
                        terms.push(mixed_forward(ctx, alphas[e], &edges[e], states[i])?);
                    }
                    states.push(Var::add_n(&terms)?);
                }
            }
            CellBody::Discrete { nodes } => {
                for [(i0, op0), (i1, op1)] in nodes {
                    let y0 = op0.forward(ctx, states[*i0])?;
                    let y1 = op1.forward(ctx, states[*i1])?;
                    states.push(y0.add(y1)?);
                }
            }
        }
        Var::concat_channels(&states[2..])
    }
}

/// Softmax-weighted mixture of every candidate's output on one edge.
pub fn mixed_forward<'t, T: Real>(
    ctx: &mut Ctx<'t, '_, T>,
    alpha: Var<'t, T>,
    ops: &[EdgeOp],
    x: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let a = alpha.value();
    if a.len() != ops.len() {
        return Err(Error::shape("mixed edge", &[ops.len()], a.shape()));
    }
    if !a.all_finite() {
        return Err(Error::Numerical(format!("non-finite architecture weights {:?}", a.data())));
    }
    let weights = alpha.softmax();
    let mut outs = Vec::with_capacity(ops.len());
    for op in ops {
        outs.push(op.forward_opt(ctx, x)?);
    }
    if outs.iter().all(Option::is_none) {
        // only zero candidates: the mixture is identically zero
        return ops[0].forward(ctx, x);
    }
    Var::weighted_sum(&outs, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::param::{Mode, ParamGroup, ParamStore};
    use crate::search_space::genotype::{Genotype, NodeInput};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn filled(shape: &[usize], f: impl Fn(usize) -> f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(f).collect()).unwrap()
    }

    fn dims(c_in: usize, c_out: usize) -> CellDims {
        CellDims {
            c_prev_prev: c_in,
            c_prev: c_in,
            c_out,
            reduction_prev: false,
        }
    }

    #[test]
    fn edge_layout() {
        let t = CellTemplate::new(4, CellKind::Normal).unwrap();
        assert_eq!(t.n_edges(), 14);
        assert_eq!(t.edges().len(), 14);
        for (e, (i, j)) in t.edges().into_iter().enumerate() {
            assert_eq!(t.edge_index(i, j), e);
        }
        let r = CellTemplate::new(2, CellKind::Reduction).unwrap();
        assert_eq!(r.edge_stride(1), 2);
        assert_eq!(r.edge_stride(2), 1);
    }

    #[test]
    fn cell_shapes() {
        let g = Genotype::pocketnet();
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = Builder::new(&mut store, &mut rng);
        let normal = b.scope("n", |b| Cell::discrete(b, &g.normal, CellKind::Normal, dims(64, 64))).unwrap();
        let reduce = b.scope("r", |b| Cell::discrete(b, &g.reduce, CellKind::Reduction, dims(64, 128))).unwrap();
        let tape = Tape::new();
        let mut ctx = Ctx::new(&tape, &mut store, Mode::Eval, &[]);
        let x = tape.constant(filled(&[1, 64, 8, 8], |i| ((i * 37) % 11) as f64 / 11.0 - 0.5));
        let y = normal.forward(&mut ctx, x, x, None).unwrap();
        assert_eq!(y.shape(), vec![1, 64, 8, 8]);
        let z = reduce.forward(&mut ctx, x, x, None).unwrap();
        assert_eq!(z.shape(), vec![1, 128, 4, 4]);
    }

    #[test]
    fn identity_cell_sums_predecessors() {
        let id = |from| NodeInput { from, op: OpKind::Identity };
        let geno = vec![[id(0), id(1)], [id(0), id(2)]];
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut b = Builder::new(&mut store, &mut rng);
        let cell = Cell::discrete(&mut b, &geno, CellKind::Normal, dims(2, 4)).unwrap();
        let tape = Tape::new();
        let mut ctx = Ctx::new(&tape, &mut store, Mode::Eval, &[]);
        let x0 = tape.constant(filled(&[1, 2, 3, 3], |i| i as f64 * 0.1));
        let x1 = tape.constant(filled(&[1, 2, 3, 3], |i| 1.0 - i as f64 * 0.05));
        let s0 = cell.pre0.forward(&mut ctx, x0).unwrap().value();
        let s1 = cell.pre1.forward(&mut ctx, x1).unwrap().value();
        let y = cell.forward(&mut ctx, x0, x1, None).unwrap().value();
        assert_eq!(y.shape(), &[1, 4, 3, 3]);
        let plane = 2 * 9;
        for k in 0..plane {
            let n0 = s0.data()[k] + s1.data()[k];
            let n1 = s0.data()[k] + n0;
            assert!((y.data()[k] - n0).abs() < 1e-12);
            assert!((y.data()[plane + k] - n1).abs() < 1e-12);
        }
    }

    #[test]
    fn width_must_divide() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = Builder::new(&mut store, &mut rng);
        let t = CellTemplate::new(4, CellKind::Normal).unwrap();
        assert!(Cell::supernet(&mut b, t, &OpKind::ALL, dims(8, 10)).is_err());
    }

    #[test]
    fn census_matches_formula() {
        let g = Genotype::pocketnet();
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut b = Builder::new(&mut store, &mut rng);
        let d = CellDims {
            c_prev_prev: 64,
            c_prev: 64,
            c_out: 128,
            reduction_prev: false,
        };
        let cell = Cell::discrete(&mut b, &g.reduce, CellKind::Reduction, d).unwrap();
        assert_eq!(cell.param_count(), store.numel(ParamGroup::Weights));
        // reduction cell 1 of the small variant
        assert_eq!(cell.param_count(), 10_688);
    }
}
