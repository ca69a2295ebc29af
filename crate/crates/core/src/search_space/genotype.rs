//! Discrete cell descriptions and their text format.
//!
//! ```text
//! genotype v1
//! nodes 4
//! normal:
//! node0: sep_conv_3(0), conv_1x1(1)
//! node1: sep_conv_3(0), sep_conv_5(2)
//! ...
//! reduce:
//! node0: max_pool_3(0), sep_conv_3(1)
//! ...
//! ```
//!
//! `node<j>` is the j-th intermediate node; predecessor indices 0 and 1 are
//! the two cell inputs and `2 + j'` is intermediate node `j'`, so node `j`
//! may only read from indices `< j + 2`.

use std::fmt;
use std::str::FromStr;

use super::ops::OpKind;
use crate::error::{Error, Result};

/// One incoming edge of a discrete node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeInput {
    pub from: usize,
    pub op: OpKind,
}

/// The two chosen inputs of every intermediate node of one cell type.
pub type CellGenotype = Vec<[NodeInput; 2]>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Genotype {
    pub n_intermediate: usize,
    pub normal: CellGenotype,
    pub reduce: CellGenotype,
}

const HEADER: &str = "genotype v1";
const SHIPPED: &str = include_str!("../../../../pocketnet.genotype");

impl Genotype {
    pub fn new(n_intermediate: usize, normal: CellGenotype, reduce: CellGenotype) -> Result<Self> {
        let g = Self {
            n_intermediate,
            normal,
            reduce,
        };
        g.validate()?;
        Ok(g)
    }

    /// The cells shipped with the repository.
    pub fn pocketnet() -> Self {
        SHIPPED.parse().expect("shipped genotype parses")
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_intermediate == 0 {
            return Err(Error::invalid("a cell needs at least one intermediate node"));
        }
        for (label, cell) in [("normal", &self.normal), ("reduce", &self.reduce)] {
            if cell.len() != self.n_intermediate {
                return Err(Error::invalid(format!(
                    "{label} cell lists {} nodes, expected {}",
                    cell.len(),
                    self.n_intermediate
                )));
            }
            for (j, node) in cell.iter().enumerate() {
                for inp in node {
                    if inp.op == OpKind::Zero {
                        return Err(Error::invalid(format!("{label} node{j}: zero is not a valid choice")));
                    }
                    if inp.from >= j + 2 {
                        return Err(Error::invalid(format!(
                            "{label} node{j}: predecessor {} out of range (must be < {})",
                            inp.from,
                            j + 2
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn cell(&self, reduction: bool) -> &CellGenotype {
        if reduction {
            &self.reduce
        } else {
            &self.normal
        }
    }
}

impl fmt::Display for Genotype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{HEADER}")?;
        writeln!(f, "nodes {}", self.n_intermediate)?;
        for (label, cell) in [("normal", &self.normal), ("reduce", &self.reduce)] {
            writeln!(f, "{label}:")?;
            for (j, [a, b]) in cell.iter().enumerate() {
                writeln!(f, "node{j}: {}({}), {}({})", a.op, a.from, b.op, b.from)?;
            }
        }
        Ok(())
    }
}

fn parse_input(s: &str, line: usize) -> Result<NodeInput> {
    let err = |reason: String| Error::Parse { line, reason };
    let s = s.trim();
    let open = s
        .find('(')
        .ok_or_else(|| err(format!("expected op(index), got {s:?}")))?;
    if !s.ends_with(')') {
        return Err(err(format!("expected op(index), got {s:?}")));
    }
    let op: OpKind = s[..open].parse().map_err(|e: Error| err(e.to_string()))?;
    if op == OpKind::Zero {
        return Err(err("zero is not a valid choice".into()));
    }
    let from = s[open + 1..s.len() - 1]
        .parse::<usize>()
        .map_err(|_| err(format!("bad predecessor index in {s:?}")))?;
    Ok(NodeInput { from, op })
}

impl FromStr for Genotype {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        let (ln, first) = lines.next().ok_or(Error::Parse {
            line: 1,
            reason: "empty genotype".into(),
        })?;
        if first != HEADER {
            return Err(Error::Parse {
                line: ln,
                reason: format!("expected {HEADER:?}, got {first:?}"),
            });
        }
        let (ln, nodes_line) = lines.next().ok_or(Error::Parse {
            line: ln + 1,
            reason: "missing node count".into(),
        })?;
        let n: usize = nodes_line
            .strip_prefix("nodes ")
            .and_then(|v| v.trim().parse().ok())
            .filter(|&n| n > 0)
            .ok_or(Error::Parse {
                line: ln,
                reason: format!("expected `nodes <count>`, got {nodes_line:?}"),
            })?;

        let mut normal: Option<CellGenotype> = None;
        let mut reduce: Option<CellGenotype> = None;
        let mut current: Option<(&str, CellGenotype)> = None;
        let finish = |cur: Option<(&str, CellGenotype)>, normal: &mut Option<CellGenotype>, reduce: &mut Option<CellGenotype>, line: usize| -> Result<()> {
            if let Some((label, cell)) = cur {
                if cell.len() != n {
                    return Err(Error::Parse {
                        line,
                        reason: format!("section {label} has {} nodes, expected {n}", cell.len()),
                    });
                }
                if label == "normal" {
                    *normal = Some(cell);
                } else {
                    *reduce = Some(cell);
                }
            }
            Ok(())
        };

        let mut last_line = ln;
        for (ln, line) in lines {
            last_line = ln;
            if let Some(label) = line.strip_suffix(':').filter(|l| *l == "normal" || *l == "reduce") {
                finish(current.take(), &mut normal, &mut reduce, ln)?;
                let dup = if label == "normal" { normal.is_some() } else { reduce.is_some() };
                if dup {
                    return Err(Error::Parse {
                        line: ln,
                        reason: format!("duplicate section {label}"),
                    });
                }
                current = Some((if label == "normal" { "normal" } else { "reduce" }, Vec::new()));
                continue;
            }
            let Some((label, cell)) = current.as_mut() else {
                return Err(Error::Parse {
                    line: ln,
                    reason: format!("node line outside a section: {line:?}"),
                });
            };
            let j = cell.len();
            let body = line.strip_prefix(&format!("node{j}:")).ok_or(Error::Parse {
                line: ln,
                reason: format!("expected node{j} in section {label}, got {line:?}"),
            })?;
            let parts: Vec<&str> = body.split("),").collect();
            if parts.len() != 2 {
                return Err(Error::Parse {
                    line: ln,
                    reason: format!("expected exactly two inputs, got {body:?}"),
                });
            }
            let a = parse_input(&format!("{})", parts[0].trim()), ln)?;
            let b = parse_input(parts[1], ln)?;
            for inp in [a, b] {
                if inp.from >= j + 2 {
                    return Err(Error::Parse {
                        line: ln,
                        reason: format!("predecessor {} out of range for node{j} (must be < {})", inp.from, j + 2),
                    });
                }
            }
            if j >= n {
                return Err(Error::Parse {
                    line: ln,
                    reason: format!("section {label} has more than {n} nodes"),
                });
            }
            cell.push([a, b]);
        }
        finish(current.take(), &mut normal, &mut reduce, last_line)?;
        let normal = normal.ok_or(Error::Parse {
            line: last_line,
            reason: "missing normal section".into(),
        })?;
        let reduce = reduce.ok_or(Error::Parse {
            line: last_line,
            reason: "missing reduce section".into(),
        })?;
        Genotype::new(n, normal, reduce)
    }
}
