use super::cell::edge_count;
use super::ops::OpKind;
use crate::autograd::softmax_row;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Architecture weights for both cell kinds: one row of length
/// `candidates.len()` per supernet edge.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaTable {
    pub n_intermediate: usize,
    pub candidates: Vec<OpKind>,
    pub normal: Vec<Vec<f64>>,
    pub reduce: Vec<Vec<f64>>,
}

impl AlphaTable {
    pub fn new(n_intermediate: usize, candidates: Vec<OpKind>, normal: Vec<Vec<f64>>, reduce: Vec<Vec<f64>>) -> Result<Self> {
        let t = Self {
            n_intermediate,
            candidates,
            normal,
            reduce,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn zeros(n_intermediate: usize, candidates: Vec<OpKind>) -> Result<Self> {
        let rows = vec![vec![0.0; candidates.len()]; edge_count(n_intermediate)];
        Self::new(n_intermediate, candidates, rows.clone(), rows)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_intermediate == 0 {
            return Err(Error::invalid("alpha table needs at least one intermediate node"));
        }
        if !self.candidates.iter().any(|&k| k != OpKind::Zero) {
            return Err(Error::invalid("alpha table needs at least one non-zero candidate"));
        }
        for (i, k) in self.candidates.iter().enumerate() {
            if self.candidates[..i].contains(k) {
                return Err(Error::invalid(format!("duplicate candidate {k}")));
            }
        }
        let e = edge_count(self.n_intermediate);
        for (label, rows) in [("normal", &self.normal), ("reduce", &self.reduce)] {
            if rows.len() != e {
                return Err(Error::invalid(format!("{label} alphas have {} edges, expected {e}", rows.len())));
            }
            for row in rows {
                if row.len() != self.candidates.len() {
                    return Err(Error::shape("alpha row", &[self.candidates.len()], &[row.len()]));
                }
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numerical(format!("non-finite {label} alpha row {row:?}")));
                }
            }
        }
        Ok(())
    }

    pub fn rows(&self, reduction: bool) -> &[Vec<f64>] {
        if reduction {
            &self.reduce
        } else {
            &self.normal
        }
    }

    /// Softmax of every row of one cell kind.
    pub fn weights(&self, reduction: bool) -> Vec<Vec<f64>> {
        self.rows(reduction).iter().map(|r| softmax_row(r)).collect()
    }

    /// `alpha.normal`, `alpha.reduce` (edges × candidates) and
    /// `alpha.candidates` (op indices).
    pub fn to_named_arrays(&self) -> Vec<(String, Tensor<f32>)> {
        let k = self.candidates.len();
        let e = edge_count(self.n_intermediate);
        let flat = |rows: &[Vec<f64>]| rows.iter().flatten().map(|&v| v as f32).collect::<Vec<_>>();
        let cand = self.candidates.iter().map(|c| c.index() as f32).collect();
        vec![
            ("alpha.normal".into(), Tensor::new(&[e, k], flat(&self.normal)).expect("validated shape")),
            ("alpha.reduce".into(), Tensor::new(&[e, k], flat(&self.reduce)).expect("validated shape")),
            ("alpha.candidates".into(), Tensor::new(&[k], cand).expect("validated shape")),
        ]
    }

    pub fn from_named_arrays(arrays: &[(String, Tensor<f32>)]) -> Result<Self> {
        let get = |name: &str| {
            arrays
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::invalid(format!("alpha dump lacks {name:?}")))
        };
        let cand = get("alpha.candidates")?;
        let candidates = cand
            .data()
            .iter()
            .map(|&v| {
                let i = v as usize;
                if v < 0.0 || v.fract() != 0.0 {
                    return None;
                }
                OpKind::from_index(i)
            })
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::invalid("alpha.candidates holds an unknown op index"))?;
        let k = candidates.len();
        let rows = |t: &Tensor<f32>| -> Result<Vec<Vec<f64>>> {
            match *t.shape() {
                [_, kk] if kk == k => Ok(t.data().chunks(k).map(|r| r.iter().map(|&v| v as f64).collect()).collect()),
                _ => Err(Error::shape("alpha table", t.shape(), &[0, k])),
            }
        };
        let normal = rows(get("alpha.normal")?)?;
        let reduce = rows(get("alpha.reduce")?)?;
        // n(n+3)/2 = e  ⇒  n = (−3 + √(9 + 8e)) / 2
        let e = normal.len();
        let n = (1..=64)
            .find(|&n| edge_count(n) == e)
            .ok_or_else(|| Error::invalid(format!("{e} edges do not form a cell")))?;
        Self::new(n, candidates, normal, reduce)
    }
}
