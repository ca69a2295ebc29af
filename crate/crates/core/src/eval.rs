//! Verification and identification metrics over embeddings.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine_similarity", &[a.len()], &[b.len()]));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if !(dot.is_finite() && na.is_finite() && nb.is_finite()) {
        return Err(Error::Numerical("non-finite embedding value".into()));
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cosine similarity of a zero vector"));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pair {
    pub a: String,
    pub b: String,
    pub genuine: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairProtocol {
    pub pairs: Vec<Pair>,
    pub fold_count: usize,
}

impl PairProtocol {
    pub fn new(pairs: Vec<Pair>, fold_count: usize) -> Result<Self> {
        if fold_count == 0 {
            return Err(Error::invalid("fold count must be at least 1"));
        }
        if pairs.len() < fold_count {
            return Err(Error::invalid(format!(
                "{} pairs cannot fill {fold_count} folds",
                pairs.len()
            )));
        }
        if !pairs.iter().any(|p| p.genuine) || pairs.iter().all(|p| p.genuine) {
            return Err(Error::invalid("protocol needs at least one genuine and one impostor pair"));
        }
        Ok(Self { pairs, fold_count })
    }

    /// Line format `a,b,label` with label 1 (genuine) or 0 (impostor);
    /// blank lines and `#` comments are skipped.
    pub fn parse(text: &str, fold_count: usize) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let genuine = match f.as_slice() {
                [_, _, "1"] => true,
                [_, _, "0"] => false,
                _ => {
                    return Err(Error::Parse {
                        line: i + 1,
                        reason: format!("expected `a,b,0|1`, got {line:?}"),
                    })
                }
            };
            pairs.push(Pair {
                a: f[0].to_string(),
                b: f[1].to_string(),
                genuine,
            });
        }
        Self::new(pairs, fold_count)
    }

    pub fn scores(&self, embeddings: &HashMap<String, Vec<f32>>) -> Result<Vec<(f64, bool)>> {
        self.pairs
            .iter()
            .map(|p| {
                let get = |id: &str| {
                    embeddings
                        .get(id)
                        .ok_or_else(|| Error::invalid(format!("no embedding for sample {id:?}")))
                };
                Ok((cosine_similarity(get(&p.a)?, get(&p.b)?)?, p.genuine))
            })
            .collect()
    }
}

fn accuracy_at(scores: &[(f64, bool)], threshold: f64) -> f64 {
    let correct = scores.iter().filter(|&&(s, g)| (s >= threshold) == g).count();
    correct as f64 / scores.len() as f64
}

/// Smallest threshold maximising accuracy. Candidates are the lowest score
/// (accept everything), midpoints between consecutive distinct scores and
/// +∞ (reject everything); this attains every achievable accuracy.
pub fn best_threshold(scores: &[(f64, bool)]) -> f64 {
    let mut sorted: Vec<f64> = scores.iter().map(|&(s, _)| s).collect();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut cands = Vec::with_capacity(sorted.len() + 1);
    cands.extend(sorted.first().copied());
    cands.extend(sorted.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    cands.push(f64::INFINITY);
    let mut best = (f64::NEG_INFINITY, f64::INFINITY);
    for t in cands {
        let acc = accuracy_at(scores, t);
        if acc > best.0 {
            best = (acc, t);
        }
    }
    best.1
}

/// k-fold accuracy: each fold is scored at the threshold chosen on the
/// other folds (on all pairs when there is one fold). Pair `i` is in fold
/// `i mod k`.
pub fn verification_accuracy_from_scores(scores: &[(f64, bool)], fold_count: usize) -> Result<f64> {
    if fold_count == 0 || scores.len() < fold_count {
        return Err(Error::invalid(format!(
            "{} pairs cannot fill {fold_count} folds",
            scores.len()
        )));
    }
    let mut total = 0.0;
    for f in 0..fold_count {
        let test: Vec<_> = scores.iter().enumerate().filter(|(i, _)| i % fold_count == f).map(|(_, s)| *s).collect();
        let train: Vec<_> = if fold_count == 1 {
            test.clone()
        } else {
            scores.iter().enumerate().filter(|(i, _)| i % fold_count != f).map(|(_, s)| *s).collect()
        };
        total += accuracy_at(&test, best_threshold(&train));
    }
    Ok(total / fold_count as f64)
}

pub fn verification_accuracy(protocol: &PairProtocol, embeddings: &HashMap<String, Vec<f32>>) -> Result<f64> {
    verification_accuracy_from_scores(&protocol.scores(embeddings)?, protocol.fold_count)
}

/// True accept rate at the smallest threshold whose false accept rate
/// (impostors with score ≥ threshold) does not exceed `far_target`.
pub fn tar_at_far(genuine: &[f64], impostor: &[f64], far_target: f64) -> Result<f64> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::invalid("tar_at_far needs genuine and impostor scores"));
    }
    if !(far_target > 0.0 && far_target < 1.0) {
        return Err(Error::invalid(format!("far target must lie in (0, 1), got {far_target}")));
    }
    let far = |t: f64| impostor.iter().filter(|&&s| s >= t).count() as f64 / impostor.len() as f64;
    let mut cands: Vec<f64> = impostor.to_vec();
    cands.sort_by(f64::total_cmp);
    let threshold = cands
        .iter()
        .copied()
        .find(|&t| far(t) <= far_target)
        .unwrap_or(f64::INFINITY);
    let tar = if threshold.is_infinite() {
        // strictly above every impostor
        let max = cands[cands.len() - 1];
        genuine.iter().filter(|&&g| g > max).count()
    } else {
        genuine.iter().filter(|&&g| g >= threshold).count()
    };
    Ok(tar as f64 / genuine.len() as f64)
}

/// Fraction of probes whose most cosine-similar gallery entry carries the
/// same label (lowest gallery index on ties).
pub fn rank1_identification(
    probes: &[Vec<f32>],
    probe_labels: &[u32],
    gallery: &[Vec<f32>],
    gallery_labels: &[u32],
) -> Result<f64> {
    if gallery.is_empty() {
        return Err(Error::invalid("empty gallery"));
    }
    if probes.len() != probe_labels.len() || gallery.len() != gallery_labels.len() {
        return Err(Error::invalid("embedding and label counts differ"));
    }
    if probes.is_empty() {
        return Err(Error::invalid("no probes"));
    }
    let mut hits = 0;
    for (p, &pl) in probes.iter().zip(probe_labels) {
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (i, g) in gallery.iter().enumerate() {
            let s = cosine_similarity(p, g)?;
            if s > best.0 {
                best = (s, i);
            }
        }
        if gallery_labels[best.1] == pl {
            hits += 1;
        }
    }
    Ok(hits as f64 / probes.len() as f64)
}

/// CSV `id,dim0,...,dimD-1`.
pub fn parse_embeddings_csv(text: &str) -> Result<Vec<(String, Vec<f32>)>> {
    let mut out = Vec::new();
    let mut dim = None;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut f = line.split(',');
        let id = f.next().unwrap_or_default().trim().to_string();
        let v = f
            .map(|x| x.trim().parse::<f32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse {
                line: i + 1,
                reason: e.to_string(),
            })?;
        if v.is_empty() || *dim.get_or_insert(v.len()) != v.len() {
            return Err(Error::Parse {
                line: i + 1,
                reason: format!("expected {} values, got {}", dim.unwrap_or(1), v.len()),
            });
        }
        out.push((id, v));
    }
    Ok(out)
}

pub fn format_embeddings_csv(rows: &[(String, Vec<f32>)]) -> String {
    let mut s = String::new();
    for (id, v) in rows {
        s.push_str(id);
        for x in v {
            let _ = write!(s, ",{x}");
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-7);
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(matches!(cosine_similarity(&[f32::NAN, 0.0], &[1.0, 0.0]), Err(Error::Numerical(_))));
    }

    #[test]
    fn verification_examples() {
        let sep: Vec<_> = [(0.9, true), (0.8, true), (0.1, false), (0.2, false)].to_vec();
        assert_eq!(verification_accuracy_from_scores(&sep, 2).unwrap(), 1.0);
        let flat: Vec<_> = [(0.5, true), (0.5, true), (0.5, false), (0.5, false)].to_vec();
        assert_eq!(verification_accuracy_from_scores(&flat, 2).unwrap(), 0.5);
        assert!(verification_accuracy_from_scores(&sep, 5).is_err());
    }

    #[test]
    fn tar_examples() {
        assert_eq!(tar_at_far(&[0.9, 0.8], &[0.1, 0.2], 0.1).unwrap(), 1.0);
        assert_eq!(tar_at_far(&[0.9, 0.5], &[0.6, 0.1], 0.5).unwrap(), 0.5);
        assert_eq!(tar_at_far(&[0.9, 0.5, 0.3], &[0.6, 0.1], 0.1).unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn rank1_examples() {
        let g = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(rank1_identification(&g, &[0, 1], &g, &[0, 1]).unwrap(), 1.0);
        let single = vec![vec![1.0, 0.0]];
        let probes = vec![vec![1.0, 1.0], vec![0.0, 1.0], vec![-1.0, 0.5]];
        assert!((rank1_identification(&probes, &[7, 3, 7], &single, &[7]).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn protocol_and_csv_parsing() {
        let p = PairProtocol::parse("# a,b,label\nx,y,1\nx,z,0\n", 1).unwrap();
        assert_eq!(p.pairs.len(), 2);
        assert!(PairProtocol::parse("x,y,2\n", 1).is_err());
        let rows = parse_embeddings_csv("x,1,0\ny,0.5,0.25\n").unwrap();
        assert_eq!(rows[1], ("y".to_string(), vec![0.5, 0.25]));
        assert_eq!(parse_embeddings_csv(&format_embeddings_csv(&rows)).unwrap(), rows);
        assert!(parse_embeddings_csv("x,1,0\ny,1\n").is_err());
    }
}
