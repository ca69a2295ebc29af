#![allow(dead_code)]

use std::path::Path;

use rand::Rng;
use sha2::{Digest, Sha256};

use pocketnet::io::{synth_identities, Dataset, SynthConfig};
use pocketnet::kd::ModelArch;
use pocketnet::net::VariantSpec;
use pocketnet::search_space::{CellGenotype, Genotype, NodeInput, OpKind};

pub fn random_cell<R: Rng>(rng: &mut R, n: usize) -> CellGenotype {
    (0..n)
        .map(|j| {
            let mut pick = || NodeInput {
                from: rng.random_range(0..j + 2),
                op: OpKind::ALL[rng.random_range(0..7)],
            };
            [pick(), pick()]
        })
        .collect()
}

pub fn random_genotype<R: Rng>(rng: &mut R, n: usize) -> Genotype {
    let normal = random_cell(rng, n);
    let reduce = random_cell(rng, n);
    Genotype::new(n, normal, reduce).unwrap()
}

/// Ten identities, twenty 32×32 samples each.
pub fn toy_faces() -> Dataset {
    synth_identities(&SynthConfig::new(10, 20, 32, 7)).unwrap()
}

pub fn toy_teacher_arch(classes: usize) -> ModelArch {
    ModelArch {
        variant: VariantSpec::custom(16, [1, 1, 1], 16, 32).with_head_width(64),
        genotype: Genotype::pocketnet(),
        classes,
        scale: 64.0,
        margin: 0.5,
    }
}

pub fn toy_student_arch(classes: usize) -> ModelArch {
    ModelArch {
        variant: VariantSpec::custom(8, [1, 1, 1], 16, 32).with_head_width(32),
        genotype: Genotype::pocketnet(),
        classes,
        scale: 64.0,
        margin: 0.5,
    }
}

pub fn sha256_file(path: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(path).unwrap()))
}

/// Digest of every regular file below `dir`, keyed by relative path.
pub fn tree_digest(dir: &Path) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, sha256_file(&p)));
            }
        }
    }
    out.sort();
    out
}
