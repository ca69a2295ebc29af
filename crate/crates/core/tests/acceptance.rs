//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
//! Run with `cargo test --test acceptance -- --nocapture --test-threads 1`.

mod common;

use std::f64::consts::FRAC_1_SQRT_2;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pocketnet::autograd::{softmax_row, Tape};
use pocketnet::darts::{derive_genotype, search_run, SearchConfig, SplitDataset};
use pocketnet::gradcheck::{run_suite, TOLERANCE};
use pocketnet::io::checkpoint::{decode, encode};
use pocketnet::kd::{epoch_means, train_student, train_teacher, FaceModel, TrainSchedule};
use pocketnet::losses::{arcface_from_centers, KdMode, LossConfig};
use pocketnet::net::{build_network, census, count_flops, count_params, VariantSpec};
use pocketnet::param::{Builder, Ctx, Mode, ParamStore};
use pocketnet::search_space::{mixed_forward, AlphaTable, EdgeOp, Genotype, OpKind};
use pocketnet::tensor::Tensor;

use common::*;

fn verdict(n: &str, name: &str, ok: bool, detail: &str) {
    println!("criterion {n:<3} {:<4} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
}

fn stage(net: &pocketnet::net::Network, id: &str) -> usize {
    census(net).rows.iter().find(|r| r.id == id).unwrap().params
}

#[test]
fn c01_structural_oracle() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut genotypes = vec![Genotype::pocketnet()];
    genotypes.extend((0..3).map(|_| random_genotype(&mut rng, 4)));
    let expected = [
        ("S-128", [("stem", 1856), ("head", 264_192), ("gdc", 26_112), ("embedding", 65_792)]),
        ("M-128", [("stem", 3712), ("head", 526_848), ("gdc", 26_112), ("embedding", 65_792)]),
    ];
    let mut mismatches = Vec::new();
    for g in &genotypes {
        for (variant, rows) in &expected {
            let m = build_network::<f32>(g, &variant.parse().unwrap(), 0).unwrap();
            for (id, want) in rows {
                let got = stage(&m.net, id);
                if got != *want {
                    mismatches.push(format!("{variant} {id}: {got} != {want}"));
                }
            }
        }
    }
    let elapsed = t0.elapsed().as_secs_f64();
    let per_build = elapsed / (2 * genotypes.len()) as f64;
    let ok = mismatches.is_empty() && per_build < 1.0;
    verdict("1", "non-cell stage counts", ok, &format!("{} genotypes, {:.3}s per build, mismatches {mismatches:?}", genotypes.len(), per_build));
    assert!(ok);
}

#[test]
fn c02_embedding_width_delta() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut deltas = Vec::new();
    for g in [Genotype::pocketnet(), random_genotype(&mut rng, 4)] {
        for (a, b) in [("S-128", "S-256"), ("M-128", "M-256")] {
            let pa = count_params(&build_network::<f32>(&g, &a.parse().unwrap(), 0).unwrap().net).0;
            let pb = count_params(&build_network::<f32>(&g, &b.parse().unwrap(), 0).unwrap().net).0;
            deltas.push(pb - pa);
        }
    }
    assert_eq!(991_424 - 925_632, 65_792);
    assert_eq!(1_752_448 - 1_686_656, 65_792);
    let ok = deltas.iter().all(|&d| d == 65_792);
    verdict("2", "embedding-width delta", ok, &format!("deltas {deltas:?}"));
    assert!(ok);
}

#[test]
fn c03_shipped_genotype_totals() {
    let t0 = Instant::now();
    let m = build_network::<f32>(&Genotype::pocketnet(), &VariantSpec::small(128), 0).unwrap();
    let (p, _) = count_params(&m.net);
    let (f, _) = count_flops(&m.net);
    let dp = (p as f64 - 925_632.0).abs() / 925_632.0;
    let df = (f as f64 - 587.11e6).abs() / 587.11e6;
    let secs = t0.elapsed().as_secs_f64();
    let ok = dp <= 0.02 && df <= 0.15 && secs < 1.0;
    verdict(
        "3",
        "shipped genotype totals",
        ok,
        &format!("params {p} ({:+.2}%), flops {:.2}M ({:+.2}%), {secs:.3}s", 100.0 * dp, f as f64 / 1e6, 100.0 * (f as f64 / 587.11e6 - 1.0)),
    );
    assert!(ok);
}

#[test]
fn c04_gradient_suite() {
    let t0 = Instant::now();
    let reports = run_suite(20).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed()).map(|r| r.op).collect();
    let worst = reports.iter().map(|r| r.worst_error).fold(0.0, f64::max);
    let ok = failed.is_empty() && secs < 120.0 && reports.iter().all(|r| r.seeds >= 20);
    verdict(
        "4",
        "gradient suite",
        ok,
        &format!("{} ops x 20 seeds, worst rel err {worst:.2e} (< {TOLERANCE}), {secs:.2}s, failed {failed:?}", reports.len()),
    );
    assert!(ok);
}

#[test]
fn c05_mixture_properties() {
    let mut worst_sum: f64 = 0.0;
    let mut worst_sat: f64 = 0.0;
    let mut worst_uni: f64 = 0.0;
    for seed in 0..4u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..50 {
            let a: Vec<f64> = (0..8).map(|_| rng.random_range(-50.0..50.0)).collect();
            worst_sum = worst_sum.max((softmax_row(&a).iter().sum::<f64>() - 1.0).abs());
        }
        let mut table = AlphaTable::zeros(4, OpKind::ALL.to_vec()).unwrap();
        for row in table.normal.iter_mut() {
            row.iter_mut().for_each(|v| *v = rng.random_range(-5.0..5.0));
        }
        for w in table.weights(false) {
            worst_sum = worst_sum.max((w.iter().sum::<f64>() - 1.0).abs());
        }

        for stride in [1, 2] {
            let mut store = ParamStore::<f64>::new();
            let ops: Vec<EdgeOp> = {
                let mut b = Builder::new(&mut store, &mut rng);
                OpKind::ALL
                    .iter()
                    .map(|&k| EdgeOp::build(&mut b, k, 4, stride).unwrap())
                    .collect()
            };
            let x = Tensor::<f64>::randn(&[2, 4, 6, 6], 1.0, &mut rng).unwrap();
            let tape = Tape::new();
            let mut ctx = Ctx::new(&tape, &mut store, Mode::Eval, &[]);
            let xv = tape.constant(x);
            let singles: Vec<Tensor<f64>> = ops.iter().map(|o| (*o.forward(&mut ctx, xv).unwrap().value()).clone()).collect();
            for k in 0..8 {
                let mut a = vec![-50.0; 8];
                a[k] = 50.0;
                let y = mixed_forward(&mut ctx, tape.constant(Tensor::new(&[8], a).unwrap()), &ops, xv).unwrap();
                worst_sat = worst_sat.max(y.value().max_abs_diff(&singles[k]));
            }
            let y = mixed_forward(&mut ctx, tape.constant(Tensor::zeros(&[8]).unwrap()), &ops, xv).unwrap();
            let n = singles[0].len();
            let mean: Vec<f64> = (0..n).map(|i| singles.iter().map(|s| s.data()[i]).sum::<f64>() / 8.0).collect();
            let mean = Tensor::new(singles[0].shape(), mean).unwrap();
            worst_uni = worst_uni.max(y.value().max_abs_diff(&mean));
        }
    }
    let ok = worst_sum <= 1e-6 && worst_sat <= 1e-4 && worst_uni <= 1e-5;
    verdict(
        "5",
        "mixed-edge properties",
        ok,
        &format!("|sum-1| {worst_sum:.1e}, saturated {worst_sat:.1e}, uniform {worst_uni:.1e}"),
    );
    assert!(ok);
}

/// Best (edge pair, op pair) per node by total softmax weight of the chosen
/// ops, enumerating every combination.
fn exhaustive(table: &AlphaTable, rows: &[Vec<f64>]) -> Vec<[(usize, OpKind); 2]> {
    let probs: Vec<Vec<f64>> = rows.iter().map(|r| softmax_row(r)).collect();
    let mut e0 = 0;
    let mut out = Vec::new();
    for j in 0..table.n_intermediate {
        let n_in = j + 2;
        let mut best: Option<(f64, [(usize, OpKind); 2])> = None;
        for a in 0..n_in {
            for b in a + 1..n_in {
                for (ka, &opa) in table.candidates.iter().enumerate() {
                    for (kb, &opb) in table.candidates.iter().enumerate() {
                        if opa == OpKind::Zero || opb == OpKind::Zero {
                            continue;
                        }
                        let score = probs[e0 + a][ka] + probs[e0 + b][kb];
                        if best.is_none_or(|(s, _)| score > s) {
                            best = Some((score, [(a, opa), (b, opb)]));
                        }
                    }
                }
            }
        }
        out.push(best.unwrap().1);
        e0 += n_in;
    }
    out
}

#[test]
fn c06_derivation_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = 0;
    for _ in 0..100 {
        let mut t = AlphaTable::zeros(2, OpKind::ALL.to_vec()).unwrap();
        for row in t.normal.iter_mut().chain(t.reduce.iter_mut()) {
            row.iter_mut().for_each(|v| *v = rng.random_range(-3.0..3.0));
        }
        let g = derive_genotype(&t).unwrap();
        for (cell, rows) in [(&g.normal, &t.normal), (&g.reduce, &t.reduce)] {
            let want = exhaustive(&t, rows);
            let got: Vec<[(usize, OpKind); 2]> = cell.iter().map(|n| [(n[0].from, n[0].op), (n[1].from, n[1].op)]).collect();
            mismatches += usize::from(got != want);
        }
    }
    let ok = mismatches == 0;
    verdict("6", "derivation oracle", ok, &format!("100 tables, {mismatches} mismatching cells"));
    assert!(ok);
}

#[test]
fn c07_arcface_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let f = Tensor::<f64>::randn(&[5, 6], 1.0, &mut rng).unwrap();
        let w = Tensor::<f64>::randn(&[4, 6], 1.0, &mut rng).unwrap();
        let labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..4)).collect();
        let tape = Tape::new();
        let arc = arcface_from_centers(tape.constant(f.clone()), tape.constant(w.clone()), &labels, 1.0, 0.0).unwrap();
        // plain cosine-logit cross-entropy, computed directly
        let norm = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut ce = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let fi = &f.data()[i * 6..(i + 1) * 6];
            let logits: Vec<f64> = (0..4)
                .map(|c| {
                    let wc = &w.data()[c * 6..(c + 1) * 6];
                    fi.iter().zip(wc).map(|(a, b)| a * b).sum::<f64>() / (norm(fi) * norm(wc))
                })
                .collect();
            let lse = logits.iter().map(|l| l.exp()).sum::<f64>().ln();
            ce += lse - logits[y];
        }
        worst = worst.max((arc.item() - ce / 5.0).abs());
    }
    let two_class = |f: [f64; 2]| {
        let tape = Tape::<f64>::new();
        let fv = tape.constant(Tensor::new(&[1, 2], f.to_vec()).unwrap());
        let wv = tape.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        arcface_from_centers(fv, wv, &[0], 64.0, 0.5).unwrap().item()
    };
    let aligned = two_class([1.0, 0.0]);
    let diagonal = two_class([FRAC_1_SQRT_2, FRAC_1_SQRT_2]);
    let pi4 = std::f64::consts::FRAC_PI_4;
    let hand = 64.0 * pi4.cos() - 64.0 * (pi4 + 0.5).cos();
    let rel = (diagonal - hand).abs() / hand;
    let ok = worst <= 1e-6 && aligned < 1e-20 && rel <= 1e-3;
    verdict(
        "7",
        "margin-loss reductions",
        ok,
        &format!("m=0,s=1 max diff {worst:.1e}; aligned {aligned:.2e}; diagonal {diagonal:.4} vs 64cos(pi/4)-64cos(pi/4+0.5) = {hand:.4} (rel {rel:.1e})"),
    );
    assert!(ok);
}

#[test]
fn c08_multistep_synchronization() {
    let data = toy_faces();
    let dir = tempfile::tempdir().unwrap();
    let sched = TrainSchedule::for_epochs(3, data.len(), 20, 0.1, 0).unwrap();
    let mut teacher = FaceModel::<f32>::new(toy_teacher_arch(data.classes), 100).unwrap();
    let run = train_teacher(&mut teacher, &data, &sched, dir.path()).unwrap();
    let before = tree_digest(dir.path());
    let mut student = FaceModel::<f32>::new(toy_student_arch(data.classes), 200).unwrap();
    let cfg = LossConfig::new(100.0, KdMode::MultiStep).unwrap();
    let history = train_student(&mut student, &data, &sched, &cfg, Some(&run.timeline)).unwrap();
    let after = tree_digest(dir.path());
    let synced = history.iter().all(|r| r.teacher_epoch_used == Some(r.epoch));
    let ok = synced && before == after && history.len() == sched.total_iterations;
    verdict(
        "8",
        "multi-step synchronization",
        ok,
        &format!("{} rows synchronized: {synced}; {} teacher files unchanged: {}", history.len(), before.len(), before == after),
    );
    assert!(ok);
}

/// Shared fixed-seed toy run for criterion 9.
struct ToyRun {
    search_val: Vec<f64>,
    genotype_valid: bool,
    arc: [Vec<f64>; 3],
    final_mse: [Option<f64>; 3],
    secs: f64,
}

fn toy_run() -> ToyRun {
    let t0 = Instant::now();
    let data = toy_faces();
    let cfg = SearchConfig {
        epochs: 5,
        batch_size: 20,
        init_channels: 8,
        n_cells: 3,
        seed: 1,
        ..SearchConfig::default()
    };
    let out = search_run::<f32>(&SplitDataset::from_dataset(&data).unwrap(), &cfg).unwrap();
    let g = derive_genotype(&out.alphas).unwrap();
    let genotype_valid = g.validate().is_ok() && g.to_string().parse::<Genotype>().unwrap() == g;

    let dir = tempfile::tempdir().unwrap();
    let sched = TrainSchedule::for_epochs(3, data.len(), 20, 0.1, 0).unwrap();
    let mut teacher = FaceModel::<f32>::new(toy_teacher_arch(data.classes), 100).unwrap();
    let run = train_teacher(&mut teacher, &data, &sched, dir.path()).unwrap();
    let mut arc: [Vec<f64>; 3] = Default::default();
    let mut final_mse = [None; 3];
    for (i, mode) in [KdMode::None, KdMode::Converged, KdMode::MultiStep].into_iter().enumerate() {
        let mut s = FaceModel::<f32>::new(toy_student_arch(data.classes), 200).unwrap();
        let h = train_student(&mut s, &data, &sched, &LossConfig::new(100.0, mode).unwrap(), Some(&run.timeline)).unwrap();
        let m = epoch_means(&h);
        arc[i] = m.iter().map(|e| e.arc_loss).collect();
        final_mse[i] = m.last().unwrap().mse_loss;
    }
    ToyRun {
        search_val: out.history.iter().map(|h| h.val_loss).collect(),
        genotype_valid,
        arc,
        final_mse,
        secs: t0.elapsed().as_secs_f64(),
    }
}

#[test]
fn c09_toy_end_to_end() {
    let r = toy_run();
    let val_down = r.search_val.last() < r.search_val.first();
    let ok_a = r.genotype_valid && val_down;
    verdict("9a", "toy search", ok_a, &format!("valid genotype {}, val loss per epoch {:?}", r.genotype_valid, r.search_val));

    let decreasing = |v: &[f64]| v.windows(2).all(|w| w[1] < w[0]);
    let ok_b = r.arc.iter().all(|a| decreasing(a));
    verdict("9b", "toy students", ok_b, &format!("arc loss per epoch none {:?} converged {:?} multi-step {:?}", r.arc[0], r.arc[1], r.arc[2]));

    let (conv, multi) = (r.final_mse[1].unwrap(), r.final_mse[2].unwrap());
    let ok_c = multi <= conv;
    verdict("9c", "toy distillation ordering", ok_c, &format!("final-epoch mse multi-step {multi:.5} vs converged {conv:.5}"));
    let ok_t = r.secs < 30.0 * 60.0;
    verdict("9", "toy runtime", ok_t, &format!("{:.1}s", r.secs));
    assert!(ok_a && ok_b && ok_t, "criterion 9a/9b/runtime failed");
    assert!(ok_c, "criterion 9c failed: multi-step {multi} > converged {conv}");
}

fn random_arrays(rng: &mut ChaCha8Rng) -> Vec<(String, Tensor<f32>)> {
    let n = rng.random_range(0..8);
    (0..n)
        .map(|i| {
            let rank = rng.random_range(1..=4);
            let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(1..5)).collect();
            let len: usize = shape.iter().product();
            let data = (0..len).map(|_| f32::from_bits(rng.random())).collect();
            (format!("array{i}.{}", rng.random::<u16>()), Tensor::new(&shape, data).unwrap())
        })
        .collect()
}

fn run_cli(args: &[&str]) {
    let st = Command::new(env!("CARGO_BIN_EXE_pocketnet")).args(args).status().unwrap();
    assert!(st.success(), "pocketnet {args:?} failed");
}

#[test]
fn c10_persistence() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut exact = 0;
    for _ in 0..100 {
        let arrays = random_arrays(&mut rng);
        let back = decode(&encode(&arrays).unwrap()).unwrap();
        let bits = |a: &[(String, Tensor<f32>)]| -> Vec<(String, Vec<usize>, Vec<u32>)> {
            a.iter().map(|(n, t)| (n.clone(), t.shape().to_vec(), t.data().iter().map(|v| v.to_bits()).collect())).collect()
        };
        exact += usize::from(bits(&arrays) == bits(&back));
    }

    let root = tempfile::tempdir().unwrap();
    let genotype = concat!(env!("CARGO_MANIFEST_DIR"), "/../../pocketnet.genotype");
    let mut digests = Vec::new();
    for run in ["a", "b"] {
        let d = root.path().join(run);
        std::fs::create_dir_all(&d).unwrap();
        let p = |s: &str| d.join(s).to_string_lossy().into_owned();
        run_cli(&["synth-data", "--ids", "4", "--per-id", "6", "--size", "32", "--seed", "3", "--out", &p("data.pkds")]);
        run_cli(&["search", "--data", &p("data.pkds"), "--epochs", "1", "--batch-size", "6", "--init-channels", "4", "--cells", "3", "--out", &p("search")]);
        let model = ["--genotype", genotype, "--stem-channels", "8", "--embedding-dim", "8", "--head-width", "16", "--batch-size", "6", "--epochs", "2"];
        let mut t = vec!["train-teacher", "--data"];
        let data = p("data.pkds");
        t.push(&data);
        t.extend(model);
        let tout = p("teacher");
        t.extend(["--out", &tout]);
        run_cli(&t);
        let mut s = vec!["train-student", "--data", &data, "--kd-mode", "multi-step", "--teacher", &tout];
        s.extend(model);
        let sout = p("student");
        s.extend(["--out", &sout]);
        run_cli(&s);
        run_cli(&["eval", "--model", &sout, "--data", &data, "--out", &p("metrics.csv")]);
        run_cli(&["count", "--variant", "S-128", "--genotype", genotype, "--out", &p("count.csv")]);
        digests.push(tree_digest(&d));
    }
    let same = digests[0] == digests[1];
    let ok = exact == 100 && same;
    verdict(
        "10",
        "persistence",
        ok,
        &format!("{exact}/100 checkpoint roundtrips bit-exact; {} CLI output files digest-identical across runs: {same}", digests[0].len()),
    );
    assert!(ok);
}
