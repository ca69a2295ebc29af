mod common;

use pocketnet::autograd::Tape;
use pocketnet::net::{build_network, census, count_flops, count_params, VariantSpec};
use pocketnet::param::Mode;
use pocketnet::search_space::Genotype;
use pocketnet::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::random_genotype;

/// Parameter totals against a walk over the allocated tensors.
#[test]
fn census_matches_store_walk() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut genotypes = vec![Genotype::pocketnet()];
    genotypes.extend((0..50).map(|_| random_genotype(&mut rng, 4)));
    for (i, g) in genotypes.iter().enumerate() {
        let variants: &[&str] = if i == 0 { &["S-128", "S-256", "M-128", "M-256"] } else { &["S-128"] };
        for v in variants {
            let m = build_network::<f32>(g, &v.parse().unwrap(), i as u64).unwrap();
            let walked: usize = m.store.params().iter().map(|p| p.value.len()).sum();
            let (total, stages) = count_params(&m.net);
            assert_eq!(total, walked, "{v} {g}");
            assert_eq!(stages.iter().sum::<usize>(), total);
            assert_eq!(census(&m.net).rows.iter().map(|r| r.params).sum::<usize>(), total);
        }
    }
}

#[test]
fn shipped_totals() {
    let totals: Vec<(usize, u64)> = ["S-128", "M-128"]
        .iter()
        .map(|v| {
            let m = build_network::<f32>(&Genotype::pocketnet(), &v.parse().unwrap(), 0).unwrap();
            (count_params(&m.net).0, count_flops(&m.net).0)
        })
        .collect();
    assert_eq!(totals, [(925_632, 563_770_624), (1_686_656, 1_071_915_520)]);
}

#[test]
fn flops_agree_with_traced_convolutions() {
    let v = VariantSpec::small(128).with_input_size(32);
    let mut m = build_network::<f32>(&Genotype::pocketnet(), &v, 0).unwrap();
    let tape = Tape::new();
    let x = Tensor::zeros(&[1, 3, 32, 32]).unwrap();
    m.forward(&tape, x, Mode::Eval, &[]).unwrap();
    let (f, _) = count_flops(&m.net);
    assert_eq!(f, 2 * tape.conv_macs());
}
