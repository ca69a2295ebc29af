use proptest::prelude::*;

use pocketnet::autograd::{softmax_row, Tape};
use pocketnet::optim::{Adam, Sgd};
use pocketnet::param::{Ctx, Mode, ParamGroup, ParamStore};
use pocketnet::tensor::Tensor;

proptest! {
    #[test]
    fn softmax_is_a_distribution(v in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        let p = softmax_row(&v);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        let tape = Tape::new();
        let s = tape.constant(Tensor::from_vec(v.clone()).unwrap()).softmax();
        let s = s.value();
        prop_assert!((s.data().iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn softmax_ignores_shifts(v in prop::collection::vec(-20.0f64..20.0, 1..8), c in -30.0f64..30.0) {
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        for (a, b) in softmax_row(&v).iter().zip(softmax_row(&shifted)) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn l2_normalize_gives_unit_rows(rows in 1usize..5, cols in 1usize..9, seed in any::<u64>()) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::randn(&[rows, cols], 1.0, &mut rng).unwrap();
        let tape = Tape::new();
        let y = tape.constant(x).l2_normalize().unwrap().value();
        for r in y.data().chunks(cols) {
            prop_assert!((r.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn sum_gradient_is_ones(v in prop::collection::vec(-5.0f64..5.0, 1..20)) {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(v.clone()).unwrap().with_requires_grad(true));
        let g = tape.backward(x.sum()).unwrap();
        prop_assert!(g.get(x).unwrap().iter().all(|&d| d == 1.0));
    }

    /// Ten momentum steps on f(w) = w² against the scalar recurrence.
    #[test]
    fn sgd_matches_scalar_recurrence(
        w0 in -3.0f64..3.0,
        lr in 0.001f64..0.2,
        mu in 0.0f64..0.95,
        wd in 0.0f64..0.01,
    ) {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_vec(vec![w0]).unwrap(), ParamGroup::Weights).unwrap();
        let sgd = Sgd::new(mu, wd);
        let (mut w, mut v) = (w0, 0.0);
        for _ in 0..10 {
            let tape = Tape::new();
            let loss = {
                let mut ctx = Ctx::new(&tape, &mut store, Mode::Train, &[ParamGroup::Weights]);
                let p = ctx.param(id);
                p.mul(p).unwrap().sum()
            };
            let g = tape.backward(loss).unwrap();
            store.zero_grad();
            store.accumulate(&tape, &g);
            sgd.step(&mut store, ParamGroup::Weights, lr).unwrap();

            v = mu * v + (2.0 * w + wd * w);
            w -= lr * v;
        }
        prop_assert!((store.param(id).value.data()[0] - w).abs() <= 1e-12);
    }
}

fn quadratic_run(seed: u64) -> (u64, u64) {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f32>::new();
    let w = store.add("w", Tensor::randn(&[3, 4], 1.0, &mut rng).unwrap(), ParamGroup::Weights).unwrap();
    let a = store.add("a", Tensor::randn(&[4], 1.0, &mut rng).unwrap(), ParamGroup::Arch).unwrap();
    let sgd = Sgd::new(0.9, 5e-4);
    let mut adam = Adam::new(0.5, 0.999, 1e-3);
    for _ in 0..20 {
        let tape = Tape::new();
        let loss = {
            let mut ctx = Ctx::new(&tape, &mut store, Mode::Train, &[ParamGroup::Weights, ParamGroup::Arch]);
            let (wv, av) = (ctx.param(w), ctx.param(a));
            let y = wv.matmul_nt(av.reshape(&[1, 4]).unwrap()).unwrap();
            y.mul(y).unwrap().sum()
        };
        let g = tape.backward(loss).unwrap();
        store.zero_grad();
        store.accumulate(&tape, &g);
        sgd.step(&mut store, ParamGroup::Weights, 0.01).unwrap();
        adam.step(&mut store, ParamGroup::Arch, 0.01).unwrap();
    }
    (store.group_digest(ParamGroup::Weights), store.group_digest(ParamGroup::Arch))
}

#[test]
fn optimizers_are_deterministic() {
    assert_eq!(quadratic_run(4), quadratic_run(4));
    assert_ne!(quadratic_run(4), quadratic_run(5));
}
