use ffce_core::{
    network::{ContextHead, DenseBlock, EncodingLayer, LayerCtx, Scse},
    Graph, Mode, NetworkConfig, ParamStore, Tensor, Var,
};
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        scale * (2.0 * u - 1.0)
    })
}

fn set(store: &mut ParamStore<f64>, name: &str, f: impl Fn(&mut [f64])) {
    let p = store.params_mut().iter_mut().find(|p| p.name == name).unwrap();
    f(p.value.data_mut());
}

fn run<L>(store: &ParamStore<f64>, x: &Tensor<f64>, mode: Mode, seed: u64, layer: L) -> Tensor<f64>
where
    L: FnOnce(&mut LayerCtx<'_, f64, ChaCha8Rng>, Var) -> ffce_core::Result<Var>,
{
    let mut g = Graph::new();
    let vars = store.bind(&mut g);
    let input = g.constant(x.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ctx = LayerCtx::new(&mut g, store, &vars, mode, &mut rng, 0.2);
    let out = layer(&mut ctx, input).unwrap();
    g.value(out).clone()
}

fn encode(store: &ParamStore<f64>, layer: &EncodingLayer, x: &Tensor<f64>) -> Tensor<f64> {
    run(store, x, Mode::Eval, 0, |ctx, v| layer.forward(ctx, v))
}

#[test]
fn encoding_is_invariant_to_spatial_permutation() {
    let (c, h, w, k) = (6, 4, 4, 5);
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layer = EncodingLayer::new(&mut store, "enc", c, k, &mut rng).unwrap();
        let x = uniform(&mut rng, &[2, c, h, w], 2.0);
        let plane = h * w;
        let mut perm: Vec<usize> = (0..plane).collect();
        for i in (1..plane).rev() {
            perm.swap(i, (rng.next_u64() % (i as u64 + 1)) as usize);
        }
        let permuted = Tensor::from_fn([2, c, h, w], |idx| {
            let (bc, q) = (idx / plane, idx % plane);
            x.data()[bc * plane + perm[q]]
        });
        let (e, ep) = (encode(&store, &layer, &x), encode(&store, &layer, &permuted));
        let dev = e
            .data()
            .iter()
            .zip(ep.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(dev < 1e-10, "seed {seed}: deviation {dev}");
        assert!(
            e.data().iter().any(|&v| v > 0.0),
            "seed {seed}: encoding collapsed to zero"
        );
    }
}

#[test]
fn encoding_single_zero_codeword_sums_descriptors() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let layer = EncodingLayer::new(&mut store, "enc", 3, 1, &mut rng).unwrap();
    set(&mut store, "enc.codewords", |d| d.fill(0.0));
    let x = uniform(&mut rng, &[1, 3, 2, 2], 1.0);
    let e = encode(&store, &layer, &x);
    for ch in 0..3 {
        let sum: f64 = x.data()[ch * 4..(ch + 1) * 4].iter().sum();
        assert!((e.data()[ch] - sum.max(0.0)).abs() < 1e-12);
    }
}

#[test]
fn encoding_zero_residual_gives_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let layer = EncodingLayer::new(&mut store, "enc", 3, 1, &mut rng).unwrap();
    let d = [0.5, -1.0, 2.0];
    set(&mut store, "enc.codewords", |v| v.copy_from_slice(&d));
    let x = Tensor::from_fn([1, 3, 2, 2], |i| d[i / 4]);
    assert_eq!(encode(&store, &layer, &x).data(), &[0.0; 3]);
}

fn context(store: &ParamStore<f64>, head: &ContextHead, e: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
    let mut g = Graph::new();
    let vars = store.bind(&mut g);
    let input = g.constant(e.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ctx = LayerCtx::new(&mut g, store, &vars, Mode::Eval, &mut rng, 0.0);
    let (gamma, logits) = head.forward(&mut ctx, input).unwrap();
    (g.value(gamma).clone(), g.value(logits).clone())
}

#[test]
fn context_gamma_closed_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let head = ContextHead::new(&mut store, "ctx", 4, 3, &mut rng).unwrap();
    let e = uniform(&mut rng, &[2, 4], 3.0);
    set(&mut store, "ctx.fc.weight", |w| w.fill(0.0));
    let (gamma, logits) = context(&store, &head, &e);
    assert!(gamma.data().iter().all(|&g| g == 0.5));
    assert!(logits.data().iter().all(|&z| z == 0.0));
    set(&mut store, "ctx.fc.bias", |b| b[1] = 30.0);
    let (gamma, _) = context(&store, &head, &e);
    assert!((gamma.data()[1] - 1.0).abs() < 1e-12);
    assert!((gamma.data()[4] - 1.0).abs() < 1e-12);
}

#[test]
fn context_gamma_stays_in_unit_interval() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let head = ContextHead::new(&mut store, "ctx", 8, 5, &mut rng).unwrap();
        let e = uniform(&mut rng, &[4, 8], 5.0);
        let (gamma, logits) = context(&store, &head, &e);
        for (&g, &z) in gamma.data().iter().zip(logits.data()) {
            assert!(g > 0.0 && g < 1.0);
            assert!((g - 1.0 / (1.0 + (-z).exp())).abs() < 1e-15);
        }
    }
}

fn scse_with_open_gates() -> (ParamStore<f64>, Scse) {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    let scse = Scse::new(&mut store, "se", 4, 2, &mut rng).unwrap();
    for name in ["se.fc2.weight", "se.spatial.kernel"] {
        set(&mut store, name, |w| w.fill(0.0));
    }
    for name in ["se.fc2.bias", "se.spatial.bias"] {
        set(&mut store, name, |b| b.fill(40.0));
    }
    (store, scse)
}

#[test]
fn scse_open_gates_pass_input_through() {
    let (store, scse) = scse_with_open_gates();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = uniform(&mut rng, &[2, 4, 4, 4], 3.0);
    let y = run(&store, &x, Mode::Eval, 0, |ctx, v| scse.forward(ctx, v));
    for (a, b) in x.data().iter().zip(y.data()) {
        assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
    }
}

#[test]
fn scse_never_amplifies() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let scse = Scse::new(&mut store, "se", 8, 2, &mut rng).unwrap();
        let x = uniform(&mut rng, &[2, 8, 4, 4], 4.0);
        let y = run(&store, &x, Mode::Train, seed, |ctx, v| scse.forward(ctx, v));
        assert!(x.data().iter().zip(y.data()).all(|(a, b)| b.abs() <= a.abs()));
    }
}

#[test]
fn dense_block_shapes_and_determinism() {
    let config = NetworkConfig {
        channels: 8,
        ..NetworkConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let block = DenseBlock::new(&mut store, "db", 3, &config, &mut rng).unwrap();
    let x = uniform(&mut rng, &[2, 3, 8, 8], 1.0);
    let eval_a = run(&store, &x, Mode::Eval, 1, |ctx, v| block.forward(ctx, v));
    let eval_b = run(&store, &x, Mode::Eval, 2, |ctx, v| block.forward(ctx, v));
    assert_eq!(eval_a.shape(), &[2, 8, 8, 8]);
    assert_eq!(eval_a, eval_b);
    let train_a = run(&store, &x, Mode::Train, 9, |ctx, v| block.forward(ctx, v));
    let train_b = run(&store, &x, Mode::Train, 9, |ctx, v| block.forward(ctx, v));
    assert_eq!(train_a, train_b);
    assert_ne!(train_a, eval_a);
}
