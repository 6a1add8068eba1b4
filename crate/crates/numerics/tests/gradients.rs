use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trajrefine_numerics::gradcheck::check_gradients;
use trajrefine_numerics::{
    laplace_nll, Graph, GruCell, Mlp, MultiHeadAttention, ParameterStore, Result, Tensor, Var,
};

const TOL: f64 = 1e-4;
const H: f64 = 1e-4;

fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

/// Runs `build` once with backward, then checks 10 probes against central
/// differences of the same forward.
fn assert_gradients(
    store: &ParameterStore,
    prefix: &str,
    seed: u64,
    build: impl Fn(&mut Graph) -> Result<Var>,
) {
    let mut g = Graph::new(store);
    let out = build(&mut g).unwrap();
    g.backward(out).unwrap();
    let grads = g.param_grads();
    let report = check_gradients(store, &grads, prefix, 10, H, seed, |s| {
        let mut g = Graph::new(s);
        let out = build(&mut g)?;
        Ok(g.scalar(out))
    })
    .unwrap();
    assert_eq!(report.probes.len(), 10);
    assert!(
        report.passes(TOL),
        "max relative error {:e}: {:?}",
        report.max_relative_error(),
        report.probes
    );
}

#[test]
fn mlp_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParameterStore::new();
    let mlp = Mlp::new("mlp", 5, 16, 3);
    mlp.init(&mut store, &mut rng).unwrap();
    let x = random(4, 5, &mut rng);
    assert_gradients(&store, "mlp", 11, |g| {
        let x = g.constant(x.clone())?;
        let y = mlp.forward(g, x)?;
        let y = g.tanh(y)?;
        g.sum(y)
    });
}

#[test]
fn attention_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParameterStore::new();
    let attn = MultiHeadAttention::new("attn", 16, 4).unwrap();
    attn.init(&mut store, &mut rng).unwrap();
    let q = random(3, 16, &mut rng);
    let kv = random(7, 16, &mut rng);
    let w = random(3, 16, &mut rng);
    assert_gradients(&store, "attn", 12, |g| {
        let q = g.constant(q.clone())?;
        let kv = g.constant(kv.clone())?;
        let w = g.constant(w.clone())?;
        let y = attn.forward_segmented(g, q, kv, kv, &[0..7, 2..5, 6..7])?;
        let y = g.mul(y, w)?;
        g.sum(y)
    });
}

#[test]
fn attention_gradients_with_dropout_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParameterStore::new();
    let attn = MultiHeadAttention::new("attn", 16, 8).unwrap();
    attn.init(&mut store, &mut rng).unwrap();
    let q = random(2, 16, &mut rng);
    let kv = random(9, 16, &mut rng);
    let mut g = Graph::new(&store).with_dropout(0.1, 99);
    let build = |g: &mut Graph| -> Result<Var> {
        let q = g.constant(q.clone())?;
        let kv = g.constant(kv.clone())?;
        let y = attn.forward(g, q, kv, kv)?;
        let y = g.sigmoid(y)?;
        g.sum(y)
    };
    let out = build(&mut g).unwrap();
    g.backward(out).unwrap();
    let grads = g.param_grads();
    let report = check_gradients(&store, &grads, "attn", 10, H, 13, |s| {
        let mut g = Graph::new(s).with_dropout(0.1, 99);
        let out = build(&mut g)?;
        Ok(g.scalar(out))
    })
    .unwrap();
    assert!(report.passes(TOL), "{:?}", report.probes);
}

#[test]
fn attention_weights_are_normalized() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParameterStore::new();
    let attn = MultiHeadAttention::new("attn", 64, 8).unwrap();
    attn.init(&mut store, &mut rng).unwrap();
    let mut g = Graph::new(&store);
    let q = g.constant(random(5, 64, &mut rng)).unwrap();
    let kv = g.constant(random(11, 64, &mut rng)).unwrap();
    let (_, weights) = attn.forward_with_weights(&mut g, q, kv, kv).unwrap();
    assert_eq!(weights.len(), 5 * 8);
    for w in weights {
        assert_eq!(w.len(), 11);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn single_key_attention_ignores_query() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParameterStore::new();
    let attn = MultiHeadAttention::new("attn", 16, 8).unwrap();
    attn.init(&mut store, &mut rng).unwrap();
    let kv = random(1, 16, &mut rng);
    let mut outputs = Vec::new();
    for _ in 0..3 {
        let mut g = Graph::new(&store);
        let q = g.constant(random(1, 16, &mut rng)).unwrap();
        let kvv = g.constant(kv.clone()).unwrap();
        let y = attn.forward(&mut g, q, kvv, kvv).unwrap();
        outputs.push(g.value(y).clone());
    }
    // value projection followed by output projection
    let proj = |name: &str, x: &Tensor| {
        let w = store.get(&format!("attn/{name}/w")).unwrap();
        let b = store.get(&format!("attn/{name}/b")).unwrap();
        let mut y = x.matmul(w).unwrap();
        y.add_assign(b);
        y
    };
    let want = proj("o", &proj("v", &kv));
    for out in outputs {
        for (a, b) in out.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn gru_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParameterStore::new();
    let gru = GruCell::new("gru", 6, 8);
    gru.init(&mut store, &mut rng).unwrap();
    let h0 = random(3, 8, &mut rng);
    let xs: Vec<Tensor> = (0..3).map(|_| random(3, 6, &mut rng)).collect();
    assert_gradients(&store, "gru", 14, |g| {
        let mut h = g.constant(h0.clone())?;
        for x in &xs {
            let x = g.constant(x.clone())?;
            h = gru.step(g, h, x)?;
        }
        let h = g.mul(h, h)?;
        g.sum(h)
    });
}

#[test]
fn gru_half_carry_with_zero_gates() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParameterStore::new();
    let gru = GruCell::new("gru", 4, 5);
    gru.init(&mut store, &mut rng).unwrap();
    store.zero_prefix("gru");
    let mut g = Graph::new(&store);
    let h = random(2, 5, &mut rng);
    let hv = g.constant(h.clone()).unwrap();
    let x = g.constant(random(2, 4, &mut rng)).unwrap();
    let out = gru.step(&mut g, hv, x).unwrap();
    for (a, b) in g.value(out).data().iter().zip(h.data()) {
        assert!((a - 0.5 * b).abs() < 1e-15);
    }
}

#[test]
fn gru_output_stays_in_unit_interval() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParameterStore::new();
    let gru = GruCell::new("gru", 4, 6);
    gru.init(&mut store, &mut rng).unwrap();
    let mut g = Graph::new(&store);
    let mut h = g.constant(random(4, 6, &mut rng)).unwrap();
    for _ in 0..20 {
        let x = g.constant(random(4, 4, &mut rng).map(|v| v * 10.0)).unwrap();
        h = gru.step(&mut g, h, x).unwrap();
        assert!(g.value(h).data().iter().all(|v| v.abs() < 1.0));
    }
}

#[test]
fn primitive_op_gradients() {
    // Every elementwise and structural op, routed through one parameter.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParameterStore::new();
    store.insert("p/a", random(3, 4, &mut rng)).unwrap();
    store.insert("p/b", random(3, 4, &mut rng).map(|v| v.abs() + 0.5)).unwrap();
    store.insert("p/c", random(3, 1, &mut rng)).unwrap();
    store.insert("p/r", random(1, 4, &mut rng)).unwrap();
    for seed in 0..3 {
        assert_gradients(&store, "p", 20 + seed, |g| {
            let a = g.param("p/a")?;
            let b = g.param("p/b")?;
            let c = g.param("p/c")?;
            let r = g.param("p/r")?;
            let x = g.div(a, b)?;
            let x = g.add_row(x, r)?;
            let x = g.mul_col(x, c)?;
            let sp = g.softplus(x)?;
            let lb = g.log(b)?;
            let e = g.exp(lb)?;
            let t = g.transpose(e)?;
            let t = g.reshape(t, 3, 4)?;
            let s = g.sub(sp, t)?;
            let ab = g.abs(s)?;
            let left = g.slice_cols(ab, 0, 2)?;
            let right = g.slice_cols(ab, 2, 2)?;
            let cat = g.concat_cols(&[right, left])?;
            let top = g.slice_rows(cat, 0, 1)?;
            let rest = g.slice_rows(cat, 1, 2)?;
            let stacked = g.concat_rows(&[rest, top])?;
            let padded = g.pad_cols(stacked, 1, 6)?;
            let sm = g.softmax_rows(padded)?;
            let lsm = g.log_softmax_rows(x)?;
            let e0 = g.element(lsm, 1, 2)?;
            let m = g.mean(sm)?;
            let sq = g.mul(sm, sm)?;
            let s2 = g.sum(sq)?;
            let k = g.scale(s2, 3.0)?;
            let k = g.add_scalar(k, 1.0)?;
            let total = g.add(k, m)?;
            g.add(total, e0)
        });
    }
}

#[test]
fn laplace_gradient_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut store = ParameterStore::new();
    store.insert("l/mu", random(5, 2, &mut rng)).unwrap();
    store.insert("l/raw", random(5, 2, &mut rng)).unwrap();
    let target = random(5, 2, &mut rng);
    assert_gradients(&store, "l", 30, |g| {
        let mu = g.param("l/mu")?;
        let raw = g.param("l/raw")?;
        let b = g.softplus(raw)?;
        let b = g.add_scalar(b, 1e-3)?;
        let t = g.constant(target.clone())?;
        laplace_nll(g, mu, b, t)
    });
}
