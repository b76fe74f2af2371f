//! Central finite differences against the reverse-mode gradients, one test
//! per differentiable op kind, in 64-bit.

use glm_core::tensorcore::{Graph, ParamStore, Tensor, Var};
use glm_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Compares analytic and numeric gradients of `f` for every parameter
/// element; returns the max relative error.
fn check<F>(store: &ParamStore<f64>, f: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |s: &ParamStore<f64>| -> f64 {
        let mut g = Graph::new();
        let vars = s.bind(&mut g);
        let loss = f(&mut g, &vars).unwrap();
        g.value(loss).item()
    };
    let mut g = Graph::new();
    let vars = store.bind(&mut g);
    let loss = f(&mut g, &vars).unwrap();
    let grads = g.backward(loss).unwrap();

    let mut worst = 0.0f64;
    for (id, entry) in store.iter() {
        let analytic = grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(entry.value.shape()));
        for i in 0..entry.value.numel() {
            let mut plus = store.clone();
            plus.value_mut(id).data_mut()[i] += H;
            let mut minus = store.clone();
            minus.value_mut(id).data_mut()[i] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-3);
            worst = worst.max(err);
        }
    }
    worst
}

fn store(shapes: &[&[usize]], seed: u64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    for (i, sh) in shapes.iter().enumerate() {
        s.add(format!("p{i}"), random(sh, &mut rng)).unwrap();
    }
    s
}

/// Weighted sum with fixed pseudo-random weights so every output element
/// contributes a distinct gradient.
fn probe(g: &mut Graph<f64>, x: Var) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0).collect())?;
    let w = g.constant(w);
    let y = g.mul(x, w)?;
    g.sum(y)
}

#[test]
fn matmul_and_bt() {
    let s = store(&[&[3, 4], &[4, 2], &[5, 4]], 1);
    assert!(check(&s, |g, v| {
        let y = g.matmul(v[0], v[1])?;
        probe(g, y)
    }) < TOL);
    assert!(check(&s, |g, v| {
        let y = g.matmul_bt(v[0], v[2])?;
        probe(g, y)
    }) < TOL);
}

#[test]
fn elementwise_and_broadcast() {
    let s = store(&[&[3, 4], &[3, 4], &[4]], 2);
    assert!(check(&s, |g, v| {
        let a = g.add(v[0], v[1])?;
        let b = g.sub(a, v[1])?;
        let c = g.mul(b, v[1])?;
        let d = g.add_row(c, v[2])?;
        let e = g.mul_row(d, v[2])?;
        let f = g.scale(e, 0.7)?;
        probe(g, f)
    }) < TOL);
}

#[test]
fn softmax_layernorm_activations() {
    let s = store(&[&[3, 5], &[5], &[5]], 3);
    assert!(check(&s, |g, v| {
        let y = g.softmax(v[0])?;
        probe(g, y)
    }) < TOL);
    assert!(check(&s, |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
        probe(g, y)
    }) < TOL);
    assert!(check(&s, |g, v| {
        let y = g.gelu(v[0])?;
        probe(g, y)
    }) < TOL);
    // Inputs are away from zero with overwhelming probability for relu.
    assert!(check(&s, |g, v| {
        let y = g.relu(v[0])?;
        probe(g, y)
    }) < TOL);
}

#[test]
fn gather_slice_concat_transpose() {
    let s = store(&[&[6, 3], &[2, 3], &[2, 4]], 4);
    assert!(check(&s, |g, v| {
        let e = g.embedding(v[0], &[1, 4, 1, 0])?;
        let r = g.slice_rows(e, 1, 2)?;
        let c = g.concat_rows(&[r, v[1]])?;
        let t = g.transpose(c)?;
        let sc = g.slice_cols(t, 1, 3)?;
        let cc = g.concat_cols(&[v[2], v[1]])?;
        let a = probe(g, sc)?;
        let b = probe(g, cc)?;
        g.add(a, b)
    }) < TOL);
}

#[test]
fn losses() {
    let s = store(&[&[4, 6], &[3, 2]], 5);
    assert!(check(&s, |g, v| g.cross_entropy_sum(v[0], &[1, 5, 0, 2], &[true, false, true, true])) < TOL);
    let target = Tensor::new(vec![3, 2], vec![0.3, -0.2, 0.9, 0.1, -0.5, 0.4]).unwrap();
    assert!(check(&s, |g, v| g.lp_distance_sum(v[1], &target, &[true, true, false], 2.0)) < TOL);
    assert!(check(&s, |g, v| g.lp_distance_sum(v[1], &target, &[true, false, true], 3.0)) < TOL);
    assert!(check(&s, |g, v| g.abs_sum(v[1])) < TOL);
}

#[test]
fn random_two_layer_net() {
    let s = store(&[&[5, 4], &[4, 8], &[8], &[8, 3], &[3]], 6);
    let err = check(&s, |g, v| {
        let h = g.matmul(v[0], v[1])?;
        let h = g.add_row(h, v[2])?;
        let h = g.gelu(h)?;
        let o = g.matmul(h, v[3])?;
        let o = g.add_row(o, v[4])?;
        g.cross_entropy_sum(o, &[0, 2, 1, 1, 0], &[true; 5])
    });
    assert!(err < TOL, "max relative error {err}");
}
