//! Central finite-difference checks of every differentiable tape op.

#[path = "support/gradcases.rs"]
mod gradcases;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gradcases::{dim, rand_tensor, run, SHAPES_PER_OP};
use xpeft::Tape64;

#[test]
fn matmul() {
    run("matmul");
}

#[test]
fn batched_matmul() {
    run("batched_matmul");
}

#[test]
fn transpose() {
    run("transpose");
}

#[test]
fn permute() {
    run("permute");
}

#[test]
fn reshape() {
    run("reshape");
}

#[test]
fn slice_rows() {
    run("slice_rows");
}

#[test]
fn add() {
    run("add");
}

#[test]
fn sub() {
    run("sub");
}

#[test]
fn mul() {
    run("mul");
}

#[test]
fn add_bias() {
    run("add_bias");
}

#[test]
fn scale() {
    run("scale");
}

#[test]
fn relu() {
    run("relu");
}

#[test]
fn softmax() {
    run("softmax");
}

#[test]
fn layer_norm() {
    run("layer_norm");
}

#[test]
fn cross_entropy() {
    run("cross_entropy");
}

#[test]
fn mean_pool() {
    run("mean_pool");
}

#[test]
fn embedding() {
    run("embedding");
}

#[test]
fn sum() {
    run("sum");
}

/// Mask logits through the softmax, bank aggregation and the adapter body.
#[test]
fn masked_adapter_path() {
    run("masked_adapter");
}

/// The same op graph in f32 lands within single-precision distance of f64.
#[test]
fn f32_gradients_track_f64() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for _ in 0..SHAPES_PER_OP {
        let (m, k, c) = (dim(&mut rng), dim(&mut rng) + 1, rng.random_range(2..=4));
        let x = rand_tensor(&mut rng, &[m, k]);
        let w = rand_tensor(&mut rng, &[k, c]);
        let g = rand_tensor(&mut rng, &[k]);
        let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..c)).collect();
        let grads64 = {
            let mut t = Tape64::new();
            let (vx, vw, vg) = (t.leaf(&x), t.variable(vec![k, c], w.data().to_vec()).unwrap(), t.leaf(&g));
            let zero = t.constant(vec![k], vec![0.0; k]).unwrap();
            let h = t.layer_norm(vx, vg, zero, 1e-5).unwrap();
            let logits = t.matmul(h, vw).unwrap();
            let loss = t.cross_entropy(logits, &labels).unwrap();
            t.backward(loss).unwrap();
            t.grad(vw).unwrap().to_vec()
        };
        let grads32 = {
            let mut t = xpeft::Tape::new();
            let (x, w, g) = (x.cast::<f32>(), w.cast::<f32>(), g.cast::<f32>());
            let (vx, vw, vg) = (t.leaf(&x), t.variable(vec![k, c], w.data().to_vec()).unwrap(), t.leaf(&g));
            let zero = t.constant(vec![k], vec![0.0; k]).unwrap();
            let h = t.layer_norm(vx, vg, zero, 1e-5).unwrap();
            let logits = t.matmul(h, vw).unwrap();
            let loss = t.cross_entropy(logits, &labels).unwrap();
            t.backward(loss).unwrap();
            t.grad(vw).unwrap().to_vec()
        };
        for (a, b) in grads64.iter().zip(&grads32) {
            assert!((a - *b as f64).abs() <= 1e-4 + 1e-3 * a.abs(), "{a} vs {b}");
        }
    }
}
