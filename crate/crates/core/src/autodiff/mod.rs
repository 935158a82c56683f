//! Tape-based reverse-mode differentiation for the handful of dense
//! operations the backbone, adapters and heads need.

mod kernels;
mod tape;

pub use tape::{Tape, Var};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn close(a: f32, b: f32, tol: f32) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_examples() {
        let mut t = Tape::<f32>::new();
        let id = t.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = t.constant(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let out = t.matmul(id, m).unwrap();
        assert_eq!(t.value(out), &[3.0, 4.0, 5.0, 6.0]);

        let row = t.constant(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let col = t.constant(vec![2, 1], vec![3.0, 4.0]).unwrap();
        let out = t.matmul(row, col).unwrap();
        assert_eq!(t.value(out), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::<f32>::new();
        let a = t.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = t.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let msg = t.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_sum_gradient_is_ones_times_b_transposed() {
        let mut t = Tape::<f32>::new();
        let a = t.variable(vec![2, 3], vec![0.5, -1.0, 2.0, 0.0, 1.5, -0.5]).unwrap();
        let b = t.variable(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = t.matmul(a, b).unwrap();
        let s = t.sum(c);
        t.backward(s).unwrap();
        // ones[2x2] · bᵀ: every row is the row sums of b
        assert_eq!(t.grad(a).unwrap(), &[3.0, 7.0, 11.0, 3.0, 7.0, 11.0]);
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::<f32>::new();
        let x = t.constant(vec![3], vec![0.0, 0.0, 0.0]).unwrap();
        let y = t.softmax(x, 0).unwrap();
        for &v in t.value(y) {
            assert!(close(v, 1.0 / 3.0, 1e-7));
        }
        let x = t.constant(vec![3], vec![1000.0, 0.0, 0.0]).unwrap();
        let y = t.softmax(x, 0).unwrap();
        assert_eq!(t.value(y), &[1.0, 0.0, 0.0]);
        let x = t.constant(vec![2], vec![f32::NAN, 0.0]).unwrap();
        assert!(t.softmax(x, 0).is_err());
    }

    #[test]
    fn softmax_along_leading_axis() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(vec![2, 3], vec![0.0, 1.0, 2.0, 0.0, 1.0, 2.0]).unwrap();
        let y = t.softmax(x, 0).unwrap();
        for v in t.value(y) {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut t = Tape::<f32>::new();
        let g = t.constant(vec![3], vec![1.0; 3]).unwrap();
        let b = t.constant(vec![3], vec![0.0; 3]).unwrap();

        let flat = t.constant(vec![1, 3], vec![4.0, 4.0, 4.0]).unwrap();
        let y = t.layer_norm(flat, g, b, 1e-5).unwrap();
        assert_eq!(t.value(y), &[0.0, 0.0, 0.0]);

        let x = t.constant(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = t.layer_norm(x, g, b, 1e-6).unwrap();
        let v = t.value(y);
        let mean = v.iter().sum::<f32>() / 3.0;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f32>() / 3.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-5, "variance {var}");

        let empty_g = t.constant(vec![0], vec![]).unwrap();
        let empty = t.constant(vec![2, 0], vec![]).unwrap();
        assert!(t.layer_norm(empty, empty_g, empty_g, 1e-5).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let mut t = Tape::<f64>::new();
        let uniform = t.constant(vec![2, 5], vec![0.3; 10]).unwrap();
        let loss = t.cross_entropy(uniform, &[0, 4]).unwrap();
        assert!((t.item(loss) - 5f64.ln()).abs() < 1e-12);

        let sure = t.constant(vec![1, 3], vec![0.0, 100.0, 0.0]).unwrap();
        let loss = t.cross_entropy(sure, &[1]).unwrap();
        assert!(t.item(loss) < 1e-30);

        let err = t.cross_entropy(sure, &[3]).unwrap_err().to_string();
        assert!(err.contains("label 3 at index 0"), "{err}");
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut t = Tape::<f64>::new();
        let x = t.variable(vec![2, 2], vec![0.0, 0.0, 1.0, -1.0]).unwrap();
        let loss = t.cross_entropy(x, &[0, 1]).unwrap();
        t.backward(loss).unwrap();
        let g = t.grad(x).unwrap();
        let p = 1.0 / (1.0 + (-2f64).exp());
        let want = [-0.25, 0.25, p / 2.0, (1.0 - p - 1.0) / 2.0];
        for (a, b) in g.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{g:?}");
        }
    }

    #[test]
    fn detach_passes_values_and_blocks_gradient() {
        let mut t = Tape::<f32>::new();
        let x = t.variable(vec![3], vec![1.0, -2.0, 3.0]).unwrap();
        let d = t.detach(x);
        assert_eq!(t.value(d), t.value(x));
        let y = t.add(d, x).unwrap();
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
        assert!(t.grad(d).is_none());
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut t = Tape::<f32>::new();
        let w = t.leaf(&Tensor::ones(&[2, 2]));
        let x = t.leaf(&Tensor::ones(&[2, 2]).with_requires_grad(true));
        let y = t.matmul(x, w).unwrap();
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert!(t.grad(x).is_some());
        assert!(t.grad(w).is_none());
    }

    #[test]
    fn repeated_backward_is_bitwise_identical() {
        let mut t = Tape::<f32>::new();
        let x = t.variable(vec![2, 3], vec![0.1, 0.7, -0.3, 1.2, -0.8, 0.4]).unwrap();
        let y = t.softmax(x, 1).unwrap();
        let z = t.relu(y);
        let s = t.sum(z);
        t.backward(s).unwrap();
        let first = t.grad(x).unwrap().to_vec();
        t.backward(s).unwrap();
        assert_eq!(first, t.grad(x).unwrap());
    }

    #[test]
    fn embedding_rejects_out_of_range() {
        let mut t = Tape::<f32>::new();
        let table = t.constant(vec![4, 2], vec![0.0; 8]).unwrap();
        assert!(t.embedding(table, &[0, 3]).is_ok());
        assert!(t.embedding(table, &[0, 4]).is_err());
    }

    #[test]
    fn backward_requires_scalar_target() {
        let mut t = Tape::<f32>::new();
        let x = t.variable(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(t.backward(x).is_err());
    }
}
