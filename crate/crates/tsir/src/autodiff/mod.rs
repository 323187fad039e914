//! Reverse-mode differentiation engine and optimizer.

mod adam;
mod gradcheck;
mod graph;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::finite_diff_check;
pub use graph::{Gradients, Graph, Tensor};

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matmul_identity() {
        let g = Graph::new();
        let eye = g
            .constant(
                vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
                &[3, 3],
            )
            .unwrap();
        let x = g
            .constant((0..12).map(|i| i as f64 * 0.5 - 2.0).collect(), &[3, 4])
            .unwrap();
        let y = g.matmul(eye, x).unwrap();
        assert_eq!(g.values(y), g.values(x));
    }

    #[test]
    fn softmax_uniform_on_constant_row() {
        let g = Graph::new();
        let x = g.constant(vec![0.0, 0.0, 0.0], &[1, 3]).unwrap();
        let s = g.softmax_last(x).unwrap();
        for v in g.values(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layernorm_of_constant_row_is_epsilon_small() {
        let g = Graph::new();
        let x = g.constant(vec![5.0; 8], &[1, 8]).unwrap();
        let y = g.layer_norm_last(x, 1e-5).unwrap();
        for v in g.values(y) {
            assert!(v.abs() < 1e-2);
        }
    }

    #[test]
    fn backward_quadratic() {
        let g = Graph::new();
        let w = g.parameter(vec![1.0, 2.0], &[2]).unwrap();
        let sq = g.mul(w, w).unwrap();
        // sum via mean * n
        let loss = g.mul_const(g.mean_all(sq).unwrap(), 2.0).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_of_self_difference_is_zero() {
        let g = Graph::new();
        let x = g.parameter(vec![0.5, -1.5, 3.0], &[3]).unwrap();
        let d = g.sub(x, x).unwrap();
        let loss = g.mean_all(g.abs(d).unwrap()).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let g = Graph::new();
        let x = g.parameter(vec![1.0, 2.0], &[2]).unwrap();
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let g = Graph::new();
        let a = g.constant(vec![1.0, 2.0], &[2]).unwrap();
        let b = g.constant(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        assert!(g.add(a, b).is_err());
        assert!(g.matmul(a, b).is_err());
    }

    /// Scalar loss of a small 2-layer MLP used for the finite-difference
    /// oracle below; parameters arrive as one flat vector.
    fn mlp_loss(flat: &[f64], n_in: usize, n_hidden: usize, input: &[f64]) -> crate::error::Result<f64> {
        let g = Graph::new();
        let mut off = 0;
        let mut take = |n: usize| {
            let s = flat[off..off + n].to_vec();
            off += n;
            s
        };
        let w1 = g.parameter(take(n_in * n_hidden), &[n_in, n_hidden])?;
        let b1 = g.parameter(take(n_hidden), &[n_hidden])?;
        let w2 = g.parameter(take(n_hidden), &[n_hidden, 1])?;
        let b2 = g.parameter(take(1), &[1])?;
        let x = g.constant(input.to_vec(), &[1, n_in])?;
        let h = g.relu(g.add_broadcast(g.matmul(x, w1)?, b1)?)?;
        let out = g.add_broadcast(g.matmul(h, w2)?, b2)?;
        g.scalar(g.mean_all(g.mul(out, out)?)?)
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let (n_in, n_hidden) = (4, 6);
        let n_params = n_in * n_hidden + n_hidden + n_hidden + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let flat: Vec<f64> = (0..n_params).map(|_| rng.gen_range(-0.8..0.8)).collect();
        let input: Vec<f64> = (0..n_in).map(|_| rng.gen_range(-1.0..1.0)).collect();

        // analytic gradient, rebuilt the same way as the oracle closure
        let g = Graph::new();
        let mut off = 0;
        let mut take = |n: usize| {
            let s = flat[off..off + n].to_vec();
            off += n;
            s
        };
        let w1 = g.parameter(take(n_in * n_hidden), &[n_in, n_hidden]).unwrap();
        let b1 = g.parameter(take(n_hidden), &[n_hidden]).unwrap();
        let w2 = g.parameter(take(n_hidden), &[n_hidden, 1]).unwrap();
        let b2 = g.parameter(take(1), &[1]).unwrap();
        let x = g.constant(input.clone(), &[1, n_in]).unwrap();
        let h = g
            .relu(g.add_broadcast(g.matmul(x, w1).unwrap(), b1).unwrap())
            .unwrap();
        let out = g.add_broadcast(g.matmul(h, w2).unwrap(), b2).unwrap();
        let loss = g.mean_all(g.mul(out, out).unwrap()).unwrap();
        let grads = g.backward(loss).unwrap();
        let mut analytic = Vec::new();
        for t in [w1, b1, w2, b2] {
            analytic.extend_from_slice(grads.get(t).unwrap());
        }

        let err = finite_diff_check(
            |p| mlp_loss(p, n_in, n_hidden, &input),
            &flat,
            &analytic,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = g
            .parameter((0..6).map(|_| rng.gen_range(-1.0..1.0)).collect(), &[2, 3])
            .unwrap();
        let x = g
            .constant((0..6).map(|_| rng.gen_range(-1.0..1.0)).collect(), &[3, 2])
            .unwrap();
        let prod = g.matmul(w, x).unwrap();
        let l1 = g.mean_all(g.mul(prod, prod).unwrap()).unwrap();
        let l2 = g.mean_all(g.abs(prod).unwrap()).unwrap();
        let (a, b) = (2.5, -0.75);
        let combined = g
            .add(g.mul_const(l1, a).unwrap(), g.mul_const(l2, b).unwrap())
            .unwrap();

        let g1 = g.backward(l1).unwrap();
        let g2 = g.backward(l2).unwrap();
        let gc = g.backward(combined).unwrap();
        for i in 0..6 {
            let expect = a * g1.get(w).unwrap()[i] + b * g2.get(w).unwrap()[i];
            assert!((gc.get(w).unwrap()[i] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn pooling_and_interp_edge_cases() {
        let g = Graph::new();
        let x = g
            .constant(vec![3.0, 1.0, 4.0, 1.0, 5.0, 9.0], &[1, 6])
            .unwrap();
        // k=1 is the identity
        let same = g.max_pool_last(x, 1).unwrap();
        assert_eq!(g.values(same), g.values(x));
        // k=4 with a short trailing window
        let pooled = g.max_pool_last(x, 4).unwrap();
        assert_eq!(g.values(pooled), vec![4.0, 9.0]);
        assert_eq!(g.shape(pooled), vec![1, 2]);
    }

    #[test]
    fn slice_concat_round_trip() {
        let g = Graph::new();
        let x = g
            .constant((0..12).map(|i| i as f64).collect(), &[3, 4])
            .unwrap();
        let left = g.slice_last(x, 0, 2).unwrap();
        let right = g.slice_last(x, 2, 4).unwrap();
        let back = g.concat_last(&[left, right]).unwrap();
        assert_eq!(g.values(back), g.values(x));
    }
}
