//! Minimal dense-matrix engine with reverse-mode differentiation.
//!
//! A [`Graph`] records one forward pass; [`Graph::backward`] returns exact
//! adjoints for every tracked node. Parameters live in a [`ParamStore`]
//! that also carries Adam state. All values are `f64` and every op rejects
//! non-finite results.

mod graph;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var, BCE_EPS, LAYER_NORM_EPS};
pub use params::{AdamConfig, Checkpoint, NamedTensor, Param, ParamStore, CHECKPOINT_VERSION};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch { op: &'static str, left: [usize; 2], right: [usize; 2] },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("empty batch")]
    EmptyBatch,
    #[error("attention row has no valid key")]
    EmptyAttention,
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Mean BCE of plain probability slices, outside any graph.
pub fn bce_loss(pred: &[f64], labels: &[f64]) -> Result<f64, AutodiffError> {
    let g = Graph::new();
    let p = g.constant(Tensor::column_vector(pred.to_vec()))?;
    let l = g.bce(p, labels, 1.0)?;
    let v = g.value(l).get(0, 0);
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central-difference check of d(sum(f(x) ⊙ r))/dx for a unary builder.
    fn check_unary(
        rows: usize,
        cols: usize,
        seed: u64,
        build: impl Fn(&Graph, Var) -> Result<Var, AutodiffError>,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = random(rows, cols, &mut rng);
        let eval = |x: &Tensor| -> (f64, Option<Tensor>) {
            let g = Graph::new();
            let xv = g.variable(x.clone()).unwrap();
            let y = build(&g, xv).unwrap();
            let [r, c] = g.shape(y);
            let mut wr = ChaCha8Rng::seed_from_u64(seed + 1);
            let w = g.constant(random(r, c, &mut wr)).unwrap();
            let s = g.sum(g.mul(y, w).unwrap()).unwrap();
            let val = g.value(s).get(0, 0);
            let grads = g.backward(s).unwrap();
            (val, grads.get(xv).cloned())
        };
        let (_, grad) = eval(&x0);
        let grad = grad.expect("input is tracked");
        let h = 1e-5;
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            xp.data_mut()[i] += h;
            let mut xm = x0.clone();
            xm.data_mut()[i] -= h;
            let fd = (eval(&xp).0 - eval(&xm).0) / (2.0 * h);
            let an = grad.data()[i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(rel <= 1e-4, "entry {i}: analytic {an} vs numeric {fd}");
        }
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        check_unary(3, 4, 1, |g, x| g.sigmoid(x));
        check_unary(3, 4, 2, |g, x| g.tanh(x));
        check_unary(3, 4, 3, |g, x| g.gelu(x));
        check_unary(3, 4, 4, |g, x| g.softmax(x));
        check_unary(3, 5, 5, |g, x| g.layer_norm(x));
        check_unary(3, 4, 6, |g, x| g.affine(x, -2.0, 1.0));
        check_unary(4, 3, 7, |g, x| {
            let w = g.constant(Tensor::from_vec(3, 2, vec![0.5, -1.0, 2.0, 0.1, -0.3, 0.7]).unwrap())?;
            g.matmul(x, w)
        });
        check_unary(4, 3, 8, |g, x| {
            let w = g.constant(Tensor::from_vec(2, 4, vec![0.5, -1.0, 2.0, 0.1, -0.3, 0.7, 1.1, 0.0]).unwrap())?;
            g.matmul(w, x)
        });
        check_unary(4, 3, 9, |g, x| g.mul(x, x));
        check_unary(4, 3, 10, |g, x| {
            let row = g.slice_rows(x, 1, 2)?;
            g.add(x, row)
        });
        check_unary(4, 3, 11, |g, x| {
            let col = g.slice_cols(x, 2, 3)?;
            let p = g.mul(x, col)?;
            g.sub(p, col)
        });
        check_unary(4, 3, 12, |g, x| {
            let a = g.slice_cols(x, 0, 1)?;
            let b = g.slice_rows(x, 0, 2)?;
            let c = g.concat_cols(&[x, a])?;
            let d = g.concat_rows(&[x, b])?;
            let s1 = g.sum(c)?;
            let s2 = g.sum(g.mul(d, d)?)?;
            g.add(s1, s2)
        });
        check_unary(5, 3, 13, |g, x| g.gather_rows(x, &[4, 0, 0, 2]));
        check_unary(6, 3, 14, |g, x| g.mean_pool(x, 3, &[1.0, 1.0, 0.0, 1.0, 0.0, 0.0]));
        check_unary(6, 4, 15, |g, x| {
            let q = g.tanh(x)?;
            let k = g.affine(x, 0.7, 0.1)?;
            g.attention(q, k, x, 3, 2, &[1.0, 1.0, 0.0, 1.0, 1.0, 1.0])
        });
        check_unary(4, 1, 16, |g, x| {
            let p = g.sigmoid(x)?;
            g.bce(p, &[1.0, 0.0, 1.0, 0.0], 2.0)
        });
    }

    #[test]
    fn analytic_values() {
        let g = Graph::new();
        let x = g.variable(Tensor::scalar(0.0)).unwrap();
        let s = g.sigmoid(x).unwrap();
        assert_eq!(g.value(s).get(0, 0), 0.5);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().get(0, 0), 0.25);

        let z = g.constant(Tensor::zeros(1, 4)).unwrap();
        let sm = g.softmax(z).unwrap();
        assert_eq!(g.value(sm).data(), &[0.25; 4]);
    }

    #[test]
    fn matmul_hand_product() {
        let g = Graph::new();
        let a = g.constant(Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap()).unwrap();
        let b = g.constant(Tensor::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap()).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 4.0, 5.0]);
    }

    #[test]
    fn softmax_and_layer_norm_row_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Graph::new();
        let x = g.constant(random(20, 16, &mut rng).map(|v| 3.0 * v + 1.0)).unwrap();
        let sm = g.softmax(x).unwrap();
        for r in 0..20 {
            assert!((g.value(sm).row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let ln = g.layer_norm(x).unwrap();
        for r in 0..20 {
            let row = g.value(ln).row(r).to_vec();
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() <= 1e-10);
            assert!((var - 1.0).abs() <= 1e-8);
        }
    }

    #[test]
    fn bce_values() {
        let l = bce_loss(&[0.8, 0.4], &[1.0, 0.0]).unwrap();
        assert!((l - (-(0.8f64).ln() - (0.6f64).ln()) / 2.0).abs() < 1e-12);
        assert!((l - 0.366_99).abs() < 1e-5);
        assert!((bce_loss(&[0.5; 6], &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(bce_loss(&[1.0, 0.0], &[1.0, 0.0]).unwrap() <= 1.2e-7);
        assert_eq!(bce_loss(&[], &[]), Err(AutodiffError::EmptyBatch));
    }

    #[test]
    fn shape_errors_and_non_finite() {
        let g = Graph::new();
        let a = g.constant(Tensor::zeros(2, 3)).unwrap();
        let b = g.constant(Tensor::zeros(2, 3)).unwrap();
        assert!(matches!(g.matmul(a, b), Err(AutodiffError::ShapeMismatch { .. })));
        let c = g.constant(Tensor::zeros(3, 2)).unwrap();
        assert!(matches!(g.add(a, c), Err(AutodiffError::ShapeMismatch { .. })));
        let big = g.constant(Tensor::scalar(1e300)).unwrap();
        assert!(matches!(g.mul(big, big), Err(AutodiffError::NonFinite { .. })));
        assert!(matches!(g.constant(Tensor::scalar(f64::NAN)), Err(AutodiffError::NonFinite { .. })));
    }

    #[test]
    fn attention_masks_pad_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = Graph::new();
        let x = g.constant(random(8, 4, &mut rng)).unwrap();
        let mask = [1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let y = g.attention(x, x, x, 4, 2, &mask).unwrap();
        let w = g.attention_weights(y).unwrap();
        for (row, chunk) in w.chunks(4).enumerate() {
            let b = row / (2 * 4);
            assert!((chunk.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for (j, &wj) in chunk.iter().enumerate() {
                if mask[b * 4 + j] == 0.0 {
                    assert_eq!(wj, 0.0);
                }
            }
        }
    }

    #[test]
    fn frozen_params_receive_no_gradient() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::scalar(2.0));
        store.insert("b", Tensor::scalar(3.0));
        store.set_frozen("b", true);
        let g = Graph::new();
        let a = g.param(&store, "a").unwrap();
        let b = g.param(&store, "b").unwrap();
        let y = g.mul(a, b).unwrap();
        let grads = g.backward(y).unwrap().into_param_map();
        assert_eq!(grads["a"].get(0, 0), 3.0);
        assert!(!grads.contains_key("b"));
    }
}
