//! Tape-free entry points for single evaluations of the primitive ops.

use crate::error::{Error, Result};

use super::graph::{softmax_into, Graph};
use super::layers;
use super::tensor::Tensor;

fn as_matrix(x: &Tensor) -> Tensor {
    Tensor::matrix(x.rows(), x.cols(), x.data().to_vec())
}

/// Elementwise tanh-approximated GELU.
pub fn gelu(x: &Tensor) -> Tensor {
    let mut g = Graph::detached();
    let v = g.constant(as_matrix(x));
    let y = g.gelu(v);
    Tensor::new(x.shape().to_vec(), g.value(y).data().to_vec()).expect("shape preserved")
}

/// Softmax along `axis` of a matrix (0: down columns, 1: along rows). A
/// vector is treated as a single row.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (m, n) = (x.rows(), x.cols());
    let mut out = vec![0.0; m * n];
    match axis {
        1 => {
            for (row_in, row_out) in x.data().chunks(n).zip(out.chunks_mut(n)) {
                softmax_into(row_in, row_out);
            }
        }
        0 => {
            let mut col = vec![0.0; m];
            let mut col_out = vec![0.0; m];
            for j in 0..n {
                for i in 0..m {
                    col[i] = x.data()[i * n + j];
                }
                softmax_into(&col, &mut col_out);
                for i in 0..m {
                    out[i * n + j] = col_out[i];
                }
            }
        }
        _ => return Err(Error::shape(format!("softmax axis {axis} out of range for a matrix"))),
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// `softmax(q k^T / sqrt(dim)) v` for `q, k, v: [S x dim]`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, dim: usize) -> Result<Tensor> {
    let (s, d) = (q.rows(), q.cols());
    for (name, t) in [("q", q), ("k", k), ("v", v)] {
        if t.rows() != s || t.cols() != dim || d != dim {
            return Err(Error::shape(format!(
                "attention expects [{s} x {dim}] for {name}, got {:?}",
                t.shape()
            )));
        }
    }
    let mut g = Graph::detached();
    let (qv, kv, vv) = (g.constant(as_matrix(q)), g.constant(as_matrix(k)), g.constant(as_matrix(v)));
    let out = layers::attention(&mut g, qv, kv, vv, dim);
    Ok(g.value(out).clone())
}

/// Mean cross-entropy of integer labels under row-softmax of `logits`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::detached();
    let l = g.constant(as_matrix(logits));
    let loss = g.cross_entropy(l, labels)?;
    Ok(g.scalar(loss))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_reference_points() {
        let y = gelu(&Tensor::row(vec![0.0, 10.0, -10.0]));
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 10.0).abs() < 1e-6);
        assert!(y.data()[2].abs() < 1e-6);
    }

    #[test]
    fn gelu_close_to_erf_form() {
        // erf-based GELU at 1.0 is 0.841344746...
        let y = gelu(&Tensor::row(vec![1.0]));
        assert!((y.data()[0] - 0.841_344_746).abs() < 1e-3);
    }

    #[test]
    fn softmax_examples() {
        let u = softmax(&Tensor::row(vec![0.0, 0.0, 0.0]), 1).unwrap();
        for p in u.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        let p = softmax(&Tensor::row(vec![2f64.ln(), 0.0, 0.0]), 1).unwrap();
        for (got, want) in p.data().iter().zip([0.5, 0.25, 0.25]) {
            assert!((got - want).abs() < 1e-12);
        }
        let big = softmax(&Tensor::row(vec![1000.0, 0.0]), 1).unwrap();
        assert!((big.data()[0] - 1.0).abs() < 1e-9);
        assert!(big.data()[1] < 1e-9);
        assert!(big.is_finite());
    }

    #[test]
    fn softmax_axis_zero() {
        let x = Tensor::matrix(2, 2, vec![0.0, 2f64.ln(), 0.0, 0.0]);
        let y = softmax(&x, 0).unwrap();
        assert!((y.data()[0] - 0.5).abs() < 1e-12);
        assert!((y.data()[1] - 2.0 / 3.0).abs() < 1e-12);
        assert!(softmax(&x, 2).is_err());
    }

    #[test]
    fn attention_single_token_returns_value() {
        let q = Tensor::matrix(1, 2, vec![0.3, -1.2]);
        let k = Tensor::matrix(1, 2, vec![2.0, 0.5]);
        let v = Tensor::matrix(1, 2, vec![7.0, -3.0]);
        assert_eq!(attention(&q, &k, &v, 2).unwrap().data(), v.data());
    }

    #[test]
    fn attention_zero_keys_average_values() {
        let q = Tensor::matrix(3, 2, vec![1.0, 2.0, -1.0, 0.5, 3.0, 3.0]);
        let k = Tensor::zeros(vec![3, 2]);
        let v = Tensor::matrix(3, 2, vec![1.0, 4.0, 2.0, 5.0, 6.0, 0.0]);
        let out = attention(&q, &k, &v, 2).unwrap();
        for row in out.data().chunks(2) {
            assert!((row[0] - 3.0).abs() < 1e-12);
            assert!((row[1] - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_two_by_two_by_hand() {
        let q = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let k = Tensor::matrix(2, 2, vec![1.0, 1.0, 2.0, 0.0]);
        let v = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let out = attention(&q, &k, &v, 2).unwrap();
        // Scalar oracle: logits = q.k / sqrt(2), softmax over two keys.
        let s = 2f64.sqrt();
        let qs = [[1.0, 0.0], [0.0, 1.0]];
        let ks = [[1.0, 1.0], [2.0, 0.0]];
        let vs = [[1.0, 2.0], [3.0, 4.0]];
        for i in 0..2 {
            let l0 = (qs[i][0] * ks[0][0] + qs[i][1] * ks[0][1]) / s;
            let l1 = (qs[i][0] * ks[1][0] + qs[i][1] * ks[1][1]) / s;
            let w0 = l0.exp() / (l0.exp() + l1.exp());
            let w1 = 1.0 - w0;
            for j in 0..2 {
                let want = w0 * vs[0][j] + w1 * vs[1][j];
                assert!((out.data()[i * 2 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_shape_mismatch() {
        let q = Tensor::matrix(2, 2, vec![0.0; 4]);
        let k = Tensor::matrix(3, 2, vec![0.0; 6]);
        assert!(matches!(attention(&q, &k, &q, 2), Err(Error::Shape(_))));
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = Tensor::matrix(1, 3, vec![0.0; 3]);
        assert!((cross_entropy(&uniform, &[1]).unwrap() - 3f64.ln()).abs() < 1e-12);
        let confident = Tensor::matrix(1, 3, vec![1000.0, 0.0, 0.0]);
        assert!(cross_entropy(&confident, &[0]).unwrap().abs() < 1e-12);
        // B = 2: -ln softmax((1,2,3))[2] and -ln softmax((0,0,ln 2))[0], averaged.
        let mixed = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 0.0, 0.0, 2f64.ln()]);
        let z: f64 = [1f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        let first = -(3f64.exp() / z).ln();
        let second = -(1.0f64 / 4.0).ln();
        let want = 0.5 * (first + second);
        assert!((cross_entropy(&mixed, &[2, 0]).unwrap() - want).abs() < 1e-12);
        assert!(matches!(cross_entropy(&uniform, &[3]), Err(Error::Value(_))));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_are_distributions_and_shift_invariant(
                rows in 1usize..5,
                cols in 1usize..6,
                seed in proptest::collection::vec(-50.0f64..50.0, 30),
                shift in -100.0f64..100.0,
            ) {
                let x = Tensor::matrix(rows, cols, seed[..rows * cols].to_vec());
                let p = softmax(&x, 1).unwrap();
                for r in 0..rows {
                    let row = &p.data()[r * cols..(r + 1) * cols];
                    prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
                let shifted = Tensor::matrix(rows, cols, x.data().iter().map(|v| v + shift).collect());
                let q = softmax(&shifted, 1).unwrap();
                for (a, b) in p.data().iter().zip(q.data()) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
}
