//! Scaled dot-product self-attention over a set of capsule output vectors.
//!
//! Queries, keys, and values are all the same `[J, d]` matrix; there are no
//! learned projections, so the layer is parameter-free and each output row is
//! a convex combination of the input rows.

use crate::graph::{softmax_row, Graph, Value};
use crate::tensor::{Tensor, TensorError};

/// Scaled dot-product score `a(q, k) = (q·k)/sqrt(d)`.
pub fn attention_score(q: &[f64], k: &[f64]) -> Result<f64, TensorError> {
    if q.len() != k.len() || q.is_empty() {
        return Err(TensorError::Shape {
            op: "attention_score",
            detail: format!("q has dim {}, k has dim {}", q.len(), k.len()),
        });
    }
    let dot: f64 = q.iter().zip(k).map(|(a, b)| a * b).sum();
    Ok(dot / (q.len() as f64).sqrt())
}

/// Softmax-normalized attention weights of one query against all key rows of
/// a `[J, d]` matrix. Nonnegative, summing to 1.
pub fn attention_weights(q: &[f64], keys: &Tensor) -> Result<Vec<f64>, TensorError> {
    let shape = keys.shape();
    if shape.len() != 2 || shape[1] != q.len() {
        return Err(TensorError::Shape {
            op: "attention_weights",
            detail: format!("query dim {} against keys {shape:?}", q.len()),
        });
    }
    let scores: Vec<f64> = keys
        .data()
        .chunks(shape[1])
        .map(|k| attention_score(q, k))
        .collect::<Result<_, _>>()?;
    Ok(softmax_row(&scores))
}

/// Graph form of self-attention: row r of the output is
/// `Σ_i softmax_i(a(q_r, q_i))·q_i` with keys and values equal to the input.
pub fn self_attention_node(g: &mut Graph, q: Value) -> Result<Value, TensorError> {
    let shape = g.shape(q).to_vec();
    if shape.len() != 2 {
        return Err(TensorError::Shape {
            op: "self_attention",
            detail: format!("expected [J, d], got {shape:?}"),
        });
    }
    let d = shape[1];
    let keys_t = g.transpose(q)?;
    let scores = g.matmul(q, keys_t)?;
    let scaled = g.scale(scores, 1.0 / (d as f64).sqrt());
    let weights = g.softmax_rows(scaled)?;
    g.matmul(weights, q)
}

/// Self-attention over a `[J, d]` matrix with K = V = Q.
pub fn self_attention(q: &Tensor) -> Result<Tensor, TensorError> {
    let mut g = Graph::new();
    let v = g.leaf(q);
    let out = self_attention_node(&mut g, v)?;
    Ok(g.tensor(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn score_orthogonal_unit_and_symmetric() {
        assert_eq!(attention_score(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        // q = k = unit vector in d = 4: dot 1, scale 1/2
        let u = [0.5, 0.5, 0.5, 0.5];
        assert!((attention_score(&u, &u).unwrap() - 0.5).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let q: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let k: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            assert_eq!(attention_score(&q, &k).unwrap(), attention_score(&k, &q).unwrap());
        }
        assert!(attention_score(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn weights_uniform_single_and_closed_form() {
        // equal scores: every key identical
        let keys = Tensor::new(vec![3, 2], vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
        let w = attention_weights(&[0.3, -0.1], &keys).unwrap();
        assert!(close(&w, &[1.0 / 3.0; 3], 1e-15));

        let single = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let w1 = attention_weights(&[1.0, 0.0], &single).unwrap();
        assert!(close(&w1, &[1.0], 1e-15));

        // scores [0, ln 2] softmax to [1/3, 2/3]; d = 1 so scale is 1
        let keys = Tensor::new(vec![2, 1], vec![0.0, 2.0f64.ln()]).unwrap();
        let w2 = attention_weights(&[1.0], &keys).unwrap();
        assert!(close(&w2, &[1.0 / 3.0, 2.0 / 3.0], 1e-12));
    }

    #[test]
    fn self_attention_single_row_identity() {
        let q = Tensor::new(vec![1, 4], vec![0.3, -0.2, 0.9, 0.1]).unwrap();
        let out = self_attention(&q).unwrap();
        assert!(close(out.data(), q.data(), 1e-15));
    }

    #[test]
    fn self_attention_identical_rows() {
        let row = [0.4, -0.6, 0.2];
        let q = Tensor::new(vec![3, 3], row.repeat(3)).unwrap();
        let out = self_attention(&q).unwrap();
        for r in out.data().chunks(3) {
            assert!(close(r, &row, 1e-12));
        }
    }

    #[test]
    fn self_attention_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let (j, d) = (3, 4);
        let q =
            Tensor::new(vec![j, d], (0..j * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let out = self_attention(&q).unwrap();

        // direct evaluation: scores, softmax, convex combination
        for r in 0..j {
            let qr = &q.data()[r * d..(r + 1) * d];
            let mut scores = vec![0.0; j];
            for i in 0..j {
                let ki = &q.data()[i * d..(i + 1) * d];
                scores[i] =
                    qr.iter().zip(ki).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt();
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            let mut expected = vec![0.0; d];
            for i in 0..j {
                let weight = exps[i] / sum;
                for a in 0..d {
                    expected[a] += weight * q.data()[i * d + a];
                }
            }
            assert!(close(&out.data()[r * d..(r + 1) * d], &expected, 1e-12));
        }
    }

    #[test]
    fn weights_are_convex_and_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let (j, d) = (rng.gen_range(1..=6), rng.gen_range(1..=5));
            let keys = Tensor::new(
                vec![j, d],
                (0..j * d).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            )
            .unwrap();
            let q: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let w = attention_weights(&q, &keys).unwrap();
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(w.iter().all(|&x| x >= 0.0));

            // adding a constant to all scores leaves the softmax unchanged
            let scores: Vec<f64> = keys
                .data()
                .chunks(d)
                .map(|k| attention_score(&q, k).unwrap())
                .collect();
            let shifted: Vec<f64> = scores.iter().map(|s| s + 3.7).collect();
            assert!(close(&softmax_row(&scores), &softmax_row(&shifted), 1e-12));
        }
    }

    #[test]
    fn self_attention_row_permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let (j, d) = (4, 3);
        let q =
            Tensor::new(vec![j, d], (0..j * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let perm = [3usize, 1, 0, 2];
        let mut permuted = Tensor::zeros(vec![j, d]);
        for r in 0..j {
            permuted.data_mut()[r * d..(r + 1) * d]
                .copy_from_slice(&q.data()[perm[r] * d..(perm[r] + 1) * d]);
        }
        let base = self_attention(&q).unwrap();
        let swapped = self_attention(&permuted).unwrap();
        for r in 0..j {
            assert!(close(
                &swapped.data()[r * d..(r + 1) * d],
                &base.data()[perm[r] * d..(perm[r] + 1) * d],
                1e-12
            ));
        }
    }
}
