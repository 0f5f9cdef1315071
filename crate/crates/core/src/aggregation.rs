//! Attention aggregation over interaction elements and over metapaths.
//!
//! Node-level attention scores every pair of interaction elements through
//! two bilinear projections, masks out padded elements, and mixes the
//! surviving elements with one attention distribution shared by all heads;
//! each head contributes its own value projection and the heads are
//! averaged. A query projection plus ReLU produces per-element summaries,
//! and the masked mean over elements summarizes the whole metapath.
//!
//! Path-level attention scores each metapath summary with a shared tanh
//! bottleneck, softmaxes the scores into path weights, and returns the
//! weighted combination. By default the bottleneck reuses the node-level
//! query projection; an untied variant owns separate weights.

use nirec_tensor::{Tape, TensorError, Var};
use thiserror::Error;

/// Errors from the aggregation stage.
#[derive(Debug, Error)]
pub enum AggregationError {
    #[error("node attention needs at least one head")]
    NoHeads,
    #[error("path attention needs at least one path")]
    NoPaths,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Parameter handles for node-level attention. `w_t`/`w_s` are the target-
/// and source-side score projections [E, D]; `w_c` holds one value
/// projection [E, D] per head; `w_q` [D, D] and `b_q` [D] form the query
/// projection that finishes each element summary.
#[derive(Debug, Clone)]
pub struct NodeAttnVars {
    pub w_t: Var,
    pub w_s: Var,
    pub w_c: Vec<Var>,
    pub w_q: Var,
    pub b_q: Var,
}

/// Parameter handles for path-level attention: a score vector [D] plus the
/// tanh bottleneck projection `w_q` [D, D], `b_q` [D].
#[derive(Debug, Clone)]
pub struct PathAttnVars {
    pub score: Var,
    pub w_q: Var,
    pub b_q: Var,
}

/// Node-level attention outputs.
#[derive(Debug, Clone)]
pub struct NodeAttention {
    /// Per-element summaries, [M, D].
    pub z: Var,
    /// Masked mean of `z` over elements, [D].
    pub pooled: Var,
    /// The shared attention matrix, [M, M]; masked columns are exactly zero.
    pub alpha: Var,
}

/// One metapath's node-level outputs, as consumed by path attention.
#[derive(Debug)]
pub struct PathSummary<'a> {
    pub z: &'a Var,
    pub mask: &'a [bool],
    pub pooled: &'a Var,
}

/// Path-level attention outputs.
#[derive(Debug, Clone)]
pub struct PathAttention {
    /// Weighted combination of the path summaries, [1, D].
    pub fused: Var,
    /// Path weights, [P], summing to one.
    pub beta: Var,
    /// Raw path scores before the softmax, [P].
    pub omega: Var,
}

/// Runs node-level attention over `elements` [M, E] with one validity flag
/// per element. Masked elements receive zero attention from everyone and
/// are excluded from the pooled mean, so their (zero) contents cannot leak.
pub fn node_attention(
    elements: &Var,
    mask: &[bool],
    vars: &NodeAttnVars,
    temperature: f64,
) -> Result<NodeAttention, AggregationError> {
    if vars.w_c.is_empty() {
        return Err(AggregationError::NoHeads);
    }
    let targets = elements.matmul(&vars.w_t)?;
    let sources = elements.matmul(&vars.w_s)?;
    let scores = targets.matmul(&sources.transpose()?)?;
    let alpha = scores.softmax_last(temperature, Some(mask))?;

    let mut mixed: Option<Var> = None;
    for w_c in &vars.w_c {
        let values = elements.matmul(w_c)?;
        let head = alpha.matmul(&values)?;
        mixed = Some(match mixed {
            Some(acc) => acc.add(&head)?,
            None => head,
        });
    }
    let mixed = mixed.expect("at least one head").scale(1.0 / vars.w_c.len() as f64);

    let z = mixed
        .matmul(&vars.w_q.transpose()?)?
        .add_row_broadcast(&vars.b_q)?
        .relu();
    let pooled = z.mean_rows_masked(mask)?;
    Ok(NodeAttention { z, pooled, alpha })
}

/// Runs path-level attention over per-metapath summaries. Each path's score
/// is the masked mean over its elements of `score . tanh(W_q z + b_q)`;
/// softmax over paths yields the weights.
pub fn path_attention(
    tape: &Tape,
    paths: &[PathSummary<'_>],
    vars: &PathAttnVars,
    temperature: f64,
) -> Result<PathAttention, AggregationError> {
    if paths.is_empty() {
        return Err(AggregationError::NoPaths);
    }
    let dim = vars.score.shape()[0];
    let score_col = vars.score.reshape(&[dim, 1])?;
    let w_q_t = vars.w_q.transpose()?;
    let mut omegas = Vec::with_capacity(paths.len());
    let mut pooled = Vec::with_capacity(paths.len());
    for path in paths {
        let bottleneck = path
            .z
            .matmul(&w_q_t)?
            .add_row_broadcast(&vars.b_q)?
            .tanh();
        let scores = bottleneck.matmul(&score_col)?;
        omegas.push(scores.mean_rows_masked(path.mask)?);
        pooled.push(path.pooled.clone());
    }
    let omega = tape
        .stack_rows(&omegas)?
        .reshape(&[paths.len()])?;
    let beta = omega.softmax_last(temperature, None)?;
    let pooled_mat = tape.stack_rows(&pooled)?;
    let fused = beta.reshape(&[1, paths.len()])?.matmul(&pooled_mat)?;
    Ok(PathAttention { fused, beta, omega })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nirec_tensor::Tensor;

    fn leaf(tape: &Tape, shape: &[usize], data: Vec<f64>) -> Var {
        tape.leaf(Tensor::new(shape, data).unwrap())
    }

    fn identity(tape: &Tape, n: usize) -> Var {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        leaf(tape, &[n, n], data)
    }

    fn simple_vars(tape: &Tape, heads: usize) -> NodeAttnVars {
        NodeAttnVars {
            w_t: identity(tape, 2),
            w_s: leaf(tape, &[2, 2], vec![0.5, 0.0, 0.0, 0.5]),
            w_c: (0..heads).map(|_| identity(tape, 2)).collect(),
            w_q: identity(tape, 2),
            b_q: leaf(tape, &[2], vec![0.0, 0.0]),
        }
    }

    /// Fully hand-unrolled two-element case: scores, softmax, mixing, and
    /// pooling all checked against explicit arithmetic.
    #[test]
    fn node_attention_matches_hand_computation() {
        let tape = Tape::new();
        let elements = leaf(&tape, &[2, 2], vec![1.0, 2.0, 3.0, -1.0]);
        let vars = simple_vars(&tape, 1);
        let out = node_attention(&elements, &[true, true], &vars, 1.0).unwrap();

        // scores = elements . (0.5 * elements)^T
        let s00 = 0.5 * (1.0 * 1.0 + 2.0 * 2.0); // 2.5
        let s01 = 0.5 * (1.0 * 3.0 + 2.0 * -1.0); // 0.5
        let s10 = 0.5 * (3.0 * 1.0 + -1.0 * 2.0); // 0.5
        let s11 = 0.5 * (3.0 * 3.0 + -1.0 * -1.0); // 5.0
        let row = |a: f64, b: f64| {
            let m = a.max(b);
            let (ea, eb) = ((a - m).exp(), (b - m).exp());
            (ea / (ea + eb), eb / (ea + eb))
        };
        let (a00, a01) = row(s00, s01);
        let (a10, a11) = row(s10, s11);
        let alpha = out.alpha.value();
        assert!((alpha.at2(0, 0) - a00).abs() < 1e-12);
        assert!((alpha.at2(0, 1) - a01).abs() < 1e-12);
        assert!((alpha.at2(1, 0) - a10).abs() < 1e-12);
        assert!((alpha.at2(1, 1) - a11).abs() < 1e-12);

        // One identity head, identity query, zero bias: z = relu(alpha . E).
        let z = out.z.value();
        let z00 = (a00 * 1.0 + a01 * 3.0).max(0.0);
        let z01 = (a00 * 2.0 + a01 * -1.0).max(0.0);
        let z10 = (a10 * 1.0 + a11 * 3.0).max(0.0);
        let z11 = (a10 * 2.0 + a11 * -1.0).max(0.0);
        assert!((z.at2(0, 0) - z00).abs() < 1e-12);
        assert!((z.at2(0, 1) - z01).abs() < 1e-12);
        let pooled = out.pooled.value();
        assert!((pooled.data()[0] - 0.5 * (z00 + z10)).abs() < 1e-12);
        assert!((pooled.data()[1] - 0.5 * (z01 + z11)).abs() < 1e-12);
    }

    #[test]
    fn attention_rows_sum_to_one_and_masked_columns_are_zero() {
        let tape = Tape::new();
        let elements = leaf(
            &tape,
            &[4, 2],
            vec![0.3, -1.2, 2.0, 0.7, -0.4, 0.9, 1.1, 1.3],
        );
        let vars = simple_vars(&tape, 3);
        let mask = [true, false, true, false];
        let out = node_attention(&elements, &mask, &vars, 0.7).unwrap();
        let alpha = out.alpha.value();
        for i in 0..4 {
            let mut sum = 0.0;
            for j in 0..4 {
                let a = alpha.at2(i, j);
                assert!(a >= 0.0);
                if !mask[j] {
                    assert_eq!(a, 0.0, "masked column {j} must get zero attention");
                }
                sum += a;
            }
            assert!((sum - 1.0).abs() < 1e-12, "row {i} sums to {sum}");
        }
    }

    #[test]
    fn heads_average_identical_heads_to_single_head() {
        let tape = Tape::new();
        let elements = leaf(&tape, &[2, 2], vec![1.0, 0.5, -0.5, 2.0]);
        let one = simple_vars(&tape, 1);
        let four = NodeAttnVars {
            w_c: vec![one.w_c[0].clone(); 4],
            ..one.clone()
        };
        let a = node_attention(&elements, &[true, true], &one, 1.0).unwrap();
        let b = node_attention(&elements, &[true, true], &four, 1.0).unwrap();
        let (za, zb) = (a.z.value(), b.z.value());
        for (x, y) in za.data().iter().zip(zb.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    /// Permuting the elements (and the mask) permutes z the same way and
    /// leaves the pooled summary unchanged.
    #[test]
    fn node_attention_is_permutation_equivariant() {
        let tape = Tape::new();
        let data = vec![0.3, -1.2, 2.0, 0.7, -0.4, 0.9];
        let elements = leaf(&tape, &[3, 2], data.clone());
        let perm = [2usize, 0, 1];
        let permuted: Vec<f64> = perm
            .iter()
            .flat_map(|&i| data[i * 2..(i + 1) * 2].to_vec())
            .collect();
        let elements_p = leaf(&tape, &[3, 2], permuted);
        let vars = simple_vars(&tape, 2);
        let mask = [true, true, false];
        let mask_p: Vec<bool> = perm.iter().map(|&i| mask[i]).collect();
        let a = node_attention(&elements, &mask, &vars, 1.0).unwrap();
        let b = node_attention(&elements_p, &mask_p, &vars, 1.0).unwrap();
        let (za, zb) = (a.z.value(), b.z.value());
        for (new_row, &old_row) in perm.iter().enumerate() {
            for c in 0..2 {
                assert!(
                    (za.at2(old_row, c) - zb.at2(new_row, c)).abs() < 1e-12
                );
            }
        }
        for (x, y) in a.pooled.value().data().iter().zip(b.pooled.value().data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn fully_masked_elements_are_rejected() {
        let tape = Tape::new();
        let elements = leaf(&tape, &[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let vars = simple_vars(&tape, 1);
        let err = node_attention(&elements, &[false, false], &vars, 1.0).unwrap_err();
        assert!(matches!(
            err,
            AggregationError::Tensor(TensorError::AllMasked)
        ));
    }

    fn path_vars(tape: &Tape) -> PathAttnVars {
        PathAttnVars {
            score: leaf(tape, &[2], vec![1.0, -0.5]),
            w_q: identity(tape, 2),
            b_q: leaf(tape, &[2], vec![0.0, 0.0]),
        }
    }

    #[test]
    fn single_path_gets_weight_one_and_identity_fusion() {
        let tape = Tape::new();
        let z = leaf(&tape, &[2, 2], vec![0.4, 1.0, -0.3, 0.2]);
        let pooled = leaf(&tape, &[2], vec![0.05, 0.6]);
        let vars = path_vars(&tape);
        let out = path_attention(
            &tape,
            &[PathSummary {
                z: &z,
                mask: &[true, true],
                pooled: &pooled,
            }],
            &vars,
            1.0,
        )
        .unwrap();
        assert_eq!(out.beta.value().data(), &[1.0]);
        assert_eq!(out.fused.value().data(), pooled.value().data());
    }

    #[test]
    fn identical_paths_share_weight_equally() {
        let tape = Tape::new();
        let z = leaf(&tape, &[2, 2], vec![0.4, 1.0, -0.3, 0.2]);
        let p1 = leaf(&tape, &[2], vec![1.0, 0.0]);
        let p2 = leaf(&tape, &[2], vec![0.0, 1.0]);
        let vars = path_vars(&tape);
        let mask = [true, true];
        let paths = [
            PathSummary {
                z: &z,
                mask: &mask,
                pooled: &p1,
            },
            PathSummary {
                z: &z,
                mask: &mask,
                pooled: &p2,
            },
        ];
        let out = path_attention(&tape, &paths, &vars, 1.0).unwrap();
        let beta = out.beta.value();
        assert!((beta.data()[0] - 0.5).abs() < 1e-12);
        assert!((beta.data()[1] - 0.5).abs() < 1e-12);
        let fused = out.fused.value();
        assert!((fused.data()[0] - 0.5).abs() < 1e-12);
        assert!((fused.data()[1] - 0.5).abs() < 1e-12);
    }

    /// Hand-unrolled path scores for two one-element paths.
    #[test]
    fn path_scores_match_hand_computation() {
        let tape = Tape::new();
        let z1 = leaf(&tape, &[1, 2], vec![0.3, -0.8]);
        let z2 = leaf(&tape, &[1, 2], vec![1.2, 0.1]);
        let p = leaf(&tape, &[2], vec![0.0, 0.0]);
        let vars = path_vars(&tape);
        let mask = [true];
        let paths = [
            PathSummary {
                z: &z1,
                mask: &mask,
                pooled: &p,
            },
            PathSummary {
                z: &z2,
                mask: &mask,
                pooled: &p,
            },
        ];
        let out = path_attention(&tape, &paths, &vars, 2.0).unwrap();
        // omega_j = 1.0 * tanh(z_j0) - 0.5 * tanh(z_j1)
        let w1 = 0.3f64.tanh() - 0.5 * (-0.8f64).tanh();
        let w2 = 1.2f64.tanh() - 0.5 * 0.1f64.tanh();
        let omega = out.omega.value();
        assert!((omega.data()[0] - w1).abs() < 1e-12);
        assert!((omega.data()[1] - w2).abs() < 1e-12);
        // Temperature-2 softmax.
        let m = (w1 / 2.0).max(w2 / 2.0);
        let (e1, e2) = (((w1 / 2.0) - m).exp(), ((w2 / 2.0) - m).exp());
        let beta = out.beta.value();
        assert!((beta.data()[0] - e1 / (e1 + e2)).abs() < 1e-12);
        assert!((beta.data()[1] - e2 / (e1 + e2)).abs() < 1e-12);
        let total = beta.data()[0] + beta.data()[1];
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_paths_are_rejected() {
        let tape = Tape::new();
        let vars = path_vars(&tape);
        assert!(matches!(
            path_attention(&tape, &[], &vars, 1.0),
            Err(AggregationError::NoPaths)
        ));
    }
}
