//! Single-head attention evaluators and the partition-aware causal mask.
//!
//! Three routes compute the same quantity:
//!
//! * [`attention_reference`]: plain softmax attention over a full sequence.
//! * [`attention_duplicated_oracle`]: every received landmark is physically
//!   repeated as many times as the tokens it summarizes, then plain softmax
//!   attention runs on the expanded keys/values. Slow, used as ground truth.
//! * [`attention_scaled`]: keys/values come from the compact augmented input;
//!   the exponentiated scores are weighted by the repetition vector `g` and
//!   row-normalized, so no row is ever duplicated.
//!
//! Masking zeroes entries of the exponentiated score matrix, which is the
//! same as a `-inf` logit, and happens before the `g` weighting.

use crate::error::{Error, Result};
use crate::partition::{expand_duplicated, AugmentedInput, PartitionId, PartitionPlan, SegmentMeans};
use crate::scalar::Scalar;
use crate::tensor::{
    concat_rows, matmul, matmul_bt, row_exp_shifted, row_normalize, row_normalize_weighted, scale, Matrix,
};

/// Projection weights of one attention head, each `D × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights<T> {
    pub w_q: Matrix<T>,
    pub w_k: Matrix<T>,
    pub w_v: Matrix<T>,
}

impl<T: Scalar> HeadWeights<T> {
    pub fn head_dim(&self) -> usize {
        self.w_q.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.w_q.rows()
    }
}

/// Boolean visibility matrix `M_p` of shape `N_p × N̂_p`; `true` means the
/// query row may attend to the column.
#[derive(Clone, PartialEq, Eq)]
pub struct CausalMask {
    rows: usize,
    cols: usize,
    owner: PartitionId,
    bits: Vec<bool>,
}

impl CausalMask {
    pub fn from_fn(rows: usize, cols: usize, owner: PartitionId, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                bits.push(f(i, j));
            }
        }
        Self {
            rows,
            cols,
            owner,
            bits,
        }
    }

    /// Standard lower-triangular mask over an unpartitioned sequence.
    pub fn lower_triangular(n: usize) -> Self {
        Self::from_fn(n, n, PartitionId::new(1).expect("1 is valid"), |i, j| j <= i)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn owner(&self) -> PartitionId {
        self.owner
    }

    #[inline]
    pub fn is_visible(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    pub fn row_count(&self, i: usize) -> usize {
        self.bits[i * self.cols..(i + 1) * self.cols]
            .iter()
            .filter(|&&b| b)
            .count()
    }

    /// Repeats column `j` `repeats[j]` times, matching a duplicated
    /// key/value layout.
    pub fn expand_columns(&self, repeats: &[usize]) -> Result<Self> {
        if repeats.len() != self.cols {
            return Err(Error::Shape {
                op: "CausalMask::expand_columns",
                left: (self.rows, self.cols),
                right: (1, repeats.len()),
            });
        }
        let col_of: Vec<usize> = repeats
            .iter()
            .enumerate()
            .flat_map(|(j, &r)| std::iter::repeat_n(j, r))
            .collect();
        Ok(Self::from_fn(self.rows, col_of.len(), self.owner, |i, c| {
            self.is_visible(i, col_of[c])
        }))
    }
}

impl std::fmt::Debug for CausalMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "CausalMask {}x{} owner={}", self.rows, self.cols, self.owner)?;
        for i in 0..self.rows.min(16) {
            let line: String = (0..self.cols)
                .map(|j| if self.is_visible(i, j) { '1' } else { '0' })
                .collect();
            writeln!(f, "  {line}")?;
        }
        Ok(())
    }
}

/// Partition-aware causal mask: local columns follow the lower triangle,
/// landmark columns of strictly earlier partitions are fully visible and
/// those of later partitions fully hidden. Assumes the landmark layout of
/// [`crate::partition::assemble_augmented`] (ascending source order).
pub fn build_causal_mask(plan: &PartitionPlan, p: PartitionId, landmarks: usize) -> CausalMask {
    let n_p = plan.size(p);
    let n_hat = n_p + (plan.n_partitions() - 1) * landmarks;
    let past_end = n_p + landmarks * (p.get() - 1);
    CausalMask::from_fn(n_p, n_hat, p, |i, j| {
        (j <= i && i < n_p) || (n_p <= j && j < past_end)
    })
}

fn check_head<T: Scalar>(x: &Matrix<T>, head: &HeadWeights<T>) -> Result<()> {
    if x.cols() != head.input_dim() {
        return Err(Error::Shape {
            op: "attention",
            left: x.shape(),
            right: head.w_q.shape(),
        });
    }
    Ok(())
}

fn check_mask<T: Scalar>(q: &Matrix<T>, kv_rows: usize, mask: Option<&CausalMask>) -> Result<()> {
    if let Some(m) = mask {
        if (m.rows(), m.cols()) != (q.rows(), kv_rows) {
            return Err(Error::Shape {
                op: "attention mask",
                left: (m.rows(), m.cols()),
                right: (q.rows(), kv_rows),
            });
        }
    }
    Ok(())
}

/// Core path on already-projected `Q`, `K`, `V`.
fn attend_projected<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    visible: impl Fn(usize, usize) -> bool,
    g: Option<&[usize]>,
) -> Result<Matrix<T>> {
    let inv_sqrt_d = T::one() / T::from_count(q.cols()).sqrt();
    let scores = scale(&matmul_bt(q, k)?, inv_sqrt_d);
    let psi = row_exp_shifted(&scores, visible)?;
    let probs = match g {
        Some(g) => row_normalize_weighted(&psi, g),
        None => row_normalize(&psi),
    }
    .map_err(|e| match e {
        Error::Degenerate { op, row } if op == "row_normalize" || op == "row_normalize_weighted" => {
            Error::DegenerateMask { row }
        }
        other => other,
    })?;
    matmul(&probs, v)
}

/// Queries from `queries`, keys/values from `keys_values`, optional
/// visibility mask and optional repetition weights.
pub fn attend<T: Scalar>(
    queries: &Matrix<T>,
    keys_values: &Matrix<T>,
    head: &HeadWeights<T>,
    mask: Option<&CausalMask>,
    g: Option<&[usize]>,
) -> Result<Matrix<T>> {
    check_head(queries, head)?;
    check_head(keys_values, head)?;
    check_mask(queries, keys_values.rows(), mask)?;
    let q = matmul(queries, &head.w_q)?;
    let k = matmul(keys_values, &head.w_k)?;
    let v = matmul(keys_values, &head.w_v)?;
    match mask {
        Some(m) => attend_projected(&q, &k, &v, |i, j| m.is_visible(i, j), g),
        None => attend_projected(&q, &k, &v, |_, _| true, g),
    }
}

/// Full softmax attention; `causal` applies the lower-triangular mask.
pub fn attention_reference<T: Scalar>(
    x: &Matrix<T>,
    head: &HeadWeights<T>,
    causal: bool,
) -> Result<Matrix<T>> {
    let mask = causal.then(|| CausalMask::lower_triangular(x.rows()));
    attend(x, x, head, mask.as_ref(), None)
}

/// Attention with the rows of `K` and `V` reordered by `perm`
/// (`K' = P_m K`, `V' = P_m V`, mask columns permuted alike). The output
/// equals [`attention_reference`] for every bijection.
pub fn attention_permuted_kv<T: Scalar>(
    x: &Matrix<T>,
    perm: &[usize],
    head: &HeadWeights<T>,
    causal: bool,
) -> Result<Matrix<T>> {
    check_head(x, head)?;
    let n = x.rows();
    if perm.len() != n {
        return Err(Error::InvalidPermutation(format!(
            "length {} for {n} rows",
            perm.len()
        )));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(Error::InvalidPermutation(format!("{perm:?} is not a bijection")));
        }
    }
    let q = matmul(x, &head.w_q)?;
    let k = matmul(x, &head.w_k)?.select_rows(perm)?;
    let v = matmul(x, &head.w_v)?.select_rows(perm)?;
    if causal {
        attend_projected(&q, &k, &v, |i, j| perm[j] <= i, None)
    } else {
        attend_projected(&q, &k, &v, |_, _| true, None)
    }
}

/// Ground truth for the scaled form: keys/values are `x_p` followed by each
/// landmark block expanded to its duplicated form; `mask` (if any) is given
/// in compact `N_p × N̂_p` coordinates and expanded alongside.
pub fn attention_duplicated_oracle<T: Scalar>(
    x_p: &Matrix<T>,
    landmark_blocks: &[SegmentMeans<T>],
    head: &HeadWeights<T>,
    mask: Option<&CausalMask>,
) -> Result<Matrix<T>> {
    let expanded: Vec<Matrix<T>> = landmark_blocks.iter().map(expand_duplicated).collect();
    let mut parts = vec![x_p];
    parts.extend(expanded.iter());
    let kv = concat_rows(&parts)?;

    let mut repeats = vec![1usize; x_p.rows()];
    for b in landmark_blocks {
        repeats.extend_from_slice(b.counts());
    }
    let expanded_mask = match mask {
        Some(m) => Some(m.expand_columns(&repeats)?),
        None => None,
    };
    attend(x_p, &kv, head, expanded_mask.as_ref(), None)
}

/// Duplicate-free attention for device `aug.owner()`: exponentiated scores
/// over the `N̂_p` compact columns are weighted by `g` and row-normalized.
pub fn attention_scaled<T: Scalar>(
    x_p: &Matrix<T>,
    aug: &AugmentedInput<T>,
    head: &HeadWeights<T>,
    mask: Option<&CausalMask>,
) -> Result<Matrix<T>> {
    if x_p.rows() != aug.local_rows() {
        return Err(Error::Shape {
            op: "attention_scaled",
            left: x_p.shape(),
            right: aug.local().shape(),
        });
    }
    if aug.g().len() != aug.assembled().rows() {
        return Err(Error::Shape {
            op: "attention_scaled (g)",
            left: aug.assembled().shape(),
            right: (1, aug.g().len()),
        });
    }
    attend(x_p, aug.assembled(), head, mask, Some(aug.g()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::{assemble_augmented, make_partition_plan, segment_means};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pid(p: usize) -> PartitionId {
        PartitionId::new(p).unwrap()
    }

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn head(dm: usize, d: usize, rng: &mut ChaCha8Rng) -> HeadWeights<f64> {
        HeadWeights {
            w_q: random(dm, d, rng),
            w_k: random(dm, d, rng),
            w_v: random(dm, d, rng),
        }
    }

    /// Row-by-row expansion: row i = Σ_j e^{x_i U x_jᵀ} v_j / Σ_j e^{x_i U x_jᵀ}
    /// with U = W_q W_kᵀ / √d, computed with plain loops.
    fn rowwise_oracle(x: &Matrix<f64>, h: &HeadWeights<f64>, causal: bool) -> Matrix<f64> {
        let d = h.head_dim();
        let n = x.rows();
        let dm = x.cols();
        let u: Vec<Vec<f64>> = (0..dm)
            .map(|a| {
                (0..dm)
                    .map(|b| {
                        (0..d).map(|c| h.w_q.get(a, c) * h.w_k.get(b, c)).sum::<f64>() / (d as f64).sqrt()
                    })
                    .collect()
            })
            .collect();
        let mut out = Matrix::zeros(n, d);
        for i in 0..n {
            let cols: Vec<usize> = (0..n).filter(|&j| !causal || j <= i).collect();
            let logits: Vec<f64> = cols
                .iter()
                .map(|&j| {
                    let mut s = 0.0;
                    for (a, ua) in u.iter().enumerate() {
                        for (b, uab) in ua.iter().enumerate() {
                            s += x.get(i, a) * uab * x.get(j, b);
                        }
                    }
                    s
                })
                .collect();
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = w.iter().sum();
            for c in 0..d {
                let mut acc = 0.0;
                for (k, &j) in cols.iter().enumerate() {
                    let vj: f64 = (0..dm).map(|a| x.get(j, a) * h.w_v.get(a, c)).sum();
                    acc += w[k] * vj;
                }
                out.set(i, c, acc / z);
            }
        }
        out
    }

    #[test]
    fn single_token_attends_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(1, 4, &mut rng);
        let h = head(4, 3, &mut rng);
        let out = attention_reference(&x, &h, false).unwrap();
        assert!(out.max_abs_diff(&matmul(&x, &h.w_v).unwrap()) <= 1e-15);
    }

    #[test]
    fn uniform_rows_give_identical_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = random(1, 4, &mut rng);
        let x = Matrix::from_fn(5, 4, |_, j| r.get(0, j));
        let out = attention_reference(&x, &head(4, 2, &mut rng), false).unwrap();
        for i in 1..5 {
            assert_eq!(out.row(i), out.row(0));
        }
    }

    #[test]
    fn reference_matches_rowwise_expansion() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(6, 4, &mut rng);
        let h = head(4, 4, &mut rng);
        for causal in [false, true] {
            let fast = attention_reference(&x, &h, causal).unwrap();
            assert!(fast.max_abs_diff(&rowwise_oracle(&x, &h, causal)) <= 1e-12);
        }
    }

    #[test]
    fn permuted_kv_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(5, 4, &mut rng);
        let h = head(4, 3, &mut rng);
        let reference = attention_reference(&x, &h, false).unwrap();
        let ident: Vec<usize> = (0..5).collect();
        assert!(attention_permuted_kv(&x, &ident, &h, false)
            .unwrap()
            .bit_eq(&reference));
        let rev: Vec<usize> = (0..5).rev().collect();
        assert!(
            attention_permuted_kv(&x, &rev, &h, false)
                .unwrap()
                .max_abs_diff(&reference)
                <= 1e-12
        );
        let causal = attention_reference(&x, &h, true).unwrap();
        assert!(
            attention_permuted_kv(&x, &rev, &h, true)
                .unwrap()
                .max_abs_diff(&causal)
                <= 1e-12
        );
        assert!(matches!(
            attention_permuted_kv(&x, &[0, 0, 1, 2, 3], &h, false),
            Err(Error::InvalidPermutation(_))
        ));
        assert!(attention_permuted_kv(&x, &[0, 1], &h, false).is_err());
    }

    #[test]
    fn eq18_masks() {
        let plan = make_partition_plan(4, 2).unwrap();
        let m1 = build_causal_mask(&plan, pid(1), 1);
        assert_eq!((m1.rows(), m1.cols()), (2, 3));
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(m1.is_visible(i, j), j <= i && j < 2);
            }
        }
        let m2 = build_causal_mask(&plan, pid(2), 1);
        let bits: Vec<Vec<bool>> = (0..2)
            .map(|i| (0..3).map(|j| m2.is_visible(i, j)).collect())
            .collect();
        assert_eq!(bits, vec![vec![true, false, true], vec![true, true, true]]);

        let plan = make_partition_plan(23, 4).unwrap();
        for p in plan.ids() {
            let m = build_causal_mask(&plan, p, 3);
            for i in 0..m.rows() {
                assert_eq!(m.row_count(i), i + 1 + 3 * (p.get() - 1));
            }
        }
    }

    #[test]
    fn duplicated_oracle_single_landmark_mass() {
        // one peer landmark repeated k times gets k·e^s / denominator
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = head(3, 2, &mut rng);
        let x_p = random(2, 3, &mut rng);
        let z = SegmentMeans::new(pid(2), random(1, 3, &mut rng), vec![4]).unwrap();
        let out = attention_duplicated_oracle(&x_p, std::slice::from_ref(&z), &h, None).unwrap();
        let q = matmul(&x_p, &h.w_q).unwrap();
        let kv = concat_rows(&[&x_p, z.means()]).unwrap();
        let k = matmul(&kv, &h.w_k).unwrap();
        let v = matmul(&kv, &h.w_v).unwrap();
        for i in 0..2 {
            let s: Vec<f64> = (0..3)
                .map(|j| (0..2).map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() / 2f64.sqrt())
                .collect();
            let w = [s[0].exp(), s[1].exp(), 4.0 * s[2].exp()];
            let den: f64 = w.iter().sum();
            for c in 0..2 {
                let expect = (0..3).map(|j| w[j] * v.get(j, c)).sum::<f64>() / den;
                assert!((out.get(i, c) - expect).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn scaled_matches_duplicated_and_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(13, 4, &mut rng);
        let h = head(4, 4, &mut rng);
        let plan = make_partition_plan(13, 3).unwrap();
        for l in [1usize, 2, 4] {
            for p in plan.ids() {
                let blocks: Vec<_> = plan
                    .ids()
                    .filter(|&q| q != p)
                    .map(|q| segment_means(&plan.slice(&x, q).unwrap(), l, q).unwrap())
                    .collect();
                let local = plan.slice(&x, p).unwrap();
                let aug = assemble_augmented(&local, &blocks, &plan, p).unwrap();
                let mask = build_causal_mask(&plan, p, l);
                for m in [None, Some(&mask)] {
                    let a = attention_scaled(&local, &aug, &h, m).unwrap();
                    let b = attention_duplicated_oracle(&local, &blocks, &h, m).unwrap();
                    assert!(a.max_abs_diff(&b) <= 1e-12, "p={p} l={l}");
                }
            }
        }
    }

    #[test]
    fn scaled_identity_compression_matches_full_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(12, 4, &mut rng);
        let h = head(4, 4, &mut rng);
        let plan = make_partition_plan(12, 3).unwrap();
        for causal in [false, true] {
            let full = attention_reference(&x, &h, causal).unwrap();
            for p in plan.ids() {
                let blocks: Vec<_> = plan
                    .ids()
                    .filter(|&q| q != p)
                    .map(|q| segment_means(&plan.slice(&x, q).unwrap(), 4, q).unwrap())
                    .collect();
                let local = plan.slice(&x, p).unwrap();
                let aug = assemble_augmented(&local, &blocks, &plan, p).unwrap();
                let mask = causal.then(|| build_causal_mask(&plan, p, 4));
                let out = attention_scaled(&local, &aug, &h, mask.as_ref()).unwrap();
                let span = plan.span(p);
                let expect = full.slice_rows(span.start, span.end).unwrap();
                assert!(out.max_abs_diff(&expect) <= 1e-12);
            }
        }
    }

    #[test]
    fn scaled_single_partition_is_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(6, 4, &mut rng);
        let h = head(4, 2, &mut rng);
        let plan = make_partition_plan(6, 1).unwrap();
        let aug = assemble_augmented(&x, &[], &plan, pid(1)).unwrap();
        let out = attention_scaled(&x, &aug, &h, None).unwrap();
        assert!(out.max_abs_diff(&attention_reference(&x, &h, false).unwrap()) <= 1e-15);
    }

    #[test]
    fn fully_masked_row_is_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(2, 3, &mut rng);
        let h = head(3, 2, &mut rng);
        let mask = CausalMask::from_fn(2, 2, pid(1), |i, _| i == 0);
        assert!(matches!(
            attend(&x, &x, &h, Some(&mask), None),
            Err(Error::DegenerateMask { row: 1 })
        ));
        let bad = CausalMask::lower_triangular(3);
        assert!(matches!(
            attend(&x, &x, &h, Some(&bad), None),
            Err(Error::Shape { .. })
        ));
    }
}
