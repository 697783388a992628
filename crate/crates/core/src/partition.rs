//! Sequence partitioning, Segment Means compression and augmented inputs.

use std::fmt;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{concat_rows, segment_row_mean, Matrix};

/// 1-based partition (and worker device) id. Ids follow sequence order:
/// partition 1 holds the earliest tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PartitionId(usize);

impl PartitionId {
    pub fn new(id: usize) -> Result<Self> {
        if id == 0 {
            return Err(Error::InvalidPlan("partition ids start at 1".into()));
        }
        Ok(Self(id))
    }

    #[inline]
    pub fn get(self) -> usize {
        self.0
    }

    #[inline]
    pub fn index(self) -> usize {
        self.0 - 1
    }
}

impl fmt::Display for PartitionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

/// Contiguous token ranges, one per device. Every partition has
/// `floor(N/P)` tokens except the last, which also takes `N mod P`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionPlan {
    n_tokens: usize,
    spans: Vec<Range<usize>>,
}

pub fn make_partition_plan(n_tokens: usize, n_partitions: usize) -> Result<PartitionPlan> {
    if n_partitions == 0 || n_partitions > n_tokens {
        return Err(Error::InvalidPlan(format!(
            "need 1 <= P <= N, got P={n_partitions}, N={n_tokens}"
        )));
    }
    let base = n_tokens / n_partitions;
    let rem = n_tokens % n_partitions;
    let mut spans = Vec::with_capacity(n_partitions);
    let mut start = 0;
    for i in 1..=n_partitions {
        let mut end = start + base;
        if i == n_partitions {
            end += rem;
        }
        spans.push(start..end);
        start = end;
    }
    Ok(PartitionPlan { n_tokens, spans })
}

impl PartitionPlan {
    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn n_partitions(&self) -> usize {
        self.spans.len()
    }

    pub fn ids(&self) -> impl Iterator<Item = PartitionId> + '_ {
        (1..=self.spans.len()).map(PartitionId)
    }

    pub fn id(&self, p: usize) -> Result<PartitionId> {
        if p == 0 || p > self.spans.len() {
            return Err(Error::InvalidPlan(format!(
                "partition {p} outside 1..={}",
                self.spans.len()
            )));
        }
        Ok(PartitionId(p))
    }

    pub fn span(&self, p: PartitionId) -> Range<usize> {
        self.spans[p.index()].clone()
    }

    pub fn size(&self, p: PartitionId) -> usize {
        self.spans[p.index()].len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.spans.iter().map(|s| s.len()).collect()
    }

    /// Start offsets followed by `N`; this is what the master ships to
    /// workers so each can rebuild the plan.
    pub fn boundaries(&self) -> Vec<usize> {
        let mut b: Vec<usize> = self.spans.iter().map(|s| s.start).collect();
        b.push(self.n_tokens);
        b
    }

    pub fn from_boundaries(boundaries: &[usize]) -> Result<Self> {
        if boundaries.len() < 2 {
            return Err(Error::InvalidPlan("need at least two boundaries".into()));
        }
        let n = *boundaries.last().expect("len >= 2");
        let plan = make_partition_plan(n, boundaries.len() - 1)?;
        if plan.boundaries() != boundaries {
            return Err(Error::InvalidPlan(format!(
                "boundaries {boundaries:?} do not follow the remainder-last layout"
            )));
        }
        Ok(plan)
    }

    pub fn slice<T: Scalar>(&self, x: &Matrix<T>, p: PartitionId) -> Result<Matrix<T>> {
        if x.rows() != self.n_tokens {
            return Err(Error::Shape {
                op: "PartitionPlan::slice",
                left: x.shape(),
                right: (self.n_tokens, x.cols()),
            });
        }
        let s = self.span(p);
        x.slice_rows(s.start, s.end)
    }
}

/// Segment boundaries inside one partition of `n_rows` tokens: `L - 1`
/// segments of `floor(n/L)` and a last one that also takes `n mod L`.
pub fn segment_bounds(n_rows: usize, landmarks: usize) -> Result<Vec<Range<usize>>> {
    if landmarks == 0 || landmarks > n_rows {
        return Err(Error::InvalidLandmarkCount {
            landmarks,
            rows: n_rows,
        });
    }
    let s = n_rows / landmarks;
    let r = n_rows % landmarks;
    Ok((0..landmarks)
        .map(|l| {
            let start = l * s;
            let end = if l == landmarks - 1 {
                start + s + r
            } else {
                start + s
            };
            start..end
        })
        .collect())
}

/// `L × D` landmark block of one partition with per-segment token counts.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentMeans<T> {
    source: PartitionId,
    means: Matrix<T>,
    counts: Vec<usize>,
}

impl<T: Scalar> SegmentMeans<T> {
    pub fn new(source: PartitionId, means: Matrix<T>, counts: Vec<usize>) -> Result<Self> {
        if means.rows() != counts.len() || counts.contains(&0) {
            return Err(Error::Protocol(format!(
                "segment means from {source}: {} rows but counts {counts:?}",
                means.rows()
            )));
        }
        Ok(Self {
            source,
            means,
            counts,
        })
    }

    pub fn source(&self) -> PartitionId {
        self.source
    }

    pub fn means(&self) -> &Matrix<T> {
        &self.means
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn landmarks(&self) -> usize {
        self.counts.len()
    }

    /// Tokens summarized, i.e. `N_p` of the source partition.
    pub fn represented_tokens(&self) -> usize {
        self.counts.iter().sum()
    }
}

pub fn segment_means<T: Scalar>(
    x_p: &Matrix<T>,
    landmarks: usize,
    source: PartitionId,
) -> Result<SegmentMeans<T>> {
    let bounds = segment_bounds(x_p.rows(), landmarks)?;
    let mut rows = Vec::with_capacity(landmarks);
    for b in &bounds {
        rows.push(segment_row_mean(x_p, b.start, b.end)?);
    }
    Ok(SegmentMeans {
        source,
        means: Matrix::from_rows(&rows)?,
        counts: bounds.iter().map(|b| b.len()).collect(),
    })
}

/// Repeats each landmark `counts[l]` times, in segment order. This is the
/// slow duplicated form, kept for oracles.
pub fn expand_duplicated<T: Scalar>(received: &SegmentMeans<T>) -> Matrix<T> {
    let idx: Vec<usize> = received
        .counts
        .iter()
        .enumerate()
        .flat_map(|(l, &c)| std::iter::repeat_n(l, c))
        .collect();
    received
        .means
        .select_rows(&idx)
        .expect("indices come from counts of the same block")
}

/// Where a row of an augmented input came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowOrigin {
    Local { index: usize },
    Landmark { source: PartitionId, segment: usize },
}

/// A device's local tokens followed by every peer's landmarks in ascending
/// source order, with the repetition count of each row.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedInput<T> {
    owner: PartitionId,
    local: Matrix<T>,
    landmark_blocks: Vec<SegmentMeans<T>>,
    assembled: Matrix<T>,
    g: Vec<usize>,
    provenance: Vec<RowOrigin>,
}

pub fn assemble_augmented<T: Scalar>(
    local: &Matrix<T>,
    received: &[SegmentMeans<T>],
    plan: &PartitionPlan,
    owner: PartitionId,
) -> Result<AugmentedInput<T>> {
    if owner.get() > plan.n_partitions() {
        return Err(Error::Protocol(format!("{owner} is not in the plan")));
    }
    if local.rows() != plan.size(owner) {
        return Err(Error::Shape {
            op: "assemble_augmented",
            left: local.shape(),
            right: (plan.size(owner), local.cols()),
        });
    }
    let mut blocks: Vec<SegmentMeans<T>> = received.to_vec();
    blocks.sort_by_key(|b| b.source);
    let expected: Vec<PartitionId> = plan.ids().filter(|&q| q != owner).collect();
    let got: Vec<PartitionId> = blocks.iter().map(|b| b.source).collect();
    if got != expected {
        return Err(Error::Protocol(format!(
            "{owner} expected landmarks from {expected:?}, got {got:?}"
        )));
    }
    if let Some(first) = blocks.first() {
        let l = first.landmarks();
        for b in &blocks {
            if b.landmarks() != l {
                return Err(Error::Protocol(format!(
                    "landmark counts disagree: {} has {}, {} has {l}",
                    b.source,
                    b.landmarks(),
                    first.source
                )));
            }
            if b.represented_tokens() != plan.size(b.source) {
                return Err(Error::Protocol(format!(
                    "{} summarizes {} tokens, plan says {}",
                    b.source,
                    b.represented_tokens(),
                    plan.size(b.source)
                )));
            }
            if b.means.cols() != local.cols() {
                return Err(Error::Shape {
                    op: "assemble_augmented",
                    left: local.shape(),
                    right: b.means.shape(),
                });
            }
        }
    }

    let mut parts = vec![local];
    parts.extend(blocks.iter().map(|b| &b.means));
    let assembled = concat_rows(&parts)?;

    let mut g = vec![1; local.rows()];
    let mut provenance: Vec<RowOrigin> = (0..local.rows())
        .map(|index| RowOrigin::Local { index })
        .collect();
    for b in &blocks {
        g.extend_from_slice(&b.counts);
        provenance.extend((0..b.landmarks()).map(|segment| RowOrigin::Landmark {
            source: b.source,
            segment,
        }));
    }

    Ok(AugmentedInput {
        owner,
        local: local.clone(),
        landmark_blocks: blocks,
        assembled,
        g,
        provenance,
    })
}

impl<T: Scalar> AugmentedInput<T> {
    pub fn owner(&self) -> PartitionId {
        self.owner
    }

    pub fn local(&self) -> &Matrix<T> {
        &self.local
    }

    pub fn landmark_blocks(&self) -> &[SegmentMeans<T>] {
        &self.landmark_blocks
    }

    pub fn assembled(&self) -> &Matrix<T> {
        &self.assembled
    }

    /// Repetition count per assembled row; sums to `N`.
    pub fn g(&self) -> &[usize] {
        &self.g
    }

    pub fn provenance(&self) -> &[RowOrigin] {
        &self.provenance
    }

    pub fn local_rows(&self) -> usize {
        self.local.rows()
    }

    /// Applies a row-wise map (e.g. layer normalization) to every assembled
    /// row, keeping `local` and the landmark blocks in sync with it.
    pub fn map_rows(&self, f: impl FnOnce(&Matrix<T>) -> Result<Matrix<T>>) -> Result<Self> {
        let assembled = f(&self.assembled)?;
        if assembled.rows() != self.assembled.rows() {
            return Err(Error::Shape {
                op: "AugmentedInput::map_rows",
                left: self.assembled.shape(),
                right: assembled.shape(),
            });
        }
        let n_local = self.local.rows();
        let local = assembled.slice_rows(0, n_local)?;
        let mut offset = n_local;
        let mut blocks = Vec::with_capacity(self.landmark_blocks.len());
        for b in &self.landmark_blocks {
            let means = assembled.slice_rows(offset, offset + b.landmarks())?;
            offset += b.landmarks();
            blocks.push(SegmentMeans {
                source: b.source,
                means,
                counts: b.counts.clone(),
            });
        }
        Ok(Self {
            owner: self.owner,
            local,
            landmark_blocks: blocks,
            assembled,
            g: self.g.clone(),
            provenance: self.provenance.clone(),
        })
    }

    /// Replaces the repetition vector without any consistency check. Only
    /// meant for fault-injection tests of the verification suite.
    pub fn with_counts_unchecked(mut self, g: Vec<usize>) -> Self {
        self.g = g;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pid(p: usize) -> PartitionId {
        PartitionId::new(p).unwrap()
    }

    #[test]
    fn plan_examples() {
        assert_eq!(make_partition_plan(197, 2).unwrap().sizes(), vec![98, 99]);
        assert_eq!(make_partition_plan(10, 1).unwrap().sizes(), vec![10]);
        assert_eq!(make_partition_plan(7, 3).unwrap().sizes(), vec![2, 2, 3]);
        assert!(matches!(make_partition_plan(3, 4), Err(Error::InvalidPlan(_))));
        assert!(make_partition_plan(3, 0).is_err());
    }

    #[test]
    fn plan_boundaries_roundtrip() {
        let plan = make_partition_plan(197, 3).unwrap();
        assert_eq!(plan.boundaries(), vec![0, 65, 130, 197]);
        assert_eq!(PartitionPlan::from_boundaries(&plan.boundaries()).unwrap(), plan);
        assert!(PartitionPlan::from_boundaries(&[0, 66, 130, 197]).is_err());
    }

    #[test]
    fn segment_means_examples() {
        let x = Matrix::from_rows(&[[0.0], [2.0], [4.0], [6.0], [8.0]]).unwrap();
        let sm = segment_means(&x, 2, pid(1)).unwrap();
        assert_eq!(sm.counts(), &[2, 3]);
        assert_eq!(sm.means().as_slice(), &[1.0, 6.0]);

        let same = Matrix::from_fn(7, 3, |_, j| j as f64 + 0.5);
        for l in 1..=7 {
            let sm = segment_means(&same, l, pid(1)).unwrap();
            for i in 0..l {
                assert_eq!(sm.means().row(i), same.row(0));
            }
        }

        let x = Matrix::from_fn(4, 2, |i, j| (i * 3 + j) as f64);
        let sm = segment_means(&x, 4, pid(2)).unwrap();
        assert_eq!(sm.means(), &x);
        assert!(matches!(
            segment_means(&x, 5, pid(1)),
            Err(Error::InvalidLandmarkCount { .. })
        ));
        assert!(segment_means(&x, 0, pid(1)).is_err());
    }

    #[test]
    fn expand_examples() {
        let sm = SegmentMeans::new(pid(1), Matrix::from_rows(&[[1.0], [6.0]]).unwrap(), vec![2, 3]).unwrap();
        assert_eq!(expand_duplicated(&sm).as_slice(), &[1.0, 1.0, 6.0, 6.0, 6.0]);
        let x = Matrix::from_fn(3, 2, |i, j| (i + 2 * j) as f64);
        let sm = segment_means(&x, 3, pid(1)).unwrap();
        assert_eq!(expand_duplicated(&sm), x);
    }

    #[test]
    fn augmented_vit_shapes() {
        let plan = make_partition_plan(197, 2).unwrap();
        let x = Matrix::from_fn(197, 4, |i, j| (i * 4 + j) as f64);
        let z2 = segment_means(&plan.slice(&x, pid(2)).unwrap(), 10, pid(2)).unwrap();
        let aug = assemble_augmented(&plan.slice(&x, pid(1)).unwrap(), &[z2], &plan, pid(1)).unwrap();
        assert_eq!(aug.assembled().rows(), 108);
        assert_eq!(aug.g().iter().sum::<usize>(), 197);
        assert_eq!(
            aug.provenance()[98],
            RowOrigin::Landmark {
                source: pid(2),
                segment: 0
            }
        );
    }

    #[test]
    fn augmented_single_partition_is_local() {
        let plan = make_partition_plan(5, 1).unwrap();
        let x = Matrix::from_fn(5, 2, |i, j| (i + j) as f64);
        let aug = assemble_augmented(&x, &[], &plan, pid(1)).unwrap();
        assert_eq!(aug.assembled(), &x);
        assert_eq!(aug.g(), &[1; 5]);
    }

    #[test]
    fn augmented_three_way_counts() {
        let plan = make_partition_plan(12, 3).unwrap();
        let x = Matrix::from_fn(12, 3, |i, j| (i * j) as f64);
        let blocks: Vec<_> = [3, 1]
            .iter()
            .map(|&q| segment_means(&plan.slice(&x, pid(q)).unwrap(), 2, pid(q)).unwrap())
            .collect();
        let aug = assemble_augmented(&plan.slice(&x, pid(2)).unwrap(), &blocks, &plan, pid(2)).unwrap();
        assert_eq!(aug.g(), &[1, 1, 1, 1, 2, 2, 2, 2]);
        // ascending source order regardless of arrival order
        assert_eq!(aug.landmark_blocks()[0].source(), pid(1));
        assert_eq!(aug.assembled().rows(), 4 + 2 * 2);
    }

    #[test]
    fn augmented_protocol_errors() {
        let plan = make_partition_plan(12, 3).unwrap();
        let x = Matrix::from_fn(12, 3, |i, j| (i + j) as f64);
        let z1 = segment_means(&plan.slice(&x, pid(1)).unwrap(), 2, pid(1)).unwrap();
        let local = plan.slice(&x, pid(2)).unwrap();
        assert!(matches!(
            assemble_augmented(&local, std::slice::from_ref(&z1), &plan, pid(2)),
            Err(Error::Protocol(_))
        ));
        assert!(matches!(
            assemble_augmented(&local, &[z1.clone(), z1.clone()], &plan, pid(2)),
            Err(Error::Protocol(_))
        ));
        let z3 = segment_means(&plan.slice(&x, pid(3)).unwrap(), 3, pid(3)).unwrap();
        assert!(matches!(
            assemble_augmented(&local, &[z1, z3], &plan, pid(2)),
            Err(Error::Protocol(_))
        ));
    }
}
