//! Per-device state machines. A worker advances exactly one block per
//! successful step and never starts block `b` before every input of block
//! `b` has arrived.

use std::collections::BTreeMap;

use crate::attention::{attend, attention_scaled, build_causal_mask, CausalMask};
use crate::error::{Error, Result};
use crate::flops;
use crate::model::{TransformerConfig, WeightSet};
use crate::partition::{assemble_augmented, segment_means, PartitionId, PartitionPlan, SegmentMeans};
use crate::scalar::Scalar;
use crate::tensor::{concat_rows, Matrix};

use super::message::{Destination, DeviceId, Message, MessageKind};
use super::{ExchangeMode, Strategy};

/// A peer's block contribution: source, rows, and repetition counts.
type PeerBlock<T> = (PartitionId, Matrix<T>, Vec<u64>);

#[derive(Debug)]
pub enum StepOutcome<T> {
    Advanced {
        block: usize,
        flops: u64,
        outgoing: Vec<Message<T>>,
    },
    /// Inputs for `block` are incomplete; `missing` lists the senders.
    Blocked {
        block: usize,
        missing: Vec<DeviceId>,
    },
    Finished,
}

/// The kind of peer payload a strategy exchanges between blocks.
pub(crate) fn exchange_kind(strategy: Strategy) -> Result<MessageKind> {
    match strategy {
        Strategy::Prism => Ok(MessageKind::SegmentMeansBlock),
        Strategy::Voltage => Ok(MessageKind::FullPartitionBlock),
        Strategy::Single => Err(Error::Config("the single strategy has no workers".into())),
    }
}

pub struct Worker<'a, T> {
    id: PartitionId,
    strategy: Strategy,
    mode: ExchangeMode,
    config: &'a TransformerConfig,
    weights: &'a WeightSet<T>,
    plan: Option<PartitionPlan>,
    hidden: Option<Matrix<T>>,
    block: usize,
    inbox: BTreeMap<(usize, DeviceId), Message<T>>,
    seq: u64,
    finished: bool,
}

impl<'a, T: Scalar> Worker<'a, T> {
    pub fn new(
        id: PartitionId,
        strategy: Strategy,
        mode: ExchangeMode,
        config: &'a TransformerConfig,
        weights: &'a WeightSet<T>,
    ) -> Result<Self> {
        exchange_kind(strategy)?;
        Ok(Self {
            id,
            strategy,
            mode,
            config,
            weights,
            plan: None,
            hidden: None,
            block: 0,
            inbox: BTreeMap::new(),
            seq: 0,
            finished: false,
        })
    }

    pub fn device(&self) -> DeviceId {
        DeviceId::worker(self.id)
    }

    pub fn partition(&self) -> PartitionId {
        self.id
    }

    /// Next block to run (equals `n_blocks` once finished).
    pub fn block(&self) -> usize {
        self.block
    }

    pub fn step(&mut self, incoming: Vec<Message<T>>) -> Result<StepOutcome<T>> {
        for msg in incoming {
            self.absorb(msg)?;
        }
        if self.finished {
            return Ok(StepOutcome::Finished);
        }
        let missing = self.missing();
        if !missing.is_empty() {
            return Ok(StepOutcome::Blocked {
                block: self.block,
                missing,
            });
        }
        let block = self.block;
        let (result, flops) = flops::measure(|| self.run_block(block));
        let outgoing = result?;
        self.block += 1;
        if self.block == self.config.n_blocks {
            self.finished = true;
        }
        Ok(StepOutcome::Advanced {
            block,
            flops,
            outgoing,
        })
    }

    fn protocol(&self, what: String) -> Error {
        Error::Protocol(format!("{}: {what}", self.device()))
    }

    fn absorb(&mut self, msg: Message<T>) -> Result<()> {
        let me = self.device();
        let addressed = match msg.to {
            Destination::Device(d) => d == me,
            Destination::Broadcast => msg.from != me,
        };
        if !addressed {
            return Err(self.protocol(format!("misrouted message {}", msg.trace_line())));
        }
        match msg.kind {
            MessageKind::Control => {
                if !msg.from.is_master() || self.plan.is_some() {
                    return Err(self.protocol("unexpected control message".into()));
                }
                let bounds: Vec<usize> = msg.counts.iter().map(|&c| c as usize).collect();
                let plan = PartitionPlan::from_boundaries(&bounds)?;
                if self.id.get() > plan.n_partitions() || plan.n_tokens() != self.config.n_tokens {
                    return Err(self.protocol(format!("plan {bounds:?} does not fit")));
                }
                self.plan = Some(plan);
            }
            MessageKind::InputPartition => {
                if !msg.from.is_master() || self.hidden.is_some() {
                    return Err(self.protocol("unexpected input partition".into()));
                }
                self.hidden = Some(msg.matrix);
            }
            MessageKind::OutputPartition => {
                return Err(self.protocol("workers do not accept outputs".into()));
            }
            kind => {
                if kind != exchange_kind(self.strategy)? {
                    return Err(self.protocol(format!("{kind} is not used by {}", self.strategy)));
                }
                if msg.block < self.block || msg.block >= self.config.n_blocks {
                    return Err(self.protocol(format!(
                        "stale or out-of-range block {} (at {})",
                        msg.block, self.block
                    )));
                }
                if (msg.block == 0) != msg.from.is_master() {
                    return Err(self.protocol(format!(
                        "block {} data from {} is not expected",
                        msg.block, msg.from
                    )));
                }
                let key = (msg.block, msg.from);
                if self.inbox.contains_key(&key) {
                    return Err(self.protocol(format!("duplicate {}", msg.trace_line())));
                }
                self.inbox.insert(key, msg);
            }
        }
        Ok(())
    }

    fn peers(&self, plan: &PartitionPlan) -> Vec<PartitionId> {
        plan.ids().filter(|&q| q != self.id).collect()
    }

    fn missing(&self) -> Vec<DeviceId> {
        let Some(plan) = &self.plan else {
            return vec![DeviceId::MASTER];
        };
        if self.hidden.is_none() {
            return vec![DeviceId::MASTER];
        }
        let senders = if self.block == 0 {
            vec![DeviceId::MASTER]
        } else {
            self.peers(plan).into_iter().map(DeviceId::worker).collect()
        };
        senders
            .into_iter()
            .filter(|d| !self.inbox.contains_key(&(self.block, *d)))
            .collect()
    }

    fn take_peer_blocks(&mut self, block: usize, plan: &PartitionPlan) -> Result<Vec<PeerBlock<T>>> {
        let peers = self.peers(plan);
        if block > 0 {
            return peers
                .into_iter()
                .map(|q| {
                    let msg = self
                        .inbox
                        .remove(&(block, DeviceId::worker(q)))
                        .expect("presence checked before running");
                    Ok((q, msg.matrix, msg.counts))
                })
                .collect();
        }
        // Block 0: the master stacks every peer's payload in ascending order.
        let msg = self
            .inbox
            .remove(&(0, DeviceId::MASTER))
            .expect("presence checked before running");
        let rows_of = |q: PartitionId| match self.strategy {
            Strategy::Prism => self.config.landmarks,
            _ => plan.size(q),
        };
        let total: usize = peers.iter().map(|&q| rows_of(q)).sum();
        if msg.matrix.rows() != total {
            return Err(self.protocol(format!(
                "stacked block-0 payload has {} rows, expected {total}",
                msg.matrix.rows()
            )));
        }
        let mut out = Vec::with_capacity(peers.len());
        let mut offset = 0;
        for q in peers {
            let r = rows_of(q);
            let counts = match self.strategy {
                Strategy::Prism => msg
                    .counts
                    .get(offset..offset + r)
                    .ok_or_else(|| self.protocol("stacked counts too short".into()))?
                    .to_vec(),
                _ => Vec::new(),
            };
            out.push((q, msg.matrix.slice_rows(offset, offset + r)?, counts));
            offset += r;
        }
        Ok(out)
    }

    fn run_block(&mut self, b: usize) -> Result<Vec<Message<T>>> {
        let plan = self.plan.clone().expect("plan checked before running");
        let hidden = self.hidden.take().expect("input checked before running");
        if hidden.rows() != plan.size(self.id) {
            return Err(self.protocol(format!(
                "local partition has {} rows, plan says {}",
                hidden.rows(),
                plan.size(self.id)
            )));
        }
        let peer_blocks = self.take_peer_blocks(b, &plan)?;
        let block = &self.weights.blocks[b];
        let eps = self.weights.ln_eps;
        let causal = self.config.kind.is_causal();

        let heads = match self.strategy {
            Strategy::Prism => {
                let received = peer_blocks
                    .into_iter()
                    .map(|(q, means, counts)| {
                        SegmentMeans::new(q, means, counts.iter().map(|&c| c as usize).collect())
                    })
                    .collect::<Result<Vec<_>>>()?;
                let aug = assemble_augmented(&hidden, &received, &plan, self.id)?;
                let normed = aug.map_rows(|m| block.ln1(m, eps))?;
                let mask = causal.then(|| build_causal_mask(&plan, self.id, self.config.landmarks));
                block
                    .heads
                    .iter()
                    .map(|h| attention_scaled(normed.local(), &normed, h, mask.as_ref()))
                    .collect::<Result<Vec<_>>>()?
            }
            _ => {
                let mut parts: Vec<&Matrix<T>> = Vec::with_capacity(plan.n_partitions());
                let mut it = peer_blocks.iter().peekable();
                for q in plan.ids() {
                    if q == self.id {
                        parts.push(&hidden);
                    } else {
                        let (src, m, _) = it.next().expect("one block per peer");
                        debug_assert_eq!(*src, q);
                        if m.rows() != plan.size(q) {
                            return Err(self.protocol(format!(
                                "{q} sent {} rows, plan says {}",
                                m.rows(),
                                plan.size(q)
                            )));
                        }
                        parts.push(m);
                    }
                }
                let full = block.ln1(&concat_rows(&parts)?, eps)?;
                let span = plan.span(self.id);
                let local = full.slice_rows(span.start, span.end)?;
                let mask = causal.then(|| {
                    CausalMask::from_fn(local.rows(), full.rows(), self.id, |i, j| j <= span.start + i)
                });
                block
                    .heads
                    .iter()
                    .map(|h| attend(&local, &full, h, mask.as_ref(), None))
                    .collect::<Result<Vec<_>>>()?
            }
        };
        let out = block.finish(&hidden, &heads, eps)?;

        let mut outgoing = Vec::new();
        if b + 1 == self.config.n_blocks {
            outgoing.push(self.message(
                Destination::Device(DeviceId::MASTER),
                b + 1,
                MessageKind::OutputPartition,
                self.weights.final_norm(&out)?,
                Vec::new(),
            ));
            return Ok(outgoing);
        }
        let kind = exchange_kind(self.strategy)?;
        let (payload, counts) = match self.strategy {
            Strategy::Prism => {
                let sm = segment_means(&out, self.config.landmarks, self.id)?;
                let counts = sm.counts().iter().map(|&c| c as u64).collect();
                (sm.means().clone(), counts)
            }
            _ => (out.clone(), Vec::new()),
        };
        match self.mode {
            ExchangeMode::Broadcast => {
                outgoing.push(self.message(Destination::Broadcast, b + 1, kind, payload, counts));
            }
            ExchangeMode::Unicast => {
                for q in self.peers(&plan) {
                    outgoing.push(self.message(
                        Destination::Device(DeviceId::worker(q)),
                        b + 1,
                        kind,
                        payload.clone(),
                        counts.clone(),
                    ));
                }
            }
        }
        self.hidden = Some(out);
        Ok(outgoing)
    }

    fn message(
        &mut self,
        to: Destination,
        block: usize,
        kind: MessageKind,
        matrix: Matrix<T>,
        counts: Vec<u64>,
    ) -> Message<T> {
        let seq = self.seq;
        self.seq += 1;
        Message {
            from: self.device(),
            to,
            block,
            kind,
            seq,
            matrix,
            counts,
        }
    }
}

/// Device 0: scatters inputs and block-0 peer data, then gathers outputs.
pub struct Master<T> {
    plan: PartitionPlan,
    strategy: Strategy,
    landmarks: usize,
    n_blocks: usize,
    seq: u64,
    outputs: Vec<Message<T>>,
}

impl<T: Scalar> Master<T> {
    pub fn new(plan: PartitionPlan, strategy: Strategy, config: &TransformerConfig) -> Result<Self> {
        exchange_kind(strategy)?;
        Ok(Self {
            plan,
            strategy,
            landmarks: config.landmarks,
            n_blocks: config.n_blocks,
            seq: 0,
            outputs: Vec::new(),
        })
    }

    fn message(
        &mut self,
        to: PartitionId,
        kind: MessageKind,
        matrix: Matrix<T>,
        counts: Vec<u64>,
    ) -> Message<T> {
        let seq = self.seq;
        self.seq += 1;
        Message {
            from: DeviceId::MASTER,
            to: Destination::Device(DeviceId::worker(to)),
            block: 0,
            kind,
            seq,
            matrix,
            counts,
        }
    }

    /// Per worker: the plan, its input rows and every peer's block-0
    /// payload stacked in ascending partition order.
    pub fn distribute(&mut self, x: &Matrix<T>) -> Result<Vec<Message<T>>> {
        let plan = self.plan.clone();
        let slices = plan.ids().map(|p| plan.slice(x, p)).collect::<Result<Vec<_>>>()?;
        let means = match self.strategy {
            Strategy::Prism => Some(
                plan.ids()
                    .zip(&slices)
                    .map(|(p, s)| segment_means(s, self.landmarks, p))
                    .collect::<Result<Vec<_>>>()?,
            ),
            _ => None,
        };
        let kind = exchange_kind(self.strategy)?;
        let bounds: Vec<u64> = plan.boundaries().iter().map(|&b| b as u64).collect();
        let mut out = Vec::new();
        for p in plan.ids() {
            out.push(self.message(p, MessageKind::Control, Matrix::zeros(0, 0), bounds.clone()));
            out.push(self.message(
                p,
                MessageKind::InputPartition,
                slices[p.index()].clone(),
                Vec::new(),
            ));
            let others: Vec<usize> = plan.ids().filter(|&q| q != p).map(|q| q.index()).collect();
            let (stacked, counts) = match &means {
                Some(means) => {
                    let parts: Vec<&Matrix<T>> = others.iter().map(|&q| means[q].means()).collect();
                    let counts = others
                        .iter()
                        .flat_map(|&q| means[q].counts().iter().map(|&c| c as u64))
                        .collect();
                    (concat_rows(&parts)?, counts)
                }
                None => {
                    let parts: Vec<&Matrix<T>> = others.iter().map(|&q| &slices[q]).collect();
                    (concat_rows(&parts)?, Vec::new())
                }
            };
            out.push(self.message(p, kind, stacked, counts));
        }
        Ok(out)
    }

    pub fn receive(&mut self, msg: Message<T>) -> Result<()> {
        if msg.kind != MessageKind::OutputPartition
            || msg.to != Destination::Device(DeviceId::MASTER)
            || msg.block != self.n_blocks
        {
            return Err(Error::Protocol(format!(
                "master cannot accept {}",
                msg.trace_line()
            )));
        }
        if self.outputs.iter().any(|m| m.from == msg.from) {
            return Err(Error::Protocol(format!("duplicate output from {}", msg.from)));
        }
        self.outputs.push(msg);
        Ok(())
    }

    pub fn is_complete(&self) -> bool {
        self.outputs.len() == self.plan.n_partitions()
    }

    pub fn finish(&self) -> Result<Matrix<T>> {
        aggregate(&self.outputs, &self.plan)
    }
}

/// Concatenates worker outputs in partition order. Arrival order does not
/// matter; a missing, duplicate or misshapen partition is an error.
pub fn aggregate<T: Scalar>(outputs: &[Message<T>], plan: &PartitionPlan) -> Result<Matrix<T>> {
    let mut slots: Vec<Option<&Matrix<T>>> = vec![None; plan.n_partitions()];
    for m in outputs {
        let p = m
            .from
            .partition()
            .filter(|p| p.get() <= plan.n_partitions())
            .ok_or_else(|| Error::Protocol(format!("output from unknown device {}", m.from)))?;
        if m.kind != MessageKind::OutputPartition {
            return Err(Error::Protocol(format!("{} is not an output", m.trace_line())));
        }
        if m.matrix.rows() != plan.size(p) {
            return Err(Error::Protocol(format!(
                "{p} returned {} rows, plan says {}",
                m.matrix.rows(),
                plan.size(p)
            )));
        }
        if slots[p.index()].replace(&m.matrix).is_some() {
            return Err(Error::Protocol(format!("duplicate output for {p}")));
        }
    }
    let parts = slots
        .iter()
        .zip(plan.ids())
        .map(|(s, p)| s.ok_or_else(|| Error::Protocol(format!("missing output for {p}"))))
        .collect::<Result<Vec<_>>>()?;
    concat_rows(&parts)
}
