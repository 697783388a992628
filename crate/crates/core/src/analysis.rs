//! Closed-form cost models: FLOPs, communication volume, compression rate
//! and a latency-versus-bandwidth model.
//!
//! The FLOP formulas mirror what the kernels in [`crate::tensor`] charge,
//! term for term, so a simulated run and [`flops_forward`] agree exactly.
//! Masked attention entries are charged at the dense rate because the
//! kernels evaluate the full score matrix.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::TransformerConfig;
use crate::partition::{make_partition_plan, PartitionId, PartitionPlan};
use crate::runtime::{
    CommLedger, DeviceId, ExchangeMode, LedgerEntry, LedgerKey, MessageKind, NetworkModel, Strategy,
    HEADER_BYTES,
};
use crate::scalar::Scalar;

/// How the landmark count is chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Compression {
    Landmarks(usize),
    /// Nominal compression rate `k`: `L = floor(N / (k·P))`.
    Rate(f64),
}

impl Compression {
    pub fn landmarks(self, n_tokens: usize, n_partitions: usize) -> Result<usize> {
        let l = match self {
            Compression::Landmarks(l) => l,
            Compression::Rate(k) => {
                if !(k >= 1.0) {
                    return Err(Error::Config(format!("compression rate must be >= 1, got {k}")));
                }
                (n_tokens as f64 / (k * n_partitions as f64)).floor() as usize
            }
        };
        let max_l = n_tokens / n_partitions.max(1);
        if l == 0 || l > max_l {
            return Err(Error::InvalidLandmarkCount {
                landmarks: l,
                rows: max_l,
            });
        }
        Ok(l)
    }
}

/// Rows entering one block on one device.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockShape {
    /// Query rows: the tokens the device owns.
    pub q_rows: usize,
    /// Key/value rows.
    pub kv_rows: usize,
    /// Rows passed through the first layer norm.
    pub ln_rows: usize,
    /// Scaled softmax with repetition weights.
    pub weighted: bool,
}

pub fn layernorm_flops(rows: usize, dim: usize) -> u64 {
    (rows * (7 * dim + 5)) as u64
}

/// One head: projections, scores, scaling, masked softmax, weighted sum.
pub fn attention_head_flops(q: usize, kv: usize, embed_dim: usize, head_dim: usize, weighted: bool) -> u64 {
    let (q, kv, dm, d) = (q as u64, kv as u64, embed_dim as u64, head_dim as u64);
    let softmax = if weighted { 5 } else { 4 };
    2 * q * dm * d + 4 * kv * dm * d + 4 * q * kv * d + q * kv + softmax * q * kv
}

pub fn block_flops(config: &TransformerConfig, s: BlockShape) -> u64 {
    let (dm, f) = (config.embed_dim as u64, config.ffn_dim as u64);
    let q = s.q_rows as u64;
    let heads = config.n_heads as u64
        * attention_head_flops(s.q_rows, s.kv_rows, config.embed_dim, config.head_dim, s.weighted);
    let tail = 2 * q * dm * dm      // output projection
        + q * dm                    // residual
        + layernorm_flops(s.q_rows, config.embed_dim)
        + 2 * q * dm * f            // first FFN matmul
        + 9 * q * f                 // gelu
        + 2 * q * f * dm            // second FFN matmul
        + q * dm; // residual
    layernorm_flops(s.ln_rows, config.embed_dim) + heads + tail
}

/// Segment means over `rows` tokens into `landmarks` rows.
pub fn segment_means_flops(rows: usize, landmarks: usize, dim: usize) -> u64 {
    ((rows + landmarks) * dim) as u64
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlopReport {
    pub total: u64,
    /// Indexed by partition (one entry for the single strategy).
    pub per_device: Vec<u64>,
}

impl FlopReport {
    /// Average work per device, `total / P`.
    pub fn mean_per_device(&self) -> f64 {
        self.total as f64 / self.per_device.len() as f64
    }
}

fn plan_for(strategy: Strategy, config: &TransformerConfig) -> Result<PartitionPlan> {
    match strategy {
        Strategy::Single => make_partition_plan(config.n_tokens, 1),
        _ if config.n_partitions < 2 => Err(Error::Config(format!(
            "{strategy} needs at least 2 partitions, got {}",
            config.n_partitions
        ))),
        _ => make_partition_plan(config.n_tokens, config.n_partitions),
    }
}

/// FLOPs of one forward pass on one device, blocks plus the final norm.
pub fn device_flops(strategy: Strategy, config: &TransformerConfig, p: PartitionId) -> Result<u64> {
    let plan = plan_for(strategy, config)?;
    let n_p = plan.size(p);
    let shape = match strategy {
        Strategy::Single => BlockShape {
            q_rows: n_p,
            kv_rows: n_p,
            ln_rows: n_p,
            weighted: false,
        },
        Strategy::Voltage => BlockShape {
            q_rows: n_p,
            kv_rows: config.n_tokens,
            ln_rows: config.n_tokens,
            weighted: false,
        },
        Strategy::Prism => {
            let n_hat = n_p + (plan.n_partitions() - 1) * config.landmarks;
            BlockShape {
                q_rows: n_p,
                kv_rows: n_hat,
                ln_rows: n_hat,
                weighted: true,
            }
        }
    };
    let blocks = config.n_blocks as u64;
    let mut total = blocks * block_flops(config, shape) + layernorm_flops(n_p, config.embed_dim);
    if strategy == Strategy::Prism {
        total += (blocks - 1) * segment_means_flops(n_p, config.landmarks, config.embed_dim);
    }
    Ok(total)
}

pub fn flops_forward(strategy: Strategy, config: &TransformerConfig) -> Result<FlopReport> {
    let plan = plan_for(strategy, config)?;
    let per_device = plan
        .ids()
        .map(|p| device_flops(strategy, config, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(FlopReport {
        total: per_device.iter().sum(),
        per_device,
    })
}

/// Feature elements device `p` sends after one block.
pub fn comm_elements(
    strategy: Strategy,
    config: &TransformerConfig,
    p: PartitionId,
    mode: ExchangeMode,
) -> Result<u64> {
    let plan = plan_for(strategy, config)?;
    let rows = match strategy {
        Strategy::Single => return Ok(0),
        Strategy::Voltage => plan.size(p),
        Strategy::Prism => config.landmarks,
    };
    let copies = match mode {
        ExchangeMode::Unicast => plan.n_partitions() - 1,
        ExchangeMode::Broadcast => 1,
    };
    Ok((copies * rows * config.embed_dim) as u64)
}

/// Per-device per-layer communicated tokens: the unicast volume averaged
/// over devices, rounded half up to a whole token.
pub fn pdplc_tokens(strategy: Strategy, config: &TransformerConfig) -> Result<u64> {
    let plan = plan_for(strategy, config)?;
    let p = plan.n_partitions();
    let total: usize = match strategy {
        Strategy::Single => 0,
        Strategy::Voltage => (p - 1) * config.n_tokens,
        Strategy::Prism => p * (p - 1) * config.landmarks,
    };
    Ok(((2 * total + p) / (2 * p)) as u64)
}

/// Megatron-style tensor parallelism moves `4(P−1)ND/P` elements per block.
pub fn tensor_parallel_comm_elements(config: &TransformerConfig) -> f64 {
    let p = config.n_partitions as f64;
    4.0 * (p - 1.0) * (config.n_tokens * config.embed_dim) as f64 / p
}

/// Exact ledger a run of `strategy` must produce.
pub fn predicted_ledger<T: Scalar>(
    strategy: Strategy,
    config: &TransformerConfig,
    mode: ExchangeMode,
    bytes_per_scalar: usize,
) -> Result<CommLedger> {
    let mut entries: BTreeMap<LedgerKey, LedgerEntry> = BTreeMap::new();
    if strategy == Strategy::Single {
        return Ok(CommLedger::from_entries(mode, bytes_per_scalar, entries));
    }
    let plan = plan_for(strategy, config)?;
    let (n_parts, dm, l) = (plan.n_partitions(), config.embed_dim, config.landmarks);
    let frame = |elements: usize, aux: usize| LedgerEntry {
        messages: 1,
        elements: elements as u64,
        aux_elements: aux as u64,
        bytes: (elements * bytes_per_scalar) as u64,
        wire_bytes: (HEADER_BYTES + elements * T::BYTES + aux * 8) as u64,
    };
    let mut add = |key: LedgerKey, e: LedgerEntry, times: usize| {
        let slot = entries.entry(key).or_default();
        for _ in 0..times {
            slot.messages += e.messages;
            slot.elements += e.elements;
            slot.aux_elements += e.aux_elements;
            slot.bytes += e.bytes;
            slot.wire_bytes += e.wire_bytes;
        }
    };
    let master = DeviceId::MASTER;
    let kind = match strategy {
        Strategy::Prism => MessageKind::SegmentMeansBlock,
        _ => MessageKind::FullPartitionBlock,
    };
    let copies = match mode {
        ExchangeMode::Unicast => n_parts - 1,
        ExchangeMode::Broadcast => 1,
    };
    for p in plan.ids() {
        let n_p = plan.size(p);
        add((master, 0, MessageKind::Control), frame(0, n_parts + 1), 1);
        add((master, 0, MessageKind::InputPartition), frame(n_p * dm, 0), 1);
        let stacked = match strategy {
            Strategy::Prism => frame((n_parts - 1) * l * dm, (n_parts - 1) * l),
            _ => frame((config.n_tokens - n_p) * dm, 0),
        };
        add((master, 0, kind), stacked, 1);

        let me = DeviceId::worker(p);
        let exchange = match strategy {
            Strategy::Prism => frame(l * dm, l),
            _ => frame(n_p * dm, 0),
        };
        for b in 1..config.n_blocks {
            add((me, b, kind), exchange, copies);
        }
        add(
            (me, config.n_blocks, MessageKind::OutputPartition),
            frame(n_p * dm, 0),
            1,
        );
    }
    Ok(CommLedger::from_entries(mode, bytes_per_scalar, entries))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub strategy: Strategy,
    pub n_partitions: usize,
    /// Present for prism.
    pub landmarks: Option<usize>,
    /// Nominal rate when the landmark count was derived from one.
    pub nominal_cr: Option<f64>,
    pub total_flops: u64,
    pub flops_per_device: f64,
    pub flops_single: u64,
    pub comp_speedup_pct: f64,
    pub pdplc_tokens: u64,
    /// `pdplc_voltage / pdplc_self`; 1 for voltage, absent for single.
    pub cr: Option<f64>,
    pub comm_speedup_pct: Option<f64>,
}

impl CostReport {
    pub fn new(
        strategy: Strategy,
        base: &TransformerConfig,
        n_partitions: usize,
        compression: Option<Compression>,
    ) -> Result<Self> {
        let mut config = base.clone();
        config.n_partitions = if strategy == Strategy::Single {
            1
        } else {
            n_partitions
        };
        let mut nominal_cr = None;
        let landmarks = if strategy == Strategy::Prism {
            let c = compression
                .ok_or_else(|| Error::Config("prism needs a landmark count or compression rate".into()))?;
            if let Compression::Rate(k) = c {
                nominal_cr = Some(k);
            }
            let l = c.landmarks(config.n_tokens, config.n_partitions)?;
            config.landmarks = l;
            Some(l)
        } else {
            config.landmarks = 1;
            None
        };
        config.validate()?;
        let flops = flops_forward(strategy, &config)?;
        let flops_single = flops_forward(Strategy::Single, &config)?.total;
        let flops_per_device = flops.mean_per_device();
        let pdplc = pdplc_tokens(strategy, &config)?;
        let (cr, comm_speedup_pct) = match strategy {
            Strategy::Single => (None, None),
            _ => {
                let baseline = pdplc_tokens(Strategy::Voltage, &config)?;
                let cr = nominal_cr.unwrap_or(baseline as f64 / pdplc as f64);
                (Some(cr), Some((1.0 - 1.0 / cr) * 100.0))
            }
        };
        Ok(Self {
            strategy,
            n_partitions: config.n_partitions,
            landmarks,
            nominal_cr,
            total_flops: flops.total,
            flops_per_device,
            flops_single,
            comp_speedup_pct: (1.0 - flops_per_device / flops_single as f64) * 100.0,
            pdplc_tokens: pdplc,
            cr,
            comm_speedup_pct,
        })
    }
}

/// Modeled end-to-end latency at one bandwidth:
/// `n_blocks × (compute per block + PDPLC transfer + per-message cost)`.
pub fn latency_at(
    strategy: Strategy,
    config: &TransformerConfig,
    net: &NetworkModel,
    device_flops_per_s: f64,
) -> Result<f64> {
    if !(device_flops_per_s > 0.0) {
        return Err(Error::Config("device throughput must be positive".into()));
    }
    net.validate()?;
    let flops = flops_forward(strategy, config)?;
    let blocks = config.n_blocks as f64;
    let compute = flops.mean_per_device() / device_flops_per_s;
    let (bytes, messages) = match strategy {
        Strategy::Single => (0, 0),
        _ => (
            pdplc_tokens(strategy, config)? * (config.embed_dim * net.bytes_per_scalar) as u64,
            (config.n_partitions - 1) as u64,
        ),
    };
    Ok(compute + blocks * net.transfer_time(bytes, messages))
}

/// `(bandwidth_bps, latency_s)` for every bandwidth in `bandwidths_bps`.
pub fn latency_curve(
    strategy: Strategy,
    config: &TransformerConfig,
    net: &NetworkModel,
    device_flops_per_s: f64,
    bandwidths_bps: &[f64],
) -> Result<Vec<(f64, f64)>> {
    bandwidths_bps
        .iter()
        .map(|&bw| {
            let net = net.with_bandwidth(bw);
            latency_at(strategy, config, &net, device_flops_per_s).map(|t| (bw, t))
        })
        .collect()
}

/// `count` bandwidths spaced geometrically from `lo` to `hi` inclusive.
pub fn log_sweep(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..count)
            .map(|i| lo * (hi / lo).powf(i as f64 / (count - 1) as f64))
            .collect(),
    }
}
