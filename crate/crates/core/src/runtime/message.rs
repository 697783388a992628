//! Messages exchanged between the master and workers, and their wire
//! format.
//!
//! Layout: eight little-endian `u64` header fields
//! `(from, to, block, kind, rows, cols, L, seq)`, then `rows·cols` scalars
//! in row-major order, then `L` little-endian `u64` counts.

use std::fmt;

use crate::error::{Error, Result};
use crate::partition::PartitionId;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const HEADER_FIELDS: usize = 8;
pub const HEADER_BYTES: usize = HEADER_FIELDS * 8;
const BROADCAST_WIRE: u64 = u64::MAX;

/// Device 0 is the master; device `p` runs partition `p`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DeviceId(pub u32);

impl DeviceId {
    pub const MASTER: DeviceId = DeviceId(0);

    pub fn worker(p: PartitionId) -> Self {
        DeviceId(p.get() as u32)
    }

    pub fn partition(self) -> Option<PartitionId> {
        PartitionId::new(self.0 as usize).ok()
    }

    pub fn is_master(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_master() {
            write!(f, "master")
        } else {
            write!(f, "w{}", self.0)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Destination {
    Device(DeviceId),
    /// Every worker except the sender.
    Broadcast,
}

impl fmt::Display for Destination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Destination::Device(d) => d.fmt(f),
            Destination::Broadcast => write!(f, "*"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MessageKind {
    /// Master → worker: the worker's slice of the embedded input.
    InputPartition,
    /// Landmark blocks with their segment counts.
    SegmentMeansBlock,
    /// Uncompressed partition rows (the all-gather baseline).
    FullPartitionBlock,
    /// Worker → master: final rows of the partition.
    OutputPartition,
    /// Master → worker: partition boundaries.
    Control,
}

impl MessageKind {
    pub const ALL: [MessageKind; 5] = [
        MessageKind::InputPartition,
        MessageKind::SegmentMeansBlock,
        MessageKind::FullPartitionBlock,
        MessageKind::OutputPartition,
        MessageKind::Control,
    ];

    fn code(self) -> u64 {
        match self {
            MessageKind::InputPartition => 0,
            MessageKind::SegmentMeansBlock => 1,
            MessageKind::FullPartitionBlock => 2,
            MessageKind::OutputPartition => 3,
            MessageKind::Control => 4,
        }
    }

    fn from_code(code: u64) -> Result<Self> {
        MessageKind::ALL
            .into_iter()
            .find(|k| k.code() == code)
            .ok_or_else(|| Error::Decode(format!("unknown message kind {code}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            MessageKind::InputPartition => "input",
            MessageKind::SegmentMeansBlock => "segment-means",
            MessageKind::FullPartitionBlock => "full-partition",
            MessageKind::OutputPartition => "output",
            MessageKind::Control => "control",
        }
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Message<T> {
    pub from: DeviceId,
    pub to: Destination,
    /// Index of the Transformer block that consumes the payload.
    pub block: usize,
    pub kind: MessageKind,
    pub seq: u64,
    pub matrix: Matrix<T>,
    /// Segment counts for landmark payloads, boundaries for control.
    pub counts: Vec<u64>,
}

impl<T: Scalar> Message<T> {
    /// Feature elements plus, for landmark payloads, the count vector.
    pub fn payload_elements(&self) -> usize {
        let extra = if self.kind == MessageKind::SegmentMeansBlock {
            self.counts.len()
        } else {
            0
        };
        self.matrix.len() + extra
    }

    pub fn wire_len(&self) -> usize {
        HEADER_BYTES + self.matrix.len() * T::BYTES + self.counts.len() * 8
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        let to = match self.to {
            Destination::Device(d) => d.0 as u64,
            Destination::Broadcast => BROADCAST_WIRE,
        };
        let header = [
            self.from.0 as u64,
            to,
            self.block as u64,
            self.kind.code(),
            self.matrix.rows() as u64,
            self.matrix.cols() as u64,
            self.counts.len() as u64,
            self.seq,
        ];
        for h in header {
            out.extend_from_slice(&h.to_le_bytes());
        }
        for &v in self.matrix.as_slice() {
            v.write_le(&mut out);
        }
        for &c in &self.counts {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_BYTES {
            return Err(Error::Decode(format!(
                "{} bytes is shorter than the header",
                bytes.len()
            )));
        }
        let field = |i: usize| {
            let mut b = [0u8; 8];
            b.copy_from_slice(&bytes[i * 8..i * 8 + 8]);
            u64::from_le_bytes(b)
        };
        let to_u32 =
            |v: u64| u32::try_from(v).map_err(|_| Error::Decode(format!("device id {v} out of range")));
        let from = DeviceId(to_u32(field(0))?);
        let to = match field(1) {
            BROADCAST_WIRE => Destination::Broadcast,
            v => Destination::Device(DeviceId(to_u32(v)?)),
        };
        let block = field(2) as usize;
        let kind = MessageKind::from_code(field(3))?;
        let (rows, cols, n_counts, seq) = (field(4) as usize, field(5) as usize, field(6) as usize, field(7));
        let expect = rows
            .checked_mul(cols)
            .and_then(|e| e.checked_mul(T::BYTES))
            .and_then(|b| b.checked_add(HEADER_BYTES + n_counts * 8))
            .ok_or_else(|| Error::Decode("payload size overflows".into()))?;
        if bytes.len() != expect {
            return Err(Error::Decode(format!(
                "expected {expect} bytes for {rows}x{cols} + {n_counts} counts, got {}",
                bytes.len()
            )));
        }
        let body = &bytes[HEADER_BYTES..];
        let data = body[..rows * cols * T::BYTES]
            .chunks_exact(T::BYTES)
            .map(T::read_le)
            .collect();
        let counts = body[rows * cols * T::BYTES..]
            .chunks_exact(8)
            .map(|c| {
                let mut b = [0u8; 8];
                b.copy_from_slice(c);
                u64::from_le_bytes(b)
            })
            .collect();
        Ok(Self {
            from,
            to,
            block,
            kind,
            seq,
            matrix: Matrix::new(rows, cols, data)?,
            counts,
        })
    }

    /// One line of the debug trace: header fields as text, payload elided.
    pub fn trace_line(&self) -> String {
        format!(
            "from={} to={} block={} kind={} rows={} cols={} L={} seq={}",
            self.from,
            self.to,
            self.block,
            self.kind,
            self.matrix.rows(),
            self.matrix.cols(),
            self.counts.len(),
            self.seq
        )
    }
}
