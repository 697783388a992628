use std::collections::BTreeMap;

use crate::scalar::Scalar;

use super::message::{DeviceId, Message, MessageKind};
use super::ExchangeMode;

/// Totals for one `(device, block, kind)` cell.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LedgerEntry {
    pub messages: u64,
    /// Feature-matrix elements sent.
    pub elements: u64,
    /// Side-channel integers sent (segment counts, plan boundaries).
    pub aux_elements: u64,
    /// `elements × bytes_per_scalar`.
    pub bytes: u64,
    /// Encoded frame sizes, header included.
    pub wire_bytes: u64,
}

impl LedgerEntry {
    fn absorb(&mut self, other: &LedgerEntry) {
        self.messages += other.messages;
        self.elements += other.elements;
        self.aux_elements += other.aux_elements;
        self.bytes += other.bytes;
        self.wire_bytes += other.wire_bytes;
    }
}

pub type LedgerKey = (DeviceId, usize, MessageKind);

/// Append-only record of every message sent, keyed by sender, block and
/// kind. A broadcast is one transmission and is recorded once.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommLedger {
    pub mode: ExchangeMode,
    pub bytes_per_scalar: usize,
    entries: BTreeMap<LedgerKey, LedgerEntry>,
}

impl CommLedger {
    pub fn new(mode: ExchangeMode, bytes_per_scalar: usize) -> Self {
        Self {
            mode,
            bytes_per_scalar,
            entries: BTreeMap::new(),
        }
    }

    pub fn from_entries(
        mode: ExchangeMode,
        bytes_per_scalar: usize,
        entries: BTreeMap<LedgerKey, LedgerEntry>,
    ) -> Self {
        Self {
            mode,
            bytes_per_scalar,
            entries,
        }
    }

    pub fn record<T: Scalar>(&mut self, msg: &Message<T>) {
        let elements = msg.matrix.len() as u64;
        let e = LedgerEntry {
            messages: 1,
            elements,
            aux_elements: msg.counts.len() as u64,
            bytes: elements * self.bytes_per_scalar as u64,
            wire_bytes: msg.wire_len() as u64,
        };
        self.entries
            .entry((msg.from, msg.block, msg.kind))
            .or_default()
            .absorb(&e);
    }

    pub fn merge(&mut self, other: &CommLedger) {
        for (k, v) in &other.entries {
            self.entries.entry(*k).or_default().absorb(v);
        }
    }

    pub fn entry(&self, device: DeviceId, block: usize, kind: MessageKind) -> LedgerEntry {
        self.entries
            .get(&(device, block, kind))
            .copied()
            .unwrap_or_default()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&LedgerKey, &LedgerEntry)> {
        self.entries.iter()
    }

    pub fn total(&self, kind: MessageKind) -> LedgerEntry {
        let mut t = LedgerEntry::default();
        for ((_, _, k), v) in &self.entries {
            if *k == kind {
                t.absorb(v);
            }
        }
        t
    }

    /// Sum over every kind for one device and block.
    pub fn device_block(&self, device: DeviceId, block: usize) -> LedgerEntry {
        let mut t = LedgerEntry::default();
        for kind in MessageKind::ALL {
            t.absorb(&self.entry(device, block, kind));
        }
        t
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
