use crate::error::{Error, Result};

/// Point-to-point link model: every transfer gets the full bandwidth, plus
/// a fixed cost per message.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NetworkModel {
    pub bandwidth_bps: f64,
    pub per_message_latency_s: f64,
    pub bytes_per_scalar: usize,
}

impl Default for NetworkModel {
    fn default() -> Self {
        Self {
            bandwidth_bps: 200e6,
            per_message_latency_s: 1e-3,
            bytes_per_scalar: 4,
        }
    }
}

impl NetworkModel {
    pub fn with_bandwidth(mut self, bandwidth_bps: f64) -> Self {
        self.bandwidth_bps = bandwidth_bps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth_bps > 0.0) || !(self.per_message_latency_s > 0.0) || self.bytes_per_scalar == 0 {
            return Err(Error::Config(format!(
                "network parameters must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// Seconds to push `bytes` over the link in `messages` messages.
    pub fn transfer_time(&self, bytes: u64, messages: u64) -> f64 {
        bytes as f64 * 8.0 / self.bandwidth_bps + messages as f64 * self.per_message_latency_s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transfer_time_terms() {
        let n = NetworkModel {
            bandwidth_bps: 1e6,
            per_message_latency_s: 0.01,
            bytes_per_scalar: 4,
        };
        assert!((n.transfer_time(125_000, 2) - 1.02).abs() < 1e-12);
        assert!(n.validate().is_ok());
        assert!(NetworkModel {
            bandwidth_bps: 0.0,
            ..n
        }
        .validate()
        .is_err());
    }
}
