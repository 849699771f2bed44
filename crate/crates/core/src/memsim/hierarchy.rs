use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// DMA channel arrangement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Duplex {
    /// Independent read and write channels.
    Full,
    /// One channel shared by reads and writes.
    Half,
}

/// Two-level memory hierarchy: an L1 scratchpad fed from L2 by DMA. Fields
/// left out of a config take their [`Default`] values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HierarchyConfig {
    pub l1_bytes: usize,
    pub l2_bytes: usize,
    /// Bits per cycle, L2 → L1.
    pub dma_read_bw: u32,
    /// Bits per cycle, L1 → L2.
    pub dma_write_bw: u32,
    pub cores: u32,
    pub freq_hz: f64,
    pub avg_power_w: f64,
    /// Strided 2D transfers on the L2 side; lets the DMA build depthwise
    /// im2col columns while moving data.
    pub dma_2d_strided: bool,
    pub duplex: Duplex,
}

impl Default for HierarchyConfig {
    /// Cluster-class target: 128 kB L1, 64 bit/cyc full-duplex DMA, 8 cores.
    /// Power is the per-event energy/latency ratio of the published
    /// adaptive-stage numbers (54.3 J over 877 s).
    fn default() -> Self {
        Self {
            l1_bytes: 128 * 1024,
            l2_bytes: 1536 * 1024,
            dma_read_bw: 64,
            dma_write_bw: 64,
            cores: 8,
            freq_hz: 375e6,
            avg_power_w: 54.3 / 877.0,
            dma_2d_strided: true,
            duplex: Duplex::Full,
        }
    }
}

impl HierarchyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l1_bytes == 0 || self.dma_read_bw == 0 || self.dma_write_bw == 0 || self.cores == 0
        {
            return Err(Error::Config(format!("degenerate hierarchy {self:?}")));
        }
        if !(self.freq_hz > 0.0 && self.avg_power_w >= 0.0) {
            return Err(Error::Config(
                "frequency must be positive, power non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Largest working set a single tile may use under double buffering.
    pub fn tile_limit(&self) -> usize {
        self.l1_bytes / 2
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plain struct serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let c = HierarchyConfig::default();
        assert_eq!(HierarchyConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(c.tile_limit(), 65536);
    }

    #[test]
    fn rejects_zero_bandwidth() {
        let c = HierarchyConfig {
            dma_read_bw: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
