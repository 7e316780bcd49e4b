//! The per-layer compression design space: keep ratios, bit-widths, and the
//! `(keep, k_bits, v_bits)` tuple routed to each layer.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fraction of cached tokens a layer retains after eviction.
///
/// Stored as an integer percentage so memory accounting stays exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct KeepRatio(u8);

impl KeepRatio {
    pub const ALL: [KeepRatio; 6] = [
        KeepRatio(10),
        KeepRatio(25),
        KeepRatio(50),
        KeepRatio(75),
        KeepRatio(90),
        KeepRatio(100),
    ];
    pub const FULL: KeepRatio = KeepRatio(100);

    pub fn from_percent(pct: u8) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.0 == pct)
            .ok_or_else(|| Error::Config(format!("keep ratio {pct}% is not one of 10/25/50/75/90/100")))
    }

    pub fn percent(self) -> u8 {
        self.0
    }

    pub fn value(self) -> f64 {
        self.0 as f64 / 100.0
    }

    /// Number of tokens kept out of `cache_len`: round-half-up of `keep * cache_len`,
    /// never below one for a nonempty cache.
    pub fn retention_count(self, cache_len: usize) -> usize {
        if cache_len == 0 {
            return 0;
        }
        let scaled = self.0 as usize * cache_len;
        ((scaled + 50) / 100).max(1)
    }
}

impl TryFrom<f64> for KeepRatio {
    type Error = Error;

    fn try_from(v: f64) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| (k.value() - v).abs() < 1e-9)
            .ok_or_else(|| Error::Config(format!("keep ratio {v} is not in {{0.1, 0.25, 0.5, 0.75, 0.9, 1.0}}")))
    }
}

impl From<KeepRatio> for f64 {
    fn from(k: KeepRatio) -> f64 {
        k.value()
    }
}

impl fmt::Display for KeepRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.value())
    }
}

/// Per-element storage precision of cached keys or values. 16 means unquantized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum BitWidth {
    B4,
    B8,
    B16,
}

impl BitWidth {
    pub const ALL: [BitWidth; 3] = [BitWidth::B4, BitWidth::B8, BitWidth::B16];

    pub fn bits(self) -> u32 {
        match self {
            BitWidth::B4 => 4,
            BitWidth::B8 => 8,
            BitWidth::B16 => 16,
        }
    }

    /// Highest integer code, `2^bits - 1`. Not meaningful for the pass-through width.
    pub fn max_code(self) -> u32 {
        (1u32 << self.bits()) - 1
    }

    pub fn is_passthrough(self) -> bool {
        self == BitWidth::B16
    }
}

impl TryFrom<u32> for BitWidth {
    type Error = Error;

    fn try_from(v: u32) -> Result<Self> {
        match v {
            4 => Ok(BitWidth::B4),
            8 => Ok(BitWidth::B8),
            16 => Ok(BitWidth::B16),
            _ => Err(Error::Config(format!("bit-width {v} is not one of 4/8/16"))),
        }
    }
}

impl From<BitWidth> for u32 {
    fn from(b: BitWidth) -> u32 {
        b.bits()
    }
}

impl fmt::Display for BitWidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.bits())
    }
}

/// One layer's compression setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerCompressionConfig {
    pub keep: KeepRatio,
    pub k_bits: BitWidth,
    pub v_bits: BitWidth,
}

impl LayerCompressionConfig {
    pub const IDENTITY: LayerCompressionConfig = LayerCompressionConfig {
        keep: KeepRatio::FULL,
        k_bits: BitWidth::B16,
        v_bits: BitWidth::B16,
    };

    pub fn new(keep: KeepRatio, k_bits: BitWidth, v_bits: BitWidth) -> Self {
        Self { keep, k_bits, v_bits }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    /// Stable identifier in the full 54-config space: keep-major, then K bits,
    /// then V bits, each in ascending order. `0` is `(0.1, 4, 4)`, `53` is identity.
    pub fn id(&self) -> usize {
        let ki = KeepRatio::ALL.iter().position(|k| *k == self.keep).unwrap();
        let kb = BitWidth::ALL.iter().position(|b| *b == self.k_bits).unwrap();
        let vb = BitWidth::ALL.iter().position(|b| *b == self.v_bits).unwrap();
        ki * 9 + kb * 3 + vb
    }

    pub fn from_id(id: usize) -> Result<Self> {
        if id >= 54 {
            return Err(Error::Config(format!("config id {id} out of range 0..54")));
        }
        Ok(Self {
            keep: KeepRatio::ALL[id / 9],
            k_bits: BitWidth::ALL[(id / 3) % 3],
            v_bits: BitWidth::ALL[id % 3],
        })
    }

    /// Memory weight `keep_percent * (k_bits + v_bits)`; bytes are this times
    /// `T_cache * H_kv * d_head / 800`.
    pub fn cost_units(&self) -> u64 {
        self.keep.percent() as u64 * (self.k_bits.bits() + self.v_bits.bits()) as u64
    }

    /// Short human-readable name. Single-axis operations get their operation name.
    pub fn label(&self) -> String {
        let full_bits = self.k_bits.is_passthrough() && self.v_bits.is_passthrough();
        if self.is_identity() {
            "identity".to_string()
        } else if full_bits {
            format!("evict_{}%", 100 - self.keep.percent())
        } else if self.keep == KeepRatio::FULL && self.v_bits.is_passthrough() {
            format!("k_quant_{}", self.k_bits)
        } else if self.keep == KeepRatio::FULL && self.k_bits.is_passthrough() {
            format!("v_quant_{}", self.v_bits)
        } else {
            format!("keep{}_k{}_v{}", self.keep.percent(), self.k_bits, self.v_bits)
        }
    }
}

impl fmt::Display for LayerCompressionConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, k{}, v{})", self.keep, self.k_bits, self.v_bits)
    }
}

/// Named subsets of the design space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpaceKind {
    /// All 6 x 3 x 3 = 54 tuples.
    Full,
    /// Identity plus the nine single-axis operations (five eviction levels, K and V at 8/4 bits).
    Table2,
    /// `Table2` plus the combined K8/V4 quantization config.
    Calib11,
}

impl FromStr for SpaceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(SpaceKind::Full),
            "table2" => Ok(SpaceKind::Table2),
            "calib11" => Ok(SpaceKind::Calib11),
            _ => Err(Error::Config(format!(
                "unknown config space '{s}' (full|table2|calib11)"
            ))),
        }
    }
}

impl fmt::Display for SpaceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpaceKind::Full => "full",
            SpaceKind::Table2 => "table2",
            SpaceKind::Calib11 => "calib11",
        })
    }
}

/// Ordered list of candidate configs, always sorted by [`LayerCompressionConfig::id`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigSpace {
    configs: Vec<LayerCompressionConfig>,
}

impl ConfigSpace {
    pub fn full() -> Self {
        Self {
            configs: (0..54).map(|id| LayerCompressionConfig::from_id(id).unwrap()).collect(),
        }
    }

    pub fn named(kind: SpaceKind) -> Self {
        match kind {
            SpaceKind::Full => Self::full(),
            SpaceKind::Table2 => Self::full().filter(is_single_axis),
            SpaceKind::Calib11 => Self::full().filter(|c| {
                is_single_axis(c) || (c.keep == KeepRatio::FULL && c.k_bits == BitWidth::B8 && c.v_bits == BitWidth::B4)
            }),
        }
    }

    /// Arbitrary set of configs; must contain identity and no duplicates.
    pub fn from_configs(mut configs: Vec<LayerCompressionConfig>) -> Result<Self> {
        configs.sort_by_key(|c| c.id());
        if configs.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("duplicate config in space".into()));
        }
        if !configs.iter().any(|c| c.is_identity()) {
            return Err(Error::Config("config space must contain the identity config".into()));
        }
        Ok(Self { configs })
    }

    fn filter(self, pred: impl Fn(&LayerCompressionConfig) -> bool) -> Self {
        Self {
            configs: self.configs.into_iter().filter(|c| pred(c)).collect(),
        }
    }

    pub fn configs(&self) -> &[LayerCompressionConfig] {
        &self.configs
    }

    pub fn len(&self) -> usize {
        self.configs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.configs.is_empty()
    }

    pub fn index_of(&self, config: &LayerCompressionConfig) -> Option<usize> {
        self.configs.iter().position(|c| c == config)
    }

    pub fn identity_index(&self) -> usize {
        self.index_of(&LayerCompressionConfig::IDENTITY)
            .expect("config space always holds identity")
    }
}

fn is_single_axis(c: &LayerCompressionConfig) -> bool {
    let axes = [
        c.keep != KeepRatio::FULL,
        !c.k_bits.is_passthrough(),
        !c.v_bits.is_passthrough(),
    ];
    axes.iter().filter(|&&a| a).count() <= 1
}
