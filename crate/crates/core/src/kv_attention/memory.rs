use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::KvError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KVCacheLayout {
    pub n_h: usize,
    pub n_g: usize,
    pub d_h: usize,
    pub layers: usize,
    pub share_period: usize,
    pub bytes_per_element: usize,
}

impl KVCacheLayout {
    /// The reference 64-layer geometry: 80 heads of width 80, 8 KV groups,
    /// KV shared every 2 layers, bf16 storage.
    pub const REFERENCE: KVCacheLayout =
        KVCacheLayout { n_h: 80, n_g: 8, d_h: 80, layers: 64, share_period: 2, bytes_per_element: 2 };

    pub fn validate(&self) -> Result<(), KvError> {
        if self.n_h == 0 || self.n_g == 0 || self.d_h == 0 || self.layers == 0 {
            return Err(KvError::InvalidLayout("n_h, n_g, d_h and layers must be positive".into()));
        }
        if self.n_g > self.n_h || !self.n_h.is_multiple_of(self.n_g) {
            return Err(KvError::InvalidLayout(format!("n_g ({}) must divide n_h ({})", self.n_g, self.n_h)));
        }
        if self.share_period == 0 {
            return Err(KvError::InvalidLayout("share_period must be at least 1".into()));
        }
        if self.bytes_per_element == 0 {
            return Err(KvError::InvalidLayout("bytes_per_element must be positive".into()));
        }
        Ok(())
    }

    pub fn heads_per_group(&self) -> usize {
        self.n_h / self.n_g
    }

    pub fn is_source_layer(&self, layer: usize) -> bool {
        layer.is_multiple_of(self.share_period)
    }

    pub fn source_layer(&self, layer: usize) -> usize {
        layer - layer % self.share_period
    }

    /// Layers that own a KV buffer; the final share group may be partial.
    pub fn num_source_layers(&self) -> usize {
        self.layers.div_ceil(self.share_period)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    Mha,
    Gqa,
    Mqa,
    Cla,
    GqaCla,
}

impl Mechanism {
    pub const ALL: [Mechanism; 5] = [Mechanism::Mha, Mechanism::Gqa, Mechanism::Mqa, Mechanism::Cla, Mechanism::GqaCla];

    pub fn name(&self) -> &'static str {
        match self {
            Mechanism::Mha => "MHA",
            Mechanism::Gqa => "GQA",
            Mechanism::Mqa => "MQA",
            Mechanism::Cla => "CLA",
            Mechanism::GqaCla => "GQA+CLA",
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mechanism {
    type Err = KvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['+', '-'], "_").as_str() {
            "mha" => Ok(Mechanism::Mha),
            "gqa" => Ok(Mechanism::Gqa),
            "mqa" => Ok(Mechanism::Mqa),
            "cla" => Ok(Mechanism::Cla),
            "gqa_cla" => Ok(Mechanism::GqaCla),
            _ => Err(KvError::UnknownMechanism(s.to_string())),
        }
    }
}

/// Bytes of KV cache stored per token across all layers.
///
/// Counts one K and one V vector per (stored KV head, cached layer). With
/// `bytes_per_element = 2` and `share_period = 2` over an even layer count this
/// is exactly `4 n_h d_h l`, `4 n_g d_h l`, `4 d_h l`, `2 n_h d_h l` and
/// `2 n_g d_h l` for the five mechanisms.
pub fn kv_bytes_per_token(layout: &KVCacheLayout, mechanism: Mechanism) -> Result<u64, KvError> {
    layout.validate()?;
    let (heads, cached_layers) = match mechanism {
        Mechanism::Mha => (layout.n_h, layout.layers),
        Mechanism::Gqa => (layout.n_g, layout.layers),
        Mechanism::Mqa => (1, layout.layers),
        Mechanism::Cla => (layout.n_h, layout.num_source_layers()),
        Mechanism::GqaCla => (layout.n_g, layout.num_source_layers()),
    };
    Ok(2 * (heads * layout.d_h * cached_layers * layout.bytes_per_element) as u64)
}
