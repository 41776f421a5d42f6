use super::{KVCacheLayout, KvError};

/// Fixed-size K/V storage for the source layers of a GQA+CLA stack.
///
/// Each source layer owns a K and a V buffer laid out position-major as
/// `(max_seq, n_g, d_h)`. Non-source layers own nothing; lookups for them
/// resolve to their share group's source layer.
#[derive(Debug, Clone)]
pub struct KVCache {
    layout: KVCacheLayout,
    max_seq: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    lens: Vec<usize>,
}

impl KVCache {
    pub fn new(layout: KVCacheLayout, max_seq: usize) -> Result<Self, KvError> {
        layout.validate()?;
        let sources = layout.num_source_layers();
        let size = max_seq * layout.n_g * layout.d_h;
        Ok(Self {
            layout,
            max_seq,
            keys: vec![vec![0.0; size]; sources],
            values: vec![vec![0.0; size]; sources],
            lens: vec![0; sources],
        })
    }

    pub fn layout(&self) -> &KVCacheLayout {
        &self.layout
    }

    pub fn max_seq(&self) -> usize {
        self.max_seq
    }

    fn slot(&self, layer: usize) -> Result<usize, KvError> {
        if layer >= self.layout.layers {
            return Err(KvError::LayerOutOfRange { layer, layers: self.layout.layers });
        }
        Ok(self.layout.source_layer(layer) / self.layout.share_period)
    }

    /// Cached positions visible to `layer`.
    pub fn len(&self, layer: usize) -> Result<usize, KvError> {
        Ok(self.lens[self.slot(layer)?])
    }

    pub fn is_empty(&self) -> bool {
        self.lens.iter().all(|&l| l == 0)
    }

    /// Appends one position of K and V (`n_g * d_h` each) to a source layer.
    pub fn append_kv(&mut self, layer: usize, k: &[f64], v: &[f64]) -> Result<(), KvError> {
        let slot = self.slot(layer)?;
        if !self.layout.is_source_layer(layer) {
            return Err(KvError::NotSourceLayer { layer, share_period: self.layout.share_period });
        }
        let width = self.layout.n_g * self.layout.d_h;
        if k.len() != width || v.len() != width {
            return Err(KvError::ShapeMismatch(format!(
                "k/v of length {}/{} for n_g * d_h = {width}",
                k.len(),
                v.len()
            )));
        }
        let pos = self.lens[slot];
        if pos >= self.max_seq {
            return Err(KvError::CapacityExceeded { max_seq: self.max_seq });
        }
        self.keys[slot][pos * width..(pos + 1) * width].copy_from_slice(k);
        self.values[slot][pos * width..(pos + 1) * width].copy_from_slice(v);
        self.lens[slot] = pos + 1;
        Ok(())
    }

    /// The full K buffer read by `layer` (shared across its share group).
    pub fn keys(&self, layer: usize) -> Result<&[f64], KvError> {
        Ok(&self.keys[self.slot(layer)?])
    }

    pub fn values(&self, layer: usize) -> Result<&[f64], KvError> {
        Ok(&self.values[self.slot(layer)?])
    }

    /// Populated prefix of the K buffer, `len * n_g * d_h` values.
    pub fn cached_keys(&self, layer: usize) -> Result<&[f64], KvError> {
        let width = self.layout.n_g * self.layout.d_h;
        Ok(&self.keys(layer)?[..self.len(layer)? * width])
    }

    pub fn cached_values(&self, layer: usize) -> Result<&[f64], KvError> {
        let width = self.layout.n_g * self.layout.d_h;
        Ok(&self.values(layer)?[..self.len(layer)? * width])
    }

    /// Bytes held by populated positions under the layout's element size.
    pub fn stored_bytes(&self) -> u64 {
        let per_position = 2 * self.layout.n_g * self.layout.d_h * self.layout.bytes_per_element;
        self.lens.iter().map(|&l| (l * per_position) as u64).sum()
    }
}
