use super::ModelConfig;

/// Keys and values for every processed position. Each layer stores K and V
/// as `[len × d_model]` row-major; head `h` owns columns `h·head_dim..(h+1)·head_dim`.
#[derive(Debug, Clone)]
pub struct KvCache {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
    d_model: usize,
    max_positions: usize,
}

impl KvCache {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            keys: vec![Vec::new(); config.n_layers],
            values: vec![Vec::new(); config.n_layers],
            len: 0,
            d_model: config.d_model,
            max_positions: config.max_positions,
        }
    }

    /// Number of positions already processed; identical for every layer.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.max_positions
    }

    pub fn clear(&mut self) {
        self.keys.iter_mut().for_each(Vec::clear);
        self.values.iter_mut().for_each(Vec::clear);
        self.len = 0;
    }

    pub(crate) fn push(&mut self, layer: usize, k: &[f32], v: &[f32]) {
        debug_assert_eq!(k.len(), self.d_model);
        self.keys[layer].extend_from_slice(k);
        self.values[layer].extend_from_slice(v);
    }

    pub(crate) fn layer(&self, layer: usize) -> (&[f32], &[f32]) {
        (&self.keys[layer], &self.values[layer])
    }

    pub(crate) fn commit(&mut self, added: usize) {
        self.len += added;
        debug_assert!(self.keys.iter().all(|k| k.len() == self.len * self.d_model));
    }
}
