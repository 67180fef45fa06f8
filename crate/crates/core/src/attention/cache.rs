use std::cell::Cell;

/// Per-layer latent cache: the joint key/value latent `c_kv` (width `d_c`)
/// and the shared rotary key `k_r` (width `d_h_r`) of every decoded token.
#[derive(Clone, Debug)]
pub struct LatentLayerCache {
    d_c: usize,
    d_h_r: usize,
    c_kv: Vec<f64>,
    k_r: Vec<f64>,
    reads: Cell<u64>,
}

impl LatentLayerCache {
    pub fn new(d_c: usize, d_h_r: usize) -> Self {
        Self {
            d_c,
            d_h_r,
            c_kv: Vec::new(),
            k_r: Vec::new(),
            reads: Cell::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.c_kv.len() / self.d_c.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn push(&mut self, c_kv: &[f64], k_r: &[f64]) {
        assert_eq!(c_kv.len(), self.d_c);
        assert_eq!(k_r.len(), self.d_h_r);
        self.c_kv.extend_from_slice(c_kv);
        self.k_r.extend_from_slice(k_r);
    }

    pub fn c_kv(&self, t: usize) -> &[f64] {
        self.reads.set(self.reads.get() + self.d_c as u64);
        &self.c_kv[t * self.d_c..(t + 1) * self.d_c]
    }

    pub fn k_r(&self, t: usize) -> &[f64] {
        self.reads.set(self.reads.get() + self.d_h_r as u64);
        &self.k_r[t * self.d_h_r..(t + 1) * self.d_h_r]
    }

    /// Scalars held per token: `d_c + d_h_r`.
    pub fn scalars_per_token(&self) -> usize {
        self.d_c + self.d_h_r
    }

    pub fn stored_scalars(&self) -> usize {
        self.c_kv.len() + self.k_r.len()
    }

    /// Cached scalars read by the inference path so far.
    pub fn reads(&self) -> u64 {
        self.reads.get()
    }

    pub fn reset_reads(&self) {
        self.reads.set(0);
    }
}

/// Full key/value cache of the MHA baseline: `2·n_h·d_h` scalars per token.
#[derive(Clone, Debug)]
pub struct KvLayerCache {
    width: usize,
    k: Vec<f64>,
    v: Vec<f64>,
}

impl KvLayerCache {
    pub fn new(width: usize) -> Self {
        Self {
            width,
            k: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.k.len() / self.width.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn push(&mut self, k: &[f64], v: &[f64]) {
        assert_eq!(k.len(), self.width);
        assert_eq!(v.len(), self.width);
        self.k.extend_from_slice(k);
        self.v.extend_from_slice(v);
    }

    pub fn k(&self, t: usize) -> &[f64] {
        &self.k[t * self.width..(t + 1) * self.width]
    }

    pub fn v(&self, t: usize) -> &[f64] {
        &self.v[t * self.width..(t + 1) * self.width]
    }

    pub fn stored_scalars(&self) -> usize {
        self.k.len() + self.v.len()
    }
}

/// One cache per layer of a stack.
#[derive(Clone, Debug)]
pub enum LayerCache {
    Latent(LatentLayerCache),
    Kv(KvLayerCache),
}

impl LayerCache {
    pub fn stored_scalars(&self) -> usize {
        match self {
            LayerCache::Latent(c) => c.stored_scalars(),
            LayerCache::Kv(c) => c.stored_scalars(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            LayerCache::Latent(c) => c.len(),
            LayerCache::Kv(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Decoding cache of a whole layer stack.
#[derive(Clone, Debug, Default)]
pub struct LatentKVCache {
    pub layers: Vec<LayerCache>,
}

impl LatentKVCache {
    /// Tokens decoded so far.
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, LayerCache::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stored_scalars(&self) -> usize {
        self.layers.iter().map(LayerCache::stored_scalars).sum()
    }
}
