use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use crate::error::{OrthrusError, Result};
use crate::tensor::Tensor;

/// Index of a named tensor inside [`Parameters`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Which path a layer's projections belong to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    Ar,
    Diffusion,
}

#[derive(Debug, Clone)]
pub struct LayerIds {
    pub attn_norm: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub mlp_norm: ParamId,
    pub w_up: ParamId,
    pub w_down: ParamId,
    pub diff_wq: ParamId,
    pub diff_wk: ParamId,
    pub diff_wv: ParamId,
}

impl LayerIds {
    pub fn qkv(&self, view: View) -> (ParamId, ParamId, ParamId) {
        match view {
            View::Ar => (self.wq, self.wk, self.wv),
            View::Diffusion => (self.diff_wq, self.diff_wk, self.diff_wv),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub tok_emb: ParamId,
    pub layers: Vec<LayerIds>,
    pub final_norm: ParamId,
    pub lm_head: ParamId,
    pub lm_bias: ParamId,
    pub mask_emb: ParamId,
}

/// Full weight set. Names prefixed `ar.` form the frozen backbone; names
/// prefixed `diff.` are the trainable diffusion subset.
#[derive(Debug, Clone)]
pub struct Parameters {
    pub config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    layout: Layout,
    sealed: bool,
}

struct Builder {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Builder {
    fn add(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        self.names.push(name);
        self.tensors.push(Tensor::zeros(rows, cols));
        ParamId(self.tensors.len() - 1)
    }
}

impl Parameters {
    /// All-zero weights (norm gains included).
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let h = config.mlp_hidden;
        let v = config.vocab_size;
        let mut b = Builder {
            names: Vec::new(),
            tensors: Vec::new(),
        };
        let tok_emb = b.add("ar.tok_emb".into(), v, d);
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = format!("ar.layers.{l}");
            let attn_norm = b.add(format!("{p}.attn_norm"), 1, d);
            let wq = b.add(format!("{p}.wq"), d, d);
            let wk = b.add(format!("{p}.wk"), d, d);
            let wv = b.add(format!("{p}.wv"), d, d);
            let wo = b.add(format!("{p}.wo"), d, d);
            let mlp_norm = b.add(format!("{p}.mlp_norm"), 1, d);
            let w_up = b.add(format!("{p}.w_up"), d, h);
            let w_down = b.add(format!("{p}.w_down"), h, d);
            layers.push(LayerIds {
                attn_norm,
                wq,
                wk,
                wv,
                wo,
                mlp_norm,
                w_up,
                w_down,
                diff_wq: ParamId(usize::MAX),
                diff_wk: ParamId(usize::MAX),
                diff_wv: ParamId(usize::MAX),
            });
        }
        let final_norm = b.add("ar.final_norm".into(), 1, d);
        let lm_head = b.add("ar.lm_head".into(), d, v);
        let lm_bias = b.add("ar.lm_bias".into(), 1, v);
        for (l, ids) in layers.iter_mut().enumerate() {
            let p = format!("diff.layers.{l}");
            ids.diff_wq = b.add(format!("{p}.wq"), d, d);
            ids.diff_wk = b.add(format!("{p}.wk"), d, d);
            ids.diff_wv = b.add(format!("{p}.wv"), d, d);
        }
        let mask_emb = b.add("diff.mask_emb".into(), 1, d);
        Ok(Self {
            config: config.clone(),
            names: b.names,
            tensors: b.tensors,
            layout: Layout {
                tok_emb,
                layers,
                final_norm,
                lm_head,
                lm_bias,
                mask_emb,
            },
            sealed: false,
        })
    }

    /// Random backbone initialisation. The LM head starts at zero so the
    /// untrained model predicts the uniform distribution; the diffusion
    /// subset is initialised from the backbone.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model as f32;
        let h = config.mlp_hidden as f32;
        let depth_scale = 1.0 / (2.0 * config.n_layers as f32).sqrt();
        let fill = |t: &mut Tensor, std: f32, rng: &mut ChaCha8Rng| {
            for x in &mut t.data {
                *x = normal(rng) * std;
            }
        };
        let layout = p.layout.clone();
        fill(&mut p.tensors[layout.tok_emb.0], 1.0, &mut rng);
        for ids in &layout.layers {
            p.tensors[ids.attn_norm.0].data.fill(1.0);
            p.tensors[ids.mlp_norm.0].data.fill(1.0);
            for id in [ids.wq, ids.wk, ids.wv] {
                fill(&mut p.tensors[id.0], 1.0 / d.sqrt(), &mut rng);
            }
            fill(&mut p.tensors[ids.wo.0], depth_scale / d.sqrt(), &mut rng);
            fill(&mut p.tensors[ids.w_up.0], 1.0 / d.sqrt(), &mut rng);
            fill(&mut p.tensors[ids.w_down.0], depth_scale / h.sqrt(), &mut rng);
        }
        p.tensors[layout.final_norm.0].data.fill(1.0);
        p.init_diffusion_from_ar();
        Ok(p)
    }

    /// Copy each AR Q/K/V projection into its diffusion counterpart and set the
    /// mask embedding to the mean token embedding.
    pub fn init_diffusion_from_ar(&mut self) {
        for ids in self.layout.layers.clone() {
            for (src, dst) in [
                (ids.wq, ids.diff_wq),
                (ids.wk, ids.diff_wk),
                (ids.wv, ids.diff_wv),
            ] {
                let t = self.tensors[src.0].clone();
                self.tensors[dst.0] = t;
            }
        }
        let emb = &self.tensors[self.layout.tok_emb.0];
        let mut mean = vec![0.0f64; emb.cols];
        for r in 0..emb.rows {
            for (m, &x) in mean.iter_mut().zip(emb.row(r)) {
                *m += x as f64;
            }
        }
        let n = emb.rows.max(1) as f64;
        let mean: Vec<f32> = mean.into_iter().map(|m| (m / n) as f32).collect();
        self.tensors[self.layout.mask_emb.0].data = mean;
    }

    /// Perturb the diffusion subset with Gaussian noise of the given scale.
    pub fn randomize_diffusion(&mut self, std: f32, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in self.diffusion_ids() {
            for x in &mut self.tensors[id.0].data {
                *x += normal(&mut rng) * std;
            }
        }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.names[id.0].starts_with("ar.")
    }

    pub fn frozen_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.is_frozen(id)).collect()
    }

    pub fn diffusion_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| !self.is_frozen(id)).collect()
    }

    fn count(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|id| self.tensors[id.0].numel()).sum()
    }

    pub fn total_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.count(&self.diffusion_ids())
    }

    pub fn trainable_fraction(&self) -> f64 {
        self.trainable_count() as f64 / self.total_count() as f64
    }

    /// SHA-256 over names, shapes and little-endian bytes of every frozen tensor.
    pub fn frozen_checksum(&self) -> String {
        let mut h = Sha256::new();
        for id in self.frozen_ids() {
            let t = &self.tensors[id.0];
            h.update(self.names[id.0].as_bytes());
            h.update((t.rows as u64).to_le_bytes());
            h.update((t.cols as u64).to_le_bytes());
            for x in &t.data {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn is_sealed(&self) -> bool {
        self.sealed
    }

    /// Mark the backbone as final. Training code refuses to touch `ar.*` after this.
    pub fn seal(&mut self) {
        self.sealed = true;
    }

    pub(crate) fn set_sealed(&mut self, sealed: bool) {
        self.sealed = sealed;
    }

    pub(crate) fn replace(&mut self, id: ParamId, t: Tensor) -> Result<()> {
        let cur = &self.tensors[id.0];
        if cur.rows != t.rows || cur.cols != t.cols {
            return Err(OrthrusError::Format(format!(
                "tensor {} has shape {}x{}, expected {}x{}",
                self.names[id.0], t.rows, t.cols, cur.rows, cur.cols
            )));
        }
        self.tensors[id.0] = t;
        Ok(())
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f32 {
    rng.sample(StandardNormal)
}
