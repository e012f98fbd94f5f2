//! Forward passes for the two views.
//!
//! Both views share the embedding table, the output projection, the MLP, all
//! normalisation gains and the LM head. They differ only in the Q/K/V
//! projections and in what the queries may attend to.

use crate::autograd::{AttnMask, Graph, KvPrefix, NodeId};
use crate::error::{OrthrusError, Result};
use crate::tensor::Tensor;

use super::cache::SharedKvCache;
use super::params::{Parameters, View};

/// Logits rows over `vocab_size + 1` symbols. The mask column is fixed at
/// `-inf`, so no row ever assigns probability to the mask token.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Tensor,
    /// Per-layer `(keys, values)` of the input rows when the AR pass was not
    /// asked to commit them.
    pub new_kv: Option<Vec<(Tensor, Tensor)>>,
    /// Elements of key/value state allocated for this pass only and dropped
    /// afterwards (diffusion blocks).
    pub transient_kv_elements: usize,
}

pub(crate) struct StackOut {
    /// `[n × vocab_size]`
    pub logits: NodeId,
    pub kv: Vec<(NodeId, NodeId)>,
}

/// Record the full layer stack for `ids` into `g`.
pub(crate) fn build_stack<'a>(
    g: &mut Graph<'a>,
    view: View,
    ids: &[u32],
    positions: &[usize],
    prefixes: &[KvPrefix<'a>],
    mask: AttnMask<'a>,
) -> StackOut {
    let params = g.params();
    let layout = params.layout();
    let mut h = g.embed(ids, layout.tok_emb, layout.mask_emb);
    let mut kv = Vec::with_capacity(layout.layers.len());
    for (l, layer) in layout.layers.iter().enumerate() {
        let (wq, wk, wv) = layer.qkv(view);
        let x = g.rms_norm(h, layer.attn_norm);
        let q = g.matmul(x, wq);
        let k = g.matmul(x, wk);
        let v = g.matmul(x, wv);
        let q = g.rope(q, positions);
        let k = g.rope(k, positions);
        let a = g.attention(q, k, v, prefixes[l], mask);
        let o = g.matmul(a, layer.wo);
        h = g.add(h, o);
        let x = g.rms_norm(h, layer.mlp_norm);
        let up = g.matmul(x, layer.w_up);
        let act = g.gelu(up);
        let down = g.matmul(act, layer.w_down);
        h = g.add(h, down);
        kv.push((k, v));
    }
    let x = g.rms_norm(h, layout.final_norm);
    let logits = g.matmul(x, layout.lm_head);
    let logits = g.add_bias(logits, layout.lm_bias);
    StackOut { logits, kv }
}

/// Append the `-inf` mask column to `[n × vocab]` logits.
pub(crate) fn with_mask_column(logits: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(logits.rows, logits.cols + 1);
    for r in 0..logits.rows {
        let row = out.row_mut(r);
        row[..logits.cols].copy_from_slice(logits.row(r));
        row[logits.cols] = f32::NEG_INFINITY;
    }
    out
}

fn check_real_tokens(params: &Parameters, tokens: &[u32]) -> Result<()> {
    let v = params.config.vocab_size as u32;
    match tokens.iter().position(|&t| t >= v) {
        Some(index) => Err(OrthrusError::InvalidToken {
            token: tokens[index],
            index,
        }),
        None => Ok(()),
    }
}

/// Causal next-token logits for `tokens`, which continue the sequence held in
/// `cache`. Row `i` predicts position `committed_len + i + 1`. With `commit`
/// the new keys/values are appended to the cache.
pub fn ar_forward(
    params: &Parameters,
    tokens: &[u32],
    cache: &mut SharedKvCache,
    commit: bool,
) -> Result<ForwardOutput> {
    check_real_tokens(params, tokens)?;
    let start = cache.committed_len();
    if start + tokens.len() > cache.capacity() {
        return Err(OrthrusError::CacheOverflow {
            needed: start + tokens.len(),
            capacity: cache.capacity(),
        });
    }
    let positions: Vec<usize> = (start..start + tokens.len()).collect();
    let (logits, kv) = {
        let prefixes: Vec<KvPrefix<'_>> = (0..cache.n_layers()).map(|l| cache.prefix(l)).collect();
        let mut g = Graph::new(params, &[]);
        let out = build_stack(
            &mut g,
            View::Ar,
            tokens,
            &positions,
            &prefixes,
            AttnMask::Causal { offset: start },
        );
        let logits = with_mask_column(g.value(out.logits));
        let kv: Vec<(Tensor, Tensor)> = out
            .kv
            .iter()
            .map(|&(k, v)| (g.take_value(k), g.take_value(v)))
            .collect();
        (logits, kv)
    };
    let new_kv = if commit {
        cache.append(&kv)?;
        None
    } else {
        Some(kv)
    };
    Ok(ForwardOutput {
        logits,
        new_kv,
        transient_kv_elements: 0,
    })
}

/// Diffusion-view logits for one block that starts right after the cached
/// context. Row `k` predicts position `block_positions[0] + k + 1`. The cache
/// is only read.
///
/// `intra_block_mask` is a row-major `[len × len]` matrix over block slots;
/// `None` means fully bidirectional.
pub fn diffusion_forward(
    params: &Parameters,
    block_tokens: &[u32],
    block_positions: &[usize],
    cache: &SharedKvCache,
    intra_block_mask: Option<&[bool]>,
) -> Result<ForwardOutput> {
    let n = block_tokens.len();
    let k_max = params.config.block_size;
    if n == 0 || n > k_max {
        return Err(OrthrusError::BlockSize { len: n, max: k_max });
    }
    if block_positions.len() != n {
        return Err(OrthrusError::Config(
            "block_positions must match block_tokens".into(),
        ));
    }
    let anchor_pos = block_positions[0];
    if anchor_pos != cache.committed_len() {
        return Err(OrthrusError::StaleCache {
            anchor_pos,
            committed: cache.committed_len(),
        });
    }
    if block_positions
        .iter()
        .enumerate()
        .any(|(i, &p)| p != anchor_pos + i)
    {
        return Err(OrthrusError::Config(
            "block positions must be consecutive".into(),
        ));
    }
    if anchor_pos + n > params.config.max_seq_len {
        return Err(OrthrusError::CacheOverflow {
            needed: anchor_pos + n,
            capacity: params.config.max_seq_len,
        });
    }
    let mask_id = params.config.mask_token_id();
    if let Some(index) = block_tokens.iter().position(|&t| t > mask_id) {
        return Err(OrthrusError::InvalidToken {
            token: block_tokens[index],
            index,
        });
    }
    if let Some(m) = intra_block_mask {
        if m.len() != n * n {
            return Err(OrthrusError::Config(format!(
                "intra-block mask has {} entries, expected {}",
                m.len(),
                n * n
            )));
        }
    }
    let prefixes: Vec<KvPrefix<'_>> = (0..cache.n_layers()).map(|l| cache.prefix(l)).collect();
    let mut g = Graph::new(params, &[]);
    let out = build_stack(
        &mut g,
        View::Diffusion,
        block_tokens,
        block_positions,
        &prefixes,
        AttnMask::PrefixThenBlock {
            block: intra_block_mask,
        },
    );
    let transient_kv_elements = out
        .kv
        .iter()
        .map(|&(k, v)| g.value(k).numel() + g.value(v).numel())
        .sum();
    Ok(ForwardOutput {
        logits: with_mask_column(g.value(out.logits)),
        new_kv: None,
        transient_kv_elements,
    })
}

/// Lower-triangular `[n × n]` mask.
pub fn causal_block_mask(n: usize) -> Vec<bool> {
    (0..n * n).map(|i| i % n <= i / n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::ModelConfig;
    use crate::tensor::softmax;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            vocab_size: 6,
            max_seq_len: 32,
            block_size: 4,
            rope_base: 10_000.0,
            mlp_hidden: 16,
        }
    }

    fn random_params(seed: u64) -> Parameters {
        let mut p = Parameters::init(&cfg(), seed).unwrap();
        // give the head some weight so logits are not uniform
        let head = p.layout().lm_head;
        for (i, x) in p.get_mut(head).data.iter_mut().enumerate() {
            *x = ((i * 7919 + seed as usize) % 13) as f32 / 13.0 - 0.5;
        }
        p
    }

    #[test]
    fn zero_weights_give_uniform_rows() {
        let c = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            vocab_size: 4,
            max_seq_len: 8,
            block_size: 2,
            rope_base: 10_000.0,
            mlp_hidden: 8,
        };
        let p = Parameters::zeros(&c).unwrap();
        let mut cache = SharedKvCache::new(&c);
        let out = ar_forward(&p, &[0, 1, 2], &mut cache, true).unwrap();
        for r in 0..3 {
            let probs = softmax(out.logits.row(r));
            assert_eq!(probs.len(), 5);
            for &pr in &probs[..4] {
                assert!((pr - 0.25).abs() < 1e-7);
            }
            assert_eq!(probs[4], 0.0);
        }
    }

    #[test]
    fn chunked_matches_monolithic_bitwise() {
        let p = random_params(5);
        let mut a = SharedKvCache::new(&p.config);
        ar_forward(&p, &[1, 2], &mut a, true).unwrap();
        let chunk = ar_forward(&p, &[3], &mut a, true).unwrap();
        let mut b = SharedKvCache::new(&p.config);
        let full = ar_forward(&p, &[1, 2, 3], &mut b, true).unwrap();
        assert_eq!(chunk.logits.row(0), full.logits.row(2));
        assert_eq!(a, b);
    }

    #[test]
    fn mask_token_rejected_by_ar_path() {
        let p = random_params(1);
        let mut c = SharedKvCache::new(&p.config);
        let err = ar_forward(&p, &[1, p.config.mask_token_id()], &mut c, false).unwrap_err();
        assert!(matches!(err, OrthrusError::InvalidToken { index: 1, .. }));
    }

    #[test]
    fn overflow_rejected() {
        let p = random_params(1);
        let mut c = SharedKvCache::with_capacity(&p.config, 3);
        assert!(matches!(
            ar_forward(&p, &[1, 2, 3, 4], &mut c, true),
            Err(OrthrusError::CacheOverflow { .. })
        ));
    }

    #[test]
    fn diffusion_single_anchor_matches_ar_after_init() {
        let p = random_params(11);
        let mut cache = SharedKvCache::new(&p.config);
        ar_forward(&p, &[0, 3, 2], &mut cache, true).unwrap();
        let d = diffusion_forward(&p, &[4], &[3], &cache, None).unwrap();
        let a = ar_forward(&p, &[4], &mut cache.clone(), false).unwrap();
        assert!(d.logits.row(0)[..6]
            .iter()
            .zip(&a.logits.row(0)[..6])
            .all(|(x, y)| (x - y).abs() < 1e-5));
    }

    #[test]
    fn diffusion_never_writes_cache() {
        let mut p = random_params(2);
        p.randomize_diffusion(0.3, 4);
        let mut cache = SharedKvCache::new(&p.config);
        ar_forward(&p, &[0, 1], &mut cache, true).unwrap();
        let before = cache.clone();
        let m = p.config.mask_token_id();
        let out = diffusion_forward(&p, &[2, m, m, m], &[2, 3, 4, 5], &cache, None).unwrap();
        assert_eq!(cache, before);
        assert_eq!(out.transient_kv_elements, 2 * 2 * 4 * 8);
        for r in 0..4 {
            let s: f32 = softmax(out.logits.row(r)).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn diffusion_errors() {
        let p = random_params(2);
        let mut cache = SharedKvCache::new(&p.config);
        ar_forward(&p, &[0, 1], &mut cache, true).unwrap();
        let m = p.config.mask_token_id();
        assert!(matches!(
            diffusion_forward(&p, &[2, m, m, m, m], &[2, 3, 4, 5, 6], &cache, None),
            Err(OrthrusError::BlockSize { .. })
        ));
        assert!(matches!(
            diffusion_forward(&p, &[2, m], &[3, 4], &cache, None),
            Err(OrthrusError::StaleCache { .. })
        ));
    }

    #[test]
    fn causal_mask_shape() {
        let m = causal_block_mask(3);
        assert_eq!(
            m,
            vec![true, false, false, true, true, false, true, true, true]
        );
    }
}
