//! Training blocks (anchor followed by mask slots) and the routing mask that
//! lets each block see only the clean context before its anchor plus itself.
//!
//! Indexing is 0-based. A block whose anchor sits at clean position `a`
//! occupies sequence positions `a..a+K`; slot `k` is trained against the AR
//! row at clean position `a + k`, i.e. the distribution of token `a + k + 1`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{OrthrusError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchorSet {
    pub anchors: Vec<usize>,
    pub block_len: usize,
    pub seq_len: usize,
}

impl AnchorSet {
    pub fn new(anchors: Vec<usize>, block_len: usize, seq_len: usize) -> Result<Self> {
        for &a in &anchors {
            if a < 1 || a + block_len > seq_len {
                return Err(OrthrusError::Bounds {
                    anchor: a,
                    block: block_len,
                    len: seq_len,
                });
            }
        }
        Ok(Self {
            anchors,
            block_len,
            seq_len,
        })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Draw `blocks` anchors uniformly from `[1, seq_len - block_len]`, with
/// replacement.
pub fn sample_anchors(seq_len: usize, blocks: usize, block_len: usize, seed: u64) -> Result<AnchorSet> {
    if block_len == 0 || seq_len < block_len + 1 {
        return Err(OrthrusError::SequenceTooShort {
            len: seq_len,
            block: block_len,
        });
    }
    if blocks == 0 {
        return Err(OrthrusError::Config("need at least one block".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hi = seq_len - block_len;
    let anchors = (0..blocks).map(|_| rng.random_range(1..=hi)).collect();
    Ok(AnchorSet {
        anchors,
        block_len,
        seq_len,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorruptedBlock {
    pub anchor_token: u32,
    pub slots: Vec<u32>,
    pub anchor_pos: usize,
}

/// `[x_anchor, mask, …, mask]` of length `block_len`.
pub fn corrupt_block(
    sequence: &[u32],
    anchor: usize,
    block_len: usize,
    mask_token: u32,
) -> Result<CorruptedBlock> {
    if block_len == 0 || anchor + block_len > sequence.len() {
        return Err(OrthrusError::Bounds {
            anchor,
            block: block_len,
            len: sequence.len(),
        });
    }
    let anchor_token = sequence[anchor];
    let mut slots = vec![mask_token; block_len];
    slots[0] = anchor_token;
    Ok(CorruptedBlock {
        anchor_token,
        slots,
        anchor_pos: anchor,
    })
}

/// Boolean `[B·K × (L + B·K)]` routing matrix. Columns `0..L` are clean keys,
/// columns `L..` are block keys.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiffusionMask {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<bool>,
}

impl DiffusionMask {
    pub fn get(&self, q: usize, k: usize) -> bool {
        self.data[q * self.cols + k]
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.data[q * self.cols..(q + 1) * self.cols]
    }
}

/// Query `q` (block `q / K`, anchor `a`) sees clean keys `0..a` and every
/// key of its own block.
pub fn build_diffusion_mask(seq_len: usize, anchors: &AnchorSet) -> DiffusionMask {
    let k = anchors.block_len;
    let rows = anchors.len() * k;
    let cols = seq_len + rows;
    let mut data = vec![false; rows * cols];
    for (b, &a) in anchors.anchors.iter().enumerate() {
        let visible_clean = a.min(seq_len);
        for slot in 0..k {
            let q = b * k + slot;
            let row = &mut data[q * cols..(q + 1) * cols];
            row[..visible_clean].fill(true);
            row[seq_len + b * k..seq_len + (b + 1) * k].fill(true);
        }
    }
    DiffusionMask { rows, cols, data }
}

/// Everything one distillation step needs for one packed sequence.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub clean: Vec<u32>,
    /// Concatenated corrupted blocks, `B·K` tokens.
    pub blocks: Vec<u32>,
    /// Sequence position of each block slot.
    pub positions: Vec<usize>,
    pub mask: DiffusionMask,
    /// Clean position whose AR row is the target for each slot.
    pub teacher_rows: Vec<usize>,
    /// Ground-truth next token for each slot, when it lies inside the sequence.
    pub hard_targets: Vec<Option<u32>>,
    /// Slots that contribute to the loss.
    pub supervised: Vec<bool>,
}

impl TrainingBatch {
    pub fn slot_count(&self) -> usize {
        self.blocks.len()
    }
}

fn assemble(
    sequence: &[u32],
    anchors: &AnchorSet,
    blocks: Vec<u32>,
    supervised: Vec<bool>,
) -> TrainingBatch {
    let k = anchors.block_len;
    let mut positions = Vec::with_capacity(blocks.len());
    let mut teacher_rows = Vec::with_capacity(blocks.len());
    let mut hard_targets = Vec::with_capacity(blocks.len());
    for &a in &anchors.anchors {
        for slot in 0..k {
            positions.push(a + slot);
            teacher_rows.push(a + slot);
            hard_targets.push(sequence.get(a + slot + 1).copied());
        }
    }
    TrainingBatch {
        clean: sequence.to_vec(),
        blocks,
        positions,
        mask: build_diffusion_mask(sequence.len(), anchors),
        teacher_rows,
        hard_targets,
        supervised,
    }
}

pub fn build_training_batch(
    sequence: &[u32],
    anchors: &AnchorSet,
    mask_token: u32,
) -> Result<TrainingBatch> {
    let mut blocks = Vec::with_capacity(anchors.len() * anchors.block_len);
    for &a in &anchors.anchors {
        blocks.extend(corrupt_block(sequence, a, anchors.block_len, mask_token)?.slots);
    }
    let supervised = vec![true; blocks.len()];
    Ok(assemble(sequence, anchors, blocks, supervised))
}

/// Half-masked variant used to train iterative refinement. Each anchor gives
/// two blocks: one masks a random half of slots `1..K`, the other masks the
/// complement, and the remaining slots carry their clean tokens. A row is
/// supervised when the slot it predicts is masked in that block (the last
/// row, which predicts past the block, always is).
pub fn build_complementary_batch(
    sequence: &[u32],
    anchors: &AnchorSet,
    mask_token: u32,
    seed: u64,
) -> Result<TrainingBatch> {
    let k = anchors.block_len;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut doubled = Vec::with_capacity(2 * anchors.len());
    let mut blocks = Vec::with_capacity(2 * anchors.len() * k);
    let mut supervised = Vec::with_capacity(2 * anchors.len() * k);
    for &a in &anchors.anchors {
        corrupt_block(sequence, a, k, mask_token)?;
        let mut order: Vec<usize> = (1..k).collect();
        order.shuffle(&mut rng);
        let half = order.len().div_ceil(2);
        let mut masked_first = vec![false; k];
        for &s in &order[..half] {
            masked_first[s] = true;
        }
        for view in 0..2 {
            doubled.push(a);
            let masked: Vec<bool> = (0..k)
                .map(|s| s > 0 && (masked_first[s] == (view == 0)))
                .collect();
            for s in 0..k {
                blocks.push(if masked[s] {
                    mask_token
                } else {
                    sequence[a + s]
                });
            }
            for s in 0..k {
                supervised.push(s + 1 == k || masked[s + 1]);
            }
        }
    }
    let doubled = AnchorSet {
        anchors: doubled,
        block_len: k,
        seq_len: anchors.seq_len,
    };
    Ok(assemble(sequence, &doubled, blocks, supervised))
}

#[cfg(test)]
mod tests {
    use super::*;

    const M: u32 = 99;

    #[test]
    fn forced_anchor_when_sequence_is_minimal() {
        let s = sample_anchors(5, 7, 4, 1).unwrap();
        assert!(s.anchors.iter().all(|&a| a == 1));
    }

    #[test]
    fn sampling_is_deterministic() {
        assert_eq!(
            sample_anchors(100, 16, 8, 42).unwrap(),
            sample_anchors(100, 16, 8, 42).unwrap()
        );
    }

    #[test]
    fn too_short_sequence() {
        assert!(matches!(
            sample_anchors(4, 1, 4, 0),
            Err(OrthrusError::SequenceTooShort { .. })
        ));
    }

    #[test]
    fn corrupt_examples() {
        let seq = [5, 6, 7, 8];
        assert_eq!(corrupt_block(&seq, 0, 3, M).unwrap().slots, vec![5, M, M]);
        assert_eq!(corrupt_block(&seq, 2, 1, M).unwrap().slots, vec![7]);
        assert!(matches!(
            corrupt_block(&seq, 2, 3, M),
            Err(OrthrusError::Bounds { .. })
        ));
    }

    #[test]
    fn single_block_row() {
        let anchors = AnchorSet::new(vec![3], 2, 6).unwrap();
        let m = build_diffusion_mask(6, &anchors);
        let on: Vec<usize> = (0..m.cols).filter(|&k| m.get(0, k)).collect();
        assert_eq!(on, vec![0, 1, 2, 6, 7]);
    }

    #[test]
    fn blocks_do_not_see_each_other() {
        let anchors = AnchorSet::new(vec![2, 5], 3, 10).unwrap();
        let m = build_diffusion_mask(10, &anchors);
        for q in 0..3 {
            for k in 13..16 {
                assert!(!m.get(q, k));
            }
            for k in 10..13 {
                assert!(m.get(q, k));
            }
        }
        for q in 3..6 {
            for k in 10..13 {
                assert!(!m.get(q, k));
            }
        }
    }

    #[test]
    fn teacher_map_and_shapes() {
        let seq: Vec<u32> = (0..6).collect();
        let anchors = AnchorSet::new(vec![3], 2, 6).unwrap();
        let b = build_training_batch(&seq, &anchors, M).unwrap();
        assert_eq!(b.teacher_rows, vec![3, 4]);
        assert_eq!(b.blocks, vec![3, M]);
        assert_eq!(b.hard_targets, vec![Some(4), Some(5)]);
        assert_eq!((b.mask.rows, b.mask.cols), (2, 8));

        let twice = AnchorSet::new(vec![2, 2], 3, 6).unwrap();
        let b = build_training_batch(&seq, &twice, M).unwrap();
        assert_eq!(b.teacher_rows[..3], b.teacher_rows[3..]);
        assert_eq!(b.slot_count(), 6);
        assert_eq!((b.mask.rows, b.mask.cols), (6, 12));
    }

    #[test]
    fn last_slot_target_may_fall_off_the_end() {
        let seq: Vec<u32> = (0..6).collect();
        let anchors = AnchorSet::new(vec![4], 2, 6).unwrap();
        let b = build_training_batch(&seq, &anchors, M).unwrap();
        assert_eq!(b.hard_targets, vec![Some(5), None]);
    }

    #[test]
    fn complementary_views_cover_every_slot() {
        let seq: Vec<u32> = (0..20).collect();
        let anchors = AnchorSet::new(vec![3, 9], 6, 20).unwrap();
        let b = build_complementary_batch(&seq, &anchors, M, 5).unwrap();
        assert_eq!(b.slot_count(), 2 * 2 * 6);
        for pair in 0..2 {
            let v0 = &b.blocks[pair * 12..pair * 12 + 6];
            let v1 = &b.blocks[pair * 12 + 6..pair * 12 + 12];
            assert_ne!(v0[0], M);
            assert_eq!(v0[0], v1[0]);
            for s in 1..6 {
                assert!((v0[s] == M) ^ (v1[s] == M), "slot {s} must be masked in exactly one view");
            }
            let masked0 = v0.iter().filter(|&&t| t == M).count();
            assert_eq!(masked0, 3);
            // each row k is supervised iff slot k+1 is masked, or k is the last row
            for view in 0..2 {
                let base = pair * 12 + view * 6;
                for k in 0..6 {
                    let expect = k == 5 || b.blocks[base + k + 1] == M;
                    assert_eq!(b.supervised[base + k], expect);
                }
            }
        }
    }
}
