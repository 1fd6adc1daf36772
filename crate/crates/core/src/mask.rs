//! Five-role attention masking over packed token streams.
//!
//! Within a segment tokens are laid out as
//! `VisionState* Instruction* ArAction* CrlAction* CrlGoal*`. Permissions:
//!
//! | query role            | may attend (same segment, key position <= query position) |
//! |-----------------------|------------------------------------------------------------|
//! | VisionState, Instruction | VisionState, Instruction                                |
//! | ArAction              | VisionState, Instruction, ArAction                         |
//! | CrlAction             | VisionState, CrlAction                                     |
//! | CrlGoal               | CrlGoal                                                    |
//!
//! Attention is evaluated either densely (every score computed, blocked
//! pairs dropped) or block-sparsely with an online softmax that never
//! touches blocks whose pairs are all blocked.

use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::crl::bc_token_loss;
use crate::error::MaskError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenRole {
    VisionState,
    Instruction,
    ArAction,
    CrlAction,
    CrlGoal,
}

impl TokenRole {
    pub const ALL: [TokenRole; 5] = [
        TokenRole::VisionState,
        TokenRole::Instruction,
        TokenRole::ArAction,
        TokenRole::CrlAction,
        TokenRole::CrlGoal,
    ];

    pub fn code(self) -> char {
        match self {
            TokenRole::VisionState => 'V',
            TokenRole::Instruction => 'I',
            TokenRole::ArAction => 'A',
            TokenRole::CrlAction => 'C',
            TokenRole::CrlGoal => 'G',
        }
    }

    pub fn from_code(c: char) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.code() == c)
    }

    pub fn is_crl(self) -> bool {
        matches!(self, TokenRole::CrlAction | TokenRole::CrlGoal)
    }

    /// Whether a `self` query may see a `key` role (ignoring position).
    pub fn may_attend(self, key: TokenRole) -> bool {
        use TokenRole::*;
        match self {
            VisionState | Instruction => matches!(key, VisionState | Instruction),
            ArAction => matches!(key, VisionState | Instruction | ArAction),
            CrlAction => matches!(key, VisionState | CrlAction),
            CrlGoal => matches!(key, CrlGoal),
        }
    }
}

impl fmt::Display for TokenRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// One unpacked training sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    pub tokens: Array2<f64>,
    pub roles: Vec<TokenRole>,
    /// Target token of each `ArAction` position, in order.
    pub ar_targets: Vec<usize>,
}

impl SequenceSample {
    pub fn new(tokens: Array2<f64>, roles: Vec<TokenRole>, ar_targets: Vec<usize>) -> Result<Self, MaskError> {
        if tokens.nrows() != roles.len() {
            return Err(MaskError::Shape(format!(
                "{} token rows for {} roles",
                tokens.nrows(),
                roles.len()
            )));
        }
        check_role_order(&roles, 0, 0)?;
        let ar = roles.iter().filter(|&&r| r == TokenRole::ArAction).count();
        if ar != ar_targets.len() {
            return Err(MaskError::Shape(format!(
                "{ar} ArAction tokens but {} targets",
                ar_targets.len()
            )));
        }
        Ok(Self {
            tokens,
            roles,
            ar_targets,
        })
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    /// Same sample with both CRL blocks removed.
    pub fn without_crl_blocks(&self) -> Self {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| !self.roles[i].is_crl()).collect();
        Self {
            tokens: self.tokens.select(ndarray::Axis(0), &keep),
            roles: keep.iter().map(|&i| self.roles[i]).collect(),
            ar_targets: self.ar_targets.clone(),
        }
    }
}

fn check_role_order(roles: &[TokenRole], offset: usize, segment: usize) -> Result<(), MaskError> {
    for (k, w) in roles.windows(2).enumerate() {
        if w[1] < w[0] {
            return Err(MaskError::RoleOrder {
                position: offset + k + 1,
                segment,
                previous: w[0],
                found: w[1],
            });
        }
    }
    Ok(())
}

/// Token stream holding one or more segments.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedSequence {
    pub tokens: Array2<f64>,
    pub roles: Vec<TokenRole>,
    pub segment_ids: Vec<usize>,
    /// Index of each token within its segment.
    pub positions: Vec<usize>,
    /// ArAction target per token.
    pub targets: Vec<Option<usize>>,
    /// Original sample index of each segment id.
    pub sample_ids: Vec<usize>,
}

impl PackedSequence {
    pub fn single(sample: &SequenceSample) -> Self {
        Self::concat(&[sample], &[0]).expect("validated sample")
    }

    pub fn concat(samples: &[&SequenceSample], sample_ids: &[usize]) -> Result<Self, MaskError> {
        let d = samples.first().map_or(0, |s| s.tokens.ncols());
        let n: usize = samples.iter().map(|s| s.len()).sum();
        let mut tokens = Array2::zeros((n, d));
        let mut roles = Vec::with_capacity(n);
        let mut segment_ids = Vec::with_capacity(n);
        let mut positions = Vec::with_capacity(n);
        let mut targets = Vec::with_capacity(n);
        let mut row = 0;
        for (seg, s) in samples.iter().enumerate() {
            if s.tokens.ncols() != d {
                return Err(MaskError::Shape("token width differs between samples".into()));
            }
            let mut ar = s.ar_targets.iter();
            for (p, &role) in s.roles.iter().enumerate() {
                tokens.row_mut(row).assign(&s.tokens.row(p));
                roles.push(role);
                segment_ids.push(seg);
                positions.push(p);
                targets.push(if role == TokenRole::ArAction { ar.next().copied() } else { None });
                row += 1;
            }
        }
        let seq = Self {
            tokens,
            roles,
            segment_ids,
            positions,
            targets,
            sample_ids: sample_ids.to_vec(),
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn num_segments(&self) -> usize {
        self.segment_ids.last().map_or(0, |s| s + 1)
    }

    pub fn validate(&self) -> Result<(), MaskError> {
        let n = self.len();
        if self.tokens.nrows() != n
            || self.segment_ids.len() != n
            || self.positions.len() != n
            || self.targets.len() != n
        {
            return Err(MaskError::Shape("per-token arrays differ in length".into()));
        }
        for i in 1..n {
            if self.segment_ids[i] < self.segment_ids[i - 1] {
                return Err(MaskError::SegmentOrder(i));
            }
            if self.segment_ids[i] == self.segment_ids[i - 1] && self.roles[i] < self.roles[i - 1] {
                return Err(MaskError::RoleOrder {
                    position: i,
                    segment: self.segment_ids[i],
                    previous: self.roles[i - 1],
                    found: self.roles[i],
                });
            }
        }
        Ok(())
    }

    /// Token index range of each segment.
    pub fn segment_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut out: Vec<std::ops::Range<usize>> = Vec::new();
        for (i, &s) in self.segment_ids.iter().enumerate() {
            match out.last_mut() {
                Some(r) if self.segment_ids[r.start] == s => r.end = i + 1,
                _ => out.push(i..i + 1),
            }
        }
        out
    }
}

/// Aggregate state of a `block x block` tile of the permission matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockStatus {
    Full,
    Partial,
    Skip,
}

impl BlockStatus {
    fn code(self) -> char {
        match self {
            BlockStatus::Full => 'F',
            BlockStatus::Partial => 'P',
            BlockStatus::Skip => 'S',
        }
    }

    fn from_code(c: char) -> Option<Self> {
        match c {
            'F' => Some(BlockStatus::Full),
            'P' => Some(BlockStatus::Partial),
            'S' => Some(BlockStatus::Skip),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLayout {
    pub block_size: usize,
    pub len: usize,
    pub num_blocks: usize,
    /// `status[qb * num_blocks + kb]`.
    pub status: Vec<BlockStatus>,
}

impl BlockLayout {
    pub fn get(&self, query_block: usize, key_block: usize) -> BlockStatus {
        self.status[query_block * self.num_blocks + key_block]
    }

    pub fn skipped_fraction(&self) -> f64 {
        let skipped = self.status.iter().filter(|&&s| s == BlockStatus::Skip).count();
        skipped as f64 / self.status.len().max(1) as f64
    }

    /// `(query_block, key_block, status)` for every tile.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, BlockStatus)> + '_ {
        self.status
            .iter()
            .enumerate()
            .map(|(i, &s)| (i / self.num_blocks, i % self.num_blocks, s))
    }

    /// Expands the layout back to a dense permission matrix, consulting
    /// `mask` only inside partial tiles.
    pub fn reconstruct(&self, mask: &RoleMask) -> Vec<bool> {
        let n = self.len;
        let mut out = vec![false; n * n];
        for (qb, kb, status) in self.entries() {
            let qs = qb * self.block_size..((qb + 1) * self.block_size).min(n);
            for q in qs {
                for k in kb * self.block_size..((kb + 1) * self.block_size).min(n) {
                    out[q * n + k] = match status {
                        BlockStatus::Full => true,
                        BlockStatus::Skip => false,
                        BlockStatus::Partial => mask.allowed(q, k),
                    };
                }
            }
        }
        out
    }
}

/// Dense query x key permission matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoleMask {
    len: usize,
    permission: Vec<bool>,
}

impl RoleMask {
    pub fn all_permitted(len: usize) -> Self {
        Self {
            len,
            permission: vec![true; len * len],
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn allowed(&self, query: usize, key: usize) -> bool {
        self.permission[query * self.len + key]
    }

    /// Overrides one pair; used to build negative controls.
    pub fn set(&mut self, query: usize, key: usize, allowed: bool) {
        self.permission[query * self.len + key] = allowed;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.permission
    }

    pub fn block_layout(&self, block_size: usize) -> Result<BlockLayout, MaskError> {
        if block_size == 0 {
            return Err(MaskError::BlockSize);
        }
        let n = self.len;
        let num_blocks = n.div_ceil(block_size);
        let mut status = Vec::with_capacity(num_blocks * num_blocks);
        for qb in 0..num_blocks {
            let qs = qb * block_size..((qb + 1) * block_size).min(n);
            for kb in 0..num_blocks {
                let ks = kb * block_size..((kb + 1) * block_size).min(n);
                let (mut any, mut all) = (false, true);
                for q in qs.clone() {
                    let row = &self.permission[q * n + ks.start..q * n + ks.end];
                    any |= row.iter().any(|&p| p);
                    all &= row.iter().all(|&p| p);
                }
                status.push(match (any, all) {
                    (false, _) => BlockStatus::Skip,
                    (true, true) => BlockStatus::Full,
                    (true, false) => BlockStatus::Partial,
                });
            }
        }
        Ok(BlockLayout {
            block_size,
            len: n,
            num_blocks,
            status,
        })
    }
}

/// The rule set as a pure predicate over token metadata.
pub fn rule_permits(seq: &PackedSequence, query: usize, key: usize) -> bool {
    seq.segment_ids[query] == seq.segment_ids[key]
        && seq.positions[key] <= seq.positions[query]
        && seq.roles[query].may_attend(seq.roles[key])
}

pub fn build_mask(seq: &PackedSequence) -> Result<RoleMask, MaskError> {
    seq.validate()?;
    let n = seq.len();
    let mut permission = vec![false; n * n];
    for range in seq.segment_ranges() {
        for q in range.clone() {
            for k in range.start..=q {
                permission[q * n + k] = seq.roles[q].may_attend(seq.roles[k]);
            }
        }
    }
    Ok(RoleMask { len: n, permission })
}

/// Single attention layer: per-head projections, softmax attention, output
/// projection, plus a vocabulary head for action-token logits.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub heads: usize,
    pub d_head: usize,
    /// `d_model x (heads * d_head)`.
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    /// `(heads * d_head) x d_model`.
    pub wo: Array2<f64>,
    /// `d_model x vocab`.
    pub lm_head: Array2<f64>,
}

impl AttentionParams {
    pub fn random(d_model: usize, heads: usize, d_head: usize, vocab: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inner = heads * d_head;
        let mut gauss = |r: usize, c: usize, scale: f64| {
            Array2::from_shape_fn((r, c), |_| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
        };
        let s_in = 1.0 / (d_model as f64).sqrt();
        let s_out = 1.0 / (inner as f64).sqrt();
        Self {
            heads,
            d_head,
            wq: gauss(d_model, inner, s_in),
            wk: gauss(d_model, inner, s_in),
            wv: gauss(d_model, inner, s_in),
            wo: gauss(inner, d_model, s_out),
            lm_head: gauss(d_model, vocab, s_in),
        }
    }

    /// Small integer-valued weights, so masked-out keys provably contribute nothing.
    pub fn integer_valued(d_model: usize, heads: usize, d_head: usize, vocab: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inner = heads * d_head;
        let mut ints = |r: usize, c: usize| Array2::from_shape_fn((r, c), |_| f64::from(rng.random_range(-2i32..=2)));
        Self {
            heads,
            d_head,
            wq: ints(d_model, inner),
            wk: ints(d_model, inner),
            wv: ints(d_model, inner),
            wo: ints(inner, d_model),
            lm_head: ints(d_model, vocab),
        }
    }

    pub fn d_model(&self) -> usize {
        self.wq.nrows()
    }

    pub fn vocab(&self) -> usize {
        self.lm_head.ncols()
    }

    fn check(&self, seq: &PackedSequence, mask: &RoleMask) -> Result<(), MaskError> {
        if seq.tokens.ncols() != self.d_model() {
            return Err(MaskError::Shape(format!(
                "token width {} vs d_model {}",
                seq.tokens.ncols(),
                self.d_model()
            )));
        }
        if mask.len() != seq.len() {
            return Err(MaskError::Shape(format!(
                "mask covers {} tokens, sequence has {}",
                mask.len(),
                seq.len()
            )));
        }
        Ok(())
    }
}

struct Projected {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
}

fn project(seq: &PackedSequence, params: &AttentionParams) -> Projected {
    let scale = 1.0 / (params.d_head as f64).sqrt();
    Projected {
        q: seq.tokens.dot(&params.wq) * scale,
        k: seq.tokens.dot(&params.wk),
        v: seq.tokens.dot(&params.wv),
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Reference evaluator: all `n` scores per query row, blocked pairs dropped
/// before the softmax.
pub fn dense_attention(
    seq: &PackedSequence,
    mask: &RoleMask,
    params: &AttentionParams,
) -> Result<Array2<f64>, MaskError> {
    params.check(seq, mask)?;
    let n = seq.len();
    let dh = params.d_head;
    let proj = project(seq, params);
    let (q, k, v) = (
        proj.q.as_slice().expect("standard layout"),
        proj.k.as_slice().expect("standard layout"),
        proj.v.as_slice().expect("standard layout"),
    );
    let inner = params.heads * dh;
    let mut heads_out = Array2::<f64>::zeros((n, inner));
    let mut scores = vec![0.0; n];
    let perm = mask.as_slice();
    for i in 0..n {
        let row_mask = &perm[i * n..(i + 1) * n];
        if !row_mask.iter().any(|&p| p) {
            return Err(MaskError::EmptyRow(i));
        }
        for h in 0..params.heads {
            let qi = &q[i * inner + h * dh..i * inner + (h + 1) * dh];
            for (j, s) in scores.iter_mut().enumerate() {
                *s = dot(qi, &k[j * inner + h * dh..j * inner + (h + 1) * dh]);
            }
            let mut max = f64::NEG_INFINITY;
            for (s, &p) in scores.iter().zip(row_mask) {
                if p && *s > max {
                    max = *s;
                }
            }
            let mut denom = 0.0;
            let mut acc = vec![0.0; dh];
            for (j, (s, &p)) in scores.iter().zip(row_mask).enumerate() {
                if !p {
                    continue;
                }
                let w = (s - max).exp();
                denom += w;
                for (a, vj) in acc.iter_mut().zip(&v[j * inner + h * dh..j * inner + (h + 1) * dh]) {
                    *a += w * vj;
                }
            }
            for (d, a) in acc.iter().enumerate() {
                heads_out[[i, h * dh + d]] = a / denom;
            }
        }
    }
    Ok(heads_out.dot(&params.wo))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparseStats {
    pub total_blocks: usize,
    pub skipped_blocks: usize,
    pub skipped_fraction: f64,
}

/// Tile-by-tile evaluator with an online softmax. Skip tiles are never
/// visited; full tiles skip the elementwise mask lookup.
pub fn block_sparse_attention(
    seq: &PackedSequence,
    mask: &RoleMask,
    params: &AttentionParams,
    block_size: usize,
) -> Result<(Array2<f64>, SparseStats), MaskError> {
    params.check(seq, mask)?;
    let layout = mask.block_layout(block_size)?;
    let out = block_sparse_with_layout(seq, mask, params, &layout)?;
    let skipped = layout.status.iter().filter(|&&s| s == BlockStatus::Skip).count();
    Ok((
        out,
        SparseStats {
            total_blocks: layout.status.len(),
            skipped_blocks: skipped,
            skipped_fraction: layout.skipped_fraction(),
        },
    ))
}

fn block_sparse_with_layout(
    seq: &PackedSequence,
    mask: &RoleMask,
    params: &AttentionParams,
    layout: &BlockLayout,
) -> Result<Array2<f64>, MaskError> {
    let n = seq.len();
    let dh = params.d_head;
    let bs = layout.block_size;
    let inner = params.heads * dh;
    let proj = project(seq, params);
    let (q, k, v) = (
        proj.q.as_slice().expect("standard layout"),
        proj.k.as_slice().expect("standard layout"),
        proj.v.as_slice().expect("standard layout"),
    );
    let perm = mask.as_slice();
    let mut heads_out = Array2::<f64>::zeros((n, inner));
    let mut scores = vec![0.0; bs];
    let mut acc = vec![0.0; dh];
    for qb in 0..layout.num_blocks {
        for i in qb * bs..((qb + 1) * bs).min(n) {
            for h in 0..params.heads {
                let qi = &q[i * inner + h * dh..i * inner + (h + 1) * dh];
                let mut max = f64::NEG_INFINITY;
                let mut denom = 0.0;
                acc.iter_mut().for_each(|a| *a = 0.0);
                for kb in 0..layout.num_blocks {
                    let status = layout.get(qb, kb);
                    if status == BlockStatus::Skip {
                        continue;
                    }
                    let ks = kb * bs..((kb + 1) * bs).min(n);
                    let width = ks.len();
                    let row_mask = &perm[i * n + ks.start..i * n + ks.end];
                    let mut block_max = f64::NEG_INFINITY;
                    for (off, s) in scores[..width].iter_mut().enumerate() {
                        let j = ks.start + off;
                        *s = dot(qi, &k[j * inner + h * dh..j * inner + (h + 1) * dh]);
                        if (status == BlockStatus::Full || row_mask[off]) && *s > block_max {
                            block_max = *s;
                        }
                    }
                    if block_max == f64::NEG_INFINITY {
                        continue;
                    }
                    if block_max > max {
                        let rescale = (max - block_max).exp();
                        denom *= rescale;
                        acc.iter_mut().for_each(|a| *a *= rescale);
                        max = block_max;
                    }
                    for (off, s) in scores[..width].iter().enumerate() {
                        if status == BlockStatus::Partial && !row_mask[off] {
                            continue;
                        }
                        let j = ks.start + off;
                        let w = (s - max).exp();
                        denom += w;
                        for (a, vj) in acc.iter_mut().zip(&v[j * inner + h * dh..j * inner + (h + 1) * dh]) {
                            *a += w * vj;
                        }
                    }
                }
                if denom == 0.0 {
                    return Err(MaskError::EmptyRow(i));
                }
                for (d, a) in acc.iter().enumerate() {
                    heads_out[[i, h * dh + d]] = a / denom;
                }
            }
        }
    }
    Ok(heads_out.dot(&params.wo))
}

/// Action-token logits (one row per `ArAction` token, in order).
pub fn ar_logits(seq: &PackedSequence, outputs: &Array2<f64>, params: &AttentionParams) -> Array2<f64> {
    let rows: Vec<usize> = (0..seq.len()).filter(|&i| seq.roles[i] == TokenRole::ArAction).collect();
    outputs.select(ndarray::Axis(0), &rows).dot(&params.lm_head)
}

/// BC token loss of each segment, keyed by original sample index.
pub fn segment_bc_losses(
    seq: &PackedSequence,
    outputs: &Array2<f64>,
    params: &AttentionParams,
) -> Result<Vec<(usize, f64)>, MaskError> {
    let mut out = Vec::new();
    for (seg, range) in seq.segment_ranges().into_iter().enumerate() {
        let rows: Vec<usize> = range.filter(|&i| seq.roles[i] == TokenRole::ArAction).collect();
        let targets: Vec<usize> = rows.iter().map(|&i| seq.targets[i].unwrap_or(0)).collect();
        let logits = outputs.select(ndarray::Axis(0), &rows).dot(&params.lm_head);
        let (loss, _) = bc_token_loss(logits.view(), &targets)?;
        out.push((seq.sample_ids.get(seg).copied().unwrap_or(seg), loss));
    }
    Ok(out)
}

/// Greedy first-fit packing in input order.
pub fn pack(samples: &[SequenceSample], limit: usize) -> Result<Vec<PackedSequence>, MaskError> {
    let mut bins: Vec<(usize, Vec<usize>)> = Vec::new();
    for (index, s) in samples.iter().enumerate() {
        if s.len() > limit {
            return Err(MaskError::Oversize {
                index,
                len: s.len(),
                limit,
            });
        }
        match bins.iter_mut().find(|(used, _)| used + s.len() <= limit) {
            Some((used, members)) => {
                *used += s.len();
                members.push(index);
            }
            None => bins.push((s.len(), vec![index])),
        }
    }
    bins.into_iter()
        .map(|(_, members)| {
            let refs: Vec<&SequenceSample> = members.iter().map(|&i| &samples[i]).collect();
            PackedSequence::concat(&refs, &members)
        })
        .collect()
}

/// Largest change of any per-sample BC loss between packed and unpacked
/// evaluation.
pub fn packing_loss_diff(samples: &[SequenceSample], limit: usize, params: &AttentionParams) -> Result<f64, MaskError> {
    let mut unpacked = Vec::with_capacity(samples.len());
    for s in samples {
        let seq = PackedSequence::single(s);
        let out = dense_attention(&seq, &build_mask(&seq)?, params)?;
        unpacked.push(segment_bc_losses(&seq, &out, params)?[0].1);
    }
    let mut worst: f64 = 0.0;
    for seq in pack(samples, limit)? {
        let out = dense_attention(&seq, &build_mask(&seq)?, params)?;
        for (sample, loss) in segment_bc_losses(&seq, &out, params)? {
            worst = worst.max((loss - unpacked[sample]).abs());
        }
    }
    Ok(worst)
}

/// Role counts of a synthetic sequence sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleCounts {
    pub vision: usize,
    pub instruction: usize,
    pub ar_action: usize,
    pub crl_action: usize,
    pub crl_goal: usize,
}

impl RoleCounts {
    pub fn total(&self) -> usize {
        self.vision + self.instruction + self.ar_action + self.crl_action + self.crl_goal
    }

    pub fn random(rng: &mut impl Rng, max_per_role: usize) -> Self {
        let mut pick = |lo: usize| rng.random_range(lo..=max_per_role.max(lo));
        Self {
            vision: pick(1),
            instruction: pick(0),
            ar_action: pick(1),
            crl_action: pick(1),
            crl_goal: pick(1),
        }
    }

    fn roles(&self) -> Vec<TokenRole> {
        let mut r = Vec::with_capacity(self.total());
        for (role, n) in [
            (TokenRole::VisionState, self.vision),
            (TokenRole::Instruction, self.instruction),
            (TokenRole::ArAction, self.ar_action),
            (TokenRole::CrlAction, self.crl_action),
            (TokenRole::CrlGoal, self.crl_goal),
        ] {
            r.extend(std::iter::repeat_n(role, n));
        }
        r
    }
}

/// Gaussian token features with random action targets.
pub fn random_sequence_sample(rng: &mut impl Rng, counts: RoleCounts, d_model: usize, vocab: usize) -> SequenceSample {
    let roles = counts.roles();
    let tokens = Array2::from_shape_fn((roles.len(), d_model), |_| StandardNormal.sample(rng));
    let ar_targets = (0..counts.ar_action).map(|_| rng.random_range(0..vocab)).collect();
    SequenceSample::new(tokens, roles, ar_targets).expect("roles generated in order")
}

/// Which perturbation rule an isolation result refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IsolationRule {
    /// Instruction features randomized; CrlAction outputs must not move.
    InstructionBlindAction,
    /// Everything except CrlGoal randomized; CrlGoal outputs must not move.
    SelfContainedGoal,
    /// CRL blocks deleted; all other outputs must not move.
    CrlBlocksInvisible,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Leak {
    pub query_role: TokenRole,
    pub perturbed_role: TokenRole,
    pub query_position: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleResult {
    pub rule: IsolationRule,
    pub max_diff: f64,
    pub passed: bool,
    pub leak: Option<Leak>,
}

/// A permitted pair that the role rules forbid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForbiddenPair {
    pub query: usize,
    pub key: usize,
    pub query_role: TokenRole,
    pub key_role: TokenRole,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolationReport {
    pub rules: Vec<RuleResult>,
    /// Largest per-sample BC loss change when the CRL blocks are removed.
    pub bc_loss_diff: f64,
    pub forbidden_pairs: Vec<ForbiddenPair>,
}

impl IsolationReport {
    pub fn passed(&self) -> bool {
        self.rules.iter().all(|r| r.passed) && self.bc_loss_diff <= ISOLATION_TOL
    }
}

pub const ISOLATION_TOL: f64 = 1e-12;

fn perturb(seq: &PackedSequence, rng: &mut ChaCha8Rng, mut which: impl FnMut(TokenRole) -> bool) -> PackedSequence {
    let mut out = seq.clone();
    for (i, mut row) in out.tokens.rows_mut().into_iter().enumerate() {
        if which(seq.roles[i]) {
            row.mapv_inplace(|_| 3.0 * Distribution::<f64>::sample(&StandardNormal, rng));
        }
    }
    out
}

fn worst_diff(a: &Array2<f64>, b: &Array2<f64>, rows_a: &[usize], rows_b: &[usize]) -> (f64, usize) {
    let mut worst = (0.0, rows_a.first().copied().unwrap_or(0));
    for (&ra, &rb) in rows_a.iter().zip(rows_b) {
        for (x, y) in a.row(ra).iter().zip(b.row(rb).iter()) {
            let d = (x - y).abs();
            if d > worst.0 || d.is_nan() {
                worst = (if d.is_nan() { f64::INFINITY } else { d }, ra);
            }
        }
    }
    worst
}

fn rows_with(seq: &PackedSequence, pred: impl Fn(TokenRole) -> bool) -> Vec<usize> {
    (0..seq.len()).filter(|&i| pred(seq.roles[i])).collect()
}

/// Sequence with the chosen roles deleted, plus the kept original indices.
fn drop_roles(seq: &PackedSequence, drop: impl Fn(TokenRole) -> bool) -> (PackedSequence, Vec<usize>) {
    let keep: Vec<usize> = (0..seq.len()).filter(|&i| !drop(seq.roles[i])).collect();
    let mut positions = Vec::with_capacity(keep.len());
    let mut last_seg = usize::MAX;
    let mut p = 0;
    for &i in &keep {
        if seq.segment_ids[i] != last_seg {
            last_seg = seq.segment_ids[i];
            p = 0;
        }
        positions.push(p);
        p += 1;
    }
    let reduced = PackedSequence {
        tokens: seq.tokens.select(ndarray::Axis(0), &keep),
        roles: keep.iter().map(|&i| seq.roles[i]).collect(),
        segment_ids: keep.iter().map(|&i| seq.segment_ids[i]).collect(),
        positions,
        targets: keep.iter().map(|&i| seq.targets[i]).collect(),
        sample_ids: seq.sample_ids.clone(),
    };
    (reduced, keep)
}

/// Runs the three leakage perturbations against the rule-built mask.
pub fn isolation_check(seq: &PackedSequence, params: &AttentionParams, seed: u64) -> Result<IsolationReport, MaskError> {
    let mask = build_mask(seq)?;
    isolation_check_with_mask(seq, &mask, params, seed)
}

/// Same as [`isolation_check`] but evaluates the full sequence under a
/// caller-supplied mask (reduced sequences always use the rule mask).
pub fn isolation_check_with_mask(
    seq: &PackedSequence,
    mask: &RoleMask,
    params: &AttentionParams,
    seed: u64,
) -> Result<IsolationReport, MaskError> {
    use TokenRole::*;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = dense_attention(seq, mask, params)?;
    let mut rules = Vec::with_capacity(3);

    // (a) instructions randomized, CrlAction rows compared
    let action_rows = rows_with(seq, |r| r == CrlAction);
    let perturbed = perturb(seq, &mut rng, |r| r == Instruction);
    let out = dense_attention(&perturbed, mask, params)?;
    let (diff, pos) = worst_diff(&base, &out, &action_rows, &action_rows);
    rules.push(rule_result(IsolationRule::InstructionBlindAction, diff, seq, pos, Instruction));

    // (b) everything but CrlGoal randomized, CrlGoal rows compared
    let goal_rows = rows_with(seq, |r| r == CrlGoal);
    let perturbed = perturb(seq, &mut rng, |r| r != CrlGoal);
    let out = dense_attention(&perturbed, mask, params)?;
    let (diff, pos) = worst_diff(&base, &out, &goal_rows, &goal_rows);
    let mut culprit = VisionState;
    if diff > ISOLATION_TOL {
        for role in [VisionState, Instruction, ArAction, CrlAction] {
            let p = perturb(seq, &mut rng, |r| r == role);
            let o = dense_attention(&p, mask, params)?;
            if worst_diff(&base, &o, &goal_rows, &goal_rows).0 > ISOLATION_TOL {
                culprit = role;
                break;
            }
        }
    }
    rules.push(rule_result(IsolationRule::SelfContainedGoal, diff, seq, pos, culprit));

    // (c) CRL blocks deleted, every other row compared
    let (reduced, kept) = drop_roles(seq, TokenRole::is_crl);
    let reduced_out = dense_attention(&reduced, &build_mask(&reduced)?, params)?;
    let reduced_rows: Vec<usize> = (0..kept.len()).collect();
    let (diff, pos) = worst_diff(&base, &reduced_out, &kept, &reduced_rows);
    let mut culprit = CrlAction;
    if diff > ISOLATION_TOL {
        for role in [CrlAction, CrlGoal] {
            let (r, k) = drop_roles(seq, |x| x == role);
            let mut m = build_mask(&r)?;
            // keep any extra permissions of the supplied mask among kept tokens
            for (qi, &q) in k.iter().enumerate() {
                for (ki, &kk) in k.iter().enumerate() {
                    m.set(qi, ki, mask.allowed(q, kk));
                }
            }
            let o = dense_attention(&r, &m, params)?;
            let rows: Vec<usize> = (0..k.len()).filter(|&i| !r.roles[i].is_crl()).collect();
            let orig: Vec<usize> = rows.iter().map(|&i| k[i]).collect();
            if worst_diff(&base, &o, &orig, &rows).0 > ISOLATION_TOL {
                culprit = role;
                break;
            }
        }
    }
    rules.push(rule_result(IsolationRule::CrlBlocksInvisible, diff, seq, pos, culprit));

    let full_bc = segment_bc_losses(seq, &base, params)?;
    let reduced_bc = segment_bc_losses(&reduced, &reduced_out, params)?;
    let bc_loss_diff = full_bc
        .iter()
        .zip(&reduced_bc)
        .map(|((_, a), (_, b))| (a - b).abs())
        .fold(0.0, f64::max);

    let mut forbidden_pairs = Vec::new();
    for q in 0..seq.len() {
        for k in 0..seq.len() {
            if mask.allowed(q, k) && !rule_permits(seq, q, k) {
                forbidden_pairs.push(ForbiddenPair {
                    query: q,
                    key: k,
                    query_role: seq.roles[q],
                    key_role: seq.roles[k],
                });
            }
        }
    }
    Ok(IsolationReport {
        rules,
        bc_loss_diff,
        forbidden_pairs,
    })
}

fn rule_result(rule: IsolationRule, diff: f64, seq: &PackedSequence, pos: usize, perturbed: TokenRole) -> RuleResult {
    let passed = diff <= ISOLATION_TOL;
    RuleResult {
        rule,
        max_diff: diff,
        passed,
        leak: (!passed).then(|| Leak {
            query_role: seq.roles[pos],
            perturbed_role: perturbed,
            query_position: pos,
        }),
    }
}

/// Text dump of a mask: per-segment role run-lengths and the tile layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskDump {
    pub len: usize,
    pub block_size: usize,
    pub segments: Vec<Vec<(TokenRole, usize)>>,
    pub layout: BlockLayout,
}

impl MaskDump {
    pub fn new(seq: &PackedSequence, mask: &RoleMask, block_size: usize) -> Result<Self, MaskError> {
        let segments = seq
            .segment_ranges()
            .into_iter()
            .map(|range| {
                let mut runs: Vec<(TokenRole, usize)> = Vec::new();
                for &r in &seq.roles[range] {
                    match runs.last_mut() {
                        Some((role, n)) if *role == r => *n += 1,
                        _ => runs.push((r, 1)),
                    }
                }
                runs
            })
            .collect();
        Ok(Self {
            len: seq.len(),
            block_size,
            segments,
            layout: mask.block_layout(block_size)?,
        })
    }

    /// Role and segment metadata implied by the run-lengths (zero features).
    pub fn skeleton(&self, d_model: usize) -> PackedSequence {
        let mut roles = Vec::new();
        let mut segment_ids = Vec::new();
        let mut positions = Vec::new();
        for (seg, runs) in self.segments.iter().enumerate() {
            let mut p = 0;
            for &(role, n) in runs {
                for _ in 0..n {
                    roles.push(role);
                    segment_ids.push(seg);
                    positions.push(p);
                    p += 1;
                }
            }
        }
        let n = roles.len();
        PackedSequence {
            tokens: Array2::zeros((n, d_model)),
            targets: roles.iter().map(|&r| (r == TokenRole::ArAction).then_some(0)).collect(),
            roles,
            segment_ids,
            positions,
            sample_ids: (0..self.segments.len()).collect(),
        }
    }
}

impl fmt::Display for MaskDump {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "role-mask v1")?;
        writeln!(f, "len {}", self.len)?;
        writeln!(f, "block_size {}", self.block_size)?;
        for (i, runs) in self.segments.iter().enumerate() {
            let mut line = format!("segment {i}");
            for (role, n) in runs {
                let _ = write!(line, " {}{}", role.code(), n);
            }
            writeln!(f, "{line}")?;
        }
        for qb in 0..self.layout.num_blocks {
            let row: String = (0..self.layout.num_blocks)
                .map(|kb| self.layout.get(qb, kb).code())
                .collect();
            writeln!(f, "blocks {qb} {row}")?;
        }
        Ok(())
    }
}

impl FromStr for MaskDump {
    type Err = MaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = |line: usize, message: &str| MaskError::Parse {
            line,
            message: message.to_owned(),
        };
        let mut lines = s.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        match lines.next() {
            Some((_, "role-mask v1")) => {}
            _ => return Err(err(1, "missing 'role-mask v1' header")),
        }
        let mut field = |name: &str| -> Result<usize, MaskError> {
            let (no, line) = lines.next().ok_or_else(|| err(0, "truncated header"))?;
            line.strip_prefix(name)
                .and_then(|rest| rest.trim().parse().ok())
                .ok_or_else(|| err(no, &format!("expected '{name} <n>'")))
        };
        let len = field("len")?;
        let block_size = field("block_size")?;
        if block_size == 0 {
            return Err(err(3, "block_size must be >= 1"));
        }
        let mut segments = Vec::new();
        let mut rows: Vec<Vec<BlockStatus>> = Vec::new();
        for (no, line) in lines {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("segment") => {
                    let idx: usize = parts
                        .next()
                        .and_then(|p| p.parse().ok())
                        .ok_or_else(|| err(no, "bad segment index"))?;
                    if idx != segments.len() {
                        return Err(err(no, "segments out of order"));
                    }
                    let runs = parts
                        .map(|tok| {
                            let mut chars = tok.chars();
                            let role = chars.next().and_then(TokenRole::from_code);
                            let count = chars.as_str().parse::<usize>().ok();
                            role.zip(count).ok_or_else(|| err(no, &format!("bad run '{tok}'")))
                        })
                        .collect::<Result<Vec<_>, _>>()?;
                    segments.push(runs);
                }
                Some("blocks") => {
                    let idx: usize = parts
                        .next()
                        .and_then(|p| p.parse().ok())
                        .ok_or_else(|| err(no, "bad block row index"))?;
                    if idx != rows.len() {
                        return Err(err(no, "block rows out of order"));
                    }
                    let row = parts
                        .next()
                        .unwrap_or("")
                        .chars()
                        .map(|c| BlockStatus::from_code(c).ok_or_else(|| err(no, "bad block status")))
                        .collect::<Result<Vec<_>, _>>()?;
                    rows.push(row);
                }
                _ => return Err(err(no, "unknown record")),
            }
        }
        let num_blocks = len.div_ceil(block_size);
        if rows.len() != num_blocks || rows.iter().any(|r| r.len() != num_blocks) {
            return Err(err(0, "block layout does not match len / block_size"));
        }
        let total: usize = segments.iter().flatten().map(|(_, n)| n).sum();
        if total != len {
            return Err(err(0, "segment runs do not add up to len"));
        }
        Ok(Self {
            len,
            block_size,
            segments,
            layout: BlockLayout {
                block_size,
                len,
                num_blocks,
                status: rows.into_iter().flatten().collect(),
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub seq_lens: Vec<usize>,
    pub block_size: usize,
    pub warmup: usize,
    pub repeats: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_head: usize,
    /// Segments per packed sequence.
    pub segments: usize,
    pub seed: u64,
    /// Also time an all-permitted mask.
    pub include_all_permitted: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            seq_lens: vec![512, 1024, 2048, 4096],
            block_size: 64,
            warmup: 3,
            repeats: 5,
            d_model: 32,
            heads: 1,
            d_head: 16,
            segments: 4,
            seed: 0,
            include_all_permitted: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    #[serde(rename = "impl")]
    pub implementation: String,
    pub seq_len: usize,
    pub block_size: usize,
    pub median_ns: u128,
    pub skipped_fraction: f64,
}

/// Role counts of one benchmark segment of `len` tokens: 25% CRL tokens.
pub fn bench_segment_counts(len: usize) -> RoleCounts {
    let crl_action = len * 3 / 20;
    let crl_goal = len / 10;
    let instruction = len / 10;
    let ar_action = len / 5;
    RoleCounts {
        vision: len - crl_action - crl_goal - instruction - ar_action,
        instruction,
        ar_action,
        crl_action,
        crl_goal,
    }
}

/// A packed sequence of exactly `len` tokens split into `segments` samples.
pub fn bench_sequence(len: usize, segments: usize, d_model: usize, vocab: usize, seed: u64) -> PackedSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let segments = segments.clamp(1, len.max(1));
    let samples: Vec<SequenceSample> = (0..segments)
        .map(|s| {
            let part = len / segments + usize::from(s < len % segments);
            random_sequence_sample(&mut rng, bench_segment_counts(part), d_model, vocab)
        })
        .collect();
    let refs: Vec<&SequenceSample> = samples.iter().collect();
    let ids: Vec<usize> = (0..samples.len()).collect();
    PackedSequence::concat(&refs, &ids).expect("generated in order")
}

fn median_ns(mut samples: Vec<u128>) -> u128 {
    samples.sort_unstable();
    samples[samples.len() / 2]
}

fn time_it(warmup: usize, repeats: usize, mut f: impl FnMut()) -> u128 {
    for _ in 0..warmup {
        f();
    }
    median_ns(
        (0..repeats.max(1))
            .map(|_| {
                let start = Instant::now();
                f();
                start.elapsed().as_nanos()
            })
            .collect(),
    )
}

/// Median wall time of dense vs block-sparse attention per sequence length.
pub fn mask_bench(config: &BenchConfig) -> Result<Vec<TimingRecord>, MaskError> {
    if config.warmup < 3 {
        return Err(MaskError::Shape("benchmark needs at least 3 warmup iterations".into()));
    }
    let params = AttentionParams::random(config.d_model, config.heads, config.d_head, 16, config.seed);
    let mut records = Vec::new();
    for &n in &config.seq_lens {
        let seq = bench_sequence(n, config.segments, config.d_model, 16, config.seed ^ n as u64);
        let mut masks = vec![("", build_mask(&seq)?)];
        if config.include_all_permitted {
            masks.push(("_all_permitted", RoleMask::all_permitted(n)));
        }
        for (suffix, mask) in &masks {
            let layout = mask.block_layout(config.block_size)?;
            let dense = time_it(config.warmup, config.repeats, || {
                std::hint::black_box(dense_attention(&seq, mask, &params).expect("valid"));
            });
            let sparse = time_it(config.warmup, config.repeats, || {
                std::hint::black_box(block_sparse_with_layout(&seq, mask, &params, &layout).expect("valid"));
            });
            records.push(TimingRecord {
                implementation: format!("dense{suffix}"),
                seq_len: n,
                block_size: config.block_size,
                median_ns: dense,
                skipped_fraction: 0.0,
            });
            records.push(TimingRecord {
                implementation: format!("block_sparse{suffix}"),
                seq_len: n,
                block_size: config.block_size,
                median_ns: sparse,
                skipped_fraction: layout.skipped_fraction(),
            });
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use TokenRole::*;

    fn counts(v: usize, i: usize, a: usize, c: usize, g: usize) -> RoleCounts {
        RoleCounts {
            vision: v,
            instruction: i,
            ar_action: a,
            crl_action: c,
            crl_goal: g,
        }
    }

    fn seq_of(c: RoleCounts, seed: u64) -> PackedSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PackedSequence::single(&random_sequence_sample(&mut rng, c, 8, 5))
    }

    #[test]
    fn exactly_five_roles() {
        assert_eq!(TokenRole::ALL.len(), 5);
        for r in TokenRole::ALL {
            assert_eq!(TokenRole::from_code(r.code()), Some(r));
        }
    }

    #[test]
    fn role_rule_examples() {
        let seq = seq_of(counts(2, 2, 2, 2, 2), 1);
        let mask = build_mask(&seq).unwrap();
        let first = |role| seq.roles.iter().position(|&r| r == role).unwrap();
        let last = |role| seq.roles.iter().rposition(|&r| r == role).unwrap();
        for q in 0..seq.len() {
            if seq.roles[q] == ArAction {
                for k in 0..seq.len() {
                    if seq.roles[k] == CrlGoal {
                        assert!(!mask.allowed(q, k));
                    }
                }
            }
        }
        assert!(!mask.allowed(last(CrlAction), first(Instruction)));
        assert!(mask.allowed(last(CrlAction), first(VisionState)));
        assert!(!mask.allowed(last(CrlAction), first(ArAction)));
        assert!(mask.allowed(last(CrlGoal), first(CrlGoal)));
        assert!(!mask.allowed(last(CrlGoal), first(VisionState)));
        assert!(mask.allowed(last(ArAction), first(Instruction)));
        assert!(!mask.allowed(first(CrlGoal), last(CrlGoal)));
    }

    #[test]
    fn role_order_violation_names_position() {
        let tokens = Array2::zeros((3, 2));
        let err = SequenceSample::new(tokens, vec![VisionState, ArAction, Instruction], vec![0]).unwrap_err();
        assert!(matches!(err, MaskError::RoleOrder { position: 2, .. }));
    }

    #[test]
    fn single_token_attends_to_itself() {
        let s = SequenceSample::new(Array2::from_elem((1, 8), 0.3), vec![VisionState], vec![]).unwrap();
        let seq = PackedSequence::single(&s);
        let params = AttentionParams::random(8, 2, 4, 5, 3);
        let out = dense_attention(&seq, &build_mask(&seq).unwrap(), &params).unwrap();
        let expected = seq.tokens.dot(&params.wv).dot(&params.wo);
        for (a, b) in out.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn identical_keys_average_to_their_value() {
        let s = SequenceSample::new(Array2::from_elem((2, 8), -0.7), vec![VisionState, VisionState], vec![]).unwrap();
        let seq = PackedSequence::single(&s);
        let params = AttentionParams::random(8, 1, 4, 5, 5);
        let out = dense_attention(&seq, &build_mask(&seq).unwrap(), &params).unwrap();
        let value = seq.tokens.row(0).dot(&params.wv).dot(&params.wo);
        for (a, b) in out.row(1).iter().zip(value.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn fully_masked_row_is_rejected() {
        let seq = seq_of(counts(1, 1, 1, 1, 1), 2);
        let mut mask = build_mask(&seq).unwrap();
        for k in 0..seq.len() {
            mask.set(2, k, false);
        }
        let params = AttentionParams::random(8, 1, 4, 5, 5);
        assert!(matches!(dense_attention(&seq, &mask, &params), Err(MaskError::EmptyRow(2))));
        assert!(matches!(block_sparse_attention(&seq, &mask, &params, 2), Err(MaskError::EmptyRow(2))));
    }

    #[test]
    fn all_permitted_mask_matches_dense_exactly() {
        let seq = seq_of(counts(3, 2, 3, 2, 2), 4);
        let mask = RoleMask::all_permitted(seq.len());
        let params = AttentionParams::random(8, 2, 4, 5, 6);
        let dense = dense_attention(&seq, &mask, &params).unwrap();
        for bs in [1, 3, 64] {
            let (sparse, stats) = block_sparse_attention(&seq, &mask, &params, bs).unwrap();
            assert_eq!(stats.skipped_blocks, 0);
            let diff = (&dense - &sparse).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(diff < 1e-14, "{diff}");
        }
    }

    #[test]
    fn goal_block_touches_only_its_own_key_blocks() {
        // 12 leading tokens, then a CrlGoal block of 8 aligned to block size 4
        let seq = seq_of(counts(4, 2, 4, 2, 8), 7);
        let mask = build_mask(&seq).unwrap();
        let layout = mask.block_layout(4).unwrap();
        let goal_start = 12;
        for qb in goal_start / 4..seq.len() / 4 {
            let touched: Vec<usize> = (0..layout.num_blocks)
                .filter(|&kb| layout.get(qb, kb) != BlockStatus::Skip)
                .collect();
            assert!(touched.iter().all(|&kb| kb >= goal_start / 4));
            assert!(touched.len() <= 8usize.div_ceil(4));
        }
    }

    #[test]
    fn layout_reconstructs_dense_permission() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let samples: Vec<SequenceSample> = (0..3)
            .map(|_| {
                let c = RoleCounts::random(&mut rng, 4);
                random_sequence_sample(&mut rng, c, 4, 3)
            })
            .collect();
        let packs = pack(&samples, 100).unwrap();
        let mask = build_mask(&packs[0]).unwrap();
        for bs in [1, 2, 5, 16] {
            let layout = mask.block_layout(bs).unwrap();
            assert_eq!(layout.reconstruct(&mask), mask.as_slice());
        }
    }

    #[test]
    fn packing_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mk = |rng: &mut ChaCha8Rng, n: usize| random_sequence_sample(rng, counts(n - 4, 1, 1, 1, 1), 2, 3);
        let samples = vec![mk(&mut rng, 3000), mk(&mut rng, 1000), mk(&mut rng, 96)];
        let packs = pack(&samples, 4096).unwrap();
        assert_eq!(packs.len(), 1);
        assert_eq!(packs[0].len(), 4096);
        assert_eq!(packs[0].sample_ids, vec![0, 1, 2]);

        let single = pack(&samples[2..], 4096).unwrap();
        let alone = PackedSequence::single(&samples[2]);
        assert_eq!(build_mask(&single[0]).unwrap(), build_mask(&alone).unwrap());

        let err = pack(&samples, 2000).unwrap_err();
        assert!(matches!(err, MaskError::Oversize { index: 0, len: 3000, limit: 2000 }));
    }

    #[test]
    fn packing_leaves_per_sample_losses_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let samples: Vec<SequenceSample> = (0..6)
            .map(|_| {
                let c = RoleCounts::random(&mut rng, 4);
                random_sequence_sample(&mut rng, c, 8, 5)
            })
            .collect();
        let params = AttentionParams::random(8, 2, 4, 5, 22);
        assert!(packing_loss_diff(&samples, 40, &params).unwrap() <= 1e-12);
    }

    #[test]
    fn first_fit_reuses_earlier_bins() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mk = |rng: &mut ChaCha8Rng, n: usize| random_sequence_sample(rng, counts(n - 1, 0, 1, 0, 0), 2, 3);
        let samples = vec![mk(&mut rng, 6), mk(&mut rng, 6), mk(&mut rng, 3)];
        let packs = pack(&samples, 10).unwrap();
        assert_eq!(packs.len(), 2);
        assert_eq!(packs[0].sample_ids, vec![0, 2]);
        assert_eq!(packs[1].sample_ids, vec![1]);
    }

    #[test]
    fn instruction_blindness_is_exact_with_integer_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = counts(3, 3, 2, 3, 2);
        let roles = c.roles();
        let tokens = Array2::from_shape_fn((roles.len(), 4), |_| f64::from(rng.random_range(-3i32..=3)));
        let s = SequenceSample::new(tokens, roles, vec![0, 1]).unwrap();
        let seq = PackedSequence::single(&s);
        let params = AttentionParams::integer_valued(4, 1, 2, 3, 12);
        let report = isolation_check(&seq, &params, 13).unwrap();
        assert_eq!(report.rules[0].max_diff, 0.0);
        assert!(report.passed());
    }

    #[test]
    fn extra_permitted_pair_is_caught_and_named() {
        let seq = seq_of(counts(2, 2, 2, 3, 2), 14);
        let mut mask = build_mask(&seq).unwrap();
        let q = seq.roles.iter().rposition(|&r| r == CrlAction).unwrap();
        let k = seq.roles.iter().position(|&r| r == Instruction).unwrap();
        mask.set(q, k, true);
        let params = AttentionParams::random(8, 2, 4, 5, 15);
        let report = isolation_check_with_mask(&seq, &mask, &params, 16).unwrap();
        assert!(!report.passed());
        let leak = report.rules[0].leak.expect("rule (a) must fail");
        assert_eq!(leak.query_role, CrlAction);
        assert_eq!(leak.perturbed_role, Instruction);
        assert_eq!(leak.query_position, q);
        assert_eq!(
            report.forbidden_pairs,
            vec![ForbiddenPair { query: q, key: k, query_role: CrlAction, key_role: Instruction }]
        );
    }

    #[test]
    fn ar_action_seeing_crl_goal_breaks_rule_c() {
        let seq = seq_of(counts(2, 1, 2, 2, 2), 17);
        let mut mask = build_mask(&seq).unwrap();
        let q = seq.roles.iter().rposition(|&r| r == ArAction).unwrap();
        let k = seq.roles.iter().position(|&r| r == CrlGoal).unwrap();
        mask.set(q, k, true);
        let params = AttentionParams::random(8, 1, 4, 5, 18);
        let report = isolation_check_with_mask(&seq, &mask, &params, 19).unwrap();
        let rule_c = &report.rules[2];
        assert!(!rule_c.passed);
        let leak = rule_c.leak.unwrap();
        assert_eq!((leak.query_role, leak.perturbed_role), (ArAction, CrlGoal));
        assert!(report.bc_loss_diff > ISOLATION_TOL);
    }

    #[test]
    fn dump_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let samples: Vec<SequenceSample> = (0..3)
            .map(|_| {
                let c = RoleCounts::random(&mut rng, 3);
                random_sequence_sample(&mut rng, c, 4, 3)
            })
            .collect();
        let seq = pack(&samples, 200).unwrap().remove(0);
        let mask = build_mask(&seq).unwrap();
        let dump = MaskDump::new(&seq, &mask, 4).unwrap();
        let text = dump.to_string();
        let parsed: MaskDump = text.parse().unwrap();
        assert_eq!(parsed, dump);
        let rebuilt = build_mask(&parsed.skeleton(4)).unwrap();
        assert_eq!(rebuilt.block_layout(4).unwrap(), dump.layout);
        assert!("role-mask v2\n".parse::<MaskDump>().is_err());
    }

    #[test]
    fn bench_rejects_short_warmup() {
        let cfg = BenchConfig { warmup: 2, ..BenchConfig::default() };
        assert!(mask_bench(&cfg).is_err());
    }

    #[test]
    fn bench_sequences_have_a_quarter_crl_tokens() {
        let seq = bench_sequence(512, 4, 8, 4, 1);
        assert_eq!(seq.len(), 512);
        let crl = seq.roles.iter().filter(|r| r.is_crl()).count();
        assert!((crl as f64 / 512.0 - 0.25).abs() < 0.02, "{crl}");
    }
}
