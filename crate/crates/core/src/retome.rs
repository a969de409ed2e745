//! Recursive cross-frame token merging for self-attention.
//!
//! Token batches are `[N, L, E]` tensors (frames x tokens-per-frame x
//! embedding); a token's global index is `frame * L + position`. One merge
//! level partitions frames into a `dst` set (every `stride`-th frame from a
//! random anchor) and a `src` set, matches each src token to its most
//! cosine-similar token in the dst pool, and drops the `r` best-matched src
//! tokens so they share their linked dst token's attention output. Levels
//! recurse on the dst frames, widening the pool with previously unmerged src
//! tokens, until a single frame remains. Unmerging replays the levels in
//! reverse, copying each surviving token's output back to every position
//! merged into it.
//!
//! The recursive pipeline keeps survivors in ascending global-index order at
//! every level, so a ratio of zero is bit-identical to no merging at all. The
//! single-level [`merge`]/[`unmerge`] pair instead uses the documented
//! canonical order: dst block first, then unmerged src by global index.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Real, Tensor};

/// One selected merge edge between global token indices.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MergeEdge {
    pub src: usize,
    pub dst: usize,
    pub similarity: f64,
}

/// Matching map: up to `r` src-to-dst edges, distinct src, repeatable dst.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct MatchMap {
    pub edges: Vec<MergeEdge>,
}

impl MatchMap {
    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    fn dst_of(&self, src: usize) -> Option<usize> {
        self.edges.iter().find(|e| e.src == src).map(|e| e.dst)
    }
}

/// One level of a recursive merge: which frames were dst/src, the matching,
/// the dst pool it matched against, and the survivor layouts before/after.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MergeLevel {
    pub dst_frames: Vec<usize>,
    pub src_frames: Vec<usize>,
    pub matches: MatchMap,
    /// Global ids the src tokens were matched against: dst-frame tokens plus
    /// all previously unmerged src tokens.
    pub pool: Vec<usize>,
    /// Surviving global ids entering this level, ascending.
    pub input_layout: Vec<usize>,
    /// Surviving global ids leaving this level, ascending.
    pub output_layout: Vec<usize>,
}

/// Ordered stack of merge levels; enough to replay the merge exactly and to
/// unmerge in reverse order.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MergePlan {
    pub n_frames: usize,
    pub tokens_per_frame: usize,
    pub levels: Vec<MergeLevel>,
    pub final_token_count: usize,
}

impl MergePlan {
    /// Plan that merges nothing (also used for single-frame batches).
    pub fn identity(n_frames: usize, tokens_per_frame: usize) -> Self {
        MergePlan {
            n_frames,
            tokens_per_frame,
            levels: Vec::new(),
            final_token_count: n_frames * tokens_per_frame,
        }
    }

    pub fn total_tokens(&self) -> usize {
        self.n_frames * self.tokens_per_frame
    }

    pub fn merged_edges(&self) -> usize {
        self.levels.iter().map(|lv| lv.matches.len()).sum()
    }

    /// Surviving global ids after all levels, ascending.
    pub fn final_layout(&self) -> Vec<usize> {
        match self.levels.last() {
            Some(lv) => lv.output_layout.clone(),
            None => (0..self.total_tokens()).collect(),
        }
    }

    /// Per-level gather rows mapping the previous layout onto this level's
    /// survivors: `out[i] = in[rows[i]]`.
    pub fn merge_row_indices(&self) -> Vec<Vec<usize>> {
        self.levels
            .iter()
            .map(|lv| {
                lv.output_layout
                    .iter()
                    .map(|id| position_of(&lv.input_layout, *id))
                    .collect()
            })
            .collect()
    }

    /// Per-level gather rows that undo the matching levels in reverse order:
    /// a merged src position reads from its linked dst token's slot.
    pub fn unmerge_row_indices(&self) -> Vec<Vec<usize>> {
        self.levels
            .iter()
            .rev()
            .map(|lv| {
                lv.input_layout
                    .iter()
                    .map(|id| {
                        let target = match lv.output_layout.binary_search(id) {
                            Ok(_) => *id,
                            Err(_) => lv
                                .matches
                                .dst_of(*id)
                                .expect("merged id must carry an edge"),
                        };
                        position_of(&lv.output_layout, target)
                    })
                    .collect()
            })
            .collect()
    }
}

fn position_of(layout: &[usize], id: usize) -> usize {
    layout
        .binary_search(&id)
        .unwrap_or_else(|_| panic!("token {id} not present in layout"))
}

/// Split `[0, frame_count)` into dst = {g, g+stride, ...} for a uniformly
/// random anchor g in `[0, stride)`, src = the complement.
pub fn partition<R: Rng>(
    frame_count: usize,
    stride: usize,
    rng: &mut R,
) -> (Vec<usize>, Vec<usize>) {
    assert!(frame_count >= 2, "partition needs at least two frames");
    assert!(
        stride >= 1 && stride < frame_count,
        "stride must satisfy 1 <= B < frame_count"
    );
    let g = rng.gen_range(0..stride);
    partition_anchored(frame_count, stride, g)
}

/// Deterministic form of [`partition`] with an explicit anchor.
pub fn partition_anchored(
    frame_count: usize,
    stride: usize,
    anchor: usize,
) -> (Vec<usize>, Vec<usize>) {
    assert!(anchor < frame_count, "anchor out of range");
    let dst: Vec<usize> = (anchor..frame_count).step_by(stride.max(1)).collect();
    let src: Vec<usize> = (0..frame_count).filter(|f| !dst.contains(f)).collect();
    (dst, src)
}

/// Match each src token to its most cosine-similar pool token and keep the
/// `r` highest-similarity edges. Ties break toward the lower src index, then
/// the lower dst index.
pub fn match_tokens<S: Real>(
    tokens: &Tensor<S>,
    src_ids: &[usize],
    pool_ids: &[usize],
    r: usize,
) -> MatchMap {
    assert!(r <= src_ids.len(), "requested {r} edges from {} src tokens", src_ids.len());
    assert!(!pool_ids.is_empty(), "empty dst pool");
    if r == 0 {
        return MatchMap::default();
    }
    let dim = *tokens.shape().last().unwrap();
    let rows = tokens.numel() / dim;
    let token = |id: usize| -> &[S] {
        assert!(id < rows, "token id {id} out of {rows}");
        &tokens.data()[id * dim..(id + 1) * dim]
    };
    let norm = |v: &[S]| -> f64 {
        let mut acc = 0f64;
        for &x in v {
            let x = x.to_f64();
            acc += x * x;
        }
        acc.sqrt().max(1e-12)
    };
    let pool_norms: Vec<f64> = pool_ids.iter().map(|&id| norm(token(id))).collect();

    let mut candidates: Vec<MergeEdge> = Vec::with_capacity(src_ids.len());
    for &src in src_ids {
        let sv = token(src);
        let sn = norm(sv);
        let mut best_sim = f64::NEG_INFINITY;
        let mut best_dst = usize::MAX;
        for (&dst, &dn) in pool_ids.iter().zip(pool_norms.iter()) {
            let dv = token(dst);
            let mut dot = 0f64;
            for (&a, &b) in sv.iter().zip(dv.iter()) {
                dot += a.to_f64() * b.to_f64();
            }
            let sim = dot / (sn * dn);
            if sim > best_sim || (sim == best_sim && dst < best_dst) {
                best_sim = sim;
                best_dst = dst;
            }
        }
        candidates.push(MergeEdge { src, dst: best_dst, similarity: best_sim });
    }
    candidates.sort_by(|a, b| {
        b.similarity
            .partial_cmp(&a.similarity)
            .expect("similarities are finite")
            .then(a.src.cmp(&b.src))
            .then(a.dst.cmp(&b.dst))
    });
    candidates.truncate(r);
    MatchMap { edges: candidates }
}

/// Single-level merge. Survivors in canonical order: all dst-frame tokens by
/// global index, then unmerged src tokens by global index. Returns the
/// compressed tokens and their global-id layout.
pub fn merge<S: Real>(
    tokens: &Tensor<S>,
    dst_frames: &[usize],
    src_frames: &[usize],
    mm: &MatchMap,
) -> (Tensor<S>, Vec<usize>) {
    let (n, l, e) = batch_dims(tokens);
    debug_assert_eq!(dst_frames.len() + src_frames.len(), n);
    let merged: Vec<usize> = mm.edges.iter().map(|ed| ed.src).collect();
    let mut layout: Vec<usize> = Vec::with_capacity(n * l - merged.len());
    for &f in dst_frames {
        layout.extend(f * l..(f + 1) * l);
    }
    let mut src_ids: Vec<usize> = src_frames.iter().flat_map(|&f| f * l..(f + 1) * l).collect();
    src_ids.retain(|id| !merged.contains(id));
    layout.extend(src_ids);
    let out = gather_rows_tensor(tokens, &layout, e);
    (out, layout)
}

/// Single-level unmerge: every merged src position receives a copy of its
/// linked dst token's output. `outputs` must be in the canonical order
/// produced by [`merge`].
pub fn unmerge<S: Real>(
    outputs: &Tensor<S>,
    layout: &[usize],
    mm: &MatchMap,
    n_frames: usize,
    tokens_per_frame: usize,
) -> Tensor<S> {
    let e = *outputs.shape().last().unwrap();
    assert_eq!(
        outputs.numel() / e,
        layout.len(),
        "outputs do not match the merge layout"
    );
    let total = n_frames * tokens_per_frame;
    let mut pos_of = vec![usize::MAX; total];
    for (i, &id) in layout.iter().enumerate() {
        pos_of[id] = i;
    }
    let rows: Vec<usize> = (0..total)
        .map(|id| {
            if pos_of[id] != usize::MAX {
                pos_of[id]
            } else {
                let dst = mm.dst_of(id).expect("merged id must carry an edge");
                assert!(pos_of[dst] != usize::MAX, "edge dst must survive the level");
                pos_of[dst]
            }
        })
        .collect();
    gather_rows_tensor(outputs, &rows, e).reshape(&[n_frames, tokens_per_frame, e])
}

/// Recursive merge with anchors drawn from `rng` (one per level). Returns the
/// compressed tokens (ascending global-id order) and the full plan.
pub fn recursive_merge<S: Real, R: Rng>(
    tokens: &Tensor<S>,
    ratio: f64,
    stride: usize,
    rng: &mut R,
) -> (Tensor<S>, MergePlan) {
    let plan = build_merge_plan(tokens, ratio, stride, rng);
    let e = *tokens.shape().last().unwrap();
    let compressed = gather_rows_tensor(tokens, &plan.final_layout(), e);
    (compressed, plan)
}

/// Plan construction only; token values are never modified, so all levels
/// match against the original batch values.
pub fn build_merge_plan<S: Real, R: Rng>(
    tokens: &Tensor<S>,
    ratio: f64,
    stride: usize,
    rng: &mut R,
) -> MergePlan {
    let (n, l, _e) = batch_dims(tokens);
    assert!((0.0..=1.0).contains(&ratio), "merge ratio must be in [0, 1]");
    assert!(stride >= 1, "stride must be positive");
    let mut plan = MergePlan::identity(n, l);
    let mut frames: Vec<usize> = (0..n).collect();
    let mut unmerged_pool: Vec<usize> = Vec::new();
    let mut survivors: Vec<usize> = (0..n * l).collect();

    while frames.len() >= 2 {
        // With fewer frames than the stride, the anchor is clamped so the
        // dst set is the single anchored frame and recursion terminates.
        let anchor_range = stride.min(frames.len());
        let g = rng.gen_range(0..anchor_range);
        let (dst_pos, src_pos) = partition_anchored(frames.len(), stride, g);
        let dst_frames: Vec<usize> = dst_pos.iter().map(|&i| frames[i]).collect();
        let src_frames: Vec<usize> = src_pos.iter().map(|&i| frames[i]).collect();

        let src_ids: Vec<usize> = src_frames.iter().flat_map(|&f| f * l..(f + 1) * l).collect();
        let mut pool: Vec<usize> = dst_frames.iter().flat_map(|&f| f * l..(f + 1) * l).collect();
        pool.extend_from_slice(&unmerged_pool);
        pool.sort_unstable();

        let r = (ratio * src_ids.len() as f64).floor() as usize;
        let mm = match_tokens(tokens, &src_ids, &pool, r);

        let input_layout = survivors.clone();
        let merged: Vec<usize> = mm.edges.iter().map(|ed| ed.src).collect();
        survivors.retain(|id| !merged.contains(id));
        let output_layout = survivors.clone();

        unmerged_pool.extend(src_ids.iter().filter(|id| !merged.contains(id)));
        plan.levels.push(MergeLevel {
            dst_frames: dst_frames.clone(),
            src_frames,
            matches: mm,
            pool,
            input_layout,
            output_layout,
        });
        frames = dst_frames;
    }
    plan.final_token_count = n * l - plan.merged_edges();
    debug_assert_eq!(plan.final_token_count, survivors.len());
    plan
}

/// Undo a recursive merge level by level, deepest first. Restores the full
/// `[N, L, E]` batch; positions never touched by an edge are copied through
/// unchanged.
pub fn recursive_unmerge<S: Real>(outputs: &Tensor<S>, plan: &MergePlan) -> Tensor<S> {
    let e = *outputs.shape().last().unwrap();
    assert_eq!(
        outputs.numel() / e,
        plan.final_token_count,
        "outputs do not match the plan's survivor layout"
    );
    let mut current = outputs.clone();
    for rows in plan.unmerge_row_indices() {
        current = gather_rows_tensor(&current, &rows, e);
    }
    current.reshape(&[plan.n_frames, plan.tokens_per_frame, e])
}

fn batch_dims<S: Real>(tokens: &Tensor<S>) -> (usize, usize, usize) {
    assert_eq!(tokens.shape().len(), 3, "token batch must be [N, L, E]");
    let (n, l, e) = (tokens.shape()[0], tokens.shape()[1], tokens.shape()[2]);
    assert!(n >= 1 && l >= 1 && e >= 1);
    (n, l, e)
}

fn gather_rows_tensor<S: Real>(tokens: &Tensor<S>, rows: &[usize], e: usize) -> Tensor<S> {
    let src = tokens.data();
    let mut data = Vec::with_capacity(rows.len() * e);
    for &r in rows {
        data.extend_from_slice(&src[r * e..(r + 1) * e]);
    }
    Tensor::new(vec![rows.len(), e], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch(n: usize, l: usize, e: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::rand_uniform(&[n, l, e], -1.0, 1.0, &mut rng)
    }

    #[test]
    fn partition_arithmetic_progressions() {
        assert_eq!(
            partition_anchored(8, 2, 1),
            (vec![1, 3, 5, 7], vec![0, 2, 4, 6])
        );
        assert_eq!(
            partition_anchored(8, 2, 0),
            (vec![0, 2, 4, 6], vec![1, 3, 5, 7])
        );
        // Single-frame dst ends recursion immediately.
        assert_eq!(
            partition_anchored(6, 4, 3),
            (vec![3], vec![0, 1, 2, 4, 5])
        );
    }

    #[test]
    fn partition_is_seed_deterministic() {
        let a = partition(8, 3, &mut ChaCha8Rng::seed_from_u64(42));
        let b = partition(8, 3, &mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(a, b);
    }

    #[test]
    #[should_panic(expected = "stride must satisfy")]
    fn partition_rejects_large_stride() {
        let _ = partition(4, 4, &mut ChaCha8Rng::seed_from_u64(0));
    }

    #[test]
    fn match_orthogonal_pairs() {
        // src = {(1,0), (0,1)}, dst = {(2,0), (0,3)}: each src matches the
        // parallel dst with cosine 1.0.
        let tokens = Tensor::<f32>::from_f64(
            &[2, 2, 2],
            &[1.0, 0.0, 0.0, 1.0, 2.0, 0.0, 0.0, 3.0],
        );
        let mm = match_tokens(&tokens, &[0, 1], &[2, 3], 2);
        assert_eq!(mm.len(), 2);
        assert_eq!(mm.dst_of(0), Some(2));
        assert_eq!(mm.dst_of(1), Some(3));
        for e in &mm.edges {
            assert!((e.similarity - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn match_keeps_highest_similarity_edge() {
        // src0 = (1,0) matches dst exactly; src1 = (0.9,0.1) is close but
        // loses the single slot.
        let tokens = Tensor::<f32>::from_f64(&[3, 1, 2], &[1.0, 0.0, 0.9, 0.1, 1.0, 0.0]);
        let mm = match_tokens(&tokens, &[0, 1], &[2], 1);
        assert_eq!(mm.len(), 1);
        assert_eq!(mm.edges[0].src, 0);
        assert_eq!(mm.edges[0].dst, 2);
        assert!((mm.edges[0].similarity - 1.0).abs() < 1e-9);
    }

    #[test]
    fn match_r_zero_is_empty() {
        let tokens = batch(2, 2, 4, 1);
        let mm = match_tokens(&tokens, &[0, 1], &[2, 3], 0);
        assert!(mm.is_empty());
    }

    #[test]
    fn merge_r_zero_is_full_input_in_canonical_order() {
        let tokens = batch(2, 2, 3, 2);
        let (out, layout) = merge(&tokens, &[1], &[0], &MatchMap::default());
        assert_eq!(layout, vec![2, 3, 0, 1]);
        assert_eq!(out.shape(), &[4, 3]);
        // dst block first: rows 2,3 then src rows 0,1.
        assert_eq!(&out.data()[..3], &tokens.data()[6..9]);
    }

    #[test]
    fn merge_two_frames_one_edge_counts() {
        let tokens = batch(2, 2, 3, 3);
        let mm = match_tokens(&tokens, &[0, 1], &[2, 3], 1);
        let (out, layout) = merge(&tokens, &[1], &[0], &mm);
        assert_eq!(out.shape()[0], 3, "4 tokens - 1 edge = 3 survivors");
        assert_eq!(layout.len(), 3);
    }

    #[test]
    fn first_level_edge_count_formula() {
        // N=8, L=16, N_d1=4, p=0.5: r1 = 0.5 * (8-4) * 16 = 32, survivors 96.
        let tokens = batch(8, 16, 4, 4);
        let (dst, src) = partition_anchored(8, 2, 1);
        let src_ids: Vec<usize> = src.iter().flat_map(|&f| f * 16..(f + 1) * 16).collect();
        let pool: Vec<usize> = dst.iter().flat_map(|&f| f * 16..(f + 1) * 16).collect();
        let r = (0.5 * src_ids.len() as f64).floor() as usize;
        assert_eq!(r, 32);
        let mm = match_tokens(&tokens, &src_ids, &pool, r);
        let (out, _) = merge(&tokens, &dst, &src, &mm);
        assert_eq!(out.shape()[0], 96);
    }

    #[test]
    fn unmerge_r_zero_is_identity() {
        let tokens = batch(2, 2, 3, 5);
        let (out, layout) = merge(&tokens, &[1], &[0], &MatchMap::default());
        let back = unmerge(&out, &layout, &MatchMap::default(), 2, 2);
        assert_eq!(back, tokens.clone().reshape(&[2, 2, 3]));
    }

    #[test]
    fn unmerge_replacement_semantics() {
        // 2 frames x 2 tokens, one edge, attention replaced by identity: the
        // merged src slot holds its dst token's value, all others unchanged.
        let tokens = batch(2, 2, 3, 6);
        let mm = match_tokens(&tokens, &[0, 1], &[2, 3], 1);
        let (out, layout) = merge(&tokens, &[1], &[0], &mm);
        let back = unmerge(&out, &layout, &mm, 2, 2);
        let e = mm.edges[0].clone();
        for id in 0..4 {
            let got = &back.data()[id * 3..(id + 1) * 3];
            let want_id = if id == e.src { e.dst } else { id };
            let want = &tokens.data()[want_id * 3..(want_id + 1) * 3];
            assert_eq!(got, want, "token {id}");
        }
    }

    #[test]
    fn recursive_levels_and_counts_8_frames() {
        // N=8, B=2, p=0.5, L=16: levels 8->4->2->1, r = {32, 16, 8}, 72 left.
        let tokens = batch(8, 16, 4, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (out, plan) = recursive_merge(&tokens, 0.5, 2, &mut rng);
        assert_eq!(plan.levels.len(), 3);
        let rs: Vec<usize> = plan.levels.iter().map(|lv| lv.matches.len()).collect();
        assert_eq!(rs, vec![32, 16, 8]);
        assert_eq!(plan.final_token_count, 72);
        assert_eq!(out.shape(), &[72, 4]);
        assert_eq!(plan.levels.last().unwrap().dst_frames.len(), 1);
        // Level k+1's frames are exactly level k's dst frames.
        for w in plan.levels.windows(2) {
            let mut next: Vec<usize> = w[1].dst_frames.clone();
            next.extend_from_slice(&w[1].src_frames);
            next.sort_unstable();
            assert_eq!(next, w[0].dst_frames);
        }
    }

    #[test]
    fn recursive_p_zero_is_identity() {
        let tokens = batch(4, 4, 3, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (out, plan) = recursive_merge(&tokens, 0.0, 2, &mut rng);
        assert!(plan.levels.iter().all(|lv| lv.matches.is_empty()));
        assert_eq!(out.data(), tokens.data());
        let back = recursive_unmerge(&out, &plan);
        assert_eq!(back, tokens);
    }

    #[test]
    fn recursive_two_frames_single_level() {
        let tokens = batch(2, 8, 4, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (_, plan) = recursive_merge(&tokens, 0.5, 2, &mut rng);
        assert_eq!(plan.levels.len(), 1);
        assert_eq!(plan.levels[0].matches.len(), 4);
    }

    #[test]
    fn plans_are_seed_deterministic() {
        let tokens = batch(8, 4, 4, 11);
        let (_, p1) = recursive_merge(&tokens, 0.5, 2, &mut ChaCha8Rng::seed_from_u64(5));
        let (_, p2) = recursive_merge(&tokens, 0.5, 2, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(p1, p2);
    }

    /// Brute-force oracle: follow merge edges transitively to the surviving
    /// token that each position's output must equal under identity attention.
    fn resolve_closure(plan: &MergePlan, id: usize) -> usize {
        let mut cur = id;
        for lv in &plan.levels {
            if let Some(d) = lv.matches.dst_of(cur) {
                cur = d;
            }
        }
        cur
    }

    #[test]
    fn unmerge_matches_transitive_closure_oracle() {
        for (case, (n, l)) in [(2usize, 4usize), (4, 4), (4, 16), (8, 4), (8, 16)]
            .into_iter()
            .enumerate()
        {
            for p in [0.25, 0.5, 0.75, 1.0] {
                let tokens = batch(n, l, 5, 100 + case as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(200 + case as u64);
                let (compressed, plan) = recursive_merge(&tokens, p, 2, &mut rng);
                // Identity attention: outputs are the surviving inputs.
                let restored = recursive_unmerge(&compressed, &plan);
                for id in 0..n * l {
                    let want_id = resolve_closure(&plan, id);
                    let got = &restored.data()[id * 5..(id + 1) * 5];
                    let want = &tokens.data()[want_id * 5..(want_id + 1) * 5];
                    assert_eq!(got, want, "n={n} l={l} p={p} id={id}");
                }
            }
        }
    }

    #[test]
    fn merge_plan_roundtrips_through_json() {
        let tokens = batch(4, 4, 3, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (_, plan) = recursive_merge(&tokens, 0.5, 2, &mut rng);
        let text = serde_json::to_string(&plan).unwrap();
        let back: MergePlan = serde_json::from_str(&text).unwrap();
        assert_eq!(back, plan);
    }
}
