//! Divided attention over multi-view patch tokens: intra-view (patches of one
//! view attend to each other) and inter-view (the same patch index attends
//! across views), both pre-norm with a residual path.

use std::cell::Cell;

use rand::Rng;

use crate::diffkit::{Bound, DiffError, ParamStore, Tensor, Var};
use crate::nn::{expand_mask, FeedForward, LayerNorm, Linear};

thread_local! {
    static SCORE_ENTRIES: Cell<u64> = const { Cell::new(0) };
}

/// Attention score entries (query-key pairs, summed over groups, one head's
/// worth) computed on this thread since start. Single-slot groups need no
/// scores and are not counted.
pub fn score_entries() -> u64 {
    SCORE_ENTRIES.with(|c| c.get())
}

/// Multi-head self-attention with pre-LayerNorm. Projections carry no bias,
/// so zero projection weights make the layer an exact identity.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub norm: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    /// Mix values with order-free fixed-point sums, which makes the output
    /// independent of slot order bit for bit. Slower for long sequences.
    pub exact_mixing: bool,
}

impl AttentionParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "dim {dim} not divisible by {heads} heads");
        let lin = |store: &mut ParamStore, part: &str, rng: &mut R| Linear::new(store, &format!("{name}.{part}"), dim, dim, false, rng);
        Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
            query: lin(store, "q", rng),
            key: lin(store, "k", rng),
            value: lin(store, "v", rng),
            out: lin(store, "o", rng),
            heads,
            exact_mixing: true,
        }
    }

    pub fn zero(&self, store: &mut ParamStore) {
        for l in [&self.query, &self.key, &self.value, &self.out] {
            l.zero(store);
        }
    }
}

/// Self-attention within each group of `x: [G, L, dim]`; `keep` has one flag
/// per `(group, slot)`. Masked slots are neither attended to nor updated, and
/// a group with no kept slot is returned unchanged. Also returns the
/// attention weights `[G, heads, L, L]`.
pub fn attend<'t>(p: &Bound<'_, 't>, a: &AttentionParams, x: Var<'t>, keep: &[bool]) -> Result<(Var<'t>, Var<'t>), DiffError> {
    let tape = p.tape();
    let shape = x.shape();
    let (g, l, dim) = (shape[0], shape[1], shape[2]);
    let (h, hd) = (a.heads, dim / a.heads);
    if l > 1 {
        SCORE_ENTRIES.with(|c| c.set(c.get() + (g * l * l) as u64));
    }

    let xn = a.norm.forward(p, x)?;
    let split = |v: Var<'t>| v.reshape(&[g, l, h, hd])?.permute(&[0, 2, 1, 3]);
    let q = split(a.query.forward(p, xn)?)?;
    let k = split(a.key.forward(p, xn)?)?;
    let v = split(a.value.forward(p, xn)?)?;
    let scores = q.matmul(k.transpose_last2()?)?.scale(1.0 / (hd as f64).sqrt());

    let mut flags = Vec::with_capacity(g * h * l * l);
    for gi in 0..g {
        let row = &keep[gi * l..(gi + 1) * l];
        for _ in 0..h * l {
            flags.extend_from_slice(row);
        }
    }
    let weights = scores.masked_softmax(3, Some(&flags))?;
    let mixed = if a.exact_mixing { weights.matmul_exact(v)? } else { weights.matmul(v)? };
    let mixed = mixed.permute(&[0, 2, 1, 3])?.reshape(&[g, l, dim])?;
    let update = a.out.forward(p, mixed)?;
    let gate = tape.constant(expand_mask(keep, dim).reshaped(&[g, l, dim])?);
    Ok((x.add(update.mul(gate)?)?, weights))
}

fn check_grid(x: &Var<'_>, valid: &[bool]) -> Result<[usize; 4], DiffError> {
    let s = x.shape();
    if s.len() != 4 || valid.len() != s[0] * s[1] * s[2] {
        return Err(DiffError::Shape {
            op: "se_attention",
            detail: format!("features {s:?} with {} mask flags", valid.len()),
        });
    }
    Ok([s[0], s[1], s[2], s[3]])
}

/// Attention over the `N` patches of each view of `x: [B, V, N, dim]`.
pub fn intra_view_attention<'t>(p: &Bound<'_, 't>, a: &AttentionParams, x: Var<'t>, valid: &[bool]) -> Result<Var<'t>, DiffError> {
    let [b, v, n, d] = check_grid(&x, valid)?;
    let (y, _) = attend(p, a, x.reshape(&[b * v, n, d])?, valid)?;
    y.reshape(&[b, v, n, d])
}

/// Attention over the `V` views at each patch index of `x: [B, V, N, dim]`.
pub fn inter_view_attention<'t>(p: &Bound<'_, 't>, a: &AttentionParams, x: Var<'t>, valid: &[bool]) -> Result<Var<'t>, DiffError> {
    let [b, v, n, d] = check_grid(&x, valid)?;
    let xt = x.permute(&[0, 2, 1, 3])?.reshape(&[b * n, v, d])?;
    let mut keep = Vec::with_capacity(valid.len());
    for bi in 0..b {
        for ni in 0..n {
            keep.extend((0..v).map(|vi| valid[(bi * v + vi) * n + ni]));
        }
    }
    let (y, _) = attend(p, a, xt, &keep)?;
    y.reshape(&[b, n, v, d])?.permute(&[0, 2, 1, 3])
}

/// Joint attention over all `V * N` tokens of each batch element; the
/// unfactorized baseline.
pub fn joint_attention<'t>(p: &Bound<'_, 't>, a: &AttentionParams, x: Var<'t>, valid: &[bool]) -> Result<Var<'t>, DiffError> {
    let [b, v, n, d] = check_grid(&x, valid)?;
    let (y, _) = attend(p, a, x.reshape(&[b, v * n, d])?, valid)?;
    y.reshape(&[b, v, n, d])
}

/// Intra-view attention, then inter-view attention, then a feed-forward
/// layer, each with its own residual.
#[derive(Debug, Clone)]
pub struct SeBlock {
    pub intra: AttentionParams,
    pub inter: AttentionParams,
    pub ffn: FeedForward,
}

impl SeBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            intra: AttentionParams::new(store, &format!("{name}.intra"), dim, heads, rng),
            inter: AttentionParams::new(store, &format!("{name}.inter"), dim, heads, rng),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, 2 * dim, rng),
        }
    }

    pub fn zero(&self, store: &mut ParamStore) {
        self.intra.zero(store);
        self.inter.zero(store);
        self.ffn.zero(store);
    }
}

pub fn se_block<'t>(p: &Bound<'_, 't>, blk: &SeBlock, x: Var<'t>, valid: &[bool]) -> Result<Var<'t>, DiffError> {
    let [b, v, n, d] = check_grid(&x, valid)?;
    let x = intra_view_attention(p, &blk.intra, x, valid)?;
    let x = inter_view_attention(p, &blk.inter, x, valid)?;
    let gate = p.tape().constant(expand_mask(valid, d).reshaped(&[b, v, n, d])?);
    let y = blk.ffn.forward(p, x)?;
    x.add(y.sub(x)?.mul(gate)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    Divided,
    Joint,
}

/// Multiply-accumulates of the score (`QK^T`) and mixing (`AV`) stages for
/// one batch element with `views` views of `patches` tokens at width `dim`.
/// A single view needs no cross-view scores.
pub fn flops_estimate(views: u64, patches: u64, dim: u64, mode: AttentionMode) -> u64 {
    let cross = if views > 1 { patches * views * views } else { 0 };
    let pairs = match mode {
        AttentionMode::Divided => views * patches * patches + cross,
        AttentionMode::Joint => (views * patches) * (views * patches),
    };
    2 * pairs * dim
}

/// Measured cost of one forward pass of divided (intra then inter) and joint
/// attention over the same random `[1, V, N, dim]` tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBench {
    pub views: usize,
    pub patches: usize,
    pub dim: usize,
    pub divided_entries: u64,
    pub joint_entries: u64,
    /// Best of the repetitions, seconds.
    pub divided_secs: f64,
    pub joint_secs: f64,
}

pub fn bench_attention(views: usize, patches: usize, dim: usize, heads: usize, reps: usize, seed: u64) -> Result<AttentionBench, DiffError> {
    use rand::SeedableRng;
    use std::time::Instant;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let intra = AttentionParams::new(&mut store, "intra", dim, heads, &mut rng);
    let inter = AttentionParams::new(&mut store, "inter", dim, heads, &mut rng);
    let joint = AttentionParams::new(&mut store, "joint", dim, heads, &mut rng);
    let x = random_tokens(&mut rng, 1, views, patches, dim);
    let valid = vec![true; views * patches];
    let run = |mode: AttentionMode| -> Result<(u64, f64), DiffError> {
        let mut best = f64::INFINITY;
        let mut entries = 0;
        for _ in 0..reps.max(1) {
            let tape = crate::diffkit::Tape::new();
            let p = store.bind(&tape);
            let xv = tape.constant(x.clone());
            let before = score_entries();
            let start = Instant::now();
            match mode {
                AttentionMode::Divided => {
                    let y = intra_view_attention(&p, &intra, xv, &valid)?;
                    inter_view_attention(&p, &inter, y, &valid)?;
                }
                AttentionMode::Joint => {
                    joint_attention(&p, &joint, xv, &valid)?;
                }
            }
            best = best.min(start.elapsed().as_secs_f64());
            entries = score_entries() - before;
        }
        Ok((entries, best))
    };
    let (divided_entries, divided_secs) = run(AttentionMode::Divided)?;
    let (joint_entries, joint_secs) = run(AttentionMode::Joint)?;
    Ok(AttentionBench {
        views,
        patches,
        dim,
        divided_entries,
        joint_entries,
        divided_secs,
        joint_secs,
    })
}

/// Convenience for building a random `[B, V, N, dim]` input in tests and
/// benchmarks.
pub fn random_tokens<R: Rng + ?Sized>(rng: &mut R, b: usize, v: usize, n: usize, dim: usize) -> Tensor {
    Tensor::randn(rng, &[b, v, n, dim], 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffkit::{finite_diff_check, finite_diff_check_params, Tape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64, dim: usize, heads: usize) -> (ParamStore, SeBlock, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let blk = SeBlock::new(&mut store, "se0", dim, heads, &mut rng);
        (store, blk, rng)
    }

    /// Reorders axis 1 (views) or axis 2 (patches) of a `[1, V, N, d]` tensor.
    fn permute_axis(t: &Tensor, axis: usize, perm: &[usize]) -> Tensor {
        let s = t.shape();
        let (v, n, d) = (s[1], s[2], s[3]);
        let mut out = vec![0.0; t.numel()];
        for vi in 0..v {
            for ni in 0..n {
                let (sv, sn) = if axis == 1 { (perm[vi], ni) } else { (vi, perm[ni]) };
                out[(vi * n + ni) * d..(vi * n + ni + 1) * d].copy_from_slice(&t.data()[(sv * n + sn) * d..(sv * n + sn + 1) * d]);
            }
        }
        Tensor::new(s.to_vec(), out).unwrap()
    }

    #[test]
    fn single_view_is_single_slot_softmax() {
        let (store, blk, mut rng) = setup(1, 8, 2);
        let x = random_tokens(&mut rng, 1, 1, 3, 8);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let xv = tape.constant(x.clone());
        let y = inter_view_attention(&p, &blk.inter, xv, &[true; 3]).unwrap();
        let a = &blk.inter;
        let by_hand = a.out.forward(&p, a.value.forward(&p, a.norm.forward(&p, xv).unwrap()).unwrap()).unwrap();
        let want = xv.add(by_hand).unwrap();
        for (u, w) in y.value().data().iter().zip(want.value().data()) {
            assert!((u - w).abs() < 1e-12);
        }
        // single patch per view mirrors it for intra-view attention
        let x1 = tape.constant(random_tokens(&mut rng, 1, 2, 1, 8));
        let y1 = intra_view_attention(&p, &blk.intra, x1, &[true; 2]).unwrap();
        let a = &blk.intra;
        let hand = x1
            .add(a.out.forward(&p, a.value.forward(&p, a.norm.forward(&p, x1).unwrap()).unwrap()).unwrap())
            .unwrap();
        for (u, w) in y1.value().data().iter().zip(hand.value().data()) {
            assert!((u - w).abs() < 1e-12);
        }
    }

    #[test]
    fn view_and_patch_permutation_equivariance() {
        let (store, blk, mut rng) = setup(2, 16, 4);
        let x = random_tokens(&mut rng, 1, 4, 6, 16);
        let mut valid = vec![true; 24];
        valid[5] = false;
        let tape = Tape::new();
        let p = store.bind(&tape);
        let xz = {
            let mut t = x.clone();
            t.data_mut()[5 * 16..6 * 16].fill(0.0);
            t
        };
        let base_inter = inter_view_attention(&p, &blk.inter, tape.constant(xz.clone()), &valid).unwrap().value();
        let base_intra = intra_view_attention(&p, &blk.intra, tape.constant(xz.clone()), &valid).unwrap().value();

        let vperm = [2, 0, 3, 1];
        let mask_t = Tensor::new(vec![1, 4, 6, 1], valid.iter().map(|b| *b as u8 as f64).collect()).unwrap();
        let pv = |t: &Tensor, axis, perm: &[usize]| permute_axis(t, axis, perm);
        let flags = |t: &Tensor| t.data().iter().map(|v| *v != 0.0).collect::<Vec<_>>();

        let y = inter_view_attention(&p, &blk.inter, tape.constant(pv(&xz, 1, &vperm)), &flags(&pv(&mask_t, 1, &vperm))).unwrap();
        assert_eq!(*y.value(), pv(&base_inter, 1, &vperm));

        let nperm = [5, 3, 1, 0, 2, 4];
        let y = intra_view_attention(&p, &blk.intra, tape.constant(pv(&xz, 2, &nperm)), &flags(&pv(&mask_t, 2, &nperm))).unwrap();
        assert_eq!(*y.value(), pv(&base_intra, 2, &nperm));

        // the full block is equivariant to both
        let base = se_block(&p, &blk, tape.constant(xz.clone()), &valid).unwrap().value();
        let y = se_block(&p, &blk, tape.constant(pv(&xz, 1, &vperm)), &flags(&pv(&mask_t, 1, &vperm))).unwrap();
        assert_eq!(*y.value(), pv(&base, 1, &vperm));
    }

    #[test]
    fn zero_weights_are_identity() {
        let (mut store, blk, mut rng) = setup(3, 8, 2);
        blk.zero(&mut store);
        let x = random_tokens(&mut rng, 2, 3, 4, 8);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let y = se_block(&p, &blk, tape.constant(x.clone()), &[true; 24]).unwrap();
        assert_eq!(*y.value(), x);
    }

    #[test]
    fn fully_masked_returns_residual() {
        let (store, blk, mut rng) = setup(4, 8, 2);
        let x = random_tokens(&mut rng, 1, 2, 3, 8);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let y = inter_view_attention(&p, &blk.inter, tape.constant(x.clone()), &[false; 6]).unwrap();
        assert_eq!(*y.value(), x);
    }

    #[test]
    fn attention_rows_sum_to_one_over_kept_slots() {
        let (store, blk, mut rng) = setup(5, 8, 2);
        let x = Tensor::randn(&mut rng, &[3, 5, 8], 1.0);
        let keep = [
            true, false, true, true, false, true, true, true, true, true, false, false, false, true, false,
        ];
        let tape = Tape::new();
        let p = store.bind(&tape);
        let (_, w) = attend(&p, &blk.intra, tape.constant(x), &keep).unwrap();
        let w = w.value();
        for row in w.data().chunks(5).enumerate() {
            let g = row.0 / (2 * 5);
            let s: f64 = row.1.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            for (j, a) in row.1.iter().enumerate() {
                if !keep[g * 5 + j] {
                    assert_eq!(*a, 0.0);
                }
            }
        }
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let (mut store, blk, mut rng) = setup(6, 8, 2);
        let x = random_tokens(&mut rng, 1, 2, 3, 8);
        let w = Tensor::randn(&mut rng, &[1, 2, 3, 8], 1.0);
        let valid = [true, true, false, true, true, true];
        let err = finite_diff_check(
            |tape, xv| {
                let p = store.bind(tape);
                let y = se_block(&p, &blk, xv, &valid)?;
                Ok(y.mul(tape.constant(w.clone()))?.sum_all())
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "input {err}");
        let ids: Vec<_> = (0..store.len()).map(crate::diffkit::ParamId).collect();
        let err = finite_diff_check_params(&mut store, &ids, 6, 1e-5, |p| {
            let y = se_block(p, &blk, p.tape().constant(x.clone()), &valid)?;
            Ok(y.mul(p.tape().constant(w.clone()))?.sum_all())
        })
        .unwrap();
        assert!(err < 1e-4, "params {err}");
    }

    #[test]
    fn order_is_intra_then_inter() {
        let (store, blk, mut rng) = setup(7, 8, 2);
        let x = random_tokens(&mut rng, 1, 3, 4, 8);
        let valid = [true; 12];
        let tape = Tape::new();
        let p = store.bind(&tape);
        let xv = tape.constant(x);
        let y = se_block(&p, &blk, xv, &valid).unwrap();
        let a = intra_view_attention(&p, &blk.intra, xv, &valid).unwrap();
        let a = inter_view_attention(&p, &blk.inter, a, &valid).unwrap();
        let want = blk.ffn.forward(&p, a).unwrap();
        assert_eq!(*y.value(), *want.value());
        let b = inter_view_attention(&p, &blk.inter, xv, &valid).unwrap();
        let b = intra_view_attention(&p, &blk.intra, b, &valid).unwrap();
        assert_ne!(*blk.ffn.forward(&p, b).unwrap().value(), *y.value());
    }

    #[test]
    fn score_work_counts() {
        let (store, blk, mut rng) = setup(8, 8, 2);
        let x = random_tokens(&mut rng, 1, 8, 64, 8);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let before = score_entries();
        se_block(&p, &blk, tape.constant(x.clone()), &[true; 512]).unwrap();
        let divided = score_entries() - before;
        assert_eq!(divided, 36_864);
        let before = score_entries();
        joint_attention(&p, &blk.intra, tape.constant(x), &[true; 512]).unwrap();
        let joint = score_entries() - before;
        assert_eq!(joint, 262_144);
        assert_eq!(divided * 64, joint * 9);
    }

    #[test]
    fn flops_formula() {
        use AttentionMode::*;
        for n in 1..20 {
            assert_eq!(flops_estimate(1, n, 16, Divided), flops_estimate(1, n, 16, Joint));
        }
        for v in 2..12 {
            for n in 2..40 {
                // (V - 1)(N - 1) > 1 except at V = N = 2, where the two tie
                let (d, j) = (flops_estimate(v, n, 32, Divided), flops_estimate(v, n, 32, Joint));
                if (v, n) == (2, 2) {
                    assert_eq!(d, j);
                } else {
                    assert!(d < j);
                }
            }
        }
        let r = flops_estimate(8, 64, 64, Divided) as f64 / flops_estimate(8, 64, 64, Joint) as f64;
        assert!((r - 9.0 / 64.0).abs() < 1e-15);
    }
}
