//! Position encodings for patch tokens: a fixed sinusoidal code of each
//! patch's mean world coordinate, a learned MLP code of its viewing ray, and
//! the neighbourhood average pooling that sits between the two.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffkit::{Bound, DiffError, ParamStore, Tensor, Var};
use crate::nn::{expand_mask, Linear};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosEncConfig {
    pub dim: usize,
    pub num_freqs: usize,
    /// Meters per radian of the lowest frequency.
    pub coord_scale: f64,
    pub pool_kernel: usize,
    pub ray_mlp_hidden: usize,
}

impl Default for PosEncConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            num_freqs: 4,
            coord_scale: 3.0,
            pool_kernel: 2,
            ray_mlp_hidden: 32,
        }
    }
}

impl PosEncConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.dim < 6 * self.num_freqs {
            return Err(format!("posenc.dim {} < 6 * posenc.num_freqs {}", self.dim, self.num_freqs));
        }
        if self.pool_kernel == 0 || self.ray_mlp_hidden == 0 {
            return Err("posenc.pool_kernel and posenc.ray_mlp_hidden must be positive".into());
        }
        if !(self.coord_scale > 0.0 && self.coord_scale.is_finite()) {
            return Err("posenc.coord_scale must be positive".into());
        }
        Ok(())
    }
}

/// Patch tokens of `batch x views` images laid out as `[B, V, N, dim]`,
/// `N = hp * wp` row-major.
#[derive(Clone)]
pub struct PatchGrid<'t> {
    pub features: Var<'t>,
    /// `[B, V, N, 3]` mean world point per patch.
    pub world_coords: Tensor,
    /// `[B, V, N, 3]` unit ray through each patch center.
    pub ray_dirs: Tensor,
    /// `B * V * N` flags; invalid patches carry zero features.
    pub valid: Vec<bool>,
    /// Center rays of the pooled regions (`[B, V, N', 3]`), when known
    /// exactly from the cameras.
    pub pooled_rays: Option<Tensor>,
    pub batch: usize,
    pub views: usize,
    pub hp: usize,
    pub wp: usize,
}

impl PatchGrid<'_> {
    pub fn tokens(&self) -> usize {
        self.hp * self.wp
    }

    pub fn dim(&self) -> usize {
        *self.features.shape().last().expect("rank 4")
    }
}

/// Per axis, interleaved `sin(x w_k), cos(x w_k)` for `w_k = 2^k / coord_scale`;
/// axes concatenated, then zero-padded to `dim`. `coords` is `[.., 3]`.
pub fn sinusoidal_encode_3d(coords: &Tensor, cfg: &PosEncConfig) -> Tensor {
    let shape = coords.shape();
    assert_eq!(shape.last(), Some(&3), "coordinates must have a trailing axis of 3");
    let n = coords.numel() / 3;
    let mut out = vec![0.0; n * cfg.dim];
    for (row, p) in coords.data().chunks_exact(3).enumerate() {
        let dst = &mut out[row * cfg.dim..];
        for (a, &x) in p.iter().enumerate() {
            for k in 0..cfg.num_freqs {
                let w = (1u64 << k) as f64 / cfg.coord_scale;
                let (s, c) = (x * w).sin_cos();
                let at = a * 2 * cfg.num_freqs + 2 * k;
                dst[at] = s;
                dst[at + 1] = c;
            }
        }
    }
    let mut out_shape = shape[..shape.len() - 1].to_vec();
    out_shape.push(cfg.dim);
    Tensor::new(out_shape, out).expect("sized above")
}

/// Two-layer ray MLP, `3 -> hidden -> dim` with GELU.
#[derive(Debug, Clone)]
pub struct RayMlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl RayMlp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &PosEncConfig, rng: &mut R) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.0"), 3, cfg.ray_mlp_hidden, true, rng),
            out: Linear::new(store, &format!("{name}.1"), cfg.ray_mlp_hidden, cfg.dim, true, rng),
        }
    }

    pub fn zero(&self, store: &mut ParamStore) {
        self.hidden.zero(store);
        self.out.zero(store);
    }
}

/// Applies the ray MLP to `[.., 3]` directions; rows with `valid = false`
/// come out as zeros.
pub fn ray_mlp_encode<'t>(p: &Bound<'_, 't>, mlp: &RayMlp, ray_dirs: Var<'t>, valid: &[bool]) -> Result<Var<'t>, DiffError> {
    for layer in [&mlp.hidden, &mlp.out] {
        let ids = std::iter::once(layer.weight).chain(layer.bias);
        if ids.into_iter().any(|id| !p.var(id).value().is_finite()) {
            return Err(DiffError::Domain {
                op: "ray_mlp_encode",
                detail: "non-finite parameters".into(),
            });
        }
    }
    let h = mlp.hidden.forward(p, ray_dirs)?.gelu();
    let y = mlp.out.forward(p, h)?;
    let shape = y.shape();
    let mask = expand_mask(valid, mlp.out.fan_out).reshaped(&shape)?;
    y.mul(p.tape().constant(mask))
}

/// Output of [`pool_matrix`]: averaging weights plus pooled bookkeeping.
pub struct Pooling {
    /// `[B, V, N', N]`.
    pub weights: Tensor,
    pub valid: Vec<bool>,
    pub hp: usize,
    pub wp: usize,
}

/// Non-overlapping `kernel x kernel` averaging over the valid patches of
/// each region; regions at ragged edges average whatever valid patches they
/// contain. A region is valid when any of its patches is.
pub fn pool_matrix(batch: usize, views: usize, hp: usize, wp: usize, kernel: usize, valid: &[bool]) -> Pooling {
    let (php, pwp) = (hp.div_ceil(kernel), wp.div_ceil(kernel));
    let (n, np) = (hp * wp, php * pwp);
    let mut w = vec![0.0; batch * views * np * n];
    let mut pooled_valid = vec![false; batch * views * np];
    for bv in 0..batch * views {
        for pr in 0..php {
            for pc in 0..pwp {
                let q = pr * pwp + pc;
                let members: Vec<usize> = (pr * kernel..((pr + 1) * kernel).min(hp))
                    .flat_map(|r| (pc * kernel..((pc + 1) * kernel).min(wp)).map(move |c| r * wp + c))
                    .filter(|&i| valid[bv * n + i])
                    .collect();
                if members.is_empty() {
                    continue;
                }
                pooled_valid[bv * np + q] = true;
                let share = 1.0 / members.len() as f64;
                for i in members {
                    w[(bv * np + q) * n + i] = share;
                }
            }
        }
    }
    Pooling {
        weights: Tensor::new(vec![batch, views, np, n], w).expect("sized above"),
        valid: pooled_valid,
        hp: php,
        wp: pwp,
    }
}

/// Applies pooling weights to a plain `[B, V, N, c]` tensor.
pub fn apply_pooling(pool: &Pooling, x: &Tensor) -> Tensor {
    let s = pool.weights.shape();
    let (bv, np, n) = (s[0] * s[1], s[2], s[3]);
    let c = x.shape()[3];
    let mut out = vec![0.0; bv * np * c];
    for g in 0..bv {
        for q in 0..np {
            for i in 0..n {
                let w = pool.weights.data()[(g * np + q) * n + i];
                if w != 0.0 {
                    for j in 0..c {
                        out[(g * np + q) * c + j] += w * x.data()[(g * n + i) * c + j];
                    }
                }
            }
        }
    }
    Tensor::new(vec![s[0], s[1], np, c], out).expect("sized above")
}

/// Average-pools `[B, V, N, dim]` features over the patch grid.
pub fn avg_pool_patches<'t>(x: Var<'t>, pool: &Pooling) -> Result<Var<'t>, DiffError> {
    x.tape().constant(pool.weights.clone()).matmul(x)
}

fn renormalize(rays: &mut Tensor) {
    for r in rays.data_mut().chunks_exact_mut(3) {
        let n = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
        if n > 0.0 {
            r.iter_mut().for_each(|v| *v /= n);
        }
    }
}

/// Position-aware features: `pool(f + sin_code(world)) + ray_mlp(ray)`, the
/// ray code taken at the pooled resolution. Returns the pooled grid with
/// pooled world coordinates and rays.
pub fn fuse_multilevel<'t>(p: &Bound<'_, 't>, grid: &PatchGrid<'t>, cfg: &PosEncConfig, mlp: &RayMlp) -> Result<PatchGrid<'t>, DiffError> {
    let tape = p.tape();
    let (b, v, n) = (grid.batch, grid.views, grid.tokens());
    let phi = sinusoidal_encode_3d(&grid.world_coords, cfg);
    let phi_mask = expand_mask(&grid.valid, cfg.dim).reshaped(&[b, v, n, cfg.dim])?;
    let phi = tape.constant(phi).mul(tape.constant(phi_mask))?;
    let with_pos = grid.features.add(phi)?;
    let pool = pool_matrix(b, v, grid.hp, grid.wp, cfg.pool_kernel, &grid.valid);
    let pooled = avg_pool_patches(with_pos, &pool)?;
    let rays = match &grid.pooled_rays {
        Some(r) => r.clone(),
        None => {
            let mut r = apply_pooling(&pool, &grid.ray_dirs);
            renormalize(&mut r);
            r
        }
    };
    let psi = ray_mlp_encode(p, mlp, tape.constant(rays.clone()), &pool.valid)?;
    Ok(PatchGrid {
        features: pooled.add(psi)?,
        world_coords: apply_pooling(&pool, &grid.world_coords),
        ray_dirs: rays,
        valid: pool.valid,
        pooled_rays: None,
        batch: b,
        views: v,
        hp: pool.hp,
        wp: pool.wp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffkit::{finite_diff_check, finite_diff_check_params, Tape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> PosEncConfig {
        PosEncConfig {
            dim: 32,
            num_freqs: 4,
            coord_scale: 3.0,
            pool_kernel: 2,
            ray_mlp_hidden: 8,
        }
    }

    fn random_rays(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
        let mut t = Tensor::randn(rng, &[n, 3], 1.0);
        renormalize(&mut t);
        t
    }

    #[test]
    fn origin_code_is_sin_zero_cos_one() {
        let c = cfg();
        let code = sinusoidal_encode_3d(&Tensor::zeros(&[1, 3]), &c);
        let d = code.data();
        for i in 0..3 * c.num_freqs {
            assert_eq!(d[2 * i], 0.0);
            assert_eq!(d[2 * i + 1], 1.0);
        }
        assert!(d[6 * c.num_freqs..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn far_points_code_farther_than_near_points() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dist = |a: &Tensor, b: &Tensor| -> f64 { a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt() };
        let (mut far, mut near) = (0.0, 0.0);
        for _ in 0..100 {
            let p: Vec<f64> = (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let dir = random_rays(&mut rng, 1);
            let at = |s: f64| Tensor::new(vec![1, 3], (0..3).map(|i| p[i] + s * dir.data()[i]).collect()).unwrap();
            let base = sinusoidal_encode_3d(&at(0.0), &c);
            far += dist(&base, &sinusoidal_encode_3d(&at(10.0), &c));
            near += dist(&base, &sinusoidal_encode_3d(&at(0.01), &c));
        }
        assert!(far > near);
    }

    #[test]
    fn zero_ray_mlp_gives_zero_and_masks_rows() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let mlp = RayMlp::new(&mut store, "psi", &c, &mut rng);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let rays = random_rays(&mut rng, 4);
        let y = ray_mlp_encode(&p, &mlp, tape.constant(rays.clone()), &[true, false, true, true]).unwrap();
        let y = y.value();
        assert!(y.data()[c.dim..2 * c.dim].iter().all(|v| *v == 0.0));
        // opposite directions are distinguishable at random init
        let opp = Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, -1.0, 0.0, 0.0]).unwrap();
        let z = ray_mlp_encode(&p, &mlp, tape.constant(opp), &[true, true]).unwrap().value();
        assert_ne!(z.data()[..c.dim], z.data()[c.dim..]);

        mlp.zero(&mut store);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let y = ray_mlp_encode(&p, &mlp, tape.constant(rays), &[true; 4]).unwrap();
        assert!(y.value().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn ray_mlp_rejects_nan_params() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let mlp = RayMlp::new(&mut store, "psi", &c, &mut rng);
        store.get_mut(mlp.out.weight).data_mut()[0] = f64::NAN;
        let tape = Tape::new();
        let p = store.bind(&tape);
        assert!(ray_mlp_encode(&p, &mlp, tape.constant(random_rays(&mut rng, 2)), &[true; 2]).is_err());
    }

    #[test]
    fn ray_mlp_gradients() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let mlp = RayMlp::new(&mut store, "psi", &c, &mut rng);
        let rays = random_rays(&mut rng, 5);
        let weights = Tensor::randn(&mut rng, &[5, c.dim], 1.0);
        // input gradient
        let err = finite_diff_check(
            |tape, x| {
                let p = store.bind(tape);
                let y = ray_mlp_encode(&p, &mlp, x, &[true, true, false, true, true])?;
                Ok(y.mul(tape.constant(weights.clone()))?.sum_all())
            },
            &rays,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
        let ids = [mlp.hidden.weight, mlp.hidden.bias.unwrap(), mlp.out.weight];
        let err = finite_diff_check_params(&mut store, &ids, 64, 1e-6, |p| {
            let x = p.tape().constant(rays.clone());
            let y = ray_mlp_encode(p, &mlp, x, &[true; 5])?;
            Ok(y.mul(p.tape().constant(weights.clone()))?.sum_all())
        })
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    fn brute_pool(x: &[f64], hp: usize, wp: usize, k: usize, c: usize) -> Vec<f64> {
        let (php, pwp) = (hp.div_ceil(k), wp.div_ceil(k));
        let mut out = vec![0.0; php * pwp * c];
        for pr in 0..php {
            for pc in 0..pwp {
                let mut cnt = 0.0;
                for r in pr * k..(pr * k + k).min(hp) {
                    for col in pc * k..(pc * k + k).min(wp) {
                        cnt += 1.0;
                        for j in 0..c {
                            out[(pr * pwp + pc) * c + j] += x[(r * wp + col) * c + j];
                        }
                    }
                }
                for j in 0..c {
                    out[(pr * pwp + pc) * c + j] /= cnt;
                }
            }
        }
        out
    }

    #[test]
    fn pooling_examples_and_oracle() {
        let tape = Tape::new();
        // kernel 1 is the identity
        let x = Tensor::from_fn(&[1, 1, 4, 2], |i| i as f64);
        let pool = pool_matrix(1, 1, 2, 2, 1, &[true; 4]);
        assert_eq!(*avg_pool_patches(tape.constant(x.clone()), &pool).unwrap().value(), x);
        // 2x2 grid, kernel 2: mean of all four
        let pool = pool_matrix(1, 1, 2, 2, 2, &[true; 4]);
        let y = avg_pool_patches(tape.constant(x.clone()), &pool).unwrap().value();
        assert_eq!(y.data(), &[3.0, 4.0]);
        // random, ragged edges
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (hp, wp, k) in [(4, 4, 2), (5, 3, 2), (6, 6, 3), (3, 7, 2)] {
            let x = Tensor::randn(&mut rng, &[1, 1, hp * wp, 3], 1.0);
            let pool = pool_matrix(1, 1, hp, wp, k, &vec![true; hp * wp]);
            let y = avg_pool_patches(tape.constant(x.clone()), &pool).unwrap().value();
            let want = brute_pool(x.data(), hp, wp, k, 3);
            for (a, b) in y.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pooling_skips_invalid_patches() {
        let pool = pool_matrix(1, 1, 2, 2, 2, &[true, false, false, false]);
        assert_eq!(pool.valid, vec![true]);
        assert_eq!(&pool.weights.data()[..4], &[1.0, 0.0, 0.0, 0.0]);
        let pool = pool_matrix(1, 1, 2, 2, 2, &[false; 4]);
        assert_eq!(pool.valid, vec![false]);
    }

    fn random_grid<'t>(tape: &'t Tape, rng: &mut ChaCha8Rng, b: usize, v: usize, hp: usize, wp: usize, dim: usize) -> PatchGrid<'t> {
        let n = hp * wp;
        let mut rays = random_rays(rng, b * v * n);
        rays = rays.reshaped(&[b, v, n, 3]).unwrap();
        PatchGrid {
            features: tape.constant(Tensor::randn(rng, &[b, v, n, dim], 1.0)),
            world_coords: Tensor::uniform(rng, &[b, v, n, 3], -3.0, 3.0),
            ray_dirs: rays,
            valid: vec![true; b * v * n],
            pooled_rays: None,
            batch: b,
            views: v,
            hp,
            wp,
        }
    }

    #[test]
    fn degenerate_fusion_is_identity() {
        let mut c = cfg();
        c.num_freqs = 0;
        c.pool_kernel = 1;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let mlp = RayMlp::new(&mut store, "psi", &c, &mut rng);
        mlp.zero(&mut store);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let g = random_grid(&tape, &mut rng, 1, 2, 2, 2, c.dim);
        let out = fuse_multilevel(&p, &g, &c, &mlp).unwrap();
        assert_eq!(*out.features.value(), *g.features.value());
    }

    #[test]
    fn fusion_matches_hand_chain_and_pins_order() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let mlp = RayMlp::new(&mut store, "psi", &c, &mut rng);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let g = random_grid(&tape, &mut rng, 1, 2, 4, 4, c.dim);
        let out = fuse_multilevel(&p, &g, &c, &mlp).unwrap();

        let phi = tape.constant(sinusoidal_encode_3d(&g.world_coords, &c));
        let pool = pool_matrix(1, 2, 4, 4, 2, &g.valid);
        let pooled = avg_pool_patches(g.features.add(phi).unwrap(), &pool).unwrap();
        let mut rays = apply_pooling(&pool, &g.ray_dirs);
        renormalize(&mut rays);
        let psi = ray_mlp_encode(&p, &mlp, tape.constant(rays), &pool.valid).unwrap();
        let hand = pooled.add(psi).unwrap();
        assert_eq!(*out.features.value(), *hand.value());

        // pooling before adding the coordinate code is not the same thing
        let pooled_first = avg_pool_patches(g.features, &pool).unwrap();
        let pooled_coords = tape.constant(sinusoidal_encode_3d(&apply_pooling(&pool, &g.world_coords), &c));
        let swapped = pooled_first.add(pooled_coords).unwrap().add(psi).unwrap();
        assert_ne!(*swapped.value(), *out.features.value());
    }

    #[test]
    fn fusion_is_view_equivariant_and_position_sensitive() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let mlp = RayMlp::new(&mut store, "psi", &c, &mut rng);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let g = random_grid(&tape, &mut rng, 1, 3, 2, 2, c.dim);
        let out = fuse_multilevel(&p, &g, &c, &mlp).unwrap().features.value();

        let perm = [2, 0, 1];
        let permute = |t: &Tensor| {
            let s = t.shape().to_vec();
            let per = s[2] * s[3];
            let mut d = Vec::new();
            for &v in &perm {
                d.extend_from_slice(&t.data()[v * per..(v + 1) * per]);
            }
            Tensor::new(s, d).unwrap()
        };
        let mut h = g.clone();
        h.features = tape.constant(permute(&g.features.value()));
        h.world_coords = permute(&g.world_coords);
        h.ray_dirs = permute(&g.ray_dirs);
        let out_p = fuse_multilevel(&p, &h, &c, &mlp).unwrap().features.value();
        assert_eq!(*out_p, permute(&out));

        let mut moved = g.clone();
        moved.world_coords.data_mut().iter_mut().for_each(|x| *x += 1.0);
        let out_m = fuse_multilevel(&p, &moved, &c, &mlp).unwrap().features.value();
        assert_ne!(*out_m, *out);
    }
}
