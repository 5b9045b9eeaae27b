//! Seeded single cases of the structural properties, shared by the property
//! tests and the acceptance runner.

use inrpatch_core::coords::{make_grid, StageId};
use inrpatch_core::generator::{GeneratorConfig, GeneratorParams, InitStrategy};
use inrpatch_core::losses::{lattice_footprints, patch_reg_against, pooled_footprints, PatchNorm};
use inrpatch_core::tensor::{Rng, Tape, Tensor};

pub const GRID_SIZES: [usize; 6] = [8, 16, 32, 64, 128, 256];

/// Checks the grid law for one `(H, N)`: `N²` points, stride `H/N`, every
/// point a multiple of the stride inside the image.
pub fn grid_law(h: usize, n: usize) -> Result<(), String> {
    let g = make_grid(h, h, n).map_err(|e| e.to_string())?;
    let pts = g.pixels();
    if pts.len() != n * n || g.stride() != h / n {
        return Err(format!("H={h} N={n}: {} points, stride {}", pts.len(), g.stride()));
    }
    for (k, &(r, c)) in pts.iter().enumerate() {
        if (r, c) != ((k / n) * (h / n), (k % n) * (h / n)) {
            return Err(format!("H={h} N={n}: point {k} is ({r}, {c})"));
        }
    }
    Ok(())
}

/// Every valid density of `h` (divisors).
pub fn densities(h: usize) -> Vec<usize> {
    (1..=h).filter(|n| h.is_multiple_of(*n)).collect()
}

fn small_config() -> GeneratorConfig {
    GeneratorConfig {
        z_dim: 16,
        w_dim: 16,
        width: 32,
        layers: 3,
        embed_pairs: 16,
        fourier_sigma: 6.0,
        const_dim: 8,
    }
}

/// Renders a random sub-window and the full grid of a random-stage
/// generator; returns the largest deviation between the window and the
/// matching slice of the full render.
pub fn pixelwise_independence(seed: u64) -> f32 {
    let mut rng = Rng::new(seed);
    let h = [16, 32][rng.below(2)];
    let stage = StageId::ALL[rng.below(3)];
    let strategy = [InitStrategy::Nearest, InitStrategy::Bilinear][rng.below(2)];
    let g = GeneratorParams::init(small_config(), h, stage, strategy, &mut rng).unwrap();
    let n = g.density();
    let side = 1 + rng.below(n);
    let origin = (rng.below(n - side + 1), rng.below(n - side + 1));
    let batch = 1 + rng.below(3);
    let z = Tensor::randn_with(&[batch, 16], &mut rng).unwrap();

    let full = make_grid(h, h, n).unwrap();
    let window = full.window(origin, side).unwrap();
    let all = g.render(&z, &full.points()).unwrap();
    let part = g.render(&z, &window.points()).unwrap();
    let mut worst = 0.0f32;
    for b in 0..batch {
        for (k, (r, c)) in window.pixels().into_iter().enumerate() {
            let idx = (r / full.stride()) * n + c / full.stride();
            for ch in 0..3 {
                let a = all.data()[(b * n * n + idx) * 3 + ch];
                let p = part.data()[(b * side * side + k) * 3 + ch];
                worst = worst.max((a - p).abs());
            }
        }
    }
    worst
}

/// Value of the patch regularizer when the target is the 2×2-pooled
/// current patch, computed outside the tape.
pub fn patch_reg_zero(seed: u64) -> f32 {
    let mut rng = Rng::new(seed);
    let batch = 1 + rng.below(4);
    let side = 2 * (1 + rng.below(8));
    let rows: Vec<f32> = (0..batch * side * side * 3).map(|_| rng.uniform_f32()).collect();
    let half = side / 2;
    let mut target = vec![0.0f32; batch * 3 * half * half];
    for b in 0..batch {
        for c in 0..3 {
            for i in 0..half {
                for j in 0..half {
                    let at = |di: usize, dj: usize| rows[(b * side * side + (2 * i + di) * side + 2 * j + dj) * 3 + c];
                    target[((b * 3 + c) * half + i) * half + j] = 0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
                }
            }
        }
    }
    let mut tape = Tape::new();
    let fake = tape.constant(Tensor::from_vec(&[batch * side * side, 3], rows).unwrap());
    let target = tape.constant(Tensor::from_vec(&[batch, 3, half, half], target).unwrap());
    let norm = [PatchNorm::L2, PatchNorm::SquaredL2][rng.below(2)];
    let v = patch_reg_against(&mut tape, fake, batch, side, target, norm).unwrap();
    tape.value(v).item()
}

/// Draws a random stage-2/3 window and checks that its 2×2-pooled cells and
/// its parent window cover the same pixel squares, both via the library's
/// footprint lists and by direct enumeration.
pub fn footprints_align(seed: u64) -> Result<(), String> {
    let mut rng = Rng::new(seed);
    let h = [16, 32, 64, 128][rng.below(4)];
    let stage = [StageId::Two, StageId::Three][rng.below(2)];
    let n = stage.density(h);
    let crop = 2 * (1 + rng.below(n / 4));
    let w = make_grid(h, h, n).unwrap().rcrop(crop, &mut rng).unwrap();
    let parent = w.parent_window().map_err(|e| e.to_string())?;
    if pooled_footprints(&w) != lattice_footprints(&parent) {
        return Err(format!("seed {seed}: footprint lists differ"));
    }
    let s = w.stride();
    let (r0, c0) = w.origin_px();
    let pp = parent.pixels();
    for i in 0..crop / 2 {
        for j in 0..crop / 2 {
            let cell = (r0 + 2 * i * s, c0 + 2 * j * s);
            if pp[i * (crop / 2) + j] != cell || parent.stride() != 2 * s {
                return Err(format!("seed {seed}: cell ({i}, {j}) misplaced"));
            }
        }
    }
    if parent.extent() != w.extent() {
        return Err(format!("seed {seed}: extents {} vs {}", parent.extent(), w.extent()));
    }
    Ok(())
}
