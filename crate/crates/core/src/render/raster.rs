use nalgebra::{Matrix2, Vector2};
use rayon::prelude::*;

use super::project::{Splat2D, FOOTPRINT_SIGMAS};
use crate::error::{check_len, ModelError};

pub const TILE: usize = 16;
/// Upper bound on a single splat's per-pixel opacity.
pub const MAX_ALPHA: f64 = 0.99;
/// Traversal stops once transmittance falls below this.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
/// Gaussian exponent at the footprint boundary; pixels beyond it are skipped.
pub const CUTOFF_POWER: f64 = -0.5 * FOOTPRINT_SIGMAS * FOOTPRINT_SIGMAS;

/// A projected splat with its final color and opacity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShadedSplat {
    pub splat: Splat2D,
    pub opacity: f64,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    /// Row-major, 3 channels per pixel, linear.
    pub color: Vec<f64>,
    /// Accumulated opacity `1 − T`.
    pub alpha: Vec<f64>,
    pub transmittance: Vec<f64>,
}

impl RenderOutput {
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = 3 * (y * self.width + x);
        [self.color[i], self.color[i + 1], self.color[i + 2]]
    }
}

#[derive(Debug, Clone, Copy)]
struct Packed {
    mx: f64,
    my: f64,
    // conic entries; `b` is the mean of the two off-diagonals
    a: f64,
    b: f64,
    c: f64,
    opacity: f64,
    color: [f64; 3],
}

/// Intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct RasterState {
    width: usize,
    height: usize,
    background: [f64; 3],
    packed: Vec<Packed>,
    conics: Vec<Matrix2<f64>>,
    /// Splat indices per tile, front to back.
    tiles: Vec<Vec<u32>>,
    /// Number of tile-list entries each pixel traversed.
    traversed: Vec<u32>,
    final_t: Vec<f64>,
}

/// Gradients w.r.t. each input splat.
#[derive(Debug, Clone, PartialEq)]
pub struct SplatGrads {
    pub means: Vec<Vector2<f64>>,
    pub covs: Vec<Matrix2<f64>>,
    pub opacities: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
}

impl SplatGrads {
    fn zeros(n: usize) -> Self {
        Self {
            means: vec![Vector2::zeros(); n],
            covs: vec![Matrix2::zeros(); n],
            opacities: vec![0.0; n],
            colors: vec![[0.0; 3]; n],
        }
    }
}

fn tiles_x(width: usize) -> usize {
    width.div_ceil(TILE)
}

/// Front-to-back order by depth, ties broken by index.
pub fn depth_order(splats: &[ShadedSplat]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..splats.len()).collect();
    order.sort_by(|&i, &j| splats[i].splat.depth.total_cmp(&splats[j].splat.depth).then(i.cmp(&j)));
    order
}

fn bin(splats: &[ShadedSplat], width: usize, height: usize) -> Vec<Vec<u32>> {
    let tx = tiles_x(width);
    let ty = height.div_ceil(TILE);
    let mut tiles = vec![Vec::new(); tx * ty];
    for i in depth_order(splats) {
        let s = &splats[i].splat;
        let x0 = ((s.mean.x - s.radius).floor().max(0.0) as usize) / TILE;
        let y0 = ((s.mean.y - s.radius).floor().max(0.0) as usize) / TILE;
        let x1 = ((s.mean.x + s.radius).ceil().min(width as f64 - 1.0).max(0.0) as usize) / TILE;
        let y1 = ((s.mean.y + s.radius).ceil().min(height as f64 - 1.0).max(0.0) as usize) / TILE;
        for ty_ in y0..=y1.min(ty - 1) {
            for tx_ in x0..=x1.min(tx - 1) {
                tiles[ty_ * tx + tx_].push(i as u32);
            }
        }
    }
    tiles
}

#[inline]
fn power_at(s: &Packed, px: f64, py: f64) -> (f64, f64, f64) {
    let dx = px - s.mx;
    let dy = py - s.my;
    (-0.5 * (s.a * dx * dx + 2.0 * s.b * dx * dy + s.c * dy * dy), dx, dy)
}

fn tile_pixels(t: usize, width: usize, height: usize) -> impl Iterator<Item = (usize, usize)> {
    let tx = tiles_x(width);
    let (x0, y0) = ((t % tx) * TILE, (t / tx) * TILE);
    let (x1, y1) = ((x0 + TILE).min(width), (y0 + TILE).min(height));
    (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
}

struct TileForward {
    color: Vec<[f64; 3]>,
    final_t: Vec<f64>,
    traversed: Vec<u32>,
}

/// Alpha-composites splats front to back over `background`.
pub fn rasterize(
    splats: &[ShadedSplat],
    background: [f64; 3],
    width: usize,
    height: usize,
) -> Result<(RenderOutput, RasterState), ModelError> {
    let mut packed = Vec::with_capacity(splats.len());
    let mut conics = Vec::with_capacity(splats.len());
    for (i, s) in splats.iter().enumerate() {
        let conic = s.splat.conic().ok_or(ModelError::NotPositiveDefinite(i))?;
        conics.push(conic);
        packed.push(Packed {
            mx: s.splat.mean.x,
            my: s.splat.mean.y,
            a: conic[(0, 0)],
            b: 0.5 * (conic[(0, 1)] + conic[(1, 0)]),
            c: conic[(1, 1)],
            opacity: s.opacity,
            color: s.color,
        });
    }
    let tiles = bin(splats, width, height);
    let results: Vec<TileForward> = tiles
        .par_iter()
        .enumerate()
        .map(|(t, list)| {
            let mut out = TileForward {
                color: Vec::new(),
                final_t: Vec::new(),
                traversed: Vec::new(),
            };
            for (x, y) in tile_pixels(t, width, height) {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut trans = 1.0;
                let mut c = [0.0; 3];
                let mut end = list.len();
                for (k, &idx) in list.iter().enumerate() {
                    let s = &packed[idx as usize];
                    let (power, _, _) = power_at(s, px, py);
                    if power < CUTOFF_POWER {
                        continue;
                    }
                    let a = (s.opacity * power.exp()).min(MAX_ALPHA);
                    let w = trans * a;
                    c[0] += w * s.color[0];
                    c[1] += w * s.color[1];
                    c[2] += w * s.color[2];
                    trans *= 1.0 - a;
                    if trans < MIN_TRANSMITTANCE {
                        end = k + 1;
                        break;
                    }
                }
                out.color.push(c);
                out.final_t.push(trans);
                out.traversed.push(end as u32);
            }
            out
        })
        .collect();
    let n = width * height;
    let mut output = RenderOutput {
        width,
        height,
        color: vec![0.0; 3 * n],
        alpha: vec![0.0; n],
        transmittance: vec![0.0; n],
    };
    let mut traversed = vec![0u32; n];
    for (t, r) in results.into_iter().enumerate() {
        for (k, (x, y)) in tile_pixels(t, width, height).enumerate() {
            let p = y * width + x;
            let tr = r.final_t[k];
            for ch in 0..3 {
                output.color[3 * p + ch] = r.color[k][ch] + tr * background[ch];
            }
            output.alpha[p] = 1.0 - tr;
            output.transmittance[p] = tr;
            traversed[p] = r.traversed[k];
        }
    }
    let state = RasterState {
        width,
        height,
        background,
        packed,
        conics,
        tiles,
        traversed,
        final_t: output.transmittance.clone(),
    };
    Ok((output, state))
}

struct TileBackward {
    means: Vec<Vector2<f64>>,
    conics: Vec<[f64; 3]>,
    opacities: Vec<f64>,
    colors: Vec<[f64; 3]>,
}

/// Exact gradients of the composited color and alpha images.
pub fn rasterize_backward(state: &RasterState, d_color: &[f64], d_alpha: &[f64]) -> Result<SplatGrads, ModelError> {
    let (width, height) = (state.width, state.height);
    check_len("color gradient", 3 * width * height, d_color.len())?;
    check_len("alpha gradient", width * height, d_alpha.len())?;
    let bg = state.background;
    let partials: Vec<TileBackward> = state
        .tiles
        .par_iter()
        .enumerate()
        .map(|(t, list)| {
            let m = list.len();
            let mut acc = TileBackward {
                means: vec![Vector2::zeros(); m],
                conics: vec![[0.0; 3]; m],
                opacities: vec![0.0; m],
                colors: vec![[0.0; 3]; m],
            };
            for (x, y) in tile_pixels(t, width, height) {
                let p = y * width + x;
                let dc = [d_color[3 * p], d_color[3 * p + 1], d_color[3 * p + 2]];
                let da_img = d_alpha[p];
                if dc == [0.0; 3] && da_img == 0.0 {
                    continue;
                }
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let tf = state.final_t[p];
                let mut trans = tf;
                let mut behind = bg;
                for k in (0..state.traversed[p] as usize).rev() {
                    let s = &state.packed[list[k] as usize];
                    let (power, dx, dy) = power_at(s, px, py);
                    if power < CUTOFF_POWER {
                        continue;
                    }
                    let g = power.exp();
                    let raw = s.opacity * g;
                    let a = raw.min(MAX_ALPHA);
                    trans /= 1.0 - a;
                    let w = trans * a;
                    let mut d_a = da_img * tf / (1.0 - a);
                    for ch in 0..3 {
                        acc.colors[k][ch] += dc[ch] * w;
                        d_a += dc[ch] * trans * (s.color[ch] - behind[ch]);
                        behind[ch] = a * s.color[ch] + (1.0 - a) * behind[ch];
                    }
                    if raw >= MAX_ALPHA {
                        continue;
                    }
                    acc.opacities[k] += d_a * g;
                    let d_power = d_a * s.opacity * g;
                    // ∂power/∂mean = conic · (p − mean)
                    acc.means[k].x += d_power * (s.a * dx + s.b * dy);
                    acc.means[k].y += d_power * (s.b * dx + s.c * dy);
                    acc.conics[k][0] += -0.5 * d_power * dx * dx;
                    acc.conics[k][1] += -0.5 * d_power * dx * dy;
                    acc.conics[k][2] += -0.5 * d_power * dy * dy;
                }
            }
            acc
        })
        .collect();
    let n = state.packed.len();
    let mut grads = SplatGrads::zeros(n);
    let mut d_conic = vec![[0.0; 3]; n];
    for (list, part) in state.tiles.iter().zip(partials) {
        for (k, &idx) in list.iter().enumerate() {
            let i = idx as usize;
            grads.means[i] += part.means[k];
            grads.opacities[i] += part.opacities[k];
            for ch in 0..3 {
                grads.colors[i][ch] += part.colors[k][ch];
                d_conic[i][ch] += part.conics[k][ch];
            }
        }
    }
    for i in 0..n {
        let [a, b, c] = d_conic[i];
        let g = Matrix2::new(a, b, b, c);
        let q = state.conics[i];
        grads.covs[i] = -(q.transpose() * g * q.transpose());
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{numeric_gradient, worst_relative_error, FD_STEP};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn splat(x: f64, y: f64, var: f64, depth: f64, opacity: f64, color: [f64; 3]) -> ShadedSplat {
        ShadedSplat {
            splat: Splat2D {
                mean: Vector2::new(x, y),
                cov: Matrix2::identity() * var,
                depth,
                radius: FOOTPRINT_SIGMAS * var.sqrt(),
            },
            opacity,
            color,
        }
    }

    #[test]
    fn empty_scene_is_background() {
        let (out, _) = rasterize(&[], [0.2, 0.3, 0.4], 20, 18).unwrap();
        assert!(out.alpha.iter().all(|&a| a == 0.0));
        assert_eq!(out.pixel(19, 17), [0.2, 0.3, 0.4]);
    }

    #[test]
    fn single_wide_splat() {
        let bg = [0.1, 0.2, 0.3];
        let (out, _) = rasterize(&[splat(4.5, 4.5, 1e12, 1.0, 0.9, [1.0, 0.5, 0.0])], bg, 8, 8).unwrap();
        let c = out.pixel(4, 4);
        for ch in 0..3 {
            assert!((c[ch] - (0.9 * [1.0, 0.5, 0.0][ch] + 0.1 * bg[ch])).abs() < 1e-10);
        }
        assert!((out.alpha[36] - 0.9).abs() < 1e-10);
        assert!((out.transmittance[36] - (1.0 - out.alpha[36])).abs() < 1e-15);
    }

    #[test]
    fn two_splat_compositing_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let a1 = rng.gen_range(0.01..0.98);
            let a2 = rng.gen_range(0.01..0.98);
            let c1 = [rng.gen(), rng.gen(), rng.gen()];
            let c2 = [rng.gen(), rng.gen(), rng.gen()];
            let bg = [rng.gen(), rng.gen(), rng.gen()];
            let (d1, d2) = if rng.gen() { (1.0, 2.0) } else { (2.0, 1.0) };
            let s = [splat(2.5, 2.5, 1e14, d1, a1, c1), splat(2.5, 2.5, 1e14, d2, a2, c2)];
            let (out, _) = rasterize(&s, bg, 4, 4).unwrap();
            let (f, b) = if d1 < d2 { ((a1, c1), (a2, c2)) } else { ((a2, c2), (a1, c1)) };
            for ch in 0..3 {
                let want = f.0 * f.1[ch] + (1.0 - f.0) * b.0 * b.1[ch] + (1.0 - f.0) * (1.0 - b.0) * bg[ch];
                assert!((out.pixel(2, 2)[ch] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn equal_depth_ties_follow_index() {
        let s = [splat(2.5, 2.5, 1e14, 1.0, 0.5, [1.0, 0.0, 0.0]), splat(2.5, 2.5, 1e14, 1.0, 0.5, [0.0, 1.0, 0.0])];
        let (out, _) = rasterize(&s, [0.0; 3], 4, 4).unwrap();
        let p = out.pixel(1, 1);
        assert!(p[0] > p[1]);
    }

    #[test]
    fn partition_of_unity_and_monotone_transmittance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let splats: Vec<_> = (0..40)
            .map(|_| {
                splat(
                    rng.gen_range(0.0..32.0),
                    rng.gen_range(0.0..32.0),
                    rng.gen_range(1.0..20.0),
                    rng.gen_range(1.0..5.0),
                    rng.gen_range(0.05..0.99),
                    [1.0, 1.0, 1.0],
                )
            })
            .collect();
        // with white splats over black, color equals the summed weights
        let (out, _) = rasterize(&splats, [0.0; 3], 32, 32).unwrap();
        for p in 0..32 * 32 {
            assert!((out.color[3 * p] + out.transmittance[p] - 1.0).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&out.alpha[p]));
        }
    }

    #[test]
    fn backward_without_upstream_is_zero() {
        let s = [splat(3.0, 3.0, 4.0, 1.0, 0.5, [0.3, 0.6, 0.9])];
        let (_, st) = rasterize(&s, [0.0; 3], 8, 8).unwrap();
        let g = rasterize_backward(&st, &[0.0; 192], &[0.0; 64]).unwrap();
        assert_eq!(g, SplatGrads::zeros(1));
    }

    #[test]
    fn single_splat_opacity_gradient() {
        let bg = [0.2, 0.1, 0.7];
        let c = [0.9, 0.4, 0.1];
        let s = [splat(4.5, 4.5, 3.0, 1.0, 0.6, c)];
        let (_, st) = rasterize(&s, bg, 8, 8).unwrap();
        let mut dc = vec![0.0; 192];
        let p = 3 * (4 * 8 + 4);
        dc[p..p + 3].copy_from_slice(&[1.0, 1.0, 1.0]);
        let g = rasterize_backward(&st, &dc, &[0.0; 64]).unwrap();
        // pixel center coincides with the mean: g = 1
        let want: f64 = (0..3).map(|ch| c[ch] - bg[ch]).sum();
        assert!((g.opacities[0] - want).abs() < 1e-10);
    }

    fn scene(params: &[f64], n: usize) -> Vec<ShadedSplat> {
        (0..n)
            .map(|i| {
                let p = &params[i * 10..(i + 1) * 10];
                ShadedSplat {
                    splat: Splat2D {
                        mean: Vector2::new(p[0], p[1]),
                        cov: Matrix2::new(p[2], p[3], p[3], p[4]),
                        depth: 1.0 + i as f64,
                        radius: 100.0,
                    },
                    opacity: p[5],
                    color: [p[6], p[7], p[8]],
                }
            })
            .collect()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 6;
        let mut params = Vec::new();
        for _ in 0..n {
            params.extend([
                rng.gen_range(1.0..7.0),
                rng.gen_range(1.0..7.0),
                rng.gen_range(6.0..12.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(6.0..12.0),
                rng.gen_range(0.2..0.8),
                rng.gen(),
                rng.gen(),
                rng.gen(),
                0.0,
            ]);
        }
        let bg = [0.1, 0.2, 0.3];
        let wc: Vec<f64> = (0..192).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wa: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |p: &[f64]| {
            let (o, _) = rasterize(&scene(p, n), bg, 8, 8).unwrap();
            o.color.iter().zip(&wc).map(|(a, b)| a * b).sum::<f64>() + o.alpha.iter().zip(&wa).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, st) = rasterize(&scene(&params, n), bg, 8, 8).unwrap();
        let g = rasterize_backward(&st, &wc, &wa).unwrap();
        let mut analytic = Vec::new();
        for i in 0..n {
            let c = g.covs[i];
            analytic.extend([
                g.means[i].x,
                g.means[i].y,
                c[(0, 0)],
                c[(0, 1)] + c[(1, 0)],
                c[(1, 1)],
                g.opacities[i],
                g.colors[i][0],
                g.colors[i][1],
                g.colors[i][2],
                0.0,
            ]);
        }
        let numeric = numeric_gradient(&params, FD_STEP, loss);
        let err = worst_relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn thread_count_does_not_change_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let splats: Vec<_> = (0..200)
            .map(|_| splat(rng.gen_range(0.0..64.0), rng.gen_range(0.0..64.0), rng.gen_range(1.0..30.0), rng.gen_range(1.0..3.0), 0.7, [rng.gen(), 0.5, 0.5]))
            .collect();
        let run = |threads| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let (o, st) = rasterize(&splats, [0.0; 3], 64, 64).unwrap();
                let g = rasterize_backward(&st, &vec![1.0; 3 * 64 * 64], &vec![0.5; 64 * 64]).unwrap();
                (o, g)
            })
        };
        assert_eq!(run(1), run(3));
    }
}
