//! Synthetic terrain tiles: fractal heightmaps as ground-truth depth and
//! hillshaded renderings as the RGB input.
//!
//! Heightmaps come from midpoint-displacement (diamond-square) on a
//! power-of-two-plus-one lattice, seeded per (seed, index) so any tile can
//! be regenerated independently and the whole dataset is bit-reproducible.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{seeded_rng, splitmix64, Value};
use crate::depth::DepthMap;
use crate::error::{Error, Result};

/// Vertical exaggeration applied to [0,1] heights before shading.
const SHADE_Z_SCALE: f32 = 24.0;
/// Shade vs. elevation-colormap mix.
const SHADE_WEIGHT: f32 = 0.7;

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TerrainConfig {
    pub tile_size: usize,
    pub roughness: f64,
    pub seed: u64,
    pub count: usize,
    pub sun_azimuth_deg: f64,
    pub sun_elevation_deg: f64,
}

impl Default for TerrainConfig {
    fn default() -> Self {
        TerrainConfig {
            tile_size: 64,
            roughness: 0.55,
            seed: 42,
            count: 512,
            sun_azimuth_deg: 315.0,
            sun_elevation_deg: 45.0,
        }
    }
}

impl TerrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tile_size < 2 {
            return Err(Error::config(format!(
                "tile_size must be >= 2, got {}",
                self.tile_size
            )));
        }
        if !(self.roughness > 0.0 && self.roughness < 1.0) {
            return Err(Error::config(format!(
                "roughness must be in (0, 1), got {}",
                self.roughness
            )));
        }
        if self.count == 0 {
            return Err(Error::config("count must be >= 1"));
        }
        Ok(())
    }
}

/// One dataset element: rendered RGB input and its normalized depth target.
#[derive(Clone, Debug)]
pub struct SamplePair {
    pub id: String,
    /// [3, H, W] in [0, 1].
    pub rgb: Value,
    /// [0, 1] per-tile min-max normalized heights.
    pub depth: DepthMap,
}

/// Deterministic per-tile RNG.
fn tile_rng(seed: u64, index: u64) -> ChaCha8Rng {
    seeded_rng(seed, splitmix64(index).wrapping_add(0x7E11))
}

/// Diamond-square heightmap, min-max normalized to [0, 1].
pub fn generate_heightmap(cfg: &TerrainConfig, index: u64) -> Result<DepthMap> {
    cfg.validate()?;
    let mut rng = tile_rng(cfg.seed, index);
    let n = (cfg.tile_size - 1).next_power_of_two().max(2);
    let side = n + 1;
    let mut grid = vec![0.0f32; side * side];

    // seeded corners
    for &(y, x) in &[(0, 0), (0, n), (n, 0), (n, n)] {
        grid[y * side + x] = rng.gen_range(0.0..1.0);
    }

    let rough = cfg.roughness as f32;
    let mut amp = rough;
    let mut step = n;
    while step >= 2 {
        let half = step / 2;
        // diamond: cell centers from their four diagonal corners
        for y in (half..n).step_by(step) {
            for x in (half..n).step_by(step) {
                let avg = (grid[(y - half) * side + x - half]
                    + grid[(y - half) * side + x + half]
                    + grid[(y + half) * side + x - half]
                    + grid[(y + half) * side + x + half])
                    / 4.0;
                grid[y * side + x] = avg + rng.gen_range(-amp..amp);
            }
        }
        // square: edge midpoints; boundary points average only their two
        // in-line neighbours so the zero-displacement limit stays bilinear
        for y in (0..=n).step_by(half) {
            let x0 = if (y / half) % 2 == 0 { half } else { 0 };
            for x in (x0..=n).step_by(step) {
                let avg = if y == 0 || y == n {
                    (grid[y * side + x - half] + grid[y * side + x + half]) / 2.0
                } else if x == 0 || x == n {
                    (grid[(y - half) * side + x] + grid[(y + half) * side + x]) / 2.0
                } else {
                    (grid[y * side + x - half]
                        + grid[y * side + x + half]
                        + grid[(y - half) * side + x]
                        + grid[(y + half) * side + x])
                        / 4.0
                };
                grid[y * side + x] = avg + rng.gen_range(-amp..amp);
            }
        }
        amp *= rough;
        step = half;
    }

    // crop to tile size and normalize per tile
    let ts = cfg.tile_size;
    let mut values = Vec::with_capacity(ts * ts);
    for y in 0..ts {
        values.extend_from_slice(&grid[y * side..y * side + ts]);
    }
    let lo = values.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let range = hi - lo;
    if range > 0.0 {
        for v in values.iter_mut() {
            *v = (*v - lo) / range;
        }
    } else {
        values.fill(0.0);
    }
    DepthMap::from_values(ts, ts, values)
}

/// Lambertian hillshade of a [0,1] heightmap, clamped to [0, 1].
/// A flat map shades uniformly at sin(elevation).
pub fn hillshade(heights: &DepthMap, cfg: &TerrainConfig) -> Vec<f32> {
    let (h, w) = (heights.height, heights.width);
    let az = cfg.sun_azimuth_deg.to_radians() as f32;
    let el = cfg.sun_elevation_deg.to_radians() as f32;
    let light = [az.sin() * el.cos(), -az.cos() * el.cos(), el.sin()];
    let v = &heights.values;
    let mut out = vec![0.0f32; h * w];
    let at = |y: usize, x: usize| v[y * w + x];
    for y in 0..h {
        for x in 0..w {
            // central differences inside, one-sided at the borders
            let (xm, xp) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let (ym, yp) = (y.saturating_sub(1), (y + 1).min(h - 1));
            let gx = (at(y, xp) - at(y, xm)) / (xp - xm) as f32 * SHADE_Z_SCALE;
            let gy = (at(yp, x) - at(ym, x)) / (yp - ym) as f32 * SHADE_Z_SCALE;
            let norm = (gx * gx + gy * gy + 1.0).sqrt();
            let dot = (-gx * light[0] - gy * light[1] + light[2]) / norm;
            out[y * w + x] = dot.clamp(0.0, 1.0);
        }
    }
    out
}

fn elevation_color(h: f32) -> [f32; 3] {
    const LOW: [f32; 3] = [0.20, 0.35, 0.18];
    const MID: [f32; 3] = [0.55, 0.45, 0.30];
    const HIGH: [f32; 3] = [0.95, 0.95, 0.95];
    let lerp = |a: [f32; 3], b: [f32; 3], t: f32| {
        [
            a[0] + (b[0] - a[0]) * t,
            a[1] + (b[1] - a[1]) * t,
            a[2] + (b[2] - a[2]) * t,
        ]
    };
    if h < 0.5 {
        lerp(LOW, MID, h * 2.0)
    } else {
        lerp(MID, HIGH, (h - 0.5) * 2.0)
    }
}

/// Hillshade blended with an elevation colormap, as [3, H, W] in [0, 1].
pub fn render_rgb(heights: &DepthMap, cfg: &TerrainConfig) -> Result<Value> {
    let (h, w) = (heights.height, heights.width);
    let shade = hillshade(heights, cfg);
    let hw = h * w;
    let mut data = vec![0.0f32; 3 * hw];
    for i in 0..hw {
        let col = elevation_color(heights.values[i]);
        for c in 0..3 {
            data[c * hw + i] =
                (SHADE_WEIGHT * shade[i] + (1.0 - SHADE_WEIGHT) * col[c]).clamp(0.0, 1.0);
        }
    }
    Value::new(vec![3, h, w], data)
}

/// Generate the full pair for one tile index.
pub fn generate_sample(cfg: &TerrainConfig, index: u64) -> Result<SamplePair> {
    let depth = generate_heightmap(cfg, index)?;
    let rgb = render_rgb(&depth, cfg)?;
    Ok(SamplePair {
        id: format!("tile_{index:05}"),
        rgb,
        depth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TerrainConfig {
        TerrainConfig::default()
    }

    #[test]
    fn heightmap_is_deterministic_per_seed_and_index() {
        let a = generate_heightmap(&cfg(), 3).unwrap();
        let b = generate_heightmap(&cfg(), 3).unwrap();
        assert_eq!(a.values, b.values);
        let c = generate_heightmap(&cfg(), 4).unwrap();
        assert_ne!(a.values, c.values);
        let other = TerrainConfig {
            seed: 43,
            ..cfg()
        };
        let d = generate_heightmap(&other, 3).unwrap();
        assert_ne!(a.values, d.values);
    }

    #[test]
    fn heightmap_is_normalized() {
        let d = generate_heightmap(&cfg(), 0).unwrap();
        let lo = d.values.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = d.values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        assert_eq!(lo, 0.0);
        assert_eq!(hi, 1.0);
    }

    #[test]
    fn vanishing_roughness_approaches_bilinear_corner_interpolation() {
        let small = TerrainConfig {
            roughness: 1e-6,
            tile_size: 65,
            ..cfg()
        };
        let d = generate_heightmap(&small, 7).unwrap();
        // corners of the 65x65 lattice survive the crop at size 65
        let n = 64usize;
        let side = 65usize;
        let at = |y: usize, x: usize| d.values[y * side + x];
        let (c00, c01, c10, c11) = (at(0, 0), at(0, n), at(n, 0), at(n, n));
        for &(y, x) in &[(32usize, 32usize), (16, 48), (8, 8), (40, 24)] {
            let fy = y as f32 / n as f32;
            let fx = x as f32 / n as f32;
            let bilinear = c00 * (1.0 - fy) * (1.0 - fx)
                + c01 * (1.0 - fy) * fx
                + c10 * fy * (1.0 - fx)
                + c11 * fy * fx;
            assert!(
                (at(y, x) - bilinear).abs() < 1e-3,
                "({y},{x}): {} vs {bilinear}",
                at(y, x)
            );
        }
    }

    #[test]
    fn tiles_have_usable_variation() {
        let c = cfg();
        let mut mean_std = 0.0f64;
        for i in 0..100 {
            let d = generate_heightmap(&c, i).unwrap();
            let n = d.values.len() as f64;
            let mean = d.values.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = d
                .values
                .iter()
                .map(|&v| (v as f64 - mean).powi(2))
                .sum::<f64>()
                / n;
            mean_std += var.sqrt();
        }
        mean_std /= 100.0;
        assert!(mean_std > 0.05, "mean tile std {mean_std}");
    }

    #[test]
    fn flat_map_shades_uniformly_at_sin_elevation() {
        let c = cfg();
        let flat = DepthMap::from_values(16, 16, vec![0.4; 256]).unwrap();
        let shade = hillshade(&flat, &c);
        let expect = (c.sun_elevation_deg.to_radians() as f32).sin();
        for s in shade {
            assert!((s - expect).abs() < 1e-6, "{s} vs {expect}");
        }
        let rgb = render_rgb(&flat, &c).unwrap();
        let first = rgb.data[0];
        for v in &rgb.data[..256] {
            assert_eq!(*v, first);
        }
    }

    #[test]
    fn rotating_sun_by_half_turn_inverts_ramp_contrast() {
        // gentle ramp along x, evaluated away from the clamp
        let w = 16usize;
        let values: Vec<f32> = (0..w * w)
            .map(|i| 0.3 + 0.01 * (i % w) as f32)
            .collect();
        let ramp = DepthMap::from_values(w, w, values).unwrap();
        let a = hillshade(&ramp, &cfg());
        let flipped = TerrainConfig {
            sun_azimuth_deg: cfg().sun_azimuth_deg + 180.0,
            ..cfg()
        };
        let b = hillshade(&ramp, &flipped);
        // contrast between two interior pixels on the ramp
        let ca = a[8 * w + 10] - a[8 * w + 4];
        let cb = b[8 * w + 10] - b[8 * w + 4];
        assert!(ca * cb < 0.0, "contrast did not flip: {ca} vs {cb}");
    }

    #[test]
    fn rgb_output_is_in_range() {
        let d = generate_heightmap(&cfg(), 11).unwrap();
        let rgb = render_rgb(&d, &cfg()).unwrap();
        for v in rgb.data {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn config_validation() {
        assert!(TerrainConfig {
            roughness: 1.0,
            ..cfg()
        }
        .validate()
        .is_err());
        assert!(TerrainConfig { count: 0, ..cfg() }.validate().is_err());
    }
}
