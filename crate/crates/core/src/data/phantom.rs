use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Case;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Background, edema, non-enhancing core, enhancing tumor.
pub const CLASSES: usize = 4;

/// Tissues rendered by the generator: outside the brain, healthy brain,
/// then one entry per tumor class.
const TISSUES: usize = CLASSES + 1;

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomConfig {
    pub extents: [usize; 3],
    /// Inclusive range for the number of tumors.
    pub tumor_count: (usize, usize),
    /// Edema semi-axis range in voxels.
    pub edema_radius: (f64, f64),
    /// Core semi-axes as a fraction of the edema semi-axes.
    pub core_fraction: (f64, f64),
    /// Enhancing semi-axes as a fraction of the core semi-axes.
    pub enhancing_fraction: (f64, f64),
    /// Mean intensity per modality and tissue
    /// (outside, healthy, edema, core, enhancing).
    pub intensities: Vec<[f64; TISSUES]>,
    /// Control points per axis of the multiplicative bias field.
    pub bias_grid: usize,
    /// The bias field lies in `[1 − amplitude, 1 + amplitude]`.
    pub bias_amplitude: f64,
    /// Relative amplitude of the smooth healthy-tissue texture.
    pub texture_amplitude: f64,
    pub noise_sigma: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            extents: [48; 3],
            tumor_count: (1, 2),
            edema_radius: (6.0, 11.0),
            core_fraction: (0.45, 0.7),
            enhancing_fraction: (0.45, 0.7),
            intensities: vec![
                [0.0, 1.0, 2.0, 1.6, 1.7],
                [0.0, 1.0, 0.75, 0.6, 0.65],
                [0.0, 1.0, 0.9, 0.7, 2.0],
                [0.0, 1.0, 1.9, 2.1, 1.6],
            ],
            bias_grid: 4,
            bias_amplitude: 0.2,
            texture_amplitude: 0.1,
            noise_sigma: 0.08,
        }
    }
}

impl PhantomConfig {
    pub fn with_edge(edge: usize) -> Self {
        let scale = edge as f64 / 48.0;
        let d = Self::default();
        PhantomConfig {
            extents: [edge; 3],
            edema_radius: (d.edema_radius.0 * scale, d.edema_radius.1 * scale),
            ..d
        }
    }

    pub fn modalities(&self) -> usize {
        self.intensities.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.extents.iter().any(|&e| e < 8) {
            return Err(Error::config(format!("extents {:?} must be at least 8", self.extents)));
        }
        if self.intensities.is_empty() || self.intensities.len() > 8 {
            return Err(Error::config("intensity table needs 1..=8 modality rows"));
        }
        if self.intensities.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::config("intensity table must be finite"));
        }
        let (lo, hi) = self.tumor_count;
        if lo > hi || hi == 0 {
            return Err(Error::config(format!("tumor count range {lo}..={hi} is empty")));
        }
        let ordered = |(a, b): (f64, f64)| a.is_finite() && b.is_finite() && 0.0 < a && a <= b;
        if !ordered(self.edema_radius) {
            return Err(Error::config(format!("edema radius range {:?} is invalid", self.edema_radius)));
        }
        for (name, r) in [("core", self.core_fraction), ("enhancing", self.enhancing_fraction)] {
            if !ordered(r) || r.1 >= 1.0 {
                return Err(Error::config(format!(
                    "{name} fraction range {r:?} must lie in (0, 1) so nested regions stay inside their parent"
                )));
            }
        }
        if self.bias_grid < 2 {
            return Err(Error::config("bias grid needs at least 2 control points per axis"));
        }
        if !(0.0..1.0).contains(&self.bias_amplitude) || !(0.0..1.0).contains(&self.texture_amplitude) {
            return Err(Error::config("bias and texture amplitudes must lie in [0, 1)"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise sigma must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Oriented ellipsoid: `|Rᵀ(x − c) / r| ≤ 1`.
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
    axes: [[f64; 3]; 3],
}

impl Ellipsoid {
    fn local(&self, p: [f64; 3]) -> [f64; 3] {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        std::array::from_fn(|a| (0..3).map(|k| self.axes[a][k] * d[k]).sum::<f64>() / self.radii[a])
    }

    fn contains(&self, p: [f64; 3]) -> bool {
        self.local(p).iter().map(|u| u * u).sum::<f64>() <= 1.0
    }

    fn to_world(&self, u: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|k| self.center[k] + (0..3).map(|a| self.axes[a][k] * u[a] * self.radii[a]).sum::<f64>())
    }

    /// Same orientation, semi-axes scaled by `f`, center shifted inside so
    /// the result stays within `self`.
    fn nested(&self, f: f64, rng: &mut impl Rng) -> Ellipsoid {
        let shift = random_in_ball(rng, 0.5 * (1.0 - f));
        Ellipsoid {
            center: self.to_world(shift),
            radii: self.radii.map(|r| r * f),
            axes: self.axes,
        }
    }
}

fn random_in_ball(rng: &mut impl Rng, radius: f64) -> [f64; 3] {
    loop {
        let u: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..=1.0));
        if u.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
            return u.map(|v| v * radius);
        }
    }
}

fn rotation(rng: &mut impl Rng) -> [[f64; 3]; 3] {
    let tau = std::f64::consts::TAU;
    let (a, b, c) = (rng.random_range(0.0..tau), rng.random_range(0.0..tau), rng.random_range(0.0..tau));
    let (sa, ca, sb, cb, sc, cc) = (a.sin(), a.cos(), b.sin(), b.cos(), c.sin(), c.cos());
    [
        [ca * cb, ca * sb * sc - sa * cc, ca * sb * cc + sa * sc],
        [sa * cb, sa * sb * sc + ca * cc, sa * sb * cc - ca * sc],
        [-sb, cb * sc, cb * cc],
    ]
}

/// Trilinear interpolation of a random `grid³` lattice with values in `[lo, hi]`.
fn smooth_field(rng: &mut impl Rng, extents: [usize; 3], grid: usize, lo: f64, hi: f64) -> Vec<f64> {
    let nodes: Vec<f64> = (0..grid.pow(3)).map(|_| rng.random_range(lo..=hi)).collect();
    let [d, h, w] = extents;
    let coord = |i: usize, e: usize| {
        let u = i as f64 * (grid - 1) as f64 / (e - 1).max(1) as f64;
        let i0 = (u.floor() as usize).min(grid - 2);
        (i0, u - i0 as f64)
    };
    let mut out = Vec::with_capacity(d * h * w);
    for z in 0..d {
        let (z0, fz) = coord(z, d);
        for y in 0..h {
            let (y0, fy) = coord(y, h);
            for x in 0..w {
                let (x0, fx) = coord(x, w);
                let mut v = 0.0;
                for (dz, wz) in [(0, 1.0 - fz), (1, fz)] {
                    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
                        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                            v += wz * wy * wx * nodes[((z0 + dz) * grid + y0 + dy) * grid + x0 + dx];
                        }
                    }
                }
                out.push(v);
            }
        }
    }
    out
}

/// Seed of case `index` in a dataset generated from `dataset_seed`.
pub fn case_seed(dataset_seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the pair, so nearby datasets do not overlap.
    let mut z = dataset_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Renders one phantom. The result is a pure function of `(config, seed)`.
pub fn synth_case(config: &PhantomConfig, seed: u64) -> Result<Case> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ext = config.extents.map(|e| e as f64);

    let brain = Ellipsoid {
        center: ext.map(|e| (e - 1.0) / 2.0 + rng.random_range(-0.04..0.04) * e),
        radii: ext.map(|e| e * rng.random_range(0.36..0.44)),
        axes: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    };

    let count = rng.random_range(config.tumor_count.0..=config.tumor_count.1);
    let mut tumors = Vec::with_capacity(count);
    for _ in 0..count {
        let r = rng.random_range(config.edema_radius.0..=config.edema_radius.1);
        let edema = Ellipsoid {
            center: brain.to_world(random_in_ball(&mut rng, 0.55)),
            radii: std::array::from_fn(|_| r * rng.random_range(0.8..1.2)),
            axes: rotation(&mut rng),
        };
        let core = edema.nested(rng.random_range(config.core_fraction.0..=config.core_fraction.1), &mut rng);
        let enhancing = core.nested(
            rng.random_range(config.enhancing_fraction.0..=config.enhancing_fraction.1),
            &mut rng,
        );
        tumors.push([edema, core, enhancing]);
    }

    let [d, h, w] = config.extents;
    let n = d * h * w;
    let mut labels = vec![0u8; n];
    let mut mask = vec![false; n];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let j = (z * h + y) * w + x;
                let p = [z as f64, y as f64, x as f64];
                if !brain.contains(p) {
                    continue;
                }
                mask[j] = true;
                for nest in &tumors {
                    let level = nest.iter().take_while(|e| e.contains(p)).count() as u8;
                    labels[j] = labels[j].max(level);
                }
            }
        }
    }

    let texture = smooth_field(&mut rng, config.extents, 6, -1.0, 1.0);
    let mut volumes = Vec::with_capacity(config.modalities());
    for row in &config.intensities {
        let a = config.bias_amplitude;
        let bias = smooth_field(&mut rng, config.extents, config.bias_grid, 1.0 - a, 1.0 + a);
        let data = (0..n)
            .map(|j| {
                let tissue = if mask[j] { 1 + labels[j] as usize } else { 0 };
                let mut mean = row[tissue];
                if tissue == 1 {
                    mean *= 1.0 + config.texture_amplitude * texture[j];
                }
                let noise: f64 = StandardNormal.sample(&mut rng);
                (mean * bias[j] + config.noise_sigma * noise) as f32
            })
            .collect();
        volumes.push(Tensor::new([d, h, w], data)?);
    }
    Case::new(format!("synth-{seed}"), CLASSES, volumes, labels, mask)
}
