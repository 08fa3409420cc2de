//! Synthetic phantom corpus with controlled content/style factors.
//!
//! Content is geometry: a handful of primitive shapes (ellipsoid, box, tube)
//! with per-shape base intensities, rendered into a cubic grid. Style is an
//! intensity pipeline applied on top: texture multiply, gain/bias, gamma,
//! Gaussian blur, additive noise, clip to [0, 1]. Domains are style presets
//! whose parameters sit in disjoint ranges, so "which domain" is linearly
//! decodable from appearance while geometry is sampled independently of it.
//!
//! Voxel rasters are z-major: index = z * side^2 + y * side + x. Shape
//! coordinates are normalized, voxel centers at (i + 0.5) / side.

use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::arrayio;
use crate::{Error, Result};

/// Segmentation classes: background + one per shape kind.
pub const NUM_SEG_CLASSES: usize = 4;
/// Shapes per volume are drawn uniformly from this range (inclusive).
pub const SHAPE_COUNT_MIN: usize = 2;
pub const SHAPE_COUNT_MAX: usize = 4;
/// Multiplicative texture amplitude when texture_frequency > 0.
const TEXTURE_AMPLITUDE: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Ellipsoid,
    Box,
    Tube,
}

impl ShapeKind {
    /// Segmentation class id; 0 is background.
    pub fn seg_class(self) -> u8 {
        match self {
            ShapeKind::Ellipsoid => 1,
            ShapeKind::Box => 2,
            ShapeKind::Tube => 3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    /// Center in normalized [0, 1) coordinates.
    pub center: [f64; 3],
    /// Semi-axes in normalized units.
    pub radii: [f64; 3],
    /// Tube long axis (0 = x, 1 = y, 2 = z); unused by other kinds.
    pub axis: usize,
    /// Base intensity in [0.2, 0.8].
    pub intensity: f64,
}

impl ShapeSpec {
    fn contains(&self, p: [f64; 3]) -> bool {
        let d = [
            p[0] - self.center[0],
            p[1] - self.center[1],
            p[2] - self.center[2],
        ];
        match self.kind {
            ShapeKind::Ellipsoid => {
                let mut q = 0.0;
                for i in 0..3 {
                    let t = d[i] / self.radii[i];
                    q += t * t;
                }
                q <= 1.0
            }
            ShapeKind::Box => (0..3).all(|i| d[i].abs() <= self.radii[i]),
            ShapeKind::Tube => {
                let a = self.axis;
                let (c0, c1) = ((a + 1) % 3, (a + 2) % 3);
                let t0 = d[c0] / self.radii[c0];
                let t1 = d[c1] / self.radii[c1];
                t0 * t0 + t1 * t1 <= 1.0 && d[a].abs() <= self.radii[a]
            }
        }
    }
}

/// Full geometric description of one volume. Everything derived from `seed`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContentSpec {
    pub seed: u64,
    pub shapes: Vec<ShapeSpec>,
}

impl ContentSpec {
    pub fn generate(seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let count = rng.gen_range(SHAPE_COUNT_MIN..=SHAPE_COUNT_MAX);
        let shapes = (0..count)
            .map(|_| {
                let kind = match rng.gen_range(0..3) {
                    0 => ShapeKind::Ellipsoid,
                    1 => ShapeKind::Box,
                    _ => ShapeKind::Tube,
                };
                ShapeSpec {
                    kind,
                    center: [
                        rng.gen_range(0.25..0.75),
                        rng.gen_range(0.25..0.75),
                        rng.gen_range(0.25..0.75),
                    ],
                    radii: [
                        rng.gen_range(0.10..0.28),
                        rng.gen_range(0.10..0.28),
                        rng.gen_range(0.10..0.28),
                    ],
                    axis: rng.gen_range(0..3),
                    intensity: rng.gen_range(0.2..0.8),
                }
            })
            .collect();
        Self { seed, shapes }
    }

    /// Class index for content probing: shape count mapped to 0-based classes.
    pub fn content_label(&self) -> usize {
        self.shapes.len() - SHAPE_COUNT_MIN
    }

    pub fn num_content_classes() -> usize {
        SHAPE_COUNT_MAX - SHAPE_COUNT_MIN + 1
    }
}

/// Style parameters. The identity spec leaves geometry untouched.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: usize,
    pub intensity_gain: f64,
    pub intensity_bias: f64,
    pub gamma: f64,
    pub noise_sigma: f64,
    pub blur_radius: usize,
    pub texture_frequency: f64,
}

impl DomainSpec {
    pub fn identity(domain_id: usize) -> Self {
        Self {
            domain_id,
            intensity_gain: 1.0,
            intensity_bias: 0.0,
            gamma: 1.0,
            noise_sigma: 0.0,
            blur_radius: 0,
            texture_frequency: 0.0,
        }
    }

    /// Deterministic preset for domain `k`: every style parameter is a linear
    /// ramp in k, so any number of domains gets disjoint ranges.
    pub fn preset(domain_id: usize) -> Self {
        let k = domain_id as f64;
        Self {
            domain_id,
            intensity_gain: 0.70 + 0.40 * k,
            intensity_bias: 0.02 * k,
            gamma: 0.75 + 0.35 * k,
            noise_sigma: 0.004 + 0.010 * k,
            blur_radius: domain_id % 2,
            texture_frequency: 3.0 * k,
        }
    }
}

/// A cubic voxel grid, z-major raster, f64 in memory (stored as f32 on disk).
#[derive(Debug, Clone)]
pub struct Volume {
    pub side: usize,
    pub data: Vec<f64>,
}

impl Volume {
    pub fn voxel(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[z * self.side * self.side + y * self.side + x]
    }
}

/// Pure geometry rendering: painter's algorithm over the shape list, later
/// shapes overwrite earlier ones, background is 0.
pub fn render_geometry(content: &ContentSpec, side: usize) -> Volume {
    let mut data = vec![0.0; side * side * side];
    paint(content, side, |idx, shape| data[idx] = shape.intensity);
    Volume { side, data }
}

/// Per-voxel segmentation classes, derived solely from the content spec.
pub fn render_seg_mask(content: &ContentSpec, side: usize) -> Vec<u8> {
    let mut mask = vec![0u8; side * side * side];
    paint(content, side, |idx, shape| mask[idx] = shape.kind.seg_class());
    mask
}

fn paint(content: &ContentSpec, side: usize, mut write: impl FnMut(usize, &ShapeSpec)) {
    let inv = 1.0 / side as f64;
    for z in 0..side {
        for y in 0..side {
            for x in 0..side {
                let p = [
                    (x as f64 + 0.5) * inv,
                    (y as f64 + 0.5) * inv,
                    (z as f64 + 0.5) * inv,
                ];
                let idx = z * side * side + y * side + x;
                for shape in &content.shapes {
                    if shape.contains(p) {
                        write(idx, shape);
                    }
                }
            }
        }
    }
}

/// Style pipeline on top of a rendered geometry, in order: texture multiply,
/// gain/bias, gamma, blur, additive Gaussian noise, clip to [0, 1]. Stages at
/// their identity parameters are skipped outright, so the identity domain
/// reproduces the geometry bit for bit.
pub fn style_transform(geometry: &Volume, domain: &DomainSpec, noise_seed: u64) -> Volume {
    let side = geometry.side;
    let mut data = geometry.data.clone();
    if domain.texture_frequency != 0.0 {
        let f = domain.texture_frequency;
        let inv = 1.0 / side as f64;
        for z in 0..side {
            for y in 0..side {
                for x in 0..side {
                    let (u, v, w) = (
                        (x as f64 + 0.5) * inv,
                        (y as f64 + 0.5) * inv,
                        (z as f64 + 0.5) * inv,
                    );
                    let tex = 1.0
                        + TEXTURE_AMPLITUDE
                            * (std::f64::consts::TAU * f * u).sin()
                            * (std::f64::consts::TAU * f * v).sin()
                            * (std::f64::consts::TAU * f * w).sin();
                    data[z * side * side + y * side + x] *= tex;
                }
            }
        }
    }
    if domain.intensity_gain != 1.0 || domain.intensity_bias != 0.0 {
        for v in data.iter_mut() {
            *v = domain.intensity_gain * *v + domain.intensity_bias;
        }
    }
    if domain.gamma != 1.0 {
        for v in data.iter_mut() {
            *v = v.max(0.0).powf(domain.gamma);
        }
    }
    if domain.blur_radius > 0 {
        data = gaussian_blur(&data, side, domain.blur_radius);
    }
    if domain.noise_sigma > 0.0 {
        let mut rng = ChaCha12Rng::seed_from_u64(noise_seed);
        let normal = Normal::new(0.0, domain.noise_sigma).expect("valid sigma");
        for v in data.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    let touched = domain.texture_frequency != 0.0
        || domain.intensity_gain != 1.0
        || domain.intensity_bias != 0.0
        || domain.gamma != 1.0
        || domain.blur_radius > 0
        || domain.noise_sigma > 0.0;
    if touched {
        for v in data.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    Volume { side, data }
}

/// Separable Gaussian blur, sigma = radius / 2, replicate boundary.
fn gaussian_blur(data: &[f64], side: usize, radius: usize) -> Vec<f64> {
    let sigma = radius as f64 / 2.0;
    let kernel: Vec<f64> = (-(radius as isize)..=radius as isize)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let r = radius as isize;
    let s = side as isize;
    let idx = |x: isize, y: isize, z: isize| -> usize {
        let cx = x.clamp(0, s - 1) as usize;
        let cy = y.clamp(0, s - 1) as usize;
        let cz = z.clamp(0, s - 1) as usize;
        cz * side * side + cy * side + cx
    };
    let mut a = data.to_vec();
    let mut b = vec![0.0; data.len()];
    // x, then y, then z
    for pass in 0..3 {
        for z in 0..s {
            for y in 0..s {
                for x in 0..s {
                    let mut acc = 0.0;
                    for (ki, k) in kernel.iter().enumerate() {
                        let off = ki as isize - r;
                        let src = match pass {
                            0 => idx(x + off, y, z),
                            1 => idx(x, y + off, z),
                            _ => idx(x, y, z + off),
                        };
                        acc += k * a[src];
                    }
                    b[idx(x, y, z)] = acc;
                }
            }
        }
        std::mem::swap(&mut a, &mut b);
    }
    a
}

/// Geometry + style in one call.
pub fn render_phantom(
    content: &ContentSpec,
    domain: &DomainSpec,
    side: usize,
    noise_seed: u64,
) -> Volume {
    let geo = render_geometry(content, side);
    style_transform(&geo, domain, noise_seed)
}

// ---- corpus on disk ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub n_volumes: usize,
    pub n_domains: usize,
    pub side: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_volumes: 150,
            n_domains: 3,
            side: 32,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Volume file path relative to the manifest's directory, no extension.
    pub stem: String,
    pub domain_id: usize,
    pub content_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub n_domains: usize,
    pub side: usize,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

/// Sidecar next to each `.f32` volume file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VolumeSidecar {
    pub shape: [usize; 3],
    pub dtype: String,
    pub domain_id: usize,
    pub content_seed: u64,
    /// Full geometry description; segmentation masks are recomputed from it.
    pub content: ContentSpec,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Generates and writes the corpus. Domain assignment is round-robin (so
/// counts are balanced within 1) and content seeds are fresh RNG draws,
/// independent of the assignment.
pub fn build_corpus(cfg: &CorpusConfig, out_dir: &Path) -> Result<CorpusManifest> {
    if cfg.n_domains == 0 || cfg.n_volumes == 0 {
        return Err(Error::Config("corpus: n_domains and n_volumes must be positive".into()));
    }
    if cfg.side == 0 {
        return Err(Error::Config("corpus: side must be positive".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut entries = Vec::with_capacity(cfg.n_volumes);
    for i in 0..cfg.n_volumes {
        let content_seed = rng.next_u64();
        let noise_seed = rng.next_u64();
        let domain_id = i % cfg.n_domains;
        let content = ContentSpec::generate(content_seed);
        let domain = DomainSpec::preset(domain_id);
        let vol = render_phantom(&content, &domain, cfg.side, noise_seed);
        let stem = format!("vol_{:05}", i);
        write_volume(out_dir, &stem, &vol, &VolumeSidecar {
            shape: [cfg.side; 3],
            dtype: "f32-le".to_string(),
            domain_id,
            content_seed,
            content,
        })?;
        entries.push(ManifestEntry {
            stem,
            domain_id,
            content_seed,
        });
    }
    let manifest = CorpusManifest {
        n_domains: cfg.n_domains,
        side: cfg.side,
        seed: cfg.seed,
        entries,
    };
    let file = std::fs::File::create(out_dir.join(MANIFEST_FILE))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), &manifest)?;
    Ok(manifest)
}

pub fn write_volume(dir: &Path, stem: &str, vol: &Volume, sidecar: &VolumeSidecar) -> Result<()> {
    let data32: Vec<f32> = vol.data.iter().map(|&v| v as f32).collect();
    arrayio::write_f32_raw(&dir.join(format!("{}.f32", stem)), &data32)?;
    let file = std::fs::File::create(dir.join(format!("{}.json", stem)))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), sidecar)?;
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<CorpusManifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = std::fs::read(&path)
        .map_err(|e| Error::MissingPrerequisite(format!("{}: {}", path.display(), e)))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn read_volume(dir: &Path, stem: &str) -> Result<(Volume, VolumeSidecar)> {
    let sidecar_path = dir.join(format!("{}.json", stem));
    let bytes = std::fs::read(&sidecar_path)
        .map_err(|e| Error::MissingPrerequisite(format!("{}: {}", sidecar_path.display(), e)))?;
    let sidecar: VolumeSidecar = serde_json::from_slice(&bytes)?;
    let raw = arrayio::read_f32_raw(&dir.join(format!("{}.f32", stem)))?;
    let side = sidecar.shape[0];
    if raw.len() != side * side * side {
        return Err(Error::Config(format!(
            "volume {}: {} values for shape {:?}",
            stem,
            raw.len(),
            sidecar.shape
        )));
    }
    let vol = Volume {
        side,
        data: raw.iter().map(|&v| v as f64).collect(),
    };
    Ok((vol, sidecar))
}

/// Path stem helper for latent caches tied to a volume stem.
pub fn resolve_stems(manifest: &CorpusManifest) -> Vec<PathBuf> {
    manifest.entries.iter().map(|e| PathBuf::from(&e.stem)).collect()
}
