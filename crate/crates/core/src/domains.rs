//! Synthetic corpus generation: brain-like phantoms, scanner-style
//! intensity shifts, lesion injection with exact ground-truth masks, and
//! manifest-driven corpus assembly.
//!
//! Generation order is fixed: phantom, then lesion, then shift — pathology
//! is imaged through the scanner.

use std::fs;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::derive_seed;
use crate::image::{ImageGrid, Mask};

// ── domain shift ─────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    /// intensity exponent (> 0)
    pub gamma: f64,
    /// linear gain
    pub contrast: f64,
    /// additive offset
    pub brightness: f64,
    /// amplitude of the smooth multiplicative bias field
    pub bias_amp: f64,
    /// additive Gaussian noise level
    pub noise_sigma: f64,
    pub seed: u64,
}

impl DomainSpec {
    pub fn identity(seed: u64) -> Self {
        DomainSpec {
            gamma: 1.0,
            contrast: 1.0,
            brightness: 0.0,
            bias_amp: 0.0,
            noise_sigma: 0.0,
            seed,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.gamma == 1.0
            && self.contrast == 1.0
            && self.brightness == 0.0
            && self.bias_amp == 0.0
            && self.noise_sigma == 0.0
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        DomainSpec { seed, ..self.clone() }
    }
}

/// out = clamp(((img^gamma)·contrast + brightness)·bias + noise). The
/// identity spec returns the input bitwise.
pub fn apply_shift(img: &ImageGrid, spec: &DomainSpec) -> Result<ImageGrid> {
    if spec.gamma <= 0.0 {
        return Err(Error::Config(format!("gamma {} must be > 0", spec.gamma)));
    }
    if spec.is_identity() {
        return Ok(img.clone());
    }
    let (h, w) = (img.height(), img.width());
    let mut out = vec![0.0; h * w];
    for (o, &v) in out.iter_mut().zip(img.data()) {
        let g = if spec.gamma == 1.0 { v } else { v.powf(spec.gamma) };
        *o = g * spec.contrast + spec.brightness;
    }
    if spec.bias_amp != 0.0 {
        let field = bias_field(h, w, spec.bias_amp, derive_seed(spec.seed, 0x62696173, 0));
        for (o, &f) in out.iter_mut().zip(&field) {
            *o *= f;
        }
    }
    if spec.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 0x6e6f6973, 0));
        for o in &mut out {
            *o += spec.noise_sigma * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
    }
    for o in &mut out {
        *o = o.clamp(0.0, 1.0);
    }
    ImageGrid::new(h, w, out)
}

/// Smooth multiplicative field 1 + amp·B with |B| <= 1: a seeded sum of
/// three low-frequency plane-wave cosines.
fn bias_field(h: usize, w: usize, amp: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut waves = Vec::with_capacity(3);
    let mut total_a = 0.0;
    for _ in 0..3 {
        let fx: f64 = rng.random_range(0.4..1.4);
        let fy: f64 = rng.random_range(0.4..1.4);
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let a: f64 = rng.random_range(0.5..1.0);
        total_a += a;
        waves.push((fx, fy, phase, a));
    }
    let mut field = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let u = x as f64 / w as f64;
            let v = y as f64 / h as f64;
            let mut b = 0.0;
            for &(fx, fy, phase, a) in &waves {
                b += a * (std::f64::consts::TAU * (fx * u + fy * v) + phase).cos();
            }
            field[y * w + x] = 1.0 + amp * b / total_a;
        }
    }
    field
}

// ── phantom anatomy ──────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ay: f64,
    ax: f64,
    theta: f64,
}

impl Ellipse {
    /// Elliptical radius: 1.0 on the boundary.
    fn radius(&self, y: f64, x: f64) -> f64 {
        let dy = y - self.cy;
        let dx = x - self.cx;
        let (s, c) = self.theta.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        ((u / self.ax).powi(2) + (v / self.ay).powi(2)).sqrt()
    }
}

/// Procedural anatomy: skull ellipse, banded interior tissue, cortex ring
/// and two dark ventricles, all jittered per seed.
#[derive(Debug, Clone)]
pub struct Phantom {
    h: usize,
    w: usize,
    skull: Ellipse,
    vents: [Ellipse; 2],
    vent_scale: f64,
    cortex: f64,
    white: f64,
    band_amp: f64,
    band_phase: f64,
    vent_level: f64,
}

fn smoothstep(a: f64, b: f64, x: f64) -> f64 {
    let t = ((x - a) / (b - a)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

impl Phantom {
    pub fn generate(seed: u64, h: usize, w: usize) -> Result<Phantom> {
        if h < 32 || w < 32 {
            return Err(Error::Config(format!("extents {h}x{w} below the 32-pixel minimum")));
        }
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Config(format!(
                "extents {h}x{w} not divisible by the pooling schedule"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x7068616e, 0));
        let mut jitter = |scale: f64| rng.random_range(-scale..scale);

        let cy = h as f64 * (0.5 + jitter(0.02));
        let cx = w as f64 * (0.5 + jitter(0.02));
        let ay = h as f64 * (0.42 + jitter(0.02));
        let ax = w as f64 * (0.36 + jitter(0.02));
        let theta = jitter(0.12);
        let skull = Ellipse { cy, cx, ay, ax, theta };

        let mut vent = |side: f64| {
            let off_u = side * ax * (0.30 + jitter(0.03));
            let off_v = -ay * (0.08 + jitter(0.03));
            let (s, c) = theta.sin_cos();
            Ellipse {
                cy: cy + off_v * c + off_u * s,
                cx: cx + off_u * c - off_v * s,
                ay: ay * (0.30 + jitter(0.04)),
                ax: ax * (0.13 + jitter(0.02)),
                theta: theta + side * (0.25 + jitter(0.08)),
            }
        };
        let vents = [vent(-1.0), vent(1.0)];

        Ok(Phantom {
            h,
            w,
            skull,
            vents,
            vent_scale: 1.0,
            cortex: 0.72 + jitter(0.04),
            white: 0.50 + jitter(0.04),
            band_amp: 0.05 + jitter(0.015),
            band_phase: std::f64::consts::PI + jitter(std::f64::consts::PI),
            vent_level: 0.12 + jitter(0.03),
        })
    }

    pub fn extents(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn with_vent_scale(&self, scale: f64) -> Phantom {
        Phantom {
            vent_scale: scale,
            ..self.clone()
        }
    }

    pub fn render(&self) -> ImageGrid {
        ImageGrid::from_fn(self.h, self.w, |y, x| {
            let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
            let re = self.skull.radius(yf, xf);
            if re >= 1.0 {
                return 0.0;
            }
            // banded interior tissue with a brighter cortex ring
            let band = self.band_amp * (3.5 * std::f64::consts::PI * re + self.band_phase).cos();
            let mut v = self.white + band;
            let ring = smoothstep(0.78, 0.88, re);
            v = v * (1.0 - ring) + self.cortex * ring;
            // dark ventricles with soft edges
            for vent in &self.vents {
                let scaled = Ellipse {
                    ay: vent.ay * self.vent_scale,
                    ax: vent.ax * self.vent_scale,
                    ..*vent
                };
                let vre = scaled.radius(yf, xf);
                let inside = 1.0 - smoothstep(0.82, 1.0, vre);
                v = v * (1.0 - inside) + self.vent_level * inside;
            }
            // fade to zero at the skull boundary; outside stays exactly 0
            v *= 1.0 - smoothstep(0.94, 1.0, re);
            v.clamp(0.0, 1.0)
        })
    }

    /// True when a disc of `radius` around `(y, x)` lies inside the
    /// tissue region (clear of the skull rim).
    pub fn disc_in_interior(&self, y: f64, x: f64, radius: f64) -> bool {
        let probes = [
            (y - radius, x),
            (y + radius, x),
            (y, x - radius),
            (y, x + radius),
            (y, x),
        ];
        probes.iter().all(|&(py, px)| self.skull.radius(py, px) <= 0.90)
    }

    /// Deterministic interior point sampling for lesion placement.
    fn sample_interior(&self, rng: &mut ChaCha8Rng, radius: f64) -> (f64, f64) {
        for _ in 0..256 {
            let y = rng.random_range(0.15 * self.h as f64..0.85 * self.h as f64);
            let x = rng.random_range(0.15 * self.w as f64..0.85 * self.w as f64);
            if self.disc_in_interior(y, x, radius) {
                return (y, x);
            }
        }
        (self.skull.cy, self.skull.cx)
    }
}

/// Healthy phantom image; the anatomy is returned alongside so lesions
/// can be injected relative to it.
pub fn gen_healthy(seed: u64, h: usize, w: usize) -> Result<(Phantom, ImageGrid)> {
    let phantom = Phantom::generate(seed, h, w)?;
    let img = phantom.render();
    Ok((phantom, img))
}

// ── lesions ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LesionKind {
    BrightBlob,
    DarkBlob,
    VentricleDilation,
    TexturePatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionSpec {
    pub kind: LesionKind,
    /// pixel coordinates (y, x); ignored by ventricle dilation
    pub center: (f64, f64),
    /// pixels; ignored by ventricle dilation
    pub radius: f64,
    /// intensity offset magnitude (blobs/texture) or dilation fraction
    pub delta: f64,
    pub seed: u64,
}

/// Applies one lesion and returns the modified image plus the exact set
/// of changed pixels. Blob kinds are hard-edged discs; ventricle dilation
/// re-renders the anatomy with scaled ventricles (the input image must be
/// the phantom's own render for the mask to isolate the dilation).
pub fn inject_lesion(
    img: &ImageGrid,
    spec: &LesionSpec,
    anatomy: &Phantom,
) -> Result<(ImageGrid, Mask)> {
    let (h, w) = (img.height(), img.width());
    if (h, w) != anatomy.extents() {
        return Err(Error::shape(
            "inject_lesion",
            format!("image {h}x{w} vs phantom {:?}", anatomy.extents()),
        ));
    }
    if spec.delta == 0.0 {
        return Ok((img.clone(), Mask::empty(h, w)));
    }
    let out = match spec.kind {
        LesionKind::BrightBlob | LesionKind::DarkBlob | LesionKind::TexturePatch => {
            let (cy, cx) = spec.center;
            if !anatomy.disc_in_interior(cy, cx, spec.radius) {
                return Err(Error::Config(format!(
                    "lesion at ({cy:.1},{cx:.1}) radius {:.1} leaves the phantom interior",
                    spec.radius
                )));
            }
            let sign = match spec.kind {
                LesionKind::DarkBlob => -1.0,
                _ => 1.0,
            };
            let ripple_rng = derive_seed(spec.seed, 0x746578, 0);
            let mut rng = ChaCha8Rng::seed_from_u64(ripple_rng);
            let (fy, fx): (f64, f64) = (rng.random_range(0.5..1.2), rng.random_range(0.5..1.2));
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            ImageGrid::from_fn(h, w, |y, x| {
                let v = img.get(y, x);
                let dy = y as f64 + 0.5 - cy;
                let dx = x as f64 + 0.5 - cx;
                if (dy * dy + dx * dx).sqrt() > spec.radius {
                    return v;
                }
                let change = match spec.kind {
                    LesionKind::TexturePatch => {
                        // always-positive ripple so every disc pixel moves
                        let s = (fy * dy + fx * dx + phase).sin();
                        spec.delta.abs() * (0.6 + 0.4 * s)
                    }
                    _ => sign * spec.delta.abs(),
                };
                (v + change).clamp(0.0, 1.0)
            })
        }
        LesionKind::VentricleDilation => {
            let dilated = anatomy.with_vent_scale(1.0 + spec.delta);
            dilated.render()
        }
    };
    let mask = Mask::from_fn(h, w, |y, x| out.get(y, x) != img.get(y, x));
    Ok((out, mask))
}

// ── conditions and corpus ────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LesionTemplate {
    pub kind: LesionKind,
    pub radius: (f64, f64),
    pub delta: (f64, f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionSpec {
    pub name: String,
    pub lesions: Vec<LesionTemplate>,
}

/// Six condition analogs: focal bright and dark lesions, ventricle
/// dilation, multifocal small lesions, a texture patch and a larger
/// resection-like void.
pub fn default_conditions() -> Vec<ConditionSpec> {
    let blob = |kind, r: (f64, f64), d: (f64, f64)| LesionTemplate {
        kind,
        radius: r,
        delta: d,
    };
    vec![
        ConditionSpec {
            name: "edema_like".into(),
            lesions: vec![blob(LesionKind::BrightBlob, (5.0, 7.0), (0.30, 0.40))],
        },
        ConditionSpec {
            name: "encephalomalacia_like".into(),
            lesions: vec![blob(LesionKind::DarkBlob, (5.0, 7.0), (0.30, 0.40))],
        },
        ConditionSpec {
            name: "enlarged_ventricles".into(),
            lesions: vec![blob(LesionKind::VentricleDilation, (0.0, 0.0), (0.35, 0.60))],
        },
        ConditionSpec {
            name: "multifocal".into(),
            lesions: vec![
                blob(LesionKind::BrightBlob, (2.0, 3.0), (0.25, 0.35)),
                blob(LesionKind::BrightBlob, (2.0, 3.0), (0.25, 0.35)),
                blob(LesionKind::BrightBlob, (2.0, 3.0), (0.25, 0.35)),
            ],
        },
        ConditionSpec {
            name: "texture_patch".into(),
            lesions: vec![blob(LesionKind::TexturePatch, (6.0, 8.0), (0.25, 0.35))],
        },
        ConditionSpec {
            name: "resection_void".into(),
            lesions: vec![blob(LesionKind::DarkBlob, (7.0, 9.0), (0.40, 0.50))],
        },
    ]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub height: usize,
    pub width: usize,
    pub n_source: usize,
    pub n_target_healthy: usize,
    pub n_per_condition: usize,
    pub conditions: Vec<ConditionSpec>,
    pub target_shift: DomainSpec,
    pub seed: u64,
}

impl Default for CorpusManifest {
    fn default() -> Self {
        CorpusManifest {
            height: 64,
            width: 64,
            n_source: 40,
            n_target_healthy: 20,
            n_per_condition: 5,
            conditions: default_conditions(),
            target_shift: DomainSpec {
                gamma: 0.8,
                contrast: 1.15,
                brightness: 0.05,
                bias_amp: 0.15,
                noise_sigma: 0.02,
                seed: 0,
            },
            seed: 42,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub image: ImageGrid,
    pub lesion_mask: Mask,
    pub condition: String,
    pub domain_id: String,
    pub healthy: bool,
    pub seed: u64,
}

impl Sample {
    fn healthy_invariant_ok(&self) -> bool {
        self.healthy == self.lesion_mask.is_empty()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndexRow {
    pub path: String,
    pub mask_path: String,
    pub condition: String,
    pub healthy: bool,
    pub domain_id: String,
    pub seed: u64,
}

const SRC_TAG: u64 = 1;
const TGT_HEALTHY_TAG: u64 = 2;
const TGT_UNHEALTHY_TAG: u64 = 0x100;

/// Generates all three corpora in memory. Samples are independent and
/// generated in parallel; ordering is fixed by index.
pub fn gen_samples(manifest: &CorpusManifest) -> Result<Vec<Sample>> {
    validate_manifest(manifest)?;
    let (h, w) = (manifest.height, manifest.width);

    let source: Result<Vec<Sample>> = (0..manifest.n_source)
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(manifest.seed, SRC_TAG, i as u64);
            let (_, img) = gen_healthy(seed, h, w)?;
            Ok(Sample {
                image: img,
                lesion_mask: Mask::empty(h, w),
                condition: "healthy".into(),
                domain_id: "source".into(),
                healthy: true,
                seed,
            })
        })
        .collect();
    let mut samples = source?;

    let target_healthy: Result<Vec<Sample>> = (0..manifest.n_target_healthy)
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(manifest.seed, TGT_HEALTHY_TAG, i as u64);
            let (_, img) = gen_healthy(seed, h, w)?;
            let shifted = apply_shift(&img, &manifest.target_shift.with_seed(seed))?;
            Ok(Sample {
                image: shifted,
                lesion_mask: Mask::empty(h, w),
                condition: "healthy".into(),
                domain_id: "target".into(),
                healthy: true,
                seed,
            })
        })
        .collect();
    samples.extend(target_healthy?);

    for (ci, cond) in manifest.conditions.iter().enumerate() {
        let cond_samples: Result<Vec<Sample>> = (0..manifest.n_per_condition)
            .into_par_iter()
            .map(|i| {
                let seed = derive_seed(manifest.seed, TGT_UNHEALTHY_TAG + ci as u64, i as u64);
                make_unhealthy(manifest, cond, seed)
            })
            .collect();
        samples.extend(cond_samples?);
    }
    Ok(samples)
}

fn make_unhealthy(manifest: &CorpusManifest, cond: &ConditionSpec, seed: u64) -> Result<Sample> {
    let (h, w) = (manifest.height, manifest.width);
    let (phantom, mut img) = gen_healthy(seed, h, w)?;
    let mut mask = Mask::empty(h, w);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x6c6573, 0));
    for (li, template) in cond.lesions.iter().enumerate() {
        let radius = rng.random_range(template.radius.0..=template.radius.1);
        let delta = rng.random_range(template.delta.0..=template.delta.1);
        let center = match template.kind {
            LesionKind::VentricleDilation => (0.0, 0.0),
            _ => phantom.sample_interior(&mut rng, radius + 1.5),
        };
        let spec = LesionSpec {
            kind: template.kind,
            center,
            radius,
            delta,
            seed: derive_seed(seed, 0x6c6573, li as u64 + 1),
        };
        let (next, lesion_mask) = inject_lesion(&img, &spec, &phantom)?;
        img = next;
        mask = mask.union(&lesion_mask);
    }
    let shifted = apply_shift(&img, &manifest.target_shift.with_seed(seed))?;
    let sample = Sample {
        image: shifted,
        lesion_mask: mask,
        condition: cond.name.clone(),
        domain_id: "target".into(),
        healthy: false,
        seed,
    };
    if !sample.healthy_invariant_ok() {
        return Err(Error::Config(format!(
            "condition {} produced an empty lesion mask",
            cond.name
        )));
    }
    Ok(sample)
}

fn validate_manifest(manifest: &CorpusManifest) -> Result<()> {
    if manifest.n_source == 0 {
        return Err(Error::Config("n_source must be >= 1".into()));
    }
    if manifest.conditions.is_empty() && manifest.n_per_condition > 0 {
        return Err(Error::Config("conditions list is empty".into()));
    }
    for cond in &manifest.conditions {
        if cond.lesions.is_empty() {
            return Err(Error::Config(format!("condition {} has no lesions", cond.name)));
        }
    }
    // extent constraints surface through Phantom::generate
    Phantom::generate(0, manifest.height, manifest.width).map(|_| ())
}

/// Generated corpus written to disk: PGM images/masks plus `index.csv`
/// binding path, mask, condition, health flag, domain and seed.
pub fn gen_corpus(manifest: &CorpusManifest, out_dir: &Path) -> Result<Vec<IndexRow>> {
    let samples = gen_samples(manifest)?;
    for sub in ["source", "target_healthy", "target_unhealthy", "masks"] {
        fs::create_dir_all(out_dir.join(sub))
            .map_err(|e| Error::io(format!("creating {}", out_dir.join(sub).display()), e))?;
    }
    let mut rows = Vec::with_capacity(samples.len());
    let mut healthy_counts = [0usize; 2];
    let mut cond_counts: std::collections::BTreeMap<&str, usize> = Default::default();
    for sample in &samples {
        let (rel_path, rel_mask): (String, String) = if sample.healthy {
            let idx = if sample.domain_id == "source" {
                let i = healthy_counts[0];
                healthy_counts[0] += 1;
                format!("source/h_{i:04}.pgm")
            } else {
                let i = healthy_counts[1];
                healthy_counts[1] += 1;
                format!("target_healthy/h_{i:04}.pgm")
            };
            (idx, String::new())
        } else {
            let i = cond_counts.entry(sample.condition.as_str()).or_insert(0);
            let path = format!("target_unhealthy/{}_{i:04}.pgm", sample.condition);
            let mask = format!("masks/{}_{i:04}.pgm", sample.condition);
            *i += 1;
            (path, mask)
        };
        sample.image.save_pgm(&out_dir.join(&rel_path))?;
        if !rel_mask.is_empty() {
            sample.lesion_mask.save_pgm(&out_dir.join(&rel_mask))?;
        }
        rows.push(IndexRow {
            path: rel_path,
            mask_path: rel_mask,
            condition: sample.condition.clone(),
            healthy: sample.healthy,
            domain_id: sample.domain_id.clone(),
            seed: sample.seed,
        });
    }
    write_index(&rows, &out_dir.join("index.csv"))?;
    Ok(rows)
}

fn write_index(rows: &[IndexRow], path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::format(path, format!("opening index: {e}")))?;
    for row in rows {
        writer
            .serialize(row)
            .map_err(|e| Error::format(path, format!("writing row: {e}")))?;
    }
    writer
        .flush()
        .map_err(|e| Error::io(format!("flushing {}", path.display()), e))
}

/// Corpus reloaded from an index file; images and masks are read eagerly.
pub fn load_corpus(dir: &Path) -> Result<Vec<(IndexRow, Sample)>> {
    let index_path = dir.join("index.csv");
    let mut reader = csv::Reader::from_path(&index_path)
        .map_err(|e| Error::format(&index_path, format!("opening index: {e}")))?;
    let mut out = Vec::new();
    for record in reader.deserialize::<IndexRow>() {
        let row = record.map_err(|e| Error::format(&index_path, format!("bad row: {e}")))?;
        let image = ImageGrid::load_pgm(&dir.join(&row.path))?;
        let lesion_mask = if row.mask_path.is_empty() {
            Mask::empty(image.height(), image.width())
        } else {
            Mask::load_pgm(&dir.join(&row.mask_path))?
        };
        let sample = Sample {
            image,
            lesion_mask,
            condition: row.condition.clone(),
            domain_id: row.domain_id.clone(),
            healthy: row.healthy,
            seed: row.seed,
        };
        out.push((row, sample));
    }
    Ok(out)
}

pub fn index_fingerprint(rows: &[IndexRow]) -> u64 {
    let mut h = crate::hash::Fnv1a::new();
    for row in rows {
        h.update(row.path.as_bytes());
        h.update(row.mask_path.as_bytes());
        h.update(row.condition.as_bytes());
        h.update(&[row.healthy as u8]);
        h.update(row.domain_id.as_bytes());
        h.update(&row.seed.to_le_bytes());
    }
    h.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phantom_is_deterministic_and_zero_outside() {
        let (_, a) = gen_healthy(7, 64, 64).unwrap();
        let (_, b) = gen_healthy(7, 64, 64).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        // corners lie outside the skull
        assert_eq!(a.get(0, 0), 0.0);
        assert_eq!(a.get(0, 63), 0.0);
        assert_eq!(a.get(63, 0), 0.0);
        assert_eq!(a.get(63, 63), 0.0);
        assert!(a.in_unit_range());
    }

    #[test]
    fn phantom_rejects_bad_extents() {
        assert!(gen_healthy(1, 31, 64).is_err());
        assert!(gen_healthy(1, 64, 60).is_err());
    }

    #[test]
    fn corpus_seeds_give_distinct_phantoms() {
        let images: Vec<ImageGrid> = (0..100)
            .map(|s| gen_healthy(s, 32, 32).unwrap().1)
            .collect();
        for i in 0..images.len() {
            for j in (i + 1)..images.len() {
                let mae = crate::eval::mae(&images[i], &images[j]).unwrap();
                assert!(mae > 0.0, "seeds {i} and {j} collide");
            }
        }
    }

    #[test]
    fn identity_shift_is_bitwise_identity() {
        let (_, img) = gen_healthy(3, 32, 32).unwrap();
        let out = apply_shift(&img, &DomainSpec::identity(99)).unwrap();
        assert_eq!(out.fingerprint(), img.fingerprint());
    }

    #[test]
    fn gamma_two_squares_values() {
        let img = ImageGrid::constant(32, 32, 0.5);
        let spec = DomainSpec {
            gamma: 2.0,
            ..DomainSpec::identity(0)
        };
        let out = apply_shift(&img, &spec).unwrap();
        assert!((out.get(0, 0) - 0.25).abs() < 1e-12);
        assert!(apply_shift(&img, &DomainSpec { gamma: 0.0, ..DomainSpec::identity(0) }).is_err());
    }

    #[test]
    fn shifted_corpus_distribution_moves() {
        // two-sample KS over pooled pixels of 50 images per side
        let shift = CorpusManifest::default().target_shift;
        let mut src = Vec::new();
        let mut tgt = Vec::new();
        for s in 0..50u64 {
            let (_, img) = gen_healthy(s, 32, 32).unwrap();
            let shifted = apply_shift(&img, &shift.with_seed(s)).unwrap();
            src.extend_from_slice(img.data());
            tgt.extend_from_slice(shifted.data());
        }
        let ks = crate::eval::ks_statistic(&src, &tgt);
        assert!(ks > 0.1, "KS {ks}");
    }

    #[test]
    fn zero_delta_lesion_is_a_no_op() {
        let (phantom, img) = gen_healthy(5, 64, 64).unwrap();
        for kind in [
            LesionKind::BrightBlob,
            LesionKind::DarkBlob,
            LesionKind::VentricleDilation,
            LesionKind::TexturePatch,
        ] {
            let spec = LesionSpec {
                kind,
                center: (32.0, 32.0),
                radius: 5.0,
                delta: 0.0,
                seed: 1,
            };
            let (out, mask) = inject_lesion(&img, &spec, &phantom).unwrap();
            assert_eq!(out.fingerprint(), img.fingerprint());
            assert!(mask.is_empty());
        }
    }

    #[test]
    fn blob_mask_area_tracks_disc_area() {
        let (phantom, img) = gen_healthy(11, 64, 64).unwrap();
        let radius = 6.0;
        let spec = LesionSpec {
            kind: LesionKind::BrightBlob,
            center: (30.0, 32.0),
            radius,
            delta: 0.3,
            seed: 2,
        };
        let (_, mask) = inject_lesion(&img, &spec, &phantom).unwrap();
        let expected = std::f64::consts::PI * radius * radius;
        let got = mask.count() as f64;
        assert!(
            (got - expected).abs() / expected < 0.15,
            "mask {got} vs disc {expected}"
        );
    }

    #[test]
    fn blob_mean_shift_matches_delta() {
        let (phantom, img) = gen_healthy(13, 64, 64).unwrap();
        let spec = LesionSpec {
            kind: LesionKind::BrightBlob,
            center: (30.0, 30.0),
            radius: 5.0,
            delta: 0.3,
            seed: 3,
        };
        let (out, mask) = inject_lesion(&img, &spec, &phantom).unwrap();
        let mut pre = 0.0;
        let mut post = 0.0;
        let mut n = 0.0;
        for y in 0..64 {
            for x in 0..64 {
                if mask.get(y, x) {
                    pre += img.get(y, x);
                    post += out.get(y, x);
                    n += 1.0;
                }
            }
        }
        let shift = (post - pre) / n;
        assert!((shift - 0.3).abs() < 0.02, "mean shift {shift}");
    }

    #[test]
    fn pixels_outside_mask_are_untouched() {
        let (phantom, img) = gen_healthy(17, 64, 64).unwrap();
        let spec = LesionSpec {
            kind: LesionKind::TexturePatch,
            center: (34.0, 30.0),
            radius: 7.0,
            delta: 0.3,
            seed: 4,
        };
        let (out, mask) = inject_lesion(&img, &spec, &phantom).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                if !mask.get(y, x) {
                    assert_eq!(out.get(y, x).to_bits(), img.get(y, x).to_bits());
                }
            }
        }
        assert!(!mask.is_empty());
    }

    #[test]
    fn lesion_outside_interior_is_rejected() {
        let (phantom, img) = gen_healthy(19, 64, 64).unwrap();
        let spec = LesionSpec {
            kind: LesionKind::BrightBlob,
            center: (2.0, 2.0),
            radius: 4.0,
            delta: 0.3,
            seed: 5,
        };
        assert!(inject_lesion(&img, &spec, &phantom).is_err());
    }

    #[test]
    fn ventricle_dilation_changes_ventricle_region() {
        let (phantom, img) = gen_healthy(23, 64, 64).unwrap();
        let spec = LesionSpec {
            kind: LesionKind::VentricleDilation,
            center: (0.0, 0.0),
            radius: 0.0,
            delta: 0.5,
            seed: 6,
        };
        let (out, mask) = inject_lesion(&img, &spec, &phantom).unwrap();
        assert!(!mask.is_empty());
        // dilated ventricles darken the image on average inside the mask
        let mut pre = 0.0;
        let mut post = 0.0;
        for y in 0..64 {
            for x in 0..64 {
                if mask.get(y, x) {
                    pre += img.get(y, x);
                    post += out.get(y, x);
                }
            }
        }
        assert!(post < pre);
    }

    #[test]
    fn corpus_counts_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = CorpusManifest {
            height: 32,
            width: 32,
            n_source: 3,
            n_target_healthy: 2,
            n_per_condition: 5,
            conditions: default_conditions().into_iter().take(3).collect(),
            ..Default::default()
        };
        let rows = gen_corpus(&manifest, dir.path()).unwrap();
        let unhealthy: Vec<_> = rows.iter().filter(|r| !r.healthy).collect();
        assert_eq!(unhealthy.len(), 15);
        assert!(unhealthy.iter().all(|r| !r.mask_path.is_empty()));

        let dir2 = tempfile::tempdir().unwrap();
        let rows2 = gen_corpus(&manifest, dir2.path()).unwrap();
        assert_eq!(index_fingerprint(&rows), index_fingerprint(&rows2));

        // reload keeps the invariants
        let loaded = load_corpus(dir.path()).unwrap();
        assert_eq!(loaded.len(), rows.len());
        for (_, sample) in &loaded {
            assert_eq!(sample.healthy, sample.lesion_mask.is_empty());
        }
    }
}
