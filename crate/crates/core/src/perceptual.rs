//! The fixed multi-layer feature extractor and the perceptual objectives:
//! content loss on deep feature maps, style loss on channel Gram matrices
//! at several depths.
//!
//! Default weights are seeded orthogonal convolutions, frozen after
//! construction; externally produced weights can be loaded from NTSR1
//! blobs through the same manifest mechanism.

use std::fs;
use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{gram_matrix, ntsr, NodeId, Tape, Tensor};
use crate::hash::{derive_seed, Fnv1a};
use crate::image::ImageGrid;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PsiSpec {
    /// output channels per 3x3 conv block; a 2x mean pool sits between blocks
    pub channels: Vec<usize>,
    /// 1-based block indices whose outputs feed the content loss
    pub content_taps: Vec<usize>,
    /// 1-based block indices whose Gram matrices feed the style loss
    pub style_taps: Vec<usize>,
}

impl Default for PsiSpec {
    fn default() -> Self {
        PsiSpec {
            channels: vec![16, 32, 64, 64],
            content_taps: vec![3],
            style_taps: vec![1, 2, 3, 4],
        }
    }
}

impl PsiSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Config("psi needs at least one block".into()));
        }
        if self.content_taps.is_empty() || self.style_taps.is_empty() {
            return Err(Error::Config(
                "psi needs at least one content tap and one style tap".into(),
            ));
        }
        for &t in self.content_taps.iter().chain(&self.style_taps) {
            if t == 0 || t > self.channels.len() {
                return Err(Error::Config(format!(
                    "tap {t} outside 1..={}",
                    self.channels.len()
                )));
            }
        }
        Ok(())
    }

    /// Spatial divisibility demanded by the pooling schedule.
    pub fn pool_factor(&self) -> usize {
        1 << (self.channels.len() - 1)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsiSource {
    Seed(u64),
    WeightFile(PathBuf),
}

/// Immutable feature extractor; shareable across concurrent runs.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    spec: PsiSpec,
    source: PsiSource,
    kernels: Vec<Tensor>,
    biases: Vec<Tensor>,
}

/// Ordered (block index, feature map) pairs.
#[derive(Debug, Clone)]
pub struct FeatureStack {
    taps: Vec<(usize, Tensor)>,
}

impl FeatureStack {
    pub fn taps(&self) -> &[(usize, Tensor)] {
        &self.taps
    }

    pub fn tap(&self, block: usize) -> Option<&Tensor> {
        self.taps
            .iter()
            .find(|(b, _)| *b == block)
            .map(|(_, t)| t)
    }
}

pub fn build_psi(spec: PsiSpec, source: PsiSource) -> Result<FeatureExtractor> {
    spec.validate()?;
    match source {
        PsiSource::Seed(seed) => Ok(FeatureExtractor::seeded(spec, seed)),
        PsiSource::WeightFile(ref dir) => FeatureExtractor::load_with_spec(spec, dir),
    }
}

impl FeatureExtractor {
    fn seeded(spec: PsiSpec, seed: u64) -> FeatureExtractor {
        let mut kernels = Vec::with_capacity(spec.channels.len());
        let mut biases = Vec::with_capacity(spec.channels.len());
        let mut c_in = 1;
        for (i, &c_out) in spec.channels.iter().enumerate() {
            let rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x707369, i as u64));
            let k = orthogonal_kernel(rng, c_out, c_in, 3, std::f64::consts::SQRT_2);
            kernels.push(k);
            biases.push(Tensor::zeros(&[c_out]));
            c_in = c_out;
        }
        FeatureExtractor {
            spec,
            source: PsiSource::Seed(seed),
            kernels,
            biases,
        }
    }

    pub fn spec(&self) -> &PsiSpec {
        &self.spec
    }

    pub fn source(&self) -> &PsiSource {
        &self.source
    }

    pub fn weight_hash(&self) -> u64 {
        let mut h = Fnv1a::new();
        for (k, b) in self.kernels.iter().zip(&self.biases) {
            h.update_f64s(k.data());
            h.update_f64s(b.data());
        }
        h.finish()
    }

    /// Runs every block on `tape` starting from an image node, returning
    /// the (block index, node) list of all block outputs (post-activation,
    /// pre-pool).
    pub fn forward_on_tape(&self, tape: &mut Tape, image: NodeId) -> Result<Vec<(usize, NodeId)>> {
        let shape = tape.value(image).shape().to_vec();
        if shape.len() != 3 || shape[0] != 1 {
            return Err(Error::shape(
                "psi",
                format!("expected [1,h,w] image node, got {shape:?}"),
            ));
        }
        let factor = self.spec.pool_factor();
        if shape[1] % factor != 0 || shape[2] % factor != 0 {
            return Err(Error::shape(
                "psi",
                format!(
                    "extents {}x{} not divisible by pooling schedule ({factor})",
                    shape[1], shape[2]
                ),
            ));
        }
        let mut taps = Vec::with_capacity(self.kernels.len());
        let mut x = image;
        for (i, (kernel, bias)) in self.kernels.iter().zip(&self.biases).enumerate() {
            let k = tape.constant(kernel.clone());
            let b = tape.constant(bias.clone());
            let conv = tape.conv2d(x, k)?;
            let biased = tape.channel_bias(conv, b)?;
            let act = tape.relu(biased)?;
            taps.push((i + 1, act));
            if i + 1 < self.kernels.len() {
                x = tape.avgpool2(act)?;
            }
        }
        Ok(taps)
    }

    /// Feature stack of all taps for a plain image (no gradients kept).
    pub fn extract(&self, img: &ImageGrid) -> Result<FeatureStack> {
        if !img.in_unit_range() {
            return Err(Error::Config(
                "psi input values must lie in [0,1]".into(),
            ));
        }
        let mut tape = Tape::new();
        let image = tape.constant(img.to_tensor());
        let nodes = self.forward_on_tape(&mut tape, image)?;
        Ok(FeatureStack {
            taps: nodes
                .into_iter()
                .map(|(b, id)| (b, tape.value(id).clone()))
                .collect(),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let manifest = PsiManifest {
            spec: self.spec.clone(),
            seed: match self.source {
                PsiSource::Seed(s) => Some(s),
                PsiSource::WeightFile(_) => None,
            },
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(dir.join("psi_manifest.json"), json)
            .map_err(|e| Error::io("writing psi manifest", e))?;
        for (i, (k, b)) in self.kernels.iter().zip(&self.biases).enumerate() {
            ntsr::save(k, &dir.join(format!("k{i:02}.ntsr")))?;
            ntsr::save(b, &dir.join(format!("c{i:02}.ntsr")))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<FeatureExtractor> {
        let manifest_path = dir.join("psi_manifest.json");
        let json = fs::read_to_string(&manifest_path)
            .map_err(|e| Error::io(format!("reading {}", manifest_path.display()), e))?;
        let manifest: PsiManifest = serde_json::from_str(&json)
            .map_err(|e| Error::format(&manifest_path, e.to_string()))?;
        Self::load_with_spec(manifest.spec, dir)
    }

    fn load_with_spec(spec: PsiSpec, dir: &Path) -> Result<FeatureExtractor> {
        spec.validate()?;
        let mut kernels = Vec::with_capacity(spec.channels.len());
        let mut biases = Vec::with_capacity(spec.channels.len());
        let mut c_in = 1;
        for (i, &c_out) in spec.channels.iter().enumerate() {
            let k = ntsr::load(&dir.join(format!("k{i:02}.ntsr")))?;
            if k.shape() != [c_out, c_in, 3, 3] {
                return Err(Error::format(
                    dir,
                    format!(
                        "kernel {i} shape {:?} does not match plan [{c_out},{c_in},3,3]",
                        k.shape()
                    ),
                ));
            }
            let b = ntsr::load(&dir.join(format!("c{i:02}.ntsr")))?;
            if b.shape() != [c_out] {
                return Err(Error::format(dir, format!("bias {i} shape mismatch")));
            }
            kernels.push(k);
            biases.push(b);
            c_in = c_out;
        }
        Ok(FeatureExtractor {
            spec,
            source: PsiSource::WeightFile(dir.to_path_buf()),
            kernels,
            biases,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct PsiManifest {
    spec: PsiSpec,
    seed: Option<u64>,
}

/// Channel Gram matrix of a `[c,h,w]` map, normalized by c·h·w.
pub fn gram(feature: &Tensor) -> Result<Tensor> {
    match *feature.shape() {
        [c, h, w] => Tensor::new(vec![c, c], gram_matrix(feature.data(), c, h * w)),
        _ => Err(Error::shape(
            "gram",
            format!("want rank-3 feature map, got {:?}", feature.shape()),
        )),
    }
}

/// Sum over content taps of squared feature distance, each tap normalized
/// by its element count.
pub fn content_loss(adapted: &FeatureStack, content: &FeatureStack, taps: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for &t in taps {
        let a = adapted
            .tap(t)
            .ok_or_else(|| Error::shape("content_loss", format!("missing tap {t} in adapted stack")))?;
        let c = content
            .tap(t)
            .ok_or_else(|| Error::shape("content_loss", format!("missing tap {t} in content stack")))?;
        if a.shape() != c.shape() {
            return Err(Error::shape(
                "content_loss",
                format!("tap {t}: {:?} vs {:?}", a.shape(), c.shape()),
            ));
        }
        let ss: f64 = a
            .data()
            .iter()
            .zip(c.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        total += ss / a.numel() as f64;
    }
    Ok(total)
}

/// Sum over style taps of squared Frobenius distance between Gram
/// matrices, each tap normalized by c².
pub fn style_loss(adapted: &FeatureStack, style: &FeatureStack, taps: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for &t in taps {
        let a = adapted
            .tap(t)
            .ok_or_else(|| Error::shape("style_loss", format!("missing tap {t} in adapted stack")))?;
        let s = style
            .tap(t)
            .ok_or_else(|| Error::shape("style_loss", format!("missing tap {t} in style stack")))?;
        if a.shape()[0] != s.shape()[0] {
            return Err(Error::shape(
                "style_loss",
                format!("tap {t}: channel mismatch {:?} vs {:?}", a.shape(), s.shape()),
            ));
        }
        let ga = gram(a)?;
        let gs = gram(s)?;
        let c = ga.shape()[0];
        let ss: f64 = ga
            .data()
            .iter()
            .zip(gs.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        total += ss / (c * c) as f64;
    }
    Ok(total)
}

/// Differentiable content term against precomputed target features.
pub fn content_loss_on_tape(
    tape: &mut Tape,
    adapted_taps: &[(usize, NodeId)],
    targets: &[(usize, Tensor)],
) -> Result<NodeId> {
    let mut total: Option<NodeId> = None;
    for (t, target) in targets {
        let &(_, node) = adapted_taps
            .iter()
            .find(|(b, _)| b == t)
            .ok_or_else(|| Error::shape("content_loss", format!("missing tap {t}")))?;
        if tape.value(node).shape() != target.shape() {
            return Err(Error::shape(
                "content_loss",
                format!(
                    "tap {t}: {:?} vs {:?}",
                    tape.value(node).shape(),
                    target.shape()
                ),
            ));
        }
        let numel = target.numel() as f64;
        let c = tape.constant(target.clone());
        let diff = tape.sub(node, c)?;
        let ss = tape.sq_sum(diff)?;
        let term = tape.scale(ss, 1.0 / numel)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Config("content loss needs at least one tap".into()))
}

/// Differentiable style term against precomputed target Gram matrices.
pub fn style_loss_on_tape(
    tape: &mut Tape,
    adapted_taps: &[(usize, NodeId)],
    target_grams: &[(usize, Tensor)],
) -> Result<NodeId> {
    let mut total: Option<NodeId> = None;
    for (t, target) in target_grams {
        let &(_, node) = adapted_taps
            .iter()
            .find(|(b, _)| b == t)
            .ok_or_else(|| Error::shape("style_loss", format!("missing tap {t}")))?;
        let g = tape.gram(node)?;
        if tape.value(g).shape() != target.shape() {
            return Err(Error::shape(
                "style_loss",
                format!("tap {t}: gram {:?} vs {:?}", tape.value(g).shape(), target.shape()),
            ));
        }
        let c = target.shape()[0] as f64;
        let tgt = tape.constant(target.clone());
        let diff = tape.sub(g, tgt)?;
        let ss = tape.sq_sum(diff)?;
        let term = tape.scale(ss, 1.0 / (c * c))?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Config("style loss needs at least one tap".into()))
}

/// Orthogonal initialization: Gaussian draw, then Gram-Schmidt over
/// whichever dimension fits, scaled by `gain`.
fn orthogonal_kernel(mut rng: ChaCha8Rng, c_out: usize, c_in: usize, k: usize, gain: f64) -> Tensor {
    let rows = c_out;
    let cols = c_in * k * k;
    let mut m = vec![0.0f64; rows * cols];
    for v in &mut m {
        *v = rng.sample::<f64, _>(rand_distr::StandardNormal);
    }
    if rows <= cols {
        orthonormalize_rows(&mut m, rows, cols);
    } else {
        // transpose, orthonormalize the short side, transpose back
        let mut t = vec![0.0f64; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = m[r * cols + c];
            }
        }
        orthonormalize_rows(&mut t, cols, rows);
        for r in 0..rows {
            for c in 0..cols {
                m[r * cols + c] = t[c * rows + r];
            }
        }
    }
    for v in &mut m {
        *v *= gain;
    }
    Tensor::new(vec![c_out, c_in, k, k], m).expect("finite init")
}

fn orthonormalize_rows(m: &mut [f64], rows: usize, cols: usize) {
    for r in 0..rows {
        for prev in 0..r {
            let dot: f64 = (0..cols).map(|c| m[r * cols + c] * m[prev * cols + c]).sum();
            for c in 0..cols {
                m[r * cols + c] -= dot * m[prev * cols + c];
            }
        }
        let norm: f64 = (0..cols)
            .map(|c| m[r * cols + c] * m[r * cols + c])
            .sum::<f64>()
            .sqrt();
        if norm > 1e-12 {
            for c in 0..cols {
                m[r * cols + c] /= norm;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::randn;

    fn small_psi(seed: u64) -> FeatureExtractor {
        build_psi(
            PsiSpec {
                channels: vec![4, 8],
                content_taps: vec![2],
                style_taps: vec![1, 2],
            },
            PsiSource::Seed(seed),
        )
        .unwrap()
    }

    #[test]
    fn seeded_builds_are_bitwise_identical() {
        let a = build_psi(PsiSpec::default(), PsiSource::Seed(3)).unwrap();
        let b = build_psi(PsiSpec::default(), PsiSource::Seed(3)).unwrap();
        assert_eq!(a.weight_hash(), b.weight_hash());
        let c = build_psi(PsiSpec::default(), PsiSource::Seed(4)).unwrap();
        assert_ne!(a.weight_hash(), c.weight_hash());
    }

    #[test]
    fn weight_file_roundtrip_preserves_features() {
        let dir = tempfile::tempdir().unwrap();
        let psi = small_psi(11);
        psi.save(dir.path()).unwrap();
        let back = FeatureExtractor::load(dir.path()).unwrap();
        let probe = ImageGrid::from_fn(8, 8, |y, x| ((y * 3 + x) % 7) as f64 / 7.0);
        let fa = psi.extract(&probe).unwrap();
        let fb = back.extract(&probe).unwrap();
        for ((ba, ta), (bb, tb)) in fa.taps().iter().zip(fb.taps()) {
            assert_eq!(ba, bb);
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn load_rejects_mismatched_blob_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let psi = small_psi(11);
        psi.save(dir.path()).unwrap();
        // overwrite one kernel with a wrong-shaped blob
        ntsr::save(&Tensor::zeros(&[2, 1, 3, 3]), &dir.path().join("k00.ntsr")).unwrap();
        assert!(FeatureExtractor::load(dir.path()).is_err());
    }

    #[test]
    fn textures_separate_at_every_tap() {
        let psi = build_psi(PsiSpec::default(), PsiSource::Seed(5)).unwrap();
        let checker = ImageGrid::from_fn(32, 32, |y, x| ((y + x) % 2) as f64);
        let flat = ImageGrid::constant(32, 32, 0.5);
        let fa = psi.extract(&checker).unwrap();
        let fb = psi.extract(&flat).unwrap();
        for ((_, ta), (_, tb)) in fa.taps().iter().zip(fb.taps()) {
            let l2: f64 = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum();
            assert!(l2 > 0.0);
        }
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_features() {
        let psi = build_psi(PsiSpec::default(), PsiSource::Seed(7)).unwrap();
        let stack = psi.extract(&ImageGrid::zeros(32, 32)).unwrap();
        for (_, t) in stack.taps() {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn default_plan_shape_contract() {
        // 32x32 input: tap 1 is 16x32x32, tap 4 is 64x4x4
        let psi = build_psi(PsiSpec::default(), PsiSource::Seed(1)).unwrap();
        let stack = psi.extract(&ImageGrid::constant(32, 32, 0.3)).unwrap();
        assert_eq!(stack.tap(1).unwrap().shape(), &[16, 32, 32]);
        assert_eq!(stack.tap(2).unwrap().shape(), &[32, 16, 16]);
        assert_eq!(stack.tap(3).unwrap().shape(), &[64, 8, 8]);
        assert_eq!(stack.tap(4).unwrap().shape(), &[64, 4, 4]);
    }

    #[test]
    fn extract_rejects_non_pool_compatible_extents() {
        let psi = build_psi(PsiSpec::default(), PsiSource::Seed(1)).unwrap();
        assert!(psi.extract(&ImageGrid::zeros(30, 32)).is_err());
    }

    #[test]
    fn extract_rejects_out_of_range_values() {
        let psi = small_psi(2);
        let img = ImageGrid::new(8, 8, vec![1.5; 64]).unwrap();
        assert!(psi.extract(&img).is_err());
    }

    #[test]
    fn gram_spatial_permutation_invariance() {
        let f = randn(&[3, 4, 4], 99);
        let g = gram(&f).unwrap();
        // reverse the spatial order of every channel
        let (c, hw) = (3, 16);
        let mut permuted = vec![0.0; c * hw];
        for cc in 0..c {
            for p in 0..hw {
                permuted[cc * hw + p] = f.data()[cc * hw + (hw - 1 - p)];
            }
        }
        let fp = Tensor::new(vec![3, 4, 4], permuted).unwrap();
        let gp = gram(&fp).unwrap();
        for (a, b) in g.data().iter().zip(gp.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn content_loss_zero_and_offset() {
        let psi = small_psi(3);
        let img = ImageGrid::from_fn(8, 8, |y, x| (y as f64 * 0.1 + x as f64 * 0.05) % 1.0);
        let stack = psi.extract(&img).unwrap();
        assert_eq!(content_loss(&stack, &stack, &[2]).unwrap(), 0.0);

        // +1 offset on the tap features gives exactly 1.0 per tap
        let mut shifted = stack.clone();
        for (_, t) in &mut shifted.taps {
            for v in t.data_mut() {
                *v += 1.0;
            }
        }
        let l = content_loss(&shifted, &stack, &[2]).unwrap();
        assert!((l - 1.0).abs() < 1e-12);
    }

    #[test]
    fn style_loss_zero_on_identical_and_scale_identity() {
        let psi = small_psi(4);
        let img = ImageGrid::from_fn(8, 8, |y, x| ((y * x) % 5) as f64 / 5.0);
        let stack = psi.extract(&img).unwrap();
        assert_eq!(style_loss(&stack, &stack, &[1, 2]).unwrap(), 0.0);

        // scaling features by s scales the gram by s^2:
        // per-tap term = (1 - s^2)^2 · ||g||_F^2 / c^2
        let s = 2.0;
        let mut scaled = stack.clone();
        for (_, t) in &mut scaled.taps {
            for v in t.data_mut() {
                *v *= s;
            }
        }
        for &tapi in &[1usize, 2] {
            let measured = style_loss(&scaled, &stack, &[tapi]).unwrap();
            let g = gram(stack.tap(tapi).unwrap()).unwrap();
            let c = g.shape()[0] as f64;
            let gnorm: f64 = g.data().iter().map(|&v| v * v).sum();
            let expect = (1.0 - (s * s) as f64).powi(2) * gnorm / (c * c);
            assert!(
                (measured - expect).abs() < 1e-8,
                "tap {tapi}: {measured} vs {expect}"
            );
        }
    }

    #[test]
    fn losses_reject_tap_mismatch() {
        let psi = small_psi(5);
        let img = ImageGrid::constant(8, 8, 0.5);
        let stack = psi.extract(&img).unwrap();
        assert!(content_loss(&stack, &stack, &[9]).is_err());
        assert!(style_loss(&stack, &stack, &[0]).is_err());
    }

    #[test]
    fn tape_losses_agree_with_plain_losses() {
        let psi = small_psi(6);
        let a = ImageGrid::from_fn(8, 8, |y, x| ((y + 2 * x) % 9) as f64 / 9.0);
        let b = ImageGrid::from_fn(8, 8, |y, x| ((3 * y + x) % 7) as f64 / 7.0);
        let fa = psi.extract(&a).unwrap();
        let fb = psi.extract(&b).unwrap();
        let plain_c = content_loss(&fa, &fb, &psi.spec().content_taps).unwrap();
        let plain_s = style_loss(&fa, &fb, &psi.spec().style_taps).unwrap();

        let mut tape = Tape::new();
        let img = tape.constant(a.to_tensor());
        let taps = psi.forward_on_tape(&mut tape, img).unwrap();
        let content_targets: Vec<(usize, Tensor)> = psi
            .spec()
            .content_taps
            .iter()
            .map(|&t| (t, fb.tap(t).unwrap().clone()))
            .collect();
        let style_targets: Vec<(usize, Tensor)> = psi
            .spec()
            .style_taps
            .iter()
            .map(|&t| (t, gram(fb.tap(t).unwrap()).unwrap()))
            .collect();
        let lc = content_loss_on_tape(&mut tape, &taps, &content_targets).unwrap();
        let ls = style_loss_on_tape(&mut tape, &taps, &style_targets).unwrap();
        assert!((tape.value(lc).item().unwrap() - plain_c).abs() < 1e-12);
        assert!((tape.value(ls).item().unwrap() - plain_s).abs() < 1e-12);
    }
}
