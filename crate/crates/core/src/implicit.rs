//! The test-time implicit network: latent construction, interpolation and
//! image synthesis. In coordinate mode each pixel is queried with Fourier
//! position features concatenated with the latent pack; flat mode maps the
//! latent pack to the whole flattened raster in one shot.

use std::fs;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{ntsr, NodeId, Tape, Tensor};
use crate::hash::{derive_seed, Fnv1a};

/// Latents drawn once per adaptation run and never resampled.
#[derive(Debug, Clone)]
pub struct LatentPack {
    pub z_c: Vec<f64>,
    pub z_s: Vec<f64>,
    pub v_r: Vec<f64>,
    pub alpha: f64,
    pub seed: u64,
}

pub fn init_latents(seed: u64, d_z: usize, d_v: usize) -> Result<LatentPack> {
    if d_z == 0 || d_v == 0 {
        return Err(Error::Config(format!(
            "latent dims must be >= 1, got d_z={d_z}, d_v={d_v}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| -> Vec<f64> {
        (0..n)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect()
    };
    Ok(LatentPack {
        z_c: draw(d_z),
        z_s: draw(d_z),
        v_r: draw(d_v),
        alpha: 0.5,
        seed,
    })
}

/// z' = (1 - alpha)·z_c + alpha·z_s
pub fn interpolate_latent(z_c: &[f64], z_s: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if z_c.len() != z_s.len() {
        return Err(Error::shape(
            "interpolate_latent",
            format!("{} vs {}", z_c.len(), z_s.len()),
        ));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0,1]")));
    }
    Ok(z_c
        .iter()
        .zip(z_s)
        .map(|(&c, &s)| (1.0 - alpha) * c + alpha * s)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhiMode {
    /// per-pixel implicit function over Fourier position features
    Coordinate,
    /// one flattened-vector prediction; d_v must equal h·w
    Flat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// train every dense weight/bias plus the normalization affine pairs
    Full,
    /// train only the per-layer normalization scale/shift pairs
    BnAffine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhiSpec {
    pub depth: usize,
    pub width: usize,
    pub mode: PhiMode,
    pub d_z: usize,
    pub d_v: usize,
    /// Fourier frequency count per axis (coordinate mode only)
    pub fourier_freqs: usize,
}

impl Default for PhiSpec {
    fn default() -> Self {
        PhiSpec {
            depth: 16,
            width: 128,
            mode: PhiMode::Coordinate,
            d_z: 64,
            d_v: 64,
            fourier_freqs: 10,
        }
    }
}

impl PhiSpec {
    pub fn input_dim(&self) -> usize {
        match self.mode {
            PhiMode::Coordinate => 4 * self.fourier_freqs + self.d_z + self.d_v,
            PhiMode::Flat => self.d_z + self.d_v,
        }
    }

    fn output_dim(&self) -> usize {
        match self.mode {
            PhiMode::Coordinate => 1,
            PhiMode::Flat => self.d_v,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 {
            return Err(Error::Config("phi depth and width must be >= 1".into()));
        }
        if self.d_z == 0 || self.d_v == 0 {
            return Err(Error::Config("phi latent dims must be >= 1".into()));
        }
        if matches!(self.mode, PhiMode::Coordinate) && self.fourier_freqs == 0 {
            return Err(Error::Config("coordinate mode needs >= 1 frequency".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct DenseLayer {
    w: Tensor,
    b: Tensor,
}

#[derive(Debug, Clone)]
struct NormLayer {
    gain: Tensor,
    shift: Tensor,
}

/// Identifies one owned parameter tensor of a [`PhiNetwork`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamId {
    DenseW(usize),
    DenseB(usize),
    NormGain(usize),
    NormShift(usize),
}

#[derive(Debug, Clone)]
pub struct PhiNetwork {
    spec: PhiSpec,
    variant: Variant,
    /// depth hidden layers followed by one output layer
    layers: Vec<DenseLayer>,
    norms: Vec<NormLayer>,
}

impl PhiNetwork {
    pub fn new(spec: PhiSpec, variant: Variant, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x7068, 0));
        let mut layers = Vec::with_capacity(spec.depth + 1);
        let mut fan_in = spec.input_dim();
        for _ in 0..spec.depth {
            layers.push(Self::init_dense(&mut rng, spec.width, fan_in, 2.0));
            fan_in = spec.width;
        }
        layers.push(Self::init_dense(&mut rng, spec.output_dim(), fan_in, 1.0));
        let norms = (0..spec.depth)
            .map(|_| NormLayer {
                gain: Tensor::full(&[spec.width], 1.0),
                shift: Tensor::zeros(&[spec.width]),
            })
            .collect();
        Ok(PhiNetwork {
            spec,
            variant,
            layers,
            norms,
        })
    }

    fn init_dense(rng: &mut ChaCha8Rng, rows: usize, cols: usize, gain: f64) -> DenseLayer {
        let sd = (gain / cols as f64).sqrt();
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| sd * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        DenseLayer {
            w: Tensor::new(vec![rows, cols], data).expect("finite init"),
            b: Tensor::zeros(&[rows]),
        }
    }

    pub fn spec(&self) -> &PhiSpec {
        &self.spec
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    /// Handles of the parameters the optimizer may update under the
    /// current variant, in a fixed deterministic order.
    pub fn trainable_params(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        if matches!(self.variant, Variant::Full) {
            for i in 0..self.layers.len() {
                out.push(ParamId::DenseW(i));
                out.push(ParamId::DenseB(i));
            }
        }
        for i in 0..self.norms.len() {
            out.push(ParamId::NormGain(i));
            out.push(ParamId::NormShift(i));
        }
        out
    }

    pub fn trainable_param_count(&self) -> usize {
        self.trainable_params()
            .iter()
            .map(|id| self.param(*id).numel())
            .sum()
    }

    pub fn param(&self, id: ParamId) -> &Tensor {
        match id {
            ParamId::DenseW(i) => &self.layers[i].w,
            ParamId::DenseB(i) => &self.layers[i].b,
            ParamId::NormGain(i) => &self.norms[i].gain,
            ParamId::NormShift(i) => &self.norms[i].shift,
        }
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor {
        match id {
            ParamId::DenseW(i) => &mut self.layers[i].w,
            ParamId::DenseB(i) => &mut self.layers[i].b,
            ParamId::NormGain(i) => &mut self.norms[i].gain,
            ParamId::NormShift(i) => &mut self.norms[i].shift,
        }
    }

    pub fn weight_hash(&self) -> u64 {
        let mut h = Fnv1a::new();
        for layer in &self.layers {
            h.update_f64s(layer.w.data());
            h.update_f64s(layer.b.data());
        }
        for norm in &self.norms {
            h.update_f64s(norm.gain.data());
            h.update_f64s(norm.shift.data());
        }
        h.finish()
    }

    /// Builds the forward graph on `tape` from a prepared input block and
    /// returns the `[1,h,w]` image node plus the tape bindings of every
    /// trainable parameter (in `trainable_params` order).
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        input: &PhiInput,
    ) -> Result<(NodeId, Vec<(ParamId, NodeId)>)> {
        let train_dense = matches!(self.variant, Variant::Full);
        let x0 = tape.constant(input.block.clone());
        let mut bindings = Vec::new();
        let mut dense_ids = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let w = tape.leaf(layer.w.clone(), train_dense);
            let b = tape.leaf(layer.b.clone(), train_dense);
            if train_dense {
                bindings.push((ParamId::DenseW(i), w));
                bindings.push((ParamId::DenseB(i), b));
            }
            dense_ids.push((w, b));
        }
        let mut norm_ids = Vec::with_capacity(self.norms.len());
        for (i, norm) in self.norms.iter().enumerate() {
            let g = tape.leaf(norm.gain.clone(), true);
            let s = tape.leaf(norm.shift.clone(), true);
            bindings.push((ParamId::NormGain(i), g));
            bindings.push((ParamId::NormShift(i), s));
            norm_ids.push((g, s));
        }

        let mut h = x0;
        for i in 0..self.spec.depth {
            let (w, b) = dense_ids[i];
            h = tape.dense(w, h, b)?;
            let (g, s) = norm_ids[i];
            h = tape.feature_norm(h, g, s)?;
            h = tape.relu(h)?;
        }
        let (w, b) = dense_ids[self.spec.depth];
        let out = tape.dense(w, h, b)?;
        let squashed = tape.sigmoid(out)?;
        // coordinate mode: [1, p]; flat mode: [h·w, 1] — both reshape to the raster
        let image = tape.reshape(squashed, &[1, input.h, input.w])?;
        Ok((image, bindings))
    }

    /// Plain forward pass producing the rendered image.
    pub fn render(&self, input: &PhiInput) -> Result<crate::image::ImageGrid> {
        let mut tape = Tape::new();
        let (image, _) = self.forward_on_tape(&mut tape, input)?;
        crate::image::ImageGrid::from_tensor(tape.value(image))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let manifest = PhiManifest {
            spec: self.spec,
            variant: self.variant,
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(dir.join("phi_manifest.json"), json)
            .map_err(|e| Error::io("writing phi manifest", e))?;
        for (i, layer) in self.layers.iter().enumerate() {
            ntsr::save(&layer.w, &dir.join(format!("w{i:02}.ntsr")))?;
            ntsr::save(&layer.b, &dir.join(format!("b{i:02}.ntsr")))?;
        }
        for (i, norm) in self.norms.iter().enumerate() {
            ntsr::save(&norm.gain, &dir.join(format!("g{i:02}.ntsr")))?;
            ntsr::save(&norm.shift, &dir.join(format!("s{i:02}.ntsr")))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("phi_manifest.json");
        let json = fs::read_to_string(&manifest_path)
            .map_err(|e| Error::io(format!("reading {}", manifest_path.display()), e))?;
        let manifest: PhiManifest = serde_json::from_str(&json)
            .map_err(|e| Error::format(&manifest_path, e.to_string()))?;
        let mut net = PhiNetwork::new(manifest.spec, manifest.variant, 0)?;
        for i in 0..net.layers.len() {
            net.layers[i].w = ntsr::load(&dir.join(format!("w{i:02}.ntsr")))?;
            net.layers[i].b = ntsr::load(&dir.join(format!("b{i:02}.ntsr")))?;
        }
        for i in 0..net.norms.len() {
            net.norms[i].gain = ntsr::load(&dir.join(format!("g{i:02}.ntsr")))?;
            net.norms[i].shift = ntsr::load(&dir.join(format!("s{i:02}.ntsr")))?;
        }
        Ok(net)
    }
}

#[derive(Serialize, Deserialize)]
struct PhiManifest {
    spec: PhiSpec,
    variant: Variant,
}

/// The network input block assembled once per run: constant across
/// iterations because latents are frozen and the query grid is fixed.
#[derive(Debug, Clone)]
pub struct PhiInput {
    block: Tensor,
    h: usize,
    w: usize,
}

impl PhiInput {
    pub fn build(spec: &PhiSpec, latents: &LatentPack, h: usize, w: usize) -> Result<PhiInput> {
        if latents.z_c.len() != spec.d_z || latents.v_r.len() != spec.d_v {
            return Err(Error::shape(
                "phi_input",
                format!(
                    "latent dims ({}, {}) do not match spec ({}, {})",
                    latents.z_c.len(),
                    latents.v_r.len(),
                    spec.d_z,
                    spec.d_v
                ),
            ));
        }
        let z_prime = interpolate_latent(&latents.z_c, &latents.z_s, latents.alpha)?;
        let block = match spec.mode {
            PhiMode::Coordinate => {
                let dim = spec.input_dim();
                let p = h * w;
                let mut data = vec![0.0; dim * p];
                for y in 0..h {
                    for x in 0..w {
                        let col = y * w + x;
                        let u = 2.0 * (x as f64 + 0.5) / w as f64 - 1.0;
                        let v = 2.0 * (y as f64 + 0.5) / h as f64 - 1.0;
                        let mut row = 0;
                        for k in 0..spec.fourier_freqs {
                            let f = std::f64::consts::PI * (1 << k) as f64;
                            data[row * p + col] = (f * u).sin();
                            data[(row + 1) * p + col] = (f * u).cos();
                            data[(row + 2) * p + col] = (f * v).sin();
                            data[(row + 3) * p + col] = (f * v).cos();
                            row += 4;
                        }
                        for &z in &z_prime {
                            data[row * p + col] = z;
                            row += 1;
                        }
                        for &vv in &latents.v_r {
                            data[row * p + col] = vv;
                            row += 1;
                        }
                    }
                }
                Tensor::new(vec![dim, p], data)?
            }
            PhiMode::Flat => {
                if spec.d_v != h * w {
                    return Err(Error::shape(
                        "phi_input",
                        format!("flat mode requires d_v == h·w ({} != {})", spec.d_v, h * w),
                    ));
                }
                let mut data = z_prime;
                data.extend_from_slice(&latents.v_r);
                let dim = data.len();
                Tensor::new(vec![dim, 1], data)?
            }
        };
        Ok(PhiInput { block, h, w })
    }

    pub fn extents(&self) -> (usize, usize) {
        (self.h, self.w)
    }
}
