//! The frozen source reconstruction model: a pluggable trait with a
//! reference convolutional autoencoder trained on the healthy source
//! corpus by minimizing mean squared reconstruction error.

use std::fs;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{ntsr, NodeId, Tape, Tensor};
use crate::hash::{derive_seed, Fnv1a};
use crate::image::ImageGrid;
use crate::optim::{OptimState, OptimizerKind};

/// Reconstruction interface consumed by the adaptation engine. A frozen
/// model is immutable: `reconstruct` is pure and the weight hash never
/// changes.
pub trait SourceModel: Send + Sync {
    fn reconstruct(&self, x: &ImageGrid) -> Result<ImageGrid>;
    fn name(&self) -> &str;
    fn weight_hash(&self) -> u64;
}

/// Spatial-bottleneck autoencoder: three conv+pool encoder blocks, a
/// mirrored upsample+conv decoder, sigmoid output.
#[derive(Debug, Clone)]
pub struct ConvAE {
    channels: Vec<usize>,
    kernels: Vec<Tensor>,
    biases: Vec<Tensor>,
    train_h: usize,
    train_w: usize,
    seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 120,
            lr: 2e-3,
            batch: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// mean per-sample MSE per epoch; exactly `epochs` entries
    pub epoch_losses: Vec<f64>,
    /// mean absolute reconstruction error over the training corpus
    pub final_corpus_mae: f64,
}

const CHANNELS: [usize; 3] = [16, 32, 64];

fn kernel_shapes(channels: &[usize]) -> Vec<[usize; 4]> {
    let (c1, c2, c3) = (channels[0], channels[1], channels[2]);
    vec![
        [c1, 1, 3, 3],
        [c2, c1, 3, 3],
        [c3, c2, 3, 3],
        [c2, c3, 3, 3],
        [c1, c2, 3, 3],
        [c1, c1, 3, 3],
        [1, c1, 3, 3],
    ]
}

impl ConvAE {
    fn init(h: usize, w: usize, seed: u64) -> Result<ConvAE> {
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Config(format!(
                "extents {h}x{w} not divisible by the three-pool schedule"
            )));
        }
        let channels = CHANNELS.to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x6165, 0));
        let mut kernels = Vec::new();
        let mut biases = Vec::new();
        for shape in kernel_shapes(&channels) {
            let fan_in = shape[1] * shape[2] * shape[3];
            let sd = (2.0 / fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|_| sd * rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect();
            kernels.push(Tensor::new(shape.to_vec(), data)?);
            biases.push(Tensor::zeros(&[shape[0]]));
        }
        Ok(ConvAE {
            channels,
            kernels,
            biases,
            train_h: h,
            train_w: w,
            seed,
        })
    }

    fn forward_graph(
        tape: &mut Tape,
        x: NodeId,
        kernels: &[NodeId],
        biases: &[NodeId],
    ) -> Result<NodeId> {
        let block = |tape: &mut Tape, x: NodeId, i: usize| -> Result<NodeId> {
            let c = tape.conv2d(x, kernels[i])?;
            let b = tape.channel_bias(c, biases[i])?;
            tape.relu(b)
        };
        let mut h = block(tape, x, 0)?;
        h = tape.avgpool2(h)?;
        h = block(tape, h, 1)?;
        h = tape.avgpool2(h)?;
        h = block(tape, h, 2)?;
        h = tape.avgpool2(h)?;
        h = tape.upsample2(h)?;
        h = block(tape, h, 3)?;
        h = tape.upsample2(h)?;
        h = block(tape, h, 4)?;
        h = tape.upsample2(h)?;
        h = block(tape, h, 5)?;
        let c = tape.conv2d(h, kernels[6])?;
        let b = tape.channel_bias(c, biases[6])?;
        tape.sigmoid(b)
    }

    pub fn train_extents(&self) -> (usize, usize) {
        (self.train_h, self.train_w)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let manifest = AeManifest {
            channels: self.channels.clone(),
            train_h: self.train_h,
            train_w: self.train_w,
            seed: self.seed,
            weight_hash: self.weight_hash(),
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(dir.join("backbone_manifest.json"), json)
            .map_err(|e| Error::io("writing backbone manifest", e))?;
        for (i, (k, b)) in self.kernels.iter().zip(&self.biases).enumerate() {
            ntsr::save(k, &dir.join(format!("k{i:02}.ntsr")))?;
            ntsr::save(b, &dir.join(format!("b{i:02}.ntsr")))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<ConvAE> {
        let manifest_path = dir.join("backbone_manifest.json");
        let json = fs::read_to_string(&manifest_path)
            .map_err(|e| Error::io(format!("reading {}", manifest_path.display()), e))?;
        let manifest: AeManifest = serde_json::from_str(&json)
            .map_err(|e| Error::format(&manifest_path, e.to_string()))?;
        let mut model = ConvAE::init(manifest.train_h, manifest.train_w, manifest.seed)?;
        for i in 0..model.kernels.len() {
            model.kernels[i] = ntsr::load(&dir.join(format!("k{i:02}.ntsr")))?;
            model.biases[i] = ntsr::load(&dir.join(format!("b{i:02}.ntsr")))?;
        }
        if model.weight_hash() != manifest.weight_hash {
            return Err(Error::format(
                dir,
                "weight blobs do not match the recorded hash",
            ));
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct AeManifest {
    channels: Vec<usize>,
    train_h: usize,
    train_w: usize,
    seed: u64,
    weight_hash: u64,
}

impl SourceModel for ConvAE {
    fn reconstruct(&self, x: &ImageGrid) -> Result<ImageGrid> {
        if (x.height(), x.width()) != (self.train_h, self.train_w) {
            return Err(Error::shape(
                "reconstruct",
                format!(
                    "{}x{} input vs {}x{} training extents",
                    x.height(),
                    x.width(),
                    self.train_h,
                    self.train_w
                ),
            ));
        }
        let mut tape = Tape::new();
        let img = tape.constant(x.to_tensor());
        let kernels: Vec<NodeId> = self.kernels.iter().map(|k| tape.constant(k.clone())).collect();
        let biases: Vec<NodeId> = self.biases.iter().map(|b| tape.constant(b.clone())).collect();
        let out = ConvAE::forward_graph(&mut tape, img, &kernels, &biases)?;
        ImageGrid::from_tensor(tape.value(out))
    }

    fn name(&self) -> &str {
        "conv_ae"
    }

    fn weight_hash(&self) -> u64 {
        let mut h = Fnv1a::new();
        for (k, b) in self.kernels.iter().zip(&self.biases) {
            h.update_f64s(k.data());
            h.update_f64s(b.data());
        }
        h.finish()
    }
}

/// Trains the reference autoencoder on a healthy corpus with seeded
/// mini-batch gradient descent (adaptive-moments updates) and returns the
/// frozen model plus its training curve.
pub fn train_source(corpus: &[ImageGrid], cfg: &TrainConfig) -> Result<(ConvAE, TrainReport)> {
    if corpus.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    if cfg.epochs == 0 || cfg.batch == 0 {
        return Err(Error::Config("epochs and batch size must be >= 1".into()));
    }
    if cfg.lr <= 0.0 {
        return Err(Error::Config(format!("learning rate {} must be > 0", cfg.lr)));
    }
    let (h, w) = (corpus[0].height(), corpus[0].width());
    for img in corpus {
        if (img.height(), img.width()) != (h, w) {
            return Err(Error::shape(
                "train_source",
                format!(
                    "corpus extents are inconsistent: {}x{} vs {h}x{w}",
                    img.height(),
                    img.width()
                ),
            ));
        }
    }
    let mut model = ConvAE::init(h, w, cfg.seed)?;
    let n_params = model.kernels.len() + model.biases.len();
    let mut opt = OptimState::new(OptimizerKind::AdaptiveMoments, n_params);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x747261, 0));
    let numel = (h * w) as f64;

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_se = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let mut tape = Tape::new();
            let kernel_ids: Vec<NodeId> = model
                .kernels
                .iter()
                .map(|k| tape.leaf(k.clone(), true))
                .collect();
            let bias_ids: Vec<NodeId> = model
                .biases
                .iter()
                .map(|b| tape.leaf(b.clone(), true))
                .collect();
            let mut batch_loss: Option<NodeId> = None;
            for &idx in chunk {
                let img = tape.constant(corpus[idx].to_tensor());
                let out = ConvAE::forward_graph(&mut tape, img, &kernel_ids, &bias_ids)?;
                let diff = tape.sub(out, img)?;
                let se = tape.sq_sum(diff)?;
                let mse = tape.scale(se, 1.0 / numel)?;
                batch_loss = Some(match batch_loss {
                    Some(acc) => tape.add(acc, mse)?,
                    None => mse,
                });
            }
            let total = batch_loss.expect("non-empty chunk");
            let mean = tape.scale(total, 1.0 / chunk.len() as f64)?;
            let loss_value = tape.value(mean).item().expect("scalar loss");
            epoch_se += loss_value * chunk.len() as f64;
            tape.backward(mean)?;
            opt.begin_step();
            for (slot, (&id, tensor)) in kernel_ids
                .iter()
                .zip(model.kernels.iter_mut())
                .map(|(id, t)| (id, t))
                .chain(bias_ids.iter().zip(model.biases.iter_mut()).map(|(id, t)| (id, t)))
                .enumerate()
            {
                if let Some(g) = tape.grad(id) {
                    let g = g.data().to_vec();
                    opt.apply(slot, tensor.data_mut(), &g, cfg.lr);
                }
            }
        }
        epoch_losses.push(epoch_se / corpus.len() as f64);
    }

    let mut mae_sum = 0.0;
    for img in corpus {
        let recon = model.reconstruct(img)?;
        mae_sum += crate::eval::mae(img, &recon)?;
    }
    let report = TrainReport {
        epoch_losses,
        final_corpus_mae: mae_sum / corpus.len() as f64,
    };
    Ok((model, report))
}
