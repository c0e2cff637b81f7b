//! The selective test-time adaptation loop: the frozen source model
//! supplies content, the target sample supplies style, and a fresh
//! implicit network is optimized per sample against both. The residual
//! between the target and the adapted render is the anomaly map.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::SourceModel;
use crate::error::{Error, Result};
use crate::gradcore::Tensor;
use crate::hash::derive_seed;
use crate::image::ImageGrid;
use crate::implicit::{init_latents, PhiInput, PhiNetwork, PhiSpec, Variant};
use crate::optim::{OptimState, OptimizerKind};
use crate::perceptual::{
    content_loss_on_tape, gram, style_loss_on_tape, FeatureExtractor,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    /// content weight
    pub beta: f64,
    /// style weight
    pub gamma: f64,
    /// learning rate
    pub lambda: f64,
    pub iterations: usize,
    pub seed: u64,
    /// latent interpolation weight
    pub alpha: f64,
    pub variant: Variant,
    pub optimizer: OptimizerKind,
    /// trace stride; the final step is always logged
    pub log_every: usize,
    pub phi: PhiSpec,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            beta: 1.0,
            gamma: 100.0,
            lambda: 1e-3,
            iterations: 300,
            seed: 0,
            alpha: 0.5,
            variant: Variant::Full,
            optimizer: OptimizerKind::AdaptiveMoments,
            log_every: 1,
            phi: PhiSpec::default(),
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 || self.gamma < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.beta + self.gamma == 0.0 {
            return Err(Error::Config("beta + gamma must be positive".into()));
        }
        // lambda = 0 is allowed: it freezes the run and is the documented no-op case
        if self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda {} must be >= 0", self.lambda)));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0,1]", self.alpha)));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be >= 1".into()));
        }
        self.phi.validate()
    }
}

/// Elementwise absolute residual of an image pair.
#[derive(Debug, Clone)]
pub struct AnomalyMap {
    pub values: ImageGrid,
    /// fingerprints of the pair the map was computed from
    pub source: String,
}

pub fn anomaly_map(x: &ImageGrid, x_hat: &ImageGrid) -> Result<AnomalyMap> {
    if !x.same_extents(x_hat) {
        return Err(Error::shape(
            "anomaly_map",
            format!(
                "{}x{} vs {}x{}",
                x.height(),
                x.width(),
                x_hat.height(),
                x_hat.width()
            ),
        ));
    }
    let values = ImageGrid::new(
        x.height(),
        x.width(),
        x.data()
            .iter()
            .zip(x_hat.data())
            .map(|(&a, &b)| (a - b).abs())
            .collect(),
    )?;
    Ok(AnomalyMap {
        values,
        source: format!("{:016x}|{:016x}", x.fingerprint(), x_hat.fingerprint()),
    })
}

/// Cached objective endpoints: content features of the reconstruction and
/// style Gram matrices of the raw target. Both are constant across
/// iterations.
#[derive(Debug, Clone)]
pub struct LossTargets {
    pub content: Vec<(usize, Tensor)>,
    pub style_grams: Vec<(usize, Tensor)>,
}

impl LossTargets {
    pub fn build(
        psi: &FeatureExtractor,
        content_image: &ImageGrid,
        style_image: &ImageGrid,
    ) -> Result<LossTargets> {
        let f_c = psi.extract(content_image)?;
        let f_s = psi.extract(style_image)?;
        let content = psi
            .spec()
            .content_taps
            .iter()
            .map(|&t| {
                f_c.tap(t)
                    .cloned()
                    .map(|tensor| (t, tensor))
                    .ok_or_else(|| Error::Config(format!("content tap {t} missing")))
            })
            .collect::<Result<Vec<_>>>()?;
        let style_grams = psi
            .spec()
            .style_taps
            .iter()
            .map(|&t| {
                let f = f_s
                    .tap(t)
                    .ok_or_else(|| Error::Config(format!("style tap {t} missing")))?;
                Ok((t, gram(f)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LossTargets {
            content,
            style_grams,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub content: f64,
    pub style: f64,
    pub total: f64,
}

/// One optimization step: render, extract, weigh the two objectives,
/// backpropagate and update exactly the trainable parameters of the
/// current variant.
pub fn step(
    phi: &mut PhiNetwork,
    input: &PhiInput,
    targets: &LossTargets,
    psi: &FeatureExtractor,
    cfg: &AdaptConfig,
    opt: &mut OptimState,
) -> Result<StepLosses> {
    let mut tape = crate::gradcore::Tape::new();
    let (image, bindings) = phi.forward_on_tape(&mut tape, input)?;
    let taps = psi.forward_on_tape(&mut tape, image)?;
    let lc = content_loss_on_tape(&mut tape, &taps, &targets.content)?;
    let ls = style_loss_on_tape(&mut tape, &taps, &targets.style_grams)?;
    let wc = tape.scale(lc, cfg.beta)?;
    let ws = tape.scale(ls, cfg.gamma)?;
    let total = tape.add(wc, ws)?;

    let losses = StepLosses {
        content: tape.value(lc).item().expect("scalar"),
        style: tape.value(ls).item().expect("scalar"),
        total: tape.value(total).item().expect("scalar"),
    };
    // tape ops reject non-finite values, so reaching this point means the
    // loss is finite; backward shares the same guarantee
    tape.backward(total)?;
    opt.begin_step();
    for (slot, (pid, node)) in bindings.iter().enumerate() {
        if let Some(g) = tape.grad(*node) {
            let g = g.data().to_vec();
            opt.apply(slot, phi.param_mut(*pid).data_mut(), &g, cfg.lambda);
        }
    }
    Ok(losses)
}

#[derive(Debug, Clone)]
pub struct AdaptResult {
    pub adapted: ImageGrid,
    pub anomaly: AnomalyMap,
    pub trace_steps: Vec<usize>,
    pub content_trace: Vec<f64>,
    pub style_trace: Vec<f64>,
    pub total_trace: Vec<f64>,
    pub final_phi: PhiNetwork,
    pub wall_time: f64,
}

/// Full single-sample adaptation: content from the frozen source model,
/// style from the target sample, a fixed iteration budget, no early stop.
pub fn adapt(
    x_t: &ImageGrid,
    backbone: &dyn SourceModel,
    psi: &FeatureExtractor,
    cfg: &AdaptConfig,
) -> Result<AdaptResult> {
    cfg.validate()?;
    if !x_t.in_unit_range() {
        return Err(Error::Config("target image values must lie in [0,1]".into()));
    }
    let start = Instant::now();
    let backbone_hash = backbone.weight_hash();

    // style endpoint is the raw target, content endpoint its reconstruction
    let i_s = x_t;
    let i_c = backbone.reconstruct(x_t)?;
    if !i_c.same_extents(x_t) {
        return Err(Error::shape(
            "adapt",
            format!(
                "backbone produced {}x{} for a {}x{} target",
                i_c.height(),
                i_c.width(),
                x_t.height(),
                x_t.width()
            ),
        ));
    }
    let targets = LossTargets::build(psi, &i_c, i_s)?;

    let mut latents = init_latents(cfg.seed, cfg.phi.d_z, cfg.phi.d_v)?;
    latents.alpha = cfg.alpha;
    let input = PhiInput::build(&cfg.phi, &latents, x_t.height(), x_t.width())?;
    let mut phi = PhiNetwork::new(cfg.phi, cfg.variant, derive_seed(cfg.seed, 0x706869, 1))?;
    let mut opt = OptimState::new(cfg.optimizer, phi.trainable_params().len());

    let mut trace_steps = Vec::new();
    let mut content_trace = Vec::new();
    let mut style_trace = Vec::new();
    let mut total_trace = Vec::new();
    for i in 0..cfg.iterations {
        let losses = step(&mut phi, &input, &targets, psi, cfg, &mut opt)?;
        if i % cfg.log_every == 0 || i + 1 == cfg.iterations {
            trace_steps.push(i);
            content_trace.push(losses.content);
            style_trace.push(losses.style);
            total_trace.push(losses.total);
        }
    }

    let adapted = phi.render(&input)?;
    let anomaly = anomaly_map(x_t, &adapted)?;
    debug_assert_eq!(backbone.weight_hash(), backbone_hash);
    Ok(AdaptResult {
        adapted,
        anomaly,
        trace_steps,
        content_trace,
        style_trace,
        total_trace,
        final_phi: phi,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

impl AdaptResult {
    /// Persists the adapted image, anomaly map, loss trace and the
    /// configuration echo into `dir`.
    pub fn save(&self, dir: &Path, cfg: &AdaptConfig) -> Result<()> {
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        self.adapted.save_pgm(&dir.join("adapted.pgm"))?;
        self.anomaly.values.save_pgm(&dir.join("anomaly.pgm"))?;
        let trace_path = dir.join("trace.csv");
        let mut writer = csv::Writer::from_path(&trace_path)
            .map_err(|e| Error::format(&trace_path, format!("opening trace: {e}")))?;
        writer
            .write_record(["step", "content", "style", "total"])
            .map_err(|e| Error::format(&trace_path, e.to_string()))?;
        for (i, &s) in self.trace_steps.iter().enumerate() {
            writer
                .write_record([
                    s.to_string(),
                    format!("{:.12e}", self.content_trace[i]),
                    format!("{:.12e}", self.style_trace[i]),
                    format!("{:.12e}", self.total_trace[i]),
                ])
                .map_err(|e| Error::format(&trace_path, e.to_string()))?;
        }
        writer
            .flush()
            .map_err(|e| Error::io("flushing trace", e))?;
        let echo = serde_json::to_string_pretty(cfg).expect("config serializes");
        std::fs::write(dir.join("config_echo.json"), echo)
            .map_err(|e| Error::io("writing config echo", e))?;
        self.final_phi.save(&dir.join("phi"))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{train_source, TrainConfig};
    use crate::perceptual::{build_psi, PsiSource, PsiSpec};

    fn tiny_phi() -> PhiSpec {
        PhiSpec {
            depth: 2,
            width: 12,
            d_z: 6,
            d_v: 6,
            fourier_freqs: 3,
            ..PhiSpec::default()
        }
    }

    fn tiny_psi() -> crate::perceptual::FeatureExtractor {
        build_psi(
            PsiSpec {
                channels: vec![4, 8],
                content_taps: vec![2],
                style_taps: vec![1, 2],
            },
            PsiSource::Seed(5),
        )
        .unwrap()
    }

    fn tiny_backbone() -> crate::backbone::ConvAE {
        let corpus: Vec<ImageGrid> = (0..3)
            .map(|s| crate::domains::gen_healthy(s, 32, 32).unwrap().1)
            .collect();
        let cfg = TrainConfig {
            epochs: 6,
            lr: 2e-3,
            batch: 3,
            seed: 7,
        };
        train_source(&corpus, &cfg).unwrap().0
    }

    #[test]
    fn config_invariants_are_enforced() {
        let mut cfg = AdaptConfig::default();
        cfg.beta = 0.0;
        cfg.gamma = 0.0;
        assert!(cfg.validate().is_err());
        cfg.gamma = 1.0;
        assert!(cfg.validate().is_ok());
        cfg.lambda = -1.0;
        assert!(cfg.validate().is_err());
        cfg.lambda = 0.0;
        cfg.iterations = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn anomaly_map_basics() {
        let a = ImageGrid::constant(4, 4, 1.0);
        let b = ImageGrid::constant(4, 4, 0.25);
        let m = anomaly_map(&a, &b).unwrap();
        assert!(m.values.data().iter().all(|&v| (v - 0.75).abs() < 1e-15));
        // symmetry
        let n = anomaly_map(&b, &a).unwrap();
        assert_eq!(m.values.fingerprint(), n.values.fingerprint());
        // zero on identical inputs
        let z = anomaly_map(&a, &a).unwrap();
        assert!(z.values.data().iter().all(|&v| v == 0.0));
        assert!(anomaly_map(&a, &ImageGrid::zeros(4, 5)).is_err());
    }

    #[test]
    fn zero_lambda_is_a_no_op_run() {
        let backbone = tiny_backbone();
        let psi = tiny_psi();
        let (_, x_t) = crate::domains::gen_healthy(50, 32, 32).unwrap();
        let cfg = AdaptConfig {
            iterations: 1,
            lambda: 0.0,
            seed: 3,
            phi: tiny_phi(),
            ..AdaptConfig::default()
        };
        let result = adapt(&x_t, &backbone, &psi, &cfg).unwrap();
        assert_eq!(result.total_trace.len(), 1);
        assert_eq!(result.trace_steps, vec![0]);

        // the adapted image equals the untrained render
        let latents = {
            let mut l = init_latents(cfg.seed, cfg.phi.d_z, cfg.phi.d_v).unwrap();
            l.alpha = cfg.alpha;
            l
        };
        let input = PhiInput::build(&cfg.phi, &latents, 32, 32).unwrap();
        let untrained =
            PhiNetwork::new(cfg.phi, cfg.variant, derive_seed(cfg.seed, 0x706869, 1)).unwrap();
        let render = untrained.render(&input).unwrap();
        assert_eq!(result.adapted.fingerprint(), render.fingerprint());
    }

    #[test]
    fn gamma_zero_total_equals_content() {
        let backbone = tiny_backbone();
        let psi = tiny_psi();
        let (_, x_t) = crate::domains::gen_healthy(51, 32, 32).unwrap();
        let cfg = AdaptConfig {
            iterations: 3,
            gamma: 0.0,
            beta: 1.0,
            seed: 4,
            phi: tiny_phi(),
            ..AdaptConfig::default()
        };
        let result = adapt(&x_t, &backbone, &psi, &cfg).unwrap();
        assert_eq!(result.total_trace, result.content_trace);
    }

    #[test]
    fn bn_affine_step_freezes_dense_weights() {
        let psi = tiny_psi();
        let spec = tiny_phi();
        let mut phi = PhiNetwork::new(spec, Variant::BnAffine, 9).unwrap();
        let before: Vec<u64> = (0..=spec.depth)
            .map(|i| phi.param(crate::implicit::ParamId::DenseW(i)).fingerprint())
            .collect();
        let latents = init_latents(9, spec.d_z, spec.d_v).unwrap();
        let input = PhiInput::build(&spec, &latents, 32, 32).unwrap();
        let (_, x_t) = crate::domains::gen_healthy(52, 32, 32).unwrap();
        let targets = LossTargets::build(&psi, &x_t, &x_t).unwrap();
        let cfg = AdaptConfig {
            lambda: 0.05,
            phi: spec,
            variant: Variant::BnAffine,
            ..AdaptConfig::default()
        };
        let mut opt = OptimState::new(cfg.optimizer, phi.trainable_params().len());
        step(&mut phi, &input, &targets, &psi, &cfg, &mut opt).unwrap();
        let after: Vec<u64> = (0..=spec.depth)
            .map(|i| phi.param(crate::implicit::ParamId::DenseW(i)).fingerprint())
            .collect();
        assert_eq!(before, after);
        // while the norm affine parameters did move
        let g0 = phi.param(crate::implicit::ParamId::NormGain(0));
        assert!(g0.data().iter().any(|&v| v != 1.0));
    }

    #[test]
    fn adapt_is_deterministic() {
        let backbone = tiny_backbone();
        let psi = tiny_psi();
        let (_, x_t) = crate::domains::gen_healthy(53, 32, 32).unwrap();
        let cfg = AdaptConfig {
            iterations: 5,
            seed: 11,
            phi: tiny_phi(),
            ..AdaptConfig::default()
        };
        let a = adapt(&x_t, &backbone, &psi, &cfg).unwrap();
        let b = adapt(&x_t, &backbone, &psi, &cfg).unwrap();
        assert_eq!(a.adapted.fingerprint(), b.adapted.fingerprint());
        assert_eq!(a.anomaly.values.fingerprint(), b.anomaly.values.fingerprint());
        assert_eq!(a.total_trace, b.total_trace);
    }

    #[test]
    fn frozen_source_hash_is_unchanged_by_adapt() {
        let backbone = tiny_backbone();
        let psi = tiny_psi();
        let before = backbone.weight_hash();
        let (_, x_t) = crate::domains::gen_healthy(54, 32, 32).unwrap();
        let cfg = AdaptConfig {
            iterations: 2,
            seed: 1,
            phi: tiny_phi(),
            ..AdaptConfig::default()
        };
        adapt(&x_t, &backbone, &psi, &cfg).unwrap();
        assert_eq!(backbone.weight_hash(), before);
    }

    #[test]
    fn trace_stride_and_lengths() {
        let backbone = tiny_backbone();
        let psi = tiny_psi();
        let (_, x_t) = crate::domains::gen_healthy(55, 32, 32).unwrap();
        let cfg = AdaptConfig {
            iterations: 10,
            log_every: 4,
            seed: 2,
            phi: tiny_phi(),
            ..AdaptConfig::default()
        };
        let result = adapt(&x_t, &backbone, &psi, &cfg).unwrap();
        // steps 0, 4, 8 plus the forced final step 9
        assert_eq!(result.trace_steps, vec![0, 4, 8, 9]);
        assert_eq!(result.content_trace.len(), 4);
        assert_eq!(result.style_trace.len(), 4);
        assert_eq!(result.total_trace.len(), 4);
    }
}
