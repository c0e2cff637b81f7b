//! End-to-end single-sample walkthrough: train a small source model on
//! healthy phantoms, corrupt one lesioned target with a scanner-style
//! shift, adapt, and compare the residual maps before and after.
//!
//! Usage: cargo run --release -p stalab-core --example single_sample [out_dir]

use stalab_core::backbone::{train_source, SourceModel, TrainConfig};
use stalab_core::domains::{
    apply_shift, gen_healthy, inject_lesion, CorpusManifest, LesionKind, LesionSpec,
};
use stalab_core::engine::{adapt, anomaly_map, AdaptConfig};
use stalab_core::eval::mae;
use stalab_core::image::{ImageGrid, Mask};
use stalab_core::perceptual::{build_psi, PsiSource, PsiSpec};

fn residual_stats(map: &ImageGrid, mask: &Mask) -> (f64, f64, f64) {
    let mut outside: Vec<f64> = Vec::new();
    let mut inside_sum = 0.0;
    let mut inside_n = 0.0;
    for y in 0..map.height() {
        for x in 0..map.width() {
            if mask.get(y, x) {
                inside_sum += map.get(y, x);
                inside_n += 1.0;
            } else {
                outside.push(map.get(y, x));
            }
        }
    }
    outside.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let p95 = outside[(0.95 * (outside.len() - 1) as f64) as usize];
    let outside_mean = outside.iter().sum::<f64>() / outside.len() as f64;
    let inside_mean = if inside_n > 0.0 { inside_sum / inside_n } else { 0.0 };
    (p95, outside_mean, inside_mean)
}

fn main() -> stalab_core::Result<()> {
    let out_dir = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "single_sample_out".into());
    std::fs::create_dir_all(&out_dir).expect("output dir");

    // TEMP dev cache
    let cache = std::path::Path::new("/tmp/stalab_backbone_cache");
    let backbone = if cache.join("backbone_manifest.json").exists() {
        println!("loading cached backbone...");
        stalab_core::backbone::ConvAE::load(cache)?
    } else {
        println!("training source model on 40 healthy phantoms (64x64)...");
        let corpus: Vec<ImageGrid> = (0..40)
            .map(|s| gen_healthy(s, 64, 64).map(|(_, img)| img))
            .collect::<stalab_core::Result<Vec<_>>>()?;
        let train_cfg = TrainConfig {
            epochs: 120,
            lr: 2e-3,
            batch: 8,
            seed: 0,
        };
        let t0 = std::time::Instant::now();
        let (backbone, report) = train_source(&corpus, &train_cfg)?;
        println!(
            "  trained in {:.1}s; first-epoch loss {:.5}, final {:.5}, corpus MAE {:.4}",
            t0.elapsed().as_secs_f64(),
            report.epoch_losses[0],
            report.epoch_losses.last().unwrap(),
            report.final_corpus_mae
        );
        backbone.save(cache)?;
        backbone
    };

    // lesioned target imaged through a shifted scanner
    let manifest = CorpusManifest::default();
    let (phantom, healthy) = gen_healthy(1000, 64, 64)?;
    let lesion = LesionSpec {
        kind: LesionKind::BrightBlob,
        center: (26.0, 38.0),
        radius: 6.0,
        delta: 0.35,
        seed: 3,
    };
    let (lesioned, mask) = inject_lesion(&healthy, &lesion, &phantom)?;
    let x_t = apply_shift(&lesioned, &manifest.target_shift.with_seed(1000))?;

    let psi = build_psi(PsiSpec::default(), PsiSource::Seed(99))?;
    let recon = backbone.reconstruct(&x_t)?;
    let unadapted = anomaly_map(&x_t, &recon)?;

    // TEMP dev overrides via env
    let envf = |k: &str, d: f64| {
        std::env::var(k)
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(d)
    };
    let cfg = AdaptConfig {
        seed: 1000,
        beta: envf("TUNE_BETA", 1.0),
        gamma: envf("TUNE_GAMMA", 100.0),
        lambda: envf("TUNE_LAMBDA", 1e-3),
        iterations: envf("TUNE_ITERS", 300.0) as usize,
        ..AdaptConfig::default()
    };
    println!(
        "adapting ({} iterations, beta {}, gamma {}, lambda {}, {:?})...",
        cfg.iterations, cfg.beta, cfg.gamma, cfg.lambda, cfg.optimizer
    );
    let t1 = std::time::Instant::now();
    let result = adapt(&x_t, &backbone, &psi, &cfg)?;
    println!(
        "  adapted in {:.1}s ({:.3}s per iteration)",
        t1.elapsed().as_secs_f64(),
        t1.elapsed().as_secs_f64() / cfg.iterations as f64
    );
    println!(
        "  loss trace: total {:.5} -> {:.5} (content {:.5} -> {:.5}, style {:.6} -> {:.6})",
        result.total_trace.first().unwrap(),
        result.total_trace.last().unwrap(),
        result.content_trace.first().unwrap(),
        result.content_trace.last().unwrap(),
        result.style_trace.first().unwrap(),
        result.style_trace.last().unwrap(),
    );

    let (u_p95, u_out, u_in) = residual_stats(&unadapted.values, &mask);
    let (a_p95, a_out, a_in) = residual_stats(&result.anomaly.values, &mask);
    println!("residuals      p95(out)  mean(out)  mean(in)  in/out");
    println!(
        "  unadapted     {u_p95:.4}    {u_out:.4}     {u_in:.4}    {:.2}",
        u_in / u_out
    );
    println!(
        "  adapted       {a_p95:.4}    {a_out:.4}     {a_in:.4}    {:.2}",
        a_in / a_out
    );
    println!(
        "adapted-vs-target MAE {:.4} (unadapted reconstruction MAE {:.4})",
        mae(&x_t, &result.adapted)?,
        mae(&x_t, &recon)?
    );

    let dir = std::path::Path::new(&out_dir);
    x_t.save_pgm(&dir.join("target.pgm"))?;
    recon.save_pgm(&dir.join("reconstruction.pgm"))?;
    result.adapted.save_pgm(&dir.join("adapted.pgm"))?;
    result.anomaly.values.save_pgm(&dir.join("anomaly.pgm"))?;
    unadapted.values.save_pgm(&dir.join("anomaly_unadapted.pgm"))?;
    mask.save_pgm(&dir.join("lesion_mask.pgm"))?;
    println!("wrote panels to {out_dir}/");
    Ok(())
}
