//! Unpaired training loop and single-generator inference.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::losses::{discriminator_objective, generator_objective, BoundModels, LossReport, LossWeights};
use crate::networks::{
    generator_forward, generator_graph, init_parameters, load_model, save_checkpoint, DiscriminatorConfig,
    GeneratorConfig, Mode, ModelConfig, ParameterSet,
};
use crate::nn::{Adam, Graph, Tensor};
use crate::rng::{derive_seed, rng_from_seed};
use crate::synthesis::{DatasetManifest, SPLIT_TRAIN_ARTIFACT, SPLIT_TRAIN_CLEAN};
use crate::tomo::ImageGrid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-3,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            epochs: 50,
            batch_size: 1,
            seed: 0,
            checkpoint_interval: 0,
        }
    }
}

impl TrainConfig {
    /// Accepts `learning_rate = 0` so frozen runs can be checked.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate {} is invalid", self.learning_rate)));
        }
        for b in [self.adam_beta1, self.adam_beta2] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidArgument(format!("Adam beta {b} is outside [0, 1)")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// The four networks of the cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleGan {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub g: ParameterSet,
    pub f: ParameterSet,
    pub d_x: ParameterSet,
    pub d_y: ParameterSet,
}

pub const MODEL_NAMES: [&str; 4] = ["G", "F", "D_X", "D_Y"];

impl CycleGan {
    pub fn init(generator: GeneratorConfig, discriminator: DiscriminatorConfig, seed: u64) -> Result<Self> {
        let gm = ModelConfig::Generator(generator);
        let dm = ModelConfig::Discriminator(discriminator.clone());
        Ok(CycleGan {
            generator,
            g: init_parameters(&gm, derive_seed(seed, "init", 0))?,
            f: init_parameters(&gm, derive_seed(seed, "init", 1))?,
            d_x: init_parameters(&dm, derive_seed(seed, "init", 2))?,
            d_y: init_parameters(&dm, derive_seed(seed, "init", 3))?,
            discriminator,
        })
    }

    pub fn save(&self, dir: &Path, step: u64, extra: serde_json::Value) -> Result<()> {
        save_checkpoint(
            dir,
            step,
            &[("G", &self.g), ("F", &self.f), ("D_X", &self.d_x), ("D_Y", &self.d_y)],
            extra,
        )
    }
}

fn to_tensor(values: &[f64], h: usize, w: usize) -> Tensor<f32> {
    Tensor::new(vec![1, h, w], values.iter().map(|&v| v as f32).collect())
}

fn add_into(acc: &mut [Vec<f32>], g: &Graph<f32>, vars: &[crate::nn::Var], scale: f32) {
    for (a, &v) in acc.iter_mut().zip(vars) {
        if let Some(gr) = g.grad(v) {
            for (p, q) in a.iter_mut().zip(gr) {
                *p += scale * q;
            }
        }
    }
}

fn apply(opt: &mut Adam, sets: &mut [&mut ParameterSet], grads: &[Vec<f32>]) {
    let mut params: Vec<&mut [f32]> = sets
        .iter_mut()
        .flat_map(|s| s.arrays.iter_mut().map(|a| a.data.as_mut_slice()))
        .collect();
    let grads: Vec<&[f32]> = grads.iter().map(Vec::as_slice).collect();
    opt.update(&mut params, &grads);
}

/// One unpaired sample in network units (`[-1, 1]`).
#[derive(Debug, Clone)]
pub struct Sample {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Sample {
    pub fn from_image(image: &ImageGrid) -> Self {
        Sample {
            height: image.height,
            width: image.width,
            values: image.normalized(),
        }
    }

    fn tensor(&self) -> Tensor<f32> {
        to_tensor(&self.values, self.height, self.width)
    }
}

/// Optimiser state around a [`CycleGan`].
pub struct Trainer {
    pub models: CycleGan,
    pub weights: LossWeights,
    pub step: u64,
    opt_g: Adam,
    opt_d: Adam,
}

impl Trainer {
    pub fn new(models: CycleGan, weights: LossWeights, cfg: &TrainConfig) -> Result<Self> {
        weights.validate()?;
        cfg.validate()?;
        let gen_sizes: Vec<usize> = models.g.sizes().into_iter().chain(models.f.sizes()).collect();
        let disc_sizes: Vec<usize> = models.d_x.sizes().into_iter().chain(models.d_y.sizes()).collect();
        Ok(Trainer {
            opt_g: Adam::new(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, &gen_sizes),
            opt_d: Adam::new(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, &disc_sizes),
            models,
            weights,
            step: 0,
        })
    }

    /// Translations `G(y)` and `F(x)` with the current parameters.
    fn fakes(&self, x: &Sample, y: &Sample) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let m = &self.models;
        let mut g = Graph::<f32>::new();
        let gp = m.g.bind(&mut g, false);
        let fp = m.f.bind(&mut g, false);
        let xv = g.constant(x.tensor());
        let yv = g.constant(y.tensor());
        let ovr = Default::default();
        let gy = generator_graph(&mut g, yv, &gp, &m.generator, ovr)?;
        let fx = generator_graph(&mut g, xv, &fp, &m.generator, ovr)?;
        Ok((g.value(gy).clone(), g.value(fx).clone()))
    }

    /// One discriminator update followed by one generator update over a
    /// batch of `(x, y)` pairs; gradients are averaged over the batch.
    pub fn step(&mut self, batch: &[(&Sample, &Sample)]) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let scale = 1.0 / batch.len() as f32;
        let mut report = LossReport::default();
        let w = 1.0 / batch.len() as f64;

        let fakes: Vec<_> = batch.iter().map(|(x, y)| self.fakes(x, y)).collect::<Result<_>>()?;
        let mut dgrads: Vec<Vec<f32>> = self.opt_d.m.iter().map(|m| vec![0.0; m.len()]).collect();
        for ((x, y), (gy, fx)) in batch.iter().zip(&fakes) {
            let m = &self.models;
            let mut g = Graph::<f32>::new();
            let dx = m.d_x.bind(&mut g, true);
            let dy = m.d_y.bind(&mut g, true);
            let (xr, yr) = (g.constant(x.tensor()), g.constant(y.tensor()));
            let (gyv, fxv) = (g.constant(gy.clone()), g.constant(fx.clone()));
            let lx = discriminator_objective(&mut g, xr, gyv, &dx, &m.discriminator)?;
            let ly = discriminator_objective(&mut g, yr, fxv, &dy, &m.discriminator)?;
            let total = g.weighted_sum(&[(lx, 1.0), (ly, 1.0)]);
            let (vx, vy) = (g.scalar(lx) as f64, g.scalar(ly) as f64);
            report.disc_x += w * vx;
            report.disc_y += w * vy;
            report.total_d += w * (vx + vy);
            g.backward(total);
            let vars: Vec<_> = dx.vars.iter().chain(&dy.vars).copied().collect();
            add_into(&mut dgrads, &g, &vars, scale);
        }
        self.check_finite(&report)?;
        let m = &mut self.models;
        apply(&mut self.opt_d, &mut [&mut m.d_x, &mut m.d_y], &dgrads);

        let mut ggrads: Vec<Vec<f32>> = self.opt_g.m.iter().map(|m| vec![0.0; m.len()]).collect();
        for (x, y) in batch {
            let m = &self.models;
            let mut g = Graph::<f32>::new();
            let gp = m.g.bind(&mut g, true);
            let fp = m.f.bind(&mut g, true);
            let dx = m.d_x.bind(&mut g, false);
            let dy = m.d_y.bind(&mut g, false);
            let (xv, yv) = (g.constant(x.tensor()), g.constant(y.tensor()));
            let bound = BoundModels {
                g: &gp,
                f: &fp,
                d_x: &dx,
                d_y: &dy,
                generator: &m.generator,
                discriminator: &m.discriminator,
            };
            let o = generator_objective(&mut g, xv, yv, &bound, &self.weights)?;
            let s = |v| g.scalar(v) as f64;
            report.cycle_x += w * s(o.cycle_x);
            report.cycle_y += w * s(o.cycle_y);
            report.identity += w * (s(o.identity_x) + s(o.identity_y));
            report.adv_g += w * s(o.adv_g);
            report.adv_f += w * s(o.adv_f);
            report.total_g += w * s(o.total);
            g.backward(o.total);
            let vars: Vec<_> = gp.vars.iter().chain(&fp.vars).copied().collect();
            add_into(&mut ggrads, &g, &vars, scale);
        }
        self.check_finite(&report)?;
        let m = &mut self.models;
        apply(&mut self.opt_g, &mut [&mut m.g, &mut m.f], &ggrads);
        self.step += 1;
        Ok(report)
    }

    fn check_finite(&self, report: &LossReport) -> Result<()> {
        match report.first_non_finite() {
            Some(name) => Err(Error::Diverged {
                step: self.step,
                message: format!("{name} is not finite"),
            }),
            None => Ok(()),
        }
    }
}

/// Artifact-free (`x`) and artifact (`y`) training pools.
pub struct TrainingPools {
    pub clean: Vec<Sample>,
    pub artifact: Vec<Sample>,
}

impl TrainingPools {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let (root, manifest) = DatasetManifest::load(manifest_path)?;
        let read = |split: &str| -> Result<Vec<Sample>> {
            manifest
                .split(split)
                .iter()
                .map(|e| io::read_image(&root.join(&e.file)).map(|img| Sample::from_image(&img)))
                .collect()
        };
        let pools = TrainingPools {
            clean: read(SPLIT_TRAIN_CLEAN)?,
            artifact: read(SPLIT_TRAIN_ARTIFACT)?,
        };
        if pools.clean.is_empty() || pools.artifact.is_empty() {
            return Err(Error::Dataset("training needs nonempty clean and artifact pools".into()));
        }
        Ok(pools)
    }
}

pub const LOSS_LOG: &str = "losses.csv";
pub const FINAL_CHECKPOINT: &str = "checkpoint";
pub const DIAGNOSTIC_CHECKPOINT: &str = "diagnostic";

fn log_header(log: &mut csv::Writer<fs::File>) -> Result<()> {
    let names = LossReport::default().fields().map(|(n, _)| n);
    log.write_record(["step", "epoch"].into_iter().chain(names))?;
    Ok(())
}

fn log_row(log: &mut csv::Writer<fs::File>, step: u64, epoch: usize, report: &LossReport) -> Result<()> {
    let values = report.fields().map(|(_, v)| v.to_string());
    log.write_record([step.to_string(), epoch.to_string()].into_iter().chain(values))?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub models: CycleGan,
    pub steps: u64,
    pub checkpoint: PathBuf,
    pub last: LossReport,
}

/// Trains from freshly initialised models. Each epoch visits every image of
/// the larger pool once, pairing it with a reshuffled draw from the other.
pub fn train(
    pools: &TrainingPools,
    generator: GeneratorConfig,
    discriminator: DiscriminatorConfig,
    weights: LossWeights,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let models = CycleGan::init(generator, discriminator, cfg.seed)?;
    let mut trainer = Trainer::new(models, weights, cfg)?;
    let mut log = csv::Writer::from_path(out_dir.join(LOSS_LOG))?;
    log_header(&mut log)?;
    let per_epoch = pools.clean.len().max(pools.artifact.len());
    let mut rng = rng_from_seed(derive_seed(cfg.seed, "shuffle", 0));
    let mut last = LossReport::default();
    let extra = |epoch: usize| serde_json::json!({ "epoch": epoch, "weights": weights, "train": cfg });
    for epoch in 0..cfg.epochs {
        let mut xi: Vec<usize> = (0..per_epoch).map(|i| i % pools.clean.len()).collect();
        let mut yi: Vec<usize> = (0..per_epoch).map(|i| i % pools.artifact.len()).collect();
        xi.shuffle(&mut rng);
        yi.shuffle(&mut rng);
        for start in (0..per_epoch).step_by(cfg.batch_size) {
            let end = (start + cfg.batch_size).min(per_epoch);
            let batch: Vec<(&Sample, &Sample)> =
                (start..end).map(|k| (&pools.clean[xi[k]], &pools.artifact[yi[k]])).collect();
            let report = match trainer.step(&batch) {
                Ok(r) => r,
                Err(e @ Error::Diverged { .. }) => {
                    let dir = out_dir.join(DIAGNOSTIC_CHECKPOINT);
                    trainer.models.save(
                        &dir,
                        trainer.step,
                        serde_json::json!({ "epoch": epoch, "error": e.to_string() }),
                    )?;
                    log.flush()?;
                    log::error!("{e}; diagnostic checkpoint at {}", dir.display());
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            log_row(&mut log, trainer.step, epoch, &report)?;
            last = report;
            if cfg.checkpoint_interval > 0 && trainer.step % cfg.checkpoint_interval == 0 {
                let dir = out_dir.join(format!("step_{:08}", trainer.step));
                trainer.models.save(&dir, trainer.step, extra(epoch))?;
            }
        }
        log::info!(
            "epoch {}/{}: total_G {:.4} total_D {:.4}",
            epoch + 1,
            cfg.epochs,
            last.total_g,
            last.total_d
        );
    }
    log.flush()?;
    let checkpoint = out_dir.join(FINAL_CHECKPOINT);
    trainer.models.save(&checkpoint, trainer.step, extra(cfg.epochs))?;
    Ok(TrainOutcome {
        steps: trainer.step,
        models: trainer.models,
        checkpoint,
        last,
    })
}

/// Runs `G` on an image: window normalisation, one forward pass, and the
/// inverse mapping back to the image's intensity window.
pub fn infer_with(image: &ImageGrid, g: &ParameterSet) -> Result<ImageGrid> {
    let config = match &g.config {
        ModelConfig::Generator(c) => *c,
        ModelConfig::Discriminator(_) => {
            return Err(Error::Checkpoint("expected generator parameters".into()));
        }
    };
    let net = image.with_values(image.normalized());
    let out = generator_forward(&net, g, &config, Mode::Eval)?;
    Ok(ImageGrid::from_normalized(image, &out.values))
}

/// Loads only `G` from `checkpoint` and applies it.
pub fn infer(image: &ImageGrid, checkpoint: &Path, expected: Option<&GeneratorConfig>) -> Result<ImageGrid> {
    let g = load_model(checkpoint, "G")?;
    if let Some(c) = expected {
        if g.config != ModelConfig::Generator(*c) {
            return Err(Error::Checkpoint("checkpoint generator config differs from the requested one".into()));
        }
    }
    infer_with(image, &g)
}

/// Normalise and denormalise without a network.
pub fn normalization_round_trip(image: &ImageGrid) -> ImageGrid {
    ImageGrid::from_normalized(image, &image.normalized())
}
