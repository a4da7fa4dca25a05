use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::field::TriplaneField;
use super::render::{backward, forward_batch, FieldRay, RaySampleConfig};
use crate::error::{Error, Result};
use crate::imagecore::HdrImage;
use crate::lightrig::{CameraModel, Vec3};
use crate::quality::{idmrf_grad, MrfConfig, Raster};

/// One supervised OLAT: the image `camera` sees under light `light`.
#[derive(Debug, Clone)]
pub struct TrainView {
    pub camera: CameraModel,
    pub light: Vec3,
    pub target: HdrImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub batch_rays: usize,
    pub lambda_mrf: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Side of the square crop rendered for the patch loss.
    pub mrf_crop: usize,
    /// Patch loss runs on iterations divisible by this; 0 disables it.
    pub mrf_every: usize,
    /// Leading iterations trained on the reconstruction term alone.
    #[serde(default)]
    pub mrf_warmup: usize,
    pub mrf: MrfConfig,
    pub sampling: RaySampleConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1.5e-4,
            iterations: 20_000,
            batch_rays: 4096,
            lambda_mrf: 0.3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            mrf_crop: 32,
            mrf_every: 1,
            mrf_warmup: 0,
            mrf: MrfConfig::default(),
            sampling: RaySampleConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Validation("learning rate must be > 0".into()));
        }
        if !(self.lambda_mrf >= 0.0 && self.lambda_mrf.is_finite()) {
            return Err(Error::Validation("mrf weight must be >= 0".into()));
        }
        if self.batch_rays == 0 {
            return Err(Error::Validation("batch must hold at least one ray".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2))
            || !(self.epsilon > 0.0)
        {
            return Err(Error::Validation("invalid optimizer moments".into()));
        }
        self.sampling.validate()?;
        if self.uses_mrf() {
            self.mrf.validate()?;
        }
        Ok(())
    }

    fn uses_mrf(&self) -> bool {
        self.lambda_mrf > 0.0 && self.mrf_every > 0
    }
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Adam {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.learning_rate * (*m / c1) / ((*v / c2).sqrt() + self.epsilon);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub field: TriplaneField,
    /// Total loss per iteration.
    pub losses: Vec<f64>,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("loss became non-finite at iteration {iteration}")]
    NonFinite {
        iteration: usize,
        /// Parameters as they were before the failing update.
        snapshot: Box<TriplaneField>,
    },
    #[error(transparent)]
    Invalid(#[from] Error),
}

impl From<TrainError> for Error {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Invalid(e) => e,
            e @ TrainError::NonFinite { .. } => Error::Numeric(e.to_string()),
        }
    }
}

fn validate_data(data: &[TrainView]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Validation("training needs at least one view".into()));
    }
    for (i, v) in data.iter().enumerate() {
        v.camera.validate()?;
        if v.target.width != v.camera.width || v.target.height != v.camera.height {
            return Err(Error::Validation(format!(
                "view {i}: target is {}x{} but camera is {}x{}",
                v.target.width, v.target.height, v.camera.width, v.camera.height
            )));
        }
    }
    Ok(())
}

pub fn train(
    field: TriplaneField,
    data: &[TrainView],
    cfg: &TrainConfig,
) -> std::result::Result<Trained, TrainError> {
    train_with(field, data, cfg, |_, _| {})
}

/// Minimizes mean L1 over random rays plus `lambda_mrf` times the patch loss
/// on a rendered crop; `progress(iteration, loss)` runs after every step.
pub fn train_with(
    mut field: TriplaneField,
    data: &[TrainView],
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> std::result::Result<Trained, TrainError> {
    cfg.validate()?;
    validate_data(data)?;
    let crop = cfg.mrf_crop;
    if cfg.uses_mrf()
        && data
            .iter()
            .any(|v| v.target.width < crop || v.target.height < crop)
    {
        return Err(Error::Validation(format!("mrf crop {crop} exceeds a training image")).into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(
        field.params.len(),
        cfg.learning_rate,
        cfg.beta1,
        cfg.beta2,
        cfg.epsilon,
    );
    let mut losses = Vec::with_capacity(cfg.iterations);
    let per_iter = (cfg.batch_rays + crop * crop) as u64;
    let mut rays = Vec::with_capacity(cfg.batch_rays + crop * crop);
    let mut targets = Vec::with_capacity(cfg.batch_rays);

    for iter in 0..cfg.iterations {
        rays.clear();
        targets.clear();
        let stream0 = iter as u64 * per_iter;
        for b in 0..cfg.batch_rays {
            let v = &data[rng.gen_range(0..data.len())];
            let (px, py) = (
                rng.gen_range(0..v.camera.width),
                rng.gen_range(0..v.camera.height),
            );
            let (origin, direction) = v.camera.ray(px, py);
            rays.push(FieldRay {
                origin,
                direction,
                light: v.light,
                stream: stream0 + b as u64,
            });
            targets.push(v.target.get(px, py));
        }
        let with_mrf =
            cfg.uses_mrf() && iter >= cfg.mrf_warmup && (iter - cfg.mrf_warmup) % cfg.mrf_every == 0;
        let mut crop_target = None;
        if with_mrf {
            let v = &data[rng.gen_range(0..data.len())];
            let x0 = rng.gen_range(0..=v.camera.width - crop);
            let y0 = rng.gen_range(0..=v.camera.height - crop);
            let mut tgt = Vec::with_capacity(crop * crop * 3);
            for y in y0..y0 + crop {
                for x in x0..x0 + crop {
                    let (origin, direction) = v.camera.ray(x, y);
                    rays.push(FieldRay {
                        origin,
                        direction,
                        light: v.light,
                        stream: stream0 + (cfg.batch_rays + (y - y0) * crop + (x - x0)) as u64,
                    });
                    tgt.extend(v.target.get(x, y).iter().map(|&c| c as f64));
                }
            }
            crop_target = Some(Raster::new(crop, crop, tgt)?);
        }

        let traces = forward_batch(&field, &rays, &cfg.sampling);
        let n = (3 * cfg.batch_rays) as f64;
        let mut loss = 0.0;
        let mut grads: Vec<[f64; 3]> = Vec::with_capacity(rays.len());
        for (tr, t) in traces.iter().zip(&targets) {
            let mut g = [0.0; 3];
            for k in 0..3 {
                let d = tr.rgb[k] - t[k] as f64;
                loss += d.abs();
                g[k] = if d > 0.0 {
                    1.0 / n
                } else if d < 0.0 {
                    -1.0 / n
                } else {
                    0.0
                };
            }
            grads.push(g);
        }
        loss /= n;
        if let Some(y) = crop_target {
            let x = Raster::new(
                crop,
                crop,
                traces[cfg.batch_rays..]
                    .iter()
                    .flat_map(|t| t.rgb)
                    .collect(),
            )?;
            let (l, g) = idmrf_grad(&x, &y, &cfg.mrf)?;
            loss += cfg.lambda_mrf * l;
            grads.extend(g.chunks_exact(3).map(|c| {
                [
                    cfg.lambda_mrf * c[0],
                    cfg.lambda_mrf * c[1],
                    cfg.lambda_mrf * c[2],
                ]
            }));
        }
        if !loss.is_finite() {
            return Err(TrainError::NonFinite {
                iteration: iter,
                snapshot: Box::new(field),
            });
        }
        let grad = backward(&field, &traces, &grads)?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFinite {
                iteration: iter,
                snapshot: Box::new(field),
            });
        }
        adam.update(&mut field.params, &grad);
        losses.push(loss);
        progress(iter, loss);
    }
    Ok(Trained { field, losses })
}
