//! Alternating generator/critic training.

use longscape_tensor::{kernels::slice_axis, Element, Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::critic::{critic_losses, BoundCritic, Critic, CriticConfig};
use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::loss::{cosine_mask, generator_objective, CosineMask, LossWeights};
use crate::optim::{adam_step, lr_at, n_cir, TrainSchedule};
use crate::params::{init_params, mix_seed, ParamStore};

/// The generator and both critics.
pub struct Models {
    pub generator: Generator,
    pub global: Critic,
    pub local: Critic,
}

impl Models {
    /// Critics share the generator's channel schedule.
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        let n = config.input;
        let ch = config.channels;
        Ok(Models {
            global: Critic::new("global", CriticConfig::global(n, &ch))?,
            local: Critic::new("local", CriticConfig::local(n, &ch))?,
            generator: Generator::new(config)?,
        })
    }

    pub fn input(&self) -> usize {
        self.generator.config.input
    }
}

/// Everything that changes during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub gen: ParamStore<T>,
    pub global: ParamStore<T>,
    pub local: ParamStore<T>,
    /// Generator iterations completed.
    pub step: u64,
    pub epoch: u64,
}

impl<T: Element> TrainState<T> {
    pub fn init(models: &Models, seed: u64) -> Result<Self> {
        Ok(TrainState {
            gen: init_params(&models.generator.param_specs(), mix_seed(seed, 11))?,
            global: init_params(&models.global.param_specs(), mix_seed(seed, 12))?,
            local: init_params(&models.local.param_specs(), mix_seed(seed, 13))?,
            step: 0,
            epoch: 0,
        })
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub l_rec: f64,
    /// Adversarial part of the generator loss; absent during warmup.
    pub l_adv_g: Option<f64>,
    /// Mixed critic loss of the last critic update; absent during warmup.
    pub l_d: Option<f64>,
    pub n_cir: u32,
    pub gen_grad_norm: f64,
}

impl StepMetrics {
    pub fn all_finite(&self) -> bool {
        [Some(self.l_rec), self.l_adv_g, self.l_d, Some(self.gen_grad_norm)]
            .into_iter()
            .flatten()
            .all(f64::is_finite)
    }
}

pub struct Trainer {
    pub models: Models,
    pub schedule: TrainSchedule,
    pub weights: LossWeights,
    pub seed: u64,
    mask: CosineMask,
}

fn scalar<T: Element>(t: &Tensor<T>) -> f64 {
    t.item().to_f64().unwrap_or(f64::NAN)
}

impl Trainer {
    pub fn new(models: Models, schedule: TrainSchedule, weights: LossWeights, seed: u64) -> Result<Self> {
        schedule.validate()?;
        weights.validate()?;
        let n = models.input();
        let mask = cosine_mask(n, models.generator.config.output_width())?;
        Ok(Trainer {
            models,
            schedule,
            weights,
            seed,
            mask,
        })
    }

    /// Hash of the architecture and schedule a checkpoint must agree with.
    pub fn fingerprint(&self) -> u64 {
        crate::checkpoint::fingerprint(&[
            &self.models.generator.config,
            &self.models.global.config,
            &self.models.local.config,
            &self.schedule,
        ])
    }

    pub fn mask(&self) -> &CosineMask {
        &self.mask
    }

    /// Whether generator iteration `it` (1-based) is a warmup iteration.
    pub fn in_warmup(&self, it: u64) -> bool {
        it <= self.schedule.warmup_iters
    }

    /// One generator iteration, preceded by `n_cir` critic updates once the
    /// warmup is over. Randomness depends only on the seed and the iteration,
    /// so a resumed run repeats an uninterrupted one exactly.
    pub fn train_step<T: Element>(&self, state: &mut TrainState<T>, batch: &ImageBatch) -> Result<StepMetrics> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let n = self.models.input();
        let width = self.models.generator.config.output_width();
        let real: Tensor<T> = batch.pixels.cast();
        if real.shape()[1..] != [3, n, width] {
            return Err(Error::Config(format!(
                "batch images must be 3 x {n} x {width}, got {:?}",
                &real.shape()[1..]
            )));
        }
        let input = slice_axis(&real, 3, 0, n)?;
        let it = state.step + 1;
        let lr = lr_at(state.epoch, &self.schedule);
        let warm = self.in_warmup(it);

        let mut cir = 0;
        let mut l_d = None;
        if !warm {
            let adv_it = it - self.schedule.warmup_iters;
            cir = n_cir(adv_it, &self.schedule);
            let fake = self.models.generator.predict(&input, &state.gen)?;
            let real_right = slice_axis(&real, 3, width - n, n)?;
            let fake_right = slice_axis(&fake, 3, width - n, n)?;
            for k in 0..cir {
                let tape = Tape::new();
                let pg = state.global.bind(&tape, true);
                let pl = state.local.bind(&tape, true);
                let losses = critic_losses(
                    &tape,
                    BoundCritic::new(&self.models.global, &pg),
                    BoundCritic::new(&self.models.local, &pl),
                    &real,
                    &fake,
                    &real_right,
                    &fake_right,
                    self.weights.beta,
                    self.weights.lambda_gp,
                    mix_seed(mix_seed(self.seed, it), k as u64),
                )?;
                let mut grads = tape.backward(&losses.total)?;
                adam_step(&mut state.global, &mut grads, lr, &self.schedule)?;
                adam_step(&mut state.local, &mut grads, lr, &self.schedule)?;
                l_d = Some(scalar(losses.total.value()));
            }
        }

        let tape = Tape::new();
        let pgen = state.gen.bind(&tape, true);
        let pg = state.global.bind(&tape, false);
        let pl = state.local.bind(&tape, false);
        let output = self.models.generator.forward(&tape.constant(input), &pgen)?;
        let weights = if warm { self.weights.warmup() } else { self.weights };
        let critics = (
            BoundCritic::new(&self.models.global, &pg),
            BoundCritic::new(&self.models.local, &pl),
        );
        let obj = generator_objective(&output, &tape.constant(real), &self.mask, Some(critics), &weights)?;
        let mut grads = tape.backward(&obj.total)?;
        let gen_grad_norm = grads.global_norm();
        adam_step(&mut state.gen, &mut grads, lr, &self.schedule)?;
        state.step = it;

        Ok(StepMetrics {
            step: it,
            epoch: state.epoch,
            lr,
            l_rec: scalar(obj.rec.value()),
            l_adv_g: obj.adv.as_ref().map(|a| scalar(a.value())),
            l_d,
            n_cir: cir,
            gen_grad_norm,
        })
    }
}
