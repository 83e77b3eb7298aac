//! Global and local WGAN-GP critics.

use longscape_tensor::{per_sample_grad_norm, Conv2dGeom, Element, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{conv, LEAKY_SLOPE};
use crate::params::{mix_seed, Bound, ParamSpec, SpecBuilder};

#[derive(Debug, Clone, PartialEq)]
pub struct CriticConfig {
    /// `(height, width)` of the scored image.
    pub input: (usize, usize),
    pub channels: Vec<usize>,
}

impl CriticConfig {
    /// Critic over the whole generated image.
    pub fn global(side: usize, channels: &[usize]) -> Self {
        CriticConfig {
            input: (side, 2 * side),
            channels: channels.to_vec(),
        }
    }

    /// Critic over the predicted half only.
    pub fn local(side: usize, channels: &[usize]) -> Self {
        CriticConfig {
            input: (side, side),
            channels: channels.to_vec(),
        }
    }

    /// Number of strided layers: as many as the channel schedule allows while
    /// the smaller spatial side stays at least 2.
    pub fn depth(&self) -> usize {
        let mut side = self.input.0.min(self.input.1);
        let mut n = 0;
        while n < self.channels.len() && side / 2 >= 2 {
            side /= 2;
            n += 1;
        }
        n
    }

    pub fn final_hw(&self) -> (usize, usize) {
        let d = self.depth();
        (self.input.0 >> d, self.input.1 >> d)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input;
        let d = self.depth();
        if d == 0 || h % (1 << d) != 0 || w % (1 << d) != 0 {
            return Err(Error::Config(format!(
                "critic input {h}x{w} cannot be halved to a 2x2 grid by the channel schedule {:?}",
                self.channels
            )));
        }
        Ok(())
    }
}

/// Strided 4x4 convolutions with leaky ReLU and no normalisation, then a
/// linear head producing one score per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Critic {
    pub prefix: String,
    pub config: CriticConfig,
}

impl Critic {
    pub fn new(prefix: impl Into<String>, config: CriticConfig) -> Result<Self> {
        config.validate()?;
        Ok(Critic {
            prefix: prefix.into(),
            config,
        })
    }

    fn features(&self) -> usize {
        let (h, w) = self.config.final_hw();
        self.config.channels[self.config.depth() - 1] * h * w
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut b = SpecBuilder::new();
        let mut cin = 3;
        for (i, &c) in self.config.channels[..self.config.depth()].iter().enumerate() {
            b.conv(&format!("{}.conv{i}", self.prefix), c, cin, (4, 4));
            cin = c;
        }
        b.linear(&format!("{}.head", self.prefix), self.features(), 1);
        b.into_specs()
    }

    pub fn forward<T: Element>(&self, x: &Var<T>, p: &Bound<T>) -> std::result::Result<Var<T>, TensorError> {
        let (h, w) = self.config.input;
        let s = x.shape();
        if s.len() != 4 || s[1..] != [3, h, w] {
            return Err(TensorError::shape(
                "critic",
                format!("`{}` scores B x 3 x {h} x {w} images, got {s:?}", self.prefix),
            ));
        }
        let mut y = x.clone();
        for i in 0..self.config.depth() {
            y = conv(&y, p, &format!("{}.conv{i}", self.prefix), Conv2dGeom::strided(2, 1))?.leaky_relu(LEAKY_SLOPE)?;
        }
        let batch = s[0];
        let flat = y.reshape(&[batch, self.features()])?;
        let wt = p.get(&format!("{}.head.weight", self.prefix))?;
        let bias = p.get(&format!("{}.head.bias", self.prefix))?;
        flat.matmul(wt, false, false)?
            .add(&bias.reshape(&[1, 1])?.broadcast_to(&[batch, 1])?)
    }
}

/// A critic together with its parameters on a tape.
#[derive(Clone, Copy)]
pub struct BoundCritic<'a, T: Element> {
    pub net: &'a Critic,
    pub params: &'a Bound<T>,
}

impl<'a, T: Element> BoundCritic<'a, T> {
    pub fn new(net: &'a Critic, params: &'a Bound<T>) -> Self {
        BoundCritic { net, params }
    }

    pub fn score(&self, x: &Var<T>) -> std::result::Result<Var<T>, TensorError> {
        self.net.forward(x, self.params)
    }
}

/// Interpolation coefficients, one uniform draw on `[0, 1]` per sample.
pub fn draw_u(batch: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..batch).map(|_| rng.random_range(0.0..=1.0)).collect()
}

/// `u * real + (1 - u) * fake` per sample.
pub fn interpolate<T: Element>(real: &Tensor<T>, fake: &Tensor<T>, u: &[f64]) -> Result<Tensor<T>> {
    if real.shape() != fake.shape() {
        return Err(TensorError::shape(
            "gradient_penalty",
            format!("real {:?} and fake {:?} differ", real.shape(), fake.shape()),
        )
        .into());
    }
    let batch = real.dim(0)?;
    if u.len() != batch {
        return Err(TensorError::shape("gradient_penalty", format!("{} coefficients for batch {batch}", u.len())).into());
    }
    let per = real.len() / batch;
    let mut out = real.clone();
    for (n, &un) in u.iter().enumerate() {
        let a = T::from_f64_lossy(un);
        let b = T::from_f64_lossy(1.0 - un);
        let range = n * per..(n + 1) * per;
        for ((o, &r), &f) in out.data_mut()[range.clone()]
            .iter_mut()
            .zip(&real.data()[range.clone()])
            .zip(&fake.data()[range])
        {
            *o = a * r + b * f;
        }
    }
    Ok(out)
}

/// `lambda * mean((|grad critic(x_hat)| - 1)^2)` at the given coefficients,
/// differentiable with respect to the critic parameters.
pub fn gradient_penalty_with<T, F>(
    tape: &Tape<T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    critic: F,
    lambda: f64,
    u: &[f64],
) -> Result<Var<T>>
where
    T: Element,
    F: FnOnce(&Var<T>) -> std::result::Result<Var<T>, TensorError>,
{
    let x_hat = interpolate(real, fake, u)?;
    let norms = per_sample_grad_norm(tape, x_hat, critic)?;
    Ok(norms.add_scalar(-1.0)?.square()?.mean()?.scale(lambda)?)
}

pub fn gradient_penalty<T, F>(
    tape: &Tape<T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    critic: F,
    lambda: f64,
    seed: u64,
) -> Result<Var<T>>
where
    T: Element,
    F: FnOnce(&Var<T>) -> std::result::Result<Var<T>, TensorError>,
{
    let u = draw_u(real.dim(0)?, seed);
    gradient_penalty_with(tape, real, fake, critic, lambda, &u)
}

/// The three terms of one critic's loss.
#[derive(Debug, Clone)]
pub struct CriticTerms<T: Element> {
    pub mean_real: Var<T>,
    pub mean_fake: Var<T>,
    pub penalty: Var<T>,
}

impl<T: Element> CriticTerms<T> {
    /// `mean D(fake) - mean D(real) + penalty`.
    pub fn total(&self) -> std::result::Result<Var<T>, TensorError> {
        self.mean_fake.sub(&self.mean_real)?.add(&self.penalty)
    }
}

pub fn critic_terms<T: Element>(
    tape: &Tape<T>,
    critic: BoundCritic<'_, T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    lambda_gp: f64,
    seed: u64,
) -> Result<CriticTerms<T>> {
    let mean_real = critic.score(&tape.constant(real.clone()))?.mean()?;
    let mean_fake = critic.score(&tape.constant(fake.clone()))?.mean()?;
    let penalty = gradient_penalty(tape, real, fake, |x| critic.score(x), lambda_gp, seed)?;
    Ok(CriticTerms {
        mean_real,
        mean_fake,
        penalty,
    })
}

#[derive(Debug, Clone)]
pub struct CriticLosses<T: Element> {
    pub total: Var<T>,
    pub global: CriticTerms<T>,
    pub local: CriticTerms<T>,
}

/// Mixed critic objective `beta * L_global + (1 - beta) * L_local`.
/// Interpolation draws for the two critics come from independent streams of `seed`.
#[allow(clippy::too_many_arguments)]
pub fn critic_losses<T: Element>(
    tape: &Tape<T>,
    global: BoundCritic<'_, T>,
    local: BoundCritic<'_, T>,
    real_full: &Tensor<T>,
    fake_full: &Tensor<T>,
    real_right: &Tensor<T>,
    fake_right: &Tensor<T>,
    beta: f64,
    lambda_gp: f64,
    seed: u64,
) -> Result<CriticLosses<T>> {
    let g = critic_terms(tape, global, real_full, fake_full, lambda_gp, mix_seed(seed, 1))?;
    let l = critic_terms(tape, local, real_right, fake_right, lambda_gp, mix_seed(seed, 2))?;
    let total = g.total()?.scale(beta)?.add(&l.total()?.scale(1.0 - beta)?)?;
    Ok(CriticLosses {
        total,
        global: g,
        local: l,
    })
}

/// `beta * (-mean D_global(fake_full)) + (1 - beta) * (-mean D_local(fake_right))`.
pub fn generator_adv_loss<T: Element>(
    global: BoundCritic<'_, T>,
    local: BoundCritic<'_, T>,
    fake_full: &Var<T>,
    fake_right: &Var<T>,
    beta: f64,
) -> Result<Var<T>> {
    let g = global.score(fake_full)?.mean()?.scale(-beta)?;
    let l = local.score(fake_right)?.mean()?.scale(-(1.0 - beta))?;
    Ok(g.add(&l)?)
}
