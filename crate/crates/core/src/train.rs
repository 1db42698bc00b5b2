//! Unsupervised training: unroll the network for `T` steps, evaluate the
//! sequence objective on the warped moving images and update the weights
//! with Adam/AMSGrad.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::data::{generate_case, Series};
use crate::deform::LocalDeformParams;
use crate::error::{Error, Result};
use crate::geometry::{DisplacementField, Image2D};
use crate::net::{
    register, unroll_on_tape, Checkpoint, NoiseContext, R2N2Net, StochasticRegularization,
};
use crate::objectives::sequence_objective_on_tape;
use crate::optim::{clip_global_norm, Adam, AdamConfig};

pub use crate::net::apply_multiplicative_noise;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub amsgrad: bool,
    /// Sequence length `T`.
    pub steps: usize,
    pub lambda: f64,
    pub noise_mean: f64,
    pub noise_std: f64,
    pub dropconnect_rate: f64,
    pub iterations: u64,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            amsgrad: true,
            steps: 25,
            lambda: 0.1,
            noise_mean: 1.0,
            noise_std: 0.5f64.sqrt() / 0.5,
            dropconnect_rate: 0.1,
            iterations: 2000,
            batch_size: 1,
            grad_clip: 1.0,
            seed: 0,
            checkpoint_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.steps == 0 {
            return bad("steps must be >= 1".into());
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(0.0..1.0).contains(&self.dropconnect_rate) {
            return bad(format!("dropconnect_rate must be in [0, 1), got {}", self.dropconnect_rate));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std must be finite and >= 0, got {}", self.noise_std));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.grad_clip > 0.0) {
            return bad(format!("grad_clip must be > 0, got {}", self.grad_clip));
        }
        Ok(())
    }

    pub fn regularization(&self) -> StochasticRegularization {
        StochasticRegularization {
            noise_mean: self.noise_mean,
            noise_std: self.noise_std,
            dropconnect_rate: self.dropconnect_rate,
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig::new(self.learning_rate, self.amsgrad)
    }
}

/// Produces `(fixed, moving)` training pairs.
pub trait PairSource {
    fn sample(&mut self, rng: &mut ChaCha8Rng) -> Result<(Image2D, Image2D)>;
}

/// Fresh synthetic cases drawn per sample.
#[derive(Clone, Debug)]
pub struct SyntheticPairs {
    pub resolution: usize,
    pub deform_scale: f64,
    pub n_blobs: usize,
}

impl PairSource for SyntheticPairs {
    fn sample(&mut self, rng: &mut ChaCha8Rng) -> Result<(Image2D, Image2D)> {
        let c = generate_case(self.resolution, self.deform_scale, self.n_blobs, rng.random())?;
        Ok((c.fixed, c.moving))
    }
}

/// Uniformly random `(reference, other)` pairs of an image series.
pub struct SeriesPairs {
    series: Series,
    pairs: Vec<(usize, usize)>,
}

impl SeriesPairs {
    pub fn new(series: Series) -> Result<Self> {
        let pairs = series.pairs();
        if pairs.is_empty() {
            return Err(Error::Validation("series has no pairs to train on".into()));
        }
        Ok(Self { series, pairs })
    }
}

impl PairSource for SeriesPairs {
    fn sample(&mut self, rng: &mut ChaCha8Rng) -> Result<(Image2D, Image2D)> {
        let (f, m) = self.pairs[rng.random_range(0..self.pairs.len())];
        Ok((self.series.images[f].clone(), self.series.images[m].clone()))
    }
}

/// A fixed list of pairs cycled in order.
pub struct FixedPairs {
    pairs: Vec<(Image2D, Image2D)>,
    next: usize,
}

impl FixedPairs {
    pub fn new(pairs: Vec<(Image2D, Image2D)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Validation("empty dataset".into()));
        }
        Ok(Self { pairs, next: 0 })
    }
}

impl PairSource for FixedPairs {
    fn sample(&mut self, _rng: &mut ChaCha8Rng) -> Result<(Image2D, Image2D)> {
        let p = self.pairs[self.next % self.pairs.len()].clone();
        self.next += 1;
        Ok(p)
    }
}

/// One line of the metric stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: u64,
    pub loss: f64,
    pub image_loss: f64,
    pub tv_loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub seconds: f64,
}

/// Loss and gradients of one pair, without touching the weights.
#[derive(Clone, Debug)]
pub struct LossAndGradients {
    pub loss: f64,
    pub image_loss: f64,
    pub tv_loss: f64,
    pub grads: Vec<Tensor>,
}

/// Evaluates the sequence objective of an unroll and its gradient with
/// respect to every network array.
pub fn loss_and_gradients(
    net: &R2N2Net,
    fixed: &Image2D,
    moving: &Image2D,
    steps: usize,
    lambda: f64,
    noise: Option<&mut NoiseContext>,
) -> Result<LossAndGradients> {
    let r = net.config().input_resolution;
    for (img, what) in [(fixed, "fixed"), (moving, "moving")] {
        if img.grid().height() != r || img.grid().width() != r {
            return Err(Error::Shape(format!("{what} image must be {r}x{r}")));
        }
    }
    let mut tape = Tape::new();
    let mut noise = noise;
    let bound = net.bind(&mut tape, true, noise.as_deref_mut());
    let fv = tape.constant(fixed.to_tensor());
    let mv = tape.constant(moving.to_tensor());
    let unrolled = unroll_on_tape(&mut tape, &bound, fv, mv, steps, noise);
    let last = *unrolled.fields.last().expect("steps >= 1");
    let terms = sequence_objective_on_tape(&mut tape, fv, &unrolled.warped, last, lambda);
    let loss = tape.value(terms.total).item();
    let image_loss = tape.value(terms.image).item();
    let tv_loss = tape.value(terms.regularizer).item();
    let mut grads = tape.backward(terms.total);
    let grads = bound
        .leaves
        .iter()
        .zip(net.params().tensors())
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok(LossAndGradients {
        loss,
        image_loss,
        tv_loss,
        grads,
    })
}

/// Cumulative fields and emitted parameters of a `T`-step inference unroll.
pub fn unroll(
    net: &R2N2Net,
    fixed: &Image2D,
    moving: &Image2D,
    steps: usize,
) -> Result<(Vec<DisplacementField>, Vec<LocalDeformParams>)> {
    let reg = register(net, fixed, moving, steps)?;
    Ok((reg.fields, reg.params))
}

/// Training state: network, optimizer and iteration counter.
pub struct Trainer {
    net: R2N2Net,
    optimizer: Adam,
    config: TrainConfig,
    iteration: u64,
}

/// Metadata key holding the optimizer step count in checkpoints.
const META_ADAM_STEP: &str = "adam_step";

impl Trainer {
    pub fn new(net: R2N2Net, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = Adam::for_params(config.adam(), net.params().tensors());
        Ok(Self {
            net,
            optimizer,
            config,
            iteration: 0,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(checkpoint: Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let step = checkpoint
            .metadata
            .get(META_ADAM_STEP)
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Validation("checkpoint has no optimizer state".into()))?;
        let optimizer = Adam::import(
            config.adam(),
            checkpoint.net.params().names(),
            checkpoint.net.params().tensors(),
            step,
            &checkpoint.auxiliary,
        )?;
        Ok(Self {
            net: checkpoint.net,
            optimizer,
            config,
            iteration: checkpoint.iteration,
        })
    }

    pub fn net(&self) -> &R2N2Net {
        &self.net
    }

    pub fn into_net(self) -> R2N2Net {
        self.net
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let (step, auxiliary) = self.optimizer.export(self.net.params().names());
        Checkpoint {
            net: self.net.clone(),
            iteration: self.iteration,
            auxiliary,
            metadata: serde_json::json!({ META_ADAM_STEP: step, "seed": self.config.seed }),
        }
    }

    /// Randomness of iteration `k` depends only on the seed and `k`, so a
    /// resumed run draws the same pairs and noise as an uninterrupted one.
    fn iteration_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.iteration);
        rng
    }

    /// One optimizer update on `batch_size` pairs from `source`.
    pub fn train_iteration(&mut self, source: &mut dyn PairSource) -> Result<IterationMetrics> {
        let start = Instant::now();
        let mut rng = self.iteration_rng();
        let settings = self.config.regularization();
        let batch = self.config.batch_size;
        let mut sum: Option<LossAndGradients> = None;
        for _ in 0..batch {
            let (fixed, moving) = source.sample(&mut rng)?;
            let mut noise_rng = ChaCha8Rng::seed_from_u64(rng.random());
            let mut ctx = NoiseContext {
                settings,
                rng: &mut noise_rng,
            };
            let noise = settings.is_active().then_some(&mut ctx);
            let r = loss_and_gradients(&self.net, &fixed, &moving, self.config.steps, self.config.lambda, noise)?;
            sum = Some(match sum {
                None => r,
                Some(mut acc) => {
                    acc.loss += r.loss;
                    acc.image_loss += r.image_loss;
                    acc.tv_loss += r.tv_loss;
                    for (a, g) in acc.grads.iter_mut().zip(&r.grads) {
                        a.add_assign(g);
                    }
                    acc
                }
            });
        }
        let mut r = sum.expect("batch >= 1");
        if batch > 1 {
            let k = 1.0 / batch as f64;
            r.loss *= k;
            r.image_loss *= k;
            r.tv_loss *= k;
            for g in &mut r.grads {
                *g = g.map(|x| x * k);
            }
        }
        let grad_norm = clip_global_norm(&mut r.grads, self.config.grad_clip);
        if !r.loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!(
                "iteration {}: loss {:e} (image {:e}, tv {:e}), gradient norm {:e}",
                self.iteration + 1,
                r.loss,
                r.image_loss,
                r.tv_loss,
                grad_norm
            )));
        }
        self.optimizer.step(self.net.params_mut().tensors_mut(), &r.grads);
        self.iteration += 1;
        Ok(IterationMetrics {
            iteration: self.iteration,
            loss: r.loss,
            image_loss: r.image_loss,
            tv_loss: r.tv_loss,
            grad_norm,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Trains until `config.iterations` is reached, reporting every
    /// iteration to `on_iteration`.
    pub fn run(
        &mut self,
        source: &mut dyn PairSource,
        mut on_iteration: impl FnMut(&Trainer, &IterationMetrics) -> Result<()>,
    ) -> Result<Vec<IterationMetrics>> {
        let mut out = Vec::new();
        while self.iteration < self.config.iterations {
            let m = self.train_iteration(source)?;
            on_iteration(self, &m)?;
            out.push(m);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deform::render_sequence;
    use crate::geometry::make_grid;
    use crate::net::NetConfig;

    fn quiet(config: &mut TrainConfig) {
        config.noise_std = 0.0;
        config.dropconnect_rate = 0.0;
    }

    #[test]
    fn defaults_mirror_reference_settings() {
        let c = TrainConfig::default();
        assert_eq!(c.learning_rate, 1e-4);
        assert_eq!(c.steps, 25);
        assert_eq!(c.lambda, 0.1);
        assert!(c.amsgrad);
        assert!((c.noise_std - 2f64.sqrt()).abs() < 1e-12);
        c.validate().unwrap();
        let mut bad = c.clone();
        bad.dropconnect_rate = 1.0;
        assert!(bad.validate().is_err());
        let mut bad = c;
        bad.steps = 0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_network_unroll_is_zero() {
        let net = R2N2Net::zeros(NetConfig::toy(16, 32)).unwrap();
        let g = make_grid(16, 16).unwrap();
        let f = Image2D::from_fn(g.clone(), |x, y| 0.5 + 0.3 * x * y);
        let (fields, params) = unroll(&net, &f, &f, 3).unwrap();
        assert_eq!(fields.len(), 3);
        assert!(fields.iter().all(|f| f.max_magnitude() == 0.0));
        assert!(params.iter().all(|p| p.weight == (0.0, 0.0)));
    }

    #[test]
    fn unroll_fields_are_cumulative() {
        let net = R2N2Net::new(NetConfig::toy(16, 32), 2).unwrap();
        let c = generate_case(16, 0.08, 4, 1).unwrap();
        let (fields, params) = unroll(&net, &c.fixed, &c.moving, 3).unwrap();
        let one = render_sequence(&params[..1], c.fixed.grid()).unwrap();
        assert_eq!(fields[0], one);
        for k in 1..3 {
            let local = render_sequence(&params[k..=k], c.fixed.grid()).unwrap();
            let sum = crate::geometry::accumulate(&fields[k - 1], &local).unwrap();
            let d = sum.to_tensor().zip_map(&fields[k].to_tensor(), |a, b| a - b).max_abs();
            assert!(d < 1e-12);
        }
    }

    #[test]
    fn tape_loss_matches_value_objective() {
        let net = R2N2Net::new(NetConfig::toy(16, 32), 4).unwrap();
        let c = generate_case(16, 0.08, 4, 2).unwrap();
        let r = loss_and_gradients(&net, &c.fixed, &c.moving, 3, 0.1, None).unwrap();
        let (fields, _) = unroll(&net, &c.fixed, &c.moving, 3).unwrap();
        let v = crate::objectives::sequence_objective(&c.fixed, &c.moving, &fields, 0.1).unwrap();
        assert!((r.loss - v).abs() < 1e-12, "{} {v}", r.loss);
        assert_eq!(r.grads.len(), net.params().len());
        assert!(r.grads.iter().all(Tensor::all_finite));
    }

    #[test]
    fn aligned_pairs_stay_near_zero_loss() {
        let mut cfg = TrainConfig {
            steps: 2,
            lambda: 0.0,
            iterations: 5,
            ..TrainConfig::default()
        };
        quiet(&mut cfg);
        let c = generate_case(16, 0.0, 4, 3).unwrap();
        let mut src = FixedPairs::new(vec![(c.fixed.clone(), c.moving.clone())]).unwrap();
        let mut t = Trainer::new(R2N2Net::new(NetConfig::toy(16, 32), 1).unwrap(), cfg).unwrap();
        let m = t.run(&mut src, |_, _| Ok(())).unwrap();
        assert_eq!(m.len(), 5);
        assert!(m[0].loss < 1e-6);
        assert!(m.iter().all(|x| x.loss <= m[0].loss + 1e-6));
    }

    #[test]
    fn quiet_training_is_bitwise_reproducible_and_resumable() {
        let mut cfg = TrainConfig {
            steps: 2,
            iterations: 4,
            learning_rate: 1e-3,
            seed: 9,
            ..TrainConfig::default()
        };
        quiet(&mut cfg);
        let net = R2N2Net::new(NetConfig::toy(16, 32), 1).unwrap();
        let src = || SyntheticPairs {
            resolution: 16,
            deform_scale: 0.08,
            n_blobs: 4,
        };
        let run = || {
            let mut t = Trainer::new(net.clone(), cfg.clone()).unwrap();
            t.run(&mut src(), |_, _| Ok(())).unwrap()
        };
        let a: Vec<u64> = run().iter().map(|m| m.loss.to_bits()).collect();
        let b: Vec<u64> = run().iter().map(|m| m.loss.to_bits()).collect();
        assert_eq!(a, b);

        let mut half = cfg.clone();
        half.iterations = 2;
        let mut t = Trainer::new(net.clone(), half).unwrap();
        t.run(&mut src(), |_, _| Ok(())).unwrap();
        let ck = t.checkpoint();
        let mut resumed = Trainer::resume(ck, cfg.clone()).unwrap();
        assert_eq!(resumed.iteration(), 2);
        let rest: Vec<u64> = resumed.run(&mut src(), |_, _| Ok(())).unwrap().iter().map(|m| m.loss.to_bits()).collect();
        assert_eq!(rest, a[2..]);
    }

    #[test]
    fn noisy_training_stays_finite() {
        let cfg = TrainConfig {
            steps: 2,
            iterations: 3,
            seed: 1,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(R2N2Net::new(NetConfig::toy(16, 32), 1).unwrap(), cfg).unwrap();
        let mut src = SyntheticPairs {
            resolution: 16,
            deform_scale: 0.08,
            n_blobs: 4,
        };
        let m = t.run(&mut src, |_, _| Ok(())).unwrap();
        assert!(m.iter().all(|x| x.loss.is_finite() && x.grad_norm.is_finite()));
    }

    #[test]
    fn wrong_resolution_is_rejected() {
        let net = R2N2Net::zeros(NetConfig::toy(16, 32)).unwrap();
        let c = generate_case(32, 0.0, 4, 0).unwrap();
        assert!(matches!(
            loss_and_gradients(&net, &c.fixed, &c.moving, 1, 0.1, None),
            Err(Error::Shape(_))
        ));
    }
}
