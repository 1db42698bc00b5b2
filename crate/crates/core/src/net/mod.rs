//! The recurrent registration network: a three-level encoder of GR2U blocks,
//! per-level position networks and a parameter network emitting one
//! Gaussian local deformation per step.

mod checkpoint;
pub mod layers;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use layers::{
    assemble_input, conv_gru_step, fuse_positions, gr2u_block, position_certainty, soft_position,
    squash_params, GruWeights, Gr2uWeights,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::deform::{gaussian_local_field_on_tape, LocalDeformParams};
use crate::error::{Error, Result};
use crate::geometry::{make_grid, warp_on_tape, DisplacementField, Grid2D, Image2D};
use layers::{
    conv, fuse_positions_on_tape, parameter_network_on_tape,
    position_network_on_tape, squash_params_on_tape, ConvVars, Gr2uVars, GruVars, ParamNetVars,
    PositionVars, ResidualVars,
};

pub const RESIDUAL_BLOCKS: usize = 3;
/// `(kernel, stride)` of the stem, the two downsampling stages and the head.
pub const STAGE_SCHEDULE: [(usize, usize); 4] = [(7, 2), (3, 2), (3, 2), (1, 1)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub input_resolution: usize,
    pub level_channels: [usize; 3],
    pub head_channels: usize,
    pub sigma_max: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            input_resolution: 256,
            level_channels: [64, 128, 256],
            head_channels: 512,
            sigma_max: 0.3,
        }
    }
}

impl NetConfig {
    /// Desk-scale variant: default channel counts divided by `divisor`.
    pub fn toy(input_resolution: usize, divisor: usize) -> Self {
        let d = NetConfig::default();
        let div = |c: usize| (c / divisor).max(2);
        Self {
            input_resolution,
            level_channels: d.level_channels.map(div),
            head_channels: div(d.head_channels),
            sigma_max: d.sigma_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_resolution < 8 || self.input_resolution % 8 != 0 {
            return Err(Error::Validation(format!(
                "input_resolution must be a positive multiple of 8, got {}",
                self.input_resolution
            )));
        }
        if !(self.sigma_max > 0.0) {
            return Err(Error::Validation(format!("sigma_max must be > 0, got {}", self.sigma_max)));
        }
        if self.level_channels.contains(&0) || self.head_channels < 2 {
            return Err(Error::Validation("channel counts must be positive (head >= 2)".into()));
        }
        Ok(())
    }

    /// Side length of the feature maps of encoder level `n` (0-based).
    pub fn level_resolution(&self, n: usize) -> usize {
        self.input_resolution >> (n + 1)
    }

    pub fn input_grid(&self) -> Result<Grid2D> {
        make_grid(self.input_resolution, self.input_resolution)
    }

    /// Shapes of all trainable arrays, in storage order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut conv = |name: &str, o: usize, i: usize, k: usize| {
            out.push((format!("{name}.weight"), vec![o, i, k, k]));
            out.push((format!("{name}.bias"), vec![o]));
        };
        let [c1, c2, c3] = self.level_channels;
        let head = self.head_channels;
        let half = head / 2;
        conv("stem", c1, 4, 7);
        for (n, &c) in self.level_channels.iter().enumerate() {
            let l = format!("level{}", n + 1);
            if n == 1 {
                conv("down2", c2, c1, 3);
            } else if n == 2 {
                conv("down3", c3, c2, 3);
            }
            for b in 0..RESIDUAL_BLOCKS {
                conv(&format!("{l}.res{b}.conv1"), c, c, 3);
                conv(&format!("{l}.res{b}.conv2"), c, c, 3);
            }
            conv(&format!("{l}.gru.gates"), 2 * c, 2 * c, 3);
            conv(&format!("{l}.gru.proposal"), c, 2 * c, 3);
            conv(&format!("{l}.pos.left"), 1, c, 1);
            conv(&format!("{l}.pos.right"), 1, c, 1);
        }
        conv("head", head, c3, 1);
        conv("pnet.conv", head, head, 3);
        conv("pnet.conv2", half, half, 3);
        out.push(("pnet.fc1.weight".into(), vec![head, half]));
        out.push(("pnet.fc1.bias".into(), vec![head]));
        out.push(("pnet.fc2.weight".into(), vec![5, head]));
        out.push(("pnet.fc2.bias".into(), vec![5]));
        out
    }
}

/// Named trainable arrays in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new(entries: Vec<(String, Tensor)>) -> Self {
        let (names, tensors) = entries.into_iter().unzip();
        Self { names, tensors }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(move |i| &mut self.tensors[i])
    }

    /// Total scalar count.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }
}

/// Gain applied to the fan-in uniform init of the final layer so the first
/// steps emit near-zero displacements.
const OUTPUT_INIT_GAIN: f64 = 0.01;
/// Tanh gain of the fan-in uniform init.
const TANH_GAIN: f64 = 5.0 / 3.0;

fn init_params(config: &NetConfig, rng: &mut ChaCha8Rng) -> ParamStore {
    let entries = config
        .parameter_shapes()
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".bias") {
                vec![0.0; n]
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let gain = if name == "pnet.fc2.weight" {
                    OUTPUT_INIT_GAIN
                } else {
                    TANH_GAIN
                };
                let a = gain * (3.0 / fan_in as f64).sqrt();
                (0..n).map(|_| rng.random_range(-a..a)).collect()
            };
            (name, Tensor::new(&shape, data))
        })
        .collect();
    ParamStore::new(entries)
}

/// Multiplicative noise and dropconnect applied while training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StochasticRegularization {
    pub noise_mean: f64,
    pub noise_std: f64,
    pub dropconnect_rate: f64,
}

impl StochasticRegularization {
    pub fn disabled() -> Self {
        Self {
            noise_mean: 1.0,
            noise_std: 0.0,
            dropconnect_rate: 0.0,
        }
    }

    pub fn is_active(&self) -> bool {
        self.noise_std > 0.0 || self.dropconnect_rate > 0.0
    }
}

/// `values ⊙ ε` with `ε ~ N(mean, std)` drawn per element.
pub fn apply_multiplicative_noise(values: &Tensor, mean: f64, std: f64, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(mean, std).expect("noise std must be finite and >= 0");
    let data = values.data().iter().map(|&v| v * normal.sample(rng)).collect();
    Tensor::new(values.shape(), data)
}

fn noise_tensor(shape: &[usize], mean: f64, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    apply_multiplicative_noise(&Tensor::full(shape, 1.0), mean, std, rng)
}

fn dropconnect_mask(shape: &[usize], rate: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let keep = 1.0 / (1.0 - rate);
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect(),
    )
}

/// Per-unroll noise state; `None` in evaluation mode.
pub struct NoiseContext<'a> {
    pub settings: StochasticRegularization,
    pub rng: &'a mut ChaCha8Rng,
}

/// Network weights recorded on a tape, ready for one or more steps.
pub struct BoundNet {
    /// One node per stored array, in [`ParamStore`] order.
    pub leaves: Vec<Var>,
    stem: ConvVars,
    downs: [ConvVars; 2],
    levels: Vec<Gr2uVars>,
    positions: Vec<PositionVars>,
    head: ConvVars,
    pnet: ParamNetVars,
    level_coords: Vec<(Var, Var)>,
    input_coords: Var,
    sigma_max: f64,
    level_channels: [usize; 3],
    input_grid: Grid2D,
}

/// Recurrent state of a network unrolled on a tape.
#[derive(Clone, Copy, Debug)]
pub struct TapeState {
    pub hidden: [Var; 3],
    pub field: Var,
}

/// Outputs of one recorded step.
#[derive(Clone, Copy, Debug)]
pub struct TapeStep {
    /// `[x, y, σx, σy, α, vx, vy]`.
    pub params: Var,
    pub local_field: Var,
    pub state: TapeState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct R2N2Net {
    config: NetConfig,
    params: ParamStore,
}

impl R2N2Net {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = init_params(&config, &mut rng);
        Ok(Self { config, params })
    }

    /// Network with every weight and bias zero.
    pub fn zeros(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let entries = config
            .parameter_shapes()
            .into_iter()
            .map(|(n, s)| (n, Tensor::zeros(&s)))
            .collect();
        Ok(Self {
            config,
            params: ParamStore::new(entries),
        })
    }

    pub fn from_params(config: NetConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = config.parameter_shapes();
        if expected.len() != params.len() {
            return Err(Error::Validation(format!(
                "expected {} parameter arrays, found {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), (n, t)) in expected.iter().zip(params.entries()) {
            if name != n || shape.as_slice() != t.shape() {
                return Err(Error::Validation(format!(
                    "parameter {n} {:?} does not match {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Records the weights on `tape`, as trainable leaves or constants.
    /// Noise, when given, perturbs the C-GRU proposal weights and applies
    /// dropconnect to all C-GRU weights for this binding.
    pub fn bind(&self, tape: &mut Tape, trainable: bool, mut noise: Option<&mut NoiseContext>) -> BoundNet {
        let leaves: Vec<Var> = self
            .params
            .tensors()
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        let idx = |name: &str| -> usize {
            self.params
                .position(name)
                .unwrap_or_else(|| panic!("missing parameter {name}"))
        };
        let mut effective = leaves.clone();
        if let Some(ctx) = noise.as_mut() {
            for n in 1..=3 {
                for part in ["gates", "proposal"] {
                    let i = idx(&format!("level{n}.gru.{part}.weight"));
                    let shape = self.params.tensors()[i].shape().to_vec();
                    let s = ctx.settings;
                    let mut factor = None;
                    if part == "proposal" && s.noise_std > 0.0 {
                        factor = Some(noise_tensor(&shape, s.noise_mean, s.noise_std, ctx.rng));
                    }
                    if s.dropconnect_rate > 0.0 {
                        let mask = dropconnect_mask(&shape, s.dropconnect_rate, ctx.rng);
                        factor = Some(match factor {
                            Some(f) => f.zip_map(&mask, |a, b| a * b),
                            None => mask,
                        });
                    }
                    if let Some(f) = factor {
                        let fv = tape.constant(f);
                        effective[i] = tape.mul(leaves[i], fv);
                    }
                }
            }
        }
        let conv_vars = |name: &str, stride: usize, pad: usize| ConvVars {
            weight: effective[idx(&format!("{name}.weight"))],
            bias: effective[idx(&format!("{name}.bias"))],
            stride,
            pad,
        };
        let same = |name: &str| conv_vars(name, 1, 1);
        let levels = (1..=3)
            .map(|n| Gr2uVars {
                residual: (0..RESIDUAL_BLOCKS)
                    .map(|b| ResidualVars {
                        first: same(&format!("level{n}.res{b}.conv1")),
                        second: same(&format!("level{n}.res{b}.conv2")),
                    })
                    .collect(),
                gru: GruVars {
                    gates: same(&format!("level{n}.gru.gates")),
                    proposal: same(&format!("level{n}.gru.proposal")),
                },
            })
            .collect();
        let positions = (1..=3)
            .map(|n| PositionVars {
                left: conv_vars(&format!("level{n}.pos.left"), 1, 0),
                right: conv_vars(&format!("level{n}.pos.right"), 1, 0),
            })
            .collect();
        let pnet = ParamNetVars {
            conv: same("pnet.conv"),
            conv2: same("pnet.conv2"),
            fc1_w: effective[idx("pnet.fc1.weight")],
            fc1_b: effective[idx("pnet.fc1.bias")],
            fc2_w: effective[idx("pnet.fc2.weight")],
            fc2_b: effective[idx("pnet.fc2.bias")],
        };
        let [(k0, s0), (k1, s1), (k2, s2), (k3, s3)] = STAGE_SCHEDULE;
        let stem = conv_vars("stem", s0, k0 / 2);
        let downs = [conv_vars("down2", s1, k1 / 2), conv_vars("down3", s2, k2 / 2)];
        let head = conv_vars("head", s3, k3 / 2);

        let level_coords = (0..3)
            .map(|n| {
                let r = self.config.level_resolution(n);
                let g = make_grid(r, r).expect("level resolution >= 2");
                let c = tape.constant(g.coordinate_tensor());
                (tape.channels(c, 0, 1), tape.channels(c, 1, 1))
            })
            .collect();
        let input_grid = self.config.input_grid().expect("validated config");
        let input_coords = tape.constant(input_grid.coordinate_tensor());
        BoundNet {
            leaves,
            stem,
            downs,
            levels,
            positions,
            head,
            pnet,
            level_coords,
            input_coords,
            sigma_max: self.config.sigma_max,
            level_channels: self.config.level_channels,
            input_grid,
        }
    }
}

impl BoundNet {
    pub fn input_grid(&self) -> &Grid2D {
        &self.input_grid
    }

    /// Zero hidden states and zero field (the `t = 0` state).
    pub fn initial_state(&self, tape: &mut Tape) -> TapeState {
        let r = self.input_grid.height();
        let hidden = [0, 1, 2].map(|n| {
            let s = r >> (n + 1);
            tape.constant(Tensor::zeros(&[self.level_channels[n], s, s]))
        });
        let field = tape.constant(Tensor::zeros(&[2, r, r]));
        TapeState { hidden, field }
    }

    /// Runs the encoder and heads on `[F, M∘f_{t-1}]` and returns the step's
    /// packed parameters together with the advanced state.
    pub fn step(
        &self,
        tape: &mut Tape,
        fixed: Var,
        moving_warped: Var,
        state: &TapeState,
        mut noise: Option<&mut NoiseContext>,
    ) -> TapeStep {
        let input = tape.concat(&[self.input_coords, fixed, moving_warped]);
        let mut x = conv(tape, input, &self.stem);
        x = tape.tanh(x);
        let mut hidden = state.hidden;
        let mut triples = Vec::with_capacity(3);
        for n in 0..3 {
            if n > 0 {
                x = conv(tape, x, &self.downs[n - 1]);
                x = tape.tanh(x);
            }
            let mut res = x;
            for block in &self.levels[n].residual {
                res = layers::residual_block_on_tape(tape, res, block);
            }
            let mut h = layers::conv_gru_step_on_tape(tape, res, state.hidden[n], &self.levels[n].gru);
            if let Some(ctx) = noise.as_deref_mut() {
                let s = ctx.settings;
                if s.noise_std > 0.0 {
                    let shape = tape.value(h).shape().to_vec();
                    let e = tape.constant(noise_tensor(&shape, s.noise_mean, s.noise_std, ctx.rng));
                    h = tape.mul(h, e);
                }
            }
            let sum = tape.add(res, h);
            let out = tape.tanh(sum);
            hidden[n] = h;
            let (cx, cy) = self.level_coords[n];
            triples.push(position_network_on_tape(tape, out, &self.positions[n], cx, cy));
            x = out;
        }
        let head = conv(tape, x, &self.head);
        let head = tape.tanh(head);
        let raw = parameter_network_on_tape(tape, head, &self.pnet);
        let (px, py) = fuse_positions_on_tape(tape, &triples);
        let params = squash_params_on_tape(tape, raw, px, py, self.sigma_max);
        let local_field = gaussian_local_field_on_tape(tape, params, &self.input_grid);
        let field = tape.add(state.field, local_field);
        TapeStep {
            params,
            local_field,
            state: TapeState { hidden, field },
        }
    }
}

/// Outputs of a recorded unroll.
#[derive(Clone, Debug)]
pub struct TapeUnroll {
    pub params: Vec<Var>,
    /// Cumulative fields `f_1 … f_T`.
    pub fields: Vec<Var>,
    /// `M∘f_1 … M∘f_T`.
    pub warped: Vec<Var>,
}

/// Records `steps` recurrent steps; each step sees `M∘f_{t-1}`.
pub fn unroll_on_tape(
    tape: &mut Tape,
    bound: &BoundNet,
    fixed: Var,
    moving: Var,
    steps: usize,
    mut noise: Option<&mut NoiseContext>,
) -> TapeUnroll {
    let mut state = bound.initial_state(tape);
    let mut current = moving;
    let mut out = TapeUnroll {
        params: Vec::with_capacity(steps),
        fields: Vec::with_capacity(steps),
        warped: Vec::with_capacity(steps),
    };
    for _ in 0..steps {
        let step = bound.step(tape, fixed, current, &state, noise.as_deref_mut());
        state = step.state;
        current = warp_on_tape(tape, moving, state.field);
        out.params.push(step.params);
        out.fields.push(state.field);
        out.warped.push(current);
    }
    out
}

/// Hidden states, accumulated field and step counter between inference
/// steps.
#[derive(Clone, Debug, PartialEq)]
pub struct R2N2State {
    pub hidden: [Tensor; 3],
    pub accumulated_field: DisplacementField,
    pub step: usize,
}

impl R2N2State {
    pub fn initial(config: &NetConfig) -> Result<Self> {
        let grid = config.input_grid()?;
        let hidden = [0, 1, 2].map(|n| {
            let s = config.level_resolution(n);
            Tensor::zeros(&[config.level_channels[n], s, s])
        });
        Ok(Self {
            hidden,
            accumulated_field: DisplacementField::zeros(&grid),
            step: 0,
        })
    }
}

fn check_input(config: &NetConfig, image: &Image2D, what: &str) -> Result<()> {
    let g = image.grid();
    if g.height() != config.input_resolution || g.width() != config.input_resolution {
        return Err(Error::Shape(format!(
            "{what} image is {}x{}, network expects {r}x{r}",
            g.height(),
            g.width(),
            r = config.input_resolution
        )));
    }
    Ok(())
}

/// One inference step: warps `M` by the accumulated field, runs the network
/// and returns the emitted local deformation with the advanced state.
pub fn r2n2_step(
    net: &R2N2Net,
    fixed: &Image2D,
    moving: &Image2D,
    state: &R2N2State,
) -> Result<(LocalDeformParams, R2N2State)> {
    check_input(&net.config, fixed, "fixed")?;
    check_input(&net.config, moving, "moving")?;
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, false, None);
    let fv = tape.constant(fixed.to_tensor());
    let mv = tape.constant(moving.to_tensor());
    let field = tape.constant(state.accumulated_field.to_tensor());
    let warped = warp_on_tape(&mut tape, mv, field);
    let hidden = [0, 1, 2].map(|n| tape.constant(state.hidden[n].clone()));
    let step = bound.step(&mut tape, fv, warped, &TapeState { hidden, field }, None);
    let params = LocalDeformParams::from_slice(tape.value(step.params).data());
    let grid = bound.input_grid().clone();
    let next = R2N2State {
        hidden: [0, 1, 2].map(|n| tape.value(step.state.hidden[n]).clone()),
        accumulated_field: DisplacementField::from_tensor(&grid, tape.value(step.state.field))?,
        step: state.step + 1,
    };
    Ok((params, next))
}

/// Result of registering one pair with the network.
#[derive(Clone, Debug)]
pub struct R2N2Registration {
    pub params: Vec<LocalDeformParams>,
    /// Cumulative field after each step.
    pub fields: Vec<DisplacementField>,
}

impl R2N2Registration {
    pub fn final_field(&self) -> &DisplacementField {
        self.fields.last().expect("at least one step")
    }
}

/// Runs `steps` inference steps from the zero state.
pub fn register(net: &R2N2Net, fixed: &Image2D, moving: &Image2D, steps: usize) -> Result<R2N2Registration> {
    if steps == 0 {
        return Err(Error::InvalidArgument("sequence length must be >= 1".into()));
    }
    let mut state = R2N2State::initial(&net.config)?;
    let mut out = R2N2Registration {
        params: Vec::with_capacity(steps),
        fields: Vec::with_capacity(steps),
    };
    for _ in 0..steps {
        let (p, next) = r2n2_step(net, fixed, moving, &state)?;
        out.params.push(p);
        out.fields.push(next.accumulated_field.clone());
        state = next;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deform::render_sequence;

    fn toy_images(r: usize) -> (Image2D, Image2D) {
        let g = make_grid(r, r).unwrap();
        let f = Image2D::from_fn(g.clone(), |x, y| 0.5 + 0.4 * (3.0 * x).sin() * (2.0 * y).cos());
        let m = Image2D::from_fn(g, |x, y| 0.5 + 0.4 * (3.0 * x + 0.3).sin() * (2.0 * y - 0.2).cos());
        (f, m)
    }

    #[test]
    fn config_validation() {
        assert!(NetConfig::default().validate().is_ok());
        let mut c = NetConfig::toy(32, 16);
        assert_eq!(c.level_channels, [4, 8, 16]);
        assert_eq!(c.head_channels, 32);
        c.input_resolution = 36;
        assert!(c.validate().is_err());
        let mut c = NetConfig::toy(32, 16);
        c.sigma_max = 0.0;
        assert!(c.validate().is_err());
        assert_eq!(NetConfig::default().level_resolution(0), 128);
        assert_eq!(NetConfig::default().level_resolution(2), 32);
    }

    #[test]
    fn zero_network_emits_zero_fields() {
        let net = R2N2Net::zeros(NetConfig::toy(16, 32)).unwrap();
        let (f, m) = toy_images(16);
        let reg = register(&net, &f, &m, 3).unwrap();
        for p in &reg.params {
            assert_eq!(p.weight, (0.0, 0.0));
            assert_eq!(p.sigma_x, 0.15);
        }
        assert_eq!(reg.final_field().max_magnitude(), 0.0);
    }

    #[test]
    fn accumulated_field_matches_rendered_sequence() {
        let net = R2N2Net::new(NetConfig::toy(16, 32), 7).unwrap();
        let (f, m) = toy_images(16);
        let reg = register(&net, &f, &m, 4).unwrap();
        for p in &reg.params {
            p.validate(0.3).unwrap();
        }
        let rendered = render_sequence(&reg.params, f.grid()).unwrap();
        let diff = (reg.final_field().to_tensor().zip_map(&rendered.to_tensor(), |a, b| (a - b).abs())).max_abs();
        assert!(diff <= 1e-5, "{diff}");
    }

    #[test]
    fn step_rejects_wrong_resolution() {
        let net = R2N2Net::zeros(NetConfig::toy(16, 32)).unwrap();
        let (f, m) = toy_images(24);
        let state = R2N2State::initial(net.config()).unwrap();
        assert!(matches!(r2n2_step(&net, &f, &m, &state), Err(Error::Shape(_))));
    }

    #[test]
    fn inference_is_deterministic_and_bounded() {
        let net = R2N2Net::new(NetConfig::toy(16, 32), 3).unwrap();
        let (f, m) = toy_images(16);
        let mut state = R2N2State::initial(net.config()).unwrap();
        let (p1, s1) = r2n2_step(&net, &f, &m, &state).unwrap();
        let (p2, s2) = r2n2_step(&net, &f, &m, &state).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(s1, s2);
        assert_eq!(s1.step, 1);
        for h in &s1.hidden {
            assert!(h.data().iter().all(|v| v.abs() < 1.0));
        }
        state = s1;
        let (_, s3) = r2n2_step(&net, &f, &m, &state).unwrap();
        assert_eq!(s3.step, 2);
    }

    #[test]
    fn parameter_shapes_match_store() {
        let c = NetConfig::toy(32, 16);
        let net = R2N2Net::new(c.clone(), 1).unwrap();
        assert_eq!(net.params().len(), c.parameter_shapes().len());
        assert!(R2N2Net::from_params(c.clone(), net.params().clone()).is_ok());
        let mut bad = net.params().clone();
        bad.tensors_mut()[0] = Tensor::zeros(&[1]);
        assert!(R2N2Net::from_params(c, bad).is_err());
    }

    #[test]
    fn noise_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let zeros = Tensor::zeros(&[100]);
        assert!(apply_multiplicative_noise(&zeros, 1.0, 1.414, &mut rng).data().iter().all(|&v| v == 0.0));
        let ones = Tensor::full(&[100_000], 1.0);
        let mean = apply_multiplicative_noise(&ones, 1.0, 0.5f64.sqrt() / 0.5, &mut rng).sum() / 1e5;
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
    }
}
