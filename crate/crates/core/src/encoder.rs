//! Temporal dilated convolutional lifting network.
//!
//! Layout (channels-last, `k` = kernel width, `R` residual connections):
//!
//! ```text
//! input block   conv(k, dilation 1, 2M → C) → BN → ReLU → dropout
//! connection r  conv(k, dilation k^r, C → C) → BN → ReLU → dropout
//!               conv(1, C → C)               → BN → ReLU → dropout
//!               + center slice of the connection input
//! output        conv(1, C → 3M) + bias
//! ```
//!
//! The receptive field is `k^(R+1)` frames, so a window of exactly that
//! many frames produces one output frame.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::NamedTensor;
use crate::diff::{BnMode, BnRunning, Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub num_joints: usize,
    /// Input frames per output frame (receptive field).
    pub window: usize,
    pub channels: usize,
    pub kernel: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_joints: 17,
            window: 27,
            channels: 128,
            kernel: 3,
            dropout: 0.25,
        }
    }
}

impl EncoderConfig {
    /// Number of residual connections `R` with `kernel · kernel^R == window`.
    pub fn residual_connections(&self) -> Result<usize> {
        if self.channels == 0 || self.num_joints == 0 {
            return Err(Error::Config("channels and num_joints must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.kernel < 3 || self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel width {} must be odd and at least 3", self.kernel)));
        }
        let mut span = self.kernel;
        let mut r = 0;
        while span < self.window {
            span *= self.kernel;
            r += 1;
        }
        if span != self.window {
            let valid: Vec<String> = (0..5)
                .map(|r| format!("(k={}, R={r}, J={})", self.kernel, self.kernel.pow(r as u32 + 1)))
                .collect();
            return Err(Error::Config(format!(
                "window {} is not kernel·kernel^R for kernel {}; valid combinations: {}",
                self.window,
                self.kernel,
                valid.join(", ")
            )));
        }
        Ok(r)
    }

    /// Dilation of each residual connection's temporal convolution.
    pub fn dilations(&self) -> Result<Vec<usize>> {
        let r = self.residual_connections()?;
        Ok((1..=r).map(|i| self.kernel.pow(i as u32)).collect())
    }
}

/// Which statistics and regularizers a forward pass uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    pub dropout: bool,
    pub batch_stats: bool,
    pub update_running: bool,
}

impl ForwardOptions {
    pub const TRAIN: Self = Self {
        dropout: true,
        batch_stats: true,
        update_running: true,
    };
    pub const EVAL: Self = Self {
        dropout: false,
        batch_stats: false,
        update_running: false,
    };
    /// Deterministic and differentiable through the batch statistics; used
    /// for gradient checks.
    pub const BATCH_STATS_NO_DROPOUT: Self = Self {
        dropout: false,
        batch_stats: true,
        update_running: false,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    weight: usize,
    gamma: usize,
    beta: usize,
    bn: usize,
    dilation: usize,
}

/// Trainable parameters plus batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    config: EncoderConfig,
    params: Vec<NamedTensor>,
    running: Vec<BnRunning>,
    input: Block,
    connections: Vec<(Block, Block)>,
    out_weight: usize,
    out_bias: usize,
    mode: Mode,
}

/// Tape handles of the model parameters, in [`EncoderModel::parameters`] order.
pub struct ParamVars(pub Vec<Var>);

impl EncoderModel {
    /// He-uniform convolution weights, zero biases, γ = 1, β = 0.
    pub fn build(config: EncoderConfig, rng_seed: u64) -> Result<Self> {
        let dilations = config.dilations()?;
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let (k, c, m) = (config.kernel, config.channels, config.num_joints);
        let mut params = Vec::new();
        let mut running = Vec::new();
        let he = |name: String, shape: [usize; 3], rng: &mut ChaCha8Rng, params: &mut Vec<NamedTensor>| {
            let fan_in = (shape[0] * shape[1]) as f64;
            let bound = (6.0 / fan_in).sqrt();
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            params.push(NamedTensor {
                name,
                tensor: Tensor::new(&shape, data).expect("weight shape"),
            });
            params.len() - 1
        };
        let block = |prefix: &str, kernel: usize, c_in: usize, dilation: usize, rng: &mut ChaCha8Rng, params: &mut Vec<NamedTensor>, running: &mut Vec<BnRunning>| {
            let weight = he(format!("{prefix}.conv.weight"), [kernel, c_in, c], rng, params);
            params.push(NamedTensor {
                name: format!("{prefix}.bn.gamma"),
                tensor: Tensor::full(&[c], 1.0),
            });
            params.push(NamedTensor {
                name: format!("{prefix}.bn.beta"),
                tensor: Tensor::zeros(&[c]),
            });
            running.push(BnRunning::new(c));
            Block {
                weight,
                gamma: params.len() - 2,
                beta: params.len() - 1,
                bn: running.len() - 1,
                dilation,
            }
        };
        let input = block("input", k, 2 * m, 1, &mut rng, &mut params, &mut running);
        let mut connections = Vec::new();
        for (i, d) in dilations.iter().enumerate() {
            let temporal = block(&format!("res{i}.temporal"), k, c, *d, &mut rng, &mut params, &mut running);
            let pointwise = block(&format!("res{i}.pointwise"), 1, c, 1, &mut rng, &mut params, &mut running);
            connections.push((temporal, pointwise));
        }
        let fan_in = c as f64;
        let bound = (6.0 / fan_in).sqrt();
        let data = (0..c * 3 * m).map(|_| rng.gen_range(-bound..bound)).collect();
        params.push(NamedTensor {
            name: "output.conv.weight".into(),
            tensor: Tensor::new(&[1, c, 3 * m], data)?,
        });
        let out_weight = params.len() - 1;
        params.push(NamedTensor {
            name: "output.conv.bias".into(),
            tensor: Tensor::zeros(&[3 * m]),
        });
        let out_bias = params.len() - 1;
        Ok(Self {
            config,
            params,
            running,
            input,
            connections,
            out_weight,
            out_bias,
            mode: Mode::Train,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn parameters(&self) -> &[NamedTensor] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn num_residual_connections(&self) -> usize {
        self.connections.len()
    }

    /// Parameters followed by batch-norm running statistics.
    pub fn state(&self) -> Vec<NamedTensor> {
        let mut out = self.params.clone();
        let names = std::iter::once(&self.input).chain(self.connections.iter().flat_map(|(a, b)| [a, b]));
        for block in names {
            let prefix = self.params[block.weight].name.trim_end_matches(".conv.weight").to_string();
            let run = &self.running[block.bn];
            out.push(NamedTensor {
                name: format!("{prefix}.bn.running_mean"),
                tensor: Tensor::from_slice(&run.mean),
            });
            out.push(NamedTensor {
                name: format!("{prefix}.bn.running_var"),
                tensor: Tensor::from_slice(&run.var),
            });
        }
        out
    }

    /// Rebuilds a model from [`EncoderModel::state`] output.
    pub fn from_state(config: EncoderConfig, state: &[NamedTensor]) -> Result<Self> {
        let mut model = Self::build(config, 0)?;
        let lookup = |name: &str| {
            state
                .iter()
                .find(|t| t.name == name)
                .map(|t| &t.tensor)
                .ok_or_else(|| Error::Contract(format!("checkpoint is missing tensor {name:?}")))
        };
        for p in &mut model.params {
            let t = lookup(&p.name)?;
            if t.shape() != p.tensor.shape() {
                return Err(Error::Contract(format!(
                    "tensor {:?} has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.tensor.shape()
                )));
            }
            p.tensor = t.clone();
        }
        let expected = model.state();
        for (i, block) in std::iter::once(model.input.clone())
            .chain(model.connections.iter().flat_map(|(a, b)| [a.clone(), b.clone()]))
            .enumerate()
        {
            let base = model.params.len() + 2 * i;
            let mean = lookup(&expected[base].name)?;
            let var = lookup(&expected[base + 1].name)?;
            if mean.len() != config.channels || var.len() != config.channels {
                return Err(Error::Contract("running statistics have the wrong length".into()));
            }
            model.running[block.bn] = BnRunning {
                mean: mean.data().to_vec(),
                var: var.data().to_vec(),
            };
        }
        Ok(model)
    }

    /// Registers every parameter on `tape` as a trainable leaf.
    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        ParamVars(self.params.iter().map(|p| tape.param(p.tensor.clone())).collect())
    }

    fn run_block<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape,
        vars: &ParamVars,
        block: &Block,
        x: Var,
        opts: ForwardOptions,
        rng: &mut R,
    ) -> Result<Var> {
        let conv = tape.conv1d_dilated(x, vars.0[block.weight], None, block.dilation)?;
        let mode = if opts.batch_stats {
            BnMode::Batch {
                update_running: opts.update_running,
            }
        } else {
            BnMode::Running
        };
        let bn = tape.batchnorm_1d(conv, vars.0[block.gamma], vars.0[block.beta], &mut self.running[block.bn], mode)?;
        let act = tape.relu(bn);
        Ok(tape.dropout(act, self.config.dropout, rng, opts.dropout)?)
    }

    /// Runs the network over `input: [batch, len, 2M]` (channels-last,
    /// normalized coordinates) and returns `[batch, len − window + 1, 3M]`.
    pub fn forward_tape<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape,
        vars: &ParamVars,
        input: Var,
        opts: ForwardOptions,
        rng: &mut R,
    ) -> Result<Var> {
        let shape = tape.shape(input).to_vec();
        if shape.len() != 3 || shape[2] != 2 * self.config.num_joints {
            return Err(Error::Contract(format!(
                "encoder input must be [batch, frames, {}], got {shape:?}",
                2 * self.config.num_joints
            )));
        }
        if shape[1] < self.config.window {
            return Err(Error::Contract(format!(
                "encoder needs at least {} frames, got {}",
                self.config.window, shape[1]
            )));
        }
        let input_block = self.input.clone();
        let mut h = self.run_block(tape, vars, &input_block, input, opts, rng)?;
        for (temporal, pointwise) in self.connections.clone() {
            let y = self.run_block(tape, vars, &temporal, h, opts, rng)?;
            let y = self.run_block(tape, vars, &pointwise, y, opts, rng)?;
            let pad = (self.config.kernel - 1) * temporal.dilation / 2;
            let len = tape.shape(y)[1];
            let skip = tape.narrow(h, 1, pad, len)?;
            h = tape.add(skip, y)?;
        }
        Ok(tape.conv1d_dilated(h, vars.0[self.out_weight], Some(vars.0[self.out_bias]), 1)?)
    }

    /// Batched forward for `windows: [batch, len, M, 2]`, returning
    /// `[batch, len − window + 1, M, 3]` on the tape.
    pub fn forward_batch<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape,
        vars: &ParamVars,
        windows: &Tensor,
        opts: ForwardOptions,
        rng: &mut R,
    ) -> Result<Var> {
        let s = windows.shape();
        if s.len() != 4 || s[2] != self.config.num_joints || s[3] != 2 {
            return Err(Error::Contract(format!(
                "expected windows [batch, frames, {}, 2], got {s:?}",
                self.config.num_joints
            )));
        }
        let (b, l, m) = (s[0], s[1], s[2]);
        let input = tape.constant(windows.clone().reshape(&[b, l, 2 * m])?);
        let out = self.forward_tape(tape, vars, input, opts, rng)?;
        let lo = tape.shape(out)[1];
        Ok(tape.reshape(out, &[b, lo, m, 3])?)
    }

    /// Strided block: non-overlapping groups of `kernel` frames folded into
    /// channels, then a pointwise convolution with the folded weight.
    fn run_block_strided<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape,
        vars: &ParamVars,
        block: &Block,
        x: Var,
        opts: ForwardOptions,
        rng: &mut R,
    ) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let w = vars.0[block.weight];
        let ws = tape.shape(w).to_vec();
        let (folded, wf) = if ws[0] == 1 {
            (x, w)
        } else {
            let k = ws[0];
            let x = tape.reshape(x, &[s[0], s[1] / k, k * s[2]])?;
            (x, tape.reshape(w, &[1, k * ws[1], ws[2]])?)
        };
        let conv = tape.conv1d_dilated(folded, wf, None, 1)?;
        let mode = if opts.batch_stats {
            BnMode::Batch {
                update_running: opts.update_running,
            }
        } else {
            BnMode::Running
        };
        let bn = tape.batchnorm_1d(conv, vars.0[block.gamma], vars.0[block.beta], &mut self.running[block.bn], mode)?;
        let act = tape.relu(bn);
        Ok(tape.dropout(act, self.config.dropout, rng, opts.dropout)?)
    }

    /// One output frame per `input: [N, J, 2M]` window, computing only the
    /// intermediate frames that output depends on. With eval statistics it
    /// agrees with [`EncoderModel::forward_tape`] on the same window; with
    /// batch statistics the statistics cover only those frames.
    pub fn forward_tape_strided<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape,
        vars: &ParamVars,
        input: Var,
        opts: ForwardOptions,
        rng: &mut R,
    ) -> Result<Var> {
        let shape = tape.shape(input).to_vec();
        let (j, m, k) = (self.config.window, self.config.num_joints, self.config.kernel);
        if shape.len() != 3 || shape[1] != j || shape[2] != 2 * m {
            return Err(Error::Contract(format!("strided encoder input must be [batch, {j}, {}], got {shape:?}", 2 * m)));
        }
        let input_block = self.input.clone();
        let mut h = self.run_block_strided(tape, vars, &input_block, input, opts, rng)?;
        for (temporal, pointwise) in self.connections.clone() {
            let y = self.run_block_strided(tape, vars, &temporal, h, opts, rng)?;
            let y = self.run_block_strided(tape, vars, &pointwise, y, opts, rng)?;
            let s = tape.shape(h).to_vec();
            let grouped = tape.reshape(h, &[s[0], s[1] / k, k, s[2]])?;
            let center = tape.narrow(grouped, 2, k / 2, 1)?;
            let skip = tape.reshape(center, &[s[0], s[1] / k, s[2]])?;
            h = tape.add(skip, y)?;
        }
        Ok(tape.conv1d_dilated(h, vars.0[self.out_weight], Some(vars.0[self.out_bias]), 1)?)
    }

    /// [`EncoderModel::forward_batch`] through the strided network: every
    /// output frame of `windows: [batch, len, M, 2]` is computed from its own
    /// `J`-frame slice. Returns `[batch, len − J + 1, M, 3]`.
    pub fn forward_batch_strided<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape,
        vars: &ParamVars,
        windows: &Tensor,
        opts: ForwardOptions,
        rng: &mut R,
    ) -> Result<Var> {
        let s = windows.shape();
        let (j, m) = (self.config.window, self.config.num_joints);
        if s.len() != 4 || s[1] < j || s[2] != m || s[3] != 2 {
            return Err(Error::Contract(format!("expected windows [batch, frames ≥ {j}, {m}, 2], got {s:?}")));
        }
        let (b, l) = (s[0], s[1]);
        let outputs = l - j + 1;
        let frame = 2 * m;
        let mut data = Vec::with_capacity(b * outputs * j * frame);
        for bi in 0..b {
            let base = bi * l * frame;
            for o in 0..outputs {
                data.extend_from_slice(&windows.data()[base + o * frame..base + (o + j) * frame]);
            }
        }
        let input = tape.constant(Tensor::new(&[b * outputs, j, frame], data)?);
        let out = self.forward_tape_strided(tape, vars, input, opts, rng)?;
        Ok(tape.reshape(out, &[b, outputs, m, 3])?)
    }

    fn options(&self) -> ForwardOptions {
        match self.mode {
            // a single window cannot supply batch statistics
            Mode::Train => ForwardOptions {
                dropout: true,
                batch_stats: false,
                update_running: false,
            },
            Mode::Eval => ForwardOptions::EVAL,
        }
    }

    /// Prediction for the center frame of one `window: [J, M, 2]`.
    ///
    /// Train mode applies dropout (seeded by `dropout_seed`) and normalizes
    /// with running statistics; eval mode is a pure function of the
    /// parameters and the input.
    pub fn forward(&mut self, window: &Tensor, dropout_seed: u64) -> Result<Tensor> {
        let (j, m) = (self.config.window, self.config.num_joints);
        if window.shape() != [j, m, 2] {
            return Err(Error::Contract(format!(
                "window must be [{j}, {m}, 2], got {:?}",
                window.shape()
            )));
        }
        let mut tape = Tape::new();
        let vars = ParamVars(self.params.iter().map(|p| tape.constant(p.tensor.clone())).collect());
        let input = tape.constant(window.clone().reshape(&[1, j, 2 * m])?);
        let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
        let opts = self.options();
        let out = self.forward_tape(&mut tape, &vars, input, opts, &mut rng)?;
        Ok(tape.value(out).clone().reshape(&[m, 3])?)
    }

    /// Whole-clip prediction for `frames: [T, M, 2]`, edge-replicating
    /// `(J − 1)/2` frames on each side. Always uses eval statistics.
    pub fn forward_sequence(&mut self, frames: &Tensor) -> Result<Tensor> {
        let m = self.config.num_joints;
        let s = frames.shape();
        if s.len() != 3 || s[1] != m || s[2] != 2 || s[0] == 0 {
            return Err(Error::Contract(format!("frames must be [T ≥ 1, {m}, 2], got {s:?}")));
        }
        let t = s[0];
        let padded = pad_replicate(frames.data(), t, 2 * m, (self.config.window - 1) / 2);
        let len = padded.len() / (2 * m);
        let mut tape = Tape::new();
        let vars = ParamVars(self.params.iter().map(|p| tape.constant(p.tensor.clone())).collect());
        let input = tape.constant(Tensor::new(&[1, len, 2 * m], padded)?);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward_tape(&mut tape, &vars, input, ForwardOptions::EVAL, &mut rng)?;
        Ok(tape.value(out).clone().reshape(&[t, m, 3])?)
    }
}

/// Repeats the first and last rows of a `[rows, width]` buffer `pad` times.
pub fn pad_replicate(data: &[f64], rows: usize, width: usize, pad: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity((rows + 2 * pad) * width);
    for _ in 0..pad {
        out.extend_from_slice(&data[..width]);
    }
    out.extend_from_slice(&data[..rows * width]);
    for _ in 0..pad {
        out.extend_from_slice(&data[(rows - 1) * width..rows * width]);
    }
    out
}

/// Splits `[..., M, 3]` predictions into planar `[..., M, 2]` and depth
/// `[..., M, 1]` parts.
pub fn split_output(tape: &mut Tape, pred: Var) -> Result<(Var, Var)> {
    let shape = tape.shape(pred).to_vec();
    let axis = shape.len().checked_sub(1).filter(|a| shape[*a] == 3).ok_or_else(|| {
        Error::Contract(format!("split_output expects [..., 3], got {shape:?}"))
    })?;
    Ok((tape.narrow(pred, axis, 0, 2)?, tape.narrow(pred, axis, 2, 1)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_difference, relative_error};

    fn cfg(window: usize, channels: usize, joints: usize) -> EncoderConfig {
        EncoderConfig {
            num_joints: joints,
            window,
            channels,
            kernel: 3,
            dropout: 0.25,
        }
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn residual_connection_counts() {
        assert_eq!(cfg(243, 8, 17).residual_connections().unwrap(), 4);
        assert_eq!(cfg(27, 8, 17).residual_connections().unwrap(), 2);
        assert_eq!(cfg(3, 8, 17).residual_connections().unwrap(), 0);
        assert_eq!(cfg(81, 8, 17).dilations().unwrap(), vec![3, 9, 27]);
        let err = cfg(25, 8, 17).residual_connections().unwrap_err().to_string();
        assert!(err.contains("R=2, J=27"), "{err}");
        assert!(EncoderModel::build(cfg(30, 8, 17), 0).is_err());
    }

    #[test]
    fn build_reports_parameters() {
        let model = EncoderModel::build(cfg(243, 16, 17), 1).unwrap();
        assert_eq!(model.num_residual_connections(), 4);
        // 8 blocks inside the connections plus input block and output conv
        let blocks = model.parameters().iter().filter(|p| p.name.ends_with(".conv.weight")).count();
        assert_eq!(blocks, 1 + 8 + 1);
        let expected = 3 * 34 * 16 + 32 + 4 * (3 * 16 * 16 + 32 + 16 * 16 + 32) + 16 * 51 + 51;
        assert_eq!(model.num_parameters(), expected);
        assert_eq!(model, EncoderModel::build(cfg(243, 16, 17), 1).unwrap());
        assert_ne!(model, EncoderModel::build(cfg(243, 16, 17), 2).unwrap());
    }

    #[test]
    fn degenerate_depth_feeds_output_directly() {
        let mut model = EncoderModel::build(cfg(3, 4, 2), 3).unwrap();
        assert_eq!(model.num_residual_connections(), 0);
        model.set_mode(Mode::Eval);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = model.forward(&random(&[3, 2, 2], &mut rng), 0).unwrap();
        assert_eq!(out.shape(), &[2, 3]);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut model = EncoderModel::build(cfg(9, 8, 5), 4).unwrap();
        model.set_mode(Mode::Eval);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random(&[9, 5, 2], &mut rng);
        let a = model.forward(&w, 1).unwrap();
        let b = model.forward(&w, 2).unwrap();
        assert_eq!(a.shape(), &[5, 3]);
        assert_eq!(a, b);
        assert!(model.forward(&random(&[7, 5, 2], &mut rng), 0).is_err());
    }

    #[test]
    fn train_mode_applies_dropout() {
        let mut model = EncoderModel::build(cfg(9, 16, 5), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random(&[9, 5, 2], &mut rng);
        let a = model.forward(&w, 1).unwrap();
        assert_eq!(a, model.forward(&w, 1).unwrap());
        assert_ne!(a, model.forward(&w, 2).unwrap());
    }

    #[test]
    fn strided_path_matches_dilated_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for window in [3, 9, 27, 81] {
            let mut model = EncoderModel::build(cfg(window, 6, 4), window as u64).unwrap();
            // non-trivial running statistics and affine parameters
            for r in &mut model.running {
                r.mean.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
                r.var.iter_mut().for_each(|v| *v = rng.gen_range(0.5..2.0));
            }
            for p in model.parameters_mut().iter_mut().filter(|p| p.name.contains(".bn.")) {
                p.tensor.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
            }
            let x = random(&[3, window + 2, 4, 2], &mut rng);
            let mut tape = Tape::new();
            let vars = model.register(&mut tape);
            let a = model.forward_batch(&mut tape, &vars, &x, ForwardOptions::EVAL, &mut rng).unwrap();
            let b = model.forward_batch_strided(&mut tape, &vars, &x, ForwardOptions::EVAL, &mut rng).unwrap();
            assert_eq!(tape.shape(a), tape.shape(b));
            let diff = tape.value(a).max_abs_diff(tape.value(b));
            assert!(diff < 1e-12, "J={window}: {diff:e}");
        }
    }

    #[test]
    fn strided_gradients_match_finite_differences() {
        let config = cfg(9, 5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let model = EncoderModel::build(config, 3).unwrap();
        let x = random(&[4, 10, 3, 2], &mut rng);
        let target = random(&[4, 2, 3, 3], &mut rng);
        let loss = |tape: &mut Tape, model: &mut EncoderModel, vars: &ParamVars| {
            let mut no_rng = ChaCha8Rng::seed_from_u64(0);
            let out = model
                .forward_batch_strided(tape, vars, &x, ForwardOptions::BATCH_STATS_NO_DROPOUT, &mut no_rng)
                .unwrap();
            let t = tape.constant(target.clone());
            let d = tape.sub(out, t).unwrap();
            let sq = tape.square(d);
            tape.mean(sq)
        };
        let mut m = model.clone();
        let mut tape = Tape::new();
        let vars = m.register(&mut tape);
        let l = loss(&mut tape, &mut m, &vars);
        tape.backward(l).unwrap();
        for (pi, v) in vars.0.iter().enumerate() {
            let analytic = tape.grad(*v).unwrap();
            let numeric = finite_difference(
                &|p: &Tensor| {
                    let mut mm = model.clone();
                    mm.parameters_mut()[pi].tensor = p.clone();
                    let mut tape = Tape::new();
                    let vars = ParamVars(mm.parameters().iter().map(|q| tape.constant(q.tensor.clone())).collect());
                    let l = loss(&mut tape, &mut mm, &vars);
                    Ok(tape.value(l).item()?)
                },
                &model.parameters()[pi].tensor,
                1e-6,
            )
            .unwrap();
            let err = relative_error(analytic.data(), &numeric);
            assert!(err < 1e-5, "{}: relative error {err:e}", model.parameters()[pi].name);
        }
    }

    #[test]
    fn receptive_field_is_exact() {
        for (window, r) in [(3usize, 0usize), (9, 1), (27, 2)] {
            let mut model = EncoderModel::build(cfg(window, 8, 3), 10 + r as u64).unwrap();
            assert_eq!(model.num_residual_connections(), r);
            model.set_mode(Mode::Eval);
            let mut rng = ChaCha8Rng::seed_from_u64(20);
            let len = window + 10;
            let frames = random(&[1, len, 6], &mut rng);
            let run = |model: &mut EncoderModel, x: &Tensor| {
                let mut tape = Tape::new();
                let vars = ParamVars(model.parameters().iter().map(|p| tape.constant(p.tensor.clone())).collect());
                let input = tape.constant(x.clone());
                let out = model
                    .forward_tape(&mut tape, &vars, input, ForwardOptions::EVAL, &mut ChaCha8Rng::seed_from_u64(0))
                    .unwrap();
                tape.value(out).clone()
            };
            let base = run(&mut model, &frames);
            assert_eq!(base.shape()[1], 11);
            let out_pos = 5;
            for frame in 0..len {
                let mut probe = frames.clone();
                for c in 0..6 {
                    probe.data_mut()[frame * 6 + c] += 0.5;
                }
                let out = run(&mut model, &probe);
                let delta: f64 = (0..9)
                    .map(|c| (out.data()[out_pos * 9 + c] - base.data()[out_pos * 9 + c]).abs())
                    .sum();
                let inside = frame >= out_pos && frame < out_pos + window;
                if inside {
                    assert!(delta > 0.0, "window {window}: frame {frame} should influence output");
                } else {
                    assert_eq!(delta, 0.0, "window {window}: frame {frame} leaked into output");
                }
            }
        }
    }

    #[test]
    fn sequence_interior_matches_windowed_forward_bitwise() {
        let mut model = EncoderModel::build(cfg(27, 16, 4), 5).unwrap();
        model.set_mode(Mode::Eval);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = 300;
        let frames = random(&[t, 4, 2], &mut rng);
        let seq = model.forward_sequence(&frames).unwrap();
        assert_eq!(seq.shape(), &[t, 4, 3]);
        for center in [13usize, 100, 286] {
            let start = center - 13;
            let window = Tensor::new(&[27, 4, 2], frames.data()[start * 8..(start + 27) * 8].to_vec()).unwrap();
            let out = model.forward(&window, 0).unwrap();
            assert_eq!(out.data(), &seq.data()[center * 12..(center + 1) * 12]);
        }
    }

    #[test]
    fn single_frame_sequence_uses_replicated_window() {
        let mut model = EncoderModel::build(cfg(9, 8, 3), 7).unwrap();
        model.set_mode(Mode::Eval);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let frame = random(&[1, 3, 2], &mut rng);
        let seq = model.forward_sequence(&frame).unwrap();
        let window = Tensor::new(&[9, 3, 2], frame.data().repeat(9)).unwrap();
        assert_eq!(seq.data(), model.forward(&window, 0).unwrap().data());
    }

    #[test]
    fn split_then_concat_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pred = random(&[17, 3], &mut rng);
        let mut tape = Tape::new();
        let p = tape.param(pred.clone());
        let (xy, z) = split_output(&mut tape, p).unwrap();
        assert_eq!(tape.shape(xy), &[17, 2]);
        assert_eq!(tape.shape(z), &[17, 1]);
        let back = tape.concat(&[xy, z], 1).unwrap();
        assert_eq!(tape.value(back), &pred);
    }

    #[test]
    fn gradient_flows_through_both_splits() {
        use crate::camera::CameraIntrinsics;
        use crate::losses::{reprojection_mpjpe, Cameras};
        let mut tape = Tape::new();
        let p = tape.param(Tensor::new(&[1, 2, 3], vec![0.1, 0.2, 3.0, -0.3, 0.1, 4.0]).unwrap());
        let input = tape.constant(Tensor::new(&[1, 2, 2], vec![520.0, 560.0, 430.0, 530.0]).unwrap());
        let l = reprojection_mpjpe(&mut tape, p, Cameras::Shared(&CameraIntrinsics::ideal()), input).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(p).unwrap();
        assert!(g.data().chunks(3).all(|c| c[0] != 0.0 && c[2] != 0.0));
    }

    #[test]
    fn state_round_trip() {
        let mut model = EncoderModel::build(cfg(9, 8, 3), 11).unwrap();
        // move running stats off their defaults
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let vars = model.register(&mut tape);
        let x = random(&[4, 10, 3, 2], &mut rng);
        model.forward_batch(&mut tape, &vars, &x, ForwardOptions::TRAIN, &mut rng).unwrap();
        let restored = EncoderModel::from_state(*model.config(), &model.state()).unwrap();
        assert_eq!(restored.state(), model.state());
        let mut partial = model.state();
        partial.pop();
        assert!(EncoderModel::from_state(*model.config(), &partial).is_err());
    }

    #[test]
    fn tiny_model_gradients_match_finite_differences() {
        let config = EncoderConfig {
            num_joints: 3,
            window: 9,
            channels: 8,
            kernel: 3,
            dropout: 0.25,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for trial in 0..3 {
            let model = EncoderModel::build(config, trial).unwrap();
            let x = random(&[4, 10, 3, 2], &mut rng);
            let target = random(&[4, 2, 3, 3], &mut rng);
            let loss = |tape: &mut Tape, model: &mut EncoderModel, vars: &ParamVars| {
                let out = model
                    .forward_batch(tape, vars, &x, ForwardOptions::BATCH_STATS_NO_DROPOUT, &mut ChaCha8Rng::seed_from_u64(0))
                    .unwrap();
                let t = tape.constant(target.clone());
                let d = tape.sub(out, t).unwrap();
                let sq = tape.square(d);
                tape.mean(sq)
            };
            let mut m = model.clone();
            let mut tape = Tape::new();
            let vars = m.register(&mut tape);
            let l = loss(&mut tape, &mut m, &vars);
            tape.backward(l).unwrap();
            for (pi, v) in vars.0.iter().enumerate() {
                let analytic = tape.grad(*v).unwrap();
                let numeric = finite_difference(
                    &|p: &Tensor| {
                        let mut mm = model.clone();
                        mm.parameters_mut()[pi].tensor = p.clone();
                        let mut tape = Tape::new();
                        let vars = ParamVars(mm.parameters().iter().map(|q| tape.constant(q.tensor.clone())).collect());
                        let l = loss(&mut tape, &mut mm, &vars);
                        Ok(tape.value(l).item()?)
                    },
                    &model.parameters()[pi].tensor,
                    1e-6,
                )
                .unwrap();
                let err = relative_error(analytic.data(), &numeric);
                assert!(err < 1e-5, "{}: relative error {err:e}", model.parameters()[pi].name);
            }
        }
    }
}
