//! Network layout, parameter initialisation and the unrolled forward pass.
//!
//! A weight layer (dense or conv) may be followed by normalisation layers; the
//! neuron nonlinearity (LIF or ReLU) is inserted after that group, except after
//! the final weight layer, whose outputs are the per-timestep logits. Inputs
//! are presented as the same analog current at every timestep.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{conv_out_extent, softmax, SpikeFn, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamKind, Parameter, ParameterSet};
use crate::pruner::BinaryMask;
use crate::snn::lif::{LifParams, ResetMode};
use crate::tensor::NumArray;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NeuronMode {
    Lif,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum LayerSpec {
    Conv2d {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default)]
        bias: bool,
    },
    Dense {
        out_features: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    /// Non-overlapping average pooling.
    Pool { window: usize },
    /// Learnable per-channel affine (scale, shift).
    Norm,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

fn default_timesteps() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// `[channels, height, width]`.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
    pub neuron: NeuronMode,
    #[serde(default = "default_timesteps")]
    pub timesteps: usize,
    #[serde(default)]
    pub lif: LifParams,
    /// Excludes the first and last weight layers from masks.
    #[serde(default)]
    pub exempt_first_last: bool,
}

/// One executable step of a validated network.
#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Step {
    Conv {
        weight: usize,
        bias: Option<usize>,
        stride: usize,
        padding: usize,
    },
    Flatten,
    Dense {
        weight: usize,
        bias: Option<usize>,
    },
    Norm {
        scale: usize,
        shift: usize,
    },
    Pool(usize),
    /// Neuron nonlinearity; `site` indexes the spiking layers in order.
    Activate { site: usize, layer: usize },
}

/// Descriptor of one parameter tensor the network expects.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct ParamSlot {
    pub name: String,
    pub layer: usize,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub fan_in: usize,
    pub prunable: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Plan {
    pub steps: Vec<Step>,
    pub slots: Vec<ParamSlot>,
    pub sites: usize,
}

impl NetworkSpec {
    pub fn with_neuron(&self, neuron: NeuronMode) -> Self {
        Self {
            neuron,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.plan().map(|_| ())
    }

    pub(crate) fn plan(&self) -> Result<Plan> {
        if self.timesteps == 0 {
            return Err(Error::Config("timesteps must be at least 1".into()));
        }
        if self.neuron == NeuronMode::Lif {
            self.lif.validate()?;
            if self.timesteps < 2 {
                return Err(Error::Config(
                    "LIF networks need at least 2 timesteps for temporal dynamics".into(),
                ));
            }
        }
        let weight_layers: Vec<usize> = self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. }))
            .map(|(i, _)| i)
            .collect();
        let Some(&last_weight) = weight_layers.last() else {
            return Err(Error::Config("network has no weight layers".into()));
        };
        let first_weight = weight_layers[0];

        // Current activation shape without the batch axis.
        let mut shape: Vec<usize> = self.input_shape.to_vec();
        let mut steps = Vec::new();
        let mut slots: Vec<ParamSlot> = Vec::new();
        let mut pending_activation: Option<usize> = None;
        let mut sites = 0;
        let mut activate = |steps: &mut Vec<Step>, pending: &mut Option<usize>| {
            if let Some(layer) = pending.take() {
                steps.push(Step::Activate { site: sites, layer });
                sites += 1;
            }
        };

        for (i, layer) in self.layers.iter().enumerate() {
            let prunable = !(self.exempt_first_last && (i == first_weight || i == last_weight));
            match *layer {
                LayerSpec::Conv2d {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    bias,
                } => {
                    activate(&mut steps, &mut pending_activation);
                    if shape.len() != 3 {
                        return Err(Error::Config(format!(
                            "layer {i}: convolution after flattening is not supported"
                        )));
                    }
                    let (c, h, w) = (shape[0], shape[1], shape[2]);
                    let oh = conv_out_extent(h, kernel, stride, padding)
                        .map_err(|e| Error::Config(format!("layer {i}: {e}")))?;
                    let ow = conv_out_extent(w, kernel, stride, padding)
                        .map_err(|e| Error::Config(format!("layer {i}: {e}")))?;
                    let weight = slots.len();
                    slots.push(ParamSlot {
                        name: format!("layer{i}.weight"),
                        layer: i,
                        kind: ParamKind::Weight,
                        shape: vec![out_channels, c, kernel, kernel],
                        fan_in: c * kernel * kernel,
                        prunable,
                    });
                    let bias = bias.then(|| {
                        slots.push(bias_slot(i, out_channels));
                        slots.len() - 1
                    });
                    steps.push(Step::Conv {
                        weight,
                        bias,
                        stride,
                        padding,
                    });
                    shape = vec![out_channels, oh, ow];
                    if i != last_weight {
                        pending_activation = Some(i);
                    }
                }
                LayerSpec::Dense { out_features, bias } => {
                    activate(&mut steps, &mut pending_activation);
                    if shape.len() != 1 {
                        steps.push(Step::Flatten);
                        shape = vec![shape.iter().product()];
                    }
                    let fan_in = shape[0];
                    let weight = slots.len();
                    slots.push(ParamSlot {
                        name: format!("layer{i}.weight"),
                        layer: i,
                        kind: ParamKind::Weight,
                        shape: vec![fan_in, out_features],
                        fan_in,
                        prunable,
                    });
                    let bias = bias.then(|| {
                        slots.push(bias_slot(i, out_features));
                        slots.len() - 1
                    });
                    steps.push(Step::Dense { weight, bias });
                    shape = vec![out_features];
                    if i != last_weight {
                        pending_activation = Some(i);
                    }
                }
                LayerSpec::Pool { window } => {
                    activate(&mut steps, &mut pending_activation);
                    if shape.len() != 3 || window == 0 || shape[1] % window != 0 || shape[2] % window != 0 {
                        return Err(Error::Config(format!(
                            "layer {i}: pooling window {window} does not tile {shape:?}"
                        )));
                    }
                    steps.push(Step::Pool(window));
                    shape = vec![shape[0], shape[1] / window, shape[2] / window];
                }
                LayerSpec::Norm => {
                    let channels = shape[0];
                    slots.push(ParamSlot {
                        name: format!("layer{i}.scale"),
                        layer: i,
                        kind: ParamKind::Scale,
                        shape: vec![channels],
                        fan_in: 1,
                        prunable: false,
                    });
                    slots.push(ParamSlot {
                        name: format!("layer{i}.shift"),
                        layer: i,
                        kind: ParamKind::Shift,
                        shape: vec![channels],
                        fan_in: 1,
                        prunable: false,
                    });
                    steps.push(Step::Norm {
                        scale: slots.len() - 2,
                        shift: slots.len() - 1,
                    });
                }
            }
        }
        if pending_activation.is_some() {
            unreachable!("the last weight layer never schedules an activation");
        }
        if shape != [self.num_classes] {
            return Err(Error::Config(format!(
                "network output {shape:?} does not match {} classes",
                self.num_classes
            )));
        }
        Ok(Plan {
            steps,
            slots,
            sites,
        })
    }

    /// Randomly initialised parameters: Kaiming-normal weights scaled by
    /// `gain`, zero biases and shifts, unit scales.
    pub fn init_params(&self, seed: u64, gain: f32) -> Result<ParameterSet> {
        let plan = self.plan()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = plan
            .slots
            .iter()
            .map(|slot| {
                let n: usize = slot.shape.iter().product();
                let data = match slot.kind {
                    ParamKind::Weight => {
                        let std = gain * (2.0 / slot.fan_in as f32).sqrt();
                        let normal = Normal::new(0.0f32, std).expect("positive std");
                        (0..n).map(|_| normal.sample(&mut rng)).collect()
                    }
                    ParamKind::Scale => vec![1.0; n],
                    ParamKind::Bias | ParamKind::Shift => vec![0.0; n],
                };
                Parameter {
                    name: slot.name.clone(),
                    layer: slot.layer,
                    kind: slot.kind,
                    prunable: slot.prunable,
                    value: NumArray::new(slot.shape.clone(), data).expect("slot shape"),
                }
            })
            .collect();
        Ok(ParameterSet::new(params))
    }

    /// Confirms `params` has exactly the tensors this network expects.
    pub fn check_params(&self, params: &ParameterSet) -> Result<()> {
        let plan = self.plan()?;
        let mut diffs = Vec::new();
        if plan.slots.len() != params.len() {
            diffs.push(format!(
                "expected {} tensors, found {}",
                plan.slots.len(),
                params.len()
            ));
        }
        for (slot, p) in plan.slots.iter().zip(params) {
            if slot.name != p.name || slot.shape != p.value.shape() || slot.prunable != p.prunable {
                diffs.push(format!(
                    "{} {:?} vs {} {:?}",
                    slot.name,
                    slot.shape,
                    p.name,
                    p.value.shape()
                ));
            }
        }
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(Error::Architecture(diffs))
        }
    }

    /// Number of spiking (or ReLU) layers.
    pub fn activation_sites(&self) -> Result<usize> {
        Ok(self.plan()?.sites)
    }
}

fn bias_slot(layer: usize, n: usize) -> ParamSlot {
    ParamSlot {
        name: format!("layer{layer}.bias"),
        layer,
        kind: ParamKind::Bias,
        shape: vec![n],
        fan_in: 1,
        prunable: false,
    }
}

/// Parameters placed on a tape: the leaves and the masked weights used by the forward pass.
pub(crate) struct Bound {
    pub leaves: Vec<Var>,
    pub effective: Vec<Var>,
}

/// Which parameters get trainable leaves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Grads {
    None,
    PrunableOnly,
    All,
}

pub(crate) fn bind(
    tape: &mut Tape,
    params: &ParameterSet,
    mask: Option<&BinaryMask>,
    grads: Grads,
) -> Result<Bound> {
    if let Some(m) = mask {
        m.check_congruent(params)?;
    }
    let mut mask_layers = mask.map(|m| m.layers().iter());
    let mut leaves = Vec::with_capacity(params.len());
    let mut effective = Vec::with_capacity(params.len());
    for p in params {
        let trainable = match grads {
            Grads::None => false,
            Grads::PrunableOnly => p.prunable,
            Grads::All => true,
        };
        let leaf = if trainable {
            tape.param(p.value.clone())
        } else {
            tape.constant(p.value.clone())
        };
        leaves.push(leaf);
        let eff = match (p.prunable, mask_layers.as_mut()) {
            (true, Some(it)) => {
                let layer = it.next().expect("congruence checked");
                if layer.keep().iter().all(|&k| k) {
                    leaf
                } else {
                    let m = tape.constant(layer.to_array());
                    tape.mul(leaf, m)?
                }
            }
            _ => leaf,
        };
        effective.push(eff);
    }
    Ok(Bound { leaves, effective })
}

/// Output of a forward pass recorded on a tape.
pub(crate) struct Traced {
    /// Output-layer values at each timestep.
    pub step_outputs: Vec<Var>,
    /// Running sums of `step_outputs`; entry `t-1` holds the sum over steps `1..=t`.
    pub accumulated: Vec<Var>,
    /// Spike events per spiking layer, summed over the batch and all timesteps.
    pub spikes_per_site: Vec<f64>,
}

fn apply_weight_step(tape: &mut Tape, step: &Step, h: Var, bound: &Bound) -> Result<Var> {
    Ok(match *step {
        Step::Conv {
            weight,
            bias,
            stride,
            padding,
        } => {
            let y = tape.conv2d(h, bound.effective[weight], stride, padding)?;
            match bias {
                Some(b) => tape.add_bias(y, bound.effective[b])?,
                None => y,
            }
        }
        Step::Dense { weight, bias } => {
            let y = tape.matmul(h, bound.effective[weight])?;
            match bias {
                Some(b) => tape.add_bias(y, bound.effective[b])?,
                None => y,
            }
        }
        Step::Norm { scale, shift } => {
            tape.channel_affine(h, bound.effective[scale], bound.effective[shift])?
        }
        Step::Pool(k) => tape.avg_pool2d(h, k)?,
        Step::Flatten => {
            let s = tape.value(h).shape().to_vec();
            let flat: usize = s[1..].iter().product();
            tape.reshape(h, &[s[0], flat])?
        }
        Step::Activate { .. } => unreachable!("activations are handled by the caller"),
    })
}

/// Unrolled spiking forward over `timesteps` steps.
pub(crate) fn trace_snn(
    tape: &mut Tape,
    plan: &Plan,
    lif: &LifParams,
    bound: &Bound,
    input: Var,
    timesteps: usize,
    spike_fn: SpikeFn,
) -> Result<Traced> {
    let mut membranes: Vec<Option<Var>> = vec![None; plan.sites];
    let mut spikes_per_site = vec![0.0f64; plan.sites];
    let mut step_outputs = Vec::with_capacity(timesteps);
    let mut accumulated: Vec<Var> = Vec::with_capacity(timesteps);
    for t in 0..timesteps {
        let mut h = input;
        for step in &plan.steps {
            h = match *step {
                Step::Activate { site, layer } => {
                    let u = match membranes[site] {
                        None => h,
                        Some(prev) => {
                            let leaked = tape.scalar_affine(prev, lif.leak, 0.0);
                            tape.add(leaked, h)?
                        }
                    };
                    if tape.value(u).has_nan() {
                        return Err(Error::NumericFault {
                            layer,
                            timestep: t + 1,
                        });
                    }
                    let s = tape.spike(u, lif.threshold, lif.surrogate_width, spike_fn);
                    spikes_per_site[site] += tape.value(s).data().iter().map(|&v| v as f64).sum::<f64>();
                    let next = match lif.reset_mode {
                        ResetMode::HardZero => {
                            let keep = tape.scalar_affine(s, -1.0, 1.0);
                            tape.mul(u, keep)?
                        }
                        ResetMode::SubtractThreshold => {
                            let drop = tape.scalar_affine(s, -lif.threshold, 0.0);
                            tape.add(u, drop)?
                        }
                    };
                    membranes[site] = Some(next);
                    s
                }
                ref other => apply_weight_step(tape, other, h, bound)?,
            };
        }
        step_outputs.push(h);
        let acc = match accumulated.last() {
            None => h,
            Some(&prev) => tape.add(prev, h)?,
        };
        accumulated.push(acc);
    }
    Ok(Traced {
        step_outputs,
        accumulated,
        spikes_per_site,
    })
}

/// Single-pass ReLU forward.
pub(crate) fn trace_ann(tape: &mut Tape, plan: &Plan, bound: &Bound, input: Var) -> Result<Var> {
    let mut h = input;
    for step in &plan.steps {
        h = match step {
            Step::Activate { .. } => tape.relu(h),
            other => apply_weight_step(tape, other, h, bound)?,
        };
    }
    Ok(h)
}

/// Class-probability predictions from prefix-accumulated outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct TimestepPrediction {
    /// `probs[i]` is `P_{i+2}`: softmax of outputs accumulated over steps `1..=i+2`, shape `[N, classes]`.
    probs: Vec<NumArray>,
    /// Accumulated output-layer values at the final timestep, shape `[N, classes]`.
    pub logits: NumArray,
    pub timesteps: usize,
}

impl TimestepPrediction {
    pub(crate) fn from_accumulated(accumulated: &[NumArray]) -> Result<Self> {
        let timesteps = accumulated.len();
        let logits = accumulated
            .last()
            .cloned()
            .ok_or_else(|| Error::Config("no timesteps".into()))?;
        let probs = accumulated
            .iter()
            .skip(1)
            .map(|acc| {
                let classes = acc.shape()[1];
                let data: Vec<f32> = acc.data().chunks(classes).flat_map(softmax).collect();
                NumArray::new(acc.shape().to_vec(), data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            probs,
            logits,
            timesteps,
        })
    }

    /// `P_t` for `t` in `2..=timesteps`.
    pub fn at(&self, t: usize) -> Option<&NumArray> {
        t.checked_sub(2).and_then(|i| self.probs.get(i))
    }

    pub fn batch_size(&self) -> usize {
        self.logits.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.logits.shape()[1]
    }
}

/// Full result of an inference-only spiking forward.
#[derive(Clone, Debug)]
pub struct SnnOutput {
    pub prediction: TimestepPrediction,
    /// Output-layer values at each timestep, `[N, classes]` each.
    pub step_outputs: Vec<NumArray>,
    pub spikes_per_layer: Vec<f64>,
}

/// Runs the spiking network on `batch` for `timesteps` steps with effective
/// weights `params ⊙ mask`.
pub fn forward_snn(
    spec: &NetworkSpec,
    params: &ParameterSet,
    mask: Option<&BinaryMask>,
    batch: &NumArray,
    timesteps: usize,
) -> Result<SnnOutput> {
    if spec.neuron != NeuronMode::Lif {
        return Err(Error::Mode("spiking forward requires LIF neurons".into()));
    }
    if timesteps < 2 {
        return Err(Error::Config(format!(
            "LIF forward needs at least 2 timesteps, got {timesteps}"
        )));
    }
    let plan = spec.plan()?;
    spec.check_params(params)?;
    check_input(spec, batch)?;
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params, mask, Grads::None)?;
    let x = tape.constant(batch.clone());
    let traced = trace_snn(&mut tape, &plan, &spec.lif, &bound, x, timesteps, SpikeFn::Heaviside)?;
    let accumulated: Vec<NumArray> = traced
        .accumulated
        .iter()
        .map(|&v| tape.value(v).clone())
        .collect();
    Ok(SnnOutput {
        prediction: TimestepPrediction::from_accumulated(&accumulated)?,
        step_outputs: traced
            .step_outputs
            .iter()
            .map(|&v| tape.value(v).clone())
            .collect(),
        spikes_per_layer: traced.spikes_per_site,
    })
}

/// ReLU forward producing logits `[N, classes]`.
pub fn forward_ann(
    spec: &NetworkSpec,
    params: &ParameterSet,
    mask: Option<&BinaryMask>,
    batch: &NumArray,
) -> Result<NumArray> {
    if spec.neuron != NeuronMode::Relu {
        return Err(Error::Mode("ANN forward requires ReLU neurons".into()));
    }
    let plan = spec.plan()?;
    spec.check_params(params)?;
    check_input(spec, batch)?;
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params, mask, Grads::None)?;
    let x = tape.constant(batch.clone());
    let out = trace_ann(&mut tape, &plan, &bound, x)?;
    Ok(tape.value(out).clone())
}

/// Mean cross-entropy on the accumulated output and its gradient for every
/// parameter (effective weights masked). `spike_fn` picks the binary spike
/// with surrogate backward or its smooth integral.
pub fn loss_gradients(
    spec: &NetworkSpec,
    params: &ParameterSet,
    mask: Option<&BinaryMask>,
    batch: &NumArray,
    labels: &[usize],
    timesteps: usize,
    spike_fn: SpikeFn,
) -> Result<(f32, ParameterSet)> {
    let plan = spec.plan()?;
    spec.check_params(params)?;
    check_input(spec, batch)?;
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params, mask, Grads::All)?;
    let x = tape.constant(batch.clone());
    let logits = match spec.neuron {
        NeuronMode::Lif => {
            let traced = trace_snn(&mut tape, &plan, &spec.lif, &bound, x, timesteps, spike_fn)?;
            *traced.accumulated.last().expect("timesteps >= 1")
        }
        NeuronMode::Relu => trace_ann(&mut tape, &plan, &bound, x)?,
    };
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    tape.backward(loss)?;
    let mut grads = params.zeros_like();
    for (g, &leaf) in grads.iter_mut().zip(&bound.leaves) {
        if let Some(d) = tape.grad(leaf) {
            g.value.data_mut().copy_from_slice(d);
        }
    }
    Ok((tape.value(loss).data()[0], grads))
}

pub(crate) fn check_input(spec: &NetworkSpec, batch: &NumArray) -> Result<()> {
    let s = batch.shape();
    if s.len() != 4 || s[1..] != spec.input_shape {
        return Err(Error::Dimension {
            lhs: s.to_vec(),
            rhs: spec.input_shape.to_vec(),
            context: "input batch vs network input shape",
        });
    }
    if s[0] == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    Ok(())
}

/// Forward that returns final logits for either neuron mode, on an existing tape.
pub(crate) fn trace_logits(
    tape: &mut Tape,
    spec: &NetworkSpec,
    plan: &Plan,
    bound: &Bound,
    input: Var,
    timesteps: usize,
) -> Result<(Var, Vec<f64>)> {
    match spec.neuron {
        NeuronMode::Lif => {
            let traced = trace_snn(tape, plan, &spec.lif, bound, input, timesteps, SpikeFn::Heaviside)?;
            Ok((*traced.accumulated.last().expect("timesteps >= 1"), traced.spikes_per_site))
        }
        NeuronMode::Relu => Ok((trace_ann(tape, plan, bound, input)?, Vec::new())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::snn::lif::{lif_step, SpikingState};

    pub(crate) fn tiny_spec(neuron: NeuronMode) -> NetworkSpec {
        NetworkSpec {
            input_shape: [1, 4, 4],
            num_classes: 3,
            layers: vec![
                LayerSpec::Conv2d {
                    out_channels: 2,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                    bias: false,
                },
                LayerSpec::Norm,
                LayerSpec::Pool { window: 2 },
                LayerSpec::Dense {
                    out_features: 5,
                    bias: true,
                },
                LayerSpec::Dense {
                    out_features: 3,
                    bias: true,
                },
            ],
            neuron,
            timesteps: 4,
            lif: LifParams::default(),
            exempt_first_last: false,
        }
    }

    fn batch(n: usize, seed: u64) -> NumArray {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        NumArray::new(vec![n, 1, 4, 4], (0..n * 16).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn plan_inserts_activations_after_norm_and_not_after_classifier() {
        let plan = tiny_spec(NeuronMode::Lif).plan().unwrap();
        let kinds: Vec<&str> = plan
            .steps
            .iter()
            .map(|s| match s {
                Step::Conv { .. } => "conv",
                Step::Flatten => "flat",
                Step::Dense { .. } => "dense",
                Step::Norm { .. } => "norm",
                Step::Pool(_) => "pool",
                Step::Activate { .. } => "act",
            })
            .collect();
        assert_eq!(kinds, ["conv", "norm", "act", "pool", "flat", "dense", "act", "dense"]);
        assert_eq!(plan.sites, 2);
    }

    #[test]
    fn mismatched_classes_rejected() {
        let mut spec = tiny_spec(NeuronMode::Lif);
        spec.num_classes = 4;
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn lif_needs_two_timesteps() {
        let mut spec = tiny_spec(NeuronMode::Lif);
        spec.timesteps = 1;
        assert!(spec.validate().is_err());
        let spec = tiny_spec(NeuronMode::Lif);
        let params = spec.init_params(0, 1.0).unwrap();
        assert!(matches!(
            forward_snn(&spec, &params, None, &batch(2, 0), 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn exempt_first_last_marks_them_unprunable() {
        let mut spec = tiny_spec(NeuronMode::Lif);
        spec.exempt_first_last = true;
        let params = spec.init_params(0, 1.0).unwrap();
        let prunable: Vec<_> = params.prunable().map(|p| p.name.as_str()).collect();
        assert_eq!(prunable, ["layer3.weight"]);
    }

    #[test]
    fn zero_weights_give_uniform_predictions() {
        let spec = tiny_spec(NeuronMode::Lif);
        let mut params = spec.init_params(1, 1.0).unwrap();
        for p in params.prunable_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let out = forward_snn(&spec, &params, None, &batch(3, 2), 4).unwrap();
        for t in 2..=4 {
            for &p in out.prediction.at(t).unwrap().data() {
                assert!((p - 1.0 / 3.0).abs() < 1e-6);
            }
        }
        assert!(out.prediction.at(1).is_none());
        assert!(out.prediction.at(5).is_none());
    }

    #[test]
    fn all_ones_mask_matches_unmasked() {
        let spec = tiny_spec(NeuronMode::Lif);
        let params = spec.init_params(3, 2.0).unwrap();
        let mask = BinaryMask::ones_for(&params);
        let x = batch(4, 5);
        let a = forward_snn(&spec, &params, None, &x, 4).unwrap();
        let b = forward_snn(&spec, &params, Some(&mask), &x, 4).unwrap();
        assert_eq!(a.prediction, b.prediction);
    }

    #[test]
    fn probabilities_are_normalised() {
        let spec = tiny_spec(NeuronMode::Lif);
        let params = spec.init_params(4, 2.0).unwrap();
        let out = forward_snn(&spec, &params, None, &batch(5, 6), 4).unwrap();
        for t in 2..=4 {
            for row in out.prediction.at(t).unwrap().data().chunks(3) {
                assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
                assert!(row.iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn ann_mode_checks() {
        let spec = tiny_spec(NeuronMode::Relu);
        let params = spec.init_params(0, 1.0).unwrap();
        assert!(matches!(
            forward_snn(&spec, &params, None, &batch(1, 0), 4),
            Err(Error::Mode(_))
        ));
        let lif = tiny_spec(NeuronMode::Lif);
        assert!(matches!(
            forward_ann(&lif, &params, None, &batch(1, 0)),
            Err(Error::Mode(_))
        ));
        // zero input, zero bias -> zero logits
        let zeros = NumArray::zeros(&[2, 1, 4, 4]);
        let logits = forward_ann(&spec, &params, None, &zeros).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_clamps_negative_preactivations() {
        // One hidden dense layer with all-negative weights on positive input.
        let spec = NetworkSpec {
            input_shape: [1, 2, 2],
            num_classes: 2,
            layers: vec![
                LayerSpec::Dense { out_features: 3, bias: false },
                LayerSpec::Dense { out_features: 2, bias: false },
            ],
            neuron: NeuronMode::Relu,
            timesteps: 1,
            lif: LifParams::default(),
            exempt_first_last: false,
        };
        let mut params = spec.init_params(0, 1.0).unwrap();
        params
            .get_mut("layer0.weight")
            .unwrap()
            .value
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = -v.abs() - 0.1);
        let x = NumArray::filled(&[1, 1, 2, 2], 0.5);
        let logits = forward_ann(&spec, &params, None, &x).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ann_and_snn_differ_on_random_net() {
        let lif = tiny_spec(NeuronMode::Lif);
        let relu = lif.with_neuron(NeuronMode::Relu);
        let params = lif.init_params(9, 2.0).unwrap();
        let x = batch(3, 1);
        let snn = forward_snn(&lif, &params, None, &x, 4).unwrap();
        let ann = forward_ann(&relu, &params, None, &x).unwrap();
        assert_ne!(snn.prediction.logits.data(), ann.data());
    }

    #[test]
    fn accumulated_logits_equal_sum_of_step_outputs() {
        let spec = tiny_spec(NeuronMode::Lif);
        let params = spec.init_params(11, 2.5).unwrap();
        let out = forward_snn(&spec, &params, None, &batch(6, 3), 4).unwrap();
        let mut running = vec![0.0f32; out.prediction.logits.len()];
        for step in &out.step_outputs {
            running.iter_mut().zip(step.data()).for_each(|(a, b)| *a += b);
        }
        assert_eq!(running.as_slice(), out.prediction.logits.data());
    }

    /// Independent re-simulation of a dense-only LIF net with `lif_step`.
    #[test]
    fn taped_dynamics_match_lif_step() {
        let spec = NetworkSpec {
            input_shape: [1, 2, 3],
            num_classes: 2,
            layers: vec![
                LayerSpec::Dense { out_features: 4, bias: true },
                LayerSpec::Dense { out_features: 2, bias: false },
            ],
            neuron: NeuronMode::Lif,
            timesteps: 5,
            lif: LifParams::default(),
            exempt_first_last: false,
        };
        let params = spec.init_params(21, 3.0).unwrap();
        let x = NumArray::new(vec![1, 1, 2, 3], vec![0.2, 0.9, 0.4, 0.7, 0.1, 0.5]).unwrap();
        let out = forward_snn(&spec, &params, None, &x, 5).unwrap();

        let w0 = params.get("layer0.weight").unwrap().value.data();
        let b0 = params.get("layer0.bias").unwrap().value.data();
        let w1 = params.get("layer1.weight").unwrap().value.data();
        let mut current = vec![0.0f32; 4];
        for (o, c) in current.iter_mut().enumerate() {
            *c = (0..6).map(|i| x.data()[i] * w0[i * 4 + o]).sum::<f32>() + b0[o];
        }
        let current = NumArray::new(vec![4], current).unwrap();
        let mut state = SpikingState::new(0, &[4]);
        let mut total_spikes = 0.0;
        for (t, step_out) in out.step_outputs.iter().enumerate() {
            let (s, next) = lif_step(&current, &state, &spec.lif).unwrap();
            state = next;
            total_spikes += s.sum() as f64;
            for o in 0..2 {
                let expect: f32 = (0..4).map(|i| s.data()[i] * w1[i * 2 + o]).sum();
                assert!((expect - step_out.data()[o]).abs() < 1e-5, "t={t} o={o}");
            }
        }
        assert_eq!(total_spikes, out.spikes_per_layer[0]);
    }
}
