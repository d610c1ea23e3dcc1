//! The classifier (`SmallNet`) and the augmentation network (`AugNet`).
//!
//! SmallNet, in order:
//!
//! 1. conv 3×3, 16 filters, ReLU
//! 2. batch normalization
//! 3. max pool 2×2, stride 2
//! 4. conv 3×3, 32 filters, ReLU
//! 5. conv 3×3, 32 filters, ReLU
//! 6. batch normalization
//! 7. max pool 2×2, stride 2
//! 8. dense 1024, dropout
//! 9. dense 2
//!
//! AugNet maps a channel-concatenated image pair `[N, H, W, 2C]` to one
//! image `[N, H, W, C]` with four 16-filter conv+ReLU layers and a final
//! C-filter conv without activation. All convolutions use `same` padding.

use std::collections::HashMap;
use std::path::Path;

use rand::RngCore;

use crate::autograd::{Tape, Var};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::layers::{self, BatchNormState, Mode, Padding};
use crate::seed;
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 2;

/// Image extents `(H, W, C)` a model is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InputSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl InputSpec {
    pub fn new(height: usize, width: usize, channels: usize) -> Result<Self> {
        if height == 0 || width == 0 || !height.is_multiple_of(4) || !width.is_multiple_of(4) {
            return Err(Error::InvalidArgument(format!(
                "image extents {height}×{width} must be positive multiples of 4"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "images must have 1 or 3 channels, got {channels}"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    /// Features entering the first dense layer after two 2×2 poolings.
    pub fn flat_features(&self) -> usize {
        (self.height / 4) * (self.width / 4) * 32
    }
}

/// Hyperparameters that the architecture listing leaves open.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub dropout: f64,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
    pub hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dropout: 0.5,
            bn_momentum: 0.9,
            bn_epsilon: 1e-5,
            hidden: 1024,
        }
    }
}

/// Ordered, named trainable tensors of one network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, value: Tensor) {
        self.names.push(name.into());
        self.values.push(value);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.values[i])
    }

    /// Total number of scalar parameters.
    pub fn element_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Registers every parameter as a differentiable leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.values.iter().map(|v| tape.leaf(v.clone())).collect()
    }

    fn replace(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Data(format!("unknown parameter {name}")))?;
        if self.values[i].shape() != value.shape() {
            return Err(Error::shape(format!(
                "{name}: checkpoint {:?} vs model {:?}",
                value.shape(),
                self.values[i].shape()
            )));
        }
        self.values[i] = value;
        Ok(())
    }
}

mod idx {
    pub const CONV1_K: usize = 0;
    pub const CONV1_B: usize = 1;
    pub const BN1_G: usize = 2;
    pub const BN1_B: usize = 3;
    pub const CONV2_K: usize = 4;
    pub const CONV2_B: usize = 5;
    pub const CONV3_K: usize = 6;
    pub const CONV3_B: usize = 7;
    pub const BN2_G: usize = 8;
    pub const BN2_B: usize = 9;
    pub const FC1_W: usize = 10;
    pub const FC1_B: usize = 11;
    pub const FC2_W: usize = 12;
    pub const FC2_B: usize = 13;
}

fn push_conv(p: &mut ParamSet, name: &str, cin: usize, cout: usize, rng: &mut dyn RngCore) {
    p.push(
        format!("{name}.kernel"),
        layers::he_normal(&[3, 3, cin, cout], 9 * cin, rng),
    );
    p.push(format!("{name}.bias"), Tensor::zeros(&[cout]));
}

enum BnStats<'a> {
    Update(&'a mut [BatchNormState; 2]),
    Fixed(&'a [BatchNormState; 2]),
}

impl BnStats<'_> {
    fn apply<'t>(
        &mut self,
        layer: usize,
        x: Var<'t>,
        gamma: Var<'t>,
        beta: Var<'t>,
    ) -> Result<Var<'t>> {
        match self {
            BnStats::Update(s) => layers::batchnorm_train(x, gamma, beta, &mut s[layer]),
            BnStats::Fixed(s) => layers::batchnorm_eval(x, gamma, beta, &s[layer]),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SmallNet {
    spec: InputSpec,
    config: ModelConfig,
    params: ParamSet,
    bn: [BatchNormState; 2],
}

impl SmallNet {
    pub fn new(spec: InputSpec, config: ModelConfig, rng: &mut dyn RngCore) -> Result<Self> {
        let c = spec.channels;
        let mut p = ParamSet::default();
        push_conv(&mut p, "conv1", c, 16, rng);
        p.push("bn1.gamma", Tensor::ones(&[16]));
        p.push("bn1.beta", Tensor::zeros(&[16]));
        push_conv(&mut p, "conv2", 16, 32, rng);
        push_conv(&mut p, "conv3", 32, 32, rng);
        p.push("bn2.gamma", Tensor::ones(&[32]));
        p.push("bn2.beta", Tensor::zeros(&[32]));
        let flat = spec.flat_features();
        p.push("fc1.weight", layers::he_normal(&[flat, config.hidden], flat, rng));
        p.push("fc1.bias", Tensor::zeros(&[config.hidden]));
        p.push(
            "fc2.weight",
            layers::he_normal(&[config.hidden, NUM_CLASSES], config.hidden, rng),
        );
        p.push("fc2.bias", Tensor::zeros(&[NUM_CLASSES]));
        let bn = [
            BatchNormState::new(16, config.bn_momentum, config.bn_epsilon)?,
            BatchNormState::new(32, config.bn_momentum, config.bn_epsilon)?,
        ];
        Ok(Self {
            spec,
            config,
            params: p,
            bn,
        })
    }

    pub fn spec(&self) -> InputSpec {
        self.spec
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn batchnorm_states(&self) -> &[BatchNormState; 2] {
        &self.bn
    }

    /// Class scores `[N, 2]`. In train mode dropout is active and batch
    /// normalization uses (and updates) batch statistics.
    pub fn forward<'t>(
        &mut self,
        vars: &[Var<'t>],
        x: Var<'t>,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<Var<'t>> {
        self.forward_with(vars, x, mode, mode, rng)
    }

    /// Like [`SmallNet::forward`] with independent dropout and
    /// batch-normalization modes.
    pub fn forward_with<'t>(
        &mut self,
        vars: &[Var<'t>],
        x: Var<'t>,
        dropout_mode: Mode,
        bn_mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<Var<'t>> {
        let bn = match bn_mode {
            Mode::Train => BnStats::Update(&mut self.bn),
            Mode::Eval => BnStats::Fixed(&self.bn),
        };
        forward_smallnet(
            &self.spec,
            &self.config,
            vars,
            x,
            dropout_mode,
            bn,
            rng,
        )
    }

    /// Eval-mode scores without gradient tracking.
    pub fn scores(&self, batch: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = self
            .params
            .values()
            .iter()
            .map(|v| tape.constant(v.clone()))
            .collect();
        let x = tape.constant(batch.clone());
        let mut no_rng = <seed::RunRng as rand::SeedableRng>::seed_from_u64(0);
        let y = forward_smallnet(
            &self.spec,
            &self.config,
            &vars,
            x,
            Mode::Eval,
            BnStats::Fixed(&self.bn),
            &mut no_rng,
        )?;
        Ok(y.value())
    }

    /// Parameters followed by batch-normalization running statistics.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .params
            .names()
            .iter()
            .cloned()
            .zip(self.params.values().iter().cloned())
            .collect();
        for (i, s) in self.bn.iter().enumerate() {
            out.push((format!("bn{}.running_mean", i + 1), s.running_mean.clone()));
            out.push((format!("bn{}.running_var", i + 1), s.running_var.clone()));
        }
        out
    }

    pub fn load_named(&mut self, entries: &HashMap<String, Tensor>) -> Result<()> {
        for name in self.params.names().to_vec() {
            let t = entries
                .get(&name)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks {name}")))?;
            self.params.replace(&name, t.clone())?;
        }
        for (i, s) in self.bn.iter_mut().enumerate() {
            for (suffix, slot) in [
                ("running_mean", &mut s.running_mean),
                ("running_var", &mut s.running_var),
            ] {
                let name = format!("bn{}.{suffix}", i + 1);
                let t = entries
                    .get(&name)
                    .ok_or_else(|| Error::Data(format!("checkpoint lacks {name}")))?;
                if t.shape() != slot.shape() {
                    return Err(Error::shape(format!("{name}: {:?}", t.shape())));
                }
                *slot = t.clone();
            }
        }
        Ok(())
    }
}

fn forward_smallnet<'t>(
    spec: &InputSpec,
    config: &ModelConfig,
    v: &[Var<'t>],
    x: Var<'t>,
    dropout_mode: Mode,
    mut bn: BnStats<'_>,
    rng: &mut dyn RngCore,
) -> Result<Var<'t>> {
    use idx::*;
    let shape = x.shape();
    if shape.len() != 4 || shape[1..] != spec.shape() {
        return Err(Error::shape(format!(
            "SmallNet built for {:?}, got batch {shape:?}",
            spec.shape()
        )));
    }
    let h = layers::conv2d(x, v[CONV1_K], v[CONV1_B], Padding::Same)?.relu()?;
    let h = bn.apply(0, h, v[BN1_G], v[BN1_B])?;
    let h = layers::maxpool2d(h)?;
    let h = layers::conv2d(h, v[CONV2_K], v[CONV2_B], Padding::Same)?.relu()?;
    let h = layers::conv2d(h, v[CONV3_K], v[CONV3_B], Padding::Same)?.relu()?;
    let h = bn.apply(1, h, v[BN2_G], v[BN2_B])?;
    let h = layers::maxpool2d(h)?;
    let h = layers::flatten(h)?;
    let h = layers::dense(h, v[FC1_W], v[FC1_B])?;
    let h = layers::dropout(h, config.dropout, dropout_mode, rng)?;
    layers::dense(h, v[FC2_W], v[FC2_B])
}

#[derive(Clone, Debug)]
pub struct AugNet {
    channels: usize,
    params: ParamSet,
}

impl AugNet {
    const WIDTH: usize = 16;
    const LAYERS: usize = 5;

    pub fn new(channels: usize, rng: &mut dyn RngCore) -> Self {
        let mut p = ParamSet::default();
        let mut cin = 2 * channels;
        for i in 0..Self::LAYERS {
            let cout = if i + 1 == Self::LAYERS {
                channels
            } else {
                Self::WIDTH
            };
            push_conv(&mut p, &format!("conv{}", i + 1), cin, cout, rng);
            cin = cout;
        }
        Self {
            channels,
            params: p,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Augmented images `[N, H, W, C]` from pairs `[N, H, W, 2C]`.
    pub fn forward<'t>(&self, vars: &[Var<'t>], pair: Var<'t>) -> Result<Var<'t>> {
        let shape = pair.shape();
        if shape.len() != 4 || shape[3] != 2 * self.channels {
            return Err(Error::shape(format!(
                "AugNet expects [N, H, W, {}], got {shape:?}",
                2 * self.channels
            )));
        }
        let mut h = pair;
        for layer in 0..Self::LAYERS {
            h = layers::conv2d(h, vars[2 * layer], vars[2 * layer + 1], Padding::Same)?;
            if layer + 1 < Self::LAYERS {
                h = h.relu()?;
            }
        }
        Ok(h)
    }

    /// Forward pass without gradient tracking.
    pub fn augment(&self, pairs: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = self
            .params
            .values()
            .iter()
            .map(|v| tape.constant(v.clone()))
            .collect();
        Ok(self.forward(&vars, tape.constant(pairs.clone()))?.value())
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params
            .names()
            .iter()
            .cloned()
            .zip(self.params.values().iter().cloned())
            .collect()
    }

    pub fn load_named(&mut self, entries: &HashMap<String, Tensor>) -> Result<()> {
        for name in self.params.names().to_vec() {
            let t = entries
                .get(&name)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks {name}")))?;
            self.params.replace(&name, t.clone())?;
        }
        Ok(())
    }
}

/// Both networks for one input spec, initialized from `seed`.
pub fn build_models(
    spec: InputSpec,
    config: ModelConfig,
    run_seed: u64,
) -> Result<(SmallNet, AugNet)> {
    let mut rng = seed::rng(run_seed, seed::stream::SMALLNET_INIT);
    let smallnet = SmallNet::new(spec, config, &mut rng)?;
    let mut rng = seed::rng(run_seed, seed::stream::AUGNET_INIT);
    let augnet = AugNet::new(spec.channels, &mut rng);
    Ok((smallnet, augnet))
}

/// Writes both networks to one checkpoint, names prefixed `smallnet.` and
/// `augnet.`.
pub fn save_checkpoint(path: &Path, smallnet: &SmallNet, augnet: Option<&AugNet>) -> Result<()> {
    let mut entries: Vec<(String, Tensor)> = smallnet
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (format!("smallnet.{n}"), t))
        .collect();
    if let Some(a) = augnet {
        entries.extend(
            a.named_tensors()
                .into_iter()
                .map(|(n, t)| (format!("augnet.{n}"), t)),
        );
    }
    checkpoint::save(path, checkpoint::MODEL_MAGIC, &entries)
}

/// Restores parameters written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path, smallnet: &mut SmallNet, augnet: Option<&mut AugNet>) -> Result<()> {
    let entries = checkpoint::load(path, checkpoint::MODEL_MAGIC)?;
    let strip = |prefix: &str| -> HashMap<String, Tensor> {
        entries
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect()
    };
    smallnet.load_named(&strip("smallnet."))?;
    if let Some(a) = augnet {
        a.load_named(&strip("augnet."))?;
    }
    Ok(())
}
