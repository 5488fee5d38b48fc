//! The feature extractor `f`, the two score heads whose dot product
//! scores (clean, adversarial) representation pairs, and parameter files.

mod io;

pub use io::{decode_bundle, encode_bundle, load_params, save_params, ModelBundle, MODEL_MAGIC};

use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Gradients, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn relu(input: usize, output: usize) -> Self {
        Self {
            input,
            output,
            activation: Activation::Relu,
        }
    }

    pub fn linear(input: usize, output: usize) -> Self {
        Self {
            input,
            output,
            activation: Activation::Identity,
        }
    }
}

fn validate_chain(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::Model("network has no layers".into()));
    }
    for (i, s) in specs.iter().enumerate() {
        if s.input == 0 || s.output == 0 {
            return Err(Error::Model(format!("layer {i} has zero width")));
        }
        if i > 0 && specs[i - 1].output != s.input {
            return Err(Error::Model(format!(
                "layer {i} expects width {} but layer {} produces {}",
                s.input,
                i - 1,
                specs[i - 1].output
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
struct Linear {
    weight: Arc<Tensor>,
    bias: Arc<Tensor>,
}

/// Fully connected stack. Weights are `[input, output]`, so a batch
/// `[n, input]` maps to `[n, output]` by `x W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    specs: Vec<LayerSpec>,
    layers: Vec<Linear>,
}

/// Tape handles for one binding of an [`Mlp`]'s parameters.
#[derive(Debug, Clone)]
pub struct BoundMlp {
    vars: Vec<(Var, Var)>,
}

impl BoundMlp {
    /// Parameter handles in the same order as [`Mlp::params`].
    pub fn vars(&self) -> Vec<Var> {
        self.vars.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn init(specs: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        validate_chain(&specs)?;
        let layers = specs
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut r = rng::from_seed(rng::derive(seed, &[i as u64]));
                let bound = (6.0 / (s.input + s.output) as f64).sqrt();
                let w: Vec<f64> = (0..s.input * s.output)
                    .map(|_| r.gen_range(-bound..bound))
                    .collect();
                Linear {
                    weight: Arc::new(Tensor::matrix(s.input, s.output, w).expect("sized")),
                    bias: Arc::new(Tensor::zeros(vec![s.output])),
                }
            })
            .collect();
        Ok(Self { specs, layers })
    }

    pub fn zeros(specs: Vec<LayerSpec>) -> Result<Self> {
        validate_chain(&specs)?;
        let layers = specs
            .iter()
            .map(|s| Linear {
                weight: Arc::new(Tensor::zeros(vec![s.input, s.output])),
                bias: Arc::new(Tensor::zeros(vec![s.output])),
            })
            .collect();
        Ok(Self { specs, layers })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn input_dim(&self) -> usize {
        self.specs[0].input
    }

    pub fn output_dim(&self) -> usize {
        self.specs[self.specs.len() - 1].output
    }

    pub fn weight(&self, layer: usize) -> &Tensor {
        &self.layers[layer].weight
    }

    pub fn bias(&self, layer: usize) -> &Tensor {
        &self.layers[layer].bias
    }

    /// Replaces one layer's parameters; shapes must match the layer's declared sizes.
    pub fn set_layer(&mut self, layer: usize, weight: Tensor, bias: Tensor) -> Result<()> {
        let s = self
            .specs
            .get(layer)
            .ok_or_else(|| Error::Model(format!("no layer {layer}")))?;
        if weight.shape() != [s.input, s.output] || bias.shape() != [s.output] {
            return Err(Error::Model(format!(
                "layer {layer} expects weight [{}, {}] and bias [{}], got {:?} and {:?}",
                s.input,
                s.output,
                s.output,
                weight.shape(),
                bias.shape()
            )));
        }
        self.layers[layer] = Linear {
            weight: Arc::new(weight),
            bias: Arc::new(bias),
        };
        Ok(())
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_ref(), l.bias.as_ref()])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [Arc::make_mut(&mut l.weight), Arc::make_mut(&mut l.bias)])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Registers the parameters on `tape` without copying them.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundMlp {
        BoundMlp {
            vars: self
                .layers
                .iter()
                .map(|l| {
                    (
                        tape.leaf_shared(Arc::clone(&l.weight), trainable),
                        tape.leaf_shared(Arc::clone(&l.bias), trainable),
                    )
                })
                .collect(),
        }
    }

    /// Applies the first `depth` layers to `x`.
    pub fn forward_to(
        &self,
        tape: &mut Tape,
        bound: &BoundMlp,
        x: Var,
        depth: usize,
    ) -> Result<Var> {
        let mut h = x;
        for (spec, &(w, b)) in self.specs.iter().zip(&bound.vars).take(depth) {
            let xw = tape.matmul(h, w)?;
            h = tape.add_bias(xw, b)?;
            if spec.activation == Activation::Relu {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    pub fn forward(&self, tape: &mut Tape, bound: &BoundMlp, x: Var) -> Result<Var> {
        self.forward_to(tape, bound, x, self.specs.len())
    }
}

/// Pulls the gradients for `vars` out of `grads`, in order.
pub fn collect_grads(vars: &[Var], grads: &mut Gradients) -> Vec<Option<Tensor>> {
    vars.iter().map(|&v| grads.take(v)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub layers: Vec<LayerSpec>,
    pub representation_layer: usize,
}

impl EncoderSpec {
    /// Representation taken from the last listed layer; in a full classifier
    /// (encoder followed by a linear head) that is the penultimate layer.
    pub fn new(layers: Vec<LayerSpec>) -> Self {
        let representation_layer = layers.len().saturating_sub(1);
        Self {
            layers,
            representation_layer,
        }
    }

    /// `d -> 256 -> 128`, both ReLU; the 128-wide output is the representation.
    pub fn default_for(input_dim: usize) -> Self {
        Self::new(vec![LayerSpec::relu(input_dim, 256), LayerSpec::relu(256, 128)])
    }

    pub fn validate(&self) -> Result<()> {
        validate_chain(&self.layers)?;
        if self.representation_layer >= self.layers.len() {
            return Err(Error::Model(format!(
                "representation layer {} does not exist ({} layers)",
                self.representation_layer,
                self.layers.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    body: Mlp,
    representation_layer: usize,
}

impl EncoderModel {
    pub fn init(spec: &EncoderSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            body: Mlp::init(spec.layers.clone(), seed)?,
            representation_layer: spec.representation_layer,
        })
    }

    pub fn zeros(spec: &EncoderSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            body: Mlp::zeros(spec.layers.clone())?,
            representation_layer: spec.representation_layer,
        })
    }

    pub(crate) fn from_parts(body: Mlp, representation_layer: usize) -> Result<Self> {
        let spec = EncoderSpec {
            layers: body.specs().to_vec(),
            representation_layer,
        };
        spec.validate()?;
        Ok(Self {
            body,
            representation_layer,
        })
    }

    pub fn spec(&self) -> EncoderSpec {
        EncoderSpec {
            layers: self.body.specs().to_vec(),
            representation_layer: self.representation_layer,
        }
    }

    pub fn body(&self) -> &Mlp {
        &self.body
    }

    pub fn body_mut(&mut self) -> &mut Mlp {
        &mut self.body
    }

    pub fn input_dim(&self) -> usize {
        self.body.input_dim()
    }

    pub fn rep_dim(&self) -> usize {
        self.body.specs()[self.representation_layer].output
    }

    pub fn representation_layer(&self) -> usize {
        self.representation_layer
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundMlp {
        self.body.bind(tape, trainable)
    }

    /// Representation of every row of `x` (`[n, input_dim]` on the tape).
    pub fn encode_on(&self, tape: &mut Tape, bound: &BoundMlp, x: Var) -> Result<Var> {
        let width = tape.value(x).cols();
        if width != self.input_dim() {
            return Err(Error::Model(format!(
                "input width {width} does not match encoder input {}",
                self.input_dim()
            )));
        }
        self.body
            .forward_to(tape, bound, x, self.representation_layer + 1)
    }

    /// Frozen forward pass for an `[n, input_dim]` batch.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let z = self.encode_on(&mut tape, &bound, xv)?;
        Ok(tape.value(z).clone())
    }

    /// Representation of a single example.
    pub fn encode_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        let t = Tensor::matrix(1, x.len(), x.to_vec())?;
        Ok(self.encode(&t)?.into_data())
    }

    /// SHA-256 of the encoder's serialized spec and parameters.
    pub fn fingerprint(&self) -> [u8; 32] {
        let bytes = io::encode_encoder(self);
        Sha256::digest(&bytes).into()
    }
}

/// The two small networks whose outputs are dotted to score a
/// (clean, adversarial) representation pair. Scores are logits; the
/// positive pair score used by the contrastive objective is `exp(logit)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreHeads {
    pub phi1: Mlp,
    pub phi2: Mlp,
    pub temperature: f64,
}

#[derive(Debug, Clone)]
pub struct BoundHeads {
    pub phi1: BoundMlp,
    pub phi2: BoundMlp,
}

impl BoundHeads {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.phi1.vars();
        v.extend(self.phi2.vars());
        v
    }
}

impl ScoreHeads {
    /// Each head is `rep_dim -> hidden (ReLU) -> out_dim`.
    pub fn init(
        rep_dim: usize,
        hidden: usize,
        out_dim: usize,
        temperature: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::Model(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let specs = vec![LayerSpec::relu(rep_dim, hidden), LayerSpec::linear(hidden, out_dim)];
        Ok(Self {
            phi1: Mlp::init(specs.clone(), rng::derive(seed, &[1]))?,
            phi2: Mlp::init(specs, rng::derive(seed, &[2]))?,
            temperature,
        })
    }

    /// `rep_dim -> 64 -> 64`.
    pub fn default_for(rep_dim: usize, seed: u64) -> Result<Self> {
        Self::init(rep_dim, 64, 64, 1.0, seed)
    }

    pub fn rep_dim(&self) -> usize {
        self.phi1.input_dim()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundHeads {
        BoundHeads {
            phi1: self.phi1.bind(tape, trainable),
            phi2: self.phi2.bind(tape, trainable),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.phi1.params();
        p.extend(self.phi2.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.phi1.params_mut();
        p.extend(self.phi2.params_mut());
        p
    }

    /// `[n, n]` matrix of logits `phi1(z_i) . phi2(zh_j) / t`.
    pub fn logits_on(
        &self,
        tape: &mut Tape,
        bound: &BoundHeads,
        z: Var,
        z_hat: Var,
    ) -> Result<Var> {
        let a = self.phi1.forward(tape, &bound.phi1, z)?;
        let b = self.phi2.forward(tape, &bound.phi2, z_hat)?;
        let bt = tape.transpose(b)?;
        let s = tape.matmul(a, bt)?;
        Ok(tape.scale(s, 1.0 / self.temperature)?)
    }

    /// Logit for a single pair.
    pub fn score(&self, z: &[f64], z_hat: &[f64]) -> Result<f64> {
        let r = self.rep_dim();
        if z.len() != r || z_hat.len() != r {
            return Err(Error::Model(format!(
                "score expects width {r}, got {} and {}",
                z.len(),
                z_hat.len()
            )));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let zv = tape.constant(Tensor::matrix(1, r, z.to_vec())?);
        let zh = tape.constant(Tensor::matrix(1, r, z_hat.to_vec())?);
        let l = self.logits_on(&mut tape, &bound, zv, zh)?;
        Ok(tape.value(l).data()[0])
    }
}
