//! `SATM` parameter files.
//!
//! Layout (all integers little-endian u32 unless noted):
//!
//! ```text
//! "SATM" version
//! encoder block: n_layers, (input, output, activation:u8)*, representation_layer
//! heads flag:u8 [phi1 block, phi2 block, temperature:f64]
//! classifier flag:u8 [block]
//! parameters as f64: encoder, phi1, phi2, classifier; each layer weight then bias
//! ```
//!
//! A "block" is `n_layers, (input, output, activation:u8)*`.

use std::fs;
use std::path::Path;

use super::{Activation, EncoderModel, EncoderSpec, LayerSpec, Mlp, ScoreHeads};
use crate::baselines::ClassifierHead;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MODEL_MAGIC: &[u8; 4] = b"SATM";
const VERSION: u32 = 1;

/// Everything a parameter file can hold.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub encoder: EncoderModel,
    pub heads: Option<ScoreHeads>,
    pub classifier: Option<ClassifierHead>,
}

impl ModelBundle {
    pub fn encoder_only(encoder: EncoderModel) -> Self {
        Self {
            encoder,
            heads: None,
            classifier: None,
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_block(out: &mut Vec<u8>, specs: &[LayerSpec]) {
    put_u32(out, specs.len());
    for s in specs {
        put_u32(out, s.input);
        put_u32(out, s.output);
        out.push(match s.activation {
            Activation::Identity => 0,
            Activation::Relu => 1,
        });
    }
}

fn put_params(out: &mut Vec<u8>, mlp: &Mlp) {
    for p in mlp.params() {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub(crate) fn encode_encoder(encoder: &EncoderModel) -> Vec<u8> {
    encode_bundle(&ModelBundle::encoder_only(encoder.clone()))
}

pub fn encode_bundle(bundle: &ModelBundle) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    put_u32(&mut out, VERSION as usize);
    put_block(&mut out, bundle.encoder.body().specs());
    put_u32(&mut out, bundle.encoder.representation_layer());
    match &bundle.heads {
        Some(h) => {
            out.push(1);
            put_block(&mut out, h.phi1.specs());
            put_block(&mut out, h.phi2.specs());
            out.extend_from_slice(&h.temperature.to_le_bytes());
        }
        None => out.push(0),
    }
    match &bundle.classifier {
        Some(c) => {
            out.push(1);
            put_block(&mut out, c.linear.specs());
        }
        None => out.push(0),
    }
    put_params(&mut out, bundle.encoder.body());
    if let Some(h) = &bundle.heads {
        put_params(&mut out, &h.phi1);
        put_params(&mut out, &h.phi2);
    }
    if let Some(c) = &bundle.classifier {
        put_params(&mut out, &c.linear);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "truncated model file: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn block(&mut self) -> Result<Vec<LayerSpec>> {
        let n = self.u32()?;
        if n > 4096 {
            return Err(Error::Format(format!("implausible layer count {n}")));
        }
        (0..n)
            .map(|_| {
                let input = self.u32()?;
                let output = self.u32()?;
                let activation = match self.u8()? {
                    0 => Activation::Identity,
                    1 => Activation::Relu,
                    a => return Err(Error::Format(format!("unknown activation code {a}"))),
                };
                Ok(LayerSpec {
                    input,
                    output,
                    activation,
                })
            })
            .collect()
    }

    fn fill(&mut self, mlp: &mut Mlp) -> Result<()> {
        let shapes: Vec<Vec<usize>> = mlp.params().iter().map(|p| p.shape().to_vec()).collect();
        for (p, shape) in mlp.params_mut().into_iter().zip(shapes) {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
            *p = Tensor::new(shape, data)?;
        }
        Ok(())
    }
}

pub fn decode_bundle(bytes: &[u8]) -> Result<ModelBundle> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MODEL_MAGIC {
        return Err(Error::Format("not a SATM model file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Format(format!(
            "unsupported model file version {version}, expected {VERSION}"
        )));
    }
    let enc_layers = r.block()?;
    let rep = r.u32()?;
    let heads_spec = match r.u8()? {
        0 => None,
        1 => Some((r.block()?, r.block()?, r.f64()?)),
        f => return Err(Error::Format(format!("bad heads flag {f}"))),
    };
    let cls_spec = match r.u8()? {
        0 => None,
        1 => Some(r.block()?),
        f => return Err(Error::Format(format!("bad classifier flag {f}"))),
    };

    let mut body = Mlp::zeros(enc_layers)?;
    r.fill(&mut body)?;
    let encoder = EncoderModel::from_parts(body, rep)?;
    let heads = match heads_spec {
        Some((s1, s2, temperature)) => {
            let mut phi1 = Mlp::zeros(s1)?;
            let mut phi2 = Mlp::zeros(s2)?;
            r.fill(&mut phi1)?;
            r.fill(&mut phi2)?;
            Some(ScoreHeads {
                phi1,
                phi2,
                temperature,
            })
        }
        None => None,
    };
    let classifier = match cls_spec {
        Some(s) => {
            let mut linear = Mlp::zeros(s)?;
            r.fill(&mut linear)?;
            Some(ClassifierHead { linear })
        }
        None => None,
    };
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after model parameters",
            bytes.len() - r.pos
        )));
    }
    Ok(ModelBundle {
        encoder,
        heads,
        classifier,
    })
}

pub fn save_params(bundle: &ModelBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_bundle(bundle)).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ModelBundle> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bundle(&bytes)
}

impl ModelBundle {
    /// Loads a file and checks that its encoder has the expected spec.
    pub fn load_matching(path: impl AsRef<Path>, expected: &EncoderSpec) -> Result<Self> {
        let bundle = load_params(path)?;
        let found = bundle.encoder.spec();
        if &found != expected {
            return Err(Error::Model(format!(
                "model file encoder spec {found:?} does not match expected {expected:?}"
            )));
        }
        Ok(bundle)
    }
}
