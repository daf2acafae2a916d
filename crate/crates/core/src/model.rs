//! Split classifier: a dense encoder whose output is divided into M
//! sub-vectors of dimension d, and a dense decoder mapping (quantized)
//! features to class logits. Initialization and forward passes are
//! deterministic for a fixed seed.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::autodiff::{GradError, Graph, NodeId, ParamId, Params, Real, Tensor};
use crate::textfmt::{f32_sig9, header_kv, parse_floats};
use crate::vq::FeatureBlock;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("encoder output width {output} is not divisible by segment dim {dim}")]
    BadSplit { output: usize, dim: usize },
    #[error("input has dimension {got}, expected {want}")]
    InputDim { got: usize, want: usize },
    #[error("spec requires at least an input and an output width")]
    TooFewLayers,
    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Grad(#[from] GradError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    LeakyRelu,
}

impl Activation {
    pub fn tag(&self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::LeakyRelu => "leaky_relu",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self, ModelError> {
        match tag {
            "relu" => Ok(Activation::Relu),
            "leaky_relu" => Ok(Activation::LeakyRelu),
            other => Err(ModelError::Checkpoint(format!("unknown activation {other:?}"))),
        }
    }
}

/// Widths from input to feature output; the output width must equal `M * d`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderSpec {
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub segment_dim: usize,
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.widths.len() < 2 {
            return Err(ModelError::TooFewLayers);
        }
        let out = *self.widths.last().unwrap();
        if self.segment_dim == 0 || out % self.segment_dim != 0 {
            return Err(ModelError::BadSplit {
                output: out,
                dim: self.segment_dim,
            });
        }
        Ok(())
    }

    pub fn segments(&self) -> usize {
        self.widths.last().unwrap() / self.segment_dim
    }
}

/// Widths from feature input (`M * d`) to class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderSpec {
    pub widths: Vec<usize>,
    pub activation: Activation,
}

impl DecoderSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.widths.len() < 2 {
            return Err(ModelError::TooFewLayers);
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        *self.widths.last().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample<F: Real> {
    pub input: Vec<F>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<F: Real> {
    pub logits: Vec<F>,
    pub class: usize,
}

/// Argmax with ties broken toward the lowest class index.
pub fn argmax<F: Real>(logits: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct SplitClassifier<F: Real> {
    pub encoder: EncoderSpec,
    pub decoder: DecoderSpec,
    pub params: Params<F>,
    enc_layers: Vec<(ParamId, ParamId)>,
    dec_layers: Vec<(ParamId, ParamId)>,
}

fn glorot_layer<F: Real>(rng: &mut ChaCha20Rng, fan_in: usize, fan_out: usize) -> (Tensor<F>, Tensor<F>) {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let w: Vec<F> = (0..fan_in * fan_out)
        .map(|_| F::from_f64(rng.random_range(-bound..bound)))
        .collect();
    let weight = Tensor::new(vec![fan_in, fan_out], w).expect("weight shape");
    let bias = Tensor::zeros(vec![fan_out]);
    (weight, bias)
}

impl<F: Real> SplitClassifier<F> {
    pub fn new(encoder: EncoderSpec, decoder: DecoderSpec, seed: u64) -> Result<Self, ModelError> {
        encoder.validate()?;
        decoder.validate()?;
        if decoder.widths[0] != *encoder.widths.last().unwrap() {
            return Err(ModelError::InputDim {
                got: decoder.widths[0],
                want: *encoder.widths.last().unwrap(),
            });
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let mut enc_layers = Vec::new();
        for w in encoder.widths.windows(2) {
            let (weight, bias) = glorot_layer(&mut rng, w[0], w[1]);
            enc_layers.push((params.add(weight), params.add(bias)));
        }
        let mut dec_layers = Vec::new();
        for w in decoder.widths.windows(2) {
            let (weight, bias) = glorot_layer(&mut rng, w[0], w[1]);
            dec_layers.push((params.add(weight), params.add(bias)));
        }
        Ok(SplitClassifier {
            encoder,
            decoder,
            params,
            enc_layers,
            dec_layers,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.widths[0]
    }

    pub fn feature_dim(&self) -> usize {
        *self.encoder.widths.last().unwrap()
    }

    pub fn segments(&self) -> usize {
        self.encoder.segments()
    }

    pub fn segment_dim(&self) -> usize {
        self.encoder.segment_dim
    }

    pub fn classes(&self) -> usize {
        self.decoder.classes()
    }

    pub fn network_param_ids(&self) -> Vec<ParamId> {
        self.enc_layers
            .iter()
            .chain(self.dec_layers.iter())
            .flat_map(|&(w, b)| [w, b])
            .collect()
    }

    pub fn encoder_param_ids(&self) -> Vec<ParamId> {
        self.enc_layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    pub fn decoder_param_ids(&self) -> Vec<ParamId> {
        self.dec_layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    fn mlp(
        &self,
        g: &mut Graph<F>,
        layers: &[(ParamId, ParamId)],
        activation: Activation,
        mut x: NodeId,
    ) -> Result<NodeId, GradError> {
        for (i, &(w, b)) in layers.iter().enumerate() {
            let wn = g.param(&self.params, w);
            let bn = g.param(&self.params, b);
            let mm = g.matmul(x, wn)?;
            x = g.bias_add(mm, bn)?;
            if i + 1 < layers.len() {
                x = match activation {
                    Activation::Relu => g.relu(x),
                    Activation::LeakyRelu => g.leaky_relu(x, F::from_f64(0.01)),
                };
            }
        }
        Ok(x)
    }

    /// Encoder forward on a `[batch, input_dim]` node.
    pub fn encode_graph(&self, g: &mut Graph<F>, x: NodeId) -> Result<NodeId, GradError> {
        self.mlp(g, &self.enc_layers, self.encoder.activation, x)
    }

    /// Decoder forward on a `[batch, M*d]` node; returns logits.
    pub fn decode_graph(&self, g: &mut Graph<F>, z: NodeId) -> Result<NodeId, GradError> {
        self.mlp(g, &self.dec_layers, self.decoder.activation, z)
    }

    /// Single-sample encode: deterministic forward pass, contiguous split.
    pub fn encode(&self, x: &[F]) -> Result<FeatureBlock<F>, ModelError> {
        if x.len() != self.input_dim() {
            return Err(ModelError::InputDim {
                got: x.len(),
                want: self.input_dim(),
            });
        }
        let mut g = Graph::new();
        let xn = g.constant(1, x.len(), x.to_vec())?;
        let feat = self.encode_graph(&mut g, xn)?;
        FeatureBlock::split(g.value(feat).to_vec(), self.segment_dim())
            .map_err(|e| ModelError::Checkpoint(e.to_string()))
    }

    /// Single-sample decode of a concatenated (quantized) feature vector.
    pub fn decode(&self, z: &[F]) -> Result<Prediction<F>, ModelError> {
        if z.len() != self.feature_dim() {
            return Err(ModelError::InputDim {
                got: z.len(),
                want: self.feature_dim(),
            });
        }
        let mut g = Graph::new();
        let zn = g.constant(1, z.len(), z.to_vec())?;
        let logits_node = self.decode_graph(&mut g, zn)?;
        let logits = g.value(logits_node).to_vec();
        let class = argmax(&logits);
        Ok(Prediction { logits, class })
    }

    /// Mean task loss of the unquantized pipeline `f_d(f_e(x))` on a batch.
    pub fn warmstart_loss_graph(
        &self,
        g: &mut Graph<F>,
        inputs: NodeId,
        labels: &[usize],
    ) -> Result<NodeId, GradError> {
        let feat = self.encode_graph(g, inputs)?;
        let logits = self.decode_graph(g, feat)?;
        g.cross_entropy(logits, labels)
    }

    /// Value-level warm-start loss over a sample batch.
    pub fn warmstart_loss(&self, batch: &[LabeledSample<F>]) -> Result<F, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let dim = self.input_dim();
        let mut flat = Vec::with_capacity(batch.len() * dim);
        let mut labels = Vec::with_capacity(batch.len());
        for s in batch {
            if s.input.len() != dim {
                return Err(ModelError::InputDim {
                    got: s.input.len(),
                    want: dim,
                });
            }
            if s.label >= self.classes() {
                return Err(ModelError::BadLabel {
                    label: s.label,
                    classes: self.classes(),
                });
            }
            flat.extend_from_slice(&s.input);
            labels.push(s.label);
        }
        let mut g = Graph::new();
        let xn = g.constant(batch.len(), dim, flat)?;
        let loss = self.warmstart_loss_graph(&mut g, xn, &labels)?;
        Ok(g.scalar_value(loss))
    }

    pub fn cast<T: Real>(&self) -> SplitClassifier<T> {
        SplitClassifier {
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            params: self.params.cast(),
            enc_layers: self.enc_layers.clone(),
            dec_layers: self.dec_layers.clone(),
        }
    }
}

impl SplitClassifier<f32> {
    /// Checkpoint text format: header lines, then one `tensor:` section per
    /// parameter with a shape header and row-per-line values.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("format_version: 1\n");
        out.push_str("mode: checkpoint\n");
        out.push_str(&format!("activation: {}\n", self.encoder.activation.tag()));
        out.push_str(&format!("segment_dim: {}\n", self.encoder.segment_dim));
        out.push_str(&format!(
            "encoder_widths: {}\n",
            self.encoder
                .widths
                .iter()
                .map(|w| w.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        ));
        out.push_str(&format!(
            "decoder_widths: {}\n",
            self.decoder
                .widths
                .iter()
                .map(|w| w.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        ));
        let dump = |tag: &str, layers: &[(ParamId, ParamId)], out: &mut String| {
            for (i, &(w, b)) in layers.iter().enumerate() {
                for (name, pid) in [("w", w), ("b", b)] {
                    let t = self.params.get(pid);
                    let (rows, cols) = t.matrix_shape();
                    out.push_str(&format!("tensor: {tag}.{name}{i} {rows} {cols}\n"));
                    for r in 0..rows {
                        let row: Vec<String> = t.data[r * cols..(r + 1) * cols]
                            .iter()
                            .map(|&v| f32_sig9(v))
                            .collect();
                        out.push_str(&row.join(" "));
                        out.push('\n');
                    }
                }
            }
        };
        dump("encoder", &self.enc_layers, &mut out);
        dump("decoder", &self.dec_layers, &mut out);
        out
    }

    pub fn from_text(text: &str) -> Result<Self, ModelError> {
        let mut lines = text.lines().peekable();
        let mut activation = None;
        let mut segment_dim = None;
        let mut enc_widths: Option<Vec<usize>> = None;
        let mut dec_widths: Option<Vec<usize>> = None;
        // headers until the first tensor section
        while let Some(&line) = lines.peek() {
            if line.trim().starts_with("tensor:") {
                break;
            }
            let line = lines.next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            match header_kv(line) {
                Some(("format_version", "1")) => {}
                Some(("mode", "checkpoint")) => {}
                Some(("activation", v)) => activation = Some(Activation::from_tag(v)?),
                Some(("segment_dim", v)) => {
                    segment_dim = Some(
                        v.parse::<usize>()
                            .map_err(|e| ModelError::Checkpoint(e.to_string()))?,
                    )
                }
                Some(("encoder_widths", v)) | Some(("decoder_widths", v)) => {
                    let widths = v
                        .split_whitespace()
                        .map(|t| t.parse::<usize>())
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
                    if line.starts_with("encoder") {
                        enc_widths = Some(widths);
                    } else {
                        dec_widths = Some(widths);
                    }
                }
                _ => return Err(ModelError::Checkpoint(format!("unexpected header {line:?}"))),
            }
        }
        let activation = activation.ok_or_else(|| ModelError::Checkpoint("missing activation".into()))?;
        let segment_dim = segment_dim.ok_or_else(|| ModelError::Checkpoint("missing segment_dim".into()))?;
        let enc_widths = enc_widths.ok_or_else(|| ModelError::Checkpoint("missing encoder_widths".into()))?;
        let dec_widths = dec_widths.ok_or_else(|| ModelError::Checkpoint("missing decoder_widths".into()))?;

        let mut model = SplitClassifier::<f32>::new(
            EncoderSpec {
                widths: enc_widths,
                activation,
                segment_dim,
            },
            DecoderSpec {
                widths: dec_widths,
                activation,
            },
            0,
        )?;

        while let Some(line) = lines.next() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let rest = line
                .strip_prefix("tensor:")
                .ok_or_else(|| ModelError::Checkpoint(format!("expected tensor section, got {line:?}")))?
                .trim();
            let mut parts = rest.split_whitespace();
            let name = parts
                .next()
                .ok_or_else(|| ModelError::Checkpoint("tensor section missing name".into()))?;
            let rows: usize = parts
                .next()
                .and_then(|p| p.parse().ok())
                .ok_or_else(|| ModelError::Checkpoint(format!("bad tensor shape in {line:?}")))?;
            let cols: usize = parts
                .next()
                .and_then(|p| p.parse().ok())
                .ok_or_else(|| ModelError::Checkpoint(format!("bad tensor shape in {line:?}")))?;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let row_line = lines
                    .next()
                    .ok_or_else(|| ModelError::Checkpoint(format!("tensor {name} truncated")))?;
                let vals = parse_floats(row_line).map_err(ModelError::Checkpoint)?;
                if vals.len() != cols {
                    return Err(ModelError::Checkpoint(format!(
                        "tensor {name}: row has {} values, expected {cols}",
                        vals.len()
                    )));
                }
                data.extend_from_slice(&vals);
            }
            let pid = model
                .named_param(name)
                .ok_or_else(|| ModelError::Checkpoint(format!("unknown tensor {name:?}")))?;
            let slot = model.params.get_mut(pid);
            if slot.numel() != data.len() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {name}: {} values, expected {}",
                    data.len(),
                    slot.numel()
                )));
            }
            slot.data = data;
        }
        Ok(model)
    }

    fn named_param(&self, name: &str) -> Option<ParamId> {
        let (scope, rest) = name.split_once('.')?;
        let layers = match scope {
            "encoder" => &self.enc_layers,
            "decoder" => &self.dec_layers,
            _ => return None,
        };
        let kind = rest.chars().next()?;
        let idx: usize = rest[1..].parse().ok()?;
        let &(w, b) = layers.get(idx)?;
        match kind {
            'w' => Some(w),
            'b' => Some(b),
            _ => None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, self.to_text()).map_err(|e| ModelError::Checkpoint(format!("{path:?}: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text =
            fs::read_to_string(path).map_err(|e| ModelError::Checkpoint(format!("{path:?}: {e}")))?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model(seed: u64) -> SplitClassifier<f64> {
        SplitClassifier::new(
            EncoderSpec {
                widths: vec![4, 6, 8],
                activation: Activation::Relu,
                segment_dim: 2,
            },
            DecoderSpec {
                widths: vec![8, 5, 3],
                activation: Activation::Relu,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn encode_splits_into_segments() {
        let m = tiny_model(1);
        let fb = m.encode(&[0.1, -0.2, 0.3, 0.4]).unwrap();
        assert_eq!(fb.num_segments(), 4);
        let rejoined: Vec<f64> = fb.segments.concat();
        assert_eq!(rejoined, fb.source);
    }

    #[test]
    fn encode_rejects_wrong_dim() {
        let m = tiny_model(1);
        assert!(m.encode(&[0.1, 0.2]).is_err());
    }

    #[test]
    fn zero_weights_produce_zero_features() {
        let mut m = tiny_model(1);
        for pid in m.params.ids().collect::<Vec<_>>() {
            for v in m.params.get_mut(pid).data.iter_mut() {
                *v = 0.0;
            }
        }
        let fb = m.encode(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(fb.source.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decode_argmax_and_tie_rule() {
        assert_eq!(argmax(&[0.2, 0.9]), 1);
        assert_eq!(argmax(&[0.5, 0.5, 0.1]), 0);
        let m = tiny_model(2);
        let p = m.decode(&[0.1; 8]).unwrap();
        assert_eq!(p.logits.len(), 3);
        assert_eq!(p.class, argmax(&p.logits));
        assert!(m.decode(&[0.1; 3]).is_err());
    }

    #[test]
    fn warmstart_loss_uniform_logits() {
        // zero decoder weights -> uniform logits -> ln(classes)
        let mut m = SplitClassifier::<f64>::new(
            EncoderSpec {
                widths: vec![4, 8],
                activation: Activation::Relu,
                segment_dim: 2,
            },
            DecoderSpec {
                widths: vec![8, 10],
                activation: Activation::Relu,
            },
            3,
        )
        .unwrap();
        for pid in m.params.ids().collect::<Vec<_>>() {
            for v in m.params.get_mut(pid).data.iter_mut() {
                *v = 0.0;
            }
        }
        let batch = vec![
            LabeledSample {
                input: vec![1.0, 0.0, 0.0, 0.0],
                label: 3,
            };
            4
        ];
        let loss = m.warmstart_loss(&batch).unwrap();
        assert!((loss - (10.0f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn warmstart_loss_saturated_margin() {
        // force a large correct-class margin through the decoder bias
        let mut m = SplitClassifier::<f64>::new(
            EncoderSpec {
                widths: vec![2, 4],
                activation: Activation::Relu,
                segment_dim: 2,
            },
            DecoderSpec {
                widths: vec![4, 2],
                activation: Activation::Relu,
            },
            4,
        )
        .unwrap();
        for pid in m.params.ids().collect::<Vec<_>>() {
            for v in m.params.get_mut(pid).data.iter_mut() {
                *v = 0.0;
            }
        }
        // decoder bias: logit margin 20 for class 0
        let &(_, bias) = m.dec_layers.last().unwrap();
        m.params.get_mut(bias).data = vec![20.0, 0.0];
        let batch = vec![LabeledSample {
            input: vec![0.5, 0.5],
            label: 0,
        }];
        assert!(m.warmstart_loss(&batch).unwrap() < 1e-6);
    }

    #[test]
    fn warmstart_loss_is_mean_of_per_sample_losses() {
        let m = tiny_model(5);
        let batch: Vec<LabeledSample<f64>> = (0..6)
            .map(|i| LabeledSample {
                input: vec![i as f64 * 0.1, -0.3, 0.2, 0.7],
                label: i % 3,
            })
            .collect();
        let whole = m.warmstart_loss(&batch).unwrap();
        let per: f64 = batch
            .iter()
            .map(|s| m.warmstart_loss(std::slice::from_ref(s)).unwrap())
            .sum::<f64>()
            / batch.len() as f64;
        assert!((whole - per).abs() < 1e-12);
        assert!(m.warmstart_loss(&[]).is_err());
    }

    #[test]
    fn same_seed_same_params() {
        let a = tiny_model(42);
        let b = tiny_model(42);
        for pid in a.params.ids() {
            assert_eq!(a.params.get(pid).data, b.params.get(pid).data);
        }
    }

    #[test]
    fn checkpoint_roundtrip_bit_identical() {
        let m = SplitClassifier::<f32>::new(
            EncoderSpec {
                widths: vec![4, 6, 8],
                activation: Activation::Relu,
                segment_dim: 2,
            },
            DecoderSpec {
                widths: vec![8, 5, 3],
                activation: Activation::Relu,
            },
            77,
        )
        .unwrap();
        let text = m.to_text();
        let back = SplitClassifier::from_text(&text).unwrap();
        for pid in m.params.ids() {
            let a: Vec<u32> = m.params.get(pid).data.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.params.get(pid).data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
        assert_eq!(m.encoder, back.encoder);
        assert_eq!(m.decoder, back.decoder);
    }
}
