use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::embedding::{embedding_dim, Embedding, FeatureBatch};
use super::layers::Mlp;
use super::params::{ParamId, ParamStore};
use super::tape::{Mode, NodeId, Tape};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{stream, Stream};

/// Widths of the encoder / decoder / projector stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub n_continuous: usize,
    pub cardinalities: Vec<usize>,
    /// Encoder block widths after the embedding; length = number of blocks `T`.
    pub encoder_widths: Vec<usize>,
    pub projector_layers: usize,
    pub projector_width: usize,
}

impl NetworkSpec {
    /// Encoder with `layers` blocks of `hidden` width (default: the embedded width),
    /// projector of `projector_layers` × `projector_width` (default: embedded width).
    pub fn new(
        n_continuous: usize,
        cardinalities: &[usize],
        hidden: Option<usize>,
        layers: usize,
        projector_layers: usize,
        projector_width: Option<usize>,
    ) -> Self {
        let embedded = n_continuous + cardinalities.iter().map(|&c| embedding_dim(c)).sum::<usize>();
        Self {
            n_continuous,
            cardinalities: cardinalities.to_vec(),
            encoder_widths: vec![hidden.unwrap_or(embedded); layers],
            projector_layers,
            projector_width: projector_width.unwrap_or(embedded),
        }
    }

    pub fn embedded_width(&self) -> usize {
        self.n_continuous
            + self
                .cardinalities
                .iter()
                .map(|&c| embedding_dim(c))
                .sum::<usize>()
    }

    pub fn latent_width(&self) -> usize {
        *self.encoder_widths.last().unwrap_or(&self.embedded_width())
    }

    /// Decoder output: continuous values followed by one logit block per categorical column.
    pub fn raw_output_width(&self) -> usize {
        self.n_continuous + self.cardinalities.iter().sum::<usize>()
    }

    fn validate(&self) -> Result<()> {
        if self.encoder_widths.is_empty() {
            return Err(Error::InvalidArgument("encoder needs at least one layer".into()));
        }
        if self.projector_layers == 0 {
            return Err(Error::InvalidArgument("projector needs at least one layer".into()));
        }
        Ok(())
    }
}

/// Encoder of `T` FC-BN-ReLU blocks. Block `t` maps `h^t` to `h^{t+1}`;
/// `h^0` is the embedded input and `h^T = z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub mlp: Mlp,
}

const BLOCK_LEN: usize = 3;

impl Encoder {
    pub fn n_blocks(&self) -> usize {
        self.mlp.layers.len() / BLOCK_LEN
    }

    /// Runs blocks `from..to`; `from == to` is the identity.
    pub fn forward_partial(
        &mut self,
        tape: &mut Tape,
        params: &ParamStore,
        x: NodeId,
        from: usize,
        to: usize,
        mode: Mode,
    ) -> Result<NodeId> {
        if from > to || to > self.n_blocks() {
            return Err(Error::InvalidArgument(format!(
                "encoder range {from}..{to} invalid for {} blocks",
                self.n_blocks()
            )));
        }
        let expected = self.mlp.widths[from];
        if tape.value(x).cols() != expected {
            return Err(Error::ShapeMismatch {
                context: "encoder input",
                expected: (tape.value(x).rows(), expected),
                found: tape.value(x).shape(),
            });
        }
        self.mlp
            .forward_layers(tape, params, x, from * BLOCK_LEN..to * BLOCK_LEN, mode)
    }
}

/// Embedding, encoder, decoder and projection head trained jointly during pretraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveNetwork {
    pub spec: NetworkSpec,
    pub params: ParamStore,
    pub embedding: Embedding,
    pub encoder: Encoder,
    pub decoder: Mlp,
    pub projector: Mlp,
}

/// Decoder output split into the continuous reconstruction and per-column logits.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderOutput {
    pub continuous: Matrix,
    pub logits: Vec<Matrix>,
}

impl DecoderOutput {
    pub fn split(raw: &Matrix, n_continuous: usize, cardinalities: &[usize]) -> Self {
        let continuous = raw.slice_cols(0, n_continuous);
        let mut offset = n_continuous;
        let logits = cardinalities
            .iter()
            .map(|&c| {
                let m = raw.slice_cols(offset, offset + c);
                offset += c;
                m
            })
            .collect();
        Self { continuous, logits }
    }

    pub fn probabilities(&self) -> Vec<Matrix> {
        self.logits.iter().map(softmax_rows).collect()
    }
}

pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

impl ContrastiveNetwork {
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let embedding = Embedding::new(
            &mut params,
            "embedding",
            spec.n_continuous,
            &spec.cardinalities,
            &mut stream(seed, Stream::InitEmbedding, 0),
        );
        let d = embedding.output_width();
        let mut enc_widths = vec![d];
        enc_widths.extend(&spec.encoder_widths);
        let encoder = Encoder {
            mlp: Mlp::new(
                &mut params,
                "encoder",
                &enc_widths,
                false,
                &mut stream(seed, Stream::InitEncoder, 0),
            ),
        };
        let mut dec_widths: Vec<usize> = enc_widths[1..].iter().rev().copied().collect();
        dec_widths.push(spec.raw_output_width());
        let decoder = Mlp::new(
            &mut params,
            "decoder",
            &dec_widths,
            true,
            &mut stream(seed, Stream::InitDecoder, 0),
        );
        let mut proj_widths = vec![spec.latent_width()];
        proj_widths.extend(std::iter::repeat_n(spec.projector_width, spec.projector_layers));
        let projector = Mlp::new(
            &mut params,
            "projector",
            &proj_widths,
            true,
            &mut stream(seed, Stream::InitProjector, 0),
        );
        Ok(Self {
            spec,
            params,
            embedding,
            encoder,
            decoder,
            projector,
        })
    }

    pub fn embed(&self, tape: &mut Tape, batch: &FeatureBatch) -> Result<NodeId> {
        self.embedding.forward(tape, &self.params, batch)
    }

    pub fn encode_partial(
        &mut self,
        tape: &mut Tape,
        x: NodeId,
        from: usize,
        to: usize,
        mode: Mode,
    ) -> Result<NodeId> {
        self.encoder
            .forward_partial(tape, &self.params, x, from, to, mode)
    }

    pub fn decode_node(&mut self, tape: &mut Tape, z: NodeId, mode: Mode) -> Result<NodeId> {
        self.decoder.forward(tape, &self.params, z, mode)
    }

    pub fn project(&mut self, tape: &mut Tape, z: NodeId, mode: Mode) -> Result<NodeId> {
        self.projector.forward(tape, &self.params, z, mode)
    }

    /// Latent codes `z` for a batch in eval mode (running BN statistics).
    pub fn encode(&mut self, batch: &FeatureBatch) -> Result<Matrix> {
        let mut tape = Tape::new();
        let x = self.embed(&mut tape, batch)?;
        let t = self.encoder.n_blocks();
        let z = self.encode_partial(&mut tape, x, 0, t, Mode::Eval)?;
        Ok(tape.value(z).clone())
    }

    /// Eval-mode encoding in chunks, for large datasets.
    pub fn encode_dataset(&mut self, ds: &crate::data::TabularDataset) -> Result<Matrix> {
        let n = ds.n_rows();
        let mut parts = Vec::new();
        for start in (0..n).step_by(4096) {
            let rows: Vec<usize> = (start..(start + 4096).min(n)).collect();
            parts.push(self.encode(&FeatureBatch::from_rows(ds, &rows))?);
        }
        if parts.is_empty() {
            return Ok(Matrix::zeros(0, self.spec.latent_width()));
        }
        Matrix::vstack(&parts.iter().collect::<Vec<_>>())
    }

    /// Eval-mode decoding: continuous reconstruction and per-column probabilities.
    pub fn decode(&mut self, z: &Matrix) -> Result<(Matrix, Vec<Matrix>)> {
        let mut tape = Tape::new();
        let zn = tape.input(z.clone())?;
        let out = self.decode_node(&mut tape, zn, Mode::Eval)?;
        let split = DecoderOutput::split(tape.value(out), self.spec.n_continuous, &self.spec.cardinalities);
        let probs = split.probabilities();
        Ok((split.continuous, probs))
    }

    pub fn encoder_param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.embedding.param_ids();
        ids.extend(self.encoder.mlp.param_ids());
        ids
    }

    pub fn projector_param_ids(&self) -> Vec<ParamId> {
        self.projector.param_ids()
    }

    pub fn decoder_param_ids(&self) -> Vec<ParamId> {
        self.decoder.param_ids()
    }
}

/// Classifier head: optional embedding (when fed raw rows) + MLP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorNetwork {
    pub params: ParamStore,
    pub embedding: Option<Embedding>,
    pub mlp: Mlp,
}

impl PredictorNetwork {
    /// `depth` dense layers: `depth − 1` FC-BN-ReLU blocks of `hidden` width and a linear output.
    pub fn on_latents(input_width: usize, hidden: usize, depth: usize, n_classes: usize, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mlp = Self::build_mlp(&mut params, input_width, hidden, depth, n_classes, seed)?;
        Ok(Self {
            params,
            embedding: None,
            mlp,
        })
    }

    /// Predictor that embeds raw rows itself (supervised and logistic baselines).
    pub fn on_raw(
        n_continuous: usize,
        cardinalities: &[usize],
        hidden: usize,
        depth: usize,
        n_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut params = ParamStore::new();
        let embedding = Embedding::new(
            &mut params,
            "embedding",
            n_continuous,
            cardinalities,
            &mut stream(seed, Stream::InitEmbedding, 0),
        );
        let mlp = Self::build_mlp(&mut params, embedding.output_width(), hidden, depth, n_classes, seed)?;
        Ok(Self {
            params,
            embedding: Some(embedding),
            mlp,
        })
    }

    fn build_mlp(
        params: &mut ParamStore,
        input: usize,
        hidden: usize,
        depth: usize,
        n_classes: usize,
        seed: u64,
    ) -> Result<Mlp> {
        if depth == 0 {
            return Err(Error::InvalidArgument("predictor depth must be >= 1".into()));
        }
        let mut widths = vec![input];
        widths.extend(std::iter::repeat_n(hidden, depth - 1));
        widths.push(n_classes);
        Ok(Mlp::new(
            params,
            "predictor",
            &widths,
            true,
            &mut stream(seed, Stream::InitPredictor, 0),
        ))
    }

    /// Logits for a batch. `input` is a latent matrix, or raw rows when the predictor embeds.
    pub fn forward_node(&mut self, tape: &mut Tape, input: PredictorInput<'_>, mode: Mode) -> Result<NodeId> {
        let x = match (input, &self.embedding) {
            (PredictorInput::Latent(z), None) => tape.input(z.clone())?,
            (PredictorInput::Raw(b), Some(e)) => e.forward(tape, &self.params, b)?,
            (PredictorInput::Node(n), _) => n,
            _ => {
                return Err(Error::InvalidArgument(
                    "predictor input kind does not match its construction".into(),
                ))
            }
        };
        self.mlp.forward(tape, &self.params, x, mode)
    }

    pub fn logits(&mut self, input: PredictorInput<'_>) -> Result<Matrix> {
        let mut tape = Tape::new();
        let out = self.forward_node(&mut tape, input, Mode::Eval)?;
        Ok(tape.value(out).clone())
    }
}

#[derive(Debug, Clone, Copy)]
pub enum PredictorInput<'a> {
    Latent(&'a Matrix),
    Raw(&'a FeatureBatch),
    /// Already on the tape (e.g. mixed latents).
    Node(NodeId),
}

const CHECKPOINT_FORMAT: &str = "contramix-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint<T> {
    format: String,
    version: u32,
    kind: String,
    model: T,
}

/// Writes a JSON checkpoint: network spec, every parameter with its Adam
/// moments and step count, and batch-norm running statistics.
pub fn save_checkpoint<T: Serialize>(path: &Path, kind: &str, model: &T) -> Result<()> {
    let ck = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        kind: kind.into(),
        model,
    };
    let text = serde_json::to_string(&ck)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ck: Checkpoint<T> = serde_json::from_str(&text)?;
    if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION || ck.kind != kind {
        return Err(Error::InvalidArgument(format!(
            "{}: expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION} `{kind}`, found {} v{} `{}`",
            path.display(),
            ck.format,
            ck.version,
            ck.kind
        )));
    }
    Ok(ck.model)
}
