use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{LinearLayer, ModelConfig, ModelError};
use crate::tensor::Matrix;

/// The six projection kinds inside a transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearKind {
    AttnQ,
    AttnK,
    AttnV,
    AttnOut,
    MlpFc1,
    MlpFc2,
}

impl LinearKind {
    pub const ALL: [LinearKind; 6] = [
        LinearKind::AttnQ,
        LinearKind::AttnK,
        LinearKind::AttnV,
        LinearKind::AttnOut,
        LinearKind::MlpFc1,
        LinearKind::MlpFc2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LinearKind::AttnQ => "attn_q",
            LinearKind::AttnK => "attn_k",
            LinearKind::AttnV => "attn_v",
            LinearKind::AttnOut => "attn_out",
            LinearKind::MlpFc1 => "mlp_fc1",
            LinearKind::MlpFc2 => "mlp_fc2",
        }
    }

    /// Tensor-name suffix inside a block.
    pub(crate) fn tensor_stem(self) -> &'static str {
        match self {
            LinearKind::AttnQ => "attn.query",
            LinearKind::AttnK => "attn.key",
            LinearKind::AttnV => "attn.value",
            LinearKind::AttnOut => "attn.out",
            LinearKind::MlpFc1 => "mlp.fc1",
            LinearKind::MlpFc2 => "mlp.fc2",
        }
    }
}

impl std::str::FromStr for LinearKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LinearKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown layer kind {s:?}"))
    }
}

impl std::fmt::Display for LinearKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Vec<f32>,
    pub offset: Vec<f32>,
}

impl LayerNorm {
    pub fn unit(d: usize) -> Self {
        Self {
            gain: vec![1.0; d],
            offset: vec![0.0; d],
        }
    }

    pub fn param_count(&self) -> usize {
        self.gain.len() + self.offset.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub query: LinearLayer,
    pub key: LinearLayer,
    pub value: LinearLayer,
    pub out: LinearLayer,
}

impl Attention {
    fn param_count(&self) -> usize {
        [&self.query, &self.key, &self.value, &self.out]
            .iter()
            .map(|l| l.param_count())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub fc1: LinearLayer,
    pub fc2: LinearLayer,
}

/// Kernel-3 convolution; `weight` is `[c_out × c_in·3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    pub weight: Matrix,
    pub bias: Vec<f32>,
}

impl Conv1d {
    pub fn c_out(&self) -> usize {
        self.weight.rows()
    }

    pub fn c_in(&self) -> usize {
        self.weight.cols() / 3
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub attn_ln: LayerNorm,
    pub attn: Attention,
    pub mlp_ln: LayerNorm,
    pub mlp: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub attn_ln: LayerNorm,
    pub attn: Attention,
    pub cross_attn_ln: LayerNorm,
    pub cross_attn: Attention,
    pub mlp_ln: LayerNorm,
    pub mlp: Mlp,
}

macro_rules! block_linear_accessors {
    ($ty:ty) => {
        impl $ty {
            pub fn linear(&self, kind: LinearKind) -> &LinearLayer {
                match kind {
                    LinearKind::AttnQ => &self.attn.query,
                    LinearKind::AttnK => &self.attn.key,
                    LinearKind::AttnV => &self.attn.value,
                    LinearKind::AttnOut => &self.attn.out,
                    LinearKind::MlpFc1 => &self.mlp.fc1,
                    LinearKind::MlpFc2 => &self.mlp.fc2,
                }
            }

            pub fn linear_mut(&mut self, kind: LinearKind) -> &mut LinearLayer {
                match kind {
                    LinearKind::AttnQ => &mut self.attn.query,
                    LinearKind::AttnK => &mut self.attn.key,
                    LinearKind::AttnV => &mut self.attn.value,
                    LinearKind::AttnOut => &mut self.attn.out,
                    LinearKind::MlpFc1 => &mut self.mlp.fc1,
                    LinearKind::MlpFc2 => &mut self.mlp.fc2,
                }
            }
        }
    };
}

block_linear_accessors!(EncoderLayer);
block_linear_accessors!(DecoderLayer);

impl EncoderLayer {
    pub fn param_count(&self) -> usize {
        self.attn_ln.param_count()
            + self.attn.param_count()
            + self.mlp_ln.param_count()
            + self.mlp.fc1.param_count()
            + self.mlp.fc2.param_count()
    }
}

impl DecoderLayer {
    pub fn param_count(&self) -> usize {
        self.attn_ln.param_count()
            + self.attn.param_count()
            + self.cross_attn_ln.param_count()
            + self.cross_attn.param_count()
            + self.mlp_ln.param_count()
            + self.mlp.fc1.param_count()
            + self.mlp.fc2.param_count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub encoder: usize,
    pub decoder: usize,
    pub total: usize,
}

/// Architecture plus weights. Encoder positions are sinusoidal and not
/// stored; decoder positions are a learned `[n_text_ctx × d_model]` table.
/// Output logits reuse the token embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub conv1: Conv1d,
    pub conv2: Conv1d,
    pub encoder_layers: Vec<EncoderLayer>,
    pub ln_post: LayerNorm,
    pub token_embedding: Matrix,
    pub positional_embedding: Matrix,
    pub decoder_layers: Vec<DecoderLayer>,
    pub ln_dec: LayerNorm,
}

impl ModelBundle {
    pub fn param_count(&self) -> ParamCount {
        let encoder = self.conv1.param_count()
            + self.conv2.param_count()
            + self.encoder_layers.iter().map(EncoderLayer::param_count).sum::<usize>()
            + self.ln_post.param_count();
        let decoder = self.token_embedding.len()
            + self.positional_embedding.len()
            + self.decoder_layers.iter().map(DecoderLayer::param_count).sum::<usize>()
            + self.ln_dec.param_count();
        ParamCount {
            encoder,
            decoder,
            total: encoder + decoder,
        }
    }

    /// Checks every tensor against the config.
    pub fn validate(&self) -> Result<(), ModelError> {
        let c = &self.config;
        c.validate()?;
        let d = c.d_model;
        let shape = |what: &str, got: (usize, usize), want: (usize, usize)| {
            if got == want {
                Ok(())
            } else {
                Err(ModelError::Shape(format!("{what}: got {got:?}, expected {want:?}")))
            }
        };
        shape("encoder.conv1", self.conv1.weight.shape(), (d, c.n_mels * 3))?;
        shape("encoder.conv2", self.conv2.weight.shape(), (d, d * 3))?;
        shape("encoder.conv1.bias", (self.conv1.bias.len(), 1), (d, 1))?;
        shape("encoder.conv2.bias", (self.conv2.bias.len(), 1), (d, 1))?;
        shape("token_embedding", self.token_embedding.shape(), (c.n_vocab, d))?;
        shape("positional_embedding", self.positional_embedding.shape(), (c.n_text_ctx, d))?;
        if self.encoder_layers.len() != c.n_audio_layers {
            return Err(ModelError::Shape(format!(
                "{} encoder layers, config says {}",
                self.encoder_layers.len(),
                c.n_audio_layers
            )));
        }
        if self.decoder_layers.len() != c.n_text_layers {
            return Err(ModelError::Shape(format!(
                "{} decoder layers, config says {}",
                self.decoder_layers.len(),
                c.n_text_layers
            )));
        }
        let ln = |what: &str, l: &LayerNorm| {
            if l.gain.len() != d || l.offset.len() != d {
                return Err(ModelError::Shape(format!("{what}: layer norm width")));
            }
            if l.gain.iter().chain(&l.offset).any(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite(what.to_string()));
            }
            Ok(())
        };
        let lin = |what: String, l: &LinearLayer, d_in: usize, d_out: usize| {
            l.validate().map_err(|e| ModelError::Shape(format!("{what}: {e}")))?;
            if (l.d_in(), l.d_out()) != (d_in, d_out) {
                return Err(ModelError::Shape(format!(
                    "{what}: {}→{}, expected {d_in}→{d_out}",
                    l.d_in(),
                    l.d_out()
                )));
            }
            Ok(())
        };
        let dims = |kind: LinearKind| match kind {
            LinearKind::MlpFc1 => (d, c.d_mlp()),
            LinearKind::MlpFc2 => (c.d_mlp(), d),
            _ => (d, d),
        };
        ln("encoder.ln_post", &self.ln_post)?;
        ln("decoder.ln", &self.ln_dec)?;
        for (i, layer) in self.encoder_layers.iter().enumerate() {
            ln(&format!("encoder.blocks.{i}.attn_ln"), &layer.attn_ln)?;
            ln(&format!("encoder.blocks.{i}.mlp_ln"), &layer.mlp_ln)?;
            for kind in LinearKind::ALL {
                let (i_, o_) = dims(kind);
                lin(format!("encoder.blocks.{i}.{}", kind.tensor_stem()), layer.linear(kind), i_, o_)?;
            }
        }
        for (i, layer) in self.decoder_layers.iter().enumerate() {
            ln(&format!("decoder.blocks.{i}.attn_ln"), &layer.attn_ln)?;
            ln(&format!("decoder.blocks.{i}.cross_attn_ln"), &layer.cross_attn_ln)?;
            ln(&format!("decoder.blocks.{i}.mlp_ln"), &layer.mlp_ln)?;
            for kind in LinearKind::ALL {
                let (i_, o_) = dims(kind);
                lin(format!("decoder.blocks.{i}.{}", kind.tensor_stem()), layer.linear(kind), i_, o_)?;
            }
            for (name, l) in [
                ("query", &layer.cross_attn.query),
                ("key", &layer.cross_attn.key),
                ("value", &layer.cross_attn.value),
                ("out", &layer.cross_attn.out),
            ] {
                lin(format!("decoder.blocks.{i}.cross_attn.{name}"), l, d, d)?;
            }
        }
        let finite = [
            ("encoder.conv1", self.conv1.weight.is_finite() && self.conv1.bias.iter().all(|v| v.is_finite())),
            ("encoder.conv2", self.conv2.weight.is_finite() && self.conv2.bias.iter().all(|v| v.is_finite())),
            ("decoder.token_embedding", self.token_embedding.is_finite()),
            ("decoder.positional_embedding", self.positional_embedding.is_finite()),
        ];
        if let Some((name, _)) = finite.iter().find(|(_, ok)| !ok) {
            return Err(ModelError::NonFinite(name.to_string()));
        }
        Ok(())
    }

    /// Gaussian-initialised weights with unit layer norms, reproducible from `seed`.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.d_model;
        let mut init = Init::new(seed);

        let conv1 = Conv1d {
            weight: init.mat(d, config.n_mels * 3, config.n_mels * 3),
            bias: vec![0.0; d],
        };
        let conv2 = Conv1d {
            weight: init.mat(d, d * 3, d * 3),
            bias: vec![0.0; d],
        };
        let encoder_layers = (0..config.n_audio_layers)
            .map(|_| EncoderLayer {
                attn_ln: LayerNorm::unit(d),
                attn: init.attention(d),
                mlp_ln: LayerNorm::unit(d),
                mlp: init.mlp(d, config.d_mlp()),
            })
            .collect();
        let decoder_layers = (0..config.n_text_layers)
            .map(|_| DecoderLayer {
                attn_ln: LayerNorm::unit(d),
                attn: init.attention(d),
                cross_attn_ln: LayerNorm::unit(d),
                cross_attn: init.attention(d),
                mlp_ln: LayerNorm::unit(d),
                mlp: init.mlp(d, config.d_mlp()),
            })
            .collect();
        let token_embedding = init.mat(config.n_vocab, d, d);
        let positional_embedding = init.mat(config.n_text_ctx, d, d * 4);

        let bundle = Self {
            config,
            conv1,
            conv2,
            encoder_layers,
            ln_post: LayerNorm::unit(d),
            token_embedding,
            positional_embedding,
            decoder_layers,
            ln_dec: LayerNorm::unit(d),
        };
        bundle.validate()?;
        Ok(bundle)
    }

    /// Replaces the dense weight of every encoder layer of `kind` with an
    /// exactly rank-`rank` matrix whose nonzero singular values are all equal.
    pub fn make_encoder_low_rank(&mut self, kind: LinearKind, rank: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut self.encoder_layers {
            let target = layer.linear_mut(kind);
            let (d_in, d_out) = (target.d_in(), target.d_out());
            let u = random_orthonormal(d_out, rank, &mut rng);
            let v = random_orthonormal(d_in, rank, &mut rng);
            let scale = (d_in as f32 / rank as f32).sqrt() / (d_in as f32).sqrt();
            let w = Matrix::from_fn(d_out, d_in, |r, c| {
                (0..rank).map(|k| u.get(r, k) * v.get(c, k)).sum::<f32>() * scale
            });
            let b = target.bias().to_vec();
            *target = LinearLayer::Dense { w, b };
        }
    }
}

/// `n × k` matrix with orthonormal columns (QR of a Gaussian draw).
pub fn random_orthonormal(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let dist = Normal::new(0.0f64, 1.0).unwrap();
    let g = nalgebra::DMatrix::from_fn(n, k, |_, _| dist.sample(rng));
    let q = g.qr().q();
    Matrix::from_fn(n, k, |r, c| q[(r, c)] as f32)
}

struct Init {
    weights: ChaCha8Rng,
    biases: ChaCha8Rng,
}

impl Init {
    fn new(seed: u64) -> Self {
        Self {
            weights: ChaCha8Rng::seed_from_u64(seed),
            biases: ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15),
        }
    }

    fn mat(&mut self, rows: usize, cols: usize, fan_in: usize) -> Matrix {
        let dist = Normal::new(0.0f32, 1.0 / (fan_in as f32).sqrt()).unwrap();
        Matrix::from_fn(rows, cols, |_, _| dist.sample(&mut self.weights))
    }

    fn linear(&mut self, d_in: usize, d_out: usize) -> LinearLayer {
        let dist = Normal::new(0.0f32, 0.02).unwrap();
        LinearLayer::Dense {
            w: self.mat(d_out, d_in, d_in),
            b: (0..d_out).map(|_| dist.sample(&mut self.biases)).collect(),
        }
    }

    fn attention(&mut self, d: usize) -> Attention {
        Attention {
            query: self.linear(d, d),
            key: self.linear(d, d),
            value: self.linear(d, d),
            out: self.linear(d, d),
        }
    }

    fn mlp(&mut self, d: usize, d_mlp: usize) -> Mlp {
        Mlp {
            fc1: self.linear(d, d_mlp),
            fc2: self.linear(d_mlp, d),
        }
    }
}
