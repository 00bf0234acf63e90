//! Analytic FLOP model and the instrumented counter it is checked against.
//!
//! Convention: multiply-add 2, bias add 1, GELU 8 per element, layer norm
//! 5 per element, softmax 5 per element; residual, position and query
//! scaling are 1 per element. Attention costs `2·Tq·Tk·d` for the scores
//! and the same again for the weighted values.

use serde::Serialize;

use crate::audio::{MelFeatures, HOP_LENGTH, N_FFT, N_FRAMES_30S, N_MELS};
use crate::model::{
    decode_tokens, encode_counted, ByteTokenizer, DecodeOptions, LinearKind, LinearLayer, ModelBundle,
    ModelError, Tokenizer, Transcript,
};
use crate::tensor::FlopCounter;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinearVariant {
    Dense,
    Factored(usize),
}

impl LinearVariant {
    pub fn of(layer: &LinearLayer) -> Self {
        layer.rank().map_or(LinearVariant::Dense, LinearVariant::Factored)
    }
}

pub fn flops_linear(d_in: usize, d_out: usize, rows: usize, variant: LinearVariant) -> u64 {
    let (d_in, d_out, rows) = (d_in as u64, d_out as u64, rows as u64);
    let mults = match variant {
        LinearVariant::Dense => 2 * rows * d_in * d_out,
        LinearVariant::Factored(k) => 2 * rows * k as u64 * (d_in + d_out),
    };
    mults + rows * d_out
}

/// Log-mel cost of one 30 s window: window multiply, a `5·N·log2 N` FFT,
/// power spectrum, filterbank and log/clamp/scale.
pub fn feature_flops() -> u64 {
    let n = N_FFT as f64;
    let bins = (N_FFT / 2 + 1) as u64;
    let fft = (5.0 * n * n.log2()).round() as u64;
    let per_frame = N_FFT as u64 + fft + 3 * bins + 2 * N_MELS as u64 * bins + 4 * N_MELS as u64;
    debug_assert_eq!(N_FRAMES_30S * HOP_LENGTH, 480_000);
    N_FRAMES_30S as u64 * per_frame
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BreakdownEntry {
    pub component: String,
    pub layer: Option<usize>,
    pub op: String,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopReport {
    pub schema_version: u32,
    pub n_decoded_tokens: usize,
    pub feature_flops: u64,
    pub encoder_flops: u64,
    pub decoder_flops: u64,
    /// Features plus model.
    pub total_flops: u64,
    /// Encoder plus decoder.
    pub model_flops: u64,
    pub gflops: f64,
    pub model_gflops: f64,
    pub encoder_categories: FlopCounter,
    pub decoder_categories: FlopCounter,
    pub breakdown: Vec<BreakdownEntry>,
}

impl FlopReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn breakdown_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["component", "layer", "op", "flops"]).unwrap();
        for e in &self.breakdown {
            let layer = e.layer.map(|l| l.to_string()).unwrap_or_default();
            w.write_record([e.component.as_str(), &layer, &e.op, &e.flops.to_string()]).unwrap();
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }
}

#[derive(Default)]
struct Acc {
    counter: FlopCounter,
    entries: Vec<BreakdownEntry>,
}

#[derive(Clone, Copy)]
enum Cat {
    Linear,
    Attention,
    Softmax,
    Gelu,
    LayerNorm,
    Elementwise,
}

impl Acc {
    fn add(&mut self, component: &str, layer: Option<usize>, op: &str, cat: Cat, flops: u64) {
        let slot = match cat {
            Cat::Linear => &mut self.counter.linear,
            Cat::Attention => &mut self.counter.attention,
            Cat::Softmax => &mut self.counter.softmax,
            Cat::Gelu => &mut self.counter.gelu,
            Cat::LayerNorm => &mut self.counter.layernorm,
            Cat::Elementwise => &mut self.counter.elementwise,
        };
        *slot += flops;
        if let Some(e) = self
            .entries
            .iter_mut()
            .find(|e| e.component == component && e.layer == layer && e.op == op)
        {
            e.flops += flops;
        } else {
            self.entries.push(BreakdownEntry {
                component: component.to_string(),
                layer,
                op: op.to_string(),
                flops,
            });
        }
    }
}

fn lin(layer: &LinearLayer, rows: usize) -> u64 {
    flops_linear(layer.d_in(), layer.d_out(), rows, LinearVariant::of(layer))
}

fn encoder_flops(bundle: &ModelBundle, acc: &mut Acc) {
    let c = &bundle.config;
    let (t, d, h) = (c.n_audio_ctx as u64, c.d_model as u64, c.n_heads as u64);
    let f = c.n_frames();
    let conv = |rows: usize, c_in: usize| flops_linear(3 * c_in, c.d_model, rows, LinearVariant::Dense);
    acc.add("encoder", None, "conv1", Cat::Linear, conv(f, c.n_mels));
    acc.add("encoder", None, "gelu", Cat::Gelu, 8 * f as u64 * d);
    acc.add("encoder", None, "conv2", Cat::Linear, conv(c.n_audio_ctx, c.d_model));
    acc.add("encoder", None, "gelu", Cat::Gelu, 8 * t * d);
    acc.add("encoder", None, "positions", Cat::Elementwise, t * d);
    for (i, layer) in bundle.encoder_layers.iter().enumerate() {
        let l = Some(i);
        acc.add("encoder", l, "layernorm", Cat::LayerNorm, 2 * 5 * t * d);
        for kind in LinearKind::ALL {
            acc.add("encoder", l, kind.as_str(), Cat::Linear, lin(layer.linear(kind), c.n_audio_ctx));
        }
        acc.add("encoder", l, "attention", Cat::Elementwise, t * d);
        acc.add("encoder", l, "attention", Cat::Attention, 4 * t * t * d);
        acc.add("encoder", l, "softmax", Cat::Softmax, 5 * t * t * h);
        acc.add("encoder", l, "gelu", Cat::Gelu, 8 * t * c.d_mlp() as u64);
        acc.add("encoder", l, "residual", Cat::Elementwise, 2 * t * d);
    }
    acc.add("encoder", None, "ln_post", Cat::LayerNorm, 5 * t * d);
}

fn decoder_flops(bundle: &ModelBundle, n_decoded_tokens: usize, prompt_len: usize, acc: &mut Acc) {
    if n_decoded_tokens == 0 {
        return;
    }
    let c = &bundle.config;
    let (ta, d, h) = (c.n_audio_ctx as u64, c.d_model as u64, c.n_heads as u64);
    for (i, layer) in bundle.decoder_layers.iter().enumerate() {
        let k = lin(&layer.cross_attn.key, c.n_audio_ctx) + lin(&layer.cross_attn.value, c.n_audio_ctx);
        acc.add("decoder", Some(i), "cross_kv", Cat::Linear, k);
    }
    // Every prompt token and every generated token except the last is fed.
    let fed = prompt_len + n_decoded_tokens - 1;
    for pos in 0..fed {
        let seen = pos as u64 + 1;
        acc.add("decoder", None, "embedding", Cat::Elementwise, d);
        for (i, layer) in bundle.decoder_layers.iter().enumerate() {
            let l = Some(i);
            acc.add("decoder", l, "layernorm", Cat::LayerNorm, 3 * 5 * d);
            for kind in LinearKind::ALL {
                acc.add("decoder", l, kind.as_str(), Cat::Linear, lin(layer.linear(kind), 1));
            }
            acc.add("decoder", l, "attention", Cat::Elementwise, d);
            acc.add("decoder", l, "attention", Cat::Attention, 4 * seen * d);
            acc.add("decoder", l, "softmax", Cat::Softmax, 5 * seen * h);
            let cross = lin(&layer.cross_attn.query, 1) + lin(&layer.cross_attn.out, 1);
            acc.add("decoder", l, "cross_q_out", Cat::Linear, cross);
            acc.add("decoder", l, "cross_attention", Cat::Elementwise, d);
            acc.add("decoder", l, "cross_attention", Cat::Attention, 4 * ta * d);
            acc.add("decoder", l, "cross_softmax", Cat::Softmax, 5 * ta * h);
            acc.add("decoder", l, "gelu", Cat::Gelu, 8 * c.d_mlp() as u64);
            acc.add("decoder", l, "residual", Cat::Elementwise, 3 * d);
        }
        acc.add("decoder", None, "ln", Cat::LayerNorm, 5 * d);
    }
    let logits = 2 * d * c.n_vocab as u64 * n_decoded_tokens as u64;
    acc.add("decoder", None, "logits", Cat::Linear, logits);
}

/// Analytic cost with a one-token start sequence.
pub fn flops_model(bundle: &ModelBundle, n_decoded_tokens: usize) -> FlopReport {
    flops_model_with(bundle, n_decoded_tokens, 1)
}

pub fn flops_model_with(bundle: &ModelBundle, n_decoded_tokens: usize, prompt_len: usize) -> FlopReport {
    let mut enc = Acc::default();
    encoder_flops(bundle, &mut enc);
    let mut dec = Acc::default();
    decoder_flops(bundle, n_decoded_tokens, prompt_len, &mut dec);
    let feature_flops = feature_flops();
    let encoder_flops = enc.counter.total();
    let decoder_flops = dec.counter.total();
    let model_flops = encoder_flops + decoder_flops;
    let total_flops = feature_flops + model_flops;
    let mut breakdown = vec![BreakdownEntry {
        component: "features".into(),
        layer: None,
        op: "log_mel".into(),
        flops: feature_flops,
    }];
    breakdown.extend(enc.entries);
    breakdown.extend(dec.entries);
    FlopReport {
        schema_version: 1,
        n_decoded_tokens,
        feature_flops,
        encoder_flops,
        decoder_flops,
        total_flops,
        model_flops,
        gflops: total_flops as f64 / 1e9,
        model_gflops: model_flops as f64 / 1e9,
        encoder_categories: enc.counter,
        decoder_categories: dec.counter,
        breakdown,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstrumentedCount {
    pub transcript: Transcript,
    pub encoder: FlopCounter,
    pub decoder: FlopCounter,
    /// Encoder plus decoder.
    pub counted_flops: u64,
}

/// Runs inference with per-call counting; features are not included.
pub fn instrumented_count(
    bundle: &ModelBundle,
    mel: &MelFeatures,
    max_tokens: usize,
) -> Result<InstrumentedCount, ModelError> {
    instrumented_count_with(bundle, mel, max_tokens, &ByteTokenizer::new(bundle.config.n_vocab))
}

pub fn instrumented_count_with(
    bundle: &ModelBundle,
    mel: &MelFeatures,
    max_tokens: usize,
    tokenizer: &dyn Tokenizer,
) -> Result<InstrumentedCount, ModelError> {
    let mut encoder = FlopCounter::new();
    let enc = encode_counted(bundle, mel, &mut encoder)?;
    let mut decoder = FlopCounter::new();
    let opts = DecodeOptions {
        sot_sequence: tokenizer.sot_sequence(),
        eot: tokenizer.eot(),
        max_tokens,
    };
    let token_ids = decode_tokens(bundle, &enc, &opts, &mut decoder)?;
    let transcript = Transcript {
        text: tokenizer.decode(&token_ids),
        n_decoded_tokens: token_ids.len(),
        token_ids,
    };
    Ok(InstrumentedCount {
        transcript,
        counted_flops: encoder.total() + decoder.total(),
        encoder,
        decoder,
    })
}
