use serde::Serialize;

use super::{ByteTokenizer, DecoderLayer, ModelBundle, ModelError, Tokenizer};
use crate::audio::{log_mel_frames, AudioClip};
use crate::tensor::{add_assign, attention, gelu_in_place, layer_norm, matmul_transposed, FlopCounter, Matrix};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Transcript {
    /// Generated ids, start tokens excluded, end-of-text included when emitted.
    pub token_ids: Vec<u32>,
    pub text: String,
    pub n_decoded_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeOptions {
    pub sot_sequence: Vec<u32>,
    pub eot: u32,
    pub max_tokens: usize,
}

/// Self-attention key/value cache of one decoder layer.
struct Cache {
    k: Vec<f32>,
    v: Vec<f32>,
}

/// Runs one position through the decoder; returns the final hidden row.
fn step(
    bundle: &ModelBundle,
    token: u32,
    pos: usize,
    cross: &[(Matrix, Matrix)],
    caches: &mut [Cache],
    counter: &mut FlopCounter,
) -> Result<Matrix, ModelError> {
    let c = &bundle.config;
    let d = c.d_model;
    if token as usize >= c.n_vocab {
        return Err(ModelError::Shape(format!("token {token} outside vocabulary of {}", c.n_vocab)));
    }
    let mut h = Matrix::from_vec(1, d, bundle.token_embedding.row(token as usize).to_vec());
    add_assign(
        &mut h,
        &Matrix::from_vec(1, d, bundle.positional_embedding.row(pos).to_vec()),
        counter,
    );
    for ((layer, (ck, cv)), cache) in bundle.decoder_layers.iter().zip(cross).zip(caches.iter_mut()) {
        block(layer, &mut h, ck, cv, cache, c.n_heads, counter)?;
    }
    Ok(layer_norm(&h, &bundle.ln_dec.gain, &bundle.ln_dec.offset, counter))
}

fn block(
    layer: &DecoderLayer,
    h: &mut Matrix,
    cross_k: &Matrix,
    cross_v: &Matrix,
    cache: &mut Cache,
    n_heads: usize,
    counter: &mut FlopCounter,
) -> Result<(), ModelError> {
    let d = h.cols();
    let x = layer_norm(h, &layer.attn_ln.gain, &layer.attn_ln.offset, counter);
    let q = layer.attn.query.apply_counted(&x, counter)?;
    cache.k.extend_from_slice(layer.attn.key.apply_counted(&x, counter)?.as_slice());
    cache.v.extend_from_slice(layer.attn.value.apply_counted(&x, counter)?.as_slice());
    let t = cache.k.len() / d;
    let k = Matrix::from_vec(t, d, cache.k.clone());
    let v = Matrix::from_vec(t, d, cache.v.clone());
    let a = attention(&q, &k, &v, n_heads, None, counter);
    add_assign(h, &layer.attn.out.apply_counted(&a, counter)?, counter);

    let x = layer_norm(h, &layer.cross_attn_ln.gain, &layer.cross_attn_ln.offset, counter);
    let q = layer.cross_attn.query.apply_counted(&x, counter)?;
    let a = attention(&q, cross_k, cross_v, n_heads, None, counter);
    add_assign(h, &layer.cross_attn.out.apply_counted(&a, counter)?, counter);

    let x = layer_norm(h, &layer.mlp_ln.gain, &layer.mlp_ln.offset, counter);
    let mut m = layer.mlp.fc1.apply_counted(&x, counter)?;
    gelu_in_place(&mut m, counter);
    add_assign(h, &layer.mlp.fc2.apply_counted(&m, counter)?, counter);
    Ok(())
}

/// Lowest index among the maximal entries.
fn argmax(xs: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy decoding over raw ids. Decoding also stops when the text context
/// is full.
pub fn decode_tokens(
    bundle: &ModelBundle,
    enc: &Matrix,
    opts: &DecodeOptions,
    counter: &mut FlopCounter,
) -> Result<Vec<u32>, ModelError> {
    let c = &bundle.config;
    if enc.shape() != (c.n_audio_ctx, c.d_model) {
        return Err(ModelError::Shape(format!(
            "encoder output is {:?}, decoder expects {:?}",
            enc.shape(),
            (c.n_audio_ctx, c.d_model)
        )));
    }
    if opts.max_tokens > c.n_text_ctx {
        return Err(ModelError::Shape(format!(
            "max_tokens {} exceeds text context {}",
            opts.max_tokens, c.n_text_ctx
        )));
    }
    if opts.sot_sequence.is_empty() || opts.sot_sequence.len() > c.n_text_ctx {
        return Err(ModelError::Shape("start sequence must fit the text context".into()));
    }
    if opts.max_tokens == 0 {
        return Ok(Vec::new());
    }

    let cross: Vec<(Matrix, Matrix)> = bundle
        .decoder_layers
        .iter()
        .map(|l| Ok((l.cross_attn.key.apply_counted(enc, counter)?, l.cross_attn.value.apply_counted(enc, counter)?)))
        .collect::<Result<_, ModelError>>()?;
    let mut caches: Vec<Cache> = bundle
        .decoder_layers
        .iter()
        .map(|_| Cache { k: Vec::new(), v: Vec::new() })
        .collect();

    let mut pos = 0;
    let mut last = Matrix::zeros(1, c.d_model);
    for &tok in &opts.sot_sequence {
        last = step(bundle, tok, pos, &cross, &mut caches, counter)?;
        pos += 1;
    }
    let mut out = Vec::new();
    loop {
        let logits = matmul_transposed(&last, &bundle.token_embedding, None, counter);
        let next = argmax(logits.as_slice());
        out.push(next);
        if next == opts.eot || out.len() == opts.max_tokens || pos == c.n_text_ctx {
            break;
        }
        last = step(bundle, next, pos, &cross, &mut caches, counter)?;
        pos += 1;
    }
    Ok(out)
}

/// Greedy decoding with the byte tokenizer sized to the bundle's vocabulary.
pub fn greedy_decode(bundle: &ModelBundle, enc: &Matrix, max_tokens: usize) -> Result<Transcript, ModelError> {
    let tok = ByteTokenizer::new(bundle.config.n_vocab);
    greedy_decode_with(bundle, enc, max_tokens, &tok, &mut FlopCounter::new())
}

pub fn greedy_decode_with(
    bundle: &ModelBundle,
    enc: &Matrix,
    max_tokens: usize,
    tokenizer: &dyn Tokenizer,
    counter: &mut FlopCounter,
) -> Result<Transcript, ModelError> {
    let opts = DecodeOptions {
        sot_sequence: tokenizer.sot_sequence(),
        eot: tokenizer.eot(),
        max_tokens,
    };
    let token_ids = decode_tokens(bundle, enc, &opts, counter)?;
    Ok(Transcript {
        text: tokenizer.decode(&token_ids),
        n_decoded_tokens: token_ids.len(),
        token_ids,
    })
}

/// Features, encoder and greedy decoder for one clip.
pub fn transcribe(
    bundle: &ModelBundle,
    clip: &AudioClip,
    tokenizer: &dyn Tokenizer,
    max_tokens: usize,
    counter: &mut FlopCounter,
) -> Result<Transcript, ModelError> {
    let mel = log_mel_frames(clip, bundle.config.n_frames())?;
    let enc = super::encode_counted(bundle, &mel, counter)?;
    greedy_decode_with(bundle, &enc, max_tokens, tokenizer, counter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LinearKind, LinearLayer, ModelConfig};
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Decoder whose blocks contribute nothing, so the hidden state at `pos`
    /// is the layer-normed sum of token and position embeddings.
    fn table_model(targets: &[u32]) -> (ModelBundle, ByteTokenizer) {
        let cfg = ModelConfig::toy(1, 64, 4);
        let mut b = ModelBundle::random(cfg, 9).unwrap();
        for layer in &mut b.decoder_layers {
            for kind in LinearKind::ALL {
                let l = layer.linear_mut(kind);
                *l = LinearLayer::zeros(l.d_in(), l.d_out());
            }
            layer.cross_attn.out = LinearLayer::zeros(64, 64);
        }
        let tok = ByteTokenizer::new(cfg.n_vocab);
        // Zero-mean, mutually orthogonal rows for the tokens in play.
        b.token_embedding = Matrix::zeros(cfg.n_vocab, 64);
        let mut distinct: Vec<u32> = targets.to_vec();
        distinct.sort();
        distinct.dedup();
        for (slot, &t) in distinct.iter().enumerate() {
            b.token_embedding.set(t as usize, 2 * slot, 1.0);
            b.token_embedding.set(t as usize, 2 * slot + 1, -1.0);
        }
        b.positional_embedding = Matrix::zeros(cfg.n_text_ctx, 64);
        for pos in 0..cfg.n_text_ctx {
            let t = targets[pos.min(targets.len() - 1)] as usize;
            for c in 0..64 {
                b.positional_embedding.set(pos, c, 10.0 * b.token_embedding.get(t, c));
            }
        }
        (b, tok)
    }

    fn enc_for(b: &ModelBundle) -> Matrix {
        Matrix::from_fn(b.config.n_audio_ctx, b.config.d_model, |r, c| ((r * 7 + c) % 5) as f32 - 2.0)
    }

    #[test]
    fn forced_table_sequence() {
        let eot = ByteTokenizer::new(crate::model::BYTE_VOCAB).eot();
        let (b, tok) = table_model(&[5, 9, eot]);
        let t = greedy_decode_with(&b, &enc_for(&b), 20, &tok, &mut FlopCounter::new()).unwrap();
        assert_eq!(t.token_ids, vec![5, 9, eot]);
        assert_eq!(t.n_decoded_tokens, 3);
        assert_eq!(t.text, "\u{5}\t");
    }

    #[test]
    fn immediate_end_of_text() {
        let eot = ByteTokenizer::new(crate::model::BYTE_VOCAB).eot();
        let (b, _) = table_model(&[eot]);
        let t = greedy_decode(&b, &enc_for(&b), 10).unwrap();
        assert_eq!(t.text, "");
        assert_eq!(t.n_decoded_tokens, 1);
    }

    #[test]
    fn zero_budget_and_limits() {
        let b = ModelBundle::random(ModelConfig::toy(1, 64, 4), 2).unwrap();
        let enc = enc_for(&b);
        let t = greedy_decode(&b, &enc, 0).unwrap();
        assert!(t.token_ids.is_empty() && t.text.is_empty() && t.n_decoded_tokens == 0);
        assert!(greedy_decode(&b, &enc, b.config.n_text_ctx + 1).is_err());
        assert!(greedy_decode(&b, &Matrix::zeros(3, 64), 4).is_err());
        let t = greedy_decode(&b, &enc, b.config.n_text_ctx).unwrap();
        assert!(t.n_decoded_tokens <= b.config.n_text_ctx);
    }

    #[test]
    fn argmax_ties_pick_lowest_id() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0; 4]), 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn vocabulary_permutation_permutes_ids(seed in 0u64..1000) {
            let b = ModelBundle::random(ModelConfig::toy(1, 32, 2), seed).unwrap();
            let n = b.config.n_vocab;
            let enc = Matrix::from_fn(b.config.n_audio_ctx, 32, |r, c| (((r + 3 * c) as u64 + seed) % 7) as f32 * 0.3 - 1.0);
            let mut perm: Vec<u32> = (0..n as u32).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let mut pb = b.clone();
            for i in 0..n {
                pb.token_embedding.row_mut(perm[i] as usize).copy_from_slice(b.token_embedding.row(i));
            }
            let opts = DecodeOptions { sot_sequence: vec![256], eot: 257, max_tokens: 12 };
            let popts = DecodeOptions { sot_sequence: vec![perm[256]], eot: perm[257], max_tokens: 12 };
            let a = decode_tokens(&b, &enc, &opts, &mut FlopCounter::new()).unwrap();
            let p = decode_tokens(&pb, &enc, &popts, &mut FlopCounter::new()).unwrap();
            prop_assert_eq!(a.iter().map(|&t| perm[t as usize]).collect::<Vec<_>>(), p);
        }
    }
}
