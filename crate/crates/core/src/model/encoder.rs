use super::{EncoderLayer, LinearKind, LinearLayer, ModelBundle, ModelError};
use crate::audio::MelFeatures;
use crate::tensor::{add_assign, attention, conv1d_k3, gelu_in_place, layer_norm, FlopCounter, Matrix};

/// Whisper's fixed sinusoidal table: `[sin | cos]` halves, `[length × channels]`.
pub fn sinusoids(length: usize, channels: usize) -> Matrix {
    assert!(channels % 2 == 0 && channels >= 4, "channels must be even and ≥ 4");
    let half = channels / 2;
    let inc = (10_000f64).ln() / (half - 1) as f64;
    Matrix::from_fn(length, channels, |t, c| {
        let i = c % half;
        let angle = t as f64 * (-inc * i as f64).exp();
        (if c < half { angle.sin() } else { angle.cos() }) as f32
    })
}

pub fn encode(bundle: &ModelBundle, mel: &MelFeatures) -> Result<Matrix, ModelError> {
    encode_counted(bundle, mel, &mut FlopCounter::new())
}

pub fn encode_counted(
    bundle: &ModelBundle,
    mel: &MelFeatures,
    counter: &mut FlopCounter,
) -> Result<Matrix, ModelError> {
    encode_traced(bundle, mel, counter, &mut |_, _, _| {})
}

/// Encoder forward pass; `observer(layer, kind, input)` sees the input of
/// every encoder projection before it is applied.
pub fn encode_traced(
    bundle: &ModelBundle,
    mel: &MelFeatures,
    counter: &mut FlopCounter,
    observer: &mut dyn FnMut(usize, LinearKind, &Matrix),
) -> Result<Matrix, ModelError> {
    let c = &bundle.config;
    if mel.n_mels() != c.n_mels || mel.n_frames() != c.n_frames() {
        return Err(ModelError::Shape(format!(
            "mel is {}×{}, encoder expects {}×{}",
            mel.n_mels(),
            mel.n_frames(),
            c.n_mels,
            c.n_frames()
        )));
    }
    let x = mel.values().transpose();
    let mut h = conv1d_k3(&x, &bundle.conv1.weight, &bundle.conv1.bias, 1, counter);
    gelu_in_place(&mut h, counter);
    let mut h = conv1d_k3(&h, &bundle.conv2.weight, &bundle.conv2.bias, 2, counter);
    gelu_in_place(&mut h, counter);
    add_assign(&mut h, &sinusoids(c.n_audio_ctx, c.d_model), counter);

    for (i, layer) in bundle.encoder_layers.iter().enumerate() {
        encoder_block(layer, &mut h, c.n_heads, counter, &mut |kind, x| observer(i, kind, x))?;
    }
    Ok(layer_norm(&h, &bundle.ln_post.gain, &bundle.ln_post.offset, counter))
}

fn encoder_block(
    layer: &EncoderLayer,
    h: &mut Matrix,
    n_heads: usize,
    counter: &mut FlopCounter,
    observer: &mut dyn FnMut(LinearKind, &Matrix),
) -> Result<(), ModelError> {
    let mut apply = |kind: LinearKind, l: &LinearLayer, x: &Matrix, counter: &mut FlopCounter| {
        observer(kind, x);
        l.apply_counted(x, counter)
    };
    let x = layer_norm(h, &layer.attn_ln.gain, &layer.attn_ln.offset, counter);
    let q = apply(LinearKind::AttnQ, &layer.attn.query, &x, counter)?;
    let k = apply(LinearKind::AttnK, &layer.attn.key, &x, counter)?;
    let v = apply(LinearKind::AttnV, &layer.attn.value, &x, counter)?;
    let a = attention(&q, &k, &v, n_heads, None, counter);
    let o = apply(LinearKind::AttnOut, &layer.attn.out, &a, counter)?;
    add_assign(h, &o, counter);

    let x = layer_norm(h, &layer.mlp_ln.gain, &layer.mlp_ln.offset, counter);
    let mut m = apply(LinearKind::MlpFc1, &layer.mlp.fc1, &x, counter)?;
    gelu_in_place(&mut m, counter);
    let o = apply(LinearKind::MlpFc2, &layer.mlp.fc2, &m, counter)?;
    add_assign(h, &o, counter);
    Ok(())
}
