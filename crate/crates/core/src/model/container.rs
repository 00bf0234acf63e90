//! `EAKW` weight container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "EAKW" | version u32 | 8 × u32 config | tensor count u32
//! per tensor: name_len u32 | name (UTF-8) | rank u32 | dims u32 × rank | dtype u32
//! payloads: f32 data of each tensor, in directory order
//! ```
//!
//! Factored projections are stored as `<stem>.lr_a` and `<stem>.lr_b`
//! instead of `<stem>.weight`; biases are always `<stem>.bias`.

use std::collections::BTreeMap;
use std::path::Path;

use super::{
    Attention, Conv1d, DecoderLayer, EncoderLayer, LayerNorm, LinearKind, LinearLayer, Mlp,
    ModelBundle, ModelConfig, ModelError,
};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 4] = b"EAKW";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u32 = 0;

/// One named tensor as it appears in the container.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

fn push_linear(out: &mut Vec<TensorEntry>, stem: &str, layer: &LinearLayer) {
    match layer {
        LinearLayer::Dense { w, b } => {
            out.push(entry(format!("{stem}.weight"), vec![w.rows(), w.cols()], w.as_slice()));
            out.push(entry(format!("{stem}.bias"), vec![b.len()], b));
        }
        LinearLayer::Factored { a, b_factor, bias } => {
            out.push(entry(format!("{stem}.lr_a"), vec![a.rows(), a.cols()], a.as_slice()));
            out.push(entry(
                format!("{stem}.lr_b"),
                vec![b_factor.rows(), b_factor.cols()],
                b_factor.as_slice(),
            ));
            out.push(entry(format!("{stem}.bias"), vec![bias.len()], bias));
        }
    }
}

fn entry(name: String, dims: Vec<usize>, data: &[f32]) -> TensorEntry {
    TensorEntry {
        name,
        dims,
        data: data.to_vec(),
    }
}

fn push_ln(out: &mut Vec<TensorEntry>, stem: &str, ln: &LayerNorm) {
    out.push(entry(format!("{stem}.weight"), vec![ln.gain.len()], &ln.gain));
    out.push(entry(format!("{stem}.bias"), vec![ln.offset.len()], &ln.offset));
}

fn push_attention(out: &mut Vec<TensorEntry>, stem: &str, attn: &Attention) {
    push_linear(out, &format!("{stem}.query"), &attn.query);
    push_linear(out, &format!("{stem}.key"), &attn.key);
    push_linear(out, &format!("{stem}.value"), &attn.value);
    push_linear(out, &format!("{stem}.out"), &attn.out);
}

/// Tensors in canonical order; saving always uses this order.
pub fn tensors(bundle: &ModelBundle) -> Vec<TensorEntry> {
    let mut out = Vec::new();
    let c = &bundle.config;
    for (name, conv) in [("encoder.conv1", &bundle.conv1), ("encoder.conv2", &bundle.conv2)] {
        out.push(entry(
            format!("{name}.weight"),
            vec![conv.c_out(), conv.c_in(), 3],
            conv.weight.as_slice(),
        ));
        out.push(entry(format!("{name}.bias"), vec![conv.bias.len()], &conv.bias));
    }
    for (i, layer) in bundle.encoder_layers.iter().enumerate() {
        let p = format!("encoder.blocks.{i}");
        push_ln(&mut out, &format!("{p}.attn_ln"), &layer.attn_ln);
        push_attention(&mut out, &format!("{p}.attn"), &layer.attn);
        push_ln(&mut out, &format!("{p}.mlp_ln"), &layer.mlp_ln);
        push_linear(&mut out, &format!("{p}.mlp.fc1"), &layer.mlp.fc1);
        push_linear(&mut out, &format!("{p}.mlp.fc2"), &layer.mlp.fc2);
    }
    push_ln(&mut out, "encoder.ln_post", &bundle.ln_post);
    out.push(entry(
        "decoder.token_embedding".into(),
        vec![c.n_vocab, c.d_model],
        bundle.token_embedding.as_slice(),
    ));
    out.push(entry(
        "decoder.positional_embedding".into(),
        vec![c.n_text_ctx, c.d_model],
        bundle.positional_embedding.as_slice(),
    ));
    for (i, layer) in bundle.decoder_layers.iter().enumerate() {
        let p = format!("decoder.blocks.{i}");
        push_ln(&mut out, &format!("{p}.attn_ln"), &layer.attn_ln);
        push_attention(&mut out, &format!("{p}.attn"), &layer.attn);
        push_ln(&mut out, &format!("{p}.cross_attn_ln"), &layer.cross_attn_ln);
        push_attention(&mut out, &format!("{p}.cross_attn"), &layer.cross_attn);
        push_ln(&mut out, &format!("{p}.mlp_ln"), &layer.mlp_ln);
        push_linear(&mut out, &format!("{p}.mlp.fc1"), &layer.mlp.fc1);
        push_linear(&mut out, &format!("{p}.mlp.fc2"), &layer.mlp.fc2);
    }
    push_ln(&mut out, "decoder.ln", &bundle.ln_dec);
    out
}

pub fn to_bytes(bundle: &ModelBundle) -> Vec<u8> {
    let entries = tensors(bundle);
    let payload: usize = entries.iter().map(|e| e.data.len() * 4).sum();
    let mut buf = Vec::with_capacity(payload + 4096);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for v in bundle.config.as_u32s() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in &entries {
        buf.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(e.name.as_bytes());
        buf.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
        for &d in &e.dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        buf.extend_from_slice(&DTYPE_F32.to_le_bytes());
    }
    for e in &entries {
        for v in &e.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn save_bundle(bundle: &ModelBundle, path: impl AsRef<Path>) -> Result<(), ModelError> {
    std::fs::write(path, to_bytes(bundle))?;
    Ok(())
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<ModelBundle, ModelError> {
    let bytes = std::fs::read(path.as_ref())?;
    from_bytes(&bytes)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| ModelError::Format(format!("truncated container at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parses the tensor directory without building a bundle.
pub fn read_entries(bytes: &[u8]) -> Result<(ModelConfig, Vec<TensorEntry>), ModelError> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(ModelError::BadMagic);
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(ModelError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let mut cfg = [0u32; 8];
    for v in &mut cfg {
        *v = cur.u32()?;
    }
    let config = ModelConfig::from_u32s(cfg);
    config.validate()?;

    let count = cur.u32()? as usize;
    let mut dir = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| ModelError::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u32()? as usize;
        if rank > 8 {
            return Err(ModelError::Format(format!("{name}: rank {rank} too large")));
        }
        let dims = (0..rank)
            .map(|_| cur.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let dtype = cur.u32()?;
        if dtype != DTYPE_F32 {
            return Err(ModelError::Format(format!("{name}: unsupported dtype tag {dtype}")));
        }
        dir.push((name, dims));
    }
    let mut entries = Vec::with_capacity(dir.len());
    for (name, dims) in dir {
        let n: usize = dims.iter().product();
        let raw = cur.take(n.checked_mul(4).ok_or_else(|| ModelError::Format("tensor too large".into()))?)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite(name));
        }
        entries.push(TensorEntry { name, dims, data });
    }
    if cur.pos != bytes.len() {
        return Err(ModelError::Format(format!(
            "{} trailing bytes after payload",
            bytes.len() - cur.pos
        )));
    }
    Ok((config, entries))
}

struct Tensors(BTreeMap<String, TensorEntry>);

impl Tensors {
    fn take(&mut self, name: &str, dims: &[usize]) -> Result<Vec<f32>, ModelError> {
        let e = self
            .0
            .remove(name)
            .ok_or_else(|| ModelError::Format(format!("missing tensor {name}")))?;
        if e.dims != dims {
            return Err(ModelError::Shape(format!(
                "{name}: dims {:?}, config implies {dims:?}",
                e.dims
            )));
        }
        Ok(e.data)
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<Matrix, ModelError> {
        Ok(Matrix::from_vec(rows, cols, self.take(name, &[rows, cols])?))
    }

    fn ln(&mut self, stem: &str, d: usize) -> Result<LayerNorm, ModelError> {
        Ok(LayerNorm {
            gain: self.take(&format!("{stem}.weight"), &[d])?,
            offset: self.take(&format!("{stem}.bias"), &[d])?,
        })
    }

    fn linear(&mut self, stem: &str, d_in: usize, d_out: usize) -> Result<LinearLayer, ModelError> {
        let bias = self.take(&format!("{stem}.bias"), &[d_out])?;
        let weight = format!("{stem}.weight");
        if self.0.contains_key(&weight) {
            return LinearLayer::dense(self.matrix(&weight, d_out, d_in)?, bias);
        }
        let a_name = format!("{stem}.lr_a");
        let k = self
            .0
            .get(&a_name)
            .and_then(|e| e.dims.get(1).copied())
            .ok_or_else(|| ModelError::Format(format!("missing tensor {weight} (or {a_name})")))?;
        let a = self.matrix(&a_name, d_out, k)?;
        let b = self.matrix(&format!("{stem}.lr_b"), k, d_in)?;
        LinearLayer::factored(a, b, bias)
    }

    fn attention(&mut self, stem: &str, d: usize) -> Result<Attention, ModelError> {
        Ok(Attention {
            query: self.linear(&format!("{stem}.query"), d, d)?,
            key: self.linear(&format!("{stem}.key"), d, d)?,
            value: self.linear(&format!("{stem}.value"), d, d)?,
            out: self.linear(&format!("{stem}.out"), d, d)?,
        })
    }

    fn mlp(&mut self, stem: &str, d: usize, d_mlp: usize) -> Result<Mlp, ModelError> {
        Ok(Mlp {
            fc1: self.linear(&format!("{stem}.fc1"), d, d_mlp)?,
            fc2: self.linear(&format!("{stem}.fc2"), d_mlp, d)?,
        })
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelBundle, ModelError> {
    let (c, entries) = read_entries(bytes)?;
    let mut map = BTreeMap::new();
    for e in entries {
        if map.contains_key(&e.name) {
            return Err(ModelError::Format(format!("duplicate tensor {}", e.name)));
        }
        map.insert(e.name.clone(), e);
    }
    let mut t = Tensors(map);
    let d = c.d_model;

    let mut conv = |name: &str, c_in: usize| -> Result<Conv1d, ModelError> {
        let w = t.take(&format!("{name}.weight"), &[d, c_in, 3])?;
        Ok(Conv1d {
            weight: Matrix::from_vec(d, c_in * 3, w),
            bias: t.take(&format!("{name}.bias"), &[d])?,
        })
    };
    let conv1 = conv("encoder.conv1", c.n_mels)?;
    let conv2 = conv("encoder.conv2", d)?;

    let mut encoder_layers = Vec::with_capacity(c.n_audio_layers);
    for i in 0..c.n_audio_layers {
        let p = format!("encoder.blocks.{i}");
        encoder_layers.push(EncoderLayer {
            attn_ln: t.ln(&format!("{p}.attn_ln"), d)?,
            attn: t.attention(&format!("{p}.attn"), d)?,
            mlp_ln: t.ln(&format!("{p}.mlp_ln"), d)?,
            mlp: t.mlp(&format!("{p}.mlp"), d, c.d_mlp())?,
        });
    }
    let ln_post = t.ln("encoder.ln_post", d)?;
    let token_embedding = t.matrix("decoder.token_embedding", c.n_vocab, d)?;
    let positional_embedding = t.matrix("decoder.positional_embedding", c.n_text_ctx, d)?;
    let mut decoder_layers = Vec::with_capacity(c.n_text_layers);
    for i in 0..c.n_text_layers {
        let p = format!("decoder.blocks.{i}");
        decoder_layers.push(DecoderLayer {
            attn_ln: t.ln(&format!("{p}.attn_ln"), d)?,
            attn: t.attention(&format!("{p}.attn"), d)?,
            cross_attn_ln: t.ln(&format!("{p}.cross_attn_ln"), d)?,
            cross_attn: t.attention(&format!("{p}.cross_attn"), d)?,
            mlp_ln: t.ln(&format!("{p}.mlp_ln"), d)?,
            mlp: t.mlp(&format!("{p}.mlp"), d, c.d_mlp())?,
        });
    }
    let ln_dec = t.ln("decoder.ln", d)?;
    if let Some(extra) = t.0.keys().next() {
        return Err(ModelError::Format(format!("unexpected tensor {extra}")));
    }

    let bundle = ModelBundle {
        config: c,
        conv1,
        conv2,
        encoder_layers,
        ln_post,
        token_embedding,
        positional_embedding,
        decoder_layers,
        ln_dec,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Name of the tensor stem for an encoder projection.
pub fn encoder_stem(layer: usize, kind: LinearKind) -> String {
    format!("encoder.blocks.{layer}.{}", kind.tensor_stem())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ModelBundle {
        ModelBundle::random(ModelConfig::toy(2, 64, 4), 5).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.eakw");
        let q = dir.path().join("m2.eakw");
        let b = toy();
        save_bundle(&b, &p).unwrap();
        let loaded = load_bundle(&p).unwrap();
        assert_eq!(loaded, b);
        save_bundle(&loaded, &q).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
    }

    #[test]
    fn header_errors() {
        let mut bytes = to_bytes(&toy());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(ModelError::BadMagic)));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(from_bytes(&bad), Err(ModelError::Version { found: 9, .. })));
        // n_heads = 5 with d_model = 64
        bytes[8 + 5 * 4] = 5;
        assert!(matches!(from_bytes(&bytes), Err(ModelError::InvalidConfig(_))));
    }

    #[test]
    fn non_finite_weight_rejected() {
        let b = toy();
        let mut bytes = to_bytes(&b);
        let last = bytes.len() - 4;
        bytes[last..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(from_bytes(&bytes), Err(ModelError::NonFinite(_))));
    }

    #[test]
    fn shape_inconsistent_with_config_rejected() {
        let b = toy();
        let mut bytes = to_bytes(&b);
        // grow d_model in the config block: every tensor now mismatches
        bytes[8 + 4 * 4..8 + 5 * 4].copy_from_slice(&128u32.to_le_bytes());
        assert!(matches!(from_bytes(&bytes), Err(ModelError::Shape(_))));
        assert!(from_bytes(&to_bytes(&b)[..100]).is_err());
    }

    #[test]
    fn factored_layers_use_lr_suffixes() {
        let mut b = toy();
        b.encoder_layers[0].attn.query =
            LinearLayer::factored(Matrix::zeros(64, 3), Matrix::zeros(3, 64), vec![0.0; 64]).unwrap();
        let names: Vec<String> = tensors(&b).into_iter().map(|e| e.name).collect();
        assert!(names.contains(&"encoder.blocks.0.attn.query.lr_a".to_string()));
        assert!(names.contains(&"encoder.blocks.0.attn.query.lr_b".to_string()));
        assert!(!names.contains(&"encoder.blocks.0.attn.query.weight".to_string()));
        assert_eq!(from_bytes(&to_bytes(&b)).unwrap(), b);
    }
}
