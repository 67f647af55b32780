//! Model file format.
//!
//! ```text
//! offset 0   4 bytes   magic "LPNM"
//! offset 4   u32 LE    header length H
//! offset 8   H bytes   UTF-8 JSON header
//! offset 8+H           parameter blob: f32 little-endian, tensors concatenated
//!                      in header order (layer order, then tensor order)
//! ```
//!
//! The header records the format version, input shape, class count and for
//! every layer its id, kind, hyper-parameters and tensor shapes. The blob
//! holds raw float bits, so a save/load round trip is bit-exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Layer, LayerKind, Model};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_MAGIC: &[u8; 4] = b"LPNM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    input_shape: Vec<usize>,
    class_count: usize,
    blob_bytes: usize,
    layers: Vec<LayerHeader>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerHeader {
    id: usize,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pad: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kernel: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eps: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source: Option<usize>,
    #[serde(default)]
    tensors: Vec<TensorHeader>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: message.into(),
    }
}

pub fn write_model(model: &Model, mut out: impl Write) -> Result<()> {
    let mut blob = Vec::new();
    let mut layers = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let mut h = LayerHeader {
            id: layer.id,
            kind: layer.kind_name().to_string(),
            stride: None,
            pad: None,
            kernel: None,
            eps: None,
            source: None,
            tensors: Vec::new(),
        };
        match &layer.kind {
            LayerKind::Conv2d { stride, pad, .. } => {
                h.stride = Some(*stride);
                h.pad = Some(*pad);
            }
            LayerKind::BatchNorm { eps, .. } => h.eps = Some(*eps),
            LayerKind::MaxPool { kh, kw, stride } | LayerKind::AvgPool { kh, kw, stride } => {
                h.kernel = Some([*kh, *kw]);
                h.stride = Some(*stride);
            }
            LayerKind::ResidualAdd { source } => h.source = Some(*source),
            _ => {}
        }
        for (name, t) in layer.named_tensors() {
            h.tensors.push(TensorHeader {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            });
            blob.extend(t.to_le_bytes());
        }
        layers.push(h);
    }
    let header = Header {
        version: FORMAT_VERSION,
        input_shape: model.input_shape.clone(),
        class_count: model.class_count,
        blob_bytes: blob.len(),
        layers,
    };
    let json = serde_json::to_vec(&header).map_err(|e| format_err(8, e.to_string()))?;
    out.write_all(FORMAT_MAGIC)?;
    out.write_all(&(json.len() as u32).to_le_bytes())?;
    out.write_all(&json)?;
    out.write_all(&blob)?;
    Ok(())
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_model(model, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    read_model(fs::File::open(path)?)
}

pub fn read_model(mut input: impl Read) -> Result<Model> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < 8 {
        return Err(format_err(0, format!("file is {} bytes, shorter than the 8-byte preamble", bytes.len())));
    }
    if &bytes[..4] != FORMAT_MAGIC {
        return Err(format_err(0, format!("bad magic {:?}", &bytes[..4])));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let header_end = 8 + header_len;
    if bytes.len() < header_end {
        return Err(format_err(
            4,
            format!("header needs {header_len} bytes, only {} available", bytes.len() - 8),
        ));
    }
    let header_bytes = &bytes[8..header_end];
    let value: serde_json::Value = serde_json::from_slice(header_bytes)
        .map_err(|e| format_err(8 + json_offset(header_bytes, &e), format!("malformed header: {e}")))?;
    match value.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(v) => return Err(Error::UnsupportedVersion(v as u32)),
        None => return Err(format_err(8, "header has no version")),
    }
    let header: Header = serde_json::from_value(value).map_err(|e| format_err(8, format!("malformed header: {e}")))?;

    let blob = &bytes[header_end..];
    let expected: usize = header
        .layers
        .iter()
        .flat_map(|l| &l.tensors)
        .map(|t| t.shape.iter().product::<usize>() * 4)
        .sum();
    if expected != header.blob_bytes {
        return Err(format_err(
            8,
            format!("header declares {} blob bytes but tensor shapes need {expected}", header.blob_bytes),
        ));
    }
    if blob.len() != expected {
        return Err(format_err(
            header_end,
            format!("expected {expected} bytes of parameter data, found {}", blob.len()),
        ));
    }

    let mut cursor = 0usize;
    let mut layers = Vec::with_capacity(header.layers.len());
    for lh in header.layers {
        let mut tensors = std::collections::HashMap::new();
        for th in &lh.tensors {
            let n: usize = th.shape.iter().product();
            let data = blob[cursor..cursor + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(th.shape.clone(), data)
                .map_err(|e| format_err(header_end + cursor, e.to_string()))?;
            cursor += 4 * n;
            tensors.insert(th.name.clone(), t);
        }
        let offset = header_end + cursor;
        let mut take = |name: &str| {
            tensors
                .remove(name)
                .ok_or_else(|| format_err(offset, format!("layer {}: missing tensor {name}", lh.id)))
        };
        let missing = |what: &str| format_err(8, format!("layer {}: missing {what}", lh.id));
        let kind = match lh.kind.as_str() {
            "dense" => LayerKind::Dense {
                weight: take("weight")?,
                bias: take("bias").ok(),
            },
            "conv2d" => LayerKind::Conv2d {
                weight: take("weight")?,
                bias: take("bias").ok(),
                stride: lh.stride.ok_or_else(|| missing("stride"))?,
                pad: lh.pad.ok_or_else(|| missing("pad"))?,
            },
            "batch_norm" => LayerKind::BatchNorm {
                gamma: take("gamma")?,
                beta: take("beta")?,
                running_mean: take("running_mean")?,
                running_var: take("running_var")?,
                eps: lh.eps.ok_or_else(|| missing("eps"))?,
            },
            "relu" => LayerKind::Relu,
            "max_pool" | "avg_pool" => {
                let [kh, kw] = lh.kernel.ok_or_else(|| missing("kernel"))?;
                let stride = lh.stride.ok_or_else(|| missing("stride"))?;
                if lh.kind == "max_pool" {
                    LayerKind::MaxPool { kh, kw, stride }
                } else {
                    LayerKind::AvgPool { kh, kw, stride }
                }
            }
            "flatten" => LayerKind::Flatten,
            "global_avg_pool" => LayerKind::GlobalAvgPool,
            "residual_add" => LayerKind::ResidualAdd {
                source: lh.source.ok_or_else(|| missing("source"))?,
            },
            other => return Err(format_err(8, format!("unknown layer kind {other:?}"))),
        };
        layers.push(Layer::new(lh.id, kind));
    }
    Model::new(layers, header.input_shape, header.class_count)
}

/// Byte offset inside `json` of a serde_json error's line/column.
fn json_offset(json: &[u8], e: &serde_json::Error) -> usize {
    let mut line = 1;
    for (i, &b) in json.iter().enumerate() {
        if line == e.line() {
            return (i + e.column().saturating_sub(1)).min(json.len());
        }
        if b == b'\n' {
            line += 1;
        }
    }
    json.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cnn() -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut bn = Layer::batch_norm(1, 4);
        if let LayerKind::BatchNorm { running_var, running_mean, .. } = &mut bn.kind {
            running_var.data_mut()[2] = 0.37;
            running_mean.data_mut()[1] = -1.25;
        }
        Model::new(
            vec![
                Layer::conv2d(0, 1, 4, 3, 1, 1, true, &mut rng),
                bn,
                Layer::relu(2),
                Layer::max_pool(3, 2, 2),
                Layer::flatten(4),
                Layer::dense(5, 4 * 3 * 3, 3, true, &mut rng),
            ],
            vec![1, 6, 6],
            3,
        )
        .unwrap()
    }

    fn bytes_of(m: &Model) -> Vec<u8> {
        let mut v = Vec::new();
        write_model(m, &mut v).unwrap();
        v
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = small_cnn();
        let bytes = bytes_of(&m);
        let back = read_model(&bytes[..]).unwrap();
        assert_eq!(back.param_bytes(), m.param_bytes());
        assert_eq!(back, m);
        assert_eq!(bytes_of(&back), bytes);
    }

    #[test]
    fn truncated_blob_names_byte_counts() {
        let bytes = bytes_of(&small_cnn());
        let err = read_model(&bytes[..bytes.len() - 6]).unwrap_err();
        match err {
            Error::Format { message, .. } => {
                assert!(message.contains("expected"), "{message}");
                assert!(message.contains("found"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn future_version_is_rejected() {
        let bytes = bytes_of(&small_cnn());
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let header = String::from_utf8(bytes[8..8 + hlen].to_vec()).unwrap();
        let header = header.replacen("\"version\":1", "\"version\":99", 1);
        let mut out = Vec::new();
        out.extend_from_slice(FORMAT_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&bytes[8 + hlen..]);
        assert!(matches!(read_model(&out[..]), Err(Error::UnsupportedVersion(99))));
    }

    #[test]
    fn malformed_header_reports_offset() {
        let mut bytes = bytes_of(&small_cnn());
        bytes[8 + 3] = b'#';
        match read_model(&bytes[..]) {
            Err(Error::Format { offset, .. }) => assert!(offset >= 8),
            other => panic!("unexpected {other:?}"),
        }
    }
}
