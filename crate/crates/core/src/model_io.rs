//! Neutral on-disk formats.
//!
//! Models are stored as a JSON manifest (`<name>.manifest.json`) describing
//! the layer list plus a raw little-endian f64 blob (`<name>.weights.bin`).
//! Every parameter slice is addressed by a byte offset and byte length; slices
//! must be 8-byte aligned, in bounds and non-overlapping.
//!
//! Standalone tensors use the `.rten` container:
//!
//! ```text
//! offset  size      field
//! 0       4         magic "RTEN"
//! 4       4         version, u32 LE (currently 1)
//! 8       1         dtype code, u8 (0 = f64)
//! 9       1         ndim, u8
//! 10      8*ndim    dims, u64 LE each
//! ..      8*prod    payload, f64 LE, row-major
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{AvgPool2d, Conv2d, Dense, Layer, Network};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const TENSOR_MAGIC: &[u8; 4] = b"RTEN";
pub const TENSOR_VERSION: u32 = 1;
pub const DTYPE_F64: u8 = 0;

/// Byte range of one parameter slice inside the weight blob.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobSlice {
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format_version: u32,
    pub input_shape: Vec<usize>,
    pub output_dim: usize,
    pub layers: Vec<LayerDescriptor>,
}

/// One manifest layer. Fields not used by `kind` are omitted on write and
/// ignored on read.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LayerDescriptor {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_features: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_features: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<BlobSlice>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<BlobSlice>,
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads a network from a manifest and its weight blob.
pub fn load_model(manifest_path: impl AsRef<Path>, blob_path: impl AsRef<Path>) -> Result<Network> {
    let manifest_path = manifest_path.as_ref();
    let blob_path = blob_path.as_ref();
    let text = read_file(manifest_path)?;
    let manifest: ModelManifest = serde_json::from_slice(&text)
        .map_err(|e| Error::format(manifest_path, e.to_string()))?;
    let blob = read_file(blob_path)?;
    network_from_manifest(&manifest, &blob).map_err(|e| match e {
        Error::Model(msg) => Error::format(manifest_path, msg),
        other => other,
    })
}

/// Builds a network from an in-memory manifest and blob.
pub fn network_from_manifest(manifest: &ModelManifest, blob: &[u8]) -> Result<Network> {
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::model(format!(
            "unsupported format_version {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let mut used: Vec<(u64, u64, usize)> = Vec::new();
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for (i, desc) in manifest.layers.iter().enumerate() {
        let mut slice = |s: Option<BlobSlice>, what: &str, count: usize| -> Result<Vec<f64>> {
            let s = s.ok_or_else(|| Error::model(format!("layer {i} ({}): missing {what}", desc.kind)))?;
            read_slice(blob, s, count, i, &desc.kind, what, &mut used)
        };
        let need = |v: Option<usize>, what: &str| -> Result<usize> {
            v.ok_or_else(|| Error::model(format!("layer {i} ({}): missing {what}", desc.kind)))
        };
        let layer = match desc.kind.as_str() {
            "dense" => {
                let in_features = need(desc.in_features, "in_features")?;
                let out_features = need(desc.out_features, "out_features")?;
                Layer::Dense(Dense {
                    in_features,
                    out_features,
                    weight: slice(desc.weight, "weight", in_features * out_features)?,
                    bias: slice(desc.bias, "bias", out_features)?,
                })
            }
            "conv2d" => {
                let in_channels = need(desc.in_channels, "in_channels")?;
                let out_channels = need(desc.out_channels, "out_channels")?;
                let kernel = desc
                    .kernel
                    .ok_or_else(|| Error::model(format!("layer {i} (conv2d): missing kernel")))?;
                let count = out_channels * in_channels * kernel[0] * kernel[1];
                Layer::Conv2d(Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride: desc.stride.unwrap_or([1, 1]),
                    padding: desc.padding.unwrap_or([0, 0]),
                    weight: slice(desc.weight, "weight", count)?,
                    bias: slice(desc.bias, "bias", out_channels)?,
                })
            }
            "avgpool2d" => {
                let kernel = desc
                    .kernel
                    .ok_or_else(|| Error::model(format!("layer {i} (avgpool2d): missing kernel")))?;
                Layer::AvgPool2d(AvgPool2d {
                    kernel,
                    stride: desc.stride.unwrap_or(kernel),
                    padding: desc.padding.unwrap_or([0, 0]),
                })
            }
            "flatten" => Layer::Flatten,
            "relu" => Layer::Relu,
            "save" | "add" => {
                let tag = desc
                    .tag
                    .clone()
                    .ok_or_else(|| Error::model(format!("layer {i} ({}): missing tag", desc.kind)))?;
                if desc.kind == "save" {
                    Layer::Save(tag)
                } else {
                    Layer::Add(tag)
                }
            }
            other => {
                return Err(Error::model(format!(
                    "layer {i}: unsupported layer kind {other:?}"
                )))
            }
        };
        if matches!(layer, Layer::Relu | Layer::Flatten | Layer::AvgPool2d(_) | Layer::Save(_) | Layer::Add(_))
            && (desc.weight.is_some() || desc.bias.is_some())
        {
            return Err(Error::model(format!(
                "layer {i} ({}): carries parameters but is not parametric",
                desc.kind
            )));
        }
        layers.push(layer);
    }

    used.sort_unstable();
    for pair in used.windows(2) {
        let (a_off, a_len, a_layer) = pair[0];
        let (b_off, _, b_layer) = pair[1];
        if a_off + a_len > b_off {
            return Err(Error::model(format!(
                "layers {a_layer} and {b_layer} have overlapping weight slices"
            )));
        }
    }

    let net = Network::new(manifest.input_shape.clone(), layers)?;
    if net.output_dim() != manifest.output_dim {
        return Err(Error::model(format!(
            "manifest declares output_dim {}, layers produce {}",
            manifest.output_dim,
            net.output_dim()
        )));
    }
    Ok(net)
}

fn read_slice(
    blob: &[u8],
    s: BlobSlice,
    count: usize,
    layer: usize,
    kind: &str,
    what: &str,
    used: &mut Vec<(u64, u64, usize)>,
) -> Result<Vec<f64>> {
    let fail = |msg: String| Error::model(format!("layer {layer} ({kind}) {what}: {msg}"));
    if s.offset % 8 != 0 {
        return Err(fail(format!("offset {} is not 8-byte aligned", s.offset)));
    }
    if s.len != 8 * count as u64 {
        return Err(fail(format!(
            "slice holds {} bytes, shape implies {count} values ({} bytes)",
            s.len,
            8 * count
        )));
    }
    let end = s
        .offset
        .checked_add(s.len)
        .filter(|&e| e <= blob.len() as u64)
        .ok_or_else(|| {
            fail(format!(
                "bytes {}..{} out of bounds for blob of {} bytes",
                s.offset,
                s.offset.saturating_add(s.len),
                blob.len()
            ))
        })?;
    let bytes = &blob[s.offset as usize..end as usize];
    let values = decode_f64s(bytes);
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(fail(format!("value {pos} is not finite")));
    }
    if s.len > 0 {
        used.push((s.offset, s.len, layer));
    }
    Ok(values)
}

fn decode_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect()
}

/// Produces the manifest and blob describing `net`. Parameters are laid out
/// contiguously in layer order, weight before bias.
pub fn manifest_for(net: &Network) -> (ModelManifest, Vec<u8>) {
    let mut blob = Vec::new();
    let mut push = |values: &[f64]| -> BlobSlice {
        let offset = blob.len() as u64;
        for v in values {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        BlobSlice {
            offset,
            len: 8 * values.len() as u64,
        }
    };
    let layers = net
        .layers()
        .iter()
        .map(|layer| {
            let mut d = LayerDescriptor {
                kind: layer.kind().to_string(),
                ..LayerDescriptor::default()
            };
            match layer {
                Layer::Dense(l) => {
                    d.in_features = Some(l.in_features);
                    d.out_features = Some(l.out_features);
                    d.weight = Some(push(&l.weight));
                    d.bias = Some(push(&l.bias));
                }
                Layer::Conv2d(l) => {
                    d.in_channels = Some(l.in_channels);
                    d.out_channels = Some(l.out_channels);
                    d.kernel = Some(l.kernel);
                    d.stride = Some(l.stride);
                    d.padding = Some(l.padding);
                    d.weight = Some(push(&l.weight));
                    d.bias = Some(push(&l.bias));
                }
                Layer::AvgPool2d(l) => {
                    d.kernel = Some(l.kernel);
                    d.stride = Some(l.stride);
                    d.padding = Some(l.padding);
                }
                Layer::Save(tag) | Layer::Add(tag) => d.tag = Some(tag.clone()),
                Layer::Flatten | Layer::Relu => {}
            }
            d
        })
        .collect();
    let manifest = ModelManifest {
        format_version: FORMAT_VERSION,
        input_shape: net.input_shape().to_vec(),
        output_dim: net.output_dim(),
        layers,
    };
    (manifest, blob)
}

pub fn save_model(
    net: &Network,
    manifest_path: impl AsRef<Path>,
    blob_path: impl AsRef<Path>,
) -> Result<()> {
    let (manifest, blob) = manifest_for(net);
    let mut text = serde_json::to_vec_pretty(&manifest)?;
    text.push(b'\n');
    write_file(manifest_path.as_ref(), &text)?;
    write_file(blob_path.as_ref(), &blob)
}

/// `<dir>/<name>.manifest.json` and `<dir>/<name>.weights.bin`.
pub fn model_paths(dir: impl AsRef<Path>, name: &str) -> (std::path::PathBuf, std::path::PathBuf) {
    let dir = dir.as_ref();
    (
        dir.join(format!("{name}.manifest.json")),
        dir.join(format!("{name}.weights.bin")),
    )
}

/// Resolves a model argument: either a manifest path (the blob is found by
/// replacing `.manifest.json` with `.weights.bin`) or a bare stem.
pub fn load_model_at(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let s = path.to_string_lossy();
    let stem = s
        .strip_suffix(".manifest.json")
        .or_else(|| s.strip_suffix(".weights.bin"))
        .unwrap_or(&s);
    load_model(format!("{stem}.manifest.json"), format!("{stem}.weights.bin"))
}

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    if t.shape().len() > u8::MAX as usize {
        return Err(Error::input(format!("{} dims exceed the container limit", t.shape().len())));
    }
    let mut out = Vec::with_capacity(10 + 8 * t.shape().len() + 8 * t.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.push(DTYPE_F64);
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses an `.rten` byte buffer; `origin` is used in error messages.
pub fn decode_tensor(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    let fail = |msg: String| Error::format(origin, msg);
    if bytes.len() < 10 {
        return Err(fail(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != TENSOR_MAGIC {
        return Err(fail(format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != TENSOR_VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    if bytes[8] != DTYPE_F64 {
        return Err(fail(format!("unsupported dtype code {} (only 0 = f64)", bytes[8])));
    }
    let ndim = bytes[9] as usize;
    let header = 10 + 8 * ndim;
    if bytes.len() < header {
        return Err(fail("truncated dims".into()));
    }
    let mut shape = Vec::with_capacity(ndim);
    let mut count: u64 = 1;
    for k in 0..ndim {
        let at = 10 + 8 * k;
        let d = u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
        count = count
            .checked_mul(d)
            .ok_or_else(|| fail("dims overflow".into()))?;
        shape.push(usize::try_from(d).map_err(|_| fail(format!("dim {d} too large")))?);
    }
    let payload = &bytes[header..];
    if count.checked_mul(8) != Some(payload.len() as u64) {
        return Err(fail(format!(
            "payload has {} bytes, dims {shape:?} need {}",
            payload.len(),
            count.saturating_mul(8)
        )));
    }
    let data = decode_f64s(payload);
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(fail(format!("value {pos} is not finite")));
    }
    Tensor::new(shape, data)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    decode_tensor(&read_file(path)?, path)
}

pub fn write_tensor(tensor: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_tensor(tensor)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_net() -> Network {
        Network::random_mlp(&[3, 2, 2], &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn manifest_round_trip_in_memory() {
        let net = small_net();
        let (m, blob) = manifest_for(&net);
        let back = network_from_manifest(&m, &blob).unwrap();
        assert_eq!(back.layers(), net.layers());
    }

    #[test]
    fn wrong_version_rejected() {
        let (mut m, blob) = manifest_for(&small_net());
        m.format_version = 2;
        let err = network_from_manifest(&m, &blob).unwrap_err().to_string();
        assert!(err.contains("format_version"), "{err}");
    }

    #[test]
    fn batchnorm_named_in_error() {
        let (mut m, blob) = manifest_for(&small_net());
        m.layers.insert(
            1,
            LayerDescriptor {
                kind: "batchnorm".into(),
                ..Default::default()
            },
        );
        let err = network_from_manifest(&m, &blob).unwrap_err().to_string();
        assert!(err.contains("batchnorm"), "{err}");
    }

    #[test]
    fn dense_size_mismatch_names_layer() {
        // Declare 3x2 but give the weight slice room for 3x3.
        let (mut m, mut blob) = manifest_for(&small_net());
        m.layers[0].weight.as_mut().unwrap().len = 8 * 9;
        blob.extend_from_slice(&[0u8; 24]);
        let err = network_from_manifest(&m, &blob).unwrap_err().to_string();
        assert!(err.contains("layer 0"), "{err}");
    }

    #[test]
    fn out_of_bounds_and_misaligned() {
        let (mut m, blob) = manifest_for(&small_net());
        m.layers[2].bias.as_mut().unwrap().offset = blob.len() as u64;
        assert!(network_from_manifest(&m, &blob).unwrap_err().to_string().contains("out of bounds"));

        let (mut m, blob) = manifest_for(&small_net());
        m.layers[0].bias.as_mut().unwrap().offset = 4;
        assert!(network_from_manifest(&m, &blob).unwrap_err().to_string().contains("aligned"));
    }

    #[test]
    fn overlapping_slices_rejected() {
        let (mut m, blob) = manifest_for(&small_net());
        m.layers[0].bias = m.layers[0].weight.map(|w| BlobSlice { offset: w.offset, len: 16 });
        let err = network_from_manifest(&m, &blob).unwrap_err().to_string();
        assert!(err.contains("overlapping"), "{err}");
    }

    #[test]
    fn nan_weight_rejected() {
        let (m, mut blob) = manifest_for(&small_net());
        blob[..8].copy_from_slice(&f64::NAN.to_le_bytes());
        let err = network_from_manifest(&m, &blob).unwrap_err().to_string();
        assert!(err.contains("not finite"), "{err}");
    }

    #[test]
    fn tensor_header_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.5, -2.0]).unwrap();
        let bytes = encode_tensor(&t).unwrap();
        assert_eq!(&bytes[..4], b"RTEN");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(bytes[8], 0);
        assert_eq!(bytes[9], 2);
        assert_eq!(&bytes[10..18], &2u64.to_le_bytes());
        assert_eq!(&bytes[26..34], &1.5f64.to_le_bytes());
        assert_eq!(bytes.len(), 10 + 16 + 16);
    }

    #[test]
    fn tensor_errors() {
        let p = Path::new("mem");
        let good = encode_tensor(&Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(decode_tensor(&bad, p).unwrap_err().to_string().contains("magic"));
        let mut bad = good.clone();
        bad[8] = 1;
        assert!(decode_tensor(&bad, p).unwrap_err().to_string().contains("dtype"));
        assert!(decode_tensor(&good[..good.len() - 1], p).unwrap_err().to_string().contains("payload"));
        assert!(decode_tensor(&good[..5], p).is_err());
    }

    #[test]
    fn empty_tensor() {
        let t = Tensor::new(vec![0], vec![]).unwrap();
        let bytes = encode_tensor(&t).unwrap();
        assert_eq!(bytes.len(), 18);
        let back = decode_tensor(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.shape(), &[0]);
        assert!(back.is_empty());
    }
}
