//! FRM1 single-file container for dense FFNs and assembled layers.
//!
//! ```text
//! offset 0   b"FRM1"
//! offset 4   u64 LE   manifest byte length M
//! offset 12  M bytes  UTF-8 JSON manifest
//!            zero padding up to the next multiple of 8
//! payload    little-endian IEEE-754 f32, row-major, tensors back to back
//! ```
//!
//! The manifest carries `"format": "FRM1"`, a `"kind"` of `"dense"` (with
//! `h`, `H`) or `"moe"` (with the full `config`), and a `tensors` list of
//! `{name, shape, dtype, offset, length}` where `offset` is relative to the
//! payload start and `length = product(shape)·4`.
//!
//! Tensor names: `ffn.w1|wg|w2` for a dense FFN; `shared.w1|wg|w2`,
//! `expert.<k>.w1|wg|w2`, `router.w`, `router_cc.w` and `concat_proj.w`
//! for a layer.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::FineRConfig;
use crate::error::{Error, Result};
use crate::experts::{DenseFfnWeights, SwiGluWeights};
use crate::moe_layer::MoEModel;
use crate::numerics::Matrix;
use crate::router::RouterState;

pub const MAGIC: &[u8; 4] = b"FRM1";
const HEADER_LEN: usize = 12;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("not an FRM1 file (bad magic)")]
    BadMagic,
    #[error("truncated header")]
    TruncatedHeader,
    #[error("truncated payload: tensor {name} needs bytes up to {needed}, payload has {available}")]
    TruncatedPayload {
        name: String,
        needed: usize,
        available: usize,
    },
    #[error("unknown dtype {dtype:?} for tensor {name}")]
    UnknownDtype { name: String, dtype: String },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("tensor {name}: length {length} does not match shape {shape:?}")]
    LengthMismatch {
        name: String,
        shape: Vec<usize>,
        length: usize,
    },
    #[error("tensor {0}: offsets must be ascending and non-overlapping")]
    Overlap(String),
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("unexpected tensor {0}")]
    UnexpectedTensor(String),
    #[error("expected a {expected} checkpoint, found {found}")]
    WrongKind { expected: &'static str, found: &'static str },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelHeader {
    Dense {
        h: usize,
        #[serde(rename = "H")]
        intermediate: usize,
    },
    Moe { config: FineRConfig },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    #[serde(flatten)]
    pub header: ModelHeader,
    pub tensors: Vec<TensorManifestEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Dense(DenseFfnWeights<f32>),
    Moe(MoEModel<f32>),
}

impl Checkpoint {
    fn kind(&self) -> &'static str {
        match self {
            Checkpoint::Dense(_) => "dense",
            Checkpoint::Moe(_) => "moe",
        }
    }
}

impl From<DenseFfnWeights<f32>> for Checkpoint {
    fn from(d: DenseFfnWeights<f32>) -> Self {
        Checkpoint::Dense(d)
    }
}

impl From<MoEModel<f32>> for Checkpoint {
    fn from(m: MoEModel<f32>) -> Self {
        Checkpoint::Moe(m)
    }
}

fn push_ffn<'a>(out: &mut Vec<(String, &'a Matrix<f32>)>, prefix: &str, w: &'a SwiGluWeights<f32>) {
    out.push((format!("{prefix}.w1"), &w.w1));
    out.push((format!("{prefix}.wg"), &w.wg));
    out.push((format!("{prefix}.w2"), &w.w2));
}

fn named_tensors(ckpt: &Checkpoint) -> Vec<(String, &Matrix<f32>)> {
    let mut out = Vec::new();
    match ckpt {
        Checkpoint::Dense(d) => push_ffn(&mut out, "ffn", d),
        Checkpoint::Moe(m) => {
            if let Some(s) = &m.shared {
                push_ffn(&mut out, "shared", s);
            }
            for (k, e) in m.experts.iter().enumerate() {
                push_ffn(&mut out, &format!("expert.{k}"), e);
            }
            out.push(("router.w".into(), &m.router.weight));
            if let Some(r) = &m.cc_router {
                out.push(("router_cc.w".into(), &r.weight));
            }
            if let Some(p) = &m.concat_proj {
                out.push(("concat_proj.w".into(), p));
            }
        }
    }
    out
}

/// Serialize to FRM1 bytes.
pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let header = match ckpt {
        Checkpoint::Dense(d) => {
            d.check()?;
            ModelHeader::Dense {
                h: d.input_dim(),
                intermediate: d.inter_dim(),
            }
        }
        Checkpoint::Moe(m) => {
            m.check()?;
            ModelHeader::Moe { config: m.cfg }
        }
    };
    let tensors = named_tensors(ckpt);
    let mut entries = Vec::with_capacity(tensors.len());
    let mut payload = Vec::new();
    for (name, m) in &tensors {
        let offset = payload.len();
        for v in m.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorManifestEntry {
            name: name.clone(),
            shape: vec![m.rows(), m.cols()],
            dtype: "f32".into(),
            offset,
            length: payload.len() - offset,
        });
    }
    let manifest = Manifest {
        format: "FRM1".into(),
        header,
        tensors: entries,
    };
    Ok(encode_raw(&manifest, &payload))
}

/// Assemble a container from an arbitrary manifest and payload.
pub fn encode_raw(manifest: &Manifest, payload: &[u8]) -> Vec<u8> {
    let json = serde_json::to_vec(manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + 8 + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    while out.len() % 8 != 0 {
        out.push(0);
    }
    out.extend_from_slice(payload);
    out
}

pub fn write_model(ckpt: impl Into<Checkpoint>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(&ckpt.into())?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Parse the header and manifest, returning the manifest and payload slice.
pub fn decode_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(FormatError::BadMagic.into());
    }
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::TruncatedHeader.into());
    }
    let len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let end = HEADER_LEN.checked_add(len).ok_or(FormatError::TruncatedHeader)?;
    if bytes.len() < end {
        return Err(FormatError::TruncatedHeader.into());
    }
    let manifest: Manifest =
        serde_json::from_slice(&bytes[HEADER_LEN..end]).map_err(|e| FormatError::Manifest(e.to_string()))?;
    if manifest.format != "FRM1" {
        return Err(FormatError::Manifest(format!("format field is {:?}", manifest.format)).into());
    }
    let start = end.div_ceil(8) * 8;
    let payload = bytes.get(start..).unwrap_or(&[]);
    Ok((manifest, payload))
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let (manifest, payload) = decode_manifest(bytes)?;
    let mut tensors: HashMap<String, Matrix<f32>> = HashMap::new();
    let mut prev_end = 0usize;
    for e in &manifest.tensors {
        if e.dtype != "f32" {
            return Err(FormatError::UnknownDtype {
                name: e.name.clone(),
                dtype: e.dtype.clone(),
            }
            .into());
        }
        let (rows, cols) = match e.shape.as_slice() {
            [r, c] => (*r, *c),
            [n] => (1, *n),
            _ => {
                return Err(FormatError::Manifest(format!("tensor {} must be 1-D or 2-D", e.name)).into());
            }
        };
        if e.length != rows * cols * 4 {
            return Err(FormatError::LengthMismatch {
                name: e.name.clone(),
                shape: e.shape.clone(),
                length: e.length,
            }
            .into());
        }
        if e.offset < prev_end {
            return Err(FormatError::Overlap(e.name.clone()).into());
        }
        let end = e.offset + e.length;
        if end > payload.len() {
            return Err(FormatError::TruncatedPayload {
                name: e.name.clone(),
                needed: end,
                available: payload.len(),
            }
            .into());
        }
        prev_end = end;
        let data = payload[e.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if tensors.insert(e.name.clone(), Matrix::new(rows, cols, data)?).is_some() {
            return Err(FormatError::Manifest(format!("duplicate tensor {}", e.name)).into());
        }
    }

    let mut take = |name: String| tensors.remove(&name).ok_or(FormatError::MissingTensor(name));
    let ckpt = match manifest.header {
        ModelHeader::Dense { h, intermediate } => {
            let d = SwiGluWeights::new(take("ffn.w1".into())?, take("ffn.wg".into())?, take("ffn.w2".into())?)?;
            if d.w1.shape() != (h, intermediate) || d.w2.shape() != (intermediate, h) {
                return Err(Error::shape("dense checkpoint", d.w1.shape(), (h, intermediate)));
            }
            Checkpoint::Dense(d)
        }
        ModelHeader::Moe { config } => {
            let d = config.dims()?;
            let mut ffn = |prefix: &str| -> Result<SwiGluWeights<f32>> {
                Ok(SwiGluWeights::new(
                    take(format!("{prefix}.w1"))?,
                    take(format!("{prefix}.wg"))?,
                    take(format!("{prefix}.w2"))?,
                )?)
            };
            let shared = if config.share_expert { Some(ffn("shared")?) } else { None };
            let experts = (0..d.n_experts)
                .map(|k| ffn(&format!("expert.{k}")))
                .collect::<Result<Vec<_>>>()?;
            let router = RouterState::new(take("router.w".into())?);
            let cc_router = match config.router_mode {
                crate::config::RouterMode::Separate => Some(RouterState::new(take("router_cc.w".into())?)),
                crate::config::RouterMode::Single => None,
            };
            let concat_proj = if config.concat_proj {
                Some(take("concat_proj.w".into())?)
            } else {
                None
            };
            Checkpoint::Moe(MoEModel::new(config, shared, experts, router, cc_router, concat_proj)?)
        }
    };
    if let Some(name) = tensors.keys().min() {
        return Err(FormatError::UnexpectedTensor(name.clone()).into());
    }
    Ok(ckpt)
}

pub fn read_model(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn read_moe(path: impl AsRef<Path>) -> Result<MoEModel<f32>> {
    match read_model(path)? {
        Checkpoint::Moe(m) => Ok(m),
        other => Err(FormatError::WrongKind {
            expected: "moe",
            found: other.kind(),
        }
        .into()),
    }
}

pub fn read_dense(path: impl AsRef<Path>) -> Result<DenseFfnWeights<f32>> {
    match read_model(path)? {
        Checkpoint::Dense(d) => Ok(d),
        other => Err(FormatError::WrongKind {
            expected: "dense",
            found: other.kind(),
        }
        .into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Preset, RouterMode};
    use crate::numerics::Rng;
    use crate::upcycle::upcycle;

    fn dense(seed: u64) -> DenseFfnWeights<f32> {
        SwiGluWeights::random(8, 16, 8, 1.0, &mut Rng::new(seed))
    }

    #[test]
    fn dense_round_trip() {
        let d = dense(1);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.frm");
        write_model(d.clone(), &p).unwrap();
        let back = read_dense(&p).unwrap();
        assert_eq!(back, d);
        let bits = |w: &SwiGluWeights<f32>| w.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&d));
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&Checkpoint::Dense(dense(2))).unwrap();
        assert_eq!(&bytes[..4], b"FRM1");
        let m = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let start = (12 + m).div_ceil(8) * 8;
        assert!(bytes[12 + m..start].iter().all(|&b| b == 0));
        assert_eq!(bytes.len() - start, 3 * 8 * 16 * 4);
        let (manifest, _) = decode_manifest(&bytes).unwrap();
        let names: Vec<_> = manifest.tensors.iter().map(|t| t.name.as_str()).collect();
        assert_eq!(names, ["ffn.w1", "ffn.wg", "ffn.w2"]);
    }

    #[test]
    fn base_preset_tensor_count() {
        let cfg = Preset::FineRMoEBase.config(64, 128);
        let d = SwiGluWeights::random(64, 128, 64, 0.1, &mut Rng::new(3));
        let m = upcycle(&d, &cfg, 7).unwrap();
        let bytes = encode(&Checkpoint::Moe(m)).unwrap();
        let (manifest, _) = decode_manifest(&bytes).unwrap();
        assert_eq!(manifest.tensors.len(), 3 * 128 + 3 + 1);
    }

    #[test]
    fn variant_round_trip() {
        let cfg = FineRConfig::new(8, 16, 2, 1, 2, 2, 1)
            .with_router_mode(RouterMode::Separate)
            .with_concat_proj(true)
            .with_share_expert(false);
        let m = MoEModel::<f32>::random(cfg, 1.0, &mut Rng::new(4)).unwrap();
        let back = decode(&encode(&Checkpoint::Moe(m.clone())).unwrap()).unwrap();
        assert_eq!(back, Checkpoint::Moe(m));
    }

    #[test]
    fn unwritable_path() {
        let err = write_model(dense(5), "/nonexistent-dir/x/y.frm").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn truncated_payload() {
        let mut bytes = encode(&Checkpoint::Dense(dense(6))).unwrap();
        bytes.truncate(bytes.len() - 4);
        let err = decode(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format(FormatError::TruncatedPayload { .. })), "{err}");
        assert!(err.to_string().contains("truncated payload"));
    }

    #[test]
    fn unknown_dtype() {
        let bytes = encode(&Checkpoint::Dense(dense(7))).unwrap();
        let (mut manifest, payload) = decode_manifest(&bytes).unwrap();
        manifest.tensors[1].dtype = "bf16".into();
        let err = decode(&encode_raw(&manifest, payload)).unwrap_err();
        assert!(matches!(err, Error::Format(FormatError::UnknownDtype { .. })));
    }

    #[test]
    fn invalid_config_surfaces_at_read() {
        let cfg = FineRConfig::new(8, 16, 2, 1, 2, 2, 1);
        let m = MoEModel::<f32>::random(cfg, 1.0, &mut Rng::new(8)).unwrap();
        let bytes = encode(&Checkpoint::Moe(m)).unwrap();
        let (mut manifest, payload) = decode_manifest(&bytes).unwrap();
        let mut bad = cfg;
        bad.g_i = 3;
        manifest.header = ModelHeader::Moe { config: bad };
        let err = decode(&encode_raw(&manifest, payload)).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn shape_mismatch_and_bad_magic() {
        let cfg = FineRConfig::new(8, 16, 2, 1, 2, 2, 1);
        let m = MoEModel::<f32>::random(cfg, 1.0, &mut Rng::new(9)).unwrap();
        let bytes = encode(&Checkpoint::Moe(m)).unwrap();
        let (mut manifest, payload) = decode_manifest(&bytes).unwrap();
        let mut wider = cfg;
        wider.hidden = 16;
        wider.g_o = 4;
        manifest.header = ModelHeader::Moe { config: wider };
        let err = decode(&encode_raw(&manifest, payload)).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. } | Error::Format(FormatError::MissingTensor(_))), "{err}");

        assert!(matches!(decode(b"NOPE0000").unwrap_err(), Error::Format(FormatError::BadMagic)));
        assert!(matches!(
            read_moe(std::path::Path::new("/definitely/missing.frm")).unwrap_err(),
            Error::Io { .. }
        ));
    }
}
