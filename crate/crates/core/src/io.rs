//! File formats.
//!
//! Volumes, label maps and fields share the RVF1 container: a 33-byte
//! header followed by a little-endian payload.
//!
//! | offset | size | field                                     |
//! |--------|------|-------------------------------------------|
//! | 0      | 4    | magic `RVF1`                              |
//! | 4      | 1    | kind: 0 intensity, 1 labels, 2 field      |
//! | 5      | 12   | dims `D, H, W` as `u32`                   |
//! | 17     | 16   | reserved, zero                            |
//! | 33     | ..   | `f32` / `u16` / `3 × f32` per voxel       |
//!
//! Voxels are ordered depth-major, width fastest. Field payloads interleave
//! the (depth, height, width) displacement of each voxel.
//!
//! Checkpoints (`HSGK`) store the network configuration as `key=value`
//! text and every parameter as an `f64` tensor in canonical order:
//!
//! ```text
//! "HSGK" u32 version
//! u32 config_len, config bytes (UTF-8)
//! u32 tensor_count
//! per tensor: u32 name_len, name (UTF-8), u32 rank, rank × u32 dims, f64 data
//! ```

use crate::error::{Error, Result};
use crate::network::{NetworkConfig, RegistrationModel};
use crate::tensor::Tensor;
use crate::volume::{voxels, DeformationField, LabelMap, Volume};
use std::path::Path;

pub const RVF_MAGIC: &[u8; 4] = b"RVF1";
pub const RVF_HEADER_LEN: usize = 33;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HSGK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RvfKind {
    Intensity = 0,
    Labels = 1,
    Field = 2,
}

impl RvfKind {
    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(RvfKind::Intensity),
            1 => Some(RvfKind::Labels),
            2 => Some(RvfKind::Field),
            _ => None,
        }
    }

    /// Payload bytes per voxel.
    pub fn voxel_bytes(self) -> usize {
        match self {
            RvfKind::Intensity => 4,
            RvfKind::Labels => 2,
            RvfKind::Field => 12,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RvfKind::Intensity => "intensity",
            RvfKind::Labels => "labels",
            RvfKind::Field => "field",
        }
    }
}

/// A decoded RVF1 file.
#[derive(Clone, Debug, PartialEq)]
pub enum RvfData {
    Intensity(Volume),
    Labels(LabelMap),
    Field(DeformationField),
}

fn format_err<T>(path: &Path, msg: impl Into<String>) -> Result<T> {
    Err(Error::Format { path: path.to_path_buf(), msg: msg.into() })
}

fn header(kind: RvfKind, dims: [usize; 3]) -> Vec<u8> {
    let mut out = Vec::with_capacity(RVF_HEADER_LEN);
    out.extend_from_slice(RVF_MAGIC);
    out.push(kind as u8);
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&[0u8; 16]);
    out
}

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let mut out = header(RvfKind::Intensity, v.dims());
    for &x in v.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    out
}

pub fn encode_labels(l: &LabelMap) -> Vec<u8> {
    let mut out = header(RvfKind::Labels, l.dims());
    for &x in l.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn encode_field(f: &DeformationField) -> Vec<u8> {
    let n = voxels(f.dims());
    let mut out = header(RvfKind::Field, f.dims());
    for v in 0..n {
        for c in 0..3 {
            out.extend_from_slice(&(f.component(c)[v] as f32).to_le_bytes());
        }
    }
    out
}

/// Decodes any RVF1 payload; `path` only labels errors.
pub fn decode_rvf(bytes: &[u8], path: &Path) -> Result<RvfData> {
    if bytes.len() < RVF_HEADER_LEN {
        return format_err(path, format!("header truncated: {} of {RVF_HEADER_LEN} bytes", bytes.len()));
    }
    if &bytes[..4] != RVF_MAGIC {
        return format_err(path, format!("bad magic {:?}, expected \"RVF1\"", String::from_utf8_lossy(&bytes[..4])));
    }
    let kind = RvfKind::from_byte(bytes[4]).map_or_else(|| format_err(path, format!("unknown kind byte {}", bytes[4])), Ok)?;
    let dims: [usize; 3] = std::array::from_fn(|i| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().unwrap()) as usize);
    if bytes[17..RVF_HEADER_LEN].iter().any(|&b| b != 0) {
        return format_err(path, "reserved header bytes 17..33 are not zero");
    }
    let n = voxels(dims);
    let expected = RVF_HEADER_LEN + n * kind.voxel_bytes();
    if bytes.len() != expected {
        return format_err(
            path,
            format!(
                "{} payload for dims {dims:?} must end at byte {expected}, file ends at byte {}",
                kind.name(),
                bytes.len()
            ),
        );
    }
    let payload = &bytes[RVF_HEADER_LEN..];
    let f32_at = |i: usize| f32::from_le_bytes(payload[4 * i..4 * i + 4].try_into().unwrap()) as f64;
    Ok(match kind {
        RvfKind::Intensity => RvfData::Intensity(Volume::new(dims, (0..n).map(f32_at).collect())?),
        RvfKind::Labels => RvfData::Labels(LabelMap::new(
            dims,
            payload.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect(),
        )?),
        RvfKind::Field => {
            let mut data = vec![0.0; 3 * n];
            for v in 0..n {
                for c in 0..3 {
                    data[c * n + v] = f32_at(3 * v + c);
                }
            }
            RvfData::Field(DeformationField::new(dims, data)?)
        }
    })
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

pub fn read_rvf(path: impl AsRef<Path>) -> Result<RvfData> {
    let path = path.as_ref();
    decode_rvf(&read_bytes(path)?, path)
}

fn wrong_kind<T>(path: &Path, want: RvfKind, got: &RvfData) -> Result<T> {
    let got = match got {
        RvfData::Intensity(_) => RvfKind::Intensity,
        RvfData::Labels(_) => RvfKind::Labels,
        RvfData::Field(_) => RvfKind::Field,
    };
    format_err(path, format!("expected a {} file, found {}", want.name(), got.name()))
}

pub fn write_volume(path: impl AsRef<Path>, v: &Volume) -> Result<()> {
    write_bytes(path.as_ref(), &encode_volume(v))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    match read_rvf(path)? {
        RvfData::Intensity(v) => Ok(v),
        other => wrong_kind(path, RvfKind::Intensity, &other),
    }
}

pub fn write_labels(path: impl AsRef<Path>, l: &LabelMap) -> Result<()> {
    write_bytes(path.as_ref(), &encode_labels(l))
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    match read_rvf(path)? {
        RvfData::Labels(l) => Ok(l),
        other => wrong_kind(path, RvfKind::Labels, &other),
    }
}

pub fn write_field(path: impl AsRef<Path>, f: &DeformationField) -> Result<()> {
    write_bytes(path.as_ref(), &encode_field(f))
}

pub fn read_field(path: impl AsRef<Path>) -> Result<DeformationField> {
    let path = path.as_ref();
    match read_rvf(path)? {
        RvfData::Field(f) => Ok(f),
        other => wrong_kind(path, RvfKind::Field, &other),
    }
}

/// Decoded checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &RegistrationModel) -> Self {
        Self {
            config: model.config().to_kv(),
            tensors: model.params().iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    /// Rebuilds the model described by the stored configuration.
    pub fn into_model(self) -> Result<RegistrationModel> {
        let config = NetworkConfig::from_kv(&self.config)?;
        let mut model = RegistrationModel::new(config, 0)?;
        model.load_params(self.tensors)?;
        Ok(model)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        let magic = r.take(4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return format_err(path, format!("bad magic {:?}, expected \"HSGK\"", String::from_utf8_lossy(magic)));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return format_err(path, format!("checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"));
        }
        let len = r.u32("config length")? as usize;
        let config = r.utf8(len, "config")?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let len = r.u32("name length")? as usize;
            let name = r.utf8(len, "name")?;
            let rank = r.u32("rank")? as usize;
            let shape = (0..rank).map(|_| r.u32("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(8 * n, &format!("data of tensor {i} ({name})"))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return format_err(path, format!("{} trailing bytes after offset {}", bytes.len() - r.pos, r.pos));
        }
        Ok(Self { config, tensors })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => format_err(
                self.path,
                format!("truncated {what}: needs {n} bytes at offset {}, file ends at byte {}", self.pos, self.bytes.len()),
            ),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn utf8(&mut self, n: usize, what: &str) -> Result<String> {
        let at = self.pos;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).or_else(|_| format_err(self.path, format!("{what} at offset {at} is not UTF-8")))
    }
}

pub fn write_checkpoint(path: impl AsRef<Path>, model: &RegistrationModel) -> Result<()> {
    write_bytes(path.as_ref(), &Checkpoint::from_model(model).encode())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<RegistrationModel> {
    let path = path.as_ref();
    let ckpt = Checkpoint::decode(&read_bytes(path)?, path)?;
    ckpt.into_model().map_err(|e| match e {
        Error::Config(msg) | Error::Shape(msg) => Error::Format { path: path.to_path_buf(), msg },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    fn rand_dims(rng: &mut ChaCha8Rng) -> [usize; 3] {
        [0; 3].map(|_| rng.random_range(1..6))
    }

    #[test]
    fn rvf_header_layout() {
        let bytes = encode_labels(&LabelMap::new([1, 2, 3], vec![1, 2, 3, 4, 5, 258]).unwrap());
        assert_eq!(&bytes[..4], b"RVF1");
        assert_eq!(bytes[4], 1);
        assert_eq!(&bytes[5..17], &[1, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0]);
        assert!(bytes[17..33].iter().all(|&b| b == 0));
        assert_eq!(bytes.len(), 33 + 12);
        assert_eq!(&bytes[43..45], &[2, 1]);
    }

    #[test]
    fn field_payload_interleaves_components() {
        let f = DeformationField::from_fn([1, 1, 2], |p| [1.0 + p[2] as f64, 2.0, 3.0]);
        let bytes = encode_field(&f);
        let vals: Vec<f32> = bytes[33..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        assert_eq!(vals, vec![1.0, 2.0, 3.0, 2.0, 2.0, 3.0]);
    }

    #[test]
    fn rvf_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let dims = rand_dims(&mut rng);
            let v = Volume::from_fn(dims, |_| rng.random::<f32>() as f64);
            assert_eq!(decode_rvf(&encode_volume(&v), p()).unwrap(), RvfData::Intensity(v));
            let l = LabelMap::new(dims, (0..voxels(dims)).map(|_| rng.random()).collect()).unwrap();
            assert_eq!(decode_rvf(&encode_labels(&l), p()).unwrap(), RvfData::Labels(l));
            let f = DeformationField::from_fn(dims, |_| [0; 3].map(|_| rng.random_range(-4.0f32..4.0) as f64));
            assert_eq!(decode_rvf(&encode_field(&f), p()).unwrap(), RvfData::Field(f));
        }
    }

    #[test]
    fn rvf_rejects_bad_files() {
        let v = Volume::from_fn([2, 2, 2], |q| q[0] as f64);
        let good = encode_volume(&v);
        let mut bad = good.clone();
        bad[3] = b'2';
        assert!(matches!(decode_rvf(&bad, p()), Err(Error::Format { ref msg, .. }) if msg.contains("magic")));
        let err = decode_rvf(&good[..good.len() - 3], p()).unwrap_err().to_string();
        assert!(err.contains("byte 65") && err.contains("byte 62"), "{err}");
        assert!(decode_rvf(&good[..10], p()).is_err());
        let mut kind = good.clone();
        kind[4] = 9;
        assert!(decode_rvf(&kind, p()).is_err());
        let mut reserved = good;
        reserved[20] = 1;
        assert!(decode_rvf(&reserved, p()).is_err());
    }

    fn small_model(seed: u64) -> RegistrationModel {
        let cfg = NetworkConfig {
            stages: 2,
            channels: vec![3, 4],
            stride_k: vec![1, 2],
            bottleneck_d: 4,
            lncc_window: 3,
            ..NetworkConfig::default()
        };
        RegistrationModel::new(cfg, seed).unwrap()
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut model = small_model(3);
        model.randomize_flow_head(0.5, &mut ChaCha8Rng::seed_from_u64(4));
        let ckpt = Checkpoint::from_model(&model);
        let bytes = ckpt.encode();
        assert_eq!(bytes, Checkpoint::from_model(&model).encode());
        let back = Checkpoint::decode(&bytes, p()).unwrap();
        assert_eq!(back, ckpt);
        let restored = back.into_model().unwrap();
        assert_eq!(restored.params(), model.params());
        assert_eq!(restored.config(), model.config());
        assert_eq!(restored.param_count(), model.param_count());
    }

    #[test]
    fn checkpoint_errors() {
        let model = small_model(5);
        let bytes = Checkpoint::from_model(&model).encode();
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(Checkpoint::decode(&magic, p()).is_err());
        let mut version = bytes.clone();
        version[4] = 2;
        assert!(Checkpoint::decode(&version, p()).unwrap_err().to_string().contains("version"));
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1], p()).unwrap_err().to_string().contains("offset"));
        let mut missing = Checkpoint::from_model(&model);
        missing.tensors.remove(2);
        assert!(missing.into_model().is_err());
        let mut renamed = Checkpoint::from_model(&model);
        renamed.tensors[1].0 = "bogus".into();
        assert!(renamed.into_model().unwrap_err().to_string().contains("missing parameter"));
    }
}
