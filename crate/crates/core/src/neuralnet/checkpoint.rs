//! Binary checkpoint: 8-byte magic, u32 version, u32 header length, a UTF-8
//! `key=value` header, u64 value count, then little-endian f32 values.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{ArchSpec, ModelKind, NetError, Network};

const MAGIC: &[u8; 8] = b"FFTCNNCK";
const VERSION: u32 = 1;
const ARCH_KEYS: [&str; 9] = [
    "kind",
    "in_channels",
    "input_len",
    "conv_widths",
    "dense_widths",
    "kernel",
    "padding",
    "pool_kernel",
    "pool_stride",
];

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchSpec,
    /// Free-form metadata such as fault code, epoch and validation loss.
    pub meta: BTreeMap<String, String>,
    pub params: Vec<f32>,
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl Checkpoint {
    pub fn from_network(net: &mut Network<f32>, meta: BTreeMap<String, String>) -> Self {
        Self {
            arch: net.arch().clone(),
            meta,
            params: net.export_params(),
        }
    }

    pub fn to_network(&self) -> Result<Network<f32>, CheckpointError> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 1);
        let mut net = Network::new(self.arch.clone(), &mut rng)?;
        net.import_params(&self.params)?;
        Ok(net)
    }

    pub fn meta_f64(&self, key: &str) -> Option<f64> {
        self.meta.get(key).and_then(|v| v.parse().ok())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let a = &self.arch;
        let mut header = format!(
            "kind={}\nin_channels={}\ninput_len={}\nconv_widths={}\ndense_widths={}\nkernel={}\npadding={}\npool_kernel={}\npool_stride={}\n",
            a.kind,
            a.in_channels,
            a.input_len,
            join(&a.conv_widths),
            join(&a.dense_widths),
            a.kernel,
            a.padding,
            a.pool_kernel,
            a.pool_stride
        );
        for (k, v) in &self.meta {
            if k.is_empty() || k.contains(['=', '\n']) || v.contains('\n') || ARCH_KEYS.contains(&k.as_str()) {
                return Err(CheckpointError::Malformed(format!("unusable metadata entry {k:?}")));
            }
            header.push_str(&format!("{k}={v}\n"));
        }
        let mut out = Vec::with_capacity(32 + header.len() + 4 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for v in &self.params {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let malformed = |m: &str| CheckpointError::Malformed(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let version = u32_at(8);
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let hlen = u32_at(12) as usize;
        let body = 16 + hlen;
        if bytes.len() < body + 8 {
            return Err(malformed("truncated header"));
        }
        let header = std::str::from_utf8(&bytes[16..body]).map_err(|_| malformed("header is not UTF-8"))?;
        let mut fields = BTreeMap::new();
        for line in header.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| malformed("header line without '='"))?;
            fields.insert(k.to_string(), v.to_string());
        }
        let mut take = |k: &str| fields.remove(k).ok_or_else(|| CheckpointError::Malformed(format!("missing {k}")));
        let num = |s: String| s.parse::<usize>().map_err(|_| CheckpointError::Malformed(format!("bad number {s:?}")));
        let list = |s: String| -> Result<Vec<usize>, CheckpointError> {
            if s.is_empty() {
                return Ok(Vec::new());
            }
            s.split(',').map(|x| num(x.to_string())).collect()
        };
        let kind: ModelKind = take("kind")?.parse().map_err(|e: String| CheckpointError::Malformed(e))?;
        let arch = ArchSpec {
            kind,
            in_channels: num(take("in_channels")?)?,
            input_len: num(take("input_len")?)?,
            conv_widths: list(take("conv_widths")?)?,
            dense_widths: list(take("dense_widths")?)?,
            kernel: num(take("kernel")?)?,
            padding: num(take("padding")?)?,
            pool_kernel: num(take("pool_kernel")?)?,
            pool_stride: num(take("pool_stride")?)?,
        };
        let count = u64::from_le_bytes(bytes[body..body + 8].try_into().expect("8 bytes")) as usize;
        let blob = &bytes[body + 8..];
        if blob.len() != count * 4 {
            return Err(CheckpointError::Malformed(format!(
                "{} parameter bytes for {count} values",
                blob.len()
            )));
        }
        let params = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Self {
            arch,
            meta: fields,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()?).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}
