//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, a JSON header
//! (format version, config, dimensions, epoch, RNG state, optimizer
//! settings and the name/shape of every array), then the arrays as
//! little-endian `f64` in header order.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{DisenGcd, Dims, ModelConfig};
use crate::numeric::{AdamState, DenseMatrix};
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"DGCDCKPT";

/// Position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Decimal string; JSON numbers cannot hold a `u128` exactly.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Config(format!("bad RNG word position `{}`", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: DisenGcd,
    pub weight_optimizer: AdamState,
    pub alpha_optimizer: AdamState,
    pub epoch: usize,
    pub rng: Option<RngState>,
}

impl Checkpoint {
    pub fn new(model: DisenGcd, epoch: usize) -> Self {
        Self {
            model,
            weight_optimizer: AdamState::default(),
            alpha_optimizer: AdamState::default(),
            epoch,
            rng: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ArrayInfo {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    dims: Dims,
    epoch: usize,
    rng: Option<RngState>,
    weight_optimizer: AdamState,
    alpha_optimizer: AdamState,
    arrays: Vec<ArrayInfo>,
}

fn arrays(ck: &Checkpoint) -> Vec<(String, &DenseMatrix)> {
    let mut out: Vec<(String, &DenseMatrix)> = ck
        .model
        .weights()
        .iter()
        .map(|(n, w)| (format!("weight:{n}"), w))
        .collect();
    out.push(("alpha".into(), ck.model.alpha()));
    for (tag, opt) in [("weights", &ck.weight_optimizer), ("alpha", &ck.alpha_optimizer)] {
        for (n, (m, v)) in opt.moments() {
            out.push((format!("adam.{tag}.m:{n}"), m));
            out.push((format!("adam.{tag}.v:{n}"), v));
        }
    }
    out
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    let arrays = arrays(checkpoint);
    let header = Header {
        version: FORMAT_VERSION,
        config: checkpoint.model.config().clone(),
        dims: checkpoint.model.dims(),
        epoch: checkpoint.epoch,
        rng: checkpoint.rng.clone(),
        weight_optimizer: checkpoint.weight_optimizer.clone(),
        alpha_optimizer: checkpoint.alpha_optimizer.clone(),
        arrays: arrays
            .iter()
            .map(|(n, m)| ArrayInfo {
                name: n.clone(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut bytes = Vec::with_capacity(16 + json.len() + arrays.iter().map(|a| a.1.len() * 8).sum::<usize>());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for (_, m) in &arrays {
        for v in m.values() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::parse(path, format!("invalid checkpoint: {msg}"));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic bytes"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize.checked_add(header_len).ok_or_else(|| bad("header length overflow"))?;
    if bytes.len() < header_end {
        return Err(bad("truncated header"));
    }
    let raw: serde_json::Value = serde_json::from_slice(&bytes[16..header_end]).map_err(|e| bad(&e.to_string()))?;
    let found = raw.get("version").and_then(|v| v.as_u64()).ok_or_else(|| bad("no version"))? as u32;
    if found != FORMAT_VERSION {
        return Err(Error::Version {
            found,
            expected: FORMAT_VERSION,
        });
    }
    let header: Header = serde_json::from_value(raw).map_err(|e| bad(&e.to_string()))?;

    let expected: usize = header.arrays.iter().map(|a| a.rows * a.cols * 8).sum();
    if bytes.len() != header_end + expected {
        return Err(bad(&format!(
            "expected {} data bytes, found {}",
            expected,
            bytes.len() - header_end
        )));
    }
    let mut offset = header_end;
    let mut weights = BTreeMap::new();
    let mut alpha = None;
    let mut moments: [BTreeMap<String, (Option<DenseMatrix>, Option<DenseMatrix>)>; 2] = Default::default();
    for info in &header.arrays {
        let n = info.rows * info.cols;
        let values: Vec<f64> = bytes[offset..offset + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        offset += n * 8;
        let m = DenseMatrix::from_vec(info.rows, info.cols, values).map_err(|e| bad(&format!("{}: {e}", info.name)))?;
        if let Some(name) = info.name.strip_prefix("weight:") {
            weights.insert(name.to_string(), m);
        } else if info.name == "alpha" {
            alpha = Some(m);
        } else if let Some(rest) = info.name.strip_prefix("adam.") {
            let (group, rest) = rest.split_once('.').ok_or_else(|| bad(&info.name))?;
            let (kind, name) = rest.split_once(':').ok_or_else(|| bad(&info.name))?;
            let slot = match group {
                "weights" => &mut moments[0],
                "alpha" => &mut moments[1],
                _ => return Err(bad(&info.name)),
            };
            let entry = slot.entry(name.to_string()).or_default();
            match kind {
                "m" => entry.0 = Some(m),
                "v" => entry.1 = Some(m),
                _ => return Err(bad(&info.name)),
            }
        } else {
            return Err(bad(&format!("unknown array {}", info.name)));
        }
    }
    let alpha = alpha.ok_or_else(|| bad("no alpha array"))?;
    let model = DisenGcd::from_parts(header.config, header.dims, weights, alpha)?;

    let mut optimizers = [header.weight_optimizer, header.alpha_optimizer];
    for (opt, slot) in optimizers.iter_mut().zip(moments) {
        for (name, pair) in slot {
            match pair {
                (Some(m), Some(v)) if m.shape() == v.shape() => opt.set_moments(name, m, v),
                _ => return Err(bad(&format!("incomplete optimizer moments for {name}"))),
            }
        }
    }
    let [weight_optimizer, alpha_optimizer] = optimizers;
    Ok(Checkpoint {
        model,
        weight_optimizer,
        alpha_optimizer,
        epoch: header.epoch,
        rng: header.rng,
    })
}
