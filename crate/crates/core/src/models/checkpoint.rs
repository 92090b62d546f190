use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use wxadapt_autograd::Tensor;

use super::net::{Detector, ModelConfig};
use crate::error::{CoreError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"WXA1";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || CoreError::Format("malformed rng state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    frozen: bool,
}

#[derive(Serialize, Deserialize)]
struct BnEntry {
    name: String,
    channels: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    model: ModelConfig,
    iteration: u64,
    rng: Option<RngState>,
    train_config: serde_json::Value,
    params: Vec<ParamEntry>,
    batchnorm: Vec<BnEntry>,
}

/// `WXA1`, LE u32 header length, JSON header, then LE f32 parameters in
/// declaration order followed by each batch-norm layer's running mean and
/// running variance.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Detector<f32>,
    pub iteration: u64,
    pub rng: Option<RngState>,
    pub train_config: serde_json::Value,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let store = &self.model.store;
        let header = Header {
            version: CHECKPOINT_VERSION,
            model: self.model.config().clone(),
            iteration: self.iteration,
            rng: self.rng.clone(),
            train_config: self.train_config.clone(),
            params: store
                .ids()
                .map(|id| ParamEntry {
                    name: store.name(id).to_string(),
                    shape: store.get(id).shape().to_vec(),
                    frozen: store.is_frozen(id),
                })
                .collect(),
            batchnorm: store
                .bn_names()
                .iter()
                .zip(store.bn_states())
                .map(|(n, s)| BnEntry {
                    name: n.clone(),
                    channels: s.running_mean.len(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let mut push = |vals: &[f32]| {
            for v in vals {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for id in store.ids() {
            push(store.get(id).data());
        }
        for s in store.bn_states() {
            push(&s.running_mean);
            push(&s.running_var);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| CoreError::Format(format!("checkpoint: {m}"));
        if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("missing WXA1 magic"));
        }
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let json = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| bad(&e.to_string()))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {}", header.version)));
        }
        let mut model = Detector::<f32>::new(header.model.clone(), 0)?;
        let mut floats = bytes[8 + hlen..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        if (bytes.len() - 8 - hlen) % 4 != 0 {
            return Err(bad("blob length is not a multiple of 4"));
        }
        let ids: Vec<_> = model.store.ids().collect();
        if ids.len() != header.params.len() {
            return Err(bad("parameter list does not match the architecture"));
        }
        for (id, entry) in ids.into_iter().zip(&header.params) {
            let t = model.store.get(id);
            if model.store.name(id) != entry.name || t.shape() != entry.shape.as_slice() {
                return Err(bad(&format!("parameter {} does not match the architecture", entry.name)));
            }
            let n = t.numel();
            let vals: Vec<f32> = floats.by_ref().take(n).collect();
            if vals.len() != n {
                return Err(bad("blob too short"));
            }
            *model.store.get_mut(id) = Tensor::new(entry.shape.clone(), vals)?;
            model.store.set_frozen(id, entry.frozen);
        }
        if model.store.bn_states().len() != header.batchnorm.len() {
            return Err(bad("batch-norm list does not match the architecture"));
        }
        for (st, entry) in model.store.bn_states_mut().iter_mut().zip(&header.batchnorm) {
            let c = entry.channels;
            if st.running_mean.len() != c {
                return Err(bad(&format!("batch-norm {} has the wrong width", entry.name)));
            }
            st.running_mean = floats.by_ref().take(c).collect();
            st.running_var = floats.by_ref().take(c).collect();
            if st.running_mean.len() != c || st.running_var.len() != c {
                return Err(bad("blob too short"));
            }
        }
        if floats.next().is_some() {
            return Err(bad("trailing data"));
        }
        Ok(Checkpoint {
            model,
            iteration: header.iteration,
            rng: header.rng,
            train_config: header.train_config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
