//! Binary checkpoint container.
//!
//! Layout (little-endian): 8-byte magic, `u32` version, `u32` header length
//! and UTF-8 JSON header (config and training state), `u32` tensor count,
//! then per tensor `u32` name length, name, `u8` dtype (1 = f64), `u32` rows,
//! `u32` cols and the payload; a trailing CRC-32 covers everything before it.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{io_err, Model, PipelineError, TrainConfig};
use crate::aabb::Aabb;
use crate::ad::{AdamState, ParamGroup, ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"LIEFLOW\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

/// Position of a ChaCha stream, enough to resume it exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng, PipelineError> {
        use rand::SeedableRng;
        let bad = || PipelineError::BadCheckpoint("rng state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse::<u128>().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub aabb: Aabb,
    pub iteration: usize,
    pub rng: RngState,
    pub model: Model,
    pub adam: AdamState,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    aabb: Aabb,
    iteration: usize,
    rng: RngState,
    adam_steps_radiance: u64,
    adam_steps_motion: u64,
    groups: Vec<ParamGroup>,
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_u32(buf, name.len());
    buf.extend_from_slice(name.as_bytes());
    buf.push(DTYPE_F64);
    put_u32(buf, t.rows());
    put_u32(buf, t.cols());
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let store = &ck.model.store;
    let header = Header {
        config: ck.config.clone(),
        aabb: ck.aabb,
        iteration: ck.iteration,
        rng: ck.rng.clone(),
        adam_steps_radiance: ck.adam.steps_radiance,
        adam_steps_motion: ck.adam.steps_motion,
        groups: store.entries().iter().map(|e| e.group).collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut buf, json.len());
    buf.extend_from_slice(&json);
    put_u32(&mut buf, 3 * store.len());
    for e in store.entries() {
        put_tensor(&mut buf, &e.name, &e.value);
    }
    for (e, m) in store.entries().iter().zip(&ck.adam.m) {
        put_tensor(&mut buf, &format!("adam.m/{}", e.name), m);
    }
    for (e, v) in store.entries().iter().zip(&ck.adam.v) {
        put_tensor(&mut buf, &format!("adam.v/{}", e.name), v);
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PipelineError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end =
            end.ok_or_else(|| PipelineError::BadCheckpoint("unexpected end of data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, PipelineError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn tensor(&mut self) -> Result<(String, Tensor), PipelineError> {
        let n = self.u32()?;
        let name = String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| PipelineError::BadCheckpoint("tensor name".into()))?;
        if self.take(1)?[0] != DTYPE_F64 {
            return Err(PipelineError::BadCheckpoint(format!(
                "{name}: unsupported dtype"
            )));
        }
        let (rows, cols) = (self.u32()?, self.u32()?);
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| PipelineError::BadCheckpoint("tensor size".into()))?;
        let raw = self.take(
            len.checked_mul(8)
                .ok_or_else(|| PipelineError::BadCheckpoint("tensor size".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((name, Tensor::from_vec(rows, cols, data)))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, PipelineError> {
    if bytes.len() < 16 {
        return Err(PipelineError::ChecksumError);
    }
    if bytes[..8] != CHECKPOINT_MAGIC {
        return Err(PipelineError::BadCheckpoint("wrong magic".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body).to_le_bytes() != tail {
        return Err(PipelineError::ChecksumError);
    }
    let mut r = Reader {
        bytes: body,
        pos: 8,
    };
    let version = r.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(PipelineError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let n = r.u32()?;
    let header: Header = serde_json::from_slice(r.take(n)?)
        .map_err(|e| PipelineError::BadCheckpoint(format!("header: {e}")))?;
    let count = r.u32()?;
    let params = header.groups.len();
    if count != 3 * params {
        return Err(PipelineError::BadCheckpoint(format!(
            "{count} tensors for {params} parameters"
        )));
    }
    let mut store = ParamStore::new();
    for &group in &header.groups {
        let (name, t) = r.tensor()?;
        store.add(name, group, t)?;
    }
    let mut adam = AdamState::new(&store);
    for (prefix, slot) in [("adam.m/", 0), ("adam.v/", 1)] {
        for i in 0..params {
            let (name, t) = r.tensor()?;
            let expected = format!("{prefix}{}", store.entries()[i].name);
            if name != expected || t.shape() != store.entries()[i].value.shape() {
                return Err(PipelineError::BadCheckpoint(format!(
                    "expected {expected}, found {name}"
                )));
            }
            if slot == 0 {
                adam.m[i] = t;
            } else {
                adam.v[i] = t;
            }
        }
    }
    if r.pos != body.len() {
        return Err(PipelineError::BadCheckpoint("trailing bytes".into()));
    }
    adam.steps_radiance = header.adam_steps_radiance;
    adam.steps_motion = header.adam_steps_motion;
    let model = Model::bind(store, &header.config, header.aabb)?;
    Ok(Checkpoint {
        config: header.config,
        aabb: header.aabb,
        iteration: header.iteration,
        rng: header.rng,
        model,
        adam,
    })
}

/// Writes through a temporary file so a crash never leaves a partial
/// checkpoint under `path`.
pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<(), PipelineError> {
    let bytes = encode_checkpoint(ck);
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| io_err(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, PipelineError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hexplane::HexPlaneConfig;
    use crate::se3field::Se3FieldConfig;
    use rand::{Rng, SeedableRng};

    fn sample() -> Checkpoint {
        let config = TrainConfig {
            hexplane: HexPlaneConfig {
                resolution: 4,
                features: 2,
                rgb_hidden: 4,
                ..Default::default()
            },
            se3: Se3FieldConfig {
                hidden: 5,
                ..Default::default()
            },
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = Model::new(&config, Aabb::cube(1.0), &mut rng).unwrap();
        let mut adam = AdamState::new(&model.store);
        for m in adam.m.iter_mut().chain(adam.v.iter_mut()) {
            for x in m.data_mut() {
                *x = rng.random();
            }
        }
        adam.steps_motion = 7;
        let _: u64 = rng.random();
        Checkpoint {
            config,
            aabb: Aabb::cube(1.0),
            iteration: 42,
            rng: RngState::capture(&rng),
            model,
            adam,
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ck = sample();
        let a = encode_checkpoint(&ck);
        let back = decode_checkpoint(&a).unwrap();
        assert_eq!(encode_checkpoint(&back), a);
        for (x, y) in ck
            .model
            .store
            .entries()
            .iter()
            .zip(back.model.store.entries())
        {
            assert_eq!(
                x.value
                    .data()
                    .iter()
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>(),
                y.value
                    .data()
                    .iter()
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>()
            );
        }
        assert_eq!(back.adam, ck.adam);
        assert_eq!(back.iteration, 42);
    }

    #[test]
    fn rng_state_resumes_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let _: [u64; 3] = rng.random();
        let mut resumed = RngState::capture(&rng).restore().unwrap();
        assert_eq!(rng.random::<u64>(), resumed.random::<u64>());
    }

    #[test]
    fn truncation_and_corruption_are_detected() {
        let bytes = encode_checkpoint(&sample());
        for cut in [0, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(
                    decode_checkpoint(&bytes[..cut]),
                    Err(PipelineError::ChecksumError)
                ),
                "cut {cut}"
            );
        }
        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        assert!(matches!(
            decode_checkpoint(&flipped),
            Err(PipelineError::ChecksumError)
        ));
    }

    #[test]
    fn version_mismatch_is_an_error() {
        let mut bytes = encode_checkpoint(&sample());
        bytes[8] = 99;
        let n = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..n]);
        bytes[n..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(PipelineError::VersionMismatch { found: 99, .. })
        ));
    }
}
