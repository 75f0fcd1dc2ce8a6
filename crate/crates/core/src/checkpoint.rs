//! Binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` header length, JSON header, `u32` block count,
//! then blocks of `u32` name length, name, `u32` rank, `u64` dims and
//! little-endian `f64` values. Parameter blocks carry the parameter names;
//! optimizer moments are stored as `adam.m/<name>` and `adam.v/<name>`.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use vrpmoe_tensor::{ParamSet, Tensor};

use crate::error::{Error, Result};
use crate::policy::{Policy, PolicyConfig};
use crate::train::{AdamW, TrainConfig};

pub const MAGIC: &[u8; 8] = b"VRPMOECK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub policy: PolicyConfig,
    pub train: Option<TrainConfig>,
    /// Run seed; every random stream of the run is derived from it.
    pub seed: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub sampling_probs: Vec<f64>,
    pub adam_step: u64,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub policy: Policy,
    pub adam: Option<AdamW>,
}

fn put_block(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.extend((shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend((d as u64).to_le_bytes());
    }
    for &x in data {
        out.extend(x.to_le_bytes());
    }
}

pub fn encode(header: &CheckpointHeader, params: &ParamSet, adam: Option<&AdamW>) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend((json.len() as u32).to_le_bytes());
    out.extend(&json);
    let blocks = params.len() * if adam.is_some() { 3 } else { 1 };
    out.extend((blocks as u32).to_le_bytes());
    for (_, name, t) in params.iter() {
        put_block(&mut out, name, &t.shape, &t.data);
    }
    if let Some(a) = adam {
        for (id, name, t) in params.iter() {
            put_block(&mut out, &format!("adam.m/{name}"), &t.shape, &a.m[id.0]);
            put_block(&mut out, &format!("adam.v/{name}"), &t.shape, &a.v[id.0]);
        }
    }
    Ok(out)
}

/// Writes through a temporary file so a crash never leaves a torn checkpoint.
pub fn save(path: &Path, header: &CheckpointHeader, params: &ParamSet, adam: Option<&AdamW>) -> Result<()> {
    let bytes = encode(header, params, adam)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let hlen = c.u32()? as usize;
    let header: CheckpointHeader = serde_json::from_slice(c.take(hlen)?)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} unsupported (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    let count = c.u32()? as usize;
    let mut blocks: HashMap<String, Tensor> = HashMap::with_capacity(count);
    for _ in 0..count {
        let nlen = c.u32()? as usize;
        let name = String::from_utf8(c.take(nlen)?.to_vec()).map_err(|_| Error::Checkpoint("block name is not UTF-8".into()))?;
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("block too large".into()))?)?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        blocks.insert(name, Tensor::new(shape, data)?);
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last block".into()));
    }

    let mut policy = Policy::new(header.policy, 0)?;
    fn take(blocks: &mut HashMap<String, Tensor>, name: &str, expect: &[usize]) -> Result<Option<Tensor>> {
        match blocks.remove(name) {
            Some(t) if t.shape == expect => Ok(Some(t)),
            Some(t) => Err(Error::Checkpoint(format!("block `{name}` has shape {:?}, expected {expect:?}", t.shape))),
            None => Ok(None),
        }
    }
    let ids: Vec<_> = policy.params.ids().collect();
    for &id in &ids {
        let name = policy.params.name(id).to_string();
        let shape = policy.params.get(id).shape.clone();
        let t = take(&mut blocks, &name, &shape)?.ok_or_else(|| Error::Checkpoint(format!("missing parameter block `{name}`")))?;
        *policy.params.get_mut(id) = t;
    }
    let mut adam = None;
    if header.adam_step > 0 || ids.iter().any(|&id| blocks.contains_key(&format!("adam.m/{}", policy.params.name(id)))) {
        let mut a = AdamW::new(&policy.params);
        a.step = header.adam_step;
        for &id in &ids {
            let name = policy.params.name(id).to_string();
            let shape = policy.params.get(id).shape.clone();
            let m = take(&mut blocks, &format!("adam.m/{name}"), &shape)?;
            let v = take(&mut blocks, &format!("adam.v/{name}"), &shape)?;
            match (m, v) {
                (Some(m), Some(v)) => {
                    a.m[id.0] = m.data;
                    a.v[id.0] = v.data;
                }
                _ => return Err(Error::Checkpoint(format!("missing optimizer state for `{name}`"))),
            }
        }
        adam = Some(a);
    }
    if let Some(extra) = blocks.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected block `{extra}`")));
    }
    Ok(Checkpoint { header, policy, adam })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::Problem;
    use crate::policy::preset_config;

    fn header(policy: PolicyConfig) -> CheckpointHeader {
        CheckpointHeader {
            format_version: FORMAT_VERSION,
            policy,
            train: None,
            seed: 42,
            epoch: 3,
            sampling_probs: vec![0.2, 0.3, 0.5],
            adam_step: 0,
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let cfg = preset_config("tiny", Problem::Cvrp).unwrap();
        let pol = Policy::new(cfg, 9).unwrap();
        let mut adam = AdamW::new(&pol.params);
        adam.step = 5;
        adam.m[0][0] = 0.125;
        adam.v[1][0] = 1e-300;
        let mut h = header(cfg);
        h.adam_step = 5;
        let bytes = encode(&h, &pol.params, Some(&adam)).unwrap();
        let ck = decode(&bytes).unwrap();
        assert_eq!(ck.header, h);
        assert_eq!(ck.policy.params, pol.params);
        let a = ck.adam.unwrap();
        assert_eq!((a.step, &a.m, &a.v), (5, &adam.m, &adam.v));
    }

    #[test]
    fn rejects_corruption() {
        let cfg = preset_config("tiny", Problem::Tsp).unwrap();
        let pol = Policy::new(cfg, 1).unwrap();
        let bytes = encode(&header(cfg), &pol.params, None).unwrap();
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Checkpoint(_))));
        assert!(decode(&bytes).unwrap().adam.is_none());
    }
}
