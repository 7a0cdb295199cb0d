//! Flat binary weight checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "LPSNETCK"
//! version      u32      1
//! spec         u32 length + UTF-8 spec document (JSON)
//! block kind   u32 length + UTF-8 name
//! interaction  u32 length + UTF-8 name
//! num_classes  u32
//! seed         u64
//! count        u32      number of tensors that follow
//! tensor       u32 name length + UTF-8 name, 4 x u32 dims (n, c, h, w), f32 values
//! ```
//!
//! Tensor names follow `path{i}/stage{j}/block{b}/{conv|norm}/{weight|bias|mean|var}`;
//! multi-conv blocks and interaction modules insert a unit name before `conv`/`norm`.

use std::io::{Read, Write};
use std::path::Path;

use crate::archspec::NetworkSpec;
use crate::tensor::{Shape, Tensor};

use super::{NetError, NetworkInstance};

const MAGIC: &[u8; 8] = b"LPSNETCK";
const VERSION: u32 = 1;

pub fn save(net: &NetworkInstance<f32>, path: impl AsRef<Path>) -> Result<(), NetError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_str(&mut out, &net.spec().serialize());
    put_str(&mut out, net.arch.block_kind.name());
    put_str(&mut out, net.arch.interaction_kind.name());
    out.extend_from_slice(&(net.num_classes() as u32).to_le_bytes());
    out.extend_from_slice(&net.seed.to_le_bytes());
    let reg = &net.arch.registry;
    let entries: Vec<(&str, &Tensor<f32>)> = reg
        .params
        .iter()
        .zip(&net.weights.params)
        .chain(reg.buffers.iter().zip(&net.weights.buffers))
        .map(|(d, t)| (d.name.as_str(), t))
        .collect();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        put_str(&mut out, name);
        let s = t.shape();
        for d in [s.n, s.c, s.h, s.w] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<NetworkInstance<f32>, NetError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let spec = NetworkSpec::parse(&r.string()?)?;
    let block = r.string()?.parse().map_err(|e: String| bad(&e))?;
    let interaction = r.string()?.parse().map_err(|e: String| bad(&e))?;
    let classes = r.u32()? as usize;
    let seed = r.u64()?;
    let mut net = NetworkInstance::<f32>::build(&spec, block, interaction, classes, seed)?;
    let count = r.u32()? as usize;
    let reg = net.arch.registry.clone();
    let expected = reg.params.len() + reg.buffers.len();
    if count != expected {
        return Err(bad(&format!("expected {expected} tensors, found {count}")));
    }
    for _ in 0..count {
        let name = r.string()?;
        let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?].map(|d| d as usize);
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let raw = r.take(shape.numel() * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::from_vec(shape, data);
        let slot = if let Some(i) = reg.params.iter().position(|d| d.name == name) {
            &mut net.weights.params[i]
        } else if let Some(i) = reg.buffers.iter().position(|d| d.name == name) {
            &mut net.weights.buffers[i]
        } else {
            return Err(NetError::UnknownParam(name));
        };
        if slot.shape() != shape {
            return Err(NetError::ParamShape(name));
        }
        *slot = t;
    }
    Ok(net)
}

fn bad(msg: &str) -> NetError {
    NetError::Checkpoint(msg.to_string())
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NetError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| bad("truncated file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NetError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64, NetError> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    fn string(&mut self) -> Result<String, NetError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("invalid UTF-8"))
    }
}
