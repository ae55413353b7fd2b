//! Binary parameter format and round checkpoints.
//!
//! Parameter blob, all integers little-endian:
//!
//! ```text
//! magic "PGPM" | version u16 | tensor count u32 |
//!   per tensor: rank u32 | dims u64 x rank | values f64 x volume
//! ```
//!
//! Checkpoint:
//!
//! ```text
//! magic "PGCK" | version u16 | header length u64 | JSON header |
//!   blob count u32 | per blob: length u64 | parameter blob
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::personalization::AdaptationState;
use crate::protocol::{ClientState, ServerState};
use crate::prototypes::PrototypeStore;
use crate::scheduler::ApaState;
use crate::split::SplitModel;
use crate::tensor::{Activation, Linear, Mlp, Parameters, Tensor};

pub const PARAM_MAGIC: &[u8; 4] = b"PGPM";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PGCK";
pub const FORMAT_VERSION: u16 = 1;

/// Upper bound on decoded element counts, so corrupt headers cannot request
/// absurd allocations.
const MAX_VALUES: usize = 1 << 28;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::parse(format!("truncated input at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::parse("length does not fit in memory"))
    }

    fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return Err(Error::parse(format!(
                "bad magic, expected {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        let v = self.u16()?;
        if v != FORMAT_VERSION {
            return Err(Error::parse(format!("unsupported format version {v}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::parse(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn encode_tensors(tensors: &[&Tensor]) -> Vec<u8> {
    let values: usize = tensors.iter().map(|t| t.len()).sum();
    let mut out = Vec::with_capacity(10 + 8 * values + 16 * tensors.len());
    out.extend_from_slice(PARAM_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut r = Reader::new(bytes);
    r.magic(PARAM_MAGIC)?;
    let count = r.u32()? as usize;
    let mut out = Vec::new();
    let mut total = 0usize;
    for _ in 0..count {
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(Error::parse(format!("tensor rank {rank} is not supported")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut volume = 1usize;
        for _ in 0..rank {
            let d = r.len()?;
            volume = volume
                .checked_mul(d)
                .filter(|&v| v <= MAX_VALUES)
                .ok_or_else(|| Error::parse("tensor volume too large"))?;
            shape.push(d);
        }
        total += volume;
        if total > MAX_VALUES {
            return Err(Error::parse("parameter blob too large"));
        }
        let raw = r.take(volume * 8)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(Tensor::new(shape, values)?);
    }
    r.finish()?;
    Ok(out)
}

pub fn encode_params<P: Parameters>(params: &P) -> Vec<u8> {
    encode_tensors(&params.tensors())
}

fn linear_from(weight: Tensor, bias: Tensor) -> Result<Linear> {
    if weight.shape().len() != 2 || bias.shape().len() != 1 {
        return Err(Error::parse("layer tensors must be a matrix and a vector"));
    }
    Linear::new(weight, bias).map_err(|e| Error::parse(e.to_string()))
}

pub fn decode_linear(bytes: &[u8]) -> Result<Linear> {
    let mut t = decode_tensors(bytes)?;
    if t.len() != 2 {
        return Err(Error::parse(format!("a linear layer has 2 tensors, got {}", t.len())));
    }
    let bias = t.pop().unwrap();
    linear_from(t.pop().unwrap(), bias)
}

pub fn decode_mlp(bytes: &[u8], hidden: Activation) -> Result<Mlp> {
    let t = decode_tensors(bytes)?;
    if t.is_empty() || t.len() % 2 != 0 {
        return Err(Error::parse(format!("an MLP has an even, nonzero tensor count, got {}", t.len())));
    }
    let mut layers = Vec::with_capacity(t.len() / 2);
    let mut it = t.into_iter();
    while let (Some(w), Some(b)) = (it.next(), it.next()) {
        layers.push(linear_from(w, b)?);
    }
    Mlp::new(layers, hidden).map_err(|e| Error::parse(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ClientHeader {
    client_id: usize,
    adaptation: AdaptationState,
    last_round: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    tag: String,
    round: u64,
    num_clients: usize,
    hidden: Activation,
    apa: ApaState,
    store: PrototypeStore,
    has_global_head: bool,
    has_tmp_head: bool,
    clients: Vec<ClientHeader>,
}

/// Server state plus per-client mutable state, without the client shards.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Opaque identifier of the run configuration, checked on resume.
    pub tag: String,
    pub server: ServerState,
    pub clients: Vec<(usize, SplitModel, AdaptationState, Option<u64>)>,
}

impl Checkpoint {
    pub fn capture(tag: impl Into<String>, server: &ServerState, clients: &[ClientState]) -> Self {
        Self {
            tag: tag.into(),
            server: server.clone(),
            clients: clients
                .iter()
                .map(|c| (c.id(), c.model.clone(), c.adaptation, c.last_round))
                .collect(),
        }
    }

    /// Writes the saved state back into live clients whose shards were rebuilt
    /// from the same configuration.
    pub fn restore_into(self, clients: &mut [ClientState]) -> Result<ServerState> {
        if clients.len() != self.clients.len() {
            return Err(Error::contract(format!(
                "checkpoint has {} clients, run has {}",
                self.clients.len(),
                clients.len()
            )));
        }
        for (c, (id, model, adaptation, last_round)) in clients.iter_mut().zip(self.clients) {
            if c.id() != id {
                return Err(Error::contract("checkpoint client order does not match"));
            }
            if !model.theta.same_shape(&c.model.theta) || !model.phi.same_shape(&c.model.phi) {
                return Err(Error::contract("checkpoint model does not fit the run"));
            }
            c.model = model;
            c.adaptation = adaptation;
            c.last_round = last_round;
        }
        Ok(self.server)
    }

    pub fn encode(&self) -> Vec<u8> {
        let s = &self.server;
        let header = CheckpointHeader {
            tag: self.tag.clone(),
            round: s.round,
            num_clients: s.num_clients,
            hidden: s.theta_bar.hidden_activation(),
            apa: s.apa.clone(),
            store: s.store.clone(),
            has_global_head: s.global_head.is_some(),
            has_tmp_head: s.apa.tmp_head.is_some(),
            clients: self
                .clients
                .iter()
                .map(|(id, _, a, l)| ClientHeader {
                    client_id: *id,
                    adaptation: *a,
                    last_round: *l,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
        let mut blobs = vec![encode_params(&s.theta_bar)];
        blobs.extend(s.global_head.as_ref().map(encode_params));
        blobs.extend(s.apa.tmp_head.as_ref().map(encode_params));
        for (_, m, _, _) in &self.clients {
            blobs.push(encode_params(&m.theta));
            blobs.push(encode_params(&m.phi));
        }

        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
        for b in &blobs {
            out.extend_from_slice(&(b.len() as u64).to_le_bytes());
            out.extend_from_slice(b);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        let n = r.len()?;
        let header: CheckpointHeader = serde_json::from_slice(r.take(n)?)
            .map_err(|e| Error::parse(format!("checkpoint header: {e}")))?;
        let count = r.u32()? as usize;
        let expected = 1
            + usize::from(header.has_global_head)
            + usize::from(header.has_tmp_head)
            + 2 * header.clients.len();
        if count != expected || header.clients.len() != header.num_clients {
            return Err(Error::parse(format!(
                "checkpoint lists {count} blobs, header implies {expected}"
            )));
        }
        let mut blobs = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.len()?;
            blobs.push(r.take(len)?);
        }
        r.finish()?;

        let mut it = blobs.into_iter();
        let mut next = || it.next().expect("blob count checked");
        let theta_bar = decode_mlp(next(), header.hidden)?;
        let global_head = if header.has_global_head {
            Some(decode_linear(next())?)
        } else {
            None
        };
        let mut apa = header.apa;
        apa.tmp_head = if header.has_tmp_head {
            Some(decode_linear(next())?)
        } else {
            None
        };
        let mut clients = Vec::with_capacity(header.clients.len());
        for c in header.clients {
            let theta = decode_mlp(next(), header.hidden)?;
            let phi = decode_linear(next())?;
            if theta.output_dim() != phi.in_dim() {
                return Err(Error::parse("client head does not fit its representation"));
            }
            clients.push((c.client_id, SplitModel { theta, phi }, c.adaptation, c.last_round));
        }
        Ok(Self {
            tag: header.tag,
            server: ServerState {
                theta_bar,
                global_head,
                store: header.store,
                apa,
                round: header.round,
                num_clients: header.num_clients,
            },
            clients,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}
