//! Binary checkpoint format.
//!
//! ```text
//! "ABOT"                         magic
//! u32 LE                         version
//! u64 LE + bytes                 graph spec, canonical JSON
//! u64 LE                         tensor count
//! per tensor:
//!   u32 LE + bytes               UTF-8 name
//!   u32 LE                       ndim
//!   u64 LE * ndim                dims
//!   f32 LE * numel               row-major payload
//! ```
//!
//! Graph parameters are named `<node>.<param>`; gate parameters
//! `bottleneck.psi.<group>` with 1-based groups.

use std::collections::BTreeMap;
use std::path::Path;

use crate::bottleneck::Bottlenecks;
use crate::error::{Error, Result};
use crate::graph::{Graph, GraphSpec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ABOT";
pub const VERSION: u32 = 1;
const PSI_PREFIX: &str = "bottleneck.psi.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub graph: Graph,
    pub gates: Option<Bottlenecks>,
}

impl Checkpoint {
    pub fn new(graph: Graph) -> Self {
        Checkpoint { graph, gates: None }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let spec = serde_json::to_vec(&self.graph.spec())?;
        let mut tensors: Vec<(String, &Tensor)> = self.graph.named_tensors();
        if let Some(b) = &self.gates {
            tensors.extend(b.psi().iter().enumerate().map(|(i, t)| (format!("{PSI_PREFIX}{}", i + 1), t)));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(spec.len() as u64).to_le_bytes());
        out.extend_from_slice(&spec);
        out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { path, bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(r.err(0, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err(4, format!("unsupported version {version}")));
        }
        let len = r.len_u64()?;
        let at = r.pos;
        let spec: GraphSpec =
            serde_json::from_slice(r.take(len)?).map_err(|e| r.err(at, format!("graph spec: {e}")))?;
        let count = r.u64()?;
        let mut params = BTreeMap::new();
        let mut psi: BTreeMap<usize, Tensor> = BTreeMap::new();
        let by_name: BTreeMap<&str, usize> = spec.nodes.iter().enumerate().map(|(i, n)| (n.name.as_str(), i)).collect();
        for _ in 0..count {
            let at = r.pos;
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| r.err(at, "tensor name is not UTF-8"))?
                .to_string();
            let ndim = r.u32()? as usize;
            let dims = (0..ndim).map(|_| r.len_u64()).collect::<Result<Vec<_>>>()?;
            let numel: usize = dims.iter().product();
            let payload = r.take(numel.checked_mul(4).ok_or_else(|| r.err(at, "tensor too large"))?)?;
            let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(dims, data)?;
            if let Some(g) = name.strip_prefix(PSI_PREFIX) {
                let g: usize = g.parse().map_err(|_| r.err(at, format!("bad gate tensor `{name}`")))?;
                psi.insert(g, t);
                continue;
            }
            let (node, param) = name
                .rsplit_once('.')
                .and_then(|(n, p)| by_name.get(n).map(|&i| (i, p.to_string())))
                .ok_or_else(|| r.err(at, format!("tensor `{name}` matches no node")))?;
            params.insert((node, param), t);
        }
        if r.pos != bytes.len() {
            return Err(r.err(r.pos, "trailing bytes"));
        }
        let expected = params.len();
        let graph = Graph::from_spec(spec, params).map_err(|e| r.err(0, format!("invalid graph: {e}")))?;
        if graph.named_tensors().len() != expected {
            return Err(r.err(0, "checkpoint holds tensors the graph does not use"));
        }
        let gates = if psi.is_empty() {
            None
        } else {
            if psi.keys().copied().ne(1..=psi.len()) {
                return Err(r.err(0, "gate tensors are not numbered 1..n"));
            }
            Some(Bottlenecks::from_psi(psi.into_values().collect())?)
        };
        Ok(Checkpoint { graph, gates })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(path, &bytes)
    }
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, offset: usize, detail: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(self.bytes.len(), format!("truncated: needed {n} bytes at {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len_u64(&mut self) -> Result<usize> {
        let at = self.pos;
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.err(at, format!("length {v} too large")))
    }
}
