//! Parameter storage, seeded initialization, and binary snapshots.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{CompGraph, NodeId, NodeKind};

/// Flat weight vectors per parametric node. Shapes are implied by the
/// graph: conv `(c_out, c_in, k, k)`, transition `(c_out, c_in)`,
/// fully-connected `(c_out, c_in)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    map: BTreeMap<NodeId, Vec<f64>>,
}

impl Params {
    pub fn get(&self, id: NodeId) -> Option<&Vec<f64>> {
        self.map.get(&id)
    }

    pub fn get_mut(&mut self, id: NodeId) -> Option<&mut Vec<f64>> {
        self.map.get_mut(&id)
    }

    pub fn insert(&mut self, id: NodeId, w: Vec<f64>) {
        self.map.insert(id, w);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, &Vec<f64>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&NodeId, &mut Vec<f64>)> {
        self.map.iter_mut()
    }

    pub fn total_len(&self) -> usize {
        self.map.values().map(|v| v.len()).sum()
    }
}

/// Weight-vector length for a node, if parametric.
pub fn param_len(g: &CompGraph, id: NodeId) -> Option<usize> {
    let node = g.node(id);
    let c_in = node.in_channels.first().copied()?;
    match node.kind {
        NodeKind::Conv { kernel, .. } => Some(node.out_channels * c_in * kernel * kernel),
        NodeKind::Transition | NodeKind::FullyConnected => Some(node.out_channels * c_in),
        _ => None,
    }
}

/// Seeded uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`,
/// drawn in ascending node-id order so equal layer sequences across graphs
/// receive identical weights.
pub fn init_params(g: &CompGraph, seed: u64) -> Params {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Params::default();
    for node in g.nodes() {
        if !node.kind.is_parametric() {
            continue;
        }
        let len = param_len(g, node.id).expect("parametric node has inputs");
        let c_in = node.in_channels[0];
        let fan_in = match node.kind {
            NodeKind::Conv { kernel, .. } => c_in * kernel * kernel,
            _ => c_in,
        };
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w: Vec<f64> = (0..len).map(|_| rng.gen_range(-bound..bound)).collect();
        params.insert(node.id, w);
    }
    params
}

const SNAPSHOT_MAGIC: &[u8; 4] = b"GPPS";
const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum SnapshotError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a parameter snapshot (bad magic)")]
    BadMagic,
    #[error("unsupported snapshot version {0}")]
    BadVersion(u32),
}

/// Binary snapshot: magic `GPPS`, u32 LE version, u32 LE node count, then
/// per node u64 LE id, u64 LE element count, elements as f64 LE.
pub fn write_params(params: &Params, path: &Path) -> Result<(), SnapshotError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(SNAPSHOT_MAGIC);
    buf.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.map.len() as u32).to_le_bytes());
    for (&id, w) in &params.map {
        buf.extend_from_slice(&(id as u64).to_le_bytes());
        buf.extend_from_slice(&(w.len() as u64).to_le_bytes());
        for v in w {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_params(path: &Path) -> Result<Params, SnapshotError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut at = 0usize;
    let take = |at: &mut usize, n: usize| -> Result<&[u8], SnapshotError> {
        let s = buf
            .get(*at..*at + n)
            .ok_or_else(|| SnapshotError::Io(std::io::Error::other("truncated snapshot")))?;
        *at += n;
        Ok(s)
    };
    if take(&mut at, 4)? != SNAPSHOT_MAGIC {
        return Err(SnapshotError::BadMagic);
    }
    let version = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap());
    if version != SNAPSHOT_VERSION {
        return Err(SnapshotError::BadVersion(version));
    }
    let count = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap());
    let mut params = Params::default();
    for _ in 0..count {
        let id = u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap()) as usize;
        let len = u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap()) as usize;
        let mut w = Vec::with_capacity(len);
        for _ in 0..len {
            w.push(f64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap()));
        }
        params.insert(id, w);
    }
    Ok(params)
}
