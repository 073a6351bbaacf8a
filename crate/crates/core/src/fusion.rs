//! Merging per-band features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, NodeId, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionStage {
    Early,
    Late,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionOp {
    #[serde(alias = "concatenate")]
    Concat,
    Add,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionSpec {
    pub stage: FusionStage,
    pub op: FusionOp,
}

impl Default for FusionSpec {
    fn default() -> Self {
        Self {
            stage: FusionStage::Late,
            op: FusionOp::Concat,
        }
    }
}

impl FusionSpec {
    /// Channel count after fusing `bands` maps of `channels` each.
    pub fn fused_channels(&self, bands: usize, channels: usize) -> usize {
        match self.op {
            FusionOp::Concat => bands * channels,
            FusionOp::Add => channels,
        }
    }
}

impl std::str::FromStr for FusionStage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "early" => Ok(Self::Early),
            "late" => Ok(Self::Late),
            _ => Err(Error::config("fusion.stage", format!("expected early|late, got `{s}`"))),
        }
    }
}

impl std::str::FromStr for FusionOp {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" | "concatenate" => Ok(Self::Concat),
            "add" => Ok(Self::Add),
            _ => Err(Error::config("fusion.op", format!("expected concat|add, got `{s}`"))),
        }
    }
}

fn check_shapes(shapes: &[&[usize]], op: FusionOp) -> Result<()> {
    let first = shapes.first().ok_or_else(|| Error::Shape("no maps to fuse".into()))?;
    if first.len() != 4 {
        return Err(Error::Shape(format!("fusion expects 4-D maps, got {first:?}")));
    }
    for s in shapes {
        let same = match op {
            FusionOp::Concat => s.len() == 4 && s[0] == first[0] && s[2..] == first[2..],
            FusionOp::Add => *s == *first,
        };
        if !same {
            return Err(Error::Shape(format!("cannot fuse {s:?} with {first:?} ({op:?})")));
        }
    }
    Ok(())
}

/// Fuses per-band maps recorded on a graph.
pub fn fuse_nodes(g: &mut Graph, maps: &[NodeId], op: FusionOp) -> Result<NodeId> {
    let shapes: Vec<Vec<usize>> = maps.iter().map(|&m| g.value(m).shape.clone()).collect();
    check_shapes(&shapes.iter().map(Vec::as_slice).collect::<Vec<_>>(), op)?;
    if maps.len() == 1 {
        return Ok(maps[0]);
    }
    Ok(match op {
        FusionOp::Concat => g.concat_channels(maps),
        FusionOp::Add => {
            let mut acc = maps[0];
            for &m in &maps[1..] {
                acc = g.add(acc, m);
            }
            acc
        }
    })
}

/// Fuses plain tensors: channel concatenation or element-wise sum.
pub fn fuse_features(maps: &[Tensor], op: FusionOp) -> Result<Tensor> {
    check_shapes(&maps.iter().map(|t| t.shape.as_slice()).collect::<Vec<_>>(), op)?;
    match op {
        FusionOp::Add => {
            let mut out = maps[0].clone();
            for m in &maps[1..] {
                out.add_assign(m);
            }
            Ok(out)
        }
        FusionOp::Concat => {
            let (n, _, h, w) = maps[0].dims4();
            let hw = h * w;
            let total: usize = maps.iter().map(|m| m.shape[1]).sum();
            let mut data = Vec::with_capacity(n * total * hw);
            for i in 0..n {
                for m in maps {
                    let c = m.shape[1];
                    data.extend_from_slice(&m.data[i * c * hw..(i + 1) * c * hw]);
                }
            }
            Ok(Tensor::from_vec(&[n, total, h, w], data))
        }
    }
}
