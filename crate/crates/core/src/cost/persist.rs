//! Binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "FLOWCOST"
//! version  u32      1
//! arch     u8       index into Architecture::ALL
//! hand-crafted models:
//!   count  u32, then `count` f64 values
//! learned models:
//!   pairwise layer count u32, auxiliary layer count u32
//!   for every layer (pairwise, auxiliary, output): outputs u32, inputs u32
//!   count  u32, then `count` f64 values in LearnedModel::to_flat order
//! ```

use nalgebra::{DMatrix, DVector};

use super::model::{Architecture, Dense, LearnedModel};
use super::{CostModelParams, HandcraftedA, HandcraftedB};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"FLOWCOST";
const VERSION: u32 = 1;

pub fn encode(params: &CostModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(params.architecture().tag());
    let put_u32 = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    let values: Vec<f64> = match params {
        CostModelParams::HandcraftedA(a) => vec![a.entry_cost, a.skip_rate, a.max_velocity],
        CostModelParams::HandcraftedB(b) => vec![
            b.entry_cost,
            b.confidence_weight,
            b.gap_penalty,
            b.score_weight,
        ],
        CostModelParams::Learned(m) => {
            put_u32(&mut out, m.spatial_layers().len());
            put_u32(&mut out, m.aux_layers().len());
            let layers = m
                .spatial_layers()
                .iter()
                .chain(m.aux_layers())
                .chain(std::iter::once(m.head()));
            for l in layers {
                put_u32(&mut out, l.outputs());
                put_u32(&mut out, l.inputs());
            }
            m.to_flat().iter().copied().collect()
        }
    };
    put_u32(&mut out, values.len());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.at + n;
        if end > self.bytes.len() {
            return Err(Error::Model("parameter file is truncated".into()));
        }
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n)
            .map(|_| Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap())))
            .collect()
    }
}

pub fn decode(bytes: &[u8]) -> Result<CostModelParams> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Model("not a cost model parameter file".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Model(format!(
            "unsupported parameter file version {version}"
        )));
    }
    let tag = r.take(1)?[0];
    let arch = Architecture::from_tag(tag)
        .ok_or_else(|| Error::Model(format!("unknown architecture tag {tag}")))?;
    let params = match arch {
        Architecture::HandcraftedA | Architecture::HandcraftedB => {
            let n = r.u32()?;
            let v = r.f64s(n)?;
            match (arch, v.as_slice()) {
                (Architecture::HandcraftedA, &[entry_cost, skip_rate, max_velocity]) => {
                    CostModelParams::HandcraftedA(HandcraftedA {
                        entry_cost,
                        skip_rate,
                        max_velocity,
                    })
                }
                (
                    Architecture::HandcraftedB,
                    &[entry_cost, confidence_weight, gap_penalty, score_weight],
                ) => CostModelParams::HandcraftedB(HandcraftedB {
                    entry_cost,
                    confidence_weight,
                    gap_penalty,
                    score_weight,
                }),
                _ => {
                    return Err(Error::Model(format!(
                        "{arch} expects a different value count, got {n}"
                    )))
                }
            }
        }
        _ => {
            let ns = r.u32()?;
            let na = r.u32()?;
            let mut shapes = Vec::with_capacity(ns + na + 1);
            for _ in 0..ns + na + 1 {
                shapes.push((r.u32()?, r.u32()?));
            }
            let layer = |&(o, i): &(usize, usize)| Dense {
                weights: DMatrix::zeros(o, i),
                bias: DVector::zeros(o),
            };
            let spatial = shapes[..ns].iter().map(layer).collect();
            let aux = shapes[ns..ns + na].iter().map(layer).collect();
            let head = layer(&shapes[ns + na]);
            let mut m = LearnedModel::from_layers(arch, spatial, aux, head)?;
            let n = r.u32()?;
            m.set_flat(&r.f64s(n)?)?;
            CostModelParams::Learned(m)
        }
    };
    if r.at != bytes.len() {
        return Err(Error::Model("trailing bytes after parameters".into()));
    }
    Ok(params)
}

/// Human-readable description written next to the binary container.
pub fn summary(params: &CostModelParams) -> String {
    let mut s = format!(
        "format_version = {VERSION}\narchitecture = {}\n",
        params.architecture()
    );
    match params {
        CostModelParams::HandcraftedA(a) => {
            s += &format!(
                "entry_cost = {}\nskip_rate = {}\nmax_velocity = {}\n",
                a.entry_cost, a.skip_rate, a.max_velocity
            );
        }
        CostModelParams::HandcraftedB(b) => {
            s += &format!(
                "entry_cost = {}\nconfidence_weight = {}\ngap_penalty = {}\nscore_weight = {}\n",
                b.entry_cost, b.confidence_weight, b.gap_penalty, b.score_weight
            );
        }
        CostModelParams::Learned(m) => {
            s += &format!(
                "parameters = {}\nentry_cost = {}\nexit_cost = {}\nconfidence_weight = {}\ndetection_bias = {}\n",
                m.parameter_count(),
                m.entry_cost,
                m.exit_cost,
                m.confidence_weight,
                m.detection_bias
            );
            let named = m
                .spatial_layers()
                .iter()
                .enumerate()
                .map(|(i, l)| (format!("pairwise.{i}"), l))
                .chain(
                    m.aux_layers()
                        .iter()
                        .enumerate()
                        .map(|(i, l)| (format!("aux.{i}"), l)),
                )
                .chain(std::iter::once(("output".to_string(), m.head())));
            for (name, l) in named {
                s += &format!(
                    "layer {name}: {} -> {} (weight norm {:.6})\n",
                    l.inputs(),
                    l.outputs(),
                    l.weights.norm()
                );
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_all_architectures() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut all = vec![
            CostModelParams::HandcraftedA(HandcraftedA::default()),
            CostModelParams::HandcraftedB(HandcraftedB::default()),
        ];
        for arch in [
            Architecture::Linear,
            Architecture::Mlp1,
            Architecture::Mlp2,
            Architecture::TwoStream,
        ] {
            all.push(CostModelParams::Learned(
                LearnedModel::new(arch, 8, Some(6), &mut rng).unwrap(),
            ));
        }
        for p in all {
            let bytes = encode(&p);
            assert_eq!(decode(&bytes).unwrap(), p);
            assert!(summary(&p).contains(p.architecture().name()));
            assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        }
    }

    #[test]
    fn rejects_foreign_data() {
        assert!(decode(b"NOTAFILE\x01\0\0\0\0").is_err());
        let mut bytes = encode(&CostModelParams::HandcraftedB(HandcraftedB::default()));
        bytes[8] = 9;
        assert!(decode(&bytes).is_err());
    }
}
