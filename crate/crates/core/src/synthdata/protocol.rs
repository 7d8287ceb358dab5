use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{full_scale_subsets, DeviceId, ManifestRow, Split};
use crate::error::{Error, Result};

/// P1 all subsets; P2 train on the single-population subsets only;
/// P3.k leave device k out (1 H100, 2 DALSA, 3 LG2200, 4 AI1000, 5 LG4000, 6 AD100).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ProtocolId {
    P1,
    P2,
    P3(u8),
}

impl ProtocolId {
    pub fn all() -> Vec<ProtocolId> {
        let mut v = vec![ProtocolId::P1, ProtocolId::P2];
        v.extend((1..=6).map(ProtocolId::P3));
        v
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "P1" => Ok(ProtocolId::P1),
            "P2" => Ok(ProtocolId::P2),
            _ => match s.strip_prefix("P3.").and_then(|k| k.parse::<u8>().ok()) {
                Some(k @ 1..=6) => Ok(ProtocolId::P3(k)),
                _ => Err(Error::Invalid(format!("unknown protocol `{s}` (P1, P2, P3.1 .. P3.6)"))),
            },
        }
    }

    /// Device left out of training, for P3 protocols.
    pub fn held_out(self) -> Option<DeviceId> {
        match self {
            ProtocolId::P3(k) => Some(DeviceId::ALL[k as usize - 1]),
            _ => None,
        }
    }
}

impl fmt::Display for ProtocolId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProtocolId::P1 => write!(f, "P1"),
            ProtocolId::P2 => write!(f, "P2"),
            ProtocolId::P3(k) => write!(f, "P3.{k}"),
        }
    }
}

impl Serialize for ProtocolId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ProtocolId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        ProtocolId::parse(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug)]
pub struct ProtocolSplit {
    pub id: ProtocolId,
    pub train: Vec<ManifestRow>,
    pub test: Vec<ManifestRow>,
}

/// Nicknames trained on under P2.
pub const P2_TRAIN: [&str; 2] = ["H", "F"];

pub fn build_protocol(id: ProtocolId, manifest: &[ManifestRow]) -> Result<ProtocolSplit> {
    let present: HashSet<&str> = manifest.iter().map(|r| r.nickname.as_str()).collect();
    for spec in full_scale_subsets() {
        if !present.contains(spec.nickname.as_str()) {
            return Err(Error::Invalid(format!("manifest has no rows for subset {}", spec.nickname)));
        }
    }
    let pick = |f: &dyn Fn(&ManifestRow) -> bool| manifest.iter().filter(|r| f(r)).cloned().collect::<Vec<_>>();
    let (train, test) = match id {
        ProtocolId::P1 => (pick(&|r| r.split == Split::Train), pick(&|r| r.split == Split::Test)),
        ProtocolId::P2 => (
            pick(&|r| r.split == Split::Train && P2_TRAIN.contains(&r.nickname.as_str())),
            pick(&|r| r.split == Split::Test),
        ),
        ProtocolId::P3(_) => {
            let out = id.held_out().expect("P3 has a held-out device");
            (pick(&|r| r.split == Split::Train && r.device != out), pick(&|r| r.device == out))
        }
    };
    Ok(ProtocolSplit { id, train, test })
}
