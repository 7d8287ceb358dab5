//! Synthetic iris-like dataset mirroring the subset/device/group structure of
//! the cross-domain benchmark, plus its three evaluation protocols.

mod protocol;
mod render;

use std::collections::HashSet;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Label;
use crate::rng;

pub use protocol::{build_protocol, ProtocolId, ProtocolSplit};
pub use render::{gaussian_blur, render_iris, render_stages, DeviceId, DeviceProfile, RenderStages};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const DEFAULT_SCALE: usize = 10;
pub const DEFAULT_IMAGE_SIZE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Image counts of one subset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetSpec {
    pub nickname: String,
    pub device: DeviceId,
    /// 0 for the single-population subsets (H, F), 1 otherwise.
    pub group: u8,
    pub train_real: usize,
    pub train_fake: usize,
    pub test_real: usize,
    pub test_fake: usize,
}

impl SubsetSpec {
    pub fn count(&self, split: Split, label: Label) -> usize {
        match (split, label) {
            (Split::Train, Label::Real) => self.train_real,
            (Split::Train, Label::Fake) => self.train_fake,
            (Split::Test, Label::Real) => self.test_real,
            (Split::Test, Label::Fake) => self.test_fake,
        }
    }

    pub fn total(&self) -> usize {
        self.train_real + self.train_fake + self.test_real + self.test_fake
    }

    /// Counts divided by `factor` (floored), at least 10 per cell unless the cell is empty.
    pub fn scaled(&self, factor: usize) -> Result<SubsetSpec> {
        if factor == 0 {
            return Err(Error::Invalid("scale factor must be at least 1".into()));
        }
        let f = |c: usize| if c == 0 { 0 } else { (c / factor).max(10) };
        Ok(SubsetSpec {
            train_real: f(self.train_real),
            train_fake: f(self.train_fake),
            test_real: f(self.test_real),
            test_fake: f(self.test_fake),
            ..self.clone()
        })
    }
}

/// Full-size subset table: nickname, device, group, train real/fake, test real/fake.
pub fn full_scale_subsets() -> Vec<SubsetSpec> {
    use DeviceId::*;
    let rows: [(&str, DeviceId, u8, usize, usize, usize, usize); 10] = [
        ("H", H100, 0, 4806, 592, 1198, 148),
        ("Da", Dalsa, 1, 270, 400, 246, 440),
        ("Db", Dalsa, 1, 700, 873, 378, 558),
        ("La", LG2200, 1, 450, 540, 378, 576),
        ("Lb", LG2200, 1, 2469, 1122, 1485, 765),
        ("F", AI1000, 0, 20000, 20000, 5000, 5000),
        ("Ga", LG4000, 1, 2000, 1000, 800, 400),
        ("Aa", AD100, 1, 400, 200, 200, 100),
        ("Gb", LG4000, 1, 600, 600, 900, 900),
        ("Ab", AD100, 1, 0, 0, 900, 900),
    ];
    rows.iter()
        .map(|&(n, device, group, train_real, train_fake, test_real, test_fake)| SubsetSpec {
            nickname: n.to_string(),
            device,
            group,
            train_real,
            train_fake,
            test_real,
            test_fake,
        })
        .collect()
}

pub fn scaled_subsets(factor: usize) -> Result<Vec<SubsetSpec>> {
    full_scale_subsets().iter().map(|s| s.scaled(factor)).collect()
}

/// One image of the generated dataset. `path` is relative to the dataset root.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRow {
    pub path: String,
    pub nickname: String,
    pub device: DeviceId,
    pub group: u8,
    pub label: Label,
    pub split: Split,
}

/// Identity seed of one image: keyed by (master seed, subset, split, label, index),
/// so any image can be regenerated on its own.
pub fn identity_seed(master: u64, subset: usize, split: Split, label: Label, index: usize) -> u64 {
    rng::key(&[master, subset as u64, split as u64, label.index() as u64, index as u64])
}

/// Rows a spec list expands to, in file order, without rendering.
pub fn plan_manifest(specs: &[SubsetSpec]) -> Result<Vec<ManifestRow>> {
    let mut seen = HashSet::new();
    let mut rows = Vec::with_capacity(specs.iter().map(SubsetSpec::total).sum());
    for spec in specs {
        if !seen.insert(spec.nickname.as_str()) {
            return Err(Error::Invalid(format!("duplicate subset nickname {}", spec.nickname)));
        }
        for split in [Split::Train, Split::Test] {
            for label in [Label::Real, Label::Fake] {
                for i in 0..spec.count(split, label) {
                    rows.push(ManifestRow {
                        path: format!("{}/{}/{}_{i:05}.pgm", spec.nickname, split.as_str(), label.as_str()),
                        nickname: spec.nickname.clone(),
                        device: spec.device,
                        group: spec.group,
                        label,
                        split,
                    });
                }
            }
        }
    }
    Ok(rows)
}

/// Renders every image of `specs` under `out_dir` and writes the manifest.
/// Identical arguments reproduce byte-identical files.
pub fn generate_subsets(specs: &[SubsetSpec], master_seed: u64, size: usize, out_dir: &Path) -> Result<Vec<ManifestRow>> {
    let rows = plan_manifest(specs)?;
    let mut index_in_cell = 0usize;
    let mut prev: Option<(&str, Split, Label)> = None;
    for row in &rows {
        let cell = (row.nickname.as_str(), row.split, row.label);
        index_in_cell = if prev == Some(cell) { index_in_cell + 1 } else { 0 };
        prev = Some(cell);
        let subset = specs.iter().position(|s| s.nickname == row.nickname).expect("planned row");
        let seed = identity_seed(master_seed, subset, row.split, row.label, index_in_cell);
        let img = render_iris(seed, row.label, row.group, row.device, size)?;
        let path = out_dir.join(&row.path);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        img.write_pgm(&path)?;
    }
    write_manifest(&rows, &out_dir.join(MANIFEST_FILE))?;
    Ok(rows)
}

pub fn write_manifest(rows: &[ManifestRow], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for row in rows {
        let line = serde_json::to_string(row).map_err(|e| Error::Format { what: "manifest", detail: e.to_string() })?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (n, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            what: "manifest",
            detail: format!("line {}: {e}", n + 1),
        })?);
    }
    Ok(rows)
}
