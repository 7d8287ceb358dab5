use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Label;
use crate::tensor::{contract, Tensor};

/// Which contrastive objective stands in for `l_clip`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// Cross-entropy of each image against the two class embeddings.
    #[default]
    PerClass,
    /// Symmetric image/label-embedding cross-entropy over the batch; items
    /// sharing a label count as negatives for each other.
    PerSample,
}

impl LossMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "per-class" => Ok(LossMode::PerClass),
            "per-sample" => Ok(LossMode::PerSample),
            other => Err(Error::Invalid(format!("unknown loss mode `{other}` (per-class, per-sample)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LossBundle {
    pub l_clip: Tensor,
    pub block_cosines: Vec<Tensor>,
    pub l_mmoe: Tensor,
    pub total: Tensor,
}

/// Plain-number view of a [`LossBundle`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub l_clip: f64,
    pub block_cosines: Vec<f64>,
    pub l_mmoe: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn values(&self) -> LossValues {
        LossValues {
            l_clip: self.l_clip.data()[0],
            block_cosines: self.block_cosines.iter().map(|c| c.data()[0]).collect(),
            l_mmoe: self.l_mmoe.data()[0],
            total: self.total.data()[0],
        }
    }
}

fn check_rows(op: &'static str, t: &Tensor) -> Result<()> {
    if t.rank() != 2 {
        return Err(Error::shape(op, format!("expected N×d, got {:?}", t.shape())));
    }
    let d = t.shape()[1];
    if t.data().chunks_exact(d).any(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt() < 1e-12) {
        return Err(Error::ZeroNorm(op));
    }
    Ok(())
}

fn check_scale(scale: &Tensor) -> Result<()> {
    if scale.numel() != 1 {
        return Err(Error::shape("loss", format!("inverse temperature must be a scalar, got {:?}", scale.shape())));
    }
    Ok(())
}

/// Symmetric cross-entropy over `S = scale · img · txtᵀ`:
/// `−(1/2N) Σ_i [log softmax_row(S)_ii + log softmax_col(S)_ii]`.
pub fn clip_loss(img: &Tensor, txt: &Tensor, scale: &Tensor) -> Result<Tensor> {
    check_rows("clip_loss", img)?;
    check_rows("clip_loss", txt)?;
    check_scale(scale)?;
    if img.shape() != txt.shape() {
        return Err(Error::shape("clip_loss", format!("{:?} vs {:?}", img.shape(), txt.shape())));
    }
    let n = img.shape()[0];
    let s = contract("id,jd->ij", &[img, txt])?.mul(scale)?;
    let eye = Tensor::eye(n);
    let rows = contract("ij,ij->", &[&s.log_softmax(1)?, &eye])?;
    let cols = contract("ij,ij->", &[&s.log_softmax(0)?, &eye])?;
    rows.add(&cols)?.scale(-1.0 / (2.0 * n as f64))
}

/// Mean cross-entropy of each image's two scaled class similarities against its label.
pub fn class_loss(img: &Tensor, classes: &Tensor, labels: &[Label], scale: &Tensor) -> Result<Tensor> {
    check_rows("class_loss", img)?;
    check_scale(scale)?;
    let n = img.shape()[0];
    if classes.rank() != 2 || classes.shape()[0] != 2 || classes.shape()[1] != img.shape()[1] {
        return Err(Error::shape("class_loss", format!("class embeddings {:?}", classes.shape())));
    }
    if labels.len() != n {
        return Err(Error::Invalid(format!("{} labels for {n} embeddings", labels.len())));
    }
    let logp = contract("id,cd->ic", &[img, classes])?.mul(scale)?.log_softmax(1)?;
    let mut pick = vec![0.0; n * 2];
    for (i, l) in labels.iter().enumerate() {
        pick[i * 2 + l.index()] = 1.0;
    }
    contract("ic,ic->", &[&logp, &Tensor::new(&[n, 2], pick)?])?.scale(-1.0 / n as f64)
}

/// `l_mmoe = mean(block cosines)`, `total = l_clip + l_mmoe`.
pub fn total_loss(l_clip: &Tensor, block_cosines: &[Tensor]) -> Result<LossBundle> {
    if block_cosines.is_empty() {
        return Err(Error::Invalid("at least one block cosine distance is required".into()));
    }
    if l_clip.numel() != 1 || block_cosines.iter().any(|c| c.numel() != 1) {
        return Err(Error::shape("total_loss", "losses must be scalars"));
    }
    let mut sum = block_cosines[0].clone();
    for c in &block_cosines[1..] {
        sum = sum.add(c)?;
    }
    let l_mmoe = sum.scale(1.0 / block_cosines.len() as f64)?.reshape(&[])?;
    let total = l_clip.reshape(&[])?.add(&l_mmoe)?;
    Ok(LossBundle { l_clip: l_clip.clone(), block_cosines: block_cosines.to_vec(), l_mmoe, total })
}
