//! Presentation-attack-detection metrics over bona fide scores.
//!
//! A sample is classified real when `score >= threshold`. APCER is the share
//! of fakes classified real, BPCER the share of reals classified fake.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Label;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSet {
    scores: Vec<f64>,
    labels: Vec<Label>,
    n_real: usize,
    n_fake: usize,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, labels: Vec<Label>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Metric(format!("{} scores for {} labels", scores.len(), labels.len())));
        }
        if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::Metric(format!("non-finite score {s}")));
        }
        let n_real = labels.iter().filter(|&&l| l == Label::Real).count();
        let n_fake = labels.len() - n_real;
        Ok(ScoreSet { scores, labels, n_real, n_fake })
    }

    pub fn from_pairs(pairs: &[(f64, Label)]) -> Result<Self> {
        Self::new(pairs.iter().map(|p| p.0).collect(), pairs.iter().map(|p| p.1).collect())
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn n_real(&self) -> usize {
        self.n_real
    }

    pub fn n_fake(&self) -> usize {
        self.n_fake
    }

    fn require_nonempty(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Metric("empty score set".into()));
        }
        Ok(())
    }

    fn require_both(&self) -> Result<()> {
        if self.n_real == 0 || self.n_fake == 0 {
            return Err(Error::Metric(format!(
                "both classes are required (real {}, fake {})",
                self.n_real, self.n_fake
            )));
        }
        Ok(())
    }

    /// Distinct scores, descending.
    fn distinct_desc(&self) -> Vec<f64> {
        let mut s = self.scores.clone();
        s.sort_by(|a, b| b.total_cmp(a));
        s.dedup();
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

fn check_threshold(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Metric(format!("threshold {t} outside [0, 1]")));
    }
    Ok(())
}

fn count(set: &ScoreSet, t: f64) -> Confusion {
    let mut c = Confusion { tp: 0, fp: 0, tn: 0, fn_: 0 };
    for (&s, &l) in set.scores.iter().zip(&set.labels) {
        match (s >= t, l) {
            (true, Label::Real) => c.tp += 1,
            (true, Label::Fake) => c.fp += 1,
            (false, Label::Fake) => c.tn += 1,
            (false, Label::Real) => c.fn_ += 1,
        }
    }
    c
}

pub fn confusion(set: &ScoreSet, threshold: f64) -> Result<Confusion> {
    set.require_nonempty()?;
    check_threshold(threshold)?;
    Ok(count(set, threshold))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Acer {
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
}

pub fn acer(set: &ScoreSet, threshold: f64) -> Result<Acer> {
    set.require_both()?;
    let c = confusion(set, threshold)?;
    let apcer = c.fp as f64 / set.n_fake as f64;
    let bpcer = c.fn_ as f64 / set.n_real as f64;
    Ok(Acer { apcer, bpcer, acer: (apcer + bpcer) / 2.0 })
}

pub fn accuracy(set: &ScoreSet, threshold: f64) -> Result<f64> {
    let c = confusion(set, threshold)?;
    Ok((c.tp + c.tn) as f64 / set.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RocPoint {
    /// `+inf` for the sentinel that classifies everything fake.
    pub threshold: f64,
    pub far: f64,
    pub tpr: f64,
}

/// ROC over every distinct score as threshold, from the `+inf` sentinel
/// (0, 0) down to the lowest score (1, 1).
pub fn roc(set: &ScoreSet) -> Result<Vec<RocPoint>> {
    set.require_both()?;
    let mut out = vec![RocPoint { threshold: f64::INFINITY, far: 0.0, tpr: 0.0 }];
    for t in set.distinct_desc() {
        let c = count(set, t);
        out.push(RocPoint { threshold: t, far: c.fp as f64 / set.n_fake as f64, tpr: c.tp as f64 / set.n_real as f64 });
    }
    Ok(out)
}

/// Trapezoid area under an ROC ordered by increasing FAR.
pub fn auc(roc: &[RocPoint]) -> f64 {
    roc.windows(2).map(|w| (w[1].far - w[0].far) * (w[1].tpr + w[0].tpr) / 2.0).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Eer {
    pub rate: f64,
    pub threshold: f64,
}

/// Sweep over distinct scores (and the `+inf` sentinel); at the point with the
/// smallest |FAR − FRR| report their mean. Ties go to the lower threshold.
/// Gaps are compared exactly as |fp·n_real − fn·n_fake|.
pub fn eer(set: &ScoreSet) -> Result<Eer> {
    set.require_both()?;
    let (nr, nf) = (set.n_real as f64, set.n_fake as f64);
    let mut best: Option<(u128, Eer)> = None;
    let thresholds = std::iter::once(f64::INFINITY).chain(set.distinct_desc());
    for t in thresholds {
        let c = count(set, t);
        let gap = (c.fp as u128 * set.n_real as u128).abs_diff(c.fn_ as u128 * set.n_fake as u128);
        // thresholds arrive in decreasing order, so `<=` keeps the lowest on ties
        if best.is_none_or(|(g, _)| gap <= g) {
            best = Some((gap, Eer { rate: (c.fp as f64 / nf + c.fn_ as f64 / nr) / 2.0, threshold: t }));
        }
    }
    Ok(best.expect("at least the sentinel").1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acer: f64,
    pub apcer: f64,
    pub bpcer: f64,
    pub acc: f64,
    pub auc: f64,
    pub eer: f64,
    pub threshold: f64,
    pub n_real: usize,
    pub n_fake: usize,
}

pub fn report(set: &ScoreSet, threshold: f64) -> Result<MetricsReport> {
    let a = acer(set, threshold)?;
    Ok(MetricsReport {
        acer: a.acer,
        apcer: a.apcer,
        bpcer: a.bpcer,
        acc: accuracy(set, threshold)?,
        auc: auc(&roc(set)?),
        eer: eer(set)?.rate,
        threshold,
        n_real: set.n_real,
        n_fake: set.n_fake,
    })
}

/// Score CSV with header `path,score,label`.
pub fn scores_csv(paths: &[String], set: &ScoreSet) -> Result<String> {
    if paths.len() != set.len() {
        return Err(Error::Metric(format!("{} paths for {} scores", paths.len(), set.len())));
    }
    let mut out = String::from("path,score,label\n");
    for ((p, s), l) in paths.iter().zip(&set.scores).zip(&set.labels) {
        if p.contains([',', '\n', '"']) {
            return Err(Error::Format { what: "score csv", detail: format!("path `{p}` needs quoting") });
        }
        writeln!(out, "{p},{s},{}", l.as_str()).expect("writing to a String");
    }
    Ok(out)
}

pub fn parse_scores_csv(text: &str) -> Result<(Vec<String>, ScoreSet)> {
    let bad = |detail: String| Error::Format { what: "score csv", detail };
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("path,score,label") {
        return Err(bad("missing `path,score,label` header".into()));
    }
    let (mut paths, mut scores, mut labels) = (vec![], vec![], vec![]);
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(bad(format!("line {}: expected 3 fields", i + 2)));
        }
        paths.push(f[0].to_string());
        scores.push(f[1].trim().parse::<f64>().map_err(|e| bad(format!("line {}: {e}", i + 2)))?);
        labels.push(Label::parse(f[2].trim())?);
    }
    Ok((paths, ScoreSet::new(scores, labels)?))
}

pub fn read_scores_csv(path: &Path) -> Result<(Vec<String>, ScoreSet)> {
    parse_scores_csv(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// ROC CSV with header `threshold,far,tpr`; the sentinel prints as `inf`.
pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut out = String::from("threshold,far,tpr\n");
    for p in points {
        writeln!(out, "{},{},{}", p.threshold, p.far, p.tpr).expect("writing to a String");
    }
    out
}
