//! Soft and masked mixture-of-experts layers.
//!
//! Tokens `X` (n×d) are routed to `e·s` slots through dispatch weights
//! `D = softmax_over_tokens(X Φ)`. In masked mode a binary mask `M` zeroes a
//! fixed number of dispatch entries per expert before the slots `Dᵀ X` are
//! formed, so every expert except the reference one sees partial input.
//! Expert outputs are mixed back per token with combine weights
//! `C = softmax_over_slots(X Φ)`, always taken from the unmasked logits.
//! The cosine agreement term measures how far each expert's slot outputs
//! drift from the reference expert (index 0).
//!
//! Internally every routine works on a leading batch axis; the single-sample
//! functions below are thin wrappers.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{contract, Tensor};

/// Nonlinearity between the two affine maps of an expert.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ExpertActivation {
    #[default]
    Gelu,
    Identity,
}

/// Per-block MoE parameters. Expert MLP weights are stacked along a leading
/// expert axis: `w1` is e×d×h, `b1` e×h, `w2` e×h×d, `b2` e×d.
#[derive(Clone, Debug)]
pub struct MoeLayerParams {
    pub phi: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub activation: ExpertActivation,
    experts: usize,
    slots: usize,
    hidden: usize,
}

impl MoeLayerParams {
    pub fn new(
        phi: Tensor,
        w1: Tensor,
        b1: Tensor,
        w2: Tensor,
        b2: Tensor,
        slots: usize,
        activation: ExpertActivation,
    ) -> Result<Self> {
        let bad = |what: &str| Err(Error::shape("moe params", what.to_string()));
        if w1.rank() != 3 {
            return bad("w1 must be e×d×h");
        }
        let (e, d, h) = (w1.shape()[0], w1.shape()[1], w1.shape()[2]);
        if e == 0 || slots == 0 {
            return Err(Error::Invalid("experts and slots must be at least 1".into()));
        }
        if phi.shape() != [d, e * slots] {
            return bad(&format!("phi is {:?}, expected [{d}, {}]", phi.shape(), e * slots));
        }
        if b1.shape() != [e, h] || w2.shape() != [e, h, d] || b2.shape() != [e, d] {
            return bad("expert weights disagree on e, d or h");
        }
        Ok(MoeLayerParams { phi, w1, b1, w2, b2, activation, experts: e, slots, hidden: h })
    }

    /// Fan-in scaled uniform weights, zero biases.
    pub fn init(d: usize, experts: usize, slots: usize, hidden: usize, rng: &mut impl rand::Rng) -> Result<Self> {
        let bd = 1.0 / (d as f64).sqrt();
        let bh = 1.0 / (hidden as f64).sqrt();
        let es = experts * slots;
        Self::new(
            Tensor::parameter(&[d, es], rng::uniform_vec(rng, d * es, bd))?,
            Tensor::parameter(&[experts, d, hidden], rng::uniform_vec(rng, experts * d * hidden, bd))?,
            Tensor::parameter(&[experts, hidden], vec![0.0; experts * hidden])?,
            Tensor::parameter(&[experts, hidden, d], rng::uniform_vec(rng, experts * hidden * d, bh))?,
            Tensor::parameter(&[experts, d], vec![0.0; experts * d])?,
            slots,
            ExpertActivation::Gelu,
        )
    }

    pub fn experts(&self) -> usize {
        self.experts
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn dim(&self) -> usize {
        self.phi.shape()[0]
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 5] {
        [("phi", &self.phi), ("w1", &self.w1), ("b1", &self.b1), ("w2", &self.w2), ("b2", &self.b2)]
    }
}

/// Per-expert mask rates plus the seed of the mask stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    pub rates: Vec<f64>,
    pub seed: u64,
}

impl MaskConfig {
    pub fn new(rates: Vec<f64>, seed: u64) -> Result<Self> {
        let cfg = MaskConfig { rates, seed };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match self.rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            Some(r) => Err(Error::Invalid(format!("mask rate {r} outside [0, 1]"))),
            None => Ok(()),
        }
    }

    pub fn zeros(experts: usize, seed: u64) -> Self {
        MaskConfig { rates: vec![0.0; experts], seed }
    }

    /// The four rate sets of the mask-rate study, `which` in 1..=4.
    pub fn preset(which: usize, seed: u64) -> Result<Self> {
        let rates = match which {
            1 => vec![0.0, 0.1, 0.1, 0.1],
            2 => vec![0.0, 0.5, 0.5, 0.5],
            3 => vec![0.0, 0.15, 0.3, 0.45],
            4 => vec![0.1, 0.1, 0.1, 0.1],
            _ => return Err(Error::Invalid(format!("no rate preset {which}"))),
        };
        Ok(MaskConfig { rates, seed })
    }

    pub fn is_identity(&self) -> bool {
        self.rates.iter().all(|&r| r == 0.0)
    }
}

/// Number of zeroed entries for an expert: `floor(entries · rate)`.
pub fn zero_count(entries: usize, rate: f64) -> usize {
    // the small offset keeps products like 20 · 0.15 from landing just below an integer
    (((entries as f64) * rate + 1e-9).floor() as usize).min(entries)
}

/// Everything computed by one MoE forward pass, single-sample view.
#[derive(Clone, Debug, Serialize)]
pub struct MoeForwardTrace {
    /// n×(e·s)
    pub dispatch: Tensor,
    /// n×(e·s), entries in {0, 1}
    pub mask: Tensor,
    pub masked_dispatch: Tensor,
    /// (e·s)×d
    pub slots: Tensor,
    /// e×s×d
    pub expert_outputs: Tensor,
    /// n×(e·s)
    pub combine: Tensor,
    /// n×d
    pub output: Tensor,
    /// scalar
    pub cosine_distance: Tensor,
}

impl PartialEq for MoeForwardTrace {
    fn eq(&self, o: &Self) -> bool {
        self.dispatch == o.dispatch
            && self.mask == o.mask
            && self.masked_dispatch == o.masked_dispatch
            && self.slots == o.slots
            && self.expert_outputs == o.expert_outputs
            && self.combine == o.combine
            && self.output == o.output
            && self.cosine_distance == o.cosine_distance
    }
}

fn check_tokens(x: &Tensor, phi: &Tensor) -> Result<()> {
    if x.rank() != 2 || phi.rank() != 2 || x.shape()[1] != phi.shape()[0] {
        return Err(Error::shape("moe", format!("tokens {:?} vs phi {:?}", x.shape(), phi.shape())));
    }
    Ok(())
}

/// Dispatch weights: softmax over tokens of each column of `X Φ`.
pub fn dispatch_weights(x: &Tensor, phi: &Tensor) -> Result<Tensor> {
    check_tokens(x, phi)?;
    contract("nd,dk->nk", &[x, phi])?.softmax(0)
}

/// Combine weights: softmax over all slots of each row of `X Φ`.
pub fn combine_weights(x: &Tensor, phi: &Tensor) -> Result<Tensor> {
    check_tokens(x, phi)?;
    contract("nd,dk->nk", &[x, phi])?.softmax(1)
}

/// Binary mask with logical shape e×n×s. Expert `i` gets exactly
/// `zero_count(n·s, rates[i])` zeros at positions drawn from stream `draw`.
pub fn build_mask(n: usize, experts: usize, slots: usize, cfg: &MaskConfig, draw: u64) -> Result<Tensor> {
    cfg.validate()?;
    if cfg.rates.len() != experts {
        return Err(Error::Invalid(format!("{} mask rates for {experts} experts", cfg.rates.len())));
    }
    let per = n * slots;
    let mut data = vec![1.0; experts * per];
    let mut rng = rng::stream(cfg.seed, draw);
    for (i, &rate) in cfg.rates.iter().enumerate() {
        let k = zero_count(per, rate);
        for pos in index::sample(&mut rng, per, k) {
            data[i * per + pos] = 0.0;
        }
    }
    Tensor::new(&[experts, n, slots], data)
}

/// Rearranges an e×n×s mask into the n×(e·s) dispatch layout.
pub fn mask_to_dispatch_layout(mask: &Tensor) -> Result<Tensor> {
    if mask.rank() != 3 {
        return Err(Error::shape("mask layout", format!("expected e×n×s, got {:?}", mask.shape())));
    }
    let (e, n, s) = (mask.shape()[0], mask.shape()[1], mask.shape()[2]);
    contract("ens->nes", &[mask])?.reshape(&[n, e * s])
}

/// `D' = D ⊙ M`, no renormalization.
pub fn masked_dispatch(dispatch: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if dispatch.shape() != mask.shape() {
        return Err(Error::shape("masked_dispatch", format!("{:?} vs {:?}", dispatch.shape(), mask.shape())));
    }
    dispatch.mul(mask)
}

/// Cosine agreement over e×s×d expert outputs:
/// `(1/s) Σ_j Σ_{i≥1} (1 − cos(Y⁰_j, Yⁱ_j))`. Zero-norm slots count as cosine 0.
pub fn cosine_agreement_loss(expert_outputs: &Tensor) -> Result<Tensor> {
    if expert_outputs.rank() != 3 {
        return Err(Error::shape("cosine_agreement_loss", format!("expected e×s×d, got {:?}", expert_outputs.shape())));
    }
    if expert_outputs.shape()[0] < 2 {
        return Err(Error::Invalid("cosine agreement needs at least two experts".into()));
    }
    let s = expert_outputs.shape();
    let batched = expert_outputs.reshape(&[1, s[0], s[1], s[2]])?;
    cosine_distance_batched(&batched)?.reshape(&[])
}

/// Per-sample cosine distance for B×e×s×d expert outputs, shape [B].
pub(crate) fn cosine_distance_batched(y: &Tensor) -> Result<Tensor> {
    let (e, s) = (y.shape()[1], y.shape()[2]);
    let unit = y.l2_normalize()?;
    let mut first = vec![0.0; e];
    first[0] = 1.0;
    let mut others = vec![1.0; e];
    others[0] = 0.0;
    let first = Tensor::new(&[e], first)?;
    let others = Tensor::new(&[e], others)?;
    let reference = contract("besd,e->bsd", &[&unit, &first])?;
    let cos = contract("besd,bsd->bes", &[&unit, &reference])?;
    let summed = contract("bes,e->b", &[&cos, &others])?;
    Tensor::scalar((e - 1) as f64)?.sub(&summed.scale(1.0 / s as f64)?)
}

/// Batched forward outputs; every tensor carries a leading batch axis.
pub(crate) struct BatchedMoe {
    pub dispatch: Tensor,
    pub masked_dispatch: Tensor,
    pub slots: Tensor,
    pub expert_outputs: Tensor,
    pub combine: Tensor,
    pub output: Tensor,
    pub cosine: Tensor,
}

/// x: B×n×d; mask: B×n×(e·s) or `None` for all-ones.
pub(crate) fn forward_batched(x: &Tensor, p: &MoeLayerParams, mask: Option<&Tensor>) -> Result<BatchedMoe> {
    if x.rank() != 3 || x.shape()[2] != p.dim() {
        return Err(Error::shape("moe forward", format!("tokens {:?} for token dim {}", x.shape(), p.dim())));
    }
    let (b, d) = (x.shape()[0], x.shape()[2]);
    let (e, s) = (p.experts, p.slots);

    let logits = contract("bnd,dk->bnk", &[x, &p.phi])?;
    let dispatch = logits.softmax(1)?;
    let masked = match mask {
        Some(m) => masked_dispatch(&dispatch, m)?,
        None => dispatch.clone(),
    };
    let combine = logits.softmax(2)?;

    let slots = contract("bnd,bnk->bkd", &[x, &masked])?;
    let slots4 = slots.reshape(&[b, e, s, d])?;
    let ones = Tensor::ones(&[b, s]);
    let hidden = contract("besd,edh->besh", &[&slots4, &p.w1])?.add(&contract("eh,bs->besh", &[&p.b1, &ones])?)?;
    let act = match p.activation {
        ExpertActivation::Gelu => hidden.gelu()?,
        ExpertActivation::Identity => hidden,
    };
    let expert_outputs =
        contract("besh,ehd->besd", &[&act, &p.w2])?.add(&contract("ed,bs->besd", &[&p.b2, &ones])?)?;
    let flat = expert_outputs.reshape(&[b, e * s, d])?;
    let output = contract("bkd,bnk->bnd", &[&flat, &combine])?;
    let cosine = cosine_distance_batched(&expert_outputs)?;

    Ok(BatchedMoe { dispatch, masked_dispatch: masked, slots, expert_outputs, combine, output, cosine })
}

fn single_trace(x: &Tensor, p: &MoeLayerParams, mask: Tensor) -> Result<MoeForwardTrace> {
    check_tokens(x, &p.phi)?;
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let es = p.experts * p.slots;
    let xb = x.reshape(&[1, n, d])?;
    let mb = mask.reshape(&[1, n, es])?;
    let r = forward_batched(&xb, p, Some(&mb))?;
    Ok(MoeForwardTrace {
        dispatch: r.dispatch.reshape(&[n, es])?,
        mask,
        masked_dispatch: r.masked_dispatch.reshape(&[n, es])?,
        slots: r.slots.reshape(&[es, d])?,
        expert_outputs: r.expert_outputs.reshape(&[p.experts, p.slots, d])?,
        combine: r.combine.reshape(&[n, es])?,
        output: r.output.reshape(&[n, d])?,
        cosine_distance: r.cosine.reshape(&[])?,
    })
}

/// Soft-MoE forward: all-ones mask, every expert sees every token.
pub fn forward_soft_moe(x: &Tensor, params: &MoeLayerParams) -> Result<MoeForwardTrace> {
    check_tokens(x, &params.phi)?;
    let mask = Tensor::ones(&[x.shape()[0], params.experts * params.slots]);
    single_trace(x, params, mask)
}

/// Masked-MoE forward with the mask drawn from `(cfg.seed, draw)`.
pub fn forward_masked_moe(x: &Tensor, params: &MoeLayerParams, cfg: &MaskConfig, draw: u64) -> Result<MoeForwardTrace> {
    check_tokens(x, &params.phi)?;
    let m = build_mask(x.shape()[0], params.experts, params.slots, cfg, draw)?;
    single_trace(x, params, mask_to_dispatch_layout(&m)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn lcg(seed: u64) -> impl FnMut() -> f64 {
        let mut s = seed;
        move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        }
    }

    fn random_params(d: usize, e: usize, s: usize, h: usize, seed: u64) -> MoeLayerParams {
        let mut r = lcg(seed);
        let mut v = |n: usize| (0..n).map(|_| r()).collect::<Vec<_>>();
        MoeLayerParams::new(
            Tensor::parameter(&[d, e * s], v(d * e * s)).unwrap(),
            Tensor::parameter(&[e, d, h], v(e * d * h)).unwrap(),
            Tensor::parameter(&[e, h], v(e * h)).unwrap(),
            Tensor::parameter(&[e, h, d], v(e * h * d)).unwrap(),
            Tensor::parameter(&[e, d], v(e * d)).unwrap(),
            s,
            ExpertActivation::Gelu,
        )
        .unwrap()
    }

    /// Identity experts with h = d.
    fn identity_params(d: usize, e: usize, s: usize, phi: Tensor, b2: Vec<f64>) -> MoeLayerParams {
        let mut eye = Vec::new();
        for _ in 0..e {
            eye.extend(Tensor::eye(d).to_vec());
        }
        MoeLayerParams::new(
            phi,
            t(&[e, d, d], &eye),
            Tensor::zeros(&[e, d]),
            t(&[e, d, d], &eye),
            t(&[e, d], &b2),
            s,
            ExpertActivation::Identity,
        )
        .unwrap()
    }

    #[test]
    fn dispatch_uniform_for_zero_tokens_and_singleton() {
        let phi = t(&[2, 3], &[0.3, -1.0, 2.0, 0.5, 0.1, -0.2]);
        let d = dispatch_weights(&Tensor::zeros(&[3, 2]), &phi).unwrap();
        assert!(d.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let one = dispatch_weights(&t(&[1, 2], &[4.0, -3.0]), &phi).unwrap();
        assert!(one.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn combine_uniform_and_single_slot() {
        let phi = t(&[3, 4], &[1.0; 12]);
        let c = combine_weights(&Tensor::zeros(&[2, 3]), &phi).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.25));
        let c1 = combine_weights(&t(&[2, 1], &[1.0, -2.0]), &t(&[1, 1], &[3.0])).unwrap();
        assert!(c1.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn shape_mismatch_errors() {
        let phi = Tensor::ones(&[3, 4]);
        assert!(dispatch_weights(&Tensor::ones(&[2, 2]), &phi).is_err());
        assert!(combine_weights(&Tensor::ones(&[2, 2]), &phi).is_err());
        assert!(masked_dispatch(&Tensor::ones(&[2, 4]), &Tensor::ones(&[4, 2])).is_err());
    }

    #[test]
    fn mask_zero_counts() {
        let cfg = MaskConfig::new(vec![0.0, 0.1, 0.1, 0.1], 3).unwrap();
        let m = build_mask(8, 4, 2, &cfg, 0).unwrap();
        let zeros: Vec<usize> = m.data().chunks(16).map(|c| c.iter().filter(|&&v| v == 0.0).count()).collect();
        assert_eq!(zeros, vec![0, 1, 1, 1]);

        let cfg = MaskConfig::new(vec![0.0, 0.5, 0.5, 0.5], 3).unwrap();
        let m = build_mask(4, 4, 2, &cfg, 9).unwrap();
        let zeros: Vec<usize> = m.data().chunks(8).map(|c| c.iter().filter(|&&v| v == 0.0).count()).collect();
        assert_eq!(zeros, vec![0, 4, 4, 4]);

        let m = build_mask(5, 3, 2, &MaskConfig::zeros(3, 1), 0).unwrap();
        assert!(m.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn mask_validation() {
        assert!(MaskConfig::new(vec![0.0, 1.5], 0).is_err());
        assert!(MaskConfig::new(vec![-0.1], 0).is_err());
        let cfg = MaskConfig::zeros(3, 0);
        assert!(build_mask(4, 4, 1, &cfg, 0).is_err());
    }

    #[test]
    fn mask_is_deterministic_per_draw() {
        let cfg = MaskConfig::new(vec![0.0, 0.5, 0.5], 11).unwrap();
        assert_eq!(build_mask(6, 3, 2, &cfg, 4).unwrap(), build_mask(6, 3, 2, &cfg, 4).unwrap());
        let differs = (0..8).any(|k| build_mask(6, 3, 2, &cfg, k).unwrap() != build_mask(6, 3, 2, &cfg, 4).unwrap());
        assert!(differs);
    }

    #[test]
    fn dispatch_layout_is_expert_major_columns() {
        // e=2, n=2, s=2: M[i][t][j] lands at column i*s + j of row t
        let m = t(&[2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let l = mask_to_dispatch_layout(&m).unwrap();
        assert_eq!(l.shape(), &[2, 4]);
        assert_eq!(l.data(), &[1.0, 2.0, 5.0, 6.0, 3.0, 4.0, 7.0, 8.0]);
    }

    #[test]
    fn masked_dispatch_single_zero_reduces_column_sum() {
        let d = t(&[3, 2], &[0.2, 0.5, 0.3, 0.25, 0.5, 0.25]);
        let m = t(&[3, 2], &[1.0, 1.0, 0.0, 1.0, 1.0, 1.0]);
        let dm = masked_dispatch(&d, &m).unwrap();
        let col0: f64 = (0..3).map(|i| dm.at(&[i, 0])).sum();
        assert!((col0 - (1.0 - 0.3)).abs() < 1e-15);
        let all_zero = masked_dispatch(&d, &Tensor::zeros(&[3, 2])).unwrap();
        assert!(all_zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_slot_identity_round_trip() {
        let p = identity_params(3, 1, 1, t(&[3, 1], &[0.2, -0.4, 0.9]), vec![0.0; 3]);
        let x = t(&[1, 3], &[1.5, -2.0, 0.25]);
        let tr = forward_soft_moe(&x, &p).unwrap();
        assert_eq!(tr.output.data(), x.data());
    }

    #[test]
    fn zero_tokens_give_zero_output_without_biases() {
        let mut p = random_params(3, 2, 2, 5, 4);
        p.b1 = Tensor::zeros(&[2, 5]);
        p.b2 = Tensor::zeros(&[2, 3]);
        let tr = forward_soft_moe(&Tensor::zeros(&[4, 3]), &p).unwrap();
        assert!(tr.output.data().iter().all(|&v| v == 0.0));
    }

    /// Loop-only reference forward: no contraction shortcuts.
    fn naive_forward(x: &Tensor, p: &MoeLayerParams, mask: &[f64]) -> (Vec<f64>, f64) {
        let (n, d) = (x.shape()[0], x.shape()[1]);
        let (e, s, h) = (p.experts(), p.slots(), p.hidden());
        let es = e * s;
        let mut logits = vec![0.0; n * es];
        for i in 0..n {
            for k in 0..es {
                for j in 0..d {
                    logits[i * es + k] += x.at(&[i, j]) * p.phi.at(&[j, k]);
                }
            }
        }
        let mut disp = vec![0.0; n * es];
        for k in 0..es {
            let z: f64 = (0..n).map(|i| logits[i * es + k].exp()).sum();
            for i in 0..n {
                disp[i * es + k] = logits[i * es + k].exp() / z * mask[i * es + k];
            }
        }
        let mut comb = vec![0.0; n * es];
        for i in 0..n {
            let z: f64 = (0..es).map(|k| logits[i * es + k].exp()).sum();
            for k in 0..es {
                comb[i * es + k] = logits[i * es + k].exp() / z;
            }
        }
        let mut y = vec![0.0; es * d];
        for ex in 0..e {
            for sl in 0..s {
                let k = ex * s + sl;
                let slot: Vec<f64> = (0..d).map(|j| (0..n).map(|i| disp[i * es + k] * x.at(&[i, j])).sum()).collect();
                let hid: Vec<f64> = (0..h)
                    .map(|q| {
                        let v = p.b1.at(&[ex, q]) + (0..d).map(|j| slot[j] * p.w1.at(&[ex, j, q])).sum::<f64>();
                        0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh())
                    })
                    .collect();
                for j in 0..d {
                    y[k * d + j] = p.b2.at(&[ex, j]) + (0..h).map(|q| hid[q] * p.w2.at(&[ex, q, j])).sum::<f64>();
                }
            }
        }
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] = (0..es).map(|k| comb[i * es + k] * y[k * d + j]).sum();
            }
        }
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let mut cos_total = 0.0;
        for sl in 0..s {
            let r = &y[sl * d..(sl + 1) * d];
            for ex in 1..e {
                let o = &y[(ex * s + sl) * d..(ex * s + sl + 1) * d];
                let c = r.iter().zip(o).map(|(a, b)| a * b).sum::<f64>() / (norm(r) * norm(o));
                cos_total += 1.0 - c;
            }
        }
        (out, cos_total / s as f64)
    }

    #[test]
    fn soft_and_masked_forward_match_loop_oracle() {
        for seed in 0..5 {
            let p = random_params(4, 3, 2, 6, seed);
            let mut r = lcg(100 + seed);
            let x = Tensor::new(&[5, 4], (0..20).map(|_| r()).collect()).unwrap();

            let soft = forward_soft_moe(&x, &p).unwrap();
            let (want, cos) = naive_forward(&x, &p, &[1.0; 30]);
            for (g, w) in soft.output.data().iter().zip(&want) {
                assert!((g - w).abs() < 1e-10);
            }
            assert!((soft.cosine_distance.item().unwrap() - cos).abs() < 1e-10);

            let cfg = MaskConfig::new(vec![0.0, 0.3, 0.5], 5).unwrap();
            let masked = forward_masked_moe(&x, &p, &cfg, seed).unwrap();
            let (want, cos) = naive_forward(&x, &p, masked.mask.data());
            for (g, w) in masked.output.data().iter().zip(&want) {
                assert!((g - w).abs() < 1e-10);
            }
            assert!((masked.cosine_distance.item().unwrap() - cos).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_rates_reproduce_soft_trace_exactly() {
        let p = random_params(4, 4, 1, 8, 2);
        let x = Tensor::new(&[6, 4], (0..24).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let soft = forward_soft_moe(&x, &p).unwrap();
        let masked = forward_masked_moe(&x, &p, &MaskConfig::zeros(4, 77), 3).unwrap();
        assert_eq!(soft, masked);
    }

    #[test]
    fn masked_trace_is_deterministic() {
        let p = random_params(3, 4, 2, 4, 8);
        let x = Tensor::new(&[5, 3], (0..15).map(|i| (i as f64).cos()).collect()).unwrap();
        let cfg = MaskConfig::preset(2, 1).unwrap();
        assert_eq!(forward_masked_moe(&x, &p, &cfg, 6).unwrap(), forward_masked_moe(&x, &p, &cfg, 6).unwrap());
    }

    #[test]
    fn fully_masked_experts_hand_case() {
        // phi = 0 gives uniform dispatch, so expert 0's slot is the token mean (2, 1).
        // Identity experts with b2 = (1, 0): expert 0 emits (3, 1), masked experts emit (1, 0).
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 0.0]);
        let p = identity_params(2, 4, 1, Tensor::zeros(&[2, 4]), [1.0, 0.0].repeat(4));
        let cfg = MaskConfig::new(vec![0.0, 1.0, 1.0, 1.0], 0).unwrap();
        let tr = forward_masked_moe(&x, &p, &cfg, 0).unwrap();
        assert_eq!(tr.slots.data(), &[2.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let want = 3.0 * (1.0 - 3.0 / 10f64.sqrt());
        assert!((tr.cosine_distance.item().unwrap() - want).abs() < 1e-12);

        // without the output bias the masked experts emit zero vectors: cosine 0, distance 1 each
        let p0 = identity_params(2, 4, 1, Tensor::zeros(&[2, 4]), vec![0.0; 8]);
        let tr0 = forward_masked_moe(&x, &p0, &cfg, 0).unwrap();
        assert_eq!(tr0.cosine_distance.item().unwrap(), 3.0);
    }

    #[test]
    fn cosine_loss_hand_cases() {
        let same = t(&[3, 2, 2], &[1.0, 2.0, -1.0, 0.5, 1.0, 2.0, -1.0, 0.5, 1.0, 2.0, -1.0, 0.5]);
        assert!(cosine_agreement_loss(&same).unwrap().item().unwrap().abs() < 1e-15);

        let orth = t(&[4, 1, 2], &[1.0, 0.0, 0.0, 2.0, 0.0, -1.0, 0.0, 0.5]);
        assert!((cosine_agreement_loss(&orth).unwrap().item().unwrap() - 3.0).abs() < 1e-15);

        let swap = t(&[2, 2, 2], &[1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0]);
        assert!((cosine_agreement_loss(&swap).unwrap().item().unwrap() - 1.0).abs() < 1e-15);

        assert!(cosine_agreement_loss(&Tensor::ones(&[1, 2, 2])).is_err());
    }

    #[test]
    fn cosine_loss_zero_norm_rule() {
        // reference slot is zero: cosine taken as 0 for every pair
        let y = t(&[3, 1, 2], &[0.0, 0.0, 1.0, 1.0, -2.0, 3.0]);
        assert_eq!(cosine_agreement_loss(&y).unwrap().item().unwrap(), 2.0);
        let w = Tensor::parameter(&[3, 1, 2], y.to_vec()).unwrap();
        let g = backward(&cosine_agreement_loss(&w).unwrap()).unwrap().wrt(&w);
        assert!(g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn positive_scaling_gives_zero_distance() {
        let y = t(&[3, 2, 2], &[1.0, 2.0, -1.0, 0.5, 3.0, 6.0, -0.1, 0.05, 0.5, 1.0, -4.0, 2.0]);
        assert!(cosine_agreement_loss(&y).unwrap().item().unwrap().abs() < 1e-12);
        let neg = t(&[2, 1, 2], &[1.0, 2.0, -1.0, -2.0]);
        assert!((cosine_agreement_loss(&neg).unwrap().item().unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn trace_serializes_with_fixed_field_names() {
        let p = random_params(2, 2, 1, 3, 1);
        let tr = forward_soft_moe(&Tensor::ones(&[2, 2]), &p).unwrap();
        let v: serde_json::Value = serde_json::to_value(&tr).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        for k in ["dispatch", "mask", "masked_dispatch", "slots", "expert_outputs", "combine", "output", "cosine_distance"] {
            assert!(keys.contains(&k), "{k}");
        }
        assert_eq!(v["expert_outputs"]["shape"], serde_json::json!([2, 1, 2]));
    }
}
