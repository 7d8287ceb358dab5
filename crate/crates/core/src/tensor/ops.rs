use super::{Op, Tensor};
use crate::error::{Error, Result};

/// Rows whose Euclidean norm falls below this are treated as zero vectors.
pub const ZERO_NORM_FLOOR: f64 = 1e-12;

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Elementwise operation tags accepted by [`elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Scale(f64),
    Gelu,
    L2NormRows,
}

/// Tag-dispatched form of the elementwise methods on [`Tensor`].
pub fn elementwise(op: ElementwiseOp, operands: &[&Tensor]) -> Result<Tensor> {
    let arity = match op {
        ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul => 2,
        _ => 1,
    };
    if operands.len() != arity {
        return Err(Error::Invalid(format!("{op:?} takes {arity} operand(s), got {}", operands.len())));
    }
    let a = operands[0];
    match op {
        ElementwiseOp::Add => a.add(operands[1]),
        ElementwiseOp::Sub => a.sub(operands[1]),
        ElementwiseOp::Mul => a.mul(operands[1]),
        ElementwiseOp::Scale(k) => a.scale(k),
        ElementwiseOp::Gelu => a.gelu(),
        ElementwiseOp::L2NormRows => a.l2_normalize(),
    }
}

pub(crate) fn gelu_value(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Output shape for a binary op under the exact-or-scalar broadcast rule.
fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.numel() == 1 {
        Ok(a.shape().to_vec())
    } else if a.numel() == 1 {
        Ok(b.shape().to_vec())
    } else {
        Err(Error::shape(op, format!("{:?} vs {:?} (only exact match or scalar broadcast)", a.shape(), b.shape())))
    }
}

fn zip_with(a: &Tensor, b: &Tensor, n: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let (da, db) = (a.data(), b.data());
    (0..n)
        .map(|i| {
            let x = if da.len() == 1 { da[0] } else { da[i] };
            let y = if db.len() == 1 { db[0] } else { db[i] };
            f(x, y)
        })
        .collect()
}

/// Splits a shape around `axis` into (outer, axis length, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let shape = broadcast_shape("add", self, other)?;
        let n = shape.iter().product();
        let data = zip_with(self, other, n, |x, y| x + y);
        Tensor::from_op(shape, data, Op::Add, vec![self.clone(), other.clone()])
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let shape = broadcast_shape("sub", self, other)?;
        let n = shape.iter().product();
        let data = zip_with(self, other, n, |x, y| x - y);
        Tensor::from_op(shape, data, Op::Sub, vec![self.clone(), other.clone()])
    }

    /// Hadamard product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let shape = broadcast_shape("mul", self, other)?;
        let n = shape.iter().product();
        let data = zip_with(self, other, n, |x, y| x * y);
        Tensor::from_op(shape, data, Op::Mul, vec![self.clone(), other.clone()])
    }

    pub fn scale(&self, k: f64) -> Result<Tensor> {
        let data = self.data().iter().map(|x| x * k).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Scale(k), vec![self.clone()])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Result<Tensor> {
        let data = self.data().iter().map(|&x| gelu_value(x)).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Gelu, vec![self.clone()])
    }

    pub fn exp(&self) -> Result<Tensor> {
        let data = self.data().iter().map(|x| x.exp()).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Exp, vec![self.clone()])
    }

    pub fn clamp_max(&self, max: f64) -> Result<Tensor> {
        let data = self.data().iter().map(|&x| x.min(max)).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::ClampMax(max), vec![self.clone()])
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self) -> Result<Tensor> {
        let s = self.data().iter().sum();
        Tensor::from_op(vec![], vec![s], Op::Sum, vec![self.clone()])
    }

    pub fn mean(&self) -> Result<Tensor> {
        self.sum()?.scale(1.0 / self.numel() as f64)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape())));
        }
        Tensor::from_op(shape.to_vec(), self.to_vec(), Op::Reshape, vec![self.clone()])
    }

    /// Normalizes each slice along the last axis to unit Euclidean norm.
    /// Slices with norm below `1e-12` map to zero and pass no gradient.
    pub fn l2_normalize(&self) -> Result<Tensor> {
        let d = *self.shape().last().ok_or(Error::Axis { axis: 0, rank: 0 })?;
        let mut norms = Vec::with_capacity(self.numel() / d);
        let mut data = Vec::with_capacity(self.numel());
        for row in self.data().chunks_exact(d) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            norms.push(norm);
            if norm < ZERO_NORM_FLOOR {
                data.extend(std::iter::repeat_n(0.0, d));
            } else {
                data.extend(row.iter().map(|x| x / norm));
            }
        }
        Tensor::from_op(self.shape().to_vec(), data, Op::L2Normalize(norms), vec![self.clone()])
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let data = self.softmax_values(axis)?;
        Tensor::from_op(self.shape().to_vec(), data, Op::Softmax { axis }, vec![self.clone()])
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::Axis { axis, rank: self.rank() });
        }
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let m = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + (0..len).map(|j| (x[at(j)] - m).exp()).sum::<f64>().ln();
                for j in 0..len {
                    out[at(j)] = x[at(j)] - lse;
                }
            }
        }
        Tensor::from_op(self.shape().to_vec(), out, Op::LogSoftmax { axis }, vec![self.clone()])
    }

    pub(crate) fn softmax_values(&self, axis: usize) -> Result<Vec<f64>> {
        if axis >= self.rank() {
            return Err(Error::Axis { axis, rank: self.rank() });
        }
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let m = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (x[at(j)] - m).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[at(j)] /= z;
                }
            }
        }
        Ok(out)
    }

    /// Zero-mean, unit-variance normalization along the last axis (no affine part).
    pub fn layer_norm(&self) -> Result<Tensor> {
        let d = *self.shape().last().ok_or(Error::Axis { axis: 0, rank: 0 })?;
        let mut inv_std = Vec::with_capacity(self.numel() / d);
        let mut data = Vec::with_capacity(self.numel());
        for row in self.data().chunks_exact(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(r);
            data.extend(row.iter().map(|x| (x - mean) * r));
        }
        Tensor::from_op(self.shape().to_vec(), data, Op::LayerNorm(inv_std), vec![self.clone()])
    }
}

/// Reduces a gradient of the broadcast output back onto an operand.
fn unbroadcast(parent: &Tensor, g: Vec<f64>) -> Vec<f64> {
    if parent.numel() == g.len() {
        g
    } else {
        vec![g.iter().sum()]
    }
}

/// Vector-Jacobian products: one optional gradient per parent.
pub(crate) fn vjp(op: &Op, parents: &[Tensor], out: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
    let need = |k: usize| parents[k].requires_grad();
    let one = |v: Vec<f64>| vec![Some(v)];
    match op {
        Op::Contract(spec) => (0..parents.len())
            .map(|k| need(k).then(|| super::contract::contract_grad(spec, parents, g, k)))
            .collect(),
        Op::Add => vec![
            need(0).then(|| unbroadcast(&parents[0], g.to_vec())),
            need(1).then(|| unbroadcast(&parents[1], g.to_vec())),
        ],
        Op::Sub => vec![
            need(0).then(|| unbroadcast(&parents[0], g.to_vec())),
            need(1).then(|| unbroadcast(&parents[1], g.iter().map(|x| -x).collect())),
        ],
        Op::Mul => {
            let (a, b) = (&parents[0], &parents[1]);
            let pick = |t: &Tensor, i: usize| if t.numel() == 1 { t.data()[0] } else { t.data()[i] };
            vec![
                need(0).then(|| unbroadcast(a, g.iter().enumerate().map(|(i, gi)| gi * pick(b, i)).collect())),
                need(1).then(|| unbroadcast(b, g.iter().enumerate().map(|(i, gi)| gi * pick(a, i)).collect())),
            ]
        }
        Op::Scale(k) => one(g.iter().map(|x| x * k).collect()),
        Op::Gelu => one(g.iter().zip(parents[0].data()).map(|(gi, &x)| gi * gelu_grad(x)).collect()),
        Op::Exp => one(g.iter().zip(out.data()).map(|(gi, y)| gi * y).collect()),
        Op::ClampMax(max) => one(
            g.iter()
                .zip(parents[0].data())
                .map(|(gi, &x)| if x > *max { 0.0 } else { *gi })
                .collect(),
        ),
        Op::Sum => one(vec![g[0]; parents[0].numel()]),
        Op::Reshape => one(g.to_vec()),
        Op::L2Normalize(norms) => {
            let d = *out.shape().last().unwrap();
            let mut dx = Vec::with_capacity(g.len());
            for ((gr, yr), &norm) in g.chunks_exact(d).zip(out.data().chunks_exact(d)).zip(norms) {
                if norm < ZERO_NORM_FLOOR {
                    dx.extend(std::iter::repeat_n(0.0, d));
                    continue;
                }
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                dx.extend(gr.iter().zip(yr).map(|(gi, yi)| (gi - yi * dot) / norm));
            }
            one(dx)
        }
        Op::LayerNorm(inv_std) => {
            let d = *out.shape().last().unwrap();
            let mut dx = Vec::with_capacity(g.len());
            for ((gr, yr), &r) in g.chunks_exact(d).zip(out.data().chunks_exact(d)).zip(inv_std) {
                let gm = gr.iter().sum::<f64>() / d as f64;
                let gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                dx.extend(gr.iter().zip(yr).map(|(gi, yi)| r * (gi - gm - yi * gy)));
            }
            one(dx)
        }
        Op::Softmax { axis } => {
            let (outer, len, inner) = axis_split(out.shape(), *axis);
            let y = out.data();
            let mut dx = vec![0.0; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                    for j in 0..len {
                        dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            one(dx)
        }
        Op::LogSoftmax { axis } => {
            let (outer, len, inner) = axis_split(out.shape(), *axis);
            let y = out.data();
            let mut dx = vec![0.0; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let gs: f64 = (0..len).map(|j| g[at(j)]).sum();
                    for j in 0..len {
                        dx[at(j)] = g[at(j)] - y[at(j)].exp() * gs;
                    }
                }
            }
            one(dx)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        let z = Tensor::zeros(&[2, 2]).softmax(0).unwrap();
        assert_eq!(z.data(), &[0.5, 0.5, 0.5, 0.5]);

        let x = t(&[2, 2], &[1f64.ln(), 3f64.ln(), 3f64.ln(), 1f64.ln()]);
        let s = x.softmax(0).unwrap();
        for (got, want) in s.data().iter().zip([0.25, 0.75, 0.75, 0.25]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rejects_bad_axis() {
        assert!(matches!(Tensor::zeros(&[2, 2]).softmax(2), Err(Error::Axis { axis: 2, rank: 2 })));
    }

    #[test]
    fn softmax_survives_large_logits() {
        let s = t(&[2], &[1000.0, 1000.0]).softmax(0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn mask_identities() {
        let d = t(&[2, 2], &[0.1, 0.2, 0.9, 0.8]);
        assert_eq!(d.mul(&Tensor::ones(&[2, 2])).unwrap(), d);
        assert!(d.mul(&Tensor::zeros(&[2, 2])).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn l2norm_rows_hand_case() {
        let y = t(&[1, 2], &[3.0, 4.0]).l2_normalize().unwrap();
        assert!((y.data()[0] - 0.6).abs() < 1e-15 && (y.data()[1] - 0.8).abs() < 1e-15);
        let z = Tensor::zeros(&[1, 3]).l2_normalize().unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn broadcast_rule() {
        let a = Tensor::ones(&[2, 3]);
        let s = Tensor::scalar(2.0).unwrap();
        assert_eq!(a.mul(&s).unwrap().data(), &[2.0; 6]);
        assert_eq!(s.add(&a).unwrap().shape(), &[2, 3]);
        assert!(a.add(&Tensor::ones(&[3])).is_err());
        assert!(a.add(&Tensor::ones(&[3, 2])).is_err());
    }

    #[test]
    fn non_finite_results_are_errors() {
        let big = Tensor::scalar(800.0).unwrap();
        assert!(matches!(big.exp(), Err(Error::NonFinite { op: "exp" })));
        assert!(Tensor::new(&[1], vec![f64::NAN]).is_err());
    }

    #[test]
    fn tag_dispatch() {
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[2], &[3.0, 5.0]);
        assert_eq!(elementwise(ElementwiseOp::Sub, &[&b, &a]).unwrap().data(), &[2.0, 3.0]);
        assert_eq!(elementwise(ElementwiseOp::Scale(2.0), &[&a]).unwrap().data(), &[2.0, 4.0]);
        assert!(elementwise(ElementwiseOp::Add, &[&a]).is_err());
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu_value(0.0), 0.0);
        // large positive inputs pass through, large negative ones vanish
        assert!((gelu_value(10.0) - 10.0).abs() < 1e-12);
        assert!(gelu_value(-10.0).abs() < 1e-12);
        let h = 1e-6;
        for x in [-2.0, -0.3, 0.0, 0.7, 3.0] {
            let fd = (gelu_value(x + h) - gelu_value(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let y = t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, -5.0, 0.0, 5.0, 10.0]).layer_norm().unwrap();
        for row in y.data().chunks(4) {
            let m: f64 = row.iter().sum::<f64>() / 4.0;
            let v: f64 = row.iter().map(|x| x * x).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }
}
