//! Index-notation contraction (`"nd,esd->nes"` style).
//!
//! Operands are folded left to right. Each pairwise step reduces labels that
//! are no longer needed, permutes both sides into `[batch, free, contracted]`
//! layout and runs one GEMM per batch element.

use std::collections::HashMap;

use super::{Op, Tensor};
use crate::error::{Error, Result};

/// Parsed contraction: one label list per operand plus the output labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContractSpec {
    pub inputs: Vec<Vec<u8>>,
    pub output: Vec<u8>,
}

impl ContractSpec {
    /// Labels are single ASCII letters; whitespace is ignored.
    pub fn parse(spec: &str) -> Result<Self> {
        let err = |detail: &str| Error::ContractSpec { spec: spec.to_string(), detail: detail.to_string() };
        let compact: String = spec.chars().filter(|c| !c.is_whitespace()).collect();
        let (lhs, rhs) = compact.split_once("->").ok_or_else(|| err("missing `->`"))?;
        let parse_labels = |s: &str| -> Result<Vec<u8>> {
            let labels: Vec<u8> = s.bytes().collect();
            if let Some(bad) = labels.iter().find(|b| !b.is_ascii_alphabetic()) {
                return Err(err(&format!("invalid label `{}`", *bad as char)));
            }
            for (i, l) in labels.iter().enumerate() {
                if labels[..i].contains(l) {
                    return Err(err(&format!("repeated label `{}` in one term", *l as char)));
                }
            }
            Ok(labels)
        };
        let inputs = lhs.split(',').map(parse_labels).collect::<Result<Vec<_>>>()?;
        let output = parse_labels(rhs)?;
        for l in &output {
            if !inputs.iter().any(|inp| inp.contains(l)) {
                return Err(err(&format!("unknown output index `{}`", *l as char)));
            }
        }
        Ok(ContractSpec { inputs, output })
    }

    fn extents(&self, shapes: &[&[usize]], spec: &str) -> Result<HashMap<u8, usize>> {
        if shapes.len() != self.inputs.len() {
            return Err(Error::ContractSpec {
                spec: spec.to_string(),
                detail: format!("{} terms but {} operands", self.inputs.len(), shapes.len()),
            });
        }
        let mut ext = HashMap::new();
        for (k, (labels, shape)) in self.inputs.iter().zip(shapes).enumerate() {
            if labels.len() != shape.len() {
                return Err(Error::shape(
                    "contract",
                    format!("operand {k} has rank {} but term has {} labels", shape.len(), labels.len()),
                ));
            }
            for (&l, &e) in labels.iter().zip(shape.iter()) {
                match ext.insert(l, e) {
                    Some(prev) if prev != e => {
                        return Err(Error::shape(
                            "contract",
                            format!("index `{}` has extents {prev} and {e}", l as char),
                        ))
                    }
                    _ => {}
                }
            }
        }
        Ok(ext)
    }
}

/// Contract `operands` according to an index-notation spec. Differentiable.
pub fn contract(spec: &str, operands: &[&Tensor]) -> Result<Tensor> {
    let parsed = ContractSpec::parse(spec)?;
    let shapes: Vec<&[usize]> = operands.iter().map(|t| t.shape()).collect();
    let ext = parsed.extents(&shapes, spec)?;
    let views: Vec<View<'_>> = operands
        .iter()
        .zip(&parsed.inputs)
        .map(|(t, labels)| View { labels: labels.clone(), data: t.data() })
        .collect();
    let data = einsum(&views, &parsed.output, &ext);
    let shape = parsed.output.iter().map(|l| ext[l]).collect();
    let parents = operands.iter().map(|t| (*t).clone()).collect();
    Tensor::from_op(shape, data, Op::Contract(parsed), parents)
}

/// Gradient of a contraction with respect to operand `which`.
pub(crate) fn contract_grad(spec: &ContractSpec, parents: &[Tensor], grad: &[f64], which: usize) -> Vec<f64> {
    let mut ext = HashMap::new();
    for (labels, p) in spec.inputs.iter().zip(parents) {
        for (&l, &e) in labels.iter().zip(p.shape()) {
            ext.insert(l, e);
        }
    }
    let mut views = vec![View { labels: spec.output.clone(), data: grad }];
    for (k, (labels, p)) in spec.inputs.iter().zip(parents).enumerate() {
        if k != which {
            views.push(View { labels: labels.clone(), data: p.data() });
        }
    }
    einsum(&views, &spec.inputs[which], &ext)
}

#[derive(Clone)]
struct View<'a> {
    labels: Vec<u8>,
    data: &'a [f64],
}

struct Owned {
    labels: Vec<u8>,
    data: Vec<f64>,
}

impl Owned {
    fn view(&self) -> View<'_> {
        View { labels: self.labels.clone(), data: &self.data }
    }
}

/// Raw engine. Output labels absent from every input are broadcast.
fn einsum(inputs: &[View<'_>], output: &[u8], ext: &HashMap<u8, usize>) -> Vec<f64> {
    let mut current: Owned = Owned { labels: inputs[0].labels.clone(), data: inputs[0].data.to_vec() };
    for k in 1..inputs.len() {
        let needed: Vec<u8> = output
            .iter()
            .chain(inputs[k + 1..].iter().flat_map(|v| v.labels.iter()))
            .copied()
            .collect();
        let mut keep: Vec<u8> = Vec::new();
        for &l in current.labels.iter().chain(inputs[k].labels.iter()) {
            if needed.contains(&l) && !keep.contains(&l) {
                keep.push(l);
            }
        }
        current = pair(&current.view(), &inputs[k], &keep, ext);
    }
    let kept: Vec<u8> = current.labels.iter().copied().filter(|l| output.contains(l)).collect();
    let reduced = reduce(&current.view(), &kept, ext);
    gather(&reduced.view(), output, ext)
}

fn pair(a: &View<'_>, b: &View<'_>, keep: &[u8], ext: &HashMap<u8, usize>) -> Owned {
    let a_keep: Vec<u8> = a.labels.iter().copied().filter(|l| keep.contains(l) || b.labels.contains(l)).collect();
    let b_keep: Vec<u8> = b.labels.iter().copied().filter(|l| keep.contains(l) || a.labels.contains(l)).collect();
    let a = reduce(a, &a_keep, ext);
    let b = reduce(b, &b_keep, ext);

    let in_b = |l: &u8| b.labels.contains(l);
    let in_a = |l: &u8| a.labels.contains(l);
    let batch: Vec<u8> = a.labels.iter().copied().filter(|l| in_b(l) && keep.contains(l)).collect();
    let contracted: Vec<u8> = a.labels.iter().copied().filter(|l| in_b(l) && !keep.contains(l)).collect();
    let a_free: Vec<u8> = a.labels.iter().copied().filter(|l| !in_b(l)).collect();
    let b_free: Vec<u8> = b.labels.iter().copied().filter(|l| !in_a(l)).collect();

    let size = |ls: &[u8]| ls.iter().map(|l| ext[l]).product::<usize>();
    let (nb, m, k, n) = (size(&batch), size(&a_free), size(&contracted), size(&b_free));

    let a_order: Vec<u8> = [&batch[..], &a_free[..], &contracted[..]].concat();
    let b_order: Vec<u8> = [&batch[..], &contracted[..], &b_free[..]].concat();
    let a_mat = gather(&a.view(), &a_order, ext);
    let b_mat = gather(&b.view(), &b_order, ext);

    let mut out = vec![0.0; nb * m * n];
    for bi in 0..nb {
        let a_blk = &a_mat[bi * m * k..(bi + 1) * m * k];
        let b_blk = &b_mat[bi * k * n..(bi + 1) * k * n];
        let c_blk = &mut out[bi * m * n..(bi + 1) * m * n];
        gemm(m, k, n, a_blk, b_blk, c_blk);
    }
    let labels: Vec<u8> = [&batch[..], &a_free[..], &b_free[..]].concat();
    let result = Owned { labels, data: out };
    let data = gather(&result.view(), keep, ext);
    Owned { labels: keep.to_vec(), data }
}

fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() == m * k && b.len() == k * n && c.len() == m * n);
    // SAFETY: slices have exactly the row-major extents passed with unit column stride.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Sum away every label not in `keep`; result labels follow the input order.
fn reduce(v: &View<'_>, keep: &[u8], ext: &HashMap<u8, usize>) -> Owned {
    let kept: Vec<u8> = v.labels.iter().copied().filter(|l| keep.contains(l)).collect();
    if kept.len() == v.labels.len() {
        return Owned { labels: kept, data: v.data.to_vec() };
    }
    let dropped: Vec<u8> = v.labels.iter().copied().filter(|l| !keep.contains(l)).collect();
    let order: Vec<u8> = [&kept[..], &dropped[..]].concat();
    let permuted = gather(v, &order, ext);
    let chunk: usize = dropped.iter().map(|l| ext[l]).product();
    let data = permuted.chunks_exact(chunk).map(|c| c.iter().sum()).collect();
    Owned { labels: kept, data }
}

/// Strided copy into `out_labels` order; labels missing from `v` are broadcast.
fn gather(v: &View<'_>, out_labels: &[u8], ext: &HashMap<u8, usize>) -> Vec<f64> {
    if v.labels == out_labels {
        return v.data.to_vec();
    }
    let mut src_strides = vec![0usize; v.labels.len()];
    let mut acc = 1;
    for i in (0..v.labels.len()).rev() {
        src_strides[i] = acc;
        acc *= ext[&v.labels[i]];
    }
    let dims: Vec<usize> = out_labels.iter().map(|l| ext[l]).collect();
    let strides: Vec<usize> = out_labels
        .iter()
        .map(|l| v.labels.iter().position(|x| x == l).map_or(0, |p| src_strides[p]))
        .collect();
    let total: usize = dims.iter().product();
    let mut out = Vec::with_capacity(total);
    if dims.is_empty() {
        out.push(v.data[0]);
        return out;
    }
    let last = dims.len() - 1;
    let (inner, inner_stride) = (dims[last], strides[last]);
    let mut idx = vec![0usize; dims.len()];
    let mut base = 0usize;
    loop {
        if inner_stride == 1 {
            out.extend_from_slice(&v.data[base..base + inner]);
        } else {
            out.extend((0..inner).map(|j| v.data[base + j * inner_stride]));
        }
        // advance the odometer over all but the innermost axis
        let mut ax = last;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            base += strides[ax];
            if idx[ax] < dims[ax] {
                break;
            }
            base -= strides[ax] * dims[ax];
            idx[ax] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    /// Plain nested-loop evaluation over every label assignment.
    fn naive(spec: &str, ops: &[&Tensor]) -> Vec<f64> {
        let p = ContractSpec::parse(spec).unwrap();
        let shapes: Vec<&[usize]> = ops.iter().map(|t| t.shape()).collect();
        let ext = p.extents(&shapes, spec).unwrap();
        let mut all: Vec<u8> = p.output.clone();
        for inp in &p.inputs {
            for l in inp {
                if !all.contains(l) {
                    all.push(*l);
                }
            }
        }
        let out_size: usize = p.output.iter().map(|l| ext[l]).product();
        let mut out = vec![0.0; out_size];
        let dims: Vec<usize> = all.iter().map(|l| ext[l]).collect();
        let total: usize = dims.iter().product();
        for flat in 0..total {
            let mut rem = flat;
            let mut val = HashMap::new();
            for (i, l) in all.iter().enumerate().rev() {
                val.insert(*l, rem % dims[i]);
                rem /= dims[i];
            }
            let mut prod = 1.0;
            for (inp, op) in p.inputs.iter().zip(ops) {
                let idx: Vec<usize> = inp.iter().map(|l| val[l]).collect();
                prod *= op.at(&idx);
            }
            let mut o = 0;
            for l in &p.output {
                o = o * ext[l] + val[l];
            }
            out[o] += prod;
        }
        out
    }

    #[test]
    fn identity_matmul() {
        let a = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[2, 2], &[2.0, 3.0, 4.0, 5.0]);
        let c = contract("ij,jk->ik", &[&a, &b]).unwrap();
        assert_eq!(c.data(), &[2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn zero_operand_gives_zeros() {
        let x = Tensor::zeros(&[2, 3]);
        let phi = Tensor::ones(&[2, 2, 3]);
        let c = contract("nd,esd->nes", &[&x, &phi]).unwrap();
        assert_eq!(c.shape(), &[2, 2, 2]);
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_reduction_sums_products() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::ones(&[2, 2]);
        let c = contract("ij,ij->", &[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[] as &[usize]);
        assert_eq!(c.item().unwrap(), 10.0);
    }

    #[test]
    fn spaced_notation_is_accepted() {
        let x = t(&[1, 2], &[1.0, 2.0]);
        let phi = t(&[1, 1, 2], &[3.0, 4.0]);
        let c = contract("n d, e s d -> n e s", &[&x, &phi]).unwrap();
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn matches_naive_loops() {
        let mut seed = 7u64;
        let mut rnd = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    ((seed >> 11) as f64 / (1u64 << 53) as f64) - 0.5
                })
                .collect()
        };
        let cases: Vec<(&str, Vec<Vec<usize>>)> = vec![
            ("ij,jk->ik", vec![vec![3, 4], vec![4, 5]]),
            ("ij,jk->ki", vec![vec![3, 4], vec![4, 5]]),
            ("nd,nk->kd", vec![vec![5, 3], vec![5, 4]]),
            ("bnd,dk->bnk", vec![vec![2, 3, 4], vec![4, 5]]),
            ("hnk,mhk->hnm", vec![vec![2, 3, 4], vec![3, 2, 4]]),
            ("esd,edh->esh", vec![vec![3, 2, 4], vec![3, 4, 5]]),
            ("ij->ji", vec![vec![3, 4]]),
            ("ijk->j", vec![vec![2, 3, 4]]),
            ("ij,j->i", vec![vec![3, 4], vec![4]]),
            ("n,d->nd", vec![vec![3], vec![4]]),
            ("ij,jk,kl->il", vec![vec![2, 3], vec![3, 4], vec![4, 2]]),
            ("ab,bc,ca->", vec![vec![2, 3], vec![3, 4], vec![4, 2]]),
            ("ijk,ik->j", vec![vec![2, 3, 4], vec![2, 4]]),
        ];
        for (spec, shapes) in cases {
            let ops: Vec<Tensor> = shapes
                .iter()
                .map(|s| t(s, &rnd(s.iter().product())))
                .collect();
            let refs: Vec<&Tensor> = ops.iter().collect();
            let got = contract(spec, &refs).unwrap();
            let want = naive(spec, &refs);
            for (g, w) in got.data().iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "{spec}: {g} vs {w}");
            }
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let a = Tensor::ones(&[2, 3]);
        let b = Tensor::ones(&[4, 5]);
        assert!(matches!(contract("ij,jk->ik", &[&a, &b]), Err(Error::Shape { .. })));
        assert!(matches!(contract("ij->iz", &[&a]), Err(Error::ContractSpec { .. })));
        assert!(matches!(contract("ii->i", &[&Tensor::ones(&[2, 2])]), Err(Error::ContractSpec { .. })));
        assert!(matches!(contract("ij", &[&a]), Err(Error::ContractSpec { .. })));
        assert!(matches!(contract("ijk->i", &[&a]), Err(Error::Shape { .. })));
        assert!(matches!(contract("ij,jk->ik", &[&a]), Err(Error::ContractSpec { .. })));
    }
}
