use std::collections::{HashMap, HashSet};

use super::ops::vjp;
use super::Tensor;
use crate::error::{Error, Result};

/// Gradients of a scalar with respect to every trainable leaf it depends on.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    by_id: HashMap<u64, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, param: &Tensor) -> Option<&[f64]> {
        self.by_id.get(&param.id()).map(Vec::as_slice)
    }

    /// Gradient for `param`, zeros when it is not on any path to the loss.
    pub fn wrt(&self, param: &Tensor) -> Vec<f64> {
        self.get(param).map_or_else(|| vec![0.0; param.numel()], <[f64]>::to_vec)
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

/// Reverse-mode pass from a scalar loss.
pub fn backward(loss: &Tensor) -> Result<Gradients> {
    if loss.numel() != 1 {
        return Err(Error::NonScalarSeed(loss.shape().to_vec()));
    }
    backward_from(loss, vec![1.0])
}

/// Reverse-mode pass seeded with an explicit output gradient of `root`'s shape.
pub fn backward_from(root: &Tensor, seed: Vec<f64>) -> Result<Gradients> {
    if seed.len() != root.numel() {
        return Err(Error::shape("backward", format!("seed has {} values for {:?}", seed.len(), root.shape())));
    }
    let order = topo_order(root);
    let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
    let mut out = Gradients::default();
    pending.insert(root.id(), seed);

    for t in order.iter().rev() {
        let Some(g) = pending.remove(&t.id()) else { continue };
        match t.node() {
            None => {
                if t.is_parameter() {
                    accumulate(&mut out.by_id, t.id(), g);
                }
            }
            Some(node) => {
                let grads = vjp(&node.op, &node.parents, t, &g);
                for (parent, pg) in node.parents.iter().zip(grads) {
                    if let Some(pg) = pg {
                        accumulate(&mut pending, parent.id(), pg);
                    }
                }
            }
        }
    }
    Ok(out)
}

fn accumulate(map: &mut HashMap<u64, Vec<f64>>, id: u64, g: Vec<f64>) {
    match map.get_mut(&id) {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => {
            map.insert(id, g);
        }
    }
}

/// Post-order over the differentiable part of the graph (parents before children).
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut seen = HashSet::new();
    if !root.requires_grad() {
        return order;
    }
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !seen.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(node) = t.node() {
            for p in &node.parents {
                if p.requires_grad() && !seen.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::contract;

    #[test]
    fn linear_case_gradient_is_input() {
        let w = Tensor::parameter(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let x = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let loss = contract("i,i->", &[&w, &x]).unwrap();
        let g = backward(&loss).unwrap();
        assert_eq!(g.wrt(&w), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn softmax_jacobian_at_equal_logits() {
        let p = Tensor::parameter(&[2], vec![0.7, 0.7]).unwrap();
        let pick = Tensor::new(&[2], vec![1.0, 0.0]).unwrap();
        let loss = contract("i,i->", &[&p.softmax(0).unwrap(), &pick]).unwrap();
        let g = backward(&loss).unwrap().wrt(&p);
        assert!((g[0] - 0.25).abs() < 1e-15 && (g[1] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn detached_branch_gets_no_gradient() {
        let w = Tensor::parameter(&[2], vec![1.0, 2.0]).unwrap();
        let loss = w.detach().mul(&w).unwrap().sum().unwrap();
        let g = backward(&loss).unwrap();
        // only the live factor contributes: d/dw (c * w) = c
        assert_eq!(g.wrt(&w), vec![1.0, 2.0]);

        let cut = w.detach().sum().unwrap();
        let g = backward(&cut).unwrap();
        assert!(g.is_empty());
        assert_eq!(g.wrt(&w), vec![0.0, 0.0]);
    }

    #[test]
    fn shared_subexpressions_accumulate() {
        let w = Tensor::parameter(&[], vec![3.0]).unwrap();
        let sq = w.mul(&w).unwrap();
        let loss = sq.add(&sq).unwrap();
        assert_eq!(backward(&loss).unwrap().wrt(&w), vec![12.0]);
    }

    #[test]
    fn unused_parameter_is_zero() {
        let w = Tensor::parameter(&[2], vec![1.0, 1.0]).unwrap();
        let v = Tensor::parameter(&[2], vec![1.0, 1.0]).unwrap();
        let g = backward(&w.sum().unwrap()).unwrap();
        assert_eq!(g.wrt(&v), vec![0.0, 0.0]);
    }

    #[test]
    fn non_scalar_seed_rejected() {
        let w = Tensor::parameter(&[2], vec![1.0, 1.0]).unwrap();
        assert!(matches!(backward(&w.scale(2.0).unwrap()), Err(Error::NonScalarSeed(_))));
    }
}
