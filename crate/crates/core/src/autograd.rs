//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its value, its parent node ids and
//! a closure mapping the output gradient to parent gradients. Node ids grow
//! monotonically, so replaying ids in reverse order is a valid topological
//! order for the backward sweep.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::kernels::conv::{self, ConvGeom};
use crate::kernels::pointwise::{self, BinaryOp};
use crate::kernels::{norm, pool, resample};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

pub type Grads<T> = Vec<Option<Tensor<T>>>;
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Result<Grads<T>>>;

struct Node<T: Real> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    param: Option<String>,
    op: &'static str,
    macs: u64,
}

pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    bound: RefCell<HashMap<String, usize>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            bound: RefCell::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_node("constant", value, vec![], None, false, None, 0)
    }

    /// Leaf whose gradient is reported by [`Tape::backward`].
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_node("leaf", value, vec![], None, true, None, 0)
    }

    /// Bind a named parameter once per tape; later calls return the same node.
    pub fn param<'t>(&'t self, store: &ParamStore<T>, name: &str) -> Result<Var<'t, T>> {
        if let Some(&id) = self.bound.borrow().get(name) {
            return Ok(Var { tape: self, id });
        }
        let p = store
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        let var = self.push_node(
            "param",
            p.value.clone(),
            vec![],
            None,
            p.trainable,
            Some(name.to_string()),
            0,
        );
        self.bound.borrow_mut().insert(name.to_string(), var.id);
        Ok(var)
    }

    #[allow(clippy::too_many_arguments)]
    fn push_node(
        &self,
        op: &'static str,
        value: Tensor<T>,
        parents: Vec<usize>,
        backward: Option<BackwardFn<T>>,
        requires_grad: bool,
        param: Option<String>,
        macs: u64,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward,
            requires_grad,
            param,
            op,
            macs,
        });
        Var { tape: self, id }
    }

    /// Append a differentiable operation. `backward` receives the output
    /// gradient and a per-parent flag telling which gradients are needed.
    pub fn custom<'t>(
        &'t self,
        op: &'static str,
        parents: &[Var<'t, T>],
        value: Tensor<T>,
        macs: u64,
        backward: BackwardFn<T>,
    ) -> Var<'t, T> {
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let requires_grad = {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].requires_grad)
        };
        let backward = requires_grad.then_some(backward);
        self.push_node(op, value, ids, backward, requires_grad, None, macs)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Multiply-accumulate count summed over every recorded operation.
    pub fn total_macs(&self) -> u64 {
        self.nodes.borrow().iter().map(|n| n.macs).sum()
    }

    /// Per-operation MAC totals keyed by op name.
    pub fn macs_by_op(&self) -> IndexMap<&'static str, u64> {
        let mut m = IndexMap::new();
        for n in self.nodes.borrow().iter().filter(|n| n.macs > 0) {
            *m.entry(n.op).or_insert(0) += n.macs;
        }
        m
    }

    /// Reverse sweep from a scalar. Every bound trainable parameter gets a
    /// gradient (zero when unreachable).
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::arg(
                "backward",
                format!("loss must be a scalar, got shape {:?}", root.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::ones(root.value.shape().to_vec()));
        let mut leaves = HashMap::new();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(f) = &node.backward else {
                leaves.insert(id, g);
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let pg = f(&g, &needs)?;
            debug_assert_eq!(pg.len(), node.parents.len(), "op {}", node.op);
            for ((&p, gp), &need) in node.parents.iter().zip(pg).zip(&needs) {
                let Some(gp) = gp else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(gp.shape(), nodes[p].value.shape(), "op {}", node.op);
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&gp),
                    slot => *slot = Some(gp),
                }
            }
        }
        let mut named = IndexMap::new();
        for (id, n) in nodes.iter().enumerate() {
            if let (Some(name), true) = (&n.param, n.requires_grad) {
                let g = leaves
                    .remove(&id)
                    .unwrap_or_else(|| Tensor::zeros(n.value.shape().to_vec()));
                named.insert(name.clone(), g);
            }
        }
        Ok(Gradients { named, leaves })
    }
}

/// Result of a backward sweep.
pub struct Gradients<T: Real> {
    named: IndexMap<String, Tensor<T>>,
    leaves: HashMap<usize, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.named.get(name)
    }

    /// Gradient of an unnamed leaf created with [`Tape::leaf`].
    pub fn of(&self, var: &Var<'_, T>) -> Tensor<T> {
        self.leaves
            .get(&var.id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }

    pub fn named(&self) -> &IndexMap<String, Tensor<T>> {
        &self.named
    }

    pub fn into_named(self) -> IndexMap<String, Tensor<T>> {
        self.named
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn dims5(&self) -> Result<[usize; 5]> {
        self.value().dims5()
    }

    fn unary(
        &self,
        op: &'static str,
        value: Tensor<T>,
        backward: impl Fn(&Tensor<T>) -> Tensor<T> + 'static,
    ) -> Var<'t, T> {
        self.tape.custom(
            op,
            &[*self],
            value,
            0,
            Box::new(move |g, _| Ok(vec![Some(backward(g))])),
        )
    }

    pub fn conv3d(&self, w: Var<'t, T>, b: Option<Var<'t, T>>, geom: ConvGeom) -> Result<Var<'t, T>> {
        let (x, wv) = (self.value(), w.value());
        let bv = b.map(|b| b.value());
        let dm = conv::conv_dims(&x, &wv, bv.as_deref(), geom)?;
        let y = conv::conv3d_unchecked(&x, &wv, bv.as_deref(), &dm);
        let mut parents = vec![*self, w];
        parents.extend(b);
        let has_bias = b.is_some();
        Ok(self.tape.custom(
            "conv3d",
            &parents,
            y,
            dm.macs(),
            Box::new(move |g, needs| {
                let r = conv::conv3d_backward(&x, &wv, g, geom, [needs[0], needs[1], has_bias && needs[2]])?;
                let mut out = vec![r.input, r.weight];
                if has_bias {
                    out.push(r.bias);
                }
                Ok(out)
            }),
        ))
    }

    pub fn conv_transpose3d(
        &self,
        w: Var<'t, T>,
        b: Option<Var<'t, T>>,
        stride: usize,
    ) -> Result<Var<'t, T>> {
        let (x, wv) = (self.value(), w.value());
        let bv = b.map(|b| b.value());
        let dm = conv::conv_transpose_dims(&x, &wv, bv.as_deref(), stride)?;
        let y = conv::conv_transpose3d_unchecked(&x, &wv, bv.as_deref(), &dm);
        let mut parents = vec![*self, w];
        parents.extend(b);
        let has_bias = b.is_some();
        Ok(self.tape.custom(
            "convtranspose3d",
            &parents,
            y,
            dm.macs(),
            Box::new(move |g, needs| {
                let r = conv::conv_transpose3d_backward(
                    &x,
                    &wv,
                    g,
                    stride,
                    [needs[0], needs[1], has_bias && needs[2]],
                )?;
                let mut out = vec![r.input, r.weight];
                if has_bias {
                    out.push(r.bias);
                }
                Ok(out)
            }),
        ))
    }

    pub fn maxpool3d(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let (y, arg) = pool::maxpool3d(&x)?;
        let shape = x.shape().to_vec();
        Ok(self.unary("maxpool3d", y, move |g| {
            pool::maxpool3d_backward(&shape, &arg, g)
        }))
    }

    /// Spatial mean, `[B, C, D, H, W] -> [B, C]`.
    pub fn gap3d(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let y = pool::gap3d(&x)?;
        let shape = x.shape().to_vec();
        Ok(self.unary("gap3d", y, move |g| pool::gap3d_backward(&shape, g)))
    }

    pub fn group_norm(&self, groups: usize, gamma: Var<'t, T>, beta: Var<'t, T>) -> Result<Var<'t, T>> {
        let gv = gamma.value();
        let (y, cache) = norm::group_norm(&self.value(), groups, &gv, &beta.value(), norm::GN_EPS)?;
        Ok(self.tape.custom(
            "groupnorm",
            &[*self, gamma, beta],
            y,
            0,
            Box::new(move |g, _| {
                let (dx, dg, db) = norm::group_norm_backward(&cache, groups, &gv, g);
                Ok(vec![Some(dx), Some(dg), Some(db)])
            }),
        ))
    }

    pub fn silu(&self) -> Var<'t, T> {
        let x = self.value();
        let y = x.map(pointwise::silu);
        self.unary("silu", y, move |g| {
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .map(|(&gv, &xv)| gv * pointwise::silu_grad(xv))
                .collect();
            Tensor::new(g.shape().to_vec(), data).expect("silu grad")
        })
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        let y = Rc::new(self.value().map(pointwise::sigmoid));
        let saved = Rc::clone(&y);
        self.unary("sigmoid", (*y).clone(), move |g| {
            let data = g
                .data()
                .iter()
                .zip(saved.data())
                .map(|(&gv, &s)| gv * s * (T::one() - s))
                .collect();
            Tensor::new(g.shape().to_vec(), data).expect("sigmoid grad")
        })
    }

    /// Elementwise absolute value; the subgradient at zero is taken as zero.
    pub fn abs(&self) -> Var<'t, T> {
        let x = self.value();
        let y = x.map(|v| v.abs());
        self.unary("abs", y, move |g| {
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .map(|(&gv, &xv)| {
                    if xv > T::zero() {
                        gv
                    } else if xv < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                })
                .collect();
            Tensor::new(g.shape().to_vec(), data).expect("abs grad")
        })
    }

    fn binary(&self, op: BinaryOp, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let y = pointwise::binary(op, &a, &b)?;
        let name = match op {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
        };
        Ok(self.tape.custom(
            name,
            &[*self, other],
            y,
            0,
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| match op {
                    BinaryOp::Add | BinaryOp::Sub => pointwise::reduce_to(g, a.shape()),
                    BinaryOp::Mul => {
                        let gb = pointwise::binary(BinaryOp::Mul, g, &b).expect("broadcast");
                        pointwise::reduce_to(&gb, a.shape())
                    }
                });
                let gb = needs[1].then(|| match op {
                    BinaryOp::Add => pointwise::reduce_to(g, b.shape()),
                    BinaryOp::Sub => pointwise::reduce_to(g, b.shape()).map(|v| -v),
                    BinaryOp::Mul => {
                        let ga = pointwise::binary(BinaryOp::Mul, g, &a).expect("broadcast");
                        pointwise::reduce_to(&ga, b.shape())
                    }
                });
                Ok(vec![ga, gb])
            }),
        ))
    }

    pub fn add(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(BinaryOp::Add, other)
    }

    pub fn sub(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(BinaryOp::Sub, other)
    }

    pub fn mul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(BinaryOp::Mul, other)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t, T> {
        let c = T::of(c);
        let y = self.value().map(|v| v + c);
        self.unary("add_scalar", y, |g| g.clone())
    }

    pub fn mul_scalar(&self, c: f64) -> Var<'t, T> {
        let c = T::of(c);
        let y = self.value().map(|v| v * c);
        self.unary("mul_scalar", y, move |g| g.map(|v| v * c))
    }

    /// `c - x`.
    pub fn rsub_scalar(&self, c: f64) -> Var<'t, T> {
        let c = T::of(c);
        let y = self.value().map(|v| c - v);
        self.unary("rsub_scalar", y, |g| g.map(|v| -v))
    }

    pub fn softmax_channels(&self) -> Result<Var<'t, T>> {
        let p = Rc::new(pointwise::softmax_channels(&self.value())?);
        let saved = Rc::clone(&p);
        Ok(self.unary("softmax", (*p).clone(), move |g| {
            pointwise::softmax_channels_backward(&saved, g)
        }))
    }

    /// `[B, N] x W[M, N] (+ b[M]) -> [B, M]`.
    pub fn linear(&self, w: Var<'t, T>, b: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        let (v, wv) = (self.value(), w.value());
        let bv = b.map(|b| b.value());
        let (bn, n, m) = pointwise::linear_dims(&v, &wv, bv.as_deref())?;
        let y = pointwise::linear(&v, &wv, bv.as_deref())?;
        let mut parents = vec![*self, w];
        parents.extend(b);
        let has_bias = b.is_some();
        Ok(self.tape.custom(
            "linear",
            &parents,
            y,
            (bn * n * m) as u64,
            Box::new(move |g, _| {
                let (gv, gw, gb) = pointwise::linear_backward(&v, &wv, g);
                let mut out = vec![Some(gv), Some(gw)];
                if has_bias {
                    out.push(Some(gb));
                }
                Ok(out)
            }),
        ))
    }

    pub fn resample(&self, target: [usize; 3]) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.dims5()?[2..] == target {
            return Ok(*self);
        }
        let y = resample::trilinear_resample(&x, target)?;
        let shape = x.shape().to_vec();
        Ok(self.tape.custom(
            "resample",
            &[*self],
            y,
            0,
            Box::new(move |g, _| Ok(vec![Some(resample::trilinear_resample_backward(&shape, g)?)])),
        ))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let x = self.value();
        let from = x.shape().to_vec();
        let y = (*x).clone().reshape(shape)?;
        Ok(self.unary("reshape", y, move |g| {
            g.clone().reshape(from.clone()).expect("reshape grad")
        }))
    }

    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let y = pointwise::slice_channels(&x, start, end)?;
        let shape = x.shape().to_vec();
        Ok(self.unary("slice", y, move |g| {
            pointwise::unslice_channels(g, &shape, start)
        }))
    }

    /// Sum of every element as a rank-0 scalar.
    pub fn sum(&self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.unary("sum", Tensor::scalar(x.sum()), move |g| {
            Tensor::full(shape.clone(), g.item())
        })
    }

    pub fn mean(&self) -> Var<'t, T> {
        let n = self.value().numel() as f64;
        self.sum().mul_scalar(1.0 / n)
    }
}

/// Channel concatenation of rank-5 variables.
pub fn concat<'t, T: Real>(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let tape = parts
        .first()
        .ok_or_else(|| Error::arg("concat", "nothing to concatenate"))?
        .tape;
    let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
    let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
    let y = pointwise::concat_channels(&refs)?;
    let widths: Vec<usize> = values.iter().map(|v| v.shape()[1]).collect();
    Ok(tape.custom(
        "concat",
        parts,
        y,
        0,
        Box::new(move |g, needs| {
            let mut start = 0;
            let mut out = Vec::with_capacity(widths.len());
            for (&w, &need) in widths.iter().zip(needs) {
                out.push(if need {
                    Some(pointwise::slice_channels(g, start, start + w)?)
                } else {
                    None
                });
                start += w;
            }
            Ok(out)
        }),
    ))
}

/// Parameter lookup bundled with the tape that records a forward pass.
#[derive(Clone, Copy)]
pub struct Ctx<'t, T: Real> {
    pub tape: &'t Tape<T>,
    pub store: &'t ParamStore<T>,
}

impl<'t, T: Real> Ctx<'t, T> {
    pub fn new(tape: &'t Tape<T>, store: &'t ParamStore<T>) -> Self {
        Self { tape, store }
    }

    pub fn param(&self, name: &str) -> Result<Var<'t, T>> {
        self.tape.param(self.store, name)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'t, T> {
        self.tape.constant(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(vec![2, 3], |i| i as f64));
        let g = tape.backward(x.sum()).unwrap();
        assert_eq!(g.of(&x), Tensor::ones(vec![2, 3]));
    }

    #[test]
    fn pointwise_conv_gradient_is_ones() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(vec![1, 1, 2, 3, 2], |i| i as f64 - 4.0));
        let w = tape.constant(Tensor::ones(vec![1, 1, 1, 1, 1]));
        let y = x.conv3d(w, None, ConvGeom::pointwise()).unwrap();
        let g = tape.backward(y.sum()).unwrap();
        assert_eq!(g.of(&x), Tensor::ones(vec![1, 1, 2, 3, 2]));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(vec![3]));
        assert!(matches!(tape.backward(x), Err(Error::Argument { .. })));
    }

    #[test]
    fn shared_use_accumulates() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(vec![2], 3.0));
        let y = x.mul(x).unwrap().sum();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.of(&x).data(), &[6.0, 6.0]);
    }

    #[test]
    fn unreachable_params_get_zero() {
        let mut store = ParamStore::<f64>::default();
        store.insert("a", Tensor::ones(vec![2]), true).unwrap();
        store.insert("b", Tensor::ones(vec![3]), true).unwrap();
        let tape = Tape::new();
        let a = tape.param(&store, "a").unwrap();
        let _b = tape.param(&store, "b").unwrap();
        let g = tape.backward(a.sum()).unwrap();
        assert_eq!(g.get("b").unwrap(), &Tensor::zeros(vec![3]));
        assert_eq!(g.get("a").unwrap(), &Tensor::ones(vec![2]));
    }

    #[test]
    fn frozen_params_are_not_differentiated() {
        let mut store = ParamStore::<f64>::default();
        store.insert("frozen", Tensor::ones(vec![2]), false).unwrap();
        let tape = Tape::new();
        let p = tape.param(&store, "frozen").unwrap();
        let g = tape.backward(p.sum()).unwrap();
        assert!(g.get("frozen").is_none());
    }
}
