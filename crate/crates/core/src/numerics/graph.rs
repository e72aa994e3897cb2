//! Reverse-mode differentiation over a recorded computation.
//!
//! A [`Graph`] is an append-only record of nodes. Each node holds its value,
//! ordered references to the nodes it was computed from, and a
//! [`BackwardRule`] that maps the node's adjoint to adjoints of its inputs.
//! Because a node can only reference nodes recorded before it, the record is
//! acyclic and reverse insertion order is a valid topological order.

use std::cell::RefCell;
use std::sync::Arc;

use super::kernels::{self, ConvGeometry};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Maps the adjoint of a node to the adjoints of its inputs.
pub trait BackwardRule: Send + Sync {
    fn name(&self) -> &'static str;

    /// `needs[i]` tells whether input `i` wants an adjoint; return `None` for
    /// the others.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>>;
}

struct Node {
    value: Arc<Tensor>,
    parents: Vec<Var>,
    rule: Option<Box<dyn BackwardRule>>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Adjoints produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Adjoint of `v`, or zeros of `shape` when `v` did not influence the root.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(
        &self,
        value: Tensor,
        parents: Vec<Var>,
        rule: Option<Box<dyn BackwardRule>>,
        leaf_grad: bool,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        assert!(
            parents.iter().all(|p| p.0 < id),
            "computation record must stay acyclic"
        );
        let needs_grad = leaf_grad || parents.iter().any(|p| nodes[p.0].needs_grad);
        nodes.push(Node {
            value: Arc::new(value),
            parents,
            rule,
            needs_grad,
        });
        Var(id)
    }

    /// A leaf that receives an adjoint.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, Vec::new(), None, true)
    }

    /// A leaf treated as a constant: no adjoint flows into it.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Vec::new(), None, false)
    }

    /// Records an operation whose value was computed by the caller.
    pub fn apply(&self, rule: Box<dyn BackwardRule>, parents: &[Var], value: Tensor) -> Var {
        self.push(value, parents.to_vec(), Some(rule), false)
    }

    pub fn value(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    /// Copies the value of `v` into a new constant leaf, cutting the record.
    pub fn detach(&self, v: Var) -> Var {
        let value = (*self.value(v)).clone();
        self.constant(value)
    }

    /// Reverse sweep from a scalar root. Every node that influences the root
    /// and depends on a gradient leaf receives an adjoint of its own shape.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        self.backward_impl(root, true)
    }

    /// Like [`Graph::backward`] but frees intermediate adjoints once consumed;
    /// only leaf adjoints remain.
    pub fn backward_leaves(&self, root: Var) -> Result<Gradients> {
        self.backward_impl(root, false)
    }

    fn backward_impl(&self, root: Var, retain: bool) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[root.0].value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got {:?}", nodes[root.0].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(nodes[root.0].value.shape()));
        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            let rule = match &node.rule {
                Some(r) if node.needs_grad => r,
                _ => continue,
            };
            let grad = match if retain {
                grads[i].clone()
            } else {
                grads[i].take()
            } {
                Some(g) => g,
                None => continue,
            };
            let needs: Vec<bool> = node.parents.iter().map(|p| nodes[p.0].needs_grad).collect();
            if !needs.iter().any(|&n| n) {
                continue;
            }
            let inputs: Vec<&Tensor> = node
                .parents
                .iter()
                .map(|p| nodes[p.0].value.as_ref())
                .collect();
            let adjoints = rule.backward(&inputs, &node.value, &grad, &needs);
            debug_assert_eq!(adjoints.len(), node.parents.len(), "{}", rule.name());
            for ((p, adj), need) in node.parents.iter().zip(adjoints).zip(&needs) {
                let Some(adj) = adj else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(
                    adj.shape(),
                    nodes[p.0].value.shape(),
                    "adjoint shape from {}",
                    rule.name()
                );
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&adj),
                    slot @ None => *slot = Some(adj),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("{:?} vs {:?}", sa, sb)));
        }
        Ok(())
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(&self.value(b), |x, y| x + y);
        Ok(self.apply(Box::new(AddRule), &[a, b], v))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(&self.value(b), |x, y| x - y);
        Ok(self.apply(Box::new(SubRule), &[a, b], v))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(&self.value(b), |x, y| x * y);
        Ok(self.apply(Box::new(MulRule), &[a, b], v))
    }

    /// Sum of several same-shape nodes, accumulated left to right.
    pub fn add_n(&self, parts: &[Var]) -> Result<Var> {
        let (&first, rest) = parts
            .split_first()
            .ok_or_else(|| Error::InvalidArgument("add_n of zero terms".into()))?;
        rest.iter().try_fold(first, |acc, &p| self.add(acc, p))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.apply(Box::new(ScaleRule(s)), &[a], v)
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.apply(Box::new(map_rule("add_scalar", |_, _, g| g)), &[a], v)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.apply(Box::new(LeakyReluRule(slope)), &[a], v)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.apply(
            Box::new(map_rule("sigmoid", |_, y, g| g * y * (1.0 - y))),
            &[a],
            v,
        )
    }

    /// Clamp with zero adjoint outside `[lo, hi]`.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.apply(Box::new(ClampRule(lo, hi)), &[a], v)
    }

    pub fn ln(&self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.apply(Box::new(map_rule("ln", |x, _, g| g / x)), &[a], v)
    }

    pub fn abs(&self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        self.apply(
            Box::new(map_rule("abs", |x, _, g| {
                g * x.signum() * (x != 0.0) as i32 as f64
            })),
            &[a],
            v,
        )
    }

    pub fn square(&self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.apply(Box::new(map_rule("square", |x, _, g| 2.0 * x * g)), &[a], v)
    }

    /// Elementwise op whose forward and derivative are supplied by the caller.
    /// `derivative(x, y)` returns dy/dx at input `x` with output `y`.
    pub fn map<F, D>(&self, a: Var, name: &'static str, forward: F, derivative: D) -> Var
    where
        F: Fn(f64) -> f64,
        D: Fn(f64, f64) -> f64 + Send + Sync + 'static,
    {
        let v = self.value(a).map(forward);
        self.apply(
            Box::new(map_rule(name, move |x, y, g| g * derivative(x, y))),
            &[a],
            v,
        )
    }

    // ---- reductions and reshapes ------------------------------------------

    pub fn sum(&self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.apply(Box::new(SumRule), &[a], v)
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = (*self.value(a)).clone().reshape(shape)?;
        Ok(self.apply(Box::new(ReshapeRule), &[a], v))
    }

    pub fn concat_channels(&self, parts: &[Var]) -> Result<Var> {
        let values: Vec<Arc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let v = super::tensor::concat_channels(&refs)?;
        Ok(self.apply(Box::new(ConcatRule), parts, v))
    }

    /// `(C, H, W) -> (C)` spatial mean.
    pub fn global_avg_pool(&self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (c, h, w) = x.dims3("global_avg_pool")?;
        let inv = 1.0 / (h * w) as f64;
        let sums = kernels::channel_sums(&x);
        let v = Tensor::from_vec(&[c], sums.data().iter().map(|s| s * inv).collect())?;
        Ok(self.apply(Box::new(GlobalPoolRule), &[a], v))
    }

    pub fn avg_pool(&self, a: Var, k: usize) -> Result<Var> {
        let v = kernels::avg_pool(&self.value(a), k)?;
        Ok(self.apply(Box::new(AvgPoolRule(k)), &[a], v))
    }

    // ---- structured operators ---------------------------------------------

    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let geo = ConvGeometry::new(xv.shape(), wv.shape(), stride, pad)?;
        let bv = b.map(|b| self.value(b));
        let v = kernels::conv2d(&xv, &wv, bv.as_deref(), stride, pad)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.apply(Box::new(ConvRule(geo)), &parents, v))
    }

    pub fn pixel_shuffle(&self, x: Var, r: usize) -> Result<Var> {
        let v = kernels::pixel_shuffle(&self.value(x), r)?;
        Ok(self.apply(Box::new(ShuffleRule { r, inverse: false }), &[x], v))
    }

    pub fn pixel_unshuffle(&self, x: Var, r: usize) -> Result<Var> {
        let v = kernels::pixel_unshuffle(&self.value(x), r)?;
        Ok(self.apply(Box::new(ShuffleRule { r, inverse: true }), &[x], v))
    }

    /// Affine map `w x + b` for a vector `x` of length `in`, `w` shaped `(out, in)`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (o, i) = match *wv.shape() {
            [o, i] => (o, i),
            _ => {
                return Err(Error::shape(
                    "linear",
                    format!("weight must be 2-D, got {:?}", wv.shape()),
                ))
            }
        };
        if xv.numel() != i {
            return Err(Error::shape(
                "linear",
                format!("input has {} entries, weight expects {}", xv.numel(), i),
            ));
        }
        let mut out: Vec<f64> = wv
            .data()
            .chunks(i)
            .map(|row| row.iter().zip(xv.data()).map(|(a, b)| a * b).sum())
            .collect();
        let mut parents = vec![x, w];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.numel() != o {
                return Err(Error::shape(
                    "linear",
                    format!("bias has {} entries, expected {}", bv.numel(), o),
                ));
            }
            for (y, bb) in out.iter_mut().zip(bv.data()) {
                *y += bb;
            }
            parents.push(b);
        }
        Ok(self.apply(Box::new(LinearRule), &parents, Tensor::from_vec(&[o], out)?))
    }

    /// Multiplies each channel by a constant binary `(1, H, W)` mask.
    pub fn masked_product(&self, x: Var, mask: &Tensor) -> Result<Var> {
        let v = kernels::masked_product(&self.value(x), mask)?;
        Ok(self.apply(Box::new(MaskRule(Arc::new(mask.clone()))), &[x], v))
    }
}

// ---- rules -----------------------------------------------------------------

struct AddRule;
impl BackwardRule for AddRule {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(
        &self,
        _: &[&Tensor],
        _: &Tensor,
        g: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        needs.iter().map(|&n| n.then(|| g.clone())).collect()
    }
}

struct SubRule;
impl BackwardRule for SubRule {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(
        &self,
        _: &[&Tensor],
        _: &Tensor,
        g: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        vec![needs[0].then(|| g.clone()), needs[1].then(|| g.scale(-1.0))]
    }
}

struct MulRule;
impl BackwardRule for MulRule {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(
        &self,
        x: &[&Tensor],
        _: &Tensor,
        g: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        vec![
            needs[0].then(|| g.zip_map(x[1], |a, b| a * b)),
            needs[1].then(|| g.zip_map(x[0], |a, b| a * b)),
        ]
    }
}

struct ScaleRule(f64);
impl BackwardRule for ScaleRule {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(g.scale(self.0))]
    }
}

struct LeakyReluRule(f64);
impl BackwardRule for LeakyReluRule {
    fn name(&self) -> &'static str {
        "leaky_relu"
    }
    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let s = self.0;
        vec![Some(
            g.zip_map(x[0], |gv, xv| if xv > 0.0 { gv } else { s * gv }),
        )]
    }
}

struct ClampRule(f64, f64);
impl BackwardRule for ClampRule {
    fn name(&self) -> &'static str {
        "clamp"
    }
    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let (lo, hi) = (self.0, self.1);
        vec![Some(g.zip_map(x[0], |gv, xv| {
            if xv >= lo && xv <= hi {
                gv
            } else {
                0.0
            }
        }))]
    }
}

/// Elementwise rule from a closure `(x, y, g) -> dx`.
struct MapRule<F> {
    name: &'static str,
    f: F,
}

fn map_rule<F>(name: &'static str, f: F) -> MapRule<F>
where
    F: Fn(f64, f64, f64) -> f64 + Send + Sync,
{
    MapRule { name, f }
}

impl<F> BackwardRule for MapRule<F>
where
    F: Fn(f64, f64, f64) -> f64 + Send + Sync,
{
    fn name(&self) -> &'static str {
        self.name
    }
    fn backward(&self, x: &[&Tensor], y: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let data = x[0]
            .data()
            .iter()
            .zip(y.data())
            .zip(g.data())
            .map(|((&xv, &yv), &gv)| (self.f)(xv, yv, gv))
            .collect();
        vec![Some(
            Tensor::from_vec(x[0].shape(), data).expect("same shape"),
        )]
    }
}

struct SumRule;
impl BackwardRule for SumRule {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(Tensor::full(x[0].shape(), g.item()))]
    }
}

struct ReshapeRule;
impl BackwardRule for ReshapeRule {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(g.clone().reshape(x[0].shape()).expect("same numel"))]
    }
}

struct ConcatRule;
impl BackwardRule for ConcatRule {
    fn name(&self) -> &'static str {
        "concat_channels"
    }
    fn backward(
        &self,
        x: &[&Tensor],
        _: &Tensor,
        g: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let mut offset = 0;
        x.iter()
            .zip(needs)
            .map(|(part, &need)| {
                let n = part.numel();
                let slice = &g.data()[offset..offset + n];
                offset += n;
                need.then(|| {
                    Tensor::from_vec(part.shape(), slice.to_vec()).expect("slice matches part")
                })
            })
            .collect()
    }
}

struct GlobalPoolRule;
impl BackwardRule for GlobalPoolRule {
    fn name(&self) -> &'static str {
        "global_avg_pool"
    }
    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let (c, h, w) = (x[0].shape()[0], x[0].shape()[1], x[0].shape()[2]);
        let inv = 1.0 / (h * w) as f64;
        vec![Some(Tensor::from_fn3(c, h, w, |ci, _, _| {
            g.data()[ci] * inv
        }))]
    }
}

struct AvgPoolRule(usize);
impl BackwardRule for AvgPoolRule {
    fn name(&self) -> &'static str {
        "avg_pool"
    }
    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let k = self.0;
        let (c, h, w) = (x[0].shape()[0], x[0].shape()[1], x[0].shape()[2]);
        let inv = 1.0 / (k * k) as f64;
        vec![Some(Tensor::from_fn3(c, h, w, |ci, y, xx| {
            g.at3(ci, y / k, xx / k) * inv
        }))]
    }
}

struct ConvRule(ConvGeometry);
impl BackwardRule for ConvRule {
    fn name(&self) -> &'static str {
        "conv2d"
    }
    fn backward(
        &self,
        x: &[&Tensor],
        _: &Tensor,
        g: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let mut out = vec![
            needs[0].then(|| kernels::conv2d_grad_input(g, x[1], &self.0)),
            needs[1].then(|| kernels::conv2d_grad_kernel(g, x[0], &self.0)),
        ];
        if x.len() == 3 {
            out.push(needs[2].then(|| kernels::channel_sums(g)));
        }
        out
    }
}

struct ShuffleRule {
    r: usize,
    inverse: bool,
}
impl BackwardRule for ShuffleRule {
    fn name(&self) -> &'static str {
        if self.inverse {
            "pixel_unshuffle"
        } else {
            "pixel_shuffle"
        }
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let adj = if self.inverse {
            kernels::pixel_shuffle(g, self.r)
        } else {
            kernels::pixel_unshuffle(g, self.r)
        };
        vec![Some(adj.expect("adjoint of a valid shuffle"))]
    }
}

struct LinearRule;
impl BackwardRule for LinearRule {
    fn name(&self) -> &'static str {
        "linear"
    }
    fn backward(
        &self,
        x: &[&Tensor],
        _: &Tensor,
        g: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (input, w) = (x[0], x[1]);
        let (o, i) = (w.shape()[0], w.shape()[1]);
        let gx = needs[0].then(|| {
            let mut acc = vec![0.0; i];
            for (row, gv) in w.data().chunks(i).zip(g.data()) {
                for (a, wv) in acc.iter_mut().zip(row) {
                    *a += gv * wv;
                }
            }
            Tensor::from_vec(input.shape(), acc).expect("input shape")
        });
        let gw = needs[1].then(|| {
            let mut d = Vec::with_capacity(o * i);
            for gv in g.data() {
                d.extend(input.data().iter().map(|xv| gv * xv));
            }
            Tensor::from_vec(&[o, i], d).expect("weight shape")
        });
        let mut out = vec![gx, gw];
        if x.len() == 3 {
            out.push(needs[2].then(|| g.clone()));
        }
        out
    }
}

struct MaskRule(Arc<Tensor>);
impl BackwardRule for MaskRule {
    fn name(&self) -> &'static str {
        "masked_product"
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(
            kernels::masked_product(g, &self.0).expect("mask validated at record time"),
        )]
    }
}
