//! Reverse-mode differentiation tape.
//!
//! Every primitive appends a node holding its output value, the indices of its
//! inputs and a backward closure. Inputs always precede the node that consumes
//! them, so a single reverse sweep over the node list visits each node once in
//! a valid order.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{self, sigmoid, Real, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

/// Vector-Jacobian product of one recorded primitive.
///
/// Receives the input values, the output value and the upstream gradient and
/// returns one gradient per input (`None` where `needs[i]` is false).
pub trait Backward<T: Real> {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

impl<T, F> Backward<T> for F
where
    T: Real,
    F: Fn(&[&Tensor<T>], &Tensor<T>, &Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>>,
{
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        self(inputs, output, grad, needs)
    }
}

struct Node<T: Real> {
    name: &'static str,
    value: Tensor<T>,
    inputs: Vec<usize>,
    op: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
}

/// Append-only record of primitive applications.
pub struct Tape<T: Real> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Elementwise nonlinearities available to layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Sigmoid,
    Tanh,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a leaf. Parameters and inputs that need gradients set
    /// `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push("leaf", value, Vec::new(), None, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        inputs: Vec<usize>,
        op: Option<Box<dyn Backward<T>>>,
        requires_grad: bool,
    ) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            name,
            value,
            inputs,
            op,
            requires_grad,
        });
        Var { tape: self.id, index }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Tape(format!(
                "variable {} was not recorded on this tape",
                v.index
            )));
        }
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let i = self.check(v).expect("foreign variable");
        &self.nodes[i].value
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.nodes[self.check(v)?].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.check(v).map(|i| self.nodes[i].requires_grad).unwrap_or(false)
    }

    /// Append a primitive application. The node requires a gradient when any
    /// of its inputs does.
    pub fn record(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        inputs: &[Var],
        op: impl Backward<T> + 'static,
    ) -> Result<Var> {
        let mut idx = Vec::with_capacity(inputs.len());
        for &v in inputs {
            idx.push(self.check(v)?);
        }
        let requires_grad = idx.iter().any(|&i| self.nodes[i].requires_grad);
        let op: Option<Box<dyn Backward<T>>> = if requires_grad { Some(Box::new(op)) } else { None };
        Ok(self.push(name, value, idx, op, requires_grad))
    }

    /// Reverse sweep. Returns the gradient of `Σ seed·output` for every leaf
    /// that requires a gradient. The tape itself is left untouched.
    pub fn backward(&self, seeds: &[(Var, Tensor<T>)]) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        let mut highest = 0;
        for (v, seed) in seeds {
            let i = self.check(*v)?;
            let node = &self.nodes[i];
            if node.value.shape() != seed.shape() {
                return Err(Error::Shape(format!(
                    "seed shape {:?} does not match output {:?} of node {i} ({})",
                    seed.shape(),
                    node.value.shape(),
                    node.name
                )));
            }
            accumulate(&mut grads[i], seed.clone());
            highest = highest.max(i + 1);
        }
        for i in (0..highest).rev() {
            let node = &self.nodes[i];
            let Some(op) = node.op.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|&j| self.nodes[j].requires_grad).collect();
            let input_grads = op.backward(&inputs, &node.value, &g, &needs)?;
            if input_grads.len() != node.inputs.len() {
                return Err(Error::Tape(format!(
                    "{} returned {} gradients for {} inputs",
                    node.name,
                    input_grads.len(),
                    node.inputs.len()
                )));
            }
            for (&j, ig) in node.inputs.iter().zip(input_grads) {
                if let Some(ig) = ig {
                    if !self.nodes[j].requires_grad {
                        continue;
                    }
                    if ig.shape() != self.nodes[j].value.shape() {
                        return Err(Error::Tape(format!(
                            "{} produced gradient {:?} for input of shape {:?}",
                            node.name,
                            ig.shape(),
                            self.nodes[j].value.shape()
                        )));
                    }
                    accumulate(&mut grads[j], ig);
                }
            }
        }
        // Leaves keep their gradients; intermediates were consumed above.
        for (i, node) in self.nodes.iter().enumerate() {
            if node.op.is_some() || !node.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { tape: self.id, grads })
    }

    // ---- primitives ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.try_value(a)?, self.try_value(b)?)?;
        self.record(
            "matmul",
            out,
            &[a, b],
            |inp: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]| {
                let ga = if needs[0] {
                    Some(tensor::matmul(g, &inp[1].transpose2()?)?)
                } else {
                    None
                };
                let gb = if needs[1] {
                    Some(tensor::matmul(&inp[0].transpose2()?, g)?)
                } else {
                    None
                };
                Ok(vec![ga, gb])
            },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.try_value(a)?, self.try_value(b)?);
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "add shape mismatch: {:?} + {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        self.record(
            "add",
            out,
            &[a, b],
            |_: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]| {
                Ok(vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())])
            },
        )
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.try_value(a)?, self.try_value(b)?);
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "mul shape mismatch: {:?} * {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape(), data)?;
        self.record(
            "mul",
            out,
            &[a, b],
            |inp: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]| {
                let prod = |o: &Tensor<T>| -> Result<Tensor<T>> {
                    let d = g.data().iter().zip(o.data()).map(|(&x, &y)| x * y).collect();
                    Tensor::new(g.shape(), d)
                };
                Ok(vec![
                    if needs[0] { Some(prod(inp[1])?) } else { None },
                    if needs[1] { Some(prod(inp[0])?) } else { None },
                ])
            },
        )
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.try_value(a)?.scale(s);
        self.record(
            "scale",
            out,
            &[a],
            move |_: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]| Ok(vec![Some(g.scale(s))]),
        )
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let v = self.try_value(x)?;
        if let Some(index) = v.first_non_finite() {
            return Err(Error::NonFinite {
                context: format!("{kind:?} input"),
                index,
            });
        }
        let out = match kind {
            Activation::Sigmoid => v.map(sigmoid),
            Activation::Tanh => v.map(|e| e.tanh()),
        };
        self.record(
            match kind {
                Activation::Sigmoid => "sigmoid",
                Activation::Tanh => "tanh",
            },
            out,
            &[x],
            move |_: &[&Tensor<T>], y: &Tensor<T>, g: &Tensor<T>, _: &[bool]| {
                let d = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gi, &yi)| match kind {
                        Activation::Sigmoid => gi * yi * (T::one() - yi),
                        Activation::Tanh => gi * (T::one() - yi * yi),
                    })
                    .collect();
                Ok(vec![Some(Tensor::new(g.shape(), d)?)])
            },
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Tanh)
    }

    /// Softmax normalizing along `axis`; every other index is a position.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.try_value(x)?;
        if axis >= v.rank() {
            return Err(Error::Shape(format!(
                "softmax axis {axis} out of range for {:?}",
                v.shape()
            )));
        }
        if let Some(index) = v.first_non_finite() {
            return Err(Error::NonFinite {
                context: "softmax input".into(),
                index,
            });
        }
        let (outer, n, inner) = split_axis(v.shape(), axis);
        let mut out = v.clone();
        let d = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * n * inner + k * inner + i;
                let mut m = T::neg_infinity();
                for k in 0..n {
                    m = m.max(d[at(k)]);
                }
                let mut s = T::zero();
                for k in 0..n {
                    let e = (d[at(k)] - m).exp();
                    d[at(k)] = e;
                    s += e;
                }
                for k in 0..n {
                    d[at(k)] = d[at(k)] / s;
                }
            }
        }
        self.record(
            "softmax",
            out,
            &[x],
            move |_: &[&Tensor<T>], y: &Tensor<T>, g: &Tensor<T>, _: &[bool]| {
                let (outer, n, inner) = split_axis(y.shape(), axis);
                let mut gx = vec![T::zero(); y.len()];
                let (yd, gd) = (y.data(), g.data());
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * n * inner + k * inner + i;
                        let dot: T = (0..n).map(|k| yd[at(k)] * gd[at(k)]).sum();
                        for k in 0..n {
                            gx[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
                        }
                    }
                }
                Ok(vec![Some(Tensor::new(y.shape(), gx)?)])
            },
        )
    }

    /// Scalar `Σ x ⊙ weights`; turns any tensor output into a scalar objective.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        let v = self.try_value(x)?;
        if v.shape() != weights.shape() {
            return Err(Error::Shape(format!(
                "weighted_sum: {:?} vs weights {:?}",
                v.shape(),
                weights.shape()
            )));
        }
        let s: T = v.data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        let w = weights.clone();
        self.record(
            "weighted_sum",
            Tensor::scalar(s),
            &[x],
            move |_: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]| Ok(vec![Some(w.scale(g.data()[0]))]),
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = self.try_value(x)?;
        let ones = Tensor::full(v.shape(), T::one());
        self.weighted_sum(x, &ones)
    }
}

pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T: Real> {
    tape: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.index).and_then(|g| g.take())
    }
}

/// Result of comparing tape gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheck {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Compare the tape gradient of a scalar function against central finite
/// differences, componentwise. The relative error of each component uses the
/// denominator `max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::invalid(format!("grad_check step must be > 0, got {step}")));
    }
    let eval = |p: Tensor<f64>, component: usize| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(p, false);
        let y = f(&mut tape, x)?;
        let v = tape.try_value(y)?;
        if v.len() != 1 {
            return Err(Error::Shape(format!(
                "grad_check needs a scalar function, got {:?}",
                v.shape()
            )));
        }
        let r = v.data()[0];
        if !r.is_finite() {
            return Err(Error::NonFinite {
                context: "grad_check function value".into(),
                index: component,
            });
        }
        Ok(r)
    };

    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), true);
    let y = f(&mut tape, x)?;
    if tape.try_value(y)?.len() != 1 {
        return Err(Error::Shape(format!(
            "grad_check needs a scalar function, got {:?}",
            tape.value(y).shape()
        )));
    }
    let grads = tape.backward(&[(y, Tensor::scalar(1.0))])?;
    let analytic = grads
        .get(x)
        .map(|g| g.data().to_vec())
        .unwrap_or_else(|| vec![0.0; point.len()]);
    if let Some(i) = analytic.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "analytic gradient".into(),
            index: i,
        });
    }

    let mut numeric = Vec::with_capacity(point.len());
    let mut max_rel_error = 0.0;
    let mut worst_index = 0;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let n = (eval(plus, i)? - eval(minus, i)?) / (2.0 * step);
        let a = analytic[i];
        let rel = (a - n).abs() / 1f64.max(a.abs()).max(n.abs());
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_index = i;
        }
        numeric.push(n);
    }
    Ok(GradCheck {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}
