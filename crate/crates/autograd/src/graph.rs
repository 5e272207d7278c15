use crate::kernels::{self, ConvGeometry, GroupNormCache};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Param(ParamId),
    Input,
    Conv { x: Var, w: Var, b: Var, geom: ConvGeometry },
    UpConv { x: Var, w: Var, b: Var },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, cache: Option<GroupNormCache> },
    LeakyRelu { x: Var, slope: f64 },
    Add { a: Var, b: Var },
    AddChannel { x: Var, v: Var },
    Linear { x: Var, w: Var, b: Var },
    Loss { x: Var, grad: Tensor },
    WeightedSum { terms: Vec<(Var, f64)> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Option<Tensor>,
    requires_grad: bool,
}

/// Tape of operations recorded during one forward pass.
///
/// Parameters are borrowed from the [`ParamStore`] rather than copied.
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    track: bool,
}

impl<'p> Graph<'p> {
    /// Graph that records what is needed to differentiate w.r.t. parameters.
    pub fn new(store: &'p ParamStore) -> Self {
        Self::with_tracking(store, true)
    }

    /// Forward-only graph; `backward` yields all-zero gradients.
    pub fn inference(store: &'p ParamStore) -> Self {
        Self::with_tracking(store, false)
    }

    fn with_tracking(store: &'p ParamStore, track: bool) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            track,
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    fn push(&mut self, op: Op, value: Option<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].op {
            Op::Param(id) => self.store.get(*id),
            _ => self.nodes[v.0]
                .value
                .as_ref()
                .expect("non-parameter nodes always hold a value"),
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let v = self.push(Op::Param(id), None, self.track);
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Input, Some(t), false)
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeometry) -> Result<Var> {
        let y = kernels::conv3d_forward(self.value(x), self.value(w), self.value(b), geom)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Op::Conv { x, w, b, geom }, Some(y), rg))
    }

    pub fn upconv2(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = kernels::upconv2_forward(self.value(x), self.value(w), self.value(b))?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Op::UpConv { x, w, b }, Some(y), rg))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let (y, cache) = kernels::group_norm_forward(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            groups,
            1e-5,
        )?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let cache = rg.then_some(cache);
        Ok(self.push(Op::GroupNorm { x, gamma, beta, groups, cache }, Some(y), rg))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let mut y = self.value(x).clone();
        for v in y.data_mut() {
            if *v < 0.0 {
                *v *= slope;
            }
        }
        let rg = self.rg(x);
        self.push(Op::LeakyRelu { x, slope }, Some(y), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!("add {:?} + {:?}", ta.shape(), tb.shape())));
        }
        let mut y = ta.clone();
        y.add_assign(tb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add { a, b }, Some(y), rg))
    }

    /// Adds a per-sample, per-channel vector `v: [N, C]` to every voxel of `x: [N, C, ...]`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let (tx, tv) = (self.value(x), self.value(v));
        if tv.shape() != &tx.shape()[..2] {
            return Err(Error::Shape(format!(
                "channel bias {:?} for input {:?}",
                tv.shape(),
                tx.shape()
            )));
        }
        let s = tx.spatial_size();
        let mut y = tx.clone();
        for (chunk, b) in y.data_mut().chunks_mut(s).zip(tv.data()) {
            for a in chunk {
                *a += b;
            }
        }
        let rg = self.rg(x) || self.rg(v);
        Ok(self.push(Op::AddChannel { x, v }, Some(y), rg))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = kernels::linear_forward(self.value(x), self.value(w), self.value(b))?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Op::Linear { x, w, b }, Some(y), rg))
    }

    /// Scalar node whose derivative w.r.t. `x` was computed analytically by the caller.
    pub fn loss(&mut self, x: Var, value: f64, grad: Tensor) -> Result<Var> {
        if grad.shape() != self.value(x).shape() {
            return Err(Error::Shape(format!(
                "loss gradient {:?} for input {:?}",
                grad.shape(),
                self.value(x).shape()
            )));
        }
        let rg = self.rg(x);
        Ok(self.push(Op::Loss { x, grad }, Some(Tensor::scalar(value)), rg))
    }

    /// `sum_i c_i * s_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, c) in terms {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(Error::Shape(format!("weighted_sum term {:?} is not scalar", t.shape())));
            }
            total += c * t.item();
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        Ok(self.push(
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            Some(Tensor::scalar(total)),
            rg,
        ))
    }

    /// Reverse-mode sweep from a scalar root. Parameters that the root does
    /// not depend on get exactly-zero gradients.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let mut out = Gradients::zeros_like(self.store);
        if self.value(root).len() != 1 {
            return Err(Error::Shape("backward root must be scalar".into()));
        }
        if !self.rg(root) {
            return Ok(out);
        }
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Param(id) => out.accumulate(*id, &g),
                Op::Input => {}
                Op::Conv { x, w, b, geom } => {
                    let (dx, dw, db) = kernels::conv3d_backward(
                        self.value(*x),
                        self.value(*w),
                        *geom,
                        &g,
                        self.rg(*x),
                    )?;
                    if let Some(dx) = dx {
                        acc(&mut grads, *x, dx);
                    }
                    self.acc_if(&mut grads, *w, dw);
                    self.acc_if(&mut grads, *b, db);
                }
                Op::UpConv { x, w, b } => {
                    let (dx, dw, db) =
                        kernels::upconv2_backward(self.value(*x), self.value(*w), &g, self.rg(*x))?;
                    if let Some(dx) = dx {
                        acc(&mut grads, *x, dx);
                    }
                    self.acc_if(&mut grads, *w, dw);
                    self.acc_if(&mut grads, *b, db);
                }
                Op::GroupNorm { x, gamma, beta, groups, cache } => {
                    let cache = cache.as_ref().expect("cache kept when gradients are tracked");
                    let (dx, dgamma, dbeta) =
                        kernels::group_norm_backward(cache, self.value(*gamma), *groups, &g);
                    self.acc_if(&mut grads, *x, dx);
                    self.acc_if(&mut grads, *gamma, dgamma);
                    self.acc_if(&mut grads, *beta, dbeta);
                }
                Op::LeakyRelu { x, slope } => {
                    let mut dx = g;
                    for (d, v) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                        if *v < 0.0 {
                            *d *= slope;
                        }
                    }
                    self.acc_if(&mut grads, *x, dx);
                }
                Op::Add { a, b } => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    self.acc_if(&mut grads, *b, g);
                }
                Op::AddChannel { x, v } => {
                    if self.rg(*v) {
                        let s = g.spatial_size();
                        let dv: Vec<f64> = g.data().chunks(s).map(|c| c.iter().sum()).collect();
                        let dv = Tensor::new(self.value(*v).shape(), dv)?;
                        acc(&mut grads, *v, dv);
                    }
                    self.acc_if(&mut grads, *x, g);
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) = kernels::linear_backward(self.value(*x), self.value(*w), &g);
                    self.acc_if(&mut grads, *x, dx);
                    self.acc_if(&mut grads, *w, dw);
                    self.acc_if(&mut grads, *b, db);
                }
                Op::Loss { x, grad } => {
                    let mut dx = grad.clone();
                    dx.scale(g.item());
                    self.acc_if(&mut grads, *x, dx);
                }
                Op::WeightedSum { terms } => {
                    for &(v, c) in terms {
                        self.acc_if(&mut grads, v, Tensor::scalar(c * g.item()));
                    }
                }
            }
        }
        Ok(out)
    }

    fn acc_if(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if self.rg(v) {
            acc(grads, v, g);
        }
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}
