use super::tensor::{gemm, sigmoid, Tensor};
use crate::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// `[n, d] + [d]` broadcast over rows; the bias is a node.
    AddRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    /// Elementwise product with a constant tensor of equal shape.
    MulConst(NodeId, Tensor),
    Relu(NodeId),
    Softplus(NodeId),
    Mean(NodeId),
    Sum(NodeId),
    /// `[n, d] -> [n * m, d]`, each row repeated `m` times.
    RepeatRows(NodeId, usize),
    /// Same-shape linear combination `sum_i w_i * x_i`.
    WeightedSum(Vec<(f64, NodeId)>),
    /// Row-wise `0.5 * ||y_i - anchor_i||^2`, anchor constant: `[n, d] -> [n]`.
    HalfSqDistRows { y: NodeId, anchor: Tensor },
    /// Row-wise 2-D rotation of each point by angle `kappa * ||p||`.
    Twist { input: NodeId, kappa: f64 },
    /// Energy-distance penalty of grouped conditional samples against a
    /// constant prior batch; see [`Graph::energy_penalty`].
    EnergyPenalty {
        y: NodeId,
        prior: Tensor,
        groups: usize,
        cond: usize,
        prior_per_group: usize,
        gamma: f64,
        alpha: f64,
    },
    /// Mean over rows of `KL(N(mu_i, diag sigma_i^2) || N(m0, diag d))`.
    KlDiagToPrior {
        mu: NodeId,
        sigma: NodeId,
        prior_mean: Vec<f64>,
        prior_var: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// A tape of tensor operations, rebuilt for every forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, grad: None, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Registers a differentiable leaf (parameters, inputs under test).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a non-differentiable input (data batches, noise draws).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward root w.r.t. `id`; zeros if the node was
    /// not reached.
    pub fn grad(&self, id: NodeId) -> Tensor {
        match &self.nodes[id.0].grad {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[id.0].value.shape()),
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a.0].value.matmul(&self.nodes[b.0].value)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::MatMul(a, b), needs))
    }

    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = self.nodes[x.0].value.add_row(&self.nodes[bias.0].value)?;
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(v, Op::AddRow(x, bias), needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a.0].value.shape() != self.nodes[b.0].value.shape() {
            return Err(Error::ShapeMismatch {
                context: "Graph::add",
                detail: format!(
                    "{:?} vs {:?}",
                    self.nodes[a.0].value.shape(),
                    self.nodes[b.0].value.shape()
                ),
            });
        }
        let mut v = self.nodes[a.0].value.clone();
        for (o, r) in v.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o += r;
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Add(a, b), needs))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let mut v = self.nodes[x.0].value.clone();
        for o in v.data_mut().iter_mut() {
            *o *= c;
        }
        let needs = self.needs(x);
        self.push(v, Op::Scale(x, c), needs)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let mut v = self.nodes[x.0].value.clone();
        for o in v.data_mut().iter_mut() {
            *o += c;
        }
        let needs = self.needs(x);
        self.push(v, Op::AddScalar(x, c), needs)
    }

    pub fn mul_const(&mut self, x: NodeId, factor: &Tensor) -> Result<NodeId> {
        if self.nodes[x.0].value.shape() != factor.shape() {
            return Err(Error::ShapeMismatch {
                context: "Graph::mul_const",
                detail: format!("{:?} vs {:?}", self.nodes[x.0].value.shape(), factor.shape()),
            });
        }
        let mut v = self.nodes[x.0].value.clone();
        for (o, f) in v.data_mut().iter_mut().zip(factor.data()) {
            *o *= f;
        }
        let needs = self.needs(x);
        Ok(self.push(v, Op::MulConst(x, factor.clone()), needs))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.relu();
        let needs = self.needs(x);
        self.push(v, Op::Relu(x), needs)
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.softplus();
        let needs = self.needs(x);
        self.push(v, Op::Softplus(x), needs)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.data().iter().sum::<f64>()
            / self.nodes[x.0].value.len() as f64;
        let needs = self.needs(x);
        self.push(Tensor::scalar(v), Op::Mean(x), needs)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.data().iter().sum::<f64>();
        let needs = self.needs(x);
        self.push(Tensor::scalar(v), Op::Sum(x), needs)
    }

    pub fn repeat_rows(&mut self, x: NodeId, m: usize) -> Result<NodeId> {
        let v = self.nodes[x.0].value.repeat_rows(m)?;
        let needs = self.needs(x);
        Ok(self.push(v, Op::RepeatRows(x, m), needs))
    }

    pub fn weighted_sum(&mut self, terms: &[(f64, NodeId)]) -> Result<NodeId> {
        let first = terms
            .first()
            .ok_or_else(|| Error::contract("weighted_sum needs at least one term"))?;
        let shape = self.nodes[first.1 .0].value.shape().to_vec();
        let mut v = Tensor::zeros(&shape);
        let mut needs = false;
        for &(w, id) in terms {
            if self.nodes[id.0].value.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    context: "Graph::weighted_sum",
                    detail: format!("{:?} vs {:?}", self.nodes[id.0].value.shape(), shape),
                });
            }
            for (o, x) in v.data_mut().iter_mut().zip(self.nodes[id.0].value.data()) {
                *o += w * x;
            }
            needs |= self.needs(id);
        }
        Ok(self.push(v, Op::WeightedSum(terms.to_vec()), needs))
    }

    /// Row-wise half squared distance `0.5 * ||y_i - anchor_i||^2 -> [n]`.
    pub fn half_sq_dist_rows(&mut self, y: NodeId, anchor: &Tensor) -> Result<NodeId> {
        let yv = &self.nodes[y.0].value;
        if yv.shape() != anchor.shape() {
            return Err(Error::ShapeMismatch {
                context: "Graph::half_sq_dist_rows",
                detail: format!("{:?} vs {:?}", yv.shape(), anchor.shape()),
            });
        }
        let (n, d) = (yv.rows(), yv.cols());
        let mut out = vec![0.0; n];
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..d {
                let diff = yv.data()[i * d + j] - anchor.data()[i * d + j];
                acc += diff * diff;
            }
            out[i] = 0.5 * acc;
        }
        let needs = self.needs(y);
        Ok(self.push(
            Tensor::from_vec(out),
            Op::HalfSqDistRows { y, anchor: anchor.clone() },
            needs,
        ))
    }

    /// Rotates each 2-D row by the angle `kappa * ||row||`.
    pub fn twist(&mut self, input: NodeId, kappa: f64) -> Result<NodeId> {
        let xv = &self.nodes[input.0].value;
        if xv.cols() != 2 {
            return Err(Error::ShapeMismatch {
                context: "Graph::twist",
                detail: format!("expected 2 columns, got {:?}", xv.shape()),
            });
        }
        let v = twist_rows(xv, kappa);
        let needs = self.needs(input);
        Ok(self.push(v, Op::Twist { input, kappa }, needs))
    }

    /// Monte-Carlo energy penalty, averaged over `groups` conditional
    /// batches of `cond` samples each, against `prior_per_group` prior
    /// samples per group:
    ///
    /// `gamma * mean_i [ 2/(cond*n0) * sum l(y_ij, p_il)
    ///                   - 1/(cond*(cond-1)) * sum_{j != j'} l(y_ij, y_ij') ]`
    ///
    /// with `l(a, b) = ||a - b||^alpha`.
    pub fn energy_penalty(
        &mut self,
        y: NodeId,
        prior: &Tensor,
        groups: usize,
        cond: usize,
        prior_per_group: usize,
        gamma: f64,
        alpha: f64,
    ) -> Result<NodeId> {
        let yv = &self.nodes[y.0].value;
        if cond < 2 {
            return Err(Error::contract(
                "energy penalty needs at least 2 conditional samples per input",
            ));
        }
        if prior_per_group < 1 {
            return Err(Error::contract("energy penalty needs a nonempty prior batch"));
        }
        if yv.rows() != groups * cond {
            return Err(Error::ShapeMismatch {
                context: "Graph::energy_penalty",
                detail: format!("{} rows != {groups} groups x {cond}", yv.rows()),
            });
        }
        if prior.rows() != groups * prior_per_group || prior.cols() != yv.cols() {
            return Err(Error::ShapeMismatch {
                context: "Graph::energy_penalty",
                detail: format!(
                    "prior {:?} does not match {groups} groups x {prior_per_group} x {}",
                    prior.shape(),
                    yv.cols()
                ),
            });
        }
        let value = energy_penalty_value(yv, prior, groups, cond, prior_per_group, gamma, alpha);
        let needs = self.needs(y);
        Ok(self.push(
            Tensor::scalar(value),
            Op::EnergyPenalty {
                y,
                prior: prior.clone(),
                groups,
                cond,
                prior_per_group,
                gamma,
                alpha,
            },
            needs,
        ))
    }

    /// Mean over rows of the analytic KL divergence from `N(mu_i, diag
    /// sigma_i^2)` to the diagonal Gaussian prior `N(m0, diag d)`.
    pub fn kl_diag_to_prior(
        &mut self,
        mu: NodeId,
        sigma: NodeId,
        prior_mean: &[f64],
        prior_var: &[f64],
    ) -> Result<NodeId> {
        let muv = &self.nodes[mu.0].value;
        let sigv = &self.nodes[sigma.0].value;
        if muv.shape() != sigv.shape() || muv.cols() != prior_mean.len() {
            return Err(Error::ShapeMismatch {
                context: "Graph::kl_diag_to_prior",
                detail: format!(
                    "mu {:?}, sigma {:?}, prior dim {}",
                    muv.shape(),
                    sigv.shape(),
                    prior_mean.len()
                ),
            });
        }
        if prior_var.iter().any(|&d| d <= 0.0) {
            return Err(Error::contract("KL prior variances must be positive"));
        }
        if sigv.data().iter().any(|&s| s <= 0.0) {
            return Err(Error::contract("KL requires strictly positive sigma"));
        }
        let (n, d) = (muv.rows(), muv.cols());
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..d {
                let m = muv.data()[i * d + j];
                let s = sigv.data()[i * d + j];
                let dv = prior_var[j];
                total += 0.5 * dv.ln() - s.ln() + (s * s + (m - prior_mean[j]).powi(2)) / (2.0 * dv)
                    - 0.5;
            }
        }
        let needs = self.needs(mu) || self.needs(sigma);
        Ok(self.push(
            Tensor::scalar(total / n as f64),
            Op::KlDiagToPrior {
                mu,
                sigma,
                prior_mean: prior_mean.to_vec(),
                prior_var: prior_var.to_vec(),
            },
            needs,
        ))
    }

    /// Reverse pass from a scalar root. Populates gradients of every
    /// gradient-requiring node reachable from `root`.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if !self.nodes[root.0].value.is_scalar() {
            return Err(Error::contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        for node in self.nodes.iter_mut() {
            node.grad = None;
        }
        self.nodes[root.0].grad = Some(Tensor::scalar(1.0));

        for i in (0..=root.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i);
        }
        Ok(())
    }

    fn grad_buf(&mut self, id: NodeId) -> &mut Tensor {
        let shape = self.nodes[id.0].value.shape().to_vec();
        self.nodes[id.0].grad.get_or_insert_with(|| Tensor::zeros(&shape))
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(&mut self, i: usize) {
        // Take the node's grad to appease the borrow checker; restore after.
        let out_grad = self.nodes[i].grad.take().expect("grad present");
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                let n = self.nodes[b.0].value.cols();
                // products land in a scratch buffer and are added
                // elementwise, so accumulation across several uses of the
                // same parameter is order-independent
                if self.needs(a) {
                    let bv = self.nodes[b.0].value.clone();
                    let mut tmp = vec![0.0; m * k];
                    // dA = dC @ B^T
                    gemm(false, true, m, n, k, 1.0, out_grad.data(), bv.data(), 0.0, &mut tmp);
                    let ga = self.grad_buf(a);
                    for (o, t) in ga.data_mut().iter_mut().zip(&tmp) {
                        *o += t;
                    }
                }
                if self.needs(b) {
                    let av = self.nodes[a.0].value.clone();
                    let mut tmp = vec![0.0; k * n];
                    // dB = A^T @ dC
                    gemm(true, false, k, m, n, 1.0, av.data(), out_grad.data(), 0.0, &mut tmp);
                    let gb = self.grad_buf(b);
                    for (o, t) in gb.data_mut().iter_mut().zip(&tmp) {
                        *o += t;
                    }
                }
            }
            Op::AddRow(x, bias) => {
                let (x, bias) = (*x, *bias);
                let (n, d) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
                if self.needs(x) {
                    let gx = self.grad_buf(x);
                    for (o, g) in gx.data_mut().iter_mut().zip(out_grad.data()) {
                        *o += g;
                    }
                }
                if self.needs(bias) {
                    // column sums into a scratch row, added once, so
                    // repeated parameter uses accumulate order-independently
                    let mut tmp = vec![0.0; d];
                    for i in 0..n {
                        for j in 0..d {
                            tmp[j] += out_grad.data()[i * d + j];
                        }
                    }
                    let gb = self.grad_buf(bias);
                    for (o, t) in gb.data_mut().iter_mut().zip(&tmp) {
                        *o += t;
                    }
                }
            }
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if self.needs(id) {
                        let g = self.grad_buf(id);
                        for (o, gg) in g.data_mut().iter_mut().zip(out_grad.data()) {
                            *o += gg;
                        }
                    }
                }
            }
            Op::Scale(x, c) => {
                let (x, c) = (*x, *c);
                if self.needs(x) {
                    let g = self.grad_buf(x);
                    for (o, gg) in g.data_mut().iter_mut().zip(out_grad.data()) {
                        *o += c * gg;
                    }
                }
            }
            Op::AddScalar(x, _) => {
                let x = *x;
                if self.needs(x) {
                    let g = self.grad_buf(x);
                    for (o, gg) in g.data_mut().iter_mut().zip(out_grad.data()) {
                        *o += gg;
                    }
                }
            }
            Op::MulConst(x, factor) => {
                let x = *x;
                let factor = factor.clone();
                if self.needs(x) {
                    let g = self.grad_buf(x);
                    for ((o, gg), f) in
                        g.data_mut().iter_mut().zip(out_grad.data()).zip(factor.data())
                    {
                        *o += gg * f;
                    }
                }
            }
            Op::Relu(x) => {
                let x = *x;
                if self.needs(x) {
                    let xv = self.nodes[x.0].value.clone();
                    let g = self.grad_buf(x);
                    for ((o, gg), v) in g.data_mut().iter_mut().zip(out_grad.data()).zip(xv.data())
                    {
                        if *v > 0.0 {
                            *o += gg;
                        }
                    }
                }
            }
            Op::Softplus(x) => {
                let x = *x;
                if self.needs(x) {
                    let xv = self.nodes[x.0].value.clone();
                    let g = self.grad_buf(x);
                    for ((o, gg), v) in g.data_mut().iter_mut().zip(out_grad.data()).zip(xv.data())
                    {
                        *o += gg * sigmoid(*v);
                    }
                }
            }
            Op::Mean(x) => {
                let x = *x;
                if self.needs(x) {
                    let scale = out_grad.data()[0] / self.nodes[x.0].value.len() as f64;
                    let g = self.grad_buf(x);
                    for o in g.data_mut().iter_mut() {
                        *o += scale;
                    }
                }
            }
            Op::Sum(x) => {
                let x = *x;
                if self.needs(x) {
                    let scale = out_grad.data()[0];
                    let g = self.grad_buf(x);
                    for o in g.data_mut().iter_mut() {
                        *o += scale;
                    }
                }
            }
            Op::RepeatRows(x, m) => {
                let (x, m) = (*x, *m);
                if self.needs(x) {
                    let d = self.nodes[x.0].value.cols();
                    let n = self.nodes[x.0].value.rows();
                    let g = self.grad_buf(x);
                    for i in 0..n {
                        for rep in 0..m {
                            let src = (i * m + rep) * d;
                            for j in 0..d {
                                g.data_mut()[i * d + j] += out_grad.data()[src + j];
                            }
                        }
                    }
                }
            }
            Op::WeightedSum(terms) => {
                let terms = terms.clone();
                for (w, id) in terms {
                    if self.needs(id) {
                        let g = self.grad_buf(id);
                        for (o, gg) in g.data_mut().iter_mut().zip(out_grad.data()) {
                            *o += w * gg;
                        }
                    }
                }
            }
            Op::HalfSqDistRows { y, anchor } => {
                let y = *y;
                let anchor = anchor.clone();
                if self.needs(y) {
                    let yv = self.nodes[y.0].value.clone();
                    let (n, d) = (yv.rows(), yv.cols());
                    let g = self.grad_buf(y);
                    for i in 0..n {
                        let gi = out_grad.data()[i];
                        for j in 0..d {
                            g.data_mut()[i * d + j] +=
                                gi * (yv.data()[i * d + j] - anchor.data()[i * d + j]);
                        }
                    }
                }
            }
            Op::Twist { input, kappa } => {
                let (input, kappa) = (*input, *kappa);
                if self.needs(input) {
                    let xv = self.nodes[input.0].value.clone();
                    let out = self.nodes[i].value.clone();
                    let g = self.grad_buf(input);
                    twist_backward(&xv, &out, kappa, &out_grad, g);
                }
            }
            Op::EnergyPenalty { y, prior, groups, cond, prior_per_group, gamma, alpha } => {
                let (y, groups, cond, n0, gamma, alpha) =
                    (*y, *groups, *cond, *prior_per_group, *gamma, *alpha);
                let prior = prior.clone();
                if self.needs(y) {
                    let yv = self.nodes[y.0].value.clone();
                    let g = self.grad_buf(y);
                    energy_penalty_backward(
                        &yv,
                        &prior,
                        groups,
                        cond,
                        n0,
                        gamma,
                        alpha,
                        out_grad.data()[0],
                        g,
                    );
                }
            }
            Op::KlDiagToPrior { mu, sigma, prior_mean, prior_var } => {
                let (mu, sigma) = (*mu, *sigma);
                let (pm, pv) = (prior_mean.clone(), prior_var.clone());
                let muv = self.nodes[mu.0].value.clone();
                let sigv = self.nodes[sigma.0].value.clone();
                let (n, d) = (muv.rows(), muv.cols());
                let scale = out_grad.data()[0] / n as f64;
                if self.needs(mu) {
                    let g = self.grad_buf(mu);
                    for i in 0..n {
                        for j in 0..d {
                            g.data_mut()[i * d + j] +=
                                scale * (muv.data()[i * d + j] - pm[j]) / pv[j];
                        }
                    }
                }
                if self.needs(sigma) {
                    let g = self.grad_buf(sigma);
                    for i in 0..n {
                        for j in 0..d {
                            let s = sigv.data()[i * d + j];
                            g.data_mut()[i * d + j] += scale * (s / pv[j] - 1.0 / s);
                        }
                    }
                }
            }
        }
        self.nodes[i].grad = Some(out_grad);
    }
}

/// Plain (non-graph) twist of 2-D rows; shared by samplers and the graph op.
pub(crate) fn twist_rows(x: &Tensor, kappa: f64) -> Tensor {
    let n = x.rows();
    let mut out = x.clone();
    for i in 0..n {
        let (a, b) = (x.data()[2 * i], x.data()[2 * i + 1]);
        let r = (a * a + b * b).sqrt();
        let theta = kappa * r;
        let (s, c) = theta.sin_cos();
        out.data_mut()[2 * i] = c * a - s * b;
        out.data_mut()[2 * i + 1] = s * a + c * b;
    }
    out
}

fn twist_backward(x: &Tensor, out: &Tensor, kappa: f64, out_grad: &Tensor, grad: &mut Tensor) {
    let n = x.rows();
    for i in 0..n {
        let (a, b) = (x.data()[2 * i], x.data()[2 * i + 1]);
        let (o1, o2) = (out.data()[2 * i], out.data()[2 * i + 1]);
        let (d1, d2) = (out_grad.data()[2 * i], out_grad.data()[2 * i + 1]);
        let r = (a * a + b * b).sqrt();
        let theta = kappa * r;
        let (s, c) = theta.sin_cos();
        let (ta, tb) = if r > 1e-300 { (kappa * a / r, kappa * b / r) } else { (0.0, 0.0) };
        // J = [[c - o2*ta, -s - o2*tb], [s + o1*ta, c + o1*tb]]; accumulate J^T g.
        grad.data_mut()[2 * i] += (c - o2 * ta) * d1 + (s + o1 * ta) * d2;
        grad.data_mut()[2 * i + 1] += (-s - o2 * tb) * d1 + (c + o1 * tb) * d2;
    }
}

fn semimetric(a: &[f64], b: &[f64], alpha: f64) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += (x - y) * (x - y);
    }
    let r = acc.sqrt();
    if alpha == 1.0 {
        r
    } else {
        r.powf(alpha)
    }
}

fn energy_penalty_value(
    y: &Tensor,
    prior: &Tensor,
    groups: usize,
    cond: usize,
    n0: usize,
    gamma: f64,
    alpha: f64,
) -> f64 {
    let d = y.cols();
    let mut total = 0.0;
    for g in 0..groups {
        let mut cross = 0.0;
        for j in 0..cond {
            let yj = &y.data()[(g * cond + j) * d..(g * cond + j + 1) * d];
            for l in 0..n0 {
                let p = &prior.data()[(g * n0 + l) * d..(g * n0 + l + 1) * d];
                cross += semimetric(yj, p, alpha);
            }
        }
        let mut within = 0.0;
        for j in 0..cond {
            let yj = &y.data()[(g * cond + j) * d..(g * cond + j + 1) * d];
            for j2 in (j + 1)..cond {
                let yj2 = &y.data()[(g * cond + j2) * d..(g * cond + j2 + 1) * d];
                within += 2.0 * semimetric(yj, yj2, alpha);
            }
        }
        total += 2.0 * cross / (cond * n0) as f64
            - within / (cond * (cond - 1)) as f64;
    }
    gamma * total / groups as f64
}

/// Gradient of `||a-b||^alpha` w.r.t. `a`, written into `out` with weight `w`.
fn add_semimetric_grad(a: &[f64], b: &[f64], alpha: f64, w: f64, out: &mut [f64]) {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        acc += (x - y) * (x - y);
    }
    let r = acc.sqrt();
    if r <= 1e-300 {
        return; // subgradient 0 at coincident points
    }
    let coeff = w * alpha * r.powf(alpha - 2.0);
    for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
        *o += coeff * (x - y);
    }
}

#[allow(clippy::too_many_arguments)]
fn energy_penalty_backward(
    y: &Tensor,
    prior: &Tensor,
    groups: usize,
    cond: usize,
    n0: usize,
    gamma: f64,
    alpha: f64,
    upstream: f64,
    grad: &mut Tensor,
) {
    let d = y.cols();
    let base = upstream * gamma / groups as f64;
    let w_cross = base * 2.0 / (cond * n0) as f64;
    let w_within = base / (cond * (cond - 1)) as f64;
    for g in 0..groups {
        for j in 0..cond {
            let row = (g * cond + j) * d;
            let yj = y.data()[row..row + d].to_vec();
            let gj = &mut grad.data_mut()[row..row + d];
            for l in 0..n0 {
                let p = &prior.data()[(g * n0 + l) * d..(g * n0 + l + 1) * d];
                add_semimetric_grad(&yj, p, alpha, w_cross, gj);
            }
        }
        for j in 0..cond {
            let row = (g * cond + j) * d;
            let yj = y.data()[row..row + d].to_vec();
            for j2 in 0..cond {
                if j2 == j {
                    continue;
                }
                let y2 = row_vec(y, g * cond + j2, d);
                let gj = &mut grad.data_mut()[row..row + d];
                // each unordered pair appears twice in the ordered sum
                add_semimetric_grad(&yj, &y2, alpha, -2.0 * w_within, gj);
            }
        }
    }
}

fn row_vec(t: &Tensor, i: usize, d: usize) -> Vec<f64> {
    t.data()[i * d..(i + 1) * d].to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::finite_diff_grad;

    #[test]
    fn quadratic_gradient() {
        // f(x) = 0.5 * ||x||^2 at x = (3, 4) has gradient (3, 4).
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap());
        let zero = Tensor::zeros(&[1, 2]);
        let rows = g.half_sq_dist_rows(x, &zero).unwrap();
        let root = g.sum(rows);
        assert_eq!(g.value(root).scalar_value().unwrap(), 12.5);
        g.backward(root).unwrap();
        assert_eq!(g.grad(x).data(), &[3.0, 4.0]);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let c = g.leaf(Tensor::scalar(7.0));
        let root = g.sum(c);
        g.backward(root).unwrap();
        assert_eq!(g.grad(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(2, 2, vec![1.0; 4]).unwrap());
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn gradient_of_sum_is_sum_of_gradients() {
        // Linearity: backward through a + b equals separate backward passes.
        let xv = Tensor::matrix(1, 3, vec![0.3, -1.2, 2.0]).unwrap();
        let run = |combined: bool| -> Vec<f64> {
            let mut g = Graph::new();
            let x = g.leaf(xv.clone());
            let a_anchor = Tensor::matrix(1, 3, vec![1.0, 1.0, 1.0]).unwrap();
            let b_anchor = Tensor::matrix(1, 3, vec![-2.0, 0.5, 0.0]).unwrap();
            let fa = g.half_sq_dist_rows(x, &a_anchor).unwrap();
            let fa = g.sum(fa);
            let fb = g.half_sq_dist_rows(x, &b_anchor).unwrap();
            let fb = g.sum(fb);
            if combined {
                let root = g.add(fa, fb).unwrap();
                g.backward(root).unwrap();
                g.grad(x).data().to_vec()
            } else {
                g.backward(fa).unwrap();
                let ga = g.grad(x).data().to_vec();
                g.backward(fb).unwrap();
                let gb = g.grad(x).data().to_vec();
                ga.iter().zip(&gb).map(|(a, b)| a + b).collect()
            }
        };
        let combined = run(true);
        let separate = run(false);
        for (c, s) in combined.iter().zip(&separate) {
            assert!((c - s).abs() <= 1e-12);
        }
    }

    fn fd_check_scalar_fn(
        build: impl Fn(&mut Graph, NodeId) -> NodeId,
        x0: &Tensor,
        tol: f64,
    ) {
        let mut g = Graph::new();
        let x = g.leaf(x0.clone());
        let root = build(&mut g, x);
        g.backward(root).unwrap();
        let analytic = g.grad(x);

        let numeric = finite_diff_grad(
            |t| {
                let mut g = Graph::new();
                let x = g.leaf(t.clone());
                let root = build(&mut g, x);
                g.value(root).scalar_value().unwrap()
            },
            x0,
            1e-5,
        );
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            let denom = 1.0_f64.max(a.abs()).max(n.abs());
            assert!(
                (a - n).abs() / denom <= tol,
                "analytic {a} vs numeric {n}"
            );
        }
    }

    #[test]
    fn twist_matches_finite_differences() {
        let x0 = Tensor::matrix(3, 2, vec![1.0, 0.3, -0.7, 1.1, 0.01, -0.02]).unwrap();
        fd_check_scalar_fn(
            |g, x| {
                let t = g.twist(x, 0.8).unwrap();
                let anchor = Tensor::matrix(3, 2, vec![0.5; 6]).unwrap();
                let c = g.half_sq_dist_rows(t, &anchor).unwrap();
                g.mean(c)
            },
            &x0,
            1e-6,
        );
    }

    #[test]
    fn energy_penalty_matches_finite_differences() {
        let y0 = Tensor::matrix(6, 2, vec![0.1, 0.5, -0.3, 0.2, 1.0, -1.0, 0.7, 0.7, -0.2, 0.4, 0.0, 1.3])
            .unwrap();
        let prior =
            Tensor::matrix(4, 2, vec![0.3, 0.3, -0.5, 0.1, 0.9, -0.2, 0.2, 0.8]).unwrap();
        for alpha in [1.0, 1.5, 2.0] {
            fd_check_scalar_fn(
                |g, y| g.energy_penalty(y, &prior, 2, 3, 2, 0.7, alpha).unwrap(),
                &y0,
                1e-5,
            );
        }
    }

    #[test]
    fn kl_op_matches_finite_differences() {
        let mu0 = Tensor::matrix(2, 2, vec![0.4, -0.3, 1.2, 0.0]).unwrap();
        let sig0 = Tensor::matrix(2, 2, vec![0.9, 1.4, 0.5, 2.0]).unwrap();
        let prior_mean = [0.1, -0.2];
        let prior_var = [1.0, 0.6];

        // gradient w.r.t. mu
        let mut g = Graph::new();
        let mu = g.leaf(mu0.clone());
        let sig = g.constant(sig0.clone());
        let root = g.kl_diag_to_prior(mu, sig, &prior_mean, &prior_var).unwrap();
        g.backward(root).unwrap();
        let analytic = g.grad(mu);
        let numeric = finite_diff_grad(
            |t| {
                let mut g = Graph::new();
                let mu = g.leaf(t.clone());
                let sig = g.constant(sig0.clone());
                let root = g.kl_diag_to_prior(mu, sig, &prior_mean, &prior_var).unwrap();
                g.value(root).scalar_value().unwrap()
            },
            &mu0,
            1e-5,
        );
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            assert!((a - n).abs() <= 1e-6 * 1.0_f64.max(n.abs()));
        }

        // gradient w.r.t. sigma
        let mut g = Graph::new();
        let mu = g.constant(mu0.clone());
        let sig = g.leaf(sig0.clone());
        let root = g.kl_diag_to_prior(mu, sig, &prior_mean, &prior_var).unwrap();
        g.backward(root).unwrap();
        let analytic = g.grad(sig);
        let numeric = finite_diff_grad(
            |t| {
                let mut g = Graph::new();
                let mu = g.constant(mu0.clone());
                let sig = g.leaf(t.clone());
                let root = g.kl_diag_to_prior(mu, sig, &prior_mean, &prior_var).unwrap();
                g.value(root).scalar_value().unwrap()
            },
            &sig0,
            1e-5,
        );
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            assert!((a - n).abs() <= 1e-6 * 1.0_f64.max(n.abs()));
        }
    }

    #[test]
    fn matmul_and_activations_match_finite_differences() {
        let w0 = Tensor::matrix(3, 2, vec![0.5, -0.2, 0.8, 0.1, -0.6, 0.4]).unwrap();
        let x = Tensor::matrix(2, 3, vec![1.0, -0.5, 0.25, 0.3, 0.9, -1.1]).unwrap();
        fd_check_scalar_fn(
            |g, w| {
                let xc = g.constant(x.clone());
                let h = g.matmul(xc, w).unwrap();
                let h = g.softplus(h);
                let h = g.relu(h);
                g.mean(h)
            },
            &w0,
            1e-6,
        );
    }

    #[test]
    fn repeat_rows_gradient_sums_groups() {
        let x0 = Tensor::matrix(2, 2, vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let factor = Tensor::matrix(6, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(x0);
        let r = g.repeat_rows(x, 3).unwrap();
        let p = g.mul_const(r, &factor).unwrap();
        let root = g.sum(p);
        g.backward(root).unwrap();
        // gradient of each source row is the sum of its three replicas' factors
        assert_eq!(g.grad(x).data(), &[1.0 + 3.0 + 5.0, 2.0 + 4.0 + 6.0, 7.0 + 9.0 + 11.0, 8.0 + 10.0 + 12.0]);
    }
}
