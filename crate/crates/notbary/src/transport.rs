//! Transport-plan parameterizations and the congruent potential bank.
//!
//! A plan is represented by a map that turns an input point (plus optional
//! auxiliary noise) into conditional samples. Three parameterizations are
//! supported: deterministic maps, noise-conditioned stochastic maps, and a
//! conditional Gaussian model whose scale head goes through a softplus with
//! a `1e-6` floor.
//!
//! Potentials come in banks of `K` scalar networks `g_k` combined as
//! `f_k = g_k - sum_j w_j g_j`, which makes the weighted sum
//! `sum_k w_k f_k` vanish identically.

use crate::diffmath::{Graph, MlpBinding, MlpParams, NodeId, Tensor};
use crate::distributions::Sampler;
use crate::{Error, Result};

/// Floor added to the softplus scale head so conditional deviations stay
/// strictly positive.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// One of the three transport-plan parameterizations.
#[derive(Debug, Clone)]
pub enum PlanModel {
    /// `y = T(x)`
    Deterministic { net: MlpParams },
    /// `y = T(x, s)` with auxiliary noise `s`
    Stochastic { net: MlpParams, noise_dim: usize },
    /// `y = mu(x) + sigma(x) * s`, a conditional Gaussian
    Gaussian { mean_net: MlpParams, scale_net: MlpParams },
}

/// Graph bindings for one model's networks.
pub struct ModelBinding {
    nets: Vec<MlpBinding>,
}

/// Result of a model forward pass.
pub struct ModelForward {
    /// Conditional samples, `m` per input row, grouped: `[n * m, d]`.
    pub y: NodeId,
    /// `(mu, sigma)` nodes (each `[n, d]`) when the model is Gaussian.
    pub gaussian_heads: Option<(NodeId, NodeId)>,
}

impl PlanModel {
    pub fn deterministic(net: MlpParams) -> Self {
        PlanModel::Deterministic { net }
    }

    pub fn stochastic(net: MlpParams, noise_dim: usize) -> Result<Self> {
        if noise_dim == 0 {
            return Err(Error::contract("stochastic maps need a positive noise dimension"));
        }
        Ok(PlanModel::Stochastic { net, noise_dim })
    }

    pub fn gaussian(mean_net: MlpParams, scale_net: MlpParams) -> Result<Self> {
        if mean_net.input_dim() != scale_net.input_dim()
            || mean_net.output_dim() != scale_net.output_dim()
        {
            return Err(Error::contract(
                "mean and scale networks must share input and output dimensions",
            ));
        }
        Ok(PlanModel::Gaussian { mean_net, scale_net })
    }

    /// Dimension of the input points `x`.
    pub fn input_dim(&self) -> usize {
        match self {
            PlanModel::Deterministic { net } => net.input_dim(),
            PlanModel::Stochastic { net, noise_dim } => net.input_dim() - noise_dim,
            PlanModel::Gaussian { mean_net, .. } => mean_net.input_dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            PlanModel::Deterministic { net } => net.output_dim(),
            PlanModel::Stochastic { net, .. } => net.output_dim(),
            PlanModel::Gaussian { mean_net, .. } => mean_net.output_dim(),
        }
    }

    /// Rows of auxiliary noise required per conditional sample; zero for
    /// deterministic maps.
    pub fn noise_dim(&self) -> usize {
        match self {
            PlanModel::Deterministic { .. } => 0,
            PlanModel::Stochastic { noise_dim, .. } => *noise_dim,
            PlanModel::Gaussian { mean_net, .. } => mean_net.output_dim(),
        }
    }

    pub fn is_deterministic(&self) -> bool {
        matches!(self, PlanModel::Deterministic { .. })
    }

    pub fn bind(&self, g: &mut Graph) -> ModelBinding {
        let nets = match self {
            PlanModel::Deterministic { net } | PlanModel::Stochastic { net, .. } => {
                vec![net.bind(g)]
            }
            PlanModel::Gaussian { mean_net, scale_net } => {
                vec![mean_net.bind(g), scale_net.bind(g)]
            }
        };
        ModelBinding { nets }
    }

    /// Forward pass producing `m` conditional samples per input row.
    ///
    /// `noise` must be `[n * m, noise_dim]` for stochastic and Gaussian
    /// models and is ignored by deterministic maps.
    pub fn forward(
        &self,
        g: &mut Graph,
        binding: &ModelBinding,
        x: &Tensor,
        noise: Option<&Tensor>,
        m: usize,
    ) -> Result<ModelForward> {
        if m == 0 {
            return Err(Error::contract("need at least one conditional sample"));
        }
        let n = x.rows();
        match self {
            PlanModel::Deterministic { net } => {
                let xn = g.constant(x.clone());
                let y = net.forward(g, &binding.nets[0], xn)?;
                let y = if m > 1 { g.repeat_rows(y, m)? } else { y };
                Ok(ModelForward { y, gaussian_heads: None })
            }
            PlanModel::Stochastic { net, noise_dim } => {
                let noise = noise.ok_or_else(|| {
                    Error::contract("stochastic map requires an auxiliary noise batch")
                })?;
                if noise.rows() != n * m || noise.cols() != *noise_dim {
                    return Err(Error::ShapeMismatch {
                        context: "PlanModel::forward",
                        detail: format!(
                            "noise {:?} vs {n} inputs x {m} samples x dim {noise_dim}",
                            noise.shape()
                        ),
                    });
                }
                let input = x.repeat_rows(m)?.concat_cols(noise)?;
                let xn = g.constant(input);
                let y = net.forward(g, &binding.nets[0], xn)?;
                Ok(ModelForward { y, gaussian_heads: None })
            }
            PlanModel::Gaussian { mean_net, scale_net } => {
                let noise = noise.ok_or_else(|| {
                    Error::contract("gaussian model requires an auxiliary noise batch")
                })?;
                let d = mean_net.output_dim();
                if noise.rows() != n * m || noise.cols() != d {
                    return Err(Error::ShapeMismatch {
                        context: "PlanModel::forward",
                        detail: format!(
                            "noise {:?} vs {n} inputs x {m} samples x dim {d}",
                            noise.shape()
                        ),
                    });
                }
                let xn = g.constant(x.clone());
                let mu = mean_net.forward(g, &binding.nets[0], xn)?;
                let raw = scale_net.forward(g, &binding.nets[1], xn)?;
                let sp = g.softplus(raw);
                let sigma = g.add_scalar(sp, SIGMA_FLOOR);
                let mu_rep = g.repeat_rows(mu, m)?;
                let sigma_rep = g.repeat_rows(sigma, m)?;
                let scaled = g.mul_const(sigma_rep, noise)?;
                let y = g.add(mu_rep, scaled)?;
                Ok(ModelForward { y, gaussian_heads: Some((mu, sigma)) })
            }
        }
    }

    /// Detached evaluation with the same kernels as [`PlanModel::forward`],
    /// so values agree bitwise.
    pub fn eval(&self, x: &Tensor, noise: Option<&Tensor>, m: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let binding = self.bind(&mut g);
        let fwd = self.forward(&mut g, &binding, x, noise, m)?;
        Ok(g.value(fwd.y).clone())
    }

    /// Conditional mean and deviation of the Gaussian model at `x`.
    pub fn gaussian_heads_eval(&self, x: &Tensor) -> Result<Option<(Tensor, Tensor)>> {
        match self {
            PlanModel::Gaussian { mean_net, scale_net } => {
                let mu = mean_net.eval(x)?;
                let mut sigma = scale_net.eval(x)?.softplus();
                for v in sigma.data_mut().iter_mut() {
                    *v += SIGMA_FLOOR;
                }
                Ok(Some((mu, sigma)))
            }
            _ => Ok(None),
        }
    }

    pub fn param_tensors(&self) -> Vec<&Tensor> {
        match self {
            PlanModel::Deterministic { net } | PlanModel::Stochastic { net, .. } => {
                net.param_tensors()
            }
            PlanModel::Gaussian { mean_net, scale_net } => {
                let mut p = mean_net.param_tensors();
                p.extend(scale_net.param_tensors());
                p
            }
        }
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            PlanModel::Deterministic { net } | PlanModel::Stochastic { net, .. } => {
                net.param_tensors_mut()
            }
            PlanModel::Gaussian { mean_net, scale_net } => {
                let mut p = mean_net.param_tensors_mut();
                p.extend(scale_net.param_tensors_mut());
                p
            }
        }
    }

    pub fn collect_grads(&self, g: &Graph, binding: &ModelBinding) -> Vec<Tensor> {
        match self {
            PlanModel::Deterministic { net } | PlanModel::Stochastic { net, .. } => {
                net.collect_grads(g, &binding.nets[0])
            }
            PlanModel::Gaussian { mean_net, scale_net } => {
                let mut v = mean_net.collect_grads(g, &binding.nets[0]);
                v.extend(scale_net.collect_grads(g, &binding.nets[1]));
                v
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.param_tensors().iter().all(|t| t.all_finite())
    }
}

/// Draws `n` inputs from `p` and `m` conditional outputs per input.
/// Deterministic maps replicate their single output `m` times.
pub fn sample_plan(
    model: &PlanModel,
    p: &mut Sampler,
    noise: &mut Sampler,
    n: usize,
    m: usize,
) -> Result<(Tensor, Tensor)> {
    if n == 0 || m == 0 {
        return Err(Error::contract("sample_plan needs n >= 1 and m >= 1"));
    }
    let xs = p.sample(n)?;
    let ys = if model.noise_dim() == 0 {
        model.eval(&xs, None, m)?
    } else {
        let s = noise.sample(n * m)?;
        model.eval(&xs, Some(&s), m)?
    };
    Ok((xs, ys))
}

/// `K` scalar networks combined into congruent potentials
/// `f_k = g_k - sum_j w_j g_j`.
#[derive(Debug, Clone)]
pub struct PotentialBank {
    pub nets: Vec<MlpParams>,
    pub weights: Vec<f64>,
}

/// Graph bindings for every network in a bank.
pub struct BankBinding {
    nets: Vec<MlpBinding>,
}

impl PotentialBank {
    pub fn new(nets: Vec<MlpParams>, weights: Vec<f64>) -> Result<Self> {
        if nets.is_empty() || nets.len() != weights.len() {
            return Err(Error::contract(format!(
                "{} potential networks vs {} weights",
                nets.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|&w| w <= 0.0) {
            return Err(Error::contract("potential weights must be positive"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::contract(format!("weights sum to {total}, expected 1")));
        }
        let dim = nets[0].input_dim();
        for net in &nets {
            if net.input_dim() != dim || net.output_dim() != 1 {
                return Err(Error::contract(
                    "potential networks must share the input dimension and output one scalar",
                ));
            }
        }
        Ok(PotentialBank { nets, weights })
    }

    pub fn k(&self) -> usize {
        self.nets.len()
    }

    pub fn bind(&self, g: &mut Graph) -> BankBinding {
        BankBinding { nets: self.nets.iter().map(|n| n.bind(g)).collect() }
    }

    /// Evaluates every raw network on the same points: `g_j(y)`, each
    /// `[n, 1]`.
    pub fn eval_raw_all(
        &self,
        g: &mut Graph,
        binding: &BankBinding,
        y: NodeId,
    ) -> Result<Vec<NodeId>> {
        self.nets
            .iter()
            .zip(&binding.nets)
            .map(|(net, b)| net.forward(g, b, y))
            .collect()
    }

    /// The weighted mixture `sum_j w_j g_j` shared by every congruent
    /// potential.
    pub fn mixture(&self, g: &mut Graph, raw: &[NodeId]) -> Result<NodeId> {
        if raw.len() != self.k() {
            return Err(Error::contract(format!(
                "{} raw evaluations for a bank of {}",
                raw.len(),
                self.k()
            )));
        }
        let terms: Vec<(f64, NodeId)> =
            self.weights.iter().copied().zip(raw.iter().copied()).collect();
        g.weighted_sum(&terms)
    }

    /// Combines raw evaluations into the congruent potential
    /// `f_k = g_k - sum_j w_j g_j`.
    pub fn combine(&self, g: &mut Graph, raw: &[NodeId], k: usize) -> Result<NodeId> {
        if k >= self.k() {
            return Err(Error::contract(format!("potential index {k} out of range")));
        }
        let mix = self.mixture(g, raw)?;
        g.weighted_sum(&[(1.0, raw[k]), (-1.0, mix)])
    }

    /// `f_k` evaluated on a batch of points: `[n, 1]`.
    pub fn potential_eval(
        &self,
        g: &mut Graph,
        binding: &BankBinding,
        k: usize,
        y: NodeId,
    ) -> Result<NodeId> {
        if k >= self.k() {
            return Err(Error::contract(format!("potential index {k} out of range")));
        }
        let raw = self.eval_raw_all(g, binding, y)?;
        self.combine(g, &raw, k)
    }

    pub fn param_tensors(&self) -> Vec<&Tensor> {
        self.nets.iter().flat_map(|n| n.param_tensors()).collect()
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.nets.iter_mut().flat_map(|n| n.param_tensors_mut()).collect()
    }

    pub fn collect_grads(&self, g: &Graph, binding: &BankBinding) -> Vec<Tensor> {
        self.nets
            .iter()
            .zip(&binding.nets)
            .flat_map(|(n, b)| n.collect_grads(g, b))
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.param_tensors().iter().all(|t| t.all_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::{finite_diff_grad, Activation};
    use crate::distributions::{stream_rng, GaussianDist, SamplerKind};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn softplus_inv(y: f64) -> f64 {
        (y.exp() - 1.0).ln()
    }

    fn constant_net(input_dim: usize, value: f64) -> MlpParams {
        let mut net = MlpParams::zeros(input_dim, &[], 1);
        net.layers[0].bias.data_mut()[0] = value;
        net
    }

    #[test]
    fn gaussian_model_with_zero_noise_returns_mean() {
        let mut rng = stream_rng(8, 0);
        let mean_net = MlpParams::init(2, &[8], 2, Activation::Linear, &mut rng);
        let scale_net = MlpParams::init(2, &[8], 2, Activation::Linear, &mut rng);
        let model = PlanModel::gaussian(mean_net.clone(), scale_net).unwrap();
        let x = Tensor::matrix(3, 2, vec![0.5, -0.5, 1.0, 0.0, -1.0, 2.0]).unwrap();
        let zeros = Tensor::zeros(&[3, 2]);
        let y = model.eval(&x, Some(&zeros), 1).unwrap();
        let mu = mean_net.eval(&x).unwrap();
        assert_eq!(y.data(), mu.data());
    }

    #[test]
    fn deterministic_ignores_noise() {
        let mut rng = stream_rng(9, 0);
        let net = MlpParams::init(2, &[8], 2, Activation::Linear, &mut rng);
        let model = PlanModel::deterministic(net);
        let x = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y1 = model.eval(&x, None, 1).unwrap();
        let y2 = model.eval(&x, Some(&Tensor::zeros(&[2, 2])), 1).unwrap();
        assert_eq!(y1.data(), y2.data());
    }

    #[test]
    fn gaussian_model_affine_formula() {
        // mu(x) = 2, sigma(x) = 3, s = 1 -> y = 5
        let mean_net = constant_net(1, 2.0);
        let scale_net = constant_net(1, softplus_inv(3.0 - SIGMA_FLOOR));
        let model = PlanModel::gaussian(mean_net, scale_net).unwrap();
        let x = Tensor::matrix(1, 1, vec![0.3]).unwrap();
        let s = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let y = model.eval(&x, Some(&s), 1).unwrap();
        assert!((y.data()[0] - 5.0).abs() < 1e-9);
    }

    #[test]
    fn potential_bank_constant_nets() {
        let bank = PotentialBank::new(
            vec![constant_net(2, 1.0), constant_net(2, 0.0)],
            vec![0.5, 0.5],
        )
        .unwrap();
        let mut g = Graph::new();
        let binding = bank.bind(&mut g);
        let y = g.constant(Tensor::matrix(3, 2, vec![0.0; 6]).unwrap());
        let f1 = bank.potential_eval(&mut g, &binding, 0, y).unwrap();
        let f2 = bank.potential_eval(&mut g, &binding, 1, y).unwrap();
        for i in 0..3 {
            assert_eq!(g.value(f1).data()[i], 0.5);
            assert_eq!(g.value(f2).data()[i], -0.5);
            assert_eq!(
                0.5 * g.value(f1).data()[i] + 0.5 * g.value(f2).data()[i],
                0.0
            );
        }
    }

    #[test]
    fn identical_nets_collapse_to_zero() {
        let mut rng = stream_rng(10, 0);
        let net = MlpParams::init(2, &[8], 1, Activation::Linear, &mut rng);
        let bank = PotentialBank::new(vec![net.clone(), net], vec![0.5, 0.5]).unwrap();
        let mut g = Graph::new();
        let binding = bank.bind(&mut g);
        let y = g.constant(Tensor::matrix(4, 2, vec![0.3; 8]).unwrap());
        for k in 0..2 {
            let f = bank.potential_eval(&mut g, &binding, k, y).unwrap();
            for v in g.value(f).data() {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn congruence_holds_for_random_banks() {
        let mut rng = stream_rng(11, 0);
        for trial in 0..20 {
            let k = 2 + trial % 3;
            let raw: Vec<f64> = (0..k).map(|_| 0.2 + rng.random::<f64>()).collect();
            let total: f64 = raw.iter().sum();
            let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
            let nets: Vec<MlpParams> = (0..k)
                .map(|_| MlpParams::init(2, &[16, 16], 1, Activation::Linear, &mut rng))
                .collect();
            let bank = PotentialBank::new(nets, weights.clone()).unwrap();
            let mut g = Graph::new();
            let binding = bank.bind(&mut g);
            let mut ys = Tensor::zeros(&[50, 2]);
            for v in ys.data_mut().iter_mut() {
                *v = 3.0 * rng.sample::<f64, _>(StandardNormal);
            }
            let yn = g.constant(ys);
            let raw_nodes = bank.eval_raw_all(&mut g, &binding, yn).unwrap();
            let fs: Vec<NodeId> = (0..k)
                .map(|kk| bank.combine(&mut g, &raw_nodes, kk).unwrap())
                .collect();
            for i in 0..50 {
                let total: f64 =
                    fs.iter().zip(&weights).map(|(f, w)| w * g.value(*f).data()[i]).sum();
                assert!(total.abs() <= 1e-12, "congruence violation {total}");
            }
        }
    }

    #[test]
    fn potential_eval_rejects_out_of_range() {
        let bank =
            PotentialBank::new(vec![constant_net(2, 0.0), constant_net(2, 0.0)], vec![0.5, 0.5])
                .unwrap();
        let mut g = Graph::new();
        let binding = bank.bind(&mut g);
        let y = g.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        assert!(bank.potential_eval(&mut g, &binding, 2, y).is_err());
    }

    #[test]
    fn sample_plan_deterministic_replicates() {
        let mut rng = stream_rng(12, 0);
        let net = MlpParams::init(1, &[8], 1, Activation::Linear, &mut rng);
        let model = PlanModel::deterministic(net);
        let g = GaussianDist::isotropic(vec![0.0], 1.0).unwrap();
        let mut p = Sampler::new(SamplerKind::Gaussian(g.clone()), 3, 0).unwrap();
        let mut s = Sampler::new(SamplerKind::Gaussian(g), 3, 1).unwrap();
        let (xs, ys) = sample_plan(&model, &mut p, &mut s, 4, 5).unwrap();
        assert_eq!(xs.shape(), &[4, 1]);
        assert_eq!(ys.shape(), &[20, 1]);
        for i in 0..4 {
            for j in 1..5 {
                assert_eq!(ys.data()[i * 5 + j], ys.data()[i * 5]);
            }
        }
    }

    #[test]
    fn sample_plan_gaussian_conditional_std() {
        // sigma fixed at 0.1: conditional std per coordinate within 5%
        let mean_net = constant_net(1, 0.0);
        let scale_net = constant_net(1, softplus_inv(0.1 - SIGMA_FLOOR));
        let model = PlanModel::gaussian(mean_net, scale_net).unwrap();
        let g = GaussianDist::isotropic(vec![0.0], 1.0).unwrap();
        let mut p = Sampler::new(SamplerKind::Gaussian(g.clone()), 5, 0).unwrap();
        let mut s = Sampler::new(SamplerKind::Gaussian(g), 5, 1).unwrap();
        let m = 10_000;
        let (_, ys) = sample_plan(&model, &mut p, &mut s, 1, m).unwrap();
        let mean: f64 = ys.data().iter().sum::<f64>() / m as f64;
        let var: f64 =
            ys.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1) as f64;
        let std = var.sqrt();
        assert!((std - 0.1).abs() / 0.1 < 0.05, "std {std}");
    }

    #[test]
    fn sample_plan_reproducible() {
        let mut rng = stream_rng(13, 0);
        let net = MlpParams::init(3, &[8], 2, Activation::Linear, &mut rng);
        let model = PlanModel::stochastic(net, 1).unwrap();
        let g = GaussianDist::isotropic(vec![0.0, 0.0], 1.0).unwrap();
        let noise_dist = GaussianDist::isotropic(vec![0.0], 1.0).unwrap();
        let draw = || {
            let mut p = Sampler::new(SamplerKind::Gaussian(g.clone()), 9, 0).unwrap();
            let mut s = Sampler::new(SamplerKind::Gaussian(noise_dist.clone()), 9, 1).unwrap();
            sample_plan(&model, &mut p, &mut s, 6, 3).unwrap()
        };
        let (x1, y1) = draw();
        let (x2, y2) = draw();
        assert_eq!(x1.data(), x2.data());
        assert_eq!(y1.data(), y2.data());
    }

    #[test]
    fn map_and_potential_gradients_match_finite_differences() {
        let mut rng = stream_rng(14, 0);
        let x = Tensor::matrix(3, 2, vec![0.2, 0.4, -0.5, 1.0, 0.8, -0.3]).unwrap();

        // deterministic map parameters
        let net = MlpParams::init(2, &[6], 2, Activation::Linear, &mut rng);
        let model = PlanModel::deterministic(net.clone());
        let anchor = Tensor::matrix(3, 2, vec![0.1; 6]).unwrap();

        let loss_of = |params: &MlpParams| -> f64 {
            let m = PlanModel::deterministic(params.clone());
            let y = m.eval(&x, None, 1).unwrap();
            let mut acc = 0.0;
            for i in 0..3 {
                for j in 0..2 {
                    let d = y.data()[i * 2 + j] - anchor.data()[i * 2 + j];
                    acc += 0.5 * d * d;
                }
            }
            acc / 3.0
        };

        let flat: Vec<f64> =
            net.param_tensors().iter().flat_map(|t| t.data().iter().copied()).collect();
        let flat = Tensor::from_vec(flat);
        let numeric = finite_diff_grad(
            |f| {
                let mut p = net.clone();
                let mut off = 0;
                for t in p.param_tensors_mut() {
                    let len = t.len();
                    t.data_mut().copy_from_slice(&f.data()[off..off + len]);
                    off += len;
                }
                loss_of(&p)
            },
            &flat,
            1e-5,
        );

        let mut g = Graph::new();
        let binding = model.bind(&mut g);
        let fwd = model.forward(&mut g, &binding, &x, None, 1).unwrap();
        let rows = g.half_sq_dist_rows(fwd.y, &anchor).unwrap();
        let root = g.mean(rows);
        g.backward(root).unwrap();
        let analytic: Vec<f64> = model
            .collect_grads(&g, &binding)
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect();
        for (a, n) in analytic.iter().zip(numeric.data()) {
            assert!((a - n).abs() / 1.0_f64.max(n.abs()) <= 1e-4, "{a} vs {n}");
        }

        // potential parameters through f_k
        let nets: Vec<MlpParams> = (0..2)
            .map(|_| MlpParams::init(2, &[6], 1, Activation::Linear, &mut rng))
            .collect();
        let bank = PotentialBank::new(nets.clone(), vec![0.5, 0.5]).unwrap();
        let ys = Tensor::matrix(4, 2, vec![0.3, -0.2, 0.9, 0.1, -0.4, 0.5, 0.0, 1.2]).unwrap();

        let flat: Vec<f64> =
            bank.param_tensors().iter().flat_map(|t| t.data().iter().copied()).collect();
        let flat = Tensor::from_vec(flat);
        let numeric = finite_diff_grad(
            |f| {
                let mut b = bank.clone();
                let mut off = 0;
                for t in b.param_tensors_mut() {
                    let len = t.len();
                    t.data_mut().copy_from_slice(&f.data()[off..off + len]);
                    off += len;
                }
                let mut g = Graph::new();
                let binding = b.bind(&mut g);
                let yn = g.constant(ys.clone());
                let fk = b.potential_eval(&mut g, &binding, 0, yn).unwrap();
                let root = g.mean(fk);
                g.value(root).scalar_value().unwrap()
            },
            &flat,
            1e-5,
        );
        let mut g = Graph::new();
        let binding = bank.bind(&mut g);
        let yn = g.constant(ys);
        let fk = bank.potential_eval(&mut g, &binding, 0, yn).unwrap();
        let root = g.mean(fk);
        g.backward(root).unwrap();
        let analytic: Vec<f64> = bank
            .collect_grads(&g, &binding)
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect();
        for (a, n) in analytic.iter().zip(numeric.data()) {
            assert!((a - n).abs() / 1.0_f64.max(n.abs()) <= 1e-4, "{a} vs {n}");
        }
    }
}
