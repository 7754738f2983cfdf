//! Stochastic ascent-descent training of barycenter transport maps against
//! congruent potentials, plus the duality-gap diagnostic.
//!
//! Each epoch performs one ascent step on the potentials followed by
//! `inner_steps` descent steps on the maps. The potential objective is
//!
//! `V_f = sum_k w_k mean[ f_k(T_k(x, s)) ]`
//!
//! with the maps held constant; ascending the outer max-min objective means
//! descending `V_f` in the potential parameters, since the objective carries
//! `-f_k(T_k(...))`. The map objective is
//!
//! `V_T = sum_k w_k { C_hat_k - mean[ f_k(T_k(x, s)) ] }`
//!
//! descended in the map parameters with the potentials held constant. Fresh
//! batches are drawn for every step, including each inner step.

use crate::costs::WeakCostSpec;
use crate::diffmath::{
    adam_step, AdamHyper, AdamState, Graph, MlpParams, NodeId, Tensor,
};
use crate::distributions::{streams, Sampler};
use crate::transport::{BankBinding, ModelForward, PlanModel, PotentialBank};
use crate::{Error, Result};

/// One reference distribution with its weight and weak transport cost.
#[derive(Debug, Clone)]
pub struct RefComponent {
    pub sampler: Sampler,
    pub weight: f64,
    pub cost: WeakCostSpec,
}

/// The barycenter problem: `K` weighted references with weak costs, plus
/// the auxiliary noise distribution for stochastic maps.
#[derive(Debug, Clone)]
pub struct BarycenterProblem {
    pub components: Vec<RefComponent>,
    /// Template for auxiliary noise; training forks one stream per
    /// component from it.
    pub aux_noise: Sampler,
    /// Dimension of the barycenter space.
    pub target_dim: usize,
}

impl BarycenterProblem {
    pub fn new(
        components: Vec<RefComponent>,
        aux_noise: Sampler,
        target_dim: usize,
    ) -> Result<Self> {
        if components.len() < 2 {
            return Err(Error::contract("barycenter problem needs at least 2 references"));
        }
        if components.iter().any(|c| c.weight <= 0.0) {
            return Err(Error::contract("barycenter weights must be positive"));
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::contract(format!("weights sum to {total}, expected 1")));
        }
        for (k, c) in components.iter().enumerate() {
            let needs = match &c.cost {
                WeakCostSpec::Energy { prior, .. } => prior.dim() == target_dim,
                WeakCostSpec::Kl { prior, .. } => prior.dim() == target_dim,
                WeakCostSpec::Classical { .. } => true,
            };
            if !needs {
                return Err(Error::contract(format!(
                    "component {k}: prior dimension does not match target dim {target_dim}"
                )));
            }
        }
        Ok(BarycenterProblem { components, aux_noise, target_dim })
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }
}

/// Which transport-plan parameterization to train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Deterministic,
    Stochastic,
    Gaussian,
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Rows drawn from each reference per step.
    pub batch_size: usize,
    /// Map-descent steps per potential-ascent step.
    pub inner_steps: usize,
    /// Conditional samples per input for stochastic and Gaussian models.
    pub cond_batch: usize,
    /// Prior samples per input for energy costs.
    pub prior_batch: usize,
    pub lr_potential: f64,
    pub lr_map: f64,
    pub epochs: u64,
    pub seed: u64,
    pub hidden_layers: Vec<usize>,
    pub model_kind: ModelKind,
    /// Auxiliary noise dimension for stochastic maps; defaults to the
    /// target dimension.
    pub noise_dim: Option<usize>,
    /// Fraction of the final epochs over which map parameters are
    /// uniformly averaged (0 disables). The ascent-descent game orbits its
    /// saddle point instead of stopping on it; the averaged iterate sits at
    /// the orbit's center.
    pub average_tail: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0
            || self.inner_steps == 0
            || self.cond_batch == 0
            || self.prior_batch == 0
        {
            return Err(Error::contract("all batch and step counts must be at least 1"));
        }
        if self.lr_potential <= 0.0 || self.lr_map <= 0.0 {
            return Err(Error::contract("learning rates must be positive"));
        }
        if !(0.0..=1.0).contains(&self.average_tail) {
            return Err(Error::contract("average_tail must lie in [0, 1]"));
        }
        Ok(())
    }

    /// First epoch (1-based) included in the map-parameter average.
    fn average_start_epoch(&self) -> u64 {
        if self.average_tail <= 0.0 {
            return u64::MAX;
        }
        let tail = (self.epochs as f64 * self.average_tail).floor() as u64;
        self.epochs.saturating_sub(tail) + 1
    }

    /// Conditional samples per input actually used by the model kind.
    fn effective_cond(&self) -> usize {
        match self.model_kind {
            ModelKind::Deterministic => 1,
            _ => self.cond_batch,
        }
    }
}

/// Per-epoch objective record. `wall_ms` is measured and therefore excluded
/// from determinism comparisons.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: u64,
    pub v_f: f64,
    /// Per-component inner objective from the last inner step of the epoch.
    pub v_t: Vec<f64>,
    pub v_t_total: f64,
    pub wall_ms: f64,
}

/// Running uniform average of map parameters over the training tail.
#[derive(Debug, Clone)]
pub struct MapAverage {
    pub models: Vec<PlanModel>,
    pub count: u64,
}

/// Everything produced by training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub models: Vec<PlanModel>,
    pub bank: PotentialBank,
    pub adam_potential: AdamState,
    pub adam_map: AdamState,
    pub epoch: u64,
    pub history: Vec<EpochRecord>,
    pub map_average: Option<MapAverage>,
}

impl TrainState {
    /// The maps to evaluate: the tail average when one was accumulated,
    /// otherwise the final iterates.
    pub fn result_models(&self) -> &[PlanModel] {
        match &self.map_average {
            Some(avg) if avg.count > 0 => &avg.models,
            _ => &self.models,
        }
    }
}

fn build_model(
    kind: ModelKind,
    input_dim: usize,
    target_dim: usize,
    hidden: &[usize],
    noise_dim: usize,
    seed: u64,
    init_stream: u64,
) -> Result<PlanModel> {
    use crate::diffmath::Activation;
    let mut rng = crate::distributions::stream_rng(seed, init_stream);
    match kind {
        ModelKind::Deterministic => Ok(PlanModel::deterministic(MlpParams::init(
            input_dim,
            hidden,
            target_dim,
            Activation::Linear,
            &mut rng,
        ))),
        ModelKind::Stochastic => {
            let net = MlpParams::init(
                input_dim + noise_dim,
                hidden,
                target_dim,
                Activation::Linear,
                &mut rng,
            );
            PlanModel::stochastic(net, noise_dim)
        }
        ModelKind::Gaussian => {
            let mean_net =
                MlpParams::init(input_dim, hidden, target_dim, Activation::Linear, &mut rng);
            let scale_net =
                MlpParams::init(input_dim, hidden, target_dim, Activation::Linear, &mut rng);
            PlanModel::gaussian(mean_net, scale_net)
        }
    }
}

/// Initializes models, potentials, and optimizer state for a problem.
/// Network initialization streams are derived from each component's
/// reference-sampler stream, so relabeling a symmetric problem relabels the
/// networks with it.
pub fn init_state(problem: &BarycenterProblem, cfg: &TrainConfig) -> Result<TrainState> {
    cfg.validate()?;
    let noise_dim = cfg.noise_dim.unwrap_or(problem.target_dim);
    for c in &problem.components {
        if c.cost.needs_gaussian_model() && cfg.model_kind != ModelKind::Gaussian {
            return Err(Error::contract(
                "KL costs require the Gaussian model parameterization",
            ));
        }
        if matches!(c.cost, WeakCostSpec::Energy { .. }) && cfg.effective_cond() < 2 {
            return Err(Error::contract(
                "energy costs need cond_batch >= 2 (within-batch term)",
            ));
        }
    }
    let mut models = Vec::with_capacity(problem.k());
    let mut potentials = Vec::with_capacity(problem.k());
    for c in &problem.components {
        let ref_stream = c.sampler.stream();
        models.push(build_model(
            cfg.model_kind,
            c.sampler.dim(),
            problem.target_dim,
            &cfg.hidden_layers,
            noise_dim,
            cfg.seed,
            streams::MAP_INIT_BASE + ref_stream,
        )?);
        let mut rng =
            crate::distributions::stream_rng(cfg.seed, streams::POTENTIAL_INIT_BASE + ref_stream);
        potentials.push(MlpParams::init(
            problem.target_dim,
            &cfg.hidden_layers,
            1,
            crate::diffmath::Activation::Linear,
            &mut rng,
        ));
    }
    let bank = PotentialBank::new(potentials, problem.weights())?;
    let adam_potential =
        AdamState::new(&bank.param_tensors(), AdamHyper::with_lr(cfg.lr_potential));
    let map_params: Vec<&Tensor> = models.iter().flat_map(|m| m.param_tensors()).collect();
    let adam_map = AdamState::new(&map_params, AdamHyper::with_lr(cfg.lr_map));
    Ok(TrainState {
        models,
        bank,
        adam_potential,
        adam_map,
        epoch: 0,
        history: Vec::new(),
        map_average: None,
    })
}

/// Potentials evaluated on batches of mapped points. The solver's
/// objectives are generic over this so tests can substitute hand-built
/// potentials for the congruent bank.
pub trait PotentialFamily {
    fn eval_batch(&self, g: &mut Graph, k: usize, y: NodeId) -> Result<NodeId>;
}

/// The congruent bank bound into a graph.
pub struct BoundBank<'a> {
    pub bank: &'a PotentialBank,
    pub binding: &'a BankBinding,
}

impl PotentialFamily for BoundBank<'_> {
    fn eval_batch(&self, g: &mut Graph, k: usize, y: NodeId) -> Result<NodeId> {
        self.bank.potential_eval(g, self.binding, k, y)
    }
}

/// Monte-Carlo estimate of the potential objective
/// `sum_k w_k mean[f_k(y_k)]` over already-mapped batches `ys`.
/// Differentiable in whatever the potential family binds; the mapped
/// batches enter as constants.
pub fn estimate_vf(
    g: &mut Graph,
    potentials: &impl PotentialFamily,
    weights: &[f64],
    ys: &[NodeId],
) -> Result<NodeId> {
    if ys.is_empty() || ys.len() != weights.len() {
        return Err(Error::contract(format!(
            "{} mapped batches vs {} weights",
            ys.len(),
            weights.len()
        )));
    }
    let mut terms = Vec::with_capacity(ys.len());
    for (k, (&y, &w)) in ys.iter().zip(weights).enumerate() {
        let f = potentials.eval_batch(g, k, y)?;
        let mean = g.mean(f);
        terms.push((w, mean));
    }
    g.weighted_sum(&terms)
}

/// Cost half of the inner objective for one component: the Monte-Carlo
/// weak-cost estimate averaged over the input batch.
pub fn estimate_cost_term(
    g: &mut Graph,
    cost: &mut WeakCostSpec,
    x: &Tensor,
    fwd: &ModelForward,
    m: usize,
    prior_per_x: usize,
) -> Result<NodeId> {
    match cost {
        WeakCostSpec::Classical { ground } => {
            crate::costs::classical_term(g, *ground, x, fwd.y, m)
        }
        WeakCostSpec::Kl { ground, epsilon, prior } => {
            let (mu, sigma) = fwd.gaussian_heads.ok_or_else(|| {
                Error::contract("KL cost requires the Gaussian model's conditional heads")
            })?;
            let cost_term = crate::costs::classical_term(g, *ground, x, fwd.y, m)?;
            let d_vars = prior
                .diag_vars()
                .ok_or_else(|| Error::contract("KL prior must have diagonal covariance"))?;
            let prior_mean: Vec<f64> = prior.mean().iter().copied().collect();
            let kl = g.kl_diag_to_prior(mu, sigma, &prior_mean, &d_vars)?;
            g.weighted_sum(&[(1.0, cost_term), (*epsilon, kl)])
        }
        WeakCostSpec::Energy { ground, gamma, ell, prior } => {
            let y0 = prior.sample(x.rows() * prior_per_x)?;
            let cost_term = crate::costs::classical_term(g, *ground, x, fwd.y, m)?;
            let penalty =
                g.energy_penalty(fwd.y, &y0, x.rows(), m, prior_per_x, *gamma, ell.alpha())?;
            g.weighted_sum(&[(1.0, cost_term), (1.0, penalty)])
        }
    }
}

/// Inner objective for component `k`: weak-cost estimate minus the mean
/// potential of the mapped points.
#[allow(clippy::too_many_arguments)]
pub fn estimate_vt(
    g: &mut Graph,
    cost: &mut WeakCostSpec,
    potentials: &impl PotentialFamily,
    k: usize,
    x: &Tensor,
    fwd: &ModelForward,
    m: usize,
    prior_per_x: usize,
) -> Result<NodeId> {
    let cost_node = estimate_cost_term(g, cost, x, fwd, m, prior_per_x)?;
    let f = potentials.eval_batch(g, k, fwd.y)?;
    let f_mean = g.mean(f);
    g.weighted_sum(&[(1.0, cost_node), (-1.0, f_mean)])
}

/// One auxiliary-noise sampler per component, on streams derived from each
/// component's reference stream.
pub fn fork_aux_samplers(problem: &BarycenterProblem) -> Vec<Sampler> {
    problem
        .components
        .iter()
        .map(|c| problem.aux_noise.fork(streams::AUX_NOISE_BASE + c.sampler.stream()))
        .collect()
}

fn check_finite(value: f64, epoch: u64, term: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Diverged { epoch, term: term.to_string() })
    }
}

fn map_divergence(err: Error, epoch: u64, term: &str) -> Error {
    match err {
        Error::NonFiniteGradient { .. } => Error::Diverged { epoch, term: term.to_string() },
        other => other,
    }
}

/// Runs `n_epochs` additional training epochs, appending to the state's
/// history. [`train`] composes [`init_state`] with this; checkpoint resume
/// calls it directly on a restored state.
pub fn run_epochs(
    state: &mut TrainState,
    problem: &mut BarycenterProblem,
    aux: &mut Vec<Sampler>,
    cfg: &TrainConfig,
    n_epochs: u64,
) -> Result<()> {
    let k_total = problem.k();
    let weights = problem.weights();
    let m = cfg.effective_cond();
    let noise_dim = state.models[0].noise_dim();

    for _ in 0..n_epochs {
        let epoch = state.epoch;
        let start = std::time::Instant::now();

        // ascent phase: potentials see the maps as constants
        let mut mapped = Vec::with_capacity(k_total);
        for (k, comp) in problem.components.iter_mut().enumerate() {
            let x = comp.sampler.sample(cfg.batch_size)?;
            let y = if noise_dim == 0 {
                state.models[k].eval(&x, None, 1)?
            } else {
                let s = aux[k].sample(cfg.batch_size * m)?;
                state.models[k].eval(&x, Some(&s), m)?
            };
            mapped.push(y);
        }
        let mut g = Graph::new();
        let bank_binding = state.bank.bind(&mut g);
        let ys: Vec<NodeId> = mapped.into_iter().map(|y| g.constant(y)).collect();
        let bound = BoundBank { bank: &state.bank, binding: &bank_binding };
        let v_f_node = estimate_vf(&mut g, &bound, &weights, &ys)?;
        let v_f = check_finite(g.value(v_f_node).scalar_value()?, epoch, "V_f")?;
        g.backward(v_f_node)?;
        let grads = state.bank.collect_grads(&g, &bank_binding);
        {
            let mut params = state.bank.param_tensors_mut();
            adam_step(&mut params, &grads, &mut state.adam_potential)
                .map_err(|e| map_divergence(e, epoch, "V_f gradient"))?;
        }

        // descent phase: maps see the potentials as constants
        let mut v_t_last = vec![0.0; k_total];
        let mut v_t_total = 0.0;
        for _ in 0..cfg.inner_steps {
            let mut g = Graph::new();
            let bank_binding = state.bank.bind(&mut g);
            let model_bindings: Vec<_> =
                state.models.iter().map(|mdl| mdl.bind(&mut g)).collect();
            let mut vt_nodes = Vec::with_capacity(k_total);
            for (k, comp) in problem.components.iter_mut().enumerate() {
                let x = comp.sampler.sample(cfg.batch_size)?;
                let noise = if noise_dim == 0 {
                    None
                } else {
                    Some(aux[k].sample(cfg.batch_size * m)?)
                };
                let fwd = state.models[k].forward(
                    &mut g,
                    &model_bindings[k],
                    &x,
                    noise.as_ref(),
                    if noise_dim == 0 { 1 } else { m },
                )?;
                let bound = BoundBank { bank: &state.bank, binding: &bank_binding };
                let vtk = estimate_vt(
                    &mut g,
                    &mut comp.cost,
                    &bound,
                    k,
                    &x,
                    &fwd,
                    if noise_dim == 0 { 1 } else { m },
                    cfg.prior_batch,
                )?;
                vt_nodes.push(vtk);
            }
            let terms: Vec<(f64, NodeId)> =
                weights.iter().copied().zip(vt_nodes.iter().copied()).collect();
            let v_t_node = g.weighted_sum(&terms)?;
            v_t_total = check_finite(g.value(v_t_node).scalar_value()?, epoch, "V_T")?;
            for (k, &node) in vt_nodes.iter().enumerate() {
                v_t_last[k] = g.value(node).scalar_value()?;
            }
            g.backward(v_t_node)?;
            let grads: Vec<Tensor> = state
                .models
                .iter()
                .zip(&model_bindings)
                .flat_map(|(mdl, b)| mdl.collect_grads(&g, b))
                .collect();
            let mut params: Vec<&mut Tensor> =
                state.models.iter_mut().flat_map(|mdl| mdl.param_tensors_mut()).collect();
            adam_step(&mut params, &grads, &mut state.adam_map)
                .map_err(|e| map_divergence(e, epoch, "V_T gradient"))?;
        }

        state.epoch += 1;
        state.history.push(EpochRecord {
            epoch: state.epoch,
            v_f,
            v_t: v_t_last,
            v_t_total,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });

        if state.epoch >= cfg.average_start_epoch() {
            accumulate_map_average(state);
        }
    }
    Ok(())
}

fn accumulate_map_average(state: &mut TrainState) {
    if state.map_average.is_none() {
        state.map_average = Some(MapAverage { models: state.models.clone(), count: 1 });
        return;
    }
    let avg = state.map_average.as_mut().expect("just checked");
    avg.count += 1;
    let n = avg.count as f64;
    for (avg_model, model) in avg.models.iter_mut().zip(&state.models) {
        let current = model.param_tensors();
        for (a, c) in avg_model.param_tensors_mut().into_iter().zip(current) {
            for (av, cv) in a.data_mut().iter_mut().zip(c.data()) {
                *av += (cv - *av) / n;
            }
        }
    }
}

/// Trains a problem from scratch for the configured number of epochs.
pub fn train(problem: &mut BarycenterProblem, cfg: &TrainConfig) -> Result<TrainState> {
    let mut state = init_state(problem, cfg)?;
    let mut aux = fork_aux_samplers(problem);
    run_epochs(&mut state, problem, &mut aux, cfg, cfg.epochs)?;
    Ok(state)
}

/// Forks every component's samplers onto evaluation streams so estimates
/// never disturb the training streams.
fn fork_problem(problem: &BarycenterProblem, base: u64) -> BarycenterProblem {
    let components = problem
        .components
        .iter()
        .map(|c| RefComponent {
            sampler: c.sampler.fork(base + c.sampler.stream()),
            weight: c.weight,
            cost: c.cost.fork(base + c.sampler.stream() + 1),
        })
        .collect();
    BarycenterProblem {
        components,
        aux_noise: problem.aux_noise.fork(base + 0x99),
        target_dim: problem.target_dim,
    }
}

/// Monte-Carlo estimate of the full objective
/// `sum_k w_k { C_hat_k - mean f_k(T_k(x, s)) }` for the given maps and
/// potentials, averaged over `batches` fresh batches from forked samplers.
pub fn estimate_objective(
    models: &[PlanModel],
    bank: &PotentialBank,
    problem: &BarycenterProblem,
    cfg: &TrainConfig,
    batches: usize,
    stream_base: u64,
) -> Result<f64> {
    let mut eval_problem = fork_problem(problem, stream_base);
    let mut aux = fork_aux_samplers(&eval_problem);
    let weights = eval_problem.weights();
    let m = cfg.effective_cond();
    let noise_dim = models[0].noise_dim();
    let mut total = 0.0;
    for _ in 0..batches {
        let mut g = Graph::new();
        let bank_binding = bank.bind(&mut g);
        let model_bindings: Vec<_> = models.iter().map(|mdl| mdl.bind(&mut g)).collect();
        for (k, comp) in eval_problem.components.iter_mut().enumerate() {
            let x = comp.sampler.sample(cfg.batch_size)?;
            let noise =
                if noise_dim == 0 { None } else { Some(aux[k].sample(cfg.batch_size * m)?) };
            let fwd = models[k].forward(
                &mut g,
                &model_bindings[k],
                &x,
                noise.as_ref(),
                if noise_dim == 0 { 1 } else { m },
            )?;
            let bound = BoundBank { bank, binding: &bank_binding };
            let vtk = estimate_vt(
                &mut g,
                &mut comp.cost,
                &bound,
                k,
                &x,
                &fwd,
                if noise_dim == 0 { 1 } else { m },
                cfg.prior_batch,
            )?;
            total += weights[k] * g.value(vtk).scalar_value()?;
        }
    }
    Ok(total / batches as f64)
}

/// Budget for the duality-gap estimate's fresh inner solve.
#[derive(Debug, Clone)]
pub struct Delta1Budget {
    /// Map-descent steps of the fresh inner solve.
    pub steps: u64,
    /// Monte-Carlo batches per objective estimate.
    pub eval_batches: usize,
    /// Start the inner solve from the current maps instead of fresh
    /// initializations.
    pub warm_start: bool,
    /// Plateau window (steps) for the convergence flag.
    pub plateau_window: u64,
    /// Relative improvement below which the inner loss counts as flat.
    pub plateau_tol: f64,
}

impl Default for Delta1Budget {
    fn default() -> Self {
        Delta1Budget {
            steps: 400,
            eval_batches: 8,
            warm_start: false,
            plateau_window: 50,
            plateau_tol: 1e-3,
        }
    }
}

/// Duality-gap estimate and its provenance.
#[derive(Debug, Clone)]
pub struct Delta1Report {
    /// `V(potentials, maps) - min_over_fresh_maps V(potentials, maps')`.
    pub delta1: f64,
    pub v_current: f64,
    pub v_inner_solved: f64,
    /// Whether the fresh inner solve plateaued within the budget.
    pub converged: bool,
}

/// Estimates the first duality gap: the excess of the objective at the
/// current maps over a freshly re-minimized inner problem with the
/// potentials frozen. Nonnegative up to Monte-Carlo noise, since the inner
/// solve approaches an infimum.
pub fn estimate_delta1(
    state: &TrainState,
    problem: &BarycenterProblem,
    cfg: &TrainConfig,
    budget: &Delta1Budget,
) -> Result<Delta1Report> {
    let v_current = estimate_objective(
        &state.models,
        &state.bank,
        problem,
        cfg,
        budget.eval_batches,
        streams::EVAL,
    )?;

    let mut inner_models: Vec<PlanModel> = if budget.warm_start {
        state.models.clone()
    } else {
        let noise_dim = cfg.noise_dim.unwrap_or(problem.target_dim);
        problem
            .components
            .iter()
            .map(|c| {
                build_model(
                    cfg.model_kind,
                    c.sampler.dim(),
                    problem.target_dim,
                    &cfg.hidden_layers,
                    noise_dim,
                    cfg.seed,
                    streams::DELTA1 + c.sampler.stream(),
                )
            })
            .collect::<Result<_>>()?
    };

    let mut solve_problem = fork_problem(problem, streams::DELTA1 + 0x1000);
    let mut aux = fork_aux_samplers(&solve_problem);
    let weights = solve_problem.weights();
    let m = cfg.effective_cond();
    let noise_dim = inner_models[0].noise_dim();
    let params: Vec<&Tensor> = inner_models.iter().flat_map(|mdl| mdl.param_tensors()).collect();
    let mut adam = AdamState::new(&params, AdamHyper::with_lr(cfg.lr_map));

    let mut recent: Vec<f64> = Vec::new();
    let mut converged = budget.steps == 0;
    for step in 0..budget.steps {
        let mut g = Graph::new();
        let bank_binding = state.bank.bind(&mut g);
        let model_bindings: Vec<_> = inner_models.iter().map(|mdl| mdl.bind(&mut g)).collect();
        let mut terms = Vec::with_capacity(solve_problem.k());
        for (k, comp) in solve_problem.components.iter_mut().enumerate() {
            let x = comp.sampler.sample(cfg.batch_size)?;
            let noise =
                if noise_dim == 0 { None } else { Some(aux[k].sample(cfg.batch_size * m)?) };
            let fwd = inner_models[k].forward(
                &mut g,
                &model_bindings[k],
                &x,
                noise.as_ref(),
                if noise_dim == 0 { 1 } else { m },
            )?;
            let bound = BoundBank { bank: &state.bank, binding: &bank_binding };
            let vtk = estimate_vt(
                &mut g,
                &mut comp.cost,
                &bound,
                k,
                &x,
                &fwd,
                if noise_dim == 0 { 1 } else { m },
                cfg.prior_batch,
            )?;
            terms.push((weights[k], vtk));
        }
        let v_t_node = g.weighted_sum(&terms)?;
        let v_t = g.value(v_t_node).scalar_value()?;
        g.backward(v_t_node)?;
        let grads: Vec<Tensor> = inner_models
            .iter()
            .zip(&model_bindings)
            .flat_map(|(mdl, b)| mdl.collect_grads(&g, b))
            .collect();
        let mut params: Vec<&mut Tensor> =
            inner_models.iter_mut().flat_map(|mdl| mdl.param_tensors_mut()).collect();
        adam_step(&mut params, &grads, &mut adam)
            .map_err(|e| map_divergence(e, step, "delta1 inner solve"))?;

        recent.push(v_t);
        let w = budget.plateau_window as usize;
        if recent.len() >= 2 * w {
            let older: f64 = recent[recent.len() - 2 * w..recent.len() - w].iter().sum::<f64>()
                / w as f64;
            let newer: f64 = recent[recent.len() - w..].iter().sum::<f64>() / w as f64;
            if (older - newer).abs() <= budget.plateau_tol * older.abs().max(1.0) {
                converged = true;
            }
        }
    }

    let v_inner_solved = estimate_objective(
        &inner_models,
        &state.bank,
        problem,
        cfg,
        budget.eval_batches,
        streams::EVAL,
    )?;
    Ok(Delta1Report { delta1: v_current - v_inner_solved, v_current, v_inner_solved, converged })
}
