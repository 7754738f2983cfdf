use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::config::{CostFamily, EvalConfig, ExperimentConfig, ExperimentKind};
use crate::costs::{GroundCost, SemiMetric, WeakCostSpec};
use crate::diffmath::Tensor;
use crate::distributions::{
    make_twister_instance, random_gaussian_instance, streams, GaussianDist, Sampler, SamplerKind,
};
use crate::gaussian_oracle::{fixed_point_barycenter, gaussian_monge_map, AffineMap};
use crate::metrics::{
    barycenter_energy_test, l2_uvp, pooled_pushforward_mean, transport_cost, ComponentMetrics,
    MetricReport,
};
use crate::solver::{
    fork_aux_samplers, init_state, run_epochs, BarycenterProblem, EpochRecord, ModelKind,
    RefComponent, TrainState,
};
use crate::{Error, Result};

/// Writes `bytes` to `path` atomically: a temp file in the same directory is
/// persisted with a rename, so a crash never leaves a half-written artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("artifact"),
        std::process::id()
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn ground_cost_for(cfg: &ExperimentConfig) -> GroundCost {
    match cfg.experiment {
        ExperimentKind::Twister => GroundCost::Twisted { kappa: cfg.twister.kappa },
        _ => GroundCost::SqEuclidean,
    }
}

fn prior_dist(cfg: &ExperimentConfig) -> Result<GaussianDist> {
    GaussianDist::diagonal(cfg.cost.prior_mean.clone(), &cfg.cost.prior_var)
}

fn cost_spec_for(cfg: &ExperimentConfig, k: usize) -> Result<WeakCostSpec> {
    let ground = ground_cost_for(cfg);
    match cfg.cost.family {
        CostFamily::Classical => Ok(WeakCostSpec::classical(ground)),
        CostFamily::Kl => WeakCostSpec::kl(ground, cfg.cost.epsilon, prior_dist(cfg)?),
        CostFamily::Energy => WeakCostSpec::energy(
            ground,
            cfg.cost.gamma,
            SemiMetric::new(cfg.cost.alpha)?,
            Sampler::new(
                SamplerKind::Gaussian(prior_dist(cfg)?),
                cfg.seed,
                streams::PRIOR_BASE + k as u64,
            )?,
        ),
    }
}

/// Reference distributions of the experiment, as samplers on the standard
/// training streams.
fn reference_samplers(cfg: &ExperimentConfig) -> Result<Vec<Sampler>> {
    match cfg.experiment {
        ExperimentKind::Twister => {
            let inst = make_twister_instance(
                cfg.twister.radius,
                cfg.twister.sigma,
                cfg.twister.kappa,
                cfg.seed,
            )?;
            Ok(inst.samplers)
        }
        ExperimentKind::GaussianBenchmark => {
            let dists = random_gaussian_instance(cfg.dim, cfg.weights.len(), cfg.seed)?;
            dists
                .into_iter()
                .enumerate()
                .map(|(k, d)| {
                    Sampler::new(SamplerKind::Gaussian(d), cfg.seed, streams::REF_BASE + k as u64)
                })
                .collect()
        }
        ExperimentKind::DiracSanity => [-1.0, 1.0]
            .iter()
            .enumerate()
            .map(|(k, &v)| {
                Sampler::new(
                    SamplerKind::DiracMixture {
                        points: Tensor::matrix(1, 1, vec![v])?,
                        weights: vec![1.0],
                    },
                    cfg.seed,
                    streams::REF_BASE + k as u64,
                )
            })
            .collect(),
    }
}

fn aux_template(cfg: &ExperimentConfig) -> Result<Sampler> {
    let noise_dim = match cfg.model {
        ModelKind::Gaussian => cfg.dim,
        _ => cfg.train.noise_dim.unwrap_or(cfg.dim),
    };
    Sampler::new(
        SamplerKind::Gaussian(GaussianDist::isotropic(vec![0.0; noise_dim], 1.0)?),
        cfg.seed,
        0, // template only; training forks per-component streams from it
    )
}

/// Builds the experiment's barycenter problem on the standard streams.
pub fn build_problem(cfg: &ExperimentConfig) -> Result<BarycenterProblem> {
    let samplers = reference_samplers(cfg)?;
    let components = samplers
        .into_iter()
        .enumerate()
        .map(|(k, sampler)| {
            Ok(RefComponent { sampler, weight: cfg.weights[k], cost: cost_spec_for(cfg, k)? })
        })
        .collect::<Result<Vec<_>>>()?;
    BarycenterProblem::new(components, aux_template(cfg)?, cfg.dim)
}

/// Ground truth available for an experiment.
enum OracleInfo {
    Gaussian { maps: Vec<AffineMap>, barycenter: GaussianDist },
    Distribution { barycenter: GaussianDist },
    None,
}

fn oracle_for(cfg: &ExperimentConfig) -> Result<OracleInfo> {
    match (cfg.experiment, cfg.cost.family) {
        (ExperimentKind::GaussianBenchmark, CostFamily::Classical) => {
            let dists = random_gaussian_instance(cfg.dim, cfg.weights.len(), cfg.seed)?;
            let barycenter = fixed_point_barycenter(&dists, &cfg.weights, 1e-12, 10_000)?;
            let maps = dists
                .iter()
                .map(|d| gaussian_monge_map(d, &barycenter))
                .collect::<Result<Vec<_>>>()?;
            Ok(OracleInfo::Gaussian { maps, barycenter })
        }
        (ExperimentKind::Twister, CostFamily::Classical) => {
            // the barycenter distribution is known; no closed-form map
            // through the twist is published, so evaluation is distributional
            let gt = GaussianDist::isotropic(
                vec![0.0, 0.0],
                cfg.twister.sigma * cfg.twister.sigma,
            )?;
            Ok(OracleInfo::Distribution { barycenter: gt })
        }
        _ => Ok(OracleInfo::None),
    }
}

/// Evaluates trained maps against whatever oracle the experiment provides.
pub fn compute_metrics(state: &TrainState, cfg: &ExperimentConfig) -> Result<MetricReport> {
    let EvalConfig { samples: n, cond_draws } = cfg.eval;
    let models = state.result_models();
    let problem = build_problem(cfg)?;
    let oracle = oracle_for(cfg)?;

    let mut eval_samplers: Vec<Sampler> = problem
        .components
        .iter()
        .map(|c| c.sampler.fork(streams::EVAL + c.sampler.stream()))
        .collect();
    let mut aux = problem.aux_noise.fork(streams::EVAL + 0x777);

    let ground = ground_cost_for(cfg);
    let mut per_component = Vec::with_capacity(models.len());
    for (k, model) in models.iter().enumerate() {
        let uvp = match &oracle {
            OracleInfo::Gaussian { maps, barycenter } => Some(l2_uvp(
                model,
                &maps[k],
                &mut eval_samplers[k],
                &mut aux,
                barycenter.total_variance(),
                n,
                cond_draws,
            )?),
            _ => None,
        };
        let cost = transport_cost(model, &mut eval_samplers[k], &mut aux, ground, n, 1)?;
        let x = eval_samplers[k].sample(n)?;
        let mean_map = crate::metrics::conditional_mean_map(model, &x, &mut aux, cond_draws)?;
        let d = mean_map.cols();
        let mut mean = vec![0.0; d];
        for i in 0..x.rows() {
            for j in 0..d {
                mean[j] += mean_map.data()[i * d + j];
            }
        }
        for m in mean.iter_mut() {
            *m /= x.rows() as f64;
        }
        per_component.push(ComponentMetrics {
            l2_uvp_percent: uvp,
            transport_cost: cost,
            pushforward_mean: mean,
            samples: n,
            cond_draws,
        });
    }

    let weighted_l2_uvp = if per_component.iter().all(|c| c.l2_uvp_percent.is_some()) {
        Some(
            per_component
                .iter()
                .zip(&cfg.weights)
                .map(|(c, w)| w * c.l2_uvp_percent.expect("checked"))
                .sum(),
        )
    } else {
        None
    };

    let pooled_energy = match &oracle {
        OracleInfo::Gaussian { barycenter, .. } | OracleInfo::Distribution { barycenter } => {
            let mut gt =
                Sampler::new(SamplerKind::Gaussian(barycenter.clone()), cfg.seed, streams::GROUND_TRUTH)?;
            Some(barycenter_energy_test(
                models,
                &mut eval_samplers,
                &cfg.weights,
                &mut aux,
                &mut gt,
                n,
                SemiMetric::default(),
                cfg.seed,
            )?)
        }
        OracleInfo::None => None,
    };

    let pooled_mean =
        pooled_pushforward_mean(models, &mut eval_samplers, &cfg.weights, &mut aux, n)?;

    Ok(MetricReport {
        seed: cfg.seed,
        per_component,
        weighted_l2_uvp_percent: weighted_l2_uvp,
        pooled_energy_sq: pooled_energy,
        pooled_mean,
        pooled_samples: n,
        status: "ok".to_string(),
    })
}

fn history_csv(history: &[EpochRecord], k: usize) -> String {
    let mut out = String::from("# notbary.history.v1\n");
    out.push_str("epoch,v_f,v_t_total");
    for i in 1..=k {
        out.push_str(&format!(",v_t_{i}"));
    }
    out.push_str(",wall_ms\n");
    for r in history {
        out.push_str(&format!("{},{},{}", r.epoch, r.v_f, r.v_t_total));
        for v in &r.v_t {
            out.push_str(&format!(",{v}"));
        }
        out.push_str(&format!(",{}\n", r.wall_ms));
    }
    out
}

fn samples_csv(data: &Tensor) -> String {
    let d = data.cols();
    let mut out = String::from("# notbary.samples.v1\n");
    out.push_str(
        &(1..=d).map(|j| format!("x{j}")).collect::<Vec<_>>().join(","),
    );
    out.push('\n');
    for i in 0..data.rows() {
        let row: Vec<String> = data.row(i).iter().map(|v| format!("{v}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn dump_samples(
    dir: &Path,
    state: &TrainState,
    cfg: &ExperimentConfig,
) -> Result<()> {
    let problem = build_problem(cfg)?;
    let cap = cfg.sample_dump_cap.min(cfg.eval.samples).max(2);
    let mut aux = problem.aux_noise.fork(streams::EVAL + 0x1234);
    for (k, comp) in problem.components.iter().enumerate() {
        let mut p = comp.sampler.fork(streams::EVAL + 0x2000 + comp.sampler.stream());
        let x = p.sample(cap)?;
        write_atomic(&dir.join(format!("inputs_{k}.csv")), samples_csv(&x).as_bytes())?;
        let model = &state.result_models()[k];
        let y = if model.noise_dim() == 0 {
            model.eval(&x, None, 1)?
        } else {
            let s = aux.sample(cap)?;
            model.eval(&x, Some(&s), 1)?
        };
        write_atomic(&dir.join(format!("pushforward_{k}.csv")), samples_csv(&y).as_bytes())?;
    }
    if let OracleInfo::Gaussian { barycenter, .. } | OracleInfo::Distribution { barycenter } =
        oracle_for(cfg)?
    {
        let mut gt = Sampler::new(
            SamplerKind::Gaussian(barycenter),
            cfg.seed,
            streams::GROUND_TRUTH + 0x50,
        )?;
        let g = gt.sample(cap)?;
        write_atomic(&dir.join("ground_truth.csv"), samples_csv(&g).as_bytes())?;
    }
    Ok(())
}

/// Everything a finished run leaves on disk.
#[derive(Debug)]
pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub report: MetricReport,
    pub final_checkpoint: PathBuf,
}

/// Runs one experiment end to end: train, checkpoint, and write
/// `history.csv`, `metrics.json`, `effective_config.json`, and sample dumps
/// under the configured output directory.
///
/// On divergence a `metrics.json` flagging the failure is still written and
/// the error is returned.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    let out_dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(out_dir.join("samples"))?;
    std::fs::create_dir_all(out_dir.join("checkpoints"))?;
    write_atomic(&out_dir.join("effective_config.json"), cfg.canonical_json().as_bytes())?;

    let mut problem = build_problem(cfg)?;
    let train_cfg = cfg.train_config();
    let mut state = init_state(&problem, &train_cfg)?;
    let mut aux = fork_aux_samplers(&problem);

    let total = cfg.train.epochs;
    let chunk = if cfg.checkpoint_interval == 0 { total } else { cfg.checkpoint_interval };
    let mut done = 0u64;
    while done < total {
        let step = chunk.min(total - done);
        if let Err(err) = run_epochs(&mut state, &mut problem, &mut aux, &train_cfg, step) {
            let k = problem.k();
            write_atomic(
                &out_dir.join("history.csv"),
                history_csv(&state.history, k).as_bytes(),
            )?;
            let report = MetricReport {
                seed: cfg.seed,
                per_component: Vec::new(),
                weighted_l2_uvp_percent: None,
                pooled_energy_sq: None,
                pooled_mean: Vec::new(),
                pooled_samples: 0,
                status: format!("diverged: {err}"),
            };
            write_atomic(
                &out_dir.join("metrics.json"),
                serde_json::to_string_pretty(&report)?.as_bytes(),
            )?;
            return Err(err);
        }
        done += step;
        if cfg.checkpoint_interval != 0 && done < total {
            let stem = out_dir.join("checkpoints").join(format!("epoch_{done}"));
            super::checkpoint::save_checkpoint(&state, &problem, &aux, cfg, &stem)?;
        }
    }

    let final_stem = out_dir.join("checkpoints").join("final");
    super::checkpoint::save_checkpoint(&state, &problem, &aux, cfg, &final_stem)?;
    write_atomic(
        &out_dir.join("history.csv"),
        history_csv(&state.history, problem.k()).as_bytes(),
    )?;
    let report = compute_metrics(&state, cfg)?;
    write_atomic(
        &out_dir.join("metrics.json"),
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;
    dump_samples(&out_dir.join("samples"), &state, cfg)?;

    Ok(RunArtifacts { out_dir, report, final_checkpoint: final_stem })
}

/// JSON schema for `notbary oracle gaussian` instances.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GaussianSpecJson {
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct OracleInstanceJson {
    dists: Vec<GaussianSpecJson>,
    weights: Vec<f64>,
    tol: Option<f64>,
    max_iter: Option<usize>,
}

#[derive(Debug, Serialize)]
struct AffineMapJson {
    matrix: Vec<Vec<f64>>,
    offset: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct OracleReportJson {
    barycenter: GaussianSpecJson,
    monge_maps: Vec<AffineMapJson>,
}

fn gaussian_from_spec(spec: &GaussianSpecJson) -> Result<GaussianDist> {
    let d = spec.mean.len();
    if spec.cov.len() != d || spec.cov.iter().any(|row| row.len() != d) {
        return Err(Error::config(format!("cov must be {d}x{d} to match the mean")));
    }
    let flat: Vec<f64> = spec.cov.iter().flatten().copied().collect();
    GaussianDist::new(spec.mean.clone(), DMatrix::from_row_slice(d, d, &flat))
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect()).collect()
}

/// Computes the fixed-point barycenter and per-reference Monge maps for a
/// JSON instance, returning the report as pretty JSON.
pub fn gaussian_oracle_report(instance_json: &str) -> Result<String> {
    let inst: OracleInstanceJson = serde_json::from_str(instance_json)
        .map_err(|e| Error::config(format!("invalid oracle instance: {e}")))?;
    let dists = inst
        .dists
        .iter()
        .map(gaussian_from_spec)
        .collect::<Result<Vec<_>>>()?;
    let bary = fixed_point_barycenter(
        &dists,
        &inst.weights,
        inst.tol.unwrap_or(1e-12),
        inst.max_iter.unwrap_or(10_000),
    )?;
    let maps = dists
        .iter()
        .map(|d| gaussian_monge_map(d, &bary))
        .collect::<Result<Vec<_>>>()?;
    let report = OracleReportJson {
        barycenter: GaussianSpecJson {
            mean: bary.mean().iter().copied().collect(),
            cov: matrix_rows(bary.cov()),
        },
        monge_maps: maps
            .iter()
            .map(|m| AffineMapJson {
                matrix: matrix_rows(&m.matrix),
                offset: m.offset.iter().copied().collect(),
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&report).expect("report serializes"))
}
