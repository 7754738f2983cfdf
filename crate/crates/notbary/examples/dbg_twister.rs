use notbary::costs::{GroundCost, SemiMetric, WeakCostSpec};
use notbary::diffmath::{MlpParams, Tensor};
use notbary::distributions::{make_twister_instance, streams, GaussianDist, Sampler, SamplerKind};
use notbary::metrics::{barycenter_energy_test, pooled_pushforward_mean};
use notbary::solver::*;
use notbary::transport::PlanModel;

// right pseudo-inverse identity init: relu stays in its linear region over
// the data radius, so the net starts as the exact identity there
fn identity_net(dim: usize, width: usize, bias: f64, rng: &mut rand_chacha::ChaCha12Rng) -> MlpParams {
    use rand::Rng;
    use rand_distr::StandardNormal;
    let std = (2.0 / dim as f64).sqrt();
    let mut w1 = Tensor::zeros(&[dim, width]);
    for v in w1.data_mut().iter_mut() {
        *v = std * rng.sample::<f64, _>(StandardNormal);
    }
    // W2 = W1^T (W1 W1^T)^{-1}, published for dim x dim = 2x2 here
    let d = dim;
    let mut g = vec![0.0; d * d];
    for a in 0..d {
        for b in 0..d {
            let mut acc = 0.0;
            for j in 0..width {
                acc += w1.data()[a * width + j] * w1.data()[b * width + j];
            }
            g[a * d + b] = acc;
        }
    }
    // invert 2x2
    assert_eq!(d, 2);
    let det = g[0] * g[3] - g[1] * g[2];
    let ginv = [g[3] / det, -g[1] / det, -g[2] / det, g[0] / det];
    let mut w2 = Tensor::zeros(&[width, d]);
    for j in 0..width {
        for b in 0..d {
            let mut acc = 0.0;
            for a in 0..d {
                acc += w1.data()[a * width + j] * ginv[a * d + b];
            }
            w2.data_mut()[j * d + b] = acc;
        }
    }
    let b1 = Tensor::from_vec(vec![bias; width]);
    let mut b2 = Tensor::from_vec(vec![0.0; d]);
    for b in 0..d {
        let mut acc = 0.0;
        for j in 0..width {
            acc += bias * w2.data()[j * d + b];
        }
        b2.data_mut()[b] = -acc;
    }
    let mut net = MlpParams::zeros(dim, &[width], dim);
    net.layers[0].weight = w1;
    net.layers[0].bias = b1;
    net.layers[1].weight = w2;
    net.layers[1].bias = b2;
    net
}

fn main() {
    let seed = 1u64;
    let inst = make_twister_instance(3.0, 0.5, 1.0, seed).unwrap();
    let kappa = 1.0;
    let components: Vec<RefComponent> = inst
        .samplers
        .iter()
        .zip(&inst.weights)
        .map(|(s, &w)| RefComponent {
            sampler: s.clone(),
            weight: w,
            cost: WeakCostSpec::classical(GroundCost::Twisted { kappa }),
        })
        .collect();
    let aux = Sampler::new(
        SamplerKind::Gaussian(GaussianDist::isotropic(vec![0.0, 0.0], 1.0).unwrap()),
        seed,
        0,
    )
    .unwrap();
    let mut problem = BarycenterProblem::new(components, aux, 2).unwrap();
    let cfg = TrainConfig {
        batch_size: 1024,
        inner_steps: 3,
        cond_batch: 2,
        prior_batch: 8,
        lr_potential: 1e-3,
        lr_map: 1e-3,
        epochs: 1200,
        seed,
        hidden_layers: vec![128, 128],
        model_kind: ModelKind::Deterministic,
        noise_dim: None,
        average_tail: 0.5,
    };
    let mut state = init_state(&problem, &cfg).unwrap();
    // swap in identity-initialized maps
    for (k, c) in problem.components.iter().enumerate() {
        let mut rng = notbary::distributions::stream_rng(seed, streams::MAP_INIT_BASE + c.sampler.stream());
        state.models[k] = PlanModel::deterministic(identity_net(2, 128, 15.0, &mut rng));
    }
    // rebuild the map Adam state for the new shapes
    let params: Vec<&Tensor> = state.models.iter().flat_map(|m| m.param_tensors()).collect();
    state.adam_map = notbary::diffmath::AdamState::new(&params, notbary::diffmath::AdamHyper::with_lr(cfg.lr_map));

    let mut aux_forks = fork_aux_samplers(&problem);
    let t = std::time::Instant::now();
    run_epochs(&mut state, &mut problem, &mut aux_forks, &cfg, cfg.epochs).unwrap();
    println!("trained in {:.1}s", t.elapsed().as_secs_f64());
    for (i, r) in state.history.iter().enumerate() {
        if i % 200 == 0 || i + 1 == state.history.len() {
            println!("epoch {:4} v_f {:+.4} v_t {:+.4}", r.epoch, r.v_f, r.v_t_total);
        }
    }
    let models = state.result_models().to_vec();
    let mut evals: Vec<Sampler> = problem.components.iter().map(|c| c.sampler.fork(streams::EVAL + c.sampler.stream())).collect();
    let mut aux_eval = problem.aux_noise.fork(streams::EVAL + 0x777);
    let mut gt = Sampler::new(SamplerKind::Gaussian(inst.ground_truth.clone()), seed, streams::GROUND_TRUTH).unwrap();
    let energy = barycenter_energy_test(&models, &mut evals, &inst.weights, &mut aux_eval, &mut gt, 4096, SemiMetric::default(), seed).unwrap();
    let mean = pooled_pushforward_mean(&models, &mut evals, &inst.weights, &mut aux_eval, 4096).unwrap();
    println!("pooled energy {energy:+.5}  mean ({:+.4}, {:+.4})  norm {:.4}", mean[0], mean[1], (mean[0]*mean[0]+mean[1]*mean[1]).sqrt());
}
