use notbary::costs::{GroundCost, WeakCostSpec};
use notbary::diffmath::Tensor;
use notbary::distributions::{streams, GaussianDist, Sampler, SamplerKind};
use notbary::solver::*;

fn dirac_sampler(value: f64, seed: u64, stream: u64) -> Sampler {
    let points = Tensor::matrix(1, 1, vec![value]).unwrap();
    Sampler::new(SamplerKind::DiracMixture { points, weights: vec![1.0] }, seed, stream).unwrap()
}

fn run(seed: u64, lr_f: f64, lr_t: f64, epochs: u64) -> (f64, f64) {
    let components = vec![
        RefComponent {
            sampler: dirac_sampler(-1.0, seed, streams::REF_BASE),
            weight: 0.5,
            cost: WeakCostSpec::classical(GroundCost::SqEuclidean),
        },
        RefComponent {
            sampler: dirac_sampler(1.0, seed, streams::REF_BASE + 1),
            weight: 0.5,
            cost: WeakCostSpec::classical(GroundCost::SqEuclidean),
        },
    ];
    let g = GaussianDist::isotropic(vec![0.0], 1.0).unwrap();
    let aux = Sampler::new(SamplerKind::Gaussian(g), seed, 0x9999).unwrap();
    let mut problem = BarycenterProblem::new(components, aux, 1).unwrap();
    let cfg = TrainConfig {
        batch_size: 16,
        inner_steps: 3,
        cond_batch: 2,
        prior_batch: 4,
        lr_potential: lr_f,
        lr_map: lr_t,
        epochs,
        seed,
        hidden_layers: vec![32, 32],
        model_kind: ModelKind::Deterministic,
        noise_dim: None,
    };
    let state = train(&mut problem, &cfg).unwrap();
    let y0 = state.models[0].eval(&Tensor::matrix(1, 1, vec![-1.0]).unwrap(), None, 1).unwrap();
    let y1 = state.models[1].eval(&Tensor::matrix(1, 1, vec![1.0]).unwrap(), None, 1).unwrap();
    (y0.data()[0], y1.data()[0])
}

fn main() {
    for (lr_f, lr_t, epochs) in [(1e-4, 1e-3, 3000u64), (3e-4, 1e-3, 2000), (3e-4, 3e-3, 2000), (1e-4, 3e-3, 2000)] {
        let mut pass = 0;
        let mut worst: f64 = 0.0;
        for seed in [7u64, 8, 9, 10, 11, 12] {
            let (a, b) = run(seed, lr_f, lr_t, epochs);
            if a.abs() <= 0.05 && b.abs() <= 0.05 { pass += 1; }
            worst = worst.max(a.abs()).max(b.abs());
        }
        println!("lr_f {lr_f:>6} lr_t {lr_t:>7} epochs {epochs}: pass {pass}/6, worst |T| = {worst:.4}");
    }
}
