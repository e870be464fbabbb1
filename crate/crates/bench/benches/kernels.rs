use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use ndarray::Array2;

use smiling::nn::{self, Activation, OptimizerState};
use smiling::rng;
use smiling::{CostFn, DiffusionSchedule, ScoreModel};

const BATCH: usize = 1024;

fn inputs(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut r = rng::seeded(seed);
    Array2::from_shape_simple_fn((n, d), || rng::normal(&mut r))
}

fn bins(n: usize, schedule: &DiffusionSchedule) -> Vec<usize> {
    (0..n).map(|i| (i * 7919) % schedule.n_steps()).collect()
}

fn nn_forward(c: &mut Criterion) {
    let schedule = DiffusionSchedule::default();
    let model = ScoreModel::new(2, &[256], &schedule, Activation::Relu, 0).unwrap();
    let xs = inputs(BATCH, 2, 1);
    let b = bins(BATCH, &schedule);
    c.bench_function("nn_forward_1024x2_h256", |bench| {
        bench.iter(|| model.params.forward_batch(xs.view(), &b).unwrap())
    });
}

fn cost_eval(c: &mut Criterion) {
    let schedule = DiffusionSchedule::default();
    let g_e = ScoreModel::new(2, &[256], &schedule, Activation::Relu, 2).unwrap();
    let g_l = ScoreModel::new(2, &[256], &schedule, Activation::Relu, 3).unwrap();
    let cost = CostFn::new(g_e, g_l, schedule, 500).unwrap();
    let states = inputs(32, 2, 4);
    let mut r = rng::seeded(5);
    let mut group = c.benchmark_group("cost");
    group.sample_size(10);
    group.bench_function("cost_eval_32_states_n_mc_500", |bench| {
        bench.iter(|| cost.eval_batch(states.view(), &mut r).unwrap())
    });
    group.finish();
}

fn dsm_train_step(c: &mut Criterion) {
    let schedule = DiffusionSchedule::default();
    let model = ScoreModel::new(2, &[256], &schedule, Activation::Relu, 6).unwrap();
    let xs = inputs(BATCH, 2, 7);
    let targets = inputs(BATCH, 2, 8);
    let b = bins(BATCH, &schedule);
    c.bench_function("dsm_train_step_1024x2_h256", |bench| {
        bench.iter_batched(
            || (model.params.clone(), OptimizerState::new(&model.params, 1e-3)),
            |(mut params, mut opt)| {
                let (_, grads) = nn::sq_loss_grad_batch(&params, xs.view(), &b, targets.view()).unwrap();
                opt.step(&mut params, &grads);
                params
            },
            BatchSize::LargeInput,
        )
    });
}

criterion_group!(benches, nn_forward, cost_eval, dsm_train_step);
criterion_main!(benches);
