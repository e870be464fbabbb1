//! Denoising score matching against known diffused scores.

use ndarray::Array2;

use smiling::imitation::SmilingConfig;
use smiling::envs::{EnvKind, EnvSpec};
use smiling::rng;
use smiling::score::{DiracScore, MixtureScore};
use smiling::scorematch::{pretrain_expert, weighted_score_error};
use smiling::GaussianScore;

fn fit_error<O: smiling::ScoreFn>(data: &Array2<f64>, oracle: &O, fresh: &Array2<f64>, seed: u64) -> (f64, f64) {
    let cfg = SmilingConfig::new(EnvSpec::new(EnvKind::ExpfamGauss));
    let (g, _) = pretrain_expert(data.view(), &cfg.schedule, &cfg.expert_score, seed).unwrap();
    let mut r = rng::seeded(seed + 100);
    weighted_score_error(&g, oracle, fresh.view(), &cfg.schedule, fresh.nrows(), &mut r).unwrap()
}

#[test]
fn point_mass_data() {
    let data = Array2::from_elem((500, 1), 0.7);
    let (err, se) = fit_error(&data, &DiracScore { center: vec![0.7] }, &data, 1);
    assert!(err < 0.05, "{err} ± {se}");
}

#[test]
fn shifted_narrow_gaussian() {
    let mut r = rng::seeded(2);
    let mut draw = |n| Array2::from_shape_simple_fn((n, 1), || 2.0 + 0.5 * rng::normal(&mut r));
    let data = draw(5_000);
    let fresh = draw(50_000);
    let (err, se) = fit_error(&data, &GaussianScore::new(vec![2.0], 0.25), &fresh, 2);
    assert!(err < 0.05, "{err} ± {se}");
}

#[test]
fn two_component_mixture() {
    let mut r = rng::seeded(3);
    let mut draw = |n| {
        Array2::from_shape_simple_fn((n, 1), || {
            let m = if rng::normal(&mut r) < 0.0 { -1.0 } else { 1.0 };
            m + rng::normal(&mut r)
        })
    };
    let data = draw(5_000);
    let fresh = draw(50_000);
    let truth = MixtureScore { components: vec![(0.5, vec![-1.0], 1.0), (0.5, vec![1.0], 1.0)] };
    let (err, se) = fit_error(&data, &truth, &fresh, 3);
    assert!(err < 0.1, "{err} ± {se}");
}
