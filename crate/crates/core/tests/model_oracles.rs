use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rem_core::autodiff::{Graph, Tensor};
use rem_core::model::{synthesize, Architecture, DecoderKind, EncoderKind, LinearGaussianModel, ModelPair};

/// Midpoint-rule integral of `f` over a square grid in 2-D.
fn grid_2d(f: impl Fn(f64, f64) -> f64, centre: (f64, f64), half: f64, n: usize) -> f64 {
    let h = 2.0 * half / n as f64;
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            let a = centre.0 - half + (i as f64 + 0.5) * h;
            let b = centre.1 - half + (j as f64 + 0.5) * h;
            acc += f(a, b);
        }
    }
    acc * h * h
}

#[test]
fn posterior_moments_match_quadrature() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let model = LinearGaussianModel::random(5, 2, 0.7, &mut rng).unwrap();
    let x = model.sample(1, &mut rng);
    let x = x.row(0);
    let (mean, cov) = model.posterior(x);

    let log_px = model.log_marginal(x);
    let post = |a: f64, b: f64| (model.log_joint(x, &[a, b]) - log_px).exp();
    let c = (mean[0], mean[1]);
    let n = 400;
    let mass = grid_2d(&post, c, 8.0, n);
    let m0 = grid_2d(|a, b| a * post(a, b), c, 8.0, n);
    let m1 = grid_2d(|a, b| b * post(a, b), c, 8.0, n);
    let v00 = grid_2d(|a, b| (a - mean[0]).powi(2) * post(a, b), c, 8.0, n);
    let v01 = grid_2d(|a, b| (a - mean[0]) * (b - mean[1]) * post(a, b), c, 8.0, n);
    let v11 = grid_2d(|a, b| (b - mean[1]).powi(2) * post(a, b), c, 8.0, n);

    // the posterior integrates to 1 only if the analytic marginal is right
    assert!((mass - 1.0).abs() < 1e-6, "mass {mass}");
    assert!((m0 - mean[0]).abs() < 1e-6 && (m1 - mean[1]).abs() < 1e-6);
    assert!((v00 - cov[(0, 0)]).abs() < 1e-6);
    assert!((v01 - cov[(0, 1)]).abs() < 1e-6);
    assert!((v11 - cov[(1, 1)]).abs() < 1e-6);
}

#[test]
fn synth_marginal_matches_quadrature_at_one_latent() {
    let s = synthesize(4, 1, 0.5, 1.0, 3, 0, 8).unwrap();
    for i in 0..3 {
        let x = s.train.row(i);
        let h = 16.0 / 4000.0;
        let integral: f64 = (0..4000)
            .map(|j| {
                let z = -8.0 + (j as f64 + 0.5) * h;
                s.model.log_joint(x, &[z]).exp() * h
            })
            .sum();
        assert!((integral.ln() - s.model.log_marginal(x)).abs() < 1e-9);
    }
}

#[test]
fn zero_loading_marginal_is_noise_only() {
    let s = synthesize(3, 2, 0.4, 0.0, 50, 0, 2).unwrap();
    let total = s.model.log_marginal_total(&s.train);
    let want: f64 = s
        .train
        .data()
        .iter()
        .map(|v| -0.5 * ((2.0 * std::f64::consts::PI * 0.4).ln() + v * v / 0.4))
        .sum();
    assert!((total - want).abs() < 1e-9);
}

#[test]
fn synth_is_reproducible() {
    assert_eq!(synthesize(5, 2, 0.3, 1.0, 20, 5, 9).unwrap(), synthesize(5, 2, 0.3, 1.0, 20, 5, 9).unwrap());
    assert_ne!(synthesize(5, 2, 0.3, 1.0, 20, 5, 9).unwrap().train, synthesize(5, 2, 0.3, 1.0, 20, 5, 10).unwrap().train);
}

#[test]
fn em_monotone_for_fifty_iterations() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let truth = LinearGaussianModel::random(6, 2, 0.2, &mut rng).unwrap();
    let data = truth.sample(300, &mut rng);
    let mut model = LinearGaussianModel::random(6, 2, 2.0, &mut rng).unwrap();
    let mut prev = model.log_marginal_total(&data);
    for _ in 0..50 {
        model = model.em_step(&data).unwrap();
        let next = model.log_marginal_total(&data);
        assert!(next >= prev - 1e-10, "{prev} -> {next}");
        prev = next;
    }
}

#[test]
fn graph_log_joint_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let lg = LinearGaussianModel::random(4, 2, 0.6, &mut rng).unwrap();
    let pair = ModelPair {
        arch: lg.architecture(),
        theta: lg.to_theta(),
        eta: lg.posterior_encoder(),
    };
    let x = lg.sample(3, &mut rng);
    let z = Tensor::matrix(3, 2, vec![0.1, -0.3, 1.2, 0.0, -0.7, 0.4]).unwrap();
    let got = pair.log_joint_values(&x, &z).unwrap();
    for i in 0..3 {
        assert!((got[i] - lg.log_joint(x.row(i), z.row(i))).abs() < 1e-12);
    }
}

fn bernoulli_pair(seed: u64, d: usize) -> ModelPair {
    let arch = Architecture {
        data_dim: d,
        latent_dim: 2,
        hidden: 5,
        decoder: DecoderKind::Bernoulli,
        encoder: EncoderKind::Mlp,
    };
    ModelPair::init(arch, &mut ChaCha8Rng::seed_from_u64(seed))
}

proptest! {
    #[test]
    fn bernoulli_log_likelihood_is_non_positive(
        seed in 0u64..1000,
        bits in proptest::collection::vec(0u8..2, 6),
        z in proptest::collection::vec(-5.0f64..5.0, 2),
        scale in 0.1f64..20.0,
    ) {
        let mut pair = bernoulli_pair(seed, 6);
        for (_, t) in pair.theta.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
        let x = Tensor::matrix(1, 6, bits.iter().map(|b| f64::from(*b)).collect()).unwrap();
        let z = Tensor::matrix(1, 2, z).unwrap();
        let ll = pair.decoder_log_lik_values(&x, &z).unwrap();
        prop_assert!(ll[0] <= 0.0);
        prop_assert!(ll[0].is_finite());
    }

    #[test]
    fn encoder_is_a_function_of_its_input(seed in 0u64..1000, bits in proptest::collection::vec(0u8..2, 6)) {
        let pair = bernoulli_pair(seed, 6);
        let x = Tensor::matrix(1, 6, bits.iter().map(|b| f64::from(*b)).collect()).unwrap();
        let a = pair.encode_values(&x).unwrap();
        let b = pair.encode_values(&x.repeat_rows(3)).unwrap();
        for r in 0..3 {
            prop_assert_eq!(a.0.row(0), b.0.row(r));
            prop_assert_eq!(a.1.row(0), b.1.row(r));
        }
    }
}

#[test]
fn posterior_encoder_is_exact_for_orthogonal_loading() {
    // orthogonal columns make the posterior covariance diagonal
    let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 0.0, 0.0, 2.0, 0.0, -1.0]);
    let lg = LinearGaussianModel::new(a, 0.5).unwrap();
    let x = [0.3, -1.0, 2.0, 0.1];
    let (mean, cov) = lg.posterior(&x);
    let g = Graph::new();
    let eta = lg.posterior_encoder();
    let vars = eta.attach(&g, false);
    let (m, lv) = lg
        .architecture()
        .encode(&vars, g.constant(Tensor::matrix(1, 4, x.to_vec()).unwrap()))
        .unwrap();
    let (m, lv) = (m.value(), lv.value());
    for j in 0..2 {
        assert!((m.data()[j] - mean[j]).abs() < 1e-12);
        assert!((lv.data()[j].exp() - cov[(j, j)]).abs() < 1e-12);
    }
    assert!(cov[(0, 1)].abs() < 1e-15);
}
