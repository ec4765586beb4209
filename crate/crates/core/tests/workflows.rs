use fsvi::checkpoint::{config_hash, Checkpoint};
use fsvi::context::{ContextConfig, ContextSource, Interval};
use fsvi::data::{standardize, synthetic_1d, two_moons, SyntheticKind};
use fsvi::linearization::LinearizationMode;
use fsvi::network::{Activation, MlpSpec};
use fsvi::objective::{Likelihood, PriorSpec, Targets};
use fsvi::predictive::{accuracy, evaluate, posterior_predictive, predictive_entropy, PredictiveOutput};
use fsvi::seeded_rng;
use fsvi::training::{train, LrSchedule, TrainConfig};
use ndarray::{array, Array2};

fn regression_config(points: usize, noise: f64) -> TrainConfig {
    let context = ContextConfig {
        source: ContextSource::UniformBox { bounds: vec![Interval { lo: -6.0, hi: 6.0 }] },
        sets: 1,
        points,
        minibatch_mix: 1.0,
    };
    TrainConfig::new(
        context,
        Likelihood::GaussianRegression { noise_variance: noise },
        PriorSpec::isotropic(1.0).unwrap(),
    )
}

#[test]
fn negative_elbo_decreases_with_training_inputs_as_contexts() {
    let data = synthetic_1d(SyntheticKind::GapSine, 20, 0.1, &mut seeded_rng(3)).unwrap();
    let spec = MlpSpec::with_activation(vec![1, 8, 1], Activation::Tanh).unwrap();
    let mut cfg = regression_config(data.len(), 0.01);
    cfg.epochs = 100;
    cfg.batch_size = data.len();
    cfg.learning_rate = 3e-3;
    cfg.schedule = LrSchedule::Constant;
    cfg.kl_scale = 1.0;
    cfg.seed = 11;
    let out = train(&spec, &data, None, &cfg).unwrap();
    let neg: Vec<f64> = out.history.steps.iter().map(|r| -r.elbo).collect();
    assert_eq!(neg.len(), 100);
    for (k, w) in neg.windows(2).enumerate() {
        assert!(w[1] < w[0], "step {}: {} -> {}", k + 1, w[0], w[1]);
    }
}

#[test]
fn in_between_uncertainty_exceeds_uncertainty_at_the_data() {
    let data = synthetic_1d(SyntheticKind::GapSine, 60, 0.1, &mut seeded_rng(0)).unwrap();
    let spec = MlpSpec::with_activation(vec![1, 20, 20, 1], Activation::Tanh).unwrap();
    let mut cfg = regression_config(20, 0.01);
    cfg.context.minibatch_mix = 0.0;
    cfg.epochs = 400;
    cfg.batch_size = 30;
    cfg.learning_rate = 1e-2;
    let out = train(&spec, &data, None, &cfg).unwrap();
    let lik = cfg.likelihood;
    let grid = array![[-2.5], [0.0], [2.5]];
    let PredictiveOutput::Regression { variance, .. } =
        posterior_predictive(&out.posterior, &spec, grid.view(), &lik, 500, &mut seeded_rng(1)).unwrap()
    else {
        unreachable!()
    };
    // x = 0 sits inside the gap; ±2.5 sit inside the training support.
    assert!(variance[[1, 0]] > variance[[0, 0]], "{variance:?}");
    assert!(variance[[1, 0]] > variance[[2, 0]], "{variance:?}");
}

#[test]
fn two_moons_is_less_certain_far_from_the_data() {
    let data = two_moons(200, 0.1, &mut seeded_rng(0)).unwrap();
    let spec = MlpSpec::with_activation(vec![2, 30, 30, 2], Activation::Tanh).unwrap();
    let context = ContextConfig {
        source: ContextSource::UniformBox { bounds: vec![Interval { lo: -10.0, hi: 10.0 }; 2] },
        sets: 1,
        points: 20,
        minibatch_mix: 0.0,
    };
    let lik = Likelihood::CategoricalSoftmax;
    let mut cfg = TrainConfig::new(context, lik, PriorSpec::isotropic(0.1).unwrap());
    cfg.epochs = 1000;
    cfg.batch_size = 100;
    cfg.learning_rate = 1e-2;
    cfg.linearization_mode = LinearizationMode::Exact;
    let out = train(&spec, &data, None, &cfg).unwrap();
    let Targets::Class(labels) = &data.y else { unreachable!() };
    let mut rng = seeded_rng(1);
    let PredictiveOutput::Classification { probs } =
        posterior_predictive(&out.posterior, &spec, data.x.view(), &lik, 200, &mut rng).unwrap()
    else {
        unreachable!()
    };
    assert!(accuracy(probs.view(), labels).unwrap() >= 0.99);
    let in_dist = predictive_entropy(probs.view()).mean().unwrap();
    let corners = array![[-10.0, -10.0], [-10.0, 10.0], [10.0, -10.0], [10.0, 10.0]];
    let far = posterior_predictive(&out.posterior, &spec, corners.view(), &lik, 200, &mut rng)
        .unwrap()
        .entropy()
        .mean()
        .unwrap();
    assert!(far >= 3.0 * in_dist, "corners {far} vs data {in_dist}");
}

#[test]
fn checkpoint_round_trip_reproduces_predictions() {
    let raw = synthetic_1d(SyntheticKind::GapSine, 40, 0.1, &mut seeded_rng(5)).unwrap();
    let (data, _) = standardize(&raw, &[]).unwrap();
    let spec = MlpSpec::with_activation(vec![1, 6, 1], Activation::Relu).unwrap();
    let mut cfg = regression_config(10, 0.05);
    cfg.context.minibatch_mix = 0.5;
    cfg.epochs = 20;
    cfg.batch_size = 16;
    let out = train(&spec, &data, None, &cfg).unwrap();
    let ck = Checkpoint {
        spec: spec.clone(),
        posterior: out.posterior.clone(),
        likelihood: cfg.likelihood,
        feature_stats: data.feature_stats.clone(),
        target_stats: data.target_stats.clone(),
        target_columns: vec![1],
        config_hash: config_hash(&cfg).unwrap(),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    let x: Array2<f64> = data.x.clone();
    let a = posterior_predictive(&out.posterior, &spec, x.view(), &cfg.likelihood, 16, &mut seeded_rng(9))
        .unwrap();
    let b =
        posterior_predictive(&back.posterior, &back.spec, x.view(), &back.likelihood, 16, &mut seeded_rng(9))
            .unwrap();
    assert_eq!(a, b);
    let report = evaluate(&b, &data.y, back.target_stats.as_ref(), None, &[0.0, 0.5]).unwrap();
    assert!(report.rmse.unwrap().is_finite());
    assert_eq!(report.selective.len(), 2);
}
