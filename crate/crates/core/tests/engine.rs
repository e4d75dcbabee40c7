use budgeted::data::{make_synthetic, Dataset, Examples, Generator, SyntheticSpec};
use budgeted::engine::{
    full_gradient, full_gradient_norm, train_budgeted, train_objective, Activation, Architecture, EngineError,
    HiddenLayer, Network, Objective, Supervised, TrainConfig,
};
use budgeted::optim::OptimizerConfig;
use budgeted::schedules::{eval_schedule, BudgetClock, ScheduleSpec};
use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn blobs(classes: usize, n: usize, seed: u64) -> Dataset {
    let spec = SyntheticSpec::new(Generator::Blobs {
        classes,
        separation: 2.0,
        n,
        dim: 4,
        clusters_per_class: 1,
    });
    make_synthetic(&spec, seed).unwrap()
}

fn random_architecture(rng: &mut ChaCha8Rng, input_dim: usize) -> Architecture {
    let depth = rng.random_range(0..=3usize);
    let activation = if rng.random_bool(0.5) {
        Activation::Relu
    } else {
        Activation::Tanh
    };
    let mut hidden: Vec<HiddenLayer> = Vec::new();
    for l in 0..depth {
        let prev = if l == 0 { input_dim } else { hidden[l - 1].width };
        let skip = rng.random_bool(0.4);
        let width = if skip { prev } else { rng.random_range(2..=6) };
        hidden.push(HiddenLayer { width, skip });
    }
    Architecture { hidden, activation }
}

#[test]
fn backward_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let dim = rng.random_range(1..=4usize);
        let classes = rng.random_range(2..=4usize);
        let arch = random_architecture(&mut rng, dim);
        let net = Network::new(&arch, dim, classes).unwrap();
        let w: Vec<f64> = (0..net.n_weights()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let batch = rng.random_range(1..=6usize);
        let x = Array2::from_shape_fn((batch, dim), |_| rng.random_range(-2.0..2.0));
        let y: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();

        let mut grad = vec![0.0; net.n_weights()];
        net.loss_and_grad(&w, &x.view(), &y, Some(&mut grad)).unwrap();
        let h = 1e-5;
        let mut numeric = vec![0.0; net.n_weights()];
        for i in 0..w.len() {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[i] += h;
            wm[i] -= h;
            let fp = net.loss_and_grad(&wp, &x.view(), &y, None).unwrap();
            let fm = net.loss_and_grad(&wm, &x.view(), &y, None).unwrap();
            numeric[i] = (fp - fm) / (2.0 * h);
        }
        let diff: f64 = grad
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale: f64 = numeric.iter().map(|b| b * b).sum::<f64>().sqrt().max(1e-8);
        let rel = diff / scale;
        worst = worst.max(rel);
        assert!(rel < 1e-4, "case {case} ({arch}): relative error {rel}");
    }
    assert!(worst < 1e-4);
}

#[test]
fn zero_weights_give_uniform_loss() {
    let x = array![[1.0, -2.0], [0.5, 3.0], [0.0, 0.0]];
    let bin = Network::new(&Architecture::logistic(), 2, 2).unwrap();
    let loss = bin
        .loss_and_grad(&vec![0.0; bin.n_weights()], &x.view(), &[0, 1, 1], None)
        .unwrap();
    assert!((loss - 2f64.ln()).abs() < 1e-15);
    let multi = Network::new(&Architecture::mlp(&[5], Activation::Tanh), 2, 5).unwrap();
    let loss = multi
        .loss_and_grad(&vec![0.0; multi.n_weights()], &x.view(), &[4, 0, 2], None)
        .unwrap();
    assert!((loss - 5f64.ln()).abs() < 1e-15);
}

#[test]
fn huge_margin_drives_loss_to_zero() {
    let net = Network::new(&Architecture::logistic(), 1, 2).unwrap();
    let x = array![[1.0], [-1.0]];
    let loss = net.loss_and_grad(&[1e3, 0.0], &x.view(), &[1, 0], None).unwrap();
    assert!(loss < 1e-300);
}

#[test]
fn duplicated_batch_has_same_gradient() {
    let net = Network::new(&Architecture::mlp(&[3, 3], Activation::Relu), 2, 3).unwrap();
    let w = net.init_weights(5);
    let x = array![[0.3, -0.7], [1.2, 0.4]];
    let xx = array![[0.3, -0.7], [1.2, 0.4], [0.3, -0.7], [1.2, 0.4]];
    let mut g1 = vec![0.0; net.n_weights()];
    let mut g2 = vec![0.0; net.n_weights()];
    net.loss_and_grad(&w, &x.view(), &[2, 0], Some(&mut g1)).unwrap();
    net.loss_and_grad(&w, &xx.view(), &[2, 0, 2, 0], Some(&mut g2)).unwrap();
    for (a, b) in g1.iter().zip(&g2) {
        assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
    }
}

#[test]
fn forward_errors() {
    let net = Network::new(&Architecture::logistic(), 2, 2).unwrap();
    let w = vec![0.0; net.n_weights()];
    let x = array![[1.0, 2.0, 3.0]];
    assert!(matches!(
        net.loss_and_grad(&w, &x.view(), &[0], None),
        Err(EngineError::DimensionMismatch { .. })
    ));
    let x = array![[1.0, 2.0]];
    assert!(matches!(
        net.loss_and_grad(&w, &x.view(), &[2], None),
        Err(EngineError::LabelOutOfRange { .. })
    ));
    assert!(matches!(
        net.loss_and_grad(&[f64::NAN, 0.0, 0.0], &x.view(), &[1], None),
        Err(EngineError::NonFinite)
    ));
    assert!(Network::new(&"relu:3s".parse().unwrap(), 2, 2).is_err());
    assert!(Network::new(&"relu:2s".parse().unwrap(), 2, 2).is_ok());
    assert!(Network::new(&"relu:2-2-2-2".parse().unwrap(), 2, 2).is_err());
}

#[test]
fn architecture_text_round_trip() {
    for text in ["logistic", "relu:64-64s-32", "tanh:8"] {
        let a: Architecture = text.parse().unwrap();
        assert_eq!(a.to_string(), text);
    }
    assert!("sigmoid:4".parse::<Architecture>().is_err());
    assert!("relu:".parse::<Architecture>().is_err());
}

#[test]
fn symmetric_points_cancel_at_origin() {
    let train = Examples {
        features: array![[1.0], [-1.0], [1.0], [-1.0]],
        labels: vec![1, 0, 0, 1],
        classes: 2,
    };
    let data = Dataset {
        val: train.clone(),
        train,
    };
    let net = Network::new(&Architecture::logistic(), 1, 2).unwrap();
    let obj = Supervised::new(&net, &data).unwrap();
    assert_eq!(full_gradient_norm(&obj, &[0.0, 0.0]).unwrap(), 0.0);
    assert!(full_gradient_norm(&obj, &[0.5, 0.0]).unwrap() > 0.0);
}

#[test]
fn full_gradient_is_mean_of_per_example_gradients() {
    let data = blobs(3, 2500, 11);
    let net = Network::new(&Architecture::mlp(&[6, 6], Activation::Tanh), data.dim(), 3).unwrap();
    let w = net.init_weights(3);
    let obj = Supervised::new(&net, &data).unwrap();
    let fast = full_gradient(&obj, &w).unwrap();
    let n = data.train.len();
    let mut sum = vec![0.0; net.n_weights()];
    let mut g = vec![0.0; net.n_weights()];
    for i in 0..n {
        obj.loss_grad(&w, &[i], &mut g).unwrap();
        for (s, gi) in sum.iter_mut().zip(&g) {
            *s += gi;
        }
    }
    let naive: f64 = sum.iter().map(|s| (s / n as f64).powi(2)).sum::<f64>().sqrt();
    let norm = full_gradient_norm(&obj, &w).unwrap();
    assert!((norm - naive).abs() <= 1e-12 * naive);
    assert_eq!(fast.len(), net.n_weights());
}

#[test]
fn logistic_optimum_is_stationary() {
    let data = blobs(2, 300, 2);
    let net = Network::new(&Architecture::logistic(), data.dim(), 2).unwrap();
    let mut cfg = TrainConfig::new(
        ScheduleSpec::Constant,
        4000,
        data.train.len(),
        OptimizerConfig {
            momentum: 0.9,
            base_lr: 2.0,
            ..OptimizerConfig::sgd()
        },
        0,
    );
    cfg.eval.every = Some(4000);
    let run = train_budgeted(&net, &data, &cfg).unwrap();
    assert!(!run.diverged());
    let g = run.evaluations.last().unwrap().full_grad_norm.unwrap();
    assert!(g < 1e-6, "full gradient norm {g}");
}

/// `f(w) = w^2 / 2` with a single example.
struct Bowl;

impl Objective for Bowl {
    fn n_weights(&self) -> usize {
        1
    }

    fn n_examples(&self) -> usize {
        1
    }

    fn loss_grad(&self, w: &[f64], _batch: &[usize], grad: &mut [f64]) -> Result<f64, EngineError> {
        grad[0] = w[0];
        Ok(0.5 * w[0] * w[0])
    }

    fn val_accuracy(&self, _w: &[f64]) -> Result<f64, EngineError> {
        Ok(1.0)
    }
}

#[test]
fn quadratic_bowl_follows_closed_form() {
    let opt = OptimizerConfig {
        momentum: 0.0,
        base_lr: 0.1,
        ..OptimizerConfig::sgd()
    };
    let cfg = TrainConfig::new(ScheduleSpec::Constant, 50, 1, opt, 0);
    let run = train_objective(&Bowl, vec![1.0], &cfg, None).unwrap();
    assert_eq!(run.iterations.len(), 50);
    for s in &run.iterations {
        let w = 0.9f64.powi(s.iter as i32);
        assert!(
            (s.train_loss - 0.5 * w * w).abs() <= 1e-12 * 0.5 * w * w,
            "t={}",
            s.iter
        );
    }
    let last = run.evaluations.last().unwrap();
    assert!((last.weight_norm - 0.9f64.powi(50)).abs() <= 1e-12 * 0.9f64.powi(50));
}

#[test]
fn budget_boundaries() {
    let data = blobs(2, 200, 1);
    let net = Network::new(&Architecture::logistic(), data.dim(), 2).unwrap();
    let cfg = TrainConfig::new(ScheduleSpec::Linear, 0, 16, OptimizerConfig::sgd(), 0);
    assert!(matches!(
        train_budgeted(&net, &data, &cfg),
        Err(EngineError::ZeroBudget)
    ));
    let cfg = TrainConfig::new(ScheduleSpec::Linear, 1, 16, OptimizerConfig::sgd(), 0);
    let run = train_budgeted(&net, &data, &cfg).unwrap();
    assert_eq!(run.iterations.len(), 1);
    assert_eq!(run.iterations[0].beta, 1.0);
    assert_eq!(run.evaluations.len(), 1);
    assert_eq!(run.meta.completed, 1);
    let unaware = TrainConfig::new(ScheduleSpec::exponential(0.99), 10, 16, OptimizerConfig::sgd(), 0);
    assert!(matches!(
        train_budgeted(&net, &data, &unaware),
        Err(EngineError::UnawareSchedule(_))
    ));
}

#[test]
fn recorded_lr_matches_schedule_and_accuracy_is_bounded() {
    let data = blobs(4, 600, 3);
    let net = Network::new(&"relu:16-16s".parse().unwrap(), data.dim(), 4).unwrap();
    let budget = 97;
    for schedule in [
        ScheduleSpec::htd(),
        ScheduleSpec::sgdr_aware(2),
        ScheduleSpec::step_even(3),
    ] {
        let cfg = TrainConfig::new(schedule.clone(), budget, 32, OptimizerConfig::sgd(), 9);
        let run = train_budgeted(&net, &data, &cfg).unwrap();
        assert_eq!(run.iterations.len() as u64, budget);
        for s in &run.iterations {
            let beta = eval_schedule(&schedule, &BudgetClock::new(s.iter, budget).unwrap()).unwrap();
            assert_eq!(s.beta, beta);
            assert_eq!(s.lr, cfg.optimizer.base_lr * beta);
        }
        // Epochs of 17 iterations, plus the final partial one.
        assert_eq!(run.evaluations.len(), 6);
        assert_eq!(run.evaluations.last().unwrap().iteration, budget);
        assert!(run.evaluations.iter().all(|e| (0.0..=1.0).contains(&e.val_acc)));
    }
}

#[test]
fn zero_learning_rate_keeps_loss_constant() {
    let data = blobs(3, 300, 4);
    let net = Network::new(&"tanh:8".parse().unwrap(), data.dim(), 3).unwrap();
    let opt = OptimizerConfig {
        base_lr: 0.0,
        ..OptimizerConfig::sgd()
    };
    let cfg = TrainConfig::new(ScheduleSpec::Linear, 20, data.train.len(), opt, 1);
    let run = train_budgeted(&net, &data, &cfg).unwrap();
    let first = run.iterations[0].train_loss;
    // Reshuffling reorders the sum, so equality holds up to rounding.
    assert!(run
        .iterations
        .iter()
        .all(|s| (s.train_loss - first).abs() <= 1e-13 * first));
}

#[test]
fn identical_configs_are_bitwise_identical() {
    let data = blobs(4, 500, 8);
    let net = Network::new(&"relu:12-12".parse().unwrap(), data.dim(), 4).unwrap();
    let mut cfg = TrainConfig::new(ScheduleSpec::cosine(), 60, 25, OptimizerConfig::amsgrad(), 21);
    cfg.warmup = 5;
    let a = train_budgeted(&net, &data, &cfg).unwrap();
    let b = train_budgeted(&net, &data, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.iterations_csv(), b.iterations_csv());
    assert_eq!(a.evaluations_csv(), b.evaluations_csv());
    cfg.seed = 22;
    let c = train_budgeted(&net, &data, &cfg).unwrap();
    assert_ne!(a.iterations_csv(), c.iterations_csv());
}

#[test]
fn exploding_run_is_flagged() {
    let data = blobs(2, 200, 5);
    let net = Network::new(&"relu:32-32".parse().unwrap(), data.dim(), 2).unwrap();
    let opt = OptimizerConfig {
        base_lr: 1e4,
        momentum: 0.0,
        ..OptimizerConfig::sgd()
    };
    let cfg = TrainConfig::new(ScheduleSpec::Constant, 200, 8, opt, 0);
    let run = train_budgeted(&net, &data, &cfg).unwrap();
    assert!(run.diverged());
    assert!(run.meta.completed < 200);
    assert_eq!(run.iterations.len() as u64, run.meta.completed);
}
