//! Finite-difference checks of every layer, loss and reduced model
//! composition.

use std::time::Instant;

use rand::{Rng, SeedableRng};

use crate::autograd::{grad_check, Tape, Var};
use crate::error::Result;
use crate::layers::{self, BatchNormState, Mode, Padding};
use crate::losses::{self, AugLoss, ClsLoss, LossConfig, Reduction};
use crate::models::{build_models, InputSpec, ModelConfig};
use crate::seed::RunRng;
use crate::tensor::Tensor;

pub const TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-5;

pub type ConvFn = for<'t> fn(Var<'t>, Var<'t>, Var<'t>, Padding) -> Result<Var<'t>>;

/// Implementations under test. Swapping one in lets a test check that the
/// suite catches a broken backward rule.
#[derive(Clone, Copy)]
pub struct SuiteOps {
    pub conv2d: ConvFn,
}

impl Default for SuiteOps {
    fn default() -> Self {
        Self {
            conv2d: layers::conv2d,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub error: Option<String>,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.max_rel_error < TOLERANCE
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub results: Vec<CheckResult>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = RunRng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Weights the output by a fixed random tensor so every output element
/// contributes a distinct amount to the scalar.
fn project<'t>(tape: &'t Tape, y: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let w = tape.constant(random(&y.shape(), seed));
    y.mul(w)?.sum()
}

/// Checks `f` with respect to each argument in turn, the others held
/// constant; returns the worst error.
fn check_args<F>(args: &[Tensor], f: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let mut worst: f64 = 0.0;
    for k in 0..args.len() {
        let err = grad_check(
            |tape, v| {
                let vars: Vec<Var<'_>> = args
                    .iter()
                    .enumerate()
                    .map(|(i, a)| if i == k { v } else { tape.constant(a.clone()) })
                    .collect();
                f(tape, &vars)
            },
            &args[k],
            EPS,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

type Item = (&'static str, Box<dyn Fn(&SuiteOps) -> Result<f64>>);

fn items() -> Vec<Item> {
    let mut v: Vec<Item> = Vec::new();
    v.push((
        "conv2d same",
        Box::new(|ops| {
            let conv = ops.conv2d;
            let args = [random(&[2, 5, 5, 2], 1), random(&[3, 3, 2, 3], 2), random(&[3], 3)];
            check_args(&args, |t, a| project(t, conv(a[0], a[1], a[2], Padding::Same)?, 4))
        }),
    ));
    v.push((
        "conv2d valid",
        Box::new(|ops| {
            let conv = ops.conv2d;
            let args = [random(&[2, 5, 4, 3], 5), random(&[3, 3, 3, 2], 6), random(&[2], 7)];
            check_args(&args, |t, a| project(t, conv(a[0], a[1], a[2], Padding::Valid)?, 8))
        }),
    ));
    v.push((
        "batchnorm train",
        Box::new(|_| {
            let args = [random(&[3, 2, 2, 3], 9), random(&[3], 10), random(&[3], 11)];
            check_args(&args, |t, a| {
                let mut state = BatchNormState::new(3, 0.9, 1e-5)?;
                project(t, layers::batchnorm_train(a[0], a[1], a[2], &mut state)?, 12)
            })
        }),
    ));
    v.push((
        "batchnorm eval",
        Box::new(|_| {
            let args = [random(&[2, 2, 2, 3], 13), random(&[3], 14), random(&[3], 15)];
            let mut state = BatchNormState::new(3, 0.9, 1e-5)?;
            state.running_mean = random(&[3], 16);
            state.running_var = random(&[3], 17).map(|x| x.abs() + 0.5);
            check_args(&args, |t, a| {
                project(t, layers::batchnorm_eval(a[0], a[1], a[2], &state)?, 18)
            })
        }),
    ));
    v.push((
        "maxpool2d",
        Box::new(|_| {
            let args = [random(&[2, 4, 6, 2], 19)];
            check_args(&args, |t, a| project(t, layers::maxpool2d(a[0])?, 20))
        }),
    ));
    v.push((
        "flatten",
        Box::new(|_| {
            let args = [random(&[2, 2, 3, 2], 21)];
            check_args(&args, |t, a| project(t, layers::flatten(a[0])?, 22))
        }),
    ));
    v.push((
        "dense",
        Box::new(|_| {
            let args = [random(&[3, 5], 23), random(&[5, 4], 24), random(&[4], 25)];
            check_args(&args, |t, a| project(t, layers::dense(a[0], a[1], a[2])?, 26))
        }),
    ));
    v.push((
        "relu",
        Box::new(|_| {
            let args = [random(&[4, 5], 27)];
            check_args(&args, |t, a| {
                project(t, layers::activation(a[0], layers::Activation::Relu)?, 28)
            })
        }),
    ));
    v.push((
        "sigmoid",
        Box::new(|_| {
            let args = [random(&[4, 5], 29).map(|x| 4.0 * x)];
            check_args(&args, |t, a| {
                project(t, layers::activation(a[0], layers::Activation::Sigmoid)?, 30)
            })
        }),
    ));
    v.push((
        "dropout train",
        Box::new(|_| {
            let args = [random(&[4, 6], 31)];
            check_args(&args, |t, a| {
                let mut rng = RunRng::seed_from_u64(32);
                project(t, layers::dropout(a[0], 0.5, Mode::Train, &mut rng)?, 33)
            })
        }),
    ));
    v.push((
        "classification sigmoid_bce",
        Box::new(|_| {
            let args = [random(&[5, 2], 34).map(|x| 3.0 * x)];
            check_args(&args, |_, a| {
                losses::classification_loss(a[0], &[0, 1, 1, 0, 1], ClsLoss::SigmoidBce)
            })
        }),
    ));
    v.push((
        "classification softmax",
        Box::new(|_| {
            let args = [random(&[5, 2], 35).map(|x| 3.0 * x)];
            check_args(&args, |_, a| {
                losses::classification_loss(a[0], &[1, 1, 0, 0, 1], ClsLoss::Softmax)
            })
        }),
    ));
    v.push((
        "content loss",
        Box::new(|_| {
            let args = [random(&[2, 3, 3, 2], 36), random(&[2, 3, 3, 2], 37)];
            check_args(&args, |_, a| losses::content_loss(a[0], a[1], Reduction::Mean))
        }),
    ));
    v.push((
        "gram",
        Box::new(|_| {
            let args = [random(&[3, 2, 3], 38)];
            check_args(&args, |t, a| project(t, losses::gram(a[0])?, 39))
        }),
    ));
    v.push((
        "style loss",
        Box::new(|_| {
            let args = [random(&[2, 3, 3, 3], 40), random(&[2, 3, 3, 3], 41)];
            check_args(&args, |_, a| losses::style_loss(a[0], a[1], Reduction::Mean))
        }),
    ));
    v.push((
        "combined loss",
        Box::new(|_| {
            let args = [random(&[3, 2], 42), random(&[1, 2, 2, 3], 43)];
            let target = random(&[1, 2, 2, 3], 44);
            let cfg = LossConfig::new(AugLoss::Content, 0.75, 0.25)?;
            check_args(&args, |t, a| {
                let lc = losses::classification_loss(a[0], &[0, 1, 0], ClsLoss::SigmoidBce)?;
                let la = losses::content_loss(a[1], t.constant(target.clone()), Reduction::Mean)?;
                losses::combined_loss(lc, Some(la), &cfg)
            })
        }),
    ));
    v.push(("smallnet end-to-end", Box::new(|_| smallnet_check())));
    v.push(("augnet end-to-end", Box::new(|_| augnet_check())));
    v.push(("augnet+smallnet joint", Box::new(|_| joint_check())));
    v
}

fn tiny_spec(c: usize) -> Result<InputSpec> {
    InputSpec::new(8, 8, c)
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        hidden: 32,
        ..Default::default()
    }
}

/// Input gradient and a few parameter gradients through SmallNet in eval
/// mode with non-trivial running statistics.
fn smallnet_check() -> Result<f64> {
    let (mut net, _) = build_models(tiny_spec(1)?, tiny_config(), 11)?;
    {
        let tape = Tape::new();
        let vars = net.params().bind(&tape);
        let x = tape.constant(random(&[6, 8, 8, 1], 50));
        net.forward(&vars, x, Mode::Train, &mut RunRng::seed_from_u64(0))?;
    }
    let labels = [0, 1, 1];
    let x = random(&[3, 8, 8, 1], 51);
    let mut worst: f64 = 0.0;
    // Input, conv1 kernel, bn2 gamma, fc2 weight.
    for which in [None, Some(0), Some(8), Some(12)] {
        let point = match which {
            None => x.clone(),
            Some(i) => net.params().values()[i].clone(),
        };
        let err = grad_check(
            |tape, v| {
                let mut vars: Vec<Var<'_>> = net
                    .params()
                    .values()
                    .iter()
                    .map(|p| tape.constant(p.clone()))
                    .collect();
                let input = match which {
                    None => v,
                    Some(i) => {
                        vars[i] = v;
                        tape.constant(x.clone())
                    }
                };
                let mut n = net.clone();
                let s = n.forward(&vars, input, Mode::Eval, &mut RunRng::seed_from_u64(0))?;
                losses::classification_loss(s, &labels, ClsLoss::SigmoidBce)
            },
            &point,
            EPS,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn augnet_check() -> Result<f64> {
    let (_, aug) = build_models(tiny_spec(3)?, tiny_config(), 12)?;
    let pair = random(&[1, 8, 8, 6], 52);
    let last = aug.params().len() - 2;
    let mut worst: f64 = 0.0;
    for which in [None, Some(0), Some(last)] {
        let point = match which {
            None => pair.clone(),
            Some(i) => aug.params().values()[i].clone(),
        };
        let err = grad_check(
            |tape, v| {
                let mut vars: Vec<Var<'_>> = aug
                    .params()
                    .values()
                    .iter()
                    .map(|p| tape.constant(p.clone()))
                    .collect();
                let input = match which {
                    None => v,
                    Some(i) => {
                        vars[i] = v;
                        tape.constant(pair.clone())
                    }
                };
                project(tape, aug.forward(&vars, input)?, 53)
            },
            &point,
            EPS,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Gradient of the joint objective with respect to AugNet's first kernel.
fn joint_check() -> Result<f64> {
    let (net, aug) = build_models(tiny_spec(3)?, tiny_config(), 13)?;
    let pair = random(&[2, 8, 8, 6], 54);
    let target = random(&[2, 8, 8, 3], 55);
    let cfg = LossConfig::new(AugLoss::Style, 0.75, 0.25)?;
    grad_check(
        |tape, v| {
            let mut av: Vec<Var<'_>> = aug
                .params()
                .values()
                .iter()
                .map(|p| tape.constant(p.clone()))
                .collect();
            av[0] = v;
            let sv: Vec<Var<'_>> = net
                .params()
                .values()
                .iter()
                .map(|p| tape.constant(p.clone()))
                .collect();
            let a = aug.forward(&av, tape.constant(pair.clone()))?;
            let mut n = net.clone();
            let s = n.forward(&sv, a, Mode::Eval, &mut RunRng::seed_from_u64(0))?;
            let lc = losses::classification_loss(s, &[0, 1], ClsLoss::SigmoidBce)?;
            let la = losses::augmentation_loss(a, tape.constant(target.clone()), cfg.aug_loss, Reduction::Mean)?;
            losses::combined_loss(lc, la, &cfg)
        },
        &aug.params().values()[0],
        EPS,
    )
}

pub fn run_suite() -> SuiteReport {
    run_suite_with(&SuiteOps::default())
}

pub fn run_suite_with(ops: &SuiteOps) -> SuiteReport {
    let start = Instant::now();
    let results = items()
        .into_iter()
        .map(|(name, check)| match check(ops) {
            Ok(err) => CheckResult {
                name: name.to_string(),
                max_rel_error: err,
                error: None,
            },
            Err(e) => CheckResult {
                name: name.to_string(),
                max_rel_error: f64::NAN,
                error: Some(e.to_string()),
            },
        })
        .collect();
    SuiteReport {
        results,
        seconds: start.elapsed().as_secs_f64(),
    }
}
