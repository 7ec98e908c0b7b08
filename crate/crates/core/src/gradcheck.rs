//! Central finite-difference gradient checks at 64-bit, and the suite
//! that runs them over every layer and the full network.

use alloc::{string::String, vec, vec::Vec};

use rand_chacha::{
    rand_core::{RngCore, SeedableRng},
    ChaCha8Rng,
};

use crate::{
    error::Result,
    graph::{Graph, Mode, Var},
    losses::{composite_loss, ClassWeights, LossWeights},
    network::{
        ContextHead, DenseBlock, EncodingLayer, FfceNet, ForwardInputs, ForwardOptions, LayerCtx, NetworkConfig, Scse,
    },
    params::ParamStore,
    tensor::Tensor,
};

pub const DEFAULT_STEP: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Which coordinates of each parameter to perturb.
#[derive(Debug, Clone, Copy)]
pub struct Probes {
    /// Every coordinate when `None`, otherwise at most this many per
    /// parameter tensor, drawn without replacement.
    pub max_per_param: Option<usize>,
    pub seed: u64,
}

impl Probes {
    pub fn all() -> Self {
        Self {
            max_per_param: None,
            seed: 0,
        }
    }

    pub fn sampled(max_per_param: usize, seed: u64) -> Self {
        Self {
            max_per_param: Some(max_per_param),
            seed,
        }
    }
}

/// One evaluation of the function under test.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: f64,
    /// Gradient per parameter; may be left empty when not requested.
    pub grads: Vec<Tensor<f64>>,
    /// [`Graph::branch_signature`] of the evaluation.
    pub branches: u64,
}

/// A single compared coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub step: f64,
    pub error: f64,
}

/// Outcome of [`grad_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Max relative error per parameter tensor (0 when nothing was probed).
    pub max_errors: Vec<f64>,
    /// Probe attaining the max error, per parameter tensor.
    pub worst: Vec<Option<Probe>>,
    pub probes: usize,
    /// Coordinates discarded because every tried step crossed a kink.
    pub skipped: usize,
}

impl GradCheck {
    pub fn max_error(&self) -> f64 {
        self.max_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Step reductions tried when a difference crosses a kink.
const STEP_SHRINKS: usize = 2;
/// Step enlargements tried when roundoff dominates a small derivative.
const STEP_WIDENINGS: usize = 3;
/// Bound on the roundoff of one loss evaluation, relative to the loss.
const LOSS_ROUNDOFF: f64 = 4.0 * f64::EPSILON;
/// Roundoff share of a derivative estimate below which it is accepted
/// without widening the step.
const ROUNDOFF_TOLERANCE: f64 = 1e-6;

/// Compares the gradient returned by `f` with central differences of its
/// loss. `f(values, want_grads)` must be deterministic and may skip the
/// gradients when `want_grads` is false.
///
/// A difference whose evaluations disagree on [`Evaluation::branches`]
/// straddles a kink (ReLU, max-pool, max); it is retried with the step
/// divided by 10 up to twice, and otherwise the coordinate is skipped and,
/// for sampled probes, replaced by another one. When the roundoff bound of
/// an estimate is not negligible against the estimate itself, the step is
/// widened tenfold up to three times (stopping at any kink) and the
/// estimate that agrees best with its predecessor is kept.
pub fn grad_check<F>(mut f: F, params: &[Tensor<f64>], step: f64, probes: Probes) -> Result<GradCheck>
where
    F: FnMut(&[Tensor<f64>], bool) -> Result<Evaluation>,
{
    let base = f(params, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(probes.seed);
    let mut work = params.to_vec();
    let mut report = GradCheck {
        max_errors: Vec::with_capacity(params.len()),
        worst: Vec::with_capacity(params.len()),
        probes: 0,
        skipped: 0,
    };
    for (pi, p) in params.iter().enumerate() {
        let numel = p.numel();
        let wanted = probes.max_per_param.map_or(numel, |m| m.min(numel));
        let mut order: Vec<usize> = (0..numel).collect();
        let (mut worst, mut accepted) = (None::<Probe>, 0);
        for k in 0..numel {
            if accepted == wanted {
                break;
            }
            if probes.max_per_param.is_some() {
                let j = k + (rng.next_u64() % (numel - k) as u64) as usize;
                order.swap(k, j);
            }
            let i = order[k];
            let mut diff = |h: f64| -> Result<Option<f64>> {
                let orig = params[pi].data()[i];
                work[pi].data_mut()[i] = orig + h;
                let plus = f(&work, false)?;
                work[pi].data_mut()[i] = orig - h;
                let minus = f(&work, false)?;
                work[pi].data_mut()[i] = orig;
                if plus.branches != base.branches || minus.branches != base.branches {
                    return Ok(None);
                }
                Ok(Some((plus.loss - minus.loss) / (2.0 * h)))
            };
            match estimate(&mut diff, step, base.loss.abs())? {
                Some((numeric, step)) => {
                    let analytic = base.grads[pi].data()[i];
                    let error = relative_error(analytic, numeric);
                    if worst.is_none_or(|w| error > w.error) {
                        worst = Some(Probe {
                            index: i,
                            analytic,
                            numeric,
                            step,
                            error,
                        });
                    }
                    accepted += 1;
                }
                None => report.skipped += 1,
            }
        }
        report.probes += accepted;
        report.max_errors.push(worst.map_or(0.0, |w| w.error));
        report.worst.push(worst);
    }
    Ok(report)
}

/// Central-difference derivative and the step it used, or `None` when
/// every step tried crosses a kink. `diff(h)` returns `None` on a kink.
fn estimate(
    diff: &mut impl FnMut(f64) -> Result<Option<f64>>,
    step: f64,
    loss_scale: f64,
) -> Result<Option<(f64, f64)>> {
    let mut h = step;
    let mut first = None;
    for _ in 0..=STEP_SHRINKS {
        first = diff(h)?;
        if first.is_some() {
            break;
        }
        h /= 10.0;
    }
    let Some(mut prev) = first else { return Ok(None) };
    if h < step {
        return Ok(Some((prev, h)));
    }
    let roundoff = |h: f64| LOSS_ROUNDOFF * loss_scale.max(f64::MIN_POSITIVE) / h;
    let mut best = (prev, h);
    let mut best_gap = f64::INFINITY;
    for _ in 0..STEP_WIDENINGS {
        if roundoff(h) <= ROUNDOFF_TOLERANCE * prev.abs() {
            break;
        }
        h *= 10.0;
        let Some(d) = diff(h)? else { break };
        let gap = (d - prev).abs();
        if gap < best_gap {
            best_gap = gap;
            best = (d, h);
        }
        prev = d;
    }
    Ok(Some(best))
}

/// Outcome of one entry of [`run_suite`].
#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: String,
    pub seeds: usize,
    pub max_error: f64,
    pub threshold: f64,
    pub probes: usize,
    pub skipped: usize,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.max_error < self.threshold && self.probes > 0
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        2.0 * u - 1.0
    })
}

/// Loss `Σ out ⊙ weights` for a fixed random weight tensor, so every
/// output coordinate carries a distinct upstream gradient.
fn project(g: &mut Graph<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w)?;
    g.sum_all(prod)
}

/// Checks an op built from leaves holding `params`. `build` records the
/// op and returns its output; the loss projects it onto random weights.
fn check_op<B>(seed: u64, params: Vec<Tensor<f64>>, step: f64, probes: Probes, build: B) -> Result<GradCheck>
where
    B: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut weights: Option<Tensor<f64>> = None;
    let mut proj_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    grad_check(
        |vals, want_grads| {
            let mut g = Graph::new();
            let vars: Vec<Var> = vals.iter().map(|v| g.param(v.clone())).collect();
            let out = build(&mut g, &vars)?;
            let w = weights
                .get_or_insert_with(|| random(g.shape(out), &mut proj_rng))
                .clone();
            let loss = project(&mut g, out, &w)?;
            let mut grads = Vec::new();
            if want_grads {
                g.backward(loss)?;
                grads = vars.iter().map(|&v| g.grad_tensor(v)).collect();
            }
            Ok(Evaluation {
                loss: g.value(loss).item(),
                grads,
                branches: g.branch_signature(),
            })
        },
        &params,
        step,
        probes,
    )
}

/// Checks a layer whose parameters live in `store`, applied to `input`.
fn check_layer<B>(
    seed: u64,
    store: ParamStore<f64>,
    input: Tensor<f64>,
    mode: Mode,
    probes: Probes,
    build: B,
) -> Result<GradCheck>
where
    B: Fn(&mut LayerCtx<'_, f64, ChaCha8Rng>, Var) -> Result<Var>,
{
    let mut params = store.values();
    params.push(input);
    let n = params.len() - 1;
    let mut weights: Option<Tensor<f64>> = None;
    let mut proj_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51ed);
    grad_check(
        |vals, want_grads| {
            let mut store = store.clone();
            store.set_values(&vals[..n])?;
            let mut g = Graph::new();
            let vars = store.bind(&mut g);
            let x = g.param(vals[n].clone());
            // same dropout mask on every evaluation
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut ctx = LayerCtx::new(&mut g, &store, &vars, mode, &mut rng, 0.1);
            let out = build(&mut ctx, x)?;
            drop(ctx);
            let w = weights
                .get_or_insert_with(|| random(g.shape(out), &mut proj_rng))
                .clone();
            let loss = project(&mut g, out, &w)?;
            let mut grads = Vec::new();
            if want_grads {
                g.backward(loss)?;
                grads = store.grads(&g, &vars);
                grads.push(g.grad_tensor(x));
            }
            Ok(Evaluation {
                loss: g.value(loss).item(),
                grads,
                branches: g.branch_signature(),
            })
        },
        &params,
        DEFAULT_STEP,
        probes,
    )
}

fn layer_config() -> NetworkConfig {
    NetworkConfig {
        num_classes: 3,
        stack_depth: 2,
        channels: 4,
        codewords: 3,
        ..NetworkConfig::default()
    }
}

/// Toy configuration of the end-to-end check.
pub fn toy_network_config() -> NetworkConfig {
    NetworkConfig {
        num_classes: 3,
        stack_depth: 2,
        channels: 8,
        codewords: 4,
        ..NetworkConfig::default()
    }
}

/// Checks the composite loss gradient through the full network on the
/// toy configuration (16×16 inputs, batch of 4, train mode), with
/// parameters moved off their initial values.
pub fn check_full_network(seed: u64, probes: Probes, step: f64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = toy_network_config();
    let mut net = FfceNet::<f64>::new(config.clone(), &mut rng)?;
    perturb(net.store_mut(), &mut rng);
    let (n, hw, l) = (4, 16, config.num_classes);
    let slice = random(&[n, 1, hw, hw], &mut rng);
    let stack = random(&[n, config.stack_depth, hw, hw], &mut rng);
    let labels: Vec<u16> = (0..n * hw * hw).map(|_| (rng.next_u32() % l as u32) as u16).collect();
    let presence: Vec<f64> = (0..n * l).map(|_| (rng.next_u32() % 2) as f64).collect();
    let omega = ClassWeights::new((0..l).map(|c| 0.5 + c as f64 * 0.25).collect())?;
    let weights = LossWeights::default();
    grad_check(
        |vals, want_grads| {
            let mut model = net.clone();
            model.store_mut().set_values(vals)?;
            let mut g = Graph::new();
            let mut drop_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
            let fwd = model.forward(
                &mut g,
                ForwardInputs {
                    slice: &slice,
                    stack: Some(&stack),
                },
                Mode::Train,
                &mut drop_rng,
                &ForwardOptions::default(),
            )?;
            let loss = composite_loss(&mut g, &fwd.out, &labels, &presence, &omega, &weights)?;
            let mut grads = Vec::new();
            if want_grads {
                g.backward(loss.total)?;
                grads = model.store().grads(&g, &fwd.param_vars);
            }
            Ok(Evaluation {
                loss: g.value(loss.total).item(),
                grads,
                branches: g.branch_signature(),
            })
        },
        &net.store().values(),
        step,
        probes,
    )
}

type Check = fn(u64) -> Result<GradCheck>;

fn layer_checks() -> Vec<(&'static str, f64, Check)> {
    vec![
        ("conv2d 3x3", 1e-6, |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let p = vec![
                random(&[2, 3, 5, 5], &mut r),
                random(&[4, 3, 3, 3], &mut r),
                random(&[4], &mut r),
            ];
            check_op(seed, p, DEFAULT_STEP, Probes::all(), |g, v| {
                g.conv2d(v[0], v[1], Some(v[2]), 1, 1)
            })
        }),
        ("conv2d 5x5", 1e-6, |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let p = vec![
                random(&[1, 2, 4, 4], &mut r),
                random(&[3, 2, 5, 5], &mut r),
                random(&[3], &mut r),
            ];
            check_op(seed, p, DEFAULT_STEP, Probes::all(), |g, v| {
                g.conv2d(v[0], v[1], Some(v[2]), 1, 2)
            })
        }),
        ("maxpool2d", 1e-5, |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            check_op(
                seed,
                vec![random(&[2, 2, 4, 4], &mut r)],
                DEFAULT_STEP,
                Probes::all(),
                |g, v| g.maxpool2d(v[0], 2),
            )
        }),
        ("upsample_bilinear2x", 1e-6, |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            check_op(
                seed,
                vec![random(&[1, 2, 3, 3], &mut r)],
                DEFAULT_STEP,
                Probes::all(),
                |g, v| g.upsample_bilinear2x(v[0]),
            )
        }),
        ("batchnorm2d train", 1e-5, |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let p = vec![
                random(&[3, 2, 3, 3], &mut r),
                random(&[2], &mut r),
                random(&[2], &mut r),
            ];
            check_op(seed, p, DEFAULT_STEP, Probes::all(), |g, v| {
                Ok(g.batchnorm_train(v[0], v[1], v[2], 1e-5)?.0)
            })
        }),
        ("batchnorm2d eval", 1e-5, |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let p = vec![
                random(&[2, 2, 3, 3], &mut r),
                random(&[2], &mut r),
                random(&[2], &mut r),
            ];
            check_op(seed, p, DEFAULT_STEP, Probes::all(), |g, v| {
                g.batchnorm_eval(v[0], v[1], v[2], &[0.1, -0.2], &[0.5, 2.0], 1e-5)
            })
        }),
        ("linear", 1e-6, |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let p = vec![random(&[3, 4], &mut r), random(&[5, 4], &mut r), random(&[5], &mut r)];
            check_op(seed, p, DEFAULT_STEP, Probes::all(), |g, v| {
                g.linear(v[0], v[1], Some(v[2]))
            })
        }),
        ("pointwise (relu, sigmoid, add, mul, maximum)", 1e-5, |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let p = vec![
                random(&[2, 3, 2, 2], &mut r),
                random(&[2, 3, 2, 2], &mut r),
                random(&[2, 3, 1, 1], &mut r),
                random(&[2, 1, 2, 2], &mut r),
            ];
            check_op(seed, p, DEFAULT_STEP, Probes::all(), |g, v| {
                let a = g.relu(v[0])?;
                let s = g.sigmoid(v[1])?;
                let sum = g.add(a, s)?;
                let cm = g.mul(sum, v[2])?;
                let sm = g.mul(v[1], v[3])?;
                g.maximum(cm, sm)
            })
        }),
        ("softmax_channels, concat, slice, mean, reshape", 1e-5, |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let p = vec![random(&[2, 2, 3, 3], &mut r), random(&[2, 3, 3, 3], &mut r)];
            check_op(seed, p, DEFAULT_STEP, Probes::all(), |g, v| {
                let c = g.concat_channels(&[v[0], v[1]])?;
                let sm = g.softmax_channels(c)?;
                let part = g.slice_channels(sm, 1, 3)?;
                let m = g.mean(part, &[2, 3])?;
                let m = g.reshape(m, [2, 3, 1, 1])?;
                let s = g.sum(v[1], &[1])?;
                let s = g.reshape(s, [2, 9, 1, 1])?;
                g.concat_channels(&[m, s])
            })
        }),
        ("dropout", 1e-5, |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            check_op(
                seed,
                vec![random(&[2, 3, 4, 4], &mut r)],
                DEFAULT_STEP,
                Probes::all(),
                move |g, v| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    g.dropout(v[0], 0.3, Mode::Train, &mut rng)
                },
            )
        }),
        ("sc-SE", 1e-5, |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let scse = Scse::new(&mut store, "scse", 4, 2, &mut r)?;
            perturb(&mut store, &mut r);
            check_layer(
                seed,
                store,
                random(&[2, 4, 3, 3], &mut r),
                Mode::Train,
                Probes::all(),
                move |ctx, x| scse.forward(ctx, x),
            )
        }),
        ("dense block", 1e-5, |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let block = DenseBlock::new(&mut store, "block", 3, &layer_config(), &mut r)?;
            perturb(&mut store, &mut r);
            check_layer(
                seed,
                store,
                random(&[2, 3, 4, 4], &mut r),
                Mode::Train,
                Probes::sampled(6, seed),
                move |ctx, x| block.forward(ctx, x),
            )
        }),
        ("encoding layer", 1e-5, |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let enc = EncodingLayer::new(&mut store, "encoding", 4, 3, &mut r)?;
            check_layer(
                seed,
                store,
                random(&[2, 4, 3, 3], &mut r),
                Mode::Train,
                Probes::all(),
                move |ctx, x| enc.forward(ctx, x),
            )
        }),
        ("context gamma", 1e-6, |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let head = ContextHead::new(&mut store, "context", 4, 3, &mut r)?;
            perturb(&mut store, &mut r);
            check_layer(
                seed,
                store,
                random(&[2, 4], &mut r),
                Mode::Train,
                Probes::all(),
                move |ctx, e| {
                    let (gamma, logits) = head.forward(ctx, e)?;
                    let a = ctx.graph.reshape(gamma, [2, 3, 1, 1])?;
                    let b = ctx.graph.reshape(logits, [2, 3, 1, 1])?;
                    ctx.graph.concat_channels(&[a, b])
                },
            )
        }),
        ("losses (ce, dice, sec)", 1e-5, |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let (n, l, hw) = (2, 3, 3);
            let labels: Vec<u16> = (0..n * hw * hw).map(|_| (r.next_u32() % l as u32) as u16).collect();
            let presence: Vec<f64> = (0..n * l).map(|_| (r.next_u32() % 2) as f64).collect();
            let p = vec![random(&[n, l, hw, hw], &mut r), random(&[n, l], &mut r)];
            check_op(seed, p, DEFAULT_STEP, Probes::all(), move |g, v| {
                let probs = g.softmax_channels(v[0])?;
                let ce = g.cross_entropy(probs, &labels, &[0.7, 1.0, 1.6])?;
                let dice = g.dice_loss(probs, &labels)?;
                let sec = g.bce_with_logits(v[1], &presence)?;
                g.weighted_sum(&[(ce, 1.0), (dice, 1.0), (sec, 0.1)])
            })
        }),
    ]
}

// Moves parameters off their initial constants (BN scale 1 / shift 0, zero
// biases) so every gradient path is exercised.
fn perturb(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for p in store.params_mut() {
        for v in p.value.data_mut() {
            let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
            *v += 0.5 * (u - 0.5);
        }
    }
}

/// Runs every layer check and the end-to-end network check for seeds
/// `0..seeds`. Layer thresholds are 1e-5 (1e-6 for conv, upsample and the affine layers);
/// the end-to-end threshold is 1e-4.
pub fn run_suite(seeds: usize) -> Result<Vec<SuiteEntry>> {
    let mut entries = Vec::new();
    for (name, threshold, check) in layer_checks() {
        entries.push(suite_entry(name, threshold, seeds, check)?);
    }
    entries.push(suite_entry(
        "composite loss through full network (16x16, S=2, L=3, K=4, channels=8)",
        1e-4,
        seeds,
        |seed| check_full_network(seed, Probes::sampled(1, seed), DEFAULT_STEP),
    )?);
    Ok(entries)
}

fn suite_entry(
    name: &str,
    threshold: f64,
    seeds: usize,
    check: impl Fn(u64) -> Result<GradCheck>,
) -> Result<SuiteEntry> {
    let mut entry = SuiteEntry {
        name: name.into(),
        seeds,
        max_error: 0.0,
        threshold,
        probes: 0,
        skipped: 0,
    };
    for seed in 0..seeds as u64 {
        let r = check(seed)?;
        entry.max_error = entry.max_error.max(r.max_error());
        entry.probes += r.probes;
        entry.skipped += r.skipped;
    }
    Ok(entry)
}
