//! Shared finite-difference suites for the gradient tests and the acceptance run.

#![allow(dead_code)]

use fbnet::cell::{CellState, ConvLstmParams, GateOverrides, GateStack, GateStackSpec};
use fbnet::curriculum::{episodic_loss, CurriculumSchedule, Direction};
use fbnet::network::{
    training_loss, ConvSpec, FeedbackNet, FeedbackNetSpec, IterationTrace, LossMode, ModuleSpec, PoolSpec,
    SkipPlacement, SkipSpec,
};
use fbnet::taxonomy::{coarse_loss, Taxonomy};
use fbnet::tensor::gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};
use fbnet::tensor::tape::{BatchNormConfig, RunningStats};
use fbnet::tensor::{Mode, ParamId, ParamStore, Rng, Tape, Tensor, Var};
use fbnet::Result;

pub const OP_TOL: f64 = 1e-4;
pub const NET_TOL: f64 = 1e-3;
/// Share of full-network elements that must meet [`NET_TOL`].
pub const NET_MIN_FRACTION: f64 = 0.99;

/// Values kept at least `margin` away from zero, so relu kinks stay out of
/// the finite-difference stencil.
fn away_from_zero(rng: &mut Rng, shape: &[usize], margin: f64) -> Tensor<f64> {
    let mut t = rng.uniform_tensor::<f64>(shape, 1.0);
    for v in t.data_mut() {
        if v.abs() < margin {
            *v = if *v < 0.0 { -margin } else { margin };
        }
    }
    t
}

/// `sum(y ∘ r)` for a fixed random `r`, so every output element carries a
/// distinct upstream gradient.
fn project(tape: &mut Tape<f64>, y: Var, rng_seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let r = Rng::new(rng_seed).uniform_tensor::<f64>(&shape, 1.0);
    let r = tape.constant(r);
    let p = tape.hadamard(y, r)?;
    Ok(tape.sum(p))
}

type OpLoss = Box<dyn FnMut(&ParamStore<f64>, &mut Tape<f64>, &[ParamId]) -> Result<Var>>;

fn run(store: &mut (ParamStore<f64>, Vec<ParamId>, OpLoss)) -> Result<GradCheckReport> {
    check_gradients(
        store,
        |s| &mut s.0,
        |s, tape| {
            let (params, ids, f) = s;
            f(params, tape, ids)
        },
        GradCheckOptions::default(),
    )
}

fn op_case(inputs: Vec<(&str, Tensor<f64>)>, f: OpLoss) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let ids = inputs.into_iter().map(|(n, t)| store.add(n, t)).collect();
    run(&mut (store, ids, f))
}

/// Gradient checks of every differentiable tape operation plus the composite
/// losses and cell pieces, for one seed.
pub fn op_suite(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = Rng::new(seed);
    let proj = seed.wrapping_mul(7919).wrapping_add(13);
    let mut out = Vec::new();

    for (name, stride, pad, k) in [("conv2d stride 2", 2, 1, 3), ("conv2d stride 1", 1, 1, 3), ("conv2d 1x1", 1, 0, 1)] {
        let x = rng.uniform_tensor(&[2, 3, 8, 8], 1.0);
        let w = rng.uniform_tensor(&[4, 3, k, k], 0.5);
        let b = rng.uniform_tensor(&[4], 0.5);
        let report = op_case(
            vec![("x", x), ("w", w), ("b", b)],
            Box::new(move |s, t, ids| {
                let (x, w, b) = (t.param(s, ids[0]), t.param(s, ids[1]), t.param(s, ids[2]));
                let y = t.conv2d(x, w, b, stride, pad)?;
                project(t, y, proj)
            }),
        )?;
        out.push((name, report));
    }

    for (name, mode) in [("batchnorm train", Mode::Train), ("batchnorm eval", Mode::Eval)] {
        let x = rng.uniform_tensor(&[3, 2, 3, 3], 2.0);
        let gamma = rng.uniform_tensor(&[2], 1.5);
        let beta = rng.uniform_tensor(&[2], 1.0);
        let mut stats = RunningStats::new(2);
        stats.mean = vec![rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5)];
        stats.var = vec![rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0)];
        stats.updates = 1;
        let report = op_case(
            vec![("x", x), ("gamma", gamma), ("beta", beta)],
            Box::new(move |s, t, ids| {
                let (x, g, b) = (t.param(s, ids[0]), t.param(s, ids[1]), t.param(s, ids[2]));
                let mut st = stats.clone();
                let y = t.batchnorm(x, g, b, mode, &mut st, BatchNormConfig::default())?;
                project(t, y, proj)
            }),
        )?;
        out.push((name, report));
    }

    type Unary = fn(&mut Tape<f64>, Var) -> Var;
    let unary: [(&'static str, Unary); 3] = [
        ("sigmoid", |t, x| t.sigmoid(x)),
        ("tanh", |t, x| t.tanh(x)),
        ("relu", |t, x| t.relu(x)),
    ];
    for (name, op) in unary {
        let x = away_from_zero(&mut rng, &[2, 3, 2, 2], 1e-3).data().iter().map(|v| 3.0 * v).collect();
        let x = Tensor::new(&[2, 3, 2, 2], x)?;
        let report = op_case(
            vec![("x", x)],
            Box::new(move |s, t, ids| {
                let x = t.param(s, ids[0]);
                let y = op(t, x);
                project(t, y, proj)
            }),
        )?;
        out.push((name, report));
    }

    type Binary = fn(&mut Tape<f64>, Var, Var) -> Result<Var>;
    let binary: [(&'static str, Binary); 3] = [
        ("add", |t, a, b| t.add(a, b)),
        ("hadamard", |t, a, b| t.hadamard(a, b)),
        ("add_all", |t, a, b| {
            let c = t.scale(a, 0.5);
            t.add_all(&[a, b, c])
        }),
    ];
    for (name, op) in binary {
        let a = rng.uniform_tensor(&[2, 3, 2], 1.0);
        let b = rng.uniform_tensor(&[2, 3, 2], 1.0);
        let report = op_case(
            vec![("a", a), ("b", b)],
            Box::new(move |s, t, ids| {
                let (a, b) = (t.param(s, ids[0]), t.param(s, ids[1]));
                let y = op(t, a, b)?;
                project(t, y, proj)
            }),
        )?;
        out.push((name, report));
    }

    let c = rng.uniform(-2.0, 2.0);
    let x = rng.uniform_tensor(&[3, 4], 1.0);
    out.push((
        "scale and sum",
        op_case(
            vec![("x", x)],
            Box::new(move |s, t, ids| {
                let x = t.param(s, ids[0]);
                let y = t.scale(x, c);
                let sq = t.hadamard(y, y)?;
                Ok(t.sum(sq))
            }),
        )?,
    ));

    for (name, k, stride) in [("avg_pool 2/2", 2, 2), ("avg_pool 3/1", 3, 1)] {
        let x = rng.uniform_tensor(&[2, 2, 4, 4], 1.0);
        let report = op_case(
            vec![("x", x)],
            Box::new(move |s, t, ids| {
                let x = t.param(s, ids[0]);
                let y = t.avg_pool(x, k, stride)?;
                project(t, y, proj)
            }),
        )?;
        out.push((name, report));
    }

    let x = rng.uniform_tensor(&[2, 3, 2, 2], 1.0);
    out.push((
        "reshape and flatten",
        op_case(
            vec![("x", x)],
            Box::new(move |s, t, ids| {
                let x = t.param(s, ids[0]);
                let r = t.reshape(x, &[2, 6, 2])?;
                let f = t.flatten(r)?;
                project(t, f, proj)
            }),
        )?,
    ));

    let x = rng.uniform_tensor(&[3, 5], 1.0);
    let w = rng.uniform_tensor(&[5, 4], 1.0);
    let b = rng.uniform_tensor(&[4], 1.0);
    out.push((
        "fully_connected",
        op_case(
            vec![("x", x), ("w", w), ("b", b)],
            Box::new(move |s, t, ids| {
                let (x, w, b) = (t.param(s, ids[0]), t.param(s, ids[1]), t.param(s, ids[2]));
                let y = t.fully_connected(x, w, b)?;
                project(t, y, proj)
            }),
        )?,
    ));

    let logits = rng.uniform_tensor(&[4, 6], 3.0);
    let targets: Vec<usize> = (0..4).map(|_| rng.below(6)).collect();
    let fine = targets.clone();
    out.push((
        "softmax_cross_entropy",
        op_case(
            vec![("logits", logits)],
            Box::new(move |s, t, ids| {
                let l = t.param(s, ids[0]);
                t.softmax_cross_entropy(l, &fine)
            }),
        )?,
    ));

    let tax = Taxonomy::new(vec![0, 0, 1, 1, 1, 2])?;
    let coarse_targets = tax.coarse_of(&targets);
    let logits = rng.uniform_tensor(&[4, 6], 3.0);
    let (tax2, ct) = (tax.clone(), coarse_targets.clone());
    out.push((
        "coarse_loss",
        op_case(
            vec![("logits", logits)],
            Box::new(move |s, t, ids| {
                let l = t.param(s, ids[0]);
                coarse_loss(t, l, &ct, &tax2)
            }),
        )?,
    ));

    for (name, direction) in [
        ("episodic_loss coarse_to_fine", Direction::CoarseToFine),
        ("episodic_loss literal_eq6", Direction::LiteralRamp),
    ] {
        let iterations = 3;
        let inputs = ["logits.1", "logits.2", "logits.3"]
            .into_iter()
            .map(|name| (name, rng.uniform_tensor(&[4, 6], 3.0)))
            .collect();
        let schedule = CurriculumSchedule::new(2, direction, iterations)?;
        let (tax, fine, coarse) = (tax.clone(), targets.clone(), coarse_targets.clone());
        out.push((
            name,
            op_case(
                inputs,
                Box::new(move |s, t, ids| {
                    let logits: Vec<Var> = ids.iter().map(|&id| t.param(s, id)).collect();
                    let losses = logits
                        .iter()
                        .map(|&l| t.softmax_cross_entropy(l, &fine))
                        .collect::<Result<Vec<_>>>()?;
                    let trace = IterationTrace {
                        representations: logits.clone(),
                        logits,
                        losses,
                    };
                    episodic_loss(t, &trace, &coarse, &tax, &schedule, 0.8)
                }),
            )?,
        ));
    }

    out.push(("gate stack depth 3", gate_stack_case(seed)?));
    out.push(("convlstm step", convlstm_case(seed)?));
    Ok(out)
}

struct CellCase<M> {
    store: ParamStore<f64>,
    module: M,
    x: Tensor<f64>,
    h: Tensor<f64>,
    c: Tensor<f64>,
    proj: u64,
}

fn gate_stack_case(seed: u64) -> Result<GradCheckReport> {
    let mut rng = Rng::new(seed ^ 0x5eed);
    let mut store = ParamStore::new();
    let spec = GateStackSpec {
        in_channels: 2,
        out_channels: 3,
        kernel: 3,
        stride: 1,
        depth: 3,
        residual: true,
    };
    let module = GateStack::new(spec, &mut store, &mut rng, "stack")?;
    randomize_bn(&mut store, &mut rng);
    let x = rng.uniform_tensor(&[3, 2, 4, 4], 1.0);
    let mut case = CellCase {
        store,
        module,
        x,
        h: Tensor::zeros(&[1]),
        c: Tensor::zeros(&[1]),
        proj: seed + 1,
    };
    check_gradients(
        &mut case,
        |s| &mut s.store,
        |s, t| {
            let x = t.constant(s.x.clone());
            let y = s.module.apply(t, &s.store, x, Mode::Train, 0)?;
            project(t, y, s.proj)
        },
        GradCheckOptions::default(),
    )
}

fn convlstm_case(seed: u64) -> Result<GradCheckReport> {
    let mut rng = Rng::new(seed ^ 0xce11);
    let mut store = ParamStore::new();
    let spec = GateStackSpec {
        in_channels: 2,
        out_channels: 2,
        kernel: 3,
        stride: 2,
        depth: 2,
        residual: true,
    };
    let module = ConvLstmParams::new(spec, 0, &mut store, &mut rng, "cell")?;
    randomize_bn(&mut store, &mut rng);
    let x = rng.uniform_tensor(&[3, 2, 4, 4], 1.0);
    let h = rng.uniform_tensor(&[3, 2, 2, 2], 1.0);
    let c = rng.uniform_tensor(&[3, 2, 2, 2], 1.0);
    let mut case = CellCase {
        store,
        module,
        x,
        h,
        c,
        proj: seed + 2,
    };
    check_gradients(
        &mut case,
        |s| &mut s.store,
        |s, t| {
            let x = t.constant(s.x.clone());
            let state = CellState {
                h: t.constant(s.h.clone()),
                c: t.constant(s.c.clone()),
            };
            let out = s
                .module
                .step(t, &s.store, x, state, state.h, Mode::Train, 0, GateOverrides::default())?;
            let a = project(t, out.state.h, s.proj)?;
            let b = project(t, out.state.c, s.proj + 1)?;
            t.add(a, b)
        },
        GradCheckOptions::default(),
    )
}

/// Moves BN affine parameters off their initial values so their gradients
/// are exercised away from the identity.
fn randomize_bn(store: &mut ParamStore<f64>, rng: &mut Rng) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        if name.ends_with("gamma") {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.uniform(0.5, 1.5));
        } else if name.ends_with("beta") {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v += rng.uniform(-0.5, 0.5));
        }
    }
}

/// `T = 2`, two Stack-2 modules, 8x8 inputs, skip length 1.
pub fn small_net_spec() -> FeedbackNetSpec {
    FeedbackNetSpec {
        image_size: 8,
        stem: ConvSpec {
            in_channels: 3,
            out_channels: 2,
            kernel: 3,
            stride: 1,
        },
        modules: vec![
            ModuleSpec {
                in_channels: 2,
                out_channels: 3,
                kernel: 3,
                stride: 2,
                stack: 2,
            },
            ModuleSpec {
                in_channels: 3,
                out_channels: 3,
                kernel: 3,
                stride: 1,
                stack: 2,
            },
        ],
        iterations: 2,
        skip: Some(SkipSpec {
            length: 1,
            placement: SkipPlacement::Output,
        }),
        gamma: 0.9,
        pool: PoolSpec { kernel: 4, stride: 1 },
        num_classes: 4,
        residual: true,
        loss_mode: LossMode::AllIterations,
    }
}

/// Gradient check of the whole unrolled network's training loss.
pub fn full_net_check(seed: u64) -> Result<GradCheckReport> {
    let spec = small_net_spec();
    let mut net = FeedbackNet::<f64>::new(spec.clone(), seed)?;
    let mut rng = Rng::new(seed.wrapping_add(1000));
    randomize_bn(&mut net.params, &mut rng);
    let images = rng.uniform_tensor::<f64>(&[3, 3, 8, 8], 1.0);
    let targets: Vec<usize> = (0..3).map(|_| rng.below(4)).collect();
    check_gradients(
        &mut net,
        |n| &mut n.params,
        |n, t| {
            let x = t.constant(images.clone());
            let trace = n.unroll_forward(t, x, &targets, Mode::Train)?;
            training_loss(t, &trace, n.spec.gamma, n.spec.loss_mode)
        },
        GradCheckOptions::default(),
    )
}

/// Random softmax rows over a random taxonomy, compared with a per-sample
/// brute-force sum over fine classes. Returns the largest absolute
/// difference and the largest deviation of a coarse row sum from one.
pub fn coarse_oracle(distributions: usize, seed: u64) -> Result<(f64, f64)> {
    use fbnet::taxonomy::coarse_distribution;
    let mut rng = Rng::new(seed);
    let mut worst = 0f64;
    let mut row_dev = 0f64;
    let mut done = 0;
    while done < distributions {
        let coarse = 1 + rng.below(6);
        let fine = coarse + rng.below(10);
        // every coarse class keeps at least one child
        let mut parent: Vec<usize> = (0..coarse).chain((coarse..fine).map(|_| rng.below(coarse))).collect();
        rng.shuffle(&mut parent);
        let tax = Taxonomy::new(parent)?;
        let rows = 1 + rng.below(64).min(distributions - done - 1);
        let mut probs = Vec::with_capacity(rows * fine);
        for _ in 0..rows {
            let raw: Vec<f64> = (0..fine).map(|_| (4.0 * rng.normal()).exp()).collect();
            let z: f64 = raw.iter().sum();
            probs.extend(raw.iter().map(|v| v / z));
        }
        let p = Tensor::new(&[rows, fine], probs)?;
        let q = coarse_distribution(&p, &tax)?;
        for i in 0..rows {
            for g in 0..coarse {
                let mut brute = 0.0;
                for j in 0..fine {
                    if tax.parent(j) == g {
                        brute += p.row(i)[j];
                    }
                }
                worst = worst.max((brute - q.row(i)[g]).abs());
            }
            row_dev = row_dev.max((q.row(i).iter().sum::<f64>() - 1.0).abs());
        }
        done += rows;
    }
    Ok((worst, row_dev))
}

/// Compliance of a predictor that is always wrong and picks uniformly among
/// the other fine classes, on the default 4 x 3 taxonomy.
pub fn random_compliance(samples: usize, seed: u64) -> Result<f64> {
    use fbnet::taxonomy::compliance_metric;
    let tax = Taxonomy::balanced(4, 3);
    let k = tax.fine_count();
    let mut rng = Rng::new(seed);
    let mut preds = Vec::with_capacity(samples);
    let mut targets = Vec::with_capacity(samples);
    for _ in 0..samples {
        let t = rng.below(k);
        let p = (t + 1 + rng.below(k - 1)) % k;
        targets.push(t);
        preds.push(p);
    }
    Ok(compliance_metric(&preds, &targets, &tax)?.expect("every prediction is wrong"))
}
