//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run everything with `cargo test -p qflow-core --test acceptance`, or a subset by
//! number: `cargo test -p qflow-core --test acceptance -- 2 4 5`.

use std::process::ExitCode;
use std::time::Instant;

use qflow_core::agent::{Agent, ExplorationMode};
use qflow_core::analysis::{
    monotonicity_experiment, variance_scaling_experiment, CriticSource, MonotonicityParams, VarianceParams,
};
use qflow_core::critic::{ActionValue, CriticConfig, QuadraticCritic, TwinCritic};
use qflow_core::flow::{
    ascend, capped_step, flow_matching_loss, integrate, interpolate_batch, sample_flow_action, FieldConfig, FlowConfig,
    FnVelocity, VelocityField,
};
use qflow_core::nn::{Activation, Mode};
use qflow_core::replay::{Batch, Behavior, ReplayBuffer, Transition};
use qflow_core::source_policy::{GaussianSourcePolicy, PolicyConfig};
use qflow_core::trainer::{evaluate, train, train_with_output, RunOutput, TrainConfig, TrainReport};
use qflow_core::DenseArray;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseArray {
    DenseArray::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

// 1. End-effector variance falls like 1/|A| under isotropic link-angle noise.
fn variance_scaling() -> Verdict {
    let params = VarianceParams::default();
    assert_eq!(params.dims, vec![2, 4, 8, 16, 32, 64]);
    assert_eq!((params.sigma, params.length, params.samples), (0.05, 1.0, 1_000_000));
    let r = variance_scaling_experiment(&params).unwrap();
    let mut worst = 0.0f64;
    for (i, &d) in r.dims.iter().enumerate() {
        // independent oracle for σ²L²/|A|
        let oracle = params.sigma.powi(2) * params.length.powi(2) / d as f64;
        assert!((oracle - r.theoretical[i]).abs() <= 1e-15 * oracle);
        worst = worst.max((r.empirical_variance[i] / oracle - 1.0).abs());
    }
    let pass = (-1.2..=-0.8).contains(&r.loglog_slope) && worst <= 0.20;
    Verdict::new(pass, format!("slope {:.4}, worst relative deviation {:.4}", r.loglog_slope, worst))
}

// 2. Quadratic critic: exact nondecrease and the scalar closed form.
fn monotone_exact() -> Verdict {
    let params = MonotonicityParams {
        eta: 0.01,
        ascent_steps: 20,
        grid_points: 21,
        exact_tolerance: 1e-6,
        ..MonotonicityParams::default()
    };
    let r = monotonicity_experiment(&CriticSource::Quadratic, &params).unwrap();
    // the box bounds ‖a − a*‖ by 2√|A|, so η‖∇Q‖ ≤ 0.02√|A| stays below the cap
    let q = QuadraticCritic::new(vec![1.0]);
    let s = DenseArray::zeros(1, 1);
    let a = ascend(&q, &s, &DenseArray::zeros(1, 1), 20, 0.01).unwrap().get(0, 0);
    let closed = 1.0 - (1.0f64 - 0.01).powi(20);
    let paper = 0.182093;
    let pass = r.pass && (a - closed).abs() <= 1e-9 && (a - paper).abs() <= 5e-7;
    Verdict::new(
        pass,
        format!("violations {:?}, iterate {a:.12} vs closed form {closed:.12}", r.violations),
    )
}

// 3. Random smooth critic: nondecrease within two standard errors over five seeds.
fn monotone_statistical() -> Verdict {
    let mut failed = Vec::new();
    for seed in 0..5 {
        let params = MonotonicityParams {
            num_states: 64,
            samples: 256,
            ascent_steps: 100,
            eta: 0.001,
            grid_points: 21,
            se_multiplier: 2.0,
            seed,
            ..MonotonicityParams::default()
        };
        let r = monotonicity_experiment(&CriticSource::RandomNet { hidden: vec![64, 64] }, &params).unwrap();
        if !r.pass {
            failed.push((seed, r.violations));
        }
    }
    Verdict::new(failed.is_empty(), format!("failing seeds {failed:?}"))
}

// 4. Every capped ascent step is bounded by 2√|A| and uncapped steps are exactly η g.
fn step_cap() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let fixed = [0.0, 1e-8, 1.0, 1e3, 1e6];
    let (mut bad_bound, mut bad_exact, mut uncapped) = (0usize, 0usize, 0usize);
    for k in 0..100_000 {
        let dim = rng.random_range(1..=256usize);
        let eta = 10f64.powf(rng.random_range(-6.0..2.0));
        let norm = if k % 2 == 0 { fixed[(k / 2) % fixed.len()] } else { 10f64.powf(rng.random_range(-10.0..8.0)) };
        let dir: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let dn = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let g: Vec<f64> = dir.iter().map(|v| v / dn * norm).collect();
        let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        let step = capped_step(&g, eta);
        let snorm = step.iter().map(|v| v * v).sum::<f64>().sqrt();
        let cap = 2.0 * (dim as f64).sqrt();
        if snorm > cap + 1e-12 {
            bad_bound += 1;
        }
        if eta * gnorm <= cap {
            uncapped += 1;
            if step.iter().zip(&g).any(|(s, gi)| *s != eta * gi) {
                bad_exact += 1;
            }
        }
    }
    Verdict::new(
        bad_bound == 0 && bad_exact == 0,
        format!("bound violations {bad_bound}, inexact uncapped steps {bad_exact} of {uncapped}"),
    )
}

// 5. Flow-matching pieces: identity transport, exact endpoints, single-pair fit, Euler.
fn flow_matching() -> Verdict {
    let mut notes = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (sd, ad) = (3, 4);
    let small = |h: Vec<usize>| FieldConfig {
        hidden: h,
        ..FieldConfig::default()
    };
    let field = VelocityField::new(sd, ad, &small(vec![32, 32]), &mut rng).unwrap();
    let source = GaussianSourcePolicy::new(
        sd,
        ad,
        &PolicyConfig {
            hidden: vec![32],
            ..PolicyConfig::default()
        },
        &mut rng,
    )
    .unwrap();
    let states = uniform(50, sd, &mut rng);
    let flow = FlowConfig::default();
    let got = sample_flow_action(&field, &source, &states, &mut ChaCha8Rng::seed_from_u64(9), false, &flow).unwrap();
    let src = source.sample_source(&states, &mut ChaCha8Rng::seed_from_u64(9)).unwrap().clamp(-1.0, 1.0);
    let a = got.actions == src;
    notes.push(format!("identity {a}"));

    let a0 = uniform(10, ad, &mut rng);
    let a1 = uniform(10, ad, &mut rng);
    let (at0, _) = interpolate_batch(&[0.0; 10], &a0, &a1).unwrap();
    let (at1, _) = interpolate_batch(&[1.0; 10], &a0, &a1).unwrap();
    let b = at0 == a0 && at1 == a1;
    notes.push(format!("endpoints {b}"));

    let mut fit = VelocityField::new(1, 2, &small(vec![16, 16]), &mut ChaCha8Rng::seed_from_u64(50)).unwrap();
    let n = 64;
    let s = DenseArray::filled(n, 1, 0.5);
    let p0 = DenseArray::from_rows(&vec![[0.0, 0.0]; n]).unwrap();
    let p1 = DenseArray::from_rows(&vec![[0.6, -0.4]; n]).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(51);
    for _ in 0..2000 {
        fit.flow_matching_update(&s, &p0, &p1, &mut r).unwrap();
    }
    let grid: Vec<f64> = (0..n).map(|k| k as f64 / (n - 1) as f64).collect();
    let loss = flow_matching_loss(&fit, &s, &p0, &p1, &grid).unwrap();
    let end = integrate(&fit, &s.slice_rows(0, 1), &p0.slice_rows(0, 1), 20, 0.05).unwrap();
    let miss = ((end.get(0, 0) - 0.6).powi(2) + (end.get(0, 1) + 0.4).powi(2)).sqrt();
    let c = loss < 1e-4 && miss <= 0.02;
    notes.push(format!("pair loss {loss:.2e} miss {miss:.4}"));

    let decay = FnVelocity::new(1, |_, _, a: &[f64]| vec![-a[0]]);
    let x = integrate(&decay, &DenseArray::zeros(1, 1), &DenseArray::filled(1, 1, 1.0), 20, 0.05)
        .unwrap()
        .get(0, 0);
    let d = (x - 0.95f64.powi(20)).abs() <= 1e-9 && (x - 0.358486).abs() <= 5e-7;
    notes.push(format!("euler {x:.12}"));
    Verdict::new(a && b && c && d, notes.join(", "))
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central differences on `loss` over a random subset of coordinates of `params`.
fn check_params(
    analytic: &[Vec<f64>],
    coords: usize,
    rng: &mut ChaCha8Rng,
    mut loss_at: impl FnMut(usize, usize, f64) -> f64,
) -> f64 {
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..coords {
        let t = rng.random_range(0..analytic.len());
        let j = rng.random_range(0..analytic[t].len());
        let fd = (loss_at(t, j, h) - loss_at(t, j, -h)) / (2.0 * h);
        worst = worst.max(relative_error(analytic[t][j], fd));
    }
    worst
}

fn fd_seed(seed: u64) -> [f64; 4] {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let (sd, ad, n) = (3, 2, 12);
    // smooth activations so central differences are valid everywhere
    let critic_cfg = CriticConfig {
        hidden: vec![16, 16],
        activation: Activation::Tanh,
        ..CriticConfig::default()
    };
    let mut critic = TwinCritic::new(sd, ad, &critic_cfg, &mut rng).unwrap();
    let (q1, q2) = critic.heads_mut();
    for q in [q1, q2] {
        for p in q.params_mut() {
            p.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
        }
    }
    let batch = Batch {
        states: uniform(n, sd, &mut rng),
        actions: uniform(n, ad, &mut rng),
        rewards: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        next_states: uniform(n, sd, &mut rng),
        terminals: (0..n).map(|i| (i % 5 == 0) as u8 as f64).collect(),
    };
    let next_actions = uniform(n, ad, &mut rng);

    // critic parameters: the regression against the held-constant targets
    let (g, _) = critic.loss_gradients(&batch, &next_actions).unwrap();
    let targets = g.targets.clone();
    let joint = DenseArray::vstack(&[
        &DenseArray::hstack(&[&batch.states, &batch.actions]).unwrap(),
        &DenseArray::hstack(&[&batch.next_states, &next_actions]).unwrap(),
    ])
    .unwrap();
    let head_loss = |c: &TwinCritic| -> f64 {
        let (q1, q2) = c.heads();
        let (y1, _) = q1.run(&joint, Mode::Train).unwrap();
        let (y2, _) = q2.run(&joint, Mode::Train).unwrap();
        (0..n)
            .map(|i| ((y1.get(i, 0) - targets[i]).powi(2) + (y2.get(i, 0) - targets[i]).powi(2)) / n as f64)
            .sum()
    };
    let mut worst_critic = 0.0f64;
    for head in 0..2 {
        let analytic = if head == 0 { &g.q1.tensors } else { &g.q2.tensors };
        let w = check_params(analytic, 12, &mut rng, |t, j, d| {
            let mut c = critic.clone();
            let (a, b) = c.heads_mut();
            let net = if head == 0 { a } else { b };
            net.params_mut()[t][j] += d;
            head_loss(&c)
        });
        worst_critic = worst_critic.max(w);
    }

    // action gradient of the smaller head, as used by the ascent and the source loss
    let states = uniform(n, sd, &mut rng);
    let actions = uniform(n, ad, &mut rng).map(|v| 0.9 * v);
    let grad = critic.action_gradients(&states, &actions).unwrap();
    let h = 1e-5;
    let mut worst_action = 0.0f64;
    for i in 0..n {
        for j in 0..ad {
            let mut plus = actions.clone();
            plus.set(i, j, actions.get(i, j) + h);
            let mut minus = actions.clone();
            minus.set(i, j, actions.get(i, j) - h);
            let fd = (critic.values(&states, &plus).unwrap()[i] - critic.values(&states, &minus).unwrap()[i]) / (2.0 * h);
            worst_action = worst_action.max(relative_error(grad.get(i, j), fd));
        }
    }

    // source policy parameters through the reparameterized draw
    let source = GaussianSourcePolicy::new(
        sd,
        ad,
        &PolicyConfig {
            hidden: vec![16],
            activation: Activation::Tanh,
            ..PolicyConfig::default()
        },
        &mut rng,
    )
    .unwrap();
    let noise = source.draw_noise(n, &mut rng);
    let (_, sg, _) = source.loss_gradients(&critic, &states, &noise).unwrap();
    let worst_source = check_params(&sg.tensors, 12, &mut rng, |t, j, d| {
        let mut s = source.clone();
        s.trunk_mut().params_mut()[t][j] += d;
        s.loss_gradients(&critic, &states, &noise).unwrap().0
    });

    // velocity field parameters under the flow-matching loss
    let field = VelocityField::new(
        sd,
        ad,
        &FieldConfig {
            hidden: vec![16, 16],
            activation: Activation::Tanh,
            ..FieldConfig::default()
        },
        &mut rng,
    )
    .unwrap();
    let mut field = field;
    for p in field.network_mut().params_mut() {
        p.iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
    }
    let a0 = uniform(n, ad, &mut rng);
    let a1 = uniform(n, ad, &mut rng);
    let times: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let (_, fg) = field.loss_gradients(&states, &a0, &a1, &times).unwrap();
    let worst_field = check_params(&fg.tensors, 12, &mut rng, |t, j, d| {
        let mut f = field.clone();
        f.network_mut().params_mut()[t][j] += d;
        flow_matching_loss(&f, &states, &a0, &a1, &times).unwrap()
    });
    [worst_critic, worst_action, worst_source, worst_field]
}

// 6. Finite-difference checks of every gradient the updates consume.
fn gradient_soundness() -> Verdict {
    let mut worst = [0.0f64; 4];
    for seed in 0..100 {
        let w = fd_seed(seed);
        for k in 0..4 {
            worst[k] = worst[k].max(w[k]);
        }
    }
    let pass = worst.iter().all(|&w| w <= 1e-4);
    Verdict::new(
        pass,
        format!(
            "worst relative error: critic params {:.1e}, action {:.1e}, source params {:.1e}, field params {:.1e}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

/// Network widths used by the desk-scale ablation runs.
const ABLATION_HIDDEN: [usize; 3] = [64, 64, 64];

fn ablation_config(seed: u64, mode: ExplorationMode) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.agent.critic.hidden = ABLATION_HIDDEN.to_vec();
    cfg.agent.policy.hidden = ABLATION_HIDDEN.to_vec();
    cfg.agent.field.hidden = ABLATION_HIDDEN.to_vec();
    cfg.total_env_steps = 150_000;
    cfg.exploration = mode;
    cfg.seed = seed;
    cfg.wall_time = false;
    cfg
}

// 7. Flow exploration beats Gaussian exploration on the redundant task.
fn ablation() -> Verdict {
    let seeds = 0..5u64;
    let mut finals = [Vec::new(), Vec::new()];
    let mut aucs = [Vec::new(), Vec::new()];
    let mut late = Vec::new();
    for seed in seeds {
        for (m, mode) in [ExplorationMode::Flow, ExplorationMode::Gaussian].into_iter().enumerate() {
            let cfg = ablation_config(seed, mode);
            assert_eq!(cfg.env.action_dim(), 32);
            let started = Instant::now();
            let (report, _): (TrainReport, Agent) = train(&cfg).unwrap();
            let fin = report.final_return().unwrap();
            let auc = report.area_under_curve();
            eprintln!(
                "  ablation seed {seed} {:<8} final {fin:9.3} auc {auc:9.3} ({:.0}s)",
                mode.tag(),
                started.elapsed().as_secs_f64()
            );
            finals[m].push(fin);
            aucs[m].push(auc);
            if mode == ExplorationMode::Flow {
                late.push(report.late_superiority(cfg.total_env_steps, 0.2));
            }
        }
    }
    let (mf, mg) = (median(finals[0].clone()), median(finals[1].clone()));
    let (af, ag) = (median(aucs[0].clone()), median(aucs[1].clone()));
    let sup = late.iter().sum::<f64>() / late.len() as f64;
    Verdict::new(
        mf > mg && af > ag && sup > 0.5,
        format!("median final {mf:.3} vs {mg:.3}, median auc {af:.3} vs {ag:.3}, late superiority {sup:.3}"),
    )
}

// 8. Bit-identical reruns and bit-exact checkpoint evaluation.
fn determinism() -> Verdict {
    let mut cfg = TrainConfig::default();
    cfg.agent.critic.hidden = vec![32, 32];
    cfg.agent.policy.hidden = vec![32, 32];
    cfg.agent.field.hidden = vec![32, 32];
    cfg.total_env_steps = 4_000;
    cfg.warmup = 1_000;
    cfg.eval_every = 2_000;
    cfg.wall_time = false;
    let csv = |cfg: &TrainConfig| {
        let (report, _) = train(cfg).unwrap();
        let mut bytes = Vec::new();
        report.write_csv(&mut bytes).unwrap();
        bytes
    };
    let same_csv = csv(&cfg) == csv(&cfg);

    let dir = tempfile::tempdir().unwrap();
    let out = RunOutput {
        dir: dir.path().to_path_buf(),
        resolved_config: Default::default(),
    };
    let (_, agent) = train_with_output(&cfg, Some(&out)).unwrap();
    let (loaded, _) = Agent::load(&dir.path().join("ckpt_4000")).unwrap();
    let before = evaluate(&agent, &cfg.env, 5, 77).unwrap();
    let after = evaluate(&loaded, &cfg.env, 5, 77).unwrap();
    let same_eval = before.returns.iter().map(|v| v.to_bits()).eq(after.returns.iter().map(|v| v.to_bits()));
    Verdict::new(same_csv && same_eval, format!("identical csv {same_csv}, identical eval {same_eval}"))
}

// 9. Uniform replay sampling, chi-square at five sigma.
fn replay_uniformity() -> Verdict {
    let mut buf = ReplayBuffer::new(100, 1, 1, 1).unwrap();
    for i in 0..100 {
        buf.push(Transition {
            state: vec![i as f64],
            action: vec![0.0],
            reward: 0.0,
            next_state: vec![0.0],
            terminal: false,
            behavior: Behavior::Flow,
        })
        .unwrap();
    }
    let mut counts = [0u64; 100];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        for i in buf.sample_indices(1000, &mut rng).unwrap() {
            counts[i] += 1;
        }
    }
    let expected = 1000.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let dof = 99.0f64;
    let z = (chi2 - dof) / (2.0 * dof).sqrt();
    Verdict::new(z.abs() <= 5.0, format!("chi2 {chi2:.2} on 99 dof, z {z:.2}"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Verdict); 9] = [
        ("variance scaling 1/|A|", variance_scaling),
        ("monotone advantage, quadratic critic", monotone_exact),
        ("monotone advantage, random critic", monotone_statistical),
        ("ascent step cap", step_cap),
        ("flow matching correctness", flow_matching),
        ("gradient soundness", gradient_soundness),
        ("flow vs gaussian ablation", ablation),
        ("determinism and persistence", determinism),
        ("replay uniformity", replay_uniformity),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let started = Instant::now();
        let v = run();
        let secs = started.elapsed().as_secs_f64();
        println!(
            "{} [{id}] {name}: {} ({secs:.1}s)",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        failures += usize::from(!v.pass);
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
