use std::collections::HashSet;
use std::path::Path;
use std::sync::Arc;

use dcsa::algorithm::{MetricsRecord, StepSchedule};
use dcsa::config::{parse_config, ScenarioConfig, ScenarioKind};
use dcsa::experiments::build_system_id_scenario;
use dcsa::markov::{ArSource, FiniteChain, FiniteChainSource, Observation, Source};
use dcsa::operators::{
    ball_point, estimate_constants, estimate_mean_field, fixed_point_oracle, quadratic_constants,
    FnOperator, LocalOperator, ProbeGrid, ProblemSpec, QuadraticGradientOperator, SharedOperator,
};
use dcsa::output::{metrics_csv, read_metrics_csv};
use dcsa::rng::{derive_agent_stream, Purpose};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

fn system_id() -> dcsa::algorithm::Scenario {
    let mut cfg = ScenarioConfig::new(ScenarioKind::SystemId);
    cfg.seed = 11;
    build_system_id_scenario(&cfg).unwrap()
}

fn ar_sources(sc: &dcsa::algorithm::Scenario) -> Vec<&ArSource> {
    sc.problem
        .sources
        .iter()
        .map(|s| match s {
            Source::Ar(a) => a,
            _ => panic!("system identification uses AR sources"),
        })
        .collect()
}

/// At `θ*` the summed per-sample operator is `2 Σᵢ nᵢ xᵢ(1)` with fresh noise,
/// a martingale difference sequence, so naive standard errors are valid.
#[test]
fn quadratic_root_condition_by_monte_carlo() {
    let sc = system_id();
    let theta = sc.problem.theta_star.clone().unwrap();
    let d = theta.len();
    let mut total = vec![0.0; d];
    let mut var = vec![0.0; d];
    for (i, (op, src)) in sc
        .problem
        .operators
        .iter()
        .zip(&sc.problem.sources)
        .enumerate()
    {
        let mut src = src.clone();
        let mut rng = derive_agent_stream(99, i as u64, Purpose::Probe);
        let (mean, se) =
            estimate_mean_field(op.as_ref(), &mut src, theta.as_slice(), 100_000, &mut rng)
                .unwrap();
        for c in 0..d {
            total[c] += mean[c];
            var[c] += se[c] * se[c];
        }
    }
    for c in 0..d {
        assert!(
            total[c].abs() <= 5.0 * var[c].sqrt(),
            "coordinate {c}: {} vs se {}",
            total[c],
            var[c].sqrt()
        );
    }
}

#[test]
fn finite_chain_root_is_exact() {
    let targets = [[0.5, -1.0], [2.0, 0.25], [-0.75, 1.5]];
    let ops: Vec<SharedOperator> = targets
        .iter()
        .map(|t| {
            let t = *t;
            Arc::new(FnOperator::new(2, move |x, th, out| {
                let s = match x {
                    Observation::State(s) => *s as f64,
                    _ => 0.0,
                };
                for c in 0..2 {
                    out[c] = t[c] * (1.0 + s) - 2.0 * th[c];
                }
            })) as SharedOperator
        })
        .collect();
    let chain = FiniteChain::two_state(0.2, 0.7).unwrap();
    let sources = vec![Source::Finite(FiniteChainSource { chain, state: 0 }); 3];
    let spec = ProblemSpec::new(ops, sources, 6.0).unwrap();
    let fp = fixed_point_oracle(&spec).unwrap();
    assert!(fp.unique);
    assert!(spec.root_residual(fp.theta.as_slice()).unwrap() <= 1e-8);
    // stationary law (0.7, 0.2)/0.9 gives E[1 + s] = 1 + 2/9
    let scale = 1.0 + 0.2 / 0.9;
    for c in 0..2 {
        let expect: f64 = targets.iter().map(|t| t[c]).sum::<f64>() * scale / 6.0;
        assert!((fp.theta[c] - expect).abs() <= 1e-8);
    }
}

/// The exact mean field is `F̄ᵢ(θ) = −2 Σᵢ (θ − u)` with `Σᵢ` the stationary
/// second moment of the regressor.
#[test]
fn one_point_monotonicity_holds_on_random_pairs() {
    let sc = system_id();
    let srcs = ar_sources(&sc);
    let alpha = sc.problem.alpha;
    assert!(alpha > 0.0);
    let total: DMatrix<f64> = srcs.iter().fold(
        DMatrix::zeros(sc.problem.dim(), sc.problem.dim()),
        |acc, s| acc + s.stationary_covariance(),
    );
    let mut rng = derive_agent_stream(5, 0, Purpose::Probe);
    for _ in 0..1_000 {
        let a = DVector::from_vec(ball_point(sc.problem.dim(), 10.0, &mut rng));
        let b = DVector::from_vec(ball_point(sc.problem.dim(), 10.0, &mut rng));
        let diff = &a - &b;
        let drop = 2.0 * diff.dot(&(&total * &diff));
        assert!(drop >= alpha * (1.0 - 1e-6) * diff.norm_squared());
    }
}

#[test]
fn stationary_covariance_matches_samples() {
    let sc = system_id();
    let src = ar_sources(&sc)[0].clone();
    let d = src.dim();
    let mut src = Source::Ar(src);
    let mut rng = derive_agent_stream(3, 0, Purpose::Probe);
    for _ in 0..100 {
        src.sample_step(&mut rng);
    }
    let n = 200_000;
    let mut acc = DMatrix::zeros(d, d);
    for _ in 0..n {
        if let Observation::Regression { x1, .. } = src.sample_step(&mut rng) {
            acc += &x1 * x1.transpose();
        }
    }
    acc /= n as f64;
    let Source::Ar(ar) = &src else { unreachable!() };
    let exact = ar.stationary_covariance();
    let err = (&acc - &exact).abs().max();
    assert!(err <= 0.05 * exact.abs().max(), "{err}");
}

#[test]
fn analytic_constants_bound_sampled_operators() {
    let sc = system_id();
    let srcs = ar_sources(&sc);
    let k = quadratic_constants(&srcs);
    let d = sc.problem.dim();
    let op = QuadraticGradientOperator::new(d);
    let mut rng = derive_agent_stream(8, 0, Purpose::Probe);
    let mut observations = Vec::new();
    for (i, s) in srcs.iter().enumerate() {
        let mut src = Source::Ar((*s).clone());
        let mut srng = derive_agent_stream(8, i as u64, Purpose::Sampling);
        observations.extend((0..200).map(|_| src.sample_step(&mut srng)));
    }
    for x in &observations {
        let ta: Vec<f64> = ball_point(d, 10.0, &mut rng);
        let tb: Vec<f64> = ball_point(d, 10.0, &mut rng);
        let mut fa = vec![0.0; d];
        let mut fb = vec![0.0; d];
        op.eval_into(x, &ta, &mut fa).unwrap();
        op.eval_into(x, &tb, &mut fb).unwrap();
        let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let gap: Vec<f64> = fa.iter().zip(&fb).map(|(a, b)| a - b).collect();
        let tgap: Vec<f64> = ta.iter().zip(&tb).map(|(a, b)| a - b).collect();
        assert!(n(&fa) <= k.b * (n(&ta) + 1.0) * (1.0 + 1e-12));
        assert!(n(&gap) <= k.l * n(&tgap) * (1.0 + 1e-12));
    }
    let grid = ProbeGrid::standard(d, &mut rng);
    let probed = estimate_constants(&op, &observations, &grid).unwrap();
    assert!(probed.l <= k.l * (1.0 + 1e-12));
    assert!(probed.b <= k.b * (1.0 + 1e-12));
}

#[test]
fn rng_streams_do_not_collide() {
    let purposes = [
        Purpose::Sampling,
        Purpose::Scenario,
        Purpose::Init,
        Purpose::Evaluation,
        Purpose::Probe,
    ];
    let mut seen = HashSet::new();
    for seed in [0u64, 1, 2] {
        for agent in 0..64u64 {
            for p in purposes {
                let mut rng = derive_agent_stream(seed, agent, p);
                let head: Vec<u64> = (0..4).map(|_| rng.random()).collect();
                assert!(seen.insert(head), "seed {seed}, agent {agent}, {p:?}");
            }
        }
    }
}

fn record_strategy() -> impl Strategy<Value = MetricsRecord> {
    let real = prop_oneof![Just(0.0), -1e6..1e6f64, (1e-300..1e-3f64)];
    let opt = proptest::option::of(-1e3..1e3f64);
    (
        0usize..1_000_000,
        1e-9..10.0f64,
        0usize..1000,
        real.clone(),
        real.clone(),
        real,
        0.0..1e3f64,
        opt.clone(),
        opt.clone(),
        opt,
    )
        .prop_map(
            |(k, eps_k, tau_k, r, s, s_delayed, v, td_error, lemma3_slack, lemma4_slack)| {
                MetricsRecord {
                    k,
                    eps_k,
                    tau_k,
                    r: r.abs(),
                    s: s.abs(),
                    s_delayed: s_delayed.abs(),
                    v,
                    td_error,
                    lemma3_slack,
                    lemma4_slack,
                }
            },
        )
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs())
}

fn close_opt(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(a), Some(b)) => close(a, b),
        (None, None) => true,
        _ => false,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn gradient_matches_finite_differences(
        x1 in proptest::collection::vec(-2.0..2.0f64, 4),
        x2 in -3.0..3.0f64,
        theta in proptest::collection::vec(-5.0..5.0f64, 4),
    ) {
        let op = QuadraticGradientOperator::new(4);
        let x = Observation::Regression { x1: DVector::from_vec(x1.clone()), x2 };
        let mut f = vec![0.0; 4];
        op.eval_into(&x, &theta, &mut f).unwrap();
        let h = 1e-5;
        for c in 0..4 {
            let mut up = theta.clone();
            let mut down = theta.clone();
            up[c] += h;
            down[c] -= h;
            let fd = (op.loss(&x1, x2, &up) - op.loss(&x1, x2, &down)) / (2.0 * h);
            prop_assert!((f[c] + fd).abs() <= 1e-6 * (1.0 + fd.abs()), "{} vs {}", f[c], -fd);
        }
    }

    #[test]
    fn config_survives_toml_round_trip(
        n in 1usize..20,
        d in 1usize..8,
        seed in any::<u64>(),
        horizon in 1usize..1_000_000,
        stride in 1usize..1000,
        eps in 1e-6..100.0f64,
        shift in 0.0..1e4f64,
        constant in any::<bool>(),
    ) {
        let mut cfg = ScenarioConfig::new(ScenarioKind::SystemId);
        cfg.n_agents = n;
        cfg.d = d;
        cfg.seed = seed;
        cfg.horizon = horizon;
        cfg.stride = stride;
        cfg.step = if constant { StepSchedule::constant(eps) } else { StepSchedule::diminishing(eps).with_shift(shift) };
        let back = parse_config(&cfg.to_toml()).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn metrics_csv_round_trips(records in proptest::collection::vec(record_strategy(), 0..20)) {
        let text = metrics_csv(&records);
        let back = read_metrics_csv(&text, Path::new("mem.csv")).unwrap();
        prop_assert_eq!(back.len(), records.len());
        for (a, b) in records.iter().zip(&back) {
            prop_assert_eq!(a.k, b.k);
            prop_assert_eq!(a.tau_k, b.tau_k);
            prop_assert!(close(a.eps_k, b.eps_k) && close(a.r, b.r) && close(a.s, b.s));
            prop_assert!(close(a.s_delayed, b.s_delayed) && close(a.v, b.v));
            prop_assert!(close_opt(a.td_error, b.td_error));
            prop_assert!(close_opt(a.lemma3_slack, b.lemma3_slack));
            prop_assert!(close_opt(a.lemma4_slack, b.lemma4_slack));
        }
        prop_assert_eq!(metrics_csv(&back), text);
    }
}
