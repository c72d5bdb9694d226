//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.
//! Criterion 8 runs the full desk-scale comparison and criterion 9 repeats it.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use greensim::bayes::{FractionDataset, FractionObs, McmcSettings, PosteriorState};
use greensim::bioenv::{reward, BioEnv, RewardConfig, Scenario};
use greensim::estimators::{
    ilr_gradient, mlr_gradient, mlr_ratio, pg_gradient, tlr_gradient, BufferRecord, Credit, EstimatorKind,
    MixtureWeights, ReplayBuffer,
};
use greensim::harness::{
    aggregate_curves, run_comparison, smoothed_trend_slope, summarize_last_window, write_comparison, CellResult,
    CompareConfig,
};
use greensim::mdp::{rollout, ActionId, Policy, StateVec};
use greensim::oracle::{estimator_expectations, random_mdp, random_model, unbiasedness_setup};
use greensim::policy::{LinearSoftmax, Mlp, PolicyParams};
use greensim::rng::SeedTree;
use rand::Rng;
use rand_distr::{Beta, Distribution};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn unbiasedness() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let (mdp, pairs) = unbiasedness_setup(seed).unwrap();
        let e = estimator_expectations(&mdp, &pairs, &Credit::reward_to_go(1.0), &mdp.linear_policy()).unwrap();
        worst = e.max_errors().into_iter().fold(worst, f64::max);
    }
    check(worst <= 1e-10, format!("max |E[estimator] - exact gradient| = {worst:.2e} over PG, ILR, MLR, TLR"))
}

fn mlr_bound() -> Outcome {
    let mut rng = SeedTree::new(2).rng();
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..10_000 {
        let mdp = random_mdp(rng.random_range(2..4), 2, 3, &mut rng).unwrap();
        let pol = mdp.linear_policy();
        let comps: Vec<_> = (0..5)
            .map(|_| {
                let th = PolicyParams::random(pol.shape(), 2.0, &mut rng);
                (th, random_model(&mdp, &mut rng).unwrap())
            })
            .collect();
        let counts: Vec<usize> = (0..5).map(|_| rng.random_range(1..30)).collect();
        let alphas = MixtureWeights::from_counts(&counts).unwrap();
        let refs: Vec<_> = comps.iter().map(|(t, m)| (t, m)).collect();
        let (gt, gm) = refs[rng.random_range(0..5)];
        let tr = rollout(&mdp, &pol, gt, gm, 0, &mut rng).unwrap();
        let k = rng.random_range(0..5);
        let f = mlr_ratio(&tr, refs[k], &refs, &alphas, &mdp, &pol).unwrap();
        worst = worst.max(f - 1.0 / alphas.alphas()[k]);
    }
    check(worst <= 1e-12, format!("max f_k - 1/alpha_k = {worst:.3e} over 10^4 cases"))
}

fn reduction_lattice() -> Outcome {
    let scn = Scenario::default();
    let env = BioEnv::new(scn.clone()).unwrap();
    let pol = Mlp::new(scn.feature_map(), 16, scn.actions());
    let mut rng = SeedTree::new(3).rng();
    let credit = Credit::reward_to_go(1.0);
    let model = scn.true_model.clone();
    let theta = PolicyParams::random(pol.shape(), 0.5, &mut rng);
    let trajs = (0..20).map(|_| rollout(&env, &pol, &theta, &model, 1, &mut rng).unwrap()).collect();
    let rec = BufferRecord::new(1, theta.clone(), model.clone(), trajs, &env, &pol).unwrap();
    let mut buf = ReplayBuffer::new();
    buf.push(rec.clone()).unwrap();
    let pg = pg_gradient(&rec, &theta, &credit, &pol).unwrap().gradient;
    let ilr = ilr_gradient(&buf, &theta, &model, &credit, &env, &pol).unwrap().gradient;
    let mlr = mlr_gradient(&buf, &theta, &model, 1, &credit, &env, &pol).unwrap().gradient;
    let d1 = max_diff(&mlr, &ilr).max(max_diff(&ilr, &pg));

    let mut buf = ReplayBuffer::new();
    let mut last = theta;
    for i in 1..=4 {
        last = PolicyParams::random(pol.shape(), 0.5, &mut rng);
        let trajs = (0..7).map(|_| rollout(&env, &pol, &last, &model, i, &mut rng).unwrap()).collect();
        buf.push(BufferRecord::new(i, last.clone(), model.clone(), trajs, &env, &pol).unwrap()).unwrap();
    }
    let mlr = mlr_gradient(&buf, &last, &model, 3, &credit, &env, &pol).unwrap().gradient;
    let tlr = tlr_gradient(&buf, &last, 3, &credit, &pol).unwrap().gradient;
    let d2 = max_diff(&mlr, &tlr);
    check(
        d1 <= 1e-10 && d2 <= 1e-10,
        format!("|MLR(w=1) - ILR(k=1) - PG| = {d1:.2e}, |TLR - MLR| (shared model) = {d2:.2e}"),
    )
}

fn gradient_correctness() -> Outcome {
    let scn = Scenario::default();
    let mlp = Mlp::new(scn.feature_map(), 16, scn.actions());
    let lin = LinearSoftmax::new(scn.feature_map(), scn.actions());
    let mut rng = SeedTree::new(4).rng();
    let h = 1e-5;
    let mut worst_fd = 0.0f64;
    let mut worst_score = 0.0f64;

    fn fd_rel<P: Policy<f64, Params = PolicyParams<f64>>>(
        pol: &P,
        theta: &PolicyParams<f64>,
        s: &StateVec<f64>,
        a: ActionId,
        h: f64,
    ) -> f64 {
        let g = pol.grad_log_prob(theta, s, a);
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, gi) in g.iter().enumerate() {
            let mut up = theta.clone();
            let mut dn = theta.clone();
            up.values[i] += h;
            dn.values[i] -= h;
            let fd = (pol.log_prob(&up, s, a) - pol.log_prob(&dn, s, a)) / (2.0 * h);
            num += (gi - fd).powi(2);
            den += gi * gi;
        }
        num.sqrt() / den.sqrt().max(1e-12)
    }

    fn score_sum<P: Policy<f64>>(pol: &P, theta: &P::Params, s: &StateVec<f64>) -> f64 {
        let probs = pol.action_probs(theta, s);
        let mut total = vec![0.0; pol.grad_log_prob(theta, s, ActionId(0)).len()];
        for (a, p) in probs.iter().enumerate() {
            for (t, g) in total.iter_mut().zip(pol.grad_log_prob(theta, s, ActionId(a))) {
                *t += p * g;
            }
        }
        total.iter().map(|x| x.abs()).fold(0.0, f64::max)
    }

    for _ in 0..100 {
        let s = StateVec(vec![
            rng.random::<f64>() * scn.bounds.protein_max,
            rng.random::<f64>() * scn.bounds.impurity_max,
            rng.random_range(1..3) as f64,
        ]);
        let a = ActionId(rng.random_range(0..scn.actions()));
        let tm = PolicyParams::random(mlp.shape(), 0.5, &mut rng);
        let tl = PolicyParams::random(lin.shape(), 0.5, &mut rng);
        worst_fd = worst_fd.max(fd_rel(&mlp, &tm, &s, a, h)).max(fd_rel(&lin, &tl, &s, a, h));
        worst_score = worst_score.max(score_sum(&mlp, &tm, &s)).max(score_sum(&lin, &tl, &s));
    }
    check(
        worst_fd < 1e-5 && worst_score <= 1e-10,
        format!("finite-difference relative error {worst_fd:.2e}, |sum_a pi grad log pi| = {worst_score:.2e}"),
    )
}

fn posterior_consistency() -> Outcome {
    let mut rng = SeedTree::new(5).rng();
    let beta = Beta::new(5.0, 3.0).unwrap();
    let obs: Vec<_> = (0..2000)
        .map(|_| FractionObs {
            step: 1,
            action: 0,
            h_fraction: beta.sample(&mut rng),
            psi_fraction: beta.sample(&mut rng),
        })
        .collect();
    let mut ps = PosteriorState::new(1, 1, FractionDataset::new(obs).unwrap(), McmcSettings::default()).unwrap();
    let draws = ps.sample(2000, &mut rng).unwrap();
    let mut means = [0.0; 4];
    for d in &draws {
        for (m, s) in means.iter_mut().zip(d.shapes(1, 0)) {
            *m += s / draws.len() as f64;
        }
    }
    let rel = [(means[0] - 5.0) / 5.0, (means[1] - 3.0) / 3.0, (means[2] - 5.0) / 5.0, (means[3] - 3.0) / 3.0]
        .map(f64::abs)
        .into_iter()
        .fold(0.0, f64::max);

    let mut empty = PosteriorState::new(1, 1, FractionDataset::default(), McmcSettings::default()).unwrap();
    let draws: Vec<f64> = empty.sample(10_000, &mut rng).unwrap().iter().map(|m| m.shapes(1, 0)[0]).collect();
    let inside = draws.iter().all(|&x| x > 0.0 && x <= 300.0);
    // batch means absorb the chain's autocorrelation
    let batches: Vec<f64> = draws.chunks(500).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    let n = batches.len() as f64;
    let mean = batches.iter().sum::<f64>() / n;
    let se = (batches.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
    check(
        rel < 0.1 && inside && (mean - 150.0).abs() < 3.0 * se,
        format!(
            "posterior means {:.3}/{:.3} (impurity {:.3}/{:.3}), max rel error {rel:.3}; prior mean {mean:.2} (se {se:.2})",
            means[2], means[3], means[0], means[1]
        ),
    )
}

fn reward_cases() -> Outcome {
    let cfg = RewardConfig::default();
    let r = |p: f64, i: f64, t: f64| reward(&StateVec(vec![p, i, t]), &cfg);
    let terminal = [r(10.0, 1.0, 3.0), r(6.0, 0.5, 3.0), r(20.0, 5.0, 3.0)];
    let steps = [r(10.0, 1.0, 1.0), r(6.0, 0.5, 2.0)];
    check(
        terminal == [40.0, 18.0, -48.0] && steps == [-8.0, -8.0],
        format!("terminal {terminal:?}, intermediate {steps:?}"),
    )
}

fn aggregation() -> Outcome {
    let c = aggregate_curves(&[vec![1.0, 4.0], vec![2.0, 4.0], vec![3.0, 4.0]]).unwrap();
    let se = (2.0f64 / 6.0).sqrt();
    let errs = [
        c[0].mean - 2.0,
        c[0].se - se,
        c[0].lo - (2.0 - 1.96 * se),
        c[0].hi - (2.0 + 1.96 * se),
        c[1].se,
    ];
    let curve: Vec<f64> = (1..=500).map(|k| k as f64 / 100.0).collect();
    let (mu, sd) = summarize_last_window(&curve, 100).unwrap();
    let want_se = 0.01 * (100.0f64 * 101.0 / 12.0).sqrt() / 10.0;
    let (cm, cs) = summarize_last_window(&[2.5; 120], 100).unwrap();
    let worst = errs
        .into_iter()
        .chain([mu - 4.505, sd - want_se, cm - 2.5, cs])
        .map(f64::abs)
        .fold(0.0, f64::max);
    let undefined = summarize_last_window(&curve, 1).is_err() && aggregate_curves(&[vec![1.0]]).is_err();
    check(worst <= 1e-12 && undefined, format!("max deviation from hand arithmetic {worst:.2e}"))
}

struct Study {
    cells: Vec<CellResult>,
    dir: tempfile::TempDir,
}

fn run_study() -> Study {
    let cfg = CompareConfig::default();
    let cells = run_comparison(&Scenario::default(), &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_comparison(&cells, dir.path()).unwrap();
    Study { cells, dir }
}

fn convergence(study: &Study) -> Outcome {
    let mut last = Vec::new();
    let mut slopes = Vec::new();
    for cell in &study.cells {
        let data = cell.outcome.as_ref().map_err(|e| format!("{} failed: {e}", cell.estimator))?;
        let means: Vec<f64> = data.curve.iter().map(|p| p.mean).collect();
        last.push((cell.estimator, data.summary.mean));
        slopes.push((cell.estimator, smoothed_trend_slope(&means, 50, 200).map_err(|e| e.to_string())?));
    }
    let get = |k: EstimatorKind| last.iter().find(|(e, _)| *e == k).map(|(_, m)| *m).unwrap_or(f64::NAN);
    let mlr = get(EstimatorKind::Mlr);
    let ordered = mlr >= get(EstimatorKind::Pg) && mlr >= get(EstimatorKind::Ilr);
    let rising = slopes.len() == 4 && slopes.iter().all(|(_, s)| *s >= 0.0);
    let fmt = |v: &[(EstimatorKind, f64)], p: usize| {
        v.iter().map(|(e, x)| format!("{e} {x:.*}", p)).collect::<Vec<_>>().join(", ")
    };
    check(
        ordered && rising,
        format!(
            "last-100 means [{}]; MLR >= PG, ILR: {ordered}; smoothed trend slopes [{}]; all >= 0: {rising}",
            fmt(&last, 3),
            fmt(&slopes, 5)
        ),
    )
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism(first: &Study) -> Outcome {
    let second = run_study();
    let (a, b) = (files(first.dir.path()), files(second.dir.path()));
    let names: Vec<_> = a.iter().map(|(n, _)| n.as_str()).collect();
    check(
        !a.is_empty() && a == b,
        format!("{} files compared ({})", a.len(), names.join(", ")),
    )
}

fn main() {
    let mut failed = 0;
    let mut report = |id: usize, name: &str, budget: Duration, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = start.elapsed();
        let (ok, detail) = match outcome {
            Ok(d) if elapsed <= budget => (true, d),
            Ok(d) => (false, format!("{d}; over the {budget:?} budget")),
            Err(d) => (false, d),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "{} {id} {name} ({:.1} s): {detail}",
            if ok { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
    };
    let secs = Duration::from_secs;
    report(1, "estimator unbiasedness", secs(10), &mut unbiasedness);
    report(2, "MLR ratio bound", secs(10), &mut mlr_bound);
    report(3, "reduction lattice", secs(5), &mut reduction_lattice);
    report(4, "gradient correctness", secs(5), &mut gradient_correctness);
    report(5, "posterior consistency", secs(30), &mut posterior_consistency);
    report(6, "reward function", secs(1), &mut reward_cases);
    report(7, "aggregation formulas", secs(1), &mut aggregation);
    let mut study = None;
    report(8, "desk-scale convergence study", secs(15 * 60), &mut || {
        let s = run_study();
        let out = convergence(&s);
        study = Some(s);
        out
    });
    report(9, "determinism", secs(15 * 60), &mut || match &study {
        Some(s) => determinism(s),
        None => Err("criterion 8 did not produce output".into()),
    });
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
