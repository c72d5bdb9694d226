use greensim::estimators::{pg_gradient, BufferRecord, Credit};
use greensim::harness::evaluate_policy;
use greensim::mdp::{rollout, trajectory_return};
use greensim::oracle::{exact_expected_return, exact_policy_gradient, random_mdp, random_model, TabularMDP};
use greensim::rng::SeedTree;
use greensim::{PolicyParams64, TabularMDP64};

#[test]
fn one_step_bandit_gradient_from_samples() {
    let bandit = TabularMDP64::new(1, 2, 2, vec![1.0], vec![vec![1.0, 0.0]]).unwrap();
    let model = bandit.model(vec![vec![vec![1.0]; 2]]).unwrap();
    let pol = bandit.linear_policy();
    let theta = PolicyParams64::zeros(pol.shape());
    let mut rng = SeedTree::new(1).rng();
    let n = 100_000;
    let trajs: Vec<_> = (0..n).map(|_| rollout(&bandit, &pol, &theta, &model, 1, &mut rng).unwrap()).collect();
    let rec = BufferRecord::new(1, theta.clone(), model, trajs, &bandit, &pol).unwrap();
    let g = pg_gradient(&rec, &theta, &Credit::reward_to_go(1.0), &pol).unwrap().gradient;
    // each trajectory contributes ±0.5 with probability 1/2, else 0
    let se = 0.25 / (n as f64).sqrt();
    assert!((g[0] - 0.25).abs() < 3.0 * se, "{}", g[0]);
    assert!((g[1] + 0.25).abs() < 3.0 * se, "{}", g[1]);
}

#[test]
fn monte_carlo_return_matches_enumeration() {
    let mut rng = SeedTree::new(7).rng();
    let mdp = random_mdp(3, 2, 4, &mut rng).unwrap();
    let model = random_model(&mdp, &mut rng).unwrap();
    let pol = mdp.linear_policy();
    let theta = PolicyParams64::random(pol.shape(), 1.0, &mut rng);
    let exact = exact_expected_return(&mdp, &model, &theta, 0.9, &pol).unwrap();
    let n = 100_000;
    let returns: Vec<f64> = (0..n)
        .map(|_| trajectory_return(&rollout(&mdp, &pol, &theta, &model, 0, &mut rng).unwrap(), 0.9))
        .collect();
    let mean = returns.iter().sum::<f64>() / n as f64;
    let sd = (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
    assert!((mean - exact).abs() < 4.0 * sd / (n as f64).sqrt(), "{mean} vs {exact}");

    let eval = evaluate_policy(&mdp, &pol, &theta, &model, 0.9, n, &mut SeedTree::new(8).rng()).unwrap();
    assert!((eval - exact).abs() < 4.0 * sd / (n as f64).sqrt(), "{eval} vs {exact}");
}

#[test]
fn single_precision_oracle_tracks_double() {
    let rewards = vec![vec![1.0, -0.5], vec![0.25, 2.0]];
    let p = vec![
        vec![vec![0.7, 0.3], vec![0.2, 0.8]],
        vec![vec![0.5, 0.5], vec![0.9, 0.1]],
    ];
    let m64 = TabularMDP::<f64>::new(2, 2, 3, vec![0.4, 0.6], rewards.clone()).unwrap();
    let m32 = TabularMDP::<f32>::new(
        2,
        2,
        3,
        vec![0.4, 0.6],
        rewards.iter().map(|r| r.iter().map(|&x| x as f32).collect()).collect(),
    )
    .unwrap();
    let w64 = m64.model(p.clone()).unwrap();
    let w32 = m32
        .model(p.iter().map(|s| s.iter().map(|r| r.iter().map(|&x| x as f32).collect()).collect()).collect())
        .unwrap();
    let (p64, p32) = (m64.linear_policy(), m32.linear_policy());
    let values = [0.3, -0.7, 1.1, 0.2];
    let t64 = PolicyParams64::new(p64.shape(), values.to_vec()).unwrap();
    let t32 = greensim::policy::PolicyParams::<f32>::new(p32.shape(), values.map(|v| v as f32).to_vec()).unwrap();
    let g64 = exact_policy_gradient(&m64, &w64, &t64, &Credit::reward_to_go(1.0), &p64).unwrap();
    let g32 = exact_policy_gradient(&m32, &w32, &t32, &Credit::reward_to_go(1.0), &p32).unwrap();
    for (a, b) in g64.iter().zip(&g32) {
        assert!((a - *b as f64).abs() < 1e-5, "{a} vs {b}");
    }
}
