use ndarray::Array2;

use neglm::distlab::{
    kl_gap, pmi_matrix, random_distribution, train_exact, train_sampled, JointDistribution,
    ScoreConfig,
};
use neglm::optim::{OptimizerKind, TrainConfig};
use neglm::sampling::{seeded_rng, NoiseDistribution};

fn best_gap(dist: &JointDistribution, cfg: ScoreConfig, d: usize, restarts: u64) -> f64 {
    (0..restarts)
        .map(|seed| {
            let f = train_exact(dist, cfg, d, 10_000, 200.0, seed).unwrap();
            kl_gap(dist, cfg, &f.matrix()).unwrap()
        })
        .fold(f64::INFINITY, f64::min)
}

/// `p(x,y) ∝ exp(u_x v_y + s_x t_y)`: a rank-2 log table whose PMI is not
/// representable at rank 1.
fn two_factor_distribution() -> JointDistribution {
    let u: [f64; 5] = [1.5, -1.0, 0.5, -0.8, 0.0];
    let v = [1.0, -1.2, 0.3, 0.9, -0.5];
    let s = [0.2, 1.1, -1.3, 0.4, 0.9];
    let t = [-1.0, 0.6, 1.2, -0.4, 0.3];
    let mut p = Array2::from_shape_fn((5, 5), |(x, y)| (u[x] * v[y] + s[x] * t[y]).exp());
    let total = p.sum();
    p /= total;
    let again = p.sum();
    p /= again;
    JointDistribution::new(p).unwrap()
}

#[test]
fn rank_one_cannot_fit_rank_two_structure() {
    let dist = two_factor_distribution();
    let cfg = ScoreConfig::new(1).unwrap();
    let gap = best_gap(&dist, cfg, 1, 10);
    assert!(gap > 1e-3, "best rank-1 gap {gap}");
}

#[test]
fn gap_is_nonincreasing_in_width() {
    let mut rng = seeded_rng(21, 0);
    for _ in 0..3 {
        let dist = random_distribution(&mut rng, 5, 5, 0.0, 0.0);
        let cfg = ScoreConfig::new(2).unwrap();
        let gaps: Vec<f64> = (1..=5).map(|d| best_gap(&dist, cfg, d, 4)).collect();
        for w in gaps.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{gaps:?}");
        }
        assert!(gaps[4] <= 1e-6, "{gaps:?}");
    }
}

#[test]
fn sampled_training_approaches_shifted_pmi() {
    let mut rng = seeded_rng(8, 0);
    let dist = random_distribution(&mut rng, 4, 4, 0.2, 0.0);
    let cfg = ScoreConfig::new(2).unwrap();
    let pairs = dist.sample_pairs(&mut rng, 200_000);
    let noise = NoiseDistribution::from_counts(dist.marginal_y(), 1.0).unwrap();
    let opt = TrainConfig {
        optimizer: OptimizerKind::AdaptiveMoments,
        lr: 0.01,
        decay_factor: 1.0,
        epochs: 3,
        batch_size: 100,
        k: 2,
        alpha: 1.0,
        seed: 8,
        ..TrainConfig::default()
    };
    let factors = train_sampled(&pairs, 4, cfg, &noise, 4, &opt).unwrap();
    let m = factors.matrix();
    let pmi = pmi_matrix(&dist, cfg).to_matrix().unwrap();
    let worst = (&m - &pmi).iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let gap = kl_gap(&dist, cfg, &m).unwrap();
    let start_gap = kl_gap(&dist, cfg, &Array2::zeros((4, 4))).unwrap();
    assert!(worst < 0.2, "max |m - pmi| = {worst}");
    assert!(gap < start_gap / 50.0, "{gap} vs {start_gap}");
}
