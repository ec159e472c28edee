use evolvex_core::graphgen::Adjacency;
use evolvex_core::metrics::{auc_roc, perplexity};
use evolvex_core::train::{activity_loss, activity_targets, link_loss, total_loss, LossWeights};
use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn link_loss_three_node_direct_sum() {
    let adj = Adjacency::from_edges(3, false, &[(0, 1), (1, 2)]).unwrap();
    let p = array![[0.0, 0.8, 0.3], [0.8, 0.0, 0.6], [0.3, 0.6, 0.0]];
    let pairs = [(0, 1), (1, 2), (0, 2)];
    let expected = -(0.8f64.ln() + 0.6f64.ln() + 0.7f64.ln()) / 3.0;
    assert!((link_loss(&p, &adj, &pairs).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn link_loss_single_pair_and_saturation() {
    let adj = Adjacency::from_edges(2, false, &[(0, 1)]).unwrap();
    let half = array![[0.0, 0.5], [0.5, 0.0]];
    assert!((link_loss(&half, &adj, &[(0, 1)]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    let sure = array![[0.0, 1.0 - 1e-9], [1.0 - 1e-9, 0.0]];
    assert!(link_loss(&sure, &adj, &[(0, 1)]).unwrap() < 1e-6);
    let empty = Adjacency::empty(3, false);
    let near_zero = Array2::from_elem((3, 3), 1e-9);
    assert!(link_loss(&near_zero, &empty, &[(0, 2), (1, 2)]).unwrap() < 1e-6);
}

#[test]
fn activity_targets_scale_by_the_maximum() {
    let t = activity_targets(&[200.0, 50.0, 20.0, 5.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    assert_eq!(&t[..4], &[1.0, 0.25, 0.1, 0.025]);
    assert!(activity_targets(&[0.0; 8]).is_none());
}

#[test]
fn activity_loss_three_users_three_categories() {
    // user 2 has no posts and is skipped
    let probs = array![[0.7, 0.2, 0.4], [0.1, 0.9, 0.5], [0.3, 0.3, 0.3]];
    let counts = array![[4.0, 2.0, 0.0], [1.0, 3.0, 3.0], [0.0, 0.0, 0.0]];
    let u0 = -(1.0 * 0.7f64.ln() + 0.5 * 0.2f64.ln());
    let u1 = -((1.0 / 3.0) * 0.1f64.ln() + 0.9f64.ln() + 0.5f64.ln());
    let expected = (u0 + u1) / 2.0;
    assert!((activity_loss(&probs, &counts) - expected).abs() < 1e-12);
}

#[test]
fn activity_loss_of_a_confident_correct_user_vanishes() {
    let probs = array![[1.0 - 1e-9, 0.2, 0.9]];
    let counts = array![[5.0, 0.0, 0.0]];
    assert!(activity_loss(&probs, &counts) < 1e-6);
}

#[test]
fn total_loss_weightings() {
    assert!((total_loss(1.0, 2.0, LossWeights::new(0.3, 0.7)) - 1.7).abs() < 1e-15);
    assert_eq!(total_loss(1.0, 3.0, LossWeights::new(0.5, 0.5)), 2.0);
    assert_eq!(total_loss(1.25, 9.0, LossWeights::new(1.0, 0.0)), 1.25);
}

#[test]
fn perplexity_of_uniform_and_dyadic_cases_is_exact() {
    let uniform: Vec<Vec<f64>> = vec![vec![0.125; 8]; 37];
    let labels: Vec<usize> = (0..37).map(|i| i % 8).collect();
    assert_eq!(perplexity(&uniform, &labels).unwrap(), 8.0);
    let dists = vec![vec![0.5, 0.5], vec![0.25, 0.75], vec![0.875, 0.125]];
    assert_eq!(perplexity(&dists, &[0, 0, 1]).unwrap(), 4.0);
}

fn brute_force_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut total = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            total += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / total
}

#[test]
fn auc_matches_brute_force_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut checked = 0;
    while checked < 100 {
        let n = rng.random_range(2..40);
        // coarse scores force plenty of ties
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64 / 5.0).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
            continue;
        }
        assert_eq!(auc_roc(&scores, &labels).unwrap(), brute_force_auc(&scores, &labels));
        checked += 1;
    }
}
