use featgeom::fragility::{
    auc, fit_survival_predictor, quintile_bins, quintile_survival, spearman_exact, SurvivalSample,
};
use itertools::Itertools;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let below = x.iter().filter(|&&u| u < v).count() as f64;
            let equal = x.iter().filter(|&&u| u == v).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

fn rho(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Independent enumerator over all orderings of y.
fn spearman_oracle(x: &[f64], y: &[f64]) -> (f64, f64) {
    let (rx, ry) = (ranks(x), ranks(y));
    let obs = rho(&rx, &ry);
    let perms: Vec<Vec<f64>> = ry.iter().copied().permutations(5).collect();
    let hits = perms.iter().filter(|p| rho(&rx, p).abs() >= obs.abs() - 1e-12).count();
    (obs, hits as f64 / perms.len() as f64)
}

#[test]
fn spearman_matches_enumeration_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..300 {
        let x: Vec<f64> = (0..5).map(|_| rng.random_range(0..4) as f64).collect();
        let y: Vec<f64> = (0..5).map(|_| rng.random_range(0..4) as f64).collect();
        let (ox, oy) = (ranks(&x), ranks(&y));
        if ox.iter().all(|&v| v == ox[0]) || oy.iter().all(|&v| v == oy[0]) {
            assert!(spearman_exact(&x, &y).is_err());
            continue;
        }
        let (r, p) = spearman_exact(&x, &y).unwrap();
        let (er, ep) = spearman_oracle(&x, &y);
        assert!((r - er).abs() < 1e-12, "{x:?} {y:?}");
        assert_eq!(p, ep, "{x:?} {y:?}");
    }
}

#[test]
fn auc_matches_pair_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..200 {
        let n = 50;
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..20) as f64).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..n {
            for j in 0..n {
                if labels[i] && !labels[j] {
                    pairs += 1.0;
                    wins += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        std::cmp::Ordering::Greater => 1.0,
                        std::cmp::Ordering::Equal => 0.5,
                        std::cmp::Ordering::Less => 0.0,
                    };
                }
            }
        }
        assert_eq!(auc(&scores, &labels).unwrap(), wins / pairs);
    }
}

fn logistic_samples(rng: &mut ChaCha8Rng, n: usize, beta: f64) -> Vec<SurvivalSample> {
    (0..n)
        .map(|_| {
            let lf: f64 = rng.random_range(-8.0..-1.0);
            let sp = [0.3, 0.5][rng.random_range(0..2)];
            let t = 1.0 + beta * (lf + 4.5) - 2.0 * sp;
            let p = 1.0 / (1.0 + (-t).exp());
            SurvivalSample { log_fire: lf, sparsity: sp, label: rng.random_bool(p) }
        })
        .collect()
}

#[test]
fn predictor_recovers_negative_coefficient() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let samples = logistic_samples(&mut rng, 4000, -1.5);
    let m = fit_survival_predictor(&samples, 0.7).unwrap();
    assert!(!m.separated);
    assert!(m.beta_log_fire < 0.0);
    assert!((m.raw_beta_log_fire + 1.5).abs() < 0.2, "{}", m.raw_beta_log_fire);
    assert!((m.raw_beta_sparsity + 2.0).abs() < 1.0, "{}", m.raw_beta_sparsity);
    assert!(m.auc > 0.7);
}

#[test]
fn permuted_labels_give_chance_auc() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..10 {
        let samples: Vec<SurvivalSample> = (0..2000)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                SurvivalSample { log_fire: z, sparsity: rng.random_range(0.0..1.0), label: rng.random_bool(0.5) }
            })
            .collect();
        let m = fit_survival_predictor(&samples, 0.7).unwrap();
        assert!((m.auc - 0.5).abs() <= 0.05, "{}", m.auc);
    }
}

#[test]
fn predict_is_decreasing_in_firing_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let m = fit_survival_predictor(&logistic_samples(&mut rng, 1000, -1.0), 0.7).unwrap();
    assert!(m.beta_log_fire < 0.0);
    let mut prev = f64::INFINITY;
    for i in 0..100 {
        let p = m.predict(-10.0 + 0.1 * i as f64, 0.3);
        assert!(p < prev);
        prev = p;
    }
}

proptest! {
    #[test]
    fn quintiles_partition_alive(
        rates in proptest::collection::vec(0.0f64..1.0, 5..200),
        dead_every in 2usize..10,
    ) {
        let alive: Vec<bool> = (0..rates.len()).map(|i| i % dead_every != 0).collect();
        let n_alive = alive.iter().filter(|a| **a).count();
        match quintile_bins(&rates, &alive) {
            Err(_) => prop_assert!(n_alive < 5),
            Ok(b) => {
                let mut seen: Vec<usize> = b.bins.iter().flatten().copied().collect();
                seen.sort_unstable();
                let expect: Vec<usize> = (0..rates.len()).filter(|&i| alive[i]).collect();
                prop_assert_eq!(seen, expect);
                let sizes: Vec<usize> = b.bins.iter().map(Vec::len).collect();
                prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
                for q in 1..5 {
                    prop_assert!(b.mean_rates[q - 1] <= b.mean_rates[q]);
                }
                let r = quintile_survival(&b, &alive).unwrap();
                prop_assert_eq!(r.survival_by_quintile, vec![1.0; 5]);
            }
        }
    }

    #[test]
    fn spearman_symmetric(x in proptest::collection::vec(0u8..6, 5), y in proptest::collection::vec(0u8..6, 5)) {
        let x: Vec<f64> = x.into_iter().map(f64::from).collect();
        let y: Vec<f64> = y.into_iter().map(f64::from).collect();
        match (spearman_exact(&x, &y), spearman_exact(&y, &x)) {
            (Ok(a), Ok(b)) => {
                prop_assert!((a.0 - b.0).abs() < 1e-12);
                prop_assert_eq!(a.1, b.1);
                prop_assert!(a.1 > 0.0 && a.1 <= 1.0);
            }
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "asymmetric error"),
        }
    }

    #[test]
    fn strictly_monotone_profiles_have_p_two_over_120(mut x in proptest::collection::vec(-100.0f64..100.0, 5)) {
        x.sort_by(f64::total_cmp);
        x.dedup();
        prop_assume!(x.len() == 5);
        let y: Vec<f64> = x.iter().map(|v| -v.powi(3)).collect();
        let (r, p) = spearman_exact(&x, &y).unwrap();
        prop_assert_eq!(r, -1.0);
        prop_assert_eq!(p, 2.0 / 120.0);
    }

    #[test]
    fn auc_invariant_under_monotone_transform(
        scores in proptest::collection::vec(-3.0f64..3.0, 4..60),
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels: Vec<bool> = scores.iter().map(|_| rng.random_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let t: Vec<f64> = scores.iter().map(|s| s.exp() * 3.0 + 1.0).collect();
        prop_assert_eq!(auc(&scores, &labels).unwrap(), auc(&t, &labels).unwrap());
    }

    #[test]
    fn negating_log_fire_negates_beta(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = logistic_samples(&mut rng, 200, -1.0);
        let neg: Vec<SurvivalSample> = s.iter().map(|x| SurvivalSample { log_fire: -x.log_fire, ..*x }).collect();
        let a = fit_survival_predictor(&s, 0.7).unwrap();
        let b = fit_survival_predictor(&neg, 0.7).unwrap();
        prop_assert_eq!(a.beta_log_fire, -b.beta_log_fire);
        prop_assert_eq!(a.beta_sparsity, b.beta_sparsity);
        prop_assert_eq!(a.intercept, b.intercept);
    }
}
