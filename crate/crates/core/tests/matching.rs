use featgeom::matching::{
    greedy_rate, match_report, mnn_rate, one_way_rate, seed_stability, Dictionary, TAU_GRID,
};
use featgeom::sae::SaeModel;
use featgeom::tensorio::Meta;
use featgeom::Exec;
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Brute-force rates, written without sharing any code with the library.
fn oracle(sim: &Array2<f32>, tau: f64) -> (f64, f64, f64) {
    let (na, nb) = sim.dim();
    let best_col = |i: usize| (0..nb).fold(0, |b, j| if sim[[i, j]] > sim[[i, b]] { j } else { b });
    let best_row = |j: usize| (0..na).fold(0, |b, i| if sim[[i, j]] > sim[[b, j]] { i } else { b });
    let mut one = 0;
    let mut mnn = 0;
    for i in 0..na {
        let j = best_col(i);
        if sim[[i, j]] as f64 >= tau {
            one += 1;
            if best_row(j) == i {
                mnn += 1;
            }
        }
    }
    // Greedy: repeatedly take the largest remaining admissible pair.
    let mut used_r = vec![false; na];
    let mut used_c = vec![false; nb];
    let mut greedy = 0;
    loop {
        let mut pick: Option<(usize, usize)> = None;
        for i in 0..na {
            for j in 0..nb {
                if used_r[i] || used_c[j] || (sim[[i, j]] as f64) < tau {
                    continue;
                }
                if pick.is_none_or(|(pi, pj)| sim[[i, j]] > sim[[pi, pj]]) {
                    pick = Some((i, j));
                }
            }
        }
        let Some((i, j)) = pick else { break };
        used_r[i] = true;
        used_c[j] = true;
        greedy += 1;
    }
    let n = na as f64;
    (one as f64 / n, mnn as f64 / n, greedy as f64 / n)
}

fn random_sim(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Array2<f32> {
    Array2::from_shape_fn((n, m), |_| rng.random_range(-1.0f32..1.0))
}

#[test]
fn brute_force_agreement_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let sim = random_sim(&mut rng, 16, 16);
        for &tau in &TAU_GRID {
            let (o, m, g) = oracle(&sim, tau);
            assert_eq!(one_way_rate(sim.view(), tau).unwrap().rate, o);
            assert_eq!(mnn_rate(sim.view(), tau).unwrap().rate, m);
            assert_eq!(greedy_rate(sim.view(), tau).unwrap().rate, g);
        }
    }
}

#[test]
fn brute_force_agreement_rectangular_and_quantized() {
    // Quantized values force many exact ties.
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let (n, m) = (rng.random_range(1..10), rng.random_range(1..10));
        let sim = Array2::from_shape_fn((n, m), |_| rng.random_range(0..11) as f32 / 10.0);
        for &tau in &TAU_GRID {
            let (o, mn, g) = oracle(&sim, tau);
            let r = match_report(sim.view(), &[tau], Exec::Sequential).unwrap();
            assert_eq!((r.one_way[0], r.mnn[0], r.greedy[0]), (o, mn, g), "{sim:?} tau {tau}");
        }
    }
}

#[test]
fn parallel_and_sequential_reports_match() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let sim = random_sim(&mut rng, 200, 150);
    assert_eq!(
        match_report(sim.view(), &TAU_GRID, Exec::Sequential).unwrap(),
        match_report(sim.view(), &TAU_GRID, Exec::Parallel).unwrap()
    );
}

#[test]
fn cosine_matrix_exec_invariant() {
    let a = SaeModel::init(16, 8, 4, 1).unwrap();
    let b = SaeModel::init(16, 8, 4, 2).unwrap();
    let (da, db) = (
        featgeom::matching::dictionary_from_sae(&a).unwrap(),
        featgeom::matching::dictionary_from_sae(&b).unwrap(),
    );
    let s = featgeom::matching::cosine_matrix(&da, &db, Exec::Sequential).unwrap();
    let p = featgeom::matching::cosine_matrix(&da, &db, Exec::Parallel).unwrap();
    assert_eq!(s, p);
    assert!(s.iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn seed_stability_is_symmetric_in_order() {
    let saes: Vec<_> = (0..3).map(|s| SaeModel::init(8, 4, 2, s).unwrap()).collect();
    let rev: Vec<_> = saes.iter().rev().cloned().collect();
    let a = seed_stability(&saes, &TAU_GRID, Exec::default()).unwrap();
    let b = seed_stability(&rev, &TAU_GRID, Exec::default()).unwrap();
    assert_eq!(a.pair_count, 3);
    for (x, y) in a.mean.iter().zip(&b.mean) {
        assert!((x - y).abs() < 1e-12);
    }
}

fn sim_strategy() -> impl Strategy<Value = Array2<f32>> {
    (1usize..12, 1usize..12).prop_flat_map(|(n, m)| {
        proptest::collection::vec(-1.0f32..1.0, n * m)
            .prop_map(move |v| Array2::from_shape_vec((n, m), v).unwrap())
    })
}

fn permute(sim: &Array2<f32>, rows: &[usize], cols: &[usize]) -> Array2<f32> {
    Array2::from_shape_fn(sim.dim(), |(i, j)| sim[[rows[i], cols[j]]])
}

proptest! {
    #[test]
    fn ordering_law_and_monotonicity(sim in sim_strategy()) {
        let r = match_report(sim.view(), &TAU_GRID, Exec::Sequential).unwrap();
        for t in 0..TAU_GRID.len() {
            prop_assert!(r.mnn[t] <= r.greedy[t]);
            prop_assert!(r.greedy[t] <= r.one_way[t]);
            if t > 0 {
                prop_assert!(r.one_way[t] <= r.one_way[t - 1]);
                prop_assert!(r.mnn[t] <= r.mnn[t - 1]);
                prop_assert!(r.greedy[t] <= r.greedy[t - 1]);
            }
        }
    }

    #[test]
    fn rates_invariant_under_permutation(sim in sim_strategy(), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, m) = sim.dim();
        let mut rows: Vec<usize> = (0..n).collect();
        let mut cols: Vec<usize> = (0..m).collect();
        for i in (1..n).rev() { rows.swap(i, rng.random_range(0..=i)); }
        for j in (1..m).rev() { cols.swap(j, rng.random_range(0..=j)); }
        let p = permute(&sim, &rows, &cols);
        let a = match_report(sim.view(), &TAU_GRID, Exec::Sequential).unwrap();
        let b = match_report(p.view(), &TAU_GRID, Exec::Sequential).unwrap();
        prop_assert_eq!(a.one_way, b.one_way);
        prop_assert_eq!(a.mnn, b.mnn);
        prop_assert_eq!(a.greedy, b.greedy);
    }

    #[test]
    fn unit_norm_dictionaries(cols in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 4), 1..10)) {
        let n = cols.len();
        let m = Array2::from_shape_fn((4, n), |(i, j)| cols[j][i]);
        match Dictionary::from_columns(m.view(), Meta::new()) {
            Ok(d) => for i in 0..d.n_features() {
                let norm: f64 = d.atom(i).iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
                prop_assert!((norm - 1.0).abs() <= 1e-5);
            },
            Err(_) => prop_assert!(cols.iter().any(|c| c.iter().all(|v| *v == 0.0))),
        }
    }
}
