use hybrep::coding::{default_tau, llc_approx, llc_exact, llc_objective, vlad_encode, LlcParams};
use hybrep::dictionary::PartDictionary;
use hybrep::Matrix;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_dict(k: usize, d: usize, rng: &mut ChaCha8Rng) -> PartDictionary {
    let data = (0..k * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    PartDictionary::from_atoms(Matrix::new(k, d, data).unwrap()).unwrap()
}

fn sq(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (f64::from(*x) - f64::from(*y)).powi(2)).sum()
}

/// Exact LLC as the least-squares problem `[D^T; sqrt(lambda) diag(dist)] v ~ [x; 0]`,
/// solved by SVD.
fn llc_oracle(x: &[f32], dict: &PartDictionary, p: &LlcParams) -> Vec<f64> {
    let (k, d) = (dict.len(), dict.dim());
    let a = DMatrix::from_fn(d + k, k, |r, c| {
        if r < d {
            f64::from(dict.atom(c)[r])
        } else if r - d == c {
            p.lambda.sqrt() * (sq(x, dict.atom(c)) / p.tau).exp()
        } else {
            0.0
        }
    });
    let b = DVector::from_fn(d + k, |r, _| if r < d { f64::from(x[r]) } else { 0.0 });
    a.svd(true, true).solve(&b, 1e-14).unwrap().iter().copied().collect()
}

/// Sum-to-one reconstruction over `idx` via the KKT system of
/// `min |sum w_i (d_i - x)|^2 + reg |w|^2  s.t.  sum w = 1`.
fn constrained_oracle(x: &[f32], dict: &PartDictionary, idx: &[usize]) -> Vec<f64> {
    let m = idx.len();
    let z: Vec<Vec<f64>> =
        idx.iter().map(|&k| dict.atom(k).iter().zip(x).map(|(a, b)| f64::from(*a) - f64::from(*b)).collect()).collect();
    let c = DMatrix::from_fn(m, m, |i, j| z[i].iter().zip(&z[j]).map(|(a, b)| a * b).sum::<f64>());
    let reg = (1e-4 * c.trace()).max(1e-12);
    let kkt = DMatrix::from_fn(m + 1, m + 1, |i, j| match (i < m, j < m) {
        (true, true) => c[(i, j)] + if i == j { reg } else { 0.0 },
        (true, false) | (false, true) => 1.0,
        (false, false) => 0.0,
    });
    let rhs = DVector::from_fn(m + 1, |i, _| if i < m { 0.0 } else { 1.0 });
    let sol = kkt.lu().solve(&rhs).unwrap();
    sol.iter().take(m).copied().collect()
}

#[test]
fn llc_exact_matches_least_squares_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..100 {
        let (k, d) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let dict = random_dict(k, d, &mut rng);
        let x: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p = LlcParams { lambda: rng.random_range(1e-3..1.0), tau: default_tau(&dict), knn: 1 };
        let got = llc_exact(&x, &dict, &p).unwrap();
        let want = llc_oracle(&x, &dict, &p);
        for (g, w) in got.as_slice().iter().zip(&want) {
            assert!((f64::from(*g) - w).abs() <= 1e-6 * w.abs().max(1.0), "trial {trial}: {g} vs {w}");
        }
    }
}

#[test]
fn llc_approx_matches_constrained_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for trial in 0..100 {
        let (k, d) = (rng.random_range(2..=12), rng.random_range(2..=8));
        let dict = random_dict(k, d, &mut rng);
        let x: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let knn = rng.random_range(2..=k.min(5));
        let code = llc_approx(&x, &dict, &LlcParams { lambda: 1e-4, tau: 1.0, knn }).unwrap();
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| sq(&x, dict.atom(a)).total_cmp(&sq(&x, dict.atom(b))).then(a.cmp(&b)));
        let idx = &order[..knn];
        let want = constrained_oracle(&x, &dict, idx);
        for (i, &kk) in idx.iter().enumerate() {
            let g = f64::from(code.as_slice()[kk]);
            assert!((g - want[i]).abs() <= 1e-4 * want[i].abs().max(1.0), "trial {trial}: atom {kk}: {g} vs {}", want[i]);
        }
        let outside = (0..k).filter(|j| !idx.contains(j)).all(|j| code.as_slice()[j] == 0.0);
        assert!(outside, "trial {trial}: weight outside the neighborhood");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn llc_approx_sums_to_one_with_knn_support(seed in any::<u64>(), k in 5usize..16, d in 2usize..8, knn in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dict = random_dict(k, d, &mut rng);
        let x: Vec<f32> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let code = llc_approx(&x, &dict, &LlcParams { lambda: 1e-4, tau: 1.0, knn }).unwrap();
        let s: f64 = code.as_slice().iter().map(|&v| f64::from(v)).sum();
        prop_assert!((s - 1.0).abs() < 1e-6);
        prop_assert!(code.as_slice().iter().filter(|v| **v != 0.0).count() <= knn);
    }

    #[test]
    fn llc_exact_is_a_local_minimum(seed in any::<u64>(), k in 1usize..7, d in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dict = random_dict(k, d, &mut rng);
        let x: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p = LlcParams { lambda: 0.1, tau: default_tau(&dict), knn: 1 };
        let v: Vec<f64> = llc_exact(&x, &dict, &p).unwrap().as_slice().iter().map(|&c| f64::from(c)).collect();
        let f0 = llc_objective(&x, &dict, &p, &v);
        for i in 0..k {
            for h in [1e-3, -1e-3] {
                let mut w = v.clone();
                w[i] += h;
                prop_assert!(llc_objective(&x, &dict, &p, &w) >= f0 - 1e-9);
            }
        }
    }
}

/// Values on a 1/4 grid keep every distance and residual exact in f32.
fn grid_points(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f32>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-12i32..=12) as f32 / 4.0).collect()).collect()
}

fn vlad_oracle(xs: &[Vec<f32>], centers: &[Vec<f32>]) -> Vec<f32> {
    let d = centers[0].len();
    let nearest = |x: &[f32]| {
        let mut best = 0;
        for j in 1..centers.len() {
            if sq(x, &centers[j]) < sq(x, &centers[best]) {
                best = j;
            }
        }
        best
    };
    let mut out = Vec::new();
    for (j, c) in centers.iter().enumerate() {
        let mut acc = vec![0.0f32; d];
        for x in xs.iter().filter(|x| nearest(x) == j) {
            for t in 0..d {
                acc[t] += x[t] - c[t];
            }
        }
        out.extend(acc);
    }
    out
}

#[test]
fn vlad_matches_double_loop_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for trial in 0..100 {
        let (n, m, d) = (rng.random_range(1..=50), rng.random_range(1..=5), rng.random_range(1..=6));
        let xs = grid_points(n, d, &mut rng);
        let centers = grid_points(m, d, &mut rng);
        let got = vlad_encode(&xs, &Matrix::from_rows(&centers).unwrap()).unwrap();
        assert_eq!(got.as_slice(), vlad_oracle(&xs, &centers).as_slice(), "trial {trial}");
    }
}

proptest! {
    #[test]
    fn vlad_is_additive_over_disjoint_sets(seed in any::<u64>(), n1 in 1usize..20, n2 in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = grid_points(n1, 3, &mut rng);
        let b = grid_points(n2, 3, &mut rng);
        let centers = Matrix::from_rows(&grid_points(4, 3, &mut rng)).unwrap();
        let both: Vec<Vec<f32>> = a.iter().chain(&b).cloned().collect();
        let va = vlad_encode(&a, &centers).unwrap();
        let vb = vlad_encode(&b, &centers).unwrap();
        let sum: Vec<f32> = va.as_slice().iter().zip(vb.as_slice()).map(|(x, y)| x + y).collect();
        let joint = vlad_encode(&both, &centers).unwrap();
        prop_assert_eq!(joint.as_slice(), sum.as_slice());
    }
}
