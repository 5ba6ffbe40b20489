//! Trace powers against independent linear algebra, and basic sampling
//! sanity checks of whole replicas.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use num_complex::Complex64;
use overlap_wishart::ensemble::{gram, trace_power, Block, ObservableSpec};
use overlap_wishart::{EntryProcessSpec, ExperimentGeometry, ProcessFamily, ScalarField, StreamSeed, TimeGrid};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;

fn rng(seed: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

fn random_real(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut r = rng(seed);
    Array2::from_shape_fn((rows, cols), |_| r.sample(StandardNormal))
}

fn random_complex(rows: usize, cols: usize, seed: u64) -> Array2<Complex64> {
    let mut r = rng(seed);
    Array2::from_shape_fn((rows, cols), |_| Complex64::new(r.sample(StandardNormal), r.sample(StandardNormal)))
}

/// `Tr(M^p)` by repeated schoolbook products.
fn naive_trace_power_complex(m: &Array2<Complex64>, p: u32) -> Complex64 {
    let n = m.nrows();
    let mut acc = m.clone();
    for _ in 1..p {
        let mut next = Array2::<Complex64>::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                let mut s = Complex64::new(0.0, 0.0);
                for k in 0..n {
                    s += acc[(i, k)] * m[(k, j)];
                }
                next[(i, j)] = s;
            }
        }
        acc = next;
    }
    (0..n).map(|i| acc[(i, i)]).sum()
}

fn naive_gram_complex(b: &Array2<Complex64>) -> Array2<Complex64> {
    let (m, n) = b.dim();
    Array2::from_shape_fn((n, n), |(i, j)| (0..m).map(|k| b[(k, i)].conj() * b[(k, j)]).sum())
}

#[test]
fn real_trace_power_matches_schoolbook_products() {
    let b = random_real(60, 50, 1);
    let w = gram(b.view());
    let wc = w.mapv(|x| Complex64::new(x, 0.0));
    for p in 1..=5 {
        let fast = trace_power(w.view(), p).unwrap();
        let slow = naive_trace_power_complex(&wc, p).re;
        assert!((fast - slow).abs() <= 1e-10 * slow.abs(), "p={p}: {fast} vs {slow}");
    }
}

#[test]
fn complex_trace_power_matches_schoolbook_products() {
    let b = random_complex(50, 50, 2);
    let w = gram(b.view());
    let slow_w = naive_gram_complex(&b);
    for (x, y) in w.iter().zip(slow_w.iter()) {
        assert!((x - y).norm() <= 1e-10 * (1.0 + y.norm()));
    }
    for p in 1..=5 {
        let fast = trace_power(w.view(), p).unwrap();
        let slow = naive_trace_power_complex(&slow_w, p);
        assert!(slow.im.abs() <= 1e-9 * slow.re.abs());
        assert!((fast - slow.re).abs() <= 1e-10 * slow.re.abs(), "p={p}: {fast} vs {}", slow.re);
    }
}

#[test]
fn trace_power_is_the_eigenvalue_power_sum() {
    let b = random_real(14, 10, 3);
    let w = gram(b.view());
    let eig = SymmetricEigen::new(DMatrix::from_fn(10, 10, |i, j| w[(i, j)])).eigenvalues;
    assert!(eig.iter().all(|&l| l > -1e-10));
    for p in 1..=6 {
        let expected: f64 = eig.iter().map(|l| l.powi(p as i32)).sum();
        let got = trace_power(w.view(), p).unwrap();
        assert!((got - expected).abs() <= 1e-8 * expected.abs(), "p={p}");
    }
}

type Quat = [f64; 4];

fn qmul(a: Quat, b: Quat) -> Quat {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

fn qconj(a: Quat) -> Quat {
    [a[0], -a[1], -a[2], -a[3]]
}

fn qadd(a: Quat, b: Quat) -> Quat {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2], a[3] + b[3]]
}

fn qmatmul(x: &[Vec<Quat>], y: &[Vec<Quat>]) -> Vec<Vec<Quat>> {
    let (n, k, m) = (x.len(), y.len(), y[0].len());
    (0..n)
        .map(|i| (0..m).map(|j| (0..k).fold([0.0; 4], |s, l| qadd(s, qmul(x[i][l], y[l][j])))).collect())
        .collect()
}

#[test]
fn quaternion_block_matches_direct_quaternion_arithmetic() {
    let (rows, cols) = (4, 3);
    let mut r = rng(4);
    let q: Vec<Vec<Quat>> = (0..rows)
        .map(|_| (0..cols).map(|_| std::array::from_fn(|_| r.sample(StandardNormal))).collect())
        .collect();
    let mut block = Block::zeros(ScalarField::Quaternion, rows, cols).unwrap();
    for (i, row) in q.iter().enumerate() {
        for (j, x) in row.iter().enumerate() {
            block.set(i, j, x);
            assert_eq!(block.get(i, j), x.to_vec());
        }
    }
    // W = Q^* Q with the quaternion conjugate transpose.
    let qstar: Vec<Vec<Quat>> = (0..cols).map(|j| (0..rows).map(|i| qconj(q[i][j])).collect()).collect();
    let w = qmatmul(&qstar, &q);
    let mut power = w.clone();
    for p in 1..=4u32 {
        if p > 1 {
            power = qmatmul(&power, &w);
        }
        // The real part of the quaternion trace is the invariant trace.
        let direct: f64 = (0..cols).map(|i| power[i][i][0]).sum();
        let got = block.wishart_trace_power(p, 1).unwrap();
        assert!((got - direct).abs() <= 1e-10 * direct.abs(), "p={p}: {got} vs {direct}");
    }

    // Every eigenvalue of the complex embedding of W appears twice.
    let Block::Quaternion(emb) = &block else { unreachable!() };
    let g = gram(emb.view());
    let n = g.nrows();
    let h = DMatrix::from_fn(n, n, |i, j| g[(i, j)]);
    let mut eig: Vec<f64> = SymmetricEigen::new(h).eigenvalues.iter().copied().collect();
    eig.sort_by(f64::total_cmp);
    for pair in eig.chunks(2) {
        assert!((pair[0] - pair[1]).abs() <= 1e-9 * pair[1].abs().max(1.0), "{eig:?}");
    }
}

fn geometry(field: ScalarField, scale: usize, obs: Vec<ObservableSpec>) -> ExperimentGeometry {
    let process = EntryProcessSpec::new(field, ProcessFamily::OrnsteinUhlenbeck { rate: 1.0 }).unwrap();
    ExperimentGeometry::new(scale, TimeGrid::new(vec![0.0, 0.5]).unwrap(), process, obs).unwrap()
}

fn window(mu: f64, nu: f64, power: u32, time_index: usize) -> ObservableSpec {
    ObservableSpec {
        row_offset: 0.0,
        col_offset: 0.0,
        mu,
        nu,
        power,
        time_index,
    }
}

#[test]
fn second_power_is_bounded_by_squared_first_power() {
    for field in [ScalarField::Real, ScalarField::Complex, ScalarField::Quaternion] {
        let g = geometry(field, 20, vec![window(1.0, 0.5, 1, 0), window(1.0, 0.5, 2, 0)]);
        for rep in 0..50 {
            let v = g.sample_replica(&StreamSeed::new(9).replica(rep)).unwrap().values;
            assert!(v[1] <= v[0] * v[0] * (1.0 + 1e-12), "{field:?}: {v:?}");
            assert!(v[1] >= v[0] * v[0] / 10.0 * (1.0 - 1e-12));
        }
    }
}

#[test]
fn mean_linear_statistic_is_mn_over_l() {
    // (0.5, 0.5) at L = 200: a 100 x 100 window with E Tr W = 100 * 100 / 200.
    let g = geometry(ScalarField::Real, 200, vec![window(0.5, 0.5, 1, 0)]);
    let seed = StreamSeed::new(31);
    let n = 10_000;
    let xs: Vec<f64> = (0..n).map(|r| g.sample_replica(&seed.replica(r)).unwrap().values[0]).collect();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    assert!((mean - 50.0).abs() <= 3.0 * se, "mean {mean}, se {se}");
    // Var Tr W = 2 m n / L^2 = 0.5 for real Gaussian entries.
    assert!((var - 0.5).abs() < 0.05, "var {var}");
}
