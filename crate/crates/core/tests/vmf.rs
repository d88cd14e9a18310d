use crystal_core::vmf::{random_directions, vmf_map_loss, VmfDistribution};
use crystal_core::{crystal_forward, CrystalHead, DenseMatrix, DenseVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn mean_vector(samples: &DenseMatrix) -> Vec<f64> {
    let mut m = vec![0.0; samples.cols()];
    for row in samples.iter_rows() {
        for (a, b) in m.iter_mut().zip(row) {
            *a += b / samples.rows() as f64;
        }
    }
    m
}

/// Gram–Schmidt on a Gaussian matrix.
fn random_orthogonal(dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for u in &q {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        q.push(unit(v));
    }
    q
}

fn apply(q: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    q.iter()
        .map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

#[test]
fn p3_density_integrates_to_one() {
    let mu = DenseVector::new(unit(vec![0.3, -0.5, 0.8])).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let points = random_directions(1_000_000, 3, &mut rng);
    for kappa in [0.5, 1.0, 5.0] {
        let dist = VmfDistribution::new(mu.clone(), kappa).unwrap();
        let mut sum = 0.0;
        for x in points.iter_rows() {
            let ld = dist.log_density(x).unwrap();
            assert!(ld.normalized);
            sum += ld.value.exp();
        }
        let integral = 4.0 * std::f64::consts::PI * sum / points.rows() as f64;
        assert!((integral - 1.0).abs() < 0.01, "kappa {kappa}: {integral}");
    }
}

#[test]
fn p3_normalizer_matches_closed_form() {
    for kappa in [0.5, 1.0, 5.0, 50.0] {
        let expected = (kappa / (4.0 * std::f64::consts::PI * f64::sinh(kappa))).ln();
        let got = VmfDistribution::log_normalizer_p3(kappa);
        assert!(
            (got - expected).abs() < 1e-12 * expected.abs().max(1.0),
            "{kappa}"
        );
    }
}

#[test]
fn mean_resultant_length_matches_moment() {
    let mu = DenseVector::new(vec![0.0, 0.0, 1.0]).unwrap();
    for (kappa, seed) in [(1.0, 1), (5.0, 2), (20.0, 3)] {
        let samples = VmfDistribution::new(mu.clone(), kappa)
            .unwrap()
            .sample_seeded(100_000, seed);
        let m = mean_vector(&samples);
        let r = m.iter().map(|x| x * x).sum::<f64>().sqrt();
        let expected = 1.0 / f64::tanh(kappa) - 1.0 / kappa;
        assert!(
            (r / expected - 1.0).abs() < 0.02,
            "kappa {kappa}: {r} vs {expected}"
        );
    }
}

#[test]
fn sampling_is_rotation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for dim in [3, 6] {
        let q = random_orthogonal(dim, &mut rng);
        let mu: Vec<f64> = unit((0..dim).map(|_| rng.sample(StandardNormal)).collect());
        let kappa = 8.0;
        let rotated_mean: Vec<f64> = {
            let s = VmfDistribution::new(DenseVector::new(mu.clone()).unwrap(), kappa)
                .unwrap()
                .sample_seeded(50_000, 1);
            apply(&q, &mean_vector(&s))
        };
        let mean_of_rotated = mean_vector(
            &VmfDistribution::new(DenseVector::new(apply(&q, &mu)).unwrap(), kappa)
                .unwrap()
                .sample_seeded(50_000, 2),
        );
        for (a, b) in rotated_mean.iter().zip(&mean_of_rotated) {
            assert!(
                (a - b).abs() < 0.02,
                "dim {dim}: {rotated_mean:?} vs {mean_of_rotated:?}"
            );
        }
    }
}

#[test]
fn map_loss_equals_crystal_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for case in 0..25 {
        let (c, d, m) = (2 + case % 5, 2 + case % 7, 1 + case % 4);
        let mus = random_directions(c, d, &mut rng);
        let x = random_directions(m, d, &mut rng);
        let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..c)).collect();
        let kappa = rng.random_range(0.1..60.0);
        let head = CrystalHead::new(mus.clone(), DenseVector::zeros(c), kappa, false).unwrap();
        let a = vmf_map_loss(&x, &mus, kappa, &labels).unwrap();
        let b = crystal_forward(&head, &x, &labels).unwrap();
        assert!((a - b).abs() <= 1e-9, "case {case}: {a} vs {b}");
    }
}
