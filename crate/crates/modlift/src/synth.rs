//! Seeded random problem instances and support/error metrics.
//!
//! Generation follows the simulation protocol: the dictionary `A` is real
//! i.i.d. standard normal, the basis `B` is deterministic per kind (first `K`
//! DFT or identity columns) or a QR-orthonormalized complex Gaussian draw,
//! the support is uniform without replacement, on-support columns are
//! `c_j h_j` with standard complex normal `c_j`, `h_j`, and the noise has
//! i.i.d. `N(0, sigma^2)` real and imaginary parts.
//!
//! Everything is a pure function of `(params, seed)`. The RNG is ChaCha8, a
//! counter-based seedable stream cipher; parallel trials derive their
//! per-instance seeds with [`trial_seed`] (splitmix64 mixing of base seed,
//! grid-point index, and trial index).

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::lifted_op::{
    coherence, CMat, CVec, Dictionary, LiftedOperator, MatrixFreeOp, SubspaceBasis,
};
use crate::theory::{gamma_zero, BoundInputs};

/// Default relative column-norm threshold for support extraction.
pub const DEFAULT_SUPPORT_REL_THRESHOLD: f64 = 1e-4;

/// Which modulation basis an instance uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisKind {
    DftFirstK,
    IdentityFirstK,
    RandomOrthonormal,
}

impl BasisKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            BasisKind::DftFirstK => "dft-first-k",
            BasisKind::IdentityFirstK => "identity-first-k",
            BasisKind::RandomOrthonormal => "random-orthonormal",
        }
    }

    pub fn from_str(s: &str) -> Result<Self> {
        match s {
            "dft-first-k" => Ok(BasisKind::DftFirstK),
            "identity-first-k" => Ok(BasisKind::IdentityFirstK),
            "random-orthonormal" => Ok(BasisKind::RandomOrthonormal),
            other => Err(Error::param(format!("unknown basis kind '{other}'"))),
        }
    }
}

/// Parameters of a synthetic instance.
#[derive(Debug, Clone)]
pub struct InstanceParams {
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub j: usize,
    /// Noise std per real/imaginary component.
    pub sigma: f64,
    pub basis_kind: BasisKind,
    /// When set, all on-support columns are rescaled by one common factor so
    /// that `gamma_0 / min_j ||x0_j||` equals this target.
    pub gamma_target: Option<f64>,
    pub seed: u64,
}

impl InstanceParams {
    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 || self.k == 0 || self.j == 0 {
            return Err(Error::param("dimensions must be positive"));
        }
        if self.j > self.m {
            return Err(Error::param(format!(
                "sparsity J={} exceeds atom count M={}",
                self.j, self.m
            )));
        }
        if self.k >= self.n {
            return Err(Error::param(format!(
                "subspace dimension K={} must be below N={}",
                self.k, self.n
            )));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::param("sigma must be nonnegative"));
        }
        if let Some(g) = self.gamma_target {
            if !(g > 0.0) {
                return Err(Error::param("gamma_target must be positive"));
            }
        }
        Ok(())
    }
}

/// A complete synthetic problem: operator, ground truth, support, noise, and
/// observations with `y = L(X0) + noise` holding exactly.
#[derive(Debug)]
pub struct Instance {
    pub params: InstanceParams,
    pub op: LiftedOperator,
    pub x0: CMat,
    /// Sorted ground-truth support indices.
    pub support: Vec<usize>,
    pub noise: CVec,
    pub y: CVec,
}

/// Generates an instance deterministically from its parameters. RNG draw
/// order: dictionary, basis (random kind only), support, on-support columns
/// in ascending index order, noise.
pub fn gen_instance(params: &InstanceParams) -> Result<Instance> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let (n, m, k, j) = (params.n, params.m, params.k, params.j);

    let mut a = DMatrix::<f64>::zeros(n, m);
    for col in 0..m {
        for row in 0..n {
            a[(row, col)] = rng.sample(StandardNormal);
        }
    }
    let dict = Dictionary::from_real(a)?;

    let basis = match params.basis_kind {
        BasisKind::DftFirstK => SubspaceBasis::dft_first_k(n, k)?,
        BasisKind::IdentityFirstK => SubspaceBasis::identity_first_k(n, k)?,
        BasisKind::RandomOrthonormal => {
            let mut raw = CMat::zeros(n, k);
            for col in 0..k {
                for row in 0..n {
                    raw[(row, col)] =
                        Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
                }
            }
            SubspaceBasis::from_matrix(raw)?
        }
    };
    let mu_max = coherence(&basis);

    let mut support: Vec<usize> = rand::seq::index::sample(&mut rng, m, j).into_vec();
    support.sort_unstable();

    let mut x0 = CMat::zeros(k, m);
    for &idx in &support {
        let c = Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
        for row in 0..k {
            let h = Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
            x0[(row, idx)] = c * h;
        }
    }

    if let Some(target) = params.gamma_target {
        let bounds = BoundInputs::new(n as f64, m as f64, k as f64, j as f64, params.sigma, mu_max)?;
        let g0 = gamma_zero(&bounds)?;
        if g0 == 0.0 {
            return Err(Error::param(
                "gamma_target requires sigma > 0 (gamma_0 would be zero)",
            ));
        }
        let min_norm = support
            .iter()
            .map(|&idx| x0.column(idx).norm())
            .fold(f64::INFINITY, f64::min);
        if min_norm == 0.0 {
            return Err(Error::Numeric {
                iteration: 0,
                msg: "degenerate zero-norm ground-truth column".into(),
            });
        }
        let factor = Complex64::new(g0 / target / min_norm, 0.0);
        for &idx in &support {
            let scaled = x0.column(idx) * factor;
            x0.set_column(idx, &scaled);
        }
    }

    let mut noise = CVec::zeros(n);
    if params.sigma > 0.0 {
        let normal = Normal::new(0.0, params.sigma)
            .map_err(|e| Error::param(format!("invalid sigma: {e}")))?;
        for i in 0..n {
            noise[i] = Complex64::new(rng.sample(normal), rng.sample(normal));
        }
    }

    let op = LiftedOperator::direct(dict, basis)?;
    let y = op.forward(&x0)? + &noise;

    Ok(Instance {
        params: params.clone(),
        op,
        x0,
        support,
        noise,
        y,
    })
}

/// Indices of columns whose norm exceeds `rel_threshold` times the largest
/// column norm; empty for the all-zero matrix.
pub fn extract_support(x: &CMat, rel_threshold: f64) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&rel_threshold) {
        return Err(Error::param("rel_threshold must lie in [0, 1)"));
    }
    let norms: Vec<f64> = (0..x.ncols()).map(|j| x.column(j).norm()).collect();
    let max = norms.iter().cloned().fold(0.0f64, f64::max);
    if max == 0.0 {
        return Ok(Vec::new());
    }
    Ok(norms
        .iter()
        .enumerate()
        .filter(|(_, &n)| n > rel_threshold * max)
        .map(|(j, _)| j)
        .collect())
}

/// Max column-wise l2 distance between two equally shaped matrices.
pub fn l2inf_error(xhat: &CMat, x0: &CMat) -> Result<f64> {
    if xhat.shape() != x0.shape() {
        return Err(Error::shape(format!(
            "shape mismatch: {:?} vs {:?}",
            xhat.shape(),
            x0.shape()
        )));
    }
    Ok((0..xhat.ncols())
        .map(|j| (xhat.column(j) - x0.column(j)).norm())
        .fold(0.0f64, f64::max))
}

/// Support/error summary of an estimate against an instance's ground truth.
#[derive(Debug, Clone)]
pub struct SupportMetrics {
    pub recovered_support: Vec<usize>,
    pub exact: bool,
    pub l2inf_error: f64,
}

pub fn support_metrics(
    xhat: &CMat,
    instance: &Instance,
    rel_threshold: f64,
) -> Result<SupportMetrics> {
    let recovered_support = extract_support(xhat, rel_threshold)?;
    let exact = recovered_support == instance.support;
    let err = l2inf_error(xhat, &instance.x0)?;
    Ok(SupportMetrics {
        recovered_support,
        exact,
        l2inf_error: err,
    })
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-instance seed for trial `trial` at grid point `point` under `base`:
/// the instance stream is the base seed mixed with both indices through
/// splitmix64, so parallel trials are reproducible and order-independent.
pub fn trial_seed(base: u64, point: u64, trial: u64) -> u64 {
    splitmix64(splitmix64(base ^ splitmix64(point)) ^ splitmix64(trial.wrapping_add(0x51_7c_c1_b7)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_params(seed: u64) -> InstanceParams {
        InstanceParams {
            n: 30,
            m: 20,
            k: 2,
            j: 3,
            sigma: 0.1,
            basis_kind: BasisKind::DftFirstK,
            gamma_target: None,
            seed,
        }
    }

    #[test]
    fn noiseless_observation_is_exact_forward() {
        let mut p = base_params(7);
        p.sigma = 0.0;
        let inst = gen_instance(&p).unwrap();
        let fwd = inst.op.forward(&inst.x0).unwrap();
        assert_eq!(inst.y.len(), fwd.len());
        for i in 0..fwd.len() {
            assert_eq!(inst.y[i], fwd[i], "bit-exact at {i}");
        }
        assert!(inst.noise.iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn same_seed_same_instance() {
        let p = base_params(42);
        let a = gen_instance(&p).unwrap();
        let b = gen_instance(&p).unwrap();
        assert_eq!(a.support, b.support);
        assert_eq!(a.x0, b.x0);
        assert_eq!(a.y, b.y);
    }

    #[test]
    fn different_seed_different_instance() {
        let a = gen_instance(&base_params(1)).unwrap();
        let b = gen_instance(&base_params(2)).unwrap();
        assert_ne!(a.y, b.y);
    }

    #[test]
    fn off_support_columns_are_exactly_zero() {
        let inst = gen_instance(&base_params(3)).unwrap();
        for j in 0..inst.params.m {
            if !inst.support.contains(&j) {
                assert_eq!(inst.x0.column(j).norm(), 0.0);
            }
        }
    }

    #[test]
    fn gamma_target_pins_min_column_norm() {
        // The setting sigma=0.1, J=K=3, N=100, M=150 has gamma_0 ~ 0.5365;
        // gamma_target = 0.02 forces min column norm to gamma_0/0.02 ~ 26.8.
        let p = InstanceParams {
            n: 100,
            m: 150,
            k: 3,
            j: 3,
            sigma: 0.1,
            basis_kind: BasisKind::DftFirstK,
            gamma_target: Some(0.02),
            seed: 11,
        };
        let inst = gen_instance(&p).unwrap();
        let min_norm = inst
            .support
            .iter()
            .map(|&idx| inst.x0.column(idx).norm())
            .fold(f64::INFINITY, f64::min);
        let g0 = 0.5365339239.to_owned();
        assert!(
            (min_norm - g0 / 0.02).abs() < 1e-4 * (g0 / 0.02),
            "min norm {min_norm}"
        );
    }

    #[test]
    fn gamma_target_with_zero_sigma_errors() {
        let mut p = base_params(5);
        p.sigma = 0.0;
        p.gamma_target = Some(0.02);
        assert!(gen_instance(&p).is_err());
    }

    #[test]
    fn extract_support_edges() {
        let x = CMat::zeros(2, 4);
        assert!(extract_support(&x, 1e-4).unwrap().is_empty());

        let mut x1 = CMat::zeros(2, 4);
        x1[(0, 2)] = Complex64::new(0.5, 0.0);
        assert_eq!(extract_support(&x1, 0.0).unwrap(), vec![2]);
        assert_eq!(extract_support(&x1, 0.999).unwrap(), vec![2]);

        assert!(extract_support(&x1, 1.0).is_err());
        assert!(extract_support(&x1, -0.1).is_err());
    }

    #[test]
    fn l2inf_matches_column_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = CMat::from_fn(2, 3, |_, _| {
            Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
        });
        let b = CMat::from_fn(2, 3, |_, _| {
            Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
        });
        let brute = (0..3)
            .map(|j| (a.column(j) - b.column(j)).norm())
            .fold(0.0f64, f64::max);
        assert_eq!(l2inf_error(&a, &b).unwrap(), brute);
        assert_eq!(l2inf_error(&a, &a).unwrap(), 0.0);

        let mut c = a.clone();
        c[(0, 1)] += Complex64::new(1.0, 0.0);
        assert!((l2inf_error(&c, &a).unwrap() - 1.0).abs() < 1e-15);

        assert!(l2inf_error(&a, &CMat::zeros(2, 4)).is_err());
    }

    #[test]
    fn noise_component_variance() {
        // 2N real components across one draw; check the empirical variance
        // against sigma^2 within 3 standard errors.
        let p = InstanceParams {
            n: 50_000,
            m: 2,
            k: 1,
            j: 1,
            sigma: 0.3,
            basis_kind: BasisKind::DftFirstK,
            gamma_target: None,
            seed: 100,
        };
        let inst = gen_instance(&p).unwrap();
        let samples: Vec<f64> = inst
            .noise
            .iter()
            .flat_map(|z| [z.re, z.im])
            .collect();
        let n = samples.len() as f64;
        let var = samples.iter().map(|v| v * v).sum::<f64>() / n;
        let sigma2 = 0.09;
        let se = sigma2 * (2.0 / n).sqrt();
        assert!(
            (var - sigma2).abs() <= 3.0 * se,
            "var {var} vs {sigma2} (3se {})",
            3.0 * se
        );
    }

    #[test]
    fn support_uniformity() {
        // Each index should appear with frequency J/M within 3 standard
        // errors over many draws.
        let trials = 10_000usize;
        let m = 10;
        let j = 2;
        let mut counts = vec![0usize; m];
        for t in 0..trials {
            let p = InstanceParams {
                n: 5,
                m,
                k: 1,
                j,
                sigma: 0.0,
                basis_kind: BasisKind::DftFirstK,
                gamma_target: None,
                seed: trial_seed(900, 0, t as u64),
            };
            let inst = gen_instance(&p).unwrap();
            for &idx in &inst.support {
                counts[idx] += 1;
            }
        }
        let p_expect = j as f64 / m as f64;
        let se = (p_expect * (1.0 - p_expect) / trials as f64).sqrt();
        for (idx, &c) in counts.iter().enumerate() {
            let freq = c as f64 / trials as f64;
            assert!(
                (freq - p_expect).abs() <= 3.0 * se,
                "index {idx}: freq {freq} vs {p_expect}"
            );
        }
    }

    #[test]
    fn trial_seed_spreads() {
        let mut seen = std::collections::HashSet::new();
        for p in 0..50u64 {
            for t in 0..50u64 {
                assert!(seen.insert(trial_seed(1234, p, t)));
            }
        }
    }
}
