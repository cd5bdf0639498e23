//! Synthetic meta-datasets.
//!
//! Three generators, each a pure function of its [`SyntheticSpec`]:
//!
//! - complementary experts: every model is an expert on one region of a hidden
//!   latent variable and confidently wrong elsewhere, so only per-instance
//!   weighting can reach zero error;
//! - preferred model: one model is correlated with the target at a chosen level,
//!   the rest are independent noise;
//! - polynomial regression: least-squares polynomials fitted on bootstrap
//!   resamples of a tiny training pool.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{LabelVector, MetaDataset, PredictionCube, Split, TaskKind};
use crate::error::{Error, Result};
use crate::math;

/// Probability an expert puts on its predicted class.
pub const EXPERT_CONFIDENCE: f64 = 0.9;

/// Index of the correlated model in the preferred-model generator.
pub const PREFERRED_MODEL: usize = 0;

/// Size of the training pool every polynomial base model resamples from.
pub const POLY_TRAIN_POOL: usize = 20;

/// Ridge term the generator adds to the polynomial normal equations. Bootstrap
/// resamples often have fewer distinct points than a degree-10 fit has
/// coefficients; without damping the fits swing by orders of magnitude between
/// pool points.
pub const POLY_RIDGE: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeneratorKind {
    ComplementaryExperts,
    PreferredModel,
    PolynomialRegression,
}

/// Parameters of a synthetic meta-dataset. `n_instances` applies to each split.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub kind: GeneratorKind,
    pub n_instances: usize,
    pub n_models: usize,
    pub n_classes: usize,
    pub noise: f64,
    pub preferred_correlation: f64,
    pub degree: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn complementary_experts(n_models: usize, n_classes: usize, n_instances: usize, seed: u64) -> Self {
        Self {
            kind: GeneratorKind::ComplementaryExperts,
            n_instances,
            n_models,
            n_classes,
            noise: 0.0,
            preferred_correlation: 0.0,
            degree: 1,
            seed,
        }
    }

    pub fn preferred_model(n_models: usize, correlation: f64, n_instances: usize, seed: u64) -> Self {
        Self {
            kind: GeneratorKind::PreferredModel,
            n_instances,
            n_models,
            n_classes: 1,
            noise: 0.0,
            preferred_correlation: correlation,
            degree: 1,
            seed,
        }
    }

    pub fn polynomial_regression(n_models: usize, degree: usize, n_instances: usize, seed: u64) -> Self {
        Self {
            kind: GeneratorKind::PolynomialRegression,
            n_instances,
            n_models,
            n_classes: 1,
            noise: 0.3,
            preferred_correlation: 0.0,
            degree,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_instances == 0 || self.n_models == 0 || self.n_classes == 0 {
            return Err(Error::InvalidSpec(
                "instance, model and class counts must be at least 1".into(),
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "noise scale {} must be finite and >= 0",
                self.noise
            )));
        }
        if !(0.0..=1.0).contains(&self.preferred_correlation) {
            return Err(Error::InvalidSpec(format!(
                "preferred correlation {} outside [0, 1]",
                self.preferred_correlation
            )));
        }
        if self.degree < 1 {
            return Err(Error::InvalidSpec("polynomial degree must be at least 1".into()));
        }
        match self.kind {
            GeneratorKind::ComplementaryExperts => {
                if self.n_models < 2 {
                    return Err(Error::InvalidSpec(
                        "complementary experts need at least 2 models".into(),
                    ));
                }
                if self.n_classes < 2 {
                    return Err(Error::InvalidSpec(
                        "complementary experts need at least 2 classes".into(),
                    ));
                }
            }
            GeneratorKind::PreferredModel | GeneratorKind::PolynomialRegression => {
                if self.n_models < 2 {
                    return Err(Error::InvalidSpec("at least 2 models are required".into()));
                }
            }
        }
        Ok(())
    }
}

/// Runs the generator selected by `spec.kind`.
pub fn generate(spec: &SyntheticSpec) -> Result<MetaDataset> {
    match spec.kind {
        GeneratorKind::ComplementaryExperts => generate_complementary_experts(spec),
        GeneratorKind::PreferredModel => generate_preferred_model(spec),
        GeneratorKind::PolynomialRegression => generate_polynomial_regression(spec),
    }
}

/// Region of the latent variable that model `region` is the expert for.
pub fn expert_region(latent: f64, n_models: usize) -> usize {
    ((latent * n_models as f64) as usize).min(n_models - 1)
}

/// Instance `i` draws a latent `u ~ U(0, 1)` and a uniform label `y`. The expert
/// for region `floor(u * M)` puts 0.9 on `y` and spreads 0.1 over the other
/// classes; every other model puts 0.9 on `(y + 1) mod C` and 0.1 on `y`.
pub fn generate_complementary_experts(spec: &SyntheticSpec) -> Result<MetaDataset> {
    if spec.kind != GeneratorKind::ComplementaryExperts {
        return Err(Error::InvalidSpec("spec is not a complementary-experts spec".into()));
    }
    spec.validate()?;
    let (m, c, n) = (spec.n_models, spec.n_classes, spec.n_instances);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut split = || {
        let mut values = vec![0.0; n * m * c];
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let latent: f64 = rng.random();
            let y = rng.random_range(0..c);
            let expert = expert_region(latent, m);
            for k in 0..m {
                let row = &mut values[(i * m + k) * c..(i * m + k + 1) * c];
                if k == expert {
                    row.fill((1.0 - EXPERT_CONFIDENCE) / (c - 1) as f64);
                    row[y] = EXPERT_CONFIDENCE;
                } else {
                    row[(y + 1) % c] = EXPERT_CONFIDENCE;
                    row[y] = 1.0 - EXPERT_CONFIDENCE;
                }
            }
            labels.push(y);
        }
        PredictionCube::new(n, m, c, values).map(|cube| Split::new(cube, LabelVector::Classes(labels)))
    };
    let validation = split()?;
    let test = split()?;
    MetaDataset::new(
        format!("experts-m{m}-c{c}-s{}", spec.seed),
        TaskKind::classification(c)?,
        validation,
        test,
    )
}

fn standardize(column: &mut [f64]) {
    let n = column.len() as f64;
    let mean = column.iter().sum::<f64>() / n;
    let var = column.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = math::sqrt(var);
    for v in column.iter_mut() {
        *v = if sd > 0.0 { (*v - mean) / sd } else { 0.0 };
    }
}

/// Regression data with target `y ~ N(0, 1)`. Model [`PREFERRED_MODEL`] outputs
/// `rho * y + sqrt(1 - rho^2) * eps`; the others are independent standard
/// normals. Targets and every model column are standardized per split.
pub fn generate_preferred_model(spec: &SyntheticSpec) -> Result<MetaDataset> {
    if spec.kind != GeneratorKind::PreferredModel {
        return Err(Error::InvalidSpec("spec is not a preferred-model spec".into()));
    }
    spec.validate()?;
    let (m, n) = (spec.n_models, spec.n_instances);
    let rho = spec.preferred_correlation;
    let residual = math::sqrt(1.0 - rho * rho);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut split = || {
        let mut y = Vec::with_capacity(n);
        let mut columns = vec![Vec::with_capacity(n); m];
        for _ in 0..n {
            let target: f64 = rng.sample(StandardNormal);
            let eps: f64 = rng.sample(StandardNormal);
            y.push(target);
            for (k, col) in columns.iter_mut().enumerate() {
                if k == PREFERRED_MODEL {
                    col.push(rho * target + residual * eps);
                } else {
                    col.push(rng.sample(StandardNormal));
                }
            }
        }
        standardize(&mut y);
        columns.iter_mut().for_each(|c| standardize(c));
        let mut values = vec![0.0; n * m];
        for (k, col) in columns.iter().enumerate() {
            for (i, v) in col.iter().enumerate() {
                values[i * m + k] = *v;
            }
        }
        PredictionCube::new(n, m, 1, values).map(|cube| Split::new(cube, LabelVector::Values(y)))
    };
    let validation = split()?;
    let test = split()?;
    MetaDataset::new(
        format!("preferred-m{m}-rho{rho}-s{}", spec.seed),
        TaskKind::Regression,
        validation,
        test,
    )
}

/// Ground truth of the polynomial generator.
pub fn poly_target(x: f64) -> f64 {
    libm::sin(PI * x)
}

/// A fitted least-squares polynomial in the Legendre basis on `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialFit {
    pub coefficients: Vec<f64>,
    /// Mean squared residual on the bootstrap sample the polynomial was fitted to.
    pub train_mse: f64,
}

impl PolynomialFit {
    pub fn eval(&self, x: f64) -> f64 {
        let mut basis = vec![0.0; self.coefficients.len()];
        legendre(x, &mut basis);
        basis.iter().zip(&self.coefficients).map(|(b, c)| b * c).sum()
    }
}

fn legendre(x: f64, out: &mut [f64]) {
    if out.is_empty() {
        return;
    }
    out[0] = 1.0;
    if out.len() > 1 {
        out[1] = x;
    }
    for k in 2..out.len() {
        let kf = k as f64;
        out[k] = ((2.0 * kf - 1.0) * x * out[k - 1] - (kf - 1.0) * out[k - 2]) / kf;
    }
}

/// Solves the symmetric positive definite system `a x = b` in place (Cholesky).
fn cholesky_solve(a: &mut [f64], b: &mut [f64], n: usize) -> Result<()> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if d <= 0.0 {
            return Err(Error::NonFinite("normal equations are not positive definite".into()));
        }
        let d = math::sqrt(d);
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= a[i * n + k] * b[k];
        }
        b[i] = s / a[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= a[k * n + i] * b[k];
        }
        b[i] = s / a[i * n + i];
    }
    Ok(())
}

/// Least-squares polynomial of `degree` through `(xs, ts)` with an L2 penalty
/// `ridge` on the Legendre coefficients.
pub fn fit_polynomial(xs: &[f64], ts: &[f64], degree: usize, ridge: f64) -> Result<PolynomialFit> {
    if xs.len() != ts.len() || xs.is_empty() {
        return Err(Error::Shape(format!("{} inputs for {} targets", xs.len(), ts.len())));
    }
    let p = degree + 1;
    let mut gram = vec![0.0; p * p];
    let mut rhs = vec![0.0; p];
    let mut basis = vec![0.0; p];
    for (&x, &t) in xs.iter().zip(ts) {
        legendre(x, &mut basis);
        for i in 0..p {
            rhs[i] += basis[i] * t;
            for j in 0..p {
                gram[i * p + j] += basis[i] * basis[j];
            }
        }
    }
    for i in 0..p {
        gram[i * p + i] += ridge;
    }
    cholesky_solve(&mut gram, &mut rhs, p)?;
    let mut fit = PolynomialFit {
        coefficients: rhs,
        train_mse: 0.0,
    };
    fit.train_mse = xs
        .iter()
        .zip(ts)
        .map(|(&x, &t)| {
            let r = fit.eval(x) - t;
            r * r
        })
        .sum::<f64>()
        / xs.len() as f64;
    Ok(fit)
}

/// Regression data from polynomials fitted on bootstrap resamples of a
/// [`POLY_TRAIN_POOL`]-point pool drawn from `sin(pi x) + noise`.
pub fn generate_polynomial_regression(spec: &SyntheticSpec) -> Result<MetaDataset> {
    generate_polynomial_regression_with_fits(spec).map(|(ds, _)| ds)
}

/// Like [`generate_polynomial_regression`], also returning the fitted base models.
pub fn generate_polynomial_regression_with_fits(spec: &SyntheticSpec) -> Result<(MetaDataset, Vec<PolynomialFit>)> {
    if spec.kind != GeneratorKind::PolynomialRegression {
        return Err(Error::InvalidSpec("spec is not a polynomial-regression spec".into()));
    }
    spec.validate()?;
    let (m, n) = (spec.n_models, spec.n_instances);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noisy = |rng: &mut ChaCha8Rng, x: f64| {
        let e: f64 = rng.sample(StandardNormal);
        poly_target(x) + spec.noise * e
    };

    let pool_x: Vec<f64> = (0..POLY_TRAIN_POOL).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let pool_t: Vec<f64> = pool_x.iter().map(|&x| noisy(&mut rng, x)).collect();

    let mut fits = Vec::with_capacity(m);
    for _ in 0..m {
        let idx: Vec<usize> = (0..POLY_TRAIN_POOL)
            .map(|_| rng.random_range(0..POLY_TRAIN_POOL))
            .collect();
        let xs: Vec<f64> = idx.iter().map(|&i| pool_x[i]).collect();
        let ts: Vec<f64> = idx.iter().map(|&i| pool_t[i]).collect();
        fits.push(fit_polynomial(&xs, &ts, spec.degree, POLY_RIDGE)?);
    }

    let split = |rng: &mut ChaCha8Rng| {
        let mut values = Vec::with_capacity(n * m);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let x = rng.random_range(-1.0..=1.0);
            labels.push(noisy(rng, x));
            values.extend(fits.iter().map(|f| f.eval(x)));
        }
        PredictionCube::new(n, m, 1, values).map(|cube| Split::new(cube, LabelVector::Values(labels)))
    };
    let validation = split(&mut rng)?;
    let test = split(&mut rng)?;
    let ds = MetaDataset::new(
        format!("poly-d{}-m{m}-s{}", spec.degree, spec.seed),
        TaskKind::Regression,
        validation,
        test,
    )?;
    Ok((ds, fits))
}
