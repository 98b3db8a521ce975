//! Problem generators and loss/gradient evaluators.
//!
//! Two objectives are provided: least-squares matrix sensing and a two-layer
//! polynomial network with the smooth hinge loss. Both expose minibatch
//! gradients over explicit index sets so the optimizers control sampling.

use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{frobenius_inner, nuclear_norm, DenseMatrix};

/// Shared evaluation surface for the optimizers.
pub trait Objective: Sync {
    fn dims(&self) -> (usize, usize);
    fn theta(&self) -> f64;
    fn num_samples(&self) -> usize;
    fn loss(&self, x: &DenseMatrix) -> f64;
    fn minibatch_gradient(&self, x: &DenseMatrix, indices: &[usize]) -> Result<DenseMatrix>;
    /// Loss at the generating model, when one is known (used as F_ref).
    fn reference_value(&self) -> Option<f64>;

    fn full_gradient(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let all: Vec<usize> = (0..self.num_samples()).collect();
        self.minibatch_gradient(x, &all)
    }
}

/// Least-squares matrix sensing: F(X) = (1/N) sum (<A_i, X> - y_i)^2.
pub struct MatrixSensingProblem {
    pub sensing_matrices: Vec<DenseMatrix>,
    pub responses: Vec<f64>,
    pub ground_truth: DenseMatrix,
    pub theta: f64,
    pub noise_std: f64,
    pub seed: u64,
}

pub fn generate_matrix_sensing(
    d1: usize,
    d2: usize,
    rank: usize,
    n: usize,
    noise_std: f64,
    seed: u64,
) -> Result<MatrixSensingProblem> {
    if rank == 0 || rank > d1.min(d2) {
        return Err(Error::Parameter(format!(
            "rank {rank} out of range for {d1}x{d2}"
        )));
    }
    if n == 0 {
        return Err(Error::Parameter("need at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = DenseMatrix::from_vec(d1, rank, (0..d1 * rank).map(|_| rng.gen::<f64>()).collect())?;
    let v = DenseMatrix::from_vec(d2, rank, (0..d2 * rank).map(|_| rng.gen::<f64>()).collect())?;
    let mut ground_truth = DenseMatrix::zeros(d1, d2);
    for i in 0..d1 {
        for j in 0..d2 {
            let mut s = 0.0;
            for k in 0..rank {
                s += u.get(i, k) * v.get(j, k);
            }
            ground_truth.set(i, j, s);
        }
    }
    let nn = nuclear_norm(&ground_truth)?;
    ground_truth.scale(1.0 / nn);

    let mut sensing_matrices = Vec::with_capacity(n);
    let mut responses = Vec::with_capacity(n);
    for _ in 0..n {
        let a = DenseMatrix::from_vec(
            d1,
            d2,
            (0..d1 * d2).map(|_| standard_normal(&mut rng)).collect(),
        )?;
        let mut y = frobenius_inner(&a, &ground_truth)?;
        if noise_std > 0.0 {
            y += noise_std * standard_normal(&mut rng);
        }
        sensing_matrices.push(a);
        responses.push(y);
    }
    Ok(MatrixSensingProblem {
        sensing_matrices,
        responses,
        ground_truth,
        theta: 1.0,
        noise_std,
        seed,
    })
}

fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream simple.
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn sensing_loss(p: &MatrixSensingProblem, x: &DenseMatrix) -> Result<f64> {
    if x.shape() != p.ground_truth.shape() {
        return Err(Error::Dimension("iterate shape does not match problem".into()));
    }
    let n = p.sensing_matrices.len() as f64;
    let mut total = 0.0;
    for (a, &y) in p.sensing_matrices.iter().zip(&p.responses) {
        let r = frobenius_inner(a, x)? - y;
        total += r * r;
    }
    Ok(total / n)
}

pub fn sensing_minibatch_gradient(
    p: &MatrixSensingProblem,
    x: &DenseMatrix,
    indices: &[usize],
) -> Result<DenseMatrix> {
    if indices.is_empty() {
        return Err(Error::Parameter("empty minibatch index set".into()));
    }
    let (d1, d2) = p.ground_truth.shape();
    if x.shape() != (d1, d2) {
        return Err(Error::Dimension("iterate shape does not match problem".into()));
    }
    let mut grad = DenseMatrix::zeros(d1, d2);
    for &i in indices {
        if i >= p.sensing_matrices.len() {
            return Err(Error::Parameter(format!("sample index {i} out of range")));
        }
        let a = &p.sensing_matrices[i];
        let r = frobenius_inner(a, x)? - p.responses[i];
        grad.axpy(2.0 * r, a)?;
    }
    grad.scale(1.0 / indices.len() as f64);
    Ok(grad)
}

impl Objective for MatrixSensingProblem {
    fn dims(&self) -> (usize, usize) {
        self.ground_truth.shape()
    }
    fn theta(&self) -> f64 {
        self.theta
    }
    fn num_samples(&self) -> usize {
        self.sensing_matrices.len()
    }
    fn loss(&self, x: &DenseMatrix) -> f64 {
        sensing_loss(self, x).expect("shape checked by caller")
    }
    fn minibatch_gradient(&self, x: &DenseMatrix, indices: &[usize]) -> Result<DenseMatrix> {
        sensing_minibatch_gradient(self, x, indices)
    }
    fn reference_value(&self) -> Option<f64> {
        if self.noise_std == 0.0 {
            Some(0.0)
        } else {
            sensing_loss(self, &self.ground_truth).ok()
        }
    }
}

/// Two-layer polynomial network with quadratic activation and smooth hinge
/// loss: F(X) = mean s-hinge(y_i, a_i^T X a_i).
pub struct PnnProblem {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<f64>,
    pub theta: f64,
    pub seed: u64,
}

/// Synthetic image-like data: seeded uniform [0,1] feature vectors with
/// balanced +-1 labels.
pub fn generate_pnn(d: usize, n: usize, theta: f64, seed: u64) -> Result<PnnProblem> {
    if d == 0 || n == 0 {
        return Err(Error::Parameter("pnn dimensions must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features: Vec<Vec<f64>> =
        (0..n).map(|_| (0..d).map(|_| rng.gen::<f64>()).collect()).collect();
    let mut labels: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    // Shuffle labels so classes are balanced but not ordered.
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        labels.swap(i, j);
    }
    Ok(PnnProblem { features, labels, theta, seed })
}

/// Smooth hinge as printed: 0.5 - ty for ty <= 0, (0.5*(1-ty))^2 for
/// 0 <= ty <= 1, and 0 otherwise.
pub fn smooth_hinge(y: f64, t: f64) -> f64 {
    let ty = t * y;
    if ty <= 0.0 {
        0.5 - ty
    } else if ty <= 1.0 {
        let z = 0.5 * (1.0 - ty);
        z * z
    } else {
        0.0
    }
}

/// d/dt of the smooth hinge at (y, t); the piecewise formula is applied as
/// printed, with the ty <= 0 branch taken at the boundary.
pub fn smooth_hinge_derivative(y: f64, t: f64) -> f64 {
    let ty = t * y;
    if ty <= 0.0 {
        -y
    } else if ty <= 1.0 {
        -0.5 * y * (1.0 - ty)
    } else {
        0.0
    }
}

pub fn pnn_loss(p: &PnnProblem, x: &DenseMatrix) -> Result<f64> {
    let d = p.features[0].len();
    if x.shape() != (d, d) {
        return Err(Error::Dimension(format!("pnn iterate must be {d}x{d}")));
    }
    let mut total = 0.0;
    let mut xa = vec![0.0; d];
    for (a, &y) in p.features.iter().zip(&p.labels) {
        x.matvec(a, &mut xa);
        let t: f64 = a.iter().zip(&xa).map(|(u, v)| u * v).sum();
        total += smooth_hinge(y, t);
    }
    Ok(total / p.features.len() as f64)
}

pub fn pnn_minibatch_gradient(
    p: &PnnProblem,
    x: &DenseMatrix,
    indices: &[usize],
) -> Result<DenseMatrix> {
    if indices.is_empty() {
        return Err(Error::Parameter("empty minibatch index set".into()));
    }
    let d = p.features[0].len();
    if x.shape() != (d, d) {
        return Err(Error::Dimension(format!("pnn iterate must be {d}x{d}")));
    }
    let mut grad = DenseMatrix::zeros(d, d);
    let mut xa = vec![0.0; d];
    for &i in indices {
        if i >= p.features.len() {
            return Err(Error::Parameter(format!("sample index {i} out of range")));
        }
        let a = &p.features[i];
        let y = p.labels[i];
        x.matvec(a, &mut xa);
        let t: f64 = a.iter().zip(&xa).map(|(u, v)| u * v).sum();
        let g = smooth_hinge_derivative(y, t);
        if g != 0.0 {
            for (r, &ar) in a.iter().enumerate() {
                let c = g * ar;
                for (c_idx, &ac) in a.iter().enumerate() {
                    let val = grad.get(r, c_idx) + c * ac;
                    grad.set(r, c_idx, val);
                }
            }
        }
    }
    grad.scale(1.0 / indices.len() as f64);
    Ok(grad)
}

impl Objective for PnnProblem {
    fn dims(&self) -> (usize, usize) {
        let d = self.features[0].len();
        (d, d)
    }
    fn theta(&self) -> f64 {
        self.theta
    }
    fn num_samples(&self) -> usize {
        self.features.len()
    }
    fn loss(&self, x: &DenseMatrix) -> f64 {
        pnn_loss(self, x).expect("shape checked by caller")
    }
    fn minibatch_gradient(&self, x: &DenseMatrix, indices: &[usize]) -> Result<DenseMatrix> {
        pnn_minibatch_gradient(self, x, indices)
    }
    fn reference_value(&self) -> Option<f64> {
        None
    }
}

/// Smoothness/variance/diameter constants consumed by the batch schedules.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ProblemConstants {
    /// Smoothness estimate.
    pub l: f64,
    /// Stochastic-gradient deviation estimate (Frobenius rms).
    pub g: f64,
    /// Constraint-set diameter, 2*theta for the nuclear ball.
    pub d: f64,
}

/// Draws a random matrix with nuclear norm at most theta.
fn random_feasible<R: Rng>(rows: usize, cols: usize, theta: f64, rng: &mut R) -> Result<DenseMatrix> {
    let mut m = DenseMatrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| standard_normal(rng)).collect(),
    )?;
    let nn = nuclear_norm(&m)?;
    let target = theta * rng.gen::<f64>();
    m.scale(target / nn.max(f64::MIN_POSITIVE));
    Ok(m)
}

/// Top local curvature by power iteration on the finite-difference Hessian
/// map d -> (grad(x + eps d) - grad(x)) / eps; exact for quadratic losses.
fn hessian_power_estimate<R: Rng>(
    problem: &dyn Objective,
    x: &DenseMatrix,
    iters: usize,
    rng: &mut R,
) -> Result<f64> {
    let (rows, cols) = problem.dims();
    let eps = 1e-5;
    let base = problem.full_gradient(x)?;
    let mut d = DenseMatrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| standard_normal(rng)).collect(),
    )?;
    d.scale(1.0 / d.frobenius_norm().max(f64::MIN_POSITIVE));
    let mut lam = 0.0;
    for _ in 0..iters {
        let mut xp = x.clone();
        xp.axpy(eps, &d)?;
        let mut hd = problem.full_gradient(&xp)?;
        hd.axpy(-1.0, &base)?;
        hd.scale(1.0 / eps);
        lam = hd.frobenius_norm();
        if lam < 1e-12 {
            break;
        }
        hd.scale(1.0 / lam);
        d = hd;
    }
    Ok(lam)
}

/// Empirical estimates of (L, G); D = 2*theta exactly.
pub fn estimate_constants(
    problem: &dyn Objective,
    sample_count: usize,
    seed: u64,
) -> Result<ProblemConstants> {
    if sample_count < 2 {
        return Err(Error::Parameter("sample_count must be at least 2".into()));
    }
    let (rows, cols) = problem.dims();
    let theta = problem.theta();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut l_est = 0.0f64;
    // Curvature probes at a few feasible base points; pairwise secant ratios
    // below add a global check for non-quadratic objectives.
    for _ in 0..sample_count.min(3) {
        let x = random_feasible(rows, cols, theta, &mut rng)?;
        l_est = l_est.max(hessian_power_estimate(problem, &x, 25, &mut rng)?);
    }
    for _ in 0..sample_count {
        let x = random_feasible(rows, cols, theta, &mut rng)?;
        let y = random_feasible(rows, cols, theta, &mut rng)?;
        let mut diff = x.clone();
        diff.axpy(-1.0, &y)?;
        let dist = diff.frobenius_norm();
        if dist < 1e-12 {
            continue;
        }
        let mut gdiff = problem.full_gradient(&x)?;
        gdiff.axpy(-1.0, &problem.full_gradient(&y)?)?;
        l_est = l_est.max(gdiff.frobenius_norm() / dist);
    }
    let n = problem.num_samples();
    let mut sq_sum = 0.0;
    let mut count = 0usize;
    for _ in 0..sample_count {
        let x = random_feasible(rows, cols, theta, &mut rng)?;
        let full = problem.full_gradient(&x)?;
        for _ in 0..sample_count.min(8) {
            let i = rng.gen_range(0..n);
            let mut gi = problem.minibatch_gradient(&x, &[i])?;
            gi.axpy(-1.0, &full)?;
            let norm = gi.frobenius_norm();
            sq_sum += norm * norm;
            count += 1;
        }
    }
    let g = (sq_sum / count.max(1) as f64).sqrt();
    Ok(ProblemConstants {
        l: l_est.max(f64::MIN_POSITIVE),
        g: g.max(f64::MIN_POSITIVE),
        d: 2.0 * theta,
    })
}

/// Monte-Carlo estimate of E || minibatch grad - full grad ||_F^2.
pub fn gradient_variance_probe(
    problem: &dyn Objective,
    x: &DenseMatrix,
    trials: usize,
    batch: usize,
    seed: u64,
) -> Result<f64> {
    if trials == 0 || batch == 0 {
        return Err(Error::Parameter("trials and batch must be positive".into()));
    }
    let n = problem.num_samples();
    let full = problem.full_gradient(x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..trials {
        let indices: Vec<usize> = if batch >= n {
            (0..n).collect()
        } else {
            (0..batch).map(|_| rng.gen_range(0..n)).collect()
        };
        let mut g = problem.minibatch_gradient(x, &indices)?;
        g.axpy(-1.0, &full)?;
        let norm = g.frobenius_norm();
        total += norm * norm;
    }
    Ok(total / trials as f64)
}

#[derive(Debug, Serialize, Deserialize)]
struct SensingMeta {
    kind: String,
    d1: usize,
    d2: usize,
    n: usize,
    theta: f64,
    noise_std: f64,
    seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct PnnMeta {
    kind: String,
    d: usize,
    n: usize,
    theta: f64,
    seed: u64,
}

impl MatrixSensingProblem {
    /// Writes meta.json plus stacked binary matrices into `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let (d1, d2) = self.ground_truth.shape();
        let n = self.sensing_matrices.len();
        let meta = SensingMeta {
            kind: "matrix_sensing".into(),
            d1,
            d2,
            n,
            theta: self.theta,
            noise_std: self.noise_std,
            seed: self.seed,
        };
        std::fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
        self.ground_truth.save(&dir.join("ground_truth.afw"))?;
        // All sensing matrices stacked row-blocks into one (n*d1) x d2 matrix.
        let mut stacked = Vec::with_capacity(n * d1 * d2);
        for a in &self.sensing_matrices {
            stacked.extend_from_slice(a.entries());
        }
        DenseMatrix::from_vec(n * d1, d2, stacked)?.save(&dir.join("sensing_matrices.afw"))?;
        DenseMatrix::from_vec(n, 1, self.responses.clone())?.save(&dir.join("responses.afw"))?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let meta: SensingMeta =
            serde_json::from_slice(&std::fs::read(dir.join("meta.json"))?)?;
        if meta.kind != "matrix_sensing" {
            return Err(Error::Config(format!("expected matrix_sensing, found {}", meta.kind)));
        }
        let ground_truth = DenseMatrix::load(&dir.join("ground_truth.afw"))?;
        let stacked = DenseMatrix::load(&dir.join("sensing_matrices.afw"))?;
        let responses_mat = DenseMatrix::load(&dir.join("responses.afw"))?;
        if stacked.shape() != (meta.n * meta.d1, meta.d2) {
            return Err(Error::Config("sensing matrix file has wrong shape".into()));
        }
        let mut sensing_matrices = Vec::with_capacity(meta.n);
        for i in 0..meta.n {
            let start = i * meta.d1 * meta.d2;
            let end = start + meta.d1 * meta.d2;
            sensing_matrices.push(DenseMatrix::from_vec(
                meta.d1,
                meta.d2,
                stacked.entries()[start..end].to_vec(),
            )?);
        }
        Ok(Self {
            sensing_matrices,
            responses: responses_mat.entries().to_vec(),
            ground_truth,
            theta: meta.theta,
            noise_std: meta.noise_std,
            seed: meta.seed,
        })
    }
}

impl PnnProblem {
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let d = self.features[0].len();
        let n = self.features.len();
        let meta = PnnMeta { kind: "pnn".into(), d, n, theta: self.theta, seed: self.seed };
        std::fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
        let mut flat = Vec::with_capacity(n * d);
        for f in &self.features {
            flat.extend_from_slice(f);
        }
        DenseMatrix::from_vec(n, d, flat)?.save(&dir.join("features.afw"))?;
        DenseMatrix::from_vec(n, 1, self.labels.clone())?.save(&dir.join("labels.afw"))?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let meta: PnnMeta = serde_json::from_slice(&std::fs::read(dir.join("meta.json"))?)?;
        if meta.kind != "pnn" {
            return Err(Error::Config(format!("expected pnn, found {}", meta.kind)));
        }
        let features_mat = DenseMatrix::load(&dir.join("features.afw"))?;
        let labels_mat = DenseMatrix::load(&dir.join("labels.afw"))?;
        let features = (0..meta.n)
            .map(|i| features_mat.entries()[i * meta.d..(i + 1) * meta.d].to_vec())
            .collect();
        Ok(Self {
            features,
            labels: labels_mat.entries().to_vec(),
            theta: meta.theta,
            seed: meta.seed,
        })
    }
}
