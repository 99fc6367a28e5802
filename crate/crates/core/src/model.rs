//! Matrix-variate recursive linear filter for streaming factorisation.
//!
//! The dictionary `C` (m×r) carries a Gaussian posterior whose full
//! covariance over `vec(C)` is `V ⊗ I_m`. Because the observation operator
//! for one column is `xᵀ ⊗ I_m`, the whole filter collapses onto the r×r
//! factor `V`:
//!
//! ```text
//! x   = (CᵀC)⁻¹ Cᵀ y
//! C  ← C + (y − C x) (V x)ᵀ / (xᵀ V x + λ)
//! V  ← V − (V x)(V x)ᵀ / (xᵀ V x + λ)
//! ```
//!
//! An optional process-noise term `Q_V` inflates `V` before each update,
//! which turns the recursion into a Kalman filter with a drifting dictionary.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::MaskedDataset;
use crate::error::{Error, Result};
use crate::linalg::{matvec, Cholesky, DenseMatrix, DenseVector, SymmetricEigen};

/// Tolerance for the symmetry of `V` and `Q_V`.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Negative eigenvalues of `V` below `-PSD_ABORT_REL · trace(V)` are reported
/// as errors; shallower ones are clipped to zero.
pub const PSD_ABORT_REL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub rank: usize,
    /// Observation-noise scale λ.
    pub lambda: f64,
    /// `V₀ = v0_scale · I_r`.
    pub v0_scale: f64,
    /// Relative ridge: `ridge · trace(G)/r` is added to the Gram diagonal `G`.
    pub ridge: f64,
    /// `Q_V`; `None` gives the plain recursive filter.
    pub process_noise: Option<DenseMatrix>,
    pub init_seed: u64,
    /// Standard deviation of the entries of `C₀`; `None` means `1/√r`.
    pub init_scale: Option<f64>,
    /// Hold `V` at its initial value. With `V₀ = I` this is Broyden's rule.
    pub freeze_covariance: bool,
}

impl ModelConfig {
    pub fn new(rank: usize) -> Self {
        Self {
            rank,
            lambda: 2.0,
            v0_scale: 1.0,
            ridge: 1e-8,
            process_noise: None,
            init_seed: 0,
            init_scale: None,
            freeze_covariance: false,
        }
    }

    pub fn init_scale(&self) -> f64 {
        self.init_scale
            .unwrap_or_else(|| 1.0 / (self.rank.max(1) as f64).sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Contract("rank must be at least 1".into()));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Contract(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.v0_scale > 0.0 && self.v0_scale.is_finite()) {
            return Err(Error::Contract(format!(
                "v0_scale must be positive, got {}",
                self.v0_scale
            )));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(Error::Contract(format!(
                "ridge must be nonnegative, got {}",
                self.ridge
            )));
        }
        if let Some(s) = self.init_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Contract(format!("init_scale must be positive, got {s}")));
            }
        }
        if let Some(q) = &self.process_noise {
            check_psd_input(q, self.rank, "process noise Q_V")?;
        }
        Ok(())
    }
}

fn check_psd_input(q: &DenseMatrix, r: usize, what: &str) -> Result<()> {
    if q.shape() != (r, r) {
        return Err(Error::dims(
            "process noise",
            format!("{r}x{r}"),
            format!("{}x{}", q.rows(), q.cols()),
        ));
    }
    if !q.is_symmetric(SYMMETRY_TOL) {
        return Err(Error::Contract(format!("{what} must be symmetric")));
    }
    let min = SymmetricEigen::new(q)?.min();
    if min < -SYMMETRY_TOL * q.max_abs().max(f64::MIN_POSITIVE) {
        return Err(Error::Contract(format!(
            "{what} must be positive semidefinite (min eigenvalue {min:e})"
        )));
    }
    Ok(())
}

/// One data column with its optional observation mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    y: DenseVector,
    mask: Option<DenseVector>,
    source_index: usize,
}

impl Observation {
    pub fn new(y: DenseVector, mask: Option<DenseVector>, source_index: usize) -> Result<Self> {
        if let Some(mk) = &mask {
            if mk.len() != y.len() {
                return Err(Error::dims("Observation::new", y.len(), mk.len()));
            }
            if mk.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Contract("mask entries must be exactly 0 or 1".into()));
            }
        }
        Ok(Self::from_parts_unchecked(y, mask, source_index))
    }

    pub fn unmasked(y: DenseVector) -> Self {
        Self::from_parts_unchecked(y, None, 0)
    }

    pub(crate) fn from_parts_unchecked(y: DenseVector, mask: Option<DenseVector>, source_index: usize) -> Self {
        Self { y, mask, source_index }
    }

    pub fn y(&self) -> &DenseVector {
        &self.y
    }

    pub fn mask(&self) -> Option<&DenseVector> {
        self.mask.as_ref()
    }

    pub fn source_index(&self) -> usize {
        self.source_index
    }
}

/// Solves `(AᵀA + ρI) x = Aᵀ b` with `ρ = ridge · trace(AᵀA)/r`.
fn solve_normal_equations(a: &DenseMatrix, b: &DenseVector, ridge: f64) -> Result<DenseVector> {
    let mut gram = a.tr_matmul(a)?;
    let rhs = a.tr_matvec(b)?;
    let r = gram.rows();
    if ridge > 0.0 && r > 0 {
        let shift = ridge * gram.trace() / r as f64;
        for i in 0..r {
            gram.set(i, i, gram.get(i, i) + shift);
        }
    }
    Cholesky::factor(&gram)?.solve(&rhs)
}

/// Least-squares coefficients of `y` against dictionary `c`.
pub fn estimate_coefficients(c: &DenseMatrix, y: &DenseVector, ridge: f64) -> Result<DenseVector> {
    if y.len() != c.rows() {
        return Err(Error::dims("estimate_coefficients", c.rows(), y.len()));
    }
    solve_normal_equations(c, y, ridge)
}

/// Least-squares coefficients restricted to the observed rows: the mask is
/// replicated across the r dictionary columns and applied to both sides.
pub fn estimate_coefficients_masked(c: &DenseMatrix, obs: &Observation, ridge: f64) -> Result<DenseVector> {
    let Some(mask) = obs.mask() else {
        return estimate_coefficients(c, obs.y(), ridge);
    };
    if obs.y().len() != c.rows() {
        return Err(Error::dims("estimate_coefficients_masked", c.rows(), obs.y().len()));
    }
    let masked_c = DenseMatrix::from_fn(c.rows(), c.cols(), |i, j| mask[i] * c.get(i, j));
    let masked_y = obs.y().hadamard(mask)?;
    solve_normal_equations(&masked_c, &masked_y, ridge)
}

/// `m ⊙ (y − C x)`, or the plain residual when no mask is present.
pub fn masked_residual(c: &DenseMatrix, obs: &Observation, x: &DenseVector) -> Result<DenseVector> {
    let r = obs.y().sub(&matvec(c, x)?)?;
    match obs.mask() {
        Some(mask) => r.hadamard(mask),
        None => Ok(r),
    }
}

/// Current posterior summary: dictionary mean `C` and covariance factor `V`.
#[derive(Debug, Clone, PartialEq)]
pub struct DictionaryState {
    c: DenseMatrix,
    v: DenseMatrix,
    lambda: f64,
    step: u64,
}

impl DictionaryState {
    /// Random `C₀` with i.i.d. `N(0, init_scale²)` entries, `V₀ = v0_scale · I`.
    pub fn init(cfg: &ModelConfig, m: usize) -> Result<Self> {
        cfg.validate()?;
        if m == 0 {
            return Err(Error::Contract("data dimension m must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let scale = cfg.init_scale();
        let c = DenseMatrix::from_fn(m, cfg.rank, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            scale * z
        });
        let v = DenseMatrix::identity(cfg.rank).scale(cfg.v0_scale);
        Ok(Self {
            c,
            v,
            lambda: cfg.lambda,
            step: 0,
        })
    }

    pub fn from_parts(c: DenseMatrix, v: DenseMatrix, lambda: f64) -> Result<Self> {
        if v.shape() != (c.cols(), c.cols()) {
            return Err(Error::dims(
                "DictionaryState::from_parts",
                format!("{0}x{0} covariance factor", c.cols()),
                format!("{}x{}", v.rows(), v.cols()),
            ));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::Contract(format!("lambda must be positive, got {lambda}")));
        }
        if !c.is_finite() || !v.is_finite() {
            return Err(Error::NonFinite("dictionary state"));
        }
        check_psd_input(&v, c.cols(), "covariance factor V")?;
        Ok(Self { c, v, lambda, step: 0 })
    }

    pub fn dictionary(&self) -> &DenseMatrix {
        &self.c
    }

    pub fn covariance_factor(&self) -> &DenseMatrix {
        &self.v
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn m(&self) -> usize {
        self.c.rows()
    }

    pub fn rank(&self) -> usize {
        self.c.cols()
    }

    pub fn estimate_coefficients(&self, y: &DenseVector, ridge: f64) -> Result<DenseVector> {
        estimate_coefficients(&self.c, y, ridge)
    }

    pub fn estimate_coefficients_masked(&self, obs: &Observation, ridge: f64) -> Result<DenseVector> {
        estimate_coefficients_masked(&self.c, obs, ridge)
    }

    /// `(V x, xᵀ V x + λ)`.
    fn gain_terms(&self, x: &DenseVector) -> Result<(DenseVector, f64)> {
        if x.len() != self.rank() {
            return Err(Error::dims("filter update", self.rank(), x.len()));
        }
        let vx = matvec(&self.v, x)?;
        let denom = x.dot(&vx)? + self.lambda;
        Ok((vx, denom))
    }

    /// Posterior mean of the dictionary after absorbing `residual = y − C x`.
    pub fn mean_update(&self, x: &DenseVector, residual: &DenseVector) -> Result<DenseMatrix> {
        if residual.len() != self.m() {
            return Err(Error::dims("mean_update", self.m(), residual.len()));
        }
        let (vx, denom) = self.gain_terms(x)?;
        let gain: Vec<f64> = vx.iter().map(|v| v / denom).collect();
        let mut c = self.c.clone();
        for (i, &e) in residual.iter().enumerate() {
            if e == 0.0 {
                continue;
            }
            for (j, &g) in gain.iter().enumerate() {
                c.set(i, j, c.get(i, j) + e * g);
            }
        }
        Ok(c)
    }

    /// Rank-one downdate of the covariance factor, symmetrised and kept PSD.
    pub fn covariance_update(&self, x: &DenseVector) -> Result<DenseMatrix> {
        let (vx, denom) = self.gain_terms(x)?;
        let r = self.rank();
        let v = DenseMatrix::from_fn(r, r, |i, j| self.v.get(i, j) - vx[i] * vx[j] / denom);
        psd_guard(v.symmetrize())
    }

    /// Kalman time update `V ← V + Q_V`; the dictionary mean is unchanged.
    pub fn predict(&self, qv: &DenseMatrix) -> Result<Self> {
        check_psd_input(qv, self.rank(), "process noise Q_V")?;
        Ok(Self {
            v: self.v.add(qv)?.symmetrize(),
            ..self.clone()
        })
    }

    /// One filter step. On error `self` is untouched and the caller keeps it.
    pub fn step(&self, obs: &Observation, cfg: &ModelConfig) -> Result<StepOutcome> {
        if obs.y().len() != self.m() {
            return Err(Error::dims("step", self.m(), obs.y().len()));
        }
        let prior = match &cfg.process_noise {
            Some(q) => self.predict(q)?,
            None => self.clone(),
        };
        let x = prior.estimate_coefficients_masked(obs, cfg.ridge)?;
        let residual = masked_residual(&prior.c, obs, &x)?;
        let c = prior.mean_update(&x, &residual)?;
        let v = if cfg.freeze_covariance {
            prior.v.clone()
        } else {
            prior.covariance_update(&x)?
        };
        Ok(StepOutcome {
            residual_norm: residual.norm(),
            coefficients: x,
            state: Self {
                c,
                v,
                lambda: self.lambda,
                step: self.step + 1,
            },
        })
    }

    /// Coefficients for every column (masked where the dataset has gaps) and
    /// the full `C x` reconstruction.
    pub fn reconstruct(&self, data: &MaskedDataset, ridge: f64) -> Result<Reconstruction> {
        reconstruct_with(&self.c, data, ridge)
    }
}

/// Clips small negative eigenvalues; rejects large ones.
fn psd_guard(v: DenseMatrix) -> Result<DenseMatrix> {
    if Cholesky::factor(&v).is_ok() {
        return Ok(v);
    }
    let eig = SymmetricEigen::new(&v)?;
    let min = eig.min();
    if min >= 0.0 {
        return Ok(v);
    }
    let trace = v.trace();
    if min < -PSD_ABORT_REL * trace.abs() {
        return Err(Error::NotPsd { min_eig: min, trace });
    }
    log::debug!("clipping covariance eigenvalue {min:e} to zero");
    Ok(eig.reassemble(|l| l.max(0.0)).symmetrize())
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: DictionaryState,
    pub coefficients: DenseVector,
    /// Norm of the (masked) residual before the update.
    pub residual_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub index: usize,
    pub residual_norm: Option<f64>,
    pub error: Option<String>,
}

/// Per-step log of a pass over the data.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PassTrace {
    pub records: Vec<StepRecord>,
}

impl PassTrace {
    pub fn push_ok(&mut self, index: usize, residual_norm: f64) {
        self.records.push(StepRecord {
            index,
            residual_norm: Some(residual_norm),
            error: None,
        });
    }

    pub fn push_err(&mut self, index: usize, err: &Error) {
        log::warn!("skipping column {index}: {err}");
        self.records.push(StepRecord {
            index,
            residual_norm: None,
            error: Some(err.to_string()),
        });
    }

    pub fn skipped(&self) -> usize {
        self.records.iter().filter(|r| r.error.is_some()).count()
    }

    /// Mean pre-update residual norm over successful steps.
    pub fn mean_residual(&self) -> f64 {
        let (sum, count) = self
            .records
            .iter()
            .filter_map(|r| r.residual_norm)
            .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }
}

pub(crate) fn check_order(order: &[usize], n: usize) -> Result<()> {
    match order.iter().find(|&&i| i >= n) {
        Some(i) => Err(Error::Contract(format!("column index {i} out of range 0..{n}"))),
        None => Ok(()),
    }
}

/// Runs [`DictionaryState::step`] over `order`. Columns whose coefficient
/// solve fails are skipped and logged in the trace.
pub fn run_pass(
    state: DictionaryState,
    data: &MaskedDataset,
    cfg: &ModelConfig,
    order: &[usize],
) -> Result<(DictionaryState, PassTrace)> {
    if data.m() != state.m() {
        return Err(Error::dims("run_pass", state.m(), data.m()));
    }
    check_order(order, data.n())?;
    let mut state = state;
    let mut trace = PassTrace::default();
    for &j in order {
        let obs = data.observation(j);
        match state.step(&obs, cfg) {
            Ok(out) => {
                trace.push_ok(j, out.residual_norm);
                state = out.state;
            }
            Err(e @ Error::SingularSystem { .. }) => trace.push_err(j, &e),
            Err(e) => return Err(e),
        }
    }
    Ok((state, trace))
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub matrix: DenseMatrix,
    /// Columns whose coefficients could not be estimated; these are zero.
    pub flagged: Vec<usize>,
}

pub fn reconstruct_with(c: &DenseMatrix, data: &MaskedDataset, ridge: f64) -> Result<Reconstruction> {
    if data.m() != c.rows() {
        return Err(Error::dims("reconstruct", c.rows(), data.m()));
    }
    let mut matrix = DenseMatrix::zeros(data.m(), data.n());
    let mut flagged = Vec::new();
    for j in 0..data.n() {
        let obs = data.observation(j);
        match estimate_coefficients_masked(c, &obs, ridge) {
            Ok(x) => matrix.set_column(j, &matvec(c, &x)?)?,
            Err(Error::SingularSystem { .. }) => flagged.push(j),
            Err(e) => return Err(e),
        }
    }
    Ok(Reconstruction { matrix, flagged })
}
