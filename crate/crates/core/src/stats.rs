//! Second-moment statistics of a bimodal regression dataset.
//!
//! Rows such as `Σ_yx` and target weights are stored as column vectors.
//! Everything the linear dynamics needs is contained in [`CorrelationStats`].

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Modality, Result};

/// Relative eigenvalue floor: a symmetric matrix is positive definite when
/// `λ_min > PD_TOL · λ_max`.
pub const PD_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelMode {
    Regression,
    /// `y = sign(w*·x + ε)` with zero mapped to `+1`.
    Sign,
}

#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub dims_a: usize,
    pub dims_b: usize,
    pub sigma: DMatrix<f64>,
    pub w_star_a: DVector<f64>,
    pub w_star_b: DVector<f64>,
    pub noise_std: f64,
    pub label_mode: LabelMode,
}

impl DatasetSpec {
    pub fn new(
        sigma: DMatrix<f64>,
        w_star_a: DVector<f64>,
        w_star_b: DVector<f64>,
    ) -> Result<DatasetSpec> {
        let spec = DatasetSpec {
            dims_a: w_star_a.len(),
            dims_b: w_star_b.len(),
            sigma,
            w_star_a,
            w_star_b,
            noise_std: 0.0,
            label_mode: LabelMode::Regression,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Scalar modalities with `Σ = [σ_A², ρσ_Aσ_B; ρσ_Aσ_B, σ_B²]`.
    pub fn scalar(sigma_a: f64, sigma_b: f64, rho: f64, w_a: f64, w_b: f64) -> DatasetSpec {
        let c = rho * sigma_a * sigma_b;
        DatasetSpec {
            dims_a: 1,
            dims_b: 1,
            sigma: DMatrix::from_row_slice(2, 2, &[sigma_a * sigma_a, c, c, sigma_b * sigma_b]),
            w_star_a: DVector::from_element(1, w_a),
            w_star_b: DVector::from_element(1, w_b),
            noise_std: 0.0,
            label_mode: LabelMode::Regression,
        }
    }

    /// Uncorrelated modalities with `Σ_A = var_a·I`, `Σ_B = var_b·I` and constant target weights.
    pub fn isotropic(
        dims_a: usize,
        dims_b: usize,
        var_a: f64,
        var_b: f64,
        w_a: f64,
        w_b: f64,
    ) -> DatasetSpec {
        let d = dims_a + dims_b;
        let sigma = DMatrix::from_fn(d, d, |i, j| match (i == j, i < dims_a) {
            (true, true) => var_a,
            (true, false) => var_b,
            _ => 0.0,
        });
        DatasetSpec {
            dims_a,
            dims_b,
            sigma,
            w_star_a: DVector::from_element(dims_a, w_a),
            w_star_b: DVector::from_element(dims_b, w_b),
            noise_std: 0.0,
            label_mode: LabelMode::Regression,
        }
    }

    pub fn with_noise(mut self, noise_std: f64) -> DatasetSpec {
        self.noise_std = noise_std;
        self
    }

    pub fn with_labels(mut self, label_mode: LabelMode) -> DatasetSpec {
        self.label_mode = label_mode;
        self
    }

    pub fn dims(&self) -> usize {
        self.dims_a + self.dims_b
    }

    pub fn w_star(&self) -> DVector<f64> {
        concat(&self.w_star_a, &self.w_star_b)
    }

    /// Shape, symmetry and noise checks. Definiteness is checked by the consumers.
    pub fn validate(&self) -> Result<()> {
        if self.dims_a == 0 {
            return Err(Error::invalid("dims_A", "must be positive"));
        }
        if self.dims_b == 0 {
            return Err(Error::invalid("dims_B", "must be positive"));
        }
        let d = self.dims();
        if self.sigma.nrows() != d || self.sigma.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: self.sigma.nrows(),
            });
        }
        if self.w_star_a.len() != self.dims_a {
            return Err(Error::DimensionMismatch {
                expected: self.dims_a,
                got: self.w_star_a.len(),
            });
        }
        if self.w_star_b.len() != self.dims_b {
            return Err(Error::DimensionMismatch {
                expected: self.dims_b,
                got: self.w_star_b.len(),
            });
        }
        if self.sigma.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("sigma", "entries must be finite"));
        }
        let scale = self.sigma.amax().max(f64::MIN_POSITIVE);
        if (&self.sigma - self.sigma.transpose()).amax() > 1e-12 * scale {
            return Err(Error::invalid("sigma", "must be symmetric"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid("noise_std", "must be a non-negative real"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Analytic,
    Empirical(usize),
}

#[derive(Debug, Clone)]
pub struct CorrelationStats {
    pub sigma_a: DMatrix<f64>,
    pub sigma_b: DMatrix<f64>,
    pub sigma_ab: DMatrix<f64>,
    pub sigma_yx_a: DVector<f64>,
    pub sigma_yx_b: DVector<f64>,
    pub y_sq: f64,
    pub source: Source,
}

impl CorrelationStats {
    pub fn dims_a(&self) -> usize {
        self.sigma_yx_a.len()
    }

    pub fn dims_b(&self) -> usize {
        self.sigma_yx_b.len()
    }

    /// The assembled `(dims_A + dims_B)²` input correlation.
    pub fn sigma(&self) -> DMatrix<f64> {
        let (da, db) = (self.dims_a(), self.dims_b());
        let mut s = DMatrix::zeros(da + db, da + db);
        s.view_mut((0, 0), (da, da)).copy_from(&self.sigma_a);
        s.view_mut((da, da), (db, db)).copy_from(&self.sigma_b);
        s.view_mut((0, da), (da, db)).copy_from(&self.sigma_ab);
        s.view_mut((da, 0), (db, da)).copy_from(&self.sigma_ab.transpose());
        s
    }

    pub fn sigma_yx(&self) -> DVector<f64> {
        concat(&self.sigma_yx_a, &self.sigma_yx_b)
    }

    pub fn sigma_yx_of(&self, m: Modality) -> &DVector<f64> {
        match m {
            Modality::A => &self.sigma_yx_a,
            Modality::B => &self.sigma_yx_b,
        }
    }

    pub fn sigma_of(&self, m: Modality) -> &DMatrix<f64> {
        match m {
            Modality::A => &self.sigma_a,
            Modality::B => &self.sigma_b,
        }
    }

    /// The same statistics with the modality labels exchanged.
    pub fn swapped(&self) -> CorrelationStats {
        CorrelationStats {
            sigma_a: self.sigma_b.clone(),
            sigma_b: self.sigma_a.clone(),
            sigma_ab: self.sigma_ab.transpose(),
            sigma_yx_a: self.sigma_yx_b.clone(),
            sigma_yx_b: self.sigma_yx_a.clone(),
            y_sq: self.y_sq,
            source: self.source,
        }
    }

    /// The modality with the larger `‖Σ_yx‖`; ties go to A.
    pub fn stronger(&self) -> Modality {
        if self.sigma_yx_b.norm() > self.sigma_yx_a.norm() {
            Modality::B
        } else {
            Modality::A
        }
    }

    /// Global minimiser `Σ_yx Σ⁺` split into its A and B blocks.
    pub fn global_solution(&self) -> (DVector<f64>, DVector<f64>) {
        let w = pseudo_inverse_sym(&self.sigma()) * self.sigma_yx();
        let da = self.dims_a();
        (
            w.rows(0, da).into_owned(),
            w.rows(da, self.dims_b()).into_owned(),
        )
    }

    /// Unimodal solution `Σ_yx·Σ·⁻¹` of one modality.
    pub fn saddle_solution(&self, m: Modality) -> Result<DVector<f64>> {
        let name = match m {
            Modality::A => "sigma_A",
            Modality::B => "sigma_B",
        };
        solve_spd(self.sigma_of(m), self.sigma_yx_of(m), name)
    }
}

pub(crate) fn concat(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied())
}

fn eig_range(m: &DMatrix<f64>) -> (f64, f64) {
    let eig = SymmetricEigen::new(m.clone()).eigenvalues;
    (eig.min(), eig.max())
}

pub fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    let (min, max) = eig_range(m);
    max > 0.0 && min > PD_TOL * max
}

pub fn check_positive_definite(m: &DMatrix<f64>) -> Result<()> {
    let (min_eig, max_eig) = eig_range(m);
    if max_eig > 0.0 && min_eig > PD_TOL * max_eig {
        Ok(())
    } else {
        Err(Error::NonPositiveDefinite { min_eig, max_eig })
    }
}

/// Moore-Penrose inverse of a symmetric positive semidefinite matrix.
pub fn pseudo_inverse_sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let max = eig.eigenvalues.amax();
    let inv = eig
        .eigenvalues
        .map(|l| if l > PD_TOL * max { 1.0 / l } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose()
}

/// `m⁻¹ v` for symmetric positive definite `m`, or `SingularBlock(name)`.
pub(crate) fn solve_spd(m: &DMatrix<f64>, v: &DVector<f64>, name: &'static str) -> Result<DVector<f64>> {
    if !is_positive_definite(m) {
        return Err(Error::SingularBlock(name));
    }
    let chol = m.clone().cholesky().ok_or(Error::SingularBlock(name))?;
    Ok(chol.solve(v))
}

fn assemble_stats(spec: &DatasetSpec) -> CorrelationStats {
    let (da, db) = (spec.dims_a, spec.dims_b);
    let w = spec.w_star();
    let syx = &spec.sigma * &w;
    CorrelationStats {
        sigma_a: spec.sigma.view((0, 0), (da, da)).into_owned(),
        sigma_b: spec.sigma.view((da, da), (db, db)).into_owned(),
        sigma_ab: spec.sigma.view((0, da), (da, db)).into_owned(),
        sigma_yx_a: syx.rows(0, da).into_owned(),
        sigma_yx_b: syx.rows(da, db).into_owned(),
        y_sq: w.dot(&syx) + spec.noise_std * spec.noise_std,
        source: Source::Analytic,
    }
}

/// Analytic statistics of `y = w*·x + ε`, `x ~ N(0, Σ)`.
pub fn build_correlations(spec: &DatasetSpec) -> Result<CorrelationStats> {
    spec.validate()?;
    check_positive_definite(&spec.sigma)?;
    Ok(assemble_stats(spec))
}

/// Like [`build_correlations`] but accepts a singular (positive semidefinite) `Σ`,
/// e.g. perfectly collinear modalities.
pub fn build_correlations_allow_singular(spec: &DatasetSpec) -> Result<CorrelationStats> {
    spec.validate()?;
    let (min_eig, max_eig) = eig_range(&spec.sigma);
    if max_eig.is_nan() || max_eig <= 0.0 || min_eig < -PD_TOL * max_eig {
        return Err(Error::NonPositiveDefinite { min_eig, max_eig });
    }
    Ok(assemble_stats(spec))
}

#[derive(Debug, Clone)]
pub struct SampleSet {
    /// One sample per row, `dims_A + dims_B` columns (A first).
    pub inputs: DMatrix<f64>,
    pub targets: DVector<f64>,
    pub seed: u64,
    pub dims_a: usize,
    pub dims_b: usize,
    pub label_mode: LabelMode,
}

impl SampleSet {
    pub fn count(&self) -> usize {
        self.targets.len()
    }

    pub fn inputs_a(&self) -> DMatrix<f64> {
        self.inputs.columns(0, self.dims_a).into_owned()
    }

    pub fn inputs_b(&self) -> DMatrix<f64> {
        self.inputs.columns(self.dims_a, self.dims_b).into_owned()
    }
}

fn center_columns(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
}

/// Draws `P` i.i.d. samples. Row `i` depends only on `(spec, seed, i)` before centring.
pub fn sample_dataset(spec: &DatasetSpec, p: usize, seed: u64) -> Result<SampleSet> {
    spec.validate()?;
    if p == 0 {
        return Err(Error::invalid("P", "sample count must be at least 1"));
    }
    check_positive_definite(&spec.sigma)?;
    let chol = spec.sigma.clone().cholesky().ok_or_else(|| {
        let (min_eig, max_eig) = eig_range(&spec.sigma);
        Error::NonPositiveDefinite { min_eig, max_eig }
    })?;
    let l = chol.l();
    let d = spec.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = DMatrix::<f64>::zeros(p, d);
    let mut eps = DVector::<f64>::zeros(p);
    for i in 0..p {
        for j in 0..d {
            z[(i, j)] = StandardNormal.sample(&mut rng);
        }
        eps[i] = StandardNormal.sample(&mut rng);
    }
    let mut inputs = z * l.transpose();
    let w = spec.w_star();
    let noise = eps * spec.noise_std;
    let targets = match spec.label_mode {
        LabelMode::Regression => {
            let mut y = &inputs * &w + noise;
            if p >= 2 {
                center_columns(&mut inputs);
                let mean = y.mean();
                y.add_scalar_mut(-mean);
            }
            y
        }
        LabelMode::Sign => {
            if p >= 2 {
                center_columns(&mut inputs);
            }
            (&inputs * &w + noise).map(|v| if v >= 0.0 { 1.0 } else { -1.0 })
        }
    };
    Ok(SampleSet {
        inputs,
        targets,
        seed,
        dims_a: spec.dims_a,
        dims_b: spec.dims_b,
        label_mode: spec.label_mode,
    })
}

/// Empirical centred second moments (normalised by `P`) without a rank check.
pub fn estimate_correlations_unchecked(samples: &SampleSet) -> CorrelationStats {
    let p = samples.count();
    let mut x = samples.inputs.clone();
    center_columns(&mut x);
    let mut y = samples.targets.clone();
    if samples.label_mode == LabelMode::Regression {
        let mean = y.mean();
        y.add_scalar_mut(-mean);
    }
    let inv_p = 1.0 / p as f64;
    let sigma = x.tr_mul(&x) * inv_p;
    let syx = x.tr_mul(&y) * inv_p;
    let (da, db) = (samples.dims_a, samples.dims_b);
    CorrelationStats {
        sigma_a: sigma.view((0, 0), (da, da)).into_owned(),
        sigma_b: sigma.view((da, da), (db, db)).into_owned(),
        sigma_ab: sigma.view((0, da), (da, db)).into_owned(),
        sigma_yx_a: syx.rows(0, da).into_owned(),
        sigma_yx_b: syx.rows(da, db).into_owned(),
        y_sq: y.norm_squared() * inv_p,
        source: Source::Empirical(p),
    }
}

pub fn estimate_correlations(samples: &SampleSet) -> Result<CorrelationStats> {
    let stats = estimate_correlations_unchecked(samples);
    if !is_positive_definite(&stats.sigma()) {
        return Err(Error::RankDeficient {
            samples: samples.count(),
        });
    }
    Ok(stats)
}

/// `Σ̃_yxB = Σ_yxB − Σ_yxA Σ_A⁻¹ Σ_AB`, the part of B's correlation not explained by A.
pub fn effective_correlation_b(stats: &CorrelationStats) -> Result<DVector<f64>> {
    let m_a = solve_spd(&stats.sigma_a, &stats.sigma_yx_a, "sigma_A")?;
    Ok(&stats.sigma_yx_b - stats.sigma_ab.tr_mul(&m_a))
}
