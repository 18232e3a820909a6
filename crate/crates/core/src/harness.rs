//! Scripted experiments: parameter sweeps comparing simulation with theory,
//! the finite-sample generalization runs, and the XOR heterogeneous-task demo.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::dynamics::{
    detect_phase_times, plateau_sample, run_training, Drive, Driver, LossKind,
    TrainConfig, Trajectory,
};
use crate::error::{Error, Modality, Result};
use crate::network::{init_network, Activation, FusionConfig, InitMode};
use crate::stats::{
    build_correlations, build_correlations_allow_singular, estimate_correlations_unchecked,
    sample_dataset, CorrelationStats, DatasetSpec, LabelMode, SampleSet,
};
use crate::theory::{self, DepthSpec, RatioValue};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Rho,
    /// `σ_A/σ_B` with `σ_B` held fixed.
    VarianceRatio,
    /// The initial scale `u0`.
    InitScale,
    FusionDepth,
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Rho => "rho",
            SweepAxis::VarianceRatio => "variance_ratio",
            SweepAxis::InitScale => "init_scale",
            SweepAxis::FusionDepth => "fusion_depth",
        }
    }

    pub fn parse(s: &str) -> Option<SweepAxis> {
        match s {
            "rho" => Some(SweepAxis::Rho),
            "variance_ratio" => Some(SweepAxis::VarianceRatio),
            "init_scale" => Some(SweepAxis::InitScale),
            "fusion_depth" => Some(SweepAxis::FusionDepth),
            _ => None,
        }
    }
}

/// Scalar two-modality data, `Σ = [σ_A², ρσ_Aσ_B; ρσ_Aσ_B, σ_B²]`, `y = w_A x_A + w_B x_B + ε`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarData {
    pub sigma_a: f64,
    pub sigma_b: f64,
    pub rho: f64,
    pub w_a: f64,
    pub w_b: f64,
    pub noise_std: f64,
}

impl ScalarData {
    pub fn new(sigma_a: f64, sigma_b: f64, rho: f64, w_a: f64, w_b: f64) -> ScalarData {
        ScalarData {
            sigma_a,
            sigma_b,
            rho,
            w_a,
            w_b,
            noise_std: 0.0,
        }
    }

    pub fn spec(&self) -> DatasetSpec {
        DatasetSpec::scalar(self.sigma_a, self.sigma_b, self.rho, self.w_a, self.w_b)
            .with_noise(self.noise_std)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub grid: Vec<f64>,
    pub data: ScalarData,
    pub fusion: FusionConfig,
    pub train: TrainConfig,
    /// Sample count for the sample drive (ignored for the correlation drive).
    pub samples: usize,
    pub seeds: Vec<u64>,
    /// Fraction of the slower modality's target at which the plateau is read.
    pub plateau_frac: f64,
}

impl SweepSpec {
    pub fn new(axis: SweepAxis, grid: Vec<f64>, data: ScalarData, fusion: FusionConfig, train: TrainConfig) -> SweepSpec {
        SweepSpec {
            axis,
            grid,
            data,
            fusion,
            train,
            samples: 8192,
            seeds: (0..5).collect(),
            plateau_frac: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::invalid("sweep.grid", "must not be empty"));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("sweep.seeds", "must not be empty"));
        }
        for &v in &self.grid {
            let ok = match self.axis {
                SweepAxis::Rho => v.abs() <= 1.0,
                SweepAxis::VarianceRatio => v > 0.0 && v.is_finite(),
                SweepAxis::InitScale => v > 0.0 && v < 1.0,
                SweepAxis::FusionDepth => v.fract() == 0.0 && v >= 1.0 && v <= self.fusion.l as f64,
            };
            if !ok {
                return Err(Error::invalid(
                    "sweep.grid",
                    format!("{v} is outside the range of axis {}", self.axis.name()),
                ));
            }
        }
        if self.train.drive == Drive::Samples && self.samples == 0 {
            return Err(Error::invalid("training.samples", "must be at least 1"));
        }
        self.fusion.validate()?;
        self.train.validate()
    }

    /// Dataset and network for one grid value.
    pub fn point(&self, value: f64) -> (DatasetSpec, FusionConfig) {
        let mut data = self.data;
        let mut fusion = self.fusion.clone();
        match self.axis {
            SweepAxis::Rho => data.rho = value,
            SweepAxis::VarianceRatio => data.sigma_a = value * data.sigma_b,
            SweepAxis::InitScale => fusion.init = fusion.init.with_u0(value, fusion.width),
            SweepAxis::FusionDepth => fusion.l_f = value as usize,
        }
        let labels = match self.train.loss_kind {
            LossKind::Mse => LabelMode::Regression,
            LossKind::Logistic => LabelMode::Sign,
        };
        (data.spec().with_labels(labels), fusion)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub axis_value: f64,
    pub seed: u64,
    pub predicted_ratio: Option<RatioValue>,
    /// `t_second / t_first`; `+∞` when the second modality never crossed.
    pub simulated_ratio: Option<f64>,
    pub t_first: Option<f64>,
    pub t_second: Option<f64>,
    pub first_modality: Option<Modality>,
    pub misattribution_sim: Option<f64>,
    pub misattribution_pred: Option<f64>,
    /// `ok`, `no_crossing`, or an error description.
    pub status: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummary {
    pub axis_value: f64,
    pub runs: usize,
    pub sim_ratio_mean: f64,
    pub sim_ratio_std: f64,
    pub pred_ratio: f64,
    pub mis_sim_mean: f64,
    pub mis_sim_std: f64,
    pub mis_pred: f64,
}

fn first_entry(v: &DVector<f64>) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v.norm()
    }
}

fn predicted(stats: &CorrelationStats, fusion: &FusionConfig) -> Result<RatioValue> {
    let depth = DepthSpec::new(fusion.l, fusion.l_f);
    theory::ratio_deep(stats, &depth, fusion.init.u0(fusion.width))
}

fn sweep_row(spec: &SweepSpec, value: f64, seed: u64) -> SweepRow {
    let mut row = SweepRow {
        axis_value: value,
        seed,
        predicted_ratio: None,
        simulated_ratio: None,
        t_first: None,
        t_second: None,
        first_modality: None,
        misattribution_sim: None,
        misattribution_pred: None,
        status: "ok".into(),
    };
    if let Err(e) = fill_row(spec, value, seed, &mut row) {
        row.status = format!("error: {e}");
    }
    row
}

fn fill_row(spec: &SweepSpec, value: f64, seed: u64, row: &mut SweepRow) -> Result<()> {
    let (data, fusion) = spec.point(value);
    let population = build_correlations_allow_singular(&data)?;
    row.predicted_ratio = predicted(&population, &fusion).ok();
    row.misattribution_pred = theory::misattribution(&population).ok().map(|m| first_entry(&m));

    let mut net = init_network(&fusion.clone().seed(seed))?;
    let samples;
    let (driver, timing) = match spec.train.drive {
        Drive::Correlation => (Driver::Stats(&population), population.clone()),
        Drive::Samples => {
            samples = sample_dataset(&data, spec.samples, seed)?;
            let empirical = estimate_correlations_unchecked(&samples);
            (Driver::Samples(&samples), empirical)
        }
    };
    let out = run_training(&mut net, driver, &spec.train, None);
    if let Some(e) = out.error {
        return Err(e);
    }
    let traj = out.trajectory;
    let phase = detect_phase_times(&traj, &timing)?;
    row.first_modality = Some(phase.first_modality);
    row.t_first = Some(phase.t_first);
    row.t_second = phase.t_second;
    row.simulated_ratio = Some(match phase.t_second {
        Some(t) => t / phase.t_first,
        None => {
            row.status = "no_crossing".into();
            f64::INFINITY
        }
    });
    if let Some(s) = plateau_sample(&traj, &timing, spec.plateau_frac)? {
        let (global_a, _) = timing.global_solution();
        row.misattribution_sim = Some(first_entry(&(&s.w_tot.w_tot_a - global_a)));
    }
    Ok(())
}

/// Every grid point × seed, evaluated in parallel; row order follows `grid` then `seeds`.
pub fn run_sweep(spec: &SweepSpec) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    let items: Vec<(f64, u64)> = spec
        .grid
        .iter()
        .flat_map(|&v| spec.seeds.iter().map(move |&s| (v, s)))
        .collect();
    Ok(items
        .par_iter()
        .map(|&(v, s)| sweep_row(spec, v, s))
        .collect())
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if !mean.is_finite() {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean ± population standard deviation over seeds, one entry per grid value.
pub fn summarize(rows: &[SweepRow]) -> Vec<SweepSummary> {
    let mut values: Vec<f64> = Vec::new();
    for r in rows {
        if !values.contains(&r.axis_value) {
            values.push(r.axis_value);
        }
    }
    values
        .into_iter()
        .map(|v| {
            let group: Vec<&SweepRow> = rows.iter().filter(|r| r.axis_value == v).collect();
            let sims: Vec<f64> = group.iter().filter_map(|r| r.simulated_ratio).collect();
            let mis: Vec<f64> = group.iter().filter_map(|r| r.misattribution_sim).collect();
            let (sim_ratio_mean, sim_ratio_std) = mean_std(&sims);
            let (mis_sim_mean, mis_sim_std) = mean_std(&mis);
            let pred_ratio = group
                .iter()
                .find_map(|r| r.predicted_ratio)
                .map_or(f64::NAN, |p| p.value());
            let mis_pred = group.iter().find_map(|r| r.misattribution_pred).unwrap_or(f64::NAN);
            SweepSummary {
                axis_value: v,
                runs: sims.len(),
                sim_ratio_mean,
                sim_ratio_std,
                pred_ratio,
                mis_sim_mean,
                mis_sim_std,
                mis_pred,
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct GenExpSpec {
    pub data: DatasetSpec,
    pub p_train: usize,
    pub fusion: FusionConfig,
    pub train: TrainConfig,
    /// Truncate the reported run at the generalization optimum.
    pub early_stop: bool,
}

impl GenExpSpec {
    /// 50 + 50 dimensions, `Σ_A = I`, `Σ_B = 3I`, `w* = 1/10`, noise 0.5, two-layer net.
    pub fn standard(p_train: usize, l_f: usize, seed: u64) -> GenExpSpec {
        let data = DatasetSpec::isotropic(50, 50, 1.0, 3.0, 0.1, 0.1).with_noise(0.5);
        let fusion = FusionConfig::new(2, l_f, 50, 50)
            .init(InitMode::gaussian(1e-9f64.sqrt()))
            .seed(seed);
        GenExpSpec {
            data,
            p_train,
            fusion,
            train: TrainConfig {
                max_steps: 6000,
                record_stride: 10,
                ..TrainConfig::default()
            },
            early_stop: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p_train == 0 {
            return Err(Error::invalid("genexp.P_train", "must be at least 1"));
        }
        self.data.validate()?;
        self.fusion.validate()?;
        self.train.validate()
    }
}

#[derive(Debug, Clone)]
pub struct GenExpResult {
    pub trajectory: Trajectory,
    pub t_opt_stop: f64,
    pub gen_at_opt: f64,
    pub final_gen: f64,
    pub first_modality: Modality,
    pub t_1: Option<f64>,
    pub t_2: Option<f64>,
    /// The second-learned modality is still below 10% of its global-solution norm at the optimum.
    pub unimodal_at_opt: bool,
    /// Best population risk of a two-layer net trained on the stronger modality alone.
    pub unimodal_baseline: f64,
    /// Largest `|train loss − gen_error|` over the run.
    pub max_train_gen_gap: f64,
    pub initial_gen: f64,
}

fn min_gen(traj: &Trajectory) -> Option<(usize, f64)> {
    traj.samples
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.gen_error.map(|g| (i, g)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
}

pub fn run_generalization(spec: &GenExpSpec) -> Result<GenExpResult> {
    spec.validate()?;
    if !matches!(spec.fusion.activation, Activation::Linear) {
        return Err(Error::NotLinear);
    }
    let population = build_correlations(&spec.data)?;
    let samples = sample_dataset(&spec.data, spec.p_train, spec.fusion.seed)?;
    let empirical = estimate_correlations_unchecked(&samples);
    let train = TrainConfig {
        drive: Drive::Correlation,
        loss_kind: LossKind::Mse,
        ..spec.train.clone()
    };

    let mut net = init_network(&spec.fusion)?;
    let out = run_training(&mut net, Driver::Stats(&empirical), &train, Some(&population));
    if let Some(e) = out.error {
        return Err(e);
    }
    let mut trajectory = out.trajectory;

    let stronger = population.stronger();
    let mut uni_net = init_network(&FusionConfig {
        l: 2,
        l_f: 2,
        ..spec.fusion.clone()
    })?;
    uni_net.zero_branch(stronger.other());
    let uni = run_training(&mut uni_net, Driver::Stats(&empirical), &train, Some(&population));
    if let Some(e) = uni.error {
        return Err(e);
    }
    let unimodal_baseline = min_gen(&uni.trajectory).map_or(f64::NAN, |(_, g)| g);

    let (opt_idx, gen_at_opt) = min_gen(&trajectory).ok_or_else(|| Error::invalid("training.max_steps", "empty run"))?;
    let phase = detect_phase_times(&trajectory, &population).ok();
    let first = phase.map_or(stronger, |p| p.first_modality);
    let second = first.other();
    let (ga, gb) = population.global_solution();
    let global_second = match second {
        Modality::A => ga.norm(),
        Modality::B => gb.norm(),
    };
    let at_opt = &trajectory.samples[opt_idx];
    let unimodal_at_opt = at_opt.norm_of(second) < 0.1 * global_second;
    let t_opt_stop = at_opt.time;
    let initial_gen = trajectory.samples[0].gen_error.unwrap_or(f64::NAN);
    let final_gen = trajectory.last().and_then(|s| s.gen_error).unwrap_or(f64::NAN);
    let max_train_gen_gap = trajectory
        .samples
        .iter()
        .filter_map(|s| s.gen_error.map(|g| (g - s.loss).abs()))
        .fold(0.0, f64::max);
    if spec.early_stop {
        trajectory.samples.truncate(opt_idx + 1);
    }
    Ok(GenExpResult {
        trajectory,
        t_opt_stop,
        gen_at_opt,
        final_gen,
        first_modality: first,
        t_1: phase.map(|p| p.t_first),
        t_2: phase.and_then(|p| p.t_second),
        unimodal_at_opt,
        unimodal_baseline,
        max_train_gen_gap,
        initial_gen,
    })
}

/// Late-fusion overfitting: some record strictly between `t_1` and `t_2`
/// has a higher generalization error than the record at `t_1`.
pub fn rises_during_plateau(res: &GenExpResult) -> bool {
    let (Some(t1), Some(t2)) = (res.t_1, res.t_2) else {
        return false;
    };
    let samples = &res.trajectory.samples;
    let Some(at_t1) = samples.iter().find(|s| s.time >= t1).and_then(|s| s.gen_error) else {
        return false;
    };
    samples
        .iter()
        .filter(|s| s.time > t1 && s.time < t2)
        .any(|s| s.gen_error.is_some_and(|g| g > at_t1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionKind {
    Early,
    Late,
}

impl FusionKind {
    pub fn parse(s: &str) -> Option<FusionKind> {
        match s {
            "early" => Some(FusionKind::Early),
            "late" => Some(FusionKind::Late),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct XorSpec {
    /// Variance of the linear modality.
    pub sigma_a: f64,
    pub fusion: FusionKind,
    pub width: usize,
    pub samples: usize,
    pub init_std: f64,
    pub train: TrainConfig,
    pub seed: u64,
}

impl XorSpec {
    pub fn new(sigma_a: f64, fusion: FusionKind, seed: u64) -> XorSpec {
        XorSpec {
            sigma_a,
            fusion,
            width: 100,
            samples: 1024,
            init_std: 0.01,
            train: TrainConfig {
                drive: Drive::Samples,
                max_steps: 20_000,
                record_stride: 100,
                stop_loss: 1e-4,
                record_first_layer: true,
                ..TrainConfig::default()
            },
            seed,
        }
    }

    pub fn network(&self) -> FusionConfig {
        let l_f = match self.fusion {
            FusionKind::Early => 1,
            FusionKind::Late => 2,
        };
        FusionConfig::new(2, l_f, 1, 2)
            .width(self.width)
            .activation(Activation::Relu)
            .init(InitMode::gaussian(self.init_std))
            .seed(self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_a > 0.0 && self.sigma_a.is_finite()) {
            return Err(Error::invalid("xor.sigma_A", "must be a positive real"));
        }
        if self.samples == 0 {
            return Err(Error::invalid("xor.samples", "must be at least 1"));
        }
        self.network().validate()?;
        self.train.validate()
    }
}

/// `y = x_A + XOR(x_B)` with `x_A ~ N(0, σ_A)` and `x_B` uniform on `{±1}²`,
/// where `XOR(x_B) = −x_B1·x_B2` is `+1` when the signs differ.
pub fn xor_dataset(sigma_a: f64, p: usize, seed: u64) -> SampleSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma_a.sqrt()).expect("finite standard deviation");
    let mut inputs = DMatrix::zeros(p, 3);
    let mut targets = DVector::zeros(p);
    for i in 0..p {
        let xa = normal.sample(&mut rng);
        let b1 = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let b2 = if rng.random::<bool>() { 1.0 } else { -1.0 };
        inputs[(i, 0)] = xa;
        inputs[(i, 1)] = b1;
        inputs[(i, 2)] = b2;
        targets[i] = xa - b1 * b2;
    }
    SampleSet {
        inputs,
        targets,
        seed,
        dims_a: 1,
        dims_b: 2,
        label_mode: LabelMode::Regression,
    }
}

#[derive(Debug, Clone)]
pub struct XorResult {
    pub final_loss: f64,
    pub trajectory: Trajectory,
    pub first_layer_a: DMatrix<f64>,
    pub first_layer_b: DMatrix<f64>,
}

pub fn run_xor_demo(spec: &XorSpec) -> Result<XorResult> {
    spec.validate()?;
    let samples = xor_dataset(spec.sigma_a, spec.samples, spec.seed);
    let mut net = init_network(&spec.network())?;
    let train = TrainConfig {
        drive: Drive::Samples,
        loss_kind: LossKind::Mse,
        ..spec.train.clone()
    };
    let out = run_training(&mut net, Driver::Samples(&samples), &train, None);
    if let Some(e) = out.error {
        return Err(e);
    }
    let final_loss = out.trajectory.last().map_or(f64::NAN, |s| s.loss);
    Ok(XorResult {
        final_loss,
        trajectory: out.trajectory,
        first_layer_a: net.pre_a[0].clone(),
        first_layer_b: net.pre_b[0].clone(),
    })
}
