//! Restoration experiments: build a masked dataset, run one of the
//! factorisation algorithms over it, and score the full reconstruction
//! against the clean data.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use crate::baselines::{sgd_run, Nmf, NmfConfig, SgdConfig, SgdState, StepSize};
use crate::data::{
    default_block_len, devectorise_images, load_matrix_csv, load_pgm_dir, make_bernoulli_mask, make_block_mask,
    save_pgm, square_shape, synthetic_low_rank, MaskedDataset, SamplerState, SamplingMode, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::model::{reconstruct_with, run_pass, DictionaryState, ModelConfig};

/// Ceiling reported when the reconstruction error is exactly zero.
pub const SNR_SATURATION_DB: f64 = 300.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Snr {
    pub db: f64,
    pub saturated: bool,
}

impl fmt::Display for Snr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.saturated {
            write!(f, "{:.2} dB (saturated)", self.db)
        } else {
            write!(f, "{:.2} dB", self.db)
        }
    }
}

/// `10·log₁₀(‖Y‖²_F / ‖Y − Ŷ‖²_F)` over every entry.
pub fn snr(reference: &DenseMatrix, estimate: &DenseMatrix) -> Result<Snr> {
    if reference.shape() != estimate.shape() {
        return Err(Error::dims(
            "snr",
            format!("{:?}", reference.shape()),
            format!("{:?}", estimate.shape()),
        ));
    }
    let signal = reference.frobenius_norm().powi(2);
    if signal == 0.0 {
        return Err(Error::Contract("SNR reference must be nonzero".into()));
    }
    let noise = reference.sub(estimate)?.frobenius_norm().powi(2);
    if noise == 0.0 {
        return Ok(Snr {
            db: SNR_SATURATION_DB,
            saturated: true,
        });
    }
    let db = 10.0 * (signal / noise).log10();
    if db >= SNR_SATURATION_DB {
        Ok(Snr {
            db: SNR_SATURATION_DB,
            saturated: true,
        })
    } else {
        Ok(Snr { db, saturated: false })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Mfrlf,
    MfrlfKalman,
    Sgd,
    Nmf,
}

impl Algorithm {
    pub fn as_str(&self) -> &'static str {
        match self {
            Algorithm::Mfrlf => "mfrlf",
            Algorithm::MfrlfKalman => "mfrlf-kalman",
            Algorithm::Sgd => "sgd",
            Algorithm::Nmf => "nmf",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mfrlf" => Ok(Algorithm::Mfrlf),
            "mfrlf-kalman" => Ok(Algorithm::MfrlfKalman),
            "sgd" => Ok(Algorithm::Sgd),
            "nmf" => Ok(Algorithm::Nmf),
            other => Err(Error::Contract(format!(
                "unknown algorithm {other:?} (expected mfrlf, mfrlf-kalman, sgd or nmf)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    Block,
    Bernoulli,
}

impl MaskMode {
    fn as_str(&self) -> &'static str {
        match self {
            MaskMode::Block => "block",
            MaskMode::Bernoulli => "bernoulli",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// A CSV matrix or a directory of PGM images.
    Path(PathBuf),
    Synthetic(SyntheticSpec),
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataSource::Path(p) => write!(f, "{}", p.display()),
            DataSource::Synthetic(s) => {
                write!(f, "synthetic:{}x{}x{}:seed={}", s.m, s.n, s.rank, s.seed)?;
                if s.noise > 0.0 {
                    write!(f, ":noise={}", fmt_sig(s.noise))?;
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    pub rank: usize,
    pub lambda: f64,
    /// Passes over the data for the streaming algorithms.
    pub passes: usize,
    /// Batch sweeps for NMF.
    pub iterations: usize,
    pub mask_fraction: f64,
    pub mask_mode: MaskMode,
    /// `None` means one contiguous quarter of a column.
    pub block_len: Option<usize>,
    pub v0_scale: f64,
    /// Kalman process noise `Q_V = qv_scale · I`.
    pub qv_scale: f64,
    pub ridge: f64,
    pub seed: u64,
    pub sampling: SamplingMode,
    pub sgd_step: StepSize,
    pub gamma0: f64,
    /// Hold `V` fixed at `V₀` (Broyden's rule when `V₀ = I`).
    pub freeze_covariance: bool,
    pub data: DataSource,
    /// Image shape for CSV inputs; inferred when square.
    pub image_shape: Option<(usize, usize)>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Mfrlf,
            rank: 40,
            lambda: 2.0,
            passes: 10,
            iterations: 1000,
            mask_fraction: 0.25,
            mask_mode: MaskMode::Block,
            block_len: None,
            v0_scale: 1.0,
            qv_scale: 1e-4,
            ridge: 1e-8,
            seed: 0,
            sampling: SamplingMode::EpochShuffle,
            sgd_step: StepSize::Broyden,
            gamma0: 0.1,
            freeze_covariance: false,
            data: DataSource::Synthetic(SyntheticSpec {
                m: 1024,
                n: 200,
                rank: 10,
                seed: 0,
                noise: 0.0,
            }),
            image_shape: None,
        }
    }
}

impl ExperimentConfig {
    /// Display name used in comparison tables.
    pub fn label(&self) -> String {
        match self.algorithm {
            Algorithm::Mfrlf if self.freeze_covariance => "mfrlf-frozen-v".into(),
            Algorithm::Sgd => match self.sgd_step {
                StepSize::Broyden => "sgd-broyden".into(),
                StepSize::Constant => "sgd-constant".into(),
                StepSize::Decay => "sgd-decay".into(),
            },
            a => a.as_str().into(),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let process_noise =
            (self.algorithm == Algorithm::MfrlfKalman).then(|| DenseMatrix::identity(self.rank).scale(self.qv_scale));
        ModelConfig {
            rank: self.rank,
            lambda: self.lambda,
            v0_scale: self.v0_scale,
            ridge: self.ridge,
            process_noise,
            init_seed: self.seed.wrapping_add(2),
            init_scale: None,
            freeze_covariance: self.freeze_covariance,
        }
    }

    pub fn sgd_config(&self) -> SgdConfig {
        SgdConfig {
            step_size: self.sgd_step,
            gamma0: self.gamma0,
            lambda: self.lambda,
        }
    }

    fn mask_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    fn sampler_seed(&self) -> u64 {
        self.seed.wrapping_add(3)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mask_fraction) {
            return Err(Error::Contract(format!(
                "mask fraction must lie in [0, 1], got {}",
                self.mask_fraction
            )));
        }
        if self.block_len == Some(0) {
            return Err(Error::Contract("block length must be positive".into()));
        }
        if !(self.qv_scale >= 0.0 && self.qv_scale.is_finite()) {
            return Err(Error::Contract(format!(
                "qv scale must be nonnegative, got {}",
                self.qv_scale
            )));
        }
        match self.algorithm {
            Algorithm::Nmf => NmfConfig {
                rank: self.rank,
                iterations: self.iterations,
                epsilon: 1e-12,
            }
            .validate(),
            Algorithm::Sgd => {
                self.sgd_config().validate()?;
                self.model_config().validate()
            }
            _ => self.model_config().validate(),
        }
    }

    /// Key/value echo of every setting that affects the numbers.
    pub fn echo(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("algorithm".to_string(), self.label()),
            ("rank".into(), self.rank.to_string()),
            ("lambda".into(), fmt_sig(self.lambda)),
        ];
        match self.algorithm {
            Algorithm::Nmf => out.push(("iterations".into(), self.iterations.to_string())),
            _ => {
                out.push(("passes".into(), self.passes.to_string()));
                out.push((
                    "sampling".into(),
                    match self.sampling {
                        SamplingMode::EpochShuffle => "epoch-shuffle",
                        SamplingMode::WithReplacement => "with-replacement",
                    }
                    .into(),
                ));
                out.push(("ridge".into(), fmt_sig(self.ridge)));
            }
        }
        match self.algorithm {
            Algorithm::Mfrlf | Algorithm::MfrlfKalman => {
                out.push(("v0_scale".into(), fmt_sig(self.v0_scale)));
                out.push(("freeze_v".into(), self.freeze_covariance.to_string()));
            }
            Algorithm::Sgd => {
                out.push(("gamma0".into(), fmt_sig(self.gamma0)));
            }
            Algorithm::Nmf => {}
        }
        if self.algorithm == Algorithm::MfrlfKalman {
            out.push(("qv_scale".into(), fmt_sig(self.qv_scale)));
        }
        out.push(("mask_fraction".into(), fmt_sig(self.mask_fraction)));
        out.push(("mask_mode".into(), self.mask_mode.as_str().into()));
        if self.mask_mode == MaskMode::Block {
            out.push((
                "block_len".into(),
                self.block_len.map_or("quarter".into(), |b| b.to_string()),
            ));
        }
        out.push(("seed".into(), self.seed.to_string()));
        out.push(("data".into(), self.data.to_string()));
        out
    }
}

/// Clean data, its masked counterpart and the image geometry.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub clean: DenseMatrix,
    pub data: MaskedDataset,
    pub image_shape: (usize, usize),
}

impl PreparedData {
    pub fn initial_snr(&self) -> Result<Snr> {
        snr(&self.clean, &self.data.zero_filled())
    }
}

/// Loads or synthesises the data named by `cfg` and applies its mask.
pub fn prepare(cfg: &ExperimentConfig) -> Result<PreparedData> {
    cfg.validate()?;
    let (clean, shape, names) = match &cfg.data {
        DataSource::Synthetic(spec) => {
            let (y, _, _) = synthetic_low_rank(spec);
            (y, spec.image_shape(), None)
        }
        DataSource::Path(p) if p.is_dir() => {
            let (y, shape, names) = load_pgm_dir(p)?;
            (y, shape, Some(names))
        }
        DataSource::Path(p) if p.is_file() => {
            let y = load_matrix_csv(p)?;
            let shape = cfg
                .image_shape
                .or_else(|| square_shape(y.rows()))
                .unwrap_or((1, y.rows()));
            (y, shape, None)
        }
        DataSource::Path(p) => {
            return Err(Error::Contract(format!(
                "dataset {} not found; pass --data <csv file | directory of .pgm images> \
                 or --synthetic <m>x<n>x<rank> to generate one",
                p.display()
            )))
        }
    };
    if shape.0 * shape.1 != clean.rows() {
        return Err(Error::dims(
            "image shape",
            clean.rows(),
            format!("{}x{}", shape.0, shape.1),
        ));
    }
    let (m, n) = clean.shape();
    let mask = match cfg.mask_mode {
        MaskMode::Block => make_block_mask(
            m,
            n,
            cfg.mask_fraction,
            cfg.block_len.unwrap_or_else(|| default_block_len(m)),
            cfg.mask_seed(),
        ),
        MaskMode::Bernoulli => make_bernoulli_mask(m, n, cfg.mask_fraction, cfg.mask_seed()),
    };
    let mut data = MaskedDataset::new(clean.clone(), mask)?;
    if let Some(names) = names {
        data = data.with_names(names)?;
    }
    Ok(PreparedData {
        clean,
        data,
        image_shape: shape,
    })
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub label: String,
    pub initial_snr: Snr,
    pub final_snr: Snr,
    /// SNR after each pass (or each NMF checkpoint).
    pub pass_snr: Vec<Snr>,
    /// Mean (masked) residual norm per pass.
    pub pass_residual: Vec<f64>,
    /// Columns skipped per pass because their coefficient solve failed.
    pub pass_skipped: Vec<usize>,
    /// Columns left at zero in the final reconstruction.
    pub flagged_columns: Vec<usize>,
    pub wall_time: Duration,
    pub config: Vec<(String, String)>,
    pub reconstruction: DenseMatrix,
}

impl RunReport {
    /// `field,value` rows. Wall time is left out so reruns are byte-identical.
    pub fn report_csv(&self) -> String {
        let mut out = String::from("field,value\n");
        for (k, v) in &self.config {
            out.push_str(&format!("{k},{}\n", csv_field(v)));
        }
        out.push_str(&format!("initial_snr_db,{}\n", fmt_sig(self.initial_snr.db)));
        out.push_str(&format!("final_snr_db,{}\n", fmt_sig(self.final_snr.db)));
        out.push_str(&format!("final_snr_saturated,{}\n", self.final_snr.saturated));
        out.push_str(&format!("skipped_steps,{}\n", self.pass_skipped.iter().sum::<usize>()));
        out.push_str(&format!("flagged_columns,{}\n", self.flagged_columns.len()));
        out
    }

    pub fn trace_csv(&self) -> String {
        let mut out = String::from("pass,snr_db,saturated,mean_residual,skipped_steps\n");
        for (k, s) in self.pass_snr.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                k + 1,
                fmt_sig(s.db),
                s.saturated,
                fmt_sig(self.pass_residual[k]),
                self.pass_skipped[k]
            ));
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Nine significant digits, `%g` style.
pub fn fmt_sig(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    let s = if (-5..9).contains(&exp) {
        format!("{:.*}", (8 - exp).max(0) as usize, x)
    } else {
        let e = format!("{x:.8e}");
        let (mant, pow) = e.split_once('e').expect("exponent form");
        return format!("{}e{pow}", trim_zeros(mant));
    };
    trim_zeros(&s)
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

/// Runs the configured algorithm on already-prepared data.
pub fn run_on(prepared: &PreparedData, cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let start = Instant::now();
    let data = &prepared.data;
    let initial_snr = prepared.initial_snr()?;
    let mut pass_snr = Vec::new();
    let mut pass_residual = Vec::new();
    let mut pass_skipped = Vec::new();
    let (reconstruction, flagged_columns) = match cfg.algorithm {
        Algorithm::Mfrlf | Algorithm::MfrlfKalman => {
            let model = cfg.model_config();
            let mut state = DictionaryState::init(&model, data.m())?;
            let mut sampler = SamplerState::new(cfg.sampling, cfg.sampler_seed());
            for _ in 0..cfg.passes {
                let order = sampler.take(data.n(), data.n());
                let (next, trace) = run_pass(state, data, &model, &order)?;
                state = next;
                let rec = state.reconstruct(data, model.ridge)?;
                pass_snr.push(snr(&prepared.clean, &rec.matrix)?);
                pass_residual.push(trace.mean_residual());
                pass_skipped.push(trace.skipped());
            }
            let rec = state.reconstruct(data, model.ridge)?;
            (rec.matrix, rec.flagged)
        }
        Algorithm::Sgd => {
            let model = cfg.model_config();
            let sgd = cfg.sgd_config();
            let init = DictionaryState::init(&model, data.m())?;
            let mut state = SgdState {
                c: init.dictionary().clone(),
                step: 0,
            };
            let mut sampler = SamplerState::new(cfg.sampling, cfg.sampler_seed());
            for _ in 0..cfg.passes {
                let order = sampler.take(data.n(), data.n());
                let (next, trace) = sgd_run(state, data, &model, &sgd, &order)?;
                state = next;
                let rec = reconstruct_with(&state.c, data, model.ridge)?;
                pass_snr.push(snr(&prepared.clean, &rec.matrix)?);
                pass_residual.push(trace.mean_residual());
                pass_skipped.push(trace.skipped());
            }
            let rec = reconstruct_with(&state.c, data, model.ridge)?;
            (rec.matrix, rec.flagged)
        }
        Algorithm::Nmf => {
            let nmf_cfg = NmfConfig {
                rank: cfg.rank,
                iterations: cfg.iterations,
                epsilon: 1e-12,
            };
            let mut nmf = Nmf::new(data, &nmf_cfg, cfg.seed.wrapping_add(2))?;
            let checkpoints = cfg.passes.clamp(1, cfg.iterations);
            let mut done = 0;
            for k in 0..checkpoints {
                let target = cfg.iterations * (k + 1) / checkpoints;
                while done < target {
                    nmf.sweep();
                    done += 1;
                }
                let rec = nmf.reconstruction();
                pass_snr.push(snr(&prepared.clean, &rec)?);
                pass_residual.push(mean_masked_column_residual(data, &rec));
                pass_skipped.push(0);
            }
            (nmf.reconstruction(), Vec::new())
        }
    };
    let final_snr = snr(&prepared.clean, &reconstruction)?;
    Ok(RunReport {
        label: cfg.label(),
        initial_snr,
        final_snr,
        pass_snr,
        pass_residual,
        pass_skipped,
        flagged_columns,
        wall_time: start.elapsed(),
        config: cfg.echo(),
        reconstruction,
    })
}

fn mean_masked_column_residual(data: &MaskedDataset, rec: &DenseMatrix) -> f64 {
    let n = data.n();
    if n == 0 {
        return 0.0;
    }
    let (y, mask) = (data.data(), data.mask());
    let total: f64 = (0..n)
        .map(|j| {
            (0..data.m())
                .map(|i| (mask.get(i, j) * (y.get(i, j) - rec.get(i, j))).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    total / n as f64
}

/// Writes `report.csv`, `trace.csv` and `restored/<column>.pgm` under `dir`.
pub fn write_outputs(dir: &Path, report: &RunReport, prepared: &PreparedData) -> Result<()> {
    let restored = dir.join("restored");
    fs::create_dir_all(&restored).map_err(|e| Error::io(&restored, e))?;
    let path = dir.join("report.csv");
    fs::write(&path, report.report_csv()).map_err(|e| Error::io(&path, e))?;
    let path = dir.join("trace.csv");
    fs::write(&path, report.trace_csv()).map_err(|e| Error::io(&path, e))?;
    let (lo, hi) = prepared
        .clean
        .as_slice()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo, lo + 1.0) };
    let (h, w) = prepared.image_shape;
    for (j, img) in devectorise_images(&report.reconstruction, h, w)?.iter().enumerate() {
        save_pgm(restored.join(format!("{j}.pgm")), img, lo, hi)?;
    }
    Ok(())
}

/// [`prepare`] + [`run_on`], writing outputs when `out` is given.
pub fn run_restoration(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<RunReport> {
    let prepared = prepare(cfg)?;
    let report = run_on(&prepared, cfg)?;
    if let Some(dir) = out {
        write_outputs(dir, &report, &prepared)?;
    }
    Ok(report)
}

#[derive(Debug)]
pub struct ComparisonRow {
    pub label: String,
    pub outcome: std::result::Result<RunReport, String>,
}

/// One report per configuration, all on the same masked dataset.
#[derive(Debug, Default)]
pub struct Comparison {
    pub initial_snr: Option<Snr>,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("algorithm,snr_db,status\n");
        if let Some(init) = self.initial_snr {
            out.push_str(&format!("initial,{},ok\n", fmt_sig(init.db)));
        }
        for row in &self.rows {
            match &row.outcome {
                Ok(r) => out.push_str(&format!("{},{},ok\n", row.label, fmt_sig(r.final_snr.db))),
                Err(e) => out.push_str(&format!("{},,{}\n", row.label, csv_field(&format!("error: {e}")))),
            }
        }
        out
    }

    pub fn get(&self, label: &str) -> Option<&RunReport> {
        self.rows
            .iter()
            .find(|r| r.label == label)
            .and_then(|r| r.outcome.as_ref().ok())
    }
}

/// Runs every configuration on `prepared`, in parallel. Failures are kept
/// in the table rather than aborting the comparison.
pub fn compare(prepared: &PreparedData, cfgs: &[ExperimentConfig]) -> Comparison {
    if cfgs.is_empty() {
        return Comparison::default();
    }
    let rows = std::thread::scope(|scope| {
        let handles: Vec<_> = cfgs
            .iter()
            .map(|cfg| scope.spawn(move || run_on(prepared, cfg)))
            .collect();
        handles
            .into_iter()
            .zip(cfgs)
            .map(|(h, cfg)| ComparisonRow {
                label: cfg.label(),
                outcome: h
                    .join()
                    .unwrap_or_else(|_| Err(Error::Contract("run panicked".into())))
                    .map_err(|e| e.to_string()),
            })
            .collect()
    });
    Comparison {
        initial_snr: prepared.initial_snr().ok(),
        rows,
    }
}

/// Writes `comparison.csv` plus one output directory per successful run.
pub fn write_comparison(dir: &Path, cmp: &Comparison, prepared: &PreparedData) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("comparison.csv");
    fs::write(&path, cmp.to_csv()).map_err(|e| Error::io(&path, e))?;
    for row in &cmp.rows {
        if let Ok(report) = &row.outcome {
            write_outputs(&dir.join(&row.label), report, prepared)?;
        }
    }
    Ok(())
}
