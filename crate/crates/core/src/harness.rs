//! Experiment orchestration behind the command-line tool.
//!
//! A single JSON [`ExperimentConfig`] drives dataset generation, reference runs
//! and transformer verification. Every file written here is a deterministic
//! function of the configuration and seeds; wall-clock timings go to a separate
//! file so the reports themselves stay byte-reproducible.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::build_dann::{build_dann_transformer, run_dann, write_step_csv, DannConfig};
use crate::build_iwl::{build_iwl_transformer, run_iwl, IwlConfig};
use crate::build_select::{build_icuda_transformer, run_icuda, IcudaConfig, SelectConfig};
use crate::datagen::{
    gen_shifted_gaussians_labeled, gen_two_moon_labeled, read_csv, write_csv, DomainPair, Generated, HeldOut, LabelRule, ShiftGaussConfig,
    TwoMoonConfig,
};
use crate::error::{Error, Result};
use crate::tfcore::{describe, tf_norm, LayerSummary, Transformer};
use crate::uda_ref::{
    dann_run, icuda_predict, ulsif_build, ulsif_gd, weighted_gd_values, Activation, Branch, DannHyper, DannState, FeatureKind, FeatureMap, IwlState,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorSpec {
    TwoMoon {
        /// Total training size `N`; each domain gets `N / 2`.
        n_total: usize,
        rotation: f64,
        noise_std: f64,
    },
    ShiftedGaussians {
        d: usize,
        source_mean: Vec<f64>,
        target_mean: Vec<f64>,
        shared_cov_scale: f64,
        #[serde(default)]
        target_cov_scale: Option<f64>,
        label_normal: Vec<f64>,
        label_offset: f64,
        n: usize,
        n_prime: usize,
    },
}

impl GeneratorSpec {
    pub fn generate(&self, seed: u64) -> Result<Generated> {
        match self {
            GeneratorSpec::TwoMoon { n_total, rotation, noise_std } => {
                if n_total % 2 != 0 {
                    return Err(Error::Config("two-moon N must be even".into()));
                }
                gen_two_moon_labeled(&TwoMoonConfig { n_per_domain: n_total / 2, rotation: *rotation, noise_std: *noise_std, seed })
            }
            GeneratorSpec::ShiftedGaussians { .. } => gen_shifted_gaussians_labeled(&self.shift_config(seed).expect("shifted variant")),
        }
    }

    fn shift_config(&self, seed: u64) -> Option<ShiftGaussConfig> {
        match self {
            GeneratorSpec::ShiftedGaussians { d, source_mean, target_mean, shared_cov_scale, target_cov_scale, label_normal, label_offset, n, n_prime } => {
                Some(ShiftGaussConfig {
                    d: *d,
                    source_mean: source_mean.clone(),
                    target_mean: target_mean.clone(),
                    shared_cov_scale: *shared_cov_scale,
                    target_cov_scale: *target_cov_scale,
                    label_rule: LabelRule { normal: label_normal.clone(), offset: *label_offset },
                    n: *n,
                    n_prime: *n_prime,
                    seed,
                })
            }
            GeneratorSpec::TwoMoon { .. } => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Iwl,
    Dann,
    Icuda,
}

impl std::str::FromStr for Algorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iwl" => Ok(Algorithm::Iwl),
            "dann" => Ok(Algorithm::Dann),
            "icuda" => Ok(Algorithm::Icuda),
            other => Err(Error::Config(format!("unknown algorithm `{other}` (expected iwl, dann or icuda)"))),
        }
    }
}

/// Iteration counts for reference runs in `run`; transformer builds use the
/// counts inside `iwl` and `dann`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSchedule {
    pub iwl_l1: usize,
    pub iwl_l2: usize,
    pub dann_steps: usize,
}

impl Default for RunSchedule {
    fn default() -> Self {
        RunSchedule { iwl_l1: 500, iwl_l2: 2000, dann_steps: 1000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub generator: GeneratorSpec,
    pub algorithm: Algorithm,
    pub seeds: Vec<u64>,
    pub iwl: IwlConfig,
    pub dann: DannConfig,
    pub dann_hyper: DannHyper,
    pub select: SelectConfig,
    pub schedule: RunSchedule,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let ic = IcudaConfig::default();
        ExperimentConfig {
            generator: GeneratorSpec::ShiftedGaussians {
                d: 1,
                source_mean: vec![0.0],
                target_mean: vec![1.0],
                shared_cov_scale: 1.0,
                target_cov_scale: None,
                label_normal: vec![1.0],
                label_offset: 0.5,
                n: 32,
                n_prime: 32,
            },
            algorithm: Algorithm::Iwl,
            seeds: vec![0],
            iwl: IwlConfig::default(),
            dann: DannConfig::default(),
            dann_hyper: ic.dann_hyper,
            select: SelectConfig::default(),
            schedule: RunSchedule::default(),
            out_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be non-empty".into()));
        }
        let tols = [self.iwl.grad_eps, self.iwl.feature_tol, self.dann.act_tol, self.dann.gamma_tol, self.select.kernel_tol, self.select.log_tol, self.select.exp_rel_tol];
        if tols.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::Config("tolerances must be positive".into()));
        }
        if !(self.dann_hyper.eta >= 0.0 && self.dann_hyper.lambda_tradeoff >= 0.0) {
            return Err(Error::Config("eta and lambda must be non-negative".into()));
        }
        if !(self.dann_hyper.clamp_delta > 0.0 && self.dann_hyper.clamp_delta < 0.5) {
            return Err(Error::Config("clamp delta must lie in (0, 1/2)".into()));
        }
        if self.iwl.lambda < 0.0 {
            return Err(Error::Config("uLSIF ridge must be non-negative".into()));
        }
        self.select.validate()
    }

    /// Hex SHA-256 of the canonical JSON serialisation.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(serde_json::to_string(self)?.as_bytes()))
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out_dir.join("data")
    }

    pub fn dataset_path(&self, seed: u64) -> PathBuf {
        self.data_dir().join(format!("seed_{seed}.csv"))
    }

    fn icuda(&self, seed: u64) -> IcudaConfig {
        IcudaConfig {
            iwl: IwlConfig { out_slot: "f_iwl".into(), ..self.iwl.clone() },
            dann: DannConfig { out_slot: "f_dann".into(), ..self.dann.clone() },
            dann_hyper: self.dann_hyper,
            dann_seed: seed,
            select: self.select.clone(),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_sha256: String,
    pub seeds: Vec<u64>,
    pub files: Vec<ManifestFile>,
}

fn write_ratio_sidecar(pair: &DomainPair, cfg: &ShiftGaussConfig, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (1..=pair.d()).map(|i| format!("x_{i}")).collect();
    header.push("ratio".into());
    w.write_record(&header)?;
    let xs = pair.source.iter().map(|s| &s.x).chain(&pair.target).chain(std::iter::once(&pair.query));
    for x in xs {
        let mut rec: Vec<String> = x.iter().map(|v| format!("{v:?}")).collect();
        rec.push(format!("{:?}", cfg.density_ratio(x)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn relative(base: &Path, p: &Path) -> String {
    p.strip_prefix(base).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

/// Write one CSV per seed (plus an analytic-ratio sidecar for shifted
/// Gaussians) and a manifest with hashes.
pub fn cmd_gen(cfg: &ExperimentConfig) -> Result<Manifest> {
    cfg.validate()?;
    let dir = cfg.data_dir();
    std::fs::create_dir_all(&dir)?;
    let mut files = Vec::new();
    for &seed in &cfg.seeds {
        let g = cfg.generator.generate(seed)?;
        let path = cfg.dataset_path(seed);
        write_csv(&g.pair, Some(&g.held_out), &path)?;
        files.push(path.clone());
        if let Some(sc) = cfg.generator.shift_config(seed) {
            let rp = dir.join(format!("seed_{seed}_ratio.csv"));
            write_ratio_sidecar(&g.pair, &sc, &rp)?;
            files.push(rp);
        }
    }
    let files = files
        .into_iter()
        .map(|p| Ok(ManifestFile { path: relative(&cfg.out_dir, &p), sha256: sha256_hex(&std::fs::read(&p)?) }))
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest { config_sha256: cfg.hash()?, seeds: cfg.seeds.clone(), files };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Load a generated dataset; the held-out labels stay with the harness.
pub fn load_dataset(cfg: &ExperimentConfig, seed: u64) -> Result<(DomainPair, HeldOut)> {
    let path = cfg.dataset_path(seed);
    if !path.exists() {
        return Err(Error::Config(format!("dataset {} not found; run `gen` first", path.display())));
    }
    let (pair, held) = read_csv(&path)?;
    let held = held.ok_or_else(|| Error::Config(format!("{} carries no held-out target labels", path.display())))?;
    Ok((pair, held))
}

/// A trained reference predictor.
#[derive(Clone, Debug)]
pub enum Predictor {
    Linear { features: FeatureMap, w: Vec<f64> },
    Network(DannState),
}

impl Predictor {
    pub fn predict(&self, x: &[f64]) -> f64 {
        match self {
            Predictor::Linear { features, w } => features.eval(x).iter().zip(w).map(|(a, b)| a * b).sum(),
            Predictor::Network(st) => st.label_output(x),
        }
    }

    /// Fraction of points whose thresholded prediction matches the label.
    pub fn accuracy(&self, xs: &[Vec<f64>], ys: &[f64]) -> f64 {
        if xs.is_empty() {
            return 0.0;
        }
        let hits = xs.iter().zip(ys).filter(|(x, y)| (if self.predict(x) > 0.5 { 1.0 } else { 0.0 }) == **y).count();
        hits as f64 / xs.len() as f64
    }
}

/// Weighted least-squares gradient descent with the step `1 / lambda_max(H)`.
fn fit_weighted(features: &FeatureMap, pair: &DomainPair, weights: &[f64], l2: usize, cfg: &IwlConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    let phis: Vec<Vec<f64>> = pair.source.iter().map(|s| features.eval(&s.x)).collect();
    let ys: Vec<f64> = pair.source.iter().map(|s| s.y).collect();
    let j = features.dim();
    let mut h = nalgebra::DMatrix::<f64>::zeros(j, j);
    for (p, w) in phis.iter().zip(weights) {
        let v = nalgebra::DVector::from_column_slice(p);
        h += &v * v.transpose() * (*w / pair.n() as f64);
    }
    let lmax = h.symmetric_eigenvalues().max();
    let eta2 = cfg.eta2.unwrap_or(if lmax > 0.0 { 1.0 / lmax } else { 1.0 });
    let st = IwlState::new(j, eta2, l2, cfg.b_w.unwrap_or(1e6), cfg.loss);
    let run = weighted_gd_values(&phis, &ys, weights, &features.eval(&pair.query), &st)?;
    let norms = run.w_trace.iter().map(|w| w.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    Ok((run.w_trace.last().cloned().unwrap_or_default(), norms))
}

fn feature_map(pair: &DomainPair, cfg: &IwlConfig) -> Result<FeatureMap> {
    Ok(match cfg.feature_kind {
        FeatureKind::Rbf => FeatureMap::rbf_from_pair(pair, cfg.j_max)?,
        FeatureKind::Constant => FeatureMap::constant(pair.d()),
        FeatureKind::Linear => FeatureMap::linear(pair.d(), pair.bounds.b_x),
    })
}

/// Reference IWL (`weighted = true`) or source-only ERM with the same features.
pub fn reference_iwl(pair: &DomainPair, cfg: &IwlConfig, sched: &RunSchedule, weighted: bool) -> Result<(Predictor, Vec<f64>)> {
    let features = feature_map(pair, cfg)?;
    let weights = if weighted {
        let p = ulsif_build(pair, features.clone(), cfg.lambda)?;
        let eta1 = cfg.eta1.unwrap_or_else(|| p.safe_eta1());
        let p = p.with_schedule(eta1, sched.iwl_l1);
        let alpha = ulsif_gd(&p)?.pop().unwrap_or_default();
        pair.source.iter().map(|s| p.ratio(&alpha, &s.x).max(0.0)).collect()
    } else {
        vec![1.0; pair.n()]
    };
    let (w, norms) = fit_weighted(&features, pair, &weights, sched.iwl_l2, cfg)?;
    Ok((Predictor::Linear { features, w }, norms))
}

/// Reference DANN; `lambda = 0` gives the source-only network.
pub fn reference_dann(pair: &DomainPair, hp: &DannHyper, seed: u64, steps: usize, adversarial: bool) -> Result<(Predictor, Vec<f64>)> {
    let mut st0 = DannState::init(hp, pair.d(), seed)?;
    if !adversarial {
        st0.lambda_tradeoff = 0.0;
    }
    let run = dann_run(pair, &st0, steps)?;
    let norms = run.trace.iter().map(|s| s.flatten().iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    Ok((Predictor::Network(run.trace.last().cloned().expect("non-empty trace")), norms))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub algorithm: String,
    pub seed: u64,
    pub n: usize,
    pub n_prime: usize,
    pub prediction: f64,
    pub choice: Option<Branch>,
    pub trace_norms: Vec<f64>,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracySummary {
    pub algorithm: String,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub records: Vec<RunRecord>,
    pub summary: Vec<AccuracySummary>,
}

fn summarise(records: &[RunRecord]) -> Vec<AccuracySummary> {
    let mut names: Vec<&str> = records.iter().map(|r| r.algorithm.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    names
        .into_iter()
        .map(|name| {
            let acc: Vec<f64> = records.iter().filter(|r| r.algorithm == name).map(|r| r.accuracy).collect();
            let k = acc.len() as f64;
            let mean = acc.iter().sum::<f64>() / k;
            let var = if acc.len() > 1 { acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (k - 1.0) } else { 0.0 };
            AccuracySummary { algorithm: name.to_string(), mean, std: var.sqrt(), runs: acc.len() }
        })
        .collect()
}

/// Records for one seed: the requested algorithm plus its source-only baseline.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, pair: &DomainPair, held: &HeldOut) -> Result<Vec<RunRecord>> {
    let (n, n_prime) = (pair.n(), pair.n_prime());
    let s = &cfg.schedule;
    let rec = |name: &str, p: &Predictor, norms: Vec<f64>, choice: Option<Branch>| RunRecord {
        algorithm: name.into(),
        seed,
        n,
        n_prime,
        prediction: p.predict(&pair.query),
        choice,
        trace_norms: norms,
        accuracy: p.accuracy(&pair.target, &held.target_labels),
    };
    let mut out = Vec::new();
    match cfg.algorithm {
        Algorithm::Iwl => {
            let (p, norms) = reference_iwl(pair, &cfg.iwl, s, true)?;
            out.push(rec("iwl", &p, norms, None));
            let (p, norms) = reference_iwl(pair, &cfg.iwl, s, false)?;
            out.push(rec("source_only", &p, norms, None));
        }
        Algorithm::Dann => {
            let (p, norms) = reference_dann(pair, &cfg.dann_hyper, seed, s.dann_steps, true)?;
            out.push(rec("dann", &p, norms, None));
            let (p, norms) = reference_dann(pair, &cfg.dann_hyper, seed, s.dann_steps, false)?;
            out.push(rec("source_only", &p, norms, None));
        }
        Algorithm::Icuda => {
            let (pi, ni) = reference_iwl(pair, &cfg.iwl, s, true)?;
            let (pd, nd) = reference_dann(pair, &cfg.dann_hyper, seed, s.dann_steps, true)?;
            let sel = icuda_predict(pair, pi.predict(&pair.query), pd.predict(&pair.query), &cfg.select.selector)?;
            let (chosen, norms) = match sel.choice {
                Branch::Iwl => (&pi, ni.clone()),
                Branch::Dann => (&pd, nd.clone()),
            };
            out.push(rec("icuda", chosen, norms, Some(sel.choice)));
            out.push(rec("iwl", &pi, ni, None));
            out.push(rec("dann", &pd, nd, None));
        }
    }
    Ok(out)
}

/// Run reference algorithms on every seed and write `results.json`, `accuracy.csv`.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let mut records = Vec::new();
    for &seed in &cfg.seeds {
        let (pair, held) = load_dataset(cfg, seed)?;
        records.extend(run_seed(cfg, seed, &pair, &held)?);
    }
    let summary = summarise(&records);
    let report = RunReport { records, summary };
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("results.json"), serde_json::to_string_pretty(&report)?)?;
    let mut w = csv::Writer::from_path(cfg.out_dir.join("accuracy.csv"))?;
    w.write_record(["algorithm", "mean", "std", "runs"])?;
    for s in &report.summary {
        w.write_record([s.algorithm.clone(), format!("{:?}", s.mean), format!("{:?}", s.std), s.runs.to_string()])?;
    }
    w.flush()?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyRecord {
    pub seed: u64,
    pub oracle: f64,
    pub transformer: f64,
    pub bound: f64,
    pub pass: bool,
    pub depth: usize,
    pub tf_norm: f64,
    /// Extra conditions beyond the prediction bound (per-step checks, branch agreement).
    pub checks: Vec<(String, bool)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub algorithm: Algorithm,
    pub records: Vec<VerifyRecord>,
    pub pass_rate: f64,
    pub all_pass: bool,
    /// Wall-clock seconds; written to `verify_timing.json`, not the report file.
    #[serde(skip)]
    pub runtime_s: f64,
}

fn verify_seed(cfg: &ExperimentConfig, seed: u64, pair: &DomainPair) -> Result<VerifyRecord> {
    let out = &cfg.out_dir;
    match cfg.algorithm {
        Algorithm::Iwl => {
            let b = build_iwl_transformer(pair, &cfg.iwl)?;
            let r = run_iwl(&b, pair)?;
            let oracle = b.reference_exact.prediction;
            let bound = b.certificate.bound;
            let within = (r.prediction - oracle).abs() <= bound;
            let checks = vec![("prediction_within_certificate".to_string(), within), ("norm_accounting".to_string(), b.certificate.norm.holds)];
            Ok(VerifyRecord {
                seed,
                oracle,
                transformer: r.prediction,
                bound,
                pass: within,
                depth: b.transformer.depth(),
                tf_norm: tf_norm(&b.transformer),
                checks,
            })
        }
        Algorithm::Dann => {
            let st0 = DannState::init(&cfg.dann_hyper, pair.d(), seed)?;
            let b = build_dann_transformer(pair, &st0, &cfg.dann)?;
            let r = run_dann(&b, pair)?;
            write_step_csv(&r, &out.join(format!("dann_steps_seed_{seed}.csv")))?;
            let steps_ok = r.block_passes() == r.block_checks();
            let cum_ok = r.steps.iter().all(|s| s.distance <= s.cumulative);
            let within = (r.prediction - r.reference_prediction).abs() <= r.prediction_bound;
            Ok(VerifyRecord {
                seed,
                oracle: r.reference_prediction,
                transformer: r.prediction,
                bound: r.prediction_bound,
                pass: within && steps_ok && cum_ok,
                depth: b.transformer.depth(),
                tf_norm: tf_norm(&b.transformer),
                checks: vec![
                    ("prediction_within_certificate".into(), within),
                    ("per_step_blocks".into(), steps_ok),
                    ("cumulative_distance".into(), cum_ok),
                ],
            })
        }
        Algorithm::Icuda => {
            let ic = cfg.icuda(seed);
            let b = build_icuda_transformer(pair, &ic)?;
            let r = run_icuda(&b, pair, &ic)?;
            std::fs::write(out.join(format!("selection_seed_{seed}.json")), serde_json::to_string_pretty(&r.report)?)?;
            let same = r.report.choice == r.oracle.choice;
            let within = (r.prediction - r.chosen_reference()).abs() <= r.chosen_certificate();
            Ok(VerifyRecord {
                seed,
                oracle: r.chosen_reference(),
                transformer: r.prediction,
                bound: r.chosen_certificate(),
                pass: same && within,
                depth: b.transformer.depth(),
                tf_norm: tf_norm(&b.transformer),
                checks: vec![
                    ("branch_matches_oracle".into(), same),
                    ("prediction_within_branch_certificate".into(), within),
                    ("selection_margin_positive".into(), r.report.margin > 0.0),
                ],
            })
        }
    }
}

/// Build, run and check the configured transformer on every seed.
pub fn cmd_verify(cfg: &ExperimentConfig) -> Result<VerificationReport> {
    cfg.validate()?;
    let t0 = Instant::now();
    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut records = Vec::new();
    for &seed in &cfg.seeds {
        let (pair, _) = load_dataset(cfg, seed)?;
        records.push(verify_seed(cfg, seed, &pair)?);
    }
    let passes = records.iter().filter(|r| r.pass).count();
    let report = VerificationReport {
        algorithm: cfg.algorithm,
        pass_rate: passes as f64 / records.len() as f64,
        all_pass: passes == records.len(),
        records,
        runtime_s: t0.elapsed().as_secs_f64(),
    };
    std::fs::write(cfg.out_dir.join("verify.json"), serde_json::to_string_pretty(&report)?)?;
    std::fs::write(cfg.out_dir.join("verify_timing.json"), serde_json::json!({ "runtime_s": report.runtime_s }).to_string())?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Description {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub depth: usize,
    pub max_heads: usize,
    pub embedding_dim: usize,
    pub tf_norm: f64,
    pub layers: Vec<LayerSummary>,
}

fn describe_tf(cfg: &ExperimentConfig, seed: u64, tf: &Transformer) -> Description {
    Description {
        algorithm: cfg.algorithm,
        seed,
        depth: tf.depth(),
        max_heads: tf.head_count(),
        embedding_dim: tf.layout.dim(),
        tf_norm: tf_norm(tf),
        layers: describe(tf),
    }
}

/// Build the configured transformer on the first seed's data and summarise it.
pub fn cmd_describe(cfg: &ExperimentConfig) -> Result<Description> {
    cfg.validate()?;
    let seed = cfg.seeds[0];
    let pair = match load_dataset(cfg, seed) {
        Ok((p, _)) => p,
        Err(_) => cfg.generator.generate(seed)?.pair,
    };
    Ok(match cfg.algorithm {
        Algorithm::Iwl => describe_tf(cfg, seed, &build_iwl_transformer(&pair, &cfg.iwl)?.transformer),
        Algorithm::Dann => {
            let st0 = DannState::init(&cfg.dann_hyper, pair.d(), seed)?;
            describe_tf(cfg, seed, &build_dann_transformer(&pair, &st0, &cfg.dann)?.transformer)
        }
        Algorithm::Icuda => describe_tf(cfg, seed, &build_icuda_transformer(&pair, &cfg.icuda(seed))?.transformer),
    })
}

/// DANN settings used for the two-moon sanity sweep.
pub fn sanity_dann_hyper() -> DannHyper {
    DannHyper {
        k: 8,
        b_u: 5.0,
        b_w: 5.0,
        b_v: 5.0,
        eta: 0.1,
        lambda_tradeoff: 0.3,
        activation: Activation::Logistic,
        clamp_delta: 0.1,
        init_scale: 1.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_json() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn empty_seed_list_is_rejected() {
        let cfg = ExperimentConfig { seeds: vec![], ..ExperimentConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sha256_of_empty_input() {
        assert_eq!(sha256_hex(b""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    }
}
