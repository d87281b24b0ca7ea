//! Experiment orchestration: a content-hashed stage graph from target
//! training to reports, parameter sweeps and report rendering.

mod config;
mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

pub use config::{
    CommonSection, DataConfig, ExperimentConfig, FinetuneSection, Mode, SweepAxis, SweepConfig,
    TrainSection,
};
pub use report::{render, write_reports, ReportFormat, CSV_HEADER};

use crate::attack::{attack_blackbox, attack_whitebox, escalate, AttackConfig, AttackResult};
use crate::data::{
    build_dataset, sample_bit_watermark, save_image, synthetic_image, Dataset, Seed, Split,
    Watermark,
};
use crate::error::{Error, Result};
use crate::metrics::{self, AggregateRow};
use crate::surrogate::{
    finetune_decoder, harvest_pairs, load_pairs, pair_accuracy, save_pairs, train_surrogate,
    AttackPair, CommonSurrogateSpec, FinetuneReport,
};
use crate::wmnet::{
    eval_watermarks, evaluate_pipeline, load_pipeline, save_pipeline, train_pipeline, Pipeline,
    TechniqueProfile, WatermarkSpec,
};

pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Environment variable holding the attack worker count.
pub const WORKERS_ENV: &str = "DLOVE_WORKERS";

/// Worker count from `DLOVE_WORKERS`, or the number of CPUs when unset.
pub fn worker_count() -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!(
                "{WORKERS_ENV} must be a positive integer, got `{v}`"
            ))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Last stage a command needs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageKind {
    TrainTarget,
    TrainSurrogate,
    Harvest,
    Finetune,
    Attack,
}

impl StageKind {
    pub fn label(self) -> &'static str {
        match self {
            Self::TrainTarget => "train-target",
            Self::TrainSurrogate => "train-surrogate",
            Self::Harvest => "harvest",
            Self::Finetune => "finetune",
            Self::Attack => "attack",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Stage label plus subject, e.g. `train-target/redmark-like`.
    pub stage: String,
    pub hash: String,
    pub dir: PathBuf,
    /// True when the outputs were reused from an earlier run.
    pub skipped: bool,
}

/// Where one report row comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowSource {
    pub technique: String,
    pub results: PathBuf,
    pub summary: PathBuf,
    /// Sweep value that produced the row, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep_value: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub toolkit_version: String,
    pub mode: Mode,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub stages: Vec<StageRecord>,
    /// Named artifacts: checkpoints, pair archives, result files, reports.
    pub artifacts: BTreeMap<String, PathBuf>,
    pub rows: Vec<RowSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSummary>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";

impl RunManifest {
    pub fn load(out: impl AsRef<Path>) -> Result<Self> {
        let path = out.as_ref().join(MANIFEST_FILE);
        let bytes = std::fs::read(&path).map_err(|source| Error::Unreadable {
            path: path.clone(),
            source,
        })?;
        serde_json::from_slice(&bytes)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Rows in manifest order, read back from the attack stages.
    pub fn load_rows(&self) -> Result<Vec<AggregateRow>> {
        if self.rows.is_empty() {
            return Err(Error::InvalidArgument(
                "manifest lists no attack results".into(),
            ));
        }
        self.rows.iter().map(|r| read_json(&r.summary)).collect()
    }

    fn check_complete(&self) -> Result<()> {
        for (name, path) in self
            .artifacts
            .iter()
            .filter(|(k, _)| !k.starts_with("report/"))
        {
            if !path.exists() {
                return Err(Error::InvalidArgument(format!(
                    "artifact {name} missing at {}",
                    path.display()
                )));
            }
        }
        for r in &self.rows {
            if !r.summary.exists() || !r.results.exists() {
                return Err(Error::InvalidArgument(format!(
                    "results for {} are missing",
                    r.technique
                )));
            }
        }
        Ok(())
    }
}

/// One line of an attack stage's `results.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub index: usize,
    pub id: String,
    pub epsilon_used: f64,
    pub linf: f64,
    pub iterations: usize,
    pub attempts: usize,
    pub success: bool,
    pub removal: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surrogate_success: Option<bool>,
    /// BER against α and against β (bit kinds).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ber_alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ber_beta: Option<f64>,
    pub psnr: f64,
    pub ssim: f64,
    pub lpips_proxy: f64,
    pub mse: f64,
    pub cosine: f64,
}

impl ResultRecord {
    fn new(index: usize, r: &AttackResult) -> Self {
        Self {
            index,
            id: r.id.clone(),
            epsilon_used: r.epsilon_used,
            linf: r.delta.linf(),
            iterations: r.iterations_used,
            attempts: r.attempts,
            success: r.success,
            removal: r.removal,
            surrogate_success: r.surrogate_success,
            ber_alpha: r.ber_alpha,
            ber_beta: r.metrics.ber,
            psnr: r.metrics.psnr,
            ssim: r.metrics.ssim,
            lpips_proxy: r.metrics.lpips_proxy,
            mse: r.metrics.mse,
            cosine: r.metrics.cosine,
        }
    }
}

pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<ResultRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::Unreadable {
        path: path.to_path_buf(),
        source,
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
        })
        .collect()
}

/// Chosen sweep value per technique: the smallest whose ASR is within 2
/// percentage points of the best ASR seen for that technique.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub optimum: BTreeMap<String, f64>,
}

pub const OPTIMUM_TOLERANCE_PP: f64 = 2.0;

pub fn select_optimum(points: &[(f64, f64)]) -> Option<f64> {
    let best = points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let mut ok: Vec<f64> = points
        .iter()
        .filter(|p| p.1 >= best - OPTIMUM_TOLERANCE_PP)
        .map(|p| p.0)
        .collect();
    ok.sort_by(f64::total_cmp);
    ok.first().copied()
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(v).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(path, bytes).map_err(|source| Error::Unwritable {
        path: path.to_path_buf(),
        source,
    })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|source| Error::Unreadable {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|source| Error::Unwritable {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Serialize, Deserialize)]
struct StageStamp {
    stage: String,
    hash: String,
    inputs: serde_json::Value,
}

/// Per-model evaluation written by the `evaluate` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelEvaluation {
    pub model: String,
    pub role: String,
    /// Bit accuracy on the test split (bit kinds).
    pub bit_accuracy: Option<f64>,
    /// PSNR of watermarked versus cover on the test split.
    pub psnr: Option<f64>,
    /// Fine-tuned surrogates: agreement with held-out target pairs.
    pub heldout_accuracy: Option<f64>,
}

/// Runs stages of one experiment under an output directory. Stage outputs
/// live in `stages/<label>/<subject>/<hash prefix>/` and are reused when a
/// later run asks for the same hash.
pub struct Runner {
    cfg: ExperimentConfig,
    out: PathBuf,
    pool: rayon::ThreadPool,
    stages: Vec<StageRecord>,
    artifacts: BTreeMap<String, PathBuf>,
    log: bool,
}

/// Hash and directory of a finished stage.
pub struct Stage {
    pub hash: String,
    pub dir: PathBuf,
}

impl Runner {
    /// `cfg` is used after applying its scale factor.
    pub fn new(cfg: &ExperimentConfig, out: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        let workers = worker_count()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
        Ok(Self {
            cfg: cfg.scaled(),
            out: out.into(),
            pool,
            stages: Vec::new(),
            artifacts: BTreeMap::new(),
            log: false,
        })
    }

    /// Print one line per stage to stderr.
    pub fn verbose(mut self, on: bool) -> Self {
        self.log = on;
        self
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    fn seed(&self, label: &str) -> Seed {
        Seed(self.cfg.seed).derive(label)
    }

    fn stage(
        &mut self,
        label: &str,
        inputs: serde_json::Value,
        body: impl FnOnce(&Self, &Path) -> Result<()>,
    ) -> Result<Stage> {
        let canon =
            json!({ "stage": label, "inputs": inputs, "version": TOOLKIT_VERSION }).to_string();
        let hash = hex::encode(Sha256::digest(canon.as_bytes()));
        let dir = self.out.join("stages").join(label).join(&hash[..16]);
        let stamp = dir.join("stage.json");
        let done = stamp.exists() && read_json::<StageStamp>(&stamp).is_ok_and(|s| s.hash == hash);
        if !done {
            if self.log {
                eprintln!("[dlove] running {label}");
            }
            let wrap = |e: Error| Error::Stage {
                stage: label.to_string(),
                source: Box::new(e),
            };
            if dir.exists() {
                std::fs::remove_dir_all(&dir).map_err(|source| {
                    wrap(Error::Unwritable {
                        path: dir.clone(),
                        source,
                    })
                })?;
            }
            mkdir(&dir).map_err(wrap)?;
            body(self, &dir).map_err(wrap)?;
            write_json(
                &stamp,
                &StageStamp {
                    stage: label.into(),
                    hash: hash.clone(),
                    inputs,
                },
            )
            .map_err(wrap)?;
        } else if self.log {
            eprintln!("[dlove] reusing {label}");
        }
        if !self.stages.iter().any(|s| s.hash == hash) {
            self.stages.push(StageRecord {
                stage: label.into(),
                hash: hash.clone(),
                dir: dir.clone(),
                skipped: done,
            });
        }
        Ok(Stage { hash, dir })
    }

    fn dataset(
        &self,
        label: &str,
        count: usize,
        shape: crate::data::Shape,
        split: Split,
    ) -> Result<Dataset> {
        build_dataset(
            label,
            &self.cfg.data.source,
            count,
            shape,
            split,
            self.seed(label),
        )
    }

    pub fn train_target(&mut self, name: &str) -> Result<(Stage, Pipeline)> {
        let profile = self.cfg.profile(name)?;
        let label = format!("train-target/{name}");
        let d = &self.cfg.data;
        let inputs = json!({
            "profile": profile, "arch": self.cfg.arch, "train": self.cfg.target_train,
            "source": d.source, "train_count": d.train_count, "test_count": d.test_count,
            "seed": self.seed(&label).0,
        });
        let st = self.stage(&label, inputs, |r, dir| {
            let train = r.dataset(
                &format!("{label}/train"),
                r.cfg.data.train_count,
                profile.cover_shape,
                Split::Train,
            )?;
            let test = r.dataset(
                &format!("{label}/test"),
                r.cfg.data.test_count,
                profile.cover_shape,
                Split::Test,
            )?;
            let seed = r.seed(&label);
            let p = Pipeline::new(&profile, r.cfg.arch, seed.derive("init"))?;
            let (p, hist) =
                train_pipeline(p, &train, Some(&test), &r.cfg.target_train.with_seed(seed))?;
            save_pipeline(&p, dir.join("pipeline.ckpt"), json!({ "role": "target" }))?;
            write_json(&dir.join("history.json"), &hist)
        })?;
        let path = st.dir.join("pipeline.ckpt");
        self.artifacts
            .insert(format!("{label}/checkpoint"), path.clone());
        Ok((st, load_pipeline(path)?.0))
    }

    fn surrogate_profile(&self, name: &str) -> Result<TechniqueProfile> {
        if name == "common" {
            return Ok(self.common_spec()?.profile());
        }
        let mut p = self.cfg.profile(name)?;
        p.name = format!("{name}-surrogate");
        Ok(p)
    }

    fn common_spec(&self) -> Result<CommonSurrogateSpec> {
        Ok(CommonSurrogateSpec {
            io_shape: self.cfg.common.io_shape,
            wm_bits: self.cfg.common.wm_bits,
            member_targets: self
                .cfg
                .targets
                .iter()
                .map(|t| self.cfg.profile(t))
                .collect::<Result<_>>()?,
        })
    }

    /// Surrogate for one target, or the shared one when `name` is `common`.
    pub fn train_surrogate(&mut self, name: &str) -> Result<(Stage, Pipeline)> {
        let profile = self.surrogate_profile(name)?;
        let label = format!("train-surrogate/{name}");
        let d = &self.cfg.data;
        let inputs = json!({
            "profile": profile, "arch": self.cfg.arch, "train": self.cfg.surrogate_train,
            "source": d.source, "train_count": d.train_count, "test_count": d.test_count,
            "seed": self.seed(&label).0,
        });
        let st = self.stage(&label, inputs, |r, dir| {
            let train = r.dataset(
                &format!("{label}/train"),
                r.cfg.data.train_count,
                profile.cover_shape,
                Split::Train,
            )?;
            let test = r.dataset(
                &format!("{label}/test"),
                r.cfg.data.test_count,
                profile.cover_shape,
                Split::Test,
            )?;
            let cfg = r.cfg.surrogate_train.with_seed(r.seed(&label));
            let (p, hist) = if name == "common" {
                crate::surrogate::build_common_surrogate(
                    &r.common_spec()?,
                    r.cfg.arch,
                    &train,
                    Some(&test),
                    &cfg,
                )?
            } else {
                train_surrogate(&profile, r.cfg.arch, &train, Some(&test), &cfg)?
            };
            save_pipeline(
                &p,
                dir.join("pipeline.ckpt"),
                json!({ "role": "surrogate" }),
            )?;
            write_json(&dir.join("history.json"), &hist)
        })?;
        let path = st.dir.join("pipeline.ckpt");
        self.artifacts
            .insert(format!("{label}/checkpoint"), path.clone());
        Ok((st, load_pipeline(path)?.0))
    }

    pub fn harvest(&mut self, name: &str) -> Result<(Stage, Vec<AttackPair>)> {
        let (tst, target) = self.train_target(name)?;
        let label = format!("harvest/{name}");
        let n = self.cfg.data.harvest_count;
        let inputs = json!({ "target": tst.hash, "count": n, "source": self.cfg.data.source, "seed": self.seed(&label).0 });
        let st = self.stage(&label, inputs, |r, dir| {
            let covers = r.dataset(
                &format!("{label}/covers"),
                n,
                target.cover_shape(),
                Split::AttackPairs,
            )?;
            let pairs = harvest_pairs(&target, &covers, n, r.seed(&label))?;
            save_pairs(dir.join("pairs"), &pairs)
        })?;
        let path = st.dir.join("pairs");
        self.artifacts
            .insert(format!("{label}/pairs"), path.clone());
        Ok((st, load_pairs(path)?))
    }

    /// Fine-tuned attacker for `name`, or the pooled shared surrogate.
    pub fn finetune(&mut self, name: &str) -> Result<(Stage, Pipeline)> {
        let label = format!("finetune/{name}");
        let (sst, surrogate) = self.train_surrogate(name)?;
        let mut harvested = Vec::new();
        let members: Vec<String> = if name == "common" {
            self.cfg.targets.clone()
        } else {
            vec![name.to_string()]
        };
        for m in &members {
            let (h, pairs) = self.harvest(m)?;
            harvested.push((m.clone(), h.hash, pairs));
        }
        let mut section = self.cfg.finetune.clone();
        if name == "common" {
            section.num_pairs = self.cfg.common.pairs_per_member * members.len();
        }
        let hashes: Vec<&String> = harvested.iter().map(|h| &h.1).collect();
        let budget = section.with_seed(self.seed(&label));
        let inputs = json!({ "surrogate": sst.hash, "harvest": hashes, "budget": budget, "common": name == "common" });
        let st = self.stage(&label, inputs, |r, dir| {
            let pairs: Vec<AttackPair> = if name == "common" {
                let spec = r.common_spec()?;
                let per = r.cfg.common.pairs_per_member;
                let pools = harvested
                    .iter()
                    .map(|(_, _, p)| spec.pool(&p[..per]))
                    .collect::<Result<Vec<_>>>()?;
                (0..per)
                    .flat_map(|i| pools.iter().map(move |p| p[i].clone()))
                    .collect()
            } else {
                harvested[0].2.clone()
            };
            let (p, rep) = finetune_decoder(surrogate, &pairs, &budget)?;
            save_pipeline(
                &p,
                dir.join("pipeline.ckpt"),
                json!({ "role": "finetuned-surrogate" }),
            )?;
            let members = member_accuracy(&p, &pairs, &rep)?;
            write_json(
                &dir.join("report.json"),
                &json!({ "finetune": rep, "heldout_by_member": members }),
            )
        })?;
        let path = st.dir.join("pipeline.ckpt");
        self.artifacts
            .insert(format!("{label}/checkpoint"), path.clone());
        Ok((st, load_pipeline(path)?.0))
    }

    /// Attack stage for one target under the configured mode.
    pub fn attack(&mut self, name: &str, cfg: &AttackConfig) -> Result<RowSource> {
        let (tst, target) = self.train_target(name)?;
        let attacker = match self.cfg.mode {
            Mode::Whitebox => None,
            Mode::BlackboxPerTarget => Some(self.finetune(name)?),
            Mode::BlackboxCommon => Some(self.finetune("common")?),
        };
        let label = format!("attack/{name}");
        let count = self.cfg.data.attack_count;
        let ft = (self.cfg.mode != Mode::Whitebox).then(|| match self.cfg.mode {
            Mode::BlackboxCommon => (
                self.cfg.finetune.epochs,
                self.cfg.common.pairs_per_member * self.cfg.targets.len(),
            ),
            _ => (self.cfg.finetune.epochs, self.cfg.finetune.num_pairs),
        });
        let inputs = json!({
            "target": tst.hash, "attacker": attacker.as_ref().map(|a| &a.0.hash), "attack": cfg,
            "count": count, "source": self.cfg.data.source, "seed": self.seed(&label).0,
            "write_images": self.cfg.write_images,
        });
        let st = self.stage(&label, inputs, |r, dir| {
            let covers = r.dataset(
                &format!("{label}/covers"),
                count,
                target.cover_shape(),
                Split::Test,
            )?;
            let seed = r.seed(&label);
            let results: Vec<AttackResult> = r.pool.install(|| {
                covers
                    .items()
                    .par_iter()
                    .enumerate()
                    .map(|(i, it)| {
                        let (alpha, beta) = attack_payloads(&target.profile.watermark, seed, i)?;
                        let w = target.embed(&it.image, &alpha)?;
                        let one = |c: &AttackConfig| match &attacker {
                            None => attack_whitebox(&target, &w, &alpha, &beta, c),
                            Some((_, s)) => attack_blackbox(s, &target, &w, &alpha, &beta, c),
                        };
                        let mut res = if cfg.escalation.is_some() {
                            escalate(one, cfg)?
                        } else {
                            one(cfg)?
                        };
                        res.id = it.id.clone();
                        Ok(res)
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            let mut lines = String::new();
            for (i, res) in results.iter().enumerate() {
                lines.push_str(
                    &serde_json::to_string(&ResultRecord::new(i, res)).expect("record serializes"),
                );
                lines.push('\n');
            }
            let rpath = dir.join("results.jsonl");
            std::fs::write(&rpath, lines).map_err(|source| Error::Unwritable {
                path: rpath,
                source,
            })?;
            if r.cfg.write_images {
                mkdir(&dir.join("attacked"))?;
                mkdir(&dir.join("residual"))?;
                for (i, (res, it)) in results.iter().zip(covers.items()).enumerate() {
                    let stem = format!("{i:05}");
                    save_image(
                        &res.attacked,
                        dir.join("attacked").join(format!("{stem}.png")),
                    )?;
                    save_image(
                        &metrics::residual(&it.image, &res.attacked, 10.0)?,
                        dir.join("residual").join(format!("{stem}.png")),
                    )?;
                }
            }
            let mut row = metrics::aggregate(name, cfg.epsilon, &results)?;
            if let Some((e, n)) = ft {
                row.epoch = Some(e);
                row.images = Some(n);
            }
            write_json(&dir.join("summary.json"), &row)
        })?;
        let source = RowSource {
            technique: name.to_string(),
            results: st.dir.join("results.jsonl"),
            summary: st.dir.join("summary.json"),
            sweep_value: None,
        };
        self.artifacts
            .insert(format!("{label}/results"), source.results.clone());
        Ok(source)
    }

    /// Run every stage the mode needs, up to and including `until`.
    pub fn run_until(&mut self, until: StageKind) -> Result<Vec<RowSource>> {
        let cfg = self.cfg.clone();
        let common = cfg.mode == Mode::BlackboxCommon;
        let mut rows = Vec::new();
        for name in &cfg.targets {
            self.train_target(name)?;
        }
        if until == StageKind::TrainTarget
            || cfg.mode == Mode::Whitebox && until < StageKind::Attack
        {
            return Ok(rows);
        }
        if until >= StageKind::TrainSurrogate && cfg.mode != Mode::Whitebox {
            if common {
                self.train_surrogate("common")?;
            } else {
                for name in &cfg.targets {
                    self.train_surrogate(name)?;
                }
            }
        }
        if until >= StageKind::Harvest && cfg.mode != Mode::Whitebox {
            for name in &cfg.targets {
                self.harvest(name)?;
            }
        }
        if until >= StageKind::Finetune && cfg.mode != Mode::Whitebox {
            if common {
                self.finetune("common")?;
            } else {
                for name in &cfg.targets {
                    self.finetune(name)?;
                }
            }
        }
        if until >= StageKind::Attack {
            for name in &cfg.targets {
                rows.push(self.attack(name, &cfg.attack)?);
            }
        }
        Ok(rows)
    }

    /// Test-split quality of every trained model the mode involves.
    pub fn evaluate(&mut self) -> Result<Vec<ModelEvaluation>> {
        self.run_until(StageKind::Finetune)?;
        let cfg = self.cfg.clone();
        let mut out = Vec::new();
        let eval = |r: &Self,
                    role: &str,
                    model: &str,
                    p: &Pipeline,
                    heldout: Option<f64>|
         -> Result<ModelEvaluation> {
            let test = r.dataset(
                &format!("evaluate/{model}"),
                cfg.data.test_count,
                p.cover_shape(),
                Split::Test,
            )?;
            let wms = eval_watermarks(
                &p.profile.watermark,
                &test,
                r.seed(&format!("evaluate/{model}")),
            )?;
            let (acc, psnr) = evaluate_pipeline(p, &test, &wms)?;
            Ok(ModelEvaluation {
                model: model.into(),
                role: role.into(),
                bit_accuracy: acc,
                psnr: Some(psnr),
                heldout_accuracy: heldout,
            })
        };
        for name in &cfg.targets {
            let (_, t) = self.train_target(name)?;
            out.push(eval(self, "target", name, &t, None)?);
        }
        let attackers: Vec<String> = match cfg.mode {
            Mode::Whitebox => vec![],
            Mode::BlackboxPerTarget => cfg.targets.clone(),
            Mode::BlackboxCommon => vec!["common".into()],
        };
        for name in attackers {
            let (_, s) = self.train_surrogate(&name)?;
            out.push(eval(self, "surrogate", &name, &s, None)?);
            let (st, f) = self.finetune(&name)?;
            let rep: serde_json::Value = read_json(&st.dir.join("report.json"))?;
            let held = rep["finetune"]["heldout_accuracy"].as_f64();
            let mut e = eval(self, "finetuned-surrogate", &name, &f, held)?;
            e.bit_accuracy = None;
            e.psnr = None;
            out.push(e);
        }
        let path = self.out.join("evaluation.json");
        mkdir(&self.out)?;
        write_json(&path, &out)?;
        self.artifacts.insert("evaluation".into(), path);
        Ok(out)
    }

    fn manifest(
        &self,
        started: u64,
        rows: Vec<RowSource>,
        sweep: Option<SweepSummary>,
    ) -> RunManifest {
        RunManifest {
            config_hash: self.cfg.hash(),
            toolkit_version: TOOLKIT_VERSION.into(),
            mode: self.cfg.mode,
            started_unix: started,
            finished_unix: unix_now(),
            stages: self.stages.clone(),
            artifacts: self.artifacts.clone(),
            rows,
            sweep,
        }
    }

    fn finish(
        &mut self,
        started: u64,
        rows: Vec<RowSource>,
        sweep: Option<SweepSummary>,
        stem: &str,
    ) -> Result<RunManifest> {
        mkdir(&self.out)?;
        let cfg_path = self.out.join(CONFIG_FILE);
        std::fs::write(&cfg_path, self.cfg.to_toml()?).map_err(|source| Error::Unwritable {
            path: cfg_path.clone(),
            source,
        })?;
        self.artifacts.insert("config".into(), cfg_path);
        let mut m = self.manifest(started, rows, sweep);
        if !m.rows.is_empty() {
            let rows = m.load_rows()?;
            for (fmt, path) in write_reports(&self.out, stem, &rows, m.sweep.as_ref())? {
                m.artifacts
                    .insert(format!("report/{stem}.{}", fmt.extension()), path);
            }
        }
        m.finished_unix = unix_now();
        write_json(&self.out.join(MANIFEST_FILE), &m)?;
        Ok(m)
    }

    /// Run the stage graph up to `until` and write the manifest; reports
    /// are rendered when attacks ran.
    pub fn run(&mut self, until: StageKind) -> Result<RunManifest> {
        let started = unix_now();
        let rows = self.run_until(until)?;
        self.finish(started, rows, None, "report")
    }

    /// One report row per value (and target); stages shared between
    /// values are computed once.
    pub fn sweep(&mut self, axis: SweepAxis, values: &[f64]) -> Result<RunManifest> {
        if values.is_empty() {
            return Err(Error::Config("sweep needs at least one value".into()));
        }
        let started = unix_now();
        let base = self.cfg.clone();
        let mut probe = base.clone();
        probe.sweep = Some(SweepConfig {
            axis,
            values: values.to_vec(),
        });
        probe.validate()?;
        if axis == SweepAxis::FinetunePairs {
            let limit = base.data.harvest_count;
            if let Some(v) = values.iter().find(|&&v| v as usize > limit) {
                return Err(Error::Config(format!(
                    "sweep value {v} exceeds data.harvest_count {limit}"
                )));
            }
        }
        let mut rows = Vec::new();
        let mut points: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        for &v in values {
            let mut c = base.clone();
            match axis {
                SweepAxis::Epsilon => {
                    c.attack.epsilon = v;
                    if let Some(e) = c.attack.escalation.as_mut() {
                        e.epsilon_max = e.epsilon_max.max(v);
                    }
                }
                SweepAxis::FinetuneEpochs => c.finetune.epochs = v as usize,
                SweepAxis::FinetunePairs => {
                    if c.mode == Mode::BlackboxCommon {
                        c.common.pairs_per_member = v as usize;
                    } else {
                        c.finetune.num_pairs = v as usize;
                    }
                }
            }
            c.validate()?;
            self.cfg = c;
            for mut src in self.run_until(StageKind::Attack)? {
                let row: AggregateRow = read_json(&src.summary)?;
                points
                    .entry(src.technique.clone())
                    .or_default()
                    .push((v, row.asr));
                src.sweep_value = Some(v);
                rows.push(src);
            }
        }
        self.cfg = base;
        let optimum = points
            .iter()
            .filter_map(|(t, p)| select_optimum(p).map(|v| (t.clone(), v)))
            .collect();
        let summary = SweepSummary {
            axis,
            values: values.to_vec(),
            optimum,
        };
        self.finish(started, rows, Some(summary), "sweep")
    }
}

/// Seeded α and β for attack image `i`; β never equals α.
pub fn attack_payloads(
    spec: &WatermarkSpec,
    seed: Seed,
    i: usize,
) -> Result<(Watermark, Watermark)> {
    let i = i as u64;
    match *spec {
        WatermarkSpec::Bits { n } => {
            let alpha = sample_bit_watermark(n, seed.derive_index("alpha", i))?;
            let mut beta = sample_bit_watermark(n, seed.derive_index("beta", i))?;
            if beta == alpha {
                let mut b = beta.bits().expect("bits").bits().to_vec();
                b[0] = !b[0];
                beta = Watermark::Bits(crate::data::BitString::new(b)?);
            }
            Ok((alpha, beta))
        }
        WatermarkSpec::Image {
            height,
            width,
            channels,
        } => {
            let s = (height, width, channels);
            Ok((
                Watermark::Image(synthetic_image(s, seed.derive_index("alpha", i))?),
                Watermark::Image(synthetic_image(s, seed.derive_index("beta", i))?),
            ))
        }
    }
}

fn member_accuracy(
    p: &Pipeline,
    pairs: &[AttackPair],
    rep: &FinetuneReport,
) -> Result<BTreeMap<String, f64>> {
    let held: std::collections::BTreeSet<&String> = rep.heldout_ids.iter().collect();
    let mut by: BTreeMap<String, Vec<&AttackPair>> = BTreeMap::new();
    for pair in pairs.iter().filter(|p| held.contains(&p.id)) {
        by.entry(pair.source.clone()).or_default().push(pair);
    }
    by.into_iter()
        .map(|(k, v)| Ok((k, pair_accuracy(p, &v)?)))
        .collect()
}

/// Render an existing run's rows without recomputing anything.
pub fn report(
    manifest: &RunManifest,
    format: ReportFormat,
    out: impl AsRef<Path>,
) -> Result<PathBuf> {
    manifest.check_complete()?;
    let rows = manifest.load_rows()?;
    let stem = if manifest.sweep.is_some() {
        "sweep"
    } else {
        "report"
    };
    let path = out.as_ref().join(format!("{stem}.{}", format.extension()));
    let text = render(&rows, format, manifest.sweep.as_ref())?;
    std::fs::write(&path, text).map_err(|source| Error::Unwritable {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}
