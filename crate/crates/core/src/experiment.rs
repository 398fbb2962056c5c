//! Experiment configuration, run grids, and their file outputs.
//!
//! Every grid command writes one CSV with a row per run and one summary CSV
//! derived from those rows alone, plus a `manifest.toml` indexing the
//! artifacts. CSVs contain no timings, so identical configs and seeds give
//! byte-identical files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harmonizer::{
    reformulated_gradient_curve, CurveSource, GradientHistogram, HarmonizerConfig, HarmonizerMode, Partition,
};
use crate::metrics::{Flag, MetricsConfig, MetricsReport};
use crate::objective::{LossName, LossParams, LossSpec};
use crate::pipeline::{kfold_split, run, RunOutcome, RunSpec};
use crate::sim::{generate_corpus, read_corpus_records, write_corpus_records, Corpus, CorpusSpec};
use crate::train::{write_histogram_rows, TrainConfig};

/// Everything an experiment needs, read from a TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusSpec,
    /// Read scenes from this record file instead of generating them. The
    /// scene spec still comes from `corpus.scene`.
    pub corpus_file: Option<PathBuf>,
    /// Losses for `compare` and `sweep-eta`.
    pub losses: Vec<LossName>,
    /// Adds DGHM-C* to `compare`.
    pub include_dghm_star: bool,
    /// Loss used by `train`.
    pub train_loss: LossName,
    pub loss_params: LossParams,
    pub train: TrainConfig,
    pub metrics: MetricsConfig,
    /// Annotation drop rate for `train`, `compare` and `ablate`.
    pub eta: f64,
    pub eta_grid: Vec<f64>,
    /// `[mu_n, mu_c]` pairs for the first ablation table (lambda from
    /// `loss_params.harmonizer`).
    pub mu_grid: Vec<[f64; 2]>,
    /// Lambda values for the second ablation table (mu from
    /// `loss_params.harmonizer`).
    pub lambda_grid: Vec<f64>,
    pub folds: usize,
    pub fold_seed: u64,
    /// Test folds for `compare`; empty means every fold.
    pub compare_folds: Vec<usize>,
    /// Test folds for `ablate` and `sweep-eta`.
    pub grid_folds: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Reformulated-gradient samples per curve in `export-figs`.
    pub curve_samples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            corpus: CorpusSpec::default(),
            corpus_file: None,
            losses: vec![LossName::Ce, LossName::Focal, LossName::GhmC, LossName::Sce, LossName::DghmC],
            include_dghm_star: false,
            train_loss: LossName::DghmC,
            loss_params: LossParams::default(),
            train: TrainConfig::default(),
            metrics: MetricsConfig::default(),
            eta: 0.7,
            eta_grid: vec![0.2, 0.3, 0.4, 0.5, 0.6, 0.7],
            mu_grid: vec![[1.0, 1.0], [2.0, 1.0], [1.0, 0.5], [2.0, 0.5], [3.0, 0.5], [2.0, 0.25]],
            lambda_grid: vec![0.7, 0.8, 0.9],
            folds: 5,
            fold_seed: 0,
            compare_folds: Vec::new(),
            grid_folds: vec![0],
            seeds: vec![0, 1, 2, 3, 4],
            curve_samples: 201,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        ExperimentConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::config(what.to_string()));
        if self.losses.is_empty() {
            return bad("`losses` must not be empty");
        }
        if self.eta_grid.is_empty() || self.mu_grid.is_empty() || self.lambda_grid.is_empty() {
            return bad("`eta_grid`, `mu_grid` and `lambda_grid` must not be empty");
        }
        if self.seeds.is_empty() {
            return bad("`seeds` must not be empty");
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return bad("`seeds` must be distinct");
        }
        if self.folds < 2 {
            return bad("`folds` must be at least 2");
        }
        if self.compare_folds.iter().chain(&self.grid_folds).any(|&f| f >= self.folds) {
            return bad("fold indices must be below `folds`");
        }
        if self.grid_folds.is_empty() {
            return bad("`grid_folds` must not be empty");
        }
        if self
            .eta_grid
            .iter()
            .chain(std::iter::once(&self.eta))
            .any(|e| !(0.0..=1.0).contains(e))
        {
            return bad("eta values must lie in [0, 1]");
        }
        if self.curve_samples < 2 {
            return bad("`curve_samples` must be at least 2");
        }
        let wrap = |e: Error| Error::config(e.to_string());
        self.corpus.scene.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        self.metrics.validate().map_err(wrap)?;
        for name in self.compare_losses() {
            name.with_params(&self.loss_params).validate().map_err(wrap)?;
        }
        for &[mu_n, mu_c] in &self.mu_grid {
            self.harmonizer_with(mu_n, mu_c, self.loss_params.harmonizer.lambda)
                .validate()
                .map_err(wrap)?;
        }
        for &lambda in &self.lambda_grid {
            let h = &self.loss_params.harmonizer;
            self.harmonizer_with(h.mu_n, h.mu_c, lambda).validate().map_err(wrap)?;
        }
        Ok(())
    }

    /// Short stable digest of the config. Paths and the output directory do
    /// not take part, so the same experiment hashes the same anywhere.
    pub fn hash(&self) -> String {
        let canonical = ExperimentConfig {
            corpus_file: None,
            ..self.clone()
        };
        let json = serde_json::to_string(&canonical).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..8].iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn compare_losses(&self) -> Vec<LossName> {
        let mut v = self.losses.clone();
        if self.include_dghm_star && !v.contains(&LossName::DghmCStar) {
            v.push(LossName::DghmCStar);
        }
        v
    }

    fn harmonizer_with(&self, mu_n: f64, mu_c: f64, lambda: f64) -> HarmonizerConfig {
        HarmonizerConfig {
            mode: HarmonizerMode::Dghm,
            mu_n,
            mu_c,
            lambda,
            ..self.loss_params.harmonizer
        }
    }

    pub fn load_corpus(&self) -> Result<Corpus> {
        match &self.corpus_file {
            None => generate_corpus(&self.corpus),
            Some(path) => {
                let file = fs::File::open(path).map_err(|_| Error::MissingArtifact(path.clone()))?;
                let scenes = read_corpus_records(BufReader::new(file), &path.display().to_string())?;
                Ok(Corpus {
                    spec: self.corpus.scene.clone(),
                    seed: self.corpus.seed,
                    scenes,
                })
            }
        }
    }
}

/// One finished run as it appears in a results CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub config_hash: String,
    pub loss: String,
    pub eta: f64,
    /// Outlier settings, for harmonized losses only.
    pub outlier: Option<[f64; 3]>,
    pub fold: usize,
    pub seed: u64,
    pub report: MetricsReport,
    pub anchor_corruption: f64,
    /// Not written to CSV.
    pub wall_seconds: f64,
}

const RUN_COLUMNS: &str = "config_hash,loss,eta,mu_n,mu_c,lambda,fold,seed,\
precision,nfps,recall,froc,t_recall,r_recall,threshold,anchor_corruption,flags";

const METRIC_NAMES: [&str; 6] = ["precision", "nfps", "recall", "froc", "t_recall", "r_recall"];

impl RunRecord {
    fn metrics(&self) -> [f64; 6] {
        let r = &self.report;
        [r.precision, r.nfps, r.recall, r.froc, r.t_recall, r.r_recall]
    }

    fn group_key(&self) -> String {
        let outlier = self
            .outlier
            .map_or(",,".to_string(), |[a, b, c]| format!("{a},{b},{c}"));
        format!("{},{},{}", self.loss, self.eta, outlier)
    }

    fn to_csv(&self) -> String {
        let flags: Vec<&str> = self.report.flags.iter().map(|f| f.name()).collect();
        let m = self.metrics();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.config_hash,
            self.group_key(),
            self.fold,
            self.seed,
            m[0],
            m[1],
            m[2],
            m[3],
            m[4],
            m[5],
            self.report.threshold,
            self.anchor_corruption,
            flags.join(";"),
        )
    }

    fn from_csv(line: &str, file: &str, lineno: usize) -> Result<RunRecord> {
        let err = |reason: String| Error::Parse {
            file: file.to_string(),
            line: lineno,
            reason,
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 17 {
            return Err(err(format!("expected 17 fields, found {}", f.len())));
        }
        let num = |i: usize| -> Result<f64> { f[i].parse().map_err(|e| err(format!("field {}: {e}", i + 1))) };
        let outlier = if f[3].is_empty() {
            None
        } else {
            Some([num(3)?, num(4)?, num(5)?])
        };
        let flags = if f[16].is_empty() {
            Vec::new()
        } else {
            f[16].split(';').map(str::parse).collect::<Result<Vec<Flag>>>()?
        };
        Ok(RunRecord {
            config_hash: f[0].to_string(),
            loss: f[1].to_string(),
            eta: num(2)?,
            outlier,
            fold: f[6].parse().map_err(|e| err(format!("fold: {e}")))?,
            seed: f[7].parse().map_err(|e| err(format!("seed: {e}")))?,
            report: MetricsReport {
                precision: num(8)?,
                nfps: num(9)?,
                recall: num(10)?,
                froc: num(11)?,
                t_recall: num(12)?,
                r_recall: num(13)?,
                threshold: num(14)?,
                flags,
            },
            anchor_corruption: num(15)?,
            wall_seconds: 0.0,
        })
    }
}

pub fn write_runs_csv(records: &[RunRecord], mut out: impl Write) -> Result<()> {
    writeln!(out, "{RUN_COLUMNS}")?;
    for r in records {
        writeln!(out, "{}", r.to_csv())?;
    }
    Ok(())
}

pub fn read_runs_csv(input: impl BufRead, file: &str) -> Result<Vec<RunRecord>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if i == 0 {
            if line != RUN_COLUMNS {
                return Err(Error::Parse {
                    file: file.to_string(),
                    line: 1,
                    reason: "unexpected header".into(),
                });
            }
            continue;
        }
        if !line.is_empty() {
            out.push(RunRecord::from_csv(&line, file, i + 1)?);
        }
    }
    Ok(out)
}

/// Mean and sample standard deviation of one metric over a group.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stat {
    pub mean: f64,
    /// `None` for a single run.
    pub std: Option<f64>,
}

fn stat(xs: &[f64]) -> Stat {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.len() > 1).then(|| (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    Stat { mean, std }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub config_hash: String,
    /// `loss,eta,mu_n,mu_c,lambda` exactly as in the run rows.
    pub key: String,
    pub runs: usize,
    pub stats: [Stat; 6],
}

impl SummaryRow {
    pub fn loss(&self) -> &str {
        self.key.split(',').next().unwrap_or("")
    }

    pub fn stat(&self, metric: &str) -> Option<Stat> {
        METRIC_NAMES.iter().position(|m| *m == metric).map(|i| self.stats[i])
    }
}

/// Groups runs by `(loss, eta, mu_n, mu_c, lambda)` in order of first
/// appearance. Rows from different configs are refused.
pub fn summarize(records: &[RunRecord]) -> Result<Vec<SummaryRow>> {
    let Some(first) = records.first() else {
        return Ok(Vec::new());
    };
    if let Some(other) = records.iter().find(|r| r.config_hash != first.config_hash) {
        return Err(Error::MixedConfig(first.config_hash.clone(), other.config_hash.clone()));
    }
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        let key = r.group_key();
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    Ok(order
        .into_iter()
        .map(|key| {
            let rows = &groups[&key];
            let stats = std::array::from_fn(|i| stat(&rows.iter().map(|r| r.metrics()[i]).collect::<Vec<_>>()));
            SummaryRow {
                config_hash: first.config_hash.clone(),
                key,
                runs: rows.len(),
                stats,
            }
        })
        .collect())
}

pub fn write_summary_csv(rows: &[SummaryRow], mut out: impl Write) -> Result<()> {
    let mut header = String::from("config_hash,loss,eta,mu_n,mu_c,lambda,runs");
    for m in METRIC_NAMES {
        let _ = write!(header, ",{m}_mean,{m}_std");
    }
    writeln!(out, "{header}")?;
    for r in rows {
        let mut line = format!("{},{},{}", r.config_hash, r.key, r.runs);
        for s in &r.stats {
            let std = s.std.map_or(String::new(), |v| v.to_string());
            let _ = write!(line, ",{},{std}", s.mean);
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Where outputs go and whether existing files may be replaced.
#[derive(Clone, Debug)]
pub struct OutputDir {
    pub root: PathBuf,
    pub force: bool,
}

impl OutputDir {
    pub fn new(root: impl Into<PathBuf>, force: bool) -> Self {
        OutputDir {
            root: root.into(),
            force,
        }
    }

    /// Fails if any of `names` already exists and `force` is off; creates
    /// the directory otherwise.
    pub fn claim(&self, names: &[&str]) -> Result<()> {
        if !self.force {
            for n in names {
                let p = self.root.join(n);
                if p.exists() {
                    return Err(Error::OutputExists(p));
                }
            }
        }
        fs::create_dir_all(&self.root)?;
        Ok(())
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn create(&self, name: &str) -> Result<BufWriter<fs::File>> {
        Ok(BufWriter::new(fs::File::create(self.path(name))?))
    }

    fn write_with(&self, name: &str, f: impl FnOnce(&mut BufWriter<fs::File>) -> Result<()>) -> Result<()> {
        let mut w = self.create(name)?;
        f(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

fn write_manifest(out: &OutputDir, command: &str, cfg: &ExperimentConfig, artifacts: &[&str], extra: &str) -> Result<()> {
    out.write_with("manifest.toml", |w| {
        writeln!(w, "command = \"{command}\"")?;
        writeln!(w, "config_hash = \"{}\"", cfg.hash())?;
        let list: Vec<String> = artifacts.iter().map(|a| format!("\"{a}\"")).collect();
        writeln!(w, "artifacts = [{}]", list.join(", "))?;
        w.write_all(extra.as_bytes())?;
        writeln!(w, "\n[config]")?;
        w.write_all(cfg.to_toml().as_bytes())?;
        Ok(())
    })
}

/// `gen`: the corpus record file and a manifest of its spec.
pub fn cmd_gen(cfg: &ExperimentConfig, out: &OutputDir) -> Result<Corpus> {
    out.claim(&["corpus.txt", "corpus_manifest.toml"])?;
    let corpus = generate_corpus(&cfg.corpus)?;
    out.write_with("corpus.txt", |w| write_corpus_records(&corpus.scenes, w))?;
    out.write_with("corpus_manifest.toml", |w| {
        writeln!(w, "format = \"dghm-corpus-1\"")?;
        writeln!(w, "file = \"corpus.txt\"\n")?;
        w.write_all(toml::to_string(&cfg.corpus).expect("spec serializes").as_bytes())?;
        Ok(())
    })?;
    Ok(corpus)
}

/// `split`: the fold of every scene.
pub fn cmd_split(cfg: &ExperimentConfig, out: &OutputDir) -> Result<Vec<usize>> {
    out.claim(&["folds.csv"])?;
    let corpus = cfg.load_corpus()?;
    let folds = kfold_split(&corpus.scenes, cfg.folds, cfg.fold_seed)?;
    out.write_with("folds.csv", |w| {
        writeln!(w, "scene_id,class,fold")?;
        for (s, f) in corpus.scenes.iter().zip(&folds) {
            writeln!(w, "{},{},{f}", s.id, s.class.tag())?;
        }
        Ok(())
    })?;
    Ok(folds)
}

const TRAIN_ARTIFACTS: [&str; 8] = [
    "model.ckpt",
    "train_log.csv",
    "epoch_histograms.csv",
    "final_histograms.csv",
    "report.txt",
    "removed.csv",
    "run.toml",
    "manifest.toml",
];

/// `train`: one run of `train_loss` at `eta` on the first grid fold.
pub fn cmd_train(cfg: &ExperimentConfig, seed: u64, out: &OutputDir) -> Result<RunOutcome> {
    out.claim(&TRAIN_ARTIFACTS)?;
    let corpus = cfg.load_corpus()?;
    let folds = kfold_split(&corpus.scenes, cfg.folds, cfg.fold_seed)?;
    let loss = cfg.train_loss.with_params(&cfg.loss_params);
    let spec = RunSpec {
        loss,
        eta: cfg.eta,
        seed,
        test_fold: cfg.grid_folds[0],
    };
    let started = Instant::now();
    let outcome = run(&corpus, &folds, &spec, &cfg.train, &cfg.metrics)?;
    let wall = started.elapsed().as_secs_f64();
    out.write_with("model.ckpt", |w| outcome.model.write_checkpoint(w))?;
    out.write_with("train_log.csv", |w| outcome.log.write_csv(w, "epoch_histograms.csv"))?;
    out.write_with("epoch_histograms.csv", |w| outcome.log.write_histograms_csv(w))?;
    out.write_with("final_histograms.csv", |w| write_final_histograms(&outcome.final_histograms, w))?;
    out.write_with("report.txt", |w| outcome.report.write_to(w))?;
    out.write_with("removed.csv", |w| {
        writeln!(w, "scene_id,box_index")?;
        for r in &outcome.removed {
            writeln!(w, "{},{}", r.scene_id, r.box_index)?;
        }
        Ok(())
    })?;
    out.write_with("run.toml", |w| {
        writeln!(w, "loss = \"{}\"", cfg.train_loss)?;
        writeln!(w, "eta = {}", cfg.eta)?;
        writeln!(w, "seed = {seed}")?;
        writeln!(w, "fold = {}", spec.test_fold)?;
        writeln!(w, "pool_size = {}", pool_size(&outcome.final_histograms))?;
        writeln!(w, "anchor_corruption = {}", outcome.anchor_corruption_rate)?;
        Ok(())
    })?;
    write_manifest(
        out,
        "train",
        cfg,
        &TRAIN_ARTIFACTS[..7],
        &format!("wall_seconds = {wall}\n"),
    )?;
    Ok(outcome)
}

fn pool_size(hists: &BTreeMap<Partition, GradientHistogram>) -> u64 {
    [Partition::ApPositive, Partition::ApNegative, Partition::NpNegative]
        .iter()
        .filter_map(|p| hists.get(p))
        .map(GradientHistogram::total)
        .sum()
}

/// `partition,bin,lower,upper,count`
pub fn write_final_histograms(hists: &BTreeMap<Partition, GradientHistogram>, mut out: impl Write) -> Result<()> {
    writeln!(out, "partition,bin,lower,upper,count")?;
    let mut buf = Vec::new();
    write_histogram_rows(&mut buf, "", hists)?;
    for line in String::from_utf8(buf).expect("ascii").lines() {
        writeln!(out, "{}", line.trim_start_matches(','))?;
    }
    Ok(())
}

pub fn read_final_histograms(input: impl BufRead, file: &str) -> Result<BTreeMap<Partition, GradientHistogram>> {
    let mut counts: BTreeMap<Partition, Vec<u64>> = BTreeMap::new();
    for (i, line) in input.lines().enumerate().skip(1) {
        let line = line?;
        let err = |reason: &str| Error::Parse {
            file: file.to_string(),
            line: i + 1,
            reason: reason.to_string(),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(err("expected 5 fields"));
        }
        let part = Partition::from_name(f[0]).ok_or_else(|| err("unknown partition"))?;
        let bin: usize = f[1].parse().map_err(|_| err("bad bin"))?;
        let count: u64 = f[4].parse().map_err(|_| err("bad count"))?;
        let v = counts.entry(part).or_default();
        if bin != v.len() {
            return Err(err("bins out of order"));
        }
        v.push(count);
    }
    Ok(counts
        .into_iter()
        .map(|(p, c)| (p, GradientHistogram::from_counts(c)))
        .collect())
}

/// Runs every job, `jobs` at a time, returning records in job order.
fn run_grid(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    folds: &[usize],
    jobs: usize,
    specs: &[(String, RunSpec)],
) -> Result<Vec<RunRecord>> {
    let hash = cfg.hash();
    let work = |(name, spec): &(String, RunSpec)| -> Result<RunRecord> {
        let started = Instant::now();
        let outcome = run(corpus, folds, spec, &cfg.train, &cfg.metrics)?;
        let wall_seconds = started.elapsed().as_secs_f64();
        info!(
            "{name} eta={} fold={} seed={}: froc {:.4}",
            spec.eta, spec.test_fold, spec.seed, outcome.report.froc
        );
        Ok(RunRecord {
            config_hash: hash.clone(),
            loss: name.clone(),
            eta: spec.eta,
            outlier: match spec.loss {
                LossSpec::Harmonized(h) if h.mode != HarmonizerMode::Ghm => Some([h.mu_n, h.mu_c, h.lambda]),
                _ => None,
            },
            fold: spec.test_fold,
            seed: spec.seed,
            report: outcome.report,
            anchor_corruption: outcome.anchor_corruption_rate,
            wall_seconds,
        })
    };
    let results: Vec<Result<RunRecord>> = if jobs <= 1 {
        specs.iter().map(work).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;
        pool.install(|| specs.par_iter().map(work).collect())
    };
    results.into_iter().collect()
}

fn timing_section(records: &[RunRecord]) -> String {
    let total: f64 = records.iter().map(|r| r.wall_seconds).sum();
    format!("runs = {}\nwall_seconds_total = {total}\n", records.len())
}

fn write_table(out: &OutputDir, stem: &str, records: &[RunRecord]) -> Result<Vec<SummaryRow>> {
    let summary = summarize(records)?;
    out.write_with(&format!("{stem}.csv"), |w| write_runs_csv(records, w))?;
    out.write_with(&format!("{stem}_summary.csv"), |w| write_summary_csv(&summary, w))?;
    Ok(summary)
}

/// Result of one grid command.
pub struct GridOutput {
    pub tables: Vec<(String, Vec<RunRecord>, Vec<SummaryRow>)>,
}

fn grid_setup(cfg: &ExperimentConfig) -> Result<(Corpus, Vec<usize>)> {
    let corpus = cfg.load_corpus()?;
    let folds = kfold_split(&corpus.scenes, cfg.folds, cfg.fold_seed)?;
    Ok((corpus, folds))
}

fn finish_grid(
    out: &OutputDir,
    cfg: &ExperimentConfig,
    command: &str,
    tables: Vec<(String, Vec<RunRecord>)>,
) -> Result<GridOutput> {
    let mut names = Vec::new();
    let mut done = Vec::new();
    let mut all = Vec::new();
    for (stem, records) in tables {
        let summary = write_table(out, &stem, &records)?;
        names.push(format!("{stem}.csv"));
        names.push(format!("{stem}_summary.csv"));
        all.extend(records.iter().cloned());
        done.push((stem, records, summary));
    }
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    write_manifest(out, command, cfg, &refs, &timing_section(&all))?;
    Ok(GridOutput { tables: done })
}

fn claim_tables(out: &OutputDir, stems: &[&str]) -> Result<()> {
    let mut names: Vec<String> = stems
        .iter()
        .flat_map(|s| [format!("{s}.csv"), format!("{s}_summary.csv")])
        .collect();
    names.push("manifest.toml".into());
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    out.claim(&refs)
}

/// `compare`: every loss over the compare folds and seeds at `eta`.
pub fn cmd_compare(cfg: &ExperimentConfig, jobs: usize, out: &OutputDir) -> Result<GridOutput> {
    claim_tables(out, &["compare"])?;
    let (corpus, folds) = grid_setup(cfg)?;
    let test_folds: Vec<usize> = if cfg.compare_folds.is_empty() {
        (0..cfg.folds).collect()
    } else {
        cfg.compare_folds.clone()
    };
    let mut specs = Vec::new();
    for name in cfg.compare_losses() {
        for &fold in &test_folds {
            for &seed in &cfg.seeds {
                specs.push((
                    name.to_string(),
                    RunSpec {
                        loss: name.with_params(&cfg.loss_params),
                        eta: cfg.eta,
                        seed,
                        test_fold: fold,
                    },
                ));
            }
        }
    }
    let records = run_grid(cfg, &corpus, &folds, jobs, &specs)?;
    finish_grid(out, cfg, "compare", vec![("compare".into(), records)])
}

/// `ablate`: DGHM-C over the `(mu_n, mu_c)` grid and over the lambda grid.
pub fn cmd_ablate(cfg: &ExperimentConfig, jobs: usize, out: &OutputDir) -> Result<GridOutput> {
    claim_tables(out, &["ablate_mu", "ablate_lambda"])?;
    let (corpus, folds) = grid_setup(cfg)?;
    let h = cfg.loss_params.harmonizer;
    let settings = |grid: Vec<HarmonizerConfig>| -> Vec<(String, RunSpec)> {
        let mut specs = Vec::new();
        for hc in grid {
            for &fold in &cfg.grid_folds {
                for &seed in &cfg.seeds {
                    specs.push((
                        LossName::DghmC.to_string(),
                        RunSpec {
                            loss: LossSpec::Harmonized(hc),
                            eta: cfg.eta,
                            seed,
                            test_fold: fold,
                        },
                    ));
                }
            }
        }
        specs
    };
    let mu: Vec<HarmonizerConfig> = cfg
        .mu_grid
        .iter()
        .map(|&[mu_n, mu_c]| cfg.harmonizer_with(mu_n, mu_c, h.lambda))
        .collect();
    let lambda: Vec<HarmonizerConfig> = cfg
        .lambda_grid
        .iter()
        .map(|&l| cfg.harmonizer_with(h.mu_n, h.mu_c, l))
        .collect();
    let mu_records = run_grid(cfg, &corpus, &folds, jobs, &settings(mu))?;
    let lambda_records = run_grid(cfg, &corpus, &folds, jobs, &settings(lambda))?;
    finish_grid(
        out,
        cfg,
        "ablate",
        vec![("ablate_mu".into(), mu_records), ("ablate_lambda".into(), lambda_records)],
    )
}

/// `sweep-eta`: every loss at every drop rate on the grid folds.
pub fn cmd_sweep_eta(cfg: &ExperimentConfig, jobs: usize, out: &OutputDir) -> Result<GridOutput> {
    claim_tables(out, &["sweep_eta"])?;
    let (corpus, folds) = grid_setup(cfg)?;
    let mut specs = Vec::new();
    for name in &cfg.losses {
        for &eta in &cfg.eta_grid {
            for &fold in &cfg.grid_folds {
                for &seed in &cfg.seeds {
                    specs.push((
                        name.to_string(),
                        RunSpec {
                            loss: name.with_params(&cfg.loss_params),
                            eta,
                            seed,
                            test_fold: fold,
                        },
                    ));
                }
            }
        }
    }
    let records = run_grid(cfg, &corpus, &folds, jobs, &specs)?;
    finish_grid(out, cfg, "sweep-eta", vec![("sweep_eta".into(), records)])
}

const FIG_ARTIFACTS: [&str; 3] = ["fig3_histograms.csv", "fig6_histograms.csv", "fig4_curves.csv"];

/// `export-figs`: histogram and reformulated-gradient CSVs from a `train`
/// output directory. Curves are computed from the stored histogram file.
pub fn cmd_export_figs(cfg: &ExperimentConfig, run_dir: &Path, out: &OutputDir) -> Result<()> {
    let hist_path = run_dir.join("final_histograms.csv");
    let file = fs::File::open(&hist_path).map_err(|_| Error::MissingArtifact(hist_path.clone()))?;
    let hists = read_final_histograms(BufReader::new(file), &hist_path.display().to_string())?;
    let needed = [
        Partition::Clean,
        Partition::Noisy,
        Partition::ApPositive,
        Partition::ApNegative,
        Partition::NpNegative,
    ];
    if let Some(p) = needed.iter().find(|p| !hists.contains_key(p)) {
        return Err(Error::MissingArtifact(hist_path.join(p.name())));
    }
    out.claim(&FIG_ARTIFACTS)?;
    let pick = |parts: &[Partition]| -> BTreeMap<Partition, GradientHistogram> {
        parts.iter().map(|p| (*p, hists[p].clone())).collect()
    };
    out.write_with("fig3_histograms.csv", |w| {
        write_final_histograms(&pick(&[Partition::Clean, Partition::Noisy]), w)
    })?;
    out.write_with("fig6_histograms.csv", |w| {
        write_final_histograms(
            &pick(&[Partition::ApPositive, Partition::ApNegative, Partition::NpNegative]),
            w,
        )
    })?;
    out.write_with("fig4_curves.csv", |w| write_curves(cfg, &hists, w))?;
    Ok(())
}

/// Reformulated gradient curves: `curve,g,value`.
pub fn write_curves(
    cfg: &ExperimentConfig,
    hists: &BTreeMap<Partition, GradientHistogram>,
    mut out: impl Write,
) -> Result<()> {
    let lp = &cfg.loss_params;
    let mut pooled = hists[&Partition::Clean].clone();
    pooled.merge(&hists[&Partition::Noisy]);
    let n_total = pooled.total() as f64;
    let ghm = HarmonizerConfig {
        mode: HarmonizerMode::Ghm,
        ..lp.harmonizer
    };
    let dghm = HarmonizerConfig {
        mode: HarmonizerMode::Dghm,
        ..lp.harmonizer
    };
    let curves: Vec<(&str, CurveSource<'_>)> = vec![
        ("ce", CurveSource::Ce),
        ("focal", CurveSource::Focal(lp.focal)),
        ("sce", CurveSource::Sce(lp.sce)),
        (
            "ghm-c",
            CurveSource::Harmonized {
                hist: &pooled,
                partition: Partition::Pooled,
                n_total,
                cfg: &ghm,
            },
        ),
        (
            "dghm-c:clean",
            CurveSource::Harmonized {
                hist: &hists[&Partition::Clean],
                partition: Partition::Clean,
                n_total,
                cfg: &dghm,
            },
        ),
        (
            "dghm-c:noisy",
            CurveSource::Harmonized {
                hist: &hists[&Partition::Noisy],
                partition: Partition::Noisy,
                n_total,
                cfg: &dghm,
            },
        ),
    ];
    writeln!(out, "curve,g,value")?;
    for (name, source) in curves {
        for p in reformulated_gradient_curve(source, cfg.curve_samples) {
            writeln!(out, "{name},{},{}", p.g, p.value)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn schema_errors_are_config_errors() {
        assert!(matches!(ExperimentConfig::from_toml("bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml("seeds = [1, 1]"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml("eta_grid = []"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml("folds = 1"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml("losses = [\"huber\"]"), Err(Error::Config(_))));
    }

    #[test]
    fn hash_ignores_corpus_path_but_not_content() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            corpus_file: Some("elsewhere/corpus.txt".into()),
            ..a.clone()
        };
        let c = ExperimentConfig { eta: 0.5, ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }

    fn record(loss: &str, seed: u64, froc: f64) -> RunRecord {
        RunRecord {
            config_hash: "abc".into(),
            loss: loss.into(),
            eta: 0.7,
            outlier: (loss == "dghm-c").then_some([2.0, 0.5, 0.9]),
            fold: 0,
            seed,
            report: MetricsReport {
                froc,
                flags: vec![Flag::PrecisionFloorUnmet],
                ..MetricsReport::default()
            },
            anchor_corruption: 0.01,
            wall_seconds: 1.0,
        }
    }

    #[test]
    fn run_rows_round_trip_and_summaries_recompute() {
        let rows = vec![record("ce", 0, 0.5), record("ce", 1, 0.7), record("dghm-c", 0, 0.9)];
        let mut buf = Vec::new();
        write_runs_csv(&rows, &mut buf).unwrap();
        let back = read_runs_csv(&buf[..], "mem").unwrap();
        let strip = |v: &[RunRecord]| -> Vec<RunRecord> {
            v.iter()
                .map(|r| RunRecord {
                    wall_seconds: 0.0,
                    ..r.clone()
                })
                .collect()
        };
        assert_eq!(back, strip(&rows));
        let s = summarize(&back).unwrap();
        assert_eq!(s.len(), 2);
        let froc = s[0].stat("froc").unwrap();
        assert!((froc.mean - 0.6).abs() < 1e-15);
        assert!((froc.std.unwrap() - 0.02f64.sqrt()).abs() < 1e-15);
        assert_eq!(s[1].stat("froc").unwrap().std, None);
    }

    #[test]
    fn mixed_configs_are_refused() {
        let mut rows = vec![record("ce", 0, 0.5), record("ce", 1, 0.7)];
        rows[1].config_hash = "def".into();
        assert!(matches!(summarize(&rows), Err(Error::MixedConfig(_, _))));
    }
}
