//! Experiment orchestration and report emission.
//!
//! One experiment runs a declared set of arms (clean, white-box control,
//! transfer scenarios 1 and 2, adaptive EoT) against a defended
//! classifier and writes a structured-text report plus a flat CSV of
//! `(arm, norm, eps, metric, value)` rows. Every stochastic choice flows
//! from the master seed through named substreams, so a rerun with the
//! same seed reproduces the CSV byte for byte. Timing lives only in the
//! text report.

use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attack::{
    eot_asr, scenario1_transfer, scenario2_transfer, select_correctly_classified,
    whitebox_per_key_asr, AsrStats, AttackConfig, Norm, Selection,
};
use crate::data::Dataset;
use crate::defense::{build_defense, DefenseBuildOptions, DefendedClassifier, TrainConfig};
use crate::kv::KvFile;
use crate::model::Model;
use crate::rng::stream;
use crate::transform::SecretKey;

pub const REPORT_TEXT_FILE: &str = "report.txt";
pub const REPORT_CSV_FILE: &str = "report.csv";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("stage {stage}: {message}")]
    Stage { stage: String, message: String },
    #[error("experiment config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which evaluation arms to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Clean,
    White,
    Scenario1,
    Scenario2,
    Eot,
}

impl std::str::FromStr for Arm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "clean" => Ok(Arm::Clean),
            "white" => Ok(Arm::White),
            "scenario1" => Ok(Arm::Scenario1),
            "scenario2" => Ok(Arm::Scenario2),
            "eot" => Ok(Arm::Eot),
            other => Err(format!("unknown arm {other:?}")),
        }
    }
}

impl Arm {
    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Clean => "clean",
            Arm::White => "white",
            Arm::Scenario1 => "scenario1",
            Arm::Scenario2 => "scenario2",
            Arm::Eot => "eot",
        }
    }
}

/// Parse "8/255" or "0.5" into a float budget.
pub fn parse_fraction(s: &str) -> Result<f32, String> {
    let t = s.trim();
    if let Some((num, den)) = t.split_once('/') {
        let n: f32 = num.trim().parse().map_err(|_| format!("bad fraction {t:?}"))?;
        let d: f32 = den.trim().parse().map_err(|_| format!("bad fraction {t:?}"))?;
        if d == 0.0 {
            return Err(format!("zero denominator in {t:?}"));
        }
        Ok(n / d)
    } else {
        t.parse().map_err(|_| format!("bad number {t:?}"))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentParams {
    pub master_seed: u64,
    pub arms: Vec<Arm>,
    pub norm: Norm,
    pub epsilon: f32,
    pub steps: usize,
    pub restarts: usize,
    pub random_start: bool,
    /// Images evaluated in accuracy arms (clean, scenario 1 and 2).
    pub eval_limit: usize,
    /// Filtered images attacked in ASR arms (white, EoT).
    pub asr_limit: usize,
    /// Attacker pool sizes for the EoT arm.
    pub eot_sizes: Vec<usize>,
    /// Fine-tuning settings for attacker-side pairs (scenario 2 guessed
    /// key and the EoT pool).
    pub attacker_epochs: usize,
    pub attacker_learning_rate: f32,
    pub attacker_batch_size: usize,
}

impl ExperimentParams {
    pub fn desk_default() -> Self {
        Self {
            master_seed: 0xE0A7,
            arms: vec![Arm::Clean, Arm::White, Arm::Scenario1, Arm::Scenario2, Arm::Eot],
            norm: Norm::LInf,
            epsilon: 8.0 / 255.0,
            steps: 20,
            restarts: 1,
            random_start: true,
            eval_limit: 200,
            asr_limit: 200,
            eot_sizes: vec![1, 5],
            attacker_epochs: 6,
            attacker_learning_rate: 0.01,
            attacker_batch_size: 32,
        }
    }

    pub fn from_kv(kv: &KvFile) -> Result<Self, ExperimentError> {
        let d = Self::desk_default();
        let err = ExperimentError::Config;
        let arms = match kv.get("arms") {
            None => d.arms.clone(),
            Some(raw) => raw
                .split(',')
                .map(|a| a.parse())
                .collect::<Result<Vec<Arm>, _>>()
                .map_err(err)?,
        };
        let eot_sizes = match kv.get("eot_sizes") {
            None => d.eot_sizes.clone(),
            Some(raw) => raw
                .split(',')
                .map(|v| v.trim().parse::<usize>().map_err(|_| format!("bad eot size {v:?}")))
                .collect::<Result<Vec<usize>, _>>()
                .map_err(err)?,
        };
        Ok(Self {
            master_seed: kv.parse_opt("master_seed", d.master_seed).map_err(err)?,
            arms,
            norm: kv.parse_opt("norm", d.norm_str().to_string()).map_err(err)?.parse().map_err(err)?,
            epsilon: match kv.get("eps") {
                None => d.epsilon,
                Some(raw) => parse_fraction(raw).map_err(err)?,
            },
            steps: kv.parse_opt("steps", d.steps).map_err(err)?,
            restarts: kv.parse_opt("restarts", d.restarts).map_err(err)?,
            random_start: kv.parse_opt("random_start", d.random_start).map_err(err)?,
            eval_limit: kv.parse_opt("eval_limit", d.eval_limit).map_err(err)?,
            asr_limit: kv.parse_opt("asr_limit", d.asr_limit).map_err(err)?,
            eot_sizes,
            attacker_epochs: kv.parse_opt("attacker_epochs", d.attacker_epochs).map_err(err)?,
            attacker_learning_rate: kv
                .parse_opt("attacker_lr", d.attacker_learning_rate)
                .map_err(err)?,
            attacker_batch_size: kv
                .parse_opt("attacker_batch", d.attacker_batch_size)
                .map_err(err)?,
        })
    }

    fn norm_str(&self) -> &'static str {
        self.norm.as_str()
    }

    fn attack_config(&self, label: &str) -> AttackConfig {
        let mut c = AttackConfig::new(self.norm, self.epsilon, self.steps);
        c.restarts = self.restarts;
        c.random_start = self.random_start;
        c.seed = stream(self.master_seed, label).next_u64();
        c
    }

    fn attacker_train_config(&self, label: &str) -> TrainConfig {
        TrainConfig {
            learning_rate: self.attacker_learning_rate,
            epochs: self.attacker_epochs,
            batch_size: self.attacker_batch_size,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: stream(self.master_seed, label).next_u64(),
            reestimate_backbone_stats: false,
        }
    }
}

/// Everything an experiment needs, already loaded.
pub struct ExperimentInputs<'a> {
    pub defense: &'a DefendedClassifier,
    pub plain: &'a Model<f32>,
    pub trainset: &'a Dataset,
    pub testset: &'a Dataset,
    /// Content hash of the defense manifest this run is bound to.
    pub manifest_hash: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ArmReport {
    pub arm: String,
    pub norm: String,
    pub epsilon: f32,
    pub steps: usize,
    pub restarts: usize,
    /// How the defense's per-inference key randomness was handled for
    /// each metric: expectation over the pool unless suffixed otherwise.
    pub key_handling: String,
    pub metrics: Vec<(String, f64)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub manifest_hash: String,
    pub master_seed: u64,
    pub params: ExperimentParams,
    pub selection: Option<Selection>,
    pub arms: Vec<ArmReport>,
    pub timing_seconds: Vec<(String, f64)>,
    pub partial: bool,
}

impl EvalReport {
    /// Flat rows: arm, norm, eps, metric, value. Byte-deterministic for a
    /// fixed master seed (timing is excluded on purpose).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("arm,norm,eps,metric,value\n");
        if self.partial {
            out.push_str("# partial = true\n");
        }
        for arm in &self.arms {
            for (metric, value) in &arm.metrics {
                out.push_str(&format!(
                    "{},{},{:.6},{},{:.6}\n",
                    arm.arm, arm.norm, arm.epsilon, metric, value
                ));
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut kv = KvFile::new();
        kv.push("manifest_hash", &self.manifest_hash);
        kv.push("master_seed", self.master_seed);
        kv.push("partial", self.partial);
        kv.push("norm", self.params.norm.as_str());
        kv.push("eps", format!("{:.6}", self.params.epsilon));
        kv.push("steps", self.params.steps);
        kv.push("restarts", self.params.restarts);
        kv.push("random_start", self.params.random_start);
        kv.push("eval_limit", self.params.eval_limit);
        kv.push("asr_limit", self.params.asr_limit);
        if let Some(sel) = &self.selection {
            kv.push("selection_filter", &sel.filter);
            kv.push("selection_candidates", sel.candidates);
            kv.push("selection_selected", sel.selected);
        }
        for arm in &self.arms {
            for (metric, value) in &arm.metrics {
                kv.push(&format!("{}.{}", arm.arm, metric), format!("{value:.6}"));
            }
            kv.push(&format!("{}.key_handling", arm.arm), &arm.key_handling);
        }
        for (stage, secs) in &self.timing_seconds {
            kv.push(&format!("timing.{stage}"), format!("{secs:.3}"));
        }
        kv.to_text()
    }

    pub fn write(&self, out_dir: &Path) -> Result<(), ExperimentError> {
        std::fs::create_dir_all(out_dir)?;
        std::fs::write(out_dir.join(REPORT_CSV_FILE), self.to_csv())?;
        std::fs::write(out_dir.join(REPORT_TEXT_FILE), self.to_text())?;
        Ok(())
    }
}

/// SHA-256 hex digest of a file's bytes.
pub fn file_sha256_hex(path: &Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

fn asr_metrics(stats: &AsrStats) -> Vec<(String, f64)> {
    let mut m = vec![
        ("asr_expectation".to_string(), stats.expectation),
        ("asr_single_draw".to_string(), stats.single_draw),
        (
            "robust_accuracy_expectation".to_string(),
            1.0 - stats.expectation,
        ),
    ];
    for (i, v) in stats.per_key.iter().enumerate() {
        m.push((format!("asr_key_{}", i + 1), *v));
    }
    m.push(("images".to_string(), stats.images as f64));
    m
}

/// Derive `count` attacker-side keys from the master seed, skipping any
/// that collide with the defender's pool.
pub fn derive_attacker_keys(
    defense: &DefendedClassifier,
    master_seed: u64,
    count: usize,
) -> Vec<SecretKey> {
    let mut rng = stream(master_seed, "attacker-keys");
    let mut keys = Vec::with_capacity(count);
    while keys.len() < count {
        let k = SecretKey(rng.next_u64());
        if !defense.contains_key(k) && !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys
}

/// Run the declared arms. On a stage failure the partially filled report
/// is flushed to `out_dir` (when given) with `partial = true` before the
/// error propagates.
pub fn run_experiment(
    inputs: &ExperimentInputs,
    params: &ExperimentParams,
    out_dir: Option<&Path>,
) -> Result<EvalReport, ExperimentError> {
    let mut report = EvalReport {
        manifest_hash: inputs.manifest_hash.clone(),
        master_seed: params.master_seed,
        params: params.clone(),
        selection: None,
        arms: Vec::new(),
        timing_seconds: Vec::new(),
        partial: false,
    };

    match run_arms(inputs, params, &mut report) {
        Ok(()) => {
            if let Some(dir) = out_dir {
                report.write(dir)?;
            }
            Ok(report)
        }
        Err(e) => {
            report.partial = true;
            if let Some(dir) = out_dir {
                // flushing partial results must not mask the stage error
                let _ = report.write(dir);
            }
            Err(e)
        }
    }
}

fn stage_err<E: std::fmt::Display>(stage: &str) -> impl Fn(E) -> ExperimentError + '_ {
    move |e| ExperimentError::Stage {
        stage: stage.to_string(),
        message: e.to_string(),
    }
}

fn run_arms(
    inputs: &ExperimentInputs,
    params: &ExperimentParams,
    report: &mut EvalReport,
) -> Result<(), ExperimentError> {
    let defense = inputs.defense;
    let testset = inputs.testset;

    // shared subsets: accuracy arms use the first eval_limit test rows,
    // ASR arms use a seeded sample of images the defense gets right
    let eval_indices: Vec<usize> = (0..testset.len().min(params.eval_limit)).collect();
    let eval_subset = testset.subset(&eval_indices);

    let needs_asr = params
        .arms
        .iter()
        .any(|a| matches!(a, Arm::White | Arm::Eot));
    let asr_indices = if needs_asr {
        let seed = stream(params.master_seed, "selection").next_u64();
        let (idx, sel) =
            select_correctly_classified(defense, testset, params.asr_limit, seed)
                .map_err(stage_err("selection"))?;
        report.selection = Some(sel);
        idx
    } else {
        Vec::new()
    };

    // the clean pass is computed once and echoed by every arm that needs it
    let t0 = Instant::now();
    let clean_expectation = defense
        .accuracy_expectation(&eval_subset, 64)
        .map_err(stage_err("clean"))?;

    for &arm in &params.arms {
        let start = Instant::now();
        match arm {
            Arm::Clean => {
                let single = defense
                    .accuracy_single_draw(&eval_subset, stream(params.master_seed, "clean-draw").next_u64(), 64)
                    .map_err(stage_err("clean"))?;
                let plain_clean = crate::defense::model_accuracy(inputs.plain, &eval_subset, 64)
                    .map_err(stage_err("clean"))?;
                let mut metrics = vec![
                    ("accuracy_expectation".to_string(), clean_expectation),
                    ("accuracy_single_draw".to_string(), single),
                    ("plain_model_accuracy".to_string(), plain_clean),
                ];
                for index in 1..=defense.pool_size() {
                    let acc = defense
                        .accuracy_with_key(&eval_subset, index, 64)
                        .map_err(stage_err("clean"))?;
                    metrics.push((format!("accuracy_key_{index}"), acc));
                }
                metrics.push(("images".to_string(), eval_subset.len() as f64));
                report.arms.push(ArmReport {
                    arm: "clean".into(),
                    norm: "-".into(),
                    epsilon: 0.0,
                    steps: 0,
                    restarts: 0,
                    key_handling: "expectation plus single_draw".into(),
                    metrics,
                });
            }
            Arm::White => {
                let cfg = params.attack_config("white");
                let stats = whitebox_per_key_asr(defense, testset, &asr_indices, &cfg)
                    .map_err(stage_err("white"))?;
                report.arms.push(ArmReport {
                    arm: "white".into(),
                    norm: params.norm.as_str().into(),
                    epsilon: params.epsilon,
                    steps: params.steps,
                    restarts: params.restarts,
                    key_handling: "per-key oracle (attacker knows the draw)".into(),
                    metrics: asr_metrics(&stats),
                });
            }
            Arm::Scenario1 => {
                let cfg = params.attack_config("scenario1");
                let tr = scenario1_transfer(inputs.plain, defense, testset, &eval_indices, &cfg)
                    .map_err(stage_err("scenario1"))?;
                report
                    .arms
                    .push(transfer_arm_report("scenario1", params, &tr.report, clean_expectation));
            }
            Arm::Scenario2 => {
                let cfg = params.attack_config("scenario2");
                let guessed = derive_attacker_keys(defense, params.master_seed, 1)[0];
                let ft = params.attacker_train_config("scenario2-finetune");
                let tr = scenario2_transfer(
                    inputs.plain,
                    guessed,
                    defense,
                    inputs.trainset,
                    testset,
                    &eval_indices,
                    &ft,
                    &cfg,
                )
                .map_err(stage_err("scenario2"))?;
                report
                    .arms
                    .push(transfer_arm_report("scenario2", params, &tr.report, clean_expectation));
            }
            Arm::Eot => {
                let max_size = params.eot_sizes.iter().copied().max().unwrap_or(1);
                let attacker_keys = derive_attacker_keys(defense, params.master_seed, max_size);
                let ft = params.attacker_train_config("eot-finetune");
                let options = DefenseBuildOptions {
                    block_size: Some(defense.block_size()),
                    allow_block_mismatch: true,
                    sampler_seed: stream(params.master_seed, "eot-sampler").next_u64(),
                };
                let attacker_pool = build_defense(
                    &Model {
                        config: defense.config().clone(),
                        backbone: defense.backbone().clone(),
                        pair: inputs.plain.pair.clone(),
                    },
                    &attacker_keys,
                    inputs.trainset,
                    &ft,
                    &options,
                )
                .map_err(stage_err("eot"))?;

                for &size in &params.eot_sizes {
                    let sub = DefendedClassifier::assemble(
                        defense.config().clone(),
                        defense.block_size(),
                        attacker_pool.backbone().clone(),
                        attacker_pool.entries()[..size.min(attacker_pool.pool_size())].to_vec(),
                        attacker_pool.sampler_seed(),
                    );
                    let cfg = params.attack_config(&format!("eot-{size}"));
                    let (stats, _examples) = eot_asr(defense, &sub, testset, &asr_indices, &cfg)
                        .map_err(stage_err("eot"))?;
                    report.arms.push(ArmReport {
                        arm: format!("eot_{size}"),
                        norm: params.norm.as_str().into(),
                        epsilon: params.epsilon,
                        steps: params.steps,
                        restarts: params.restarts,
                        key_handling: "expectation plus single_draw".into(),
                        metrics: asr_metrics(&stats),
                    });
                }
            }
        }
        report
            .timing_seconds
            .push((arm.as_str().to_string(), start.elapsed().as_secs_f64()));
    }
    report
        .timing_seconds
        .push(("total".to_string(), t0.elapsed().as_secs_f64()));
    Ok(())
}

fn transfer_arm_report(
    name: &str,
    params: &ExperimentParams,
    tr: &crate::attack::TransferReport,
    clean_expectation: f64,
) -> ArmReport {
    ArmReport {
        arm: name.into(),
        norm: params.norm.as_str().into(),
        epsilon: params.epsilon,
        steps: params.steps,
        restarts: params.restarts,
        key_handling: "expectation plus single_draw".into(),
        metrics: vec![
            ("clean_accuracy".to_string(), clean_expectation),
            (
                "robust_accuracy_expectation".to_string(),
                tr.robust_accuracy_expectation,
            ),
            (
                "robust_accuracy_single_draw".to_string(),
                tr.robust_accuracy_single_draw,
            ),
            (
                "surrogate_robust_accuracy".to_string(),
                tr.surrogate_robust_accuracy,
            ),
            ("images".to_string(), tr.images as f64),
        ],
    }
}

/// Re-render a written report directory as a human-readable table.
pub fn render_report(dir: &Path) -> Result<String, ExperimentError> {
    let csv_path = dir.join(REPORT_CSV_FILE);
    let text = std::fs::read_to_string(&csv_path)?;
    let mut out = String::new();
    let txt_path = dir.join(REPORT_TEXT_FILE);
    if txt_path.exists() {
        let kv = KvFile::read(&txt_path).map_err(ExperimentError::Config)?;
        if let Some(h) = kv.get("manifest_hash") {
            out.push_str(&format!("manifest  {h}\n"));
        }
        if let Some(p) = kv.get("partial") {
            out.push_str(&format!("partial   {p}\n"));
        }
    }
    out.push_str(&format!("{:<12} {:<6} {:>10} {:<32} {:>10}\n", "arm", "norm", "eps", "metric", "value"));
    for line in text.lines().skip(1) {
        if line.starts_with('#') {
            out.push_str(line);
            out.push('\n');
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() == 5 {
            out.push_str(&format!(
                "{:<12} {:<6} {:>10} {:<32} {:>10}\n",
                cols[0], cols[1], cols[2], cols[3], cols[4]
            ));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fraction_parser_accepts_both_forms() {
        assert!((parse_fraction("8/255").unwrap() - 8.0 / 255.0).abs() < 1e-9);
        assert!((parse_fraction("0.5").unwrap() - 0.5).abs() < 1e-9);
        assert!(parse_fraction("8/0").is_err());
        assert!(parse_fraction("abc").is_err());
    }

    #[test]
    fn params_parse_from_kv_with_defaults() {
        let kv = KvFile::from_text("eps = 4/255\narms = clean,white\neot_sizes = 1,3\n").unwrap();
        let p = ExperimentParams::from_kv(&kv).unwrap();
        assert!((p.epsilon - 4.0 / 255.0).abs() < 1e-9);
        assert_eq!(p.arms, vec![Arm::Clean, Arm::White]);
        assert_eq!(p.eot_sizes, vec![1, 3]);
        assert_eq!(p.steps, ExperimentParams::desk_default().steps);
        assert!(KvFile::from_text("arms = clean,bogus\n")
            .map(|kv| ExperimentParams::from_kv(&kv))
            .unwrap()
            .is_err());
    }

    #[test]
    fn csv_rows_are_flat_and_marked_when_partial() {
        let params = ExperimentParams::desk_default();
        let mut report = EvalReport {
            manifest_hash: "abc".into(),
            master_seed: 1,
            params,
            selection: None,
            arms: vec![ArmReport {
                arm: "clean".into(),
                norm: "-".into(),
                epsilon: 0.0,
                steps: 0,
                restarts: 0,
                key_handling: "expectation".into(),
                metrics: vec![("accuracy_expectation".into(), 0.5)],
            }],
            timing_seconds: vec![("clean".into(), 1.0)],
            partial: false,
        };
        let csv = report.to_csv();
        assert!(csv.starts_with("arm,norm,eps,metric,value\n"));
        assert!(csv.contains("clean,-,0.000000,accuracy_expectation,0.500000"));
        assert!(!csv.contains("timing"));
        report.partial = true;
        assert!(report.to_csv().contains("# partial = true"));
    }
}
