//! Command-line front end. Each subcommand is a thin wrapper over the
//! library; the runnable examples are the richer tour.
//!
//! Exit codes: 0 success, 2 malformed input files, 3 bad configuration,
//! 4 runtime stage failure.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use ksnet::attack::{
    eot_asr, save_adv_set, scenario1_transfer, scenario2_transfer, select_correctly_classified,
    whitebox_per_key_asr, AsrStats, AttackConfig, Norm, Selection, TransferReport,
};
use ksnet::data::{load_dataset, load_images_file, save_dataset, synthesize_dataset, validate_labels};
use ksnet::defense::{
    build_defense, pretrain_backbone, DefenseBuildOptions, DefendedClassifier, TrainConfig,
    MANIFEST_FILE,
};
use ksnet::experiment::{
    derive_attacker_keys, file_sha256_hex, parse_fraction, render_report, run_experiment,
    ExperimentInputs, ExperimentParams,
};
use ksnet::kv::KvFile;
use ksnet::model::{Model, ModelConfig};
use ksnet::rng::stream;
use ksnet::transform::read_key_file;
use ksnet::{Dataset, Error};

#[derive(Parser)]
#[command(
    name = "ksnet",
    about = "Keyed pixel-shuffling defense: dataset tooling, training, randomized inference, and the attack bench",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the self-contained 10-class synthetic dataset.
    SynthesizeDataset {
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        side: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encrypt a dataset with one key drawn from a key file.
    Encrypt {
        #[arg(long = "key-file")]
        key_file: PathBuf,
        /// 1-based line number of the key to use.
        #[arg(long = "key-index", default_value_t = 1)]
        key_index: usize,
        #[arg(long = "block-size", default_value_t = 4)]
        block_size: usize,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train the plain isotropic classifier.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Fine-tune embedding/head pairs under secret keys and assemble the
    /// defended classifier.
    Finetune {
        /// Directory holding the pre-trained model (`config`,
        /// `backbone.bin`, `pair_0.bin`).
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        keys: PathBuf,
        /// How many keys from the file to use (default: all).
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "block-size")]
        block_size: Option<usize>,
        #[arg(long = "allow-block-mismatch", default_value_t = false)]
        allow_block_mismatch: bool,
        #[arg(long = "sampler-seed", default_value_t = 0x5EED)]
        sampler_seed: u64,
        #[arg(long = "reestimate-backbone-stats", default_value_t = false)]
        reestimate_backbone_stats: bool,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Classify one image with the defense.
    Predict {
        #[arg(long)]
        manifest: PathBuf,
        /// A KSIMG1 container file or a dataset directory.
        #[arg(long)]
        image: PathBuf,
        /// Row of the container to classify.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Force a specific pool key (1-based) instead of sampling.
        #[arg(long = "force-key")]
        force_key: Option<usize>,
    },
    /// Craft adversarial examples and write a JSON attack report.
    Attack {
        #[arg(long, value_parser = ["fgsm", "pgd", "eot"])]
        method: String,
        #[arg(long, default_value = "linf")]
        norm: Norm,
        /// Budget, as a float or fraction like 8/255.
        #[arg(long)]
        eps: Option<String>,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        #[arg(long, default_value_t = 3)]
        restarts: usize,
        /// Threat scenario: white (known keys), 1 (plain-model transfer),
        /// 2 (guessed-key transfer). Ignored for the eot method.
        #[arg(long, default_value = "white", value_parser = ["white", "1", "2"])]
        scenario: String,
        #[arg(long)]
        manifest: PathBuf,
        /// Pre-trained plain model directory (scenarios 1 and 2, eot).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Training data for attacker-side fine-tuning (scenario 2, eot).
        #[arg(long = "train-data")]
        train_data: Option<PathBuf>,
        #[arg(long = "test-data")]
        test_data: PathBuf,
        /// Images to attack.
        #[arg(long, default_value_t = 200)]
        limit: usize,
        /// Attacker pool size for the eot method.
        #[arg(long = "eot-n", default_value_t = 5)]
        eot_n: usize,
        #[arg(long, default_value_t = 0xA77AC)]
        seed: u64,
        /// Also persist the crafted examples to this directory.
        #[arg(long = "save-adv")]
        save_adv: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the declared experiment arms; write report.txt and report.csv.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "train-data")]
        train_data: PathBuf,
        #[arg(long = "test-data")]
        test_data: PathBuf,
        /// Optional experiment config (`key = value`; see README).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Master seed override.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretty-print a written report directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long = "hidden-dim", default_value_t = 64)]
    hidden_dim: usize,
    #[arg(long, default_value_t = 4)]
    depth: usize,
    #[arg(long = "patch-size", default_value_t = 4)]
    patch_size: usize,
    #[arg(long = "kernel-size", default_value_t = 5)]
    kernel_size: usize,
    #[arg(long = "num-classes", default_value_t = 10)]
    num_classes: usize,
    #[arg(long = "image-side", default_value_t = 32)]
    image_side: usize,
}

impl ModelArgs {
    fn to_config(&self) -> ModelConfig {
        ModelConfig {
            hidden_dim: self.hidden_dim,
            depth: self.depth,
            patch_size: self.patch_size,
            kernel_size: self.kernel_size,
            num_classes: self.num_classes,
            image_side: self.image_side,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 0.01)]
    lr: f32,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long = "batch-size", default_value_t = 32)]
    batch_size: usize,
    #[arg(long = "weight-decay", default_value_t = 0.0)]
    weight_decay: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl TrainArgs {
    fn to_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            momentum: 0.9,
            weight_decay: self.weight_decay,
            seed: self.seed,
            reestimate_backbone_stats: false,
        }
    }
}

fn init_threads() {
    if let Ok(v) = std::env::var("KS_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build_global();
        }
    }
}

fn main() {
    init_threads();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                e.exit();
            }
            eprintln!("{e}");
            std::process::exit(3);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::SynthesizeDataset { count, side, seed, out } => {
            if count == 0 || side == 0 || side % 4 != 0 {
                return Err(Error::Config(format!(
                    "count must be positive and side a positive multiple of 4, got {count}/{side}"
                )));
            }
            let ds = synthesize_dataset(count, side, seed);
            save_dataset(&out, &ds)?;
            println!("wrote {count} images ({side}x{side}) to {}", out.display());
        }
        Command::Encrypt { key_file, key_index, block_size, input, out } => {
            let keys = read_key_file(&key_file)?;
            if key_index == 0 || key_index > keys.len() {
                return Err(Error::Config(format!(
                    "key index {key_index} out of range 1..={}",
                    keys.len()
                )));
            }
            let ds = load_dataset(&input)?;
            let enc = ds.encrypt(keys[key_index - 1], block_size)?;
            save_dataset(&out, &enc)?;
            println!(
                "encrypted {} images with key {} (block size {block_size}) into {}",
                enc.len(),
                key_index,
                out.display()
            );
        }
        Command::Pretrain { data, out, model, train } => {
            let config = model.to_config();
            config.validate()?;
            let tc = train.to_config();
            tc.validate()?;
            let ds = load_dataset(&data)?;
            validate_labels(&ds, config.num_classes)?;
            let outcome = pretrain_backbone(&config, &ds, &tc)?;
            outcome.model.save_dir(&out)?;
            println!(
                "pretrained for {} epochs; train accuracy {:.4}; saved to {}",
                tc.epochs,
                outcome.train_accuracy,
                out.display()
            );
        }
        Command::Finetune {
            model,
            keys,
            n,
            data,
            out,
            block_size,
            allow_block_mismatch,
            sampler_seed,
            reestimate_backbone_stats,
            train,
        } => {
            let pretrained = Model::load_dir(&model, 0)?;
            let mut key_list = read_key_file(&keys)?;
            if let Some(n) = n {
                if n == 0 || n > key_list.len() {
                    return Err(Error::Config(format!(
                        "n = {n} out of range 1..={}",
                        key_list.len()
                    )));
                }
                key_list.truncate(n);
            }
            let ds = load_dataset(&data)?;
            validate_labels(&ds, pretrained.config.num_classes)?;
            let mut tc = train.to_config();
            tc.validate()?;
            tc.reestimate_backbone_stats = reestimate_backbone_stats;
            let options = DefenseBuildOptions {
                block_size,
                allow_block_mismatch,
                sampler_seed,
            };
            if let Some(m) = block_size {
                if m != pretrained.config.patch_size && allow_block_mismatch {
                    eprintln!(
                        "warning: block size {m} differs from patch size {}; shuffling will cross patch boundaries",
                        pretrained.config.patch_size
                    );
                }
            }
            let defense = build_defense(&pretrained, &key_list, &ds, &tc, &options)?;
            defense.save_dir(&out)?;
            println!(
                "fine-tuned {} pairs; defense written to {}",
                defense.pool_size(),
                out.display()
            );
        }
        Command::Predict { manifest, image, index, force_key } => {
            let defense = DefendedClassifier::load(&manifest)?;
            let images = if image.is_dir() {
                load_dataset(&image)?.images
            } else {
                load_images_file(&image)?
            };
            let img = images.get(index).ok_or_else(|| {
                Error::Config(format!("index {index} out of range for {} images", images.len()))
            })?;
            let (label, key) = match force_key {
                Some(k) => {
                    let logits = defense.predict_with_key(img, k)?;
                    (ksnet::model::argmax_rows(&logits)[0], k)
                }
                None => defense.defended_predict(img)?,
            };
            println!("label = {label}");
            println!("key_index = {key}");
        }
        Command::Attack {
            method,
            norm,
            eps,
            steps,
            restarts,
            scenario,
            manifest,
            model,
            train_data,
            test_data,
            limit,
            eot_n,
            seed,
            save_adv,
            out,
        } => {
            let defense = DefendedClassifier::load(&manifest)?;
            let testset = load_dataset(&test_data)?;
            validate_labels(&testset, defense.config().num_classes)?;

            let epsilon = match eps {
                Some(raw) => parse_fraction(&raw).map_err(Error::Config)?,
                None => match norm {
                    Norm::LInf => 8.0 / 255.0,
                    Norm::L2 => 0.5,
                },
            };
            let mut config = AttackConfig::new(norm, epsilon, steps);
            config.restarts = restarts;
            config.random_start = true;
            config.seed = seed;
            if method == "fgsm" {
                config.steps = 1;
                config.step_size = Some(epsilon);
                config.random_start = false;
                config.restarts = 1;
            }
            config.validate()?;

            let need_model = || -> Result<Model<f32>, Error> {
                let dir = model.clone().ok_or_else(|| {
                    Error::Config("this scenario needs --model (the pre-trained plain model)".into())
                })?;
                Ok(Model::load_dir(&dir, 0)?)
            };
            let need_train = || -> Result<Dataset, Error> {
                let dir = train_data.clone().ok_or_else(|| {
                    Error::Config("this scenario needs --train-data for attacker fine-tuning".into())
                })?;
                Ok(load_dataset(&dir)?)
            };

            let mut report = AttackRunReport {
                method: method.clone(),
                scenario: scenario.clone(),
                manifest_hash: file_sha256_hex(&manifest_path(&manifest))?,
                config: config.clone(),
                selection: None,
                transfer: None,
                asr: None,
            };

            if method == "eot" {
                let plain = need_model()?;
                let trainset = need_train()?;
                let (indices, selection) =
                    select_correctly_classified(&defense, &testset, limit, seed)?;
                let attacker_keys = derive_attacker_keys(&defense, seed, eot_n);
                let ft = TrainConfig {
                    seed: stream(seed, "attacker-finetune").next_u64(),
                    epochs: 6,
                    ..TrainConfig::desk_default()
                };
                let options = DefenseBuildOptions {
                    block_size: Some(defense.block_size()),
                    allow_block_mismatch: true,
                    sampler_seed: seed,
                };
                let attacker_pool = build_defense(&plain, &attacker_keys, &trainset, &ft, &options)?;
                let (stats, examples) = eot_asr(&defense, &attacker_pool, &testset, &indices, &config)?;
                if let Some(dir) = &save_adv {
                    save_adv_set(dir, &examples, &method, &config)?;
                }
                report.selection = Some(selection);
                report.asr = Some(stats);
            } else {
                match scenario.as_str() {
                    "white" => {
                        let (indices, selection) =
                            select_correctly_classified(&defense, &testset, limit, seed)?;
                        let stats = whitebox_per_key_asr(&defense, &testset, &indices, &config)?;
                        report.selection = Some(selection);
                        report.asr = Some(stats);
                    }
                    "1" => {
                        let plain = need_model()?;
                        let indices: Vec<usize> = (0..testset.len().min(limit)).collect();
                        let outcome =
                            scenario1_transfer(&plain, &defense, &testset, &indices, &config)?;
                        if let Some(dir) = &save_adv {
                            save_adv_set(dir, &outcome.examples, &method, &config)?;
                        }
                        report.transfer = Some(outcome.report);
                    }
                    "2" => {
                        let plain = need_model()?;
                        let trainset = need_train()?;
                        let guessed = derive_attacker_keys(&defense, seed, 1)[0];
                        let ft = TrainConfig {
                            seed: stream(seed, "attacker-finetune").next_u64(),
                            epochs: 6,
                            ..TrainConfig::desk_default()
                        };
                        let indices: Vec<usize> = (0..testset.len().min(limit)).collect();
                        let outcome = scenario2_transfer(
                            &plain, guessed, &defense, &trainset, &testset, &indices, &ft, &config,
                        )?;
                        if let Some(dir) = &save_adv {
                            save_adv_set(dir, &outcome.examples, &method, &config)?;
                        }
                        report.transfer = Some(outcome.report);
                    }
                    other => return Err(Error::Config(format!("unknown scenario {other:?}"))),
                }
            }

            let json = serde_json::to_string_pretty(&report)
                .map_err(|e| Error::Config(e.to_string()))?;
            std::fs::write(&out, json)?;
            println!("attack report written to {}", out.display());
            if let Some(asr) = &report.asr {
                println!("asr_expectation = {:.4}", asr.expectation);
            }
            if let Some(tr) = &report.transfer {
                println!(
                    "robust_accuracy_expectation = {:.4} (clean {:.4})",
                    tr.robust_accuracy_expectation, tr.clean_accuracy
                );
            }
        }
        Command::Evaluate {
            manifest,
            model,
            train_data,
            test_data,
            config,
            seed,
            out,
        } => {
            let defense = DefendedClassifier::load(&manifest)?;
            let plain = Model::load_dir(&model, 0)?;
            let trainset = load_dataset(&train_data)?;
            let testset = load_dataset(&test_data)?;
            validate_labels(&testset, defense.config().num_classes)?;
            let mut params = match config {
                Some(path) => {
                    let kv = KvFile::read(&path)
                        .map_err(ksnet::experiment::ExperimentError::Config)?;
                    ExperimentParams::from_kv(&kv)?
                }
                None => ExperimentParams::desk_default(),
            };
            if let Some(s) = seed {
                params.master_seed = s;
            }
            let inputs = ExperimentInputs {
                defense: &defense,
                plain: &plain,
                trainset: &trainset,
                testset: &testset,
                manifest_hash: file_sha256_hex(&manifest_path(&manifest))?,
            };
            run_experiment(&inputs, &params, Some(&out))?;
            println!("report written to {}", out.display());
            print!("{}", render_report(&out)?);
        }
        Command::Report { dir } => {
            print!("{}", render_report(&dir)?);
        }
    }
    Ok(())
}

fn manifest_path(path: &std::path::Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

#[derive(serde::Serialize)]
struct AttackRunReport {
    method: String,
    scenario: String,
    manifest_hash: String,
    config: AttackConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    selection: Option<Selection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    transfer: Option<TransferReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    asr: Option<AsrStats>,
}
