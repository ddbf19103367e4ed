// temporary calibration probe (deleted before release)
use std::time::Instant;

use ksnet::attack::{eot_asr, scenario1_transfer, select_correctly_classified, whitebox_per_key_asr, AttackConfig, Norm, PlainObjective, attack_batch};
use ksnet::data::{image_to_batch, synthesize_dataset};
use ksnet::defense::{build_defense, pretrain_backbone, model_accuracy, DefenseBuildOptions, TrainConfig, DefendedClassifier};
use ksnet::experiment::derive_attacker_keys;
use ksnet::model::{Model, ModelConfig};
use ksnet::rng::stream;
use ksnet::transform::SecretKey;

fn main() {
    let t0 = Instant::now();
    let cfg = ModelConfig::desk_default();
    let train = synthesize_dataset(800, 32, 11);
    let test = synthesize_dataset(300, 32, 22);

    let tc = TrainConfig { learning_rate: 0.02, epochs: 10, batch_size: 32, momentum: 0.9, weight_decay: 0.0, seed: 33, reestimate_backbone_stats: false };
    let out = pretrain_backbone(&cfg, &train, &tc).unwrap();
    println!("[{:?}] pretrain: train acc {:.3}, test acc {:.3}", t0.elapsed(), out.train_accuracy, model_accuracy(&out.model, &test, 64).unwrap());

    let keys: Vec<SecretKey> = (1..=5).map(|i| SecretKey(1000 + i)).collect();
    let ftc = TrainConfig { learning_rate: 0.02, epochs: 8, ..tc.clone() };
    let defense = build_defense(&out.model, &keys, &train, &ftc, &DefenseBuildOptions::default()).unwrap();
    println!("[{:?}] defense built", t0.elapsed());

    for i in 1..=5 {
        let acc = defense.accuracy_with_key(&test, i, 64).unwrap();
        println!("  key {i}: clean acc {:.3}", acc);
    }
    let exp = defense.accuracy_expectation(&test, 64).unwrap();
    println!("  expectation {:.3}", exp);

    // wrong-key probe: pair 1 under 5 foreign transforms
    let mut rng = stream(99, "wrong");
    let mut wrong_sum = 0.0;
    for _ in 0..5 {
        let k = SecretKey(rng.next_u64());
        let acc = defense.accuracy_pair_with_transform(&test, 1, k, 64).unwrap();
        wrong_sum += acc;
        println!("  wrong key {:x}: acc {:.3}", k.seed(), acc);
    }
    println!("  wrong-key mean {:.3}", wrong_sum / 5.0);
    println!("[{:?}] wrong-key probes done", t0.elapsed());

    // plain-model PGD fragility
    let mut pgd_cfg = AttackConfig::new(Norm::LInf, 8.0 / 255.0, 20);
    pgd_cfg.random_start = true;
    pgd_cfg.restarts = 1;
    pgd_cfg.seed = 4242;
    let subset: Vec<(ksnet::Tensor<f32>, usize)> = (0..200).map(|i| (image_to_batch(&test.images[i]), test.labels[i])).collect();
    let objective = PlainObjective { model: &out.model };
    let advs = attack_batch(&objective, &subset, &pgd_cfg).unwrap();
    let robust = ksnet::attack::model_accuracy_on_adv(&out.model, &advs).unwrap();
    println!("[{:?}] plain-model PGD(linf 8/255, 20): robust acc {:.3}", t0.elapsed(), robust);

    // scenario 1 transfer
    let indices: Vec<usize> = (0..200).collect();
    let s1 = scenario1_transfer(&out.model, &defense, &test, &indices, &pgd_cfg).unwrap();
    println!("[{:?}] scenario1: clean {:.3} robust_exp {:.3} surrogate {:.3}", t0.elapsed(), s1.report.clean_accuracy, s1.report.robust_accuracy_expectation, s1.report.surrogate_robust_accuracy);

    // white-box + EoT ASR on 100 filtered
    let (sel_idx, sel) = select_correctly_classified(&defense, &test, 100, 777).unwrap();
    println!("  selection: {} candidates, {} selected", sel.candidates, sel.selected);
    let white = whitebox_per_key_asr(&defense, &test, &sel_idx, &pgd_cfg).unwrap();
    println!("[{:?}] white-box per-key ASR: exp {:.3} per-key {:?}", t0.elapsed(), white.expectation, white.per_key);

    let attacker_keys = derive_attacker_keys(&defense, 555, 5);
    let atk_ft = TrainConfig { epochs: 6, ..ftc.clone() };
    let opts = DefenseBuildOptions { block_size: Some(4), allow_block_mismatch: true, sampler_seed: 1 };
    let attacker_pool = build_defense(&out.model, &attacker_keys, &train, &atk_ft, &opts).unwrap();
    println!("[{:?}] attacker pool built", t0.elapsed());
    for size in [1usize, 5] {
        let sub = DefendedClassifier::assemble(cfg.clone(), 4, attacker_pool.backbone().clone(), attacker_pool.entries()[..size].to_vec(), 1);
        let (stats, _) = eot_asr(&defense, &sub, &test, &sel_idx, &pgd_cfg).unwrap();
        println!("[{:?}] EoT-{size} ASR: exp {:.3} single {:.3}", t0.elapsed(), stats.expectation, stats.single_draw);
    }
    println!("total {:?}", t0.elapsed());
}
