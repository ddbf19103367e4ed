// temporary: fast check of plain-model fragility vs clean accuracy
use ksnet::attack::{attack_batch, AttackConfig, Norm, PlainObjective};
use ksnet::data::{image_to_batch, synthesize_dataset};
use ksnet::defense::{model_accuracy, pretrain_backbone, TrainConfig};
use ksnet::model::ModelConfig;

fn main() {
    let cfg = ModelConfig::desk_default();
    let train = synthesize_dataset(800, 32, 11);
    let test = synthesize_dataset(300, 32, 22);
    let tc = TrainConfig { learning_rate: 0.02, epochs: 10, batch_size: 32, momentum: 0.9, weight_decay: 0.0, seed: 33, reestimate_backbone_stats: false };
    let out = pretrain_backbone(&cfg, &train, &tc).unwrap();
    println!("pretrain: train {:.3} test {:.3}", out.train_accuracy, model_accuracy(&out.model, &test, 64).unwrap());
    let mut pgd_cfg = AttackConfig::new(Norm::LInf, 8.0 / 255.0, 20);
    pgd_cfg.random_start = true;
    pgd_cfg.restarts = 1;
    pgd_cfg.seed = 4242;
    let subset: Vec<(ksnet::Tensor<f32>, usize)> = (0..200).map(|i| (image_to_batch(&test.images[i]), test.labels[i])).collect();
    let objective = PlainObjective { model: &out.model };
    let advs = attack_batch(&objective, &subset, &pgd_cfg).unwrap();
    println!("plain PGD robust: {:.3}", ksnet::attack::model_accuracy_on_adv(&out.model, &advs).unwrap());
}
