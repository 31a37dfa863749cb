// Scratch calibration for the synthetic-experiment defaults: trains a MAML
// baseline and a regularized run, printing validation accuracy along the way.

use std::time::Instant;

use gbml::engine::{
    evaluate, outer_step, pretrain_shot_p, AdamConfig, BaseAlgorithm, InnerConfig, MetaState,
    OuterConfig, PretrainConfig, ProjectorInput, ShotConfig, ShotMetric, ShotVariant,
};
use gbml::models::{InnerMask, MlpModel, Projector};
use gbml::rng::SplitRng;
use gbml::tasks::{sample_episode, ClassPool, EpisodeSpec, PoolSpec, Split};

fn main() {
    let seed: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    let with_shot = std::env::args().any(|a| a == "--shot");
    let epochs: usize = std::env::args()
        .nth(2)
        .and_then(|s| s.parse().ok())
        .unwrap_or(300);
    let range: f64 = std::env::args()
        .nth(3)
        .and_then(|s| s.parse().ok())
        .unwrap_or(5.0);
    let separation: f64 = std::env::args()
        .nth(4)
        .and_then(|s| s.parse().ok())
        .unwrap_or(4.0);

    let inner_lr: f64 = std::env::args()
        .nth(5)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0.5);
    let hidden: usize = std::env::args()
        .nth(6)
        .and_then(|s| s.parse().ok())
        .unwrap_or(32);

    let rng = SplitRng::from_seed(seed);
    let pool_spec = PoolSpec {
        separation,
        range,
        ..PoolSpec::default()
    };
    let pool = ClassPool::generate(&pool_spec, &mut rng.split("pool")).unwrap();
    let model = MlpModel::new(vec![16, hidden, 5]).unwrap();
    let theta0 = model.init_params(&mut rng.split("init"));
    let mask = InnerMask::all_adaptable(&theta0);
    let spec = EpisodeSpec {
        n_way: 5,
        k_shot: 1,
        q_query: 15,
    };

    let inner = InnerConfig::new(3, inner_lr, mask.clone()).unwrap();
    let shot = if with_shot {
        Some(
            ShotConfig::from_reference_lr(
                1,
                3,
                inner_lr,
                0.1,
                ShotMetric::Kl,
                ShotVariant::Regularizer,
            )
            .unwrap(),
        )
    } else {
        None
    };
    let cfg = OuterConfig {
        base: BaseAlgorithm::Maml,
        inner: inner.clone(),
        shot,
        adam: AdamConfig::default(),
    };

    let mut r0 = rng.split("random-eval");
    let random_init = evaluate(
        &model,
        &MetaState::new(model.init_params(&mut rng.split("init"))).theta0,
        &pool,
        Split::Test,
        spec,
        500,
        &inner,
        &mut r0,
    )
    .unwrap();
    println!(
        "random-init test {:.4} +- {:.4} (range {range}, sep {separation})",
        random_init.mean_accuracy, random_init.ci95
    );

    if std::env::args().any(|a| a == "--pretrain") {
        let pre_cfg = PretrainConfig {
            shot: ShotConfig::from_reference_lr(
                1,
                3,
                inner_lr,
                0.0,
                ShotMetric::Kl,
                ShotVariant::Pretrainer,
            )
            .unwrap(),
            base: BaseAlgorithm::Maml,
            episode: spec,
            meta_batch: 4,
            batches_per_epoch: 8,
            epochs,
            augment_std: 0.25,
            adam: AdamConfig::default(),
            projector_input: ProjectorInput::Logits,
            eval_inner: inner.clone(),
            val_episodes: 60,
        };
        let projector = Projector::init(5, &mut rng.split("projector")).unwrap();
        let state = MetaState::new(theta0.clone());
        let start = Instant::now();
        let state = pretrain_shot_p(
            &model,
            state,
            &pool,
            &pre_cfg,
            Some(&projector),
            &rng,
            |r| {
                if r.epoch % 5 == 0 || r.epoch == 1 {
                    println!(
                        "pre epoch {:3}  loss {:.5}  val {:.3} +- {:.3}",
                        r.epoch, r.loss_mean, r.val_accuracy, r.val_ci95
                    );
                }
            },
        )
        .unwrap();
        let best = state.best_val.as_ref().map(|b| (b.accuracy, b.epoch));
        println!("pretrained best val: {best:?}  [{:.1?}]", start.elapsed());
        let protocols = [
            ("3-step @ lr", InnerConfig::new(3, inner_lr, mask.clone()).unwrap()),
            (
                "1-step @ 3lr",
                InnerConfig::new(1, 3.0 * inner_lr, mask.clone()).unwrap(),
            ),
            ("1-step @ lr", InnerConfig::new(1, inner_lr, mask.clone()).unwrap()),
        ];
        for (name, proto) in protocols {
            let mut trng = rng.split("test");
            let mut trng2 = rng.split("test");
            let pre_test = evaluate(
                &model, &state.theta0, &pool, Split::Test, spec, 1000, &proto, &mut trng,
            )
            .unwrap();
            let rnd_test = evaluate(
                &model, &theta0, &pool, Split::Test, spec, 1000, &proto, &mut trng2,
            )
            .unwrap();
            println!(
                "[{name}] pretrained {:.4} +- {:.4}   random {:.4} +- {:.4}   separated: {}",
                pre_test.mean_accuracy,
                pre_test.ci95,
                rnd_test.mean_accuracy,
                rnd_test.ci95,
                pre_test.ci_disjoint_from(&rnd_test)
            );
        }
        return;
    }

    let mut state = MetaState::new(theta0);
    let mut erng = rng.split("train-episodes");
    let val_rng = rng.split("val");
    let batches_per_epoch = 8;
    let meta_batch = 4;

    let start = Instant::now();
    let report_every = (epochs / 12).max(1);
    for epoch in 1..=epochs {
        let mut cos = 0.0;
        let mut tl = 0.0;
        for _ in 0..batches_per_epoch {
            let batch: Vec<_> = (0..meta_batch)
                .map(|_| {
                    sample_episode(&pool, Split::Train, spec.n_way, spec.k_shot, spec.q_query, &mut erng)
                        .unwrap()
                })
                .collect();
            let report = outer_step(&model, &mut state, &batch, &cfg).unwrap();
            cos = report.cosine_mean;
            tl += report.train_loss / batches_per_epoch as f64;
        }
        state.epoch = epoch;
        let mut vr = val_rng.split_index(epoch as u64);
        let rep = evaluate(
            &model, &state.theta0, &pool, Split::Val, spec, 60, &inner, &mut vr,
        )
        .unwrap();
        state.observe_validation(rep.mean_accuracy);
        if epoch % report_every == 0 || epoch == 1 {
            println!(
                "epoch {epoch:4}  train_loss {tl:.4}  val {:.3} +- {:.3}  cosine {cos:.4}  [{:.1?}]",
                rep.mean_accuracy,
                rep.ci95,
                start.elapsed()
            );
        }
    }

    let mut trng = rng.split("test");
    let test = evaluate(
        &model,
        state.best_theta(),
        &pool,
        Split::Test,
        spec,
        1000,
        &inner,
        &mut trng,
    )
    .unwrap();
    println!(
        "TEST {:.4} +- {:.4}  ({} epochs, {:.1?})",
        test.mean_accuracy,
        test.ci95,
        epochs,
        start.elapsed()
    );
}
