use proptest::prelude::*;
use satkit::baselines::{
    objective_value, per_example_loss, pgd_label_attack, pretrain_ssl, train_alp, train_at, train_mat,
    train_supervised, ClassifierHead, Objective, PgdSettings, TrainConfig,
};
use satkit::data::{gen_synthetic, Dataset, SyntheticSpec};
use satkit::encoder::{EncoderModel, EncoderSpec, LayerSpec, ScoreHeads};
use satkit::sat::contrast_loss;
use satkit::tensor::Tensor;

fn two_class(seed: u64, per_class: usize) -> Dataset {
    gen_synthetic(&SyntheticSpec { seed, classes: 2, dim: 6, per_class, spread: 0.1 }).unwrap()
}

fn small_model(seed: u64) -> (EncoderModel, ClassifierHead) {
    let spec = EncoderSpec::new(vec![LayerSpec::relu(6, 12), LayerSpec::relu(12, 8)]);
    let model = EncoderModel::init(&spec, seed).unwrap();
    let head = ClassifierHead::init(8, 2, seed + 1).unwrap();
    (model, head)
}

fn cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 10,
        lr: 1e-2,
        seed,
        pgd: PgdSettings { eps: 0.05, step: 0.01, iters: 5 },
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn mat_is_at_plus_clean(seed in any::<u64>(), lambda in 0.0f64..3.0) {
        let ds = two_class(seed, 6);
        let (model, head) = small_model(seed);
        let c = TrainConfig { alp_lambda: lambda, ..cfg(seed) };
        let x = ds.to_tensor();
        let at = objective_value(&model, &head, &x, ds.labels(), Objective::At, &c, seed).unwrap();
        let plain = objective_value(&model, &head, &x, ds.labels(), Objective::Plain, &c, seed).unwrap();
        let mat = objective_value(&model, &head, &x, ds.labels(), Objective::Mat, &c, seed).unwrap();
        prop_assert!((mat - (at + plain)).abs() <= 1e-12);
    }

    #[test]
    fn alp_reduces_to_clean_loss(seed in any::<u64>(), lambda in 0.0f64..3.0) {
        let ds = two_class(seed, 6);
        let (model, head) = small_model(seed);
        let x = ds.to_tensor();
        let plain = objective_value(&model, &head, &x, ds.labels(), Objective::Plain, &cfg(seed), seed).unwrap();
        // lambda = 0
        let c0 = TrainConfig { alp_lambda: 0.0, ..cfg(seed) };
        let alp0 = objective_value(&model, &head, &x, ds.labels(), Objective::Alp, &c0, seed).unwrap();
        prop_assert_eq!(alp0, plain);
        // x_adv == x makes the pairing term vanish at any lambda
        let still = TrainConfig { alp_lambda: lambda, pgd: PgdSettings { eps: 0.0, ..cfg(seed).pgd }, ..cfg(seed) };
        let alp = objective_value(&model, &head, &x, ds.labels(), Objective::Alp, &still, seed).unwrap();
        prop_assert_eq!(alp, plain);
        let at0 = objective_value(&model, &head, &x, ds.labels(), Objective::At, &still, seed).unwrap();
        prop_assert_eq!(at0, plain);
    }

    #[test]
    fn pgd_stays_in_ball_and_box(seed in any::<u64>(), eps in 0.0f64..0.2) {
        let ds = two_class(seed, 5);
        let (model, head) = small_model(seed);
        let x = ds.to_tensor();
        let pgd = PgdSettings { eps, step: 0.01, iters: 4 };
        let adv = pgd_label_attack(&model, &head, &x, ds.labels(), &pgd, seed).unwrap();
        for (a, b) in adv.data().iter().zip(x.data()) {
            prop_assert!((a - b).abs() <= eps + 1e-12);
            prop_assert!((0.0..=1.0).contains(a));
        }
    }
}

#[test]
fn pgd_raises_cross_entropy() {
    let ds = two_class(3, 100);
    let (mut model, mut head) = small_model(3);
    train_supervised(&ds, &mut model, &mut head, &cfg(3)).unwrap();
    let x = ds.to_tensor();
    let pgd = PgdSettings { eps: 0.05, step: 0.01, iters: 10 };
    let adv = pgd_label_attack(&model, &head, &x, ds.labels(), &pgd, 8).unwrap();
    let before = per_example_loss(&model, &head, &x, ds.labels()).unwrap();
    let after = per_example_loss(&model, &head, &adv, ds.labels()).unwrap();
    let up = before.iter().zip(&after).filter(|(b, a)| a >= b).count();
    assert!(up as f64 >= 0.95 * before.len() as f64, "{up}/{}", before.len());
}

#[test]
fn every_loop_reduces_its_loss_and_is_deterministic() {
    let ds = two_class(5, 40);
    type Loop = fn(&Dataset, &mut EncoderModel, &mut ClassifierHead, &TrainConfig) -> satkit::Result<satkit::baselines::TrainLog>;
    let loops: [(&str, Loop); 4] = [("sup", train_supervised), ("at", train_at), ("mat", train_mat), ("alp", train_alp)];
    for (name, f) in loops {
        let (mut m1, mut h1) = small_model(5);
        let log = f(&ds, &mut m1, &mut h1, &cfg(5)).unwrap();
        let (first, last) = (log.epoch_losses[0], *log.epoch_losses.last().unwrap());
        assert!(last < first, "{name}: {first} -> {last}");
        let (mut m2, mut h2) = small_model(5);
        f(&ds, &mut m2, &mut h2, &cfg(5)).unwrap();
        assert_eq!((m1, h1), (m2, h2), "{name}");
    }
}

#[test]
fn negative_alp_weight_fails() {
    let ds = two_class(1, 4);
    let (mut m, mut h) = small_model(1);
    let c = TrainConfig { alp_lambda: -1.0, ..cfg(1) };
    assert!(train_alp(&ds, &mut m, &mut h, &c).is_err());
}

#[test]
fn identical_examples_give_ln_n() {
    let heads = ScoreHeads::default_for(8, 4).unwrap();
    for n in [2usize, 3, 7, 10] {
        let z = Tensor::matrix(n, 8, [0.1, 0.7, 0.2, 0.0, 0.9, 0.3, 0.5, 0.4].repeat(n)).unwrap();
        assert_eq!(contrast_loss(&heads, &z, &z).unwrap(), (n as f64).ln());
    }
}

#[test]
fn ssl_pretraining_reduces_loss_and_ignores_labels() {
    let train = two_class(7, 100);
    let spec = EncoderSpec::new(vec![LayerSpec::relu(6, 32), LayerSpec::relu(32, 16)]);
    let init = EncoderModel::init(&spec, 2).unwrap();
    let heads0 = ScoreHeads::init(16, 16, 16, 1.0, 3).unwrap();
    let c = TrainConfig { epochs: 5, batch_size: 20, lr: 1e-3, seed: 9, ..Default::default() };
    let (mut m1, mut h1) = (init.clone(), heads0.clone());
    let log = pretrain_ssl(&train, &mut m1, &mut h1, &c).unwrap();
    assert!(log.epoch_losses[4] < log.epoch_losses[0], "{:?}", log.epoch_losses);
    let flipped = train.with_labels(train.labels().iter().map(|l| 1 - l).collect()).unwrap();
    let (mut m2, mut h2) = (init, heads0);
    pretrain_ssl(&flipped, &mut m2, &mut h2, &c).unwrap();
    assert_eq!((m1, h1), (m2, h2));
}
