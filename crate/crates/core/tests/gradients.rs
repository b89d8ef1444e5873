mod common;

use mdcm::losses::LossConfig;
use mdcm::model::{check_param_gradients, AblationConfig, Model};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn check(ablation: AblationConfig) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (model, store) = Model::new(&common::toy_config(ablation), &mut rng).unwrap();
    let images: Vec<_> = (0..4).map(|_| common::random_image(&mut rng, 16, 16)).collect();
    let r = check_param_gradients(&model, &store, &images, &[0, 2, 1, 0], &LossConfig::default(), 3, 1e-5, &mut rng)
        .unwrap();
    assert!(r.probes > 100);
    eprintln!("{r:?}");
    r.worst
}

#[test]
fn full_model_gradients() {
    let w = check(AblationConfig::FULL);
    assert!(w < 1e-4, "max relative error {w}");
}

#[test]
fn baseline_gradients() {
    let w = check(AblationConfig::BASELINE);
    assert!(w < 1e-4, "max relative error {w}");
}
