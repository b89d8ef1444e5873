#![allow(dead_code)]

use mdcm::backbone::BackboneConfig;
use mdcm::model::{AblationConfig, ModelConfig};
use mdcm::params::{ParamStore, Session};
use mdcm::tensor::{rel_err, Tensor, Var};
use rand::Rng;

/// 16×16 images, one-pixel patches, stage dims 8..64.
pub fn toy_config(ablation: AblationConfig) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            image_h: 16,
            image_w: 16,
            channels: 3,
            patch_size: 1,
            stage_dims: [8, 16, 32, 64],
            stage_depths: [1, 1, 1, 1],
            stage_heads: [1, 2, 2, 4],
            n_classes: 3,
            kv_pool_stride: 1,
            mlp_ratio: 2,
        },
        ablation,
        ..ModelConfig::default()
    }
}

pub fn random_image(rng: &mut impl Rng, h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[h, w, 3], |_| rng.random::<f64>())
}

/// Largest relative error between the analytic gradient of `f` with
/// respect to every trainable entry of `store` and central differences.
pub fn store_grad_err<F>(store: &ParamStore, f: F) -> f64
where
    F: Fn(&mut Session) -> mdcm::Result<Var>,
{
    let h = 1e-5;
    let analytic = {
        let mut s = Session::new(store, true);
        let out = f(&mut s).unwrap();
        let g = s.tape.backward(out).unwrap();
        s.param_grads(&g)
    };
    let eval = |st: &ParamStore| {
        let mut s = Session::new(st, true);
        let out = f(&mut s).unwrap();
        s.value(out).item()
    };
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for id in store.trainable_ids() {
        for j in 0..store.get(id).numel() {
            let x = store.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = x + h;
            let up = eval(&probe);
            probe.get_mut(id).data_mut()[j] = x - h;
            let down = eval(&probe);
            probe.get_mut(id).data_mut()[j] = x;
            let a = analytic[id.index()].as_ref().map_or(0.0, |g| g.data()[j]);
            worst = worst.max(rel_err(a, (up - down) / (2.0 * h)));
        }
    }
    worst
}

/// `sum(out ⊙ w)` for a fixed pseudo-random `w`.
pub fn project(s: &mut Session, out: Var, seed: u64) -> mdcm::Result<Var> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::from_fn(s.value(out).shape(), |_| rng.random_range(-1.0..1.0));
    let w = s.constant(w);
    let p = s.tape.mul(out, w)?;
    Ok(s.tape.sum(p))
}
