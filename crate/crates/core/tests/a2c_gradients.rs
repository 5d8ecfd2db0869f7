//! Actor-critic loss gradients against central differences.

use mia_autograd::Tape;
use mia_former::config::{MiaConfig, ValidConfig};
use mia_former::controller::DimensionSet;
use mia_former::model::{batch_noise, forward_graph, GraphPolicy};
use mia_former::params::{init_layout, init_model, rl_head_layout, Bound, ParamStore};
use mia_former::train::losses::a2c_graph;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Setup {
    cfg: ValidConfig,
    images: Array2<f64>,
    rewards: Vec<f64>,
}

/// Summed value loss and summed total loss, with parameter gradients of each.
fn losses(s: &Setup, store: &ParamStore<f64>) -> ((f64, ParamStore<f64>), (f64, ParamStore<f64>)) {
    let run = |pick_value: bool| {
        let mut tape = Tape::new();
        let p = Bound::new(&mut tape, store, &|_| true);
        let x = tape.constant(s.images.clone());
        let ids: Vec<u64> = (0..s.rewards.len() as u64).collect();
        let noise = batch_noise(&s.cfg, 5, 0, &ids);
        let policy = GraphPolicy::Sampled {
            noise: Some(&noise),
            dims: DimensionSet::ALL,
        };
        let out = forward_graph(&mut tape, &p, &s.cfg, x, ids.len(), policy);
        let mut total = None;
        for (l, blk) in out.blocks.iter().enumerate() {
            let g = a2c_graph(&mut tape, &p, l, blk.ctrl.as_ref().unwrap(), blk.masks.as_ref().unwrap(), DimensionSet::ALL, &s.rewards, 0.5, 0.01);
            let part = tape.sum_all(if pick_value { g.value } else { g.loss });
            total = Some(match total {
                Some(t) => tape.add(t, part),
                None => part,
            });
        }
        let total = total.unwrap();
        let v = tape.value(total)[[0, 0]];
        let mut grads = tape.backward(total);
        (v, p.collect(&tape, &mut grads))
    };
    (run(true), run(false))
}

fn check(s: &Setup, store: &ParamStore<f64>, names: &[&str], value: bool, rng: &mut ChaCha8Rng) {
    let (vl, tl) = losses(s, store);
    let grads = if value { vl.1 } else { tl.1 };
    let h = 1e-6;
    for name in names {
        let t = store.get(name);
        for _ in 0..3 {
            let (r, c) = (rng.random_range(0..t.nrows()), rng.random_range(0..t.ncols()));
            let mut p = store.clone();
            p.get_mut(name)[[r, c]] += h;
            let (a, b) = losses(s, &p);
            let up = if value { a.0 } else { b.0 };
            p.get_mut(name)[[r, c]] -= 2.0 * h;
            let (a, b) = losses(s, &p);
            let down = if value { a.0 } else { b.0 };
            let fd = (up - down) / (2.0 * h);
            let an = grads.get(name)[[r, c]];
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            assert!(err < 1e-4, "{name}[{r},{c}]: analytic {an}, numeric {fd}");
        }
    }
}

fn setup() -> (Setup, ParamStore<f64>) {
    let cfg = MiaConfig::tiny_vit().validate().unwrap();
    let mut store: ParamStore<f64> = init_model(&cfg, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    init_layout(&mut store, &rl_head_layout(&cfg), &mut rng);
    for (name, t) in store.iter_mut() {
        if name.contains(".critic_") || name.contains(".actor_") {
            t.mapv_inplace(|v| v * 20.0);
        }
    }
    let images = Array2::from_shape_fn((3, cfg.image_len), |_| rng.random::<f64>());
    (
        Setup {
            cfg,
            images,
            rewards: vec![0.9, -0.3, 0.4],
        },
        store,
    )
}

#[test]
fn value_loss_gradients_match_differences() {
    let (s, store) = setup();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let names = ["ctrl.0.critic_b.weight", "ctrl.1.critic_h.weight", "ctrl.2.critic_n.bias", "ctrl.3.critic_b.bias", "ctrl.1.cnn.conv1.weight", "ctrl.2.mlp_n.fc2.weight"];
    check(&s, &store, &names, true, &mut rng);
}

#[test]
fn actor_loss_gradients_match_differences() {
    let (s, store) = setup();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let names = ["ctrl.0.actor_b.weight", "ctrl.1.actor_h.weight", "ctrl.2.actor_n.weight", "ctrl.3.actor_n.bias"];
    check(&s, &store, &names, false, &mut rng);
}

#[test]
fn backbone_receives_no_actor_critic_gradient() {
    let (s, store) = setup();
    let (_, (_, grads)) = losses(&s, &store);
    for (name, g) in grads.iter() {
        if !name.starts_with("ctrl.") {
            assert!(g.iter().all(|&v| v == 0.0), "{name}");
        }
    }
}
