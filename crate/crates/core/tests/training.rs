mod common;

use common::ellipsoid_labels;
use indexmap::IndexMap;
use lms_core::phantom::{generate_phantoms, Ellipsoid, PhantomSpec};
use lms_core::train::{AdamW, Schedule, TrainConfig, Trainer};
use lms_core::{InitScheme, LightMedSeg, ModelConfig, ParamStore, Tensor};

#[test]
fn phantom_labels_match_point_in_ellipsoid_scan() {
    let mut spec = PhantomSpec::single(32, 11);
    spec.num_classes = 3;
    spec.primitives.push(Ellipsoid {
        class: 2,
        center: [12.0, 18.0, 15.5],
        radii: [4.0, 6.5, 3.0],
        intensity: 2.0,
        noise: 0.1,
    });
    for p in generate_phantoms(&spec, 4).unwrap() {
        let want = ellipsoid_labels(spec.extents, &p.primitives);
        assert_eq!(p.labels.data(), &want[..]);
        let counts: Vec<usize> = (0..3).map(|c| want.iter().filter(|&&v| v == c).count()).collect();
        assert_eq!(p.labels.counts(), counts);
    }
}

#[test]
fn clipped_primitive_is_clipped_not_rejected() {
    let mut spec = PhantomSpec::single(16, 0);
    spec.center_jitter = 0.0;
    spec.radius_jitter = 0.0;
    spec.primitives[0].center = [0.0, 8.0, 8.0];
    let p = generate_phantoms(&spec, 1).unwrap().remove(0);
    assert_eq!(p.labels.data(), &ellipsoid_labels([16; 3], &p.primitives)[..]);
}

#[test]
fn single_centered_ellipsoid_has_exactly_two_classes() {
    let mut spec = PhantomSpec::single(32, 5);
    spec.center_jitter = 0.0;
    spec.radius_jitter = 0.0;
    let p = generate_phantoms(&spec, 1).unwrap().remove(0);
    let present = p.labels.counts().iter().filter(|&&c| c > 0).count();
    assert_eq!(present, 2);
}

#[test]
fn two_adamw_steps_match_hand_recurrence() {
    let cfg = TrainConfig {
        weight_decay: 0.01,
        ..Default::default()
    };
    let mut store = ParamStore::default();
    store.insert("p", Tensor::new(vec![2], vec![0.5f32, -2.0]).unwrap(), true).unwrap();
    let mut opt = AdamW::new(&cfg);
    let grads = [[0.3f32, -1.0], [-0.2, 0.4]];
    let lrs = [1e-2, 5e-3];
    for (g, &lr) in grads.iter().zip(&lrs) {
        let mut map = IndexMap::new();
        map.insert("p".to_string(), Tensor::new(vec![2], g.to_vec()).unwrap());
        opt.update(&mut store, &map, lr).unwrap();
    }
    for (i, &x0) in [0.5f64, -2.0].iter().enumerate() {
        let (b1, b2, eps, wd) = (0.9f64, 0.999f64, 1e-8, 0.01);
        let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
        for t in 0..2 {
            let g = grads[t][i] as f64;
            x *= 1.0 - lrs[t] * wd;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32 + 1));
            let vh = v / (1.0 - b2.powi(t as i32 + 1));
            x -= lrs[t] * mh / (vh.sqrt() + eps);
        }
        let got = store.value("p").unwrap().data()[i] as f64;
        assert!((got - x).abs() < 1e-6, "entry {i}: {got} vs {x}");
    }
}

#[test]
fn schedule_warmup_and_restarts() {
    let cfg = TrainConfig::default();
    let s = Schedule::new(&cfg, 4);
    assert_eq!(s.lr(0), 0.0);
    for step in 1..20 {
        assert!(s.lr(step) > s.lr(step - 1));
    }
    assert_eq!(s.lr(20), 2e-4);
    let period: Vec<f64> = (20..420).map(|i| s.lr(i)).collect();
    assert!(period.windows(2).all(|w| w[1] <= w[0]));
    assert!(period.iter().all(|&v| v >= 1e-9));
    assert_eq!(s.lr(420), 2e-4);
}

fn tiny_run(epochs: usize, lr: f64) -> (ParamStore<f32>, ParamStore<f32>, Vec<f64>) {
    let model = LightMedSeg::new(ModelConfig::toy()).unwrap();
    let store = model.init_params::<f32>(InitScheme::Standard, 4).unwrap();
    let data = generate_phantoms(&PhantomSpec::single(16, 4), 2).unwrap();
    let cfg = TrainConfig {
        epochs,
        lr,
        warmup_epochs: 1,
        eval_every: 1,
        ..Default::default()
    };
    let mut t = Trainer::new(&model, store.clone(), cfg).unwrap();
    let log = t.train(&data).unwrap();
    (store, t.store, log.epochs.iter().map(|e| e.loss.total).collect())
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let (before, after, _) = tiny_run(1, 0.0);
    for (a, b) in before.iter().zip(after.iter()) {
        assert!(a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()), "{}", a.name);
    }
}

#[test]
fn training_is_reproducible() {
    let (_, a, la) = tiny_run(2, 2e-4);
    let (_, b, lb) = tiny_run(2, 2e-4);
    assert_eq!(la, lb);
    for (x, y) in a.iter().zip(b.iter()) {
        assert!(x.value.data().iter().zip(y.value.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
