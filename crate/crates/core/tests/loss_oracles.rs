mod common;

use std::collections::HashSet;

use common::*;
use lms_core::loss::{
    boundary_loss, boundary_mask, ce_loss, class_weights, dice_loss, hard_dice, total_loss, LabelVolume, DICE_EPS,
};
use lms_core::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn eval(logits: &Tensor<f64>, f: impl for<'t> Fn(lms_core::Var<'t, f64>) -> lms_core::Var<'t, f64>) -> f64 {
    let tape = Tape::new();
    f(tape.constant(logits.clone())).value().item()
}

struct Case {
    logits: Tensor<f64>,
    probs: Vec<f64>,
    labels: LabelVolume,
    classes: usize,
    vol: usize,
}

impl Case {
    fn random(rng: &mut ChaCha8Rng, dims: [usize; 4], classes: usize) -> Self {
        let [b, d, h, w] = dims;
        let shape = [b, classes, d, h, w];
        let logits = random::<f64>(&shape, rng).map(|v| 3.0 * v);
        let probs = softmax_channels(logits.data(), &shape);
        let labels = random_labels(dims, classes, rng);
        Self {
            logits,
            probs,
            labels,
            classes,
            vol: d * h * w,
        }
    }

    fn p(&self, b: usize, c: usize, v: usize) -> f64 {
        self.probs[(b * self.classes + c) * self.vol + v]
    }

    fn y(&self, b: usize, v: usize) -> usize {
        self.labels.data()[b * self.vol + v] as usize
    }

    fn batch(&self) -> usize {
        self.labels.dims()[0]
    }
}

fn weights_oracle(labels: &LabelVolume) -> Vec<f64> {
    let n = labels.num_classes();
    let total = labels.data().len() as f64;
    (0..n)
        .map(|c| {
            let count = labels.data().iter().filter(|&&v| v as usize == c).count().max(1);
            total / (n as f64 * count as f64)
        })
        .collect()
}

fn ce_oracle(k: &Case, w: &[f64]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for b in 0..k.batch() {
        for v in 0..k.vol {
            let y = k.y(b, v);
            num += w[y] * -k.p(b, y, v).ln();
            den += w[y];
        }
    }
    num / den
}

fn dice_oracle(k: &Case, w: &[f64]) -> f64 {
    let mut acc = 0.0;
    for c in 0..k.classes {
        let (mut inter, mut ps, mut ys) = (0.0, 0.0, 0.0);
        for b in 0..k.batch() {
            for v in 0..k.vol {
                let y = f64::from(u8::from(k.y(b, v) == c));
                inter += k.p(b, c, v) * y;
                ps += k.p(b, c, v);
                ys += y;
            }
        }
        acc += w[c] * (1.0 - (2.0 * inter + DICE_EPS) / (ps + ys + DICE_EPS));
    }
    acc / w.iter().sum::<f64>()
}

fn boundary_oracle(k: &Case, w: &[f64], mask: &[bool]) -> f64 {
    let mut total = 0.0;
    for b in 0..k.batch() {
        for v in 0..k.vol {
            if !mask[b * k.vol + v] {
                continue;
            }
            for c in 0..k.classes {
                let p = k.p(b, c, v);
                total += w[c] * if k.y(b, v) == c { -p.ln() } else { -(1.0 - p).ln() };
            }
        }
    }
    total / mask.iter().filter(|&&m| m).count().max(1) as f64
}

#[test]
fn class_weights_match_counting_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let classes = rng.gen_range(2..=5);
        let labels = random_labels([rng.gen_range(1..=2), 3, 2, 4], classes, &mut rng);
        let got = class_weights(&labels);
        let want = weights_oracle(&labels);
        assert!(max_scaled_err(&got, &want) < 1e-14);
    }
    let clamp = LabelVolume::new([1, 1, 1, 200], [vec![0; 100], vec![2; 50], vec![3; 50]].concat(), 4).unwrap();
    let w = class_weights(&clamp);
    assert_eq!(w, vec![0.5, 50.0, 1.0, 1.0]);
}

#[test]
fn losses_match_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..30 {
        let classes = rng.gen_range(2..=4);
        let dims = [rng.gen_range(1..=2), 4, 4, 4];
        let k = Case::random(&mut rng, dims, classes);
        let w = class_weights(&k.labels);
        let mask = boundary_mask(&k.labels, 3);
        let ce = eval(&k.logits, |z| ce_loss(z, &k.labels, &w).unwrap());
        let dice = eval(&k.logits, |z| dice_loss(z, &k.labels, &w).unwrap());
        let bdry = eval(&k.logits, |z| boundary_loss(z, &k.labels, &mask, &w).unwrap());
        assert!((ce - ce_oracle(&k, &w)).abs() < 1e-10, "trial {trial} ce");
        assert!((dice - dice_oracle(&k, &w)).abs() < 1e-10, "trial {trial} dice");
        assert!((bdry - boundary_oracle(&k, &w, &mask.data)).abs() < 1e-6, "trial {trial} boundary");

        let tape = Tape::new();
        let (_, parts) = total_loss(tape.constant(k.logits.clone()), &k.labels).unwrap();
        assert!((parts.total - (dice + ce + 0.5 * bdry)).abs() < 1e-10);
        assert!(parts.total >= 0.0);
    }
}

#[test]
fn losses_are_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let k = Case::random(&mut rng, [1, 4, 4, 4], 3);
    let perm = [2usize, 0, 1];
    let vol = k.vol;
    let permuted_logits = Tensor::from_fn(vec![1, 3, 4, 4, 4], |i| {
        let (c, v) = (i / vol, i % vol);
        let src = perm.iter().position(|&p| p == c).unwrap();
        k.logits.data()[src * vol + v]
    });
    let permuted_labels =
        LabelVolume::new([1, 4, 4, 4], k.labels.data().iter().map(|&y| perm[y as usize] as u32).collect(), 3).unwrap();
    let w = class_weights(&k.labels);
    let mut pw = vec![0.0; 3];
    for (c, &p) in perm.iter().enumerate() {
        pw[p] = w[c];
    }
    let a = eval(&k.logits, |z| dice_loss(z, &k.labels, &w).unwrap());
    let b = eval(&permuted_logits, |z| dice_loss(z, &permuted_labels, &pw).unwrap());
    assert!((a - b).abs() < 1e-12);
    let a = eval(&k.logits, |z| ce_loss(z, &k.labels, &w).unwrap());
    let b = eval(&permuted_logits, |z| ce_loss(z, &permuted_labels, &pw).unwrap());
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn hard_dice_matches_set_intersection() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let classes = rng.gen_range(2..=4);
        let t = random_labels([1, 8, 8, 8], classes, &mut rng);
        let p = random_labels([1, 8, 8, 8], classes, &mut rng);
        let got = hard_dice(&p, &t).unwrap();
        for (c, &g) in got.iter().enumerate() {
            let set = |l: &LabelVolume| -> HashSet<usize> {
                l.data().iter().enumerate().filter(|(_, &v)| v as usize == c).map(|(i, _)| i).collect()
            };
            let (ps, ts) = (set(&p), set(&t));
            let want = if ps.is_empty() && ts.is_empty() {
                1.0
            } else {
                2.0 * ps.intersection(&ts).count() as f64 / (ps.len() + ts.len()) as f64
            };
            assert!((g - want).abs() < 1e-15);
        }
    }
}
