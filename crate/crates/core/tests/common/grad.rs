//! Central finite differences against autograd, in double precision.
//! Each check returns the largest relative error over its coordinates.

use super::fixtures::{double, random_batch, tiny_config};
use super::oracle::{cos, random_mat, random_unit_rows, tensor, Mat};
use d2ca::model::D2ca;
use d2ca::objectives::{self as obj, AdversarialRole, CycleFeatures, LossTerms, LossWeights};
use d2ca::train::generator_objective;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tch::{Kind, Tensor};

const H: f64 = 1e-6;
const COORDS: usize = 10;
pub const MAX_REL: f64 = 1e-3;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-7)
}

fn add_at(t: &Tensor, i: i64, delta: f64) {
    tch::no_grad(|| {
        let _ = t.view([-1]).narrow(0, i, 1).g_add_scalar_(delta);
    });
}

fn value(t: &Tensor) -> f64 {
    t.double_value(&[])
}

/// Compares gradients of `f` with respect to `inputs` at random coordinates.
fn check(inputs: &[Tensor], f: impl Fn(&[Tensor]) -> Tensor, rng: &mut ChaCha8Rng) -> f64 {
    let leaves: Vec<Tensor> = inputs.iter().map(|t| t.to_kind(Kind::Double).detach().set_requires_grad(true)).collect();
    let loss = f(&leaves);
    let grads = Tensor::run_backward(&[&loss], &leaves, false, false);
    // An input the loss does not depend on has an undefined gradient.
    let grads: Vec<Tensor> = grads
        .into_iter()
        .zip(&leaves)
        .map(|(g, l)| if g.defined() { g } else { l.zeros_like() })
        .collect();
    let mut worst = 0.0f64;
    for _ in 0..COORDS {
        let which = rng.gen_range(0..leaves.len());
        let numel = leaves[which].numel() as i64;
        let i = rng.gen_range(0..numel);
        let analytic = value(&grads[which].view([-1]).get(i));
        let eval = || tch::no_grad(|| value(&f(&leaves)));
        add_at(&leaves[which], i, H);
        let up = eval();
        add_at(&leaves[which], i, -2.0 * H);
        let down = eval();
        add_at(&leaves[which], i, H);
        let numeric = (up - down) / (2.0 * H);
        worst = worst.max(rel_err(analytic, numeric));
    }
    worst
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(5)
}

fn t(m: &Mat) -> Tensor {
    tensor(m)
}

pub fn orthogonality() -> f64 {
    let mut r = rng();
    let ins: Vec<Tensor> = (0..4).map(|_| t(&random_mat(&mut r, 4, 6, -1.0, 1.0))).collect();
    check(&ins, |x| obj::loss_orthogonality(&x[0], &x[1], &x[2], &x[3]).unwrap(), &mut r)
}

pub fn au_bce() -> f64 {
    let mut r = rng();
    let z: Mat = (0..4).map(|_| (0..5).map(|_| r.gen_range(0..2) as f64).collect()).collect();
    let zt = t(&z);
    let p = t(&random_mat(&mut r, 4, 5, 0.05, 0.95));
    check(&[p], |x| obj::loss_au_bce(&zt, &x[0]).unwrap(), &mut r)
}

pub fn representation() -> f64 {
    let mut r = rng();
    let ins: Vec<Tensor> = (0..8).map(|_| t(&random_mat(&mut r, 3, 5, -1.0, 1.0))).collect();
    let f = |x: &[Tensor]| {
        let (a, b) = obj::loss_representation_alignment(&CycleFeatures {
            au_s: &x[0],
            au_t: &x[1],
            dm_s: &x[2],
            dm_t: &x[3],
            au_st: &x[4],
            dm_st: &x[5],
            au_ts: &x[6],
            dm_ts: &x[7],
        })
        .unwrap();
        a + b * 0.5
    };
    check(&ins, f, &mut r)
}

pub fn reconstruction() -> f64 {
    let mut r = rng();
    // Differences bounded away from 0 so the absolute value is smooth.
    let base: Vec<f64> = (0..2 * 3 * 4 * 4).map(|_| r.gen()).collect();
    let off: Vec<f64> = base.iter().map(|v| v + if r.gen_bool(0.5) { 0.1 } else { -0.1 }).collect();
    let a = Tensor::from_slice(&base).reshape([2, 3, 4, 4]);
    let b = Tensor::from_slice(&off).reshape([2, 3, 4, 4]);
    check(&[a, b], |x| obj::loss_l1(&x[0], &x[1]).unwrap(), &mut r)
}

pub fn adversarial() -> f64 {
    let mut r = rng();
    let real = t(&random_mat(&mut r, 2, 16, 0.05, 0.95)).reshape([2, 1, 4, 4]);
    let fake = t(&random_mat(&mut r, 2, 16, 0.05, 0.95)).reshape([2, 1, 4, 4]);
    let ins = [real, fake];
    let d = check(
        &ins,
        |x| obj::loss_adversarial(&x[0], &x[1], AdversarialRole::Discriminator).unwrap(),
        &mut r,
    );
    let g = check(
        &ins,
        |x| obj::loss_adversarial(&x[0], &x[1], AdversarialRole::Generator).unwrap(),
        &mut r,
    );
    d.max(g)
}

fn decoupling_of(x: &[Tensor], w: &LossWeights) -> Tensor {
    obj::loss_decoupling_tensor(
        &LossTerms {
            ort: x[0].shallow_clone(),
            au_s: x[1].shallow_clone(),
            au_t: x[2].shallow_clone(),
            rep_s: x[3].shallow_clone(),
            rep_t: x[4].shallow_clone(),
            rec_s: x[5].shallow_clone(),
            rec_t: x[6].shallow_clone(),
            adv_s: x[7].shallow_clone(),
            adv_t: x[8].shallow_clone(),
        },
        w,
    )
}

fn scalars(r: &mut ChaCha8Rng, n: usize) -> Vec<Tensor> {
    (0..n).map(|_| Tensor::from(r.gen_range(0.0..2.0f64))).collect()
}

pub fn decoupling() -> f64 {
    let mut r = rng();
    let w = LossWeights::default();
    let ins = scalars(&mut r, 9);
    check(&ins, |x| decoupling_of(x, &w), &mut r)
}

pub fn total() -> f64 {
    let mut r = rng();
    let w = LossWeights::default();
    let ins = scalars(&mut r, 11);
    check(&ins, |x| obj::loss_total_tensor(&decoupling_of(x, &w), &x[9], &x[10], w.lambda), &mut r)
}

pub fn icl() -> f64 {
    let mut r = rng();
    let emb = t(&random_unit_rows(&mut r, 8, 6));
    let pairs = [(0, 4), (1, 5), (2, 6), (3, 7)];
    check(&[emb], |x| obj::loss_icl(&x[0], &pairs, 0.3).unwrap(), &mut r)
}

pub fn fcl() -> f64 {
    let mut r = rng();
    let trip = [(0, 1, 2), (1, 0, 3), (2, 3, 4), (3, 2, 5), (4, 5, 0), (5, 4, 1)];
    let alpha = 0.1;
    // Redraw until every hinge is clearly active or clearly inactive.
    let feats = loop {
        let f = random_mat(&mut r, 6, 5, -1.0, 1.0);
        let clear = trip
            .iter()
            .all(|&(i, j, k)| (alpha - cos(&f[i], &f[j]) + cos(&f[i], &f[k])).abs() > 1e-2);
        let active = trip.iter().any(|&(i, j, k)| alpha - cos(&f[i], &f[j]) + cos(&f[i], &f[k]) > 0.0);
        if clear && active {
            break f;
        }
    };
    check(&[t(&feats)], |x| obj::loss_fcl(&x[0], &trip, alpha).unwrap(), &mut r)
}

/// Full gradient of `L_tot` with respect to every parameter. The cycle
/// alignment stop-gradient is switched off here, since finite differences
/// see the reference features move.
pub fn end_to_end_total_objective() -> f64 {
    let mut config = tiny_config(3);
    config.rep_stop_gradient = false;
    let mut model = D2ca::new(&config.model, config.seed).unwrap();
    model.to_double();
    let batch = double(&random_batch(&config.model, 4, 9));
    let params = model.named_parameters();
    let tensors: Vec<Tensor> = params.iter().map(|(_, p)| p.shallow_clone()).collect();
    let objective = || generator_objective(&model, &config, &batch, 0).unwrap().total;
    let grads = Tensor::run_backward(&[&objective()], &tensors, false, true);
    let mut r = rng();
    let mut checked = 0;
    let mut worst = 0.0f64;
    while checked < COORDS {
        let k = r.gen_range(0..tensors.len());
        if !grads[k].defined() {
            continue;
        }
        let i = r.gen_range(0..tensors[k].numel() as i64);
        let analytic = value(&grads[k].view([-1]).get(i));
        let eval = || tch::no_grad(|| value(&objective()));
        add_at(&tensors[k], i, H);
        let up = eval();
        add_at(&tensors[k], i, -2.0 * H);
        let down = eval();
        add_at(&tensors[k], i, H);
        let numeric = (up - down) / (2.0 * H);
        worst = worst.max(rel_err(analytic, numeric));
        checked += 1;
    }
    worst
}

/// Every check, by name.
pub fn all() -> Vec<(&'static str, fn() -> f64)> {
    vec![
        ("orthogonality", orthogonality),
        ("au_bce", au_bce),
        ("representation", representation),
        ("reconstruction", reconstruction),
        ("adversarial", adversarial),
        ("decoupling", decoupling),
        ("total", total),
        ("icl", icl),
        ("fcl", fcl),
        ("end_to_end", end_to_end_total_objective),
    ]
}
