//! Scalar-loop references for every objective, plus random case drivers.

use d2ca::objectives::{self as obj, AdversarialRole, CycleFeatures, LossTerms, LossWeights};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tch::{Kind, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn tensor(m: &Mat) -> Tensor {
    let flat: Vec<f64> = m.iter().flatten().copied().collect();
    Tensor::from_slice(&flat).reshape([m.len() as i64, m[0].len() as i64])
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_kind(Kind::Double).double_value(&[])
}

pub fn random_mat(rng: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Mat {
    (0..rows).map(|_| (0..cols).map(|_| rng.gen_range(lo..hi)).collect()).collect()
}

pub fn random_unit_rows(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    random_mat(rng, rows, cols, -1.0, 1.0)
        .into_iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / n).collect()
        })
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a) * dot(b, b)).sqrt()
}

pub fn ref_orthogonality(au_s: &Mat, dm_s: &Mat, au_t: &Mat, dm_t: &Mat) -> f64 {
    let mean_cos = |a: &Mat, b: &Mat| {
        let mut s = 0.0;
        for i in 0..a.len() {
            s += cos(&a[i], &b[i]);
        }
        s / a.len() as f64
    };
    mean_cos(au_s, dm_s) + mean_cos(au_t, dm_t)
}

pub fn ref_bce(z: &Mat, p: &Mat) -> f64 {
    let mut total = 0.0;
    for i in 0..z.len() {
        for k in 0..z[i].len() {
            total -= z[i][k] * p[i][k].ln() + (1.0 - z[i][k]) * (1.0 - p[i][k]).ln();
        }
    }
    total / z.len() as f64
}

fn mean_sq(a: &Mat, b: &Mat) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        for k in 0..a[i].len() {
            s += (a[i][k] - b[i][k]).powi(2);
        }
    }
    s / a.len() as f64
}

/// Features in the order au_s, au_t, dm_s, dm_t, au_st, dm_st, au_ts, dm_ts.
pub fn ref_rep(f: &[Mat; 8]) -> (f64, f64) {
    let [au_s, au_t, dm_s, dm_t, au_st, dm_st, au_ts, dm_ts] = f;
    (
        mean_sq(au_t, au_st) + mean_sq(dm_s, dm_st),
        mean_sq(au_s, au_ts) + mean_sq(dm_t, dm_ts),
    )
}

pub fn ref_l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

pub fn ref_adv_discriminator(real: &[f64], fake: &[f64]) -> f64 {
    let lr: f64 = real.iter().map(|p| p.ln()).sum::<f64>() / real.len() as f64;
    let lf: f64 = fake.iter().map(|p| (1.0 - p).ln()).sum::<f64>() / fake.len() as f64;
    lr + lf
}

pub fn ref_adv_generator(fake: &[f64]) -> f64 {
    -fake.iter().map(|p| p.ln()).sum::<f64>() / fake.len() as f64
}

pub fn ref_deco(t: &[f64; 9], w: &LossWeights) -> f64 {
    let [ort, au_s, au_t, rep_s, rep_t, rec_s, rec_t, adv_s, adv_t] = *t;
    let mut s = au_s + au_t;
    s += w.gamma_rep * (rep_s + rep_t);
    s += w.gamma_rec * (rec_s + rec_t);
    s += w.gamma_adv * (adv_s + adv_t);
    s += w.gamma_ort * ort;
    s
}

pub fn ref_icl(emb: &Mat, pairs: &[(usize, usize)], tau: f64) -> f64 {
    let m = emb.len();
    let mut partner = vec![None; m];
    for &(a, b) in pairs {
        partner[a] = Some(b);
        partner[b] = Some(a);
    }
    let mut total = 0.0;
    let mut anchors = 0;
    for i in 0..m {
        let Some(p) = partner[i] else { continue };
        let mut denom = 0.0;
        for j in 0..m {
            if j != i {
                denom += (dot(&emb[i], &emb[j]) / tau).exp();
            }
        }
        total -= (dot(&emb[i], &emb[p]) / tau).exp().ln() - denom.ln();
        anchors += 1;
    }
    total / anchors as f64
}

pub fn ref_fcl(f: &Mat, triplets: &[(usize, usize, usize)], alpha: f64) -> f64 {
    let mut s = 0.0;
    for &(i, j, k) in triplets {
        s += (alpha - cos(&f[i], &f[j]) + cos(&f[i], &f[k])).max(0.0);
    }
    s / triplets.len() as f64
}

/// Random disjoint positive pairs over `m` indices (at least one pair).
pub fn random_pairs(rng: &mut impl Rng, m: usize) -> Vec<(usize, usize)> {
    let mut idx: Vec<usize> = (0..m).collect();
    idx.shuffle(rng);
    let n_pairs = rng.gen_range(1..=m / 2);
    (0..n_pairs).map(|p| (idx[2 * p], idx[2 * p + 1])).collect()
}

/// Random triplets with `id[i] = id[j] != id[k]` over a batch with identities.
pub fn random_triplets(rng: &mut impl Rng, ids: &[u32]) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for i in 0..ids.len() {
        for j in 0..ids.len() {
            for k in 0..ids.len() {
                if i != j && ids[i] == ids[j] && ids[k] != ids[i] && rng.gen_bool(0.5) {
                    out.push((i, j, k));
                }
            }
        }
    }
    if out.is_empty() {
        out.push((0, 1, 2));
    }
    out
}

pub struct OracleOutcome {
    pub name: &'static str,
    pub cases: usize,
    pub max_abs_diff: f64,
}

fn track(out: &mut Vec<OracleOutcome>, name: &'static str, diff: f64) {
    match out.iter_mut().find(|o| o.name == name) {
        Some(o) => {
            o.cases += 1;
            o.max_abs_diff = o.max_abs_diff.max(diff);
        }
        None => out.push(OracleOutcome {
            name,
            cases: 1,
            max_abs_diff: diff,
        }),
    }
}

/// Runs `cases` random inputs through every objective and its reference.
pub fn run_loss_oracles(seed: u64, cases: usize) -> Vec<OracleOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for _ in 0..cases {
        let b = rng.gen_range(1..6);
        let d = rng.gen_range(2..9);

        let m: Vec<Mat> = (0..4).map(|_| random_mat(&mut rng, b, d, -2.0, 2.0)).collect();
        let got = scalar(&obj::loss_orthogonality(&tensor(&m[0]), &tensor(&m[1]), &tensor(&m[2]), &tensor(&m[3])).unwrap());
        track(&mut out, "orthogonality", (got - ref_orthogonality(&m[0], &m[1], &m[2], &m[3])).abs());

        let k = rng.gen_range(1..6);
        let z: Mat = (0..b).map(|_| (0..k).map(|_| rng.gen_range(0..2) as f64).collect()).collect();
        let p = random_mat(&mut rng, b, k, 0.01, 0.99);
        let got = scalar(&obj::loss_au_bce(&tensor(&z), &tensor(&p)).unwrap());
        track(&mut out, "au_bce", (got - ref_bce(&z, &p)).abs());

        let f: [Mat; 8] = std::array::from_fn(|_| random_mat(&mut rng, b, d, -1.5, 1.5));
        let ft: Vec<Tensor> = f.iter().map(tensor).collect();
        let (rs, rt) = obj::loss_representation_alignment(&CycleFeatures {
            au_s: &ft[0],
            au_t: &ft[1],
            dm_s: &ft[2],
            dm_t: &ft[3],
            au_st: &ft[4],
            dm_st: &ft[5],
            au_ts: &ft[6],
            dm_ts: &ft[7],
        })
        .unwrap();
        let (es, et) = ref_rep(&f);
        track(&mut out, "representation", (scalar(&rs) - es).abs().max((scalar(&rt) - et).abs()));

        let n_px = b * 3 * 4 * 4;
        let a: Vec<f64> = (0..n_px).map(|_| rng.gen()).collect();
        let h: Vec<f64> = (0..n_px).map(|_| rng.gen()).collect();
        let shape = [b as i64, 3, 4, 4];
        let got = scalar(&obj::loss_l1(&Tensor::from_slice(&a).reshape(shape), &Tensor::from_slice(&h).reshape(shape)).unwrap());
        track(&mut out, "reconstruction", (got - ref_l1(&a, &h)).abs());

        let g = rng.gen_range(1..5);
        let real: Vec<f64> = (0..b * g * g).map(|_| rng.gen_range(0.01..0.99)).collect();
        let fake: Vec<f64> = (0..b * g * g).map(|_| rng.gen_range(0.01..0.99)).collect();
        let sh = [b as i64, 1, g as i64, g as i64];
        let (rt_, ft_) = (Tensor::from_slice(&real).reshape(sh), Tensor::from_slice(&fake).reshape(sh));
        let dv = scalar(&obj::loss_adversarial(&rt_, &ft_, AdversarialRole::Discriminator).unwrap());
        let gv = scalar(&obj::loss_adversarial(&rt_, &ft_, AdversarialRole::Generator).unwrap());
        track(
            &mut out,
            "adversarial",
            (dv - ref_adv_discriminator(&real, &fake)).abs().max((gv - ref_adv_generator(&fake)).abs()),
        );

        let terms: [f64; 9] = std::array::from_fn(|_| rng.gen_range(0.0..3.0));
        let w = LossWeights {
            gamma_rep: rng.gen_range(0.0..2.0),
            gamma_rec: rng.gen_range(0.0..10.0),
            gamma_adv: rng.gen_range(0.0..1.0),
            gamma_ort: rng.gen_range(0.0..2.0),
            lambda: rng.gen_range(0.0..1.0),
            ..LossWeights::default()
        };
        let lt = LossTerms {
            ort: terms[0],
            au_s: terms[1],
            au_t: terms[2],
            rep_s: terms[3],
            rep_t: terms[4],
            rec_s: terms[5],
            rec_t: terms[6],
            adv_s: terms[7],
            adv_t: terms[8],
        };
        let deco = obj::loss_decoupling(&lt, &w);
        let tensor_terms = LossTerms {
            ort: Tensor::from(terms[0]),
            au_s: Tensor::from(terms[1]),
            au_t: Tensor::from(terms[2]),
            rep_s: Tensor::from(terms[3]),
            rep_t: Tensor::from(terms[4]),
            rec_s: Tensor::from(terms[5]),
            rec_t: Tensor::from(terms[6]),
            adv_s: Tensor::from(terms[7]),
            adv_t: Tensor::from(terms[8]),
        };
        let deco_t = scalar(&obj::loss_decoupling_tensor(&tensor_terms, &w));
        let expect = ref_deco(&terms, &w);
        track(&mut out, "decoupling", (deco - expect).abs().max((deco_t - expect).abs()));

        let (icl, fcl) = (rng.gen_range(0.0..3.0), rng.gen_range(0.0..1.0));
        let tot = obj::loss_total(deco, icl, fcl, w.lambda);
        let tot_t = scalar(&obj::loss_total_tensor(&Tensor::from(deco), &Tensor::from(icl), &Tensor::from(fcl), w.lambda));
        let expect = deco + w.lambda * (icl + fcl);
        track(&mut out, "total", (tot - expect).abs().max((tot_t - expect).abs()));

        let m_emb = 2 * rng.gen_range(1..7);
        let emb = random_unit_rows(&mut rng, m_emb, d);
        let pairs = random_pairs(&mut rng, m_emb);
        let tau = rng.gen_range(0.05..1.0);
        let got = scalar(&obj::loss_icl(&tensor(&emb), &pairs, tau).unwrap());
        let expect = ref_icl(&emb, &pairs, tau);
        track(&mut out, "icl", (got - expect).abs());

        let nb = rng.gen_range(3..9);
        let mut ids = vec![0, 0, 7];
        ids.extend((3..nb).map(|_| rng.gen_range(0..3u32)));
        let feats = random_mat(&mut rng, nb, d, -1.0, 1.0);
        let trip = random_triplets(&mut rng, &ids);
        let alpha = rng.gen_range(0.0..0.5);
        let got = scalar(&obj::loss_fcl(&tensor(&feats), &trip, alpha).unwrap());
        track(&mut out, "fcl", (got - ref_fcl(&feats, &trip, alpha)).abs());
    }
    out
}

/// `(label, got, expected, tolerance)` for the hand-evaluated examples.
pub fn hand_values() -> Vec<(&'static str, f64, f64, f64)> {
    let z = tensor(&vec![vec![1.0, 0.0]]);
    let half = tensor(&vec![vec![0.5, 0.5]]);
    let bce = scalar(&obj::loss_au_bce(&z, &half).unwrap());
    let adv = scalar(&obj::loss_adversarial(&half, &half, AdversarialRole::Discriminator).unwrap());
    let e = Tensor::eye(8, (Kind::Double, tch::Device::Cpu));
    let icl = scalar(&obj::loss_icl(&e, &[(0, 4), (1, 5), (2, 6), (3, 7)], 1.0).unwrap());
    // Unit components: L_au = L_rep = L_rec = 1, L_adv^s = L_adv^t = 1, L_ort = 1.
    let unit = LossTerms {
        ort: 1.0,
        au_s: 0.5,
        au_t: 0.5,
        rep_s: 0.5,
        rep_t: 0.5,
        rec_s: 0.5,
        rec_t: 0.5,
        adv_s: 1.0,
        adv_t: 1.0,
    };
    let deco = obj::loss_decoupling(&unit, &LossWeights::default());
    let total = obj::loss_total(8.2, 1.9459, 0.1, 0.1);
    vec![
        ("bce 2 ln 2", bce, 1.38629, 1e-5),
        ("discriminator at 0.5", adv, -1.38629, 1e-5),
        ("infonce uniform M=6", icl, 1.94591, 1e-5),
        ("decoupling unit components", deco, 8.2, 1e-12),
        ("total", total, 8.40459, 1e-9),
    ]
}
