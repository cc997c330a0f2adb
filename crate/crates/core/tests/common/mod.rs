// Straight-line reference implementation and seeded instance generators.
// Deliberately shares no code with the library beyond the public types used
// to hand data across.

#![allow(dead_code)]

use adk::{DescriptorBank, FeatureVector, KnowledgeBank, Temperature};
use rand::Rng;
use rand_distr::StandardNormal;

pub struct Instance {
    pub tau: f64,
    pub hand: Vec<Vec<f64>>,
    /// desc[n][m]
    pub desc: Vec<Vec<Vec<f64>>>,
    pub v: Vec<f64>,
}

pub struct Oracle {
    pub p_hand: Vec<f64>,
    pub p_comp: Vec<f64>,
    pub p_inst: Vec<f64>,
    pub p_desc: Vec<f64>,
    pub fused: Vec<f64>,
    pub predicted: usize,
}

fn length(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn unit(a: &[f64]) -> Vec<f64> {
    let l = length(a);
    a.iter().map(|x| x / l).collect()
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    for i in 0..a.len() {
        ab += a[i] * b[i];
    }
    ab / (length(a) * length(b))
}

pub fn softmax_t(s: &[f64], tau: f64) -> Vec<f64> {
    let top = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|x| ((x - top) / tau).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

pub fn mean(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; rows[0].len()];
    for r in rows {
        for (o, x) in out.iter_mut().zip(r) {
            *o += x;
        }
    }
    out.iter().map(|x| x / rows.len() as f64).collect()
}

pub fn oracle(inst: &Instance) -> Oracle {
    let n = inst.hand.len();
    let tau = inst.tau;
    let v = &inst.v;
    let mut s_hand = vec![0.0; n];
    let mut s_comp = vec![0.0; n];
    let mut s_inst = vec![0.0; n];
    for c in 0..n {
        s_hand[c] = cos(v, &inst.hand[c]);
        s_comp[c] = cos(v, &mean(&inst.desc[c]));
        let sims: Vec<f64> = inst.desc[c].iter().map(|d| cos(v, d)).collect();
        let w = softmax_t(&sims, tau);
        let mut t = vec![0.0; v.len()];
        for (wm, d) in w.iter().zip(&inst.desc[c]) {
            for k in 0..t.len() {
                t[k] += wm * d[k];
            }
        }
        s_inst[c] = cos(v, &t);
    }
    let p_hand = softmax_t(&s_hand, tau);
    let p_comp = softmax_t(&s_comp, tau);
    let p_inst = softmax_t(&s_inst, tau);
    let p_desc: Vec<f64> = (0..n).map(|c| 0.5 * (p_comp[c] + p_inst[c])).collect();
    let fused: Vec<f64> = (0..n).map(|c| p_hand[c] + p_desc[c]).collect();
    let mut predicted = 0;
    for c in 1..n {
        if fused[c] > fused[predicted] {
            predicted = c;
        }
    }
    Oracle { p_hand, p_comp, p_inst, p_desc, fused, predicted }
}

pub fn oracle_loss(inst: &Instance, label: usize) -> f64 {
    let o = oracle(inst);
    -(o.p_hand[label].ln() + o.p_comp[label].ln() + o.p_inst[label].ln())
}

pub fn gaussian(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

/// Random instance with descriptors clustered around per-class centers so
/// attention weights are neither uniform nor one-hot.
pub fn random_instance(rng: &mut impl Rng, n: usize, m: usize, d: usize, tau: f64) -> Instance {
    let mut hand = Vec::new();
    let mut desc = Vec::new();
    for _ in 0..n {
        let center = unit(&gaussian(rng, d));
        let spread = rng.random_range(0.2..1.0);
        hand.push(unit(
            &center.iter().zip(gaussian(rng, d)).map(|(c, g)| c + 0.5 * g / (d as f64).sqrt()).collect::<Vec<_>>(),
        ));
        desc.push(
            (0..m)
                .map(|_| {
                    let g = gaussian(rng, d);
                    unit(&center.iter().zip(g).map(|(c, g)| c + spread * g / (d as f64).sqrt()).collect::<Vec<_>>())
                })
                .collect(),
        );
    }
    let scale = rng.random_range(0.5..2.0);
    let v = unit(&gaussian(rng, d)).into_iter().map(|x| x * scale).collect();
    Instance { tau, hand, desc, v }
}

pub fn fv(x: &[f64]) -> FeatureVector {
    FeatureVector::new(x.to_vec()).unwrap()
}

/// Library-side view of an instance.
pub fn to_model(inst: &Instance) -> (KnowledgeBank, DescriptorBank, FeatureVector) {
    let n = inst.hand.len();
    let names: Vec<String> = (0..n).map(|c| format!("c{c}")).collect();
    let texts = inst.desc.iter().enumerate().map(|(c, r)| (0..r.len()).map(|m| format!("c{c} d{m}")).collect()).collect();
    let feats = inst.desc.iter().map(|r| r.iter().map(|d| fv(d)).collect()).collect();
    let bank = DescriptorBank::new(names.clone(), texts, feats, Temperature::new(inst.tau).unwrap()).unwrap();
    let hand = inst.hand.iter().map(|h| fv(h)).collect();
    let kb = KnowledgeBank::build(&names, hand, &bank).unwrap();
    (kb, bank, fv(&inst.v))
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
