//! Shared helpers: an independent scalar reference implementation of the
//! model and random inputs.
#![allow(dead_code)]

use flora::adapters::{AdapterSet, AdapterSiteId, SitePosition, Stack};
use flora::config::{ModelConfig, LN_EPS};
use flora::data::Sample;
use flora::modality::Modality;
use flora::params::ParamStore;
use flora::tensor::Tensor;
use flora::{Model, Session};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

fn load(store: &ParamStore, path: &str) -> Mat {
    let t = store.tensor(path).unwrap();
    let cols = *t.shape().last().unwrap();
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

fn vec1(store: &ParamStore, path: &str) -> Vec<f64> {
    store.tensor(path).unwrap().data().to_vec()
}

fn tensor_mat(t: &Tensor) -> Mat {
    let cols = *t.shape().last().unwrap();
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

pub fn mm(a: &Mat, b: &Mat) -> Mat {
    let (n, k) = (b[0].len(), b.len());
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| (0..k).map(|p| row[p] * b[p][j]).sum())
                .collect()
        })
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect())
        .collect()
}

fn add_bias(a: &Mat, b: &[f64]) -> Mat {
    a.iter().map(|r| r.iter().zip(b).map(|(u, v)| u + v).collect()).collect()
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn layer_norm(x: &Mat, g: &[f64], b: &[f64]) -> Mat {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) / (var + LN_EPS).sqrt() * g[i] + b[i])
                .collect()
        })
        .collect()
}

fn linear(s: &ParamStore, x: &Mat, p: &str) -> Mat {
    add_bias(&mm(x, &load(s, &format!("{p}.w"))), &vec1(s, &format!("{p}.b")))
}

/// Multi-head attention with an explicit admissibility predicate.
fn attention(c: &ModelConfig, s: &ParamStore, p: &str, xq: &Mat, xkv: &Mat, ok: &dyn Fn(usize, usize) -> bool) -> Mat {
    let q = linear(s, xq, &format!("{p}.q"));
    let k = linear(s, xkv, &format!("{p}.k"));
    let v = linear(s, xkv, &format!("{p}.v"));
    let dh = c.d_model / c.n_heads;
    let mut out = vec![vec![0.0; c.d_model]; xq.len()];
    for h in 0..c.n_heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..xq.len() {
            let scores: Vec<Option<f64>> = (0..xkv.len())
                .map(|j| {
                    ok(i, j).then(|| cols.clone().map(|d| q[i][d] * k[j][d]).sum::<f64>() / (dh as f64).sqrt())
                })
                .collect();
            let max = scores.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().flatten().map(|x| (x - max).exp()).sum();
            for (j, sc) in scores.iter().enumerate() {
                if let Some(sc) = sc {
                    let w = (sc - max).exp() / z;
                    for d in cols.clone() {
                        out[i][d] += w * v[j][d];
                    }
                }
            }
        }
    }
    linear(s, &out, &format!("{p}.o"))
}

fn ffn(s: &ParamStore, x: &Mat, p: &str) -> Mat {
    let h = add_bias(&mm(x, &load(s, &format!("{p}.w1"))), &vec1(s, &format!("{p}.b1")));
    let h: Mat = h.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
    add_bias(&mm(&h, &load(s, &format!("{p}.w2"))), &vec1(s, &format!("{p}.b2")))
}

/// `frozen + Σ_m f(E·W_D)·H·W_U` over `active`.
fn fuse(frozen: Mat, e: &Mat, adapters: Option<(&AdapterSet, &[Modality])>, site: AdapterSiteId) -> Mat {
    let Some((set, active)) = adapters else { return frozen };
    let mut out = frozen;
    for &m in active {
        let a = set.get(m, site).unwrap();
        let z = mm(e, &tensor_mat(&a.w_down));
        let z: Mat = z.iter().map(|r| r.iter().map(|&v| a.activation.apply(v)).collect()).collect();
        let z = mm(&mm(&z, &tensor_mat(&a.hidden)), &tensor_mat(&a.w_up));
        out = add(&out, &z);
    }
    out
}

/// Encoder input rows of `sample` (prefixes, tokens, padding) plus positions.
pub fn reference_input(s: &ParamStore, sample: &Sample, pad: &[usize]) -> Mat {
    let mut rows: Mat = Vec::new();
    for (m, f) in [("audio", &sample.audio), ("video", &sample.video)] {
        if let Some(f) = f {
            let z = mm(&vec![f.clone()], &load(s, &format!("prefix.{m}.down")));
            let z = mm(&z, &load(s, &format!("prefix.{m}.up")));
            rows.push(add_bias(&z, &vec1(s, &format!("prefix.{m}.b")))[0].clone());
        }
    }
    let tok = load(s, "embed.tok");
    rows.extend(sample.text.iter().chain(pad).map(|&t| tok[t].clone()));
    let pos = load(s, "embed.pos");
    rows.iter()
        .enumerate()
        .map(|(i, r)| r.iter().zip(&pos[i]).map(|(a, b)| a + b).collect())
        .collect()
}

/// Reference encoder: returns the final-layernorm output.
pub fn reference_encode(
    c: &ModelConfig,
    s: &ParamStore,
    adapters: Option<(&AdapterSet, &[Modality])>,
    input: &Mat,
    keep: &[bool],
) -> Mat {
    let mut x = input.clone();
    for i in 0..c.n_enc_layers {
        let h = layer_norm(&x, &vec1(s, &format!("enc.{i}.ln1.g")), &vec1(s, &format!("enc.{i}.ln1.b")));
        let a = attention(c, s, &format!("enc.{i}.attn"), &h, &h, &|_, j| keep[j]);
        let site = AdapterSiteId::new(Stack::Encoder, i, SitePosition::PostAttention);
        x = fuse(add(&x, &a), &x, adapters, site);
        let h = layer_norm(&x, &vec1(s, &format!("enc.{i}.ln2.g")), &vec1(s, &format!("enc.{i}.ln2.b")));
        let f = ffn(s, &h, &format!("enc.{i}.ffn"));
        let site = AdapterSiteId::new(Stack::Encoder, i, SitePosition::PostFfn);
        x = fuse(add(&x, &f), &x, adapters, site);
    }
    layer_norm(&x, &vec1(s, "enc.ln_f.g"), &vec1(s, "enc.ln_f.b"))
}

/// Reference decoder: returns `prefix.len()×vocab` logits.
pub fn reference_decode(
    c: &ModelConfig,
    s: &ParamStore,
    adapters: Option<(&AdapterSet, &[Modality])>,
    enc: &Mat,
    keep: &[bool],
    prefix: &[usize],
) -> Mat {
    let tok = load(s, "embed.tok");
    let pos = load(s, "embed.pos");
    let mut x: Mat = prefix
        .iter()
        .enumerate()
        .map(|(i, &t)| tok[t].iter().zip(&pos[i]).map(|(a, b)| a + b).collect())
        .collect();
    for i in 0..c.n_dec_layers {
        let g = |n: &str| vec1(s, &format!("dec.{i}.{n}"));
        let h = layer_norm(&x, &g("ln1.g"), &g("ln1.b"));
        let a = attention(c, s, &format!("dec.{i}.self"), &h, &h, &|r, col| col <= r);
        let site = AdapterSiteId::new(Stack::Decoder, i, SitePosition::PostAttention);
        x = fuse(add(&x, &a), &x, adapters, site);
        let h = layer_norm(&x, &g("ln2.g"), &g("ln2.b"));
        let a = attention(c, s, &format!("dec.{i}.cross"), &h, enc, &|_, j| keep[j]);
        x = add(&x, &a);
        let h = layer_norm(&x, &g("ln3.g"), &g("ln3.b"));
        let f = ffn(s, &h, &format!("dec.{i}.ffn"));
        let site = AdapterSiteId::new(Stack::Decoder, i, SitePosition::PostFfn);
        x = fuse(add(&x, &f), &x, adapters, site);
    }
    let h = layer_norm(&x, &vec1(s, "dec.ln_f.g"), &vec1(s, "dec.ln_f.b"));
    linear(s, &h, "head")
}

pub fn max_diff(a: &Mat, b: &[f64]) -> f64 {
    a.iter().flatten().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Random sample for `c`; each feature modality present with probability 1/2
/// unless forced through `modalities`.
pub fn random_sample(c: &ModelConfig, rng: &mut ChaCha8Rng, modalities: Option<&[Modality]>) -> Sample {
    let has = |m: Modality, rng: &mut ChaCha8Rng| match modalities {
        Some(ms) => ms.contains(&m),
        None => rng.random_bool(0.5),
    };
    let audio = has(Modality::Audio, rng).then(|| (0..c.d_audio).map(|_| rng.random_range(-2.0..2.0)).collect());
    let video = has(Modality::Video, rng).then(|| (0..c.d_video).map(|_| rng.random_range(-2.0..2.0)).collect());
    let len = rng.random_range(1..=c.max_seq_len - 2 - 3);
    Sample {
        id: rng.random(),
        text: (0..len).map(|_| rng.random_range(3..c.vocab_size)).collect(),
        audio,
        video,
        label: rng.random_range(0..2),
    }
}

/// Adapters whose every tensor is random, so none of them is a zero map.
pub fn random_adapters(c: &ModelConfig, seed: u64) -> AdapterSet {
    let mut set = AdapterSet::init(c, flora::ModalitySet::ALL, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (_, t) in set.named_tensors_mut() {
        t.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-0.5..0.5));
    }
    set
}

/// Randomizes layernorm and bias entries too, so no parameter sits at a
/// special value.
pub fn perturb_all(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, p) in store.iter_mut() {
        p.tensor.data_mut().iter_mut().for_each(|x| *x += rng.random_range(-0.3..0.3));
    }
}

/// Library forward pass: decoder logits for `prefix`.
pub fn logits(model: Model<'_>, sample: &Sample, prefix: &[usize]) -> Vec<f64> {
    let mut s = Session::new(model, false);
    let input = s.build_input(sample).unwrap();
    let enc = s.encode(&input).unwrap();
    let out = s.decode(enc, &input.keep, prefix).unwrap();
    s.tape.value(out).to_vec()
}
