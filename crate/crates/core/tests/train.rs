use flora::adapters::{dropout_mask, AdapterSet};
use flora::backbone::{init_backbone, Model, Session};
use flora::config::{ModelConfig, BOS, NO, YES};
use flora::data::{generate_split, GenConfig, Sample, Split};
use flora::error::Error;
use flora::eval::{evaluate, evaluate_probe, score_sample};
use flora::modality::{Modality, ModalitySet};
use flora::params::{is_layernorm, is_prefix, ParamStore};
use flora::train::{
    pretrain, pretrain_corpus, train, train_probe, yes_probability, PretrainConfig, TrainConfig, TrainMode,
};

fn small() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_enc_layers: 1,
        n_dec_layers: 1,
        n_heads: 2,
        d_ff: 32,
        vocab_size: 16,
        max_seq_len: 12,
        d_audio: 8,
        d_video: 6,
        adapter_rank: 2,
        prefix_rank: 2,
        activation: flora::Activation::Gelu,
    }
}

fn gen(c: &ModelConfig) -> GenConfig {
    GenConfig {
        seed: 3,
        d_audio: c.d_audio,
        d_video: c.d_video,
        vocab_size: c.vocab_size,
        min_words: 2,
        max_words: 5,
        audio_sigma: 0.5,
        video_sigma: 0.5,
        ..GenConfig::default()
    }
}

fn data(c: &ModelConfig, split: Split, n: usize, g: &GenConfig) -> Vec<Sample> {
    generate_split(&GenConfig { ..g.clone() }, split, n).unwrap().into_iter().filter(|s| s.text.len() + 2 <= c.max_seq_len).collect()
}

fn flora_cfg(epochs: usize) -> TrainConfig {
    TrainConfig { mode: TrainMode::Flora, lr: 1e-2, epochs, batch_size: 16, seed: 5, ..TrainConfig::default() }
}

#[test]
fn zero_epochs_change_nothing() {
    let c = small();
    let d = data(&c, Split::Train, 40, &gen(&c));
    let mut p = init_backbone(&c, 1).unwrap();
    let mut a = AdapterSet::init(&c, ModalitySet::ALL, 1);
    let (p0, a0) = (p.clone(), a.clone());
    let rep = train(&flora_cfg(0), &c, &d, &mut p, Some(&mut a)).unwrap();
    assert!(rep.curve.is_empty());
    assert_eq!(p, p0);
    assert_eq!(a, a0);
}

#[test]
fn flora_updates_only_adapters_layernorms_and_prefixes() {
    let c = small();
    let d = data(&c, Split::Train, 64, &gen(&c));
    let mut p = init_backbone(&c, 2).unwrap();
    let mut a = AdapterSet::init(&c, ModalitySet::ALL, 2);
    let (p0, a0) = (p.clone(), a.clone());
    train(&flora_cfg(1), &c, &d, &mut p, Some(&mut a)).unwrap();
    for (path, param) in p.iter() {
        let before = p0.tensor(path).unwrap();
        if is_layernorm(path) || is_prefix(path) {
            assert_ne!(&param.tensor, before, "{path} did not train");
        } else {
            assert_eq!(&param.tensor, before, "{path} changed");
        }
    }
    for (m, site, params) in a.iter() {
        assert_ne!(params.w_up, a0.get(m, site).unwrap().w_up);
    }
}

#[test]
fn absent_modality_produces_no_adapter_gradient() {
    let c = small();
    let p = init_backbone(&c, 3).unwrap();
    let a = flora_common_adapters(&c);
    let d = data(&c, Split::Train, 10, &GenConfig { p_missing_video: 1.0, ..gen(&c) });
    for s in &d {
        let view = a.with_active(ModalitySet::ALL).unwrap().restrict(dropout_mask(s));
        let mut sess = Session::new(Model { config: &c, params: &p, adapters: Some(view) }, true);
        let input = sess.build_input(s).unwrap();
        let enc = sess.encode(&input).unwrap();
        let logits = sess.decode(enc, &input.keep, &[BOS, YES]).unwrap();
        let loss = sess.tape.cross_entropy(logits, &[YES, NO]).unwrap();
        sess.tape.backward(loss).unwrap();
        let names: Vec<String> = sess.gradients().into_iter().map(|(n, _)| n).collect();
        assert!(names.iter().any(|n| n.starts_with("adapter.audio")));
        assert!(names.iter().any(|n| n.starts_with("adapter.text")));
        assert!(!names.iter().any(|n| n.starts_with("adapter.video")));
    }
}

fn flora_common_adapters(c: &ModelConfig) -> AdapterSet {
    let mut a = AdapterSet::init(c, ModalitySet::ALL, 4);
    for (_, t) in a.named_tensors_mut() {
        t.data_mut().iter_mut().enumerate().for_each(|(i, x)| *x += 0.01 * (i % 7) as f64);
    }
    a
}

#[test]
fn video_absent_step_leaves_video_adapters_bit_identical() {
    // Two batches, one per presence pattern; the video batch is a single
    // sample so its gradient does not depend on shuffling. When it runs
    // first, the second step must leave the video adapters exactly as a
    // run on that sample alone left them.
    let c = small();
    let g = gen(&c);
    let with_video = data(&c, Split::Train, 1, &g);
    let without: Vec<Sample> = data(&c, Split::Test, 8, &g)
        .into_iter()
        .map(|s| s.restricted(ModalitySet::ALL.without(Modality::Video)))
        .collect();
    let p = init_backbone(&c, 5).unwrap();
    let run = |d: &[Sample], seed: u64| {
        let cfg = TrainConfig { batch_size: 64, warmup_ratio: 0.0, seed, ..flora_cfg(1) };
        let mut a = AdapterSet::init(&c, ModalitySet::ALL, 5);
        let rep = train(&cfg, &c, d, &mut p.clone(), Some(&mut a)).unwrap();
        (a, rep)
    };
    let mut mixed = with_video.clone();
    mixed.extend(without.iter().cloned());
    let mut checked = false;
    for seed in 0..8 {
        let (only, only_rep) = run(&with_video, seed);
        let (both, rep) = run(&mixed, seed);
        assert_eq!(rep.curve.len(), 2);
        if rep.curve[0].loss != only_rep.curve[0].loss {
            continue;
        }
        for (m, site, params) in both.iter() {
            if m == Modality::Video {
                assert_eq!(params, only.get(m, site).unwrap());
            } else {
                assert_ne!(params, only.get(m, site).unwrap());
            }
        }
        checked = true;
    }
    assert!(checked);

    let mut a = AdapterSet::init(&c, ModalitySet::ALL, 5);
    let err = train(&flora_cfg(1), &c, &without, &mut p.clone(), Some(&mut a)).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
}

#[test]
fn mode_and_data_mismatches_are_errors() {
    let c = small();
    let d = data(&c, Split::Train, 20, &gen(&c));
    let mut p = init_backbone(&c, 6).unwrap();
    let mut a = AdapterSet::init(&c, ModalitySet::ALL, 6);
    let fft = TrainConfig { mode: TrainMode::Fft, ..flora_cfg(1) };
    assert!(matches!(train(&fft, &c, &d, &mut p, Some(&mut a)), Err(Error::Config(_))));
    assert!(matches!(train(&flora_cfg(1), &c, &d, &mut p, None), Err(Error::Config(_))));
    let text = TrainConfig { mode: TrainMode::UnimodalText, ..flora_cfg(1) };
    assert!(matches!(train(&text, &c, &d, &mut p, Some(&mut a)), Err(Error::Config(_))));
    let probe = TrainConfig { mode: TrainMode::UnimodalAudio, ..flora_cfg(1) };
    assert!(matches!(train(&probe, &c, &d, &mut p, Some(&mut a)), Err(Error::Config(_))));
    let mut bad = d.clone();
    bad[0].audio = Some(vec![0.0; c.d_audio + 1]);
    assert!(matches!(train(&flora_cfg(1), &c, &bad, &mut p, Some(&mut a)), Err(Error::Data(_))));
    let lr0 = TrainConfig { lr: 0.0, ..flora_cfg(1) };
    assert!(matches!(train(&lr0, &c, &d, &mut p, Some(&mut a)), Err(Error::Config(_))));
}

#[test]
fn loss_decreases_every_epoch() {
    let c = small();
    let d = data(&c, Split::Train, 2000, &gen(&c));
    let mut p = init_backbone(&c, 7).unwrap();
    let mut a = AdapterSet::init(&c, ModalitySet::ALL, 7);
    let rep = train(&flora_cfg(3), &c, &d, &mut p, Some(&mut a)).unwrap();
    assert_eq!(rep.epoch_loss.len(), 3);
    for w in rep.epoch_loss.windows(2) {
        assert!(w[1] < w[0], "{:?}", rep.epoch_loss);
    }
    let csv = rep.curve_csv();
    assert!(csv.starts_with("step,lr,loss\n"));
    assert_eq!(csv.lines().count(), rep.curve.len() + 1);
}

#[test]
fn warmup_then_constant_learning_rate() {
    let c = small();
    let d = data(&c, Split::Train, 160, &gen(&c));
    let mut p = init_backbone(&c, 8).unwrap();
    let mut a = AdapterSet::init(&c, ModalitySet::ALL, 8);
    let cfg = TrainConfig { warmup_ratio: 0.25, ..flora_cfg(2) };
    let rep = train(&cfg, &c, &d, &mut p, Some(&mut a)).unwrap();
    let total = rep.curve.len();
    let w = (0.25 * total as f64).ceil() as usize;
    for pt in &rep.curve {
        let want = if pt.step < w { cfg.lr * pt.step as f64 / w as f64 } else { cfg.lr };
        assert!((pt.lr - want).abs() < 1e-15);
    }
}

#[test]
fn symmetric_head_scores_one_half() {
    let c = small();
    let mut p = init_backbone(&c, 9).unwrap();
    {
        let head = &mut p.get_mut("head.w").unwrap().tensor;
        let v = c.vocab_size;
        let rows = head.rows();
        let data = head.data_mut();
        for r in 0..rows {
            data[r * v + NO] = data[r * v + YES];
        }
    }
    let d = data(&c, Split::Test, 10, &gen(&c));
    for s in &d {
        let score = score_sample(Model::frozen_only(&c, &p), s).unwrap();
        assert_eq!(score, 0.5);
    }
    assert_eq!(yes_probability(0.0, 0.0), 0.5);
    assert!((yes_probability(2.0, 1.0) - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
    assert!(yes_probability(800.0, -800.0) == 1.0 && yes_probability(-800.0, 800.0) == 0.0);
}

#[test]
fn noiseless_data_is_learned() {
    let c = small();
    let g = GenConfig { text_flip_prob: 0.0, audio_sigma: 0.05, video_sigma: 0.05, ..gen(&c) };
    let train_d = data(&c, Split::Train, 600, &g);
    let test_d = data(&c, Split::Test, 200, &g);
    let mut p = init_backbone(&c, 10).unwrap();
    let mut a = AdapterSet::init(&c, ModalitySet::ALL, 10);
    train(&flora_cfg(4), &c, &train_d, &mut p, Some(&mut a)).unwrap();
    let rep = evaluate(&c, &p, Some(&a), &test_d, ModalitySet::ALL, 1).unwrap();
    let mean = |label: u8| {
        let xs: Vec<f64> = rep
            .scores
            .scores()
            .iter()
            .zip(rep.scores.labels())
            .filter(|(_, &l)| l == label)
            .map(|(&s, _)| s)
            .collect();
        xs.iter().sum::<f64>() / xs.len() as f64
    };
    assert!(mean(1) > mean(0));
    assert!(rep.eer < 0.1, "{}", rep.eer);
}

#[test]
fn training_is_deterministic_across_thread_counts() {
    let c = small();
    let d = data(&c, Split::Train, 96, &gen(&c));
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let mut p = init_backbone(&c, 11).unwrap();
            let mut a = AdapterSet::init(&c, ModalitySet::ALL, 11);
            let rep = train(&flora_cfg(2), &c, &d, &mut p, Some(&mut a)).unwrap();
            (p, a, rep)
        })
    };
    let (p1, a1, r1) = run(1);
    let (p3, a3, r3) = run(3);
    assert_eq!(p1, p3);
    assert_eq!(a1, a3);
    assert_eq!(r1, r3);
    let e1 = evaluate(&c, &p1, Some(&a1), &d, ModalitySet::ALL, 1).unwrap();
    let e3 = evaluate(&c, &p1, Some(&a1), &d, ModalitySet::ALL, 3).unwrap();
    assert_eq!(e1.score_file(), e3.score_file());
}

#[test]
fn exploding_learning_rate_is_a_numeric_error() {
    let c = small();
    let d = data(&c, Split::Train, 64, &gen(&c));
    let mut p = init_backbone(&c, 12).unwrap();
    let cfg = TrainConfig { mode: TrainMode::Fft, lr: 1e300, warmup_ratio: 0.0, epochs: 3, ..flora_cfg(3) };
    let err = train(&cfg, &c, &d, &mut p, None).unwrap_err();
    assert!(err.is_numeric(), "{err}");
}

#[test]
fn fft_updates_every_parameter() {
    let c = small();
    let d = data(&c, Split::Train, 32, &gen(&c));
    let mut p = init_backbone(&c, 13).unwrap();
    let p0 = p.clone();
    let cfg = TrainConfig { mode: TrainMode::Fft, ..flora_cfg(1) };
    train(&cfg, &c, &d, &mut p, None).unwrap();
    let changed = p.iter().filter(|(path, param)| &param.tensor != p0.tensor(path).unwrap()).count();
    // the positional rows past the longest input never see a gradient
    assert!(changed >= p.len() - 1, "{changed} of {}", p.len());
}

#[test]
fn unimodal_text_ignores_features() {
    let c = small();
    let d = data(&c, Split::Train, 48, &gen(&c));
    let mut p = init_backbone(&c, 14).unwrap();
    let mut a = AdapterSet::init(&c, ModalitySet::of(&[Modality::Text]), 14);
    let p0 = p.clone();
    let cfg = TrainConfig { mode: TrainMode::UnimodalText, ..flora_cfg(1) };
    train(&cfg, &c, &d, &mut p, Some(&mut a)).unwrap();
    for (path, param) in p.iter() {
        if is_prefix(path) {
            assert_eq!(&param.tensor, p0.tensor(path).unwrap());
        }
    }
}

#[test]
fn pretraining_trains_the_text_backbone_only() {
    let c = small();
    let corpus = pretrain_corpus(&c, 200, 1);
    assert_eq!(corpus, pretrain_corpus(&c, 200, 1));
    assert!(corpus.iter().all(|t| !t.is_empty() && t.len() + 2 <= c.max_seq_len));
    let mut p = init_backbone(&c, 15).unwrap();
    let p0 = p.clone();
    let rep = pretrain(&PretrainConfig { epochs: 2, ..PretrainConfig::default() }, &c, &corpus, &mut p).unwrap();
    assert!(rep.epoch_loss[1] < rep.epoch_loss[0]);
    for (path, param) in p.iter() {
        let before = p0.tensor(path).unwrap();
        if is_prefix(path) {
            assert_eq!(&param.tensor, before);
        }
        assert_eq!(param.frozen, !(is_layernorm(path) || is_prefix(path)));
    }
    assert_ne!(p.tensor("embed.tok").unwrap(), p0.tensor("embed.tok").unwrap());
}

#[test]
fn probe_learns_its_modality() {
    let c = small();
    let g = gen(&c);
    let d = data(&c, Split::Train, 400, &g);
    let t = data(&c, Split::Test, 200, &g);
    let cfg = TrainConfig { mode: TrainMode::UnimodalAudio, lr: 1e-2, epochs: 3, ..TrainConfig::default() };
    let (probe, _) = train_probe(&cfg, &c, &d).unwrap();
    let rep = evaluate_probe(&probe, &t, 1).unwrap();
    assert!(rep.eer < 0.2, "{}", rep.eer);
    let store: ParamStore = probe.to_store();
    assert_eq!(flora::train::Probe::from_store(&store).unwrap(), probe);
    let text = TrainConfig { mode: TrainMode::Flora, ..cfg };
    assert!(train_probe(&text, &c, &d).is_err());
}
