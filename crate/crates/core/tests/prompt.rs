use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vitq::prompt::{
    reinit_drifted, run_banks, run_prompt_learning, PromptBank, PromptConfig, ToyClassifier,
    ToyGenerator, REINIT_NOISE,
};

fn toys() -> (ToyGenerator, ToyClassifier) {
    let gen = ToyGenerator::new(6, 16, 16, 16, 1);
    let clf = ToyClassifier::new(gen.channels, gen.size, 32, 10, 2);
    (gen, clf)
}

fn bank(class: usize) -> PromptBank {
    PromptBank::init(class, 4, 6, 16, 2, 3).unwrap()
}

#[test]
fn replaced_prompt_lies_in_the_survivor_hull_plus_noise() {
    let mut b = bank(0);
    let before = b.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let r = reinit_drifted(&mut b, &[1.0, 5.0, 1.2, 0.9], 2.0, &mut rng).unwrap();
    assert_eq!(r.len(), 1);
    let r = &r[0];
    assert_eq!(r.prompt, 1);
    assert_eq!(r.weights.iter().map(|w| w.0).collect::<Vec<_>>(), vec![0, 2, 3]);
    let total: f64 = r.weights.iter().map(|w| w.1).sum();
    assert!((total - 1.0).abs() < 1e-12);
    assert!(r.weights.iter().all(|w| w.1 >= 0.0));
    let got = b.embeddings()[1].data();
    for (i, &g) in got.iter().enumerate() {
        let hull: f64 = r.weights.iter().map(|&(s, w)| w * before.embeddings()[s].data()[i]).sum();
        assert!((g - hull - r.noise[i]).abs() < 1e-12);
    }
    let sd = (r.noise.iter().map(|x| x * x).sum::<f64>() / r.noise.len() as f64).sqrt();
    assert!(sd < 3.0 * REINIT_NOISE);
    for s in [0, 2, 3] {
        assert_eq!(b.embeddings()[s], before.embeddings()[s]);
    }
}

#[test]
fn single_survivor_is_copied_with_noise() {
    let mut b = bank(1);
    let before = b.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let r = reinit_drifted(&mut b, &[0.5, 9.0, 9.0, 9.0], 1.0, &mut rng).unwrap();
    assert_eq!(r.len(), 3);
    for x in &r {
        assert_eq!(x.weights, vec![(0, 1.0)]);
        let d: Vec<f64> = b.embeddings()[x.prompt]
            .data()
            .iter()
            .zip(before.embeddings()[0].data())
            .map(|(a, b)| a - b)
            .collect();
        for (a, n) in d.iter().zip(&x.noise) {
            assert!((a - n).abs() < 1e-12);
        }
    }
}

#[test]
fn all_drifted_bank_is_left_alone() {
    let mut b = bank(2);
    let before = b.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let r = reinit_drifted(&mut b, &[3.0, 4.0, 5.0, 6.0], 1.0, &mut rng).unwrap();
    assert!(r.is_empty());
    assert_eq!(b, before);
    assert!(reinit_drifted(&mut b, &[1.0], 1.0, &mut rng).is_err());
}

#[test]
fn learning_lowers_classification_loss_and_decorrelates() {
    let (gen, clf) = toys();
    let (_, rep) = run_prompt_learning(&bank(4), &gen, &clf, &PromptConfig::default()).unwrap();
    assert_eq!(rep.records.len(), 120);
    assert!(rep.final_.cls_mean < rep.init.cls_mean);
    assert!(rep.final_.mean_abs_cosine <= rep.init.mean_abs_cosine);
}

#[test]
fn frozen_prefix_survives_training_and_reinit() {
    let (gen, clf) = toys();
    let cfg = PromptConfig {
        iters: 40,
        freeze_semantic: true,
        threshold_factor: 1.0,
        reinit_every: 5,
        ..PromptConfig::default()
    };
    let start = bank(3);
    let (end, rep) = run_prompt_learning(&start, &gen, &clf, &cfg).unwrap();
    assert!(!rep.reinits.is_empty());
    let k = 2 * 16;
    for (a, b) in start.embeddings().iter().zip(end.embeddings()) {
        assert_eq!(&a.data()[..k], &b.data()[..k]);
        assert_ne!(&a.data()[k..], &b.data()[k..]);
    }
}

#[test]
fn banks_run_independently_and_reproducibly() {
    let (gen, clf) = toys();
    let cfg = PromptConfig { iters: 15, ..PromptConfig::default() };
    let banks: Vec<_> = (0..3).map(bank).collect();
    let all = run_banks(&banks, &gen, &clf, &cfg).unwrap();
    let again = run_banks(&banks, &gen, &clf, &cfg).unwrap();
    assert_eq!(all, again);
    for (b, (out, rep)) in banks.iter().zip(&all) {
        let (solo, solo_rep) = run_prompt_learning(b, &gen, &clf, &cfg).unwrap();
        assert_eq!(&solo, out);
        assert_eq!(&solo_rep, rep);
        assert_eq!(PromptBank::from_record(&out.to_record()).unwrap(), solo);
    }
}

#[test]
fn out_of_range_class_is_rejected() {
    let (gen, clf) = toys();
    assert!(run_prompt_learning(&bank(10), &gen, &clf, &PromptConfig::default()).is_err());
}
