use metasum::metadata::{FeatureAssignment, FeatureKind};
use metasum::model::{read_checkpoint, Example, ModelConfig};
use metasum::text::{build_vocab, tokenize, TagLexicon, Vocab};
use metasum::training::{checkpoint_path, read_run, train_seed, RunOptions, TrainConfig, TrainError, Validation};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: usize = 12;

fn copy_task(n: usize, seed: u64, vocab: &Vocab) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let words: Vec<String> = (0..5).map(|_| format!("w{}", rng.gen_range(0..WORDS))).collect();
            let mut target = vec![Vocab::BOS];
            target.extend(tokenize(&words[..3].join(" "), vocab));
            target.push(Vocab::EOS);
            Example {
                tokens: tokenize(&words.join(" "), vocab),
                features: FeatureAssignment::default(),
                target,
            }
        })
        .collect()
}

fn vocab() -> Vocab {
    let text: Vec<String> = vec![(0..WORDS).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ")];
    build_vocab(&text, 4 + WORDS).unwrap()
}

fn model_config(vocab: &Vocab) -> ModelConfig {
    ModelConfig {
        layers: 1,
        d_model: 32,
        heads: 2,
        window: 16,
        dilation: 1,
        max_input_len: 12,
        max_output_len: 8,
        vocab_size: vocab.len(),
        feature_kind: FeatureKind::Vanilla,
        ffn_dim: 64,
    }
}

fn train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        base_lr: 3e-3,
        warmup_steps: 20,
        max_epochs: epochs,
        seeds: vec![0],
        max_grad_norm: None,
    }
}

#[test]
fn copy_task_is_learned() {
    let vocab = vocab();
    let lexicon = TagLexicon::new();
    let train = copy_task(400, 1, &vocab);
    let valid_ex = copy_task(30, 2, &vocab);
    let valid = Validation {
        examples: &valid_ex,
        vocab: &vocab,
        lexicon: &lexicon,
    };
    let run = train_seed(
        &model_config(&vocab),
        &train,
        &valid,
        &train_config(12),
        0,
        &RunOptions::default(),
        |_| {},
    )
    .unwrap();
    let losses: Vec<f64> = run.epochs.iter().map(|e| e.train_loss).collect();
    assert!(losses[..5].windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    let best = run.selected().valid_rouge1;
    assert!(run.epochs.last().unwrap().valid_rouge1 > 0.9, "{:?}", run.epochs);
    assert!(run.epochs.iter().all(|e| e.valid_rouge1 <= best));
}

fn small_setup() -> (Vocab, Vec<Example>, Vec<Example>) {
    let vocab = vocab();
    let train = copy_task(40, 3, &vocab);
    let valid = copy_task(5, 4, &vocab);
    (vocab, train, valid)
}

#[test]
fn single_epoch_selects_epoch_one() {
    let (vocab, train, valid_ex) = small_setup();
    let lexicon = TagLexicon::new();
    let valid = Validation {
        examples: &valid_ex,
        vocab: &vocab,
        lexicon: &lexicon,
    };
    let run = train_seed(&model_config(&vocab), &train, &valid, &train_config(1), 5, &RunOptions::default(), |_| {})
        .unwrap();
    assert_eq!(run.selected_epoch, 1);
}

#[test]
fn same_seed_gives_identical_checkpoints_and_resume_matches() {
    let (vocab, train, valid_ex) = small_setup();
    let lexicon = TagLexicon::new();
    let valid = Validation {
        examples: &valid_ex,
        vocab: &vocab,
        lexicon: &lexicon,
    };
    let config = model_config(&vocab);
    let root = tempfile::tempdir().unwrap();
    let dirs: Vec<_> = ["a", "b", "c"].iter().map(|d| root.path().join(d)).collect();
    let opts = |d: &std::path::Path, resume| RunOptions {
        dir: Some(d.to_path_buf()),
        resume,
    };

    let a = train_seed(&config, &train, &valid, &train_config(3), 7, &opts(&dirs[0], false), |_| {}).unwrap();
    let b = train_seed(&config, &train, &valid, &train_config(3), 7, &opts(&dirs[1], false), |_| {}).unwrap();
    assert_eq!(a, b);
    // interrupted after two epochs, then resumed to three
    train_seed(&config, &train, &valid, &train_config(2), 7, &opts(&dirs[2], false), |_| {}).unwrap();
    let mut seen = Vec::new();
    let c = train_seed(&config, &train, &valid, &train_config(3), 7, &opts(&dirs[2], true), |m| {
        seen.push(m.epoch)
    })
    .unwrap();
    assert_eq!(seen, vec![3]);
    assert_eq!(c, a);
    assert_eq!(read_run(&dirs[2]).unwrap(), a);

    for e in 1..=3 {
        let bytes: Vec<Vec<u8>> = dirs.iter().map(|d| std::fs::read(checkpoint_path(d, e)).unwrap()).collect();
        assert_eq!(bytes[0], bytes[1], "epoch {e}");
        assert_eq!(bytes[0], bytes[2], "epoch {e}");
    }
    let metrics: Vec<String> = dirs.iter().map(|d| std::fs::read_to_string(d.join("metrics.jsonl")).unwrap()).collect();
    assert_eq!(metrics[0], metrics[2]);
    assert_eq!(metrics[0].lines().count(), 3);
    let (c2, _) = read_checkpoint(&checkpoint_path(&dirs[0], 2)).unwrap();
    assert_eq!(c2, config);

    // a different seed diverges
    let d = train_seed(&config, &train, &valid, &train_config(1), 8, &RunOptions::default(), |_| {}).unwrap();
    assert_ne!(d.epochs[0].train_loss, a.epochs[0].train_loss);
}

#[test]
fn divergence_reports_step_and_lr() {
    let (vocab, train, valid_ex) = small_setup();
    let lexicon = TagLexicon::new();
    let valid = Validation {
        examples: &valid_ex,
        vocab: &vocab,
        lexicon: &lexicon,
    };
    let mut tc = train_config(2);
    tc.base_lr = f64::INFINITY;
    tc.warmup_steps = 0;
    let err = train_seed(&model_config(&vocab), &train, &valid, &tc, 0, &RunOptions::default(), |_| {}).unwrap_err();
    match err {
        TrainError::NonFinite { step, lr, loss } => {
            assert_eq!(step, 2);
            assert!(lr.is_infinite());
            assert!(!loss.is_finite());
        }
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn empty_split_is_rejected() {
    let vocab = vocab();
    let lexicon = TagLexicon::new();
    let valid = Validation {
        examples: &[],
        vocab: &vocab,
        lexicon: &lexicon,
    };
    let err = train_seed(&model_config(&vocab), &[], &valid, &train_config(1), 0, &RunOptions::default(), |_| {});
    assert!(matches!(err, Err(TrainError::Setup(_))));
}
