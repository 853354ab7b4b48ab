use metasum::metadata::{FeatureAssignment, FeatureKind};
use metasum::model::{
    beam_search, embed_inputs, encode, feature_table_name, forward_loss, generate, greedy_decode, loss_and_grads,
    sliding_window_attention, Example, ModelConfig, ModelError, ModelParams, Result as ModelResult, StepScorer,
    Strategy,
};
use metasum::tensor::Tensor;
use metasum::text::Vocab;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(kind: FeatureKind, layers: usize) -> ModelConfig {
    ModelConfig {
        layers,
        d_model: 8,
        heads: 2,
        window: 4,
        dilation: 1,
        max_input_len: 12,
        max_output_len: 6,
        vocab_size: 16,
        feature_kind: kind,
        ffn_dim: 16,
    }
}

fn randomize(params: &mut ModelParams, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in params.tensors_mut() {
        t.data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-0.5..0.5));
    }
}

fn features() -> FeatureAssignment {
    FeatureAssignment {
        hospital: 2,
        physician: 17,
        disease: 1819,
        stay: 9,
    }
}

fn random_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn zero_tables_embed_to_zero() {
    let c = config(FeatureKind::AllFeatures, 1);
    let mut p = ModelParams::init(&c, 0).unwrap();
    for t in p.tensors_mut() {
        t.data_mut().fill(0.0);
    }
    let x = embed_inputs(&[4, 5, 6], &features(), &p, &c).unwrap();
    assert!(x.data().iter().all(|&v| v == 0.0));
}

#[test]
fn vanilla_row_is_added_everywhere() {
    let c = config(FeatureKind::Vanilla, 1);
    let mut p = ModelParams::init(&c, 1).unwrap();
    randomize(&mut p, 2);
    let tokens = [4, 9, 4, 11];
    let x = embed_inputs(&tokens, &features(), &p, &c).unwrap();
    let tok = p.get("enc.tok").unwrap();
    let pos = p.get("enc.pos").unwrap();
    let v = p.get("feat.vanilla").unwrap().row(1).to_vec();
    for (i, &t) in tokens.iter().enumerate() {
        for j in 0..8 {
            let want = tok.get(t, j) + pos.get(i, j) + v[j];
            assert!((x.get(i, j) - want).abs() < 1e-15);
        }
    }
}

#[test]
fn all_features_minus_vanilla_is_sum_of_rows() {
    let all_c = config(FeatureKind::AllFeatures, 1);
    let van_c = config(FeatureKind::Vanilla, 1);
    let mut all = ModelParams::init(&all_c, 3).unwrap();
    randomize(&mut all, 4);
    let mut van = ModelParams::init(&van_c, 3).unwrap();
    for name in ["enc.tok", "enc.pos"] {
        *van.get_mut(name).unwrap() = all.get(name).unwrap().clone();
    }
    van.get_mut("feat.vanilla").unwrap().data_mut().fill(0.0);

    let f = features();
    let tokens = [1, 2, 3, 5, 8, 13];
    let a = embed_inputs(&tokens, &f, &all, &all_c).unwrap();
    let b = embed_inputs(&tokens, &f, &van, &van_c).unwrap();
    let mut expect = [0.0; 8];
    for kind in FeatureKind::AllFeatures.tables() {
        let row = all.get(&feature_table_name(kind)).unwrap().row(f.id(kind)).to_vec();
        expect.iter_mut().zip(row).for_each(|(e, r)| *e += r);
    }
    for i in 0..tokens.len() {
        for j in 0..8 {
            assert!((a.get(i, j) - b.get(i, j) - expect[j]).abs() < 1e-12);
        }
    }
}

#[test]
fn embedding_errors() {
    let c = config(FeatureKind::Hospital, 1);
    let p = ModelParams::init(&c, 0).unwrap();
    let mut f = features();
    f.hospital = 6;
    assert!(matches!(
        embed_inputs(&[4], &f, &p, &c),
        Err(ModelError::FeatureBounds { id: 6, rows: 6, .. })
    ));
    let long = vec![4; 13];
    assert!(matches!(
        embed_inputs(&long, &features(), &p, &c),
        Err(ModelError::Length { len: 13, max: 12 })
    ));
    assert!(matches!(
        embed_inputs(&[16], &features(), &p, &c),
        Err(ModelError::Token { id: 16, .. })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn feature_change_shifts_by_row_difference(a in 0u16..=5, b in 0u16..=5, seed in 0u64..1000) {
        let c = config(FeatureKind::Hospital, 1);
        let mut p = ModelParams::init(&c, seed).unwrap();
        randomize(&mut p, seed + 1);
        let tokens = [4, 5, 6, 7, 8];
        let fa = FeatureAssignment { hospital: a, ..Default::default() };
        let fb = FeatureAssignment { hospital: b, ..Default::default() };
        let xa = embed_inputs(&tokens, &fa, &p, &c).unwrap();
        let xb = embed_inputs(&tokens, &fb, &p, &c).unwrap();
        let table = p.get("feat.hospital").unwrap();
        for i in 0..tokens.len() {
            for j in 0..8 {
                let diff = xb.get(i, j) - xa.get(i, j);
                let want = table.get(b as usize, j) - table.get(a as usize, j);
                prop_assert!((diff - want).abs() < 1e-12);
            }
        }
    }
}

fn dense_attention(q: &Tensor, k: &Tensor, v: &Tensor, keep: impl Fn(usize, usize) -> bool) -> Tensor {
    let (n, d) = (q.rows(), q.cols());
    let mut out = vec![0.0; n * v.cols()];
    for p in 0..n {
        let keys: Vec<usize> = (0..k.rows()).filter(|&j| keep(p, j)).collect();
        let scores: Vec<f64> = keys
            .iter()
            .map(|&j| (0..d).map(|c| q.get(p, c) * k.get(j, c)).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
        for (s, &j) in scores.iter().zip(&keys) {
            let w = (s - m).exp() / z;
            for c in 0..v.cols() {
                out[p * v.cols() + c] += w * v.get(j, c);
            }
        }
    }
    Tensor::new(vec![n, v.cols()], out).unwrap()
}

#[test]
fn wide_window_is_full_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for n in [1, 3, 9] {
        let (q, k, v) = (random_tensor(n, 4, &mut rng), random_tensor(n, 4, &mut rng), random_tensor(n, 3, &mut rng));
        let got = sliding_window_attention(&q, &k, &v, 2 * n, 1).unwrap();
        assert!(got.max_abs_diff(&dense_attention(&q, &k, &v, |_, _| true)) <= 1e-9);
    }
}

#[test]
fn window_two_gives_tridiagonal_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 5;
    let q = random_tensor(n, 4, &mut rng);
    let k = random_tensor(n, 4, &mut rng);
    let mut eye = vec![0.0; n * n];
    (0..n).for_each(|i| eye[i * n + i] = 1.0);
    let v = Tensor::new(vec![n, n], eye).unwrap();
    let weights = sliding_window_attention(&q, &k, &v, 2, 1).unwrap();
    for p in 0..n {
        for j in 0..n {
            assert_eq!(weights.get(p, j) > 0.0, p.abs_diff(j) <= 1, "({p},{j})");
        }
        assert!((weights.row(p).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn banded_rows_match_dense_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (window, dilation) in [(4, 1), (4, 2), (6, 3)] {
        let n = 12;
        let (q, k, v) = (random_tensor(n, 4, &mut rng), random_tensor(n, 4, &mut rng), random_tensor(n, 4, &mut rng));
        let got = sliding_window_attention(&q, &k, &v, window, dilation).unwrap();
        let reach = window / 2 * dilation;
        let want = dense_attention(&q, &k, &v, |p, j| p.abs_diff(j) <= reach && p.abs_diff(j) % dilation == 0);
        assert!(got.max_abs_diff(&want) <= 1e-12);
    }
}

#[test]
fn zero_layer_encoder_is_embedding() {
    let c = config(FeatureKind::Disease, 0);
    let mut p = ModelParams::init(&c, 1).unwrap();
    randomize(&mut p, 1);
    let t = [4, 5, 6];
    assert_eq!(encode(&t, &features(), &p, &c).unwrap(), embed_inputs(&t, &features(), &p, &c).unwrap());
}

#[test]
fn unused_rows_do_not_matter_but_used_rows_do() {
    let c = config(FeatureKind::Hospital, 2);
    let mut p = ModelParams::init(&c, 2).unwrap();
    randomize(&mut p, 3);
    let t = [4, 5, 6, 7, 8, 9, 10];
    let f = features();
    let base = encode(&t, &f, &p, &c).unwrap();

    let mut swapped = p.clone();
    let table = swapped.get_mut("feat.hospital").unwrap();
    let (r3, r5) = (table.row(3).to_vec(), table.row(5).to_vec());
    table.row_mut(3).copy_from_slice(&r5);
    table.row_mut(5).copy_from_slice(&r3);
    assert_eq!(encode(&t, &f, &swapped, &c).unwrap(), base);

    let mut doubled = p.clone();
    doubled.get_mut("feat.hospital").unwrap().row_mut(2).iter_mut().for_each(|x| *x *= 2.0);
    assert!(encode(&t, &f, &doubled, &c).unwrap().max_abs_diff(&base) > 1e-6);
}

#[test]
fn window_growth_reaches_full_attention() {
    let mut c = config(FeatureKind::Vanilla, 2);
    let mut p = ModelParams::init(&c, 4).unwrap();
    randomize(&mut p, 5);
    let t: Vec<usize> = (0..10).map(|i| 4 + i % 12).collect();
    c.window = 1000;
    let full = encode(&t, &features(), &p, &c).unwrap();
    let mut diffs = Vec::new();
    for w in [2, 4, 8, 12, 18, 20] {
        c.window = w;
        diffs.push(encode(&t, &features(), &p, &c).unwrap().max_abs_diff(&full));
    }
    assert!(diffs[0] > 1e-6);
    assert_eq!(*diffs.last().unwrap(), 0.0);
    assert_eq!(diffs[4], 0.0);
}

fn example(tokens: Vec<usize>, body: &[usize]) -> Example {
    let mut target = vec![Vocab::BOS];
    target.extend_from_slice(body);
    target.push(Vocab::EOS);
    Example {
        tokens,
        features: features(),
        target,
    }
}

#[test]
fn uniform_logits_give_log_vocab_loss() {
    let c = config(FeatureKind::Vanilla, 1);
    let mut p = ModelParams::init(&c, 0).unwrap();
    p.get_mut("out.w").unwrap().data_mut().fill(0.0);
    p.get_mut("out.b").unwrap().data_mut().fill(0.0);
    let loss = forward_loss(&[example(vec![4, 5], &[7, 8])], &p, &c).unwrap();
    assert!((loss - (c.vocab_size as f64).ln()).abs() < 1e-12);
}

#[test]
fn identical_batch_has_single_case_loss() {
    let c = config(FeatureKind::Physician, 1);
    let p = ModelParams::init(&c, 6).unwrap();
    let ex = example(vec![4, 5, 6], &[9, 10]);
    let one = forward_loss(std::slice::from_ref(&ex), &p, &c).unwrap();
    let four = forward_loss(&vec![ex; 4], &p, &c).unwrap();
    assert!((one - four).abs() < 1e-12);
}

#[test]
fn bad_targets_are_rejected() {
    let c = config(FeatureKind::Vanilla, 1);
    let p = ModelParams::init(&c, 0).unwrap();
    let mut ex = example(vec![4], &[5]);
    ex.target.pop();
    assert!(forward_loss(&[ex], &p, &c).is_err());
    let ex = example(vec![4], &[5, 5, 5, 5, 5]);
    assert!(matches!(forward_loss(&[ex], &p, &c), Err(ModelError::Length { len: 7, max: 6 })));
}

#[test]
fn loss_and_grads_agree_with_forward_loss() {
    let c = config(FeatureKind::LengthOfStay, 1);
    let p = ModelParams::init(&c, 6).unwrap();
    let batch = vec![example(vec![4, 5, 6], &[9, 10]), example(vec![7, 8], &[11])];
    let (loss, grads) = loss_and_grads(&batch, &p, &c).unwrap();
    assert!((loss - forward_loss(&batch, &p, &c).unwrap()).abs() < 1e-12);
    assert_eq!(grads.len(), p.len());
    let i = p.position("feat.length_of_stay").unwrap();
    let g = &grads[i];
    let row = |r: usize| &g[r * 8..(r + 1) * 8];
    assert!(row(9).iter().any(|x| *x != 0.0));
    assert!(row(10).iter().all(|x| *x == 0.0));
}

#[test]
fn gradients_match_finite_differences_on_sampled_coordinates() {
    let c = config(FeatureKind::Hospital, 2);
    let mut p = ModelParams::init(&c, 11).unwrap();
    randomize(&mut p, 12);
    let batch = vec![example(vec![4, 5, 6, 7, 8, 9], &[9, 10, 3]), example(vec![7, 8, 15], &[11])];
    let (_, grads) = loss_and_grads(&batch, &p, &c).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let h = 1e-5;
    for ti in 0..p.len() {
        for _ in 0..3 {
            let j = rng.gen_range(0..p.tensors()[ti].len());
            let mut plus = p.clone();
            plus.tensors_mut()[ti].data_mut()[j] += h;
            let mut minus = p.clone();
            minus.tensors_mut()[ti].data_mut()[j] -= h;
            let num = (forward_loss(&batch, &plus, &c).unwrap() - forward_loss(&batch, &minus, &c).unwrap()) / (2.0 * h);
            let a = grads[ti][j];
            let err = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
            assert!(err <= 1e-3, "{}[{j}]: analytic {a} numeric {num}", p.names()[ti]);
        }
    }
}

#[test]
fn zero_output_length_generates_nothing() {
    let mut c = config(FeatureKind::Vanilla, 1);
    c.max_output_len = 0;
    let p = ModelParams::init(&c, 0).unwrap();
    assert!(generate(&[4, 5], &features(), &p, &c, Strategy::Greedy).unwrap().is_empty());
    assert!(generate(&[4, 5], &features(), &p, &c, Strategy::Beam(3)).unwrap().is_empty());
}

#[test]
fn generation_is_deterministic_and_bounded() {
    let c = config(FeatureKind::Disease, 2);
    let mut p = ModelParams::init(&c, 1).unwrap();
    randomize(&mut p, 21);
    let a = generate(&[4, 5, 6], &features(), &p, &c, Strategy::Greedy).unwrap();
    let b = generate(&[4, 5, 6], &features(), &p, &c, Strategy::Greedy).unwrap();
    assert_eq!(a, b);
    assert!(a.len() < c.max_output_len);
    assert!(!a.contains(&Vocab::EOS));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn beam_width_one_is_greedy(seed in 0u64..10_000) {
        let c = config(FeatureKind::Hospital, 1);
        let mut p = ModelParams::init(&c, seed).unwrap();
        randomize(&mut p, seed);
        let t = [4 + (seed % 10) as usize, 5, 6];
        let g = generate(&t, &features(), &p, &c, Strategy::Greedy).unwrap();
        let b = generate(&t, &features(), &p, &c, Strategy::Beam(1)).unwrap();
        prop_assert_eq!(g, b);
    }
}

/// Fixed next-token distributions keyed by prefix; anything unlisted puts
/// all mass on eos.
struct Rigged {
    table: Vec<(Vec<usize>, Vec<f64>)>,
}

impl StepScorer for Rigged {
    fn vocab_size(&self) -> usize {
        6
    }

    fn log_probs(&mut self, prefix: &[usize]) -> ModelResult<Vec<f64>> {
        let probs = self
            .table
            .iter()
            .find(|(p, _)| p == prefix)
            .map(|(_, d)| d.clone())
            .unwrap_or_else(|| vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        Ok(probs.iter().map(|p| p.ln()).collect())
    }
}

fn rigged() -> Rigged {
    // After 4 every continuation is a coin flip; after 5 the path is certain.
    Rigged {
        table: vec![
            (vec![], vec![0.0, 0.0, 0.0, 0.0, 0.55, 0.45]),
            (vec![4], vec![0.0, 0.0, 0.0, 0.5, 0.0, 0.5]),
            (vec![4, 3], vec![0.0, 0.0, 0.5, 0.5, 0.0, 0.0]),
            (vec![4, 5], vec![0.0, 0.0, 0.5, 0.5, 0.0, 0.0]),
            (vec![5], vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0]),
            (vec![5, 3], vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
        ],
    }
}

/// Exhaustive search over every sequence of at most `max_steps` tokens.
fn best_by_enumeration(s: &mut Rigged, max_steps: usize) -> (Vec<usize>, f64) {
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    let mut stack = vec![(Vec::<usize>::new(), 0.0)];
    while let Some((prefix, lp)) = stack.pop() {
        let dist = s.log_probs(&prefix).unwrap();
        for (t, &l) in dist.iter().enumerate() {
            if l == f64::NEG_INFINITY {
                continue;
            }
            let total = lp + l;
            if t == Vocab::EOS {
                let score = total / (prefix.len() + 1) as f64;
                if score > best.1 {
                    best = (prefix.clone(), score);
                }
            } else if prefix.len() + 1 < max_steps {
                let mut next = prefix.clone();
                next.push(t);
                stack.push((next, total));
            }
        }
    }
    best
}

#[test]
fn beam_two_finds_what_greedy_misses() {
    let (optimum, _) = best_by_enumeration(&mut rigged(), 5);
    assert_eq!(optimum, vec![5, 3, 4]);
    let greedy = greedy_decode(&mut rigged(), 5).unwrap();
    assert_ne!(greedy, optimum);
    assert_eq!(beam_search(&mut rigged(), 2, 5).unwrap(), optimum);
    assert_eq!(beam_search(&mut rigged(), 1, 5).unwrap(), greedy);
}
