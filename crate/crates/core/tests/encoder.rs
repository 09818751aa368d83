use metaxl_core::autodiff::{Graph, ParamSet, Tensor};
use metaxl_core::data::{Example, ExampleLabels, Role, TaskKind};
use metaxl_core::encoder::{
    forward, task_loss, tokenize, Batch, BatchLabels, EncoderConfig, EncoderParams, RtnHook, PAD,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(task: TaskKind, d: usize, layers: usize, heads: usize) -> EncoderConfig {
    EncoderConfig {
        d_model: d,
        n_layers: layers,
        n_heads: heads,
        d_ffn: 2 * d,
        max_len: 10,
        task_kind: task,
        n_labels: if task == TaskKind::TokenLabeling {
            5
        } else {
            2
        },
        ..EncoderConfig::default()
    }
}

fn examples(
    rng: &mut ChaCha8Rng,
    task: TaskKind,
    n: usize,
    lens: std::ops::RangeInclusive<usize>,
) -> Vec<Example> {
    (0..n)
        .map(|_| {
            let len = rng.random_range(lens.clone());
            let text: Vec<u8> = (0..len).map(|_| rng.random_range(b'a'..=b'p')).collect();
            let tokens = tokenize(&text, 10);
            let labels = match task {
                TaskKind::TokenLabeling => ExampleLabels::Token(
                    (0..tokens.len())
                        .map(|i| {
                            (i > 0 && i + 1 < tokens.len() && rng.random_bool(0.8))
                                .then(|| rng.random_range(0..5))
                        })
                        .collect(),
                ),
                TaskKind::SequenceClassification => ExampleLabels::Sequence(rng.random_range(0..2)),
            };
            Example {
                tokens,
                labels,
                word_lens: Vec::new(),
            }
        })
        .collect()
}

fn batch(ex: &[Example]) -> Batch {
    let refs: Vec<_> = ex.iter().collect();
    Batch::from_examples(&refs, Role::Target).unwrap()
}

fn loss_value(cfg: &EncoderConfig, params: &ParamSet, b: &Batch) -> f64 {
    let g = Graph::new();
    let vars = params.to_constants(&g);
    task_loss(forward(cfg, &vars, b, None).unwrap().logits, b)
        .unwrap()
        .item()
        .unwrap()
}

fn gradcheck(cfg: &EncoderConfig, seed: u64, lens: std::ops::RangeInclusive<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = EncoderParams::init(cfg, seed).unwrap().params;
    // Non-trivial layer-norm affine parameters and biases.
    let names: Vec<String> = params.names().cloned().collect();
    for name in &names {
        if name.ends_with(".bias")
            || name.ends_with(".gain")
            || name.ends_with(".b1")
            || name.ends_with(".b2")
        {
            for v in params.get_mut(name).unwrap().data_mut() {
                *v += rng.random_range(-0.2..0.2);
            }
        }
    }
    let b = batch(&examples(&mut rng, cfg.task_kind, 2, lens));
    let g = Graph::new();
    let vars = params.to_vars(&g);
    let loss = task_loss(forward(cfg, &vars, &b, None).unwrap().logits, &b).unwrap();
    let grads = ParamSet::from_vars(&metaxl_core::autodiff::grad(loss, &vars, false).unwrap());
    let eps = 1e-5;
    let mut worst: (f64, String) = (0.0, String::new());
    for name in &names {
        for i in 0..params.get(name).unwrap().numel() {
            let mut p = params.clone();
            p.get_mut(name).unwrap().data_mut()[i] += eps;
            let up = loss_value(cfg, &p, &b);
            p.get_mut(name).unwrap().data_mut()[i] -= 2.0 * eps;
            let down = loss_value(cfg, &p, &b);
            let fd = (up - down) / (2.0 * eps);
            let an = grads.get(name).unwrap().data()[i];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1.0);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{i}] analytic {an} fd {fd}"));
            }
        }
    }
    assert!(
        worst.0 < 1e-5,
        "worst relative error {:e} at {}",
        worst.0,
        worst.1
    );
}

#[test]
fn tiny_token_encoder_gradients_match_finite_differences() {
    gradcheck(&config(TaskKind::TokenLabeling, 8, 1, 1), 0, 1..=1);
}

#[test]
fn two_layer_encoder_gradients_match_finite_differences() {
    gradcheck(&config(TaskKind::TokenLabeling, 8, 2, 2), 1, 1..=4);
    gradcheck(&config(TaskKind::SequenceClassification, 8, 2, 2), 2, 1..=4);
}

#[test]
fn attention_rows_and_layer_norm_statistics() {
    let cfg = config(TaskKind::TokenLabeling, 16, 2, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let b = batch(&examples(&mut rng, cfg.task_kind, 5, 0..=8));
    let g = Graph::new();
    let params = EncoderParams::init(&cfg, 3)
        .unwrap()
        .params
        .to_constants(&g);
    let out = forward(&cfg, &params, &b, None).unwrap();
    let t = b.seq_len();
    for probs in &out.attention {
        let p = probs.value();
        for (r, row) in p.data().chunks(t).enumerate() {
            let mask = &b.attention_mask[r / (cfg.n_heads * t)];
            let total: f64 = row.iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
            for (w, &m) in row.iter().zip(mask) {
                if m == 0 {
                    assert_eq!(*w, 0.0);
                }
            }
        }
    }
    for n in &out.normalized {
        for row in n.value().data().chunks(cfg.d_model) {
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / row.len() as f64;
            assert!(mean.abs() < 1e-9, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "variance {var}");
        }
    }
    assert_eq!(out.hidden.len(), cfg.n_layers + 1);
}

#[test]
fn loss_matches_log_sum_exp_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for task in [TaskKind::TokenLabeling, TaskKind::SequenceClassification] {
        let cfg = config(task, 8, 1, 2);
        let b = batch(&examples(&mut rng, task, 4, 0..=6));
        let g = Graph::new();
        let params = EncoderParams::init(&cfg, 4)
            .unwrap()
            .params
            .to_constants(&g);
        let logits = forward(&cfg, &params, &b, None).unwrap().logits;
        let got = task_loss(logits, &b).unwrap().item().unwrap();
        let lv = logits.value();
        let c = cfg.n_labels;
        let nll = |row: &[f64], y: usize| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - row[y]
        };
        let rows: Vec<&[f64]> = lv.data().chunks(c).collect();
        let (mut sum, mut n) = (0.0, 0usize);
        match &b.labels {
            BatchLabels::Token(labels) => {
                let t = b.seq_len();
                for (i, row) in labels.iter().enumerate() {
                    for (j, l) in row.iter().enumerate() {
                        if let (Some(y), 1) = (l, b.attention_mask[i][j]) {
                            sum += nll(rows[i * t + j], *y);
                            n += 1;
                        }
                    }
                }
            }
            BatchLabels::Sequence(labels) => {
                for (i, &y) in labels.iter().enumerate() {
                    sum += nll(rows[i], y);
                    n += 1;
                }
            }
        }
        assert!((got - sum / n as f64).abs() < 1e-10);
    }
}

#[test]
fn pad_positions_get_no_gradient() {
    let cfg = config(TaskKind::TokenLabeling, 8, 1, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ex = examples(&mut rng, cfg.task_kind, 3, 2..=3);
    ex.extend(examples(&mut rng, cfg.task_kind, 1, 8..=8));
    let b = batch(&ex);
    let g = Graph::new();
    let params = EncoderParams::init(&cfg, 5).unwrap().params.to_vars(&g);
    let logits = forward(&cfg, &params, &b, None).unwrap().logits;
    let loss = task_loss(logits, &b).unwrap();
    let dl = g.grad(loss, &[logits], false).unwrap()[0].value();
    let t = b.seq_len();
    let c = cfg.n_labels;
    let mut pads = 0;
    for (i, ids) in b.token_ids.iter().enumerate() {
        for (j, &id) in ids.iter().enumerate() {
            if id == PAD {
                pads += 1;
                let at = (i * t + j) * c;
                assert!(dl.data()[at..at + c].iter().all(|&v| v == 0.0));
            }
        }
    }
    assert!(pads > 0);
}

fn logits_of(cfg: &EncoderConfig, params: &ParamSet, b: &Batch) -> Tensor {
    let g = Graph::new();
    let vars = params.to_constants(&g);
    (*forward(cfg, &vars, b, None).unwrap().logits.value()).clone()
}

#[test]
fn permuting_examples_permutes_logits() {
    for task in [TaskKind::TokenLabeling, TaskKind::SequenceClassification] {
        let cfg = config(task, 8, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ex = examples(&mut rng, task, 5, 0..=8);
        let params = EncoderParams::init(&cfg, 6).unwrap().params;
        let perm = [3usize, 0, 4, 2, 1];
        let permuted: Vec<Example> = perm.iter().map(|&i| ex[i].clone()).collect();
        let b = batch(&ex);
        let bp = batch(&permuted);
        assert_eq!(b.seq_len(), bp.seq_len());
        let a = logits_of(&cfg, &params, &b);
        let p = logits_of(&cfg, &params, &bp);
        let per = a.numel() / ex.len();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(
                &p.data()[k * per..(k + 1) * per],
                &a.data()[i * per..(i + 1) * per]
            );
        }
    }
}

fn identity(
    v: metaxl_core::autodiff::Var<'_>,
) -> metaxl_core::Result<metaxl_core::autodiff::Var<'_>> {
    Ok(v)
}

#[test]
fn identity_hook_is_bit_identical_at_every_layer() {
    let cfg = config(TaskKind::TokenLabeling, 8, 2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let b = batch(&examples(&mut rng, cfg.task_kind, 3, 0..=8));
    let params = EncoderParams::init(&cfg, 7).unwrap().params;
    let plain = logits_of(&cfg, &params, &b);
    for layer in 0..=cfg.n_layers {
        let g = Graph::new();
        let vars = params.to_constants(&g);
        let hook = RtnHook {
            layer,
            transform: &identity,
        };
        let hooked = forward(&cfg, &vars, &b, Some(hook)).unwrap().logits.value();
        assert_eq!(*hooked, plain, "layer {layer}");
    }
}

#[test]
fn doubling_a_batch_keeps_the_mean_loss() {
    for task in [TaskKind::TokenLabeling, TaskKind::SequenceClassification] {
        let cfg = config(task, 8, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let b = batch(&examples(&mut rng, task, 4, 0..=8));
        let params = EncoderParams::init(&cfg, 8).unwrap().params;
        let single = loss_value(&cfg, &params, &b);
        let double = loss_value(&cfg, &params, &b.concat(&b).unwrap());
        assert!((single - double).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn tokenize_frames_and_truncates(text in proptest::collection::vec(any::<u8>(), 0..64), max_len in 2usize..40) {
        let ids = tokenize(&text, max_len);
        prop_assert_eq!(ids.len(), text.len().min(max_len - 2) + 2);
        prop_assert_eq!(ids[0], metaxl_core::encoder::CLS);
        prop_assert_eq!(*ids.last().unwrap(), metaxl_core::encoder::SEP);
        for (id, b) in ids[1..ids.len() - 1].iter().zip(&text) {
            prop_assert_eq!(*id, *b as usize);
        }
    }

    #[test]
    fn forward_is_deterministic(seed in 0u64..1000) {
        let cfg = config(TaskKind::TokenLabeling, 8, 1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = batch(&examples(&mut rng, cfg.task_kind, 2, 0..=8));
        let params = EncoderParams::init(&cfg, seed).unwrap().params;
        prop_assert_eq!(logits_of(&cfg, &params, &b), logits_of(&cfg, &params, &b));
    }
}
