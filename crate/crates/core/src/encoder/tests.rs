use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gate::HardConcreteParams;
use crate::tensor::{Tape, Tensor};

fn small_config(mode: RetentionMode) -> EncoderConfig {
    EncoderConfig {
        num_layers: 2,
        model_dim: 16,
        num_heads: 2,
        ff_dim: 32,
        vocab_size: 20,
        max_seq_len: 16,
        num_classes: 3,
        retention_mode: mode,
        ..EncoderConfig::default()
    }
}

fn params(config: &EncoderConfig, seed: u64) -> EncoderParams {
    EncoderParams::init(config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn tokens(seed: u64, n: usize, vocab: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(0..vocab)).collect()
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn schedule_examples() {
    let mut c = EncoderConfig {
        num_layers: 2,
        schedule_mode: ScheduleMode::Geometric,
        rho: 0.5,
        ..EncoderConfig::default()
    };
    assert_eq!(retention_schedule(8, &c).unwrap(), vec![4, 2]);
    c.num_layers = 4;
    assert_eq!(retention_schedule(16, &c).unwrap(), vec![8, 4, 2, 1]);
    c.num_layers = 3;
    c.schedule_mode = ScheduleMode::UniformGlobal;
    c.rho = 0.3;
    assert_eq!(retention_schedule(10, &c).unwrap(), vec![3, 3, 3]);
    for mode in [
        ScheduleMode::UniformGlobal,
        ScheduleMode::Geometric,
        ScheduleMode::LinearDecay,
    ] {
        let full = EncoderConfig {
            rho: 1.0,
            schedule_mode: mode,
            ..c.clone()
        };
        assert_eq!(retention_schedule(7, &full).unwrap(), vec![7; 3]);
    }
    assert!(retention_schedule(0, &c).is_err());
}

#[test]
fn linear_decay_endpoints() {
    let f = linear_decay_fractions(6, (0.452, 0.385));
    let expect = [0.452, 0.4386, 0.4252, 0.4118, 0.3984, 0.385];
    for (a, b) in f.iter().zip(expect) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    let c = EncoderConfig {
        num_layers: 6,
        schedule_mode: ScheduleMode::LinearDecay,
        ..EncoderConfig::default()
    };
    assert_eq!(
        retention_schedule(1000, &c).unwrap(),
        vec![452, 438, 425, 411, 398, 385]
    );
    // rising endpoints are capped so counts never grow with depth
    let rising = EncoderConfig {
        schedule_endpoints: (0.2, 0.6),
        ..c
    };
    let counts = retention_schedule(100, &rising).unwrap();
    assert!(counts.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn config_validation() {
    let bad_heads = EncoderConfig {
        num_heads: 3,
        ..EncoderConfig::default()
    };
    assert!(bad_heads.validate().is_err());
    assert!(EncoderConfig {
        rho: 0.0,
        ..EncoderConfig::default()
    }
    .validate()
    .is_err());
    assert!(EncoderConfig {
        num_layers: 0,
        ..EncoderConfig::default()
    }
    .validate()
    .is_err());
}

#[test]
fn all_ones_gates_match_ungated_bitwise() {
    for mode in [RetentionMode::LayerWise, RetentionMode::OutputGating] {
        for pooling in [Pooling::MeanOverRetained, Pooling::FirstRetained] {
            let config = EncoderConfig {
                pooling,
                ..small_config(mode)
            };
            let p = params(&config, 3);
            let toks = tokens(4, 9, config.vocab_size);
            let ones = vec![vec![1.0; toks.len()]; config.gating_points()];
            let mut tape = Tape::new();
            let vars = p.bind(&mut tape).unwrap();
            let gated = forward_train(&mut tape, &vars, &config, &toks, 1, GateSource::Fixed(&ones)).unwrap();
            let (logits, loss) = forward_ungated(&mut tape, &vars, &config, &toks, Some(1)).unwrap();
            assert_eq!(bits(tape.value(gated.logits)), bits(tape.value(logits)));
            assert_eq!(tape.scalar(gated.loss).to_bits(), tape.scalar(loss.unwrap()).to_bits());
        }
    }
}

#[test]
fn zero_output_gates_give_uniform_prediction() {
    let config = small_config(RetentionMode::OutputGating);
    let p = params(&config, 5);
    let toks = tokens(6, 8, config.vocab_size);
    let zeros = vec![vec![0.0; 8]];
    let mut tape = Tape::new();
    let vars = p.bind(&mut tape).unwrap();
    let out = forward_train(&mut tape, &vars, &config, &toks, 2, GateSource::Fixed(&zeros)).unwrap();
    assert!(tape.value(out.logits).iter().all(|&v| v == 0.0));
    assert!((tape.scalar(out.loss) - (config.num_classes as f64).ln()).abs() < 1e-15);
}

#[test]
fn every_parameter_receives_gradient() {
    let config = EncoderConfig {
        num_layers: 2,
        model_dim: 16,
        num_heads: 2,
        ff_dim: 32,
        vocab_size: 8,
        max_seq_len: 8,
        ..small_config(RetentionMode::LayerWise)
    };
    let p = params(&config, 7);
    let toks: Vec<usize> = (0..8).collect();
    let mut tape = Tape::new();
    let vars = p.bind(&mut tape).unwrap();
    let hc = HardConcreteParams::default();
    let out = forward_train(
        &mut tape,
        &vars,
        &config,
        &toks,
        0,
        GateSource::Sampled {
            seed: 7,
            step: 0,
            slot: 0,
            hc,
        },
    )
    .unwrap();
    // include the budget term so every scorer sees a gradient path
    let loss = crate::budget::lagrangian_loss(&mut tape, out.loss, out.probs[0], 0.5, 2.0).unwrap();
    let grads = tape.backward(loss).unwrap();
    for ((name, _), v) in p.named().into_iter().zip(vars.all()) {
        let g = grads.get(v).unwrap_or_else(|| panic!("{name} has no gradient"));
        assert!(g.iter().any(|&x| x != 0.0), "{name} gradient is all zero");
    }
}

#[test]
fn inference_counts_follow_schedule() {
    let config = EncoderConfig {
        num_layers: 3,
        schedule_mode: ScheduleMode::Geometric,
        rho: 0.5,
        ..small_config(RetentionMode::LayerWise)
    };
    let p = params(&config, 8);
    let toks = tokens(9, 16, config.vocab_size);
    let mut tape = Tape::new();
    let vars = p.bind(&mut tape).unwrap();
    let out = forward_infer(&mut tape, &vars, &config, &toks, Selector::Scored).unwrap();
    let counts: Vec<usize> = out.trace.iter().map(|t| t.retained).collect();
    assert_eq!(counts, retention_schedule(16, &config).unwrap());
    let mut prev: Option<&Vec<usize>> = None;
    for layer in &out.trace {
        assert!(layer.active_indices.windows(2).all(|w| w[0] < w[1]));
        if let Some(p) = prev {
            assert!(layer.active_indices.iter().all(|i| p.contains(i)));
        }
        prev = Some(&layer.active_indices);
    }
}

#[test]
fn full_budget_inference_matches_ungated_bitwise() {
    for mode in [RetentionMode::LayerWise, RetentionMode::OutputGating] {
        let config = EncoderConfig {
            rho: 1.0,
            ..small_config(mode)
        };
        let p = params(&config, 10);
        let toks = tokens(11, 12, config.vocab_size);
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape).unwrap();
        let inf = forward_infer(&mut tape, &vars, &config, &toks, Selector::Scored).unwrap();
        let (logits, _) = forward_ungated(&mut tape, &vars, &config, &toks, None).unwrap();
        assert_eq!(bits(&inf.logits), bits(tape.value(logits)));
    }
}

#[test]
fn single_token_attention_passes_values() {
    let config = EncoderConfig {
        num_layers: 1,
        ..small_config(RetentionMode::LayerWise)
    };
    let p = params(&config, 12);
    let mut tape = Tape::new();
    let vars = p.bind(&mut tape).unwrap();
    let x = tape
        .constant(1, 16, (0..16).map(|i| i as f64 / 10.0).collect())
        .unwrap();
    let out = attention_layer(&mut tape, &vars.blocks[0], 2, x, &[], AttentionMode::Dense).unwrap();
    assert_eq!(tape.dims(out), (1, 16));
    // with one key the attention output is the value projection
    let v = tape.matmul(x, vars.blocks[0].wv).unwrap();
    let v = tape.add_row(v, vars.blocks[0].bv).unwrap();
    let o = tape.matmul(v, vars.blocks[0].wo).unwrap();
    let o = tape.add_row(o, vars.blocks[0].bo).unwrap();
    let r = tape.add(x, o).unwrap();
    let n1 = tape
        .layer_norm_rows(r, vars.blocks[0].ln1_gain, vars.blocks[0].ln1_bias)
        .unwrap();
    let h = tape.matmul(n1, vars.blocks[0].ff1).unwrap();
    let h = tape.add_row(h, vars.blocks[0].ff1_bias).unwrap();
    let h = tape.activation(h, crate::tensor::Activation::Gelu).unwrap();
    let f = tape.matmul(h, vars.blocks[0].ff2).unwrap();
    let f = tape.add_row(f, vars.blocks[0].ff2_bias).unwrap();
    let r2 = tape.add(n1, f).unwrap();
    let expect = tape
        .layer_norm_rows(r2, vars.blocks[0].ln2_gain, vars.blocks[0].ln2_bias)
        .unwrap();
    for (a, b) in tape.value(out).iter().zip(tape.value(expect)) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn block_is_permutation_equivariant_without_positions() {
    let config = EncoderConfig {
        num_layers: 1,
        positional_encoding: false,
        ..small_config(RetentionMode::LayerWise)
    };
    let p = params(&config, 13);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let data: Vec<f64> = (0..4 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let perm = [2usize, 0, 3, 1];
    let mut tape = Tape::new();
    let vars = p.bind(&mut tape).unwrap();
    let x = tape.constant(4, 16, data).unwrap();
    let xp = tape.gather_rows(x, &perm).unwrap();
    let y = attention_layer(&mut tape, &vars.blocks[0], 2, x, &[], AttentionMode::Dense).unwrap();
    let yp = attention_layer(&mut tape, &vars.blocks[0], 2, xp, &[], AttentionMode::Dense).unwrap();
    for (i, &src) in perm.iter().enumerate() {
        for j in 0..16 {
            let a = tape.value(yp)[i * 16 + j];
            let b = tape.value(y)[src * 16 + j];
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn output_shape_matches_input() {
    let config = small_config(RetentionMode::LayerWise);
    let p = params(&config, 15);
    let mut tape = Tape::new();
    let vars = p.bind(&mut tape).unwrap();
    for n in 1..=config.max_seq_len {
        let x = tape.constant(n, 16, vec![0.1; n * 16]).unwrap();
        let y = attention_layer(&mut tape, &vars.blocks[0], 2, x, &[], AttentionMode::Dense).unwrap();
        assert_eq!(tape.dims(y), (n, 16));
    }
}

#[test]
fn attention_macs_by_mode() {
    let config = small_config(RetentionMode::LayerWise);
    let p = params(&config, 16);
    let (t, m, d) = (10usize, 4usize, 16usize);
    let retained: Vec<usize> = (0..m).collect();
    for (mode, expect) in [
        (AttentionMode::Dense, t * t * d),
        (AttentionMode::RetainedBlock, m * m * d),
        (AttentionMode::MixedFullSparse, t * m * d),
    ] {
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape).unwrap();
        let x = tape.constant(t, d, vec![0.3; t * d]).unwrap();
        attention_layer(&mut tape, &vars.blocks[0], 2, x, &retained, mode).unwrap();
        assert_eq!(tape.counters().attention_score_macs, expect as u64, "{mode:?}");
    }
}

#[test]
fn relaxed_gates_pass_gradient_to_logits() {
    let config = small_config(RetentionMode::OutputGating);
    let p = params(&config, 17);
    let toks = tokens(18, 10, config.vocab_size);
    let mut tape = Tape::new();
    let vars = p.bind(&mut tape).unwrap();
    let hc = HardConcreteParams::default();
    let out = forward_train(
        &mut tape,
        &vars,
        &config,
        &toks,
        1,
        GateSource::Sampled {
            seed: 1,
            step: 0,
            slot: 0,
            hc,
        },
    )
    .unwrap();
    let grads = tape.backward(out.loss).unwrap();
    let z = tape.value(out.gates[0]).to_vec();
    let gs = grads.get(out.scores[0]).unwrap();
    for (zi, gi) in z.iter().zip(gs) {
        if *zi > 0.0 && *zi < 1.0 {
            assert!(*gi != 0.0);
        } else {
            assert_eq!(*gi, 0.0);
        }
    }
}

#[test]
fn bad_inputs_rejected() {
    let config = small_config(RetentionMode::LayerWise);
    let p = params(&config, 19);
    let mut tape = Tape::new();
    let vars = p.bind(&mut tape).unwrap();
    let hc = HardConcreteParams::default();
    let src = GateSource::Sampled {
        seed: 0,
        step: 0,
        slot: 0,
        hc,
    };
    assert!(forward_train(&mut tape, &vars, &config, &[], 0, src).is_err());
    assert!(forward_train(&mut tape, &vars, &config, &[1, 2], 3, src).is_err());
    assert!(forward_train(&mut tape, &vars, &config, &[1, 99], 0, src).is_err());
    assert!(forward_train(&mut tape, &vars, &config, &vec![1; 17], 0, src).is_err());
}

#[test]
fn nested_random_masks_follow_schedule() {
    let config = EncoderConfig {
        num_layers: 3,
        schedule_mode: ScheduleMode::Geometric,
        rho: 0.5,
        ..small_config(RetentionMode::LayerWise)
    };
    let masks = random_nested_masks(&config, 16, 3, 0, 0).unwrap();
    let counts: Vec<usize> = masks.iter().map(|m| m.iter().filter(|&&v| v == 1.0).count()).collect();
    assert_eq!(counts, vec![8, 4, 2]);
    for w in masks.windows(2) {
        assert!(w[1].iter().zip(&w[0]).all(|(b, a)| *b <= *a));
    }
}

#[test]
fn input_masks_match_random_pruning() {
    for mode in [RetentionMode::LayerWise, RetentionMode::OutputGating] {
        let config = EncoderConfig {
            schedule_mode: ScheduleMode::Geometric,
            rho: 0.5,
            ..small_config(mode)
        };
        let p = params(&config, 30);
        let toks = tokens(31, 12, config.vocab_size);
        let masks = random_nested_masks(&config, toks.len(), 9, 0, 4).unwrap();
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape).unwrap();
        let soft = forward_train(&mut tape, &vars, &config, &toks, 0, GateSource::InputMasks(&masks)).unwrap();
        let soft_logits = tape.value(soft.logits).to_vec();
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape).unwrap();
        let hard = forward_infer(&mut tape, &vars, &config, &toks, Selector::Random { seed: 9, slot: 4 }).unwrap();
        for (a, b) in soft_logits.iter().zip(&hard.logits) {
            assert!((a - b).abs() < 1e-9, "{mode:?}: {a} vs {b}");
        }
        let kept: Vec<usize> = (0..toks.len()).filter(|&i| masks.last().unwrap()[i] == 1.0).collect();
        assert_eq!(hard.trace.last().unwrap().active_indices, kept);
    }
}

#[test]
fn named_parameters_round_trip() {
    let config = small_config(RetentionMode::LayerWise);
    let p = params(&config, 20);
    let mut q = params(&config, 21);
    let map = p
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect::<std::collections::HashMap<String, Tensor>>();
    q.load_named(map).unwrap();
    assert_eq!(p.named().len(), q.named().len());
    for ((na, a), (nb, b)) in p.named().into_iter().zip(q.named()) {
        assert_eq!(na, nb);
        assert_eq!(a.data(), b.data());
    }
}
