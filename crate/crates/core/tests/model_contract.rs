#![allow(clippy::needless_range_loop)]

use gamma_core::autograd::{sigmoid, Graph, ParamStore};
use gamma_core::model::{
    AttnVariant, Branch, DecoderPass, FusionMode, Model, ModelConfig, MultiScaleFeatures, QueryGrid, StageOutput,
};
use gamma_core::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn stage(g: &mut Graph, t: Tensor) -> StageOutput {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let map = g.input(t);
    let tokens = g.to_tokens(map);
    StageOutput {
        map,
        tokens,
        height: h,
        width: w,
    }
}

fn features_from(g: &mut Graph, maps: [Tensor; 4]) -> MultiScaleFeatures {
    let [a, b, c, d] = maps;
    MultiScaleFeatures {
        stages: [stage(g, a), stage(g, b), stage(g, c), stage(g, d)],
    }
}

fn zero_features(config: &ModelConfig, side: usize) -> [Tensor; 4] {
    std::array::from_fn(|i| {
        let s = side / config.strides()[i];
        Tensor::zeros(&[config.stage_channels[i], s, s])
    })
}

#[test]
fn shape_contract_for_toy_and_full_resolution() {
    let model = Model::new(ModelConfig::toy(), 0).unwrap();
    let c = model.config().clone();
    for side in [64usize, 512] {
        let mut g = Graph::new();
        let pass = model.forward(&mut g, &random_tensor(&[3, side, side], 1)).unwrap();
        for (i, s) in pass.features.stages.iter().enumerate() {
            let r = [4, 8, 16, 32][i];
            assert_eq!(g.shape(s.map), &[c.stage_channels[i], side / r, side / r]);
        }
        let q = side / 4;
        assert_eq!(g.shape(pass.dec_ai.output), &[c.decoder_channels, q, q]);
        assert_eq!(g.shape(pass.dec_ma.output), &[c.decoder_channels, q, q]);
        assert_eq!(g.shape(pass.dec_ai.concat), &[4 * c.decoder_channels, q, q]);
        assert_eq!(g.shape(pass.mask_ai), &[1, side, side]);
        assert_eq!(g.shape(pass.mask_ma), &[1, side, side]);
        assert_eq!(g.shape(pass.cls_logit), &[1, 1]);
        assert_eq!(g.shape(pass.cls_feature), &[1, c.decoder_channels]);
    }
}

#[test]
fn non_rectangular_inputs_follow_schedule() {
    let model = Model::new(ModelConfig::micro(), 0).unwrap();
    let p = model.predict(&random_tensor(&[3, 32, 96], 2)).unwrap();
    assert_eq!(p.mask_ai_logits.shape(), &[32, 96]);
}

#[test]
fn indivisible_inputs_name_the_axis() {
    let model = Model::new(ModelConfig::micro(), 0).unwrap();
    match model.predict(&random_tensor(&[3, 50, 64], 2)) {
        Err(Error::Shape(m)) => assert!(m.contains("height"), "{m}"),
        other => panic!("unexpected {other:?}"),
    }
    match model.predict(&random_tensor(&[3, 64, 40], 2)) {
        Err(Error::Shape(m)) => assert!(m.contains("width"), "{m}"),
        other => panic!("unexpected {other:?}"),
    }
    assert!(model.predict(&random_tensor(&[1, 64, 64], 2)).is_err());
}

#[test]
fn samples_are_processed_independently() {
    let model = Model::new(ModelConfig::toy(), 3).unwrap();
    let img = random_tensor(&[3, 64, 64], 4);
    let other = random_tensor(&[3, 64, 64], 5);
    let a = model.predict(&img).unwrap();
    let _ = model.predict(&other).unwrap();
    let b = model.predict(&img).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_features_give_bias_only_response() {
    let config = ModelConfig::micro();
    let model = Model::new(config.clone(), 7).unwrap();
    let run = |model: &Model| {
        let mut g = Graph::new();
        let f = features_from(&mut g, zero_features(&config, 64));
        let pass = model.fuse_decoder(&mut g, &f, Branch::Ai).unwrap();
        g.value(pass.output).clone()
    };
    let out = run(&model);
    let first = out.data();
    // spatially uniform per channel
    let area = 16 * 16;
    for ch in first.chunks(area) {
        assert!(ch.iter().all(|&v| v == ch[0]));
    }
    assert_eq!(run(&model), out);
}

/// Output rows touched by a bilinear ×`f` upsample of an impulse at `y`,
/// from the half-pixel source-coordinate formula.
fn impulse_support(y: usize, f: usize, n_out: usize) -> Vec<usize> {
    (0..n_out)
        .filter(|&o| {
            let src = ((o as f64 + 0.5) / f as f64 - 0.5).max(0.0);
            (src - y as f64).abs() < 1.0
        })
        .collect()
}

#[test]
fn impulse_positions_reveal_upsampling_factors() {
    let config = ModelConfig::micro();
    let model = Model::new(config.clone(), 8).unwrap();
    let side = 256; // stride-4 map is 64x64
    let base = {
        let mut g = Graph::new();
        let f = features_from(&mut g, zero_features(&config, side));
        let pass = model.fuse_decoder(&mut g, &f, Branch::Ma).unwrap();
        g.value(pass.concat).clone()
    };
    let c_dec = config.decoder_channels;
    for i in 0..4 {
        let factor = 1usize << i;
        let mut maps = zero_features(&config, side);
        let (py, px) = (3usize, 4usize);
        let s = side / config.strides()[i];
        for ch in 0..config.stage_channels[i] {
            maps[i].data_mut()[(ch * s + py) * s + px] = 1.0;
        }
        let mut g = Graph::new();
        let f = features_from(&mut g, maps);
        let pass = model.fuse_decoder(&mut g, &f, Branch::Ma).unwrap();
        let concat = g.value(pass.concat);
        let mut rows = std::collections::BTreeSet::new();
        let mut cols = std::collections::BTreeSet::new();
        for block in 0..4 {
            for ch in block * c_dec..(block + 1) * c_dec {
                for y in 0..64 {
                    for x in 0..64 {
                        let d = concat.at3(ch, y, x) - base.at3(ch, y, x);
                        if d.abs() > 1e-12 {
                            assert_eq!(block, i, "impulse at stage {} leaked into block {block}", i + 1);
                            rows.insert(y);
                            cols.insert(x);
                        }
                    }
                }
            }
        }
        assert_eq!(rows.into_iter().collect::<Vec<_>>(), impulse_support(py, factor, 64), "stage {}", i + 1);
        assert_eq!(cols.into_iter().collect::<Vec<_>>(), impulse_support(px, factor, 64), "stage {}", i + 1);
    }
}

#[test]
fn mismatched_stage_shapes_are_rejected() {
    let config = ModelConfig::micro();
    let model = Model::new(config.clone(), 8).unwrap();
    let mut maps = zero_features(&config, 64);
    maps[2] = Tensor::zeros(&[config.stage_channels[2], 5, 4]);
    let mut g = Graph::new();
    let f = features_from(&mut g, maps);
    assert!(matches!(model.fuse_decoder(&mut g, &f, Branch::Ai), Err(Error::Shape(_))));
}

fn decoder_pass(g: &mut Graph, map: Tensor) -> DecoderPass {
    let (h, w) = (map.shape()[1], map.shape()[2]);
    let s = stage(g, map);
    DecoderPass {
        concat: s.map,
        output: s.map,
        tokens: s.tokens,
        height: h,
        width: w,
    }
}

#[test]
fn mask_head_upsamples_by_four_and_matches_interpolation_oracle() {
    let config = ModelConfig::micro();
    let model = Model::new(config.clone(), 9).unwrap();
    let c = config.decoder_channels;

    let mut g = Graph::new();
    let pass = decoder_pass(&mut g, Tensor::full(&[c, 8, 8], 0.3));
    let logits = model.predict_mask(&mut g, &pass, Branch::Ai);
    assert_eq!(g.shape(logits), &[1, 32, 32]);
    let v = g.value(logits);
    assert!(v.data().iter().all(|&x| x == v.data()[0]));

    let map = random_tensor(&[c, 6, 5], 10);
    let mut g = Graph::new();
    let pass = decoder_pass(&mut g, map.clone());
    let logits = model.predict_mask(&mut g, &pass, Branch::Ai);
    let out = g.value(logits).clone();
    assert_eq!(out.shape(), &[1, 24, 20]);

    // projection oracle from the stored head weights
    let p = model.params();
    let w = p.get(p.id("head_ai.weight").unwrap());
    let b = p.get(p.id("head_ai.bias").unwrap()).data()[0];
    let low = |y: usize, x: usize| -> f64 { (0..c).map(|ch| map.at3(ch, y, x) * w.data()[ch]).sum::<f64>() + b };
    let tap = |o: usize, n_in: usize| {
        let src = ((o as f64 + 0.5) / 4.0 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        (i0, (i0 + 1).min(n_in - 1), src - i0 as f64)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let (oy, ox) = (rng.random_range(0..24), rng.random_range(0..20));
        let (y0, y1, ly) = tap(oy, 6);
        let (x0, x1, lx) = tap(ox, 5);
        let want = (1.0 - ly) * ((1.0 - lx) * low(y0, x0) + lx * low(y0, x1)) + ly * ((1.0 - lx) * low(y1, x0) + lx * low(y1, x1));
        assert!((out.at3(0, oy, ox) - want).abs() < 1e-12);
    }
}

#[test]
fn cls_feature_is_projected_global_average() {
    let config = ModelConfig::micro();
    let model = Model::new(config.clone(), 12).unwrap();
    let c4 = config.stage_channels[3];
    let mut maps = zero_features(&config, 128);
    maps[3] = random_tensor(&[c4, 4, 4], 13);
    let f4 = maps[3].clone();

    let mut g = Graph::new();
    let f = features_from(&mut g, maps.clone());
    let (cls, pooled) = model.cls_feature(&mut g, &f);
    let pooled_v = g.value(pooled).clone();
    for ch in 0..c4 {
        let mut sum = 0.0;
        for y in 0..4 {
            for x in 0..4 {
                sum += f4.at3(ch, y, x);
            }
        }
        assert!((pooled_v.data()[ch] - sum / 16.0).abs() < 1e-14);
    }
    let cls_v = g.value(cls).clone();
    assert_eq!(cls_v.shape(), &[1, config.decoder_channels]);

    // spatial permutation of F4 leaves the output unchanged
    let mut permuted = f4.clone();
    for ch in 0..c4 {
        for i in 0..16 {
            let j = (i * 5 + 3) % 16;
            permuted.data_mut()[ch * 16 + j] = f4.data()[ch * 16 + i];
        }
    }
    maps[3] = permuted;
    let mut g2 = Graph::new();
    let f2 = features_from(&mut g2, maps.clone());
    let (cls2, _) = model.cls_feature(&mut g2, &f2);
    assert!(g2.value(cls2).max_abs_diff(&cls_v) < 1e-14);

    // constant per channel pools to that constant
    maps[3] = Tensor::new(vec![c4, 4, 4], (0..c4 * 16).map(|i| (i / 16) as f64 * 0.25).collect());
    let mut g3 = Graph::new();
    let f3 = features_from(&mut g3, maps);
    let (_, pooled3) = model.cls_feature(&mut g3, &f3);
    for ch in 0..c4 {
        assert_eq!(g3.value(pooled3).data()[ch], ch as f64 * 0.25);
    }
}

fn with_config(f: impl FnOnce(&mut ModelConfig)) -> ModelConfig {
    let mut c = ModelConfig::micro();
    f(&mut c);
    c
}

#[test]
fn literal_token_attention_weights_are_exactly_one() {
    let model = Model::new(with_config(|c| c.attn_variant = AttnVariant::LiteralToken), 14).unwrap();
    let c = model.config().decoder_channels;
    let mut g = Graph::new();
    let queries = g.input(random_tensor(&[20, c], 15));
    let cls = g.input(random_tensor(&[1, c], 16));
    let grid = QueryGrid {
        tokens: queries,
        height: 4,
        width: 5,
    };
    let (_, attended) = model.fusion().reverse_branch(&mut g, model.params(), grid, cls, cls).unwrap();
    for w in &attended.weights {
        assert_eq!(g.shape(*w), &[20, 1]);
        assert!(g.value(*w).data().iter().all(|&v| v == 1.0));
    }
}

#[test]
fn spatial_attention_rows_match_brute_force_softmax() {
    let config = with_config(|c| c.cross_attn_heads = 2);
    let model = Model::new(config, 17).unwrap();
    let c = model.config().decoder_channels;
    let fusion = model.fusion();
    let mut g = Graph::new();
    let q_in = random_tensor(&[6, c], 18);
    let k_in = random_tensor(&[3, c], 19);
    let queries = g.input(q_in.clone());
    let keys = g.input(k_in.clone());
    let grid = QueryGrid {
        tokens: queries,
        height: 2,
        width: 3,
    };
    let (_, attended) = fusion.reverse_branch(&mut g, model.params(), grid, keys, keys).unwrap();

    // brute force: project with stored weights, add position codes to queries
    let p = model.params();
    let get = |n: &str| p.get(p.id(n).unwrap()).clone();
    let pe = gamma_core::model::position_codes(2, 3, c);
    let project = |x: &Tensor, w: &Tensor, b: &Tensor, add: Option<&Tensor>| -> Vec<Vec<f64>> {
        (0..x.shape()[0])
            .map(|r| {
                (0..c)
                    .map(|j| {
                        (0..c)
                            .map(|i| (x.at2(r, i) + add.map_or(0.0, |a| a.at2(r, i))) * w.at2(i, j))
                            .sum::<f64>()
                            + b.data()[j]
                    })
                    .collect()
            })
            .collect()
    };
    let q = project(&q_in, &get("fusion.reverse.q.weight"), &get("fusion.reverse.q.bias"), Some(&pe));
    let k = project(&k_in, &get("fusion.reverse.k.weight"), &get("fusion.reverse.k.bias"), None);
    let dh = c / 2;
    for (h, w) in attended.weights.iter().enumerate() {
        let wv = g.value(*w);
        assert_eq!(wv.shape(), &[6, 3]);
        for r in 0..6 {
            let scores: Vec<f64> = (0..3)
                .map(|j| (0..dh).map(|d| q[r][h * dh + d] * k[j][h * dh + d]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            let row_sum: f64 = (0..3).map(|j| wv.at2(r, j)).sum();
            assert!((row_sum - 1.0).abs() < 1e-12);
            for j in 0..3 {
                assert!((wv.at2(r, j) - scores[j].exp() / z).abs() < 1e-12);
            }
        }
    }
}

fn zero_value_projection(model: &mut Model, prefix: &str) {
    let p = model.params_mut();
    for name in [format!("{prefix}.v.weight"), format!("{prefix}.v.bias")] {
        let id = p.id(&name).unwrap();
        p.get_mut(id).data_mut().fill(0.0);
    }
}

#[test]
fn zero_value_projection_is_residual_identity() {
    for variant in [AttnVariant::LiteralToken, AttnVariant::SpatialKv] {
        let mut model = Model::new(with_config(|c| c.attn_variant = variant), 20).unwrap();
        zero_value_projection(&mut model, "fusion.reverse");
        let mut g = Graph::new();
        let pass = model.forward(&mut g, &random_tensor(&[3, 64, 64], 21)).unwrap();
        assert_eq!(g.value(pass.cls_feature), g.value(pass.cls_base));

        // the whole classification path equals the no-attention model with the same weights
        let none = with_config(|c| {
            c.attn_variant = variant;
            c.fusion = FusionMode::None;
        });
        let mut plain = Model::new(none, 0).unwrap();
        let mut store = ParamStore::new();
        for (_, name, t) in model.params().iter() {
            if !name.starts_with("fusion.") {
                store.insert(name, t.clone());
            }
        }
        plain.load_params(store).unwrap();
        let img = random_tensor(&[3, 64, 64], 22);
        assert_eq!(plain.predict(&img).unwrap().cls_logit, model.predict(&img).unwrap().cls_logit);
    }
}

#[test]
fn classify_is_dot_product_plus_bias() {
    let mut model = Model::new(ModelConfig::micro(), 23).unwrap();
    let c = model.config().decoder_channels;
    let v = random_tensor(&[1, c], 24);
    let logit = |model: &Model, v: &Tensor| {
        let mut g = Graph::new();
        let x = g.input(v.clone());
        let l = model.classify(&mut g, x);
        g.value(l).item()
    };
    let p = model.params();
    let w = p.get(p.id("cls.head.weight").unwrap()).clone();
    let b = p.get(p.id("cls.head.bias").unwrap()).data()[0];
    let want: f64 = (0..c).map(|i| v.data()[i] * w.data()[i]).sum::<f64>() + b;
    assert!((logit(&model, &v) - want).abs() < 1e-14);
    let doubled = v.map(|x| 2.0 * x);
    assert!((logit(&model, &doubled) - b - 2.0 * (logit(&model, &v) - b)).abs() < 1e-14);

    for name in ["cls.head.weight", "cls.head.bias"] {
        let id = model.params().id(name).unwrap();
        model.params_mut().get_mut(id).data_mut().fill(0.0);
    }
    assert_eq!(logit(&model, &v), 0.0);
    assert_eq!(sigmoid(0.0), 0.5);
}

#[test]
fn eval_forward_is_bit_identical() {
    let model = Model::new(ModelConfig::toy(), 25).unwrap();
    let img = random_tensor(&[3, 64, 64], 26);
    assert_eq!(model.predict(&img).unwrap(), model.predict(&img).unwrap());
    let again = Model::new(ModelConfig::toy(), 25).unwrap();
    assert_eq!(again.predict(&img).unwrap(), model.predict(&img).unwrap());
}

#[test]
fn decoder_parameters_are_disjoint() {
    let mut model = Model::new(ModelConfig::micro(), 27).unwrap();
    let img = random_tensor(&[3, 32, 32], 28);
    let before = model.predict(&img).unwrap();
    for name in model.param_names_with_prefix("decoder_ai") {
        let id = model.params().id(&name).unwrap();
        for v in model.params_mut().get_mut(id).data_mut() {
            *v += 0.05;
        }
    }
    let after = model.predict(&img).unwrap();
    assert_eq!(after.mask_ma_logits, before.mask_ma_logits);
    assert_ne!(after.mask_ai_logits, before.mask_ai_logits);
}

fn permuted_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let c = t.shape()[1];
    let mut data = Vec::with_capacity(t.len());
    for &p in perm {
        data.extend_from_slice(&t.data()[p * c..(p + 1) * c]);
    }
    Tensor::new(t.shape().to_vec(), data)
}

fn pooled_reverse(model: &Model, queries: &Tensor, h: usize, w: usize, stage4: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let q = g.input(queries.clone());
    let cls = g.input(random_tensor(&[1, model.config().decoder_channels], 40));
    let s4 = stage(&mut g, stage4.clone());
    let (k, v) = model.fusion().reverse_kv(&mut g, model.params(), cls, &s4);
    let grid = QueryGrid {
        tokens: q,
        height: h,
        width: w,
    };
    let (pooled, attended) = model.fusion().reverse_branch(&mut g, model.params(), grid, k, v).unwrap();
    for a in &attended.weights {
        for row in g.value(*a).data().chunks(g.shape(*a)[1]) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
    }
    g.value(pooled).clone()
}

#[test]
fn literal_token_pooling_ignores_query_order() {
    let model = Model::new(with_config(|c| c.attn_variant = AttnVariant::LiteralToken), 41).unwrap();
    let c = model.config().decoder_channels;
    let queries = random_tensor(&[24, c], 42);
    let stage4 = random_tensor(&[model.config().stage_channels[3], 2, 2], 43);
    let base = pooled_reverse(&model, &queries, 4, 6, &stage4);
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    for _ in 0..20 {
        let mut perm: Vec<usize> = (0..24).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        assert_eq!(pooled_reverse(&model, &permuted_rows(&queries, &perm), 4, 6, &stage4), base);
    }
}

#[test]
fn spatial_pooling_depends_on_query_order() {
    let mut model = Model::new(ModelConfig::micro(), 45).unwrap();
    assert_eq!(model.config().attn_variant, AttnVariant::SpatialKv);
    // sharpen the attention so order effects are far above rounding
    for name in model.param_names_with_prefix("fusion.") {
        let id = model.params().id(&name).unwrap();
        model.params_mut().get_mut(id).data_mut().iter_mut().for_each(|v| *v *= 30.0);
    }
    let c = model.config().decoder_channels;
    let queries = random_tensor(&[24, c], 46);
    let stage4 = random_tensor(&[model.config().stage_channels[3], 2, 2], 47);
    let base = pooled_reverse(&model, &queries, 4, 6, &stage4);
    let reversed: Vec<usize> = (0..24).rev().collect();
    let other = pooled_reverse(&model, &permuted_rows(&queries, &reversed), 4, 6, &stage4);
    assert!(other.max_abs_diff(&base) > 1e-3, "no witness: {}", other.max_abs_diff(&base));
}

#[test]
fn analytic_gradients_match_central_differences() {
    use gamma_core::gradcheck::{numeric_gradient, relative_error};
    use gamma_core::trainer::{sample_gradients, LossWeights};

    for variant in [AttnVariant::SpatialKv, AttnVariant::LiteralToken] {
        let config = with_config(|c| c.attn_variant = variant);
        assert!(config.decoder_channels <= 8);
        let mut model = Model::new(config, 50).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let mask = |rng: &mut ChaCha8Rng| Tensor::new(vec![1024], (0..1024).map(|_| f64::from(rng.random_bool(0.4))).collect());
        let sample = gamma_core::datapipe::Prepared {
            image: random_tensor(&[3, 32, 32], 52),
            mask_ai: mask(&mut rng),
            mask_mani: mask(&mut rng),
            cls: 1,
            category: gamma_core::SourceCategory::Inpaint,
        };
        let weights = LossWeights::default();
        let analytic = sample_gradients(&model, &sample, 1, &weights).unwrap().grads;
        let loss = |m: &Model| Ok(sample_gradients(m, &sample, 1, &weights)?.losses.total);
        let names: Vec<String> = ["decoder_ai", "decoder_ma", "fusion."]
            .iter()
            .flat_map(|p| model.param_names_with_prefix(p))
            .collect();
        assert!(names.iter().any(|n| n.starts_with("fusion.reverse.q")));
        for name in names {
            let id = model.params().id(&name).unwrap();
            let a = analytic.get(id).cloned().unwrap();
            let n = numeric_gradient(&mut model, &name, 1e-5, &loss).unwrap();
            let err = relative_error(&a, &n);
            assert!(err < 1e-4, "{variant:?} {name}: relative error {err:.3e}");
        }
    }
}
