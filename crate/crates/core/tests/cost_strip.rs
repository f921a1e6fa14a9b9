mod common;

use common::*;
use vpnext::cost::{attention_reference_flops, count_cost_rect, CostRules};
use vpnext::{count_cost, CostReport, Model, Phase, AUX_PREFIX};
use vpnext_tensor::{Graph, OpKind};

fn infer_flops(variant: &str) -> u64 {
    let model = Model::<f32>::new(default_config(variant), 0).unwrap();
    count_cost(&model, 64, Phase::Inference).unwrap().flops
}

#[test]
fn vcr_inference_cost_equals_deep_supervision() {
    for up in ["bilinear", "real-3"] {
        let ds = infer_flops(&format!("ds+{up}"));
        for k in 1..=3 {
            assert_eq!(infer_flops(&format!("vcr-{k}+{up}")), ds, "vcr-{k}+{up}");
        }
        assert_eq!(infer_flops(&format!("na+{up}")), ds);
        assert_eq!(infer_flops(&format!("none+{up}")), ds);
    }
}

#[test]
fn training_cost_exceeds_inference_with_replay() {
    for v in ["vcr-1", "vcr-3+real-2", "ds", "na"] {
        let model = Model::<f32>::new(default_config(v), 0).unwrap();
        let train = count_cost(&model, 64, Phase::Train).unwrap();
        let infer = count_cost(&model, 64, Phase::Inference).unwrap();
        assert!(train.flops > infer.flops, "{v}");
        assert!(train.params > infer.params, "{v}");
    }
    let plain = Model::<f32>::new(default_config("none"), 0).unwrap();
    let train = count_cost(&plain, 64, Phase::Train).unwrap();
    let infer = count_cost(&plain, 64, Phase::Inference).unwrap();
    assert_eq!(train.flops, infer.flops);
}

#[test]
fn decoder_costs_sit_far_below_attention_decoder() {
    let size = 512;
    let decoder = |v: &str| {
        let model = Model::<f32>::new(default_config(v), 0).unwrap();
        let r = count_cost(&model, size, Phase::Inference).unwrap();
        r.module_flops("upsampler") + r.module_flops("head")
    };
    let real = decoder("vcr-2+real-3");
    let bilinear = decoder("vcr-2+bilinear");
    let reference = attention_reference_flops(size / 4, size / 4, 64);
    assert!(real > bilinear, "{real} vs {bilinear}");
    assert!(real * 10 < reference, "{real} vs {reference}");
}

fn kind_flops_in_scope(model: &Model<f32>, h: usize, w: usize, kind: OpKind, scope: &str) -> u64 {
    let rules = CostRules::default();
    let mut g = Graph::<f32>::shape_only();
    let p = model.bind(&mut g, false);
    let img = g.placeholder(&[1, h, w, 3], false).unwrap();
    model.forward(&mut g, &p, img, Phase::Inference).unwrap();
    g.records().filter(|r| r.kind == kind && r.scope.starts_with(scope)).map(|r| rules.flops(&r).unwrap()).sum()
}

#[test]
fn area_scaling_laws() {
    for v in ["vcr-2+bilinear", "vcr-2+real-3"] {
        let model = Model::<f32>::new(default_config(v), 0).unwrap();
        let rules = CostRules::default();
        let small = count_cost_rect(&model, 64, 64, Phase::Inference, &rules).unwrap();
        let large = count_cost_rect(&model, 64, 128, Phase::Inference, &rules).unwrap();
        assert_eq!(large.kind_flops(OpKind::Conv2d), 2 * small.kind_flops(OpKind::Conv2d), "{v}");
        let a = kind_flops_in_scope(&model, 64, 64, OpKind::BatchMatMul, "context");
        let b = kind_flops_in_scope(&model, 64, 128, OpKind::BatchMatMul, "context");
        assert!(a > 0);
        assert_eq!(b, 4 * a, "{v}");
        let a = kind_flops_in_scope(&model, 64, 64, OpKind::BatchMatMul, "encoder");
        let b = kind_flops_in_scope(&model, 64, 128, OpKind::BatchMatMul, "encoder");
        assert_eq!(b, 4 * a, "{v}");
    }
}

#[test]
fn missing_rule_is_an_error() {
    let model = Model::<f32>::new(default_config("vcr-2"), 0).unwrap();
    let mut rules = CostRules::default();
    rules.remove(OpKind::Gelu);
    let err = count_cost_rect(&model, 64, 64, Phase::Inference, &rules).unwrap_err();
    assert!(err.to_string().contains("gelu"), "{err}");
}

#[test]
fn report_totals_and_json() {
    let model = Model::<f32>::new(default_config("vcr-2+real-3"), 0).unwrap();
    let r = count_cost(&model, 64, Phase::Train).unwrap();
    assert_eq!(r.flops, r.breakdown.iter().map(|m| m.flops).sum::<u64>());
    assert_eq!(r.params, r.breakdown.iter().map(|m| m.params).sum::<u64>());
    assert_eq!(r.flops, r.by_kind.values().sum::<u64>());
    assert_eq!(r.params as usize, model.params().num_scalars());
    assert!(r.module("aux").is_some());
    let json = serde_json::to_string(&r).unwrap();
    assert!(json.contains("\"byKind\""));
    let back: CostReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, r);
    assert_eq!(r, count_cost(&model, 64, Phase::Train).unwrap());
}

#[test]
fn stripped_logits_match_training_graph() {
    for v in ["ds", "na", "vcr-1", "vcr-2", "vcr-3", "vcr-2+real-2", "ds+mock"] {
        let model = Model::<f64>::new(tiny_config(v), 3).unwrap();
        let mut r = rng(10);
        let img = image::<f64>(&mut r, 2, 32, 32);
        let mut g = Graph::new();
        let p = model.bind(&mut g, true);
        let x = g.constant(&img);
        let out = model.forward(&mut g, &p, x, Phase::Train).unwrap();
        let mask = random_mask(&mut r, 2, 32, 32, 3);
        model.loss(&mut g, &p, &out, &mask).unwrap();
        let train_logits = g.tensor(out.logits);

        let stripped = model.strip_for_inference().unwrap();
        assert!(stripped.branches().is_empty());
        assert!(stripped.params().names().all(|n| !n.starts_with(AUX_PREFIX)));
        assert!(stripped.params().num_scalars() < model.params().num_scalars(), "{v}");
        assert_eq!(stripped.predict(&img).unwrap(), train_logits, "{v}");
        assert_eq!(model.predict(&img).unwrap(), train_logits, "{v}");
    }
}

#[test]
fn inference_is_invariant_to_replay_depth() {
    let mut r = rng(11);
    let img = image::<f64>(&mut r, 1, 32, 32);
    let base = Model::<f64>::new(tiny_config("ds"), 5).unwrap().strip_for_inference().unwrap();
    let want = base.predict(&img).unwrap();
    let want_flops = count_cost(&base, 32, Phase::Inference).unwrap().flops;
    for v in ["vcr-1", "vcr-2", "vcr-3"] {
        let model = Model::<f64>::new(tiny_config(v), 5).unwrap();
        let stripped = model.strip_for_inference().unwrap();
        assert_eq!(stripped.params().num_scalars(), base.params().num_scalars());
        assert_eq!(count_cost(&model, 32, Phase::Inference).unwrap().flops, want_flops, "{v}");
        let mut main = vpnext::ParamStore::new();
        for (n, t) in base.params().iter() {
            main.insert(n, t.clone()).unwrap();
        }
        let same_weights = Model::from_params(stripped.config().clone(), &main).unwrap();
        assert_eq!(same_weights.predict(&img).unwrap(), want, "{v}");
    }
}
