//! Golden snapshots of seeded computations. Set `MLIP_BLESS=1` to rewrite
//! `tests/golden/snapshots.json` after an intended change.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mlip_core::category_cl::{topic_extract, FeatureForm};
use mlip_core::divergence::DivergenceState;
use mlip_core::encoders::{
    encode_image, encode_text, init_encoder_params, init_projection_params, project_global, random_transform, EncoderConfig, ImageSample,
    TextSample, TransformConfig, TransformDraw,
};
use mlip_core::harness::config::TrainConfig;
use mlip_core::harness::data::generate_dataset;
use mlip_core::knowledge::{build_toy_graph, entity_selection};
use mlip_core::local_ita::cross_modal_attend;
use mlip_core::numerics::Tensor;
use mlip_core::proxy::swap_plan;

const GOLDEN: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden/snapshots.json");
const TOL: f64 = 1e-9;

fn cfg() -> EncoderConfig {
    EncoderConfig { dim: 8, patch_dim: 4, patches: 4, seq_len: 5, vocab: 10, heads: 2, position_encoding: true, ln_eps: 1e-5 }
}

fn fixed_image() -> ImageSample {
    ImageSample { patches: ndarray::Array2::from_shape_fn((4, 4), |(i, j)| 0.1 * i as f64 - 0.05 * j as f64 + 0.02 * (i * j) as f64) }
}

fn flat(m: &ndarray::Array2<f64>) -> Vec<f64> {
    m.iter().copied().collect()
}

fn compute() -> BTreeMap<String, Vec<f64>> {
    let mut out = BTreeMap::new();
    let cfg = cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let enc = init_encoder_params(&cfg, &mut rng);
    let proj = init_projection_params(&cfg, &mut rng);
    let x = fixed_image();
    let y = TextSample { tokens: vec![0, 3, 1, 4, 1] };

    let v = encode_image(&x, &enc, &cfg).unwrap().v;
    let t = encode_text(&y, &enc, &cfg).unwrap().t;
    let (vs, ts) = project_global(&v, &t, &proj, &cfg).unwrap();
    out.insert("encode_image".into(), v);
    out.insert("encode_text".into(), t);
    out.insert("project_global".into(), [vs.clone(), ts.clone()].concat());

    let tc = TransformConfig::default();
    let x_rt = random_transform(&x, &tc, &mut ChaCha8Rng::seed_from_u64(3));
    let replay = TransformDraw::sample(&x, &tc, &mut ChaCha8Rng::seed_from_u64(3)).apply(&x);
    assert_eq!(x_rt, replay);
    out.insert("random_transform".into(), flat(&x_rt.patches));

    let div = DivergenceState::init(&enc);
    let aug = div.augment(&[&x_rt], &[&y], &proj, &cfg).unwrap();
    out.insert("divergence_augment".into(), [flat(&aug.v_aug), flat(&aug.t_aug)].concat());

    let graph = build_toy_graph(4, 3, 0).unwrap();
    out.insert("toy_graph_degrees".into(), (0..graph.num_entities()).map(|e| graph.degree(e) as f64).collect());
    let sel = [entity_selection(&graph, 6), entity_selection(&graph, 2 * graph.num_entities() + 1)].concat();
    out.insert("entity_selection".into(), sel.into_iter().map(|e| e as f64).collect());

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut m = |r, c| Tensor::randn(vec![r, c], 1.0, &mut rng).to_matrix();
    let (feats, know, wq, wk, wv) = (m(3, 8), m(4, 8), m(8, 8), m(8, 8), m(8, 8));
    let (z, attn) = cross_modal_attend(&feats, &know, &wq, &wk, &wv).unwrap();
    out.insert("cross_modal_attend".into(), [flat(&z), flat(&attn)].concat());

    let topic = topic_extract(&vs, &ts, FeatureForm::Sequence { groups: 2 }, 1e-5).unwrap();
    out.insert("topic_extract_sequence".into(), [topic.v_dot, topic.t_dot].concat());

    let plan = swap_plan(8, 0.5, &mut ChaCha8Rng::seed_from_u64(5));
    let mut s: Vec<f64> = plan.partner.iter().map(|&p| p as f64).collect();
    s.extend(plan.mask.iter().map(|&b| b as u8 as f64));
    out.insert("swap_plan".into(), s);

    let tcfg = TrainConfig { patch_noise: 0.0, token_signal: 0.0, samples_per_class: 2, ..Default::default() };
    let data = generate_dataset(&tcfg.dataset_spec()).unwrap();
    let mut reps: Vec<&ImageSample> = Vec::new();
    for c in 0..tcfg.classes {
        reps.push(&data.samples.iter().find(|s| s.label == c).unwrap().image);
    }
    let mut dists = Vec::new();
    for a in 0..reps.len() {
        for b in a + 1..reps.len() {
            dists.push((&reps[a].patches - &reps[b].patches).mapv(|d| d * d).sum().sqrt());
        }
    }
    out.insert("class_template_distances".into(), dists);
    out
}

#[test]
fn golden_snapshots() {
    let got = compute();
    if std::env::var_os("MLIP_BLESS").is_some() {
        std::fs::write(GOLDEN, serde_json::to_string_pretty(&got).unwrap()).unwrap();
        return;
    }
    let text = std::fs::read_to_string(GOLDEN).expect("golden file missing; run with MLIP_BLESS=1");
    let want: BTreeMap<String, Vec<f64>> = serde_json::from_str(&text).unwrap();
    assert_eq!(got.keys().collect::<Vec<_>>(), want.keys().collect::<Vec<_>>());
    for (k, w) in &want {
        let g = &got[k];
        assert_eq!(g.len(), w.len(), "{k}");
        for (i, (a, b)) in g.iter().zip(w).enumerate() {
            assert!((a - b).abs() <= TOL * b.abs().max(1.0), "{k}[{i}]: {a} vs {b}");
        }
    }
}

#[test]
fn snapshots_are_repeatable() {
    assert_eq!(compute(), compute());
}

#[test]
fn template_classes_stay_apart() {
    let d = &compute()["class_template_distances"];
    assert!(d.iter().all(|&x| x > 0.5), "{d:?}");
}
