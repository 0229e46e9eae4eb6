mod common;

use common::{micro_bundle, micro_config, random_aus, random_images};
use defgan_core::autograd::Graph;
use defgan_core::losses::{LossWeights, PooledGrayEmbedder};
use defgan_core::nets::{LayerKind, ModelBundle, ModelConfig, MASK_BIAS_INIT};
use defgan_core::trainer::{critic_losses, generator_losses};

#[test]
fn init_is_deterministic_per_seed() {
    let cfg = micro_config();
    let a = ModelBundle::<f32>::init(&cfg, 5).unwrap();
    let b = ModelBundle::<f32>::init(&cfg, 5).unwrap();
    let c = ModelBundle::<f32>::init(&cfg, 6).unwrap();
    for (x, y) in a.g_tex.params.iter().zip(b.g_tex.params.iter()) {
        assert_eq!(x, y);
    }
    assert!(a.d.params.iter().zip(c.d.params.iter()).any(|(x, y)| x != y));
}

#[test]
fn heads_start_at_identity() {
    let b = ModelBundle::<f32>::init(&micro_config(), 1).unwrap();
    let w = b.g_def.params.get(b.g_def.offset_weight_index());
    assert!(w.iter().all(|&v| v == 0.0));
    let bias = b.g_tex.params.get(b.g_tex.mask_bias_index());
    assert!(bias.iter().all(|&v| v as f64 == MASK_BIAS_INIT));
}

#[test]
fn deformation_generator_swaps_upsampling_tail() {
    let b = ModelBundle::<f32>::init(&ModelConfig::default(), 0).unwrap();
    let def = b.g_def.manifest();
    let tex = b.g_tex.manifest();
    let convs =
        |m: &[defgan_core::nets::LayerEntry]| -> Vec<_> { m.iter().filter(|e| e.kind.is_conv()).cloned().collect() };
    let (dc, tc) = (convs(&def), convs(&tex));
    // texture: ..., up0, up1, color, mask; deformation: ..., up0, up1, offset
    assert_eq!(dc.len() + 1, tc.len());
    let shared = dc.len() - 3;
    // identical trunks; the deformation stem additionally reads the source AU planes
    let trunk = |m: &[defgan_core::nets::LayerEntry]| -> Vec<_> {
        m.iter()
            .take_while(|e| e.name != "up0")
            .map(|e| (e.name.clone(), e.kind.clone(), e.c_out))
            .collect()
    };
    assert_eq!(trunk(&def), trunk(&tex));
    assert!(def.iter().any(|e| matches!(e.kind, LayerKind::Residual { .. })));
    assert_eq!(def[0].c_in, 3 + 2 * 17);
    assert_eq!(tex[0].c_in, 3 + 17);
    for i in 0..2 {
        let (d, t) = (&dc[shared + i], &tc[shared + i]);
        assert!(matches!(t.kind, LayerKind::ConvTranspose { stride: 2, .. }), "{t:?}");
        assert!(matches!(d.kind, LayerKind::UpsampleConv { .. }), "{d:?}");
        assert_eq!((d.c_in, d.c_out), (t.c_in, t.c_out));
    }
    assert_eq!(dc[shared + 2].c_out, 2);
    assert_eq!(tc[shared + 2].c_out, 3);
    assert_eq!(tc[shared + 3].c_out, 1);
    let text = b.manifest_text();
    for section in ["[deformation_generator]", "[texture_generator]", "[critic]"] {
        assert!(text.contains(section));
    }
}

#[test]
fn critic_heads_read_the_last_trunk_layer() {
    let cfg = ModelConfig::default();
    let b = ModelBundle::<f32>::init(&cfg, 0).unwrap();
    let m = b.d.manifest();
    let n = m.len();
    let (critic, au) = (&m[n - 2], &m[n - 1]);
    assert_eq!(critic.name, "critic_head");
    assert_eq!(au.name, "au_head");
    let last_trunk = m
        .iter()
        .rev()
        .find(|e| e.name.starts_with("trunk") && e.kind.is_conv())
        .unwrap();
    assert_eq!(critic.c_in, last_trunk.c_out);
    assert_eq!(au.c_in, last_trunk.c_out);
    assert_eq!((critic.c_out, au.c_out), (1, cfg.n_au));
    let (scores, aus) = b
        .d_forward(&defgan_core::nets::ImageTensor::filled(128, 128, 0.1).unwrap())
        .unwrap();
    assert_eq!(scores.dim(), (2, 2));
    assert_eq!(aus.len(), 17);
}

#[test]
fn every_parameter_receives_gradient() {
    let b = micro_bundle(3);
    let w = LossWeights::default();
    let imgs = random_images::<f64>(2, 8, 1);
    let (x, y) = (random_aus::<f64>(2, 2, 2), random_aus::<f64>(2, 2, 3));

    let g = Graph::new();
    let pd = b.g_def.params.bind(&g, true);
    let pt = b.g_tex.params.bind(&g, true);
    let pc = b.d.params.bind(&g, false);
    let emb = PooledGrayEmbedder { size: 4 };
    let (l, _, _) = generator_losses(&b, &pd, &pt, &pc, g.constant(imgs.clone()), &x, &y, &emb, &w).unwrap();
    let grads = g.backward(l.total());
    for (names, vars) in [(b.g_def.params.names(), &pd), (b.g_tex.params.names(), &pt)] {
        for (name, &v) in names.iter().zip(vars.iter()) {
            let gv = grads.wrt_or_zeros(v);
            assert!(gv.iter().any(|&e| e != 0.0), "no gradient reaches {name}");
            assert!(gv.iter().all(|e| e.is_finite()));
        }
    }
    assert!(
        pc.iter().all(|&v| grads.wrt(v).is_none()),
        "critic is frozen in the generator step"
    );

    let g = Graph::new();
    let pc = b.d.params.bind(&g, true);
    let fake = random_images::<f64>(2, 8, 9);
    let l = critic_losses(&b, &pc, g.constant(imgs), g.constant(fake), &x, &[0.3, 0.7], &w).unwrap();
    let grads = g.backward(l.total());
    for (name, &v) in b.d.params.names().iter().zip(pc.iter()) {
        assert!(
            grads.wrt_or_zeros(v).iter().any(|&e| e != 0.0),
            "no gradient reaches {name}"
        );
    }
}

#[test]
fn edits_respect_the_offset_bound_and_blend() {
    let b = micro_bundle(4);
    let g = Graph::new();
    let pd = b.g_def.params.bind(&g, false);
    let pt = b.g_tex.params.bind(&g, false);
    let e = b
        .edit(
            &pd,
            &pt,
            g.constant(random_images(3, 8, 2)),
            &random_aus(3, 2, 1),
            &random_aus(3, 2, 4),
        )
        .unwrap();
    for i in 0..3 {
        let r = e.result(i, 1.0).unwrap();
        assert!(r.blend_residual() < 1e-6);
        assert!(r.mask.iter().all(|&m| (0.0..=1.0).contains(&m)));
    }
    let bound = defgan_core::warpfield::offset_bound(1.0, 8);
    assert!(e.offsets.value().iter().all(|v| v.abs() <= bound + 1e-12));
}

#[test]
fn mismatched_au_width_is_rejected() {
    let b = micro_bundle(4);
    let g = Graph::new();
    let pd = b.g_def.params.bind(&g, false);
    let pt = b.g_tex.params.bind(&g, false);
    let r = b.edit(
        &pd,
        &pt,
        g.constant(random_images(1, 8, 2)),
        &random_aus(1, 3, 1),
        &random_aus(1, 3, 4),
    );
    assert!(r.is_err());
}
