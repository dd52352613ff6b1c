use aumer_core::encoder::{
    emotion_head, encode_video, init_params, project_text, project_vis, transformer_head, Bound,
    EncoderConfig, HeadKind, Params,
};
use aumer_core::numerics::{grad_check, Tape, Tensor, DEFAULT_STEP};
use aumer_core::rngs;
use aumer_core::Error;
use rand::Rng as _;

fn tiny() -> EncoderConfig {
    EncoderConfig {
        height: 8,
        width: 8,
        frames: 4,
        patch: 4,
        temporal_stride: 2,
        d1: 8,
        heads: 2,
        local_blocks: 1,
        global_blocks: 1,
        d2: 6,
        d_text: 5,
        head_hidden: 8,
        head_heads: 2,
        head_blocks: 2,
        num_classes: 3,
        ..EncoderConfig::default()
    }
}

fn clip(seed: u64, cfg: &EncoderConfig) -> Tensor {
    let mut rng = rngs::stream(seed, "clip", 0);
    let n = cfg.frames * cfg.height * cfg.width * cfg.channels;
    Tensor::new(
        vec![cfg.frames, cfg.height, cfg.width, cfg.channels],
        (0..n).map(|_| rng.random::<f64>()).collect(),
    )
    .unwrap()
}

fn rand_tensor(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = rngs::stream(seed, "t", 0);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

#[test]
fn token_counts_follow_the_configuration() {
    let d = EncoderConfig::default();
    assert_eq!(d.tokens(), 128);
    let big = EncoderConfig {
        height: 224,
        width: 224,
        ..EncoderConfig::default()
    };
    assert_eq!(big.tokens(), 1568);

    let params = init_params(&d, 0).unwrap();
    let mut tape = Tape::new();
    let p = Bound::new(&mut tape, &params, false);
    let f = encode_video(&mut tape, &p, &d, &clip(0, &d)).unwrap();
    assert_eq!(tape.shape(f.z), [129, 64]);
}

#[test]
fn fused_feature_is_a_convex_combination() {
    let cfg = tiny();
    let mut params = init_params(&cfg, 1).unwrap();
    for a in [0.0, 2.5, -7.0, 30.0] {
        params.insert("alpha_raw".into(), Tensor::full(&[1, 1], a));
        let mut tape = Tape::new();
        let p = Bound::new(&mut tape, &params, false);
        let f = encode_video(&mut tape, &p, &cfg, &clip(1, &cfg)).unwrap();
        let alpha = tape.value(f.alpha).data()[0];
        assert!(alpha > 0.0 && alpha < 1.0 || a.abs() > 20.0);
        let (u, g, c) = (
            tape.value(f.u).data(),
            tape.value(f.f_global).data(),
            tape.value(f.f_c).data(),
        );
        for i in 0..u.len() {
            assert!((u[i] - (alpha * g[i] + (1.0 - alpha) * c[i])).abs() < 1e-12);
        }
        if a == 0.0 {
            for i in 0..u.len() {
                assert!((u[i] - (g[i] + c[i]) / 2.0).abs() < 1e-12);
            }
        }
        let z = tape.value(f.z);
        assert_eq!(&z.data()[..cfg.d1], u);
        assert_eq!(&z.data()[cfg.d1..], tape.value(f.f_local).data());
    }
}

#[test]
fn forward_pass_is_deterministic() {
    let cfg = tiny();
    let params = init_params(&cfg, 2).unwrap();
    let a = aumer_core::encoder::infer(&params, &cfg, &clip(2, &cfg)).unwrap();
    let b = aumer_core::encoder::infer(&params, &cfg, &clip(2, &cfg)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.1.shape(), [1, 3]);
    assert_eq!(init_params(&cfg, 2).unwrap(), params);
}

fn with_zero_bias(params: &Params, name: &str) -> Params {
    let mut p = params.clone();
    let b = p[&format!("{name}.b")].shape().to_vec();
    p.insert(format!("{name}.b"), Tensor::zeros(&b));
    p
}

#[test]
fn projections_are_affine() {
    let cfg = tiny();
    let mut params = init_params(&cfg, 3).unwrap();
    params.insert("proj.vis.b".into(), rand_tensor(30, &[1, cfg.d2]));
    let mut tape = Tape::new();
    let p = Bound::new(&mut tape, &params, false);
    let u = tape.constant(rand_tensor(31, &[1, cfg.d1]));
    let u2 = tape.scale(u, 2.0);
    let a = project_vis(&mut tape, &p, u).unwrap();
    let b = project_vis(&mut tape, &p, u2).unwrap();
    let bias = params["proj.vis.b"].data();
    for i in 0..cfg.d2 {
        let lhs = tape.value(b).data()[i] - 2.0 * tape.value(a).data()[i];
        assert!((lhs + bias[i]).abs() < 1e-12);
    }

    for name in ["proj.vis", "proj.text"] {
        let zeroed = with_zero_bias(&params, name);
        let mut tape = Tape::new();
        let p = Bound::new(&mut tape, &zeroed, false);
        let width = if name == "proj.vis" {
            cfg.d1
        } else {
            cfg.d_text
        };
        let z = tape.constant(Tensor::zeros(&[1, width]));
        let out = if name == "proj.vis" {
            project_vis(&mut tape, &p, z)
        } else {
            project_text(&mut tape, &p, z)
        }
        .unwrap();
        assert!(tape.value(out).data().iter().all(|&x| x == 0.0));
    }

    let mut tape = Tape::new();
    let p = Bound::new(&mut tape, &params, false);
    let e = tape.constant(rand_tensor(32, &[2, cfg.d_text]));
    let e_dup = tape.constant(rand_tensor(32, &[2, cfg.d_text]));
    let x = project_text(&mut tape, &p, e).unwrap();
    let y = project_text(&mut tape, &p, e_dup).unwrap();
    assert_eq!(tape.value(x), tape.value(y));
}

#[test]
fn projection_gradients_match_finite_differences() {
    let cfg = tiny();
    let params = init_params(&cfg, 4).unwrap();
    for (name, width) in [("proj.vis", cfg.d1), ("proj.text", cfg.d_text)] {
        let w = rand_tensor(40, &[1, cfg.d2]);
        let err = grad_check(
            |t, x| {
                let p = Bound::new(t, &params, false);
                let y = if name == "proj.vis" {
                    project_vis(t, &p, x)
                } else {
                    project_text(t, &p, x)
                }?;
                let wc = t.constant(w.clone());
                let m = t.mul(y, wc)?;
                Ok(t.sum(m))
            },
            &rand_tensor(41, &[1, width]),
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err <= 1e-6, "{name}: {err:e}");
    }
}

#[test]
fn head_is_sensitive_to_token_order() {
    let cfg = tiny();
    let params = init_params(&cfg, 5).unwrap();
    let l = cfg.tokens();
    let z = rand_tensor(50, &[l + 1, cfg.d1]);
    let d = cfg.d1;
    let mut swapped = z.clone();
    for k in 0..d {
        swapped.data_mut().swap(d + k, l * d + k);
    }
    let mut tape = Tape::new();
    let p = Bound::new(&mut tape, &params, false);
    let a = tape.constant(z);
    let b = tape.constant(swapped);
    let sa = transformer_head(&mut tape, &p, &cfg, a).unwrap();
    let sb = transformer_head(&mut tape, &p, &cfg, b).unwrap();
    assert_eq!(tape.shape(sa), [1, cfg.num_classes]);
    assert_ne!(tape.value(sa), tape.value(sb));
}

#[test]
fn head_gradient_matches_finite_differences() {
    let cfg = tiny();
    let params = init_params(&cfg, 6).unwrap();
    let w = rand_tensor(60, &[1, cfg.num_classes]);
    let err = grad_check(
        |t, z| {
            let p = Bound::new(t, &params, false);
            let s = transformer_head(t, &p, &cfg, z)?;
            let wc = t.constant(w.clone());
            let m = t.mul(s, wc)?;
            Ok(t.sum(m))
        },
        &rand_tensor(61, &[cfg.tokens() + 1, cfg.d1]),
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err:e}");
}

#[test]
fn every_trainable_parameter_receives_a_gradient() {
    for head in [HeadKind::Transformer, HeadKind::Linear] {
        let cfg = EncoderConfig { head, ..tiny() };
        let params = init_params(&cfg, 7).unwrap();
        let mut tape = Tape::new();
        let p = Bound::new(&mut tape, &params, true);
        let f = encode_video(&mut tape, &p, &cfg, &clip(7, &cfg)).unwrap();
        let s = emotion_head(&mut tape, &p, &cfg, &f).unwrap();
        let xv = project_vis(&mut tape, &p, f.u).unwrap();
        let e = tape.constant(rand_tensor(70, &[1, cfg.d_text]));
        let xt = project_text(&mut tape, &p, e).unwrap();
        let a = tape.sum(s);
        let b = tape.mul(xv, xt).unwrap();
        let b = tape.sum(b);
        let total = tape.add(a, b).unwrap();
        tape.backward(total).unwrap();
        let grads = p.grads(&tape);
        for name in params.keys() {
            assert!(grads.contains_key(name), "{head:?}: {name} has no gradient");
        }
    }
}

#[test]
fn mismatched_inputs_are_dimension_errors() {
    let cfg = tiny();
    let params = init_params(&cfg, 8).unwrap();
    let mut tape = Tape::new();
    let p = Bound::new(&mut tape, &params, false);
    let wrong = Tensor::zeros(&[cfg.frames, 12, 8, 1]);
    assert!(matches!(
        encode_video(&mut tape, &p, &cfg, &wrong),
        Err(Error::Dimension { .. })
    ));
    let z = tape.constant(Tensor::zeros(&[3, cfg.d1]));
    assert!(matches!(
        transformer_head(&mut tape, &p, &cfg, z),
        Err(Error::Dimension { .. })
    ));
    assert!(EncoderConfig { patch: 3, ..tiny() }.validate().is_err());
    assert!(EncoderConfig { heads: 3, ..tiny() }.validate().is_err());
}
