//! The update branch: identity at initialization, exact shallow gradients,
//! the U2 convolution, and the second-order path through G.

use gradnet::autodiff::Tape;
use gradnet::net::{init_params, loss_on_tape, uniform_label, xcorr, FeatureMap, LabelMap, NetConfig};
use gradnet::params::Params;
use gradnet::update::{
    apply_gradient_update, embed, embed_initial, generate_template, pipeline, shallow_gradient, transform_gradient,
    UpdateMode,
};
use ndarray::{Array3, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Case {
    cfg: NetConfig,
    params: Params,
    shallow: FeatureMap,
    x_feats: Vec<FeatureMap>,
    labels: Vec<LabelMap>,
}

fn label(cfg: &NetConfig, cell: (usize, usize)) -> LabelMap {
    let [h, w] = cfg.geometry().unwrap().score;
    gradnet::data::make_label((h, w), cell, 2.0, gradnet::data::LabelKind::Balanced).unwrap()
}

fn random_u2(p: &mut Params, rng: &mut ChaCha8Rng, scale: f64) {
    for name in ["u2.conv1.weight", "u2.conv1.bias"] {
        p.get_mut(name).unwrap().mapv_inplace(|_| scale * rng.gen_range(-1.0..1.0));
    }
}

/// Desk geometry with random positive features standing in for ReLU
/// outputs.
fn case(seed: u64, k: usize) -> Case {
    let cfg = NetConfig::desk();
    let geo = cfg.geometry().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = init_params(&cfg, &mut rng, true).unwrap();
    let [c, h, w] = geo.shallow;
    let shallow = FeatureMap(Array3::from_shape_fn((c, h, w), |_| rng.gen_range(0.0..1.0)));
    let [c, h, w] = geo.search;
    let x_feats = (0..k)
        .map(|_| FeatureMap(Array3::from_shape_fn((c, h, w), |_| rng.gen_range(0.0..1.0))))
        .collect();
    let labels = (0..k).map(|i| label(&cfg, (3 + i % 3, 4))).collect();
    Case {
        cfg,
        params,
        shallow,
        x_feats,
        labels,
    }
}

fn norm_ratio(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let n = a.iter().map(|x| x * x).sum::<f64>().sqrt() + b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / n.max(1e-300)
}

fn batch_loss(c: &Case, template: &Array3<f64>) -> f64 {
    let t = gradnet::net::Template(template.clone());
    c.x_feats
        .iter()
        .zip(&c.labels)
        .map(|(f, y)| gradnet::net::logistic_loss(&gradnet::net::cross_correlate(&t, f).unwrap(), y).unwrap())
        .sum()
}

#[test]
fn zero_shallow_feature_with_zero_biases_gives_zero_template() {
    let c = case(1, 1);
    let zero = FeatureMap(Array3::zeros(c.shallow.0.raw_dim()));
    let beta = embed_initial(&zero, &c.params, &c.cfg).unwrap();
    assert_eq!(beta.shape(), c.cfg.geometry().unwrap().template);
    assert!(beta.0.iter().all(|v| *v == 0.0));
}

#[test]
fn wrong_shallow_shape_is_a_configuration_error() {
    let c = case(1, 1);
    let bad = FeatureMap(Array3::zeros((5, 11, 11)));
    let err = embed_initial(&bad, &c.params, &c.cfg).unwrap_err();
    assert!(matches!(err, gradnet::Error::Config(_)), "{err}");
}

#[test]
fn embedding_gradient_matches_finite_differences() {
    let c = case(2, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let probe = Array3::from_shape_fn(c.cfg.geometry().unwrap().template, |_| rng.gen_range(-1.0..1.0));
    let functional = |f: &Array3<f64>| {
        let b = embed_initial(&FeatureMap(f.clone()), &c.params, &c.cfg).unwrap();
        (&b.0 * &probe).sum()
    };
    let mut tape = Tape::new();
    let bound = c.params.bind(&mut tape, &|_| false);
    let f = tape.var(c.shallow.0.clone().into_dyn());
    let b = embed(&mut tape, &bound, &c.cfg, "u1", f).unwrap();
    let pv = tape.constant(probe.clone().into_dyn());
    let prod = tape.mul(b, pv).unwrap();
    let s = tape.sum(prod);
    let g = tape.grad(s, &[f]).unwrap()[0];
    let analytic = tape.value(g).clone();
    let (mut a, mut n) = (Vec::new(), Vec::new());
    let h = 1e-5;
    for _ in 0..60 {
        let idx = (rng.gen_range(0..32), rng.gen_range(0..11), rng.gen_range(0..11));
        let (mut p, mut m) = (c.shallow.0.clone(), c.shallow.0.clone());
        p[idx] += h;
        m[idx] -= h;
        n.push((functional(&p) - functional(&m)) / (2.0 * h));
        a.push(analytic[[idx.0, idx.1, idx.2]]);
    }
    assert!(norm_ratio(&a, &n) < 1e-4, "{}", norm_ratio(&a, &n));
}

#[test]
fn shallow_gradient_matches_finite_differences() {
    let c = case(4, 3);
    let g = shallow_gradient(&c.shallow, &c.params, &c.cfg, &c.x_feats, &c.labels).unwrap();
    let loss = |f: &Array3<f64>| {
        let b = embed_initial(&FeatureMap(f.clone()), &c.params, &c.cfg).unwrap();
        batch_loss(&c, &b.0)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut a, mut n) = (Vec::new(), Vec::new());
    let h = 1e-5;
    for _ in 0..60 {
        let idx = (rng.gen_range(0..32), rng.gen_range(0..11), rng.gen_range(0..11));
        let (mut p, mut m) = (c.shallow.0.clone(), c.shallow.0.clone());
        p[idx] += h;
        m[idx] -= h;
        n.push((loss(&p) - loss(&m)) / (2.0 * h));
        a.push(g.0[idx]);
    }
    assert!(norm_ratio(&a, &n) < 1e-4, "{}", norm_ratio(&a, &n));
}

#[test]
fn doubling_label_weights_doubles_the_gradient() {
    let c = case(6, 2);
    let g1 = shallow_gradient(&c.shallow, &c.params, &c.cfg, &c.x_feats, &c.labels).unwrap();
    let doubled: Vec<LabelMap> = c.labels.iter().map(|l| l.scaled(2.0)).collect();
    let g2 = shallow_gradient(&c.shallow, &c.params, &c.cfg, &c.x_feats, &doubled).unwrap();
    for (a, b) in g1.0.iter().zip(g2.0.iter()) {
        assert!((2.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
    }
}

#[test]
fn saturated_scores_give_vanishing_gradient() {
    // Scale the head so every score is far beyond the clamp, with labels
    // that agree with the sign of each score.
    let mut c = case(7, 1);
    c.params.get_mut("u1.conv5.weight").unwrap().mapv_inplace(|v| v * 1e6);
    let beta = embed_initial(&c.shallow, &c.params, &c.cfg).unwrap();
    let s = gradnet::net::cross_correlate(&beta, &c.x_feats[0]).unwrap();
    assert!(s.0.iter().all(|v| v.abs() > 60.0), "scores not saturated");
    let signs = s.0.mapv(|v| v.signum());
    let y = uniform_label(signs);
    let g = shallow_gradient(&c.shallow, &c.params, &c.cfg, &c.x_feats, &[y]).unwrap();
    assert!(g.0.iter().all(|v| v.abs() <= 1e-8));
}

#[test]
fn zero_last_u2_layer_is_the_identity_update() {
    let c = case(8, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let g = FeatureMap(Array3::from_shape_fn(c.shallow.0.raw_dim(), |_| rng.gen_range(-1.0..1.0)));
    let h = apply_gradient_update(&c.shallow, &g, &c.params, &c.cfg).unwrap();
    assert_eq!(h, c.shallow);
    let r = generate_template(&c.shallow, &c.x_feats, &c.labels, &c.params, &c.cfg, UpdateMode::Gradient { share_u1: true }).unwrap();
    assert_eq!(r.optimal_template, r.initial_template);
    assert_eq!(r.final_scores, r.initial_scores);
    assert_eq!(r.final_loss, r.initial_loss);
}

#[test]
fn zero_gradient_with_zero_biases_leaves_feature_unchanged() {
    let mut c = case(10, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    random_u2(&mut c.params, &mut rng, 0.1);
    c.params.get_mut("u2.conv1.bias").unwrap().fill(0.0);
    let zero = FeatureMap(Array3::zeros(c.shallow.0.raw_dim()));
    assert_eq!(apply_gradient_update(&c.shallow, &zero, &c.params, &c.cfg).unwrap(), c.shallow);
}

#[test]
fn update_equals_padded_convolution_oracle() {
    let mut c = case(11, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    random_u2(&mut c.params, &mut rng, 0.1);
    let g = Array3::from_shape_fn(c.shallow.0.raw_dim(), |_| rng.gen_range(-1.0..1.0));
    let h = apply_gradient_update(&c.shallow, &FeatureMap(g.clone()), &c.params, &c.cfg).unwrap();
    let w = c.params.get("u2.conv1.weight").unwrap();
    let b = c.params.get("u2.conv1.bias").unwrap();
    let gain = c.cfg.gradient_gain;
    assert!(!c.cfg.normalize_gradient);
    let (ch, hh, ww) = g.dim();
    let mut worst = 0.0f64;
    for o in 0..ch {
        for i in 0..hh {
            for j in 0..ww {
                let mut acc = b[[o]];
                for ic in 0..ch {
                    for u in 0..3 {
                        for v in 0..3 {
                            let (y, x) = (i as isize + u as isize - 1, j as isize + v as isize - 1);
                            if y >= 0 && x >= 0 && (y as usize) < hh && (x as usize) < ww {
                                acc += w[[o, ic, u, v]] * gain * g[[ic, y as usize, x as usize]];
                            }
                        }
                    }
                }
                worst = worst.max((h.0[[o, i, j]] - c.shallow.0[[o, i, j]] - acc).abs());
            }
        }
    }
    assert!(worst < 1e-6, "{worst}");
}

#[test]
fn mismatched_gradient_shape_is_rejected() {
    let c = case(12, 1);
    let bad = FeatureMap(Array3::zeros((32, 10, 11)));
    assert!(apply_gradient_update(&c.shallow, &bad, &c.params, &c.cfg).is_err());
}

#[test]
fn singleton_batch_matches_single_pair_path() {
    let mut c = case(13, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    random_u2(&mut c.params, &mut rng, 0.05);
    let mode = UpdateMode::Gradient { share_u1: true };
    let r = generate_template(&c.shallow, &c.x_feats, &c.labels, &c.params, &c.cfg, mode).unwrap();
    // The same chain assembled from the single-step functions.
    let g = shallow_gradient(&c.shallow, &c.params, &c.cfg, &c.x_feats, &c.labels).unwrap();
    let h = apply_gradient_update(&c.shallow, &g, &c.params, &c.cfg).unwrap();
    let beta_star = embed_initial(&h, &c.params, &c.cfg).unwrap();
    assert_eq!(r.shallow_gradient, g);
    assert_eq!(r.updated_feature, h);
    assert_eq!(r.optimal_template, beta_star);
    let again = generate_template(&c.shallow, &c.x_feats, &c.labels, &c.params, &c.cfg, mode).unwrap();
    assert_eq!(r, again);
}

#[test]
fn disabled_update_returns_initial_template() {
    let mut c = case(14, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    random_u2(&mut c.params, &mut rng, 0.05);
    let r = generate_template(&c.shallow, &c.x_feats, &c.labels, &c.params, &c.cfg, UpdateMode::Disabled).unwrap();
    assert_eq!(r.optimal_template, embed_initial(&c.shallow, &c.params, &c.cfg).unwrap());
    assert_eq!(r.final_loss, r.initial_loss);
}

#[test]
fn unshared_heads_match_shared_when_identical() {
    let mut c = case(15, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    random_u2(&mut c.params, &mut rng, 0.05);
    let shared = generate_template(&c.shallow, &c.x_feats, &c.labels, &c.params, &c.cfg, UpdateMode::Gradient { share_u1: true }).unwrap();
    let two = generate_template(&c.shallow, &c.x_feats, &c.labels, &c.params, &c.cfg, UpdateMode::Gradient { share_u1: false }).unwrap();
    assert_eq!(shared, two);
    // Perturbing only the second head changes only the final template.
    c.params.get_mut("u1_star.conv5.weight").unwrap().mapv_inplace(|v| v * 1.5);
    let two = generate_template(&c.shallow, &c.x_feats, &c.labels, &c.params, &c.cfg, UpdateMode::Gradient { share_u1: false }).unwrap();
    assert_eq!(two.initial_template, shared.initial_template);
    assert_ne!(two.optimal_template, shared.optimal_template);
}

/// d L* / d alpha_1, optionally treating G as a constant.
fn head_gradient(c: &Case, detach_g: bool) -> Vec<f64> {
    let mut tape = Tape::new();
    let bound = c.params.bind(&mut tape, &|n| n.starts_with("u1."));
    let f = tape.var(c.shallow.0.clone().into_dyn());
    let xs: Vec<_> = c.x_feats.iter().map(|x| tape.constant(x.0.clone().into_dyn())).collect();
    let beta = embed(&mut tape, &bound, &c.cfg, "u1", f).unwrap();
    let mut l = None;
    for (x, y) in xs.iter().zip(&c.labels) {
        let s = xcorr(&mut tape, beta, *x).unwrap();
        let li = loss_on_tape(&mut tape, s, y).unwrap();
        l = Some(match l {
            None => li,
            Some(t) => tape.add(t, li).unwrap(),
        });
    }
    let mut g = tape.grad(l.unwrap(), &[f]).unwrap()[0];
    if detach_g {
        g = tape.detach(g);
    }
    let d = transform_gradient(&mut tape, &bound, &c.cfg, g).unwrap();
    let h = tape.add(f, d).unwrap();
    let bs = embed(&mut tape, &bound, &c.cfg, "u1", h).unwrap();
    let mut ls = None;
    for (x, y) in xs.iter().zip(&c.labels) {
        let s = xcorr(&mut tape, bs, *x).unwrap();
        let li = loss_on_tape(&mut tape, s, y).unwrap();
        ls = Some(match ls {
            None => li,
            Some(t) => tape.add(t, li).unwrap(),
        });
    }
    let ls = ls.unwrap();
    let heads = bound.trainable(&tape);
    let vars: Vec<_> = heads.iter().map(|(_, v)| *v).collect();
    let grads = tape.grad(ls, &vars).unwrap();
    grads.iter().flat_map(|g| tape.value(*g).iter().copied().collect::<Vec<_>>()).collect()
}

#[test]
fn second_order_terms_change_the_head_gradient() {
    let mut c = case(16, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    random_u2(&mut c.params, &mut rng, 0.5);
    let full = head_gradient(&c, false);
    let first = head_gradient(&c, true);
    let max_diff = full.iter().zip(&first).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    assert!(max_diff > 1e-6, "{max_diff}");
    // The full gradient is the true derivative of L*.
    let mode = UpdateMode::Gradient { share_u1: true };
    let lstar = |p: &Params| generate_template(&c.shallow, &c.x_feats, &c.labels, p, &c.cfg, mode).unwrap().final_loss;
    let names: Vec<String> = c.params.names().filter(|n| n.starts_with("u1.")).map(String::from).collect();
    let mut offsets = Vec::new();
    let mut off = 0;
    for n in &names {
        offsets.push(off);
        off += c.params.get(n).unwrap().len();
    }
    let (mut a, mut num) = (Vec::new(), Vec::new());
    let h = 1e-5;
    for _ in 0..30 {
        let which = rng.gen_range(0..names.len());
        let len = c.params.get(&names[which]).unwrap().len();
        let i = rng.gen_range(0..len);
        let bump = |delta: f64| {
            let mut p = c.params.clone();
            let arr: &mut ArrayD<f64> = p.get_mut(&names[which]).unwrap();
            arr.as_slice_mut().unwrap()[i] += delta;
            lstar(&p)
        };
        num.push((bump(h) - bump(-h)) / (2.0 * h));
        a.push(full[offsets[which] + i]);
    }
    assert!(norm_ratio(&a, &num) < 1e-4, "{}", norm_ratio(&a, &num));
}

#[test]
fn pipeline_rejects_mismatched_lists() {
    let c = case(17, 2);
    let mut tape = Tape::new();
    let bound = c.params.bind(&mut tape, &|_| false);
    let f = tape.var(c.shallow.0.clone().into_dyn());
    let x = tape.constant(c.x_feats[0].0.clone().into_dyn());
    let r = pipeline(&mut tape, &bound, &c.cfg, UpdateMode::Gradient { share_u1: true }, f, &[x], &c.labels);
    assert!(r.is_err());
}

/// Analytic d L* / d (U1, U2) through `pipeline` against central
/// differences, at random U2 weights.
fn check_branch_gradient(mut c: Case, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_u2(&mut c.params, &mut rng, 0.05);
    let mode = UpdateMode::Gradient { share_u1: true };
    let trainable = |n: &str| n.starts_with("u1.") || n.starts_with("u2.");
    let mut tape = Tape::new();
    let bound = c.params.bind(&mut tape, &trainable);
    let f = tape.constant(c.shallow.0.clone().into_dyn());
    let xs: Vec<_> = c.x_feats.iter().map(|x| tape.constant(x.0.clone().into_dyn())).collect();
    let p = pipeline(&mut tape, &bound, &c.cfg, mode, f, &xs, &c.labels).unwrap();
    let vars = bound.trainable(&tape);
    let grads = tape.grad(p.final_loss, &vars.iter().map(|(_, v)| *v).collect::<Vec<_>>()).unwrap();
    let lstar = |p: &Params| generate_template(&c.shallow, &c.x_feats, &c.labels, p, &c.cfg, mode).unwrap().final_loss;
    let (mut a, mut num) = (Vec::new(), Vec::new());
    let h = 1e-5;
    for _ in 0..40 {
        let which = rng.gen_range(0..vars.len());
        let name = &vars[which].0;
        let g = tape.value(grads[which]);
        let i = rng.gen_range(0..g.len());
        let bump = |delta: f64| {
            let mut q = c.params.clone();
            q.get_mut(name).unwrap().as_slice_mut().unwrap()[i] += delta;
            lstar(&q)
        };
        num.push((bump(h) - bump(-h)) / (2.0 * h));
        a.push(g.as_slice().unwrap()[i]);
    }
    assert!(norm_ratio(&a, &num) < 1e-4, "{}", norm_ratio(&a, &num));
}

#[test]
fn branch_gradient_matches_finite_differences_with_gain() {
    let mut c = case(21, 3);
    c.cfg.gradient_gain = 20.0;
    check_branch_gradient(c, 21);
}

#[test]
fn branch_gradient_matches_finite_differences_with_standardized_input() {
    let mut c = case(22, 3);
    c.cfg.normalize_gradient = true;
    check_branch_gradient(c, 22);
}
