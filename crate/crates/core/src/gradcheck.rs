//! Finite-difference verification of the analytic gradients: the matching
//! loss through cross-correlation, the U1 embedding, and the full
//! two-pass template generation including its second-order terms.
//!
//! Each check compares sampled coordinates of the analytic gradient `a`
//! with central differences `n` and reports `|a - n| / (|a| + |n|)` over the
//! sample (Euclidean norms). Coordinates whose `±h` stencil changes any
//! ReLU or clamp side are resampled.

use ndarray::{Array3, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{make_label, LabelKind};
use crate::error::Result;
use crate::net::{init_params, loss_on_tape, xcorr, FeatureMap, LabelMap, NetConfig};
use crate::params::Params;
use crate::update::{embed, pipeline, transform_gradient, UpdateMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    /// Negates every analytic gradient before comparison.
    SignFlip,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub instances: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates sampled per tensor and instance.
    pub samples: usize,
    /// Search regions per instance.
    pub regions: usize,
    pub seed: u64,
    pub fault: Option<Fault>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            instances: 20,
            step: 1e-4,
            tolerance: 1e-4,
            samples: 6,
            regions: 2,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    /// Largest per-instance relative error.
    pub max_rel_error: f64,
    pub instances: usize,
    pub coordinates: usize,
    /// Coordinates rejected because their stencil crossed a kink.
    pub skipped: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub checks: Vec<CheckResult>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }
}

pub fn norm_ratio(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let d = norm(&mut a.iter().zip(n).map(|(x, y)| x - y));
    let s = norm(&mut a.iter().copied()) + norm(&mut n.iter().copied());
    if s == 0.0 {
        0.0
    } else {
        d / s
    }
}

/// A random desk-scale problem: parameters with a live U2, positive
/// shallow and search features standing in for ReLU outputs, and labels
/// at random cells.
#[derive(Clone, Debug)]
pub struct Instance {
    pub params: Params,
    pub shallow: FeatureMap,
    pub search: Vec<FeatureMap>,
    pub labels: Vec<LabelMap>,
}

pub fn random_instance(net: &NetConfig, regions: usize, seed: u64) -> Result<Instance> {
    let geo = net.geometry()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = init_params(net, &mut rng, false)?;
    let scale = 0.5 / net.gradient_gain.abs().max(1e-12);
    for d in 0..net.u2_depth {
        for part in ["weight", "bias"] {
            params
                .get_mut(&format!("u2.conv{}.{part}", d + 1))?
                .mapv_inplace(|_| scale * rng.gen_range(-1.0..1.0));
        }
    }
    let positive = |rng: &mut ChaCha8Rng, [c, h, w]: [usize; 3]| FeatureMap(Array3::from_shape_fn((c, h, w), |_| rng.gen_range(0.0..1.0)));
    let shallow = positive(&mut rng, geo.shallow);
    let search = (0..regions).map(|_| positive(&mut rng, geo.search)).collect();
    let [sh, sw] = geo.score;
    let labels = (0..regions)
        .map(|_| make_label((sh, sw), (rng.gen_range(0..sh), rng.gen_range(0..sw)), 2.0, LabelKind::Balanced))
        .collect::<Result<Vec<_>>>()?;
    Ok(Instance {
        params,
        shallow,
        search,
        labels,
    })
}

/// Flat index samples of a tensor with `len` entries.
fn sample_indices(rng: &mut ChaCha8Rng, len: usize, k: usize) -> Vec<usize> {
    (0..k.min(len)).map(|_| rng.gen_range(0..len)).collect()
}

fn central<F: FnMut(f64) -> Result<f64>>(mut f: F, h: f64) -> Result<f64> {
    Ok((f(h)? - f(-h)?) / (2.0 * h))
}

struct Accumulator {
    name: &'static str,
    worst: f64,
    instances: usize,
    coordinates: usize,
    skipped: usize,
}

impl Accumulator {
    fn new(name: &'static str) -> Self {
        Accumulator {
            name,
            worst: 0.0,
            instances: 0,
            coordinates: 0,
            skipped: 0,
        }
    }

    fn add(&mut self, analytic: &[f64], numeric: &[f64], fault: Option<Fault>, skipped: usize) {
        let a: Vec<f64> = match fault {
            Some(Fault::SignFlip) => analytic.iter().map(|v| -v).collect(),
            None => analytic.to_vec(),
        };
        self.worst = self.worst.max(norm_ratio(&a, numeric));
        self.instances += 1;
        self.coordinates += a.len();
        self.skipped += skipped;
    }

    fn finish(self, tol: f64) -> CheckResult {
        CheckResult {
            name: self.name.to_string(),
            max_rel_error: self.worst,
            instances: self.instances,
            coordinates: self.coordinates,
            skipped: self.skipped,
            passed: self.worst < tol,
        }
    }
}

fn bump(a: &ArrayD<f64>, i: usize, d: f64) -> ArrayD<f64> {
    let mut b = a.clone();
    b.as_slice_mut().expect("standard layout")[i] += d;
    b
}

/// Loss of `template` cross-correlated with each search feature.
fn matching_loss(template: &ArrayD<f64>, search: &[FeatureMap], labels: &[LabelMap]) -> Result<f64> {
    let mut tape = Tape::new();
    let t = tape.constant(template.clone());
    let mut total = 0.0;
    for (f, y) in search.iter().zip(labels) {
        let fv = tape.constant(f.0.clone().into_dyn());
        let s = xcorr(&mut tape, t, fv)?;
        let l = loss_on_tape(&mut tape, s, y)?;
        total += tape.scalar(l);
    }
    Ok(total)
}

fn check_matching(inst: &Instance, net: &NetConfig, cfg: &GradcheckConfig, rng: &mut ChaCha8Rng, wrt_t: &mut Accumulator, wrt_f: &mut Accumulator) -> Result<()> {
    let geo = net.geometry()?;
    let [c, h, w] = geo.template;
    let template: ArrayD<f64> = Array3::from_shape_fn((c, h, w), |_| rng.gen_range(-0.05..0.05)).into_dyn();
    let mut tape = Tape::new();
    let t = tape.var(template.clone());
    let f = tape.var(inst.search[0].0.clone().into_dyn());
    let s = xcorr(&mut tape, t, f)?;
    let l = loss_on_tape(&mut tape, s, &inst.labels[0])?;
    let g = tape.grad(l, &[t, f])?;
    let (gt, gf) = (tape.value(g[0]).clone(), tape.value(g[1]).clone());
    let one = &inst.labels[..1];

    let idx = sample_indices(rng, template.len(), cfg.samples * 4);
    let mut num = Vec::with_capacity(idx.len());
    for &i in &idx {
        num.push(central(|d| matching_loss(&bump(&template, i, d), &inst.search[..1], one), cfg.step)?);
    }
    let ana: Vec<f64> = idx.iter().map(|&i| gt.as_slice().expect("layout")[i]).collect();
    wrt_t.add(&ana, &num, cfg.fault, 0);

    let feat = inst.search[0].0.clone().into_dyn();
    let idx = sample_indices(rng, feat.len(), cfg.samples * 4);
    let mut num = Vec::with_capacity(idx.len());
    for &i in &idx {
        num.push(central(
            |d| {
                let fb = FeatureMap(bump(&feat, i, d).into_dimensionality().expect("3-d"));
                matching_loss(&template, std::slice::from_ref(&fb), one)
            },
            cfg.step,
        )?);
    }
    let ana: Vec<f64> = idx.iter().map(|&i| gf.as_slice().expect("layout")[i]).collect();
    wrt_f.add(&ana, &num, cfg.fault, 0);
    Ok(())
}

/// Gradients of `L` and `L*` with respect to f2 and every head tensor.
struct PipelineGrads {
    initial_wrt_shallow: ArrayD<f64>,
    final_wrt_shallow: ArrayD<f64>,
    initial_wrt: Vec<(String, ArrayD<f64>)>,
    final_wrt: Vec<(String, ArrayD<f64>)>,
}

fn pipeline_grads(inst: &Instance, net: &NetConfig, mode: UpdateMode) -> Result<PipelineGrads> {
    let mut tape = Tape::new();
    let bound = inst.params.bind(&mut tape, &|n: &str| n.starts_with("u1") || n.starts_with("u2."));
    let f = tape.var(inst.shallow.0.clone().into_dyn());
    let xs: Vec<_> = inst.search.iter().map(|x| tape.constant(x.0.clone().into_dyn())).collect();
    let p = pipeline(&mut tape, &bound, net, mode, f, &xs, &inst.labels)?;
    let heads = bound.trainable(&tape);
    let mut wrt: Vec<_> = heads.iter().map(|(_, v)| *v).collect();
    wrt.push(f);
    let gi = tape.grad(p.initial_loss, &wrt)?;
    let gf = tape.grad(p.final_loss, &wrt)?;
    let n = heads.len();
    let named = |g: &[crate::autodiff::Var]| -> Vec<(String, ArrayD<f64>)> {
        heads
            .iter()
            .zip(g)
            .map(|((name, _), v)| (name.clone(), tape.value(*v).clone()))
            .collect()
    };
    Ok(PipelineGrads {
        initial_wrt_shallow: tape.value(gi[n]).clone(),
        final_wrt_shallow: tape.value(gf[n]).clone(),
        initial_wrt: named(&gi[..n]),
        final_wrt: named(&gf[..n]),
    })
}

/// `(L, L*)` and the activation pattern of the evaluation.
fn losses(inst: &Instance, params: &Params, shallow: &FeatureMap, net: &NetConfig, mode: UpdateMode) -> Result<(f64, f64, Vec<bool>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, &|_: &str| false);
    let f = tape.var(shallow.0.clone().into_dyn());
    let xs: Vec<_> = inst.search.iter().map(|x| tape.constant(x.0.clone().into_dyn())).collect();
    let p = pipeline(&mut tape, &bound, net, mode, f, &xs, &inst.labels)?;
    Ok((tape.scalar(p.initial_loss), tape.scalar(p.final_loss), tape.activation_pattern()))
}

/// Central differences of `(L, L*)` for a perturbation `at(d)`, or `None`
/// when the stencil crosses a ReLU or clamp kink and the difference
/// quotient does not estimate the derivative.
fn smooth_central(
    inst: &Instance,
    net: &NetConfig,
    mode: UpdateMode,
    base: &[bool],
    h: f64,
    at: impl Fn(f64) -> Result<(Params, FeatureMap)>,
) -> Result<Option<(f64, f64)>> {
    let (pp, fp) = at(h)?;
    let (lp, lsp, pat_p) = losses(inst, &pp, &fp, net, mode)?;
    if pat_p != base {
        return Ok(None);
    }
    let (pm, fm) = at(-h)?;
    let (lm, lsm, pat_m) = losses(inst, &pm, &fm, net, mode)?;
    if pat_m != base {
        return Ok(None);
    }
    Ok(Some(((lp - lm) / (2.0 * h), (lsp - lsm) / (2.0 * h))))
}

struct BranchAccumulators {
    embed_shallow: Accumulator,
    embed_head: Accumulator,
    final_shallow: Accumulator,
    final_head: Accumulator,
    final_u2: Accumulator,
}

/// Draws up to `want` kink-free coordinates from `len`, giving up after
/// `4 * want` attempts.
fn smooth_samples(
    rng: &mut ChaCha8Rng,
    len: usize,
    want: usize,
    skipped: &mut usize,
    mut eval: impl FnMut(usize) -> Result<Option<(f64, f64)>>,
) -> Result<Vec<(usize, f64, f64)>> {
    let mut out = Vec::with_capacity(want);
    for _ in 0..4 * want {
        if out.len() == want {
            break;
        }
        let i = rng.gen_range(0..len);
        match eval(i)? {
            Some((di, df)) => out.push((i, di, df)),
            None => *skipped += 1,
        }
    }
    Ok(out)
}

fn check_branch(inst: &Instance, net: &NetConfig, cfg: &GradcheckConfig, rng: &mut ChaCha8Rng, acc: &mut BranchAccumulators) -> Result<()> {
    let mode = UpdateMode::Gradient { share_u1: true };
    let g = pipeline_grads(inst, net, mode)?;
    let h = cfg.step;
    let (_, _, base) = losses(inst, &inst.params, &inst.shallow, net, mode)?;

    let f2 = inst.shallow.0.clone().into_dyn();
    let at = |i: usize| {
        let f2 = &f2;
        move |d: f64| Ok((inst.params.clone(), FeatureMap(bump(f2, i, d).into_dimensionality().expect("3-d"))))
    };
    let mut skipped = 0;
    let got = smooth_samples(rng, f2.len(), cfg.samples * 4, &mut skipped, |i| smooth_central(inst, net, mode, &base, h, at(i)))?;
    let pick = |a: &ArrayD<f64>| got.iter().map(|(i, _, _)| a.as_slice().expect("layout")[*i]).collect::<Vec<_>>();
    let ni: Vec<f64> = got.iter().map(|t| t.1).collect();
    let nf: Vec<f64> = got.iter().map(|t| t.2).collect();
    acc.embed_shallow.add(&pick(&g.initial_wrt_shallow), &ni, cfg.fault, skipped);
    acc.final_shallow.add(&pick(&g.final_wrt_shallow), &nf, cfg.fault, skipped);

    let (mut ai, mut ni) = (Vec::new(), Vec::new());
    let (mut af, mut nf) = (Vec::new(), Vec::new());
    let (mut au, mut nu) = (Vec::new(), Vec::new());
    let (mut skip_head, mut skip_u2) = (0, 0);
    for ((name, gi), (_, gf)) in g.initial_wrt.iter().zip(&g.final_wrt) {
        let base_t = inst.params.get(name)?;
        let is_u2 = name.starts_with("u2.");
        let at = |i: usize| {
            move |d: f64| {
                let mut p = inst.params.clone();
                *p.get_mut(name)? = bump(base_t, i, d);
                Ok((p, inst.shallow.clone()))
            }
        };
        let skipped = if is_u2 { &mut skip_u2 } else { &mut skip_head };
        let got = smooth_samples(rng, base_t.len(), cfg.samples, skipped, |i| smooth_central(inst, net, mode, &base, h, at(i)))?;
        for (i, di, df) in got {
            let (a_i, a_f) = (gi.as_slice().expect("layout")[i], gf.as_slice().expect("layout")[i]);
            if is_u2 {
                au.push(a_f);
                nu.push(df);
            } else {
                ai.push(a_i);
                ni.push(di);
                af.push(a_f);
                nf.push(df);
            }
        }
    }
    acc.embed_head.add(&ai, &ni, cfg.fault, skip_head);
    acc.final_head.add(&af, &nf, cfg.fault, skip_head);
    acc.final_u2.add(&au, &nu, cfg.fault, skip_u2);
    Ok(())
}

/// Runs every check on `cfg.instances` random instances.
pub fn run_gradcheck(net: &NetConfig, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut wrt_t = Accumulator::new("matching loss / template");
    let mut wrt_f = Accumulator::new("matching loss / search feature");
    let mut acc = BranchAccumulators {
        embed_shallow: Accumulator::new("initial loss / shallow feature (U1)"),
        embed_head: Accumulator::new("initial loss / U1 weights"),
        final_shallow: Accumulator::new("final loss / shallow feature"),
        final_head: Accumulator::new("final loss / U1 weights (second order)"),
        final_u2: Accumulator::new("final loss / U2 weights"),
    };
    for k in 0..cfg.instances {
        let seed = cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(k as u64);
        let inst = random_instance(net, cfg.regions.max(1), seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
        check_matching(&inst, net, cfg, &mut rng, &mut wrt_t, &mut wrt_f)?;
        check_branch(&inst, net, cfg, &mut rng, &mut acc)?;
    }
    let tol = cfg.tolerance;
    Ok(GradcheckReport {
        checks: vec![
            wrt_t.finish(tol),
            wrt_f.finish(tol),
            acc.embed_shallow.finish(tol),
            acc.embed_head.finish(tol),
            acc.final_shallow.finish(tol),
            acc.final_head.finish(tol),
            acc.final_u2.finish(tol),
        ],
        tolerance: tol,
    })
}

/// `dL*/d(U1)` with the gradient path kept (`detach = false`) or with G
/// treated as a constant.
pub fn head_gradient(
    params: &Params,
    net: &NetConfig,
    shallow: &FeatureMap,
    search: &[FeatureMap],
    labels: &[LabelMap],
    detach: bool,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, &|n: &str| n.starts_with("u1."));
    let f = tape.var(shallow.0.clone().into_dyn());
    let xs: Vec<_> = search.iter().map(|x| tape.constant(x.0.clone().into_dyn())).collect();
    let total = |tape: &mut Tape, beta| -> Result<_> {
        let mut acc = None;
        for (x, y) in xs.iter().zip(labels) {
            let s = xcorr(tape, beta, *x)?;
            let l = loss_on_tape(tape, s, y)?;
            acc = Some(match acc {
                None => l,
                Some(t) => tape.add(t, l)?,
            });
        }
        Ok(acc.expect("non-empty search list"))
    };
    let beta = embed(&mut tape, &bound, net, "u1", f)?;
    let l = total(&mut tape, beta)?;
    let mut g = tape.grad(l, &[f])?[0];
    if detach {
        g = tape.detach(g);
    }
    let delta = transform_gradient(&mut tape, &bound, net, g)?;
    let h = tape.add(f, delta)?;
    let beta_star = embed(&mut tape, &bound, net, "u1", h)?;
    let ls = total(&mut tape, beta_star)?;
    let heads = bound.trainable(&tape);
    let vars: Vec<_> = heads.iter().map(|(_, v)| *v).collect();
    let grads = tape.grad(ls, &vars)?;
    Ok(grads.iter().flat_map(|g| tape.value(*g).iter().copied().collect::<Vec<_>>()).collect())
}

/// Norm of the change in `dL*/d(U1)` when G is detached.
pub fn second_order_difference(params: &Params, net: &NetConfig, shallow: &FeatureMap, search: &[FeatureMap], labels: &[LabelMap]) -> Result<f64> {
    let full = head_gradient(params, net, shallow, search, labels, false)?;
    let first = head_gradient(params, net, shallow, search, labels, true)?;
    Ok(full.iter().zip(&first).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
}
