//! Shared helpers for the integration tests: random tensors, a central
//! finite-difference checker and a straight-line reference encoder.
#![allow(dead_code)]

use rand::Rng as _;
use xlpolicy_core::numerics::{rng_from_seed, Graph, Params, Tensor, Var};
use xlpolicy_core::xl::XlConfig;
use xlpolicy_core::Result;

pub fn rand_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = rng_from_seed(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps gradients that are zero
/// up to rounding from counting as large relative errors.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

pub type OpFn<'a> = dyn Fn(&mut Graph<'_>, &[Var]) -> Result<Var> + 'a;

fn project(inputs: &[Tensor], f: &OpFn<'_>, track: bool) -> (f64, Vec<Vec<f64>>) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(if track { t.clone().with_requires_grad() } else { t.clone() }))
        .collect();
    let out = f(&mut g, &vars).unwrap();
    let shape = g.value(out).shape().to_vec();
    let w = g.constant(rand_tensor(&shape, 0x5eed, -1.0, 1.0));
    let p = g.mul(out, w).unwrap();
    let loss = g.sum(p);
    let value = g.value(loss).data()[0];
    if !track {
        return (value, Vec::new());
    }
    g.backward(loss).unwrap();
    let grads = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    (value, grads)
}

/// Largest relative error between the analytic gradient of `sum(f(x) * W)`
/// (for a fixed random `W`) and central differences with step `h`, over
/// every input element.
pub fn max_fd_error(inputs: &[Tensor], f: &OpFn<'_>, h: f64) -> f64 {
    let (_, grads) = project(inputs, f, true);
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        for k in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[k] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[k] -= h;
            let numeric = (project(&plus, f, false).0 - project(&minus, f, false).0) / (2.0 * h);
            worst = worst.max(rel_err(grads[i][k], numeric, 1e-6));
        }
    }
    worst
}

fn param<'a>(params: &'a Params, name: &str) -> &'a Tensor {
    params.id(name).map(|id| params.get(id)).unwrap_or_else(|| panic!("no parameter {name}"))
}

fn affine(x: &[Vec<f64>], w: &Tensor, b: Option<&Tensor>) -> Vec<Vec<f64>> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| {
            (0..n)
                .map(|c| {
                    let mut s = b.map_or(0.0, |b| b.data()[c]);
                    for i in 0..k {
                        s += row[i] * w.data()[i * n + c];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

fn norm(x: &[Vec<f64>], gain: &Tensor, bias: &Tensor) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            let inv = 1.0 / (var + 1e-5).sqrt();
            row.iter().enumerate().map(|(c, v)| (v - mean) * inv * gain.data()[c] + bias.data()[c]).collect()
        })
        .collect()
}

fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v * v * v)).tanh())
}

/// Single pass over the whole `[T, d_in]` stream with plain causal
/// attention, no memory and no segmentation. Absolute embeddings are indexed
/// by `t mod seg_len`, matching the segment-local convention of the encoder.
/// `window` limits each query to its most recent keys.
pub fn reference_encode(params: &Params, cfg: &XlConfig, x: &Tensor, seg_len: usize, window: Option<usize>) -> Vec<Vec<f64>> {
    let rows: Vec<Vec<f64>> = (0..x.rows()).map(|r| x.row(r).to_vec()).collect();
    let mut h = affine(&rows, param(params, "xl.proj.w"), Some(param(params, "xl.proj.b")));
    let pos = param(params, "xl.abs_pos");
    let d = cfg.d_model;
    for (t, row) in h.iter_mut().enumerate() {
        let p = t % seg_len;
        for c in 0..d {
            row[c] += pos.data()[p * d + c];
        }
    }
    let heads = cfg.n_heads;
    let dh = d / heads;
    for l in 0..cfg.n_layers {
        let p = |s: &str| param(params, &format!("xl.layer{l}.{s}"));
        let n1 = norm(&h, p("ln1.gain"), p("ln1.bias"));
        let q = affine(&n1, p("attn.wq"), None);
        let k = affine(&n1, p("attn.wk"), None);
        let v = affine(&n1, p("attn.wv"), None);
        let rel = p("attn.rel_bias");
        let n_off = rel.shape()[1];
        let mut att = vec![vec![0.0; d]; h.len()];
        for t in 0..h.len() {
            let lo = window.map_or(0, |w| (t + 1).saturating_sub(w));
            for hd in 0..heads {
                let cols = hd * dh..(hd + 1) * dh;
                let logits: Vec<f64> = (lo..=t)
                    .map(|j| {
                        let dot: f64 = cols.clone().map(|c| q[t][c] * k[j][c]).sum();
                        dot / (dh as f64).sqrt() + rel.data()[hd * n_off + (t - j)]
                    })
                    .collect();
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
                let s: f64 = e.iter().sum();
                for (w, j) in e.iter().zip(lo..=t) {
                    for c in cols.clone() {
                        att[t][c] += w / s * v[j][c];
                    }
                }
            }
        }
        let o = affine(&att, p("attn.wo"), None);
        for (hr, or) in h.iter_mut().zip(&o) {
            for (a, b) in hr.iter_mut().zip(or) {
                *a += b;
            }
        }
        let n2 = norm(&h, p("ln2.gain"), p("ln2.bias"));
        let f = affine(&n2, p("ff.in.w"), Some(p("ff.in.b")));
        let f: Vec<Vec<f64>> = f.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
        let f = affine(&f, p("ff.out.w"), Some(p("ff.out.b")));
        for (hr, fr) in h.iter_mut().zip(&f) {
            for (a, b) in hr.iter_mut().zip(fr) {
                *a += b;
            }
        }
    }
    norm(&h, param(params, "xl.ln_out.gain"), param(params, "xl.ln_out.bias"))
}

/// Overwrites every parameter with uniform noise so that zero-initialised
/// tables (relative bias, layer-norm offsets) take part in a test.
pub fn scramble(params: &mut Params, seed: u64, scale: f64) {
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    for (i, name) in names.iter().enumerate() {
        let id = params.id(name).unwrap();
        let shape = params.get(id).shape().to_vec();
        let mut t = rand_tensor(&shape, seed.wrapping_add(i as u64), -scale, scale);
        if name.ends_with(".gain") {
            for v in t.data_mut() {
                *v += 1.0;
            }
        }
        params.assign(id, t.data()).unwrap();
    }
}

/// Default world with a reduced model that trains in seconds.
pub fn small_setup() -> (xlpolicy_core::sim::Env, xlpolicy_core::model::ModelConfig) {
    use xlpolicy_core::fusion::FusionConfig;
    use xlpolicy_core::model::ModelConfig;
    use xlpolicy_core::policy::ActionSpec;
    use xlpolicy_core::sim::{Env, SimConfig};
    use xlpolicy_core::xl::Window;

    let fusion = FusionConfig {
        conv_channels: [4, 8],
        d_rgbd: 8,
        d_lidar: 8,
        d_touch: 4,
        mlp_hidden: 8,
        ..FusionConfig::default()
    };
    let xl = XlConfig { d_model: 16, n_heads: 2, n_layers: 1, mem_len: 8, window: Window::Dense, ff_mult: 2, seg_len: 8 };
    let sim = SimConfig::default();
    let spec = ActionSpec::grid(sim.cell_size, std::f64::consts::FRAC_PI_2);
    let env = Env::new(sim, fusion.clone(), spec).unwrap();
    (env, ModelConfig { fusion, xl, head_hidden: 16 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StackLoss {
    Clone,
    Surrogate,
    Critic,
}

/// Central-difference check of one loss through fusion, encoder and heads.
///
/// Uses expert episodes no longer than one segment so that no memory (which
/// is deliberately gradient-free) sits between parameters and the loss.
/// Returns the number of sampled scalars and the largest relative error.
pub fn full_stack_fd(
    env: &xlpolicy_core::sim::Env,
    cfg: &xlpolicy_core::model::ModelConfig,
    loss: StackLoss,
    n_params: usize,
    seed: u64,
) -> (usize, f64) {
    use xlpolicy_core::learn::{bc_loss_graph, critic_loss_graph, ppo_loss_graph};
    use xlpolicy_core::model::Model;
    use xlpolicy_core::numerics::derive_seed;
    use xlpolicy_core::sim::{record_expert_episode, Task};

    let model = Model::new(cfg, env.action_spec().clone(), seed).unwrap();
    let mut episodes = Vec::new();
    for (i, task) in Task::ALL.iter().enumerate() {
        let mut ep = record_expert_episode(env, *task, derive_seed(seed, i as u64)).unwrap();
        ep.steps.truncate(cfg.xl.seg_len);
        episodes.push(ep);
    }
    let refs: Vec<Vec<_>> = episodes.iter().map(|e| e.steps.iter().map(|s| &s.obs).collect()).collect();
    let actions: Vec<usize> = episodes.iter().flat_map(|e| e.steps.iter().map(|s| env.action_spec().nearest(&s.action))).collect();
    let expert: Vec<f64> = episodes.iter().flat_map(|e| e.steps.iter().flat_map(|s| s.action)).collect();
    let n = actions.len();
    let mut rng = rng_from_seed(derive_seed(seed, 77));
    let returns: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let adv: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let vocab = env.action_spec().as_tensor();
    let eps = 0.2;

    let current_logp = |params: &Params| -> Vec<f64> {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let out = model.forward(&mut g, &bound, &refs).unwrap();
        let lsm = g.log_softmax(out.q).unwrap();
        let lp = g.pick(lsm, &actions).unwrap();
        g.value(lp).data().to_vec()
    };
    // old log-probabilities offset so that some ratios are clipped, keeping
    // every ratio well away from the clip corners
    let logp_old: Vec<f64> = current_logp(model.params())
        .iter()
        .map(|lp| {
            let r: f64 = [0.6, 0.95, 1.05, 1.5][rng.random_range(0..4)];
            lp - r.ln()
        })
        .collect();

    let eval = |params: &Params, track: bool| -> (f64, Vec<Option<Vec<f64>>>) {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, track);
        let out = model.forward(&mut g, &bound, &refs).unwrap();
        let l = match loss {
            StackLoss::Clone => bc_loss_graph(&mut g, out.q, &vocab, Tensor::new(vec![n, 7], expert.clone()).unwrap()).unwrap(),
            StackLoss::Critic => critic_loss_graph(&mut g, out.v, &returns).unwrap(),
            StackLoss::Surrogate => {
                let lsm = g.log_softmax(out.q).unwrap();
                let lp = g.pick(lsm, &actions).unwrap();
                ppo_loss_graph(&mut g, lp, &logp_old, &adv, eps).unwrap()
            }
        };
        let value = g.value(l).data()[0];
        if !track {
            return (value, Vec::new());
        }
        g.backward(l).unwrap();
        (value, bound.grads(&g))
    };

    let base = model.params().clone();
    let (_, grads) = eval(&base, true);
    let names: Vec<(String, usize)> = base.iter().map(|(n, t)| (n.to_string(), t.numel())).collect();
    // one scalar from every tensor, then uniform extras
    let mut picks: Vec<(usize, usize)> = names.iter().enumerate().map(|(i, (_, len))| (i, rng.random_range(0..*len))).collect();
    while picks.len() < n_params {
        let i = rng.random_range(0..names.len());
        picks.push((i, rng.random_range(0..names[i].1)));
    }
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for &(i, k) in &picks {
        let id = base.id(&names[i].0).unwrap();
        let shifted = |delta: f64| {
            let mut p = base.clone();
            let mut d = p.get(id).data().to_vec();
            d[k] += delta;
            p.assign(id, &d).unwrap();
            eval(&p, false).0
        };
        let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
        let analytic = grads[i].as_ref().map_or(0.0, |g| g[k]);
        let err = rel_err(analytic, numeric, 1e-6);
        if err > worst {
            worst = err;
        }
    }
    (picks.len(), worst)
}
