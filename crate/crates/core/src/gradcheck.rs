//! Central finite-difference oracle for gradient verification.
//!
//! Deliberately independent of the tape: it only re-evaluates a forward
//! closure at perturbed parameter values.

use crate::optim::ParamStore;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// max |a-n| / max(floor, |a|, |n|) over corresponding entries.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / floor.max(a.abs()).max(n.abs()))
        .fold(0.0, f64::max)
}

/// Central finite differences of `f` w.r.t. every entry of parameter `name`.
pub fn fd_grad_param<F>(store: &mut ParamStore<f64>, name: &str, eps: f64, mut f: F) -> Tensor<f64>
where
    F: FnMut(&ParamStore<f64>) -> f64,
{
    let n = store.value(name).unwrap().len();
    let mut g = Tensor::zeros(store.value(name).unwrap().shape().to_vec());
    for i in 0..n {
        let orig = store.value(name).unwrap().data()[i];
        store.value_mut(name).unwrap().data_mut()[i] = orig + eps;
        let fp = f(store);
        store.value_mut(name).unwrap().data_mut()[i] = orig - eps;
        let fm = f(store);
        store.value_mut(name).unwrap().data_mut()[i] = orig;
        g.data_mut()[i] = (fp - fm) / (2.0 * eps);
    }
    g
}

/// Central finite differences of `f` w.r.t. every entry of a free tensor.
pub fn fd_grad_tensor<F>(x: &mut Tensor<f64>, eps: f64, mut f: F) -> Tensor<f64>
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    let mut g = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + eps;
        let fp = f(x);
        x.data_mut()[i] = orig - eps;
        let fm = f(x);
        x.data_mut()[i] = orig;
        g.data_mut()[i] = (fp - fm) / (2.0 * eps);
    }
    g
}

/// Verify analytic grads in `store` (already populated by a backward pass)
/// against finite differences of `f` over every parameter. Returns the worst
/// relative error seen.
pub fn check_store_grads<F>(store: &mut ParamStore<f64>, eps: f64, floor: f64, mut f: F) -> f64
where
    F: FnMut(&ParamStore<f64>) -> f64,
{
    let names: Vec<String> = store.names().map(|s| s.to_string()).collect();
    let mut worst = 0.0f64;
    for name in names {
        let fd = fd_grad_param(store, &name, eps, &mut f);
        let analytic = store.grad(&name).unwrap();
        let e = max_rel_err(analytic.data(), fd.data(), 1e-6f64.max(floor));
        worst = worst.max(e);
    }
    worst
}

/// Ready-made finite-difference suites over every differentiable primitive
/// and the end-to-end piecewise objective, at tiny double-precision configs.
pub mod suites {
    use super::*;
    use crate::featmap::{BlockConfig, FeatMapConfig};
    use crate::graph::RelationSpec;
    use crate::ops::Reduction;
    use crate::potentials::{pairwise_forward, unary_forward, PotentialNets, PotentialNetsConfig};
    use crate::tape::Tape;
    use crate::train::valid_edges;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub const TOLERANCE: f64 = 1e-4;

    fn rand_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn tiny_featmap() -> FeatMapConfig {
        FeatMapConfig {
            in_channels: 1,
            scales: vec![1.0, 0.5],
            shared_blocks: vec![BlockConfig { channels: 2, convs: 1, pool_stride: 2 }],
            scale_block: BlockConfig { channels: 2, convs: 1, pool_stride: 1 },
            pool_windows: vec![3],
            downsample_factor: 2,
        }
    }

    /// One (name, worst relative error) entry per primitive.
    pub fn primitive_suite(seed: u64) -> crate::Result<Vec<(String, f64)>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();

        // conv2d: gradients w.r.t. kernel, bias, and input of sum(conv(x))
        {
            let mut store = ParamStore::new();
            store.insert("x", rand_tensor(vec![2, 6, 6], &mut rng))?;
            store.insert("w", rand_tensor(vec![3, 2, 3, 3], &mut rng))?;
            store.insert("b", rand_tensor(vec![3], &mut rng))?;
            let run = |s: &ParamStore<f64>| -> (Tape<f64>, crate::tape::Var) {
                let mut tape = Tape::new();
                let x = tape.param(s, "x").unwrap();
                let w = tape.param(s, "w").unwrap();
                let b = tape.param(s, "b").unwrap();
                let y = tape.conv2d(x, w, b, 2, 1).unwrap();
                let l = tape.sum_all(y);
                (tape, l)
            };
            let (tape, l) = run(&store);
            tape.backward(l, 1.0, &mut [&mut store])?;
            let worst = check_store_grads(&mut store, DEFAULT_EPS, 1e-6, |s| {
                let (tape, l) = run(s);
                tape.value(l).item()
            });
            out.push(("conv2d".to_string(), worst));
        }

        // max_pool2d: input gradient (ties have measure zero at random values)
        {
            let mut store = ParamStore::new();
            store.insert("x", rand_tensor(vec![2, 5, 5], &mut rng))?;
            let run = |s: &ParamStore<f64>| -> (Tape<f64>, crate::tape::Var) {
                let mut tape = Tape::new();
                let x = tape.param(s, "x").unwrap();
                let y = tape.max_pool2d(x, 3, 2, 1).unwrap();
                let l = tape.sum_all(y);
                (tape, l)
            };
            let (tape, l) = run(&store);
            tape.backward(l, 1.0, &mut [&mut store])?;
            let worst = check_store_grads(&mut store, DEFAULT_EPS, 1e-6, |s| {
                let (tape, l) = run(s);
                tape.value(l).item()
            });
            out.push(("max_pool2d".to_string(), worst));
        }

        // bilinear resize, both up and down
        for (name, h2, w2) in [("bilinear_up", 7, 9), ("bilinear_down", 3, 2)] {
            let mut store = ParamStore::new();
            store.insert("x", rand_tensor(vec![2, 4, 5], &mut rng))?;
            let run = move |s: &ParamStore<f64>| -> (Tape<f64>, crate::tape::Var) {
                let mut tape = Tape::new();
                let x = tape.param(s, "x").unwrap();
                let y = tape.bilinear_resize(x, h2, w2).unwrap();
                let l = tape.sum_all(y);
                (tape, l)
            };
            let (tape, l) = run(&store);
            tape.backward(l, 1.0, &mut [&mut store])?;
            let worst = check_store_grads(&mut store, DEFAULT_EPS, 1e-6, |s| {
                let (tape, l) = run(s);
                tape.value(l).item()
            });
            out.push((name.to_string(), worst));
        }

        // linear + relu chain (relu inputs kept away from the kink)
        {
            let mut store = ParamStore::new();
            let mut x = rand_tensor(vec![4, 3], &mut rng);
            for v in x.data_mut() {
                if v.abs() < 0.1 {
                    *v += 0.2;
                }
            }
            store.insert("x", x)?;
            store.insert("w", rand_tensor(vec![5, 3], &mut rng))?;
            store.insert("b", rand_tensor(vec![5], &mut rng))?;
            let run = |s: &ParamStore<f64>| -> (Tape<f64>, crate::tape::Var) {
                let mut tape = Tape::new();
                let x = tape.param(s, "x").unwrap();
                let xr = tape.relu(x);
                let w = tape.param(s, "w").unwrap();
                let b = tape.param(s, "b").unwrap();
                let y = tape.linear(xr, w, b).unwrap();
                let l = tape.sum_all(y);
                (tape, l)
            };
            let (tape, l) = run(&store);
            tape.backward(l, 1.0, &mut [&mut store])?;
            let worst = check_store_grads(&mut store, DEFAULT_EPS, 1e-6, |s| {
                let (tape, l) = run(s);
                tape.value(l).item()
            });
            out.push(("linear_relu".to_string(), worst));
        }

        // softmax cross-entropy, both reductions
        for (name, red) in [("softmax_xent_mean", Reduction::Mean), ("softmax_xent_sum", Reduction::Sum)] {
            let mut store = ParamStore::new();
            store.insert("z", rand_tensor(vec![4, 3], &mut rng))?;
            let targets: Vec<usize> = (0..4).map(|_| rng.gen_range(0..3)).collect();
            let t2 = targets.clone();
            let run = move |s: &ParamStore<f64>| -> (Tape<f64>, crate::tape::Var) {
                let mut tape = Tape::new();
                let z = tape.param(s, "z").unwrap();
                let l = tape.softmax_xent(z, &t2, red).unwrap();
                (tape, l)
            };
            let (tape, l) = run(&store);
            tape.backward(l, 1.0, &mut [&mut store])?;
            let worst = check_store_grads(&mut store, DEFAULT_EPS, 1e-6, |s| {
                let (tape, l) = run(s);
                tape.value(l).item()
            });
            out.push((name.to_string(), worst));
        }

        // full FeatMap-Net forward: every trunk parameter
        {
            let net = crate::featmap::FeatMapNet::new(tiny_featmap())?;
            let mut store = ParamStore::new();
            net.init_params(&mut store, "fm.", &mut rng)?;
            let img = rand_tensor(vec![1, 6, 6], &mut rng);
            let net2 = net.clone();
            let img2 = img.clone();
            let run = move |s: &ParamStore<f64>| -> (Tape<f64>, crate::tape::Var) {
                let mut tape = Tape::new();
                let x = tape.input(img2.clone());
                let f = net2.forward(&mut tape, s, "fm.", x).unwrap();
                let l = tape.sum_all(f);
                (tape, l)
            };
            let (tape, l) = run(&store);
            tape.backward(l, 1.0, &mut [&mut store])?;
            let worst = check_store_grads(&mut store, DEFAULT_EPS, 1e-6, |s| {
                let (tape, l) = run(s);
                tape.value(l).item()
            });
            out.push(("featmap".to_string(), worst));
        }

        Ok(out)
    }

    /// End-to-end piecewise objective through the real nets: image -> trunk
    /// -> head -> softmax NLL, checked against finite differences for every
    /// parameter of each potential's store.
    pub fn piecewise_suite(seed: u64) -> crate::Result<Vec<(String, f64)>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = PotentialNetsConfig {
            k: 2,
            unary_hidden: vec![3],
            pairwise_hidden: vec![3],
            featmap: tiny_featmap(),
            relations: vec![RelationSpec::surround(), RelationSpec::above_below()],
            share_trunk: false,
        };
        let mut nets = PotentialNets::<f64>::new(cfg, seed)?;
        let img = rand_tensor(vec![1, 6, 6], &mut rng);
        let graph = nets.graph_for(6, 6)?;
        let n = graph.num_nodes();
        let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2u8)).collect();
        labels[rng.gen_range(0..n)] = crate::labels::IGNORE;
        let valid: Vec<usize> = (0..n).filter(|&p| labels[p] != crate::labels::IGNORE).collect();
        let k = nets.config.k;
        let trunk = nets.trunk.clone();
        let mut out = Vec::new();

        // unary term
        {
            let targets: Vec<usize> = valid.iter().map(|&p| labels[p] as usize).collect();
            let (img2, trunk2, valid2, t2) = (img.clone(), trunk.clone(), valid.clone(), targets);
            let run = move |s: &ParamStore<f64>| -> (Tape<f64>, crate::tape::Var) {
                let mut tape = Tape::new();
                let x = tape.input(img2.clone());
                let f = trunk2.forward(&mut tape, s, "fm.", x).unwrap();
                let table = unary_forward(&mut tape, s, f).unwrap();
                let rows = tape.gather_rows(table, &valid2).unwrap();
                let l = tape.softmax_xent(rows, &t2, Reduction::Sum).unwrap();
                (tape, l)
            };
            let (tape, l) = run(&nets.unary_store);
            tape.backward(l, 1.0, &mut [&mut nets.unary_store])?;
            let worst = check_store_grads(&mut nets.unary_store, DEFAULT_EPS, 1e-6, |s| {
                let (tape, l) = run(s);
                tape.value(l).item()
            });
            out.push(("piecewise_unary".to_string(), worst));
        }

        // each pairwise term
        for ri in 0..nets.pairwise_stores.len() {
            let name = nets.pairwise_stores[ri].0.clone();
            let edges = valid_edges(graph.edge_feature_indices(&name)?, &labels);
            if edges.is_empty() {
                continue;
            }
            let targets: Vec<usize> =
                edges.iter().map(|&(p, q)| labels[p] as usize * k + labels[q] as usize).collect();
            let prefix = format!("{name}.");
            let (img2, trunk2, e2, t2) = (img.clone(), trunk.clone(), edges, targets);
            let run = move |s: &ParamStore<f64>| -> (Tape<f64>, crate::tape::Var) {
                let mut tape = Tape::new();
                let x = tape.input(img2.clone());
                let f = trunk2.forward(&mut tape, s, "fm.", x).unwrap();
                let table = pairwise_forward(&mut tape, s, &prefix, f, &e2).unwrap();
                let l = tape.softmax_xent(table, &t2, Reduction::Sum).unwrap();
                (tape, l)
            };
            let store = &mut nets.pairwise_stores[ri].1;
            let (tape, l) = run(store);
            tape.backward(l, 1.0, &mut [store])?;
            let worst = check_store_grads(store, DEFAULT_EPS, 1e-6, |s| {
                let (tape, l) = run(s);
                tape.value(l).item()
            });
            out.push((format!("piecewise_{name}"), worst));
        }
        Ok(out)
    }

    /// Worst error per suite entry across several seeds.
    pub fn run_all(seeds: &[u64]) -> crate::Result<Vec<(String, f64)>> {
        let mut worst: Vec<(String, f64)> = Vec::new();
        for &seed in seeds {
            for (name, e) in primitive_suite(seed)?.into_iter().chain(piecewise_suite(seed)?) {
                match worst.iter_mut().find(|(n, _)| *n == name) {
                    Some((_, w)) => *w = w.max(e),
                    None => worst.push((name, e)),
                }
            }
        }
        Ok(worst)
    }
}
