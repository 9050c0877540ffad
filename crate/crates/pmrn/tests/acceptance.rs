//! Acceptance suite: ten go/no-go checks, one test per criterion, each
//! printing a PASS/FAIL line. The heavy end-to-end checks share a lock so
//! their wall-clock budgets aren't polluted by concurrent tests.

use std::collections::BTreeMap;
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use rand::Rng;

use pmrn::acg;
use pmrn::config::TrainConfig;
use pmrn::crn;
use pmrn::data::{assemble_dataset, partsworld::PartsWorldConfig, sample_episode, Dataset};
use pmrn::jigsaw::{self, build_permutation_table, make_jigsaw_batch};
use pmrn::metric;
use pmrn::model::{
    bind_model, episode_tensors, forward_episode, init_model, Mode, ModelConfig, Toggles,
};
use pmrn::params::{rng_for, ParamSet};
use pmrn::tensor::{all_op_kinds, grad_check_default, Graph, Tensor, TensorId};
use pmrn::train::{self, checkpoint, eval::evaluate, eval::evaluate_scores, metrics_csv};

#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn lock() -> std::sync::MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

/// Desk-scale synthetic dataset shared by the end-to-end criteria.
fn desk_dataset() -> &'static Dataset {
    static DS: OnceLock<Dataset> = OnceLock::new();
    DS.get_or_init(|| {
        let cfg = PartsWorldConfig::default();
        let (contents, manifest) = pmrn::data::partsworld::generate(&cfg).expect("generate");
        assemble_dataset(&contents, &manifest).expect("assemble")
    })
}

fn report(criterion: &str, pass: bool, detail: &str) {
    println!(
        "criterion {criterion}: {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion}: {detail}");
}

// ---- shared micro-model helpers ----------------------------------------

/// Small full model: 12×12 images, two stages, 8 channels, 2 primitives.
fn micro_config(toggles: Toggles) -> ModelConfig {
    ModelConfig {
        backbone: pmrn::backbone::BackboneConfig {
            in_size: 12,
            stages: vec![
                pmrn::backbone::StageConfig { out_channels: 8, stride: 2 },
                pmrn::backbone::StageConfig { out_channels: 8, stride: 2 },
            ],
        },
        acg: acg::AcgConfig { k: 2, reduction: 2 },
        crn: crn::CrnConfig { embed_dim: 4, layers: 2 },
        n_perm: 5,
        toggles,
    }
}

fn micro_episode(seed: u64) -> pmrn::model::EpisodeTensors {
    let mut rng = rng_for(seed, 40);
    let image = |rng: &mut rand_chacha::ChaCha8Rng| {
        Tensor::new(
            vec![3, 12, 12],
            (0..432).map(|_| rng.random_range(0.05..0.95)).collect(),
        )
        .unwrap()
    };
    let raw: Vec<Tensor> = (0..6).map(|_| image(&mut rng)).collect();
    let mut batch = Vec::new();
    for img in &raw {
        batch.extend_from_slice(img.data());
    }
    pmrn::model::EpisodeTensors {
        batch: Tensor::new(vec![6, 3, 12, 12], batch).unwrap(),
        raw,
        support_labels: vec![0, 1],
        query_labels: vec![0, 0, 1, 1],
        n_way: 2,
        k_shot: 1,
    }
}

/// Central-difference check of a scalar loss against every parameter in the
/// set. Returns the maximum relative error.
fn fd_check_params(
    params: &ParamSet,
    loss_fn: &dyn Fn(&ParamSet) -> f64,
    grad_fn: &dyn Fn(&ParamSet) -> BTreeMap<String, Tensor>,
) -> f64 {
    let h = 1e-5;
    let analytic = grad_fn(params);
    let mut worst: f64 = 0.0;
    let names: Vec<String> = params.names().cloned().collect();
    let mut probe = params.clone();
    for name in names {
        for i in 0..params.get(&name).unwrap().numel() {
            let orig = params.get(&name).unwrap().data()[i];
            probe.get_mut(&name).unwrap().data_mut()[i] = orig + h;
            let up = loss_fn(&probe);
            probe.get_mut(&name).unwrap().data_mut()[i] = orig - h;
            let down = loss_fn(&probe);
            probe.get_mut(&name).unwrap().data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = analytic[&name].data()[i];
            let denom = a.abs().max(fd.abs()).max(1e-6);
            worst = worst.max((a - fd).abs() / denom);
        }
    }
    worst
}

// ---- criterion 1 --------------------------------------------------------

#[test]
fn criterion_1_gradient_suite() {
    let _g = lock();
    let start = Instant::now();
    let tol = 1e-4;
    let seeds = 10u64;

    // Every graph op, ten seeds each.
    let mut worst_op: f64 = 0.0;
    for kind in all_op_kinds() {
        for seed in 0..seeds {
            let r = grad_check_default(kind, seed, tol);
            assert!(r.pass, "{} seed {seed}: max_rel_err {}", r.op, r.max_rel_err);
            worst_op = worst_op.max(r.max_rel_err);
        }
    }

    // Composite modules, ten seeds each: grouping head, graph stack,
    // weight generator, jigsaw head, and the combined episode loss.
    let mut worst_mod: f64 = 0.0;
    for seed in 0..seeds {
        worst_mod = worst_mod.max(fd_acg_head(seed));
        worst_mod = worst_mod.max(fd_crn_stack(seed));
        worst_mod = worst_mod.max(fd_tsw_generator(seed));
        worst_mod = worst_mod.max(fd_jigsaw_head(seed));
        worst_mod = worst_mod.max(fd_full_loss(seed));
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = worst_op < tol && worst_mod < tol && elapsed < 120.0;
    report(
        "1 (gradient suite)",
        pass,
        &format!("ops max_rel_err {worst_op:.2e}, modules {worst_mod:.2e}, {elapsed:.1}s"),
    );
}

fn projected_sum(g: &mut Graph, out: TensorId, seed: u64) -> TensorId {
    let shape = g.value(out).shape().to_vec();
    let mut rng = rng_for(seed, 41);
    let r = Tensor::new(
        shape.clone(),
        (0..shape.iter().product::<usize>())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap();
    let r = g.constant(r);
    let m = g.mul(out, r).unwrap();
    g.sum(m).unwrap()
}

fn fd_acg_head(seed: u64) -> f64 {
    let mut params = ParamSet::new();
    acg::init_acg_into(&mut params, 8, acg::AcgConfig { k: 2, reduction: 2 }, &mut rng_for(seed, 42)).unwrap();
    let mut rng = rng_for(seed, 43);
    let pooled = Tensor::new(vec![1, 8], (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let build = |p: &ParamSet, g: &mut Graph, trainable: bool| -> (TensorId, Vec<(String, TensorId)>) {
        let mut names = Vec::new();
        let mut heads = Vec::new();
        for i in 0..2 {
            let mut leaf = |part: &str| {
                let n = acg::param_name(i, part);
                let id = g.leaf(p.get(&n).unwrap().clone(), trainable);
                names.push((n, id));
                id
            };
            heads.push(acg::HeadNodes {
                w1: leaf("fc1.weight"),
                b1: leaf("fc1.bias"),
                w2: leaf("fc2.weight"),
                b2: leaf("fc2.bias"),
            });
        }
        let nodes = acg::AcgNodes { heads };
        let input = g.constant(pooled.clone());
        let d = acg::channel_weights(g, &nodes, input).unwrap();
        (d, names)
    };
    let loss_fn = |p: &ParamSet| -> f64 {
        let mut g = Graph::new();
        let (d, _) = build(p, &mut g, false);
        let loss = projected_sum(&mut g, d, seed);
        g.value(loss).item()
    };
    let grad_fn = |p: &ParamSet| -> BTreeMap<String, Tensor> {
        let mut g = Graph::new();
        let (d, names) = build(p, &mut g, true);
        let loss = projected_sum(&mut g, d, seed);
        let grads = g.backward(loss).unwrap();
        names
            .into_iter()
            .map(|(n, id)| {
                let shape = g.value(id).shape().to_vec();
                (n, grads.or_zeros(id, &shape))
            })
            .collect()
    };
    fd_check_params(&params, &loss_fn, &grad_fn)
}

fn fd_crn_stack(seed: u64) -> f64 {
    let mut params = ParamSet::new();
    crn::init_crn_into(&mut params, 6, crn::CrnConfig { embed_dim: 3, layers: 2 }, &mut rng_for(seed, 44)).unwrap();
    let mut rng = rng_for(seed, 45);
    let v = Tensor::new(vec![3, 6], (0..18).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let run = |p: &ParamSet, trainable: bool| -> (Graph, TensorId, Vec<(String, TensorId)>) {
        let mut g = Graph::new();
        let mut names = Vec::new();
        let mut leaf = |g: &mut Graph, n: String| {
            let id = g.leaf(p.get(&n).unwrap().clone(), trainable);
            names.push((n, id));
            id
        };
        let nodes = crn::CrnNodes {
            theta: leaf(&mut g, crn::theta_name().to_string()),
            phi: leaf(&mut g, crn::phi_name().to_string()),
            omegas: vec![leaf(&mut g, crn::omega_name(0)), leaf(&mut g, crn::omega_name(1))],
        };
        let input = g.constant(v.clone());
        let out = crn::reason(&mut g, input, &nodes).unwrap();
        let loss = projected_sum(&mut g, out, seed);
        (g, loss, names)
    };
    let loss_fn = |p: &ParamSet| -> f64 {
        let (g, loss, _) = run(p, false);
        g.value(loss).item()
    };
    let grad_fn = |p: &ParamSet| -> BTreeMap<String, Tensor> {
        let (g, loss, names) = run(p, true);
        let grads = g.backward(loss).unwrap();
        names
            .into_iter()
            .map(|(n, id)| {
                let shape = g.value(id).shape().to_vec();
                (n, grads.or_zeros(id, &shape))
            })
            .collect()
    };
    fd_check_params(&params, &loss_fn, &grad_fn)
}

fn fd_tsw_generator(seed: u64) -> f64 {
    let mut params = ParamSet::new();
    metric::init_tsw_into(&mut params, 2, &mut rng_for(seed, 46));
    let mut rng = rng_for(seed, 47);
    let fa = Tensor::new(vec![4, 3, 3], (0..36).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let run = |p: &ParamSet, trainable: bool| -> (Graph, TensorId, Vec<(String, TensorId)>) {
        let mut g = Graph::new();
        let mut names = Vec::new();
        let mut leaf = |g: &mut Graph, n: String| {
            let id = g.leaf(p.get(&n).unwrap().clone(), trainable);
            names.push((n, id));
            id
        };
        let tsw = metric::TswNodes {
            w1: leaf(&mut g, metric::param_name("fc1.weight")),
            b1: leaf(&mut g, metric::param_name("fc1.bias")),
            w2: leaf(&mut g, metric::param_name("fc2.weight")),
            b2: leaf(&mut g, metric::param_name("fc2.bias")),
        };
        let input = g.constant(fa.clone());
        let w = metric::task_weights(&mut g, input, &tsw).unwrap();
        let loss = projected_sum(&mut g, w, seed);
        (g, loss, names)
    };
    let loss_fn = |p: &ParamSet| -> f64 {
        let (g, loss, _) = run(p, false);
        g.value(loss).item()
    };
    let grad_fn = |p: &ParamSet| -> BTreeMap<String, Tensor> {
        let (g, loss, names) = run(p, true);
        let grads = g.backward(loss).unwrap();
        names
            .into_iter()
            .map(|(n, id)| {
                let shape = g.value(id).shape().to_vec();
                (n, grads.or_zeros(id, &shape))
            })
            .collect()
    };
    fd_check_params(&params, &loss_fn, &grad_fn)
}

/// Jigsaw head and full combined loss both run on the micro model; the
/// full-loss check sweeps every trainable parameter in the set.
fn micro_fixture(seed: u64, toggles: Toggles) -> (ModelConfig, ParamSet, pmrn::model::EpisodeTensors, Option<jigsaw::JigsawBatch>) {
    let cfg = micro_config(toggles);
    let params = init_model(&cfg, seed).unwrap();
    let ep = micro_episode(seed);
    let jig = if toggles.ssj {
        let table = build_permutation_table(cfg.n_perm, 0).unwrap();
        let mut rng = rng_for(seed, 48);
        Some(make_jigsaw_batch(&ep.raw, &table, &mut rng).unwrap())
    } else {
        None
    };
    (cfg, params, ep, jig)
}

fn micro_loss_and_grads(
    cfg: &ModelConfig,
    params: &ParamSet,
    ep: &pmrn::model::EpisodeTensors,
    jig: Option<&jigsaw::JigsawBatch>,
    want_grads: bool,
) -> (f64, BTreeMap<String, Tensor>) {
    let mut g = Graph::new();
    let binding = bind_model(&mut g, params, cfg, want_grads).unwrap();
    let out = forward_episode(&mut g, &binding, cfg, ep, jig, 0.4, 1.0, Mode::Train).unwrap();
    let loss = g.value(out.total).item();
    let grads = if want_grads {
        let by_id = g.backward(out.total).unwrap();
        binding
            .names
            .iter()
            .map(|(n, id)| {
                let shape = g.value(*id).shape().to_vec();
                (n.clone(), by_id.or_zeros(*id, &shape))
            })
            .collect()
    } else {
        BTreeMap::new()
    };
    (loss, grads)
}

fn fd_jigsaw_head(seed: u64) -> f64 {
    let (cfg, full_params, ep, jig) = micro_fixture(seed, Toggles::full());
    // Sweep only the head parameters; the rest are frozen inputs here.
    let mut head_only = ParamSet::new();
    for name in [jigsaw::head_weight_name(), jigsaw::head_bias_name()] {
        head_only.insert(name, full_params.get(name).unwrap().clone());
    }
    let merged = |p: &ParamSet| -> ParamSet {
        let mut m = full_params.clone();
        for (n, t) in p.iter() {
            m.insert(n.clone(), t.clone());
        }
        m
    };
    let loss_fn = |p: &ParamSet| micro_loss_and_grads(&cfg, &merged(p), &ep, jig.as_ref(), false).0;
    let grad_fn = |p: &ParamSet| micro_loss_and_grads(&cfg, &merged(p), &ep, jig.as_ref(), true).1;
    fd_check_params(&head_only, &loss_fn, &grad_fn)
}

fn fd_full_loss(seed: u64) -> f64 {
    let (cfg, params, ep, jig) = micro_fixture(seed, Toggles::full());
    let loss_fn = |p: &ParamSet| micro_loss_and_grads(&cfg, p, &ep, jig.as_ref(), false).0;
    let grad_fn = |p: &ParamSet| micro_loss_and_grads(&cfg, p, &ep, jig.as_ref(), true).1;
    fd_check_params(&params, &loss_fn, &grad_fn)
}

// ---- criterion 2 --------------------------------------------------------

#[test]
fn criterion_2_adjacency_invariants() {
    let _g = lock();
    let mut rng = rng_for(2, 50);
    let mut worst_sum: f64 = 0.0;
    for _ in 0..1000 {
        let k = rng.random_range(2..6usize);
        let c = rng.random_range(4..10usize);
        let ce = rng.random_range(1..6usize);
        let mut g = Graph::new();
        let v = g.constant(Tensor::new(vec![k, c], (0..k * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap());
        let th = g.constant(Tensor::new(vec![c, ce], (0..c * ce).map(|_| rng.random_range(-0.6..0.6)).collect()).unwrap());
        let ph = g.constant(Tensor::new(vec![c, ce], (0..c * ce).map(|_| rng.random_range(-0.6..0.6)).collect()).unwrap());
        let adj = crn::adjacency(&mut g, v, th, ph).unwrap();
        for row in g.value(adj).data().chunks(k) {
            let sum: f64 = row.iter().sum();
            worst_sum = worst_sum.max((sum - 1.0).abs());
            assert!(row.iter().all(|&p| p > 0.0 && p < 1.0), "entry outside (0,1)");
        }
    }
    // Identical rows → uniform.
    let mut worst_uniform: f64 = 0.0;
    for k in 2..6usize {
        let mut g = Graph::new();
        let row: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v = g.constant(Tensor::new(vec![k, 6], row.repeat(k)).unwrap());
        let th = g.constant(Tensor::new(vec![6, 3], (0..18).map(|_| rng.random_range(-0.6..0.6)).collect()).unwrap());
        let ph = g.constant(Tensor::new(vec![6, 3], (0..18).map(|_| rng.random_range(-0.6..0.6)).collect()).unwrap());
        let adj = crn::adjacency(&mut g, v, th, ph).unwrap();
        for &p in g.value(adj).data() {
            worst_uniform = worst_uniform.max((p - 1.0 / k as f64).abs());
        }
    }
    let pass = worst_sum < 1e-9 && worst_uniform < 1e-9;
    report(
        "2 (adjacency invariants)",
        pass,
        &format!("1000 inputs: worst row-sum dev {worst_sum:.2e}, worst uniform dev {worst_uniform:.2e}"),
    );
}

// ---- criterion 3 --------------------------------------------------------

#[test]
fn criterion_3_grouping_identities() {
    let _g = lock();
    let mut rng = rng_for(3, 51);
    // Filter identity is exact and masks stay strictly inside (0,1).
    let mut filter_exact = true;
    for _ in 0..50 {
        let (k, c, h, w) = (
            rng.random_range(2..5usize),
            rng.random_range(2..8usize),
            rng.random_range(2..5usize),
            rng.random_range(2..5usize),
        );
        let mut g = Graph::new();
        let f = g.constant(Tensor::new(vec![c, h, w], (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap());
        let d = g.constant(Tensor::new(vec![k, c], (0..k * c).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap());
        let m = acg::primitive_masks(&mut g, f, d).unwrap();
        assert!(g.value(m).data().iter().all(|&v| v > 0.0 && v < 1.0));
        let p = acg::filter_primitives(&mut g, f, m).unwrap();
        let (fv, mv, pv) = (
            g.value(f).data().to_vec(),
            g.value(m).data().to_vec(),
            g.value(p).data().to_vec(),
        );
        for ki in 0..k {
            for ci in 0..c {
                for s in 0..h * w {
                    filter_exact &= pv[(ki * c + ci) * h * w + s] == fv[ci * h * w + s] * mv[ki * h * w + s];
                }
            }
        }
    }
    // Identical primitives hit the diversity ceiling k(k−1).
    let mut worst_ceiling: f64 = 0.0;
    for k in [2usize, 3, 4] {
        let mut g = Graph::new();
        let row: Vec<f64> = (0..5).map(|_| rng.random_range(0.1..1.0)).collect();
        let pooled = g.constant(Tensor::new(vec![k, 5], row.repeat(k)).unwrap());
        let l = acg::diversity_loss(&mut g, pooled).unwrap();
        worst_ceiling = worst_ceiling.max((g.value(l).item() - (k * (k - 1)) as f64).abs());
    }
    let pass = filter_exact && worst_ceiling < 1e-6;
    report(
        "3 (grouping identities)",
        pass,
        &format!("filter exact: {filter_exact}, ceiling dev {worst_ceiling:.2e}"),
    );
}

// ---- criterion 4 --------------------------------------------------------

#[test]
fn criterion_4_metric_degeneracies() {
    let _g = lock();
    let mut rng = rng_for(4, 52);

    // Unit weights equal the unweighted metric within 1e-12.
    let mut worst_unit: f64 = 0.0;
    for _ in 0..50 {
        let (k, c) = (rng.random_range(2..5usize), rng.random_range(3..9usize));
        let mut g = Graph::new();
        let q = g.constant(Tensor::new(vec![k, c], (0..k * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap());
        let p = g.constant(Tensor::new(vec![k, c], (0..k * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap());
        let ones = g.constant(Tensor::full(&[1, k], 1.0));
        let a = metric::similarity(&mut g, q, p, Some(ones)).unwrap();
        let b = metric::similarity(&mut g, q, p, None).unwrap();
        worst_unit = worst_unit.max((g.value(a).item() - g.value(b).item()).abs());
    }

    // Query equal to prototype with unit weights scores exactly k.
    let mut worst_self: f64 = 0.0;
    for k in [2usize, 3, 4] {
        let mut g = Graph::new();
        let q = g.constant(Tensor::new(vec![k, 6], (0..k * 6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap());
        let s = metric::similarity(&mut g, q, q, None).unwrap();
        worst_self = worst_self.max((g.value(s).item() - k as f64).abs());
    }

    // Equal logits cost ln N.
    let mut g = Graph::new();
    let logits = g.constant(Tensor::full(&[8, 5], 1.3));
    let loss = metric::episode_loss(&mut g, logits, &[0, 1, 2, 3, 4, 0, 1, 2]).unwrap();
    let ln_n_dev = (g.value(loss).item() - (5.0f64).ln()).abs();

    // Class relabeling permutes logits exactly.
    let ds = desk_dataset();
    let cfg = ModelConfig::for_side(ds.side, 4, Toggles::full());
    let params = init_model(&cfg, 17).unwrap();
    let episode = sample_episode(&ds.train, 3, 1, 2, &mut rng_for(4, 53)).unwrap();
    let run = |ep: &pmrn::data::Episode| {
        let tensors = episode_tensors(&ds.train, ep, None);
        let mut g = Graph::new();
        let binding = bind_model(&mut g, &params, &cfg, false).unwrap();
        let out = forward_episode(&mut g, &binding, &cfg, &tensors, None, 0.4, 1.0, Mode::Eval).unwrap();
        (g.value(out.logits).data().to_vec(), tensors.query_labels.clone())
    };
    let (base, base_labels) = run(&episode);
    let perm = [1usize, 2, 0];
    let mut swapped = episode.clone();
    swapped.classes = perm.iter().map(|&p| episode.classes[p]).collect();
    swapped.class_ids = perm.iter().map(|&p| episode.class_ids[p]).collect();
    let relabel = |v: &[(usize, usize)]| {
        let mut out: Vec<(usize, usize)> = v
            .iter()
            .map(|&(l, i)| (perm.iter().position(|&p| p == l).unwrap(), i))
            .collect();
        out.sort_by_key(|&(l, _)| l);
        out
    };
    swapped.support = relabel(&episode.support);
    swapped.query = relabel(&episode.query);
    let (permuted, permuted_labels) = run(&swapped);
    let n = 3;
    let mut relabel_exact = true;
    for (qi, &label) in base_labels.iter().enumerate() {
        let new_label = perm.iter().position(|&p| p == label).unwrap();
        let rank = base_labels[..qi].iter().filter(|&&l| l == label).count();
        let qj = permuted_labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == new_label)
            .map(|(j, _)| j)
            .nth(rank)
            .unwrap();
        for c in 0..n {
            let pc = perm.iter().position(|&p| p == c).unwrap();
            relabel_exact &= base[qi * n + c] == permuted[qj * n + pc];
        }
    }

    let pass = worst_unit < 1e-12 && worst_self < 1e-9 && ln_n_dev < 1e-9 && relabel_exact;
    report(
        "4 (metric degeneracies)",
        pass,
        &format!(
            "unit-weight dev {worst_unit:.2e}, self-sim dev {worst_self:.2e}, lnN dev {ln_n_dev:.2e}, relabel exact: {relabel_exact}"
        ),
    );
}

// ---- criterion 5 --------------------------------------------------------

#[test]
fn criterion_5_jigsaw_table_and_uniform_loss() {
    let _g = lock();
    let table = build_permutation_table(35, 0).unwrap();
    let mut distinct = true;
    for i in 0..35 {
        for j in i + 1..35 {
            distinct &= table.get(i) != table.get(j);
        }
    }
    let min_hamming = table.min_pairwise_hamming();

    // Uniform logits from a zeroed head cost exactly ln 35.
    let cfg = micro_config(Toggles::full());
    let mut params = init_model(&cfg, 5).unwrap();
    let channels = cfg.backbone.out_channels();
    params.insert(jigsaw::head_weight_name(), Tensor::zeros(&[9 * channels, 35]));
    params.insert(jigsaw::head_bias_name(), Tensor::zeros(&[35]));
    let cfg35 = ModelConfig { n_perm: 35, ..cfg };
    let ep = micro_episode(5);
    let table35 = build_permutation_table(35, 0).unwrap();
    let mut rng = rng_for(5, 54);
    let batch = make_jigsaw_batch(&ep.raw, &table35, &mut rng).unwrap();
    let mut g = Graph::new();
    let binding = bind_model(&mut g, &params, &cfg35, false).unwrap();
    let backbone = &binding.backbone;
    let head = binding.jigsaw.as_ref().unwrap();
    let (loss, _) = jigsaw::ssl_loss(&mut g, backbone, head, &batch).unwrap();
    let ln35_dev = (g.value(loss).item() - (35.0f64).ln()).abs();

    let pass = distinct && min_hamming >= 7 && ln35_dev < 1e-6;
    report(
        "5 (jigsaw table)",
        pass,
        &format!("35 distinct: {distinct}, min pairwise Hamming {min_hamming}, uniform-loss dev {ln35_dev:.2e}"),
    );
}

// ---- criterion 6 --------------------------------------------------------

#[test]
fn criterion_6_oracle_equivalence() {
    let _g = lock();
    let mut rng = rng_for(6, 55);
    let mut worst: f64 = 0.0;

    for _ in 0..20 {
        let k = rng.random_range(2..5usize);
        let c = rng.random_range(2..9usize);
        let hw = rng.random_range(2..5usize);

        // Masks against a scalar recomputation.
        let fd: Vec<f64> = (0..c * hw * hw).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dd: Vec<f64> = (0..k * c).map(|_| rng.random_range(-1.5..1.5)).collect();
        let mut g = Graph::new();
        let f = g.constant(Tensor::new(vec![c, hw, hw], fd.clone()).unwrap());
        let d = g.constant(Tensor::new(vec![k, c], dd.clone()).unwrap());
        let m = acg::primitive_masks(&mut g, f, d).unwrap();
        for ki in 0..k {
            for s in 0..hw * hw {
                let mut acc = 0.0;
                for ci in 0..c {
                    acc += dd[ki * c + ci] * fd[ci * hw * hw + s];
                }
                let expect = 1.0 / (1.0 + (-acc).exp());
                worst = worst.max((g.value(m).data()[ki * hw * hw + s] - expect).abs());
            }
        }

        // Diversity against the ordered double loop.
        let pooled: Vec<f64> = (0..k * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pt = g.constant(Tensor::new(vec![k, c], pooled.clone()).unwrap());
        if let Ok(l) = acg::diversity_loss(&mut g, pt) {
            let cos = |a: &[f64], b: &[f64]| {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                dot / (na * nb)
            };
            let mut expect = 0.0;
            for i in 0..k {
                for j in 0..k {
                    if i != j {
                        expect += cos(&pooled[i * c..(i + 1) * c], &pooled[j * c..(j + 1) * c]);
                    }
                }
            }
            worst = worst.max((g.value(l).item() - expect).abs());
        }

        // Graph convolution against the triple loop.
        let vd: Vec<f64> = (0..k * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ad: Vec<f64> = (0..k * k).map(|_| rng.random_range(0.0..1.0)).collect();
        let wd: Vec<f64> = (0..c * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let vt = g.constant(Tensor::new(vec![k, c], vd.clone()).unwrap());
        let at = g.constant(Tensor::new(vec![k, k], ad.clone()).unwrap());
        let wt = g.constant(Tensor::new(vec![c, c], wd.clone()).unwrap());
        let out = crn::graph_conv(&mut g, vt, at, wt).unwrap();
        for i in 0..k {
            for j in 0..c {
                let mut acc = 0.0;
                for l in 0..k {
                    let mut mixed = 0.0;
                    for cc in 0..c {
                        mixed += vd[l * c + cc] * wd[cc * c + j];
                    }
                    acc += ad[i * k + l] * mixed;
                }
                worst = worst.max((g.value(out).data()[i * c + j] - acc.max(0.0)).abs());
            }
        }

        // Weighted cosine metric against scalar arithmetic.
        let qd: Vec<f64> = (0..k * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sd: Vec<f64> = (0..k * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wv: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..0.95)).collect();
        let qt = g.constant(Tensor::new(vec![k, c], qd.clone()).unwrap());
        let st = g.constant(Tensor::new(vec![k, c], sd.clone()).unwrap());
        let wt = g.constant(Tensor::new(vec![1, k], wv.clone()).unwrap());
        if let Ok(sim) = metric::similarity(&mut g, qt, st, Some(wt)) {
            let cos = |a: &[f64], b: &[f64]| {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                dot / (na * nb)
            };
            let mut expect = 0.0;
            for i in 0..k {
                expect += wv[i] * cos(&qd[i * c..(i + 1) * c], &sd[i * c..(i + 1) * c]);
            }
            worst = worst.max((g.value(sim).item() - expect).abs());
        }
    }

    let pass = worst < 1e-10;
    report(
        "6 (oracle equivalence)",
        pass,
        &format!("worst deviation from scalar oracles {worst:.2e}"),
    );
}

// ---- criterion 7 --------------------------------------------------------

#[test]
fn criterion_7_end_to_end_learning() {
    let _g = lock();
    let start = Instant::now();
    let ds = desk_dataset();
    let cfg = TrainConfig {
        seed: 1,
        ..Default::default()
    };
    assert_eq!(cfg.episodes, 5000);
    assert_eq!((cfg.n_way, cfg.k_shot, cfg.queries), (5, 1, 16));
    let outcome = train::train(&cfg, ds).expect("training");
    assert!(outcome.aborted.is_none(), "training aborted: {:?}", outcome.aborted);
    let model_cfg = train::model_config(&cfg, ds.side);
    let reportt = evaluate(
        &outcome.checkpoint.params,
        &model_cfg,
        &ds.novel,
        5,
        1,
        16,
        1000,
        7,
    )
    .expect("evaluation");
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let pass = reportt.mean_acc >= 0.55 && minutes <= 30.0;
    report(
        "7 (end-to-end learning)",
        pass,
        &format!(
            "novel accuracy {:.1}% ± {:.1}% over 1000 episodes (chance 20%), {minutes:.1} min",
            reportt.mean_acc * 100.0,
            reportt.ci95 * 100.0
        ),
    );
}

// ---- criterion 8 --------------------------------------------------------

#[test]
fn criterion_8_ablation_direction() {
    let _g = lock();
    let ds = desk_dataset();
    let episodes = 2500u64;
    let eval_eps = 300usize;
    let mut means = BTreeMap::new();
    for (label, toggles) in [
        ("baseline", Toggles::baseline()),
        ("grouping", Toggles { ssj: false, acg: true, crn: false, tsw: false }),
        ("full", Toggles::full()),
    ] {
        let mut accs = Vec::new();
        for seed in [11u64, 12, 13] {
            let cfg = TrainConfig {
                episodes,
                toggles,
                seed,
                eval_interval: episodes,
                eval_episodes: 0,
                ..Default::default()
            };
            let outcome = train::train(&cfg, ds).expect("training");
            assert!(outcome.aborted.is_none());
            let model_cfg = train::model_config(&cfg, ds.side);
            let r = evaluate(
                &outcome.checkpoint.params,
                &model_cfg,
                &ds.novel,
                5,
                1,
                16,
                eval_eps,
                seed,
            )
            .expect("evaluation");
            accs.push(r.mean_acc);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        println!("  {label}: per-seed {accs:?} mean {mean:.4}");
        means.insert(label, mean);
    }
    let full = means["full"];
    let base = means["baseline"];
    let grouping = means["grouping"];
    let pass = full >= base + 0.03 && grouping >= base;
    report(
        "8 (ablation direction)",
        pass,
        &format!(
            "full {:.1}% vs baseline {:.1}% (margin {:+.1}pp, need ≥ +3), grouping {:.1}% ≥ baseline: {}",
            full * 100.0,
            base * 100.0,
            (full - base) * 100.0,
            grouping * 100.0,
            grouping >= base
        ),
    );
}

// ---- criterion 9 --------------------------------------------------------

#[test]
fn criterion_9_protocol_fidelity() {
    let _g = lock();
    let ds = desk_dataset();

    // Exactly 1000 episodes, ci = 1.96·σ/√1000 with the sample std.
    let r = evaluate_scores(&ds.novel, 5, 1, 16, 1000, 3, |tensors| {
        let n = tensors.n_way;
        let mut rng = rng_for(tensors.query_labels.len() as u64, 60);
        Ok((0..tensors.query_labels.len() * n)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect())
    })
    .unwrap();
    let mean = r.per_episode.iter().sum::<f64>() / 1000.0;
    let var = r.per_episode.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / 999.0;
    let expect_ci = 1.96 * var.sqrt() / (1000.0f64).sqrt();
    let ci_dev = (r.ci95 - expect_ci).abs();

    // Episode composition.
    let mut rng = rng_for(9, 61);
    let one_shot = sample_episode(&ds.novel, 5, 1, 16, &mut rng).unwrap();
    let five_shot = sample_episode(&ds.train, 5, 5, 16, &mut rng).unwrap();
    let comp_ok = one_shot.support.len() == 5
        && one_shot.query.len() == 80
        && five_shot.support.len() == 25
        && five_shot.query.len() == 80;

    // Defaults.
    let cfg = TrainConfig::default();
    let defaults_ok =
        cfg.k_primitives == 4 && cfg.lambda_div == 0.4 && cfg.alpha_ssl == 1.0 && cfg.lr == 0.001;

    let pass = r.episodes == 1000 && ci_dev < 1e-15 && comp_ok && defaults_ok;
    report(
        "9 (protocol fidelity)",
        pass,
        &format!(
            "episodes {}, ci formula dev {ci_dev:.1e}, composition 5+80/25+80: {comp_ok}, defaults k=4 λ=0.4 α=1.0 lr=0.001: {defaults_ok}",
            r.episodes
        ),
    );
}

// ---- criterion 10 -------------------------------------------------------

#[test]
fn criterion_10_determinism_and_persistence() {
    let _g = lock();
    // A smaller world keeps the double runs quick; the determinism contract
    // is configuration-independent.
    let pw = PartsWorldConfig {
        canvas: 48,
        classes_train: 6,
        classes_val: 5,
        classes_novel: 5,
        images_per_class: 10,
        part_size: 10,
        jitter: 12,
        noise_amp: 20,
        seed: 10,
        ..Default::default()
    };
    let (contents, manifest) = pmrn::data::partsworld::generate(&pw).unwrap();
    let ds = assemble_dataset(&contents, &manifest).unwrap();
    let cfg = TrainConfig {
        n_way: 3,
        k_shot: 1,
        queries: 4,
        episodes: 40,
        eval_interval: 10,
        eval_episodes: 8,
        seed: 21,
        ..Default::default()
    };

    let a = train::train(&cfg, &ds).unwrap();
    let b = train::train(&cfg, &ds).unwrap();
    let csv_identical = metrics_csv(&a.metrics) == metrics_csv(&b.metrics);

    // Interrupt at 20, persist, resume to 40: byte-identical checkpoint.
    let mut half_cfg = cfg.clone();
    half_cfg.episodes = 20;
    let half = train::train(&half_cfg, &ds).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.ckpt");
    checkpoint::save(&half.checkpoint, &path).unwrap();
    let mut restored = checkpoint::load(&path).unwrap();
    // Round-trip idempotence on the way through.
    let bytes_once = checkpoint::encode(&half.checkpoint);
    let bytes_twice = checkpoint::encode(&restored);
    restored.config.episodes = 40;
    let resumed = train::train_resume(restored, &ds).unwrap();
    let resume_identical =
        checkpoint::encode(&resumed.checkpoint) == checkpoint::encode(&a.checkpoint);

    let pass = csv_identical && bytes_once == bytes_twice && resume_identical;
    report(
        "10 (determinism & persistence)",
        pass,
        &format!(
            "metrics byte-identical: {csv_identical}, save/load idempotent: {}, resume ≡ uninterrupted: {resume_identical}",
            bytes_once == bytes_twice
        ),
    );
}
