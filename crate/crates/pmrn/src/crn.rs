//! Correlation reasoning over primitive nodes.
//!
//! Pooled primitives become nodes of a fully connected graph; a learned
//! row-normalized adjacency mixes them through stacked graph-convolution
//! layers with residual connections, so zeroed layer weights reduce the
//! whole stack to the identity.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{lecun_uniform, ParamSet};
use crate::tensor::{Graph, TensorId};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CrnConfig {
    /// Projection width used by the adjacency scores.
    pub embed_dim: usize,
    /// Number of stacked graph-convolution layers.
    pub layers: usize,
}

impl CrnConfig {
    /// Half-width projections, two layers.
    pub fn for_channels(channels: usize) -> Self {
        CrnConfig {
            embed_dim: (channels / 2).max(1),
            layers: 2,
        }
    }
}

pub struct CrnNodes {
    pub theta: TensorId,
    pub phi: TensorId,
    pub omegas: Vec<TensorId>,
}

pub fn theta_name() -> &'static str {
    "crn.theta"
}

pub fn phi_name() -> &'static str {
    "crn.phi"
}

pub fn omega_name(layer: usize) -> String {
    format!("crn.layer{layer}.weight")
}

pub fn init_crn_into(
    params: &mut ParamSet,
    channels: usize,
    cfg: CrnConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    if cfg.embed_dim == 0 || cfg.layers == 0 {
        return Err(Error::InvalidConfig(format!(
            "graph reasoning needs positive dims, got embed {} layers {}",
            cfg.embed_dim, cfg.layers
        )));
    }
    params.insert(theta_name(), lecun_uniform(rng, &[channels, cfg.embed_dim], channels));
    params.insert(phi_name(), lecun_uniform(rng, &[channels, cfg.embed_dim], channels));
    for l in 0..cfg.layers {
        params.insert(omega_name(l), lecun_uniform(rng, &[channels, channels], channels));
    }
    Ok(())
}

pub fn bind_crn(g: &mut Graph, params: &ParamSet, layers: usize, trainable: bool) -> Result<CrnNodes> {
    let theta = params
        .get(theta_name())
        .ok_or_else(|| Error::InvalidConfig("missing crn.theta".into()))?
        .clone();
    let phi = params
        .get(phi_name())
        .ok_or_else(|| Error::InvalidConfig("missing crn.phi".into()))?
        .clone();
    let mut omegas = Vec::with_capacity(layers);
    for l in 0..layers {
        let w = params
            .get(&omega_name(l))
            .ok_or_else(|| Error::InvalidConfig(format!("missing {}", omega_name(l))))?
            .clone();
        omegas.push(g.leaf(w, trainable));
    }
    Ok(CrnNodes {
        theta: g.leaf(theta, trainable),
        phi: g.leaf(phi, trainable),
        omegas,
    })
}

/// Pooled primitives as node rows: `[k,C,H,W] -> [k,C]`.
pub fn node_embeddings(g: &mut Graph, primitives: TensorId) -> Result<TensorId> {
    g.global_avg_pool(primitives)
}

/// Row-stochastic adjacency from projected dot-product scores.
pub fn adjacency(g: &mut Graph, v: TensorId, theta: TensorId, phi: TensorId) -> Result<TensorId> {
    let a = g.matmul(v, theta)?;
    let b = g.matmul(v, phi)?;
    let bt = g.transpose(b)?;
    let scores = g.matmul(a, bt)?;
    g.softmax(scores, 1)
}

/// One graph-convolution layer: `relu(adj · v · w)`.
pub fn graph_conv(g: &mut Graph, v: TensorId, adj: TensorId, omega: TensorId) -> Result<TensorId> {
    let mixed = g.matmul(adj, v)?;
    let projected = g.matmul(mixed, omega)?;
    g.relu(projected)
}

/// Stacked layers with residual connections; the adjacency is recomputed
/// from the current node matrix at every layer.
pub fn reason(g: &mut Graph, v: TensorId, nodes: &CrnNodes) -> Result<TensorId> {
    let mut cur = v;
    for omega in &nodes.omegas {
        let adj = adjacency(g, cur, nodes.theta, nodes.phi)?;
        let refined = graph_conv(g, cur, adj, *omega)?;
        cur = g.add(refined, cur)?;
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::rng_for;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::Rng;

    fn eye(n: usize) -> Tensor {
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            d[i * n + i] = 1.0;
        }
        Tensor::new(vec![n, n], d).unwrap()
    }

    #[test]
    fn hand_computed_adjacency() {
        let mut g = Graph::new();
        let v = g.constant(eye(2));
        let th = g.constant(eye(2));
        let ph = g.constant(eye(2));
        let adj = adjacency(&mut g, v, th, ph).unwrap();
        let e = std::f64::consts::E;
        let hi = e / (e + 1.0);
        let lo = 1.0 / (e + 1.0);
        let got = g.value(adj).data();
        for (a, b) in got.iter().zip(&[hi, lo, lo, hi]) {
            assert!((a - b).abs() < 1e-12, "{got:?}");
        }
    }

    #[test]
    fn identical_rows_give_uniform_adjacency() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::new(vec![3, 4], [1.0, -0.5, 2.0, 0.25].repeat(3)).unwrap());
        let mut rng = rng_for(1, 0);
        let th = g.constant(Tensor::new(vec![4, 2], (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap());
        let ph = g.constant(Tensor::new(vec![4, 2], (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap());
        let adj = adjacency(&mut g, v, th, ph).unwrap();
        for &p in g.value(adj).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_layer_passes_nonnegative_nodes_through() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::new(vec![2, 3], vec![0.5, 1.0, 0.0, 2.0, 0.25, 3.0]).unwrap());
        let adj = g.constant(eye(2));
        let omega = g.constant(eye(3));
        let out = graph_conv(&mut g, v, adj, omega).unwrap();
        assert_eq!(g.value(out).data(), g.value(v).data());
    }

    #[test]
    fn uniform_adjacency_over_identical_rows_keeps_rows_equal() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 1.0, 2.0]).unwrap());
        let adj = g.constant(Tensor::new(vec![2, 2], vec![0.5; 4]).unwrap());
        let mut rng = rng_for(2, 0);
        let omega = g.constant(Tensor::new(vec![2, 2], (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap());
        let out = graph_conv(&mut g, v, adj, omega).unwrap();
        let d = g.value(out).data();
        assert_eq!(d[..2], d[2..]);
    }

    #[test]
    fn graph_conv_matches_triple_loop() {
        let mut rng = rng_for(3, 0);
        let (k, c) = (3usize, 4usize);
        let v: Vec<f64> = (0..k * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a: Vec<f64> = (0..k * k).map(|_| rng.random_range(0.0..1.0)).collect();
        let w: Vec<f64> = (0..c * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let vt = g.constant(Tensor::new(vec![k, c], v.clone()).unwrap());
        let at = g.constant(Tensor::new(vec![k, k], a.clone()).unwrap());
        let wt = g.constant(Tensor::new(vec![c, c], w.clone()).unwrap());
        let out = graph_conv(&mut g, vt, at, wt).unwrap();

        let mut mixed = vec![0.0; k * c];
        for i in 0..k {
            for j in 0..c {
                for l in 0..k {
                    mixed[i * c + j] += a[i * k + l] * v[l * c + j];
                }
            }
        }
        let mut expect = vec![0.0; k * c];
        for i in 0..k {
            for j in 0..c {
                let mut acc = 0.0;
                for l in 0..c {
                    acc += mixed[i * c + l] * w[l * c + j];
                }
                expect[i * c + j] = acc.max(0.0);
            }
        }
        for (got, want) in g.value(out).data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_layer_weights_make_reason_the_identity() {
        let mut params = ParamSet::new();
        init_crn_into(&mut params, 4, CrnConfig { embed_dim: 2, layers: 2 }, &mut rng_for(4, 0)).unwrap();
        params.insert(omega_name(0), Tensor::zeros(&[4, 4]));
        params.insert(omega_name(1), Tensor::zeros(&[4, 4]));
        let mut g = Graph::new();
        let nodes = bind_crn(&mut g, &params, 2, false).unwrap();
        let v = g.constant(Tensor::new(vec![3, 4], (0..12).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap());
        let out = reason(&mut g, v, &nodes).unwrap();
        assert_eq!(g.value(out).data(), g.value(v).data());
    }

    #[test]
    fn reason_is_deterministic_and_permutation_equivariant() {
        let mut params = ParamSet::new();
        init_crn_into(&mut params, 4, CrnConfig { embed_dim: 2, layers: 2 }, &mut rng_for(5, 0)).unwrap();
        let mut rng = rng_for(6, 0);
        let vd: Vec<f64> = (0..3 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let run = |rows: &[usize]| {
            let mut g = Graph::new();
            let nodes = bind_crn(&mut g, &params, 2, false).unwrap();
            let mut data = Vec::new();
            for &r in rows {
                data.extend_from_slice(&vd[r * 4..(r + 1) * 4]);
            }
            let v = g.constant(Tensor::new(vec![3, 4], data).unwrap());
            let out = reason(&mut g, v, &nodes).unwrap();
            g.value(out).data().to_vec()
        };
        let base = run(&[0, 1, 2]);
        assert_eq!(base, run(&[0, 1, 2]));
        // Relabeling nodes reorders the f64 contractions, so rows match to
        // rounding, not bit-for-bit.
        let close = |a: &[f64], b: &[f64]| {
            a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
        };
        let perm = run(&[2, 0, 1]);
        assert!(close(&perm[..4], &base[8..]));
        assert!(close(&perm[4..8], &base[..4]));
        assert!(close(&perm[8..], &base[4..8]));
    }

    proptest! {
        #[test]
        fn adjacency_rows_are_probability_vectors(seed in 0u64..1000) {
            let mut rng = rng_for(seed, 7);
            let k = rng.random_range(2..6usize);
            let c = rng.random_range(2..8usize);
            let ce = rng.random_range(1..5usize);
            // Moderate magnitudes: scores far from the ±745 exp underflow
            // cliff keep every softmax entry strictly positive.
            let vd: Vec<f64> = (0..k * c).map(|_| rng.random_range(-1.0..1.0)).collect();
            let td: Vec<f64> = (0..c * ce).map(|_| rng.random_range(-0.5..0.5)).collect();
            let pd: Vec<f64> = (0..c * ce).map(|_| rng.random_range(-0.5..0.5)).collect();
            let mut g = Graph::new();
            let v = g.constant(Tensor::new(vec![k, c], vd).unwrap());
            let th = g.constant(Tensor::new(vec![c, ce], td).unwrap());
            let ph = g.constant(Tensor::new(vec![c, ce], pd).unwrap());
            let adj = adjacency(&mut g, v, th, ph).unwrap();
            for row in g.value(adj).data().chunks(k) {
                let sum: f64 = row.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-9);
                prop_assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
            }
        }
    }
}
