//! Shared fixtures for integration tests: independent oracles coded as
//! plain loops (no reuse of the library's message-passing code) and
//! samplers for synthetic corpora.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use thmm_core::corpus::TreeNode;
use thmm_core::{DepTree, ModelMeta, ModelParams};

pub fn test_rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

/// Exhaustive enumeration over all N^K state assignments.
pub struct Oracle {
    pub log_likelihood: f64,
    pub node_post: Vec<Vec<f64>>,
    /// Row-major [child * N + parent]; None for root-attached nodes.
    pub edge_post: Vec<Option<Vec<f64>>>,
    pub best: Vec<usize>,
    pub best_log_prob: f64,
}

fn joint_prob(tree: &DepTree, params: &ModelParams, assign: &[usize]) -> f64 {
    let mut p = 1.0;
    for (k, node) in tree.nodes.iter().enumerate() {
        let c = assign[k];
        p *= params.emit.at(node.word, c, node.func);
        p *= match node.parent {
            0 => params.root.at(c, 0, node.func),
            q => params.trans.at(c, assign[q - 1], node.func),
        };
    }
    p
}

/// Brute-force marginals, likelihood, and argmax. Assignments enumerate
/// with node 0 as the most significant digit, so the first maximum found is
/// the lexicographically smallest maximizer.
pub fn enumerate(tree: &DepTree, params: &ModelParams) -> Oracle {
    let n = params.meta.n;
    let k = tree.len();
    let total_assignments = n.pow(k as u32);
    let mut assign = vec![0usize; k];

    let mut total = 0.0;
    let mut node_post = vec![vec![0.0; n]; k];
    let mut edge_post: Vec<Option<Vec<f64>>> = tree
        .nodes
        .iter()
        .map(|node| (node.parent > 0).then(|| vec![0.0; n * n]))
        .collect();
    let mut best = vec![0usize; k];
    let mut best_p = f64::NEG_INFINITY;

    for idx in 0..total_assignments {
        let mut rest = idx;
        for m in (0..k).rev() {
            assign[m] = rest % n;
            rest /= n;
        }
        let p = joint_prob(tree, params, &assign);
        total += p;
        for m in 0..k {
            node_post[m][assign[m]] += p;
        }
        for (m, node) in tree.nodes.iter().enumerate() {
            if node.parent > 0 {
                let cell = assign[m] * n + assign[node.parent - 1];
                edge_post[m].as_mut().unwrap()[cell] += p;
            }
        }
        if p > best_p {
            best_p = p;
            best.copy_from_slice(&assign);
        }
    }

    for post in &mut node_post {
        for x in post.iter_mut() {
            *x /= total;
        }
    }
    for edge in edge_post.iter_mut().flatten() {
        for x in edge.iter_mut() {
            *x /= total;
        }
    }
    Oracle {
        log_likelihood: total.ln(),
        node_post,
        edge_post,
        best,
        best_log_prob: best_p.ln(),
    }
}

/// Independent scaled forward-backward over a flat sequence. Position 0
/// starts from the root tensor; position k transitions from k-1 under the
/// function at k. Returns per-position posteriors and the log-likelihood.
pub fn chain_forward_backward(
    words: &[usize],
    funcs: &[usize],
    params: &ModelParams,
) -> (Vec<Vec<f64>>, f64) {
    let n = params.meta.n;
    let k = words.len();
    let mut alpha = vec![vec![0.0; n]; k];
    let mut scale = vec![0.0; k];

    for i in 0..n {
        alpha[0][i] = params.root.at(i, 0, funcs[0]) * params.emit.at(words[0], i, funcs[0]);
    }
    scale[0] = alpha[0].iter().sum();
    for x in alpha[0].iter_mut() {
        *x /= scale[0];
    }
    for t in 1..k {
        for i in 0..n {
            let mut a = 0.0;
            for j in 0..n {
                a += alpha[t - 1][j] * params.trans.at(i, j, funcs[t]);
            }
            alpha[t][i] = a * params.emit.at(words[t], i, funcs[t]);
        }
        scale[t] = alpha[t].iter().sum();
        for x in alpha[t].iter_mut() {
            *x /= scale[t];
        }
    }

    let mut beta = vec![vec![1.0; n]; k];
    for t in (0..k - 1).rev() {
        for j in 0..n {
            let mut b = 0.0;
            for i in 0..n {
                b += params.trans.at(i, j, funcs[t + 1])
                    * params.emit.at(words[t + 1], i, funcs[t + 1])
                    * beta[t + 1][i];
            }
            beta[t][j] = b / scale[t + 1];
        }
    }

    let mut post = vec![vec![0.0; n]; k];
    for t in 0..k {
        let mut sum = 0.0;
        for i in 0..n {
            post[t][i] = alpha[t][i] * beta[t][i];
            sum += post[t][i];
        }
        for x in post[t].iter_mut() {
            *x /= sum;
        }
    }
    (post, scale.iter().map(|c| c.ln()).sum())
}

/// Random topology with parents drawn before children: node i attaches
/// uniformly to the root or any earlier node.
pub fn random_tree(rng: &mut impl Rng, id: usize, k: usize, v: usize, s: usize) -> DepTree {
    let nodes = (0..k)
        .map(|i| TreeNode {
            word: rng.gen_range(0..v),
            func: rng.gen_range(0..s),
            parent: rng.gen_range(0..=i),
        })
        .collect();
    DepTree {
        sentence_id: id,
        nodes,
    }
}

fn sample_index(rng: &mut impl Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Draws one tree from the model: random shape, then states top-down, then
/// words from the sampled states.
pub fn sample_tree(params: &ModelParams, rng: &mut impl Rng, id: usize, k: usize) -> DepTree {
    let meta = params.meta;
    let mut nodes: Vec<TreeNode> = Vec::with_capacity(k);
    let mut states: Vec<usize> = Vec::with_capacity(k);
    for i in 0..k {
        let parent = rng.gen_range(0..=i);
        let func = rng.gen_range(0..meta.s);
        let state = if parent == 0 {
            sample_index(rng, params.root.col(0, func))
        } else {
            sample_index(rng, params.trans.col(states[parent - 1], func))
        };
        let word = sample_index(rng, params.emit.col(state, func));
        states.push(state);
        nodes.push(TreeNode { word, func, parent });
    }
    DepTree {
        sentence_id: id,
        nodes,
    }
}

pub fn sample_corpus(
    params: &ModelParams,
    rng: &mut impl Rng,
    n_trees: usize,
    len_lo: usize,
    len_hi: usize,
) -> Vec<DepTree> {
    (0..n_trees)
        .map(|id| {
            let k = rng.gen_range(len_lo..=len_hi);
            sample_tree(params, rng, id, k)
        })
        .collect()
}

/// Generating model with block-structured emissions (each state owns an
/// equal share of the vocabulary, identical across functions) and
/// concentrated transitions, optionally different per function.
pub fn concentrated_model(
    n: usize,
    v: usize,
    s: usize,
    seed: u64,
    func_dependent_trans: bool,
) -> ModelParams {
    let meta = ModelMeta::new(n, v, s, seed);
    let mut params = ModelParams::zeros(meta);
    let mut rng = test_rng(seed ^ 0x9e3779b97f4a7c15);

    let block = v / n;
    assert!(block >= 1, "need at least one word per state");
    for j in 0..n {
        let col: Vec<f64> = (0..v)
            .map(|w| {
                let owned = w / block == j || (j == n - 1 && w / block >= n);
                if owned {
                    5.0 + rng.gen::<f64>()
                } else {
                    0.05 + 0.05 * rng.gen::<f64>()
                }
            })
            .collect();
        for l in 0..s {
            params.emit.col_mut(j, l).copy_from_slice(&col);
        }
    }

    for l in 0..s {
        for j in 0..n {
            let favored = if func_dependent_trans {
                (j + l + 1) % n
            } else {
                (j + 1) % n
            };
            let col = params.trans.col_mut(j, l);
            for (i, x) in col.iter_mut().enumerate() {
                *x = if i == favored { 0.85 } else { 0.15 / (n - 1) as f64 };
            }
        }
        params.root.col_mut(0, l).fill(1.0 / n as f64);
    }
    params.emit.normalize_cols();
    params
}

/// Largest absolute deviation between the library's inference outputs and
/// the enumeration oracle, plus whether the hard decodes agree.
pub struct OracleComparison {
    pub max_abs: f64,
    pub decode_match: bool,
}

pub fn compare_with_oracle(tree: &DepTree, params: &ModelParams) -> OracleComparison {
    use thmm_core::inference::{infer, max_product_decode, ProjectionConfig};

    let oracle = enumerate(tree, params);
    let table = infer(tree, params, ProjectionConfig::exact()).unwrap();
    let mut dev: f64 = (table.log_likelihood() - oracle.log_likelihood).abs();
    for k in 0..tree.len() {
        for (a, b) in table.node_posterior(k).iter().zip(&oracle.node_post[k]) {
            dev = dev.max((a - b).abs());
        }
        match (table.edge_posterior(k), &oracle.edge_post[k]) {
            (Some(edge), Some(expected)) => {
                for (a, b) in edge.iter().zip(expected) {
                    dev = dev.max((a - b).abs());
                }
            }
            (None, None) => {}
            _ => panic!("edge posterior presence mismatch at node {k}"),
        }
    }
    let decoded = max_product_decode(tree, params).unwrap();
    OracleComparison {
        max_abs: dev,
        decode_match: decoded == oracle.best,
    }
}
