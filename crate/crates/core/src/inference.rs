//! Exact sum-product and max-product message passing on one dependency
//! tree, with optional k-best belief pruning.
//!
//! Numerical stability comes from normalizing each belief and accumulating
//! the log normalizers, so pruning can rank raw coefficient magnitudes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::DepTree;
use crate::model::ModelParams;
use crate::tensor::normalize;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("tree/model dimension mismatch: {0}")]
    Dimension(String),
    #[error("belief at node {node} has no mass")]
    ZeroBelief { node: usize },
}

/// Switches the k-best belief pruning applied during upward passes. Pruning
/// with `keep_k >= N` is skipped outright, which keeps those runs
/// bit-identical to exact inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub enabled: bool,
    pub keep_k: usize,
}

impl ProjectionConfig {
    pub fn exact() -> ProjectionConfig {
        ProjectionConfig {
            enabled: false,
            keep_k: usize::MAX,
        }
    }

    pub fn k_best(keep_k: usize) -> ProjectionConfig {
        assert!(keep_k >= 1, "keep_k must be at least 1");
        ProjectionConfig {
            enabled: true,
            keep_k,
        }
    }

    pub fn active(&self, n: usize) -> bool {
        self.enabled && self.keep_k < n
    }
}

/// Per-tree message-passing workspace and results. Node k of the tree owns
/// row k everywhere; `edge_posterior(k)` is `None` for nodes attached to
/// the synthetic root, whose edge statistics are the node posterior itself.
#[derive(Debug, Clone)]
pub struct BeliefTable {
    /// Normalized belief per node: emission times children messages, pruned
    /// when projection is active.
    beliefs: Vec<Vec<f64>>,
    /// Message toward the parent; a single scalar for root-attached nodes.
    msgs: Vec<Vec<f64>>,
    /// Log normalizers absorbed while the beliefs were assembled.
    scaling: Vec<f64>,
    down: Vec<Vec<f64>>,
    node_post: Vec<Vec<f64>>,
    /// Row-major [child-state * N + parent-state], normalized.
    edge_post: Vec<Option<Vec<f64>>>,
    log_likelihood: f64,
    complete: bool,
}

impl BeliefTable {
    pub fn len(&self) -> usize {
        self.beliefs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beliefs.is_empty()
    }

    pub fn belief(&self, node: usize) -> &[f64] {
        &self.beliefs[node]
    }

    pub fn scaling(&self, node: usize) -> f64 {
        self.scaling[node]
    }

    pub fn log_likelihood(&self) -> f64 {
        self.log_likelihood
    }

    pub fn down_message(&self, node: usize) -> &[f64] {
        assert!(self.complete, "downward pass has not run");
        &self.down[node]
    }

    pub fn node_posterior(&self, node: usize) -> &[f64] {
        assert!(self.complete, "downward pass has not run");
        &self.node_post[node]
    }

    pub fn edge_posterior(&self, node: usize) -> Option<&[f64]> {
        assert!(self.complete, "downward pass has not run");
        self.edge_post[node].as_deref()
    }
}

fn check_dims(tree: &DepTree, params: &ModelParams) -> Result<(), InferenceError> {
    let meta = params.meta;
    for (k, node) in tree.nodes.iter().enumerate() {
        if node.word >= meta.v {
            return Err(InferenceError::Dimension(format!(
                "node {k} word id {} outside vocabulary of {}",
                node.word, meta.v
            )));
        }
        if node.func >= meta.s {
            return Err(InferenceError::Dimension(format!(
                "node {k} function id {} outside inventory of {}",
                node.func, meta.s
            )));
        }
    }
    Ok(())
}

/// Zeroes all but the `keep_k` largest entries (ties: larger value first,
/// then lower index) and returns the surviving mass.
fn prune_belief(belief: &mut [f64], keep_k: usize) -> f64 {
    let mut order: Vec<usize> = (0..belief.len()).collect();
    order.sort_unstable_by(|&a, &b| {
        belief[b]
            .partial_cmp(&belief[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    for &i in &order[keep_k..] {
        belief[i] = 0.0;
    }
    belief.iter().sum()
}

/// Leaves-to-root sweep. Fills beliefs, upward messages, scaling factors,
/// and the log-likelihood; posteriors need `downward_pass` on top.
pub fn upward_pass(
    tree: &DepTree,
    params: &ModelParams,
    proj: ProjectionConfig,
) -> Result<BeliefTable, InferenceError> {
    check_dims(tree, params)?;
    let n = params.meta.n;
    let k_total = tree.len();
    let (_, children) = tree.children();
    let order = tree.topo_order();

    let mut table = BeliefTable {
        beliefs: vec![Vec::new(); k_total],
        msgs: vec![Vec::new(); k_total],
        scaling: vec![0.0; k_total],
        down: Vec::new(),
        node_post: Vec::new(),
        edge_post: Vec::new(),
        log_likelihood: 0.0,
        complete: false,
    };

    let mut ll = 0.0;
    for &k in order.iter().rev() {
        let node = &tree.nodes[k];
        let mut belief = vec![0.0; n];
        for (c, b) in belief.iter_mut().enumerate() {
            *b = params.emit.at(node.word, c, node.func);
        }
        for &m in &children[k] {
            for (b, &mu) in belief.iter_mut().zip(&table.msgs[m]) {
                *b *= mu;
            }
        }
        let mass = normalize(&mut belief);
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(InferenceError::ZeroBelief { node: k });
        }
        let mut log_norm = mass.ln();
        if proj.active(n) {
            let kept = prune_belief(&mut belief, proj.keep_k);
            if !(kept > 0.0) {
                return Err(InferenceError::ZeroBelief { node: k });
            }
            for b in belief.iter_mut() {
                *b /= kept;
            }
            log_norm += kept.ln();
        }
        table.scaling[k] = log_norm;
        ll += log_norm;

        let msg = if node.parent == 0 {
            let col = params.root.col(0, node.func);
            let mass: f64 = col.iter().zip(&belief).map(|(t, b)| t * b).sum();
            ll += mass.ln();
            vec![mass]
        } else {
            let mut msg = vec![0.0; n];
            for (j, m) in msg.iter_mut().enumerate() {
                let col = params.trans.col(j, node.func);
                *m = col.iter().zip(&belief).map(|(t, b)| t * b).sum();
            }
            msg
        };
        table.beliefs[k] = belief;
        table.msgs[k] = msg;
    }
    table.log_likelihood = ll;
    Ok(table)
}

/// Root-to-leaves sweep filling down messages, node posteriors, and edge
/// posteriors, all consistent with whatever pruning shaped the beliefs.
pub fn downward_pass(
    table: &mut BeliefTable,
    tree: &DepTree,
    params: &ModelParams,
) -> Result<(), InferenceError> {
    assert_eq!(table.len(), tree.len(), "table built from a different tree");
    let n = params.meta.n;
    let k_total = tree.len();
    let (_, children) = tree.children();
    let order = tree.topo_order();

    let mut down = vec![Vec::new(); k_total];
    let mut node_post = vec![Vec::new(); k_total];
    let mut edge_post: Vec<Option<Vec<f64>>> = vec![None; k_total];

    for &p in &order {
        if tree.nodes[p].parent == 0 {
            down[p] = params.root.col(0, tree.nodes[p].func).to_vec();
        }

        let mut post: Vec<f64> = table.beliefs[p]
            .iter()
            .zip(&down[p])
            .map(|(b, d)| b * d)
            .collect();
        let mass = normalize(&mut post);
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(InferenceError::ZeroBelief { node: p });
        }
        node_post[p] = post;

        let ch = &children[p];
        if ch.is_empty() {
            continue;
        }

        // Parent-side factor excluding one child's message: emission times
        // down message times the other children's messages, masked to the
        // support of the (possibly pruned) belief.
        let node = &tree.nodes[p];
        let mut base = vec![0.0; n];
        for (j, x) in base.iter_mut().enumerate() {
            if table.beliefs[p][j] > 0.0 {
                *x = params.emit.at(node.word, j, node.func) * down[p][j];
            }
        }
        let mut prefix = vec![1.0; n];
        let mut excl = vec![vec![0.0; n]; ch.len()];
        for (ci, &m) in ch.iter().enumerate() {
            excl[ci].copy_from_slice(&prefix);
            for (x, &mu) in prefix.iter_mut().zip(&table.msgs[m]) {
                *x *= mu;
            }
        }
        let mut suffix = vec![1.0; n];
        for (ci, &m) in ch.iter().enumerate().rev() {
            for ((x, s), b) in excl[ci].iter_mut().zip(&suffix).zip(&base) {
                *x *= s * b;
            }
            for (s, &mu) in suffix.iter_mut().zip(&table.msgs[m]) {
                *s *= mu;
            }
        }

        for (ci, &m) in ch.iter().enumerate() {
            let func = tree.nodes[m].func;
            let mut d = vec![0.0; n];
            let mut edge = vec![0.0; n * n];
            for (j, &e) in excl[ci].iter().enumerate() {
                if e == 0.0 {
                    continue;
                }
                let col = params.trans.col(j, func);
                for i in 0..n {
                    let w = col[i] * e;
                    d[i] += w;
                    edge[i * n + j] = w * table.beliefs[m][i];
                }
            }
            let mass = normalize(&mut edge);
            if !(mass > 0.0 && mass.is_finite()) {
                return Err(InferenceError::ZeroBelief { node: m });
            }
            normalize(&mut d);
            down[m] = d;
            edge_post[m] = Some(edge);
        }
    }

    table.down = down;
    table.node_post = node_post;
    table.edge_post = edge_post;
    table.complete = true;
    Ok(())
}

/// Upward and downward passes in one call.
pub fn infer(
    tree: &DepTree,
    params: &ModelParams,
    proj: ProjectionConfig,
) -> Result<BeliefTable, InferenceError> {
    let mut table = upward_pass(tree, params, proj)?;
    downward_pass(&mut table, tree, params)?;
    Ok(table)
}

/// Exact log of the tree's marginal probability, summing out all state
/// assignments. Never prunes.
pub fn tree_log_likelihood(tree: &DepTree, params: &ModelParams) -> Result<f64, InferenceError> {
    Ok(upward_pass(tree, params, ProjectionConfig::exact())?.log_likelihood)
}

/// Single most probable joint state assignment, one state id per node.
/// Ties resolve toward the lowest state index at every choice point.
pub fn max_product_decode(
    tree: &DepTree,
    params: &ModelParams,
) -> Result<Vec<usize>, InferenceError> {
    check_dims(tree, params)?;
    let n = params.meta.n;
    let k_total = tree.len();
    let (roots, children) = tree.children();
    let order = tree.topo_order();

    // back[k][j]: best state for k given its parent in state j.
    let mut back: Vec<Vec<usize>> = vec![Vec::new(); k_total];
    let mut up: Vec<Vec<f64>> = vec![Vec::new(); k_total];

    for &k in order.iter().rev() {
        let node = &tree.nodes[k];
        let mut d = vec![0.0; n];
        for (c, x) in d.iter_mut().enumerate() {
            *x = params.emit.at(node.word, c, node.func).ln();
        }
        for &m in &children[k] {
            for (x, &u) in d.iter_mut().zip(&up[m]) {
                *x += u;
            }
        }
        if !d.iter().any(|x| x.is_finite()) {
            return Err(InferenceError::ZeroBelief { node: k });
        }

        if node.parent > 0 {
            let mut msg = vec![f64::NEG_INFINITY; n];
            let mut ptr = vec![0usize; n];
            for j in 0..n {
                let col = params.trans.col(j, node.func);
                for (c, (&t, &dc)) in col.iter().zip(&d).enumerate() {
                    let score = t.ln() + dc;
                    if score > msg[j] {
                        msg[j] = score;
                        ptr[j] = c;
                    }
                }
            }
            up[k] = msg;
            back[k] = ptr;
        } else {
            let col = params.root.col(0, node.func);
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0usize;
            for (c, (&t, &dc)) in col.iter().zip(&d).enumerate() {
                let score = t.ln() + dc;
                if score > best {
                    best = score;
                    arg = c;
                }
            }
            back[k] = vec![arg];
        }
    }

    let mut states = vec![0usize; k_total];
    let mut stack: Vec<usize> = roots.clone();
    for &r in &roots {
        states[r] = back[r][0];
    }
    while let Some(k) = stack.pop() {
        for &m in &children[k] {
            states[m] = back[m][states[k]];
            stack.push(m);
        }
    }
    Ok(states)
}
