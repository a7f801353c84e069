//! CoNLL ingestion: parsing, length filtering, vocabulary and
//! syntactic-function inventories, and integer-encoded dependency trees.

use std::collections::HashMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const OOV_FORM: &str = "<unk>";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: expected at least {needed} tab-separated columns, found {found}")]
    MalformedLine {
        line: usize,
        needed: usize,
        found: usize,
    },
    #[error("line {line}: head column is not a non-negative integer: {value:?}")]
    BadHead { line: usize, value: String },
    #[error("sentence {sentence}: head index {head} out of range for {len} tokens")]
    HeadOutOfRange {
        sentence: usize,
        head: usize,
        len: usize,
    },
    #[error("sentence {sentence}: head structure is not a tree ({detail})")]
    Structural { sentence: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which 1-based CoNLL columns carry the surface form, head index, and
/// dependency relation. Defaults to CoNLL-X (form=2, head=7, deprel=8).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ColumnMap {
    pub form: usize,
    pub head: usize,
    pub deprel: usize,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            form: 2,
            head: 7,
            deprel: 8,
        }
    }
}

impl ColumnMap {
    fn max_col(&self) -> usize {
        self.form.max(self.head).max(self.deprel)
    }
}

#[derive(Debug, Clone)]
pub struct RawToken {
    pub form: String,
    /// 0-based index of the head token; `None` when attached to the root.
    pub head: Option<usize>,
    pub deprel: String,
}

#[derive(Debug, Clone)]
pub struct RawSentence {
    pub id: usize,
    pub tokens: Vec<RawToken>,
}

impl RawSentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Reads tab-separated CoNLL with blank-line sentence separators. The head
/// column is 1-based in the file with 0 marking the root.
pub fn parse_conll<R: BufRead>(
    reader: R,
    columns: &ColumnMap,
) -> Result<Vec<RawSentence>, CorpusError> {
    let needed = columns.max_col();
    let mut sentences = Vec::new();
    let mut block: Vec<(usize, String, usize, String)> = Vec::new();

    let flush = |block: &mut Vec<(usize, String, usize, String)>,
                     sentences: &mut Vec<RawSentence>|
     -> Result<(), CorpusError> {
        if block.is_empty() {
            return Ok(());
        }
        let id = sentences.len();
        let len = block.len();
        let mut tokens = Vec::with_capacity(len);
        for (line, form, head, deprel) in block.drain(..) {
            let head = if head == 0 {
                None
            } else if head <= len {
                Some(head - 1)
            } else {
                let _ = line;
                return Err(CorpusError::HeadOutOfRange {
                    sentence: id,
                    head,
                    len,
                });
            };
            tokens.push(RawToken {
                form,
                head,
                deprel,
            });
        }
        sentences.push(RawSentence { id, tokens });
        Ok(())
    };

    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            flush(&mut block, &mut sentences)?;
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < needed {
            return Err(CorpusError::MalformedLine {
                line: lineno,
                needed,
                found: fields.len(),
            });
        }
        let head_str = fields[columns.head - 1];
        let head: usize = head_str.parse().map_err(|_| CorpusError::BadHead {
            line: lineno,
            value: head_str.to_string(),
        })?;
        block.push((
            lineno,
            fields[columns.form - 1].to_string(),
            head,
            fields[columns.deprel - 1].to_string(),
        ));
    }
    flush(&mut block, &mut sentences)?;
    Ok(sentences)
}

/// Keeps exactly the sentences with `min_len < K < max_len`, preserving order.
pub fn filter_sentences(
    sentences: Vec<RawSentence>,
    min_len: usize,
    max_len: usize,
) -> Vec<RawSentence> {
    assert!(min_len <= max_len, "min_len must not exceed max_len");
    sentences
        .into_iter()
        .filter(|s| s.len() > min_len && s.len() < max_len)
        .collect()
}

/// Frozen surface-form table. Forms below the frequency threshold fold to a
/// single reserved id, which is always the last id.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    forms: Vec<String>,
    index: HashMap<String, usize>,
    oov_id: usize,
    pub min_count: u64,
}

impl Vocabulary {
    /// Builds the table from corpus counts. Ids are assigned in descending
    /// frequency with lexicographic tie-break, so identical corpora yield
    /// identical tables.
    pub fn build(sentences: &[RawSentence], min_count: u64) -> Vocabulary {
        assert!(min_count >= 1, "min_count must be at least 1");
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for s in sentences {
            for t in &s.tokens {
                *counts.entry(t.form.as_str()).or_insert(0) += 1;
            }
        }
        let mut retained: Vec<(&str, u64)> = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_count)
            .collect();
        retained.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut forms: Vec<String> = retained.into_iter().map(|(f, _)| f.to_string()).collect();
        let oov_id = forms.len();
        forms.push(OOV_FORM.to_string());
        let index = forms
            .iter()
            .take(oov_id)
            .enumerate()
            .map(|(i, f)| (f.clone(), i))
            .collect();
        Vocabulary {
            forms,
            index,
            oov_id,
            min_count,
        }
    }

    /// Rebuilds a vocabulary from an id-ordered form list (the sidecar
    /// representation); the last entry is the reserved unknown symbol.
    pub fn from_forms(forms: Vec<String>, min_count: u64) -> Vocabulary {
        assert!(!forms.is_empty(), "form list must contain the oov entry");
        let oov_id = forms.len() - 1;
        let index = forms
            .iter()
            .take(oov_id)
            .enumerate()
            .map(|(i, f)| (f.clone(), i))
            .collect();
        Vocabulary {
            forms,
            index,
            oov_id,
            min_count,
        }
    }

    /// Number of ids including the reserved unknown id.
    pub fn len(&self) -> usize {
        self.forms.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn oov_id(&self) -> usize {
        self.oov_id
    }

    pub fn encode(&self, form: &str) -> usize {
        self.index.get(form).copied().unwrap_or(self.oov_id)
    }

    pub fn decode(&self, id: usize) -> &str {
        &self.forms[id]
    }

    pub fn forms(&self) -> &[String] {
        &self.forms
    }
}

/// Retained syntactic-function labels plus a reserved id that absorbs every
/// other label. Labels on the exclusion list are treated as function markers
/// and never retained; matching is case-insensitive.
#[derive(Debug, Clone)]
pub struct SynFuncInventory {
    labels: Vec<String>,
    index: HashMap<String, usize>,
    excluded: Vec<String>,
}

impl SynFuncInventory {
    pub fn build(sentences: &[RawSentence], top_k: usize, excluded: &[String]) -> SynFuncInventory {
        let excl: Vec<String> = excluded.iter().map(|e| e.to_lowercase()).collect();
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for s in sentences {
            for t in &s.tokens {
                if !excl.contains(&t.deprel.to_lowercase()) {
                    *counts.entry(t.deprel.as_str()).or_insert(0) += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(top_k);

        let labels: Vec<String> = ranked.into_iter().map(|(l, _)| l.to_string()).collect();
        let index = labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect();
        SynFuncInventory {
            labels,
            index,
            excluded: excl,
        }
    }

    pub fn from_labels(labels: Vec<String>, excluded: Vec<String>) -> SynFuncInventory {
        let index = labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect();
        SynFuncInventory {
            labels,
            index,
            excluded: excluded.iter().map(|e| e.to_lowercase()).collect(),
        }
    }

    /// Total number of function ids, retained labels plus the reserved one.
    pub fn len(&self) -> usize {
        self.labels.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn other_id(&self) -> usize {
        self.labels.len()
    }

    pub fn encode(&self, label: &str) -> usize {
        self.index.get(label).copied().unwrap_or_else(|| self.other_id())
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn excluded(&self) -> &[String] {
        &self.excluded
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    /// Parent structure copied from the dependency heads.
    Tree,
    /// Parent of node k is node k-1; realizes the sequential baseline, so
    /// every function id collapses to the reserved one.
    Chain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TreeNode {
    pub word: usize,
    pub func: usize,
    /// 0 is the synthetic root; otherwise the 1-based index of the head node.
    pub parent: usize,
}

/// One integer-encoded sentence. Node indices are 1-based with 0 reserved
/// for the synthetic root; `nodes[k]` is node k+1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepTree {
    pub sentence_id: usize,
    pub nodes: Vec<TreeNode>,
}

impl DepTree {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Child lists per node, indexed like `nodes`; `root_children` are the
    /// nodes attached to the synthetic root. Lists follow node order.
    pub fn children(&self) -> (Vec<usize>, Vec<Vec<usize>>) {
        let mut root_children = Vec::new();
        let mut children = vec![Vec::new(); self.nodes.len()];
        for (k, node) in self.nodes.iter().enumerate() {
            if node.parent == 0 {
                root_children.push(k);
            } else {
                children[node.parent - 1].push(k);
            }
        }
        (root_children, children)
    }

    /// Node indices ordered parents-before-children.
    pub fn topo_order(&self) -> Vec<usize> {
        let (roots, children) = self.children();
        let mut order = Vec::with_capacity(self.nodes.len());
        let mut stack: Vec<usize> = roots.into_iter().rev().collect();
        while let Some(k) = stack.pop() {
            order.push(k);
            for &c in children[k].iter().rev() {
                stack.push(c);
            }
        }
        order
    }
}

/// Resolves a sentence against the frozen tables. Tree topology copies the
/// head structure; chain topology strings the tokens left to right under the
/// root with every function folded to the reserved id.
pub fn encode_tree(
    sentence: &RawSentence,
    vocab: &Vocabulary,
    inventory: &SynFuncInventory,
    topology: Topology,
) -> Result<DepTree, CorpusError> {
    let k = sentence.len();
    let nodes: Vec<TreeNode> = match topology {
        Topology::Chain => sentence
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| TreeNode {
                word: vocab.encode(&t.form),
                func: inventory.other_id(),
                parent: i,
            })
            .collect(),
        Topology::Tree => sentence
            .tokens
            .iter()
            .map(|t| TreeNode {
                word: vocab.encode(&t.form),
                func: inventory.encode(&t.deprel),
                parent: t.head.map(|h| h + 1).unwrap_or(0),
            })
            .collect(),
    };

    for node in &nodes {
        if node.parent > k {
            return Err(CorpusError::HeadOutOfRange {
                sentence: sentence.id,
                head: node.parent,
                len: k,
            });
        }
    }

    let tree = DepTree {
        sentence_id: sentence.id,
        nodes,
    };
    // Every node must be reachable from the synthetic root exactly once;
    // anything unreachable sits on a cycle or under one.
    let visited = tree.topo_order().len();
    if visited != k {
        return Err(CorpusError::Structural {
            sentence: sentence.id,
            detail: format!("{} of {} nodes reachable from root", visited, k),
        });
    }
    Ok(tree)
}
