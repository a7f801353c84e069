//! Word representations extracted from a trained model: per-token posterior
//! vectors, per-type averages over all occurrences, and hard state labels,
//! plus the standard text export formats.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};

use rayon::prelude::*;

use crate::corpus::{DepTree, RawSentence, Vocabulary};
use crate::inference::{infer, max_product_decode, InferenceError, ProjectionConfig};
use crate::model::ModelParams;

/// Posterior state distribution of one token occurrence. `token_index` is
/// 1-based, matching CoNLL numbering.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRep {
    pub sentence_id: usize,
    pub token_index: usize,
    pub word_id: usize,
    pub vector: Vec<f64>,
}

/// Mean posterior per word type with its occurrence count.
#[derive(Debug, Clone, PartialEq)]
pub struct TypeRep {
    pub vector: Vec<f64>,
    pub count: u64,
}

/// Word-id keyed table of type vectors, iterable in id order. Covers every
/// word id observed in the aggregation corpus, the unknown id included.
#[derive(Debug, Clone, Default)]
pub struct TypeRepTable {
    entries: BTreeMap<usize, TypeRep>,
    states: usize,
}

impl TypeRepTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Width of the vectors, i.e. the model's state count.
    pub fn states(&self) -> usize {
        self.states
    }

    pub fn get(&self, word_id: usize) -> Option<&TypeRep> {
        self.entries.get(&word_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &TypeRep)> {
        self.entries.iter().map(|(&w, r)| (w, r))
    }
}

/// Posterior vectors for every node of one tree, exact by default (pass an
/// active projection only to reproduce training-time approximations).
pub fn post_token(
    tree: &DepTree,
    params: &ModelParams,
    proj: ProjectionConfig,
) -> Result<Vec<TokenRep>, InferenceError> {
    let table = infer(tree, params, proj)?;
    Ok(tree
        .nodes
        .iter()
        .enumerate()
        .map(|(k, node)| TokenRep {
            sentence_id: tree.sentence_id,
            token_index: k + 1,
            word_id: node.word,
            vector: table.node_posterior(k).to_vec(),
        })
        .collect())
}

fn neumaier_add(sum: &mut f64, comp: &mut f64, x: f64) {
    let t = *sum + x;
    if sum.abs() >= x.abs() {
        *comp += (*sum - t) + x;
    } else {
        *comp += (x - t) + *sum;
    }
    *sum = t;
}

/// Trees processed per parallel window; accumulation stays in tree order.
const EXTRACT_CHUNK: usize = 32;

/// Unweighted mean of all token vectors per word type. Compensated
/// accumulation makes the result insensitive to corpus order well below
/// the documented 1e-10 tolerance.
pub fn post_type(
    corpus: &[DepTree],
    params: &ModelParams,
    proj: ProjectionConfig,
) -> Result<TypeRepTable, InferenceError> {
    let n = params.meta.n;
    let mut sums: BTreeMap<usize, (Vec<f64>, Vec<f64>, u64)> = BTreeMap::new();
    for chunk in corpus.chunks(EXTRACT_CHUNK) {
        let batches: Vec<Vec<TokenRep>> = chunk
            .par_iter()
            .map(|tree| post_token(tree, params, proj))
            .collect::<Result<_, _>>()?;
        for reps in &batches {
            for rep in reps {
                let (sum, comp, count) = sums
                    .entry(rep.word_id)
                    .or_insert_with(|| (vec![0.0; n], vec![0.0; n], 0));
                for ((s, c), &x) in sum.iter_mut().zip(comp.iter_mut()).zip(&rep.vector) {
                    neumaier_add(s, c, x);
                }
                *count += 1;
            }
        }
    }
    let entries = sums
        .into_iter()
        .map(|(word, (sum, comp, count))| {
            let vector = sum
                .iter()
                .zip(&comp)
                .map(|(s, c)| (s + c) / count as f64)
                .collect();
            (word, TypeRep { vector, count })
        })
        .collect();
    Ok(TypeRepTable { entries, states: n })
}

/// Hard state assignment per token, one vector of state ids per tree.
pub fn decode_labels(
    corpus: &[DepTree],
    params: &ModelParams,
) -> Result<Vec<Vec<usize>>, InferenceError> {
    let mut out = Vec::with_capacity(corpus.len());
    for chunk in corpus.chunks(EXTRACT_CHUNK) {
        let decoded: Vec<Vec<usize>> = chunk
            .par_iter()
            .map(|tree| max_product_decode(tree, params))
            .collect::<Result<_, _>>()?;
        out.extend(decoded);
    }
    Ok(out)
}

/// Formats with six significant digits and no trailing zero padding, so
/// 0.25 stays "0.25".
pub fn fmt_sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let d = v.abs().log10().floor() as i32;
    let factor = 10f64.powi(5 - d);
    format!("{}", (v * factor).round() / factor)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    /// Header "<#types> <N>", then "word v1 .. vN" per line.
    TextVec,
    /// Same shape, tab-separated, with the occurrence count inserted
    /// between the word and its vector.
    Tsv,
}

/// Writes the table in word-id order under the vocabulary's spellings.
pub fn export_type_reps<W: Write>(
    table: &TypeRepTable,
    vocab: &Vocabulary,
    format: ExportFormat,
    mut w: W,
) -> io::Result<()> {
    let sep = match format {
        ExportFormat::TextVec => ' ',
        ExportFormat::Tsv => '\t',
    };
    writeln!(w, "{}{sep}{}", table.len(), table.states())?;
    for (word, rep) in table.iter() {
        write!(w, "{}", vocab.decode(word))?;
        if format == ExportFormat::Tsv {
            write!(w, "{sep}{}", rep.count)?;
        }
        for &v in &rep.vector {
            write!(w, "{sep}{}", fmt_sig6(v))?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Reads the text-vec format back: (form, vector) pairs in file order.
pub fn read_type_reps<R: BufRead>(r: R) -> io::Result<Vec<(String, Vec<f64>)>> {
    let bad = |line: usize, what: &str| {
        io::Error::new(
            io::ErrorKind::InvalidData,
            format!("line {line}: {what}"),
        )
    };
    let mut lines = r.lines();
    let header = lines.next().ok_or_else(|| bad(1, "missing header"))??;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|f| f.parse())
        .collect::<Result<_, _>>()
        .map_err(|_| bad(1, "bad header"))?;
    if dims.len() != 2 {
        return Err(bad(1, "header needs two fields"));
    }
    let mut out = Vec::with_capacity(dims[0]);
    for (idx, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let word = fields.next().ok_or_else(|| bad(idx + 2, "empty row"))?;
        let vector: Vec<f64> = fields
            .map(|f| f.parse())
            .collect::<Result<_, _>>()
            .map_err(|_| bad(idx + 2, "bad number"))?;
        if vector.len() != dims[1] {
            return Err(bad(idx + 2, "wrong vector width"));
        }
        out.push((word.to_string(), vector));
    }
    Ok(out)
}

/// CoNLL-X rows with the decoded state appended as an eleventh column.
pub fn write_conll_states<W: Write>(
    sentences: &[RawSentence],
    states: &[Vec<usize>],
    mut w: W,
) -> io::Result<()> {
    assert_eq!(sentences.len(), states.len(), "one state row per sentence");
    for (sentence, row) in sentences.iter().zip(states) {
        assert_eq!(sentence.len(), row.len(), "one state per token");
        for (i, (token, &state)) in sentence.tokens.iter().zip(row).enumerate() {
            let head = token.head.map(|h| h + 1).unwrap_or(0);
            writeln!(
                w,
                "{}\t{}\t_\t_\t_\t_\t{}\t{}\t_\t_\t{}",
                i + 1,
                token.form,
                head,
                token.deprel,
                state
            )?;
        }
        writeln!(w)?;
    }
    Ok(())
}
