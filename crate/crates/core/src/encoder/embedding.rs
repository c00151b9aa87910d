use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::corpus::{VocabKind, Vocabulary};
use crate::error::{Error, Result};
use crate::numcore::{Real, Tape, Tensor, Var};

/// Table row lookup, plus the learned position rows when given.
pub fn embed<T: Real>(tape: &mut Tape<'_, T>, token_ids: &[usize], table: Var, positions: Option<Var>) -> Result<Var> {
    let rows = tape.gather_rows(table, token_ids)?;
    match positions {
        Some(p) => {
            let p = if tape.dims(p)[0] == token_ids.len() {
                p
            } else {
                tape.slice_rows(p, 0, token_ids.len())?
            };
            tape.add(rows, p)
        }
        None => Ok(rows),
    }
}

/// Overwrite rows of `table` with vectors from a whitespace text file
/// (`token v_1 ... v_D` per line). Returns the fraction of non-reserved
/// vocabulary entries that were found.
///
/// A leading `count dim` header line, as written by word2vec, is skipped.
pub fn load_pretrained_embeddings<T: Real>(path: &Path, vocab: &Vocabulary, table: &mut Tensor<T>) -> Result<f64> {
    if table.rank() != 2 || table.dims()[0] != vocab.len() {
        return Err(Error::Shape(format!(
            "embedding table {:?} vs vocabulary of {}",
            table.dims(),
            vocab.len()
        )));
    }
    let d = table.dims()[1];
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let reserved = vocab.kind().reserved().len();
    debug_assert_eq!(vocab.kind(), VocabKind::Token);
    let mut covered = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let rest: Vec<&str> = fields.collect();
        if i == 0 && d != 1 && rest.len() == 1 && token.parse::<usize>().is_ok() && rest[0].parse::<usize>().is_ok() {
            continue;
        }
        if rest.len() != d {
            return Err(Error::Data {
                file: path.display().to_string(),
                line: Some(i + 1),
                msg: format!("expected {d} values, found {}", rest.len()),
            });
        }
        let values = rest
            .iter()
            .map(|s| {
                s.parse::<f64>().map_err(|_| Error::Data {
                    file: path.display().to_string(),
                    line: Some(i + 1),
                    msg: format!("not a number: {s:?}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        let Some(id) = vocab.id(token).filter(|&id| id >= reserved) else {
            continue;
        };
        let row = &mut table.data_mut()[id * d..(id + 1) * d];
        for (dst, v) in row.iter_mut().zip(values) {
            *dst = T::lit(v);
        }
        covered.insert(id);
    }
    let learned = vocab.num_learned();
    Ok(if learned == 0 {
        0.0
    } else {
        covered.len() as f64 / learned as f64
    })
}
