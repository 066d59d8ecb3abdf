//! Modality-gap diagnostics: k-nearest-neighbour overlap ratio (KNOR) and
//! CSV export of embeddings for external projection tools.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datastore::Datastore;
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::exec::{self, Parallelism};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnorReport {
    pub k_values: Vec<usize>,
    pub scores: Vec<f64>,
    pub pair_count: usize,
}

impl KnorReport {
    pub fn score(&self, k: usize) -> Option<f64> {
        self.k_values
            .iter()
            .position(|&x| x == k)
            .map(|i| self.scores[i])
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let err = |e: csv::Error| Error::io("writing KNOR csv", e.into());
        out.write_record(["k", "knor"]).map_err(err)?;
        for (k, s) in self.k_values.iter().zip(&self.scores) {
            out.write_record([k.to_string(), s.to_string()])
                .map_err(err)?;
        }
        out.flush().map_err(|e| Error::io("writing KNOR csv", e))
    }
}

/// For each pair `i` and each `k`, the overlap `|A ∩ B| / k` between the
/// k-NN id sets retrieved with `image_queries[i]` and `text_queries[i]`,
/// averaged over pairs. Queries are used as given; apply any correction or
/// noise beforehand.
pub fn knor(
    store: &Datastore,
    image_queries: &EmbeddingMatrix,
    text_queries: &EmbeddingMatrix,
    k_values: &[usize],
) -> Result<KnorReport> {
    knor_with(
        store,
        image_queries,
        text_queries,
        k_values,
        Parallelism::default(),
    )
}

pub fn knor_with(
    store: &Datastore,
    image_queries: &EmbeddingMatrix,
    text_queries: &EmbeddingMatrix,
    k_values: &[usize],
    mode: Parallelism,
) -> Result<KnorReport> {
    let n = image_queries.rows();
    if n != text_queries.rows() {
        return Err(Error::PairMismatch {
            left: n,
            right: text_queries.rows(),
        });
    }
    if n == 0 {
        return Err(Error::InvalidEmbedding("no query pairs".into()));
    }
    Error::check_dim(store.dim(), image_queries.dim())?;
    Error::check_dim(store.dim(), text_queries.dim())?;
    if k_values.is_empty() {
        return Err(Error::InvalidK {
            k: 0,
            reason: "no k values given".into(),
        });
    }
    for &k in k_values {
        if k == 0 || k > store.len() {
            return Err(Error::InvalidK {
                k,
                reason: format!("must be in 1..={}", store.len()),
            });
        }
    }
    let max_k = *k_values.iter().max().expect("non-empty");

    // Top-k lists are prefixes of the top-max_k list under the strict
    // (score, id) order, so one search per query covers every k.
    let overlaps = exec::map_range(n, mode, |i| -> Result<Vec<u64>> {
        let a = store.knn_search_with(image_queries.row(i), max_k, Parallelism::Sequential)?;
        let b = store.knn_search_with(text_queries.row(i), max_k, Parallelism::Sequential)?;
        Ok(k_values
            .iter()
            .map(|&k| {
                let bs: std::collections::HashSet<u64> = b[..k].iter().map(|r| r.id).collect();
                a[..k].iter().filter(|r| bs.contains(&r.id)).count() as u64
            })
            .collect())
    });

    let mut totals = vec![0u64; k_values.len()];
    for o in overlaps {
        for (t, v) in totals.iter_mut().zip(o?) {
            *t += v;
        }
    }
    Ok(KnorReport {
        k_values: k_values.to_vec(),
        scores: totals
            .iter()
            .zip(k_values)
            .map(|(&t, &k)| t as f64 / (k as f64 * n as f64))
            .collect(),
        pair_count: n,
    })
}

/// Write `label,row_index,v0..v{dim-1}` rows for every labelled matrix.
/// Values use the shortest decimal form that parses back to the same f64.
pub fn export_projection_input(
    matrices: &[(&str, &EmbeddingMatrix)],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let file =
        File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    write_projection_input(matrices, file)
}

pub fn write_projection_input<W: Write>(matrices: &[(&str, &EmbeddingMatrix)], w: W) -> Result<()> {
    let dim = matrices
        .first()
        .map(|(_, m)| m.dim())
        .ok_or_else(|| Error::InvalidEmbedding("nothing to export".into()))?;
    for (_, m) in matrices {
        Error::check_dim(dim, m.dim())?;
    }
    let err = |e: csv::Error| Error::io("writing projection csv", e.into());
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["label".to_string(), "row_index".to_string()];
    header.extend((0..dim).map(|d| format!("v{d}")));
    out.write_record(&header).map_err(err)?;
    for (label, m) in matrices {
        for (i, row) in m.iter_rows().enumerate() {
            let mut rec = Vec::with_capacity(dim + 2);
            rec.push(label.to_string());
            rec.push(i.to_string());
            rec.extend(row.iter().map(|v| v.to_string()));
            out.write_record(&rec).map_err(err)?;
        }
    }
    out.flush()
        .map_err(|e| Error::io("writing projection csv", e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::{CaptionRecord, Metric};

    fn one_hot_store(n: usize) -> Datastore {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let recs = (0..n)
            .map(|i| CaptionRecord::new(i as u64, format!("c{i}"), ""))
            .collect();
        Datastore::build(
            &EmbeddingMatrix::from_rows(&rows).unwrap(),
            recs,
            Metric::L2,
        )
        .unwrap()
    }

    #[test]
    fn identical_queries_give_one() {
        let s = one_hot_store(20);
        let q = s.embedding_matrix();
        let r = knor(&s, &q, &q, &[1, 5, 20]).unwrap();
        assert_eq!(r.scores, vec![1.0, 1.0, 1.0]);
        assert_eq!(r.pair_count, 20);
    }

    #[test]
    fn disjoint_neighbourhoods_give_zero() {
        let s = one_hot_store(20);
        let all = s.embedding_matrix();
        let img =
            EmbeddingMatrix::from_rows(&(0..10).map(|i| all.row(i).to_vec()).collect::<Vec<_>>())
                .unwrap();
        let txt =
            EmbeddingMatrix::from_rows(&(10..20).map(|i| all.row(i).to_vec()).collect::<Vec<_>>())
                .unwrap();
        let r = knor(&s, &img, &txt, &[1]).unwrap();
        assert_eq!(r.scores, vec![0.0]);
    }

    #[test]
    fn argument_errors() {
        let s = one_hot_store(4);
        let q = s.embedding_matrix();
        assert!(matches!(
            knor(&s, &q, &q, &[5]),
            Err(Error::InvalidK { k: 5, .. })
        ));
        assert!(matches!(
            knor(&s, &q, &q, &[0]),
            Err(Error::InvalidK { k: 0, .. })
        ));
        let short = EmbeddingMatrix::from_rows(&[q.row(0)]).unwrap();
        assert!(matches!(
            knor(&s, &q, &short, &[1]),
            Err(Error::PairMismatch { left: 4, right: 1 })
        ));
    }

    #[test]
    fn projection_csv_round_trips_values() {
        let a = EmbeddingMatrix::from_rows(&[[0.1, 1.0 / 3.0], [-2.5e-300, 7.0]]).unwrap();
        let b = EmbeddingMatrix::from_rows(&[[1e10, -0.0]]).unwrap();
        let mut buf = Vec::new();
        write_projection_input(&[("image", &a), ("text", &b)], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "label,row_index,v0,v1");
        assert_eq!(lines.len(), 4);
        let fields: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(fields[0], "image");
        assert_eq!(fields[3].parse::<f64>().unwrap(), 1.0 / 3.0);
        assert_eq!(
            lines[2].split(',').nth(2).unwrap().parse::<f64>().unwrap(),
            -2.5e-300
        );
        assert!(lines[3].starts_with("text,0,"));

        let c = EmbeddingMatrix::from_rows(&[[1.0]]).unwrap();
        assert!(matches!(
            write_projection_input(&[("a", &a), ("c", &c)], Vec::new()),
            Err(Error::DimMismatch { .. })
        ));
    }
}
