//! Single-query retrieval evaluation: Euclidean ranking, CMC and mAP.
//!
//! Gallery items sharing both identity and camera with a query are removed
//! from that query's ranking. Queries left without any correct match are
//! dropped from the averages and counted.

use std::fmt::Write as _;

use crate::tensor::{Element, Tensor};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalRun {
    pub query: Tensor<f64>,
    pub gallery: Tensor<f64>,
    pub query_ids: Vec<usize>,
    pub gallery_ids: Vec<usize>,
    pub query_cams: Vec<usize>,
    pub gallery_cams: Vec<usize>,
}

impl RetrievalRun {
    pub fn new<T: Element>(
        query: &Tensor<T>,
        gallery: &Tensor<T>,
        (query_ids, query_cams): (Vec<usize>, Vec<usize>),
        (gallery_ids, gallery_cams): (Vec<usize>, Vec<usize>),
    ) -> Result<Self> {
        let (q, g) = (query.shape(), gallery.shape());
        if q.len() != 2 || g.len() != 2 || q[1] != g[1] {
            return Err(Error::InvalidArgument(format!("query {q:?} and gallery {g:?} descriptors differ")));
        }
        if query_ids.len() != q[0] || query_cams.len() != q[0] {
            return Err(Error::InvalidArgument("query labels do not match descriptors".into()));
        }
        if gallery_ids.len() != g[0] || gallery_cams.len() != g[0] {
            return Err(Error::InvalidArgument("gallery labels do not match descriptors".into()));
        }
        Ok(Self { query: query.cast(), gallery: gallery.cast(), query_ids, gallery_ids, query_cams, gallery_cams })
    }

    fn excluded(&self, q: usize, j: usize) -> bool {
        self.gallery_ids[j] == self.query_ids[q] && self.gallery_cams[j] == self.query_cams[q]
    }
}

/// `[Q, G]` Euclidean distances.
pub fn distance_matrix(run: &RetrievalRun) -> Tensor<f64> {
    let (nq, ng) = (run.query.rows(), run.gallery.rows());
    Tensor::from_fn([nq, ng], |i| {
        let (a, b) = (run.query.row(i / ng), run.gallery.row(i % ng));
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// `cmc[k - 1]` is the fraction of valid queries with a correct match in
    /// the top `k`; one entry per gallery item.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub valid_queries: usize,
    pub dropped_queries: usize,
}

impl Evaluation {
    /// CMC at rank `k` (1-based).
    pub fn rank(&self, k: usize) -> f64 {
        self.cmc[(k.max(1) - 1).min(self.cmc.len() - 1)]
    }

    /// `mAP`, `R@1`, `R@5`, `R@10`, then one `rank value` line per CMC
    /// entry.
    pub fn report(&self) -> String {
        let mut s = format!(
            "mAP {:.6}\nR@1 {:.6}\nR@5 {:.6}\nR@10 {:.6}\n",
            self.map,
            self.rank(1),
            self.rank(5),
            self.rank(10)
        );
        for (k, v) in self.cmc.iter().enumerate() {
            writeln!(s, "{} {v:.6}", k + 1).expect("writing to a string");
        }
        s
    }

    /// Flat `key=value` lines.
    pub fn report_kv(&self) -> String {
        let mut s = format!(
            "mAP={}\nR@1={}\nR@5={}\nR@10={}\nvalid_queries={}\ndropped_queries={}\n",
            self.map,
            self.rank(1),
            self.rank(5),
            self.rank(10),
            self.valid_queries,
            self.dropped_queries
        );
        for (k, v) in self.cmc.iter().enumerate() {
            writeln!(s, "cmc.{}={v}", k + 1).expect("writing to a string");
        }
        s
    }
}

pub fn evaluate(run: &RetrievalRun) -> Result<Evaluation> {
    let dist = distance_matrix(run);
    let ng = run.gallery.rows();
    let mut hits_at = vec![0usize; ng];
    let (mut ap_sum, mut valid, mut dropped) = (0.0, 0, 0);
    let mut order: Vec<usize> = Vec::with_capacity(ng);
    for q in 0..run.query.rows() {
        let row = dist.row(q);
        order.clear();
        order.extend((0..ng).filter(|&j| !run.excluded(q, j)));
        // stable: equal distances keep gallery index order
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]));
        let mut found = 0usize;
        let mut precision_sum = 0.0;
        let mut first = None;
        for (pos, &j) in order.iter().enumerate() {
            if run.gallery_ids[j] == run.query_ids[q] {
                found += 1;
                precision_sum += found as f64 / (pos + 1) as f64;
                first.get_or_insert(pos);
            }
        }
        match first {
            Some(pos) => {
                valid += 1;
                hits_at[pos] += 1;
                ap_sum += precision_sum / found as f64;
            }
            None => dropped += 1,
        }
    }
    if valid == 0 {
        return Err(Error::InvalidArgument("no query has a valid gallery match".into()));
    }
    let mut cmc = Vec::with_capacity(ng);
    let mut acc = 0;
    for h in hits_at {
        acc += h;
        cmc.push(acc as f64 / valid as f64);
    }
    Ok(Evaluation { cmc, map: ap_sum / valid as f64, valid_queries: valid, dropped_queries: dropped })
}
