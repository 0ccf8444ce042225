//! Exact top-k retrieval, Recall@N / nDCG@N, and serving-weight sweeps.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Catalog, RequestRecord};
use crate::error::{config_err, shape_err, CsmfError, Result};
use crate::numerics::{dot, Matrix};
use crate::stagenet::{BlockLayout, ParameterStore, Stage};
use crate::towers::{scale_user_vectors, ServingWeights, Side, TwoTowerModel};

/// Item vectors in contiguous row-major order, one row per id.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    ids: Vec<u32>,
    vectors: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopK {
    /// `(item id, score)`, best first.
    pub items: Vec<(u32, f64)>,
    /// Set when `k` exceeded the index size and every item was returned.
    pub truncated: bool,
}

impl TopK {
    pub fn ids(&self) -> Vec<u32> {
        self.items.iter().map(|&(id, _)| id).collect()
    }
}

impl RetrievalIndex {
    pub fn new(ids: Vec<u32>, vectors: Matrix) -> Result<Self> {
        if ids.len() != vectors.rows() {
            return shape_err(format!("{} ids for {} vectors", ids.len(), vectors.rows()));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        if let Some(dup) = ids.iter().find(|id| !seen.insert(**id)) {
            return Err(CsmfError::Data(format!("duplicate item id {dup} in index")));
        }
        Ok(Self { ids, vectors })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn width(&self) -> usize {
        self.vectors.cols()
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    /// The `k` best items by inner product; ties go to the lower id.
    pub fn topk(&self, query: &[f64], k: usize) -> Result<TopK> {
        if k == 0 {
            return config_err("k must be at least 1");
        }
        if query.len() != self.width() {
            return shape_err(format!("query width {} vs index width {}", query.len(), self.width()));
        }
        let mut scored: Vec<(f64, u32)> =
            (0..self.len()).map(|r| (dot(query, self.vectors.row(r)), self.ids[r])).collect();
        let order = |a: &(f64, u32), b: &(f64, u32)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
        let truncated = k > scored.len();
        let k = k.min(scored.len());
        if k < scored.len() {
            scored.select_nth_unstable_by(k, order);
            scored.truncate(k);
        }
        scored.sort_unstable_by(order);
        Ok(TopK { items: scored.into_iter().map(|(s, id)| (id, s)).collect(), truncated })
    }
}

pub fn recall_at_n(ranked: &[u32], relevant: &BTreeSet<u32>, n: usize) -> Result<f64> {
    check_metric_args(relevant, n)?;
    let hits = ranked.iter().take(n).filter(|id| relevant.contains(id)).count();
    Ok(hits as f64 / relevant.len() as f64)
}

/// Binary-gain nDCG.
pub fn ndcg_at_n(ranked: &[u32], relevant: &BTreeSet<u32>, n: usize) -> Result<f64> {
    check_metric_args(relevant, n)?;
    let gain = |r: usize| 1.0 / ((r + 2) as f64).log2();
    let dcg: f64 = ranked.iter().take(n).enumerate().filter(|(_, id)| relevant.contains(id)).map(|(r, _)| gain(r)).sum();
    let idcg: f64 = (0..relevant.len().min(n)).map(gain).sum();
    Ok(dcg / idcg)
}

fn check_metric_args(relevant: &BTreeSet<u32>, n: usize) -> Result<()> {
    if n == 0 {
        return config_err("N must be at least 1");
    }
    if relevant.is_empty() {
        return Err(CsmfError::Data("metric undefined for an empty relevant set".into()));
    }
    Ok(())
}

/// Per-user relevant items for `objective`: exposed, clicked or converted.
pub fn relevant_sets(records: &[RequestRecord], objective: Stage) -> BTreeMap<u32, BTreeSet<u32>> {
    let mut out: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
    for r in records {
        let set = out.entry(r.user_id).or_default();
        for e in &r.exposed {
            let keep = match objective {
                Stage::Exposure => true,
                Stage::Click => e.clicked,
                Stage::Conversion => e.converted,
            };
            if keep {
                set.insert(e.item_id);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSpec {
    pub objectives: Vec<Stage>,
    pub ns: Vec<usize>,
    pub weights: ServingWeights,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self { objectives: vec![Stage::Click, Stage::Conversion], ns: vec![50], weights: ServingWeights::default() }
    }
}

impl EvalSpec {
    pub fn validate(&self) -> Result<()> {
        if self.objectives.is_empty() {
            return config_err("eval needs at least one objective");
        }
        if self.ns.is_empty() || self.ns.contains(&0) {
            return config_err("eval N values must be at least 1");
        }
        self.weights.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub objective: Stage,
    pub n: usize,
    pub metric: String,
    pub value: f64,
    pub users: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
}

impl MetricsReport {
    pub fn get(&self, objective: Stage, metric: &str, n: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.objective == objective && r.metric == metric && r.n == n).map(|r| r.value)
    }

    pub fn recall(&self, objective: Stage, n: usize) -> Option<f64> {
        self.get(objective, "recall", n)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("objective\tN\tmetric\tvalue\tusers\tskipped\n");
        for r in &self.rows {
            let _ = writeln!(s, "{}\t{}\t{}\t{:.6}\t{}\t{}", r.objective.objective(), r.n, r.metric, r.value, r.users, r.skipped);
        }
        s
    }
}

/// Ranks the whole index for every user with a nonempty relevant set and
/// averages Recall@N / nDCG@N. `user_vectors` rows align with `user_ids`.
pub fn evaluate_vectors(
    user_ids: &[u32],
    user_vectors: &Matrix,
    index: &RetrievalIndex,
    relevant: &BTreeMap<u32, BTreeSet<u32>>,
    objective: Stage,
    ns: &[usize],
) -> Result<Vec<MetricRow>> {
    if user_ids.len() != user_vectors.rows() {
        return shape_err("user ids and vectors disagree");
    }
    let row_of: BTreeMap<u32, usize> = user_ids.iter().enumerate().map(|(r, &id)| (id, r)).collect();
    let evaluable: Vec<(&u32, &BTreeSet<u32>)> = relevant.iter().filter(|(_, s)| !s.is_empty()).collect();
    let skipped = relevant.len() - evaluable.len();
    if evaluable.is_empty() {
        return Err(CsmfError::Data(format!("no user has a relevant {} item", objective.objective())));
    }
    let kmax = *ns.iter().max().expect("validated ns");
    let per_user: Vec<Vec<(f64, f64)>> = evaluable
        .par_iter()
        .map(|(uid, rel)| -> Result<Vec<(f64, f64)>> {
            let row = *row_of.get(uid).ok_or_else(|| CsmfError::Data(format!("no vector for user {uid}")))?;
            let ranked = index.topk(user_vectors.row(row), kmax)?.ids();
            ns.iter().map(|&n| Ok((recall_at_n(&ranked, rel, n)?, ndcg_at_n(&ranked, rel, n)?))).collect()
        })
        .collect::<Result<_>>()?;
    let users = per_user.len();
    let mut rows = Vec::new();
    for (k, &n) in ns.iter().enumerate() {
        let (mut rec, mut nd) = (0.0, 0.0);
        for u in &per_user {
            rec += u[k].0;
            nd += u[k].1;
        }
        for (metric, total) in [("recall", rec), ("ndcg", nd)] {
            rows.push(MetricRow { objective, n, metric: metric.into(), value: total / users as f64, users, skipped });
        }
    }
    Ok(rows)
}

/// Raw (unweighted) full-prefix vectors of every catalog entity.
#[derive(Debug, Clone)]
pub struct EncodedCatalog {
    pub layout: BlockLayout,
    pub user_ids: Vec<u32>,
    pub users: Matrix,
    pub item_ids: Vec<u32>,
    pub items: Matrix,
}

impl EncodedCatalog {
    /// Encodes under `prefix`; everything past the prefix comes out zero.
    pub fn encode(model: &TwoTowerModel, catalog: &Catalog, prefix: Stage) -> Result<Self> {
        let user_ids: Vec<u32> = catalog.users.keys().copied().collect();
        let item_ids: Vec<u32> = catalog.items.keys().copied().collect();
        let uf: Vec<_> = catalog.users.values().collect();
        let itf: Vec<_> = catalog.items.values().collect();
        Ok(Self {
            layout: model.final_layout(),
            user_ids,
            users: model.encode_many(Side::User, &uf, prefix)?,
            item_ids,
            items: model.encode_many(Side::Item, &itf, prefix)?,
        })
    }

    pub fn index(&self) -> Result<RetrievalIndex> {
        RetrievalIndex::new(self.item_ids.clone(), self.items.clone())
    }

    pub fn weighted_users(&self, weights: ServingWeights) -> Matrix {
        let mut u = self.users.clone();
        scale_user_vectors(&mut u, self.layout, weights);
        u
    }
}

/// Metrics for `spec` over the users of `test`, candidates = whole catalog.
pub fn evaluate(model: &TwoTowerModel, catalog: &Catalog, test: &[RequestRecord], spec: &EvalSpec) -> Result<MetricsReport> {
    spec.validate()?;
    if model.census().trainable_total() != 0 {
        return Err(CsmfError::Lifecycle("evaluation requires a fully committed model".into()));
    }
    let enc = EncodedCatalog::encode(model, catalog, Stage::Conversion)?;
    evaluate_encoded(&enc, test, spec)
}

pub fn evaluate_encoded(enc: &EncodedCatalog, test: &[RequestRecord], spec: &EvalSpec) -> Result<MetricsReport> {
    spec.validate()?;
    let users = enc.weighted_users(spec.weights);
    let index = enc.index()?;
    let mut report = MetricsReport::default();
    for &obj in &spec.objectives {
        let rel = relevant_sets(test, obj);
        report.rows.extend(evaluate_vectors(&enc.user_ids, &users, &index, &rel, obj, &spec.ns)?);
    }
    Ok(report)
}

/// Recall / nDCG of a single objective's own score, for a model that may
/// still be mid-lifecycle. Encodes under prefix `score`.
pub fn evaluate_stage_score(
    model: &TwoTowerModel,
    catalog: &Catalog,
    test: &[RequestRecord],
    objective: Stage,
    score: Stage,
    ns: &[usize],
) -> Result<Vec<MetricRow>> {
    let enc = EncodedCatalog::encode(model, catalog, score)?;
    let rel = relevant_sets(test, objective);
    evaluate_vectors(&enc.user_ids, &enc.users, &enc.index()?, &rel, objective, ns)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub weights: ServingWeights,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightSweep {
    pub rows: Vec<SweepRow>,
    /// User-vector exports performed (one per grid point).
    pub exports: usize,
    /// Parameter digest before and after the sweep.
    pub digest_before: String,
    pub digest_after: String,
}

/// Evaluates every weight triplet against one encoding of the model. Item
/// vectors do not depend on the weights; user vectors are re-scaled per point.
pub fn sweep_weights(
    model: &TwoTowerModel,
    catalog: &Catalog,
    test: &[RequestRecord],
    grid: &[ServingWeights],
    base: &EvalSpec,
) -> Result<WeightSweep> {
    if grid.is_empty() {
        return config_err("weight grid is empty");
    }
    if model.census().trainable_total() != 0 {
        return Err(CsmfError::Lifecycle("sweeps require a fully committed model".into()));
    }
    let digest_before = model.digest(&|_| true);
    let enc = EncodedCatalog::encode(model, catalog, Stage::Conversion)?;
    let mut rows = Vec::with_capacity(grid.len());
    for &w in grid {
        let spec = EvalSpec { weights: w, ..base.clone() };
        rows.push(SweepRow { weights: w, metrics: evaluate_encoded(&enc, test, &spec)? });
    }
    let digest_after = model.digest(&|_| true);
    Ok(WeightSweep { exports: rows.len(), rows, digest_before, digest_after })
}

/// Full grid over three weight axes.
pub fn weight_grid(k_d: &[f64], k_o: &[f64], k_r: &[f64]) -> Result<Vec<ServingWeights>> {
    let mut out = Vec::new();
    for &d in k_d {
        for &o in k_o {
            for &r in k_r {
                out.push(ServingWeights::new(d, o, r)?);
            }
        }
    }
    Ok(out)
}

pub fn sweep_tsv(rows: &[SweepRow]) -> String {
    let mut s = String::from("k_d\tk_o\tk_r\tobjective\tN\tmetric\tvalue\n");
    for row in rows {
        for m in &row.metrics.rows {
            let w = row.weights;
            let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}\t{}\t{:.6}", w.k_d, w.k_o, w.k_r, m.objective.objective(), m.n, m.metric, m.value);
        }
    }
    s
}
