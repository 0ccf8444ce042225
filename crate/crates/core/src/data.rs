//! Request records, the synthetic cascade generator, and stage views.
//!
//! One [`RequestRecord`] is one page view: the user's features, the exposed
//! items with their click / conversion labels, and candidates that were
//! retrieved but not shown. Files hold one JSON record per line.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, CsmfError, Result};
use crate::numerics::RngStream;
use crate::stagenet::Stage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExposedItem {
    pub item_id: u32,
    pub dense: Vec<f64>,
    pub cats: Vec<Vec<u32>>,
    pub clicked: bool,
    pub converted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Candidate {
    pub item_id: u32,
    pub dense: Vec<f64>,
    pub cats: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestRecord {
    pub request_id: u64,
    pub user_id: u32,
    pub ts: u32,
    pub user_dense: Vec<f64>,
    pub user_cats: Vec<Vec<u32>>,
    pub exposed: Vec<ExposedItem>,
    pub unexposed: Vec<Candidate>,
}

impl RequestRecord {
    /// Checks the cascade rules, naming the first one broken.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let mut seen = HashSet::new();
        for e in &self.exposed {
            if e.converted && !e.clicked {
                return Err(format!("converted-but-not-clicked (item {})", e.item_id));
            }
            if !seen.insert(e.item_id) {
                return Err(format!("duplicate-exposed-item (item {})", e.item_id));
            }
        }
        for c in &self.unexposed {
            if seen.contains(&c.item_id) {
                return Err(format!("exposed-and-unexposed (item {})", c.item_id));
            }
        }
        Ok(())
    }

    pub fn unexposed_ids(&self) -> Vec<u32> {
        self.unexposed.iter().map(|c| c.item_id).collect()
    }
}

/// Dense and categorical features of one user or item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Features {
    pub dense: Vec<f64>,
    /// One id list per categorical feature; lists are sum-pooled.
    pub cats: Vec<Vec<u32>>,
}

/// All users and items appearing in a set of records, keyed by id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Catalog {
    pub users: BTreeMap<u32, Features>,
    pub items: BTreeMap<u32, Features>,
}

impl Catalog {
    pub fn from_records<'a, I>(records: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a RequestRecord>,
    {
        let mut cat = Catalog::default();
        for r in records {
            insert_consistent(&mut cat.users, r.user_id, &r.user_dense, &r.user_cats, "user")?;
            for e in &r.exposed {
                insert_consistent(&mut cat.items, e.item_id, &e.dense, &e.cats, "item")?;
            }
            for c in &r.unexposed {
                insert_consistent(&mut cat.items, c.item_id, &c.dense, &c.cats, "item")?;
            }
        }
        Ok(cat)
    }

    pub fn user(&self, id: u32) -> Result<&Features> {
        self.users.get(&id).ok_or_else(|| CsmfError::Data(format!("unknown user id {id}")))
    }

    pub fn item(&self, id: u32) -> Result<&Features> {
        self.items.get(&id).ok_or_else(|| CsmfError::Data(format!("unknown item id {id}")))
    }
}

fn insert_consistent(
    map: &mut BTreeMap<u32, Features>,
    id: u32,
    dense: &[f64],
    cats: &[Vec<u32>],
    kind: &str,
) -> Result<()> {
    match map.get(&id) {
        Some(f) if f.dense != dense || f.cats != cats => {
            Err(CsmfError::Data(format!("{kind} {id} appears with conflicting features")))
        }
        Some(_) => Ok(()),
        None => {
            map.insert(id, Features { dense: dense.to_vec(), cats: cats.to_vec() });
            Ok(())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub users: usize,
    pub items: usize,
    pub requests_per_user: usize,
    pub exposures_per_request: usize,
    pub unexposed_per_request: usize,
    pub latent_dim: usize,
    /// 0 = conversions follow the click direction, 1 = independent direction.
    pub rho_conflict: f64,
    /// How much the platform's exposure policy follows click affinity
    /// (0 = unrelated, 1 = identical bilinear form).
    pub platform_alignment: f64,
    /// Fraction of exposures that are clicked.
    pub click_rate: f64,
    /// Fraction of exposures that convert.
    pub conversion_rate: f64,
    pub user_segments: usize,
    pub item_categories: usize,
    pub item_tags: usize,
    /// Requests get ticks in `0..ticks`; ticks `>= split_tick` form the test set.
    pub ticks: u32,
    pub split_tick: u32,
    /// Scale of the latent term in the exposure score (popularity has unit scale).
    pub exposure_sharpness: f64,
    pub click_sharpness: f64,
    pub conversion_sharpness: f64,
    pub feature_noise: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            users: 5000,
            items: 2000,
            requests_per_user: 4,
            exposures_per_request: 16,
            unexposed_per_request: 4,
            latent_dim: 8,
            rho_conflict: 0.5,
            platform_alignment: 0.5,
            click_rate: 0.1,
            conversion_rate: 0.02,
            user_segments: 16,
            item_categories: 20,
            item_tags: 32,
            ticks: 100,
            split_tick: 80,
            exposure_sharpness: 2.0,
            click_sharpness: 2.5,
            conversion_sharpness: 3.0,
            feature_noise: 0.1,
            seed: 7,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.users == 0 || self.items == 0 || self.requests_per_user == 0 || self.latent_dim == 0 {
            return config_err("users, items, requests_per_user and latent_dim must be positive");
        }
        if self.exposures_per_request == 0 {
            return config_err("exposures_per_request must be positive");
        }
        if self.exposures_per_request + self.unexposed_per_request > self.items {
            return config_err(format!(
                "{} exposed + {} unexposed per request exceeds the {} item catalog",
                self.exposures_per_request, self.unexposed_per_request, self.items
            ));
        }
        if !(self.click_rate > 0.0 && self.click_rate < 1.0) {
            return config_err("click_rate must lie in (0, 1)");
        }
        if !(self.conversion_rate > 0.0 && self.conversion_rate < self.click_rate) {
            return config_err("conversion_rate must lie in (0, click_rate)");
        }
        if !(0.0..=1.0).contains(&self.rho_conflict) {
            return config_err("rho_conflict must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.platform_alignment) {
            return config_err("platform_alignment must lie in [0, 1]");
        }
        if self.user_segments == 0 || self.item_categories == 0 || self.item_tags == 0 {
            return config_err("categorical vocabularies must be non-empty");
        }
        if self.split_tick == 0 || self.split_tick >= self.ticks {
            return config_err("split_tick must lie in (0, ticks)");
        }
        if self.feature_noise < 0.0 {
            return config_err("feature_noise must be non-negative");
        }
        Ok(())
    }
}

/// Hidden structure behind a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub user_latent: Vec<Vec<f64>>,
    pub item_latent: Vec<Vec<f64>>,
    pub popularity: Vec<f64>,
    pub exposure_form: Vec<f64>,
    pub click_form: Vec<f64>,
    pub conversion_form: Vec<f64>,
    pub click_bias: f64,
    pub conversion_bias: f64,
}

impl GroundTruth {
    fn bilinear(&self, form: &[f64], u: usize, i: usize) -> f64 {
        let p = &self.user_latent[u];
        let q = &self.item_latent[i];
        let l = p.len();
        let mut s = 0.0;
        for a in 0..l {
            let mut row = 0.0;
            for b in 0..l {
                row += form[a * l + b] * q[b];
            }
            s += p[a] * row;
        }
        s / l as f64
    }

    pub fn click_affinity(&self, u: usize, i: usize) -> f64 {
        self.bilinear(&self.click_form, u, i)
    }

    pub fn conversion_affinity(&self, u: usize, i: usize) -> f64 {
        self.bilinear(&self.conversion_form, u, i)
    }

    pub fn exposure_affinity(&self, u: usize, i: usize) -> f64 {
        self.bilinear(&self.exposure_form, u, i)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<RequestRecord>,
    pub test: Vec<RequestRecord>,
}

impl Dataset {
    pub fn all(&self) -> impl Iterator<Item = &RequestRecord> {
        self.train.iter().chain(self.test.iter())
    }

    pub fn catalog(&self) -> Result<Catalog> {
        Catalog::from_records(self.all())
    }
}

/// Event counts of a record set.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventCounts {
    pub requests: usize,
    pub exposures: usize,
    pub clicks: usize,
    pub conversions: usize,
}

pub fn count_events(records: &[RequestRecord]) -> EventCounts {
    let mut c = EventCounts { requests: records.len(), ..Default::default() };
    for r in records {
        c.exposures += r.exposed.len();
        c.clicks += r.exposed.iter().filter(|e| e.clicked).count();
        c.conversions += r.exposed.iter().filter(|e| e.converted).count();
    }
    c
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Bias `b` such that the mean of `sigmoid(scale · x + b)` over `xs` is `target`.
fn calibrate_bias(xs: &[f64], scale: f64, target: f64) -> f64 {
    let mean = |b: f64| xs.iter().map(|&x| sigmoid(scale * x + b)).sum::<f64>() / xs.len() as f64;
    let (mut lo, mut hi) = (-50.0, 50.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mean(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn quantize(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

fn argmax_dot(v: &[f64], centroids: &[Vec<f64>]) -> u32 {
    let mut best = (f64::NEG_INFINITY, 0u32);
    for (k, c) in centroids.iter().enumerate() {
        let d: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
        if d > best.0 {
            best = (d, k as u32);
        }
    }
    best.1
}

/// Generates a cascaded exposure → click → conversion dataset.
///
/// Exposures are drawn without replacement from a softmax over a latent
/// platform score (partly aligned with click affinity) plus item popularity;
/// clicks are Bernoulli in a click affinity; conversions (only of clicked items) are Bernoulli in a conversion
/// affinity whose bilinear form rotates away from the click form by
/// `rho_conflict · π/2`. Biases are calibrated so realized rates match the
/// configured ones.
pub fn generate(cfg: &GeneratorConfig) -> Result<(Dataset, GroundTruth)> {
    cfg.validate()?;
    let mut rng = RngStream::derive(cfg.seed, "generator");
    let l = cfg.latent_dim;
    let latent = |rng: &mut RngStream, n: usize| -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..l).map(|_| rng.normal()).collect()).collect()
    };
    let user_latent = latent(&mut rng, cfg.users);
    let item_latent = latent(&mut rng, cfg.items);
    let popularity: Vec<f64> = (0..cfg.items).map(|_| rng.normal()).collect();
    let form = |rng: &mut RngStream| -> Vec<f64> { (0..l * l).map(|_| rng.normal()).collect() };
    let platform_own = form(&mut rng);
    let click_form = form(&mut rng);
    let independent = form(&mut rng);
    let a = cfg.platform_alignment;
    let exposure_form: Vec<f64> = click_form
        .iter()
        .zip(&platform_own)
        .map(|(c, p)| a * c + (1.0 - a * a).sqrt() * p)
        .collect();
    let angle = cfg.rho_conflict * std::f64::consts::FRAC_PI_2;
    let conversion_form: Vec<f64> = click_form
        .iter()
        .zip(&independent)
        .map(|(c, i)| angle.cos() * c + angle.sin() * i)
        .collect();

    let segments = latent(&mut rng, cfg.user_segments);
    let categories = latent(&mut rng, cfg.item_categories);
    let tag_dirs = latent(&mut rng, cfg.item_tags);
    let noisy = |rng: &mut RngStream, v: &[f64]| -> Vec<f64> {
        v.iter().map(|x| quantize(x + cfg.feature_noise * rng.normal())).collect()
    };
    let user_feats: Vec<Features> = (0..cfg.users)
        .map(|u| Features {
            dense: noisy(&mut rng, &user_latent[u]),
            cats: vec![vec![u as u32], vec![argmax_dot(&user_latent[u], &segments)]],
        })
        .collect();
    let item_feats: Vec<Features> = (0..cfg.items)
        .map(|i| {
            let q = &item_latent[i];
            let mut tags = vec![argmax_dot(q, &tag_dirs)];
            for _ in 0..rng.below(3) {
                let t = rng.below(cfg.item_tags) as u32;
                if !tags.contains(&t) {
                    tags.push(t);
                }
            }
            Features {
                dense: noisy(&mut rng, q),
                cats: vec![vec![i as u32], vec![argmax_dot(q, &categories)], tags],
            }
        })
        .collect();

    let mut truth = GroundTruth {
        user_latent,
        item_latent,
        popularity,
        exposure_form,
        click_form,
        conversion_form,
        click_bias: 0.0,
        conversion_bias: 0.0,
    };

    // exposures: Gumbel top-k over the platform score
    struct Draft {
        user: usize,
        ts: u32,
        exposed: Vec<usize>,
        unexposed: Vec<usize>,
    }
    let mut drafts = Vec::with_capacity(cfg.users * cfg.requests_per_user);
    let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(cfg.items);
    for u in 0..cfg.users {
        let base: Vec<f64> = (0..cfg.items)
            .map(|i| cfg.exposure_sharpness * truth.exposure_affinity(u, i) + truth.popularity[i])
            .collect();
        for _ in 0..cfg.requests_per_user {
            let ts = rng.below(cfg.ticks as usize) as u32;
            keyed.clear();
            for (i, b) in base.iter().enumerate() {
                let g = -(-(rng.uniform().max(f64::MIN_POSITIVE)).ln()).ln();
                keyed.push((b + g, i));
            }
            let k = cfg.exposures_per_request;
            keyed.select_nth_unstable_by(k - 1, |a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut exposed: Vec<usize> = keyed[..k].iter().map(|p| p.1).collect();
            exposed.sort_by(|&a, &b| base[b].total_cmp(&base[a]).then(a.cmp(&b)));
            let taken: HashSet<usize> = exposed.iter().copied().collect();
            let mut unexposed = Vec::with_capacity(cfg.unexposed_per_request);
            while unexposed.len() < cfg.unexposed_per_request {
                let i = rng.below(cfg.items);
                if !taken.contains(&i) && !unexposed.contains(&i) {
                    unexposed.push(i);
                }
            }
            drafts.push(Draft { user: u, ts, exposed, unexposed });
        }
    }

    // calibrate click bias over all exposures, conversion bias over clicks
    let click_aff: Vec<Vec<f64>> = drafts
        .iter()
        .map(|d| d.exposed.iter().map(|&i| truth.click_affinity(d.user, i)).collect())
        .collect();
    let flat: Vec<f64> = click_aff.iter().flatten().copied().collect();
    truth.click_bias = calibrate_bias(&flat, cfg.click_sharpness, cfg.click_rate);
    let clicks: Vec<Vec<bool>> = click_aff
        .iter()
        .map(|row| row.iter().map(|&a| rng.uniform() < sigmoid(cfg.click_sharpness * a + truth.click_bias)).collect())
        .collect();
    let mut conv_aff = Vec::new();
    for (d, cl) in drafts.iter().zip(&clicks) {
        for (&i, &c) in d.exposed.iter().zip(cl) {
            if c {
                conv_aff.push(truth.conversion_affinity(d.user, i));
            }
        }
    }
    let conditional = cfg.conversion_rate / cfg.click_rate;
    truth.conversion_bias = if conv_aff.is_empty() {
        0.0
    } else {
        calibrate_bias(&conv_aff, cfg.conversion_sharpness, conditional)
    };

    let mut train = Vec::new();
    let mut test = Vec::new();
    for (rid, (d, cl)) in drafts.iter().zip(&clicks).enumerate() {
        let uf = &user_feats[d.user];
        let exposed = d
            .exposed
            .iter()
            .zip(cl)
            .map(|(&i, &clicked)| {
                let converted = clicked && {
                    let a = truth.conversion_affinity(d.user, i);
                    rng.uniform() < sigmoid(cfg.conversion_sharpness * a + truth.conversion_bias)
                };
                ExposedItem {
                    item_id: i as u32,
                    dense: item_feats[i].dense.clone(),
                    cats: item_feats[i].cats.clone(),
                    clicked,
                    converted,
                }
            })
            .collect();
        let unexposed = d
            .unexposed
            .iter()
            .map(|&i| Candidate {
                item_id: i as u32,
                dense: item_feats[i].dense.clone(),
                cats: item_feats[i].cats.clone(),
            })
            .collect();
        let rec = RequestRecord {
            request_id: rid as u64,
            user_id: d.user as u32,
            ts: d.ts,
            user_dense: uf.dense.clone(),
            user_cats: uf.cats.clone(),
            exposed,
            unexposed,
        };
        if d.ts < cfg.split_tick {
            train.push(rec);
        } else {
            test.push(rec);
        }
    }
    Ok((Dataset { train, test }, truth))
}

pub fn write_records(path: &Path, records: &[RequestRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| CsmfError::Data(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads and validates a record file. Blank lines are skipped.
pub fn load_records(path: &Path) -> Result<Vec<RequestRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RequestRecord = serde_json::from_str(&line)
            .map_err(|e| CsmfError::Parse { line: n + 1, message: e.to_string() })?;
        rec.validate()
            .map_err(|rule| CsmfError::Data(format!("line {}: {rule}", n + 1)))?;
        out.push(rec);
    }
    if out.is_empty() {
        log::warn!("{} holds no records", path.display());
    }
    Ok(out)
}

/// One positive of a stage view: exposed item `slot` of record `record`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StageExample {
    pub record: usize,
    pub slot: usize,
}

/// Positives for `stage`: exposures, clicks or conversions.
pub fn stage_view(records: &[RequestRecord], stage: Stage) -> Vec<StageExample> {
    let mut out = Vec::new();
    for (ri, r) in records.iter().enumerate() {
        for (si, e) in r.exposed.iter().enumerate() {
            let keep = match stage {
                Stage::Exposure => true,
                Stage::Click => e.clicked,
                Stage::Conversion => e.converted,
            };
            if keep {
                out.push(StageExample { record: ri, slot: si });
            }
        }
    }
    out
}

/// Uniform request-level sample without replacement, in original order.
pub fn recovery_subset(records: &[RequestRecord], fraction: f64, seed: u64) -> Result<Vec<RequestRecord>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return config_err(format!("recovery fraction must lie in (0, 1], got {fraction}"));
    }
    if fraction == 1.0 {
        return Ok(records.to_vec());
    }
    let k = ((fraction * records.len() as f64).round() as usize).clamp(usize::from(!records.is_empty()), records.len());
    let mut idx: Vec<usize> = (0..records.len()).collect();
    let mut rng = RngStream::derive(seed, "recovery-subset");
    for i in 0..k {
        let j = i + rng.below(idx.len() - i);
        idx.swap(i, j);
    }
    let mut chosen = idx[..k].to_vec();
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| records[i].clone()).collect())
}

/// Shuffled mini-batches; a trailing batch smaller than 2 is dropped.
pub fn batches(examples: &[StageExample], batch_size: usize, rng: &mut RngStream) -> Vec<Vec<StageExample>> {
    let mut order = examples.to_vec();
    rng.shuffle(&mut order);
    order
        .chunks(batch_size.max(1))
        .filter(|c| c.len() >= 2)
        .map(<[StageExample]>::to_vec)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorConfig {
        GeneratorConfig { users: 300, items: 200, requests_per_user: 4, seed: 3, ..Default::default() }
    }

    #[test]
    fn cascade_holds_in_generated_data() {
        let (ds, _) = generate(&small()).unwrap();
        for r in ds.all() {
            r.validate().unwrap();
            assert_eq!(r.exposed.len(), 16);
            assert_eq!(r.unexposed.len(), 4);
        }
    }

    #[test]
    fn default_rates_order_events() {
        let (ds, _) = generate(&small()).unwrap();
        let c = count_events(&ds.train);
        assert!(c.exposures > c.clicks && c.clicks > c.conversions && c.conversions > 0);
    }

    #[test]
    fn realized_rates_near_configured() {
        let cfg = GeneratorConfig { users: 1000, items: 500, ..Default::default() };
        let (ds, _) = generate(&cfg).unwrap();
        let mut all = ds.train.clone();
        all.extend(ds.test.clone());
        let c = count_events(&all);
        assert!(c.exposures >= 10_000);
        let cr = c.clicks as f64 / c.exposures as f64;
        let vr = c.conversions as f64 / c.exposures as f64;
        assert!((cr / cfg.click_rate - 1.0).abs() < 0.2, "click rate {cr}");
        assert!((vr / cfg.conversion_rate - 1.0).abs() < 0.2, "conversion rate {vr}");
    }

    #[test]
    fn generation_is_deterministic() {
        let (a, _) = generate(&small()).unwrap();
        let (b, _) = generate(&small()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_by_tick() {
        let cfg = small();
        let (ds, _) = generate(&cfg).unwrap();
        assert!(ds.train.iter().all(|r| r.ts < cfg.split_tick));
        assert!(ds.test.iter().all(|r| r.ts >= cfg.split_tick));
        assert!(!ds.test.is_empty());
    }

    #[test]
    fn impossible_counts_rejected() {
        let cfg = GeneratorConfig { items: 10, exposures_per_request: 8, unexposed_per_request: 4, ..small() };
        assert!(matches!(generate(&cfg), Err(CsmfError::Config(_))));
    }

    fn spearman(a: &[f64], b: &[f64]) -> f64 {
        fn ranks(v: &[f64]) -> Vec<f64> {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&x, &y| v[x].total_cmp(&v[y]));
            let mut r = vec![0.0; v.len()];
            for (k, &i) in idx.iter().enumerate() {
                r[i] = k as f64;
            }
            r
        }
        let (ra, rb) = (ranks(a), ranks(b));
        let n = a.len() as f64;
        let m = (n - 1.0) / 2.0;
        let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - m) * (y - m)).sum();
        let var: f64 = ra.iter().map(|x| (x - m).powi(2)).sum();
        cov / var
    }

    fn affinity_correlation(rho: f64) -> f64 {
        let cfg = GeneratorConfig { users: 50, items: 60, rho_conflict: rho, ..small() };
        let (_, truth) = generate(&cfg).unwrap();
        let mut c = Vec::new();
        let mut v = Vec::new();
        for u in 0..50 {
            for i in 0..60 {
                c.push(truth.click_affinity(u, i));
                v.push(truth.conversion_affinity(u, i));
            }
        }
        spearman(&c, &v)
    }

    #[test]
    fn conflict_parameter_controls_affinity_alignment() {
        assert!(affinity_correlation(0.0) > 0.99);
        assert!(affinity_correlation(1.0).abs() < 0.1);
        let mid = affinity_correlation(0.5);
        assert!(mid > 0.3 && mid < 0.95, "{mid}");
    }

    fn one_record() -> RequestRecord {
        let item = |id, clicked, converted| ExposedItem { item_id: id, dense: vec![0.5], cats: vec![vec![id]], clicked, converted };
        RequestRecord {
            request_id: 1,
            user_id: 4,
            ts: 3,
            user_dense: vec![1.0],
            user_cats: vec![vec![4]],
            exposed: vec![item(1, true, true), item(2, true, false), item(3, false, false), item(4, false, false), item(5, false, false)],
            unexposed: vec![Candidate { item_id: 9, dense: vec![0.1], cats: vec![vec![9]] }],
        }
    }

    #[test]
    fn stage_view_counts_and_nesting() {
        let recs = vec![one_record()];
        let d = stage_view(&recs, Stage::Exposure);
        let o = stage_view(&recs, Stage::Click);
        let r = stage_view(&recs, Stage::Conversion);
        assert_eq!((d.len(), o.len(), r.len()), (5, 2, 1));
        assert!(r.iter().all(|x| o.contains(x)) && o.iter().all(|x| d.contains(x)));
    }

    #[test]
    fn stage_view_without_conversions_is_empty() {
        let mut rec = one_record();
        rec.exposed.iter_mut().for_each(|e| e.converted = false);
        assert!(stage_view(&[rec], Stage::Conversion).is_empty());
    }

    #[test]
    fn roundtrip_and_rejections() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, _) = generate(&GeneratorConfig { users: 20, items: 50, ..small() }).unwrap();
        let p = dir.path().join("train.jsonl");
        write_records(&p, &ds.train).unwrap();
        assert_eq!(load_records(&p).unwrap(), ds.train);

        let mut bad = one_record();
        bad.exposed[2].converted = true;
        let p2 = dir.path().join("bad.jsonl");
        std::fs::write(&p2, format!("{}\n", serde_json::to_string(&bad).unwrap())).unwrap();
        let err = load_records(&p2).unwrap_err().to_string();
        assert!(err.contains("converted-but-not-clicked"), "{err}");

        let p3 = dir.path().join("garbled.jsonl");
        std::fs::write(&p3, format!("{}\n{{not json\n", serde_json::to_string(&one_record()).unwrap())).unwrap();
        assert!(matches!(load_records(&p3), Err(CsmfError::Parse { line: 2, .. })));

        let p4 = dir.path().join("empty.jsonl");
        std::fs::write(&p4, "").unwrap();
        assert!(load_records(&p4).unwrap().is_empty());
    }

    #[test]
    fn overlap_rule_named() {
        let mut rec = one_record();
        rec.unexposed[0].item_id = 3;
        assert!(rec.validate().unwrap_err().contains("exposed-and-unexposed"));
    }

    #[test]
    fn recovery_subset_contract() {
        let base = one_record();
        let recs: Vec<RequestRecord> = (0..1000)
            .map(|i| RequestRecord { request_id: i, ..base.clone() })
            .collect();
        assert_eq!(recovery_subset(&recs, 1.0, 1).unwrap(), recs);
        let a = recovery_subset(&recs, 0.1, 9).unwrap();
        assert_eq!(a.len(), 100);
        assert_eq!(a, recovery_subset(&recs, 0.1, 9).unwrap());
        let ids: HashSet<u64> = a.iter().map(|r| r.request_id).collect();
        assert_eq!(ids.len(), 100);
        for f in [0.0, -0.5, 1.5] {
            assert!(matches!(recovery_subset(&recs, f, 1), Err(CsmfError::Config(_))));
        }
    }

    #[test]
    fn catalog_detects_conflicts() {
        let a = one_record();
        let mut b = one_record();
        b.user_dense = vec![2.0];
        assert!(Catalog::from_records([&a, &b]).is_err());
        let cat = Catalog::from_records([&a]).unwrap();
        assert_eq!(cat.items.len(), 6);
        assert!(cat.user(4).is_ok() && cat.user(5).is_err());
    }

    #[test]
    fn batches_drop_singletons() {
        let ex: Vec<StageExample> = (0..11).map(|i| StageExample { record: i, slot: 0 }).collect();
        let b = batches(&ex, 5, &mut RngStream::new(0));
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![5, 5]);
    }
}
