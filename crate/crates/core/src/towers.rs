//! Two-tower model: embeddings, user / item encoders, segment scores, and
//! weighted serving-vector export.
//!
//! Both towers end in the same final [`BlockLayout`], so a user vector and an
//! item vector line up segment by segment. The exposure score is the inner
//! product over the exposure segment, the click score over exposure + click,
//! and the conversion score over the whole vector. Scaling the user segments
//! by `(k_d + k_o + k_r, k_o + k_r, k_r)` turns one inner product into the
//! weighted blend of all three.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Catalog, Features};
use crate::error::{config_err, shape_err, CsmfError, Result};
use crate::numerics::{dot, gaussian_init, Matrix, RngStream};
use crate::stagenet::{
    build_layer, Activation, BlockLayout, LayerGrads, MaskedLayer, ParamGroupMut, ParamState,
    ParamTensor, ParameterStore, Stage, Structure, TrainSet,
};

/// One categorical feature: vocabulary size and embedding layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatFeatureSpec {
    pub vocab: usize,
    pub layout: BlockLayout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TowerSpec {
    pub cats: Vec<CatFeatureSpec>,
    pub dense: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub user: TowerSpec,
    pub item: TowerSpec,
}

impl FeatureSpec {
    /// Vocabulary sizes (max id + 1) and dense widths observed in a catalog.
    pub fn infer(catalog: &Catalog, embedding: BlockLayout) -> Result<Self> {
        fn tower<'a>(feats: impl Iterator<Item = &'a Features>, embedding: BlockLayout, kind: &str) -> Result<TowerSpec> {
            let mut vocab: Vec<usize> = Vec::new();
            let mut dense = None;
            for f in feats {
                match dense {
                    None => {
                        dense = Some(f.dense.len());
                        vocab = vec![1; f.cats.len()];
                    }
                    Some(d) if d != f.dense.len() || vocab.len() != f.cats.len() => {
                        return Err(CsmfError::Data(format!("{kind} features have inconsistent widths")));
                    }
                    _ => {}
                }
                for (v, ids) in vocab.iter_mut().zip(&f.cats) {
                    if let Some(&m) = ids.iter().max() {
                        *v = (*v).max(m as usize + 1);
                    }
                }
            }
            let Some(dense) = dense else {
                return Err(CsmfError::Data(format!("no {kind}s to infer features from")));
            };
            Ok(TowerSpec { cats: vocab.into_iter().map(|vocab| CatFeatureSpec { vocab, layout: embedding }).collect(), dense })
        }
        Ok(Self {
            user: tower(catalog.users.values(), embedding, "user")?,
            item: tower(catalog.items.values(), embedding, "item")?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    /// Exposure / click / conversion widths of the final vectors.
    pub final_layout: [usize; 3],
    /// Block split applied to hidden layers and embeddings.
    pub block_fractions: [f64; 3],
    pub embedding_width: usize,
    pub embedding_scale: f64,
    pub structure: Structure,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 64],
            final_layout: [32, 16, 16],
            block_fractions: [0.5, 0.25, 0.25],
            embedding_width: 16,
            embedding_scale: 0.1,
            structure: Structure::On,
        }
    }
}

impl ModelConfig {
    pub fn final_layout(&self) -> Result<BlockLayout> {
        let [d, o, r] = self.final_layout;
        BlockLayout::new(d, o, r)
    }

    pub fn embedding_layout(&self) -> Result<BlockLayout> {
        if self.embedding_width < 3 {
            return config_err("embedding width must be at least 3");
        }
        BlockLayout::split(self.embedding_width, self.block_fractions)
    }

    pub fn validate(&self) -> Result<()> {
        self.final_layout()?;
        self.embedding_layout()?;
        for &h in &self.hidden {
            BlockLayout::split(h, self.block_fractions)?;
        }
        if !(self.embedding_scale > 0.0) {
            return config_err("embedding_scale must be positive");
        }
        Ok(())
    }
}

/// Serving-time objective weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServingWeights {
    pub k_d: f64,
    pub k_o: f64,
    pub k_r: f64,
}

impl Default for ServingWeights {
    fn default() -> Self {
        Self { k_d: 1.0, k_o: 1.8, k_r: 1.2 }
    }
}

impl ServingWeights {
    pub fn new(k_d: f64, k_o: f64, k_r: f64) -> Result<Self> {
        let w = Self { k_d, k_o, k_r };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let ks = [self.k_d, self.k_o, self.k_r];
        if ks.iter().any(|k| !k.is_finite() || *k < 0.0) {
            return config_err(format!("serving weights must be finite and non-negative: {ks:?}"));
        }
        if ks.iter().all(|k| *k == 0.0) {
            return config_err("at least one serving weight must be positive");
        }
        Ok(())
    }

    /// Only the score of `objective`.
    pub fn single(objective: Stage) -> Self {
        let mut w = Self { k_d: 0.0, k_o: 0.0, k_r: 0.0 };
        match objective {
            Stage::Exposure => w.k_d = 1.0,
            Stage::Click => w.k_o = 1.0,
            Stage::Conversion => w.k_r = 1.0,
        }
        w
    }

    /// Per-segment multipliers for the user vector.
    pub fn segment_scales(&self) -> [f64; 3] {
        [self.k_d + self.k_o + self.k_r, self.k_o + self.k_r, self.k_r]
    }

    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| CsmfError::Config(format!("bad weights {s:?}: {e}")))?;
        match parts[..] {
            [d, o, r] => Self::new(d, o, r),
            _ => config_err(format!("expected k_d,k_o,k_r, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    User,
    Item,
}

/// One encoder: categorical embeddings + dense features → masked MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct Tower {
    pub spec: TowerSpec,
    pub embeddings: Vec<ParamTensor>,
    pub layers: Vec<MaskedLayer>,
    pub input_layout: BlockLayout,
    /// Input column of each embedding coordinate, per feature.
    col_map: Vec<Vec<usize>>,
    dense_cols: Vec<usize>,
    structure: Structure,
}

/// Per-layer activations of a batched forward pass.
#[derive(Debug, Clone)]
pub struct TowerPass {
    pub prefix: Stage,
    /// `acts[0]` is the assembled input, `acts[k + 1]` the output of layer `k`.
    pub acts: Vec<Matrix>,
}

impl TowerPass {
    pub fn output(&self) -> &Matrix {
        self.acts.last().expect("pass has an input")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TowerGrads {
    pub embeddings: Vec<Matrix>,
    pub layers: Vec<LayerGrads>,
}

impl TowerGrads {
    pub fn zeros_like(t: &Tower) -> Self {
        Self {
            embeddings: t.embeddings.iter().map(|e| Matrix::zeros(e.values.rows(), e.values.cols())).collect(),
            layers: t.layers.iter().map(LayerGrads::zeros_like).collect(),
        }
    }

    fn flat(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = self.embeddings.iter().map(Matrix::as_slice).collect();
        for l in &self.layers {
            v.push(l.weights.as_slice());
            v.push(&l.bias);
        }
        v
    }
}

impl Tower {
    fn build(spec: &TowerSpec, cfg: &ModelConfig, rng: &mut RngStream) -> Result<Self> {
        cfg.embedding_layout()?;
        let mut embeddings = Vec::new();
        for f in &spec.cats {
            if f.vocab == 0 {
                return config_err("vocabulary sizes must be at least 1");
            }
            let w = f.layout.width();
            let values = gaussian_init(rng, f.vocab, w, cfg.embedding_scale)?;
            let targets = (0..f.vocab * w).map(|k| f.layout.stage_of(k % w)).collect();
            embeddings.push(ParamTensor::new(values, vec![ParamState::Trainable(Stage::Exposure); f.vocab * w], targets)?);
        }
        // input columns: all exposure coordinates (features, then dense), then
        // click coordinates, then conversion coordinates
        let mut sizes = [0usize; 3];
        for f in &spec.cats {
            for s in Stage::ALL {
                sizes[s.index()] += f.layout.sizes[s.index()];
            }
        }
        sizes[0] += spec.dense;
        let input_layout = BlockLayout::new(sizes[0], sizes[1], sizes[2])?;
        let mut next = [0, sizes[0], sizes[0] + sizes[1]];
        let mut col_map = Vec::new();
        for f in &spec.cats {
            let cols = (0..f.layout.width())
                .map(|c| {
                    let s = f.layout.stage_of(c).index();
                    next[s] += 1;
                    next[s] - 1
                })
                .collect();
            col_map.push(cols);
        }
        let dense_cols = (0..spec.dense).map(|k| next[0] + k).collect();

        let mut layers = Vec::new();
        let mut in_layout = input_layout;
        let n_hidden = cfg.hidden.len();
        for k in 0..=n_hidden {
            let (out_layout, act) = if k < n_hidden {
                (BlockLayout::split(cfg.hidden[k], cfg.block_fractions)?, Activation::Relu)
            } else {
                (cfg.final_layout()?, Activation::Identity)
            };
            let fan_in = in_layout.width() as f64;
            let gain = if act == Activation::Relu { 2.0 } else { 1.0 };
            layers.push(build_layer(in_layout, out_layout, act, cfg.structure, rng, (gain / fan_in).sqrt())?);
            in_layout = out_layout;
        }
        Ok(Self { spec: spec.clone(), embeddings, layers, input_layout, col_map, dense_cols, structure: cfg.structure })
    }

    pub fn output_layout(&self) -> BlockLayout {
        self.layers.last().map_or(self.input_layout, |l| l.out_layout)
    }

    fn check(&self, f: &Features) -> Result<()> {
        if f.dense.len() != self.spec.dense || f.cats.len() != self.spec.cats.len() {
            return shape_err(format!(
                "expected {} dense / {} categorical features, got {} / {}",
                self.spec.dense,
                self.spec.cats.len(),
                f.dense.len(),
                f.cats.len()
            ));
        }
        for (k, (ids, spec)) in f.cats.iter().zip(&self.spec.cats).enumerate() {
            if let Some(&bad) = ids.iter().find(|&&id| id as usize >= spec.vocab) {
                return Err(CsmfError::Data(format!(
                    "categorical feature {k}: id {bad} outside vocabulary of {}",
                    spec.vocab
                )));
            }
        }
        Ok(())
    }

    fn assemble(&self, feats: &[&Features], prefix: Stage) -> Result<Matrix> {
        let mut x = Matrix::zeros(feats.len(), self.input_layout.width());
        for (b, f) in feats.iter().enumerate() {
            self.check(f)?;
            let row = x.row_mut(b);
            for (k, ids) in f.cats.iter().enumerate() {
                let table = &self.embeddings[k];
                let w = table.values.cols();
                for &id in ids {
                    let base = id as usize * w;
                    for c in 0..w {
                        if table.is_active(base + c, prefix, self.structure) {
                            row[self.col_map[k][c]] += table.value(base + c);
                        }
                    }
                }
            }
            for (k, &v) in f.dense.iter().enumerate() {
                row[self.dense_cols[k]] = v;
            }
        }
        Ok(x)
    }

    pub fn forward_batch(&self, feats: &[&Features], prefix: Stage) -> Result<TowerPass> {
        let mut acts = vec![self.assemble(feats, prefix)?];
        for l in &self.layers {
            let next = l.forward_batch(acts.last().expect("nonempty"), prefix)?;
            acts.push(next);
        }
        Ok(TowerPass { prefix, acts })
    }

    /// Accumulates parameter gradients for `dL/d output` into `grads`.
    pub fn backward_batch(
        &self,
        feats: &[&Features],
        pass: &TowerPass,
        grad_out: &Matrix,
        train: TrainSet,
        grads: &mut TowerGrads,
    ) -> Result<()> {
        let mut g = grad_out.clone();
        for (k, l) in self.layers.iter().enumerate().rev() {
            g = l.backward_batch(&pass.acts[k], &pass.acts[k + 1], &g, pass.prefix, train, &mut grads.layers[k])?;
        }
        for (b, f) in feats.iter().enumerate() {
            let row = g.row(b);
            for (k, ids) in f.cats.iter().enumerate() {
                let table = &self.embeddings[k];
                let w = table.values.cols();
                for &id in ids {
                    let base = id as usize * w;
                    for c in 0..w {
                        let i = base + c;
                        if train.allows(table.state(i)) && table.is_active(i, pass.prefix, self.structure) {
                            grads.embeddings[k].as_mut_slice()[i] += row[self.col_map[k][c]];
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoTowerModel {
    pub config: ModelConfig,
    pub features: FeatureSpec,
    pub user: Tower,
    pub item: Tower,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub user: TowerGrads,
    pub item: TowerGrads,
}

impl ModelGrads {
    pub fn zeros_like(m: &TwoTowerModel) -> Self {
        Self { user: TowerGrads::zeros_like(&m.user), item: TowerGrads::zeros_like(&m.item) }
    }

    /// Gradient slices aligned with [`ParameterStore::tensors`].
    pub fn flat(&self) -> Vec<&[f64]> {
        let mut v = self.user.flat();
        v.extend(self.item.flat());
        v
    }

    pub fn tower_mut(&mut self, side: Side) -> &mut TowerGrads {
        match side {
            Side::User => &mut self.user,
            Side::Item => &mut self.item,
        }
    }
}

impl TwoTowerModel {
    pub fn new(config: ModelConfig, features: FeatureSpec, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let user = Tower::build(&features.user, &config, rng)?;
        let item = Tower::build(&features.item, &config, rng)?;
        Ok(Self { config, features, user, item })
    }

    pub fn tower(&self, side: Side) -> &Tower {
        match side {
            Side::User => &self.user,
            Side::Item => &self.item,
        }
    }

    pub fn final_layout(&self) -> BlockLayout {
        self.user.output_layout()
    }

    /// Encodes one entity under `prefix`.
    pub fn encode(&self, side: Side, features: &Features, prefix: Stage) -> Result<Vec<f64>> {
        let pass = self.tower(side).forward_batch(&[features], prefix)?;
        Ok(pass.output().row(0).to_vec())
    }

    /// Encodes many entities, in chunks, under `prefix`.
    pub fn encode_many(&self, side: Side, feats: &[&Features], prefix: Stage) -> Result<Matrix> {
        let width = self.final_layout().width();
        let mut out = Matrix::zeros(feats.len(), width);
        for (c, chunk) in feats.chunks(512).enumerate() {
            let pass = self.tower(side).forward_batch(chunk, prefix)?;
            for r in 0..chunk.len() {
                out.row_mut(c * 512 + r).copy_from_slice(pass.output().row(r));
            }
        }
        Ok(out)
    }

    /// `s_d`, `s_o`, `s_r` for one pair, each from its own prefix pass.
    pub fn prefix_scores(&self, user: &Features, item: &Features) -> Result<[f64; 3]> {
        let layout = self.final_layout();
        let mut out = [0.0; 3];
        for s in Stage::ALL {
            let u = self.encode(Side::User, user, s)?;
            let i = self.encode(Side::Item, item, s)?;
            out[s.index()] = score(&u, &i, s, layout)?;
        }
        Ok(out)
    }

    /// Weighted user vectors and raw item vectors, all encoded with the full
    /// prefix. Requires every parameter to be committed.
    pub fn export_serving_vectors(
        &self,
        users: &[&Features],
        items: &[&Features],
        weights: ServingWeights,
    ) -> Result<(Matrix, Matrix)> {
        weights.validate()?;
        if self.census().trainable_total() != 0 {
            return Err(CsmfError::Lifecycle("export requires a fully committed model".into()));
        }
        let mut u = self.encode_many(Side::User, users, Stage::Conversion)?;
        scale_user_vectors(&mut u, self.final_layout(), weights);
        let i = self.encode_many(Side::Item, items, Stage::Conversion)?;
        Ok((u, i))
    }
}

/// Multiplies each user-vector segment by its serving scale.
pub fn scale_user_vectors(users: &mut Matrix, layout: BlockLayout, weights: ServingWeights) {
    let scales = weights.segment_scales();
    for r in 0..users.rows() {
        let row = users.row_mut(r);
        for s in Stage::ALL {
            for c in layout.range(s) {
                row[c] *= scales[s.index()];
            }
        }
    }
}

/// Inner product restricted to the segments up to `objective`.
pub fn score(u: &[f64], i: &[f64], objective: Stage, layout: BlockLayout) -> Result<f64> {
    if u.len() != layout.width() || i.len() != layout.width() {
        return shape_err(format!("score expects width {}, got {} and {}", layout.width(), u.len(), i.len()));
    }
    let n = layout.prefix_width(objective);
    Ok(dot(&u[..n], &i[..n]))
}

/// Per-segment inner products `(e_d·v_d, e_o·v_o, e_r·v_r)`.
pub fn segment_dots(u: &[f64], i: &[f64], layout: BlockLayout) -> [f64; 3] {
    let mut out = [0.0; 3];
    for s in Stage::ALL {
        let r = layout.range(s);
        out[s.index()] = dot(&u[r.clone()], &i[r]);
    }
    out
}

impl ParameterStore for TwoTowerModel {
    fn structure(&self) -> Structure {
        self.config.structure
    }

    fn tensors(&self) -> Vec<&ParamTensor> {
        let mut v = Vec::new();
        for t in [&self.user, &self.item] {
            v.extend(t.embeddings.iter());
            for l in &t.layers {
                v.push(&l.weights);
                v.push(&l.bias);
            }
        }
        v
    }

    fn groups_mut(&mut self) -> Vec<ParamGroupMut<'_>> {
        let mut out = Vec::new();
        for (side, t) in [("user", &mut self.user), ("item", &mut self.item)] {
            for (k, e) in t.embeddings.iter_mut().enumerate() {
                out.push(ParamGroupMut { name: format!("{side}.emb{k}"), tensors: vec![e] });
            }
            for (k, l) in t.layers.iter_mut().enumerate() {
                out.push(ParamGroupMut { name: format!("{side}.layer{k}"), tensors: vec![&mut l.weights, &mut l.bias] });
            }
        }
        out
    }
}

const VECTOR_MAGIC: &str = "csmf-vectors";

/// Writes `csmf-vectors v1 <m> <m_d> <m_o> <m_r>` then, per entity, a `u32`
/// id and `m` little-endian `f32` values.
pub fn write_vectors(path: &Path, layout: BlockLayout, ids: &[u32], vectors: &Matrix) -> Result<()> {
    if ids.len() != vectors.rows() || vectors.cols() != layout.width() {
        return shape_err("ids / vectors / layout disagree");
    }
    let mut w = BufWriter::new(File::create(path)?);
    let [d, o, r] = layout.sizes;
    writeln!(w, "{VECTOR_MAGIC} v1 {} {d} {o} {r}", layout.width())?;
    for (k, id) in ids.iter().enumerate() {
        w.write_all(&id.to_le_bytes())?;
        for v in vectors.row(k) {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_vectors(path: &Path) -> Result<(BlockLayout, Vec<u32>, Matrix)> {
    let mut rd = BufReader::new(File::open(path)?);
    let mut header = String::new();
    rd.read_line(&mut header)?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 6 || parts[0] != VECTOR_MAGIC {
        return Err(CsmfError::Incompatible(format!("{} is not a vector file", path.display())));
    }
    if parts[1] != "v1" {
        return Err(CsmfError::Incompatible(format!("unsupported vector file version {}", parts[1])));
    }
    let nums: Vec<usize> = parts[2..]
        .iter()
        .map(|p| p.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| CsmfError::Incompatible(format!("bad vector header: {e}")))?;
    let layout = BlockLayout::new(nums[1], nums[2], nums[3])?;
    if layout.width() != nums[0] {
        return Err(CsmfError::Incompatible("vector header widths do not add up".into()));
    }
    let mut body = Vec::new();
    rd.read_to_end(&mut body)?;
    let rec = 4 + 4 * nums[0];
    if body.len() % rec != 0 {
        return Err(CsmfError::Incompatible("truncated vector file".into()));
    }
    let n = body.len() / rec;
    let mut ids = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * nums[0]);
    for chunk in body.chunks_exact(rec) {
        ids.push(u32::from_le_bytes(chunk[..4].try_into().expect("4 bytes")));
        for v in chunk[4..].chunks_exact(4) {
            data.push(f64::from(f32::from_le_bytes(v.try_into().expect("4 bytes"))));
        }
    }
    Ok((layout, ids, Matrix::from_vec(n, nums[0], data)?))
}
