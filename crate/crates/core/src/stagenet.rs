//! Stage-aware masked layers.
//!
//! Each layer's output units are split into contiguous exposure / click /
//! conversion blocks. A weight from source unit `a` to target unit `b` is a
//! structural zero whenever `a`'s block belongs to a later stage than `b`'s,
//! which makes the first `n_d` (and `n_d + n_o`) outputs of every layer
//! independent of anything trained after those blocks were committed.
//!
//! Every parameter also carries a lifecycle [`ParamState`]. Forward passes run
//! under an *active prefix*: parameters belonging to later stages contribute
//! nothing, so a prefix-`D` pass reproduces exactly what the exposure stage
//! committed.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, shape_err, CsmfError, Result};
use crate::numerics::{gaussian_init, matmul, matmul_at, Matrix, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "D")]
    Exposure = 0,
    #[serde(rename = "O")]
    Click = 1,
    #[serde(rename = "R")]
    Conversion = 2,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Exposure, Stage::Click, Stage::Conversion];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Stage> {
        Self::ALL.get(i).copied()
    }

    pub fn next(self) -> Option<Stage> {
        Self::from_index(self.index() + 1)
    }

    pub fn label(self) -> &'static str {
        match self {
            Stage::Exposure => "D",
            Stage::Click => "O",
            Stage::Conversion => "R",
        }
    }

    /// Name of the objective trained in this stage.
    pub fn objective(self) -> &'static str {
        match self {
            Stage::Exposure => "exposure",
            Stage::Click => "click",
            Stage::Conversion => "conversion",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        match s {
            "D" | "d" | "exposure" => Some(Stage::Exposure),
            "O" | "o" | "click" => Some(Stage::Click),
            "R" | "r" | "conversion" => Some(Stage::Conversion),
            _ => None,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Whether later-stage blocks are shielded from earlier ones by structural
/// zeros (`On`) or the network is a plain dense net masked per weight (`Off`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    #[default]
    On,
    Off,
}

/// Per-stage unit counts of a layer, contiguous in stage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockLayout {
    pub sizes: [usize; 3],
}

impl BlockLayout {
    pub fn new(n_d: usize, n_o: usize, n_r: usize) -> Result<Self> {
        if n_d == 0 {
            return config_err("the exposure block must have at least one unit");
        }
        Ok(Self { sizes: [n_d, n_o, n_r] })
    }

    /// Splits `width` by the given fractions; rounding slack goes to the
    /// exposure block.
    pub fn split(width: usize, fractions: [f64; 3]) -> Result<Self> {
        let total: f64 = fractions.iter().sum();
        if fractions.iter().any(|f| *f < 0.0) || !(total > 0.0) {
            return config_err(format!("invalid block fractions {fractions:?}"));
        }
        let n_o = ((fractions[1] / total) * width as f64).round() as usize;
        let n_r = ((fractions[2] / total) * width as f64).round() as usize;
        if n_o + n_r >= width {
            return config_err(format!("width {width} too small for fractions {fractions:?}"));
        }
        Self::new(width - n_o - n_r, n_o, n_r)
    }

    pub fn width(&self) -> usize {
        self.sizes.iter().sum()
    }

    /// Number of leading units up to and including `stage`'s block.
    pub fn prefix_width(&self, stage: Stage) -> usize {
        self.sizes[..=stage.index()].iter().sum()
    }

    pub fn range(&self, stage: Stage) -> std::ops::Range<usize> {
        let start = self.sizes[..stage.index()].iter().sum();
        start..start + self.sizes[stage.index()]
    }

    pub fn stage_of(&self, unit: usize) -> Stage {
        if unit < self.sizes[0] {
            Stage::Exposure
        } else if unit < self.sizes[0] + self.sizes[1] {
            Stage::Click
        } else {
            Stage::Conversion
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamState {
    StructuralZero,
    Trainable(Stage),
    Frozen(Stage),
    ZeroLocked,
}

impl ParamState {
    pub fn to_byte(self) -> u8 {
        match self {
            ParamState::StructuralZero => 0,
            ParamState::Trainable(s) => 1 + s as u8,
            ParamState::Frozen(s) => 4 + s as u8,
            ParamState::ZeroLocked => 7,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            0 => ParamState::StructuralZero,
            1..=3 => ParamState::Trainable(Stage::from_index(usize::from(b - 1))?),
            4..=6 => ParamState::Frozen(Stage::from_index(usize::from(b - 4))?),
            7 => ParamState::ZeroLocked,
            _ => return None,
        })
    }

    pub fn is_zero_state(self) -> bool {
        matches!(self, ParamState::StructuralZero | ParamState::ZeroLocked)
    }
}

/// The set of parameters an optimizer may move.
///
/// Normally that is `Trainable(stage)`. During accuracy recovery the
/// parameters just frozen for `stage` are re-opened instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainSet {
    pub stage: Stage,
    pub reopened: bool,
}

impl TrainSet {
    pub fn training(stage: Stage) -> Self {
        Self { stage, reopened: false }
    }

    pub fn recovering(stage: Stage) -> Self {
        Self { stage, reopened: true }
    }

    #[inline]
    pub fn allows(&self, state: ParamState) -> bool {
        match state {
            ParamState::Trainable(s) => !self.reopened && s == self.stage,
            ParamState::Frozen(s) => self.reopened && s == self.stage,
            _ => false,
        }
    }
}

/// A block of parameters with per-entry lifecycle state.
///
/// `targets[i]` is the block stage of the unit (or embedding coordinate) that
/// parameter `i` writes into. It never changes.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub values: Matrix,
    states: Vec<ParamState>,
    targets: Vec<Stage>,
}

impl ParamTensor {
    pub fn new(values: Matrix, states: Vec<ParamState>, targets: Vec<Stage>) -> Result<Self> {
        let n = values.as_slice().len();
        if states.len() != n || targets.len() != n {
            return shape_err("state/target grid does not match parameter count");
        }
        Ok(Self { values, states, targets })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> &[ParamState] {
        &self.states
    }

    pub fn targets(&self) -> &[Stage] {
        &self.targets
    }

    pub fn state(&self, i: usize) -> ParamState {
        self.states[i]
    }

    pub fn target(&self, i: usize) -> Stage {
        self.targets[i]
    }

    pub fn value(&self, i: usize) -> f64 {
        self.values.as_slice()[i]
    }

    /// Changes one parameter's state. Zero states force the value to 0.
    pub fn set_state(&mut self, i: usize, state: ParamState) {
        self.states[i] = state;
        if state.is_zero_state() {
            self.values.as_mut_slice()[i] = 0.0;
        }
    }

    pub fn set_value(&mut self, i: usize, v: f64) {
        self.values.as_mut_slice()[i] = v;
    }

    /// Whether parameter `i` participates in a pass under `prefix`.
    #[inline]
    pub fn is_active(&self, i: usize, prefix: Stage, structure: Structure) -> bool {
        match self.states[i] {
            ParamState::StructuralZero | ParamState::ZeroLocked => false,
            ParamState::Trainable(s) | ParamState::Frozen(s) => match structure {
                Structure::On => self.targets[i] <= prefix,
                Structure::Off => s <= prefix,
            },
        }
    }

    /// Copy of the values with inactive entries zeroed.
    pub fn effective(&self, prefix: Stage, structure: Structure) -> Matrix {
        let mut m = self.values.clone();
        for (i, v) in m.as_mut_slice().iter_mut().enumerate() {
            if !self.is_active(i, prefix, structure) {
                *v = 0.0;
            }
        }
        m
    }

    /// Zeroes gradient entries that `train` may not move or that were inactive.
    pub fn mask_grad(&self, grad: &mut [f64], prefix: Stage, structure: Structure, train: TrainSet) {
        for (i, g) in grad.iter_mut().enumerate() {
            if !(train.allows(self.states[i]) && self.is_active(i, prefix, structure)) {
                *g = 0.0;
            }
        }
    }

    /// Rounds every value through 32-bit precision.
    pub fn quantize_f32(&mut self) {
        for v in self.values.as_mut_slice() {
            *v = f64::from(*v as f32);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedLayer {
    /// `out × in`.
    pub weights: ParamTensor,
    /// `out × 1`.
    pub bias: ParamTensor,
    pub in_layout: BlockLayout,
    pub out_layout: BlockLayout,
    pub activation: Activation,
    pub structure: Structure,
}

/// Gradients of one layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl LayerGrads {
    pub fn zeros_like(layer: &MaskedLayer) -> Self {
        Self {
            weights: Matrix::zeros(layer.out_width(), layer.in_width()),
            bias: vec![0.0; layer.out_width()],
        }
    }
}

/// Builds a layer with Gaussian weights and zero biases.
///
/// Every non-structural parameter starts `Trainable(D)`: the exposure stage
/// trains the whole network before the first commit hands capacity on.
pub fn build_layer(
    in_layout: BlockLayout,
    out_layout: BlockLayout,
    activation: Activation,
    structure: Structure,
    rng: &mut RngStream,
    init_scale: f64,
) -> Result<MaskedLayer> {
    if in_layout.sizes[0] == 0 || out_layout.sizes[0] == 0 {
        return config_err("the exposure block must have at least one unit");
    }
    let (n_in, n_out) = (in_layout.width(), out_layout.width());
    let mut values = gaussian_init(rng, n_out, n_in, init_scale)?;
    let mut states = Vec::with_capacity(n_in * n_out);
    let mut targets = Vec::with_capacity(n_in * n_out);
    for b in 0..n_out {
        let tb = out_layout.stage_of(b);
        for a in 0..n_in {
            let sa = in_layout.stage_of(a);
            targets.push(tb);
            if structure == Structure::On && sa > tb {
                states.push(ParamState::StructuralZero);
                values.set(b, a, 0.0);
            } else {
                states.push(ParamState::Trainable(Stage::Exposure));
            }
        }
    }
    let weights = ParamTensor::new(values, states, targets)?;
    let bias = ParamTensor::new(
        Matrix::zeros(n_out, 1),
        vec![ParamState::Trainable(Stage::Exposure); n_out],
        (0..n_out).map(|b| out_layout.stage_of(b)).collect(),
    )?;
    Ok(MaskedLayer { weights, bias, in_layout, out_layout, activation, structure })
}

impl MaskedLayer {
    pub fn in_width(&self) -> usize {
        self.in_layout.width()
    }

    pub fn out_width(&self) -> usize {
        self.out_layout.width()
    }

    /// Batched forward: `x` is `batch × in`, result is `batch × out`.
    pub fn forward_batch(&self, x: &Matrix, prefix: Stage) -> Result<Matrix> {
        if x.cols() != self.in_width() {
            return shape_err(format!("layer expects width {}, got {}", self.in_width(), x.cols()));
        }
        let wt = self.weights.effective(prefix, self.structure).transpose();
        let b = self.bias.effective(prefix, self.structure);
        let mut z = matmul(x, &wt)?;
        for r in 0..z.rows() {
            for (v, bias) in z.row_mut(r).iter_mut().zip(b.as_slice()) {
                *v += bias;
                if self.activation == Activation::Relu && *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        Ok(z)
    }

    /// Single-vector forward.
    pub fn forward(&self, input: &[f64], prefix: Stage) -> Result<Vec<f64>> {
        let x = Matrix::from_vec(1, input.len(), input.to_vec())?;
        Ok(self.forward_batch(&x, prefix)?.into_vec())
    }

    /// Batched backward given the forward input `x`, the forward output `out`
    /// and `dL/d out`. Returns `dL/d x`; parameter gradients are *added* into
    /// `grads`, restricted to parameters `train` may move.
    pub fn backward_batch(
        &self,
        x: &Matrix,
        out: &Matrix,
        grad_out: &Matrix,
        prefix: Stage,
        train: TrainSet,
        grads: &mut LayerGrads,
    ) -> Result<Matrix> {
        if out.rows() != x.rows()
            || grad_out.rows() != x.rows()
            || out.cols() != self.out_width()
            || grad_out.cols() != self.out_width()
            || x.cols() != self.in_width()
        {
            return shape_err("backward shapes inconsistent with forward");
        }
        let mut dz = grad_out.clone();
        if self.activation == Activation::Relu {
            for (g, o) in dz.as_mut_slice().iter_mut().zip(out.as_slice()) {
                if *o <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        let mut dw = matmul_at(&dz, x)?;
        self.weights.mask_grad(dw.as_mut_slice(), prefix, self.structure, train);
        for (acc, g) in grads.weights.as_mut_slice().iter_mut().zip(dw.as_slice()) {
            *acc += g;
        }
        let mut db = vec![0.0; self.out_width()];
        for r in 0..dz.rows() {
            for (acc, g) in db.iter_mut().zip(dz.row(r)) {
                *acc += g;
            }
        }
        self.bias.mask_grad(&mut db, prefix, self.structure, train);
        for (acc, g) in grads.bias.iter_mut().zip(&db) {
            *acc += g;
        }
        let w = self.weights.effective(prefix, self.structure);
        matmul(&dz, &w)
    }

    /// Single-vector backward returning `(grad_in, param_grads)`.
    pub fn backward(
        &self,
        input: &[f64],
        grad_out: &[f64],
        prefix: Stage,
        train: TrainSet,
    ) -> Result<(Vec<f64>, LayerGrads)> {
        let x = Matrix::from_vec(1, input.len(), input.to_vec())?;
        let out = self.forward_batch(&x, prefix)?;
        let g = Matrix::from_vec(1, grad_out.len(), grad_out.to_vec())?;
        let mut grads = LayerGrads::zeros_like(self);
        let gin = self.backward_batch(&x, &out, &g, prefix, train, &mut grads)?;
        Ok((gin.into_vec(), grads))
    }
}

/// A named prune group: all tensors pruned together at a stage commit.
pub struct ParamGroupMut<'a> {
    pub name: String,
    pub tensors: Vec<&'a mut ParamTensor>,
}

/// Anything that owns an ordered set of parameter tensors.
///
/// Tensor order is stable; gradients, optimizer moments and checkpoints are
/// aligned with it.
pub trait ParameterStore {
    fn structure(&self) -> Structure;
    fn tensors(&self) -> Vec<&ParamTensor>;
    fn groups_mut(&mut self) -> Vec<ParamGroupMut<'_>>;

    fn tensors_mut(&mut self) -> Vec<&mut ParamTensor> {
        self.groups_mut().into_iter().flat_map(|g| g.tensors).collect()
    }

    fn census(&self) -> Census {
        let mut c = Census::default();
        for t in self.tensors() {
            for &s in t.states() {
                c.add(s);
            }
        }
        c
    }

    /// SHA-256 over the positions and bit patterns of all values whose state
    /// satisfies `pred`.
    fn digest(&self, pred: &dyn Fn(ParamState) -> bool) -> String {
        let mut h = Sha256::new();
        for (ti, t) in self.tensors().iter().enumerate() {
            for (i, &s) in t.states().iter().enumerate() {
                if pred(s) {
                    h.update((ti as u64).to_le_bytes());
                    h.update((i as u64).to_le_bytes());
                    h.update(t.value(i).to_bits().to_le_bytes());
                }
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn frozen_digest(&self, stage: Stage) -> String {
        self.digest(&|s| s == ParamState::Frozen(stage))
    }

    /// Checks that zero states hold exactly zero.
    fn check_zero_states(&self) -> Result<()> {
        for (ti, t) in self.tensors().iter().enumerate() {
            for (i, &s) in t.states().iter().enumerate() {
                if s.is_zero_state() && t.value(i) != 0.0 {
                    return Err(CsmfError::Lifecycle(format!(
                        "tensor {ti} entry {i} is {s:?} but holds {}",
                        t.value(i)
                    )));
                }
            }
        }
        Ok(())
    }

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn quantize_f32(&mut self) {
        for t in self.tensors_mut() {
            t.quantize_f32();
        }
    }
}

/// State counts over a whole store.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Census {
    pub structural_zero: usize,
    pub trainable: [usize; 3],
    pub frozen: [usize; 3],
    pub zero_locked: usize,
}

impl Census {
    fn add(&mut self, s: ParamState) {
        match s {
            ParamState::StructuralZero => self.structural_zero += 1,
            ParamState::Trainable(st) => self.trainable[st.index()] += 1,
            ParamState::Frozen(st) => self.frozen[st.index()] += 1,
            ParamState::ZeroLocked => self.zero_locked += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.structural_zero
            + self.zero_locked
            + self.trainable.iter().sum::<usize>()
            + self.frozen.iter().sum::<usize>()
    }

    pub fn trainable_total(&self) -> usize {
        self.trainable.iter().sum()
    }
}

/// A bare stack of layers; the smallest [`ParameterStore`].
#[derive(Debug, Clone)]
pub struct LayerStack {
    pub layers: Vec<MaskedLayer>,
}

impl ParameterStore for LayerStack {
    fn structure(&self) -> Structure {
        self.layers.first().map_or(Structure::On, |l| l.structure)
    }

    fn tensors(&self) -> Vec<&ParamTensor> {
        self.layers.iter().flat_map(|l| [&l.weights, &l.bias]).collect()
    }

    fn groups_mut(&mut self) -> Vec<ParamGroupMut<'_>> {
        self.layers
            .iter_mut()
            .enumerate()
            .map(|(i, l)| ParamGroupMut {
                name: format!("layer{i}"),
                tensors: vec![&mut l.weights, &mut l.bias],
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moments aligned with a store's tensor order.
///
/// Created fresh for every stage (and every recovery pass): the movable set
/// changes at each transition.
#[derive(Debug, Clone)]
pub struct AdamState {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new<S: ParameterStore + ?Sized>(store: &S, cfg: AdamConfig) -> Result<Self> {
        if !(cfg.lr >= 0.0) || !(cfg.eps > 0.0) {
            return config_err(format!("invalid Adam settings {cfg:?}"));
        }
        let sizes: Vec<usize> = store.tensors().iter().map(|t| t.len()).collect();
        Ok(Self {
            cfg,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One Adam update. Only parameters admitted by `train` move.
    pub fn step<S: ParameterStore + ?Sized>(
        &mut self,
        store: &mut S,
        grads: &[&[f64]],
        train: TrainSet,
    ) -> Result<()> {
        adam_step(store, grads, &mut self.m, &mut self.v, self.cfg, self.step + 1, train)?;
        self.step += 1;
        Ok(())
    }
}

/// Adam update at 1-based `step_index` over moment buffers `m`, `v`.
pub fn adam_step<S: ParameterStore + ?Sized>(
    store: &mut S,
    grads: &[&[f64]],
    m: &mut [Vec<f64>],
    v: &mut [Vec<f64>],
    cfg: AdamConfig,
    step_index: u64,
    train: TrainSet,
) -> Result<()> {
    if cfg.lr < 0.0 || !cfg.lr.is_finite() {
        return config_err(format!("learning rate must be non-negative, got {}", cfg.lr));
    }
    let mut tensors = store.tensors_mut();
    if grads.len() != tensors.len() || m.len() != tensors.len() || v.len() != tensors.len() {
        return shape_err("gradients not aligned with the parameter store");
    }
    let bc1 = 1.0 - cfg.beta1.powi(step_index as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step_index as i32);
    for (ti, t) in tensors.iter_mut().enumerate() {
        let g = grads[ti];
        if g.len() != t.len() {
            return shape_err(format!("gradient {ti} has {} entries, tensor has {}", g.len(), t.len()));
        }
        let (mt, vt) = (&mut m[ti], &mut v[ti]);
        for i in 0..g.len() {
            if !train.allows(t.state(i)) {
                continue;
            }
            mt[i] = cfg.beta1 * mt[i] + (1.0 - cfg.beta1) * g[i];
            vt[i] = cfg.beta2 * vt[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mhat = mt[i] / bc1;
            let vhat = vt[i] / bc2;
            let upd = cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            t.set_value(i, t.value(i) - upd);
        }
    }
    Ok(())
}
