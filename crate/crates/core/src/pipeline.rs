//! The staged lifecycle: train → prune → recover → freeze for exposure and
//! click, train → freeze for conversion. Also the two single-stage baselines.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{batches, recovery_subset, stage_view, Catalog, Dataset, Features, RequestRecord, StageExample};
use crate::error::{config_err, CsmfError, Result};
use crate::eval::{evaluate, evaluate_stage_score, EvalSpec, MetricRow, MetricsReport};
use crate::numerics::{dot, Matrix, RngPosition, RngStream};
use crate::objectives::{
    aml_loss, aml_margin, assemble_negatives, softmax_loss, upstream_score, ContrastiveBatch, MarginConfig, Positive,
    ScoreLoss,
};
use crate::pruning::{commit_stage, freeze_stage, PruneMethod, TransitionReport};
use crate::stagenet::{AdamConfig, AdamState, ParameterStore, Stage, Structure, TrainSet};
use crate::towers::{FeatureSpec, ModelConfig, ModelGrads, ServingWeights, TwoTowerModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Csmf,
    /// One model trained on clicks and conversions together.
    MixedSingle,
    /// An independent model per objective (click, conversion).
    SeparatePerObjective,
}

impl Mode {
    pub fn parse(s: &str) -> Option<Mode> {
        match s {
            "csmf" => Some(Mode::Csmf),
            "mixed_single" => Some(Mode::MixedSingle),
            "separate_per_objective" => Some(Mode::SeparatePerObjective),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    /// Training epochs for exposure, click, conversion.
    pub epochs: [usize; 3],
    /// Epochs of each single-stage baseline model.
    pub baseline_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub tau: f64,
    pub prune_method: PruneMethod,
    pub margin: MarginConfig,
    /// Margin loss for the click and conversion stages; plain softmax when off.
    pub aml: bool,
    pub recovery_fraction: f64,
    pub recovery_epochs: usize,
    pub max_negatives: usize,
    pub mode: Mode,
    /// Subtract log item frequency from logits.
    pub log_q: bool,
    /// Measure the stage score before and after recovery.
    pub stage_eval: bool,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            epochs: [3, 6, 6],
            baseline_epochs: 6,
            batch_size: 256,
            lr: 1e-3,
            tau: 0.75,
            prune_method: PruneMethod::Cpp,
            margin: MarginConfig::default(),
            aml: true,
            recovery_fraction: 0.1,
            recovery_epochs: 1,
            max_negatives: 63,
            mode: Mode::Csmf,
            log_q: false,
            stage_eval: true,
            seed: 7,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.margin.validate()?;
        if self.batch_size < 2 {
            return config_err("batch size must be at least 2");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return config_err(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return config_err(format!("tau must lie in (0, 1), got {}", self.tau));
        }
        if !(self.recovery_fraction > 0.0 && self.recovery_fraction <= 1.0) {
            return config_err(format!("recovery fraction must lie in (0, 1], got {}", self.recovery_fraction));
        }
        if self.max_negatives == 0 {
            return config_err("max_negatives must be at least 1");
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, ..AdamConfig::default() }
    }
}

/// What one optimisation pass trains and against which score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Phase {
    /// Whose positives are used.
    pub positives: Stage,
    /// Negative-sampling rule.
    pub sampling: Stage,
    /// Forward prefix; the score is the dot product over its width.
    pub prefix: Stage,
    /// Margin loss against upstream scores instead of plain softmax.
    pub margin: bool,
    pub train: TrainSet,
}

impl Phase {
    /// Main training pass of a stage. Exposure trains the full-vector dot.
    pub fn train(stage: Stage, aml: bool) -> Self {
        let prefix = if stage == Stage::Exposure { Stage::Conversion } else { stage };
        Self { positives: stage, sampling: stage, prefix, margin: aml && stage != Stage::Exposure, train: TrainSet::training(stage) }
    }

    /// Recovery pass: retained parameters of `stage` against its serving score.
    pub fn recover(stage: Stage, aml: bool) -> Self {
        Self {
            positives: stage,
            sampling: stage,
            prefix: stage,
            margin: aml && stage != Stage::Exposure,
            train: TrainSet::recovering(stage),
        }
    }

    /// Single-stage baseline on `positives`, full dot, in-batch negatives.
    pub fn single(positives: Stage) -> Self {
        Self {
            positives,
            sampling: Stage::Click,
            prefix: Stage::Conversion,
            margin: false,
            train: TrainSet::training(Stage::Exposure),
        }
    }
}

/// Records plus the catalog of every user and item they mention.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Vec<RequestRecord>,
    pub test: Vec<RequestRecord>,
    pub catalog: Catalog,
}

impl Corpus {
    pub fn new(data: Dataset) -> Result<Self> {
        let catalog = data.catalog()?;
        Ok(Self { train: data.train, test: data.test, catalog })
    }
}

/// Positives of a record set with per-record candidate lists and item
/// frequencies.
pub struct TrainView<'a> {
    pub records: &'a [RequestRecord],
    pub catalog: &'a Catalog,
    unexposed: Vec<Vec<u32>>,
    /// Log frequency per item and the log frequency of a single occurrence.
    log_q: Option<(HashMap<u32, f64>, f64)>,
}

impl<'a> TrainView<'a> {
    pub fn new(records: &'a [RequestRecord], catalog: &'a Catalog, positives: &[StageExample], log_q: bool) -> Self {
        let unexposed = records.iter().map(RequestRecord::unexposed_ids).collect();
        let log_q = log_q.then(|| {
            let mut counts: HashMap<u32, f64> = HashMap::new();
            for ex in positives {
                *counts.entry(records[ex.record].exposed[ex.slot].item_id).or_default() += 1.0;
            }
            let total = positives.len().max(1) as f64;
            (counts.into_iter().map(|(id, c)| (id, (c / total).ln())).collect(), (1.0 / total).ln())
        });
        Self { records, catalog, unexposed, log_q }
    }

    fn log_q(&self, item: u32) -> f64 {
        match &self.log_q {
            // unseen items count as seen once
            Some((m, once)) => m.get(&item).copied().unwrap_or(*once),
            None => 0.0,
        }
    }

    pub fn assemble(&self, batch: &[StageExample], sampling: Stage, rng: &mut RngStream, max_negatives: usize) -> Result<ContrastiveBatch> {
        let positives: Vec<Positive<'_>> = batch
            .iter()
            .map(|ex| {
                let r = &self.records[ex.record];
                Positive { user_id: r.user_id, item_id: r.exposed[ex.slot].item_id, unexposed: &self.unexposed[ex.record] }
            })
            .collect();
        assemble_negatives(&positives, sampling, rng, max_negatives)
    }
}

/// Loss, per-example margins and parameter gradients of one batch.
#[derive(Debug, Clone)]
pub struct BatchResult {
    pub loss: f64,
    /// Margins per example (empty for the softmax loss).
    pub margins: Vec<Vec<f64>>,
    pub grads: ModelGrads,
}

fn prefix_dot(u: &[f64], i: &[f64], width: usize) -> f64 {
    dot(&u[..width], &i[..width])
}

/// Forward + backward of one contrastive batch. The mean over examples is
/// the loss.
pub fn batch_loss(model: &TwoTowerModel, view: &TrainView<'_>, batch: &ContrastiveBatch, phase: Phase, margin: &MarginConfig) -> Result<BatchResult> {
    let ufeats: Vec<&Features> = batch.users.iter().map(|&id| view.catalog.user(id)).collect::<Result<_>>()?;
    let ifeats: Vec<&Features> = batch.items.iter().map(|&id| view.catalog.item(id)).collect::<Result<_>>()?;
    let upass = model.user.forward_batch(&ufeats, phase.prefix)?;
    let ipass = model.item.forward_batch(&ifeats, phase.prefix)?;
    let (uo, io) = (upass.output(), ipass.output());
    let layout = model.final_layout();
    let width = layout.prefix_width(phase.prefix);

    // Upstream scores. With structural zeros the leading segments of the main
    // pass equal the prefix passes exactly; without them, re-encode.

    let mut extra: Vec<(Matrix, Matrix)> = Vec::new();
    if phase.margin && model.config.structure == Structure::Off {
        for p in [Stage::Exposure, Stage::Click] {
            let u = model.user.forward_batch(&ufeats, p)?;
            let i = model.item.forward_batch(&ifeats, p)?;
            extra.push((u.output().clone(), i.output().clone()));
        }
    }
    let source = |k: usize| -> (&Matrix, &Matrix) {
        match extra.get(k) {
            Some((u, i)) => (u, i),
            None => (uo, io),
        }
    };
    let upstream = |ur: usize, ir: usize| -> f64 {
        let (du, di) = source(0);
        let (ou, oi) = source(1);
        let s_d = prefix_dot(du.row(ur), di.row(ir), layout.prefix_width(Stage::Exposure));
        let s_o = prefix_dot(ou.row(ur), oi.row(ir), layout.prefix_width(Stage::Click));
        upstream_score(phase.positives, s_d, s_o)
    };

    let n = batch.examples.len() as f64;
    let mut gu = Matrix::zeros(uo.rows(), uo.cols());
    let mut gi = Matrix::zeros(io.rows(), io.cols());
    let mut total = 0.0;
    let mut margins = Vec::new();
    for ex in &batch.examples {
        let u = uo.row(ex.user);
        let q = |j: usize| view.log_q(batch.items[j]);
        let s_pos = prefix_dot(u, io.row(ex.pos), width) - q(ex.pos);
        let s_negs: Vec<f64> = ex.negs.iter().map(|&j| prefix_dot(u, io.row(j), width) - q(j)).collect();
        let ScoreLoss { loss, grad_pos, grad_negs } = if !phase.margin {
            softmax_loss(s_pos, &s_negs)?
        } else {
            let up_pos = upstream(ex.user, ex.pos);
            let m: Vec<f64> = ex.negs.iter().map(|&j| aml_margin(up_pos, upstream(ex.user, j), margin)).collect();
            let l = aml_loss(s_pos, &s_negs, &m, margin.mode)?;
            margins.push(m);
            l
        };
        total += loss;
        for (j, g) in std::iter::once((ex.pos, grad_pos)).chain(ex.negs.iter().copied().zip(grad_negs)) {
            let g = g / n;
            let irow = io.row(j);
            let urow = gu.row_mut(ex.user);
            for c in 0..width {
                urow[c] += g * irow[c];
            }
            let girow = gi.row_mut(j);
            for c in 0..width {
                girow[c] += g * u[c];
            }
        }
    }
    let mut grads = ModelGrads::zeros_like(model);
    model.user.backward_batch(&ufeats, &upass, &gu, phase.train, &mut grads.user)?;
    model.item.backward_batch(&ifeats, &ipass, &gi, phase.train, &mut grads.item)?;
    Ok(BatchResult { loss: total / n, margins, grads })
}

/// Runs `epochs` passes over the `phase.positives` view of `records`.
/// Returns the mean batch loss of each epoch.
pub fn run_phase(
    model: &mut TwoTowerModel,
    records: &[RequestRecord],
    catalog: &Catalog,
    phase: Phase,
    epochs: usize,
    cfg: &PipelineConfig,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    run_phase_on(model, records, catalog, &stage_view(records, phase.positives), phase, epochs, cfg, rng)
}

#[allow(clippy::too_many_arguments)]
fn run_phase_on(
    model: &mut TwoTowerModel,
    records: &[RequestRecord],
    catalog: &Catalog,
    positives: &[StageExample],
    phase: Phase,
    epochs: usize,
    cfg: &PipelineConfig,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    if positives.is_empty() {
        return Err(CsmfError::Data(format!("no {} positives to train on", phase.positives.objective())));
    }
    let census = model.census();
    let movable = if phase.train.reopened {
        census.frozen[phase.train.stage.index()]
    } else {
        census.trainable[phase.train.stage.index()]
    };
    if movable == 0 {
        return Err(CsmfError::Lifecycle(format!("stage {} has no parameters to train", phase.train.stage)));
    }
    let view = TrainView::new(records, catalog, positives, cfg.log_q);
    let mut adam = AdamState::new(model, cfg.adam())?;
    let mut losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut sum = 0.0;
        let mut count = 0usize;
        for b in batches(positives, cfg.batch_size, rng) {
            let batch = match view.assemble(&b, phase.sampling, rng, cfg.max_negatives) {
                Ok(batch) => batch,
                // every positive of the batch is the same item
                Err(CsmfError::Sampling(_)) => continue,
                Err(e) => return Err(e),
            };
            let res = batch_loss(model, &view, &batch, phase, &cfg.margin)?;
            if !res.loss.is_finite() {
                return Err(CsmfError::Numeric(format!("non-finite loss in stage {}", phase.positives)));
            }
            adam.step(model, &res.grads.flat(), phase.train)?;
            sum += res.loss;
            count += 1;
        }
        if count == 0 {
            return Err(CsmfError::Data(format!("no usable {} batch", phase.positives.objective())));
        }
        losses.push(sum / count as f64);
    }
    Ok(losses)
}

/// Main training pass of `stage`.
pub fn train_stage(model: &mut TwoTowerModel, records: &[RequestRecord], catalog: &Catalog, stage: Stage, cfg: &PipelineConfig) -> Result<Vec<f64>> {
    let mut rng = RngStream::derive(cfg.seed, &format!("train-{stage}"));
    run_phase(model, records, catalog, Phase::train(stage, cfg.aml), cfg.epochs[stage.index()], cfg, &mut rng)
}

/// Re-tunes the retained parameters of a just-committed stage on the
/// recovery subset. They stay frozen afterwards.
pub fn recover_stage(model: &mut TwoTowerModel, records: &[RequestRecord], catalog: &Catalog, stage: Stage, cfg: &PipelineConfig) -> Result<Vec<f64>> {
    let census = model.census();
    if stage == Stage::Conversion || census.trainable[stage.index()] != 0 || census.frozen[stage.index()] == 0 {
        return Err(CsmfError::Lifecycle(format!("stage {stage} is not awaiting recovery")));
    }
    let subset = recovery_subset(records, cfg.recovery_fraction, cfg.seed)?;
    let mut rng = RngStream::derive(cfg.seed, &format!("recover-{stage}"));
    run_phase(model, &subset, catalog, Phase::recover(stage, cfg.aml), cfg.recovery_epochs, cfg, &mut rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    /// Which model the stage belongs to.
    pub model: Role,
    pub stage: Stage,
    pub epoch_losses: Vec<f64>,
    pub transition: Option<TransitionReport>,
    pub recovery_losses: Vec<f64>,
    /// Stage-score metrics right after training, before pruning.
    pub after_training: Vec<MetricRow>,
    pub before_recovery: Vec<MetricRow>,
    pub after_recovery: Vec<MetricRow>,
    pub frozen: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Csmf,
    Mixed,
    Click,
    Conversion,
}

impl Role {
    pub fn label(self) -> &'static str {
        match self {
            Role::Csmf => "csmf",
            Role::Mixed => "mixed",
            Role::Click => "click",
            Role::Conversion => "conversion",
        }
    }
}

/// Lifecycle position stored with a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Progress {
    Fresh,
    /// Stage trained, pruned, recovered and frozen; the next one is pending.
    Committed(Stage),
    Complete,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoleModel {
    pub role: Role,
    pub model: TwoTowerModel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: PipelineConfig,
    pub features: FeatureSpec,
    pub progress: Progress,
    pub models: Vec<RoleModel>,
    /// Final positions of the random streams used so far, by label.
    pub rng: Vec<(String, RngPosition)>,
}

impl Checkpoint {
    pub fn model(&self, role: Role) -> Result<&TwoTowerModel> {
        self.models
            .iter()
            .find(|m| m.role == role)
            .map(|m| &m.model)
            .ok_or_else(|| CsmfError::Lifecycle(format!("checkpoint holds no {} model", role.label())))
    }

    /// The model that serves `objective`.
    pub fn serving_model(&self, objective: Stage) -> Result<(&TwoTowerModel, Role)> {
        let role = match (self.config.mode, objective) {
            (Mode::Csmf, _) => Role::Csmf,
            (Mode::MixedSingle, _) => Role::Mixed,
            (Mode::SeparatePerObjective, Stage::Conversion) => Role::Conversion,
            (Mode::SeparatePerObjective, _) => Role::Click,
        };
        Ok((self.model(role)?, role))
    }

    pub fn is_complete(&self) -> bool {
        self.progress == Progress::Complete
    }

    /// Metrics of a finished run. Single-stage models always rank by the
    /// full dot product they were trained on, whatever `spec.weights` says.
    pub fn evaluate(&self, corpus: &Corpus, spec: &EvalSpec) -> Result<MetricsReport> {
        if !self.is_complete() {
            return Err(CsmfError::Lifecycle("evaluation needs a completed run".into()));
        }
        let mut report = MetricsReport::default();
        for &objective in &spec.objectives {
            let (model, role) = self.serving_model(objective)?;
            let weights = if role == Role::Csmf { spec.weights } else { ServingWeights::single(Stage::Conversion) };
            let one = EvalSpec { objectives: vec![objective], ns: spec.ns.clone(), weights };
            report.rows.extend(evaluate(model, &corpus.catalog, &corpus.test, &one)?.rows);
        }
        Ok(report)
    }
}

/// Called at every stage boundary with the checkpoint so far and the reports
/// produced since the previous call.
pub type Observer<'a> = dyn FnMut(&Checkpoint, &[StageReport]) -> Result<()> + 'a;

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub checkpoint: Checkpoint,
    pub reports: Vec<StageReport>,
}

pub fn initial_checkpoint(cfg: &PipelineConfig, catalog: &Catalog) -> Result<Checkpoint> {
    cfg.validate()?;
    let features = FeatureSpec::infer(catalog, cfg.model.embedding_layout()?)?;
    let mut rng = RngStream::derive(cfg.seed, "init");
    let roles: &[Role] = match cfg.mode {
        Mode::Csmf => &[Role::Csmf],
        Mode::MixedSingle => &[Role::Mixed],
        Mode::SeparatePerObjective => &[Role::Click, Role::Conversion],
    };
    let mut models = Vec::new();
    for &role in roles {
        // baselines are plain dense networks
        let model_cfg = if role == Role::Csmf { cfg.model.clone() } else { ModelConfig { structure: Structure::Off, ..cfg.model.clone() } };
        models.push(RoleModel { role, model: TwoTowerModel::new(model_cfg, features.clone(), &mut rng)? });
    }
    Ok(Checkpoint { config: cfg.clone(), features, progress: Progress::Fresh, models, rng: vec![("init".into(), rng.snapshot())] })
}

pub fn run(cfg: &PipelineConfig, corpus: &Corpus, observer: &mut Observer<'_>) -> Result<RunOutput> {
    let ckpt = initial_checkpoint(cfg, &corpus.catalog)?;
    resume(ckpt, corpus, observer)
}

/// Continues a run from any stage boundary until it is complete.
pub fn resume(mut ckpt: Checkpoint, corpus: &Corpus, observer: &mut Observer<'_>) -> Result<RunOutput> {
    ckpt.config.validate()?;
    let mut all = Vec::new();
    while ckpt.progress != Progress::Complete {
        let reports = match ckpt.config.mode {
            Mode::Csmf => csmf_step(&mut ckpt, corpus)?,
            Mode::MixedSingle | Mode::SeparatePerObjective => baseline_run(&mut ckpt, corpus)?,
        };
        for m in &mut ckpt.models {
            m.model.quantize_f32();
            m.model.check_zero_states()?;
        }
        observer(&ckpt, &reports)?;
        all.extend(reports);
    }
    Ok(RunOutput { checkpoint: ckpt, reports: all })
}

fn stage_metrics(model: &TwoTowerModel, corpus: &Corpus, stage: Stage, cfg: &PipelineConfig) -> Result<Vec<MetricRow>> {
    if !cfg.stage_eval {
        return Ok(Vec::new());
    }
    evaluate_stage_score(model, &corpus.catalog, &corpus.test, stage, stage, &[50])
}

fn next_stage(progress: Progress) -> Result<Option<Stage>> {
    match progress {
        Progress::Fresh => Ok(Some(Stage::Exposure)),
        Progress::Committed(s) => s.next().map(Some).ok_or_else(|| CsmfError::Lifecycle("nothing after the conversion stage".into())),
        Progress::Complete => Ok(None),
    }
}

fn csmf_model(ckpt: &mut Checkpoint) -> Result<&mut TwoTowerModel> {
    Ok(&mut ckpt.models.iter_mut().find(|m| m.role == Role::Csmf).ok_or_else(|| CsmfError::Lifecycle("no csmf model".into()))?.model)
}

fn in_stage(stage: Stage) -> impl Fn(CsmfError) -> CsmfError {
    move |e| match e {
        CsmfError::Lifecycle(m) => CsmfError::Lifecycle(format!("stage {stage}: {m}")),
        CsmfError::Data(m) => CsmfError::Data(format!("stage {stage}: {m}")),
        other => other,
    }
}

/// Advances a csmf checkpoint by one stage.
fn csmf_step(ckpt: &mut Checkpoint, corpus: &Corpus) -> Result<Vec<StageReport>> {
    let Some(stage) = next_stage(ckpt.progress)? else { return Ok(Vec::new()) };
    let cfg = ckpt.config.clone();
    let losses = train_stage(csmf_model(ckpt)?, &corpus.train, &corpus.catalog, stage, &cfg).map_err(in_stage(stage))?;
    finish_stage(ckpt, corpus, stage, losses)
}

/// Everything after the main training pass: commit, recovery, bookkeeping.
fn finish_stage(ckpt: &mut Checkpoint, corpus: &Corpus, stage: Stage, epoch_losses: Vec<f64>) -> Result<Vec<StageReport>> {
    let cfg = ckpt.config.clone();
    let wrap = in_stage(stage);
    let model = csmf_model(ckpt)?;
    let mut report = StageReport {
        model: Role::Csmf,
        stage,
        epoch_losses,
        transition: None,
        recovery_losses: Vec::new(),
        after_training: Vec::new(),
        before_recovery: Vec::new(),
        after_recovery: Vec::new(),
        frozen: 0,
    };
    if stage == Stage::Conversion {
        report.frozen = freeze_stage(model, stage).map_err(&wrap)?;
        ckpt.progress = Progress::Complete;
    } else {
        report.after_training = stage_metrics(model, corpus, stage, &cfg)?;
        let t = commit_stage(model, stage, cfg.prune_method, cfg.tau).map_err(&wrap)?;
        report.frozen = t.retained();
        report.transition = Some(t);
        report.before_recovery = stage_metrics(model, corpus, stage, &cfg)?;
        report.recovery_losses = recover_stage(model, &corpus.train, &corpus.catalog, stage, &cfg).map_err(&wrap)?;
        report.after_recovery = stage_metrics(model, corpus, stage, &cfg)?;
        ckpt.progress = Progress::Committed(stage);
    }
    log::info!("stage {stage} done: losses {:?}", report.epoch_losses);
    Ok(vec![report])
}

/// Trains every single-stage model of a baseline checkpoint.
fn baseline_run(ckpt: &mut Checkpoint, corpus: &Corpus) -> Result<Vec<StageReport>> {
    let cfg = ckpt.config.clone();
    let mut reports = Vec::new();
    for rm in &mut ckpt.models {
        let positives: Vec<StageExample> = match rm.role {
            Role::Mixed => {
                // conversions are also clicks, so they appear twice
                let mut v = stage_view(&corpus.train, Stage::Click);
                v.extend(stage_view(&corpus.train, Stage::Conversion));
                v
            }
            Role::Click => stage_view(&corpus.train, Stage::Click),
            Role::Conversion => stage_view(&corpus.train, Stage::Conversion),
            Role::Csmf => return Err(CsmfError::Lifecycle("csmf model in a baseline run".into())),
        };
        let objective = if rm.role == Role::Conversion { Stage::Conversion } else { Stage::Click };
        let mut rng = RngStream::derive(cfg.seed, &format!("baseline-{}", rm.role.label()));
        let losses = run_phase_on(&mut rm.model, &corpus.train, &corpus.catalog, &positives, Phase::single(objective), cfg.baseline_epochs, &cfg, &mut rng)?;
        let frozen = freeze_stage(&mut rm.model, Stage::Exposure)?;
        ckpt.rng.push((format!("baseline-{}", rm.role.label()), rng.snapshot()));
        reports.push(StageReport {
            model: rm.role,
            stage: objective,
            epoch_losses: losses,
            transition: None,
            recovery_losses: Vec::new(),
            after_training: Vec::new(),
            before_recovery: Vec::new(),
            after_recovery: Vec::new(),
            frozen,
        });
    }
    ckpt.progress = Progress::Complete;
    Ok(reports)
}

/// One JSON object per line.
pub fn write_reports(path: &Path, reports: &[StageReport]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in reports {
        serde_json::to_writer(&mut f, r).map_err(|e| CsmfError::Data(e.to_string()))?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Metrics of a complete csmf run for each `τ`.
///
/// Exposure training happens before the first pruning, so it is shared:
/// every point equals a separate run with that `τ`.
pub fn sweep_tau(base: &PipelineConfig, corpus: &Corpus, taus: &[f64], spec: &EvalSpec) -> Result<Vec<(f64, MetricsReport)>> {
    if taus.is_empty() {
        return config_err("tau grid is empty");
    }
    if base.mode != Mode::Csmf {
        return config_err("a tau sweep needs mode csmf");
    }
    for &tau in taus {
        PipelineConfig { tau, ..base.clone() }.validate()?;
    }
    let mut trained = initial_checkpoint(base, &corpus.catalog)?;
    let losses = train_stage(csmf_model(&mut trained)?, &corpus.train, &corpus.catalog, Stage::Exposure, base)
        .map_err(in_stage(Stage::Exposure))?;
    taus.iter()
        .map(|&tau| {
            let mut ckpt = trained.clone();
            ckpt.config.tau = tau;
            finish_stage(&mut ckpt, corpus, Stage::Exposure, losses.clone())?;
            for m in &mut ckpt.models {
                m.model.quantize_f32();
            }
            let out = resume(ckpt, corpus, &mut |_, _| Ok(()))?;
            Ok((tau, out.checkpoint.evaluate(corpus, spec)?))
        })
        .collect()
}
