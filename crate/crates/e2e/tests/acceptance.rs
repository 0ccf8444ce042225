//! End-to-end acceptance checks. Runs as a plain binary (`harness = false`)
//! and prints one `[PASS]`/`[FAIL]` line per check; exits non-zero if any fail.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use csmf::checkpoint;
use csmf::data::{generate, Features, GeneratorConfig};
use csmf::eval::{sweep_weights, weight_grid, EvalSpec, MetricsReport};
use csmf::numerics::{dot, finite_diff_grad, RngStream};
use csmf::objectives::{aml_loss, softmax_loss, MarginMode};
use csmf::pipeline::{resume, run, sweep_tau, Checkpoint, Corpus, Mode, PipelineConfig, Progress, Role};
use csmf::pruning::cpp_select;
use csmf::stagenet::{build_layer, Activation, BlockLayout, LayerGrads, MaskedLayer, ParamState, Stage, Structure, TrainSet};
use csmf::towers::ServingWeights;

const FUSION_TOL: f64 = 1e-9;
const ISOLATION_TOL: f64 = 1e-9;
const GRAD_TOL: f64 = 1e-4;
/// Denominator floor for gradient relative error.
const GRAD_FLOOR: f64 = 1e-3;
const PROBE_PAIRS: usize = 1000;

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
    took: Duration,
}

fn check(name: &'static str, f: impl FnOnce() -> (bool, String)) -> Outcome {
    let t = Instant::now();
    let (pass, detail) = f();
    let o = Outcome { name, pass, detail, took: t.elapsed() };
    println!("[{}] {}: {} ({:.1}s)", if o.pass { "PASS" } else { "FAIL" }, o.name, o.detail, o.took.as_secs_f64());
    o
}

fn rel(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    if d == 0.0 {
        0.0
    } else {
        d / a.abs().max(b.abs())
    }
}

fn conv_recall(m: &MetricsReport) -> f64 {
    m.recall(Stage::Conversion, 50).expect("conversion recall@50")
}

fn click_recall(m: &MetricsReport) -> f64 {
    m.recall(Stage::Click, 50).expect("click recall@50")
}

// ---------------------------------------------------------------- pruning

/// Pruned set by definition: entry `i` goes iff it is not the last entry in
/// (magnitude, index) order and the mass of everything up to and including
/// it is at most `p/100` of the total. Integer arithmetic, quadratic time.
fn brute_force_prune(units: &[u64], percent: u64) -> Vec<bool> {
    let n = units.len();
    let total: u64 = units.iter().sum();
    if total == 0 {
        return (0..n).map(|i| i != 0).collect();
    }
    let before = |j: usize, i: usize| (units[j], j) <= (units[i], i);
    let last = (0..n).max_by_key(|&i| (units[i], i)).unwrap();
    (0..n)
        .map(|i| {
            if i == last {
                return false;
            }
            let mass: u64 = (0..n).filter(|&j| before(j, i)).map(|j| units[j]).sum();
            100 * mass as u128 <= percent as u128 * total as u128
        })
        .collect()
}

fn cpp_oracle() -> (bool, String) {
    const PERCENTS: [u64; 8] = [25, 35, 45, 55, 65, 75, 85, 95];
    let mut rng = RngStream::derive(11, "cpp-oracle");
    let mut mismatches = 0;
    let mut short = 0;
    let mut sizes = Vec::new();
    for g in 0..200 {
        let n = match g {
            0 => 1,
            1 => 10_000,
            _ => (10_000f64.powf(rng.uniform()).round() as usize).clamp(1, 10_000),
        };
        sizes.push(n);
        // 1/1024 units keep every partial sum exact in f64
        let units: Vec<u64> = match g % 5 {
            0 => (0..n).map(|_| rng.below(1 << 14) as u64).collect(),
            1 => (0..n).map(|_| (2f64.powf(14.0 * rng.uniform())) as u64).collect(),
            2 => (0..n).map(|_| rng.below(4) as u64).collect(),
            3 => vec![1 + rng.below(50) as u64; n],
            _ if g % 20 == 4 => vec![0; n],
            _ => (0..n).map(|_| if rng.below(3) == 0 { 0 } else { rng.below(1 << 10) as u64 }).collect(),
        };
        let percent = PERCENTS[rng.below(PERCENTS.len())];
        let tau = percent as f64 / 100.0;
        let mags: Vec<f64> = units.iter().map(|&u| u as f64 / 1024.0).collect();
        let got = cpp_select(&mags, tau).expect("valid group");
        let want = brute_force_prune(&units, percent);
        if got.prune != want {
            mismatches += 1;
        }
        let floor = (tau * n as f64).floor() as usize;
        let max_i = (0..n).max_by(|&a, &b| mags[a].total_cmp(&mags[b])).unwrap();
        let max_kept = !got.prune[max_i] || mags.iter().all(|&m| m == 0.0) && !got.prune[0];
        if got.pruned_count < floor || !max_kept || got.pruned_count != got.prune.iter().filter(|&&p| p).count() {
            short += 1;
        }
    }
    sizes.sort_unstable();
    let detail = format!(
        "200 groups, sizes {}..{}, {mismatches} oracle mismatches, {short} count/max violations (tol exact)",
        sizes[0],
        sizes[sizes.len() - 1]
    );
    (mismatches == 0 && short == 0, detail)
}

// ---------------------------------------------------------------- gradients

/// Largest relative error between analytic and numeric gradient vectors.
fn grad_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, f)| (a - f).abs() / a.abs().max(f.abs()).max(GRAD_FLOOR))
        .fold(0.0, f64::max)
}

fn score_vector(rng: &mut RngStream) -> Vec<f64> {
    let n = 2 + rng.below(30);
    (0..n).map(|_| rng.normal() * 3.0).collect()
}

fn softmax_fd(rng: &mut RngStream) -> f64 {
    let s = score_vector(rng);
    let an = softmax_loss(s[0], &s[1..]).unwrap();
    let mut g = vec![an.grad_pos];
    g.extend(&an.grad_negs);
    let fd = finite_diff_grad(|x| softmax_loss(x[0], &x[1..]).unwrap().loss, &s, 1e-5).unwrap();
    grad_error(&g, &fd)
}

fn aml_fd(rng: &mut RngStream, mode: MarginMode) -> f64 {
    let s = score_vector(rng);
    let m: Vec<f64> = (1..s.len()).map(|_| 0.1 + rng.uniform() * 4.0).collect();
    let an = aml_loss(s[0], &s[1..], &m, mode).unwrap();
    let mut g = vec![an.grad_pos];
    g.extend(&an.grad_negs);
    let fd = finite_diff_grad(|x| aml_loss(x[0], &x[1..], &m, mode).unwrap().loss, &s, 1e-5).unwrap();
    grad_error(&g, &fd)
}

fn random_layout(rng: &mut RngStream) -> BlockLayout {
    BlockLayout::new(1 + rng.below(3), rng.below(3), rng.below(3)).unwrap()
}

/// Scatters lifecycle states over a freshly built layer, keeping zero states
/// at zero.
fn scatter_states(l: &mut MaskedLayer, rng: &mut RngStream) {
    for t in [&mut l.weights, &mut l.bias] {
        for i in 0..t.len() {
            if t.state(i) == ParamState::StructuralZero {
                continue;
            }
            let st = Stage::ALL[rng.below(3)];
            let s = match rng.below(4) {
                0 => ParamState::Frozen(st),
                1 => ParamState::ZeroLocked,
                _ => ParamState::Trainable(st),
            };
            t.set_state(i, s);
            if s == ParamState::ZeroLocked {
                t.set_value(i, 0.0);
            } else if t.value(i) == 0.0 {
                t.set_value(i, rng.normal() * 0.3);
            }
        }
    }
}

struct LayerCase {
    layers: [MaskedLayer; 2],
    x: Vec<f64>,
    items: Vec<Vec<f64>>,
    margins: Vec<f64>,
    mode: MarginMode,
    prefix: Stage,
    train: TrainSet,
}

impl LayerCase {
    fn new(rng: &mut RngStream) -> Self {
        let (a, b, c) = (random_layout(rng), random_layout(rng), random_layout(rng));
        let mut l0 = build_layer(a, b, Activation::Relu, Structure::On, rng, 0.7).unwrap();
        let mut l1 = build_layer(b, c, Activation::Identity, Structure::On, rng, 0.7).unwrap();
        scatter_states(&mut l0, rng);
        scatter_states(&mut l1, rng);
        let prefix = Stage::ALL[rng.below(3)];
        let stage = Stage::ALL[rng.below(3)];
        let train = if rng.below(2) == 0 { TrainSet::training(stage) } else { TrainSet::recovering(stage) };
        // keep pre-activations away from the ReLU kink
        let x = loop {
            let x: Vec<f64> = (0..a.width()).map(|_| rng.normal()).collect();
            let z = MaskedLayer { activation: Activation::Identity, ..l0.clone() }.forward(&x, prefix).unwrap();
            if z.iter().all(|v| v.abs() > 1e-3 || *v == 0.0) {
                break x;
            }
        };
        let k = 2 + rng.below(8);
        let items = (0..k).map(|_| (0..c.width()).map(|_| rng.normal()).collect()).collect();
        let margins = (1..k).map(|_| 0.1 + rng.uniform() * 2.0).collect();
        let mode = if rng.below(2) == 0 { MarginMode::RequiredSeparation } else { MarginMode::PaperLiteral };
        Self { layers: [l0, l1], x, items, margins, mode, prefix, train }
    }

    fn scores(&self, layers: &[MaskedLayer; 2]) -> Vec<f64> {
        let h = layers[0].forward(&self.x, self.prefix).unwrap();
        let u = layers[1].forward(&h, self.prefix).unwrap();
        self.items.iter().map(|v| dot(&u, v)).collect()
    }

    fn loss(&self, layers: &[MaskedLayer; 2]) -> f64 {
        let s = self.scores(layers);
        aml_loss(s[0], &s[1..], &self.margins, self.mode).unwrap().loss
    }

    fn analytic(&self) -> [LayerGrads; 2] {
        let [l0, l1] = &self.layers;
        let h = l0.forward(&self.x, self.prefix).unwrap();
        let s = self.scores(&self.layers);
        let sl = aml_loss(s[0], &s[1..], &self.margins, self.mode).unwrap();
        let mut du = vec![0.0; l1.out_width()];
        for (w, v) in std::iter::once(sl.grad_pos).chain(sl.grad_negs.iter().copied()).zip(&self.items) {
            for (d, x) in du.iter_mut().zip(v) {
                *d += w * x;
            }
        }
        let (dh, g1) = l1.backward(&h, &du, self.prefix, self.train).unwrap();
        let (_, g0) = l0.backward(&self.x, &dh, self.prefix, self.train).unwrap();
        [g0, g1]
    }
}

/// Returns (worst relative error over movable parameters, number of
/// non-movable parameters with a non-zero gradient, non-movable count).
fn masked_layer_fd(rng: &mut RngStream) -> (f64, usize, usize) {
    let case = LayerCase::new(rng);
    let grads = case.analytic();
    let mut probe = case.layers.clone();
    let (mut worst, mut leaks, mut locked) = (0.0f64, 0, 0);
    for k in 0..2 {
        let n_w = case.layers[k].weights.len();
        for i in 0..n_w + case.layers[k].bias.len() {
            let (state, analytic) = if i < n_w {
                (case.layers[k].weights.state(i), grads[k].weights.as_slice()[i])
            } else {
                (case.layers[k].bias.state(i - n_w), grads[k].bias[i - n_w])
            };
            if !case.train.allows(state) {
                locked += 1;
                if analytic != 0.0 {
                    leaks += 1;
                }
                continue;
            }
            let orig = if i < n_w { case.layers[k].weights.value(i) } else { case.layers[k].bias.value(i - n_w) };
            let fd = finite_diff_grad(
                |p| {
                    let l = &mut probe[k];
                    if i < n_w { l.weights.set_value(i, p[0]) } else { l.bias.set_value(i - n_w, p[0]) }
                    case.loss(&probe)
                },
                &[orig],
                1e-6,
            )
            .unwrap()[0];
            let l = &mut probe[k];
            if i < n_w { l.weights.set_value(i, orig) } else { l.bias.set_value(i - n_w, orig) }
            worst = worst.max(grad_error(&[analytic], &[fd]));
        }
    }
    (worst, leaks, locked)
}

fn gradient_oracles() -> (bool, String) {
    let mut rng = RngStream::derive(12, "grad-oracle");
    let sm = (0..100).map(|_| softmax_fd(&mut rng)).fold(0.0, f64::max);
    let req = (0..100).map(|_| aml_fd(&mut rng, MarginMode::RequiredSeparation)).fold(0.0, f64::max);
    let lit = (0..100).map(|_| aml_fd(&mut rng, MarginMode::PaperLiteral)).fold(0.0, f64::max);
    let (mut layer, mut leaks, mut locked) = (0.0f64, 0, 0);
    for _ in 0..100 {
        let (w, l, n) = masked_layer_fd(&mut rng);
        layer = layer.max(w);
        leaks += l;
        locked += n;
    }
    let pass = sm <= GRAD_TOL && req <= GRAD_TOL && lit <= GRAD_TOL && layer <= GRAD_TOL && leaks == 0 && locked > 0;
    let detail = format!(
        "100 each, max rel err softmax {sm:.1e}, margin {req:.1e}, margin-literal {lit:.1e}, masked layers {layer:.1e} \
         (tol {GRAD_TOL:.0e}, floor {GRAD_FLOOR:.0e}); {leaks} of {locked} non-movable grads non-zero (tol exact)"
    );
    (pass, detail)
}

// ---------------------------------------------------------------- trained model

struct Probe {
    progress: Progress,
    scores: Vec<[f64; 3]>,
}

struct DefaultRun {
    corpus: Corpus,
    pairs: Vec<(Features, Features)>,
    boundaries: Vec<Vec<u8>>,
    probes: Vec<Probe>,
    final_ckpt: Checkpoint,
    metrics: MetricsReport,
}

fn probe_pairs(corpus: &Corpus) -> Vec<(Features, Features)> {
    let users: Vec<&Features> = corpus.catalog.users.values().collect();
    let items: Vec<&Features> = corpus.catalog.items.values().collect();
    let mut rng = RngStream::derive(13, "probe-pairs");
    (0..PROBE_PAIRS)
        .map(|_| (users[rng.below(users.len())].clone(), items[rng.below(items.len())].clone()))
        .collect()
}

fn pair_scores(ck: &Checkpoint, pairs: &[(Features, Features)]) -> Vec<[f64; 3]> {
    let m = ck.model(Role::Csmf).unwrap();
    pairs.iter().map(|(u, i)| m.prefix_scores(u, i).unwrap()).collect()
}

fn default_run() -> DefaultRun {
    let (ds, _) = generate(&GeneratorConfig::default()).unwrap();
    let corpus = Corpus::new(ds).unwrap();
    let pairs = probe_pairs(&corpus);
    let mut boundaries = Vec::new();
    let mut probes = Vec::new();
    let out = run(&PipelineConfig::default(), &corpus, &mut |ck: &Checkpoint, _: &[_]| {
        boundaries.push(checkpoint::to_bytes(ck)?);
        probes.push(Probe { progress: ck.progress, scores: pair_scores(ck, &pairs) });
        Ok(())
    })
    .unwrap();
    let metrics = out.checkpoint.evaluate(&corpus, &EvalSpec::default()).unwrap();
    DefaultRun { corpus, pairs, boundaries, probes, final_ckpt: out.checkpoint, metrics }
}

fn fusion_identity(r: &DefaultRun) -> (bool, String) {
    let model = r.final_ckpt.model(Role::Csmf).unwrap();
    let users: Vec<&Features> = r.pairs.iter().map(|p| &p.0).collect();
    let items: Vec<&Features> = r.pairs.iter().map(|p| &p.1).collect();
    let stage_scores: Vec<[f64; 3]> = r.pairs.iter().map(|(u, i)| model.prefix_scores(u, i).unwrap()).collect();
    let mut rng = RngStream::derive(14, "fusion-weights");
    let mut triplets = vec![ServingWeights::default()];
    for _ in 0..4 {
        triplets.push(ServingWeights::new(rng.uniform() * 3.0, rng.uniform() * 3.0, rng.uniform() * 3.0).unwrap());
    }
    let mut worst = 0.0f64;
    for &w in &triplets {
        let (uv, iv) = model.export_serving_vectors(&users, &items, w).unwrap();
        for (j, s) in stage_scores.iter().enumerate() {
            let fused = dot(uv.row(j), iv.row(j));
            let terms = [w.k_d * s[0], w.k_o * s[1], w.k_r * s[2]];
            let scale = terms.iter().map(|t| t.abs()).sum::<f64>();
            let err = (fused - terms.iter().sum::<f64>()).abs();
            if err > 0.0 {
                worst = worst.max(err / scale);
            }
        }
    }
    let detail = format!("{} pairs x {} weightings, max rel err {worst:.2e} (tol {FUSION_TOL:.0e})", r.pairs.len(), triplets.len());
    (worst <= FUSION_TOL, detail)
}

fn stage_isolation(r: &DefaultRun) -> (bool, String) {
    let at = |p: Progress| &r.probes.iter().find(|x| x.progress == p).expect("boundary probe").scores;
    let after_d = at(Progress::Committed(Stage::Exposure));
    let after_o = at(Progress::Committed(Stage::Click));
    let after_r = at(Progress::Complete);
    let mut worst = 0.0f64;
    for j in 0..after_d.len() {
        worst = worst.max(rel(after_d[j][0], after_o[j][0]));
        worst = worst.max(rel(after_d[j][0], after_r[j][0]));
        worst = worst.max(rel(after_o[j][1], after_r[j][1]));
    }
    let detail = format!("{} pairs, max rel drift of s_d and s_o {worst:.2e} (tol {ISOLATION_TOL:.0e})", after_d.len());
    (worst <= ISOLATION_TOL, detail)
}

fn weight_sweep(r: &DefaultRun) -> (bool, String) {
    let model = r.final_ckpt.model(Role::Csmf).unwrap();
    let before = checkpoint::to_bytes(&r.final_ckpt).unwrap();
    let grid = weight_grid(&[1.0], &[0.0, 0.6, 1.2, 1.8, 2.4, 3.0], &[0.0, 0.4, 0.8, 1.2, 1.6, 2.0]).unwrap();
    let sweep = sweep_weights(model, &r.corpus.catalog, &r.corpus.test, &grid, &EvalSpec::default()).unwrap();
    let unchanged = sweep.digest_before == sweep.digest_after && checkpoint::to_bytes(&r.final_ckpt).unwrap() == before;
    let best = sweep.rows.iter().map(|row| conv_recall(&row.metrics)).fold(f64::MIN, f64::max);
    let pass = sweep.rows.len() == 36 && sweep.exports <= 36 && unchanged;
    let detail = format!(
        "{} points, {} exports (tol <= 36), parameters unchanged {unchanged}, best conversion R@50 {best:.4}",
        sweep.rows.len(),
        sweep.exports
    );
    (pass, detail)
}

fn determinism(r: &DefaultRun) -> (bool, String) {
    let again = default_run();
    let same_bytes = again.boundaries == r.boundaries;
    let same_metrics = again.metrics == r.metrics;
    let mut resumed_ok = 0;
    let starts: Vec<&Vec<u8>> = r.boundaries[..r.boundaries.len() - 1].iter().collect();
    for bytes in &starts {
        let ck = checkpoint::from_bytes(bytes).unwrap();
        let out = resume(ck, &r.corpus, &mut |_: &Checkpoint, _: &[_]| Ok(())).unwrap();
        let metrics = out.checkpoint.evaluate(&r.corpus, &EvalSpec::default()).unwrap();
        if checkpoint::to_bytes(&out.checkpoint).unwrap() == *r.boundaries.last().unwrap() && metrics == r.metrics {
            resumed_ok += 1;
        }
    }
    let pass = same_bytes && same_metrics && resumed_ok == starts.len();
    let detail = format!(
        "rerun checkpoints identical {same_bytes}, metrics identical {same_metrics}, {resumed_ok}/{} boundary resumes identical (tol exact)",
        starts.len()
    );
    (pass, detail)
}

// ---------------------------------------------------------------- comparisons

fn mode_comparison() -> (bool, String) {
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 1..=3u64 {
        let (ds, _) = generate(&GeneratorConfig { seed, ..GeneratorConfig::default() }).unwrap();
        let corpus = Corpus::new(ds).unwrap();
        let mut by_mode = BTreeMap::new();
        for mode in [Mode::Csmf, Mode::MixedSingle, Mode::SeparatePerObjective] {
            let cfg = PipelineConfig { mode, seed, ..PipelineConfig::default() };
            let out = run(&cfg, &corpus, &mut |_: &Checkpoint, _: &[_]| Ok(())).unwrap();
            by_mode.insert(format!("{mode:?}"), out.checkpoint.evaluate(&corpus, &EvalSpec::default()).unwrap());
        }
        let (c, m, s) = (&by_mode["Csmf"], &by_mode["MixedSingle"], &by_mode["SeparatePerObjective"]);
        let conv_ok = conv_recall(c) >= conv_recall(m);
        let click_ok = click_recall(c) >= 0.95 * click_recall(s);
        if conv_ok && click_ok {
            wins += 1;
        }
        rows.push(format!(
            "seed {seed}: conv {:.4} vs mixed {:.4}, click {:.4} vs 0.95 x separate {:.4}",
            conv_recall(c),
            conv_recall(m),
            click_recall(c),
            0.95 * click_recall(s)
        ));
    }
    (wins >= 2, format!("{wins}/3 seeds hold both (need 2); {}", rows.join("; ")))
}

fn tau_sweep(corpus: &Corpus) -> (bool, String) {
    let taus = [0.25, 0.5, 0.75, 0.95];
    let points = sweep_tau(&PipelineConfig::default(), corpus, &taus, &EvalSpec::default()).unwrap();
    let r: Vec<f64> = points.iter().map(|(_, m)| conv_recall(m)).collect();
    let pass = r[2] > r[0] && r[2] > r[3];
    let listed: Vec<String> = taus.iter().zip(&r).map(|(t, v)| format!("{t}: {v:.4}")).collect();
    (pass, format!("conversion R@50 by tau {}", listed.join(", ")))
}

fn main() {
    let mut outcomes = Vec::new();
    outcomes.push(check("cpp-oracle", cpp_oracle));
    outcomes.push(check("gradient-oracles", gradient_oracles));

    let t = Instant::now();
    let r = default_run();
    println!("       default run trained in {:.1}s", t.elapsed().as_secs_f64());

    let fusion = check("fusion-identity", || fusion_identity(&r));
    let fusion_fast = fusion.took <= Duration::from_secs(60);
    outcomes.push(Outcome { pass: fusion.pass && fusion_fast, ..fusion });
    outcomes.push(check("stage-isolation", || stage_isolation(&r)));
    outcomes.push(check("weight-sweep", || weight_sweep(&r)));
    outcomes.push(check("determinism-and-resume", || determinism(&r)));
    outcomes.push(check("tau-sweep", || tau_sweep(&r.corpus)));

    let compare = check("modes-at-rho-0.5", mode_comparison);
    let compare_fast = compare.took <= Duration::from_secs(20 * 60);
    outcomes.push(Outcome { pass: compare.pass && compare_fast, ..compare });

    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.pass).map(|o| o.name).collect();
    println!("acceptance: {} passed, {} failed {:?}", outcomes.len() - failed.len(), failed.len(), failed);
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
