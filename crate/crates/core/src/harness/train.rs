//! Training loop, optimizers, metrics rows and checkpoints.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoders::{ImageSample, TextSample, TransformDraw};
use crate::error::{MlipError, Result};
use crate::harness::config::{Optimizer, TrainConfig};
use crate::harness::data::{generate_dataset, stratified_split, Dataset, DATASET_FILE};
use crate::harness::eval::{evaluate, EvalMetrics};
use crate::harness::model::{BatchContext, LossValues, Model};
use crate::knowledge::{build_toy_graph, KnowledgeGraph};
use crate::params::ParamStore;
use crate::proxy::{sample_negatives, swap_plan};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.txt";
pub const GRAPH_FILE: &str = "graph.tsv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LAST_GOOD_FILE: &str = "checkpoint_last_good.bin";
pub const EVAL_FILE: &str = "eval.json";

/// Fixed header of `metrics.csv`; evaluation columns are empty on rows
/// without an evaluation.
pub const METRICS_HEADER: &str = "step,L_v2t,L_t2v,L_v2a,L_avt,L_ita,L_tl,L_v2t_tl,L_t2v_tl,L_cl,sinkhorn_row_err,sinkhorn_col_err,\
prototype_entropy,L_itm,L_ts,swap_fraction,L_total,lr,s_v,s_t,recall_at_1,recall_at_5,cluster_purity,nmi,false_negative_gap";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub step: usize,
    pub losses: LossValues,
    pub lr: f64,
    pub s_v: f64,
    pub s_t: f64,
    pub eval: Option<EvalMetrics>,
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        let mut row = format!("{}", self.step);
        for v in [
            l.v2t,
            l.t2v,
            l.v2a,
            l.avt,
            l.ita,
            l.tl,
            l.v2t_tl,
            l.t2v_tl,
            l.cl,
            l.sinkhorn_row_err,
            l.sinkhorn_col_err,
            l.prototype_entropy,
            l.itm,
            l.ts,
            l.swap_fraction,
            l.total,
            self.lr,
            self.s_v,
            self.s_t,
        ] {
            let _ = write!(row, ",{v}");
        }
        match &self.eval {
            Some(e) => {
                for v in [e.recall_at_1, e.recall_at_5, e.cluster_purity, e.nmi, e.false_negative_gap] {
                    let _ = write!(row, ",{v}");
                }
            }
            None => row.push_str(",,,,,"),
        }
        row
    }
}

/// Learning rate at 1-based `step`: cosine from `lr` toward 0.
pub fn learning_rate(cfg: &TrainConfig, step: usize) -> f64 {
    if !cfg.cosine_decay || cfg.steps == 0 {
        return cfg.lr;
    }
    let progress = (step.saturating_sub(1)) as f64 / cfg.steps as f64;
    cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// SGD with momentum (`v ← μv + g`, `θ ← θ − ηv`) or Adam.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: Optimizer,
    first: ParamStore,
    second: ParamStore,
    steps: i32,
}

impl OptimizerState {
    pub fn new(kind: Optimizer, like: &ParamStore) -> Self {
        Self { kind, first: like.zeros_like(), second: like.zeros_like(), steps: 0 }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore, lr: f64, cfg: &TrainConfig) -> Result<()> {
        if !params.same_layout(grads) || !params.same_layout(&self.first) {
            return Err(MlipError::Shape("optimizer state does not match the parameters".into()));
        }
        self.steps += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.steps);
        let c2 = 1.0 - b2.powi(self.steps);
        let it = params.iter_mut().zip(grads.iter()).zip(self.first.iter_mut().zip(self.second.iter_mut()));
        for (((_, p), (_, g)), ((_, m), (_, v))) in it {
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            match self.kind {
                Optimizer::Sgd => {
                    for i in 0..p.len() {
                        m[i] = cfg.momentum * m[i] + g[i];
                        p[i] -= lr * m[i];
                    }
                }
                Optimizer::Adam => {
                    for i in 0..p.len() {
                        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                        p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.adam_eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Where a run writes its files.
#[derive(Debug, Clone)]
pub struct RunFiles {
    pub dir: PathBuf,
}

impl RunFiles {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn step_checkpoint(&self, step: usize) -> PathBuf {
        self.dir.join(format!("checkpoint_step{step}.bin"))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub records: Vec<MetricsRecord>,
    pub final_eval: EvalMetrics,
    pub first_loss: f64,
    pub last_loss: f64,
    pub eval_indices: Vec<usize>,
}

/// The dataset a config describes: loaded from `data_dir` when set (the
/// config then adopts its shape), generated otherwise.
pub fn resolve_dataset(cfg: &mut TrainConfig) -> Result<Dataset> {
    match cfg.data_dir.0.clone() {
        Some(dir) => {
            let data = Dataset::load(Path::new(&dir).join(DATASET_FILE))?;
            cfg.adopt_dataset(&data.spec);
            Ok(data)
        }
        None => generate_dataset(&cfg.dataset_spec()),
    }
}

/// Toy graph with one disease entity per dataset class.
pub fn graph_for(cfg: &TrainConfig) -> Result<KnowledgeGraph> {
    build_toy_graph(cfg.classes, cfg.relations_per_class, cfg.effective_data_seed())
}

/// Seeded stream `k` of the run seed.
fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(k);
    r
}

/// Full run: data, graph, knowledge pretraining, `cfg.steps` updates and a
/// final evaluation. Files go to `files` when given.
pub fn train(cfg: &TrainConfig, files: Option<&RunFiles>) -> Result<TrainOutcome> {
    let mut cfg = cfg.clone();
    let data = resolve_dataset(&mut cfg)?;
    cfg.validate()?;
    let graph = graph_for(&cfg)?;
    let mut init_rng = stream(cfg.seed, 0);
    let model = Model::build(&cfg, &graph, &mut init_rng)?;
    train_model(&cfg, model, &data, &graph, files)
}

pub fn train_model(
    cfg: &TrainConfig,
    mut model: Model,
    data: &Dataset,
    graph: &KnowledgeGraph,
    files: Option<&RunFiles>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train_idx, eval_idx) = stratified_split(&data.labels(), cfg.train_frac, cfg.effective_data_seed());
    if train_idx.len() < cfg.batch_size {
        return Err(MlipError::Config(format!("{} training samples for batch size {}", train_idx.len(), cfg.batch_size)));
    }
    let mut csv = None;
    if let Some(f) = files {
        std::fs::write(f.path(CONFIG_FILE), cfg.to_text())?;
        graph.save(f.path(GRAPH_FILE))?;
        let mut w = std::io::BufWriter::new(std::fs::File::create(f.path(METRICS_FILE))?);
        use std::io::Write;
        writeln!(w, "{METRICS_HEADER}")?;
        csv = Some(w);
    }
    let with_knowledge = cfg.unfreeze_knowledge;
    let mut opt = OptimizerState::new(cfg.optimizer, &model.trainable(with_knowledge));
    let mut batch_rng = stream(cfg.seed, 1);
    let mut aug_rng = stream(cfg.seed, 2);
    let mut proxy_rng = stream(cfg.seed, 3);
    let transform = cfg.transform();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut records = Vec::new();
    let (mut first_loss, mut last_loss) = (f64::NAN, f64::NAN);
    let mut final_eval = None;

    for step in 1..=cfg.steps {
        if cursor + cfg.batch_size > order.len() {
            order = train_idx.clone();
            order.shuffle(&mut batch_rng);
            cursor = 0;
        }
        let batch = &order[cursor..cursor + cfg.batch_size];
        cursor += cfg.batch_size;
        let images: Vec<&ImageSample> = batch.iter().map(|&i| &data.samples[i].image).collect();
        let texts: Vec<&TextSample> = batch.iter().map(|&i| &data.samples[i].text).collect();
        let x_rt: Vec<ImageSample> = images.iter().map(|x| TransformDraw::sample(x, &transform, &mut aug_rng).apply(x)).collect();
        let x_rt_refs: Vec<&ImageSample> = x_rt.iter().collect();
        let aug = model.augment(&x_rt_refs, &texts, cfg)?;
        let ctx = BatchContext {
            aug,
            negatives: sample_negatives(cfg.batch_size, &mut proxy_rng),
            swap: swap_plan(cfg.batch_size, cfg.gamma, &mut proxy_rng),
            codes: None,
            image_weights: None,
            text_weights: None,
        };
        let fwd = model.forward(&images, &texts, &ctx, cfg, with_knowledge)?;
        let loss = fwd.values.total;
        if !loss.is_finite() {
            if let Some(f) = files {
                model.to_checkpoint().save(f.path(LAST_GOOD_FILE))?;
            }
            log::error!("non-finite loss at step {step}");
            return Err(MlipError::Diverged(format!("total loss {loss} at step {step}")));
        }
        if step == 1 {
            first_loss = loss;
        }
        last_loss = loss;
        let grads = model.gradients(&fwd, fwd.losses.total, with_knowledge);
        let lr = learning_rate(cfg, step);
        let mut trainable = model.trainable(with_knowledge);
        opt.step(&mut trainable, &grads, lr, cfg)?;
        model.set_trainable(&trainable);
        model.renormalize_prototypes();
        model.round_to(cfg.precision);
        let (s_v, s_t) = model.divergence.record_similarity(&fwd.v_raw, &fwd.t_raw, &ctx.aug)?;
        let params = model.params.clone();
        model.divergence.blend_update(&params, s_v, s_t)?;
        model.round_to(cfg.precision);

        let eval_now = step == cfg.steps || (cfg.eval_every > 0 && step % cfg.eval_every == 0);
        let eval = if eval_now { Some(evaluate(&model, data, &eval_idx, cfg)?) } else { None };
        if let Some(e) = &eval {
            log::info!("step {step}: loss {loss:.4} recall@1 {:.3} purity {:.3}", e.recall_i2t_at_1, e.cluster_purity);
        } else {
            log::debug!("step {step}: loss {loss:.4}");
        }
        if step == cfg.steps {
            final_eval = eval;
        }
        let record = MetricsRecord { step, losses: fwd.values, lr, s_v, s_t, eval };
        if let (Some(w), true) = (csv.as_mut(), step % cfg.log_every.max(1) == 0 || step == cfg.steps) {
            use std::io::Write;
            writeln!(w, "{}", record.csv_row())?;
        }
        records.push(record);
        if let Some(f) = files {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                model.to_checkpoint().save(f.step_checkpoint(step))?;
            }
        }
    }
    if let Some(mut w) = csv {
        use std::io::Write;
        w.flush()?;
    }
    let final_eval = match final_eval {
        Some(e) => e,
        None => evaluate(&model, data, &eval_idx, cfg)?,
    };
    if let Some(f) = files {
        model.to_checkpoint().save(f.path(CHECKPOINT_FILE))?;
        std::fs::write(f.path(EVAL_FILE), serde_json::to_string_pretty(&final_eval).expect("plain struct"))?;
    }
    Ok(TrainOutcome { model, records, final_eval, first_loss, last_loss, eval_indices: eval_idx })
}

/// A checkpoint and the `config.txt` beside it.
pub fn load_checkpoint(checkpoint: &Path) -> Result<(TrainConfig, Model)> {
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let cfg = TrainConfig::load(dir.join(CONFIG_FILE))?;
    let model = Model::from_checkpoint(&ParamStore::load(checkpoint)?)?;
    Ok((cfg, model))
}

/// Metrics on the held-out split of the dataset `cfg` resolves to.
pub fn evaluate_held_out(model: &Model, cfg: &TrainConfig) -> Result<EvalMetrics> {
    let mut cfg = cfg.clone();
    let data = resolve_dataset(&mut cfg)?;
    let (_, eval_idx) = stratified_split(&data.labels(), cfg.train_frac, cfg.effective_data_seed());
    evaluate(model, &data, &eval_idx, &cfg)
}

/// Reload a checkpoint written by [`train`] and evaluate it on the held-out
/// split of the dataset in `data_dir` (or the one its config generates).
pub fn evaluate_checkpoint(checkpoint: &Path, data_dir: Option<&Path>) -> Result<(TrainConfig, EvalMetrics)> {
    let (mut cfg, model) = load_checkpoint(checkpoint)?;
    if let Some(d) = data_dir {
        cfg.data_dir = crate::harness::config::OptPath(Some(d.to_string_lossy().into_owned()));
    }
    let m = evaluate_held_out(&model, &cfg)?;
    Ok((cfg, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn tiny() -> TrainConfig {
        TrainConfig {
            samples_per_class: 10,
            dim: 8,
            heads: 2,
            fused_dim: 8,
            prototypes: 4,
            entity_dim: 4,
            transe_epochs: 5,
            patches: 4,
            patch_dim: 3,
            seq_len: 5,
            vocab: 40,
            class_vocab: 8,
            steps: 3,
            batch_size: 4,
            ..Default::default()
        }
    }

    #[test]
    fn cosine_schedule() {
        let cfg = TrainConfig { lr: 0.1, steps: 4, ..Default::default() };
        assert_eq!(learning_rate(&cfg, 1), 0.1);
        assert!((learning_rate(&cfg, 3) - 0.05).abs() < 1e-15);
        assert_eq!(learning_rate(&TrainConfig { cosine_decay: false, ..cfg }, 4), 0.1);
    }

    #[test]
    fn sgd_momentum_by_hand() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(vec![1], vec![1.0]).unwrap());
        let mut g = ParamStore::new();
        g.insert("w", Tensor::new(vec![1], vec![2.0]).unwrap());
        let cfg = TrainConfig { momentum: 0.5, ..Default::default() };
        let mut opt = OptimizerState::new(Optimizer::Sgd, &p);
        opt.step(&mut p, &g, 0.1, &cfg).unwrap();
        assert!((p.get("w").unwrap().data()[0] - 0.8).abs() < 1e-15);
        opt.step(&mut p, &g, 0.1, &cfg).unwrap();
        // v = 0.5·2 + 2 = 3
        assert!((p.get("w").unwrap().data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let mut g = ParamStore::new();
        g.insert("w", Tensor::new(vec![2], vec![3.0, -0.5]).unwrap());
        let mut opt = OptimizerState::new(Optimizer::Adam, &p);
        opt.step(&mut p, &g, 0.01, &TrainConfig::default()).unwrap();
        let w = p.get("w").unwrap().data();
        assert!((w[0] + 0.01).abs() < 1e-9 && (w[1] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn zero_lr_keeps_parameters_and_loss() {
        let cfg = TrainConfig { lr: 0.0, gamma: 0.0, flip_prob: 0.0, aug_noise: 0.0, scale_min: 1.0, scale_max: 1.0, ..tiny() };
        let mut c = cfg.clone();
        let data = resolve_dataset(&mut c).unwrap();
        let graph = graph_for(&cfg).unwrap();
        let model = Model::build(&cfg, &graph, &mut stream(cfg.seed, 0)).unwrap();
        let out = train_model(&cfg, model.clone(), &data, &graph, None).unwrap();
        assert_eq!(out.model.params, model.params);
        assert_eq!(out.records.len(), 3);
    }

    #[test]
    fn single_step_emits_one_record() {
        let cfg = TrainConfig { steps: 1, ..tiny() };
        let out = train(&cfg, None).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.records[0].step, 1);
        assert!(out.records[0].eval.is_some());
        assert_eq!(out.records[0].csv_row().split(',').count(), METRICS_HEADER.split(',').count());
    }

    #[test]
    fn files_and_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let files = RunFiles::new(dir.path()).unwrap();
        let out = train(&tiny(), Some(&files)).unwrap();
        let csv = std::fs::read_to_string(files.path(METRICS_FILE)).unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert_eq!(csv.lines().next().unwrap(), METRICS_HEADER);
        let (_, m) = evaluate_checkpoint(&files.path(CHECKPOINT_FILE), None).unwrap();
        assert_eq!(m, out.final_eval);
    }
}
