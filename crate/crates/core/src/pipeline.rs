//! Stage-by-stage pruning pipeline over a run directory.
//!
//! Each stage reads the artifacts of the previous ones from disk and writes
//! its own, so stages can be rerun or inspected independently. A run
//! directory looks like this:
//!
//! ```text
//! run/
//!   model.scmd              pretrained model
//!   stage-pretrain.txt      settings and baseline metrics
//!   pool/                   cached (X, Y) activations
//!   stage-capture.txt
//!   autoencoders/layerNN.scae
//!   stage-train-ae.txt
//!   scores.txt
//!   stage-score.txt
//!   tau-0.50/               mask.txt, model.scmd, report.txt,
//!                           finetuned.scmd, stage-finetune.txt
//! ```
//!
//! Stage records hold `key = value` settings; keys under `result.` are
//! measurements and are not echoed into prune reports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autoencoder::{train_layer_autoencoder, LayerAutoencoder, OptimizerKind, TrainConfig};
use crate::error::{invalid, Result, ScapError};
use crate::io::{self, layout, KeyValues};
use crate::network::NetworkSpec;
use crate::nn::{CapturePoint, Dataset, ModelState, TrainSchedule};
use crate::prune::{compute_fr_pr, propagate_and_apply, select_channels, KMin, LayerPruneStats, PruneMask, PruneReport};
use crate::scoring::{fuse, normalize_layer_scores, score_layer, FusionRule, ImportanceVector, ScoreConfig};

/// Default number of training images cached for scoring.
pub const DEFAULT_POOL_SIZE: usize = 512;
/// The two operating points reported by default.
pub const DEFAULT_TAUS: [f64; 2] = [0.5, 0.6];

/// Samples per forward chunk while capturing activations.
const CAPTURE_CHUNK: usize = 64;
const RESULT_PREFIX: &str = "result.";

pub type Record = Vec<(String, String)>;

fn kv(key: &str, value: impl ToString) -> (String, String) {
    (key.to_string(), value.to_string())
}

fn emit_record(title: &str, record: &Record) -> String {
    let mut s = format!("# {title}\nformat_version = {}\n", io::FORMAT_VERSION);
    for (k, v) in record {
        writeln!(s, "{k} = {v}").unwrap();
    }
    s
}

fn read_record(path: &Path, what: &str) -> Result<Record> {
    let kv = KeyValues::parse(&io::read_text(path, what)?, None)?;
    Ok(kv.with_prefix("").into_iter().filter(|(k, _)| k != "format_version").collect())
}

fn record_value<'a>(record: &'a Record, key: &str) -> Option<&'a str> {
    record.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

/// Training accuracy and cost of the pretrained network.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSummary {
    pub train_accuracy: f64,
    pub final_loss: Option<f64>,
    pub flops: u64,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneSummary {
    pub tau: f64,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
}

/// Seeded choice of `pool_size` distinct sample indices, ascending.
pub fn pool_indices(samples: usize, pool_size: usize, seed: u64) -> Result<Vec<usize>> {
    if pool_size == 0 {
        return Err(invalid!("pool size must be at least 1"));
    }
    if samples == 0 {
        return Err(invalid!("dataset is empty"));
    }
    let mut order: Vec<usize> = (0..samples).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.truncate(pool_size.min(samples));
    order.sort_unstable();
    Ok(order)
}

/// Overrides `fused` and `normalized` with a different fusion rule.
pub fn refuse_scores(scores: &[ImportanceVector<f64>], rule: FusionRule) -> Result<Vec<ImportanceVector<f64>>> {
    scores
        .iter()
        .map(|iv| {
            let fused = fuse(&iv.i_fid, &iv.i_l1, rule)?;
            let normalized = normalize_layer_scores(&fused);
            Ok(ImportanceVector { fused, normalized, ..iv.clone() })
        })
        .collect()
}

/// Thresholds every layer's normalized scores into a keep mask.
pub fn build_mask(
    spec: &NetworkSpec,
    scores: &[ImportanceVector<f64>],
    tau: f64,
    k_min: KMin,
) -> Result<(PruneMask, Vec<LayerPruneStats>)> {
    let convs = spec.conv_layers();
    if scores.len() != convs.len() || scores.iter().zip(&convs).any(|(s, &l)| s.layer_id != l) {
        return Err(ScapError::Validation(format!(
            "scores cover layers {:?}, the network's conv layers are {convs:?}",
            scores.iter().map(|s| s.layer_id).collect::<Vec<_>>()
        )));
    }
    let mut keep = Vec::with_capacity(scores.len());
    let mut stats = Vec::with_capacity(scores.len());
    for iv in scores {
        let total = iv.len();
        let floor = k_min.resolve(total);
        let sel = select_channels(&iv.normalized, tau, floor)?;
        if sel.keep.len() < floor {
            return Err(ScapError::Contract(format!(
                "layer {} kept {} channels, below its floor of {floor}",
                iv.layer_id,
                sel.keep.len()
            )));
        }
        stats.push(LayerPruneStats { layer_index: iv.layer_id, kept: sel.keep.len(), total, safeguard: sel.safeguard });
        keep.push(sel.keep);
    }
    let mask = PruneMask { keep };
    mask.validate(spec)?;
    Ok((mask, stats))
}

/// Prunes `model` at one threshold and measures the reduction.
pub fn prune_model(
    model: &ModelState<f64>,
    scores: &[ImportanceVector<f64>],
    tau: f64,
    fusion: FusionRule,
    k_min: KMin,
    capture_point: CapturePoint,
    config: Record,
) -> Result<(PruneMask, ModelState<f64>, PruneReport)> {
    let (mask, layers) = build_mask(&model.spec, scores, tau, k_min)?;
    let pruned = propagate_and_apply(model, &mask)?;
    let baseline = model.spec.cost()?;
    let after = pruned.spec.cost()?;
    let (fr, pr) = compute_fr_pr((baseline.macs, baseline.params), (after.macs, after.params))?;
    let report = PruneReport { tau, fusion, k_min, capture_point, layers, baseline, pruned: after, fr, pr, config };
    Ok((mask, pruned, report))
}

/// Filesystem-backed pipeline.
#[derive(Debug, Clone)]
pub struct Run {
    dir: PathBuf,
}

impl Run {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn record_path(&self, stage: &str) -> PathBuf {
        self.dir.join(format!("stage-{stage}.txt"))
    }

    fn write_record(&self, stage: &str, record: &Record) -> Result<()> {
        io::write_atomic(&self.record_path(stage), emit_record(stage, record).as_bytes())
    }

    pub fn record(&self, stage: &str) -> Result<Record> {
        read_record(&self.record_path(stage), &format!("{stage} stage record (run that stage first)"))
    }

    pub fn load_model(&self) -> Result<ModelState<f64>> {
        io::load_model(&layout::model(&self.dir), None)
    }

    pub fn load_scores(&self) -> Result<(Vec<ImportanceVector<f64>>, FusionRule)> {
        io::parse_scores(&io::read_text(&layout::scores(&self.dir), "scores (run score first)")?)
    }

    /// Trains a fresh model and stores it with its baseline metrics.
    pub fn pretrain(&self, spec: &NetworkSpec, data: &Dataset<f64>, schedule: &TrainSchedule) -> Result<PretrainSummary> {
        check_dataset(spec, data)?;
        fs::create_dir_all(&self.dir)?;
        let mut model = ModelState::init(spec.clone(), schedule.seed)?;
        let log = model.train(data, schedule)?;
        io::save_model(&layout::model(&self.dir), &model)?;
        // Measure the model as stored, since later stages reload it from f32.
        let stored = self.load_model()?;
        let cost = spec.cost()?;
        let summary = PretrainSummary {
            train_accuracy: stored.evaluate(data)?,
            final_loss: log.last().map(|s| s.loss),
            flops: cost.macs,
            params: cost.params,
        };
        let decay: Vec<String> = schedule.decay_epochs.iter().map(usize::to_string).collect();
        let mut record = vec![
            kv("epochs", schedule.epochs),
            kv("lr", schedule.learning_rate),
            kv("momentum", schedule.momentum),
            kv("weight_decay", schedule.weight_decay),
            kv("batch_size", schedule.batch_size),
            kv("decay_epochs", decay.join(",")),
            kv("seed", schedule.seed),
            kv("samples", data.len()),
            kv("result.train_accuracy", summary.train_accuracy),
            kv("result.flops", summary.flops),
            kv("result.params", summary.params),
        ];
        if let Some(loss) = summary.final_loss {
            record.push(kv("result.final_loss", loss));
        }
        self.write_record("pretrain", &record)?;
        Ok(summary)
    }

    /// Caches per-conv-layer `(X, Y)` activations for a seeded subset of `data`.
    pub fn capture(&self, data: &Dataset<f64>, pool_size: usize, point: CapturePoint, seed: u64) -> Result<usize> {
        let model = self.load_model()?;
        check_dataset(&model.spec, data)?;
        let idx = pool_indices(data.len(), pool_size, seed)?;
        let pool = model.capture_pool(&data.images.gather_batch(&idx)?, point, CAPTURE_CHUNK)?;
        io::write_pool(&layout::pool(&self.dir), &pool, seed)?;
        self.write_record(
            "capture",
            &vec![kv("pool_size", pool_size), kv("samples", idx.len()), kv("capture_point", point), kv("seed", seed)],
        )?;
        Ok(idx.len())
    }

    /// Trains one autoencoder pair per captured layer; returns final losses.
    pub fn train_autoencoders(&self, cfg: &TrainConfig) -> Result<Vec<f64>> {
        let (pool, _) = io::read_pool::<f64>(&layout::pool(&self.dir))?;
        let mut finals = Vec::with_capacity(pool.layers.len());
        for layer in &pool.layers {
            let ae = train_layer_autoencoder(&layer.x, &layer.y, layer.layer_index, cfg)?;
            finals.push(ae.loss_history.last().copied().unwrap_or(f64::NAN));
            let path = layout::autoencoder(&self.dir, layer.layer_index);
            fs::create_dir_all(path.parent().expect("autoencoder path has a parent"))?;
            io::save_autoencoder(&path, &ae)?;
        }
        let optimizer = match cfg.optimizer {
            OptimizerKind::Adam { beta1, beta2, eps } => format!("adam({beta1},{beta2},{eps})"),
            OptimizerKind::Sgd => "sgd".into(),
        };
        self.write_record(
            "train-ae",
            &vec![
                kv("epochs", cfg.epochs),
                kv("lr", cfg.learning_rate),
                kv("weight_decay", cfg.weight_decay),
                kv("batch_size", cfg.batch_size),
                kv("accum_steps", cfg.accum_steps),
                kv("optimizer", optimizer),
                kv("share_branches", cfg.share_branches),
                kv("epsilon", cfg.epsilon),
                kv("seed", cfg.seed),
            ],
        )?;
        Ok(finals)
    }

    /// Scores every conv channel from the pool, the autoencoders and the weights.
    pub fn score(&self, cfg: &ScoreConfig) -> Result<Vec<ImportanceVector<f64>>> {
        let model = self.load_model()?;
        let (pool, _) = io::read_pool::<f64>(&layout::pool(&self.dir))?;
        let convs = model.spec.conv_layers();
        if pool.layers.iter().map(|l| l.layer_index).ne(convs.iter().copied()) {
            return Err(ScapError::Validation("activation pool does not match the model's conv layers".into()));
        }
        let mut scores = Vec::with_capacity(pool.layers.len());
        for layer in &pool.layers {
            let path = layout::autoencoder(&self.dir, layer.layer_index);
            let ae: LayerAutoencoder<f64> = io::load_autoencoder(&path, Some(layer.x.shape().plane()))?;
            let filters = model.filters(layer.layer_index)?;
            scores.push(score_layer(&layer.x, &layer.y, layer.layer_index, filters, &ae.real, &ae.imag, cfg)?);
        }
        io::write_atomic(&layout::scores(&self.dir), io::emit_scores(&scores, cfg.fusion).as_bytes())?;
        self.write_record(
            "score",
            &vec![
                kv("fusion", cfg.fusion.kind),
                kv("alpha", cfg.fusion.alpha),
                kv("batch_size", cfg.batch_size),
                kv("epsilon", cfg.epsilon),
                kv("l1_epsilon", cfg.l1_epsilon),
            ],
        )?;
        Ok(scores)
    }

    /// Settings of every earlier stage, prefixed by stage name.
    fn config_echo(&self) -> Result<Record> {
        let mut out = Vec::new();
        for stage in ["pretrain", "capture", "train-ae", "score"] {
            for (k, v) in self.record(stage)? {
                if !k.starts_with(RESULT_PREFIX) {
                    out.push((format!("{stage}.{k}"), v));
                }
            }
        }
        Ok(out)
    }

    /// Prunes at every threshold; `fusion` overrides the rule used at scoring.
    pub fn prune(&self, taus: &[f64], fusion: Option<FusionRule>, k_min: KMin) -> Result<Vec<PruneReport>> {
        if taus.is_empty() {
            return Err(invalid!("at least one threshold is required"));
        }
        if let Some(bad) = taus.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(invalid!("threshold must lie in [0, 1], got {bad}"));
        }
        let model = self.load_model()?;
        let (mut scores, scored_with) = self.load_scores()?;
        let rule = fusion.unwrap_or(scored_with);
        if rule != scored_with {
            scores = refuse_scores(&scores, rule)?;
        }
        let capture = self.record("capture")?;
        let point: CapturePoint = record_value(&capture, "capture_point").unwrap_or("post").parse()?;
        let config = self.config_echo()?;
        let mut reports = Vec::with_capacity(taus.len());
        for &tau in taus {
            let (mask, pruned, report) = prune_model(&model, &scores, tau, rule, k_min, point, config.clone())?;
            let dir = layout::tau_dir(&self.dir, tau);
            fs::create_dir_all(&dir)?;
            io::write_atomic(&dir.join("mask.txt"), io::emit_mask(&mask, &model.spec).as_bytes())?;
            io::save_model(&dir.join("model.scmd"), &pruned)?;
            io::write_report(&dir.join("report.txt"), &report)?;
            reports.push(report);
        }
        Ok(reports)
    }

    /// Retrains the pruned model of one threshold.
    pub fn finetune(&self, tau: f64, data: &Dataset<f64>, schedule: &TrainSchedule) -> Result<FinetuneSummary> {
        let dir = layout::tau_dir(&self.dir, tau);
        let mut model: ModelState<f64> = io::load_model(&dir.join("model.scmd"), None)?;
        check_dataset(&model.spec, data)?;
        let before = model.evaluate(data)?;
        model.train(data, schedule)?;
        io::save_model(&dir.join("finetuned.scmd"), &model)?;
        let after = io::load_model::<f64>(&dir.join("finetuned.scmd"), None)?.evaluate(data)?;
        let decay: Vec<String> = schedule.decay_epochs.iter().map(usize::to_string).collect();
        let record = vec![
            kv("epochs", schedule.epochs),
            kv("lr", schedule.learning_rate),
            kv("momentum", schedule.momentum),
            kv("weight_decay", schedule.weight_decay),
            kv("batch_size", schedule.batch_size),
            kv("decay_epochs", decay.join(",")),
            kv("seed", schedule.seed),
            kv("result.accuracy_before", before),
            kv("result.accuracy_after", after),
        ];
        io::write_atomic(&dir.join("stage-finetune.txt"), emit_record("finetune", &record).as_bytes())?;
        Ok(FinetuneSummary { tau, accuracy_before: before, accuracy_after: after })
    }

    /// Thresholds that have been pruned, ascending.
    pub fn pruned_taus(&self) -> Result<Vec<f64>> {
        let mut taus = Vec::new();
        let entries = fs::read_dir(&self.dir).map_err(|_| ScapError::MissingInput {
            path: self.dir.clone(),
            what: "run directory".into(),
        })?;
        for entry in entries {
            let name = entry?.file_name();
            if let Some(t) = name.to_str().and_then(|n| n.strip_prefix("tau-")).and_then(|t| t.parse::<f64>().ok()) {
                taus.push(t);
            }
        }
        taus.sort_by(f64::total_cmp);
        Ok(taus)
    }

    /// Re-derives every pruned threshold from its mask and checks the
    /// stored checkpoint and report against it. Returns one line per threshold.
    pub fn audit(&self) -> Result<Vec<String>> {
        let model = self.load_model()?;
        let mut lines = Vec::new();
        for tau in self.pruned_taus()? {
            let dir = layout::tau_dir(&self.dir, tau);
            let breach = |what: String| ScapError::Contract(format!("tau {tau:.2}: {what}"));
            let mask = io::parse_mask(&io::read_text(&dir.join("mask.txt"), "prune mask")?, &model.spec)?;
            let report = io::read_report(&dir.join("report.txt"))?;
            let stored: ModelState<f64> = io::load_model(&dir.join("model.scmd"), None)?;
            let expected = propagate_and_apply(&model, &mask)?;
            if stored.spec != expected.spec {
                return Err(breach("pruned checkpoint does not match its mask".into()));
            }
            if report.pruned != expected.spec.cost()? || report.baseline != model.spec.cost()? {
                return Err(breach("report costs disagree with the networks".into()));
            }
            for (stats, keep) in report.layers.iter().zip(&mask.keep) {
                if stats.kept != keep.len() {
                    return Err(breach(format!("layer {} reports {} kept, mask has {}", stats.layer_index, stats.kept, keep.len())));
                }
                let floor = report.k_min.resolve(stats.total);
                if keep.len() < floor {
                    return Err(breach(format!("layer {} keeps {} channels, below its floor of {floor}", stats.layer_index, keep.len())));
                }
            }
            lines.push(format!("tau {tau:.2}: mask, checkpoint and report consistent (FR {:.2}%, PR {:.2}%)", report.fr, report.pr));
        }
        Ok(lines)
    }

    /// Human-readable summary of every pruned threshold.
    pub fn summary(&self) -> Result<String> {
        let pre = self.record("pretrain")?;
        let taus = self.pruned_taus()?;
        if taus.is_empty() {
            return Err(ScapError::MissingInput { path: self.dir.clone(), what: "pruned thresholds (run prune first)".into() });
        }
        let mut s = String::new();
        let acc = record_value(&pre, "result.train_accuracy").unwrap_or("-");
        writeln!(s, "baseline: flops {} params {} train_accuracy {acc}", value_or(&pre, "result.flops"), value_or(&pre, "result.params")).unwrap();
        writeln!(s, "{:>6} {:>12} {:>10} {:>8} {:>8} {:>9} {:>10} {:>10}", "tau", "flops", "params", "FR%", "PR%", "safeguard", "acc_pruned", "acc_tuned").unwrap();
        for tau in taus {
            let dir = layout::tau_dir(&self.dir, tau);
            let r = io::read_report(&dir.join("report.txt"))?;
            let ft = read_record(&dir.join("stage-finetune.txt"), "finetune record").ok();
            let pick = |key: &str| ft.as_ref().and_then(|f| record_value(f, key)).map_or("-".to_string(), |v| format!("{:.4}", v.parse::<f64>().unwrap_or(f64::NAN)));
            writeln!(
                s,
                "{:>6.2} {:>12} {:>10} {:>8.2} {:>8.2} {:>9} {:>10} {:>10}",
                r.tau,
                r.pruned.macs,
                r.pruned.params,
                r.fr,
                r.pr,
                r.any_safeguard(),
                pick("result.accuracy_before"),
                pick("result.accuracy_after")
            )
            .unwrap();
        }
        Ok(s)
    }
}

fn value_or<'a>(record: &'a Record, key: &str) -> &'a str {
    record_value(record, key).unwrap_or("-")
}

/// Checks that `data` fits the network's input and output.
pub fn check_dataset(spec: &NetworkSpec, data: &Dataset<f64>) -> Result<()> {
    let s = data.images.shape();
    let input = spec.input;
    if (s.c, s.h, s.w) != (input.c, input.h, input.w) {
        return Err(ScapError::Validation(format!(
            "dataset images are {}x{}x{}, the network expects {}x{}x{}",
            s.c, s.h, s.w, input.c, input.h, input.w
        )));
    }
    let classes = spec.output_shape()?.c;
    if data.classes != classes {
        return Err(ScapError::Validation(format!("dataset has {} classes, the network outputs {classes}", data.classes)));
    }
    Ok(())
}

/// Loads a dataset directory, taking the class count from the network output.
pub fn load_dataset(dir: &Path, spec: &NetworkSpec) -> Result<Dataset<f64>> {
    let (images, labels) = io::read_dataset::<f64>(dir)?;
    let data = Dataset::new(images, labels, spec.output_shape()?.c).map_err(|e| match e {
        ScapError::InvalidArgument(m) => ScapError::Validation(format!("dataset {}: {m}", dir.display())),
        other => other,
    })?;
    check_dataset(spec, &data)?;
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::bundled;
    use crate::nn::synthetic_dataset;

    fn small_run() -> (tempfile::TempDir, Run, Dataset<f64>) {
        let spec = NetworkSpec::parse(bundled::TOY).unwrap();
        let data = synthetic_dataset::<f64>(40, 2, 1, 16, 3).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let run = Run::new(tmp.path().join("run"));
        let schedule = TrainSchedule { epochs: 2, ..TrainSchedule::default() };
        run.pretrain(&spec, &data, &schedule).unwrap();
        (tmp, run, data)
    }

    #[test]
    fn pool_indices_are_seeded_and_distinct() {
        let a = pool_indices(100, 10, 4).unwrap();
        assert_eq!(a, pool_indices(100, 10, 4).unwrap());
        assert_ne!(a, pool_indices(100, 10, 5).unwrap());
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(pool_indices(5, 512, 0).unwrap(), vec![0, 1, 2, 3, 4]);
        assert!(pool_indices(5, 0, 0).is_err());
    }

    #[test]
    fn stages_run_in_order_and_tau_zero_keeps_everything() {
        let (_tmp, run, data) = small_run();
        assert!(matches!(run.score(&ScoreConfig::default()), Err(ScapError::MissingInput { .. })));
        assert_eq!(run.capture(&data, 8, CapturePoint::PostActivation, 1).unwrap(), 8);
        let cfg = TrainConfig { epochs: 2, batch_size: 8, accum_steps: 1, ..TrainConfig::default() };
        assert_eq!(run.train_autoencoders(&cfg).unwrap().len(), 3);
        let scores = run.score(&ScoreConfig::default()).unwrap();
        assert_eq!(scores.len(), 3);

        let reports = run.prune(&[0.0, 1.0], None, KMin::Default).unwrap();
        assert_eq!((reports[0].fr, reports[0].pr), (0.0, 0.0));
        assert!(reports[0].layers.iter().all(|l| l.kept == l.total));
        assert!(reports[1].layers.iter().all(|l| l.kept >= 1));
        let base = run.load_model().unwrap();
        let pruned: ModelState<f64> = io::load_model(&layout::tau_dir(run.dir(), 0.0).join("model.scmd"), None).unwrap();
        assert_eq!(pruned.forward(&data.images).unwrap(), base.forward(&data.images).unwrap());
        assert!(reports[0].config.iter().any(|(k, v)| k == "capture.samples" && v == "8"));
        assert!(reports[0].config.iter().all(|(k, _)| !k.contains("result.")));

        let ft = run.finetune(1.0, &data, &TrainSchedule { epochs: 1, ..TrainSchedule::default() }).unwrap();
        assert!((0.0..=1.0).contains(&ft.accuracy_after));
        assert_eq!(run.audit().unwrap().len(), 2);
        let mask_path = layout::tau_dir(run.dir(), 1.0).join("mask.txt");
        let text = fs::read_to_string(&mask_path).unwrap();
        let emptied: String = text.lines().map(|l| if l.starts_with("2 ") { "2 \n".to_string() } else { format!("{l}\n") }).collect();
        fs::write(&mask_path, emptied).unwrap();
        assert!(matches!(run.audit(), Err(ScapError::Contract(_))));
        let summary = run.summary().unwrap();
        assert!(summary.contains("0.00") && summary.contains("1.00"), "{summary}");
    }

    #[test]
    fn mismatched_dataset_is_rejected() {
        let spec = NetworkSpec::parse(bundled::TOY).unwrap();
        let wrong_size = synthetic_dataset::<f64>(4, 2, 1, 8, 0).unwrap();
        assert!(matches!(check_dataset(&spec, &wrong_size), Err(ScapError::Validation(_))));
        let wrong_classes = synthetic_dataset::<f64>(4, 3, 1, 16, 0).unwrap();
        assert!(matches!(check_dataset(&spec, &wrong_classes), Err(ScapError::Validation(_))));
    }

    #[test]
    fn refusing_with_another_rule_changes_only_fused_scores() {
        let iv = ImportanceVector {
            layer_id: 0,
            fid: vec![0.9, 0.2, 0.5],
            i_fid: vec![0.1, 0.8, 0.5],
            i_l1: vec![1.0, 0.2, 0.6],
            fused: vec![0.0; 3],
            normalized: vec![0.0; 3],
        };
        let rule = FusionRule::new(crate::scoring::FusionKind::Mul, 0.5).unwrap();
        let out = refuse_scores(std::slice::from_ref(&iv), rule).unwrap();
        assert_eq!(out[0].fid, iv.fid);
        assert_eq!(out[0].fused, vec![0.1, 0.16000000000000003, 0.3]);
        assert_eq!(out[0].normalized, normalize_layer_scores(&out[0].fused));
    }
}
