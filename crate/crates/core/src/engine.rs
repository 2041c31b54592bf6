//! Source training, the adaptation loop and its ablation variants.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use serde_json::json;

use crate::augment::{channel_means, make_pair, AugmentedPair};
use crate::calibration::{weighted_bce_logits, weighted_bce_losses, CalibrationStats, StatsRecord, STATS_CSV_HEADER};
use crate::datamodel::types::foreground_fraction;
use crate::datamodel::{
    save_checkpoint, CbmtConfig, EvalModel, ImageSample, ParamSnapshot, ProbMap, Producer, PseudoLabelMap,
    StatsLoss, StatsSource,
};
use crate::meanteacher::{init_pair, ModelAdapter, ModelMode};
use crate::metrics::{evaluate_masks, EvalResult};
use crate::nn::{Adam, SegNet};
use crate::pseudo::{informative_pixel_mask, make_pseudo_labels};
use crate::rng::{derive_seed, rng_from, stream_seed};
use crate::{class_name, CbmtError, Result, Scalar, CLASS_CUP};

/// Builds the segmentation network described by `cfg`.
pub fn build_model<F: Scalar>(cfg: &CbmtConfig) -> SegNet<F> {
    SegNet::new(cfg.model.widths, cfg.num_classes, stream_seed(cfg.seed, "init"))
}

/// One line of the adaptation log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// One-based index of the completed epoch.
    pub epoch: usize,
    pub mean_loss: f64,
    /// Dice per class on the evaluation split; NaN without one.
    pub dice: Vec<f64>,
    pub mean_dice: f64,
    /// Background weights in effect at the end of the epoch.
    pub bg_weight: Vec<f64>,
    /// Predicted foreground pixel fraction per class on the evaluation split.
    pub fg_frac: Vec<f64>,
    /// Student Dice per class when both models are evaluated.
    pub student_dice: Option<Vec<f64>>,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunLog {
    pub num_classes: usize,
    pub records: Vec<EpochRecord>,
}

impl RunLog {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, rec: EpochRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if rec.epoch <= last.epoch {
                return Err(CbmtError::InvalidArgument(format!(
                    "epoch {} logged after epoch {}",
                    rec.epoch, last.epoch
                )));
            }
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.mean_loss).collect()
    }

    pub fn mean_dice(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.mean_dice).collect()
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.records
            .iter()
            .filter(|r| !r.mean_dice.is_nan())
            .fold(None, |best: Option<&EpochRecord>, r| match best {
                Some(b) if b.mean_dice >= r.mean_dice => Some(b),
                _ => Some(r),
            })
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn to_csv(&self) -> String {
        let c = self.num_classes;
        let names: Vec<String> = (0..c).map(|k| class_name(k, c)).collect();
        let with_student = self.records.iter().any(|r| r.student_dice.is_some());
        let mut cols = vec!["epoch".to_string(), "mean_loss".to_string()];
        cols.extend(names.iter().map(|n| format!("dice_{n}")));
        cols.push("mean_dice".into());
        cols.extend(names.iter().map(|n| format!("bg_weight_{n}")));
        cols.extend(names.iter().map(|n| format!("fg_frac_{n}")));
        if with_student {
            cols.extend(names.iter().map(|n| format!("student_dice_{n}")));
        }
        cols.push("wall_time_s".into());
        let mut out = cols.join(",");
        out.push('\n');
        for r in &self.records {
            let mut v = vec![r.epoch.to_string(), r.mean_loss.to_string()];
            v.extend(r.dice.iter().map(f64::to_string));
            v.push(r.mean_dice.to_string());
            v.extend(r.bg_weight.iter().map(f64::to_string));
            v.extend(r.fg_frac.iter().map(f64::to_string));
            if with_student {
                match &r.student_dice {
                    Some(d) => v.extend(d.iter().map(f64::to_string)),
                    None => v.extend(std::iter::repeat_n("nan".to_string(), c)),
                }
            }
            v.push(format!("{:.3}", r.wall_time_s));
            out.push_str(&v.join(","));
            out.push('\n');
        }
        out
    }
}

/// Metrics of one model on a labeled split.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub result: EvalResult,
    /// Predicted foreground pixel fraction per class over the split.
    pub fg_frac: Vec<f64>,
}

impl EvalReport {
    pub fn dice(&self) -> Vec<f64> {
        self.result.aggregates.iter().map(|a| a.dice_mean).collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "classes": self.result.aggregate_json(),
            "mean_dice": self.result.mean_dice(),
            "fg_frac": self.fg_frac,
        })
    }
}

fn batches<T>(items: &[T], size: usize) -> impl Iterator<Item = &[T]> {
    items.chunks(size.max(1))
}

/// Binary masks (`probability > 0.5`) predicted in eval mode. The model's mode is restored.
pub fn predict_masks<F: Scalar, M: ModelAdapter<F>>(
    model: &mut M,
    samples: &[ImageSample<F>],
    batch_size: usize,
) -> Result<Vec<Array3<u8>>> {
    let prev = model.mode();
    model.set_mode(ModelMode::Eval);
    let mut out = Vec::with_capacity(samples.len());
    for chunk in batches(samples, batch_size) {
        let refs: Vec<&Array3<F>> = chunk.iter().map(|s| &s.pixels).collect();
        for logits in model.forward(&refs)? {
            out.push(logits.mapv(|z| u8::from(z > F::zero())));
        }
    }
    model.set_mode(prev);
    Ok(out)
}

/// Scores a model on labeled samples.
pub fn evaluate_model<F: Scalar, M: ModelAdapter<F>>(
    model: &mut M,
    samples: &[ImageSample<F>],
    batch_size: usize,
) -> Result<EvalReport> {
    let truths = samples
        .iter()
        .map(|s| s.mask.clone().ok_or_else(|| CbmtError::Unlabeled { id: s.id.clone() }))
        .collect::<Result<Vec<_>>>()?;
    let preds = predict_masks(model, samples, batch_size)?;
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let result = evaluate_masks(&ids, &preds, &truths)?;
    let c = model.num_classes();
    let mut fg_frac = vec![0.0; c];
    for p in &preds {
        for (acc, f) in fg_frac.iter_mut().zip(foreground_fraction(p)) {
            *acc += f;
        }
    }
    fg_frac.iter_mut().for_each(|f| *f /= preds.len() as f64);
    Ok(EvalReport { result, fg_frac })
}

/// Result of supervised source training.
#[derive(Clone, Debug)]
pub struct SourceRun<F> {
    pub params: ParamSnapshot<F>,
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Per-batch losses of every epoch.
    pub batch_losses: Vec<Vec<f64>>,
}

fn shuffled_order(n: usize, seed: u64, stream: &str, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from(derive_seed(seed, stream, epoch as u64)));
    idx
}

/// Supervised BCE training on labeled source samples with the decaying learning rate.
pub fn train_source<F: Scalar, M: ModelAdapter<F>>(
    data: &[ImageSample<F>],
    cfg: &CbmtConfig,
    model: &mut M,
) -> Result<SourceRun<F>> {
    if data.is_empty() {
        return Err(CbmtError::Empty("source dataset".into()));
    }
    if let Some(s) = data.iter().find(|s| s.mask.is_none()) {
        return Err(CbmtError::Unlabeled { id: s.id.clone() });
    }
    let c = model.num_classes();
    let ones = vec![1.0; c];
    let mut adam = Adam::new(cfg.optimizer_momenta);
    let fill = channel_means(data);
    model.set_mode(ModelMode::Train);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs_source);
    let mut batch_losses = Vec::with_capacity(cfg.epochs_source);
    for epoch in 0..cfg.epochs_source {
        let lr = cfg.lr_source_at(epoch);
        let order = shuffled_order(data.len(), cfg.seed, "source_shuffle", epoch);
        let mut losses = Vec::new();
        for (b, chunk) in batches(&order, cfg.batch_size).enumerate() {
            let views: Vec<ImageSample<F>> = chunk
                .iter()
                .map(|&i| {
                    let s = &data[i];
                    if cfg.source_augment {
                        let seed = derive_seed(cfg.seed, &s.id, epoch as u64);
                        make_pair(s, seed, &cfg.augment, fill, true).strong_view
                    } else {
                        s.clone()
                    }
                })
                .collect();
            let refs: Vec<&Array3<F>> = views.iter().map(|s| &s.pixels).collect();
            let logits = model.forward(&refs)?;
            let mut grads = Vec::with_capacity(views.len());
            let mut total = 0.0;
            for (z, v) in logits.iter().zip(&views) {
                let (l, g) = weighted_bce_logits(z, v.mask.as_ref().expect("checked"), &ones, None)?;
                total += l;
                grads.push(g.mapv(|x| x / F::lit(views.len() as f64)));
            }
            let loss = total / views.len() as f64;
            if !loss.is_finite() {
                return Err(CbmtError::NonFinite {
                    context: format!("source loss at epoch {epoch} batch {b}"),
                });
            }
            model.zero_grad();
            model.backward(&grads)?;
            adam.step(model, lr)?;
            losses.push(loss);
        }
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        log::info!("source epoch {epoch}: lr={lr:.3e} loss={mean:.6}");
        epoch_losses.push(mean);
        batch_losses.push(losses);
    }
    Ok(SourceRun {
        params: model.read_params(),
        epoch_losses,
        batch_losses,
    })
}

/// Optional evaluation split and output directory for [`adapt`].
#[derive(Clone, Copy, Debug, Default)]
pub struct AdaptOptions<'a, F> {
    /// Labeled target split scored after every epoch; logging only.
    pub eval_set: Option<&'a [ImageSample<F>]>,
    /// Receives `ckpt_epoch{e}.bin` every `ckpt_every` epochs.
    pub out_dir: Option<&'a Path>,
}

#[derive(Clone, Debug)]
pub struct AdaptRun<F> {
    pub teacher: ParamSnapshot<F>,
    pub student: ParamSnapshot<F>,
    pub log: RunLog,
    pub calibration: Vec<StatsRecord>,
    /// Source model on the evaluation split, before any update.
    pub initial: Option<EvalReport>,
    /// Evaluated model after the last epoch.
    pub final_eval: Option<EvalReport>,
}

impl<F> AdaptRun<F> {
    pub fn calibration_csv(&self) -> String {
        let mut s = format!("{STATS_CSV_HEADER}\n");
        for r in &self.calibration {
            s.push_str(&r.csv_line());
            s.push('\n');
        }
        s
    }

    /// Deterministic summary: no timings.
    pub fn summary_json(&self, mode: &str, cfg: &CbmtConfig) -> serde_json::Value {
        let best = self.log.best();
        json!({
            "mode": mode,
            "config_hash": format!("{:016x}", cfg.hash()),
            "seed": cfg.seed,
            "epochs": self.log.records.len(),
            "initial": self.initial.as_ref().map(EvalReport::to_json),
            "final": self.final_eval.as_ref().map(EvalReport::to_json),
            "best_epoch": best.map(|r| r.epoch),
            "best_mean_dice": best.map(|r| r.mean_dice),
            "final_bg_weight": self.log.last().map(|r| r.bg_weight.clone()),
            "losses": self.log.losses(),
        })
    }
}

fn per_sample_mask<F>(pair: &AugmentedPair<F>, loss_on_erased: bool) -> Option<Array2<u8>> {
    if loss_on_erased {
        None
    } else {
        pair.unerased_mask()
    }
}

/// Adapts `source` to unlabeled `target` samples with a teacher/student pair.
///
/// Per batch: weak views go through the teacher, whose thresholded output is
/// the pseudo-label; the student is trained on the strong views with the
/// calibrated BCE; the teacher then moves towards the student. Statistics are
/// accumulated from the per-pixel losses of the pixels that pass the
/// informative-pixel filter (teacher predictions by default, see
/// `stats_source`) and finalized at the end of each epoch. Returns the last teacher.
pub fn adapt<F, M, B>(
    target: &[ImageSample<F>],
    source: &ParamSnapshot<F>,
    cfg: &CbmtConfig,
    builder: B,
    opts: AdaptOptions<'_, F>,
) -> Result<AdaptRun<F>>
where
    F: Scalar,
    M: ModelAdapter<F>,
    B: Fn() -> M,
{
    if target.is_empty() {
        return Err(CbmtError::Empty("target dataset".into()));
    }
    let mut pair = init_pair(source, builder, cfg.lambda_ema, cfg.ema_buffers)?;
    let c = pair.student.num_classes();
    let mut adam = Adam::new(cfg.optimizer_momenta);
    let lr = cfg.effective_lr_adapt();
    let fill = channel_means(target);
    let mut stats = CalibrationStats::new(c);
    let mut calibration = Vec::new();
    let mut log = RunLog::new(c);
    if let Some(dir) = opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| CbmtError::file(dir, e))?;
    }

    let eval = |pair: &mut crate::meanteacher::TeacherStudentPair<M>| -> Result<Option<(EvalReport, Option<EvalReport>)>> {
        let Some(set) = opts.eval_set else { return Ok(None) };
        Ok(Some(match cfg.eval_model {
            EvalModel::Teacher => (evaluate_model(&mut pair.teacher, set, cfg.batch_size)?, None),
            EvalModel::Student => (evaluate_model(&mut pair.student, set, cfg.batch_size)?, None),
            EvalModel::Both => (
                evaluate_model(&mut pair.teacher, set, cfg.batch_size)?,
                Some(evaluate_model(&mut pair.student, set, cfg.batch_size)?),
            ),
        }))
    };
    let initial = eval(&mut pair)?.map(|(r, _)| r);
    if let Some(r) = &initial {
        log::info!("before adaptation: mean dice {:.4}", r.result.mean_dice());
    }

    let start = Instant::now();
    let mut final_eval = initial.clone();
    for epoch in 0..cfg.epochs_adapt {
        let order = shuffled_order(target.len(), cfg.seed, "adapt_shuffle", epoch);
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for (b, chunk) in batches(&order, cfg.batch_size).enumerate() {
            let pairs: Vec<AugmentedPair<F>> = chunk
                .iter()
                .map(|&i| {
                    let s = &target[i];
                    make_pair(s, derive_seed(cfg.seed, &s.id, epoch as u64), &cfg.augment, fill, cfg.strong_aug)
                })
                .collect();

            let weak: Vec<&Array3<F>> = pairs.iter().map(|p| &p.weak_view.pixels).collect();
            let teacher_logits = pair.teacher.forward(&weak)?;
            let strong: Vec<&Array3<F>> = pairs.iter().map(|p| &p.strong_view.pixels).collect();
            let student_logits = pair.student.forward(&strong)?;

            let weights = stats.background_weights(&cfg.calibrated_classes, c, cfg.stats_timing)?;
            let mut grads = Vec::with_capacity(pairs.len());
            let mut total = 0.0;
            for ((tz, sz), p) in teacher_logits.iter().zip(&student_logits).zip(&pairs) {
                let t_probs = ProbMap::from_logits(tz, Producer::Teacher);
                let labels: PseudoLabelMap = make_pseudo_labels(&t_probs, cfg.gamma)?;
                let mask = per_sample_mask(p, cfg.loss_on_erased);
                let (l, g) = weighted_bce_logits(sz, &labels.labels, &weights, mask.as_ref())?;
                total += l;
                grads.push(g.mapv(|x| x / F::lit(pairs.len() as f64)));

                let probs = match cfg.stats_source {
                    StatsSource::Teacher => t_probs,
                    StatsSource::Student => ProbMap::from_logits(sz, Producer::Student),
                };
                let keep = informative_pixel_mask(&probs, &labels, cfg.gamma, cfg.alpha, cfg.filter_mode)?;
                let stat_weights = match cfg.stats_loss {
                    StatsLoss::Raw => vec![1.0; c],
                    StatsLoss::Calibrated => weights.clone(),
                };
                let losses = weighted_bce_losses(&probs.values, &labels.labels, &stat_weights)?;
                stats.accumulate_stats(&losses.per_pixel, &labels, &keep)?;
            }
            let loss = total / pairs.len() as f64;
            if !loss.is_finite() {
                return Err(CbmtError::NonFinite {
                    context: format!("adaptation loss at epoch {epoch} batch {b}"),
                });
            }
            pair.student.zero_grad();
            pair.student.backward(&grads)?;
            adam.step(&mut pair.student, lr)?;
            pair.ema_update()?;
            loss_sum += loss;
            n_batches += 1;
        }
        let applied = stats.background_weights(&cfg.calibrated_classes, c, cfg.stats_timing)?;
        calibration.extend(stats.finalize_epoch());

        let evaluated = eval(&mut pair)?;
        let (dice, fg_frac, student_dice) = match &evaluated {
            Some((r, s)) => (r.dice(), r.fg_frac.clone(), s.as_ref().map(EvalReport::dice)),
            None => (vec![f64::NAN; c], vec![f64::NAN; c], None),
        };
        let mean_dice = dice.iter().sum::<f64>() / c as f64;
        let rec = EpochRecord {
            epoch: epoch + 1,
            mean_loss: loss_sum / n_batches as f64,
            dice,
            mean_dice,
            bg_weight: applied,
            fg_frac,
            student_dice,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "adapt epoch {}: loss={:.6} mean_dice={:.4} dice={:?} fg_frac={:?}",
            rec.epoch,
            rec.mean_loss,
            rec.mean_dice,
            rec.dice,
            rec.fg_frac
        );
        log.push(rec)?;
        if let Some(e) = evaluated {
            final_eval = Some(e.0);
        }
        if let Some(dir) = opts.out_dir {
            if cfg.ckpt_every > 0 && (epoch + 1) % cfg.ckpt_every == 0 {
                let path = dir.join(format!("ckpt_epoch{}.bin", epoch + 1));
                save_checkpoint(&path, &pair.teacher.read_params(), cfg.hash())?;
            }
        }
    }
    Ok(AdaptRun {
        teacher: pair.teacher.read_params(),
        student: pair.student.read_params(),
        log,
        calibration,
        initial,
        final_eval,
    })
}

/// Writes `runlog.csv`, `calibration.csv`, `summary.json` and the final checkpoints.
pub fn write_adapt_outputs<F: Scalar>(run: &AdaptRun<F>, cfg: &CbmtConfig, mode: &str, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CbmtError::file(dir, e))?;
    let write = |name: &str, text: String| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| CbmtError::file(&p, e))
    };
    write("runlog.csv", run.log.to_csv())?;
    write("calibration.csv", run.calibration_csv())?;
    let summary = serde_json::to_string_pretty(&run.summary_json(mode, cfg)).expect("json");
    write("summary.json", summary + "\n")?;
    save_checkpoint(&dir.join("teacher_final.bin"), &run.teacher, cfg.hash())?;
    save_checkpoint(&dir.join("student_final.bin"), &run.student, cfg.hash())?;
    Ok(())
}

/// Rows of the component ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AblationMode {
    /// Self-training: the model labels its own weak views.
    PseudoLabel,
    Ema,
    EmaAug,
    EmaCalib,
    Full,
}

impl AblationMode {
    pub const ALL: [AblationMode; 5] = [
        AblationMode::PseudoLabel,
        AblationMode::Ema,
        AblationMode::EmaAug,
        AblationMode::EmaCalib,
        AblationMode::Full,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::PseudoLabel => "pl",
            AblationMode::Ema => "ema",
            AblationMode::EmaAug => "ema+aug",
            AblationMode::EmaCalib => "ema+calib",
            AblationMode::Full => "full",
        }
    }

    /// Copy of `base` with the moving average, strong augmentation and
    /// calibration switched on or off for this row.
    pub fn configure(self, base: &CbmtConfig) -> CbmtConfig {
        let (ema, aug, calib) = match self {
            AblationMode::PseudoLabel => (false, false, false),
            AblationMode::Ema => (true, false, false),
            AblationMode::EmaAug => (true, true, false),
            AblationMode::EmaCalib => (true, false, true),
            AblationMode::Full => (true, true, true),
        };
        let mut cfg = base.clone();
        if !ema {
            cfg.lambda_ema = 0.0;
        } else if cfg.lambda_ema == 0.0 {
            cfg.lambda_ema = CbmtConfig::default().lambda_ema;
        }
        cfg.strong_aug = aug;
        cfg.calibrated_classes = if !calib {
            Vec::new()
        } else if base.calibrated_classes.is_empty() {
            vec![CLASS_CUP]
        } else {
            base.calibrated_classes.clone()
        };
        cfg
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = CbmtError;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        Ok(match t.trim_start_matches('+') {
            "pl" | "p-l" | "vanilla-pl" => AblationMode::PseudoLabel,
            "ema" => AblationMode::Ema,
            "ema+aug" => AblationMode::EmaAug,
            "ema+calib" => AblationMode::EmaCalib,
            "full" | "cbmt" => AblationMode::Full,
            _ => {
                return Err(CbmtError::InvalidArgument(format!(
                    "unknown ablation row `{s}` (expected pl, ema, ema+aug, ema+calib or full)"
                )))
            }
        })
    }
}

/// [`adapt`] with the flags of one ablation row.
pub fn run_ablation<F, M, B>(
    mode: AblationMode,
    target: &[ImageSample<F>],
    source: &ParamSnapshot<F>,
    base: &CbmtConfig,
    builder: B,
    opts: AdaptOptions<'_, F>,
) -> Result<AdaptRun<F>>
where
    F: Scalar,
    M: ModelAdapter<F>,
    B: Fn() -> M,
{
    adapt(target, source, &mode.configure(base), builder, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::{synthesize, SynthSpec};
    use crate::datamodel::ModelConfig;

    fn tiny_cfg() -> CbmtConfig {
        CbmtConfig {
            roi_size: [32, 32],
            batch_size: 4,
            epochs_source: 1,
            epochs_adapt: 2,
            model: ModelConfig { widths: [4, 4, 8, 8] },
            ..CbmtConfig::default()
        }
    }

    fn tiny_data() -> crate::data_io::SynthData<f64> {
        synthesize(&SynthSpec {
            n_images: 4,
            n_test: 2,
            image_size: [32, 32],
            disc_radius_range: [6.0, 9.0],
            ..SynthSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn ablation_rows() {
        let base = CbmtConfig::default();
        let full = AblationMode::Full.configure(&base);
        assert!(full.lambda_ema > 0.0 && full.strong_aug && full.calibrated_classes == vec![CLASS_CUP]);
        let pl = AblationMode::PseudoLabel.configure(&base);
        assert!(pl.lambda_ema == 0.0 && !pl.strong_aug && pl.calibrated_classes.is_empty());
        let ec = AblationMode::EmaCalib.configure(&base);
        assert!(!ec.strong_aug && ec.lambda_ema == 0.98 && !ec.calibrated_classes.is_empty());
        for m in AblationMode::ALL {
            assert_eq!(m.as_str().parse::<AblationMode>().unwrap(), m);
        }
        assert_eq!("+EMA+Calib".parse::<AblationMode>().unwrap(), AblationMode::EmaCalib);
        assert!("bogus".parse::<AblationMode>().is_err());
    }

    #[test]
    fn lr_schedule() {
        let cfg = CbmtConfig::default();
        for e in [0, 1, 5, 199] {
            assert!((cfg.lr_source_at(e) - 1e-3 * 0.98f64.powi(e as i32)).abs() < 1e-18);
        }
    }

    #[test]
    fn source_training_rejects_unlabeled() {
        let data = tiny_data();
        let cfg = tiny_cfg();
        let mut net = build_model::<f64>(&cfg);
        let err = train_source(&data.target_train, &cfg, &mut net).unwrap_err();
        assert!(matches!(err, CbmtError::Unlabeled { .. }));
    }

    #[test]
    fn one_source_step_lowers_the_batch_loss() {
        let data = tiny_data();
        let cfg = CbmtConfig {
            source_augment: false,
            ..tiny_cfg()
        };
        let mut net = build_model::<f64>(&cfg);
        let loss_of = |net: &mut SegNet<f64>| {
            net.set_mode(ModelMode::Train);
            let refs: Vec<&Array3<f64>> = data.source_train.iter().map(|s| &s.pixels).collect();
            let z = net.forward(&refs).unwrap();
            z.iter()
                .zip(&data.source_train)
                .map(|(z, s)| weighted_bce_logits(z, s.mask.as_ref().unwrap(), &[1.0, 1.0], None).unwrap().0)
                .sum::<f64>()
        };
        let before = loss_of(&mut net.clone());
        train_source(&data.source_train, &cfg, &mut net).unwrap();
        let after = loss_of(&mut net);
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn adaptation_is_deterministic_and_logs_every_epoch() {
        let data = tiny_data();
        let cfg = tiny_cfg();
        let mut net = build_model::<f64>(&cfg);
        let src = train_source(&data.source_train, &cfg, &mut net).unwrap();
        let b = || build_model::<f64>(&cfg);
        let opts = AdaptOptions {
            eval_set: Some(&data.target_test[..]),
            out_dir: None,
        };
        let r1 = adapt(&data.target_train, &src.params, &cfg, b, opts).unwrap();
        let r2 = adapt(&data.target_train, &src.params, &cfg, b, opts).unwrap();
        assert_eq!(r1.log.losses(), r2.log.losses());
        assert_eq!(r1.teacher, r2.teacher);
        assert_eq!(r1.log.records.len(), 2);
        assert_eq!(r1.calibration.len(), 2 * cfg.num_classes);
        // first epoch runs with weight 1; the second uses what epoch 1 finalized
        assert_eq!(r1.log.records[0].bg_weight, vec![1.0, 1.0]);
        let finalized = r1.calibration.iter().find(|r| r.epoch == 0 && r.class == CLASS_CUP).unwrap();
        assert_eq!(r1.log.records[1].bg_weight[CLASS_CUP], finalized.bg_weight);
        assert!(r1.log.to_csv().starts_with("epoch,mean_loss,dice_disc,dice_cup,mean_dice"));
    }

    #[test]
    fn frozen_teacher_gives_constant_predictions() {
        let data = tiny_data();
        let cfg = CbmtConfig {
            lambda_ema: 1.0,
            calibrated_classes: vec![],
            ..tiny_cfg()
        };
        let mut net = build_model::<f64>(&cfg);
        let src = train_source(&data.source_train, &cfg, &mut net).unwrap();
        let run = adapt(
            &data.target_train,
            &src.params,
            &cfg,
            || build_model::<f64>(&cfg),
            AdaptOptions {
                eval_set: Some(&data.target_test[..]),
                out_dir: None,
            },
        )
        .unwrap();
        assert_eq!(run.teacher.entries, src.params.entries);
        let d0 = &run.log.records[0];
        assert!(run.log.records.iter().all(|r| r.dice == d0.dice && r.fg_frac == d0.fg_frac));
    }

    #[test]
    fn empty_target_is_an_error() {
        let cfg = tiny_cfg();
        let src = build_model::<f64>(&cfg).read_params();
        let r = adapt(&[], &src, &cfg, || build_model::<f64>(&cfg), AdaptOptions::default());
        assert!(matches!(r, Err(CbmtError::Empty(_))));
    }
}
