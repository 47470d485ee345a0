use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::matcher::ActionMatcher;
use super::{
    Bucket, EvalError, EvalReport, EvalSample, LabelStats, PredictionRecord, ReportMeta,
    SampleOutcome, Setting, Significance, TEXT_NORMALIZATION,
};
use crate::backends::Backends;
use crate::catalog::ActionCatalog;
use crate::digest::seed_from_parts;
use crate::exec::Execution;

/// Scores already-matched predictions. `predicted` maps sample id to
/// catalog index and must cover every sample.
pub fn score(
    samples: &[EvalSample],
    predicted: &HashMap<String, usize>,
    n_labels: usize,
    meta: &ReportMeta,
) -> Result<EvalReport, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::NoSamples);
    }
    let mut per_label: BTreeMap<usize, LabelStats> = (0..n_labels)
        .map(|i| (i, LabelStats { correct: 0, total: 0, accuracy: 0.0 }))
        .collect();
    let mut outcomes = Vec::with_capacity(samples.len());
    for s in samples {
        let stats = per_label.get_mut(&s.gold_action_index).ok_or_else(|| EvalError::InvalidGold {
            id: s.id.clone(),
            index: s.gold_action_index,
            size: n_labels,
        })?;
        let p = *predicted.get(&s.id).ok_or_else(|| EvalError::MissingPrediction {
            id: s.id.clone(),
            context: context(meta),
        })?;
        let correct = p == s.gold_action_index;
        stats.total += 1;
        stats.correct += usize::from(correct);
        outcomes.push(SampleOutcome {
            sample_id: s.id.clone(),
            gold: s.gold_action_index,
            predicted: p,
            correct,
        });
    }
    for stats in per_label.values_mut() {
        if stats.total > 0 {
            stats.accuracy = stats.correct as f64 / stats.total as f64;
        }
    }
    outcomes.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    let correct = outcomes.iter().filter(|o| o.correct).count();
    Ok(EvalReport {
        system: meta.system.clone(),
        group: meta.group.clone(),
        setting: meta.setting,
        encoder_id: meta.encoder_id.clone(),
        n_samples: samples.len(),
        correct,
        accuracy: correct as f64 / samples.len() as f64,
        per_label,
        significance: None,
        buckets: None,
        text_normalization: TEXT_NORMALIZATION.to_string(),
        outcomes,
    })
}

fn context(meta: &ReportMeta) -> String {
    let mut c = format!("{} / {}", meta.setting, meta.encoder_id);
    if !meta.system.is_empty() {
        c = format!("{} / {c}", meta.system);
    }
    c
}

/// Matches and scores the predictions of one system in one setting.
pub fn evaluate(
    samples: &[EvalSample],
    predictions: &[PredictionRecord],
    matcher: &ActionMatcher,
    backends: &Backends,
    opts: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::NoSamples);
    }
    let first = predictions
        .first()
        .ok_or_else(|| EvalError::Invalid("no predictions to evaluate".into()))?;
    let meta = ReportMeta {
        system: first.system.clone().unwrap_or_default(),
        group: first.group.clone().unwrap_or_default(),
        setting: first.setting,
        encoder_id: matcher.encoder_id().to_string(),
    };
    let known: HashSet<&str> = samples.iter().map(|s| s.id.as_str()).collect();
    let mut seen = HashSet::new();
    for p in predictions {
        if p.setting != meta.setting
            || p.system.as_deref().unwrap_or_default() != meta.system
            || p.group.as_deref().unwrap_or_default() != meta.group
        {
            return Err(EvalError::Invalid(format!(
                "line {}: predictions passed to evaluate must share system, group and setting",
                p.line
            )));
        }
        if !known.contains(p.sample_id.as_str()) {
            return Err(EvalError::UnknownSample { id: p.sample_id.clone(), line: p.line });
        }
        if !seen.insert(p.sample_id.as_str()) {
            return Err(EvalError::DuplicatePrediction {
                id: p.sample_id.clone(),
                line: p.line,
                context: context(&meta),
            });
        }
    }
    let texts: Vec<String> = predictions.iter().map(|p| p.response_text.clone()).collect();
    let indices = matcher.match_batch(backends, &texts, opts.batch_size, opts.execution)?;
    let predicted: HashMap<String, usize> = predictions
        .iter()
        .zip(indices)
        .map(|(p, i)| (p.sample_id.clone(), i))
        .collect();
    score(samples, &predicted, matcher.labels().len(), &meta)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub seed: u64,
    pub alpha: f64,
    pub execution: Execution,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            resamples: 10_000,
            seed: 0,
            alpha: 0.05,
            execution: Execution::default(),
        }
    }
}

const CHUNK: usize = 1_000;

/// Paired bootstrap test with the default configuration. Returns
/// `(p_value, significant)`.
pub fn significance(baseline: &[bool], variant: &[bool]) -> Result<(f64, bool), EvalError> {
    significance_with(baseline, variant, &BootstrapConfig::default())
}

/// Two-sided paired bootstrap on the difference in correct counts.
///
/// With `d_i = variant_i - baseline_i` and `D = sum(d)`, each resample draws
/// `n` indices with replacement and sums `d` over them. The p-value is the
/// fraction of resamples whose sum lies at least `|D|` away from `D`.
/// Resamples are split into fixed chunks, each with its own seeded stream,
/// so the result does not depend on how chunks are scheduled.
pub fn significance_with(
    baseline: &[bool],
    variant: &[bool],
    cfg: &BootstrapConfig,
) -> Result<(f64, bool), EvalError> {
    if baseline.len() != variant.len() {
        return Err(EvalError::LengthMismatch {
            left: baseline.len(),
            right: variant.len(),
        });
    }
    if baseline.is_empty() {
        return Err(EvalError::NoSamples);
    }
    if cfg.resamples == 0 {
        return Err(EvalError::Invalid("bootstrap needs at least one resample".into()));
    }
    let d: Vec<i64> = baseline
        .iter()
        .zip(variant)
        .map(|(&b, &v)| i64::from(v) - i64::from(b))
        .collect();
    let observed: i64 = d.iter().sum();
    let n = d.len();
    let chunks = cfg.resamples.div_ceil(CHUNK);
    let extreme: usize = cfg
        .execution
        .map_range(chunks, |c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed_from_parts([
                &cfg.seed.to_le_bytes()[..],
                &(c as u64).to_le_bytes(),
            ]));
            let count = CHUNK.min(cfg.resamples - c * CHUNK);
            (0..count)
                .filter(|_| {
                    let s: i64 = (0..n).map(|_| d[rng.random_range(0..n)]).sum();
                    (s - observed).abs() >= observed.abs()
                })
                .count()
        })
        .into_iter()
        .sum();
    let p = extreme as f64 / cfg.resamples as f64;
    Ok((p, p < cfg.alpha))
}

/// Per-sample correctness of two reports, aligned by sample id.
pub fn paired_outcomes(baseline: &EvalReport, variant: &EvalReport) -> Result<(Vec<bool>, Vec<bool>), EvalError> {
    if baseline.outcomes.len() != variant.outcomes.len() {
        return Err(EvalError::LengthMismatch {
            left: baseline.outcomes.len(),
            right: variant.outcomes.len(),
        });
    }
    let mut b = Vec::with_capacity(baseline.outcomes.len());
    let mut v = Vec::with_capacity(baseline.outcomes.len());
    for (x, y) in baseline.outcomes.iter().zip(&variant.outcomes) {
        if x.sample_id != y.sample_id {
            return Err(EvalError::Invalid(format!(
                "reports cover different samples ({} vs {})",
                x.sample_id, y.sample_id
            )));
        }
        b.push(x.correct);
        v.push(y.correct);
    }
    Ok((b, v))
}

/// Splits labels into four buckets of ascending accuracy. Bucket 1 gets
/// `floor(n / 4)` labels; the remainder goes one each to buckets 4, 3, 2.
pub fn bucketize(per_label_accuracy: &BTreeMap<usize, f64>, n_labels: usize) -> Result<Vec<Bucket>, EvalError> {
    let complete = per_label_accuracy.len() == n_labels
        && per_label_accuracy.keys().copied().eq(0..n_labels);
    if !complete {
        return Err(EvalError::LabelCount {
            expected: n_labels,
            found: per_label_accuracy.len(),
        });
    }
    if n_labels < 4 {
        return Err(EvalError::Invalid(format!("need at least 4 labels for 4 buckets, got {n_labels}")));
    }
    if let Some((i, a)) = per_label_accuracy.iter().find(|(_, a)| !a.is_finite()) {
        return Err(EvalError::Invalid(format!("label {i} has accuracy {a}")));
    }
    let mut order: Vec<(usize, f64)> = per_label_accuracy.iter().map(|(&i, &a)| (i, a)).collect();
    order.sort_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)));
    let base = n_labels / 4;
    let rem = n_labels % 4;
    let mut buckets = Vec::with_capacity(4);
    let mut start = 0;
    for b in 0..4 {
        let size = base + usize::from(b >= 4 - rem);
        let slice = &order[start..start + size];
        start += size;
        buckets.push(Bucket {
            members: slice.iter().map(|(i, _)| *i).collect(),
            mean_accuracy: slice.iter().map(|(_, a)| a).sum::<f64>() / size as f64,
        });
    }
    Ok(buckets)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    /// Systems that other systems in the same group are tested against.
    pub baselines: Vec<String>,
    pub bootstrap: BootstrapConfig,
    pub buckets: bool,
    pub batch_size: usize,
    pub execution: Execution,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            baselines: Vec::new(),
            bootstrap: BootstrapConfig::default(),
            buckets: false,
            batch_size: 64,
            execution: Execution::default(),
        }
    }
}

/// One report per (group, system, setting, encoder) present in
/// `predictions`, with significance against the group's baseline and
/// optional bucket summaries.
pub fn evaluate_all(
    samples: &[EvalSample],
    predictions: &[PredictionRecord],
    catalog: &ActionCatalog,
    backends: &Backends,
    encoders: &[String],
    cache_dir: Option<&Path>,
    opts: &EvalOptions,
) -> Result<Vec<EvalReport>, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::NoSamples);
    }
    if encoders.is_empty() {
        return Err(EvalError::Invalid("no encoders configured".into()));
    }
    let mut ids = HashSet::new();
    for s in samples {
        if !ids.insert(s.id.as_str()) {
            return Err(EvalError::Invalid(format!("duplicate sample id '{}'", s.id)));
        }
        if s.gold_action_index >= catalog.len() {
            return Err(EvalError::InvalidGold {
                id: s.id.clone(),
                index: s.gold_action_index,
                size: catalog.len(),
            });
        }
    }
    for p in predictions {
        if !ids.contains(p.sample_id.as_str()) {
            return Err(EvalError::UnknownSample { id: p.sample_id.clone(), line: p.line });
        }
    }

    type Key = (String, String, Setting);
    let mut order: Vec<Key> = Vec::new();
    let mut parts: HashMap<Key, Vec<PredictionRecord>> = HashMap::new();
    for p in predictions {
        let key = (
            p.group.clone().unwrap_or_default(),
            p.system.clone().unwrap_or_default(),
            p.setting,
        );
        if !parts.contains_key(&key) {
            order.push(key.clone());
        }
        parts.entry(key).or_default().push(p.clone());
    }
    // rows in order of first appearance, settings in fixed order
    let mut rows: Vec<(String, String)> = Vec::new();
    for (g, s, _) in &order {
        if !rows.contains(&(g.clone(), s.clone())) {
            rows.push((g.clone(), s.clone()));
        }
    }

    let mut reports = Vec::new();
    for encoder in encoders {
        let matcher = ActionMatcher::build(backends, catalog, encoder, cache_dir)?;
        for (g, s) in &rows {
            for setting in Setting::ALL {
                if let Some(preds) = parts.get(&(g.clone(), s.clone(), setting)) {
                    reports.push(evaluate(samples, preds, &matcher, backends, opts)?);
                }
            }
        }
    }
    let rank = |r: &EvalReport| {
        let row = rows.iter().position(|(g, s)| *g == r.group && *s == r.system);
        let enc = encoders.iter().position(|e| *e == r.encoder_id);
        (row, r.setting, enc)
    };
    reports.sort_by_key(|r| rank(r));

    for i in 0..reports.len() {
        let r = &reports[i];
        if opts.baselines.contains(&r.system) {
            continue;
        }
        let base = reports.iter().find(|b| {
            opts.baselines.contains(&b.system)
                && b.group == r.group
                && b.setting == r.setting
                && b.encoder_id == r.encoder_id
        });
        if let Some(base) = base {
            let (bv, vv) = paired_outcomes(base, r)?;
            let (p_value, significant) = significance_with(&bv, &vv, &opts.bootstrap)?;
            let sig = Significance {
                baseline: base.system.clone(),
                p_value,
                significant,
                resamples: opts.bootstrap.resamples,
                seed: opts.bootstrap.seed,
                alpha: opts.bootstrap.alpha,
            };
            reports[i].significance = Some(sig);
        }
    }
    if opts.buckets {
        for r in &mut reports {
            let acc: BTreeMap<usize, f64> = r.per_label.iter().map(|(&i, s)| (i, s.accuracy)).collect();
            r.buckets = Some(bucketize(&acc, catalog.len())?);
        }
    }
    Ok(reports)
}
