// SPDX-License-Identifier: Apache-2.0

//! Score calibration and fusion by prior-weighted logistic regression.
//!
//! Fitting minimizes `Cllr(sum_i alpha_i s_i + beta) + lambda * |alpha|^2`
//! (Cllr in bits, beta unpenalized) with damped Newton steps, starting from
//! all-zero coefficients.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::actstore::{Label, ScoreSet, UtteranceRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Effective prior of the bona fide class.
    pub prior: f64,
    /// L2 penalty on the system coefficients.
    pub lambda: f64,
    pub grad_tolerance: f64,
    pub max_iterations: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            prior: 0.5,
            lambda: 1e-6,
            grad_tolerance: 1e-8,
            max_iterations: 10_000,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.prior > 0.0 && self.prior < 1.0) {
            return Err(Error::InvalidConfig(format!("prior must lie in (0, 1), got {}", self.prior)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) || !(self.grad_tolerance > 0.0) || self.max_iterations == 0 {
            return Err(Error::InvalidConfig(
                "lambda must be >= 0, grad_tolerance > 0 and max_iterations >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionModel {
    pub system_tags: Vec<String>,
    pub alpha: Vec<f64>,
    pub beta: f64,
    pub prior: f64,
}

impl FusionModel {
    pub fn validate(&self) -> Result<()> {
        if self.alpha.len() != self.system_tags.len() {
            return Err(Error::InvalidConfig(format!(
                "{} coefficients for {} systems",
                self.alpha.len(),
                self.system_tags.len()
            )));
        }
        check_unique(self.system_tags.iter().map(String::as_str))?;
        if self.alpha.iter().chain([&self.beta]).any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("fusion coefficients must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationModel {
    pub system_tag: String,
    pub a: f64,
    pub b: f64,
    pub prior: f64,
}

impl CalibrationModel {
    /// A negative scale means the system's scores run opposite to the labels.
    pub fn negative_scale(&self) -> bool {
        self.a < 0.0
    }
}

/// Optimizer record of one fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FitTrace {
    /// Objective before the first and after every accepted step.
    pub objective: Vec<f64>,
    pub grad_norm: f64,
}

fn check_unique<'a>(tags: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for tag in tags {
        if !seen.insert(tag) {
            return Err(Error::InvalidConfig(format!("duplicate system tag {tag:?}")));
        }
    }
    Ok(())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Prior-weighted Cllr in bits of bona fide and spoof score lists.
pub fn cllr_from(bona: &[f64], spoof: &[f64], prior: f64) -> Result<f64> {
    if bona.is_empty() || spoof.is_empty() {
        return Err(Error::SingleClass("Cllr"));
    }
    let lp = logit(prior);
    let mean = |v: &[f64], sign: f64| v.iter().map(|s| softplus(sign * (s + lp))).sum::<f64>() / v.len() as f64;
    Ok((prior * mean(bona, -1.0) + (1.0 - prior) * mean(spoof, 1.0)) / std::f64::consts::LN_2)
}

/// Prior-weighted Cllr in bits of a score set against manifest labels.
pub fn cllr(scores: &ScoreSet, records: &[UtteranceRecord], prior: f64) -> Result<f64> {
    let trials = Trials::new(std::slice::from_ref(scores), records)?;
    let (mut bona, mut spoof) = (Vec::new(), Vec::new());
    for (row, label) in trials.rows.iter().zip(&trials.labels) {
        match label {
            Label::Bonafide => bona.push(row[0]),
            Label::Spoof => spoof.push(row[0]),
        }
    }
    cllr_from(&bona, &spoof, prior)
}

/// Trials shared by all systems, in utterance-id order, with labels.
struct Trials {
    rows: Vec<Vec<f64>>,
    labels: Vec<Label>,
}

impl Trials {
    fn new(systems: &[ScoreSet], records: &[UtteranceRecord]) -> Result<Self> {
        let first = systems.first().ok_or_else(|| Error::InvalidConfig("no systems given".into()))?;
        let ids = check_same_trials(systems)?;
        let labels_by_id: HashMap<&str, Label> = records.iter().map(|r| (r.utt_id.as_str(), r.label)).collect();
        if let Some(r) = records.iter().find(|r| first.get(&r.utt_id).is_none()) {
            return Err(Error::UnscoredTrial(r.utt_id.clone()));
        }
        let mut rows = Vec::with_capacity(ids.len());
        let mut labels = Vec::with_capacity(ids.len());
        for id in ids {
            let label = *labels_by_id.get(id.as_str()).ok_or_else(|| Error::UnlabeledTrial(id.clone()))?;
            rows.push(systems.iter().map(|s| s.entries[id]).collect());
            labels.push(label);
        }
        Ok(Self { rows, labels })
    }
}

fn check_same_trials(systems: &[ScoreSet]) -> Result<Vec<&String>> {
    let first = &systems[0];
    for other in &systems[1..] {
        if other.entries.len() != first.entries.len() || other.entries.keys().ne(first.entries.keys()) {
            let missing = first
                .entries
                .keys()
                .find(|k| !other.entries.contains_key(*k))
                .or_else(|| other.entries.keys().find(|k| !first.entries.contains_key(*k)));
            return Err(Error::TrialMismatch(format!(
                "systems {:?} and {:?} differ at trial {:?}",
                first.system_tag,
                other.system_tag,
                missing.map(String::as_str).unwrap_or("")
            )));
        }
    }
    Ok(first.entries.keys().collect())
}

/// Regularized objective over `theta = [alpha..., beta]`.
struct Objective<'a> {
    trials: &'a Trials,
    weights: [f64; 2],
    lp: f64,
    lambda: f64,
}

impl<'a> Objective<'a> {
    fn new(trials: &'a Trials, config: &FusionConfig) -> Result<Self> {
        let n_bona = trials.labels.iter().filter(|l| **l == Label::Bonafide).count();
        let n_spoof = trials.labels.len() - n_bona;
        if n_bona == 0 || n_spoof == 0 {
            return Err(Error::SingleClass("fusion"));
        }
        let ln2 = std::f64::consts::LN_2;
        Ok(Self {
            trials,
            weights: [config.prior / n_bona as f64 / ln2, (1.0 - config.prior) / n_spoof as f64 / ln2],
            lp: logit(config.prior),
            lambda: config.lambda,
        })
    }

    fn k(&self) -> usize {
        self.trials.rows[0].len()
    }

    fn fused(&self, row: &[f64], theta: &[f64]) -> f64 {
        let k = row.len();
        row.iter().zip(theta).map(|(s, a)| s * a).sum::<f64>() + theta[k]
    }

    /// Per-trial (weight, sign) with loss `w * softplus(sign * (f + lp))`.
    fn term(&self, label: Label) -> (f64, f64) {
        match label {
            Label::Bonafide => (self.weights[0], -1.0),
            Label::Spoof => (self.weights[1], 1.0),
        }
    }

    fn penalty(&self, theta: &[f64]) -> f64 {
        self.lambda * theta[..self.k()].iter().map(|a| a * a).sum::<f64>()
    }

    fn value(&self, theta: &[f64]) -> f64 {
        let loss: f64 = self
            .trials
            .rows
            .iter()
            .zip(&self.trials.labels)
            .map(|(row, &label)| {
                let (w, sign) = self.term(label);
                w * softplus(sign * (self.fused(row, theta) + self.lp))
            })
            .sum();
        loss + self.penalty(theta)
    }

    fn grad_hessian(&self, theta: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let k = self.k();
        let mut g = DVector::zeros(k + 1);
        let mut h = DMatrix::zeros(k + 1, k + 1);
        let mut x = DVector::zeros(k + 1);
        for (row, &label) in self.trials.rows.iter().zip(&self.trials.labels) {
            let (w, sign) = self.term(label);
            let u = sign * (self.fused(row, theta) + self.lp);
            let p = sigmoid(u);
            for (xi, s) in x.iter_mut().zip(row) {
                *xi = *s;
            }
            x[k] = 1.0;
            g.axpy(w * sign * p, &x, 1.0);
            h.syger(w * p * (1.0 - p), &x, &x, 1.0);
        }
        for i in 0..k {
            g[i] += 2.0 * self.lambda * theta[i];
            h[(i, i)] += 2.0 * self.lambda;
        }
        (g, h)
    }
}

/// Fits `alpha` (one per system, ordered by system tag) and `beta`.
pub fn fit_fusion(systems: &[ScoreSet], records: &[UtteranceRecord], config: &FusionConfig) -> Result<FusionModel> {
    fit_fusion_traced(systems, records, config).map(|(m, _)| m)
}

/// [`fit_fusion`] together with the optimizer trace.
pub fn fit_fusion_traced(
    systems: &[ScoreSet],
    records: &[UtteranceRecord],
    config: &FusionConfig,
) -> Result<(FusionModel, FitTrace)> {
    config.validate()?;
    check_unique(systems.iter().map(|s| s.system_tag.as_str()))?;
    let mut sorted: Vec<&ScoreSet> = systems.iter().collect();
    sorted.sort_by(|a, b| a.system_tag.cmp(&b.system_tag));
    let sorted: Vec<ScoreSet> = sorted.into_iter().cloned().collect();
    let trials = Trials::new(&sorted, records)?;
    let objective = Objective::new(&trials, config)?;
    let (theta, trace) = minimize(&objective, config)?;
    let k = sorted.len();
    Ok((
        FusionModel {
            system_tags: sorted.iter().map(|s| s.system_tag.clone()).collect(),
            alpha: theta[..k].to_vec(),
            beta: theta[k],
            prior: config.prior,
        },
        trace,
    ))
}

fn minimize(objective: &Objective<'_>, config: &FusionConfig) -> Result<(Vec<f64>, FitTrace)> {
    let n = objective.k() + 1;
    let mut theta = vec![0.0; n];
    let mut value = objective.value(&theta);
    let mut trace = vec![value];
    let mut grad_norm = f64::INFINITY;
    for _ in 0..config.max_iterations {
        let (g, h) = objective.grad_hessian(&theta);
        grad_norm = g.norm();
        if grad_norm <= config.grad_tolerance {
            return Ok((theta, FitTrace { objective: trace, grad_norm }));
        }
        let newton = h.cholesky().map(|c| -c.solve(&g)).filter(|d| d.dot(&g) < 0.0);
        let direction = newton.unwrap_or_else(|| -g.clone());
        let slope = direction.dot(&g);
        let mut step = 1.0;
        let accepted = loop {
            let candidate: Vec<f64> = theta.iter().zip(direction.iter()).map(|(t, d)| t + step * d).collect();
            let v = objective.value(&candidate);
            if v.is_finite() && v <= value + 1e-4 * step * slope {
                break Some((candidate, v));
            }
            step *= 0.5;
            if step < 1e-30 {
                break None;
            }
        };
        match accepted {
            Some((candidate, v)) => {
                theta = candidate;
                value = v;
                trace.push(v);
            }
            None => break,
        }
    }
    Err(Error::NonConvergence {
        iterations: trace.len() - 1,
        grad_norm,
    })
}

/// Single-system fit; `(a, b)` are the fusion coefficient and offset.
pub fn fit_calibration(system: &ScoreSet, records: &[UtteranceRecord], config: &FusionConfig) -> Result<CalibrationModel> {
    let model = fit_fusion(std::slice::from_ref(system), records, config)?;
    Ok(CalibrationModel {
        system_tag: system.system_tag.clone(),
        a: model.alpha[0],
        b: model.beta,
        prior: model.prior,
    })
}

fn by_tag<'a>(systems: &'a [ScoreSet], tag: &str) -> Result<&'a ScoreSet> {
    let mut found = systems.iter().filter(|s| s.system_tag == tag);
    let first = found.next().ok_or_else(|| Error::MissingTag(tag.to_string()))?;
    if found.next().is_some() {
        return Err(Error::InvalidConfig(format!("duplicate system tag {tag:?}")));
    }
    Ok(first)
}

fn combine(
    ordered: &[&ScoreSet],
    n_given: usize,
    system_tag: &str,
    f: impl Fn(&[f64]) -> f64,
) -> Result<ScoreSet> {
    if ordered.len() != n_given {
        return Err(Error::TrialMismatch(format!("model has {} systems, {n_given} given", ordered.len())));
    }
    let owned: Vec<ScoreSet> = ordered.iter().map(|s| (*s).clone()).collect();
    let ids = check_same_trials(&owned)?;
    let mut out = ScoreSet::new(system_tag);
    let mut row = vec![0.0; ordered.len()];
    for id in ids {
        for (r, s) in row.iter_mut().zip(ordered) {
            *r = s.entries[id];
        }
        out.insert(id.clone(), f(&row))?;
    }
    Ok(out)
}

/// Per-trial `sum_i alpha_i s_i + beta`, matching systems by tag.
pub fn fuse_lr(model: &FusionModel, systems: &[ScoreSet]) -> Result<ScoreSet> {
    model.validate()?;
    let ordered = model.system_tags.iter().map(|t| by_tag(systems, t)).collect::<Result<Vec<_>>>()?;
    combine(&ordered, systems.len(), "fused", |row| {
        row.iter().zip(&model.alpha).map(|(s, a)| a * s).sum::<f64>() + model.beta
    })
}

/// Per-trial `sum_i (a_i s_i + b_i)`, matching systems by tag.
pub fn fuse_sum(calibrations: &[CalibrationModel], systems: &[ScoreSet]) -> Result<ScoreSet> {
    check_unique(calibrations.iter().map(|c| c.system_tag.as_str()))?;
    let ordered = calibrations
        .iter()
        .map(|c| by_tag(systems, &c.system_tag))
        .collect::<Result<Vec<_>>>()?;
    combine(&ordered, systems.len(), "sum", |row| {
        row.iter().zip(calibrations).map(|(s, c)| c.a * s + c.b).sum()
    })
}

/// Applies a calibration to one system.
pub fn calibrate(model: &CalibrationModel, system: &ScoreSet) -> Result<ScoreSet> {
    fuse_sum(std::slice::from_ref(model), std::slice::from_ref(system)).map(|s| ScoreSet {
        system_tag: system.system_tag.clone(),
        ..s
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actstore::Split;

    fn record(id: &str, label: Label) -> UtteranceRecord {
        UtteranceRecord {
            utt_id: id.into(),
            path: String::new(),
            label,
            corpus: "c".into(),
            attack: String::new(),
            split: Split::Fusion,
        }
    }

    fn set(tag: &str, pairs: &[(&str, f64)]) -> ScoreSet {
        ScoreSet::from_pairs(tag, pairs.iter().copied()).unwrap()
    }

    #[test]
    fn cllr_reference_values() {
        assert!((cllr_from(&[0.0, 0.0], &[0.0], 0.5).unwrap() - 1.0).abs() < 1e-15);
        assert!(cllr_from(&[50.0], &[-50.0], 0.5).unwrap() < 1e-20);
        let want = (1.0 + (-1.0f64).exp()).log2();
        assert!((cllr_from(&[1.0], &[-1.0], 0.5).unwrap() - want).abs() < 1e-15);
        assert!(matches!(cllr_from(&[], &[1.0], 0.5), Err(Error::SingleClass(_))));
        let recs = [record("a", Label::Bonafide), record("b", Label::Spoof)];
        let s = set("s", &[("a", 1.0), ("b", -1.0)]);
        assert!((cllr(&s, &recs, 0.5).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn application_arithmetic() {
        let s = set("s", &[("u", 2.5), ("v", -1.0)]);
        let id = FusionModel {
            system_tags: vec!["s".into()],
            alpha: vec![1.0],
            beta: 0.0,
            prior: 0.5,
        };
        assert_eq!(fuse_lr(&id, &[s.clone()]).unwrap().entries, s.entries);

        let s1 = set("x", &[("u", 2.0)]);
        let s2 = set("y", &[("u", 4.0)]);
        let constant = FusionModel {
            system_tags: vec!["x".into(), "y".into()],
            alpha: vec![0.0, 0.0],
            beta: 3.0,
            prior: 0.5,
        };
        assert_eq!(fuse_lr(&constant, &[s1.clone(), s2.clone()]).unwrap().get("u"), Some(3.0));
        let half = FusionModel {
            alpha: vec![0.5, 0.5],
            beta: 1.0,
            ..constant
        };
        // Systems are matched by tag, not by position.
        assert_eq!(fuse_lr(&half, &[s2.clone(), s1.clone()]).unwrap().get("u"), Some(4.0));

        let cal = |tag: &str, a: f64, b: f64| CalibrationModel {
            system_tag: tag.into(),
            a,
            b,
            prior: 0.5,
        };
        assert_eq!(fuse_sum(&[cal("s", 1.0, 0.0)], &[s.clone()]).unwrap().entries, s.entries);
        let s3 = set("z", &[("u", 3.0)]);
        let x1 = set("x", &[("u", 1.0)]);
        assert_eq!(
            fuse_sum(&[cal("x", 2.0, 0.0), cal("z", 1.0, -1.0)], &[x1, s3]).unwrap().get("u"),
            Some(4.0)
        );
    }

    #[test]
    fn mismatches_are_errors() {
        let recs = [record("a", Label::Bonafide), record("b", Label::Spoof)];
        let s1 = set("x", &[("a", 1.0), ("b", 0.0)]);
        let s2 = set("y", &[("a", 1.0), ("c", 0.0)]);
        let config = FusionConfig::default();
        assert!(matches!(fit_fusion(&[s1.clone(), s2], &recs, &config), Err(Error::TrialMismatch(_))));
        let model = FusionModel {
            system_tags: vec!["x".into()],
            alpha: vec![1.0],
            beta: 0.0,
            prior: 0.5,
        };
        assert!(matches!(fuse_lr(&model, &[set("q", &[("a", 1.0)])]), Err(Error::MissingTag(_))));
        let one_class = [record("a", Label::Bonafide), record("b", Label::Bonafide)];
        assert!(matches!(fit_fusion(&[s1.clone()], &one_class, &config), Err(Error::SingleClass(_))));
        assert!(matches!(
            fit_fusion(&[s1.clone(), s1], &recs, &config),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn objective_never_increases() {
        let recs: Vec<UtteranceRecord> = (0..40)
            .map(|i| record(&format!("t{i:02}"), if i % 3 == 0 { Label::Bonafide } else { Label::Spoof }))
            .collect();
        let sys = |tag: &str, k: f64| {
            ScoreSet::from_pairs(
                tag,
                recs.iter().enumerate().map(|(i, r)| {
                    let sign = if r.label == Label::Bonafide { 1.0 } else { -1.0 };
                    (r.utt_id.clone(), sign * k + ((i * 7 % 13) as f64 - 6.0))
                }),
            )
            .unwrap()
        };
        let (model, trace) =
            fit_fusion_traced(&[sys("a", 3.0), sys("b", 1.0)], &recs, &FusionConfig::default()).unwrap();
        assert!(trace.grad_norm <= 1e-8);
        for w in trace.objective.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
        assert_eq!(model.system_tags, vec!["a", "b"]);
    }

    #[test]
    fn json_layout() {
        let m = FusionModel {
            system_tags: vec!["a".into()],
            alpha: vec![1.5],
            beta: -0.25,
            prior: 0.5,
        };
        let v: serde_json::Value = serde_json::to_value(&m).unwrap();
        assert_eq!(v, serde_json::json!({"system_tags": ["a"], "alpha": [1.5], "beta": -0.25, "prior": 0.5}));
        let c = CalibrationModel {
            system_tag: "a".into(),
            a: 2.0,
            b: 1.0,
            prior: 0.5,
        };
        let v: serde_json::Value = serde_json::to_value(&c).unwrap();
        assert_eq!(v, serde_json::json!({"system_tag": "a", "a": 2.0, "b": 1.0, "prior": 0.5}));
        assert!(serde_json::from_str::<FusionModel>(r#"{"system_tags":[],"alpha":[],"beta":0,"prior":0.5,"x":1}"#).is_err());
    }
}
