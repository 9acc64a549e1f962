//! Score tables, Z-norm, detection metrics and logistic-regression fusion.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::e2e::argmax;
use crate::error::{Error, Result};

/// Utterances × dialects score matrix with optional truth labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub system: String,
    pub dialects: Vec<String>,
    pub ids: Vec<String>,
    pub scores: Array2<f64>,
    pub truth: Option<Vec<usize>>,
}

impl ScoreTable {
    pub fn new(
        system: impl Into<String>,
        dialects: Vec<String>,
        ids: Vec<String>,
        scores: Array2<f64>,
        truth: Option<Vec<usize>>,
    ) -> Result<Self> {
        if scores.nrows() != ids.len() || scores.ncols() != dialects.len() {
            return Err(Error::Shape(format!(
                "score matrix {}×{} for {} utterances and {} dialects",
                scores.nrows(),
                scores.ncols(),
                ids.len(),
                dialects.len()
            )));
        }
        if let Some((i, _)) = scores.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite score for `{}`", ids[i.0])));
        }
        if let Some(t) = &truth {
            if t.len() != ids.len() {
                return Err(Error::Shape("truth length differs from utterance count".into()));
            }
            if let Some(&l) = t.iter().find(|&&l| l >= dialects.len()) {
                return Err(Error::LabelOutOfRange {
                    label: l,
                    classes: dialects.len(),
                });
            }
        }
        Ok(Self {
            system: system.into(),
            dialects,
            ids,
            scores,
            truth,
        })
    }

    pub fn num_dialects(&self) -> usize {
        self.dialects.len()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn truth_required(&self) -> Result<&[usize]> {
        self.truth
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument(format!("score table `{}` has no truth labels", self.system)))
    }

    /// `# system` line, then `utt_id<TAB>dialects…[<TAB>truth]`.
    pub fn to_tsv(&self) -> String {
        let mut s = format!("# system\t{}\nutt_id", self.system);
        for d in &self.dialects {
            s.push('\t');
            s.push_str(d);
        }
        if self.truth.is_some() {
            s.push_str("\ttruth");
        }
        s.push('\n');
        for (i, id) in self.ids.iter().enumerate() {
            s.push_str(id);
            for v in self.scores.row(i) {
                let _ = write!(s, "\t{v:e}");
            }
            if let Some(t) = &self.truth {
                s.push('\t');
                s.push_str(&self.dialects[t[i]]);
            }
            s.push('\n');
        }
        s
    }

    pub fn parse_tsv(text: &str, context: &str) -> Result<Self> {
        let perr = |line: usize, message: String| Error::Parse {
            context: format!("{context}:{line}"),
            message,
        };
        let mut system = String::from("unnamed");
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).peekable();
        while let Some((_, l)) = lines.peek() {
            if let Some(rest) = l.strip_prefix('#') {
                let mut f = rest.trim().splitn(2, '\t');
                if f.next() == Some("system") {
                    if let Some(name) = f.next() {
                        system = name.trim().to_string();
                    }
                }
                lines.next();
            } else {
                break;
            }
        }
        let (hline, header) = lines.next().ok_or_else(|| perr(1, "missing header".into()))?;
        let cols: Vec<&str> = header.split('\t').collect();
        if cols.first() != Some(&"utt_id") {
            return Err(perr(hline + 1, "header must start with utt_id".into()));
        }
        let has_truth = cols.last() == Some(&"truth");
        let dialects: Vec<String> = cols[1..cols.len() - has_truth as usize].iter().map(|s| s.to_string()).collect();
        if dialects.is_empty() {
            return Err(perr(hline + 1, "no dialect columns".into()));
        }
        let index: HashMap<&str, usize> = dialects.iter().enumerate().map(|(i, d)| (d.as_str(), i)).collect();
        let mut ids = Vec::new();
        let mut flat = Vec::new();
        let mut truth = Vec::new();
        for (ln, line) in lines {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != cols.len() {
                return Err(perr(ln + 1, format!("expected {} fields, found {}", cols.len(), f.len())));
            }
            ids.push(f[0].to_string());
            for v in &f[1..=dialects.len()] {
                flat.push(v.parse::<f64>().map_err(|e| perr(ln + 1, format!("bad score `{v}`: {e}")))?);
            }
            if has_truth {
                let t = f[cols.len() - 1];
                truth.push(*index.get(t).ok_or_else(|| perr(ln + 1, format!("unknown truth label `{t}`")))?);
            }
        }
        let scores = Array2::from_shape_vec((ids.len(), dialects.len()), flat).map_err(|e| Error::Shape(e.to_string()))?;
        Self::new(system, dialects, ids, scores, has_truth.then_some(truth))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::parse_tsv(&text, &path.display().to_string())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_tsv())?;
        Ok(())
    }

    /// Rows reordered to `ids`; fails unless both hold the same set.
    pub fn aligned_to(&self, ids: &[String]) -> Result<Self> {
        if ids.len() != self.ids.len() {
            return Err(Error::TableMismatch(format!(
                "`{}` has {} utterances, expected {}",
                self.system,
                self.ids.len(),
                ids.len()
            )));
        }
        let pos: HashMap<&str, usize> = self.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let order: Vec<usize> = ids
            .iter()
            .map(|id| {
                pos.get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::TableMismatch(format!("`{}` lacks utterance `{id}`", self.system)))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            system: self.system.clone(),
            dialects: self.dialects.clone(),
            ids: ids.to_vec(),
            scores: self.scores.select(Axis(0), &order),
            truth: self.truth.as_ref().map(|t| order.iter().map(|&i| t[i]).collect()),
        })
    }
}

/// Per-column mean and population standard deviation of a cohort.
#[derive(Debug, Clone, PartialEq)]
pub struct ZNormStats {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl ZNormStats {
    pub fn from_cohort(cohort: &ScoreTable) -> Result<Self> {
        if cohort.len() < 2 {
            return Err(Error::InvalidArgument("Z-norm cohort needs at least 2 utterances".into()));
        }
        let n = cohort.len() as f64;
        let mean = cohort.scores.mean_axis(Axis(0)).expect("non-empty");
        let mut std = Array1::zeros(cohort.num_dialects());
        for (d, col) in cohort.scores.axis_iter(Axis(1)).enumerate() {
            let var = col.iter().map(|&s| (s - mean[d]).powi(2)).sum::<f64>() / n;
            if !(var > 0.0) {
                return Err(Error::ZeroVariance(cohort.dialects[d].clone()));
            }
            std[d] = var.sqrt();
        }
        Ok(Self { mean, std })
    }
}

/// `(s − μ_d) / σ_d` per dialect column, statistics taken from `cohort`.
pub fn znorm(table: &ScoreTable, cohort: &ScoreTable) -> Result<ScoreTable> {
    if table.dialects != cohort.dialects {
        return Err(Error::TableMismatch("Z-norm cohort has different dialect columns".into()));
    }
    let stats = ZNormStats::from_cohort(cohort)?;
    let mut out = table.clone();
    for mut row in out.scores.axis_iter_mut(Axis(0)) {
        for d in 0..row.len() {
            row[d] = (row[d] - stats.mean[d]) / stats.std[d];
        }
    }
    Ok(out)
}

/// Fraction of rows whose arg-max (lowest index on ties) is the truth.
pub fn accuracy(table: &ScoreTable) -> Result<f64> {
    let truth = table.truth_required()?;
    if truth.is_empty() {
        return Err(Error::MetricUndefined("accuracy of an empty table".into()));
    }
    let correct = table
        .scores
        .axis_iter(Axis(0))
        .zip(truth)
        .filter(|(row, &t)| argmax(*row) == t)
        .count();
    Ok(correct as f64 / truth.len() as f64)
}

/// Pooled detection trials: `(score, is_target)` for every cell.
pub fn trials(table: &ScoreTable) -> Result<Vec<(f64, bool)>> {
    let truth = table.truth_required()?;
    Ok(table
        .scores
        .indexed_iter()
        .map(|((u, d), &s)| (s, truth[u] == d))
        .collect())
}

/// Miss and false-alarm rates with acceptance at `score >= θ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub p_miss: f64,
    pub p_fa: f64,
}

/// Operating points at every distinct score plus `+∞` (reject all),
/// ordered by increasing threshold.
pub fn det_points(table: &ScoreTable) -> Result<Vec<DetPoint>> {
    let mut t = trials(table)?;
    let n_tar = t.iter().filter(|x| x.1).count();
    let n_non = t.len() - n_tar;
    if n_tar == 0 || n_non == 0 {
        return Err(Error::MetricUndefined("detection needs both target and non-target trials".into()));
    }
    t.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out = Vec::new();
    // Below the current threshold: misses (targets) and rejected non-targets.
    let (mut tar_below, mut non_below) = (0usize, 0usize);
    let mut i = 0;
    while i < t.len() {
        let theta = t[i].0;
        out.push(DetPoint {
            threshold: theta,
            p_miss: tar_below as f64 / n_tar as f64,
            p_fa: (n_non - non_below) as f64 / n_non as f64,
        });
        while i < t.len() && t[i].0 == theta {
            if t[i].1 {
                tar_below += 1;
            } else {
                non_below += 1;
            }
            i += 1;
        }
    }
    out.push(DetPoint {
        threshold: f64::INFINITY,
        p_miss: 1.0,
        p_fa: 0.0,
    });
    Ok(out)
}

/// Equal error rate over pooled trials: the operating point minimising
/// `|P_miss − P_fa|` (then the lowest mean), reported as the mean of the two.
pub fn eer(table: &ScoreTable) -> Result<f64> {
    Ok(eer_from_points(&det_points(table)?))
}

fn eer_from_points(points: &[DetPoint]) -> f64 {
    let mut best = (f64::INFINITY, f64::INFINITY);
    for p in points {
        let key = ((p.p_miss - p.p_fa).abs(), (p.p_miss + p.p_fa) / 2.0);
        if key.0 < best.0 || (key.0 == best.0 && key.1 < best.1) {
            best = key;
        }
    }
    best.1
}

pub fn det_points_tsv(points: &[DetPoint]) -> String {
    let mut s = String::from("threshold\tp_miss\tp_fa\n");
    for p in points {
        let _ = writeln!(s, "{:e}\t{:.9}\t{:.9}", p.threshold, p.p_miss, p.p_fa);
    }
    s
}

/// Detection cost settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub p_target: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self { p_target: 0.5 }
    }
}

/// Minimum over a shared threshold `θ` of the average detection cost
/// `(1/N) Σ_L [P_t·P_miss(L) + (1−P_t)/(N−1) · Σ_{L'≠L} P_fa(L, L')]`.
pub fn min_cavg(table: &ScoreTable, cost: CostModel) -> Result<f64> {
    Ok(cavg_curve(table, cost)?.into_iter().map(|(_, c)| c).fold(f64::INFINITY, f64::min))
}

/// `(θ, C_avg(θ))` at every distinct score and at `+∞`.
pub fn cavg_curve(table: &ScoreTable, cost: CostModel) -> Result<Vec<(f64, f64)>> {
    if !(cost.p_target > 0.0 && cost.p_target < 1.0) {
        return Err(Error::InvalidArgument("P_target must lie in (0, 1)".into()));
    }
    let truth = table.truth_required()?;
    let n = table.num_dialects();
    if n < 2 {
        return Err(Error::MetricUndefined("C_avg needs at least 2 classes".into()));
    }
    let mut per_class = vec![0usize; n];
    for &t in truth {
        per_class[t] += 1;
    }
    if let Some(d) = per_class.iter().position(|&c| c == 0) {
        return Err(Error::MetricUndefined(format!("dialect `{}` has no trials", table.dialects[d])));
    }
    // accepted[L][L']: utterances of truth L' accepted by detector L.
    let mut accepted = vec![vec![0usize; n]; n];
    for &t in truth {
        for row in accepted.iter_mut() {
            row[t] += 1;
        }
    }
    let mut cells: Vec<(f64, usize, usize)> = table
        .scores
        .indexed_iter()
        .map(|((u, l), &s)| (s, l, truth[u]))
        .collect();
    cells.sort_by(|a, b| a.0.total_cmp(&b.0));
    let cost_at = |acc: &Vec<Vec<usize>>| {
        let mut total = 0.0;
        for l in 0..n {
            let p_miss = (per_class[l] - acc[l][l]) as f64 / per_class[l] as f64;
            let mut fa = 0.0;
            for lp in (0..n).filter(|&lp| lp != l) {
                fa += acc[l][lp] as f64 / per_class[lp] as f64;
            }
            total += cost.p_target * p_miss + (1.0 - cost.p_target) / (n - 1) as f64 * fa;
        }
        total / n as f64
    };
    let mut out = Vec::new();
    let mut i = 0;
    while i < cells.len() {
        let theta = cells[i].0;
        out.push((theta, cost_at(&accepted)));
        while i < cells.len() && cells[i].0 == theta {
            accepted[cells[i].1][cells[i].2] -= 1;
            i += 1;
        }
    }
    out.push((f64::INFINITY, cost_at(&accepted)));
    Ok(out)
}

/// Metrics of one system on one table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub eer: f64,
    pub min_cavg: f64,
}

pub fn evaluate(table: &ScoreTable, cost: CostModel) -> Result<Metrics> {
    Ok(Metrics {
        accuracy: accuracy(table)?,
        eer: eer(table)?,
        min_cavg: min_cavg(table, cost)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    /// Ridge penalty on all fusion parameters.
    pub l2: f64,
    pub per_dialect_bias: bool,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            l2: 1e-4,
            per_dialect_bias: true,
            max_iterations: 200,
            gradient_tolerance: 1e-8,
        }
    }
}

/// Affine fusion `Σ_k w_k·s_k + b_d`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    pub systems: Vec<String>,
    pub dialects: Vec<String>,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub iterations: usize,
    pub gradient_norm: f64,
}

fn check_systems(tables: &[ScoreTable]) -> Result<Vec<ScoreTable>> {
    let first = tables
        .first()
        .ok_or_else(|| Error::InvalidArgument("fusion needs at least one system".into()))?;
    tables
        .iter()
        .map(|t| {
            if t.dialects != first.dialects {
                return Err(Error::TableMismatch(format!(
                    "`{}` dialect columns differ from `{}`",
                    t.system, first.system
                )));
            }
            t.aligned_to(&first.ids)
        })
        .collect()
}

impl FusionModel {
    /// Penalised multiclass logistic regression on dev truth, solved by
    /// Newton's method with backtracking.
    pub fn train(dev: &[ScoreTable], cfg: &FusionConfig) -> Result<Self> {
        let dev = check_systems(dev)?;
        let truth = dev[0].truth_required()?.to_vec();
        if truth.is_empty() {
            return Err(Error::EmptySplit("fusion dev set".into()));
        }
        let k = dev.len();
        let n = dev[0].num_dialects();
        let nb = if cfg.per_dialect_bias { n } else { 0 };
        let p = k + nb;
        let m = truth.len();
        let objective = |theta: &[f64]| -> (f64, Array1<f64>, Array2<f64>) {
            let mut f = 0.0;
            let mut g = Array1::<f64>::zeros(p);
            let mut h = Array2::<f64>::zeros((p, p));
            let mut z = vec![0.0; n];
            let mut feats = Array2::<f64>::zeros((n, p));
            for u in 0..m {
                feats.fill(0.0);
                for d in 0..n {
                    for (s, table) in dev.iter().enumerate() {
                        feats[[d, s]] = table.scores[[u, d]];
                    }
                    if nb > 0 {
                        feats[[d, k + d]] = 1.0;
                    }
                    z[d] = (0..p).map(|j| feats[[d, j]] * theta[j]).sum();
                }
                let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = z.iter().map(|v| (v - zmax).exp()).collect();
                let sum: f64 = e.iter().sum();
                let prob: Vec<f64> = e.iter().map(|v| v / sum).collect();
                f += zmax + sum.ln() - z[truth[u]];
                let mut xbar = Array1::<f64>::zeros(p);
                for d in 0..n {
                    xbar.scaled_add(prob[d], &feats.row(d));
                }
                g += &xbar;
                g -= &feats.row(truth[u]);
                for d in 0..n {
                    let dx = &feats.row(d) - &xbar;
                    for a in 0..p {
                        for b in 0..p {
                            h[[a, b]] += prob[d] * dx[a] * dx[b];
                        }
                    }
                }
            }
            let inv = 1.0 / m as f64;
            f *= inv;
            g *= inv;
            h *= inv;
            for j in 0..p {
                f += 0.5 * cfg.l2 * theta[j] * theta[j];
                g[j] += cfg.l2 * theta[j];
                h[[j, j]] += cfg.l2;
            }
            (f, g, h)
        };
        let mut theta = vec![0.0; p];
        for w in theta.iter_mut().take(k) {
            *w = 1.0;
        }
        let (mut f, mut g, mut h) = objective(&theta);
        let mut iterations = 0;
        let mut gnorm = g.dot(&g).sqrt();
        while gnorm > cfg.gradient_tolerance {
            if iterations >= cfg.max_iterations {
                return Err(Error::FusionNotConverged {
                    iterations,
                    grad_norm: gnorm,
                });
            }
            iterations += 1;
            let step = solve_spd(&h, &g).unwrap_or_else(|| g.clone());
            let slope = g.dot(&step);
            let mut alpha = 1.0;
            loop {
                let cand: Vec<f64> = theta.iter().zip(&step).map(|(t, s)| t - alpha * s).collect();
                let (fc, gc, hc) = objective(&cand);
                if fc <= f - 1e-4 * alpha * slope || alpha < 1e-12 {
                    theta = cand;
                    f = fc;
                    g = gc;
                    h = hc;
                    break;
                }
                alpha *= 0.5;
            }
            gnorm = g.dot(&g).sqrt();
        }
        Ok(Self {
            systems: dev.iter().map(|t| t.system.clone()).collect(),
            dialects: dev[0].dialects.clone(),
            weights: theta[..k].to_vec(),
            biases: if nb > 0 { theta[k..].to_vec() } else { vec![0.0; n] },
            iterations,
            gradient_norm: gnorm,
        })
    }

    /// Fused table; inputs are aligned to the first table's row order.
    pub fn apply(&self, tables: &[ScoreTable]) -> Result<ScoreTable> {
        let tables = check_systems(tables)?;
        if tables.len() != self.weights.len() {
            return Err(Error::TableMismatch(format!(
                "fusion has {} systems, got {} tables",
                self.weights.len(),
                tables.len()
            )));
        }
        if tables[0].dialects != self.dialects {
            return Err(Error::TableMismatch("dialect columns differ from the fusion model".into()));
        }
        let mut scores = Array2::<f64>::zeros(tables[0].scores.raw_dim());
        for (t, &w) in tables.iter().zip(&self.weights) {
            scores.scaled_add(w, &t.scores);
        }
        for mut row in scores.axis_iter_mut(Axis(0)) {
            row += &ArrayView1::from(&self.biases);
        }
        ScoreTable::new(
            self.systems.join("+"),
            self.dialects.clone(),
            tables[0].ids.clone(),
            scores,
            tables[0].truth.clone(),
        )
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# iterations {} gradient_norm {:e}\n", self.iterations, self.gradient_norm);
        for (sys, w) in self.systems.iter().zip(&self.weights) {
            let _ = writeln!(s, "weight\t{sys}\t{w:e}");
        }
        for (d, b) in self.dialects.iter().zip(&self.biases) {
            let _ = writeln!(s, "bias\t{d}\t{b:e}");
        }
        s
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut m = Self {
            systems: vec![],
            dialects: vec![],
            weights: vec![],
            biases: vec![],
            iterations: 0,
            gradient_norm: 0.0,
        };
        for (ln, line) in text.lines().enumerate() {
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let perr = |message: String| Error::Parse {
                context: format!("fusion weights:{}", ln + 1),
                message,
            };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(perr("expected 3 tab-separated fields".into()));
            }
            let v: f64 = f[2].parse().map_err(|e| perr(format!("bad number: {e}")))?;
            match f[0] {
                "weight" => {
                    m.systems.push(f[1].to_string());
                    m.weights.push(v);
                }
                "bias" => {
                    m.dialects.push(f[1].to_string());
                    m.biases.push(v);
                }
                other => return Err(perr(format!("unknown record `{other}`"))),
            }
        }
        if m.weights.is_empty() || m.biases.is_empty() {
            return Err(Error::Parse {
                context: "fusion weights".into(),
                message: "needs weight and bias records".into(),
            });
        }
        Ok(m)
    }
}

/// Cholesky solve of `h x = g`; `None` if `h` is not positive definite.
fn solve_spd(h: &Array2<f64>, g: &Array1<f64>) -> Option<Array1<f64>> {
    let n = g.len();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut s = h[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if !(s > 0.0) {
                    return None;
                }
                l[[i, i]] = s.sqrt();
            } else {
                l[[i, j]] = s / l[[j, j]];
            }
        }
    }
    let mut y = Array1::<f64>::zeros(n);
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[[i, k]] * y[k]).sum();
        y[i] = (g[i] - s) / l[[i, i]];
    }
    let mut x = Array1::<f64>::zeros(n);
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[[k, i]] * x[k]).sum();
        x[i] = (y[i] - s) / l[[i, i]];
    }
    Some(x)
}
