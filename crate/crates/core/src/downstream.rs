//! Slice-level prediction: fold planning, linear probes, attention-MIL with
//! classification and Cox heads, and the survival metric suite.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{AtlasError, Result};
use crate::metrics::{auroc_auprc, macro_f1};
use crate::rng::substream;

pub const DEFAULT_FOLDS: usize = 5;
pub const PROBE_GRID: [f64; 3] = [0.1, 1.0, 10.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupLevel {
    Slice,
    Patient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub level: GroupLevel,
    pub seed: u64,
    pub assignments: BTreeMap<String, usize>,
}

/// Shuffles groups, orders them by stratum, then deals them round-robin so
/// every fold gets an even share of each stratum.
pub fn make_folds(
    groups: &[String],
    level: GroupLevel,
    k: usize,
    seed: u64,
    strata: Option<&[String]>,
) -> Result<FoldPlan> {
    if k < 2 {
        return Err(AtlasError::Argument("need at least two folds".into()));
    }
    let unique: BTreeSet<&String> = groups.iter().collect();
    if unique.len() != groups.len() {
        return Err(AtlasError::Argument("group ids must be unique".into()));
    }
    if groups.len() < k {
        return Err(AtlasError::Argument(format!(
            "{} groups cannot fill {k} folds",
            groups.len()
        )));
    }
    if let Some(s) = strata {
        if s.len() != groups.len() {
            return Err(AtlasError::Argument("one stratum per group is required".into()));
        }
    }
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.shuffle(&mut substream(seed, "folds"));
    if let Some(s) = strata {
        order.sort_by(|a, b| s[*a].cmp(&s[*b]));
    }
    let assignments = order
        .iter()
        .enumerate()
        .map(|(pos, &g)| (groups[g].clone(), pos % k))
        .collect();
    Ok(FoldPlan {
        k,
        level,
        seed,
        assignments,
    })
}

impl FoldPlan {
    pub fn fold_of(&self, group: &str) -> Result<usize> {
        self.assignments
            .get(group)
            .copied()
            .ok_or_else(|| AtlasError::Argument(format!("group {group:?} is not in the fold plan")))
    }

    /// Fold index for each item, given the group of each item.
    pub fn item_folds(&self, item_groups: &[String]) -> Result<Vec<usize>> {
        item_groups.iter().map(|g| self.fold_of(g)).collect()
    }
}

/// Train and test row indices for one fold.
pub fn split(folds: &[usize], fold: usize) -> (Vec<usize>, Vec<usize>) {
    (0..folds.len()).partition(|&i| folds[i] != fold)
}

/// Concatenation of an H&E and an mIF embedding, in that order.
pub fn fuse_concat(he: &[f64], mif: &[f64]) -> Result<Vec<f64>> {
    if he.is_empty() || mif.is_empty() {
        return Err(AtlasError::Argument("both modalities are required for concatenation".into()));
    }
    Ok(he.iter().chain(mif).copied().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimReport {
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
}

pub const PROBE_TOL: f64 = 1e-6;
pub const PROBE_MAX_ITER: usize = 1000;
const LBFGS_MEMORY: usize = 10;

/// Limited-memory BFGS with Armijo backtracking.
fn lbfgs(mut x: Vec<f64>, f: impl Fn(&[f64]) -> (f64, Vec<f64>), tol: f64, max_iter: usize) -> (Vec<f64>, OptimReport) {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
    let (mut fx, mut g) = f(&x);
    let mut hist: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new();
    let mut iterations = 0;
    loop {
        let gnorm = dot(&g, &g).sqrt();
        if gnorm <= tol {
            return (x, OptimReport { iterations, grad_norm: gnorm, converged: true });
        }
        if iterations >= max_iter {
            return (x, OptimReport { iterations, grad_norm: gnorm, converged: false });
        }
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot(s, &d);
            d.iter_mut().zip(y).for_each(|(di, yi)| *di -= a * yi);
            alphas.push(a);
        }
        let gamma = hist.last().map_or(1.0 / gnorm.max(1.0), |(s, y, _)| dot(s, y) / dot(y, y));
        d.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &d);
            d.iter_mut().zip(s).for_each(|(di, si)| *di += (a - b) * si);
        }
        let mut slope = dot(&g, &d);
        // Fall back to steepest descent when the quasi-Newton direction is
        // nearly orthogonal to the gradient.
        if slope >= -1e-8 * gnorm * dot(&d, &d).sqrt() {
            hist.clear();
            d = g.iter().map(|v| -v / gnorm.max(1.0)).collect();
            slope = dot(&g, &d);
        }
        let mut step = 1.0;
        let (x_new, f_new, g_new) = loop {
            let cand: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step * di).collect();
            let (fc, gc) = f(&cand);
            let armijo = fc <= fx + 1e-4 * step * slope;
            // Approximate Wolfe: inside the roundoff band of f, accept when
            // the directional derivative has shrunk.
            let approx = fc <= fx + 1e-12 * fx.abs() && {
                let dc = dot(&gc, &d);
                dc >= 0.9 * slope && dc <= -0.8 * slope
            };
            if fc.is_finite() && (armijo || approx) {
                break (cand, fc, gc);
            }
            step *= 0.5;
            if step < 1e-20 {
                return (x, OptimReport { iterations, grad_norm: gnorm, converged: false });
            }
        };
        if f_new >= fx && dot(&g_new, &g_new).sqrt() >= gnorm {
            // No representable decrease: restart once, then give up.
            if hist.is_empty() {
                return (x, OptimReport { iterations, grad_norm: gnorm, converged: false });
            }
            hist.clear();
            iterations += 1;
            continue;
        }
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 {
            if hist.len() == LBFGS_MEMORY {
                hist.remove(0);
            }
            hist.push((s, y, 1.0 / sy));
        }
        x = x_new;
        fx = f_new;
        g = g_new;
        iterations += 1;
    }
}

/// Multinomial logistic regression fitted on summed cross-entropy plus
/// `‖W‖² / (2C)`. The bias is not penalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub classes: Vec<String>,
    /// d × classes.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub c: f64,
    pub report: OptimReport,
}

fn softmax_rows(z: &mut Array2<f64>) {
    for mut row in z.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, v| a.max(*v));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
}

/// Probe objective and gradient at flattened parameters `[W (row-major), b]`.
pub fn probe_objective(theta: &[f64], x: ArrayView2<f64>, y: &[usize], n_classes: usize, c: f64) -> (f64, Vec<f64>) {
    let d = x.ncols();
    let w = ArrayView2::from_shape((d, n_classes), &theta[..d * n_classes]).expect("theta layout");
    let b = ArrayView1::from(&theta[d * n_classes..]);
    let z = x.dot(&w) + &b;
    let mut loss = 0.0;
    for (row, &yi) in z.rows().into_iter().zip(y) {
        let m = row.fold(f64::NEG_INFINITY, |a, v| a.max(*v));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[yi];
    }
    loss += w.iter().map(|v| v * v).sum::<f64>() / (2.0 * c);
    let mut p = z;
    softmax_rows(&mut p);
    for (mut row, &yi) in p.rows_mut().into_iter().zip(y) {
        row[yi] -= 1.0;
    }
    let gw = x.t().dot(&p) + &w / c;
    let gb = p.sum_axis(Axis(0));
    let grad = gw.iter().chain(gb.iter()).copied().collect();
    (loss, grad)
}

pub fn fit_probe(x: ArrayView2<f64>, labels: &[String], c: f64) -> Result<LinearProbe> {
    if labels.len() != x.nrows() {
        return Err(AtlasError::Argument("one label per row is required".into()));
    }
    if !(c > 0.0) {
        return Err(AtlasError::Argument(format!("C must be positive, got {c}")));
    }
    let classes: Vec<String> = labels.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if classes.len() < 2 {
        return Err(AtlasError::Degenerate("probe needs at least two classes in training labels".into()));
    }
    let y: Vec<usize> = labels
        .iter()
        .map(|l| classes.binary_search(l).expect("class present"))
        .collect();
    let (d, k) = (x.ncols(), classes.len());
    let theta0 = vec![0.0; d * k + k];
    let (theta, report) = lbfgs(theta0, |t| probe_objective(t, x, &y, k, c), PROBE_TOL, PROBE_MAX_ITER);
    let w = Array2::from_shape_vec((d, k), theta[..d * k].to_vec()).expect("theta layout");
    let b = Array1::from(theta[d * k..].to_vec());
    Ok(LinearProbe { classes, w, b, c, report })
}

impl LinearProbe {
    pub fn predict_proba(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.w) + &self.b;
        softmax_rows(&mut z);
        z
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Vec<String> {
        let z = x.dot(&self.w) + &self.b;
        z.rows()
            .into_iter()
            .map(|r| {
                let mut best = 0;
                for j in 1..r.len() {
                    if r[j] > r[best] {
                        best = j;
                    }
                }
                self.classes[best].clone()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridPoint {
    pub c: f64,
    pub fold_f1: Vec<f64>,
    pub mean_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeGrid {
    pub c_star: f64,
    pub points: Vec<GridPoint>,
}

/// Cross-validated C selection by mean macro-F1; ties go to the smaller C.
pub fn probe_grid(x: ArrayView2<f64>, labels: &[String], folds: &[usize], grid: &[f64]) -> Result<ProbeGrid> {
    if grid.is_empty() {
        return Err(AtlasError::Argument("C grid is empty".into()));
    }
    if folds.len() != x.nrows() {
        return Err(AtlasError::Argument("one fold index per row is required".into()));
    }
    let k = folds.iter().max().map_or(0, |m| m + 1);
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut points = Vec::with_capacity(sorted.len());
    for &c in &sorted {
        let mut fold_f1 = Vec::with_capacity(k);
        for f in 0..k {
            let (train, test) = split(folds, f);
            if test.is_empty() {
                continue;
            }
            let xt = x.select(Axis(0), &train);
            let yt: Vec<String> = train.iter().map(|&i| labels[i].clone()).collect();
            let probe = fit_probe(xt.view(), &yt, c)?;
            let pred = probe.predict(x.select(Axis(0), &test).view());
            let truth: Vec<String> = test.iter().map(|&i| labels[i].clone()).collect();
            fold_f1.push(macro_f1(&truth, &pred)?);
        }
        let mean_f1 = crate::linalg::mean(&fold_f1);
        points.push(GridPoint { c, fold_f1, mean_f1 });
    }
    let mut best = 0;
    for (i, p) in points.iter().enumerate() {
        if p.mean_f1 > points[best].mean_f1 {
            best = i;
        }
    }
    Ok(ProbeGrid {
        c_star: points[best].c,
        points,
    })
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `#neg / #pos` over the given labels.
pub fn pos_weight(labels: &[bool]) -> Result<f64> {
    let pos = labels.iter().filter(|l| **l).count();
    if pos == 0 {
        return Err(AtlasError::Degenerate(
            "no positive labels; fall back to pos_weight = 1".into(),
        ));
    }
    Ok((labels.len() - pos) as f64 / pos as f64)
}

/// Mean binary cross-entropy with the positive term scaled by `pos_weight`,
/// and its gradient with respect to each logit.
pub fn bce_weighted(logits: &[f64], labels: &[bool], pos_weight: f64) -> Result<(f64, Vec<f64>)> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(AtlasError::Argument("logits and labels must be non-empty and equal length".into()));
    }
    if !(pos_weight > 0.0) {
        return Err(AtlasError::Argument("pos_weight must be positive".into()));
    }
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&x, &y) in logits.iter().zip(labels) {
        if y {
            loss += pos_weight * softplus(-x);
            grad.push(pos_weight * (sigmoid(x) - 1.0) / n);
        } else {
            loss += softplus(x);
            grad.push(sigmoid(x) / n);
        }
    }
    Ok((loss / n, grad))
}

fn check_survival(risks: &[f64], times: &[f64], events: &[bool]) -> Result<()> {
    if risks.len() != times.len() || times.len() != events.len() {
        return Err(AtlasError::Argument("risks, times and events differ in length".into()));
    }
    if times.iter().any(|t| !t.is_finite()) || risks.iter().any(|r| !r.is_finite()) {
        return Err(AtlasError::Argument("times and risks must be finite".into()));
    }
    Ok(())
}

/// Normalized negative Cox partial log-likelihood with Breslow risk sets
/// (`T_j >= T_i`), and its gradient.
pub fn cox_loss(risks: &[f64], times: &[f64], events: &[bool]) -> Result<(f64, Vec<f64>)> {
    check_survival(risks, times, events)?;
    let n_events = events.iter().filter(|e| **e).count();
    if n_events == 0 {
        return Err(AtlasError::Degenerate("partial likelihood needs at least one event".into()));
    }
    let shift = risks.iter().fold(f64::NEG_INFINITY, |a, r| a.max(*r));
    let mut order: Vec<usize> = (0..risks.len()).collect();
    order.sort_by(|a, b| times[*b].total_cmp(&times[*a]));
    // Walk from the latest time; each time block sees every subject at or
    // after it.
    let mut risk_sum = vec![0.0; risks.len()];
    let mut acc = 0.0;
    let mut i = 0;
    let mut blocks = Vec::new();
    while i < order.len() {
        let mut j = i;
        while j < order.len() && times[order[j]] == times[order[i]] {
            acc += (risks[order[j]] - shift).exp();
            j += 1;
        }
        for &k in &order[i..j] {
            risk_sum[k] = acc;
        }
        blocks.push((i, j));
        i = j;
    }
    let mut loss = 0.0;
    for k in 0..risks.len() {
        if events[k] {
            loss -= risks[k] - shift - risk_sum[k].ln();
        }
    }
    // d/dr_k: subject k sits in the risk set of every event at time <= T_k.
    let mut grad = vec![0.0; risks.len()];
    let mut cum = 0.0;
    for &(a, b) in blocks.iter().rev() {
        let events_here = order[a..b].iter().filter(|&&k| events[k]).count() as f64;
        cum += events_here / risk_sum[order[a]];
        for &k in &order[a..b] {
            grad[k] = (risks[k] - shift).exp() * cum - if events[k] { 1.0 } else { 0.0 };
        }
    }
    let m = n_events as f64;
    grad.iter_mut().for_each(|g| *g /= m);
    Ok((loss / m, grad))
}

struct Fenwick(Vec<usize>);

impl Fenwick {
    fn add(&mut self, mut i: usize) {
        i += 1;
        while i < self.0.len() {
            self.0[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Count of inserted positions `< i`.
    fn below(&self, mut i: usize) -> usize {
        let mut s = 0;
        while i > 0 {
            s += self.0[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// Harrell's C over pairs with `T_i < T_j` and `E_i = 1`; equal risks count
/// one half. Computed with a Fenwick tree over risk ranks.
pub fn c_index(risks: &[f64], times: &[f64], events: &[bool]) -> Result<f64> {
    check_survival(risks, times, events)?;
    let mut distinct: Vec<f64> = risks.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    // partial_cmp keeps -0.0 and 0.0 together, matching dedup; inputs are finite.
    let rank = |r: f64| {
        distinct
            .binary_search_by(|v| v.partial_cmp(&r).expect("finite risks"))
            .expect("risk present")
    };
    let mut order: Vec<usize> = (0..risks.len()).collect();
    order.sort_by(|a, b| times[*b].total_cmp(&times[*a]));
    let mut tree = Fenwick(vec![0; distinct.len() + 1]);
    let (mut conc, mut ties, mut total) = (0usize, 0usize, 0usize);
    let mut inserted = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && times[order[j]] == times[order[i]] {
            j += 1;
        }
        for &k in &order[i..j] {
            if events[k] {
                let r = rank(risks[k]);
                let below = tree.below(r);
                conc += below;
                ties += tree.below(r + 1) - below;
                total += inserted;
            }
        }
        for &k in &order[i..j] {
            tree.add(rank(risks[k]));
            inserted += 1;
        }
        i = j;
    }
    if total == 0 {
        return Err(AtlasError::Degenerate("no comparable pairs".into()));
    }
    Ok((conc as f64 + 0.5 * ties as f64) / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KmStep {
    pub time: f64,
    pub at_risk: usize,
    pub events: usize,
    pub survival: f64,
}

/// Product-limit estimate with one step per distinct event time. The curve
/// starts at 1 at time 0.
pub fn kaplan_meier(times: &[f64], events: &[bool]) -> Vec<KmStep> {
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|a, b| times[*a].total_cmp(&times[*b]));
    let mut out = vec![KmStep {
        time: 0.0,
        at_risk: times.len(),
        events: 0,
        survival: 1.0,
    }];
    let mut s = 1.0;
    let mut at_risk = times.len();
    let mut i = 0;
    while i < order.len() {
        let t = times[order[i]];
        let mut j = i;
        let mut d = 0;
        while j < order.len() && times[order[j]] == t {
            d += usize::from(events[order[j]]);
            j += 1;
        }
        if d > 0 {
            s *= 1.0 - d as f64 / at_risk as f64;
            out.push(KmStep {
                time: t,
                at_risk,
                events: d,
                survival: s,
            });
        }
        at_risk -= j - i;
        i = j;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogRank {
    pub chi_square: f64,
    pub p_value: f64,
    /// Observed and expected events in the high-risk group.
    pub observed: f64,
    pub expected: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KmComparison {
    pub low: Vec<KmStep>,
    pub high: Vec<KmStep>,
    /// `None` when the statistic is undefined (no events or zero variance).
    pub logrank: Option<LogRank>,
}

/// KM curves for two groups and the 1-df log-rank test between them.
pub fn km_logrank(times: &[f64], events: &[bool], high: &[bool]) -> Result<KmComparison> {
    if times.len() != events.len() || times.len() != high.len() {
        return Err(AtlasError::Argument("times, events and groups differ in length".into()));
    }
    let n_high = high.iter().filter(|h| **h).count();
    if n_high == 0 || n_high == high.len() {
        return Err(AtlasError::Argument("both groups need at least one subject".into()));
    }
    let pick = |g: bool| -> (Vec<f64>, Vec<bool>) {
        (0..times.len())
            .filter(|&i| high[i] == g)
            .map(|i| (times[i], events[i]))
            .unzip()
    };
    let (tl, el) = pick(false);
    let (th, eh) = pick(true);
    let mut event_times: Vec<f64> = (0..times.len()).filter(|&i| events[i]).map(|i| times[i]).collect();
    event_times.sort_by(f64::total_cmp);
    event_times.dedup();
    let (mut obs, mut exp, mut var) = (0.0f64, 0.0f64, 0.0f64);
    for &t in &event_times {
        let (mut n, mut n1, mut d, mut d1) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..times.len() {
            if times[i] >= t {
                n += 1.0;
                if high[i] {
                    n1 += 1.0;
                }
                if times[i] == t && events[i] {
                    d += 1.0;
                    if high[i] {
                        d1 += 1.0;
                    }
                }
            }
        }
        obs += d1;
        exp += d * n1 / n;
        if n > 1.0 {
            var += d * (n1 / n) * (1.0 - n1 / n) * (n - d) / (n - 1.0);
        }
    }
    let logrank = (var > 0.0).then(|| {
        let chi = (obs - exp).powi(2) / var;
        let p = ChiSquared::new(1.0).expect("1 df").sf(chi);
        LogRank {
            chi_square: chi,
            p_value: p,
            observed: obs,
            expected: exp,
            variance: var,
        }
    });
    Ok(KmComparison {
        low: kaplan_meier(&tl, &el),
        high: kaplan_meier(&th, &eh),
        logrank,
    })
}

/// High-risk flags from a median split; values equal to the median stay low.
pub fn median_split(risks: &[f64]) -> Vec<bool> {
    let mut s = risks.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        return Vec::new();
    }
    let median = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
    risks.iter().map(|r| *r > median).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Classification,
    Cox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MilConfig {
    pub d_hidden: usize,
    pub d_attn: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for MilConfig {
    fn default() -> Self {
        MilConfig {
            d_hidden: 256,
            d_attn: 128,
            lr: 1e-4,
            weight_decay: 0.01,
            epochs: 100,
            seed: 0,
        }
    }
}

/// Attention-MIL: `h = relu(x W + b)`, `a = softmax(tanh(h Vᵀ) w)`,
/// `s = Σ a h`, output `u·s + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct MilModel {
    pub enc_w: Array2<f64>,
    pub enc_b: Array1<f64>,
    pub v: Array2<f64>,
    pub w: Array1<f64>,
    pub u: Array1<f64>,
    pub c: f64,
}

#[derive(Debug, Clone)]
pub struct MilPass {
    pub pooled: Array1<f64>,
    pub attention: Vec<f64>,
    pub output: f64,
    a: Array1<f64>,
    x: Array2<f64>,
    a1: Array2<f64>,
    h: Array2<f64>,
    t: Array2<f64>,
}

#[derive(Debug, Clone)]
struct MilGrads {
    enc_w: Array2<f64>,
    enc_b: Array1<f64>,
    v: Array2<f64>,
    w: Array1<f64>,
    u: Array1<f64>,
    c: f64,
}

impl MilGrads {
    fn zeros(m: &MilModel) -> Self {
        MilGrads {
            enc_w: Array2::zeros(m.enc_w.dim()),
            enc_b: Array1::zeros(m.enc_b.len()),
            v: Array2::zeros(m.v.dim()),
            w: Array1::zeros(m.w.len()),
            u: Array1::zeros(m.u.len()),
            c: 0.0,
        }
    }
}

impl MilModel {
    pub fn init(d_in: usize, cfg: &MilConfig) -> Self {
        let mut rng = substream(cfg.seed, "mil_init");
        let mut uni = |rows: usize, cols: usize, fan_in: usize| {
            let b = 1.0 / (fan_in as f64).sqrt();
            Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-b..b))
        };
        let enc_w = uni(d_in, cfg.d_hidden, d_in);
        let v = uni(cfg.d_attn, cfg.d_hidden, cfg.d_hidden);
        let w = uni(cfg.d_attn, 1, cfg.d_attn).column(0).to_owned();
        let u = uni(cfg.d_hidden, 1, cfg.d_hidden).column(0).to_owned();
        MilModel {
            enc_w,
            enc_b: Array1::zeros(cfg.d_hidden),
            v,
            w,
            u,
            c: 0.0,
        }
    }

    /// Pools the rows of `instances` where `mask` is true. Masked rows
    /// receive attention exactly 0.
    pub fn forward(&self, instances: ArrayView2<f64>, mask: &[bool]) -> Result<MilPass> {
        if mask.len() != instances.nrows() {
            return Err(AtlasError::Argument("mask length differs from bag size".into()));
        }
        let valid: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        if valid.is_empty() {
            return Err(AtlasError::Degenerate("bag has no valid instances".into()));
        }
        let x = instances.select(Axis(0), &valid);
        let a1 = x.dot(&self.enc_w) + &self.enc_b;
        let h = a1.mapv(|v| v.max(0.0));
        let t = h.dot(&self.v.t()).mapv(f64::tanh);
        let e = t.dot(&self.w);
        let m = e.fold(f64::NEG_INFINITY, |a, v| a.max(*v));
        let ex = e.mapv(|v| (v - m).exp());
        let a = &ex / ex.sum();
        let pooled = a.dot(&h);
        let output = self.u.dot(&pooled) + self.c;
        let mut attention = vec![0.0; mask.len()];
        for (k, &i) in valid.iter().enumerate() {
            attention[i] = a[k];
        }
        Ok(MilPass {
            pooled,
            attention,
            output,
            a,
            x,
            a1,
            h,
            t,
        })
    }

    pub fn predict(&self, bag: ArrayView2<f64>) -> Result<f64> {
        Ok(self.forward(bag, &vec![true; bag.nrows()])?.output)
    }

    fn backward(&self, pass: &MilPass, g: f64, grads: &mut MilGrads) {
        let a = &pass.a;
        grads.u.scaled_add(g, &pass.pooled);
        grads.c += g;
        let ds = &self.u * g;
        let da = pass.h.dot(&ds);
        let mean = a.dot(&da);
        let de = a * &(da - mean);
        let mut dh = Array2::zeros(pass.h.dim());
        for (mut row, aj) in dh.rows_mut().into_iter().zip(a.iter()) {
            row.scaled_add(*aj, &ds);
        }
        grads.w += &pass.t.t().dot(&de);
        let mut dz = de.insert_axis(Axis(1)).dot(&self.w.view().insert_axis(Axis(0)));
        dz.zip_mut_with(&pass.t, |d, t| *d *= 1.0 - t * t);
        grads.v += &dz.t().dot(&pass.h);
        dh += &dz.dot(&self.v);
        dh.zip_mut_with(&pass.a1, |d, a| {
            if *a <= 0.0 {
                *d = 0.0;
            }
        });
        grads.enc_w += &pass.x.t().dot(&dh);
        grads.enc_b += &dh.sum_axis(Axis(0));
    }
}

/// Per-bag training target.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Binary(Vec<bool>),
    Survival { times: Vec<f64>, events: Vec<bool> },
}

impl Targets {
    fn len(&self) -> usize {
        match self {
            Targets::Binary(y) => y.len(),
            Targets::Survival { times, .. } => times.len(),
        }
    }

    fn kind(&self) -> HeadKind {
        match self {
            Targets::Binary(_) => HeadKind::Classification,
            Targets::Survival { .. } => HeadKind::Cox,
        }
    }

    fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Binary(y) => Targets::Binary(idx.iter().map(|&i| y[i]).collect()),
            Targets::Survival { times, events } => Targets::Survival {
                times: idx.iter().map(|&i| times[i]).collect(),
                events: idx.iter().map(|&i| events[i]).collect(),
            },
        }
    }
}

/// Loss over a set of bags and the per-bag output gradients.
fn head_loss(outputs: &[f64], targets: &Targets, pos_w: f64) -> Result<(f64, Vec<f64>)> {
    match targets {
        Targets::Binary(y) => bce_weighted(outputs, y, pos_w),
        Targets::Survival { times, events } => cox_loss(outputs, times, events),
    }
}

/// Full-batch AdamW over all training bags.
pub fn fit_mil(bags: &[Array2<f64>], targets: &Targets, cfg: &MilConfig) -> Result<(MilModel, Vec<f64>)> {
    if bags.is_empty() || bags.len() != targets.len() {
        return Err(AtlasError::Argument("one target per bag is required".into()));
    }
    let d_in = bags[0].ncols();
    if bags.iter().any(|b| b.ncols() != d_in) {
        return Err(AtlasError::Argument("bags differ in feature dimension".into()));
    }
    let pos_w = match targets {
        Targets::Binary(y) => pos_weight(y).unwrap_or(1.0),
        Targets::Survival { .. } => 1.0,
    };
    let mut model = MilModel::init(d_in, cfg);
    let mut adam = MilAdam::new(&model);
    let mut trace = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let passes: Vec<MilPass> = bags
            .iter()
            .map(|b| model.forward(b.view(), &vec![true; b.nrows()]))
            .collect::<Result<_>>()?;
        let outputs: Vec<f64> = passes.iter().map(|p| p.output).collect();
        let (loss, g) = head_loss(&outputs, targets, pos_w)?;
        trace.push(loss);
        let mut grads = MilGrads::zeros(&model);
        for (p, gi) in passes.iter().zip(&g) {
            model.backward(p, *gi, &mut grads);
        }
        adam.step(&mut model, &grads, cfg.lr, cfg.weight_decay);
    }
    Ok((model, trace))
}

struct MilAdam {
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

fn mil_params(m: &mut MilModel) -> [(&mut [f64], bool); 6] {
    [
        (m.enc_w.as_slice_mut().expect("standard layout"), true),
        (m.enc_b.as_slice_mut().expect("standard layout"), false),
        (m.v.as_slice_mut().expect("standard layout"), true),
        (m.w.as_slice_mut().expect("standard layout"), true),
        (m.u.as_slice_mut().expect("standard layout"), true),
        (std::slice::from_mut(&mut m.c), false),
    ]
}

impl MilAdam {
    fn new(model: &MilModel) -> Self {
        let mut probe = model.clone();
        let sizes: Vec<usize> = mil_params(&mut probe).iter().map(|(p, _)| p.len()).collect();
        MilAdam {
            t: 0,
            m: sizes.iter().map(|n| vec![0.0; *n]).collect(),
            v: sizes.iter().map(|n| vec![0.0; *n]).collect(),
        }
    }

    fn step(&mut self, model: &mut MilModel, g: &MilGrads, lr: f64, wd: f64) {
        use crate::align::{ADAM_BETA1 as B1, ADAM_BETA2 as B2, ADAM_EPS};
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        let grads: [&[f64]; 6] = [
            g.enc_w.as_slice().expect("standard layout"),
            g.enc_b.as_slice().expect("standard layout"),
            g.v.as_slice().expect("standard layout"),
            g.w.as_slice().expect("standard layout"),
            g.u.as_slice().expect("standard layout"),
            std::slice::from_ref(&g.c),
        ];
        for (k, (p, decays)) in mil_params(model).into_iter().enumerate() {
            let decay = if decays { wd } else { 0.0 };
            for i in 0..p.len() {
                let gi = grads[k][i];
                self.m[k][i] = B1 * self.m[k][i] + (1.0 - B1) * gi;
                self.v[k][i] = B2 * self.v[k][i] + (1.0 - B2) * gi * gi;
                let upd = (self.m[k][i] / c1) / ((self.v[k][i] / c2).sqrt() + ADAM_EPS);
                p[i] -= lr * (upd + decay * p[i]);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum FoldOutcome {
    Classification { auroc: f64, auprc: f64 },
    Survival { c_index: f64 },
    Skipped { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub outcome: FoldOutcome,
}

/// Trains one model per fold on the other folds and scores the held-out bags.
pub fn train_mil(bags: &[Array2<f64>], targets: &Targets, folds: &[usize], cfg: &MilConfig) -> Result<Vec<FoldMetrics>> {
    Ok(cross_validate_mil(bags, targets, folds, cfg)?.0)
}

/// As [`train_mil`], also returning each bag's held-out score (`None` for
/// bags in skipped folds).
pub fn cross_validate_mil(
    bags: &[Array2<f64>],
    targets: &Targets,
    folds: &[usize],
    cfg: &MilConfig,
) -> Result<(Vec<FoldMetrics>, Vec<Option<f64>>)> {
    if folds.len() != bags.len() || targets.len() != bags.len() {
        return Err(AtlasError::Argument("bags, targets and folds differ in length".into()));
    }
    let k = folds.iter().max().map_or(0, |m| m + 1);
    let mut out = Vec::with_capacity(k);
    let mut oof = vec![None; bags.len()];
    for f in 0..k {
        let (train, test) = split(folds, f);
        let skip = |reason: &str| FoldMetrics {
            fold: f,
            n_train: train.len(),
            n_test: test.len(),
            outcome: FoldOutcome::Skipped { reason: reason.into() },
        };
        let tr_bags: Vec<Array2<f64>> = train.iter().map(|&i| bags[i].clone()).collect();
        let tr_targets = targets.select(&train);
        if let Targets::Survival { events, .. } = &tr_targets {
            if !events.iter().any(|e| *e) {
                out.push(skip("no events in training split"));
                continue;
            }
        }
        if test.is_empty() || tr_bags.is_empty() {
            out.push(skip("empty split"));
            continue;
        }
        let (model, _) = fit_mil(&tr_bags, &tr_targets, cfg)?;
        let scores: Vec<f64> = test
            .iter()
            .map(|&i| model.predict(bags[i].view()))
            .collect::<Result<_>>()?;
        for (&i, &s) in test.iter().zip(&scores) {
            oof[i] = Some(s);
        }
        let outcome = match (targets.kind(), targets.select(&test)) {
            (HeadKind::Classification, Targets::Binary(y)) => match auroc_auprc(&scores, &y) {
                Ok(r) => FoldOutcome::Classification {
                    auroc: r.auroc,
                    auprc: r.auprc,
                },
                Err(_) => FoldOutcome::Skipped {
                    reason: "held-out split has one class".into(),
                },
            },
            (_, Targets::Survival { times, events }) => match c_index(&scores, &times, &events) {
                Ok(c) => FoldOutcome::Survival { c_index: c },
                Err(_) => FoldOutcome::Skipped {
                    reason: "no comparable pairs in held-out split".into(),
                },
            },
            _ => unreachable!("target kind matches selection"),
        };
        out.push(FoldMetrics {
            fold: f,
            n_train: train.len(),
            n_test: test.len(),
            outcome,
        });
    }
    Ok((out, oof))
}
