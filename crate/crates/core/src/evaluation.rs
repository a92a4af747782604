//! Retrieval evaluation: descriptor extraction, CMC ranking, multi-trial
//! aggregation with Student-t intervals, paired architecture comparison and
//! convergence histories.
//!
//! Probes are camera A tracks, the gallery is camera B. Ranking uses the
//! Euclidean distance on raw descriptors; ties go to the lower gallery index.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::dataio::IdentityRecord;
use crate::error::{dim_err, domain_err, Error, Result};
use crate::seqstage::{l2_distance, Arch};
use crate::trainer::{train_with_hook, Model, TrainConfig, TrainOutcome};

pub const CMC_HEADER: &str = "rank,mean,ci_half";
pub const DIFF_HEADER: &str = "rank,mean_diff,ci_half";
pub const HISTORY_HEADER: &str = "progress,rank,value";
pub const CURVES_HEADER: &str = "trial,rank,value";

/// Match rate at ranks `1..=G`.
#[derive(Clone, Debug, PartialEq)]
pub struct CmcCurve(pub Vec<f64>);

impl CmcCurve {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Value at 1-based `rank`, saturating at the gallery size.
    pub fn at(&self, rank: usize) -> f64 {
        self.0[rank.clamp(1, self.0.len()) - 1]
    }
}

/// One descriptor per identity and camera.
pub fn extract_descriptors(
    identities: &[IdentityRecord],
    model: &Model,
    arch: Arch,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let pairs = identities
        .par_iter()
        .map(|rec| {
            let [a, b] = &rec.tracks;
            if a.is_empty() || b.is_empty() {
                return domain_err(format!("identity {} has an empty track", rec.id));
            }
            Ok((
                model.descriptor_as(arch, a.frames())?,
                model.descriptor_as(arch, b.frames())?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(pairs.into_iter().unzip())
}

/// 1-based rank of `gallery[target]` for `probe`.
fn rank_of(probe: &[f64], gallery: &[Vec<f64>], target: usize) -> usize {
    let dt = l2_distance(probe, &gallery[target]);
    1 + gallery
        .iter()
        .enumerate()
        .filter(|&(j, g)| {
            let d = l2_distance(probe, g);
            d < dt || (d == dt && j < target)
        })
        .count()
}

/// CMC curve of `probes` against `gallery`; probe `i` matches `gallery[truth[i]]`.
pub fn cmc(probes: &[Vec<f64>], gallery: &[Vec<f64>], truth: &[usize]) -> Result<CmcCurve> {
    let g = gallery.len();
    if g == 0 || probes.is_empty() {
        return domain_err("cmc needs a non-empty probe set and gallery");
    }
    if probes.len() != g || truth.len() != g {
        return domain_err(format!(
            "cmc needs a bijective match: {} probes, {} gallery items, {} truth entries",
            probes.len(),
            g,
            truth.len()
        ));
    }
    let mut seen = vec![false; g];
    for &t in truth {
        if t >= g || std::mem::replace(&mut seen[t], true) {
            return domain_err("ground-truth mapping is not a bijection");
        }
    }
    let dim = gallery[0].len();
    if gallery.iter().chain(probes).any(|v| v.len() != dim) {
        return dim_err("descriptor dimensions differ between probes and gallery");
    }
    let ranks: Vec<usize> = probes
        .par_iter()
        .zip(truth.par_iter())
        .map(|(p, &t)| rank_of(p, gallery, t))
        .collect();
    let mut hist = vec![0usize; g + 1];
    for r in ranks {
        hist[r] += 1;
    }
    let n = probes.len() as f64;
    let mut acc = 0;
    Ok(CmcCurve(
        hist[1..]
            .iter()
            .map(|c| {
                acc += c;
                acc as f64 / n
            })
            .collect(),
    ))
}

/// Extracts descriptors under `arch` and ranks camera A against camera B.
pub fn evaluate(model: &Model, arch: Arch, test_set: &[IdentityRecord]) -> Result<CmcCurve> {
    let (probes, gallery) = extract_descriptors(test_set, model, arch)?;
    let truth: Vec<usize> = (0..probes.len()).collect();
    cmc(&probes, &gallery, &truth)
}

/// Two-sided 95% Student-t quantile for `n` samples.
pub fn t_quantile_95(n: usize) -> Result<f64> {
    if n < 2 {
        return domain_err(format!("confidence interval undefined for {n} sample(s)"));
    }
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| Error::Domain(e.to_string()))?;
    Ok(t.inverse_cdf(0.975))
}

/// Per-column mean and 95% half-width of equal-length rows.
fn mean_ci(rows: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let t = t_quantile_95(rows.len())?;
    let len = rows[0].len();
    if rows.iter().any(|r| r.len() != len) {
        return dim_err("curves of different lengths");
    }
    let n = rows.len() as f64;
    let mut mean = Vec::with_capacity(len);
    let mut half = Vec::with_capacity(len);
    for k in 0..len {
        let m = rows.iter().map(|r| r[k]).sum::<f64>() / n;
        let var = rows.iter().map(|r| (r[k] - m) * (r[k] - m)).sum::<f64>() / (n - 1.0);
        mean.push(m);
        half.push(t * var.sqrt() / n.sqrt());
    }
    Ok((mean, half))
}

/// Mean curve and unclipped 95% half-widths over trials.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialAggregate {
    pub curves: Vec<CmcCurve>,
    pub mean: Vec<f64>,
    pub ci_half: Vec<f64>,
}

pub fn aggregate_trials(curves: &[CmcCurve]) -> Result<TrialAggregate> {
    let rows: Vec<Vec<f64>> = curves.iter().map(|c| c.0.clone()).collect();
    let (mean, ci_half) = mean_ci(&rows)?;
    Ok(TrialAggregate {
        curves: curves.to_vec(),
        mean,
        ci_half,
    })
}

/// Paired per-trial differences `a - b`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedComparison {
    pub differences: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub ci_half: Vec<f64>,
}

impl PairedComparison {
    /// Ranks whose interval covers zero.
    pub fn ranks_containing_zero(&self) -> usize {
        self.mean
            .iter()
            .zip(&self.ci_half)
            .filter(|(m, h)| (*m - *h) <= 0.0 && 0.0 <= (*m + *h))
            .count()
    }
}

pub fn compare_architectures(a: &[CmcCurve], b: &[CmcCurve]) -> Result<PairedComparison> {
    if a.len() != b.len() {
        return domain_err(format!("trial counts differ: {} vs {}", a.len(), b.len()));
    }
    let differences = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            if x.len() != y.len() {
                return dim_err("paired curves of different lengths");
            }
            Ok(x.0.iter().zip(&y.0).map(|(p, q)| p - q).collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let (mean, ci_half) = mean_ci(&differences)?;
    Ok(PairedComparison {
        differences,
        mean,
        ci_half,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryPoint {
    /// Completed fraction of the iteration budget.
    pub progress: f64,
    pub iteration: u64,
    pub curve: CmcCurve,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConvergenceHistory {
    pub points: Vec<HistoryPoint>,
}

impl ConvergenceHistory {
    pub fn series(&self, rank: usize) -> Vec<(f64, f64)> {
        self.points.iter().map(|p| (p.progress, p.curve.at(rank))).collect()
    }

    /// First iteration whose value at `rank` reaches `fraction` of the final one.
    pub fn first_reaching(&self, rank: usize, fraction: f64) -> Option<u64> {
        first_reaching(
            &self.points.iter().map(|p| (p.iteration, p.curve.at(rank))).collect::<Vec<_>>(),
            fraction,
        )
    }
}

/// First `x` whose `y` reaches `fraction` of the last `y`.
pub fn first_reaching(series: &[(u64, f64)], fraction: f64) -> Option<u64> {
    let last = series.last()?.1;
    series.iter().find(|(_, y)| *y >= fraction * last).map(|(x, _)| *x)
}

/// Point-wise mean of histories sampled at the same iterations.
pub fn mean_history(histories: &[ConvergenceHistory]) -> Result<ConvergenceHistory> {
    let first = histories
        .first()
        .ok_or_else(|| Error::Domain("no histories to average".into()))?;
    let n = histories.len() as f64;
    let points = (0..first.points.len())
        .map(|i| {
            let base = &first.points[i];
            let mut acc = vec![0.0; base.curve.len()];
            for h in histories {
                let p = h
                    .points
                    .get(i)
                    .filter(|p| p.iteration == base.iteration && p.curve.len() == acc.len())
                    .ok_or_else(|| Error::Dimension("histories sampled differently".into()))?;
                acc.iter_mut().zip(&p.curve.0).for_each(|(a, v)| *a += v);
            }
            Ok(HistoryPoint {
                progress: base.progress,
                iteration: base.iteration,
                curve: CmcCurve(acc.into_iter().map(|v| v / n).collect()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConvergenceHistory { points })
}

/// Trains on `train_set` and evaluates on `test_set` every `cadence`
/// iterations, including before the first update. Evaluation runs on the
/// model snapshot handed to the hook and never touches training state.
pub fn track_convergence(
    train_set: &[IdentityRecord],
    test_set: &[IdentityRecord],
    config: &TrainConfig,
    cadence: u64,
) -> Result<(TrainOutcome, ConvergenceHistory)> {
    let total = config.total_iterations(train_set.len());
    if cadence == 0 || total % cadence != 0 {
        return Err(Error::Config(format!(
            "evaluation cadence {cadence} does not divide the budget of {total} iterations"
        )));
    }
    let mut history = ConvergenceHistory::default();
    let outcome = train_with_hook(train_set, config, |p, model| {
        if p.iteration % cadence == 0 {
            history.points.push(HistoryPoint {
                progress: p.iteration as f64 / p.total as f64,
                iteration: p.iteration,
                curve: evaluate(model, model.arch, test_set)?,
            });
        }
        Ok(())
    })?;
    Ok((outcome, history))
}

/// `%.6g`-style formatting.
pub fn fmt6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{:.5e}", x);
    let (mant, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(format!("{:.*}", decimals, x))
    } else {
        let mant = trim_zeros(mant.to_string());
        format!("{mant}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// `rank,mean,ci_half`; the interval column stays empty for a single trial.
pub fn cmc_csv(curves: &[CmcCurve]) -> Result<String> {
    let mut s = format!("{CMC_HEADER}\n");
    match curves {
        [] => return domain_err("no curves to write"),
        [one] => {
            for (k, v) in one.0.iter().enumerate() {
                writeln!(s, "{},{},", k + 1, fmt6(*v)).expect("string write");
            }
        }
        many => {
            let agg = aggregate_trials(many)?;
            for (k, (m, h)) in agg.mean.iter().zip(&agg.ci_half).enumerate() {
                writeln!(s, "{},{},{}", k + 1, fmt6(*m), fmt6(*h)).expect("string write");
            }
        }
    }
    Ok(s)
}

pub fn curves_csv(curves: &[CmcCurve]) -> String {
    let mut s = format!("{CURVES_HEADER}\n");
    for (t, c) in curves.iter().enumerate() {
        for (k, v) in c.0.iter().enumerate() {
            writeln!(s, "{},{},{}", t, k + 1, fmt6(*v)).expect("string write");
        }
    }
    s
}

pub fn diff_csv(cmp: &PairedComparison) -> String {
    let mut s = format!("{DIFF_HEADER}\n");
    for (k, (m, h)) in cmp.mean.iter().zip(&cmp.ci_half).enumerate() {
        writeln!(s, "{},{},{}", k + 1, fmt6(*m), fmt6(*h)).expect("string write");
    }
    s
}

pub fn history_csv(history: &ConvergenceHistory, ranks: &[usize]) -> String {
    let mut s = format!("{HISTORY_HEADER}\n");
    for p in &history.points {
        for &r in ranks {
            writeln!(s, "{},{},{}", fmt6(p.progress), r, fmt6(p.curve.at(r))).expect("string write");
        }
    }
    s
}

/// Reads the per-trial curves back from a `curves.csv`.
pub fn parse_curves_csv(text: &str) -> Result<Vec<CmcCurve>> {
    let mut lines = text.lines();
    if lines.next() != Some(CURVES_HEADER) {
        return Err(Error::Format(format!("expected header `{CURVES_HEADER}`")));
    }
    let mut curves: Vec<Vec<f64>> = Vec::new();
    for (n, line) in lines.enumerate() {
        let bad = || Error::Format(format!("curves line {}: `{line}`", n + 2));
        let mut f = line.split(',');
        let (Some(t), Some(k), Some(v), None) = (f.next(), f.next(), f.next(), f.next()) else {
            return Err(bad());
        };
        let t: usize = t.parse().map_err(|_| bad())?;
        let k: usize = k.parse().map_err(|_| bad())?;
        let v: f64 = v.parse().map_err(|_| bad())?;
        if t == curves.len() {
            curves.push(Vec::new());
        }
        if t + 1 != curves.len() || k != curves[t].len() + 1 {
            return Err(bad());
        }
        curves[t].push(v);
    }
    Ok(curves.into_iter().map(CmcCurve).collect())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}
