//! Error and calibration metrics over prediction records: MAE/RMSE,
//! interval coverage (PICP/MPIW), uncertainty-quantile binning with
//! bootstrap confidence intervals, and sparsification-error curves with
//! AUSE.
//!
//! AUSE here is the trapezoidal area under the model sparsification curve
//! normalized by the full-set MAE; the absolute value is therefore not
//! comparable across differently normalized conventions.

use crate::{EvidentError, Result};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write as _;
use std::path::Path;

/// One evaluated sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: usize,
    pub y: f64,
    pub score: f64,
    pub au: f64,
    pub eu: f64,
    pub low: f64,
    pub high: f64,
}

impl PredictionRecord {
    pub fn abs_error(&self) -> f64 {
        (self.y - self.score).abs()
    }
}

/// Mean absolute error and root mean square error.
pub fn error_metrics(records: &[PredictionRecord]) -> Result<(f64, f64)> {
    if records.is_empty() {
        return Err(EvidentError::EmptyInput("error_metrics of no records".into()));
    }
    let n = records.len() as f64;
    let mae = records.iter().map(PredictionRecord::abs_error).sum::<f64>() / n;
    let mse = records
        .iter()
        .map(|r| (r.y - r.score).powi(2))
        .sum::<f64>()
        / n;
    Ok((mae, mse.sqrt()))
}

/// Prediction interval coverage probability and mean interval width.
/// Boundary hits count as covered.
pub fn coverage_metrics(records: &[PredictionRecord]) -> Result<(f64, f64)> {
    if records.is_empty() {
        return Err(EvidentError::EmptyInput(
            "coverage_metrics of no records".into(),
        ));
    }
    let n = records.len() as f64;
    let covered = records
        .iter()
        .filter(|r| r.low <= r.y && r.y <= r.high)
        .count() as f64;
    let width = records.iter().map(|r| r.high - r.low).sum::<f64>() / n;
    Ok((covered / n, width))
}

/// One uncertainty-quantile bin.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuantileBin {
    pub eu_low: f64,
    pub eu_high: f64,
    pub count: usize,
    pub mae: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Sort by epistemic uncertainty (ties by id), split into equal-count
/// ascending bins (remainder spread over the earliest bins), and report
/// per-bin MAE with a percentile-bootstrap confidence interval.
pub fn quantile_binned_error(
    records: &[PredictionRecord],
    n_bins: usize,
    n_bootstrap: usize,
    conf: f64,
    seed: u64,
) -> Result<Vec<QuantileBin>> {
    if n_bins == 0 {
        return Err(EvidentError::Config("n_bins must be >= 1".into()));
    }
    if records.len() < n_bins {
        return Err(EvidentError::Config(format!(
            "{} records cannot fill {} bins",
            records.len(),
            n_bins
        )));
    }
    if !(0.0 < conf && conf < 1.0) {
        return Err(EvidentError::Config(format!(
            "bootstrap confidence must be in (0,1), got {conf}"
        )));
    }
    let mut sorted: Vec<&PredictionRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.eu.total_cmp(&b.eu).then(a.id.cmp(&b.id)));

    let base = sorted.len() / n_bins;
    let rem = sorted.len() % n_bins;
    let mut bins = Vec::with_capacity(n_bins);
    let mut at = 0;
    for b in 0..n_bins {
        let size = base + usize::from(b < rem);
        let chunk = &sorted[at..at + size];
        at += size;
        let errors: Vec<f64> = chunk.iter().map(|r| r.abs_error()).collect();
        let mae = errors.iter().sum::<f64>() / errors.len() as f64;
        let (ci_low, ci_high) = bootstrap_mean_ci(&errors, n_bootstrap, conf, seed, b as u64);
        bins.push(QuantileBin {
            eu_low: chunk.first().unwrap().eu,
            eu_high: chunk.last().unwrap().eu,
            count: size,
            mae,
            ci_low,
            ci_high,
        });
    }
    Ok(bins)
}

// Percentile bootstrap over the mean; each resample owns a seed derived
// from (seed, bin, resample), so the result is identical however the
// resamples are scheduled.
fn bootstrap_mean_ci(
    values: &[f64],
    n_bootstrap: usize,
    conf: f64,
    seed: u64,
    stream: u64,
) -> (f64, f64) {
    if n_bootstrap == 0 {
        let m = values.iter().sum::<f64>() / values.len() as f64;
        return (m, m);
    }
    let mut means = crate::exec::map_range(n_bootstrap, |r| {
        let mut rng =
            ChaCha12Rng::seed_from_u64(seed ^ (stream << 40) ^ (r as u64).wrapping_mul(0x9E3779B9));
        let n = values.len();
        let mut acc = 0.0;
        for _ in 0..n {
            acc += values[rng.random_range(0..n)];
        }
        acc / n as f64
    });
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - conf) / 2.0;
    (percentile(&means, tail), percentile(&means, 1.0 - tail))
}

// Linear-interpolated percentile of a sorted slice.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Sparsification curves: retained-set MAE at rejection fractions
/// {0, 1/n, ..., (n-1)/n}, rejecting highest-EU first (`model`),
/// highest-|error| first (`oracle`), and the analytic random baseline
/// (flat at the full-set MAE). `ause` is the trapezoidal area under the
/// model curve divided by the full-set MAE.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sparsification {
    pub fractions: Vec<f64>,
    pub model: Vec<f64>,
    pub oracle: Vec<f64>,
    pub random: Vec<f64>,
    pub ause: f64,
}

pub fn sparsification(records: &[PredictionRecord], n_steps: usize) -> Result<Sparsification> {
    if records.len() < 2 {
        return Err(EvidentError::Config(
            "sparsification needs at least 2 records".into(),
        ));
    }
    if n_steps < 2 {
        return Err(EvidentError::Config("n_steps must be >= 2".into()));
    }
    let full_mae = error_metrics(records)?.0;

    // ascending orders; rejection removes the suffix (ties broken by id)
    let mut by_eu: Vec<&PredictionRecord> = records.iter().collect();
    by_eu.sort_by(|a, b| a.eu.total_cmp(&b.eu).then(a.id.cmp(&b.id)));
    let mut by_err: Vec<&PredictionRecord> = records.iter().collect();
    by_err.sort_by(|a, b| {
        a.abs_error()
            .total_cmp(&b.abs_error())
            .then(a.id.cmp(&b.id))
    });

    let retained_mae = |order: &[&PredictionRecord], keep: usize| -> f64 {
        order[..keep]
            .iter()
            .map(|r| r.abs_error())
            .sum::<f64>()
            / keep as f64
    };

    let n = records.len();
    let mut fractions = Vec::with_capacity(n_steps);
    let mut model = Vec::with_capacity(n_steps);
    let mut oracle = Vec::with_capacity(n_steps);
    let mut random = Vec::with_capacity(n_steps);
    for j in 0..n_steps {
        let f = j as f64 / n_steps as f64;
        let reject = ((f * n as f64).floor() as usize).min(n - 1);
        let keep = n - reject;
        fractions.push(f);
        model.push(retained_mae(&by_eu, keep));
        oracle.push(retained_mae(&by_err, keep));
        random.push(full_mae);
    }

    // trapezoid over the sampled fractions, normalized by the full MAE
    let mut area = 0.0;
    for j in 1..n_steps {
        let df = fractions[j] - fractions[j - 1];
        area += 0.5 * (model[j] + model[j - 1]) * df;
    }
    let ause = if full_mae > 0.0 { area / full_mae } else { 0.0 };

    Ok(Sparsification {
        fractions,
        model,
        oracle,
        random,
        ause,
    })
}

/// Full calibration summary for one prediction set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub n: usize,
    pub mae: f64,
    pub rmse: f64,
    pub picp: f64,
    pub mpiw: f64,
    pub coverage_level: f64,
    pub quantile_bins: Vec<QuantileBin>,
    pub sparsification: Sparsification,
    pub ause: f64,
}

/// Assemble the whole summary with the defaults used by the evaluation
/// command: 4 quantile bins, 1000 bootstrap resamples at 90%, 20
/// sparsification steps.
pub fn summarize(
    records: &[PredictionRecord],
    coverage_level: f64,
    seed: u64,
) -> Result<CalibrationSummary> {
    let (mae, rmse) = error_metrics(records)?;
    let (picp, mpiw) = coverage_metrics(records)?;
    let n_bins = 4.min(records.len());
    let quantile_bins = quantile_binned_error(records, n_bins, 1000, 0.9, seed)?;
    let sparsification = sparsification(records, 20.min(records.len().max(2)))?;
    Ok(CalibrationSummary {
        n: records.len(),
        mae,
        rmse,
        picp,
        mpiw,
        coverage_level,
        ause: sparsification.ause,
        quantile_bins,
        sparsification,
    })
}

// ---------------------------------------------------------------------------
// File formats: records CSV, curve CSVs, summary JSON.
// ---------------------------------------------------------------------------

pub fn write_records_csv(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)
            .map_err(|e| EvidentError::Parse(format!("serialize record: {e}")))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records_csv(path: &Path) -> Result<Vec<PredictionRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        let rec: PredictionRecord =
            row.map_err(|e| EvidentError::Parse(format!("{}: {e}", path.display())))?;
        if rec.low > rec.high {
            return Err(EvidentError::Parse(format!(
                "record {}: low {} above high {}",
                rec.id, rec.low, rec.high
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

/// Two-column CSV (fraction, mae) per curve, directly plottable.
pub fn write_curve_csv(path: &Path, xs: &[f64], ys: &[f64]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "fraction,mae")?;
    for (x, y) in xs.iter().zip(ys) {
        writeln!(f, "{x},{y}")?;
    }
    Ok(())
}

pub fn write_quantile_bins_csv(path: &Path, bins: &[QuantileBin]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "eu_low,eu_high,count,mae,ci_low,ci_high")?;
    for b in bins {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            b.eu_low, b.eu_high, b.count, b.mae, b.ci_low, b.ci_high
        )?;
    }
    Ok(())
}

pub fn write_summary_json(path: &Path, summary: &CalibrationSummary) -> Result<()> {
    let json = serde_json::to_string_pretty(summary)
        .map_err(|e| EvidentError::Parse(format!("summary json: {e}")))?;
    fs::write(path, json)?;
    Ok(())
}

impl From<csv::Error> for EvidentError {
    fn from(e: csv::Error) -> Self {
        EvidentError::Parse(format!("csv: {e}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use tempfile::tempdir;

    fn rec(id: usize, y: f64, score: f64, eu: f64, low: f64, high: f64) -> PredictionRecord {
        PredictionRecord {
            id,
            y,
            score,
            au: eu * 2.0,
            eu,
            low,
            high,
        }
    }

    #[test]
    fn error_metrics_hand_cases() {
        let perfect = vec![rec(0, 1.0, 1.0, 0.1, 0.0, 2.0), rec(1, -2.0, -2.0, 0.1, -3.0, -1.0)];
        assert_eq!(error_metrics(&perfect).unwrap(), (0.0, 0.0));

        // errors {1, -1}
        let pm = vec![rec(0, 1.0, 0.0, 0.1, 0.0, 1.0), rec(1, 0.0, 1.0, 0.1, 0.0, 1.0)];
        let (mae, rmse) = error_metrics(&pm).unwrap();
        assert!((mae - 1.0).abs() < 1e-15 && (rmse - 1.0).abs() < 1e-15);

        // errors {0, 2}
        let zt = vec![rec(0, 1.0, 1.0, 0.1, 0.0, 1.0), rec(1, 2.0, 0.0, 0.1, 0.0, 1.0)];
        let (mae, rmse) = error_metrics(&zt).unwrap();
        assert!((mae - 1.0).abs() < 1e-15);
        assert!((rmse - 2.0_f64.sqrt()).abs() < 1e-15);

        assert!(error_metrics(&[]).is_err());
    }

    #[test]
    fn coverage_hand_cases() {
        let all = vec![rec(0, 0.5, 0.5, 0.1, 0.0, 1.0), rec(1, 0.0, 0.5, 0.1, 0.0, 1.0)];
        let (picp, _) = coverage_metrics(&all).unwrap();
        assert_eq!(picp, 1.0);

        let two_thirds = vec![
            rec(0, 0.5, 0.5, 0.1, 0.0, 1.0),
            rec(1, 2.0, 0.5, 0.1, 0.0, 1.0),
            rec(2, 1.0, 0.5, 0.1, 0.0, 1.0), // boundary counts as covered
        ];
        let (picp, _) = coverage_metrics(&two_thirds).unwrap();
        assert!((picp - 2.0 / 3.0).abs() < 1e-12);

        let widths = vec![rec(0, 0.0, 0.0, 0.1, 0.0, 2.0), rec(1, 0.0, 0.0, 0.1, -2.0, 2.0)];
        let (_, mpiw) = coverage_metrics(&widths).unwrap();
        assert_eq!(mpiw, 3.0);
    }

    #[test]
    fn picp_mpiw_match_brute_force_on_random_records() {
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let records: Vec<PredictionRecord> = (0..100)
            .map(|i| {
                let lo = rng.random_range(-2.0..0.0);
                let hi = lo + rng.random_range(0.0..3.0);
                rec(
                    i,
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                    rng.random_range(0.01..2.0),
                    lo,
                    hi,
                )
            })
            .collect();
        let (picp, mpiw) = coverage_metrics(&records).unwrap();
        // independent recomputation
        let mut covered = 0usize;
        let mut width_sum = 0.0;
        for r in &records {
            if r.y >= r.low && r.y <= r.high {
                covered += 1;
            }
            width_sum += r.high - r.low;
        }
        assert!((picp - covered as f64 / 100.0).abs() < 1e-12);
        assert!((mpiw - width_sum / 100.0).abs() < 1e-12);
    }

    #[test]
    fn quantile_bins_uniform_eu_and_identical_errors() {
        // identical errors, distinct EU -> every bin shares the same MAE
        let records: Vec<PredictionRecord> = (0..8)
            .map(|i| rec(i, 1.0, 0.0, i as f64, 0.0, 1.0))
            .collect();
        let bins = quantile_binned_error(&records, 4, 100, 0.9, 5).unwrap();
        assert_eq!(bins.len(), 4);
        for b in &bins {
            assert!((b.mae - 1.0).abs() < 1e-12);
            assert_eq!(b.count, 2);
        }
    }

    #[test]
    fn quantile_bins_monotone_when_eu_tracks_error() {
        let records: Vec<PredictionRecord> = (0..12)
            .map(|i| rec(i, i as f64, 0.0, i as f64, 0.0, 1.0))
            .collect();
        let bins = quantile_binned_error(&records, 4, 100, 0.9, 5).unwrap();
        for w in bins.windows(2) {
            assert!(w[1].mae > w[0].mae);
        }
    }

    #[test]
    fn quantile_bins_against_enumeration_oracle() {
        // 8 records, hand-assigned EU and errors, 4 bins of 2
        let eus = [0.7, 0.1, 0.5, 0.9, 0.3, 0.8, 0.2, 0.6];
        let errs = [3.0, 1.0, 2.0, 4.0, 1.5, 3.5, 1.2, 2.5];
        let records: Vec<PredictionRecord> = (0..8)
            .map(|i| rec(i, errs[i], 0.0, eus[i], 0.0, 1.0))
            .collect();
        let bins = quantile_binned_error(&records, 4, 0, 0.9, 5).unwrap();

        // brute-force oracle: sort (eu, id) pairs, chunk, average
        let mut order: Vec<usize> = (0..8).collect();
        order.sort_by(|&a, &b| eus[a].total_cmp(&eus[b]).then(a.cmp(&b)));
        for (b, chunk) in order.chunks(2).enumerate() {
            let expect = chunk.iter().map(|&i| errs[i]).sum::<f64>() / 2.0;
            assert!(
                (bins[b].mae - expect).abs() < 1e-12,
                "bin {b}: {} vs {expect}",
                bins[b].mae
            );
        }
    }

    #[test]
    fn quantile_bins_remainder_goes_to_earliest_bins() {
        let records: Vec<PredictionRecord> = (0..10)
            .map(|i| rec(i, 0.0, 0.0, i as f64, 0.0, 1.0))
            .collect();
        let bins = quantile_binned_error(&records, 4, 0, 0.9, 5).unwrap();
        assert_eq!(
            bins.iter().map(|b| b.count).collect::<Vec<_>>(),
            vec![3, 3, 2, 2]
        );
    }

    #[test]
    fn quantile_bins_reject_small_sets() {
        let records: Vec<PredictionRecord> =
            (0..3).map(|i| rec(i, 0.0, 0.0, 0.1, 0.0, 1.0)).collect();
        assert!(quantile_binned_error(&records, 4, 10, 0.9, 5).is_err());
    }

    #[test]
    fn bootstrap_is_reproducible() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let records: Vec<PredictionRecord> = (0..40)
            .map(|i| {
                rec(
                    i,
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(0.01..1.0),
                    0.0,
                    1.0,
                )
            })
            .collect();
        let a = quantile_binned_error(&records, 4, 500, 0.9, 77).unwrap();
        let b = quantile_binned_error(&records, 4, 500, 0.9, 77).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.ci_low, y.ci_low);
            assert_eq!(x.ci_high, y.ci_high);
        }
        // CI brackets the point estimate
        for bin in &a {
            assert!(bin.ci_low <= bin.mae + 1e-12 && bin.mae - 1e-12 <= bin.ci_high);
        }
    }

    #[test]
    fn sparsification_perfect_ranking_matches_oracle() {
        // EU ordered exactly like |error|
        let records: Vec<PredictionRecord> = (0..10)
            .map(|i| rec(i, i as f64, 0.0, i as f64 * 0.1, 0.0, 1.0))
            .collect();
        let s = sparsification(&records, 5).unwrap();
        for (m, o) in s.model.iter().zip(&s.oracle) {
            assert!((m - o).abs() < 1e-12);
        }
        // random baseline flat at full MAE
        let full = error_metrics(&records).unwrap().0;
        for r in &s.random {
            assert!((r - full).abs() < 1e-12);
        }
    }

    #[test]
    fn sparsification_four_records_brute_force() {
        // errors: 1, 4, 2, 3; EU ranks: 0.1, 0.4, 0.3, 0.2
        let records = vec![
            rec(0, 1.0, 0.0, 0.1, 0.0, 1.0),
            rec(1, 4.0, 0.0, 0.4, 0.0, 1.0),
            rec(2, 2.0, 0.0, 0.3, 0.0, 1.0),
            rec(3, 3.0, 0.0, 0.2, 0.0, 1.0),
        ];
        let s = sparsification(&records, 4).unwrap();
        // f=0: all -> 2.5 ; f=1/4: drop id1 -> (1+2+3)/3 = 2 ;
        // f=1/2: drop id1,id2 -> (1+3)/2 = 2 ; f=3/4: keep id0 -> 1
        assert_eq!(s.fractions, vec![0.0, 0.25, 0.5, 0.75]);
        let expect = [2.5, 2.0, 2.0, 1.0];
        for (m, e) in s.model.iter().zip(expect) {
            assert!((m - e).abs() < 1e-12, "model {m} vs {e}");
        }
        // oracle drops by error: 2.5, 2.0, 1.5, 1.0
        let expect_oracle = [2.5, 2.0, 1.5, 1.0];
        for (o, e) in s.oracle.iter().zip(expect_oracle) {
            assert!((o - e).abs() < 1e-12);
        }
        // AUSE: trapezoid of model curve / full MAE
        let area = 0.25 * ((2.5 + 2.0) / 2.0 + (2.0 + 2.0) / 2.0 + (2.0 + 1.0) / 2.0);
        assert!((s.ause - area / 2.5).abs() < 1e-12);
    }

    #[test]
    fn summary_json_and_records_csv_round_trip() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let records: Vec<PredictionRecord> = (0..30)
            .map(|i| {
                let score = rng.random_range(-2.0..2.0);
                rec(
                    i,
                    score + rng.random_range(-1.0..1.0),
                    score,
                    rng.random_range(0.01..1.0),
                    score - 1.5,
                    score + 1.5,
                )
            })
            .collect();
        let dir = tempdir().unwrap();
        let path = dir.path().join("records.csv");
        write_records_csv(&path, &records).unwrap();
        let back = read_records_csv(&path).unwrap();
        assert_eq!(records, back);

        let summary = summarize(&records, 0.9, 3).unwrap();
        let jpath = dir.path().join("summary.json");
        write_summary_json(&jpath, &summary).unwrap();
        let text = std::fs::read_to_string(&jpath).unwrap();
        let parsed: CalibrationSummary = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed.n, 30);
        assert!((parsed.mae - summary.mae).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn prop_oracle_curve_dominates_model_curve(seed in 0u64..1000, n in 4usize..40) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let records: Vec<PredictionRecord> = (0..n)
                .map(|i| rec(
                    i,
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                    rng.random_range(0.0..3.0),
                    0.0,
                    1.0,
                ))
                .collect();
            let s = sparsification(&records, 8).unwrap();
            for (m, o) in s.model.iter().zip(&s.oracle) {
                prop_assert!(*o <= m + 1e-12);
            }
            prop_assert!(s.fractions.windows(2).all(|w| w[1] > w[0]));
        }
    }
}
