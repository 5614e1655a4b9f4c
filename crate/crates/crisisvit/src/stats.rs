//! Scorecards, paired significance testing, and table-shaped comparison
//! reports: per-task mean accuracies with an AVG column, two-sided paired
//! t-tests against a named baseline, and the Holm step-down correction for
//! the family of comparisons.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::benchmark::{RunResult, TaskId};
use crate::error::{Error, Result};

/// Presentation metadata for one system's row in the comparison table.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScorecardMeta {
    /// Grouping key for row ordering (e.g. "cnn", "vit", "in-domain").
    pub family: String,
    pub self_supervised: String,
    pub supervised: String,
    pub methodology: String,
    pub epochs: String,
    /// True for rows injected from published results rather than runs
    /// produced by this toolkit.
    pub reference: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training_hours: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScores {
    pub runs: Vec<f64>,
    pub mean: f64,
}

/// Per-task mean accuracies (percentage points) plus their arithmetic mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemScorecard {
    pub system: String,
    #[serde(default)]
    pub meta: ScorecardMeta,
    pub tasks: BTreeMap<TaskId, TaskScores>,
    pub avg: f64,
}

impl SystemScorecard {
    pub fn task_mean(&self, task: TaskId) -> Option<f64> {
        self.tasks.get(&task).map(|t| t.mean)
    }

    /// AVG recomputed from the stored per-task means; always exact.
    pub fn recompute_avg(&self) -> f64 {
        let sum: f64 = self.tasks.values().map(|t| t.mean).sum();
        sum / self.tasks.len() as f64
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let card: SystemScorecard = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if (card.recompute_avg() - card.avg).abs() > 1e-9 {
            return Err(Error::Integrity(format!(
                "scorecard {}: AVG {} does not match per-task means",
                card.system, card.avg
            )));
        }
        Ok(card)
    }
}

/// Build a scorecard from per-task accuracy values (as given; no unit
/// conversion). All four tasks must be present with at least one run each.
pub fn scorecard(
    system: impl Into<String>,
    meta: ScorecardMeta,
    runs_by_task: &BTreeMap<TaskId, Vec<f64>>,
) -> Result<SystemScorecard> {
    let mut tasks = BTreeMap::new();
    for task in TaskId::ALL {
        let runs = runs_by_task
            .get(&task)
            .ok_or_else(|| Error::Data(format!("missing task {}", task.as_str())))?;
        if runs.is_empty() {
            return Err(Error::Data(format!("task {} has no runs", task.as_str())));
        }
        let mean = runs.iter().sum::<f64>() / runs.len() as f64;
        tasks.insert(
            task,
            TaskScores {
                runs: runs.clone(),
                mean,
            },
        );
    }
    let avg = tasks.values().map(|t| t.mean).sum::<f64>() / tasks.len() as f64;
    Ok(SystemScorecard {
        system: system.into(),
        meta,
        tasks,
        avg,
    })
}

/// Scorecard from executed runs; accuracies are converted to percentage
/// points to match the reporting convention.
pub fn scorecard_from_runs(
    system: impl Into<String>,
    meta: ScorecardMeta,
    runs: &[RunResult],
) -> Result<SystemScorecard> {
    let mut by_task: BTreeMap<TaskId, Vec<f64>> = BTreeMap::new();
    for r in runs {
        by_task
            .entry(r.task_id)
            .or_default()
            .push(r.accuracy * 100.0);
    }
    scorecard(system, meta, &by_task)
}

/// Two-sided paired t-test. Both samples are paired by index and must have
/// equal length at least 2. All-zero differences give p = 1 by convention.
pub fn paired_t_test(sample_a: &[f64], sample_b: &[f64]) -> Result<f64> {
    if sample_a.len() != sample_b.len() {
        return Err(Error::Stats(format!(
            "paired samples differ in length: {} vs {}",
            sample_a.len(),
            sample_b.len()
        )));
    }
    let n = sample_a.len();
    if n < 2 {
        return Err(Error::Stats("paired t-test needs at least 2 pairs".into()));
    }
    let diffs: Vec<f64> = sample_a.iter().zip(sample_b).map(|(a, b)| a - b).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let ss: f64 = diffs.iter().map(|d| (d - mean) * (d - mean)).sum();
    let var = ss / (n as f64 - 1.0);
    if var == 0.0 {
        // all differences equal: identical samples are indistinguishable
        // (p = 1); a constant nonzero shift is infinitely significant.
        return Ok(if mean == 0.0 { 1.0 } else { 0.0 });
    }
    let se = (var / n as f64).sqrt();
    let t = mean / se;
    let dof = (n - 1) as f64;
    Ok(student_t_two_sided_p(t, dof))
}

/// Two-sided p-value for a Student-t statistic via the regularized
/// incomplete beta function: p = I_{v/(v+t^2)}(v/2, 1/2).
pub fn student_t_two_sided_p(t: f64, dof: f64) -> f64 {
    if !t.is_finite() {
        return 0.0;
    }
    let x = dof / (dof + t * t);
    incomplete_beta(dof / 2.0, 0.5, x).clamp(0.0, 1.0)
}

/// Regularized incomplete beta I_x(a, b) by continued fraction.
fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_beta = ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b);
    let front = (a * x.ln() + b * (1.0 - x).ln() - ln_beta).exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 1e-15;
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Lanczos approximation of ln Gamma(x).
fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 6] = [
        76.180_091_729_471_46,
        -86.505_320_329_416_77,
        24.014_098_240_830_91,
        -1.231_739_572_450_155,
        0.120_865_097_386_617_7e-2,
        -0.539_523_938_495_3e-5,
    ];
    let mut y = x;
    let tmp = x + 5.5;
    let tmp = tmp - (x + 0.5) * tmp.ln();
    let mut ser = 1.000_000_000_190_015;
    for c in COEFFS {
        y += 1.0;
        ser += c / y;
    }
    -tmp + (2.506_628_274_631_000_5 * ser / x).ln()
}

/// Holm step-down correction: sort p-values ascending, reject p_(i) while
/// p_(i) <= alpha / (m - i + 1), stop at the first failure. Decisions are
/// returned in the original order. Rejects at least as much as plain
/// Bonferroni on every input.
pub fn holm_bonferroni(p_values: &[f64], alpha: f64) -> Result<Vec<bool>> {
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::Stats(format!(
            "alpha must be in (0, 1), got {alpha}"
        )));
    }
    for &p in p_values {
        if !(0.0..=1.0).contains(&p) || p.is_nan() {
            return Err(Error::Stats(format!("p-value {p} outside [0, 1]")));
        }
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| p_values[i].partial_cmp(&p_values[j]).unwrap());
    let mut decisions = vec![false; m];
    for (rank, &idx) in order.iter().enumerate() {
        let threshold = alpha / (m - rank) as f64;
        if p_values[idx] <= threshold {
            decisions[idx] = true;
        } else {
            break;
        }
    }
    Ok(decisions)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Comparison {
    pub system: String,
    pub raw_p: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SignificanceReport {
    pub baseline: String,
    pub alpha: f64,
    pub method: String,
    pub comparisons: Vec<Comparison>,
}

impl SignificanceReport {
    pub fn is_significant(&self, system: &str) -> Option<bool> {
        self.comparisons
            .iter()
            .find(|c| c.system == system)
            .map(|c| c.significant)
    }
}

/// Paired accuracy vectors for two systems: per-run accuracies paired by
/// seed index, concatenated across the four tasks.
fn paired_vectors(a: &SystemScorecard, b: &SystemScorecard) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut va = Vec::new();
    let mut vb = Vec::new();
    for task in TaskId::ALL {
        let ta = a
            .tasks
            .get(&task)
            .ok_or_else(|| Error::Data(format!("{}: missing {}", a.system, task.as_str())))?;
        let tb = b
            .tasks
            .get(&task)
            .ok_or_else(|| Error::Data(format!("{}: missing {}", b.system, task.as_str())))?;
        if ta.runs.len() != tb.runs.len() {
            return Err(Error::Stats(format!(
                "systems {} and {} have different run counts for {}",
                a.system,
                b.system,
                task.as_str()
            )));
        }
        va.extend_from_slice(&ta.runs);
        vb.extend_from_slice(&tb.runs);
    }
    Ok((va, vb))
}

/// Test every non-reference system against the baseline and correct the
/// family of p-values with the Holm step-down procedure.
pub fn significance_vs_baseline(
    scorecards: &[SystemScorecard],
    baseline: &str,
    alpha: f64,
) -> Result<SignificanceReport> {
    let base = scorecards
        .iter()
        .find(|s| s.system == baseline)
        .ok_or_else(|| Error::config("baseline", format!("baseline {baseline} not found")))?;
    let mut systems = Vec::new();
    let mut ps = Vec::new();
    for card in scorecards {
        if card.system == baseline || card.meta.reference {
            continue;
        }
        let (a, b) = paired_vectors(card, base)?;
        systems.push(card.system.clone());
        ps.push(paired_t_test(&a, &b)?);
    }
    let decisions = holm_bonferroni(&ps, alpha)?;
    Ok(SignificanceReport {
        baseline: baseline.to_string(),
        alpha,
        method: "paired t-test with Holm step-down correction".into(),
        comparisons: systems
            .into_iter()
            .zip(ps)
            .zip(decisions)
            .map(|((system, raw_p), significant)| Comparison {
                system,
                raw_p,
                significant,
            })
            .collect(),
    })
}

/// Round half-up to two decimals for display; ties go away from zero.
pub fn display_round(v: f64) -> f64 {
    (v * 100.0 + 0.5 * v.signum()).trunc() / 100.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub system: String,
    pub family: String,
    pub reference: bool,
    pub self_supervised: String,
    pub supervised: String,
    pub methodology: String,
    pub epochs: String,
    pub disaster_types: f64,
    pub informativeness: f64,
    pub humanitarian: f64,
    pub damage_severity: f64,
    pub avg: f64,
    /// Unrounded AVG difference vs the baseline row.
    pub avg_gain_vs_baseline: f64,
    pub significant: Option<bool>,
    pub raw_p: Option<f64>,
    pub is_baseline: bool,
    pub training_hours: Option<f64>,
    pub column_max: BTreeMap<String, bool>,
}

#[derive(Debug, Clone)]
pub struct TableReport {
    pub rows: Vec<ReportRow>,
    pub text: String,
    pub csv: String,
}

fn fmt_cell(value: f64, is_max: bool) -> String {
    let rounded = format!("{:.2}", display_round(value));
    if is_max {
        format!("[{rounded}]")
    } else {
        rounded
    }
}

/// Emit the comparison table: rows sorted by experiment family, `*` after
/// the AVG of systems significantly different from the baseline, and the
/// per-column maximum bracketed. Returns a fixed-width text rendering plus
/// a machine-readable CSV with unrounded values.
pub fn emit_table(
    scorecards: &[SystemScorecard],
    significance: Option<&SignificanceReport>,
    baseline: &str,
) -> Result<TableReport> {
    let base = scorecards
        .iter()
        .find(|s| s.system == baseline)
        .ok_or_else(|| Error::config("baseline", format!("baseline {baseline} not found")))?;
    let base_avg = base.avg;

    let mut sorted: Vec<&SystemScorecard> = scorecards.iter().collect();
    sorted.sort_by(|a, b| (&a.meta.family, &a.system).cmp(&(&b.meta.family, &b.system)));

    let col = |card: &SystemScorecard, task: TaskId| card.task_mean(task).unwrap_or(f64::NAN);
    let mut rows: Vec<ReportRow> = sorted
        .iter()
        .map(|card| ReportRow {
            system: card.system.clone(),
            family: card.meta.family.clone(),
            reference: card.meta.reference,
            self_supervised: card.meta.self_supervised.clone(),
            supervised: card.meta.supervised.clone(),
            methodology: card.meta.methodology.clone(),
            epochs: card.meta.epochs.clone(),
            disaster_types: col(card, TaskId::DisasterTypes),
            informativeness: col(card, TaskId::Informativeness),
            humanitarian: col(card, TaskId::Humanitarian),
            damage_severity: col(card, TaskId::DamageSeverity),
            avg: card.avg,
            avg_gain_vs_baseline: card.avg - base_avg,
            significant: significance.and_then(|s| s.is_significant(&card.system)),
            raw_p: significance.and_then(|s| {
                s.comparisons
                    .iter()
                    .find(|c| c.system == card.system)
                    .map(|c| c.raw_p)
            }),
            is_baseline: card.system == baseline,
            training_hours: card.meta.training_hours,
            column_max: BTreeMap::new(),
        })
        .collect();

    type ColumnGet = fn(&ReportRow) -> f64;
    let columns: [(&str, ColumnGet); 5] = [
        ("disaster_types", |r| r.disaster_types),
        ("informativeness", |r| r.informativeness),
        ("humanitarian", |r| r.humanitarian),
        ("damage_severity", |r| r.damage_severity),
        ("avg", |r| r.avg),
    ];
    for (name, get) in columns {
        let max = rows.iter().map(&get).fold(f64::NEG_INFINITY, f64::max);
        for row in rows.iter_mut() {
            let is_max = (get(row) - max).abs() < 1e-12;
            row.column_max.insert(name.to_string(), is_max);
        }
    }

    let mut text = String::new();
    text.push_str(&format!(
        "{:<34} {:<14} {:<26} {:<30} {:>6} {:>10} {:>8} {:>8} {:>8} {:>10} {:>8}\n",
        "System",
        "Self-Sup.",
        "Supervised",
        "Methodology",
        "Epochs",
        "Disaster",
        "Info",
        "Human",
        "Damage",
        "AVG",
        "Time(h)"
    ));
    text.push_str(&"-".repeat(170));
    text.push('\n');
    for row in &rows {
        let mut name = row.system.clone();
        if row.reference {
            name.push_str(" [paper-reported]");
        }
        if row.is_baseline {
            name.push_str(" (baseline)");
        }
        let avg_cell = {
            let mut cell = fmt_cell(row.avg, row.column_max["avg"]);
            if row.significant == Some(true) {
                cell.push('*');
            }
            cell
        };
        text.push_str(&format!(
            "{:<34} {:<14} {:<26} {:<30} {:>6} {:>10} {:>8} {:>8} {:>8} {:>10} {:>8}\n",
            name,
            row.self_supervised,
            row.supervised,
            row.methodology,
            row.epochs,
            fmt_cell(row.disaster_types, row.column_max["disaster_types"]),
            fmt_cell(row.informativeness, row.column_max["informativeness"]),
            fmt_cell(row.humanitarian, row.column_max["humanitarian"]),
            fmt_cell(row.damage_severity, row.column_max["damage_severity"]),
            avg_cell,
            row.training_hours
                .map_or("N/A".to_string(), |h| format!("{h:.0}")),
        ));
    }
    if let Some(sig) = significance {
        text.push_str(&format!(
            "\n* significant difference vs {} (paired t-test, Holm correction, alpha = {})\n",
            sig.baseline, sig.alpha
        ));
    }
    text.push_str("[value] marks the per-column maximum; [paper-reported] rows are published numbers, not reproduced runs.\n");

    let mut csv = String::from(
        "system,family,reference,self_supervised,supervised,methodology,epochs,disaster_types,informativeness,humanitarian,damage_severity,avg,avg_gain_vs_baseline,raw_p,significant,training_hours\n",
    );
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            row.system.replace(',', ";"),
            row.family,
            row.reference,
            row.self_supervised,
            row.supervised.replace(',', ";"),
            row.methodology.replace(',', ";"),
            row.epochs,
            row.disaster_types,
            row.informativeness,
            row.humanitarian,
            row.damage_severity,
            row.avg,
            row.avg_gain_vs_baseline,
            row.raw_p.map_or(String::new(), |p| p.to_string()),
            row.significant.map_or(String::new(), |s| s.to_string()),
            row.training_hours.map_or(String::new(), |h| h.to_string()),
        ));
    }

    Ok(TableReport { rows, text, csv })
}
