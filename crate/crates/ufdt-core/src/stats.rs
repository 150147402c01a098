//! Group-comparison statistics for the report stage.

use statrs::distribution::{ContinuousCDF, FisherSnedecor, StudentsT};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("need at least {needed} groups, got {got}")]
    TooFewGroups { needed: usize, got: usize },
    #[error("each group needs at least 2 samples")]
    TooFewSamples,
    #[error("zero within-group variance with equal means: F is undefined")]
    DegenerateAnova,
    #[error("both samples are constant and equal: t is undefined")]
    DegenerateTTest,
}

/// Samples grouped for a variance-based comparison.
#[derive(Debug, Clone)]
pub struct GroupSamples {
    pub groups: Vec<Vec<f64>>,
}

impl GroupSamples {
    pub fn new(groups: Vec<Vec<f64>>) -> Self {
        Self { groups }
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sum_sq_dev(xs: &[f64], m: f64) -> f64 {
    xs.iter().map(|&x| (x - m) * (x - m)).sum()
}

/// Classical one-way ANOVA. Returns (F, p) with p from the F(k−1, N−k)
/// distribution. Zero within-group variance yields F = ∞, p = 0 when the
/// means differ, and an error when they do not (0/0).
pub fn one_way_anova(samples: &GroupSamples) -> Result<(f64, f64), StatsError> {
    let k = samples.groups.len();
    if k < 2 {
        return Err(StatsError::TooFewGroups { needed: 2, got: k });
    }
    if samples.groups.iter().any(|g| g.len() < 2) {
        return Err(StatsError::TooFewSamples);
    }
    let n_total: usize = samples.groups.iter().map(|g| g.len()).sum();
    let grand = samples.groups.iter().flatten().sum::<f64>() / n_total as f64;

    let mut ss_between = 0.0;
    let mut ss_within = 0.0;
    for g in &samples.groups {
        let m = mean(g);
        ss_between += g.len() as f64 * (m - grand) * (m - grand);
        ss_within += sum_sq_dev(g, m);
    }
    let df_between = (k - 1) as f64;
    let df_within = (n_total - k) as f64;

    if ss_within == 0.0 {
        if ss_between == 0.0 {
            return Err(StatsError::DegenerateAnova);
        }
        return Ok((f64::INFINITY, 0.0));
    }

    let f = (ss_between / df_between) / (ss_within / df_within);
    let dist = FisherSnedecor::new(df_between, df_within).expect("valid dof");
    let p = 1.0 - dist.cdf(f);
    Ok((f, p))
}

/// Which two-sample t-test variant to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TTestKind {
    /// Unequal-variance (Welch–Satterthwaite) test.
    #[default]
    Welch,
    /// Pooled-variance test; with two groups its F = t² matches ANOVA.
    Pooled,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTestResult {
    pub t: f64,
    pub p: f64,
    pub significant: bool,
}

/// Two-sample two-sided t-test, Welch by default. Significance at p < 0.05.
pub fn t_test(a: &[f64], b: &[f64], kind: TTestKind) -> Result<TTestResult, StatsError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(StatsError::TooFewSamples);
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, mb) = (mean(a), mean(b));
    let va = sum_sq_dev(a, ma) / (na - 1.0);
    let vb = sum_sq_dev(b, mb) / (nb - 1.0);

    let (t, df) = match kind {
        TTestKind::Welch => {
            let se2 = va / na + vb / nb;
            if se2 == 0.0 {
                if ma == mb {
                    return Err(StatsError::DegenerateTTest);
                }
                return Ok(TTestResult {
                    t: f64::INFINITY * (ma - mb).signum(),
                    p: 0.0,
                    significant: true,
                });
            }
            let df = se2 * se2
                / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
            ((ma - mb) / se2.sqrt(), df)
        }
        TTestKind::Pooled => {
            let sp2 = ((na - 1.0) * va + (nb - 1.0) * vb) / (na + nb - 2.0);
            if sp2 == 0.0 {
                if ma == mb {
                    return Err(StatsError::DegenerateTTest);
                }
                return Ok(TTestResult {
                    t: f64::INFINITY * (ma - mb).signum(),
                    p: 0.0,
                    significant: true,
                });
            }
            let se = (sp2 * (1.0 / na + 1.0 / nb)).sqrt();
            ((ma - mb) / se, na + nb - 2.0)
        }
    };

    let dist = StudentsT::new(0.0, 1.0, df).expect("valid dof");
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok(TTestResult {
        t,
        p,
        significant: p < 0.05,
    })
}
