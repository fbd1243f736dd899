//! Run summaries and the independent two-sample (pooled variance) t-test.

use serde::{Deserialize, Serialize};

use super::HarnessError;

/// Outcome of one evaluation seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed_index: u64,
    pub best_val_loss: f64,
    pub best_step: u64,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub runs: usize,
    pub test_loss_mean: f64,
    pub test_loss_std: f64,
    pub test_accuracy_mean: f64,
    pub test_accuracy_std: f64,
    pub best_val_loss_mean: f64,
    pub best_val_loss_std: f64,
    pub per_seed: Vec<SeedResult>,
}

/// Mean and sample standard deviation (divisor n-1; 0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 || values.iter().all(|&v| v == values[0]) {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}

impl RunSummary {
    pub fn from_seeds(label: impl Into<String>, per_seed: Vec<SeedResult>) -> Self {
        let col = |f: fn(&SeedResult) -> f64| mean_std(&per_seed.iter().map(f).collect::<Vec<_>>());
        let (test_loss_mean, test_loss_std) = col(|s| s.test_loss);
        let (test_accuracy_mean, test_accuracy_std) = col(|s| s.test_accuracy);
        let (best_val_loss_mean, best_val_loss_std) = col(|s| s.best_val_loss);
        Self {
            label: label.into(),
            runs: per_seed.len(),
            test_loss_mean,
            test_loss_std,
            test_accuracy_mean,
            test_accuracy_std,
            best_val_loss_mean,
            best_val_loss_std,
            per_seed,
        }
    }

    pub fn test_losses(&self) -> Vec<f64> {
        self.per_seed.iter().map(|s| s.test_loss).collect()
    }

    pub fn test_accuracies(&self) -> Vec<f64> {
        self.per_seed.iter().map(|s| s.test_accuracy).collect()
    }

    pub fn best_val_losses(&self) -> Vec<f64> {
        self.per_seed.iter().map(|s| s.best_val_loss).collect()
    }
}

pub const SIGNIFICANCE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
    pub significant: bool,
}

/// Independent two-sample t-test with pooled variance, two-sided.
pub fn t_test(a: &[f64], b: &[f64]) -> Result<TTest, HarnessError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(HarnessError::Stats(format!(
            "t-test needs at least 2 values per sample (got {} and {})",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, sa) = mean_std(a);
    let (mb, sb) = mean_std(b);
    let df = na + nb - 2.0;
    let pooled = ((na - 1.0) * sa * sa + (nb - 1.0) * sb * sb) / df;
    if pooled == 0.0 {
        return Ok(if ma == mb {
            TTest {
                t: 0.0,
                df,
                p_value: 1.0,
                significant: false,
            }
        } else {
            TTest {
                t: if ma > mb { f64::INFINITY } else { f64::NEG_INFINITY },
                df,
                p_value: 0.0,
                significant: true,
            }
        });
    }
    let t = (ma - mb) / (pooled * (1.0 / na + 1.0 / nb)).sqrt();
    let p_value = student_t_two_sided_p(t, df);
    Ok(TTest {
        t,
        df,
        p_value,
        significant: p_value < SIGNIFICANCE,
    })
}

/// `P(|T| >= |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided_p(t: f64, df: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    regularized_incomplete_beta(df / (df + t * t), df / 2.0, 0.5).clamp(0.0, 1.0)
}

/// Lanczos approximation (g = 7, 9 terms).
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// `I_x(a, b)` via the continued fraction, using the symmetry
/// `I_x(a, b) = 1 - I_{1-x}(b, a)` where it converges faster.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_continued_fraction(x, a, b) / a
    } else {
        1.0 - ln_front.exp() * beta_continued_fraction(1.0 - x, b, a) / b
    }
}

/// Modified Lentz evaluation of the incomplete-beta continued fraction.
fn beta_continued_fraction(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=1000 {
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
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}
