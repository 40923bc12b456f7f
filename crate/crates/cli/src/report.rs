//! Seed-sweep aggregation: mean test accuracy with a 95% confidence
//! interval (normal approximation, 1.96 * s / sqrt(k) with the sample
//! standard deviation).

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Confidence {
    pub mean: f64,
    /// Half-width of the 95% interval; `None` with fewer than 2 samples.
    pub ci95_half_width: Option<f64>,
    pub count: usize,
}

pub fn report_confidence(values: &[f64]) -> Confidence {
    let count = values.len();
    if count == 0 {
        return Confidence {
            mean: f64::NAN,
            ci95_half_width: None,
            count,
        };
    }
    let mean = values.iter().sum::<f64>() / count as f64;
    if count < 2 {
        return Confidence {
            mean,
            ci95_half_width: None,
            count,
        };
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (count - 1) as f64;
    Confidence {
        mean,
        ci95_half_width: Some(1.96 * var.sqrt() / (count as f64).sqrt()),
        count,
    }
}
