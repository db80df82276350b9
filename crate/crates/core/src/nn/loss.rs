/// Floor applied to probabilities inside the logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `-Σ t·ln p`.
pub fn ce_loss(p: &[f64], t: &[f64]) -> f64 {
    -p.iter().zip(t).map(|(&pi, &ti)| if ti == 0.0 { 0.0 } else { ti * pi.max(LOG_CLAMP).ln() }).sum::<f64>()
}

/// Gradient of `ce_loss(softmax(z), t)` with respect to `z`: `p - t`.
pub fn ce_softmax_backward(p: &[f64], t: &[f64]) -> Vec<f64> {
    p.iter().zip(t).map(|(pi, ti)| pi - ti).collect()
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
